#include "doctest_torch.hpp"

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <thread>

#include <nlohmann/json.hpp>

#include "sdm/image_io.hpp"
#include "sdm/service.hpp"
#include "support.hpp"

using namespace sdm;
using nlohmann::json;

namespace {

InferenceModel small_model(Denoiser denoiser = analytic_gaussian_denoiser(0.0, 0.5)) {
    InferenceModel m;
    m.config = testing::mini_config();
    m.scene.image_size = m.config.image_size;
    m.scene.num_classes = m.config.num_classes;
    m.schedule = default_linear_schedule(20);
    m.denoiser = std::move(denoiser);
    return m;
}

// Runs a service on a free port for the lifetime of the object.
class Running {
public:
    Running(InferenceModel model, ServiceConfig config)
        : service_(std::move(model), config), port_(service_.bind("127.0.0.1", 0)),
          thread_([this] { service_.run(); }), client_("127.0.0.1", port_) {
        client_.set_read_timeout(60);
        for (int i = 0; i < 200 && !client_.Get("/health"); ++i) {
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
    }
    ~Running() {
        service_.stop();
        thread_.join();
    }

    httplib::Client& client() { return client_; }

    json post(const std::string& path, const json& body, int expected) {
        auto res = client_.Post(path, body.dump(), "application/json");
        REQUIRE(res);
        CHECK(res->status == expected);
        return json::parse(res->body);
    }

    json get(const std::string& path, int expected = 200) {
        auto res = client_.Get(path);
        REQUIRE(res);
        CHECK(res->status == expected);
        return json::parse(res->body);
    }

    json wait(const std::string& id) {
        json s;
        for (int i = 0; i < 6000; ++i) {
            s = get("/jobs/" + id);
            if (s["state"] == "done" || s["state"] == "failed") break;
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        return s;
    }

private:
    Service service_;
    int port_;
    std::thread thread_;
    httplib::Client client_;
};

json grid_json(const torch::Tensor& labels) {
    json rows = json::array();
    for (int64_t y = 0; y < labels.size(0); ++y) {
        json row = json::array();
        for (int64_t x = 0; x < labels.size(1); ++x) row.push_back(labels[y][x].item<int64_t>());
        rows.push_back(row);
    }
    return rows;
}

std::vector<Png> decode_images(const json& result) {
    std::vector<Png> out;
    for (const auto& s : result.at("images")) out.push_back(base64_decode(s.get<std::string>()));
    return out;
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("health and palette") {
    Running srv(small_model(), ServiceConfig{});
    const auto health = srv.get("/health");
    CHECK(health["status"] == "ok");
    CHECK(health["image_size"] == 8);
    CHECK(health["num_classes"] == 3);
    CHECK(health["model_config"]["conditioning"] == "spade");

    const auto palette = srv.get("/palette");
    REQUIRE(palette["classes"].size() == 3);
    CHECK(palette["classes"][0]["hue"].is_null());
    CHECK(palette["classes"][0]["name"] == "background");
    CHECK(palette["classes"][2]["hue"].get<double>() == doctest::Approx(180.0));
    CHECK(palette["classes"][1]["color"].size() == 3);

    srv.get("/jobs/job999", 404);
}

TEST_CASE("generation matches the library and is deterministic") {
    const auto model = small_model();
    Running srv(model, ServiceConfig{});
    SceneSpec spec = model.scene;
    const auto labels = generate_scene(spec, 5).labels;
    const json request{{"layout", grid_json(labels)}, {"seed", 17}, {"num_samples", 2}, {"steps", 10}};

    const auto a = srv.post("/generate", request, 202);
    CHECK(a["resized"] == false);
    const auto status = srv.wait(a["job_id"]);
    CHECK(status["state"] == "done");
    CHECK(status["progress"] == 1.0);
    const auto images = decode_images(srv.get("/jobs/" + a["job_id"].get<std::string>() + "/result"));
    REQUIRE(images.size() == 2);
    CHECK(images[0] != images[1]);

    const auto b = srv.post("/generate", request, 202);
    srv.wait(b["job_id"]);
    CHECK(decode_images(srv.get("/jobs/" + b["job_id"].get<std::string>() + "/result")) == images);

    SamplerConfig cfg;
    cfg.seed = 17;
    cfg.num_samples = 2;
    cfg.steps = 10;
    CHECK(generate_pngs(model, labels, cfg) == images);

    // Palette PNG layouts are accepted as well as grids.
    const auto png = encode_png(labels_to_raster(labels, spec.palette()));
    const auto c = srv.post("/generate", {{"layout", base64_encode(png)}, {"seed", 17}, {"num_samples", 2}, {"steps", 10}},
                            202);
    srv.wait(c["job_id"]);
    CHECK(decode_images(srv.get("/jobs/" + c["job_id"].get<std::string>() + "/result")) == images);
}

TEST_CASE("layouts of another size are resized") {
    Running srv(small_model(), ServiceConfig{});
    const auto labels = torch::zeros({16, 16}, torch::kInt64);
    const auto r = srv.post("/generate", {{"layout", grid_json(labels)}, {"steps", 2}}, 202);
    CHECK(r["resized"] == true);
    CHECK(r["original_size"] == json::array({16, 16}));
    CHECK(srv.wait(r["job_id"])["state"] == "done");
}

TEST_CASE("editing with an empty mask returns the source") {
    const auto model = small_model();
    Running srv(model, ServiceConfig{});
    const auto scene = generate_scene(model.scene, 8);
    const auto source_raster = image_to_raster(scene.image);
    const auto source_png = encode_png(source_raster);
    const json request{{"source_image", base64_encode(source_png)},
                       {"edited_layout", grid_json(generate_scene(model.scene, 9).labels)},
                       {"region_mask", grid_json(torch::zeros({8, 8}, torch::kInt64))},
                       {"steps", 10},
                       {"num_samples", 2}};
    const auto r = srv.post("/edit", request, 202);
    CHECK(srv.wait(r["job_id"])["state"] == "done");
    const auto images = decode_images(srv.get("/jobs/" + r["job_id"].get<std::string>() + "/result"));
    REQUIRE(images.size() == 2);
    for (const auto& png : images) CHECK(decode_png(png).data == source_raster.data);

    // A partial mask keeps the unmasked pixels.
    auto mask = torch::zeros({8, 8}, torch::kInt64);
    mask.narrow(1, 0, 4).fill_(1);
    auto partial = request;
    partial["region_mask"] = base64_encode(encode_png(mask_to_raster(mask)));
    const auto p = srv.post("/edit", partial, 202);
    CHECK(srv.wait(p["job_id"])["state"] == "done");
    const auto edited = decode_png(decode_images(srv.get("/jobs/" + p["job_id"].get<std::string>() + "/result"))[0]);
    bool right_kept = true, left_changed = false;
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            for (int c = 0; c < 3; ++c) {
                const size_t i = (y * 8 + x) * 3 + c;
                if (x >= 4) right_kept &= edited.data[i] == source_raster.data[i];
                else left_changed |= edited.data[i] != source_raster.data[i];
            }
        }
    }
    CHECK(right_kept);
    CHECK(left_changed);
}

TEST_CASE("invalid requests list the offending fields") {
    Running srv(small_model(), ServiceConfig{});
    auto r = srv.client().Post("/generate", "{not json", "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);

    auto e = srv.post("/generate", {{"guidance_scale", -1}, {"steps", 0}, {"seed", -3}}, 400);
    std::set<std::string> fields;
    for (const auto& f : e["fields"]) fields.insert(f["field"].get<std::string>());
    CHECK(fields.count("layout"));
    CHECK(fields.count("guidance_scale"));
    CHECK(fields.count("steps"));
    CHECK(fields.count("seed"));

    e = srv.post("/generate", {{"layout", json::array({json::array({0, 7})})}}, 400);
    CHECK(e["fields"][0]["field"] == "layout");

    e = srv.post("/edit", {{"source_image", "!!!"}, {"edited_layout", grid_json(torch::zeros({8, 8}))}}, 400);
    fields.clear();
    for (const auto& f : e["fields"]) fields.insert(f["field"].get<std::string>());
    CHECK(fields.count("source_image"));
    CHECK(fields.count("region_mask"));

    const auto wrong_size = base64_encode(encode_png(image_to_raster(torch::zeros({3, 4, 4}))));
    e = srv.post("/edit",
                 {{"source_image", wrong_size},
                  {"edited_layout", grid_json(torch::zeros({8, 8}))},
                  {"region_mask", grid_json(torch::zeros({8, 8}))}},
                 400);
    CHECK(e["fields"][0]["field"] == "source_image");
}

TEST_CASE("a full queue answers 429 and unfinished results 409") {
    auto gate = std::make_shared<std::atomic<bool>>(false);
    const auto inner = analytic_gaussian_denoiser(0.0, 0.5);
    Denoiser gated = [gate, inner](const torch::Tensor& y, const torch::Tensor& c, int t, const NoiseSchedule& s) {
        while (!gate->load()) std::this_thread::sleep_for(std::chrono::milliseconds(2));
        return inner(y, c, t, s);
    };
    ServiceConfig cfg;
    cfg.workers = 1;
    cfg.queue_capacity = 1;
    Running srv(small_model(gated), cfg);
    const json request{{"layout", grid_json(torch::zeros({8, 8}, torch::kInt64))}, {"steps", 3}};

    const auto first = srv.post("/generate", request, 202)["job_id"].get<std::string>();
    // Wait until the worker has taken the first job off the queue.
    for (int i = 0; i < 500 && srv.get("/jobs/" + first)["state"] != "running"; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    const auto second = srv.post("/generate", request, 202)["job_id"].get<std::string>();
    auto res = srv.client().Post("/generate", request.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 429);
    CHECK(res->has_header("Retry-After"));

    const auto pending = srv.get("/jobs/" + second + "/result", 409);
    CHECK(pending["state"] == "queued");

    gate->store(true);
    CHECK(srv.wait(first)["state"] == "done");
    CHECK(srv.wait(second)["state"] == "done");
}

TEST_CASE("failed jobs report their error") {
    Denoiser broken = [](const torch::Tensor& y, const torch::Tensor&, int, const NoiseSchedule&) {
        return DenoiserOutput{torch::full_like(y, NAN), torch::zeros_like(y)};
    };
    Running srv(small_model(broken), ServiceConfig{});
    const auto id = srv.post("/generate", {{"layout", grid_json(torch::zeros({8, 8}, torch::kInt64))}}, 202)["job_id"];
    const auto s = srv.wait(id);
    CHECK(s["state"] == "failed");
    CHECK(s["error"].get<std::string>().find("non-finite") != std::string::npos);
    srv.get("/jobs/" + id.get<std::string>() + "/result", 500);
}

TEST_CASE("two workers serve concurrent jobs") {
    ServiceConfig cfg;
    cfg.workers = 2;
    const auto model = small_model();
    Running srv(model, cfg);
    std::vector<std::string> ids;
    for (int seed = 0; seed < 6; ++seed) {
        ids.push_back(srv.post("/generate",
                               {{"layout", grid_json(torch::zeros({8, 8}, torch::kInt64))}, {"seed", seed}, {"steps", 5}},
                               202)["job_id"]);
    }
    for (int seed = 0; seed < 6; ++seed) {
        CHECK(srv.wait(ids[seed])["state"] == "done");
        SamplerConfig sc;
        sc.seed = seed;
        sc.steps = 5;
        CHECK(decode_images(srv.get("/jobs/" + ids[seed] + "/result")) ==
              generate_pngs(model, torch::zeros({8, 8}, torch::kInt64), sc));
    }
}

}  // TEST_SUITE

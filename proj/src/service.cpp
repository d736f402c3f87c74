#include "sdm/service.hpp"

#include <httplib.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include <nlohmann/json.hpp>

#include "sdm/image_io.hpp"
#include "sdm/serialization.hpp"

namespace sdm {

using nlohmann::json;

namespace {

enum class JobState { queued, running, done, failed };

const char* state_name(JobState s) {
    switch (s) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::done: return "done";
        case JobState::failed: return "failed";
    }
    return "unknown";
}

struct Job {
    std::string id;
    std::string kind;
    JobState state = JobState::queued;
    double progress = 0.0;
    std::string error;
    std::vector<Png> images;
    std::function<std::vector<Png>(const ProgressCallback&)> work;
};

// Collects per-field problems so a bad request reports all of them at once.
struct Diagnostics {
    json fields = json::array();

    void add(const std::string& field, const std::string& message) {
        fields.push_back({{"field", field}, {"message", message}});
    }
    bool ok() const { return fields.empty(); }
};

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, const json& fields = nullptr) {
    json body{{"error", message}};
    if (!fields.is_null()) body["fields"] = fields;
    send_json(res, status, body);
}

std::optional<torch::Tensor> grid_from_json(const json& v, const std::string& field, Diagnostics& diag) {
    if (!v.is_array() || v.empty() || !v[0].is_array() || v[0].empty()) {
        diag.add(field, "expected a non-empty 2-D integer array");
        return std::nullopt;
    }
    const auto h = static_cast<int64_t>(v.size());
    const auto w = static_cast<int64_t>(v[0].size());
    auto out = torch::zeros({h, w}, torch::kInt64);
    auto a = out.accessor<int64_t, 2>();
    for (int64_t y = 0; y < h; ++y) {
        if (!v[y].is_array() || static_cast<int64_t>(v[y].size()) != w) {
            diag.add(field, "rows must all have length " + std::to_string(w));
            return std::nullopt;
        }
        for (int64_t x = 0; x < w; ++x) {
            if (!v[y][x].is_number_integer()) {
                diag.add(field, "entry [" + std::to_string(y) + "][" + std::to_string(x) + "] is not an integer");
                return std::nullopt;
            }
            a[y][x] = v[y][x].get<int64_t>();
        }
    }
    return out;
}

std::optional<Raster> png_from_json(const json& v, const std::string& field, Diagnostics& diag) {
    try {
        return decode_png(base64_decode(v.get<std::string>()));
    } catch (const std::exception& e) {
        diag.add(field, std::string("not a base64 PNG: ") + e.what());
        return std::nullopt;
    }
}

std::optional<torch::Tensor> labels_from_json(const json& body, const std::string& field, int num_classes,
                                              Diagnostics& diag) {
    if (!body.contains(field)) {
        diag.add(field, "required");
        return std::nullopt;
    }
    const auto& v = body[field];
    std::optional<torch::Tensor> labels;
    if (v.is_string()) {
        auto raster = png_from_json(v, field, diag);
        if (!raster) return std::nullopt;
        if (raster->channels != 1) {
            diag.add(field, "layout PNG must be palette-indexed or grayscale");
            return std::nullopt;
        }
        labels = raster_to_labels(*raster);
    } else {
        labels = grid_from_json(v, field, diag);
    }
    if (!labels) return std::nullopt;
    const auto lo = labels->min().item<int64_t>(), hi = labels->max().item<int64_t>();
    if (lo < 0 || hi >= num_classes) {
        diag.add(field, "class id " + std::to_string(lo < 0 ? lo : hi) + " outside [0, " +
                            std::to_string(num_classes) + ")");
        return std::nullopt;
    }
    return labels;
}

void read_sampler_fields(const json& body, SamplerConfig& cfg, int max_steps, Diagnostics& diag) {
    auto number = [&](const char* key, auto& target, double lo, double hi) {
        if (!body.contains(key)) return;
        const auto& v = body[key];
        if (!v.is_number()) {
            diag.add(key, "expected a number");
            return;
        }
        const double d = v.get<double>();
        if (!(d >= lo && d <= hi)) {
            std::ostringstream os;
            os << "must lie in [" << lo << ", " << hi << "]";
            diag.add(key, os.str());
            return;
        }
        using T = std::decay_t<decltype(target)>;
        if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) {
                diag.add(key, "expected an integer");
                return;
            }
            target = v.get<T>();
        } else {
            target = d;
        }
    };
    auto flag = [&](const char* key, bool& target) {
        if (!body.contains(key)) return;
        if (!body[key].is_boolean()) {
            diag.add(key, "expected true or false");
            return;
        }
        target = body[key].get<bool>();
    };
    number("guidance_scale", cfg.guidance.scale, 0.0, 100.0);
    number("steps", cfg.steps, 1, max_steps);
    number("num_samples", cfg.num_samples, 1, 16);
    if (body.contains("seed")) {
        if (!body["seed"].is_number_unsigned() && !(body["seed"].is_number_integer() && body["seed"].get<int64_t>() >= 0)) {
            diag.add("seed", "expected a non-negative integer");
        } else {
            cfg.seed = body["seed"].get<uint64_t>();
        }
    }
    flag("guidance", cfg.guidance.enabled);
    flag("clamp_y0", cfg.clamp_y0);
}

}  // namespace

struct Service::Impl {
    InferenceModel model;
    ServiceConfig config;
    SamplerConfig defaults;
    httplib::Server server;

    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::shared_ptr<Job>> pending;
    std::map<std::string, std::shared_ptr<Job>> jobs;
    uint64_t next_id = 1;
    bool stopping = false;
    std::vector<std::thread> workers;

    Impl(InferenceModel m, ServiceConfig c, SamplerConfig d)
        : model(std::move(m)), config(std::move(c)), defaults(d) {
        if (config.workers < 1) throw std::invalid_argument("service needs at least one worker");
        if (config.queue_capacity < 0) throw std::invalid_argument("queue capacity must be non-negative");
        routes();
        for (int i = 0; i < config.workers; ++i) workers.emplace_back([this] { worker(); });
    }

    ~Impl() {
        {
            std::lock_guard lock(mu);
            stopping = true;
        }
        cv.notify_all();
        server.stop();
        for (auto& w : workers) w.join();
    }

    void worker() {
        for (;;) {
            std::shared_ptr<Job> job;
            {
                std::unique_lock lock(mu);
                cv.wait(lock, [this] { return stopping || !pending.empty(); });
                if (stopping) return;
                job = pending.front();
                pending.pop_front();
                job->state = JobState::running;
            }
            try {
                auto images = job->work([this, job](int done, int total) {
                    std::lock_guard lock(mu);
                    job->progress = std::max(job->progress, total > 0 ? double(done) / total : 1.0);
                });
                std::lock_guard lock(mu);
                job->images = std::move(images);
                job->progress = 1.0;
                job->state = JobState::done;
            } catch (const std::exception& e) {
                std::lock_guard lock(mu);
                job->error = e.what();
                job->state = JobState::failed;
            }
            std::lock_guard lock(mu);
            job->work = nullptr;
        }
    }

    // Queues a job, or returns nullopt when the queue is full.
    std::optional<std::string> submit(const std::string& kind,
                                      std::function<std::vector<Png>(const ProgressCallback&)> work) {
        std::lock_guard lock(mu);
        if (static_cast<int>(pending.size()) >= config.queue_capacity) return std::nullopt;
        auto job = std::make_shared<Job>();
        job->id = "job" + std::to_string(next_id++);
        job->kind = kind;
        job->work = std::move(work);
        jobs[job->id] = job;
        pending.push_back(job);
        cv.notify_one();
        return job->id;
    }

    json status(const Job& job) const {
        json j{{"id", job.id}, {"kind", job.kind}, {"state", state_name(job.state)}, {"progress", job.progress}};
        if (job.state == JobState::failed) j["error"] = job.error;
        if (job.state == JobState::done) j["result"] = "/jobs/" + job.id + "/result";
        return j;
    }

    std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
        try {
            auto body = json::parse(req.body);
            if (!body.is_object()) {
                send_error(res, 400, "invalid request", json::array({{{"field", "body"}, {"message", "expected a JSON object"}}}));
                return std::nullopt;
            }
            return body;
        } catch (const json::parse_error& e) {
            send_error(res, 400, "invalid request", json::array({{{"field", "body"}, {"message", e.what()}}}));
            return std::nullopt;
        }
    }

    void accept(httplib::Response& res, const std::optional<std::string>& id, const json& extra) {
        if (!id) {
            res.set_header("Retry-After", "5");
            send_error(res, 429, "job queue is full, retry later");
            return;
        }
        json body{{"job_id", *id}, {"status_url", "/jobs/" + *id}};
        body.update(extra);
        send_json(res, 202, body);
    }

    // Resizes a layout to the model grid, recording what happened.
    torch::Tensor fit_layout(const torch::Tensor& labels, json& extra) const {
        const auto size = model.config.image_size;
        if (labels.size(0) == size && labels.size(1) == size) {
            extra["resized"] = false;
            return labels;
        }
        extra["resized"] = true;
        extra["original_size"] = {labels.size(0), labels.size(1)};
        extra["size"] = {size, size};
        return resize_nearest(labels, size);
    }

    void handle_generate(const httplib::Request& req, httplib::Response& res) {
        auto body = parse_body(req, res);
        if (!body) return;
        Diagnostics diag;
        auto labels = labels_from_json(*body, "layout", model.config.num_classes, diag);
        auto cfg = defaults;
        read_sampler_fields(*body, cfg, model.schedule.num_steps(), diag);
        if (!diag.ok()) return send_error(res, 400, "invalid request", diag.fields);

        json extra;
        auto grid = fit_layout(*labels, extra);
        auto id = submit("generate", [this, grid, cfg](const ProgressCallback& p) {
            return generate_pngs(model, grid, cfg, p);
        });
        accept(res, id, extra);
    }

    void handle_edit(const httplib::Request& req, httplib::Response& res) {
        auto body = parse_body(req, res);
        if (!body) return;
        Diagnostics diag;
        const auto size = model.config.image_size;

        std::optional<torch::Tensor> source;
        if (!body->contains("source_image")) {
            diag.add("source_image", "required");
        } else if (!(*body)["source_image"].is_string()) {
            diag.add("source_image", "expected a base64 PNG string");
        } else if (auto raster = png_from_json((*body)["source_image"], "source_image", diag)) {
            if (raster->channels != 3 || raster->indexed()) {
                diag.add("source_image", "expected an RGB PNG");
            } else if (raster->width != size || raster->height != size) {
                diag.add("source_image", "must be " + std::to_string(size) + "x" + std::to_string(size));
            } else {
                source = raster_to_image(*raster);
            }
        }

        auto labels = labels_from_json(*body, "edited_layout", model.config.num_classes, diag);

        std::optional<torch::Tensor> mask;
        if (!body->contains("region_mask")) {
            diag.add("region_mask", "required");
        } else if ((*body)["region_mask"].is_string()) {
            if (auto raster = png_from_json((*body)["region_mask"], "region_mask", diag)) {
                if (raster->channels != 1) {
                    diag.add("region_mask", "expected a grayscale PNG");
                } else {
                    mask = raster_to_mask(*raster);
                }
            }
        } else if (auto grid = grid_from_json((*body)["region_mask"], "region_mask", diag)) {
            mask = (*grid != 0).to(torch::kFloat32);
        }
        if (mask && (mask->size(0) != size || mask->size(1) != size)) {
            diag.add("region_mask", "must be " + std::to_string(size) + "x" + std::to_string(size));
        }

        auto cfg = defaults;
        read_sampler_fields(*body, cfg, model.schedule.num_steps(), diag);
        if (!diag.ok()) return send_error(res, 400, "invalid request", diag.fields);

        json extra;
        auto grid = fit_layout(*labels, extra);
        auto src = *source;
        auto m = *mask;
        auto id = submit("edit", [this, src, grid, m, cfg](const ProgressCallback& p) {
            return edit_pngs(model, src, grid, m, cfg, p);
        });
        accept(res, id, extra);
    }

    std::shared_ptr<Job> find(const std::string& id) {
        auto it = jobs.find(id);
        return it == jobs.end() ? nullptr : it->second;
    }

    void routes() {
        server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200,
                      {{"status", "ok"},
                       {"model_config", model.config},
                       {"image_size", model.config.image_size},
                       {"num_classes", model.config.num_classes},
                       {"diffusion_steps", model.schedule.num_steps()}});
        });
        server.Get("/palette", [this](const httplib::Request&, httplib::Response& res) {
            const auto hues = model.scene.class_hues();
            const auto names = model.scene.class_names();
            const auto colors = model.scene.palette();
            auto classes = json::array();
            for (size_t k = 0; k < hues.size(); ++k) {
                classes.push_back({{"id", k},
                                   {"name", names[k]},
                                   {"hue", hues[k] < 0 ? json(nullptr) : json(hues[k])},
                                   {"color", {colors[k][0], colors[k][1], colors[k][2]}}});
            }
            send_json(res, 200, {{"classes", classes}});
        });
        server.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
            handle_generate(req, res);
        });
        server.Post("/edit", [this](const httplib::Request& req, httplib::Response& res) { handle_edit(req, res); });
        server.Get(R"(/jobs/([A-Za-z0-9]+))", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(mu);
            auto job = find(req.matches[1]);
            if (!job) return send_error(res, 404, "unknown job '" + std::string(req.matches[1]) + "'");
            send_json(res, 200, status(*job));
        });
        server.Get(R"(/jobs/([A-Za-z0-9]+)/result)", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(mu);
            auto job = find(req.matches[1]);
            if (!job) return send_error(res, 404, "unknown job '" + std::string(req.matches[1]) + "'");
            if (job->state == JobState::failed) {
                return send_json(res, 500, {{"error", job->error}, {"state", state_name(job->state)}});
            }
            if (job->state != JobState::done) {
                return send_json(res, 409, {{"error", "job not finished"}, {"state", state_name(job->state)},
                                            {"progress", job->progress}});
            }
            auto images = json::array();
            for (const auto& png : job->images) images.push_back(base64_encode(png));
            send_json(res, 200, {{"images", images}});
        });
    }
};

Service::Service(InferenceModel model, ServiceConfig config, SamplerConfig defaults)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(config), defaults)) {}

Service::~Service() = default;

int Service::bind(const std::string& host, int port) {
    if (port == 0) {
        const int p = impl_->server.bind_to_any_port(host);
        if (p < 0) throw std::runtime_error("cannot bind " + host);
        return p;
    }
    if (!impl_->server.bind_to_port(host, port)) {
        throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void Service::run() {
    impl_->server.listen_after_bind();
}

void Service::stop() { impl_->server.stop(); }

}  // namespace sdm

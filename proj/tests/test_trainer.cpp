#include "doctest_torch.hpp"

#include <fstream>

#include "sdm/checkpoint.hpp"
#include "sdm/trainer.hpp"
#include "support.hpp"

using namespace sdm;

namespace {

SceneSpec mini_scene() {
    const auto m = testing::mini_config();
    SceneSpec s;
    s.image_size = m.image_size;
    s.num_classes = m.num_classes;
    return s;
}

TrainConfig mini_train(int64_t steps) {
    TrainConfig t;
    t.batch_size = 4;
    t.total_steps = steps;
    t.learning_rate = 1e-3;
    t.seed = 11;
    t.checkpoint_every = 1000;
    return t;
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
    std::vector<torch::Tensor> out;
    for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
    return out;
}

bool same(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (!torch::equal(a[i], b[i])) return false;
    }
    return true;
}

std::vector<double> losses(const TrainConfig& train, const Dataset& data, const std::filesystem::path& dir,
                           RunOptions options = {}) {
    std::vector<double> out;
    options.on_step = [&](int64_t, const StepStats& s) { out.push_back(s.loss.total); };
    run_training(testing::mini_config(), train, DiffusionConfig::scaled_default(50), data, dir, options);
    return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("train config validation") {
    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    CHECK(t.dropout_start() == 7000);
    t.finetune_start_step = 12;
    CHECK(t.dropout_start() == 12);
    t.dropout_phase = DropoutPhase::from_scratch;
    CHECK(t.dropout_start() == 0);
    t = TrainConfig{};
    t.dropout_prob = 1.5;
    CHECK_THROWS(t.validate());
    t = TrainConfig{};
    t.batch_size = 0;
    CHECK_THROWS(t.validate());
    CHECK(dropout_phase_from_string("from_scratch") == DropoutPhase::from_scratch);
    CHECK_THROWS(dropout_phase_from_string("later"));
}

TEST_CASE("ema update arithmetic") {
    auto e = torch::ones({3});
    const auto c = torch::zeros({3});
    ema_update({e}, {c}, 0.9999);
    CHECK(e[0].item<float>() == doctest::Approx(0.9999));

    auto copy = torch::full({2}, 5.0);
    const auto cur = torch::tensor({1.0f, -2.0f});
    ema_update({copy}, {cur}, 0.0);
    CHECK(torch::equal(copy, cur));
    auto keep = torch::full({2}, 5.0);
    ema_update({keep}, {cur}, 1.0);
    CHECK(torch::equal(keep, torch::full({2}, 5.0)));

    CHECK_THROWS(ema_update({keep}, {}, 0.5));
    CHECK_THROWS(ema_update({keep}, {torch::zeros({3})}, 0.5));
    CHECK_THROWS(ema_update({keep}, {cur}, 1.5));
}

TEST_CASE("ema converges geometrically to fixed parameters") {
    auto e = torch::full({4}, 3.0, torch::kFloat64);
    const auto c = torch::full({4}, -1.0, torch::kFloat64);
    const double decay = 0.9;
    for (int n = 1; n <= 50; ++n) {
        ema_update({e}, {c}, decay);
        const double expected = -1.0 + 4.0 * std::pow(decay, n);
        CHECK(e[0].item<double>() == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("a zero learning rate leaves parameters unchanged") {
    auto train = mini_train(1);
    train.learning_rate = 0.0;
    train.lambda_vlb = 0.0;
    const auto data = generate_dataset(mini_scene(), 8, 1);
    auto state = TrainState::create(testing::mini_config(), train, DiffusionConfig::scaled_default(50), data.spec);
    const auto before = snapshot(*state.model);
    const auto schedule = state.diffusion.build();
    StepRng rng(1, 0);
    const auto stats = train_step(state, make_batch(data, {0, 1, 2, 3}), schedule, rng);
    CHECK(same(before, snapshot(*state.model)));
    CHECK(stats.loss.total > 0.0);
    CHECK(stats.loss.vlb > 0.0);
    CHECK(stats.loss.total == stats.loss.simple);
    CHECK(state.step == 1);
}

TEST_CASE("the variance head trains through the variational term alone") {
    auto train = mini_train(1);
    const auto data = generate_dataset(mini_scene(), 8, 1);
    auto state = TrainState::create(testing::mini_config(), train, DiffusionConfig::scaled_default(50), data.spec);
    const auto schedule = state.diffusion.build();
    const auto batch = make_batch(data, {0, 1, 2, 3});

    auto cond = batch.conditions;
    const auto eps = torch::randn_like(batch.images);
    const std::vector<int> ts{3, 10, 25, 40};
    const auto yt = q_sample(batch.images, ts, eps, schedule);
    const auto out = state.model->forward(yt, cond, ts);
    const auto terms = total_loss(eps, out, yt, batch.images, ts, schedule);
    const auto grads = torch::autograd::grad({terms.vlb}, {out.eps, out.v}, {}, true, false, true);
    CHECK(!grads[0].defined());
    CHECK(grads[1].abs().sum().item<double>() > 0.0);
}

TEST_CASE("training is deterministic") {
    const auto data = generate_dataset(mini_scene(), 16, 2);
    const auto dir = testing::temp_dir("train_det");
    const auto a = losses(mini_train(6), data, dir / "a");
    const auto b = losses(mini_train(6), data, dir / "b");
    CHECK(a.size() == 6);
    CHECK(a == b);

    std::ifstream log(dir / "a" / "loss.log");
    int lines = 0;
    int64_t step;
    double simple, vlb, total;
    while (log >> step >> simple >> vlb >> total) {
        ++lines;
        CHECK(step == lines);
        CHECK(total == doctest::Approx(a[lines - 1]).epsilon(1e-8));
    }
    CHECK(lines == 6);
    std::filesystem::remove_all(dir);
}

TEST_CASE("zero steps writes the initial checkpoint") {
    const auto data = generate_dataset(mini_scene(), 4, 3);
    const auto dir = testing::temp_dir("train_zero");
    const auto state = run_training(testing::mini_config(), mini_train(0), DiffusionConfig::scaled_default(50),
                                    data, dir);
    CHECK(state.step == 0);
    const auto ckpt = load_checkpoint(dir / "checkpoint.sdm");
    CHECK(ckpt.step == 0);
    const auto fresh = TrainState::create(testing::mini_config(), mini_train(0), DiffusionConfig::scaled_default(50),
                                          data.spec);
    CHECK(torch::equal(ckpt.arrays.at("model/input_conv.weight"),
                       fresh.model->named_parameters()["input_conv.weight"].detach()));
    std::filesystem::remove_all(dir);
}

TEST_CASE("resuming reproduces the uninterrupted run") {
    const auto data = generate_dataset(mini_scene(), 16, 4);
    const auto dir = testing::temp_dir("train_resume");
    auto train = mini_train(8);
    train.dropout_prob = 0.5;
    train.finetune_start_step = 3;
    const auto full = losses(train, data, dir / "full");

    RunOptions first;
    first.stop_after = 5;
    auto part = losses(train, data, dir / "split", first);
    RunOptions second;
    second.resume_from = dir / "split" / "checkpoint.sdm";
    const auto rest = losses(train, data, dir / "split", second);
    part.insert(part.end(), rest.begin(), rest.end());
    CHECK(part == full);

    const auto a = load_checkpoint(dir / "full" / "checkpoint.sdm");
    const auto b = load_checkpoint(dir / "split" / "checkpoint.sdm");
    CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
    std::filesystem::remove_all(dir);
}

TEST_CASE("label dropout only starts at the finetune step") {
    const auto data = generate_dataset(mini_scene(), 8, 5);
    const auto dir = testing::temp_dir("train_phase");
    auto train = mini_train(6);
    train.dropout_prob = 1.0;
    train.finetune_start_step = 3;
    RunOptions options;
    std::vector<int> drops;
    options.on_step = [&](int64_t, const StepStats& s) { drops.push_back(s.dropped_layouts); };
    run_training(testing::mini_config(), train, DiffusionConfig::scaled_default(50), data, dir, options);
    CHECK(drops == std::vector<int>{0, 0, 0, 4, 4, 4});
    std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite losses abort with a diagnostic") {
    const auto data = generate_dataset(mini_scene(), 4, 6);
    auto state = TrainState::create(testing::mini_config(), mini_train(1), DiffusionConfig::scaled_default(50),
                                    data.spec);
    auto batch = make_batch(data, {0, 1});
    batch.images[0][0][0][0] = NAN;
    StepRng rng(0, 0);
    CHECK_THROWS_WITH(train_step(state, batch, state.diffusion.build(), rng),
                      doctest::Contains("non-finite loss at step 0"));
}

TEST_CASE("training input errors") {
    const auto dir = testing::temp_dir("train_err");
    Dataset empty;
    empty.spec = mini_scene();
    CHECK_THROWS(run_training(testing::mini_config(), mini_train(1), DiffusionConfig::scaled_default(50), empty, dir));
    auto other = mini_scene();
    other.num_classes = 5;
    CHECK_THROWS(run_training(testing::mini_config(), mini_train(1), DiffusionConfig::scaled_default(50),
                              generate_dataset(other, 2, 0), dir));
    std::filesystem::remove_all(dir);
}

}  // TEST_SUITE

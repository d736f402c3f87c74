#include "doctest_torch.hpp"

#include "sdm/network.hpp"
#include "support.hpp"

using namespace sdm;

TEST_SUITE("network") {

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.image_size = 30;
    CHECK_THROWS(c.validate());
    c = ModelConfig{};
    c.attention_resolutions = {7};
    CHECK_THROWS(c.validate());
    c = ModelConfig{};
    c.channel_multipliers = {};
    CHECK_THROWS(c.validate());
    CHECK(conditioning_from_string("concat") == Conditioning::concat);
    CHECK(to_string(Conditioning::spade) == "spade");
    CHECK_THROWS(conditioning_from_string("film"));
}

TEST_CASE("group count") {
    CHECK(norm_groups(64) == 32);
    CHECK(norm_groups(8) == 8);
    CHECK(norm_groups(48) == 24);
    CHECK(norm_groups(3) == 3);
}

TEST_CASE("timestep modulation") {
    torch::manual_seed(1);
    const auto f = torch::randn({2, 4, 3, 3});
    CHECK(torch::equal(timestep_modulate(f, torch::ones({2, 4}), torch::zeros({2, 4})), f));
    const auto c = torch::randn({2, 4});
    const auto out = timestep_modulate(f, torch::zeros({2, 4}), c);
    CHECK(torch::equal(out, c.view({2, 4, 1, 1}).expand_as(f)));
    CHECK_THROWS(timestep_modulate(f, torch::ones({2, 5}), torch::zeros({2, 5})));
}

TEST_CASE("distinct timesteps give distinct modulations") {
    TimestepEmbedder embed(8, 32);
    TimestepModulation mod(32, 4);
    randomize_parameters(*embed, 0.3, 4);
    randomize_parameters(*mod, 0.3, 5);
    torch::NoGradGuard guard;
    const auto f = torch::randn({1, 4, 3, 3});
    const auto a = mod(f, embed(std::vector<int>{10}));
    const auto b = mod(f, embed(std::vector<int>{11}));
    CHECK(!torch::allclose(a, b));
    const auto e = embed(std::vector<int>{1, 2, 500, 1000});
    for (int i = 0; i < 4; ++i) {
        for (int j = i + 1; j < 4; ++j) CHECK(!torch::allclose(e[i], e[j]));
    }
}

TEST_CASE("attention block identities") {
    torch::NoGradGuard guard;
    AttentionBlock attn(16, 8);
    CHECK(attn->num_heads() == 2);
    torch::manual_seed(3);
    const auto x = torch::randn({2, 16, 4, 4});
    // W_v starts at zero.
    CHECK(torch::equal(attn(x), x));

    randomize_parameters(*attn, 0.3, 6);
    const auto one = torch::randn({2, 16, 1, 1});
    const auto expected = one + attn->w_v(attn->w_h(one));
    CHECK(torch::allclose(attn(one), expected, 1e-5, 1e-6));

    CHECK_THROWS(attn(torch::randn({1, 8, 2, 2})));
}

TEST_CASE("attention is permutation equivariant") {
    torch::NoGradGuard guard;
    AttentionBlock attn(16, 8);
    randomize_parameters(*attn, 0.3, 7);
    torch::manual_seed(8);
    const auto x = torch::randn({1, 16, 4, 4});
    const auto perm = torch::randperm(16);
    auto permute = [&](const torch::Tensor& t) {
        return t.reshape({1, 16, 16}).index_select(2, perm).reshape({1, 16, 4, 4});
    };
    CHECK(torch::allclose(attn(permute(x)), permute(attn(x)), 1e-5, 1e-5));
}

TEST_CASE("spade modulation") {
    torch::manual_seed(2);
    const auto f = torch::randn({2, 8, 4, 4});
    const auto norm = parameter_free_group_norm(f);
    CHECK(torch::equal(spade_modulate(norm, torch::ones_like(f), torch::zeros_like(f)), norm));
    const auto beta = torch::randn_like(f);
    CHECK(torch::equal(spade_modulate(norm, torch::zeros_like(f), beta), beta));

    Spade spade(8, 4, 8);
    randomize_parameters(*spade, 0.3, 9);
    torch::NoGradGuard guard;
    const auto l1 = torch::zeros({2, 4, 8, 8});
    auto l2 = torch::zeros({2, 4, 8, 8});
    l1.select(1, 0).fill_(1);
    l2.select(1, 1).fill_(1);
    CHECK(!torch::allclose(spade(f, l1), spade(f, l2)));
    CHECK(spade(f, l1).sizes() == f.sizes());
    CHECK_THROWS(spade(f, torch::zeros({2, 3, 8, 8})));
}

TEST_CASE("null layout") {
    const auto c = testing::mini_config();
    const auto null = encode_null_layout(c);
    CHECK(null.is_null());
    CHECK(null.condition().abs().sum().item<double>() == 0.0);
    CHECK(null.channels() == c.layout_channels());

    UNet net(c);
    randomize_parameters(*net, 0.1, 1);
    torch::NoGradGuard guard;
    const auto y = torch::randn({1, 3, 8, 8});
    const auto out = unet_forward(net, y, null.condition().unsqueeze(0), 10);
    CHECK(torch::isfinite(out.eps).all().item<bool>());
    CHECK(torch::isfinite(out.v).all().item<bool>());
}

TEST_CASE("output shape contract across image sizes") {
    torch::NoGradGuard guard;
    for (int size : {16, 32, 64}) {
        ModelConfig c;
        c.image_size = size;
        c.base_channels = 8;
        c.channel_multipliers = {1, 2, 2};
        c.attention_resolutions = {size / 4};
        c.head_channels = 8;
        c.spade_hidden_channels = 8;
        for (auto mode : {Conditioning::spade, Conditioning::concat}) {
            c.conditioning = mode;
            UNet net(c);
            const auto y = torch::randn({2, 3, size, size});
            const auto out = unet_forward(net, y, testing::random_condition(c, 2, 3), 5);
            CHECK(out.eps.sizes() == y.sizes());
            CHECK(out.v.sizes() == y.sizes());
            CHECK((out.v >= 0).all().item<bool>());
            CHECK((out.v <= 1).all().item<bool>());
        }
    }
    ModelConfig c = testing::mini_config();
    c.image_size = 32;
    c.attention_resolutions = {16};
    UNet net(c);
    const auto y = torch::randn({1, 3, 32, 32});
    CHECK_THROWS(unet_forward(net, torch::randn({1, 3, 16, 16}), testing::random_condition(c, 1, 1), 3));
    CHECK_THROWS(unet_forward(net, y, torch::zeros({1, 2, 32, 32}), 3));
    CHECK_THROWS(unet_forward(net, y, testing::random_condition(c, 1, 1), 0));
}

TEST_CASE("forward is deterministic") {
    torch::NoGradGuard guard;
    const auto c = testing::mini_config();
    UNet net(c);
    randomize_parameters(*net, 0.1, 2);
    const auto y = torch::randn({2, 3, 8, 8});
    const auto cond = testing::random_condition(c, 2, 4);
    const auto a = net->forward(y, cond, {3, 40});
    const auto b = net->forward(y, cond, {3, 40});
    CHECK(torch::equal(a.eps, b.eps));
    CHECK(torch::equal(a.v, b.v));
}

TEST_CASE("condition path") {
    torch::NoGradGuard guard;
    const auto c = testing::mini_config();
    UNet net(c);
    randomize_parameters(*net, 0.1, 3);
    const auto y = torch::randn({1, 3, 8, 8});
    const auto l1 = testing::random_condition(c, 1, 10);
    const auto l2 = testing::random_condition(c, 1, 11);
    REQUIRE(!torch::equal(l1, l2));
    const auto a = unet_forward(net, y, l1, 7);
    const auto b = unet_forward(net, y, l2, 7);
    CHECK(!torch::allclose(a.eps, b.eps));
    CHECK(a.eps.sizes() == b.eps.sizes());

    // Zeroed SPADE heads give gamma = 1, beta = 0 everywhere: the layout is
    // no longer visible.
    for (auto& s : net->spade_layers()) {
        s->gamma_head->weight.zero_();
        s->gamma_head->bias.zero_();
        s->beta_head->weight.zero_();
        s->beta_head->bias.zero_();
    }
    const auto a0 = unet_forward(net, y, l1, 7);
    const auto b0 = unet_forward(net, y, l2, 7);
    CHECK(torch::equal(a0.eps, b0.eps));
    CHECK(torch::equal(a0.v, b0.v));
}

TEST_CASE("concat variant sees the layout through its input") {
    torch::NoGradGuard guard;
    auto c = testing::mini_config();
    c.conditioning = Conditioning::concat;
    UNet net(c);
    CHECK(net->spade_layers().empty());
    randomize_parameters(*net, 0.1, 4);
    const auto y = torch::randn({1, 3, 8, 8});
    const auto a = unet_forward(net, y, testing::random_condition(c, 1, 10), 7);
    const auto b = unet_forward(net, y, testing::random_condition(c, 1, 11), 7);
    CHECK(!torch::allclose(a.eps, b.eps));
}

TEST_CASE("analytic gradients match finite differences") {
    for (const auto& p : testing::gradient_probes(4, 0.001, 21)) CHECK(p.relative_error < 1e-3);
    for (const auto& p : testing::gradient_probes(2, 1.0, 22)) CHECK(p.relative_error < 1e-3);
}

}  // TEST_SUITE

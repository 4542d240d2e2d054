// Whole-network assembly: presets, parameter budgets, stride ladder, and
// end-to-end differentiation.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "cmlp/error.hpp"
#include "cmlp/model.hpp"
#include "cmlp/ops.hpp"
#include "cmlp/verify.hpp"

using namespace cmlp;

namespace {

// Two-class miniature with every structural feature enabled; cheap enough
// for finite differences in double precision.
ModelConfig tiny_config() {
    ModelConfig c;
    c.variant = "tiny";
    c.tokenizer_channels = {4, 4, 8};
    c.conv_stage_blocks = 1;
    c.conv_stage_hidden = 16;
    c.stage_depths = {1, 1, 1};
    c.channels = {8, 16, 32, 64};
    c.mlp_ratio = 2;
    c.num_classes = 2;
    return c;
}

template <typename T>
Tensor<T> rand_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    verify::fill_uniform(t, rng);
    return t;
}

double fd_at(Tensor<double>& t, std::size_t i, const std::function<double()>& loss,
             double step = 1e-5) {
    const double saved = t[i];
    t[i] = saved + step;
    const double up = loss();
    t[i] = saved - step;
    const double down = loss();
    t[i] = saved;
    return (up - down) / (2 * step);
}

Tensor<float>* find_param(nn::ParamRegistry<float>& reg, const std::string& name) {
    for (const auto& p : reg.params()) {
        if (p.name == name) return p.value;
    }
    return nullptr;
}

} // namespace

// ---------------------------------------------------------------------------
// presets and validation
// ---------------------------------------------------------------------------

TEST_CASE("presets match the published architecture table") {
    auto s = preset("S");
    CHECK(s.stage_depths == std::array<std::size_t, 3>{2, 4, 2});
    CHECK(s.channels == std::array<std::size_t, 4>{64, 128, 256, 512});
    CHECK(s.mlp_ratio == 2);
    CHECK(s.use_conv_stage);
    CHECK(s.use_conv_downsample);
    CHECK(s.use_dw_conv);
    CHECK(s.conv_stage_hidden == 128);

    auto m = preset("M");
    CHECK(m.stage_depths == std::array<std::size_t, 3>{3, 6, 3});
    CHECK(m.mlp_ratio == 3);
    CHECK(m.conv_stage_blocks == 3);

    auto l = preset("L");
    CHECK(l.channels == std::array<std::size_t, 4>{96, 192, 384, 768});
    CHECK(l.stage_depths == std::array<std::size_t, 3>{4, 8, 3});
    CHECK(l.tokenizer_channels == std::vector<std::size_t>{48, 48, 96});

    auto a0 = preset("pure_mlp_baseline");
    CHECK_FALSE(a0.use_conv_stage);
    CHECK_FALSE(a0.use_conv_downsample);
    CHECK_FALSE(a0.use_dw_conv);

    // Shorthand aliases resolve to the same configurations.
    CHECK(preset("A0").variant == "pure_mlp_baseline");
    CHECK(preset("A5").variant == "S");
    CHECK(preset("ablation_A3").use_dw_conv);
    CHECK_FALSE(preset("ablation_A3").use_conv_downsample);
    CHECK(preset("ablation_A2").use_conv_downsample);
    CHECK_FALSE(preset("ablation_A2").use_dw_conv);

    CHECK_THROWS_AS(preset("XL"), ConfigError);
}

TEST_CASE("config validation names the violated invariant") {
    auto c = tiny_config();
    c.channels[2] = 0;
    CHECK_THROWS_WITH_AS(c.validate(),
                         "model config: channels must be strictly positive", ConfigError);

    c = tiny_config();
    c.stage_depths[1] = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = tiny_config();
    c.tokenizer_channels = {4, 8}; // wrong arity
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = tiny_config();
    c.tokenizer_channels = {4, 4, 16}; // does not end at channels[0]
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = tiny_config();
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = tiny_config();
    c.mlp_ratio = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    // The patch-embedding path ignores tokenizer widths entirely.
    c = tiny_config();
    c.use_conv_stage = false;
    c.tokenizer_channels = {1, 2}; // would be invalid on the conv path
    CHECK_NOTHROW(c.validate());
}

// ---------------------------------------------------------------------------
// parameter budgets (frozen from the independent arithmetic plan)
// ---------------------------------------------------------------------------

TEST_CASE("preset parameter counts hit the frozen budgets") {
    auto count = [](const char* name) {
        Model<float> m(preset(name), 1);
        return m.registry().param_element_count();
    };
    CHECK(count("S") == 9019592);
    CHECK(count("M") == 17406024);
    CHECK(count("L") == 42720760);
    CHECK(count("pure_mlp_baseline") == 7848616);
    CHECK(count("ablation_A1") == 7898312);
    CHECK(count("ablation_A2") == 8758472);
    CHECK(count("ablation_A3") == 7921352);
    CHECK(count("ablation_A4") == 8781512);
}

TEST_CASE("ablation parameter ordering and pinned deltas") {
    auto count = [](const char* name) {
        Model<float> m(preset(name), 1);
        return m.registry().param_element_count();
    };
    const std::size_t a0 = count("A0"), a1 = count("A1"), a2 = count("A2");
    const std::size_t a3 = count("A3"), a4 = count("A4"), a5 = count("A5");
    CHECK(a0 < a1);
    CHECK(a1 < a3);
    CHECK(a3 < a4);
    CHECK(a4 < a5);
    CHECK(a2 > a1);

    // Depthwise-conv branch cost and conv-downsampler cost.
    CHECK(a3 - a1 == 23040);
    CHECK(a2 - a1 == 860160);
    CHECK(a4 - a2 == a3 - a1);
}

TEST_CASE("registry layout follows the documented naming scheme") {
    Model<float> m(tiny_config(), 3);
    const auto& ps = m.registry().params();
    REQUIRE(!ps.empty());
    CHECK(ps.front().name == "tokenizer.conv1.weight");
    CHECK(ps.back().name == "head.bias");

    bool saw_dw = false, saw_ds = false, saw_fc = false;
    for (const auto& p : ps) {
        saw_dw |= p.name == "stage1.block0.dwconv.weight";
        saw_ds |= p.name == "stage3.downsample.weight";
        saw_fc |= p.name == "stage2.block0.mlp2.fc1.weight";
    }
    CHECK(saw_dw);
    CHECK(saw_ds);
    CHECK(saw_fc);

    auto pure = tiny_config();
    pure.use_conv_stage = false;
    pure.use_conv_downsample = false;
    Model<float> m2(pure, 3);
    CHECK(m2.registry().params().front().name == "patch_embed.weight");
    bool saw_stage0 = false;
    for (const auto& p : m2.registry().params())
        saw_stage0 |= p.name == "stage0.block0.mlp1.fc1.weight";
    CHECK(saw_stage0);
}

TEST_CASE("building twice with one seed reproduces the registry bit for bit") {
    Model<float> a(preset("S"), 42);
    Model<float> b(preset("S"), 42);
    const auto& pa = a.registry().params();
    const auto& pb = b.registry().params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        REQUIRE(pa[i].value->same_shape(*pb[i].value));
        CHECK(std::memcmp(pa[i].value->data(), pb[i].value->data(),
                          pa[i].value->size() * sizeof(float)) == 0);
    }

    Model<float> c(preset("S"), 43);
    CHECK(std::memcmp(pa[0].value->data(), c.registry().params()[0].value->data(),
                      pa[0].value->size() * sizeof(float)) != 0);
}

// ---------------------------------------------------------------------------
// stride ladder and feature taps
// ---------------------------------------------------------------------------

TEST_CASE("tokenizer reduces stride by 4 and handles zero input") {
    Model<float> m(tiny_config(), 7);
    std::mt19937_64 rng(1);
    auto x = rand_tensor<float>({1, 3, 64, 96}, rng);
    auto y = m.tokenizer_forward(x);
    CHECK(y.shape() == std::vector<std::size_t>{1, 8, 16, 24});

    // Fresh BN shifts are zero, so a zero image stays exactly zero.
    Tensor<float> zero({1, 3, 32, 32});
    auto yz = m.tokenizer_forward(zero);
    for (std::size_t i = 0; i < yz.size(); ++i) CHECK(yz[i] == 0.0f);

    Tensor<float> odd({1, 3, 30, 32});
    CHECK_THROWS_AS(m.tokenizer_forward(odd), GeometryError);
    Tensor<float> chans({1, 4, 32, 32});
    CHECK_THROWS_AS(m.tokenizer_forward(chans), ShapeError);
}

TEST_CASE("zeroed conv stage is an identity with preserved resolution") {
    Model<float> m(tiny_config(), 9);
    for (const auto& p : m.registry().params()) {
        if (p.name.rfind("conv_stage.", 0) == 0) p.value->fill(0.0f);
    }
    std::mt19937_64 rng(2);
    for (auto hw : {std::pair<std::size_t, std::size_t>{14, 14}, {10, 18}}) {
        auto x = rand_tensor<float>({2, 8, hw.first, hw.second}, rng);
        auto y = m.conv_stage_forward(x);
        REQUIRE(y.same_shape(x));
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
    }

    auto pure = tiny_config();
    pure.use_conv_stage = false;
    Model<float> m2(pure, 9);
    std::mt19937_64 rng2(3);
    auto x = rand_tensor<float>({1, 8, 8, 8}, rng2);
    CHECK_THROWS_AS(m2.conv_stage_forward(x), StateError);
}

TEST_CASE("feature pyramid lands on strides 4 8 16 32 with channels C1..C4") {
    Model<float> m(preset("S"), 5);
    std::mt19937_64 rng(4);
    auto x = rand_tensor<float>({1, 3, 224, 224}, rng);
    auto pyr = m.forward_pyramid(x);
    CHECK(pyr.f1.shape() == std::vector<std::size_t>{1, 64, 56, 56});
    CHECK(pyr.f2.shape() == std::vector<std::size_t>{1, 128, 28, 28});
    CHECK(pyr.f3.shape() == std::vector<std::size_t>{1, 256, 14, 14});
    CHECK(pyr.f4.shape() == std::vector<std::size_t>{1, 512, 7, 7});

    // The classification pass is the pyramid's F4 pooled and projected.
    auto logits = m.forward_classify(x, Mode::eval);
    CHECK(logits.shape() == std::vector<std::size_t>{1, 1000});
    auto pooled = ops::global_avg_pool(pyr.f4);
    auto* hw = find_param(m.registry(), "head.weight");
    auto* hb = find_param(m.registry(), "head.bias");
    REQUIRE(hw != nullptr);
    REQUIRE(hb != nullptr);
    auto manual = ops::linear(pooled, *hw, hb);
    CHECK(std::memcmp(logits.data(), manual.data(), logits.size() * sizeof(float)) == 0);
}

TEST_CASE("pyramid obeys the stride contract at other input sizes") {
    Model<float> m(tiny_config(), 6);
    std::mt19937_64 rng(5);

    auto p320 = m.forward_pyramid(rand_tensor<float>({1, 3, 320, 320}, rng));
    CHECK(p320.f1.shape() == std::vector<std::size_t>{1, 8, 80, 80});
    CHECK(p320.f4.shape() == std::vector<std::size_t>{1, 64, 10, 10});

    auto prect = m.forward_pyramid(rand_tensor<float>({1, 3, 192, 288}, rng));
    CHECK(prect.f2.shape() == std::vector<std::size_t>{1, 16, 24, 36});
    CHECK(prect.f4.shape() == std::vector<std::size_t>{1, 64, 6, 9});

    Tensor<float> bad({1, 3, 224, 220});
    CHECK_THROWS_AS(m.forward_pyramid(bad), GeometryError);
    CHECK_THROWS_AS(m.forward_classify(bad, Mode::eval), GeometryError);
}

TEST_CASE("patch-merge downsamplers drive the same ladder on the pure path") {
    auto cfg = tiny_config();
    cfg.use_conv_stage = false;
    cfg.use_conv_downsample = false;
    cfg.use_dw_conv = false;
    Model<float> m(cfg, 8);
    std::mt19937_64 rng(6);
    auto pyr = m.forward_pyramid(rand_tensor<float>({2, 3, 64, 64}, rng));
    CHECK(pyr.f1.shape() == std::vector<std::size_t>{2, 8, 16, 16});
    CHECK(pyr.f4.shape() == std::vector<std::size_t>{2, 64, 2, 2});
}

// ---------------------------------------------------------------------------
// head behavior and mode isolation
// ---------------------------------------------------------------------------

TEST_CASE("zeroed head weight pins logits to the bias for any input") {
    Model<float> m(tiny_config(), 11);
    auto* hw = find_param(m.registry(), "head.weight");
    auto* hb = find_param(m.registry(), "head.bias");
    hw->fill(0.0f);
    (*hb)[0] = 0.25f;
    (*hb)[1] = -1.5f;

    std::mt19937_64 rng(7);
    for (int i = 0; i < 2; ++i) {
        auto logits = m.forward_classify(rand_tensor<float>({2, 3, 32, 32}, rng), Mode::eval);
        for (std::size_t n = 0; n < 2; ++n) {
            CHECK(logits(n, 0) == 0.25f);
            CHECK(logits(n, 1) == -1.5f);
        }
    }
}

TEST_CASE("eval forward leaves the whole model untouched") {
    Model<float> m(tiny_config(), 13);
    std::mt19937_64 rng(8);
    auto x = rand_tensor<float>({1, 3, 32, 32}, rng);

    std::vector<std::vector<float>> before;
    for (const auto& p : m.registry().params())
        before.emplace_back(p.value->data(), p.value->data() + p.value->size());
    for (const auto& b : m.registry().buffers())
        before.emplace_back(b.value->data(), b.value->data() + b.value->size());

    auto y1 = m.forward_classify(x, Mode::eval);
    auto y2 = m.forward_classify(x, Mode::eval);
    CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(float)) == 0);

    std::size_t k = 0;
    for (const auto& p : m.registry().params()) {
        CHECK(std::memcmp(before[k].data(), p.value->data(),
                          p.value->size() * sizeof(float)) == 0);
        ++k;
    }
    for (const auto& b : m.registry().buffers()) {
        CHECK(std::memcmp(before[k].data(), b.value->data(),
                          b.value->size() * sizeof(float)) == 0);
        ++k;
    }

    // A train forward must move at least the tokenizer's running statistics.
    m.forward_classify(x, Mode::train);
    bool moved = false;
    k = m.registry().params().size();
    for (const auto& b : m.registry().buffers()) {
        moved |= std::memcmp(before[k].data(), b.value->data(),
                             b.value->size() * sizeof(float)) != 0;
        ++k;
    }
    CHECK(moved);
}

// ---------------------------------------------------------------------------
// block-level and end-to-end gradients
// ---------------------------------------------------------------------------

TEST_CASE("channel-mlp block zeroes out to the identity") {
    MlpBlock<double> blk(8, 2, true, 0.0, 1, 2);
    nn::ParamRegistry<double> reg;
    blk.register_state("blk", reg);
    nn::init_params(reg, 15);
    blk.mlp1().fc2().weight().fill(0.0);
    blk.mlp1().fc2().bias().fill(0.0);
    blk.mlp2().fc2().weight().fill(0.0);
    blk.mlp2().fc2().bias().fill(0.0);
    blk.dwconv()->weight().fill(0.0);
    blk.dwconv()->bias().fill(0.0);

    std::mt19937_64 rng(9);
    auto x = rand_tensor<double>({1, 8, 4, 4}, rng);
    auto y = blk.forward(x, Mode::eval);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("channel-mlp block gradients match finite differences") {
    std::mt19937_64 rng(10);
    auto x = rand_tensor<double>({1, 8, 4, 4}, rng);

    MlpBlock<double> blk(8, 2, true, 0.0, 3, 4);
    nn::ParamRegistry<double> reg;
    blk.register_state("blk", reg);
    nn::init_params(reg, 17);

    auto y = blk.forward(x, Mode::train);
    auto r = rand_tensor<double>(y.shape(), rng);
    auto dx = blk.backward(r);

    auto loss = [&] { return verify::dot_loss(blk.forward(x, Mode::eval), r); };
    auto fd_x = verify::fd_gradient<double>(x, loss);
    CHECK(verify::max_rel_error(dx, fd_x) <= 1e-4);
    for (const auto& p : reg.params()) {
        auto fd = verify::fd_gradient<double>(*p.value, loss);
        CHECK(verify::max_rel_error(*p.grad, fd) <= 1e-4);
    }
}

TEST_CASE("end-to-end gradients match finite differences on the tiny network") {
    Model<double> m(tiny_config(), 21);
    std::mt19937_64 rng(11);
    Tensor<double> x({1, 3, 32, 32});
    verify::fill_uniform(x, rng);

    // Train-mode loss: the train path normalizes with batch statistics, so
    // its value is a pure function of (x, params) even though running
    // statistics drift across probe evaluations.
    Tensor<double> r;
    auto loss = [&] { return verify::dot_loss(m.forward_classify(x, Mode::train), r); };

    auto logits = m.forward_classify(x, Mode::train);
    r = rand_tensor<double>(logits.shape(), rng);
    m.zero_grads();
    auto dx = m.backward(r);

    // Copy analytic gradients before probing overwrites layer caches.
    std::vector<std::pair<std::string, Tensor<double>>> analytic;
    for (const auto& p : m.registry().params()) analytic.emplace_back(p.name, *p.grad);

    auto probe = [&](Tensor<double>& t, const Tensor<double>& grad) {
        const std::size_t n = t.size();
        const std::size_t samples = std::min<std::size_t>(n, 12);
        double worst = 0;
        for (std::size_t k = 0; k < samples; ++k) {
            const std::size_t i = (k * n) / samples;
            const double fd = fd_at(t, i, loss);
            worst = std::max(worst, verify::rel_error(grad[i], fd));
        }
        return worst;
    };

    CHECK(probe(x, dx) <= 1e-3);

    const char* picks[] = {
        "tokenizer.conv1.weight", "tokenizer.bn2.gamma",  "conv_stage.block0.conv2.weight",
        "stage1.downsample.weight", "stage1.block0.dwconv.weight",
        "stage2.block0.norm1.gamma", "stage2.block0.mlp1.fc1.weight",
        "stage3.block0.mlp2.fc2.weight", "head.weight", "head.bias",
    };
    for (const char* name : picks) {
        Tensor<double>* value = nullptr;
        const Tensor<double>* grad = nullptr;
        for (std::size_t i = 0; i < m.registry().params().size(); ++i) {
            if (m.registry().params()[i].name == name) {
                value = m.registry().params()[i].value;
                grad = &analytic[i].second;
                break;
            }
        }
        REQUIRE_MESSAGE(value != nullptr, name);
        CHECK_MESSAGE(probe(*value, *grad) <= 1e-3, name);
    }
}

TEST_CASE("backward before a train forward is a state error") {
    Model<float> m(tiny_config(), 23);
    Tensor<float> g({1, 2});
    CHECK_THROWS_AS(m.backward(g), StateError);
}

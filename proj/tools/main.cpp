// Command-line surface over the library: model summaries, cost comparisons,
// training, evaluation, inference, feature export, and a self-test suite.
//
// Exit codes, used consistently by every subcommand:
//   0  success
//   1  usage error (bad flags or flag values)
//   2  data or format error (files, datasets, configs, checkpoints)
//   3  numerical-check failure (count outside tolerance, selftest failure)
//
// Diagnostics go to stderr; results go to stdout.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmlp/analysis.hpp"
#include "cmlp/error.hpp"
#include "cmlp/image_io.hpp"
#include "cmlp/model.hpp"
#include "cmlp/nn.hpp"
#include "cmlp/ops.hpp"
#include "cmlp/persist.hpp"
#include "cmlp/tensor.hpp"
#include "cmlp/train.hpp"
#include "cmlp/verify.hpp"

namespace {

using namespace cmlp;

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

constexpr const char* kExitFooter =
    "Exit codes:\n"
    "  0  success\n"
    "  1  usage error\n"
    "  2  data or format error\n"
    "  3  numerical-check failure";

// Flag values that fail their own grammar (as opposed to files that fail
// theirs) map to exit code 1.
struct UsageError {
    std::string message;
};

std::string fixed(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2e", v);
    return buf;
}

std::string signed_pct(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%+.2f%%", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Flag interpreters.
// ---------------------------------------------------------------------------

struct Res {
    std::size_t h = 224;
    std::size_t w = 224;
};

Res parse_res(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos || x == 0 || x + 1 >= s.size()) {
        throw UsageError{"--res wants HxW (for example 224x224), got '" + s + "'"};
    }
    Res r;
    try {
        std::size_t pos = 0;
        r.h = std::stoull(s.substr(0, x), &pos);
        if (pos != x) throw std::invalid_argument("");
        r.w = std::stoull(s.substr(x + 1), &pos);
        if (pos != s.size() - x - 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
        throw UsageError{"--res wants HxW (for example 224x224), got '" + s + "'"};
    }
    if (r.h == 0 || r.w == 0) {
        throw UsageError{"--res extents must be positive, got '" + s + "'"};
    }
    return r;
}

// Exactly one of --config (a key = value file) or --variant (a preset name)
// selects the model.
ModelConfig config_from_flags(const std::string& config_path, const std::string& variant) {
    if (config_path.empty() == variant.empty()) {
        throw UsageError{"pass exactly one of --config or --variant"};
    }
    if (!variant.empty()) {
        try {
            return preset(variant);
        } catch (const ConfigError& e) {
            throw UsageError{e.what()};
        }
    }
    return persist::parse_config_file(config_path);
}

// --data grammar: "cifar10:DIR" or "synthetic" or "synthetic:N".
train::Dataset<float> dataset_from_spec(const std::string& spec, const std::string& split,
                                        std::size_t classes, std::uint64_t seed) {
    const std::string cifar_prefix = "cifar10:";
    if (spec.rfind(cifar_prefix, 0) == 0) {
        return train::load_cifar10<float>(spec.substr(cifar_prefix.size()), split);
    }
    if (spec == "synthetic" || spec.rfind("synthetic:", 0) == 0) {
        std::size_t n = 256;
        if (spec.size() > 10) {
            const std::string count = spec.substr(10);
            try {
                std::size_t pos = 0;
                n = std::stoull(count, &pos);
                if (pos != count.size() || n == 0) throw std::invalid_argument("");
            } catch (const std::exception&) {
                throw UsageError{"--data synthetic:N wants a positive sample count, got '" +
                                 count + "'"};
            }
        }
        return train::synthetic_dataset<float>(seed, n, classes, 32);
    }
    throw UsageError{"--data wants cifar10:DIR or synthetic[:N], got '" + spec + "'"};
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw DataError("cannot write '" + path + "'");
}

// ---------------------------------------------------------------------------
// summary: layer table or CSV cost report for a config at a resolution.
// ---------------------------------------------------------------------------

struct SummaryOpts {
    std::string config, variant, res = "224x224";
    bool csv = false;
};

int run_summary(const SummaryOpts& o) {
    const ModelConfig cfg = config_from_flags(o.config, o.variant);
    const Res res = parse_res(o.res);
    if (o.csv) {
        std::fputs(analysis::to_csv(analysis::count_macs(cfg, res.h, res.w)).c_str(), stdout);
        return kOk;
    }
    Model<float> model(cfg, 0);
    std::fputs(analysis::summarize(model, res.h, res.w).c_str(), stdout);
    return kOk;
}

// ---------------------------------------------------------------------------
// count: measured parameters/MACs against the published targets.
// ---------------------------------------------------------------------------

struct PublishedTarget {
    const char* key;
    double params_m; // millions
    double gmacs;    // billions, at 224x224
};

constexpr PublishedTarget kAblationTargets[] = {
    {"A0", 7.88, 1.47}, {"A1", 7.89, 1.59}, {"A2", 8.71, 1.65},
    {"A3", 7.91, 1.59}, {"A4", 8.73, 1.65}, {"A5", 9.02, 2.40},
};

constexpr PublishedTarget kComparisonTargets[] = {
    {"S", 9.0, 2.4}, {"M", 17.4, 3.9}, {"L", 42.7, 9.9},
};

// Maps a canonical preset name onto the short row key used by the tables.
std::string target_key(const std::string& canonical) {
    if (canonical == "pure_mlp_baseline") return "A0";
    if (canonical.rfind("ablation_A", 0) == 0) return canonical.substr(9);
    return canonical; // S, M, L
}

const PublishedTarget* find_target(const PublishedTarget* table, std::size_t n,
                                   const std::string& key) {
    for (std::size_t i = 0; i < n; ++i) {
        if (key == table[i].key) return &table[i];
    }
    return nullptr;
}

struct CountOpts {
    std::string variant, res = "224x224";
    int table = 0; // 0 means infer from the variant
};

int run_count(const CountOpts& o) {
    ModelConfig cfg;
    try {
        cfg = preset(o.variant);
    } catch (const ConfigError& e) {
        throw UsageError{e.what()};
    }
    const Res res = parse_res(o.res);
    std::string key = target_key(cfg.variant);

    const PublishedTarget* target = nullptr;
    if (o.table == 2 || (o.table == 0 && key.size() == 2 && key[0] == 'A')) {
        if (key == "S") key = "A5"; // same row under its size-matched name
        target = find_target(kAblationTargets, std::size(kAblationTargets), key);
        if (!target) throw UsageError{"variant " + cfg.variant + " has no ablation-table row"};
    } else {
        target = find_target(kComparisonTargets, std::size(kComparisonTargets), key);
        if (!target) throw UsageError{"variant " + cfg.variant + " has no comparison-table row"};
    }

    const analysis::CostReport rep = analysis::count_macs(cfg, res.h, res.w);
    const double params_m = static_cast<double>(rep.total_params()) / 1e6;
    const double gmacs = static_cast<double>(rep.total_macs()) / 1e9;
    const double dp = (params_m - target->params_m) / target->params_m * 100.0;
    const double dm = (gmacs - target->gmacs) / target->gmacs * 100.0;
    const bool params_ok = std::fabs(dp) <= 3.0;
    const bool macs_ok = std::fabs(dm) <= 5.0;

    std::printf("variant %s at %zux%zu\n", cfg.variant.c_str(), res.h, res.w);
    std::printf("  params  %llu  %sM  target %sM  delta %s  %s (tol 3%%)\n",
                static_cast<unsigned long long>(rep.total_params()),
                fixed(params_m, 4).c_str(), fixed(target->params_m, 2).c_str(),
                signed_pct(dp).c_str(), params_ok ? "PASS" : "FAIL");
    std::printf("  macs    %llu  %sG  target %sG  delta %s  %s (tol 5%%)\n",
                static_cast<unsigned long long>(rep.total_macs()), fixed(gmacs, 4).c_str(),
                fixed(target->gmacs, 2).c_str(), signed_pct(dm).c_str(),
                macs_ok ? "PASS" : "FAIL");
    if (res.h != 224 || res.w != 224) {
        std::fprintf(stderr, "cmlp: note: published MAC targets assume 224x224 input\n");
    }
    return (params_ok && macs_ok) ? kOk : kNumeric;
}

// ---------------------------------------------------------------------------
// train / eval.
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string config, variant, data, out, metrics, optimizer = "adamw";
    std::size_t epochs = 2, batch = 32, warmup = train::TrainOptions::kAutoWarmup;
    std::uint64_t seed = 0;
    double lr = 5e-4, wd = 0.05, momentum = 0.9;
};

int run_train(const TrainOpts& o) {
    const ModelConfig cfg = config_from_flags(o.config, o.variant);
    const train::Dataset<float> data = dataset_from_spec(o.data, "train", cfg.num_classes, o.seed);

    train::TrainOptions opt;
    opt.epochs = o.epochs;
    opt.batch_size = o.batch;
    opt.optimizer = o.optimizer;
    opt.lr = o.lr;
    opt.weight_decay = o.wd;
    opt.momentum = o.momentum;
    opt.warmup_steps = o.warmup;
    opt.seed = o.seed;

    std::fprintf(stderr, "cmlp: training %s on %zu samples (%s split)\n", cfg.variant.c_str(),
                 data.size(), data.split.c_str());
    const train::TrainResult<float> result = train::train_loop(cfg, data, opt);
    for (const train::EpochRecord& r : result.history) {
        std::printf("epoch %zu/%zu  loss %s  top1 %s  lr %s\n", r.epoch + 1, o.epochs,
                    fixed(r.loss, 4).c_str(), fixed(r.top1, 4).c_str(), sci(r.lr).c_str());
    }
    if (!o.metrics.empty()) {
        write_text_file(o.metrics, train::metrics_csv(result.history));
        std::fprintf(stderr, "cmlp: wrote metrics to %s\n", o.metrics.c_str());
    }
    if (!o.out.empty()) {
        persist::save_checkpoint(*result.model, o.out);
        std::fprintf(stderr, "cmlp: wrote checkpoint to %s\n", o.out.c_str());
    }
    return kOk;
}

struct EvalOpts {
    std::string ckpt, data;
    std::size_t batch = 64;
    std::uint64_t seed = 0;
};

int run_eval(const EvalOpts& o) {
    std::unique_ptr<Model<float>> model = persist::load_checkpoint<float>(o.ckpt);
    const train::Dataset<float> data =
        dataset_from_spec(o.data, "test", model->config().num_classes, o.seed);
    const double top1 = train::evaluate(*model, data, o.batch);
    std::printf("top1 %s\n", fixed(top1, 4).c_str());
    return kOk;
}

// ---------------------------------------------------------------------------
// infer: top-k class probabilities for one image.
// ---------------------------------------------------------------------------

// Accepts binary PGM/PPM by extension; anything else must be a tensor file
// holding [1,3,H,W] or [3,H,W].
Tensor<float> load_input_image(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
    if (ext == ".pgm" || ext == ".ppm") {
        return image::read_image<float>(path);
    }
    auto [name, t] = persist::load_tensor<float>(path);
    (void)name;
    if (t.rank() == 3 && t.extent(0) == 3) {
        std::vector<float> values(t.data(), t.data() + t.size());
        return Tensor<float>::from_data({1, 3, t.extent(1), t.extent(2)}, std::move(values));
    }
    if (t.rank() == 4 && t.extent(0) == 1 && t.extent(1) == 3) {
        return t;
    }
    throw DataError("tensor file '" + path + "': want an image shaped 1x3xHxW or 3xHxW, got " +
                    t.shape_string());
}

struct InferOpts {
    std::string ckpt, image;
    std::size_t topk = 5;
};

int run_infer(const InferOpts& o) {
    std::unique_ptr<Model<float>> model = persist::load_checkpoint<float>(o.ckpt);
    const Tensor<float> x = load_input_image(o.image);
    const Tensor<float> logits = model->forward_classify(x, Mode::eval);
    const std::size_t classes = logits.extent(1);

    // Softmax in double with the max subtracted; ties keep ascending class order.
    double hi = logits[0];
    for (std::size_t c = 1; c < classes; ++c) hi = std::max(hi, static_cast<double>(logits[c]));
    std::vector<double> prob(classes);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        prob[c] = std::exp(static_cast<double>(logits[c]) - hi);
        sum += prob[c];
    }
    std::vector<std::size_t> order(classes);
    for (std::size_t c = 0; c < classes; ++c) order[c] = c;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });

    const std::size_t k = std::min(o.topk, classes);
    for (std::size_t i = 0; i < k; ++i) {
        std::printf("class %zu  p %s\n", order[i], fixed(prob[order[i]] / sum, 4).c_str());
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// export-features: pyramid-tap maps as PGM plus tensor files.
// ---------------------------------------------------------------------------

struct ExportOpts {
    std::string ckpt, image, out, reduce = "mean";
    int stage = 4;
    std::size_t k = 8;
};

int run_export(const ExportOpts& o) {
    std::unique_ptr<Model<float>> model = persist::load_checkpoint<float>(o.ckpt);
    const Tensor<float> x = load_input_image(o.image);
    const analysis::Reduce reduce =
        o.reduce == "mean" ? analysis::Reduce::mean : analysis::Reduce::per_channel;
    const std::vector<Tensor<float>> maps =
        analysis::export_feature_maps(*model, x, o.stage, reduce, o.out, o.k);
    std::printf("wrote %zu stage-%d maps (%zux%zu) to %s\n", maps.size(), o.stage,
                maps[0].extent(0), maps[0].extent(1), o.out.c_str());
    return kOk;
}

// ---------------------------------------------------------------------------
// selftest: gradient, oracle, calibration, and persistence checks.
// ---------------------------------------------------------------------------

struct CheckFail {
    std::string detail;
};

// Small config used by the heavier checks; matches the tiny fixture the test
// suite trains against.
ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.variant = "tiny";
    cfg.tokenizer_channels = {4, 4, 8};
    cfg.conv_stage_blocks = 1;
    cfg.conv_stage_hidden = 16;
    cfg.stage_depths = {1, 1, 1};
    cfg.channels = {8, 16, 32, 64};
    cfg.mlp_ratio = 2;
    cfg.num_classes = 2;
    return cfg;
}

std::string check_conv_oracle(std::size_t geometries) {
    std::mt19937_64 rng(20260819);
    auto pick = [&](std::size_t lo, std::size_t hi) {
        return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < geometries; ++i) {
        ConvGeometry g;
        g.kh = pick(1, 4);
        g.kw = pick(1, 4);
        g.sh = pick(1, 3);
        g.sw = pick(1, 3);
        g.ph = pick(0, 2);
        g.pw = pick(0, 2);
        std::size_t cin, cout;
        if (i % 5 == 4) {
            // Depthwise case: groups == cin == cout exercises the direct path.
            g.groups = pick(2, 6);
            cin = cout = g.groups;
        } else {
            g.groups = pick(1, 3);
            cin = g.groups * pick(1, 3);
            cout = g.groups * pick(1, 3);
        }
        const std::size_t h = pick(g.kh, g.kh + 6);
        const std::size_t w = pick(g.kw, g.kw + 6);
        const bool bias = (rng() & 1) != 0;

        Tensor<double> x({pick(1, 2), cin, h, w});
        Tensor<double> weight({cout, cin / g.groups, g.kh, g.kw});
        Tensor<double> b({cout});
        verify::fill_uniform(x, rng);
        verify::fill_uniform(weight, rng);
        verify::fill_uniform(b, rng);

        const Tensor<double> fast = ops::conv2d(x, weight, bias ? &b : nullptr, g);
        const Tensor<double> ref = verify::naive_conv2d(x, weight, bias ? &b : nullptr, g);
        worst = std::max(worst, verify::max_rel_error(fast, ref));
    }
    if (worst > 1e-10) {
        throw CheckFail{std::to_string(geometries) + " geometries, max rel error " + sci(worst) +
                        " exceeds 1e-10"};
    }
    return std::to_string(geometries) + " geometries, max rel error " + sci(worst);
}

// Central finite differences against the analytic backward of one layer,
// over the input and every parameter.
double check_layer_gradient(nn::Layer<double>& layer, Tensor<double> x, std::mt19937_64& rng) {
    nn::ParamRegistry<double> reg;
    layer.register_state("l", reg);

    Tensor<double> r(layer.forward(x, Mode::train).shape());
    verify::fill_uniform(r, rng);
    const auto loss = [&]() { return verify::dot_loss(layer.forward(x, Mode::train), r); };

    std::vector<Tensor<double>> fd_params;
    for (const nn::ParamRef<double>& p : reg.params()) {
        fd_params.push_back(verify::fd_gradient<double>(*p.value, loss));
    }
    const Tensor<double> fd_x = verify::fd_gradient<double>(x, loss);

    for (const nn::ParamRef<double>& p : reg.params()) p.grad->fill(0.0);
    layer.forward(x, Mode::train);
    const Tensor<double> gx = layer.backward(r);

    double worst = verify::max_rel_error(fd_x, gx);
    const auto& ps = reg.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        worst = std::max(worst, verify::max_rel_error(fd_params[i], *ps[i].grad));
    }
    return worst;
}

std::string check_layer_gradients() {
    std::mt19937_64 rng(31);
    double worst = 0.0;
    const auto probe = [&](nn::Layer<double>& layer, std::vector<std::size_t> shape) {
        Tensor<double> x(std::move(shape));
        verify::fill_uniform(x, rng);
        worst = std::max(worst, check_layer_gradient(layer, std::move(x), rng));
    };

    nn::Conv2d<double> conv(4, 6, 3, 2, 1, 1, true);
    probe(conv, {2, 4, 6, 6});
    nn::Conv2d<double> dw(5, 5, 3, 1, 1, 5, true);
    probe(dw, {2, 5, 5, 5});
    nn::Linear<double> lin(6, 4, true);
    probe(lin, {3, 6});
    nn::LayerNorm<double> ln(5);
    probe(ln, {2, 5, 3, 3});
    nn::BatchNorm2d<double> bn(4);
    probe(bn, {3, 4, 3, 3});

    if (worst > 1e-4) {
        throw CheckFail{"max rel error " + sci(worst) + " exceeds 1e-4"};
    }
    return "conv, depthwise, linear, layer_norm, batch_norm; max rel error " + sci(worst);
}

std::string check_end_to_end_gradient() {
    std::mt19937_64 rng(12);
    Model<double> model(tiny_config(), 12);
    Tensor<double> x({1, 3, 32, 32});
    verify::fill_uniform(x, rng);
    Tensor<double> r({1, 2});
    verify::fill_uniform(r, rng);
    const auto loss = [&]() { return verify::dot_loss(model.forward_classify(x, Mode::train), r); };

    // A spread of small parameter tensors across the depth, plus the head.
    const auto& ps = model.registry().params();
    std::vector<std::size_t> picks;
    for (std::size_t i : {std::size_t(0), ps.size() / 3, ps.size() / 2, (2 * ps.size()) / 3}) {
        std::size_t j = i;
        while (j < ps.size() && ps[j].value->size() > 512) ++j;
        if (j < ps.size()) picks.push_back(j);
    }
    picks.push_back(ps.size() - 2);
    picks.push_back(ps.size() - 1);
    std::sort(picks.begin(), picks.end());
    picks.erase(std::unique(picks.begin(), picks.end()), picks.end());

    std::vector<Tensor<double>> fd;
    for (std::size_t j : picks) fd.push_back(verify::fd_gradient<double>(*ps[j].value, loss));

    model.zero_grads();
    model.forward_classify(x, Mode::train);
    model.backward(r);

    double worst = 0.0;
    for (std::size_t i = 0; i < picks.size(); ++i) {
        worst = std::max(worst, verify::max_rel_error(fd[i], *ps[picks[i]].grad));
    }
    if (worst > 1e-3) {
        throw CheckFail{std::to_string(picks.size()) + " parameter tensors, max rel error " +
                        sci(worst) + " exceeds 1e-3"};
    }
    return std::to_string(picks.size()) + " parameter tensors, max rel error " + sci(worst);
}

struct FrozenCount {
    const char* name;
    unsigned long long params, macs;
};

constexpr FrozenCount kFrozenCounts[] = {
    {"S", 9019592ULL, 2384815104ULL},
    {"M", 17406024ULL, 3928253952ULL},
    {"L", 42720760ULL, 9869029632ULL},
    {"pure_mlp_baseline", 7848616ULL, 1114308608ULL},
    {"ablation_A1", 7898312ULL, 1539399680ULL},
    {"ablation_A2", 8758472ULL, 1635737600ULL},
    {"ablation_A3", 7921352ULL, 1543463936ULL},
    {"ablation_A4", 8781512ULL, 1639801856ULL},
};

std::string check_frozen_counts() {
    for (const FrozenCount& f : kFrozenCounts) {
        const analysis::CostReport rep = analysis::count_macs(preset(f.name), 224, 224);
        if (rep.total_params() != f.params || rep.total_macs() != f.macs) {
            throw CheckFail{std::string(f.name) + ": got " + std::to_string(rep.total_params()) +
                            " params / " + std::to_string(rep.total_macs()) + " macs, want " +
                            std::to_string(f.params) + " / " + std::to_string(f.macs)};
        }
    }
    const analysis::CostReport tiny = analysis::count_macs(tiny_config(), 32, 32);
    if (tiny.total_params() != 72894ULL || tiny.total_macs() != 459712ULL) {
        throw CheckFail{"tiny at 32x32: got " + std::to_string(tiny.total_params()) +
                        " params / " + std::to_string(tiny.total_macs()) + " macs"};
    }
    return std::to_string(std::size(kFrozenCounts)) + " presets plus tiny match exactly";
}

std::string check_ablation_ladder() {
    const char* order[] = {"A0", "A1", "A3", "A2", "A4", "A5"};
    unsigned long long prev = 0;
    unsigned long long params[6];
    for (std::size_t i = 0; i < 6; ++i) {
        params[i] = analysis::count_macs(preset(order[i]), 224, 224).total_params();
        if (i > 0 && params[i] <= prev) {
            throw CheckFail{std::string(order[i]) + " (" + std::to_string(params[i]) +
                            ") is not above " + order[i - 1] + " (" + std::to_string(prev) + ")"};
        }
        prev = params[i];
    }
    // order[] holds A1, A3, A2 at indices 1..3; the pinned deltas are +0.02M
    // for the depthwise branch and +0.8M for conv downsampling.
    const double dw = static_cast<double>(params[2] - params[1]);
    const double down = static_cast<double>(params[3] - params[1]);
    if (std::fabs(dw / 0.02e6 - 1.0) > 0.20 || std::fabs(down / 0.8e6 - 1.0) > 0.20) {
        throw CheckFail{"deltas " + fixed(dw / 1e6, 4) + "M / " + fixed(down / 1e6, 4) +
                        "M are outside 20% of 0.02M / 0.8M"};
    }
    return "ordering A0<A1<A3<A2<A4<A5 holds; deltas " + fixed(dw / 1e6, 4) + "M / " +
           fixed(down / 1e6, 4) + "M";
}

std::string check_persistence(const std::filesystem::path& dir) {
    const std::string first = (dir / "first.cmlp").string();
    const std::string second = (dir / "second.cmlp").string();

    Model<float> model(tiny_config(), 3);
    persist::save_checkpoint(model, first);
    std::unique_ptr<Model<float>> loaded = persist::load_checkpoint<float>(first);
    persist::save_checkpoint(*loaded, second);

    const auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    std::string a = slurp(first);
    const std::string b = slurp(second);
    if (a.empty() || a != b) throw CheckFail{"save-load-save is not byte-identical"};

    a[a.size() / 2] = static_cast<char>(a[a.size() / 2] ^ 0x40);
    const std::string corrupt = (dir / "corrupt.cmlp").string();
    write_text_file(corrupt, a);
    try {
        persist::load_checkpoint<float>(corrupt);
        throw CheckFail{"corrupted checkpoint loaded without error"};
    } catch (const PersistError&) {
        // Flipping one payload bit must surface as a checksum failure.
    }
    return std::to_string(b.size()) + "-byte checkpoint round-trips; corruption detected";
}

std::string check_train_determinism() {
    const train::Dataset<float> data = train::synthetic_dataset<float>(9, 24, 2, 32);
    train::TrainOptions opt;
    opt.epochs = 2;
    opt.batch_size = 8;
    opt.lr = 1e-3;
    opt.seed = 11;
    const train::TrainResult<float> a = train::train_loop(tiny_config(), data, opt);
    const train::TrainResult<float> b = train::train_loop(tiny_config(), data, opt);
    if (train::metrics_csv(a.history) != train::metrics_csv(b.history)) {
        throw CheckFail{"identical seeds produced different metrics"};
    }
    const auto& pa = a.model->registry().params();
    const auto& pb = b.model->registry().params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const Tensor<float>& ta = *pa[i].value;
        const Tensor<float>& tb = *pb[i].value;
        for (std::size_t j = 0; j < ta.size(); ++j) {
            if (ta[j] != tb[j]) {
                throw CheckFail{"identical seeds diverged at parameter " + pa[i].name};
            }
        }
    }
    return "two seeded runs match bit for bit";
}

std::string check_overfit_oracle() {
    const train::Dataset<float> data = train::synthetic_dataset<float>(21, 64, 2, 32);
    train::TrainOptions opt;
    opt.epochs = 200;
    opt.batch_size = 16;
    opt.lr = 1e-3;
    opt.seed = 5;
    const train::TrainResult<float> result = train::train_loop(tiny_config(), data, opt);
    const train::EpochRecord& last = result.history.back();
    if (last.top1 < 1.0) {
        throw CheckFail{"train top1 " + fixed(last.top1, 4) + " after 200 epochs, want 1.0"};
    }
    return "64 synthetic samples reach top1 1.0 (final loss " + fixed(last.loss, 4) + ")";
}

std::string check_input_sizes() {
    Model<float> model(tiny_config(), 4);
    const std::size_t sizes[][2] = {{224, 224}, {256, 256}, {320, 320}, {512, 512}, {192, 288}};
    std::mt19937_64 rng(50);
    for (const auto& hw : sizes) {
        Tensor<float> x({1, 3, hw[0], hw[1]});
        verify::fill_uniform(x, rng);
        const FeaturePyramid<float> pyr = model.forward_pyramid(x, Mode::eval);
        const Tensor<float>* taps[] = {&pyr.f1, &pyr.f2, &pyr.f3, &pyr.f4};
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t stride = std::size_t(4) << s;
            const std::vector<std::size_t> want = {1, model.config().channels[s], hw[0] / stride,
                                                   hw[1] / stride};
            if (taps[s]->shape() != want) {
                throw CheckFail{"stage " + std::to_string(s + 1) + " at " +
                                std::to_string(hw[0]) + "x" + std::to_string(hw[1]) + " gave " +
                                taps[s]->shape_string() + ", want " +
                                Tensor<float>::shape_string(want)};
            }
        }
    }
    return "5 input sizes satisfy the stride-4/8/16/32 channel contract";
}

struct SelftestOpts {
    std::string level = "fast";
};

int run_selftest(const SelftestOpts& o) {
    const bool full = o.level == "full";
    const std::filesystem::path dir =
        std::filesystem::temp_directory_path() /
        ("cmlp_selftest_" + std::to_string(static_cast<unsigned long long>(
                                std::chrono::steady_clock::now().time_since_epoch().count())));
    std::filesystem::create_directories(dir);

    struct Named {
        const char* name;
        std::function<std::string()> run;
    };
    std::vector<Named> checks = {
        {"conv_oracle", [&] { return check_conv_oracle(full ? 100 : 25); }},
        {"layer_gradients", check_layer_gradients},
        {"end_to_end_gradient", check_end_to_end_gradient},
        {"frozen_counts", check_frozen_counts},
        {"ablation_ladder", check_ablation_ladder},
        {"persistence", [&] { return check_persistence(dir); }},
        {"train_determinism", check_train_determinism},
    };
    if (full) {
        checks.push_back({"input_sizes", check_input_sizes});
        checks.push_back({"overfit_oracle", check_overfit_oracle});
    }

    std::size_t failures = 0;
    for (std::size_t i = 0; i < checks.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool pass = true;
        try {
            detail = checks[i].run();
        } catch (const CheckFail& f) {
            pass = false;
            detail = f.detail;
        } catch (const std::exception& e) {
            pass = false;
            detail = e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%zu/%zu] %s %s: %s (%ss)\n", i + 1, checks.size(),
                    pass ? "PASS" : "FAIL", checks[i].name, detail.c_str(),
                    fixed(secs, 1).c_str());
        std::fflush(stdout);
        if (!pass) ++failures;
    }
    std::error_code ec;
    std::filesystem::remove_all(dir, ec);

    std::printf("selftest %s: %zu/%zu checks passed\n", o.level.c_str(),
                checks.size() - failures, checks.size());
    return failures == 0 ? kOk : kNumeric;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical convolutional MLP vision backbone: inspect, train, and verify."};
    app.require_subcommand(1);
    app.footer(kExitFooter);

    SummaryOpts so;
    CLI::App* summary = app.add_subcommand("summary", "Per-layer table or CSV cost report");
    summary->add_option("--config", so.config, "Model config file (key = value lines)");
    summary->add_option("--variant", so.variant, "Preset name (S, M, L, A0..A5, ...)");
    summary->add_option("--res", so.res, "Input resolution HxW")->capture_default_str();
    summary->add_flag("--csv", so.csv, "Emit the cost table as CSV");

    CountOpts co;
    CLI::App* count = app.add_subcommand("count", "Compare measured params/MACs to targets");
    count->add_option("--variant", co.variant, "Preset name")->required();
    count->add_option("--res", co.res, "Input resolution HxW")->capture_default_str();
    count->add_option("--table", co.table, "Target table: 2 (ablations) or 3 (S/M/L)")
        ->check(CLI::IsMember({2, 3}));

    TrainOpts to;
    CLI::App* train_cmd = app.add_subcommand("train", "Train a model and save checkpoint/metrics");
    train_cmd->add_option("--config", to.config, "Model config file");
    train_cmd->add_option("--variant", to.variant, "Preset name");
    train_cmd->add_option("--data", to.data, "cifar10:DIR or synthetic[:N]")->required();
    train_cmd->add_option("--epochs", to.epochs, "Training epochs")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--batch", to.batch, "Batch size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", to.seed, "Run seed")->capture_default_str();
    train_cmd->add_option("--lr", to.lr, "Peak learning rate")->capture_default_str();
    train_cmd->add_option("--wd", to.wd, "Weight decay")->capture_default_str();
    train_cmd->add_option("--optimizer", to.optimizer, "adamw or sgd")->capture_default_str();
    train_cmd->add_option("--momentum", to.momentum, "Momentum (sgd only)")->capture_default_str();
    train_cmd->add_option("--warmup", to.warmup, "Warmup steps (default: 5% of the run)");
    train_cmd->add_option("--out", to.out, "Checkpoint output path");
    train_cmd->add_option("--metrics", to.metrics, "Metrics CSV output path");

    EvalOpts eo;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on a dataset");
    eval_cmd->add_option("--ckpt", eo.ckpt, "Checkpoint path")->required();
    eval_cmd->add_option("--data", eo.data, "cifar10:DIR or synthetic[:N]")->required();
    eval_cmd->add_option("--batch", eo.batch, "Batch size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    eval_cmd->add_option("--seed", eo.seed, "Synthetic data seed")->capture_default_str();

    InferOpts io;
    CLI::App* infer = app.add_subcommand("infer", "Top-k classes for one image");
    infer->add_option("--ckpt", io.ckpt, "Checkpoint path")->required();
    infer->add_option("--image", io.image, "Binary PGM/PPM or tensor file")->required();
    infer->add_option("--topk", io.topk, "Classes to report")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);

    ExportOpts xo;
    CLI::App* exp = app.add_subcommand("export-features", "Write pyramid feature maps");
    exp->add_option("--ckpt", xo.ckpt, "Checkpoint path")->required();
    exp->add_option("--image", xo.image, "Binary PGM/PPM or tensor file")->required();
    exp->add_option("--stage", xo.stage, "Pyramid stage 1..4")
        ->required()
        ->check(CLI::Range(1, 4));
    exp->add_option("--out", xo.out, "Output directory")->required();
    exp->add_option("--reduce", xo.reduce, "mean or per_channel")
        ->capture_default_str()
        ->check(CLI::IsMember({"mean", "per_channel"}));
    exp->add_option("--k", xo.k, "Channel count for per_channel")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);

    SelftestOpts lo;
    CLI::App* selftest = app.add_subcommand("selftest", "Run the built-in verification suite");
    selftest->add_option("--level", lo.level, "fast or full")
        ->capture_default_str()
        ->check(CLI::IsMember({"fast", "full"}));

    for (CLI::App* sc : {summary, count, train_cmd, eval_cmd, infer, exp, selftest}) {
        sc->footer(kExitFooter);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (summary->parsed()) return run_summary(so);
        if (count->parsed()) return run_count(co);
        if (train_cmd->parsed()) return run_train(to);
        if (eval_cmd->parsed()) return run_eval(eo);
        if (infer->parsed()) return run_infer(io);
        if (exp->parsed()) return run_export(xo);
        if (selftest->parsed()) return run_selftest(lo);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "cmlp: %s\n", e.message.c_str());
        return kUsage;
    } catch (const Error& e) {
        std::fprintf(stderr, "cmlp: %s\n", e.what());
        return kData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "cmlp: %s\n", e.what());
        return kData;
    }
    return kUsage; // unreachable: require_subcommand guarantees a dispatch
}

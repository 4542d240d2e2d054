#include "cmlp/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>

#include "cmlp/error.hpp"

namespace cmlp {
namespace train {

namespace {

std::string real_string(double v) {
    char buf[32];
    const std::to_chars_result res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Strict comparison keeps the lowest index on ties.
template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
    const std::size_t k = logits.extent(1);
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
        if (logits(row, j) > logits(row, best)) best = j;
    }
    return best;
}

template <typename T>
void check_dataset(const Dataset<T>& data, std::size_t classes, const char* who) {
    if (data.images.rank() != 4 || data.images.extent(1) != 3) {
        throw ShapeError(std::string(who) + ": dataset images must be [N,3,h,w], got " +
                         data.images.shape_string());
    }
    if (data.images.extent(0) != data.labels.size()) {
        throw DataError(std::string(who) + ": " + std::to_string(data.images.extent(0)) +
                        " images but " + std::to_string(data.labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
        if (data.labels[i] >= classes) {
            throw DataError(std::string(who) + ": label " + std::to_string(data.labels[i]) +
                            " at index " + std::to_string(i) + " is outside the configured " +
                            std::to_string(classes) + " classes");
        }
    }
}

std::size_t next_multiple_of_32(std::size_t n) { return ((n + 31) / 32) * 32; }

// Copies the selected samples into a fresh [b,3,hp,wp] batch, zero-padding
// on the bottom/right when hp/wp exceed the stored extents.
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& images, const std::vector<std::size_t>& order,
                       std::size_t first, std::size_t count,
                       std::size_t hp, std::size_t wp) {
    const std::size_t h = images.extent(2), w = images.extent(3);
    Tensor<T> x({count, 3, hp, wp});
    for (std::size_t j = 0; j < count; ++j) {
        const std::size_t idx = order[first + j];
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < h; ++y) {
                const T* src = images.data() + ((idx * 3 + c) * h + y) * w;
                T* dst = x.data() + ((j * 3 + c) * hp + y) * wp;
                std::copy(src, src + w, dst);
            }
        }
    }
    return x;
}

} // namespace

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
std::pair<T, Tensor<T>> cross_entropy(const Tensor<T>& logits,
                                      const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("cross entropy: logits must be [N,K], got " + logits.shape_string());
    }
    const std::size_t n = logits.extent(0), k = logits.extent(1);
    if (labels.size() != n) {
        throw ShapeError("cross entropy: " + std::to_string(n) + " logit rows but " +
                         std::to_string(labels.size()) + " labels");
    }
    Tensor<T> grad({n, k});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) {
            throw DataError("cross entropy: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " is outside " + std::to_string(k) + " classes");
        }
        double hi = double(logits(i, 0));
        for (std::size_t j = 1; j < k; ++j) hi = std::max(hi, double(logits(i, j)));
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(double(logits(i, j)) - hi);
        const double lse = hi + std::log(sum);
        loss += lse - double(logits(i, labels[i]));
        for (std::size_t j = 0; j < k; ++j) {
            const double soft = std::exp(double(logits(i, j)) - lse);
            grad(i, j) = T((soft - (j == labels[i] ? 1.0 : 0.0)) / double(n));
        }
    }
    return {T(loss / double(n)), std::move(grad)};
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(nn::ParamRegistry<T>& registry, double lr, double weight_decay,
                double beta1, double beta2, double eps)
    : reg_(&registry), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const nn::ParamRef<T>& p : registry.params()) {
        m_.emplace_back(p.value->shape());
        v_.emplace_back(p.value->shape());
    }
}

template <typename T>
void AdamW<T>::step() {
    const std::vector<nn::ParamRef<T>>& ps = reg_->params();
    if (ps.size() != m_.size()) {
        throw StateError("optimizer: registry holds " + std::to_string(ps.size()) +
                         " parameters but the state tracks " + std::to_string(m_.size()));
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, double(step_));
    const double bc2 = 1.0 - std::pow(beta2_, double(step_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Tensor<T>& p = *ps[i].value;
        Tensor<T>& g = *ps[i].grad;
        if (!m_[i].same_shape(p)) {
            throw StateError("optimizer: moment shape " + m_[i].shape_string() +
                             " no longer matches parameter '" + ps[i].name + "' " +
                             p.shape_string());
        }
        const bool decay = ps[i].decay && wd_ != 0.0;
        const double shrink = 1.0 - lr_ * wd_;
        Tensor<T>& m = m_[i];
        Tensor<T>& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = double(g[j]);
            const double mj = beta1_ * double(m[j]) + (1.0 - beta1_) * gj;
            const double vj = beta2_ * double(v[j]) + (1.0 - beta2_) * gj * gj;
            m[j] = T(mj);
            v[j] = T(vj);
            double pj = double(p[j]);
            if (decay) pj *= shrink;
            pj -= lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_);
            p[j] = T(pj);
        }
        g.fill(T(0));
    }
}

template <typename T>
SGD<T>::SGD(nn::ParamRegistry<T>& registry, double lr, double momentum, double weight_decay)
    : reg_(&registry), lr_(lr), momentum_(momentum), wd_(weight_decay) {
    for (const nn::ParamRef<T>& p : registry.params()) {
        vel_.emplace_back(p.value->shape());
    }
}

template <typename T>
void SGD<T>::step() {
    const std::vector<nn::ParamRef<T>>& ps = reg_->params();
    if (ps.size() != vel_.size()) {
        throw StateError("optimizer: registry holds " + std::to_string(ps.size()) +
                         " parameters but the state tracks " + std::to_string(vel_.size()));
    }
    ++step_;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Tensor<T>& p = *ps[i].value;
        Tensor<T>& g = *ps[i].grad;
        if (!vel_[i].same_shape(p)) {
            throw StateError("optimizer: velocity shape " + vel_[i].shape_string() +
                             " no longer matches parameter '" + ps[i].name + "' " +
                             p.shape_string());
        }
        const bool decay = ps[i].decay && wd_ != 0.0;
        const double shrink = 1.0 - lr_ * wd_;
        Tensor<T>& vel = vel_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double vj = momentum_ * double(vel[j]) + double(g[j]);
            vel[j] = T(vj);
            double pj = double(p[j]);
            if (decay) pj *= shrink;
            pj -= lr_ * vj;
            p[j] = T(pj);
        }
        g.fill(T(0));
    }
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr,
                 std::size_t warmup_steps) {
    if (total_steps == 0) return 0.0;
    if (step > total_steps) step = total_steps;
    if (step < warmup_steps) return base_lr * double(step) / double(warmup_steps);
    if (warmup_steps >= total_steps) return base_lr;
    const double t = double(step - warmup_steps) / double(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kCifarRecord = 3073;  // 1 label byte + 3 * 1024 pixels
constexpr std::size_t kCifarPlane = 1024;   // one 32x32 channel plane

struct RawSplit {
    std::vector<unsigned char> pixels; // concatenated 3072-byte planar images
    std::vector<std::size_t> labels;
};

void append_cifar_batch(const std::string& path, RawSplit& out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cifar batch '" + path + "': cannot open");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty()) throw DataError("cifar batch '" + path + "': empty file");
    if (bytes.size() % kCifarRecord != 0) {
        const std::size_t whole = (bytes.size() / kCifarRecord) * kCifarRecord;
        throw DataError("cifar batch '" + path + "': " + std::to_string(bytes.size()) +
                        " bytes is not a whole number of 3073-byte records (truncated record at byte offset " +
                        std::to_string(whole) + ")");
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    out.labels.reserve(out.labels.size() + n);
    out.pixels.reserve(out.pixels.size() + n * (kCifarRecord - 1));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = i * kCifarRecord;
        const unsigned label = bytes[off];
        if (label > 9) {
            throw DataError("cifar batch '" + path + "': label " + std::to_string(label) +
                            " out of range at byte offset " + std::to_string(off));
        }
        out.labels.push_back(label);
        out.pixels.insert(out.pixels.end(), bytes.begin() + std::ptrdiff_t(off) + 1,
                          bytes.begin() + std::ptrdiff_t(off + kCifarRecord));
    }
}

} // namespace

template <typename T>
Dataset<T> load_cifar10(const std::string& dir, const std::string& split) {
    if (split != "train" && split != "test") {
        throw ConfigError("cifar split must be 'train' or 'test', got '" + split + "'");
    }

    RawSplit training;
    for (int b = 1; b <= 5; ++b) {
        append_cifar_batch(dir + "/data_batch_" + std::to_string(b) + ".bin", training);
    }

    // Normalization statistics always come from the training split.
    std::array<double, 3> mean{}, sd{};
    const std::size_t n_train = training.labels.size();
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n_train; ++i) {
            const unsigned char* plane = training.pixels.data() + i * 3072 + c * kCifarPlane;
            for (std::size_t p = 0; p < kCifarPlane; ++p) {
                const double v = double(plane[p]) / 255.0;
                s += v;
                s2 += v * v;
            }
        }
        const double count = double(n_train * kCifarPlane);
        mean[c] = s / count;
        const double var = std::max(0.0, s2 / count - mean[c] * mean[c]);
        sd[c] = std::sqrt(var);
        if (sd[c] < 1e-12) sd[c] = 1.0; // constant channel: leave it centered
    }

    RawSplit held_out;
    const RawSplit* use = &training;
    if (split == "test") {
        append_cifar_batch(dir + "/test_batch.bin", held_out);
        use = &held_out;
    }

    Dataset<T> ds;
    ds.split = split;
    ds.mean = mean;
    ds.stddev = sd;
    ds.labels = use->labels;
    const std::size_t n = use->labels.size();
    ds.images = Tensor<T>({n, 3, 32, 32});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const unsigned char* plane = use->pixels.data() + i * 3072 + c * kCifarPlane;
            T* dst = ds.images.data() + ((i * 3 + c) * 32) * 32;
            for (std::size_t p = 0; p < kCifarPlane; ++p) {
                dst[p] = T((double(plane[p]) / 255.0 - mean[c]) / sd[c]);
            }
        }
    }
    return ds;
}

template <typename T>
Dataset<T> synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t classes,
                             std::size_t size) {
    if (classes == 0) throw ConfigError("synthetic dataset: needs at least one class");
    if (n < classes) {
        throw ConfigError("synthetic dataset: n (" + std::to_string(n) +
                          ") must be at least the class count (" + std::to_string(classes) + ")");
    }
    if (size == 0) throw ConfigError("synthetic dataset: image size must be positive");

    Dataset<T> ds;
    ds.split = "synthetic";
    ds.images = Tensor<T>({n, 3, size, size});
    ds.labels.resize(n);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double sigma = std::max(1.0, double(size) / 8.0);
    const double radius = double(size) / 4.0;
    const double cx0 = double(size - 1) / 2.0;
    const double cy0 = cx0;

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = i % classes;
        ds.labels[i] = k;
        const double ang = 2.0 * std::numbers::pi * double(k) / double(classes);
        const double cx = cx0 + radius * std::cos(ang);
        const double cy = cy0 + radius * std::sin(ang);
        for (std::size_t c = 0; c < 3; ++c) {
            const double gain = 1.0 - 0.1 * double(c);
            for (std::size_t y = 0; y < size; ++y) {
                for (std::size_t x = 0; x < size; ++x) {
                    const double d2 = (double(x) - cx) * (double(x) - cx) +
                                      (double(y) - cy) * (double(y) - cy);
                    const double v = gain * std::exp(-d2 / (2.0 * sigma * sigma)) +
                                     0.05 * noise(rng);
                    ds.images(i, c, y, x) = T(v);
                }
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Loop and evaluation
// ---------------------------------------------------------------------------

template <typename T>
TrainResult<T> train_loop(const ModelConfig& config, const Dataset<T>& data,
                          const TrainOptions& opt) {
    config.validate();
    if (opt.epochs == 0) throw ConfigError("training: epochs must be positive");
    if (opt.batch_size == 0) throw ConfigError("training: batch size must be positive");
    check_dataset(data, config.num_classes, "training");

    const std::size_t n = data.size();
    const std::size_t hp = next_multiple_of_32(data.images.extent(2));
    const std::size_t wp = next_multiple_of_32(data.images.extent(3));
    const std::size_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
    const std::size_t total_steps = opt.epochs * steps_per_epoch;
    const std::size_t warmup = opt.warmup_steps == TrainOptions::kAutoWarmup
                                   ? total_steps / 20
                                   : opt.warmup_steps;
    if (warmup >= total_steps) {
        throw ConfigError("training: warmup (" + std::to_string(warmup) +
                          " steps) must be shorter than the run (" +
                          std::to_string(total_steps) + " steps)");
    }

    TrainResult<T> result;
    result.model = std::make_unique<Model<T>>(config, opt.seed);

    std::unique_ptr<Optimizer<T>> optimizer;
    if (opt.optimizer == "adamw") {
        optimizer = std::make_unique<AdamW<T>>(result.model->registry(), opt.lr,
                                               opt.weight_decay);
    } else if (opt.optimizer == "sgd") {
        optimizer = std::make_unique<SGD<T>>(result.model->registry(), opt.lr,
                                             opt.momentum, opt.weight_decay);
    } else {
        throw ConfigError("training: unknown optimizer '" + opt.optimizer +
                          "' (expected adamw or sgd)");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    // Distinct stream from the model-init seed so reordering one never
    // silently reuses the other's draws.
    std::mt19937_64 shuffle_rng(opt.seed ^ 0x9e3779b97f4a7c15ull);

    std::size_t gstep = 0;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        double last_lr = 0.0;
        for (std::size_t first = 0; first < n; first += opt.batch_size) {
            const std::size_t count = std::min(opt.batch_size, n - first);
            const Tensor<T> x = gather_batch(data.images, order, first, count, hp, wp);
            std::vector<std::size_t> y(count);
            for (std::size_t j = 0; j < count; ++j) y[j] = data.labels[order[first + j]];

            const double lr = cosine_lr(gstep, total_steps, opt.lr, warmup);
            optimizer->set_lr(lr);

            const Tensor<T> logits = result.model->forward_classify(x, Mode::train);
            auto [loss, grad] = cross_entropy(logits, y);
            loss_sum += double(loss) * double(count);
            for (std::size_t j = 0; j < count; ++j) {
                if (argmax_row(logits, j) == y[j]) ++correct;
            }

            result.model->backward(grad);
            optimizer->step();
            last_lr = lr;
            ++gstep;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / double(n);
        rec.top1 = double(correct) / double(n);
        rec.lr = last_lr;
        result.history.push_back(rec);
    }
    return result;
}

template <typename T>
double evaluate(Model<T>& model, const Dataset<T>& data, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("evaluate: batch size must be positive");
    check_dataset(data, model.config().num_classes, "evaluate");

    const std::size_t n = data.size();
    const std::size_t hp = next_multiple_of_32(data.images.extent(2));
    const std::size_t wp = next_multiple_of_32(data.images.extent(3));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));

    std::size_t correct = 0;
    for (std::size_t first = 0; first < n; first += batch_size) {
        const std::size_t count = std::min(batch_size, n - first);
        const Tensor<T> x = gather_batch(data.images, order, first, count, hp, wp);
        const Tensor<T> logits = model.forward_classify(x, Mode::eval);
        for (std::size_t j = 0; j < count; ++j) {
            if (argmax_row(logits, j) == data.labels[first + j]) ++correct;
        }
    }
    return double(correct) / double(n);
}

std::string metrics_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,loss,top1,lr\n";
    for (const EpochRecord& rec : history) {
        out += std::to_string(rec.epoch) + "," + real_string(rec.loss) + "," +
               real_string(rec.top1) + "," + real_string(rec.lr) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define CMLP_INSTANTIATE_TRAIN(T)                                                      \
    template std::pair<T, Tensor<T>> cross_entropy<T>(const Tensor<T>&,               \
                                                      const std::vector<std::size_t>&); \
    template class AdamW<T>;                                                           \
    template class SGD<T>;                                                             \
    template Dataset<T> load_cifar10<T>(const std::string&, const std::string&);       \
    template Dataset<T> synthetic_dataset<T>(std::uint64_t, std::size_t, std::size_t,  \
                                             std::size_t);                             \
    template TrainResult<T> train_loop<T>(const ModelConfig&, const Dataset<T>&,       \
                                          const TrainOptions&);                        \
    template double evaluate<T>(Model<T>&, const Dataset<T>&, std::size_t);

CMLP_INSTANTIATE_TRAIN(float)
CMLP_INSTANTIATE_TRAIN(double)

#undef CMLP_INSTANTIATE_TRAIN

} // namespace train
} // namespace cmlp

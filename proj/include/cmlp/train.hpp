#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cmlp/model.hpp"
#include "cmlp/nn.hpp"
#include "cmlp/tensor.hpp"

namespace cmlp {
namespace train {

// ---------------------------------------------------------------------------
// Loss. Mean softmax cross-entropy over a [N,K] logit batch, stabilized with
// the log-sum-exp trick; the returned gradient is (softmax - onehot) / N.
// Out-of-range labels raise a DataError naming the row.
// ---------------------------------------------------------------------------
template <typename T>
std::pair<T, Tensor<T>> cross_entropy(const Tensor<T>& logits,
                                      const std::vector<std::size_t>& labels);

// ---------------------------------------------------------------------------
// Optimizers. Both walk the registry in registration order, keep one state
// tensor per parameter (shapes mirror the parameters one-to-one; drift is a
// StateError), apply decoupled weight decay only to decay-eligible
// parameters, and zero the gradients after applying a step.
// ---------------------------------------------------------------------------
template <typename T>
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step() = 0;
    virtual void set_lr(double lr) = 0;
    virtual double lr() const = 0;
    virtual std::size_t steps() const = 0;
};

template <typename T>
class AdamW : public Optimizer<T> {
public:
    AdamW(nn::ParamRegistry<T>& registry, double lr, double weight_decay,
          double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step() override;
    void set_lr(double lr) override { lr_ = lr; }
    double lr() const override { return lr_; }
    std::size_t steps() const override { return step_; }

    const std::vector<Tensor<T>>& first_moments() const { return m_; }
    const std::vector<Tensor<T>>& second_moments() const { return v_; }

private:
    nn::ParamRegistry<T>* reg_;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
    double lr_, wd_, beta1_, beta2_, eps_;
    std::size_t step_ = 0;
};

template <typename T>
class SGD : public Optimizer<T> {
public:
    SGD(nn::ParamRegistry<T>& registry, double lr, double momentum = 0.0,
        double weight_decay = 0.0);

    void step() override;
    void set_lr(double lr) override { lr_ = lr; }
    double lr() const override { return lr_; }
    std::size_t steps() const override { return step_; }

    const std::vector<Tensor<T>>& velocities() const { return vel_; }

private:
    nn::ParamRegistry<T>* reg_;
    std::vector<Tensor<T>> vel_;
    double lr_, momentum_, wd_;
    std::size_t step_ = 0;
};

// Linear warmup from 0 to base_lr over warmup_steps, then a half cosine down
// to 0 at total_steps. Steps past the end clamp to 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr,
                 std::size_t warmup_steps);

// ---------------------------------------------------------------------------
// Data. Images are stored normalized; mean/stddev record the per-channel
// transform that was applied so it can be reproduced at inference time.
// ---------------------------------------------------------------------------
template <typename T>
struct Dataset {
    Tensor<T> images;                 // [N,3,h,w]
    std::vector<std::size_t> labels;  // class ids in [0, num_classes)
    std::string split;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};

    std::size_t size() const { return labels.size(); }
};

// Reads the binary batch format: 3073-byte records of one label byte plus
// 32x32 planar RGB. split selects "train" (data_batch_1..5.bin) or "test"
// (test_batch.bin). Pixels are scaled to [0,1] and normalized by per-channel
// mean/stddev computed from the training split; both splits record those
// training statistics. Missing or truncated files raise DataError with the
// offending path and byte offset.
template <typename T>
Dataset<T> load_cifar10(const std::string& dir, const std::string& split);

// Deterministic class-conditional blobs: class k gets a Gaussian bump at a
// class-specific location plus low-amplitude noise, so the set is linearly
// separable by construction. Labels cycle 0..classes-1, so every class
// appears when n >= classes (enforced).
template <typename T>
Dataset<T> synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t classes,
                             std::size_t size);

// ---------------------------------------------------------------------------
// Training loop. A pure function of (config, dataset, options): model init,
// shuffling, and optimizer state all derive from opt.seed, so identical
// inputs give bit-identical histories. Images whose extents are not
// multiples of 32 are zero-padded per batch to the next multiple.
// ---------------------------------------------------------------------------
struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0; // mean over the epoch's samples, recorded pre-update
    double top1 = 0.0; // running train accuracy over the same forwards
    double lr = 0.0;   // learning rate of the epoch's final step
};

struct TrainOptions {
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    std::string optimizer = "adamw"; // "adamw" or "sgd"
    double lr = 5e-4;
    double weight_decay = 0.05;
    double momentum = 0.9; // sgd only
    // Warmup length in steps; kAutoWarmup means 5% of the total step count.
    std::size_t warmup_steps = kAutoWarmup;
    std::uint64_t seed = 0;

    static constexpr std::size_t kAutoWarmup = std::numeric_limits<std::size_t>::max();
};

template <typename T>
struct TrainResult {
    std::unique_ptr<Model<T>> model;
    std::vector<EpochRecord> history;
};

template <typename T>
TrainResult<T> train_loop(const ModelConfig& config, const Dataset<T>& data,
                          const TrainOptions& opt);

// Eval-mode top-1 accuracy; argmax ties break toward the lowest class index.
// The result is independent of how batch_size partitions the set.
template <typename T>
double evaluate(Model<T>& model, const Dataset<T>& data, std::size_t batch_size);

// One line per epoch under the header "epoch,loss,top1,lr".
std::string metrics_csv(const std::vector<EpochRecord>& history);

} // namespace train
} // namespace cmlp

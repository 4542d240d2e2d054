#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cmlp/nn.hpp"
#include "cmlp/tensor.hpp"

namespace cmlp {

// ---------------------------------------------------------------------------
// Architecture description. The network is a stride-4 tokenizer, an optional
// stage of convolutional residual blocks, then three stages of channel-MLP
// blocks, each entered through a 2x downsampler, finished by global average
// pooling and a linear head. Feature taps sit at strides 4/8/16/32 with
// channels C1..C4.
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::string variant = "custom";

    // Conv tokenizer channel schedule; the last entry must equal channels[0].
    // Ignored when use_conv_stage is false (a single 4x4 stride-4 patch
    // embedding replaces the conv tokenizer).
    std::vector<std::size_t> tokenizer_channels{32, 32, 64};

    // Block count of the stride-4 stage: convolutional residual blocks when
    // use_conv_stage, channel-MLP blocks otherwise.
    std::size_t conv_stage_blocks = 2;
    // Mid 3x3 width inside each convolutional residual block.
    std::size_t conv_stage_hidden = 128;

    std::array<std::size_t, 3> stage_depths{2, 4, 2};
    std::array<std::size_t, 4> channels{64, 128, 256, 512};
    std::size_t mlp_ratio = 2;
    std::size_t num_classes = 1000;

    bool use_conv_stage = true;
    bool use_conv_downsample = true;
    bool use_dw_conv = true;

    double dropout = 0.0;

    // Throws ConfigError naming the violated invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Named configurations: S, M, L, pure_mlp_baseline, ablation_A1..ablation_A5.
// A0..A5 are accepted as shorthand (A0 = pure_mlp_baseline, A5 = S-sized
// final row). Unknown names throw ConfigError.
ModelConfig preset(const std::string& name);

template <typename T>
struct FeaturePyramid {
    Tensor<T> f1; // [N, C1, H/4,  W/4]
    Tensor<T> f2; // [N, C2, H/8,  W/8]
    Tensor<T> f3; // [N, C3, H/16, W/16]
    Tensor<T> f4; // [N, C4, H/32, W/32]
};

// ---------------------------------------------------------------------------
// Channel-MLP block: three residual sub-layers on a [N,C,H,W] map.
//   x += mlp1(norm1(x));  x += dwconv(x) (only when enabled);  x += mlp2(norm2(x))
// The depthwise branch carries a bias and no normalization or activation.
// ---------------------------------------------------------------------------
template <typename T>
class MlpBlock : public nn::Layer<T> {
public:
    MlpBlock(std::size_t channels, std::size_t ratio, bool use_dw, T dropout_p,
             std::uint64_t seed1, std::uint64_t seed2);

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    void register_state(const std::string& prefix, nn::ParamRegistry<T>& reg) override;

    nn::ChannelMLP<T>& mlp1() { return mlp1_; }
    nn::ChannelMLP<T>& mlp2() { return mlp2_; }
    nn::Conv2d<T>* dwconv() { return dw_.get(); }

private:
    nn::LayerNorm<T> norm1_;
    nn::ChannelMLP<T> mlp1_;
    std::unique_ptr<nn::Conv2d<T>> dw_; // null when the branch is disabled
    nn::LayerNorm<T> norm2_;
    nn::ChannelMLP<T> mlp2_;
};

// ---------------------------------------------------------------------------
// The assembled network. Construction is a pure function of (config, seed):
// same inputs give identical parameter names, shapes, and values. Instances
// are pinned in memory because the registry points at layer-owned tensors.
// ---------------------------------------------------------------------------
template <typename T>
class Model {
public:
    Model(ModelConfig config, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamRegistry<T>& registry() { return reg_; }
    const nn::ParamRegistry<T>& registry() const { return reg_; }

    // Full pipeline to logits [N, num_classes]. H and W must be divisible
    // by 32.
    Tensor<T> forward_classify(const Tensor<T>& x, Mode mode);

    // Feature taps F1..F4 only; no pooling or head. F4 is bit-identical to
    // the pre-pooling activation of forward_classify on the same input.
    FeaturePyramid<T> forward_pyramid(const Tensor<T>& x, Mode mode = Mode::eval);

    // Stride-4 stem alone (H, W divisible by 4).
    Tensor<T> tokenizer_forward(const Tensor<T>& x, Mode mode = Mode::eval);

    // Resolution-preserving stride-4 stage; requires use_conv_stage.
    Tensor<T> conv_stage_forward(const Tensor<T>& x, Mode mode = Mode::eval);

    // Backpropagates from logits through the whole pipeline, accumulating
    // parameter gradients; returns the input gradient. Requires a preceding
    // train-mode forward_classify.
    Tensor<T> backward(const Tensor<T>& grad_logits);

    void zero_grads();

private:
    struct Stage {
        std::unique_ptr<nn::Layer<T>> downsample;
        std::vector<std::unique_ptr<MlpBlock<T>>> blocks;
    };

    Tensor<T> backbone(const Tensor<T>& x, Mode mode, FeaturePyramid<T>* taps);
    void check_input(const Tensor<T>& x, std::size_t divisor, const char* who) const;

    ModelConfig cfg_;
    std::unique_ptr<nn::Sequential<T>> tokenizer_; // conv stem (use_conv_stage)
    std::unique_ptr<nn::Conv2d<T>> patch_embed_;   // 4x4 stride-4 stem otherwise
    std::vector<std::unique_ptr<nn::Layer<T>>> stage0_;
    std::array<Stage, 3> stages_;
    nn::GlobalAvgPool<T> gap_;
    std::unique_ptr<nn::Linear<T>> head_;
    nn::ParamRegistry<T> reg_;
};

} // namespace cmlp

#include "cmlp/model.hpp"

#include <utility>

#include "cmlp/error.hpp"
#include "cmlp/ops.hpp"

namespace cmlp {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    for (std::size_t c : channels) {
        if (c == 0) throw ConfigError("model config: channels must be strictly positive");
    }
    for (std::size_t d : stage_depths) {
        if (d == 0) throw ConfigError("model config: stage_depths must be at least 1");
    }
    if (mlp_ratio == 0) throw ConfigError("model config: mlp_ratio must be at least 1");
    if (num_classes == 0) throw ConfigError("model config: num_classes must be at least 1");
    if (conv_stage_blocks == 0) {
        throw ConfigError("model config: conv_stage_blocks must be at least 1");
    }
    if (use_conv_stage) {
        if (tokenizer_channels.size() != 3) {
            throw ConfigError("model config: tokenizer_channels must list exactly 3 widths, got " +
                              std::to_string(tokenizer_channels.size()));
        }
        for (std::size_t c : tokenizer_channels) {
            if (c == 0) {
                throw ConfigError("model config: tokenizer_channels must be strictly positive");
            }
        }
        if (tokenizer_channels.back() != channels[0]) {
            throw ConfigError("model config: tokenizer_channels must end at channels[0] (" +
                              std::to_string(tokenizer_channels.back()) + " vs " +
                              std::to_string(channels[0]) + ")");
        }
        if (conv_stage_hidden == 0) {
            throw ConfigError("model config: conv_stage_hidden must be strictly positive");
        }
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("model config: dropout must lie in [0,1), got " +
                          std::to_string(dropout));
    }
}

ModelConfig preset(const std::string& name) {
    ModelConfig c;

    auto ablation = [&](bool conv_stage, bool conv_ds, bool dw) {
        c.tokenizer_channels = {32, 32, 64};
        c.conv_stage_blocks = 2;
        c.conv_stage_hidden = 64;
        c.stage_depths = {2, 4, 2};
        c.channels = {64, 128, 256, 512};
        c.mlp_ratio = 2;
        c.use_conv_stage = conv_stage;
        c.use_conv_downsample = conv_ds;
        c.use_dw_conv = dw;
    };

    if (name == "S" || name == "ablation_A5" || name == "A5") {
        c.variant = "S";
        ablation(true, true, true);
        c.conv_stage_hidden = 128; // widened stride-4 stage
    } else if (name == "M") {
        c.variant = "M";
        c.tokenizer_channels = {32, 32, 64};
        c.conv_stage_blocks = 3;
        c.conv_stage_hidden = 128;
        c.stage_depths = {3, 6, 3};
        c.channels = {64, 128, 256, 512};
        c.mlp_ratio = 3;
    } else if (name == "L") {
        c.variant = "L";
        c.tokenizer_channels = {48, 48, 96};
        c.conv_stage_blocks = 3;
        c.conv_stage_hidden = 192;
        c.stage_depths = {4, 8, 3};
        c.channels = {96, 192, 384, 768};
        c.mlp_ratio = 3;
    } else if (name == "pure_mlp_baseline" || name == "A0") {
        c.variant = "pure_mlp_baseline";
        ablation(false, false, false);
    } else if (name == "ablation_A1" || name == "A1") {
        c.variant = "ablation_A1";
        ablation(true, false, false);
    } else if (name == "ablation_A2" || name == "A2") {
        c.variant = "ablation_A2";
        ablation(true, true, false);
    } else if (name == "ablation_A3" || name == "A3") {
        c.variant = "ablation_A3";
        ablation(true, false, true);
    } else if (name == "ablation_A4" || name == "A4") {
        c.variant = "ablation_A4";
        ablation(true, true, true);
    } else {
        throw ConfigError("preset: unknown variant '" + name + "'");
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// channel-MLP block
// ---------------------------------------------------------------------------

template <typename T>
MlpBlock<T>::MlpBlock(std::size_t channels, std::size_t ratio, bool use_dw, T dropout_p,
                      std::uint64_t seed1, std::uint64_t seed2)
    : norm1_(channels),
      mlp1_(channels, ratio, dropout_p, seed1),
      norm2_(channels),
      mlp2_(channels, ratio, dropout_p, seed2) {
    if (use_dw) {
        dw_ = std::make_unique<nn::Conv2d<T>>(channels, channels, 3, 1, 1, channels, true);
    }
}

template <typename T>
Tensor<T> MlpBlock<T>::forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> y = mlp1_.forward(norm1_.forward(x, mode), mode);
    ops::add_inplace(y, x);
    if (dw_) {
        Tensor<T> d = dw_->forward(y, mode);
        ops::add_inplace(d, y);
        y = std::move(d);
    }
    Tensor<T> z = mlp2_.forward(norm2_.forward(y, mode), mode);
    ops::add_inplace(z, y);
    return z;
}

template <typename T>
Tensor<T> MlpBlock<T>::backward(const Tensor<T>& grad_out) {
    Tensor<T> g = norm2_.backward(mlp2_.backward(grad_out));
    ops::add_inplace(g, grad_out);
    if (dw_) {
        Tensor<T> gd = dw_->backward(g);
        ops::add_inplace(gd, g);
        g = std::move(gd);
    }
    Tensor<T> gx = norm1_.backward(mlp1_.backward(g));
    ops::add_inplace(gx, g);
    return gx;
}

template <typename T>
void MlpBlock<T>::register_state(const std::string& prefix, nn::ParamRegistry<T>& reg) {
    norm1_.register_state(prefix + ".norm1", reg);
    mlp1_.register_state(prefix + ".mlp1", reg);
    if (dw_) dw_->register_state(prefix + ".dwconv", reg);
    norm2_.register_state(prefix + ".norm2", reg);
    mlp2_.register_state(prefix + ".mlp2", reg);
}

// ---------------------------------------------------------------------------
// model assembly
// ---------------------------------------------------------------------------

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    const auto& ch = cfg_.channels;
    const T drop = T(cfg_.dropout);

    // Per-layer dropout seeds, fixed by construction order.
    std::uint64_t cursor = seed;
    auto next_seed = [&cursor] { return cursor += 0x9e3779b97f4a7c15ull; };

    if (cfg_.use_conv_stage) {
        // Stem: three 3x3 conv+BN+ReLU blocks (strides 2,1,1) and a 3x3
        // stride-2 max pool, total stride 4.
        tokenizer_ = std::make_unique<nn::Sequential<T>>();
        std::size_t tin = 3;
        const std::size_t strides[3] = {2, 1, 1};
        for (std::size_t i = 0; i < 3; ++i) {
            const std::size_t tc = cfg_.tokenizer_channels[i];
            const std::string tag = std::to_string(i + 1);
            tokenizer_->add("conv" + tag,
                            std::make_unique<nn::Conv2d<T>>(tin, tc, 3, strides[i], 1, 1, false));
            tokenizer_->add("bn" + tag, std::make_unique<nn::BatchNorm2d<T>>(tc));
            tokenizer_->add("relu" + tag, std::make_unique<nn::ReLU<T>>());
            tin = tc;
        }
        tokenizer_->add("pool", std::make_unique<nn::MaxPool2d<T>>(3, 2, 1));

        // Stride-4 stage: residual 1x1 -> 3x3 -> 1x1 conv blocks.
        for (std::size_t b = 0; b < cfg_.conv_stage_blocks; ++b) {
            auto body = std::make_unique<nn::Sequential<T>>();
            const std::size_t hid = cfg_.conv_stage_hidden;
            body->add("conv1", std::make_unique<nn::Conv2d<T>>(ch[0], hid, 1, 1, 0, 1, false));
            body->add("bn1", std::make_unique<nn::BatchNorm2d<T>>(hid));
            body->add("relu1", std::make_unique<nn::ReLU<T>>());
            body->add("conv2", std::make_unique<nn::Conv2d<T>>(hid, hid, 3, 1, 1, 1, false));
            body->add("bn2", std::make_unique<nn::BatchNorm2d<T>>(hid));
            body->add("relu2", std::make_unique<nn::ReLU<T>>());
            body->add("conv3", std::make_unique<nn::Conv2d<T>>(hid, ch[0], 1, 1, 0, 1, false));
            body->add("bn3", std::make_unique<nn::BatchNorm2d<T>>(ch[0]));
            body->add("relu3", std::make_unique<nn::ReLU<T>>());
            stage0_.push_back(std::make_unique<nn::Residual<T>>(std::move(body)));
        }
    } else {
        patch_embed_ = std::make_unique<nn::Conv2d<T>>(3, ch[0], 4, 4, 0, 1, true);
        for (std::size_t b = 0; b < cfg_.conv_stage_blocks; ++b) {
            stage0_.push_back(std::make_unique<MlpBlock<T>>(ch[0], cfg_.mlp_ratio,
                                                            cfg_.use_dw_conv, drop,
                                                            next_seed(), next_seed()));
        }
    }

    for (std::size_t s = 0; s < 3; ++s) {
        const std::size_t cin = ch[s], cout = ch[s + 1];
        if (cfg_.use_conv_downsample) {
            stages_[s].downsample = std::make_unique<nn::Conv2d<T>>(cin, cout, 3, 2, 1, 1, true);
        } else {
            stages_[s].downsample = std::make_unique<nn::PatchMerge<T>>(cin, cout);
        }
        for (std::size_t b = 0; b < cfg_.stage_depths[s]; ++b) {
            stages_[s].blocks.push_back(std::make_unique<MlpBlock<T>>(
                cout, cfg_.mlp_ratio, cfg_.use_dw_conv, drop, next_seed(), next_seed()));
        }
    }

    head_ = std::make_unique<nn::Linear<T>>(ch[3], cfg_.num_classes, true);

    // Registration order defines the checkpoint and initialization order.
    if (tokenizer_) {
        tokenizer_->register_state("tokenizer", reg_);
        for (std::size_t b = 0; b < stage0_.size(); ++b) {
            stage0_[b]->register_state("conv_stage.block" + std::to_string(b), reg_);
        }
    } else {
        patch_embed_->register_state("patch_embed", reg_);
        for (std::size_t b = 0; b < stage0_.size(); ++b) {
            stage0_[b]->register_state("stage0.block" + std::to_string(b), reg_);
        }
    }
    for (std::size_t s = 0; s < 3; ++s) {
        const std::string sp = "stage" + std::to_string(s + 1);
        stages_[s].downsample->register_state(sp + ".downsample", reg_);
        for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
            stages_[s].blocks[b]->register_state(sp + ".block" + std::to_string(b), reg_);
        }
    }
    head_->register_state("head", reg_);

    nn::init_params(reg_, seed);
}

template <typename T>
void Model<T>::check_input(const Tensor<T>& x, std::size_t divisor, const char* who) const {
    if (x.rank() != 4 || x.extent(1) != 3) {
        throw ShapeError(std::string(who) + ": expected input [N,3,H,W], got " +
                         x.shape_string());
    }
    if (x.extent(2) % divisor != 0 || x.extent(3) % divisor != 0) {
        throw GeometryError(std::string(who) + ": spatial extents of " + x.shape_string() +
                            " must be divisible by " + std::to_string(divisor));
    }
}

template <typename T>
Tensor<T> Model<T>::tokenizer_forward(const Tensor<T>& x, Mode mode) {
    check_input(x, 4, "tokenizer");
    return tokenizer_ ? tokenizer_->forward(x, mode) : patch_embed_->forward(x, mode);
}

template <typename T>
Tensor<T> Model<T>::conv_stage_forward(const Tensor<T>& x, Mode mode) {
    if (!cfg_.use_conv_stage) {
        throw StateError("conv stage: not present in this configuration");
    }
    Tensor<T> h = x;
    for (auto& b : stage0_) h = b->forward(h, mode);
    return h;
}

template <typename T>
Tensor<T> Model<T>::backbone(const Tensor<T>& x, Mode mode, FeaturePyramid<T>* taps) {
    Tensor<T> h = tokenizer_ ? tokenizer_->forward(x, mode) : patch_embed_->forward(x, mode);
    for (auto& b : stage0_) h = b->forward(h, mode);
    if (taps) taps->f1 = h;
    for (std::size_t s = 0; s < 3; ++s) {
        h = stages_[s].downsample->forward(h, mode);
        for (auto& b : stages_[s].blocks) h = b->forward(h, mode);
        if (taps) {
            (s == 0 ? taps->f2 : s == 1 ? taps->f3 : taps->f4) = h;
        }
    }
    return h;
}

template <typename T>
Tensor<T> Model<T>::forward_classify(const Tensor<T>& x, Mode mode) {
    check_input(x, 32, "classify");
    Tensor<T> h = backbone(x, mode, nullptr);
    return head_->forward(gap_.forward(h, mode), mode);
}

template <typename T>
FeaturePyramid<T> Model<T>::forward_pyramid(const Tensor<T>& x, Mode mode) {
    check_input(x, 32, "pyramid");
    FeaturePyramid<T> taps;
    backbone(x, mode, &taps);
    return taps;
}

template <typename T>
Tensor<T> Model<T>::backward(const Tensor<T>& grad_logits) {
    Tensor<T> g = gap_.backward(head_->backward(grad_logits));
    for (std::size_t si = 3; si-- > 0;) {
        auto& st = stages_[si];
        for (std::size_t bi = st.blocks.size(); bi-- > 0;) g = st.blocks[bi]->backward(g);
        g = st.downsample->backward(g);
    }
    for (std::size_t bi = stage0_.size(); bi-- > 0;) g = stage0_[bi]->backward(g);
    return tokenizer_ ? tokenizer_->backward(g) : patch_embed_->backward(g);
}

template <typename T>
void Model<T>::zero_grads() {
    for (const auto& p : reg_.params()) p.grad->fill(T(0));
}

template class MlpBlock<float>;
template class MlpBlock<double>;
template class Model<float>;
template class Model<double>;

} // namespace cmlp

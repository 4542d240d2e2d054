#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cmlp/model.hpp"
#include "cmlp/tensor.hpp"

namespace cmlp {
namespace analysis {

// ---------------------------------------------------------------------------
// Analytic cost model.
//
// Conventions (the numbers in the CLI's calibration table assume all three):
//   - one MAC = one multiply-accumulate; convolutions cost
//     Cout * (Cin/groups) * kh * kw * H' * W', linear layers Cin * Cout per
//     position; normalization, activations, pooling, and residual adds are
//     free.
//   - patch merging costs its projection only; the 2x2 concatenation is free.
//   - the classifier head contributes params but zero MACs, so MAC totals
//     scale exactly x4 when both spatial extents double.
// ---------------------------------------------------------------------------

struct CostRow {
    std::string name;      // registry-style layer path, e.g. "stage1.block0.mlp1.fc1"
    std::string kind;      // one of: conv, norm, pool, linear, merge
    std::string out_shape; // per-sample output extents, 'x'-separated
    std::size_t params = 0;
    std::size_t macs = 0;
};

struct CostReport {
    std::vector<CostRow> rows;
    std::size_t h = 0; // input resolution the MAC column was evaluated at
    std::size_t w = 0;

    std::size_t total_params() const;
    std::size_t total_macs() const;
};

// Walks the layer plan analytically; the model is never built. Spatial
// extents must be divisible by 32 so every stage (patch merging included)
// sees whole positions.
CostReport count_macs(const ModelConfig& config, std::size_t h, std::size_t w);

// Same report evaluated at 224x224, cross-checked against the registry:
// the analytic parameter total must equal the summed element counts of the
// model's registered tensors exactly, else the cost model has drifted from
// the builder and a StateError is thrown.
template <typename T>
CostReport count_params(const Model<T>& model);

// Per-stage text table: stage, blocks, channels, output shape, params, MACs,
// plus a totals line that matches count_params / count_macs exactly.
template <typename T>
std::string summarize(const Model<T>& model, std::size_t h, std::size_t w);

// One line per CostRow under the header "name,kind,out_shape,params,macs".
std::string to_csv(const CostReport& report);

// ---------------------------------------------------------------------------
// Feature-map export. Runs an eval forward, taps one pyramid level, and
// writes each selected 2-D map twice: as a raw tensor file (bit-exact
// round-trip) and as an 8-bit PGM for eyeballing. Maps are min-max
// normalized to [0,1]; a constant map has no contrast and becomes all zeros.
// ---------------------------------------------------------------------------

enum class Reduce {
    mean,        // one map: the channel mean
    per_channel, // up to k maps: channels 0..k-1 individually
};

// Files land in out_dir as stage{S}_mean.{pgm,cmlt} or stage{S}_ch{i}.{pgm,cmlt}.
// Returns the normalized maps in emission order. The image must be a single
// [1,3,H,W] sample with extents divisible by 32; stage selects the pyramid
// level (1..4, coarsening with depth).
template <typename T>
std::vector<Tensor<T>> export_feature_maps(Model<T>& model, const Tensor<T>& image,
                                           int stage, Reduce reduce,
                                           const std::string& out_dir,
                                           std::size_t k = 8);

} // namespace analysis
} // namespace cmlp

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>

#include "cmlp/model.hpp"
#include "cmlp/tensor.hpp"

namespace cmlp {
namespace persist {

// ---------------------------------------------------------------------------
// File formats. Checkpoints (magic "CMLP") and single-tensor files (magic
// "CMLT") share the record layout below; all integers and floating-point
// payloads are little-endian regardless of host.
//
//   "CMLP" | u32 version (=1) | u32 config_len | config text (canonical)
//   u32 tensor_count
//   per tensor: u32 name_len | name | u8 dtype (1=f32, 2=f64) | u8 rank
//               u64 extents[rank] | raw values
//   u32 crc32 of every preceding byte
//
// Tensor files replace the config block with nothing and fix tensor_count
// implicitly at one:
//
//   "CMLT" | u32 version (=1) | one tensor record | u32 crc32
//
// A checkpoint stores the parameters in registry order followed by the
// buffers in registry order, so a round-trip is byte-identical.
// ---------------------------------------------------------------------------

// IEEE CRC-32 (reflected, polynomial 0xEDB88320), the variant whose check
// value over the bytes "123456789" is 0xCBF43926.
std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed = 0);

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path);

// Rebuilds the model from the embedded config and restores every parameter
// and buffer. With expected_config given, any field disagreement with the
// embedded config is a PersistError naming the first differing field.
template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path,
                                          const ModelConfig* expected_config = nullptr);

template <typename T>
void save_tensor(const std::string& path, const std::string& name, const Tensor<T>& t);

template <typename T>
std::pair<std::string, Tensor<T>> load_tensor(const std::string& path);

// ---------------------------------------------------------------------------
// Config text: one `key = value` per line, `#` starts a comment, blank lines
// ignored. `variant = <preset>` must be the first setting when present and
// seeds the config with that preset; later lines override individual fields.
// Unknown keys, malformed or wrong-arity values, and invariant violations
// are ConfigErrors carrying the 1-based line number.
// ---------------------------------------------------------------------------

ModelConfig parse_config(const std::string& text);
ModelConfig parse_config_file(const std::string& path);

// Canonical emission: every field, fixed order, variant first. Parsing the
// result reproduces the config exactly, which makes checkpoint round-trips
// byte-identical.
std::string emit_config(const ModelConfig& config);

} // namespace persist
} // namespace cmlp

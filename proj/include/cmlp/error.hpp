#pragma once

#include <stdexcept>
#include <string>

namespace cmlp {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor rank/extent mismatches between operands.
struct ShapeError : Error {
    using Error::Error;
};

// Convolution/pooling geometry violations: output extent < 1, padding not
// smaller than the pooling window, input extents not divisible as required.
struct GeometryError : Error {
    using Error::Error;
};

// Invalid model configuration, either constructed or parsed from text.
// Parse failures carry a 1-based line number in the message.
struct ConfigError : Error {
    using Error::Error;
};

// Dataset and image-file problems: missing/truncated files, bad labels,
// malformed pixel formats. Messages carry a byte offset where meaningful.
struct DataError : Error {
    using Error::Error;
};

// Internal state inconsistencies: optimizer state drifting from the registry,
// backward without a prior train-mode forward, duplicate parameter names.
struct StateError : Error {
    using Error::Error;
};

// Checkpoint and tensor-file problems: CRC mismatch, truncation, unknown
// format version, tensor name/shape mismatch, config mismatch. Messages name
// the offending tensor, field, or byte offset.
struct PersistError : Error {
    using Error::Error;
};

} // namespace cmlp

#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmlp/error.hpp"

namespace cmlp {

enum class Dtype : std::uint8_t { real32 = 1, real64 = 2 };

template <typename T> struct dtype_of;
template <> struct dtype_of<float>  { static constexpr Dtype value = Dtype::real32; };
template <> struct dtype_of<double> { static constexpr Dtype value = Dtype::real64; };

// ---------------------------------------------------------------------------
// Tensor<T>: dense row-major array, rank <= 4, every extent >= 1.
//
// Activations and convolution weights use NCHW order; element (n,c,h,w) sits
// at flat index ((n*C + c)*H + h)*W + w. A default-constructed tensor is the
// empty sentinel (rank 0, no data). Plain value type: copy and move freely.
// ---------------------------------------------------------------------------
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
        : shape_(std::move(shape)), data_(checked_count(shape_), fill) {}

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<T> values) {
        if (checked_count(shape) != values.size()) {
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_string(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_  = std::move(values);
        return t;
    }

    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t extent(std::size_t axis) const {
        assert(axis < shape_.size());
        return shape_[axis];
    }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    T*       data()       { return data_.data(); }
    const T* data() const { return data_.data(); }

    T&       operator[](std::size_t i)       { assert(i < data_.size()); return data_[i]; }
    const T& operator[](std::size_t i) const { assert(i < data_.size()); return data_[i]; }

    // Rank-4 NCHW element access.
    T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[index4(n, c, h, w)];
    }
    const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[index4(n, c, h, w)];
    }

    // Rank-2 element access.
    T& operator()(std::size_t i, std::size_t j) {
        assert(rank() == 2);
        return data_[i * shape_[1] + j];
    }
    const T& operator()(std::size_t i, std::size_t j) const {
        assert(rank() == 2);
        return data_[i * shape_[1] + j];
    }

    std::size_t index4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        assert(rank() == 4);
        assert(n < shape_[0] && c < shape_[1] && h < shape_[2] && w < shape_[3]);
        return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    void fill(T v) { data_.assign(data_.size(), v); }

    std::string shape_string() const { return shape_string(shape_); }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        if (shape.empty()) return "()";
        std::string s;
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += 'x';
            s += std::to_string(shape[i]);
        }
        return s;
    }

private:
    static std::size_t checked_count(const std::vector<std::size_t>& shape) {
        if (shape.size() > 4) {
            throw ShapeError("tensor: rank " + std::to_string(shape.size()) +
                             " exceeds the supported maximum of 4");
        }
        std::size_t count = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_string(shape));
            count *= e;
        }
        return shape.empty() ? 0 : count;
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

} // namespace cmlp

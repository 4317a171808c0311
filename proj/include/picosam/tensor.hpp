#ifndef PICOSAM_TENSOR_HPP
#define PICOSAM_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "error.hpp"

namespace picosam {

// Element type tags. The numeric values are the on-disk dtype codes.
enum class DType : std::uint8_t { float32 = 0, int8 = 1, int32 = 2, float64 = 3 };

template <class T>
struct dtype_of;
template <>
struct dtype_of<float> {
    static constexpr DType value = DType::float32;
};
template <>
struct dtype_of<double> {
    static constexpr DType value = DType::float64;
};
template <>
struct dtype_of<std::int8_t> {
    static constexpr DType value = DType::int8;
};
template <>
struct dtype_of<std::int32_t> {
    static constexpr DType value = DType::int32;
};

template <class T>
concept Element = requires { dtype_of<T>::value; };

inline std::size_t dtype_size(DType d) {
    switch (d) {
    case DType::float32: return 4;
    case DType::int8: return 1;
    case DType::int32: return 4;
    case DType::float64: return 8;
    }
    throw DomainError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

inline const char* dtype_name(DType d) {
    switch (d) {
    case DType::float32: return "float32";
    case DType::int8: return "int8";
    case DType::int32: return "int32";
    case DType::float64: return "float64";
    }
    return "unknown";
}

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major tensor, last axis fastest. A default-constructed tensor is
// empty (rank 0, no elements); every constructed tensor has positive dims.
template <Element T>
class Tensor {
public:
    using value_type = T;
    static constexpr DType dtype = dtype_of<T>::value;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
        check_dims();
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // NCHW accessors; only meaningful on rank-4 tensors.
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        }
        return Tensor(std::move(s), data_);
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_dims() const {
        for (auto d : shape_) {
            if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <Element To, Element From>
Tensor<To> cast(const Tensor<From>& t) {
    std::vector<To> out(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<To>(t[i]);
    return Tensor<To>(t.shape(), std::move(out));
}

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
    if (s.size() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
    }
}

template <Element T, Element U>
void require_same_shape(const Tensor<T>& a, const Tensor<U>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

} // namespace picosam

#endif

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "rmarn/error.hpp"

namespace rmarn::num {

// Dense row-major tensor. Rank 0 is represented as shape {1} by convention;
// the library never needs true scalars as a distinct case.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int64_t> shape, T fill = T(0))
        : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

    static TensorT from(std::vector<int64_t> shape, std::vector<T> data) {
        TensorT t;
        t.shape_ = std::move(shape);
        require(checked_numel(t.shape_) == static_cast<int64_t>(data.size()),
                ErrorKind::argument, "tensor data length does not match shape");
        t.data_ = std::move(data);
        return t;
    }

    static TensorT scalar(T v) { return from({1}, {v}); }

    const std::vector<int64_t>& shape() const noexcept { return shape_; }
    int64_t rank() const noexcept { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 2-D accessors (row-major).
    T& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    const T& at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    // 3-D accessors, shape {c, h, w}.
    T& at3(int64_t c, int64_t i, int64_t j) {
        return data_[static_cast<size_t>((c * shape_[1] + i) * shape_[2] + j)];
    }
    const T& at3(int64_t c, int64_t i, int64_t j) const {
        return data_[static_cast<size_t>((c * shape_[1] + i) * shape_[2] + j)];
    }

    bool same_shape(const TensorT& other) const noexcept { return shape_ == other.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>::from(shape_, std::move(out));
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << ", ";
            os << shape_[i];
        }
        os << ')';
        return os.str();
    }

private:
    static int64_t checked_numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            require(d >= 0, ErrorKind::argument, "negative tensor dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<T> data_;
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace rmarn::num

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace docmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Thrown when a caller breaks an operation's documented preconditions
/// (shape mismatches, out-of-range parameters).
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

/// Dense row-major array. Networks use NCHW layout throughout.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(data_.size() == shape_numel(shape_), "tensor data size does not match shape " + shape_str(shape_));
    }

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        require(shape_numel(s) == data_.size(), "reshape " + shape_str(shape_) + " -> " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Copies sample `n` of a batched tensor into a tensor with a leading dim of 1.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, std::size_t n) {
    Shape s = t.shape();
    const std::size_t per = t.size() / s[0];
    s[0] = 1;
    return Tensor<T>(s, std::vector<T>(t.data() + n * per, t.data() + (n + 1) * per));
}

/// Concatenates tensors along the leading (batch) dimension.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "stack_batch of nothing");
    Shape s = parts.front().shape();
    std::size_t n = 0;
    std::vector<T> data;
    for (const auto& p : parts) {
        require(std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1), "stack_batch shape mismatch");
        n += p.dim(0);
        data.insert(data.end(), p.vec().begin(), p.vec().end());
    }
    s[0] = n;
    return Tensor<T>(s, std::move(data));
}

}  // namespace docmoe

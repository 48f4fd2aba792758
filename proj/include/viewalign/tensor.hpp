#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

namespace viewalign {

// Dense row-major tensor of doubles. Rank 0..4 in practice; shape is
// carried explicitly so shape bugs surface as assertions, not silent
// reinterpretation.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<int64_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        assert(static_cast<int64_t>(data_.size()) == count(shape_));
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int64_t i, int64_t j) {
        assert(rank() == 2);
        return data_[static_cast<size_t>(i * shape_[1] + j)];
    }
    double at(int64_t i, int64_t j) const { return const_cast<Tensor*>(this)->at(i, j); }

    double& at(int64_t i, int64_t j, int64_t k) {
        assert(rank() == 3);
        return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const {
        return const_cast<Tensor*>(this)->at(i, j, k);
    }

    double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        assert(rank() == 4);
        return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return const_cast<Tensor*>(this)->at(i, j, k, l);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Same storage, new shape. Element count must match.
    Tensor reshaped(std::vector<int64_t> shape) const {
        assert(count(shape) == numel());
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    static int64_t count(const std::vector<int64_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), int64_t{1},
                               [](int64_t a, int64_t b) { return a * b; });
    }

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

}  // namespace viewalign

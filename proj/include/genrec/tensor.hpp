#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace genrec {

// Dense row-major tensor of 64-bit reals. Rank 1..4 in practice; a scalar is
// represented as shape {1}. Buffers are shared copy-on-write: graph nodes
// treat values as immutable, so reshapes and value copies are O(1), while
// in-place mutation (optimizer updates) detaches automatically.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape);                  // zero-filled
    Tensor(std::vector<int64_t> shape, std::vector<double> data); // copies data

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor uninitialized(std::vector<int64_t> shape); // caller fills every entry
    static Tensor full(std::vector<int64_t> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    // shares the buffer of `src` under a new shape of equal element count
    static Tensor reshaped_view(const Tensor& src, std::vector<int64_t> shape);

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return size_; }
    bool empty() const { return size_ == 0; }

    double* data() {
        ensure_unique();
        return buf_.get();
    }
    const double* data() const { return buf_.get(); }
    double operator[](int64_t i) const { return buf_.get()[i]; }
    double& operator[](int64_t i) {
        ensure_unique();
        return buf_.get()[i];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    bool bitwise_equal(const Tensor& o) const;

    // rows/cols of the 2-D view: all leading dims collapsed into rows
    int64_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }
    int64_t lead_size() const { return last_dim() == 0 ? 0 : size_ / last_dim(); }

    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::shared_ptr<double[]> buf_;
    int64_t size_ = 0;

    void ensure_unique();
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

} // namespace genrec

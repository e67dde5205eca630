#include "genrec/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "genrec/errors.hpp"

namespace genrec {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw GraphError("negative extent in shape " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

namespace {

std::shared_ptr<double[]> alloc_buffer(int64_t n) {
    if (n == 0) return nullptr;
    return std::shared_ptr<double[]>(new double[static_cast<size_t>(n)]);
}

} // namespace

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    size_ = shape_numel(shape_);
    buf_ = alloc_buffer(size_);
    if (size_ > 0) std::memset(buf_.get(), 0, static_cast<size_t>(size_) * sizeof(double));
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)) {
    size_ = shape_numel(shape_);
    if (size_ != static_cast<int64_t>(data.size())) {
        throw GraphError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_to_string(shape_));
    }
    buf_ = alloc_buffer(size_);
    if (size_ > 0) std::memcpy(buf_.get(), data.data(), static_cast<size_t>(size_) * sizeof(double));
}

Tensor Tensor::uninitialized(std::vector<int64_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = shape_numel(t.shape_);
    t.buf_ = alloc_buffer(t.size_);
    return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t = uninitialized(std::move(shape));
    double* p = t.buf_.get();
    for (int64_t i = 0; i < t.size_; ++i) p[i] = v;
    return t;
}

Tensor Tensor::reshaped_view(const Tensor& src, std::vector<int64_t> shape) {
    if (shape_numel(shape) != src.size_) {
        throw GraphError("cannot view " + src.shape_str() + " as " + shape_to_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = src.size_;
    t.buf_ = src.buf_;
    return t;
}

void Tensor::ensure_unique() {
    if (buf_ && buf_.use_count() > 1) {
        std::shared_ptr<double[]> fresh = alloc_buffer(size_);
        std::memcpy(fresh.get(), buf_.get(), static_cast<size_t>(size_) * sizeof(double));
        buf_ = std::move(fresh);
    }
}

bool Tensor::all_finite() const {
    const double* p = buf_.get();
    for (int64_t i = 0; i < size_; ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

bool Tensor::bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    if (size_ == 0) return true;
    return std::memcmp(buf_.get(), o.buf_.get(), static_cast<size_t>(size_) * sizeof(double)) == 0;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

} // namespace genrec

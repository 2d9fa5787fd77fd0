#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnnoise {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    /// Same data viewed under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    void fill(double value);

    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Deterministic random stream keyed by (master_seed, stream_id).
///
/// Two streams built from the same key produce the same sequence no matter
/// how calls on other streams are interleaved. Monte-Carlo trials and
/// parallel workers derive their own stream by id instead of sharing one.
class RngStream {
public:
    RngStream(std::uint64_t master_seed, std::uint64_t stream_id);

    std::uint64_t master_seed() const { return master_seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);
    /// Standard normal variate (Box-Muller, spare value cached).
    double normal();

    /// Child stream whose key is derived from this stream's key and `child_id`.
    RngStream child(std::uint64_t child_id) const;

private:
    std::uint64_t master_seed_;
    std::uint64_t stream_id_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Elementwise and reductions

double sum(const Tensor& t);
double mean(const Tensor& t);
/// sqrt(mean((x - mean(x))^2)), population convention.
double population_std(const Tensor& t);
double squared_norm(const Tensor& t);
bool all_finite(const Tensor& t);

void add_inplace(Tensor& a, const Tensor& b);
void scale_inplace(Tensor& a, double s);
/// a += s * b
void axpy_inplace(Tensor& a, double s, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);

Tensor identity(std::size_t n);

// ---------------------------------------------------------------------------
// Random sampling

Tensor gaussian_sample(const Shape& shape, double mean, double std, RngStream& rng);
Tensor uniform_sample(const Shape& shape, double lo, double hi, RngStream& rng);

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// C = alpha * op(A) * op(B) + beta * C on row-major buffers.
/// op(A) is m x k, op(B) is k x n.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding)

struct ConvGeometry {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_height() const;
    std::size_t out_width() const;
    std::size_t patch_size() const { return channels * kernel_h * kernel_w; }
};

/// Output extent of one spatial axis; throws ShapeError if it would be < 1.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

/// Unfolds one image (C x H x W) into a (C*Kh*Kw) x (H'*W') column matrix.
void im2col(const double* image, const ConvGeometry& g, double* columns);
/// Accumulates a column matrix back into an image buffer (adjoint of im2col).
void col2im(const double* columns, const ConvGeometry& g, double* image);

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);
/// Gradient of conv2d w.r.t. its input.
Tensor conv2d_backward_input(const Tensor& dy, const Tensor& kernel, const Shape& input_shape,
                             std::size_t stride, std::size_t padding);
/// Gradient of conv2d w.r.t. its kernel.
Tensor conv2d_backward_kernel(const Tensor& dy, const Tensor& x, const Shape& kernel_shape,
                              std::size_t stride, std::size_t padding);

}  // namespace bnnoise

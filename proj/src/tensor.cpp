#include "bnnoise/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace bnnoise {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::mt19937_64 make_engine(std::uint64_t master_seed, std::uint64_t stream_id)
{
    std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                      static_cast<std::uint32_t>(master_seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32),
                      0x6e6f6973U};
    return std::mt19937_64(seq);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what)
{
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
}

}  // namespace

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
{
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_to_string(shape_));
    }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_to_string(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
    }
}

std::size_t Tensor::dim(std::size_t axis) const
{
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape_));
    }
    return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

// ---------------------------------------------------------------------------

RngStream::RngStream(std::uint64_t master_seed, std::uint64_t stream_id)
    : master_seed_(master_seed), stream_id_(stream_id), engine_(make_engine(master_seed, stream_id))
{
}

double RngStream::uniform()
{
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t RngStream::below(std::size_t n)
{
    if (n == 0) throw DomainError("RngStream::below: n must be positive");
    // Rejection sampling keeps the result unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
}

double RngStream::normal()
{
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

RngStream RngStream::child(std::uint64_t child_id) const
{
    return RngStream(master_seed_, splitmix64(stream_id_ ^ splitmix64(child_id + 0x5851f42d4c957f2dULL)));
}

// ---------------------------------------------------------------------------

double sum(const Tensor& t)
{
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s;
}

double mean(const Tensor& t)
{
    if (t.empty()) throw DomainError("mean of empty tensor");
    return sum(t) / static_cast<double>(t.size());
}

double population_std(const Tensor& t)
{
    if (t.empty()) throw DomainError("population_std of empty tensor");
    // shifted by the first element: exact zero for a constant tensor
    const double shift = t[0];
    double s = 0.0;
    for (double v : t.data()) s += v - shift;
    const double mu = s / static_cast<double>(t.size());
    double acc = 0.0;
    for (double v : t.data()) acc += (v - shift - mu) * (v - shift - mu);
    return std::sqrt(acc / static_cast<double>(t.size()));
}

double squared_norm(const Tensor& t)
{
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return s;
}

bool all_finite(const Tensor& t)
{
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

void add_inplace(Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "add");
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

void scale_inplace(Tensor& a, double s)
{
    for (double& v : a.data()) v *= s;
}

void axpy_inplace(Tensor& a, double s, const Tensor& b)
{
    require_same_shape(a, b, "axpy");
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += s * bd[i];
}

Tensor add(const Tensor& a, const Tensor& b)
{
    Tensor out = a;
    add_inplace(out, b);
    return out;
}

Tensor subtract(const Tensor& a, const Tensor& b)
{
    Tensor out = a;
    axpy_inplace(out, -1.0, b);
    return out;
}

Tensor identity(std::size_t n)
{
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
    return out;
}

// ---------------------------------------------------------------------------

Tensor gaussian_sample(const Shape& shape, double mean, double std, RngStream& rng)
{
    if (!(std >= 0.0)) throw DomainError("gaussian_sample: std must be non-negative");
    Tensor out(shape, mean);
    if (std == 0.0) return out;
    for (double& v : out.data()) v = mean + std * rng.normal();
    return out;
}

Tensor uniform_sample(const Shape& shape, double lo, double hi, RngStream& rng)
{
    Tensor out(shape);
    for (double& v : out.data()) v = rng.uniform(lo, hi);
    return out;
}

// ---------------------------------------------------------------------------

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c)
{
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    MutMap cm(c, M, N);
    if (beta == 0.0) {
        cm.setZero();
    } else if (beta != 1.0) {
        cm *= beta;
    }
    if (!trans_a && !trans_b) {
        cm.noalias() += alpha * (ConstMap(a, M, K) * ConstMap(b, K, N));
    } else if (trans_a && !trans_b) {
        cm.noalias() += alpha * (ConstMap(a, K, M).transpose() * ConstMap(b, K, N));
    } else if (!trans_a && trans_b) {
        cm.noalias() += alpha * (ConstMap(a, M, K) * ConstMap(b, N, K).transpose());
    } else {
        cm.noalias() += alpha * (ConstMap(a, K, M).transpose() * ConstMap(b, N, K).transpose());
    }
}

Tensor matmul(const Tensor& a, const Tensor& b)
{
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul inner extents differ: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    Tensor out({a.dim(0), b.dim(1)});
    gemm(false, false, a.dim(0), b.dim(1), a.dim(1), 1.0, a.data().data(), b.data().data(), 0.0,
         out.data().data());
    return out;
}

Tensor transpose(const Tensor& a)
{
    if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 tensor");
    Tensor out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

// ---------------------------------------------------------------------------

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding)
{
    if (stride == 0) throw ShapeError("convolution stride must be positive");
    const auto padded = static_cast<long long>(in + 2 * padding);
    const auto span = padded - static_cast<long long>(kernel);
    if (kernel == 0 || span < 0) {
        throw ShapeError("convolution output extent is not positive (in=" + std::to_string(in) +
                         ", kernel=" + std::to_string(kernel) + ", padding=" + std::to_string(padding) + ")");
    }
    return static_cast<std::size_t>(span) / stride + 1;
}

std::size_t ConvGeometry::out_height() const { return conv_output_extent(height, kernel_h, stride, padding); }
std::size_t ConvGeometry::out_width() const { return conv_output_extent(width, kernel_w, stride, padding); }

void im2col(const double* image, const ConvGeometry& g, double* columns)
{
    const std::size_t oh = g.out_height();
    const std::size_t ow = g.out_width();
    const auto pad = static_cast<long long>(g.padding);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
        const double* plane = image + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj, ++row) {
                double* out = columns + row * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long long iy = static_cast<long long>(y * g.stride + ki) - pad;
                    if (iy < 0 || iy >= static_cast<long long>(g.height)) {
                        std::fill(out + y * ow, out + (y + 1) * ow, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * g.width;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long long ix = static_cast<long long>(x * g.stride + kj) - pad;
                        out[y * ow + x] =
                            (ix < 0 || ix >= static_cast<long long>(g.width)) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im(const double* columns, const ConvGeometry& g, double* image)
{
    const std::size_t oh = g.out_height();
    const std::size_t ow = g.out_width();
    const auto pad = static_cast<long long>(g.padding);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
        double* plane = image + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj, ++row) {
                const double* in = columns + row * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long long iy = static_cast<long long>(y * g.stride + ki) - pad;
                    if (iy < 0 || iy >= static_cast<long long>(g.height)) continue;
                    double* dst = plane + static_cast<std::size_t>(iy) * g.width;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long long ix = static_cast<long long>(x * g.stride + kj) - pad;
                        if (ix >= 0 && ix < static_cast<long long>(g.width)) dst[ix] += in[y * ow + x];
                    }
                }
            }
        }
    }
}

namespace {

ConvGeometry geometry_for(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t padding)
{
    if (input.size() != 4 || kernel.size() != 4) throw ShapeError("conv2d expects rank-4 input and kernel");
    if (input[1] != kernel[1]) {
        throw ShapeError("conv2d channel mismatch: input " + shape_to_string(input) + ", kernel " +
                         shape_to_string(kernel));
    }
    ConvGeometry g{input[1], input[2], input[3], kernel[2], kernel[3], stride, padding};
    (void)g.out_height();
    (void)g.out_width();
    return g;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding)
{
    const ConvGeometry g = geometry_for(x.shape(), kernel.shape(), stride, padding);
    const std::size_t n = x.dim(0);
    const std::size_t f = kernel.dim(0);
    const std::size_t spatial = g.out_height() * g.out_width();
    Tensor out({n, f, g.out_height(), g.out_width()});
    std::vector<double> cols(g.patch_size() * spatial);
    const std::size_t in_stride = g.channels * g.height * g.width;
    for (std::size_t i = 0; i < n; ++i) {
        im2col(x.data().data() + i * in_stride, g, cols.data());
        gemm(false, false, f, spatial, g.patch_size(), 1.0, kernel.data().data(), cols.data(), 0.0,
             out.data().data() + i * f * spatial);
    }
    return out;
}

Tensor conv2d_backward_input(const Tensor& dy, const Tensor& kernel, const Shape& input_shape,
                             std::size_t stride, std::size_t padding)
{
    const ConvGeometry g = geometry_for(input_shape, kernel.shape(), stride, padding);
    const std::size_t n = input_shape[0];
    const std::size_t f = kernel.dim(0);
    const std::size_t spatial = g.out_height() * g.out_width();
    if (dy.shape() != Shape{n, f, g.out_height(), g.out_width()}) {
        throw ShapeError("conv2d backward: upstream gradient shape " + shape_to_string(dy.shape()));
    }
    Tensor dx(input_shape);
    std::vector<double> cols(g.patch_size() * spatial);
    const std::size_t in_stride = g.channels * g.height * g.width;
    for (std::size_t i = 0; i < n; ++i) {
        gemm(true, false, g.patch_size(), spatial, f, 1.0, kernel.data().data(),
             dy.data().data() + i * f * spatial, 0.0, cols.data());
        col2im(cols.data(), g, dx.data().data() + i * in_stride);
    }
    return dx;
}

Tensor conv2d_backward_kernel(const Tensor& dy, const Tensor& x, const Shape& kernel_shape,
                              std::size_t stride, std::size_t padding)
{
    const ConvGeometry g = geometry_for(x.shape(), kernel_shape, stride, padding);
    const std::size_t n = x.dim(0);
    const std::size_t f = kernel_shape[0];
    const std::size_t spatial = g.out_height() * g.out_width();
    if (dy.shape() != Shape{n, f, g.out_height(), g.out_width()}) {
        throw ShapeError("conv2d backward: upstream gradient shape " + shape_to_string(dy.shape()));
    }
    Tensor dk(kernel_shape);
    std::vector<double> cols(g.patch_size() * spatial);
    const std::size_t in_stride = g.channels * g.height * g.width;
    for (std::size_t i = 0; i < n; ++i) {
        im2col(x.data().data() + i * in_stride, g, cols.data());
        gemm(false, true, f, g.patch_size(), spatial, 1.0, dy.data().data() + i * f * spatial, cols.data(),
             1.0, dk.data().data());
    }
    return dk;
}

}  // namespace bnnoise

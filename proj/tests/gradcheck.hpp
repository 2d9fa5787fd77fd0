#pragma once

#include "bnnoise/nn.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace gradcheck {

using bnnoise::RngStream;
using bnnoise::Shape;
using bnnoise::Tensor;

/// ||a - b|| / (||a|| + ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b)
{
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(na) + std::sqrt(nb);
    return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Central differences of a scalar function with respect to every entry of `x`.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& x, double h = 1e-6)
{
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f();
        x[i] = keep - h;
        const double down = f();
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// <r, y>: projects a layer output onto a fixed random direction so that
/// dy = r is the upstream gradient.
inline double project(const Tensor& r, const Tensor& y)
{
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
    return s;
}

struct Result {
    std::string what;
    double error = 0.0;
};

enum class Kernel { Dense, Conv2d, BatchNormTrain, Relu, MaxPool, AvgPool, Shortcut, SoftmaxCrossEntropy };

inline const char* name(Kernel k)
{
    static const char* names[] = {"Dense", "Conv2d", "BatchNormTrain", "Relu", "MaxPool", "AvgPool", "Shortcut",
                                  "SoftmaxCrossEntropy"};
    return names[static_cast<int>(k)];
}

inline constexpr Kernel kAllKernels[] = {Kernel::Dense, Kernel::Conv2d, Kernel::BatchNormTrain, Kernel::Relu,
                                         Kernel::MaxPool, Kernel::AvgPool, Kernel::Shortcut,
                                         Kernel::SoftmaxCrossEntropy};

/// Checks every gradient one layer kernel produces on a random instance;
/// returns one entry per checked tensor.
std::vector<Result> check_layer_instance(Kernel kind, std::uint64_t seed);

/// Checks every parameter gradient of a small conv + BN + dense model on a
/// 4-sample batch. A bias that feeds a BatchNorm has an identically zero
/// gradient; for it the entry holds max(||analytic||, ||numeric||) instead of
/// a relative error, which would only measure rounding noise.
std::vector<Result> check_model_instance(std::uint64_t seed);

}  // namespace gradcheck

#pragma once

// Test-only reference implementations and finite-difference oracles.  These
// deliberately avoid the library's fast math paths: activations and losses
// are recomputed with <cmath> so agreement is evidence, not tautology.

#include <cmath>
#include <random>
#include <vector>

#include "upgd/network.hpp"
#include "upgd/rng.hpp"

namespace ref {

inline std::vector<double> forward_naive(const upgd::Network& net, const std::vector<double>& x) {
    std::vector<double> h = x;
    for (size_t l = 0; l < net.depth(); ++l) {
        const upgd::Matrix& W = net.layers[l].W;
        std::vector<double> a(W.rows(), 0.0);
        for (size_t i = 0; i < W.rows(); ++i) {
            for (size_t j = 0; j < h.size(); ++j) a[i] += W(i, j) * h[j];
            if (W.cols() == h.size() + 1) a[i] += W(i, h.size());  // bias column
        }
        std::vector<double> out(a.size());
        switch (net.layers[l].act) {
            case upgd::Act::Identity:
                out = a;
                break;
            case upgd::Act::ReLU:
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0 ? a[i] : 0.0;
                break;
            case upgd::Act::LeakyReLU:
                for (size_t i = 0; i < a.size(); ++i)
                    out[i] = a[i] > 0 ? a[i] : net.layers[l].slope * a[i];
                break;
            case upgd::Act::Tanh:
                for (size_t i = 0; i < a.size(); ++i) out[i] = std::tanh(a[i]);
                break;
            case upgd::Act::SoftmaxOutput: {
                double mx = a[0];
                for (double v : a) mx = std::max(mx, v);
                double z = 0.0;
                for (size_t i = 0; i < a.size(); ++i) {
                    out[i] = std::exp(a[i] - mx);
                    z += out[i];
                }
                for (double& v : out) v /= z;
                break;
            }
        }
        h = out;
    }
    return h;
}

inline double loss_naive(const std::vector<double>& yhat, const std::vector<double>& y,
                         upgd::Loss kind) {
    if (kind == upgd::Loss::SquaredError) {
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += (yhat[i] - y[i]) * (yhat[i] - y[i]);
        return 0.5 * s;
    }
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i)
        if (y[i] != 0.0) s -= y[i] * std::log(std::max(yhat[i], 1e-300));
    return s;
}

inline double loss_at(const upgd::Network& net, const std::vector<double>& x,
                      const std::vector<double>& y) {
    return loss_naive(forward_naive(net, x), y, net.loss_kind);
}

// Central difference dL/dw; the caller owns kink avoidance.
inline double fd_gradient(upgd::Network& net, const std::vector<double>& x,
                          const std::vector<double>& y, size_t l, size_t i, size_t j,
                          double delta = 1e-5) {
    double saved = net.layers[l].W(i, j);
    net.layers[l].W(i, j) = saved + delta;
    double lp = loss_at(net, x, y);
    net.layers[l].W(i, j) = saved - delta;
    double lm = loss_at(net, x, y);
    net.layers[l].W(i, j) = saved;
    return (lp - lm) / (2.0 * delta);
}

// Second central difference d2L/dw2.  For losses polynomial of degree <= 2 in
// the weight this is exact up to roundoff, so a generous delta is safest.
inline double fd_second(upgd::Network& net, const std::vector<double>& x,
                        const std::vector<double>& y, size_t l, size_t i, size_t j,
                        double delta = 1e-3) {
    double saved = net.layers[l].W(i, j);
    double l0 = loss_at(net, x, y);
    net.layers[l].W(i, j) = saved + delta;
    double lp = loss_at(net, x, y);
    net.layers[l].W(i, j) = saved - delta;
    double lm = loss_at(net, x, y);
    net.layers[l].W(i, j) = saved;
    return (lp - 2.0 * l0 + lm) / (delta * delta);
}

// True when some pre-activation of a kinked unit sits within eps of the kink,
// where finite differences straddle the non-smoothness.
inline bool near_kink(const upgd::Network& net, const std::vector<double>& x, double eps = 1e-3) {
    std::vector<double> h = x;
    for (size_t l = 0; l < net.depth(); ++l) {
        const upgd::Matrix& W = net.layers[l].W;
        std::vector<double> a(W.rows(), 0.0);
        for (size_t i = 0; i < W.rows(); ++i) {
            for (size_t j = 0; j < h.size(); ++j) a[i] += W(i, j) * h[j];
            if (W.cols() == h.size() + 1) a[i] += W(i, h.size());
        }
        bool kinked =
            net.layers[l].act == upgd::Act::ReLU || net.layers[l].act == upgd::Act::LeakyReLU;
        std::vector<double> out(a.size());
        for (size_t i = 0; i < a.size(); ++i) {
            if (kinked && std::fabs(a[i]) < eps) return true;
            switch (net.layers[l].act) {
                case upgd::Act::Identity: out[i] = a[i]; break;
                case upgd::Act::ReLU: out[i] = a[i] > 0 ? a[i] : 0.0; break;
                case upgd::Act::LeakyReLU:
                    out[i] = a[i] > 0 ? a[i] : net.layers[l].slope * a[i];
                    break;
                case upgd::Act::Tanh: out[i] = std::tanh(a[i]); break;
                case upgd::Act::SoftmaxOutput: out[i] = a[i]; break;
            }
        }
        if (net.layers[l].act == upgd::Act::SoftmaxOutput) break;
        h = out;
    }
    return false;
}

inline std::vector<double> random_x(upgd::Rng& rng, size_t n, double scale = 1.0) {
    std::vector<double> x(n);
    for (double& v : x) v = scale * rng.normal();
    return x;
}

inline std::vector<double> one_hot(size_t k, size_t n) {
    std::vector<double> y(n, 0.0);
    y[k] = 1.0;
    return y;
}

inline bool close_rel(double a, double b, double rtol, double atol = 1e-8) {
    return std::fabs(a - b) <= rtol * std::max(std::fabs(a), std::fabs(b)) + atol;
}

} // namespace ref

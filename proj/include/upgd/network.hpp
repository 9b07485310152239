#pragma once

// Feedforward network core: layer storage, initialization, forward pass with
// cached pre-activations, and the loss functions.  Biases, when enabled, are
// realized as one extra input column fixed at 1 so that every update and
// utility rule treats them as ordinary weights.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "upgd/matrix.hpp"
#include "upgd/fastmath.hpp"
#include "upgd/rng.hpp"

namespace upgd {

enum class Act { Identity, ReLU, LeakyReLU, Tanh, SoftmaxOutput };
enum class Loss { SquaredError, CrossEntropy };

struct LayerSpec {
    size_t width;
    Act act;
    double slope = 0.01;  // LeakyReLU only
};

struct Layer {
    Matrix W;  // rows = layer width, cols = fan-in (+1 if bias)
    Act act;
    double slope;
};

struct Network {
    std::vector<Layer> layers;
    size_t input_dim = 0;
    bool bias_enabled = false;
    Loss loss_kind = Loss::SquaredError;

    size_t depth() const { return layers.size(); }
    size_t out_dim(size_t l) const { return layers[l].W.rows(); }
    // Fan-in of layer l, excluding the bias column.
    size_t in_dim(size_t l) const { return layers[l].W.cols() - (bias_enabled ? 1 : 0); }
    size_t output_dim() const { return layers.back().W.rows(); }
    size_t weight_count() const {
        size_t n = 0;
        for (const auto& l : layers) n += l.W.size();
        return n;
    }
};

// Per-layer a_l and h_l for one sample; h entries never include the bias 1.
struct ForwardCache {
    std::vector<double> x;
    std::vector<std::vector<double>> a, h;

    const std::vector<double>& yhat() const { return h.back(); }

    void resize(const Network& net) {
        x.resize(net.input_dim);
        a.resize(net.depth());
        h.resize(net.depth());
        for (size_t l = 0; l < net.depth(); ++l) {
            a[l].resize(net.out_dim(l));
            h[l].resize(net.out_dim(l));
        }
    }

    // Activation feeding layer l (the input for l = 0).
    const std::vector<double>& input_of(size_t l) const { return l == 0 ? x : h[l - 1]; }
};

inline double act_value(Act act, double slope, double a) {
    switch (act) {
        case Act::Identity: return a;
        case Act::ReLU: return a > 0.0 ? a : 0.0;
        case Act::LeakyReLU: return a > 0.0 ? a : slope * a;
        case Act::Tanh: return std::tanh(a);
        case Act::SoftmaxOutput: break;  // handled vector-wise
    }
    throw std::logic_error("act_value: softmax is not element-wise");
}

// First derivative of the activation; h is the already-computed output, which
// lets Tanh avoid recomputation.  ReLU uses the a > 0 subgradient convention,
// so the derivative at exactly 0 is 0 (slope for LeakyReLU).
inline double act_deriv(Act act, double slope, double a, double h) {
    switch (act) {
        case Act::Identity: return 1.0;
        case Act::ReLU: return a > 0.0 ? 1.0 : 0.0;
        case Act::LeakyReLU: return a > 0.0 ? 1.0 : slope;
        case Act::Tanh: return 1.0 - h * h;
        case Act::SoftmaxOutput: break;
    }
    throw std::logic_error("act_deriv: softmax is not element-wise");
}

// Second derivative; zero everywhere for the piecewise-linear activations.
inline double act_second_deriv(Act act, double /*slope*/, double /*a*/, double h) {
    if (act == Act::Tanh) return -2.0 * h * (1.0 - h * h);
    return 0.0;
}

// h <- sigma_a(a) for one layer; softmax uses max subtraction for stability.
inline void apply_act(Act act, double slope, const double* a, double* h, size_t n) {
    switch (act) {
        case Act::Identity:
            for (size_t i = 0; i < n; ++i) h[i] = a[i];
            return;
        case Act::ReLU:
            for (size_t i = 0; i < n; ++i) h[i] = a[i] > 0.0 ? a[i] : 0.0;
            return;
        case Act::LeakyReLU:
            for (size_t i = 0; i < n; ++i) h[i] = a[i] > 0.0 ? a[i] : slope * a[i];
            return;
        case Act::Tanh:
            for (size_t i = 0; i < n; ++i) h[i] = std::tanh(a[i]);
            return;
        case Act::SoftmaxOutput: {
            double m = a[0];
            for (size_t i = 1; i < n; ++i) m = a[i] > m ? a[i] : m;
            double sum = 0.0;
            for (size_t i = 0; i < n; ++i) {
                h[i] = fastmath::exp(a[i] - m);
                sum += h[i];
            }
            double inv = 1.0 / sum;
            for (size_t i = 0; i < n; ++i) h[i] *= inv;
            return;
        }
    }
}

// Pre-activation of layer l from a given previous-layer activation.
inline void layer_preact(const Network& net, size_t l, const double* prev, double* a_out) {
    const Matrix& W = net.layers[l].W;
    size_t n = net.in_dim(l);
    for (size_t i = 0; i < W.rows(); ++i) {
        const double* wr = W.row(i);
        double v = dot8(wr, prev, n);
        if (net.bias_enabled) v += wr[n];
        a_out[i] = v;
    }
}

// Hot-path forward: x must be finite and of length input_dim (unchecked).
inline void forward(const Network& net, const double* x, ForwardCache& cache) {
    cache.resize(net);
    for (size_t i = 0; i < net.input_dim; ++i) cache.x[i] = x[i];
    const double* prev = cache.x.data();
    for (size_t l = 0; l < net.depth(); ++l) {
        layer_preact(net, l, prev, cache.a[l].data());
        apply_act(net.layers[l].act, net.layers[l].slope, cache.a[l].data(),
                  cache.h[l].data(), cache.h[l].size());
        prev = cache.h[l].data();
    }
}

inline ForwardCache forward(const Network& net, const std::vector<double>& x) {
    if (x.size() != net.input_dim)
        throw std::invalid_argument("forward: input has length " + std::to_string(x.size()) +
                                    ", network expects " + std::to_string(net.input_dim));
    for (double v : x)
        if (!std::isfinite(v)) throw std::invalid_argument("forward: non-finite input entry");
    ForwardCache cache;
    forward(net, x.data(), cache);
    return cache;
}

inline double loss(const std::vector<double>& yhat, const std::vector<double>& y, Loss kind) {
    if (yhat.size() != y.size())
        throw std::invalid_argument("loss: prediction and target lengths differ");
    for (size_t i = 0; i < y.size(); ++i)
        if (!std::isfinite(yhat[i]) || !std::isfinite(y[i]))
            throw std::invalid_argument("loss: non-finite value");
    if (kind == Loss::SquaredError) {
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) {
            double d = yhat[i] - y[i];
            s += d * d;
        }
        return 0.5 * s;
    }
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        if (y[i] == 0.0) continue;
        if (yhat[i] <= 0.0) return std::numeric_limits<double>::infinity();
        double p = yhat[i] < 1e-15 ? 1e-15 : yhat[i];
        s -= y[i] * std::log(p);
    }
    return s < 0.0 ? 0.0 : s;  // tiny negative from rounding when yhat ~ 1
}

inline Network build_network(const std::vector<LayerSpec>& spec, size_t input_dim, Loss loss_kind,
                             uint64_t init_seed, bool bias_enabled = false) {
    if (spec.empty()) throw std::invalid_argument("build_network: need at least one layer");
    if (input_dim == 0) throw std::invalid_argument("build_network: zero input dimension");
    for (const auto& ls : spec)
        if (ls.width == 0) throw std::invalid_argument("build_network: zero layer width");
    for (size_t l = 0; l + 1 < spec.size(); ++l)
        if (spec[l].act == Act::SoftmaxOutput)
            throw std::invalid_argument("build_network: softmax only legal at the final layer");
    bool softmax_last = spec.back().act == Act::SoftmaxOutput;
    if (softmax_last != (loss_kind == Loss::CrossEntropy))
        throw std::invalid_argument(
            "build_network: softmax output and cross-entropy loss must be used together");

    Network net;
    net.input_dim = input_dim;
    net.bias_enabled = bias_enabled;
    net.loss_kind = loss_kind;
    Rng rng(init_seed);
    size_t fan_in = input_dim;
    for (const auto& ls : spec) {
        Layer layer;
        layer.act = ls.act;
        layer.slope = ls.slope;
        layer.W = Matrix(ls.width, fan_in + (bias_enabled ? 1 : 0));
        // Uniform fan-in scaling: |w| < 1/sqrt(fan_in), so each pre-activation
        // has variance at most 1/3 regardless of layer width.
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (size_t i = 0; i < ls.width; ++i) {
            double* row = layer.W.row(i);
            for (size_t j = 0; j < fan_in; ++j) row[j] = rng.uniform(-bound, bound);
            if (bias_enabled) row[fan_in] = 0.0;
        }
        net.layers.push_back(std::move(layer));
        fan_in = ls.width;
    }
    return net;
}

} // namespace upgd

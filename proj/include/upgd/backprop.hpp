#pragma once

// Exact first-order backpropagation plus the layer-wise Hessian-diagonal
// estimate that drops off-diagonal curvature terms, and the gate derivatives
// used for feature utilities.  Everything runs in one backward sweep, linear
// in the parameter count.

#include <stdexcept>
#include <vector>

#include "upgd/network.hpp"

namespace upgd {

struct DerivativeBundle {
    std::vector<Matrix> F;                    // dL/dW per layer
    std::vector<Matrix> S;                    // Hessian-diagonal estimate per layer
    std::vector<std::vector<double>> ga, sa;  // dL/da and its second-order analogue
    std::vector<std::vector<double>> f, s;    // gate derivatives, hidden layers only
    bool has_second = false;
    bool has_gates = false;

    void resize(const Network& net, bool second) {
        size_t L = net.depth();
        F.resize(L);
        ga.resize(L);
        for (size_t l = 0; l < L; ++l) {
            if (!F[l].same_shape(net.layers[l].W))
                F[l] = Matrix(net.layers[l].W.rows(), net.layers[l].W.cols());
            ga[l].resize(net.out_dim(l));
        }
        if (second) {
            S.resize(L);
            sa.resize(L);
            for (size_t l = 0; l < L; ++l) {
                if (!S[l].same_shape(net.layers[l].W))
                    S[l] = Matrix(net.layers[l].W.rows(), net.layers[l].W.cols());
                sa[l].resize(net.out_dim(l));
            }
        }
        has_second = second;
        has_gates = false;
    }
};

namespace detail {

inline void check_cache(const Network& net, const ForwardCache& cache,
                        const std::vector<double>& y) {
    if (cache.x.size() != net.input_dim || cache.a.size() != net.depth())
        throw std::invalid_argument("backward: cache does not match network");
    for (size_t l = 0; l < net.depth(); ++l)
        if (cache.a[l].size() != net.out_dim(l))
            throw std::invalid_argument("backward: cache does not match network");
    if (y.size() != net.output_dim())
        throw std::invalid_argument("backward: target has wrong length");
}

} // namespace detail

// First-order pass, optionally with the second-order diagonal.  Final-layer
// seeds: cross-entropy uses ga = q - p and sa = q - q*q; squared error uses
// ga = (yhat - y) * sigma'(a) and sa = 1.
inline void backward(const Network& net, const ForwardCache& cache, const std::vector<double>& y,
                     DerivativeBundle& b, bool second_order = false) {
    detail::check_cache(net, cache, y);
    b.resize(net, second_order);
    size_t L = net.depth() - 1;

    {
        const auto& q = cache.h[L];
        const auto& aL = cache.a[L];
        const Layer& top = net.layers[L];
        if (net.loss_kind == Loss::CrossEntropy) {
            for (size_t i = 0; i < q.size(); ++i) b.ga[L][i] = q[i] - y[i];
            if (second_order)
                for (size_t i = 0; i < q.size(); ++i) b.sa[L][i] = q[i] - q[i] * q[i];
        } else {
            for (size_t i = 0; i < q.size(); ++i)
                b.ga[L][i] = (q[i] - y[i]) * act_deriv(top.act, top.slope, aL[i], q[i]);
            if (second_order)
                for (size_t i = 0; i < q.size(); ++i) b.sa[L][i] = 1.0;
        }
    }

    for (size_t l = L + 1; l-- > 0;) {
        const Matrix& W = net.layers[l].W;
        const std::vector<double>& prev = cache.input_of(l);
        size_t n = net.in_dim(l);

        for (size_t i = 0; i < W.rows(); ++i) {
            double g = b.ga[l][i];
            double* Fr = b.F[l].row(i);
            for (size_t j = 0; j < n; ++j) Fr[j] = g * prev[j];
            if (net.bias_enabled) Fr[n] = g;
        }
        if (second_order) {
            for (size_t i = 0; i < W.rows(); ++i) {
                double sv = b.sa[l][i];
                double* Sr = b.S[l].row(i);
                for (size_t j = 0; j < n; ++j) Sr[j] = sv * prev[j] * prev[j];
                if (net.bias_enabled) Sr[n] = sv;
            }
        }
        if (l == 0) break;

        // Accumulate W^T ga (and W.^2^T sa) in one sweep over W, then apply
        // the activation derivatives of the layer below.
        std::vector<double>& glo = b.ga[l - 1];
        for (size_t j = 0; j < n; ++j) glo[j] = 0.0;
        if (second_order) {
            std::vector<double>& slo = b.sa[l - 1];
            for (size_t j = 0; j < n; ++j) slo[j] = 0.0;
            for (size_t i = 0; i < W.rows(); ++i) {
                const double* wr = W.row(i);
                double g = b.ga[l][i], sv = b.sa[l][i];
                for (size_t j = 0; j < n; ++j) {
                    glo[j] += wr[j] * g;
                    slo[j] += wr[j] * wr[j] * sv;
                }
            }
            const Layer& lay = net.layers[l - 1];
            for (size_t j = 0; j < n; ++j) {
                double d1 = act_deriv(lay.act, lay.slope, cache.a[l - 1][j], cache.h[l - 1][j]);
                double d2 = act_second_deriv(lay.act, lay.slope, cache.a[l - 1][j], cache.h[l - 1][j]);
                slo[j] = d1 * d1 * slo[j] + d2 * glo[j];
                glo[j] *= d1;
            }
        } else {
            for (size_t i = 0; i < W.rows(); ++i) {
                const double* wr = W.row(i);
                double g = b.ga[l][i];
                for (size_t j = 0; j < n; ++j) glo[j] += wr[j] * g;
            }
            const Layer& lay = net.layers[l - 1];
            for (size_t j = 0; j < n; ++j)
                glo[j] *= act_deriv(lay.act, lay.slope, cache.a[l - 1][j], cache.h[l - 1][j]);
        }
    }
}

inline DerivativeBundle backward(const Network& net, const ForwardCache& cache,
                                 const std::vector<double>& y) {
    DerivativeBundle b;
    backward(net, cache, y, b, false);
    return b;
}

inline DerivativeBundle hesscale_backward(const Network& net, const ForwardCache& cache,
                                          const std::vector<double>& y) {
    DerivativeBundle b;
    backward(net, cache, y, b, true);
    return b;
}

// Derivatives with respect to a multiplicative gate fixed at 1 on each hidden
// feature: f = h * (W^T ga of the layer above), s = h^2 * (W.^2^T sa).  Gates
// exist on hidden layers only; b.f[l] / b.s[l] belong to layer l < depth-1.
inline void gate_backward(const Network& net, const ForwardCache& cache,
                          const std::vector<double>& y, DerivativeBundle& b) {
    if (!b.has_second) backward(net, cache, y, b, true);
    detail::check_cache(net, cache, y);
    size_t hidden = net.depth() - 1;
    b.f.assign(hidden, {});
    b.s.assign(hidden, {});
    for (size_t l = 0; l < hidden; ++l) {
        const Matrix& Wn = net.layers[l + 1].W;
        size_t n = net.in_dim(l + 1);
        std::vector<double> gh(n, 0.0), sh(n, 0.0);
        for (size_t k = 0; k < Wn.rows(); ++k) {
            const double* wr = Wn.row(k);
            double g = b.ga[l + 1][k], sv = b.sa[l + 1][k];
            for (size_t j = 0; j < n; ++j) {
                gh[j] += wr[j] * g;
                sh[j] += wr[j] * wr[j] * sv;
            }
        }
        b.f[l].resize(n);
        b.s[l].resize(n);
        for (size_t j = 0; j < n; ++j) {
            double hv = cache.h[l][j];
            b.f[l][j] = hv * gh[j];
            b.s[l][j] = hv * hv * sh[j];
        }
    }
    b.has_gates = true;
}

inline DerivativeBundle gate_backward(const Network& net, const ForwardCache& cache,
                                      const std::vector<double>& y) {
    DerivativeBundle b;
    gate_backward(net, cache, y, b);
    return b;
}

} // namespace upgd

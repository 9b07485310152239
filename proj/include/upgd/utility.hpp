#pragma once

// Weight and feature utilities: counterfactual oracles that re-evaluate the
// loss with one connection or feature removed, their Taylor approximations,
// trailing averages with bias correction, the global/local squashing used by
// the optimizers, the recursive propagation identity, the per-feature
// conservation residual, and Spearman rank correlation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "upgd/backprop.hpp"
#include "upgd/network.hpp"

namespace upgd {

enum class UtilityOrder { First, Second };
enum class Granularity { Weight, Feature };
enum class Scaling { Global, Local };

// Measures compared by the rank-correlation study; the last three are
// baselines only.
enum class UtilityMeasure {
    TrueCounterfactual,
    FirstOrder,
    SecondOrder,
    WeightMagnitude,
    SquaredGradient,
    RandomOrder
};

namespace detail {

// Loss after replacing layer l's pre-activation with a_mod and re-running the
// layers above it; shares everything below layer l with the cache.
inline double loss_from_preact(const Network& net, const ForwardCache&,
                               const std::vector<double>& y, size_t l,
                               const std::vector<double>& a_mod, std::vector<double>& abuf,
                               std::vector<double>& hbuf, std::vector<double>& hbuf2) {
    hbuf.resize(a_mod.size());
    apply_act(net.layers[l].act, net.layers[l].slope, a_mod.data(), hbuf.data(), a_mod.size());
    for (size_t l2 = l + 1; l2 < net.depth(); ++l2) {
        abuf.resize(net.out_dim(l2));
        layer_preact(net, l2, hbuf.data(), abuf.data());
        hbuf2.resize(abuf.size());
        apply_act(net.layers[l2].act, net.layers[l2].slope, abuf.data(), hbuf2.data(),
                  abuf.size());
        std::swap(hbuf, hbuf2);
    }
    return loss(hbuf, y, net.loss_kind);
}

} // namespace detail

// Change in loss when each weight is set to zero, one weight at a time.  The
// zeroed weight only shifts one pre-activation, so the pass below the edited
// layer is reused; the network itself is never modified.
inline std::vector<Matrix> true_weight_utility(const Network& net, const std::vector<double>& x,
                                               const std::vector<double>& y) {
    ForwardCache cache = forward(net, x);
    double base = loss(cache.yhat(), y, net.loss_kind);
    std::vector<Matrix> U(net.depth());
    std::vector<double> a_mod, abuf, hbuf, hbuf2;
    for (size_t l = 0; l < net.depth(); ++l) {
        const Matrix& W = net.layers[l].W;
        U[l] = Matrix(W.rows(), W.cols());
        const std::vector<double>& prev = cache.input_of(l);
        size_t n = net.in_dim(l);
        for (size_t i = 0; i < W.rows(); ++i) {
            for (size_t j = 0; j < W.cols(); ++j) {
                double w = W(i, j);
                if (w == 0.0) continue;  // counterfactual equals factual
                double in_j = j < n ? prev[j] : 1.0;
                a_mod = cache.a[l];
                a_mod[i] -= w * in_j;
                U[l](i, j) =
                    detail::loss_from_preact(net, cache, y, l, a_mod, abuf, hbuf, hbuf2) - base;
            }
        }
    }
    return U;
}

// Change in loss when each hidden feature's output is masked to zero.
inline std::vector<std::vector<double>> true_feature_utility(const Network& net,
                                                             const std::vector<double>& x,
                                                             const std::vector<double>& y) {
    if (net.depth() < 2)
        throw std::invalid_argument("true_feature_utility: network has no hidden layers");
    ForwardCache cache = forward(net, x);
    double base = loss(cache.yhat(), y, net.loss_kind);
    size_t hidden = net.depth() - 1;
    std::vector<std::vector<double>> u(hidden);
    std::vector<double> a_mod, abuf, hbuf, hbuf2;
    for (size_t l = 0; l < hidden; ++l) {
        size_t width = net.out_dim(l);
        u[l].assign(width, 0.0);
        const Matrix& Wn = net.layers[l + 1].W;
        for (size_t j = 0; j < width; ++j) {
            double hv = cache.h[l][j];
            a_mod = cache.a[l + 1];
            for (size_t k = 0; k < Wn.rows(); ++k) a_mod[k] -= Wn(k, j) * hv;
            u[l][j] =
                detail::loss_from_preact(net, cache, y, l + 1, a_mod, abuf, hbuf, hbuf2) - base;
        }
    }
    return u;
}

// Taylor approximation around the current weight, evaluated at zero:
// first order -F.W, second order -F.W + S.W^2/2.
inline std::vector<Matrix> approx_weight_utility(const DerivativeBundle& b, const Network& net,
                                                 UtilityOrder order) {
    if (order == UtilityOrder::Second && !b.has_second)
        throw std::invalid_argument("approx_weight_utility: second-order fields missing");
    std::vector<Matrix> U(net.depth());
    for (size_t l = 0; l < net.depth(); ++l) {
        const Matrix& W = net.layers[l].W;
        if (!b.F[l].same_shape(W))
            throw std::invalid_argument("approx_weight_utility: shape mismatch");
        U[l] = Matrix(W.rows(), W.cols());
        const double* w = W.data();
        const double* g = b.F[l].data();
        double* out = U[l].data();
        if (order == UtilityOrder::First) {
            for (size_t k = 0; k < W.size(); ++k) out[k] = -g[k] * w[k];
        } else {
            const double* sv = b.S[l].data();
            for (size_t k = 0; k < W.size(); ++k)
                out[k] = w[k] * (0.5 * sv[k] * w[k] - g[k]);
        }
    }
    return U;
}

inline std::vector<std::vector<double>> approx_feature_utility(const DerivativeBundle& b,
                                                               UtilityOrder order) {
    if (!b.has_gates)
        throw std::invalid_argument("approx_feature_utility: gate derivatives missing");
    std::vector<std::vector<double>> u(b.f.size());
    for (size_t l = 0; l < b.f.size(); ++l) {
        u[l].resize(b.f[l].size());
        for (size_t j = 0; j < b.f[l].size(); ++j)
            u[l][j] = order == UtilityOrder::First ? -b.f[l][j]
                                                   : -b.f[l][j] + 0.5 * b.s[l][j];
    }
    return u;
}

// Trailing average U <- beta U + (1-beta) M with the usual initialization-
// bias correction U / (1 - beta^t).
struct UtilityTrace {
    std::vector<Matrix> U;
    double beta;
    uint64_t t = 0;
    double beta_pow = 1.0;

    UtilityTrace(const Network& net, double beta_u) : beta(beta_u) {
        if (!(beta_u >= 0.0 && beta_u < 1.0))
            throw std::invalid_argument("UtilityTrace: beta_u must be in [0,1)");
        U.reserve(net.depth());
        for (size_t l = 0; l < net.depth(); ++l)
            U.emplace_back(net.layers[l].W.rows(), net.layers[l].W.cols());
    }

    void update(const std::vector<Matrix>& inst) {
        if (inst.size() != U.size()) throw std::invalid_argument("UtilityTrace: layer count");
        for (size_t l = 0; l < U.size(); ++l) {
            if (!inst[l].same_shape(U[l])) throw std::invalid_argument("UtilityTrace: shape");
            double* u = U[l].data();
            const double* m = inst[l].data();
            for (size_t k = 0; k < U[l].size(); ++k) u[k] = beta * u[k] + (1.0 - beta) * m[k];
        }
        ++t;
        beta_pow *= beta;
    }

    std::vector<Matrix> corrected() const {
        if (t == 0) throw std::logic_error("UtilityTrace: no updates yet");
        double inv = 1.0 / (1.0 - beta_pow);
        std::vector<Matrix> out(U.size());
        for (size_t l = 0; l < U.size(); ++l) {
            out[l] = Matrix(U[l].rows(), U[l].cols());
            const double* u = U[l].data();
            double* o = out[l].data();
            for (size_t k = 0; k < U[l].size(); ++k) o[k] = u[k] * inv;
        }
        return out;
    }
};

struct FeatureUtilityTrace {
    std::vector<std::vector<double>> u;
    double beta;
    uint64_t t = 0;
    double beta_pow = 1.0;

    FeatureUtilityTrace(const Network& net, double beta_u) : beta(beta_u) {
        if (!(beta_u >= 0.0 && beta_u < 1.0))
            throw std::invalid_argument("FeatureUtilityTrace: beta_u must be in [0,1)");
        u.resize(net.depth() - 1);
        for (size_t l = 0; l + 1 < net.depth(); ++l) u[l].assign(net.out_dim(l), 0.0);
    }

    void update(const std::vector<std::vector<double>>& inst) {
        if (inst.size() != u.size())
            throw std::invalid_argument("FeatureUtilityTrace: layer count");
        for (size_t l = 0; l < u.size(); ++l)
            for (size_t j = 0; j < u[l].size(); ++j)
                u[l][j] = beta * u[l][j] + (1.0 - beta) * inst[l][j];
        ++t;
        beta_pow *= beta;
    }

    std::vector<std::vector<double>> corrected() const {
        if (t == 0) throw std::logic_error("FeatureUtilityTrace: no updates yet");
        double inv = 1.0 / (1.0 - beta_pow);
        auto out = u;
        for (auto& layer : out)
            for (double& v : layer) v *= inv;
        return out;
    }
};

struct ScaleInfo {
    double eta;
    bool guard_fired;
};

namespace detail {

inline void sigmoid_scaled(const double* in, double* out, size_t n, double inv_eta) {
    for (size_t k = 0; k < n; ++k) out[k] = fastmath::sigmoid(in[k] * inv_eta);
}

} // namespace detail

// Squash by the network-wide maximum.  When the maximum is not positive,
// dividing by it would flip the ordering, so the divisor falls back to the
// largest magnitude; callers can count guard firings via the return value.
inline ScaleInfo scale_global(const std::vector<Matrix>& uhat, std::vector<Matrix>& ubar) {
    size_t total = 0;
    for (const auto& m : uhat) total += m.size();
    if (total == 0) throw std::invalid_argument("scale_global: no entries");
    double mx = -std::numeric_limits<double>::infinity();
    double mx_abs = 0.0;
    for (const auto& m : uhat)
        for (size_t k = 0; k < m.size(); ++k) {
            double v = m.data()[k];
            mx = v > mx ? v : mx;
            double av = v < 0 ? -v : v;
            mx_abs = av > mx_abs ? av : mx_abs;
        }
    ScaleInfo info{mx, false};
    if (!(mx > 1e-12)) {
        info.eta = mx_abs > 1e-12 ? mx_abs : 1e-12;
        info.guard_fired = true;
    }
    double inv = 1.0 / info.eta;
    ubar.resize(uhat.size());
    for (size_t l = 0; l < uhat.size(); ++l) {
        if (!ubar[l].same_shape(uhat[l])) ubar[l] = Matrix(uhat[l].rows(), uhat[l].cols());
        detail::sigmoid_scaled(uhat[l].data(), ubar[l].data(), uhat[l].size(), inv);
    }
    return info;
}

inline ScaleInfo scale_global(const std::vector<std::vector<double>>& uhat,
                              std::vector<std::vector<double>>& ubar) {
    size_t total = 0;
    for (const auto& v : uhat) total += v.size();
    if (total == 0) throw std::invalid_argument("scale_global: no entries");
    double mx = -std::numeric_limits<double>::infinity();
    double mx_abs = 0.0;
    for (const auto& layer : uhat)
        for (double v : layer) {
            mx = v > mx ? v : mx;
            double av = v < 0 ? -v : v;
            mx_abs = av > mx_abs ? av : mx_abs;
        }
    ScaleInfo info{mx, false};
    if (!(mx > 1e-12)) {
        info.eta = mx_abs > 1e-12 ? mx_abs : 1e-12;
        info.guard_fired = true;
    }
    double inv = 1.0 / info.eta;
    ubar.resize(uhat.size());
    for (size_t l = 0; l < uhat.size(); ++l) {
        ubar[l].resize(uhat[l].size());
        detail::sigmoid_scaled(uhat[l].data(), ubar[l].data(), uhat[l].size(), inv);
    }
    return info;
}

// Row-wise variant: each row divided by its own Euclidean norm before the
// sigmoid; rows with vanishing norm pass through unscaled.
inline void scale_local_weight(const Matrix& uhat, Matrix& ubar) {
    if (!ubar.same_shape(uhat)) ubar = Matrix(uhat.rows(), uhat.cols());
    for (size_t i = 0; i < uhat.rows(); ++i) {
        const double* in = uhat.row(i);
        double norm = std::sqrt(sum_sq8(in, uhat.cols()));
        double inv = norm < 1e-12 ? 1.0 : 1.0 / norm;
        detail::sigmoid_scaled(in, ubar.row(i), uhat.cols(), inv);
    }
}

inline void scale_local_feature(const std::vector<double>& uhat, std::vector<double>& ubar) {
    ubar.resize(uhat.size());
    double norm = std::sqrt(sum_sq8(uhat.data(), uhat.size()));
    double inv = norm < 1e-12 ? 1.0 : 1.0 / norm;
    detail::sigmoid_scaled(uhat.data(), ubar.data(), uhat.size(), inv);
}

struct PropagatedUtility {
    std::vector<Matrix> f, s;  // first- and second-order parts; utility = f + s
};

// Backward recursion for the second-order weight utility.  The top layer is
// the direct formula; below it each term divides by the unit's activation,
// which must therefore be bounded away from zero.
inline PropagatedUtility propagate_utility(const Network& net, const ForwardCache& cache,
                                           const std::vector<double>& y) {
    for (size_t l = 0; l + 1 < net.depth(); ++l) {
        Act a = net.layers[l].act;
        if (a != Act::Identity && a != Act::Tanh)
            throw std::invalid_argument(
                "propagate_utility: hidden activations must be Identity or Tanh");
    }
    DerivativeBundle b = hesscale_backward(net, cache, y);
    size_t L = net.depth() - 1;
    PropagatedUtility out;
    out.f.resize(net.depth());
    out.s.resize(net.depth());

    {
        const Matrix& W = net.layers[L].W;
        out.f[L] = Matrix(W.rows(), W.cols());
        out.s[L] = Matrix(W.rows(), W.cols());
        const std::vector<double>& prev = cache.input_of(L);
        size_t n = net.in_dim(L);
        for (size_t i = 0; i < W.rows(); ++i) {
            double g = b.ga[L][i], sv = b.sa[L][i];
            for (size_t j = 0; j < W.cols(); ++j) {
                double in_j = j < n ? prev[j] : 1.0;
                double w = W(i, j);
                out.f[L](i, j) = -g * in_j * w;
                out.s[L](i, j) = 0.5 * sv * in_j * in_j * w * w;
            }
        }
    }

    for (size_t l = L; l-- > 0;) {
        const Matrix& Wn = net.layers[l + 1].W;
        size_t width = net.out_dim(l);
        std::vector<double> sum_f(width, 0.0), sum_s(width, 0.0);
        for (size_t k = 0; k < Wn.rows(); ++k)
            for (size_t i = 0; i < width; ++i) {
                sum_f[i] += out.f[l + 1](k, i);
                sum_s[i] += out.s[l + 1](k, i);
            }

        const Matrix& W = net.layers[l].W;
        out.f[l] = Matrix(W.rows(), W.cols());
        out.s[l] = Matrix(W.rows(), W.cols());
        const std::vector<double>& prev = cache.input_of(l);
        size_t n = net.in_dim(l);
        const Layer& lay = net.layers[l];
        for (size_t i = 0; i < width; ++i) {
            double hv = cache.h[l][i];
            if (!(std::abs(hv) > 1e-6))
                throw std::domain_error("propagate_utility: activation magnitude <= 1e-6 at layer " +
                                        std::to_string(l) + ", unit " + std::to_string(i) +
                                        "; the recursion divides by it");
            double d1 = act_deriv(lay.act, lay.slope, cache.a[l][i], hv);
            double d2 = act_second_deriv(lay.act, lay.slope, cache.a[l][i], hv);
            double cf = d1 / hv * sum_f[i];
            double cs = (d1 * d1) / (hv * hv) * sum_s[i] - 0.5 * d2 / hv * sum_f[i];
            for (size_t j = 0; j < W.cols(); ++j) {
                double in_j = j < n ? prev[j] : 1.0;
                double w = W(i, j);
                out.f[l](i, j) = cf * in_j * w;
                out.s[l](i, j) = cs * in_j * in_j * w * w;
            }
        }
    }
    return out;
}

// Per hidden feature: |sum of second-order utilities on outgoing weights
// minus the sum on incoming weights|.
inline std::vector<std::vector<double>> conservation_check(const Network& net,
                                                           const ForwardCache& cache,
                                                           const std::vector<double>& y) {
    DerivativeBundle b = hesscale_backward(net, cache, y);
    std::vector<Matrix> U = approx_weight_utility(b, net, UtilityOrder::Second);
    std::vector<std::vector<double>> residual(net.depth() - 1);
    for (size_t l = 0; l + 1 < net.depth(); ++l) {
        size_t width = net.out_dim(l);
        residual[l].assign(width, 0.0);
        for (size_t i = 0; i < width; ++i) {
            double in_sum = 0.0;
            for (size_t j = 0; j < U[l].cols(); ++j) in_sum += U[l](i, j);
            double out_sum = 0.0;
            for (size_t k = 0; k < U[l + 1].rows(); ++k) out_sum += U[l + 1](k, i);
            residual[l][i] = std::abs(out_sum - in_sum);
        }
    }
    return residual;
}

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& v) {
    size_t n = v.size();
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return v[a] < v[b] || (v[a] == v[b] && a < b);
    });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

} // namespace detail

// Spearman's rho with average ranks for ties.  Undefined for constant
// inputs, which are reported rather than silently mapped to NaN.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
    if (a.size() < 2) throw std::invalid_argument("spearman: need at least two entries");
    auto constant = [](const std::vector<double>& v) {
        for (double x : v)
            if (x != v[0]) return false;
        return true;
    };
    if (constant(a) || constant(b))
        throw std::domain_error("spearman: correlation undefined for a constant input");
    std::vector<double> ra = detail::average_ranks(a);
    std::vector<double> rb = detail::average_ranks(b);
    double n = static_cast<double>(a.size());
    double mean = (n + 1.0) / 2.0;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double da = ra[i] - mean, db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    return cov / std::sqrt(va * vb);
}

} // namespace upgd

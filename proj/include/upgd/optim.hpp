#pragma once

// Every update rule behind one stepping interface.  All plain-family methods
// funnel through a small set of noinline row kernels so that degenerate
// settings (sigma = 0, gating off, kappa = 0, ...) reproduce their simpler
// counterparts bit-exactly: the same machine code runs in every case, with
// neutral inputs (a zero noise buffer, a large-negative utility buffer whose
// gate rounds to exactly 1.0) standing in for the disabled terms.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "upgd/backprop.hpp"
#include "upgd/network.hpp"
#include "upgd/rng.hpp"
#include "upgd/utility.hpp"

namespace upgd {

enum class Method { SGD, SGDW, PGD, SNP, Adam, AdamW, UPGD, AdaUPGD, SEWC, SMAS, SSI, SRWALK };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::SGD: return "sgd";
        case Method::SGDW: return "sgdw";
        case Method::PGD: return "pgd";
        case Method::SNP: return "snp";
        case Method::Adam: return "adam";
        case Method::AdamW: return "adamw";
        case Method::UPGD: return "upgd";
        case Method::AdaUPGD: return "adaupgd";
        case Method::SEWC: return "sewc";
        case Method::SMAS: return "smas";
        case Method::SSI: return "ssi";
        case Method::SRWALK: return "srwalk";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::SGD, Method::SGDW, Method::PGD, Method::SNP, Method::Adam,
                     Method::AdamW, Method::UPGD, Method::AdaUPGD, Method::SEWC, Method::SMAS,
                     Method::SSI, Method::SRWALK})
        if (s == method_name(m)) return m;
    throw std::invalid_argument("unknown method '" + s + "'");
}

struct HyperParams {
    double alpha = 0.01;   // step size
    double sigma = 0.0;    // perturbation standard deviation
    double lambda = 0.0;   // weight decay
    double beta_u = 0.999; // utility trace decay
    double beta1 = 0.9;    // first moment decay
    double beta2 = 0.999;  // second moment decay
    double eps_adam = 1e-8;
    double kappa = 0.0;    // regularization factor
    double beta_i = 0.9999; // importance trace decay
    double beta_w = 0.999;  // weight trace decay
    double eps_si = 1e-3;   // stabilizer in the path-integral importances

    double rho() const { return 1.0 - lambda * alpha; }

    void validate() const {
        auto in01 = [](double v) { return v >= 0.0 && v < 1.0; };
        if (!(alpha > 0.0)) throw std::invalid_argument("hyperparams: alpha must be > 0");
        if (!(sigma >= 0.0)) throw std::invalid_argument("hyperparams: sigma must be >= 0");
        if (!(lambda >= 0.0)) throw std::invalid_argument("hyperparams: lambda must be >= 0");
        if (!in01(beta_u)) throw std::invalid_argument("hyperparams: beta_u must be in [0,1)");
        if (!in01(beta1)) throw std::invalid_argument("hyperparams: beta1 must be in [0,1)");
        if (!in01(beta2)) throw std::invalid_argument("hyperparams: beta2 must be in [0,1)");
        if (!(eps_adam > 0.0)) throw std::invalid_argument("hyperparams: eps_adam must be > 0");
        if (!(kappa >= 0.0)) throw std::invalid_argument("hyperparams: kappa must be >= 0");
        if (!in01(beta_i)) throw std::invalid_argument("hyperparams: beta_i must be in [0,1)");
        if (!in01(beta_w)) throw std::invalid_argument("hyperparams: beta_w must be in [0,1)");
        if (!(eps_si > 0.0)) throw std::invalid_argument("hyperparams: eps_si must be > 0");
        if (!(rho() > 0.0 && rho() <= 1.0))
            throw std::invalid_argument("hyperparams: 1 - lambda*alpha must lie in (0,1]");
    }
};

struct OptimizerConfig {
    Method method = Method::SGD;
    HyperParams hp;
    UtilityOrder order = UtilityOrder::First;
    Granularity granularity = Granularity::Weight;
    Scaling scaling = Scaling::Global;
    bool protecting = true;  // gate (gradient + noise) jointly, vs noise only
    // Ablation toggles; all on by default.
    bool weight_decay = true;
    bool perturbation = true;
    bool utility_gating = true;
};

class NumericError : public std::runtime_error {
  public:
    NumericError(const std::string& msg, uint64_t step, size_t layer)
        : std::runtime_error(msg), step_index(step), layer_index(layer) {}
    uint64_t step_index;
    size_t layer_index;
};

// Utility argument that the gate maps to exactly 1: sigmoid clamps its input,
// 1/(1+e^40) underflows below half an ulp of 1, and 1 - that rounds to 1.0.
inline constexpr double kUngated = -1e30;

// ---- shared row kernels ------------------------------------------------
// Marked noinline so a single instantiation serves every method; the
// degeneracy guarantees rely on all callers executing these exact loops.

[[gnu::noinline]] inline void update_span_protect(double* w, const double* g, const double* z,
                                                  const double* u, size_t n, double rho,
                                                  double alpha, double sigma, double inv_scale) {
    for (size_t i = 0; i < n; ++i) {
        double gate = 1.0 - fastmath::sigmoid(u[i] * inv_scale);
        w[i] = rho * w[i] - alpha * (g[i] + sigma * z[i]) * gate;
    }
}

[[gnu::noinline]] inline void update_span_nonprotect(double* w, const double* g, const double* z,
                                                     const double* u, size_t n, double rho,
                                                     double alpha, double sigma,
                                                     double inv_scale) {
    for (size_t i = 0; i < n; ++i) {
        double gate = 1.0 - fastmath::sigmoid(u[i] * inv_scale);
        w[i] = rho * w[i] - alpha * (g[i] + sigma * z[i] * gate);
    }
}

[[gnu::noinline]] inline void update_span_adaptive(double* w, const double* g, const double* z,
                                                   const double* u, double* m, double* v, size_t n,
                                                   double rho, double alpha, double sigma,
                                                   double inv_scale, double b1, double b2,
                                                   double inv_bc1, double inv_bc2, double eps) {
    for (size_t i = 0; i < n; ++i) {
        double gi = g[i];
        double mi = b1 * m[i] + (1.0 - b1) * gi;
        double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
        m[i] = mi;
        v[i] = vi;
        double dir = (mi * inv_bc1) / (std::sqrt(vi * inv_bc2) + eps);
        double gate = 1.0 - fastmath::sigmoid(u[i] * inv_scale);
        w[i] = rho * w[i] - alpha * (dir + sigma * z[i]) * gate;
    }
}

// ------------------------------------------------------------------------

class Optimizer {
  public:
    Optimizer(const Network& net, const OptimizerConfig& cfg, uint64_t noise_seed)
        : cfg_(cfg), noise_(noise_seed) {
        cfg_.hp.validate();
        size_t max_layer = 0;
        for (size_t l = 0; l < net.depth(); ++l)
            max_layer = std::max(max_layer, net.layers[l].W.size());
        zero_buf_.assign(max_layer, 0.0);
        ungated_buf_.assign(max_layer, kUngated);
        noise_buf_.assign(max_layer, 0.0);

        auto shape_like = [&](std::vector<Matrix>& dst) {
            dst.clear();
            for (size_t l = 0; l < net.depth(); ++l)
                dst.emplace_back(net.layers[l].W.rows(), net.layers[l].W.cols());
        };
        switch (cfg_.method) {
            case Method::UPGD:
                if (cfg_.utility_gating) {
                    if (cfg_.granularity == Granularity::Weight) shape_like(U_);
                    else feat_u_.assign(net.depth() > 0 ? net.depth() - 1 : 0, {});
                    for (size_t l = 0; l + 1 < net.depth(); ++l)
                        if (cfg_.granularity == Granularity::Feature)
                            feat_u_[l].assign(net.out_dim(l), 0.0);
                }
                break;
            case Method::AdaUPGD:
                if (cfg_.utility_gating) shape_like(U_);
                shape_like(M_);
                shape_like(V_);
                break;
            case Method::Adam:
            case Method::AdamW:
                shape_like(M_);
                shape_like(V_);
                break;
            case Method::SEWC:
            case Method::SMAS:
                shape_like(omega_);
                shape_like(wbar_);
                seed_weight_traces(net);
                break;
            case Method::SSI:
                shape_like(omega_);
                shape_like(wbar_);
                shape_like(omega_tilde_);
                shape_like(delta_tilde_);
                shape_like(prev_w_);
                seed_weight_traces(net);
                copy_weights(net, prev_w_);
                break;
            case Method::SRWALK:
                shape_like(omega_);
                shape_like(wbar_);
                shape_like(omega_tilde_);
                shape_like(f_tilde_);
                shape_like(s_tilde_);
                shape_like(prev_w_);
                seed_weight_traces(net);
                copy_weights(net, prev_w_);
                break;
            default:
                break;
        }
    }

    const OptimizerConfig& config() const { return cfg_; }
    uint64_t steps_taken() const { return t_; }
    uint64_t eta_guard_count() const { return eta_guard_count_; }

    // True when the stepping rule consumes the Hessian-diagonal fields.
    bool wants_second_order() const {
        if (cfg_.method == Method::AdaUPGD) return cfg_.utility_gating;
        return cfg_.method == Method::UPGD && cfg_.utility_gating &&
               cfg_.order == UtilityOrder::Second;
    }

    bool wants_gate_derivatives() const {
        return cfg_.method == Method::UPGD && cfg_.utility_gating &&
               cfg_.granularity == Granularity::Feature;
    }

    void step(Network& net, const DerivativeBundle& b) {
        ++t_;
        switch (cfg_.method) {
            case Method::SGD: plain_step(net, b, 1.0, 0.0); break;
            case Method::SGDW: plain_step(net, b, decay_rho(), 0.0); break;
            case Method::PGD: plain_step(net, b, 1.0, noise_sigma()); break;
            case Method::SNP: plain_step(net, b, decay_rho(), noise_sigma()); break;
            case Method::Adam: adam_step(net, b, 1.0); break;
            case Method::AdamW: adam_step(net, b, decay_rho()); break;
            case Method::UPGD:
                if (cfg_.granularity == Granularity::Weight) upgd_weight_step(net, b);
                else upgd_feature_step(net, b);
                break;
            case Method::AdaUPGD: adaupgd_step(net, b); break;
            case Method::SEWC:
            case Method::SMAS:
            case Method::SSI:
            case Method::SRWALK: reg_step(net, b); break;
        }
    }

  private:
    double decay_rho() const { return cfg_.weight_decay ? cfg_.hp.rho() : 1.0; }
    double noise_sigma() const { return cfg_.perturbation ? cfg_.hp.sigma : 0.0; }

    void seed_weight_traces(const Network& net) {
        // The weight trace starts at the initial weights, not at zero, so the
        // first steps are not pulled toward the origin.
        copy_weights(net, wbar_);
    }

    static void copy_weights(const Network& net, std::vector<Matrix>& dst) {
        for (size_t l = 0; l < net.depth(); ++l)
            std::memcpy(dst[l].data(), net.layers[l].W.data(),
                        net.layers[l].W.size() * sizeof(double));
    }

    void check_finite(const Network& net, size_t l) {
        const Matrix& W = net.layers[l].W;
        double s = sum_abs8(W.data(), W.size());
        if (std::isfinite(s)) return;
        for (size_t k = 0; k < W.size(); ++k)
            if (!std::isfinite(W.data()[k]))
                throw NumericError("optimizer produced a non-finite weight at step " +
                                       std::to_string(t_) + ", layer " + std::to_string(l) +
                                       ", entry " + std::to_string(k),
                                   t_, l);
        throw NumericError("optimizer produced weight overflow at step " + std::to_string(t_) +
                               ", layer " + std::to_string(l),
                           t_, l);
    }

    const double* layer_noise(size_t n, double sigma) {
        if (sigma != 0.0) {
            noise_.fill(noise_buf_.data(), n);
            return noise_buf_.data();
        }
        return zero_buf_.data();
    }

    // Runs one contiguous span through the protect or nonprotect kernel,
    // regenerating the perturbation in chunks sized to a multiple of the
    // generator block so the noise stays cache resident.  Block-aligned
    // chunked fills reproduce the monolithic fill stream value for value.
    void span_with_noise(double* w, const double* g, const double* u, size_t n, double rho,
                         double sigma, double inv, bool protect) {
        if (sigma == 0.0) {
            if (protect)
                update_span_protect(w, g, zero_buf_.data(), u, n, rho, cfg_.hp.alpha, 0.0, inv);
            else
                update_span_nonprotect(w, g, zero_buf_.data(), u, n, rho, cfg_.hp.alpha, 0.0, inv);
            return;
        }
        constexpr size_t kChunk = 8192;
        for (size_t off = 0; off < n; off += kChunk) {
            size_t len = n - off < kChunk ? n - off : kChunk;
            noise_.fill(noise_buf_.data(), len);
            if (protect)
                update_span_protect(w + off, g + off, noise_buf_.data(), u + off, len, rho,
                                    cfg_.hp.alpha, sigma, inv);
            else
                update_span_nonprotect(w + off, g + off, noise_buf_.data(), u + off, len, rho,
                                       cfg_.hp.alpha, sigma, inv);
        }
    }

    void plain_step(Network& net, const DerivativeBundle& b, double rho, double sigma) {
        for (size_t l = 0; l < net.depth(); ++l) {
            Matrix& W = net.layers[l].W;
            span_with_noise(W.data(), b.F[l].data(), ungated_buf_.data(), W.size(), rho, sigma,
                            1.0, true);
            check_finite(net, l);
        }
    }

    void adam_step(Network& net, const DerivativeBundle& b, double rho) {
        pow_b1_ *= cfg_.hp.beta1;
        pow_b2_ *= cfg_.hp.beta2;
        double inv_bc1 = 1.0 / (1.0 - pow_b1_);
        double inv_bc2 = 1.0 / (1.0 - pow_b2_);
        for (size_t l = 0; l < net.depth(); ++l) {
            Matrix& W = net.layers[l].W;
            update_span_adaptive(W.data(), b.F[l].data(), zero_buf_.data(), ungated_buf_.data(),
                                 M_[l].data(), V_[l].data(), W.size(), rho, cfg_.hp.alpha, 0.0,
                                 1.0, cfg_.hp.beta1, cfg_.hp.beta2, inv_bc1, inv_bc2,
                                 cfg_.hp.eps_adam);
            check_finite(net, l);
        }
    }

    // Trace sweep over all layers: U <- beta_u U + (1-beta_u) M with
    // M = -F.W (first order) or W.(S.W/2 - F) (second order).  Returns the
    // global maximum and maximum magnitude of the raw trace.
    void trace_sweep(const Network& net, const DerivativeBundle& b, double& mx, double& mxabs) {
        if (cfg_.order == UtilityOrder::Second && !b.has_second)
            throw std::invalid_argument("optimizer: configured for second-order utility but the "
                                        "derivative bundle has no second-order fields");
        double beta = cfg_.hp.beta_u, om = 1.0 - beta;
        double hi = -std::numeric_limits<double>::infinity();
        double hiabs = 0.0;
        for (size_t l = 0; l < net.depth(); ++l) {
            double* u = U_[l].data();
            const double* g = b.F[l].data();
            const double* w = net.layers[l].W.data();
            size_t n = U_[l].size();
            const double* sv = cfg_.order == UtilityOrder::Second ? b.S[l].data() : nullptr;
            size_t k = 0;
#if defined(__AVX512F__)
            // The compiler will not vectorize a max reduction under strict
            // floating-point rules, so the fused sweep is written by hand.
            // Lane-wise max reduces exactly, which keeps the scale statistics
            // identical to a scalar pass.
            {
                __m512d vb = _mm512_set1_pd(beta), vo = _mm512_set1_pd(om);
                __m512d vhi = _mm512_set1_pd(hi), vha = _mm512_set1_pd(hiabs);
                __m512d vhalf = _mm512_set1_pd(0.5);
                for (; k + 8 <= n; k += 8) {
                    __m512d vu = _mm512_loadu_pd(u + k);
                    __m512d vg = _mm512_loadu_pd(g + k);
                    __m512d vw = _mm512_loadu_pd(w + k);
                    __m512d inst;
                    if (sv == nullptr) {
                        inst = _mm512_sub_pd(_mm512_setzero_pd(), _mm512_mul_pd(vg, vw));
                    } else {
                        __m512d vs = _mm512_loadu_pd(sv + k);
                        __m512d t = _mm512_fmsub_pd(_mm512_mul_pd(vhalf, vs), vw, vg);
                        inst = _mm512_mul_pd(vw, t);
                    }
                    __m512d v = _mm512_fmadd_pd(vb, vu, _mm512_mul_pd(vo, inst));
                    _mm512_storeu_pd(u + k, v);
                    vhi = _mm512_max_pd(vhi, v);
                    vha = _mm512_max_pd(vha, _mm512_abs_pd(v));
                }
                hi = _mm512_reduce_max_pd(vhi);
                hiabs = _mm512_reduce_max_pd(vha);
            }
#endif
            for (; k < n; ++k) {
                double v = sv == nullptr ? beta * u[k] + om * (-g[k] * w[k])
                                         : beta * u[k] + om * (w[k] * (0.5 * sv[k] * w[k] - g[k]));
                u[k] = v;
                hi = v > hi ? v : hi;
                double av = v < 0 ? -v : v;
                hiabs = av > hiabs ? av : hiabs;
            }
        }
        mx = hi;
        mxabs = hiabs;
    }

    // Maps the raw-trace statistics to the multiplier fed to the sigmoid.
    // Bias correction cancels inside the ratio trace/max, so the corrected
    // trace is never materialized; only the guard fallback at 1e-12 needs the
    // correction factor explicitly.
    double global_inv_scale(double mx, double mxabs) {
        double bc = 1.0 / (1.0 - pow_bu_);
        if (mx * bc > 1e-12) return 1.0 / mx;
        ++eta_guard_count_;
        if (mxabs * bc > 1e-12) return 1.0 / mxabs;
        return bc * 1e12;
    }

    void upgd_weight_step(Network& net, const DerivativeBundle& b) {
        double rho = decay_rho();
        double sigma = noise_sigma();
        double inv_global = 1.0;
        bool gate = cfg_.utility_gating;
        if (gate) {
            pow_bu_ *= cfg_.hp.beta_u;
            double mx, mxabs;
            trace_sweep(net, b, mx, mxabs);
            if (cfg_.scaling == Scaling::Global) inv_global = global_inv_scale(mx, mxabs);
        }
        for (size_t l = 0; l < net.depth(); ++l) {
            Matrix& W = net.layers[l].W;
            if (!gate || cfg_.scaling == Scaling::Global) {
                const double* u = gate ? U_[l].data() : ungated_buf_.data();
                span_with_noise(W.data(), b.F[l].data(), u, W.size(), rho, sigma,
                                gate ? inv_global : 1.0, cfg_.protecting);
            } else {
                // Local scaling: each row normalized by its own trace norm.
                const double* z = layer_noise(W.size(), sigma);
                double bc = 1.0 / (1.0 - pow_bu_);
                for (size_t i = 0; i < W.rows(); ++i) {
                    const double* urow = U_[l].row(i);
                    size_t c = W.cols();
                    double norm = std::sqrt(sum_sq8(urow, c));
                    double inv = norm * bc < 1e-12 ? bc : 1.0 / norm;
                    if (cfg_.protecting)
                        update_span_protect(W.row(i), b.F[l].row(i), z + i * c, urow, c, rho,
                                            cfg_.hp.alpha, sigma, inv);
                    else
                        update_span_nonprotect(W.row(i), b.F[l].row(i), z + i * c, urow, c, rho,
                                               cfg_.hp.alpha, sigma, inv);
                }
            }
            check_finite(net, l);
        }
    }

    void upgd_feature_step(Network& net, const DerivativeBundle& b) {
        bool gate = cfg_.utility_gating;
        if (gate && !b.has_gates)
            throw std::invalid_argument("optimizer: feature-wise stepping needs gate derivatives");
        double rho = decay_rho();
        double sigma = noise_sigma();
        size_t hidden = net.depth() - 1;

        double inv_global = 1.0;
        double bc = 1.0;
        if (gate && hidden > 0) {
            pow_bu_ *= cfg_.hp.beta_u;
            bc = 1.0 / (1.0 - pow_bu_);
            double beta = cfg_.hp.beta_u, om = 1.0 - beta;
            double mx = -std::numeric_limits<double>::infinity(), mxabs = 0.0;
            for (size_t l = 0; l < hidden; ++l)
                for (size_t i = 0; i < feat_u_[l].size(); ++i) {
                    double inst = cfg_.order == UtilityOrder::First
                                      ? -b.f[l][i]
                                      : -b.f[l][i] + 0.5 * b.s[l][i];
                    double v = beta * feat_u_[l][i] + om * inst;
                    feat_u_[l][i] = v;
                    mx = v > mx ? v : mx;
                    double av = v < 0 ? -v : v;
                    mxabs = av > mxabs ? av : mxabs;
                }
            if (cfg_.scaling == Scaling::Global) inv_global = global_inv_scale(mx, mxabs);
        }

        for (size_t l = 0; l < hidden; ++l) {
            Matrix& W = net.layers[l].W;
            const double* z = layer_noise(W.size(), sigma);
            double inv = inv_global;
            if (gate && cfg_.scaling == Scaling::Local) {
                double norm = std::sqrt(sum_sq8(feat_u_[l].data(), feat_u_[l].size()));
                inv = norm * bc < 1e-12 ? bc : 1.0 / norm;
            }
            size_t c = W.cols();
            for (size_t i = 0; i < W.rows(); ++i) {
                double cg = gate ? 1.0 - fastmath::sigmoid(feat_u_[l][i] * inv) : 1.0;
                double* wr = W.row(i);
                const double* gr = b.F[l].row(i);
                const double* zr = z + i * c;
                if (cfg_.protecting)
                    for (size_t j = 0; j < c; ++j)
                        wr[j] = rho * wr[j] - cfg_.hp.alpha * (gr[j] + sigma * zr[j]) * cg;
                else
                    for (size_t j = 0; j < c; ++j)
                        wr[j] = rho * wr[j] - cfg_.hp.alpha * (gr[j] + sigma * zr[j] * cg);
            }
            check_finite(net, l);
        }
        // Final layer: plain gradient step, ungated, undecayed, unperturbed.
        {
            size_t L = net.depth() - 1;
            Matrix& W = net.layers[L].W;
            update_span_protect(W.data(), b.F[L].data(), zero_buf_.data(), ungated_buf_.data(),
                                W.size(), 1.0, cfg_.hp.alpha, 0.0, 1.0);
            check_finite(net, L);
        }
    }

    void adaupgd_step(Network& net, const DerivativeBundle& b) {
        pow_b1_ *= cfg_.hp.beta1;
        pow_b2_ *= cfg_.hp.beta2;
        double inv_bc1 = 1.0 / (1.0 - pow_b1_);
        double inv_bc2 = 1.0 / (1.0 - pow_b2_);
        bool gate = cfg_.utility_gating;
        double inv_global = 1.0;
        if (gate) {
            if (!b.has_second)
                throw std::invalid_argument("optimizer: adaptive utility stepping needs "
                                            "second-order fields");
            pow_bu_ *= cfg_.hp.beta_u;
            double mx, mxabs;
            UtilityOrder saved = cfg_.order;
            cfg_.order = UtilityOrder::Second;  // this rule always traces both terms
            trace_sweep(net, b, mx, mxabs);
            cfg_.order = saved;
            inv_global = global_inv_scale(mx, mxabs);
        }
        double rho = decay_rho();
        double sigma = noise_sigma();
        for (size_t l = 0; l < net.depth(); ++l) {
            Matrix& W = net.layers[l].W;
            const double* z = layer_noise(W.size(), sigma);
            const double* u = gate ? U_[l].data() : ungated_buf_.data();
            update_span_adaptive(W.data(), b.F[l].data(), z, u, M_[l].data(), V_[l].data(),
                                 W.size(), rho, cfg_.hp.alpha, sigma, gate ? inv_global : 1.0,
                                 cfg_.hp.beta1, cfg_.hp.beta2, inv_bc1, inv_bc2, cfg_.hp.eps_adam);
            check_finite(net, l);
        }
    }

    void update_importance(const Network& net, const DerivativeBundle& b) {
        double bi = cfg_.hp.beta_i, om = 1.0 - bi;
        double eps = cfg_.hp.eps_si;
        for (size_t l = 0; l < net.depth(); ++l) {
            size_t n = omega_[l].size();
            const double* g = b.F[l].data();
            double* O = omega_[l].data();
            switch (cfg_.method) {
                case Method::SEWC:
                    for (size_t k = 0; k < n; ++k) O[k] = bi * O[k] + om * g[k] * g[k];
                    break;
                case Method::SMAS:
                    for (size_t k = 0; k < n; ++k)
                        O[k] = bi * O[k] + om * (g[k] < 0 ? -g[k] : g[k]);
                    break;
                case Method::SSI: {
                    const double* w = net.layers[l].W.data();
                    const double* pw = prev_w_[l].data();
                    double* ot = omega_tilde_[l].data();
                    double* dt = delta_tilde_[l].data();
                    for (size_t k = 0; k < n; ++k) {
                        double d = pw[k] - w[k];
                        ot[k] = bi * ot[k] + om * g[k] * d;
                        dt[k] = bi * dt[k] + om * d;
                        O[k] = ot[k] / (dt[k] * dt[k] + eps);
                    }
                    break;
                }
                case Method::SRWALK: {
                    const double* w = net.layers[l].W.data();
                    const double* pw = prev_w_[l].data();
                    double* ot = omega_tilde_[l].data();
                    double* ft = f_tilde_[l].data();
                    double* st = s_tilde_[l].data();
                    for (size_t k = 0; k < n; ++k) {
                        double d = pw[k] - w[k];
                        ot[k] = bi * ot[k] + om * g[k] * d;
                        ft[k] = bi * ft[k] + om * g[k] * g[k];
                        double move = w[k] - pw[k];
                        double sr = ot[k] / (0.5 * ft[k] * move * move + eps);
                        st[k] = 0.5 * st[k] + 0.5 * sr;  // fast trailing average
                        O[k] = st[k] + ft[k];
                    }
                    break;
                }
                default:
                    break;
            }
        }
    }

    void reg_step(Network& net, const DerivativeBundle& b) {
        update_importance(net, b);
        double kappa = cfg_.hp.kappa;
        double bw = cfg_.hp.beta_w, omw = 1.0 - bw;
        bool track_prev = cfg_.method == Method::SSI || cfg_.method == Method::SRWALK;
        for (size_t l = 0; l < net.depth(); ++l) {
            Matrix& W = net.layers[l].W;
            size_t n = W.size();
            if (geff_.size() < n) geff_.resize(n);
            const double* g = b.F[l].data();
            const double* O = omega_[l].data();
            const double* wb = wbar_[l].data();
            double* w = W.data();
            for (size_t k = 0; k < n; ++k) geff_[k] = g[k] + kappa * O[k] * (w[k] - wb[k]);
            if (track_prev)
                std::memcpy(prev_w_[l].data(), w, n * sizeof(double));
            update_span_protect(w, geff_.data(), zero_buf_.data(), ungated_buf_.data(), n, 1.0,
                                cfg_.hp.alpha, 0.0, 1.0);
            check_finite(net, l);
            double* wbm = wbar_[l].data();
            for (size_t k = 0; k < n; ++k) wbm[k] = bw * wbm[k] + omw * w[k];
        }
    }

    OptimizerConfig cfg_;
    NoiseSource noise_;
    uint64_t t_ = 0;
    uint64_t eta_guard_count_ = 0;
    double pow_bu_ = 1.0, pow_b1_ = 1.0, pow_b2_ = 1.0;

    std::vector<Matrix> U_, M_, V_;
    std::vector<std::vector<double>> feat_u_;
    std::vector<Matrix> omega_, wbar_, omega_tilde_, delta_tilde_, f_tilde_, s_tilde_, prev_w_;
    std::vector<double> zero_buf_, ungated_buf_, noise_buf_, geff_;
};

} // namespace upgd

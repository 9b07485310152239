#pragma once

// Online evaluation: per-sample accuracy and plasticity, windowed means, the
// forgetting / loss-of-plasticity summaries, and the stacked gradient/weight
// diagnostics.  Windows accumulate exact sums; means are taken once at close.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "upgd/backprop.hpp"
#include "upgd/matrix.hpp"
#include "upgd/network.hpp"

namespace upgd {

// p = max(1 - loss_after / max(loss_before, eps), 0).  Both losses come from
// the same sample, before and after one optimizer step.
inline double sample_plasticity(double loss_before, double loss_after, double eps = 1e-8) {
    if (loss_before < 0.0 || loss_after < 0.0)
        throw std::invalid_argument("sample_plasticity: losses must be non-negative");
    if (!(eps > 0.0)) throw std::invalid_argument("sample_plasticity: eps must be positive");
    double p = 1.0 - loss_after / std::max(loss_before, eps);
    return p > 0.0 ? p : 0.0;
}

// 1 iff argmax(yhat) names the true class; ties resolve to the lowest index.
inline int online_accuracy(const std::vector<double>& yhat, const std::vector<double>& y) {
    if (yhat.size() != y.size() || yhat.empty())
        throw std::invalid_argument("online_accuracy: prediction/target size mismatch");
    size_t pred = 0, truth = 0;
    for (size_t i = 1; i < yhat.size(); ++i) {
        if (yhat[i] > yhat[pred]) pred = i;
        if (y[i] > y[truth]) truth = i;
    }
    return pred == truth ? 1 : 0;
}

struct DiagRecord {
    double zero_act_frac = 0.0;
    double grad_l0 = 0.0;  // fraction of gradient entries with magnitude > 1e-12
    double grad_l1 = 0.0;
    double grad_l2 = 0.0;
    double w_l1 = 0.0;
    double w_l2 = 0.0;
};

// Stacks all layers' gradients (and weights) into one vector, per the
// diagnostic curves.  Zero activations are counted over hidden layers only:
// exact zeros for ReLU-family units, |h| < 1e-12 for saturating ones.
inline DiagRecord diagnostics(const Network& net, const DerivativeBundle& b,
                              const ForwardCache& cache) {
    DiagRecord d;
    size_t act_count = 0, act_zero = 0;
    for (size_t l = 0; l + 1 < net.depth(); ++l) {
        Act a = net.layers[l].act;
        bool exact = a == Act::ReLU || a == Act::LeakyReLU;
        for (double h : cache.h[l]) {
            ++act_count;
            if (exact ? h == 0.0 : std::fabs(h) < 1e-12) ++act_zero;
        }
    }
    d.zero_act_frac = act_count == 0 ? 0.0 : double(act_zero) / double(act_count);

    size_t gn = 0, gnz = 0;
    double g1 = 0.0, g2 = 0.0, w1 = 0.0, w2 = 0.0;
    for (size_t l = 0; l < net.depth(); ++l) {
        const Matrix& G = b.F[l];
        const Matrix& W = net.layers[l].W;
        gn += G.size();
        for (size_t k = 0; k < G.size(); ++k)
            if (std::fabs(G.data()[k]) > 1e-12) ++gnz;
        g1 += sum_abs8(G.data(), G.size());
        g2 += sum_sq8(G.data(), G.size());
        w1 += sum_abs8(W.data(), W.size());
        w2 += sum_sq8(W.data(), W.size());
    }
    d.grad_l0 = gn == 0 ? 0.0 : double(gnz) / double(gn);
    d.grad_l1 = g1;
    d.grad_l2 = std::sqrt(g2);
    d.w_l1 = w1;
    d.w_l2 = std::sqrt(w2);
    return d;
}

struct MetricsWindow {
    uint64_t index = 0;
    uint64_t samples = 0;
    double accuracy = 0.0;
    double plasticity = 0.0;
    double loss = 0.0;
    DiagRecord diag;
};

// Exact-sum accumulator for one window; merging two accumulators and closing
// reproduces the single-pass result bit-for-bit (addition order preserved by
// construction: merge is only used to concatenate disjoint step ranges).
class WindowAccumulator {
  public:
    void add(int correct, double loss, double plasticity, const DiagRecord& d) {
        ++count_;
        acc_ += correct;
        loss_ += loss;
        plast_ += plasticity;
        za_ += d.zero_act_frac;
        g0_ += d.grad_l0;
        g1_ += d.grad_l1;
        g2_ += d.grad_l2;
        w1_ += d.w_l1;
        w2_ += d.w_l2;
    }

    void merge(const WindowAccumulator& o) {
        count_ += o.count_;
        acc_ += o.acc_;
        loss_ += o.loss_;
        plast_ += o.plast_;
        za_ += o.za_;
        g0_ += o.g0_;
        g1_ += o.g1_;
        g2_ += o.g2_;
        w1_ += o.w1_;
        w2_ += o.w2_;
    }

    uint64_t count() const { return count_; }

    MetricsWindow close(uint64_t index) const {
        if (count_ == 0) throw std::logic_error("metrics window closed with no samples");
        MetricsWindow w;
        w.index = index;
        w.samples = count_;
        double n = double(count_);
        w.accuracy = acc_ / n;
        w.loss = loss_ / n;
        w.plasticity = plast_ / n;
        w.diag.zero_act_frac = za_ / n;
        w.diag.grad_l0 = g0_ / n;
        w.diag.grad_l1 = g1_ / n;
        w.diag.grad_l2 = g2_ / n;
        w.diag.w_l1 = w1_ / n;
        w.diag.w_l2 = w2_ / n;
        return w;
    }

    void reset() { *this = WindowAccumulator(); }

  private:
    uint64_t count_ = 0;
    double acc_ = 0.0, loss_ = 0.0, plast_ = 0.0;
    double za_ = 0.0, g0_ = 0.0, g1_ = 0.0, g2_ = 0.0, w1_ = 0.0, w2_ = 0.0;
};

inline double overall_forgetting(const std::vector<MetricsWindow>& windows) {
    if (windows.size() < 2)
        throw std::invalid_argument("overall_forgetting: needs at least 2 windows");
    return windows.front().accuracy - windows.back().accuracy;
}

inline double overall_loss_of_plasticity(const std::vector<MetricsWindow>& windows) {
    if (windows.size() < 2)
        throw std::invalid_argument("overall_loss_of_plasticity: needs at least 2 windows");
    return windows.front().plasticity - windows.back().plasticity;
}

} // namespace upgd

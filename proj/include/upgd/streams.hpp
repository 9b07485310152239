#pragma once

// Deterministic sample streams.  Every stream is a pure function of
// (configuration, seed, step index): permutations for task k are drawn from
// derive_seed(seed, k) and the example sampler from derive_seed(seed, ~0),
// so two runs over the same stream config see identical data regardless of
// which optimizer consumes them.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "upgd/rng.hpp"

namespace upgd {

struct StreamSample {
    std::vector<double> x;
    std::vector<double> y;     // one-hot for classification
    uint64_t t = 0;
    uint64_t task_index = 0;
    size_t label = 0;          // class index; unused for regression
};

struct Dataset {
    std::vector<std::vector<double>> images;
    std::vector<size_t> labels;
    size_t class_count = 0;
    size_t input_dim = 0;
};

class StreamError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class IdxBadMagic : public StreamError {
  public:
    using StreamError::StreamError;
};
class IdxTruncated : public StreamError {
  public:
    using StreamError::StreamError;
};
class IdxCountMismatch : public StreamError {
  public:
    using StreamError::StreamError;
};

namespace detail {

inline std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StreamError("cannot open '" + path + "'");
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>());
}

inline uint32_t be32(const std::vector<unsigned char>& b, size_t off, const std::string& path) {
    if (off + 4 > b.size()) throw IdxTruncated("'" + path + "' truncated inside header");
    return (uint32_t(b[off]) << 24) | (uint32_t(b[off + 1]) << 16) | (uint32_t(b[off + 2]) << 8) |
           uint32_t(b[off + 3]);
}

} // namespace detail

// Reads an images/labels pair in the big-endian IDX format (magic 2051 for
// unsigned-byte images, 2049 for labels).  Pixels are scaled by 1/255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    auto img = detail::slurp(images_path);
    uint32_t magic = detail::be32(img, 0, images_path);
    if (magic != 2051)
        throw IdxBadMagic("'" + images_path + "': expected image magic 2051, got " +
                          std::to_string(magic));
    uint32_t ndim = magic & 0xff;  // low byte of the magic encodes the rank
    uint32_t count = detail::be32(img, 4, images_path);
    size_t dim = 1;
    for (uint32_t d = 1; d < ndim; ++d) dim *= detail::be32(img, 4 + 4 * d, images_path);
    size_t header = 4 + 4 * ndim;
    if (img.size() < header + size_t(count) * dim)
        throw IdxTruncated("'" + images_path + "': payload shorter than header promises");

    auto lab = detail::slurp(labels_path);
    uint32_t lmagic = detail::be32(lab, 0, labels_path);
    if (lmagic != 2049)
        throw IdxBadMagic("'" + labels_path + "': expected label magic 2049, got " +
                          std::to_string(lmagic));
    uint32_t lcount = detail::be32(lab, 4, labels_path);
    if (lab.size() < 8 + size_t(lcount))
        throw IdxTruncated("'" + labels_path + "': payload shorter than header promises");
    if (lcount != count)
        throw IdxCountMismatch("image count " + std::to_string(count) + " != label count " +
                               std::to_string(lcount));

    Dataset ds;
    ds.input_dim = dim;
    ds.images.resize(count);
    ds.labels.resize(count);
    for (size_t i = 0; i < count; ++i) {
        ds.images[i].resize(dim);
        const unsigned char* p = img.data() + header + i * dim;
        for (size_t j = 0; j < dim; ++j) ds.images[i][j] = p[j] / 255.0;
        size_t y = lab[8 + i];
        ds.labels[i] = y;
        ds.class_count = std::max(ds.class_count, y + 1);
    }
    return ds;
}

class Stream {
  public:
    virtual ~Stream() = default;
    virtual void next(StreamSample& out) = 0;
};

enum class ToyVariant { InputIndexShift, OutputSignFlip };

// y = (a/2)(x_i + x_j) over 16 standard-normal inputs; the active pair
// (index-shift variant) or the sign a (flip variant) changes every 200 steps.
class ToyRegressionStream : public Stream {
  public:
    static constexpr uint64_t kTaskLength = 200;

    explicit ToyRegressionStream(ToyVariant variant, uint64_t seed)
        : variant_(variant), rng_(derive_seed(seed, ~0ull)) {}

    void next(StreamSample& out) override {
        out.t = t_;
        out.task_index = t_ / kTaskLength;
        out.x.resize(16);
        for (double& v : out.x) v = rng_.normal();
        size_t i, j;
        double a;
        if (variant_ == ToyVariant::InputIndexShift) {
            i = (2 * out.task_index) % 16;
            j = (2 * out.task_index + 1) % 16;
            a = 1.0;
        } else {
            i = 0;
            j = 1;
            a = out.task_index % 2 == 0 ? 1.0 : -1.0;
        }
        out.y.assign(1, (a / 2.0) * (out.x[i] + out.x[j]));
        out.label = 0;
        ++t_;
    }

  private:
    ToyVariant variant_;
    Rng rng_;
    uint64_t t_ = 0;
};

// Stationary regression over 5 uniform inputs; the target is the sum of a
// fixed seeded pair of them.
class UtilityProbeStream : public Stream {
  public:
    explicit UtilityProbeStream(uint64_t seed) : rng_(derive_seed(seed, ~0ull)) {
        Rng pick(derive_seed(seed, 0));
        i_ = size_t(pick.next_below(5));
        j_ = size_t(pick.next_below(4));
        if (j_ >= i_) ++j_;
    }

    size_t pair_first() const { return i_; }
    size_t pair_second() const { return j_; }

    void next(StreamSample& out) override {
        out.t = t_++;
        out.task_index = 0;
        out.x.resize(5);
        for (double& v : out.x) v = rng_.uniform(-0.5, 0.5);
        out.y.assign(1, out.x[i_] + out.x[j_]);
        out.label = 0;
    }

  private:
    Rng rng_;
    size_t i_, j_;
    uint64_t t_ = 0;
};

namespace detail {

inline std::vector<size_t> task_permutation(uint64_t seed, uint64_t task, size_t n) {
    std::vector<size_t> p(n);
    std::iota(p.begin(), p.end(), size_t{0});
    Rng r(derive_seed(seed, task));
    r.shuffle(p);
    return p;
}

} // namespace detail

// With-replacement sampling from a classification dataset; subclasses apply
// a per-task transformation.  period == 0 means no boundaries ever occur.
class SampledStream : public Stream {
  public:
    SampledStream(const Dataset& ds, uint64_t period, uint64_t seed)
        : ds_(&ds), period_(period), seed_(seed), sampler_(derive_seed(seed, ~0ull)) {
        if (ds.images.empty()) throw StreamError("empty dataset");
    }

    void next(StreamSample& out) override {
        uint64_t task = period_ == 0 ? 0 : t_ / period_;
        if (task != current_task_) {
            current_task_ = task;
            enter_task(task);
        }
        size_t idx = size_t(sampler_.next_below(ds_->images.size()));
        out.t = t_++;
        out.task_index = task;
        emit(idx, out);
    }

  protected:
    virtual void enter_task(uint64_t task) = 0;
    virtual void emit(size_t idx, StreamSample& out) = 0;

    void one_hot(size_t label, StreamSample& out) const {
        out.label = label;
        out.y.assign(ds_->class_count, 0.0);
        out.y[label] = 1.0;
    }

    const Dataset* ds_;
    uint64_t period_;
    uint64_t seed_;

  private:
    Rng sampler_;
    uint64_t t_ = 0;
    uint64_t current_task_ = ~0ull;
};

class PermutedInputStream : public SampledStream {
  public:
    PermutedInputStream(const Dataset& ds, uint64_t period, uint64_t seed)
        : SampledStream(ds, period, seed) {}

  protected:
    void enter_task(uint64_t task) override {
        perm_ = detail::task_permutation(seed_, task, ds_->input_dim);
    }
    void emit(size_t idx, StreamSample& out) override {
        const std::vector<double>& img = ds_->images[idx];
        out.x.resize(img.size());
        for (size_t j = 0; j < img.size(); ++j) out.x[j] = img[perm_[j]];
        one_hot(ds_->labels[idx], out);
    }

  private:
    std::vector<size_t> perm_;
};

class PermutedLabelStream : public SampledStream {
  public:
    PermutedLabelStream(const Dataset& ds, uint64_t period, uint64_t seed)
        : SampledStream(ds, period, seed) {}

  protected:
    void enter_task(uint64_t task) override {
        perm_ = detail::task_permutation(seed_, task, ds_->class_count);
    }
    void emit(size_t idx, StreamSample& out) override {
        out.x = ds_->images[idx];
        one_hot(perm_[ds_->labels[idx]], out);
    }

  private:
    std::vector<size_t> perm_;
};

class StationaryStream : public SampledStream {
  public:
    StationaryStream(const Dataset& ds, uint64_t seed) : SampledStream(ds, 0, seed) {}

  protected:
    void enter_task(uint64_t) override {}
    void emit(size_t idx, StreamSample& out) override {
        out.x = ds_->images[idx];
        one_hot(ds_->labels[idx], out);
    }
};

} // namespace upgd

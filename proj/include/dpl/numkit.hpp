#pragma once

// Deterministic numeric core: dense vector/matrix ops, MLP forward/backward
// with explicit tapes, classification losses, SGD with momentum, a seeded
// counter-free RNG, and a finite-difference gradient checker.
//
// Everything is double precision. All functions are pure given their inputs;
// repeated calls produce bit-identical results.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dpl/common.hpp"
#include "dpl/io.hpp"

namespace dpl::numkit {

using Vec = std::vector<double>;

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void require_finite(std::span<const double> xs, const std::string& what) {
    if (!all_finite(xs)) throw NumericError(what + ": non-finite value");
}

// ---------------------------------------------------------------------------
// Mat: row-major dense matrix
// ---------------------------------------------------------------------------

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    Vec row_vec(std::size_t i) const {
        return Vec(row(i), row(i) + cols);
    }

    bool operator==(const Mat& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

// y = A x
inline Vec matvec(const Mat& a, const Vec& x) {
    if (x.size() != a.cols) throw ShapeError("matvec: dim mismatch");
    Vec y(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* r = a.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += r[j] * x[j];
        y[i] = s;
    }
    return y;
}

// y = A^T x
inline Vec matvec_t(const Mat& a, const Vec& x) {
    if (x.size() != a.rows) throw ShapeError("matvec_t: dim mismatch");
    Vec y(a.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* r = a.row(i);
        const double xi = x[i];
        for (std::size_t j = 0; j < a.cols; ++j) y[j] += r[j] * xi;
    }
    return y;
}

inline double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw ShapeError("dot: dim mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline void axpy(Vec& y, double alpha, const Vec& x) {
    if (y.size() != x.size()) throw ShapeError("axpy: dim mismatch");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

inline Vec add(const Vec& a, const Vec& b) {
    Vec y = a;
    axpy(y, 1.0, b);
    return y;
}

inline Vec scaled(const Vec& a, double s) {
    Vec y = a;
    for (double& v : y) v *= s;
    return y;
}

// ---------------------------------------------------------------------------
// Seeded RNG with named streams
// ---------------------------------------------------------------------------
//
// Identical (seed, stream) always yields an identical draw sequence. Normal
// variates come from Box-Muller applied to the uniform stream, so the whole
// chain is reproducible bit-for-bit on one platform and matches across
// platforms up to libm rounding.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Hash a stream name plus indices into a stream id.
inline std::uint64_t stream_id(const std::string& name) { return fnv1a(name); }

inline std::uint64_t stream_id(const std::string& name, std::uint64_t a) {
    return fnv1a_u64(a, fnv1a(name));
}

inline std::uint64_t stream_id(const std::string& name, std::uint64_t a,
                               std::uint64_t b) {
    return fnv1a_u64(b, fnv1a_u64(a, fnv1a(name)));
}

inline std::uint64_t stream_id(const std::string& name, std::uint64_t a,
                               std::uint64_t b, std::uint64_t c) {
    return fnv1a_u64(c, fnv1a_u64(b, fnv1a_u64(a, fnv1a(name))));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : engine_(splitmix64(splitmix64(seed) ^ stream)) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        if (lo > hi) throw ContractError("rng_uniform: lo > hi");
        const double u = double(next_u64() >> 11) * 0x1.0p-53;
        return lo + u * (hi - lo);
    }

    // N(0, sigma^2) via Box-Muller on the uniform stream.
    double normal(double sigma) {
        if (sigma < 0.0) throw ContractError("rng_normal: sigma < 0");
        if (have_spare_) {
            have_spare_ = false;
            return sigma * spare_;
        }
        // u1 in (0,1] so the log is finite
        const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = double(next_u64() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return sigma * (r * std::cos(a));
    }

    Vec normal_vec(std::size_t n, double sigma) {
        Vec v(n);
        for (double& x : v) x = normal(sigma);
        return v;
    }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw ContractError("rng index: empty range");
        return static_cast<std::size_t>(next_u64() % n);
    }

    template <typename T>
    const T& pick(const std::vector<T>& xs) {
        return xs[index(xs.size())];
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// MLP parameters, forward, backward
// ---------------------------------------------------------------------------

enum class Activation : std::uint8_t { Identity = 0, Tanh = 1, Relu = 2 };

inline double activate(Activation a, double z) {
    switch (a) {
        case Activation::Tanh: return std::tanh(z);
        case Activation::Relu: return z > 0.0 ? z : 0.0;
        default: return z;
    }
}

// Derivative expressed through the activation output.
inline double activate_deriv_from_output(Activation a, double y) {
    switch (a) {
        case Activation::Tanh: return 1.0 - y * y;
        case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
        default: return 1.0;
    }
}

struct MlpLayer {
    Mat weight;  // out x in
    Vec bias;    // out
    Activation act = Activation::Identity;
};

struct MlpParams {
    std::vector<MlpLayer> layers;

    std::size_t in_dim() const { return layers.front().weight.cols; }
    std::size_t out_dim() const { return layers.back().weight.rows; }

    void validate() const {
        if (layers.empty()) throw ShapeError("mlp: no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.bias.size() != l.weight.rows)
                throw ShapeError("mlp: bias/weight mismatch at layer " +
                                 std::to_string(i));
            if (i + 1 < layers.size() &&
                layers[i + 1].weight.cols != l.weight.rows)
                throw ShapeError("mlp: layer " + std::to_string(i) +
                                 " output dim != layer " + std::to_string(i + 1) +
                                 " input dim");
        }
        if (layers.back().act != Activation::Identity)
            throw ShapeError("mlp: final layer activation must be identity");
    }

    bool operator==(const MlpParams& o) const {
        if (layers.size() != o.layers.size()) return false;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (!(layers[i].weight == o.layers[i].weight) ||
                layers[i].bias != o.layers[i].bias ||
                layers[i].act != o.layers[i].act)
                return false;
        return true;
    }
};

// He-style init: weights N(0, 2/fan_in), zero bias, tanh hidden layers,
// identity output.
inline MlpParams make_mlp(const std::vector<std::size_t>& dims, Rng& rng) {
    if (dims.size() < 2) throw ShapeError("make_mlp: need at least two dims");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        MlpLayer l;
        l.weight = Mat(dims[i + 1], dims[i]);
        const double sigma = std::sqrt(2.0 / double(dims[i]));
        for (double& w : l.weight.data) w = rng.normal(sigma);
        l.bias = Vec(dims[i + 1], 0.0);
        l.act = (i + 2 < dims.size()) ? Activation::Tanh : Activation::Identity;
        p.layers.push_back(std::move(l));
    }
    return p;
}

inline std::size_t param_count(const MlpParams& p) {
    std::size_t n = 0;
    for (const auto& l : p.layers) n += l.weight.data.size() + l.bias.size();
    return n;
}

// Activation record for one forward pass. acts[i] is the output of layer i;
// derivatives are reconstructed from those outputs.
struct MlpTape {
    Vec input;
    std::vector<Vec> acts;
};

inline std::pair<Vec, MlpTape> mlp_forward(const MlpParams& p, const Vec& x) {
    if (x.size() != p.in_dim())
        throw ShapeError("mlp_forward: input dim " + std::to_string(x.size()) +
                         " != " + std::to_string(p.in_dim()));
    MlpTape tape;
    tape.input = x;
    tape.acts.reserve(p.layers.size());
    const Vec* cur = &x;
    for (const auto& l : p.layers) {
        Vec z = matvec(l.weight, *cur);
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] = activate(l.act, z[i] + l.bias[i]);
        tape.acts.push_back(std::move(z));
        cur = &tape.acts.back();
    }
    return {tape.acts.back(), std::move(tape)};
}

struct Grads {
    std::vector<Mat> weight;
    std::vector<Vec> bias;

    static Grads zeros_like(const MlpParams& p) {
        Grads g;
        for (const auto& l : p.layers) {
            g.weight.emplace_back(l.weight.rows, l.weight.cols);
            g.bias.emplace_back(l.bias.size(), 0.0);
        }
        return g;
    }

    void add_scaled(const Grads& o, double s) {
        if (weight.size() != o.weight.size())
            throw ShapeError("grads add: layer count mismatch");
        for (std::size_t i = 0; i < weight.size(); ++i) {
            if (weight[i].data.size() != o.weight[i].data.size() ||
                bias[i].size() != o.bias[i].size())
                throw ShapeError("grads add: shape mismatch");
            for (std::size_t k = 0; k < weight[i].data.size(); ++k)
                weight[i].data[k] += s * o.weight[i].data[k];
            for (std::size_t k = 0; k < bias[i].size(); ++k)
                bias[i][k] += s * o.bias[i][k];
        }
    }

    void scale(double s) {
        for (auto& w : weight)
            for (double& v : w.data) v *= s;
        for (auto& b : bias)
            for (double& v : b) v *= s;
    }
};

// Exact reverse pass for mlp_forward. Returns parameter gradients and the
// gradient with respect to the input.
inline std::pair<Grads, Vec> mlp_backward(const MlpParams& p, const MlpTape& tape,
                                          const Vec& dy) {
    if (tape.acts.size() != p.layers.size())
        throw ShapeError("mlp_backward: tape does not match params");
    if (dy.size() != p.out_dim())
        throw ShapeError("mlp_backward: cotangent dim mismatch");
    Grads g = Grads::zeros_like(p);
    Vec delta = dy;
    for (std::size_t li = p.layers.size(); li-- > 0;) {
        const auto& l = p.layers[li];
        const Vec& out = tape.acts[li];
        if (out.size() != l.weight.rows)
            throw ShapeError("mlp_backward: stale tape at layer " +
                             std::to_string(li));
        const Vec& in = (li == 0) ? tape.input : tape.acts[li - 1];
        if (in.size() != l.weight.cols)
            throw ShapeError("mlp_backward: stale tape at layer " +
                             std::to_string(li));
        // delta w.r.t. pre-activation
        for (std::size_t i = 0; i < delta.size(); ++i)
            delta[i] *= activate_deriv_from_output(l.act, out[i]);
        Mat& dw = g.weight[li];
        for (std::size_t i = 0; i < l.weight.rows; ++i) {
            double* dwr = dw.row(i);
            const double di = delta[i];
            for (std::size_t j = 0; j < l.weight.cols; ++j) dwr[j] += di * in[j];
            g.bias[li][i] += di;
        }
        delta = matvec_t(l.weight, delta);
    }
    return {std::move(g), std::move(delta)};
}

// ---------------------------------------------------------------------------
// Losses and similarity
// ---------------------------------------------------------------------------

inline double cosine_similarity(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw ShapeError("cosine: dim mismatch");
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw DomainError("cosine: zero-norm input");
    return dot(a, b) / (na * nb);
}

// d cos(a,b)/da = b/(|a||b|) - cos * a/|a|^2, symmetric in b. Accumulates
// dcos * those into da, db.
inline void cosine_similarity_backward(const Vec& a, const Vec& b, double dcos,
                                       Vec& da, Vec& db) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw DomainError("cosine: zero-norm input");
    const double inv = 1.0 / (na * nb);
    const double c = dot(a, b) * inv;
    for (std::size_t i = 0; i < a.size(); ++i) {
        da[i] += dcos * (b[i] * inv - c * a[i] / (na * na));
        db[i] += dcos * (a[i] * inv - c * b[i] / (nb * nb));
    }
}

struct CeResult {
    double loss = 0.0;
    Vec dlogits;
};

// Numerically stable softmax cross-entropy; dlogits = softmax - one_hot.
inline CeResult softmax_cross_entropy(const Vec& logits, std::size_t label) {
    if (label >= logits.size())
        throw IndexError("cross_entropy: label " + std::to_string(label) +
                         " out of range");
    require_finite(logits, "cross_entropy logits");
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - m);
    CeResult r;
    r.loss = std::log(z) - (logits[label] - m);
    r.dlogits.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
        r.dlogits[i] = std::exp(logits[i] - m) / z;
    r.dlogits[label] -= 1.0;
    return r;
}

inline Vec mean_rows(const std::vector<Vec>& batch) {
    if (batch.empty()) throw ContractError("mean_rows: empty batch");
    Vec acc(batch.front().size(), 0.0);
    for (const Vec& row : batch) {
        if (row.size() != acc.size()) throw ShapeError("mean_rows: ragged batch");
        axpy(acc, 1.0, row);
    }
    const double inv = 1.0 / double(batch.size());
    for (double& v : acc) v *= inv;
    return acc;
}

// ---------------------------------------------------------------------------
// SGD with momentum (classic heavy-ball: v <- mu*v + g, theta <- theta - lr*v)
// ---------------------------------------------------------------------------

inline void sgd_step_flat(std::span<double> theta, std::span<const double> grad,
                          std::span<double> vel, double lr, double momentum) {
    if (theta.size() != grad.size() || theta.size() != vel.size())
        throw ShapeError("sgd: shape mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) {
        vel[i] = momentum * vel[i] + grad[i];
        theta[i] -= lr * vel[i];
    }
}

struct OptimizerState {
    Grads velocity;
    double lr = 0.01;
    double momentum = 0.9;

    static OptimizerState create(const MlpParams& p, double lr, double momentum) {
        if (lr <= 0.0) throw ContractError("optimizer: lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ContractError("optimizer: momentum must be in [0,1)");
        OptimizerState s;
        s.velocity = Grads::zeros_like(p);
        s.lr = lr;
        s.momentum = momentum;
        return s;
    }
};

inline void sgd_momentum_step(MlpParams& p, const Grads& g, OptimizerState& s) {
    if (g.weight.size() != p.layers.size())
        throw ShapeError("sgd: grads/params layer count mismatch");
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        if (!all_finite(g.weight[i].data) || !all_finite(g.bias[i]))
            throw NumericError("sgd: non-finite gradient at layer " +
                               std::to_string(i));
        sgd_step_flat(p.layers[i].weight.data, g.weight[i].data,
                      s.velocity.weight[i].data, s.lr, s.momentum);
        sgd_step_flat(p.layers[i].bias, g.bias[i], s.velocity.bias[i], s.lr,
                      s.momentum);
    }
}

// ---------------------------------------------------------------------------
// Flatten / unflatten, used by the gradient checker and fingerprints
// ---------------------------------------------------------------------------

inline Vec flatten(const MlpParams& p) {
    Vec out;
    for (const auto& l : p.layers) {
        out.insert(out.end(), l.weight.data.begin(), l.weight.data.end());
        out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
}

inline Vec flatten(const Grads& g) {
    Vec out;
    for (std::size_t i = 0; i < g.weight.size(); ++i) {
        out.insert(out.end(), g.weight[i].data.begin(), g.weight[i].data.end());
        out.insert(out.end(), g.bias[i].begin(), g.bias[i].end());
    }
    return out;
}

inline void unflatten_into(MlpParams& p, std::span<const double> flat) {
    std::size_t pos = 0;
    for (auto& l : p.layers) {
        for (double& w : l.weight.data) w = flat[pos++];
        for (double& b : l.bias) b = flat[pos++];
    }
    if (pos != flat.size()) throw ShapeError("unflatten: size mismatch");
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

struct EvalResult {
    double loss = 0.0;
    Vec grad;
};

using ScalarFn = std::function<EvalResult(const Vec&)>;

// Central differences against the analytic gradient reported by fn. Returns
// max over parameters of |analytic - central| / max(1, |central|). fn must be
// deterministic; two baseline evaluations are compared bit-for-bit.
inline double grad_check(const ScalarFn& fn, const Vec& params, double h) {
    if (h < 1e-7 || h > 1e-3)
        throw ContractError("grad_check: h outside [1e-7, 1e-3]");
    EvalResult base = fn(params);
    EvalResult again = fn(params);
    if (base.loss != again.loss || base.grad != again.grad)
        throw ContractError("grad_check: fn is not deterministic");
    if (base.grad.size() != params.size())
        throw ShapeError("grad_check: gradient size mismatch");
    double worst = 0.0;
    Vec x = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double up = fn(x).loss;
        x[i] = orig - h;
        const double down = fn(x).loss;
        x[i] = orig;
        const double central = (up - down) / (2.0 * h);
        const double err =
            std::abs(base.grad[i] - central) / std::max(1.0, std::abs(central));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace dpl::numkit

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "multi/common.hpp"

namespace multi {

using Index = std::int64_t;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Cost category of one multiply-accumulate. Attention-score counts exactly
// the query*key dot-product work so the per-layer complexity formulas can be
// checked as integer equalities against the measured counters.
enum class MulAddKind { AttentionScore, AttentionValue, Projection, Ffn, Other };
inline constexpr int kMulAddKinds = 5;

// One score pair = one (query position, key position) combination in an
// attention call, counted once across all heads, forward only.
enum class PairKind { SelfAttn, CrossText, CrossVideo };
inline constexpr int kPairKinds = 3;

inline const char* to_string(MulAddKind k) {
    switch (k) {
        case MulAddKind::AttentionScore: return "attention_score";
        case MulAddKind::AttentionValue: return "attention_value";
        case MulAddKind::Projection: return "projection";
        case MulAddKind::Ffn: return "ffn";
        case MulAddKind::Other: return "other";
    }
    return "?";
}

inline const char* to_string(PairKind k) {
    switch (k) {
        case PairKind::SelfAttn: return "self_attn";
        case PairKind::CrossText: return "cross_text";
        case PairKind::CrossVideo: return "cross_video";
    }
    return "?";
}

// Per-graph instruments. mul_adds count scalar multiply-accumulates (and
// divisions); pure additions and transcendental bookkeeping in non-GEMM ops
// are charged approximately to Other and are informational only. Score pairs
// and matmul mul-adds are exact. live/peak track op-output scalars plus any
// scratch an op retains for backward; buffers are released as backward
// consumes them.
struct CostCounters {
    std::array<Index, kMulAddKinds> mul_adds{};
    std::array<Index, kPairKinds> score_pairs{};
    Index live_scalars = 0;
    Index peak_live_scalars = 0;

    void reset() {
        mul_adds.fill(0);
        score_pairs.fill(0);
        live_scalars = 0;
        peak_live_scalars = 0;
    }

    void add_mul_adds(MulAddKind k, Index n) { mul_adds[static_cast<int>(k)] += n; }
    void add_pairs(PairKind k, Index n) { score_pairs[static_cast<int>(k)] += n; }

    Index mul_adds_for(MulAddKind k) const { return mul_adds[static_cast<int>(k)]; }
    Index pairs_for(PairKind k) const { return score_pairs[static_cast<int>(k)]; }

    Index total_mul_adds() const {
        return std::accumulate(mul_adds.begin(), mul_adds.end(), Index{0});
    }
    Index total_score_pairs() const {
        return std::accumulate(score_pairs.begin(), score_pairs.end(), Index{0});
    }

    void alloc_live(Index n) {
        live_scalars += n;
        peak_live_scalars = std::max(peak_live_scalars, live_scalars);
    }
    void free_live(Index n) { live_scalars -= n; }
};

class Graph;

struct TensorNode {
    std::vector<Index> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily; same length as data when present
    bool requires_grad = false;
    const char* op = "leaf";
    std::string name;
    Index tape_index = -1;       // position in the owning graph's tape, -1 for leaves
    const Graph* owner = nullptr;

    Index numel() const { return static_cast<Index>(data.size()); }
    Index rows() const { return shape.empty() ? 1 : shape[0]; }
    Index cols() const {
        if (shape.size() <= 1) {
            return shape.empty() ? 1 : shape[0];
        }
        return shape[1];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    }

    void accumulate_grad(const double* g, Index n) {
        ensure_grad();
        for (Index i = 0; i < n; ++i) {
            grad[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
        }
    }
};

inline std::string shape_string(const std::vector<Index>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

inline Index shape_numel(const std::vector<Index>& s) {
    Index n = 1;
    for (Index e : s) {
        if (e <= 0) {
            throw ShapeError("tensor extents must be positive, got " + shape_string(s));
        }
        n *= e;
    }
    return n;
}

// Value-semantics handle to a node in (or outside) a graph. Leaves hold
// parameters and inputs; op outputs are created through Graph methods.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

    static Tensor from(std::vector<Index> shape, std::vector<double> data, bool requires_grad = false) {
        const Index n = shape_numel(shape);
        if (n != static_cast<Index>(data.size())) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(shape));
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor zeros(std::vector<Index> shape, bool requires_grad = false) {
        const Index n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
    }

    static Tensor full(std::vector<Index> shape, double value, bool requires_grad = false) {
        const Index n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
    }

    static Tensor randn(std::vector<Index> shape, SeededRng& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        const Index n = shape_numel(shape);
        std::vector<double> d(static_cast<std::size_t>(n));
        for (auto& v : d) {
            v = rng.normal(0.0, stddev);
        }
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    TensorNode* node() const { return n_.get(); }
    const std::shared_ptr<TensorNode>& ptr() const { return n_; }

    const std::vector<Index>& shape() const { return n_->shape; }
    Index numel() const { return n_->numel(); }
    Index rows() const { return n_->rows(); }
    Index cols() const { return n_->cols(); }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) const { n_->requires_grad = b; }
    const std::string& name() const { return n_->name; }
    Tensor& named(std::string nm) {
        n_->name = std::move(nm);
        return *this;
    }

    // Handle semantics are shallow-const: a const Tensor is a const handle to
    // a mutable node, so backward passes can accumulate through captures.
    std::vector<double>& data() const { return n_->data; }
    std::vector<double>& grad() const { return n_->grad; }

    double item() const {
        if (numel() != 1) {
            throw ContractError("item() requires a single-element tensor, shape " +
                                shape_string(shape()));
        }
        return n_->data[0];
    }

    double at(Index r, Index c) const { return n_->data[static_cast<std::size_t>(r * cols() + c)]; }

    void zero_grad() const { n_->grad.assign(n_->data.size(), 0.0); }

    MatMap mat() const { return MatMap(n_->data.data(), rows(), cols()); }
    MatMap grad_mat() const {
        n_->ensure_grad();
        return MatMap(n_->grad.data(), rows(), cols());
    }

  private:
    std::shared_ptr<TensorNode> n_;
};

// Captured attention weights for white-box tests: per head, row-major [m, n].
struct AttentionCapture {
    PairKind kind;
    int heads;
    Index queries;
    Index keys;
    std::vector<double> weights;  // heads * queries * keys
    double weight(int head, Index q, Index k) const {
        return weights[static_cast<std::size_t>((head * queries + q) * keys + k)];
    }
};

// Reverse-mode tape. Ops append records in execution order, which is a
// topological order by construction; one backward pass walks the tape once
// in reverse. Counters and the tape are per-graph and never shared between
// threads.
class Graph {
  public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    CostCounters& counters() { return counters_; }
    const CostCounters& counters() const { return counters_; }
    Index steps() const { return static_cast<Index>(tape_.size()); }

    void capture_attention(std::vector<AttentionCapture>* sink) { attn_sink_ = sink; }

    // ---- elementwise / structural ops ----

    Tensor add(const Tensor& a, const Tensor& b) {
        require_same_shape("add", a, b);
        Tensor out = make_out(a.shape(), "add", a.requires_grad() || b.requires_grad());
        const Index n = out.numel();
        for (Index i = 0; i < n; ++i) {
            out.data()[static_cast<std::size_t>(i)] =
                a.data()[static_cast<std::size_t>(i)] + b.data()[static_cast<std::size_t>(i)];
        }
        finish(out, 0, [a, b, out]() {
            const Index n = out.numel();
            if (a.requires_grad()) a.node()->accumulate_grad(out.grad().data(), n);
            if (b.requires_grad()) b.node()->accumulate_grad(out.grad().data(), n);
        });
        return out;
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        require_same_shape("sub", a, b);
        Tensor out = make_out(a.shape(), "sub", a.requires_grad() || b.requires_grad());
        const Index n = out.numel();
        for (Index i = 0; i < n; ++i) {
            out.data()[static_cast<std::size_t>(i)] =
                a.data()[static_cast<std::size_t>(i)] - b.data()[static_cast<std::size_t>(i)];
        }
        finish(out, 0, [a, b, out]() {
            const Index n = out.numel();
            if (a.requires_grad()) a.node()->accumulate_grad(out.grad().data(), n);
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                for (Index i = 0; i < n; ++i) {
                    b.grad()[static_cast<std::size_t>(i)] -= out.grad()[static_cast<std::size_t>(i)];
                }
            }
        });
        return out;
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        require_same_shape("mul", a, b);
        Tensor out = make_out(a.shape(), "mul", a.requires_grad() || b.requires_grad());
        const Index n = out.numel();
        counters_.add_mul_adds(MulAddKind::Other, n);
        for (Index i = 0; i < n; ++i) {
            out.data()[static_cast<std::size_t>(i)] =
                a.data()[static_cast<std::size_t>(i)] * b.data()[static_cast<std::size_t>(i)];
        }
        finish(out, 0, [this, a, b, out]() {
            const Index n = out.numel();
            counters_.add_mul_adds(MulAddKind::Other, 2 * n);
            if (a.requires_grad()) {
                a.node()->ensure_grad();
                for (Index i = 0; i < n; ++i) {
                    a.grad()[static_cast<std::size_t>(i)] +=
                        b.data()[static_cast<std::size_t>(i)] * out.grad()[static_cast<std::size_t>(i)];
                }
            }
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                for (Index i = 0; i < n; ++i) {
                    b.grad()[static_cast<std::size_t>(i)] +=
                        a.data()[static_cast<std::size_t>(i)] * out.grad()[static_cast<std::size_t>(i)];
                }
            }
        });
        return out;
    }

    Tensor scale(const Tensor& a, double c) {
        Tensor out = make_out(a.shape(), "scale", a.requires_grad());
        const Index n = out.numel();
        counters_.add_mul_adds(MulAddKind::Other, n);
        for (Index i = 0; i < n; ++i) {
            out.data()[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i)] * c;
        }
        finish(out, 0, [this, a, out, c]() {
            if (!a.requires_grad()) return;
            const Index n = out.numel();
            counters_.add_mul_adds(MulAddKind::Other, n);
            a.node()->ensure_grad();
            for (Index i = 0; i < n; ++i) {
                a.grad()[static_cast<std::size_t>(i)] += c * out.grad()[static_cast<std::size_t>(i)];
            }
        });
        return out;
    }

    // x: [n, d], v: d-vector (shape [d] or [1, d]); adds v to every row.
    Tensor add_rowvec(const Tensor& x, const Tensor& v) {
        const Index n = x.rows(), d = x.cols();
        if (v.numel() != d) {
            throw ShapeError(std::string("add_rowvec: vector length ") + std::to_string(v.numel()) +
                             " vs row width " + std::to_string(d));
        }
        Tensor out = make_out(x.shape(), "add_rowvec", x.requires_grad() || v.requires_grad());
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < d; ++j) {
                out.data()[static_cast<std::size_t>(i * d + j)] =
                    x.data()[static_cast<std::size_t>(i * d + j)] + v.data()[static_cast<std::size_t>(j)];
            }
        }
        finish(out, 0, [x, v, out, n, d]() {
            if (x.requires_grad()) x.node()->accumulate_grad(out.grad().data(), n * d);
            if (v.requires_grad()) {
                v.node()->ensure_grad();
                for (Index i = 0; i < n; ++i) {
                    for (Index j = 0; j < d; ++j) {
                        v.grad()[static_cast<std::size_t>(j)] += out.grad()[static_cast<std::size_t>(i * d + j)];
                    }
                }
            }
        });
        return out;
    }

    // x: [n, d], v: d-vector; scales every row elementwise (channel gate).
    Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
        const Index n = x.rows(), d = x.cols();
        if (v.numel() != d) {
            throw ShapeError("mul_rowvec: vector length " + std::to_string(v.numel()) +
                             " vs row width " + std::to_string(d));
        }
        Tensor out = make_out(x.shape(), "mul_rowvec", x.requires_grad() || v.requires_grad());
        counters_.add_mul_adds(MulAddKind::Other, n * d);
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < d; ++j) {
                out.data()[static_cast<std::size_t>(i * d + j)] =
                    x.data()[static_cast<std::size_t>(i * d + j)] * v.data()[static_cast<std::size_t>(j)];
            }
        }
        finish(out, 0, [this, x, v, out, n, d]() {
            counters_.add_mul_adds(MulAddKind::Other, 2 * n * d);
            if (x.requires_grad()) {
                x.node()->ensure_grad();
                for (Index i = 0; i < n; ++i) {
                    for (Index j = 0; j < d; ++j) {
                        x.grad()[static_cast<std::size_t>(i * d + j)] +=
                            v.data()[static_cast<std::size_t>(j)] * out.grad()[static_cast<std::size_t>(i * d + j)];
                    }
                }
            }
            if (v.requires_grad()) {
                v.node()->ensure_grad();
                for (Index i = 0; i < n; ++i) {
                    for (Index j = 0; j < d; ++j) {
                        v.grad()[static_cast<std::size_t>(j)] +=
                            x.data()[static_cast<std::size_t>(i * d + j)] * out.grad()[static_cast<std::size_t>(i * d + j)];
                    }
                }
            }
        });
        return out;
    }

    // ---- dense algebra ----

    Tensor matmul(const Tensor& a, const Tensor& b, MulAddKind kind = MulAddKind::Other) {
        if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
            throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
        }
        const Index m = a.rows(), k = a.cols(), n = b.cols();
        Tensor out = make_out({m, n}, "matmul", a.requires_grad() || b.requires_grad());
        counters_.add_mul_adds(kind, m * n * k);
        out.mat().noalias() = a.mat() * b.mat();
        check_finite(out);
        finish(out, 0, [this, a, b, out, m, n, k, kind]() {
            if (a.requires_grad()) {
                counters_.add_mul_adds(kind, m * n * k);
                a.node()->ensure_grad();
                Tensor am = a;
                am.grad_mat().noalias() += out.grad_mat() * b.mat().transpose();
            }
            if (b.requires_grad()) {
                counters_.add_mul_adds(kind, m * n * k);
                b.node()->ensure_grad();
                Tensor bm = b;
                bm.grad_mat().noalias() += a.mat().transpose() * out.grad_mat();
            }
        });
        return out;
    }

    Tensor transpose(const Tensor& a) {
        const Index m = a.rows(), n = a.cols();
        Tensor out = make_out({n, m}, "transpose", a.requires_grad());
        out.mat().noalias() = a.mat().transpose();
        finish(out, 0, [a, out]() {
            if (!a.requires_grad()) return;
            a.node()->ensure_grad();
            Tensor am = a;
            am.grad_mat().noalias() += out.grad_mat().transpose();
        });
        return out;
    }

    // out = x * W + b, with b broadcast over rows. b may be undefined.
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, MulAddKind kind) {
        if (x.shape().size() != 2 || w.shape().size() != 2 || x.cols() != w.rows()) {
            throw ShapeError("linear: incompatible shapes " + shape_string(x.shape()) + " x " +
                             shape_string(w.shape()));
        }
        const Index m = x.rows(), k = x.cols(), n = w.cols();
        if (b.defined() && b.numel() != n) {
            throw ShapeError("linear: bias length " + std::to_string(b.numel()) + " vs out width " +
                             std::to_string(n));
        }
        const bool req = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
        Tensor out = make_out({m, n}, "linear", req);
        counters_.add_mul_adds(kind, m * n * k);
        out.mat().noalias() = x.mat() * w.mat();
        if (b.defined()) {
            ConstMatMap bv(b.data().data(), 1, n);
            out.mat().rowwise() += bv.row(0);
        }
        check_finite(out);
        finish(out, 0, [this, x, w, b, out, m, n, k, kind]() {
            if (x.requires_grad()) {
                counters_.add_mul_adds(kind, m * n * k);
                x.node()->ensure_grad();
                Tensor xm = x;
                xm.grad_mat().noalias() += out.grad_mat() * w.mat().transpose();
            }
            if (w.requires_grad()) {
                counters_.add_mul_adds(kind, m * n * k);
                w.node()->ensure_grad();
                Tensor wm = w;
                wm.grad_mat().noalias() += x.mat().transpose() * out.grad_mat();
            }
            if (b.defined() && b.requires_grad()) {
                b.node()->ensure_grad();
                for (Index i = 0; i < m; ++i) {
                    for (Index j = 0; j < n; ++j) {
                        b.grad()[static_cast<std::size_t>(j)] += out.grad()[static_cast<std::size_t>(i * n + j)];
                    }
                }
            }
        });
        return out;
    }

    // ---- nonlinearities ----

    Tensor gelu(const Tensor& x) {
        Tensor out = make_out(x.shape(), "gelu", x.requires_grad());
        const Index n = out.numel();
        counters_.add_mul_adds(MulAddKind::Other, n);
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        for (Index i = 0; i < n; ++i) {
            const double v = x.data()[static_cast<std::size_t>(i)];
            out.data()[static_cast<std::size_t>(i)] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
        }
        finish(out, 0, [this, x, out]() {
            if (!x.requires_grad()) return;
            const Index n = out.numel();
            counters_.add_mul_adds(MulAddKind::Other, 2 * n);
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            x.node()->ensure_grad();
            for (Index i = 0; i < n; ++i) {
                const double v = x.data()[static_cast<std::size_t>(i)];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                x.grad()[static_cast<std::size_t>(i)] +=
                    (cdf + v * pdf) * out.grad()[static_cast<std::size_t>(i)];
            }
        });
        return out;
    }

    Tensor sigmoid(const Tensor& x) {
        Tensor out = make_out(x.shape(), "sigmoid", x.requires_grad());
        const Index n = out.numel();
        counters_.add_mul_adds(MulAddKind::Other, n);
        for (Index i = 0; i < n; ++i) {
            out.data()[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-x.data()[static_cast<std::size_t>(i)]));
        }
        finish(out, 0, [this, x, out]() {
            if (!x.requires_grad()) return;
            const Index n = out.numel();
            counters_.add_mul_adds(MulAddKind::Other, 2 * n);
            x.node()->ensure_grad();
            for (Index i = 0; i < n; ++i) {
                const double y = out.data()[static_cast<std::size_t>(i)];
                x.grad()[static_cast<std::size_t>(i)] += y * (1.0 - y) * out.grad()[static_cast<std::size_t>(i)];
            }
        });
        return out;
    }

    // Numerically stable softmax along `axis` (max subtraction). Slices along
    // the axis sum to 1 and all outputs are strictly positive.
    Tensor softmax(const Tensor& x, int axis) {
        const auto& shape = x.shape();
        const int nd = static_cast<int>(shape.size());
        if (axis < 0 || axis >= nd) {
            throw IndexError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_string(shape));
        }
        Index outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
        for (int i = axis + 1; i < nd; ++i) inner *= shape[static_cast<std::size_t>(i)];
        const Index len = shape[static_cast<std::size_t>(axis)];

        Tensor out = make_out(shape, "softmax", x.requires_grad());
        counters_.add_mul_adds(MulAddKind::Other, 2 * out.numel());
        for (Index o = 0; o < outer; ++o) {
            for (Index in = 0; in < inner; ++in) {
                const Index base = o * len * inner + in;
                double mx = -std::numeric_limits<double>::infinity();
                for (Index l = 0; l < len; ++l) {
                    mx = std::max(mx, x.data()[static_cast<std::size_t>(base + l * inner)]);
                }
                double sum = 0.0;
                for (Index l = 0; l < len; ++l) {
                    const double e = std::exp(x.data()[static_cast<std::size_t>(base + l * inner)] - mx);
                    out.data()[static_cast<std::size_t>(base + l * inner)] = e;
                    sum += e;
                }
                const double inv = 1.0 / sum;
                for (Index l = 0; l < len; ++l) {
                    out.data()[static_cast<std::size_t>(base + l * inner)] *= inv;
                }
            }
        }
        finish(out, 0, [this, x, out, outer, inner, len]() {
            if (!x.requires_grad()) return;
            counters_.add_mul_adds(MulAddKind::Other, 2 * out.numel());
            x.node()->ensure_grad();
            for (Index o = 0; o < outer; ++o) {
                for (Index in = 0; in < inner; ++in) {
                    const Index base = o * len * inner + in;
                    double dot = 0.0;
                    for (Index l = 0; l < len; ++l) {
                        const std::size_t idx = static_cast<std::size_t>(base + l * inner);
                        dot += out.grad()[idx] * out.data()[idx];
                    }
                    for (Index l = 0; l < len; ++l) {
                        const std::size_t idx = static_cast<std::size_t>(base + l * inner);
                        x.grad()[idx] += out.data()[idx] * (out.grad()[idx] - dot);
                    }
                }
            }
        });
        return out;
    }

    // Row-wise layer norm over the last dimension with affine gain/bias.
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
        if (eps <= 0.0) {
            throw ContractError("layer_norm: eps must be > 0");
        }
        const Index n = x.rows(), d = x.cols();
        if (gain.numel() != d || bias.numel() != d) {
            throw ShapeError("layer_norm: gain/bias length must equal row width " + std::to_string(d));
        }
        const bool req = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Tensor out = make_out(x.shape(), "layer_norm", req);
        std::vector<double> xhat(static_cast<std::size_t>(n * d));
        std::vector<double> invstd(static_cast<std::size_t>(n));
        counters_.add_mul_adds(MulAddKind::Other, 2 * n * d);
        for (Index i = 0; i < n; ++i) {
            const double* row = x.data().data() + i * d;
            double mean = 0.0;
            for (Index j = 0; j < d; ++j) mean += row[j];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (Index j = 0; j < d; ++j) {
                const double c = row[j] - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double is = 1.0 / std::sqrt(var + eps);
            invstd[static_cast<std::size_t>(i)] = is;
            for (Index j = 0; j < d; ++j) {
                const double xh = (row[j] - mean) * is;
                xhat[static_cast<std::size_t>(i * d + j)] = xh;
                out.data()[static_cast<std::size_t>(i * d + j)] =
                    xh * gain.data()[static_cast<std::size_t>(j)] + bias.data()[static_cast<std::size_t>(j)];
            }
        }
        const Index retained = n * d + n;
        finish(out, retained,
               [this, x, gain, bias, out, n, d, xhat = std::move(xhat), invstd = std::move(invstd)]() {
                   counters_.add_mul_adds(MulAddKind::Other, 4 * n * d);
                   if (bias.requires_grad()) {
                       bias.node()->ensure_grad();
                       for (Index i = 0; i < n; ++i)
                           for (Index j = 0; j < d; ++j)
                               bias.grad()[static_cast<std::size_t>(j)] +=
                                   out.grad()[static_cast<std::size_t>(i * d + j)];
                   }
                   if (gain.requires_grad()) {
                       gain.node()->ensure_grad();
                       for (Index i = 0; i < n; ++i)
                           for (Index j = 0; j < d; ++j)
                               gain.grad()[static_cast<std::size_t>(j)] +=
                                   out.grad()[static_cast<std::size_t>(i * d + j)] *
                                   xhat[static_cast<std::size_t>(i * d + j)];
                   }
                   if (x.requires_grad()) {
                       x.node()->ensure_grad();
                       for (Index i = 0; i < n; ++i) {
                           double sum_dy = 0.0, sum_dy_xh = 0.0;
                           for (Index j = 0; j < d; ++j) {
                               const std::size_t idx = static_cast<std::size_t>(i * d + j);
                               const double dy = out.grad()[idx] * gain.data()[static_cast<std::size_t>(j)];
                               sum_dy += dy;
                               sum_dy_xh += dy * xhat[idx];
                           }
                           const double is = invstd[static_cast<std::size_t>(i)];
                           const double invd = 1.0 / static_cast<double>(d);
                           for (Index j = 0; j < d; ++j) {
                               const std::size_t idx = static_cast<std::size_t>(i * d + j);
                               const double dy = out.grad()[idx] * gain.data()[static_cast<std::size_t>(j)];
                               x.grad()[idx] += is * (dy - invd * sum_dy - invd * xhat[idx] * sum_dy_xh);
                           }
                       }
                   }
               });
        return out;
    }

    // ---- attention core ----
    //
    // q: [m, d], k/v: [n, d] after projection. Splits d into `heads` column
    // blocks, computes scaled dot-product attention per head and writes each
    // head's context back into its column block. key_mask, when non-empty,
    // marks valid key rows; masked keys receive exactly zero weight.
    Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                               const std::vector<std::uint8_t>& key_mask, PairKind pair_kind) {
        const Index m = q.rows(), n = k.rows(), d = q.cols();
        if (k.cols() != d || v.cols() != d || v.rows() != n) {
            throw ShapeError("multihead_attention: q " + shape_string(q.shape()) + ", k " +
                             shape_string(k.shape()) + ", v " + shape_string(v.shape()));
        }
        if (heads <= 0 || d % heads != 0) {
            throw ConfigError("multihead_attention: head count " + std::to_string(heads) +
                              " must divide width " + std::to_string(d));
        }
        if (!key_mask.empty()) {
            if (static_cast<Index>(key_mask.size()) != n) {
                throw ShapeError("multihead_attention: key mask length " + std::to_string(key_mask.size()) +
                                 " vs keys " + std::to_string(n));
            }
            if (std::find(key_mask.begin(), key_mask.end(), std::uint8_t{1}) == key_mask.end()) {
                throw ContractError("multihead_attention: all key positions masked");
            }
        }
        const Index dh = d / heads;
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const bool req = q.requires_grad() || k.requires_grad() || v.requires_grad();

        Tensor out = make_out({m, d}, "multihead_attention", req);
        std::vector<double> weights(static_cast<std::size_t>(heads * m * n));

        counters_.add_pairs(pair_kind, m * n);
        counters_.add_mul_adds(MulAddKind::AttentionScore, m * n * d);
        counters_.add_mul_adds(MulAddKind::AttentionValue, m * n * d);
        counters_.add_mul_adds(MulAddKind::Other, 3 * heads * m * n);  // scale + softmax

        for (int h = 0; h < heads; ++h) {
            auto qh = q.mat().block(0, h * dh, m, dh);
            auto kh = k.mat().block(0, h * dh, n, dh);
            auto vh = v.mat().block(0, h * dh, n, dh);
            MatMap wh(weights.data() + static_cast<std::size_t>(h) * m * n, m, n);
            wh.noalias() = qh * kh.transpose() * att_scale;
            for (Index i = 0; i < m; ++i) {
                double* row = wh.data() + i * n;
                double mx = -std::numeric_limits<double>::infinity();
                for (Index j = 0; j < n; ++j) {
                    if (key_mask.empty() || key_mask[static_cast<std::size_t>(j)]) {
                        mx = std::max(mx, row[j]);
                    }
                }
                double sum = 0.0;
                for (Index j = 0; j < n; ++j) {
                    if (key_mask.empty() || key_mask[static_cast<std::size_t>(j)]) {
                        row[j] = std::exp(row[j] - mx);
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                const double inv = 1.0 / sum;
                for (Index j = 0; j < n; ++j) row[j] *= inv;
            }
            Tensor om = out;
            om.mat().block(0, h * dh, m, dh).noalias() = wh * vh;
        }
        check_finite(out);
        if (attn_sink_) {
            attn_sink_->push_back(AttentionCapture{pair_kind, heads, m, n, weights});
        }

        const Index retained = static_cast<Index>(weights.size());
        finish(out, retained,
               [this, q, k, v, out, heads, m, n, dh, att_scale, weights = std::move(weights)]() {
                   const Index d = static_cast<Index>(heads) * dh;
                   counters_.add_mul_adds(MulAddKind::AttentionValue, 2 * m * n * d);
                   counters_.add_mul_adds(MulAddKind::AttentionScore, 2 * m * n * d);
                   counters_.add_mul_adds(MulAddKind::Other, 3 * heads * m * n);
                   RowMat dw(m, n);
                   Tensor qm = q, km = k, vm = v, om = out;
                   if (q.requires_grad()) q.node()->ensure_grad();
                   if (k.requires_grad()) k.node()->ensure_grad();
                   if (v.requires_grad()) v.node()->ensure_grad();
                   for (int h = 0; h < heads; ++h) {
                       ConstMatMap wh(weights.data() + static_cast<std::size_t>(h) * m * n, m, n);
                       auto dctx = om.grad_mat().block(0, h * dh, m, dh);
                       if (v.requires_grad()) {
                           vm.grad_mat().block(0, h * dh, n, dh).noalias() += wh.transpose() * dctx;
                       }
                       dw.noalias() = dctx * vm.mat().block(0, h * dh, n, dh).transpose();
                       // softmax backward per row, then the score scale
                       for (Index i = 0; i < m; ++i) {
                           double dot = 0.0;
                           for (Index j = 0; j < n; ++j) dot += dw(i, j) * wh(i, j);
                           for (Index j = 0; j < n; ++j) {
                               dw(i, j) = wh(i, j) * (dw(i, j) - dot) * att_scale;
                           }
                       }
                       if (q.requires_grad()) {
                           qm.grad_mat().block(0, h * dh, m, dh).noalias() +=
                               dw * km.mat().block(0, h * dh, n, dh);
                       }
                       if (k.requires_grad()) {
                           km.grad_mat().block(0, h * dh, n, dh).noalias() +=
                               dw.transpose() * qm.mat().block(0, h * dh, m, dh);
                       }
                   }
               });
        return out;
    }

    // ---- reductions / reshaping ----

    Tensor slice_rows(const Tensor& x, Index start, Index len) {
        const Index n = x.rows(), d = x.cols();
        if (start < 0 || len <= 0 || start + len > n) {
            throw IndexError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") out of " + std::to_string(n) + " rows");
        }
        Tensor out = make_out({len, d}, "slice_rows", x.requires_grad());
        std::copy_n(x.data().begin() + start * d, len * d, out.data().begin());
        finish(out, 0, [x, out, start, d, len]() {
            if (!x.requires_grad()) return;
            x.node()->ensure_grad();
            for (Index i = 0; i < len * d; ++i) {
                x.grad()[static_cast<std::size_t>(start * d + i)] += out.grad()[static_cast<std::size_t>(i)];
            }
        });
        return out;
    }

    Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) {
            throw ContractError("concat_rows: no inputs");
        }
        const Index d = parts.front().cols();
        Index total = 0;
        bool req = false;
        for (const auto& p : parts) {
            if (p.cols() != d) {
                throw ShapeError("concat_rows: width mismatch " + std::to_string(p.cols()) + " vs " +
                                 std::to_string(d));
            }
            total += p.rows();
            req = req || p.requires_grad();
        }
        Tensor out = make_out({total, d}, "concat_rows", req);
        Index off = 0;
        for (const auto& p : parts) {
            std::copy_n(p.data().begin(), p.numel(), out.data().begin() + off);
            off += p.numel();
        }
        finish(out, 0, [parts, out]() {
            Index off = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    p.node()->accumulate_grad(out.grad().data() + off, p.numel());
                }
                off += p.numel();
            }
        });
        return out;
    }

    Tensor mean_rows(const Tensor& x) {
        const Index n = x.rows(), d = x.cols();
        Tensor out = make_out({1, d}, "mean_rows", x.requires_grad());
        counters_.add_mul_adds(MulAddKind::Other, d);
        const double inv = 1.0 / static_cast<double>(n);
        for (Index j = 0; j < d; ++j) {
            double s = 0.0;
            for (Index i = 0; i < n; ++i) s += x.data()[static_cast<std::size_t>(i * d + j)];
            out.data()[static_cast<std::size_t>(j)] = s * inv;
        }
        finish(out, 0, [x, out, n, d, inv]() {
            if (!x.requires_grad()) return;
            x.node()->ensure_grad();
            for (Index i = 0; i < n; ++i)
                for (Index j = 0; j < d; ++j)
                    x.grad()[static_cast<std::size_t>(i * d + j)] += inv * out.grad()[static_cast<std::size_t>(j)];
        });
        return out;
    }

    Tensor max_rows(const Tensor& x) {
        const Index n = x.rows(), d = x.cols();
        Tensor out = make_out({1, d}, "max_rows", x.requires_grad());
        std::vector<Index> arg(static_cast<std::size_t>(d), 0);
        for (Index j = 0; j < d; ++j) {
            double best = x.data()[static_cast<std::size_t>(j)];
            Index bi = 0;
            for (Index i = 1; i < n; ++i) {
                const double v = x.data()[static_cast<std::size_t>(i * d + j)];
                if (v > best) {
                    best = v;
                    bi = i;
                }
            }
            out.data()[static_cast<std::size_t>(j)] = best;
            arg[static_cast<std::size_t>(j)] = bi;
        }
        finish(out, 0, [x, out, d, arg = std::move(arg)]() {
            if (!x.requires_grad()) return;
            x.node()->ensure_grad();
            for (Index j = 0; j < d; ++j) {
                x.grad()[static_cast<std::size_t>(arg[static_cast<std::size_t>(j)] * x.cols() + j)] +=
                    out.grad()[static_cast<std::size_t>(j)];
            }
        });
        return out;
    }

    Tensor sum_all(const Tensor& x) {
        Tensor out = make_out({1, 1}, "sum_all", x.requires_grad());
        double s = 0.0;
        for (double v : x.data()) s += v;
        out.data()[0] = s;
        finish(out, 0, [x, out]() {
            if (!x.requires_grad()) return;
            x.node()->ensure_grad();
            const double g = out.grad()[0];
            for (auto& v : x.grad()) v += g;
        });
        return out;
    }

    Tensor mean_all(const Tensor& x) {
        Tensor out = make_out({1, 1}, "mean_all", x.requires_grad());
        counters_.add_mul_adds(MulAddKind::Other, 1);
        double s = 0.0;
        for (double v : x.data()) s += v;
        const double inv = 1.0 / static_cast<double>(x.numel());
        out.data()[0] = s * inv;
        finish(out, 0, [x, out, inv]() {
            if (!x.requires_grad()) return;
            x.node()->ensure_grad();
            const double g = out.grad()[0] * inv;
            for (auto& v : x.grad()) v += g;
        });
        return out;
    }

    // Rows of `table` gathered by id. Gradient scatters back into the table.
    Tensor embedding(const Tensor& table, const std::vector<Index>& ids) {
        const Index v = table.rows(), d = table.cols();
        const Index n = static_cast<Index>(ids.size());
        if (n == 0) {
            throw ContractError("embedding: empty id list");
        }
        for (Index id : ids) {
            if (id < 0 || id >= v) {
                throw IndexError("embedding: id " + std::to_string(id) + " outside table of " +
                                 std::to_string(v) + " rows");
            }
        }
        Tensor out = make_out({n, d}, "embedding", table.requires_grad());
        for (Index i = 0; i < n; ++i) {
            std::copy_n(table.data().begin() + ids[static_cast<std::size_t>(i)] * d, d,
                        out.data().begin() + i * d);
        }
        finish(out, 0, [table, out, ids, d, n]() {
            if (!table.requires_grad()) return;
            table.node()->ensure_grad();
            for (Index i = 0; i < n; ++i) {
                const Index id = ids[static_cast<std::size_t>(i)];
                for (Index j = 0; j < d; ++j) {
                    table.grad()[static_cast<std::size_t>(id * d + j)] +=
                        out.grad()[static_cast<std::size_t>(i * d + j)];
                }
            }
        });
        return out;
    }

    // x: [frames*block, d]; adds table row f to every row of frame f's block.
    Tensor add_frame_rows(const Tensor& x, const Tensor& table, Index frames, Index block) {
        const Index d = x.cols();
        if (x.rows() != frames * block) {
            throw ShapeError("add_frame_rows: row count " + std::to_string(x.rows()) + " != frames*block " +
                             std::to_string(frames * block));
        }
        if (table.cols() != d) {
            throw ShapeError("add_frame_rows: table width " + std::to_string(table.cols()) + " vs " +
                             std::to_string(d));
        }
        if (table.rows() < frames) {
            throw ConfigError("add_frame_rows: " + std::to_string(frames) + " frames exceed table of " +
                              std::to_string(table.rows()) + " rows");
        }
        Tensor out = make_out(x.shape(), "add_frame_rows", x.requires_grad() || table.requires_grad());
        for (Index f = 0; f < frames; ++f) {
            for (Index b = 0; b < block; ++b) {
                const Index r = f * block + b;
                for (Index j = 0; j < d; ++j) {
                    out.data()[static_cast<std::size_t>(r * d + j)] =
                        x.data()[static_cast<std::size_t>(r * d + j)] +
                        table.data()[static_cast<std::size_t>(f * d + j)];
                }
            }
        }
        finish(out, 0, [x, table, out, frames, block, d]() {
            if (x.requires_grad()) x.node()->accumulate_grad(out.grad().data(), out.numel());
            if (table.requires_grad()) {
                table.node()->ensure_grad();
                for (Index f = 0; f < frames; ++f)
                    for (Index b = 0; b < block; ++b)
                        for (Index j = 0; j < d; ++j)
                            table.grad()[static_cast<std::size_t>(f * d + j)] +=
                                out.grad()[static_cast<std::size_t>((f * block + b) * d + j)];
            }
        });
        return out;
    }

    // Mean negative log-softmax of the target class. logits: [batch, classes].
    Tensor cross_entropy_logits(const Tensor& logits, const std::vector<Index>& targets) {
        const Index b = logits.rows(), c = logits.cols();
        if (static_cast<Index>(targets.size()) != b) {
            throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(b) + " rows");
        }
        for (Index t : targets) {
            if (t < 0 || t >= c) {
                throw IndexError("cross_entropy_logits: target " + std::to_string(t) + " outside [0, " +
                                 std::to_string(c) + ")");
            }
        }
        Tensor out = make_out({1, 1}, "cross_entropy_logits", logits.requires_grad());
        std::vector<double> probs(static_cast<std::size_t>(b * c));
        counters_.add_mul_adds(MulAddKind::Other, 2 * b * c);
        double loss = 0.0;
        for (Index i = 0; i < b; ++i) {
            const double* row = logits.data().data() + i * c;
            double mx = row[0];
            for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (Index j = 0; j < c; ++j) {
                const double e = std::exp(row[j] - mx);
                probs[static_cast<std::size_t>(i * c + j)] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (Index j = 0; j < c; ++j) probs[static_cast<std::size_t>(i * c + j)] *= inv;
            loss -= std::log(probs[static_cast<std::size_t>(i * c + targets[static_cast<std::size_t>(i)])]);
        }
        out.data()[0] = loss / static_cast<double>(b);
        check_finite(out);
        finish(out, b * c, [this, logits, out, targets, b, c, probs = std::move(probs)]() {
            if (!logits.requires_grad()) return;
            counters_.add_mul_adds(MulAddKind::Other, b * c);
            logits.node()->ensure_grad();
            const double g = out.grad()[0] / static_cast<double>(b);
            for (Index i = 0; i < b; ++i) {
                for (Index j = 0; j < c; ++j) {
                    const double onehot = (j == targets[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
                    logits.grad()[static_cast<std::size_t>(i * c + j)] +=
                        g * (probs[static_cast<std::size_t>(i * c + j)] - onehot);
                }
            }
        });
        return out;
    }

    // Rows scaled to unit Euclidean norm.
    Tensor l2_normalize_rows(const Tensor& x) {
        const Index n = x.rows(), d = x.cols();
        Tensor out = make_out(x.shape(), "l2_normalize_rows", x.requires_grad());
        std::vector<double> norms(static_cast<std::size_t>(n));
        counters_.add_mul_adds(MulAddKind::Other, 2 * n * d);
        for (Index i = 0; i < n; ++i) {
            const double* row = x.data().data() + i * d;
            double s = 0.0;
            for (Index j = 0; j < d; ++j) s += row[j] * row[j];
            const double norm = std::sqrt(s + 1e-24);
            norms[static_cast<std::size_t>(i)] = norm;
            const double inv = 1.0 / norm;
            for (Index j = 0; j < d; ++j) out.data()[static_cast<std::size_t>(i * d + j)] = row[j] * inv;
        }
        finish(out, n, [this, x, out, n, d, norms = std::move(norms)]() {
            if (!x.requires_grad()) return;
            counters_.add_mul_adds(MulAddKind::Other, 3 * n * d);
            x.node()->ensure_grad();
            for (Index i = 0; i < n; ++i) {
                const double inv = 1.0 / norms[static_cast<std::size_t>(i)];
                double dot = 0.0;
                for (Index j = 0; j < d; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i * d + j);
                    dot += out.grad()[idx] * out.data()[idx];
                }
                for (Index j = 0; j < d; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i * d + j);
                    x.grad()[idx] += inv * (out.grad()[idx] - out.data()[idx] * dot);
                }
            }
        });
        return out;
    }

    // ---- backward ----

    // Seeds d(loss)/d(loss) = 1 and walks the tape once in reverse. Leaf
    // gradients accumulate across calls until explicitly zeroed; op-output
    // gradients are reset at the start of every call.
    void backward(const Tensor& loss) {
        if (!grad_enabled_) {
            throw ContractError("backward: graph was constructed without gradients");
        }
        if (loss.numel() != 1) {
            throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
        }
        if (loss.node()->owner != this || loss.node()->tape_index < 0) {
            throw ContractError("backward: loss is not an operation recorded on this graph");
        }
        for (auto& rec : tape_) {
            rec.out.node()->grad.assign(rec.out.node()->data.size(), 0.0);
        }
        loss.node()->grad[0] = 1.0;
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
            if (it->out.requires_grad()) {
                it->backward();
            }
            if (!it->live_released) {
                counters_.free_live(it->out.numel() + it->retained);
                it->live_released = true;
            }
        }
    }

  private:
    struct OpRecord {
        Tensor out;
        Index retained = 0;
        bool live_released = false;
        std::function<void()> backward;
    };

    void require_same_shape(const char* op, const Tensor& a, const Tensor& b) const {
        if (a.shape() != b.shape()) {
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
        }
    }

    Tensor make_out(std::vector<Index> shape, const char* op, bool requires_grad) {
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->data.assign(static_cast<std::size_t>(shape_numel(node->shape)), 0.0);
        node->requires_grad = grad_enabled_ && requires_grad;
        node->op = op;
        return Tensor(std::move(node));
    }

    void check_finite(const Tensor& t) const {
        for (double v : t.data()) {
            if (!std::isfinite(v)) {
                throw NumericError(std::string("op ") + t.node()->op + " produced a non-finite value");
            }
        }
    }

    // Records the op on the tape (when gradients are on) and tracks liveness
    // of its output plus any scratch retained for backward.
    template <typename Fn>
    void finish(Tensor& out, Index retained, Fn&& backward) {
        check_finite(out);
        if (!grad_enabled_) {
            return;
        }
        out.node()->owner = this;
        out.node()->tape_index = static_cast<Index>(tape_.size());
        counters_.alloc_live(out.numel() + retained);
        tape_.push_back(OpRecord{out, retained, false, std::function<void()>(std::forward<Fn>(backward))});
    }

    bool grad_enabled_;
    CostCounters counters_;
    std::vector<OpRecord> tape_;
    std::vector<AttentionCapture>* attn_sink_ = nullptr;
};

}  // namespace multi

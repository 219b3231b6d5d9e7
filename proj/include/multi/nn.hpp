#pragma once

#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "multi/common.hpp"
#include "multi/tensor.hpp"

namespace multi {

// Named registry of trainable tensors. Shared (aliased) tensors are
// registered once; registration order is the checkpoint order.
class ParamStore {
  public:
    Tensor add(const std::string& name, Tensor t) {
        if (seen_.count(t.node())) {
            return t;
        }
        t.set_requires_grad(true);
        t.named(name);
        seen_.insert(t.node());
        params_.push_back(t);
        return t;
    }

    const std::vector<Tensor>& all() const { return params_; }

    void zero_grad() const {
        for (const auto& p : params_) p.zero_grad();
    }

    Index scalar_count() const {
        Index n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    Index trainable_scalar_count() const {
        Index n = 0;
        for (const auto& p : params_) {
            if (p.requires_grad()) n += p.numel();
        }
        return n;
    }

    Tensor find(const std::string& name) const {
        for (const auto& p : params_) {
            if (p.name() == name) return p;
        }
        throw DataError("ParamStore: no parameter named '" + name + "'");
    }

  private:
    std::vector<Tensor> params_;
    std::unordered_set<TensorNode*> seen_;
};

struct LinearParams {
    Tensor w;  // [in, out]
    Tensor b;  // [out], undefined when bias-free

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out{w};
        if (b.defined()) out.push_back(b);
        return out;
    }
};

inline LinearParams make_linear(ParamStore& store, const std::string& name, Index in, Index out,
                                SeededRng& rng, bool bias = true, double init_std = 0.02) {
    LinearParams p;
    p.w = store.add(name + ".w", Tensor::randn({in, out}, rng, init_std));
    if (bias) {
        p.b = store.add(name + ".b", Tensor::zeros({out}));
    }
    return p;
}

inline Tensor apply_linear(Graph& g, const LinearParams& p, const Tensor& x, MulAddKind kind) {
    return g.linear(x, p.w, p.b, kind);
}

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

inline LayerNormParams make_layer_norm(ParamStore& store, const std::string& name, Index d) {
    LayerNormParams p;
    p.gain = store.add(name + ".gain", Tensor::full({d}, 1.0));
    p.bias = store.add(name + ".bias", Tensor::zeros({d}));
    return p;
}

inline Tensor apply_layer_norm(Graph& g, const LayerNormParams& p, const Tensor& x) {
    return g.layer_norm(x, p.gain, p.bias);
}

// Q/K/V/output projections around the fused attention core.
struct AttentionParams {
    LinearParams q, k, v, o;
    int heads = 4;

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const auto& lp : {q, k, v, o}) {
            for (const auto& t : lp.tensors()) out.push_back(t);
        }
        return out;
    }
};

inline AttentionParams make_attention(ParamStore& store, const std::string& name, Index d, int heads,
                                      SeededRng& rng) {
    AttentionParams p;
    p.q = make_linear(store, name + ".q", d, d, rng);
    p.k = make_linear(store, name + ".k", d, d, rng);
    p.v = make_linear(store, name + ".v", d, d, rng);
    p.o = make_linear(store, name + ".o", d, d, rng);
    p.heads = heads;
    return p;
}

inline Tensor apply_attention(Graph& g, const AttentionParams& p, const Tensor& queries,
                              const Tensor& keys_values, const std::vector<std::uint8_t>& key_mask,
                              PairKind pair_kind) {
    Tensor q = apply_linear(g, p.q, queries, MulAddKind::Projection);
    Tensor k = apply_linear(g, p.k, keys_values, MulAddKind::Projection);
    Tensor v = apply_linear(g, p.v, keys_values, MulAddKind::Projection);
    Tensor ctx = g.multihead_attention(q, k, v, p.heads, key_mask, pair_kind);
    return apply_linear(g, p.o, ctx, MulAddKind::Projection);
}

struct FfnParams {
    LinearParams in, out;

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> res;
        for (const auto& lp : {in, out}) {
            for (const auto& t : lp.tensors()) res.push_back(t);
        }
        return res;
    }
};

inline FfnParams make_ffn(ParamStore& store, const std::string& name, Index d, Index hidden,
                          SeededRng& rng) {
    FfnParams p;
    p.in = make_linear(store, name + ".in", d, hidden, rng);
    p.out = make_linear(store, name + ".out", hidden, d, rng);
    return p;
}

inline Tensor apply_ffn(Graph& g, const FfnParams& p, const Tensor& x) {
    Tensor h = apply_linear(g, p.in, x, MulAddKind::Ffn);
    h = g.gelu(h);
    return apply_linear(g, p.out, h, MulAddKind::Ffn);
}

// Pre-norm transformer encoder layer.
struct TransformerLayer {
    LayerNormParams ln_attn, ln_ffn;
    AttentionParams attn;
    FfnParams ffn;

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out{ln_attn.gain, ln_attn.bias, ln_ffn.gain, ln_ffn.bias};
        for (const auto& t : attn.tensors()) out.push_back(t);
        for (const auto& t : ffn.tensors()) out.push_back(t);
        return out;
    }
};

inline TransformerLayer make_transformer_layer(ParamStore& store, const std::string& name, Index d,
                                               int heads, Index ffn_hidden, SeededRng& rng) {
    TransformerLayer l;
    l.ln_attn = make_layer_norm(store, name + ".ln_attn", d);
    l.ln_ffn = make_layer_norm(store, name + ".ln_ffn", d);
    l.attn = make_attention(store, name + ".attn", d, heads, rng);
    l.ffn = make_ffn(store, name + ".ffn", d, ffn_hidden, rng);
    return l;
}

inline Tensor apply_transformer_layer(Graph& g, const TransformerLayer& l, const Tensor& x,
                                      const std::vector<std::uint8_t>& key_mask, PairKind pair_kind) {
    Tensor normed = apply_layer_norm(g, l.ln_attn, x);
    Tensor a = g.add(x, apply_attention(g, l.attn, normed, normed, key_mask, pair_kind));
    return g.add(a, apply_ffn(g, l.ffn, apply_layer_norm(g, l.ln_ffn, a)));
}

inline void set_trainable(const std::vector<Tensor>& ts, bool trainable) {
    for (const auto& t : ts) t.set_requires_grad(trainable);
}

}  // namespace multi

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "multi/common.hpp"
#include "multi/nn.hpp"
#include "multi/tensor.hpp"

namespace multi {

enum class FusionKind {
    ClassTokenLike,
    MeanPool,
    MaxPool,
    FlattenEncoder,
    Decoder,
    SamplerCondenseVideo,
    SamplerCondenseText,
};

inline constexpr std::array<FusionKind, 7> kAllFusionKinds{
    FusionKind::ClassTokenLike, FusionKind::MeanPool,
    FusionKind::MaxPool,        FusionKind::FlattenEncoder,
    FusionKind::Decoder,        FusionKind::SamplerCondenseVideo,
    FusionKind::SamplerCondenseText,
};

enum class ResidualCombine { Add, Concat, Multiply };

inline const char* to_string(FusionKind k) {
    switch (k) {
        case FusionKind::ClassTokenLike: return "class_token";
        case FusionKind::MeanPool: return "mean_pool";
        case FusionKind::MaxPool: return "max_pool";
        case FusionKind::FlattenEncoder: return "flatten_encoder";
        case FusionKind::Decoder: return "decoder";
        case FusionKind::SamplerCondenseVideo: return "sampler_condense_video";
        case FusionKind::SamplerCondenseText: return "tgms";
    }
    return "?";
}

inline FusionKind parse_fusion_kind(const std::string& s) {
    for (FusionKind k : kAllFusionKinds) {
        if (s == to_string(k)) return k;
    }
    throw ConfigError("unknown fusion kind '" + s + "'");
}

inline const char* to_string(ResidualCombine c) {
    switch (c) {
        case ResidualCombine::Add: return "add";
        case ResidualCombine::Concat: return "concat";
        case ResidualCombine::Multiply: return "multiply";
    }
    return "?";
}

inline ResidualCombine parse_residual_combine(const std::string& s) {
    if (s == "add") return ResidualCombine::Add;
    if (s == "concat") return ResidualCombine::Concat;
    if (s == "multiply") return ResidualCombine::Multiply;
    throw ConfigError("unknown residual combine '" + s + "'");
}

// One fusion topology plus its toggles. The sampler toggles only apply to
// the two sampler kinds; concat widens the combined queries and is mapped
// back to width d through a projection declared at construction.
struct FusionStrategy {
    FusionKind kind = FusionKind::SamplerCondenseText;
    bool shared_sampler = true;
    bool adapt_pooling = true;
    ResidualCombine residual_combine = ResidualCombine::Add;
    Index num_queries = 16;
    Index layers = 4;

    bool is_sampler() const {
        return kind == FusionKind::SamplerCondenseVideo || kind == FusionKind::SamplerCondenseText;
    }
};

// ---- analytic attention-pair accounting (per layer) ----

struct CostModel {
    Index n_v = 0;   // frames (0 allowed for the degenerate text-only case)
    Index k = 196;   // patches per frame
    Index n_t = 0;   // text length
    Index n_q = 16;  // query count

    void validate() const {
        if (n_v < 0 || k < 1 || n_t < 1 || n_q < 1) {
            throw ConfigError("CostModel: need n_v >= 0, k/n_t/n_q >= 1");
        }
    }
};

struct PairCounts {
    Index self_attn = 0;
    Index cross_text = 0;
    Index cross_video = 0;

    Index total() const { return self_attn + cross_text + cross_video; }

    PairCounts operator*(Index layers) const {
        return PairCounts{self_attn * layers, cross_text * layers, cross_video * layers};
    }
};

// Exact query*key pair counts for one fusion layer. For the sampler kinds a
// "layer" is one condensing pass layer plus one fusing pass layer, which is
// why two self-attention terms appear.
inline PairCounts analytic_pairs_per_layer(FusionKind kind, const CostModel& m) {
    m.validate();
    const Index video_rows = m.n_v * m.k;
    switch (kind) {
        case FusionKind::ClassTokenLike:
        case FusionKind::MeanPool:
        case FusionKind::MaxPool: {
            const Index rows = m.n_t + m.n_v;
            return {rows * rows, 0, 0};
        }
        case FusionKind::FlattenEncoder: {
            const Index rows = m.n_t + video_rows;
            return {rows * rows, 0, 0};
        }
        case FusionKind::Decoder:
            return {m.n_t * m.n_t, 0, m.n_t * video_rows};
        case FusionKind::SamplerCondenseVideo:
        case FusionKind::SamplerCondenseText:
            return {2 * m.n_q * m.n_q, m.n_q * m.n_t, m.n_q * video_rows};
    }
    throw ConfigError("unknown fusion kind");
}

inline PairCounts analytic_pairs_total(const FusionStrategy& s, const CostModel& m) {
    return analytic_pairs_per_layer(s.kind, m) * s.layers;
}

// ---- Adapt-Pooling ----

// Learnable d x N_s projection; condenses any [N_i, d] sequence to
// [N_s, d] rows that are convex combinations of the input rows.
struct AdaptPoolParams {
    Tensor w_reduce;  // [d, N_s]

    Index condensed_length() const { return w_reduce.cols(); }
};

inline AdaptPoolParams make_adapt_pool(ParamStore& store, const std::string& name, Index d, Index n_s,
                                       SeededRng& rng) {
    if (n_s < 1) {
        throw ConfigError("adapt_pool: condensed length must be >= 1");
    }
    return AdaptPoolParams{store.add(name + ".w_reduce", Tensor::randn({d, n_s}, rng, 0.02))};
}

// Importance weights are the softmax over input positions of (z W_reduce)^T,
// shape [N_s, N_i]; every weight row is a distribution over the inputs.
inline Tensor adapt_pool_weights(Graph& g, const AdaptPoolParams& p, const Tensor& z) {
    if (z.cols() != p.w_reduce.rows()) {
        throw ShapeError("adapt_pool: input width " + std::to_string(z.cols()) +
                         " vs reducer of width " + std::to_string(p.w_reduce.rows()));
    }
    Tensor scores = g.matmul(z, p.w_reduce, MulAddKind::Projection);  // [N_i, N_s]
    return g.softmax(g.transpose(scores), 1);                        // [N_s, N_i]
}

inline Tensor adapt_pool(Graph& g, const AdaptPoolParams& p, const Tensor& z) {
    return g.matmul(adapt_pool_weights(g, p, z), z, MulAddKind::AttentionValue);
}

// ---- sampler passes ----

enum class Modality { Text, Video };

// One decoder-style sampler layer: self-attention over the query states,
// cross-attention into the sampled sequence, then the modality FFN. The
// attention parameter sets may alias the sibling pass's tensors
// (shared-sampler); the FFN never does.
struct SamplerPassLayer {
    LayerNormParams ln_self, ln_cross, ln_ffn;
    AttentionParams self_attn;
    AttentionParams cross_attn;
    FfnParams ffn;

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out{ln_self.gain, ln_self.bias, ln_cross.gain,
                                ln_cross.bias, ln_ffn.gain,  ln_ffn.bias};
        for (const auto& t : self_attn.tensors()) out.push_back(t);
        for (const auto& t : cross_attn.tensors()) out.push_back(t);
        for (const auto& t : ffn.tensors()) out.push_back(t);
        return out;
    }
};

inline Tensor sampler_pass(Graph& g, std::span<const SamplerPassLayer> layers, const Tensor& queries,
                           const Tensor& z, const std::vector<std::uint8_t>& z_mask, PairKind cross_kind) {
    if (layers.empty()) {
        throw ConfigError("sampler_pass: no layers configured for this modality");
    }
    Tensor h = queries;
    for (const auto& l : layers) {
        Tensor normed = apply_layer_norm(g, l.ln_self, h);
        h = g.add(h, apply_attention(g, l.self_attn, normed, normed, {}, PairKind::SelfAttn));
        h = g.add(h, apply_attention(g, l.cross_attn, apply_layer_norm(g, l.ln_cross, h), z, z_mask,
                                     cross_kind));
        h = g.add(h, apply_ffn(g, l.ffn, apply_layer_norm(g, l.ln_ffn, h)));
    }
    return h;
}

// ---- fusion module ----

struct FusionDims {
    Index d = 64;
    int heads = 4;
    Index ffn_hidden = 128;
};

// Builds exactly the parameters its strategy needs and exposes the fusion
// forward plus the text-independent video condensation used for contrastive
// representations.
class FusionModule {
  public:
    FusionModule(ParamStore& store, const std::string& name, const FusionStrategy& strategy,
                 const FusionDims& dims, SeededRng& rng)
        : strategy_(strategy), dims_(dims) {
        if (strategy_.layers < 1) {
            throw ConfigError("fusion: need at least one layer");
        }
        if (strategy_.is_sampler()) {
            queries_ = store.add(name + ".queries",
                                 Tensor::randn({strategy_.num_queries, dims.d}, rng, 0.02));
            // N_s is forced equal to N_q so the sampled and adapt-pooled
            // features combine elementwise.
            adapt_ = make_adapt_pool(store, name + ".adapt_pool", dims.d, strategy_.num_queries, rng);
            for (Index i = 0; i < strategy_.layers; ++i) {
                const std::string ln = name + ".layer" + std::to_string(i);
                SamplerPassLayer text = make_pass_layer(store, ln + ".text", rng);
                SamplerPassLayer video;
                if (strategy_.shared_sampler) {
                    video.self_attn = text.self_attn;
                    video.cross_attn = text.cross_attn;
                } else {
                    video.self_attn = make_attention(store, ln + ".video.self_attn", dims.d, dims.heads, rng);
                    video.cross_attn =
                        make_attention(store, ln + ".video.cross_attn", dims.d, dims.heads, rng);
                }
                video.ln_self = make_layer_norm(store, ln + ".video.ln_self", dims.d);
                video.ln_cross = make_layer_norm(store, ln + ".video.ln_cross", dims.d);
                video.ln_ffn = make_layer_norm(store, ln + ".video.ln_ffn", dims.d);
                video.ffn = make_ffn(store, ln + ".video.ffn", dims.d, dims.ffn_hidden, rng);
                text_layers_.push_back(std::move(text));
                video_layers_.push_back(std::move(video));
            }
            if (strategy_.residual_combine == ResidualCombine::Concat) {
                concat_proj_ = make_linear(store, name + ".concat_proj", 2 * dims.d, dims.d, rng);
            }
        } else if (strategy_.kind == FusionKind::Decoder) {
            for (Index i = 0; i < strategy_.layers; ++i) {
                text_layers_.push_back(
                    make_pass_layer(store, name + ".layer" + std::to_string(i) + ".decoder", rng));
            }
        } else {
            for (Index i = 0; i < strategy_.layers; ++i) {
                encoder_layers_.push_back(make_transformer_layer(
                    store, name + ".layer" + std::to_string(i) + ".encoder", dims.d, dims.heads,
                    dims.ffn_hidden, rng));
            }
        }
    }

    const FusionStrategy& strategy() const { return strategy_; }
    const Tensor& queries() const { return queries_; }
    const AdaptPoolParams& adapt_pool_params() const { return adapt_; }
    std::vector<SamplerPassLayer>& text_layers() { return text_layers_; }
    std::vector<SamplerPassLayer>& video_layers() { return video_layers_; }
    const std::vector<TransformerLayer>& encoder_layers() const { return encoder_layers_; }

    // v_feat: [(N_v*K), d] with time embeddings already added and frames
    // flattened; t_feat: [N_t, d]. An undefined v_feat is the degenerate
    // no-video case (FlattenEncoder only).
    Tensor fuse(Graph& g, const Tensor& v_feat, const Tensor& t_feat, Index frames,
                const std::vector<std::uint8_t>& text_mask = {}) const {
        switch (strategy_.kind) {
            case FusionKind::SamplerCondenseText: {
                Tensor condensed =
                    sampler_pass(g, text_layers_, queries_, t_feat, text_mask, PairKind::CrossText);
                if (strategy_.adapt_pooling) {
                    condensed = combine(g, condensed, adapt_pool(g, adapt_, t_feat));
                }
                return sampler_pass(g, video_layers_, condensed, require_video(v_feat), {},
                                    PairKind::CrossVideo);
            }
            case FusionKind::SamplerCondenseVideo: {
                Tensor condensed = sampler_pass(g, video_layers_, queries_, require_video(v_feat), {},
                                                PairKind::CrossVideo);
                if (strategy_.adapt_pooling) {
                    condensed = combine(g, condensed, adapt_pool(g, adapt_, require_video(v_feat)));
                }
                return sampler_pass(g, text_layers_, condensed, t_feat, text_mask, PairKind::CrossText);
            }
            case FusionKind::Decoder: {
                Tensor h = t_feat;
                for (const auto& l : text_layers_) {
                    Tensor normed = apply_layer_norm(g, l.ln_self, h);
                    h = g.add(h, apply_attention(g, l.self_attn, normed, normed, text_mask,
                                                 PairKind::SelfAttn));
                    h = g.add(h, apply_attention(g, l.cross_attn, apply_layer_norm(g, l.ln_cross, h),
                                                 require_video(v_feat), {}, PairKind::CrossVideo));
                    h = g.add(h, apply_ffn(g, l.ffn, apply_layer_norm(g, l.ln_ffn, h)));
                }
                return h;
            }
            case FusionKind::FlattenEncoder: {
                Tensor seq = v_feat.defined() ? g.concat_rows({t_feat, v_feat}) : t_feat;
                return run_encoder(g, seq, pad_mask(text_mask, v_feat.defined() ? v_feat.rows() : 0));
            }
            case FusionKind::ClassTokenLike:
            case FusionKind::MeanPool:
            case FusionKind::MaxPool: {
                Tensor video_rows = condense_per_frame(g, require_video(v_feat), frames);
                Tensor seq = g.concat_rows({t_feat, video_rows});
                return run_encoder(g, seq, pad_mask(text_mask, video_rows.rows()));
            }
        }
        throw ConfigError("fuse: unknown fusion kind");
    }

    // Text-independent condensed video states (contrastive video tower).
    // Sampler kinds sample with the raw learnable queries; the baselines use
    // their own per-frame condensation or fall back to the full sequence.
    Tensor condense_video(Graph& g, const Tensor& v_feat, Index frames) const {
        switch (strategy_.kind) {
            case FusionKind::SamplerCondenseText:
            case FusionKind::SamplerCondenseVideo:
                return sampler_pass(g, video_layers_, queries_, v_feat, {}, PairKind::CrossVideo);
            case FusionKind::ClassTokenLike:
            case FusionKind::MeanPool:
            case FusionKind::MaxPool:
                return condense_per_frame(g, v_feat, frames);
            case FusionKind::Decoder:
            case FusionKind::FlattenEncoder:
                return v_feat;
        }
        throw ConfigError("condense_video: unknown fusion kind");
    }

  private:
    SamplerPassLayer make_pass_layer(ParamStore& store, const std::string& name, SeededRng& rng) {
        SamplerPassLayer l;
        l.ln_self = make_layer_norm(store, name + ".ln_self", dims_.d);
        l.ln_cross = make_layer_norm(store, name + ".ln_cross", dims_.d);
        l.ln_ffn = make_layer_norm(store, name + ".ln_ffn", dims_.d);
        l.self_attn = make_attention(store, name + ".self_attn", dims_.d, dims_.heads, rng);
        l.cross_attn = make_attention(store, name + ".cross_attn", dims_.d, dims_.heads, rng);
        l.ffn = make_ffn(store, name + ".ffn", dims_.d, dims_.ffn_hidden, rng);
        return l;
    }

    static const Tensor& require_video(const Tensor& v) {
        if (!v.defined()) {
            throw ContractError("fuse: this strategy requires video features");
        }
        return v;
    }

    static std::vector<std::uint8_t> pad_mask(const std::vector<std::uint8_t>& text_mask,
                                              Index video_rows) {
        if (text_mask.empty()) {
            return {};
        }
        std::vector<std::uint8_t> mask = text_mask;
        mask.insert(mask.end(), static_cast<std::size_t>(video_rows), std::uint8_t{1});
        return mask;
    }

    Tensor run_encoder(Graph& g, Tensor seq, const std::vector<std::uint8_t>& mask) const {
        for (const auto& l : encoder_layers_) {
            seq = apply_transformer_layer(g, l, seq, mask, PairKind::SelfAttn);
        }
        return seq;
    }

    Tensor combine(Graph& g, const Tensor& sampled, const Tensor& pooled) const {
        switch (strategy_.residual_combine) {
            case ResidualCombine::Add:
                return g.add(sampled, pooled);
            case ResidualCombine::Multiply:
                return g.mul(sampled, pooled);
            case ResidualCombine::Concat: {
                if (!concat_proj_) {
                    throw ConfigError("fuse: concat combine requires the declared width projection");
                }
                Tensor wide = g.transpose(g.concat_rows({g.transpose(sampled), g.transpose(pooled)}));
                return apply_linear(g, *concat_proj_, wide, MulAddKind::Projection);
            }
        }
        throw ConfigError("fuse: unknown residual combine");
    }

    Tensor condense_per_frame(Graph& g, const Tensor& v_feat, Index frames) const {
        if (frames < 1 || v_feat.rows() % frames != 0) {
            throw ShapeError("fuse: video rows " + std::to_string(v_feat.rows()) +
                             " not divisible into " + std::to_string(frames) + " frames");
        }
        const Index block = v_feat.rows() / frames;
        std::vector<Tensor> rows;
        rows.reserve(static_cast<std::size_t>(frames));
        for (Index f = 0; f < frames; ++f) {
            switch (strategy_.kind) {
                case FusionKind::ClassTokenLike:
                    rows.push_back(g.slice_rows(v_feat, f * block, 1));
                    break;
                case FusionKind::MeanPool:
                    rows.push_back(g.mean_rows(g.slice_rows(v_feat, f * block, block)));
                    break;
                case FusionKind::MaxPool:
                    rows.push_back(g.max_rows(g.slice_rows(v_feat, f * block, block)));
                    break;
                default:
                    throw ConfigError("condense_per_frame: not a pooling strategy");
            }
        }
        return rows.size() == 1 ? rows.front() : g.concat_rows(rows);
    }

    FusionStrategy strategy_;
    FusionDims dims_;
    Tensor queries_;
    AdaptPoolParams adapt_;
    std::optional<LinearParams> concat_proj_;
    std::vector<SamplerPassLayer> text_layers_;
    std::vector<SamplerPassLayer> video_layers_;
    std::vector<TransformerLayer> encoder_layers_;
};

}  // namespace multi

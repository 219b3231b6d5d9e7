#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "multi/common.hpp"
#include "multi/nn.hpp"
#include "multi/tensor.hpp"

namespace multi {

// Synthetic per-patch features, row-major [frames * patches, feature_dim].
// There is no image decoding; patch features arrive precomputed.
struct VideoInput {
    Index frames = 0;
    Index patches = 0;
    Index feature_dim = 0;
    std::vector<double> features;

    void validate() const {
        if (frames < 1 || patches < 1 || feature_dim < 1) {
            throw ContractError("VideoInput: frames, patches and feature_dim must be >= 1");
        }
        if (static_cast<Index>(features.size()) != frames * patches * feature_dim) {
            throw ShapeError("VideoInput: feature buffer length " + std::to_string(features.size()) +
                             " does not match frames*patches*dim");
        }
    }
};

// Token ids with position 0 reserved for [CLS]; pad positions are masked out.
struct TextInput {
    std::vector<Index> token_ids;
    std::vector<std::uint8_t> attention_mask;  // 1 = real token, 0 = pad

    Index length() const { return static_cast<Index>(token_ids.size()); }

    void validate() const {
        if (token_ids.empty()) {
            throw ContractError("TextInput: empty token sequence");
        }
        if (attention_mask.size() != token_ids.size()) {
            throw ShapeError("TextInput: mask length " + std::to_string(attention_mask.size()) +
                             " vs " + std::to_string(token_ids.size()) + " tokens");
        }
        if (std::find(attention_mask.begin(), attention_mask.end(), std::uint8_t{1}) ==
            attention_mask.end()) {
            throw ContractError("TextInput: all positions masked");
        }
    }
};

struct FreezePlan {
    Index frozen_video_layers = 0;
    Index frozen_text_layers = 0;
};

// Residual bottleneck adapter with a squeeze-style channel gate. The
// up-projection is zero-initialized, so a freshly attached adapter leaves the
// host encoder's outputs untouched.
struct AdapterParams {
    LinearParams down;     // d -> r
    LinearParams gate;     // r -> r, driven by the sequence-mean of the bottleneck
    LinearParams up;       // r -> d, zero init, no bias
    bool gate_enabled = true;

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const auto& lp : {down, gate, up}) {
            for (const auto& t : lp.tensors()) out.push_back(t);
        }
        return out;
    }
};

inline AdapterParams make_adapter(ParamStore& store, const std::string& name, Index d, Index r,
                                  SeededRng& rng, bool gate_enabled = true) {
    AdapterParams a;
    a.down = make_linear(store, name + ".down", d, r, rng);
    a.gate = make_linear(store, name + ".gate", r, r, rng);
    a.up.w = store.add(name + ".up.w", Tensor::zeros({r, d}));
    a.gate_enabled = gate_enabled;
    return a;
}

inline Tensor apply_adapter(Graph& g, const AdapterParams& a, const Tensor& x) {
    Tensor z = g.gelu(apply_linear(g, a.down, x, MulAddKind::Projection));
    if (a.gate_enabled) {
        Tensor pooled = g.mean_rows(z);
        Tensor s = g.sigmoid(apply_linear(g, a.gate, pooled, MulAddKind::Projection));
        z = g.mul_rowvec(z, s);
    }
    return apply_linear(g, a.up, z, MulAddKind::Projection);
}

struct EncoderLayer {
    TransformerLayer core;
    std::optional<AdapterParams> adapter;
    bool frozen = false;
};

struct EncoderStackConfig {
    Index d = 64;
    int heads = 4;
    Index layers = 4;
    Index ffn_hidden = 128;
};

namespace detail {

inline Tensor layer_forward(Graph& g, const EncoderLayer& layer, Tensor x,
                            const std::vector<std::uint8_t>& key_mask, PairKind pair_kind) {
    x = apply_transformer_layer(g, layer.core, x, key_mask, pair_kind);
    if (layer.adapter) {
        x = g.add(x, apply_adapter(g, *layer.adapter, x));
    }
    return x;
}

}  // namespace detail

// Frame-wise video transformer. Each frame's patch rows attend only within
// the frame; there is no class token, so the output has exactly
// frames*patches rows. Temporal mixing happens later via time embeddings.
class VideoEncoder {
  public:
    VideoEncoder(ParamStore& store, const std::string& name, EncoderStackConfig cfg, Index feature_dim,
                 Index max_frames, SeededRng& rng)
        : cfg_(cfg), max_frames_(max_frames) {
        patch_proj_ = make_linear(store, name + ".patch_proj", feature_dim, cfg.d, rng);
        for (Index i = 0; i < cfg.layers; ++i) {
            EncoderLayer l;
            l.core = make_transformer_layer(store, name + ".layer" + std::to_string(i), cfg.d, cfg.heads,
                                            cfg.ffn_hidden, rng);
            layers_.push_back(std::move(l));
        }
        ln_out_ = make_layer_norm(store, name + ".ln_out", cfg.d);
        time_embeddings_ = store.add(name + ".time_embeddings", Tensor::randn({max_frames, cfg.d}, rng, 0.02));
    }

    const EncoderStackConfig& config() const { return cfg_; }
    Index max_frames() const { return max_frames_; }
    std::vector<EncoderLayer>& layers() { return layers_; }
    const std::vector<EncoderLayer>& layers() const { return layers_; }
    const Tensor& time_embeddings() const { return time_embeddings_; }

    // [frames*patches, d]; frames are processed independently.
    Tensor encode(Graph& g, const VideoInput& v) const {
        v.validate();
        if (v.frames > max_frames_) {
            throw ConfigError("VideoEncoder: " + std::to_string(v.frames) +
                              " frames exceed time-embedding capacity " + std::to_string(max_frames_));
        }
        Tensor patches = Tensor::from({v.frames * v.patches, v.feature_dim}, v.features);
        Tensor x = apply_linear(g, patch_proj_, patches, MulAddKind::Projection);
        std::vector<Tensor> frame_outputs;
        frame_outputs.reserve(static_cast<std::size_t>(v.frames));
        for (Index f = 0; f < v.frames; ++f) {
            Tensor h = g.slice_rows(x, f * v.patches, v.patches);
            for (const auto& layer : layers_) {
                h = detail::layer_forward(g, layer, h, {}, PairKind::SelfAttn);
            }
            frame_outputs.push_back(apply_layer_norm(g, ln_out_, h));
        }
        return frame_outputs.size() == 1 ? frame_outputs.front() : g.concat_rows(frame_outputs);
    }

    // Adds the learnable per-frame time embedding to every patch row of the
    // corresponding frame. Applied after encoding, before fusion.
    Tensor add_time_embeddings(Graph& g, const Tensor& video_feat, Index frames) const {
        if (frames < 1 || video_feat.rows() % frames != 0) {
            throw ShapeError("add_time_embeddings: rows " + std::to_string(video_feat.rows()) +
                             " not divisible into " + std::to_string(frames) + " frames");
        }
        return g.add_frame_rows(video_feat, time_embeddings_, frames, video_feat.rows() / frames);
    }

    std::vector<Tensor> embedding_tensors() const {
        std::vector<Tensor> out = patch_proj_.tensors();
        out.push_back(time_embeddings_);
        out.push_back(ln_out_.gain);
        out.push_back(ln_out_.bias);
        return out;
    }

  private:
    EncoderStackConfig cfg_;
    Index max_frames_;
    LinearParams patch_proj_;
    std::vector<EncoderLayer> layers_;
    LayerNormParams ln_out_;
    Tensor time_embeddings_;
};

// Masked text transformer; row 0 of the output is the [CLS] state.
class TextEncoder {
  public:
    TextEncoder(ParamStore& store, const std::string& name, EncoderStackConfig cfg, Index vocab,
                Index max_positions, SeededRng& rng)
        : cfg_(cfg), vocab_(vocab), max_positions_(max_positions) {
        token_embeddings_ = store.add(name + ".token_embeddings", Tensor::randn({vocab, cfg.d}, rng, 0.02));
        position_embeddings_ =
            store.add(name + ".position_embeddings", Tensor::randn({max_positions, cfg.d}, rng, 0.02));
        for (Index i = 0; i < cfg.layers; ++i) {
            EncoderLayer l;
            l.core = make_transformer_layer(store, name + ".layer" + std::to_string(i), cfg.d, cfg.heads,
                                            cfg.ffn_hidden, rng);
            layers_.push_back(std::move(l));
        }
        ln_out_ = make_layer_norm(store, name + ".ln_out", cfg.d);
    }

    const EncoderStackConfig& config() const { return cfg_; }
    Index vocab() const { return vocab_; }
    std::vector<EncoderLayer>& layers() { return layers_; }
    const std::vector<EncoderLayer>& layers() const { return layers_; }

    // [N_t, d]; pad rows receive no attention weight from real tokens.
    Tensor encode(Graph& g, const TextInput& t) const {
        t.validate();
        if (t.length() > max_positions_) {
            throw ConfigError("TextEncoder: sequence length " + std::to_string(t.length()) +
                              " exceeds position table of " + std::to_string(max_positions_));
        }
        Tensor x = g.embedding(token_embeddings_, t.token_ids);
        std::vector<Index> positions(static_cast<std::size_t>(t.length()));
        for (Index i = 0; i < t.length(); ++i) positions[static_cast<std::size_t>(i)] = i;
        x = g.add(x, g.embedding(position_embeddings_, positions));
        for (const auto& layer : layers_) {
            x = detail::layer_forward(g, layer, x, t.attention_mask, PairKind::SelfAttn);
        }
        return apply_layer_norm(g, ln_out_, x);
    }

    std::vector<Tensor> embedding_tensors() const {
        return {token_embeddings_, position_embeddings_, ln_out_.gain, ln_out_.bias};
    }

  private:
    EncoderStackConfig cfg_;
    Index vocab_;
    Index max_positions_;
    Tensor token_embeddings_;
    Tensor position_embeddings_;
    std::vector<EncoderLayer> layers_;
    LayerNormParams ln_out_;
};

namespace detail {

template <typename Encoder>
void freeze_stack(Encoder& enc, Index frozen) {
    const Index total = static_cast<Index>(enc.layers().size());
    if (frozen < 0 || frozen > total) {
        throw ConfigError("FreezePlan: " + std::to_string(frozen) + " frozen layers of " +
                          std::to_string(total));
    }
    for (Index i = 0; i < total; ++i) {
        auto& layer = enc.layers()[static_cast<std::size_t>(i)];
        layer.frozen = i < frozen;
        set_trainable(layer.core.tensors(), !layer.frozen);
    }
    // Embedding tables freeze only when the whole stack does.
    set_trainable(enc.embedding_tensors(), frozen != total);
}

}  // namespace detail

// Bottom-up contiguous freezing; frozen parameters receive no gradient and
// the embedding tables freeze with the full stack.
inline void apply_freeze_plan(VideoEncoder& video, TextEncoder& text, const FreezePlan& plan) {
    detail::freeze_stack(video, plan.frozen_video_layers);
    detail::freeze_stack(text, plan.frozen_text_layers);
}

// Inserts adapters after the FFN of the given (frozen) layers. Only the
// adapter parameters are trainable at those sites; zero-initialized
// up-projections keep the forward pass unchanged at attach time.
template <typename Encoder>
void attach_adapters(Encoder& enc, ParamStore& store, const std::string& name,
                     const std::vector<Index>& sites, Index bottleneck, SeededRng& rng,
                     bool gate_enabled = true) {
    const Index total = static_cast<Index>(enc.layers().size());
    for (Index site : sites) {
        if (site < 0 || site >= total) {
            throw ConfigError("attach_adapters: site " + std::to_string(site) + " outside of " +
                              std::to_string(total) + " layers");
        }
        auto& layer = enc.layers()[static_cast<std::size_t>(site)];
        if (!layer.frozen) {
            throw ConfigError("attach_adapters: layer " + std::to_string(site) +
                              " is trainable; adapters belong in the frozen region");
        }
        layer.adapter = make_adapter(store, name + ".layer" + std::to_string(site) + ".adapter",
                                     enc.config().d, bottleneck, rng, gate_enabled);
    }
}

}  // namespace multi

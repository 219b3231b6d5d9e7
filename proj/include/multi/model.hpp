#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "multi/common.hpp"
#include "multi/encoders.hpp"
#include "multi/nn.hpp"
#include "multi/objectives.hpp"
#include "multi/sampler.hpp"
#include "multi/synthetic.hpp"
#include "multi/tokenizer.hpp"

namespace multi {

struct LossToggles {
    bool mlm = true;
    bool vtc = true;
    bool vtm = true;
    bool mcm = true;

    bool any() const { return mlm || vtc || vtm || mcm; }
};

struct ModelConfig {
    Index d = 64;
    int heads = 4;
    Index video_layers = 4;
    Index text_layers = 4;
    Index ffn_hidden = 128;
    Index vocab = 256;
    Index max_positions = 128;
    Index max_frames = 16;
    Index feature_dim = 64;
    double vtc_temperature = 0.05;
    double mlm_probability = 0.15;
    FusionStrategy fusion;
    std::uint64_t init_seed = 1;

    EncoderStackConfig video_stack() const { return {d, heads, video_layers, ffn_hidden}; }
    EncoderStackConfig text_stack() const { return {d, heads, text_layers, ffn_hidden}; }
};

// The full video-language model: a frame-wise video encoder, a masked text
// encoder, the configured fusion module, and one head per pretraining loss.
class Model {
  public:
    explicit Model(const ModelConfig& cfg)
        : cfg_(cfg), tokenizer_(cfg.vocab), init_rng_(cfg.init_seed) {
        video_ = std::make_unique<VideoEncoder>(store_, "video", cfg.video_stack(), cfg.feature_dim,
                                                cfg.max_frames, init_rng_);
        text_ = std::make_unique<TextEncoder>(store_, "text", cfg.text_stack(), cfg.vocab,
                                              cfg.max_positions, init_rng_);
        fusion_ = std::make_unique<FusionModule>(store_, "fusion", cfg.fusion,
                                                 FusionDims{cfg.d, cfg.heads, cfg.ffn_hidden}, init_rng_);
        mlm_head_ = make_mlm_head(store_, "mlm_head", cfg.d, cfg.vocab, init_rng_);
        vtm_head_ = make_linear(store_, "vtm_head", cfg.d, 2, init_rng_);
        mcm_head_ = make_linear(store_, "mcm_head", cfg.d, 4, init_rng_);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    VideoEncoder& video_encoder() { return *video_; }
    TextEncoder& text_encoder() { return *text_; }
    FusionModule& fusion() { return *fusion_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    const LinearParams& mcm_head() const { return mcm_head_; }
    const MlmHead& mlm_head() const { return mlm_head_; }

    // Encoded video with time embeddings added, flattened to [(N_v*K), d].
    Tensor video_features(Graph& g, const VideoInput& v) const {
        return video_->add_time_embeddings(g, video_->encode(g, v), v.frames);
    }

    Tensor text_features(Graph& g, const TextInput& t) const { return text_->encode(g, t); }

    Tensor fuse(Graph& g, const Tensor& v_feat, const Tensor& t_feat, Index frames) const {
        return fusion_->fuse(g, v_feat, t_feat, frames);
    }

    // Contrastive towers: mean of the condensed video states and the text
    // [CLS] state, both L2-normalized.
    Tensor video_representation(Graph& g, const Tensor& v_feat, Index frames) const {
        return g.l2_normalize_rows(g.mean_rows(fusion_->condense_video(g, v_feat, frames)));
    }

    Tensor text_representation(Graph& g, const Tensor& t_feat) const {
        return g.l2_normalize_rows(g.slice_rows(t_feat, 0, 1));
    }

    TextInput prompt_input(const McmPrompt& prompt) const {
        TextInput t;
        t.token_ids = tokenizer_.encode(prompt.rendered);
        t.attention_mask.assign(t.token_ids.size(), 1);
        return t;
    }

    // One pretraining step's losses over a batch (Eq.-style unit-weight sum
    // of the enabled objectives).
    LossBundle pretrain_losses(Graph& g, const PretrainBatch& batch,
                               const std::vector<std::string>& answer_corpus,
                               const std::vector<std::string>& question_pool, SeededRng& rng,
                               const LossToggles& toggles = {}) const {
        if (!toggles.any()) {
            throw ContractError("pretrain_losses: at least one loss must be enabled");
        }
        const Index b = batch.size();
        if (b < 2) {
            throw ContractError("pretrain_losses: batch size must be >= 2");
        }

        std::vector<Tensor> v_feats, t_feats;
        v_feats.reserve(static_cast<std::size_t>(b));
        t_feats.reserve(static_cast<std::size_t>(b));
        for (const auto& item : batch.items) {
            v_feats.push_back(video_features(g, item.video));
            t_feats.push_back(text_features(g, item.text));
        }

        Tensor l_mlm, l_vtc, l_vtm, l_mcm;

        if (toggles.vtc) {
            std::vector<Tensor> v_reps, t_reps;
            for (Index i = 0; i < b; ++i) {
                const auto& item = batch.items[static_cast<std::size_t>(i)];
                v_reps.push_back(g.mean_rows(fusion_->condense_video(g, v_feats[static_cast<std::size_t>(i)],
                                                                     item.video.frames)));
                t_reps.push_back(g.slice_rows(t_feats[static_cast<std::size_t>(i)], 0, 1));
            }
            Tensor v = g.l2_normalize_rows(g.concat_rows(v_reps));
            Tensor t = g.l2_normalize_rows(g.concat_rows(t_reps));
            l_vtc = vtc_loss(g, v, t, cfg_.vtc_temperature);
        }

        if (toggles.mlm) {
            std::vector<Tensor> rows;
            std::vector<Index> targets;
            for (Index i = 0; i < b; ++i) {
                const auto& item = batch.items[static_cast<std::size_t>(i)];
                MaskedText masked = mlm_mask(item.text, rng, cfg_.mlm_probability, Tokenizer::kMask);
                if (masked.positions.empty()) {
                    continue;
                }
                Tensor t_m = text_features(g, masked.masked);
                Tensor fused_m = fuse(g, v_feats[static_cast<std::size_t>(i)], t_m, item.video.frames);
                std::vector<Tensor> states;
                for (Index pos : masked.positions) {
                    states.push_back(g.slice_rows(t_m, pos, 1));
                }
                Tensor stacked = states.size() == 1 ? states.front() : g.concat_rows(states);
                Tensor ctx = apply_linear(g, mlm_head_.context, g.mean_rows(fused_m), MulAddKind::Projection);
                rows.push_back(g.add_rowvec(stacked, ctx));
                targets.insert(targets.end(), masked.target_ids.begin(), masked.target_ids.end());
            }
            if (rows.empty()) {
                l_mlm = Tensor::zeros({1, 1});
            } else {
                Tensor logits = apply_linear(g, mlm_head_.vocab,
                                             rows.size() == 1 ? rows.front() : g.concat_rows(rows),
                                             MulAddKind::Projection);
                l_mlm = g.cross_entropy_logits(logits, targets);
            }
        }

        if (toggles.vtm) {
            const Index rot = rng.uniform_int(1, b);  // in-batch shuffle, never identity
            std::vector<Tensor> fused;
            std::vector<Index> labels;
            for (Index i = 0; i < b; ++i) {
                const auto& item = batch.items[static_cast<std::size_t>(i)];
                fused.push_back(fuse(g, v_feats[static_cast<std::size_t>(i)],
                                     t_feats[static_cast<std::size_t>(i)], item.video.frames));
                labels.push_back(1);
                fused.push_back(fuse(g, v_feats[static_cast<std::size_t>(i)],
                                     t_feats[static_cast<std::size_t>((i + rot) % b)], item.video.frames));
                labels.push_back(0);
            }
            l_vtm = vtm_loss(g, vtm_head_, fused, labels);
        }

        if (toggles.mcm) {
            std::vector<Tensor> pooled;
            std::vector<Index> correct;
            for (Index i = 0; i < b; ++i) {
                const auto& item = batch.items[static_cast<std::size_t>(i)];
                const std::string& question = question_pool[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<Index>(question_pool.size())))];
                McmPrompt prompt = build_mcm_prompt(question, item.caption, answer_corpus, rng);
                Tensor t_p = text_features(g, prompt_input(prompt));
                Tensor fused_p = fuse(g, v_feats[static_cast<std::size_t>(i)], t_p, item.video.frames);
                pooled.push_back(g.mean_rows(fused_p));
                correct.push_back(prompt.correct_option);
            }
            Tensor logits =
                apply_linear(g, mcm_head_, g.concat_rows(pooled), MulAddKind::Projection);
            l_mcm = g.cross_entropy_logits(logits, correct);
        }

        return total_loss(g, l_mlm, l_vtc, l_vtm, l_mcm);
    }

    // Argmax option for one prompt against one video (no-grad path).
    Index mcm_predict_option(const SyntheticPair& item, const McmPrompt& prompt) const {
        Graph g(false);
        Tensor v_feat = video_features(g, item.video);
        Tensor t_p = text_features(g, prompt_input(prompt));
        Tensor fused = fuse(g, v_feat, t_p, item.video.frames);
        return mcm_predict(g, mcm_head_, fused);
    }

  private:
    ModelConfig cfg_;
    Tokenizer tokenizer_;
    SeededRng init_rng_;
    ParamStore store_;
    std::unique_ptr<VideoEncoder> video_;
    std::unique_ptr<TextEncoder> text_;
    std::unique_ptr<FusionModule> fusion_;
    MlmHead mlm_head_;
    LinearParams vtm_head_;
    LinearParams mcm_head_;
};

}  // namespace multi

#pragma once

#include <array>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "multi/common.hpp"
#include "multi/encoders.hpp"
#include "multi/nn.hpp"
#include "multi/tensor.hpp"

namespace multi {

// ---- masked language modeling ----

struct MaskedText {
    TextInput masked;
    std::vector<Index> positions;   // masked positions
    std::vector<Index> target_ids;  // original ids at those positions
};

// Independently selects each eligible token with probability `p` and
// replaces it with [MASK]. [CLS] (position 0) and pad positions are never
// selected. Zero selections is a valid outcome.
inline MaskedText mlm_mask(const TextInput& t, SeededRng& rng, double p = 0.15, Index mask_id = 3) {
    t.validate();
    MaskedText out;
    out.masked = t;
    for (Index i = 1; i < t.length(); ++i) {
        if (!t.attention_mask[static_cast<std::size_t>(i)]) {
            continue;
        }
        if (rng.uniform() < p) {
            out.positions.push_back(i);
            out.target_ids.push_back(t.token_ids[static_cast<std::size_t>(i)]);
            out.masked.token_ids[static_cast<std::size_t>(i)] = mask_id;
        }
    }
    return out;
}

// ---- loss heads ----

struct MlmHead {
    LinearParams context;  // d -> d, projects pooled fused states
    LinearParams vocab;    // d -> V
};

inline MlmHead make_mlm_head(ParamStore& store, const std::string& name, Index d, Index vocab,
                             SeededRng& rng) {
    MlmHead h;
    h.context = make_linear(store, name + ".context", d, d, rng);
    h.vocab = make_linear(store, name + ".vocab", d, vocab, rng);
    return h;
}

// Vocabulary cross-entropy at the masked positions. Text states come from
// the encoder pass over the masked text; the fused states supply video
// context, projected and broadcast onto each masked position's state.
inline Tensor mlm_loss(Graph& g, const MlmHead& head, const Tensor& text_states, const Tensor& fused,
                       const std::vector<Index>& positions, const std::vector<Index>& target_ids) {
    if (positions.size() != target_ids.size()) {
        throw ContractError("mlm_loss: positions/targets length mismatch");
    }
    if (positions.empty()) {
        return Tensor::zeros({1, 1});
    }
    std::vector<Tensor> rows;
    rows.reserve(positions.size());
    for (Index pos : positions) {
        rows.push_back(g.slice_rows(text_states, pos, 1));
    }
    Tensor states = rows.size() == 1 ? rows.front() : g.concat_rows(rows);
    Tensor ctx = apply_linear(g, head.context, g.mean_rows(fused), MulAddKind::Projection);
    states = g.add_rowvec(states, ctx);
    Tensor logits = apply_linear(g, head.vocab, states, MulAddKind::Projection);
    return g.cross_entropy_logits(logits, target_ids);
}

// Symmetric InfoNCE over the batch similarity matrix; diagonal entries are
// the positives. Representations must arrive L2-normalized.
inline Tensor vtc_loss(Graph& g, const Tensor& video_repr, const Tensor& text_repr, double temperature) {
    if (video_repr.rows() < 2) {
        throw ContractError("vtc_loss: needs at least two pairs for in-batch negatives");
    }
    if (video_repr.rows() != text_repr.rows() || video_repr.cols() != text_repr.cols()) {
        throw ShapeError("vtc_loss: representation shapes differ");
    }
    if (temperature <= 0.0) {
        throw ContractError("vtc_loss: temperature must be > 0");
    }
    const Index b = video_repr.rows();
    Tensor sim = g.scale(g.matmul(video_repr, g.transpose(text_repr), MulAddKind::Projection),
                         1.0 / temperature);
    std::vector<Index> diag(static_cast<std::size_t>(b));
    for (Index i = 0; i < b; ++i) diag[static_cast<std::size_t>(i)] = i;
    Tensor v2t = g.cross_entropy_logits(sim, diag);
    Tensor t2v = g.cross_entropy_logits(g.transpose(sim), diag);
    return g.scale(g.add(v2t, t2v), 0.5);
}

// Binary match/mismatch head over mean-pooled fused states.
inline Tensor vtm_loss(Graph& g, const LinearParams& head, std::span<const Tensor> fused,
                       std::span<const Index> labels) {
    if (fused.empty() || fused.size() != labels.size()) {
        throw ContractError("vtm_loss: fused states and labels must pair up");
    }
    std::vector<Tensor> pooled;
    pooled.reserve(fused.size());
    for (const auto& f : fused) {
        pooled.push_back(g.mean_rows(f));
    }
    Tensor stack = pooled.size() == 1 ? pooled.front() : g.concat_rows(pooled);
    Tensor logits = apply_linear(g, head, stack, MulAddKind::Projection);
    return g.cross_entropy_logits(logits, std::vector<Index>(labels.begin(), labels.end()));
}

// ---- multiple choice modeling ----

struct McmPrompt {
    std::string question;
    std::array<std::string, 4> option_texts;
    Index correct_option = 0;
    std::string rendered;
};

// The exact four-option template; rendered byte-for-byte, including the
// literal " ?" after the question.
inline std::string render_mcm_prompt(const std::string& question,
                                     const std::array<std::string, 4>& options) {
    std::string out = "[CLS]" + question + " ?";
    for (int i = 0; i < 4; ++i) {
        out += " [SEP] Option " + std::to_string(i + 1) + ": " + options[static_cast<std::size_t>(i)] + ".";
    }
    return out;
}

inline const std::vector<std::string>& default_question_pool() {
    static const std::vector<std::string> pool{
        "What does this picture describe?",
        "What does this video describe?",
    };
    return pool;
}

// Places the correct caption in a uniformly random slot and fills the rest
// with distinct corpus distractors drawn without replacement.
inline McmPrompt build_mcm_prompt(const std::string& question, const std::string& correct,
                                  const std::vector<std::string>& corpus, SeededRng& rng) {
    std::vector<const std::string*> candidates;
    for (const auto& entry : corpus) {
        if (entry != correct) {
            candidates.push_back(&entry);
        }
    }
    if (candidates.size() < 3) {
        throw DataError("build_mcm_prompt: need at least 3 corpus entries distinct from the answer");
    }
    McmPrompt prompt;
    prompt.question = question;
    prompt.correct_option = rng.uniform_int(0, 4);
    std::array<const std::string*, 3> picked{};
    for (int i = 0; i < 3; ++i) {
        const Index j = rng.uniform_int(0, static_cast<Index>(candidates.size()) - i);
        std::swap(candidates[static_cast<std::size_t>(i) ],
                  candidates[static_cast<std::size_t>(i + j)]);
        picked[static_cast<std::size_t>(i)] = candidates[static_cast<std::size_t>(i)];
    }
    int di = 0;
    for (Index slot = 0; slot < 4; ++slot) {
        prompt.option_texts[static_cast<std::size_t>(slot)] =
            (slot == prompt.correct_option) ? correct : *picked[static_cast<std::size_t>(di++)];
    }
    prompt.rendered = render_mcm_prompt(question, prompt.option_texts);
    return prompt;
}

// Four-way option head over mean-pooled fused states.
inline Tensor mcm_loss(Graph& g, const LinearParams& head, const Tensor& fused, Index correct_option) {
    Tensor logits = apply_linear(g, head, g.mean_rows(fused), MulAddKind::Projection);
    return g.cross_entropy_logits(logits, {correct_option});
}

inline Index mcm_predict(Graph& g, const LinearParams& head, const Tensor& fused) {
    Tensor logits = apply_linear(g, head, g.mean_rows(fused), MulAddKind::Projection);
    Index best = 0;
    for (Index j = 1; j < logits.cols(); ++j) {
        // ties break toward the lowest option index
        if (logits.at(0, j) > logits.at(0, best)) {
            best = j;
        }
    }
    return best;
}

// ---- combined objective ----

struct LossBundle {
    Tensor mlm, vtc, vtm, mcm;
    Tensor total;
};

// Unit-weight sum of the enabled losses. Disabled losses stay undefined and
// contribute nothing.
inline LossBundle total_loss(Graph& g, Tensor mlm, Tensor vtc, Tensor vtm, Tensor mcm) {
    LossBundle b;
    b.mlm = std::move(mlm);
    b.vtc = std::move(vtc);
    b.vtm = std::move(vtm);
    b.mcm = std::move(mcm);
    for (const Tensor* t : {&b.mlm, &b.vtc, &b.vtm, &b.mcm}) {
        if (!t->defined()) {
            continue;
        }
        b.total = b.total.defined() ? g.add(b.total, *t) : *t;
    }
    if (!b.total.defined()) {
        throw ContractError("total_loss: at least one loss must be enabled");
    }
    return b;
}

inline std::vector<std::string> load_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            lines.push_back(line);
        }
    }
    return lines;
}

}  // namespace multi

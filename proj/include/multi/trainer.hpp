#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "multi/common.hpp"
#include "multi/model.hpp"
#include "multi/optimizer.hpp"
#include "multi/synthetic.hpp"

namespace multi {

struct AdapterConfig {
    bool enabled = false;
    std::vector<Index> video_sites;
    std::vector<Index> text_sites;
    Index bottleneck = 16;
    bool attention_gate = true;
};

struct OptimConfig {
    double lr = 3e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double warmup_fraction = 0.1;
};

struct TrainConfig {
    std::uint64_t seed = 7;
    Index steps = 300;
    Index batch_size = 32;
    Index eval_every = 0;  // 0 = evaluate only at init and at the end
    Index eval_pool = 100;
    Index eval_prompts = 200;
    Index corpus_size = 256;
    LossToggles losses;
    ModelConfig model;
    WorldSpec world;
    FreezePlan freeze;
    AdapterConfig adapter;
    OptimConfig optim;
    std::string out_dir;

    void validate() const {
        if (!losses.any()) {
            throw ConfigError("TrainConfig: at least one loss must be enabled");
        }
        if (steps < 0 || batch_size < 2) {
            throw ConfigError("TrainConfig: need steps >= 0 and batch_size >= 2");
        }
        if (world.vocab != model.vocab || world.feature_dim != model.feature_dim ||
            world.frames > model.max_frames) {
            throw ConfigError("TrainConfig: world and model dimensions disagree");
        }
    }
};

struct StepMetrics {
    Index step = 0;
    double mlm = std::nan("");
    double vtc = std::nan("");
    double vtm = std::nan("");
    double mcm = std::nan("");
    double total = 0.0;
};

struct RetrievalMetrics {
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;  // percentages
    double g_mean = 0.0;
};

struct EvalRecord {
    Index step = 0;
    RetrievalMetrics retrieval;
    double mcm_accuracy = 0.0;
};

// Geometric mean of the three recalls; symmetric and idempotent on equal
// arguments.
inline double g_mean(double r1, double r5, double r10) {
    return std::cbrt(r1 * r5 * r10);
}

// Text-to-video retrieval by contrastive similarity over a fixed pool. Ties
// break toward the lower item index.
inline RetrievalMetrics evaluate_retrieval(const Model& model, const std::vector<SyntheticPair>& pool) {
    const Index e = static_cast<Index>(pool.size());
    if (e < 10) {
        throw ContractError("evaluate_retrieval: pool must hold at least 10 items");
    }
    const Index d = model.config().d;
    std::vector<double> v_reps(static_cast<std::size_t>(e * d));
    std::vector<double> t_reps(static_cast<std::size_t>(e * d));
    for (Index i = 0; i < e; ++i) {
        Graph g(false);
        const auto& item = pool[static_cast<std::size_t>(i)];
        Tensor v = model.video_representation(g, model.video_features(g, item.video), item.video.frames);
        Tensor t = model.text_representation(g, model.text_features(g, item.text));
        std::copy_n(v.data().begin(), d, v_reps.begin() + i * d);
        std::copy_n(t.data().begin(), d, t_reps.begin() + i * d);
    }
    Index hit1 = 0, hit5 = 0, hit10 = 0;
    for (Index q = 0; q < e; ++q) {
        const double self_score = std::inner_product(t_reps.begin() + q * d, t_reps.begin() + (q + 1) * d,
                                                     v_reps.begin() + q * d, 0.0);
        Index rank = 1;
        for (Index j = 0; j < e; ++j) {
            if (j == q) {
                continue;
            }
            const double s = std::inner_product(t_reps.begin() + q * d, t_reps.begin() + (q + 1) * d,
                                                v_reps.begin() + j * d, 0.0);
            if (s > self_score || (s == self_score && j < q)) {
                ++rank;
            }
        }
        hit1 += rank <= 1;
        hit5 += rank <= 5;
        hit10 += rank <= 10;
    }
    RetrievalMetrics m;
    m.r1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(e);
    m.r5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(e);
    m.r10 = 100.0 * static_cast<double>(hit10) / static_cast<double>(e);
    m.g_mean = g_mean(m.r1, m.r5, m.r10);
    return m;
}

// Four-choice accuracy over seeded prompts built from the pool's captions.
inline double evaluate_mcm(const Model& model, const std::vector<SyntheticPair>& pool,
                           const std::vector<std::string>& answer_corpus,
                           const std::vector<std::string>& question_pool, std::uint64_t seed,
                           Index num_prompts) {
    if (num_prompts < 100) {
        throw ContractError("evaluate_mcm: need at least 100 prompts");
    }
    if (pool.empty()) {
        throw ContractError("evaluate_mcm: empty pool");
    }
    SeededRng rng(seed);
    Index correct = 0;
    for (Index i = 0; i < num_prompts; ++i) {
        const auto& item = pool[static_cast<std::size_t>(i % static_cast<Index>(pool.size()))];
        const std::string& question =
            question_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<Index>(question_pool.size())))];
        McmPrompt prompt = build_mcm_prompt(question, item.caption, answer_corpus, rng);
        if (model.mcm_predict_option(item, prompt) == prompt.correct_option) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(num_prompts);
}

// ---- checkpointing ----

// manifest.json lists name+shape in registry order; params.bin holds the
// raw little-endian 64-bit floats in the same order.
inline void save_checkpoint(const Model& model, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "multi-checkpoint-v1";
    manifest["params"] = nlohmann::json::array();
    std::ofstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) {
        throw IoError("cannot write " + dir + "/params.bin");
    }
    for (const auto& p : model.params().all()) {
        nlohmann::json entry;
        entry["name"] = p.name();
        entry["shape"] = p.shape();
        manifest["params"].push_back(entry);
        bin.write(reinterpret_cast<const char*>(p.data().data()),
                  static_cast<std::streamsize>(p.data().size() * sizeof(double)));
    }
    std::ofstream mf(dir + "/manifest.json");
    if (!mf) {
        throw IoError("cannot write " + dir + "/manifest.json");
    }
    mf << manifest.dump(2) << '\n';
}

inline void load_checkpoint(Model& model, const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) {
        throw IoError("cannot open " + dir + "/manifest.json");
    }
    nlohmann::json manifest = nlohmann::json::parse(mf);
    const auto& params = model.params().all();
    if (manifest.at("params").size() != params.size()) {
        throw DataError("checkpoint manifest lists " + std::to_string(manifest.at("params").size()) +
                        " params, model has " + std::to_string(params.size()));
    }
    std::ifstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) {
        throw IoError("cannot open " + dir + "/params.bin");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = manifest["params"][i];
        if (entry.at("name").get<std::string>() != params[i].name() ||
            entry.at("shape").get<std::vector<Index>>() != params[i].shape()) {
            throw DataError("checkpoint entry " + std::to_string(i) + " does not match parameter '" +
                            params[i].name() + "'");
        }
        bin.read(reinterpret_cast<char*>(params[i].data().data()),
                 static_cast<std::streamsize>(params[i].data().size() * sizeof(double)));
        if (!bin) {
            throw DataError("checkpoint params.bin truncated at '" + params[i].name() + "'");
        }
    }
}

// ---- training loop ----

struct TrainResult {
    std::vector<StepMetrics> steps;
    std::vector<EvalRecord> evals;
    std::unique_ptr<Model> model;
    std::unique_ptr<SyntheticWorld> world;
    std::vector<std::string> answer_corpus;
    std::vector<SyntheticPair> eval_pool;
};

namespace detail {

inline nlohmann::json step_json(const StepMetrics& s) {
    nlohmann::json j;
    j["step"] = s.step;
    if (!std::isnan(s.mlm)) j["l_mlm"] = s.mlm;
    if (!std::isnan(s.vtc)) j["l_vtc"] = s.vtc;
    if (!std::isnan(s.vtm)) j["l_vtm"] = s.vtm;
    if (!std::isnan(s.mcm)) j["l_mcm"] = s.mcm;
    j["total"] = s.total;
    return j;
}

inline nlohmann::json eval_json(const EvalRecord& e) {
    nlohmann::json j;
    j["step"] = e.step;
    j["eval"] = true;
    j["r1"] = e.retrieval.r1;
    j["r5"] = e.retrieval.r5;
    j["r10"] = e.retrieval.r10;
    j["g_mean"] = e.retrieval.g_mean;
    j["mcm_accuracy"] = e.mcm_accuracy;
    return j;
}

}  // namespace detail

// Deterministic under the config seed: data, masking, negatives and prompt
// construction all derive from it. Emits one newline-delimited JSON record
// per step plus eval records; checkpoints to out_dir when set.
inline TrainResult train(const TrainConfig& cfg, std::ostream* metrics_out = nullptr,
                         std::ostream* log = nullptr) {
    cfg.validate();
    TrainResult result;
    result.model = std::make_unique<Model>(cfg.model);
    Model& model = *result.model;

    apply_freeze_plan(model.video_encoder(), model.text_encoder(), cfg.freeze);
    if (cfg.adapter.enabled) {
        SeededRng adapter_rng(mix_seed(cfg.seed, 0xADA7));
        attach_adapters(model.video_encoder(), model.params(), "video", cfg.adapter.video_sites,
                        cfg.adapter.bottleneck, adapter_rng, cfg.adapter.attention_gate);
        attach_adapters(model.text_encoder(), model.params(), "text", cfg.adapter.text_sites,
                        cfg.adapter.bottleneck, adapter_rng, cfg.adapter.attention_gate);
    }

    result.world = std::make_unique<SyntheticWorld>(cfg.world);
    const SyntheticWorld& world = *result.world;

    PretrainBatch corpus_batch = world.generate_batch(std::max<Index>(cfg.corpus_size, 4),
                                                      mix_seed(cfg.seed, 0xC0B9), 1'000'000);
    result.answer_corpus = build_answer_corpus(corpus_batch.items);
    result.eval_pool = world.generate_batch(cfg.eval_pool, mix_seed(cfg.seed, 0xE7A1), 2'000'000).items;

    std::optional<std::ofstream> metrics_file;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        metrics_file.emplace(cfg.out_dir + "/metrics.ndjson");
        if (!*metrics_file) {
            throw IoError("cannot write " + cfg.out_dir + "/metrics.ndjson");
        }
    }
    auto emit = [&](const nlohmann::json& j) {
        if (metrics_out) *metrics_out << j.dump() << '\n';
        if (metrics_file) *metrics_file << j.dump() << '\n';
    };

    auto run_eval = [&](Index step) {
        EvalRecord rec;
        rec.step = step;
        rec.retrieval = evaluate_retrieval(model, result.eval_pool);
        rec.mcm_accuracy = evaluate_mcm(model, result.eval_pool, result.answer_corpus,
                                        default_question_pool(), mix_seed(cfg.seed, 0xE7A2),
                                        cfg.eval_prompts);
        result.evals.push_back(rec);
        emit(detail::eval_json(rec));
        if (log) {
            *log << "step " << step << " eval: R@1 " << rec.retrieval.r1 << " R@5 " << rec.retrieval.r5
                 << " R@10 " << rec.retrieval.r10 << " G-Mean " << rec.retrieval.g_mean << " MCM "
                 << rec.mcm_accuracy << "\n";
        }
    };

    run_eval(0);

    OptimState optim;
    optim.lr = cfg.optim.lr;
    optim.beta1 = cfg.optim.beta1;
    optim.beta2 = cfg.optim.beta2;
    optim.eps = cfg.optim.eps;
    optim.weight_decay = cfg.optim.weight_decay;
    Schedule schedule;
    schedule.total_steps = std::max<Index>(cfg.steps, 1);
    schedule.warmup_steps = static_cast<Index>(cfg.optim.warmup_fraction * static_cast<double>(cfg.steps));
    schedule.base_lr = cfg.optim.lr;

    for (Index step = 0; step < cfg.steps; ++step) {
        PretrainBatch batch =
            world.generate_batch(cfg.batch_size, mix_seed(cfg.seed, 0x7A11), step * cfg.batch_size);
        SeededRng step_rng(mix_seed(cfg.seed, 0x57E0 + static_cast<std::uint64_t>(step)));
        Graph g;
        LossBundle bundle;
        try {
            bundle = model.pretrain_losses(g, batch, result.answer_corpus, default_question_pool(),
                                           step_rng, cfg.losses);
        } catch (const NumericError& e) {
            throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
        }

        StepMetrics sm;
        sm.step = step;
        if (bundle.mlm.defined()) sm.mlm = bundle.mlm.item();
        if (bundle.vtc.defined()) sm.vtc = bundle.vtc.item();
        if (bundle.vtm.defined()) sm.vtm = bundle.vtm.item();
        if (bundle.mcm.defined()) sm.mcm = bundle.mcm.item();
        sm.total = bundle.total.item();
        result.steps.push_back(sm);
        emit(detail::step_json(sm));
        if (log && (step % 25 == 0 || step + 1 == cfg.steps)) {
            *log << "step " << step << " total " << sm.total << "\n";
        }

        model.params().zero_grad();
        g.backward(bundle.total);
        optim.lr = schedule.lr_at(step);
        adamw_step(model.params().all(), optim);

        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) {
            run_eval(step + 1);
        }
    }

    if (cfg.steps > 0) {
        run_eval(cfg.steps);
    }
    if (!cfg.out_dir.empty()) {
        save_checkpoint(model, cfg.out_dir + "/checkpoint");
    }
    return result;
}

}  // namespace multi

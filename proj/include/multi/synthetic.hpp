#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "multi/common.hpp"
#include "multi/encoders.hpp"
#include "multi/tokenizer.hpp"

namespace multi {

// Generator settings for the aligned toy video-text world. Topics plant the
// recoverable signal: disjoint per-topic caption vocabularies and separated
// patch-feature cluster centers. The caption's bag-of-words also leaves a
// (noise-scaled) imprint on the patch features, so retrieval has a per-item
// signal beyond the topic.
struct WorldSpec {
    Index topics = 8;
    Index vocab = 256;
    Index caption_min = 6;
    Index caption_max = 12;
    Index frames = 4;
    Index patches = 16;
    Index feature_dim = 64;
    double noise = 0.5;
    double caption_imprint = 1.5;  // bag-of-words coefficient, in units of noise
    std::uint64_t world_seed = 42;

    void validate() const {
        if (topics < 2 || vocab < Tokenizer::caption_word_start() + topics || caption_min < 1 ||
            caption_max < caption_min || frames < 1 || patches < 1 || feature_dim < topics ||
            noise < 0.0) {
            throw ConfigError("WorldSpec: invalid generator settings");
        }
    }
};

struct SyntheticPair {
    Index id = 0;
    Index topic = 0;
    VideoInput video;
    TextInput text;
    std::string caption;
};

struct PretrainBatch {
    std::vector<SyntheticPair> items;

    Index size() const { return static_cast<Index>(items.size()); }
};

class SyntheticWorld {
  public:
    explicit SyntheticWorld(WorldSpec spec) : spec_(spec) {
        spec_.validate();
        SeededRng rng(spec_.world_seed);
        const Index d = spec_.feature_dim;
        const Index t = spec_.topics;

        // Cluster centers live on disjoint coordinate blocks with random
        // signs; pairwise distance is 2*sqrt(block) >= 4*noise for the
        // default settings.
        centers_.assign(static_cast<std::size_t>(t * d), 0.0);
        const Index block = d / t;
        for (Index topic = 0; topic < t; ++topic) {
            for (Index j = topic * block; j < (topic + 1) * block; ++j) {
                centers_[static_cast<std::size_t>(topic * d + j)] = rng.uniform() < 0.5 ? -1.0 : 1.0;
            }
        }

        // Unit direction per vocabulary word for the caption imprint.
        token_dirs_.assign(static_cast<std::size_t>(spec_.vocab * d), 0.0);
        for (Index w = 0; w < spec_.vocab; ++w) {
            double norm = 0.0;
            for (Index j = 0; j < d; ++j) {
                const double v = rng.normal();
                token_dirs_[static_cast<std::size_t>(w * d + j)] = v;
                norm += v * v;
            }
            norm = std::sqrt(norm);
            for (Index j = 0; j < d; ++j) {
                token_dirs_[static_cast<std::size_t>(w * d + j)] /= norm;
            }
        }

        // Disjoint per-topic word ranges: total-variation distance 1 by
        // construction.
        const Index first = Tokenizer::caption_word_start();
        const Index per_topic = (spec_.vocab - first) / t;
        if (per_topic < 1) {
            throw ConfigError("WorldSpec: vocabulary too small for the topic count");
        }
        for (Index topic = 0; topic < t; ++topic) {
            std::vector<Index> words;
            for (Index w = first + topic * per_topic; w < first + (topic + 1) * per_topic; ++w) {
                words.push_back(w);
            }
            topic_words_.push_back(std::move(words));
        }
    }

    const WorldSpec& spec() const { return spec_; }
    const std::vector<std::vector<Index>>& topic_words() const { return topic_words_; }

    double center_at(Index topic, Index j) const {
        return centers_[static_cast<std::size_t>(topic * spec_.feature_dim + j)];
    }

    SyntheticPair generate_pair(SeededRng& rng) const {
        SyntheticPair pair;
        pair.topic = rng.uniform_int(0, spec_.topics);

        const auto& words = topic_words_[static_cast<std::size_t>(pair.topic)];
        const Index len = rng.uniform_int(spec_.caption_min, spec_.caption_max + 1);
        std::vector<Index> caption_ids;
        caption_ids.reserve(static_cast<std::size_t>(len));
        for (Index i = 0; i < len; ++i) {
            caption_ids.push_back(words[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<Index>(words.size())))]);
        }
        for (std::size_t i = 0; i < caption_ids.size(); ++i) {
            if (i) pair.caption += ' ';
            pair.caption += Tokenizer::caption_word(caption_ids[i]);
        }
        pair.text.token_ids.push_back(Tokenizer::kCls);
        for (Index id : caption_ids) pair.text.token_ids.push_back(id);
        pair.text.token_ids.push_back(Tokenizer::kSep);
        pair.text.attention_mask.assign(pair.text.token_ids.size(), 1);

        const Index d = spec_.feature_dim;
        std::vector<double> imprint(static_cast<std::size_t>(d), 0.0);
        for (Index id : caption_ids) {
            for (Index j = 0; j < d; ++j) {
                imprint[static_cast<std::size_t>(j)] += token_dirs_[static_cast<std::size_t>(id * d + j)];
            }
        }
        const double imprint_scale =
            spec_.noise * spec_.caption_imprint / static_cast<double>(caption_ids.size());

        pair.video.frames = spec_.frames;
        pair.video.patches = spec_.patches;
        pair.video.feature_dim = d;
        pair.video.features.resize(static_cast<std::size_t>(spec_.frames * spec_.patches * d));
        for (Index p = 0; p < spec_.frames * spec_.patches; ++p) {
            for (Index j = 0; j < d; ++j) {
                pair.video.features[static_cast<std::size_t>(p * d + j)] =
                    center_at(pair.topic, j) + imprint_scale * imprint[static_cast<std::size_t>(j)] +
                    spec_.noise * rng.normal();
            }
        }
        return pair;
    }

    SyntheticPair generate_pair_seeded(std::uint64_t item_seed) const {
        SeededRng rng(item_seed);
        return generate_pair(rng);
    }

    // Items are seeded by hash(run_seed, item_index), so any batch slicing
    // produces the same item for the same index.
    PretrainBatch generate_batch(Index batch_size, std::uint64_t run_seed, Index start_index = 0) const {
        if (batch_size < 2) {
            throw ContractError("generate_batch: batch size must be >= 2 for in-batch negatives");
        }
        PretrainBatch batch;
        batch.items.reserve(static_cast<std::size_t>(batch_size));
        for (Index i = 0; i < batch_size; ++i) {
            const Index index = start_index + i;
            SyntheticPair pair = generate_pair_seeded(mix_seed(run_seed, static_cast<std::uint64_t>(index)));
            pair.id = index;
            batch.items.push_back(std::move(pair));
        }
        return batch;
    }

  private:
    WorldSpec spec_;
    std::vector<double> centers_;
    std::vector<double> token_dirs_;
    std::vector<std::vector<Index>> topic_words_;
};

// Deduplicated caption pool for MCM distractor sampling (first-seen order).
inline std::vector<std::string> build_answer_corpus(const std::vector<SyntheticPair>& pairs) {
    std::vector<std::string> corpus;
    std::set<std::string> seen;
    for (const auto& p : pairs) {
        if (seen.insert(p.caption).second) {
            corpus.push_back(p.caption);
        }
    }
    if (corpus.size() < 4) {
        throw DataError("build_answer_corpus: need at least 4 distinct captions, got " +
                        std::to_string(corpus.size()));
    }
    return corpus;
}

// ---- newline-delimited JSON dump/load ----

inline void dump_pairs(const std::vector<SyntheticPair>& pairs, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    for (const auto& p : pairs) {
        nlohmann::json j;
        j["id"] = p.id;
        j["topic"] = p.topic;
        j["frames"] = p.video.frames;
        j["patches"] = p.video.patches;
        j["feature_dim"] = p.video.feature_dim;
        j["features"] = p.video.features;
        j["token_ids"] = p.text.token_ids;
        j["caption"] = p.caption;
        out << j.dump() << '\n';
    }
}

inline std::vector<SyntheticPair> load_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::vector<SyntheticPair> pairs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line);
        SyntheticPair p;
        p.id = j.at("id").get<Index>();
        p.topic = j.at("topic").get<Index>();
        p.video.frames = j.at("frames").get<Index>();
        p.video.patches = j.at("patches").get<Index>();
        p.video.feature_dim = j.at("feature_dim").get<Index>();
        p.video.features = j.at("features").get<std::vector<double>>();
        p.text.token_ids = j.at("token_ids").get<std::vector<Index>>();
        p.text.attention_mask.assign(p.text.token_ids.size(), 1);
        p.caption = j.at("caption").get<std::string>();
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace multi

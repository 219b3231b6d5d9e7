#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "multi/objectives.hpp"
#include "multi/synthetic.hpp"

using namespace multi;

namespace {

WorldSpec small_spec() {
    WorldSpec s;
    s.topics = 4;
    s.vocab = 256;
    s.caption_min = 4;
    s.caption_max = 8;
    s.frames = 2;
    s.patches = 4;
    s.feature_dim = 16;
    s.noise = 0.5;
    return s;
}

}  // namespace

TEST_CASE("noise-free pairs sit exactly on their topic centers") {
    WorldSpec spec = small_spec();
    spec.noise = 0.0;
    SyntheticWorld world(spec);
    SeededRng rng(1);
    for (int i = 0; i < 10; ++i) {
        SyntheticPair p = world.generate_pair(rng);
        for (Index patch = 0; patch < spec.frames * spec.patches; ++patch) {
            for (Index j = 0; j < spec.feature_dim; ++j) {
                REQUIRE(p.video.features[static_cast<std::size_t>(patch * spec.feature_dim + j)] ==
                        world.center_at(p.topic, j));
            }
        }
    }
}

TEST_CASE("same seed reproduces the identical pair") {
    SyntheticWorld world(small_spec());
    SyntheticPair a = world.generate_pair_seeded(12345);
    SyntheticPair b = world.generate_pair_seeded(12345);
    REQUIRE(a.topic == b.topic);
    REQUIRE(a.caption == b.caption);
    REQUIRE(a.video.features == b.video.features);
    REQUIRE(a.text.token_ids == b.text.token_ids);

    SyntheticPair c = world.generate_pair_seeded(54321);
    REQUIRE((c.topic != a.topic || c.caption != a.caption || c.video.features != a.video.features));
}

TEST_CASE("topic histogram over 10k pairs is uniform within multinomial bounds") {
    WorldSpec spec = small_spec();
    spec.topics = 8;
    spec.feature_dim = 64;
    SyntheticWorld world(spec);
    std::array<int, 8> hist{};
    for (Index i = 0; i < 10'000; ++i) {
        hist[static_cast<std::size_t>(world.generate_pair_seeded(mix_seed(1, i)).topic)]++;
    }
    // 3 sigma for Binomial(10000, 1/8): ~99 around 1250
    for (int count : hist) {
        REQUIRE(count >= 1250 - 100);
        REQUIRE(count <= 1250 + 100);
    }
    // golden histogram at seed 1
    REQUIRE(hist == std::array<int, 8>{1250, 1250, 1250, 1250, 1250, 1250, 1250, 1250});
}

TEST_CASE("batches have unique ids and per-item replay stability") {
    SyntheticWorld world(small_spec());
    PretrainBatch batch = world.generate_batch(8, 99, 40);
    std::set<Index> ids;
    for (const auto& item : batch.items) {
        ids.insert(item.id);
        REQUIRE(item.video.frames == 2);
        REQUIRE(item.text.token_ids.front() == Tokenizer::kCls);
    }
    REQUIRE(ids.size() == 8);
    REQUIRE(*ids.begin() == 40);

    // slicing differently still yields the same item for the same index
    PretrainBatch other = world.generate_batch(4, 99, 42);
    REQUIRE(other.items[0].caption == batch.items[2].caption);
    REQUIRE(other.items[0].video.features == batch.items[2].video.features);

    PretrainBatch different_seed = world.generate_batch(4, 100, 42);
    REQUIRE(different_seed.items[0].caption != other.items[0].caption);

    REQUIRE_THROWS_AS(world.generate_batch(1, 99, 0), ContractError);
}

TEST_CASE("nearest-center classifier is perfect on noiseless patches") {
    WorldSpec spec = small_spec();
    spec.noise = 0.0;
    SyntheticWorld world(spec);
    int correct = 0;
    const int n = 400;
    for (Index i = 0; i < n; ++i) {
        SyntheticPair p = world.generate_pair_seeded(mix_seed(7, i));
        Index best = -1;
        double best_dist = 1e300;
        for (Index t = 0; t < spec.topics; ++t) {
            double dist = 0.0;
            for (Index j = 0; j < spec.feature_dim; ++j) {
                const double diff = p.video.features[static_cast<std::size_t>(j)] - world.center_at(t, j);
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = t;
            }
        }
        correct += best == p.topic;
    }
    REQUIRE(correct == n);
}

TEST_CASE("unigram naive bayes recovers the topic from captions") {
    WorldSpec spec = small_spec();
    spec.topics = 8;
    spec.feature_dim = 64;
    SyntheticWorld world(spec);
    // disjoint per-topic vocabularies: count word hits per topic range
    int correct = 0;
    const int n = 1000;
    for (Index i = 0; i < n; ++i) {
        SyntheticPair p = world.generate_pair_seeded(mix_seed(11, 50'000 + i));
        std::array<int, 8> votes{};
        for (Index id : p.text.token_ids) {
            for (Index t = 0; t < 8; ++t) {
                const auto& words = world.topic_words()[static_cast<std::size_t>(t)];
                if (id >= words.front() && id <= words.back()) {
                    votes[static_cast<std::size_t>(t)]++;
                }
            }
        }
        Index best = 0;
        for (Index t = 1; t < 8; ++t) {
            if (votes[static_cast<std::size_t>(t)] > votes[static_cast<std::size_t>(best)]) best = t;
        }
        correct += best == p.topic;
    }
    REQUIRE(correct >= 900);
}

TEST_CASE("answer corpus deduplicates and guards the minimum") {
    SyntheticWorld world(small_spec());
    PretrainBatch batch = world.generate_batch(50, 3, 0);
    auto corpus = build_answer_corpus(batch.items);
    std::set<std::string> uniq(corpus.begin(), corpus.end());
    REQUIRE(uniq.size() == corpus.size());

    SECTION("distractor draws never return the item's own caption") {
        SeededRng rng(5);
        for (const auto& item : batch.items) {
            McmPrompt p = build_mcm_prompt("What does this video describe?", item.caption, corpus, rng);
            for (Index s = 0; s < 4; ++s) {
                if (s != p.correct_option) {
                    REQUIRE(p.option_texts[static_cast<std::size_t>(s)] != item.caption);
                }
            }
        }
    }

    SECTION("too few distinct captions raise a data error") {
        std::vector<SyntheticPair> dup(6, batch.items[0]);
        REQUIRE_THROWS_AS(build_answer_corpus(dup), DataError);
    }
}

TEST_CASE("jsonl dump and load round-trip") {
    SyntheticWorld world(small_spec());
    PretrainBatch batch = world.generate_batch(5, 21, 7);
    const std::string path = std::filesystem::temp_directory_path() / "multi_pairs_test.ndjson";
    dump_pairs(batch.items, path);
    auto loaded = load_pairs(path);
    REQUIRE(loaded.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        REQUIRE(loaded[i].id == batch.items[i].id);
        REQUIRE(loaded[i].topic == batch.items[i].topic);
        REQUIRE(loaded[i].caption == batch.items[i].caption);
        REQUIRE(loaded[i].video.features == batch.items[i].video.features);
        REQUIRE(loaded[i].text.token_ids == batch.items[i].text.token_ids);
    }
    std::remove(path.c_str());

    REQUIRE_THROWS_AS(load_pairs("/nonexistent/nowhere.ndjson"), IoError);
}

TEST_CASE("world spec validation") {
    WorldSpec bad = small_spec();
    bad.topics = 1;
    REQUIRE_THROWS_AS(SyntheticWorld(bad), ConfigError);
    bad = small_spec();
    bad.caption_max = 2;
    REQUIRE_THROWS_AS(SyntheticWorld(bad), ConfigError);
    bad = small_spec();
    bad.noise = -1.0;
    REQUIRE_THROWS_AS(SyntheticWorld(bad), ConfigError);
}

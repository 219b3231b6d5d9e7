#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "multi/encoders.hpp"
#include "multi/grad_check.hpp"

using namespace multi;

namespace {

EncoderStackConfig tiny_cfg() {
    EncoderStackConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.ffn_hidden = 32;
    return cfg;
}

VideoInput random_video(Index frames, Index patches, Index dim, SeededRng& rng) {
    VideoInput v;
    v.frames = frames;
    v.patches = patches;
    v.feature_dim = dim;
    v.features.resize(static_cast<std::size_t>(frames * patches * dim));
    for (auto& x : v.features) x = rng.normal();
    return v;
}

TextInput text_of(std::vector<Index> ids) {
    TextInput t;
    t.attention_mask.assign(ids.size(), 1);
    t.token_ids = std::move(ids);
    return t;
}

}  // namespace

TEST_CASE("video encoder output shape has no class token") {
    SeededRng rng(1);
    ParamStore store;
    VideoEncoder enc(store, "video", tiny_cfg(), 16, 8, rng);
    VideoInput v = random_video(4, 6, 16, rng);
    Graph g(false);
    Tensor out = enc.encode(g, v);
    REQUIRE(out.rows() == 4 * 6);
    REQUIRE(out.cols() == 16);

    VideoInput too_many = random_video(9, 6, 16, rng);
    REQUIRE_THROWS_AS(enc.encode(g, too_many), ConfigError);
}

TEST_CASE("video encoder treats frames independently") {
    SeededRng rng(2);
    ParamStore store;
    VideoEncoder enc(store, "video", tiny_cfg(), 16, 8, rng);
    VideoInput v = random_video(3, 5, 16, rng);

    VideoInput permuted = v;  // frame order 2,0,1
    const Index block = 5 * 16;
    for (Index f = 0; f < 3; ++f) {
        const Index src = (f + 2) % 3;
        std::copy_n(v.features.begin() + src * block, block, permuted.features.begin() + f * block);
    }

    Graph g(false);
    Tensor a = enc.encode(g, v);
    Tensor b = enc.encode(g, permuted);
    for (Index f = 0; f < 3; ++f) {
        const Index src = (f + 2) % 3;
        for (Index r = 0; r < 5; ++r) {
            for (Index c = 0; c < 16; ++c) {
                REQUIRE(b.at(f * 5 + r, c) == a.at(src * 5 + r, c));
            }
        }
    }
}

TEST_CASE("video encoder gradient check through two layers") {
    SeededRng rng(3);
    ParamStore store;
    EncoderStackConfig cfg = tiny_cfg();
    cfg.d = 8;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    VideoEncoder enc(store, "video", cfg, 8, 4, rng);
    VideoInput v = random_video(2, 3, 8, rng);
    Tensor probe = Tensor::randn({6, 8}, rng);
    auto f = [&](Graph& g) { return g.sum_all(g.mul(enc.encode(g, v), probe)); };
    std::vector<Tensor> wrt = store.all();
    SeededRng coord_rng(7);
    auto res = grad_check(f, wrt, 1e-4, 1e-5, 4, &coord_rng);
    INFO(res.worst << " err " << res.max_rel_err);
    REQUIRE(res.pass);
}

TEST_CASE("time embeddings") {
    SeededRng rng(4);
    ParamStore store;
    EncoderStackConfig cfg = tiny_cfg();
    VideoEncoder enc(store, "video", cfg, 16, 8, rng);

    SECTION("zero table is identity") {
        std::fill(enc.time_embeddings().data().begin(), enc.time_embeddings().data().end(), 0.0);
        Graph g(false);
        Tensor x = Tensor::randn({6, 16}, rng);
        Tensor y = enc.add_time_embeddings(g, x, 3);
        for (Index i = 0; i < x.numel(); ++i) {
            REQUIRE(y.data()[static_cast<std::size_t>(i)] == x.data()[static_cast<std::size_t>(i)]);
        }
    }
    SECTION("identical frames diverge by their time rows") {
        Graph g(false);
        Tensor x = Tensor::zeros({4, 16});
        SeededRng r2(5);
        Tensor row = Tensor::randn({1, 16}, r2);
        for (Index f = 0; f < 2; ++f)
            for (Index p = 0; p < 2; ++p)
                std::copy_n(row.data().begin(), 16, x.data().begin() + (f * 2 + p) * 16);
        Tensor y = enc.add_time_embeddings(g, x, 2);
        const Tensor& te = enc.time_embeddings();
        for (Index p = 0; p < 2; ++p) {
            for (Index c = 0; c < 16; ++c) {
                const double diff = y.at(0 * 2 + p, c) - y.at(1 * 2 + p, c);
                REQUIRE(diff == Catch::Approx(te.at(0, c) - te.at(1, c)).margin(1e-12));
            }
        }
    }
}

TEST_CASE("text encoder masking isolates pads") {
    SeededRng rng(6);
    ParamStore store;
    TextEncoder enc(store, "text", tiny_cfg(), 32, 16, rng);

    TextInput t;
    t.token_ids = {1, 5, 9, 13, 0, 0};
    t.attention_mask = {1, 1, 1, 1, 0, 0};

    Graph g(false);
    Tensor a = enc.encode(g, t);

    TextInput t2 = t;
    t2.token_ids[4] = 21;  // change a pad-position token
    Tensor b = enc.encode(g, t2);
    for (Index i = 0; i < 4; ++i) {
        for (Index c = 0; c < 16; ++c) {
            REQUIRE(a.at(i, c) == b.at(i, c));
        }
    }

    SECTION("attention matrices give pads zero weight") {
        Graph gc(false);
        std::vector<AttentionCapture> caps;
        gc.capture_attention(&caps);
        enc.encode(gc, t);
        REQUIRE_FALSE(caps.empty());
        for (const auto& cap : caps) {
            for (int h = 0; h < cap.heads; ++h)
                for (Index q = 0; q < cap.queries; ++q)
                    for (Index k = 4; k < 6; ++k) REQUIRE(cap.weight(h, q, k) == 0.0);
        }
    }

    SECTION("single CLS token works") {
        Tensor one = enc.encode(g, text_of({1}));
        REQUIRE(one.rows() == 1);
        REQUIRE(one.cols() == 16);
    }

    SECTION("all-masked input is rejected") {
        TextInput bad;
        bad.token_ids = {1, 2};
        bad.attention_mask = {0, 0};
        REQUIRE_THROWS_AS(enc.encode(g, bad), ContractError);
    }

    SECTION("mask length mismatch is rejected") {
        TextInput bad;
        bad.token_ids = {1, 2};
        bad.attention_mask = {1};
        REQUIRE_THROWS_AS(enc.encode(g, bad), ShapeError);
    }
}

TEST_CASE("text encoder gradient check") {
    SeededRng rng(8);
    ParamStore store;
    EncoderStackConfig cfg = tiny_cfg();
    cfg.d = 8;
    cfg.ffn_hidden = 16;
    TextEncoder enc(store, "text", cfg, 16, 8, rng);
    TextInput t = text_of({1, 3, 7, 2});
    Tensor probe = Tensor::randn({4, 8}, rng);
    auto f = [&](Graph& g) { return g.sum_all(g.mul(enc.encode(g, t), probe)); };
    SeededRng coord_rng(9);
    auto res = grad_check(f, store.all(), 1e-4, 1e-5, 4, &coord_rng);
    INFO(res.worst << " err " << res.max_rel_err);
    REQUIRE(res.pass);
}

TEST_CASE("freeze plan zeroes gradients for frozen layers only") {
    SeededRng rng(10);
    ParamStore store;
    EncoderStackConfig cfg = tiny_cfg();
    VideoEncoder venc(store, "video", cfg, 16, 8, rng);
    TextEncoder tenc(store, "text", cfg, 32, 16, rng);

    SECTION("invalid plans are rejected") {
        FreezePlan bad;
        bad.frozen_video_layers = 3;  // only 2 layers
        REQUIRE_THROWS_AS(apply_freeze_plan(venc, tenc, bad), ConfigError);
    }

    SECTION("partial freeze: bottom layer gets no gradient, top does") {
        FreezePlan plan;
        plan.frozen_video_layers = 1;
        plan.frozen_text_layers = 1;
        apply_freeze_plan(venc, tenc, plan);

        store.zero_grad();
        Graph g;
        VideoInput v = random_video(2, 4, 16, rng);
        TextInput t = text_of({1, 4, 9});
        Tensor loss = g.add(g.mean_all(venc.encode(g, v)), g.mean_all(tenc.encode(g, t)));
        g.backward(loss);

        auto grad_norm = [](const std::vector<Tensor>& ts) {
            double s = 0.0;
            for (const auto& t : ts)
                for (double v : t.grad()) s += v * v;
            return std::sqrt(s);
        };
        REQUIRE(grad_norm(venc.layers()[0].core.tensors()) == 0.0);
        REQUIRE(grad_norm(venc.layers()[1].core.tensors()) > 0.0);
        REQUIRE(grad_norm(tenc.layers()[0].core.tensors()) == 0.0);
        REQUIRE(grad_norm(tenc.layers()[1].core.tensors()) > 0.0);
        // embeddings stay trainable under a partial freeze
        REQUIRE(grad_norm(venc.embedding_tensors()) > 0.0);
        REQUIRE(grad_norm(tenc.embedding_tensors()) > 0.0);
    }

    SECTION("full freeze covers embeddings; zero plan trains everything") {
        FreezePlan full;
        full.frozen_video_layers = 2;
        full.frozen_text_layers = 2;
        apply_freeze_plan(venc, tenc, full);
        for (const auto& t : store.all()) REQUIRE_FALSE(t.requires_grad());

        FreezePlan none;
        apply_freeze_plan(venc, tenc, none);
        store.zero_grad();
        Graph g;
        VideoInput v = random_video(2, 4, 16, rng);
        TextInput t = text_of({1, 4, 9, 11, 2});
        Tensor vfeat = venc.add_time_embeddings(g, venc.encode(g, v), v.frames);
        Tensor sq = g.mul(vfeat, vfeat);
        Tensor loss = g.add(g.mean_all(sq), g.mean_all(tenc.encode(g, t)));
        g.backward(loss);
        for (const auto& p : store.all()) {
            double s = 0.0;
            for (double gv : p.grad()) s += gv * gv;
            INFO(p.name());
            REQUIRE(s > 0.0);
        }
    }
}

TEST_CASE("adapters preserve outputs at attach time and train under freeze") {
    SeededRng rng(12);
    ParamStore store;
    EncoderStackConfig cfg = tiny_cfg();
    VideoEncoder venc(store, "video", cfg, 16, 8, rng);
    TextEncoder tenc(store, "text", cfg, 32, 16, rng);
    VideoInput v = random_video(2, 4, 16, rng);

    FreezePlan plan;
    plan.frozen_video_layers = 2;
    plan.frozen_text_layers = 0;
    apply_freeze_plan(venc, tenc, plan);

    Graph g(false);
    Tensor before = venc.encode(g, v);

    SECTION("site outside layer range / outside frozen region") {
        SeededRng arng(13);
        REQUIRE_THROWS_AS(attach_adapters(venc, store, "video", {5}, 4, arng), ConfigError);
        REQUIRE_THROWS_AS(attach_adapters(tenc, store, "text", {0}, 4, arng), ConfigError);
    }

    SECTION("zero-init adapter is an exact no-op at attach") {
        SeededRng arng(14);
        attach_adapters(venc, store, "video", {0, 1}, 4, arng);
        Tensor after = venc.encode(g, v);
        for (Index i = 0; i < before.numel(); ++i) {
            REQUIRE(std::abs(after.data()[static_cast<std::size_t>(i)] -
                             before.data()[static_cast<std::size_t>(i)]) < 1e-12);
        }
    }

    SECTION("adapter parameters receive gradients while the host stays frozen") {
        SeededRng arng(15);
        attach_adapters(venc, store, "video", {0}, 4, arng);
        store.zero_grad();
        Graph gt;
        Tensor loss = gt.mean_all(venc.encode(gt, v));
        gt.backward(loss);
        double host = 0.0, adapter = 0.0;
        for (const auto& t : venc.layers()[0].core.tensors())
            for (double gv : t.grad()) host += gv * gv;
        for (const auto& t : venc.layers()[0].adapter->tensors())
            for (double gv : t.grad()) adapter += gv * gv;
        REQUIRE(host == 0.0);
        REQUIRE(adapter > 0.0);
    }

    SECTION("gate forced uniform matches the plain FFN adapter, scaled") {
        SeededRng arng(16);
        attach_adapters(venc, store, "video", {0}, 4, arng);
        auto& ad = *venc.layers()[0].adapter;
        // make the up-projection nonzero so the adapter actually acts
        SeededRng urng(17);
        for (auto& w : ad.up.w.data()) w = urng.normal(0.0, 0.05);
        // zero gate weights force sigmoid(0) = 0.5 for every channel
        std::fill(ad.gate.w.data().begin(), ad.gate.w.data().end(), 0.0);
        std::fill(ad.gate.b.data().begin(), ad.gate.b.data().end(), 0.0);

        Graph ga(false);
        Tensor x = Tensor::randn({5, 16}, arng);
        Tensor gated = apply_adapter(ga, ad, x);
        AdapterParams plain = ad;
        plain.gate_enabled = false;
        Tensor ungated = apply_adapter(ga, plain, x);
        for (Index i = 0; i < gated.numel(); ++i) {
            REQUIRE(gated.data()[static_cast<std::size_t>(i)] ==
                    Catch::Approx(0.5 * ungated.data()[static_cast<std::size_t>(i)]).margin(1e-12));
        }
    }
}

TEST_CASE("adapter gradient check") {
    SeededRng rng(18);
    ParamStore store;
    AdapterParams ad = make_adapter(store, "ad", 8, 4, rng);
    SeededRng urng(19);
    for (auto& w : ad.up.w.data()) w = urng.normal(0.0, 0.1);
    Tensor x = Tensor::randn({5, 8}, rng);
    Tensor probe = Tensor::randn({5, 8}, rng);
    auto f = [&](Graph& g) { return g.sum_all(g.mul(apply_adapter(g, ad, x), probe)); };
    auto res = grad_check(f, store.all(), 1e-4);
    INFO(res.worst << " err " << res.max_rel_err);
    REQUIRE(res.pass);
}

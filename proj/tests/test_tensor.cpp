#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <vector>

#include "multi/grad_check.hpp"
#include "multi/tensor.hpp"

using namespace multi;

namespace {

Tensor randn(std::vector<Index> shape, SeededRng& rng, double sd = 1.0) {
    return Tensor::randn(std::move(shape), rng, sd);
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    SeededRng rng(1);
    Graph g;
    Tensor a = randn({3, 3}, rng);
    Tensor eye = Tensor::zeros({3, 3});
    for (Index i = 0; i < 3; ++i) eye.data()[static_cast<std::size_t>(i * 3 + i)] = 1.0;
    Tensor out = g.matmul(eye, a);
    for (Index i = 0; i < 9; ++i) {
        REQUIRE(out.data()[static_cast<std::size_t>(i)] == a.data()[static_cast<std::size_t>(i)]);
    }

    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor v = Tensor::from({2, 1}, {1, 1});
    Tensor mv = g.matmul(m, v);
    REQUIRE(mv.at(0, 0) == 3.0);
    REQUIRE(mv.at(1, 0) == 7.0);
}

TEST_CASE("matmul shape error names both shapes") {
    Graph g;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    REQUIRE_THROWS_MATCHES(g.matmul(a, b), ShapeError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("(2, 3)") &&
                                                           Catch::Matchers::ContainsSubstring("(4, 2)")));
}

TEST_CASE("matmul gradient matches central differences") {
    SeededRng rng(7);
    Tensor a = randn({4, 5}, rng);
    Tensor b = randn({5, 3}, rng);
    auto f = [&](Graph& g) { return g.sum_all(g.matmul(a, b)); };
    auto res = grad_check(f, {a, b}, 1e-6);
    INFO(res.worst << " err " << res.max_rel_err);
    REQUIRE(res.pass);
}

TEST_CASE("matmul counters are exact and additive") {
    Graph g;
    Tensor a = Tensor::zeros({4, 5});
    Tensor b = Tensor::zeros({5, 3});
    g.matmul(a, b, MulAddKind::Projection);
    REQUIRE(g.counters().mul_adds_for(MulAddKind::Projection) == 4 * 5 * 3);
    g.matmul(a, b, MulAddKind::Projection);
    REQUIRE(g.counters().mul_adds_for(MulAddKind::Projection) == 2 * 4 * 5 * 3);
    REQUIRE(g.counters().total_mul_adds() == 2 * 4 * 5 * 3);
    g.counters().reset();
    REQUIRE(g.counters().total_mul_adds() == 0);
}

TEST_CASE("softmax basics") {
    Graph g;
    SECTION("constant slice is uniform") {
        Tensor x = Tensor::full({2, 5}, 3.25);
        Tensor y = g.softmax(x, 1);
        for (double v : y.data()) REQUIRE(v == Catch::Approx(0.2).margin(1e-15));
    }
    SECTION("length-1 axis gives exactly one") {
        Tensor x = Tensor::from({3, 1}, {-2.0, 0.0, 11.5});
        Tensor y = g.softmax(x, 1);
        for (double v : y.data()) REQUIRE(v == 1.0);
    }
    SECTION("slices sum to one and are positive") {
        SeededRng rng(3);
        Tensor x = randn({4, 7}, rng, 3.0);
        Tensor y = g.softmax(x, 1);
        for (Index i = 0; i < 4; ++i) {
            double s = 0.0;
            for (Index j = 0; j < 7; ++j) {
                REQUIRE(y.at(i, j) > 0.0);
                s += y.at(i, j);
            }
            REQUIRE(s == Catch::Approx(1.0).margin(1e-9));
        }
    }
    SECTION("axis 0 softmax") {
        Tensor x = Tensor::from({2, 2}, {0.0, 10.0, 0.0, 10.0});
        Tensor y = g.softmax(x, 0);
        REQUIRE(y.at(0, 0) == Catch::Approx(0.5));
        REQUIRE(y.at(1, 1) == Catch::Approx(0.5));
    }
    SECTION("invalid axis") {
        Tensor x = Tensor::zeros({2, 2});
        REQUIRE_THROWS_AS(g.softmax(x, 2), IndexError);
    }
}

TEST_CASE("softmax gradient matches central differences") {
    SeededRng rng(11);
    Tensor x = randn({1, 7}, rng);
    Tensor r = randn({1, 7}, rng);
    auto f = [&](Graph& g) { return g.sum_all(g.mul(g.softmax(x, 1), r)); };
    auto res = grad_check(f, {x}, 1e-6);
    REQUIRE(res.pass);
}

TEST_CASE("layer_norm basics") {
    Graph g;
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    SECTION("constant row maps to zero") {
        Tensor x = Tensor::full({2, 4}, 5.0);
        Tensor y = g.layer_norm(x, gain, bias);
        for (double v : y.data()) REQUIRE(std::abs(v) < 1e-12);
    }
    SECTION("zero gain yields broadcast bias") {
        SeededRng rng(5);
        Tensor x = randn({3, 4}, rng);
        Tensor zero_gain = Tensor::zeros({4});
        Tensor b = Tensor::from({4}, {1.0, -2.0, 0.5, 3.0});
        Tensor y = g.layer_norm(x, zero_gain, b);
        for (Index i = 0; i < 3; ++i)
            for (Index j = 0; j < 4; ++j) REQUIRE(y.at(i, j) == b.data()[static_cast<std::size_t>(j)]);
    }
}

TEST_CASE("layer_norm gradient matches central differences") {
    SeededRng rng(13);
    Tensor x = randn({3, 8}, rng);
    Tensor gain = randn({8}, rng, 0.5);
    Tensor bias = randn({8}, rng, 0.5);
    auto f = [&](Graph& g) {
        SeededRng r2(99);
        Tensor w = Tensor::randn({3, 8}, r2);
        return g.sum_all(g.mul(g.layer_norm(x, gain, bias), w));
    };
    auto res = grad_check(f, {x, gain, bias}, 1e-5);
    INFO(res.worst << " err " << res.max_rel_err);
    REQUIRE(res.pass);
}

TEST_CASE("cross entropy basics") {
    Graph g;
    SECTION("uniform logits give ln C") {
        Tensor logits = Tensor::full({3, 8}, 0.7);
        Tensor loss = g.cross_entropy_logits(logits, {0, 3, 7});
        REQUIRE(loss.item() == Catch::Approx(std::log(8.0)).margin(1e-12));
    }
    SECTION("saturated target gives near-zero loss") {
        Tensor logits = Tensor::zeros({1, 4});
        logits.data()[2] = 30.0;
        Tensor loss = g.cross_entropy_logits(logits, {2});
        REQUIRE(loss.item() < 1e-9);
    }
    SECTION("out-of-range target") {
        Tensor logits = Tensor::zeros({1, 4});
        REQUIRE_THROWS_AS(g.cross_entropy_logits(logits, {4}), IndexError);
        REQUIRE_THROWS_AS(g.cross_entropy_logits(logits, {-1}), IndexError);
    }
}

TEST_CASE("cross entropy gradient equals softmax minus one-hot") {
    SeededRng rng(17);
    Tensor logits = randn({2, 4}, rng);
    logits.set_requires_grad(true);
    std::vector<Index> targets{1, 3};
    Graph g;
    Tensor loss = g.cross_entropy_logits(logits, targets);
    g.backward(loss);
    Graph g2;
    Tensor probs = g2.softmax(logits, 1);
    for (Index i = 0; i < 2; ++i) {
        for (Index j = 0; j < 4; ++j) {
            const double onehot = (j == targets[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
            const double expected = (probs.at(i, j) - onehot) / 2.0;
            REQUIRE(logits.grad()[static_cast<std::size_t>(i * 4 + j)] ==
                    Catch::Approx(expected).margin(1e-8));
        }
    }
}

TEST_CASE("backward populates leaf gradients") {
    SeededRng rng(19);
    SECTION("sum gives ones") {
        Tensor x = randn({3, 4}, rng);
        x.set_requires_grad(true);
        Graph g;
        g.backward(g.sum_all(x.requires_grad() ? x : x));
        for (double v : x.grad()) REQUIRE(v == 1.0);
    }
    SECTION("half square gives x") {
        Tensor x = randn({2, 5}, rng);
        x.set_requires_grad(true);
        Graph g;
        Tensor loss = g.scale(g.sum_all(g.mul(x, x)), 0.5);
        g.backward(loss);
        for (Index i = 0; i < x.numel(); ++i) {
            REQUIRE(x.grad()[static_cast<std::size_t>(i)] ==
                    Catch::Approx(x.data()[static_cast<std::size_t>(i)]).margin(1e-12));
        }
    }
    SECTION("non-scalar loss is rejected") {
        Tensor x = randn({2, 2}, rng);
        x.set_requires_grad(true);
        Graph g;
        Tensor y = g.mul(x, x);
        REQUIRE_THROWS_AS(g.backward(y), ContractError);
    }
    SECTION("loss from another graph is rejected") {
        Tensor x = randn({2, 2}, rng);
        x.set_requires_grad(true);
        Graph g1;
        Tensor loss = g1.sum_all(x);
        Graph g2;
        REQUIRE_THROWS_AS(g2.backward(loss), ContractError);
    }
    SECTION("gradients accumulate across backward calls until reset") {
        Tensor x = randn({2, 2}, rng);
        x.set_requires_grad(true);
        Graph g;
        Tensor loss = g.sum_all(x);
        g.backward(loss);
        g.backward(loss);
        for (double v : x.grad()) REQUIRE(v == 2.0);
        x.zero_grad();
        for (double v : x.grad()) REQUIRE(v == 0.0);
    }
}

TEST_CASE("grad_check trivial cases") {
    SeededRng rng(23);
    SECTION("sum has zero error") {
        Tensor x = randn({4, 4}, rng);
        auto res = grad_check([&](Graph& g) { return g.sum_all(x); }, {x}, 1e-10);
        REQUIRE(res.pass);
        REQUIRE(res.max_rel_err < 1e-10);
    }
    SECTION("softmax-then-sum has near-zero gradient") {
        Tensor x = randn({1, 9}, rng);
        auto res = grad_check([&](Graph& g) { return g.sum_all(g.softmax(x, 1)); }, {x}, 1e-4);
        REQUIRE(res.pass);
        REQUIRE(res.max_rel_err < 1e-4);
    }
    SECTION("non-deterministic function is rejected") {
        Tensor x = randn({2, 2}, rng);
        int calls = 0;
        auto f = [&](Graph& g) {
            ++calls;
            return g.scale(g.sum_all(x), 1.0 + 1e-9 * calls);
        };
        REQUIRE_THROWS_AS(grad_check(f, {x}, 1e-4), DeterminismError);
    }
}

TEST_CASE("every differentiable op passes central differences on random shapes") {
    // 24 seeded rounds across a mixed op pipeline; shapes vary per round.
    for (std::uint64_t seed = 1; seed <= 24; ++seed) {
        SeededRng rng(seed);
        const Index m = 2 + static_cast<Index>(rng.uniform_int(0, 4));
        const Index k = 2 + static_cast<Index>(rng.uniform_int(0, 4));
        const Index d = 2 * (1 + static_cast<Index>(rng.uniform_int(0, 3)));
        Tensor a = randn({m, k}, rng);
        Tensor b = randn({k, d}, rng);
        Tensor c = randn({m, d}, rng);
        Tensor v = randn({1, d}, rng);
        Tensor gain = randn({d}, rng, 0.3);
        Tensor bias = randn({d}, rng, 0.3);
        auto f = [&](Graph& g) {
            Tensor h = g.matmul(a, b);
            h = g.add(h, c);
            h = g.gelu(h);
            h = g.layer_norm(h, gain, bias);
            h = g.add_rowvec(h, v);
            h = g.mul_rowvec(h, v);
            h = g.sigmoid(h);
            h = g.softmax(h, 1);
            Tensor t = g.transpose(h);
            Tensor pooled = g.concat_rows({g.mean_rows(h), g.max_rows(h), g.mean_rows(t.cols() == d ? h : h)});
            Tensor s = g.slice_rows(pooled, 0, 2);
            Tensor nrm = g.l2_normalize_rows(s);
            return g.mean_all(g.sub(nrm, g.scale(nrm, 2.0)));
        };
        auto res = grad_check(f, {a, b, c, v, gain, bias}, 1e-4);
        INFO("seed " << seed << " worst " << res.worst << " err " << res.max_rel_err);
        REQUIRE(res.pass);
    }
}

TEST_CASE("multihead attention matches a from-ops reference") {
    SeededRng rng(31);
    const Index m = 5, n = 7, d = 8;
    Tensor q = randn({m, d}, rng);
    Tensor k = randn({n, d}, rng);
    Tensor v = randn({n, d}, rng);
    Graph g;
    Tensor fused = g.multihead_attention(q, k, v, 2, {}, PairKind::SelfAttn);

    // reference path: per-head slices via plain matmul/softmax ops
    Graph gr;
    const Index dh = d / 2;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < 2; ++h) {
        std::vector<double> qh(static_cast<std::size_t>(m * dh)), kh(static_cast<std::size_t>(n * dh)),
            vh(static_cast<std::size_t>(n * dh));
        for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < dh; ++j) qh[static_cast<std::size_t>(i * dh + j)] = q.at(i, h * dh + j);
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < dh; ++j) {
                kh[static_cast<std::size_t>(i * dh + j)] = k.at(i, h * dh + j);
                vh[static_cast<std::size_t>(i * dh + j)] = v.at(i, h * dh + j);
            }
        Tensor qt = Tensor::from({m, dh}, qh);
        Tensor kt = Tensor::from({n, dh}, kh);
        Tensor vt = Tensor::from({n, dh}, vh);
        Tensor scores = gr.scale(gr.matmul(qt, gr.transpose(kt)), sc);
        Tensor w = gr.softmax(scores, 1);
        Tensor ctx = gr.matmul(w, vt);
        for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < dh; ++j)
                REQUIRE(fused.at(i, h * dh + j) == Catch::Approx(ctx.at(i, j)).margin(1e-12));
    }
}

TEST_CASE("multihead attention masking and counters") {
    SeededRng rng(37);
    const Index m = 4, n = 6, d = 8;
    Tensor q = randn({m, d}, rng);
    Tensor k = randn({n, d}, rng);
    Tensor v = randn({n, d}, rng);
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 1};

    Graph g;
    std::vector<AttentionCapture> captured;
    g.capture_attention(&captured);
    g.multihead_attention(q, k, v, 2, mask, PairKind::CrossText);
    REQUIRE(captured.size() == 1);
    for (int h = 0; h < 2; ++h) {
        for (Index i = 0; i < m; ++i) {
            double s = 0.0;
            for (Index j = 0; j < n; ++j) {
                if (!mask[static_cast<std::size_t>(j)]) {
                    REQUIRE(captured[0].weight(h, i, j) == 0.0);
                }
                s += captured[0].weight(h, i, j);
            }
            REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
        }
    }
    REQUIRE(g.counters().pairs_for(PairKind::CrossText) == m * n);
    REQUIRE(g.counters().mul_adds_for(MulAddKind::AttentionScore) == m * n * d);
    REQUIRE(g.counters().mul_adds_for(MulAddKind::AttentionValue) == m * n * d);

    Graph g2;
    REQUIRE_THROWS_AS(g2.multihead_attention(q, k, v, 2, std::vector<std::uint8_t>(6, 0), PairKind::SelfAttn),
                      ContractError);
    REQUIRE_THROWS_AS(g2.multihead_attention(q, k, v, 3, {}, PairKind::SelfAttn), ConfigError);
}

TEST_CASE("multihead attention gradient matches central differences") {
    SeededRng rng(41);
    const Index m = 3, n = 5, d = 8;
    Tensor q = randn({m, d}, rng, 0.7);
    Tensor k = randn({n, d}, rng, 0.7);
    Tensor v = randn({n, d}, rng, 0.7);
    Tensor w = randn({m, d}, rng);
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 1};
    auto f = [&](Graph& g) {
        return g.sum_all(g.mul(g.multihead_attention(q, k, v, 2, mask, PairKind::SelfAttn), w));
    };
    auto res = grad_check(f, {q, k, v}, 1e-4);
    INFO(res.worst << " err " << res.max_rel_err);
    REQUIRE(res.pass);
}

TEST_CASE("embedding and frame-row addition") {
    SeededRng rng(43);
    Tensor table = randn({10, 4}, rng);
    Graph g;
    Tensor e = g.embedding(table, {3, 3, 9});
    for (Index j = 0; j < 4; ++j) {
        REQUIRE(e.at(0, j) == table.at(3, j));
        REQUIRE(e.at(1, j) == table.at(3, j));
        REQUIRE(e.at(2, j) == table.at(9, j));
    }
    REQUIRE_THROWS_AS(g.embedding(table, {10}), IndexError);

    Tensor x = randn({6, 4}, rng);
    Tensor frames = randn({3, 4}, rng);
    Tensor y = g.add_frame_rows(x, frames, 3, 2);
    for (Index f = 0; f < 3; ++f)
        for (Index b = 0; b < 2; ++b)
            for (Index j = 0; j < 4; ++j)
                REQUIRE(y.at(f * 2 + b, j) == Catch::Approx(x.at(f * 2 + b, j) + frames.at(f, j)));
    REQUIRE_THROWS_AS(g.add_frame_rows(x, frames, 4, 2), ShapeError);

    auto f = [&](Graph& gg) {
        Tensor emb = gg.embedding(table, {1, 4, 4, 2, 0, 7});
        Tensor h = gg.add_frame_rows(emb, frames, 3, 2);
        return gg.sum_all(gg.mul(h, x));
    };
    auto res = grad_check(f, {table, frames}, 1e-5);
    REQUIRE(res.pass);
}

TEST_CASE("seeded rng reproducibility") {
    SeededRng a(12345), b(12345);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.next_u64() == b.next_u64());
    }
    SeededRng c(12345), d(54321);
    REQUIRE(c.derive(7).next_u64() == SeededRng(12345).derive(7).next_u64());
    REQUIRE(c.normal() != d.normal());
}

TEST_CASE("liveness accounting rises during forward and drains in backward") {
    SeededRng rng(47);
    Tensor x = randn({8, 8}, rng);
    x.set_requires_grad(true);
    Graph g;
    Tensor h = g.matmul(x, x);
    const Index after_one = g.counters().live_scalars;
    REQUIRE(after_one == 64);
    Tensor loss = g.sum_all(g.mul(h, h));
    REQUIRE(g.counters().live_scalars > after_one);
    REQUIRE(g.counters().peak_live_scalars == g.counters().live_scalars);
    const Index peak = g.counters().peak_live_scalars;
    g.backward(loss);
    REQUIRE(g.counters().live_scalars == 0);
    REQUIRE(g.counters().peak_live_scalars == peak);
}

TEST_CASE("no-grad graphs skip the tape") {
    SeededRng rng(53);
    Tensor x = randn({4, 4}, rng);
    x.set_requires_grad(true);
    Graph g(false);
    Tensor y = g.matmul(x, x);
    REQUIRE(g.steps() == 0);
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(g.counters().total_mul_adds() == 64);
    REQUIRE(g.counters().live_scalars == 0);
}

TEST_CASE("non-finite forward results raise a numeric error naming the op") {
    Tensor x = Tensor::full({1, 2}, 1e308);
    Graph g;
    try {
        g.mul(x, x);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        REQUIRE(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("replaying a seeded pipeline is bit-identical") {
    auto run = []() {
        SeededRng rng(99);
        Tensor x = Tensor::randn({6, 6}, rng);
        Tensor w = Tensor::randn({6, 6}, rng);
        Graph g;
        Tensor loss = g.mean_all(g.gelu(g.matmul(x, w)));
        return loss.item();
    };
    const double a = run();
    const double b = run();
    REQUIRE(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("throughput probe", "[.][perf]") {
    SeededRng rng(1);
    const Index n = 64, d = 64;
    Tensor x = randn({n, d}, rng);
    x.set_requires_grad(true);
    Tensor w1 = randn({d, 2 * d}, rng);
    w1.set_requires_grad(true);
    Tensor w2 = randn({2 * d, d}, rng);
    w2.set_requires_grad(true);
    const int iters = 2000;
    auto t0 = std::chrono::steady_clock::now();
    Index mas = 0;
    for (int i = 0; i < iters; ++i) {
        Graph g;
        Tensor h = g.linear(x, w1, Tensor(), MulAddKind::Ffn);
        h = g.gelu(h);
        h = g.linear(h, w2, Tensor(), MulAddKind::Ffn);
        Tensor loss = g.mean_all(h);
        g.backward(loss);
        mas += g.counters().total_mul_adds();
    }
    auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    WARN("ffn fwd+bwd: " << secs * 1e6 / iters << " us/iter, " << (static_cast<double>(mas) / secs / 1e9)
                         << " G mul-add/s");
}

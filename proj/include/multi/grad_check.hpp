#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "multi/common.hpp"
#include "multi/tensor.hpp"

namespace multi {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    Index coords_checked = 0;
    bool pass = false;
    std::string worst;  // "name[i]" of the worst coordinate

    // relative error with an absolute floor so near-zero gradient pairs
    // compare absolutely instead of blowing up
    static double rel_err(double a, double b) {
        return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
    }
};

// Central-difference check of reverse-mode gradients. `f` must rebuild its
// computation on the supplied graph and return a scalar; it is evaluated
// twice up front and must reproduce the same value bitwise, otherwise the
// check refuses to run. When max_coords_per_leaf > 0, that many coordinates
// are sampled per leaf (without replacement) instead of checking all.
inline GradCheckResult grad_check(const std::function<Tensor(Graph&)>& f, std::vector<Tensor> wrt,
                                  double tolerance, double h = 1e-5, Index max_coords_per_leaf = -1,
                                  SeededRng* rng = nullptr) {
    auto eval = [&]() {
        Graph g;
        Tensor out = f(g);
        if (out.numel() != 1) {
            throw ContractError("grad_check: function must be scalar-valued");
        }
        return out.item();
    };
    const double v1 = eval();
    const double v2 = eval();
    if (std::memcmp(&v1, &v2, sizeof(double)) != 0) {
        throw DeterminismError("grad_check: function changed output on replay");
    }

    for (auto& t : wrt) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Graph g;
    Tensor out = f(g);
    g.backward(out);

    GradCheckResult res;
    res.tolerance = tolerance;
    for (std::size_t li = 0; li < wrt.size(); ++li) {
        Tensor& t = wrt[li];
        const Index n = t.numel();
        std::vector<Index> coords;
        if (max_coords_per_leaf > 0 && max_coords_per_leaf < n) {
            if (!rng) {
                throw ContractError("grad_check: sampling coordinates requires an rng");
            }
            std::vector<Index> all(static_cast<std::size_t>(n));
            for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
            for (Index i = 0; i < max_coords_per_leaf; ++i) {
                const Index j = i + rng->uniform_int(0, n - i);
                std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
            }
            coords.assign(all.begin(), all.begin() + max_coords_per_leaf);
        } else {
            coords.resize(static_cast<std::size_t>(n));
            for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        }

        for (Index c : coords) {
            const double saved = t.data()[static_cast<std::size_t>(c)];
            t.data()[static_cast<std::size_t>(c)] = saved + h;
            const double fp = eval();
            t.data()[static_cast<std::size_t>(c)] = saved - h;
            const double fm = eval();
            t.data()[static_cast<std::size_t>(c)] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double ag = t.grad()[static_cast<std::size_t>(c)];
            const double err = GradCheckResult::rel_err(ag, fd);
            ++res.coords_checked;
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst = (t.name().empty() ? ("leaf" + std::to_string(li)) : t.name()) + "[" +
                            std::to_string(c) + "]";
            }
        }
    }
    res.pass = res.max_rel_err <= tolerance;
    return res;
}

}  // namespace multi

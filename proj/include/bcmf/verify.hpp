#pragma once

// Gradient verification suite: every differentiable op, the LMFM block in
// each connection mode, the boundary term and the total objective, each on
// several random instances no larger than [2,4,16,16].

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "bcmf/bcl.hpp"
#include "bcmf/gradcheck.hpp"
#include "bcmf/lmfm.hpp"
#include "bcmf/module.hpp"
#include "bcmf/nn_ops.hpp"
#include "bcmf/random.hpp"

namespace bcmf {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckResult {
    std::string name;
    std::size_t instances = 0;
    double max_error = 0.0;
    bool passed() const { return max_error <= kGradcheckTolerance; }
};

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// Random label maps made of a few axis-aligned blocks, so they have boundaries.
inline LabelBatch random_block_labels(std::size_t n, std::size_t h, std::size_t w, int classes, Rng& rng, double ignore_prob = 0.0) {
    LabelBatch out;
    for (std::size_t b = 0; b < n; ++b) {
        LabelMap lm(h, w, classes, static_cast<std::int32_t>(rng.uniform_int(0, classes - 1)));
        for (int r = 0; r < 3; ++r) {
            const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h) - 1));
            const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w) - 1));
            const auto y1 = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(y0), static_cast<std::int64_t>(h) - 1));
            const auto x1 = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(x0), static_cast<std::int64_t>(w) - 1));
            const auto cls = static_cast<std::int32_t>(rng.uniform_int(0, classes - 1));
            for (std::size_t i = y0; i <= y1; ++i)
                for (std::size_t j = x0; j <= x1; ++j) lm.at(i, j) = cls;
        }
        for (auto& v : lm.labels)
            if (ignore_prob > 0.0 && rng.bernoulli(ignore_prob)) v = lm.ignore_index;
        out.push_back(std::move(lm));
    }
    return out;
}

/// Scalar probe of a tensor-valued op: sum(y * R) with fixed random R.
inline Tensor project(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

namespace detail {

struct GradcheckCase {
    std::string name;
    // Builds one instance from the rng: returns the closure and its leaves.
    std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(Rng&)> make;
};

inline LmfmConfig small_lmfm_config(ConnectionMode mode) { return {4, 2, 3, {1, 2, 4, kGlobalScale}, mode}; }

inline std::pair<std::function<Tensor()>, std::vector<Tensor>> lmfm_instance(Rng& rng, ConnectionMode mode, Mode bn_mode) {
    auto set = std::make_shared<ParamSet>();
    ParamBuilder pb(*set, rng.next_u64());
    auto cfg = small_lmfm_config(mode);
    auto params = std::make_shared<LmfmParams>(build_lmfm(cfg, pb, "lmfm"));
    // Non-trivial BN affine parameters and running statistics.
    for (auto& e : set->entries()) {
        if (e.name.ends_with(".gamma")) for (double& v : e.tensor.data()) v = rng.uniform(0.5, 1.5);
        if (e.name.ends_with(".beta") || e.name.ends_with(".bias") || e.name.ends_with(".running_mean"))
            for (double& v : e.tensor.data()) v = rng.uniform(-0.3, 0.3);
        if (e.name.ends_with(".running_var")) for (double& v : e.tensor.data()) v = rng.uniform(0.5, 2.0);
    }
    Tensor x = random_tensor({2, 4, 16, 16}, rng);
    Tensor r = random_tensor({2, 3, 16, 16}, rng);
    std::vector<Tensor> leaves{x};
    for (const Tensor& t : set->trainable()) leaves.push_back(t);
    auto f = [set, params, cfg, x, r, bn_mode]() { return project(lmfm_forward(x, cfg, *params, bn_mode), r); };
    return {f, leaves};
}

inline std::vector<GradcheckCase> gradcheck_cases() {
    using Inst = std::pair<std::function<Tensor()>, std::vector<Tensor>>;
    std::vector<GradcheckCase> cases;
    cases.push_back({"add", [](Rng& rng) -> Inst {
                         Tensor a = random_tensor({2, 3, 5, 5}, rng), b = random_tensor({2, 3, 5, 5}, rng), r = random_tensor({2, 3, 5, 5}, rng);
                         return {[=] { return project(add(a, b), r); }, {a, b}};
                     }});
    cases.push_back({"mul", [](Rng& rng) -> Inst {
                         Tensor a = random_tensor({2, 3, 5, 5}, rng), b = random_tensor({2, 3, 5, 5}, rng), r = random_tensor({2, 3, 5, 5}, rng);
                         return {[=] { return project(mul(a, b), r); }, {a, b}};
                     }});
    cases.push_back({"scale", [](Rng& rng) -> Inst {
                         Tensor a = random_tensor({2, 4, 3, 3}, rng), r = random_tensor({2, 4, 3, 3}, rng);
                         const double c = rng.uniform(-2.0, 2.0);
                         return {[=] { return project(scale(a, c), r); }, {a}};
                     }});
    cases.push_back({"sum_mean", [](Rng& rng) -> Inst {
                         Tensor a = random_tensor({2, 4, 4, 4}, rng);
                         return {[=] { return add(sum(mul(a, a)), mean(a)); }, {a}};
                     }});
    cases.push_back({"conv2d_3x3_s1", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 3, 9, 9}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
                         Tensor r = random_tensor({2, 4, 9, 9}, rng);
                         return {[=] { return project(conv2d(x, {w, b, 1, 1}), r); }, {x, w, b}};
                     }});
    cases.push_back({"conv2d_3x3_s2", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 4, 16, 16}, rng), w = random_tensor({3, 4, 3, 3}, rng);
                         Tensor r = random_tensor({2, 3, 8, 8}, rng);
                         return {[=] { return project(conv2d(x, {w, Tensor(), 2, 1}), r); }, {x, w}};
                     }});
    cases.push_back({"conv2d_1x1", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 4, 6, 6}, rng), w = random_tensor({3, 4, 1, 1}, rng), b = random_tensor({3}, rng);
                         Tensor r = random_tensor({2, 3, 6, 6}, rng);
                         return {[=] { return project(conv2d(x, {w, b, 1, 0}), r); }, {x, w, b}};
                     }});
    cases.push_back({"avg_pool2d", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 3, 8, 8}, rng), r2 = random_tensor({2, 3, 4, 4}, rng), r4 = random_tensor({2, 3, 2, 2}, rng);
                         return {[=] { return add(project(avg_pool2d(x, 2, 2), r2), project(avg_pool2d(x, 4, 4), r4)); }, {x}};
                     }});
    cases.push_back({"global_avg_pool", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 4, 5, 7}, rng), r = random_tensor({2, 4, 1, 1}, rng);
                         return {[=] { return project(global_avg_pool(x), r); }, {x}};
                     }});
    cases.push_back({"bilinear_upsample", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 3, 3, 5}, rng), r = random_tensor({2, 3, 7, 11}, rng);
                         Tensor y = random_tensor({1, 2, 4, 4}, rng), q = random_tensor({1, 2, 16, 16}, rng);
                         return {[=] { return add(project(bilinear_upsample(x, 7, 11), r), project(bilinear_upsample(y, 16, 16), q)); }, {x, y}};
                     }});
    cases.push_back({"batch_norm_train", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 3, 4, 4}, rng), r = random_tensor({2, 3, 4, 4}, rng);
                         auto bn = std::make_shared<BatchNormParams>();
                         bn->gamma = random_tensor({3}, rng, 0.5, 1.5);
                         bn->beta = random_tensor({3}, rng);
                         return {[=] { return project(batch_norm(x, *bn, Mode::train), r); }, {x, bn->gamma, bn->beta}};
                     }});
    cases.push_back({"batch_norm_eval", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 3, 4, 4}, rng), r = random_tensor({2, 3, 4, 4}, rng);
                         auto bn = std::make_shared<BatchNormParams>();
                         bn->gamma = random_tensor({3}, rng, 0.5, 1.5);
                         bn->beta = random_tensor({3}, rng);
                         bn->running_mean = random_tensor({3}, rng);
                         bn->running_var = random_tensor({3}, rng, 0.5, 2.0);
                         return {[=] { return project(batch_norm(x, *bn, Mode::eval), r); }, {x, bn->gamma, bn->beta}};
                     }});
    cases.push_back({"relu", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 3, 6, 6}, rng), r = random_tensor({2, 3, 6, 6}, rng);
                         return {[=] { return project(relu(x), r); }, {x}};
                     }});
    cases.push_back({"softmax_channels", [](Rng& rng) -> Inst {
                         Tensor x = random_tensor({2, 4, 5, 5}, rng, -3.0, 3.0), r = random_tensor({2, 4, 5, 5}, rng);
                         return {[=] { return project(softmax_channels(x), r); }, {x}};
                     }});
    cases.push_back({"cross_entropy_map", [](Rng& rng) -> Inst {
                         Tensor p = random_tensor({2, 3, 4, 4}, rng, 0.05, 1.0), r = random_tensor({2, 4, 4}, rng);
                         LabelBatch lb = random_block_labels(2, 4, 4, 3, rng, 0.1);
                         return {[=] { return project(cross_entropy_map(p, lb), r); }, {p}};
                     }});
    cases.push_back({"concat_channels", [](Rng& rng) -> Inst {
                         Tensor a = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2, 3, 3, 3}, rng), r = random_tensor({2, 5, 3, 3}, rng);
                         return {[=] { return project(concat_channels({a, b}), r); }, {a, b}};
                     }});
    cases.push_back({"gather_mean", [](Rng& rng) -> Inst {
                         Tensor a = random_tensor({2, 4, 4}, rng);
                         std::vector<std::size_t> idx;
                         for (std::size_t i = 0; i < a.numel(); ++i)
                             if (rng.bernoulli(0.4)) idx.push_back(i);
                         return {[=] { return gather_mean(mul(a, a), idx); }, {a}};
                     }});
    cases.push_back({"lmfm_interval", [](Rng& rng) { return lmfm_instance(rng, ConnectionMode::interval, Mode::train); }});
    cases.push_back({"lmfm_cascade", [](Rng& rng) { return lmfm_instance(rng, ConnectionMode::cascade, Mode::train); }});
    cases.push_back({"lmfm_none", [](Rng& rng) { return lmfm_instance(rng, ConnectionMode::none, Mode::train); }});
    cases.push_back({"lmfm_interval_eval", [](Rng& rng) { return lmfm_instance(rng, ConnectionMode::interval, Mode::eval); }});
    cases.push_back({"boundary_loss", [](Rng& rng) -> Inst {
                         Tensor logits = random_tensor({2, 3, 8, 8}, rng, -2.0, 2.0);
                         LabelBatch lb = random_block_labels(2, 8, 8, 3, rng, 0.05);
                         BclConfig cfg;
                         cfg.step = static_cast<std::size_t>(rng.uniform_int(1, 2));
                         cfg.keep_fraction = 0.5;
                         cfg.min_kept = 4;
                         cfg.lambda1 = rng.uniform(0.2, 1.0);
                         cfg.lambda2 = rng.uniform(0.2, 1.0);
                         return {[=] { return boundary_loss(softmax_channels(logits), lb, cfg); }, {logits}};
                     }});
    cases.push_back({"total_loss", [](Rng& rng) -> Inst {
                         const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 2));
                         Tensor logits = random_tensor({n, 3, 8, 8}, rng, -2.0, 2.0);
                         LabelBatch lb = random_block_labels(n, 8, 8, 3, rng, 0.05);
                         BclConfig cfg;
                         cfg.alpha = rng.uniform(0.2, 1.0);
                         cfg.min_kept = 8;
                         return {[=] { return total_loss(logits, lb, cfg).total; }, {logits}};
                     }});
    return cases;
}

}  // namespace detail

/// Runs every case on `instances` random instances; seeds derive from `seed`.
inline std::vector<GradcheckResult> gradcheck_suite(std::size_t instances = 5, std::uint64_t seed = 2024) {
    std::vector<GradcheckResult> out;
    for (const auto& c : detail::gradcheck_cases()) {
        GradcheckResult r{c.name, instances, 0.0};
        for (std::size_t i = 0; i < instances; ++i) {
            Rng rng = Rng::for_stream(seed, fnv1a(c.name.data(), c.name.size()) + i);
            auto [f, leaves] = c.make(rng);
            r.max_error = std::max(r.max_error, gradcheck(f, leaves, {1e-5, 0, seed + i}));
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace bcmf

#pragma once

// Finite-difference verification of analytic gradients.
//
// `f` is a closure over its leaf tensors (handles); it is evaluated once on
// a tape to obtain analytic gradients, then repeatedly without a tape while
// individual leaf entries are perturbed in place.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bcmf/random.hpp"
#include "bcmf/tensor.hpp"

namespace bcmf {

struct GradcheckOptions {
    double eps = 1e-5;  // relative step: eps * (1 + |x|)
    // Check at most this many coordinates per leaf (0 = all), chosen with `seed`.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
    double retry_above = 1e-5;
};

/// max |analytic - numeric| / max(1, |numeric|) over the checked coordinates.
inline double gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> leaves, const GradcheckOptions& opt = {}) {
    for (Tensor& t : leaves) {
        t.set_requires_grad();
        t.zero_grad();
    }
    Tape tape;
    Tensor loss;
    {
        Tape::Scope scope(tape);
        loss = f();
    }
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (Tensor& t : leaves) {
        auto g = t.grad_buffer();
        analytic.emplace_back(g.begin(), g.end());
        t.zero_grad();
    }

    Rng rng(opt.seed);
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& x = leaves[li];
        std::vector<std::size_t> coords(x.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
            for (std::size_t i = 0; i < opt.max_coords; ++i)
                std::swap(coords[i], coords[i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(coords.size() - i - 1)))]);
            coords.resize(opt.max_coords);
        }
        for (std::size_t idx : coords) {
            const double x0 = x[idx];
            auto error_at = [&](double h) {
                x[idx] = x0 + h;
                const double fp = f().item();
                x[idx] = x0 - h;
                const double fm = f().item();
                x[idx] = x0;
                const double numeric = (fp - fm) / ((x0 + h) - (x0 - h));
                return std::abs(analytic[li][idx] - numeric) / std::max(1.0, std::abs(numeric));
            };
            const double h = opt.eps * (1.0 + std::abs(x0));
            double err = error_at(h);
            // A ReLU kink inside [x0-h, x0+h] spoils the central difference;
            // a much smaller step separates that from a wrong gradient.
            if (err > opt.retry_above) err = std::min(err, error_at(h * 1e-2));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace bcmf

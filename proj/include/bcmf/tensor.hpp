#pragma once

// Dense double-precision tensors and a tape-based reverse-mode engine.
//
// A Tensor is a cheap handle onto shared storage. Operations that see an
// active Tape (see Tape::Scope) and at least one input with requires_grad
// record an adjoint closure; Tape::backward replays those closures in
// reverse record order. Without an active tape nothing is recorded, which is
// how inference and finite-difference evaluation run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bcmf/error.hpp"

namespace bcmf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

class Tensor {
   public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<Impl>()) {
        for (std::size_t e : shape) require(e > 0, ErrorKind::shape, "tensor extents must be positive: " + shape_str(shape));
        impl_->data.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<Impl>()) {
        for (std::size_t e : shape) require(e > 0, ErrorKind::shape, "tensor extents must be positive: " + shape_str(shape));
        require(shape_numel(shape) == values.size(), ErrorKind::shape,
                "data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    double& operator[](std::size_t i) { return impl_->data[i]; }
    double operator[](std::size_t i) const { return impl_->data[i]; }

    double item() const {
        require(numel() == 1, ErrorKind::shape, "item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }

    /// Gradient buffer, allocated (zero-filled) on first use. Tensors are
    /// handles, so this is available through const references too.
    std::span<double> grad_buffer() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }

    void zero_grad() {
        if (impl_) impl_->grad.clear();
    }

    /// Deep copy of the values; the copy is a fresh leaf with no gradient.
    Tensor clone() const { return Tensor(impl_->shape, impl_->data); }

    /// Reshape sharing nothing with the source tensor; not differentiable.
    Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), impl_->data); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

   private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

class Tape {
   public:
    using Adjoint = std::function<void()>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Tape that differentiable ops record onto, or nullptr.
    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

    class Scope {
       public:
        explicit Scope(Tape& tape) : previous_(active()) { active() = &tape; }
        ~Scope() { active() = previous_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

       private:
        Tape* previous_;
    };

    void record(Tensor output, Adjoint adjoint) { entries_.push_back({std::move(output), std::move(adjoint)}); }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    /// Populates grad on every requires_grad tensor reachable from loss.
    void backward(Tensor& loss) {
        require(loss.defined() && loss.numel() == 1, ErrorKind::shape,
                "backward() needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
        require(!entries_.empty(), ErrorKind::state, "backward() on an empty tape");
        require(std::isfinite(loss.item()), ErrorKind::non_finite, "loss is not finite");
        loss.grad_buffer()[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (!it->output.has_grad()) continue;
            require(all_finite(it->output.grad()), ErrorKind::non_finite, "non-finite adjoint during backward");
            it->adjoint();
        }
    }

   private:
    struct Entry {
        Tensor output;
        Adjoint adjoint;
    };
    std::vector<Entry> entries_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

/// Tape to record on if any input is differentiable, else nullptr.
inline Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = Tape::active();
    return (tape && any_requires_grad(inputs)) ? tape : nullptr;
}

inline void check_finite(const Tensor& t, const char* op) {
    if (!all_finite(t.data())) fail(ErrorKind::non_finite, std::string(op) + " produced a non-finite value");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::shape,
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    detail::check_finite(out, "add");
    if (Tape* tape = detail::recording_tape({&a, &b})) {
        out.set_requires_grad();
        tape->record(out, [a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    detail::check_finite(out, "mul");
    if (Tape* tape = detail::recording_tape({&a, &b})) {
        out.set_requires_grad();
        tape->record(out, [a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double factor) {
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
    detail::check_finite(out, "scale");
    if (Tape* tape = detail::recording_tape({&a})) {
        out.set_requires_grad();
        tape->record(out, [a, out, factor]() mutable {
            auto g = out.grad();
            auto ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
        });
    }
    return out;
}

/// Sum of all elements as a [1] tensor.
inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    detail::check_finite(out, "sum");
    if (Tape* tape = detail::recording_tape({&a})) {
        out.set_requires_grad();
        tape->record(out, [a, out]() mutable {
            const double g = out.grad()[0];
            for (double& v : a.grad_buffer()) v += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

enum class FiniteDiffStep {
    absolute,  // perturbation eps for every element
    relative,  // perturbation eps * (1 + |x_i|)
};

/// Central-difference gradient of a scalar function; the verification oracle
/// for every analytic adjoint in this project.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps,
                               FiniteDiffStep step = FiniteDiffStep::absolute) {
    require(eps > 0.0, ErrorKind::domain, "finite_diff_grad: eps must be positive");
    Tensor probe = x.clone();
    Tensor grad(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double x0 = x[i];
        const double h = step == FiniteDiffStep::relative ? eps * (1.0 + std::abs(x0)) : eps;
        probe[i] = x0 + h;
        const double fp = f(probe);
        probe[i] = x0 - h;
        const double fm = f(probe);
        probe[i] = x0;
        require(std::isfinite(fp) && std::isfinite(fm), ErrorKind::non_finite, "finite_diff_grad: f returned a non-finite value");
        grad[i] = (fp - fm) / ((x0 + h) - (x0 - h));
    }
    return grad;
}

/// max_i |analytic_i - numeric_i| / max(1, |numeric_i|)
inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    require(analytic.size() == numeric.size(), ErrorKind::shape, "max_relative_error: length mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(numeric[i])));
    }
    return worst;
}

}  // namespace bcmf

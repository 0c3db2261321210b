#pragma once

// Parameter bookkeeping shared by the LMFM block and the network: named
// parameter sets, deterministic initialization, conv/BN layer bundles and
// the cost (params / FLOPs) accounting convention.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bcmf/error.hpp"
#include "bcmf/nn_ops.hpp"
#include "bcmf/random.hpp"
#include "bcmf/tensor.hpp"

namespace bcmf {

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool trainable = true;  // false for BN running statistics
};

/// Ordered, named collection of parameters and buffers. Tensors are shared
/// handles, so the layer structs and the set see the same storage.
class ParamSet {
   public:
    void add(std::string name, Tensor tensor, bool trainable = true) {
        for (const auto& e : entries_) require(e.name != name, ErrorKind::config, "duplicate parameter name " + name);
        entries_.push_back({std::move(name), std::move(tensor), trainable});
    }

    const std::vector<NamedTensor>& entries() const { return entries_; }
    std::vector<NamedTensor>& entries() { return entries_; }

    const NamedTensor* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.tensor);
        return out;
    }

    std::uint64_t trainable_count() const {
        std::uint64_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.tensor.numel();
        return n;
    }

    /// Hash over names, shapes and raw value bytes of every entry.
    std::uint64_t checksum() const {
        std::uint64_t h = fnv1a(nullptr, 0);
        for (const auto& e : entries_) {
            h = fnv1a(e.name.data(), e.name.size(), h);
            for (std::size_t d : e.tensor.shape()) h = fnv1a(&d, sizeof d, h);
            h = fnv1a(e.tensor.data().data(), e.tensor.numel() * sizeof(double), h);
        }
        return h;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

   private:
    std::vector<NamedTensor> entries_;
};

/// Conv followed by an optional batch norm and optional ReLU.
struct ConvBn {
    ConvParams conv;
    BatchNormParams bn;
    bool has_bn = true;

    Tensor apply(const Tensor& x, Mode mode, bool with_relu) {
        Tensor y = conv2d(x, conv);
        if (has_bn) y = batch_norm(y, bn, mode);
        return with_relu ? relu(y) : y;
    }
};

/// Creates and registers parameters in a fixed order from one random stream.
class ParamBuilder {
   public:
    ParamBuilder(ParamSet& set, std::uint64_t seed) : set_(set), rng_(seed) {}

    /// Kaiming-style fan-in uniform weights, zero bias.
    ConvParams conv(const std::string& name, std::size_t co, std::size_t ci, std::size_t k, std::size_t stride, bool bias) {
        require(co >= 1 && ci >= 1 && k % 2 == 1, ErrorKind::config, "conv " + name + ": need Co, Ci >= 1 and odd kernel");
        ConvParams p;
        p.stride = stride;
        p.pad = k / 2;
        p.weight = Tensor({co, ci, k, k});
        const double bound = std::sqrt(6.0 / static_cast<double>(ci * k * k));
        for (double& w : p.weight.data()) w = rng_.uniform(-bound, bound);
        p.weight.set_requires_grad();
        set_.add(name + ".weight", p.weight);
        if (bias) {
            p.bias = Tensor({co}, 0.0);
            p.bias.set_requires_grad();
            set_.add(name + ".bias", p.bias);
        }
        return p;
    }

    BatchNormParams batch_norm(const std::string& name, std::size_t c) {
        BatchNormParams p;
        p.gamma = Tensor({c}, 1.0);
        p.beta = Tensor({c}, 0.0);
        p.gamma.set_requires_grad();
        p.beta.set_requires_grad();
        p.running_mean = Tensor({c}, 0.0);
        p.running_var = Tensor({c}, 1.0);
        set_.add(name + ".gamma", p.gamma);
        set_.add(name + ".beta", p.beta);
        set_.add(name + ".running_mean", p.running_mean, false);
        set_.add(name + ".running_var", p.running_var, false);
        return p;
    }

    /// Conv without bias feeding a batch norm.
    ConvBn conv_bn(const std::string& name, std::size_t co, std::size_t ci, std::size_t k, std::size_t stride = 1) {
        ConvBn layer;
        layer.conv = conv(name + ".conv", co, ci, k, stride, false);
        layer.bn = batch_norm(name + ".bn", co);
        return layer;
    }

    /// Conv with bias and no batch norm.
    ConvBn conv_only(const std::string& name, std::size_t co, std::size_t ci, std::size_t k, std::size_t stride = 1) {
        ConvBn layer;
        layer.conv = conv(name + ".conv", co, ci, k, stride, true);
        layer.has_bn = false;
        return layer;
    }

   private:
    ParamSet& set_;
    Rng rng_;
};

/// Parameter and FLOP accounting. Convolution: Co*Ho*Wo*Ci*kh*kw MACs,
/// 1 MAC = 2 FLOPs, plus one add per output element when a bias is present.
/// Batch norm, ReLU, pooling, bilinear upsampling and elementwise adds cost
/// 1 FLOP per output element. BN running statistics are not parameters.
struct Cost {
    std::uint64_t params = 0;
    std::uint64_t flops = 0;

    Cost& operator+=(const Cost& o) {
        params += o.params;
        flops += o.flops;
        return *this;
    }
    friend Cost operator+(Cost a, const Cost& b) { return a += b; }
    bool operator==(const Cost&) const = default;
};

inline Cost conv_cost(std::size_t ci, std::size_t co, std::size_t k, std::size_t ho, std::size_t wo, bool bias) {
    const std::uint64_t macs = static_cast<std::uint64_t>(co) * ho * wo * ci * k * k;
    Cost c;
    c.params = static_cast<std::uint64_t>(co) * ci * k * k + (bias ? co : 0);
    c.flops = 2 * macs + (bias ? static_cast<std::uint64_t>(co) * ho * wo : 0);
    return c;
}

inline Cost elementwise_cost(std::size_t elements) { return {0, elements}; }

inline Cost batch_norm_cost(std::size_t c, std::size_t h, std::size_t w) { return {2 * static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(c) * h * w}; }

/// Conv (no bias) + BN (+ ReLU) block.
inline Cost conv_bn_cost(std::size_t ci, std::size_t co, std::size_t k, std::size_t ho, std::size_t wo, bool with_relu) {
    Cost c = conv_cost(ci, co, k, ho, wo, false) + batch_norm_cost(co, ho, wo);
    if (with_relu) c += elementwise_cost(co * ho * wo);
    return c;
}

}  // namespace bcmf

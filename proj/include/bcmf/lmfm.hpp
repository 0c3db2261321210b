#pragma once

// Low-resolution multi-scale fusion block.
//
// The input map is average-pooled at increasing factors (plus a global
// pool), each branch is projected with a 1x1 conv, and branches are fused
// coarse-to-fine before being concatenated, compressed with a 1x1 conv and
// added to a 1x1 shortcut of the input.
//
// Fusion modes:
//   interval  z_i = f(b_i + up(z_{i+2}))  two interleaved chains (even/odd)
//   cascade   z_i = f(b_i + up(z_{i+1}))  adjacent chaining, DAPPM-like
//   none      z_i = b_i
// with f = conv3x3-BN-ReLU; the two coarsest branches are never fused.

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "bcmf/error.hpp"
#include "bcmf/module.hpp"
#include "bcmf/nn_ops.hpp"

namespace bcmf {

inline constexpr std::size_t kGlobalScale = 0;

enum class ConnectionMode { interval, cascade, none };

inline std::string to_string(ConnectionMode m) {
    switch (m) {
        case ConnectionMode::interval: return "interval";
        case ConnectionMode::cascade: return "cascade";
        case ConnectionMode::none: return "none";
    }
    return "?";
}

inline ConnectionMode parse_connection_mode(const std::string& s) {
    if (s == "interval") return ConnectionMode::interval;
    if (s == "cascade") return ConnectionMode::cascade;
    if (s == "none") return ConnectionMode::none;
    fail(ErrorKind::config, "unknown LMFM connection mode '" + s + "'");
}

struct LmfmConfig {
    std::size_t in_channels = 32;
    std::size_t branch_channels = 8;
    std::size_t out_channels = 16;
    std::vector<std::size_t> scales{1, 2, 4, kGlobalScale};  // kGlobalScale marks the global pool
    ConnectionMode connection_mode = ConnectionMode::interval;

    std::size_t num_branches() const { return scales.size(); }

    std::size_t largest_finite_scale() const {
        std::size_t s = 1;
        for (std::size_t v : scales)
            if (v != kGlobalScale) s = std::max(s, v);
        return s;
    }

    void validate() const {
        require(in_channels >= 1 && branch_channels >= 1 && out_channels >= 1, ErrorKind::config, "lmfm: channel counts must be >= 1");
        require(scales.size() >= 2, ErrorKind::config, "lmfm: need at least two branches (scale 1 and global)");
        require(scales.front() == 1, ErrorKind::config, "lmfm: first scale must be 1");
        require(scales.back() == kGlobalScale, ErrorKind::config, "lmfm: last scale must be the global marker");
        for (std::size_t i = 1; i + 1 < scales.size(); ++i)
            require(scales[i] != kGlobalScale && scales[i] > scales[i - 1], ErrorKind::config, "lmfm: finite scales must be strictly increasing");
        if (connection_mode == ConnectionMode::interval)
            require(scales.size() >= 3, ErrorKind::config, "lmfm: interval connection needs at least three branches");
    }

    std::string scales_str() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < scales.size(); ++i) {
            if (i) os << ',';
            if (scales[i] == kGlobalScale)
                os << "global";
            else
                os << scales[i];
        }
        return os.str();
    }
};

inline std::vector<std::size_t> parse_scales(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (item == "global" || item == "GLOBAL") {
            out.push_back(kGlobalScale);
            continue;
        }
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(item, &used);
            require(used == item.size() && v > 0, ErrorKind::config, "bad scale '" + item + "'");
            out.push_back(v);
        } catch (const std::logic_error&) {
            fail(ErrorKind::config, "bad scale '" + item + "'");
        }
    }
    return out;
}

struct LmfmParams {
    std::vector<ConvBn> branches;  // one per scale; the global branch has a bias and no BN
    std::vector<ConvBn> fusions;   // fusions[i] produces z_i, i = 0 .. S-3; empty in none mode
    ConvParams compress;           // concat -> out_channels
    ConvParams shortcut;           // input -> out_channels
};

inline LmfmParams build_lmfm(const LmfmConfig& cfg, ParamBuilder& builder, const std::string& prefix) {
    cfg.validate();
    LmfmParams p;
    const std::size_t branches = cfg.num_branches();
    for (std::size_t i = 0; i < branches; ++i) {
        const std::string name = prefix + ".branch" + std::to_string(i);
        if (cfg.scales[i] == kGlobalScale)
            p.branches.push_back(builder.conv_only(name, cfg.branch_channels, cfg.in_channels, 1));
        else
            p.branches.push_back(builder.conv_bn(name, cfg.branch_channels, cfg.in_channels, 1));
    }
    if (cfg.connection_mode != ConnectionMode::none) {
        for (std::size_t i = 0; i + 2 < branches; ++i)
            p.fusions.push_back(builder.conv_bn(prefix + ".fuse" + std::to_string(i), cfg.branch_channels, cfg.branch_channels, 3));
    }
    p.compress = builder.conv(prefix + ".compress", cfg.out_channels, cfg.branch_channels * branches, 1, 1, true);
    p.shortcut = builder.conv(prefix + ".shortcut", cfg.out_channels, cfg.in_channels, 1, 1, true);
    return p;
}

inline void check_lmfm_input(const Tensor& x, const LmfmConfig& cfg) {
    cfg.validate();
    require(x.defined() && x.rank() == 4, ErrorKind::shape, "lmfm: expected [N,C,H,W] input");
    require(x.dim(1) == cfg.in_channels, ErrorKind::shape,
            "lmfm: input has " + std::to_string(x.dim(1)) + " channels, config expects " + std::to_string(cfg.in_channels));
    const std::size_t s = cfg.largest_finite_scale();
    require(x.dim(2) % s == 0 && x.dim(3) % s == 0, ErrorKind::shape,
            "lmfm: input " + shape_str(x.shape()) + " not divisible by largest scale " + std::to_string(s));
}

inline Tensor upsample_to(const Tensor& x, std::size_t h, std::size_t w) {
    if (x.dim(2) == h && x.dim(3) == w) return x;
    return bilinear_upsample(x, h, w);
}

inline Tensor lmfm_forward(const Tensor& x, const LmfmConfig& cfg, LmfmParams& params, Mode mode) {
    check_lmfm_input(x, cfg);
    const std::size_t H = x.dim(2), W = x.dim(3);
    const std::size_t branches = cfg.num_branches();
    require(params.branches.size() == branches, ErrorKind::config, "lmfm: parameters do not match config");

    std::vector<Tensor> b(branches);
    for (std::size_t i = 0; i < branches; ++i) {
        const std::size_t s = cfg.scales[i];
        Tensor pooled = s == kGlobalScale ? global_avg_pool(x) : (s == 1 ? x : avg_pool2d(x, s, s));
        b[i] = params.branches[i].apply(pooled, mode, true);
    }

    std::vector<Tensor> z(b);
    if (cfg.connection_mode != ConnectionMode::none) {
        require(params.fusions.size() + 2 == branches, ErrorKind::config, "lmfm: fusion parameters do not match config");
        const std::size_t hop = cfg.connection_mode == ConnectionMode::interval ? 2 : 1;
        for (std::size_t i = branches - 2; i-- > 0;) {
            const Tensor& src = z[i + hop];
            Tensor mixed = add(b[i], upsample_to(src, b[i].dim(2), b[i].dim(3)));
            z[i] = params.fusions[i].apply(mixed, mode, true);
        }
    }

    std::vector<Tensor> full;
    full.reserve(branches);
    for (const Tensor& zi : z) full.push_back(upsample_to(zi, H, W));
    return add(conv2d(concat_channels(full), params.compress), conv2d(x, params.shortcut));
}

/// Parameter and FLOP count of one block on an H x W input.
inline Cost lmfm_cost(const LmfmConfig& cfg, std::size_t H, std::size_t W) {
    cfg.validate();
    const std::size_t s_max = cfg.largest_finite_scale();
    require(H % s_max == 0 && W % s_max == 0, ErrorKind::shape, "lmfm_cost: extents not divisible by largest scale");
    const std::size_t Cin = cfg.in_channels, Cb = cfg.branch_channels, Cout = cfg.out_channels;
    const std::size_t branches = cfg.num_branches();
    std::vector<std::size_t> bh(branches), bw(branches);
    Cost total;
    for (std::size_t i = 0; i < branches; ++i) {
        const std::size_t s = cfg.scales[i];
        if (s == kGlobalScale) {
            bh[i] = bw[i] = 1;
            total += elementwise_cost(Cin);
            total += conv_cost(Cin, Cb, 1, 1, 1, true) + elementwise_cost(Cb);
            continue;
        }
        bh[i] = H / s;
        bw[i] = W / s;
        if (s > 1) total += elementwise_cost(Cin * bh[i] * bw[i]);
        total += conv_bn_cost(Cin, Cb, 1, bh[i], bw[i], true);
    }
    if (cfg.connection_mode != ConnectionMode::none) {
        const std::size_t hop = cfg.connection_mode == ConnectionMode::interval ? 2 : 1;
        for (std::size_t i = 0; i + 2 < branches; ++i) {
            const std::size_t src = i + hop;
            const std::size_t elems = Cb * bh[i] * bw[i];
            if (bh[src] != bh[i] || bw[src] != bw[i]) total += elementwise_cost(elems);  // upsample
            total += elementwise_cost(elems);                                              // add
            total += conv_bn_cost(Cb, Cb, 3, bh[i], bw[i], true);
        }
    }
    for (std::size_t i = 0; i < branches; ++i)
        if (bh[i] != H || bw[i] != W) total += elementwise_cost(Cb * H * W);
    total += conv_cost(Cb * branches, Cout, 1, H, W, true);
    total += conv_cost(Cin, Cout, 1, H, W, true);
    total += elementwise_cost(Cout * H * W);
    return total;
}

}  // namespace bcmf

#pragma once

// Miniature dual-resolution segmentation network.
//
//   stem      two 3x3 stride-2 conv-BN-ReLU             -> 1/4
//   stage 1   high: residual blocks at 1/4
//             low:  3x3 stride-2 down + blocks at 1/8
//   fusion 1  low  += BN(conv3x3 s2(high))
//             high += up(BN(conv1x1(low)))
//   stage 2   high: blocks at 1/4
//             low:  3x3 stride-2 down + blocks at 1/16
//   fusion 2  low  += BN(conv3x3 s2(ReLU(BN(conv3x3 s2(high)))))
//             high += up(BN(conv1x1(low)))
//   context   high += up(LMFM(low))
//   head      3x3 conv-BN-ReLU, 1x1 conv to num_classes, bilinear up to H x W
//
// Every fusion sum is followed by a ReLU.

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bcmf/error.hpp"
#include "bcmf/lmfm.hpp"
#include "bcmf/module.hpp"
#include "bcmf/nn_ops.hpp"
#include "bcmf/random.hpp"

namespace bcmf {

struct NetConfig {
    std::size_t num_classes = 4;
    std::size_t in_channels = 3;
    std::size_t stem_channels = 8;
    std::size_t high_channels = 16;
    std::size_t low_channels = 32;
    std::size_t blocks_per_stage = 1;
    std::size_t head_channels = 16;
    std::size_t divisibility = 16;
    LmfmConfig lmfm{32, 8, 16, {1, 2, 4, kGlobalScale}, ConnectionMode::interval};

    /// Input extents must be multiples of this.
    std::size_t required_multiple() const { return divisibility * lmfm.largest_finite_scale(); }

    void validate() const {
        require(num_classes >= 2, ErrorKind::config, "network: need at least two classes");
        require(in_channels >= 1 && stem_channels >= 1 && high_channels >= 1 && low_channels >= 1 && head_channels >= 1,
                ErrorKind::config, "network: channel counts must be >= 1");
        require(divisibility == 16, ErrorKind::config, "network: the backbone downsamples by exactly 16");
        require(lmfm.in_channels == low_channels, ErrorKind::config, "network: lmfm.in_channels must equal low_channels");
        require(lmfm.out_channels == high_channels, ErrorKind::config, "network: lmfm.out_channels must equal high_channels");
        lmfm.validate();
    }

    void check_input(std::size_t h, std::size_t w) const {
        const std::size_t m = required_multiple();
        require(h > 0 && w > 0 && h % m == 0 && w % m == 0, ErrorKind::shape,
                "network: input " + std::to_string(h) + "x" + std::to_string(w) + " must be a multiple of " + std::to_string(m));
    }

    /// Canonical text form; its hash ties checkpoints to configs.
    std::string canonical() const {
        std::ostringstream os;
        os << "num_classes=" << num_classes << ";in_channels=" << in_channels << ";stem_channels=" << stem_channels
           << ";high_channels=" << high_channels << ";low_channels=" << low_channels << ";blocks_per_stage=" << blocks_per_stage
           << ";head_channels=" << head_channels << ";divisibility=" << divisibility << ";lmfm.branch_channels=" << lmfm.branch_channels
           << ";lmfm.scales=" << lmfm.scales_str() << ";lmfm.connection=" << to_string(lmfm.connection_mode);
        return os.str();
    }

    std::uint64_t digest() const {
        const std::string s = canonical();
        return fnv1a(s.data(), s.size());
    }
};

struct ResidualBlock {
    ConvBn first;
    ConvBn second;

    Tensor apply(const Tensor& x, Mode mode) {
        Tensor y = first.apply(x, mode, true);
        y = second.apply(y, mode, false);
        return relu(add(y, x));
    }
};

class Network {
   public:
    Network(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        ParamBuilder pb(params_, seed);
        const std::size_t Ch = cfg_.high_channels, Cl = cfg_.low_channels;
        stem1_ = pb.conv_bn("stem1", cfg_.stem_channels, cfg_.in_channels, 3, 2);
        stem2_ = pb.conv_bn("stem2", Ch, cfg_.stem_channels, 3, 2);
        high1_ = blocks(pb, "high1", Ch);
        down1_ = pb.conv_bn("down1", Cl, Ch, 3, 2);
        low1_ = blocks(pb, "low1", Cl);
        fuse1_down_ = pb.conv_bn("fuse1.down", Cl, Ch, 3, 2);
        fuse1_up_ = pb.conv_bn("fuse1.up", Ch, Cl, 1);
        high2_ = blocks(pb, "high2", Ch);
        down2_ = pb.conv_bn("down2", Cl, Cl, 3, 2);
        low2_ = blocks(pb, "low2", Cl);
        fuse2_down_a_ = pb.conv_bn("fuse2.down_a", Ch, Ch, 3, 2);
        fuse2_down_b_ = pb.conv_bn("fuse2.down_b", Cl, Ch, 3, 2);
        fuse2_up_ = pb.conv_bn("fuse2.up", Ch, Cl, 1);
        lmfm_ = build_lmfm(cfg_.lmfm, pb, "lmfm");
        head_ = pb.conv_bn("head", cfg_.head_channels, Ch, 3);
        classifier_ = pb.conv("classifier", cfg_.num_classes, cfg_.head_channels, 1, 1, true);
    }

    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    const NetConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    ConvParams& classifier() { return classifier_; }

    /// Raw logits [N, num_classes, H, W].
    Tensor forward(const Tensor& x, Mode mode) {
        require(x.defined() && x.rank() == 4, ErrorKind::shape, "network: expected [N,C,H,W] input");
        require(x.dim(1) == cfg_.in_channels, ErrorKind::shape, "network: wrong number of input channels");
        const std::size_t H = x.dim(2), W = x.dim(3);
        cfg_.check_input(H, W);

        Tensor t = stem1_.apply(x, mode, true);
        Tensor high = stem2_.apply(t, mode, true);
        Tensor low = down1_.apply(high, mode, true);
        for (auto& b : high1_) high = b.apply(high, mode);
        for (auto& b : low1_) low = b.apply(low, mode);
        {
            Tensor to_low = fuse1_down_.apply(high, mode, false);
            Tensor to_high = fuse1_up_.apply(low, mode, false);
            low = relu(add(low, to_low));
            high = relu(add(high, bilinear_upsample(to_high, high.dim(2), high.dim(3))));
        }

        low = down2_.apply(low, mode, true);
        for (auto& b : high2_) high = b.apply(high, mode);
        for (auto& b : low2_) low = b.apply(low, mode);
        {
            Tensor to_low = fuse2_down_b_.apply(fuse2_down_a_.apply(high, mode, true), mode, false);
            Tensor to_high = fuse2_up_.apply(low, mode, false);
            low = relu(add(low, to_low));
            high = relu(add(high, bilinear_upsample(to_high, high.dim(2), high.dim(3))));
        }

        Tensor context = lmfm_forward(low, cfg_.lmfm, lmfm_, mode);
        high = add(high, bilinear_upsample(context, high.dim(2), high.dim(3)));

        Tensor y = head_.apply(high, mode, true);
        y = conv2d(y, classifier_);
        return bilinear_upsample(y, H, W);
    }

   private:
    std::vector<ResidualBlock> blocks(ParamBuilder& pb, const std::string& name, std::size_t c) {
        std::vector<ResidualBlock> out;
        for (std::size_t i = 0; i < cfg_.blocks_per_stage; ++i) {
            const std::string n = name + ".block" + std::to_string(i);
            out.push_back({pb.conv_bn(n + ".a", c, c, 3), pb.conv_bn(n + ".b", c, c, 3)});
        }
        return out;
    }

    NetConfig cfg_;
    ParamSet params_;
    ConvBn stem1_, stem2_, down1_, down2_;
    std::vector<ResidualBlock> high1_, low1_, high2_, low2_;
    ConvBn fuse1_down_, fuse1_up_, fuse2_down_a_, fuse2_down_b_, fuse2_up_;
    LmfmParams lmfm_;
    ConvBn head_;
    ConvParams classifier_;
};

/// Parameter count and FLOPs of one forward pass on an H x W input (batch 1).
inline Cost count_cost(const NetConfig& cfg, std::size_t H, std::size_t W) {
    cfg.validate();
    cfg.check_input(H, W);
    const std::size_t Ch = cfg.high_channels, Cl = cfg.low_channels;
    const std::size_t h2 = H / 2, w2 = W / 2, h4 = H / 4, w4 = W / 4, h8 = H / 8, w8 = W / 8, h16 = H / 16, w16 = W / 16;
    auto block_cost = [&](std::size_t c, std::size_t h, std::size_t w) {
        return conv_bn_cost(c, c, 3, h, w, true) + conv_bn_cost(c, c, 3, h, w, false) + elementwise_cost(2 * c * h * w);
    };
    Cost total;
    total += conv_bn_cost(cfg.in_channels, cfg.stem_channels, 3, h2, w2, true);
    total += conv_bn_cost(cfg.stem_channels, Ch, 3, h4, w4, true);
    total += conv_bn_cost(Ch, Cl, 3, h8, w8, true);
    for (std::size_t i = 0; i < cfg.blocks_per_stage; ++i) total += block_cost(Ch, h4, w4) + block_cost(Cl, h8, w8);
    // fusion 1: two branch convs, upsample, two adds, two ReLUs
    total += conv_bn_cost(Ch, Cl, 3, h8, w8, false) + conv_bn_cost(Cl, Ch, 1, h8, w8, false);
    total += elementwise_cost(Ch * h4 * w4) + elementwise_cost(2 * Cl * h8 * w8) + elementwise_cost(2 * Ch * h4 * w4);
    total += conv_bn_cost(Cl, Cl, 3, h16, w16, true);
    for (std::size_t i = 0; i < cfg.blocks_per_stage; ++i) total += block_cost(Ch, h4, w4) + block_cost(Cl, h16, w16);
    // fusion 2
    total += conv_bn_cost(Ch, Ch, 3, h8, w8, true) + conv_bn_cost(Ch, Cl, 3, h16, w16, false) + conv_bn_cost(Cl, Ch, 1, h16, w16, false);
    total += elementwise_cost(Ch * h4 * w4) + elementwise_cost(2 * Cl * h16 * w16) + elementwise_cost(2 * Ch * h4 * w4);
    // context: LMFM, upsample, add
    total += lmfm_cost(cfg.lmfm, h16, w16);
    total += elementwise_cost(Ch * h4 * w4) + elementwise_cost(Ch * h4 * w4);
    // head
    total += conv_bn_cost(Ch, cfg.head_channels, 3, h4, w4, true);
    total += conv_cost(cfg.head_channels, cfg.num_classes, 1, h4, w4, true);
    total += elementwise_cost(cfg.num_classes * H * W);
    return total;
}

// Checkpoint container: "BCMF", u32 version, u64 config digest, u32 entry
// count, then per entry u32 name length, name bytes, u32 rank, u64 extents,
// raw little-endian doubles.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& what) {
    unsigned char bytes[sizeof(T)];
    is.read(reinterpret_cast<char*>(bytes), sizeof(T));
    require(is.gcount() == static_cast<std::streamsize>(sizeof(T)), ErrorKind::format, "checkpoint truncated while reading " + what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const ParamSet& params, std::uint64_t config_digest, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path + " for writing");
    os.write("BCMF", 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint64_t>(os, config_digest);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& e : params.entries()) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.tensor.rank()));
        for (std::size_t d : e.tensor.shape()) detail::write_le<std::uint64_t>(os, d);
        for (double v : e.tensor.data()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
    require(static_cast<bool>(os), ErrorKind::io, "write to " + path + " failed");
}

/// Loads values into an existing parameter set; names, order and shapes must
/// match and the stored digest must equal config_digest.
inline void load_checkpoint(ParamSet& params, std::uint64_t config_digest, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path);
    char magic[4] = {};
    is.read(magic, 4);
    require(is.gcount() == 4 && std::string(magic, 4) == "BCMF", ErrorKind::format, path + ": not a BCMF checkpoint");
    const auto version = detail::read_le<std::uint32_t>(is, "version");
    require(version == kCheckpointVersion, ErrorKind::format, path + ": unsupported checkpoint version " + std::to_string(version));
    const auto digest = detail::read_le<std::uint64_t>(is, "digest");
    require(digest == config_digest, ErrorKind::config, path + ": checkpoint/config digest mismatch");
    const auto count = detail::read_le<std::uint32_t>(is, "entry count");
    require(count == params.entries().size(), ErrorKind::format, path + ": parameter count mismatch");
    for (auto& e : params.entries()) {
        const auto len = detail::read_le<std::uint32_t>(is, "name length");
        require(len < (1u << 16), ErrorKind::format, path + ": implausible name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        require(is.gcount() == static_cast<std::streamsize>(len), ErrorKind::format, path + ": truncated name");
        require(name == e.name, ErrorKind::format, path + ": expected parameter " + e.name + ", found " + name);
        const auto rank = detail::read_le<std::uint32_t>(is, "rank");
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(detail::read_le<std::uint64_t>(is, "extent")));
        require(shape == e.tensor.shape(), ErrorKind::format, path + ": shape mismatch for " + name);
        for (double& v : e.tensor.data()) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is, "values"));
    }
    is.peek();
    require(is.eof(), ErrorKind::format, path + ": trailing bytes after last parameter");
}

}  // namespace bcmf

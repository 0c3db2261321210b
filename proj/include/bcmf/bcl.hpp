#pragma once

// Boundary corrected loss.
//
//   1. probabilities from a channel softmax
//   2. ground truth flipped along rows / columns with step s
//   3. cross entropy of the prediction against each flipped map
//   4. per sample: NMS over the (detached) loss map, then the hardest
//      fraction of surviving pixels is selected
//   5. L_b = lambda1 * mean(selected row losses) + lambda2 * mean(selected col losses)
//
// and the training objective L_t = mean CE + alpha * L_b.
//
// A flip with step s cuts the axis into blocks of 2s and swaps the two
// halves of every full block; a trailing partial block stays put. Pixels
// whose block is uniform therefore see their own label, and only pixels
// within s of a label change see a different one.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "bcmf/error.hpp"
#include "bcmf/label_map.hpp"
#include "bcmf/nn_ops.hpp"
#include "bcmf/tensor.hpp"

namespace bcmf {

struct BclConfig {
    std::size_t step = 1;        // s, pixels
    double lambda1 = 0.5;        // row term weight
    double lambda2 = 0.5;        // column term weight
    double alpha = 0.4;          // weight of L_b in the total objective
    std::size_t nms_window = 3;  // k, odd
    double keep_fraction = 0.25; // theta in (0, 1]
    std::size_t min_kept = 64;

    void validate() const {
        require(lambda1 >= 0.0 && lambda2 >= 0.0, ErrorKind::config, "bcl: lambda1/lambda2 must be >= 0");
        require(alpha >= 0.0, ErrorKind::config, "bcl: alpha must be >= 0");
        require(nms_window >= 1 && nms_window % 2 == 1, ErrorKind::config, "bcl: NMS window must be odd and >= 1");
        require(keep_fraction > 0.0 && keep_fraction <= 1.0, ErrorKind::config, "bcl: keep fraction must lie in (0,1]");
    }
};

namespace detail {

// Position of index i after the half-swap of 2s-blocks along an axis of length n.
inline std::size_t flipped_index(std::size_t i, std::size_t n, std::size_t s) {
    if (s == 0) return i;
    const std::size_t block = 2 * s;
    const std::size_t start = (i / block) * block;
    if (start + block > n) return i;
    return i - start < s ? i + s : i - s;
}

}  // namespace detail

/// Half-swaps 2s-wide blocks of columns (every row is permuted the same way).
inline LabelMap row_flip(const LabelMap& gt, std::size_t s) {
    LabelMap out = gt;
    for (std::size_t i = 0; i < gt.height; ++i)
        for (std::size_t j = 0; j < gt.width; ++j) out.at(i, j) = gt.at(i, detail::flipped_index(j, gt.width, s));
    return out;
}

/// Half-swaps 2s-tall blocks of rows.
inline LabelMap col_flip(const LabelMap& gt, std::size_t s) {
    LabelMap out = gt;
    for (std::size_t i = 0; i < gt.height; ++i) {
        const std::size_t src = detail::flipped_index(i, gt.height, s);
        for (std::size_t j = 0; j < gt.width; ++j) out.at(i, j) = gt.at(src, j);
    }
    return out;
}

inline LabelBatch row_flip(const LabelBatch& gts, std::size_t s) {
    LabelBatch out;
    out.reserve(gts.size());
    for (const auto& g : gts) out.push_back(row_flip(g, s));
    return out;
}

inline LabelBatch col_flip(const LabelBatch& gts, std::size_t s) {
    LabelBatch out;
    out.reserve(gts.size());
    for (const auto& g : gts) out.push_back(col_flip(g, s));
    return out;
}

struct FlipLossMaps {
    Tensor row;  // [N,H,W]
    Tensor col;  // [N,H,W]
};

inline FlipLossMaps flip_ce_maps(const Tensor& probs, const LabelBatch& gts, std::size_t s) {
    return {cross_entropy_map(probs, row_flip(gts, s)), cross_entropy_map(probs, col_flip(gts, s))};
}

struct KeptPixel {
    std::size_t index;  // row-major position within the map
    double value;
};

/// Keeps pixels that are >= every value in their k x k window (window
/// clipped at the border). Output is in row-major order.
inline std::vector<KeptPixel> nms_filter(std::span<const double> loss, std::size_t height, std::size_t width, std::size_t k) {
    require(k >= 1 && k % 2 == 1, ErrorKind::domain, "nms_filter: window must be odd, got " + std::to_string(k));
    require(loss.size() == height * width, ErrorKind::shape, "nms_filter: map size does not match extents");
    std::vector<KeptPixel> kept;
    const std::size_t r = k / 2;
    if (r == 0) {
        kept.reserve(loss.size());
        for (std::size_t i = 0; i < loss.size(); ++i) kept.push_back({i, loss[i]});
        return kept;
    }
    // Separable clipped max: row pass then column pass.
    std::vector<double> row_max(loss.size());
    for (std::size_t i = 0; i < height; ++i)
        for (std::size_t j = 0; j < width; ++j) {
            const std::size_t j0 = j >= r ? j - r : 0, j1 = std::min(width - 1, j + r);
            double m = loss[i * width + j0];
            for (std::size_t jj = j0 + 1; jj <= j1; ++jj) m = std::max(m, loss[i * width + jj]);
            row_max[i * width + j] = m;
        }
    for (std::size_t i = 0; i < height; ++i) {
        const std::size_t i0 = i >= r ? i - r : 0, i1 = std::min(height - 1, i + r);
        for (std::size_t j = 0; j < width; ++j) {
            double m = row_max[i0 * width + j];
            for (std::size_t ii = i0 + 1; ii <= i1; ++ii) m = std::max(m, row_max[ii * width + j]);
            const double v = loss[i * width + j];
            if (v >= m) kept.push_back({i * width + j, v});
        }
    }
    return kept;
}

inline std::vector<KeptPixel> nms_filter(const Tensor& loss_map, std::size_t k) {
    require(loss_map.rank() == 2, ErrorKind::shape, "nms_filter: expected [H,W] map");
    return nms_filter(loss_map.data(), loss_map.dim(0), loss_map.dim(1), k);
}

/// Number of pixels select_hard returns for n kept pixels.
inline std::size_t hard_count(std::size_t n, double keep_fraction, std::size_t min_kept) {
    // The small offset absorbs representation error, e.g. 0.7 * 10 = 7.000000000000001.
    const auto by_fraction = static_cast<std::size_t>(std::max(0.0, std::ceil(keep_fraction * static_cast<double>(n) - 1e-9)));
    return std::min(n, std::max(by_fraction, std::min(min_kept, n)));
}

/// Positions of the hardest kept pixels: descending value, ties by position.
inline std::vector<std::size_t> select_hard(std::vector<KeptPixel> kept, double keep_fraction, std::size_t min_kept) {
    require(keep_fraction > 0.0 && keep_fraction <= 1.0, ErrorKind::domain, "select_hard: keep fraction must lie in (0,1]");
    const std::size_t count = hard_count(kept.size(), keep_fraction, min_kept);
    auto harder = [](const KeptPixel& a, const KeptPixel& b) { return a.value != b.value ? a.value > b.value : a.index < b.index; };
    std::partial_sort(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(count), kept.end(), harder);
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = kept[i].index;
    return out;
}

namespace detail {

// Global [N,H,W] indices of the hard pixels of one flipped-loss map.
inline std::vector<std::size_t> hard_indices(const Tensor& loss, const LabelBatch& flipped, const BclConfig& cfg) {
    const std::size_t N = loss.dim(0), H = loss.dim(1), W = loss.dim(2), HW = H * W;
    std::vector<std::size_t> out;
    for (std::size_t n = 0; n < N; ++n) {
        auto kept = nms_filter(loss.data().subspan(n * HW, HW), H, W, cfg.nms_window);
        std::erase_if(kept, [&](const KeptPixel& p) { return flipped[n].ignored(p.index); });
        auto hard = select_hard(std::move(kept), cfg.keep_fraction, cfg.min_kept);
        // Row-major order makes the reduction order independent of loss values.
        std::sort(hard.begin(), hard.end());
        for (std::size_t idx : hard) out.push_back(n * HW + idx);
    }
    return out;
}

inline std::vector<std::size_t> valid_indices(const LabelBatch& gts) {
    std::vector<std::size_t> out;
    std::size_t offset = 0;
    for (const auto& g : gts) {
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!g.ignored(i)) out.push_back(offset + i);
        offset += g.size();
    }
    return out;
}

}  // namespace detail

/// Mean of a cross-entropy map over non-ignored pixels of the whole batch.
inline Tensor mean_cross_entropy(const Tensor& ce_map, const LabelBatch& gts) {
    return gather_mean(ce_map, detail::valid_indices(gts));
}

/// Flip-loss maps and the [N,H,W] indices selected from each.
struct BoundarySelection {
    FlipLossMaps maps;
    std::vector<std::size_t> row;
    std::vector<std::size_t> col;
};

inline BoundarySelection boundary_selection(const Tensor& probs, const LabelBatch& gts, const BclConfig& cfg) {
    cfg.validate();
    const LabelBatch rows = row_flip(gts, cfg.step);
    const LabelBatch cols = col_flip(gts, cfg.step);
    BoundarySelection sel;
    sel.maps = {cross_entropy_map(probs, rows), cross_entropy_map(probs, cols)};
    sel.row = detail::hard_indices(sel.maps.row, rows, cfg);
    sel.col = detail::hard_indices(sel.maps.col, cols, cfg);
    return sel;
}

/// Boundary term L_b on softmax probabilities [N,M,H,W].
inline Tensor boundary_loss(const Tensor& probs, const LabelBatch& gts, const BclConfig& cfg) {
    const BoundarySelection sel = boundary_selection(probs, gts, cfg);
    const Tensor row_term = gather_mean(sel.maps.row, sel.row);
    const Tensor col_term = gather_mean(sel.maps.col, sel.col);
    return add(scale(row_term, cfg.lambda1), scale(col_term, cfg.lambda2));
}

struct LossTerms {
    Tensor total;     // L_t
    Tensor ce;        // mean cross entropy
    Tensor boundary;  // L_b (undefined when not computed)
};

/// L_t = mean CE + alpha * L_b on raw logits [N,M,H,W]. With alpha = 0 the
/// boundary term is skipped unless want_boundary asks for it (for logging);
/// the total is then the CE tensor itself.
inline LossTerms total_loss(const Tensor& logits, const LabelBatch& gts, const BclConfig& cfg, bool want_boundary = false) {
    cfg.validate();
    const Tensor probs = softmax_channels(logits);
    LossTerms out;
    out.ce = mean_cross_entropy(cross_entropy_map(probs, gts), gts);
    if (cfg.alpha == 0.0) {
        out.total = out.ce;
        if (want_boundary) out.boundary = boundary_loss(probs, gts, cfg);
        return out;
    }
    out.boundary = boundary_loss(probs, gts, cfg);
    out.total = add(out.ce, scale(out.boundary, cfg.alpha));
    return out;
}

}  // namespace bcmf

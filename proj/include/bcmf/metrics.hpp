#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bcmf/error.hpp"
#include "bcmf/label_map.hpp"

namespace bcmf {

/// counts[true][predicted] over non-ignored pixels.
class ConfusionMatrix {
   public:
    explicit ConfusionMatrix(std::size_t num_classes = 0) : m_(num_classes), counts_(num_classes * num_classes, 0) {}

    std::size_t num_classes() const { return m_; }
    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * m_ + pred]; }
    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * m_ + pred]; }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }

    void accumulate(const LabelMap& pred, const LabelMap& gt) {
        require(pred.height == gt.height && pred.width == gt.width, ErrorKind::shape, "confusion matrix: prediction/ground-truth extents differ");
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (gt.ignored(i)) continue;
            const std::int32_t g = gt.labels[i], p = pred.labels[i];
            require(g >= 0 && static_cast<std::size_t>(g) < m_ && p >= 0 && static_cast<std::size_t>(p) < m_, ErrorKind::domain,
                    "confusion matrix: label out of range");
            ++counts_[static_cast<std::size_t>(g) * m_ + static_cast<std::size_t>(p)];
        }
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        require(o.m_ == m_, ErrorKind::shape, "confusion matrix: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

    bool operator==(const ConfusionMatrix&) const = default;

   private:
    std::size_t m_;
    std::vector<std::uint64_t> counts_;
};

struct IouResult {
    std::vector<double> per_class;  // NaN-free; classes with zero union are flagged in `present`
    std::vector<bool> present;
    double mean = 0.0;
};

/// IoU_c = diag / (row + col - diag); zero-union classes are left out of the mean.
inline IouResult miou(const ConfusionMatrix& cm) {
    const std::size_t M = cm.num_classes();
    IouResult r;
    r.per_class.assign(M, 0.0);
    r.present.assign(M, false);
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < M; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t k = 0; k < M; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        const std::uint64_t diag = cm.at(c, c);
        const std::uint64_t uni = row + col - diag;
        if (uni == 0) continue;
        r.present[c] = true;
        r.per_class[c] = static_cast<double>(diag) / static_cast<double>(uni);
        sum += r.per_class[c];
        ++counted;
    }
    require(counted > 0, ErrorKind::domain, "miou: every class has zero union");
    r.mean = sum / static_cast<double>(counted);
    return r;
}

/// Non-ignored pixels with a 4-neighbour of a different (non-ignored) class.
inline std::vector<bool> boundary_mask(const LabelMap& lm) {
    std::vector<bool> mask(lm.size(), false);
    const std::size_t H = lm.height, W = lm.width;
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
            const std::size_t idx = i * W + j;
            if (lm.ignored(idx)) continue;
            const std::int32_t v = lm.labels[idx];
            auto differs = [&](std::size_t n) { return !lm.ignored(n) && lm.labels[n] != v; };
            mask[idx] = (i > 0 && differs(idx - W)) || (i + 1 < H && differs(idx + W)) || (j > 0 && differs(idx - 1)) ||
                        (j + 1 < W && differs(idx + 1));
        }
    return mask;
}

/// Pixel counts behind a boundary F-score, so images can be pooled.
struct BoundaryCounts {
    std::uint64_t pred_total = 0, pred_matched = 0;
    std::uint64_t gt_total = 0, gt_matched = 0;

    BoundaryCounts& operator+=(const BoundaryCounts& o) {
        pred_total += o.pred_total;
        pred_matched += o.pred_matched;
        gt_total += o.gt_total;
        gt_matched += o.gt_matched;
        return *this;
    }
};

struct BoundaryScore {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

namespace detail {

// Chebyshev dilation by d via separable max filters.
inline std::vector<bool> dilate(const std::vector<bool>& mask, std::size_t H, std::size_t W, std::size_t d) {
    std::vector<bool> rows(mask.size(), false), out(mask.size(), false);
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
            const std::size_t j0 = j >= d ? j - d : 0, j1 = std::min(W - 1, j + d);
            for (std::size_t jj = j0; jj <= j1 && !rows[i * W + j]; ++jj) rows[i * W + j] = mask[i * W + jj];
        }
    for (std::size_t i = 0; i < H; ++i) {
        const std::size_t i0 = i >= d ? i - d : 0, i1 = std::min(H - 1, i + d);
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t ii = i0; ii <= i1 && !out[i * W + j]; ++ii) out[i * W + j] = rows[ii * W + j];
    }
    return out;
}

}  // namespace detail

inline BoundaryCounts boundary_counts(const LabelMap& pred, const LabelMap& gt, std::size_t tolerance) {
    require(pred.height == gt.height && pred.width == gt.width, ErrorKind::shape, "boundary score: extents differ");
    const auto pb = boundary_mask(pred), gb = boundary_mask(gt);
    const auto pd = detail::dilate(pb, gt.height, gt.width, tolerance), gd = detail::dilate(gb, gt.height, gt.width, tolerance);
    BoundaryCounts c;
    for (std::size_t i = 0; i < pb.size(); ++i) {
        if (pb[i]) {
            ++c.pred_total;
            if (gd[i]) ++c.pred_matched;
        }
        if (gb[i]) {
            ++c.gt_total;
            if (pd[i]) ++c.gt_matched;
        }
    }
    return c;
}

/// Both boundaries empty scores 1, exactly one empty scores 0.
inline BoundaryScore boundary_score(const BoundaryCounts& c) {
    if (c.pred_total == 0 && c.gt_total == 0) return {1.0, 1.0, 1.0};
    if (c.pred_total == 0 || c.gt_total == 0) return {0.0, 0.0, 0.0};
    BoundaryScore s;
    s.precision = static_cast<double>(c.pred_matched) / static_cast<double>(c.pred_total);
    s.recall = static_cast<double>(c.gt_matched) / static_cast<double>(c.gt_total);
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

inline BoundaryScore boundary_fscore(const LabelMap& pred, const LabelMap& gt, std::size_t tolerance) {
    return boundary_score(boundary_counts(pred, gt, tolerance));
}

struct MetricsReport {
    ConfusionMatrix confusion;
    IouResult iou;
    BoundaryScore boundary;
    std::size_t boundary_tolerance = 2;
    std::size_t images = 0;
    double seconds_per_image = 0.0;

    /// Flat `key = value` lines.
    std::string to_text() const {
        std::ostringstream os;
        os << std::setprecision(10);
        os << "images = " << images << '\n';
        os << "miou = " << iou.mean << '\n';
        for (std::size_t c = 0; c < iou.per_class.size(); ++c) {
            os << "iou." << c << " = ";
            if (iou.present[c])
                os << iou.per_class[c];
            else
                os << "absent";
            os << '\n';
        }
        os << "boundary.tolerance = " << boundary_tolerance << '\n';
        os << "boundary.precision = " << boundary.precision << '\n';
        os << "boundary.recall = " << boundary.recall << '\n';
        os << "boundary.f1 = " << boundary.f1 << '\n';
        os << "pixels = " << confusion.total() << '\n';
        os << "seconds_per_image = " << seconds_per_image << '\n';
        return os.str();
    }
};

}  // namespace bcmf

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bcmf/error.hpp"

namespace bcmf {

inline constexpr std::int32_t kDefaultIgnoreIndex = 255;

/// H x W grid of class ids in [0, num_classes) or ignore_index.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    int num_classes = 0;
    std::int32_t ignore_index = kDefaultIgnoreIndex;
    std::vector<std::int32_t> labels;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, int classes, std::int32_t fill = 0, std::int32_t ignore = kDefaultIgnoreIndex)
        : height(h), width(w), num_classes(classes), ignore_index(ignore), labels(h * w, fill) {}

    std::size_t size() const { return labels.size(); }
    std::int32_t& at(std::size_t i, std::size_t j) { return labels[i * width + j]; }
    std::int32_t at(std::size_t i, std::size_t j) const { return labels[i * width + j]; }
    bool ignored(std::size_t idx) const { return labels[idx] == ignore_index; }

    bool operator==(const LabelMap&) const = default;

    void validate() const {
        require(height > 0 && width > 0, ErrorKind::shape, "label map must have positive extents");
        require(labels.size() == height * width, ErrorKind::shape, "label map storage does not match its extents");
        require(num_classes >= 1, ErrorKind::domain, "label map needs at least one class");
        require(ignore_index < 0 || ignore_index >= num_classes, ErrorKind::domain,
                "ignore index collides with a class id");
        for (std::int32_t v : labels) {
            require(v == ignore_index || (v >= 0 && v < num_classes), ErrorKind::domain,
                    "label " + std::to_string(v) + " outside [0," + std::to_string(num_classes) + ")");
        }
    }
};

using LabelBatch = std::vector<LabelMap>;

}  // namespace bcmf

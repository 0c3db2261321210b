#pragma once

// Seedable synthetic scenes (rectangles, circles, stripes over a class-0
// background) with exactly known label maps, plus netpbm sample I/O and a
// plain-text dataset manifest.

#include <algorithm>
#include <cctype>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "bcmf/error.hpp"
#include "bcmf/label_map.hpp"
#include "bcmf/random.hpp"
#include "bcmf/tensor.hpp"

namespace bcmf {

using Color = std::array<double, 3>;

enum class ShapeKind { rectangle, circle, stripe };

inline const std::vector<Color>& default_palette() {
    static const std::vector<Color> palette{
        {0.45, 0.45, 0.45},  // background
        {0.90, 0.15, 0.15}, {0.15, 0.75, 0.20}, {0.20, 0.30, 0.95}, {0.95, 0.85, 0.10},
        {0.85, 0.20, 0.85}, {0.10, 0.85, 0.85}, {0.95, 0.55, 0.10}, {0.05, 0.05, 0.05},
    };
    return palette;
}

struct SceneSpec {
    std::size_t height = 128;
    std::size_t width = 128;
    int num_classes = 4;
    std::size_t min_shapes = 2;
    std::size_t max_shapes = 5;
    std::vector<ShapeKind> kinds{ShapeKind::rectangle, ShapeKind::circle, ShapeKind::stripe};
    std::vector<Color> colors;  // empty: first num_classes entries of default_palette()
    double noise_sigma = 0.1;
    std::uint64_t seed = 0;

    const std::vector<Color>& palette() const { return colors.empty() ? default_palette() : colors; }

    void validate() const {
        require(height > 0 && width > 0, ErrorKind::config, "scene: zero area");
        require(num_classes >= 2, ErrorKind::config, "scene: need at least two classes");
        require(static_cast<std::size_t>(num_classes) <= palette().size(), ErrorKind::config,
                "scene: " + std::to_string(num_classes) + " classes exceed the color table (" + std::to_string(palette().size()) + ")");
        require(num_classes < kDefaultIgnoreIndex, ErrorKind::config, "scene: class ids must fit below the ignore index");
        require(min_shapes <= max_shapes, ErrorKind::config, "scene: min_shapes > max_shapes");
        require(!kinds.empty(), ErrorKind::config, "scene: no shape kinds enabled");
        require(noise_sigma >= 0.0, ErrorKind::config, "scene: noise sigma must be >= 0");
        const auto& pal = palette();
        for (int a = 0; a < num_classes; ++a) {
            for (double v : pal[a]) require(v >= 0.0 && v <= 1.0, ErrorKind::config, "scene: colors must lie in [0,1]");
            for (int b = 0; b < a; ++b) {
                double d = 0.0;
                for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(pal[a][c] - pal[b][c]));
                require(d >= 0.1, ErrorKind::config, "scene: colors of classes " + std::to_string(a) + " and " + std::to_string(b) + " too close");
            }
        }
    }

    std::string canonical() const {
        std::ostringstream os;
        os << std::setprecision(17) << "h=" << height << ";w=" << width << ";m=" << num_classes << ";shapes=" << min_shapes << '-'
           << max_shapes << ";kinds=";
        for (ShapeKind k : kinds) os << static_cast<int>(k);
        os << ";sigma=" << noise_sigma << ";seed=" << seed << ";colors=";
        for (int c = 0; c < num_classes; ++c) os << palette()[c][0] << ',' << palette()[c][1] << ',' << palette()[c][2] << '/';
        return os.str();
    }

    std::uint64_t digest() const {
        const std::string s = canonical();
        return fnv1a(s.data(), s.size());
    }
};

struct Sample {
    Tensor image;  // [3,H,W] in [0,1]
    LabelMap label;
};

namespace detail {

inline void paint_shape(LabelMap& lm, ShapeKind kind, std::int32_t cls, Rng& rng) {
    const auto H = static_cast<std::int64_t>(lm.height), W = static_cast<std::int64_t>(lm.width);
    const std::int64_t L = std::min(H, W);
    switch (kind) {
        case ShapeKind::rectangle: {
            const std::int64_t h = rng.uniform_int(std::max<std::int64_t>(1, H / 8), std::max<std::int64_t>(1, H / 2));
            const std::int64_t w = rng.uniform_int(std::max<std::int64_t>(1, W / 8), std::max<std::int64_t>(1, W / 2));
            const std::int64_t y0 = rng.uniform_int(0, H - h), x0 = rng.uniform_int(0, W - w);
            for (std::int64_t i = y0; i < y0 + h; ++i)
                for (std::int64_t j = x0; j < x0 + w; ++j) lm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = cls;
            break;
        }
        case ShapeKind::circle: {
            const double r = rng.uniform(static_cast<double>(L) / 16.0, static_cast<double>(L) / 4.0);
            const double cy = rng.uniform(0.0, static_cast<double>(H)), cx = rng.uniform(0.0, static_cast<double>(W));
            for (std::int64_t i = 0; i < H; ++i)
                for (std::int64_t j = 0; j < W; ++j) {
                    const double dy = static_cast<double>(i) + 0.5 - cy, dx = static_cast<double>(j) + 0.5 - cx;
                    if (dy * dy + dx * dx <= r * r) lm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = cls;
                }
            break;
        }
        case ShapeKind::stripe: {
            const bool horizontal = rng.bernoulli(0.5);
            const std::int64_t extent = horizontal ? H : W;
            const std::int64_t t = rng.uniform_int(std::max<std::int64_t>(1, L / 16), std::max<std::int64_t>(1, L / 6));
            const std::int64_t off = rng.uniform_int(0, extent - std::min(t, extent));
            for (std::int64_t i = 0; i < H; ++i)
                for (std::int64_t j = 0; j < W; ++j) {
                    const std::int64_t c = horizontal ? i : j;
                    if (c >= off && c < off + t) lm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = cls;
                }
            break;
        }
    }
}

}  // namespace detail

/// Sample number `index` of the scene family; depends only on (spec, index).
inline Sample generate_sample(const SceneSpec& spec, std::uint64_t index) {
    spec.validate();
    Rng rng = Rng::for_stream(spec.seed, index);
    LabelMap lm(spec.height, spec.width, spec.num_classes, 0);
    // Redraw until some background survives; after that, carve out one pixel.
    for (int attempt = 0; attempt < 8; ++attempt) {
        std::fill(lm.labels.begin(), lm.labels.end(), 0);
        const auto n = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_shapes), static_cast<std::int64_t>(spec.max_shapes)));
        for (std::size_t s = 0; s < n; ++s) {
            const ShapeKind kind = spec.kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.kinds.size()) - 1))];
            const auto cls = static_cast<std::int32_t>(rng.uniform_int(1, spec.num_classes - 1));
            detail::paint_shape(lm, kind, cls, rng);
        }
        if (std::find(lm.labels.begin(), lm.labels.end(), 0) != lm.labels.end()) break;
        if (attempt == 7) lm.labels[0] = 0;
    }

    Sample s{Tensor({3, spec.height, spec.width}), std::move(lm)};
    const std::size_t HW = spec.height * spec.width;
    const auto& pal = spec.palette();
    for (std::size_t p = 0; p < HW; ++p) {
        const Color& c = pal[static_cast<std::size_t>(s.label.labels[p])];
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * rng.normal() : 0.0;
            s.image[ch * HW + p] = std::clamp(c[ch] + noise, 0.0, 1.0);
        }
    }
    return s;
}

inline std::vector<Sample> generate(const SceneSpec& spec, std::size_t count, std::uint64_t first_index = 0) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, first_index + i));
    return out;
}

// --- netpbm -----------------------------------------------------------------

namespace detail {

struct PnmHeader {
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
};

inline std::size_t read_pnm_number(std::istream& is, const std::string& path) {
    int c = is.peek();
    while (c != EOF) {
        if (c == '#') {
            std::string comment;
            std::getline(is, comment);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
        c = is.peek();
    }
    require(c != EOF && std::isdigit(c), ErrorKind::format, path + ": malformed header");
    std::size_t v = 0;
    while (std::isdigit(is.peek())) {
        v = v * 10 + static_cast<std::size_t>(is.get() - '0');
        require(v < (1u << 24), ErrorKind::format, path + ": header value too large");
    }
    return v;
}

inline PnmHeader read_pnm_header(std::istream& is, const std::string& path, const char* expected) {
    PnmHeader h;
    char m[2] = {};
    is.read(m, 2);
    require(is.gcount() == 2 && m[0] == 'P', ErrorKind::format, path + ": not a netpbm file");
    h.magic.assign(m, 2);
    require(h.magic == expected, ErrorKind::format, path + ": expected binary " + std::string(expected) + ", found " + h.magic);
    h.width = read_pnm_number(is, path);
    h.height = read_pnm_number(is, path);
    h.maxval = read_pnm_number(is, path);
    require(h.width > 0 && h.height > 0, ErrorKind::format, path + ": zero extent");
    require(h.maxval == 255, ErrorKind::format, path + ": maxval must be 255, got " + std::to_string(h.maxval));
    const int sep = is.get();
    require(sep != EOF && std::isspace(sep), ErrorKind::format, path + ": missing whitespace after header");
    return h;
}

inline std::vector<unsigned char> read_payload(std::istream& is, std::size_t n, const std::string& path) {
    std::vector<unsigned char> bytes(n);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    require(is.gcount() == static_cast<std::streamsize>(n), ErrorKind::format, path + ": truncated payload");
    return bytes;
}

}  // namespace detail

/// 8-bit quantization used by the PPM writer (round half up).
inline unsigned char quantize_unit(double v) {
    return static_cast<unsigned char>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

inline void write_ppm(const std::string& path, const Tensor& image) {
    require(image.rank() == 3 && image.dim(0) == 3, ErrorKind::shape, "write_ppm: expected [3,H,W] image");
    const std::size_t H = image.dim(1), W = image.dim(2), HW = H * W;
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path + " for writing");
    os << "P6\n" << W << ' ' << H << "\n255\n";
    std::vector<unsigned char> bytes(3 * HW);
    for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t c = 0; c < 3; ++c) bytes[3 * p + c] = quantize_unit(image[c * HW + p]);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(os), ErrorKind::io, "write to " + path + " failed");
}

inline Tensor read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path);
    const auto h = detail::read_pnm_header(is, path, "P6");
    const std::size_t HW = h.width * h.height;
    const auto bytes = detail::read_payload(is, 3 * HW, path);
    Tensor image({3, h.height, h.width});
    for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t c = 0; c < 3; ++c) image[c * HW + p] = static_cast<double>(bytes[3 * p + c]) / 255.0;
    return image;
}

inline void write_pgm(const std::string& path, const LabelMap& label) {
    label.validate();
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path + " for writing");
    os << "P5\n" << label.width << ' ' << label.height << "\n255\n";
    std::vector<unsigned char> bytes(label.size());
    for (std::size_t i = 0; i < label.size(); ++i) {
        require(label.labels[i] >= 0 && label.labels[i] <= 255, ErrorKind::domain, "write_pgm: label does not fit in 8 bits");
        bytes[i] = static_cast<unsigned char>(label.labels[i]);
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(os), ErrorKind::io, "write to " + path + " failed");
}

inline LabelMap read_pgm(const std::string& path, int num_classes, std::int32_t ignore_index = kDefaultIgnoreIndex) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path);
    const auto h = detail::read_pnm_header(is, path, "P5");
    const auto bytes = detail::read_payload(is, h.width * h.height, path);
    LabelMap lm(h.height, h.width, num_classes, 0, ignore_index);
    for (std::size_t i = 0; i < bytes.size(); ++i) lm.labels[i] = bytes[i];
    lm.validate();
    return lm;
}

inline void save_sample(const Sample& s, const std::string& image_path, const std::string& label_path) {
    write_ppm(image_path, s.image);
    write_pgm(label_path, s.label);
}

inline Sample load_sample(const std::string& image_path, const std::string& label_path, int num_classes) {
    Sample s{read_ppm(image_path), read_pgm(label_path, num_classes)};
    require(s.image.dim(1) == s.label.height && s.image.dim(2) == s.label.width, ErrorKind::format,
            image_path + ": image and label extents differ");
    return s;
}

// --- manifest -----------------------------------------------------------------
//
//   # bcmf-manifest v1 digest=<16 hex> classes=<M> count=<n>
//   images/000000.ppm labels/000000.pgm
//   ...
// Paths are relative to the manifest's directory.

struct ManifestEntry {
    std::string image;
    std::string label;
};

struct Manifest {
    std::uint64_t digest = 0;
    int num_classes = 0;
    std::vector<ManifestEntry> entries;
    std::filesystem::path root;
};

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream os(path);
    require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path + " for writing");
    os << "# bcmf-manifest v1 digest=" << hex64(m.digest) << " classes=" << m.num_classes << " count=" << m.entries.size() << '\n';
    for (const auto& e : m.entries) os << e.image << ' ' << e.label << '\n';
    require(static_cast<bool>(os), ErrorKind::io, "write to " + path + " failed");
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open manifest " + path);
    Manifest m;
    m.root = std::filesystem::path(path).parent_path();
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), ErrorKind::format, path + ": empty manifest");
    std::istringstream header(line);
    std::string hash, tag, version, digest, classes, count;
    header >> hash >> tag >> version >> digest >> classes >> count;
    require(hash == "#" && tag == "bcmf-manifest" && version == "v1", ErrorKind::format, path + ": bad manifest header");
    require(digest.rfind("digest=", 0) == 0 && classes.rfind("classes=", 0) == 0 && count.rfind("count=", 0) == 0, ErrorKind::format,
            path + ": bad manifest header fields");
    std::size_t expected = 0;
    try {
        m.digest = std::stoull(digest.substr(7), nullptr, 16);
        m.num_classes = std::stoi(classes.substr(8));
        expected = std::stoul(count.substr(6));
    } catch (const std::logic_error&) {
        fail(ErrorKind::format, path + ": bad manifest header values");
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        require(static_cast<bool>(ls >> e.image >> e.label), ErrorKind::format, path + ": bad manifest line '" + line + "'");
        m.entries.push_back(std::move(e));
    }
    require(m.entries.size() == expected, ErrorKind::format, path + ": manifest count does not match its entries");
    return m;
}

/// Writes samples as images/NNNNNN.ppm + labels/NNNNNN.pgm and a manifest.
inline Manifest write_dataset(const std::string& dir, const std::vector<Sample>& samples, std::uint64_t digest, int num_classes,
                              const std::string& manifest_name = "manifest.txt") {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "labels");
    Manifest m;
    m.digest = digest;
    m.num_classes = num_classes;
    m.root = dir;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::ostringstream stem;
        stem << std::setw(6) << std::setfill('0') << i;
        ManifestEntry e{"images/" + stem.str() + ".ppm", "labels/" + stem.str() + ".pgm"};
        save_sample(samples[i], (fs::path(dir) / e.image).string(), (fs::path(dir) / e.label).string());
        m.entries.push_back(std::move(e));
    }
    write_manifest((fs::path(dir) / manifest_name).string(), m);
    return m;
}

inline std::vector<Sample> load_dataset(const Manifest& m) {
    std::vector<Sample> out;
    out.reserve(m.entries.size());
    for (const auto& e : m.entries) out.push_back(load_sample((m.root / e.image).string(), (m.root / e.label).string(), m.num_classes));
    return out;
}

}  // namespace bcmf

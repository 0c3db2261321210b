#pragma once

// Training, evaluation, verification and benchmarking entry points, plus
// the flat `key = value` configuration they share.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bcmf/bcl.hpp"
#include "bcmf/datagen.hpp"
#include "bcmf/error.hpp"
#include "bcmf/gradcheck.hpp"
#include "bcmf/lmfm.hpp"
#include "bcmf/metrics.hpp"
#include "bcmf/network.hpp"
#include "bcmf/nn_ops.hpp"
#include "bcmf/random.hpp"

namespace bcmf {

struct TrainConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    std::size_t batch_size = 8;
    std::size_t crop = 128;
    double flip_prob = 0.5;
    std::size_t iterations = 2000;
    double poly_power = 0.9;
    std::uint64_t seed = 1;
    std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
    std::size_t eval_interval = 0;        // 0: no periodic evaluation
    std::size_t boundary_tolerance = 2;
    BclConfig bcl;
    NetConfig net;
    SceneSpec data;  // used by generate-data
    std::size_t train_count = 200;
    std::size_t eval_count = 50;
    std::string train_manifest;
    std::string eval_manifest;
    std::string out_dir;

    void validate() const {
        require(lr > 0.0, ErrorKind::config, "train: lr must be > 0");
        require(momentum >= 0.0 && momentum < 1.0, ErrorKind::config, "train: momentum must lie in [0,1)");
        require(weight_decay >= 0.0, ErrorKind::config, "train: weight decay must be >= 0");
        require(batch_size >= 1, ErrorKind::config, "train: batch size must be >= 1");
        require(flip_prob >= 0.0 && flip_prob <= 1.0, ErrorKind::config, "train: flip probability must lie in [0,1]");
        require(poly_power >= 0.0, ErrorKind::config, "train: poly power must be >= 0");
        bcl.validate();
        net.validate();
        require(crop > 0 && crop % net.required_multiple() == 0, ErrorKind::config,
                "train: crop " + std::to_string(crop) + " must be a multiple of " + std::to_string(net.required_multiple()));
    }
};

/// lr0 * (1 - iter / max_iter)^power
inline double poly_lr(double lr0, std::size_t iter, std::size_t max_iter, double power) {
    if (max_iter == 0) return lr0;
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
    return lr0 * std::pow(std::max(0.0, frac), power);
}

// --- configuration ----------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

/// Parses `key = value` lines; `#` starts a comment.
inline KeyValues parse_key_values(std::istream& is, const std::string& source) {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::config, source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        require(!key.empty(), ErrorKind::config, source + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline KeyValues read_config_file(const std::string& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open config " + path);
    return parse_key_values(is, path);
}

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        T out{};
        if constexpr (std::is_floating_point_v<T>) {
            out = static_cast<T>(std::stod(value, &used));
        } else {
            require(value.empty() || value[0] != '-', ErrorKind::config, key + ": expected a non-negative integer");
            out = static_cast<T>(std::stoull(value, &used));
        }
        require(used == value.size(), ErrorKind::config, key + ": trailing characters in '" + value + "'");
        return out;
    } catch (const std::logic_error&) {
        fail(ErrorKind::config, key + ": cannot parse '" + value + "'");
    }
}

}  // namespace detail

/// Applies dotted keys onto a TrainConfig; unknown keys are errors.
inline void apply_config(TrainConfig& cfg, const KeyValues& kv) {
    using detail::parse_number;
    std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters{
        {"seed", [&](auto& k, auto& v) { cfg.seed = parse_number<std::uint64_t>(k, v); }},
        {"out", [&](auto&, auto& v) { cfg.out_dir = v; }},
        {"train.lr", [&](auto& k, auto& v) { cfg.lr = parse_number<double>(k, v); }},
        {"train.momentum", [&](auto& k, auto& v) { cfg.momentum = parse_number<double>(k, v); }},
        {"train.weight_decay", [&](auto& k, auto& v) { cfg.weight_decay = parse_number<double>(k, v); }},
        {"train.batch_size", [&](auto& k, auto& v) { cfg.batch_size = parse_number<std::size_t>(k, v); }},
        {"train.crop", [&](auto& k, auto& v) { cfg.crop = parse_number<std::size_t>(k, v); }},
        {"train.flip_prob", [&](auto& k, auto& v) { cfg.flip_prob = parse_number<double>(k, v); }},
        {"train.iterations", [&](auto& k, auto& v) { cfg.iterations = parse_number<std::size_t>(k, v); }},
        {"train.poly_power", [&](auto& k, auto& v) { cfg.poly_power = parse_number<double>(k, v); }},
        {"train.checkpoint_interval", [&](auto& k, auto& v) { cfg.checkpoint_interval = parse_number<std::size_t>(k, v); }},
        {"train.eval_interval", [&](auto& k, auto& v) { cfg.eval_interval = parse_number<std::size_t>(k, v); }},
        {"eval.boundary_tolerance", [&](auto& k, auto& v) { cfg.boundary_tolerance = parse_number<std::size_t>(k, v); }},
        {"bcl.step", [&](auto& k, auto& v) { cfg.bcl.step = parse_number<std::size_t>(k, v); }},
        {"bcl.lambda1", [&](auto& k, auto& v) { cfg.bcl.lambda1 = parse_number<double>(k, v); }},
        {"bcl.lambda2", [&](auto& k, auto& v) { cfg.bcl.lambda2 = parse_number<double>(k, v); }},
        {"bcl.alpha", [&](auto& k, auto& v) { cfg.bcl.alpha = parse_number<double>(k, v); }},
        {"bcl.nms_window", [&](auto& k, auto& v) { cfg.bcl.nms_window = parse_number<std::size_t>(k, v); }},
        {"bcl.keep_fraction", [&](auto& k, auto& v) { cfg.bcl.keep_fraction = parse_number<double>(k, v); }},
        {"bcl.min_kept", [&](auto& k, auto& v) { cfg.bcl.min_kept = parse_number<std::size_t>(k, v); }},
        {"net.num_classes", [&](auto& k, auto& v) { cfg.net.num_classes = parse_number<std::size_t>(k, v); }},
        {"net.stem_channels", [&](auto& k, auto& v) { cfg.net.stem_channels = parse_number<std::size_t>(k, v); }},
        {"net.high_channels", [&](auto& k, auto& v) { cfg.net.high_channels = parse_number<std::size_t>(k, v); }},
        {"net.low_channels", [&](auto& k, auto& v) { cfg.net.low_channels = parse_number<std::size_t>(k, v); }},
        {"net.blocks_per_stage", [&](auto& k, auto& v) { cfg.net.blocks_per_stage = parse_number<std::size_t>(k, v); }},
        {"net.head_channels", [&](auto& k, auto& v) { cfg.net.head_channels = parse_number<std::size_t>(k, v); }},
        {"lmfm.branch_channels", [&](auto& k, auto& v) { cfg.net.lmfm.branch_channels = parse_number<std::size_t>(k, v); }},
        {"lmfm.scales", [&](auto&, auto& v) { cfg.net.lmfm.scales = parse_scales(v); }},
        {"lmfm.connection", [&](auto&, auto& v) { cfg.net.lmfm.connection_mode = parse_connection_mode(v); }},
        {"data.height", [&](auto& k, auto& v) { cfg.data.height = parse_number<std::size_t>(k, v); }},
        {"data.width", [&](auto& k, auto& v) { cfg.data.width = parse_number<std::size_t>(k, v); }},
        {"data.min_shapes", [&](auto& k, auto& v) { cfg.data.min_shapes = parse_number<std::size_t>(k, v); }},
        {"data.max_shapes", [&](auto& k, auto& v) { cfg.data.max_shapes = parse_number<std::size_t>(k, v); }},
        {"data.noise", [&](auto& k, auto& v) { cfg.data.noise_sigma = parse_number<double>(k, v); }},
        {"data.seed", [&](auto& k, auto& v) { cfg.data.seed = parse_number<std::uint64_t>(k, v); }},
        {"data.train_count", [&](auto& k, auto& v) { cfg.train_count = parse_number<std::size_t>(k, v); }},
        {"data.eval_count", [&](auto& k, auto& v) { cfg.eval_count = parse_number<std::size_t>(k, v); }},
        {"data.train_manifest", [&](auto&, auto& v) { cfg.train_manifest = v; }},
        {"data.eval_manifest", [&](auto&, auto& v) { cfg.eval_manifest = v; }},
    };
    for (const auto& [key, value] : kv) {
        const auto it = setters.find(key);
        require(it != setters.end(), ErrorKind::config, "unknown config key '" + key + "'");
        it->second(key, value);
    }
    // Derived fields: the LMFM sits between the low and high branches, and
    // the scene generator uses the network's class count.
    cfg.net.lmfm.in_channels = cfg.net.low_channels;
    cfg.net.lmfm.out_channels = cfg.net.high_channels;
    cfg.data.num_classes = static_cast<int>(cfg.net.num_classes);
}

/// Resolved configuration as `key = value` lines that apply_config accepts.
inline std::string config_text(const TrainConfig& cfg) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "seed = " << cfg.seed << '\n';
    os << "train.lr = " << cfg.lr << '\n' << "train.momentum = " << cfg.momentum << '\n' << "train.weight_decay = " << cfg.weight_decay << '\n';
    os << "train.batch_size = " << cfg.batch_size << '\n' << "train.crop = " << cfg.crop << '\n' << "train.flip_prob = " << cfg.flip_prob << '\n';
    os << "train.iterations = " << cfg.iterations << '\n' << "train.poly_power = " << cfg.poly_power << '\n';
    os << "train.checkpoint_interval = " << cfg.checkpoint_interval << '\n' << "train.eval_interval = " << cfg.eval_interval << '\n';
    os << "eval.boundary_tolerance = " << cfg.boundary_tolerance << '\n';
    os << "bcl.step = " << cfg.bcl.step << '\n' << "bcl.lambda1 = " << cfg.bcl.lambda1 << '\n' << "bcl.lambda2 = " << cfg.bcl.lambda2 << '\n';
    os << "bcl.alpha = " << cfg.bcl.alpha << '\n' << "bcl.nms_window = " << cfg.bcl.nms_window << '\n';
    os << "bcl.keep_fraction = " << cfg.bcl.keep_fraction << '\n' << "bcl.min_kept = " << cfg.bcl.min_kept << '\n';
    os << "net.num_classes = " << cfg.net.num_classes << '\n' << "net.stem_channels = " << cfg.net.stem_channels << '\n';
    os << "net.high_channels = " << cfg.net.high_channels << '\n' << "net.low_channels = " << cfg.net.low_channels << '\n';
    os << "net.blocks_per_stage = " << cfg.net.blocks_per_stage << '\n' << "net.head_channels = " << cfg.net.head_channels << '\n';
    os << "lmfm.branch_channels = " << cfg.net.lmfm.branch_channels << '\n' << "lmfm.scales = " << cfg.net.lmfm.scales_str() << '\n';
    os << "lmfm.connection = " << to_string(cfg.net.lmfm.connection_mode) << '\n';
    os << "data.height = " << cfg.data.height << '\n' << "data.width = " << cfg.data.width << '\n';
    os << "data.min_shapes = " << cfg.data.min_shapes << '\n' << "data.max_shapes = " << cfg.data.max_shapes << '\n';
    os << "data.noise = " << cfg.data.noise_sigma << '\n' << "data.seed = " << cfg.data.seed << '\n';
    os << "data.train_count = " << cfg.train_count << '\n' << "data.eval_count = " << cfg.eval_count << '\n';
    if (!cfg.train_manifest.empty()) os << "data.train_manifest = " << cfg.train_manifest << '\n';
    if (!cfg.eval_manifest.empty()) os << "data.eval_manifest = " << cfg.eval_manifest << '\n';
    return os.str();
}

// --- batches and augmentation -------------------------------------------------

struct Batch {
    Tensor images;  // [B,3,crop,crop]
    LabelBatch labels;
};

/// Copies a crop x crop window at (top, left) of sample s into slot b of the
/// batch, mirrored left-right when `flip`.
inline void place_crop(const Sample& s, std::size_t top, std::size_t left, bool flip, std::size_t crop, Tensor& images, LabelMap& label,
                       std::size_t b) {
    const std::size_t H = s.label.height, W = s.label.width;
    require(top + crop <= H && left + crop <= W, ErrorKind::shape, "crop window outside the image");
    label = LabelMap(crop, crop, s.label.num_classes, 0, s.label.ignore_index);
    const std::size_t cc = crop * crop;
    for (std::size_t i = 0; i < crop; ++i)
        for (std::size_t j = 0; j < crop; ++j) {
            const std::size_t sj = left + (flip ? crop - 1 - j : j);
            const std::size_t src = (top + i) * W + sj;
            label.labels[i * crop + j] = s.label.labels[src];
            for (std::size_t c = 0; c < 3; ++c) images[(b * 3 + c) * cc + i * crop + j] = s.image[c * H * W + src];
        }
}

/// Seeded epoch shuffling with random crop and horizontal flip.
class BatchSampler {
   public:
    BatchSampler(const std::vector<Sample>& samples, std::size_t batch, std::size_t crop, double flip_prob, std::uint64_t seed)
        : samples_(samples), batch_(batch), crop_(crop), flip_prob_(flip_prob), rng_(seed) {
        require(!samples_.empty(), ErrorKind::config, "training set is empty");
        for (const Sample& s : samples_)
            require(s.label.height >= crop && s.label.width >= crop, ErrorKind::config, "crop larger than a training image");
    }
    // Holds a reference; a temporary set would dangle.
    BatchSampler(std::vector<Sample>&&, std::size_t, std::size_t, double, std::uint64_t) = delete;

    Batch next() {
        Batch out{Tensor({batch_, 3, crop_, crop_}), LabelBatch(batch_)};
        for (std::size_t b = 0; b < batch_; ++b) {
            if (cursor_ == order_.size()) reshuffle();
            const Sample& s = samples_[order_[cursor_++]];
            const auto top = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(s.label.height - crop_)));
            const auto left = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(s.label.width - crop_)));
            const bool flip = rng_.bernoulli(flip_prob_);
            place_crop(s, top, left, flip, crop_, out.images, out.labels[b], b);
        }
        return out;
    }

   private:
    void reshuffle() {
        order_.resize(samples_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        for (std::size_t i = order_.size(); i > 1; --i)
            std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        cursor_ = 0;
    }

    const std::vector<Sample>& samples_;
    std::size_t batch_, crop_;
    double flip_prob_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// --- training -----------------------------------------------------------------

struct TraceLine {
    std::size_t iter = 0;
    double lce = 0.0;
    double lb = 0.0;
    double lr = 0.0;

    bool operator==(const TraceLine&) const = default;

    std::string to_string() const {
        std::ostringstream os;
        os << std::setprecision(17) << "iter=" << iter << " lce=" << lce << " lb=" << lb << " lr=" << lr;
        return os.str();
    }
};

struct TrainResult {
    Network net;
    std::vector<TraceLine> trace;
};

using TraceCallback = std::function<void(const TraceLine&)>;

inline std::string checkpoint_path(const std::string& dir, const std::string& stem) {
    return (std::filesystem::path(dir) / (stem + ".bcmf")).string();
}

inline MetricsReport evaluate(Network& net, const std::vector<Sample>& samples, std::size_t tolerance);

/// SGD with momentum on the total objective. Writes trace.txt and
/// checkpoints when cfg.out_dir is set.
inline TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& train_set, const std::vector<Sample>* eval_set = nullptr,
                         const TraceCallback& on_iteration = nullptr) {
    cfg.validate();
    for (const Sample& s : train_set)
        require(s.label.num_classes == static_cast<int>(cfg.net.num_classes), ErrorKind::config, "training labels use a different class count");
    TrainResult result{Network(cfg.net, cfg.seed), {}};
    Network& net = result.net;
    Sgd sgd(net.params().trainable(), cfg.momentum, cfg.weight_decay);
    BatchSampler sampler(train_set, cfg.batch_size, cfg.crop, cfg.flip_prob, cfg.seed ^ 0x5851F42D4C957F2DULL);

    std::ofstream trace_file;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        trace_file.open((std::filesystem::path(cfg.out_dir) / "trace.txt").string());
        require(static_cast<bool>(trace_file), ErrorKind::io, "cannot write trace in " + cfg.out_dir);
    }

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const double lr = poly_lr(cfg.lr, it, cfg.iterations, cfg.poly_power);
        Batch batch = sampler.next();
        Tape tape;
        LossTerms terms;
        {
            Tape::Scope scope(tape);
            Tensor logits = net.forward(batch.images, Mode::train);
            terms = total_loss(logits, batch.labels, cfg.bcl, true);
        }
        TraceLine line{it, terms.ce.item(), terms.boundary.item(), lr};
        require(std::isfinite(line.lce) && std::isfinite(line.lb), ErrorKind::non_finite,
                "iteration " + std::to_string(it) + ": non-finite loss (lce=" + std::to_string(line.lce) + ", lb=" + std::to_string(line.lb) + ")");
        tape.backward(terms.total);
        sgd.step(lr);
        sgd.zero_grad();

        result.trace.push_back(line);
        if (trace_file.is_open()) trace_file << line.to_string() << '\n';
        if (on_iteration) on_iteration(line);
        if (!cfg.out_dir.empty() && cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0 && it + 1 < cfg.iterations)
            save_checkpoint(net.params(), cfg.net.digest(), checkpoint_path(cfg.out_dir, "iter_" + std::to_string(it + 1)));
        if (eval_set && cfg.eval_interval > 0 && (it + 1) % cfg.eval_interval == 0 && trace_file.is_open()) {
            const MetricsReport r = evaluate(net, *eval_set, cfg.boundary_tolerance);
            trace_file << "# eval iter=" << it + 1 << " miou=" << r.iou.mean << " bf1=" << r.boundary.f1 << '\n';
        }
    }
    if (!cfg.out_dir.empty()) save_checkpoint(net.params(), cfg.net.digest(), checkpoint_path(cfg.out_dir, "final"));
    return result;
}

// --- evaluation -----------------------------------------------------------------

/// Per-pixel argmax over channels of [1,M,H,W]; ties go to the lowest class.
inline LabelMap argmax_labels(const Tensor& logits, std::size_t n = 0) {
    const std::size_t M = logits.dim(1), H = logits.dim(2), W = logits.dim(3), HW = H * W;
    LabelMap out(H, W, static_cast<int>(M));
    const double* base = logits.data().data() + n * M * HW;
    for (std::size_t p = 0; p < HW; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < M; ++c)
            if (base[c * HW + p] > base[best * HW + p]) best = c;
        out.labels[p] = static_cast<std::int32_t>(best);
    }
    return out;
}

inline Tensor as_batch(const Tensor& image) {
    return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

inline LabelMap predict(Network& net, const Sample& s) { return argmax_labels(net.forward(as_batch(s.image), Mode::eval)); }

inline MetricsReport evaluate(Network& net, const std::vector<Sample>& samples, std::size_t tolerance) {
    require(!samples.empty(), ErrorKind::config, "evaluation set is empty");
    MetricsReport r;
    r.confusion = ConfusionMatrix(net.config().num_classes);
    r.boundary_tolerance = tolerance;
    BoundaryCounts bc;
    const auto t0 = std::chrono::steady_clock::now();
    for (const Sample& s : samples) {
        const LabelMap pred = predict(net, s);
        r.confusion.accumulate(pred, s.label);
        bc += boundary_counts(pred, s.label, tolerance);
    }
    const auto t1 = std::chrono::steady_clock::now();
    r.images = samples.size();
    r.seconds_per_image = std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(samples.size());
    r.iou = miou(r.confusion);
    r.boundary = boundary_score(bc);
    return r;
}

// --- export -----------------------------------------------------------------------

/// Writes pred_NNNNNN.ppm color maps (class palette) for every sample.
inline void export_predictions(Network& net, const std::vector<Sample>& samples, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto& pal = default_palette();
    require(net.config().num_classes <= pal.size(), ErrorKind::config, "export: more classes than palette colors");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const LabelMap pred = predict(net, samples[i]);
        const std::size_t HW = pred.size();
        Tensor img({3, pred.height, pred.width});
        for (std::size_t p = 0; p < HW; ++p)
            for (std::size_t c = 0; c < 3; ++c) img[c * HW + p] = pal[static_cast<std::size_t>(pred.labels[p])][c];
        std::ostringstream name;
        name << "pred_" << std::setw(6) << std::setfill('0') << i << ".ppm";
        write_ppm((std::filesystem::path(out_dir) / name.str()).string(), img);
    }
}

// --- benchmark --------------------------------------------------------------------

struct BenchmarkResult {
    Cost cost;
    double seconds_per_forward = 0.0;
    std::size_t height = 0, width = 0;
};

inline BenchmarkResult benchmark(const NetConfig& cfg, std::size_t H, std::size_t W, std::size_t repeats, std::uint64_t seed) {
    BenchmarkResult r{count_cost(cfg, H, W), 0.0, H, W};
    Network net(cfg, seed);
    Rng rng(seed);
    Tensor x({1, cfg.in_channels, H, W});
    for (double& v : x.data()) v = rng.uniform();
    net.forward(x, Mode::eval);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < repeats; ++i) net.forward(x, Mode::eval);
    const auto t1 = std::chrono::steady_clock::now();
    r.seconds_per_forward = std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(std::max<std::size_t>(1, repeats));
    return r;
}

}  // namespace bcmf

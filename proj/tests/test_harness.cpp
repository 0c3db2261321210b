#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bcmf/harness.hpp"
#include "hand_count.hpp"

using namespace bcmf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("bcmf_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

// Small, fast training setup on 32x32 scenes.
TrainConfig quick_config() {
    TrainConfig cfg;
    cfg.net = hand_count::config();
    cfg.net.num_classes = 3;
    cfg.net.in_channels = 3;
    cfg.data.height = cfg.data.width = 64;
    cfg.data.num_classes = 3;
    cfg.data.seed = 5;
    cfg.crop = 32;
    cfg.batch_size = 2;
    cfg.iterations = 50;
    cfg.bcl.min_kept = 16;
    return cfg;
}

}  // namespace

TEST(PolySchedule, StartsAtLr0AndDecreases) {
    EXPECT_EQ(poly_lr(0.05, 0, 100, 0.9), 0.05);
    double prev = 1.0;
    for (std::size_t i = 0; i < 100; ++i) {
        const double lr = poly_lr(0.05, i, 100, 0.9);
        EXPECT_LT(lr, prev);
        EXPECT_GE(lr, 0.0);
        prev = lr;
    }
    EXPECT_EQ(poly_lr(0.05, 100, 100, 0.9), 0.0);
}

TEST(Config, ParsesKeyValuesWithComments) {
    std::istringstream is("# comment\nbcl.step = 2\n  train.lr=0.01  # trailing\n\nlmfm.scales = 1, 2, global\n");
    const KeyValues kv = parse_key_values(is, "test");
    TrainConfig cfg;
    apply_config(cfg, kv);
    EXPECT_EQ(cfg.bcl.step, 2u);
    EXPECT_EQ(cfg.lr, 0.01);
    EXPECT_EQ(cfg.net.lmfm.scales, (std::vector<std::size_t>{1, 2, kGlobalScale}));
}

TEST(Config, DerivesDependentFields) {
    TrainConfig cfg;
    apply_config(cfg, {{"net.low_channels", "24"}, {"net.high_channels", "12"}, {"net.num_classes", "3"}});
    EXPECT_EQ(cfg.net.lmfm.in_channels, 24u);
    EXPECT_EQ(cfg.net.lmfm.out_channels, 12u);
    EXPECT_EQ(cfg.data.num_classes, 3);
    EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, RejectsBadInput) {
    TrainConfig cfg;
    EXPECT_THROW(apply_config(cfg, {{"train.nope", "1"}}), Error);
    EXPECT_THROW(apply_config(cfg, {{"train.lr", "fast"}}), Error);
    EXPECT_THROW(apply_config(cfg, {{"train.batch_size", "-1"}}), Error);
    std::istringstream is("novalue\n");
    EXPECT_THROW(parse_key_values(is, "x"), Error);
    TrainConfig bad;
    bad.lr = 0.0;
    EXPECT_THROW(bad.validate(), Error);
    bad = TrainConfig{};
    bad.crop = 100;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Augmentation, CropAndFlipKeepPixelLabelCorrespondence) {
    // Channels 0/1 encode the source row/column; the label is a hash of both.
    const std::size_t H = 40, W = 56;
    Sample s{Tensor({3, H, W}, 0.0), LabelMap(H, W, 7)};
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
            s.image[i * W + j] = static_cast<double>(i);
            s.image[H * W + i * W + j] = static_cast<double>(j);
            s.label.at(i, j) = static_cast<std::int32_t>((3 * i + 5 * j) % 7);
        }
    const std::vector<Sample> set{s};
    BatchSampler sampler(set, 4, 16, 0.5, 9);
    std::size_t flipped = 0;
    for (int t = 0; t < 20; ++t) {
        const Batch b = sampler.next();
        for (std::size_t n = 0; n < 4; ++n) {
            const double* rows = b.images.data().data() + n * 3 * 256;
            const double* cols = rows + 256;
            flipped += cols[1] < cols[0];
            for (std::size_t p = 0; p < 256; ++p) {
                const auto si = static_cast<std::size_t>(rows[p]), sj = static_cast<std::size_t>(cols[p]);
                ASSERT_EQ(b.labels[n].labels[p], s.label.at(si, sj));
                if (p % 16 > 0) { ASSERT_EQ(std::abs(cols[p] - cols[p - 1]), 1.0); }
            }
        }
    }
    EXPECT_GT(flipped, 0u);
    EXPECT_LT(flipped, 80u);
}

TEST(Train, ZeroIterationsSavesInitialization) {
    TrainConfig cfg = quick_config();
    cfg.iterations = 0;
    cfg.out_dir = temp_dir("train0").string();
    const auto data = generate(cfg.data, 4);
    TrainResult r = train(cfg, data);
    EXPECT_TRUE(r.trace.empty());
    Network init(cfg.net, cfg.seed);
    Network loaded(cfg.net, 123);
    load_checkpoint(loaded.params(), cfg.net.digest(), checkpoint_path(cfg.out_dir, "final"));
    EXPECT_EQ(loaded.params().checksum(), init.params().checksum());
}

TEST(Train, SameSeedGivesIdenticalTracesAndCheckpoints) {
    TrainConfig cfg = quick_config();
    const auto data = generate(cfg.data, 6);
    const fs::path dir_a = temp_dir("train_a"), dir_b = temp_dir("train_b");
    cfg.out_dir = dir_a.string();
    TrainResult a = train(cfg, data);
    cfg.out_dir = dir_b.string();
    TrainResult b = train(cfg, data);
    ASSERT_EQ(a.trace.size(), 50u);
    EXPECT_EQ(a.trace, b.trace);
    EXPECT_EQ(slurp(dir_a / "final.bcmf"), slurp(dir_b / "final.bcmf"));
    EXPECT_EQ(slurp(dir_a / "trace.txt"), slurp(dir_b / "trace.txt"));
    EXPECT_EQ(slurp(dir_a / "trace.txt").substr(0, 6), "iter=0");
}

TEST(Train, BoundaryTermChangesTheTrajectory) {
    TrainConfig cfg = quick_config();
    cfg.iterations = 3;
    const auto data = generate(cfg.data, 6);
    cfg.bcl.alpha = 0.0;
    TrainResult plain = train(cfg, data);
    cfg.bcl.alpha = 0.4;
    TrainResult full = train(cfg, data);
    EXPECT_EQ(plain.trace[0].lce, full.trace[0].lce);
    EXPECT_NE(plain.trace[1].lce, full.trace[1].lce);
}

TEST(Train, PeriodicCheckpoints) {
    TrainConfig cfg = quick_config();
    cfg.iterations = 6;
    cfg.checkpoint_interval = 2;
    cfg.out_dir = temp_dir("train_ckpt").string();
    train(cfg, generate(cfg.data, 4));
    EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "iter_2.bcmf"));
    EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "iter_4.bcmf"));
    EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "final.bcmf"));
}

TEST(Evaluate, CheckpointRoundTripGivesIdenticalReport) {
    TrainConfig cfg = quick_config();
    cfg.iterations = 5;
    cfg.out_dir = temp_dir("eval_rt").string();
    const auto data = generate(cfg.data, 4);
    TrainResult r = train(cfg, data);
    const MetricsReport before = evaluate(r.net, data, 2);
    Network loaded(cfg.net, 77);
    load_checkpoint(loaded.params(), cfg.net.digest(), checkpoint_path(cfg.out_dir, "final"));
    const MetricsReport after = evaluate(loaded, data, 2);
    EXPECT_EQ(before.confusion, after.confusion);
    EXPECT_EQ(before.iou.mean, after.iou.mean);
    EXPECT_EQ(before.boundary.f1, after.boundary.f1);
}

TEST(Evaluate, ZeroHeadPredictsLowestClassEverywhere) {
    TrainConfig cfg = quick_config();
    const auto data = generate(cfg.data, 3);
    Network net(cfg.net, 1);
    for (double& v : net.classifier().weight.data()) v = 0.0;
    const MetricsReport r = evaluate(net, data, 2);
    std::uint64_t background = 0, total = 0;
    std::vector<bool> present(3, false);
    for (const auto& s : data)
        for (auto l : s.label.labels) {
            background += l == 0;
            ++total;
            present[static_cast<std::size_t>(l)] = true;
        }
    // Only class 0 is predicted: IoU_0 = |gt == 0| / |all|, every other present class scores 0.
    EXPECT_DOUBLE_EQ(r.iou.per_class[0], static_cast<double>(background) / static_cast<double>(total));
    const double n_present = static_cast<double>(std::count(present.begin(), present.end(), true));
    EXPECT_DOUBLE_EQ(r.iou.mean, r.iou.per_class[0] / n_present);
}

TEST(Evaluate, EmptySetIsAnError) {
    Network net(quick_config().net, 1);
    EXPECT_THROW(evaluate(net, {}, 2), Error);
}

TEST(Evaluate, ArgmaxTiesGoToLowestClass) {
    Tensor logits({1, 3, 1, 2}, std::vector<double>{1, 0, 1, 2, 0, 2});
    EXPECT_EQ(argmax_labels(logits).labels, (std::vector<std::int32_t>{0, 1}));
}

TEST(Export, WritesOnePaletteImagePerSample) {
    TrainConfig cfg = quick_config();
    const auto data = generate(cfg.data, 2);
    Network net(cfg.net, 1);
    const fs::path dir = temp_dir("export");
    export_predictions(net, data, dir.string());
    const Tensor img = read_ppm((dir / "pred_000001.ppm").string());
    EXPECT_EQ(img.shape(), (Shape{3, 64, 64}));
    const LabelMap pred = predict(net, data[0]);
    const Tensor first = read_ppm((dir / "pred_000000.ppm").string());
    const auto& pal = default_palette();
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(first[c * 64 * 64], pal[static_cast<std::size_t>(pred.labels[0])][c], 1.0 / 510.0);
}

TEST(Benchmark, ReportsCostAndTime) {
    const BenchmarkResult r = benchmark(hand_count::config(), 32, 32, 2, 1);
    EXPECT_EQ(r.cost.params, hand_count::total_params());
    EXPECT_GT(r.seconds_per_forward, 0.0);
}

TEST(Config, TextRoundTrip) {
    TrainConfig cfg;
    apply_config(cfg, {{"bcl.alpha", "0.25"}, {"lmfm.connection", "cascade"}, {"data.noise", "0.05"}, {"train.lr", "0.1"}});
    std::istringstream is(config_text(cfg));
    TrainConfig back;
    apply_config(back, parse_key_values(is, "roundtrip"));
    EXPECT_EQ(config_text(back), config_text(cfg));
    EXPECT_EQ(back.net.digest(), cfg.net.digest());
    EXPECT_EQ(back.data.digest(), cfg.data.digest());
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "bcmf/datagen.hpp"
#include "bcmf/metrics.hpp"

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

std::string write_file(const fs::path& p, const std::string& content) {
    std::ofstream os(p, std::ios::binary);
    os << content;
    return p.string();
}

template <typename Fn>
ErrorKind kind_of(Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    return static_cast<ErrorKind>(-1);
}

SceneSpec small_spec(std::uint64_t seed = 3) {
    SceneSpec s;
    s.height = 32;
    s.width = 48;
    s.seed = seed;
    return s;
}

}  // namespace

TEST(Datagen, SameSeedSameSamples) {
    const auto a = generate(small_spec(), 5), b = generate(small_spec(), 5);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(a[i].label, b[i].label);
        EXPECT_TRUE(std::equal(a[i].image.data().begin(), a[i].image.data().end(), b[i].image.data().begin()));
    }
    EXPECT_NE(generate(small_spec(4), 1)[0].label, a[0].label);
    // A sample depends only on its index.
    EXPECT_EQ(generate(small_spec(), 2, 3)[0].label, a[3].label);
}

TEST(Datagen, ZeroShapesIsAllBackground) {
    SceneSpec s = small_spec();
    s.min_shapes = s.max_shapes = 0;
    for (const auto& smp : generate(s, 3))
        for (auto l : smp.label.labels) EXPECT_EQ(l, 0);
}

TEST(Datagen, NoiselessImageChangesExactlyAtLabelChanges) {
    SceneSpec s = small_spec();
    s.noise_sigma = 0.0;
    for (const auto& smp : generate(s, 10)) {
        const std::size_t H = s.height, W = s.width, HW = H * W;
        auto same_pixel = [&](std::size_t a, std::size_t b) {
            for (std::size_t c = 0; c < 3; ++c)
                if (smp.image[c * HW + a] != smp.image[c * HW + b]) return false;
            return true;
        };
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j + 1 < W; ++j) {
                const std::size_t p = i * W + j;
                ASSERT_EQ(same_pixel(p, p + 1), smp.label.labels[p] == smp.label.labels[p + 1]);
                if (i + 1 < H) { ASSERT_EQ(same_pixel(p, p + W), smp.label.labels[p] == smp.label.labels[p + W]); }
            }
    }
}

TEST(Datagen, BackgroundAlwaysPresentAndClassesCovered) {
    SceneSpec s = small_spec();
    s.min_shapes = 1;
    s.max_shapes = 4;
    std::vector<std::size_t> freq(4, 0);
    for (const auto& smp : generate(s, 100)) {
        EXPECT_NE(std::find(smp.label.labels.begin(), smp.label.labels.end(), 0), smp.label.labels.end());
        for (auto l : smp.label.labels) ++freq[static_cast<std::size_t>(l)];
        const auto mask = boundary_mask(smp.label);
        EXPECT_NE(std::find(mask.begin(), mask.end(), true), mask.end());
    }
    for (auto f : freq) EXPECT_GT(f, 0u);
}

TEST(Datagen, SpecErrors) {
    SceneSpec s = small_spec();
    s.height = 0;
    EXPECT_EQ(kind_of([&] { generate_sample(s, 0); }), ErrorKind::config);
    s = small_spec();
    s.num_classes = 10;
    EXPECT_EQ(kind_of([&] { generate_sample(s, 0); }), ErrorKind::config);
}

TEST(Netpbm, LabelRoundTripIsExact) {
    const fs::path dir = temp_dir("pgm");
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        LabelMap lm(rng.uniform_int(1, 20), rng.uniform_int(1, 20), 6);
        for (auto& l : lm.labels) l = rng.bernoulli(0.1) ? lm.ignore_index : static_cast<std::int32_t>(rng.uniform_int(0, 5));
        write_pgm((dir / "a.pgm").string(), lm);
        EXPECT_EQ(read_pgm((dir / "a.pgm").string(), 6), lm);
    }
}

TEST(Netpbm, ImageRoundTripWithinHalfStep) {
    const fs::path dir = temp_dir("ppm");
    Rng rng(2);
    Tensor img({3, 7, 9});
    for (double& v : img.data()) v = rng.uniform();
    write_ppm((dir / "a.ppm").string(), img);
    const Tensor back = read_ppm((dir / "a.ppm").string());
    ASSERT_EQ(back.shape(), img.shape());
    for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_LE(std::abs(back[i] - img[i]), 1.0 / 510.0 + 1e-15);
}

TEST(Netpbm, MalformedFilesAreRejected) {
    const fs::path dir = temp_dir("bad_pnm");
    EXPECT_EQ(kind_of([&] { read_ppm(write_file(dir / "p3.ppm", "P3\n1 1\n255\n0 0 0\n")); }), ErrorKind::format);
    EXPECT_EQ(kind_of([&] { read_ppm(write_file(dir / "max.ppm", std::string("P6\n1 1\n65535\n") + std::string(6, '\0'))); }),
              ErrorKind::format);
    EXPECT_EQ(kind_of([&] { read_ppm(write_file(dir / "short.ppm", std::string("P6\n2 2\n255\n") + std::string(5, '\0'))); }),
              ErrorKind::format);
    EXPECT_EQ(kind_of([&] { read_pgm(write_file(dir / "hdr.pgm", "P5\nx 1\n255\n"), 4); }), ErrorKind::format);
    EXPECT_EQ(kind_of([&] { read_pgm(write_file(dir / "p6.pgm", std::string("P6\n1 1\n255\n") + std::string(3, '\0')), 4); }),
              ErrorKind::format);
    EXPECT_EQ(kind_of([&] { read_ppm((dir / "missing.ppm").string()); }), ErrorKind::io);
    // Comments in the header are legal.
    const Tensor ok = read_ppm(write_file(dir / "c.ppm", std::string("P6\n# note\n1 1\n255\n") + std::string("\x10\x20\x30", 3)));
    EXPECT_DOUBLE_EQ(ok[0], 16.0 / 255.0);
}

TEST(Netpbm, OutOfRangeLabelIsRejected) {
    const fs::path dir = temp_dir("pgm_range");
    const std::string path = write_file(dir / "a.pgm", std::string("P5\n2 1\n255\n") + std::string("\x01\x07", 2));
    EXPECT_THROW(read_pgm(path, 4), Error);
}

TEST(Manifest, DatasetRoundTripAndByteReproducibility) {
    const fs::path a = temp_dir("ds_a"), b = temp_dir("ds_b");
    SceneSpec s = small_spec();
    const auto samples = generate(s, 4);
    write_dataset(a.string(), samples, s.digest(), s.num_classes);
    write_dataset(b.string(), generate(s, 4), s.digest(), s.num_classes);
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        EXPECT_EQ(slurp(entry.path()), slurp(b / fs::relative(entry.path(), a))) << entry.path();
    }
    const Manifest m = read_manifest((a / "manifest.txt").string());
    EXPECT_EQ(m.digest, s.digest());
    EXPECT_EQ(m.num_classes, 4);
    const auto loaded = load_dataset(m);
    ASSERT_EQ(loaded.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(loaded[i].label, samples[i].label);
        for (std::size_t k = 0; k < samples[i].image.numel(); ++k)
            ASSERT_LE(std::abs(loaded[i].image[k] - samples[i].image[k]), 1.0 / 510.0 + 1e-15);
    }
}

TEST(Manifest, MalformedManifestsAreRejected) {
    const fs::path dir = temp_dir("bad_manifest");
    EXPECT_EQ(kind_of([&] { read_manifest(write_file(dir / "empty.txt", "")); }), ErrorKind::format);
    EXPECT_EQ(kind_of([&] { read_manifest(write_file(dir / "hdr.txt", "# other v1\n")); }), ErrorKind::format);
    EXPECT_EQ(kind_of([&] { read_manifest(write_file(dir / "count.txt", "# bcmf-manifest v1 digest=00 classes=4 count=2\na b\n")); }),
              ErrorKind::format);
}

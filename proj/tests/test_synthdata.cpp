#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "dbce/metrics.hpp"
#include "dbce/synthdata.hpp"

using namespace dbce;

namespace {

std::string tmp_dir(const std::string& name) {
    const auto path = std::filesystem::temp_directory_path() / ("dbce_synth_" + name);
    std::filesystem::remove_all(path);
    return path.string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

bool bitwise_equal(const SynthSample& a, const SynthSample& b) {
    return a.mask == b.mask && a.image.same_shape(b.image) &&
           std::memcmp(a.image.data(), b.image.data(), a.image.size() * sizeof(double)) == 0;
}

} // namespace

TEST(GenerateSample, DeterministicForConfigAndSeed) {
    const SynthConfig cfg;
    for (std::uint64_t seed : {0ull, 1ull, 12345ull}) {
        const SynthSample a = generate_sample(cfg, seed);
        const SynthSample b = generate_sample(cfg, seed);
        EXPECT_TRUE(bitwise_equal(a, b)) << "seed " << seed;
    }
    EXPECT_FALSE(bitwise_equal(generate_sample(cfg, 1), generate_sample(cfg, 2)));
}

TEST(GenerateSample, NoiselessCaseIsThresholdSeparable) {
    SynthConfig cfg;
    cfg.boundary_fuzz = 0.0;
    cfg.noise_sigma = 0.0;
    const SynthSample s = generate_sample(cfg, 3);
    // piecewise constant image
    for (double v : s.image.values())
        EXPECT_TRUE(v == cfg.background_level || v == cfg.foreground_level) << v;
    // classify by threshold, compare to the mask
    const double threshold = 0.5 * (cfg.background_level + cfg.foreground_level);
    LabelMask pred(s.image.height(), s.image.width());
    for (int y = 0; y < pred.height(); ++y)
        for (int x = 0; x < pred.width(); ++x) pred(y, x) = s.image(y, x) > threshold ? 1 : 0;
    const ClassMetrics m = dice_iou_prec_rec(confusion(pred, s.mask, 1));
    EXPECT_DOUBLE_EQ(m.dice, 1.0);
}

TEST(GenerateSample, ForegroundFractionStaysInBand) {
    const SynthConfig cfg;
    double mean_fraction = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
        const SynthSample s = generate_sample(cfg, seed);
        long long fg = 0;
        for (auto v : s.mask.values()) fg += v != 0;
        const double fraction = static_cast<double>(fg) / static_cast<double>(s.mask.size());
        ASSERT_GE(fraction, cfg.fraction_lo) << "seed " << seed;
        ASSERT_LE(fraction, cfg.fraction_hi) << "seed " << seed;
        mean_fraction += fraction;
    }
    mean_fraction /= 100.0;
    const double mid = 0.5 * (cfg.fraction_lo + cfg.fraction_hi);
    const double half_width = 0.5 * (cfg.fraction_hi - cfg.fraction_lo);
    EXPECT_NEAR(mean_fraction, mid, half_width);
}

TEST(GenerateSample, ImageValuesInUnitInterval) {
    const SynthConfig cfg;
    for (int seed = 0; seed < 5; ++seed) {
        const SynthSample s = generate_sample(cfg, seed);
        for (double v : s.image.values()) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
    }
}

TEST(GenerateSample, MultiClassLabelsStayInRange) {
    SynthConfig cfg;
    cfg.classes = 4;
    cfg.max_objects = 4;
    cfg.fraction_hi = 0.12;
    for (int seed = 0; seed < 10; ++seed) {
        const SynthSample s = generate_sample(cfg, seed);
        for (auto v : s.mask.values()) ASSERT_LT(v, 4);
    }
}

TEST(GenerateSample, UnsatisfiableBandNamesTheConstraint) {
    SynthConfig cfg;
    cfg.fraction_lo = 1e-7;
    cfg.fraction_hi = 2e-7; // smallest object already exceeds this
    try {
        generate_sample(cfg, 0);
        FAIL() << "expected runtime_error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("fraction band"), std::string::npos) << e.what();
    }
}

TEST(GenerateDataset, FileCountAndManifest) {
    const std::string dir = tmp_dir("count");
    SynthConfig cfg;
    cfg.height = cfg.width = 48;
    cfg.max_radius = 8.0;
    cfg.fraction_hi = 0.2;
    const auto entries = generate_dataset(cfg, 7, 10, dir);
    ASSERT_EQ(entries.size(), 10u);
    int files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        (void)entry;
        ++files;
    }
    EXPECT_EQ(files, 21); // 10 images + 10 masks + manifest
    std::ifstream manifest(dir + "/manifest.csv");
    std::string line;
    ASSERT_TRUE(std::getline(manifest, line));
    EXPECT_EQ(line, "file_image,file_mask,seed,count_class_0,count_class_1");
    int rows = 0;
    while (std::getline(manifest, line))
        if (!line.empty()) ++rows;
    EXPECT_EQ(rows, 10);
}

TEST(GenerateDataset, RegenerationIsByteIdentical) {
    const std::string dir_a = tmp_dir("det_a");
    const std::string dir_b = tmp_dir("det_b");
    SynthConfig cfg;
    cfg.height = cfg.width = 48;
    cfg.max_radius = 8.0;
    cfg.fraction_hi = 0.2;
    generate_dataset(cfg, 3, 5, dir_a);
    generate_dataset(cfg, 3, 5, dir_b);
    for (const auto& entry : std::filesystem::directory_iterator(dir_a)) {
        const std::string name = entry.path().filename().string();
        ASSERT_EQ(slurp(dir_a + "/" + name), slurp(dir_b + "/" + name)) << name;
    }
}

TEST(GenerateDataset, ManifestCountsMatchMaskRecount) {
    const std::string dir = tmp_dir("recount");
    SynthConfig cfg;
    cfg.height = cfg.width = 48;
    cfg.max_radius = 8.0;
    cfg.fraction_hi = 0.2;
    cfg.classes = 3;
    const auto entries = generate_dataset(cfg, 11, 6, dir);
    for (const auto& entry : entries) {
        const LabelMask mask = read_pgm(dir + "/" + entry.file_mask);
        std::vector<long long> counts(cfg.classes, 0);
        for (auto v : mask.values()) ++counts[v];
        ASSERT_EQ(counts, entry.class_counts) << entry.file_mask;
    }
}

TEST(SynthConfig, ValidationErrors) {
    SynthConfig cfg;
    cfg.classes = 5;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = SynthConfig{};
    cfg.max_radius = 60.0; // does not fit a 96-wide grid
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = SynthConfig{};
    cfg.fraction_lo = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

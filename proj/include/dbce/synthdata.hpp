#ifndef DBCE_SYNTHDATA_HPP
#define DBCE_SYNTHDATA_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dbce/grid.hpp"
#include "dbce/io.hpp"
#include "dbce/rng.hpp"

namespace dbce {

// Imbalanced synthetic segmentation tasks: a handful of elliptic blobs whose
// intensity falls off smoothly across the geometric boundary, over a
// correlated-noise background. The mask stays crisp; only the image is fuzzy,
// which is what puts the hard pixels next to the objects.
struct SynthConfig {
    int height = 96, width = 96;
    int classes = 2;
    int min_objects = 1, max_objects = 3;
    double min_radius = 4.0, max_radius = 10.0; // ellipse semi-axes, pixels
    double fraction_lo = 0.005, fraction_hi = 0.04; // foreground pixel band
    double boundary_fuzz = 2.0;     // falloff width across the boundary, pixels
    double noise_sigma = 0.08;      // background texture amplitude
    double background_level = 0.35; // base intensities in [0, 1]
    double foreground_level = 0.70;
    int samples = 200;
    std::uint64_t seed = 0;

    void validate() const {
        if (height < 8 || width < 8)
            throw std::invalid_argument("SynthConfig: grid must be at least 8x8");
        if (classes < 2 || classes > 4)
            throw std::invalid_argument("SynthConfig: classes must be in [2, 4]");
        if (min_objects < 1 || max_objects < min_objects || max_objects > 4)
            throw std::invalid_argument("SynthConfig: objects per image must be in [1, 4]");
        if (!(min_radius > 0.0) || max_radius < min_radius)
            throw std::invalid_argument("SynthConfig: radius range must be positive");
        if (2.0 * max_radius >= std::min(height, width))
            throw std::invalid_argument("SynthConfig: max_radius too large for the grid");
        if (!(fraction_lo > 0.0) || !(fraction_hi < 1.0) || fraction_hi < fraction_lo)
            throw std::invalid_argument("SynthConfig: fraction band must be inside (0, 1)");
        if (boundary_fuzz < 0.0 || noise_sigma < 0.0)
            throw std::invalid_argument("SynthConfig: sigmas must be >= 0");
        if (samples < 1) throw std::invalid_argument("SynthConfig: samples must be >= 1");
    }
};

struct SynthSample {
    FloatGrid image; // single channel, values in [0, 1]
    LabelMask mask;  // crisp geometric labels
};

namespace detail {

// 3x3 box blur with replicated borders.
inline FloatGrid box_blur3(const FloatGrid& in) {
    const int H = in.height(), W = in.width();
    FloatGrid out(H, W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            double sum = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = std::clamp(y + dy, 0, H - 1);
                for (int dx = -1; dx <= 1; ++dx)
                    sum += in(yy, std::clamp(x + dx, 0, W - 1));
            }
            out(y, x) = sum / 9.0;
        }
    }
    return out;
}

// interior std of unit white noise after two 3x3 box blurs:
// the separable kernel is ([1,2,3,2,1]/9)^(x2), sum of squares (19/81)^2
constexpr double kBlurredNoiseStd = 19.0 / 81.0;

struct Ellipse {
    int cls;
    double cy, cx, a, b, cos_t, sin_t;
};

} // namespace detail

// Deterministic for (cfg, seed): one xoshiro256++ stream seeded with `seed`
// drives every draw.
inline SynthSample generate_sample(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const int H = cfg.height, W = cfg.width;
    const long long total = static_cast<long long>(H) * W;

    LabelMask mask(H, W);
    FloatGrid signed_dist(H, W); // min over objects; <= 0 inside
    std::vector<detail::Ellipse> objects;
    constexpr int kMaxAttempts = 100;
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
        const int n_obj = rng.uniform_int(cfg.min_objects, cfg.max_objects);
        objects.clear();
        for (int i = 0; i < n_obj; ++i) {
            detail::Ellipse e;
            e.cls = cfg.classes == 2 ? 1 : rng.uniform_int(1, cfg.classes - 1);
            e.a = rng.uniform(cfg.min_radius, cfg.max_radius);
            e.b = rng.uniform(cfg.min_radius, cfg.max_radius);
            const double theta = rng.uniform(0.0, std::numbers::pi);
            e.cos_t = std::cos(theta);
            e.sin_t = std::sin(theta);
            e.cy = rng.uniform(cfg.max_radius, H - cfg.max_radius);
            e.cx = rng.uniform(cfg.max_radius, W - cfg.max_radius);
            objects.push_back(e);
        }
        std::fill(mask.values().begin(), mask.values().end(), std::uint8_t{0});
        long long fg = 0;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                double dmin = 1e30;
                for (const detail::Ellipse& e : objects) {
                    const double dy = y - e.cy, dx = x - e.cx;
                    const double u = (dy * e.cos_t + dx * e.sin_t) / e.a;
                    const double v = (-dy * e.sin_t + dx * e.cos_t) / e.b;
                    const double q = std::sqrt(u * u + v * v);
                    if (q <= 1.0) mask(y, x) = static_cast<std::uint8_t>(e.cls);
                    dmin = std::min(dmin, (q - 1.0) * std::min(e.a, e.b));
                }
                signed_dist(y, x) = dmin;
                if (mask(y, x) != 0) ++fg;
            }
        }
        const double fraction = static_cast<double>(fg) / static_cast<double>(total);
        accepted = fraction >= cfg.fraction_lo && fraction <= cfg.fraction_hi;
    }
    if (!accepted)
        throw std::runtime_error(
            "generate_sample: foreground fraction band [" + std::to_string(cfg.fraction_lo) +
            ", " + std::to_string(cfg.fraction_hi) + "] unsatisfiable for this dims/radius "
            "config after " + std::to_string(kMaxAttempts) + " attempts");

    // intensity: smooth falloff of width boundary_fuzz across each boundary;
    // higher class IDs sit at slightly higher levels so multi-class tasks
    // stay threshold-separable in the noise-free limit
    FloatGrid image(H, W, cfg.background_level);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double d = signed_dist(y, x);
            double t;
            if (cfg.boundary_fuzz > 0.0) {
                const double z = std::clamp(2.0 * d / cfg.boundary_fuzz, -40.0, 40.0);
                t = 1.0 / (1.0 + std::exp(z));
            } else {
                t = d <= 0.0 ? 1.0 : 0.0;
            }
            int cls = mask(y, x);
            if (cls == 0 && t > 0.0) {
                // outside all objects: fade toward the nearest object's level
                double dbest = 1e30;
                for (const detail::Ellipse& e : objects) {
                    const double dy = y - e.cy, dx = x - e.cx;
                    const double u = (dy * e.cos_t + dx * e.sin_t) / e.a;
                    const double v = (-dy * e.sin_t + dx * e.cos_t) / e.b;
                    const double q = std::sqrt(u * u + v * v);
                    const double dd = (q - 1.0) * std::min(e.a, e.b);
                    if (dd < dbest) {
                        dbest = dd;
                        cls = e.cls;
                    }
                }
            }
            const double level =
                std::min(cfg.foreground_level + 0.12 * (cls - 1), 0.98);
            image(y, x) = cfg.background_level + (level - cfg.background_level) * t;
        }
    }

    if (cfg.noise_sigma > 0.0) {
        FloatGrid noise(H, W);
        for (double& v : noise.values()) v = rng.normal();
        noise = detail::box_blur3(detail::box_blur3(noise));
        const double scale = cfg.noise_sigma / detail::kBlurredNoiseStd;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                image(y, x) = std::clamp(image(y, x) + scale * noise(y, x), 0.0, 1.0);
    } else {
        for (double& v : image.values()) v = std::clamp(v, 0.0, 1.0);
    }

    return {std::move(image), std::move(mask)};
}

struct DatasetEntry {
    std::string file_image;
    std::string file_mask;
    std::uint64_t seed = 0;
    std::vector<long long> class_counts;
};

// Samples use seeds base_seed .. base_seed+n-1; images land as PFM, masks as
// PGM, plus a manifest CSV.
inline std::vector<DatasetEntry> generate_dataset(const SynthConfig& cfg,
                                                  std::uint64_t base_seed, int n,
                                                  const std::string& out_dir) {
    cfg.validate();
    if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error(out_dir + ": cannot create directory (" + ec.message() + ")");

    std::vector<DatasetEntry> entries;
    for (int i = 0; i < n; ++i) {
        const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
        const SynthSample sample = generate_sample(cfg, seed);
        char name[32];
        std::snprintf(name, sizeof name, "img_%05d.pfm", i);
        DatasetEntry entry;
        entry.file_image = name;
        std::snprintf(name, sizeof name, "mask_%05d.pgm", i);
        entry.file_mask = name;
        entry.seed = seed;
        entry.class_counts.assign(cfg.classes, 0);
        for (std::uint8_t label : sample.mask.values()) ++entry.class_counts[label];
        write_pfm(sample.image, out_dir + "/" + entry.file_image);
        write_pgm(sample.mask, out_dir + "/" + entry.file_mask);
        entries.push_back(std::move(entry));
    }

    std::string csv = "file_image,file_mask,seed";
    for (int c = 0; c < cfg.classes; ++c) csv += ",count_class_" + std::to_string(c);
    csv += "\n";
    for (const DatasetEntry& e : entries) {
        csv += e.file_image + "," + e.file_mask + "," + std::to_string(e.seed);
        for (long long count : e.class_counts) csv += "," + std::to_string(count);
        csv += "\n";
    }
    std::ofstream out(out_dir + "/manifest.csv", std::ios::binary);
    if (!out) throw io_error(out_dir + "/manifest.csv: cannot open for writing");
    out << csv;
    if (!out) throw io_error(out_dir + "/manifest.csv: write failed");
    return entries;
}

} // namespace dbce

#endif // DBCE_SYNTHDATA_HPP

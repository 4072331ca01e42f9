#ifndef DBCE_TRAINER_HPP
#define DBCE_TRAINER_HPP

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbce/grid.hpp"
#include "dbce/io.hpp"
#include "dbce/losses.hpp"
#include "dbce/metrics.hpp"
#include "dbce/nnet.hpp"
#include "dbce/synthdata.hpp"
#include "dbce/weighting.hpp"

namespace dbce {

// Weighting scheme for the bce loss.
//   dataset:             w_c from class frequency over the training set
//   per_sample:          w_c = N / area_c recomputed per sample
//   per_sample_plus_one: w_c = N / (1 + area_c); with these weights bce and
//                        dbce at radius 0 produce identical training runs
enum class BceWeights { dataset, per_sample, per_sample_plus_one };

inline BceWeights parse_bce_weights(const std::string& name) {
    if (name == "dataset") return BceWeights::dataset;
    if (name == "per_sample") return BceWeights::per_sample;
    if (name == "per_sample_plus_one") return BceWeights::per_sample_plus_one;
    throw std::invalid_argument("unknown bce_weights '" + name +
                                "' (valid: dataset, per_sample, per_sample_plus_one)");
}

inline const char* to_string(BceWeights w) {
    switch (w) {
        case BceWeights::dataset: return "dataset";
        case BceWeights::per_sample: return "per_sample";
        case BceWeights::per_sample_plus_one: return "per_sample_plus_one";
    }
    return "?";
}

struct ExperimentConfig {
    std::string dataset_dir;   // empty: generate synthetic data
    SynthConfig synth;         // synthetic-data knobs (dims, classes, ...)
    int train_samples = 200;
    int eval_samples = 100;
    LossKind loss = LossKind::dbce;
    int radius = 8;            // dilation radius for dbce
    int epochs = 30;
    int batch_size = 8;
    double lr = 5e-4;
    double weight_decay = 1e-4;
    bool poly_schedule = true; // polynomial LR decay, power 0.9
    double eval_fraction = 1.0 / 3.0; // split for directory datasets
    BceWeights bce_weights = BceWeights::dataset;
    double dice_smooth = 1.0;
    bool dbce_normalize_mean = false;
    bool augment_flips = false;
    int hidden = 16;
    int depth = 2;
    AggregateMode metrics_mode = AggregateMode::flat;
    bool metrics_include_background = false;
    std::uint64_t seed = 0;
    std::string out_dir;       // empty: keep results in memory only

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("ExperimentConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("ExperimentConfig: batch_size must be >= 1");
        if (radius < 0) throw std::invalid_argument("ExperimentConfig: radius must be >= 0");
        if (!(eval_fraction > 0.0 && eval_fraction < 1.0))
            throw std::invalid_argument("ExperimentConfig: eval_fraction must be in (0, 1)");
        if (!(lr > 0.0)) throw std::invalid_argument("ExperimentConfig: lr must be > 0");
        if (weight_decay < 0.0)
            throw std::invalid_argument("ExperimentConfig: weight_decay must be >= 0");
        if (dataset_dir.empty()) {
            synth.validate();
            if (train_samples < 1 || eval_samples < 1)
                throw std::invalid_argument("ExperimentConfig: need train and eval samples");
        }
    }
};

// Polynomial learning rate policy: initial * (1 - iter/max_iter)^0.9.
inline double poly_lr(long long iter, long long max_iter, double initial) {
    if (max_iter <= 0) throw std::invalid_argument("poly_lr: max_iter must be > 0");
    if (iter < 0 || iter > max_iter)
        throw std::invalid_argument("poly_lr: iter outside [0, max_iter]");
    return initial * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), 0.9);
}

struct EpochRecord {
    int epoch = 0; // 1-based
    double train_loss = 0;
    double eval_mdice = 0, eval_miou = 0, eval_mprec = 0, eval_mrec = 0;
};

struct RunRecord {
    std::vector<EpochRecord> epochs;
    MetricsReport final_metrics;
    double wall_seconds = 0;
    std::string config_echo;  // canonical key = value lines
    std::uint64_t input_hash = 0; // FNV-1a over config echo and sample bytes
};

struct LoadedDataset {
    std::vector<SynthSample> train, eval;
    std::vector<std::string> train_ids, eval_ids;
    int classes = 0;
};

namespace detail {

// sample seeds: cfg.seed * kSeedStride + index, eval range after train range
constexpr std::uint64_t kSeedStride = 1000003;
constexpr std::uint64_t kModelSeedSalt = 0x6d6f64656cull; // "model"
constexpr std::uint64_t kShuffleSeedSalt = 0x7368756666ull; // "shuff"

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t s = seed ^ salt;
    return splitmix64(s);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline void fnv1a(std::uint64_t& hash, const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        hash ^= p[i];
        hash *= 0x100000001B3ull;
    }
}

inline FloatGrid flip_grid(const FloatGrid& g, bool flip_h, bool flip_v) {
    FloatGrid out(g.height(), g.width());
    for (int y = 0; y < g.height(); ++y)
        for (int x = 0; x < g.width(); ++x)
            out(flip_v ? g.height() - 1 - y : y, flip_h ? g.width() - 1 - x : x) = g(y, x);
    return out;
}

inline OneHotTensor flip_onehot(const OneHotTensor& t, bool flip_h, bool flip_v) {
    OneHotTensor out(t.dims());
    const Dims d = t.dims();
    for (int c = 0; c < d.classes; ++c)
        for (int y = 0; y < d.height; ++y)
            for (int x = 0; x < d.width; ++x)
                out.at(c, flip_v ? d.height - 1 - y : y, flip_h ? d.width - 1 - x : x) =
                    t.at(c, y, x);
    return out;
}

} // namespace detail

// Synthetic: train uses seeds base..base+T-1, eval base+T..base+T+E-1 with
// base = seed * kSeedStride, so train and eval never share samples.
// Directory: manifest order, last round(n * eval_fraction) samples held out.
inline LoadedDataset load_experiment_data(const ExperimentConfig& cfg) {
    cfg.validate();
    LoadedDataset data;
    if (cfg.dataset_dir.empty()) {
        const std::uint64_t base = cfg.seed * detail::kSeedStride;
        data.classes = cfg.synth.classes;
        for (int i = 0; i < cfg.train_samples; ++i) {
            data.train.push_back(generate_sample(cfg.synth, base + i));
            data.train_ids.push_back("train_" + std::to_string(i));
        }
        for (int j = 0; j < cfg.eval_samples; ++j) {
            data.eval.push_back(
                generate_sample(cfg.synth, base + cfg.train_samples + j));
            data.eval_ids.push_back("eval_" + std::to_string(j));
        }
        return data;
    }

    const std::string manifest_path = cfg.dataset_dir + "/manifest.csv";
    std::ifstream manifest(manifest_path);
    if (!manifest) throw io_error(manifest_path + ": cannot open for reading");
    std::string line;
    if (!std::getline(manifest, line))
        throw io_error(manifest_path + ": empty manifest");
    const auto header = detail::split_csv_line(line);
    if (header.size() < 3 || header[0] != "file_image" || header[1] != "file_mask")
        throw io_error(manifest_path + ": unexpected manifest header");
    int classes = 0;
    for (const std::string& col : header)
        if (col.rfind("count_class_", 0) == 0) ++classes;

    std::vector<SynthSample> all;
    std::vector<std::string> ids;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() < 2) throw io_error(manifest_path + ": short manifest row");
        SynthSample s;
        s.image = read_pfm(cfg.dataset_dir + "/" + fields[0]);
        s.mask = read_pgm(cfg.dataset_dir + "/" + fields[1]);
        all.push_back(std::move(s));
        ids.push_back(fields[0]);
    }
    if (all.empty()) throw io_error(manifest_path + ": no samples listed");
    if (classes == 0) {
        int max_label = 0;
        for (const SynthSample& s : all)
            for (std::uint8_t v : s.mask.values()) max_label = std::max(max_label, int(v));
        classes = std::max(2, max_label + 1);
    }
    data.classes = classes;

    const int n = static_cast<int>(all.size());
    int n_eval = static_cast<int>(std::lround(n * cfg.eval_fraction));
    n_eval = std::clamp(n_eval, 1, n - 1);
    for (int i = 0; i < n; ++i) {
        if (i < n - n_eval) {
            data.train.push_back(std::move(all[i]));
            data.train_ids.push_back(ids[i]);
        } else {
            data.eval.push_back(std::move(all[i]));
            data.eval_ids.push_back(ids[i]);
        }
    }
    return data;
}

// Argmax binarization then two-stage metric aggregation.
inline MetricsReport evaluate(const Model& model, const std::vector<SynthSample>& samples,
                              const std::vector<std::string>& ids,
                              AggregateMode mode = AggregateMode::flat,
                              bool include_background = false) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<SampleMetrics> per_sample;
    ForwardCache cache;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::uint8_t label : samples[i].mask.values())
            if (label >= model.config.classes)
                throw std::invalid_argument(
                    "evaluate: mask label exceeds the model's class count");
        const LogitMap logits = forward(model, samples[i].image, &cache);
        // softmax is order-preserving per pixel, so argmax on logits is the
        // argmax of the probabilities
        const LabelMask pred = argmax_labels(logits);
        per_sample.push_back(sample_metrics(pred, samples[i].mask, model.config.classes,
                                            i < ids.size() ? ids[i] : std::to_string(i)));
    }
    return aggregate(per_sample, mode, include_background);
}

inline std::string config_to_string(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "dataset_dir = " << cfg.dataset_dir << "\n"
        << "train_samples = " << cfg.train_samples << "\n"
        << "eval_samples = " << cfg.eval_samples << "\n"
        << "loss = " << to_string(cfg.loss) << "\n"
        << "radius = " << cfg.radius << "\n"
        << "epochs = " << cfg.epochs << "\n"
        << "batch_size = " << cfg.batch_size << "\n"
        << "lr = " << cfg.lr << "\n"
        << "weight_decay = " << cfg.weight_decay << "\n"
        << "poly_schedule = " << (cfg.poly_schedule ? "true" : "false") << "\n"
        << "eval_fraction = " << cfg.eval_fraction << "\n"
        << "bce_weights = " << to_string(cfg.bce_weights) << "\n"
        << "dice_smooth = " << cfg.dice_smooth << "\n"
        << "dbce_normalize_mean = " << (cfg.dbce_normalize_mean ? "true" : "false") << "\n"
        << "augment_flips = " << (cfg.augment_flips ? "true" : "false") << "\n"
        << "hidden = " << cfg.hidden << "\n"
        << "depth = " << cfg.depth << "\n"
        << "metrics_mode = "
        << (cfg.metrics_mode == AggregateMode::flat ? "flat" : "per_organ") << "\n"
        << "metrics_include_background = "
        << (cfg.metrics_include_background ? "true" : "false") << "\n"
        << "seed = " << cfg.seed << "\n"
        << "height = " << cfg.synth.height << "\n"
        << "width = " << cfg.synth.width << "\n"
        << "classes = " << cfg.synth.classes << "\n"
        << "min_objects = " << cfg.synth.min_objects << "\n"
        << "max_objects = " << cfg.synth.max_objects << "\n"
        << "min_radius = " << cfg.synth.min_radius << "\n"
        << "max_radius = " << cfg.synth.max_radius << "\n"
        << "fraction_lo = " << cfg.synth.fraction_lo << "\n"
        << "fraction_hi = " << cfg.synth.fraction_hi << "\n"
        << "boundary_fuzz = " << cfg.synth.boundary_fuzz << "\n"
        << "noise_sigma = " << cfg.synth.noise_sigma << "\n"
        << "background_level = " << cfg.synth.background_level << "\n"
        << "foreground_level = " << cfg.synth.foreground_level << "\n";
    return out.str();
}

// Deterministic for (cfg, seed): data seeds, model init, shuffle order, and
// every reduction run in a fixed sequential order. The data pipeline, init,
// and shuffles depend only on cfg.seed, never on the loss choice.
inline RunRecord train(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const LoadedDataset data = load_experiment_data(cfg);
    const int classes = data.classes;
    const int n_train = static_cast<int>(data.train.size());

    RunRecord record;
    record.config_echo = config_to_string(cfg);
    record.input_hash = 0xcbf29ce484222325ull;
    detail::fnv1a(record.input_hash, record.config_echo.data(), record.config_echo.size());
    for (const auto* split : {&data.train, &data.eval}) {
        for (const SynthSample& s : *split) {
            detail::fnv1a(record.input_hash, s.image.data(), s.image.size() * sizeof(double));
            detail::fnv1a(record.input_hash, s.mask.data(), s.mask.size());
        }
    }

    // ground-truth-only precomputation: one-hot planes, dilated weight maps
    // for dbce, class weights for bce
    std::vector<OneHotTensor> onehots;
    onehots.reserve(n_train);
    for (const SynthSample& s : data.train) onehots.push_back(one_hot(s.mask, classes));

    const StructuringElement element = disk_element(cfg.radius);
    std::vector<PixelWeightMap> weight_maps;
    if (cfg.loss == LossKind::dbce) {
        weight_maps.reserve(n_train);
        for (const OneHotTensor& oh : onehots)
            weight_maps.push_back(pixel_weight_map(oh, element));
    }

    std::vector<ClassWeights> sample_weights; // per-sample bce variants
    ClassWeights dataset_weights;
    if (cfg.loss == LossKind::bce) {
        if (cfg.bce_weights == BceWeights::dataset) {
            std::vector<LabelMask> masks;
            masks.reserve(n_train);
            for (const SynthSample& s : data.train) masks.push_back(s.mask);
            dataset_weights = dataset_class_weights(masks, classes);
        } else {
            sample_weights.reserve(n_train);
            for (const SynthSample& s : data.train)
                sample_weights.push_back(cfg.bce_weights == BceWeights::per_sample
                                             ? per_sample_class_weights(s.mask, classes)
                                             : dilation_aligned_weights(s.mask, classes));
        }
    }

    ModelConfig mc;
    mc.in_channels = 1;
    mc.hidden = cfg.hidden;
    mc.depth = cfg.depth;
    mc.classes = classes;
    mc.seed = detail::derive_seed(cfg.seed, detail::kModelSeedSalt);
    Model model = init_model(mc);
    AdamState adam = init_adam_state(model);

    Rng shuffle_rng(detail::derive_seed(cfg.seed, detail::kShuffleSeedSalt));
    const long long batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const long long max_iter = static_cast<long long>(cfg.epochs) * batches_per_epoch;
    long long step = 0;

    std::vector<int> order(n_train);
    ForwardCache cache;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = 0; i < n_train; ++i) order[i] = i;
        for (int i = n_train - 1; i > 0; --i) { // Fisher-Yates
            const int j = static_cast<int>(shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
            std::swap(order[i], order[j]);
        }

        double epoch_loss_sum = 0.0;
        for (long long b = 0; b < batches_per_epoch; ++b) {
            try {
            const int begin = static_cast<int>(b) * cfg.batch_size;
            const int end = std::min(begin + cfg.batch_size, n_train);
            ParamGrads batch_grads;
            for (int k = begin; k < end; ++k) {
                const int idx = order[k];
                bool flip_h = false, flip_v = false;
                if (cfg.augment_flips) {
                    flip_h = shuffle_rng.uniform01() < 0.5;
                    flip_v = shuffle_rng.uniform01() < 0.5;
                }

                LossOptions opts;
                opts.smooth = cfg.dice_smooth;
                opts.dbce_normalize_mean = cfg.dbce_normalize_mean;
                if (cfg.loss == LossKind::bce)
                    opts.weights = sample_weights.empty() ? dataset_weights : sample_weights[idx];

                const FloatGrid* image = &data.train[idx].image;
                const OneHotTensor* onehot = &onehots[idx];
                const PixelWeightMap* wmap =
                    cfg.loss == LossKind::dbce ? &weight_maps[idx] : nullptr;
                FloatGrid flipped_image;
                OneHotTensor flipped_onehot;
                FloatGrid flipped_map;
                if (flip_h || flip_v) {
                    flipped_image = detail::flip_grid(*image, flip_h, flip_v);
                    flipped_onehot = detail::flip_onehot(*onehot, flip_h, flip_v);
                    image = &flipped_image;
                    onehot = &flipped_onehot;
                    if (wmap) {
                        flipped_map = detail::flip_grid(*wmap, flip_h, flip_v);
                        wmap = &flipped_map;
                    }
                }

                const LogitMap logits = forward(model, *image, &cache);
                const ProbMap probs = softmax(logits);
                const bool dilated = cfg.loss == LossKind::dbce;
                const double sample_loss =
                    dilated
                        ? dbce_loss_with_map(*onehot, probs, *wmap, cfg.dbce_normalize_mean)
                              .total
                        : evaluate_loss(cfg.loss, *onehot, probs, opts).total;
                const GradMap grad_logits =
                    dilated
                        ? dbce_gradient_with_map(*onehot, probs, *wmap, cfg.dbce_normalize_mean)
                        : loss_gradient_from_probs(cfg.loss, *onehot, probs, opts);
                if (!std::isfinite(sample_loss))
                    throw std::runtime_error("non-finite loss");
                epoch_loss_sum += sample_loss;

                ParamGrads sample_grads = backward(model, cache, grad_logits);
                if (batch_grads.empty()) {
                    batch_grads = std::move(sample_grads);
                } else {
                    for (std::size_t l = 0; l < batch_grads.size(); ++l) {
                        for (std::size_t i = 0; i < batch_grads[l].weights.size(); ++i)
                            batch_grads[l].weights[i] += sample_grads[l].weights[i];
                        for (std::size_t i = 0; i < batch_grads[l].bias.size(); ++i)
                            batch_grads[l].bias[i] += sample_grads[l].bias[i];
                    }
                }
            }
            const double inv_count = 1.0 / static_cast<double>(end - begin);
            for (LayerGrads& lg : batch_grads) {
                for (double& g : lg.weights) g *= inv_count;
                for (double& g : lg.bias) g *= inv_count;
            }
            const double lr_t = cfg.poly_schedule ? poly_lr(step, max_iter, cfg.lr) : cfg.lr;
            adam_step(model, batch_grads, adam, lr_t, cfg.weight_decay);
            ++step;
            } catch (const std::exception& e) {
                throw std::runtime_error("train: epoch " + std::to_string(epoch + 1) +
                                         ", batch " + std::to_string(b + 1) + ": " + e.what());
            }
        }

        const MetricsReport eval_report = evaluate(model, data.eval, data.eval_ids,
                                                   cfg.metrics_mode,
                                                   cfg.metrics_include_background);
        EpochRecord er;
        er.epoch = epoch + 1;
        er.train_loss = epoch_loss_sum / static_cast<double>(n_train);
        er.eval_mdice = eval_report.overall.dice;
        er.eval_miou = eval_report.overall.iou;
        er.eval_mprec = eval_report.overall.precision;
        er.eval_mrec = eval_report.overall.recall;
        record.epochs.push_back(er);
        if (epoch == cfg.epochs - 1) record.final_metrics = eval_report;
    }

    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    if (!cfg.out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(cfg.out_dir, ec);
        if (ec) throw io_error(cfg.out_dir + ": cannot create directory (" + ec.message() + ")");

        std::ofstream jsonl(cfg.out_dir + "/run.jsonl", std::ios::binary);
        if (!jsonl) throw io_error(cfg.out_dir + "/run.jsonl: cannot open for writing");
        for (const EpochRecord& er : record.epochs) {
            nlohmann::json j{{"epoch", er.epoch},
                             {"train_loss", er.train_loss},
                             {"eval_mdice", er.eval_mdice},
                             {"eval_miou", er.eval_miou},
                             {"eval_mprec", er.eval_mprec},
                             {"eval_mrec", er.eval_mrec}};
            jsonl << j.dump() << "\n";
        }
        char hash_hex[17];
        std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                      static_cast<unsigned long long>(record.input_hash));
        nlohmann::json summary{{"config", record.config_echo},
                               {"input_hash", hash_hex},
                               {"final_mdice", record.final_metrics.overall.dice},
                               {"final_mrec", record.final_metrics.overall.recall}};
        jsonl << summary.dump() << "\n";
        // wall time lives on its own final line so artifact comparisons can
        // drop it
        jsonl << nlohmann::json{{"wall_seconds", record.wall_seconds}}.dump() << "\n";

        std::ofstream csv(cfg.out_dir + "/metrics.csv", std::ios::binary);
        if (!csv) throw io_error(cfg.out_dir + "/metrics.csv: cannot open for writing");
        csv << to_csv(record.final_metrics);

        save_model(model, cfg.out_dir + "/model.ckpt");
    }
    return record;
}

// Drops the wall-clock line; what remains is a pure function of the config.
inline std::string strip_timing(const std::string& jsonl) {
    std::string out;
    std::istringstream in(jsonl);
    std::string line;
    while (std::getline(in, line))
        if (line.find("wall_seconds") == std::string::npos) out += line + "\n";
    return out;
}

struct SweepRow {
    int radius = 0;
    double mdice = 0, miou = 0, mprec = 0, mrec = 0;
};

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::string csv = "radius,mdice,miou,mprec,mrec\n";
    for (const SweepRow& r : rows) {
        csv += std::to_string(r.radius) + "," + detail::format_metric(r.mdice) + "," +
               detail::format_metric(r.miou) + "," + detail::format_metric(r.mprec) + "," +
               detail::format_metric(r.mrec) + "\n";
    }
    return csv;
}

// One full train + evaluate per radius, shared seed, rows in the given order.
inline std::vector<SweepRow> radius_sweep(const ExperimentConfig& base,
                                          const std::vector<int>& radii) {
    if (radii.empty()) throw std::invalid_argument("radius_sweep: radii list is empty");
    std::vector<SweepRow> rows;
    for (int radius : radii) {
        if (radius < 0) throw std::invalid_argument("radius_sweep: radius must be >= 0");
        ExperimentConfig cfg = base;
        cfg.radius = radius;
        if (!base.out_dir.empty())
            cfg.out_dir = base.out_dir + "/radius_" + std::to_string(radius);
        RunRecord record;
        try {
            record = train(cfg);
        } catch (const std::exception& e) {
            throw std::runtime_error("radius_sweep: radius " + std::to_string(radius) + ": " +
                                     e.what());
        }
        rows.push_back({radius, record.final_metrics.overall.dice,
                        record.final_metrics.overall.iou,
                        record.final_metrics.overall.precision,
                        record.final_metrics.overall.recall});
    }
    if (!base.out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(base.out_dir, ec);
        if (ec) throw io_error(base.out_dir + ": cannot create directory (" + ec.message() + ")");
        std::ofstream csv(base.out_dir + "/sweep.csv", std::ios::binary);
        if (!csv) throw io_error(base.out_dir + "/sweep.csv: cannot open for writing");
        csv << sweep_to_csv(rows);
    }
    return rows;
}

} // namespace dbce

#endif // DBCE_TRAINER_HPP

// Command-line front end: weight-map export, loss evaluation, synthetic data
// generation, training, evaluation, and the dilation-radius sweep.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags or bad
// input files).

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dbce/dbce.hpp"

namespace {

struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

dbce::LabelMask load_mask_or_usage(const std::string& path) {
    try {
        return dbce::read_pgm(path);
    } catch (const std::exception& e) {
        throw usage_error(e.what());
    }
}

dbce::FloatGrid load_pfm_or_usage(const std::string& path) {
    try {
        return dbce::read_pfm(path);
    } catch (const std::exception& e) {
        throw usage_error(e.what());
    }
}

// ---- flat key = value experiment config files ----

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

int parse_int_value(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw usage_error(key + ": expected an integer, got '" + value + "'");
    }
}

double parse_double_value(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw usage_error(key + ": expected a number, got '" + value + "'");
    }
}

bool parse_bool_value(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on") return true;
    if (value == "false" || value == "0" || value == "off") return false;
    throw usage_error(key + ": expected true/false, got '" + value + "'");
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw usage_error(key + ": expected an unsigned integer, got '" + value + "'");
    }
}

using ConfigSetter = std::function<void(const std::string&, const std::string&)>;

// keys mirror the command-line flags (without the leading dashes)
std::map<std::string, ConfigSetter> experiment_setters(dbce::ExperimentConfig& cfg,
                                                       std::string& loss_name,
                                                       std::string& bce_weights_name,
                                                       std::string& metrics_mode_name) {
    const auto int_to = [](int& field) {
        return [&field](const std::string& k, const std::string& v) {
            field = parse_int_value(k, v);
        };
    };
    const auto double_to = [](double& field) {
        return [&field](const std::string& k, const std::string& v) {
            field = parse_double_value(k, v);
        };
    };
    const auto bool_to = [](bool& field) {
        return [&field](const std::string& k, const std::string& v) {
            field = parse_bool_value(k, v);
        };
    };
    const auto string_to = [](std::string& field) {
        return [&field](const std::string&, const std::string& v) { field = v; };
    };
    return {
        {"dataset-dir", string_to(cfg.dataset_dir)},
        {"train-samples", int_to(cfg.train_samples)},
        {"eval-samples", int_to(cfg.eval_samples)},
        {"loss", string_to(loss_name)},
        {"radius", int_to(cfg.radius)},
        {"epochs", int_to(cfg.epochs)},
        {"batch-size", int_to(cfg.batch_size)},
        {"lr", double_to(cfg.lr)},
        {"weight-decay", double_to(cfg.weight_decay)},
        {"poly-schedule", bool_to(cfg.poly_schedule)},
        {"eval-fraction", double_to(cfg.eval_fraction)},
        {"bce-weights", string_to(bce_weights_name)},
        {"dice-smooth", double_to(cfg.dice_smooth)},
        {"dbce-normalize-mean", bool_to(cfg.dbce_normalize_mean)},
        {"augment-flips", bool_to(cfg.augment_flips)},
        {"hidden", int_to(cfg.hidden)},
        {"depth", int_to(cfg.depth)},
        {"metrics-mode", string_to(metrics_mode_name)},
        {"include-background", bool_to(cfg.metrics_include_background)},
        {"seed",
         [&cfg](const std::string& k, const std::string& v) { cfg.seed = parse_u64_value(k, v); }},
        {"out-dir", string_to(cfg.out_dir)},
        {"height", int_to(cfg.synth.height)},
        {"width", int_to(cfg.synth.width)},
        {"classes", int_to(cfg.synth.classes)},
        {"min-objects", int_to(cfg.synth.min_objects)},
        {"max-objects", int_to(cfg.synth.max_objects)},
        {"min-radius", double_to(cfg.synth.min_radius)},
        {"max-radius", double_to(cfg.synth.max_radius)},
        {"fraction-lo", double_to(cfg.synth.fraction_lo)},
        {"fraction-hi", double_to(cfg.synth.fraction_hi)},
        {"boundary-fuzz", double_to(cfg.synth.boundary_fuzz)},
        {"noise-sigma", double_to(cfg.synth.noise_sigma)},
        {"background-level", double_to(cfg.synth.background_level)},
        {"foreground-level", double_to(cfg.synth.foreground_level)},
    };
}

// command-line flags take precedence: a key only applies when its flag was
// not given explicitly
void apply_config_file(CLI::App* cmd, const std::string& path,
                       std::map<std::string, ConfigSetter>& setters) {
    std::ifstream in(path);
    if (!in) throw usage_error(path + ": cannot open config file");
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw usage_error(path + ":" + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto setter = setters.find(key);
        if (setter == setters.end())
            throw usage_error(path + ":" + std::to_string(line_no) + ": unknown config key '" +
                              key + "'");
        const CLI::Option* opt = cmd->get_option_no_throw("--" + key);
        if (opt && opt->count() > 0) continue;
        setter->second(key, value);
    }
}

// flags shared by train and sweep; mirrors ExperimentConfig (and the
// key = value config file accepted via --config)
void add_experiment_options(CLI::App* cmd, dbce::ExperimentConfig& cfg, std::string& loss_name,
                            std::string& bce_weights_name, std::string& metrics_mode_name,
                            std::string& config_path) {
    cmd->add_option("--dataset-dir", cfg.dataset_dir,
                    "train on PFM/PGM pairs from this directory instead of synthetic data");
    cmd->add_option("--train-samples", cfg.train_samples, "synthetic training samples");
    cmd->add_option("--eval-samples", cfg.eval_samples, "synthetic evaluation samples");
    cmd->add_option("--loss", loss_name, "loss: ce, bce, dice, dice_ce, dbce");
    cmd->add_option("--radius", cfg.radius, "dilation radius (integer pixels)");
    cmd->add_option("--epochs", cfg.epochs, "training epochs");
    cmd->add_option("--batch-size", cfg.batch_size, "batch size");
    cmd->add_option("--lr", cfg.lr, "initial learning rate");
    cmd->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
    cmd->add_flag("--no-poly-schedule", [&cfg](std::int64_t) { cfg.poly_schedule = false; },
                  "disable the polynomial LR schedule");
    cmd->add_option("--eval-fraction", cfg.eval_fraction,
                    "held-out fraction for directory datasets");
    cmd->add_option("--bce-weights", bce_weights_name,
                    "bce weighting: dataset, per_sample, per_sample_plus_one");
    cmd->add_option("--dice-smooth", cfg.dice_smooth, "soft Dice smoothing constant");
    cmd->add_flag("--dbce-normalize-mean", cfg.dbce_normalize_mean,
                  "divide the dilated loss by the pixel count");
    cmd->add_flag("--augment-flips", cfg.augment_flips, "random horizontal/vertical flips");
    cmd->add_option("--hidden", cfg.hidden, "model hidden channels");
    cmd->add_option("--depth", cfg.depth, "model 3x3 blocks");
    cmd->add_option("--metrics-mode", metrics_mode_name, "aggregation: flat or per_organ");
    cmd->add_flag("--include-background", cfg.metrics_include_background,
                  "include class 0 in metric means");
    cmd->add_option("--seed", cfg.seed, "experiment seed");
    cmd->add_option("--out-dir", cfg.out_dir, "output directory");
    // synthetic generator knobs
    cmd->add_option("--height", cfg.synth.height, "synthetic image height");
    cmd->add_option("--width", cfg.synth.width, "synthetic image width");
    cmd->add_option("--classes", cfg.synth.classes, "class count (background included)");
    cmd->add_option("--min-objects", cfg.synth.min_objects, "min objects per image");
    cmd->add_option("--max-objects", cfg.synth.max_objects, "max objects per image");
    cmd->add_option("--min-radius", cfg.synth.min_radius, "min ellipse semi-axis");
    cmd->add_option("--max-radius", cfg.synth.max_radius, "max ellipse semi-axis");
    cmd->add_option("--fraction-lo", cfg.synth.fraction_lo, "foreground fraction lower bound");
    cmd->add_option("--fraction-hi", cfg.synth.fraction_hi, "foreground fraction upper bound");
    cmd->add_option("--boundary-fuzz", cfg.synth.boundary_fuzz, "boundary falloff width, px");
    cmd->add_option("--noise-sigma", cfg.synth.noise_sigma, "background noise amplitude");
    cmd->add_option("--background-level", cfg.synth.background_level, "background intensity");
    cmd->add_option("--foreground-level", cfg.synth.foreground_level, "foreground intensity");
    cmd->add_option("--config", config_path,
                    "flat key = value config file (keys mirror the flags)");
}

void finalize_experiment(CLI::App* cmd, dbce::ExperimentConfig& cfg, std::string& loss_name,
                         std::string& bce_weights_name, std::string& metrics_mode_name,
                         const std::string& config_path) {
    if (!config_path.empty()) {
        auto setters =
            experiment_setters(cfg, loss_name, bce_weights_name, metrics_mode_name);
        apply_config_file(cmd, config_path, setters);
    }
    try {
        cfg.loss = dbce::parse_loss_kind(loss_name);
        cfg.bce_weights = dbce::parse_bce_weights(bce_weights_name);
        cfg.metrics_mode = dbce::parse_aggregate_mode(metrics_mode_name);
        cfg.validate();
    } catch (const std::exception& e) {
        throw usage_error(e.what());
    }
}

void print_report(const dbce::MetricsReport& report) {
    std::printf("mdice=%.6f miou=%.6f mprec=%.6f mrec=%.6f\n", report.overall.dice,
                report.overall.iou, report.overall.precision, report.overall.recall);
}

int cmd_weights(const std::string& mask_path, int radius, int classes,
                const std::string& out_dir) {
    if (radius < 0) throw usage_error("--radius must be >= 0");
    const dbce::LabelMask mask = load_mask_or_usage(mask_path);
    dbce::OneHotTensor onehot(dbce::Dims{1, 1, 2});
    try {
        onehot = dbce::one_hot(mask, classes);
    } catch (const std::exception& e) {
        throw usage_error(e.what());
    }
    const dbce::StructuringElement element = dbce::disk_element(radius);
    std::filesystem::create_directories(out_dir);
    for (int c = 0; c < classes; ++c) {
        const dbce::BinaryMask dilated = dbce::dilated_class_mask(onehot, c, element);
        long long area = 0;
        for (std::uint8_t b : dilated.values()) area += b;
        std::printf("class %d: dilated_area=%lld\n", c, area);
        dbce::write_pfm(dbce::class_weight_map(onehot, c, element),
                        out_dir + "/W_" + std::to_string(c) + ".pfm");
    }
    dbce::write_pfm(dbce::pixel_weight_map(onehot, element), out_dir + "/M.pfm");
    return 0;
}

int cmd_loss(const std::string& mask_path, const std::vector<std::string>& prob_paths,
             const std::string& loss_name, int radius, double smooth, bool normalize_mean,
             const std::string& map_path) {
    dbce::LossKind kind;
    try {
        kind = dbce::parse_loss_kind(loss_name);
    } catch (const std::exception& e) {
        throw usage_error(e.what());
    }
    if (radius < 0) throw usage_error("--radius must be >= 0");
    const dbce::LabelMask mask = load_mask_or_usage(mask_path);
    const int classes = static_cast<int>(prob_paths.size());
    if (classes < 2) throw usage_error("need one probability PFM per class (at least 2)");

    dbce::ProbMap probs(dbce::Dims{mask.height(), mask.width(), classes});
    for (int c = 0; c < classes; ++c) {
        const dbce::FloatGrid plane = load_pfm_or_usage(prob_paths[c]);
        if (plane.height() != mask.height() || plane.width() != mask.width())
            throw usage_error(prob_paths[c] + ": probability plane dims do not match the mask");
        std::copy(plane.data(), plane.data() + plane.size(), probs.plane(c));
    }
    if (!dbce::probmap_valid(probs, 1e-6))
        throw usage_error("probability planes do not sum to 1 within 1e-6");

    dbce::OneHotTensor onehot(dbce::Dims{1, 1, 2});
    try {
        onehot = dbce::one_hot(mask, classes);
    } catch (const std::exception& e) {
        throw usage_error(e.what());
    }

    dbce::LossOptions opts;
    opts.element = dbce::disk_element(radius);
    opts.smooth = smooth;
    opts.dbce_normalize_mean = normalize_mean;
    if (kind == dbce::LossKind::bce)
        opts.weights = dbce::per_sample_class_weights(mask, classes);

    const dbce::LossValue value = dbce::evaluate_loss(kind, onehot, probs, opts);
    std::printf("%s = %.12g\n", loss_name.c_str(), value.total);
    for (const auto& [name, term] : value.terms)
        std::printf("  %s = %.12g\n", name.c_str(), term);

    if (!map_path.empty()) {
        dbce::FloatGrid map = dbce::ce_loss_map(onehot, probs);
        if (kind == dbce::LossKind::dice || kind == dbce::LossKind::dice_ce)
            throw usage_error("--map is only defined for the pixel-weighted losses "
                              "(ce, bce, dbce)");
        if (kind == dbce::LossKind::bce) {
            const double inv_n = 1.0 / static_cast<double>(mask.size());
            for (int y = 0; y < map.height(); ++y)
                for (int x = 0; x < map.width(); ++x)
                    map(y, x) *= opts.weights.values[mask(y, x)] * inv_n;
        } else if (kind == dbce::LossKind::dbce) {
            const dbce::PixelWeightMap m = dbce::pixel_weight_map(onehot, opts.element);
            for (int y = 0; y < map.height(); ++y)
                for (int x = 0; x < map.width(); ++x) map(y, x) *= m(y, x);
        }
        dbce::write_pfm(map, map_path);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dilated balanced cross entropy: losses, weight maps, and the desk-scale "
                 "training harness"};
    app.require_subcommand(1);

    // weights
    auto* weights = app.add_subcommand("weights", "export W_c and M weight maps as PFM");
    std::string w_mask, w_out = ".";
    int w_radius = 0, w_classes = 2;
    weights->add_option("--mask", w_mask, "label mask (PGM)")->required();
    weights->add_option("--radius", w_radius, "dilation radius")->required();
    weights->add_option("--classes", w_classes, "class count");
    weights->add_option("--out-dir", w_out, "output directory");

    // loss
    auto* loss = app.add_subcommand("loss", "evaluate a loss on a mask and probability planes");
    std::string l_mask, l_loss = "dbce", l_map;
    std::vector<std::string> l_probs;
    int l_radius = 0;
    double l_smooth = 1.0;
    bool l_norm = false;
    loss->add_option("--mask", l_mask, "label mask (PGM)")->required();
    loss->add_option("--probs", l_probs, "one probability PFM per class, class order")
        ->required()
        ->expected(-2);
    loss->add_option("--loss", l_loss, "loss: ce, bce, dice, dice_ce, dbce");
    loss->add_option("--radius", l_radius, "dilation radius for dbce");
    loss->add_option("--smooth", l_smooth, "soft Dice smoothing constant");
    loss->add_flag("--normalize", l_norm, "divide the dilated loss by the pixel count");
    loss->add_option("--map", l_map, "write the weighted loss map to this PFM");

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    dbce::SynthConfig g_cfg;
    std::string g_out;
    std::uint64_t g_seed = 0;
    int g_n = 10;
    gen->add_option("--out-dir", g_out, "output directory")->required();
    gen->add_option("--seed", g_seed, "base seed");
    gen->add_option("--n", g_n, "sample count");
    gen->add_option("--height", g_cfg.height, "image height");
    gen->add_option("--width", g_cfg.width, "image width");
    gen->add_option("--classes", g_cfg.classes, "class count (background included)");
    gen->add_option("--min-objects", g_cfg.min_objects, "min objects per image");
    gen->add_option("--max-objects", g_cfg.max_objects, "max objects per image");
    gen->add_option("--min-radius", g_cfg.min_radius, "min ellipse semi-axis");
    gen->add_option("--max-radius", g_cfg.max_radius, "max ellipse semi-axis");
    gen->add_option("--fraction-lo", g_cfg.fraction_lo, "foreground fraction lower bound");
    gen->add_option("--fraction-hi", g_cfg.fraction_hi, "foreground fraction upper bound");
    gen->add_option("--boundary-fuzz", g_cfg.boundary_fuzz, "boundary falloff width, px");
    gen->add_option("--noise-sigma", g_cfg.noise_sigma, "background noise amplitude");
    gen->add_option("--background-level", g_cfg.background_level, "background intensity");
    gen->add_option("--foreground-level", g_cfg.foreground_level, "foreground intensity");

    // train / sweep share the experiment flags
    dbce::ExperimentConfig t_cfg;
    std::string t_loss = "dbce", t_bce = "dataset", t_mode = "flat", t_config;
    auto* train_cmd = app.add_subcommand("train", "train the mini model under one loss");
    add_experiment_options(train_cmd, t_cfg, t_loss, t_bce, t_mode, t_config);

    dbce::ExperimentConfig s_cfg;
    std::string s_loss = "dbce", s_bce = "dataset", s_mode = "flat", s_config;
    std::string s_radii = "0,2,4,8,16,32";
    auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate across dilation radii");
    add_experiment_options(sweep_cmd, s_cfg, s_loss, s_bce, s_mode, s_config);
    sweep_cmd->add_option("--radii", s_radii, "comma-separated radii");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string e_ckpt, e_data, e_out, e_mode = "flat";
    bool e_include_bg = false;
    double e_fraction = 0.0; // 0: evaluate all samples
    eval_cmd->add_option("--ckpt", e_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--dataset-dir", e_data, "dataset directory with manifest.csv")
        ->required();
    eval_cmd->add_option("--eval-fraction", e_fraction,
                         "evaluate only the held-out tail split (0 = all samples)");
    eval_cmd->add_option("--metrics-mode", e_mode, "aggregation: flat or per_organ");
    eval_cmd->add_flag("--include-background", e_include_bg, "include class 0 in means");
    eval_cmd->add_option("--out", e_out, "write the metrics CSV here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
            e.get_name() == "CallForVersion")
            return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        if (weights->parsed()) return cmd_weights(w_mask, w_radius, w_classes, w_out);
        if (loss->parsed())
            return cmd_loss(l_mask, l_probs, l_loss, l_radius, l_smooth, l_norm, l_map);
        if (gen->parsed()) {
            try {
                g_cfg.validate();
                if (g_n < 1) throw std::invalid_argument("--n must be >= 1");
            } catch (const std::exception& e) {
                throw usage_error(e.what());
            }
            dbce::generate_dataset(g_cfg, g_seed, g_n, g_out);
            std::printf("wrote %d samples to %s\n", g_n, g_out.c_str());
            return 0;
        }
        if (train_cmd->parsed()) {
            finalize_experiment(train_cmd, t_cfg, t_loss, t_bce, t_mode, t_config);
            const dbce::RunRecord record = dbce::train(t_cfg);
            const auto& last = record.epochs.back();
            std::printf("loss=%s radius=%d epochs=%d final_train_loss=%.6g\n", t_loss.c_str(),
                        t_cfg.radius, t_cfg.epochs, last.train_loss);
            print_report(record.final_metrics);
            return 0;
        }
        if (sweep_cmd->parsed()) {
            finalize_experiment(sweep_cmd, s_cfg, s_loss, s_bce, s_mode, s_config);
            std::vector<int> radii;
            try {
                std::stringstream ss(s_radii);
                std::string tok;
                while (std::getline(ss, tok, ',')) {
                    std::size_t pos = 0;
                    radii.push_back(std::stoi(tok, &pos));
                    if (pos != tok.size())
                        throw std::invalid_argument("fractional or malformed radius '" + tok + "'");
                }
                if (radii.empty()) throw std::invalid_argument("empty radii list");
            } catch (const std::exception& e) {
                throw usage_error(std::string("--radii: ") + e.what());
            }
            const auto rows = dbce::radius_sweep(s_cfg, radii);
            std::fputs(dbce::sweep_to_csv(rows).c_str(), stdout);
            return 0;
        }
        if (eval_cmd->parsed()) {
            dbce::Model model(([&] {
                try {
                    return dbce::load_model(e_ckpt);
                } catch (const std::exception& e) {
                    throw usage_error(e.what());
                }
            })());
            dbce::ExperimentConfig cfg;
            cfg.dataset_dir = e_data;
            // loader always splits; with no --eval-fraction both splits are
            // recombined below
            cfg.eval_fraction = e_fraction > 0.0 ? e_fraction : 0.5;
            dbce::LoadedDataset data;
            try {
                data = dbce::load_experiment_data(cfg);
            } catch (const std::exception& e) {
                throw usage_error(e.what());
            }
            std::vector<dbce::SynthSample> samples = std::move(data.train);
            std::vector<std::string> ids = std::move(data.train_ids);
            if (e_fraction > 0.0) {
                samples = std::move(data.eval);
                ids = std::move(data.eval_ids);
            } else {
                for (std::size_t i = 0; i < data.eval.size(); ++i) {
                    samples.push_back(std::move(data.eval[i]));
                    ids.push_back(data.eval_ids[i]);
                }
            }
            dbce::AggregateMode mode;
            try {
                mode = dbce::parse_aggregate_mode(e_mode);
            } catch (const std::exception& e) {
                throw usage_error(e.what());
            }
            const dbce::MetricsReport report =
                dbce::evaluate(model, samples, ids, mode, e_include_bg);
            print_report(report);
            if (!e_out.empty()) {
                std::ofstream out(e_out, std::ios::binary);
                if (!out) throw dbce::io_error(e_out + ": cannot open for writing");
                out << dbce::to_csv(report);
            }
            return 0;
        }
    } catch (const usage_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

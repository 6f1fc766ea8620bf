#pragma once

// Command-line front end. dispatch() parses one invocation and runs one subcommand.
// Exit codes: 0 success, 1 usage error, 2 data error (including a failed gradient check).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "urbanform/composite.hpp"
#include "urbanform/error.hpp"
#include "urbanform/eval.hpp"
#include "urbanform/glcm_rf.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/sampler.hpp"
#include "urbanform/segnet.hpp"
#include "urbanform/synthcity.hpp"
#include "urbanform/text.hpp"
#include "urbanform/timeseries.hpp"

namespace urbanform::cli {

struct UsageError : Error {
    using Error::Error;
};

inline CellRegion parse_region(const std::string& s) {
    if (s.empty()) return {};
    const auto parts = text::split(s, ',');
    if (parts.size() != 4) throw UsageError("region must be row0,col0,row1,col1");
    std::size_t v[4];
    for (int i = 0; i < 4; ++i) {
        const auto x = text::to_int(parts[i], "region bound");
        if (x < 0) throw UsageError("region bounds must be non-negative");
        v[i] = static_cast<std::size_t>(x);
    }
    if (v[0] >= v[2] || v[1] >= v[3]) throw UsageError("region must have row0 < row1 and col0 < col1");
    return {v[0], v[1], v[2], v[3]};
}

inline std::vector<std::string> parse_list(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& p : text::split(s, ',')) {
        const auto t = std::string(text::trim(p));
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

inline LabelGrid mask_outside(LabelGrid g, const CellRegion& region) {
    for (std::size_t r = 0; r < g.height; ++r)
        for (std::size_t c = 0; c < g.width; ++c)
            if (!region.contains(r, c)) g.at(r, c) = kUnlabeled;
    return g;
}

// --- PPM quicklooks ----------------------------------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed class colors; unlabeled cells are black.
inline const std::vector<Rgb>& class_colors(LabelKind kind) {
    static const std::vector<Rgb> horizontal{{{210, 210, 210}}, {{255, 220, 90}}, {{245, 140, 40}}, {{200, 30, 30}}};
    static const std::vector<Rgb> vertical{{{210, 210, 210}}, {{245, 140, 40}}, {{120, 20, 140}}};
    static const std::vector<Rgb> growth{{{210, 210, 210}}, {{220, 20, 60}}};
    switch (kind) {
        case LabelKind::horizontal: return horizontal;
        case LabelKind::vertical: return vertical;
        case LabelKind::growth: return growth;
    }
    return horizontal;
}

inline std::string encode_ppm(std::size_t width, std::size_t height, const std::vector<Rgb>& pixels) {
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (const auto& p : pixels) out.append(reinterpret_cast<const char*>(p.data()), 3);
    return out;
}

inline std::string render_labels_ppm(const LabelGrid& g) {
    const auto& colors = class_colors(g.kind);
    std::vector<Rgb> px(g.cells(), Rgb{0, 0, 0});
    for (std::size_t i = 0; i < g.cells(); ++i)
        if (g.codes[i] != kUnlabeled) px[i] = colors.at(g.codes[i]);
    return encode_ppm(g.width, g.height, px);
}

/// True-color quicklook from red/green/blue bands (or the first three), each stretched to its 2-98% range.
inline std::string render_rgb_ppm(const MultiBandRaster& r) {
    auto find = [&](const char* name, std::size_t fallback) {
        auto it = std::find(r.band_names.begin(), r.band_names.end(), name);
        return it != r.band_names.end() ? static_cast<std::size_t>(it - r.band_names.begin()) : std::min(fallback, r.bands - 1);
    };
    const std::size_t bands[3] = {find("red", 0), find("green", 1), find("blue", 2)};
    std::vector<Rgb> px(r.cells(), Rgb{0, 0, 0});
    for (int k = 0; k < 3; ++k) {
        const double* d = r.band_data(bands[k]);
        std::vector<double> v(d, d + r.cells());
        std::erase_if(v, [](double x) { return !std::isfinite(x); });
        if (v.empty()) continue;
        const double lo = nearest_rank_percentile(v, 0.02), hi = nearest_rank_percentile(v, 0.98);
        for (std::size_t i = 0; i < r.cells(); ++i) {
            if (!std::isfinite(d[i])) continue;
            const double t = hi > lo ? (d[i] - lo) / (hi - lo) : 0.5;
            px[i][k] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
        }
    }
    return encode_ppm(r.width, r.height, px);
}

// --- dispatch ----------------------------------------------------------------------------------

namespace detail {

inline bool is_label_raster(const MultiBandRaster& r) {
    if (r.bands != 1) return false;
    const auto head = text::split(r.band_names.front(), ';').front();
    const auto at = head.find('@');
    if (at == std::string::npos) return false;
    const auto kind = head.substr(0, at);
    return kind == "horizontal" || kind == "vertical" || kind == "growth";
}

/// Resolved options of the subcommand as key=value lines, in declaration order.
inline std::string resolved_config(const CLI::App& sub) {
    std::string out = "command=" + sub.get_name() + "\n";
    for (const auto* opt : sub.get_options()) {
        const auto& longs = opt->get_lnames();
        if (longs.empty() || longs.front() == "help" || longs.front() == "help-all" || longs.front() == "config") continue;
        std::string value;
        if (opt->count() > 0) {
            const auto& res = opt->results();
            value = res.empty() ? "" : res.back();
        } else {
            value = opt->get_default_str();
        }
        out += longs.front() + "=" + value + "\n";
    }
    return out;
}

/// Reads `--config FILE` (or --config=FILE) from argv and returns argv with the file's settings
/// inserted as flags right after the subcommand, so explicit flags given later win.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::vector<std::string> rest;
    std::optional<std::string> path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config needs a file");
            path = args[++i];
        } else if (args[i].starts_with("--config=")) {
            path = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (!path) return rest;
    if (rest.size() < 2) throw UsageError("--config needs a subcommand");
    std::vector<std::string> injected;
    for (const auto& [key, value] : text::parse_key_values(text::read_file(*path))) {
        // Echoed run configs name their subcommand; they replay only under the same one.
        if (key == "command") {
            if (value != rest[1]) throw UsageError("config file is for '" + value + "', not '" + rest[1] + "'");
            continue;
        }
        std::string flag = key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        injected.push_back("--" + flag);
        injected.push_back(value);
    }
    std::vector<std::string> out;
    out.push_back(rest[0]);
    out.push_back(rest[1]);
    out.insert(out.end(), injected.begin(), injected.end());
    out.insert(out.end(), rest.begin() + 2, rest.end());
    return out;
}

inline void echo_config(const CLI::App& sub, const std::string& path) { text::write_file(path, resolved_config(sub)); }

}  // namespace detail

inline int dispatch(const std::vector<std::string>& raw_args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Urban density mapping from multi-band rasters", "urbanform"};
    app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    std::map<const CLI::App*, std::function<void()>> actions;
    std::map<const CLI::App*, std::string> config_paths;  // where each run echoes its resolved config

    auto sub = [&](const std::string& name, const std::string& desc) {
        auto* s = app.add_subcommand(name, desc);
        s->add_option("--config", "key=value file; command-line flags override it");
        return s;
    };

    // synth
    struct {
        std::string out, render_years = "all", script;
        std::uint64_t seed = 0;
        std::size_t size = 256, observations = 6, towns = 0;
        int first_year = 2010, last_year = 2014, reference_year = 0;
        double noise = 0.005, dropout = 0.2, drift = 0.1, actions = 1.5;
    } sy;
    {
        auto* s = sub("synth", "Generate a synthetic city timeline and render its observations");
        s->add_option("--out", sy.out, "Output directory")->required();
        s->add_option("--seed", sy.seed);
        s->add_option("--size", sy.size, "Grid size in cells");
        s->add_option("--first-year", sy.first_year);
        s->add_option("--last-year", sy.last_year);
        s->add_option("--reference-year", sy.reference_year, "Drift-free year (0 = last year)");
        s->add_option("--render-years", sy.render_years, "Comma list of years to render, 'all' or 'none'");
        s->add_option("--observations", sy.observations, "Acquisitions per rendered year");
        s->add_option("--noise", sy.noise, "Gaussian reflectance noise std");
        s->add_option("--dropout", sy.dropout, "Cloudy-sample probability");
        s->add_option("--drift", sy.drift, "Per-band radiometric drift amplitude");
        s->add_option("--towns", sy.towns, "Town count (0 = from size)");
        s->add_option("--actions-per-year", sy.actions, "Mean growth actions per year");
        s->add_option("--script", sy.script, "Growth script CSV replacing the random script");
        config_paths[s] = "";
        actions[s] = [&, s] {
            ScenarioOptions so;
            so.towns = sy.towns;
            so.actions_per_year = sy.actions;
            so.drift_amplitude = sy.drift;
            so.reference_year = sy.reference_year;
            std::vector<GrowthAction> script;
            if (!sy.script.empty()) {
                script = parse_script_csv(text::read_file(sy.script));
                so.script = &script;
            }
            const auto sc = generate_city_timeline(sy.seed, sy.first_year, sy.last_year, sy.size, so);
            write_scenario(sc, sy.out);
            std::vector<int> years;
            if (sy.render_years == "all") {
                for (int y = sy.first_year; y <= sy.last_year; ++y) years.push_back(y);
            } else if (sy.render_years != "none") {
                for (const auto& y : parse_list(sy.render_years)) years.push_back(static_cast<int>(text::to_int(y, "render year")));
            }
            if (!years.empty()) {
                ObservationStack all;
                RenderOptions ro{sy.observations, sy.noise, sy.dropout, sy.seed};
                for (int y : years) {
                    auto st = render_reflectance(sc, y, ro);
                    for (auto& o : st.observations) all.observations.push_back(std::move(o));
                }
                write_observation_stack(all, sy.out + "/obs");
            }
            detail::echo_config(*s, sy.out + "/run_config.txt");
            out << "scenario " << sy.size << "x" << sy.size << " years " << sy.first_year << "-" << sy.last_year << ", "
                << sc.script.size() << " growth actions, " << years.size() << " rendered years -> " << sy.out << "\n";
        };
    }

    // composite
    struct {
        std::string observations, out, season_start = "05-01", season_end = "08-31";
        int year = 0, window = 3;
    } co;
    {
        auto* s = sub("composite", "Rolling-median annual composite of in-season good observations");
        s->add_option("--observations", co.observations, "Observation index CSV")->required();
        s->add_option("--year", co.year, "Target year")->required();
        s->add_option("--window", co.window, "Window length in years (odd)");
        s->add_option("--season-start", co.season_start, "MM-DD");
        s->add_option("--season-end", co.season_end, "MM-DD");
        s->add_option("--out", co.out, "Output DMR1 raster")->required();
        actions[s] = [&, s] {
            auto md = [](const std::string& v) {
                const auto p = text::split(v, '-');
                if (p.size() != 2) throw UsageError("season bounds are MM-DD");
                return MonthDay{static_cast<unsigned>(text::to_int(p[0], "month")), static_cast<unsigned>(text::to_int(p[1], "day"))};
            };
            const Season season{md(co.season_start), md(co.season_end)};
            const auto stack = filter_observations(read_observation_stack(co.observations), season);
            if (stack.observations.empty()) throw Error("no observations fall inside the season");
            const auto comp = rolling_median_composite(stack, co.year, co.window);
            write_raster(comp, co.out);
            detail::echo_config(*s, co.out + ".config");
            out << "composite " << co.year << " from " << stack.observations.size() << " in-season observations -> " << co.out << "\n";
        };
    }

    // scales
    struct {
        std::string input, preset, out;
        double percentile = 0.995;
        int source_year = 0;
    } sc;
    {
        auto* s = sub("scales", "Per-band percentile divisors of a training composite");
        s->add_option("--input", sc.input, "Composite raster");
        s->add_option("--preset", sc.preset, "Built-in scales: denmark2014");
        s->add_option("--percentile", sc.percentile);
        s->add_option("--source-year", sc.source_year);
        s->add_option("--out", sc.out)->required();
        actions[s] = [&, s] {
            BandScales bs;
            if (!sc.preset.empty()) {
                if (sc.preset != "denmark2014") throw UsageError("unknown scales preset '" + sc.preset + "'");
                if (!sc.input.empty()) throw UsageError("--preset and --input are exclusive");
                bs = BandScales::landsat_denmark_2014();
            } else {
                if (sc.input.empty()) throw UsageError("scales needs --input or --preset");
                bs = compute_band_scales(read_raster(sc.input), sc.percentile, sc.source_year);
            }
            write_band_scales(bs, sc.out);
            detail::echo_config(*s, sc.out + ".config");
            out << "scales for " << bs.band_names.size() << " bands -> " << sc.out << "\n";
        };
    }

    // standardize
    struct {
        std::string input, scales, out;
    } st;
    {
        auto* s = sub("standardize", "Divide each band by its scale");
        s->add_option("--input", st.input)->required();
        s->add_option("--scales", st.scales)->required();
        s->add_option("--out", st.out)->required();
        actions[s] = [&, s] {
            const auto r = read_raster(st.input);
            const auto bs = read_band_scales(st.scales);
            if (bs.band_names != r.band_names) throw Error("scale bands do not match the raster bands");
            write_raster(standardize(r, bs), st.out);
            detail::echo_config(*s, st.out + ".config");
            out << "standardized -> " << st.out << "\n";
        };
    }

    // label
    struct {
        std::string bar, height, out_h, out_v;
        int epoch = 0;
        DensityScheme scheme;
    } lb;
    {
        auto* s = sub("label", "Horizontal and vertical density labels from ratio and height grids");
        s->add_option("--bar", lb.bar, "Building-area-ratio raster")->required();
        s->add_option("--height", lb.height, "Building height raster")->required();
        s->add_option("--epoch", lb.epoch)->required();
        s->add_option("--out-horizontal", lb.out_h)->required();
        s->add_option("--out-vertical", lb.out_v)->required();
        s->add_option("--compact-min", lb.scheme.compact_min);
        s->add_option("--open-min", lb.scheme.open_min);
        s->add_option("--sparse-min", lb.scheme.sparse_min);
        s->add_option("--high-min-height", lb.scheme.high_min_height);
        s->add_option("--block-half-extent", lb.scheme.block_half_extent);
        actions[s] = [&, s] {
            const auto labels = label_density(read_raster(lb.bar), read_raster(lb.height), lb.epoch, lb.scheme);
            write_label_grid(labels.horizontal, lb.out_h);
            write_label_grid(labels.vertical, lb.out_v);
            detail::echo_config(*s, lb.out_h + ".config");
            out << "labels " << lb.epoch << " -> " << lb.out_h << ", " << lb.out_v << "\n";
        };
    }

    // sample
    struct {
        std::string composite, labels, out, region;
        std::uint64_t seed = 0;
        double min_distance = 150.0, cap_ratio = 5.0, validation_fraction = 0.2;
        std::size_t patch_size = 48, step = 24;
    } sa;
    {
        auto* s = sub("sample", "Thin, balance and cut labeled sites into train/validation patches");
        s->add_option("--composite", sa.composite)->required();
        s->add_option("--labels", sa.labels)->required();
        s->add_option("--out", sa.out, "Output directory")->required();
        s->add_option("--seed", sa.seed);
        s->add_option("--min-distance", sa.min_distance, "Metres between kept sites");
        s->add_option("--cap-ratio", sa.cap_ratio, "Largest class cap as a multiple of the second largest");
        s->add_option("--patch-size", sa.patch_size);
        s->add_option("--step", sa.step);
        s->add_option("--validation-fraction", sa.validation_fraction);
        s->add_option("--region", sa.region, "row0,col0,row1,col1 cell window to sample from");
        actions[s] = [&, s] {
            const auto comp = read_raster(sa.composite);
            const auto labels = read_label_grid(sa.labels);
            auto sites = labeled_sites(labels, parse_region(sa.region));
            sites = thin_by_distance(sites, sa.min_distance, labels.cell_size, sa.seed);
            sites = balance_classes(sites, sa.cap_ratio, sa.seed + 1);
            const auto ds = extract_patches(comp, labels, sites, sa.patch_size, sa.step);
            const auto split = split_train_validation(ds, sa.validation_fraction, sa.seed + 2);
            std::filesystem::create_directories(sa.out);
            write_sites_csv(sites, sa.out + "/sites.csv");
            write_patch_dataset(split.train, sa.out + "/train");
            write_patch_dataset(split.validation, sa.out + "/validation");
            detail::echo_config(*s, sa.out + "/run_config.txt");
            out << sites.size() << " sites, " << split.train.size() << " training and " << split.validation.size()
                << " validation patches -> " << sa.out << "\n";
        };
    }

    // train
    struct {
        std::string arch = "deeplab", train, validation, out, composite, rates = "1,2,4";
        std::uint64_t seed = 0;
        std::size_t epochs = 12, batch_size = 8, max_steps = 0, trees = 200, mtry = 6, glcm_window = 5, glcm_levels = 32;
        double lr = 2e-4, width = 1.0;
    } tr;
    {
        auto* s = sub("train", "Train an fcn, deeplab or rf classifier");
        s->add_option("--arch", tr.arch, "fcn | deeplab | rf");
        s->add_option("--train", tr.train, "Training patch directory")->required();
        s->add_option("--validation", tr.validation, "Validation patch directory");
        s->add_option("--out", tr.out, "Model directory")->required();
        s->add_option("--seed", tr.seed);
        s->add_option("--epochs", tr.epochs);
        s->add_option("--batch-size", tr.batch_size);
        s->add_option("--learning-rate", tr.lr);
        s->add_option("--width", tr.width, "Channel multiplier");
        s->add_option("--max-steps", tr.max_steps, "Optimizer step cap (0 = none)");
        s->add_option("--atrous-rates", tr.rates);
        s->add_option("--composite", tr.composite, "Standardized composite (rf features)");
        s->add_option("--trees", tr.trees);
        s->add_option("--mtry", tr.mtry, "Features tried per split");
        s->add_option("--glcm-window", tr.glcm_window);
        s->add_option("--glcm-levels", tr.glcm_levels);
        actions[s] = [&, s] {
            const auto train = read_patch_dataset(tr.train);
            std::filesystem::create_directories(tr.out);
            if (tr.arch == "rf") {
                if (tr.composite.empty()) throw UsageError("rf training needs --composite");
                const FeatureConfig fc{tr.glcm_window, tr.glcm_levels};
                const auto feats = site_features(read_raster(tr.composite), patch_sites(train), fc);
                ForestConfig cfg;
                cfg.n_trees = tr.trees;
                cfg.features_per_split = tr.mtry;
                cfg.seed = tr.seed;
                cfg.n_classes = class_count(train.kind);
                const auto forest = rf_train(feats.features, feats.labels, cfg);
                write_forest(forest, tr.out + "/forest.txt");
                text::write_file(tr.out + "/features.txt", "window=" + std::to_string(fc.window) + "\nlevels=" +
                                                               std::to_string(fc.levels) + "\nkind=" + kind_name(train.kind) + "\n");
                detail::echo_config(*s, tr.out + "/run_config.txt");
                out << "forest of " << forest.trees.size() << " trees on " << feats.labels.size()
                    << " sites, OOB accuracy " << text::format_fixed(forest.oob_accuracy, 4) << " -> " << tr.out << "\n";
                return;
            }
            if (tr.validation.empty()) throw UsageError("network training needs --validation");
            ModelConfig cfg;
            cfg.architecture = parse_architecture(tr.arch);
            cfg.in_bands = train.bands;
            cfg.n_classes = class_count(train.kind);
            cfg.patch_size = train.patch_size;
            cfg.atrous_rates.clear();
            for (const auto& r : parse_list(tr.rates)) cfg.atrous_rates.push_back(static_cast<std::size_t>(text::to_int(r, "atrous rate")));
            cfg.width = tr.width;
            cfg.learning_rate = tr.lr;
            cfg.epochs = tr.epochs;
            cfg.batch_size = tr.batch_size;
            cfg.seed = tr.seed;
            cfg.max_steps = tr.max_steps;
            const auto result = train_model(cfg, train, read_patch_dataset(tr.validation), [&](const EpochLog& e) {
                out << "epoch " << e.epoch << " loss " << text::format_fixed(e.loss, 4) << " val OA "
                    << text::format_fixed(e.val_oa, 4) << " avg F1 " << text::format_fixed(e.val_avg_f1, 4) << "\n";
            });
            save_model(result.params, tr.out);
            text::write_file(tr.out + "/training_log.csv", encode_training_log(result.log));
            detail::echo_config(*s, tr.out + "/run_config.txt");
            out << "best epoch " << result.best_epoch << " -> " << tr.out << "\n";
        };
    }

    // predict
    struct {
        std::string model, composite, out_labels, out_probabilities;
        int epoch = 0;
        std::size_t step = 24;
    } pr;
    {
        auto* s = sub("predict", "Whole-map prediction with a trained model");
        s->add_option("--model", pr.model, "Model directory")->required();
        s->add_option("--composite", pr.composite, "Standardized composite")->required();
        s->add_option("--epoch", pr.epoch, "Epoch recorded in the output labels")->required();
        s->add_option("--step", pr.step, "Tile step for network models");
        s->add_option("--out-labels", pr.out_labels)->required();
        s->add_option("--out-probabilities", pr.out_probabilities);
        actions[s] = [&, s] {
            const auto comp = read_raster(pr.composite);
            MapPrediction mp;
            if (std::filesystem::exists(pr.model + "/forest.txt")) {
                FeatureConfig fc;
                LabelKind kind = LabelKind::horizontal;
                for (const auto& [k, v] : text::parse_key_values(text::read_file(pr.model + "/features.txt"))) {
                    if (k == "window") fc.window = static_cast<std::size_t>(text::to_int(v, "window"));
                    else if (k == "levels") fc.levels = static_cast<std::size_t>(text::to_int(v, "levels"));
                    else if (k == "kind") kind = parse_kind(v);
                    else throw Error("unknown feature setting '" + k + "'");
                }
                mp = rf_predict_map(read_forest(pr.model + "/forest.txt"), comp, kind, pr.epoch, fc);
            } else {
                auto params = load_model(pr.model);
                mp = predict_map(params, comp, pr.epoch, pr.step);
            }
            write_label_grid(mp.labels, pr.out_labels);
            if (!pr.out_probabilities.empty()) write_raster(mp.probabilities, pr.out_probabilities);
            detail::echo_config(*s, pr.out_labels + ".config");
            out << "prediction " << kind_name(mp.labels.kind) << "@" << pr.epoch << " -> " << pr.out_labels << "\n";
        };
    }

    // smooth
    struct {
        std::string inputs, kind = "horizontal", out;
        int first_year = 0;
        std::size_t window = 5, polyorder = 2;
    } sm;
    {
        auto* s = sub("smooth", "Savitzky-Golay smoothing of annual probability rasters");
        s->add_option("--inputs", sm.inputs, "Comma list of probability rasters, one per consecutive year")->required();
        s->add_option("--first-year", sm.first_year, "Year of the first input")->required();
        s->add_option("--kind", sm.kind);
        s->add_option("--window", sm.window);
        s->add_option("--polyorder", sm.polyorder);
        s->add_option("--out", sm.out, "Output directory")->required();
        actions[s] = [&, s] {
            std::vector<AnnualProbabilities> series;
            int y = sm.first_year;
            for (const auto& p : parse_list(sm.inputs)) series.push_back({y++, read_raster(p)});
            const auto smoothed = smooth_probability_rasters(series, parse_kind(sm.kind), sm.window, sm.polyorder);
            std::filesystem::create_directories(sm.out);
            for (const auto& yr : smoothed) {
                write_label_grid(yr.labels, sm.out + "/labels_" + std::to_string(yr.labels.epoch) + ".dmr");
                write_raster(yr.probabilities, sm.out + "/probabilities_" + std::to_string(yr.labels.epoch) + ".dmr");
            }
            detail::echo_config(*s, sm.out + "/run_config.txt");
            out << smoothed.size() << " smoothed years -> " << sm.out << "\n";
        };
    }

    // evaluate
    struct {
        std::string predicted, reference, region, out, confusion, summary;
    } ev;
    {
        auto* s = sub("evaluate", "Accuracy report of a label map against a reference");
        s->add_option("--predicted", ev.predicted)->required();
        s->add_option("--reference", ev.reference)->required();
        s->add_option("--region", ev.region, "row0,col0,row1,col1 evaluation window");
        s->add_option("--out", ev.out, "Metrics CSV")->required();
        s->add_option("--confusion", ev.confusion, "Confusion matrix CSV");
        s->add_option("--summary", ev.summary, "Text summary");
        actions[s] = [&, s] {
            const auto region = parse_region(ev.region);
            const auto m = confusion_matrix(read_label_grid(ev.predicted), mask_outside(read_label_grid(ev.reference), region));
            const auto rep = summary_metrics(m);
            text::write_file(ev.out, encode_metrics_csv(rep));
            if (!ev.confusion.empty()) text::write_file(ev.confusion, encode_confusion_csv(m));
            const auto summary = format_metrics_summary(rep);
            if (!ev.summary.empty()) text::write_file(ev.summary, summary);
            detail::echo_config(*s, ev.out + ".config");
            out << summary;
        };
    }

    // mcnemar
    struct {
        std::string first, second, reference, region, out;
    } mc;
    {
        auto* s = sub("mcnemar", "Paired McNemar tests of two maps, overall and per class one-vs-rest");
        s->add_option("--first", mc.first)->required();
        s->add_option("--second", mc.second)->required();
        s->add_option("--reference", mc.reference)->required();
        s->add_option("--region", mc.region);
        s->add_option("--out", mc.out)->required();
        actions[s] = [&, s] {
            const auto a = read_label_grid(mc.first), b = read_label_grid(mc.second);
            const auto ref = mask_outside(read_label_grid(mc.reference), parse_region(mc.region));
            if (a.kind != ref.kind || b.kind != ref.kind) throw Error("maps and reference differ in label kind");
            if (!a.same_geometry(ref) || !b.same_geometry(ref)) throw Error("maps and reference differ in geometry");
            std::string csv = "scope,b,c,chi2_corrected,p_corrected,chi2_uncorrected,p_uncorrected\n";
            auto row = [&](const std::string& scope, std::optional<std::uint8_t> k) {
                try {
                    const auto r = mcnemar_from_maps(a.codes, b.codes, ref.codes, k);
                    csv += scope + "," + std::to_string(r.b) + "," + std::to_string(r.c) + "," + text::format_double(r.chi2_corrected) +
                           "," + text::format_double(r.p_corrected) + "," + text::format_double(r.chi2_uncorrected) + "," +
                           text::format_double(r.p_uncorrected) + "\n";
                } catch (const Error&) {
                    csv += scope + ",0,0,,,,\n";  // no discordant pairs
                }
            };
            row("overall", std::nullopt);
            const auto names = class_names(ref.kind);
            for (std::size_t k = 0; k < names.size(); ++k) row(names[k], static_cast<std::uint8_t>(k));
            text::write_file(mc.out, csv);
            detail::echo_config(*s, mc.out + ".config");
            out << csv;
        };
    }

    // growth
    struct {
        std::string earlier, later, out, ref_earlier, ref_later, report, region;
    } gr;
    {
        auto* s = sub("growth", "Growth labels between two epochs, optionally scored against reference growth");
        s->add_option("--earlier", gr.earlier)->required();
        s->add_option("--later", gr.later)->required();
        s->add_option("--out", gr.out)->required();
        s->add_option("--reference-earlier", gr.ref_earlier);
        s->add_option("--reference-later", gr.ref_later);
        s->add_option("--region", gr.region);
        s->add_option("--report", gr.report, "Growth accuracy CSV");
        actions[s] = [&, s] {
            const auto g = derive_growth_labels(read_label_grid(gr.earlier), read_label_grid(gr.later));
            write_label_grid(g, gr.out);
            if (!gr.ref_earlier.empty() || !gr.ref_later.empty()) {
                if (gr.ref_earlier.empty() || gr.ref_later.empty() || gr.report.empty())
                    throw UsageError("growth scoring needs --reference-earlier, --reference-later and --report");
                const auto ref = mask_outside(derive_growth_labels(read_label_grid(gr.ref_earlier), read_label_grid(gr.ref_later)),
                                              parse_region(gr.region));
                const auto acc = evaluate_growth(g, ref);
                auto opt = [](const std::optional<double>& v) { return v ? text::format_double(*v) : std::string(); };
                const std::string csv = "tp,fp,fn,tn,users_accuracy,producers_accuracy,f1\n" + std::to_string(acc.tp) + "," +
                                        std::to_string(acc.fp) + "," + std::to_string(acc.fn) + "," + std::to_string(acc.tn) + "," +
                                        opt(acc.users_accuracy) + "," + text::format_double(acc.producers_accuracy) + "," +
                                        opt(acc.f1) + "\n";
                text::write_file(gr.report, csv);
                out << csv;
            }
            detail::echo_config(*s, gr.out + ".config");
            out << "growth " << kind_name(read_label_grid(gr.earlier).kind) << " -> " << gr.out << "\n";
        };
    }

    // trends
    struct {
        std::string horizontal, vertical, regions, population, out;
    } tn;
    {
        auto* s = sub("trends", "Per-region annual class areas and combined urban-form areas");
        s->add_option("--horizontal", tn.horizontal, "Comma list of horizontal label rasters")->required();
        s->add_option("--vertical", tn.vertical, "Comma list of vertical label rasters, same years")->required();
        s->add_option("--regions", tn.regions, "Region id raster (NaN outside)")->required();
        s->add_option("--population", tn.population, "CSV region,year,population");
        s->add_option("--out", tn.out)->required();
        actions[s] = [&, s] {
            const auto hs = parse_list(tn.horizontal), vs = parse_list(tn.vertical);
            if (hs.size() != vs.size()) throw UsageError("--horizontal and --vertical list different year counts");
            std::vector<AnnualLabels> years;
            for (std::size_t i = 0; i < hs.size(); ++i) {
                AnnualLabels a{0, read_label_grid(hs[i]), read_label_grid(vs[i])};
                if (a.horizontal.epoch != a.vertical.epoch) throw Error("paired label rasters carry different epochs");
                a.year = a.horizontal.epoch;
                years.push_back(std::move(a));
            }
            std::sort(years.begin(), years.end(), [](const auto& x, const auto& y) { return x.year < y.year; });
            const auto regions = RegionSet::from_raster(read_raster(tn.regions));
            std::optional<PopulationTable> pop;
            if (!tn.population.empty()) pop = parse_population_csv(text::read_file(tn.population));
            const auto table = area_trends(years, regions, pop ? &*pop : nullptr);
            text::write_file(tn.out, encode_trends_csv(table));
            for (const auto& w : table.warnings) err << "warning: " << w << "\n";
            detail::echo_config(*s, tn.out + ".config");
            out << table.rows.size() << " trend rows -> " << tn.out << "\n";
        };
    }

    // gradcheck
    struct {
        std::string arch = "all", out;
        std::uint64_t seed = 7;
        std::size_t samples = 200, size = 16, classes = 4;
        double tolerance = 1e-5, step = 1e-4, width = 1.0;
    } gc;
    {
        auto* s = sub("gradcheck", "Finite-difference check of every layer's backward pass");
        s->add_option("--arch", gc.arch, "fcn | deeplab | all (full-model probes)");
        s->add_option("--seed", gc.seed);
        s->add_option("--samples", gc.samples, "Probed scalars per layer type");
        s->add_option("--tolerance", gc.tolerance, "Maximum relative error");
        s->add_option("--step", gc.step, "Finite-difference step");
        s->add_option("--width", gc.width, "Channel multiplier of the probed models");
        s->add_option("--size", gc.size, "Probe height and width");
        s->add_option("--classes", gc.classes);
        s->add_option("--out", gc.out, "Report CSV");
        actions[s] = [&, s] {
            ModelConfig cfg;
            cfg.width = gc.width;
            cfg.n_classes = gc.classes;
            cfg.seed = gc.seed;
            GradcheckOptions opt;
            opt.samples = gc.samples;
            opt.tolerance = gc.tolerance;
            opt.step = gc.step;
            opt.seed = gc.seed;
            if (gc.arch == "fcn") opt.architectures = {Architecture::fcn};
            else if (gc.arch == "deeplab") opt.architectures = {Architecture::deeplab};
            else if (gc.arch != "all") throw UsageError("--arch must be fcn, deeplab or all");
            std::mt19937_64 rng(gc.seed);
            const auto probe = urbanform::detail::random_tensor({1, cfg.in_bands, gc.size, gc.size}, rng);
            const auto report = finite_difference_check(cfg, probe, opt);
            const auto csv = format_gradcheck_report(report);
            if (!gc.out.empty()) {
                text::write_file(gc.out, csv);
                detail::echo_config(*s, gc.out + ".config");
            }
            out << csv;
            if (!report.passed()) throw Error("gradient check failed");
        };
    }

    // render
    struct {
        std::string input, out;
    } rd;
    {
        auto* s = sub("render", "PPM quicklook of a label raster (fixed class colors) or a reflectance raster");
        s->add_option("--input", rd.input)->required();
        s->add_option("--out", rd.out)->required();
        actions[s] = [&] {
            const auto r = read_raster(rd.input);
            text::write_file(rd.out, detail::is_label_raster(r) ? render_labels_ppm(label_grid_from_raster(r)) : render_rgb_ppm(r));
            out << "quicklook -> " << rd.out << "\n";
        };
    }

    try {
        auto args = detail::expand_config(raw_args);
        if (args.empty()) throw UsageError("missing program name");
        std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
        if (!args.empty()) app.name(args.front());
        if (args.size() >= 2) {
            // Reject config keys that the chosen subcommand does not know.
            if (auto* s = app.get_subcommand_no_throw(args[1])) {
                for (std::size_t i = 2; i + 1 < args.size(); ++i)
                    if (args[i].starts_with("--") && args[i] != "--help" && !s->get_option_no_throw(args[i]))
                        throw UsageError("unknown option or config key '" + args[i].substr(2) + "' for " + args[1]);
            }
        }
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 1;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        for (auto* s : app.get_subcommands()) actions.at(s)();
        return 0;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return dispatch(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace urbanform::cli

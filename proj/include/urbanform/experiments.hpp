#pragma once

// Synthetic study assembly, training-size sensitivity and temporal-transfer harnesses.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "urbanform/composite.hpp"
#include "urbanform/error.hpp"
#include "urbanform/eval.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/sampler.hpp"
#include "urbanform/segnet.hpp"
#include "urbanform/synthcity.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

// --- synthetic study ---------------------------------------------------------------------------

struct StudyOptions {
    std::uint64_t seed = 1;
    std::size_t size = 256;
    int first_year = 2009;
    int last_year = 2016;
    int reference_year = 0;  // drift-free year, 0 = last year
    double drift_amplitude = 0.10;
    std::size_t observations = 6;
    double noise_std = 0.005;
    double qa_dropout = 0.2;
    int composite_window = 3;
    double percentile = 0.995;
};

struct StudyEpoch {
    int year = 0;
    MultiBandRaster composite;  // standardized with the scales of the first requested year
    DensityLabels labels;
};

struct SyntheticStudy {
    CityScenario scenario;
    BandScales scales;
    std::vector<StudyEpoch> epochs;

    const StudyEpoch& at(int year) const {
        for (const auto& e : epochs)
            if (e.year == year) return e;
        throw Error("study has no epoch " + std::to_string(year));
    }
};

/// Generates a scenario, renders the years each composite needs, composites and labels every
/// requested year. The first year is the training epoch whose composite sets the band scales.
inline SyntheticStudy build_synthetic_study(const StudyOptions& opt, const std::vector<int>& years) {
    if (years.empty()) throw Error("a study needs at least one epoch");
    ScenarioOptions so;
    so.drift_amplitude = opt.drift_amplitude;
    so.reference_year = opt.reference_year;
    SyntheticStudy st;
    st.scenario = generate_city_timeline(opt.seed, opt.first_year, opt.last_year, opt.size, so);
    const RenderOptions ro{opt.observations, opt.noise_std, opt.qa_dropout, opt.seed};
    std::map<int, ObservationStack> rendered;
    const int half = opt.composite_window / 2;
    for (std::size_t i = 0; i < years.size(); ++i) {
        const int y = years[i];
        ObservationStack stack;
        for (int k = std::max(y - half, opt.first_year); k <= std::min(y + half, opt.last_year); ++k) {
            auto it = rendered.find(k);
            if (it == rendered.end()) it = rendered.emplace(k, render_reflectance(st.scenario, k, ro)).first;
            stack.observations.insert(stack.observations.end(), it->second.observations.begin(), it->second.observations.end());
        }
        const auto raw = rolling_median_composite(stack, y, opt.composite_window);
        if (i == 0) st.scales = compute_band_scales(raw, opt.percentile, y);
        const auto& g = st.scenario.at_year(y);
        st.epochs.push_back({y, standardize(raw, st.scales), label_density(g.bar, g.height, y)});
    }
    return st;
}

struct SamplingOptions {
    std::uint64_t seed = 1;
    double min_distance = 150.0;
    double cap_ratio = 5.0;
    std::size_t patch_size = 48;
    std::size_t step = 24;
    double validation_fraction = 0.2;
};

/// Sites and patches drawn only from `region`. The raster is cropped first, so no patch input
/// reaches outside the region; patch origins are relative to the crop, sites are in grid cells.
struct RegionSample {
    CellRegion region;
    std::vector<SampleSite> sites;
    DatasetSplit split;
};

inline std::vector<SampleSite> offset_sites(std::vector<SampleSite> sites, std::size_t dr, std::size_t dc) {
    for (auto& s : sites) {
        s.row += dr;
        s.col += dc;
    }
    return sites;
}

inline RegionSample sample_region(const MultiBandRaster& composite, const LabelGrid& labels, const CellRegion& region,
                                  const SamplingOptions& opt = {}) {
    RegionSample out;
    out.region = clamp_region(region, labels.height, labels.width);
    const auto comp = crop(composite, out.region);
    const auto lab = crop(labels, out.region);
    auto sites = thin_by_distance(labeled_sites(lab), opt.min_distance, lab.cell_size, opt.seed);
    sites = balance_classes(sites, opt.cap_ratio, opt.seed + 1);
    out.split = split_train_validation(extract_patches(comp, lab, sites, opt.patch_size, opt.step), opt.validation_fraction,
                                       opt.seed + 2);
    out.sites = offset_sites(std::move(sites), out.region.r0, out.region.c0);
    return out;
}

// --- training-size sensitivity -----------------------------------------------------------------

/// Seeded subset of round(fraction * N) patches, kept in their original order. Fraction 1 returns all.
inline PatchDataset subsample_patches(const PatchDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("subset fraction must be in (0, 1]");
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
    if (keep == 0) throw Error("fraction " + text::format_double(fraction) + " leaves an empty training subset");
    if (keep >= ds.size()) return ds;
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    PatchDataset out = ds;
    out.patches.clear();
    for (auto i : idx) out.patches.push_back(ds.patches[i]);
    return out;
}

struct SensitivityRow {
    double fraction = 0.0;
    std::size_t folds = 0;
    double mean_oa = 0.0;
    double std_oa = 0.0;  // sample standard deviation over folds, 0 for one fold
    std::vector<double> oa;
};

/// For each fraction, trains `folds` fresh models on seeded subsets (fold k uses seed + k) and
/// reports validation OA of the selected epoch.
inline std::vector<SensitivityRow> sample_size_sensitivity(const PatchDataset& train, const PatchDataset& validation,
                                                           const ModelConfig& cfg,
                                                           const std::vector<double>& fractions = {0.9, 0.7, 0.5, 0.3, 0.2},
                                                           std::size_t folds = 20) {
    if (folds == 0) throw Error("at least one fold is required");
    std::vector<SensitivityRow> out;
    for (double f : fractions) {
        SensitivityRow row;
        row.fraction = f;
        row.folds = folds;
        for (std::size_t k = 0; k < folds; ++k) {
            auto c = cfg;
            c.seed = cfg.seed + k;
            const auto subset = subsample_patches(train, f, c.seed);
            const auto result = train_model(c, subset, validation);
            row.oa.push_back(result.log[result.best_epoch - 1].val_oa);
        }
        row.mean_oa = std::accumulate(row.oa.begin(), row.oa.end(), 0.0) / static_cast<double>(folds);
        if (folds > 1) {
            double ss = 0.0;
            for (double v : row.oa) ss += (v - row.mean_oa) * (v - row.mean_oa);
            row.std_oa = std::sqrt(ss / static_cast<double>(folds - 1));
        }
        out.push_back(std::move(row));
    }
    return out;
}

inline std::string encode_sensitivity_csv(const std::vector<SensitivityRow>& rows) {
    std::string out = "fraction,folds,mean_oa,std_oa\n";
    for (const auto& r : rows)
        out += text::format_double(r.fraction) + "," + std::to_string(r.folds) + "," + text::format_double(r.mean_oa) + "," +
               text::format_double(r.std_oa) + "\n";
    return out;
}

// --- temporal transfer -------------------------------------------------------------------------

/// One epoch of a transfer experiment: the input the classifier sees and the reference it is scored on.
struct TransferEpoch {
    int epoch = 0;
    const MultiBandRaster* composite = nullptr;  // standardized with the training-epoch scales
    const LabelGrid* reference = nullptr;
};

struct TransferRow {
    int epoch = 0;
    double oa = 0.0;
    double kappa = 0.0;
    double drop = 0.0;  // training-epoch OA minus this epoch's OA, in OA units
};

using MapClassifier = std::function<LabelGrid(const MultiBandRaster& composite, int epoch)>;

/// Applies one trained classifier, unchanged, to every epoch and scores it inside `region`.
/// The first epoch is the training epoch the drops are measured against.
inline std::vector<TransferRow> temporal_transfer(const MapClassifier& classify, const std::vector<TransferEpoch>& epochs,
                                                  const CellRegion& region = {}) {
    if (epochs.empty()) throw Error("temporal transfer needs at least the training epoch");
    std::vector<TransferRow> out;
    for (const auto& e : epochs) {
        if (!e.composite || !e.reference) throw Error("transfer epoch lacks a composite or reference");
        auto predicted = classify(*e.composite, e.epoch);
        auto ref = *e.reference;
        for (std::size_t r = 0; r < ref.height; ++r)
            for (std::size_t c = 0; c < ref.width; ++c)
                if (!region.contains(r, c)) ref.at(r, c) = kUnlabeled;
        predicted.kind = ref.kind;
        const auto rep = summary_metrics(confusion_matrix(predicted, ref));
        out.push_back({e.epoch, rep.overall_accuracy, rep.kappa, out.empty() ? 0.0 : out.front().oa - rep.overall_accuracy});
    }
    return out;
}

}  // namespace urbanform

// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "oracles.hpp"
#include "urbanform/urbanform.hpp"

using namespace urbanform;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// --- pinned tolerances and budgets -------------------------------------------------------------

constexpr double kGradTolerance = 1e-5;
constexpr double kLinearGradTolerance = 1e-8;
constexpr double kGradBudgetSeconds = 5 * 60;
constexpr double kOverfitTarget = 0.98;
constexpr std::size_t kOverfitMaxSteps = 200;
constexpr double kOverfitBudgetSeconds = 10 * 60;
constexpr double kSavGolTolerance = 1e-9;
constexpr double kMcNemarTolerance = 1e-12;
constexpr double kChiSquarePTolerance = 1e-3;
constexpr double kFcnMargin = 0.01;  // DeepLab may trail FCN by at most one OA point
constexpr double kEndToEndBudgetSeconds = 30 * 60;
constexpr double kMinSiteDistance = 150.0;
constexpr double kCapRatio = 5.0;

// End-to-end analog: 256 x 256 scene, west half trains, east half tests, an 8-column buffer between.
constexpr int kTrainYear = 2015;
constexpr int kTransferYear = 2010;
const CellRegion kTrainRegion{0, 0, 256, 124};
const CellRegion kTestRegion{0, 132, 256, 256};
constexpr double kNetworkWidth = 0.5;
constexpr std::size_t kNetworkEpochs = 40;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fixed(double v, int digits = 4) { return text::format_fixed(v, digits); }

const SyntheticStudy& study() {
    static const SyntheticStudy st = [] {
        StudyOptions o;
        o.seed = 1;
        o.size = 256;
        o.reference_year = kTrainYear;
        return build_synthetic_study(o, {kTrainYear, kTransferYear});
    }();
    return st;
}

const LabelGrid& labels_of(int year, LabelKind kind) {
    const auto& l = study().at(year).labels;
    return kind == LabelKind::horizontal ? l.horizontal : l.vertical;
}

const RegionSample& training_sample(LabelKind kind) {
    static std::map<LabelKind, RegionSample> cache;
    auto it = cache.find(kind);
    if (it == cache.end()) {
        SamplingOptions so;
        so.seed = 1;
        so.min_distance = kMinSiteDistance;
        so.cap_ratio = kCapRatio;
        it = cache.emplace(kind, sample_region(study().at(kTrainYear).composite, labels_of(kTrainYear, kind), kTrainRegion, so)).first;
    }
    return it->second;
}

// --- 1: gradient fidelity ----------------------------------------------------------------------

Outcome gradient_fidelity() {
    const auto t0 = Clock::now();
    ModelConfig cfg;
    cfg.width = 1.0;
    cfg.n_classes = 4;
    GradcheckOptions opt;
    opt.tolerance = kGradTolerance;
    std::mt19937_64 rng(opt.seed);
    const auto report = finite_difference_check(cfg, urbanform::detail::random_tensor({1, cfg.in_bands, 16, 16}, rng), opt);
    const double secs = seconds_since(t0);
    const std::set<std::string> linear{"conv3x3", "atrous_conv_rate1", "atrous_conv_rate2", "atrous_conv_rate4",
                                       "conv3x3_stride2", "conv1x1", "conv1x1_stride2", "conv3x3_valid",
                                       "depthwise_conv", "separable_conv", "max_pool", "avg_pool", "bilinear_upsample"};
    double worst = 0.0, worst_linear = 0.0;
    std::string failed;
    for (const auto& e : report.entries) {
        const bool is_linear = linear.count(e.layer) > 0;
        const bool ok = e.passed && (!is_linear || e.max_rel_error < kLinearGradTolerance);
        (is_linear ? worst_linear : worst) = std::max(is_linear ? worst_linear : worst, e.max_rel_error);
        if (!ok) failed += " " + e.layer;
        std::cout << "  " << e.layer << ": " << e.samples << " samples, " << e.kink_skips << " kink skips, max rel "
                  << text::format_double(e.max_rel_error) << (ok ? "" : " FAIL") << "\n";
    }
    const std::set<std::string> required{"conv3x3", "atrous_conv_rate1", "atrous_conv_rate2", "atrous_conv_rate4",
                                         "separable_conv", "max_pool", "avg_pool", "bilinear_upsample", "batch_norm",
                                         "aspp", "fcn_loss", "deeplab_loss"};
    std::set<std::string> present;
    for (const auto& e : report.entries) present.insert(e.layer);
    std::string missing;
    for (const auto& r : required)
        if (!present.count(r)) missing += " " + r;
    const bool pass = report.passed() && failed.empty() && missing.empty() && secs < kGradBudgetSeconds;
    return {pass, std::to_string(report.entries.size()) + " probes, max rel error " + text::format_double(worst_linear) +
                      " on linear layers (< " + text::format_double(kLinearGradTolerance) + "), " +
                      text::format_double(worst) + " on the rest (< " + text::format_double(kGradTolerance) + "), " +
                      fixed(secs, 1) + " s" +
                      (failed.empty() ? "" : ", failed:" + failed) + (missing.empty() ? "" : ", missing:" + missing)};
}

// --- 2: shape contract -------------------------------------------------------------------------

Outcome shape_contract() {
    std::string bad;
    std::size_t checked = 0;
    for (auto arch : {Architecture::fcn, Architecture::deeplab})
        for (std::size_t classes : {3, 4}) {
            ModelConfig cfg;
            cfg.architecture = arch;
            cfg.n_classes = classes;
            auto params = ModelParams::initialize(cfg);
            for (std::size_t h : {20, 40, 48, 64}) {
                const auto s = model_forward(params, nn::constant(nn::Tensor({1, 6, h, h})), false)->shape();
                ++checked;
                if (s != nn::Shape{1, classes, h, h}) bad += " " + architecture_name(arch) + "@" + std::to_string(h) + "->" + s.str();
            }
        }
    return {bad.empty(), std::to_string(checked) + " (architecture, classes, size) cases" + (bad.empty() ? "" : ", wrong:" + bad)};
}

// --- 3: overfit sanity -------------------------------------------------------------------------

Outcome overfit_sanity() {
    const auto t0 = Clock::now();
    auto ds = training_sample(LabelKind::horizontal).split.train;
    if (ds.size() < 20) return {false, "only " + std::to_string(ds.size()) + " training patches available"};
    ds.patches.resize(20);
    ModelConfig cfg;
    cfg.architecture = Architecture::deeplab;
    cfg.seed = 1;
    auto params = ModelParams::initialize(cfg);
    AdamState adam;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    double acc = 0.0;
    while (step < kOverfitMaxSteps && acc < kOverfitTarget) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i = 0; i < order.size() && step < kOverfitMaxSteps; i += cfg.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(i),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + cfg.batch_size)));
            auto batch = make_batch(ds, idx);
            params.zero_grad();
            auto loss = nn::masked_cross_entropy(model_forward(params, nn::constant(std::move(batch.input)), true), batch.labels,
                                                 batch.mask);
            nn::backward(loss);
            adam.step(params, cfg.learning_rate);
            if (++step % 10 == 0) {
                acc = summary_metrics(evaluate_patches(params, ds)).overall_accuracy;
                if (acc >= kOverfitTarget) break;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {acc >= kOverfitTarget && secs < kOverfitBudgetSeconds,
            "DeepLab (width 1) masked training accuracy " + fixed(acc) + " after " + std::to_string(step) +
                " steps (target " + fixed(kOverfitTarget, 2) + " within " + std::to_string(kOverfitMaxSteps) + "), " +
                fixed(secs, 1) + " s"};
}

// --- 4: oracle equivalence ---------------------------------------------------------------------

Outcome oracle_equivalence() {
    std::string bad;
    // Median compositing.
    const auto stack = oracle::random_stack(21, 24, 19, 3, {2012, 2013, 2014, 2015}, 6);
    std::size_t compared = 0;
    for (int year : {2013, 2014})
        for (int window : {1, 3}) {
            const auto got = rolling_median_composite(stack, year, window), want = oracle::median_composite(stack, year, window);
            for (std::size_t i = 0; i < got.data.size(); ++i, ++compared)
                if (!(got.data[i] == want.data[i] || (std::isnan(got.data[i]) && std::isnan(want.data[i])))) {
                    bad += " median";
                    break;
                }
        }
    // Block labels on a generated city.
    const auto sc = generate_city_timeline(2, 2014, 2014, 128);
    const auto labels = label_density(sc.at_year(2014).bar, sc.at_year(2014).height, 2014);
    const auto [h, v] = oracle::block_labels(sc.at_year(2014).bar, sc.at_year(2014).height);
    if (labels.horizontal.codes != h || labels.vertical.codes != v) bad += " labels";
    // GLCM counts on the first principal component of a real composite.
    const auto pc = pca_first_component(study().at(kTrainYear).composite).scores;
    std::size_t windows = 0;
    for (std::size_t r = 0; r < pc.height; r += 37)
        for (std::size_t c = 0; c < pc.width; c += 29, ++windows)
            if (glcm_matrix(pc, r, c, 5, 32).counts != oracle::glcm_counts(pc, r, c, 5, 32)) {
                bad += " glcm@" + std::to_string(r) + "," + std::to_string(c);
            }
    // Savitzky-Golay weights.
    const auto sg = savgol_coefficients(5, 2);
    const double want52[] = {-3, 12, 17, 12, -3};
    double sg_err = 0.0;
    for (int i = 0; i < 5; ++i) sg_err = std::max(sg_err, std::fabs(sg[i] - want52[i] / 35.0));
    for (auto [w, o] : {std::pair<std::size_t, std::size_t>{7, 2}, {9, 3}, {11, 4}}) {
        const auto a = savgol_coefficients(w, o), b = oracle::savgol(w, o);
        for (std::size_t i = 0; i < w; ++i) sg_err = std::max(sg_err, std::fabs(a[i] - b[i]));
    }
    if (sg_err > kSavGolTolerance) bad += " savgol";
    return {bad.empty(), std::to_string(compared) + " composite values, " + std::to_string(h.size()) + " label cells, " +
                             std::to_string(windows) + " GLCM windows exact; SavGol max error " + text::format_double(sg_err) +
                             (bad.empty() ? "" : "; mismatch:" + bad)};
}

// --- 5: statistical kernels --------------------------------------------------------------------

Outcome statistical_kernels() {
    ConfusionMatrix m({"a", "b"});
    m.at(0, 0) = 40;
    m.at(0, 1) = 10;
    m.at(1, 0) = 10;
    m.at(1, 1) = 40;
    const auto rep = summary_metrics(m);
    const auto mc = mcnemar_test(10, 30);
    const double p = chi_square_sf(3.841);
    const bool pass = rep.kappa == 0.6 && rep.overall_accuracy == 0.8 && std::fabs(mc.chi2_corrected - 9.025) <= kMcNemarTolerance &&
                      std::fabs(p - 0.05) <= kChiSquarePTolerance;
    return {pass, "kappa " + text::format_double(rep.kappa) + ", OA " + text::format_double(rep.overall_accuracy) +
                      ", McNemar chi2 " + text::format_double(mc.chi2_corrected) + ", p(3.841) " + fixed(p, 6)};
}

// --- 6 and 7: end-to-end analog and temporal transfer ------------------------------------------

struct DimensionResult {
    std::map<std::string, double> test_oa, transfer_oa;
};

struct EndToEnd {
    std::map<LabelKind, DimensionResult> dims;
    double seconds = 0.0;
};

double scored_oa(LabelGrid predicted, const LabelGrid& reference) {
    auto ref = reference;
    for (std::size_t r = 0; r < ref.height; ++r)
        for (std::size_t c = 0; c < ref.width; ++c)
            if (!kTestRegion.contains(r, c)) ref.at(r, c) = kUnlabeled;
    predicted.kind = ref.kind;
    return summary_metrics(confusion_matrix(predicted, ref)).overall_accuracy;
}

const EndToEnd& end_to_end() {
    static const EndToEnd result = [] {
        EndToEnd e;
        const auto t0 = Clock::now();
        const auto& train_comp = study().at(kTrainYear).composite;
        const auto& transfer_comp = study().at(kTransferYear).composite;
        for (auto kind : {LabelKind::horizontal, LabelKind::vertical}) {
            const auto& rs = training_sample(kind);
            const auto& ref = labels_of(kTrainYear, kind);
            const auto& ref_transfer = labels_of(kTransferYear, kind);
            auto& d = e.dims[kind];

            ForestConfig fc;
            fc.seed = 1;
            fc.n_classes = class_count(kind);
            const auto feats = site_features(train_comp, offset_sites(patch_sites(rs.split.train), rs.region.r0, rs.region.c0));
            const auto forest = rf_train(feats.features, feats.labels, fc);
            d.test_oa["rf"] = scored_oa(rf_predict_map(forest, train_comp, kind, kTrainYear).labels, ref);
            d.transfer_oa["rf"] = scored_oa(rf_predict_map(forest, transfer_comp, kind, kTransferYear).labels, ref_transfer);

            for (auto arch : {Architecture::fcn, Architecture::deeplab}) {
                ModelConfig cfg;
                cfg.architecture = arch;
                cfg.n_classes = class_count(kind);
                cfg.width = kNetworkWidth;
                cfg.epochs = kNetworkEpochs;
                cfg.seed = 1;
                auto trained = train_model(cfg, rs.split.train, rs.split.validation);
                const auto name = architecture_name(arch);
                d.test_oa[name] = scored_oa(predict_map(trained.params, train_comp, kTrainYear).labels, ref);
                d.transfer_oa[name] = scored_oa(predict_map(trained.params, transfer_comp, kTransferYear).labels, ref_transfer);
            }
            std::cout << "  " << kind_name(kind) << ": " << rs.sites.size() << " sites, " << rs.split.train.size() << " train / "
                      << rs.split.validation.size() << " validation patches;";
            for (const auto* n : {"rf", "fcn", "deeplab"})
                std::cout << " " << n << " OA " << fixed(d.test_oa[n]) << " -> " << kTransferYear << " " << fixed(d.transfer_oa[n]);
            std::cout << "\n" << std::flush;
        }
        e.seconds = seconds_since(t0);
        return e;
    }();
    return result;
}

Outcome table_ordering() {
    const auto& e = end_to_end();
    bool pass = e.seconds < kEndToEndBudgetSeconds;
    std::string detail;
    for (const auto& [kind, d] : e.dims) {
        const double dl = d.test_oa.at("deeplab"), fcn = d.test_oa.at("fcn"), rf = d.test_oa.at("rf");
        const bool vs_fcn = dl >= fcn - kFcnMargin, vs_rf = dl >= rf;
        pass = pass && vs_fcn && vs_rf;
        detail += kind_name(kind) + " DeepLab " + fixed(dl) + " vs FCN " + fixed(fcn) + " / RF " + fixed(rf) +
                  (vs_fcn ? "" : " (below FCN - 1 pt)") + (vs_rf ? "" : " (below RF)") + "; ";
    }
    return {pass, detail + fixed(e.seconds / 60.0, 1) + " min (budget 30)"};
}

Outcome transfer_ordering() {
    const auto& e = end_to_end();
    bool pass = true;
    std::string detail;
    for (const auto& [kind, d] : e.dims) {
        auto drop = [&](const char* n) { return d.test_oa.at(n) - d.transfer_oa.at(n); };
        const bool ok = drop("deeplab") < drop("rf") && drop("fcn") < drop("rf");
        pass = pass && ok;
        detail += kind_name(kind) + " drop RF " + fixed(100 * drop("rf"), 2) + " pt, FCN " + fixed(100 * drop("fcn"), 2) +
                  " pt, DeepLab " + fixed(100 * drop("deeplab"), 2) + " pt; ";
    }
    return {pass, detail + "drift +-10% per band, " + std::to_string(kTrainYear) + " -> " + std::to_string(kTransferYear)};
}

// --- 8: sampler constraints --------------------------------------------------------------------

bool has_all_not_built_patch(const PatchDataset& ds) {
    for (const auto& p : ds.patches) {
        bool built = false;
        for (std::size_t i = 0; i < p.mask.size(); ++i) built = built || (p.mask[i] && p.labels[i] != 0 && p.labels[i] != kUnlabeled);
        if (!built) return true;
    }
    return false;
}

Outcome sampler_constraints() {
    bool pass = true;
    std::string detail;
    for (auto kind : {LabelKind::horizontal, LabelKind::vertical}) {
        const auto& lab = labels_of(kTrainYear, kind);
        const auto region_sites = labeled_sites(crop(lab, kTrainRegion));
        const auto thinned = thin_by_distance(region_sites, kMinSiteDistance, lab.cell_size, 1);
        const double dmin = oracle::min_pair_distance(thinned, lab.cell_size);
        const auto& rs = training_sample(kind);
        std::map<int, std::size_t> counts;
        for (const auto& s : rs.sites) ++counts[s.label];
        std::vector<std::size_t> sorted;
        for (const auto& [k, n] : counts) sorted.push_back(n);
        std::sort(sorted.rbegin(), sorted.rend());
        const double ratio = sorted.size() > 1 ? static_cast<double>(sorted[0]) / static_cast<double>(sorted[1]) : INFINITY;
        const double sampled_dmin = oracle::min_pair_distance(rs.sites, lab.cell_size);
        const bool empty_patch = has_all_not_built_patch(rs.split.train) || has_all_not_built_patch(rs.split.validation);
        const bool ok = dmin >= kMinSiteDistance && sampled_dmin >= kMinSiteDistance && ratio <= kCapRatio && !empty_patch;
        pass = pass && ok;
        detail += kind_name(kind) + ": " + std::to_string(thinned.size()) + " thinned sites, min distance " + fixed(dmin, 1) +
                  " m, dominant/second " + fixed(ratio, 2) + (empty_patch ? ", all-not-built patch found" : ", no all-not-built patch") +
                  "; ";
    }
    return {pass, detail.substr(0, detail.size() - 2)};
}

// --- 9: CLI determinism ------------------------------------------------------------------------

const std::vector<std::string> kPipeline = {
    "synth --out city --seed 3 --size 96 --first-year 2012 --last-year 2016 --render-years 2012,2013,2014,2015,2016 "
    "--observations 3",
    "composite --observations city/obs/observations.csv --year 2013 --window 3 --out comp2013.dmr",
    "composite --observations city/obs/observations.csv --year 2014 --window 3 --out comp2014.dmr",
    "composite --observations city/obs/observations.csv --year 2015 --window 3 --out comp2015.dmr",
    "scales --input comp2015.dmr --source-year 2015 --out scales.csv",
    "standardize --input comp2013.dmr --scales scales.csv --out z2013.dmr",
    "standardize --input comp2014.dmr --scales scales.csv --out z2014.dmr",
    "standardize --input comp2015.dmr --scales scales.csv --out z2015.dmr",
    "label --bar city/bar_2013.dmr --height city/height_2013.dmr --epoch 2013 --out-horizontal h2013.dmr --out-vertical v2013.dmr",
    "label --bar city/bar_2015.dmr --height city/height_2015.dmr --epoch 2015 --out-horizontal h2015.dmr --out-vertical v2015.dmr",
    "sample --composite z2015.dmr --labels h2015.dmr --out samples --seed 2 --min-distance 60 --patch-size 24 --step 12",
    "train --arch fcn --train samples/train --validation samples/validation --out fcn --seed 2 --width 0.25 --epochs 2 "
    "--max-steps 4 --batch-size 4",
    "train --arch rf --train samples/train --composite z2015.dmr --out rf --seed 2 --trees 25",
    "predict --model fcn --composite z2015.dmr --epoch 2015 --step 12 --out-labels fcn2015.dmr --out-probabilities fcn2015_p.dmr",
    "predict --model rf --composite z2013.dmr --epoch 2013 --out-labels rf2013.dmr --out-probabilities rf2013_p.dmr",
    "predict --model rf --composite z2014.dmr --epoch 2014 --out-labels rf2014.dmr --out-probabilities rf2014_p.dmr",
    "predict --model rf --composite z2015.dmr --epoch 2015 --out-labels rf2015.dmr --out-probabilities rf2015_p.dmr",
    "smooth --inputs rf2013_p.dmr,rf2014_p.dmr,rf2015_p.dmr --first-year 2013 --window 3 --polyorder 1 --out smoothed",
    "evaluate --predicted rf2015.dmr --reference h2015.dmr --out metrics.csv --confusion confusion.csv --summary summary.txt",
    "mcnemar --first rf2015.dmr --second fcn2015.dmr --reference h2015.dmr --out mcnemar.csv",
    "growth --earlier rf2013.dmr --later rf2015.dmr --out growth.dmr --reference-earlier h2013.dmr --reference-later h2015.dmr "
    "--report growth.csv",
    "trends --horizontal h2013.dmr,h2015.dmr --vertical v2013.dmr,v2015.dmr --regions h2015.dmr --out trends.csv",
    "render --input rf2015.dmr --out rf2015.ppm",
};

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = text::read_file(e.path().string());
    return files;
}

Outcome cli_determinism() {
    const std::string exe = URBANFORM_CLI_PATH;
    const fs::path base = fs::absolute("acceptance_cli");
    fs::remove_all(base);
    std::map<std::string, std::string> runs[2];
    for (int k = 0; k < 2; ++k) {
        const auto dir = base / (k == 0 ? "first" : "second");
        fs::create_directories(dir);
        for (std::size_t i = 0; i < kPipeline.size(); ++i) {
            const auto cmd = "cd '" + dir.string() + "' && '" + exe + "' " + kPipeline[i] + " >> log.txt 2>&1";
            const int rc = std::system(cmd.c_str());
            if (!WIFEXITED(rc) || WEXITSTATUS(rc) != 0)
                return {false, "step " + std::to_string(i + 1) + " (" + kPipeline[i].substr(0, kPipeline[i].find(' ')) +
                                   ") failed in run " + std::to_string(k + 1) + "; see " + (dir / "log.txt").string()};
        }
        runs[k] = snapshot(dir);
    }
    std::size_t dmr = 0, csv = 0;
    std::string differing;
    for (const auto& [name, bytes] : runs[0]) {
        auto it = runs[1].find(name);
        if (it == runs[1].end() || it->second != bytes) differing += " " + name;
        dmr += name.ends_with(".dmr");
        csv += name.ends_with(".csv");
    }
    for (const auto& [name, bytes] : runs[1])
        if (!runs[0].count(name)) differing += " " + name;
    // The emitted datasets obey the sampler guarantee as well.
    const bool clean = !has_all_not_built_patch(read_patch_dataset((base / "first/samples/train").string())) &&
                       !has_all_not_built_patch(read_patch_dataset((base / "first/samples/validation").string()));
    return {differing.empty() && clean,
            std::to_string(kPipeline.size()) + "-step pipeline run twice: " + std::to_string(runs[0].size()) + " files (" +
                std::to_string(dmr) + " DMR1, " + std::to_string(csv) + " CSV) " +
                (differing.empty() ? "byte-identical" : "differ:" + differing) + (clean ? "" : "; emitted all-not-built patch")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient fidelity", gradient_fidelity},     {"shape contract", shape_contract},
        {"overfit sanity", overfit_sanity},           {"oracle equivalence", oracle_equivalence},
        {"statistical kernels", statistical_kernels}, {"end-to-end ordering", table_ordering},
        {"temporal-transfer ordering", transfer_ordering}, {"sampler constraints", sampler_constraints},
        {"CLI determinism", cli_determinism},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.count(i + 1)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << " [" << criteria[i].first << "] " << o.detail
                  << "\n"
                  << std::flush;
    }
    return failures == 0 ? 0 : 1;
}

#pragma once

// Texture-based random-forest baseline: window statistics, first principal component,
// grey-level co-occurrence texture and a Gini random forest.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "urbanform/composite.hpp"
#include "urbanform/error.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/sampler.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

inline constexpr std::size_t kSpectralStats = 5;   // max, min, mean, median, std
inline constexpr std::size_t kTextureFeatures = 8;

/// Feature order: for each band b, {max, min, mean, median, std}; then GLCM mean, variance,
/// homogeneity, contrast, dissimilarity, entropy, second moment, correlation.
inline std::vector<std::string> feature_names(const std::vector<std::string>& bands) {
    std::vector<std::string> out;
    for (const auto& b : bands)
        for (const char* s : {"max", "min", "mean", "median", "std"}) out.push_back(b + "_" + s);
    for (const char* s : {"glcm_mean", "glcm_variance", "glcm_homogeneity", "glcm_contrast", "glcm_dissimilarity",
                          "glcm_entropy", "glcm_second_moment", "glcm_correlation"})
        out.emplace_back(s);
    return out;
}

using FeatureVector = std::vector<double>;

/// Window statistics per band over the edge-truncated window. Population std.
inline std::vector<double> spectral_stats(const MultiBandRaster& composite, std::size_t row, std::size_t col,
                                          std::size_t window = 5) {
    if (window % 2 == 0) throw Error("window must be odd");
    if (row >= composite.height || col >= composite.width) throw Error("cell out of bounds");
    const auto b = window_bounds(composite.height, composite.width, row, col, window / 2);
    std::vector<double> out;
    out.reserve(composite.bands * kSpectralStats);
    std::vector<double> vals;
    vals.reserve(b.count());
    for (std::size_t k = 0; k < composite.bands; ++k) {
        vals.clear();
        for (std::size_t r = b.r0; r < b.r1; ++r)
            for (std::size_t c = b.c0; c < b.c1; ++c) {
                const double v = composite.at(k, r, c);
                if (std::isfinite(v)) vals.push_back(v);
            }
        if (vals.empty())
            throw Error("window at (" + std::to_string(row) + "," + std::to_string(col) + ") has no finite samples");
        const auto n = static_cast<double>(vals.size());
        double mx = vals[0], mn = vals[0], sum = 0.0;
        for (double v : vals) {
            mx = std::max(mx, v);
            mn = std::min(mn, v);
            sum += v;
        }
        const double mean = sum / n;
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        const double median = median_inplace(vals);
        out.insert(out.end(), {mx, mn, mean, median, std::sqrt(ss / n)});
    }
    return out;
}

struct PrincipalComponent {
    MultiBandRaster scores;          // single band, NaN where any input band is NaN
    std::vector<double> loadings;    // unit leading eigenvector
    std::vector<double> band_means;
    double eigenvalue = 0.0;
    double explained_fraction = 0.0;
};

/// Projects mean-centered band vectors onto the leading covariance eigenvector. The loading with
/// the largest magnitude is made positive.
inline PrincipalComponent pca_first_component(const MultiBandRaster& composite) {
    composite.validate();
    const auto B = composite.bands, N = composite.cells();
    if (B == 0) throw Error("PCA needs at least one band");
    std::vector<std::size_t> finite;
    for (std::size_t i = 0; i < N; ++i) {
        bool ok = true;
        for (std::size_t b = 0; b < B && ok; ++b) ok = std::isfinite(composite.data[b * N + i]);
        if (ok) finite.push_back(i);
    }
    if (finite.size() < 2) throw Error("PCA needs at least two finite cells");
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(B));
    for (auto i : finite)
        for (std::size_t b = 0; b < B; ++b) mean[static_cast<Eigen::Index>(b)] += composite.data[b * N + i];
    mean /= static_cast<double>(finite.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(B));
    Eigen::VectorXd x(static_cast<Eigen::Index>(B));
    for (auto i : finite) {
        for (std::size_t b = 0; b < B; ++b)
            x[static_cast<Eigen::Index>(b)] = composite.data[b * N + i] - mean[static_cast<Eigen::Index>(b)];
        cov.noalias() += x * x.transpose();
    }
    cov /= static_cast<double>(finite.size() - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const auto& evals = solver.eigenvalues();  // ascending
    const double lead = evals[evals.size() - 1];
    const double trace = cov.trace();
    if (!(lead > 1e-300) || !(trace > 0.0)) throw Error("PCA input has zero variance");
    Eigen::VectorXd v = solver.eigenvectors().col(evals.size() - 1);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;

    PrincipalComponent pc;
    pc.eigenvalue = lead;
    pc.explained_fraction = lead / trace;
    pc.loadings.assign(v.data(), v.data() + v.size());
    pc.band_means.assign(mean.data(), mean.data() + mean.size());
    pc.scores = composite.like({"pc1"}, kNoData);
    for (auto i : finite) {
        double s = 0.0;
        for (std::size_t b = 0; b < B; ++b)
            s += (composite.data[b * N + i] - pc.band_means[b]) * pc.loadings[b];
        pc.scores.data[i] = s;
    }
    return pc;
}

enum GlcmDirection : unsigned {
    glcm_0 = 1u,     // (0, +1)
    glcm_45 = 2u,    // (-1, +1)
    glcm_90 = 4u,    // (-1, 0)
    glcm_135 = 8u,   // (-1, -1)
    glcm_all = 15u,
};

/// Symmetric co-occurrence counts; `counts[i * levels + j]`.
struct GlcmMatrix {
    std::size_t levels = 0;
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;

    double p(std::size_t i, std::size_t j) const {
        return static_cast<double>(counts[i * levels + j]) / static_cast<double>(total);
    }
};

/// Quantizes the window to `levels` equal-width bins over its own min-max range and accumulates
/// distance-1 pairs (both orders) over the selected directions. NaN cells take no part.
inline GlcmMatrix glcm_matrix(const MultiBandRaster& band, std::size_t row, std::size_t col, std::size_t window = 5,
                              std::size_t levels = 32, unsigned directions = glcm_all) {
    if (window % 2 == 0) throw Error("window must be odd");
    if (levels < 2) throw Error("GLCM needs at least two grey levels");
    if (row >= band.height || col >= band.width) throw Error("cell out of bounds");
    const auto b = window_bounds(band.height, band.width, row, col, window / 2);
    const auto h = b.r1 - b.r0, w = b.c1 - b.c0;
    double lo = INFINITY, hi = -INFINITY;
    std::size_t finite = 0;
    for (std::size_t r = b.r0; r < b.r1; ++r)
        for (std::size_t c = b.c0; c < b.c1; ++c) {
            const double v = band.at(0, r, c);
            if (!std::isfinite(v)) continue;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            ++finite;
        }
    if (finite < 2) throw Error("GLCM window holds fewer than two samples");
    constexpr int kNone = -1;
    std::vector<int> q(h * w, kNone);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const double v = band.at(0, b.r0 + r, b.c0 + c);
            if (!std::isfinite(v)) continue;
            int level = 0;
            if (hi > lo) {
                level = static_cast<int>(std::floor((v - lo) / (hi - lo) * static_cast<double>(levels)));
                level = std::clamp(level, 0, static_cast<int>(levels) - 1);
            }
            q[r * w + c] = level;
        }
    GlcmMatrix m;
    m.levels = levels;
    m.counts.assign(levels * levels, 0);
    const int offsets[4][2] = {{0, 1}, {-1, 1}, {-1, 0}, {-1, -1}};
    for (int d = 0; d < 4; ++d) {
        if (!(directions & (1u << d))) continue;
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                const long long r2 = static_cast<long long>(r) + offsets[d][0];
                const long long c2 = static_cast<long long>(c) + offsets[d][1];
                if (r2 < 0 || c2 < 0 || r2 >= static_cast<long long>(h) || c2 >= static_cast<long long>(w)) continue;
                const int a = q[r * w + c], z = q[static_cast<std::size_t>(r2) * w + static_cast<std::size_t>(c2)];
                if (a == kNone || z == kNone) continue;
                ++m.counts[static_cast<std::size_t>(a) * levels + static_cast<std::size_t>(z)];
                ++m.counts[static_cast<std::size_t>(z) * levels + static_cast<std::size_t>(a)];
                m.total += 2;
            }
    }
    if (m.total == 0) throw Error("GLCM window holds no neighbouring sample pairs");
    return m;
}

struct GlcmStats {
    double mean = 0, variance = 0, homogeneity = 0, contrast = 0, dissimilarity = 0, entropy = 0,
           second_moment = 0, correlation = 0;
    std::array<double, kTextureFeatures> as_array() const {
        return {mean, variance, homogeneity, contrast, dissimilarity, entropy, second_moment, correlation};
    }
};

/// Haralick statistics. Zero marginal variance gives correlation 1.
inline GlcmStats glcm_statistics(const GlcmMatrix& m) {
    GlcmStats s;
    const auto L = m.levels;
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            const double p = m.p(i, j);
            if (p == 0.0) continue;
            const double d = static_cast<double>(i) - static_cast<double>(j);
            s.mean += static_cast<double>(i) * p;
            s.homogeneity += p / (1.0 + d * d);
            s.contrast += p * d * d;
            s.dissimilarity += p * std::abs(d);
            s.entropy -= p * std::log(p);
            s.second_moment += p * p;
        }
    double cov = 0.0;
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            const double p = m.p(i, j);
            if (p == 0.0) continue;
            const double di = static_cast<double>(i) - s.mean, dj = static_cast<double>(j) - s.mean;
            s.variance += di * di * p;
            cov += di * dj * p;
        }
    // The matrix is symmetric, so both marginals share mean and variance.
    s.correlation = s.variance > 1e-15 ? cov / s.variance : 1.0;
    return s;
}

inline std::vector<double> glcm_features(const MultiBandRaster& pc1, std::size_t row, std::size_t col,
                                         std::size_t window = 5, std::size_t levels = 32) {
    const auto a = glcm_statistics(glcm_matrix(pc1, row, col, window, levels)).as_array();
    return {a.begin(), a.end()};
}

struct FeatureConfig {
    std::size_t window = 5;
    std::size_t levels = 32;
};

/// Full per-cell feature vector (spectral stats followed by texture on PC1).
inline FeatureVector cell_features(const MultiBandRaster& composite, const MultiBandRaster& pc1, std::size_t row,
                                   std::size_t col, const FeatureConfig& cfg = {}) {
    auto f = spectral_stats(composite, row, col, cfg.window);
    const auto t = glcm_features(pc1, row, col, cfg.window, cfg.levels);
    f.insert(f.end(), t.begin(), t.end());
    return f;
}

// --- random forest -------------------------------------------------------------------------------

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    std::vector<std::uint32_t> histogram;  // leaves only

    bool is_leaf() const noexcept { return feature < 0; }
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // root at 0

    const TreeNode& leaf_for(const FeatureVector& x) const {
        std::size_t k = 0;
        while (!nodes[k].is_leaf())
            k = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[k].feature)] <= nodes[k].threshold
                                             ? nodes[k].left
                                             : nodes[k].right);
        return nodes[k];
    }

    /// Leaf majority; ties go to the lower class code.
    std::uint8_t predict(const FeatureVector& x) const {
        const auto& h = leaf_for(x).histogram;
        return static_cast<std::uint8_t>(std::max_element(h.begin(), h.end()) - h.begin());
    }
};

struct ForestConfig {
    std::size_t n_trees = 200;
    std::size_t features_per_split = 6;
    std::uint64_t seed = 0;
    std::size_t n_classes = 0;  // 0 = one past the largest training label
};

struct ForestModel {
    std::vector<DecisionTree> trees;
    std::size_t n_classes = 0;
    std::size_t n_features = 0;
    std::size_t features_per_split = 0;
    std::uint64_t seed = 0;
    double oob_accuracy = std::nan("");  // NaN when no sample was ever out of bag
};

namespace detail {

struct TreeBuilder {
    const std::vector<FeatureVector>& X;
    const std::vector<std::uint8_t>& y;
    std::size_t n_classes;
    std::size_t mtry;
    std::mt19937_64& rng;
    DecisionTree tree;

    std::vector<std::uint32_t> histogram(const std::vector<std::size_t>& idx) const {
        std::vector<std::uint32_t> h(n_classes, 0);
        for (auto i : idx) ++h[y[i]];
        return h;
    }

    int build(std::vector<std::size_t> idx) {
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        auto hist = histogram(idx);
        const bool pure = std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }) <= 1;
        if (pure || idx.size() < 2) {
            tree.nodes[static_cast<std::size_t>(id)].histogram = std::move(hist);
            return id;
        }
        const auto n_features = X.front().size();
        std::vector<std::size_t> feats(n_features);
        std::iota(feats.begin(), feats.end(), 0);
        const auto m = std::min(mtry, n_features);
        for (std::size_t k = 0; k < m; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, n_features - 1);
            std::swap(feats[k], feats[pick(rng)]);
        }

        // Minimising weighted Gini equals maximising sum over sides of (sum_k n_k^2) / n_side.
        double best_score = -1.0;
        int best_feature = -1;
        double best_threshold = 0.0;
        std::vector<std::size_t> sorted = idx;
        std::vector<double> left(n_classes), right(n_classes);
        for (std::size_t k = 0; k < m; ++k) {
            const auto f = feats[k];
            std::sort(sorted.begin(), sorted.end(), [&](auto a, auto b) {
                return X[a][f] != X[b][f] ? X[a][f] < X[b][f] : a < b;
            });
            std::fill(left.begin(), left.end(), 0.0);
            for (std::size_t c = 0; c < n_classes; ++c) right[c] = hist[c];
            double left_sq = 0.0, right_sq = 0.0;
            for (double v : right) right_sq += v * v;
            const auto n = sorted.size();
            for (std::size_t pos = 0; pos + 1 < n; ++pos) {
                const auto cls = y[sorted[pos]];
                left_sq += 2.0 * left[cls] + 1.0;
                right_sq -= 2.0 * right[cls] - 1.0;
                left[cls] += 1.0;
                right[cls] -= 1.0;
                const double a = X[sorted[pos]][f], b = X[sorted[pos + 1]][f];
                if (!(a < b)) continue;
                const double nl = static_cast<double>(pos + 1), nr = static_cast<double>(n - pos - 1);
                const double score = left_sq / nl + right_sq / nr;
                if (score > best_score) {
                    best_score = score;
                    best_feature = static_cast<int>(f);
                    double mid = a + (b - a) / 2.0;
                    if (!(mid < b)) mid = a;
                    best_threshold = mid;
                }
            }
        }
        if (best_feature < 0) {
            tree.nodes[static_cast<std::size_t>(id)].histogram = std::move(hist);
            return id;
        }
        std::vector<std::size_t> li, ri;
        for (auto i : idx) (X[i][static_cast<std::size_t>(best_feature)] <= best_threshold ? li : ri).push_back(i);
        idx.clear();
        idx.shrink_to_fit();
        const int l = build(std::move(li));
        const int r = build(std::move(ri));
        auto& node = tree.nodes[static_cast<std::size_t>(id)];
        node.feature = best_feature;
        node.threshold = best_threshold;
        node.left = l;
        node.right = r;
        return id;
    }
};

}  // namespace detail

/// Bootstrap-aggregated Gini trees grown until pure (or single-sample) leaves. Tree t draws from
/// a generator seeded with seed + t.
inline ForestModel rf_train(const std::vector<FeatureVector>& features, const std::vector<std::uint8_t>& labels,
                            const ForestConfig& cfg = {}) {
    if (features.size() != labels.size()) throw Error("feature and label counts differ");
    if (features.empty()) throw Error("empty training set");
    if (cfg.n_trees == 0) throw Error("forest needs at least one tree");
    const auto n_features = features.front().size();
    for (const auto& f : features) {
        if (f.size() != n_features) throw Error("feature vectors differ in length");
        for (double v : f)
            if (!std::isfinite(v)) throw Error("training features must be finite");
    }
    const std::size_t seen_classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    if (cfg.n_classes && seen_classes > cfg.n_classes) throw Error("training label outside the forest's class range");
    const std::size_t n_classes = cfg.n_classes ? cfg.n_classes : seen_classes;
    {
        std::vector<std::size_t> present(n_classes, 0);
        for (auto l : labels) ++present[l];
        if (std::count_if(present.begin(), present.end(), [](auto c) { return c > 0; }) < 2)
            throw Error("random forest needs at least two classes");
    }
    ForestModel model;
    model.n_classes = n_classes;
    model.n_features = n_features;
    model.features_per_split = cfg.features_per_split;
    model.seed = cfg.seed;

    const auto n = features.size();
    std::vector<std::vector<std::uint32_t>> oob_votes(n, std::vector<std::uint32_t>(n_classes, 0));
    for (std::size_t t = 0; t < cfg.n_trees; ++t) {
        std::mt19937_64 rng(cfg.seed + t);
        std::uniform_int_distribution<std::size_t> draw(0, n - 1);
        std::vector<std::size_t> boot(n);
        std::vector<std::uint8_t> in_bag(n, 0);
        for (auto& b : boot) {
            b = draw(rng);
            in_bag[b] = 1;
        }
        detail::TreeBuilder builder{features, labels, n_classes, cfg.features_per_split, rng, {}};
        builder.build(std::move(boot));
        for (std::size_t i = 0; i < n; ++i)
            if (!in_bag[i]) ++oob_votes[i][builder.tree.predict(features[i])];
        model.trees.push_back(std::move(builder.tree));
    }
    std::size_t seen = 0, correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& v = oob_votes[i];
        if (std::all_of(v.begin(), v.end(), [](auto c) { return c == 0; })) continue;
        ++seen;
        correct += static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin()) == labels[i];
    }
    if (seen) model.oob_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    return model;
}

struct ForestPrediction {
    std::uint8_t label = 0;
    std::vector<double> vote_fractions;
};

/// Majority vote over trees; ties go to the lower class code.
inline ForestPrediction rf_predict(const ForestModel& model, const FeatureVector& x) {
    if (x.size() != model.n_features)
        throw Error("feature vector has " + std::to_string(x.size()) + " entries, model expects " +
                    std::to_string(model.n_features));
    if (model.trees.empty()) throw Error("forest has no trees");
    std::vector<std::uint32_t> votes(model.n_classes, 0);
    for (const auto& t : model.trees) ++votes[t.predict(x)];
    ForestPrediction p;
    p.label = static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    p.vote_fractions.resize(model.n_classes);
    for (std::size_t c = 0; c < model.n_classes; ++c)
        p.vote_fractions[c] = static_cast<double>(votes[c]) / static_cast<double>(model.trees.size());
    return p;
}

/// Text form: a `forest` header line, then one line per node:
/// `node <tree> <id> split <feature> <threshold> <left> <right>` or `node <tree> <id> leaf <h0> <h1> ...`.
inline std::string encode_forest(const ForestModel& m) {
    std::string out = "forest trees=" + std::to_string(m.trees.size()) + " classes=" + std::to_string(m.n_classes) +
                      " features=" + std::to_string(m.n_features) +
                      " features_per_split=" + std::to_string(m.features_per_split) + " seed=" + std::to_string(m.seed) +
                      " oob_accuracy=" + text::format_double(m.oob_accuracy) + "\n";
    for (std::size_t t = 0; t < m.trees.size(); ++t)
        for (std::size_t k = 0; k < m.trees[t].nodes.size(); ++k) {
            const auto& nd = m.trees[t].nodes[k];
            out += "node " + std::to_string(t) + " " + std::to_string(k);
            if (nd.is_leaf()) {
                out += " leaf";
                for (auto c : nd.histogram) out += " " + std::to_string(c);
            } else {
                out += " split " + std::to_string(nd.feature) + " " + text::format_double(nd.threshold) + " " +
                       std::to_string(nd.left) + " " + std::to_string(nd.right);
            }
            out += "\n";
        }
    return out;
}

inline ForestModel decode_forest(std::string_view content) {
    auto lines = text::split(content, '\n');
    if (lines.empty() || !lines.front().starts_with("forest ")) throw Error("not a forest model file");
    ForestModel m;
    std::size_t n_trees = 0;
    for (const auto& tok : text::split(lines.front().substr(7), ' ')) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw Error("bad forest header token '" + tok + "'");
        const auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "trees") n_trees = static_cast<std::size_t>(text::to_int(val, key));
        else if (key == "classes") m.n_classes = static_cast<std::size_t>(text::to_int(val, key));
        else if (key == "features") m.n_features = static_cast<std::size_t>(text::to_int(val, key));
        else if (key == "features_per_split") m.features_per_split = static_cast<std::size_t>(text::to_int(val, key));
        else if (key == "seed") m.seed = static_cast<std::uint64_t>(text::to_int(val, key));
        else if (key == "oob_accuracy") m.oob_accuracy = text::to_double(val, key);
        else throw Error("unknown forest header key '" + key + "'");
    }
    m.trees.resize(n_trees);
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto line = text::trim(lines[li]);
        if (line.empty()) continue;
        const auto f = text::split(line, ' ');
        if (f.size() < 4 || f[0] != "node") throw Error("bad forest line " + std::to_string(li + 1));
        const auto t = static_cast<std::size_t>(text::to_int(f[1], "tree"));
        const auto k = static_cast<std::size_t>(text::to_int(f[2], "node"));
        if (t >= n_trees) throw Error("forest line " + std::to_string(li + 1) + " names a missing tree");
        auto& nodes = m.trees[t].nodes;
        if (k != nodes.size()) throw Error("forest nodes out of order at line " + std::to_string(li + 1));
        TreeNode nd;
        if (f[3] == "leaf") {
            if (f.size() != 4 + m.n_classes) throw Error("leaf histogram width mismatch at line " + std::to_string(li + 1));
            for (std::size_t c = 0; c < m.n_classes; ++c)
                nd.histogram.push_back(static_cast<std::uint32_t>(text::to_int(f[4 + c], "count")));
        } else if (f[3] == "split" && f.size() == 8) {
            nd.feature = static_cast<int>(text::to_int(f[4], "feature"));
            nd.threshold = text::to_double(f[5], "threshold");
            nd.left = static_cast<int>(text::to_int(f[6], "left"));
            nd.right = static_cast<int>(text::to_int(f[7], "right"));
        } else {
            throw Error("bad forest node at line " + std::to_string(li + 1));
        }
        nodes.push_back(std::move(nd));
    }
    for (const auto& tr : m.trees) {
        if (tr.nodes.empty()) throw Error("forest tree without nodes");
        for (const auto& nd : tr.nodes)
            if (!nd.is_leaf() && (nd.left <= 0 || nd.right <= 0 || static_cast<std::size_t>(nd.left) >= tr.nodes.size() ||
                                  static_cast<std::size_t>(nd.right) >= tr.nodes.size()))
                throw Error("forest node refers to a missing child");
    }
    return m;
}

inline void write_forest(const ForestModel& m, const std::string& path) { text::write_file(path, encode_forest(m)); }
inline ForestModel read_forest(const std::string& path) { return decode_forest(text::read_file(path)); }

/// Features and labels at the given sites; sites whose window has no finite samples are skipped.
struct SiteFeatures {
    std::vector<FeatureVector> features;
    std::vector<std::uint8_t> labels;
};

inline SiteFeatures site_features(const MultiBandRaster& composite, const std::vector<SampleSite>& sites,
                                  const FeatureConfig& cfg = {}) {
    const auto pc = pca_first_component(composite);
    SiteFeatures out;
    for (const auto& s : sites) {
        try {
            out.features.push_back(cell_features(composite, pc.scores, s.row, s.col, cfg));
        } catch (const Error&) {
            continue;
        }
        out.labels.push_back(s.label);
    }
    return out;
}

/// Classifies every cell with a finite band vector; vote fractions become the probability bands.
inline MapPrediction rf_predict_map(const ForestModel& model, const MultiBandRaster& composite, LabelKind kind,
                                    int epoch, const FeatureConfig& cfg = {}) {
    if (model.n_classes != class_count(kind)) throw Error("forest class count does not match the label kind");
    const auto pc = pca_first_component(composite);
    MapPrediction out{LabelGrid::like(composite, kind, epoch), composite.like(class_names(kind), kNoData)};
    for (std::size_t r = 0; r < composite.height; ++r)
        for (std::size_t c = 0; c < composite.width; ++c) {
            if (!std::isfinite(pc.scores.at(0, r, c))) continue;
            const auto p = rf_predict(model, cell_features(composite, pc.scores, r, c, cfg));
            out.labels.at(r, c) = p.label;
            for (std::size_t k = 0; k < model.n_classes; ++k) out.probabilities.at(k, r, c) = p.vote_fractions[k];
        }
    return out;
}

}  // namespace urbanform

#pragma once

// Segmentation networks (plain FCN and an atrous encoder-decoder with a small Xception-style
// backbone), their training loop, tiled map prediction, gradient checking and persistence.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "urbanform/error.hpp"
#include "urbanform/eval.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/sampler.hpp"
#include "urbanform/tensor.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

enum class Architecture { fcn, deeplab };

inline std::string architecture_name(Architecture a) { return a == Architecture::fcn ? "fcn" : "deeplab"; }

inline Architecture parse_architecture(std::string_view s) {
    if (s == "fcn") return Architecture::fcn;
    if (s == "deeplab") return Architecture::deeplab;
    throw Error("unknown architecture '" + std::string(s) + "' (expected fcn or deeplab)");
}

struct ModelConfig {
    Architecture architecture = Architecture::deeplab;
    std::size_t in_bands = 6;
    std::size_t n_classes = 4;
    std::size_t patch_size = 48;
    std::vector<std::size_t> atrous_rates{1, 2, 4};
    double width = 1.0;  // channel multiplier on the base plan
    double learning_rate = 2e-4;
    std::size_t epochs = 12;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    std::size_t max_steps = 0;  // 0 = no cap

    void validate() const {
        if (in_bands == 0) throw Error("in_bands must be positive");
        if (n_classes < 2) throw Error("n_classes must be at least 2");
        if (patch_size < 4 || patch_size % 2 != 0) throw Error("patch_size must be even and at least 4");
        if (atrous_rates.size() != 3) throw Error("exactly three atrous rates are required");
        for (std::size_t i = 0; i < atrous_rates.size(); ++i) {
            if (atrous_rates[i] < 1) throw Error("atrous rates must be >= 1");
            if (i > 0 && atrous_rates[i] <= atrous_rates[i - 1]) throw Error("atrous rates must be strictly increasing");
        }
        if (!(width > 0.0) || !std::isfinite(width)) throw Error("width multiplier must be positive");
        if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
        if (epochs == 0) throw Error("epochs must be positive");
        if (batch_size == 0) throw Error("batch_size must be positive");
    }

    std::size_t channels(std::size_t base) const {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(base) * width)));
    }
};

/// Base channel plan, scaled by ModelConfig::width.
struct ChannelPlan {
    static constexpr std::size_t entry[3] = {32, 64, 128};
    static constexpr std::size_t middle = 128;
    static constexpr std::size_t exit = 256;
    static constexpr std::size_t aspp = 64;
    static constexpr std::size_t low_level = 32;
    static constexpr std::size_t decoder = 64;
    static constexpr std::size_t middle_blocks = 3;
    static constexpr std::size_t fcn_stem[4] = {32, 32, 64, 64};
    static constexpr std::size_t fcn_head = 96;
};

inline std::string encode_rates(const std::vector<std::size_t>& r) {
    std::string s;
    for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + std::to_string(r[i]);
    return s;
}

inline std::vector<std::size_t> parse_rates(std::string_view s) {
    std::vector<std::size_t> out;
    for (const auto& part : text::split(s, ',')) {
        const auto v = text::to_int(part, "atrous rate");
        if (v < 1) throw Error("atrous rates must be >= 1");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

inline std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& c) {
    return {{"architecture", architecture_name(c.architecture)},
            {"in_bands", std::to_string(c.in_bands)},
            {"n_classes", std::to_string(c.n_classes)},
            {"patch_size", std::to_string(c.patch_size)},
            {"atrous_rates", encode_rates(c.atrous_rates)},
            {"width", text::format_double(c.width)},
            {"learning_rate", text::format_double(c.learning_rate)},
            {"epochs", std::to_string(c.epochs)},
            {"batch_size", std::to_string(c.batch_size)},
            {"seed", std::to_string(c.seed)},
            {"max_steps", std::to_string(c.max_steps)}};
}

/// Applies one key=value setting; returns false for keys that are not model settings.
inline bool apply_config_entry(ModelConfig& c, const std::string& key, const std::string& value) {
    auto count = [&](std::string_view what) {
        const auto v = text::to_int(value, what);
        if (v < 0) throw Error(std::string(what) + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    if (key == "architecture") c.architecture = parse_architecture(value);
    else if (key == "in_bands") c.in_bands = count("in_bands");
    else if (key == "n_classes") c.n_classes = count("n_classes");
    else if (key == "patch_size") c.patch_size = count("patch_size");
    else if (key == "atrous_rates") c.atrous_rates = parse_rates(value);
    else if (key == "width") c.width = text::to_double(value, "width");
    else if (key == "learning_rate") c.learning_rate = text::to_double(value, "learning_rate");
    else if (key == "epochs") c.epochs = count("epochs");
    else if (key == "batch_size") c.batch_size = count("batch_size");
    else if (key == "seed") c.seed = count("seed");
    else if (key == "max_steps") c.max_steps = count("max_steps");
    else return false;
    return true;
}

/// Trainable tensors and batch-norm moments keyed by layer name, in creation order.
/// Tensors are shared handles; use clone() for an independent copy.
class ModelParams {
public:
    ModelConfig config;

    ModelParams() = default;
    explicit ModelParams(ModelConfig cfg) : config(std::move(cfg)), rng_(config.seed) {}

    /// Builds every parameter by tracing one forward pass on a small zero probe.
    static ModelParams initialize(const ModelConfig& cfg);

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const std::vector<std::string>& names() const noexcept { return names_; }
    const std::vector<nn::Var>& tensors() const noexcept { return tensors_; }
    const nn::Var& tensor(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("model has no parameter '" + name + "'");
        return tensors_[it->second];
    }
    const std::vector<std::string>& norm_names() const noexcept { return norm_names_; }
    nn::BatchNormState& norm(const std::string& name) {
        auto it = norms_.find(name);
        if (it == norms_.end()) throw Error("model has no batch-norm layer '" + name + "'");
        return it->second;
    }
    const nn::BatchNormState& norm(const std::string& name) const {
        auto it = norms_.find(name);
        if (it == norms_.end()) throw Error("model has no batch-norm layer '" + name + "'");
        return it->second;
    }

    void freeze() noexcept { frozen_ = true; }
    bool frozen() const noexcept { return frozen_; }

    /// Fetches a parameter, creating it (He-normal when fan_in > 0, else `fill`) while unfrozen.
    nn::Var get(const std::string& name, nn::Shape shape, std::size_t fan_in, double fill = 0.0) {
        auto it = index_.find(name);
        if (it != index_.end()) {
            const auto& t = tensors_[it->second];
            if (t->shape() != shape)
                throw Error("parameter '" + name + "' has shape " + t->shape().str() + ", layer expects " + shape.str());
            return t;
        }
        if (frozen_) throw Error("model has no parameter '" + name + "'");
        nn::Tensor t(shape, fill);
        if (fan_in > 0) {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
            for (auto& v : t.values) v = dist(rng_);
        }
        add(name, std::move(t));
        return tensors_.back();
    }

    nn::BatchNormState& norm_state(const std::string& name, std::size_t channels) {
        auto it = norms_.find(name);
        if (it != norms_.end()) {
            if (it->second.running_mean.size() != channels) throw Error("batch-norm layer '" + name + "' channel mismatch");
            return it->second;
        }
        if (frozen_) throw Error("model has no batch-norm layer '" + name + "'");
        norm_names_.push_back(name);
        return norms_.emplace(name, nn::BatchNormState(channels)).first->second;
    }

    void add(const std::string& name, nn::Tensor t) {
        if (has(name)) throw Error("duplicate parameter name '" + name + "'");
        index_[name] = tensors_.size();
        names_.push_back(name);
        tensors_.push_back(nn::parameter(std::move(t)));
    }

    ModelParams clone() const {
        ModelParams p;
        p.config = config;
        p.rng_ = rng_;
        p.frozen_ = frozen_;
        p.names_ = names_;
        p.index_ = index_;
        for (const auto& t : tensors_) p.tensors_.push_back(nn::parameter(t->value));
        p.norm_names_ = norm_names_;
        p.norms_ = norms_;
        return p;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t->value.numel();
        return n;
    }

    bool all_finite() const {
        for (const auto& t : tensors_)
            for (double v : t->value.values)
                if (!std::isfinite(v)) return false;
        for (const auto& [k, s] : norms_) {
            for (double v : s.running_mean)
                if (!std::isfinite(v)) return false;
            for (double v : s.running_var)
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void zero_grad() {
        for (auto& t : tensors_) t->grad = nn::Tensor();
    }

private:
    std::mt19937_64 rng_;
    bool frozen_ = false;
    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;
    std::vector<nn::Var> tensors_;
    std::vector<std::string> norm_names_;
    std::map<std::string, nn::BatchNormState> norms_;
};

/// Layer helpers bound to one parameter store.
struct LayerContext {
    ModelParams& params;
    bool training = false;
    nn::KinkTrace* trace = nullptr;

    nn::Var conv(const std::string& name, const nn::Var& x, std::size_t out_channels, std::size_t k,
                 const nn::ConvSpec& spec = {}, bool bias = false) {
        const auto cin = x->shape().c;
        auto w = params.get(name + ".weight", {out_channels, cin, k, k}, cin * k * k);
        nn::Var b = bias ? params.get(name + ".bias", {1, out_channels, 1, 1}, 0) : nullptr;
        return nn::conv2d(x, w, b, spec);
    }

    nn::Var depthwise(const std::string& name, const nn::Var& x, std::size_t k, const nn::ConvSpec& spec = {}) {
        const auto c = x->shape().c;
        return nn::depthwise_conv2d(x, params.get(name + ".weight", {c, 1, k, k}, k * k), spec);
    }

    /// Depthwise 3x3 (carrying stride and dilation) then pointwise 1x1.
    nn::Var separable(const std::string& name, const nn::Var& x, std::size_t out_channels, const nn::ConvSpec& spec = {}) {
        return conv(name + ".pointwise", depthwise(name + ".depthwise", x, 3, spec), out_channels, 1);
    }

    nn::Var norm(const std::string& name, const nn::Var& x) {
        const auto c = x->shape().c;
        auto gamma = params.get(name + ".gamma", {1, c, 1, 1}, 0, 1.0);
        auto beta = params.get(name + ".beta", {1, c, 1, 1}, 0, 0.0);
        return nn::batch_norm(x, gamma, beta, params.norm_state(name, c), training);
    }

    nn::Var relu(const nn::Var& x) { return nn::relu(x, trace); }

    nn::Var conv_bn_relu(const std::string& name, const nn::Var& x, std::size_t out_channels, std::size_t k,
                         const nn::ConvSpec& spec = {}) {
        return relu(norm(name + ".bn", conv(name + ".conv", x, out_channels, k, spec)));
    }
};

/// Xception-style block: sep-BN-ReLU-sep(stride)-BN plus a 1x1 projection shortcut, then ReLU.
inline nn::Var xception_block(LayerContext& ctx, const std::string& name, const nn::Var& x, std::size_t out_channels,
                              std::size_t stride) {
    auto h = ctx.relu(ctx.norm(name + ".bn1", ctx.separable(name + ".sep1", x, out_channels)));
    h = ctx.norm(name + ".bn2", ctx.separable(name + ".sep2", h, out_channels, {stride, 1, nn::Padding::same}));
    auto skip = ctx.norm(name + ".skip_bn", ctx.conv(name + ".skip", x, out_channels, 1, {stride, 1, nn::Padding::same}));
    return ctx.relu(nn::add(h, skip));
}

/// Identity-shortcut block of two separable convolutions.
inline nn::Var residual_block(LayerContext& ctx, const std::string& name, const nn::Var& x) {
    const auto c = x->shape().c;
    auto h = ctx.relu(ctx.norm(name + ".bn1", ctx.separable(name + ".sep1", x, c)));
    h = ctx.norm(name + ".bn2", ctx.separable(name + ".sep2", h, c));
    return ctx.relu(nn::add(h, x));
}

/// Five parallel branches (1x1, three atrous 3x3, pooled image feature) fused by a 1x1 convolution.
inline nn::Var aspp_forward(LayerContext& ctx, const std::string& name, const nn::Var& x,
                            const std::vector<std::size_t>& rates, std::size_t branch_channels) {
    if (rates.size() != 3) throw Error("ASPP needs three atrous rates");
    for (auto r : rates)
        if (r < 1) throw Error("ASPP atrous rate must be >= 1");
    const auto s = x->shape();
    if (s.h < 1 || s.w < 1) throw Error("ASPP input is empty");
    std::vector<nn::Var> branches;
    branches.push_back(ctx.conv_bn_relu(name + ".b0", x, branch_channels, 1));
    for (std::size_t i = 0; i < rates.size(); ++i)
        branches.push_back(ctx.conv_bn_relu(name + ".b" + std::to_string(i + 1), x, branch_channels, 3,
                                            {1, rates[i], nn::Padding::same}));
    auto pooled = ctx.relu(ctx.conv(name + ".image", nn::global_avg_pool(x), branch_channels, 1, {}, true));
    branches.push_back(nn::bilinear_upsample(pooled, s.h, s.w));
    return ctx.conv_bn_relu(name + ".fuse", nn::concat_channels(branches), branch_channels, 1);
}

inline nn::Var deeplab_forward(LayerContext& ctx, const nn::Var& input) {
    const auto& cfg = ctx.params.config;
    const auto H = input->shape().h, W = input->shape().w;
    auto e1 = xception_block(ctx, "entry1", input, cfg.channels(ChannelPlan::entry[0]), 1);
    auto e2 = xception_block(ctx, "entry2", e1, cfg.channels(ChannelPlan::entry[1]), 1);
    auto e3 = xception_block(ctx, "entry3", e2, cfg.channels(ChannelPlan::entry[2]), 2);
    auto m = e3;
    if (cfg.channels(ChannelPlan::middle) != m->shape().c)
        m = ctx.conv_bn_relu("middle.project", m, cfg.channels(ChannelPlan::middle), 1);
    for (std::size_t i = 0; i < ChannelPlan::middle_blocks; ++i) m = residual_block(ctx, "middle" + std::to_string(i + 1), m);
    auto x = xception_block(ctx, "exit", m, cfg.channels(ChannelPlan::exit), 1);
    auto a = aspp_forward(ctx, "aspp", x, cfg.atrous_rates, cfg.channels(ChannelPlan::aspp));
    auto low = ctx.conv_bn_relu("decoder.low", e3, cfg.channels(ChannelPlan::low_level), 1);
    auto d = nn::concat_channels({a, low});
    d = ctx.conv_bn_relu("decoder.conv1", d, cfg.channels(ChannelPlan::decoder), 3);
    d = ctx.conv_bn_relu("decoder.conv2", d, cfg.channels(ChannelPlan::decoder), 3);
    auto logits = ctx.conv("classifier", d, cfg.n_classes, 1, {}, true);
    return nn::bilinear_upsample(logits, H, W);
}

inline nn::Var fcn_forward(LayerContext& ctx, const nn::Var& input) {
    const auto& cfg = ctx.params.config;
    const auto H = input->shape().h, W = input->shape().w;
    auto x = input;
    for (std::size_t i = 0; i < 4; ++i) x = ctx.conv_bn_relu("stem" + std::to_string(i + 1), x, cfg.channels(ChannelPlan::fcn_stem[i]), 3);
    x = nn::concat_channels({nn::max_pool2(x, ctx.trace), nn::avg_pool2(x)});
    for (std::size_t i = 0; i < 4; ++i) x = ctx.conv_bn_relu("head" + std::to_string(i + 1), x, cfg.channels(ChannelPlan::fcn_head), 3);
    auto logits = ctx.conv("classifier", x, cfg.n_classes, 1, {}, true);
    return nn::bilinear_upsample(logits, H, W);
}

/// Per-class scores (N, n_classes, H, W) for an (N, in_bands, H, W) input.
inline nn::Var model_forward(ModelParams& params, const nn::Var& input, bool training, nn::KinkTrace* trace = nullptr) {
    const auto& cfg = params.config;
    const auto s = input->shape();
    if (s.c != cfg.in_bands)
        throw Error("input has " + std::to_string(s.c) + " bands, model expects " + std::to_string(cfg.in_bands));
    if (s.h % 2 != 0 || s.w % 2 != 0 || s.h < 4 || s.w < 4) throw Error("input size must be even and at least 4, got " + s.str());
    LayerContext ctx{params, training, trace};
    return cfg.architecture == Architecture::fcn ? fcn_forward(ctx, input) : deeplab_forward(ctx, input);
}

inline ModelParams ModelParams::initialize(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p(cfg);
    const std::size_t probe = std::min<std::size_t>(cfg.patch_size, 16);
    model_forward(p, nn::constant(nn::Tensor({1, cfg.in_bands, probe, probe})), false);
    p.freeze();
    return p;
}

inline LabelKind kind_for_classes(std::size_t n_classes) {
    for (auto k : {LabelKind::horizontal, LabelKind::vertical, LabelKind::growth})
        if (class_count(k) == n_classes) return k;
    throw Error("no label kind has " + std::to_string(n_classes) + " classes");
}

// --- batches -----------------------------------------------------------------------------------

struct Batch {
    nn::Tensor input;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> mask;
};

inline Batch make_batch(const PatchDataset& ds, const std::vector<std::size_t>& indices) {
    const auto P = ds.patch_size, plane = P * P;
    Batch b{nn::Tensor({indices.size(), ds.bands, P, P}), std::vector<std::uint8_t>(indices.size() * plane, 0),
            std::vector<std::uint8_t>(indices.size() * plane, 0)};
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto& p = ds.patches[indices[k]];
        if (p.input.size() != ds.bands * plane || p.labels.size() != plane || p.mask.size() != plane)
            throw Error("patch " + std::to_string(indices[k]) + " has inconsistent array sizes");
        std::copy(p.input.begin(), p.input.end(), b.input.values.begin() + static_cast<std::ptrdiff_t>(k * ds.bands * plane));
        for (std::size_t i = 0; i < plane; ++i) {
            const bool on = p.mask[i] && p.labels[i] != kUnlabeled;
            b.mask[k * plane + i] = on;
            b.labels[k * plane + i] = on ? p.labels[i] : 0;
        }
    }
    return b;
}

inline std::vector<std::uint8_t> argmax_channels(const nn::Tensor& scores) {
    const auto s = scores.shape;
    std::vector<std::uint8_t> out(s.n * s.plane());
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < s.c; ++c)
                if (scores.values[(n * s.c + c) * s.plane() + i] > scores.values[(n * s.c + best) * s.plane() + i]) best = c;
            out[n * s.plane() + i] = static_cast<std::uint8_t>(best);
        }
    return out;
}

/// Confusion matrix of inference-mode predictions over masked cells of every patch.
inline ConfusionMatrix evaluate_patches(ModelParams& params, const PatchDataset& ds) {
    std::vector<std::uint8_t> pred, ref;
    const auto bs = std::max<std::size_t>(1, params.config.batch_size);
    for (std::size_t start = 0; start < ds.size(); start += bs) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(ds.size(), start + bs); ++i) idx.push_back(i);
        auto batch = make_batch(ds, idx);
        auto out = model_forward(params, nn::constant(std::move(batch.input)), false);
        const auto labels = argmax_channels(out->value);
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (batch.mask[i]) {
                pred.push_back(labels[i]);
                ref.push_back(batch.labels[i]);
            }
    }
    return confusion_matrix(pred, ref, class_names(kind_for_classes(params.config.n_classes)));
}

// --- training ----------------------------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t t = 0;
    std::vector<std::vector<double>> m, v;

    void step(ModelParams& params, double lr) {
        const auto& ts = params.tensors();
        if (m.empty()) {
            for (const auto& p : ts) {
                m.emplace_back(p->value.numel(), 0.0);
                v.emplace_back(p->value.numel(), 0.0);
            }
        }
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t k = 0; k < ts.size(); ++k) {
            auto& p = *ts[k];
            if (p.grad.numel() != p.value.numel()) continue;  // untouched this step
            for (std::size_t i = 0; i < p.value.numel(); ++i) {
                const double g = p.grad.values[i];
                m[k][i] = beta1 * m[k][i] + (1 - beta1) * g;
                v[k][i] = beta2 * v[k][i] + (1 - beta2) * g * g;
                p.value.values[i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps);
            }
        }
    }
};

struct EpochLog {
    std::size_t epoch = 0;
    std::size_t steps = 0;
    double loss = 0.0;  // mean step loss
    double val_oa = 0.0;
    double val_avg_f1 = 0.0;
};

struct TrainingResult {
    ModelParams params;  // from the best validation epoch
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
};

inline void check_dataset(const PatchDataset& ds, const ModelConfig& cfg, const char* what) {
    if (ds.empty()) throw Error(std::string(what) + " dataset is empty");
    if (ds.bands != cfg.in_bands) throw Error(std::string(what) + " dataset band count does not match the model");
    if (ds.patch_size % 2 != 0) throw Error(std::string(what) + " patch size must be even");
    std::size_t supervised = 0;
    for (const auto& p : ds.patches)
        for (std::size_t i = 0; i < p.labels.size(); ++i)
            if (p.mask[i] && p.labels[i] != kUnlabeled) {
                if (p.labels[i] >= cfg.n_classes) throw Error(std::string(what) + " dataset label outside the class range");
                ++supervised;
            }
    if (supervised == 0) throw Error(std::string(what) + " dataset has an empty loss mask in every patch");
}

/// Adam on masked cross-entropy with a seeded shuffle per epoch. Keeps the epoch with the highest
/// validation average F1 (earliest on ties).
inline TrainingResult train_model(const ModelConfig& cfg, const PatchDataset& train, const PatchDataset& validation,
                                  const std::function<void(const EpochLog&)>& on_epoch = {}) {
    cfg.validate();
    check_dataset(train, cfg, "training");
    check_dataset(validation, cfg, "validation");
    if (train.patch_size != validation.patch_size) throw Error("training and validation patch sizes differ");

    auto params = ModelParams::initialize(cfg);
    AdamState adam;
    std::mt19937_64 rng(cfg.seed ^ 0x5eed5eedULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    TrainingResult result;
    double best_f1 = -1.0;
    std::size_t total_steps = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        EpochLog log;
        log.epoch = epoch;
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            if (cfg.max_steps && total_steps >= cfg.max_steps) break;
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
            auto batch = make_batch(train, idx);
            if (std::none_of(batch.mask.begin(), batch.mask.end(), [](auto m) { return m != 0; })) continue;
            params.zero_grad();
            auto logits = model_forward(params, nn::constant(std::move(batch.input)), true);
            auto loss = nn::masked_cross_entropy(logits, batch.labels, batch.mask);
            const double lv = loss->value.values[0];
            if (!std::isfinite(lv))
                throw Error("non-finite training loss at epoch " + std::to_string(epoch) + " step " + std::to_string(log.steps + 1));
            nn::backward(loss);
            adam.step(params, cfg.learning_rate);
            loss_sum += lv;
            ++log.steps;
            ++total_steps;
        }
        if (log.steps == 0) break;
        log.loss = loss_sum / static_cast<double>(log.steps);
        const auto rep = summary_metrics(evaluate_patches(params, validation));
        log.val_oa = rep.overall_accuracy;
        log.val_avg_f1 = rep.average_f1;
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
        if (log.val_avg_f1 > best_f1) {
            best_f1 = log.val_avg_f1;
            result.best_epoch = epoch;
            result.params = params.clone();
        }
        if (cfg.max_steps && total_steps >= cfg.max_steps) break;
    }
    if (result.log.empty()) throw Error("training ran no optimizer steps");
    result.params.zero_grad();
    return result;
}

inline std::string encode_training_log(const std::vector<EpochLog>& log) {
    std::string out = "epoch,loss,val_oa,val_avg_f1\n";
    for (const auto& e : log)
        out += std::to_string(e.epoch) + "," + text::format_double(e.loss) + "," + text::format_double(e.val_oa) + "," +
               text::format_double(e.val_avg_f1) + "\n";
    return out;
}

// --- whole-map prediction ----------------------------------------------------------------------

/// Slides patch_size tiles at `step` (last tile clamped), averages softmax probabilities over covering
/// tiles and takes the argmax. Cells with any NaN band come out unlabeled.
inline MapPrediction predict_map(ModelParams& params, const MultiBandRaster& composite, int epoch, std::size_t step = 24) {
    const auto& cfg = params.config;
    const auto P = cfg.patch_size;
    if (composite.bands != cfg.in_bands)
        throw Error("raster has " + std::to_string(composite.bands) + " bands, model expects " + std::to_string(cfg.in_bands));
    if (composite.width < P || composite.height < P) throw Error("raster is smaller than one patch");
    if (step == 0) throw Error("tile step must be positive");
    const auto kind = kind_for_classes(cfg.n_classes);
    const auto rows = tile_origins(0, composite.height - 1, composite.height, P, step);
    const auto cols = tile_origins(0, composite.width - 1, composite.width, P, step);
    std::vector<std::pair<std::size_t, std::size_t>> tiles;
    for (auto r : rows)
        for (auto c : cols) tiles.emplace_back(r, c);

    const auto cells = composite.cells();
    std::vector<double> sum(cfg.n_classes * cells, 0.0);
    std::vector<std::uint32_t> hits(cells, 0);
    const auto bs = std::max<std::size_t>(1, cfg.batch_size);
    for (std::size_t start = 0; start < tiles.size(); start += bs) {
        const auto end = std::min(tiles.size(), start + bs);
        nn::Tensor in({end - start, cfg.in_bands, P, P});
        for (std::size_t t = start; t < end; ++t)
            for (std::size_t b = 0; b < cfg.in_bands; ++b)
                for (std::size_t y = 0; y < P; ++y)
                    for (std::size_t x = 0; x < P; ++x) {
                        const double v = composite.at(b, tiles[t].first + y, tiles[t].second + x);
                        in(t - start, b, y, x) = std::isfinite(v) ? v : 0.0;
                    }
        const auto prob = nn::softmax_channels(model_forward(params, nn::constant(std::move(in)), false)->value);
        for (std::size_t t = start; t < end; ++t)
            for (std::size_t y = 0; y < P; ++y)
                for (std::size_t x = 0; x < P; ++x) {
                    const auto cell = (tiles[t].first + y) * composite.width + tiles[t].second + x;
                    ++hits[cell];
                    for (std::size_t k = 0; k < cfg.n_classes; ++k) sum[k * cells + cell] += prob(t - start, k, y, x);
                }
    }

    MapPrediction out{LabelGrid::like(composite, kind, epoch), composite.like(class_names(kind), kNoData)};
    for (std::size_t cell = 0; cell < cells; ++cell) {
        bool valid = hits[cell] > 0;
        for (std::size_t b = 0; b < composite.bands && valid; ++b) valid = std::isfinite(composite.data[b * cells + cell]);
        if (!valid) continue;
        std::size_t best = 0;
        for (std::size_t k = 0; k < cfg.n_classes; ++k) {
            const double p = sum[k * cells + cell] / hits[cell];
            out.probabilities.data[k * cells + cell] = p;
            if (p > out.probabilities.data[best * cells + cell]) best = k;
        }
        out.labels.codes[cell] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// --- gradient checking -------------------------------------------------------------------------

struct GradcheckEntry {
    std::string layer;
    std::size_t samples = 0;
    std::size_t kink_skips = 0;  // probes whose +-h evaluations changed a ReLU or max-pool branch
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double tolerance = 0.0;
    bool passed() const {
        return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
    }
};

struct GradcheckOptions {
    std::size_t samples = 200;
    double step = 1e-4;  // fourth-order stencil; smaller steps hit float64 roundoff in the full losses
    // Probes linear in each coordinate have no truncation error, so a wide step only cuts roundoff.
    double linear_step = 1e-2;
    double tolerance = 1e-5;
    // Denominator floor relative to the probe's largest gradient: structurally zero components
    // (e.g. a shift cancelled by a following batch norm) compare against the gradient scale.
    double scale_floor = 1e-6;
    std::uint64_t seed = 7;
    std::vector<Architecture> architectures{Architecture::fcn, Architecture::deeplab};
};

namespace detail {

/// One probe problem: scalar loss over leaf tensors, rebuilt from scratch on each call.
struct GradProbe {
    std::string layer;
    std::vector<nn::Var> leaves;
    std::function<nn::Var(nn::KinkTrace*)> loss;
    bool linear = false;  // loss is linear in every single leaf coordinate (max pool: piecewise)
};

inline GradcheckEntry run_probe(const GradProbe& probe, const GradcheckOptions& opt, std::mt19937_64& rng) {
    GradcheckEntry e;
    e.layer = probe.layer;
    for (auto& l : probe.leaves) l->grad = nn::Tensor();
    nn::KinkTrace base_trace;
    auto out = probe.loss(&base_trace);
    nn::backward(out);

    std::vector<std::pair<std::size_t, std::size_t>> pool;
    for (std::size_t k = 0; k < probe.leaves.size(); ++k)
        for (std::size_t i = 0; i < probe.leaves[k]->value.numel(); ++i) pool.emplace_back(k, i);
    std::shuffle(pool.begin(), pool.end(), rng);
    double grad_scale = 0.0;
    for (const auto& l : probe.leaves)
        for (double g : l->grad.values) grad_scale = std::max(grad_scale, std::fabs(g));
    const double floor = opt.scale_floor * std::max(1.0, grad_scale);

    auto eval = [&](nn::KinkTrace& tr) { return probe.loss(&tr)->value.values[0]; };
    const double h = probe.linear ? opt.linear_step : opt.step;
    for (const auto& [k, i] : pool) {
        if (e.samples >= opt.samples) break;
        auto& leaf = *probe.leaves[k];
        const double orig = leaf.value.values[i];
        // Fourth-order central stencil; all four evaluations must stay on the base branch.
        double f[4];
        bool kink = false;
        const double offsets[4] = {2.0, 1.0, -1.0, -2.0};
        for (int j = 0; j < 4; ++j) {
            nn::KinkTrace tr;
            leaf.value.values[i] = orig + offsets[j] * h;
            f[j] = eval(tr);
            kink = kink || tr.hash != base_trace.hash;
        }
        leaf.value.values[i] = orig;
        if (kink) {
            ++e.kink_skips;
            continue;
        }
        const double numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
        const double analytic = leaf.grad.numel() ? leaf.grad.values[i] : 0.0;
        const double abs_err = std::fabs(numeric - analytic);
        const double rel = abs_err / std::max({std::fabs(numeric), std::fabs(analytic), floor});
        e.max_abs_error = std::max(e.max_abs_error, abs_err);
        e.max_rel_error = std::max(e.max_rel_error, rel);
        ++e.samples;
    }
    e.passed = e.samples >= std::min(opt.samples, pool.size() - e.kink_skips) && e.samples > 0 && e.max_rel_error < opt.tolerance;
    return e;
}

inline nn::Tensor random_tensor(nn::Shape s, std::mt19937_64& rng, double scale = 1.0) {
    nn::Tensor t(s);
    std::normal_distribution<double> d(0.0, scale);
    for (auto& v : t.values) v = d(rng);
    return t;
}

}  // namespace detail

/// Finite-difference check of every layer type, then of the full loss of both architectures on
/// `probe` (N, in_bands, H, W). Parameters are cloned; the caller's model is untouched.
inline GradcheckReport finite_difference_check(const ModelConfig& cfg, const nn::Tensor& probe,
                                               const GradcheckOptions& opt = {}) {
    cfg.validate();
    std::mt19937_64 rng(opt.seed);
    GradcheckReport report;
    report.tolerance = opt.tolerance;
    std::vector<detail::GradProbe> probes;

    auto weighted = [&rng](nn::Shape s) { return detail::random_tensor(s, rng); };
    const nn::Shape xs{2, 3, 8, 8};

    auto add_conv = [&](std::string layer, std::size_t k, nn::ConvSpec spec) {
        auto x = nn::parameter(detail::random_tensor(xs, rng));
        auto w = nn::parameter(detail::random_tensor({4, 3, k, k}, rng, 0.5));
        auto b = nn::parameter(detail::random_tensor({1, 4, 1, 1}, rng));
        const auto g = nn::conv_geometry(xs.h, xs.w, k, spec);
        auto wt = weighted({xs.n, 4, g.out_h, g.out_w});
        probes.push_back({std::move(layer), {x, w, b}, [=](nn::KinkTrace*) { return nn::weighted_sum(nn::conv2d(x, w, b, spec), wt); }, true});
    };
    add_conv("conv3x3", 3, {});
    for (std::size_t r : cfg.atrous_rates)
        add_conv("atrous_conv_rate" + std::to_string(r), 3, {1, r, nn::Padding::same});
    add_conv("conv3x3_stride2", 3, {2, 1, nn::Padding::same});
    add_conv("conv1x1", 1, {});
    add_conv("conv1x1_stride2", 1, {2, 1, nn::Padding::same});
    add_conv("conv3x3_valid", 3, {1, 1, nn::Padding::valid});

    {
        auto x = nn::parameter(detail::random_tensor(xs, rng));
        auto w = nn::parameter(detail::random_tensor({3, 1, 3, 3}, rng, 0.5));
        nn::ConvSpec spec{1, 2, nn::Padding::same};
        auto wt = weighted(xs);
        probes.push_back({"depthwise_conv", {x, w}, [=](nn::KinkTrace*) { return nn::weighted_sum(nn::depthwise_conv2d(x, w, spec), wt); }, true});
    }
    {
        auto x = nn::parameter(detail::random_tensor(xs, rng));
        auto dw = nn::parameter(detail::random_tensor({3, 1, 3, 3}, rng, 0.5));
        auto pw = nn::parameter(detail::random_tensor({5, 3, 1, 1}, rng, 0.5));
        nn::ConvSpec spec{2, 1, nn::Padding::same};
        auto wt = weighted({xs.n, 5, 4, 4});
        probes.push_back({"separable_conv", {x, dw, pw}, [=](nn::KinkTrace*) {
                              return nn::weighted_sum(nn::conv2d(nn::depthwise_conv2d(x, dw, spec), pw, nullptr), wt);
                          }, true});
    }
    {
        auto x = nn::parameter(detail::random_tensor(xs, rng));
        auto wt = weighted({xs.n, xs.c, 4, 4});
        probes.push_back({"max_pool", {x}, [=](nn::KinkTrace* t) { return nn::weighted_sum(nn::max_pool2(x, t), wt); }, true});
    }
    {
        auto x = nn::parameter(detail::random_tensor(xs, rng));
        auto wt = weighted({xs.n, xs.c, 4, 4});
        probes.push_back({"avg_pool", {x}, [=](nn::KinkTrace*) { return nn::weighted_sum(nn::avg_pool2(x), wt); }, true});
    }
    {
        auto x = nn::parameter(detail::random_tensor({2, 3, 6, 5}, rng));
        auto wt = weighted({2, 3, 13, 11});
        probes.push_back({"bilinear_upsample", {x}, [=](nn::KinkTrace*) { return nn::weighted_sum(nn::bilinear_upsample(x, 13, 11), wt); }, true});
    }
    {
        auto x = nn::parameter(detail::random_tensor(xs, rng));
        auto wt = weighted(xs);
        auto g = nn::parameter(detail::random_tensor({1, 3, 1, 1}, rng));
        auto b = nn::parameter(detail::random_tensor({1, 3, 1, 1}, rng));
        probes.push_back({"batch_norm", {x, g, b}, [=](nn::KinkTrace*) {
                              nn::BatchNormState st(3);
                              return nn::weighted_sum(nn::batch_norm(x, g, b, st, true), wt);
                          }});
        auto x2 = nn::parameter(detail::random_tensor(xs, rng));
        auto wt2 = weighted(xs);
        probes.push_back({"batch_norm_inference", {x2, g, b}, [=](nn::KinkTrace*) {
                              nn::BatchNormState st(3);
                              st.running_mean = {0.3, -0.2, 0.1};
                              st.running_var = {1.5, 0.7, 2.0};
                              return nn::weighted_sum(nn::batch_norm(x2, g, b, st, false), wt2);
                          }, true});
    }
    {
        auto x = nn::parameter(detail::random_tensor(xs, rng));
        auto w = nn::parameter(detail::random_tensor({4, 3, 1, 1}, rng));
        auto b = nn::parameter(detail::random_tensor({1, 4, 1, 1}, rng));
        auto wt = weighted({xs.n, 4, xs.h, xs.w});
        probes.push_back({"image_pool_branch", {x, w, b}, [=](nn::KinkTrace* t) {
                              auto p = nn::relu(nn::conv2d(nn::global_avg_pool(x), w, b), t);
                              return nn::weighted_sum(nn::bilinear_upsample(p, xs.h, xs.w), wt);
                          }});
    }
    {
        auto ps = std::make_shared<ModelParams>(cfg);
        auto x = nn::parameter(detail::random_tensor({2, 4, 8, 8}, rng));
        {
            LayerContext ctx{*ps, true, nullptr};
            aspp_forward(ctx, "aspp", x, cfg.atrous_rates, 4);
            ps->freeze();
        }
        auto wt = weighted({2, 4, 8, 8});
        auto leaves = ps->tensors();
        leaves.push_back(x);
        const auto rates = cfg.atrous_rates;
        probes.push_back({"aspp", leaves, [=](nn::KinkTrace* t) {
                              LayerContext ctx{*ps, true, t};
                              return nn::weighted_sum(aspp_forward(ctx, "aspp", x, rates, 4), wt);
                          }});
    }
    {
        auto x = nn::parameter(detail::random_tensor({2, 4, 5, 5}, rng, 2.0));
        std::vector<std::uint8_t> labels(2 * 25), mask(2 * 25);
        std::uniform_int_distribution<int> lab(0, 3), coin(0, 3);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            labels[i] = static_cast<std::uint8_t>(lab(rng));
            mask[i] = coin(rng) != 0;
        }
        probes.push_back({"cross_entropy", {x}, [=](nn::KinkTrace*) { return nn::masked_cross_entropy(x, labels, mask); }});
    }

    const auto ps = probe.shape;
    std::vector<std::uint8_t> labels(ps.n * ps.plane()), mask(ps.n * ps.plane());
    {
        std::uniform_int_distribution<int> lab(0, static_cast<int>(cfg.n_classes) - 1), coin(0, 3);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            labels[i] = static_cast<std::uint8_t>(lab(rng));
            mask[i] = coin(rng) != 0;
        }
    }
    for (auto arch : opt.architectures) {
        auto c = cfg;
        c.architecture = arch;
        auto model = std::make_shared<ModelParams>(ModelParams::initialize(c));
        auto x = nn::parameter(probe);
        auto leaves = model->tensors();
        leaves.push_back(x);
        probes.push_back({architecture_name(arch) + "_loss", leaves, [=](nn::KinkTrace* t) {
                              return nn::masked_cross_entropy(model_forward(*model, x, true, t), labels, mask);
                          }});
    }

    for (const auto& p : probes) report.entries.push_back(detail::run_probe(p, opt, rng));
    return report;
}

inline std::string format_gradcheck_report(const GradcheckReport& r) {
    std::string out = "layer,samples,kink_skips,max_rel_error,max_abs_error,passed\n";
    for (const auto& e : r.entries)
        out += e.layer + "," + std::to_string(e.samples) + "," + std::to_string(e.kink_skips) + "," +
               text::format_double(e.max_rel_error) + "," + text::format_double(e.max_abs_error) + "," +
               (e.passed ? "yes" : "no") + "\n";
    return out;
}

// --- persistence -------------------------------------------------------------------------------

inline constexpr std::string_view kModelManifestMagic = "urbanform-model 1";

/// Writes `dir/manifest.txt` (config, parameter names and shapes, buffers) and `dir/params.bin`
/// (little-endian float32 in manifest order).
inline void save_model(const ModelParams& params, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::string manifest(kModelManifestMagic);
    manifest += "\n";
    for (const auto& [k, v] : config_entries(params.config)) manifest += k + "=" + v + "\n";
    std::string payload;
    auto put = [&payload](double v) {
        if (!std::isfinite(v)) throw Error("refusing to save a non-finite model parameter");
        detail::put_u32(payload, detail::float_bits(v));
    };
    for (std::size_t i = 0; i < params.names().size(); ++i) {
        const auto& t = params.tensors()[i]->value;
        manifest += "param " + params.names()[i] + " " + std::to_string(t.shape.n) + " " + std::to_string(t.shape.c) + " " +
                    std::to_string(t.shape.h) + " " + std::to_string(t.shape.w) + "\n";
        for (double v : t.values) put(v);
    }
    for (const auto& name : params.norm_names()) {
        const auto& s = params.norm(name);
        manifest += "buffer " + name + " " + std::to_string(s.running_mean.size()) + "\n";
        for (double v : s.running_mean) put(v);
        for (double v : s.running_var) put(v);
    }
    text::write_file(dir + "/manifest.txt", manifest);
    text::write_file(dir + "/params.bin", payload);
}

inline ModelParams load_model(const std::string& dir) {
    const auto manifest = text::read_file(dir + "/manifest.txt");
    const auto payload = text::read_file(dir + "/params.bin");
    const auto lines = text::split(manifest, '\n');
    if (lines.empty() || text::trim(lines.front()) != kModelManifestMagic) throw Error("'" + dir + "' is not a saved model");
    ModelConfig cfg;
    struct Entry {
        bool is_param;
        std::string name;
        nn::Shape shape;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto line = std::string(text::trim(lines[i]));
        if (line.empty()) continue;
        if (line.starts_with("param ") || line.starts_with("buffer ")) {
            auto parts = text::split(line, ' ');
            const bool is_param = parts[0] == "param";
            if (parts.size() != (is_param ? 6u : 3u)) throw Error("malformed model manifest line: " + line);
            Entry e{is_param, parts[1], {}};
            if (is_param)
                e.shape = {static_cast<std::size_t>(text::to_int(parts[2], "dim")), static_cast<std::size_t>(text::to_int(parts[3], "dim")),
                           static_cast<std::size_t>(text::to_int(parts[4], "dim")), static_cast<std::size_t>(text::to_int(parts[5], "dim"))};
            else
                e.shape = {1, static_cast<std::size_t>(text::to_int(parts[2], "channels")), 1, 1};
            entries.push_back(std::move(e));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos || !apply_config_entry(cfg, line.substr(0, eq), line.substr(eq + 1)))
            throw Error("unknown model manifest line: " + line);
    }
    cfg.validate();
    ModelParams p(cfg);
    std::size_t off = 0;
    auto next = [&]() {
        if (off + 4 > payload.size()) throw FormatError("model payload truncated", off);
        const auto bits = detail::get_u32(reinterpret_cast<const unsigned char*>(payload.data() + off));
        off += 4;
        return static_cast<double>(std::bit_cast<float>(bits));
    };
    for (const auto& e : entries) {
        if (e.is_param) {
            nn::Tensor t(e.shape);
            for (auto& v : t.values) v = next();
            p.add(e.name, std::move(t));
        } else {
            auto& s = p.norm_state(e.name, e.shape.c);
            for (auto& v : s.running_mean) v = next();
            for (auto& v : s.running_var) v = next();
        }
    }
    if (off != payload.size()) throw FormatError("model payload has trailing bytes", off);
    p.freeze();
    if (p.names() != ModelParams::initialize(cfg).names()) throw Error("saved model does not match its architecture");
    if (!p.all_finite()) throw Error("saved model holds non-finite values");
    return p;
}

}  // namespace urbanform

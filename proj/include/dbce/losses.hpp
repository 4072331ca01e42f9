#ifndef DBCE_LOSSES_HPP
#define DBCE_LOSSES_HPP

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dbce/grid.hpp"
#include "dbce/morphology.hpp"
#include "dbce/weighting.hpp"

namespace dbce {

// Stable selector names: ce, bce, dice, dice_ce, dbce.
enum class LossKind { ce, bce, dice, dice_ce, dbce };

inline const char* to_string(LossKind kind) {
    switch (kind) {
        case LossKind::ce: return "ce";
        case LossKind::bce: return "bce";
        case LossKind::dice: return "dice";
        case LossKind::dice_ce: return "dice_ce";
        case LossKind::dbce: return "dbce";
    }
    return "?";
}

inline LossKind parse_loss_kind(const std::string& name) {
    if (name == "ce") return LossKind::ce;
    if (name == "bce") return LossKind::bce;
    if (name == "dice") return LossKind::dice;
    if (name == "dice_ce") return LossKind::dice_ce;
    if (name == "dbce") return LossKind::dbce;
    throw std::invalid_argument("unknown loss '" + name +
                                "' (valid: ce, bce, dice, dice_ce, dbce)");
}

struct LossValue {
    double total = 0.0;
    std::vector<std::pair<std::string, double>> terms; // optional breakdown
};

// Per-loss auxiliary inputs; only the fields the selected loss reads matter.
struct LossOptions {
    StructuringElement element = disk_element(0); // dbce dilation
    ClassWeights weights;                         // bce class weights
    double smooth = 1.0;                          // dice smoothing constant
    bool dbce_normalize_mean = false;             // divide the dilated loss by N
};

constexpr double kProbFloor = 1e-12; // clamp below before log

using GradMap = PlaneStack<double>; // d loss / d logit, per pixel per class

namespace detail {

inline void check_same_dims(const Dims& a, const Dims& b, const char* where) {
    if (!(a == b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch");
}

// Foreground classes with at least one ground-truth pixel; background only
// when no foreground class is present.
inline std::vector<int> present_foreground(const OneHotTensor& onehot) {
    const Dims dims = onehot.dims();
    std::vector<int> present;
    for (int c = 1; c < dims.classes; ++c) {
        const std::uint8_t* plane = onehot.plane(c);
        for (std::size_t i = 0; i < onehot.plane_size(); ++i) {
            if (plane[i]) {
                present.push_back(c);
                break;
            }
        }
    }
    if (present.empty()) present.push_back(0);
    return present;
}

} // namespace detail

// Per-pixel cross entropy -sum_c Y^c log P^c (the unweighted loss map).
inline FloatGrid ce_loss_map(const OneHotTensor& onehot, const ProbMap& probs) {
    detail::check_same_dims(onehot.dims(), probs.dims(), "ce_loss_map");
    const Dims dims = onehot.dims();
    FloatGrid map(dims.height, dims.width, 0.0);
    for (int c = 0; c < dims.classes; ++c) {
        const std::uint8_t* y = onehot.plane(c);
        const double* p = probs.plane(c);
        double* out = map.data();
        for (std::size_t i = 0; i < onehot.plane_size(); ++i)
            if (y[i]) out[i] -= std::log(std::max(p[i], kProbFloor));
    }
    return map;
}

// Mean of the CE loss map over all pixels.
inline LossValue ce_loss(const OneHotTensor& onehot, const ProbMap& probs) {
    const FloatGrid map = ce_loss_map(onehot, probs);
    double sum = 0.0;
    for (double v : map.values()) sum += v;
    return {sum / static_cast<double>(map.size()), {}};
}

// -(1/N) sum_c w_c sum_n y_n^c log p_n^c
inline LossValue balanced_ce_loss(const OneHotTensor& onehot, const ProbMap& probs,
                                  const ClassWeights& weights) {
    detail::check_same_dims(onehot.dims(), probs.dims(), "balanced_ce_loss");
    const Dims dims = onehot.dims();
    if (weights.classes() != dims.classes)
        throw std::invalid_argument("balanced_ce_loss: weight count != classes");
    for (double w : weights.values)
        if (!(w > 0.0)) throw std::invalid_argument("balanced_ce_loss: non-positive weight");
    double sum = 0.0;
    for (int c = 0; c < dims.classes; ++c) {
        const std::uint8_t* y = onehot.plane(c);
        const double* p = probs.plane(c);
        double class_sum = 0.0;
        for (std::size_t i = 0; i < onehot.plane_size(); ++i)
            if (y[i]) class_sum -= std::log(std::max(p[i], kProbFloor));
        sum += weights.values[c] * class_sum;
    }
    return {sum / static_cast<double>(dims.pixels()), {}};
}

// Hadamard product of a pixel weight map and the CE loss map, summed. This is
// the hook the dilated loss is assembled from; tests also drive it with
// synthetic maps.
inline LossValue dbce_loss_with_map(const OneHotTensor& onehot, const ProbMap& probs,
                                    const PixelWeightMap& weight_map,
                                    bool normalize_mean = false) {
    const FloatGrid map = ce_loss_map(onehot, probs);
    if (!map.same_shape(weight_map))
        throw std::invalid_argument("dbce_loss_with_map: weight map shape mismatch");
    double sum = 0.0;
    const double* w = weight_map.data();
    const double* m = map.data();
    for (std::size_t i = 0; i < map.size(); ++i) sum += w[i] * m[i];
    if (normalize_mean) sum /= static_cast<double>(map.size());
    return {sum, {}};
}

// Dilated balanced CE: an unnormalized weighted sum (no 1/N). The per-class
// mass bound sum W^c < 1 keeps its magnitude O(C).
inline LossValue dbce_loss(const OneHotTensor& onehot, const ProbMap& probs,
                           const StructuringElement& element, bool normalize_mean = false) {
    return dbce_loss_with_map(onehot, probs, pixel_weight_map(onehot, element),
                              normalize_mean);
}

// Soft Dice over the classes present in the sample's ground truth (background
// excluded unless nothing else is present).
inline LossValue soft_dice_loss(const OneHotTensor& onehot, const ProbMap& probs,
                                double smooth = 1.0) {
    detail::check_same_dims(onehot.dims(), probs.dims(), "soft_dice_loss");
    if (!(smooth > 0.0)) throw std::invalid_argument("soft_dice_loss: smooth must be > 0");
    const std::vector<int> present = detail::present_foreground(onehot);
    double sum = 0.0;
    for (int c : present) {
        const std::uint8_t* y = onehot.plane(c);
        const double* p = probs.plane(c);
        double inter = 0.0, psum = 0.0, ysum = 0.0;
        for (std::size_t i = 0; i < onehot.plane_size(); ++i) {
            psum += p[i];
            if (y[i]) {
                inter += p[i];
                ysum += 1.0;
            }
        }
        sum += 1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth);
    }
    return {sum / static_cast<double>(present.size()), {}};
}

// Equal-weight sum of soft Dice and CE.
inline LossValue dice_ce_loss(const OneHotTensor& onehot, const ProbMap& probs,
                              double smooth = 1.0) {
    const double dice = soft_dice_loss(onehot, probs, smooth).total;
    const double ce = ce_loss(onehot, probs).total;
    LossValue v;
    v.total = dice + ce;
    v.terms = {{"dice", dice}, {"ce", ce}};
    return v;
}

inline LossValue evaluate_loss(LossKind kind, const OneHotTensor& onehot, const ProbMap& probs,
                               const LossOptions& opts) {
    switch (kind) {
        case LossKind::ce: return ce_loss(onehot, probs);
        case LossKind::bce: return balanced_ce_loss(onehot, probs, opts.weights);
        case LossKind::dice: return soft_dice_loss(onehot, probs, opts.smooth);
        case LossKind::dice_ce: return dice_ce_loss(onehot, probs, opts.smooth);
        case LossKind::dbce:
            return dbce_loss(onehot, probs, opts.element, opts.dbce_normalize_mean);
    }
    throw std::invalid_argument("evaluate_loss: unknown loss selector");
}

// ---- analytic gradients with respect to logits ----
//
// The weight maps are constants with respect to predictions, so every
// CE-family gradient is a per-pixel scalar times (P - Y) through the fused
// softmax-CE form; no probability clamping is needed here.

namespace detail {

// grad(c,n) = scale(n) * (P(c,n) - Y(c,n))
inline GradMap scaled_softmax_ce_gradient(const OneHotTensor& onehot, const ProbMap& probs,
                                          const FloatGrid& scale) {
    const Dims dims = onehot.dims();
    GradMap grad(dims);
    for (int c = 0; c < dims.classes; ++c) {
        const std::uint8_t* y = onehot.plane(c);
        const double* p = probs.plane(c);
        const double* s = scale.data();
        double* g = grad.plane(c);
        for (std::size_t i = 0; i < onehot.plane_size(); ++i)
            g[i] = s[i] * (p[i] - static_cast<double>(y[i]));
    }
    return grad;
}

inline FloatGrid constant_grid(const Dims& dims, double value) {
    return FloatGrid(dims.height, dims.width, value);
}

} // namespace detail

inline GradMap ce_gradient_from_probs(const OneHotTensor& onehot, const ProbMap& probs) {
    detail::check_same_dims(onehot.dims(), probs.dims(), "ce_gradient");
    const double inv_n = 1.0 / static_cast<double>(onehot.dims().pixels());
    return detail::scaled_softmax_ce_gradient(
        onehot, probs, detail::constant_grid(onehot.dims(), inv_n));
}

inline GradMap balanced_ce_gradient_from_probs(const OneHotTensor& onehot, const ProbMap& probs,
                                               const ClassWeights& weights) {
    detail::check_same_dims(onehot.dims(), probs.dims(), "balanced_ce_gradient");
    const Dims dims = onehot.dims();
    if (weights.classes() != dims.classes)
        throw std::invalid_argument("balanced_ce_gradient: weight count != classes");
    // per-pixel scale = w_{true class} / N
    FloatGrid scale(dims.height, dims.width, 0.0);
    const double inv_n = 1.0 / static_cast<double>(dims.pixels());
    for (int c = 0; c < dims.classes; ++c) {
        const std::uint8_t* y = onehot.plane(c);
        double* s = scale.data();
        for (std::size_t i = 0; i < onehot.plane_size(); ++i)
            if (y[i]) s[i] = weights.values[c] * inv_n;
    }
    return detail::scaled_softmax_ce_gradient(onehot, probs, scale);
}

inline GradMap dbce_gradient_with_map(const OneHotTensor& onehot, const ProbMap& probs,
                                      const PixelWeightMap& weight_map,
                                      bool normalize_mean = false) {
    detail::check_same_dims(onehot.dims(), probs.dims(), "dbce_gradient");
    FloatGrid scale = weight_map;
    if (normalize_mean) {
        const double inv_n = 1.0 / static_cast<double>(onehot.dims().pixels());
        for (double& v : scale.values()) v *= inv_n;
    }
    return detail::scaled_softmax_ce_gradient(onehot, probs, scale);
}

inline GradMap dbce_gradient_from_probs(const OneHotTensor& onehot, const ProbMap& probs,
                                        const StructuringElement& element,
                                        bool normalize_mean = false) {
    return dbce_gradient_with_map(onehot, probs, pixel_weight_map(onehot, element),
                                  normalize_mean);
}

// Derivative of the soft Dice ratio through softmax.
inline GradMap soft_dice_gradient_from_probs(const OneHotTensor& onehot, const ProbMap& probs,
                                             double smooth = 1.0) {
    detail::check_same_dims(onehot.dims(), probs.dims(), "soft_dice_gradient");
    if (!(smooth > 0.0)) throw std::invalid_argument("soft_dice_gradient: smooth must be > 0");
    const Dims dims = onehot.dims();
    const std::vector<int> present = detail::present_foreground(onehot);
    const double inv_k = 1.0 / static_cast<double>(present.size());

    // dL/dP, nonzero only on the planes entering the Dice mean
    PlaneStack<double> dp(dims, 0.0);
    for (int c : present) {
        const std::uint8_t* y = onehot.plane(c);
        const double* p = probs.plane(c);
        double inter = 0.0, psum = 0.0, ysum = 0.0;
        for (std::size_t i = 0; i < onehot.plane_size(); ++i) {
            psum += p[i];
            if (y[i]) {
                inter += p[i];
                ysum += 1.0;
            }
        }
        const double numer = 2.0 * inter + smooth;
        const double denom = psum + ysum + smooth;
        double* g = dp.plane(c);
        for (std::size_t i = 0; i < onehot.plane_size(); ++i)
            g[i] = inv_k * (numer / (denom * denom) - (y[i] ? 2.0 / denom : 0.0));
    }

    // chain rule through softmax: dL/dz_k = P_k (g_k - sum_c g_c P_c)
    GradMap grad(dims);
    for (int y = 0; y < dims.height; ++y) {
        for (int x = 0; x < dims.width; ++x) {
            double dot = 0.0;
            for (int c = 0; c < dims.classes; ++c) dot += dp.at(c, y, x) * probs.at(c, y, x);
            for (int c = 0; c < dims.classes; ++c)
                grad.at(c, y, x) = probs.at(c, y, x) * (dp.at(c, y, x) - dot);
        }
    }
    return grad;
}

inline GradMap dice_ce_gradient_from_probs(const OneHotTensor& onehot, const ProbMap& probs,
                                           double smooth = 1.0) {
    GradMap grad = soft_dice_gradient_from_probs(onehot, probs, smooth);
    const GradMap ce = ce_gradient_from_probs(onehot, probs);
    for (std::size_t i = 0; i < grad.size(); ++i) grad.data()[i] += ce.data()[i];
    return grad;
}

inline GradMap loss_gradient_from_probs(LossKind kind, const OneHotTensor& onehot,
                                        const ProbMap& probs, const LossOptions& opts) {
    switch (kind) {
        case LossKind::ce: return ce_gradient_from_probs(onehot, probs);
        case LossKind::bce: return balanced_ce_gradient_from_probs(onehot, probs, opts.weights);
        case LossKind::dice: return soft_dice_gradient_from_probs(onehot, probs, opts.smooth);
        case LossKind::dice_ce: return dice_ce_gradient_from_probs(onehot, probs, opts.smooth);
        case LossKind::dbce:
            return dbce_gradient_from_probs(onehot, probs, opts.element,
                                            opts.dbce_normalize_mean);
    }
    throw std::invalid_argument("loss_gradient: unknown loss selector");
}

// Exact gradient of the selected loss with respect to logits.
inline GradMap loss_gradient(LossKind kind, const OneHotTensor& onehot, const LogitMap& logits,
                             const LossOptions& opts) {
    return loss_gradient_from_probs(kind, onehot, softmax(logits), opts);
}

} // namespace dbce

#endif // DBCE_LOSSES_HPP

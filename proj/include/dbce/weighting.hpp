#ifndef DBCE_WEIGHTING_HPP
#define DBCE_WEIGHTING_HPP

#include <span>
#include <string>
#include <vector>

#include "dbce/grid.hpp"
#include "dbce/morphology.hpp"

namespace dbce {

using ClassWeightMap = FloatGrid; // 0 off-support, 1/(1 + dilated area) on it
using PixelWeightMap = FloatGrid; // pointwise max of the class weight maps

// Dataset-level balancing weights, one per class.
struct ClassWeights {
    std::vector<double> values;        // w_c
    std::vector<std::uint8_t> absent;  // class never seen; fallback weight applied

    int classes() const { return static_cast<int>(values.size()); }
};

// Dilated binary plane of class c.
inline BinaryMask dilated_class_mask(const OneHotTensor& onehot, int c,
                                     const StructuringElement& element) {
    const Dims dims = onehot.dims();
    if (c < 0 || c >= dims.classes)
        throw std::out_of_range("class index " + std::to_string(c) + " out of range for C=" +
                                std::to_string(dims.classes));
    BinaryMask plane(dims.height, dims.width);
    const std::uint8_t* src = onehot.plane(c);
    std::copy(src, src + plane.size(), plane.data());
    return dilate(plane, element);
}

// Weighted dilated mask of class c: the dilated plane divided by one plus its
// area. Identically zero when the class is absent (the "1 +" guard keeps the
// division defined).
inline ClassWeightMap class_weight_map(const OneHotTensor& onehot, int c,
                                       const StructuringElement& element) {
    const BinaryMask dilated = dilated_class_mask(onehot, c, element);
    long long area = 0;
    for (std::uint8_t b : dilated.values()) area += b;
    ClassWeightMap map(dilated.height(), dilated.width(), 0.0);
    if (area == 0) return map;
    const double w = 1.0 / (1.0 + static_cast<double>(area));
    for (int y = 0; y < dilated.height(); ++y)
        for (int x = 0; x < dilated.width(); ++x)
            if (dilated(y, x)) map(y, x) = w;
    return map;
}

// Pixel-wise loss weight map M: pointwise maximum of the class weight maps.
// Strictly positive everywhere when the one-hot input partitions the grid.
inline PixelWeightMap pixel_weight_map(const OneHotTensor& onehot,
                                       const StructuringElement& element) {
    const Dims dims = onehot.dims();
    PixelWeightMap m(dims.height, dims.width, 0.0);
    for (int c = 0; c < dims.classes; ++c) {
        const ClassWeightMap wc = class_weight_map(onehot, c, element);
        for (int y = 0; y < dims.height; ++y)
            for (int x = 0; x < dims.width; ++x)
                if (wc(y, x) > m(y, x)) m(y, x) = wc(y, x);
    }
    return m;
}

// Inverse class frequency over a set of masks: w_c = total pixels / pixels of
// class c. A class absent from every mask gets the weight it would have with
// a single pixel (w_c = total pixels) and is flagged.
inline ClassWeights dataset_class_weights(std::span<const LabelMask> masks, int classes) {
    if (masks.empty())
        throw std::invalid_argument("dataset_class_weights: empty mask list");
    if (classes < 2)
        throw std::invalid_argument("dataset_class_weights: classes must be >= 2");
    std::vector<long long> counts(classes, 0);
    long long total = 0;
    for (const LabelMask& mask : masks) {
        for (std::uint8_t label : mask.values()) {
            if (label >= classes)
                throw std::invalid_argument("dataset_class_weights: label " +
                                            std::to_string(label) + " out of range");
            ++counts[label];
        }
        total += static_cast<long long>(mask.size());
    }
    ClassWeights w;
    w.values.resize(classes);
    w.absent.resize(classes, 0);
    for (int c = 0; c < classes; ++c) {
        if (counts[c] == 0) {
            w.values[c] = static_cast<double>(total); // as if one pixel
            w.absent[c] = 1;
        } else {
            w.values[c] = static_cast<double>(total) / static_cast<double>(counts[c]);
        }
    }
    return w;
}

inline ClassWeights per_sample_class_weights(const LabelMask& mask, int classes) {
    return dataset_class_weights(std::span<const LabelMask>(&mask, 1), classes);
}

// Per-sample weights w_c = N / (1 + pixels of class c). With these weights
// balanced CE equals the dilated loss at radius 0 exactly, since both reduce
// to dividing each pixel's CE term by one plus its own class's area.
inline ClassWeights dilation_aligned_weights(const LabelMask& mask, int classes) {
    if (classes < 2)
        throw std::invalid_argument("dilation_aligned_weights: classes must be >= 2");
    std::vector<long long> counts(classes, 0);
    for (std::uint8_t label : mask.values()) {
        if (label >= classes)
            throw std::invalid_argument("dilation_aligned_weights: label " +
                                        std::to_string(label) + " out of range");
        ++counts[label];
    }
    ClassWeights w;
    w.values.resize(classes);
    w.absent.resize(classes, 0);
    const double total = static_cast<double>(mask.size());
    for (int c = 0; c < classes; ++c) {
        w.values[c] = total / (1.0 + static_cast<double>(counts[c]));
        w.absent[c] = counts[c] == 0 ? 1 : 0;
    }
    return w;
}

} // namespace dbce

#endif // DBCE_WEIGHTING_HPP

#ifndef DBCE_GRID_HPP
#define DBCE_GRID_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dbce {

// Grid extent plus class count. Class 0 is background and always counts
// towards `classes`.
struct Dims {
    int height = 0;
    int width = 0;
    int classes = 0;

    long long pixels() const { return static_cast<long long>(height) * width; }

    void validate() const {
        if (height < 1 || width < 1)
            throw std::invalid_argument("Dims: height and width must be >= 1");
        if (classes < 2)
            throw std::invalid_argument("Dims: classes must be >= 2 (background included)");
    }

    friend bool operator==(const Dims&, const Dims&) = default;
};

// Dense row-major H x W grid, origin top-left, (row, col) indexing.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
        if (height < 1 || width < 1)
            throw std::invalid_argument("Grid: height and width must be >= 1");
        data_.assign(static_cast<std::size_t>(height) * width, fill);
    }

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    const T& operator()(int y, int x) const {
        return data_[static_cast<std::size_t>(y) * width_ + x];
    }

    T* row(int y) { return data_.data() + static_cast<std::size_t>(y) * width_; }
    const T* row(int y) const { return data_.data() + static_cast<std::size_t>(y) * width_; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() & { return data_; }
    std::span<const T> values() const& { return data_; }
    // spans over temporaries dangle
    std::span<T> values() && = delete;
    std::span<const T> values() const&& = delete;

    bool same_shape(const Grid& other) const {
        return height_ == other.height_ && width_ == other.width_;
    }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<T> data_;
};

using FloatGrid = Grid<double>;   // finite reals (loss maps, weight maps, images)
using LabelMask = Grid<std::uint8_t>;  // class IDs in [0, C)
using BinaryMask = Grid<std::uint8_t>; // entries in {0, 1}

// C stacked H x W planes, contiguous per plane.
template <typename T>
class PlaneStack {
public:
    PlaneStack() = default;
    explicit PlaneStack(Dims dims, T fill = T{}) : dims_(dims) {
        dims.validate();
        data_.assign(static_cast<std::size_t>(dims.classes) * dims.pixels(), fill);
    }

    const Dims& dims() const { return dims_; }
    std::size_t plane_size() const { return static_cast<std::size_t>(dims_.pixels()); }

    T& at(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * dims_.height + y) * dims_.width + x];
    }
    const T& at(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * dims_.height + y) * dims_.width + x];
    }

    T* plane(int c) { return data_.data() + static_cast<std::size_t>(c) * plane_size(); }
    const T* plane(int c) const {
        return data_.data() + static_cast<std::size_t>(c) * plane_size();
    }

    Grid<T> plane_grid(int c) const {
        Grid<T> g(dims_.height, dims_.width);
        std::copy(plane(c), plane(c) + plane_size(), g.data());
        return g;
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::size_t size() const { return data_.size(); }

    friend bool operator==(const PlaneStack&, const PlaneStack&) = default;

private:
    Dims dims_{};
    std::vector<T> data_;
};

using OneHotTensor = PlaneStack<std::uint8_t>; // exactly one plane set per pixel
using ProbMap = PlaneStack<double>;            // per-pixel planes sum to 1
using LogitMap = PlaneStack<double>;           // unbounded finite pre-softmax scores

// Per-class binary planes of a label mask; plane c is 1 where mask == c.
inline OneHotTensor one_hot(const LabelMask& mask, int classes) {
    Dims dims{mask.height(), mask.width(), classes};
    dims.validate();
    OneHotTensor out(dims);
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            const int label = mask(y, x);
            if (label >= classes)
                throw std::invalid_argument("one_hot: label " + std::to_string(label) +
                                            " at (" + std::to_string(y) + ", " +
                                            std::to_string(x) + ") out of range for classes=" +
                                            std::to_string(classes));
            out.at(label, y, x) = 1;
        }
    }
    return out;
}

// Numerically stable per-pixel softmax (max-subtraction form).
inline ProbMap softmax(const LogitMap& logits) {
    const Dims dims = logits.dims();
    ProbMap probs(dims);
    const int C = dims.classes;
    for (int y = 0; y < dims.height; ++y) {
        for (int x = 0; x < dims.width; ++x) {
            double mx = logits.at(0, y, x);
            for (int c = 1; c < C; ++c) mx = std::max(mx, logits.at(c, y, x));
            if (!std::isfinite(mx))
                throw std::invalid_argument("softmax: non-finite logit at (" +
                                            std::to_string(y) + ", " + std::to_string(x) + ")");
            double sum = 0.0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(logits.at(c, y, x) - mx);
                probs.at(c, y, x) = e;
                sum += e;
            }
            for (int c = 0; c < C; ++c) probs.at(c, y, x) /= sum;
        }
    }
    return probs;
}

// Per-pixel index of the maximal plane; ties break toward the lowest class
// index (deterministic, background-favoring).
inline LabelMask argmax_labels(const ProbMap& probs) {
    const Dims dims = probs.dims();
    LabelMask out(dims.height, dims.width);
    for (int y = 0; y < dims.height; ++y) {
        for (int x = 0; x < dims.width; ++x) {
            int best = 0;
            double best_p = probs.at(0, y, x);
            for (int c = 1; c < dims.classes; ++c) {
                const double p = probs.at(c, y, x);
                if (p > best_p) {
                    best_p = p;
                    best = c;
                }
            }
            out(y, x) = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

// Checks that every pixel's planes sum to 1 within `tol`.
inline bool probmap_valid(const ProbMap& probs, double tol = 1e-6) {
    const Dims dims = probs.dims();
    for (int y = 0; y < dims.height; ++y) {
        for (int x = 0; x < dims.width; ++x) {
            double sum = 0.0;
            for (int c = 0; c < dims.classes; ++c) {
                const double p = probs.at(c, y, x);
                if (!(p >= 0.0 && p <= 1.0 + tol)) return false;
                sum += p;
            }
            if (std::abs(sum - 1.0) > tol) return false;
        }
    }
    return true;
}

} // namespace dbce

#endif // DBCE_GRID_HPP

#ifndef DBCE_MORPHOLOGY_HPP
#define DBCE_MORPHOLOGY_HPP

#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "dbce/grid.hpp"

namespace dbce {

// Discrete Euclidean disk: offsets {(dy,dx) : dy^2 + dx^2 <= radius^2}.
// `disk_exact` marks elements built by disk_element(); dilate() then may use
// the distance-transform fast path, which is exactly equivalent.
struct StructuringElement {
    int radius = 0;
    std::vector<std::pair<int, int>> offsets;
    bool disk_exact = false;
};

inline StructuringElement disk_element(int radius) {
    if (radius < 0) throw std::invalid_argument("disk_element: radius must be >= 0");
    StructuringElement el;
    el.radius = radius;
    el.disk_exact = true;
    const long long r2 = static_cast<long long>(radius) * radius;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (static_cast<long long>(dy) * dy + static_cast<long long>(dx) * dx <= r2)
                el.offsets.emplace_back(dy, dx);
    return el;
}

namespace detail {

constexpr double kEdtInf = 1e20;

// 1-D squared distance transform, lower envelope of parabolas
// (Felzenszwalb & Huttenlocher).
inline void sedt_1d(const double* f, double* d, int n, std::vector<int>& v,
                    std::vector<double>& z) {
    int k = 0;
    v[0] = 0;
    z[0] = -kEdtInf;
    z[1] = kEdtInf;
    for (int q = 1; q < n; ++q) {
        double s = ((f[q] + static_cast<double>(q) * q) -
                    (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                   (2.0 * q - 2.0 * v[k]);
        while (s <= z[k]) {
            --k;
            s = ((f[q] + static_cast<double>(q) * q) -
                 (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                (2.0 * q - 2.0 * v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kEdtInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

} // namespace detail

// Squared Euclidean distance to the nearest set pixel; detail::kEdtInf where
// the mask is empty. Integer-valued squared distances, exact in double.
inline FloatGrid squared_distance_transform(const BinaryMask& mask) {
    const int H = mask.height(), W = mask.width();
    FloatGrid dist(H, W);
    // columns
    std::vector<double> f(std::max(H, W)), d(std::max(H, W));
    std::vector<int> v(std::max(H, W));
    std::vector<double> z(std::max(H, W) + 1);
    for (int x = 0; x < W; ++x) {
        for (int y = 0; y < H; ++y) f[y] = mask(y, x) ? 0.0 : detail::kEdtInf;
        detail::sedt_1d(f.data(), d.data(), H, v, z);
        for (int y = 0; y < H; ++y) dist(y, x) = d[y];
    }
    // rows
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) f[x] = dist(y, x);
        detail::sedt_1d(f.data(), d.data(), W, v, z);
        for (int x = 0; x < W; ++x) dist(y, x) = d[x];
    }
    return dist;
}

// Binary dilation, offsets clipped at the image border (no wraparound, no
// padding); the output never extends outside the grid.
inline BinaryMask dilate(const BinaryMask& mask, const StructuringElement& element) {
    const int H = mask.height(), W = mask.width();
    if (element.disk_exact) {
        // dy^2+dx^2 <= R^2 membership == squared EDT threshold at R^2
        const FloatGrid dist = squared_distance_transform(mask);
        const double r2 = static_cast<double>(element.radius) * element.radius;
        BinaryMask out(H, W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out(y, x) = dist(y, x) <= r2 ? 1 : 0;
        return out;
    }
    BinaryMask out(H, W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            if (!mask(y, x)) continue;
            for (const auto& [dy, dx] : element.offsets) {
                const int ny = y + dy, nx = x + dx;
                if (ny >= 0 && ny < H && nx >= 0 && nx < W) out(ny, nx) = 1;
            }
        }
    }
    return out;
}

} // namespace dbce

#endif // DBCE_MORPHOLOGY_HPP

#ifndef DBCE_IO_HPP
#define DBCE_IO_HPP

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "dbce/grid.hpp"

namespace dbce {

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

// Next whitespace-delimited token, skipping '#' comment lines per the netpbm
// convention.
inline std::string pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            // skip
        } else {
            break;
        }
        c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    if (tok.empty()) throw io_error(path + ": malformed header (unexpected end of file)");
    return tok;
}

inline int pnm_int(std::istream& in, const std::string& path, const char* what) {
    const std::string tok = pnm_token(in, path);
    try {
        std::size_t pos = 0;
        const int v = std::stoi(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw io_error(path + ": malformed header (bad " + std::string(what) + " '" + tok + "')");
    }
}

inline std::uint32_t load_le32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void store_le32(std::uint32_t v, unsigned char* p) {
    p[0] = static_cast<unsigned char>(v);
    p[1] = static_cast<unsigned char>(v >> 8);
    p[2] = static_cast<unsigned char>(v >> 16);
    p[3] = static_cast<unsigned char>(v >> 24);
}

} // namespace detail

// Binary "P5" portable graymap; pixel value = class ID, maxval <= 255.
inline LabelMask read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(path + ": cannot open for reading");
    const std::string magic = detail::pnm_token(in, path);
    if (magic != "P5")
        throw io_error(path + ": unsupported format '" + magic + "' (expected binary P5)");
    const int width = detail::pnm_int(in, path, "width");
    const int height = detail::pnm_int(in, path, "height");
    const int maxval = detail::pnm_int(in, path, "maxval");
    if (width < 1 || height < 1)
        throw io_error(path + ": malformed header (non-positive dimensions)");
    if (maxval < 1 || maxval > 255)
        throw io_error(path + ": maxval " + std::to_string(maxval) + " out of range (must be <= 255)");
    // exactly one whitespace byte separates header and payload; pnm_token
    // consumed it already
    LabelMask mask(height, width);
    in.read(reinterpret_cast<char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
    if (static_cast<std::size_t>(in.gcount()) != mask.size())
        throw io_error(path + ": truncated payload (" + std::to_string(in.gcount()) + " of " +
                       std::to_string(mask.size()) + " bytes)");
    return mask;
}

// Minimal header plus raw bytes, row-major top-to-bottom.
inline void write_pgm(const LabelMask& mask, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(path + ": cannot open for writing");
    out << "P5\n" << mask.width() << " " << mask.height() << "\n255\n";
    out.write(reinterpret_cast<const char*>(mask.data()),
              static_cast<std::streamsize>(mask.size()));
    if (!out) throw io_error(path + ": write failed");
}

// Grayscale "Pf" portable floatmap, little-endian (scale line "-1.0"),
// bottom-to-top row order on disk per the PFM convention.
inline FloatGrid read_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(path + ": cannot open for reading");
    const std::string magic = detail::pnm_token(in, path);
    if (magic == "PF")
        throw io_error(path + ": color PFM unsupported (expected grayscale Pf)");
    if (magic != "Pf")
        throw io_error(path + ": unsupported format '" + magic + "' (expected grayscale Pf)");
    const int width = detail::pnm_int(in, path, "width");
    const int height = detail::pnm_int(in, path, "height");
    const std::string scale_tok = detail::pnm_token(in, path);
    double scale = 0.0;
    try {
        scale = std::stod(scale_tok);
    } catch (const std::exception&) {
        throw io_error(path + ": malformed header (bad scale '" + scale_tok + "')");
    }
    if (scale >= 0.0)
        throw io_error(path + ": big-endian PFM unsupported (scale must be negative)");
    if (width < 1 || height < 1)
        throw io_error(path + ": malformed header (non-positive dimensions)");

    const std::size_t n = static_cast<std::size_t>(width) * height;
    std::vector<unsigned char> raw(n * 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw io_error(path + ": truncated payload (" + std::to_string(in.gcount()) + " of " +
                       std::to_string(raw.size()) + " bytes)");

    FloatGrid grid(height, width);
    for (int y = 0; y < height; ++y) {
        const int file_row = height - 1 - y; // bottom-to-top on disk
        const unsigned char* src = raw.data() + static_cast<std::size_t>(file_row) * width * 4;
        for (int x = 0; x < width; ++x)
            grid(y, x) = std::bit_cast<float>(detail::load_le32(src + 4 * x));
    }
    return grid;
}

inline void write_pfm(const FloatGrid& grid, const std::string& path) {
    for (int y = 0; y < grid.height(); ++y)
        for (int x = 0; x < grid.width(); ++x)
            if (!std::isfinite(grid(y, x)))
                throw io_error(path + ": non-finite value at (" + std::to_string(y) + ", " +
                               std::to_string(x) + ")");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(path + ": cannot open for writing");
    out << "Pf\n" << grid.width() << " " << grid.height() << "\n-1.0\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(grid.width()) * 4);
    for (int y = grid.height() - 1; y >= 0; --y) {
        for (int x = 0; x < grid.width(); ++x) {
            // single precision on disk; the one documented precision loss
            const float f = static_cast<float>(grid(y, x));
            detail::store_le32(std::bit_cast<std::uint32_t>(f), row.data() + 4 * x);
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw io_error(path + ": write failed");
}

} // namespace dbce

#endif // DBCE_IO_HPP

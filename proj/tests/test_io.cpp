#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "dbce/io.hpp"
#include "dbce/rng.hpp"

using namespace dbce;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("dbce_io_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST(Pgm, RoundTrip) {
    Rng rng(1);
    LabelMask mask(16, 16);
    for (auto& v : mask.values()) v = static_cast<std::uint8_t>(rng.uniform_int(256));
    const std::string path = tmp_path("roundtrip.pgm");
    write_pgm(mask, path);
    EXPECT_EQ(read_pgm(path), mask);
}

TEST(Pgm, AsciiFormatRejected) {
    const std::string path = tmp_path("ascii.pgm");
    spit(path, "P2\n2 2\n255\n0 1 2 3\n");
    try {
        read_pgm(path);
        FAIL() << "expected io_error";
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported format"), std::string::npos);
    }
}

TEST(Pgm, TruncatedPayloadRejected) {
    const std::string path = tmp_path("short.pgm");
    spit(path, std::string("P5\n4 4\n255\n") + "abc");
    try {
        read_pgm(path);
        FAIL() << "expected io_error";
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }
}

TEST(Pgm, MaxvalOutOfRangeRejected) {
    const std::string path = tmp_path("maxval.pgm");
    spit(path, "P5\n1 1\n65535\n\0\0");
    try {
        read_pgm(path);
        FAIL() << "expected io_error";
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("maxval"), std::string::npos);
    }
}

TEST(Pgm, HeaderCommentsSkipped) {
    const std::string path = tmp_path("comments.pgm");
    std::string bytes = "P5\n# a comment\n2 # trailing\n2\n255\n";
    bytes += '\x01'; bytes += '\x02'; bytes += '\x03'; bytes += '\x04';
    spit(path, bytes);
    const LabelMask mask = read_pgm(path);
    EXPECT_EQ(mask(0, 0), 1);
    EXPECT_EQ(mask(1, 1), 4);
}

TEST(Pgm, MissingFileRejected) {
    EXPECT_THROW(read_pgm(tmp_path("does_not_exist.pgm")), io_error);
}

TEST(Pfm, RoundTripIsBitExactForFloatValues) {
    FloatGrid grid(2, 3);
    grid(0, 0) = static_cast<double>(0.1f);
    grid(0, 1) = static_cast<double>(1e-9f);
    grid(0, 2) = static_cast<double>(1e9f);
    grid(1, 0) = -static_cast<double>(0.25f);
    grid(1, 1) = 0.0;
    grid(1, 2) = static_cast<double>(3.14159f);
    const std::string path = tmp_path("roundtrip.pfm");
    write_pfm(grid, path);
    const FloatGrid back = read_pfm(path);
    ASSERT_TRUE(back.same_shape(grid));
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x)
            EXPECT_EQ(std::memcmp(&back(y, x), &grid(y, x), sizeof(double)), 0);
}

TEST(Pfm, AllZeroGridPayload) {
    FloatGrid grid(4, 4, 0.0);
    const std::string path = tmp_path("zeros.pfm");
    write_pfm(grid, path);
    const std::string bytes = slurp(path);
    const std::string header = "Pf\n4 4\n-1.0\n";
    ASSERT_EQ(bytes.size(), header.size() + 16 * 4);
    EXPECT_EQ(bytes.substr(0, header.size()), header);
    for (std::size_t i = header.size(); i < bytes.size(); ++i) EXPECT_EQ(bytes[i], '\0');
}

TEST(Pfm, BottomToTopRowOrderOnDisk) {
    FloatGrid grid(2, 1);
    grid(0, 0) = 1.0; // top row
    grid(1, 0) = 2.0; // bottom row
    const std::string path = tmp_path("roworder.pfm");
    write_pfm(grid, path);
    const std::string bytes = slurp(path);
    const std::string header = "Pf\n1 2\n-1.0\n";
    float first;
    std::memcpy(&first, bytes.data() + header.size(), 4);
    EXPECT_EQ(first, 2.0f); // bottom row first
    EXPECT_EQ(read_pfm(path), grid);
}

TEST(Pfm, NonFiniteWriteRejected) {
    FloatGrid grid(1, 2, 0.0);
    grid(0, 1) = std::nan("");
    EXPECT_THROW(write_pfm(grid, tmp_path("nan.pfm")), io_error);
}

TEST(Pfm, ColorFormatRejected) {
    const std::string path = tmp_path("color.pfm");
    spit(path, "PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0");
    try {
        read_pfm(path);
        FAIL() << "expected io_error";
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("color"), std::string::npos);
    }
}

TEST(Pfm, BigEndianRejected) {
    const std::string path = tmp_path("bigendian.pfm");
    spit(path, std::string("Pf\n1 1\n1.0\n") + std::string(4, '\0'));
    EXPECT_THROW(read_pfm(path), io_error);
}

TEST(Pfm, TruncatedPayloadRejected) {
    const std::string path = tmp_path("short.pfm");
    spit(path, std::string("Pf\n2 2\n-1.0\n") + std::string(7, '\0'));
    try {
        read_pfm(path);
        FAIL() << "expected io_error";
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }
}

TEST(Pfm, RandomRoundTripProperty) {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = rng.uniform_int(1, 8), w = rng.uniform_int(1, 8);
        FloatGrid grid(h, w);
        for (auto& v : grid.values())
            v = static_cast<double>(static_cast<float>(rng.uniform(-1e6, 1e6)));
        const std::string path = tmp_path("random.pfm");
        write_pfm(grid, path);
        ASSERT_EQ(read_pfm(path), grid);
    }
}

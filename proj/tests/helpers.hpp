#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "conealign/matrix.hpp"
#include "oracles.hpp"

namespace testutil {

inline conealign::Matrix to_matrix(const oracle::Mat& m) {
    conealign::Matrix out(m.size(), m.empty() ? 0 : m[0].size());
    for (std::size_t r = 0; r < m.size(); ++r)
        for (std::size_t c = 0; c < m[r].size(); ++c) out(r, c) = m[r][c];
    return out;
}

inline oracle::Mat to_mat(const conealign::Matrix& m) {
    oracle::Mat out(m.rows, oracle::Vec(m.cols));
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out[r][c] = m(r, c);
    return out;
}

inline oracle::Vec column(const conealign::Matrix& m, std::size_t c) {
    oracle::Vec v(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) v[r] = m(r, c);
    return v;
}

inline conealign::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    return to_matrix(oracle::random_matrix(r, c, seed));
}

/// Nonnegative matrix with roughly `density` nonzero entries.
inline conealign::Matrix random_sparse_codes(std::size_t r, std::size_t c, double density, std::uint64_t seed) {
    std::mt19937_64 g(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    conealign::Matrix m(r, c);
    for (auto& x : m.data) x = u(g) < density ? u(g) + 0.1 : 0.0;
    return m;
}

inline conealign::Matrix unit_rows(conealign::Matrix m) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double n = conealign::norm2(m.row(r));
        for (auto& x : m.row(r)) x /= n;
    }
    return m;
}

/// Fresh empty directory under the system temp dir, named after the test.
inline std::filesystem::path scratch_dir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = std::string(info->test_suite_name()) + "_" + info->name();
    for (auto& ch : name)
        if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
    const auto dir = std::filesystem::temp_directory_path() / "conealign_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testutil

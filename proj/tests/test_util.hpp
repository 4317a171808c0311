#ifndef PICOSAM_TEST_UTIL_HPP
#define PICOSAM_TEST_UTIL_HPP

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

#include <gtest/gtest.h>

#include "picosam/rng.hpp"
#include "picosam/tensor.hpp"

namespace picosam::test {

template <class T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline Tensor<float> random_mask(const Shape& shape, Rng& rng, double p = 0.5) {
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = rng.uniform() < p ? 1.0f : 0.0f;
    return t;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <class T>
double max_abs(const Tensor<T>& a) {
    double m = 0;
    for (auto v : a.data()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        std::string tag = info ? std::string(info->test_suite_name()) + "_" + info->name() : "picosam";
        path_ = std::filesystem::temp_directory_path() /
                ("picosam_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

} // namespace picosam::test

#endif

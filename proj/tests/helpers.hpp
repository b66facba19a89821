#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "slf/common.hpp"
#include "slf/tensor.hpp"

namespace slf::test {

// Relative error with an absolute floor: differences below the floor are
// judged on the absolute scale, which keeps finite-difference noise from
// inflating ratios of near-zero gradients.
inline double rel_err(double a, double b, double floor_ = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_});
}

// Central finite difference of a scalar function of one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline slf::Tensor random_tensor(slf::Rng& rng,
                                 std::vector<std::size_t> shape,
                                 double lo = -1.0, double hi = 1.0) {
  slf::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline bool bitwise_equal(const slf::Tensor& a, const slf::Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Scratch directory unique to a test, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("slf_test_" + tag + "_" + std::to_string(counter_++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  static inline int counter_ = 0;
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

}  // namespace slf::test

#pragma once

#include "lift3d/geometry.hpp"
#include "lift3d/nn/tensor.hpp"
#include "lift3d/rng.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

namespace support {

using lift3d::Rng;
using lift3d::geometry::Points;
using lift3d::nn::Matrix;
using lift3d::nn::Tensor;

// Coordinates on a 1/8 lattice make squared distances exact, so ties are
// frequent and compare equal in any summation order.
inline Points lattice_cloud(Rng& rng, int n) {
  Points p(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) p(i, c) = static_cast<double>(static_cast<int>(rng.below(17)) - 8) / 8.0;
  }
  return p;
}

inline Points uniform_cloud(Rng& rng, int n) {
  Points p(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) p(i, c) = rng.uniform(-1.0, 1.0);
  }
  return p;
}

inline double sq(const Points& a, int i, const Points& b, int j) {
  const double dx = a(i, 0) - b(j, 0);
  const double dy = a(i, 1) - b(j, 1);
  const double dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}

// Recomputes every min-distance from scratch at each step. Selected indices
// are never picked again, which only matters for duplicate points.
inline std::vector<int> brute_fps(const Points& p, int m, std::uint64_t seed) {
  const int n = static_cast<int>(p.rows());
  std::vector<int> chosen{static_cast<int>(seed % static_cast<std::uint64_t>(n))};
  while (static_cast<int>(chosen.size()) < m) {
    int best = -1;
    double best_d = -1.0;
    for (int i = 0; i < n; ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (int c : chosen) d = std::min(d, sq(p, i, p, c));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

inline std::vector<int> brute_knn(const Points& centers, const Points& p, int k) {
  std::vector<int> out;
  for (int c = 0; c < centers.rows(); ++c) {
    std::vector<std::pair<double, int>> all;
    for (int i = 0; i < p.rows(); ++i) all.emplace_back(sq(centers, c, p, i), i);
    std::sort(all.begin(), all.end());
    for (int j = 0; j < k; ++j) out.push_back(all[static_cast<std::size_t>(j)].second);
  }
  return out;
}

inline Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Norm-wise relative error between analytic and central-difference gradients
// of scalar `f` with respect to `param`. `f` must rebuild its graph from the
// parameter's current value on every call.
inline double gradient_error(const std::function<Tensor()>& f, Tensor param, double h = 1e-6) {
  param.zero_grad();
  f().backward();
  const Matrix analytic = param.has_grad() ? param.grad() : Matrix::Zero(param.rows(), param.cols());
  Matrix numeric(param.rows(), param.cols());
  for (Eigen::Index i = 0; i < numeric.size(); ++i) {
    const double saved = param.value().data()[i];
    param.mutable_value().data()[i] = saved + h;
    const double up = f().item();
    param.mutable_value().data()[i] = saved - h;
    const double down = f().item();
    param.mutable_value().data()[i] = saved;
    numeric.data()[i] = (up - down) / (2.0 * h);
  }
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-8});
  return (analytic - numeric).norm() / scale;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("lift3d_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace support

#include "lift3d/geometry.hpp"

#include "lift3d/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace lift3d::geometry {

namespace {

double squared_distance(const Points& a, Eigen::Index i, const Points& b, Eigen::Index j) {
  const double dx = a(i, 0) - b(j, 0);
  const double dy = a(i, 1) - b(j, 1);
  const double dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidArgument("camera focal lengths must be positive");
  const Eigen::Matrix3d r = extrinsic.topLeftCorner<3, 3>();
  if (!(r.transpose() * r).isApprox(Eigen::Matrix3d::Identity(), 1e-6) || std::abs(r.determinant() - 1.0) > 1e-6) {
    throw InvalidArgument("camera extrinsic rotation is not orthonormal with det +1");
  }
}

PointCloud backproject_rgbd(const RgbdFrame& frame, const CameraModel& camera, double valid_min, double valid_max) {
  const auto pixels = static_cast<std::size_t>(frame.height) * static_cast<std::size_t>(frame.width);
  if (frame.depth.size() != pixels || frame.rgb.size() != pixels * 3) {
    throw InvalidArgument("image and depth must share H x W");
  }
  if (!(valid_min < valid_max)) throw InvalidArgument("valid_min must be below valid_max");
  camera.validate();

  const Eigen::Matrix3d rot = camera.extrinsic.topLeftCorner<3, 3>();
  const Eigen::Vector3d trans = camera.extrinsic.topRightCorner<3, 1>();

  std::vector<std::size_t> valid;
  valid.reserve(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    const double d = frame.depth[i];
    if (std::isfinite(d) && d >= valid_min && d <= valid_max) valid.push_back(i);
  }
  if (valid.empty()) throw InvalidArgument("back-projection produced an empty cloud: no valid depth pixels");

  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(valid.size()), 3);
  pc.colors.resize(static_cast<Eigen::Index>(valid.size()), 3);
  for (std::size_t k = 0; k < valid.size(); ++k) {
    const std::size_t i = valid[k];
    const double u = static_cast<double>(i % static_cast<std::size_t>(frame.width));
    const double v = static_cast<double>(i / static_cast<std::size_t>(frame.width));
    const double d = frame.depth[i];
    const Eigen::Vector3d cam((u - camera.cx) * d / camera.fx, (v - camera.cy) * d / camera.fy, d);
    const auto row = static_cast<Eigen::Index>(k);
    pc.points.row(row) = (rot * cam + trans).transpose();
    pc.colors.row(row) << frame.rgb[3 * i], frame.rgb[3 * i + 1], frame.rgb[3 * i + 2];
  }
  return pc;
}

Eigen::Vector3d project_point(const Eigen::Vector3d& world, const CameraModel& camera) {
  const Eigen::Matrix3d rot = camera.extrinsic.topLeftCorner<3, 3>();
  const Eigen::Vector3d trans = camera.extrinsic.topRightCorner<3, 1>();
  const Eigen::Vector3d cam = rot.transpose() * (world - trans);
  return {camera.fx * cam.x() / cam.z() + camera.cx, camera.fy * cam.y() / cam.z() + camera.cy, cam.z()};
}

std::vector<int> farthest_point_sample(const Points& points, int m, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (m < 1) throw InvalidArgument("farthest_point_sample: m must be at least 1");
  if (m > n) {
    throw InvalidArgument("farthest_point_sample: m = " + std::to_string(m) + " exceeds N = " + std::to_string(n));
  }
  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(m));
  std::vector<double> min_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<char> taken(static_cast<std::size_t>(n), 0);

  auto current = static_cast<Eigen::Index>(seed % static_cast<std::uint64_t>(n));
  for (int step = 0; step < m; ++step) {
    chosen.push_back(static_cast<int>(current));
    taken[static_cast<std::size_t>(current)] = 1;
    if (step + 1 == m) break;
    Eigen::Index best = -1;
    double best_dist = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& md = min_dist[static_cast<std::size_t>(i)];
      md = std::min(md, squared_distance(points, i, points, current));
      if (!taken[static_cast<std::size_t>(i)] && md > best_dist) {
        best_dist = md;
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

std::vector<int> knn_group(const Points& centers, const Points& points, int k) {
  const Eigen::Index n = points.rows();
  if (k < 1 || k > n) {
    throw InvalidArgument("knn_group: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(centers.rows() * k));
  std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      dist[static_cast<std::size_t>(i)] = {squared_distance(centers, c, points, i), static_cast<int>(i)};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int j = 0; j < k; ++j) out.push_back(dist[static_cast<std::size_t>(j)].second);
  }
  return out;
}

PointCloud select(const PointCloud& pc, const std::vector<int>& index) {
  PointCloud out;
  out.points.resize(static_cast<Eigen::Index>(index.size()), 3);
  out.colors.resize(static_cast<Eigen::Index>(index.size()), 3);
  for (std::size_t i = 0; i < index.size(); ++i) {
    out.points.row(static_cast<Eigen::Index>(i)) = pc.points.row(index[i]);
    out.colors.row(static_cast<Eigen::Index>(i)) = pc.colors.row(index[i]);
  }
  return out;
}

PointCloud downsample_to(const PointCloud& pc, int n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("downsample_to: n must be at least 1");
  if (pc.empty()) throw InvalidArgument("downsample_to: empty input cloud");
  const auto count = static_cast<int>(pc.size());
  if (count >= n) return select(pc, farthest_point_sample(pc.points, n, seed));
  std::vector<int> index(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) index[static_cast<std::size_t>(i)] = i % count;
  return select(pc, index);
}

std::pair<PointCloud, CubeFrame> normalize_to_cube(const PointCloud& pc) {
  if (pc.empty()) throw InvalidArgument("normalize_to_cube: empty cloud");
  CubeFrame frame;
  frame.center = pc.points.colwise().mean().transpose();
  double extent = 0.0;
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    extent = std::max(extent, (pc.points.row(i).transpose() - frame.center).cwiseAbs().maxCoeff());
  }
  frame.scale = std::max(extent, kCubeEpsilon);

  PointCloud out = pc;
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    const Eigen::Vector3d q = frame.to_cube(pc.points.row(i).transpose());
    // Division can overshoot the boundary by an ulp.
    out.points.row(i) = q.cwiseMax(-1.0).cwiseMin(1.0).transpose();
  }
  return {std::move(out), frame};
}

}  // namespace lift3d::geometry

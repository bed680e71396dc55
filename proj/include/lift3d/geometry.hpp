#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <vector>

namespace lift3d::geometry {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// XYZ (meters, world frame) plus RGB in [0,1], one row per point.
struct PointCloud {
  Points points;
  Points colors;

  Eigen::Index size() const { return points.rows(); }
  bool empty() const { return points.rows() == 0; }
};

/// Pinhole intrinsics plus a camera-to-world rigid transform.
struct CameraModel {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Eigen::Matrix4d extrinsic = Eigen::Matrix4d::Identity();
  int width = 0;
  int height = 0;

  /// Throws InvalidArgument unless fx, fy > 0 and the rotation block is
  /// orthonormal with det +1 (within 1e-6).
  void validate() const;
};

/// Row-major H x W x 3 color image and H x W depth map (meters).
struct RgbdFrame {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;
  std::vector<double> depth;
};

/// Maps a cloud into [-1,1]^3: p' = (p - center) / scale.
struct CubeFrame {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double scale = 1.0;

  Eigen::Vector3d to_cube(const Eigen::Vector3d& p) const { return (p - center) / scale; }
  Eigen::Vector3d to_world(const Eigen::Vector3d& q) const { return center + scale * q; }
};

inline constexpr double kDefaultValidMin = 0.01;
inline constexpr double kDefaultValidMax = 10.0;
inline constexpr double kCubeEpsilon = 1e-9;

PointCloud backproject_rgbd(const RgbdFrame& frame, const CameraModel& camera, double valid_min = kDefaultValidMin,
                            double valid_max = kDefaultValidMax);

/// Pixel coordinates (u, v) and depth of a world point under `camera`.
Eigen::Vector3d project_point(const Eigen::Vector3d& world, const CameraModel& camera);

/// Greedy farthest-point selection starting at `seed mod N`; ties go to the
/// smallest index.
std::vector<int> farthest_point_sample(const Points& points, int m, std::uint64_t seed);

/// Row i holds the k nearest points to centers[i], ascending by distance,
/// ties broken by smallest index. Returned flat, M*k entries.
std::vector<int> knn_group(const Points& centers, const Points& points, int k);

/// Exactly n points: FPS selection when the cloud is large enough,
/// round-robin repetition otherwise.
PointCloud downsample_to(const PointCloud& pc, int n, std::uint64_t seed);

/// Centroid-centered, isotropically scaled by the largest per-axis half-extent.
std::pair<PointCloud, CubeFrame> normalize_to_cube(const PointCloud& pc);

PointCloud select(const PointCloud& pc, const std::vector<int>& index);

}  // namespace lift3d::geometry

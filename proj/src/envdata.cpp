#include "lift3d/envdata.hpp"

#include "lift3d/error.hpp"
#include "lift3d/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace lift3d {

Eigen::Vector3d canonicalize_axis_angle(const Eigen::Vector3d& r) {
  const double angle = r.norm();
  if (angle <= std::numbers::pi || angle == 0.0) return r;
  const Eigen::Vector3d axis = r / angle;
  double wrapped = std::fmod(angle, 2.0 * std::numbers::pi);
  if (wrapped > std::numbers::pi) return axis * (wrapped - 2.0 * std::numbers::pi);
  return axis * wrapped;
}

Eigen::VectorXd RobotState::vector() const {
  Eigen::VectorXd v(dimension());
  v.head<7>() = end_effector.vector();
  Eigen::Index i = 7;
  for (double q : joint_positions) v(i++) = q;
  for (double q : joint_velocities) v(i++) = q;
  return v;
}

}  // namespace lift3d

namespace lift3d::envdata {

namespace {

const Eigen::Vector3d kTargetColor{0.9, 0.15, 0.1};
const std::array<Eigen::Vector3d, 3> kDistractorColors{
    Eigen::Vector3d{0.1, 0.8, 0.2}, Eigen::Vector3d{0.15, 0.3, 0.9}, Eigen::Vector3d{0.9, 0.85, 0.1}};
const Eigen::Vector3d kTableColor{0.5, 0.5, 0.5};

Eigen::Vector3d round3(const Eigen::Vector3d& v) {
  return {storage_round(v.x()), storage_round(v.y()), storage_round(v.z())};
}

Pose7DoF rounded(const Pose7DoF& p) {
  return {round3(p.translation), round3(p.rotation), storage_round(p.gripper)};
}

}  // namespace

SyntheticScene make_scene(std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0x5ce9e));
  SyntheticScene scene;
  scene.seed = seed;
  const int count = 2 + static_cast<int>(rng.below(3));
  std::array<int, 3> palette{0, 1, 2};
  for (int i = 2; i > 0; --i) std::swap(palette[static_cast<std::size_t>(i)], palette[rng.below(static_cast<std::uint64_t>(i + 1))]);
  scene.target = static_cast<int>(rng.below(static_cast<std::uint64_t>(count)));
  int distractor = 0;
  while (static_cast<int>(scene.clusters.size()) < count) {
    Cluster c;
    c.radius = storage_round(rng.uniform(0.035, 0.06));
    const double x = storage_round(rng.uniform(-0.25, 0.25));
    const double y = storage_round(rng.uniform(-0.25, 0.25));
    c.centroid = {x, y, c.radius};
    bool clear = true;
    for (const auto& other : scene.clusters) {
      const double gap = (other.centroid.head<2>() - c.centroid.head<2>()).norm();
      if (gap < other.radius + c.radius + 0.03) clear = false;
    }
    if (!clear) continue;
    const bool is_target = static_cast<int>(scene.clusters.size()) == scene.target;
    c.color = is_target ? kTargetColor : kDistractorColors[static_cast<std::size_t>(palette[static_cast<std::size_t>(distractor++ % 3)])];
    scene.clusters.push_back(c);
  }
  return scene;
}

geometry::PointCloud observe_cloud(const SyntheticScene& scene, int cloud_points) {
  Rng rng(Rng::derive(scene.seed, 0xc10d));
  Eigen::Index total = 0;
  for (const auto& c : scene.clusters) total += c.points;
  geometry::PointCloud raw;
  raw.points.resize(total, 3);
  raw.colors.resize(total, 3);
  Eigen::Index row = 0;
  for (const auto& c : scene.clusters) {
    for (int i = 0; i < c.points; ++i) {
      Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
      dir.normalize();
      dir.z() = std::abs(dir.z());
      raw.points.row(row) = (c.centroid + c.radius * dir).transpose();
      raw.colors.row(row) = c.color.transpose();
      ++row;
    }
  }
  geometry::PointCloud out = geometry::downsample_to(raw, cloud_points, 0);
  out.points = out.points.unaryExpr(&storage_round);
  out.colors = out.colors.unaryExpr(&storage_round);
  return out;
}

Eigen::Vector2d OrthoCamera::pixel_center(int row, int col) const {
  return {-half_extent + (col + 0.5) * pixel(), half_extent - (row + 0.5) * pixel()};
}

Eigen::Vector3d OrthoCamera::backproject(int row, int col, double depth) const {
  const Eigen::Vector2d xy = pixel_center(row, col);
  return {xy.x(), xy.y(), height - depth};
}

PretrainRecord render_scene(const SyntheticScene& scene, int size) {
  const OrthoCamera cam{size};
  const auto pixels = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  PretrainRecord rec;
  rec.height = size;
  rec.width = size;
  rec.image.assign(pixels * 3, 0.0);
  rec.depth.assign(pixels, 0.0);
  rec.text = kReachText;
  rec.seed = scene.seed;
  std::vector<double> mask(pixels, 0.0);

  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const auto i = static_cast<std::size_t>(r * size + c);
      const Eigen::Vector2d xy = cam.pixel_center(r, c);
      double top = -1.0;
      int hit = -1;
      Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
      for (std::size_t k = 0; k < scene.clusters.size(); ++k) {
        const auto& cl = scene.clusters[k];
        const double d2 = (xy - cl.centroid.head<2>()).squaredNorm();
        if (d2 > cl.radius * cl.radius) continue;
        const double z = cl.centroid.z() + std::sqrt(cl.radius * cl.radius - d2);
        if (z > top) {
          top = z;
          hit = static_cast<int>(k);
          normal = (Eigen::Vector3d(xy.x(), xy.y(), z) - cl.centroid) / cl.radius;
        }
      }
      Eigen::Vector3d color;
      if (hit >= 0) {
        color = scene.clusters[static_cast<std::size_t>(hit)].color * (0.6 + 0.4 * normal.z());
        if (hit == scene.target) mask[i] = 1.0;
      } else if (std::abs(xy.x()) <= scene.table_extent && std::abs(xy.y()) <= scene.table_extent) {
        top = 0.0;
        color = kTableColor;
      } else {
        continue;  // off the table: no return, depth stays 0
      }
      rec.depth[i] = storage_round(cam.height - top);
      for (int ch = 0; ch < 3; ++ch) rec.image[3 * i + static_cast<std::size_t>(ch)] = storage_round(color(ch));
    }
  }

  // 5x5 Gaussian blur (sigma = 1 px) of the target mask.
  std::array<double, 5> kernel{};
  double norm = 0.0;
  for (int k = -2; k <= 2; ++k) norm += kernel[static_cast<std::size_t>(k + 2)] = std::exp(-0.5 * k * k);
  for (double& k : kernel) k /= norm;
  std::vector<double> tmp(pixels, 0.0);
  rec.attention.assign(pixels, 0.0);
  for (int pass = 0; pass < 2; ++pass) {
    const auto& src = pass == 0 ? mask : tmp;
    auto& dst = pass == 0 ? tmp : rec.attention;
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        double acc = 0.0;
        for (int k = -2; k <= 2; ++k) {
          const int rr = pass == 1 ? std::clamp(r + k, 0, size - 1) : r;
          const int cc = pass == 0 ? std::clamp(c + k, 0, size - 1) : c;
          acc += kernel[static_cast<std::size_t>(k + 2)] * src[static_cast<std::size_t>(rr * size + cc)];
        }
        dst[static_cast<std::size_t>(r * size + c)] = acc;
      }
    }
  }
  for (double& a : rec.attention) a = storage_round(std::clamp(a, 0.0, 1.0));
  return rec;
}

RobotState make_state(const Pose7DoF& ee, const RobotState* previous) {
  RobotState s;
  s.end_effector = ee;
  const Eigen::Vector3d& t = ee.translation;
  s.joint_positions = {std::atan2(t.y(), t.x()), std::hypot(t.x(), t.y()), t.z(), ee.gripper};
  for (double& q : s.joint_positions) q = storage_round(q);
  s.joint_velocities.assign(kJoints, 0.0);
  if (previous != nullptr) {
    for (int j = 0; j < kJoints; ++j) {
      const auto k = static_cast<std::size_t>(j);
      s.joint_velocities[k] = storage_round(s.joint_positions[k] - previous->joint_positions[k]);
    }
  }
  return s;
}

Pose7DoF demo_action(const SyntheticScene& scene, const RobotState& state) {
  const Eigen::Vector3d target = scene.target_cluster().centroid;
  const Eigen::Vector3d dir = (target - kHome).normalized();
  const double dist = (state.end_effector.translation - target).norm();
  return rounded({target, dir * (std::numbers::pi / 4.0), dist <= kSuccessRadius ? 1.0 : 0.0});
}

bool is_success(const SyntheticScene& scene, const Pose7DoF& ee) {
  return (ee.translation - scene.target_cluster().centroid).norm() <= kSuccessRadius && ee.gripper >= 0.5;
}

ReachEnv::ReachEnv(std::uint64_t seed, EnvOptions options) : scene_(make_scene(seed)), options_(options) {
  cloud_ = observe_cloud(scene_, options_.cloud_points);
  reset();
}

Observation ReachEnv::reset() {
  steps_ = 0;
  state_ = make_state(rounded({kHome, Eigen::Vector3d::Zero(), 0.0}), nullptr);
  return {cloud_, state_};
}

StepResult ReachEnv::step(const Pose7DoF& action) {
  if (!action.vector().allFinite()) throw InvalidArgument("env_step: action is not finite");
  StepResult out;
  Pose7DoF ee;
  ee.translation = action.translation.cwiseMax(-kWorkspaceHalf).cwiseMin(kWorkspaceHalf);
  out.clipped = ee.translation != action.translation;
  ee.rotation = canonicalize_axis_angle(action.rotation);
  ee.gripper = action.gripper >= 0.5 ? 1.0 : 0.0;
  ee = rounded(ee);
  const RobotState previous = state_;
  state_ = make_state(ee, &previous);
  ++steps_;
  out.success = is_success(scene_, ee);
  out.done = out.success || steps_ >= kMaxSteps;
  out.observation = {cloud_, state_};
  return out;
}

ReachTask gen_reach_task(std::uint64_t seed, EnvOptions options) {
  ReachEnv env(seed, options);
  ReachTask task;
  task.scene = env.scene();
  task.demo.task = kReachTask;
  task.demo.scene_seed = seed;
  Observation obs = env.reset();
  for (int i = 0; i < kMaxSteps; ++i) {
    const Pose7DoF action = env.expert_action();
    task.demo.steps.push_back({obs.cloud, obs.state, action});
    const StepResult res = env.step(action);
    obs = res.observation;
    if (res.done) break;
  }
  task.render = render_scene(task.scene, options.render_size);
  return task;
}

std::vector<EpisodeRecord> gen_episodes(std::uint64_t base_seed, int count, EnvOptions options) {
  std::vector<EpisodeRecord> out;
  for (int i = 0; i < count; ++i) out.push_back(gen_reach_task(base_seed + static_cast<std::uint64_t>(i), options).demo);
  return out;
}

std::vector<PretrainRecord> gen_pretrain_records(std::uint64_t base_seed, int count, EnvOptions options) {
  std::vector<PretrainRecord> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(render_scene(make_scene(base_seed + static_cast<std::uint64_t>(i)), options.render_size));
  }
  return out;
}

}  // namespace lift3d::envdata

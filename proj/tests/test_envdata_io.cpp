#include "doctest.h"
#include "support.hpp"

#include "lift3d/envdata.hpp"
#include "lift3d/error.hpp"
#include "lift3d/io.hpp"

#include <zlib.h>

#include <fstream>

using namespace lift3d;
using namespace lift3d::envdata;
using support::TempDir;
using nn::Tensor;

namespace {

const EnvOptions kSmall{128, 16};

void flip_byte(const std::filesystem::path& p, std::size_t offset) {
  auto bytes = support::slurp(p);
  bytes.at(offset) ^= 0x5a;
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("scenes and demonstrations are deterministic per seed") {
  const auto a = gen_reach_task(42, kSmall);
  const auto b = gen_reach_task(42, kSmall);
  CHECK(a.demo.steps.size() == b.demo.steps.size());
  CHECK(a.demo.steps[0].cloud.points == b.demo.steps[0].cloud.points);
  CHECK(a.render.depth == b.render.depth);
  CHECK(gen_reach_task(43, kSmall).demo.steps[0].cloud.points != a.demo.steps[0].cloud.points);
  CHECK(a.demo.steps[0].cloud.size() == 128);
  CHECK(a.render.height == 16);
}

TEST_CASE("observed points lie on the upper hemispheres at storage precision") {
  const auto scene = make_scene(7);
  const auto cloud = observe_cloud(scene, 512);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d p = cloud.points.row(i).transpose();
    double best = 1e9;
    for (const auto& c : scene.clusters) best = std::min(best, std::abs((p - c.centroid).norm() - c.radius));
    CHECK(best < 1e-6);
    CHECK(cloud.points(i, 0) == storage_round(cloud.points(i, 0)));
  }
}

TEST_CASE("the expert succeeds and the env ends after the step budget") {
  ReachEnv env(5, kSmall);
  env.reset();
  StepResult r;
  for (int i = 0; i < kMaxSteps && !r.done; ++i) r = env.step(env.expert_action());
  CHECK(r.success);
  ReachEnv idle(5, kSmall);
  idle.reset();
  for (int i = 0; i < kMaxSteps; ++i) r = idle.step(idle.state().end_effector);
  CHECK(r.done);
  CHECK_FALSE(r.success);
}

TEST_CASE("success needs the gripper closed within 2 cm") {
  const auto scene = make_scene(3);
  Pose7DoF ee;
  ee.translation = scene.target_cluster().centroid + Eigen::Vector3d(0.019, 0, 0);
  ee.gripper = 1.0;
  CHECK(is_success(scene, ee));
  ee.gripper = 0.0;
  CHECK_FALSE(is_success(scene, ee));
  ee.gripper = 1.0;
  ee.translation.x() += 0.002;
  CHECK_FALSE(is_success(scene, ee));
}

TEST_CASE("crc32 agrees with zlib") {
  Rng rng(1);
  std::vector<unsigned char> bytes(1000);
  for (auto& b : bytes) b = static_cast<unsigned char>(rng.below(256));
  CHECK(io::crc32(bytes) == static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size()))));
  CHECK(io::crc32({}) == 0u);
}

TEST_CASE("episode datasets round-trip bitwise") {
  TempDir tmp("episodes");
  const auto episodes = gen_episodes(10, 3, kSmall);
  io::write_episodes(episodes, tmp / "a");
  const auto back = io::read_episodes(tmp / "a");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].scene_seed == episodes[i].scene_seed);
    CHECK(back[i].task == episodes[i].task);
    REQUIRE(back[i].steps.size() == episodes[i].steps.size());
    for (std::size_t s = 0; s < back[i].steps.size(); ++s) {
      CHECK(back[i].steps[s].cloud.points == episodes[i].steps[s].cloud.points);
      CHECK(back[i].steps[s].cloud.colors == episodes[i].steps[s].cloud.colors);
      CHECK(back[i].steps[s].state == episodes[i].steps[s].state);
      CHECK(back[i].steps[s].action == episodes[i].steps[s].action);
    }
  }
  io::write_episodes(back, tmp / "b");
  for (const auto& f : {"manifest.json", "record_000000.bin", "record_000002.bin"}) {
    CHECK(support::slurp(tmp / "a" / f) == support::slurp(tmp / "b" / f));
  }
  CHECK(io::read_manifest(tmp / "a").at("count") == 3);
  CHECK_THROWS_AS(io::write_episodes({}, tmp / "c"), InvalidArgument);
}

TEST_CASE("pretrain datasets round-trip bitwise") {
  TempDir tmp("pretrain");
  const auto records = gen_pretrain_records(20, 2, kSmall);
  io::write_pretrain(records, tmp / "a");
  CHECK(std::filesystem::exists(tmp / "a" / "attention_000001.pgm"));
  const auto back = io::read_pretrain(tmp / "a");
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].image == records[i].image);
    CHECK(back[i].depth == records[i].depth);
    CHECK(back[i].attention == records[i].attention);
    CHECK(back[i].text == records[i].text);
    CHECK(back[i].seed == records[i].seed);
  }
}

TEST_CASE("dataset corruption is reported per record") {
  TempDir tmp("corrupt");
  const auto episodes = gen_episodes(10, 3, kSmall);
  io::write_episodes(episodes, tmp / "d");
  const auto record = tmp / "d" / "record_000001.bin";

  flip_byte(record, 40);
  std::string msg = error_of([&] { io::read_episodes(tmp / "d"); });
  CHECK(msg.find("record 1") != std::string::npos);
  CHECK(msg.find("CRC32") != std::string::npos);

  io::write_episodes(episodes, tmp / "e");
  flip_byte(tmp / "e" / "record_000002.bin", 0);
  msg = error_of([&] { io::read_episodes(tmp / "e"); });
  CHECK(msg.find("record 2") != std::string::npos);
  CHECK(msg.find("magic") != std::string::npos);

  io::write_episodes(episodes, tmp / "f");
  auto bytes = support::slurp(tmp / "f" / "record_000000.bin");
  bytes.resize(bytes.size() - 4);
  io::write_file_atomic(tmp / "f" / "record_000000.bin", bytes);
  msg = error_of([&] { io::read_episodes(tmp / "f"); });
  CHECK(msg.find("record 0") != std::string::npos);

  io::write_episodes(episodes, tmp / "g");
  std::filesystem::remove(tmp / "g" / "record_000001.bin");
  CHECK_THROWS_AS(io::read_episodes(tmp / "g"), IoError);

  io::write_episodes(episodes, tmp / "h");
  auto manifest = io::read_manifest(tmp / "h");
  manifest["count"] = 4;
  std::ofstream(tmp / "h" / "manifest.json") << manifest.dump();
  msg = error_of([&] { io::read_episodes(tmp / "h"); });
  CHECK(msg.find("count") != std::string::npos);

  std::ofstream(tmp / "h" / "manifest.json") << "{not json";
  CHECK_THROWS_AS(io::read_episodes(tmp / "h"), FormatError);
  CHECK_THROWS_AS(io::read_pretrain(tmp / "d"), FormatError);
}

TEST_CASE("checkpoints round-trip bitwise and detect corruption") {
  Rng rng(3);
  io::Checkpoint ckpt;
  ckpt.stage = "policy";
  ckpt.config = {{"seed", 4}, {"planes", 6}};
  io::append_matrix(ckpt, "a", support::random_matrix(rng, 3, 5));
  io::append_matrix(ckpt, "b", support::random_matrix(rng, 1, 7));
  const auto bytes = io::encode_checkpoint(ckpt);
  const auto back = io::decode_checkpoint(bytes);
  CHECK(back == ckpt);
  CHECK(io::encode_checkpoint(back) == bytes);

  auto bad = bytes;
  bad.back() ^= 1;
  CHECK_THROWS_WITH_AS(io::decode_checkpoint(bad), doctest::Contains("CRC32"), FormatError);
  bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(io::decode_checkpoint(bad), doctest::Contains("magic"), FormatError);
  bad = bytes;
  bad.resize(30);
  CHECK_THROWS_AS(io::decode_checkpoint(bad), FormatError);

  nn::ParamList params{{"a", Tensor(nn::Matrix::Zero(3, 5), true)}};
  io::load_params(ckpt, params);
  CHECK(params[0].tensor.value() == io::load_matrix(ckpt, "a"));
  nn::ParamList wrong{{"a", Tensor(nn::Matrix::Zero(5, 3), true)}};
  CHECK_THROWS_AS(io::load_params(ckpt, wrong), CheckpointMismatchError);
  nn::ParamList missing{{"c", Tensor(nn::Matrix::Zero(1, 1), true)}};
  CHECK_THROWS_AS(io::load_params(ckpt, missing), CheckpointMismatchError);
}

TEST_CASE("every generated demonstration succeeds when replayed") {
  for (const auto& ep : gen_episodes(700, 20, kSmall)) {
    ReachEnv env(ep.scene_seed, kSmall);
    env.reset();
    StepResult r;
    for (const auto& step : ep.steps) {
      CHECK(env.state() == step.state);
      r = env.step(step.action);
    }
    CHECK(r.success);
  }
}

TEST_CASE("high-attention pixels lie over the target sphere") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto scene = make_scene(seed);
    const auto rec = render_scene(scene, 112);
    const OrthoCamera cam{112};
    const auto& target = scene.target_cluster();
    for (int r = 0; r < rec.height; ++r) {
      for (int c = 0; c < rec.width; ++c) {
        const auto i = static_cast<std::size_t>(r * rec.width + c);
        if (rec.attention[i] <= 0.5) continue;
        const Eigen::Vector3d p = cam.backproject(r, c, rec.depth[i]);
        CHECK((p.head<2>() - target.centroid.head<2>()).norm() <= target.radius + 2.0 * cam.pixel());
        CHECK((p - target.centroid).norm() <= target.radius * std::sqrt(2.0) + 2.0 * cam.pixel());
      }
    }
  }
}

#pragma once

#include "lift3d/encoder.hpp"
#include "lift3d/envdata.hpp"
#include "lift3d/nn/optim.hpp"
#include "lift3d/pe_lifting.hpp"
#include "lift3d/records.hpp"
#include "lift3d/tokenizer3d.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lift3d::policy {

using encoder::Encoder2D;
using encoder::EncoderConfig;
using nn::Matrix;
using nn::Tensor;

enum class UpdateStrategy { kAdapters, kNone, kFull };
enum class PeMode { kLifted, kLearnable };

inline constexpr double kGripperEps = 1e-7;
inline constexpr double kDefaultPointerGain = 10.0;

struct LossWeights {
  double translation = 1.0;
  double rotation = 1.0;
  double gripper = 1.0;
};

struct PolicyConfig {
  EncoderConfig encoder;
  tokenizer::TokenizerConfig tokenizer;
  int planes = 6;
  PeMode pe_mode = PeMode::kLifted;
  UpdateStrategy update = UpdateStrategy::kAdapters;
  int head_hidden = 64;
  /// Multiplies the pointer scores; larger values sharpen the weights faster.
  double pointer_gain = kDefaultPointerGain;
  /// Random rotation about the vertical world axis for each training sample.
  bool augment = true;
  int state_dim = 7 + 2 * envdata::kJoints;
  LossWeights weights;
  nn::AdamOptions optim;
  long steps = 3000;
  int batch = 8;
  int log_every = 10;
  int cloud_points = 1024;
};

/// Three-layer MLP over [mean-pooled visual feature, embedded robot state].
/// Translation also gets a pointer term: token centers averaged with weights
/// from a learned query (zero at init), mapped by a learned 3x3 matrix
/// (identity at init).
struct PolicyHead {
  Tensor pointer_query;  // 1 x D
  Tensor pointer;     // 3 x 3
  encoder::LinearParams state_embed;
  encoder::LinearParams l1;
  encoder::LinearParams l2;
  encoder::LinearParams l3;

  static PolicyHead init(int width, int state_dim, int hidden, std::uint64_t seed);
  void collect(nn::ParamList& out, const std::string& prefix) const;
  void set_trainable(bool on);
};

/// Adds the plane-averaged positional embedding of the token centers (or a
/// learnable per-token table when given) and runs the encoder blocks.
Tensor encode_pointcloud(const Encoder2D& enc, const tokenizer::TokenSet3D& tokens, const pe::VirtualPlaneSet& planes,
                         bool use_adapters, const Tensor* learned_pe = nullptr);

/// 1x7 prediction [T (world), R, G in (0,1)]. The head regresses T in the
/// observation's cube frame; `frame` maps it back to world coordinates.
/// `centers` are the k token centers in cube coordinates.
Tensor predict_action_tensor(const PolicyHead& head, const Tensor& features, const Matrix& centers,
                             const Eigen::VectorXd& state, const geometry::CubeFrame& frame = {},
                             double pointer_gain = kDefaultPointerGain);

Pose7DoF predict_action(const PolicyHead& head, const Tensor& features, const Matrix& centers, const RobotState& state,
                        const geometry::CubeFrame& frame = {}, double pointer_gain = kDefaultPointerGain);

struct ExplicitTerms {
  double translation = 0.0;
  double rotation = 0.0;
  double gripper = 0.0;
  double total = 0.0;
};

struct ExplicitLoss {
  Tensor total;
  ExplicitTerms terms;
};

/// MSE(T) + (1 - cos(R_pred, R_gt)) + BCE(G_pred, G_gt) on a 1x7 prediction.
/// The rotation term is skipped when R_gt = 0; G_pred is clamped to
/// [eps, 1 - eps]. Throws InvalidArgument on non-finite input.
ExplicitLoss explicit_loss(const Tensor& pred, const Pose7DoF& gt, const LossWeights& weights = {});
ExplicitTerms explicit_loss(const Pose7DoF& pred, const Pose7DoF& gt, const LossWeights& weights = {});

/// Observation preprocessing that does not depend on weights.
struct PreparedObservation {
  geometry::CubeFrame frame;
  tokenizer::TokenizerPlan plan;
  Eigen::VectorXd state;
};

PreparedObservation prepare(const geometry::PointCloud& cloud, const RobotState& state, const PolicyConfig& cfg,
                            std::uint64_t seed);

struct PolicyModel {
  PolicyConfig cfg;
  tokenizer::TokenizerParams tokenizer;
  Encoder2D encoder;
  PolicyHead head;
  Tensor learned_pe;  // defined only for PeMode::kLearnable
  pe::VirtualPlaneSet planes = pe::VirtualPlaneSet::standard(6);

  static PolicyModel init(const PolicyConfig& cfg, std::uint64_t seed);

  /// Replaces the encoder (base + adapters) with one from stage 1. Throws
  /// CheckpointMismatchError when dimensions differ.
  void adopt_encoder(const Encoder2D& pretrained);

  bool uses_adapters() const { return cfg.update == UpdateStrategy::kAdapters; }
  Tensor forward(const PreparedObservation& obs) const;
  Pose7DoF act(const geometry::PointCloud& cloud, const RobotState& state) const;

  /// Parameters updated by train_policy under the configured strategy.
  nn::ParamList trainable() const;
  /// Every parameter, for checkpoints.
  nn::ParamList all_params() const;
  long trainable_count() const;
};

/// Rotates an observation and its action about the world z axis. Cached
/// sampling and grouping indices stay valid since FPS and kNN only see
/// distances. The previous azimuth implied by the state velocity is kept.
PreparedObservation rotate_about_vertical(const PreparedObservation& obs, double angle);
Pose7DoF rotate_about_vertical(const Pose7DoF& pose, double angle);

struct TrainSample {
  PreparedObservation obs;
  Pose7DoF target;
};

std::vector<TrainSample> prepare_dataset(const std::vector<EpisodeRecord>& episodes, const PolicyConfig& cfg);

struct TrainLog {
  long step = 0;
  ExplicitTerms terms;
  double lr = 0.0;
};

/// Behavior cloning with Adam; the base encoder stays frozen unless the
/// strategy is kFull. Throws NonFiniteLossError on a non-finite loss.
std::vector<TrainLog> train_policy(PolicyModel& model, const std::vector<TrainSample>& samples, std::uint64_t seed,
                                   const std::function<void(const TrainLog&)>& on_log = {});

/// Mean explicit-loss terms over `samples`.
ExplicitTerms evaluate_loss(const PolicyModel& model, const std::vector<TrainSample>& samples);

using Policy = std::function<Pose7DoF(const envdata::Observation&, const envdata::ReachEnv&)>;

struct EpisodeOutcome {
  std::uint64_t scene_seed = 0;
  bool success = false;
  int steps = 0;
  std::string fault;
};

struct EvalResult {
  double success_rate = 0.0;
  std::vector<EpisodeOutcome> episodes;
};

/// Closed-loop rollouts on scenes seeded `seed, seed+1, ...`. A throwing
/// policy or env step counts as a failed episode.
EvalResult evaluate_policy(const Policy& policy, int episodes, std::uint64_t seed, envdata::EnvOptions options = {});

Policy model_policy(const PolicyModel& model);
Policy expert_policy();

}  // namespace lift3d::policy

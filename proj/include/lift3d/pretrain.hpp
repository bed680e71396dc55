#pragma once

#include "lift3d/encoder.hpp"
#include "lift3d/masking.hpp"
#include "lift3d/nn/optim.hpp"
#include "lift3d/records.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace lift3d::pretrain {

using encoder::Encoder2D;
using encoder::EncoderConfig;
using nn::Matrix;
using nn::Tensor;

enum class TargetKind { kDepth, kRgb, kBoth };

int target_channels(TargetKind kind);

struct DecoderConfig {
  int layers = 1;
  /// 0 selects half the encoder width.
  int width = 0;
  int heads = 2;

  int resolved_width(int encoder_width) const { return width > 0 ? width : encoder_width / 2; }
};

/// Lightweight MAE decoder: embeds visible features, fills masked positions
/// with a shared learnable token, adds fixed grid PEs, and regresses each
/// masked patch's target values.
class DepthDecoder {
 public:
  static DepthDecoder init(const EncoderConfig& enc, const DecoderConfig& cfg, int out_channels, std::uint64_t seed);

  /// |masked| x (patch^2 * out_channels), rows in plan.masked() order.
  Tensor decode(const Tensor& visible_features, const masking::MaskPlan& plan) const;

  void collect(nn::ParamList& out, const std::string& prefix) const;
  void set_trainable(bool on);

  int output_width() const { return static_cast<int>(head_.w.cols()); }
  encoder::LinearParams& embed() { return embed_; }
  encoder::LinearParams& head() { return head_; }
  Tensor& mask_token() { return mask_token_; }
  std::vector<encoder::BlockParams>& blocks() { return blocks_; }
  encoder::LayerNormParams& norm() { return norm_; }

 private:
  int heads_ = 1;
  encoder::LinearParams embed_;
  Tensor mask_token_;
  Matrix pe_;
  std::vector<encoder::BlockParams> blocks_;
  encoder::LayerNormParams norm_;
  encoder::LinearParams head_;
};

/// Reconstruction targets of the masked patches with a validity mask.
struct ReconTarget {
  Matrix values;  // |masked| x (patch^2 * channels), in [0,1]
  Matrix valid;   // same shape, 1 where supervised
};

/// Per-image min-max normalization of valid depth (finite, > 0) to [0,1].
std::vector<double> normalize_depth(const std::vector<double>& depth, std::vector<char>* valid = nullptr);

ReconTarget make_target(const PretrainRecord& record, const masking::MaskPlan& plan, int patch, TargetKind kind);

encoder::Image record_image(const PretrainRecord& record);
masking::AttentionMap record_attention(const PretrainRecord& record);

struct LossTerms {
  double distill = 0.0;
  double recon = 0.0;
  double total = 0.0;
};

struct ImplicitLoss {
  Tensor total;
  LossTerms terms;
};

/// w_distill * mean|enc - ref| + w_recon * mean over valid masked entries of
/// |pred - target|.
ImplicitLoss implicit_loss(const Tensor& enc_out, const Tensor& ref_out, const Tensor& pred, const ReconTarget& target,
                           double w_distill = 1.0, double w_recon = 1.0);

struct PretrainConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  double theta = masking::kDefaultTheta;
  double ratio = masking::kDefaultRatio;
  bool affordance_masking = true;
  TargetKind target = TargetKind::kDepth;
  double w_distill = 1.0;
  double w_recon = 1.0;
  nn::AdamOptions optim;
  long steps = 2000;
  int batch = 4;
  int log_every = 10;
  bool train_adapters = true;
  bool train_decoder = true;
};

struct StepLog {
  long step = 0;
  LossTerms terms;
  double lr = 0.0;
};

struct PretrainState {
  Encoder2D encoder;
  Encoder2D reference;
  DepthDecoder decoder;
};

/// Encoder (seeded), its frozen reference clone, and a fresh decoder.
PretrainState init_pretrain(const PretrainConfig& cfg, std::uint64_t seed);

masking::MaskPlan plan_for_record(const PretrainRecord& record, const PretrainConfig& cfg, std::uint64_t seed);

/// Loss of one record under a given plan; builds the autodiff graph.
ImplicitLoss record_loss(const PretrainState& state, const PretrainRecord& record, const masking::MaskPlan& plan,
                         const PretrainConfig& cfg);

/// Mean loss terms over `records` with per-record plans from `seed`;
/// no parameter updates.
LossTerms evaluate(const PretrainState& state, const std::vector<PretrainRecord>& records, const PretrainConfig& cfg,
                   std::uint64_t seed);

/// Called after each optimizer step with the post-step state.
using StepHook = std::function<void(long step, const PretrainState& state)>;

/// Trains adapters and decoder (base frozen) with Adam. Throws
/// NonFiniteLossError on a non-finite loss.
std::vector<StepLog> pretrain_run(PretrainState& state, const std::vector<PretrainRecord>& records,
                                  const PretrainConfig& cfg, std::uint64_t seed,
                                  const std::function<void(const StepLog&)>& on_log = {},
                                  const StepHook& on_step = {});

}  // namespace lift3d::pretrain

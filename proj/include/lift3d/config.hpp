#pragma once

#include "lift3d/policy.hpp"
#include "lift3d/pretrain.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>

namespace lift3d::config {

enum class MaskStrategy { kAffordance, kRandom };

/// Desk-scale tokenizer of depth 1..4: widths from {16, 32, 64, 128},
/// always 64 tokens, point counts doubling towards the input.
tokenizer::TokenizerConfig desk_tokenizer(int layers);
nn::AdamOptions default_optimizer();

struct DataConfig {
  std::string pretrain;  // split directory; empty = generate in memory
  std::string train;
  int pretrain_count = 16;
  int train_count = 64;
  std::uint64_t seed = 1000;
};

struct PretrainSection {
  bool enabled = true;
  pretrain::TargetKind target = pretrain::TargetKind::kDepth;
  bool distill = true;
  double w_distill = 1.0;
  double w_recon = 1.0;
  long steps = 300;
  int batch = 4;
  pretrain::DecoderConfig decoder;
};

struct PolicySection {
  long steps = 2000;
  int batch = 8;
  int head_hidden = 128;
  double pointer_gain = policy::kDefaultPointerGain;
  bool augment = true;
  policy::LossWeights weights;
};

struct EvalSection {
  int episodes = 100;
  std::uint64_t seed = 500000;
};

/// Everything one run needs. Parsed from JSON with unknown keys rejected;
/// `to_json` writes the fully resolved form.
struct RunConfig {
  std::uint64_t seed = 0;
  encoder::EncoderConfig encoder;
  tokenizer::TokenizerConfig tokenizer = desk_tokenizer(2);
  int planes = 6;
  policy::PeMode pe = policy::PeMode::kLifted;
  policy::UpdateStrategy update = policy::UpdateStrategy::kAdapters;
  MaskStrategy mask = MaskStrategy::kAffordance;
  double theta = masking::kDefaultTheta;
  double ratio = masking::kDefaultRatio;
  nn::AdamOptions optimizer = default_optimizer();
  PretrainSection pretrain;
  PolicySection policy;
  DataConfig data;
  EvalSection eval;
  int log_every = 10;

  /// Throws ConfigError.
  void validate() const;

  pretrain::PretrainConfig pretrain_config() const;
  policy::PolicyConfig policy_config() const;
};

/// Strict parse: unknown keys and type mismatches throw ConfigError.
RunConfig from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load(const std::string& path);

std::string to_string(policy::UpdateStrategy u);
std::string to_string(policy::PeMode m);
std::string to_string(MaskStrategy m);
std::string to_string(pretrain::TargetKind t);

}  // namespace lift3d::config

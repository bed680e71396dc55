#pragma once

#include "lift3d/geometry.hpp"
#include "lift3d/nn/optim.hpp"
#include "lift3d/nn/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lift3d::tokenizer {

using nn::Matrix;
using nn::Tensor;

struct TokenizerConfig {
  std::vector<int> dims{192, 384, 768};
  std::vector<int> points{512, 256, 128};
  int k_nn = 64;
  int output_dim = 768;
  /// Layer norm between each grouped linear map and its nonlinearity.
  bool norm = false;

  int layers() const { return static_cast<int>(dims.size()); }
  int tokens() const { return points.empty() ? 0 : points.back(); }

  /// Throws ConfigError on an invalid layout.
  void validate() const;

  /// Default 1..4-layer layouts: widths from {192, 384, 768, 1536}, point
  /// counts halving from 1024 down to 128.
  static TokenizerConfig with_layers(int layers, int output_dim);
};

/// Weights of the tokenizer: one grouped linear map per layer plus an
/// optional output projection when the last width differs from output_dim.
struct TokenizerParams {
  struct Layer {
    Tensor w;
    Tensor b;
    Tensor gamma;  // only with cfg.norm
    Tensor beta;
  };
  std::vector<Layer> layers;
  Tensor out_w;  // undefined when the last width equals output_dim
  Tensor out_b;

  static TokenizerParams init(const TokenizerConfig& cfg, std::uint64_t seed);
  void collect(nn::ParamList& out, const std::string& prefix) const;
  void set_trainable(bool on);
};

/// Sampling and grouping decisions of every layer. These depend only on the
/// cloud geometry and the seed, never on the weights, so they can be computed
/// once per observation and reused across training steps.
struct TokenizerPlan {
  struct Level {
    std::vector<int> centers;    // indices into the previous level's points
    std::vector<int> neighbors;  // centers.size() * k, indices into the previous level
    int k = 0;
  };
  std::vector<Level> levels;
  /// Point coordinates at each level (level 0 is the input cloud).
  std::vector<geometry::Points> coords;
  Matrix input_colors;

  const geometry::Points& token_centers() const { return coords.back(); }
};

TokenizerPlan plan_tokenizer(const geometry::PointCloud& normalized, const TokenizerConfig& cfg, std::uint64_t seed);

struct TokenSet3D {
  Tensor features;  // k x D
  Matrix centers;   // k x 3, in [-1,1]^3
  int size() const { return static_cast<int>(centers.rows()); }
};

TokenSet3D encode_tokens(const TokenizerPlan& plan, const TokenizerConfig& cfg, const TokenizerParams& params);

/// plan_tokenizer followed by encode_tokens.
TokenSet3D tokenize(const geometry::PointCloud& normalized, const TokenizerConfig& cfg, const TokenizerParams& params,
                    std::uint64_t seed);

long tokenizer_param_count(const TokenizerConfig& cfg);

}  // namespace lift3d::tokenizer

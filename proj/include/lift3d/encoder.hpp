#pragma once

#include "lift3d/masking.hpp"
#include "lift3d/nn/optim.hpp"
#include "lift3d/nn/tensor.hpp"
#include "lift3d/pe_lifting.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lift3d::encoder {

using nn::Matrix;
using nn::Tensor;

struct EncoderConfig {
  int layers = 2;
  int width = 32;
  int heads = 4;
  int grid = 14;
  int patch = 8;
  int channels = 3;
  int mlp_ratio = 2;
  int adapter_rank = 4;
  double adapter_scale = 1.0;

  int image_size() const { return grid * patch; }
  int tokens() const { return grid * grid; }
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Row-major H x W x C image with values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<double> data;
};

struct LinearParams {
  Tensor w;  // in x out
  Tensor b;  // 1 x out

  static LinearParams init(int in, int out, double stddev, std::uint64_t seed);
  Tensor operator()(const Tensor& x) const { return nn::linear(x, w, b); }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams init(int width);
  Tensor operator()(const Tensor& x) const { return nn::layer_norm(x, gamma, beta); }
};

/// Low-rank residual on a frozen linear map. `up` starts at zero.
struct AdapterParams {
  Tensor down;  // in x rank
  Tensor up;    // rank x out
};

struct BlockParams {
  LayerNormParams ln1;
  LinearParams qkv;
  LinearParams proj;
  LayerNormParams ln2;
  LinearParams fc1;
  LinearParams fc2;
  AdapterParams qkv_adapter;
  AdapterParams proj_adapter;
};

/// Pre-norm transformer block. Adapters are applied to the attention input
/// and output projections when `adapter_scale` is non-null.
Tensor transformer_block(const BlockParams& block, const Tensor& x, int heads, const double* adapter_scale);

/// Frozen 2D foundation model substitute: patch embedding, fixed 2D PE grid,
/// transformer blocks with adapter slots, final norm.
class Encoder2D {
 public:
  static Encoder2D init(const EncoderConfig& cfg, std::uint64_t seed);

  /// Deep copy; the clone shares no tensors with the original.
  Encoder2D clone() const;

  const EncoderConfig& config() const { return cfg_; }
  const pe::PEGrid& pe_grid() const { return grid_; }

  /// Patch embeddings of the listed patches plus their grid PEs.
  Tensor embed_patches(const Image& image, const std::vector<int>& patches) const;

  /// Runs the blocks and final norm over already-embedded tokens.
  Tensor forward(const Tensor& tokens, bool use_adapters) const;

  /// Image mode: embeds the plan's visible patches and encodes them.
  Tensor encode_visible(const Image& image, const masking::MaskPlan& plan, bool use_adapters = true) const;

  void collect_base(nn::ParamList& out, const std::string& prefix) const;
  void collect_adapters(nn::ParamList& out, const std::string& prefix) const;
  void set_base_trainable(bool on);
  void set_adapters_trainable(bool on);

  /// FNV-1a over the base weights' bytes, in collect order.
  std::uint64_t base_hash() const;

  std::vector<BlockParams>& blocks() { return blocks_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  LinearParams& patch_embed() { return patch_embed_; }
  LayerNormParams& final_norm() { return final_norm_; }
  pe::PEGrid& mutable_pe_grid() { return grid_; }

 private:
  EncoderConfig cfg_;
  LinearParams patch_embed_;
  pe::PEGrid grid_;
  std::vector<BlockParams> blocks_;
  LayerNormParams final_norm_;
};

std::uint64_t fnv1a(const nn::ParamList& params);

}  // namespace lift3d::encoder

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lift3d::masking {

inline constexpr double kDefaultTheta = 0.5;
inline constexpr double kDefaultRatio = 0.75;

/// Per-pixel task relevance in [0,1], row-major H x W.
struct AttentionMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;
  std::string source_text;

  double at(int r, int c) const { return values[static_cast<std::size_t>(r * width + c)]; }
};

/// Produces an attention map for a task description over an RGB image.
class AttentionProvider {
 public:
  virtual ~AttentionProvider() = default;
  virtual AttentionMap attend(const std::string& text, const std::vector<double>& rgb, int height, int width) const = 0;
};

/// Split of the patch tokens into visible, affordance-masked and
/// background-masked sets. All index lists are ascending.
struct MaskPlan {
  int total = 0;
  double theta = kDefaultTheta;
  double ratio = kDefaultRatio;
  std::vector<int> visible;
  std::vector<int> masked_affordance;
  std::vector<int> masked_background;

  /// Union of both masked sets, ascending.
  std::vector<int> masked() const;
};

/// Mean attention of each patch, patches in row-major order.
std::vector<double> patch_scores(const AttentionMap& attn, int patch);

int mask_target(int total, double ratio);

MaskPlan plan_mask(const std::vector<double>& scores, double theta, double ratio, std::uint64_t seed);

/// Plan that masks uniformly at random, ignoring scores.
MaskPlan plan_random_mask(int total, double ratio, std::uint64_t seed);

/// Every token visible; useful for unmasked forward passes.
MaskPlan plan_all_visible(int total);

/// 8-bit grayscale PGM (P5) encoding, value = round(255 * score).
std::vector<unsigned char> encode_pgm(const AttentionMap& attn);
AttentionMap decode_pgm(const std::vector<unsigned char>& bytes);

}  // namespace lift3d::masking

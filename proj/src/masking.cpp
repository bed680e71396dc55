#include "lift3d/masking.hpp"

#include "lift3d/error.hpp"
#include "lift3d/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lift3d::masking {

namespace {

// First `count` entries of a seeded Fisher-Yates shuffle of `pool`.
std::vector<int> sample(std::vector<int> pool, int count, Rng& rng) {
  for (int i = 0; i < count; ++i) {
    const auto remaining = static_cast<std::uint64_t>(pool.size() - static_cast<std::size_t>(i));
    const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(rng.below(remaining));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(count));
  std::sort(pool.begin(), pool.end());
  return pool;
}

void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("mask ratio must lie in (0, 1)");
}

void fill_visible(MaskPlan& plan) {
  std::vector<char> hidden(static_cast<std::size_t>(plan.total), 0);
  for (int i : plan.masked_affordance) hidden[static_cast<std::size_t>(i)] = 1;
  for (int i : plan.masked_background) hidden[static_cast<std::size_t>(i)] = 1;
  for (int i = 0; i < plan.total; ++i) {
    if (!hidden[static_cast<std::size_t>(i)]) plan.visible.push_back(i);
  }
}

}  // namespace

std::vector<int> MaskPlan::masked() const {
  std::vector<int> out;
  out.reserve(masked_affordance.size() + masked_background.size());
  std::merge(masked_affordance.begin(), masked_affordance.end(), masked_background.begin(), masked_background.end(),
             std::back_inserter(out));
  return out;
}

std::vector<double> patch_scores(const AttentionMap& attn, int patch) {
  if (patch < 1 || attn.height % patch != 0 || attn.width % patch != 0) {
    throw InvalidArgument("attention map " + std::to_string(attn.height) + "x" + std::to_string(attn.width) +
                          " is not divisible by patch " + std::to_string(patch));
  }
  if (attn.values.size() != static_cast<std::size_t>(attn.height) * static_cast<std::size_t>(attn.width)) {
    throw InvalidArgument("attention map size does not match its dimensions");
  }
  const int rows = attn.height / patch;
  const int cols = attn.width / patch;
  std::vector<double> scores;
  scores.reserve(static_cast<std::size_t>(rows * cols));
  for (int pr = 0; pr < rows; ++pr) {
    for (int pc = 0; pc < cols; ++pc) {
      double sum = 0.0;
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) sum += attn.at(pr * patch + y, pc * patch + x);
      }
      scores.push_back(sum / (patch * patch));
    }
  }
  return scores;
}

int mask_target(int total, double ratio) {
  check_ratio(ratio);
  // Guard against ratio * total landing a hair above an integer.
  const double exact = ratio * total;
  const double rounded = std::round(exact);
  const int target = std::abs(exact - rounded) < 1e-9 ? static_cast<int>(rounded) : static_cast<int>(std::ceil(exact));
  return std::clamp(target, 0, total);
}

MaskPlan plan_mask(const std::vector<double>& scores, double theta, double ratio, std::uint64_t seed) {
  MaskPlan plan;
  plan.total = static_cast<int>(scores.size());
  plan.theta = theta;
  plan.ratio = ratio;
  const int target = mask_target(plan.total, ratio);

  std::vector<int> affordance;
  std::vector<int> background;
  for (int i = 0; i < plan.total; ++i) {
    (scores[static_cast<std::size_t>(i)] >= theta ? affordance : background).push_back(i);
  }
  Rng rng(seed);
  const int n_aff = static_cast<int>(affordance.size());
  if (n_aff >= target) {
    plan.masked_affordance = sample(std::move(affordance), target, rng);
  } else {
    plan.masked_affordance = std::move(affordance);
    plan.masked_background = sample(std::move(background), target - n_aff, rng);
  }
  fill_visible(plan);
  return plan;
}

MaskPlan plan_random_mask(int total, double ratio, std::uint64_t seed) {
  return plan_mask(std::vector<double>(static_cast<std::size_t>(total), 0.0), 1.0, ratio, seed);
}

MaskPlan plan_all_visible(int total) {
  MaskPlan plan;
  plan.total = total;
  plan.ratio = 0.0;
  for (int i = 0; i < total; ++i) plan.visible.push_back(i);
  return plan;
}

std::vector<unsigned char> encode_pgm(const AttentionMap& attn) {
  std::ostringstream header;
  header << "P5\n" << attn.width << " " << attn.height << "\n255\n";
  const std::string h = header.str();
  std::vector<unsigned char> out(h.begin(), h.end());
  for (double v : attn.values) {
    out.push_back(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
  }
  return out;
}

AttentionMap decode_pgm(const std::vector<unsigned char>& bytes) {
  std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255 || width <= 0 || height <= 0) throw FormatError("not an 8-bit P5 PGM image");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  const auto pixels = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() < offset + pixels) throw FormatError("PGM pixel data is truncated");
  AttentionMap attn;
  attn.height = height;
  attn.width = width;
  attn.values.reserve(pixels);
  for (std::size_t i = 0; i < pixels; ++i) attn.values.push_back(bytes[offset + i] / 255.0);
  return attn;
}

}  // namespace lift3d::masking

#include "lift3d/tokenizer3d.hpp"

#include "lift3d/error.hpp"
#include "lift3d/rng.hpp"

#include <cmath>

namespace lift3d::tokenizer {

namespace {

constexpr int kColorChannels = 3;
constexpr int kOffsetChannels = 3;

Matrix gaussian(int rows, int cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

}  // namespace

void TokenizerConfig::validate() const {
  if (dims.empty() || dims.size() > 4) throw ConfigError("tokenizer needs between 1 and 4 layers");
  if (points.size() != dims.size()) throw ConfigError("tokenizer dims and points must have the same length");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i] < 1 || dims[i] < 1) throw ConfigError("tokenizer dims and point counts must be positive");
    if (i > 0 && points[i] >= points[i - 1]) throw ConfigError("tokenizer point counts must strictly decrease");
  }
  if (k_nn < 1) throw ConfigError("tokenizer k_nn must be positive");
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (k_nn > points[i - 1]) throw ConfigError("tokenizer k_nn exceeds the point count of a previous layer");
  }
  if (output_dim < 1) throw ConfigError("tokenizer output_dim must be positive");
}

TokenizerConfig TokenizerConfig::with_layers(int layers, int output_dim) {
  if (layers < 1 || layers > 4) throw ConfigError("tokenizer layers must be in 1..4");
  static constexpr int kDims[] = {192, 384, 768, 1536};
  TokenizerConfig cfg;
  cfg.dims.assign(kDims, kDims + layers);
  cfg.points.clear();
  for (int i = layers - 1; i >= 0; --i) cfg.points.push_back(128 << i);
  cfg.output_dim = output_dim;
  return cfg;
}

TokenizerParams TokenizerParams::init(const TokenizerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  TokenizerParams p;
  int in = kColorChannels;
  for (int out : cfg.dims) {
    const int fan_in = in + kOffsetChannels;
    Layer layer;
    layer.w = Tensor(gaussian(fan_in, out, std::sqrt(2.0 / fan_in), rng), true);
    layer.b = Tensor::zeros(1, out, true);
    if (cfg.norm) {
      layer.gamma = Tensor(Matrix::Ones(1, out), true);
      layer.beta = Tensor::zeros(1, out, true);
    }
    p.layers.push_back(std::move(layer));
    in = out;
  }
  if (in != cfg.output_dim) {
    p.out_w = Tensor(gaussian(in, cfg.output_dim, std::sqrt(1.0 / in), rng), true);
    p.out_b = Tensor::zeros(1, cfg.output_dim, true);
  }
  return p;
}

void TokenizerParams::collect(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + "layer" + std::to_string(i) + ".";
    out.push_back({base + "w", layers[i].w});
    out.push_back({base + "b", layers[i].b});
    if (layers[i].gamma.defined()) {
      out.push_back({base + "gamma", layers[i].gamma});
      out.push_back({base + "beta", layers[i].beta});
    }
  }
  if (out_w.defined()) {
    out.push_back({prefix + "out.w", out_w});
    out.push_back({prefix + "out.b", out_b});
  }
}

void TokenizerParams::set_trainable(bool on) {
  nn::ParamList all;
  collect(all, "");
  for (auto& p : all) p.tensor.set_requires_grad(on);
}

TokenizerPlan plan_tokenizer(const geometry::PointCloud& normalized, const TokenizerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (normalized.size() < cfg.points.front()) {
    throw InvalidArgument("tokenizer needs at least " + std::to_string(cfg.points.front()) + " points, got " +
                          std::to_string(normalized.size()));
  }
  TokenizerPlan plan;
  plan.coords.push_back(normalized.points);
  plan.input_colors = normalized.colors;
  for (int count : cfg.points) {
    const auto& prev = plan.coords.back();
    TokenizerPlan::Level level;
    level.centers = geometry::farthest_point_sample(prev, count, seed);
    geometry::Points centers(count, 3);
    for (int i = 0; i < count; ++i) centers.row(i) = prev.row(level.centers[static_cast<std::size_t>(i)]);
    level.k = std::min<int>(cfg.k_nn, static_cast<int>(prev.rows()));
    level.neighbors = geometry::knn_group(centers, prev, level.k);
    plan.levels.push_back(std::move(level));
    plan.coords.push_back(std::move(centers));
  }
  return plan;
}

TokenSet3D encode_tokens(const TokenizerPlan& plan, const TokenizerConfig& cfg, const TokenizerParams& params) {
  if (params.layers.size() != plan.levels.size()) throw InvalidArgument("tokenizer params do not match the plan");
  for (const auto& layer : params.layers) {
    if (!layer.w.value().allFinite() || !layer.b.value().allFinite()) {
      throw InvalidArgument("tokenizer weights are not finite");
    }
  }
  Tensor features = Tensor::constant(plan.input_colors);
  for (std::size_t l = 0; l < plan.levels.size(); ++l) {
    const auto& level = plan.levels[l];
    const auto& prev = plan.coords[l];
    const auto& centers = plan.coords[l + 1];
    const auto rows = static_cast<Eigen::Index>(level.neighbors.size());
    Matrix offsets(rows, 3);
    for (Eigen::Index r = 0; r < rows; ++r) {
      offsets.row(r) = prev.row(level.neighbors[static_cast<std::size_t>(r)]) - centers.row(r / level.k);
    }
    Tensor grouped = nn::concat_cols({nn::gather_rows(features, level.neighbors), Tensor::constant(offsets)});
    const auto& p = params.layers[l];
    Tensor h = nn::linear(grouped, p.w, p.b);
    if (cfg.norm) h = nn::layer_norm(h, p.gamma, p.beta);
    features = nn::group_max(nn::gelu(h), level.k);
  }
  if (params.out_w.defined()) features = nn::linear(features, params.out_w, params.out_b);
  return {features, plan.token_centers()};
}

TokenSet3D tokenize(const geometry::PointCloud& normalized, const TokenizerConfig& cfg, const TokenizerParams& params,
                    std::uint64_t seed) {
  return encode_tokens(plan_tokenizer(normalized, cfg, seed), cfg, params);
}

long tokenizer_param_count(const TokenizerConfig& cfg) {
  cfg.validate();
  long total = 0;
  long in = kColorChannels;
  for (int out : cfg.dims) {
    total += (in + kOffsetChannels) * out + out;
    if (cfg.norm) total += 2L * out;
    in = out;
  }
  if (in != cfg.output_dim) total += in * cfg.output_dim + cfg.output_dim;
  return total;
}

}  // namespace lift3d::tokenizer

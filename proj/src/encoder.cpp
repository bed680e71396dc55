#include "lift3d/encoder.hpp"

#include "lift3d/error.hpp"
#include "lift3d/rng.hpp"

#include <cmath>
#include <cstring>

namespace lift3d::encoder {

void EncoderConfig::validate() const {
  if (layers < 0 || width < 1 || heads < 1 || grid < 1 || patch < 1 || channels < 1 || mlp_ratio < 1) {
    throw ConfigError("encoder dimensions must be positive");
  }
  if (width % heads != 0) throw ConfigError("encoder width must be divisible by heads");
  if (adapter_rank < 1) throw ConfigError("adapter rank must be positive");
}

LinearParams LinearParams::init(int in, int out, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = stddev * rng.normal();
  return {Tensor(std::move(w), false), Tensor::zeros(1, out, false)};
}

LayerNormParams LayerNormParams::init(int width) {
  return {Tensor(Matrix::Ones(1, width), false), Tensor::zeros(1, width, false)};
}

Tensor transformer_block(const BlockParams& block, const Tensor& x, int heads, const double* adapter_scale) {
  const auto width = x.cols();
  const auto head_dim = width / heads;

  auto project = [&](const Tensor& in, const LinearParams& lin, const AdapterParams& ad) {
    if (adapter_scale != nullptr) return nn::lora_linear(in, lin.w, lin.b, ad.down, ad.up, *adapter_scale);
    return lin(in);
  };

  const Tensor qkv = project(block.ln1(x), block.qkv, block.qkv_adapter);
  std::vector<Tensor> outputs;
  outputs.reserve(static_cast<std::size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int h = 0; h < heads; ++h) {
    const Tensor q = nn::slice_cols(qkv, h * head_dim, head_dim);
    const Tensor k = nn::slice_cols(qkv, width + h * head_dim, head_dim);
    const Tensor v = nn::slice_cols(qkv, 2 * width + h * head_dim, head_dim);
    const Tensor attn = nn::softmax_rows(nn::scale(nn::matmul(q, nn::transpose(k)), inv_sqrt));
    outputs.push_back(nn::matmul(attn, v));
  }
  const Tensor merged = heads == 1 ? outputs.front() : nn::concat_cols(outputs);
  const Tensor after_attn = nn::add(x, project(merged, block.proj, block.proj_adapter));
  const Tensor hidden = nn::gelu(block.fc1(block.ln2(after_attn)));
  return nn::add(after_attn, block.fc2(hidden));
}

Encoder2D Encoder2D::init(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Encoder2D enc;
  enc.cfg_ = cfg;
  const int d = cfg.width;
  const int patch_dim = cfg.patch * cfg.patch * cfg.channels;
  std::uint64_t stream = 0;
  auto next_seed = [&] { return Rng::derive(seed, stream++); };

  enc.patch_embed_ = LinearParams::init(patch_dim, d, 1.0 / std::sqrt(patch_dim), next_seed());
  if (d % 4 == 0) {
    enc.grid_ = pe::sincos_grid(cfg.grid, d);
  } else {
    Rng rng(next_seed());
    enc.grid_.side = cfg.grid;
    enc.grid_.embeddings.resize(cfg.tokens(), d);
    for (Eigen::Index i = 0; i < enc.grid_.embeddings.size(); ++i) enc.grid_.embeddings.data()[i] = 0.02 * rng.normal();
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const int hidden = d * cfg.mlp_ratio;
  for (int l = 0; l < cfg.layers; ++l) {
    BlockParams b;
    b.ln1 = LayerNormParams::init(d);
    b.qkv = LinearParams::init(d, 3 * d, s, next_seed());
    b.proj = LinearParams::init(d, d, s, next_seed());
    b.ln2 = LayerNormParams::init(d);
    b.fc1 = LinearParams::init(d, hidden, s, next_seed());
    b.fc2 = LinearParams::init(hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)), next_seed());
    auto adapter = [&](int out) {
      Rng rng(next_seed());
      Matrix down(d, cfg.adapter_rank);
      for (Eigen::Index i = 0; i < down.size(); ++i) down.data()[i] = s * rng.normal();
      return AdapterParams{Tensor(std::move(down), true), Tensor::zeros(cfg.adapter_rank, out, true)};
    };
    b.qkv_adapter = adapter(3 * d);
    b.proj_adapter = adapter(d);
    enc.blocks_.push_back(std::move(b));
  }
  enc.final_norm_ = LayerNormParams::init(d);
  return enc;
}

Encoder2D Encoder2D::clone() const {
  Encoder2D out = *this;
  // Rebuild every tensor handle so nothing aliases the source nodes.
  auto remake = [](Tensor& t) { t = t.detach_copy(t.requires_grad()); };
  remake(out.patch_embed_.w);
  remake(out.patch_embed_.b);
  for (auto& b : out.blocks_) {
    for (Tensor* t : {&b.ln1.gamma, &b.ln1.beta, &b.qkv.w, &b.qkv.b, &b.proj.w, &b.proj.b, &b.ln2.gamma, &b.ln2.beta,
                      &b.fc1.w, &b.fc1.b, &b.fc2.w, &b.fc2.b, &b.qkv_adapter.down, &b.qkv_adapter.up,
                      &b.proj_adapter.down, &b.proj_adapter.up}) {
      remake(*t);
    }
  }
  remake(out.final_norm_.gamma);
  remake(out.final_norm_.beta);
  return out;
}

Tensor Encoder2D::embed_patches(const Image& image, const std::vector<int>& patches) const {
  const int size = cfg_.image_size();
  if (image.height != size || image.width != size || image.channels != cfg_.channels) {
    throw InvalidArgument("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          ", encoder expects " + std::to_string(size) + "x" + std::to_string(size));
  }
  const int p = cfg_.patch;
  const int c = cfg_.channels;
  Matrix rows(static_cast<Eigen::Index>(patches.size()), p * p * c);
  Matrix pe(static_cast<Eigen::Index>(patches.size()), cfg_.width);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const int idx = patches[i];
    if (idx < 0 || idx >= cfg_.tokens()) throw InvalidArgument("patch index out of range");
    const int pr = idx / cfg_.grid;
    const int pc = idx % cfg_.grid;
    int col = 0;
    for (int y = 0; y < p; ++y) {
      for (int x = 0; x < p; ++x) {
        const auto base = (static_cast<std::size_t>(pr * p + y) * static_cast<std::size_t>(size) +
                           static_cast<std::size_t>(pc * p + x)) *
                          static_cast<std::size_t>(c);
        for (int ch = 0; ch < c; ++ch) rows(static_cast<Eigen::Index>(i), col++) = image.data[base + ch];
      }
    }
    pe.row(static_cast<Eigen::Index>(i)) = grid_.embeddings.row(idx);
  }
  return nn::add(patch_embed_(Tensor::constant(rows)), Tensor::constant(pe));
}

Tensor Encoder2D::forward(const Tensor& tokens, bool use_adapters) const {
  if (tokens.cols() != cfg_.width) throw InvalidArgument("token width does not match the encoder width");
  const double* scale = use_adapters ? &cfg_.adapter_scale : nullptr;
  Tensor x = tokens;
  for (const auto& b : blocks_) x = transformer_block(b, x, cfg_.heads, scale);
  return final_norm_(x);
}

Tensor Encoder2D::encode_visible(const Image& image, const masking::MaskPlan& plan, bool use_adapters) const {
  if (plan.total != cfg_.tokens()) {
    throw InvalidArgument("mask plan covers " + std::to_string(plan.total) + " tokens, encoder grid has " +
                          std::to_string(cfg_.tokens()));
  }
  return forward(embed_patches(image, plan.visible), use_adapters);
}

void Encoder2D::collect_base(nn::ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "patch_embed.w", patch_embed_.w});
  out.push_back({prefix + "patch_embed.b", patch_embed_.b});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string p = prefix + "block" + std::to_string(i) + ".";
    out.push_back({p + "ln1.gamma", b.ln1.gamma});
    out.push_back({p + "ln1.beta", b.ln1.beta});
    out.push_back({p + "qkv.w", b.qkv.w});
    out.push_back({p + "qkv.b", b.qkv.b});
    out.push_back({p + "proj.w", b.proj.w});
    out.push_back({p + "proj.b", b.proj.b});
    out.push_back({p + "ln2.gamma", b.ln2.gamma});
    out.push_back({p + "ln2.beta", b.ln2.beta});
    out.push_back({p + "fc1.w", b.fc1.w});
    out.push_back({p + "fc1.b", b.fc1.b});
    out.push_back({p + "fc2.w", b.fc2.w});
    out.push_back({p + "fc2.b", b.fc2.b});
  }
  out.push_back({prefix + "norm.gamma", final_norm_.gamma});
  out.push_back({prefix + "norm.beta", final_norm_.beta});
}

void Encoder2D::collect_adapters(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string p = prefix + "block" + std::to_string(i) + ".";
    out.push_back({p + "qkv_adapter.down", b.qkv_adapter.down});
    out.push_back({p + "qkv_adapter.up", b.qkv_adapter.up});
    out.push_back({p + "proj_adapter.down", b.proj_adapter.down});
    out.push_back({p + "proj_adapter.up", b.proj_adapter.up});
  }
}

void Encoder2D::set_base_trainable(bool on) {
  nn::ParamList all;
  collect_base(all, "");
  for (auto& p : all) p.tensor.set_requires_grad(on);
}

void Encoder2D::set_adapters_trainable(bool on) {
  nn::ParamList all;
  collect_adapters(all, "");
  for (auto& p : all) p.tensor.set_requires_grad(on);
}

std::uint64_t fnv1a(const nn::ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor.value().data());
    const auto n = static_cast<std::size_t>(p.tensor.value().size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t Encoder2D::base_hash() const {
  nn::ParamList all;
  collect_base(all, "");
  return fnv1a(all);
}

}  // namespace lift3d::encoder

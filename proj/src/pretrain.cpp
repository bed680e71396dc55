#include "lift3d/pretrain.hpp"

#include "lift3d/error.hpp"
#include "lift3d/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace lift3d::pretrain {

int target_channels(TargetKind kind) {
  switch (kind) {
    case TargetKind::kDepth: return 1;
    case TargetKind::kRgb: return 3;
    case TargetKind::kBoth: return 4;
  }
  return 1;
}

DepthDecoder DepthDecoder::init(const EncoderConfig& enc, const DecoderConfig& cfg, int out_channels,
                                std::uint64_t seed) {
  const int d = cfg.resolved_width(enc.width);
  if (d < 1 || cfg.heads < 1 || d % cfg.heads != 0) throw ConfigError("decoder width must be divisible by its heads");
  std::uint64_t stream = 0;
  auto next_seed = [&] { return Rng::derive(seed, stream++); };
  const double s = 1.0 / std::sqrt(static_cast<double>(d));

  DepthDecoder dec;
  dec.heads_ = cfg.heads;
  dec.embed_ = encoder::LinearParams::init(enc.width, d, 1.0 / std::sqrt(static_cast<double>(enc.width)), next_seed());
  {
    Rng rng(next_seed());
    Matrix token(1, d);
    for (Eigen::Index i = 0; i < d; ++i) token(0, i) = 0.02 * rng.normal();
    dec.mask_token_ = Tensor(std::move(token), true);
  }
  if (d % 4 == 0) {
    dec.pe_ = pe::sincos_grid(enc.grid, d).embeddings;
  } else {
    Rng rng(next_seed());
    dec.pe_.resize(enc.tokens(), d);
    for (Eigen::Index i = 0; i < dec.pe_.size(); ++i) dec.pe_.data()[i] = 0.02 * rng.normal();
  }
  for (int l = 0; l < cfg.layers; ++l) {
    encoder::BlockParams b;
    b.ln1 = encoder::LayerNormParams::init(d);
    b.qkv = encoder::LinearParams::init(d, 3 * d, s, next_seed());
    b.proj = encoder::LinearParams::init(d, d, s, next_seed());
    b.ln2 = encoder::LayerNormParams::init(d);
    b.fc1 = encoder::LinearParams::init(d, 2 * d, s, next_seed());
    b.fc2 = encoder::LinearParams::init(2 * d, d, 1.0 / std::sqrt(2.0 * d), next_seed());
    dec.blocks_.push_back(std::move(b));
  }
  dec.norm_ = encoder::LayerNormParams::init(d);
  const int out = enc.patch * enc.patch * out_channels;
  dec.head_ = encoder::LinearParams::init(d, out, s, next_seed());
  dec.set_trainable(true);
  return dec;
}

Tensor DepthDecoder::decode(const Tensor& visible_features, const masking::MaskPlan& plan) const {
  if (visible_features.rows() != static_cast<Eigen::Index>(plan.visible.size())) {
    throw InvalidArgument("visible feature count does not match the mask plan");
  }
  if (plan.total != pe_.rows()) throw InvalidArgument("mask plan does not match the decoder grid");
  const std::vector<int> masked = plan.masked();
  const Tensor visible = embed_(visible_features);
  const std::vector<int> zeros(masked.size(), 0);
  const Tensor fill = nn::gather_rows(mask_token_, zeros);

  // Sequence rows are [visible..., masked...]; reorder to grid order.
  std::vector<int> to_grid(static_cast<std::size_t>(plan.total));
  for (std::size_t i = 0; i < plan.visible.size(); ++i) to_grid[static_cast<std::size_t>(plan.visible[i])] = static_cast<int>(i);
  for (std::size_t i = 0; i < masked.size(); ++i) {
    to_grid[static_cast<std::size_t>(masked[i])] = static_cast<int>(plan.visible.size() + i);
  }
  Tensor x = nn::gather_rows(nn::concat_rows({visible, fill}), to_grid);
  x = nn::add(x, Tensor::constant(pe_));
  for (const auto& b : blocks_) x = encoder::transformer_block(b, x, heads_, nullptr);
  return head_(norm_(nn::gather_rows(x, masked)));
}

void DepthDecoder::collect(nn::ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "embed.w", embed_.w});
  out.push_back({prefix + "embed.b", embed_.b});
  out.push_back({prefix + "mask_token", mask_token_});
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
  out.push_back({prefix + "norm.gamma", norm_.gamma});
  out.push_back({prefix + "norm.beta", norm_.beta});
  out.push_back({prefix + "head.w", head_.w});
  out.push_back({prefix + "head.b", head_.b});
}

void DepthDecoder::set_trainable(bool on) {
  nn::ParamList all;
  collect(all, "");
  for (auto& p : all) p.tensor.set_requires_grad(on);
}

std::vector<double> normalize_depth(const std::vector<double>& depth, std::vector<char>* valid) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  std::vector<char> ok(depth.size(), 0);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (std::isfinite(depth[i]) && depth[i] > 0.0) {
      ok[i] = 1;
      lo = std::min(lo, depth[i]);
      hi = std::max(hi, depth[i]);
    }
  }
  const double range = hi - lo;
  std::vector<double> out(depth.size(), 0.0);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (ok[i]) out[i] = range > 0.0 ? (depth[i] - lo) / range : 0.0;
  }
  if (valid != nullptr) *valid = std::move(ok);
  return out;
}

ReconTarget make_target(const PretrainRecord& record, const masking::MaskPlan& plan, int patch, TargetKind kind) {
  const int grid_w = record.width / patch;
  if (record.width % patch != 0 || record.height % patch != 0 || (record.height / patch) * grid_w != plan.total) {
    throw InvalidArgument("record size does not match the mask plan grid");
  }
  std::vector<char> valid;
  const std::vector<double> depth = normalize_depth(record.depth, &valid);
  const int channels = target_channels(kind);
  const int pp = patch * patch;
  const std::vector<int> masked = plan.masked();

  ReconTarget t;
  t.values = Matrix::Zero(static_cast<Eigen::Index>(masked.size()), pp * channels);
  t.valid = Matrix::Zero(t.values.rows(), t.values.cols());
  for (std::size_t m = 0; m < masked.size(); ++m) {
    const int pr = masked[m] / grid_w;
    const int pc = masked[m] % grid_w;
    const auto row = static_cast<Eigen::Index>(m);
    for (int y = 0; y < patch; ++y) {
      for (int x = 0; x < patch; ++x) {
        const auto pix = static_cast<std::size_t>((pr * patch + y) * record.width + pc * patch + x);
        const int j = y * patch + x;
        int col = 0;
        if (kind != TargetKind::kRgb) {
          t.values(row, j) = depth[pix];
          t.valid(row, j) = valid[pix] ? 1.0 : 0.0;
          col = pp;
        }
        if (kind != TargetKind::kDepth) {
          for (int ch = 0; ch < 3; ++ch) {
            t.values(row, col + 3 * j + ch) = record.image[3 * pix + static_cast<std::size_t>(ch)];
            t.valid(row, col + 3 * j + ch) = 1.0;
          }
        }
      }
    }
  }
  return t;
}

encoder::Image record_image(const PretrainRecord& record) {
  return {record.height, record.width, 3, record.image};
}

masking::AttentionMap record_attention(const PretrainRecord& record) {
  return {record.height, record.width, record.attention, record.text};
}

ImplicitLoss implicit_loss(const Tensor& enc_out, const Tensor& ref_out, const Tensor& pred, const ReconTarget& target,
                           double w_distill, double w_recon) {
  if (pred.rows() == 0) throw InvalidArgument("implicit loss needs at least one masked token");
  const Tensor distill = nn::mean_abs_diff(enc_out, ref_out);
  const Tensor recon = nn::masked_mean_abs_diff(pred, target.values, target.valid);
  ImplicitLoss out;
  out.total = nn::add(nn::scale(distill, w_distill), nn::scale(recon, w_recon));
  out.terms = {distill.item(), recon.item(), out.total.item()};
  return out;
}

PretrainState init_pretrain(const PretrainConfig& cfg, std::uint64_t seed) {
  Encoder2D enc = Encoder2D::init(cfg.encoder, Rng::derive(seed, 1));
  Encoder2D ref = enc.clone();
  ref.set_base_trainable(false);
  ref.set_adapters_trainable(false);
  DepthDecoder dec = DepthDecoder::init(cfg.encoder, cfg.decoder, target_channels(cfg.target), Rng::derive(seed, 2));
  return {std::move(enc), std::move(ref), std::move(dec)};
}

masking::MaskPlan plan_for_record(const PretrainRecord& record, const PretrainConfig& cfg, std::uint64_t seed) {
  const auto scores = masking::patch_scores(record_attention(record), cfg.encoder.patch);
  if (!cfg.affordance_masking) return masking::plan_random_mask(static_cast<int>(scores.size()), cfg.ratio, seed);
  return masking::plan_mask(scores, cfg.theta, cfg.ratio, seed);
}

ImplicitLoss record_loss(const PretrainState& state, const PretrainRecord& record, const masking::MaskPlan& plan,
                         const PretrainConfig& cfg) {
  const encoder::Image image = record_image(record);
  const Tensor enc_out = state.encoder.encode_visible(image, plan, true);
  const Tensor ref_out = state.reference.encode_visible(image, plan, false);
  const Tensor pred = state.decoder.decode(enc_out, plan);
  return implicit_loss(enc_out, ref_out, pred, make_target(record, plan, cfg.encoder.patch, cfg.target), cfg.w_distill,
                       cfg.w_recon);
}

LossTerms evaluate(const PretrainState& state, const std::vector<PretrainRecord>& records, const PretrainConfig& cfg,
                   std::uint64_t seed) {
  LossTerms sum;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto plan = plan_for_record(records[i], cfg, Rng::derive(seed, i));
    const auto loss = record_loss(state, records[i], plan, cfg);
    sum.distill += loss.terms.distill;
    sum.recon += loss.terms.recon;
    sum.total += loss.terms.total;
  }
  const double n = static_cast<double>(std::max<std::size_t>(records.size(), 1));
  return {sum.distill / n, sum.recon / n, sum.total / n};
}

std::vector<StepLog> pretrain_run(PretrainState& state, const std::vector<PretrainRecord>& records,
                                  const PretrainConfig& cfg, std::uint64_t seed,
                                  const std::function<void(const StepLog&)>& on_log, const StepHook& on_step) {
  if (records.empty()) throw InvalidArgument("pretraining needs at least one record");
  if (cfg.batch < 1 || cfg.steps < 0) throw ConfigError("pretrain batch must be positive and steps non-negative");

  state.encoder.set_base_trainable(false);
  state.encoder.set_adapters_trainable(cfg.train_adapters);
  state.decoder.set_trainable(cfg.train_decoder);

  nn::ParamList named;
  if (cfg.train_adapters) state.encoder.collect_adapters(named, "");
  if (cfg.train_decoder) state.decoder.collect(named, "");
  std::vector<Tensor> params;
  for (auto& p : named) params.push_back(p.tensor);
  nn::AdamOptions opt = cfg.optim;
  opt.total_steps = cfg.steps;
  nn::Adam adam(params, opt);

  std::vector<std::size_t> order(records.size());
  std::size_t cursor = order.size();
  long epoch = 0;
  auto next_record = [&] {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(Rng::derive(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch++)));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<StepLog> log;
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> losses;
    LossTerms terms;
    for (int b = 0; b < cfg.batch; ++b) {
      const std::size_t r = next_record();
      const auto plan = plan_for_record(
          records[r], cfg, Rng::derive(seed, static_cast<std::uint64_t>(step) * 4096ULL + static_cast<std::uint64_t>(b)));
      auto loss = record_loss(state, records[r], plan, cfg);
      losses.push_back(loss.total);
      terms.distill += loss.terms.distill / cfg.batch;
      terms.recon += loss.terms.recon / cfg.batch;
      terms.total += loss.terms.total / cfg.batch;
    }
    if (!std::isfinite(terms.total)) {
      throw NonFiniteLossError("non-finite pretraining loss at step " + std::to_string(step) +
                               " (distill=" + std::to_string(terms.distill) + ", recon=" + std::to_string(terms.recon) +
                               ")");
    }
    const double lr = adam.current_lr();
    if (!params.empty()) {
      Tensor total = losses.front();
      for (std::size_t i = 1; i < losses.size(); ++i) total = nn::add(total, losses[i]);
      nn::scale(total, 1.0 / cfg.batch).backward();
      adam.step();
    }
    if (step % std::max(cfg.log_every, 1) == 0 || step + 1 == cfg.steps) {
      StepLog entry{step, terms, lr};
      log.push_back(entry);
      if (on_log) on_log(entry);
    }
    if (on_step) on_step(step, state);
  }
  return log;
}

}  // namespace lift3d::pretrain

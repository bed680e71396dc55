#include "lift3d/policy.hpp"

#include "lift3d/error.hpp"
#include "lift3d/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Geometry>

namespace lift3d::policy {

PolicyHead PolicyHead::init(int width, int state_dim, int hidden, std::uint64_t seed) {
  auto std_for = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  PolicyHead h;
  h.pointer_query = Tensor(Matrix::Zero(1, width), true);
  h.pointer = Tensor(Matrix::Identity(3, 3), true);
  h.state_embed = encoder::LinearParams::init(state_dim, width, std_for(state_dim), Rng::derive(seed, 0));
  h.l1 = encoder::LinearParams::init(2 * width, hidden, std_for(2 * width), Rng::derive(seed, 1));
  h.l2 = encoder::LinearParams::init(hidden, hidden, std_for(hidden), Rng::derive(seed, 2));
  h.l3 = encoder::LinearParams::init(hidden, 7, 0.1 * std_for(hidden), Rng::derive(seed, 3));
  h.set_trainable(true);
  return h;
}

void PolicyHead::collect(nn::ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "pointer_query", pointer_query});
  out.push_back({prefix + "pointer", pointer});
  out.push_back({prefix + "state_embed.w", state_embed.w});
  out.push_back({prefix + "state_embed.b", state_embed.b});
  out.push_back({prefix + "l1.w", l1.w});
  out.push_back({prefix + "l1.b", l1.b});
  out.push_back({prefix + "l2.w", l2.w});
  out.push_back({prefix + "l2.b", l2.b});
  out.push_back({prefix + "l3.w", l3.w});
  out.push_back({prefix + "l3.b", l3.b});
}

void PolicyHead::set_trainable(bool on) {
  nn::ParamList all;
  collect(all, "");
  for (auto& p : all) p.tensor.set_requires_grad(on);
}

Tensor encode_pointcloud(const Encoder2D& enc, const tokenizer::TokenSet3D& tokens, const pe::VirtualPlaneSet& planes,
                         bool use_adapters, const Tensor* learned_pe) {
  if (tokens.features.cols() != enc.config().width) {
    throw InvalidArgument("token width " + std::to_string(tokens.features.cols()) + " does not match encoder width " +
                          std::to_string(enc.config().width));
  }
  Tensor pos;
  if (learned_pe != nullptr) {
    if (learned_pe->rows() != tokens.features.rows()) throw InvalidArgument("learnable PE table has the wrong token count");
    pos = *learned_pe;
  } else {
    pos = Tensor::constant(pe::lift_positional_embedding(tokens.centers, planes, enc.pe_grid()));
  }
  return enc.forward(nn::add(tokens.features, pos), use_adapters);
}

Tensor predict_action_tensor(const PolicyHead& head, const Tensor& features, const Matrix& centers,
                             const Eigen::VectorXd& state, const geometry::CubeFrame& frame, double pointer_gain) {
  if (centers.rows() != features.rows() || centers.cols() != 3) {
    throw InvalidArgument("predict_action: need one 3D center per token");
  }
  // Pointer weights sigmoid(s_i) / sum_j sigmoid(s_j), uniform while the query is zero.
  const Tensor scores = nn::scale(nn::matmul(features, nn::transpose(head.pointer_query)), pointer_gain);
  const Tensor weights = nn::softmax_rows(nn::transpose(nn::log_sigmoid(scores)));
  const Tensor pooled = nn::mean_rows(features);
  const Tensor attended = nn::matmul(weights, Tensor::constant(centers));

  const Tensor embedded = head.state_embed(Tensor::constant(state.transpose()));
  Tensor h = nn::concat_cols({pooled, embedded});
  h = nn::gelu(head.l1(h));
  h = nn::gelu(head.l2(h));
  const Tensor raw = head.l3(h);
  const Tensor t_cube = nn::add(nn::slice_cols(raw, 0, 3), nn::matmul(attended, head.pointer));
  const Tensor t = nn::add_row(nn::scale(t_cube, frame.scale), Tensor::constant(frame.center.transpose()));
  const Tensor r = nn::slice_cols(raw, 3, 3);
  const Tensor g = nn::sigmoid(nn::slice_cols(raw, 6, 1));
  return nn::concat_cols({t, r, g});
}

Pose7DoF predict_action(const PolicyHead& head, const Tensor& features, const Matrix& centers, const RobotState& state,
                        const geometry::CubeFrame& frame, double pointer_gain) {
  const Tensor out = predict_action_tensor(head, features, centers, state.vector(), frame, pointer_gain);
  return Pose7DoF::from_vector(out.value().row(0).transpose());
}

ExplicitLoss explicit_loss(const Tensor& pred, const Pose7DoF& gt, const LossWeights& weights) {
  if (pred.rows() != 1 || pred.cols() != 7) throw InvalidArgument("explicit_loss expects a 1x7 prediction");
  if (!pred.value().allFinite() || !gt.vector().allFinite()) throw InvalidArgument("explicit_loss: non-finite input");
  const Eigen::Matrix<double, 7, 1> p = pred.value().row(0).transpose();
  const Eigen::Vector3d dt = p.head<3>() - gt.translation;
  const Eigen::Vector3d rp = p.segment<3>(3);
  const Eigen::Vector3d& rg = gt.rotation;
  const double rp_norm = rp.norm();
  const double rg_norm = rg.norm();
  const double g_raw = p(6);
  const double g = std::clamp(g_raw, kGripperEps, 1.0 - kGripperEps);
  const double y = gt.gripper;

  ExplicitTerms terms;
  terms.translation = dt.squaredNorm() / 3.0;
  double cosine = 0.0;
  const bool rotation_active = rg_norm > 0.0;
  if (rotation_active) {
    cosine = rp_norm > 0.0 ? rp.dot(rg) / (rp_norm * rg_norm) : 0.0;
    terms.rotation = 1.0 - cosine;
  }
  terms.gripper = -(y * std::log(g) + (1.0 - y) * std::log(1.0 - g));
  terms.total = weights.translation * terms.translation + weights.rotation * terms.rotation +
                weights.gripper * terms.gripper;

  Matrix grad = Matrix::Zero(1, 7);
  grad.block<1, 3>(0, 0) = (weights.translation * 2.0 / 3.0) * dt.transpose();
  if (rotation_active && rp_norm > 0.0) {
    const Eigen::Vector3d dcos = rg / (rp_norm * rg_norm) - cosine * rp / (rp_norm * rp_norm);
    grad.block<1, 3>(0, 3) = -weights.rotation * dcos.transpose();
  }
  if (g_raw > kGripperEps && g_raw < 1.0 - kGripperEps) {
    grad(0, 6) = weights.gripper * (-y / g + (1.0 - y) / (1.0 - g));
  }
  Matrix value(1, 1);
  value(0, 0) = terms.total;
  Tensor total = Tensor::make(std::move(value), {pred}, [grad](nn::Node& n) {
    n.inputs[0]->accumulate(grad * n.grad(0, 0));
  });
  return {total, terms};
}

ExplicitTerms explicit_loss(const Pose7DoF& pred, const Pose7DoF& gt, const LossWeights& weights) {
  return explicit_loss(Tensor::constant(pred.vector().transpose()), gt, weights).terms;
}

PreparedObservation prepare(const geometry::PointCloud& cloud, const RobotState& state, const PolicyConfig& cfg,
                            std::uint64_t seed) {
  auto [normalized, frame] = geometry::normalize_to_cube(cloud);
  return {frame, tokenizer::plan_tokenizer(normalized, cfg.tokenizer, seed), state.vector()};
}

namespace {

Eigen::Matrix3d rotation_z(double angle) {
  return Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

}  // namespace

PreparedObservation rotate_about_vertical(const PreparedObservation& obs, double angle) {
  const Eigen::Matrix3d rot = rotation_z(angle);
  geometry::PointCloud world;
  world.points = geometry::Points(obs.plan.coords.front().rows(), 3);
  for (Eigen::Index i = 0; i < world.points.rows(); ++i) {
    world.points.row(i) = (rot * obs.frame.to_world(obs.plan.coords.front().row(i).transpose())).transpose();
  }
  world.colors = obs.plan.input_colors;
  auto [normalized, frame] = geometry::normalize_to_cube(world);

  PreparedObservation out;
  out.frame = frame;
  out.plan = obs.plan;
  out.plan.coords.front() = normalized.points;
  for (std::size_t l = 0; l < out.plan.levels.size(); ++l) {
    const auto& centers = out.plan.levels[l].centers;
    for (std::size_t i = 0; i < centers.size(); ++i) {
      out.plan.coords[l + 1].row(static_cast<Eigen::Index>(i)) = out.plan.coords[l].row(centers[i]);
    }
  }

  const int joints = envdata::kJoints;
  if (obs.state.size() != 7 + 2 * joints) throw InvalidArgument("rotate_about_vertical: unexpected state layout");
  out.state = obs.state;
  out.state.segment<3>(0) = rot * obs.state.segment<3>(0);
  out.state.segment<3>(3) = rot * obs.state.segment<3>(3);
  const double azimuth = std::atan2(out.state(1), out.state(0));
  const double previous = obs.state(7) - obs.state(7 + joints);
  out.state(7) = azimuth;
  out.state(7 + joints) = azimuth - previous;
  return out;
}

Pose7DoF rotate_about_vertical(const Pose7DoF& pose, double angle) {
  const Eigen::Matrix3d rot = rotation_z(angle);
  return {rot * pose.translation, rot * pose.rotation, pose.gripper};
}

PolicyModel PolicyModel::init(const PolicyConfig& cfg_in, std::uint64_t seed) {
  PolicyModel m;
  m.cfg = cfg_in;
  m.cfg.tokenizer.output_dim = m.cfg.encoder.width;
  m.cfg.tokenizer.validate();
  m.planes = pe::VirtualPlaneSet::standard(m.cfg.planes);
  m.tokenizer = tokenizer::TokenizerParams::init(m.cfg.tokenizer, Rng::derive(seed, 10));
  // Same stream as init_pretrain: both stages start from one frozen base.
  m.encoder = Encoder2D::init(m.cfg.encoder, Rng::derive(seed, 1));
  m.head = PolicyHead::init(m.cfg.encoder.width, m.cfg.state_dim, m.cfg.head_hidden, Rng::derive(seed, 12));
  if (m.cfg.pe_mode == PeMode::kLearnable) {
    Rng rng(Rng::derive(seed, 13));
    Matrix table(m.cfg.tokenizer.tokens(), m.cfg.encoder.width);
    for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = 0.02 * rng.normal();
    m.learned_pe = Tensor(std::move(table), true);
  }
  m.encoder.set_base_trainable(m.cfg.update == UpdateStrategy::kFull);
  m.encoder.set_adapters_trainable(m.cfg.update == UpdateStrategy::kAdapters);
  return m;
}

void PolicyModel::adopt_encoder(const Encoder2D& pretrained) {
  if (!(pretrained.config() == cfg.encoder)) {
    throw CheckpointMismatchError("stage-1 encoder dimensions do not match the policy encoder configuration");
  }
  encoder = pretrained.clone();
  encoder.set_base_trainable(cfg.update == UpdateStrategy::kFull);
  encoder.set_adapters_trainable(cfg.update == UpdateStrategy::kAdapters);
}

Tensor PolicyModel::forward(const PreparedObservation& obs) const {
  const tokenizer::TokenSet3D tokens = tokenizer::encode_tokens(obs.plan, cfg.tokenizer, tokenizer);
  const Tensor feats = encode_pointcloud(encoder, tokens, planes, uses_adapters(),
                                         learned_pe.defined() ? &learned_pe : nullptr);
  return predict_action_tensor(head, feats, tokens.centers, obs.state, obs.frame, cfg.pointer_gain);
}

Pose7DoF PolicyModel::act(const geometry::PointCloud& cloud, const RobotState& state) const {
  const Tensor out = forward(prepare(cloud, state, cfg, 0));
  return Pose7DoF::from_vector(out.value().row(0).transpose());
}

nn::ParamList PolicyModel::trainable() const {
  nn::ParamList out;
  tokenizer.collect(out, "tokenizer.");
  if (cfg.update == UpdateStrategy::kAdapters) encoder.collect_adapters(out, "encoder.");
  if (cfg.update == UpdateStrategy::kFull) encoder.collect_base(out, "encoder.");
  head.collect(out, "head.");
  if (learned_pe.defined()) out.push_back({"learned_pe", learned_pe});
  return out;
}

nn::ParamList PolicyModel::all_params() const {
  nn::ParamList out;
  tokenizer.collect(out, "tokenizer.");
  encoder.collect_base(out, "encoder.");
  encoder.collect_adapters(out, "encoder.");
  head.collect(out, "head.");
  if (learned_pe.defined()) out.push_back({"learned_pe", learned_pe});
  return out;
}

long PolicyModel::trainable_count() const {
  long n = 0;
  for (const auto& p : trainable()) n += static_cast<long>(p.tensor.value().size());
  return n;
}

std::vector<TrainSample> prepare_dataset(const std::vector<EpisodeRecord>& episodes, const PolicyConfig& cfg) {
  std::vector<TrainSample> out;
  for (const auto& ep : episodes) {
    for (const auto& step : ep.steps) out.push_back({prepare(step.cloud, step.state, cfg, 0), step.action});
  }
  return out;
}

std::vector<TrainLog> train_policy(PolicyModel& model, const std::vector<TrainSample>& samples, std::uint64_t seed,
                                   const std::function<void(const TrainLog&)>& on_log) {
  if (samples.empty()) throw InvalidArgument("train_policy needs at least one sample");
  const auto& cfg = model.cfg;
  if (cfg.batch < 1 || cfg.steps < 0) throw ConfigError("train batch must be positive and steps non-negative");

  std::vector<Tensor> params;
  for (auto& p : model.trainable()) params.push_back(p.tensor);
  nn::AdamOptions opt = cfg.optim;
  opt.total_steps = cfg.steps;
  nn::Adam adam(params, opt);

  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  auto next_sample = [&] {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(Rng::derive(seed, 0xb0000000ULL + epoch++));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<TrainLog> log;
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> losses;
    ExplicitTerms terms;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& s = samples[next_sample()];
      Tensor pred;
      Pose7DoF target = s.target;
      if (cfg.augment) {
        Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(step) * 4096 + static_cast<std::uint64_t>(b)));
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        pred = model.forward(rotate_about_vertical(s.obs, angle));
        target = rotate_about_vertical(s.target, angle);
      } else {
        pred = model.forward(s.obs);
      }
      if (!pred.value().allFinite()) {
        throw NonFiniteLossError("non-finite policy output at step " + std::to_string(step));
      }
      auto loss = explicit_loss(pred, target, cfg.weights);
      losses.push_back(loss.total);
      terms.translation += loss.terms.translation / cfg.batch;
      terms.rotation += loss.terms.rotation / cfg.batch;
      terms.gripper += loss.terms.gripper / cfg.batch;
      terms.total += loss.terms.total / cfg.batch;
    }
    if (!std::isfinite(terms.total)) {
      throw NonFiniteLossError("non-finite policy loss at step " + std::to_string(step));
    }
    const double lr = adam.current_lr();
    Tensor total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = nn::add(total, losses[i]);
    nn::scale(total, 1.0 / cfg.batch).backward();
    adam.step();
    if (step % std::max(cfg.log_every, 1) == 0 || step + 1 == cfg.steps) {
      TrainLog entry{step, terms, lr};
      log.push_back(entry);
      if (on_log) on_log(entry);
    }
  }
  return log;
}

ExplicitTerms evaluate_loss(const PolicyModel& model, const std::vector<TrainSample>& samples) {
  ExplicitTerms sum;
  for (const auto& s : samples) {
    const auto t = explicit_loss(model.forward(s.obs), s.target, model.cfg.weights).terms;
    sum.translation += t.translation;
    sum.rotation += t.rotation;
    sum.gripper += t.gripper;
    sum.total += t.total;
  }
  const double n = static_cast<double>(std::max<std::size_t>(samples.size(), 1));
  return {sum.translation / n, sum.rotation / n, sum.gripper / n, sum.total / n};
}

EvalResult evaluate_policy(const Policy& policy, int episodes, std::uint64_t seed, envdata::EnvOptions options) {
  if (episodes < 1) throw InvalidArgument("evaluate_policy needs at least one episode");
  EvalResult result;
  int successes = 0;
  for (int e = 0; e < episodes; ++e) {
    EpisodeOutcome outcome;
    outcome.scene_seed = seed + static_cast<std::uint64_t>(e);
    try {
      envdata::ReachEnv env(outcome.scene_seed, options);
      envdata::Observation obs = env.reset();
      for (int s = 0; s < envdata::kMaxSteps; ++s) {
        const envdata::StepResult res = env.step(policy(obs, env));
        outcome.steps = env.steps_taken();
        if (res.success) outcome.success = true;
        if (res.done) break;
        obs = res.observation;
      }
    } catch (const std::exception& ex) {
      outcome.success = false;
      outcome.fault = ex.what();
    }
    successes += outcome.success ? 1 : 0;
    result.episodes.push_back(std::move(outcome));
  }
  result.success_rate = static_cast<double>(successes) / episodes;
  return result;
}

Policy model_policy(const PolicyModel& model) {
  return [&model](const envdata::Observation& obs, const envdata::ReachEnv&) { return model.act(obs.cloud, obs.state); };
}

Policy expert_policy() {
  return [](const envdata::Observation&, const envdata::ReachEnv& env) { return env.expert_action(); };
}

}  // namespace lift3d::policy

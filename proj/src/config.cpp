#include "lift3d/config.hpp"

#include "lift3d/error.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace lift3d::config {

using nlohmann::json;

namespace {

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where(key) + " has the wrong type (" + v.dump() + ")");
    }
  }

  template <typename E>
  void read_enum(const std::string& key, E& out, const std::vector<std::pair<std::string, E>>& names) {
    std::string text;
    bool present = j_.contains(key);
    read(key, text);
    if (!present) return;
    for (const auto& [name, value] : names) {
      if (name == text) {
        out = value;
        return;
      }
    }
    std::string allowed;
    for (const auto& [name, value] : names) allowed += (allowed.empty() ? "" : "|") + name;
    throw ConfigError(where(key) + " must be one of " + allowed + ", got '" + text + "'");
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + where(item.key()) + "'");
    }
  }

 private:
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const std::vector<std::pair<std::string, policy::UpdateStrategy>> kUpdates{
    {"adapters", policy::UpdateStrategy::kAdapters},
    {"none", policy::UpdateStrategy::kNone},
    {"full", policy::UpdateStrategy::kFull}};
const std::vector<std::pair<std::string, policy::PeMode>> kPeModes{{"lifted", policy::PeMode::kLifted},
                                                                   {"learnable", policy::PeMode::kLearnable}};
const std::vector<std::pair<std::string, MaskStrategy>> kMasks{{"affordance", MaskStrategy::kAffordance},
                                                               {"random", MaskStrategy::kRandom}};
const std::vector<std::pair<std::string, pretrain::TargetKind>> kTargets{{"depth", pretrain::TargetKind::kDepth},
                                                                         {"rgb", pretrain::TargetKind::kRgb},
                                                                         {"both", pretrain::TargetKind::kBoth}};
const std::vector<std::pair<std::string, nn::Schedule>> kSchedules{{"constant", nn::Schedule::kConstant},
                                                                   {"cosine_warmup", nn::Schedule::kCosineWarmup}};

template <typename E>
std::string name_of(E value, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [name, v] : names) {
    if (v == value) return name;
  }
  return "?";
}

}  // namespace

std::string to_string(policy::UpdateStrategy u) { return name_of(u, kUpdates); }
std::string to_string(policy::PeMode m) { return name_of(m, kPeModes); }
std::string to_string(MaskStrategy m) { return name_of(m, kMasks); }
std::string to_string(pretrain::TargetKind t) { return name_of(t, kTargets); }

tokenizer::TokenizerConfig desk_tokenizer(int layers) {
  if (layers < 1 || layers > 4) throw ConfigError("tokenizer.layers must be in 1..4, got " + std::to_string(layers));
  static const int kDims[] = {16, 32, 64, 128};
  tokenizer::TokenizerConfig t;
  t.dims.assign(kDims, kDims + layers);
  t.points.clear();
  for (int i = layers - 1; i >= 0; --i) t.points.push_back(64 << (i == 0 ? 0 : i + 1));
  t.k_nn = 16;
  t.output_dim = 32;
  return t;
}

nn::AdamOptions default_optimizer() {
  nn::AdamOptions o;
  o.schedule = nn::Schedule::kCosineWarmup;
  return o;
}

void RunConfig::validate() const {
  encoder.validate();
  tokenizer::TokenizerConfig tok = tokenizer;
  tok.output_dim = encoder.width;
  tok.validate();
  if (tok.points.front() > policy::PolicyConfig{}.cloud_points) {
    throw ConfigError("tokenizer.points exceeds the 1024-point observation cloud");
  }
  if (planes != 1 && planes != 2 && planes != 4 && planes != 6) {
    throw ConfigError("planes must be 1, 2, 4 or 6, got " + std::to_string(planes));
  }
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("mask.theta must lie in [0, 1]");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask.ratio must lie in (0, 1)");
  if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps must be positive");
  if (!(optimizer.warmup_fraction >= 0.0 && optimizer.warmup_fraction < 1.0)) {
    throw ConfigError("optimizer.warmup_fraction must lie in [0, 1)");
  }
  if (pretrain.steps < 0 || policy.steps < 0) throw ConfigError("step counts must be non-negative");
  if (pretrain.batch < 1 || policy.batch < 1) throw ConfigError("batch sizes must be positive");
  if (pretrain.w_distill < 0.0 || pretrain.w_recon < 0.0) throw ConfigError("loss weights must be non-negative");
  if (policy.weights.translation < 0.0 || policy.weights.rotation < 0.0 || policy.weights.gripper < 0.0) {
    throw ConfigError("policy loss weights must be non-negative");
  }
  if (policy.head_hidden < 1) throw ConfigError("policy.head_hidden must be positive");
  if (!(policy.pointer_gain > 0.0)) throw ConfigError("policy.pointer_gain must be positive");
  if (pretrain.decoder.layers < 1 || pretrain.decoder.heads < 1 ||
      pretrain.decoder.resolved_width(encoder.width) % pretrain.decoder.heads != 0) {
    throw ConfigError("pretrain.decoder needs layers >= 1 and a width divisible by heads");
  }
  if (data.pretrain.empty() && data.pretrain_count < 1) throw ConfigError("data.pretrain_count must be positive");
  if (data.train.empty() && data.train_count < 1) throw ConfigError("data.train_count must be positive");
  if (eval.episodes < 1) throw ConfigError("eval.episodes must be positive");
  if (log_every < 1) throw ConfigError("log_every must be positive");
}

pretrain::PretrainConfig RunConfig::pretrain_config() const {
  pretrain::PretrainConfig p;
  p.encoder = encoder;
  p.decoder = pretrain.decoder;
  p.theta = theta;
  p.ratio = ratio;
  p.affordance_masking = mask == MaskStrategy::kAffordance;
  p.target = pretrain.target;
  p.w_distill = pretrain.distill ? pretrain.w_distill : 0.0;
  p.w_recon = pretrain.w_recon;
  p.optim = optimizer;
  p.steps = pretrain.steps;
  p.batch = pretrain.batch;
  p.log_every = log_every;
  return p;
}

policy::PolicyConfig RunConfig::policy_config() const {
  policy::PolicyConfig p;
  p.encoder = encoder;
  p.tokenizer = tokenizer;
  p.tokenizer.output_dim = encoder.width;
  p.planes = planes;
  p.pe_mode = pe;
  p.update = update;
  p.head_hidden = policy.head_hidden;
  p.pointer_gain = policy.pointer_gain;
  p.augment = policy.augment;
  p.weights = policy.weights;
  p.optim = optimizer;
  p.steps = policy.steps;
  p.batch = policy.batch;
  p.log_every = log_every;
  return p;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.read("seed", c.seed);
  root.read("planes", c.planes);
  root.read_enum("pe", c.pe, kPeModes);
  root.read_enum("update", c.update, kUpdates);
  root.read("log_every", c.log_every);

  {
    Section s = root.child("encoder");
    s.read("layers", c.encoder.layers);
    s.read("width", c.encoder.width);
    s.read("heads", c.encoder.heads);
    s.read("grid", c.encoder.grid);
    s.read("patch", c.encoder.patch);
    s.read("mlp_ratio", c.encoder.mlp_ratio);
    s.read("adapter_rank", c.encoder.adapter_rank);
    s.read("adapter_scale", c.encoder.adapter_scale);
    s.finish();
  }
  {
    Section s = root.child("tokenizer");
    int layers = 0;
    s.read("layers", layers);
    if (s.has("layers")) c.tokenizer = desk_tokenizer(layers);
    s.read("dims", c.tokenizer.dims);
    s.read("points", c.tokenizer.points);
    s.read("k_nn", c.tokenizer.k_nn);
    s.read("norm", c.tokenizer.norm);
    s.finish();
  }
  {
    Section s = root.child("mask");
    s.read_enum("strategy", c.mask, kMasks);
    s.read("theta", c.theta);
    s.read("ratio", c.ratio);
    s.finish();
  }
  {
    Section s = root.child("optimizer");
    s.read("lr", c.optimizer.lr);
    s.read("beta1", c.optimizer.beta1);
    s.read("beta2", c.optimizer.beta2);
    s.read("eps", c.optimizer.eps);
    s.read_enum("schedule", c.optimizer.schedule, kSchedules);
    s.read("warmup_fraction", c.optimizer.warmup_fraction);
    s.finish();
  }
  {
    Section s = root.child("pretrain");
    s.read("enabled", c.pretrain.enabled);
    s.read_enum("target", c.pretrain.target, kTargets);
    s.read("distill", c.pretrain.distill);
    s.read("w_distill", c.pretrain.w_distill);
    s.read("w_recon", c.pretrain.w_recon);
    s.read("steps", c.pretrain.steps);
    s.read("batch", c.pretrain.batch);
    Section d = s.child("decoder");
    d.read("layers", c.pretrain.decoder.layers);
    d.read("width", c.pretrain.decoder.width);
    d.read("heads", c.pretrain.decoder.heads);
    d.finish();
    s.finish();
  }
  {
    Section s = root.child("policy");
    s.read("steps", c.policy.steps);
    s.read("batch", c.policy.batch);
    s.read("head_hidden", c.policy.head_hidden);
    s.read("pointer_gain", c.policy.pointer_gain);
    s.read("augment", c.policy.augment);
    Section w = s.child("weights");
    w.read("translation", c.policy.weights.translation);
    w.read("rotation", c.policy.weights.rotation);
    w.read("gripper", c.policy.weights.gripper);
    w.finish();
    s.finish();
  }
  {
    Section s = root.child("data");
    s.read("pretrain", c.data.pretrain);
    s.read("train", c.data.train);
    s.read("pretrain_count", c.data.pretrain_count);
    s.read("train_count", c.data.train_count);
    s.read("seed", c.data.seed);
    s.finish();
  }
  {
    Section s = root.child("eval");
    s.read("episodes", c.eval.episodes);
    s.read("seed", c.eval.seed);
    s.finish();
  }
  root.finish();
  c.tokenizer.output_dim = c.encoder.width;
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["encoder"] = {{"layers", c.encoder.layers},       {"width", c.encoder.width},
                  {"heads", c.encoder.heads},         {"grid", c.encoder.grid},
                  {"patch", c.encoder.patch},         {"mlp_ratio", c.encoder.mlp_ratio},
                  {"adapter_rank", c.encoder.adapter_rank}, {"adapter_scale", c.encoder.adapter_scale}};
  j["tokenizer"] = {{"layers", c.tokenizer.layers()},
                    {"dims", c.tokenizer.dims},
                    {"points", c.tokenizer.points},
                    {"k_nn", c.tokenizer.k_nn},
                    {"norm", c.tokenizer.norm}};
  j["planes"] = c.planes;
  j["pe"] = to_string(c.pe);
  j["update"] = to_string(c.update);
  j["mask"] = {{"strategy", to_string(c.mask)}, {"theta", c.theta}, {"ratio", c.ratio}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"schedule", name_of(c.optimizer.schedule, kSchedules)},
                    {"warmup_fraction", c.optimizer.warmup_fraction}};
  j["pretrain"] = {{"enabled", c.pretrain.enabled},
                   {"target", to_string(c.pretrain.target)},
                   {"distill", c.pretrain.distill},
                   {"w_distill", c.pretrain.w_distill},
                   {"w_recon", c.pretrain.w_recon},
                   {"steps", c.pretrain.steps},
                   {"batch", c.pretrain.batch},
                   {"decoder",
                    {{"layers", c.pretrain.decoder.layers},
                     {"width", c.pretrain.decoder.width},
                     {"heads", c.pretrain.decoder.heads}}}};
  j["policy"] = {{"steps", c.policy.steps},
                 {"batch", c.policy.batch},
                 {"head_hidden", c.policy.head_hidden},
                 {"pointer_gain", c.policy.pointer_gain},
                 {"augment", c.policy.augment},
                 {"weights",
                  {{"translation", c.policy.weights.translation},
                   {"rotation", c.policy.weights.rotation},
                   {"gripper", c.policy.weights.gripper}}}};
  j["data"] = {{"pretrain", c.data.pretrain},
               {"train", c.data.train},
               {"pretrain_count", c.data.pretrain_count},
               {"train_count", c.data.train_count},
               {"seed", c.data.seed}};
  j["eval"] = {{"episodes", c.eval.episodes}, {"seed", c.eval.seed}};
  j["log_every"] = c.log_every;
  return j;
}

RunConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

}  // namespace lift3d::config

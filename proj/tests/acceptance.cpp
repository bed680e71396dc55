// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; the exit status is 1 when any selected
// criterion fails.

#include "policy_fixture.hpp"
#include "support.hpp"

#include "lift3d/config.hpp"
#include "lift3d/error.hpp"
#include "lift3d/io.hpp"
#include "lift3d/masking.hpp"
#include "lift3d/pe_lifting.hpp"
#include "lift3d/pipeline.hpp"
#include "lift3d/pretrain.hpp"
#include "lift3d/tokenizer3d.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

using namespace lift3d;
using nlohmann::json;
using support::Matrix;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome sampling_and_grouping() {
  const auto t0 = Clock::now();
  Rng rng(101);
  int mismatches = 0;
  for (int cloud = 0; cloud < 200; ++cloud) {
    const int n = 1 + static_cast<int>(rng.below(512));
    const int m = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(n, 128))));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(n, 32))));
    const std::uint64_t seed = rng.next();
    const geometry::Points p = cloud % 2 ? support::lattice_cloud(rng, n) : support::uniform_cloud(rng, n);
    const auto idx = geometry::farthest_point_sample(p, m, seed);
    if (idx != support::brute_fps(p, m, seed)) ++mismatches;
    geometry::Points centers(m, 3);
    for (int i = 0; i < m; ++i) centers.row(i) = p.row(idx[static_cast<std::size_t>(i)]);
    if (geometry::knn_group(centers, p, k) != support::brute_knn(centers, p, k)) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 60.0,
          std::to_string(mismatches) + " mismatches over 200 clouds, " + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------- 2

Outcome lifting() {
  Rng rng(202);
  const int side = 14;
  pe::PEGrid grid{side, support::random_matrix(rng, side * side, 16)};
  const auto front = pe::VirtualPlaneSet::standard(1);
  double node_err = 0.0;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      Matrix coords(1, 3);
      coords << 2.0 * r / (side - 1) - 1.0, 2.0 * c / (side - 1) - 1.0, rng.uniform(-1, 1);
      const Matrix lifted = pe::lift_positional_embedding(coords, front, grid);
      node_err = std::max(node_err, (lifted.row(0) - grid.at(r, c)).cwiseAbs().maxCoeff());
    }
  }
  const Eigen::RowVectorXd value = support::random_matrix(rng, 1, 16);
  pe::PEGrid constant{side, value.replicate(side * side, 1)};
  const Matrix coords = support::uniform_cloud(rng, 300);
  double const_err = 0.0;
  for (int n : {1, 2, 4, 6}) {
    const Matrix lifted = pe::lift_positional_embedding(coords, pe::VirtualPlaneSet::standard(n), constant);
    const_err = std::max(const_err, (lifted.rowwise() - value).cwiseAbs().maxCoeff());
  }
  return {node_err <= 1e-6 && const_err <= 1e-6,
          "grid-node error " + fmt("%.2e", node_err) + ", constant-grid error " + fmt("%.2e", const_err)};
}

// ---------------------------------------------------------------- 3

Outcome masking_plans() {
  Rng rng(303);
  int bad_count = 0;
  int bad_subset = 0;
  int bad_repro = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = std::vector<int>{49, 196, 256}[static_cast<std::size_t>(trial % 3)];
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (auto& s : scores) s = rng.below(6) == 0 ? 0.5 : rng.uniform();
    const std::uint64_t seed = rng.next();
    const auto plan = masking::plan_mask(scores, 0.5, 0.75, seed);
    const auto masked = plan.masked();
    if (static_cast<int>(masked.size()) != static_cast<int>(std::ceil(0.75 * n))) ++bad_count;
    for (int i : plan.masked_affordance) {
      if (!(scores[static_cast<std::size_t>(i)] >= 0.5)) {
        ++bad_subset;
        break;
      }
    }
    const auto again = masking::plan_mask(scores, 0.5, 0.75, seed);
    if (again.visible != plan.visible || again.masked_affordance != plan.masked_affordance ||
        again.masked_background != plan.masked_background) {
      ++bad_repro;
    }
  }
  return {bad_count + bad_subset + bad_repro == 0, "1000 plans: " + std::to_string(bad_count) + " count, " +
                                                       std::to_string(bad_subset) + " threshold, " +
                                                       std::to_string(bad_repro) + " reproducibility violations"};
}

// ---------------------------------------------------------------- 4

Outcome adapter_identity() {
  const auto cfg = config::from_json(json::object());
  auto model = policy::PolicyModel::init(cfg.policy_config(), 4);
  Rng rng(404);
  int differing = 0;
  for (int i = 0; i < 50; ++i) {
    encoder::Image img{cfg.encoder.image_size(), cfg.encoder.image_size(), 3, {}};
    for (int p = 0; p < img.height * img.width * 3; ++p) img.data.push_back(rng.uniform());
    const auto plan = masking::plan_random_mask(cfg.encoder.tokens(), 0.75, rng.next());
    if (model.encoder.encode_visible(img, plan, true).value() != model.encoder.encode_visible(img, plan, false).value()) {
      ++differing;
    }
  }
  const auto scenes = envdata::gen_episodes(4040, 50);
  for (const auto& ep : scenes) {
    const auto obs = policy::prepare(ep.steps[0].cloud, ep.steps[0].state, model.cfg, 0);
    const auto tokens = tokenizer::encode_tokens(obs.plan, model.cfg.tokenizer, model.tokenizer);
    if (policy::encode_pointcloud(model.encoder, tokens, model.planes, true).value() !=
        policy::encode_pointcloud(model.encoder, tokens, model.planes, false).value()) {
      ++differing;
    }
  }

  auto pcfg = cfg.pretrain_config();
  pcfg.steps = 1;
  pcfg.log_every = 1;
  auto state = pretrain::init_pretrain(pcfg, 4);
  const auto logs = pretrain::pretrain_run(state, envdata::gen_pretrain_records(4041, 4), pcfg, 4);
  const double distill0 = logs.front().terms.distill;
  return {differing == 0 && distill0 == 0.0, std::to_string(differing) + " of 100 outputs differ (50 images, 50 clouds)" +
                                                 ", step-0 distillation " + fmt("%.17g", distill0)};
}

// ---------------------------------------------------------------- 5

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  // Implicit loss through the adapters and decoder.
  pretrain::PretrainConfig pcfg;
  pcfg.encoder.layers = 1;
  pcfg.encoder.width = 8;
  pcfg.encoder.heads = 2;
  pcfg.encoder.grid = 4;
  pcfg.encoder.patch = 4;
  pcfg.encoder.adapter_rank = 2;
  pcfg.decoder.width = 8;
  pcfg.target = pretrain::TargetKind::kBoth;
  auto state = pretrain::init_pretrain(pcfg, 5);
  Rng rng(505);
  nn::ParamList adapters;
  state.encoder.collect_adapters(adapters, "");
  support::randomize(adapters, rng, 0.3);
  const auto record = envdata::gen_pretrain_records(5050, 1, {1024, pcfg.encoder.image_size()}).front();
  const auto plan = pretrain::plan_for_record(record, pcfg, 1);
  nn::ParamList implicit_params;
  state.encoder.collect_adapters(implicit_params, "encoder.");
  state.decoder.collect(implicit_params, "decoder.");
  double implicit_err = 0.0;
  for (auto& p : implicit_params) {
    implicit_err = std::max(implicit_err, support::gradient_error(
                                              [&] { return pretrain::record_loss(state, record, plan, pcfg).total; },
                                              p.tensor));
  }

  // Explicit loss on random predictions.
  double explicit_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Matrix v = support::random_matrix(rng, 1, 7);
    v(0, 6) = rng.uniform(0.05, 0.95);
    nn::Tensor pred(v, true);
    Pose7DoF gt{Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()),
                Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()), static_cast<double>(trial % 2)};
    explicit_err = std::max(explicit_err,
                            support::gradient_error([&] { return policy::explicit_loss(pred, gt).total; }, pred));
  }

  std::string worst;
  const double chain_err = support::worst_chain_gradient_error(8, 8, 55, &worst);
  const double secs = seconds_since(t0);
  return {implicit_err < 1e-4 && explicit_err < 1e-4 && chain_err < 1e-4 && secs < 300.0,
          "max relative error implicit " + fmt("%.2e", implicit_err) + ", explicit " + fmt("%.2e", explicit_err) +
              ", tokenize-encode-head " + fmt("%.2e", chain_err) + " (" + worst + "), " + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------- 6

Outcome stage1() {
  const auto t0 = Clock::now();
  auto cfg = config::from_json(json::object());
  cfg.encoder.layers = 2;
  cfg.encoder.width = 32;
  auto pcfg = cfg.pretrain_config();
  pcfg.steps = 2000;
  const auto records = envdata::gen_pretrain_records(cfg.data.seed, 16);
  auto state = pretrain::init_pretrain(pcfg, cfg.seed);

  // Fixed-seed evaluation over all 16 records every 100 steps.
  constexpr std::uint64_t kProbeSeed = 6006;
  std::map<long, pretrain::LossTerms> probes;
  pretrain::pretrain_run(state, records, pcfg, cfg.seed, {}, [&](long step, const pretrain::PretrainState& s) {
    if ((step + 1) % 100 == 0) probes[step + 1] = pretrain::evaluate(s, records, pcfg, kProbeSeed);
  });
  const double secs = seconds_since(t0);

  long reached = -1;
  for (const auto& [step, terms] : probes) {
    if (terms.recon < 0.05) {
      reached = step;
      break;
    }
  }
  const double at100 = probes.at(100).distill;
  double worst_after = 0.0;
  for (const auto& [step, terms] : probes) {
    if (step > 100) worst_after = std::max(worst_after, terms.distill);
  }
  const double final_recon = probes.rbegin()->second.recon;
  return {reached > 0 && worst_after < at100 && secs < 300.0,
          "masked depth L1 < 0.05 first at step " + std::to_string(reached) + " (final " + fmt("%.4f", final_recon) +
              "), distillation at 100 " + fmt("%.2e", at100) + " vs max afterwards " + fmt("%.2e", worst_after) +
              ", " + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------- 7

Outcome stage2() {
  const auto cfg = config::from_json(json::object());
  pipeline::MetricsLog quiet;
  const auto stage1 = pipeline::run_pretrain(cfg, quiet);

  auto t0 = Clock::now();
  const auto from_stage1 = pipeline::run_train(cfg, &stage1.state.encoder, quiet);
  const double init_success =
      policy::evaluate_policy(policy::model_policy(from_stage1.model), 100, cfg.eval.seed).success_rate;
  const double secs = seconds_since(t0);

  const auto scratch = pipeline::run_train(cfg, nullptr, quiet);
  const double random_success =
      policy::evaluate_policy(policy::model_policy(scratch.model), 100, cfg.eval.seed).success_rate;

  const double mse = from_stage1.final_terms.translation;
  const bool pass = mse < 1e-3 && cfg.policy.steps <= 3000 && init_success >= 0.90 &&
                    init_success >= random_success && secs < 600.0;
  return {pass, std::to_string(cfg.data.train_count) + " demos, " + std::to_string(cfg.policy.steps) +
                    " steps: translation MSE " + fmt("%.2e", mse) + ", success " + fmt("%.2f", init_success) +
                    " (random init " + fmt("%.2f", random_success) + "), " + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------- 8

Outcome freeze() {
  auto cfg = config::from_json(json::object());
  cfg.policy.steps = 10;
  const auto samples = policy::prepare_dataset(envdata::gen_episodes(808, 8), cfg.policy_config());
  std::string detail;
  bool pass = true;
  for (auto update : {policy::UpdateStrategy::kAdapters, policy::UpdateStrategy::kNone, policy::UpdateStrategy::kFull}) {
    cfg.update = update;
    auto model = policy::PolicyModel::init(cfg.policy_config(), 8);
    const auto before = model.encoder.base_hash();
    policy::train_policy(model, samples, 8);
    const bool changed = model.encoder.base_hash() != before;
    pass = pass && changed == (update == policy::UpdateStrategy::kFull);
    detail += (detail.empty() ? "" : ", ") + config::to_string(update) + (changed ? " changed" : " unchanged");
  }
  return {pass, "base hash " + detail};
}

// ---------------------------------------------------------------- 9

Outcome ablation() {
  const auto t0 = Clock::now();
  const auto grid = pipeline::load_grid(LIFT3D_ABLATION_GRID);
  if (grid.configs.size() > 24) return {false, "grid has " + std::to_string(grid.configs.size()) + " configs"};
  const auto out = std::filesystem::temp_directory_path() / ("lift3d_acceptance_ablation_" + std::to_string(::getpid()));
  const json report = pipeline::ablate_command(grid, out, 1, "", nullptr);
  const double secs = seconds_since(t0);

  bool valid = true;
  std::string problem;
  try {
    const auto bytes = support::slurp(out / "report.json");
    pipeline::validate_report(json::parse(bytes.begin(), bytes.end()));
  } catch (const std::exception& e) {
    valid = false;
    problem = e.what();
  }
  std::filesystem::remove_all(out);

  int failed = 0;
  std::map<int, long> tokenizer_params;
  for (const auto& row : report["rows"]) {
    if (row["status"] != "ok") {
      ++failed;
      continue;
    }
    tokenizer_params[row["config"]["tokenizer"]["dims"].size()] = row["params"]["tokenizer"].get<long>();
  }
  for (int l = 1; l <= 4; ++l) {
    if (!tokenizer_params.count(l)) tokenizer_params[l] = tokenizer::tokenizer_param_count(config::desk_tokenizer(l));
  }
  bool increasing = true;
  std::string counts;
  long previous = 0;
  for (const auto& [layers, count] : tokenizer_params) {
    increasing = increasing && count > previous;
    previous = count;
    counts += (counts.empty() ? "" : " < ") + std::to_string(count);
  }
  return {valid && failed == 0 && increasing && secs < 3600.0,
          std::to_string(report["rows"].size()) + " configs, " + std::to_string(failed) + " failed, report " +
              (valid ? "valid" : "invalid: " + problem) + ", tokenizer params " + counts + ", " +
              fmt("%.0fs", secs)};
}

// ---------------------------------------------------------------- 10

Outcome round_trips() {
  support::TempDir tmp("acceptance_io");
  bool pass = true;
  std::vector<std::string> notes;

  pipeline::gen_data("reach", 6, 1010, tmp / "episodes");
  const auto episodes = io::read_episodes(tmp / "episodes");
  io::write_episodes(episodes, tmp / "episodes_again");
  pipeline::gen_data("pretrain", 3, 1010, tmp / "renders");
  const auto renders = io::read_pretrain(tmp / "renders");
  io::write_pretrain(renders, tmp / "renders_again");
  bool datasets_equal = true;
  for (const auto& [a, b] : {std::pair{"episodes", "episodes_again"}, std::pair{"renders", "renders_again"}}) {
    for (const auto& entry : std::filesystem::directory_iterator(tmp / a)) {
      const auto name = entry.path().filename();
      datasets_equal = datasets_equal && support::slurp(entry.path()) == support::slurp(tmp / b / name);
    }
  }
  const auto regenerated = envdata::gen_episodes(1010, 6);
  for (std::size_t i = 0; i < regenerated.size(); ++i) {
    for (std::size_t s = 0; s < regenerated[i].steps.size(); ++s) {
      const auto& x = regenerated[i].steps[s];
      const auto& y = episodes[i].steps[s];
      datasets_equal = datasets_equal && x.cloud.points == y.cloud.points && x.cloud.colors == y.cloud.colors &&
                       x.state == y.state && x.action == y.action;
    }
  }
  pass = pass && datasets_equal;
  notes.push_back(datasets_equal ? "datasets lossless" : "dataset round trip lossy");

  const auto cfg = config::from_json(json::object());
  const auto model = policy::PolicyModel::init(cfg.policy_config(), 10);
  const auto ckpt = pipeline::policy_checkpoint(cfg, model);
  io::write_checkpoint(ckpt, tmp / "policy.l3d");
  const auto back = io::read_checkpoint(tmp / "policy.l3d");
  const auto reloaded = pipeline::policy_from_checkpoint(back);
  const bool ckpt_equal = back == ckpt && io::encode_checkpoint(back) == support::slurp(tmp / "policy.l3d") &&
                          io::encode_checkpoint(pipeline::policy_checkpoint(cfg, reloaded)) ==
                              support::slurp(tmp / "policy.l3d");
  pass = pass && ckpt_equal;
  notes.push_back(ckpt_equal ? "checkpoint lossless" : "checkpoint round trip lossy");

  auto diagnostic = [](const std::function<void()>& f) -> std::string {
    try {
      f();
    } catch (const FormatError& e) {
      return e.what();
    } catch (const IoError& e) {
      return e.what();
    }
    return "";
  };
  auto bytes = support::slurp(tmp / "episodes" / "record_000003.bin");
  bytes[100] ^= 0x10;
  io::write_file_atomic(tmp / "episodes" / "record_000003.bin", bytes);
  const std::string blob_msg = diagnostic([&] { io::read_episodes(tmp / "episodes"); });
  auto ckpt_bytes = support::slurp(tmp / "policy.l3d");
  ckpt_bytes[ckpt_bytes.size() / 2] ^= 0x10;
  const std::string ckpt_msg = diagnostic([&] { io::decode_checkpoint(ckpt_bytes); });
  const bool detected = blob_msg.find("record 3") != std::string::npos && !ckpt_msg.empty();
  pass = pass && detected;
  notes.push_back("corruption: \"" + blob_msg + "\" / \"" + ckpt_msg + "\"");

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : ", ") + n;
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"FPS and kNN match brute-force oracles", sampling_and_grouping},
      {"PE lifting at grid nodes and on constant grids", lifting},
      {"affordance-guided mask plans", masking_plans},
      {"zero-initialized adapters leave outputs unchanged", adapter_identity},
      {"finite-difference gradient checks", gradient_checks},
      {"stage-1 masked depth pretraining", stage1},
      {"stage-2 behavior cloning and closed-loop success", stage2},
      {"base weights frozen unless updating fully", freeze},
      {"ablation grid and report", ablation},
      {"dataset and checkpoint round trips", round_trips},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %2d: %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

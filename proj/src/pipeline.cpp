#include "lift3d/pipeline.hpp"

#include "lift3d/envdata.hpp"
#include "lift3d/error.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

extern char** environ;

namespace lift3d::pipeline {

using nlohmann::json;

namespace {

std::string fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  io::write_file_atomic(path, std::vector<unsigned char>(text.begin(), text.end()));
}

json read_json_file(const fs::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace

void MetricsLog::emit(json line, const std::string& text) {
  if (file_ != nullptr) *file_ << line.dump() << '\n' << std::flush;
  if (console_ != nullptr) *console_ << text << '\n' << std::flush;
  lines_.push_back(std::move(line));
}

void MetricsLog::pretrain(const pretrain::StepLog& log) {
  emit({{"stage", "pretrain"},
        {"step", log.step},
        {"distill", log.terms.distill},
        {"recon", log.terms.recon},
        {"total", log.terms.total},
        {"lr", log.lr}},
       "pretrain step " + std::to_string(log.step) + " distill " + fmt(log.terms.distill) + " recon " +
           fmt(log.terms.recon) + " total " + fmt(log.terms.total) + " lr " + fmt(log.lr, 4));
}

void MetricsLog::policy(const policy::TrainLog& log) {
  emit({{"stage", "policy"},
        {"step", log.step},
        {"translation", log.terms.translation},
        {"rotation", log.terms.rotation},
        {"gripper", log.terms.gripper},
        {"total", log.terms.total},
        {"lr", log.lr}},
       "train step " + std::to_string(log.step) + " translation " + fmt(log.terms.translation) + " rotation " +
           fmt(log.terms.rotation) + " gripper " + fmt(log.terms.gripper) + " total " + fmt(log.terms.total) +
           " lr " + fmt(log.lr, 4));
}

std::string MetricsLog::jsonl() const {
  std::string out;
  for (const auto& l : lines_) out += l.dump() + "\n";
  return out;
}

void gen_data(const std::string& task, int count, std::uint64_t seed, const fs::path& out) {
  if (count < 1) throw ConfigError("--count must be at least 1, got " + std::to_string(count));
  if (task == envdata::kReachTask) {
    io::write_episodes(envdata::gen_episodes(seed, count), out);
  } else if (task == "pretrain") {
    io::write_pretrain(envdata::gen_pretrain_records(seed, count), out);
  } else {
    throw ConfigError("unknown task '" + task + "' (expected reach or pretrain)");
  }
}

std::vector<PretrainRecord> pretrain_records(const config::RunConfig& cfg) {
  if (!cfg.data.pretrain.empty()) return io::read_pretrain(cfg.data.pretrain);
  return envdata::gen_pretrain_records(cfg.data.seed, cfg.data.pretrain_count);
}

std::vector<EpisodeRecord> train_episodes(const config::RunConfig& cfg) {
  if (!cfg.data.train.empty()) return io::read_episodes(cfg.data.train);
  return envdata::gen_episodes(cfg.data.seed, cfg.data.train_count);
}

io::Checkpoint pretrain_checkpoint(const config::RunConfig& cfg, const pretrain::PretrainState& state) {
  io::Checkpoint ckpt;
  ckpt.stage = "pretrain";
  ckpt.config = config::to_json(cfg);
  nn::ParamList params;
  state.encoder.collect_base(params, "encoder.");
  state.encoder.collect_adapters(params, "encoder.");
  state.decoder.collect(params, "decoder.");
  io::append_params(ckpt, params);
  io::append_matrix(ckpt, "encoder.pe_grid", state.encoder.pe_grid().embeddings);
  return ckpt;
}

encoder::Encoder2D encoder_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.stage != "pretrain") {
    throw CheckpointMismatchError("expected a pretrain checkpoint, got stage '" + ckpt.stage + "'");
  }
  config::RunConfig cfg;
  try {
    cfg = config::from_json(ckpt.config);
  } catch (const ConfigError& e) {
    throw CheckpointMismatchError(std::string("checkpoint config is unusable: ") + e.what());
  }
  auto enc = encoder::Encoder2D::init(cfg.encoder, 0);
  nn::ParamList params;
  enc.collect_base(params, "encoder.");
  enc.collect_adapters(params, "encoder.");
  io::load_params(ckpt, params);
  const nn::Matrix grid = io::load_matrix(ckpt, "encoder.pe_grid");
  if (grid.rows() != enc.pe_grid().embeddings.rows() || grid.cols() != enc.pe_grid().embeddings.cols()) {
    throw CheckpointMismatchError("checkpoint positional grid has the wrong shape");
  }
  return enc;
}

io::Checkpoint policy_checkpoint(const config::RunConfig& cfg, const policy::PolicyModel& model) {
  io::Checkpoint ckpt;
  ckpt.stage = "policy";
  ckpt.config = config::to_json(cfg);
  io::append_params(ckpt, model.all_params());
  return ckpt;
}

policy::PolicyModel policy_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.stage != "policy") {
    throw CheckpointMismatchError("expected a policy checkpoint, got stage '" + ckpt.stage + "'");
  }
  config::RunConfig cfg;
  try {
    cfg = config::from_json(ckpt.config);
  } catch (const ConfigError& e) {
    throw CheckpointMismatchError(std::string("checkpoint config is unusable: ") + e.what());
  }
  auto model = policy::PolicyModel::init(cfg.policy_config(), cfg.seed);
  auto params = model.all_params();
  io::load_params(ckpt, params);
  return model;
}

PretrainResult run_pretrain(const config::RunConfig& cfg, MetricsLog& log) {
  cfg.validate();
  const auto records = pretrain_records(cfg);
  const auto pcfg = cfg.pretrain_config();
  PretrainResult r{pretrain::init_pretrain(pcfg, cfg.seed), {}};
  pretrain::pretrain_run(r.state, records, pcfg, cfg.seed, [&](const pretrain::StepLog& l) { log.pretrain(l); });
  r.final_terms = pretrain::evaluate(r.state, records, pcfg, cfg.seed);
  return r;
}

TrainResult run_train(const config::RunConfig& cfg, const encoder::Encoder2D* init, MetricsLog& log) {
  cfg.validate();
  const auto pcfg = cfg.policy_config();
  TrainResult r{policy::PolicyModel::init(pcfg, cfg.seed), {}};
  if (init != nullptr) r.model.adopt_encoder(*init);
  const auto samples = policy::prepare_dataset(train_episodes(cfg), pcfg);
  policy::train_policy(r.model, samples, cfg.seed, [&](const policy::TrainLog& l) { log.policy(l); });
  r.final_terms = policy::evaluate_loss(r.model, samples);
  return r;
}

void pretrain_command(const config::RunConfig& cfg, const fs::path& out, std::ostream* console) {
  cfg.validate();
  with_staging_dir(out, [&](const fs::path& dir) {
    write_text(dir / kConfigFile, config::to_json(cfg).dump(2) + "\n");
    std::ofstream metrics(dir / kMetricsFile);
    if (!metrics) throw IoError("cannot write " + (dir / kMetricsFile).string());
    MetricsLog log(console, &metrics);
    const auto result = run_pretrain(cfg, log);
    io::write_checkpoint(pretrain_checkpoint(cfg, result.state), dir / kCheckpointFile);
  });
}

void train_command(const config::RunConfig& cfg, const std::optional<fs::path>& init, const fs::path& out,
                   std::ostream* console) {
  cfg.validate();
  std::optional<encoder::Encoder2D> encoder;
  if (init) encoder = encoder_from_checkpoint(io::read_checkpoint(*init));
  with_staging_dir(out, [&](const fs::path& dir) {
    write_text(dir / kConfigFile, config::to_json(cfg).dump(2) + "\n");
    std::ofstream metrics(dir / kMetricsFile);
    if (!metrics) throw IoError("cannot write " + (dir / kMetricsFile).string());
    MetricsLog log(console, &metrics);
    const auto result = run_train(cfg, encoder ? &*encoder : nullptr, log);
    io::write_checkpoint(policy_checkpoint(cfg, result.model), dir / kCheckpointFile);
  });
}

policy::EvalResult eval_command(const std::optional<fs::path>& checkpoint, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("--episodes must be at least 1");
  if (!checkpoint) return policy::evaluate_policy(policy::expert_policy(), episodes, seed);
  const auto model = policy_from_checkpoint(io::read_checkpoint(*checkpoint));
  return policy::evaluate_policy(policy::model_policy(model), episodes, seed);
}

AblationGrid parse_grid(const json& j) {
  if (!j.is_object()) throw ConfigError("ablation grid must be a JSON object");
  for (const auto& item : j.items()) {
    if (item.key() != "base" && item.key() != "configs") throw ConfigError("unknown grid key '" + item.key() + "'");
  }
  AblationGrid grid;
  if (j.contains("base")) {
    if (!j["base"].is_object()) throw ConfigError("grid base must be an object");
    grid.base = j["base"];
  }
  if (!j.contains("configs") || !j["configs"].is_array() || j["configs"].empty()) {
    throw ConfigError("grid needs a non-empty configs array");
  }
  std::set<std::string> names;
  for (const auto& c : j["configs"]) {
    if (!c.is_object() || !c.contains("name") || !c["name"].is_string()) {
      throw ConfigError("each grid entry needs a string name");
    }
    for (const auto& item : c.items()) {
      if (item.key() != "name" && item.key() != "overrides") {
        throw ConfigError("unknown key '" + item.key() + "' in grid entry " + c["name"].get<std::string>());
      }
    }
    AblationEntry e{c["name"].get<std::string>(), c.value("overrides", json::object())};
    if (!e.overrides.is_object()) throw ConfigError("overrides of " + e.name + " must be an object");
    if (!names.insert(e.name).second) throw ConfigError("duplicate grid entry name " + e.name);
    grid.configs.push_back(std::move(e));
  }
  return grid;
}

AblationGrid load_grid(const fs::path& path) { return parse_grid(read_json_file(path)); }

json resolve_entry(const AblationGrid& grid, std::size_t index) {
  json merged = grid.base;
  merged.merge_patch(grid.configs.at(index).overrides);
  return merged;
}

json run_ablation_entry(const std::string& name, const json& config_json) {
  const auto t0 = std::chrono::steady_clock::now();
  json row{{"name", name},        {"status", "failed"}, {"error", ""},       {"config", config_json},
           {"pretrain", nullptr}, {"policy", nullptr},  {"success_rate", nullptr}, {"params", nullptr},
           {"wall_seconds", 0.0}};
  try {
    const auto cfg = config::from_json(config_json);
    row["config"] = config::to_json(cfg);
    MetricsLog log;
    std::optional<PretrainResult> pre;
    if (cfg.pretrain.enabled) {
      pre = run_pretrain(cfg, log);
      row["pretrain"] = {{"distill", pre->final_terms.distill},
                         {"recon", pre->final_terms.recon},
                         {"total", pre->final_terms.total}};
    }
    auto trained = run_train(cfg, pre ? &pre->state.encoder : nullptr, log);
    row["policy"] = {{"translation", trained.final_terms.translation},
                     {"rotation", trained.final_terms.rotation},
                     {"gripper", trained.final_terms.gripper},
                     {"total", trained.final_terms.total}};
    long total = 0;
    for (const auto& p : trained.model.all_params()) total += static_cast<long>(p.tensor.value().size());
    row["params"] = {{"tokenizer", tokenizer::tokenizer_param_count(trained.model.cfg.tokenizer)},
                     {"trainable", trained.model.trainable_count()},
                     {"total", total}};
    const auto eval = policy::evaluate_policy(policy::model_policy(trained.model), cfg.eval.episodes, cfg.eval.seed);
    row["success_rate"] = eval.success_rate;
    row["status"] = "ok";
  } catch (const std::exception& e) {
    row["status"] = "failed";
    row["error"] = e.what();
    row["pretrain"] = nullptr;
    row["policy"] = nullptr;
    row["success_rate"] = nullptr;
    row["params"] = nullptr;
  }
  row["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

json make_report(const std::vector<json>& rows) {
  return {{"schema_version", kReportSchemaVersion}, {"rows", rows}};
}

void validate_report(const json& report) {
  auto fail = [](const std::string& what) { throw FormatError("invalid ablation report: " + what); };
  if (!report.is_object()) fail("not an object");
  for (const auto& item : report.items()) {
    if (item.key() != "schema_version" && item.key() != "rows") fail("unexpected key " + item.key());
  }
  if (!report.contains("schema_version") || report["schema_version"] != kReportSchemaVersion) {
    fail("schema_version must be " + std::to_string(kReportSchemaVersion));
  }
  if (!report.contains("rows") || !report["rows"].is_array()) fail("rows must be an array");
  static const std::set<std::string> kKeys{"name",   "status",       "error",  "config",      "pretrain",
                                           "policy", "success_rate", "params", "wall_seconds"};
  auto numbers = [&](const json& obj, std::initializer_list<const char*> keys, const std::string& where,
                     bool integers) {
    if (!obj.is_object() || obj.size() != keys.size()) fail(where + " must be an object with " + std::to_string(keys.size()) + " fields");
    for (const char* k : keys) {
      if (!obj.contains(k)) fail(where + " lacks " + k);
      const auto& v = obj[k];
      if (integers ? !v.is_number_integer() : !v.is_number()) fail(where + "." + k + " has the wrong type");
    }
  };
  std::set<std::string> names;
  for (std::size_t i = 0; i < report["rows"].size(); ++i) {
    const auto& row = report["rows"][i];
    const std::string where = "rows[" + std::to_string(i) + "]";
    if (!row.is_object()) fail(where + " is not an object");
    for (const auto& item : row.items()) {
      if (!kKeys.count(item.key())) fail(where + " has unexpected key " + item.key());
    }
    for (const auto& k : kKeys) {
      if (!row.contains(k)) fail(where + " lacks " + k);
    }
    if (!row["name"].is_string() || !names.insert(row["name"].get<std::string>()).second) {
      fail(where + ".name must be a unique string");
    }
    if (!row["config"].is_object()) fail(where + ".config must be an object");
    if (!row["error"].is_string()) fail(where + ".error must be a string");
    if (!row["wall_seconds"].is_number() || row["wall_seconds"].get<double>() < 0.0) {
      fail(where + ".wall_seconds must be a non-negative number");
    }
    const auto& status = row["status"];
    if (status == "ok") {
      if (!row["error"].get<std::string>().empty()) fail(where + " is ok but carries an error");
      if (!row["pretrain"].is_null()) {
        numbers(row["pretrain"], {"distill", "recon", "total"}, where + ".pretrain", false);
      }
      numbers(row["policy"], {"translation", "rotation", "gripper", "total"}, where + ".policy", false);
      numbers(row["params"], {"tokenizer", "trainable", "total"}, where + ".params", true);
      const auto& s = row["success_rate"];
      if (!s.is_number() || s.get<double>() < 0.0 || s.get<double>() > 1.0) {
        fail(where + ".success_rate must lie in [0, 1]");
      }
    } else if (status == "failed") {
      if (row["error"].get<std::string>().empty()) fail(where + " failed without an error message");
      for (const char* k : {"pretrain", "policy", "success_rate", "params"}) {
        if (!row[k].is_null()) fail(where + "." + k + " must be null for a failed row");
      }
    } else {
      fail(where + ".status must be ok or failed");
    }
  }
}

std::string report_table(const json& report) {
  const std::vector<std::string> header{"name",   "status", "planes", "update",  "pe",        "mask",
                                        "target", "distill", "tok_L", "tok_params", "trainable", "recon",
                                        "T_mse",  "success", "wall_s"};
  std::vector<std::vector<std::string>> cells{header};
  auto num = [](const json& v, int precision = 4) { return v.is_number() ? fmt(v.get<double>(), precision) : "-"; };
  for (const auto& row : report.at("rows")) {
    const auto& c = row.at("config");
    auto field = [&](const char* section, const char* key) -> std::string {
      if (!c.contains(section)) return "-";
      const auto& v = section == std::string("") ? c : c.at(section);
      if (!v.contains(key)) return "-";
      return v.at(key).is_string() ? v.at(key).get<std::string>() : v.at(key).dump();
    };
    auto top = [&](const char* key) -> std::string {
      if (!c.contains(key)) return "-";
      return c.at(key).is_string() ? c.at(key).get<std::string>() : c.at(key).dump();
    };
    const bool ok = row.at("status") == "ok";
    cells.push_back({row.at("name").get<std::string>(),
                     row.at("status").get<std::string>(),
                     top("planes"),
                     top("update"),
                     top("pe"),
                     field("mask", "strategy"),
                     field("pretrain", "target"),
                     field("pretrain", "distill"),
                     field("tokenizer", "layers"),
                     ok ? row["params"]["tokenizer"].dump() : "-",
                     ok ? row["params"]["trainable"].dump() : "-",
                     ok && row["pretrain"].is_object() ? num(row["pretrain"]["recon"]) : "-",
                     ok ? num(row["policy"]["translation"]) : "-",
                     ok ? fmt(row["success_rate"].get<double>(), 3) : "-",
                     fmt(row.at("wall_seconds").get<double>(), 4)});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& r : cells) {
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream out;
  for (const auto& r : cells) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      out << std::left << std::setw(static_cast<int>(width[i])) << r[i];
      if (i + 1 < r.size()) out << "  ";
    }
    out << '\n';
  }
  for (const auto& row : report.at("rows")) {
    if (row.at("status") != "ok") out << row.at("name").get<std::string>() << ": " << row.at("error").get<std::string>() << '\n';
  }
  return out.str();
}

namespace {

struct Child {
  pid_t pid = -1;
  std::size_t index = 0;
  fs::path row_file;
};

json failed_row(const std::string& name, const json& config_json, const std::string& error) {
  return {{"name", name},        {"status", "failed"}, {"error", error},          {"config", config_json},
          {"pretrain", nullptr}, {"policy", nullptr},  {"success_rate", nullptr}, {"params", nullptr},
          {"wall_seconds", 0.0}};
}

pid_t spawn_entry(const std::string& self_exe, const fs::path& config_file, const std::string& name,
                  const fs::path& row_file) {
  std::vector<std::string> args{self_exe, "ablate-one", "--config", config_file.string(), "--name", name,
                                "--out", row_file.string()};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, "/dev/null", O_WRONLY, 0);
  pid_t pid = -1;
  const int rc = posix_spawn(&pid, self_exe.c_str(), &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw IoError("cannot start " + self_exe + ": " + std::strerror(rc));
  return pid;
}

}  // namespace

json ablate_command(const AblationGrid& grid, const fs::path& out, int jobs, const std::string& self_exe,
                    std::ostream* console) {
  const std::size_t n = grid.configs.size();
  std::vector<json> rows(n);
  json report;
  with_staging_dir(out, [&](const fs::path& dir) {
    if (jobs <= 1) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& name = grid.configs[i].name;
        if (console) *console << "ablate [" << i + 1 << "/" << n << "] " << name << std::endl;
        rows[i] = run_ablation_entry(name, resolve_entry(grid, i));
        if (console) *console << "  " << rows[i]["status"].get<std::string>() << " in " << fmt(rows[i]["wall_seconds"].get<double>(), 4) << " s" << std::endl;
      }
    } else {
      const fs::path work = dir / "rows";
      fs::create_directories(work);
      std::vector<Child> running;
      std::size_t next = 0;
      auto reap = [&] {
        int status = 0;
        const pid_t pid = ::waitpid(-1, &status, 0);
        if (pid < 0) throw IoError("waitpid failed");
        auto it = std::find_if(running.begin(), running.end(), [&](const Child& c) { return c.pid == pid; });
        if (it == running.end()) return;
        const auto& entry = grid.configs[it->index];
        try {
          rows[it->index] = read_json_file(it->row_file);
        } catch (const std::exception& e) {
          const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
          rows[it->index] = failed_row(entry.name, resolve_entry(grid, it->index),
                                       "worker exited with status " + std::to_string(code) + " and no result");
        }
        if (console) *console << "  " << entry.name << ": " << rows[it->index]["status"].get<std::string>() << std::endl;
        running.erase(it);
      };
      while (next < n || !running.empty()) {
        while (next < n && static_cast<int>(running.size()) < jobs) {
          const auto cfg_file = work / ("config_" + std::to_string(next) + ".json");
          const auto row_file = work / ("row_" + std::to_string(next) + ".json");
          write_text(cfg_file, resolve_entry(grid, next).dump(2));
          if (console) *console << "ablate [" << next + 1 << "/" << n << "] " << grid.configs[next].name << std::endl;
          running.push_back({spawn_entry(self_exe, cfg_file, grid.configs[next].name, row_file), next, row_file});
          ++next;
        }
        reap();
      }
      fs::remove_all(work);
    }
    report = make_report(rows);
    validate_report(report);
    write_text(dir / "report.json", report.dump(2) + "\n");
    write_text(dir / "report.txt", report_table(report));
  });
  return report;
}

}  // namespace lift3d::pipeline

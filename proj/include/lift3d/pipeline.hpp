#pragma once

#include "lift3d/config.hpp"
#include "lift3d/error.hpp"
#include "lift3d/io.hpp"
#include "lift3d/policy.hpp"
#include "lift3d/pretrain.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace lift3d::pipeline {

namespace fs = std::filesystem;

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kCheckpointFile = "checkpoint.l3d";
inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kConfigFile = "config.json";

/// Each logged step becomes one JSON line (kept in memory and streamed to
/// `file` when given) and one human-readable line on `console`.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* console = nullptr, std::ostream* file = nullptr)
      : console_(console), file_(file) {}

  void pretrain(const pretrain::StepLog& log);
  void policy(const policy::TrainLog& log);

  const std::vector<nlohmann::json>& lines() const { return lines_; }
  std::string jsonl() const;

 private:
  void emit(nlohmann::json line, const std::string& text);

  std::ostream* console_;
  std::ostream* file_;
  std::vector<nlohmann::json> lines_;
};

/// Writes `task` data ("reach" demonstrations or "pretrain" renders) for
/// scene seeds seed .. seed+count-1. Throws ConfigError on a bad task or count.
void gen_data(const std::string& task, int count, std::uint64_t seed, const fs::path& out);

std::vector<PretrainRecord> pretrain_records(const config::RunConfig& cfg);
std::vector<EpisodeRecord> train_episodes(const config::RunConfig& cfg);

io::Checkpoint pretrain_checkpoint(const config::RunConfig& cfg, const pretrain::PretrainState& state);
/// Rebuilds the stage-1 encoder; validates the stored encoder config.
encoder::Encoder2D encoder_from_checkpoint(const io::Checkpoint& ckpt);

io::Checkpoint policy_checkpoint(const config::RunConfig& cfg, const policy::PolicyModel& model);
policy::PolicyModel policy_from_checkpoint(const io::Checkpoint& ckpt);

struct PretrainResult {
  pretrain::PretrainState state;
  pretrain::LossTerms final_terms;
};

struct TrainResult {
  policy::PolicyModel model;
  policy::ExplicitTerms final_terms;
};

PretrainResult run_pretrain(const config::RunConfig& cfg, MetricsLog& log);
/// `init` is a stage-1 encoder; CheckpointMismatchError when its dimensions
/// disagree with the config.
TrainResult run_train(const config::RunConfig& cfg, const encoder::Encoder2D* init, MetricsLog& log);

/// Runs the command into `out` atomically: everything is written to a sibling
/// temporary directory that is renamed into place only on success.
void pretrain_command(const config::RunConfig& cfg, const fs::path& out, std::ostream* console);
void train_command(const config::RunConfig& cfg, const std::optional<fs::path>& init, const fs::path& out,
                   std::ostream* console);
policy::EvalResult eval_command(const std::optional<fs::path>& checkpoint, int episodes, std::uint64_t seed);

/// Builds a directory next to `final_dir`, renames it over `final_dir` once
/// `fill` returns, and removes it if `fill` throws.
template <typename Fn>
void with_staging_dir(const fs::path& final_dir, Fn&& fill);

struct AblationEntry {
  std::string name;
  nlohmann::json overrides;
};

struct AblationGrid {
  nlohmann::json base = nlohmann::json::object();
  std::vector<AblationEntry> configs;
};

/// {"base": {...}, "configs": [{"name": ..., "overrides": {...}}, ...]}
AblationGrid parse_grid(const nlohmann::json& j);
AblationGrid load_grid(const fs::path& path);
/// base merged with the entry's overrides (RFC 7386 merge patch).
nlohmann::json resolve_entry(const AblationGrid& grid, std::size_t index);

/// One report row. Failed configs carry status "failed" and an error message;
/// their numeric fields are null.
nlohmann::json run_ablation_entry(const std::string& name, const nlohmann::json& config_json);

nlohmann::json make_report(const std::vector<nlohmann::json>& rows);
/// Throws FormatError describing the first schema violation.
void validate_report(const nlohmann::json& report);
std::string report_table(const nlohmann::json& report);

/// Runs every config (in this process when jobs <= 1, otherwise in up to
/// `jobs` child processes running `self_exe ablate-one`) and writes
/// report.json and report.txt into `out`.
nlohmann::json ablate_command(const AblationGrid& grid, const fs::path& out, int jobs, const std::string& self_exe,
                              std::ostream* console);

template <typename Fn>
void with_staging_dir(const fs::path& final_dir, Fn&& fill) {
  fs::path staging = final_dir;
  staging += ".tmp";
  std::error_code ec;
  fs::remove_all(staging, ec);
  fs::create_directories(staging, ec);
  if (ec) throw IoError("cannot create " + staging.string() + ": " + ec.message());
  try {
    fill(staging);
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
  fs::remove_all(final_dir, ec);
  fs::rename(staging, final_dir, ec);
  if (ec) {
    fs::remove_all(staging, ec);
    throw IoError("cannot move output into " + final_dir.string());
  }
}

}  // namespace lift3d::pipeline

#include "doctest.h"
#include "support.hpp"

#include "json.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>

using nlohmann::json;
using support::TempDir;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

Run run(const TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const std::string cmd =
      quote(LIFT3D_CLI_PATH) + " " + args + " > " + quote(out.string()) + " 2> " + quote(err.string());
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  const auto o = support::slurp(out);
  const auto e = support::slurp(err);
  r.out.assign(o.begin(), o.end());
  r.err.assign(e.begin(), e.end());
  return r;
}

void write_json(const std::filesystem::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

json tiny() {
  return json::parse(R"({
    "encoder": {"layers": 1, "width": 16, "heads": 2},
    "tokenizer": {"layers": 1},
    "pretrain": {"steps": 2, "batch": 1, "decoder": {"layers": 1, "width": 16, "heads": 2}},
    "policy": {"steps": 2, "batch": 2, "head_hidden": 16},
    "data": {"pretrain_count": 2, "train_count": 2},
    "eval": {"episodes": 2},
    "log_every": 1
  })");
}

}  // namespace

TEST_CASE("cli usage errors exit with code 2") {
  TempDir tmp("cli_usage");
  CHECK(run(tmp, "").code == 2);
  CHECK(run(tmp, "frobnicate").code == 2);
  CHECK(run(tmp, "gen-data --count 0 --out " + quote((tmp / "d").string())).code == 2);
  CHECK_FALSE(std::filesystem::exists(tmp / "d"));
  write_json(tmp / "bad.json", {{"encoder", {{"widht", 8}}}});
  const Run r = run(tmp, "pretrain --config " + quote((tmp / "bad.json").string()) + " --out " +
                             quote((tmp / "p").string()));
  CHECK(r.code == 2);
  CHECK(r.err.find("encoder.widht") != std::string::npos);
  std::ofstream(tmp / "broken.json") << "{";
  CHECK(run(tmp, "train --config " + quote((tmp / "broken.json").string()) + " --out " + quote((tmp / "t").string()))
            .code == 2);
  CHECK(run(tmp, "eval").code == 2);
  CHECK(run(tmp, "--help").code == 0);
}

TEST_CASE("cli io and checkpoint errors use their own exit codes") {
  TempDir tmp("cli_io");
  write_json(tmp / "c.json", tiny());
  const std::string cfg = " --config " + quote((tmp / "c.json").string());
  CHECK(run(tmp, "eval --checkpoint " + quote((tmp / "missing.l3d").string())).code == 3);
  std::ofstream(tmp / "junk.l3d") << "not a checkpoint";
  CHECK(run(tmp, "eval --checkpoint " + quote((tmp / "junk.l3d").string())).code == 3);

  REQUIRE(run(tmp, "pretrain" + cfg + " --out " + quote((tmp / "p").string())).code == 0);
  json wide = tiny();
  wide["encoder"]["width"] = 32;
  write_json(tmp / "wide.json", wide);
  const Run r = run(tmp, "train --config " + quote((tmp / "wide.json").string()) + " --init " +
                             quote((tmp / "p" / "checkpoint.l3d").string()) + " --out " + quote((tmp / "w").string()));
  CHECK(r.code == 5);
  CHECK_FALSE(std::filesystem::exists(tmp / "w"));
  CHECK(run(tmp, "train" + cfg + " --init " + quote((tmp / "p" / "checkpoint.l3d").string()) + " --out " +
                     quote((tmp / "t").string()))
            .code == 0);
  CHECK(run(tmp, "train" + cfg + " --init " + quote((tmp / "t" / "checkpoint.l3d").string()) + " --out " +
                     quote((tmp / "t2").string()))
            .code == 5);
}

TEST_CASE("cli runs are reproducible end to end") {
  TempDir tmp("cli_repro");
  write_json(tmp / "c.json", tiny());
  const std::string cfg = " --config " + quote((tmp / "c.json").string());
  for (const char* d : {"a", "b"}) {
    REQUIRE(run(tmp, "gen-data --task reach --count 2 --seed 9 --out " + quote((tmp / ("data_" + std::string(d))).string()))
                .code == 0);
    REQUIRE(run(tmp, "pretrain" + cfg + " --out " + quote((tmp / ("p_" + std::string(d))).string())).code == 0);
    REQUIRE(run(tmp, "train" + cfg + " --init " + quote((tmp / ("p_" + std::string(d)) / "checkpoint.l3d").string()) +
                         " --out " + quote((tmp / ("t_" + std::string(d))).string()))
                .code == 0);
  }
  for (const char* f : {"data_%/manifest.json", "data_%/record_000001.bin", "p_%/metrics.jsonl", "p_%/checkpoint.l3d",
                        "t_%/metrics.jsonl", "t_%/checkpoint.l3d", "t_%/config.json"}) {
    std::string a = f;
    std::string b = f;
    a.replace(a.find('%'), 1, "a");
    b.replace(b.find('%'), 1, "b");
    CHECK_MESSAGE(support::slurp(tmp / a) == support::slurp(tmp / b), f);
  }
  const auto metrics = support::slurp(tmp / "t_a" / "metrics.jsonl");
  const json line = json::parse(metrics.begin(), std::find(metrics.begin(), metrics.end(), '\n'));
  CHECK(line["stage"] == "policy");
  for (const char* k : {"step", "translation", "rotation", "gripper", "total", "lr"}) CHECK(line.contains(k));

  const Run oracle = run(tmp, "eval --oracle --episodes 5");
  CHECK(oracle.code == 0);
  CHECK(oracle.out == "1.000\n");
  const Run eval = run(tmp, "eval --checkpoint " + quote((tmp / "t_a" / "checkpoint.l3d").string()) + " --episodes 3");
  CHECK(eval.code == 0);
  CHECK(eval.out.size() == 6);
}

TEST_CASE("cli ablate writes report.json and report.txt") {
  TempDir tmp("cli_ablate");
  json grid{{"base", tiny()},
            {"configs", json::array({{{"name", "lifted"}, {"overrides", json::object()}},
                                     {{"name", "learnable"}, {"overrides", {{"pe", "learnable"}}}},
                                     {{"name", "broken"}, {"overrides", {{"planes", 3}}}}})}};
  write_json(tmp / "grid.json", grid);
  const Run r = run(tmp, "ablate --jobs 2 --grid " + quote((tmp / "grid.json").string()) + " --out " +
                             quote((tmp / "r").string()));
  CHECK(r.code == 0);
  const auto bytes = support::slurp(tmp / "r" / "report.json");
  const json report = json::parse(bytes.begin(), bytes.end());
  REQUIRE(report["rows"].size() == 3);
  CHECK(report["rows"][0]["name"] == "lifted");
  CHECK(report["rows"][1]["status"] == "ok");
  CHECK(report["rows"][2]["status"] == "failed");
  CHECK(std::filesystem::exists(tmp / "r" / "report.txt"));
}

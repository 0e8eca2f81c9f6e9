#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "modsquad/checkpoint.hpp"
#include "modsquad/cli.hpp"
#include "modsquad/config.hpp"

using namespace modsquad;

namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "modsquad");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

fs::path scratch_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("modsquad_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

constexpr const char* kTinyConfig = R"({
  "model": {"d_model": 12, "blocks": 1, "n_experts_attn": 4, "k_attn": 2, "n_experts_mlp": 4, "k_mlp": 2,
            "head_dim": 8, "mlp_hidden": 16},
  "train": {"epochs": 2, "warmup_epochs": 1, "base_lr": 0.001, "samples_per_task": 8},
  "data": {"d_in": 4, "seq_len": 3, "train_samples": 48, "test_samples": 24},
  "seed": 5
})";

fs::path tiny_config(const fs::path& dir) {
  const fs::path file = dir / "tiny.json";
  std::ofstream(file) << kTinyConfig;
  return file;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  const fs::path dir = scratch_dir("usage");
  CHECK(run_cli({}).code == cli::kUsage);
  CHECK(run_cli({"bogus"}).code == cli::kUsage);
  CHECK(run_cli({"train", "--config", (dir / "none.json").string(), "--out", (dir / "o").string()}).code ==
        cli::kUsage);

  std::ofstream(dir / "bad.json") << R"({"train": {"epoch": 3}})";
  const auto r = run_cli({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("train.epoch: unknown key") != std::string::npos);

  CHECK(run_cli({"train", "--config", tiny_config(dir).string(), "--out", (dir / "o").string(), "--loss.nope",
                 "1"})
            .code == cli::kUsage);
  CHECK(run_cli({"analyze", "--ckpt", (dir / "absent").string(), "--out", (dir / "a").string()}).code ==
        cli::kUsage);
  fs::remove_all(dir);
}

TEST_CASE("grad-check passes and detects an injected fault") {
  const auto ok = run_cli({"grad-check"});
  CHECK(ok.code == cli::kOk);
  CHECK(ok.out.find("worst") != std::string::npos);
  const auto bad = run_cli({"grad-check", "--inject-fault"});
  CHECK(bad.code == cli::kCheckFailed);
  CHECK(bad.err.find("gradient mismatch") != std::string::npos);
}

TEST_CASE("train, prune, analyze and finetune-router on a tiny run") {
  const fs::path dir = scratch_dir("pipeline");
  const fs::path run = dir / "run";
  const auto t = run_cli({"train", "--config", tiny_config(dir).string(), "--out", run.string(), "--loss.w_mi",
                          "0.01"});
  REQUIRE(t.code == cli::kOk);
  for (const char* f : {"config.json", "train_log.jsonl", "metrics.json", "similarity.csv", "checkpoint/manifest.json",
                        "checkpoint/params.bin", "usage/usage_layer0.csv", "usage/usage_layer1.csv"}) {
    CHECK(fs::exists(run / f));
  }
  CHECK(read_json(run / "config.json")["loss"]["w_mi"] == 0.01);
  std::ifstream log(run / "train_log.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line);) {
    const json rec = json::parse(line);
    CHECK(rec.contains("elapsed_s"));
    ++lines;
  }
  CHECK(lines == read_json(run / "metrics.json")["steps"].get<std::size_t>());

  const fs::path pruned = dir / "pruned";
  const auto p = run_cli({"prune", "--ckpt", run.string(), "--task", "1", "--theta", "0", "--out", pruned.string()});
  REQUIRE(p.code == cli::kOk);
  const json eq = read_json(pruned / "equivalence.json");
  CHECK(eq["max_abs_output_diff"].get<double>() < 1e-9);
  CHECK(eq["removed_expert_evaluations"] == 0);
  CHECK(eq["checkpoint_bytes"]["pruned"].get<std::size_t>() < eq["checkpoint_bytes"]["full"].get<std::size_t>());
  CHECK(load_checkpoint(pruned / "checkpoint").task_id == std::optional<std::size_t>{1});

  CHECK(run_cli({"prune", "--ckpt", run.string(), "--task", "1", "--out", pruned.string()}).code == cli::kUsage);
  CHECK(run_cli({"prune", "--ckpt", run.string(), "--task", "nope", "--top", "50", "--out", pruned.string()})
            .code == cli::kUsage);
  CHECK(run_cli({"prune", "--ckpt", run.string(), "--task", "1", "--top", "50", "--out",
                 (dir / "top").string()})
            .code == cli::kOk);

  const fs::path an = dir / "analysis";
  REQUIRE(run_cli({"analyze", "--ckpt", run.string(), "--out", an.string()}).code == cli::kOk);
  const json mi = read_json(an / "mi.json");
  CHECK(mi["mi_per_layer"].size() == 2);
  CHECK(fs::exists(an / "usage_layer0.csv"));
  CHECK(fs::exists(an / "similarity.csv"));
  CHECK(run_cli({"analyze", "--ckpt", run.string(), "--data", "holdout", "--out", an.string()}).code ==
        cli::kUsage);

  const fs::path ft = dir / "ft";
  REQUIRE(run_cli({"finetune-router", "--ckpt", run.string(), "--steps", "5", "--batch", "8", "--out",
                   ft.string()})
              .code == cli::kOk);
  const json rep = read_json(ft / "finetune.json");
  CHECK(rep.contains("head_only"));
  CHECK(rep["trainable_params"].get<std::size_t>() > rep["head_only"]["trainable_params"].get<std::size_t>());
  fs::remove_all(dir);
}

TEST_CASE("installed binary reports exit codes to the shell") {
  const std::string cli = MODSQUAD_CLI_PATH;
  const auto status = [&](const std::string& args) {
    const int raw = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status("grad-check") == 0);
  CHECK(status("grad-check --inject-fault") == 1);
  CHECK(status("train --config /nonexistent/x.json --out /tmp/x") == 2);
  CHECK(status("--help") == 0);
}

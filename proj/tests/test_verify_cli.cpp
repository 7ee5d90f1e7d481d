#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"

#include "jepolab/cli.hpp"
#include "jepolab/serialize.hpp"
#include "jepolab/verify.hpp"

using namespace jepolab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const char* name) {
  fs::path dir = fs::temp_directory_path() / "jepolab_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json base_config(const fs::path& run_dir, int steps, std::uint64_t seed) {
  return json{
      {"task",
       {{"generator",
         {{"kind", "verifiable"}, {"seed", 5}, {"num_prompts", 4}, {"train_fraction", 1.0},
          {"vocab_size", 2}, {"context_order", 2}, {"max_cot_len", 2}, {"max_ans_len", 2}}}}},
      {"trainer", {{"algorithm", "jepo-multi"}, {"n", 4}, {"steps", steps}, {"seed", seed}}},
      {"eval", {{"proxy_nll_groups", 2}}},
      {"output", {{"run_dir", run_dir.string()}, {"reproducible", true}}}};
}

fs::path write_config(const fs::path& dir, const json& doc) {
  fs::path p = dir / "config.json";
  atomic_write_file(p, doc.dump(2) + "\n");
  return p;
}

}  // namespace

TEST_CASE("verify fast scope passes and stays within its time budget") {
  VerifyReport report = run_verification(VerifyScope::fast);
  for (const CheckResult& c : report.checks) {
    INFO(c.name, " measured=", c.measured, " tol=", c.tolerance);
    CHECK(c.pass);
  }
  CHECK(report.all_pass());
  CHECK(report.elapsed_seconds < 60.0);
}

TEST_CASE("verify names the invariant a corrupted estimator breaks") {
  VerifyReport biased =
      run_verification(VerifyScope::fast, FaultInjection::var_reduced_baseline_bias);
  bool cond_exp_failed = false;
  for (const CheckResult& c : biased.checks)
    if (c.name == "conditional-expectation" && !c.pass) cond_exp_failed = true;
  CHECK(cond_exp_failed);
  CHECK_FALSE(biased.all_pass());

  VerifyReport dropped =
      run_verification(VerifyScope::fast, FaultInjection::jepo_single_drop_supervised);
  bool jensen_failed = false;
  for (const CheckResult& c : dropped.checks)
    if (c.name == "grad-jensen-single" && !c.pass) jensen_failed = true;
  CHECK(jensen_failed);
}

TEST_CASE("cmd_train: steps = 0 emits the step-0 metrics row only") {
  fs::path dir = temp_dir("train_zero");
  fs::path cfg = write_config(dir, base_config(dir / "run", 0, 3));
  CHECK(cli::run({"train", "--config", cfg.string()}) == cli::kExitOk);
  std::string tsv = read_file(dir / "run" / "metrics.tsv");
  int lines = 0;
  for (char ch : tsv)
    if (ch == '\n') ++lines;
  CHECK(lines == 2);  // header + step 0
  CHECK(tsv.rfind("step\ttrain_reward\tkl_to_ref\tjensen_bound\tmarginal_loglik\tproxy_nll\t"
                  "format_valid_rate\tbranch_jepo_fraction\n",
                  0) == 0);
  CHECK(fs::exists(dir / "run" / "checkpoint_final.json"));
  CHECK(fs::exists(dir / "run" / "summary.json"));
  CHECK_FALSE(fs::exists(dir / "run" / ".lock"));
}

TEST_CASE("cmd_train: reproducibility mode gives byte-identical metrics") {
  fs::path dir = temp_dir("train_repro");
  fs::path cfg_a = dir / "a.json";
  fs::path cfg_b = dir / "b.json";
  atomic_write_file(cfg_a, base_config(dir / "run_a", 5, 7).dump(2) + "\n");
  atomic_write_file(cfg_b, base_config(dir / "run_b", 5, 7).dump(2) + "\n");
  REQUIRE(cli::run({"train", "--config", cfg_a.string(), "--reproducible"}) == cli::kExitOk);
  REQUIRE(cli::run({"train", "--config", cfg_b.string(), "--reproducible"}) == cli::kExitOk);
  CHECK(read_file(dir / "run_a" / "metrics.tsv") == read_file(dir / "run_b" / "metrics.tsv"));
  CHECK(read_file(dir / "run_a" / "metrics.jsonl") == read_file(dir / "run_b" / "metrics.jsonl"));
}

TEST_CASE("cmd_train rejects unknown config keys with a located diagnostic") {
  fs::path dir = temp_dir("train_badkey");
  json doc = base_config(dir / "run", 1, 1);
  doc["trainer"]["learning_rate_typo"] = 0.1;
  fs::path cfg = write_config(dir, doc);
  CHECK(cli::run({"train", "--config", cfg.string()}) == cli::kExitConfig);
}

TEST_CASE("cmd_train refuses rl on an unverifiable task before any step") {
  fs::path dir = temp_dir("train_regime");
  json doc = base_config(dir / "run", 3, 1);
  doc["task"]["generator"]["kind"] = "unverifiable";
  doc["trainer"]["algorithm"] = "rl";
  fs::path cfg = write_config(dir, doc);
  CHECK(cli::run({"train", "--config", cfg.string()}) == cli::kExitConfig);
  CHECK_FALSE(fs::exists(dir / "run" / "metrics.tsv"));
}

TEST_CASE("cmd_train seed override changes the stream, lock blocks reuse") {
  fs::path dir = temp_dir("train_seed");
  fs::path cfg = write_config(dir, base_config(dir / "run", 2, 7));
  REQUIRE(cli::run({"train", "--config", cfg.string(), "--seed", "8"}) == cli::kExitOk);
  std::string first = read_file(dir / "run" / "metrics.tsv");

  // a stale lock file refuses the run directory
  atomic_write_file(dir / "run" / ".lock", "");
  CHECK(cli::run({"train", "--config", cfg.string(), "--seed", "8"}) == cli::kExitRuntime);
  fs::remove(dir / "run" / ".lock");

  REQUIRE(cli::run({"train", "--config", cfg.string(), "--seed", "9"}) == cli::kExitOk);
  CHECK(read_file(dir / "run" / "metrics.tsv") != first);
}

TEST_CASE("cmd_eval scores a checkpoint and repeats identically") {
  fs::path dir = temp_dir("eval");
  json doc = base_config(dir / "run", 2, 11);
  doc["task"]["generator"]["train_fraction"] = 0.5;
  fs::path cfg = write_config(dir, doc);
  REQUIRE(cli::run({"train", "--config", cfg.string()}) == cli::kExitOk);

  fs::path report_a = dir / "report_a.json";
  fs::path report_b = dir / "report_b.json";
  CHECK(cli::run({"eval", "--checkpoint", (dir / "run" / "checkpoint_final.json").string(),
                  "--task", (dir / "run" / "task.json").string(), "--out", report_a.string(),
                  "--seed", "3"}) == cli::kExitOk);
  CHECK(cli::run({"eval", "--checkpoint", (dir / "run" / "checkpoint_final.json").string(),
                  "--task", (dir / "run" / "task.json").string(), "--out", report_b.string(),
                  "--seed", "3"}) == cli::kExitOk);
  CHECK(read_file(report_a) == read_file(report_b));

  json report = json::parse(read_file(report_a));
  double sum = 0.0;
  for (const auto& row : report.at("rows")) sum += row.at("r_combined").get<double>();
  CHECK(report.at("mean_combined").get<double>() ==
        doctest::Approx(sum / report.at("rows").size()));
}

TEST_CASE("cmd_eval records baseline scores for an untrained policy") {
  fs::path dir = temp_dir("eval_baseline");
  json doc = base_config(dir / "run", 0, 19);  // steps = 0: the untouched policy
  doc["task"]["generator"]["train_fraction"] = 0.5;
  fs::path cfg = write_config(dir, doc);
  REQUIRE(cli::run({"train", "--config", cfg.string()}) == cli::kExitOk);
  fs::path report_path = dir / "baseline.json";
  CHECK(cli::run({"eval", "--checkpoint", (dir / "run" / "checkpoint_final.json").string(),
                  "--task", (dir / "run" / "task.json").string(), "--out", report_path.string(),
                  "--seed", "5"}) == cli::kExitOk);
  json report = json::parse(read_file(report_path));
  CHECK(report.at("rows").size() == 2);
  CHECK(report.at("proxy_nll").get<double>() > 0.0);
  CHECK(report.at("mean_combined").get<double>() >= 0.0);
}

TEST_CASE("cmd_eval rejects mismatched checkpoint and task geometries") {
  fs::path dir = temp_dir("eval_mismatch");
  fs::path cfg = write_config(dir, base_config(dir / "run", 1, 13));
  REQUIRE(cli::run({"train", "--config", cfg.string()}) == cli::kExitOk);
  json other = base_config(dir / "other", 0, 13);
  other["task"]["generator"]["vocab_size"] = 3;
  fs::path cfg2 = dir / "config2.json";
  atomic_write_file(cfg2, other.dump(2) + "\n");
  REQUIRE(cli::run({"train", "--config", cfg2.string()}) == cli::kExitOk);
  CHECK(cli::run({"eval", "--checkpoint", (dir / "run" / "checkpoint_final.json").string(),
                  "--task", (dir / "other" / "task.json").string()}) == cli::kExitConfig);
}

TEST_CASE("make-task materializes a loadable document") {
  fs::path dir = temp_dir("make_task");
  fs::path out = dir / "task.json";
  CHECK(cli::run({"make-task", "--kind", "semi-verifiable", "--seed", "21", "--out", out.string(),
                  "--num-prompts", "6", "--vocab-size", "2", "--max-cot-len", "2",
                  "--max-ans-len", "2"}) == cli::kExitOk);
  TaskSpec task = load_task(out);
  CHECK(task.regime == Regime::semi_verifiable);
  CHECK(task.num_prompts() == 6);
}

TEST_CASE("cli verify subcommand exits 0 on pass and 3 under fault injection") {
  fs::path dir = temp_dir("cli_verify");
  fs::path out = dir / "report.json";
  CHECK(cli::run({"verify", "--scope", "fast", "--out", out.string()}) == cli::kExitOk);
  json report = json::parse(read_file(out));
  CHECK(report.at("all_pass").get<bool>());
  CHECK(cli::run({"verify", "--scope", "fast", "--inject-fault",
                  "var-reduced-baseline-bias"}) == cli::kExitVerifyFailed);
}

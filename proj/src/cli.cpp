#include "jepolab/cli.hpp"

#include <cstdlib>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "jepolab/serialize.hpp"
#include "jepolab/tasks.hpp"
#include "jepolab/trainer.hpp"
#include "jepolab/verify.hpp"

namespace jepolab {
namespace cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int line_of_byte(const std::string& text, std::size_t byte) {
  int line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

int line_of_key(const std::string& text, const std::string& key) {
  std::size_t pos = text.find("\"" + key + "\"");
  if (pos == std::string::npos) return 0;
  return line_of_byte(text, pos);
}

// Strict schema walk: unknown keys are rejected with the key path and the
// line it first appears on.
void require_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where,
                  const std::string& text) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      int line = line_of_key(text, key);
      throw ConfigError("unknown key '" + where + key + "'" +
                        (line > 0 ? " (line " + std::to_string(line) + ")" : ""));
    }
  }
}

struct InitSpec {
  std::string kind = "uniform";  // uniform | random
  double scale = 0.5;
  std::uint64_t seed = 1;
};

struct RunConfig {
  std::optional<std::string> task_file;
  std::optional<json> generator;
  InitSpec init;
  TrainerConfig trainer;
  EvalOptions eval;
  std::string run_dir;
  bool reproducible = false;
  int checkpoint_every = 0;
};

Algorithm algorithm_from_name(const std::string& s) {
  if (s == "jepo-single") return Algorithm::jepo_single;
  if (s == "jepo-multi") return Algorithm::jepo_multi;
  if (s == "rl") return Algorithm::rl;
  if (s == "sft") return Algorithm::sft;
  if (s == "hybrid") return Algorithm::hybrid;
  throw ConfigError("unknown algorithm '" + s + "'");
}

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::jepo_single: return "jepo-single";
    case Algorithm::jepo_multi: return "jepo-multi";
    case Algorithm::rl: return "rl";
    case Algorithm::sft: return "sft";
    case Algorithm::hybrid: return "hybrid";
  }
  return "jepo-multi";
}

TaskSizes sizes_from_json(const json& gen, const std::string& text) {
  require_keys(gen,
               {"kind", "seed", "num_prompts", "train_fraction", "vocab_size", "context_order",
                "max_cot_len", "max_ans_len", "unverifiable_fraction"},
               "/task/generator/", text);
  TaskSizes sizes;
  if (gen.contains("num_prompts")) sizes.num_prompts = gen.at("num_prompts").get<int>();
  if (gen.contains("train_fraction")) sizes.train_fraction = gen.at("train_fraction").get<double>();
  if (gen.contains("vocab_size")) sizes.vocab_size = gen.at("vocab_size").get<int>();
  if (gen.contains("context_order")) sizes.context_order = gen.at("context_order").get<int>();
  if (gen.contains("max_cot_len")) sizes.max_cot_len = gen.at("max_cot_len").get<int>();
  if (gen.contains("max_ans_len")) sizes.max_ans_len = gen.at("max_ans_len").get<int>();
  return sizes;
}

TaskSpec task_from_generator(const json& gen, const std::string& text) {
  std::string kind = gen.at("kind").get<std::string>();
  std::uint64_t seed = gen.value("seed", 1ull);
  TaskSizes sizes = sizes_from_json(gen, text);
  if (kind == "verifiable") return make_verifiable_task(seed, sizes);
  if (kind == "semi-verifiable")
    return make_semi_verifiable_task(seed, sizes, gen.value("unverifiable_fraction", 0.4));
  if (kind == "unverifiable") return make_unverifiable_task(seed, sizes);
  throw ConfigError("unknown task generator kind '" + kind + "'");
}

RunConfig parse_run_config(const std::string& text, const fs::path& config_path) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(config_path.string() + ": parse error at line " +
                      std::to_string(line_of_byte(text, e.byte)) + ": " + e.what());
  }
  require_keys(doc, {"task", "init", "trainer", "eval", "output"}, "/", text);
  RunConfig rc;

  if (!doc.contains("task")) throw ConfigError("missing required block 'task'");
  const json& task = doc.at("task");
  require_keys(task, {"file", "generator"}, "/task/", text);
  if (task.contains("file") == task.contains("generator"))
    throw ConfigError("/task must have exactly one of 'file' or 'generator'");
  if (task.contains("file")) rc.task_file = task.at("file").get<std::string>();
  if (task.contains("generator")) rc.generator = task.at("generator");

  if (doc.contains("init")) {
    const json& init = doc.at("init");
    require_keys(init, {"kind", "scale", "seed"}, "/init/", text);
    rc.init.kind = init.value("kind", std::string("uniform"));
    if (rc.init.kind != "uniform" && rc.init.kind != "random")
      throw ConfigError("/init/kind must be 'uniform' or 'random'");
    rc.init.scale = init.value("scale", 0.5);
    rc.init.seed = init.value("seed", 1ull);
  }

  if (doc.contains("trainer")) {
    const json& t = doc.at("trainer");
    require_keys(t,
                 {"algorithm", "n", "batch_prompts", "beta_kl", "beta_sup", "penalty_p", "clip_lo",
                  "clip_hi", "lr", "optimizer", "adam", "steps", "seed", "reinforce_scaling",
                  "length_norm", "kl_grad_exact"},
                 "/trainer/", text);
    TrainerConfig& c = rc.trainer;
    if (t.contains("algorithm")) c.algorithm = algorithm_from_name(t.at("algorithm"));
    c.n = t.value("n", c.n);
    c.batch_prompts = t.value("batch_prompts", c.batch_prompts);
    c.beta_kl = t.value("beta_kl", c.beta_kl);
    c.beta_sup = t.value("beta_sup", c.beta_sup);
    c.penalty_p = t.value("penalty_p", c.penalty_p);
    c.clip_lo = t.value("clip_lo", c.clip_lo);
    c.clip_hi = t.value("clip_hi", c.clip_hi);
    c.lr = t.value("lr", c.lr);
    if (t.contains("optimizer")) {
      std::string opt = t.at("optimizer").get<std::string>();
      if (opt == "sgd")
        c.optimizer = OptimizerKind::sgd;
      else if (opt == "adam")
        c.optimizer = OptimizerKind::adam;
      else
        throw ConfigError("/trainer/optimizer must be 'sgd' or 'adam'");
    }
    if (t.contains("adam")) {
      const json& a = t.at("adam");
      require_keys(a, {"beta1", "beta2", "eps"}, "/trainer/adam/", text);
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    c.steps = t.value("steps", c.steps);
    c.seed = t.value("seed", c.seed);
    if (t.contains("reinforce_scaling")) {
      std::string s = t.at("reinforce_scaling").get<std::string>();
      if (s == "averaged")
        c.reinforce_scaling = ReinforceScaling::averaged;
      else if (s == "summed")
        c.reinforce_scaling = ReinforceScaling::summed;
      else
        throw ConfigError("/trainer/reinforce_scaling must be 'averaged' or 'summed'");
    }
    if (t.contains("length_norm")) {
      std::string s = t.at("length_norm").get<std::string>();
      if (s == "none")
        c.length_norm = LengthNorm::none;
      else if (s == "cot-plus-answer")
        c.length_norm = LengthNorm::cot_plus_answer;
      else if (s == "cot-only")
        c.length_norm = LengthNorm::cot_only;
      else
        throw ConfigError("/trainer/length_norm must be none|cot-plus-answer|cot-only");
    }
    c.kl_grad_exact = t.value("kl_grad_exact", c.kl_grad_exact);
  }

  if (doc.contains("eval")) {
    const json& e = doc.at("eval");
    require_keys(e, {"oracle_every", "proxy_nll_n", "proxy_nll_groups", "max_enum_sequences"},
                 "/eval/", text);
    rc.eval.oracle_every = e.value("oracle_every", rc.eval.oracle_every);
    rc.eval.proxy_nll_n = e.value("proxy_nll_n", rc.eval.proxy_nll_n);
    rc.eval.proxy_nll_groups = e.value("proxy_nll_groups", rc.eval.proxy_nll_groups);
    rc.eval.max_enum_sequences = e.value("max_enum_sequences", rc.eval.max_enum_sequences);
  }

  if (!doc.contains("output")) throw ConfigError("missing required block 'output'");
  const json& out = doc.at("output");
  require_keys(out, {"run_dir", "reproducible", "checkpoint_every"}, "/output/", text);
  rc.run_dir = out.value("run_dir", std::string());
  rc.reproducible = out.value("reproducible", false);
  rc.checkpoint_every = out.value("checkpoint_every", 0);
  return rc;
}

// Held for the lifetime of a run; one run directory per process.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw std::runtime_error("run directory is locked (found " + path_.string() + ")");
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

const char* kMetricsHeader =
    "step\ttrain_reward\tkl_to_ref\tjensen_bound\tmarginal_loglik\tproxy_nll\tformat_valid_rate\t"
    "branch_jepo_fraction\n";

std::string metrics_tsv_row(const MetricsRecord& m) {
  std::ostringstream row;
  row << m.step << '\t' << format_metric(m.train_reward) << '\t' << format_metric(m.kl_to_ref)
      << '\t' << format_metric(m.jensen_bound) << '\t' << format_metric(m.marginal_loglik) << '\t'
      << format_metric(m.proxy_nll) << '\t' << format_metric(m.format_valid_rate) << '\t'
      << format_metric(m.branch_jepo_fraction) << '\n';
  return row.str();
}

json metric_or_null(double x) {
  if (std::isnan(x) || std::isinf(x)) return nullptr;
  return x;
}

json metrics_json(const MetricsRecord& m) {
  return json{{"step", m.step},
              {"train_reward", metric_or_null(m.train_reward)},
              {"kl_to_ref", metric_or_null(m.kl_to_ref)},
              {"jensen_bound", metric_or_null(m.jensen_bound)},
              {"marginal_loglik", metric_or_null(m.marginal_loglik)},
              {"proxy_nll", metric_or_null(m.proxy_nll)},
              {"format_valid_rate", metric_or_null(m.format_valid_rate)},
              {"branch_jepo_fraction", metric_or_null(m.branch_jepo_fraction)},
              {"branch_labels", m.branch_labels},
              {"batch_prompts", m.batch_prompts},
              {"advantages",
               {{"mean", metric_or_null(m.advantage_stats.mean)},
                {"std", metric_or_null(m.advantage_stats.stddev)},
                {"min", metric_or_null(m.advantage_stats.min)},
                {"max", metric_or_null(m.advantage_stats.max)},
                {"count", m.advantage_stats.count}}}};
}

struct TrainArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool reproducible = false;
};

int cmd_train(const TrainArgs& args) {
  std::string text = read_file(args.config_path);
  RunConfig rc = parse_run_config(text, args.config_path);

  // overrides: flag, then environment, then config
  if (const char* env = std::getenv("JEPOLAB_SEED"); env && !args.seed)
    rc.trainer.seed = std::strtoull(env, nullptr, 10);
  if (args.seed) rc.trainer.seed = *args.seed;
  if (const char* env = std::getenv("JEPOLAB_OUT"); env && !args.out) rc.run_dir = env;
  if (args.out) rc.run_dir = *args.out;
  if (args.reproducible) rc.reproducible = true;
  if (rc.run_dir.empty())
    throw ConfigError("no run directory: set /output/run_dir, JEPOLAB_OUT, or --out");

  TaskSpec task = rc.task_file ? load_task(*rc.task_file) : task_from_generator(*rc.generator, text);

  PolicyShape shape = task.shape();
  PolicyParams init = rc.init.kind == "random"
                          ? PolicyParams::random(shape, rc.init.seed, rc.init.scale)
                          : PolicyParams(shape);

  // surfaces regime/algorithm mismatches and bad hyper-parameters before any
  // file is written
  Trainer trainer(init, task, rc.trainer, rc.eval);

  fs::create_directories(rc.run_dir);
  RunLock lock(rc.run_dir);
  fs::path dir(rc.run_dir);

  json effective{{"config_file", args.config_path},
                 {"algorithm", algorithm_name(rc.trainer.algorithm)},
                 {"seed", rc.trainer.seed},
                 {"steps", rc.trainer.steps},
                 {"reproducible", rc.reproducible}};
  atomic_write_file(dir / "config.json", json::parse(text).dump(2) + "\n");
  atomic_write_file(dir / "run_info.json", effective.dump(2) + "\n");
  save_task(dir / "task.json", task);

  std::string tsv(kMetricsHeader);
  std::string jsonl;
  auto flush = [&] {
    atomic_write_file(dir / "metrics.tsv", tsv);
    atomic_write_file(dir / "metrics.jsonl", jsonl);
  };

  MetricsRecord last = trainer.initial_metrics();
  tsv += metrics_tsv_row(last);
  jsonl += metrics_json(last).dump() + "\n";
  flush();

  for (int s = 1; s <= rc.trainer.steps; ++s) {
    last = trainer.step();
    tsv += metrics_tsv_row(last);
    jsonl += metrics_json(last).dump() + "\n";
    flush();
    if (rc.checkpoint_every > 0 && s % rc.checkpoint_every == 0)
      save_policy(dir / ("checkpoint_step_" + std::to_string(s) + ".json"), trainer.params());
  }
  save_policy(dir / "checkpoint_final.json", trainer.params());

  json summary{{"steps", rc.trainer.steps},
               {"final_train_reward", metric_or_null(last.train_reward)},
               {"final_kl_to_ref", metric_or_null(last.kl_to_ref)},
               {"final_jensen_bound", metric_or_null(last.jensen_bound)},
               {"final_marginal_loglik", metric_or_null(last.marginal_loglik)},
               {"final_proxy_nll", metric_or_null(last.proxy_nll)},
               {"final_format_valid_rate", metric_or_null(last.format_valid_rate)}};
  atomic_write_file(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << "train: completed " << rc.trainer.steps << " steps into " << rc.run_dir << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& task_path,
             const std::string& out_path, std::uint64_t seed, int proxy_n, int proxy_groups) {
  PolicyParams params = load_policy(checkpoint);
  TaskSpec task = load_task(task_path);
  if (params.shape() != task.shape())
    throw ConfigError("checkpoint and task geometries do not match");

  std::span<const int> prompts = task.test_split.empty() ? std::span<const int>(task.train_split)
                                                         : std::span<const int>(task.test_split);
  std::vector<Generation> gens;
  for (int x : prompts) {
    Rng rng = Rng::derive(seed, 0x6576, static_cast<std::uint64_t>(x));
    gens.push_back(sample_generation(params, x, rng));
  }
  ScoreReport report = score_generations(task, gens, prompts);
  ProxyNll nll = proxy_nll(params, task, prompts, proxy_n, proxy_groups, seed);

  json rows = json::array();
  for (const ScoreRow& r : report.rows)
    rows.push_back({{"prompt", r.prompt},
                    {"r_train", r.r_train},
                    {"r_eval", r.r_eval},
                    {"r_combined", r.r_combined}});
  json doc{{"prompts_evaluated", static_cast<int>(prompts.size())},
           {"mean_train", report.mean_train},
           {"mean_eval", report.mean_eval},
           {"mean_combined", report.mean_combined},
           {"unverifiable_count", report.unverifiable_count},
           {"mean_eval_unverifiable", report.mean_eval_unverifiable},
           {"mean_combined_unverifiable", report.mean_combined_unverifiable},
           {"proxy_nll", nll.sampled},
           {"proxy_nll_exact", nll.exact ? json(*nll.exact) : json(nullptr)},
           {"rows", rows}};
  if (!out_path.empty()) atomic_write_file(out_path, doc.dump(2) + "\n");
  std::cout << "eval: mean_combined=" << format_metric(report.mean_combined)
            << " proxy_nll=" << format_metric(nll.sampled) << "\n";
  return kExitOk;
}

int cmd_verify(const std::string& scope_name, const std::string& out_path, std::uint64_t seed,
               const std::string& fault_name) {
  VerifyScope scope;
  if (scope_name == "fast")
    scope = VerifyScope::fast;
  else if (scope_name == "full")
    scope = VerifyScope::full;
  else
    throw ConfigError("--scope must be 'fast' or 'full'");
  VerifyReport report = run_verification(scope, fault_from_name(fault_name), seed);
  for (const CheckResult& c : report.checks) {
    const char* status = c.skipped ? "SKIP" : (c.pass ? "PASS" : "FAIL");
    std::cout << status << " " << c.name << " (measured=" << format_metric(c.measured)
              << ", tolerance=" << format_metric(c.tolerance) << ")"
              << (c.detail.empty() ? "" : " " + c.detail) << "\n";
  }
  std::cout << (report.all_pass() ? "verify: all checks passed" : "verify: FAILURES present")
            << " in " << format_metric(report.elapsed_seconds) << "s\n";
  if (!out_path.empty()) atomic_write_file(out_path, report.to_json().dump(2) + "\n");
  return report.all_pass() ? kExitOk : kExitVerifyFailed;
}

int cmd_make_task(const std::string& kind, std::uint64_t seed, const TaskSizes& sizes,
                  double unverifiable_fraction, const std::string& out_path) {
  TaskSpec task;
  if (kind == "verifiable")
    task = make_verifiable_task(seed, sizes);
  else if (kind == "semi-verifiable")
    task = make_semi_verifiable_task(seed, sizes, unverifiable_fraction);
  else if (kind == "unverifiable")
    task = make_unverifiable_task(seed, sizes);
  else
    throw ConfigError("--kind must be verifiable|semi-verifiable|unverifiable");
  save_task(out_path, task);
  std::cout << "make-task: wrote " << out_path << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"enumerable-policy laboratory for Jensen's-bound policy optimization"};
  app.require_subcommand(1);

  TrainArgs train_args;
  std::uint64_t seed_flag = 0;
  std::string out_flag;

  CLI::App* train = app.add_subcommand("train", "run a configured training loop");
  train->add_option("--config", train_args.config_path, "run configuration file")->required();
  train->add_option("--seed", seed_flag, "override the training seed");
  train->add_option("--out", out_flag, "override the run directory");
  train->add_flag("--reproducible", train_args.reproducible, "record reproducibility mode");

  std::string eval_checkpoint, eval_task, eval_out;
  std::uint64_t eval_seed = 0;
  int eval_proxy_n = 4, eval_proxy_groups = 8;
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a task's test split");
  eval->add_option("--checkpoint", eval_checkpoint)->required();
  eval->add_option("--task", eval_task)->required();
  eval->add_option("--out", eval_out, "report file");
  eval->add_option("--seed", eval_seed);
  eval->add_option("--proxy-n", eval_proxy_n);
  eval->add_option("--proxy-groups", eval_proxy_groups);

  std::string verify_scope = "fast", verify_out, verify_fault;
  std::uint64_t verify_seed = 20240501;
  CLI::App* verify = app.add_subcommand("verify", "run the oracle invariant suite");
  verify->add_option("--scope", verify_scope, "fast or full");
  verify->add_option("--out", verify_out, "machine-readable report file");
  verify->add_option("--seed", verify_seed);
  verify->add_option("--inject-fault", verify_fault,
                     "negative-control fixture: corrupt one estimator");

  std::string mt_kind, mt_out;
  std::uint64_t mt_seed = 1;
  TaskSizes mt_sizes;
  double mt_frac = 0.4;
  CLI::App* make_task = app.add_subcommand("make-task", "materialize a task document");
  make_task->add_option("--kind", mt_kind)->required();
  make_task->add_option("--seed", mt_seed);
  make_task->add_option("--out", mt_out)->required();
  make_task->add_option("--num-prompts", mt_sizes.num_prompts);
  make_task->add_option("--train-fraction", mt_sizes.train_fraction);
  make_task->add_option("--vocab-size", mt_sizes.vocab_size);
  make_task->add_option("--context-order", mt_sizes.context_order);
  make_task->add_option("--max-cot-len", mt_sizes.max_cot_len);
  make_task->add_option("--max-ans-len", mt_sizes.max_ans_len);
  make_task->add_option("--unverifiable-fraction", mt_frac);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) {
      if (train->count("--seed") > 0) train_args.seed = seed_flag;
      if (train->count("--out") > 0) train_args.out = out_flag;
      return cmd_train(train_args);
    }
    if (eval->parsed())
      return cmd_eval(eval_checkpoint, eval_task, eval_out, eval_seed, eval_proxy_n,
                      eval_proxy_groups);
    if (verify->parsed()) return cmd_verify(verify_scope, verify_out, verify_seed, verify_fault);
    if (make_task->parsed()) return cmd_make_task(mt_kind, mt_seed, mt_sizes, mt_frac, mt_out);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.push_back("jepolab");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const std::string& a : full) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace cli
}  // namespace jepolab

#include "jepolab/serialize.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace jepolab {

using nlohmann::json;

std::string encode_double(double x) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", x);
  return buf;
}

double decode_double(const std::string& s) {
  char* end = nullptr;
  double x = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw std::invalid_argument("decode_double: unparsable value '" + s + "'");
  return x;
}

std::string format_metric(double x) {
  if (std::isnan(x)) return "na";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

namespace {

json vocab_to_json(const Vocab& v) {
  return json{{"size", v.size}, {"eoc", v.eoc}, {"eoa", v.eoa}, {"bos", v.bos}};
}

Vocab vocab_from_json(const json& doc) {
  Vocab v;
  v.size = doc.at("size").get<int>();
  v.eoc = doc.at("eoc").get<Token>();
  v.eoa = doc.at("eoa").get<Token>();
  v.bos = doc.at("bos").get<Token>();
  v.validate();
  return v;
}

json doubles_to_json(std::span<const double> xs) {
  json arr = json::array();
  for (double x : xs) arr.push_back(encode_double(x));
  return arr;
}

std::vector<double> doubles_from_json(const json& arr) {
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& s : arr) out.push_back(decode_double(s.get<std::string>()));
  return out;
}

}  // namespace

json policy_to_json(const PolicyParams& params) {
  const PolicyShape& s = params.shape();
  // tables in row-major layout order: per prompt, chain rows then answer rows,
  // contexts in ascending code order
  std::size_t width = static_cast<std::size_t>(params.row_width());
  std::size_t cot_rows = params.cot_contexts().size();
  std::size_t ans_rows = params.ans_contexts().size();
  std::vector<double> cot_table, ans_table;
  std::span<const double> values = params.values();
  for (int x = 0; x < s.num_prompts; ++x) {
    std::size_t base = static_cast<std::size_t>(x) * params.rows_per_prompt() * width;
    for (std::size_t i = 0; i < cot_rows * width; ++i) cot_table.push_back(values[base + i]);
    for (std::size_t i = 0; i < ans_rows * width; ++i)
      ans_table.push_back(values[base + cot_rows * width + i]);
  }
  return json{{"format", "jepolab-policy-v1"},
              {"vocab", vocab_to_json(s.vocab)},
              {"context_order", s.context_order},
              {"max_cot_len", s.max_cot_len},
              {"max_ans_len", s.max_ans_len},
              {"num_prompts", s.num_prompts},
              {"cot_rows_per_prompt", cot_rows},
              {"ans_rows_per_prompt", ans_rows},
              {"logits_cot", doubles_to_json(cot_table)},
              {"logits_ans", doubles_to_json(ans_table)}};
}

PolicyParams policy_from_json(const json& doc) {
  if (doc.at("format").get<std::string>() != "jepolab-policy-v1")
    throw std::invalid_argument("policy_from_json: unknown format tag");
  PolicyShape s;
  s.vocab = vocab_from_json(doc.at("vocab"));
  s.context_order = doc.at("context_order").get<int>();
  s.max_cot_len = doc.at("max_cot_len").get<int>();
  s.max_ans_len = doc.at("max_ans_len").get<int>();
  s.num_prompts = doc.at("num_prompts").get<int>();
  PolicyParams params(s);

  std::size_t width = static_cast<std::size_t>(params.row_width());
  std::size_t cot_rows = params.cot_contexts().size();
  std::size_t ans_rows = params.ans_contexts().size();
  if (doc.at("cot_rows_per_prompt").get<std::size_t>() != cot_rows ||
      doc.at("ans_rows_per_prompt").get<std::size_t>() != ans_rows)
    throw std::invalid_argument("policy_from_json: row counts disagree with the geometry");
  std::vector<double> cot_table = doubles_from_json(doc.at("logits_cot"));
  std::vector<double> ans_table = doubles_from_json(doc.at("logits_ans"));
  if (cot_table.size() != cot_rows * width * static_cast<std::size_t>(s.num_prompts) ||
      ans_table.size() != ans_rows * width * static_cast<std::size_t>(s.num_prompts))
    throw std::invalid_argument("policy_from_json: table sizes disagree with the geometry");

  std::span<double> values = params.values();
  for (int x = 0; x < s.num_prompts; ++x) {
    std::size_t base = static_cast<std::size_t>(x) * params.rows_per_prompt() * width;
    for (std::size_t i = 0; i < cot_rows * width; ++i)
      values[base + i] = cot_table[static_cast<std::size_t>(x) * cot_rows * width + i];
    for (std::size_t i = 0; i < ans_rows * width; ++i)
      values[base + cot_rows * width + i] =
          ans_table[static_cast<std::size_t>(x) * ans_rows * width + i];
  }
  return params;
}

void save_policy(const std::filesystem::path& path, const PolicyParams& params) {
  atomic_write_file(path, policy_to_json(params).dump(2) + "\n");
}

PolicyParams load_policy(const std::filesystem::path& path) {
  return policy_from_json(json::parse(read_file(path)));
}

namespace {

json tokens_to_json(std::span<const Token> seq) {
  return json(std::vector<Token>(seq.begin(), seq.end()));
}

json match_to_json(const MatchFunction& m) {
  json doc;
  doc["kind"] = m.kind() == MatchKind::exact ? "exact" : "equivalence-class";
  if (m.kind() == MatchKind::equivalence_class) {
    json classes = json::array();
    for (const auto& cls : m.classes()) {
      json members = json::array();
      for (const auto& member : cls) members.push_back(tokens_to_json(member));
      classes.push_back(members);
    }
    doc["classes"] = classes;
  }
  return doc;
}

MatchFunction match_from_json(const json& doc) {
  std::string kind = doc.at("kind").get<std::string>();
  if (kind == "exact") return MatchFunction::exact();
  if (kind != "equivalence-class")
    throw std::invalid_argument("match_from_json: unknown kind '" + kind + "'");
  std::vector<std::vector<std::vector<Token>>> classes;
  for (const auto& cls : doc.at("classes")) {
    std::vector<std::vector<Token>> members;
    for (const auto& member : cls) members.push_back(member.get<std::vector<Token>>());
    classes.push_back(std::move(members));
  }
  return MatchFunction::equivalence(std::move(classes));
}

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::verifiable: return "verifiable";
    case Regime::semi_verifiable: return "semi-verifiable";
    case Regime::unverifiable: return "unverifiable";
  }
  return "verifiable";
}

Regime regime_from_name(const std::string& s) {
  if (s == "verifiable") return Regime::verifiable;
  if (s == "semi-verifiable") return Regime::semi_verifiable;
  if (s == "unverifiable") return Regime::unverifiable;
  throw std::invalid_argument("unknown regime '" + s + "'");
}

}  // namespace

json task_to_json(const TaskSpec& task) {
  json truth = json::array();
  for (const auto& a : task.truth) truth.push_back(tokens_to_json(a));
  json golden = json::object();
  for (const auto& [x, c] : task.golden_cots) golden[std::to_string(x)] = tokens_to_json(c);
  json doc{{"format", "jepolab-task-v1"},
           {"name", task.name},
           {"regime", regime_name(task.regime)},
           {"vocab", vocab_to_json(task.vocab)},
           {"context_order", task.context_order},
           {"max_cot_len", task.max_cot_len},
           {"max_ans_len", task.max_ans_len},
           {"truth", truth},
           {"train_split", task.train_split},
           {"test_split", task.test_split},
           {"train_verifiable", task.train_verifiable},
           {"eval_match", match_to_json(task.eval_match)},
           {"golden_cots", golden}};
  if (task.train_match.has_value()) doc["train_match"] = match_to_json(*task.train_match);
  return doc;
}

TaskSpec task_from_json(const json& doc) {
  if (doc.at("format").get<std::string>() != "jepolab-task-v1")
    throw std::invalid_argument("task_from_json: unknown format tag");
  TaskSpec task;
  task.name = doc.at("name").get<std::string>();
  task.regime = regime_from_name(doc.at("regime").get<std::string>());
  task.vocab = vocab_from_json(doc.at("vocab"));
  task.context_order = doc.at("context_order").get<int>();
  task.max_cot_len = doc.at("max_cot_len").get<int>();
  task.max_ans_len = doc.at("max_ans_len").get<int>();
  for (const auto& a : doc.at("truth")) task.truth.push_back(a.get<std::vector<Token>>());
  task.train_split = doc.at("train_split").get<std::vector<int>>();
  task.test_split = doc.at("test_split").get<std::vector<int>>();
  task.train_verifiable = doc.at("train_verifiable").get<std::vector<bool>>();
  task.eval_match = match_from_json(doc.at("eval_match"));
  if (doc.contains("train_match")) task.train_match = match_from_json(doc.at("train_match"));
  for (const auto& [key, value] : doc.at("golden_cots").items())
    task.golden_cots[std::stoi(key)] = value.get<std::vector<Token>>();
  task.validate();
  return task;
}

void save_task(const std::filesystem::path& path, const TaskSpec& task) {
  atomic_write_file(path, task_to_json(task).dump(2) + "\n");
}

TaskSpec load_task(const std::filesystem::path& path) {
  return task_from_json(json::parse(read_file(path)));
}

}  // namespace jepolab

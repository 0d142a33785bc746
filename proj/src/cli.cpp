#include "icx/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "icx/corpus.hpp"
#include "icx/error.hpp"
#include "icx/evalrunner.hpp"
#include "icx/netbackend.hpp"
#include "icx/scoring.hpp"

namespace icx::cli {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kOraclePrefix = "oracle:";

// Flags as typed; unset optionals fall back to env, then config file, then defaults.
struct ExperimentFlags {
  std::optional<std::string> config;
  std::optional<std::string> server_url;
  std::optional<std::string> api_key;
  std::optional<std::string> model;
  std::optional<std::string> family;
  std::optional<std::size_t> max_tokens;
  std::optional<std::string> task;
  std::optional<std::string> source;
  std::optional<std::string> target;
  std::optional<std::string> mode;
  std::vector<std::size_t> k;
  std::vector<std::uint64_t> seeds;
  std::optional<std::string> order;
  std::optional<std::size_t> query_limit;
  std::optional<std::string> hypothesis_template;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> max_in_flight;
  std::optional<double> timeout_s;
  std::optional<int> max_retries;
  std::optional<std::string> cache_dir;
  bool no_cache = false;
  std::optional<std::string> dump_prompts;
  std::optional<std::string> dump_predictions;
};

void add_experiment_flags(CLI::App& cmd, ExperimentFlags& f) {
  cmd.add_option("--config", f.config, "JSON config file (or a report, whose config_echo is used)");
  cmd.add_option("--server-url", f.server_url, "Model server base URL [env: ICX_SERVER_URL]");
  cmd.add_option("--api-key", f.api_key, "Bearer token [env: ICX_API_KEY]");
  cmd.add_option("--model", f.model, "Served model name, or oracle:{uniform,memorizing,hash}");
  cmd.add_option("--family", f.family, "Oracle family")->check(CLI::IsMember({"causal", "seq2seq", "nli"}));
  cmd.add_option("--max-tokens", f.max_tokens, "Oracle context length");
  cmd.add_option("--task", f.task, "Task mode")->check(CLI::IsMember({"monolingual", "cross_lingual"}));
  cmd.add_option("--source", f.source, "Canonical JSONL corpus providing shots");
  cmd.add_option("--target", f.target, "Canonical JSONL corpus providing queries");
  cmd.add_option("--mode", f.mode, "Evaluation mode")
      ->check(CLI::IsMember({"fewshot_boolean", "zeroshot_qa", "zeroshot_entail"}));
  cmd.add_option("--k", f.k, "Shot counts, comma separated")->delimiter(',');
  cmd.add_option("--seeds", f.seeds, "Run seeds, comma separated")->delimiter(',');
  cmd.add_option("--order", f.order, "Shot order")
      ->check(CLI::IsMember({"interleaved", "positives_first"}));
  cmd.add_option("--query-limit", f.query_limit, "Evaluate the first N test queries");
  cmd.add_option("--hypothesis-template", f.hypothesis_template, "Entailment hypothesis with {label}");
  cmd.add_option("--workers", f.workers, "Queries scored concurrently");
  cmd.add_option("--max-in-flight", f.max_in_flight, "Concurrent HTTP requests");
  cmd.add_option("--timeout", f.timeout_s, "HTTP timeout in seconds");
  cmd.add_option("--max-retries", f.max_retries, "Retries for 5xx and transport errors");
  cmd.add_option("--cache-dir", f.cache_dir, "Spill directory for the response cache");
  cmd.add_flag("--no-cache", f.no_cache, "Disable the response cache");
  cmd.add_option("--dump-prompts", f.dump_prompts, "Write every prompt as JSON into this directory");
  cmd.add_option("--dump-predictions", f.dump_predictions, "Write prediction records as JSONL");
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

ordered_json load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path + " must be a JSON object");
  if (j.contains("config_echo")) j = j["config_echo"];
  static const std::vector<std::string> known = {
      "source", "target", "task", "model", "server_url", "family", "max_tokens", "mode",
      "k_values", "order_strategy", "seeds", "query_limit", "hypothesis_template", "workers",
      "max_in_flight", "timeout_s", "max_retries", "cache_dir", "dump_prompts",
      "dump_predictions",
      // report-only echo fields
      "source_corpus", "target_corpus", "backend"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("config " + path + ": unknown key '" + key + "'");
    }
  }
  return j;
}

template <class T>
std::optional<T> from_file(const ordered_json& file, const char* key) {
  if (!file.contains(key) || file[key].is_null()) return std::nullopt;
  try {
    return file[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

template <class T>
std::optional<T> pick(const std::optional<T>& flag, const ordered_json& file, const char* key) {
  return flag ? flag : from_file<T>(file, key);
}

struct Resolved {
  ordered_json echo = ordered_json::object();
  ExperimentConfig experiment;
  std::shared_ptr<ModelClient> client;
};

std::shared_ptr<const Corpus> load_corpus(const std::string& path) {
  return std::make_shared<const Corpus>(import_jsonl(path));
}

Resolved resolve(const ExperimentFlags& f, std::ostream& err) {
  const ordered_json file = f.config ? load_config_file(*f.config) : ordered_json::object();
  Resolved r;
  auto& x = r.experiment;

  const auto source = pick(f.source, file, "source");
  if (!source) throw ConfigError("--source is required");
  const auto target_path = pick(f.target, file, "target");
  const auto task_mode = parse_task_mode(pick(f.task, file, "task").value_or("monolingual"));
  auto source_corpus = load_corpus(*source);
  auto target_corpus = source_corpus;
  if (task_mode == TaskMode::cross_lingual) {
    if (!target_path) throw ConfigError("cross_lingual tasks need --target");
    target_corpus = load_corpus(*target_path);
  } else if (target_path && fs::path(*target_path) != fs::path(*source)) {
    throw ConfigError("monolingual tasks take a single corpus (--source)");
  }
  x.task = std::make_shared<const TaskSpec>(source_corpus, target_corpus, task_mode);
  r.echo["source"] = *source;
  if (task_mode == TaskMode::cross_lingual) r.echo["target"] = *target_path;

  x.mode = parse_eval_mode(pick(f.mode, file, "mode").value_or("fewshot_boolean"));
  if (!f.k.empty()) {
    x.k_values = f.k;
  } else if (auto ks = from_file<std::vector<std::size_t>>(file, "k_values")) {
    x.k_values = *ks;
  }
  if (!f.seeds.empty()) {
    x.seeds = f.seeds;
  } else if (auto s = from_file<std::vector<std::uint64_t>>(file, "seeds")) {
    x.seeds = *s;
  }
  x.order = parse_order_strategy(pick(f.order, file, "order_strategy").value_or("interleaved"));
  x.query_limit = pick(f.query_limit, file, "query_limit");
  if (auto t = pick(f.hypothesis_template, file, "hypothesis_template")) x.hypothesis_template = *t;
  x.workers = pick(f.workers, file, "workers").value_or(4);
  if (auto d = pick(f.dump_prompts, file, "dump_prompts")) x.dump_prompts = *d;
  if (auto d = pick(f.dump_predictions, file, "dump_predictions")) x.dump_predictions = *d;

  const auto model = pick(f.model, file, "model");
  if (!model) throw ConfigError("--model is required");
  r.echo["model"] = *model;

  if (model->starts_with(kOraclePrefix)) {
    OracleConfig oc;
    oc.family = parse_model_family(pick(f.family, file, "family").value_or("causal"));
    oc.max_tokens = pick(f.max_tokens, file, "max_tokens").value_or(1024);
    oc.hypothesis_template = x.hypothesis_template;
    for (const auto& ex : target_corpus->examples()) oc.gold.insert_or_assign(ex.text, ex.label);
    x.backend = make_oracle(parse_oracle_kind(model->substr(kOraclePrefix.size())), std::move(oc));
    r.echo["family"] = to_string(x.backend->descriptor().family);
    r.echo["max_tokens"] = x.backend->descriptor().max_tokens;
  } else {
    ServerConfig sc;
    auto url = f.server_url ? f.server_url : env("ICX_SERVER_URL");
    if (!url) url = from_file<std::string>(file, "server_url");
    if (!url) throw ConfigError("no server url (--server-url or ICX_SERVER_URL)");
    sc.base_url = *url;
    sc.api_key = f.api_key ? f.api_key : env("ICX_API_KEY");
    sc.max_in_flight = pick(f.max_in_flight, file, "max_in_flight").value_or(sc.max_in_flight);
    if (auto t = pick(f.timeout_s, file, "timeout_s")) {
      sc.timeout = std::chrono::milliseconds(static_cast<long long>(*t * 1000));
    }
    sc.max_retries = pick(f.max_retries, file, "max_retries").value_or(sc.max_retries);
    if (auto d = pick(f.cache_dir, file, "cache_dir")) sc.cache_dir = *d;
    sc.cache_enabled = !f.no_cache;
    r.echo["server_url"] = sc.base_url;
    r.client = std::make_shared<ModelClient>(sc, [&err](std::string_view m) {
      err << "warning: " << m << '\n';
    });
    x.backend = connect_backend(r.client, *model);
  }
  x.echo_extra = r.echo;
  x.progress = [&err](std::string_view line) { err << line << '\n'; };
  x.validate();
  return r;
}

void ensure_writable(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw ConfigError(path.string() + " exists (use --force to overwrite)");
  }
}

void print_table(const EvalReport& report, std::ostream& out) {
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %-10s %-10s %-10s %-10s %s\n", "k", "mean_acc", "std_acc",
                "mean_f1", "std_f1", "runs");
  out << line;
  for (const auto& [k, cell] : report.cells) {
    std::snprintf(line, sizeof line, "%-6zu %-10s %-10s %-10s %-10s %zu%s\n", k,
                  format_fixed6(cell.accuracy.mean).c_str(), format_fixed6(cell.accuracy.std).c_str(),
                  format_fixed6(cell.macro_f1.mean).c_str(), format_fixed6(cell.macro_f1.std).c_str(),
                  cell.runs.size(), cell.failures.empty() ? "" : "  FAILED");
    out << line;
  }
}

EvalReport read_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open report " + path);
  try {
    return report_from_json(nlohmann::ordered_json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("report " + path + " is not valid JSON: " + e.what());
  }
}

// --- subcommands -----------------------------------------------------------

struct ConvertFlags {
  std::optional<std::string> tsv;
  std::optional<std::string> jsonl;
  std::optional<std::string> language;
  std::string split = "train";
  std::string out;
  bool force = false;
};

int cmd_convert(const ConvertFlags& f, std::ostream& err) {
  if (f.tsv.has_value() == f.jsonl.has_value()) {
    throw ConfigError("give exactly one input: --tsv or --jsonl");
  }
  ensure_writable(f.out, f.force);
  Corpus corpus = [&] {
    if (f.tsv) {
      if (!f.language) throw ConfigError("--tsv needs --language");
      return import_tsv(*f.tsv, *f.language, parse_split(f.split));
    }
    return import_jsonl(*f.jsonl);
  }();
  export_jsonl(corpus, f.out);
  err << "wrote " << corpus.examples().size() << " examples (" << corpus.registry().size()
      << " labels) to " << f.out << '\n';
  return kSuccess;
}

int cmd_plan(const ExperimentFlags& f, std::ostream& out, std::ostream& err) {
  auto r = resolve(f, err);
  out << plan(r.experiment).summary();
  return kSuccess;
}

struct RunFlags {
  std::optional<std::string> out;
  bool force = false;
};

int cmd_run(const ExperimentFlags& f, const RunFlags& rf, std::ostream& out, std::ostream& err) {
  auto r = resolve(f, err);
  std::optional<fs::path> json_path, csv_path;
  if (rf.out) {
    json_path = fs::path(*rf.out);
    csv_path = fs::path(*rf.out).replace_extension(".csv");
    ensure_writable(*json_path, rf.force);
    ensure_writable(*csv_path, rf.force);
  }
  const auto report = run_experiment(r.experiment);
  if (json_path) {
    emit_report(report, ReportFormat::json, *json_path);
    emit_report(report, ReportFormat::csv, *csv_path);
    err << "wrote " << json_path->string() << " and " << csv_path->string() << '\n';
  }
  print_table(report, out);
  return report.failed() ? kRuntimeFailure : kSuccess;
}

struct ReportFlags {
  std::vector<std::string> inputs;
  std::optional<std::string> csv;
  std::optional<std::string> plot_data;
  std::optional<std::string> json;
  std::string metric = "accuracy";
  bool force = false;
};

int cmd_report(const ReportFlags& f, std::ostream& out, std::ostream& err) {
  std::vector<EvalReport> reports;
  for (const auto& p : f.inputs) reports.push_back(read_report(p));
  const auto report = merge_reports(reports);
  bool wrote = false;
  auto write = [&](const std::optional<std::string>& path, auto&& fn) {
    if (!path) return;
    ensure_writable(*path, f.force);
    std::ofstream o(*path, std::ios::binary | std::ios::trunc);
    if (!o) throw Error("cannot write " + *path);
    fn(o);
    err << "wrote " << *path << '\n';
    wrote = true;
  };
  write(f.json, [&](std::ostream& o) { write_report(report, ReportFormat::json, o); });
  write(f.csv, [&](std::ostream& o) { write_report(report, ReportFormat::csv, o); });
  write(f.plot_data, [&](std::ostream& o) {
    write_plot_data(report, f.metric == "f1" ? PlotMetric::macro_f1 : PlotMetric::accuracy, o);
  });
  if (!wrote) print_table(report, out);
  return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"In-context intent classification harness", "icx"};
  app.require_subcommand(1);

  ConvertFlags convert;
  auto* convert_cmd = app.add_subcommand("convert", "Import a dataset into canonical JSONL");
  convert_cmd->add_option("--tsv", convert.tsv, "utterance<TAB>label input");
  convert_cmd->add_option("--jsonl", convert.jsonl, "canonical JSONL input (validated and rewritten)");
  convert_cmd->add_option("--language", convert.language, "Language tag for TSV input");
  convert_cmd->add_option("--split", convert.split, "Split for TSV input")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  convert_cmd->add_option("-o,--out", convert.out, "Output JSONL")->required();
  convert_cmd->add_flag("--force", convert.force, "Overwrite the output");

  ExperimentFlags plan_flags;
  auto* plan_cmd = app.add_subcommand("plan", "Measure token budgets and print the k schedule");
  add_experiment_flags(*plan_cmd, plan_flags);

  ExperimentFlags run_flags;
  RunFlags run_out;
  auto* run_cmd = app.add_subcommand("run", "Run a k-sweep or zero-shot baseline");
  add_experiment_flags(*run_cmd, run_flags);
  run_cmd->add_option("--out", run_out.out, "Report JSON path (a .csv is written next to it)");
  run_cmd->add_flag("--force", run_out.force, "Overwrite existing reports");

  ReportFlags report;
  auto* report_cmd = app.add_subcommand("report", "Derive CSV / plot data from report JSON files");
  report_cmd->add_option("inputs", report.inputs, "Report JSON files (merged)")->required();
  report_cmd->add_option("--csv", report.csv, "Per-run CSV output");
  report_cmd->add_option("--plot-data", report.plot_data, "k,mean,std CSV for error-band plots");
  report_cmd->add_option("--json", report.json, "Merged report JSON output");
  report_cmd->add_option("--metric", report.metric, "Plot metric")
      ->check(CLI::IsMember({"accuracy", "f1"}));
  report_cmd->add_flag("--force", report.force, "Overwrite outputs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    for (auto* sub : app.get_subcommands()) {
      err << sub->help();
      break;
    }
    return kUsageError;
  }

  try {
    if (convert_cmd->parsed()) return cmd_convert(convert, err);
    if (plan_cmd->parsed()) return cmd_plan(plan_flags, out, err);
    if (run_cmd->parsed()) return cmd_run(run_flags, run_out, out, err);
    if (report_cmd->parsed()) return cmd_report(report, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const CorpusError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const NetworkError& e) {
    err << "error: backend unreachable: " << e.what() << '\n';
    return kBackendUnreachable;
  } catch (const ProtocolError& e) {
    err << "error: protocol: " << e.what() << '\n';
    return kBackendUnreachable;
  } catch (const ServerError& e) {
    err << "error: server: " << e.what() << '\n';
    return kBackendUnreachable;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}

}  // namespace icx::cli

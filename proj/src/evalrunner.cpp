#include "icx/evalrunner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace icx {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void report_progress(const ExperimentConfig& config, const std::string& line) {
  if (config.progress) config.progress(line);
}

std::vector<LabeledExample> evaluation_queries(const ExperimentConfig& config) {
  auto queries = split_view(config.task->target(), Split::test);
  if (queries.empty()) {
    throw CorpusError("corpus '" + config.task->target().name() + "' has no test split");
  }
  if (config.query_limit && *config.query_limit < queries.size()) {
    queries.resize(*config.query_limit);
  }
  return queries;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// stops the remaining work and is rethrown as a CellError.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, const std::string& cell_name, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> completed{0};
  std::atomic<bool> stop{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto worker = [&] {
    for (;;) {
      if (stop.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
        completed.fetch_add(1);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        stop.store(true);
        return;
      }
    }
  };

  const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (first_error) {
    std::string what;
    try {
      std::rethrow_exception(first_error);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
      what = "unknown error";
    }
    throw CellError(cell_name + ": " + what + " (completed " + std::to_string(completed.load()) +
                        "/" + std::to_string(n) + " queries)",
                    completed.load(), n);
  }
}

std::size_t pick_longest_label(Backend& backend, const LabelRegistry& registry) {
  std::size_t best = 0, best_tokens = 0;
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto tokens = backend.count_tokens(registry.at(i));
    if (i == 0 || tokens > best_tokens ||
        (tokens == best_tokens && registry.at(i).size() > registry.at(best).size())) {
      best = i;
      best_tokens = tokens;
    }
  }
  return best;
}

std::string k_list(const std::vector<std::size_t>& ks) {
  std::string out = "[";
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(ks[i]);
  }
  return out + "]";
}

void write_prompt_dump(const std::filesystem::path& dir, std::size_t k, std::uint64_t seed,
                       std::size_t query_index, std::size_t label_index, const PromptPlan& plan) {
  char name[96];
  std::snprintf(name, sizeof name, "k%zu-seed%llu-q%06zu-l%03zu.json", k,
                static_cast<unsigned long long>(seed), query_index, label_index);
  std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write prompt dump " + (dir / name).string());
  out << to_json(plan).dump(2) << '\n';
}

ordered_json metrics_to_json(const RunMetrics& m) {
  ordered_json j;
  j["seed"] = m.seed;
  j["k"] = m.k;
  j["accuracy"] = m.accuracy;
  j["macro_f1"] = m.macro_f1;
  j["n_queries"] = m.n_queries;
  j["truncated_queries"] = m.truncated_queries;
  return j;
}

template <class T>
T field(const ordered_json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) {
    throw ConfigError(std::string("report: missing field '") + name + "'");
  }
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("report: field '") + name + "' has the wrong type");
  }
}

void append_predictions(const std::filesystem::path& path, std::size_t k, std::uint64_t seed,
                        const std::vector<PredictionRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot write predictions to " + path.string());
  for (const auto& r : records) {
    ordered_json j;
    j["k"] = k;
    j["seed"] = seed;
    const auto body = to_json(r);
    for (const auto& [key, value] : body.items()) j[key] = value;
    out << j.dump() << '\n';
  }
}

}  // namespace

std::string_view to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::fewshot_boolean: return "fewshot_boolean";
    case EvalMode::zeroshot_qa: return "zeroshot_qa";
    case EvalMode::zeroshot_entail: return "zeroshot_entail";
  }
  return "?";
}

EvalMode parse_eval_mode(std::string_view text) {
  if (text == "fewshot_boolean") return EvalMode::fewshot_boolean;
  if (text == "zeroshot_qa") return EvalMode::zeroshot_qa;
  if (text == "zeroshot_entail") return EvalMode::zeroshot_entail;
  throw ConfigError("unknown mode '" + std::string(text) + "'");
}

void ExperimentConfig::validate() const {
  if (!task) throw ConfigError("experiment has no task");
  if (!backend) throw ConfigError("experiment has no backend");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  const auto family = backend->descriptor().family;
  if (mode == EvalMode::zeroshot_entail) {
    if (family != ModelFamily::nli) {
      throw ConfigError("zeroshot_entail needs an nli backend, '" + backend->descriptor().name +
                        "' is " + std::string(to_string(family)));
    }
    render_hypothesis(hypothesis_template, "");
  } else if (family == ModelFamily::nli) {
    throw ConfigError("mode " + std::string(to_string(mode)) + " needs a causal or seq2seq backend");
  }
  if (query_limit && *query_limit == 0) throw ConfigError("query_limit must be positive");
}

// ---------------------------------------------------------------------------
// Planning

std::string ResolvedPlan::summary() const {
  std::ostringstream out;
  if (budget) {
    out << "max_tokens: " << budget->max_tokens() << '\n'
        << "reserve: " << budget->reserve() << '\n'
        << "longest shot line: " << longest_shot_line_tokens << " tokens (pair "
        << longest_shot_pair_tokens << ")\n"
        << "longest query line: " << longest_query_tokens << " tokens\n";
  }
  if (no_shots_fit) out << "note: no k > 0 fits the context; falling back to k=[0]\n";
  out << (k_from_schedule ? "k schedule: " : "k values: ") << k_list(k_values) << '\n';
  return out.str();
}

ordered_json ResolvedPlan::to_json() const {
  ordered_json j;
  if (budget) {
    j["max_tokens"] = budget->max_tokens();
    j["reserve"] = budget->reserve();
    j["longest_shot_line_tokens"] = longest_shot_line_tokens;
    j["longest_shot_pair_tokens"] = longest_shot_pair_tokens;
    j["longest_query_tokens"] = longest_query_tokens;
  }
  j["k_values"] = k_values;
  j["k_from_schedule"] = k_from_schedule;
  return j;
}

ResolvedPlan plan(const ExperimentConfig& config) {
  config.validate();
  ResolvedPlan out;
  if (config.mode != EvalMode::fewshot_boolean) {
    out.k_values = {0};
    return out;
  }
  auto& backend = *config.backend;
  const auto& desc = backend.descriptor();
  const auto& registry = config.task->target().registry();
  const auto& label = registry.at(pick_longest_label(backend, registry));

  const auto train = split_view(config.task->source(), Split::train);
  if (train.empty()) {
    throw CorpusError("corpus '" + config.task->source().name() + "' has no train split");
  }
  for (const auto& ex : train) {
    LabeledExample as_negative = ex;
    as_negative.label.clear();
    out.longest_shot_line_tokens = std::max(
        out.longest_shot_line_tokens, backend.count_tokens(render_shot_line(as_negative, label)));
  }
  out.longest_shot_pair_tokens = 2 * out.longest_shot_line_tokens;
  for (const auto& q : evaluation_queries(config)) {
    out.longest_query_tokens = std::max(
        out.longest_query_tokens, backend.count_tokens(render_query_line(q.text, label, desc.family)));
  }
  const std::size_t reserve = out.longest_query_tokens + kReserveSlack;
  if (reserve >= desc.max_tokens) {
    throw PromptError("query lines need " + std::to_string(reserve) + " tokens but '" + desc.name +
                      "' accepts " + std::to_string(desc.max_tokens));
  }
  out.budget.emplace(desc.max_tokens, reserve);
  const auto schedule =
      select_k_schedule(*out.budget, out.longest_shot_pair_tokens, out.longest_query_tokens);
  if (config.k_values.empty()) {
    out.k_values = schedule;
    out.k_from_schedule = true;
    out.no_shots_fit = schedule.size() == 1;
  } else {
    out.k_values = config.k_values;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cells

RunMetrics compute_metrics(const std::vector<PredictionRecord>& records,
                           const LabelRegistry& registry) {
  RunMetrics m;
  m.n_queries = records.size();
  if (records.empty()) return m;
  std::vector<std::size_t> tp(registry.size()), fp(registry.size()), fn(registry.size());
  std::size_t correct = 0;
  for (const auto& r : records) {
    const auto gold = registry.index_of(r.gold_label);
    const auto pred = registry.index_of(r.predicted_label);
    if (gold == pred) {
      ++correct;
      ++tp[gold];
    } else {
      ++fp[pred];
      ++fn[gold];
    }
    if (r.dropped_pairs_max > 0) ++m.truncated_queries;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(records.size());
  double f1_sum = 0.0;
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const double denom = 2.0 * tp[i] + fp[i] + fn[i];
    if (tp[i] > 0) f1_sum += 2.0 * tp[i] / denom;
  }
  m.macro_f1 = f1_sum / static_cast<double>(registry.size());
  return m;
}

CellResult run_cell(const ExperimentConfig& config, const ResolvedPlan& resolved, std::size_t k,
                    std::uint64_t seed) {
  config.validate();
  auto& backend = *config.backend;
  const auto family = backend.descriptor().family;
  const auto& registry = config.task->target().registry();
  const auto queries = evaluation_queries(config);
  const std::string cell_name = "cell k=" + std::to_string(k) + " seed=" + std::to_string(seed);

  std::vector<ShotSelection> selections;
  if (config.mode == EvalMode::fewshot_boolean) {
    if (!resolved.budget) throw ConfigError("few-shot cells need a token budget from plan()");
    for (std::size_t li = 0; li < registry.size(); ++li) {
      const auto pools = label_pools(config.task->source(), Split::train, registry.at(li));
      selections.push_back(sample_shots(pools, k, config.order, derive_shot_seed(seed, li)));
    }
  }
  if (config.dump_prompts) std::filesystem::create_directories(*config.dump_prompts);

  std::vector<PredictionRecord> records(queries.size());
  parallel_for(queries.size(), config.workers, cell_name, [&](std::size_t qi) {
    const auto& query = queries[qi];
    if (config.mode == EvalMode::zeroshot_entail) {
      records[qi] = entailment_predict(backend, query, registry, config.hypothesis_template);
      return;
    }
    std::vector<PromptPlan> plans;
    plans.reserve(registry.size());
    for (std::size_t li = 0; li < registry.size(); ++li) {
      if (config.mode == EvalMode::fewshot_boolean) {
        plans.push_back(build_boolean_prompt(
            selections[li], query, registry.at(li), family, *resolved.budget,
            [&backend](std::string_view text) { return backend.count_tokens(text); }));
      } else {
        plans.push_back(build_qa_prompt(query, registry.at(li), family));
      }
      if (config.dump_prompts) write_prompt_dump(*config.dump_prompts, k, seed, qi, li, plans.back());
    }
    auto record = max_confidence_predict(backend, plans, registry);
    record.gold_label = query.label;
    records[qi] = std::move(record);
  });

  CellResult result;
  result.metrics = compute_metrics(records, registry);
  result.metrics.seed = seed;
  result.metrics.k = k;
  result.records = std::move(records);
  return result;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

void CellSummary::aggregate() {
  std::vector<double> acc, f1;
  for (const auto& r : runs) {
    acc.push_back(r.accuracy);
    f1.push_back(r.macro_f1);
  }
  accuracy = mean_std(acc);
  macro_f1 = mean_std(f1);
}

bool EvalReport::failed() const {
  return std::any_of(cells.begin(), cells.end(),
                     [](const auto& kv) { return !kv.second.failures.empty(); });
}

// ---------------------------------------------------------------------------
// Sweeps

ordered_json echo_config(const ExperimentConfig& config, const ResolvedPlan& resolved) {
  const auto& desc = config.backend->descriptor();
  ordered_json j;
  j["task"] = to_string(config.task->mode());
  j["source_corpus"] = config.task->source().name();
  j["target_corpus"] = config.task->target().name();
  j["backend"] = {{"name", desc.name},
                  {"family", to_string(desc.family)},
                  {"max_tokens", desc.max_tokens}};
  j["mode"] = to_string(config.mode);
  j["k_values"] = resolved.k_values;
  j["order_strategy"] = to_string(config.order);
  j["seeds"] = config.seeds;
  j["query_limit"] = config.query_limit ? ordered_json(*config.query_limit) : ordered_json(nullptr);
  j["hypothesis_template"] = config.hypothesis_template;
  for (const auto& [key, value] : config.echo_extra.items()) j[key] = value;
  return j;
}

namespace {

EvalReport run_cells(const ExperimentConfig& config, const ResolvedPlan& resolved,
                     const std::vector<std::size_t>& ks, const std::vector<std::uint64_t>& seeds) {
  EvalReport report;
  report.config_echo = echo_config(config, resolved);
  report.plan = resolved.to_json();
  report.provenance.backend = config.backend->descriptor().name;
  report.provenance.timestamp = utc_timestamp();
  if (config.dump_predictions) {
    std::ofstream truncate(*config.dump_predictions, std::ios::binary | std::ios::trunc);
    if (!truncate) throw Error("cannot write predictions to " + config.dump_predictions->string());
  }

  for (std::size_t k : ks) {
    auto& cell = report.cells[k];
    for (std::uint64_t seed : seeds) {
      report_progress(config, "running k=" + std::to_string(k) + " seed=" + std::to_string(seed));
      try {
        auto result = run_cell(config, resolved, k, seed);
        if (config.dump_predictions) append_predictions(*config.dump_predictions, k, seed, result.records);
        report_progress(config, "  accuracy=" + format_fixed6(result.metrics.accuracy) +
                                    " macro_f1=" + format_fixed6(result.metrics.macro_f1));
        cell.runs.push_back(result.metrics);
      } catch (const Error& e) {
        report_progress(config, std::string("  failed: ") + e.what());
        cell.failures.push_back({seed, e.what()});
      }
    }
    cell.aggregate();
  }
  return report;
}

}  // namespace

EvalReport run_sweep(const ExperimentConfig& config) {
  if (config.mode != EvalMode::fewshot_boolean) {
    throw ConfigError("run_sweep needs mode fewshot_boolean");
  }
  const auto resolved = plan(config);
  return run_cells(config, resolved, resolved.k_values, config.seeds);
}

EvalReport run_zeroshot(const ExperimentConfig& config) {
  if (config.mode == EvalMode::fewshot_boolean) {
    throw ConfigError("run_zeroshot needs a zeroshot mode");
  }
  const auto resolved = plan(config);
  // Zero-shot scoring is deterministic; one run stands for every seed.
  return run_cells(config, resolved, {0}, {config.seeds.front()});
}

EvalReport run_experiment(const ExperimentConfig& config) {
  return config.mode == EvalMode::fewshot_boolean ? run_sweep(config) : run_zeroshot(config);
}

// ---------------------------------------------------------------------------
// Serialization

ordered_json to_json(const EvalReport& report) {
  ordered_json j;
  j["config_echo"] = report.config_echo;
  j["plan"] = report.plan;
  auto& cells = j["cells"] = ordered_json::object();
  for (const auto& [k, cell] : report.cells) {
    ordered_json c;
    c["k"] = k;
    c["runs"] = ordered_json::array();
    for (const auto& r : cell.runs) c["runs"].push_back(metrics_to_json(r));
    c["mean_accuracy"] = cell.accuracy.mean;
    c["std_accuracy"] = cell.accuracy.std;
    c["mean_f1"] = cell.macro_f1.mean;
    c["std_f1"] = cell.macro_f1.std;
    c["failures"] = ordered_json::array();
    for (const auto& f : cell.failures) c["failures"].push_back({{"seed", f.seed}, {"message", f.message}});
    cells[std::to_string(k)] = std::move(c);
  }
  j["provenance"] = {{"timestamp", report.provenance.timestamp},
                     {"backend", report.provenance.backend},
                     {"artifact_version", report.provenance.artifact_version},
                     {"prompt_format_version", report.provenance.prompt_format_version},
                     {"f1_variant", report.provenance.f1_variant}};
  return j;
}

EvalReport report_from_json(const nlohmann::ordered_json& j) {
  EvalReport report;
  if (!j.is_object()) throw ConfigError("report: expected a JSON object");
  report.config_echo = field<ordered_json>(j, "config_echo");
  report.plan = j.contains("plan") ? j["plan"] : ordered_json::object();
  const auto cells = field<ordered_json>(j, "cells");
  if (!cells.is_object()) throw ConfigError("report: cells must be an object");
  for (const auto& [key, c] : cells.items()) {
    const auto k = field<std::size_t>(c, "k");
    if (key != std::to_string(k)) throw ConfigError("report: cell key '" + key + "' != k");
    CellSummary cell;
    for (const auto& r : field<ordered_json>(c, "runs")) {
      RunMetrics m;
      m.seed = field<std::uint64_t>(r, "seed");
      m.k = field<std::size_t>(r, "k");
      m.accuracy = field<double>(r, "accuracy");
      m.macro_f1 = field<double>(r, "macro_f1");
      m.n_queries = field<std::size_t>(r, "n_queries");
      m.truncated_queries = field<std::size_t>(r, "truncated_queries");
      cell.runs.push_back(m);
    }
    cell.accuracy = {field<double>(c, "mean_accuracy"), field<double>(c, "std_accuracy")};
    cell.macro_f1 = {field<double>(c, "mean_f1"), field<double>(c, "std_f1")};
    if (c.contains("failures")) {
      for (const auto& f : c["failures"]) {
        cell.failures.push_back({field<std::uint64_t>(f, "seed"), field<std::string>(f, "message")});
      }
    }
    report.cells.emplace(k, std::move(cell));
  }
  const auto p = field<ordered_json>(j, "provenance");
  report.provenance.timestamp = field<std::string>(p, "timestamp");
  report.provenance.backend = field<std::string>(p, "backend");
  report.provenance.artifact_version = field<std::string>(p, "artifact_version");
  report.provenance.prompt_format_version = field<std::string>(p, "prompt_format_version");
  report.provenance.f1_variant = field<std::string>(p, "f1_variant");
  return report;
}

std::string format_fixed6(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  return buf;
}

void write_report(const EvalReport& report, ReportFormat format, std::ostream& out) {
  if (format == ReportFormat::json) {
    out << to_json(report).dump(2) << '\n';
    return;
  }
  out << "k,seed,accuracy,macro_f1,n_queries,truncated_queries\n";
  for (const auto& [k, cell] : report.cells) {
    for (const auto& r : cell.runs) {
      out << k << ',' << r.seed << ',' << format_fixed6(r.accuracy) << ','
          << format_fixed6(r.macro_f1) << ',' << r.n_queries << ',' << r.truncated_queries << '\n';
    }
    out << k << ",mean," << format_fixed6(cell.accuracy.mean) << ','
        << format_fixed6(cell.macro_f1.mean) << ",,\n";
    out << k << ",std," << format_fixed6(cell.accuracy.std) << ','
        << format_fixed6(cell.macro_f1.std) << ",,\n";
  }
}

void emit_report(const EvalReport& report, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write report to " + path.string());
  write_report(report, format, out);
  out.flush();
  if (!out) throw Error("write failed: " + path.string());
}

void write_plot_data(const EvalReport& report, PlotMetric metric, std::ostream& out) {
  const bool acc = metric == PlotMetric::accuracy;
  out << (acc ? "k,mean_accuracy,std_accuracy\n" : "k,mean_f1,std_f1\n");
  for (const auto& [k, cell] : report.cells) {
    const auto& s = acc ? cell.accuracy : cell.macro_f1;
    out << k << ',' << format_fixed6(s.mean) << ',' << format_fixed6(s.std) << '\n';
  }
}

EvalReport merge_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ConfigError("nothing to merge");
  auto without_k = [](ordered_json j) {
    j.erase("k_values");
    return j;
  };
  EvalReport merged = reports.front();
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const auto& other = reports[i];
    if (without_k(other.config_echo) != without_k(merged.config_echo)) {
      throw ConfigError("cannot merge reports of different experiments");
    }
    for (const auto& [k, cell] : other.cells) {
      if (merged.cells.contains(k)) {
        throw ConfigError("cannot merge: both reports contain cell k=" + std::to_string(k));
      }
      merged.cells.emplace(k, cell);
    }
  }
  std::vector<std::size_t> ks;
  for (const auto& [k, cell] : merged.cells) ks.push_back(k);
  merged.config_echo["k_values"] = ks;
  merged.plan["k_values"] = ks;
  return merged;
}

}  // namespace icx

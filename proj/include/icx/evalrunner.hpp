#pragma once

// Experimental protocol: K planning, k-sweeps over seeded runs, zero-shot
// baselines, metric aggregation and report emission.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "icx/corpus.hpp"
#include "icx/error.hpp"
#include "icx/prompting.hpp"
#include "icx/scoring.hpp"

namespace icx {

inline constexpr std::string_view kArtifactVersion = "0.1.0";
inline constexpr std::string_view kF1Variant = "macro";
/// Tokens held back beyond the longest query line.
inline constexpr std::size_t kReserveSlack = 8;

enum class EvalMode { fewshot_boolean, zeroshot_qa, zeroshot_entail };

std::string_view to_string(EvalMode mode);
EvalMode parse_eval_mode(std::string_view text);

struct ExperimentConfig {
  std::shared_ptr<const TaskSpec> task;
  std::shared_ptr<Backend> backend;
  EvalMode mode = EvalMode::fewshot_boolean;
  /// Empty means "use the K schedule".
  std::vector<std::size_t> k_values;
  OrderStrategy order = OrderStrategy::interleaved;
  std::vector<std::uint64_t> seeds{13, 42, 77};
  std::optional<std::size_t> query_limit;
  std::string hypothesis_template = std::string(kDefaultHypothesisTemplate);
  /// Queries scored concurrently within a cell.
  std::size_t workers = 1;
  std::optional<std::filesystem::path> dump_prompts;
  std::optional<std::filesystem::path> dump_predictions;
  /// Merged into the report's config echo (e.g. file paths, server url).
  nlohmann::ordered_json echo_extra = nlohmann::ordered_json::object();
  /// Progress lines; nothing is printed when unset.
  std::function<void(std::string_view)> progress;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
};

struct ResolvedPlan {
  std::optional<TokenBudget> budget;
  std::size_t longest_shot_line_tokens = 0;
  std::size_t longest_shot_pair_tokens = 0;
  std::size_t longest_query_tokens = 0;
  std::vector<std::size_t> k_values;
  bool k_from_schedule = false;
  /// Set when not even five shots fit and the schedule fell back to [0].
  bool no_shots_fit = false;

  std::string summary() const;
  nlohmann::ordered_json to_json() const;
};

/// Measures budgets through the backend's token counter and resolves k.
ResolvedPlan plan(const ExperimentConfig& config);

struct RunMetrics {
  std::uint64_t seed = 0;
  std::size_t k = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::size_t n_queries = 0;
  std::size_t truncated_queries = 0;

  bool operator==(const RunMetrics&) const = default;
};

/// Accuracy and macro-F1 over the registry labels (F1 = 0 when P + R = 0).
RunMetrics compute_metrics(const std::vector<PredictionRecord>& records,
                           const LabelRegistry& registry);

struct CellResult {
  RunMetrics metrics;
  std::vector<PredictionRecord> records;
};

/// A cell aborted part-way; `completed` queries had been scored.
class CellError : public Error {
 public:
  CellError(const std::string& what, std::size_t completed, std::size_t total)
      : Error(what), completed_(completed), total_(total) {}
  std::size_t completed() const noexcept { return completed_; }
  std::size_t total() const noexcept { return total_; }

 private:
  std::size_t completed_;
  std::size_t total_;
};

/// One seeded run at one k. Zero-shot modes ignore k.
CellResult run_cell(const ExperimentConfig& config, const ResolvedPlan& plan, std::size_t k,
                    std::uint64_t seed);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  bool operator==(const MeanStd&) const = default;
};

/// Sample mean and Bessel-corrected standard deviation; std = 0 for n <= 1.
MeanStd mean_std(const std::vector<double>& values);

struct CellFailure {
  std::uint64_t seed = 0;
  std::string message;
  bool operator==(const CellFailure&) const = default;
};

struct CellSummary {
  std::vector<RunMetrics> runs;
  MeanStd accuracy;
  MeanStd macro_f1;
  std::vector<CellFailure> failures;

  /// Recomputes accuracy / macro_f1 from runs.
  void aggregate();
  bool operator==(const CellSummary&) const = default;
};

struct Provenance {
  std::string timestamp;
  std::string backend;
  std::string artifact_version = std::string(kArtifactVersion);
  std::string prompt_format_version = std::string(kPromptFormatVersion);
  std::string f1_variant = std::string(kF1Variant);
  bool operator==(const Provenance&) const = default;
};

struct EvalReport {
  nlohmann::ordered_json config_echo = nlohmann::ordered_json::object();
  nlohmann::ordered_json plan = nlohmann::ordered_json::object();
  std::map<std::size_t, CellSummary> cells;
  Provenance provenance;

  bool failed() const;
  bool operator==(const EvalReport&) const = default;
};

nlohmann::ordered_json to_json(const EvalReport& report);
/// Throws ConfigError on a malformed report.
EvalReport report_from_json(const nlohmann::ordered_json& j);

/// The config as it is echoed into reports.
nlohmann::ordered_json echo_config(const ExperimentConfig& config, const ResolvedPlan& plan);

/// Every (k, seed) cell of a few-shot sweep; failed cells are recorded, not thrown.
EvalReport run_sweep(const ExperimentConfig& config);
/// A single k = 0 cell for the Q&A or entailment baseline.
EvalReport run_zeroshot(const ExperimentConfig& config);
/// Dispatches on config.mode.
EvalReport run_experiment(const ExperimentConfig& config);

enum class ReportFormat { json, csv };

void write_report(const EvalReport& report, ReportFormat format, std::ostream& out);
void emit_report(const EvalReport& report, ReportFormat format, const std::filesystem::path& path);

enum class PlotMetric { accuracy, macro_f1 };
/// `k,mean_<metric>,std_<metric>` rows for error-band plots.
void write_plot_data(const EvalReport& report, PlotMetric metric, std::ostream& out);

/// Combines reports of the same experiment. Throws ConfigError on
/// overlapping k cells or differing configs.
EvalReport merge_reports(const std::vector<EvalReport>& reports);

/// "%.6f"
std::string format_fixed6(double value);

}  // namespace icx

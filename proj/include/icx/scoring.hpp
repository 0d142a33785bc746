#pragma once

// Backend contract, maximum-confidence prediction, entailment prediction and
// deterministic oracle backends.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "icx/corpus.hpp"
#include "icx/family.hpp"
#include "icx/prompting.hpp"

namespace icx {

struct BackendDescriptor {
  std::string name;
  ModelFamily family = ModelFamily::causal;
  std::size_t max_tokens = 0;
  /// Upper bound on requests the backend accepts at once; 0 means unbounded.
  std::size_t max_in_flight = 0;
};

/// A language-model or NLI backend. Implementations must be safe for
/// concurrent calls, or declare max_in_flight = 1.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const BackendDescriptor& descriptor() const = 0;

  /// Total log-probability of each continuation given the prompt, summed over
  /// the continuation's tokens. Only causal and seq2seq backends.
  virtual std::vector<double> score(std::string_view prompt,
                                    std::span<const std::string> continuations) = 0;

  /// Entailment log-probability of `hypothesis` given `premise`. nli only.
  virtual double entail(std::string_view premise, std::string_view hypothesis) = 0;

  virtual std::size_t count_tokens(std::string_view text) = 0;
};

/// Checks the family and output alignment around Backend::score.
std::vector<double> score_continuations(Backend& backend, std::string_view prompt,
                                        std::span<const std::string> continuations);

/// Normalized probability of "true": logistic(logprob_true - logprob_false).
/// Throws ScoringError on non-finite input.
double confidence(double logprob_true, double logprob_false);

struct BooleanScore {
  double logprob_true = 0.0;
  double logprob_false = 0.0;
  double confidence = 0.5;

  static BooleanScore from_logprobs(double logprob_true, double logprob_false);
  bool operator==(const BooleanScore&) const = default;
};

struct PredictionRecord {
  std::string query_id;
  std::string gold_label;
  /// Boolean modes: one entry per registry label.
  std::map<std::string, BooleanScore> per_label;
  /// Entailment mode: one entailment log-score per registry label.
  std::map<std::string, double> entail_logprob;
  std::string predicted_label;
  std::size_t dropped_pairs_max = 0;

  bool operator==(const PredictionRecord&) const = default;
};

nlohmann::ordered_json to_json(const PredictionRecord& record);

/// Index of the largest score; the smallest index wins ties.
std::size_t argmax_first(std::span<const double> scores);

/// Scores every plan, returns the label with the highest confidence. Plans
/// must cover each registry label exactly once and share a query id.
PredictionRecord max_confidence_predict(Backend& backend, std::span<const PromptPlan> plans,
                                        const LabelRegistry& registry);

inline constexpr std::string_view kDefaultHypothesisTemplate = "the intent is {label}";

/// Replaces every `{label}` in the template. Throws ScoringError when the
/// placeholder is absent.
std::string render_hypothesis(std::string_view hypothesis_template, std::string_view label);

/// Zero-shot cross-task prediction: premise = query text, one hypothesis per label.
PredictionRecord entailment_predict(Backend& backend, const LabeledExample& query,
                                    const LabelRegistry& registry,
                                    std::string_view hypothesis_template);

// ---------------------------------------------------------------------------
// Oracle backends

enum class OracleKind { uniform, memorizing, hash };

std::string_view to_string(OracleKind kind);
OracleKind parse_oracle_kind(std::string_view text);

struct OracleConfig {
  ModelFamily family = ModelFamily::causal;
  std::size_t max_tokens = 1024;
  /// memorizing: utterance text -> gold label.
  std::map<std::string, std::string, std::less<>> gold;
  /// hash: seed mixed into every digest.
  std::uint64_t seed = 0;
  /// memorizing nli: hypothesis wording that names the gold label.
  std::string hypothesis_template = std::string(kDefaultHypothesisTemplate);
};

/// Oracles count tokens as whitespace-separated words.
std::size_t count_words(std::string_view text);

/// uniform: log 0.5 for every continuation (nli: constant log 0.5).
/// memorizing: parses the final prompt line (`<text>=><label>=` or the Q&A
/// form) and emits (log 0.9, log 0.1) when the label is gold, else
/// (log 0.1, log 0.9); nli returns log 0.9 / log 0.1 by hypothesis match.
/// hash: log-probabilities in [-5, 0] from a seeded 64-bit digest.
std::unique_ptr<Backend> make_oracle(OracleKind kind, OracleConfig config);

/// Seeded FNV-1a 64 with a splitmix finalizer. Stable across platforms.
std::uint64_t stable_hash64(std::string_view bytes, std::uint64_t seed);

}  // namespace icx

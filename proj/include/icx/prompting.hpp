#pragma once

// Boolean few-shot prompts, the Q&A zero-shot prompt, seeded shot sampling,
// and token-budget fitting.
//
// A shot line is `<text>=><label>=<true|false>\n`; the query line is the same
// without the boolean and newline. Seq2seq prompts end in the literal `[MASK]`
// which the model server maps to its own sentinel.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "icx/corpus.hpp"
#include "icx/family.hpp"

namespace icx {

inline constexpr std::string_view kMaskPlaceholder = "[MASK]";
inline constexpr std::string_view kPromptFormatVersion = "boolean-v1";
inline constexpr std::string_view kTrueContinuation = "true";
inline constexpr std::string_view kFalseContinuation = "false";

enum class OrderStrategy { interleaved, positives_first };

std::string_view to_string(OrderStrategy order);
OrderStrategy parse_order_strategy(std::string_view text);

struct ShotSelection {
  std::size_t k = 0;
  std::vector<LabeledExample> positives;
  std::vector<LabeledExample> negatives;
  OrderStrategy order = OrderStrategy::interleaved;
  std::uint64_t seed = 0;
  std::size_t shortfall_pos = 0;
  std::size_t shortfall_neg = 0;
};

struct PromptPlan {
  std::string query_id;
  std::string candidate_label;
  std::string prompt_text;
  std::array<std::string, 2> continuations{std::string(kTrueContinuation),
                                           std::string(kFalseContinuation)};
  ModelFamily family = ModelFamily::causal;
  std::size_t dropped_pairs = 0;
  /// Ids of the shots that made it into prompt_text, in prompt order.
  std::vector<std::string> shot_ids;
};

nlohmann::ordered_json to_json(const PromptPlan& plan);

class TokenBudget {
 public:
  /// Throws PromptError unless 0 < reserve < max_tokens.
  TokenBudget(std::size_t max_tokens, std::size_t reserve);

  std::size_t max_tokens() const noexcept { return max_tokens_; }
  std::size_t reserve() const noexcept { return reserve_; }
  /// Tokens a whole prompt may occupy.
  std::size_t available() const noexcept { return max_tokens_ - reserve_; }

 private:
  std::size_t max_tokens_;
  std::size_t reserve_;
};

/// Must count exactly as the scoring backend will.
using TokenCounter = std::function<std::size_t(std::string_view)>;

std::string render_shot_line(const LabeledExample& example, std::string_view target_label);
std::string render_query_line(std::string_view text, std::string_view target_label,
                              ModelFamily family);

/// Draws min(k, |pool|) shots per polarity without replacement. The result
/// depends only on the pools, k and seed; `order` is carried along for
/// prompt assembly.
ShotSelection sample_shots(const LabelPools& pools, std::size_t k, OrderStrategy order,
                           std::uint64_t seed);

/// Mixes a run seed with a label index into the seed of one shot selection.
std::uint64_t derive_shot_seed(std::uint64_t run_seed, std::size_t label_index);

/// Shot lines in strategy order followed by the query line. Whole pos/neg
/// pairs are dropped from the front until the prompt fits the budget.
PromptPlan build_boolean_prompt(const ShotSelection& selection, const LabeledExample& query,
                                std::string_view target_label, ModelFamily family,
                                const TokenBudget& budget, const TokenCounter& count_tokens);

/// `Q: Is '<label>' the intent of '<text>'? A:`
PromptPlan build_qa_prompt(const LabeledExample& query, std::string_view target_label,
                           ModelFamily family);

/// [0, 5, 10, ..., K] where K <= 40 is the largest multiple of ten whose
/// prompt fits; [0, 5] or [0] when ten shots do not fit.
std::vector<std::size_t> select_k_schedule(const TokenBudget& budget,
                                           std::size_t longest_shot_pair_tokens,
                                           std::size_t longest_query_tokens);

}  // namespace icx

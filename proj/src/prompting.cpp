#include "icx/prompting.hpp"

#include <algorithm>
#include <deque>
#include <numeric>
#include <random>

#include "icx/error.hpp"

namespace icx {

namespace {

// Portable unbiased draw in [0, bound); std::uniform_int_distribution is
// implementation-defined and would make selections differ across stdlibs.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = rng();
    if (r >= threshold) return r % bound;
  }
}

std::vector<LabeledExample> draw_without_replacement(const std::vector<LabeledExample>& pool,
                                                     std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<LabeledExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + uniform_below(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
    out.push_back(pool[idx[i]]);
  }
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Body {
  std::string text;
  std::vector<std::string> ids;
};

Body assemble_body(const std::deque<const LabeledExample*>& pos,
                   const std::deque<const LabeledExample*>& neg, OrderStrategy order,
                   std::string_view target_label) {
  Body body;
  auto add = [&](const LabeledExample* ex) {
    body.text += render_shot_line(*ex, target_label);
    body.ids.push_back(ex->id);
  };
  if (order == OrderStrategy::positives_first) {
    for (auto* ex : pos) add(ex);
    for (auto* ex : neg) add(ex);
    return body;
  }
  const std::size_t paired = std::min(pos.size(), neg.size());
  for (std::size_t i = 0; i < paired; ++i) {
    add(pos[i]);
    add(neg[i]);
  }
  for (std::size_t i = paired; i < pos.size(); ++i) add(pos[i]);
  for (std::size_t i = paired; i < neg.size(); ++i) add(neg[i]);
  return body;
}

}  // namespace

std::string_view to_string(OrderStrategy order) {
  return order == OrderStrategy::interleaved ? "interleaved" : "positives_first";
}

OrderStrategy parse_order_strategy(std::string_view text) {
  if (text == "interleaved") return OrderStrategy::interleaved;
  if (text == "positives_first" || text == "ordered") return OrderStrategy::positives_first;
  throw ConfigError("unknown order strategy '" + std::string(text) + "'");
}

nlohmann::ordered_json to_json(const PromptPlan& plan) {
  nlohmann::ordered_json j;
  j["query_id"] = plan.query_id;
  j["candidate_label"] = plan.candidate_label;
  j["prompt_text"] = plan.prompt_text;
  j["continuations"] = plan.continuations;
  j["family"] = to_string(plan.family);
  j["dropped_pairs"] = plan.dropped_pairs;
  j["shot_ids"] = plan.shot_ids;
  return j;
}

TokenBudget::TokenBudget(std::size_t max_tokens, std::size_t reserve)
    : max_tokens_(max_tokens), reserve_(reserve) {
  if (reserve_ == 0 || reserve_ >= max_tokens_) {
    throw PromptError("token budget needs 0 < reserve < max_tokens (reserve=" +
                      std::to_string(reserve_) + ", max_tokens=" + std::to_string(max_tokens_) +
                      ")");
  }
}

std::string render_shot_line(const LabeledExample& example, std::string_view target_label) {
  const bool positive = example.label == target_label;
  std::string line;
  line.reserve(example.text.size() + target_label.size() + 10);
  line += example.text;
  line += "=>";
  line += target_label;
  line += '=';
  line += positive ? kTrueContinuation : kFalseContinuation;
  line += '\n';
  return line;
}

std::string render_query_line(std::string_view text, std::string_view target_label,
                              ModelFamily family) {
  std::string line;
  line += text;
  line += "=>";
  line += target_label;
  line += '=';
  if (family == ModelFamily::seq2seq) line += kMaskPlaceholder;
  return line;
}

std::uint64_t derive_shot_seed(std::uint64_t run_seed, std::size_t label_index) {
  return splitmix64(run_seed ^ splitmix64(static_cast<std::uint64_t>(label_index) + 1));
}

ShotSelection sample_shots(const LabelPools& pools, std::size_t k, OrderStrategy order,
                           std::uint64_t seed) {
  ShotSelection sel;
  sel.k = k;
  sel.order = order;
  sel.seed = seed;
  std::mt19937_64 rng(seed);
  const auto n_pos = std::min(k, pools.positives.size());
  const auto n_neg = std::min(k, pools.negatives.size());
  sel.positives = draw_without_replacement(pools.positives, n_pos, rng);
  sel.negatives = draw_without_replacement(pools.negatives, n_neg, rng);
  sel.shortfall_pos = k - n_pos;
  sel.shortfall_neg = k - n_neg;
  return sel;
}

PromptPlan build_boolean_prompt(const ShotSelection& selection, const LabeledExample& query,
                                std::string_view target_label, ModelFamily family,
                                const TokenBudget& budget, const TokenCounter& count_tokens) {
  if (family == ModelFamily::nli) throw PromptError("boolean prompts need a causal or seq2seq family");
  PromptPlan plan;
  plan.query_id = query.id;
  plan.candidate_label = std::string(target_label);
  plan.family = family;

  const std::string query_line = render_query_line(query.text, target_label, family);
  if (count_tokens(query_line) > budget.available()) {
    throw PromptError("query '" + query.id + "' alone exceeds the token budget of " +
                      std::to_string(budget.available()));
  }

  std::deque<const LabeledExample*> pos, neg;
  for (const auto& ex : selection.positives) pos.push_back(&ex);
  for (const auto& ex : selection.negatives) neg.push_back(&ex);

  for (;;) {
    Body body = assemble_body(pos, neg, selection.order, target_label);
    std::string prompt = std::move(body.text) + query_line;
    if ((pos.empty() && neg.empty()) || count_tokens(prompt) <= budget.available()) {
      plan.prompt_text = std::move(prompt);
      plan.shot_ids = std::move(body.ids);
      return plan;
    }
    if (!pos.empty()) pos.pop_front();
    if (!neg.empty()) neg.pop_front();
    ++plan.dropped_pairs;
  }
}

PromptPlan build_qa_prompt(const LabeledExample& query, std::string_view target_label,
                           ModelFamily family) {
  PromptPlan plan;
  plan.query_id = query.id;
  plan.candidate_label = std::string(target_label);
  plan.family = family;
  plan.prompt_text.append("Q: Is '")
      .append(target_label)
      .append("' the intent of '")
      .append(query.text)
      .append("'? A:");
  return plan;
}

std::vector<std::size_t> select_k_schedule(const TokenBudget& budget,
                                           std::size_t longest_shot_pair_tokens,
                                           std::size_t longest_query_tokens) {
  auto fits = [&](std::size_t k) {
    return k * longest_shot_pair_tokens + longest_query_tokens + budget.reserve() <=
           budget.max_tokens();
  };
  std::vector<std::size_t> schedule{0};
  if (!fits(5)) return schedule;
  schedule.push_back(5);
  for (std::size_t k = 10; k <= 40 && fits(k); k += 10) schedule.push_back(k);
  return schedule;
}

}  // namespace icx

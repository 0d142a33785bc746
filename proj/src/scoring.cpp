#include "icx/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "icx/error.hpp"

namespace icx {

namespace {

const double kLog09 = std::log(0.9);
const double kLog01 = std::log(0.1);
const double kLogHalf = std::log(0.5);

void require_scoring_family(const BackendDescriptor& d) {
  if (d.family == ModelFamily::nli) {
    throw ScoringError("backend '" + d.name + "' is an nli model and cannot score continuations");
  }
}

void require_nli_family(const BackendDescriptor& d) {
  if (d.family != ModelFamily::nli) {
    throw ScoringError("backend '" + d.name + "' is not an nli model");
  }
}

std::string_view last_line(std::string_view prompt) {
  auto pos = prompt.rfind('\n');
  return pos == std::string_view::npos ? prompt : prompt.substr(pos + 1);
}

struct QueryAndLabel {
  std::string_view text;
  std::string_view label;
};

// Recognizes both `<text>=><label>=[MASK]?` and the Q&A form.
QueryAndLabel parse_query_line(std::string_view line) {
  constexpr std::string_view qa_head = "Q: Is '";
  constexpr std::string_view qa_mid = "' the intent of '";
  constexpr std::string_view qa_tail = "'? A:";
  if (line.starts_with(qa_head) && line.ends_with(qa_tail)) {
    auto body = line.substr(qa_head.size(), line.size() - qa_head.size() - qa_tail.size());
    auto mid = body.find(qa_mid);
    if (mid != std::string_view::npos) {
      return {body.substr(mid + qa_mid.size()), body.substr(0, mid)};
    }
  }
  if (line.ends_with(kMaskPlaceholder)) line.remove_suffix(kMaskPlaceholder.size());
  if (!line.ends_with('=')) {
    throw ScoringError("memorizing oracle: cannot parse query line '" + std::string(line) + "'");
  }
  line.remove_suffix(1);
  auto arrow = line.rfind("=>");
  if (arrow == std::string_view::npos) {
    throw ScoringError("memorizing oracle: query line lacks '=>'");
  }
  return {line.substr(0, arrow), line.substr(arrow + 2)};
}

class OracleBackend : public Backend {
 public:
  OracleBackend(OracleKind kind, OracleConfig config) : kind_(kind), config_(std::move(config)) {
    descriptor_.name = "oracle:" + std::string(to_string(kind_));
    descriptor_.family = config_.family;
    descriptor_.max_tokens = config_.max_tokens;
  }

  const BackendDescriptor& descriptor() const override { return descriptor_; }

  std::vector<double> score(std::string_view prompt,
                            std::span<const std::string> continuations) override {
    require_scoring_family(descriptor_);
    std::vector<double> out;
    out.reserve(continuations.size());
    switch (kind_) {
      case OracleKind::uniform:
        out.assign(continuations.size(), kLogHalf);
        break;
      case OracleKind::memorizing: {
        const auto parsed = parse_query_line(last_line(prompt));
        auto it = config_.gold.find(parsed.text);
        const bool match = it != config_.gold.end() && it->second == parsed.label;
        for (const auto& c : continuations) {
          if (c == kTrueContinuation) {
            out.push_back(match ? kLog09 : kLog01);
          } else if (c == kFalseContinuation) {
            out.push_back(match ? kLog01 : kLog09);
          } else {
            throw ScoringError("memorizing oracle only scores true/false, got '" + c + "'");
          }
        }
        break;
      }
      case OracleKind::hash:
        for (const auto& c : continuations) out.push_back(hashed_logprob(prompt, c));
        break;
    }
    return out;
  }

  double entail(std::string_view premise, std::string_view hypothesis) override {
    require_nli_family(descriptor_);
    switch (kind_) {
      case OracleKind::uniform:
        return kLogHalf;
      case OracleKind::memorizing: {
        auto it = config_.gold.find(premise);
        if (it == config_.gold.end()) return kLog01;
        return hypothesis == render_hypothesis(config_.hypothesis_template, it->second) ? kLog09
                                                                                         : kLog01;
      }
      case OracleKind::hash:
        return hashed_logprob(premise, hypothesis);
    }
    return kLogHalf;
  }

  std::size_t count_tokens(std::string_view text) override { return count_words(text); }

 private:
  double hashed_logprob(std::string_view a, std::string_view b) const {
    std::string buf;
    buf.reserve(a.size() + b.size() + 1);
    buf.append(a).push_back('\0');
    buf.append(b);
    const std::uint64_t h = stable_hash64(buf, config_.seed);
    return -5.0 * static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  OracleKind kind_;
  OracleConfig config_;
  BackendDescriptor descriptor_;
};

}  // namespace

std::vector<double> score_continuations(Backend& backend, std::string_view prompt,
                                        std::span<const std::string> continuations) {
  require_scoring_family(backend.descriptor());
  auto out = backend.score(prompt, continuations);
  if (out.size() != continuations.size()) {
    throw ScoringError("backend '" + backend.descriptor().name + "' returned " +
                       std::to_string(out.size()) + " log-probabilities for " +
                       std::to_string(continuations.size()) + " continuations");
  }
  return out;
}

double confidence(double logprob_true, double logprob_false) {
  if (!std::isfinite(logprob_true) || !std::isfinite(logprob_false)) {
    throw ScoringError("confidence needs finite log-probabilities");
  }
  const double d = logprob_true - logprob_false;
  double p;
  if (d >= 0) {
    p = 1.0 / (1.0 + std::exp(-d));
  } else {
    const double e = std::exp(d);
    p = e / (1.0 + e);
  }
  // Open interval (0, 1) even when the logistic saturates.
  return std::clamp(p, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}

BooleanScore BooleanScore::from_logprobs(double logprob_true, double logprob_false) {
  return {logprob_true, logprob_false, icx::confidence(logprob_true, logprob_false)};
}

nlohmann::ordered_json to_json(const PredictionRecord& record) {
  nlohmann::ordered_json j;
  j["query_id"] = record.query_id;
  j["gold_label"] = record.gold_label;
  j["predicted_label"] = record.predicted_label;
  j["dropped_pairs_max"] = record.dropped_pairs_max;
  if (!record.per_label.empty()) {
    auto& per = j["per_label"] = nlohmann::ordered_json::object();
    for (const auto& [label, s] : record.per_label) {
      per[label] = {{"logprob_true", s.logprob_true},
                    {"logprob_false", s.logprob_false},
                    {"confidence", s.confidence}};
    }
  }
  if (!record.entail_logprob.empty()) {
    auto& ent = j["entail_logprob"] = nlohmann::ordered_json::object();
    for (const auto& [label, s] : record.entail_logprob) ent[label] = s;
  }
  return j;
}

std::size_t argmax_first(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

PredictionRecord max_confidence_predict(Backend& backend, std::span<const PromptPlan> plans,
                                        const LabelRegistry& registry) {
  if (plans.size() != registry.size()) {
    throw ScoringError("expected one prompt per label (" + std::to_string(registry.size()) +
                       "), got " + std::to_string(plans.size()));
  }
  std::vector<const PromptPlan*> by_label(registry.size(), nullptr);
  for (const auto& plan : plans) {
    if (plan.query_id != plans.front().query_id) {
      throw ScoringError("prompts for one prediction must share a query id");
    }
    auto idx = registry.find(plan.candidate_label);
    if (!idx) throw ScoringError("prompt for unknown label '" + plan.candidate_label + "'");
    if (by_label[*idx]) throw ScoringError("duplicate prompt for label '" + plan.candidate_label + "'");
    by_label[*idx] = &plan;
  }

  PredictionRecord record;
  record.query_id = plans.front().query_id;
  std::vector<double> conf(registry.size());
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto& plan = *by_label[i];
    auto lp = score_continuations(backend, plan.prompt_text, plan.continuations);
    auto score = BooleanScore::from_logprobs(lp[0], lp[1]);
    conf[i] = score.confidence;
    record.per_label.emplace(registry.at(i), score);
    record.dropped_pairs_max = std::max(record.dropped_pairs_max, plan.dropped_pairs);
  }
  record.predicted_label = registry.at(argmax_first(conf));
  return record;
}

std::string render_hypothesis(std::string_view hypothesis_template, std::string_view label) {
  constexpr std::string_view placeholder = "{label}";
  if (hypothesis_template.find(placeholder) == std::string_view::npos) {
    throw ScoringError("hypothesis template lacks the {label} placeholder");
  }
  std::string out;
  std::size_t pos = 0;
  for (;;) {
    auto hit = hypothesis_template.find(placeholder, pos);
    if (hit == std::string_view::npos) break;
    out.append(hypothesis_template.substr(pos, hit - pos)).append(label);
    pos = hit + placeholder.size();
  }
  out.append(hypothesis_template.substr(pos));
  return out;
}

PredictionRecord entailment_predict(Backend& backend, const LabeledExample& query,
                                    const LabelRegistry& registry,
                                    std::string_view hypothesis_template) {
  require_nli_family(backend.descriptor());
  PredictionRecord record;
  record.query_id = query.id;
  record.gold_label = query.label;
  std::vector<double> scores(registry.size());
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto hypothesis = render_hypothesis(hypothesis_template, registry.at(i));
    scores[i] = backend.entail(query.text, hypothesis);
    if (std::isnan(scores[i])) throw ScoringError("backend returned NaN entailment score");
    record.entail_logprob.emplace(registry.at(i), scores[i]);
  }
  record.predicted_label = registry.at(argmax_first(scores));
  return record;
}

std::string_view to_string(OracleKind kind) {
  switch (kind) {
    case OracleKind::uniform: return "uniform";
    case OracleKind::memorizing: return "memorizing";
    case OracleKind::hash: return "hash";
  }
  return "?";
}

OracleKind parse_oracle_kind(std::string_view text) {
  if (text == "uniform") return OracleKind::uniform;
  if (text == "memorizing") return OracleKind::memorizing;
  if (text == "hash") return OracleKind::hash;
  throw ConfigError("unknown oracle kind '" + std::string(text) + "'");
}

std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r';
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

std::unique_ptr<Backend> make_oracle(OracleKind kind, OracleConfig config) {
  if (config.max_tokens == 0) throw ConfigError("oracle max_tokens must be positive");
  if (kind == OracleKind::memorizing && config.family == ModelFamily::nli) {
    render_hypothesis(config.hypothesis_template, "");  // validates the placeholder
  }
  return std::make_unique<OracleBackend>(kind, std::move(config));
}

std::uint64_t stable_hash64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

}  // namespace icx

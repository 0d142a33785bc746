#pragma once

#include <string_view>

namespace icx {

/// Causal LMs score a continuation after the prompt; seq2seq LMs score it in
/// place of the mask sentinel; nli models only answer entailment requests.
enum class ModelFamily { causal, seq2seq, nli };

std::string_view to_string(ModelFamily family);
/// Throws ConfigError on unknown names.
ModelFamily parse_model_family(std::string_view text);

}  // namespace icx

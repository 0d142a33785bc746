#include "icx/family.hpp"

#include <string>

#include "icx/error.hpp"

namespace icx {

std::string_view to_string(ModelFamily family) {
  switch (family) {
    case ModelFamily::causal: return "causal";
    case ModelFamily::seq2seq: return "seq2seq";
    case ModelFamily::nli: return "nli";
  }
  return "?";
}

ModelFamily parse_model_family(std::string_view text) {
  if (text == "causal") return ModelFamily::causal;
  if (text == "seq2seq") return ModelFamily::seq2seq;
  if (text == "nli") return ModelFamily::nli;
  throw ConfigError("unknown model family '" + std::string(text) + "'");
}

}  // namespace icx

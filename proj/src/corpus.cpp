#include "icx/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include <json.hpp>

#include "icx/error.hpp"

namespace icx {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kFields[] = {"id", "text", "label", "language", "split"};

std::string trim_trailing_newlines(std::string text) {
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return text;
}

bool valid_language(std::string_view lang) {
  if (lang.empty() || lang.front() < 'a' || lang.front() > 'z') return false;
  return std::all_of(lang.begin(), lang.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-';
  });
}

[[noreturn]] void fail_line(std::string_view source, std::size_t line, const std::string& what) {
  throw CorpusError(std::string(source) + ":" + std::to_string(line) + ": " + what);
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + path.string());
  return in;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "validation") return Split::validation;
  if (text == "test") return Split::test;
  throw CorpusError("unknown split '" + std::string(text) + "'");
}

std::string_view to_string(TaskMode mode) {
  return mode == TaskMode::monolingual ? "monolingual" : "cross_lingual";
}

TaskMode parse_task_mode(std::string_view text) {
  if (text == "monolingual") return TaskMode::monolingual;
  if (text == "cross_lingual") return TaskMode::cross_lingual;
  throw ConfigError("unknown task mode '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// LabelRegistry

LabelRegistry::LabelRegistry(std::vector<std::string> labels) : labels_(std::move(labels)) {
  std::sort(labels_.begin(), labels_.end());
  labels_.erase(std::unique(labels_.begin(), labels_.end()), labels_.end());
  if (!labels_.empty() && labels_.front().empty()) throw CorpusError("empty label");
  if (labels_.size() < 2) {
    throw CorpusError("label registry needs at least 2 labels, got " +
                      std::to_string(labels_.size()));
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) index_.emplace(labels_[i], i);
}

bool LabelRegistry::contains(std::string_view label) const { return index_.contains(label); }

std::optional<std::size_t> LabelRegistry::find(std::string_view label) const {
  auto it = index_.find(label);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t LabelRegistry::index_of(std::string_view label) const {
  auto found = find(label);
  if (!found) throw CorpusError("unknown label '" + std::string(label) + "'");
  return *found;
}

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(std::string name, std::vector<LabeledExample> examples)
    : name_(std::move(name)), examples_(std::move(examples)) {
  if (examples_.empty()) throw CorpusError("corpus '" + name_ + "': no examples");
  language_ = examples_.front().language;
  if (!valid_language(language_)) {
    throw CorpusError("corpus '" + name_ + "': invalid language tag '" + language_ + "'");
  }
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    const auto& ex = examples_[i];
    const std::string where = "corpus '" + name_ + "', example '" + ex.id + "': ";
    if (ex.id.empty()) throw CorpusError(where + "empty id");
    if (ex.text.empty()) throw CorpusError(where + "empty text");
    if (ex.text.find('\n') != std::string::npos) throw CorpusError(where + "text contains \\n");
    if (ex.label.empty()) throw CorpusError(where + "empty label");
    if (ex.label.find('\n') != std::string::npos) throw CorpusError(where + "label contains \\n");
    if (ex.language != language_) {
      throw CorpusError(where + "mixed languages ('" + ex.language + "' vs '" + language_ + "')");
    }
    if (!by_id_.emplace(ex.id, i).second) throw CorpusError(where + "duplicate id");
    labels.push_back(ex.label);
  }
  registry_ = LabelRegistry(std::move(labels));
}

const LabeledExample* Corpus::find(std::string_view id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &examples_[it->second];
}

TaskSpec::TaskSpec(std::shared_ptr<const Corpus> source, std::shared_ptr<const Corpus> target,
                   TaskMode mode)
    : source_(std::move(source)), target_(std::move(target)), mode_(mode) {
  if (!source_ || !target_) throw CorpusError("task needs both a source and a target corpus");
  if (mode_ == TaskMode::monolingual) {
    if (source_ != target_ && !(*source_ == *target_)) {
      throw CorpusError("monolingual task requires source == target");
    }
  } else if (source_->registry() != target_->registry()) {
    throw CorpusError("cross-lingual task: label sets of '" + source_->name() + "' and '" +
                      target_->name() + "' differ");
  }
}

// ---------------------------------------------------------------------------
// Import / export

Corpus read_jsonl(std::istream& in, std::string name, std::string origin) {
  const std::string where = origin.empty() ? name : origin;
  std::vector<LabeledExample> examples;
  std::set<std::string, std::less<>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      fail_line(where, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) fail_line(where, line_no, "expected a JSON object");
    if (obj.size() != std::size(kFields)) {
      fail_line(where, line_no, "expected exactly the keys id, text, label, language, split");
    }
    for (auto key : kFields) {
      auto it = obj.find(key);
      if (it == obj.end()) fail_line(where, line_no, "missing key '" + std::string(key) + "'");
      if (!it->is_string()) fail_line(where, line_no, "key '" + std::string(key) + "' must be a string");
    }

    LabeledExample ex;
    ex.id = obj["id"].get<std::string>();
    ex.text = trim_trailing_newlines(obj["text"].get<std::string>());
    ex.label = obj["label"].get<std::string>();
    ex.language = obj["language"].get<std::string>();
    try {
      ex.split = parse_split(obj["split"].get<std::string>());
    } catch (const CorpusError& e) {
      fail_line(where, line_no, e.what());
    }
    if (ex.text.empty()) fail_line(where, line_no, "empty text");
    if (ex.text.find('\n') != std::string::npos) fail_line(where, line_no, "text contains \\n");
    if (!seen.insert(ex.id).second) fail_line(where, line_no, "duplicate id '" + ex.id + "'");
    if (!examples.empty() && ex.language != examples.front().language) {
      fail_line(where, line_no, "mixed languages ('" + ex.language + "' vs '" +
                                   examples.front().language + "')");
    }
    examples.push_back(std::move(ex));
  }
  if (examples.empty()) throw CorpusError(where + ": no examples");
  return Corpus(std::move(name), std::move(examples));
}

Corpus import_jsonl(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_jsonl(in, path.stem().string(), path.string());
}

Corpus read_tsv(std::istream& in, std::string basename, std::string language, Split split,
                std::string origin) {
  const std::string where = origin.empty() ? basename : origin;
  std::vector<LabeledExample> examples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      fail_line(where, line_no, "expected exactly one tab (utterance<TAB>label)");
    }
    LabeledExample ex;
    ex.id = basename + ":" + std::to_string(line_no);
    ex.text = line.substr(0, tab);
    ex.label = line.substr(tab + 1);
    ex.language = language;
    ex.split = split;
    if (ex.text.empty()) fail_line(where, line_no, "empty utterance");
    if (ex.label.empty()) fail_line(where, line_no, "empty label");
    examples.push_back(std::move(ex));
  }
  if (examples.empty()) throw CorpusError(where + ": no examples");
  return Corpus(std::move(basename), std::move(examples));
}

Corpus import_tsv(const std::filesystem::path& path, std::string language, Split split) {
  auto in = open_input(path);
  return read_tsv(in, path.stem().string(), std::move(language), split, path.string());
}

void write_jsonl(const Corpus& corpus, std::ostream& out) {
  for (const auto& ex : corpus.examples()) {
    ordered_json obj;
    obj["id"] = ex.id;
    obj["text"] = ex.text;
    obj["label"] = ex.label;
    obj["language"] = ex.language;
    obj["split"] = to_string(ex.split);
    out << obj.dump() << '\n';
  }
}

void export_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot write " + path.string());
  write_jsonl(corpus, out);
  if (!out) throw CorpusError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Views

std::vector<LabeledExample> split_view(const Corpus& corpus, Split split) {
  std::vector<LabeledExample> out;
  for (const auto& ex : corpus.examples()) {
    if (ex.split == split) out.push_back(ex);
  }
  std::sort(out.begin(), out.end(),
            [](const LabeledExample& a, const LabeledExample& b) { return a.id < b.id; });
  return out;
}

LabelPools label_pools(const Corpus& corpus, Split split, std::string_view target_label) {
  if (!corpus.registry().contains(target_label)) {
    throw CorpusError("unknown label '" + std::string(target_label) + "' in corpus '" +
                      corpus.name() + "'");
  }
  LabelPools pools;
  for (auto& ex : split_view(corpus, split)) {
    (ex.label == target_label ? pools.positives : pools.negatives).push_back(std::move(ex));
  }
  return pools;
}

}  // namespace icx

#pragma once

// Canonical intent-classification datasets: examples, label registry, splits.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace icx {

enum class Split { train, validation, test };

std::string_view to_string(Split split);
/// Throws CorpusError on anything other than "train", "validation", "test".
Split parse_split(std::string_view text);

struct LabeledExample {
  std::string id;
  std::string text;
  std::string label;
  std::string language;
  Split split = Split::train;

  bool operator==(const LabeledExample&) const = default;
};

/// Lexicographically ordered set of intent labels. The position of a label is
/// its tie-break rank during prediction.
class LabelRegistry {
 public:
  LabelRegistry() = default;
  /// Deduplicates and sorts. Throws CorpusError when fewer than two labels
  /// remain or a label is empty.
  explicit LabelRegistry(std::vector<std::string> labels);

  const std::vector<std::string>& labels() const noexcept { return labels_; }
  std::size_t size() const noexcept { return labels_.size(); }
  bool contains(std::string_view label) const;
  std::optional<std::size_t> find(std::string_view label) const;
  /// Throws CorpusError for unknown labels.
  std::size_t index_of(std::string_view label) const;
  const std::string& at(std::size_t index) const { return labels_.at(index); }

  bool operator==(const LabelRegistry& other) const { return labels_ == other.labels_; }

 private:
  std::vector<std::string> labels_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Immutable after construction; safe for concurrent readers.
class Corpus {
 public:
  /// Validates every invariant (unique ids, single language, clean text,
  /// at least two labels). Throws CorpusError otherwise.
  Corpus(std::string name, std::vector<LabeledExample> examples);

  const std::string& name() const noexcept { return name_; }
  const std::string& language() const noexcept { return language_; }
  const std::vector<LabeledExample>& examples() const noexcept { return examples_; }
  const LabelRegistry& registry() const noexcept { return registry_; }
  const LabeledExample* find(std::string_view id) const;

  bool operator==(const Corpus& other) const {
    return name_ == other.name_ && language_ == other.language_ &&
           examples_ == other.examples_ && registry_ == other.registry_;
  }

 private:
  std::string name_;
  std::string language_;
  std::vector<LabeledExample> examples_;
  LabelRegistry registry_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
};

enum class TaskMode { monolingual, cross_lingual };

std::string_view to_string(TaskMode mode);
TaskMode parse_task_mode(std::string_view text);

/// Source corpus provides shots, target corpus provides queries.
class TaskSpec {
 public:
  /// Throws CorpusError when the mode's invariant does not hold.
  TaskSpec(std::shared_ptr<const Corpus> source, std::shared_ptr<const Corpus> target,
           TaskMode mode);

  const Corpus& source() const noexcept { return *source_; }
  const Corpus& target() const noexcept { return *target_; }
  TaskMode mode() const noexcept { return mode_; }

 private:
  std::shared_ptr<const Corpus> source_;
  std::shared_ptr<const Corpus> target_;
  TaskMode mode_;
};

/// Parses canonical JSONL. `name` becomes the corpus name; errors are reported
/// against `origin` (default: the name).
Corpus read_jsonl(std::istream& in, std::string name, std::string origin = {});
Corpus import_jsonl(const std::filesystem::path& path);

/// `utterance<TAB>label` per line; ids are `<basename>:<line>`.
Corpus read_tsv(std::istream& in, std::string basename, std::string language, Split split,
                std::string origin = {});
Corpus import_tsv(const std::filesystem::path& path, std::string language, Split split);

void write_jsonl(const Corpus& corpus, std::ostream& out);
void export_jsonl(const Corpus& corpus, const std::filesystem::path& path);

/// Examples of one split ordered by id. Empty for a split the corpus lacks.
std::vector<LabeledExample> split_view(const Corpus& corpus, Split split);

struct LabelPools {
  std::vector<LabeledExample> positives;
  std::vector<LabeledExample> negatives;
};

/// Partitions a split into examples carrying `target_label` and the rest.
LabelPools label_pools(const Corpus& corpus, Split split, std::string_view target_label);

}  // namespace icx

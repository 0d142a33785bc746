#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "icx/evalrunner.hpp"
#include "support/experiment.hpp"
#include "support/toy.hpp"

using namespace icx;
using namespace icx::testing;

namespace {

std::size_t count_lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

EvalReport strip_time(EvalReport r) {
  r.provenance.timestamp.clear();
  return r;
}

}  // namespace

TEST_CASE("plan resolves the K schedule from measured token counts") {
  auto corpus = toy_corpus({});
  SUBCASE("roomy context") {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::uniform, ModelFamily::causal, 1024));
    const auto p = plan(cfg);
    CHECK(p.k_values == std::vector<std::size_t>{0, 5, 10, 20, 30, 40});
    CHECK(p.k_from_schedule);
    CHECK(p.longest_shot_line_tokens == 6);
    CHECK(p.longest_shot_pair_tokens == 12);
    CHECK(p.longest_query_tokens == 6);
    CHECK(p.budget->reserve() == 14);
    CHECK(p.summary().find("k schedule: [0,5,10,20,30,40]") != std::string::npos);
  }
  SUBCASE("tight context on long utterances") {
    ToySpec spec;
    spec.padding_words = 2;
    auto padded = toy_corpus(spec);
    auto cfg = monolingual(padded, oracle_for(*padded, OracleKind::uniform, ModelFamily::causal, 128));
    const auto p = plan(cfg);
    CHECK(p.k_values == std::vector<std::size_t>{0, 5});
    CHECK_FALSE(p.no_shots_fit);
  }
  SUBCASE("no shots fit") {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::uniform, ModelFamily::causal, 64));
    const auto p = plan(cfg);
    CHECK(p.k_values == std::vector<std::size_t>{0});
    CHECK(p.no_shots_fit);
    CHECK(p.summary().find("falling back") != std::string::npos);
  }
  SUBCASE("explicit k passes through") {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::uniform));
    cfg.k_values = {5};
    const auto p = plan(cfg);
    CHECK(p.k_values == std::vector<std::size_t>{5});
    CHECK(p.summary().find("k values: [5]") != std::string::npos);
  }
  SUBCASE("query lines larger than the context") {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::uniform, ModelFamily::causal, 14));
    CHECK_THROWS_AS(plan(cfg), PromptError);
  }
}

TEST_CASE("memorizing oracle scores perfectly at every k") {
  ToySpec spec;
  spec.n_test = 60;
  auto corpus = toy_corpus(spec);
  for (auto family : {ModelFamily::causal, ModelFamily::seq2seq}) {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::memorizing, family));
    cfg.k_values = {0, 5, 10};
    cfg.seeds = {13};
    const auto report = run_sweep(cfg);
    CHECK_FALSE(report.failed());
    REQUIRE(report.cells.size() == 3);
    for (const auto& [k, cell] : report.cells) {
      CAPTURE(k);
      CHECK(cell.accuracy.mean == 1.0);
      CHECK(cell.macro_f1.mean == 1.0);
      CHECK(cell.runs.at(0).n_queries == 60);
    }
  }
}

TEST_CASE("uniform oracle stays within the chance band") {
  auto check = [](std::size_t n_labels, double lo, double hi) {
    ToySpec spec;
    spec.labels = n_labels == 7 ? snips_labels() : numbered_labels(n_labels);
    spec.n_test = 1000;
    spec.random_labels = true;
    spec.seed = 2024;
    auto corpus = toy_corpus(spec);
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::uniform));
    cfg.k_values = {0, 5};
    cfg.seeds = {13};
    const auto report = run_sweep(cfg);
    for (const auto& [k, cell] : report.cells) {
      CAPTURE(n_labels);
      CAPTURE(k);
      CHECK(cell.accuracy.mean >= lo);
      CHECK(cell.accuracy.mean <= hi);
    }
  };
  check(7, 0.115, 0.172);
  check(12, 0.062, 0.107);
}

TEST_CASE("compute_metrics counts accuracy and macro-F1 over the registry") {
  LabelRegistry registry({"a", "b", "c"});
  auto rec = [](std::string gold, std::string pred, std::size_t dropped = 0) {
    PredictionRecord r;
    r.gold_label = std::move(gold);
    r.predicted_label = std::move(pred);
    r.dropped_pairs_max = dropped;
    return r;
  };
  // a: tp 1 fp 1 fn 0 -> 2/3; b: tp 1 fp 0 fn 1 -> 2/3; c: never seen -> 0.
  const std::vector<PredictionRecord> records{rec("a", "a"), rec("b", "b", 2), rec("b", "a")};
  const auto m = compute_metrics(records, registry);
  CHECK(m.n_queries == 3);
  CHECK(m.truncated_queries == 1);
  CHECK(m.accuracy == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(m.macro_f1 == doctest::Approx((2.0 / 3.0 + 2.0 / 3.0) / 3.0).epsilon(1e-12));
  CHECK(format_fixed6(1.0 / 3.0) == "0.333333");
}

TEST_CASE("run metrics recount from the emitted records") {
  auto corpus = toy_corpus({});
  OracleConfig oc;
  oc.seed = 5;
  auto cfg = monolingual(corpus, make_oracle(OracleKind::hash, oc));
  const auto p = plan(cfg);
  const auto result = run_cell(cfg, p, 5, 42);
  const auto& registry = corpus->registry();
  std::size_t correct = 0;
  for (const auto& r : result.records) {
    correct += r.gold_label == r.predicted_label;
    REQUIRE(r.per_label.size() == registry.size());
    double best = -1;
    std::string argmax;
    for (const auto& label : registry.labels()) {
      if (r.per_label.at(label).confidence > best) {
        best = r.per_label.at(label).confidence;
        argmax = label;
      }
    }
    CHECK(argmax == r.predicted_label);
  }
  CHECK(result.metrics.accuracy ==
        doctest::Approx(double(correct) / result.records.size()).epsilon(1e-12));
  const auto recount = compute_metrics(result.records, registry);
  CHECK(recount.accuracy == result.metrics.accuracy);
  CHECK(recount.macro_f1 == result.metrics.macro_f1);
  CHECK(result.metrics.k == 5);
  CHECK(result.metrics.seed == 42);
}

TEST_CASE("mean_std uses the sample standard deviation") {
  const auto s = mean_std({0.5, 0.6, 0.7});
  CHECK(s.mean == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(s.std == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(mean_std({0.25}).std == 0.0);
  CHECK(mean_std({}).mean == 0.0);
}

TEST_CASE("sweeps are deterministic and independent of worker count and seed order") {
  auto corpus = toy_corpus({});
  OracleConfig oc;
  oc.seed = 9;
  auto backend = std::shared_ptr<Backend>(make_oracle(OracleKind::hash, oc));
  auto cfg = monolingual(corpus, backend);
  cfg.k_values = {0, 5, 10};
  const auto a = strip_time(run_sweep(cfg));
  cfg.workers = 4;
  const auto b = strip_time(run_sweep(cfg));
  CHECK(a == b);
  std::ostringstream ja, jb;
  write_report(a, ReportFormat::json, ja);
  write_report(b, ReportFormat::json, jb);
  CHECK(ja.str() == jb.str());

  cfg.seeds = {77, 13, 42};
  const auto c = run_sweep(cfg);
  for (const auto& [k, cell] : a.cells) {
    CHECK(c.cells.at(k).accuracy.mean == doctest::Approx(cell.accuracy.mean).epsilon(1e-12));
    CHECK(c.cells.at(k).macro_f1.std == doctest::Approx(cell.macro_f1.std).epsilon(1e-12));
  }
  // Different shot seeds reach different prompts.
  CHECK(a.cells.at(5).runs.at(0).accuracy != a.cells.at(5).runs.at(1).accuracy);
}

TEST_CASE("report CSV and JSON") {
  auto corpus = toy_corpus({});
  auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::memorizing));
  cfg.k_values = {0, 5};
  cfg.query_limit = 10;
  const auto report = run_sweep(cfg);

  std::ostringstream csv;
  write_report(report, ReportFormat::csv, csv);
  CHECK(count_lines(csv.str()) == 1 + 2 * (3 + 2));
  CHECK(csv.str().rfind("k,seed,accuracy,macro_f1,n_queries,truncated_queries\n0,13,1.000000,1.000000,10,0\n", 0) == 0);
  CHECK(csv.str().find("5,mean,1.000000,1.000000,,\n5,std,0.000000,0.000000,,\n") != std::string::npos);

  std::ostringstream js;
  write_report(report, ReportFormat::json, js);
  const auto parsed = report_from_json(nlohmann::ordered_json::parse(js.str()));
  CHECK(parsed == report);
  std::ostringstream again;
  write_report(parsed, ReportFormat::json, again);
  CHECK(again.str() == js.str());
  const auto j = nlohmann::json::parse(js.str());
  CHECK(j["provenance"]["f1_variant"] == "macro");
  CHECK(j["provenance"]["prompt_format_version"] == "boolean-v1");
  CHECK(j["config_echo"]["seeds"] == nlohmann::json::array({13, 42, 77}));

  std::ostringstream plot;
  write_plot_data(report, PlotMetric::macro_f1, plot);
  CHECK(plot.str() == "k,mean_f1,std_f1\n0,1.000000,0.000000\n5,1.000000,0.000000\n");

  CHECK_THROWS_AS(report_from_json(nlohmann::ordered_json::parse(R"({"cells":{}})")), ConfigError);
  CHECK_THROWS_AS(report_from_json(nlohmann::ordered_json::parse("[1]")), ConfigError);
}

TEST_CASE("merge_reports joins disjoint k cells and refuses overlaps") {
  auto corpus = toy_corpus({});
  auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::memorizing));
  cfg.query_limit = 5;
  cfg.k_values = {0};
  const auto r0 = run_sweep(cfg);
  cfg.k_values = {5, 10};
  const auto r1 = run_sweep(cfg);
  const auto merged = merge_reports({r0, r1});
  CHECK(merged.cells.size() == 3);
  CHECK(merged.config_echo["k_values"] == nlohmann::ordered_json::array({0, 5, 10}));
  CHECK_THROWS_AS(merge_reports({r0, r0}), ConfigError);
  cfg.seeds = {1};
  cfg.k_values = {20};
  CHECK_THROWS_AS(merge_reports({r0, run_sweep(cfg)}), ConfigError);
}

TEST_CASE("cross-lingual shots come from the source train split only") {
  ToySpec en;
  en.name = "toy-en";
  ToySpec de = en;
  de.name = "toy-de";
  de.language = "de";
  de.n_test = 20;
  auto source = toy_corpus(en);
  auto target = toy_corpus(de);
  TempDir dir("xl");
  ExperimentConfig cfg;
  cfg.task = std::make_shared<const TaskSpec>(source, target, TaskMode::cross_lingual);
  cfg.backend = oracle_for(*target, OracleKind::memorizing);
  cfg.k_values = {5};
  cfg.seeds = {42};
  cfg.dump_prompts = dir.path();
  const auto report = run_sweep(cfg);
  CHECK(report.cells.at(5).accuracy.mean == 1.0);
  CHECK(report.config_echo["task"] == "cross_lingual");

  std::size_t files = 0;
  std::set<std::string> queries;
  for (const auto& entry : std::filesystem::directory_iterator(dir.path())) {
    ++files;
    const auto j = nlohmann::json::parse(read_file(entry.path()));
    const std::string qid = j["query_id"];
    CHECK(qid.rfind("de-test-", 0) == 0);
    queries.insert(qid);
    CHECK(j["shot_ids"].size() == 10);
    for (const auto& id : j["shot_ids"]) {
      const std::string s = id;
      CHECK(s.rfind("en-train-", 0) == 0);
      CHECK(target->find(s) == nullptr);
    }
  }
  CHECK(files == 20 * 7);
  CHECK(queries.size() == 20);

  auto mismatched = de;
  mismatched.labels = numbered_labels(7);
  CHECK_THROWS(TaskSpec(source, toy_corpus(mismatched), TaskMode::cross_lingual));
}

TEST_CASE("zero-shot baselines run a single k = 0 cell") {
  auto corpus = toy_corpus({});
  SUBCASE("Q&A") {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::memorizing));
    cfg.mode = EvalMode::zeroshot_qa;
    const auto report = run_experiment(cfg);
    REQUIRE(report.cells.size() == 1);
    REQUIRE(report.cells.at(0).runs.size() == 1);
    CHECK(report.cells.at(0).accuracy.mean == 1.0);
  }
  SUBCASE("entailment") {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::memorizing, ModelFamily::nli));
    cfg.mode = EvalMode::zeroshot_entail;
    TempDir dir("ent");
    cfg.dump_predictions = dir / "pred.jsonl";
    const auto report = run_experiment(cfg);
    CHECK(report.cells.at(0).accuracy.mean == 1.0);
    const auto lines = read_file(dir / "pred.jsonl");
    CHECK(count_lines(lines) == 50);
    const auto first = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
    CHECK(first["entail_logprob"].size() == 7);
    CHECK(first["k"] == 0);
  }
  SUBCASE("family mismatch") {
    auto cfg = monolingual(corpus, oracle_for(*corpus, OracleKind::memorizing));
    cfg.mode = EvalMode::zeroshot_entail;
    CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
    cfg.mode = EvalMode::fewshot_boolean;
    cfg.backend = oracle_for(*corpus, OracleKind::memorizing, ModelFamily::nli);
    CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
  }
}

TEST_CASE("a failing backend is recorded per cell") {
  struct Flaky : Backend {
    BackendDescriptor d{"flaky", ModelFamily::causal, 1024, 0};
    const BackendDescriptor& descriptor() const override { return d; }
    std::vector<double> score(std::string_view prompt, std::span<const std::string>) override {
      if (prompt.find("utterance 3 ") != std::string_view::npos) throw NetworkError("connection reset");
      return {-1.0, -2.0};
    }
    double entail(std::string_view, std::string_view) override { return 0; }
    std::size_t count_tokens(std::string_view t) override { return count_words(t); }
  };
  auto corpus = toy_corpus({});
  auto cfg = monolingual(corpus, std::make_shared<Flaky>());
  cfg.k_values = {0};
  const auto report = run_sweep(cfg);
  CHECK(report.failed());
  REQUIRE(report.cells.at(0).failures.size() == 3);
  CHECK(report.cells.at(0).failures[0].message.find("connection reset") != std::string::npos);
  CHECK(report.cells.at(0).failures[0].message.find("completed 3/50") != std::string::npos);
}

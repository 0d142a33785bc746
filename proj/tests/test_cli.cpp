#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "icx/cli.hpp"
#include "icx/corpus.hpp"
#include "support/fake_server.hpp"
#include "support/toy.hpp"

using namespace icx;
using namespace icx::testing;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result icx_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string write_toy(const TempDir& dir, const std::string& file, ToySpec spec = {}) {
  const auto path = (dir / file).string();
  export_jsonl(*toy_corpus(spec), path);
  return path;
}

std::size_t count_lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

}  // namespace

TEST_CASE("convert imports TSV and refuses to clobber") {
  TempDir dir("cli-convert");
  write_file(dir / "train.tsv", "play some jazz\tPlayMusic\nweather in paris\tGetWeather\n");
  const auto out = (dir / "train.jsonl").string();
  auto r = icx_run({"convert", "--tsv", (dir / "train.tsv").string(), "--language", "en", "-o", out});
  CHECK(r.code == 0);
  CHECK(r.err.find("wrote 2 examples (2 labels)") != std::string::npos);
  const auto corpus = import_jsonl(out);
  CHECK(corpus.examples().at(0).id == "train:1");
  CHECK(corpus.examples().at(1).split == Split::train);

  r = icx_run({"convert", "--tsv", (dir / "train.tsv").string(), "--language", "en", "-o", out});
  CHECK(r.code == 2);
  CHECK(r.err.find("exists") != std::string::npos);
  CHECK(icx_run({"convert", "--tsv", (dir / "train.tsv").string(), "--language", "en", "-o", out,
                 "--force"}).code == 0);
  CHECK(icx_run({"convert", "--jsonl", out, "-o", (dir / "copy.jsonl").string()}).code == 0);
  CHECK(read_file(dir / "copy.jsonl") == read_file(out));
}

TEST_CASE("usage and data errors exit with 2") {
  TempDir dir("cli-usage");
  CHECK(icx_run({}).code == 2);
  CHECK(icx_run({"convert", "--csv", "x", "-o", (dir / "o").string()}).code == 2);
  CHECK(icx_run({"convert", "--tsv", "x", "-o", (dir / "o").string()}).code == 2);
  CHECK(icx_run({"run", "--model", "oracle:uniform"}).code == 2);
  write_file(dir / "bad.jsonl", "{\"id\":\"a\"}\n");
  auto r = icx_run({"plan", "--source", (dir / "bad.jsonl").string(), "--model", "oracle:uniform"});
  CHECK(r.code == 2);
  CHECK(r.err.find("bad.jsonl:1") != std::string::npos);
  write_file(dir / "cfg.json", R"({"model":"oracle:uniform","colour":"red"})");
  r = icx_run({"plan", "--config", (dir / "cfg.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("colour") != std::string::npos);
  write_file(dir / "junk.json", "not json");
  CHECK(icx_run({"report", (dir / "junk.json").string()}).code == 2);
  CHECK(icx_run({"help-me"}).code == 2);
  CHECK(icx_run({"--help"}).code == 0);
}

TEST_CASE("plan prints the schedule") {
  TempDir dir("cli-plan");
  const auto corpus = write_toy(dir, "toy.jsonl");
  auto r = icx_run({"plan", "--source", corpus, "--model", "oracle:uniform", "--max-tokens", "1024"});
  CHECK(r.code == 0);
  CHECK(r.out.find("k schedule: [0,5,10,20,30,40]") != std::string::npos);
  r = icx_run({"plan", "--source", corpus, "--model", "oracle:uniform", "--k", "5"});
  CHECK(r.code == 0);
  CHECK(r.out.find("k values: [5]") != std::string::npos);
  r = icx_run({"plan", "--source", corpus, "--model", "oracle:uniform", "--k", "0,5,10"});
  CHECK(r.out.find("k values: [0,5,10]") != std::string::npos);
}

TEST_CASE("unreachable server exits with 3") {
  TempDir dir("cli-net");
  const auto corpus = write_toy(dir, "toy.jsonl");
  std::string url;
  {
    FakeServer gone;
    url = gone.url();
  }
  auto r = icx_run({"plan", "--source", corpus, "--model", "m", "--server-url", url, "--max-retries", "0"});
  CHECK(r.code == 3);
  CHECK(r.err.find("unreachable") != std::string::npos);
}

TEST_CASE("run against a served model") {
  TempDir dir("cli-remote");
  const auto corpus = write_toy(dir, "toy.jsonl");
  FakeServer server;
  server.on([](const httplib::Request& req, httplib::Response& res) {
    if (req.path == "/v1/models") {
      res.set_content(R"({"models":[{"name":"m","family":"causal","max_tokens":2048}]})", "application/json");
      return;
    }
    const auto body = nlohmann::json::parse(req.body);
    if (req.path == "/v1/count_tokens") {
      res.set_content(nlohmann::json{{"count", body["text"].get<std::string>().size()}}.dump(),
                      "application/json");
    } else {
      res.set_content(R"({"logprobs":[-0.5,-1.0]})", "application/json");
    }
  });
  const auto out = (dir / "r.json").string();
  auto r = icx_run({"run", "--source", corpus, "--model", "m", "--server-url", server.url(), "--api-key",
                    "tok", "--k", "5", "--seeds", "1", "--query-limit", "4", "--out", out});
  CHECK(r.code == 0);
  CHECK(server.requests().back().authorization == "Bearer tok");
  const auto report = nlohmann::json::parse(read_file(out));
  CHECK(report["config_echo"]["server_url"] == server.url());
  CHECK_FALSE(report["config_echo"].contains("api_key"));
  CHECK(read_file(out).find("tok\"") == std::string::npos);
  CHECK(report["config_echo"]["backend"]["max_tokens"] == 2048);
}

TEST_CASE("run, then report") {
  TempDir dir("cli-run");
  const auto corpus = write_toy(dir, "toy.jsonl");
  const auto r0 = (dir / "r0.json").string();
  auto r = icx_run({"run", "--source", corpus, "--model", "oracle:memorizing", "--k", "0,5", "--query-limit",
                    "10", "--out", r0});
  CHECK(r.code == 0);
  CHECK(r.out.find("mean_acc") != std::string::npos);
  CHECK(r.out.find("1.000000") != std::string::npos);
  CHECK(r.err.find("running k=5 seed=77") != std::string::npos);
  CHECK(count_lines(read_file(dir / "r0.csv")) == 1 + 2 * 5);

  r = icx_run({"run", "--source", corpus, "--model", "oracle:memorizing", "--k", "0,5", "--out", r0});
  CHECK(r.code == 2);

  const auto r1 = (dir / "r1.json").string();
  r = icx_run({"run", "--config", r0, "--k", "10", "--out", r1});
  CHECK(r.code == 0);

  const auto plot = (dir / "plot.csv").string();
  r = icx_run({"report", r0, r1, "--plot-data", plot, "--metric", "f1"});
  CHECK(r.code == 0);
  CHECK(read_file(plot) ==
        "k,mean_f1,std_f1\n0,1.000000,0.000000\n5,1.000000,0.000000\n10,1.000000,0.000000\n");

  r = icx_run({"report", r0, r0});
  CHECK(r.code == 2);
  CHECK(r.err.find("k=0") != std::string::npos);

  r = icx_run({"report", r0});
  CHECK(r.code == 0);
  CHECK(count_lines(r.out) == 3);
}

TEST_CASE("zero-shot Q&A baseline prints a single row") {
  TempDir dir("cli-zs");
  const auto corpus = write_toy(dir, "toy.jsonl");
  auto r = icx_run({"run", "--source", corpus, "--model", "oracle:memorizing", "--mode", "zeroshot_qa"});
  CHECK(r.code == 0);
  CHECK(count_lines(r.out) == 2);
  CHECK(r.out.find("\n0 ") != std::string::npos);

  r = icx_run({"run", "--source", corpus, "--model", "oracle:memorizing", "--family", "nli", "--mode",
               "zeroshot_entail", "--hypothesis-template", "this is about {label}"});
  CHECK(r.code == 0);
  CHECK(r.out.find("1.000000") != std::string::npos);

  r = icx_run({"run", "--source", corpus, "--model", "oracle:memorizing", "--mode", "zeroshot_entail"});
  CHECK(r.code == 2);
}

TEST_CASE("cross-lingual runs need matching label sets") {
  TempDir dir("cli-xl");
  ToySpec de;
  de.name = "de";
  de.language = "de";
  const auto en = write_toy(dir, "en.jsonl");
  const auto de_path = write_toy(dir, "de.jsonl", de);
  auto r = icx_run({"run", "--task", "cross_lingual", "--source", en, "--target", de_path, "--model",
                    "oracle:memorizing", "--k", "5", "--seeds", "1", "--json-nope"});
  CHECK(r.code == 2);
  r = icx_run({"run", "--task", "cross_lingual", "--source", en, "--target", de_path, "--model",
               "oracle:memorizing", "--k", "5", "--seeds", "1"});
  CHECK(r.code == 0);
  de.labels = numbered_labels(7);
  const auto other = write_toy(dir, "other.jsonl", de);
  r = icx_run({"run", "--task", "cross_lingual", "--source", en, "--target", other, "--model",
               "oracle:memorizing"});
  CHECK(r.code == 2);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hbtp/cli.hpp"
#include "hbtp/error.hpp"

using namespace hbtp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("hbtp_test_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Small labeled corpus shared by several cases.
void sample_small(const TempDir& dir, int stories = 24) {
  const Result r = run_cli({"sample", "--out-dir", dir.path.string(), "--num-stories",
                            std::to_string(stories), "--users", "60", "--T", "4", "--words", "20",
                            "--vocab-size", "40", "--label-h",
                            "true:1,false:0.5,non-rumor:-0.5,unverified:-1", "--seed", "3"});
  REQUIRE(r.code == 0);
}

}  // namespace

TEST_CASE("config text parsing") {
  const auto kv = cli::parse_config_text("# comment\nT = 7\nmax-iters=3 # trailing\n\n");
  CHECK(kv.at("T") == "7");
  CHECK(kv.at("max_iters") == "3");
  CHECK_THROWS_AS(cli::parse_config_text("no equals sign"), ParseError);

  cli::RunConfig cfg;
  cli::apply_settings(cfg, kv);
  CHECK(cfg.hyper.T == 7);
  CHECK(cfg.inference.max_iters == 3);
  cli::apply_settings(cfg, {{"xi", "4"}});
  CHECK(cfg.inference.input_variance == doctest::Approx(0.25));
  CHECK_THROWS_AS(cli::apply_settings(cfg, {{"bogus", "1"}}), ConfigError);
  CHECK_THROWS_AS(cli::apply_settings(cfg, {{"T", "seven"}}), ConfigError);
}

TEST_CASE("defaults follow the documented settings") {
  const cli::RunConfig cfg;
  CHECK(cfg.hyper.alpha0 == 0.1);
  CHECK(cfg.hyper.zeta == 10);
  CHECK(cfg.hyper.kappa == 10);
  CHECK(cfg.inference.G == 50);
  CHECK(cfg.inference.input_variance == 10);
}

TEST_CASE("usage errors exit with status 1 and name the problem") {
  Result r = run_cli({"train", "--T", "0"});
  CHECK(r.code == 1);
  CHECK(r.err.find("invalid T") != std::string::npos);
  r = run_cli({"train", "--no-such-flag", "1"});
  CHECK(r.code == 1);
  r = run_cli({"frobnicate"});
  CHECK(r.code == 1);
  r = run_cli({"train", "--kappa", "-1"});
  CHECK(r.code == 1);
  CHECK(r.err.find("kappa") != std::string::npos);
}

TEST_CASE("runtime errors exit with status 2") {
  TempDir dir("runtime");
  std::ofstream(dir / "events.tsv") << "a\t-\tmissing\n";
  std::ofstream(dir / "stories.jsonl") << "{\"id\":\"s1\",\"text\":\"hello world\",\"label\":null}\n";
  const Result r = run_cli({"ingest", "--events", dir / "events.tsv", "--stories", dir / "stories.jsonl"});
  CHECK(r.code == 2);
  CHECK(r.err.find("'missing'") != std::string::npos);
}

TEST_CASE("train from a config file") {
  TempDir dir("train");
  sample_small(dir);
  std::ofstream(dir / "c.cfg") << "events = " << (dir / "events.tsv") << "\nstories = "
                               << (dir / "stories.jsonl") << "\ncheckpoint = " << (dir / "model.json")
                               << "\ntrace = " << (dir / "trace.csv")
                               << "\nT = 4\nmax_iters = 5\nG = 8\nmin_count = 1\n";
  const Result r = run_cli({"train", "--config", dir / "c.cfg"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "model.json"));
  const auto trace = lines(slurp(dir / "trace.csv"));
  CHECK(trace.front() == "sweep,elbo,seconds");
  CHECK(trace.size() >= 2);

  // Flags override the file; identical settings give identical bytes.
  REQUIRE(run_cli({"train", "--config", dir / "c.cfg", "--checkpoint", dir / "again.json"}).code == 0);
  CHECK(slurp(dir / "model.json") == slurp(dir / "again.json"));

  const Result topics = run_cli({"topics", "--checkpoint", dir / "model.json"});
  REQUIRE(topics.code == 0);
  const auto rows = lines(topics.out);
  CHECK(rows.front() == "topic,weight,mean_h,top_words");
  CHECK(rows.size() == 5);
}

TEST_CASE("supervised train, predict and evaluate") {
  TempDir dir("supervised");
  sample_small(dir, 40);
  const std::vector<std::string> common = {"--events", dir / "events.tsv", "--stories",
                                           dir / "stories.jsonl", "--folds", "5", "--fold", "0",
                                           "--T", "4", "--G", "8", "--max-iters", "5",
                                           "--min-count", "1"};
  auto with = [&](std::vector<std::string> head) {
    head.insert(head.end(), common.begin(), common.end());
    return head;
  };
  REQUIRE(run_cli(with({"train", "--mode", "supervised", "--checkpoint", dir / "sup.json"})).code == 0);
  const Result p = run_cli(with({"predict", "--checkpoint", dir / "sup.json", "--predictions", dir / "pred.tsv"}));
  REQUIRE(p.code == 0);
  const auto pred = lines(slurp(dir / "pred.tsv"));
  CHECK(pred.front() == "story_id\tpredicted_label\tscore_T\tscore_F\tscore_NR\tscore_U");
  CHECK(pred.size() == 1 + 8);  // 40 stories, 10 per label, 2 per label per fold

  const Result e = run_cli({"evaluate", "--predictions", dir / "pred.tsv", "--stories",
                            dir / "stories.jsonl", "--metrics", dir / "metrics.txt", "--min-count", "1"});
  REQUIRE(e.code == 0);
  CHECK(e.out.rfind("accuracy\t", 0) == 0);
  CHECK(slurp(dir / "metrics.txt") == e.out);

  // Unsupervised checkpoints cannot predict.
  REQUIRE(run_cli(with({"train", "--checkpoint", dir / "unsup.json"})).code == 0);
  CHECK(run_cli(with({"predict", "--checkpoint", dir / "unsup.json", "--predictions", dir / "x.tsv"})).code == 2);
  CHECK(!fs::exists(dir / "x.tsv"));
}

TEST_CASE("hstats reproduces planted per-label homogeneity ordering") {
  TempDir dir("hstats");
  const Result s = run_cli({"sample", "--out-dir", dir.path.string(), "--T", "3", "--beta", "20",
                            "--alpha0", "0.01", "--label-h",
                            "true:2,false:0.5,non-rumor:-1,unverified:-2.5", "--num-stories",
                            "240", "--users", "600", "--hubs", "20", "--words", "200", "--vocab-size",
                            "200", "--seed", "1"});
  REQUIRE(s.code == 0);
  REQUIRE(run_cli({"train", "--events", dir / "events.tsv", "--stories", dir / "stories.jsonl",
                   "--checkpoint", dir / "model.json", "--T", "3", "--beta", "20",
                   "--prune-leaves", "false"})
              .code == 0);
  const Result h = run_cli({"hstats", "--checkpoint", dir / "model.json", "--stories",
                            dir / "stories.jsonl", "--out", dir / "hstats.csv"});
  REQUIRE(h.code == 0);
  const auto rows = lines(h.out);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "label,count,mean_h,q05,q25,q50,q75,q95");
  CHECK(rows[1].rfind("true,", 0) == 0);
  CHECK(rows[2].rfind("false,", 0) == 0);
  CHECK(rows[3].rfind("non-rumor,", 0) == 0);
  CHECK(rows[4].rfind("unverified,", 0) == 0);
  CHECK(slurp(dir / "hstats.csv") == h.out);
}

TEST_CASE("ingest report") {
  TempDir dir("ingest");
  std::ofstream(dir / "events.tsv") << "a\t-\ts1\nb\ta\ts1\nc\t-\ts2\n";
  std::ofstream(dir / "stories.jsonl")
      << "{\"id\":\"s1\",\"text\":\"fake news fake\",\"label\":\"false\"}\n"
      << "{\"id\":\"s2\",\"text\":\"real news\",\"label\":null}\n";
  const Result r = run_cli({"ingest", "--events", dir / "events.tsv", "--stories",
                            dir / "stories.jsonl", "--out", dir / "vocab.txt"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("stories\t2\n") != std::string::npos);
  CHECK(r.out.find("events\t3\n") != std::string::npos);
  CHECK(r.out.find("pruned_users\t1\n") != std::string::npos);
  CHECK(r.out.find("label_false\t1\n") != std::string::npos);
  CHECK(r.out.find("unlabeled\t1\n") != std::string::npos);
  CHECK(lines(slurp(dir / "vocab.txt")) == std::vector<std::string>{"fake", "news"});
}

TEST_CASE("atomic writes leave no partial output") {
  TempDir dir("atomic");
  const std::string target = dir / "out.txt";
  cli::write_atomic(target, [](std::ostream& o) { o << "first\n"; });
  CHECK(slurp(target) == "first\n");
  CHECK_THROWS(cli::write_atomic(target, [](std::ostream& o) {
    o << "partial";
    throw std::runtime_error("writer failed");
  }));
  CHECK(slurp(target) == "first\n");
  CHECK(!fs::exists(target + ".tmp"));
  const std::string fresh = dir / "fresh.txt";
  CHECK_THROWS(cli::write_atomic(fresh, [](std::ostream&) { throw std::runtime_error("no"); }));
  CHECK(!fs::exists(fresh));
}

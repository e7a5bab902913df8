#include "hbtp/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "hbtp/classify.hpp"
#include "hbtp/corpus.hpp"
#include "hbtp/error.hpp"
#include "hbtp/rng.hpp"

namespace hbtp::cli {

namespace {

namespace fs = std::filesystem;

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid " + key + ": '" + v + "' is not a number");
}

long long to_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("invalid " + key + ": '" + v + "' is not an integer");
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  const long long x = to_integer(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    throw ConfigError("invalid " + key + ": out of range");
  return static_cast<int>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid " + key + ": '" + v + "' is not a boolean");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::vector<std::pair<std::string, Setter>>& settings_table() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"alpha", [](RunConfig& c, auto& k, auto& v) { c.hyper.alpha = to_double(k, v); }},
      {"beta", [](RunConfig& c, auto& k, auto& v) { c.hyper.beta = to_double(k, v); }},
      {"alpha0", [](RunConfig& c, auto& k, auto& v) { c.hyper.alpha0 = to_double(k, v); }},
      {"zeta", [](RunConfig& c, auto& k, auto& v) { c.hyper.zeta = to_double(k, v); }},
      {"kappa", [](RunConfig& c, auto& k, auto& v) { c.hyper.kappa = to_double(k, v); }},
      {"sigma2", [](RunConfig& c, auto& k, auto& v) { c.hyper.sigma2 = to_double(k, v); }},
      {"T", [](RunConfig& c, auto& k, auto& v) { c.hyper.T = to_int(k, v); }},
      {"G", [](RunConfig& c, auto& k, auto& v) { c.inference.G = to_int(k, v); }},
      {"xi",
       [](RunConfig& c, auto& k, auto& v) {
         const double xi = to_double(k, v);
         if (!(xi > 0) || !std::isfinite(xi)) throw ConfigError("invalid xi: must be > 0");
         c.inference.input_variance = 1.0 / xi;
       }},
      {"jitter", [](RunConfig& c, auto& k, auto& v) { c.inference.jitter = to_double(k, v); }},
      {"max_iters", [](RunConfig& c, auto& k, auto& v) { c.inference.max_iters = to_int(k, v); }},
      {"tol", [](RunConfig& c, auto& k, auto& v) { c.inference.tol = to_double(k, v); }},
      {"step_V", [](RunConfig& c, auto& k, auto& v) { c.inference.step_V = to_double(k, v); }},
      {"step_h", [](RunConfig& c, auto& k, auto& v) { c.inference.step_h = to_double(k, v); }},
      {"step_lambda",
       [](RunConfig& c, auto& k, auto& v) { c.inference.step_lambda = to_double(k, v); }},
      {"inner_iters",
       [](RunConfig& c, auto& k, auto& v) { c.inference.inner_iters = to_int(k, v); }},
      {"max_halvings",
       [](RunConfig& c, auto& k, auto& v) { c.inference.max_halvings = to_int(k, v); }},
      {"eta_noise", [](RunConfig& c, auto& k, auto& v) { c.inference.eta_noise = to_double(k, v); }},
      {"label_weight",
       [](RunConfig& c, auto& k, auto& v) { c.inference.label_weight = to_double(k, v); }},
      {"update_h", [](RunConfig& c, auto& k, auto& v) { c.inference.update_h = to_bool(k, v); }},
      {"seed",
       [](RunConfig& c, auto& k, auto& v) {
         const long long s = to_integer(k, v);
         if (s < 0) throw ConfigError("invalid seed: must be >= 0");
         c.inference.seed = static_cast<std::uint64_t>(s);
       }},
      {"threads", [](RunConfig& c, auto& k, auto& v) { c.inference.threads = to_int(k, v); }},
      {"mode",
       [](RunConfig& c, auto&, auto& v) {
         if (v == "unsupervised") c.mode = Mode::Unsupervised;
         else if (v == "supervised") c.mode = Mode::Supervised;
         else throw ConfigError("invalid mode: '" + v + "' (expected unsupervised or supervised)");
       }},
      {"prune_leaves", [](RunConfig& c, auto& k, auto& v) { c.prune_leaves = to_bool(k, v); }},
      {"min_count",
       [](RunConfig& c, auto& k, auto& v) {
         const int m = to_int(k, v);
         if (m < 1) throw ConfigError("invalid min_count: must be >= 1");
         c.min_count = static_cast<std::size_t>(m);
       }},
      {"events", [](RunConfig& c, auto&, auto& v) { c.events = v; }},
      {"stories", [](RunConfig& c, auto&, auto& v) { c.stories = v; }},
      {"checkpoint", [](RunConfig& c, auto&, auto& v) { c.checkpoint = v; }},
      {"trace", [](RunConfig& c, auto&, auto& v) { c.trace = v; }},
      {"predictions", [](RunConfig& c, auto&, auto& v) { c.predictions = v; }},
      {"metrics", [](RunConfig& c, auto&, auto& v) { c.metrics = v; }},
      {"out", [](RunConfig& c, auto&, auto& v) { c.out = v; }},
      {"out_dir", [](RunConfig& c, auto&, auto& v) { c.out_dir = v; }},
      {"folds", [](RunConfig& c, auto& k, auto& v) { c.folds = to_int(k, v); }},
      {"fold", [](RunConfig& c, auto& k, auto& v) { c.fold = to_int(k, v); }},
      {"users", [](RunConfig& c, auto& k, auto& v) { c.users = to_int(k, v); }},
      {"num_stories", [](RunConfig& c, auto& k, auto& v) { c.num_stories = to_int(k, v); }},
      {"min_sharers", [](RunConfig& c, auto& k, auto& v) { c.min_sharers = to_int(k, v); }},
      {"max_sharers", [](RunConfig& c, auto& k, auto& v) { c.max_sharers = to_int(k, v); }},
      {"hubs", [](RunConfig& c, auto& k, auto& v) { c.hubs = to_int(k, v); }},
      {"words", [](RunConfig& c, auto& k, auto& v) { c.words = to_int(k, v); }},
      {"vocab_size", [](RunConfig& c, auto& k, auto& v) { c.vocab_size = to_int(k, v); }},
      {"label_h", [](RunConfig& c, auto&, auto& v) { c.label_h = v; }},
  };
  return table;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  const auto last = s.find_last_not_of(ws);
  s.erase(last == std::string::npos ? 0 : last + 1);
  return s;
}

std::vector<std::pair<Label, double>> parse_label_h(const std::string& spec) {
  std::vector<std::pair<Label, double>> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("invalid label_h: expected label:value");
    const auto label = parse_label(trim(item.substr(0, colon)));
    if (!label) throw ConfigError("invalid label_h: unknown label '" + item.substr(0, colon) + "'");
    out.emplace_back(*label, to_double("label_h", trim(item.substr(colon + 1))));
  }
  if (out.empty()) throw ConfigError("invalid label_h: empty");
  return out;
}

void require(const std::string& value, const char* key, const std::string& command) {
  if (value.empty())
    throw ConfigError(command + " requires " + flag_name(key) + " (or " + key + "= in the config)");
}

Corpus read_corpus(const RunConfig& cfg) {
  return load_events(cfg.events, cfg.stories, cfg.min_count);
}

std::map<StoryId, Story> read_stories(const std::string& path, std::size_t min_count) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::istringstream none;
  return parse_corpus(none, in, min_count, "<none>", path).stories;
}

void write_trace(std::ostream& out, const ElboTrace& trace) {
  out << "sweep,elbo,seconds\n" << std::setprecision(17);
  for (const auto& t : trace) out << t.sweep << ',' << t.elbo << ',' << t.seconds << '\n';
}

std::vector<StoryId> labeled_ids(const Corpus& corpus) {
  std::vector<StoryId> ids;
  for (const auto& [sid, st] : corpus.stories)
    if (st.label) ids.push_back(sid);
  return ids;
}

std::map<StoryId, Story> labeled_only(const std::map<StoryId, Story>& stories) {
  std::map<StoryId, Story> out;
  for (const auto& [sid, st] : stories)
    if (st.label) out.emplace(sid, st);
  return out;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return std::nan("");
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// --- subcommands ---------------------------------------------------------------

int cmd_ingest(const RunConfig& cfg, std::ostream& out) {
  require(cfg.events, "events", "ingest");
  require(cfg.stories, "stories", "ingest");
  const Corpus corpus = read_corpus(cfg);
  const auto labels = corpus.label_counts();
  std::size_t unlabeled = corpus.stories.size();
  for (auto c : labels) unlabeled -= c;
  std::ostringstream report;
  report << "stories\t" << corpus.stories.size() << '\n';
  report << "events\t" << corpus.events.size() << '\n';
  if (!corpus.events.empty()) {
    const UserGraph g = build_user_graph(corpus.events, cfg.prune_leaves);
    report << "users\t" << g.num_users() << '\n';
    report << "pruned_users\t" << g.pruned_users << '\n';
    report << "pruned_events\t" << g.pruned_events << '\n';
  } else {
    report << "users\t0\npruned_users\t0\npruned_events\t0\n";
  }
  report << "tokens\t" << corpus.num_tokens() << '\n';
  report << "vocabulary\t" << corpus.vocab.size() << '\n';
  for (std::size_t c = 0; c < kNumLabels; ++c)
    report << "label_" << label_name(kAllLabels[c]) << '\t' << labels[c] << '\n';
  report << "unlabeled\t" << unlabeled << '\n';
  out << report.str();
  if (!cfg.out.empty()) write_atomic(cfg.out, [&](std::ostream& o) { write_vocabulary(o, corpus.vocab); });
  return 0;
}

int cmd_sample(const RunConfig& cfg, std::ostream& out) {
  require(cfg.out_dir, "out_dir", "sample");
  Rng rng = substream(cfg.inference.seed, "sampler");
  CascadeSpec cs{cfg.users, cfg.num_stories, cfg.min_sharers, cfg.max_sharers, cfg.hubs};
  const auto events = synthetic_events(cs, rng);
  const UserGraph graph = build_user_graph(events, false);

  HomogeneitySource hom = GpHomogeneity{};
  std::map<StoryId, Label> labels;
  if (!cfg.label_h.empty()) {
    const auto levels = parse_label_h(cfg.label_h);
    std::map<StoryId, double> h;
    std::size_t i = 0;
    for (const auto& [sid, _] : graph.sharers) {
      const auto& [label, value] = levels[i++ % levels.size()];
      h[sid] = value;
      labels[sid] = label;
    }
    hom = h;
  }
  SyntheticCorpus sc =
      sample_corpus(graph, cfg.hyper, hom, SamplerConfig{cfg.words, cfg.vocab_size}, rng);
  for (auto& [sid, st] : sc.corpus.stories) {
    auto it = labels.find(sid);
    if (it != labels.end()) st.label = it->second;
  }
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  write_atomic(dir / "events.tsv", [&](std::ostream& o) { write_events(o, sc.corpus.events); });
  write_atomic(dir / "stories.jsonl",
               [&](std::ostream& o) { write_stories(o, sc.corpus.stories, sc.corpus.vocab); });
  write_atomic(dir / "truth.jsonl", [&](std::ostream& o) { write_ground_truth(o, sc); });
  out << "events\t" << sc.corpus.events.size() << "\nstories\t" << sc.corpus.stories.size()
      << "\nusers\t" << graph.num_users() << '\n';
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  require(cfg.events, "events", "train");
  require(cfg.stories, "stories", "train");
  require(cfg.checkpoint, "checkpoint", "train");
  const Corpus corpus = read_corpus(cfg);
  if (corpus.events.empty()) throw DomainError("train: the events file is empty");
  const UserGraph graph = build_user_graph(corpus.events, cfg.prune_leaves);

  CheckpointMeta meta;
  meta.config = cfg.inference;
  meta.vocabulary = corpus.vocab.tokens();
  Model model;
  VIState state;
  ElboTrace trace;
  if (cfg.mode == Mode::Supervised) {
    std::vector<StoryId> train = labeled_ids(corpus);
    if (cfg.folds > 0 && cfg.fold >= 0)
      train = split_folds(labeled_only(corpus.stories), cfg.folds, cfg.inference.seed)
                  .stories_not_in(cfg.fold);
    SupervisedFit fit = train_supervised(corpus, graph, train, cfg.hyper, cfg.inference);
    model = std::move(fit.model);
    state = std::move(fit.state);
    trace = std::move(fit.trace);
    meta.supervised = true;
  } else {
    model = Model::build(corpus, graph, cfg.hyper.T);
    FitResult r = fit(model, cfg.hyper, cfg.inference);
    state = std::move(r.state);
    trace = std::move(r.trace);
  }
  meta.sweeps = trace.empty() ? 0 : trace.back().sweep;
  meta.last_elbo = trace.empty() ? 0.0 : trace.back().elbo;
  if (model.num_stories() < static_cast<int>(corpus.stories.size()))
    err << "warning: " << corpus.stories.size() - static_cast<std::size_t>(model.num_stories())
        << " stories without tokens, sharers or training membership were left out\n";
  save_checkpoint(cfg.checkpoint, model, state, meta);
  if (!cfg.trace.empty()) write_atomic(cfg.trace, [&](std::ostream& o) { write_trace(o, trace); });
  out << "stories\t" << model.num_stories() << "\nusers\t" << model.num_users() << "\nrecords\t"
      << model.num_records() << "\nsweeps\t" << meta.sweeps << "\nelbo\t"
      << std::setprecision(12) << meta.last_elbo << '\n';
  return 0;
}

int cmd_predict(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  require(cfg.checkpoint, "checkpoint", "predict");
  require(cfg.events, "events", "predict");
  require(cfg.stories, "stories", "predict");
  require(cfg.predictions, "predictions", "predict");
  Checkpoint cp = load_checkpoint(cfg.checkpoint);
  if (!cp.meta.supervised) throw DomainError("predict needs a checkpoint trained in supervised mode");
  const Corpus corpus = read_corpus(cfg);
  if (cp.meta.vocabulary != corpus.vocab.tokens())
    throw ConfigError("checkpoint does not match the corpus: vocabulary differs");
  const UserGraph graph = build_user_graph(corpus.events, cfg.prune_leaves);
  SupervisedFit trained;
  trained.model = Model::build(corpus, graph, cp.state.hyper.T, &cp.stories, true);
  check_compatible(cp, trained.model);
  trained.state = std::move(cp.state);
  trained.head = LabelHead::from_state(trained.state);

  std::set<StoryId> training(cp.stories.begin(), cp.stories.end());
  std::vector<StoryId> held;
  if (cfg.folds > 0 && cfg.fold >= 0) {
    held = split_folds(labeled_only(corpus.stories), cfg.folds, cfg.inference.seed)
               .stories_in(cfg.fold);
  } else {
    for (const auto& [sid, _] : corpus.stories)
      if (!training.count(sid)) held.push_back(sid);
  }
  std::erase_if(held, [&](const StoryId& s) { return training.count(s) > 0; });

  InferenceConfig ic = cp.meta.config;
  ic.threads = cfg.inference.threads;
  const auto preds = predict_labels(trained, corpus, graph, held, ic);
  std::size_t skipped = 0;
  for (const auto& p : preds)
    if (!p.label) {
      ++skipped;
      err << "warning: story '" << p.story << "' has no tokens or sharers; skipped\n";
    }
  write_atomic(cfg.predictions, [&](std::ostream& o) { write_predictions(o, preds); });
  out << "predicted\t" << preds.size() - skipped << "\nskipped\t" << skipped << '\n';
  return 0;
}

std::vector<std::pair<StoryId, std::optional<Label>>> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<std::pair<StoryId, std::optional<Label>>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    std::stringstream ss(line);
    std::string sid, label;
    if (!std::getline(ss, sid, '\t') || !std::getline(ss, label, '\t'))
      throw ParseError(path, lineno, "expected story_id and predicted_label");
    if (label == "skipped") {
      out.emplace_back(sid, std::nullopt);
      continue;
    }
    const auto l = parse_label(label);
    if (!l) throw ParseError(path, lineno, "unknown label '" + label + "'");
    out.emplace_back(sid, *l);
  }
  return out;
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  require(cfg.predictions, "predictions", "evaluate");
  require(cfg.stories, "stories", "evaluate");
  const auto preds = read_predictions(cfg.predictions);
  const auto stories = read_stories(cfg.stories, cfg.min_count);
  std::map<StoryId, std::optional<Label>> predicted;
  std::map<StoryId, Label> truth;
  for (const auto& [sid, label] : preds) {
    predicted[sid] = label;
    auto it = stories.find(sid);
    if (it == stories.end() || !it->second.label)
      throw DomainError("story '" + sid + "' has no ground-truth label");
    truth[sid] = *it->second.label;
  }
  const Metrics m = evaluate(predicted, truth);
  std::ostringstream text;
  write_metrics(text, m);
  out << text.str();
  if (!cfg.metrics.empty()) write_atomic(cfg.metrics, [&](std::ostream& o) { o << text.str(); });
  return 0;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

int cmd_topics(const RunConfig& cfg, std::ostream& out) {
  require(cfg.checkpoint, "checkpoint", "topics");
  const Checkpoint cp = load_checkpoint(cfg.checkpoint);
  const VIState& st = cp.state;
  const auto T = st.eta.rows();
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(T), hmass = Eigen::VectorXd::Zero(T);
  for (std::size_t s = 0; s < st.gamma.size(); ++s) {
    const Eigen::VectorXd zbar = st.gamma[s].colwise().mean().transpose();
    mass += zbar;
    hmass += zbar * st.h(static_cast<Eigen::Index>(s));
  }
  std::ostringstream csv;
  csv << "topic,weight,mean_h,top_words\n" << std::setprecision(6);
  const double L = std::max<double>(1.0, static_cast<double>(st.gamma.size()));
  for (Eigen::Index k = 0; k < T; ++k) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(st.eta.cols()));
    std::iota(order.begin(), order.end(), 0);
    const std::size_t top = std::min<std::size_t>(10, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(top), order.end(),
                      [&](Eigen::Index a, Eigen::Index b) {
                        return st.eta(k, a) > st.eta(k, b) || (st.eta(k, a) == st.eta(k, b) && a < b);
                      });
    std::string words;
    for (std::size_t i = 0; i < top; ++i) {
      if (i) words += ' ';
      words += cp.meta.vocabulary.at(static_cast<std::size_t>(order[i]));
    }
    const double mean_h = mass(k) > 0 ? hmass(k) / mass(k) : 0.0;
    csv << k << ',' << mass(k) / L << ',' << mean_h << ',' << csv_field(words) << '\n';
  }
  out << csv.str();
  if (!cfg.out.empty()) write_atomic(cfg.out, [&](std::ostream& o) { o << csv.str(); });
  return 0;
}

int cmd_hstats(const RunConfig& cfg, std::ostream& out) {
  require(cfg.checkpoint, "checkpoint", "hstats");
  require(cfg.stories, "stories", "hstats");
  const Checkpoint cp = load_checkpoint(cfg.checkpoint);
  const auto stories = read_stories(cfg.stories, cfg.min_count);
  std::map<Label, std::vector<double>> by_label;
  for (std::size_t s = 0; s < cp.stories.size(); ++s) {
    auto it = stories.find(cp.stories[s]);
    if (it == stories.end()) throw ReferentialError("unknown story id '" + cp.stories[s] + "'");
    if (it->second.label) by_label[*it->second.label].push_back(cp.state.h(static_cast<Eigen::Index>(s)));
  }
  struct Row {
    Label label;
    std::vector<double> h;
    double mean;
  };
  std::vector<Row> rows;
  for (auto& [label, h] : by_label)
    rows.push_back({label, h, std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size())});
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.mean > b.mean; });
  std::ostringstream csv;
  csv << "label,count,mean_h,q05,q25,q50,q75,q95\n" << std::setprecision(6);
  for (const auto& r : rows) {
    csv << label_name(r.label) << ',' << r.h.size() << ',' << r.mean;
    for (double q : {0.05, 0.25, 0.5, 0.75, 0.95}) csv << ',' << quantile(r.h, q);
    csv << '\n';
  }
  out << csv.str();
  if (!cfg.out.empty()) write_atomic(cfg.out, [&](std::ostream& o) { o << csv.str(); });
  return 0;
}

}  // namespace

void RunConfig::validate() const {
  hyper.validate();
  inference.validate();
  if (folds != 0 && folds < 2) throw ConfigError("invalid folds: must be 0 or >= 2");
  if (fold >= 0 && folds == 0) throw ConfigError("invalid fold: requires folds");
  if (fold >= folds && folds > 0) throw ConfigError("invalid fold: must be < folds");
  if (users < 2) throw ConfigError("invalid users: must be >= 2");
  if (num_stories < 1) throw ConfigError("invalid num_stories: must be >= 1");
  if (min_sharers < 1 || max_sharers < min_sharers)
    throw ConfigError("invalid min_sharers/max_sharers: need 1 <= min_sharers <= max_sharers");
  if (max_sharers > users) throw ConfigError("invalid max_sharers: must be <= users");
  if (hubs < 0 || hubs > users) throw ConfigError("invalid hubs: must be in [0, users]");
  if (words < 1) throw ConfigError("invalid words: must be >= 1");
  if (vocab_size < 1) throw ConfigError("invalid vocab_size: must be >= 1");
  if (!label_h.empty()) parse_label_h(label_h);
}

std::map<std::string, std::string> parse_config_text(const std::string& text,
                                                     const std::string& name) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(name, lineno, "expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    if (key.empty()) throw ParseError(name, lineno, "empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

void apply_settings(RunConfig& cfg, const std::map<std::string, std::string>& settings) {
  const auto& table = settings_table();
  for (const auto& [key, value] : settings) {
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.first == key; });
    if (it == table.end()) throw ConfigError("unknown configuration key '" + key + "'");
    it->second(cfg, key, value);
  }
}

void write_atomic(const fs::path& path, const std::function<void(std::ostream&)>& fn) {
  fs::path tmp = path;
  tmp += ".tmp";
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write '" + tmp.string() + "'");
      fn(out);
      out.flush();
      if (!out) throw Error("write to '" + tmp.string() + "' failed");
    }
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Homogeneity-based transmissive process topic model"};
  app.name("hbtp");
  app.require_subcommand(1, 1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"ingest", "validate a corpus and report its statistics"},
      {"sample", "write a synthetic corpus drawn from the generative model"},
      {"train", "fit the model and write a checkpoint and ELBO trace"},
      {"predict", "predict labels of held-out stories with a supervised checkpoint"},
      {"evaluate", "score predictions against ground-truth labels"},
      {"topics", "top words and mean homogeneity per topic (CSV)"},
      {"hstats", "per-label homogeneity mean and quantiles (CSV)"}};

  std::map<std::string, std::string> values;
  std::map<std::string, std::map<std::string, CLI::Option*>> options;
  std::map<std::string, std::string> config_path;
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path[name], "flat key=value configuration file");
    for (const auto& [key, _] : settings_table())
      options[name][key] = sub->add_option(flag_name(key), values[key]);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  std::string command;
  for (const auto& [name, _] : commands)
    if (app.got_subcommand(name)) command = name;

  RunConfig cfg;
  try {
    if (!config_path[command].empty()) {
      std::ifstream in(config_path[command]);
      if (!in) throw ConfigError("cannot read config file '" + config_path[command] + "'");
      std::stringstream buf;
      buf << in.rdbuf();
      apply_settings(cfg, parse_config_text(buf.str(), config_path[command]));
    }
    std::map<std::string, std::string> overrides;
    for (const auto& [key, opt] : options[command])
      if (opt->count() > 0) overrides[key] = values[key];
    apply_settings(cfg, overrides);
    cfg.validate();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (command == "ingest") return cmd_ingest(cfg, out);
    if (command == "sample") return cmd_sample(cfg, out);
    if (command == "train") return cmd_train(cfg, out, err);
    if (command == "predict") return cmd_predict(cfg, out, err);
    if (command == "evaluate") return cmd_evaluate(cfg, out);
    if (command == "topics") return cmd_topics(cfg, out);
    if (command == "hstats") return cmd_hstats(cfg, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace hbtp::cli

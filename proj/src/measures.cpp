#include "hbtp/measures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "hbtp/error.hpp"
#include "hbtp/gplvm.hpp"

namespace hbtp {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::string padded(char prefix, int i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%0*d", prefix, width, i);
  return buf;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& x) {
  Eigen::VectorXd e = (x.array() - x.maxCoeff()).exp().matrix();
  return e / e.sum();
}

// Transmission records of the graph in a fixed order: (user, predecessor, story).
struct RecordList {
  std::map<UserId, std::vector<std::pair<UserId, StoryId>>> by_user;
};

RecordList collect_records(const UserGraph& g) {
  RecordList rl;
  for (const auto& [pair, stories] : g.pair_stories)
    for (const auto& s : stories) rl.by_user[pair.first].emplace_back(pair.second, s);
  return rl;
}

double lookup_h(const std::map<StoryId, double>& h, const StoryId& s) {
  auto it = h.find(s);
  return it == h.end() ? 0.0 : it->second;
}

// Words for every story given user measures; fills z counts and the corpus.
void sample_words(const UserGraph& graph, const std::map<UserId, Eigen::VectorXd>& user_weights,
                  const Eigen::MatrixXd& phi, const SamplerConfig& cfg, Rng& rng,
                  SyntheticCorpus& out) {
  const int K = static_cast<int>(phi.rows());
  out.corpus.stories.clear();
  out.z_counts.clear();
  for (const auto& [sid, sharers] : graph.sharers) {
    std::vector<UserId> users(sharers.begin(), sharers.end());
    std::uniform_int_distribution<std::size_t> pick(0, users.size() - 1);
    Story story;
    story.id = sid;
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(K);
    for (int n = 0; n < cfg.words_per_story; ++n) {
      const auto& w = users[pick(rng)];
      const int z = sample_categorical(user_weights.at(w), rng);
      const int x = sample_categorical(phi.row(z).transpose(), rng);
      counts(z) += 1.0;
      story.tokens.push_back(x);
    }
    out.z_counts[sid] = counts;
    out.corpus.stories.emplace(sid, std::move(story));
  }
}

Eigen::MatrixXd zbar_matrix(const SyntheticCorpus& sc, int words_per_story,
                            std::vector<StoryId>& order) {
  order.clear();
  for (const auto& [sid, c] : sc.z_counts) order.push_back(sid);
  const int K = sc.z_counts.empty() ? 0 : static_cast<int>(sc.z_counts.begin()->second.size());
  Eigen::MatrixXd zbar(static_cast<Eigen::Index>(order.size()), K);
  for (std::size_t i = 0; i < order.size(); ++i)
    zbar.row(static_cast<Eigen::Index>(i)) =
        sc.z_counts.at(order[i]).transpose() / std::max(1, words_per_story);
  return zbar;
}

void finish_corpus(const UserGraph& graph, int vocab_size, SyntheticCorpus& sc) {
  std::vector<std::string> toks;
  for (int i = 0; i < vocab_size; ++i) toks.push_back(synthetic_token(i));
  sc.corpus.vocab = Vocabulary(std::move(toks));
  sc.corpus.events = graph.events;
  sc.graph = graph;
}

// Runs `pass` once with h = 0 (or the planted values), and for GP
// homogeneity a second time with h drawn from the GP on the first pass's z̄.
template <typename Pass>
SyntheticCorpus run_with_homogeneity(const UserGraph& graph, const Hyper& hyper,
                                     const HomogeneitySource& homogeneity,
                                     const SamplerConfig& cfg, Rng& rng, Pass&& pass) {
  if (const auto* planted = std::get_if<std::map<StoryId, double>>(&homogeneity)) {
    for (const auto& [s, v] : *planted)
      if (!std::isfinite(v)) throw DomainError("homogeneity for story '" + s + "' is not finite");
    SyntheticCorpus sc;
    std::map<StoryId, double> h;
    for (const auto& [sid, _] : graph.sharers) h[sid] = lookup_h(*planted, sid);
    pass(h, sc);
    sc.h = h;
    return sc;
  }
  std::map<StoryId, double> zero;
  for (const auto& [sid, _] : graph.sharers) zero[sid] = 0.0;
  SyntheticCorpus first;
  pass(zero, first);
  std::vector<StoryId> order;
  const Eigen::MatrixXd zbar = zbar_matrix(first, cfg.words_per_story, order);
  const Eigen::VectorXd hv = sample_homogeneity(zbar, hyper.zeta, hyper.kappa, hyper.sigma2, rng);
  std::map<StoryId, double> h;
  for (std::size_t i = 0; i < order.size(); ++i) h[order[i]] = hv(static_cast<Eigen::Index>(i));
  SyntheticCorpus sc;
  pass(h, sc);
  sc.h = h;
  return sc;
}

}  // namespace

void Hyper::validate() const {
  auto require = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string("invalid ") + field + ": must be " + rule);
  };
  require(std::isfinite(alpha) && alpha > 0, "alpha", "> 0");
  require(std::isfinite(beta) && beta > 0, "beta", "> 0");
  require(std::isfinite(alpha0) && alpha0 > 0, "alpha0", "> 0");
  require(std::isfinite(zeta) && zeta >= 0, "zeta", ">= 0");
  require(std::isfinite(kappa) && kappa >= 0, "kappa", ">= 0");
  require(std::isfinite(sigma2) && sigma2 > 0, "sigma2", "> 0");
  require(T >= 1, "T", ">= 1");
}

Eigen::VectorXd stick_weights(const Eigen::VectorXd& V) {
  const Eigen::Index T = V.size();
  if (T == 0) throw DomainError("stick_weights: empty stick");
  for (Eigen::Index k = 0; k < T; ++k)
    if (!(V(k) > 0.0 && V(k) <= 1.0))
      throw DomainError("stick_weights: V[" + std::to_string(k) + "] outside (0,1]");
  if (V(T - 1) != 1.0) throw DomainError("stick_weights: last stick must equal 1");
  Eigen::VectorXd p(T);
  double rest = 1.0;
  for (Eigen::Index k = 0; k < T; ++k) {
    p(k) = V(k) * rest;
    rest *= 1.0 - V(k);
  }
  return p;
}

Eigen::VectorXd normalize_gamma(const Eigen::VectorXd& pi) {
  if ((pi.array() < 0).any() || !pi.allFinite())
    throw DomainError("normalize_gamma: weights must be finite and nonnegative");
  const double total = pi.sum();
  if (!(total > 0)) throw DomainError("normalize_gamma: degenerate measure (all weights zero)");
  return pi / total;
}

Eigen::VectorXd GammaWeights::normalized() const {
  const double m = log_pi.maxCoeff();
  if (!std::isfinite(m)) throw DomainError("normalize_gamma: degenerate measure (all weights zero)");
  Eigen::VectorXd w = (log_pi.array() - m).exp().matrix();
  return w / w.sum();
}

double sample_log_gamma(double shape, Rng& rng) {
  if (!(shape >= 0) || !std::isfinite(shape)) throw DomainError("sample_log_gamma: invalid shape");
  if (shape < kMinGammaShape) return kNegInf;
  if (shape >= 1.0) {
    std::gamma_distribution<double> g(shape, 1.0);
    return std::log(g(rng));
  }
  // Gamma(a) = Gamma(a+1) · U^{1/a}, computed in log space.
  std::gamma_distribution<double> g(shape + 1.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double uu = u(rng);
  while (uu <= 0.0) uu = u(rng);
  return std::log(g(rng)) + std::log(uu) / shape;
}

GammaWeights sample_gamma_weights(const Eigen::VectorXd& shapes, Rng& rng) {
  GammaWeights w;
  w.log_pi.resize(shapes.size());
  for (Eigen::Index k = 0; k < shapes.size(); ++k) w.log_pi(k) = sample_log_gamma(shapes(k), rng);
  return w;
}

Eigen::VectorXd sample_dirichlet(const Eigen::VectorXd& alpha, Rng& rng) {
  return sample_gamma_weights(alpha, rng).normalized();
}

int sample_categorical(const Eigen::VectorXd& weights, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng) * weights.sum();
  double acc = 0.0;
  int last_positive = 0;
  for (Eigen::Index k = 0; k < weights.size(); ++k) {
    if (weights(k) > 0) last_positive = static_cast<int>(k);
    acc += weights(k);
    if (r < acc && weights(k) > 0) return static_cast<int>(k);
  }
  return last_positive;
}

GammaWeights transmit_measure(const Eigen::VectorXd& parent_weights, double h, double beta,
                              Rng& rng) {
  if (!std::isfinite(h)) throw DomainError("transmit_measure: homogeneity is not finite");
  if (!(beta > 0)) throw DomainError("transmit_measure: beta must be positive");
  return sample_gamma_weights(beta * std::exp(h) * parent_weights, rng);
}

Eigen::VectorXd aggregate_user_measure(std::span<const Eigen::VectorXd> transmitted) {
  if (transmitted.empty()) throw DomainError("aggregate_user_measure: no transmitted measures");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(transmitted.front().size());
  for (const auto& w : transmitted) {
    if (w.size() != acc.size()) throw DimensionError("aggregate_user_measure: size mismatch");
    acc += w;
  }
  return acc / static_cast<double>(transmitted.size());
}

std::string synthetic_story_id(int i) { return padded('s', i, 5); }
std::string synthetic_user_id(int i) { return padded('u', i, 6); }
std::string synthetic_token(int i) { return padded('w', i, 5); }

std::vector<Event> synthetic_events(const CascadeSpec& spec, Rng& rng) {
  if (spec.users < 1 || spec.stories < 0 || spec.min_sharers < 1 ||
      spec.max_sharers < spec.min_sharers || spec.max_sharers > spec.users)
    throw ConfigError("synthetic_events: inconsistent cascade spec");
  std::vector<Event> events;
  if (spec.hubs > 0) {
    if (spec.hubs > spec.users) throw ConfigError("synthetic_events: more hubs than users");
    std::vector<std::vector<int>> chains(static_cast<std::size_t>(spec.stories));
    for (int s = 0; s < spec.stories; ++s) {
      const int hub = s % spec.hubs;
      chains[static_cast<std::size_t>(s)].push_back(hub);
      events.push_back({synthetic_user_id(hub), std::nullopt, synthetic_story_id(s)});
    }
    for (int u = spec.hubs; u < spec.users && spec.stories > 0; ++u) {
      const int s = (u - spec.hubs) % spec.stories;
      auto& chain = chains[static_cast<std::size_t>(s)];
      std::uniform_int_distribution<std::size_t> pred(0, chain.size() - 1);
      events.push_back(
          {synthetic_user_id(u), synthetic_user_id(chain[pred(rng)]), synthetic_story_id(s)});
      chain.push_back(u);
    }
    return events;
  }
  std::vector<int> all(static_cast<std::size_t>(spec.users));
  for (int i = 0; i < spec.users; ++i) all[static_cast<std::size_t>(i)] = i;
  std::uniform_int_distribution<int> nshare(spec.min_sharers, spec.max_sharers);
  for (int s = 0; s < spec.stories; ++s) {
    const int n = nshare(rng);
    std::vector<int> chosen;
    std::sample(all.begin(), all.end(), std::back_inserter(chosen), n, rng);
    std::sort(chosen.begin(), chosen.end());
    const auto sid = synthetic_story_id(s);
    events.push_back({synthetic_user_id(chosen[0]), std::nullopt, sid});
    for (std::size_t j = 1; j < chosen.size(); ++j) {
      std::uniform_int_distribution<std::size_t> pred(0, j - 1);
      events.push_back({synthetic_user_id(chosen[j]), synthetic_user_id(chosen[pred(rng)]), sid});
    }
  }
  return events;
}

SyntheticCorpus sample_corpus(const UserGraph& graph, const Hyper& hyper,
                              const HomogeneitySource& homogeneity, const SamplerConfig& cfg,
                              Rng& rng) {
  hyper.validate();
  if (cfg.words_per_story < 1 || cfg.vocab_size < 1)
    throw ConfigError("sample_corpus: counts must be positive");
  const int T = hyper.T;
  const auto order = graph.topological_order();
  const auto records = collect_records(graph);

  Eigen::VectorXd V(T);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int k = 0; k < T - 1; ++k) {
    // Beta(1, α) by inversion; keep strictly inside (0, 1].
    double v = 1.0 - std::pow(1.0 - unif(rng), 1.0 / hyper.alpha);
    V(k) = std::clamp(v, 1e-12, 1.0);
  }
  V(T - 1) = 1.0;
  const Eigen::VectorXd g0 = stick_weights(V);
  Eigen::MatrixXd phi(T, cfg.vocab_size);
  const Eigen::VectorXd a0 = Eigen::VectorXd::Constant(cfg.vocab_size, hyper.alpha0);
  for (int k = 0; k < T; ++k) phi.row(k) = sample_dirichlet(a0, rng).transpose();

  auto pass = [&](const std::map<StoryId, double>& h, SyntheticCorpus& sc) {
    std::map<UserId, Eigen::VectorXd> weights;
    for (const auto& u : order) {
      auto it = records.by_user.find(u);
      if (it == records.by_user.end()) {
        weights[u] = sample_gamma_weights(hyper.beta * g0, rng).normalized();
      } else {
        std::vector<Eigen::VectorXd> transmitted;
        for (const auto& [v, s] : it->second)
          transmitted.push_back(
              transmit_measure(weights.at(v), lookup_h(h, s), hyper.beta, rng).normalized());
        weights[u] = aggregate_user_measure(transmitted);
      }
    }
    sc.phi = phi;
    sc.g0 = g0;
    sc.user_weights = weights;
    sample_words(graph, weights, phi, cfg, rng, sc);
    finish_corpus(graph, cfg.vocab_size, sc);
  };
  return run_with_homogeneity(graph, hyper, homogeneity, cfg, rng, pass);
}

SyntheticCorpus sample_parametric(const UserGraph& graph, int K, const Eigen::VectorXd& mu,
                                  const Eigen::MatrixXd& Sigma, const Hyper& hyper,
                                  const HomogeneitySource& homogeneity,
                                  const SamplerConfig& cfg, Rng& rng) {
  if (K < 1 || mu.size() != K || Sigma.rows() != K || Sigma.cols() != K)
    throw DimensionError("sample_parametric: mu/Sigma must be K-dimensional");
  if (!Sigma.isApprox(Sigma.transpose(), 1e-12))
    throw DomainError("sample_parametric: Sigma is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(Sigma);
  if (llt.info() != Eigen::Success) throw DomainError("sample_parametric: Sigma is not positive definite");
  const Eigen::MatrixXd chol = llt.matrixL();
  const auto order = graph.topological_order();
  const auto records = collect_records(graph);

  Eigen::MatrixXd phi(K, cfg.vocab_size);
  const Eigen::VectorXd a0 = Eigen::VectorXd::Constant(cfg.vocab_size, hyper.alpha0);
  for (int k = 0; k < K; ++k) phi.row(k) = sample_dirichlet(a0, rng).transpose();

  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](const Eigen::VectorXd& mean, double scale) {
    Eigen::VectorXd e(K);
    for (int k = 0; k < K; ++k) e(k) = normal(rng);
    return Eigen::VectorXd(mean + std::sqrt(scale) * (chol * e));
  };

  auto pass = [&](const std::map<StoryId, double>& h, SyntheticCorpus& sc) {
    std::map<UserId, Eigen::VectorXd> theta, weights;
    for (const auto& u : order) {
      auto it = records.by_user.find(u);
      if (it == records.by_user.end()) {
        theta[u] = gaussian(mu, 1.0);
      } else {
        // Equal-weight mixture over predecessors; a pair sharing several
        // stories picks one of them uniformly.
        const auto& preds = graph.predecessors.at(u);
        std::uniform_int_distribution<std::size_t> pick_v(0, preds.size() - 1);
        const auto& v = *std::next(preds.begin(), static_cast<long>(pick_v(rng)));
        const auto& stories = graph.pair_stories.at({u, v});
        std::uniform_int_distribution<std::size_t> pick_s(0, stories.size() - 1);
        const auto& s = *std::next(stories.begin(), static_cast<long>(pick_s(rng)));
        theta[u] = gaussian(theta.at(v), std::exp(-lookup_h(h, s)));
      }
      weights[u] = softmax(theta[u]);
    }
    sc.phi = phi;
    sc.g0 = Eigen::VectorXd::Constant(K, 1.0 / K);
    sc.user_weights = weights;
    sample_words(graph, weights, phi, cfg, rng, sc);
    finish_corpus(graph, cfg.vocab_size, sc);
  };
  return run_with_homogeneity(graph, hyper, homogeneity, cfg, rng, pass);
}

void write_ground_truth(std::ostream& out, const SyntheticCorpus& sc) {
  for (const auto& [sid, counts] : sc.z_counts) {
    nlohmann::json obj;
    obj["id"] = sid;
    obj["h"] = sc.h.count(sid) ? sc.h.at(sid) : 0.0;
    obj["z_counts"] = std::vector<double>(counts.data(), counts.data() + counts.size());
    out << obj.dump() << '\n';
  }
}

}  // namespace hbtp

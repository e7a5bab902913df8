#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>

#include "hbtp/corpus.hpp"
#include "hbtp/measures.hpp"
#include "hbtp/vi.hpp"

namespace hbtp::testing {

inline std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(ranks(a), ranks(b));
}

/// Five-point central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h);
}

inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  return (analytic - numeric).norm() / std::max(numeric.norm(), 1e-12);
}

/// Corpus from literal events and story texts; text tokens are used verbatim
/// (min_count 1).
inline Corpus make_corpus(const std::string& events_tsv, const std::string& stories_jsonl,
                          std::size_t min_count = 1) {
  std::istringstream ev(events_tsv), st(stories_jsonl);
  return parse_corpus(ev, st, min_count);
}

/// Hub cascades: story s is posted by hub s % hubs; every other user
/// reshares exactly one story.
inline std::vector<Event> hub_events(int users, int stories, int hubs, Rng& rng) {
  CascadeSpec spec;
  spec.users = users;
  spec.stories = stories;
  spec.hubs = hubs;
  return synthetic_events(spec, rng);
}

/// Randomizes the variational state away from its initial values so that
/// gradient checks are not run at a symmetric point.
inline void perturb_state(const Model& model, VIState& st, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& g : st.gamma) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (Eigen::Index k = 0; k < g.cols(); ++k) g(i, k) = 0.05 + u(rng);
      g.row(i) /= g.row(i).sum();
    }
  }
  for (Eigen::Index i = 0; i < st.rec_a.size(); ++i) {
    st.rec_a.data()[i] = 0.2 + 2.0 * u(rng);
    st.rec_b.data()[i] = 0.5 + u(rng);
  }
  for (Eigen::Index i = 0; i < st.root_a.size(); ++i) {
    st.root_a.data()[i] = 0.2 + 2.0 * u(rng);
    st.root_b.data()[i] = 0.5 + u(rng);
  }
  for (Eigen::Index i = 0; i < st.eta.size(); ++i) st.eta.data()[i] = 0.1 + 3.0 * u(rng);
  for (Eigen::Index k = 0; k + 1 < st.V.size(); ++k) st.V(k) = 0.2 + 0.6 * u(rng);
  for (Eigen::Index s = 0; s < st.h.size(); ++s) st.h(s) = 0.5 * n(rng);
  for (Eigen::Index i = 0; i < st.lambda.size(); ++i) st.lambda.data()[i] = 0.5 * u(rng);
  reset_bound_points(model, st);
  for (Eigen::Index i = 0; i < st.rec_chi.size(); ++i) st.rec_chi(i) *= 0.7 + 0.6 * u(rng);
  for (Eigen::Index i = 0; i < st.root_chi.size(); ++i) st.root_chi(i) *= 0.7 + 0.6 * u(rng);
}

/// Small random corpus for engine tests.
struct SmallCorpus {
  SyntheticCorpus syn;
  Model model;
};

inline SmallCorpus small_corpus(std::uint64_t seed, int stories = 12, int users = 30, int T = 4,
                                int words = 20, int vocab = 30) {
  Rng rng = substream(seed, "test-corpus");
  CascadeSpec spec;
  spec.users = users;
  spec.stories = stories;
  spec.min_sharers = 2;
  spec.max_sharers = 4;
  const auto events = synthetic_events(spec, rng);
  const UserGraph g = build_user_graph(events, false);
  Hyper hp;
  hp.T = T;
  hp.beta = 5.0;
  SmallCorpus out{sample_corpus(g, hp, GpHomogeneity{}, SamplerConfig{words, vocab}, rng), {}};
  out.model = Model::build(out.syn.corpus, out.syn.graph, T);
  return out;
}

/// Plain truncated-HDP γ sweep written from scratch: each story has a single
/// root sharer whose Gamma factor plays the document-level measure.
/// γ_nk ∝ exp(E ln φ_{k,x_n} + E ln π_k − ln χ − (Σ_j E π_j − χ)/χ).
inline std::vector<Eigen::MatrixXd> hdp_gamma_sweep(const Model& model, const VIState& st) {
  using boost::math::digamma;
  const int T = model.T;
  Eigen::MatrixXd elog_phi(T, st.eta.cols());
  for (int k = 0; k < T; ++k) {
    const double total = digamma(st.eta.row(k).sum());
    for (Eigen::Index v = 0; v < st.eta.cols(); ++v) elog_phi(k, v) = digamma(st.eta(k, v)) - total;
  }
  std::vector<Eigen::MatrixXd> out;
  for (int s = 0; s < model.num_stories(); ++s) {
    const int u = model.story_sharers[static_cast<std::size_t>(s)].at(0);
    const int q = model.root_slot[static_cast<std::size_t>(u)];
    const double chi = st.root_chi(q);
    double mean_sum = 0;
    for (int k = 0; k < T; ++k) mean_sum += st.root_a(q, k) / st.root_b(q, k);
    std::vector<double> elog_pi(static_cast<std::size_t>(T));
    for (int k = 0; k < T; ++k)
      elog_pi[static_cast<std::size_t>(k)] = digamma(st.root_a(q, k)) - std::log(st.root_b(q, k)) -
                                             std::log(chi) - (mean_sum - chi) / chi;
    const auto& toks = model.tokens[static_cast<std::size_t>(s)];
    Eigen::MatrixXd g(static_cast<Eigen::Index>(toks.size()), T);
    for (std::size_t n = 0; n < toks.size(); ++n) {
      double mx = -1e300;
      std::vector<double> logit(static_cast<std::size_t>(T));
      for (int k = 0; k < T; ++k) {
        logit[static_cast<std::size_t>(k)] = elog_phi(k, toks[n]) + elog_pi[static_cast<std::size_t>(k)];
        mx = std::max(mx, logit[static_cast<std::size_t>(k)]);
      }
      double z = 0;
      for (int k = 0; k < T; ++k) z += std::exp(logit[static_cast<std::size_t>(k)] - mx);
      for (int k = 0; k < T; ++k)
        g(static_cast<Eigen::Index>(n), k) = std::exp(logit[static_cast<std::size_t>(k)] - mx) / z;
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Corpus where every story is posted by exactly one user and nobody reshares.
inline Corpus rootless_corpus(int stories, int users, int words, int vocab, int T, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, users - 1);
  std::vector<Event> events;
  for (int s = 0; s < stories; ++s)
    events.push_back({synthetic_user_id(pick(rng)), std::nullopt, synthetic_story_id(s)});
  const UserGraph g = build_user_graph(events, false);
  Hyper hp;
  hp.T = T;
  return sample_corpus(g, hp, std::map<StoryId, double>{}, SamplerConfig{words, vocab}, rng).corpus;
}

}  // namespace hbtp::testing

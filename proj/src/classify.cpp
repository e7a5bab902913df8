#include "hbtp/classify.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <tuple>

#include "hbtp/error.hpp"

namespace hbtp {

namespace {

std::size_t ix(int i) { return static_cast<std::size_t>(i); }

}  // namespace

LabelHead LabelHead::from_state(const VIState& state) {
  if (state.label_heads.size() != kNumLabels)
    throw DomainError("state carries no label heads");
  LabelHead head;
  head.Y = state.inducing.Y;
  for (std::size_t c = 0; c < kNumLabels; ++c) head.classes[c] = state.label_heads[c];
  return head;
}

SupervisedFit train_supervised(const Corpus& corpus, const UserGraph& graph,
                               const std::vector<StoryId>& train, const Hyper& hyper,
                               const InferenceConfig& config) {
  for (const auto& sid : train) {
    auto it = corpus.stories.find(sid);
    if (it == corpus.stories.end()) throw ReferentialError("unknown story id '" + sid + "'");
    if (!it->second.label) throw DomainError("training story '" + sid + "' has no label");
  }
  SupervisedFit out;
  out.model = Model::build(corpus, graph, hyper.T, &train, true);
  FitResult fr = fit(out.model, hyper, config);
  out.state = std::move(fr.state);
  out.trace = std::move(fr.trace);
  out.head = LabelHead::from_state(out.state);
  return out;
}

Label argmax_label(const std::array<double, kNumLabels>& scores) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumLabels; ++c)
    if (scores[c] > scores[best]) best = c;
  return kAllLabels[best];
}

std::array<double, kNumLabels> score_input(const Eigen::VectorXd& lambda_star,
                                           const LabelHead& head, const GpConfig& gp,
                                           double kappa) {
  std::array<double, kNumLabels> scores{};
  for (std::size_t c = 0; c < kNumLabels; ++c)
    scores[c] = predict_latent(lambda_star, InducingSet{head.Y, head.classes[c]}, gp, kappa).mean;
  return scores;
}

std::vector<Prediction> predict_labels(const SupervisedFit& trained, const Corpus& corpus,
                                       const UserGraph& graph,
                                       const std::vector<StoryId>& held_out,
                                       const InferenceConfig& config) {
  config.validate();
  const Model& tm = trained.model;
  const VIState& ts = trained.state;

  std::set<StoryId> held(held_out.begin(), held_out.end());
  for (const auto& sid : held) {
    if (!corpus.stories.count(sid)) throw ReferentialError("unknown story id '" + sid + "'");
    if (tm.story_index.count(sid))
      throw DomainError("held-out story '" + sid + "' is part of the training set");
  }
  std::vector<StoryId> active(tm.story_ids);
  active.insert(active.end(), held.begin(), held.end());
  const Model m = Model::build(corpus, graph, tm.T, &active, false);

  InferenceConfig cfg = config;
  cfg.label_weight = 0.0;
  cfg.G = std::max(1, static_cast<int>(ts.inducing.size()));
  VIState st = init_state(m, ts.hyper, cfg);
  st.gp = ts.gp;
  st.eta = ts.eta;
  st.V = ts.V;
  st.inducing = ts.inducing;
  st.label_heads.clear();
  st.label_weight = 0.0;

  std::vector<bool> free_story(ix(m.num_stories()), false);
  std::vector<int> free_list;
  for (int s = 0; s < m.num_stories(); ++s) {
    auto it = tm.story_index.find(m.story_ids[ix(s)]);
    if (it == tm.story_index.end()) {
      free_story[ix(s)] = true;
      free_list.push_back(s);
      continue;
    }
    st.gamma[ix(s)] = ts.gamma[ix(it->second)];
    st.lambda.row(s) = ts.lambda.row(it->second);
    st.h(s) = ts.h(it->second);
  }
  for (int s : free_list) st.lambda.row(s) = st.gamma[ix(s)].colwise().mean();

  std::map<std::tuple<UserId, UserId, StoryId>, int> trained_records;
  for (int r = 0; r < tm.num_records(); ++r) {
    const Record& rec = tm.records[ix(r)];
    trained_records[{tm.user_ids[ix(rec.user)], tm.user_ids[ix(rec.pred)],
                     tm.story_ids[ix(rec.story)]}] = r;
  }
  std::vector<bool> free_record(ix(m.num_records()), true);
  std::vector<bool> free_root(ix(m.num_roots()), true);
  for (int u : m.user_order) {
    const int slot = m.root_slot[ix(u)];
    if (slot >= 0) {
      auto uit = tm.user_index.find(m.user_ids[ix(u)]);
      const int tslot = uit == tm.user_index.end() ? -1 : tm.root_slot[ix(uit->second)];
      if (tslot >= 0) {
        st.root_a.row(slot) = ts.root_a.row(tslot);
        st.root_b.row(slot) = ts.root_b.row(tslot);
        free_root[ix(slot)] = false;
      } else {
        st.root_a.row(slot) = root_prior_shape(st).transpose();
        st.root_b.row(slot).setOnes();
      }
      continue;
    }
    for (int r : m.user_records[ix(u)]) {
      const Record& rec = m.records[ix(r)];
      auto it = trained_records.find(
          {m.user_ids[ix(rec.user)], m.user_ids[ix(rec.pred)], m.story_ids[ix(rec.story)]});
      if (it != trained_records.end()) {
        st.rec_a.row(r) = ts.rec_a.row(it->second);
        st.rec_b.row(r) = ts.rec_b.row(it->second);
        free_record[ix(r)] = false;
      } else {
        st.rec_a.row(r) = record_prior_shape(m, st, r).transpose();
        st.rec_b.row(r).setOnes();
      }
    }
  }
  reset_bound_points(m, st);

  double prev = elbo(m, st, cfg.threads);
  for (int it = 0; it < kFoldInSweeps && !free_list.empty(); ++it) {
    reset_bound_points(m, st);
    update_all_gamma(m, st, cfg.threads, &free_list);
    for (int u : m.user_order) {
      const int slot = m.root_slot[ix(u)];
      if (slot >= 0) {
        if (free_root[ix(slot)]) update_root_pi(m, st, slot, cfg.max_halvings);
        continue;
      }
      for (int r : m.user_records[ix(u)])
        if (free_record[ix(r)]) update_pi(m, st, r, cfg.max_halvings);
    }
    update_lambda(m, st, cfg.step_lambda, cfg.inner_iters, cfg.max_halvings, cfg.threads,
                  &free_story);
    if (cfg.update_h)
      update_h(m, st, cfg.step_h, cfg.inner_iters, cfg.max_halvings, &free_story);
    const double cur = elbo(m, st, cfg.threads);
    const double rel = std::abs(cur - prev) / std::max(std::abs(prev), 1e-300);
    prev = cur;
    if (rel < cfg.tol) break;
  }

  std::vector<Prediction> out;
  for (const auto& sid : held) {
    Prediction p;
    p.story = sid;
    auto it = m.story_index.find(sid);
    if (it == m.story_index.end()) {
      p.scores.fill(std::numeric_limits<double>::quiet_NaN());
    } else {
      p.scores = score_input(st.lambda.row(it->second).transpose(), trained.head, st.gp,
                             st.hyper.kappa);
      p.label = argmax_label(p.scores);
    }
    out.push_back(std::move(p));
  }
  return out;
}

Metrics evaluate(const std::map<StoryId, std::optional<Label>>& predicted,
                 const std::map<StoryId, Label>& truth) {
  if (predicted.size() != truth.size())
    throw DomainError("prediction and truth cover different story sets");
  Metrics m;
  std::array<std::size_t, kNumLabels> truth_count{}, predicted_count{}, hits{};
  for (const auto& [sid, label] : truth) {
    auto it = predicted.find(sid);
    if (it == predicted.end())
      throw DomainError("story '" + sid + "' has truth but no prediction");
    const auto t = static_cast<std::size_t>(label);
    ++truth_count[t];
    ++m.total;
    if (!it->second) {
      ++m.skipped;
      continue;
    }
    const auto p = static_cast<std::size_t>(*it->second);
    ++m.confusion[t][p];
    ++predicted_count[p];
    if (t == p) ++hits[t];
  }
  std::size_t correct = 0;
  for (std::size_t c = 0; c < kNumLabels; ++c) {
    correct += hits[c];
    const double precision =
        predicted_count[c] ? static_cast<double>(hits[c]) / static_cast<double>(predicted_count[c]) : 0.0;
    const double recall =
        truth_count[c] ? static_cast<double>(hits[c]) / static_cast<double>(truth_count[c]) : 0.0;
    m.f1[c] = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  m.accuracy = m.total ? static_cast<double>(correct) / static_cast<double>(m.total) : 0.0;
  return m;
}

void write_predictions(std::ostream& out, const std::vector<Prediction>& predictions) {
  out << "story_id\tpredicted_label\tscore_T\tscore_F\tscore_NR\tscore_U\n";
  out << std::setprecision(10);
  for (const auto& p : predictions) {
    out << p.story << '\t' << (p.label ? label_name(*p.label) : std::string("skipped"));
    for (double s : p.scores) out << '\t' << s;
    out << '\n';
  }
}

void write_metrics(std::ostream& out, const Metrics& m) {
  out << std::fixed << std::setprecision(4);
  out << "accuracy\t" << m.accuracy << '\n';
  out << "total\t" << m.total << '\n';
  out << "skipped\t" << m.skipped << '\n';
  for (std::size_t c = 0; c < kNumLabels; ++c)
    out << "f1\t" << label_name(kAllLabels[c]) << '\t' << m.f1[c] << '\n';
  out << "confusion";
  for (Label l : kAllLabels) out << '\t' << label_name(l);
  out << '\n';
  for (std::size_t t = 0; t < kNumLabels; ++t) {
    out << label_name(kAllLabels[t]);
    for (std::size_t p = 0; p < kNumLabels; ++p) out << '\t' << m.confusion[t][p];
    out << '\n';
  }
}

}  // namespace hbtp

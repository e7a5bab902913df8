#include <algorithm>
#include <cmath>
#include <queue>
#include <set>
#include <tuple>

#include "hbtp/error.hpp"
#include "hbtp/vi.hpp"

namespace hbtp {

std::size_t Model::num_tokens() const {
  std::size_t n = 0;
  for (const auto& t : tokens) n += t.size();
  return n;
}

Model Model::build(const Corpus& corpus, const UserGraph& graph, int T,
                   const std::vector<StoryId>* active, bool with_labels) {
  if (T < 1) throw ConfigError("invalid T: must be >= 1");
  Model m;
  m.T = T;
  m.vocab_size = static_cast<int>(corpus.vocab.size());

  std::set<StoryId> wanted;
  if (active) {
    wanted.insert(active->begin(), active->end());
  } else {
    for (const auto& [sid, _] : corpus.stories) wanted.insert(sid);
  }
  for (const auto& sid : wanted) {
    auto it = corpus.stories.find(sid);
    if (it == corpus.stories.end()) throw ReferentialError("unknown story id '" + sid + "'");
    auto sh = graph.sharers.find(sid);
    if (it->second.tokens.empty() || sh == graph.sharers.end() || sh->second.empty()) continue;
    if (with_labels && !it->second.label)
      throw DomainError("story '" + sid + "' is unlabeled but labels are required");
    m.story_index[sid] = static_cast<int>(m.story_ids.size());
    m.story_ids.push_back(sid);
    m.tokens.push_back(it->second.tokens);
  }

  std::set<UserId> users;
  for (const auto& sid : m.story_ids)
    for (const auto& u : graph.sharers.at(sid)) users.insert(u);
  for (const auto& u : users) {
    m.user_index[u] = static_cast<int>(m.user_ids.size());
    m.user_ids.push_back(u);
  }
  const int M = m.num_users(), L = m.num_stories();
  m.user_records.assign(static_cast<std::size_t>(M), {});
  m.children.assign(static_cast<std::size_t>(M), {});
  m.user_stories.assign(static_cast<std::size_t>(M), {});
  m.story_records.assign(static_cast<std::size_t>(L), {});
  m.story_sharers.assign(static_cast<std::size_t>(L), {});

  std::set<std::tuple<int, int, int>> seen;
  for (const auto& e : graph.events) {
    if (!e.predecessor) continue;
    auto sit = m.story_index.find(e.story);
    if (sit == m.story_index.end()) continue;
    const int u = m.user_index.at(e.user), v = m.user_index.at(*e.predecessor), s = sit->second;
    if (!seen.emplace(u, v, s).second) continue;
  }
  for (const auto& [u, v, s] : seen) {
    const int r = static_cast<int>(m.records.size());
    m.records.push_back({u, v, s});
    m.user_records[static_cast<std::size_t>(u)].push_back(r);
    m.children[static_cast<std::size_t>(v)].push_back(r);
    m.story_records[static_cast<std::size_t>(s)].push_back(r);
  }
  for (int s = 0; s < L; ++s) {
    for (const auto& uid : graph.sharers.at(m.story_ids[static_cast<std::size_t>(s)])) {
      const int u = m.user_index.at(uid);
      m.story_sharers[static_cast<std::size_t>(s)].push_back(u);
      m.user_stories[static_cast<std::size_t>(u)].push_back(s);
    }
  }
  m.root_slot.assign(static_cast<std::size_t>(M), -1);
  for (int u = 0; u < M; ++u) {
    if (m.user_records[static_cast<std::size_t>(u)].empty()) {
      m.root_slot[static_cast<std::size_t>(u)] = static_cast<int>(m.root_users.size());
      m.root_users.push_back(u);
    }
  }

  // Kahn order restricted to the active records.
  std::vector<int> indegree(static_cast<std::size_t>(M), 0);
  std::vector<std::set<int>> preds(static_cast<std::size_t>(M)), succ(static_cast<std::size_t>(M));
  for (const auto& r : m.records) {
    if (preds[static_cast<std::size_t>(r.user)].insert(r.pred).second) {
      ++indegree[static_cast<std::size_t>(r.user)];
      succ[static_cast<std::size_t>(r.pred)].insert(r.user);
    }
  }
  std::queue<int> ready;
  for (int u = 0; u < M; ++u)
    if (indegree[static_cast<std::size_t>(u)] == 0) ready.push(u);
  while (!ready.empty()) {
    const int u = ready.front();
    ready.pop();
    m.user_order.push_back(u);
    for (int c : succ[static_cast<std::size_t>(u)])
      if (--indegree[static_cast<std::size_t>(c)] == 0) ready.push(c);
  }
  if (static_cast<int>(m.user_order.size()) != M)
    throw CycleError("predecessor graph of the active stories contains a cycle");

  if (with_labels) {
    m.label_targets = Eigen::MatrixXd::Constant(L, static_cast<Eigen::Index>(kNumLabels), -1.0);
    for (int s = 0; s < L; ++s) {
      const auto& story = corpus.stories.at(m.story_ids[static_cast<std::size_t>(s)]);
      m.label_targets(s, static_cast<Eigen::Index>(*story.label)) = 1.0;
    }
  }
  return m;
}

void InferenceConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string("invalid ") + field + ": must be " + rule);
  };
  require(G >= 1, "G", ">= 1");
  require(std::isfinite(input_variance) && input_variance > 0, "xi", "> 0");
  require(std::isfinite(jitter) && jitter >= 0, "jitter", ">= 0");
  require(max_iters >= 0, "max_iters", ">= 0");
  require(std::isfinite(tol) && tol >= 0, "tol", ">= 0");
  require(step_V > 0 && step_h > 0 && step_lambda > 0, "step", "> 0");
  require(inner_iters >= 0, "inner_iters", ">= 0");
  require(max_halvings >= 0, "max_halvings", ">= 0");
  require(std::isfinite(eta_noise) && eta_noise >= 0, "eta_noise", ">= 0");
  require(std::isfinite(label_weight) && label_weight >= 0, "label_weight", ">= 0");
  require(threads >= 1, "threads", ">= 1");
}

}  // namespace hbtp

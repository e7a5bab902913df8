#include "hbtp/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <queue>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hbtp/error.hpp"
#include "hbtp/rng.hpp"

namespace hbtp {

namespace {

constexpr std::array<std::string_view, kNumLabels> kLabelNames = {"true", "false", "non-rumor",
                                                                 "unverified"};

bool is_token_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

struct RawStory {
  StoryId id;
  std::vector<std::string> tokens;
  std::optional<Label> label;
};

std::vector<RawStory> parse_raw_stories(std::istream& in, const std::string& name) {
  std::vector<RawStory> out;
  std::set<StoryId> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(name, lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(name, lineno, "expected a JSON object");
    if (!obj.contains("id") || !obj["id"].is_string())
      throw ParseError(name, lineno, "missing string field 'id'");
    if (!obj.contains("text") || !obj["text"].is_string())
      throw ParseError(name, lineno, "missing string field 'text'");
    RawStory s;
    s.id = obj["id"].get<std::string>();
    if (s.id.empty()) throw ParseError(name, lineno, "empty story id");
    if (!seen.insert(s.id).second)
      throw ParseError(name, lineno, "duplicate story id '" + s.id + "'");
    s.tokens = tokenize(obj["text"].get<std::string>());
    if (obj.contains("label") && !obj["label"].is_null()) {
      if (!obj["label"].is_string()) throw ParseError(name, lineno, "label must be a string or null");
      auto l = parse_label(obj["label"].get<std::string>());
      if (!l) throw ParseError(name, lineno, "unknown label '" + obj["label"].get<std::string>() + "'");
      s.label = *l;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::string_view label_name(Label l) { return kLabelNames[static_cast<std::size_t>(l)]; }

std::optional<Label> parse_label(std::string_view s) {
  for (std::size_t i = 0; i < kNumLabels; ++i)
    if (s == kLabelNames[i]) return static_cast<Label>(i);
  return std::nullopt;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<VocabIndex>(i)).second)
      throw DomainError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

std::optional<VocabIndex> Vocabulary::find(std::string_view tok) const {
  auto it = index_.find(std::string(tok));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.size() >= 2) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (is_token_char(c)) {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    } else {
      flush();
    }
  }
  flush();
  return out;
}

std::vector<VocabIndex> encode(const Vocabulary& vocab, std::string_view text) {
  std::vector<VocabIndex> out;
  for (const auto& t : tokenize(text))
    if (auto i = vocab.find(t)) out.push_back(*i);
  return out;
}

std::string detokenize(const Vocabulary& vocab, const std::vector<VocabIndex>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(tokens[i]);
  }
  return out;
}

std::size_t Corpus::num_tokens() const {
  std::size_t n = 0;
  for (const auto& [id, s] : stories) n += s.length();
  return n;
}

std::array<std::size_t, kNumLabels> Corpus::label_counts() const {
  std::array<std::size_t, kNumLabels> c{};
  for (const auto& [id, s] : stories)
    if (s.label) ++c[static_cast<std::size_t>(*s.label)];
  return c;
}

std::vector<Event> parse_events(std::istream& in, const std::string& name) {
  std::vector<Event> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 3) throw ParseError(name, lineno, "expected 3 tab-separated fields, got " + std::to_string(f.size()));
    if (f[0].empty() || f[1].empty() || f[2].empty()) throw ParseError(name, lineno, "empty field");
    Event e;
    e.user = std::string(f[0]);
    if (f[1] != "-") e.predecessor = std::string(f[1]);
    e.story = std::string(f[2]);
    if (e.predecessor && *e.predecessor == e.user)
      throw ParseError(name, lineno, "user '" + e.user + "' cites itself as predecessor");
    out.push_back(std::move(e));
  }
  return out;
}

Corpus parse_corpus(std::istream& events, std::istream& stories, std::size_t min_count,
                    const std::string& events_name, const std::string& stories_name) {
  Corpus corpus;
  corpus.events = parse_events(events, events_name);
  auto raw = parse_raw_stories(stories, stories_name);

  std::map<std::string, std::size_t> counts;
  for (const auto& s : raw)
    for (const auto& t : s.tokens) ++counts[t];
  std::vector<std::string> kept;
  for (const auto& [tok, c] : counts)
    if (c >= min_count) kept.push_back(tok);  // std::map iterates in lexicographic order
  corpus.vocab = Vocabulary(std::move(kept));

  for (auto& r : raw) {
    Story s;
    s.id = r.id;
    s.label = r.label;
    for (const auto& t : r.tokens)
      if (auto i = corpus.vocab.find(t)) s.tokens.push_back(*i);
    corpus.stories.emplace(s.id, std::move(s));
  }
  for (const auto& e : corpus.events)
    if (!corpus.stories.count(e.story))
      throw ReferentialError("event cites unknown story id '" + e.story + "'");
  return corpus;
}

Corpus load_events(const std::filesystem::path& events_path,
                   const std::filesystem::path& stories_path, std::size_t min_count) {
  std::ifstream ev(events_path);
  if (!ev) throw Error("cannot open events file " + events_path.string());
  std::ifstream st(stories_path);
  if (!st) throw Error("cannot open stories file " + stories_path.string());
  return parse_corpus(ev, st, min_count, events_path.string(), stories_path.string());
}

void write_events(std::ostream& out, const std::vector<Event>& events) {
  for (const auto& e : events)
    out << e.user << '\t' << (e.predecessor ? *e.predecessor : std::string("-")) << '\t' << e.story
        << '\n';
}

void write_stories(std::ostream& out, const std::map<StoryId, Story>& stories,
                   const Vocabulary& vocab) {
  for (const auto& [id, s] : stories) {
    nlohmann::json obj;
    obj["id"] = id;
    obj["text"] = detokenize(vocab, s.tokens);
    obj["label"] = s.label ? nlohmann::json(std::string(label_name(*s.label))) : nlohmann::json();
    out << obj.dump() << '\n';
  }
}

void write_vocabulary(std::ostream& out, const Vocabulary& vocab) {
  for (const auto& t : vocab.tokens()) out << t << '\n';
}

std::vector<UserId> UserGraph::topological_order() const {
  std::map<UserId, std::size_t> indegree;
  std::map<UserId, std::vector<UserId>> children;
  for (const auto& u : users) indegree[u] = 0;
  for (const auto& [u, preds] : predecessors) {
    indegree[u] = preds.size();
    for (const auto& v : preds) children[v].push_back(u);
  }
  std::queue<UserId> ready;
  for (const auto& [u, d] : indegree)
    if (d == 0) ready.push(u);
  std::vector<UserId> order;
  while (!ready.empty()) {
    auto u = ready.front();
    ready.pop();
    order.push_back(u);
    for (const auto& c : children[u])
      if (--indegree[c] == 0) ready.push(c);
  }
  if (order.size() != users.size()) throw CycleError("predecessor graph contains a cycle");
  return order;
}

namespace {

// Returns one cycle as a user sequence (first user repeated at the end).
std::vector<UserId> find_cycle(const std::map<UserId, std::set<UserId>>& preds) {
  std::map<UserId, int> color;  // 0 white, 1 on stack, 2 done
  std::vector<UserId> stack;
  std::vector<UserId> cycle;
  std::function<bool(const UserId&)> visit = [&](const UserId& u) {
    color[u] = 1;
    stack.push_back(u);
    if (auto it = preds.find(u); it != preds.end()) {
      for (const auto& v : it->second) {
        if (color[v] == 1) {
          auto pos = std::find(stack.begin(), stack.end(), v);
          cycle.assign(pos, stack.end());
          std::reverse(cycle.begin(), cycle.end());  // report in v -> u direction
          cycle.push_back(cycle.front());
          return true;
        }
        if (color[v] == 0 && visit(v)) return true;
      }
    }
    stack.pop_back();
    color[u] = 2;
    return false;
  };
  for (const auto& [u, _] : preds)
    if (color[u] == 0 && visit(u)) return cycle;
  return cycle;
}

}  // namespace

UserGraph build_user_graph(const std::vector<Event>& events, bool prune_leaves) {
  if (events.empty()) throw DomainError("build_user_graph: no events");
  UserGraph g;
  std::vector<bool> keep(events.size(), true);
  if (prune_leaves) {
    std::map<UserId, std::size_t> n_events, n_cited;
    for (const auto& e : events) {
      ++n_events[e.user];
      if (e.predecessor) ++n_cited[*e.predecessor];
    }
    std::set<UserId> leaves;
    for (std::size_t i = 0; i < events.size(); ++i) {
      const auto& e = events[i];
      if (n_events[e.user] == 1 && !e.predecessor && n_cited[e.user] == 0) {
        keep[i] = false;
        leaves.insert(e.user);
        ++g.pruned_events;
      }
    }
    g.pruned_users = leaves.size();
  }
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (!keep[i]) continue;
    const auto& e = events[i];
    g.events.push_back(e);
    g.users.insert(e.user);
    g.sharers[e.story].insert(e.user);
    if (e.predecessor) {
      g.users.insert(*e.predecessor);
      g.sharers[e.story].insert(*e.predecessor);
      g.predecessors[e.user].insert(*e.predecessor);
      g.pair_stories[{e.user, *e.predecessor}].insert(e.story);
    }
  }
  try {
    (void)g.topological_order();
  } catch (const CycleError&) {
    auto cyc = find_cycle(g.predecessors);
    std::string msg = "predecessor graph contains a cycle: ";
    for (std::size_t i = 0; i < cyc.size(); ++i) msg += (i ? " -> " : "") + cyc[i];
    throw CycleError(msg);
  }
  return g;
}

std::vector<StoryId> FoldAssignment::stories_in(int f) const {
  std::vector<StoryId> out;
  for (const auto& [id, ff] : fold)
    if (ff == f) out.push_back(id);
  return out;
}

std::vector<StoryId> FoldAssignment::stories_not_in(int f) const {
  std::vector<StoryId> out;
  for (const auto& [id, ff] : fold)
    if (ff != f) out.push_back(id);
  return out;
}

FoldAssignment split_folds(const std::map<StoryId, Story>& stories, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("split_folds: k must be >= 2");
  std::array<std::vector<StoryId>, kNumLabels> strata;
  for (const auto& [id, s] : stories) {
    if (!s.label) throw ConfigError("split_folds: story '" + id + "' is unlabeled");
    strata[static_cast<std::size_t>(*s.label)].push_back(id);
  }
  for (std::size_t l = 0; l < kNumLabels; ++l) {
    if (!strata[l].empty() && strata[l].size() < static_cast<std::size_t>(k))
      throw ConfigError("split_folds: k=" + std::to_string(k) + " exceeds the size of label stratum '" +
                        std::string(label_name(static_cast<Label>(l))) + "' (" +
                        std::to_string(strata[l].size()) + ")");
  }
  FoldAssignment fa;
  fa.k = k;
  auto rng = substream(seed, "folds");
  std::size_t offset = 0;
  for (auto& stratum : strata) {
    std::shuffle(stratum.begin(), stratum.end(), rng);
    for (std::size_t i = 0; i < stratum.size(); ++i)
      fa.fold[stratum[i]] = static_cast<int>((offset + i) % static_cast<std::size_t>(k));
    offset += stratum.size();
  }
  return fa;
}

}  // namespace hbtp

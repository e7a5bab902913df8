#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hbtp {

using UserId = std::string;
using StoryId = std::string;
using VocabIndex = std::int32_t;

// Fixed class order; classify relies on it for tie-breaking.
enum class Label : int { True = 0, False = 1, NonRumor = 2, Unverified = 3 };
inline constexpr std::size_t kNumLabels = 4;
inline constexpr std::array<Label, kNumLabels> kAllLabels = {
    Label::True, Label::False, Label::NonRumor, Label::Unverified};

std::string_view label_name(Label l);
std::optional<Label> parse_label(std::string_view s);

/// A tweet (no predecessor) or a retweet of `predecessor`'s post of `story`.
struct Event {
  UserId user;
  std::optional<UserId> predecessor;
  StoryId story;

  bool operator==(const Event&) const = default;
};

struct Story {
  StoryId id;
  std::vector<VocabIndex> tokens;
  std::optional<Label> label;

  std::size_t length() const { return tokens.size(); }
  bool operator==(const Story&) const = default;
};

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(VocabIndex i) const { return tokens_.at(static_cast<std::size_t>(i)); }
  std::optional<VocabIndex> find(std::string_view tok) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, VocabIndex> index_;
};

/// Lowercase, split on non-alphanumeric ASCII, drop tokens shorter than 2.
/// Bytes >= 0x80 are kept as token characters so UTF-8 words survive.
std::vector<std::string> tokenize(std::string_view text);

/// Maps raw tokens through a fixed vocabulary, dropping unknown ones.
std::vector<VocabIndex> encode(const Vocabulary& vocab, std::string_view text);
std::string detokenize(const Vocabulary& vocab, const std::vector<VocabIndex>& tokens);

struct Corpus {
  std::vector<Event> events;
  std::map<StoryId, Story> stories;
  Vocabulary vocab;

  std::size_t num_tokens() const;
  std::array<std::size_t, kNumLabels> label_counts() const;
};

/// Reads the events TSV and the stories JSON-lines file. The vocabulary is
/// built from all stories in the same pass (tokens occurring fewer than
/// `min_count` times in the whole file are dropped).
Corpus load_events(const std::filesystem::path& events_path,
                   const std::filesystem::path& stories_path, std::size_t min_count = 2);

/// Stream variants; `name` is used in parse-error messages.
std::vector<Event> parse_events(std::istream& in, const std::string& name = "<events>");
Corpus parse_corpus(std::istream& events, std::istream& stories, std::size_t min_count = 2,
                    const std::string& events_name = "<events>",
                    const std::string& stories_name = "<stories>");

void write_events(std::ostream& out, const std::vector<Event>& events);
void write_stories(std::ostream& out, const std::map<StoryId, Story>& stories,
                   const Vocabulary& vocab);
void write_vocabulary(std::ostream& out, const Vocabulary& vocab);

struct UserGraph {
  std::set<UserId> users;
  // 𝔸_u; only users with at least one predecessor appear as keys.
  std::map<UserId, std::set<UserId>> predecessors;
  // s^(u,v); a pair may co-share several stories.
  std::map<std::pair<UserId, UserId>, std::set<StoryId>> pair_stories;
  // 𝕌_s, including predecessors cited by events of s.
  std::map<StoryId, std::set<UserId>> sharers;
  // Events surviving pruning, in input order.
  std::vector<Event> events;
  std::size_t pruned_users = 0;
  std::size_t pruned_events = 0;

  std::size_t num_users() const { return users.size(); }
  /// Kahn order over v -> u edges; predecessors come first.
  std::vector<UserId> topological_order() const;
};

/// Builds 𝔸_u, s^(u,v), 𝕌_s and verifies the predecessor graph is acyclic.
/// With `prune_leaves`, users whose only event is an original post and who
/// are never cited as a predecessor are dropped with their event (one pass).
UserGraph build_user_graph(const std::vector<Event>& events, bool prune_leaves);

struct FoldAssignment {
  std::map<StoryId, int> fold;
  int k = 0;

  std::vector<StoryId> stories_in(int f) const;
  std::vector<StoryId> stories_not_in(int f) const;
};

/// Label-stratified k-fold split, deterministic for a given seed.
FoldAssignment split_folds(const std::map<StoryId, Story>& stories, int k, std::uint64_t seed);

}  // namespace hbtp

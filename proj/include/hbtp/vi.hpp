#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hbtp/corpus.hpp"
#include "hbtp/gplvm.hpp"
#include "hbtp/measures.hpp"

namespace hbtp {

/// One transmission π^(u,v) per distinct (user, predecessor, story).
struct Record {
  int user = 0;
  int pred = 0;
  int story = 0;
};

/// Integer-indexed view of a corpus restricted to a set of active stories.
/// Stories without tokens or without sharers are left out.
struct Model {
  int T = 1;
  int vocab_size = 0;

  std::vector<StoryId> story_ids;
  std::map<StoryId, int> story_index;
  std::vector<std::vector<VocabIndex>> tokens;

  std::vector<UserId> user_ids;
  std::map<UserId, int> user_index;
  std::vector<int> root_slot;   // per user: row in the root factors, or -1
  std::vector<int> root_users;  // per root row: user index

  std::vector<Record> records;
  std::vector<std::vector<int>> user_records;   // R_u
  std::vector<std::vector<int>> children;       // records whose predecessor is u
  std::vector<std::vector<int>> story_records;  // records with s^(u,v) = s
  std::vector<std::vector<int>> story_sharers;  // 𝕌_s
  std::vector<std::vector<int>> user_stories;   // stories u helped spread
  std::vector<int> user_order;                  // predecessors first

  // ±1 one-vs-rest targets (L x 4); empty unless built with labels.
  Eigen::MatrixXd label_targets;

  int num_stories() const { return static_cast<int>(story_ids.size()); }
  int num_users() const { return static_cast<int>(user_ids.size()); }
  int num_records() const { return static_cast<int>(records.size()); }
  int num_roots() const { return static_cast<int>(root_users.size()); }
  std::size_t num_tokens() const;

  static Model build(const Corpus& corpus, const UserGraph& graph, int T,
                     const std::vector<StoryId>* active = nullptr, bool with_labels = false);
};

struct InferenceConfig {
  int G = 50;                  // inducing points (capped at the story count)
  double input_variance = 10;  // ξ^{-1}
  double jitter = 1e-6;
  int max_iters = 200;
  double tol = 1e-5;
  double step_V = 1e-2;
  double step_h = 1e-2;
  double step_lambda = 1e-2;
  int inner_iters = 5;
  int max_halvings = 10;
  double eta_noise = 1.0;  // init noise, in units of the mean count per η entry
  double label_weight = 1.0;
  bool update_h = true;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct VIState {
  Hyper hyper;
  GpConfig gp;

  std::vector<Eigen::MatrixXd> gamma;  // per story: N_s x T
  Eigen::MatrixXd rec_a, rec_b;        // records x T
  Eigen::VectorXd rec_chi;
  Eigen::MatrixXd root_a, root_b;  // roots x T
  Eigen::VectorXd root_chi;
  Eigen::MatrixXd eta;  // T x |V|
  Eigen::VectorXd V;    // stick point estimate, V_T = 1
  Eigen::VectorXd h;    // per story
  Eigen::MatrixXd lambda;  // L x T
  InducingSet inducing;    // homogeneity head
  std::vector<InducingPosterior> label_heads;  // empty or one per Label
  double label_weight = 0.0;
};

VIState init_state(const Model& model, const Hyper& hyper, const InferenceConfig& config);

// Expected aggregated normalized weights p^(u) of a user's measure.
Eigen::VectorXd user_mean_weights(const Model& model, const VIState& state, int user);
// Gamma prior shapes βe^h p^(v) of a record, and βp(V) for roots.
Eigen::VectorXd record_prior_shape(const Model& model, const VIState& state, int record);
Eigen::VectorXd root_prior_shape(const VIState& state);

/// Sets every χ bound point to Σ_k E[π_k], where the bound is tight.
void reset_bound_points(const Model& model, VIState& state);

/// γ update of one story's words (sequential over words).
void update_gamma(const Model& model, VIState& state, int story);
void update_all_gamma(const Model& model, VIState& state, int threads = 1,
                      const std::vector<int>* stories = nullptr);

/// Conjugate (a, b) update of one record / root factor, damped so that the
/// ELBO does not decrease through the children's dependence on p^(u).
/// Returns the accepted interpolation fraction (1 = full conjugate step).
double update_pi(const Model& model, VIState& state, int record, int max_halvings = 10);
double update_root_pi(const Model& model, VIState& state, int root, int max_halvings = 10);
void update_all_pi(const Model& model, VIState& state, int max_halvings = 10);

void update_eta(const Model& model, VIState& state);
void update_V(const Model& model, VIState& state, double step, int iters, int max_halvings = 10);
/// `free_stories`, when given, restricts the h / λ updates to the marked
/// stories; the others are held fixed.
void update_h(const Model& model, VIState& state, double step, int iters, int max_halvings = 10,
              const std::vector<bool>* free_stories = nullptr);
void update_lambda(const Model& model, VIState& state, double step, int iters,
                   int max_halvings = 10, int threads = 1,
                   const std::vector<bool>* free_stories = nullptr);
void update_gp_head(const Model& model, VIState& state, int threads = 1);

struct ElboTerms {
  double words = 0;         // Σ γ E[ln φ]
  double topics = 0;        // Σ γ E[ln p(z | π)] with the χ bound
  double z_entropy = 0;
  double transmissions = 0; // −KL of record factors
  double roots = 0;         // −KL of root factors
  double phi = 0;           // E[ln p(φ)] − E[ln q(φ)]
  double sticks = 0;        // ln p(V)
  double inputs = 0;        // E[ln p(c | z)] − E[ln q(c)]
  double gp_homogeneity = 0;
  double gp_labels = 0;

  double total() const;
};

ElboTerms elbo_terms(const Model& model, const VIState& state, int threads = 1);
/// Throws DivergenceError naming the first nonfinite term.
double elbo(const Model& model, const VIState& state, int threads = 1);

// Analytic gradients of elbo() with respect to the gradient-updated blocks.
Eigen::VectorXd grad_V(const Model& model, const VIState& state);
Eigen::VectorXd grad_h(const Model& model, const VIState& state);
Eigen::MatrixXd grad_lambda(const Model& model, const VIState& state, int threads = 1);

struct TraceEntry {
  int sweep = 0;
  double elbo = 0;
  double seconds = 0;
};
using ElboTrace = std::vector<TraceEntry>;

/// One full coordinate-ascent sweep in the fixed order
/// γ → (a,b) → η → V → ψ → GP heads → λ → h.
void sweep(const Model& model, VIState& state, const InferenceConfig& config);

/// Only the text-modeling part of a sweep (γ, (a,b), η).
void text_sweep(const Model& model, VIState& state, const InferenceConfig& config);

struct FitResult {
  VIState state;
  ElboTrace trace;
};

FitResult fit(const Model& model, const Hyper& hyper, const InferenceConfig& config);
/// Continues from `state`; sweep numbers in the trace start after `trace`.
void resume_fit(const Model& model, VIState& state, ElboTrace& trace,
                const InferenceConfig& config);

// --- checkpoints -----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  int sweeps = 0;
  double last_elbo = 0.0;
  bool supervised = false;
  InferenceConfig config;
  std::vector<std::string> vocabulary;
};

void save_checkpoint(const std::string& path, const Model& model, const VIState& state,
                     const CheckpointMeta& meta);

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<StoryId> stories;
  std::vector<UserId> users;
  std::vector<std::array<std::string, 3>> records;  // user, predecessor, story
  std::vector<UserId> roots;
  VIState state;
};

Checkpoint load_checkpoint(const std::string& path);
/// Verifies the checkpoint was written for `model` (same index tables).
void check_compatible(const Checkpoint& cp, const Model& model);

}  // namespace hbtp

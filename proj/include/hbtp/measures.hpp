#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "hbtp/corpus.hpp"
#include "hbtp/rng.hpp"

namespace hbtp {

/// Model hyperparameters. H is the symmetric Dirichlet(alpha0) over the
/// vocabulary; T is the truncation level of both DP levels.
struct Hyper {
  double alpha = 1.0;   // first-level concentration
  double beta = 1.0;    // second-level concentration
  double alpha0 = 0.1;  // topic Dirichlet parameter
  double zeta = 10.0;   // hidden-input precision; 0 disables the block
  double kappa = 10.0;  // homogeneity noise precision; 0 disables the GP bound
  double sigma2 = 1.0;  // kernel variance
  int T = 50;

  void validate() const;  // throws ConfigError naming the field
};

// Shapes below this are treated as exact zeros when sampling.
inline constexpr double kMinGammaShape = 1e-8;

/// p_k = V_k ∏_{j<k} (1 - V_j). Requires V_k ∈ (0,1] and V_T = 1.
Eigen::VectorXd stick_weights(const Eigen::VectorXd& V);

/// π / Σπ. Throws DomainError when Σπ = 0.
Eigen::VectorXd normalize_gamma(const Eigen::VectorXd& pi);

/// Independent Gamma(shape_k, 1) draws kept in log space so that
/// normalization survives underflow at small shapes.
struct GammaWeights {
  Eigen::VectorXd log_pi;  // -inf marks an exact zero

  Eigen::VectorXd pi() const { return log_pi.array().exp().matrix(); }
  Eigen::VectorXd normalized() const;
};

double sample_log_gamma(double shape, Rng& rng);
GammaWeights sample_gamma_weights(const Eigen::VectorXd& shapes, Rng& rng);
Eigen::VectorXd sample_dirichlet(const Eigen::VectorXd& alpha, Rng& rng);
int sample_categorical(const Eigen::VectorXd& weights, Rng& rng);

/// π_k ~ Gamma(β e^h p_k, 1): user u's measure transmitted from a parent
/// measure with weights p.
GammaWeights transmit_measure(const Eigen::VectorXd& parent_weights, double h, double beta,
                              Rng& rng);

/// Coordinate-wise mean of transmitted measures (G_u).
Eigen::VectorXd aggregate_user_measure(std::span<const Eigen::VectorXd> transmitted);

/// Random cascades whose predecessor edges always point from a lower to a
/// higher user index, so the result is acyclic by construction.
/// With hubs > 0, story s is posted by hub s % hubs and every other user
/// reshares exactly one story (sharer counts then follow from users/stories).
struct CascadeSpec {
  int users = 150;
  int stories = 60;
  int min_sharers = 2;
  int max_sharers = 6;
  int hubs = 0;
};
std::vector<Event> synthetic_events(const CascadeSpec& spec, Rng& rng);

std::string synthetic_story_id(int i);
std::string synthetic_user_id(int i);
std::string synthetic_token(int i);

struct SamplerConfig {
  int words_per_story = 50;
  int vocab_size = 200;
};

/// Either planted per-story homogeneity values, or draw them from the GP.
struct GpHomogeneity {};
using HomogeneitySource = std::variant<std::map<StoryId, double>, GpHomogeneity>;

struct SyntheticCorpus {
  Corpus corpus;
  UserGraph graph;
  Eigen::MatrixXd phi;                          // topics x vocab
  Eigen::VectorXd g0;                           // first-level weights
  std::map<StoryId, double> h;
  std::map<StoryId, Eigen::VectorXd> z_counts;  // per-topic word counts
  std::map<UserId, Eigen::VectorXd> user_weights;
};

/// Nonparametric HBTP forward sampler.
SyntheticCorpus sample_corpus(const UserGraph& graph, const Hyper& hyper,
                              const HomogeneitySource& homogeneity, const SamplerConfig& config,
                              Rng& rng);

/// Parametric (logistic-normal) counterpart with K topics.
SyntheticCorpus sample_parametric(const UserGraph& graph, int K, const Eigen::VectorXd& mu,
                                  const Eigen::MatrixXd& Sigma, const Hyper& hyper,
                                  const HomogeneitySource& homogeneity,
                                  const SamplerConfig& config, Rng& rng);

/// JSON-lines sidecar: {"id":..., "h":..., "z_counts":[...]} per story.
void write_ground_truth(std::ostream& out, const SyntheticCorpus& sc);

}  // namespace hbtp

#pragma once

#include <array>
#include <map>
#include <optional>
#include <ostream>
#include <vector>

#include "hbtp/corpus.hpp"
#include "hbtp/vi.hpp"

namespace hbtp {

/// One-vs-rest GP regression heads on ±1 targets, one per class in the fixed
/// order of kAllLabels, sharing inducing locations with the homogeneity head.
struct LabelHead {
  Eigen::MatrixXd Y;
  std::array<InducingPosterior, kNumLabels> classes;

  static LabelHead from_state(const VIState& state);
};

struct SupervisedFit {
  Model model;
  VIState state;
  ElboTrace trace;
  LabelHead head;
};

/// Joint fit of the topic/cascade model and the label heads. Every training
/// story must carry a label.
SupervisedFit train_supervised(const Corpus& corpus, const UserGraph& graph,
                               const std::vector<StoryId>& train, const Hyper& hyper,
                               const InferenceConfig& config);

struct Prediction {
  StoryId story;
  std::optional<Label> label;  // empty when the story was skipped
  std::array<double, kNumLabels> scores{};
};

/// Index of the largest score; ties go to the earliest class.
Label argmax_label(const std::array<double, kNumLabels>& scores);

/// Class scores at a fixed input λ*.
std::array<double, kNumLabels> score_input(const Eigen::VectorXd& lambda_star,
                                           const LabelHead& head, const GpConfig& gp,
                                           double kappa);

inline constexpr int kFoldInSweeps = 50;

/// Folds the held-out stories into a frozen trained model and predicts their
/// labels. Only held-out γ, λ, h and the (a, b) factors that exist solely
/// because of held-out cascades are fitted. Stories without tokens or sharers
/// are returned with an empty label.
std::vector<Prediction> predict_labels(const SupervisedFit& trained, const Corpus& corpus,
                                       const UserGraph& graph,
                                       const std::vector<StoryId>& held_out,
                                       const InferenceConfig& config);

struct Metrics {
  double accuracy = 0.0;
  std::array<double, kNumLabels> f1{};
  std::array<std::array<std::size_t, kNumLabels>, kNumLabels> confusion{};  // [truth][predicted]
  std::size_t total = 0;
  std::size_t skipped = 0;
};

/// Skipped stories (empty prediction) count as errors. Throws DomainError when
/// the two maps do not cover the same stories.
Metrics evaluate(const std::map<StoryId, std::optional<Label>>& predicted,
                 const std::map<StoryId, Label>& truth);

void write_predictions(std::ostream& out, const std::vector<Prediction>& predictions);
void write_metrics(std::ostream& out, const Metrics& metrics);

}  // namespace hbtp

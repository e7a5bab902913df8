#pragma once

#include <Eigen/Dense>

#include "hbtp/rng.hpp"

namespace hbtp {

/// Squared-exponential kernel with unit lengthscale.
struct GpConfig {
  double sigma2 = 1.0;
  double jitter = 1e-6;          // relative to sigma2, added to K_GG's diagonal
  double input_variance = 10.0;  // ξ^{-1} of q(c^(s)); ξ = 0.1
};

double se_kernel(const Eigen::VectorXd& c, const Eigen::VectorXd& c2, double sigma2);

/// Rows of A against rows of B.
Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double sigma2);

/// K_GG plus jitter·σ² on the diagonal.
Eigen::MatrixXd inducing_kernel(const Eigen::MatrixXd& Y, const GpConfig& cfg);

struct InducingPosterior {
  Eigen::VectorXd mu;
  Eigen::MatrixXd Sigma;
};

struct InducingSet {
  Eigen::MatrixXd Y;  // G x T
  InducingPosterior posterior;

  Eigen::Index size() const { return Y.rows(); }
};

/// Variational means λ (L x T) of the hidden inputs, with shared variance ξ^{-1}.
struct LatentInputs {
  Eigen::MatrixXd lambda;
  double input_variance = 10.0;
};

struct PsiStats {
  double psi0 = 0.0;
  Eigen::MatrixXd psi1;  // L x G
  Eigen::MatrixXd psi2;  // G x G, summed over stories
};

Eigen::VectorXd psi1_row(const Eigen::VectorXd& lambda, const Eigen::MatrixXd& Y, double sigma2,
                         double input_variance);
Eigen::MatrixXd psi2_story(const Eigen::VectorXd& lambda, const Eigen::MatrixXd& Y, double sigma2,
                           double input_variance);
PsiStats psi_statistics(const LatentInputs& latents, const Eigen::MatrixXd& Y, double sigma2,
                        int threads = 1);

/// W = κI − κ²ψ1(κψ2 + K_GG)^{-1}ψ1ᵀ.
Eigen::MatrixXd compute_W(const Eigen::MatrixXd& psi1, const Eigen::MatrixXd& psi2,
                          const Eigen::MatrixXd& Kgg, double kappa);

/// Optimal Gaussian q(y) given ψ statistics and regression targets.
InducingPosterior update_inducing_posterior(const Eigen::MatrixXd& psi1,
                                            const Eigen::MatrixXd& psi2,
                                            const Eigen::MatrixXd& Kgg, double kappa,
                                            const Eigen::VectorXd& targets);

/// Prior q(y) = N(0, K_GG).
InducingPosterior prior_posterior(const Eigen::MatrixXd& Kgg);

struct LatentPrediction {
  double mean = 0.0;
  double variance = 0.0;
};

/// Predictive distribution of a target (f plus κ^{-1} noise) at input λ*.
LatentPrediction predict_latent(const Eigen::VectorXd& lambda_star, const InducingSet& inducing,
                                const GpConfig& cfg, double kappa);

/// c ~ N(z̄, ζ^{-1}I), f ~ N(0, K(c)), h ~ N(f, κ^{-1}I).
Eigen::VectorXd sample_homogeneity(const Eigen::MatrixXd& zbar, double zeta, double kappa,
                                   double sigma2, Rng& rng);

/// k-means++ seeding followed by Lloyd iterations; returns G centers.
Eigen::MatrixXd kmeans_pp(const Eigen::MatrixXd& points, int G, Rng& rng, int lloyd_iters = 10);

/// Collapsed sparse-GP bound on E_q[ln p(targets | c)] and its gradients.
struct GpBound {
  double value = 0.0;
  Eigen::VectorXd d_targets;  // −W·targets
  Eigen::MatrixXd d_lambda;   // L x T, only when requested
};

GpBound collapsed_bound(const LatentInputs& latents, const Eigen::MatrixXd& Y, const PsiStats& psi,
                        const Eigen::MatrixXd& Kgg, double sigma2, double kappa,
                        const Eigen::VectorXd& targets, bool want_lambda_grad);

}  // namespace hbtp

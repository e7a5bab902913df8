#include "hbtp/gplvm.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "hbtp/error.hpp"
#include "hbtp/parallel.hpp"

namespace hbtp {

namespace {

Eigen::LLT<Eigen::MatrixXd> factor(const Eigen::MatrixXd& M, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() != Eigen::Success)
    throw ConditioningError(std::string(what) + ": matrix is not positive definite");
  return llt;
}

void check_finite(const Eigen::MatrixXd& M, const char* what) {
  if (!M.allFinite()) throw DomainError(std::string(what) + ": nonfinite input");
}

}  // namespace

double se_kernel(const Eigen::VectorXd& c, const Eigen::VectorXd& c2, double sigma2) {
  if (c.size() != c2.size()) throw DimensionError("se_kernel: input sizes differ");
  if (!c.allFinite() || !c2.allFinite() || !std::isfinite(sigma2))
    throw DomainError("se_kernel: nonfinite input");
  return sigma2 * std::exp(-0.5 * (c - c2).squaredNorm());
}

Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double sigma2) {
  if (A.cols() != B.cols()) throw DimensionError("kernel_matrix: input dimensions differ");
  Eigen::MatrixXd K(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < B.rows(); ++j)
      K(i, j) = sigma2 * std::exp(-0.5 * (A.row(i) - B.row(j)).squaredNorm());
  return K;
}

Eigen::MatrixXd inducing_kernel(const Eigen::MatrixXd& Y, const GpConfig& cfg) {
  Eigen::MatrixXd K = kernel_matrix(Y, Y, cfg.sigma2);
  K.diagonal().array() += cfg.jitter * cfg.sigma2;
  return K;
}

Eigen::VectorXd psi1_row(const Eigen::VectorXd& lambda, const Eigen::MatrixXd& Y, double sigma2,
                         double input_variance) {
  const double s = input_variance + 1.0;
  const double T = static_cast<double>(lambda.size());
  const double norm = sigma2 * std::pow(s, -0.5 * T);
  Eigen::VectorXd out(Y.rows());
  for (Eigen::Index g = 0; g < Y.rows(); ++g)
    out(g) = norm * std::exp(-0.5 * (lambda.transpose() - Y.row(g)).squaredNorm() / s);
  return out;
}

Eigen::MatrixXd psi2_story(const Eigen::VectorXd& lambda, const Eigen::MatrixXd& Y, double sigma2,
                           double input_variance) {
  const double s = 2.0 * input_variance + 1.0;
  const double T = static_cast<double>(lambda.size());
  const double norm = sigma2 * sigma2 * std::pow(s, -0.5 * T);
  const Eigen::Index G = Y.rows();
  Eigen::MatrixXd out(G, G);
  for (Eigen::Index g = 0; g < G; ++g) {
    for (Eigen::Index g2 = g; g2 < G; ++g2) {
      const auto diff = Y.row(g) - Y.row(g2);
      const auto mid = 0.5 * (Y.row(g) + Y.row(g2));
      const double e =
          -0.25 * diff.squaredNorm() - (lambda.transpose() - mid).squaredNorm() / s;
      out(g, g2) = out(g2, g) = norm * std::exp(e);
    }
  }
  return out;
}

PsiStats psi_statistics(const LatentInputs& latents, const Eigen::MatrixXd& Y, double sigma2,
                        int threads) {
  const auto& lam = latents.lambda;
  if (lam.rows() > 0 && lam.cols() != Y.cols())
    throw DimensionError("psi_statistics: latent dimension " + std::to_string(lam.cols()) +
                         " != inducing dimension " + std::to_string(Y.cols()));
  check_finite(lam, "psi_statistics");
  const Eigen::Index L = lam.rows(), G = Y.rows();
  PsiStats ps;
  ps.psi0 = static_cast<double>(L) * sigma2;
  ps.psi1.resize(L, G);
  ps.psi2 = Eigen::MatrixXd::Zero(G, G);
  // Fixed-size blocks summed in index order keep the result independent of
  // the thread count.
  constexpr Eigen::Index kBlock = 32;
  const Eigen::Index nblocks = (L + kBlock - 1) / kBlock;
  std::vector<Eigen::MatrixXd> partial(static_cast<std::size_t>(nblocks));
  parallel_for(static_cast<std::size_t>(nblocks), threads, [&](std::size_t b) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(G, G);
    const Eigen::Index begin = static_cast<Eigen::Index>(b) * kBlock;
    const Eigen::Index end = std::min(L, begin + kBlock);
    for (Eigen::Index s = begin; s < end; ++s) {
      const Eigen::VectorXd l = lam.row(s).transpose();
      ps.psi1.row(s) = psi1_row(l, Y, sigma2, latents.input_variance).transpose();
      acc += psi2_story(l, Y, sigma2, latents.input_variance);
    }
    partial[b] = std::move(acc);
  });
  for (const auto& p : partial) ps.psi2 += p;
  return ps;
}

Eigen::MatrixXd compute_W(const Eigen::MatrixXd& psi1, const Eigen::MatrixXd& psi2,
                          const Eigen::MatrixXd& Kgg, double kappa) {
  if (psi2.rows() != Kgg.rows() || psi1.cols() != Kgg.rows())
    throw DimensionError("compute_W: shape mismatch");
  const Eigen::Index L = psi1.rows();
  Eigen::MatrixXd A = kappa * psi2 + Kgg;
  auto llt = factor(A, "compute_W");
  Eigen::MatrixXd W = kappa * Eigen::MatrixXd::Identity(L, L) -
                      kappa * kappa * psi1 * llt.solve(psi1.transpose());
  return W;
}

InducingPosterior update_inducing_posterior(const Eigen::MatrixXd& psi1,
                                            const Eigen::MatrixXd& psi2,
                                            const Eigen::MatrixXd& Kgg, double kappa,
                                            const Eigen::VectorXd& targets) {
  if (psi1.rows() != targets.size()) throw DimensionError("update_inducing_posterior: target size");
  if (psi2.rows() != Kgg.rows() || psi1.cols() != Kgg.rows())
    throw DimensionError("update_inducing_posterior: shape mismatch");
  // Σ = (K⁻¹ + κK⁻¹ψ2K⁻¹)⁻¹ = K (κψ2 + K)⁻¹ K,  μ = κΣK⁻¹ψ1ᵀh = κK(κψ2 + K)⁻¹ψ1ᵀh.
  Eigen::MatrixXd A = kappa * psi2 + Kgg;
  auto llt = factor(A, "update_inducing_posterior");
  InducingPosterior post;
  post.Sigma = Kgg * llt.solve(Kgg);
  post.Sigma = 0.5 * (post.Sigma + post.Sigma.transpose()).eval();
  post.mu = kappa * (Kgg * llt.solve(psi1.transpose() * targets));
  return post;
}

InducingPosterior prior_posterior(const Eigen::MatrixXd& Kgg) {
  return {Eigen::VectorXd::Zero(Kgg.rows()), Kgg};
}

LatentPrediction predict_latent(const Eigen::VectorXd& lambda_star, const InducingSet& inducing,
                                const GpConfig& cfg, double kappa) {
  const auto& Y = inducing.Y;
  if (lambda_star.size() != Y.cols()) throw DimensionError("predict_latent: input dimension");
  const Eigen::MatrixXd Kgg = inducing_kernel(Y, cfg);
  auto llt = factor(Kgg, "predict_latent");
  Eigen::VectorXd k(Y.rows());
  for (Eigen::Index g = 0; g < Y.rows(); ++g)
    k(g) = cfg.sigma2 * std::exp(-0.5 * (lambda_star.transpose() - Y.row(g)).squaredNorm());
  const Eigen::VectorXd a = llt.solve(k);  // K⁻¹k*
  LatentPrediction p;
  p.mean = a.dot(inducing.posterior.mu);
  p.variance = cfg.sigma2 - k.dot(a) + a.dot(inducing.posterior.Sigma * a);
  p.variance += kappa > 0 ? 1.0 / kappa : std::numeric_limits<double>::infinity();
  return p;
}

Eigen::VectorXd sample_homogeneity(const Eigen::MatrixXd& zbar, double zeta, double kappa,
                                   double sigma2, Rng& rng) {
  check_finite(zbar, "sample_homogeneity");
  const Eigen::Index L = zbar.rows();
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd c = zbar;
  if (std::isfinite(zeta) && zeta > 0) {
    const double sd = 1.0 / std::sqrt(zeta);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] += sd * normal(rng);
  }
  Eigen::MatrixXd K = kernel_matrix(c, c, sigma2);
  // Identical inputs make K singular; an eigen-based square root handles PSD.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::VectorXd eps(L);
  for (Eigen::Index i = 0; i < L; ++i) eps(i) = normal(rng);
  Eigen::VectorXd f = es.eigenvectors() * ev.asDiagonal() * eps;
  Eigen::VectorXd h = f;
  if (std::isfinite(kappa) && kappa > 0) {
    const double sd = 1.0 / std::sqrt(kappa);
    for (Eigen::Index i = 0; i < L; ++i) h(i) += sd * normal(rng);
  }
  return h;
}

Eigen::MatrixXd kmeans_pp(const Eigen::MatrixXd& points, int G, Rng& rng, int lloyd_iters) {
  const Eigen::Index n = points.rows();
  if (G <= 0 || G > n) throw DomainError("kmeans_pp: need 0 < G <= number of points");
  Eigen::MatrixXd centers(G, points.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = points.row(pick(rng));
  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2(i) = (points.row(i) - centers.row(0)).squaredNorm();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int g = 1; g < G; ++g) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total <= 0) {
      chosen = pick(rng);
    } else {
      double r = unif(rng) * total, acc = 0.0;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc >= r && d2(i) > 0) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(g) = points.row(chosen);
    for (Eigen::Index i = 0; i < n; ++i)
      d2(i) = std::min(d2(i), (points.row(i) - centers.row(g)).squaredNorm());
  }
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < lloyd_iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centers.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
      assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(G, points.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(G);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      counts(assign[static_cast<std::size_t>(i)]) += 1.0;
    }
    for (int g = 0; g < G; ++g)
      if (counts(g) > 0) centers.row(g) = sums.row(g) / counts(g);
  }
  return centers;
}

GpBound collapsed_bound(const LatentInputs& latents, const Eigen::MatrixXd& Y, const PsiStats& psi,
                        const Eigen::MatrixXd& Kgg, double sigma2, double kappa,
                        const Eigen::VectorXd& targets, bool want_lambda_grad) {
  const Eigen::Index L = psi.psi1.rows(), G = Kgg.rows();
  GpBound out;
  out.d_targets = Eigen::VectorXd::Zero(L);
  if (want_lambda_grad) out.d_lambda = Eigen::MatrixXd::Zero(L, latents.lambda.cols());
  if (kappa <= 0 || L == 0) return out;
  if (targets.size() != L) throw DimensionError("collapsed_bound: target size");

  auto kllt = factor(Kgg, "collapsed_bound K_GG");
  Eigen::MatrixXd A = kappa * psi.psi2 + Kgg;
  auto allt = factor(A, "collapsed_bound κψ2+K_GG");
  const double logdet_K = 2.0 * kllt.matrixLLT().diagonal().array().log().sum();
  const double logdet_A = 2.0 * allt.matrixLLT().diagonal().array().log().sum();
  const Eigen::VectorXd proj = psi.psi1.transpose() * targets;  // ψ1ᵀh
  const Eigen::VectorXd m = allt.solve(proj);
  const Eigen::MatrixXd Kinv = kllt.solve(Eigen::MatrixXd::Identity(G, G));
  const double Ld = static_cast<double>(L);

  out.value = 0.5 * Ld * std::log(kappa) - 0.5 * Ld * std::log(2.0 * std::numbers::pi) +
              0.5 * logdet_K - 0.5 * logdet_A - 0.5 * kappa * targets.squaredNorm() +
              0.5 * kappa * kappa * proj.dot(m) - 0.5 * kappa * psi.psi0 +
              0.5 * kappa * (Kinv.cwiseProduct(psi.psi2)).sum();
  out.d_targets = -kappa * targets + kappa * kappa * (psi.psi1 * m);

  if (want_lambda_grad) {
    const Eigen::MatrixXd Ainv = allt.solve(Eigen::MatrixXd::Identity(G, G));
    // dF = κ² hᵀ dψ1 m + tr(dψ2 B)
    Eigen::MatrixXd B = 0.5 * kappa * (Kinv - Ainv) - 0.5 * kappa * kappa * kappa * m * m.transpose();
    B = 0.5 * (B + B.transpose()).eval();
    const double iv = latents.input_variance;
    const double s1 = iv + 1.0, s2 = 2.0 * iv + 1.0;
    const Eigen::Index T = latents.lambda.cols();
    for (Eigen::Index s = 0; s < L; ++s) {
      const Eigen::VectorXd l = latents.lambda.row(s).transpose();
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(T);
      const double coef1 = kappa * kappa * targets(s);
      if (coef1 != 0.0) {
        for (Eigen::Index g = 0; g < G; ++g) {
          const double w = coef1 * psi.psi1(s, g) * m(g) / s1;
          grad -= w * (l - Y.row(g).transpose());
        }
      }
      const Eigen::MatrixXd p2 = psi2_story(l, Y, sigma2, iv);
      // Σ_gg' w_gg' (λ − (Y_g + Y_g')/2) with w symmetric.
      const Eigen::MatrixXd w = p2.cwiseProduct(B) * (2.0 / s2);
      const Eigen::VectorXd rows = w.rowwise().sum();
      grad -= rows.sum() * l - Y.transpose() * rows;
      out.d_lambda.row(s) = grad.transpose();
    }
  }
  return out;
}

}  // namespace hbtp

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "hbtp/error.hpp"
#include "hbtp/parallel.hpp"
#include "hbtp/special.hpp"
#include "hbtp/vi.hpp"

namespace hbtp {

namespace {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

std::size_t ix(int i) { return static_cast<std::size_t>(i); }

double kl_gamma(double a, double b, double A) {
  return (a - A) * digamma(a) - log_gamma(a) + log_gamma(A) + A * std::log(b) +
         a * (1.0 - b) / b;
}

double kl_row(const RowVectorXd& a, const RowVectorXd& b, const VectorXd& A) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) s += kl_gamma(a(k), b(k), A(k));
  return s;
}

VectorXd clamp_shape(const VectorXd& A) { return A.cwiseMax(kMinGammaShape); }

// E[ln π_k] − ln χ − (Σ E[π] − χ)/χ
RowVectorXd factor_ell(const RowVectorXd& a, const RowVectorXd& b, double chi) {
  const double total = (a.array() / b.array()).sum();
  const double corr = -std::log(chi) - (total - chi) / chi;
  RowVectorXd out(a.size());
  for (Eigen::Index k = 0; k < a.size(); ++k) out(k) = digamma(a(k)) - std::log(b(k)) + corr;
  return out;
}

RowVectorXd normalized_mean(const RowVectorXd& a, const RowVectorXd& b) {
  RowVectorXd m = a.array() / b.array();
  return m / m.sum();
}

MatrixXd user_log_weights(const Model& model, const VIState& st) {
  MatrixXd out = MatrixXd::Zero(model.num_users(), model.T);
  for (int u = 0; u < model.num_users(); ++u) {
    const int slot = model.root_slot[ix(u)];
    if (slot >= 0) {
      out.row(u) = factor_ell(st.root_a.row(slot), st.root_b.row(slot), st.root_chi(slot));
    } else {
      const auto& recs = model.user_records[ix(u)];
      for (int r : recs) out.row(u) += factor_ell(st.rec_a.row(r), st.rec_b.row(r), st.rec_chi(r));
      out.row(u) /= static_cast<double>(recs.size());
    }
  }
  return out;
}

RowVectorXd story_log_weight(const Model& model, const MatrixXd& ulw, int s) {
  RowVectorXd out = RowVectorXd::Zero(model.T);
  const auto& sh = model.story_sharers[ix(s)];
  for (int u : sh) out += ulw.row(u);
  return out / static_cast<double>(sh.size());
}

MatrixXd story_counts(const Model& model, const VIState& st) {
  MatrixXd n(model.num_stories(), model.T);
  for (int s = 0; s < model.num_stories(); ++s) n.row(s) = st.gamma[ix(s)].colwise().sum();
  return n;
}

RowVectorXd user_count_direct(const Model& model, const VIState& st, int u) {
  RowVectorXd c = RowVectorXd::Zero(model.T);
  for (int s : model.user_stories[ix(u)])
    c += st.gamma[ix(s)].colwise().sum() / static_cast<double>(model.story_sharers[ix(s)].size());
  return c;
}

RowVectorXd user_count_row(const Model& model, const MatrixXd& nsk, int u) {
  RowVectorXd c = RowVectorXd::Zero(model.T);
  for (int s : model.user_stories[ix(u)])
    c += nsk.row(s) / static_cast<double>(model.story_sharers[ix(s)].size());
  return c;
}

MatrixXd elog_phi(const VIState& st) {
  MatrixXd out(st.eta.rows(), st.eta.cols());
  for (Eigen::Index k = 0; k < st.eta.rows(); ++k) {
    const double dsum = digamma(st.eta.row(k).sum());
    for (Eigen::Index v = 0; v < st.eta.cols(); ++v) out(k, v) = digamma(st.eta(k, v)) - dsum;
  }
  return out;
}

MatrixXd all_user_mean_weights(const Model& model, const VIState& st) {
  MatrixXd P(model.num_users(), model.T);
  for (int u = 0; u < model.num_users(); ++u)
    P.row(u) = user_mean_weights(model, st, u).transpose();
  return P;
}

MatrixXd zbar_matrix(const Model& model, const VIState& st) {
  MatrixXd z(model.num_stories(), model.T);
  for (int s = 0; s < model.num_stories(); ++s) z.row(s) = st.gamma[ix(s)].colwise().mean();
  return z;
}

void update_story_words(const Model& model, VIState& st, int s, const RowVectorXd& slw,
                        const MatrixXd& elp) {
  MatrixXd& g = st.gamma[ix(s)];
  const auto& toks = model.tokens[ix(s)];
  const Eigen::Index N = g.rows();
  const double Nd = static_cast<double>(N), zeta = st.hyper.zeta;
  RowVectorXd base = slw;
  if (zeta > 0) base += (zeta / Nd) * st.lambda.row(s);
  const double quad = zeta > 0 ? zeta / (2.0 * Nd * Nd) : 0.0;
  RowVectorXd S = g.colwise().sum();
  RowVectorXd logits(model.T);
  for (Eigen::Index n = 0; n < N; ++n) {
    S -= g.row(n);
    logits = elp.col(toks[ix(static_cast<int>(n))]).transpose() + base;
    if (quad > 0) logits.array() -= quad * (1.0 + 2.0 * S.array());
    const double mx = logits.maxCoeff();
    RowVectorXd p = (logits.array() - mx).exp();
    p /= p.sum();
    g.row(n) = p;
    S += p;
  }
}

// Ascent on an objective with backtracking; the step doubles after each
// accepted move and halves on each rejection.
template <typename X, typename Obj, typename Grad, typename Proj>
void ascend(X& x, Obj&& objective, Grad&& gradient, Proj&& project, double step, int iters,
            int max_halvings, const char* block) {
  double t = step;
  double f0 = objective(x);
  for (int it = 0; it < iters; ++it) {
    const X g = gradient(x);
    if (!g.allFinite()) throw DivergenceError(std::string("nonfinite gradient in ") + block);
    if (g.squaredNorm() == 0.0) return;
    bool accepted = false;
    for (int hv = 0; hv <= max_halvings; ++hv) {
      X trial = project(X(x + t * g));
      const double f1 = objective(trial);
      if (std::isfinite(f1) && f1 >= f0) {
        x = std::move(trial);
        f0 = f1;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) return;
    t = std::min(2.0 * t, 1e8 * step);
  }
}

double sticks_term(const VectorXd& V, double alpha) {
  double s = 0.0;
  for (Eigen::Index k = 0; k + 1 < V.size(); ++k)
    s += std::log(alpha) + (alpha - 1.0) * std::log1p(-V(k));
  return s;
}

double roots_term(const Model& model, const VIState& st, const VectorXd& V) {
  const VectorXd A = clamp_shape(st.hyper.beta * stick_weights(V));
  double s = 0.0;
  for (int q = 0; q < model.num_roots(); ++q) s -= kl_row(st.root_a.row(q), st.root_b.row(q), A);
  return s;
}

double transmissions_term(const Model& model, const VIState& st, const MatrixXd& P,
                          const VectorXd& h) {
  double s = 0.0;
  for (int r = 0; r < model.num_records(); ++r) {
    const Record& rec = model.records[ix(r)];
    const VectorXd A =
        clamp_shape(st.hyper.beta * std::exp(h(rec.story)) * P.row(rec.pred).transpose());
    s -= kl_row(st.rec_a.row(r), st.rec_b.row(r), A);
  }
  return s;
}

double inputs_term(const Model& model, const VIState& st, const MatrixXd& lambda,
                   const MatrixXd& zbar) {
  const double zeta = st.hyper.zeta;
  if (zeta <= 0) return 0.0;
  const double T = model.T, iv = st.gp.input_variance;
  double s = 0.0;
  for (int j = 0; j < model.num_stories(); ++j) {
    const MatrixXd& g = st.gamma[ix(j)];
    const double N = static_cast<double>(g.rows());
    const double var = (g.array() * (1.0 - g.array())).sum() / (N * N);
    s += 0.5 * T * std::log(zeta / (2.0 * std::numbers::pi)) -
         0.5 * zeta * (T * iv + (lambda.row(j) - zbar.row(j)).squaredNorm() + var) +
         0.5 * T * (1.0 + std::log(2.0 * std::numbers::pi * iv));
  }
  return s;
}

bool gp_active(const Model& model, const VIState& st) {
  return st.hyper.kappa > 0 && model.num_stories() > 0 && st.inducing.size() > 0;
}

bool labels_active(const Model& model, const VIState& st) {
  return gp_active(model, st) && st.label_weight > 0 &&
         model.label_targets.rows() == model.num_stories() &&
         model.label_targets.cols() == static_cast<Eigen::Index>(kNumLabels);
}

struct GpParts {
  double homogeneity = 0.0;
  double labels = 0.0;
  MatrixXd d_lambda;
  VectorXd d_h;
};

GpParts gp_parts(const Model& model, const VIState& st, const MatrixXd& lambda,
                 const VectorXd& h, bool want_lambda_grad, int threads) {
  GpParts out;
  out.d_h = VectorXd::Zero(model.num_stories());
  if (want_lambda_grad) out.d_lambda = MatrixXd::Zero(model.num_stories(), model.T);
  if (!gp_active(model, st)) return out;
  const LatentInputs latents{lambda, st.gp.input_variance};
  const MatrixXd& Y = st.inducing.Y;
  const MatrixXd Kgg = inducing_kernel(Y, st.gp);
  const PsiStats psi = psi_statistics(latents, Y, st.gp.sigma2, threads);
  GpBound hb = collapsed_bound(latents, Y, psi, Kgg, st.gp.sigma2, st.hyper.kappa, h,
                               want_lambda_grad);
  out.homogeneity = hb.value;
  out.d_h = hb.d_targets;
  if (want_lambda_grad) out.d_lambda = hb.d_lambda;
  if (labels_active(model, st)) {
    for (Eigen::Index c = 0; c < model.label_targets.cols(); ++c) {
      GpBound lb = collapsed_bound(latents, Y, psi, Kgg, st.gp.sigma2, st.hyper.kappa,
                                   model.label_targets.col(c), want_lambda_grad);
      out.labels += st.label_weight * lb.value;
      if (want_lambda_grad) out.d_lambda += st.label_weight * lb.d_lambda;
    }
  }
  return out;
}

VectorXd transmission_grad_h(const Model& model, const VIState& st, const MatrixXd& P,
                             const VectorXd& h) {
  VectorXd g = VectorXd::Zero(model.num_stories());
  for (int r = 0; r < model.num_records(); ++r) {
    const Record& rec = model.records[ix(r)];
    const double scale = st.hyper.beta * std::exp(h(rec.story));
    for (int k = 0; k < model.T; ++k) {
      const double A = scale * P(rec.pred, k);
      if (A < kMinGammaShape) continue;
      const double a = st.rec_a(r, k), b = st.rec_b(r, k);
      g(rec.story) += A * (digamma(a) - std::log(b) - digamma(A));
    }
  }
  return g;
}

VectorXd grad_V_at(const Model& model, const VIState& st, const VectorXd& V) {
  const int T = model.T;
  VectorXd grad = VectorXd::Zero(T);
  if (T < 2) return grad;
  const double beta = st.hyper.beta, alpha = st.hyper.alpha;
  const VectorXd p = stick_weights(V);
  VectorXd g = VectorXd::Zero(T);
  for (int k = 0; k < T; ++k) {
    const double A = beta * p(k);
    if (A < kMinGammaShape) continue;
    double acc = 0.0;
    const double dA = digamma(A);
    for (int q = 0; q < model.num_roots(); ++q)
      acc += digamma(st.root_a(q, k)) - std::log(st.root_b(q, k)) - dA;
    g(k) = beta * acc * p(k);
  }
  // suffix sums of g over j > k
  double tail = 0.0;
  for (int k = T - 1; k >= 0; --k) {
    if (k < T - 1) grad(k) = -(alpha - 1.0) / (1.0 - V(k)) + g(k) / V(k) - tail / (1.0 - V(k));
    tail += g(k);
  }
  return grad;
}

}  // namespace

// --- state -------------------------------------------------------------------

Eigen::VectorXd user_mean_weights(const Model& model, const VIState& state, int user) {
  const int slot = model.root_slot[ix(user)];
  if (slot >= 0) return normalized_mean(state.root_a.row(slot), state.root_b.row(slot)).transpose();
  const auto& recs = model.user_records[ix(user)];
  RowVectorXd acc = RowVectorXd::Zero(model.T);
  for (int r : recs) acc += normalized_mean(state.rec_a.row(r), state.rec_b.row(r));
  return (acc / static_cast<double>(recs.size())).transpose();
}

Eigen::VectorXd record_prior_shape(const Model& model, const VIState& state, int record) {
  const Record& rec = model.records[ix(record)];
  return clamp_shape(state.hyper.beta * std::exp(state.h(rec.story)) *
                     user_mean_weights(model, state, rec.pred));
}

Eigen::VectorXd root_prior_shape(const VIState& state) {
  return clamp_shape(state.hyper.beta * stick_weights(state.V));
}

VIState init_state(const Model& model, const Hyper& hyper, const InferenceConfig& config) {
  hyper.validate();
  config.validate();
  if (hyper.T != model.T) throw ConfigError("invalid T: model and hyperparameters disagree");
  const int T = model.T, L = model.num_stories();
  VIState st;
  st.hyper = hyper;
  st.gp.sigma2 = hyper.sigma2;
  st.gp.jitter = config.jitter;
  st.gp.input_variance = config.input_variance;

  Rng grng = substream(config.seed, "init.gamma");
  const VectorXd ones = VectorXd::Ones(T);
  st.gamma.resize(ix(L));
  for (int s = 0; s < L; ++s) {
    const auto N = static_cast<Eigen::Index>(model.tokens[ix(s)].size());
    st.gamma[ix(s)].resize(N, T);
    for (Eigen::Index n = 0; n < N; ++n) st.gamma[ix(s)].row(n) = sample_dirichlet(ones, grng).transpose();
  }

  Rng erng = substream(config.seed, "init.eta");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double scale = model.vocab_size > 0
                           ? config.eta_noise * static_cast<double>(model.num_tokens()) /
                                 (static_cast<double>(T) * model.vocab_size)
                           : 0.0;
  st.eta.resize(T, model.vocab_size);
  for (int k = 0; k < T; ++k)
    for (int v = 0; v < model.vocab_size; ++v) st.eta(k, v) = hyper.alpha0 + scale * unif(erng);

  st.V = VectorXd::Constant(T, 1.0 / (1.0 + hyper.alpha));
  st.V(T - 1) = 1.0;
  st.h = VectorXd::Zero(L);

  st.root_a.resize(model.num_roots(), T);
  st.root_b = MatrixXd::Ones(model.num_roots(), T);
  const VectorXd A0 = root_prior_shape(st);
  for (int q = 0; q < model.num_roots(); ++q) st.root_a.row(q) = A0.transpose();
  st.rec_a.resize(model.num_records(), T);
  st.rec_b = MatrixXd::Ones(model.num_records(), T);
  for (int u : model.user_order)
    for (int r : model.user_records[ix(u)])
      st.rec_a.row(r) = record_prior_shape(model, st, r).transpose();
  reset_bound_points(model, st);

  st.lambda = zbar_matrix(model, st);
  Rng krng = substream(config.seed, "init.inducing");
  const int G = std::min(config.G, L);
  st.inducing.Y = G > 0 ? kmeans_pp(st.lambda, G, krng) : MatrixXd(0, T);
  const MatrixXd Kgg = inducing_kernel(st.inducing.Y, st.gp);
  st.inducing.posterior = prior_posterior(Kgg);
  if (model.label_targets.size() > 0) {
    st.label_heads.assign(kNumLabels, prior_posterior(Kgg));
    st.label_weight = config.label_weight;
  }
  return st;
}

void reset_bound_points(const Model& model, VIState& state) {
  state.rec_chi.resize(model.num_records());
  for (int r = 0; r < model.num_records(); ++r)
    state.rec_chi(r) = (state.rec_a.row(r).array() / state.rec_b.row(r).array()).sum();
  state.root_chi.resize(model.num_roots());
  for (int q = 0; q < model.num_roots(); ++q)
    state.root_chi(q) = (state.root_a.row(q).array() / state.root_b.row(q).array()).sum();
}

// --- γ -------------------------------------------------------------------------

void update_gamma(const Model& model, VIState& state, int story) {
  const MatrixXd elp = elog_phi(state);
  RowVectorXd slw = RowVectorXd::Zero(model.T);
  const auto& sh = model.story_sharers[ix(story)];
  for (int u : sh) {
    const int slot = model.root_slot[ix(u)];
    if (slot >= 0) {
      slw += factor_ell(state.root_a.row(slot), state.root_b.row(slot), state.root_chi(slot));
    } else {
      RowVectorXd acc = RowVectorXd::Zero(model.T);
      for (int r : model.user_records[ix(u)])
        acc += factor_ell(state.rec_a.row(r), state.rec_b.row(r), state.rec_chi(r));
      slw += acc / static_cast<double>(model.user_records[ix(u)].size());
    }
  }
  slw /= static_cast<double>(sh.size());
  update_story_words(model, state, story, slw, elp);
}

void update_all_gamma(const Model& model, VIState& state, int threads,
                      const std::vector<int>* stories) {
  const MatrixXd elp = elog_phi(state);
  const MatrixXd ulw = user_log_weights(model, state);
  std::vector<int> all;
  if (!stories) {
    all.resize(ix(model.num_stories()));
    for (int s = 0; s < model.num_stories(); ++s) all[ix(s)] = s;
    stories = &all;
  }
  parallel_for(stories->size(), threads, [&](std::size_t i) {
    const int s = (*stories)[i];
    update_story_words(model, state, s, story_log_weight(model, ulw, s), elp);
  });
}

// --- (a, b) ----------------------------------------------------------------------

namespace {

// One factor of user u (a record row or the root row); `norm_sum` holds the
// sum of normalized means over u's factors and is kept in sync.
double update_factor(const Model& model, VIState& st, int u, MatrixXd& A, MatrixXd& B, int row,
                     double chi, const RowVectorXd& c, const VectorXd& prior,
                     RowVectorXd& norm_sum, int nfactors, int max_halvings) {
  const RowVectorXd a0 = A.row(row), b0 = B.row(row);
  const double C = c.sum();
  const RowVectorXd a1 = prior.transpose() + c;
  const RowVectorXd b1 = RowVectorXd::Constant(model.T, 1.0 + C / chi);
  const auto& kids = model.children[ix(u)];
  const RowVectorXd old_norm = normalized_mean(a0, b0);

  if (kids.empty()) {
    A.row(row) = a1;
    B.row(row) = b1;
    norm_sum += normalized_mean(a1, b1) - old_norm;
    return 1.0;
  }

  auto objective = [&](const RowVectorXd& a, const RowVectorXd& b) {
    double f = c.dot(factor_ell(a, b, chi)) - kl_row(a, b, prior);
    const RowVectorXd p = (norm_sum - old_norm + normalized_mean(a, b)) / nfactors;
    for (int r : kids) {
      const Record& rec = model.records[ix(r)];
      const VectorXd Ar =
          clamp_shape(st.hyper.beta * std::exp(st.h(rec.story)) * p.transpose());
      f -= kl_row(st.rec_a.row(r), st.rec_b.row(r), Ar);
    }
    return f;
  };

  const double f0 = objective(a0, b0);
  double t = 1.0;
  for (int hv = 0; hv <= max_halvings; ++hv, t *= 0.5) {
    const RowVectorXd a = a0 + t * (a1 - a0);
    const RowVectorXd b = b0 + t * (b1 - b0);
    const double f = objective(a, b);
    if (std::isfinite(f) && f >= f0) {
      A.row(row) = a;
      B.row(row) = b;
      norm_sum += normalized_mean(a, b) - old_norm;
      return t;
    }
  }
  return 0.0;
}

RowVectorXd record_norm_sum(const Model& model, const VIState& st, int u) {
  RowVectorXd acc = RowVectorXd::Zero(model.T);
  for (int r : model.user_records[ix(u)]) acc += normalized_mean(st.rec_a.row(r), st.rec_b.row(r));
  return acc;
}

}  // namespace

double update_pi(const Model& model, VIState& state, int record, int max_halvings) {
  const int u = model.records[ix(record)].user;
  const int R = static_cast<int>(model.user_records[ix(u)].size());
  const RowVectorXd c = user_count_direct(model, state, u) / static_cast<double>(R);
  RowVectorXd ns = record_norm_sum(model, state, u);
  const VectorXd prior = record_prior_shape(model, state, record);
  return update_factor(model, state, u, state.rec_a, state.rec_b, record, state.rec_chi(record),
                       c, prior, ns, R, max_halvings);
}

double update_root_pi(const Model& model, VIState& state, int root, int max_halvings) {
  const int u = model.root_users[ix(root)];
  const RowVectorXd c = user_count_direct(model, state, u);
  RowVectorXd ns = normalized_mean(state.root_a.row(root), state.root_b.row(root));
  return update_factor(model, state, u, state.root_a, state.root_b, root, state.root_chi(root), c,
                       root_prior_shape(state), ns, 1, max_halvings);
}

void update_all_pi(const Model& model, VIState& state, int max_halvings) {
  const MatrixXd nsk = story_counts(model, state);
  const VectorXd root_prior = root_prior_shape(state);
  for (int u : model.user_order) {
    const RowVectorXd cu = user_count_row(model, nsk, u);
    const int slot = model.root_slot[ix(u)];
    if (slot >= 0) {
      RowVectorXd ns = normalized_mean(state.root_a.row(slot), state.root_b.row(slot));
      update_factor(model, state, u, state.root_a, state.root_b, slot, state.root_chi(slot), cu,
                    root_prior, ns, 1, max_halvings);
      continue;
    }
    const auto& recs = model.user_records[ix(u)];
    const int R = static_cast<int>(recs.size());
    const RowVectorXd c = cu / static_cast<double>(R);
    RowVectorXd ns = record_norm_sum(model, state, u);
    for (int r : recs) {
      const VectorXd prior = record_prior_shape(model, state, r);
      update_factor(model, state, u, state.rec_a, state.rec_b, r, state.rec_chi(r), c, prior, ns,
                    R, max_halvings);
    }
  }
}

// --- η, V, h, λ ------------------------------------------------------------------

void update_eta(const Model& model, VIState& state) {
  state.eta.setConstant(state.hyper.alpha0);
  for (int s = 0; s < model.num_stories(); ++s) {
    const auto& toks = model.tokens[ix(s)];
    const MatrixXd& g = state.gamma[ix(s)];
    for (std::size_t n = 0; n < toks.size(); ++n)
      state.eta.col(toks[n]) += g.row(static_cast<Eigen::Index>(n)).transpose();
  }
}

Eigen::VectorXd grad_V(const Model& model, const VIState& state) {
  return grad_V_at(model, state, state.V);
}

void update_V(const Model& model, VIState& state, double step, int iters, int max_halvings) {
  if (model.T < 2) return;
  constexpr double lo = 1e-4, hi = 1.0 - 1e-4;
  auto objective = [&](const VectorXd& V) {
    return roots_term(model, state, V) + sticks_term(V, state.hyper.alpha);
  };
  auto gradient = [&](const VectorXd& V) { return grad_V_at(model, state, V); };
  auto project = [&](VectorXd V) {
    for (Eigen::Index k = 0; k + 1 < V.size(); ++k) V(k) = std::clamp(V(k), lo, hi);
    V(V.size() - 1) = 1.0;
    return V;
  };
  state.V = project(state.V);
  ascend(state.V, objective, gradient, project, step, iters, max_halvings, "V");
}

Eigen::VectorXd grad_h(const Model& model, const VIState& state) {
  const MatrixXd P = all_user_mean_weights(model, state);
  VectorXd g = transmission_grad_h(model, state, P, state.h);
  g += gp_parts(model, state, state.lambda, state.h, false, 1).d_h;
  return g;
}

void update_h(const Model& model, VIState& state, double step, int iters, int max_halvings,
              const std::vector<bool>* free_stories) {
  if (model.num_stories() == 0) return;
  const MatrixXd P = all_user_mean_weights(model, state);
  // ψ statistics are fixed while h moves.
  const bool gp = gp_active(model, state);
  const LatentInputs latents{state.lambda, state.gp.input_variance};
  PsiStats psi;
  MatrixXd Kgg;
  if (gp) {
    Kgg = inducing_kernel(state.inducing.Y, state.gp);
    psi = psi_statistics(latents, state.inducing.Y, state.gp.sigma2, 1);
  }
  auto gp_bound = [&](const VectorXd& h) {
    return collapsed_bound(latents, state.inducing.Y, psi, Kgg, state.gp.sigma2,
                           state.hyper.kappa, h, false);
  };
  auto objective = [&](const VectorXd& h) {
    double f = transmissions_term(model, state, P, h);
    if (gp) f += gp_bound(h).value;
    return f;
  };
  auto gradient = [&](const VectorXd& h) {
    VectorXd g = transmission_grad_h(model, state, P, h);
    if (gp) g += gp_bound(h).d_targets;
    if (free_stories)
      for (int s = 0; s < model.num_stories(); ++s)
        if (!(*free_stories)[ix(s)]) g(s) = 0.0;
    return g;
  };
  auto project = [](VectorXd h) { return h; };
  ascend(state.h, objective, gradient, project, step, iters, max_halvings, "h");
}

Eigen::MatrixXd grad_lambda(const Model& model, const VIState& state, int threads) {
  MatrixXd g = gp_parts(model, state, state.lambda, state.h, true, threads).d_lambda;
  if (state.hyper.zeta > 0) g -= state.hyper.zeta * (state.lambda - zbar_matrix(model, state));
  return g;
}

void update_lambda(const Model& model, VIState& state, double step, int iters, int max_halvings,
                   int threads, const std::vector<bool>* free_stories) {
  if (model.num_stories() == 0) return;
  const MatrixXd zbar = zbar_matrix(model, state);
  auto objective = [&](const MatrixXd& lambda) {
    const GpParts gp = gp_parts(model, state, lambda, state.h, false, threads);
    return inputs_term(model, state, lambda, zbar) + gp.homogeneity + gp.labels;
  };
  auto gradient = [&](const MatrixXd& lambda) {
    MatrixXd g = gp_parts(model, state, lambda, state.h, true, threads).d_lambda;
    if (state.hyper.zeta > 0) g -= state.hyper.zeta * (lambda - zbar);
    if (free_stories)
      for (int s = 0; s < model.num_stories(); ++s)
        if (!(*free_stories)[ix(s)]) g.row(s).setZero();
    return g;
  };
  auto project = [](MatrixXd l) { return l; };
  ascend(state.lambda, objective, gradient, project, step, iters, max_halvings, "lambda");
}

void update_gp_head(const Model& model, VIState& state, int threads) {
  const MatrixXd Kgg = inducing_kernel(state.inducing.Y, state.gp);
  if (!gp_active(model, state)) {
    state.inducing.posterior = prior_posterior(Kgg);
    for (auto& head : state.label_heads) head = prior_posterior(Kgg);
    return;
  }
  const PsiStats psi = psi_statistics(LatentInputs{state.lambda, state.gp.input_variance},
                                      state.inducing.Y, state.gp.sigma2, threads);
  state.inducing.posterior =
      update_inducing_posterior(psi.psi1, psi.psi2, Kgg, state.hyper.kappa, state.h);
  if (model.label_targets.rows() == model.num_stories() && !state.label_heads.empty()) {
    for (std::size_t c = 0; c < state.label_heads.size(); ++c)
      state.label_heads[c] = update_inducing_posterior(
          psi.psi1, psi.psi2, Kgg, state.hyper.kappa,
          model.label_targets.col(static_cast<Eigen::Index>(c)));
  }
}

// --- ELBO -------------------------------------------------------------------------

double ElboTerms::total() const {
  return words + topics + z_entropy + transmissions + roots + phi + sticks + inputs +
         gp_homogeneity + gp_labels;
}

ElboTerms elbo_terms(const Model& model, const VIState& state, int threads) {
  ElboTerms t;
  const MatrixXd elp = elog_phi(state);
  const MatrixXd ulw = user_log_weights(model, state);
  for (int s = 0; s < model.num_stories(); ++s) {
    const MatrixXd& g = state.gamma[ix(s)];
    const auto& toks = model.tokens[ix(s)];
    for (std::size_t n = 0; n < toks.size(); ++n) {
      const auto row = g.row(static_cast<Eigen::Index>(n));
      t.words += row.dot(elp.col(toks[n]).transpose());
      for (Eigen::Index k = 0; k < row.size(); ++k)
        if (row(k) > 0) t.z_entropy -= row(k) * std::log(row(k));
    }
    t.topics += g.colwise().sum().dot(story_log_weight(model, ulw, s));
  }
  const MatrixXd P = all_user_mean_weights(model, state);
  t.transmissions = transmissions_term(model, state, P, state.h);
  t.roots = roots_term(model, state, state.V);

  const double a0 = state.hyper.alpha0, Vd = static_cast<double>(model.vocab_size);
  for (Eigen::Index k = 0; k < state.eta.rows(); ++k) {
    const auto row = state.eta.row(k);
    double prior = log_gamma(Vd * a0) - Vd * log_gamma(a0);
    double entropy_neg = log_gamma(row.sum());
    for (Eigen::Index v = 0; v < row.size(); ++v) {
      prior += (a0 - 1.0) * elp(k, v);
      entropy_neg += -log_gamma(row(v)) + (row(v) - 1.0) * elp(k, v);
    }
    t.phi += prior - entropy_neg;
  }
  t.sticks = sticks_term(state.V, state.hyper.alpha);
  t.inputs = inputs_term(model, state, state.lambda, zbar_matrix(model, state));
  const GpParts gp = gp_parts(model, state, state.lambda, state.h, false, threads);
  t.gp_homogeneity = gp.homogeneity;
  t.gp_labels = gp.labels;
  return t;
}

double elbo(const Model& model, const VIState& state, int threads) {
  const ElboTerms t = elbo_terms(model, state, threads);
  const std::pair<const char*, double> parts[] = {
      {"words", t.words},          {"topics", t.topics},   {"z_entropy", t.z_entropy},
      {"transmissions", t.transmissions}, {"roots", t.roots}, {"phi", t.phi},
      {"sticks", t.sticks},        {"inputs", t.inputs},   {"gp_homogeneity", t.gp_homogeneity},
      {"gp_labels", t.gp_labels}};
  for (const auto& [name, value] : parts)
    if (!std::isfinite(value))
      throw DivergenceError(std::string("ELBO term '") + name + "' is not finite");
  return t.total();
}

// --- driver -----------------------------------------------------------------------

void text_sweep(const Model& model, VIState& state, const InferenceConfig& config) {
  reset_bound_points(model, state);
  update_all_gamma(model, state, config.threads);
  update_all_pi(model, state, config.max_halvings);
  update_eta(model, state);
}

void sweep(const Model& model, VIState& state, const InferenceConfig& config) {
  text_sweep(model, state, config);
  update_V(model, state, config.step_V, config.inner_iters, config.max_halvings);
  update_gp_head(model, state, config.threads);
  update_lambda(model, state, config.step_lambda, config.inner_iters, config.max_halvings,
                config.threads);
  if (config.update_h)
    update_h(model, state, config.step_h, config.inner_iters, config.max_halvings);
}

void resume_fit(const Model& model, VIState& state, ElboTrace& trace,
                const InferenceConfig& config) {
  config.validate();
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };
  if (trace.empty()) trace.push_back({0, elbo(model, state, config.threads), seconds()});
  double prev = trace.back().elbo;
  const int first = trace.back().sweep + 1;
  for (int it = 0; it < config.max_iters; ++it) {
    sweep(model, state, config);
    const double cur = elbo(model, state, config.threads);
    trace.push_back({first + it, cur, seconds()});
    const double rel = std::abs(cur - prev) / std::max(std::abs(prev), 1e-300);
    prev = cur;
    if (rel < config.tol) break;
  }
  if (config.max_iters > 0) update_gp_head(model, state, config.threads);
}

FitResult fit(const Model& model, const Hyper& hyper, const InferenceConfig& config) {
  FitResult out{init_state(model, hyper, config), {}};
  resume_fit(model, out.state, out.trace, config);
  return out;
}

}  // namespace hbtp

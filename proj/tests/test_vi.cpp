#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hbtp/error.hpp"
#include "hbtp/vi.hpp"
#include "support.hpp"

using namespace hbtp;
using testing::central_difference;
using testing::relative_error;

namespace {

Hyper hyper_for(int T) {
  Hyper hp;
  hp.T = T;
  hp.beta = 5.0;
  return hp;
}

InferenceConfig quick_config(std::uint64_t seed = 0) {
  InferenceConfig c;
  c.G = 6;
  c.seed = seed;
  c.max_iters = 10;
  return c;
}

bool same_state(const VIState& a, const VIState& b) {
  if (a.gamma.size() != b.gamma.size()) return false;
  for (std::size_t s = 0; s < a.gamma.size(); ++s)
    if (a.gamma[s] != b.gamma[s]) return false;
  return a.rec_a == b.rec_a && a.rec_b == b.rec_b && a.rec_chi == b.rec_chi &&
         a.root_a == b.root_a && a.root_b == b.root_b && a.root_chi == b.root_chi &&
         a.eta == b.eta && a.V == b.V && a.h == b.h && a.lambda == b.lambda &&
         a.inducing.Y == b.inducing.Y && a.inducing.posterior.mu == b.inducing.posterior.mu &&
         a.inducing.posterior.Sigma == b.inducing.posterior.Sigma;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("hbtp_test_vi_" + name)).string();
}

// 1 root user, 1 story with the given words.
Model single_story(const std::string& text, int T) {
  const Corpus c = testing::make_corpus("A\t-\ts1\n", "{\"id\":\"s1\",\"text\":\"" + text + "\",\"label\":null}\n");
  return Model::build(c, build_user_graph(c.events, false), T);
}

// A posts s1, B reshares it from A.
Model chain_story(const std::string& text, int T) {
  const Corpus c = testing::make_corpus("A\t-\ts1\nB\tA\ts1\n",
                                        "{\"id\":\"s1\",\"text\":\"" + text + "\",\"label\":null}\n");
  return Model::build(c, build_user_graph(c.events, false), T);
}

}  // namespace

TEST_CASE("init_state is deterministic and satisfies its invariants") {
  const auto sc = testing::small_corpus(1);
  const Hyper hp = hyper_for(4);
  const VIState a = init_state(sc.model, hp, quick_config(3));
  const VIState b = init_state(sc.model, hp, quick_config(3));
  CHECK(same_state(a, b));
  for (const auto& g : a.gamma)
    for (Eigen::Index n = 0; n < g.rows(); ++n) CHECK(std::abs(g.row(n).sum() - 1) < 1e-12);
  for (int r = 0; r < sc.model.num_records(); ++r) {
    CHECK(a.rec_a.row(r).transpose().isApprox(record_prior_shape(sc.model, a, r), 0.0));
    CHECK((a.rec_b.row(r).array() == 1.0).all());
  }
  CHECK(a.V(3) == 1.0);
  CHECK(a.V(0) == doctest::Approx(1 / (1 + hp.alpha)));
  CHECK(a.h.isZero());
  CHECK(a.inducing.posterior.mu.isZero());
  for (int s = 0; s < sc.model.num_stories(); ++s)
    CHECK(a.lambda.row(s).isApprox(a.gamma[static_cast<std::size_t>(s)].colwise().mean(), 1e-14));
  CHECK((a.eta.array() >= hp.alpha0).all());
  CHECK_THROWS_AS(init_state(sc.model, hyper_for(5), quick_config()), ConfigError);
}

TEST_CASE("gamma with a single topic is one") {
  const Model m = single_story("aa bb aa", 1);
  VIState st = init_state(m, hyper_for(1), quick_config());
  update_gamma(m, st, 0);
  CHECK((st.gamma[0].array() == 1.0).all());
}

TEST_CASE("gamma is uniform under full symmetry") {
  const Model m = single_story("aa bb", 2);
  VIState st = init_state(m, hyper_for(2), quick_config());
  st.eta.setConstant(1.3);
  st.root_a.setConstant(0.8);
  st.lambda.setConstant(0.4);
  // The ζ coupling sees only the other word, which starts balanced.
  st.gamma[0] << 0.9, 0.1, 0.5, 0.5;
  reset_bound_points(m, st);
  update_gamma(m, st, 0);
  CHECK((st.gamma[0].array() - 0.5).abs().maxCoeff() < 1e-12);
}

TEST_CASE("gamma fixed point maximizes the ELBO over a grid") {
  const Model m = single_story("aa bb", 2);
  Hyper hp = hyper_for(2);
  hp.kappa = 0.0;
  hp.zeta = 10.0;
  VIState st = init_state(m, hp, quick_config());
  st.eta << 2.0, 0.7, 0.5, 1.8;
  st.root_a << 1.2, 0.6;
  st.root_b << 0.9, 1.1;
  st.lambda << 0.3, 0.6;
  reset_bound_points(m, st);
  for (int i = 0; i < 500; ++i) update_gamma(m, st, 0);

  VIState probe = st;
  double best = -1e300, bx = 0, by = 0;
  const int n = 100;
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) {
      const double x = static_cast<double>(i) / n, y = static_cast<double>(j) / n;
      probe.gamma[0] << x, 1 - x, y, 1 - y;
      const double f = elbo(m, probe);
      if (f > best) {
        best = f;
        bx = x;
        by = y;
      }
    }
  CHECK(std::abs(st.gamma[0](0, 0) - bx) <= 1.0 / n);
  CHECK(std::abs(st.gamma[0](1, 0) - by) <= 1.0 / n);
  probe.gamma[0] = st.gamma[0];
  CHECK(elbo(m, probe) >= best - 1e-9);
}

TEST_CASE("gamma rows stay on the simplex") {
  const auto sc = testing::small_corpus(2);
  VIState st = init_state(sc.model, hyper_for(4), quick_config());
  for (int i = 0; i < 3; ++i) sweep(sc.model, st, quick_config());
  for (const auto& g : st.gamma) {
    CHECK((g.array() >= 0).all());
    CHECK((g.rowwise().sum().array() - 1).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("transmission factor update") {
  const Model m = chain_story("aa bb cc dd aa bb cc dd", 2);
  Hyper hp = hyper_for(2);
  hp.beta = 1.0;
  VIState st = init_state(m, hp, quick_config());
  REQUIRE(m.num_records() == 1);
  st.root_a.setConstant(1.0);
  st.root_b.setConstant(1.0);
  st.h.setZero();

  SUBCASE("shape and rate from counts") {
    // Σγ_k = 4 over the story split between 2 sharers: 2 per topic for B.
    st.gamma[0].setConstant(0.5);
    st.rec_chi(0) = 4.0;
    CHECK(update_pi(m, st, 0) == 1.0);
    CHECK(st.rec_a(0, 0) == doctest::Approx(2.5));
    CHECK(st.rec_a(0, 1) == doctest::Approx(2.5));
    CHECK(st.rec_b(0, 0) == doctest::Approx(2.0));
  }
  SUBCASE("no attributed words recovers the prior shape") {
    st.gamma[0].col(0).setOnes();
    st.gamma[0].col(1).setZero();
    update_pi(m, st, 0);
    CHECK(st.rec_a(0, 1) == doctest::Approx(0.5));
  }
}

TEST_CASE("shape parameters stay positive through fitting") {
  const auto sc = testing::small_corpus(3);
  const FitResult r = fit(sc.model, hyper_for(4), quick_config());
  CHECK((r.state.rec_a.array() > 0).all());
  CHECK((r.state.root_a.array() > 0).all());
  CHECK((r.state.rec_b.array() > 0).all());
  CHECK((r.state.eta.array() > 0).all());
}

TEST_CASE("eta closed form") {
  SUBCASE("no stories leaves the prior") {
    Model m;
    m.T = 3;
    m.vocab_size = 4;
    VIState st;
    st.hyper.alpha0 = 0.1;
    st.eta = Eigen::MatrixXd::Constant(3, 4, 7.0);
    update_eta(m, st);
    CHECK((st.eta.array() == 0.1).all());
  }
  SUBCASE("single word") {
    const Model m = single_story("aa", 2);
    VIState st = init_state(m, hyper_for(2), quick_config());
    st.gamma[0] << 1.0, 0.0;
    update_eta(m, st);
    CHECK(st.eta(0, 0) == doctest::Approx(st.hyper.alpha0 + 1));
    CHECK(st.eta(1, 0) == doctest::Approx(st.hyper.alpha0));
  }
  SUBCASE("mass conservation") {
    const auto sc = testing::small_corpus(4);
    VIState st = init_state(sc.model, hyper_for(4), quick_config());
    Rng rng = substream(4, "eta");
    testing::perturb_state(sc.model, st, rng);
    update_eta(sc.model, st);
    const double mass = (st.eta.array() - st.hyper.alpha0).sum();
    CHECK(mass == doctest::Approx(static_cast<double>(sc.model.num_tokens())).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradients match finite differences of the ELBO") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CAPTURE(seed);
    const auto sc = testing::small_corpus(10 + seed, 10, 25, 3, 15, 25);
    VIState st = init_state(sc.model, hyper_for(3), quick_config(seed));
    Rng rng = substream(seed, "grad-state");
    testing::perturb_state(sc.model, st, rng);
    update_gp_head(sc.model, st);
    const double eps = 1e-4;

    const Eigen::VectorXd gV = grad_V(sc.model, st);
    Eigen::VectorXd nV = Eigen::VectorXd::Zero(gV.size());
    for (Eigen::Index k = 0; k + 1 < gV.size(); ++k)
      nV(k) = central_difference(
          [&](double x) {
            VIState p = st;
            p.V(k) = x;
            return elbo(sc.model, p);
          },
          st.V(k), eps);
    CHECK(relative_error(gV, nV) < 1e-4);

    const Eigen::VectorXd gh = grad_h(sc.model, st);
    Eigen::VectorXd nh(gh.size());
    for (Eigen::Index s = 0; s < gh.size(); ++s)
      nh(s) = central_difference(
          [&](double x) {
            VIState p = st;
            p.h(s) = x;
            return elbo(sc.model, p);
          },
          st.h(s), eps);
    CHECK(relative_error(gh, nh) < 1e-4);

    const Eigen::MatrixXd gl = grad_lambda(sc.model, st);
    Eigen::MatrixXd nl(gl.rows(), gl.cols());
    for (Eigen::Index s = 0; s < gl.rows(); ++s)
      for (Eigen::Index k = 0; k < gl.cols(); ++k)
        nl(s, k) = central_difference(
            [&](double x) {
              VIState p = st;
              p.lambda(s, k) = x;
              return elbo(sc.model, p);
            },
            st.lambda(s, k), eps);
    CHECK(relative_error(gl.reshaped(), nl.reshaped()) < 1e-4);
  }
}

TEST_CASE("h gradient of an unshared story is the GP term alone") {
  const Model m = single_story("aa bb", 2);
  Hyper hp = hyper_for(2);
  hp.kappa = 3.0;
  VIState st = init_state(m, hp, quick_config());
  // Inducing points far away make ψ1 vanish, hence W = κI.
  st.inducing.Y.setConstant(1e3);
  st.h(0) = 0.7;
  CHECK(grad_h(m, st)(0) == doctest::Approx(-3.0 * 0.7).epsilon(1e-12));
}

TEST_CASE("without the GP bound lambda converges to the mean assignment") {
  const auto sc = testing::small_corpus(5);
  Hyper hp = hyper_for(4);
  hp.kappa = 0.0;
  VIState st = init_state(sc.model, hp, quick_config());
  st.lambda.setConstant(0.9);
  update_lambda(sc.model, st, 1e-2, 300);
  for (int s = 0; s < sc.model.num_stories(); ++s)
    CHECK((st.lambda.row(s) - st.gamma[static_cast<std::size_t>(s)].colwise().mean()).norm() < 1e-6);

  for (auto& g : st.gamma) g.setConstant(0.25);
  update_lambda(sc.model, st, 1e-2, 300);
  CHECK((st.lambda.array() - 0.25).abs().maxCoeff() < 1e-6);
}

TEST_CASE("stick update") {
  const Model m1 = single_story("aa bb", 1);
  VIState st1 = init_state(m1, hyper_for(1), quick_config());
  update_V(m1, st1, 1.0, 10);
  CHECK(st1.V(0) == 1.0);

  const auto sc = testing::small_corpus(6);
  VIState st = init_state(sc.model, hyper_for(4), quick_config());
  const double before = elbo(sc.model, st);
  update_V(sc.model, st, 100.0, 20);  // oversized steps must be projected back
  CHECK(elbo(sc.model, st) >= before - 1e-9 * std::abs(before));
  CHECK((st.V.head(3).array() >= 1e-4).all());
  CHECK((st.V.head(3).array() <= 1 - 1e-4).all());
  CHECK(st.V(3) == 1.0);
}

TEST_CASE("GP head update") {
  const auto sc = testing::small_corpus(7);
  Hyper hp = hyper_for(4);
  VIState st = init_state(sc.model, hp, quick_config());
  Rng rng = substream(7, "head");
  testing::perturb_state(sc.model, st, rng);
  update_gp_head(sc.model, st);
  const InducingPosterior once = st.inducing.posterior;
  update_gp_head(sc.model, st);
  CHECK(st.inducing.posterior.mu == once.mu);
  CHECK(st.inducing.posterior.Sigma == once.Sigma);

  st.hyper.kappa = 1e-14;
  update_gp_head(sc.model, st);
  const Eigen::MatrixXd K = inducing_kernel(st.inducing.Y, st.gp);
  CHECK(st.inducing.posterior.mu.norm() < 1e-10);
  CHECK((st.inducing.posterior.Sigma - K).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("every coordinate update keeps the ELBO from decreasing") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto sc = testing::small_corpus(20 + seed);
    const InferenceConfig cfg = quick_config(seed);
    VIState st = init_state(sc.model, hyper_for(4), cfg);
    double prev = elbo(sc.model, st);
    auto check = [&](const char* what) {
      const double cur = elbo(sc.model, st);
      INFO(what, " seed ", seed);
      CHECK(cur - prev >= -1e-6 * std::abs(prev));
      prev = cur;
    };
    for (int it = 0; it < 5; ++it) {
      reset_bound_points(sc.model, st);
      check("bound reset");
      update_all_gamma(sc.model, st);
      check("gamma");
      update_all_pi(sc.model, st);
      check("pi");
      update_eta(sc.model, st);
      check("eta");
      update_V(sc.model, st, cfg.step_V, cfg.inner_iters);
      check("V");
      update_gp_head(sc.model, st);
      check("gp head");
      update_lambda(sc.model, st, cfg.step_lambda, cfg.inner_iters);
      check("lambda");
      update_h(sc.model, st, cfg.step_h, cfg.inner_iters);
      check("h");
    }
  }
}

TEST_CASE("fit") {
  const auto sc = testing::small_corpus(8);
  InferenceConfig cfg = quick_config(5);

  SUBCASE("zero iterations return the initial state") {
    cfg.max_iters = 0;
    const FitResult r = fit(sc.model, hyper_for(4), cfg);
    CHECK(same_state(r.state, init_state(sc.model, hyper_for(4), cfg)));
    CHECK(r.trace.size() == 1);
  }
  SUBCASE("trace is monotone") {
    cfg.max_iters = 15;
    cfg.tol = 0;
    const FitResult r = fit(sc.model, hyper_for(4), cfg);
    CHECK(r.trace.size() == 16);
    for (std::size_t i = 1; i < r.trace.size(); ++i)
      CHECK(r.trace[i].elbo - r.trace[i - 1].elbo >= -1e-6 * std::abs(r.trace[i - 1].elbo));
  }
  SUBCASE("thread count does not change the result") {
    cfg.threads = 1;
    const FitResult a = fit(sc.model, hyper_for(4), cfg);
    cfg.threads = 3;
    const FitResult b = fit(sc.model, hyper_for(4), cfg);
    CHECK(same_state(a.state, b.state));
  }
  SUBCASE("invalid configuration") {
    cfg.tol = -1;
    CHECK_THROWS_AS(fit(sc.model, hyper_for(4), cfg), ConfigError);
  }
}

TEST_CASE("rootless corpora reduce the gamma sweep to a plain HDP sweep") {
  Rng rng = substream(9, "hdp");
  const Corpus c = testing::rootless_corpus(20, 8, 15, 30, 4, rng);
  const UserGraph g = build_user_graph(c.events, false);
  const Model m = Model::build(c, g, 4);
  Hyper hp = hyper_for(4);
  hp.zeta = 0.0;
  hp.kappa = 0.0;
  VIState st = init_state(m, hp, quick_config());
  Rng prng = substream(9, "hdp-state");
  testing::perturb_state(m, st, prng);
  st.h.setZero();
  const auto expected = testing::hdp_gamma_sweep(m, st);
  update_all_gamma(m, st);
  double worst = 0;
  for (std::size_t s = 0; s < expected.size(); ++s)
    worst = std::max(worst, (st.gamma[s] - expected[s]).cwiseAbs().maxCoeff());
  CHECK(worst <= 1e-10);
}

TEST_CASE("checkpoints") {
  const auto sc = testing::small_corpus(9);
  InferenceConfig cfg = quick_config(2);
  cfg.max_iters = 4;
  cfg.tol = 0;
  FitResult r = fit(sc.model, hyper_for(4), cfg);
  CheckpointMeta meta;
  meta.sweeps = r.trace.back().sweep;
  meta.last_elbo = r.trace.back().elbo;
  meta.config = cfg;
  meta.vocabulary = sc.syn.corpus.vocab.tokens();
  const std::string p1 = temp_path("a.json"), p2 = temp_path("b.json");
  save_checkpoint(p1, sc.model, r.state, meta);

  SUBCASE("round trip") {
    const Checkpoint cp = load_checkpoint(p1);
    CHECK(same_state(cp.state, r.state));
    CHECK(cp.meta.sweeps == meta.sweeps);
    CHECK(cp.meta.vocabulary == meta.vocabulary);
    CHECK(cp.stories == sc.model.story_ids);
    check_compatible(cp, sc.model);
    CHECK(elbo(sc.model, cp.state) == elbo(sc.model, r.state));
  }
  SUBCASE("identical runs write identical bytes") {
    const FitResult again = fit(sc.model, hyper_for(4), cfg);
    save_checkpoint(p2, sc.model, again.state, meta);
    CHECK(slurp(p1) == slurp(p2));
  }
  SUBCASE("resuming continues the trace without a drop") {
    Checkpoint cp = load_checkpoint(p1);
    ElboTrace trace = r.trace;
    cfg.max_iters = 3;
    resume_fit(sc.model, cp.state, trace, cfg);
    CHECK(trace.size() == r.trace.size() + 3);
    CHECK(trace[r.trace.size()].sweep == meta.sweeps + 1);
    CHECK(trace[r.trace.size()].elbo - meta.last_elbo >= -1e-6 * std::abs(meta.last_elbo));
  }
  SUBCASE("mismatched corpora and damaged files are rejected") {
    const auto other = testing::small_corpus(99);
    CHECK_THROWS_AS(check_compatible(load_checkpoint(p1), other.model), ConfigError);
    std::ofstream(p2) << "{\"format\": \"something-else\"}";
    CHECK_THROWS_AS(load_checkpoint(p2), ParseError);
  }
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

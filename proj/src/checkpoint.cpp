#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hbtp/error.hpp"
#include "hbtp/vi.hpp"

namespace hbtp {

namespace {

using nlohmann::json;
constexpr const char* kFormat = "hbtp-checkpoint";

json encode(const Eigen::MatrixXd& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return json{{"shape", {m.rows(), m.cols()}}, {"data", data}};
}

json encode(const Eigen::VectorXd& v) {
  return json{{"shape", {v.size()}}, {"data", std::vector<double>(v.data(), v.data() + v.size())}};
}

const json& field(const json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end()) throw ParseError("checkpoint", 0, std::string("missing field '") + name + "'");
  return *it;
}

Eigen::MatrixXd decode_matrix(const json& arrays, const char* name) {
  const json& a = field(arrays, name);
  const auto shape = field(a, "shape").get<std::vector<Eigen::Index>>();
  const auto data = field(a, "data").get<std::vector<double>>();
  if (shape.size() != 2 || static_cast<std::size_t>(shape[0] * shape[1]) != data.size())
    throw ParseError("checkpoint", 0, std::string("bad shape for array '") + name + "'");
  Eigen::MatrixXd m(shape[0], shape[1]);
  for (Eigen::Index i = 0; i < shape[0]; ++i)
    for (Eigen::Index j = 0; j < shape[1]; ++j) m(i, j) = data[static_cast<std::size_t>(i * shape[1] + j)];
  return m;
}

Eigen::VectorXd decode_vector(const json& arrays, const char* name) {
  const json& a = field(arrays, name);
  const auto shape = field(a, "shape").get<std::vector<Eigen::Index>>();
  const auto data = field(a, "data").get<std::vector<double>>();
  if (shape.size() != 1 || static_cast<std::size_t>(shape[0]) != data.size())
    throw ParseError("checkpoint", 0, std::string("bad shape for array '") + name + "'");
  return Eigen::Map<const Eigen::VectorXd>(data.data(), shape[0]);
}

json encode_config(const InferenceConfig& c) {
  return json{{"G", c.G},
              {"input_variance", c.input_variance},
              {"jitter", c.jitter},
              {"max_iters", c.max_iters},
              {"tol", c.tol},
              {"step_V", c.step_V},
              {"step_h", c.step_h},
              {"step_lambda", c.step_lambda},
              {"inner_iters", c.inner_iters},
              {"max_halvings", c.max_halvings},
              {"eta_noise", c.eta_noise},
              {"label_weight", c.label_weight},
              {"update_h", c.update_h},
              {"seed", c.seed},
              {"threads", c.threads}};
}

InferenceConfig decode_config(const json& j) {
  InferenceConfig c;
  c.G = field(j, "G").get<int>();
  c.input_variance = field(j, "input_variance").get<double>();
  c.jitter = field(j, "jitter").get<double>();
  c.max_iters = field(j, "max_iters").get<int>();
  c.tol = field(j, "tol").get<double>();
  c.step_V = field(j, "step_V").get<double>();
  c.step_h = field(j, "step_h").get<double>();
  c.step_lambda = field(j, "step_lambda").get<double>();
  c.inner_iters = field(j, "inner_iters").get<int>();
  c.max_halvings = field(j, "max_halvings").get<int>();
  c.eta_noise = field(j, "eta_noise").get<double>();
  c.label_weight = field(j, "label_weight").get<double>();
  c.update_h = field(j, "update_h").get<bool>();
  c.seed = field(j, "seed").get<std::uint64_t>();
  c.threads = field(j, "threads").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const VIState& state,
                     const CheckpointMeta& meta) {
  json j;
  j["format"] = kFormat;
  j["version"] = kCheckpointVersion;
  j["sweeps"] = meta.sweeps;
  j["last_elbo"] = meta.last_elbo;
  j["supervised"] = meta.supervised;
  j["config"] = encode_config(meta.config);
  j["vocabulary"] = meta.vocabulary;
  const Hyper& hp = state.hyper;
  j["hyper"] = {{"alpha", hp.alpha}, {"beta", hp.beta},   {"alpha0", hp.alpha0},
                {"zeta", hp.zeta},   {"kappa", hp.kappa}, {"sigma2", hp.sigma2},
                {"T", hp.T}};
  j["gp"] = {{"sigma2", state.gp.sigma2},
             {"jitter", state.gp.jitter},
             {"input_variance", state.gp.input_variance}};
  j["label_weight"] = state.label_weight;
  j["stories"] = model.story_ids;
  j["users"] = model.user_ids;
  json recs = json::array();
  for (const auto& r : model.records)
    recs.push_back({model.user_ids[static_cast<std::size_t>(r.user)],
                    model.user_ids[static_cast<std::size_t>(r.pred)],
                    model.story_ids[static_cast<std::size_t>(r.story)]});
  j["records"] = recs;
  json roots = json::array();
  for (int u : model.root_users) roots.push_back(model.user_ids[static_cast<std::size_t>(u)]);
  j["roots"] = roots;

  json arrays;
  Eigen::Index total = 0;
  std::vector<Eigen::Index> offsets{0};
  for (const auto& g : state.gamma) offsets.push_back(total += g.rows());
  Eigen::MatrixXd gamma(total, model.T);
  for (std::size_t s = 0; s < state.gamma.size(); ++s)
    gamma.middleRows(offsets[s], state.gamma[s].rows()) = state.gamma[s];
  arrays["gamma"] = encode(gamma);
  arrays["gamma_offsets"] = {{"shape", {offsets.size()}}, {"data", offsets}};
  arrays["rec_a"] = encode(state.rec_a);
  arrays["rec_b"] = encode(state.rec_b);
  arrays["rec_chi"] = encode(state.rec_chi);
  arrays["root_a"] = encode(state.root_a);
  arrays["root_b"] = encode(state.root_b);
  arrays["root_chi"] = encode(state.root_chi);
  arrays["eta"] = encode(state.eta);
  arrays["V"] = encode(state.V);
  arrays["h"] = encode(state.h);
  arrays["lambda"] = encode(state.lambda);
  arrays["inducing_Y"] = encode(state.inducing.Y);
  arrays["inducing_mu"] = encode(state.inducing.posterior.mu);
  arrays["inducing_Sigma"] = encode(state.inducing.posterior.Sigma);
  for (std::size_t c = 0; c < state.label_heads.size(); ++c) {
    const std::string tag = "label_" + std::to_string(c);
    arrays[tag + "_mu"] = encode(state.label_heads[c].mu);
    arrays[tag + "_Sigma"] = encode(state.label_heads[c].Sigma);
  }
  j["label_heads"] = state.label_heads.size();
  j["arrays"] = arrays;

  const std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp.string() + "'");
    out << j.dump(1) << '\n';
    if (!out) throw Error("cannot write checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path, 0, e.what());
  }
  try {
    if (j.value("format", std::string()) != kFormat)
      throw ParseError(path, 0, "not a checkpoint file");
    const int version = field(j, "version").get<int>();
    if (version != kCheckpointVersion)
      throw ParseError(path, 0, "unsupported checkpoint version " + std::to_string(version));
    Checkpoint cp;
    cp.meta.sweeps = field(j, "sweeps").get<int>();
    cp.meta.last_elbo = field(j, "last_elbo").get<double>();
    cp.meta.supervised = field(j, "supervised").get<bool>();
    cp.meta.config = decode_config(field(j, "config"));
    cp.meta.vocabulary = field(j, "vocabulary").get<std::vector<std::string>>();
    const json& hp = field(j, "hyper");
    VIState& st = cp.state;
    st.hyper.alpha = field(hp, "alpha").get<double>();
    st.hyper.beta = field(hp, "beta").get<double>();
    st.hyper.alpha0 = field(hp, "alpha0").get<double>();
    st.hyper.zeta = field(hp, "zeta").get<double>();
    st.hyper.kappa = field(hp, "kappa").get<double>();
    st.hyper.sigma2 = field(hp, "sigma2").get<double>();
    st.hyper.T = field(hp, "T").get<int>();
    const json& gp = field(j, "gp");
    st.gp.sigma2 = field(gp, "sigma2").get<double>();
    st.gp.jitter = field(gp, "jitter").get<double>();
    st.gp.input_variance = field(gp, "input_variance").get<double>();
    st.label_weight = field(j, "label_weight").get<double>();
    cp.stories = field(j, "stories").get<std::vector<StoryId>>();
    cp.users = field(j, "users").get<std::vector<UserId>>();
    cp.records = field(j, "records").get<std::vector<std::array<std::string, 3>>>();
    cp.roots = field(j, "roots").get<std::vector<UserId>>();

    const json& arrays = field(j, "arrays");
    const Eigen::MatrixXd gamma = decode_matrix(arrays, "gamma");
    const auto offsets = field(field(arrays, "gamma_offsets"), "data").get<std::vector<Eigen::Index>>();
    if (offsets.size() != cp.stories.size() + 1 || offsets.back() != gamma.rows())
      throw ParseError(path, 0, "gamma offsets do not match the story table");
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
      st.gamma.push_back(gamma.middleRows(offsets[s], offsets[s + 1] - offsets[s]));
    st.rec_a = decode_matrix(arrays, "rec_a");
    st.rec_b = decode_matrix(arrays, "rec_b");
    st.rec_chi = decode_vector(arrays, "rec_chi");
    st.root_a = decode_matrix(arrays, "root_a");
    st.root_b = decode_matrix(arrays, "root_b");
    st.root_chi = decode_vector(arrays, "root_chi");
    st.eta = decode_matrix(arrays, "eta");
    st.V = decode_vector(arrays, "V");
    st.h = decode_vector(arrays, "h");
    st.lambda = decode_matrix(arrays, "lambda");
    st.inducing.Y = decode_matrix(arrays, "inducing_Y");
    st.inducing.posterior.mu = decode_vector(arrays, "inducing_mu");
    st.inducing.posterior.Sigma = decode_matrix(arrays, "inducing_Sigma");
    const auto heads = field(j, "label_heads").get<std::size_t>();
    for (std::size_t c = 0; c < heads; ++c) {
      const std::string tag = "label_" + std::to_string(c);
      st.label_heads.push_back({decode_vector(arrays, (tag + "_mu").c_str()),
                                decode_matrix(arrays, (tag + "_Sigma").c_str())});
    }
    if (st.rec_a.rows() != static_cast<Eigen::Index>(cp.records.size()) ||
        st.root_a.rows() != static_cast<Eigen::Index>(cp.roots.size()) ||
        st.h.size() != static_cast<Eigen::Index>(cp.stories.size()) ||
        st.V.size() != st.hyper.T)
      throw ParseError(path, 0, "array shapes do not match the index tables");
    return cp;
  } catch (const json::exception& e) {
    throw ParseError(path, 0, e.what());
  }
}

void check_compatible(const Checkpoint& cp, const Model& model) {
  auto fail = [](const std::string& what) {
    throw ConfigError("checkpoint does not match the corpus: " + what);
  };
  if (cp.state.hyper.T != model.T) fail("T differs");
  if (cp.state.eta.cols() != model.vocab_size) fail("vocabulary size differs");
  if (cp.stories != model.story_ids) fail("story table differs");
  if (cp.users != model.user_ids) fail("user table differs");
  if (cp.records.size() != model.records.size()) fail("record table differs");
  for (std::size_t i = 0; i < cp.records.size(); ++i) {
    const Record& r = model.records[i];
    const std::array<std::string, 3> ids{model.user_ids[static_cast<std::size_t>(r.user)],
                                         model.user_ids[static_cast<std::size_t>(r.pred)],
                                         model.story_ids[static_cast<std::size_t>(r.story)]};
    if (ids != cp.records[i]) fail("record table differs");
  }
  if (cp.roots.size() != model.root_users.size()) fail("root table differs");
  for (std::size_t i = 0; i < cp.roots.size(); ++i)
    if (cp.roots[i] != model.user_ids[static_cast<std::size_t>(model.root_users[i])])
      fail("root table differs");
  for (std::size_t s = 0; s < cp.state.gamma.size(); ++s)
    if (cp.state.gamma[s].rows() != static_cast<Eigen::Index>(model.tokens[s].size()))
      fail("token counts differ");
}

}  // namespace hbtp

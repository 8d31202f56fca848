#ifndef METAREG_NETS_HPP
#define METAREG_NETS_HPP

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metareg/graph.hpp"
#include "metareg/rng.hpp"
#include "metareg/tensor.hpp"

namespace metareg {

enum class Activation { kRelu, kTanh };
enum class Head { kLinear, kLogits };

/// Layer widths including input and output, e.g. {21, 100, 100, 1}.
struct MlpSpec {
  std::vector<int> widths;
  Activation hidden = Activation::kRelu;
  Head head = Head::kLinear;

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least input and output widths");
    for (int w : widths)
      if (w <= 0) throw std::invalid_argument("MlpSpec: widths must be positive");
  }
  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }
  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
};

/// Graph handles for one dense layer.
struct LayerNodes {
  ad::Value W;
  ad::Value b;
};

inline ad::Value dense(const ad::Value& x, const LayerNodes& l) {
  return ad::add(ad::matmul(x, l.W), ad::broadcast_rows(l.b, x->shape[0]));
}

inline ad::Value activate(Activation a, ad::Value x) {
  return a == Activation::kRelu ? ad::relu(std::move(x)) : ad::tanh(std::move(x));
}

/// Forward pass as a graph. `layers` may hold parameter leaves or adapted
/// in-graph values (the MAML inner loop passes the latter).
inline ad::Value mlp_forward(const MlpSpec& spec, std::span<const LayerNodes> layers,
                             const ad::Value& input) {
  spec.validate();
  if (static_cast<int>(layers.size()) != spec.layer_count())
    throw std::invalid_argument("mlp_forward: layer count mismatch");
  if (input->shape.size() != 2 || input->shape[1] != spec.input_width())
    throw std::invalid_argument("mlp_forward: input width " + shape_str(input->shape) +
                                " does not match spec width " + std::to_string(spec.input_width()));
  ad::Value h = input;
  for (int l = 0; l < spec.layer_count(); ++l) {
    h = dense(h, layers[static_cast<std::size_t>(l)]);
    if (l + 1 < spec.layer_count()) h = activate(spec.hidden, h);
  }
  return h;
}

// --- variational weights ------------------------------------------------

/// Diagonal Gaussian over a weight block: theta = mu + softplus(rho) * eps.
struct VariationalWeights {
  Tensor mu;
  Tensor rho;

  Tensor sigma() const {
    Tensor s = rho;
    for (auto& v : s.data) v = (v > 0 ? v : 0.0) + std::log1p(std::exp(-std::fabs(v)));
    return s;
  }
};

inline ad::Value sample_weights_graph(const ad::Value& mu, const ad::Value& rho,
                                      const ad::Value& eps) {
  if (mu->shape != rho->shape || mu->shape != eps->shape)
    throw std::invalid_argument("sample_weights: mu/rho/eps shapes disagree");
  return ad::add(mu, ad::mul(ad::softplus(rho), eps));
}

/// Reparameterized sample; eps is a standard-normal draw of matching length.
inline Tensor sample_weights(const VariationalWeights& vw, const Tensor& eps) {
  if (vw.mu.shape != eps.shape) throw std::invalid_argument("sample_weights: eps length mismatch");
  Tensor s = vw.sigma();
  Tensor out = vw.mu;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += s.data[i] * eps.data[i];
  return out;
}

/// KL(N(mu, diag sigma^2) || N(0, I)) = sum_i (mu_i^2 + sigma_i^2 - log sigma_i^2 - 1) / 2.
inline double kl_diag_gaussian_to_std(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw std::invalid_argument("kl: mu/sigma length mismatch");
  double kl = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0)) throw std::invalid_argument("kl: sigma must be strictly positive");
    kl += 0.5 * (mu[i] * mu[i] + sigma[i] * sigma[i] - 2.0 * std::log(sigma[i]) - 1.0);
  }
  return kl;
}

inline double kl_to_std(const VariationalWeights& vw) {
  Tensor s = vw.sigma();
  return kl_diag_gaussian_to_std(vw.mu.data, s.data);
}

/// Graph form with sigma = softplus(rho); scalar output.
inline ad::Value kl_std_normal_graph(const ad::Value& mu, const ad::Value& rho) {
  ad::Value s = ad::softplus(rho);
  ad::Value terms = ad::add_scalar(
      ad::sub(ad::add(ad::mul(mu, mu), ad::mul(s, s)), ad::scale(ad::log(s), 2.0)), -1.0);
  return ad::scale(ad::reduce_sum(terms), 0.5);
}

/// Per-example KL for a [m, z] bottleneck posterior against N(0, I) -> [m].
inline ad::Value kl_std_normal_rows_graph(const ad::Value& z_mu, const ad::Value& z_sigma) {
  ad::Value terms = ad::add_scalar(ad::sub(ad::add(ad::mul(z_mu, z_mu), ad::mul(z_sigma, z_sigma)),
                                           ad::scale(ad::log(z_sigma), 2.0)),
                                   -1.0);
  return ad::scale(ad::reduce_cols(terms), 0.5);
}

// --- stochastic bottleneck ------------------------------------------------

/// Graph handles for a sampled activation bottleneck.
struct BottleneckNodes {
  ad::Value z_mu;     // [m, z]
  ad::Value z_sigma;  // [m, z], softplus of the raw head
  ad::Value z;        // z_mu + z_sigma * eps
  ad::Value kl_rows;  // [m]
};

/// Splits a [m, 2z] encoder head into (mu, softplus scale), draws z by
/// reparameterization and exposes the per-example KL to N(0, I).
inline BottleneckNodes bottleneck_encode_graph(const ad::Value& head, const ad::Value& eps) {
  if (head->shape.size() != 2 || head->shape[1] % 2 != 0)
    throw std::invalid_argument("bottleneck: head must be [m, 2z]");
  const int z = head->shape[1] / 2;
  BottleneckNodes out;
  out.z_mu = ad::slice_cols(head, 0, z);
  out.z_sigma = ad::softplus(ad::slice_cols(head, z, 2 * z));
  if (eps->shape != out.z_mu->shape) throw std::invalid_argument("bottleneck: eps shape mismatch");
  out.z = ad::add(out.z_mu, ad::mul(out.z_sigma, eps));
  out.kl_rows = kl_std_normal_rows_graph(out.z_mu, out.z_sigma);
  return out;
}

/// Numeric counterpart kept for serialization and tests.
struct BottleneckSample {
  Tensor z_mu, z_sigma, z, eps;
};

// --- losses ----------------------------------------------------------------

/// Elementwise -log N(target; pred, 1): 0.5 (pred - target)^2 + 0.5 log(2 pi).
inline ad::Value gaussian_nll(const ad::Value& pred, const ad::Value& target) {
  ad::Value r = ad::sub(pred, target);
  return ad::add_scalar(ad::scale(ad::mul(r, r), 0.5), 0.9189385332046727);
}

// --- parameter blocks and checkpoints ---------------------------------------

enum class BlockKind { kDeterministic, kVariational };

/// One named weight tensor, either a point value or a diagonal Gaussian.
struct ParamBlock {
  std::string name;
  Shape shape;
  BlockKind kind = BlockKind::kDeterministic;
  Tensor value;           // deterministic
  VariationalWeights vw;  // variational

  std::int64_t size() const { return shape_size(shape); }
};

/// Fan-in scaled uniform init for weight matrices; zero biases.
inline Tensor init_fanin_uniform(const Shape& shape, StreamRng& rng) {
  Tensor t = Tensor::zeros(shape);
  if (shape.size() == 1) return t;  // bias
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

constexpr double kRhoInit = -3.0;  // softplus(-3) ~ 0.049

inline ParamBlock make_block(std::string name, Shape shape, BlockKind kind, StreamRng& rng) {
  ParamBlock b;
  b.name = std::move(name);
  b.shape = shape;
  b.kind = kind;
  if (kind == BlockKind::kDeterministic) {
    b.value = init_fanin_uniform(shape, rng);
  } else {
    b.vw.mu = init_fanin_uniform(shape, rng);
    b.vw.rho = Tensor::zeros(shape);
    for (auto& v : b.vw.rho.data) v = kRhoInit;
  }
  return b;
}

/// Checkpoint layout: {spec, theta_mu, rho, theta_tilde} with the flat arrays
/// concatenated in block order, row-major within each block. Block names,
/// shapes and kinds ride inside "spec" so a checkpoint is self-describing.
inline nlohmann::json checkpoint_to_json(nlohmann::json spec, std::span<const ParamBlock> blocks) {
  std::vector<double> mu, rho, tilde;
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& b : blocks) {
    layout.push_back({{"name", b.name},
                      {"shape", b.shape},
                      {"kind", b.kind == BlockKind::kVariational ? "variational" : "deterministic"}});
    if (b.kind == BlockKind::kVariational) {
      mu.insert(mu.end(), b.vw.mu.data.begin(), b.vw.mu.data.end());
      rho.insert(rho.end(), b.vw.rho.data.begin(), b.vw.rho.data.end());
    } else {
      tilde.insert(tilde.end(), b.value.data.begin(), b.value.data.end());
    }
  }
  spec["blocks"] = std::move(layout);
  return nlohmann::json{
      {"spec", std::move(spec)}, {"theta_mu", mu}, {"rho", rho}, {"theta_tilde", tilde}};
}

inline std::vector<ParamBlock> checkpoint_from_json(const nlohmann::json& j, nlohmann::json* spec_out) {
  const auto& spec = j.at("spec");
  if (spec_out) *spec_out = spec;
  std::vector<double> mu = j.at("theta_mu").get<std::vector<double>>();
  std::vector<double> rho = j.at("rho").get<std::vector<double>>();
  std::vector<double> tilde = j.at("theta_tilde").get<std::vector<double>>();
  std::size_t im = 0, it = 0;
  std::vector<ParamBlock> blocks;
  for (const auto& jb : spec.at("blocks")) {
    ParamBlock b;
    b.name = jb.at("name").get<std::string>();
    b.shape = jb.at("shape").get<Shape>();
    const auto n = static_cast<std::size_t>(shape_size(b.shape));
    if (jb.at("kind").get<std::string>() == "variational") {
      b.kind = BlockKind::kVariational;
      if (im + n > mu.size() || im + n > rho.size())
        throw std::invalid_argument("checkpoint: variational arrays too short");
      b.vw.mu = Tensor(b.shape, {mu.begin() + im, mu.begin() + im + n});
      b.vw.rho = Tensor(b.shape, {rho.begin() + im, rho.begin() + im + n});
      im += n;
    } else {
      b.kind = BlockKind::kDeterministic;
      if (it + n > tilde.size()) throw std::invalid_argument("checkpoint: theta_tilde too short");
      b.value = Tensor(b.shape, {tilde.begin() + it, tilde.begin() + it + n});
      it += n;
    }
    blocks.push_back(std::move(b));
  }
  if (im != mu.size() || it != tilde.size())
    throw std::invalid_argument("checkpoint: trailing data in weight arrays");
  return blocks;
}

}  // namespace metareg

#endif  // METAREG_NETS_HPP

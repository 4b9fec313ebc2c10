#pragma once

// Amortized conditional densities q(z | x) on top of a dense ReLU trunk with
// hand-written backpropagation.  All score gradients treat the sampled z and
// their coefficients as constants.

#include "smcwake/numkit.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace smcwake {

//-----------------------------------------------------------------------------
// Mlp

// Dense network with ReLU between layers and a linear output layer.  The
// parameters live in one flat vector: for each layer the weight matrix
// (out x in, column major) followed by the bias.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<Index> sizes) : sizes_{std::move(sizes)} {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output sizes");
    Index offset = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      weight_offsets_.push_back(offset);
      offset += sizes_[l] * sizes_[l + 1];
      bias_offsets_.push_back(offset);
      offset += sizes_[l + 1];
    }
    param_count_ = offset;
  }

  [[nodiscard]] const std::vector<Index>& sizes() const noexcept { return sizes_; }
  [[nodiscard]] Index param_count() const noexcept { return param_count_; }
  [[nodiscard]] std::size_t layer_count() const noexcept { return sizes_.size() - 1; }
  [[nodiscard]] Index input_dim() const { return sizes_.front(); }
  [[nodiscard]] Index output_dim() const { return sizes_.back(); }
  [[nodiscard]] Index bias_offset(std::size_t layer) const { return bias_offsets_[layer]; }
  [[nodiscard]] Index weight_offset(std::size_t layer) const { return weight_offsets_[layer]; }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void initialize(Vec& params, RngStream& rng) const {
    params.resize(param_count_);
    for (std::size_t l = 0; l < layer_count(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      const Index end = l + 1 < layer_count() ? weight_offsets_[l + 1] : param_count_;
      for (Index i = weight_offsets_[l]; i < end; ++i) params[i] = rng.uniform(-bound, bound);
    }
  }

  // Activations of every layer; acts.back() is the network output.
  [[nodiscard]] std::vector<Vec> forward(const Vec& params, const VecRef& x) const {
    std::vector<Vec> acts;
    acts.reserve(sizes_.size());
    acts.emplace_back(x);
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Vec h = weight(params, l) * acts.back() + bias(params, l);
      if (l + 1 < layer_count()) h = h.cwiseMax(0.0);
      acts.push_back(std::move(h));
    }
    return acts;
  }

  // Gradient w.r.t. the flat parameters given dL/d(output).
  [[nodiscard]] Vec backward(const Vec& params, const std::vector<Vec>& acts, Vec d_out) const {
    Vec grad = Vec::Zero(param_count_);
    for (std::size_t l = layer_count(); l-- > 0;) {
      const Index rows = sizes_[l + 1];
      const Index cols = sizes_[l];
      Eigen::Map<Mat>(grad.data() + weight_offsets_[l], rows, cols).noalias() = d_out * acts[l].transpose();
      grad.segment(bias_offsets_[l], rows) = d_out;
      if (l == 0) break;
      Vec d_in = weight(params, l).transpose() * d_out;
      for (Index i = 0; i < d_in.size(); ++i) {
        if (acts[l][i] <= 0.0) d_in[i] = 0.0;
      }
      d_out = std::move(d_in);
    }
    return grad;
  }

 private:
  [[nodiscard]] Eigen::Map<const Mat> weight(const Vec& params, std::size_t l) const {
    return {params.data() + weight_offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  [[nodiscard]] Eigen::Map<const Vec> bias(const Vec& params, std::size_t l) const {
    return {params.data() + bias_offsets_[l], sizes_[l + 1]};
  }

  std::vector<Index> sizes_;
  std::vector<Index> weight_offsets_;
  std::vector<Index> bias_offsets_;
  Index param_count_ = 0;
};

//-----------------------------------------------------------------------------
// Encoder interface

class Encoder {
 public:
  virtual ~Encoder() = default;

  [[nodiscard]] virtual std::string family() const = 0;
  [[nodiscard]] virtual Index latent_dim() const = 0;
  [[nodiscard]] virtual Index obs_dim() const = 0;

  [[nodiscard]] virtual Vec& params() noexcept = 0;
  [[nodiscard]] virtual const Vec& params() const noexcept = 0;
  [[nodiscard]] Index param_count() const { return params().size(); }

  [[nodiscard]] virtual double log_prob(const VecRef& x, const VecRef& z) const = 0;
  // log q(z_i | x) for every column z_i.
  [[nodiscard]] virtual Vec log_prob_batch(const VecRef& x, const Mat& zs) const = 0;
  // n i.i.d. draws as columns; never differentiated through.
  virtual Mat sample(const VecRef& x, Index n, RngStream& rng) const = 0;
  // sum_i coeffs_i * grad_phi log q(z_i | x).
  [[nodiscard]] virtual Vec score_grad(const VecRef& x, const Mat& zs, const Vec& coeffs) const = 0;

  // The conditional as a Gaussian, when the family is Gaussian.
  [[nodiscard]] virtual std::optional<GaussianDist> gaussian(const VecRef&) const { return std::nullopt; }

  [[nodiscard]] virtual std::unique_ptr<Encoder> clone() const = 0;
  [[nodiscard]] virtual nlohmann::json describe() const = 0;
};

// Trunk output -> density head.  Subclasses implement the head only.
class MlpEncoder : public Encoder {
 public:
  MlpEncoder(Index obs_dim, Index latent_dim, Index head_dim, const std::vector<Index>& hidden)
      : obs_dim_{obs_dim}, latent_dim_{latent_dim} {
    std::vector<Index> sizes{obs_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(head_dim);
    hidden_ = hidden;
    trunk_ = Mlp{std::move(sizes)};
    params_ = Vec::Zero(trunk_.param_count());
  }

  [[nodiscard]] Index latent_dim() const override { return latent_dim_; }
  [[nodiscard]] Index obs_dim() const override { return obs_dim_; }
  [[nodiscard]] Vec& params() noexcept override { return params_; }
  [[nodiscard]] const Vec& params() const noexcept override { return params_; }
  [[nodiscard]] const Mlp& trunk() const noexcept { return trunk_; }
  [[nodiscard]] const std::vector<Index>& hidden() const noexcept { return hidden_; }

  // Raw head output for x.
  [[nodiscard]] Vec head(const VecRef& x) const { return trunk_.forward(params_, x).back(); }

  // Fan-in uniform weights; the final bias is set by the head.
  void initialize(RngStream& rng) {
    trunk_.initialize(params_, rng);
    auto bias = params_.segment(trunk_.bias_offset(trunk_.layer_count() - 1), trunk_.output_dim());
    Vec b = Vec::Zero(trunk_.output_dim());
    init_head_bias(b, rng);
    bias = b;
  }

  [[nodiscard]] double log_prob(const VecRef& x, const VecRef& z) const override {
    check_dims(x, z.size());
    return head_log_prob(head(x), Mat(z));
  }

  [[nodiscard]] Vec log_prob_batch(const VecRef& x, const Mat& zs) const override {
    check_dims(x, zs.rows());
    return head_log_prob_batch(head(x), zs);
  }

  Mat sample(const VecRef& x, Index n, RngStream& rng) const override {
    check_dims(x, latent_dim_);
    return head_sample(head(x), n, rng);
  }

  [[nodiscard]] Vec score_grad(const VecRef& x, const Mat& zs, const Vec& coeffs) const override {
    check_dims(x, zs.rows());
    if (coeffs.size() != zs.cols()) throw DimensionError("score_grad: coefficient count mismatch");
    if (coeffs.isZero(0.0)) return Vec::Zero(params_.size());
    auto acts = trunk_.forward(params_, x);
    Vec d_out = Vec::Zero(trunk_.output_dim());
    head_accumulate_grad(acts.back(), zs, coeffs, d_out);
    return trunk_.backward(params_, acts, std::move(d_out));
  }

 protected:
  virtual void init_head_bias(Vec& bias, RngStream& rng) const = 0;
  [[nodiscard]] virtual double head_log_prob(const Vec& out, const Mat& z) const {
    return head_log_prob_batch(out, z)[0];
  }
  [[nodiscard]] virtual Vec head_log_prob_batch(const Vec& out, const Mat& zs) const = 0;
  virtual Mat head_sample(const Vec& out, Index n, RngStream& rng) const = 0;
  // d_out += sum_i c_i d/d(out) log q(z_i | out).
  virtual void head_accumulate_grad(const Vec& out, const Mat& zs, const Vec& coeffs, Vec& d_out) const = 0;

  nlohmann::json describe_trunk() const {
    return {{"obs_dim", obs_dim_}, {"latent_dim", latent_dim_}, {"hidden", hidden_},
            {"param_count", params_.size()}};
  }

 private:
  void check_dims(const VecRef& x, Index z_dim) const {
    if (x.size() != obs_dim_ || z_dim != latent_dim_) throw DimensionError("encoder: dimension mismatch");
  }

  Index obs_dim_;
  Index latent_dim_;
  std::vector<Index> hidden_;
  Mlp trunk_;
  Vec params_;
};

//-----------------------------------------------------------------------------
// Full-covariance Gaussian: q(z | x) = N(mu(x), L(x) L(x)^T + jitter I).
//
// Head layout: mu (p), then the lower triangle of L row by row.  Diagonal
// entries pass through exp so a zero bias starts at L = I.

class FullCovGaussianEncoder final : public MlpEncoder {
 public:
  static constexpr double kDefaultJitter = 1e-4;

  FullCovGaussianEncoder(Index obs_dim, Index latent_dim, const std::vector<Index>& hidden,
                         double jitter = kDefaultJitter)
      : MlpEncoder(obs_dim, latent_dim, latent_dim + latent_dim * (latent_dim + 1) / 2, hidden),
        jitter_{jitter} {}

  [[nodiscard]] std::string family() const override { return "fullcov"; }
  [[nodiscard]] double jitter() const noexcept { return jitter_; }

  struct Head {
    Vec mean;
    Mat lower;  // L
    Eigen::LLT<Mat> cov_llt;  // of L L^T + jitter I
    double log_det = 0.0;
  };

  [[nodiscard]] Head unpack(const Vec& out) const {
    const Index p = latent_dim();
    Head h;
    h.mean = out.head(p);
    h.lower = Mat::Zero(p, p);
    Index k = p;
    for (Index i = 0; i < p; ++i) {
      for (Index j = 0; j <= i; ++j, ++k) h.lower(i, j) = i == j ? std::exp(out[k]) : out[k];
    }
    Mat cov = h.lower * h.lower.transpose();
    cov.diagonal().array() += jitter_;
    h.cov_llt.compute(cov);
    h.log_det = 2.0 * Mat(h.cov_llt.matrixL()).diagonal().array().log().sum();
    return h;
  }

  [[nodiscard]] std::optional<GaussianDist> gaussian(const VecRef& x) const override {
    Head h = unpack(head(x));
    return GaussianDist{h.mean, h.cov_llt.matrixL()};
  }

  [[nodiscard]] std::unique_ptr<Encoder> clone() const override {
    return std::make_unique<FullCovGaussianEncoder>(*this);
  }

  [[nodiscard]] nlohmann::json describe() const override {
    auto j = describe_trunk();
    j["family"] = family();
    j["jitter"] = jitter_;
    return j;
  }

 protected:
  void init_head_bias(Vec& bias, RngStream&) const override { bias.setZero(); }

  [[nodiscard]] Vec head_log_prob_batch(const Vec& out, const Mat& zs) const override {
    const Head h = unpack(out);
    const auto p = static_cast<double>(latent_dim());
    Mat r = zs.colwise() - h.mean;
    h.cov_llt.matrixL().solveInPlace(r);
    Vec maha = r.colwise().squaredNorm().transpose();
    return (-0.5 * (maha.array() + p * kLog2Pi + h.log_det)).matrix();
  }

  Mat head_sample(const Vec& out, Index n, RngStream& rng) const override {
    const Head h = unpack(out);
    Mat eps(latent_dim(), n);
    for (Index c = 0; c < n; ++c)
      for (Index i = 0; i < latent_dim(); ++i) eps(i, c) = rng.normal();
    Mat draws = h.cov_llt.matrixL() * eps;
    return draws.colwise() + h.mean;
  }

  void head_accumulate_grad(const Vec& out, const Mat& zs, const Vec& coeffs, Vec& d_out) const override {
    const Index p = latent_dim();
    const Head h = unpack(out);
    Mat alpha = h.cov_llt.solve(zs.colwise() - h.mean);  // Sigma^{-1}(z - mu) per column
    const double csum = coeffs.sum();
    d_out.head(p) += alpha * coeffs;
    // d log q / dSigma = (alpha alpha^T - Sigma^{-1}) / 2 ; d/dL = (alpha alpha^T - Sigma^{-1}) L
    Mat g = alpha * coeffs.asDiagonal() * alpha.transpose();
    g -= csum * h.cov_llt.solve(Mat::Identity(p, p));
    Mat d_lower = g * h.lower;
    Index k = p;
    for (Index i = 0; i < p; ++i) {
      for (Index j = 0; j <= i; ++j, ++k) d_out[k] += i == j ? d_lower(i, j) * h.lower(i, i) : d_lower(i, j);
    }
  }

 private:
  double jitter_;
};

//-----------------------------------------------------------------------------
// Mixture of diagonal Gaussians.
//
// Head layout: C logits, C x p means (component major), C x p log-stds.

class MixtureDiagGaussianEncoder final : public MlpEncoder {
 public:
  MixtureDiagGaussianEncoder(Index obs_dim, Index latent_dim, Index components, const std::vector<Index>& hidden,
                             double mean_init_scale = 1.0)
      : MlpEncoder(obs_dim, latent_dim, components * (1 + 2 * latent_dim), hidden),
        components_{components},
        mean_init_scale_{mean_init_scale} {}

  [[nodiscard]] std::string family() const override { return "mixture"; }
  [[nodiscard]] Index components() const noexcept { return components_; }

  struct Head {
    Vec log_weights;  // log softmax
    Mat means;        // p x C
    Mat log_sds;      // p x C
  };

  [[nodiscard]] Head unpack(const Vec& out) const {
    const Index p = latent_dim();
    Head h;
    Vec logits = out.head(components_);
    h.log_weights = (logits.array() - log_sum_exp(logits)).matrix();
    h.means = Eigen::Map<const Mat>(out.data() + components_, p, components_);
    h.log_sds = Eigen::Map<const Mat>(out.data() + components_ * (1 + p), p, components_);
    return h;
  }

  [[nodiscard]] std::unique_ptr<Encoder> clone() const override {
    return std::make_unique<MixtureDiagGaussianEncoder>(*this);
  }

  [[nodiscard]] nlohmann::json describe() const override {
    auto j = describe_trunk();
    j["family"] = family();
    j["components"] = components_;
    j["mean_init_scale"] = mean_init_scale_;
    return j;
  }

 protected:
  void init_head_bias(Vec& bias, RngStream& rng) const override {
    bias.setZero();
    const Index p = latent_dim();
    for (Index i = 0; i < components_ * p; ++i) bias[components_ + i] = rng.uniform(-mean_init_scale_, mean_init_scale_);
  }

  // log N(z; mean_c, diag sd_c^2) for every component, C x n.
  [[nodiscard]] Mat component_log_densities(const Head& h, const Mat& zs) const {
    const Index p = latent_dim();
    Mat out(components_, zs.cols());
    for (Index c = 0; c < components_; ++c) {
      const double norm = -0.5 * static_cast<double>(p) * kLog2Pi - h.log_sds.col(c).sum();
      Vec inv_sd = (-h.log_sds.col(c)).array().exp().matrix();
      for (Index n = 0; n < zs.cols(); ++n) {
        double q = 0.0;
        for (Index d = 0; d < p; ++d) {
          const double u = (zs(d, n) - h.means(d, c)) * inv_sd[d];
          q += u * u;
        }
        out(c, n) = norm - 0.5 * q + h.log_weights[c];
      }
    }
    return out;
  }

  [[nodiscard]] Vec head_log_prob_batch(const Vec& out, const Mat& zs) const override {
    const Head h = unpack(out);
    Mat lc = component_log_densities(h, zs);
    Vec res(zs.cols());
    for (Index n = 0; n < zs.cols(); ++n) res[n] = log_sum_exp(Vec(lc.col(n)));
    return res;
  }

  Mat head_sample(const Vec& out, Index n, RngStream& rng) const override {
    const Head h = unpack(out);
    const Index p = latent_dim();
    Vec w = h.log_weights.array().exp().matrix();
    Mat draws(p, n);
    for (Index s = 0; s < n; ++s) {
      double u = rng.uniform() * w.sum();
      Index c = 0;
      while (c + 1 < components_ && u >= w[c]) u -= w[c++];
      for (Index d = 0; d < p; ++d) draws(d, s) = h.means(d, c) + std::exp(h.log_sds(d, c)) * rng.normal();
    }
    return draws;
  }

  void head_accumulate_grad(const Vec& out, const Mat& zs, const Vec& coeffs, Vec& d_out) const override {
    const Head h = unpack(out);
    const Index p = latent_dim();
    Mat lc = component_log_densities(h, zs);
    Vec pi = h.log_weights.array().exp().matrix();
    for (Index n = 0; n < zs.cols(); ++n) {
      const double c_n = coeffs[n];
      if (c_n == 0.0) continue;
      Vec col = lc.col(n);
      Vec resp = (col.array() - log_sum_exp(col)).exp().matrix();
      for (Index c = 0; c < components_; ++c) {
        d_out[c] += c_n * (resp[c] - pi[c]);
        if (resp[c] == 0.0) continue;
        for (Index d = 0; d < p; ++d) {
          const double inv_var = std::exp(-2.0 * h.log_sds(d, c));
          const double diff = zs(d, n) - h.means(d, c);
          d_out[components_ + c * p + d] += c_n * resp[c] * diff * inv_var;
          d_out[components_ * (1 + p) + c * p + d] += c_n * resp[c] * (diff * diff * inv_var - 1.0);
        }
      }
    }
  }

 private:
  Index components_;
  double mean_init_scale_;
};

//-----------------------------------------------------------------------------
// Optimizer

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient() : std::runtime_error("non-finite gradient entry; step rejected") {}
};

struct AdamState {
  Vec m;
  Vec v;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool sgd = false;  // plain phi <- phi - lr * grad

  static AdamState adam(Index n, double lr) { return {Vec::Zero(n), Vec::Zero(n), 0, lr}; }
  static AdamState plain_sgd(Index n, double lr) {
    AdamState s = adam(n, lr);
    s.sgd = true;
    return s;
  }
};

// Descends along grad.  Throws NonFiniteGradient and leaves state untouched
// if any gradient entry is not finite.
inline void adam_step(AdamState& state, Vec& params, const Vec& grad) {
  if (grad.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: shape mismatch");
  }
  if (!grad.allFinite()) throw NonFiniteGradient{};
  ++state.step;
  if (state.sgd) {
    params -= state.learning_rate * grad;
    return;
  }
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.learning_rate * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + state.epsilon);
}

//-----------------------------------------------------------------------------
// Construction and checkpoints

struct EncoderSpec {
  std::string family = "fullcov";
  std::vector<Index> hidden{64, 64};
  Index components = 8;
  double jitter = FullCovGaussianEncoder::kDefaultJitter;
  double mean_init_scale = 1.0;
};

inline std::unique_ptr<MlpEncoder> make_encoder(const EncoderSpec& spec, Index obs_dim, Index latent_dim) {
  if (spec.family == "fullcov") {
    return std::make_unique<FullCovGaussianEncoder>(obs_dim, latent_dim, spec.hidden, spec.jitter);
  }
  if (spec.family == "mixture") {
    return std::make_unique<MixtureDiagGaussianEncoder>(obs_dim, latent_dim, spec.components, spec.hidden,
                                                        spec.mean_init_scale);
  }
  throw std::invalid_argument("unknown encoder family '" + spec.family + "'");
}

namespace detail {

inline void write_le_f64(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

inline double read_le_f64(std::istream& in) {
  std::uint64_t bits = 0;
  in.read(reinterpret_cast<char*>(&bits), sizeof bits);
  if (!in) throw std::runtime_error("unexpected end of binary data");
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

// Writes <prefix>.bin (flat little-endian float64 parameters) and
// <prefix>.json (family and layer sizes).
inline void save_encoder(const Encoder& enc, const std::string& prefix) {
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + prefix + ".bin");
  for (Index i = 0; i < enc.param_count(); ++i) detail::write_le_f64(bin, enc.params()[i]);
  std::ofstream side(prefix + ".json");
  side << enc.describe().dump(2) << '\n';
}

inline std::unique_ptr<MlpEncoder> load_encoder(const std::string& prefix) {
  std::ifstream side(prefix + ".json");
  if (!side) throw std::runtime_error("cannot read " + prefix + ".json");
  const auto j = nlohmann::json::parse(side);
  EncoderSpec spec;
  spec.family = j.at("family").get<std::string>();
  spec.hidden = j.at("hidden").get<std::vector<Index>>();
  if (spec.family == "fullcov") spec.jitter = j.at("jitter").get<double>();
  if (spec.family == "mixture") {
    spec.components = j.at("components").get<Index>();
    spec.mean_init_scale = j.value("mean_init_scale", 1.0);
  }
  auto enc = make_encoder(spec, j.at("obs_dim").get<Index>(), j.at("latent_dim").get<Index>());
  if (enc->param_count() != j.at("param_count").get<Index>()) throw std::runtime_error("param_count mismatch");
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + prefix + ".bin");
  for (Index i = 0; i < enc->param_count(); ++i) enc->params()[i] = detail::read_le_f64(bin);
  return enc;
}

}  // namespace smcwake

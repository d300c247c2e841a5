#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "unihetero/core/layers.hpp"
#include "unihetero/core/optim.hpp"

// Per-token conditional diffusion head: epsilon-prediction DDPM with a linear
// beta schedule. The network sees [x_t, sinusoidal(t), condition] and
// predicts the noise that was added.

namespace unihetero {

struct DiffusionConfig {
  std::size_t timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t hidden = 256;
  std::size_t depth = 3;
  std::size_t time_dim = 32;

  void validate() const {
    if (timesteps < 1) throw std::invalid_argument("DiffusionConfig: timesteps must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
      throw std::invalid_argument("DiffusionConfig: need 0 < beta_start <= beta_end < 1");
    if (time_dim == 0 || time_dim % 2 != 0) throw std::invalid_argument("DiffusionConfig: time_dim must be even and positive");
    if (hidden == 0 || depth == 0) throw std::invalid_argument("DiffusionConfig: hidden and depth must be positive");
  }
};

inline void to_json(nlohmann::json& j, const DiffusionConfig& c) {
  j = nlohmann::json{{"timesteps", c.timesteps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end},
                     {"hidden", c.hidden},       {"depth", c.depth},           {"time_dim", c.time_dim}};
}
inline void from_json(const nlohmann::json& j, DiffusionConfig& c) {
  c.timesteps = j.value("timesteps", c.timesteps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.hidden = j.value("hidden", c.hidden);
  c.depth = j.value("depth", c.depth);
  c.time_dim = j.value("time_dim", c.time_dim);
}

/// Schedule tables indexed by t = 1..T (index 0 holds alpha_bar = 1).
class NoiseSchedule {
 public:
  explicit NoiseSchedule(const DiffusionConfig& cfg) : t_(cfg.timesteps) {
    cfg.validate();
    beta_.assign(t_ + 1, 0.0);
    alpha_bar_.assign(t_ + 1, 1.0);
    for (std::size_t t = 1; t <= t_; ++t) {
      const double frac = t_ == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(t_ - 1);
      beta_[t] = cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start);
      alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta_[t]);
    }
  }

  std::size_t timesteps() const { return t_; }
  double beta(std::size_t t) const { return beta_.at(check(t)); }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
  /// Posterior variance of q(x_{t-1} | x_t, x_0).
  double posterior_variance(std::size_t t) const {
    check(t);
    return beta_[t] * (1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]);
  }

  /// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
  template <class T>
  std::vector<T> add_noise(const std::vector<T>& x0, std::size_t t, const std::vector<T>& eps) const {
    check(t);
    if (x0.size() != eps.size()) throw std::invalid_argument("add_noise: x0 and eps sizes differ");
    const double a = std::sqrt(alpha_bar_[t]), s = std::sqrt(1.0 - alpha_bar_[t]);
    std::vector<T> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i)
      out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + s * static_cast<double>(eps[i]));
    return out;
  }

 private:
  std::size_t check(std::size_t t) const {
    if (t < 1 || t > t_) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(t_) + "]");
    return t;
  }
  std::size_t t_;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// Sinusoidal embedding of integer timesteps -> [rows, dim].
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out({t.size(), dim});
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[r * dim + i] = static_cast<T>(std::sin(t[r] * freq));
      out[r * dim + half + i] = static_cast<T>(std::cos(t[r] * freq));
    }
  return out;
}

/// Noise predictor: maps (x_t rows, timestep per row) to predicted noise rows.
template <class T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>& x_t, const std::vector<int>& t)>;

template <class T>
struct DiffusionDraw {
  std::vector<int> t;
  Tensor<T> eps;
  Tensor<T> x_t;
};

/// Draws t ~ U{1..T} and eps ~ N(0, I) per row and forms x_t from x0 [rows, dim].
template <class T>
DiffusionDraw<T> draw_noisy(const NoiseSchedule& schedule, const Tensor<T>& x0, Rng& rng) {
  const std::size_t rows = x0.rows(), dim = x0.cols();
  DiffusionDraw<T> d{std::vector<int>(rows), Tensor<T>(x0.shape()), Tensor<T>(x0.shape())};
  for (std::size_t r = 0; r < rows; ++r) {
    d.t[r] = static_cast<int>(1 + rng.index(schedule.timesteps()));
    const double a = std::sqrt(schedule.alpha_bar(static_cast<std::size_t>(d.t[r])));
    const double s = std::sqrt(1.0 - schedule.alpha_bar(static_cast<std::size_t>(d.t[r])));
    for (std::size_t c = 0; c < dim; ++c) {
      const std::size_t i = r * dim + c;
      d.eps[i] = static_cast<T>(rng.normal());
      d.x_t[i] = static_cast<T>(a * static_cast<double>(x0[i]) + s * static_cast<double>(d.eps[i]));
    }
  }
  return d;
}

/// Mean over rows of ||eps - eps_hat||^2 (summed over latent dims).
template <class T>
Tensor<T> diffusion_loss(const NoiseSchedule& schedule, const Tensor<T>& x0, const NoisePredictor<T>& predict, Rng& rng) {
  if (x0.rank() != 2 || x0.rows() == 0) throw ShapeError("diffusion_loss: expected [rows, dim], got " + shape_str(x0.shape()));
  const auto d = draw_noisy(schedule, x0, rng);
  const auto pred = predict(d.x_t, d.t);
  if (pred.shape() != x0.shape()) throw ShapeError("diffusion_loss: predictor output", pred.shape(), x0.shape());
  const auto diff = sub(pred, d.eps);
  return scale(sum(mul(diff, diff)), static_cast<T>(1.0 / static_cast<double>(x0.rows())));
}

/// Ancestral sampling from x_T ~ N(0, I); posterior variance noise, none at t = 1.
template <class T>
std::vector<T> ancestral_sample(const NoiseSchedule& schedule, std::size_t rows, std::size_t dim, const NoisePredictor<T>& predict,
                                Rng& rng) {
  NoGradScope<T> no_grad;
  Tensor<T> x({rows, dim});
  for (auto& v : x.data()) v = static_cast<T>(rng.normal());
  for (std::size_t t = schedule.timesteps(); t >= 1; --t) {
    const auto eps = predict(x, std::vector<int>(rows, static_cast<int>(t)));
    const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    const double sigma = t > 1 ? std::sqrt(schedule.posterior_variance(t)) : 0.0;
    Tensor<T> next({rows, dim});
    for (std::size_t i = 0; i < rows * dim; ++i) {
      double v = inv_sqrt_alpha * (static_cast<double>(x[i]) - coef * static_cast<double>(eps[i]));
      if (t > 1) v += sigma * rng.normal();
      next[i] = static_cast<T>(v);
    }
    x = next;
  }
  return std::vector<T>(x.data().begin(), x.data().end());
}

template <class T>
struct ResidualBlock {
  LayerNorm<T> norm;
  Linear<T> fc1, fc2;

  Tensor<T> operator()(const Tensor<T>& h) const { return add(h, fc2(silu(fc1(norm(h))))); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    norm.collect(out, prefix + ".norm");
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

/// eps_theta(x_t | t, cond): residual MLP over the concatenated input.
template <class T>
class DiffusionHead {
 public:
  DiffusionHead(const DiffusionConfig& cfg, std::size_t latent_dim, std::size_t cond_dim, Rng& rng)
      : cfg_(cfg), schedule_(cfg), latent_dim_(latent_dim), cond_dim_(cond_dim) {
    const std::size_t in = latent_dim + cfg.time_dim + cond_dim;
    input_ = Linear<T>(in, cfg.hidden, rng);
    const double gain = 1.0 / std::sqrt(static_cast<double>(cfg.depth));
    for (std::size_t i = 0; i < cfg.depth; ++i)
      blocks_.push_back({LayerNorm<T>(cfg.hidden), Linear<T>(cfg.hidden, cfg.hidden, rng), Linear<T>(cfg.hidden, cfg.hidden, rng, true, gain)});
    out_norm_ = LayerNorm<T>(cfg.hidden);
    output_ = Linear<T>(cfg.hidden, latent_dim, rng, true, 0.1);
  }

  const DiffusionConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t cond_dim() const { return cond_dim_; }

  Tensor<T> predict_noise(const Tensor<T>& x_t, const std::vector<int>& t, const Tensor<T>& cond) const {
    if (x_t.rank() != 2 || x_t.cols() != latent_dim_) throw ShapeError("diffusion head x_t", x_t.shape(), Shape{x_t.rows(), latent_dim_});
    if (cond.rank() != 2 || cond.cols() != cond_dim_ || cond.rows() != x_t.rows())
      throw ShapeError("diffusion head condition", cond.shape(), Shape{x_t.rows(), cond_dim_});
    auto h = input_(concat_cols<T>({x_t, timestep_embedding<T>(t, cfg_.time_dim), cond}));
    for (const auto& b : blocks_) h = b(h);
    return output_(out_norm_(h));
  }

  NoisePredictor<T> predictor(const Tensor<T>& cond) const {
    return [this, cond](const Tensor<T>& x_t, const std::vector<int>& t) { return predict_noise(x_t, t, cond); };
  }

  /// Diffusion loss of target rows x0 [N, latent_dim] conditioned on cond [N, cond_dim].
  Tensor<T> loss(const Tensor<T>& x0, const Tensor<T>& cond, Rng& rng) const {
    return diffusion_loss<T>(schedule_, x0, predictor(cond), rng);
  }

  /// One latent per condition row, flattened row-major.
  std::vector<T> sample(const Tensor<T>& cond, Rng& rng) const {
    return ancestral_sample<T>(schedule_, cond.rows(), latent_dim_, predictor(cond), rng);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    input_.collect(out, prefix + ".input");
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".blocks." + std::to_string(i));
    out_norm_.collect(out, prefix + ".out_norm");
    output_.collect(out, prefix + ".output");
  }

  ParameterList<T> parameters(const std::string& prefix = "head") const {
    ParameterList<T> out;
    collect(out, prefix);
    return out;
  }

 private:
  DiffusionConfig cfg_;
  NoiseSchedule schedule_;
  std::size_t latent_dim_, cond_dim_;
  Linear<T> input_;
  std::vector<ResidualBlock<T>> blocks_;
  LayerNorm<T> out_norm_;
  Linear<T> output_;
};

/// Classes for decoder warm-up: 0 = empty cell, else 1 + shape * colors + color.
inline constexpr std::size_t kWarmupClasses = 13;

template <class T>
struct WarmupExample {
  std::size_t label = 0;
  std::vector<T> latent;
};

struct WarmupConfig {
  std::size_t steps = 500;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

template <class T>
struct WarmupResult {
  Tensor<T> class_embedding;  // [classes, cond_dim]
  std::vector<double> losses;
};

/// Pretrains the head on (class label, latent) pairs with a learned class
/// embedding standing in for the backbone's hidden state.
template <class T>
WarmupResult<T> warmup_pretrain(DiffusionHead<T>& head, const std::vector<WarmupExample<T>>& data, const WarmupConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("warmup_pretrain: empty dataset");
  Rng rng(mix_seed(cfg.seed, 0x3a9b));
  WarmupResult<T> result;
  result.class_embedding = make_normal_parameter<T>({kWarmupClasses, head.cond_dim()}, 1.0, rng);
  if (cfg.steps == 0) return result;
  auto params = head.parameters();
  params.push_back({"warmup.class_embedding", result.class_embedding});
  AdamW<T> opt(params, AdamWConfig{});
  const std::size_t dim = head.latent_dim();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tensor<T> x0({cfg.batch, dim});
    std::vector<std::size_t> labels(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& ex = data[rng.index(data.size())];
      if (ex.latent.size() != dim) throw ShapeError("warmup_pretrain: latent width " + std::to_string(ex.latent.size()));
      if (ex.label >= kWarmupClasses) throw std::out_of_range("warmup_pretrain: label out of range");
      labels[b] = ex.label;
      std::copy(ex.latent.begin(), ex.latent.end(), x0.data().begin() + static_cast<std::ptrdiff_t>(b * dim));
    }
    opt.zero_grad();
    TapeScope<T> scope;
    auto loss = head.loss(x0, gather_rows(result.class_embedding, labels), rng);
    result.losses.push_back(static_cast<double>(loss.item()));
    backward(loss);
    clip_grad_norm(params, 1.0);
    opt.step(cosine_lr(cfg.lr, static_cast<long>(step), static_cast<long>(cfg.steps), 0.03));
  }
  return result;
}

}  // namespace unihetero

#pragma once

#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "unihetero/core/layers.hpp"
#include "unihetero/core/optim.hpp"
#include "unihetero/pixel_decoder.hpp"

namespace unihetero {

enum class InvertVariant { Mlp1, Mlp3Norm, EmaMlp1, DiffusionHead };
enum class RegressionTarget { VisionEncoderOutput, InputEmbedding };
enum class RegressionLoss { Cosine, Mse };
/// How the input-embedding target is held fixed: an EMA copy of the
/// projector, or the online projector behind a gradient barrier.
enum class TargetStabilizer { Ema, Truncate };

NLOHMANN_JSON_SERIALIZE_ENUM(InvertVariant, {{InvertVariant::Mlp1, "mlp1"},
                                             {InvertVariant::Mlp3Norm, "mlp3norm"},
                                             {InvertVariant::EmaMlp1, "ema-mlp1"},
                                             {InvertVariant::DiffusionHead, "diffusion"}})
NLOHMANN_JSON_SERIALIZE_ENUM(RegressionTarget, {{RegressionTarget::VisionEncoderOutput, "vision-encoder"},
                                                {RegressionTarget::InputEmbedding, "input-embedding"}})
NLOHMANN_JSON_SERIALIZE_ENUM(RegressionLoss, {{RegressionLoss::Cosine, "cosine"}, {RegressionLoss::Mse, "mse"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TargetStabilizer, {{TargetStabilizer::Ema, "ema"}, {TargetStabilizer::Truncate, "truncate"}})

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ProjectorConfig {
  std::size_t semantic_dim = 32;
  std::size_t model_dim = 128;
  InvertVariant variant = InvertVariant::EmaMlp1;
  RegressionTarget target = RegressionTarget::InputEmbedding;
  RegressionLoss loss = RegressionLoss::Cosine;
  TargetStabilizer stabilizer = TargetStabilizer::Ema;
  double ema_momentum = 0.99;
  std::size_t mlp3_hidden_mult = 4;
  DiffusionConfig semantic_diffusion{100, 1e-4, 0.02, 256, 3, 32};

  std::size_t target_dim() const { return target == RegressionTarget::InputEmbedding ? model_dim : semantic_dim; }

  void validate() const {
    if (variant == InvertVariant::DiffusionHead && loss == RegressionLoss::Cosine)
      throw ConfigError("invert projector: the diffusion head is trained with its own noise-regression (MSE) loss, not cosine");
    if (variant == InvertVariant::EmaMlp1 && target != RegressionTarget::InputEmbedding)
      throw ConfigError("invert projector: the momentum variant regresses the input embedding");
    if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) throw ConfigError("ema_momentum must lie in [0, 1)");
    if (semantic_dim == 0 || model_dim == 0) throw ConfigError("projector dims must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ProjectorConfig& c) {
  j = nlohmann::json{{"semantic_dim", c.semantic_dim}, {"model_dim", c.model_dim},           {"variant", c.variant},
                     {"target", c.target},             {"loss", c.loss},                     {"stabilizer", c.stabilizer},
                     {"ema_momentum", c.ema_momentum}, {"mlp3_hidden_mult", c.mlp3_hidden_mult}, {"semantic_diffusion", c.semantic_diffusion}};
}
inline void from_json(const nlohmann::json& j, ProjectorConfig& c) {
  c.semantic_dim = j.value("semantic_dim", c.semantic_dim);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.variant = j.value("variant", c.variant);
  c.target = j.value("target", c.target);
  c.loss = j.value("loss", c.loss);
  c.stabilizer = j.value("stabilizer", c.stabilizer);
  c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
  c.mlp3_hidden_mult = j.value("mlp3_hidden_mult", c.mlp3_hidden_mult);
  c.semantic_diffusion = j.value("semantic_diffusion", c.semantic_diffusion);
}

/// x^s -> e: Linear, GELU, Linear.
template <class T>
struct VisualProjector {
  Linear<T> fc1, fc2;

  VisualProjector() = default;
  VisualProjector(std::size_t semantic_dim, std::size_t model_dim, Rng& rng)
      : fc1(semantic_dim, model_dim, rng), fc2(model_dim, model_dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& x_s) const {
    if (x_s.rank() != 2 || x_s.cols() != fc1.in_features())
      throw ShapeError("visual projector", x_s.shape(), Shape{x_s.rows(), fc1.in_features()});
    return fc2(gelu(fc1(x_s)));
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }

  /// Detached deep copy (for the EMA target network).
  VisualProjector copy() const {
    VisualProjector c;
    c.fc1.weight = fc1.weight.clone();
    c.fc1.bias = fc1.bias.clone();
    c.fc2.weight = fc2.weight.clone();
    c.fc2.bias = fc2.bias.clone();
    return c;
  }
};

/// z -> e_hat. MLP variants are deterministic; the diffusion variant predicts
/// noise on the target and produces e_hat by sampling.
template <class T>
class InvertProjector {
 public:
  InvertProjector(const ProjectorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.model_dim, out = cfg_.target_dim();
    switch (cfg_.variant) {
      case InvertVariant::Mlp1:
      case InvertVariant::EmaMlp1:
        layers_.emplace_back(d, d, rng);
        layers_.emplace_back(d, out, rng);
        break;
      case InvertVariant::Mlp3Norm: {
        const std::size_t h = cfg_.mlp3_hidden_mult * d;
        layers_.emplace_back(d, h, rng);
        layers_.emplace_back(h, h, rng);
        layers_.emplace_back(h, out, rng);
        norms_.emplace_back(h);
        norms_.emplace_back(h);
        break;
      }
      case InvertVariant::DiffusionHead:
        head_.emplace(cfg_.semantic_diffusion, out, d, rng);
        break;
    }
  }

  const ProjectorConfig& config() const { return cfg_; }
  bool is_diffusion() const { return head_.has_value(); }

  /// Deterministic prediction for MLP variants.
  Tensor<T> operator()(const Tensor<T>& z) const {
    if (head_) throw std::logic_error("invert projector: diffusion variant predicts by sampling, use predict()");
    if (layers_.size() == 2) return layers_[1](gelu(layers_[0](z)));
    auto h = gelu(norms_[0](layers_[0](z)));
    h = gelu(norms_[1](layers_[1](h)));
    return layers_[2](h);
  }

  /// e_hat for inference: network output, or a diffusion sample.
  Tensor<T> predict(const Tensor<T>& z, Rng& rng) const {
    if (!head_) return (*this)(z);
    NoGradScope<T> off;
    return Tensor<T>({z.rows(), cfg_.target_dim()}, head_->sample(z, rng));
  }

  /// Regression loss of this projector against fixed target rows.
  Tensor<T> regression_loss(const Tensor<T>& z, const Tensor<T>& target, Rng& rng) const {
    if (head_) return head_->loss(target, z, rng);
    const auto pred = (*this)(z);
    return cfg_.loss == RegressionLoss::Cosine ? ploss(target, pred) : mse_regression_loss(target, pred);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".fc" + std::to_string(i + 1));
    for (std::size_t i = 0; i < norms_.size(); ++i) norms_[i].collect(out, prefix + ".norm" + std::to_string(i + 1));
    if (head_) head_->collect(out, prefix + ".diffusion");
  }

  std::size_t parameter_count() const {
    ParameterList<T> ps;
    collect(ps, "p");
    std::size_t n = 0;
    for (const auto& p : ps) n += p.tensor.numel();
    return n;
  }

  /// Mean over rows of -cos(target, prediction).
  static Tensor<T> ploss(const Tensor<T>& target, const Tensor<T>& pred) { return scale(mean(cosine_similarity(target, pred)), T(-1)); }

  static Tensor<T> mse_regression_loss(const Tensor<T>& target, const Tensor<T>& pred) { return mse(pred, target); }

 private:
  ProjectorConfig cfg_;
  std::vector<Linear<T>> layers_;
  std::vector<LayerNorm<T>> norms_;
  std::optional<DiffusionHead<T>> head_;
};

template <class T>
Tensor<T> ploss(const Tensor<T>& target, const Tensor<T>& pred) {
  return InvertProjector<T>::ploss(target, pred);
}

template <class T>
Tensor<T> mse_regression_loss(const Tensor<T>& target, const Tensor<T>& pred) {
  return InvertProjector<T>::mse_regression_loss(target, pred);
}

}  // namespace unihetero

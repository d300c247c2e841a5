#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "unihetero/backbone.hpp"
#include "unihetero/pixel_decoder.hpp"
#include "unihetero/projectors.hpp"
#include "unihetero/toyworld.hpp"

namespace unihetero {

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"model_dim", c.model_dim},       {"num_heads", c.num_heads},
                     {"vocab_size", c.vocab_size}, {"qknorm", c.qknorm},             {"zloss_weight", c.zloss_weight},
                     {"max_seq_len", c.max_seq_len}};
}
inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.num_layers = j.value("num_layers", c.num_layers);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.qknorm = j.value("qknorm", c.qknorm);
  c.zloss_weight = j.value("zloss_weight", c.zloss_weight);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
}

struct ModelConfig {
  WorldConfig world;
  BackboneConfig backbone;
  ProjectorConfig projector;
  DiffusionConfig pixel;
  std::uint64_t init_seed = 0;

  ModelConfig() { backbone.vocab_size = Vocab::kSize; }

  /// Fills derived widths so the parts agree with each other.
  ModelConfig& resolve() {
    if (backbone.vocab_size == 0) backbone.vocab_size = Vocab::kSize;
    projector.model_dim = backbone.model_dim;
    projector.semantic_dim = world.semantic_dim;
    return *this;
  }

  void validate() const {
    world.validate();
    backbone.validate();
    projector.validate();
    pixel.validate();
    if (backbone.vocab_size < Vocab::instance().size())
      throw ConfigError("vocab_size " + std::to_string(backbone.vocab_size) + " smaller than the token table");
    if (projector.model_dim != backbone.model_dim || projector.semantic_dim != world.semantic_dim)
      throw ConfigError("projector dims disagree with backbone/world; call resolve()");
  }

  bool uses_ema_projector() const {
    return projector.variant == InvertVariant::EmaMlp1 && projector.stabilizer == TargetStabilizer::Ema;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"world", c.world}, {"backbone", c.backbone}, {"projector", c.projector}, {"pixel", c.pixel}, {"init_seed", c.init_seed}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.world = j.value("world", c.world);
  c.backbone = j.value("backbone", c.backbone);
  c.projector = j.value("projector", c.projector);
  c.pixel = j.value("pixel", c.pixel);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.resolve();
}

/// Backbone, visual projector (+ optional EMA copy), invert projector and
/// pixel diffusion head.
template <class T>
class UnifiedModel {
 public:
  explicit UnifiedModel(ModelConfig cfg) : cfg_(std::move(cfg.resolve())), rng_(cfg_.init_seed) {
    cfg_.validate();
    backbone_.emplace(cfg_.backbone, rng_);
    projector_ = VisualProjector<T>(cfg_.world.semantic_dim, cfg_.backbone.model_dim, rng_);
    invert_.emplace(cfg_.projector, rng_);
    pixel_head_.emplace(cfg_.pixel, cfg_.world.pixel_dim(), cfg_.backbone.model_dim, rng_);
    if (cfg_.uses_ema_projector()) ema_projector_ = projector_.copy();
  }

  const ModelConfig& config() const { return cfg_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  const VisualProjector<T>& projector() const { return projector_; }
  const VisualProjector<T>* ema_projector() const { return ema_projector_ ? &*ema_projector_ : nullptr; }
  const InvertProjector<T>& invert() const { return *invert_; }
  const DiffusionHead<T>& pixel_head() const { return *pixel_head_; }
  DiffusionHead<T>& pixel_head() { return *pixel_head_; }

  /// Parameters updated by the optimizer.
  ParameterList<T> trainable() const {
    ParameterList<T> out;
    backbone_->collect(out, "backbone");
    projector_.collect(out, "projector");
    invert_->collect(out, "invert");
    pixel_head_->collect(out, "pixel_head");
    return out;
  }

  ParameterList<T> backbone_parameters() const {
    ParameterList<T> out;
    backbone_->collect(out, "backbone");
    return out;
  }
  ParameterList<T> projector_parameters() const {
    ParameterList<T> out;
    projector_.collect(out, "projector");
    return out;
  }
  ParameterList<T> ema_parameters() const {
    ParameterList<T> out;
    if (ema_projector_) ema_projector_->collect(out, "ema_projector");
    return out;
  }
  ParameterList<T> pixel_head_parameters() const { return pixel_head_->parameters("pixel_head"); }

  /// Everything persisted in a checkpoint, in a fixed order.
  ParameterList<T> state() const {
    auto out = trainable();
    for (auto& p : ema_parameters()) out.push_back(p);
    return out;
  }

  void update_ema() {
    if (!ema_projector_) return;
    auto target = ema_parameters();
    ema_update(target, projector_parameters(), static_cast<T>(cfg_.projector.ema_momentum));
  }

  /// Semantic regression target rows for semantic features x_s.
  Tensor<T> regression_target(const Tensor<T>& x_s) const {
    if (cfg_.projector.target == RegressionTarget::VisionEncoderOutput) return x_s.clone();
    NoGradScope<T> off;
    if (ema_projector_) return (*ema_projector_)(x_s);
    return stop_gradient(projector_(x_s));
  }

  /// Maps an invert-projector prediction to a backbone input embedding.
  Tensor<T> commit_embedding(const Tensor<T>& prediction) const {
    if (cfg_.projector.target == RegressionTarget::InputEmbedding) return prediction;
    return projector_(prediction);
  }

 private:
  ModelConfig cfg_;
  Rng rng_;
  std::optional<Backbone<T>> backbone_;
  VisualProjector<T> projector_;
  std::optional<VisualProjector<T>> ema_projector_;
  std::optional<InvertProjector<T>> invert_;
  std::optional<DiffusionHead<T>> pixel_head_;
};

}  // namespace unihetero

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "unihetero/checkpoint.hpp"
#include "unihetero/eval.hpp"
#include "unihetero/model.hpp"
#include "unihetero/sequences.hpp"

namespace unihetero {

enum class GradientGating { None, BlockDiffuToBackbone };
NLOHMANN_JSON_SERIALIZE_ENUM(GradientGating, {{GradientGating::None, "none"}, {GradientGating::BlockDiffuToBackbone, "block-diffu-to-backbone"}})

/// One row of an ablation matrix.
struct ExperimentSpec {
  std::string id = "custom";
  bool ploss_on = true;
  bool diffuloss_on = true;
  GradientGating gating = GradientGating::None;
  bool warm_start_head = false;
  InvertVariant variant = InvertVariant::EmaMlp1;
  RegressionTarget target = RegressionTarget::InputEmbedding;
  RegressionLoss loss = RegressionLoss::Cosine;
};

inline void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  j = nlohmann::json{{"id", s.id},           {"ploss_on", s.ploss_on},   {"diffuloss_on", s.diffuloss_on}, {"gating", s.gating},
                     {"warm_start_head", s.warm_start_head}, {"variant", s.variant}, {"target", s.target}, {"loss", s.loss}};
}
inline void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  s.id = j.value("id", s.id);
  s.ploss_on = j.value("ploss_on", s.ploss_on);
  s.diffuloss_on = j.value("diffuloss_on", s.diffuloss_on);
  s.gating = j.value("gating", s.gating);
  s.warm_start_head = j.value("warm_start_head", s.warm_start_head);
  s.variant = j.value("variant", s.variant);
  s.target = j.value("target", s.target);
  s.loss = j.value("loss", s.loss);
}

/// Generation-strategy ablation: baseline, +ploss (pixel loss gated away
/// from the backbone), +diffuloss, +decoder warm-up.
inline std::vector<ExperimentSpec> table1_specs() {
  ExperimentSpec base;
  auto exp1 = base, exp2 = base, exp3 = base, exp4 = base;
  exp1.id = "exp1";
  exp1.ploss_on = exp1.diffuloss_on = false;
  exp2.id = "exp2";
  exp2.gating = GradientGating::BlockDiffuToBackbone;
  exp3.id = "exp3";
  exp4.id = "exp4";
  exp4.warm_start_head = true;
  return {exp1, exp2, exp3, exp4};
}

/// Invert-projector / loss / target selection.
inline std::vector<ExperimentSpec> table2_specs() {
  auto row = [](std::string id, InvertVariant v, RegressionTarget t, RegressionLoss l) {
    ExperimentSpec s;
    s.id = std::move(id);
    s.variant = v;
    s.target = t;
    s.loss = l;
    return s;
  };
  return {row("diffu-mse", InvertVariant::DiffusionHead, RegressionTarget::VisionEncoderOutput, RegressionLoss::Mse),
          row("mlp-mse", InvertVariant::Mlp1, RegressionTarget::VisionEncoderOutput, RegressionLoss::Mse),
          row("mlp-cos", InvertVariant::Mlp1, RegressionTarget::VisionEncoderOutput, RegressionLoss::Cosine),
          row("norm-3-mlp-cos", InvertVariant::Mlp3Norm, RegressionTarget::VisionEncoderOutput, RegressionLoss::Cosine),
          row("ema-mlp-llm-cos", InvertVariant::EmaMlp1, RegressionTarget::InputEmbedding, RegressionLoss::Cosine)};
}

struct TrainConfig {
  double alpha = 10.0;  // ploss weight
  double beta = 10.0;   // diffuloss weight
  double text_weight = 1.0;
  double mask_mean = 0.7;
  double mask_std = 0.15;
  double mask_min = 0.05;
  double mask_max = 1.0;
  double gen_fraction = 0.5;
  double question_fraction = 0.5;  // share of understanding samples that are QA
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double warmup_fraction = 0.03;
  double grad_clip = 1.0;
  std::size_t batch_size = 32;
  std::size_t steps = 0;  // 0: `epochs` passes over the corpus
  std::size_t epochs = 3;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: ten evaluations per run
  std::size_t eval_questions = 256;
  std::size_t eval_roundtrip = 8;
  std::size_t heldout_size = 256;
  std::size_t inference_steps = 4;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  WarmupConfig head_warmup{};

  std::size_t resolved_steps(std::size_t corpus_size) const {
    if (steps) return steps;
    return std::max<std::size_t>(1, (epochs * corpus_size + batch_size - 1) / batch_size);
  }
  std::size_t resolved_eval_every(std::size_t total) const { return eval_every ? eval_every : std::max<std::size_t>(1, total / 10); }

  void validate() const {
    if (alpha < 0 || beta < 0 || text_weight < 0) throw ConfigError("loss weights must be >= 0");
    if (!(mask_mean > 0 && mask_mean < 1)) throw ConfigError("mask_mean must lie in (0, 1)");
    if (!(mask_min > 0 && mask_min <= mask_max && mask_max <= 1)) throw ConfigError("mask clamp must satisfy 0 < min <= max <= 1");
    if (mask_std < 0) throw ConfigError("mask_std must be >= 0");
    if (gen_fraction < 0 || gen_fraction > 1) throw ConfigError("gen_fraction must lie in [0, 1]");
    if (question_fraction < 0 || question_fraction > 1) throw ConfigError("question_fraction must lie in [0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (steps == 0 && epochs == 0) throw ConfigError("either steps or epochs must be positive");
  }
};

inline void to_json(nlohmann::json& j, const WarmupConfig& c) {
  j = nlohmann::json{{"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, WarmupConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"beta", c.beta},
                     {"text_weight", c.text_weight},
                     {"mask_mean", c.mask_mean},
                     {"mask_std", c.mask_std},
                     {"mask_min", c.mask_min},
                     {"mask_max", c.mask_max},
                     {"gen_fraction", c.gen_fraction},
                     {"question_fraction", c.question_fraction},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"warmup_fraction", c.warmup_fraction},
                     {"grad_clip", c.grad_clip},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"eval_questions", c.eval_questions},
                     {"eval_roundtrip", c.eval_roundtrip},
                     {"heldout_size", c.heldout_size},
                     {"inference_steps", c.inference_steps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"head_warmup", c.head_warmup}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.text_weight = j.value("text_weight", d.text_weight);
  c.mask_mean = j.value("mask_mean", d.mask_mean);
  c.mask_std = j.value("mask_std", d.mask_std);
  c.mask_min = j.value("mask_min", d.mask_min);
  c.mask_max = j.value("mask_max", d.mask_max);
  c.gen_fraction = j.value("gen_fraction", d.gen_fraction);
  c.question_fraction = j.value("question_fraction", d.question_fraction);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_questions = j.value("eval_questions", d.eval_questions);
  c.eval_roundtrip = j.value("eval_roundtrip", d.eval_roundtrip);
  c.heldout_size = j.value("heldout_size", d.heldout_size);
  c.inference_steps = j.value("inference_steps", d.inference_steps);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.head_warmup = j.value("head_warmup", d.head_warmup);
}

/// Everything that determines a run.
struct RunConfig {
  ExperimentSpec spec;
  TrainConfig train;
  ModelConfig model;

  /// Applies the spec's variant axes and the warm-start head size to the model.
  RunConfig& resolve() {
    model.projector.variant = spec.variant;
    model.projector.target = spec.target;
    model.projector.loss = spec.loss;
    model.init_seed = train.seed;
    model.resolve();
    return *this;
  }

  void validate() const {
    train.validate();
    model.validate();
  }
};

/// Pixel head used by a spec: the warm-started head is twice as wide and deep.
inline DiffusionConfig pixel_head_for(const ExperimentSpec& spec, DiffusionConfig base) {
  if (spec.warm_start_head) {
    base.hidden *= 2;
    base.depth *= 2;
  }
  return base;
}

inline RunConfig make_run_config(const ExperimentSpec& spec, const TrainConfig& train, ModelConfig model = {}) {
  RunConfig rc{spec, train, std::move(model)};
  rc.model.pixel = pixel_head_for(spec, rc.model.pixel);
  rc.resolve();
  rc.validate();
  return rc;
}

inline void to_json(nlohmann::json& j, const RunConfig& c) { j = nlohmann::json{{"spec", c.spec}, {"train", c.train}, {"model", c.model}}; }
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  c.spec = j.value("spec", c.spec);
  c.train = j.value("train", c.train);
  c.model = j.value("model", c.model);
  c.resolve();
}

// ---------------------------------------------------------------- batches

enum class SampleRole { Caption, Question, Generation };

/// Clamped Gaussian mask rate.
inline double draw_mask_rate(const TrainConfig& cfg, Rng& rng) {
  return std::clamp(rng.normal(cfg.mask_mean, cfg.mask_std), cfg.mask_min, cfg.mask_max);
}

inline std::size_t masked_count(double rate, std::size_t tokens) {
  return std::min(tokens, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(tokens) - 1e-9)));
}

struct BatchOverrides {
  std::optional<SampleRole> role;
  std::optional<double> mask_rate;
};

template <class T>
struct TrainBatch {
  std::vector<Sequence> sequences;
  std::vector<SampleRole> roles;
  std::vector<double> mask_rates;  // per generation sample, NaN otherwise
  Tensor<T> semantic;              // [images * tokens, ds]
  Tensor<T> pixel;                 // [images * tokens, dp]
  std::size_t masked_slots = 0;
};

template <class T>
TrainBatch<T> make_batch(const std::vector<const ToySample*>& samples, const TrainConfig& cfg, const WorldConfig& world, Rng& rng,
                         const BatchOverrides& over = {}) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t n = world.tokens(), ds = world.semantic_dim, dp = world.pixel_dim();
  TrainBatch<T> b;
  b.semantic = Tensor<T>({samples.size() * n, ds});
  b.pixel = Tensor<T>({samples.size() * n, dp});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ToySample& s = *samples[i];
    if (s.semantic.size() != n * ds || s.pixel.size() != n * dp) throw ShapeError("make_batch: sample features do not match world config");
    std::copy(s.semantic.begin(), s.semantic.end(), b.semantic.ptr() + i * n * ds);
    std::copy(s.pixel.begin(), s.pixel.end(), b.pixel.ptr() + i * n * dp);
    SampleRole role;
    if (over.role) {
      role = *over.role;
    } else if (rng.bernoulli(cfg.gen_fraction)) {
      role = SampleRole::Generation;
    } else {
      role = !s.qa.empty() && rng.bernoulli(cfg.question_fraction) ? SampleRole::Question : SampleRole::Caption;
    }
    if (role == SampleRole::Question && s.qa.empty()) role = SampleRole::Caption;
    double rate = std::numeric_limits<double>::quiet_NaN();
    switch (role) {
      case SampleRole::Caption:
        b.sequences.push_back(caption_sequence(s.caption, i * n, n));
        break;
      case SampleRole::Question:
        b.sequences.push_back(question_sequence(s.qa[rng.index(s.qa.size())], i * n, n));
        break;
      case SampleRole::Generation: {
        rate = over.mask_rate ? *over.mask_rate : draw_mask_rate(cfg, rng);
        const std::size_t k = masked_count(rate, n);
        std::vector<bool> masked(n, false);
        for (std::size_t slot : rng.choose(n, k)) masked[slot] = true;
        b.masked_slots += k;
        b.sequences.push_back(generation_sequence(s.caption, i * n, masked));
        break;
      }
    }
    b.roles.push_back(role);
    b.mask_rates.push_back(rate);
  }
  return b;
}

// ---------------------------------------------------------------- losses

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct LossBreakdown {
  Tensor<T> total;  // undefined when no component is active
  double text = 0.0, ce = 0.0, zloss = 0.0, ploss = 0.0, diffu = 0.0;
  std::size_t masked = 0;
};

/// L = w_text L_text + alpha L_ploss [ploss on] + beta L_diffu [diffu on].
/// Components that are off are never evaluated, so they add nothing to the
/// tape. Under BlockDiffuToBackbone the diffusion head reads z through a
/// gradient barrier.
template <class T>
LossBreakdown<T> total_loss(const UnifiedModel<T>& model, const TrainBatch<T>& batch, const ExperimentSpec& spec, const TrainConfig& cfg,
                            Rng& loss_rng) {
  PackedBatch packed;
  const auto image_emb = model.projector()(batch.semantic);
  const auto z = forward_hidden(model, batch.sequences, image_emb, &packed);
  LossBreakdown<T> out;
  out.masked = packed.mask_rows.size();
  auto accumulate = [&](const Tensor<T>& term, double weight) {
    const auto w = weight == 1.0 ? term : scale(term, static_cast<T>(weight));
    out.total = out.total.defined() ? add(out.total, w) : w;
  };
  if (cfg.text_weight > 0.0 && !packed.target_rows.empty()) {
    const auto logits = model.backbone().logits(gather_rows(z, packed.target_rows));
    const auto tl = text_loss(logits, packed.targets, model.config().backbone.zloss_weight);
    out.text = static_cast<double>(tl.total.item());
    out.ce = static_cast<double>(tl.ce.item());
    out.zloss = static_cast<double>(tl.zloss.item());
    accumulate(tl.total, cfg.text_weight);
  }
  if (out.masked > 0 && ((spec.ploss_on && cfg.alpha > 0.0) || (spec.diffuloss_on && cfg.beta > 0.0))) {
    const auto zm = gather_rows(z, packed.mask_rows);
    if (spec.ploss_on && cfg.alpha > 0.0) {
      const auto target = model.regression_target(gather_rows(batch.semantic, packed.mask_index));
      const auto pl = model.invert().regression_loss(zm, target, loss_rng);
      out.ploss = static_cast<double>(pl.item());
      accumulate(pl, cfg.alpha);
    }
    if (spec.diffuloss_on && cfg.beta > 0.0) {
      const auto cond = spec.gating == GradientGating::BlockDiffuToBackbone ? stop_gradient(zm) : zm;
      const auto dl = model.pixel_head().loss(gather_rows(batch.pixel, packed.mask_index), cond, loss_rng);
      out.diffu = static_cast<double>(dl.item());
      accumulate(dl, cfg.beta);
    }
  }
  for (double v : {out.text, out.ploss, out.diffu})
    if (!std::isfinite(v))
      throw TrainingDiverged("non-finite loss component: text=" + std::to_string(out.text) + " ploss=" + std::to_string(out.ploss) +
                             " diffu=" + std::to_string(out.diffu));
  return out;
}

// ---------------------------------------------------------------- training loop

struct MetricRecord {
  std::size_t step = 0;
  std::size_t samples_seen = 0;
  double loss_text = 0.0;
  double loss_ploss = 0.0;
  double loss_diffu = 0.0;
  double lr = 0.0;
  double qa_accuracy = 0.0;
  double attribute_preservation = 0.0;
};

inline void to_json(nlohmann::json& j, const MetricRecord& m) {
  j = nlohmann::json{{"step", m.step},
                     {"samples_seen", m.samples_seen},
                     {"loss_text", m.loss_text},
                     {"loss_ploss", m.loss_ploss},
                     {"loss_diffu", m.loss_diffu},
                     {"lr", m.lr},
                     {"qa_accuracy", m.qa_accuracy},
                     {"attribute_preservation", m.attribute_preservation}};
}
inline void from_json(const nlohmann::json& j, MetricRecord& m) {
  m.step = j.at("step");
  m.samples_seen = j.at("samples_seen");
  m.loss_text = j.value("loss_text", 0.0);
  m.loss_ploss = j.value("loss_ploss", 0.0);
  m.loss_diffu = j.value("loss_diffu", 0.0);
  m.lr = j.value("lr", 0.0);
  m.qa_accuracy = j.value("qa_accuracy", 0.0);
  m.attribute_preservation = j.value("attribute_preservation", 0.0);
}

inline std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::vector<MetricRecord> out;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<MetricRecord>());
  return out;
}

/// Held-out questions and captions used for evaluation during training.
struct EvalSet {
  std::vector<ToySample> samples;
  std::vector<QaItem> questions;
  std::vector<std::vector<int>> captions;

  EvalSet() = default;
  EvalSet(std::vector<ToySample> s, std::size_t max_questions, std::size_t max_captions) : samples(std::move(s)) {
    questions = collect_questions(samples, max_questions);
    for (std::size_t i = 0; i < samples.size() && i < max_captions; ++i) captions.push_back(samples[i].caption);
  }
  EvalSet(const EvalSet&) = delete;
  EvalSet& operator=(const EvalSet&) = delete;
};

template <class T>
class Trainer {
 public:
  Trainer(RunConfig cfg, const std::vector<ToySample>& corpus)
      : cfg_(std::move(cfg.resolve())), corpus_(corpus), model_(cfg_.model),
        opt_(model_.trainable(), AdamWConfig{cfg_.train.beta1, cfg_.train.beta2, 1e-8, cfg_.train.weight_decay}) {
    cfg_.validate();
    if (corpus_.empty()) throw std::invalid_argument("trainer: empty corpus");
    total_steps_ = cfg_.train.resolved_steps(corpus_.size());
  }
  // The corpus is held by reference and must outlive the trainer.
  Trainer(RunConfig, std::vector<ToySample>&&) = delete;

  const RunConfig& config() const { return cfg_; }
  nlohmann::json config_json() const { return cfg_; }
  UnifiedModel<T>& model() { return model_; }
  const UnifiedModel<T>& model() const { return model_; }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t steps_done() const { return step_; }

  /// Corpus indices of the batch for a step: consecutive slices of a fresh
  /// permutation per pass.
  std::vector<const ToySample*> batch_samples(std::size_t step) const {
    const std::size_t b = cfg_.train.batch_size, n = corpus_.size();
    std::vector<const ToySample*> out;
    for (std::size_t k = step * b; k < (step + 1) * b; ++k) {
      const std::size_t epoch = k / n;
      if (epoch != cached_epoch_) {
        Rng rng(mix_seed(cfg_.train.seed, 0xE90C0000ULL + epoch));
        order_.resize(n);
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        rng.shuffle(order_);
        cached_epoch_ = epoch;
      }
      out.push_back(&corpus_[order_[k % n]]);
    }
    return out;
  }

  TrainBatch<T> batch_for(std::size_t step) const {
    Rng data_rng(mix_seed(mix_seed(cfg_.train.seed, step), 1));
    return make_batch<T>(batch_samples(step), cfg_.train, cfg_.model.world, data_rng);
  }

  /// Forward + backward without an optimizer update (grads left in place).
  LossBreakdown<T> compute_gradients(const TrainBatch<T>& batch, std::size_t step) {
    auto params = model_.trainable();
    zero_grads(params);
    Rng loss_rng(mix_seed(mix_seed(cfg_.train.seed, step), 2));
    TapeScope<T> scope;
    auto losses = total_loss(model_, batch, cfg_.spec, cfg_.train, loss_rng);
    if (losses.total.defined() && losses.total.requires_grad()) backward(losses.total);
    return losses;
  }

  LossBreakdown<T> step() { return step_on(batch_for(step_)); }

  /// One optimizer update on a given batch.
  LossBreakdown<T> step_on(const TrainBatch<T>& batch) {
    auto losses = compute_gradients(batch, step_);
    // The pixel head is clipped on its own so that diffuloss gradients cannot
    // rescale the backbone update through a shared norm.
    auto main_group = model_.backbone_parameters();
    for (auto& p : model_.projector_parameters()) main_group.push_back(p);
    model_.invert().collect(main_group, "invert");
    auto head_group = model_.pixel_head_parameters();
    last_grad_norm_ = clip_grad_norm(main_group, cfg_.train.grad_clip);
    clip_grad_norm(head_group, cfg_.train.grad_clip);
    last_lr_ = cosine_lr(cfg_.train.lr, static_cast<long>(step_), static_cast<long>(total_steps_), cfg_.train.warmup_fraction);
    opt_.step(last_lr_);
    model_.update_ema();
    ++step_;
    return losses;
  }

  double last_lr() const { return last_lr_; }
  double last_grad_norm() const { return last_grad_norm_; }

  MetricRecord evaluate(const EvalSet& eval, const LossBreakdown<T>& mean_losses) const {
    MetricRecord m;
    m.step = step_;
    m.samples_seen = step_ * cfg_.train.batch_size;
    m.loss_text = mean_losses.text;
    m.loss_ploss = mean_losses.ploss;
    m.loss_diffu = mean_losses.diffu;
    m.lr = last_lr_;
    if (!eval.questions.empty()) m.qa_accuracy = model_qa_accuracy(model_, eval.questions);
    if (!eval.captions.empty())
      m.attribute_preservation = evaluate_roundtrip(model_, eval.captions, cfg_.train.inference_steps, mix_seed(cfg_.train.seed, 0x7e57)).aggregate;
    return m;
  }

  /// Warm-up pretraining of the pixel head on the corpus's per-cell latents,
  /// persisted as its own checkpoint and loaded into the model.
  std::vector<double> warm_start_head(const std::optional<std::filesystem::path>& checkpoint_path) {
    const auto& world = cfg_.model.world;
    const std::size_t n = world.tokens(), dp = world.pixel_dim();
    std::vector<WarmupExample<T>> data;
    for (const auto& s : corpus_)
      for (std::size_t c = 0; c < n; ++c) {
        const auto& cell = s.scene.cells[c];
        const std::size_t label = cell ? 1 + static_cast<std::size_t>(cell->shape) * kNumColors + static_cast<std::size_t>(cell->color) : 0;
        data.push_back({label, std::vector<T>(s.pixel.begin() + static_cast<std::ptrdiff_t>(c * dp),
                                              s.pixel.begin() + static_cast<std::ptrdiff_t>((c + 1) * dp))});
      }
    Rng head_rng(mix_seed(cfg_.train.seed, 0x4ead));
    DiffusionHead<T> head(cfg_.model.pixel, dp, cfg_.model.backbone.model_dim, head_rng);
    auto wcfg = cfg_.train.head_warmup;
    wcfg.seed = mix_seed(cfg_.train.seed, wcfg.seed);
    const auto result = warmup_pretrain(head, data, wcfg);
    auto head_params = head.parameters("pixel_head");
    auto target = model_.pixel_head_parameters();
    if (checkpoint_path) {
      const nlohmann::json wjson = warmup_config_json();
      save_checkpoint(*checkpoint_path, head_params, wjson);
      const auto stored = read_checkpoint(*checkpoint_path, wjson);
      assign_tensors(target, stored.tensors);
    } else {
      std::vector<StoredTensor> stored;
      for (const auto& p : head_params) stored.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
      assign_tensors(target, stored);
    }
    return result.losses;
  }

  nlohmann::json warmup_config_json() const {
    return {{"pixel", cfg_.model.pixel}, {"latent_dim", cfg_.model.world.pixel_dim()}, {"cond_dim", cfg_.model.backbone.model_dim},
            {"warmup", cfg_.train.head_warmup}, {"seed", cfg_.train.seed}};
  }

 private:
  RunConfig cfg_;
  const std::vector<ToySample>& corpus_;
  UnifiedModel<T> model_;
  AdamW<T> opt_;
  std::size_t total_steps_ = 0;
  std::size_t step_ = 0;
  double last_lr_ = 0.0;
  double last_grad_norm_ = 0.0;
  mutable std::vector<std::size_t> order_;
  mutable std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
};

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path metrics() const { return dir / "metrics.jsonl"; }
  std::filesystem::path timing() const { return dir / "timing.jsonl"; }
  std::filesystem::path checkpoints() const { return dir / "checkpoints"; }
  std::filesystem::path final_checkpoint() const { return checkpoints() / "final.uhck"; }
  std::filesystem::path warmup_checkpoint() const { return checkpoints() / "warmup_head.uhck"; }
};

struct TrainOutcome {
  std::vector<MetricRecord> timeline;
  std::filesystem::path final_checkpoint;
};

/// Full training run. With `paths`, writes the resolved config, JSONL metrics,
/// a wall-clock sidecar and checkpoints; a diverging run throws after
/// keeping the last good checkpoint.
template <class T>
TrainOutcome run_training(Trainer<T>& trainer, const EvalSet& eval, const std::optional<RunPaths>& paths) {
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  const auto& cfg = trainer.config();
  std::ofstream metrics, timing;
  if (paths) {
    std::filesystem::create_directories(paths->checkpoints());
    write_text(paths->config(), trainer.config_json().dump(2) + "\n");
    metrics.open(paths->metrics(), std::ios::trunc);
    timing.open(paths->timing(), std::ios::trunc);
    if (!metrics || !timing) throw std::runtime_error("cannot open metrics files under " + paths->dir.string());
  }
  if (cfg.spec.warm_start_head) trainer.warm_start_head(paths ? std::optional(paths->warmup_checkpoint()) : std::nullopt);

  TrainOutcome outcome;
  const std::size_t total = trainer.total_steps();
  const std::size_t every = cfg.train.resolved_eval_every(total);
  LossBreakdown<T> acc;
  std::size_t acc_n = 0;
  std::optional<std::filesystem::path> last_periodic;
  const auto json_cfg = trainer.config_json();
  while (trainer.steps_done() < total) {
    const auto l = trainer.step();
    acc.text += l.text;
    acc.ploss += l.ploss;
    acc.diffu += l.diffu;
    ++acc_n;
    const std::size_t s = trainer.steps_done();
    if (s % every == 0 || s == total) {
      acc.text /= static_cast<double>(acc_n);
      acc.ploss /= static_cast<double>(acc_n);
      acc.diffu /= static_cast<double>(acc_n);
      const auto rec = trainer.evaluate(eval, acc);
      outcome.timeline.push_back(rec);
      if (paths) {
        metrics << nlohmann::json(rec).dump() << "\n" << std::flush;
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        timing << nlohmann::json{{"step", s}, {"wall_seconds", secs}}.dump() << "\n" << std::flush;
      }
      acc = {};
      acc_n = 0;
    }
    if (paths && cfg.train.checkpoint_every && s % cfg.train.checkpoint_every == 0 && s != total) {
      const auto p = paths->checkpoints() / ("step_" + std::to_string(s) + ".uhck");
      save_checkpoint(p, trainer.model().state(), json_cfg);
      if (last_periodic) std::filesystem::remove(*last_periodic);
      last_periodic = p;
    }
  }
  if (paths) {
    save_checkpoint(paths->final_checkpoint(), trainer.model().state(), json_cfg);
    outcome.final_checkpoint = paths->final_checkpoint();
  }
  return outcome;
}

}  // namespace unihetero

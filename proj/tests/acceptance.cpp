// Acceptance harness: `acceptance N` checks criterion N (1-9) and prints one
// PASS/FAIL line for it; with no argument every criterion runs in order.

#include <fcntl.h>
#include <sys/file.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace unihetero;
using namespace unihetero::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

const WorldConfig kWorld;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  // Records a named check; the criterion passes only if every check does.
  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    detail << (ok ? "" : "[failed] ") << what << "; ";
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

// ---------------------------------------------------------------- 1. gradient soundness

std::shared_ptr<const AttentionLayout> hybrid_layout() {
  // Two packed sequences; the first lets one image position see the next.
  auto layout = std::make_shared<AttentionLayout>();
  AttentionSegment a{0, 4, std::vector<std::uint8_t>(16, 0)};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j <= i; ++j) a.allowed[i * 4 + j] = 1;
  a.allowed[1 * 4 + 2] = 1;
  AttentionSegment b{4, 3, std::vector<std::uint8_t>(9, 0)};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j <= i; ++j) b.allowed[i * 3 + j] = 1;
  layout->push_back(a);
  layout->push_back(b);
  return layout;
}

Verdict criterion_1() {
  using D = double;
  Verdict v;
  const auto t0 = Clock::now();
  constexpr double h = 1e-5, tol = 1e-6;
  double worst = 0;
  std::string worst_name;
  std::size_t ops = 0;
  auto op = [&](const std::string& name, const std::function<Tensor<D>()>& f, std::vector<NamedParameter<D>> in) {
    const auto r = grad_check<D>(f, std::move(in), h);
    ++ops;
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = name + ":" + r.worst;
    }
    if (r.max_relative_error >= tol || r.checked == 0) v.check(false, name + " rel err " + sci(r.max_relative_error));
  };

  Rng rng(1);
  auto a3 = random_tensor<D>({2, 3, 4}, rng), b45 = random_tensor<D>({4, 5}, rng);
  auto a = random_tensor<D>({3, 4}, rng), b = random_tensor<D>({3, 4}, rng), bias = random_tensor<D>({4}, rng);
  auto x = random_tensor<D>({3, 5}, rng, 2.0), x8 = random_tensor<D>({3, 8}, rng), w8 = random_tensor<D>({8}, rng), b8 = random_tensor<D>({8}, rng);
  auto logits = random_tensor<D>({4, 6}, rng), p = random_tensor<D>({4, 6}, rng), q = random_tensor<D>({4, 6}, rng);
  auto src = random_tensor<D>({4, 3}, rng), base = random_tensor<D>({5, 3}, rng), part = random_tensor<D>({2, 3}, rng), wide = random_tensor<D>({4, 2}, rng);
  auto qa = random_tensor<D>({7, 8}, rng), ka = random_tensor<D>({7, 8}, rng), va = random_tensor<D>({7, 8}, rng);
  const auto layout = hybrid_layout();

  op("matmul", [&] { return project_to_scalar(matmul(a3, b45)); }, {{"a", a3}, {"b", b45}});
  op("add", [&] { return project_to_scalar(add(a, b)); }, {{"a", a}, {"b", b}});
  op("sub", [&] { return project_to_scalar(sub(a, b)); }, {{"a", a}, {"b", b}});
  op("mul", [&] { return project_to_scalar(mul(a, b)); }, {{"a", a}, {"b", b}});
  op("scale", [&] { return project_to_scalar(scale(a, 0.37)); }, {{"a", a}});
  op("add_bias", [&] { return project_to_scalar(add_bias(a, bias)); }, {{"x", a}, {"b", bias}});
  op("silu", [&] { return project_to_scalar(silu(x)); }, {{"x", x}});
  op("gelu", [&] { return project_to_scalar(gelu(x)); }, {{"x", x}});
  op("sum", [&] { return sum(mul(x, x)); }, {{"x", x}});
  op("mean", [&] { return mean(mul(x, x)); }, {{"x", x}});
  op("softmax", [&] { return project_to_scalar(softmax(x)); }, {{"x", x}});
  op("logsumexp", [&] { return project_to_scalar(logsumexp(x)); }, {{"x", x}});
  op("cross_entropy", [&] { return cross_entropy(logits, {0, 5, 2, 2}); }, {{"logits", logits}});
  op("mse", [&] { return mse(p, q); }, {{"a", p}, {"b", q}});
  op("cosine_similarity", [&] { return project_to_scalar(cosine_similarity(p, q)); }, {{"a", p}, {"b", q}});
  op("rmsnorm", [&] { return project_to_scalar(rmsnorm(x8, w8)); }, {{"x", x8}, {"w", w8}});
  op("layernorm", [&] { return project_to_scalar(layernorm(x8, w8, b8)); }, {{"x", x8}, {"w", w8}, {"b", b8}});
  op("gather_rows", [&] { return project_to_scalar(gather_rows(src, {3, 0, 3, 1})); }, {{"src", src}});
  op("scatter_rows", [&] { return project_to_scalar(scatter_rows(base, part, {4, 1})); }, {{"base", base}, {"part", part}});
  op("concat_cols", [&] { return project_to_scalar(concat_cols<D>({src, wide})); }, {{"src", src}, {"wide", wide}});
  op("concat_rows", [&] { return project_to_scalar(concat_rows<D>({base, part})); }, {{"base", base}, {"part", part}});
  op("slice_cols", [&] { return project_to_scalar(slice_cols(src, 1, 3)); }, {{"src", src}});
  op("slice_rows", [&] { return project_to_scalar(slice_rows(src, 1, 3)); }, {{"src", src}});
  op("reshape", [&] { return project_to_scalar(reshape(src, {2, 6})); }, {{"src", src}});
  op("rope", [&] { return project_to_scalar(rope(x8, {0, 5, 2}, 2)); }, {{"x", x8}});
  op("attention", [&] { return project_to_scalar(attention(qa, ka, va, 2, layout)); }, {{"q", qa}, {"k", ka}, {"v", va}});

  // Full 2-layer model: every trainable tensor, all three losses on.
  static const auto corpus = generate_corpus(42, 8, kWorld);
  std::size_t model_elems = 0;
  for (const char* id : {"exp3", "norm-3-mlp-cos", "mlp-mse"}) {
    const auto spec = spec_named(id);
    auto mc = tiny_model(2, 8);
    mc.pixel.hidden = 8;
    mc.projector.variant = spec.variant;
    mc.projector.target = spec.target;
    mc.projector.loss = spec.loss;
    mc.resolve();
    UnifiedModel<D> model(mc);
    const auto cfg = tiny_train();
    const auto batch = mixed_batch(corpus, cfg);
    const auto r = grad_check<D>(
        [&] {
          Rng lrng(11);
          return total_loss(model, batch, spec, cfg, lrng).total;
        },
        model.trainable(), h);
    model_elems += r.checked;
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = std::string(id) + ":" + r.worst;
    }
    v.check(r.max_relative_error < tol, std::string("2-layer model ") + id + " rel err " + sci(r.max_relative_error) + " over " +
                                            std::to_string(r.checked) + " params");
  }
  const double secs = seconds_since(t0);
  v.check(secs < 120.0, "runtime " + fmt(secs, 3) + " s < 120 s");
  v.detail << ops << " ops, " << model_elems << " model parameters checked, worst " << sci(worst) << " (" << worst_name << ")";
  return v;
}

// ---------------------------------------------------------------- 2. gating fidelity

template <class T>
double abs_sum(const ParameterList<T>& ps) {
  double s = 0;
  for (const auto& p : ps)
    for (T g : p.tensor.grad()) s += std::abs(static_cast<double>(g));
  return s;
}

template <class T>
std::size_t nonzero(const ParameterList<T>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps)
    for (T g : p.tensor.grad()) n += g != T(0);
  return n;
}

Verdict criterion_2() {
  Verdict v;
  const auto t0 = Clock::now();
  const auto corpus = generate_corpus(42, 64, kWorld);
  auto cfg = TrainConfig{};
  cfg.text_weight = 0.0;
  cfg.alpha = 0.0;
  const auto spec = spec_named("exp2");
  // Production-size float model on a real training batch.
  UnifiedModel<float> model(make_run_config(spec, cfg).model);
  Rng brng(3);
  const auto batch = make_batch<float>(pointers(corpus), cfg, kWorld, brng);
  for (auto& p : model.trainable()) p.tensor.zero_grad();
  Rng lrng(4);
  LossBreakdown<float> l;
  {
    TapeScope<float> scope;
    l = total_loss(model, batch, spec, cfg, lrng);
    backward(l.total);
  }
  const auto bb = nonzero(model.backbone_parameters()), proj = nonzero(model.projector_parameters());
  const double head = abs_sum(model.pixel_head_parameters());
  v.check(l.diffu > 0 && l.masked > 0, "diffuloss " + fmt(l.diffu) + " over " + std::to_string(l.masked) + " masked slots");
  v.check(bb == 0, std::to_string(bb) + " nonzero backbone grads");
  v.check(proj == 0, std::to_string(proj) + " nonzero visual-projector grads");
  v.check(head > 0, "diffusion-head |grad| sum " + sci(head));

  // Control: the same loss without the gate reaches the backbone.
  for (auto& p : model.trainable()) p.tensor.zero_grad();
  {
    Rng lrng2(4);
    TapeScope<float> scope;
    auto l3 = total_loss(model, batch, spec_named("exp3"), cfg, lrng2);
    backward(l3.total);
  }
  v.check(nonzero(model.backbone_parameters()) > 0, "ungated control reaches the backbone");
  const double secs = seconds_since(t0);
  v.check(secs < 60.0, "runtime " + fmt(secs, 3) + " s < 60 s");
  return v;
}

// ---------------------------------------------------------------- 3. mask scheduler

Verdict criterion_3() {
  Verdict v;
  const TrainConfig cfg;
  Rng rng(2024);
  double mean = 0, lo = 1e9, hi = -1e9;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double r = draw_mask_rate(cfg, rng);
    mean += r / n;
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  v.check(std::abs(mean - 0.7) <= 0.02, "mean of 10^4 draws " + fmt(mean) + " within 0.7 +/- 0.02");
  v.check(lo >= cfg.mask_min && hi <= cfg.mask_max, "range [" + fmt(lo) + ", " + fmt(hi) + "] within clamp [" + fmt(cfg.mask_min) + ", " + fmt(cfg.mask_max) + "]");

  // Masks actually applied by the batch builder follow the drawn rates.
  const auto corpus = generate_corpus(5, 64, kWorld);
  std::vector<const ToySample*> many;
  for (int k = 0; k < 40; ++k)
    for (const auto& s : corpus) many.push_back(&s);
  Rng brng(6);
  const auto batch = make_batch<float>(many, cfg, kWorld, brng, {SampleRole::Generation, std::nullopt});
  const double applied = static_cast<double>(batch.masked_slots) / static_cast<double>(many.size() * kWorld.tokens());
  // ceil(r * G^2) slots are masked, so the expected share is the mean of
  // ceil(16 r) / 16 under the clamped normal, integrated cell by cell.
  const double g2d = static_cast<double>(kWorld.tokens());
  auto phi = [&](double x) { return 0.5 * std::erfc(-(x - cfg.mask_mean) / (cfg.mask_std * std::sqrt(2.0))); };
  double expected = 0;
  for (std::size_t k = 1; k <= kWorld.tokens(); ++k) {
    const double lo_k = k == 1 ? 0.0 : phi((static_cast<double>(k) - 1) / g2d);
    const double hi_k = k == kWorld.tokens() ? 1.0 : phi(static_cast<double>(k) / g2d);
    expected += static_cast<double>(k) / g2d * (hi_k - lo_k);
  }
  v.check(std::abs(applied - expected) <= 0.01,
          "masked share in " + std::to_string(many.size()) + " generation samples " + fmt(applied) + " vs expected " + fmt(expected));

  const std::size_t g2 = kWorld.tokens();
  bool schedules_ok = true;
  for (std::size_t steps = 1; steps <= g2; ++steps) {
    const auto plan = unmask_schedule(steps, g2);
    const std::size_t total = std::accumulate(plan.commits.begin(), plan.commits.end(), std::size_t{0});
    bool ok = total == g2 && plan.masked.front() == g2 && plan.masked.back() == 0 && plan.masked.size() == steps + 1;
    for (std::size_t s = 1; s <= steps; ++s) ok = ok && plan.masked[s] < plan.masked[s - 1];
    if (!ok) schedules_ok = false;
  }
  v.check(schedules_ok, "S = 1..16: commits sum to 16, mask fraction strictly decreasing to 0");

  // The generator honours the schedule: every slot committed exactly once.
  UnifiedModel<float> model(tiny_model());
  Rng grng(7);
  const auto st = generate_image_semantic(model, corpus[0].caption, 4, grng);
  std::multiset<std::size_t> seen;
  for (const auto& step : st.schedule) seen.insert(step.begin(), step.end());
  bool once = seen.size() == g2;
  for (std::size_t i = 0; i < g2; ++i) once = once && seen.count(i) == 1;
  v.check(once, "generation with S = 4 commits each of 16 slots once");
  return v;
}

// ---------------------------------------------------------------- 4. single-image overfit

Verdict criterion_4() {
  Verdict v;
  const auto t0 = Clock::now();
  const std::vector<ToySample> one = {make_sample(
      make_scene(4, {{0, Object{ShapeKind::Circle, Color::Red}}, {10, Object{ShapeKind::Triangle, Color::Yellow}}}), kWorld, PixelCodec(kWorld))};
  const std::size_t steps = 2000;
  auto train = TrainConfig{};
  train.steps = steps;
  train.batch_size = 8;
  train.lr = 3e-3;
  train.warmup_fraction = 0.0;
  // Gated: the ungated diffusion loss competes with ploss for the masked states.
  const auto spec = spec_named("exp2");
  Trainer<float> trainer(make_run_config(spec, train), one);
  for (std::size_t s = 0; s < steps; ++s) trainer.step();
  const auto& model = trainer.model();

  // Held-out batches of the same image.
  std::vector<const ToySample*> copies(16, &one[0]);
  double cos = 0, text = 0;
  for (std::uint64_t k = 0; k < 4; ++k) {
    NoGradScope<float> off;
    Rng brng(mix_seed(900, k)), lrng(mix_seed(901, k));
    const auto gen = make_batch<float>(copies, train, kWorld, brng, {SampleRole::Generation, std::nullopt});
    cos += -total_loss(model, gen, spec, train, lrng).ploss / 4;
    const auto cap = make_batch<float>(copies, train, kWorld, brng, {SampleRole::Caption, std::nullopt});
    const auto qa = make_batch<float>(copies, train, kWorld, brng, {SampleRole::Question, std::nullopt});
    text += (total_loss(model, cap, spec, train, lrng).text + total_loss(model, qa, spec, train, lrng).text) / 8;
  }
  double latent_mse = 0;
  bool roundtrip = true;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(seed);
    const auto st = generate_image_semantic(model, one[0].caption, train.inference_steps, rng);
    latent_mse += pixel_quality(one[0].scene, decode_image(model, st.hidden, rng), kWorld).latent_mse / 4;
    Rng rrng(seed);
    roundtrip = roundtrip && roundtrip_caption(model, one[0].caption, train.inference_steps, rrng) == one[0].caption;
  }
  const double secs = seconds_since(t0);
  v.check(cos > 0.99, "ploss cosine " + fmt(cos) + " > 0.99");
  v.check(text < 0.05, "text loss " + fmt(text) + " < 0.05");
  v.check(latent_mse < 0.05, "decoded latent MSE " + fmt(latent_mse) + " < 0.05");
  v.check(roundtrip, "round-trip caption exact over 4 seeds");
  v.check(secs < 600.0, "runtime " + fmt(secs, 3) + " s < 600 s");
  v.detail << steps << " steps, " << spec.id;
  return v;
}

// ---------------------------------------------------------------- 5. pixel-decoder oracle

Verdict criterion_5() {
  Verdict v;
  const DiffusionConfig dc;
  const NoiseSchedule schedule(dc);
  const std::size_t dp = kWorld.pixel_dim();
  Rng rng(55);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x0(dp);
    for (auto& x : x0) x = rng.normal();
    const NoisePredictor<double> oracle = [&](const Tensor<double>& x_t, const std::vector<int>& t) {
      Tensor<double> eps(x_t.shape());
      for (std::size_t r = 0; r < x_t.rows(); ++r) {
        const double ab = schedule.alpha_bar(static_cast<std::size_t>(t[r]));
        for (std::size_t c = 0; c < dp; ++c) eps[r * dp + c] = (x_t[r * dp + c] - std::sqrt(ab) * x0[c]) / std::sqrt(1.0 - ab);
      }
      return eps;
    };
    const auto out = ancestral_sample<double>(schedule, 4, dp, oracle, rng);
    double mse = 0;
    for (std::size_t i = 0; i < out.size(); ++i) mse += (out[i] - x0[i % dp]) * (out[i] - x0[i % dp]);
    worst = std::max(worst, mse / static_cast<double>(out.size()));
  }
  v.check(worst < 1e-2, "oracle sampling worst MSE " + sci(worst) + " < 1e-2");

  const std::size_t rows = 10000;
  const auto x0 = random_tensor<double>({rows, dp}, rng);
  const NoisePredictor<double> zero = [](const Tensor<double>& x, const std::vector<int>&) { return Tensor<double>(x.shape()); };
  const double loss = diffusion_loss<double>(schedule, x0, zero, rng).item();
  v.check(std::abs(loss - static_cast<double>(dp)) <= 0.05 * static_cast<double>(dp),
          "zero predictor diffuloss " + fmt(loss) + " vs dp = " + std::to_string(dp) + " +/- 5%");
  return v;
}

// ---------------------------------------------------------------- 6 and 9. table1 ablation

const fs::path& acceptance_dir() {
  static const fs::path dir = UNIHETERO_ACCEPTANCE_DIR;
  return dir;
}

const std::vector<std::uint64_t> kSeeds = {0, 1, 2};
constexpr std::uint64_t kDataSeed = 7;
constexpr std::size_t kCorpusSize = 20000;

int run_cli(const std::vector<std::string>& args, const fs::path& log) {
  std::fflush(nullptr);
  const pid_t pid = fork();
  if (pid < 0) return -1;
  if (pid == 0) {
    if (!std::freopen(log.c_str(), "a", stdout) || !std::freopen(log.c_str(), "a", stderr)) _exit(127);
    std::vector<char*> argv;
    static std::string exe = UNIHETERO_CLI_PATH;
    argv.push_back(exe.data());
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    execv(exe.c_str(), argv.data());
    _exit(127);
  }
  int status = 0;
  waitpid(pid, &status, 0);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Ablation {
  int exit_code = -1;
  double ablate_wall = 0;  // seconds spent by this process in `ablate`, 0 when every run was already complete
  fs::path corpus, runs;
};

// Generates the corpus and runs the resumable table1 suite once; criteria 6
// and 9 share the result. A file lock serialises concurrent callers.
Ablation ensure_ablation() {
  Ablation a;
  a.corpus = acceptance_dir() / "data20k";
  a.runs = acceptance_dir() / "runs";
  fs::create_directories(acceptance_dir());
  const int lock = open((acceptance_dir() / ".lock").c_str(), O_CREAT | O_RDWR, 0644);
  if (lock >= 0) flock(lock, LOCK_EX);
  const auto log = acceptance_dir() / "ablate.log";
  bool have_corpus = false;
  try {
    const auto c = load_corpus(a.corpus);
    have_corpus = c.samples.size() == kCorpusSize && c.manifest.at("seed").get<std::uint64_t>() == kDataSeed;
  } catch (const std::exception&) {
  }
  if (!have_corpus)
    run_cli({"gen-data", "--corpus-size", std::to_string(kCorpusSize), "--seed", std::to_string(kDataSeed), "--out", a.corpus.string()}, log);
  const auto t0 = Clock::now();
  a.exit_code = run_cli({"ablate", "--suite", "table1", "--corpus", a.corpus.string(), "--seeds", "0,1,2", "--runs-dir", a.runs.string()}, log);
  a.ablate_wall = seconds_since(t0);
  if (lock >= 0) {
    flock(lock, LOCK_UN);
    close(lock);
  }
  return a;
}

double run_wall_seconds(const fs::path& run) {
  double last = 0;
  std::istringstream in(read_text(run / "timing.jsonl"));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) last = json::parse(line).at("wall_seconds").get<double>();
  return last;
}

Verdict criterion_6() {
  Verdict v;
  const auto a = ensure_ablation();
  v.check(a.exit_code == 0, "ablate exit code " + std::to_string(a.exit_code));
  if (a.exit_code != 0) return v;

  const auto csv = read_text(a.runs / "table1-report.csv");
  std::map<std::string, std::vector<double>> final_qa;
  std::size_t rows = 0, slopes = 0;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  v.check(line == "id,qa_acc_final,slope_a,intercept_b", "report header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    std::vector<std::string> cols;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
    if (cols.size() != 4) continue;
    final_qa[cols[0].substr(0, cols[0].find("-s"))].push_back(std::stod(cols[1]));
    slopes += cols[2].find("×10⁻⁴") != std::string::npos;
  }
  v.check(rows == 12 && slopes == 12, std::to_string(rows) + " report rows with " + std::to_string(slopes) + " slopes");
  bool all_specs = true;
  for (const char* id : {"exp1", "exp2", "exp3", "exp4"}) all_specs = all_specs && final_qa[id].size() == kSeeds.size();
  v.check(all_specs, "QA accuracy and slope for exp1-exp4 over 3 seeds");
  if (!all_specs) return v;

  auto mean = [](const std::vector<double>& xs) { return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size()); };
  const double e1 = mean(final_qa["exp1"]), e2 = mean(final_qa["exp2"]), e3 = mean(final_qa["exp3"]), e4 = mean(final_qa["exp4"]);
  v.check(e2 >= e1 - 0.01, "mean final QA exp2 " + fmt(e2) + " >= exp1 " + fmt(e1) + " - 1pp");

  double total = 0;
  for (std::uint64_t seed : kSeeds)
    for (const char* id : {"exp1", "exp2", "exp3", "exp4"}) total += run_wall_seconds(a.runs / (std::string(id) + "-s" + std::to_string(seed)));
  v.check(total < 90 * 60, "sum of run wall times " + fmt(total / 60, 4) + " min < 90 min (1 core, sequential)");
  v.detail << "exp3 " << fmt(e3) << ", exp4 " << fmt(e4) << "; orderings (not gated): exp2>exp1 " << (e2 > e1 ? "yes" : "no")
           << ", exp3<exp2 " << (e3 < e2 ? "yes" : "no");
  if (a.ablate_wall > 1) v.detail << "; ablate wall this invocation " << fmt(a.ablate_wall / 60, 4) << " min";
  return v;
}

// ---------------------------------------------------------------- 7. scaling fit

Verdict criterion_7() {
  Verdict v;
  Rng rng(77);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double a = rng.normal() * 0.01, b = rng.normal();
    std::vector<std::pair<double, double>> pts;
    const int n = 2 + static_cast<int>(rng.index(30));
    for (int i = 0; i < n; ++i) {
      const double x = static_cast<double>(i + 1) * 1.28;
      pts.emplace_back(x, a * x + b);
    }
    const auto f = fit_scaling(pts);
    worst = std::max({worst, std::abs(f.a - a), std::abs(f.b - b)});
  }
  v.check(worst < 1e-9, "noiseless lines: worst |error| " + sci(worst) + " < 1e-9");
  const auto f = fit_scaling({{1, 2}, {2, 4}});
  v.check(f.a == 2.0 && f.b == 0.0, "(1,2),(2,4) gives a = 2, b = 0");
  v.check(format_slope(0.0066) == "66×10⁻⁴", "0.0066 renders as " + format_slope(0.0066));
  ReportRow row{"exp2-s0", 0.5, {}};
  row.fit.a = 0.0066;
  row.fit.b = 0.25;
  const auto csv = report_csv({row});
  v.check(csv == "id,qa_acc_final,slope_a,intercept_b\nexp2-s0,0.5000,66×10⁻⁴,0.2500\n", "report row layout");
  return v;
}

// ---------------------------------------------------------------- 8. determinism and persistence

Verdict criterion_8() {
  Verdict v;
  const auto dir = scratch_dir("acceptance-8");
  const auto corpus = generate_corpus(8, 64, kWorld);
  const auto heldout = generate_heldout(8, 16, kWorld);
  auto run = [&](std::uint64_t seed, const std::string& name) {
    auto train = tiny_train(12, 4, seed);
    train.eval_every = 4;
    train.checkpoint_every = 6;
    Trainer<float> t(make_run_config(spec_named("exp4"), train, tiny_model()), corpus);
    run_training(t, EvalSet(heldout, 16, 2), RunPaths{dir / name});
    return read_text(dir / name / "metrics.jsonl");
  };
  const auto a = run(3, "a"), b = run(3, "b"), c = run(4, "c");
  v.check(a == b, "same seed gives bit-identical metrics.jsonl");
  v.check(a != c, "different seed gives different metrics");
  v.check(read_text(dir / "a" / "checkpoints" / "final.uhck") == read_text(dir / "b" / "checkpoints" / "final.uhck"),
          "same seed gives byte-identical final checkpoints");

  const auto rc = nlohmann::json::parse(read_text(dir / "a" / "config.json"));
  auto model = load_run_model<float>(RunPaths{dir / "a"});
  save_checkpoint(dir / "resaved.uhck", model.state(), rc);
  v.check(read_text(dir / "resaved.uhck") == read_text(dir / "a" / "checkpoints" / "final.uhck"), "checkpoint save -> load -> save byte-identical");

  export_corpus(dir / "c1", 9, 200, kWorld);
  export_corpus(dir / "c2", 9, 200, kWorld);
  v.check(read_text(dir / "c1" / "corpus.bin") == read_text(dir / "c2" / "corpus.bin") &&
              read_text(dir / "c1" / "manifest.json") == read_text(dir / "c2" / "manifest.json"),
          "corpus regeneration byte-identical");
  fs::remove_all(dir);
  return v;
}

// ---------------------------------------------------------------- 9. round trip

Verdict criterion_9() {
  Verdict v;
  const auto a = ensure_ablation();
  v.check(a.exit_code == 0, "ablate exit code " + std::to_string(a.exit_code));
  if (a.exit_code != 0) return v;
  const std::size_t n = 200;
  const auto heldout = generate_heldout(kDataSeed, n, kWorld);
  std::vector<std::vector<int>> captions;
  for (const auto& s : heldout) captions.push_back(s.caption);
  double agg = 0, base = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed : kSeeds) {
    const auto model = load_run_model<float>(RunPaths{a.runs / ("exp2-s" + std::to_string(seed))});
    const auto rt = evaluate_roundtrip(model, captions, TrainConfig{}.inference_steps, mix_seed(0xacc9, seed));
    Rng rng(mix_seed(0xba5e, seed));
    const double b = shuffled_caption_baseline(captions, kWorld.grid, rng);
    agg += rt.aggregate / static_cast<double>(kSeeds.size());
    base += b / static_cast<double>(kSeeds.size());
    per_seed << " s" << seed << " " << fmt(rt.aggregate) << " vs " << fmt(b) << " (" << rt.parse_failures << " unparsed)";
  }
  v.check(agg - base >= 0.15, "exp2 attribute preservation " + fmt(agg) + " vs shuffled baseline " + fmt(base) + ", margin " +
                                  fmt(100 * (agg - base), 3) + "pp >= 15pp");
  v.detail << n << " held-out captions;" << per_seed.str();
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<const char*, std::function<Verdict()>>> criteria = {
      {1, {"gradient soundness", criterion_1}},     {2, {"gating fidelity", criterion_2}},
      {3, {"mask scheduler", criterion_3}},         {4, {"single-image overfit", criterion_4}},
      {5, {"pixel-decoder oracle", criterion_5}},   {6, {"toy ablation protocol", criterion_6}},
      {7, {"scaling fit", criterion_7}},            {8, {"determinism and persistence", criterion_8}},
      {9, {"round-trip evaluation", criterion_9}},
  };
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) which.push_back(std::atoi(argv[i]));
  if (which.empty())
    for (const auto& [k, _] : criteria) which.push_back(k);
  bool all = true;
  for (int k : which) {
    const auto it = criteria.find(k);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << k << "\n";
      return 2;
    }
    Verdict v;
    const auto t0 = Clock::now();
    try {
      v = it->second.second();
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    all = all && v.pass;
    std::cout << "criterion " << k << " (" << it->second.first << "): " << (v.pass ? "PASS" : "FAIL") << " [" << fmt(seconds_since(t0), 3)
              << " s] " << v.detail.str() << std::endl;
  }
  return all ? 0 : 1;
}

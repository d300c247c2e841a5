#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "unihetero/unihetero.hpp"

namespace fs = std::filesystem;
using namespace unihetero;
using json = nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissingCorpus = 3;
constexpr int kExitDiverged = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by `train` and `ablate`; unset flags keep the config value.
struct TrainOptions {
  std::optional<std::size_t> steps, epochs, batch_size, eval_every, eval_questions, eval_roundtrip, heldout_size, checkpoint_every,
      warmup_steps, inference_steps;
  std::optional<double> lr, alpha, beta, mask_mean, mask_std, gen_fraction;
  std::optional<std::size_t> layers, model_dim, heads, head_hidden, head_depth, diffusion_steps;
  std::string config_file;

  void add_to(CLI::App& app) {
    app.add_option("--config", config_file, "JSON config (a run's config.json is taken verbatim)");
    app.add_option("--steps", steps, "optimizer steps (default: epochs over the corpus)");
    app.add_option("--epochs", epochs, "passes over the corpus when --steps is unset");
    app.add_option("--batch-size", batch_size);
    app.add_option("--lr", lr, "peak learning rate");
    app.add_option("--alpha", alpha, "ploss weight");
    app.add_option("--beta", beta, "diffuloss weight");
    app.add_option("--mask-mean", mask_mean);
    app.add_option("--mask-std", mask_std);
    app.add_option("--gen-fraction", gen_fraction, "probability that the image follows the text");
    app.add_option("--eval-every", eval_every, "steps between evaluations (default: ten per run)");
    app.add_option("--eval-questions", eval_questions);
    app.add_option("--eval-roundtrip", eval_roundtrip, "captions used for round-trip evaluation");
    app.add_option("--heldout-size", heldout_size);
    app.add_option("--checkpoint-every", checkpoint_every, "0 keeps only the final checkpoint");
    app.add_option("--warmup-steps", warmup_steps, "pixel-head warm-up steps for warm-start specs");
    app.add_option("--inference-steps", inference_steps);
    app.add_option("--layers", layers);
    app.add_option("--model-dim", model_dim);
    app.add_option("--heads", heads);
    app.add_option("--head-hidden", head_hidden, "pixel-head width before warm-start doubling");
    app.add_option("--head-depth", head_depth, "pixel-head depth before warm-start doubling");
    app.add_option("--diffusion-steps", diffusion_steps);
  }

  std::vector<std::string> to_args() const {
    std::vector<std::string> out;
    auto put = [&](const char* flag, const auto& v) {
      if (!v) return;
      std::ostringstream os;
      os << std::setprecision(17) << *v;
      out.push_back(flag);
      out.push_back(os.str());
    };
    if (!config_file.empty()) out.insert(out.end(), {"--config", fs::absolute(config_file).string()});
    put("--steps", steps);
    put("--epochs", epochs);
    put("--batch-size", batch_size);
    put("--lr", lr);
    put("--alpha", alpha);
    put("--beta", beta);
    put("--mask-mean", mask_mean);
    put("--mask-std", mask_std);
    put("--gen-fraction", gen_fraction);
    put("--eval-every", eval_every);
    put("--eval-questions", eval_questions);
    put("--eval-roundtrip", eval_roundtrip);
    put("--heldout-size", heldout_size);
    put("--checkpoint-every", checkpoint_every);
    put("--warmup-steps", warmup_steps);
    put("--inference-steps", inference_steps);
    put("--layers", layers);
    put("--model-dim", model_dim);
    put("--heads", heads);
    put("--head-hidden", head_hidden);
    put("--head-depth", head_depth);
    put("--diffusion-steps", diffusion_steps);
    return out;
  }

  void apply(TrainConfig& t) const {
    if (steps) t.steps = *steps;
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (lr) t.lr = *lr;
    if (alpha) t.alpha = *alpha;
    if (beta) t.beta = *beta;
    if (mask_mean) t.mask_mean = *mask_mean;
    if (mask_std) t.mask_std = *mask_std;
    if (gen_fraction) t.gen_fraction = *gen_fraction;
    if (eval_every) t.eval_every = *eval_every;
    if (eval_questions) t.eval_questions = *eval_questions;
    if (eval_roundtrip) t.eval_roundtrip = *eval_roundtrip;
    if (heldout_size) t.heldout_size = *heldout_size;
    if (checkpoint_every) t.checkpoint_every = *checkpoint_every;
    if (warmup_steps) t.head_warmup.steps = *warmup_steps;
    if (inference_steps) t.inference_steps = *inference_steps;
  }

  bool touches_model() const { return layers || model_dim || heads || head_hidden || head_depth || diffusion_steps; }

  void apply(ModelConfig& m) const {
    if (layers) m.backbone.num_layers = *layers;
    if (model_dim) m.backbone.model_dim = *model_dim;
    if (heads) m.backbone.num_heads = *heads;
    if (head_hidden) m.pixel.hidden = *head_hidden;
    if (head_depth) m.pixel.depth = *head_depth;
    if (diffusion_steps) m.pixel.timesteps = *diffusion_steps;
  }
};

std::vector<ExperimentSpec> all_specs() {
  auto out = table1_specs();
  for (auto& s : table2_specs()) out.push_back(s);
  return out;
}

ExperimentSpec spec_by_name(const std::string& name) {
  for (const auto& s : all_specs())
    if (s.id == name) return s;
  std::string known;
  for (const auto& s : all_specs()) known += " " + s.id;
  throw UsageError("unknown spec '" + name + "' (known:" + known + ")");
}

std::vector<ExperimentSpec> suite_specs(const std::string& suite) {
  if (suite == "table1") return table1_specs();
  if (suite == "table2") return table2_specs();
  throw UsageError("unknown suite '" + suite + "' (expected table1 or table2)");
}

std::string run_id(const std::string& spec, std::uint64_t seed) { return spec + "-s" + std::to_string(seed); }

/// Resolution order: defaults, config file, spec, flags.
RunConfig build_run_config(const TrainOptions& opt, const std::string& spec_name, std::optional<std::uint64_t> seed, const WorldConfig& world) {
  if (!opt.config_file.empty()) {
    const auto j = json::parse(read_text(opt.config_file));
    if (j.contains("spec")) {
      if (!spec_name.empty()) throw UsageError("--spec cannot be combined with a resolved config");
      if (opt.touches_model()) throw UsageError("model flags cannot be combined with a resolved config");
      RunConfig rc = j.get<RunConfig>();
      opt.apply(rc.train);
      if (seed) rc.train.seed = *seed;
      if (!(rc.model.world == world)) throw UsageError("config world does not match the corpus world");
      rc.resolve();
      rc.validate();
      return rc;
    }
  }
  TrainConfig train;
  ModelConfig model;
  if (!opt.config_file.empty()) {
    const auto j = json::parse(read_text(opt.config_file));
    if (j.contains("train")) train = j.at("train").get<TrainConfig>();
    if (j.contains("model")) model = j.at("model").get<ModelConfig>();
  }
  opt.apply(train);
  opt.apply(model);
  if (seed) train.seed = *seed;
  model.world = world;
  return make_run_config(spec_by_name(spec_name.empty() ? "exp3" : spec_name), train, model);
}

LoadedCorpus open_corpus(const std::string& dir) {
  if (dir.empty()) throw MissingCorpus("no corpus given (use --corpus DIR)");
  return load_corpus(dir);
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(std::size_t count, std::uint64_t seed, std::string out) {
  if (out.empty()) out = (fs::path("data") / ("corpus-s" + std::to_string(seed) + "-n" + std::to_string(count))).string();
  fs::create_directories(out);
  const auto manifest = export_corpus(out, seed, count, WorldConfig{});
  std::cout << json{{"corpus", out}, {"count", count}, {"seed", seed}, {"corpus_digest", manifest.at("corpus_digest")}}.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const TrainOptions& opt, const std::string& corpus_dir, const std::string& spec, std::optional<std::uint64_t> seed,
              std::string id, const std::string& runs_dir) {
  const auto corpus = open_corpus(corpus_dir);
  const RunConfig rc = build_run_config(opt, spec, seed, corpus.world);
  if (id.empty()) id = run_id(rc.spec.id, rc.train.seed);
  const RunPaths paths{run_root(runs_dir) / id};
  fs::create_directories(paths.checkpoints());
  fs::remove(completion_path(paths));
  write_text(paths.manifest(), make_run_manifest(id, rc, corpus_ref(corpus_dir, corpus.manifest)).dump(2) + "\n");

  Trainer<float> trainer(rc, corpus.samples);
  const EvalSet eval(generate_heldout(corpus.manifest.at("seed").get<std::uint64_t>(), rc.train.heldout_size, corpus.world),
                     rc.train.eval_questions, rc.train.eval_roundtrip);
  const auto outcome = run_training(trainer, eval, paths);
  const auto& last = outcome.timeline.back();
  write_text(completion_path(paths), json{{"ended_at", utc_timestamp()}, {"steps", trainer.steps_done()}, {"final_checkpoint", "checkpoints/final.uhck"}}.dump(2) + "\n");
  std::cout << json{{"id", id},
                    {"run_dir", paths.dir.string()},
                    {"steps", trainer.steps_done()},
                    {"qa_accuracy", last.qa_accuracy},
                    {"attribute_preservation", last.attribute_preservation},
                    {"loss_text", last.loss_text}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- ablate

struct Job {
  std::string id;
  std::vector<std::string> args;
  fs::path log;
};

pid_t spawn(const Job& job) {
  std::vector<char*> argv;
  static std::string self = fs::read_symlink("/proc/self/exe").string();
  argv.push_back(self.data());
  for (const auto& a : job.args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  std::fflush(nullptr);
  const pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("fork failed");
  if (pid == 0) {
    if (std::freopen(job.log.c_str(), "w", stdout) == nullptr || std::freopen(job.log.c_str(), "a", stderr) == nullptr) _exit(127);
    execv(self.c_str(), argv.data());
    _exit(127);
  }
  return pid;
}

int cmd_ablate(const TrainOptions& opt, const std::string& suite, const std::string& corpus_dir, const std::vector<std::uint64_t>& seeds,
               std::size_t parallel, const std::string& runs_dir, double burn_in) {
  const auto specs = suite_specs(suite);
  const auto corpus = open_corpus(corpus_dir);
  const std::string corpus_digest = corpus.manifest.at("corpus_digest");
  const fs::path root = run_root(runs_dir);
  std::vector<Job> jobs;
  std::vector<std::string> ids;
  for (std::uint64_t seed : seeds)
    for (const auto& spec : specs) {
      const RunConfig rc = build_run_config(opt, spec.id, seed, corpus.world);
      const std::string id = run_id(spec.id, seed);
      ids.push_back(id);
      const RunPaths paths{root / id};
      if (run_is_complete(paths, rc, corpus_digest)) {
        std::cout << "skip " << id << " (complete)\n";
        continue;
      }
      fs::create_directories(paths.dir);
      Job job{id, {"train", "--corpus", fs::absolute(corpus_dir).string(), "--spec", spec.id, "--seed", std::to_string(seed), "--id", id,
                   "--runs-dir", fs::absolute(root).string()},
              paths.dir / "train.log"};
      for (auto& a : opt.to_args()) job.args.push_back(a);
      jobs.push_back(std::move(job));
    }
  std::cout << std::flush;

  std::map<pid_t, std::string> running;
  std::vector<std::string> failed;
  std::size_t next = 0;
  parallel = std::max<std::size_t>(1, parallel);
  while (next < jobs.size() || !running.empty()) {
    while (next < jobs.size() && running.size() < parallel) {
      std::cout << "start " << jobs[next].id << "\n" << std::flush;
      running[spawn(jobs[next])] = jobs[next].id;
      ++next;
    }
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    if (pid < 0) throw std::runtime_error("waitpid failed");
    const auto it = running.find(pid);
    if (it == running.end()) continue;
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    std::cout << (ok ? "done " : "FAILED ") << it->second << "\n" << std::flush;
    if (!ok) failed.push_back(it->second);
    running.erase(it);
  }
  if (!failed.empty()) {
    std::cerr << "error: " << failed.size() << " run(s) failed; see train.log in their run directories\n";
    return kExitFailure;
  }
  std::vector<ReportRow> rows;
  for (const auto& id : ids) rows.push_back(report_row(id, read_metrics(RunPaths{root / id}.metrics()), burn_in));
  const auto csv = report_csv(rows);
  write_text(root / (suite + "-report.csv"), csv);
  std::cout << csv;
  return 0;
}

// ---------------------------------------------------------------- eval

RunPaths resolve_run(const std::string& run, const std::string& runs_dir) {
  if (run.empty()) throw UsageError("--run is required");
  if (fs::exists(fs::path(run) / "config.json")) return {run};
  return {run_root(runs_dir) / run};
}

LoadedCorpus corpus_for_run(const RunPaths& p, const std::string& corpus_dir) {
  if (!corpus_dir.empty()) return open_corpus(corpus_dir);
  const auto m = json::parse(read_text(p.manifest()));
  return open_corpus(m.at("corpus").at("path").get<std::string>());
}

int cmd_eval(const std::string& run, const std::string& runs_dir, const std::string& corpus_dir, std::size_t questions, std::size_t captions,
             std::size_t generations, std::size_t steps, std::uint64_t seed) {
  const RunPaths p = resolve_run(run, runs_dir);
  const auto model = load_run_model<float>(p);
  const auto corpus = corpus_for_run(p, corpus_dir);
  const auto& world = model.config().world;
  const auto heldout = generate_heldout(corpus.manifest.at("seed").get<std::uint64_t>(), std::max({questions, captions, generations}), world);
  const auto items = collect_questions(heldout, questions);
  const auto answers = model_answers(model, items);
  std::map<AnswerKind, std::pair<std::size_t, std::size_t>> by_kind;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const bool hit = answers[i] == items[i].qa.answer;
    ok += hit;
    by_kind[items[i].qa.kind].first += hit;
    by_kind[items[i].qa.kind].second += 1;
  }
  json kinds;
  const char* names[] = {"color", "position", "shape"};
  for (const auto& [k, v] : by_kind) kinds[names[static_cast<int>(k)]] = static_cast<double>(v.first) / static_cast<double>(v.second);

  std::vector<std::vector<int>> caps;
  for (std::size_t i = 0; i < captions && i < heldout.size(); ++i) caps.push_back(heldout[i].caption);
  const auto rt = evaluate_roundtrip(model, caps, steps, seed);
  Rng base_rng(mix_seed(seed, 0xba5e));
  const double baseline = caps.size() >= 2 ? shuffled_caption_baseline(caps, world.grid, base_rng) : 0.0;

  double agreement = 0.0, latent_mse = 0.0, attr = 0.0;
  for (std::size_t i = 0; i < generations; ++i) {
    Rng rng(mix_seed(seed, 0x9e0 + i));
    const auto st = generate_image_semantic(model, heldout[i].caption, steps, rng);
    const auto raster = decode_image(model, st.hidden, rng);
    agreement += prompt_agreement(heldout[i].caption, raster, world);
    const auto q = pixel_quality(heldout[i].scene, raster, world);
    latent_mse += q.latent_mse;
    attr += q.attribute_accuracy;
  }
  const double g = generations ? static_cast<double>(generations) : 1.0;
  json report = {{"run", p.dir.string()},
                 {"qa", {{"accuracy", items.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(items.size())},
                         {"questions", items.size()},
                         {"by_kind", kinds}}},
                 {"roundtrip",
                  {{"attribute_preservation", rt.aggregate},
                   {"shuffled_baseline", baseline},
                   {"parse_failures", rt.parse_failures},
                   {"exact", rt.exact},
                   {"captions", rt.count}}},
                 {"generation", {{"samples", generations}, {"prompt_agreement", agreement / g}, {"latent_mse", latent_mse / g}, {"attribute_accuracy", attr / g}}},
                 {"inference_steps", steps},
                 {"seed", seed}};
  write_text(p.dir / "eval.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- infer

std::vector<std::uint8_t> ppm_bytes(const std::vector<float>& raster, std::size_t width) {
  std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(width) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : raster) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return out;
}

int cmd_infer(const std::string& run, const std::string& runs_dir, const std::string& prompt, std::size_t steps, std::uint64_t seed,
              std::size_t refine_rounds, double refine_fraction, const std::string& refine_order, std::string out) {
  const RunPaths p = resolve_run(run, runs_dir);
  const auto model = load_run_model<float>(p);
  const auto& world = model.config().world;
  std::vector<int> tokens;
  try {
    tokens = Vocab::instance().encode(prompt);
  } catch (const std::exception& e) {
    throw UsageError(std::string("prompt: ") + e.what());
  }
  if (!scene_from_caption(tokens, world.grid)) throw UsageError("prompt does not parse as a scene description: '" + prompt + "'");
  if (refine_order != "random" && refine_order != "original") throw UsageError("--refine-order must be random or original");
  Rng rng(seed);
  auto st = generate_image_semantic(model, tokens, steps, rng);
  json trace = json::array();
  if (refine_rounds > 0) {
    RefineConfig rcfg{refine_rounds, refine_fraction, refine_order == "random" ? RefineOrder::Random : RefineOrder::Original, mix_seed(seed, 0x5c0)};
    auto res = refine(model, st, rcfg, rng);
    for (const auto& r : res.trace) trace.push_back({{"round", r.round}, {"slots", r.slots}, {"before", r.before}, {"after", r.after}});
    st = std::move(res.state);
  }
  Rng decode_rng(mix_seed(seed, 0xdec0));
  const auto raster = decode_image(model, st.hidden, decode_rng);

  Sequence prefix;
  detail::push_text(prefix, Vocab::kBos);
  detail::push_text(prefix, Vocab::kBoi);
  detail::push_image(prefix, 0, world.tokens(), nullptr);
  detail::push_text(prefix, Vocab::kEoi);
  Rng text_rng(mix_seed(seed, 0x7e7));
  const auto regen = generate_text(model, prefix, st.embeddings, 48, 0.0, text_rng);

  if (out.empty()) out = (p.dir / ("infer-" + std::to_string(seed) + ".ppm")).string();
  write_file(out, ppm_bytes(raster, world.image_px()));
  json side = {{"prompt", prompt},
               {"steps", steps},
               {"seed", seed},
               {"image", out},
               {"prompt_agreement", prompt_agreement(tokens, raster, world)},
               {"regenerated_caption", Vocab::instance().decode(regen)},
               {"schedule", st.schedule},
               {"refinement", trace}};
  write_text(fs::path(out).replace_extension(".json"), side.dump(2) + "\n");
  std::cout << side.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------- fit-scaling / report

int cmd_fit_scaling(const std::vector<std::string>& files, std::vector<std::string> metrics, double burn_in, const std::string& out_dir) {
  if (metrics.empty()) metrics = {"qa_accuracy", "attribute_preservation"};
  fs::create_directories(out_dir);
  for (const auto& f : files) {
    const auto timeline = read_metrics(f);
    std::string stem = fs::path(f).parent_path().filename().string();
    if (stem.empty()) stem = fs::path(f).stem().string();
    for (const auto& metric : metrics) {
      const auto pts = after_burn_in(metric_points(timeline, metric), burn_in);
      const auto fit = fit_scaling(pts);
      const auto base = fs::path(out_dir) / (stem + "." + metric);
      write_text(base.string() + ".csv", scaling_csv(pts, fit));
      write_text(base.string() + ".svg", scaling_svg(pts, fit, stem + " " + metric));
      std::cout << json{{"metrics", f}, {"metric", metric}, {"a", fit.a}, {"b", fit.b}, {"rss", fit.rss}, {"n_points", fit.n},
                        {"burn_in", burn_in}, {"slope", format_slope(fit.a)}, {"x_unit", "k samples"}}
                       .dump()
                << "\n";
    }
  }
  return 0;
}

int cmd_report(std::vector<std::string> runs, const std::string& suite, const std::vector<std::uint64_t>& seeds, const std::string& runs_dir,
               double burn_in, bool raw, const std::string& out) {
  if (!suite.empty())
    for (std::uint64_t seed : seeds)
      for (const auto& s : suite_specs(suite)) runs.push_back(run_id(s.id, seed));
  if (runs.empty()) throw UsageError("report needs run ids or --suite");
  std::vector<ReportRow> rows;
  for (const auto& r : runs) {
    const RunPaths p = resolve_run(r, runs_dir);
    rows.push_back(report_row(p.dir.filename().string(), read_metrics(p.metrics()), burn_in));
  }
  const auto csv = report_csv(rows, raw);
  if (!out.empty()) write_text(out, csv);
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Large transient tensors otherwise go through mmap/munmap on every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"unihetero: desk-scale unified understanding/generation experiments"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string corpus_dir, runs_dir, spec, id, suite = "table1", run, prompt, out, refine_order = "random";
  std::size_t corpus_size = 20000, parallel = 1, questions = 1000, captions = 100, generations = 16, steps = 4, refine_rounds = 0;
  std::uint64_t data_seed = 7, seed = 0;
  std::optional<std::uint64_t> train_seed;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> files, metrics, run_ids;
  double burn_in = 0.1, refine_fraction = 0.25;
  bool raw = false;

  auto* gen = app.add_subcommand("gen-data", "generate a toy corpus");
  gen->add_option("--corpus-size", corpus_size)->capture_default_str();
  gen->add_option("--seed", data_seed)->capture_default_str();
  gen->add_option("--out", out, "output directory (default data/corpus-s<seed>-n<size>)");

  TrainOptions train_opt;
  auto* train = app.add_subcommand("train", "train one run");
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--spec", spec, "experiment spec id (exp1..exp4 or a module-selection row; default exp3)");
  train->add_option("--seed", train_seed);
  train->add_option("--id", id, "run id (default <spec>-s<seed>)");
  train->add_option("--runs-dir", runs_dir, "run root (default $UNIHETERO_RUNS or ./runs)");
  train_opt.add_to(*train);

  TrainOptions ablate_opt;
  auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
  ablate->add_option("--suite", suite, "table1 or table2")->capture_default_str();
  ablate->add_option("--corpus", corpus_dir)->required();
  ablate->add_option("--seeds", seeds, "comma separated")->delimiter(',')->capture_default_str();
  ablate->add_option("--parallel", parallel, "concurrent runs")->capture_default_str();
  ablate->add_option("--runs-dir", runs_dir);
  ablate->add_option("--burn-in", burn_in)->capture_default_str();
  ablate_opt.add_to(*ablate);

  auto* eval = app.add_subcommand("eval", "evaluate a finished run");
  eval->add_option("--run", run, "run id or directory")->required();
  eval->add_option("--runs-dir", runs_dir);
  eval->add_option("--corpus", corpus_dir, "corpus (default: the one in the run manifest)");
  eval->add_option("--questions", questions)->capture_default_str();
  eval->add_option("--captions", captions)->capture_default_str();
  eval->add_option("--generations", generations)->capture_default_str();
  eval->add_option("--steps", steps, "inference steps")->capture_default_str();
  eval->add_option("--seed", seed)->capture_default_str();

  auto* infer = app.add_subcommand("infer", "generate an image for a prompt");
  infer->add_option("--run", run)->required();
  infer->add_option("--runs-dir", runs_dir);
  infer->add_option("--prompt", prompt, "e.g. \"a red circle at top left\"")->required();
  infer->add_option("--steps", steps)->capture_default_str();
  infer->add_option("--seed", seed)->capture_default_str();
  infer->add_option("--refine-rounds", refine_rounds)->capture_default_str();
  infer->add_option("--refine-fraction", refine_fraction)->capture_default_str();
  infer->add_option("--refine-order", refine_order, "random or original")->capture_default_str();
  infer->add_option("--out", out, "PPM path (a JSON sidecar is written next to it)");

  auto* fit = app.add_subcommand("fit-scaling", "fit y = a n + b over metric timelines");
  fit->add_option("--metrics", files, "metrics.jsonl files")->required();
  fit->add_option("--metric", metrics, "metric names (default qa_accuracy, attribute_preservation)");
  fit->add_option("--burn-in", burn_in)->capture_default_str();
  fit->add_option("--out", out, "output directory")->default_str(".");

  auto* report = app.add_subcommand("report", "CSV summary of runs");
  report->add_option("runs", run_ids, "run ids or directories");
  report->add_option("--suite", suite);
  report->add_option("--seeds", seeds)->delimiter(',');
  report->add_option("--runs-dir", runs_dir);
  report->add_option("--burn-in", burn_in)->capture_default_str();
  report->add_flag("--raw", raw, "numeric slopes instead of the x10^-4 rendering");
  report->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(corpus_size, data_seed, out);
    if (*train) return cmd_train(train_opt, corpus_dir, spec, train_seed, id, runs_dir);
    if (*ablate) return cmd_ablate(ablate_opt, suite, corpus_dir, seeds, parallel, runs_dir, burn_in);
    if (*eval) return cmd_eval(run, runs_dir, corpus_dir, questions, captions, generations, steps, seed);
    if (*infer) return cmd_infer(run, runs_dir, prompt, steps, seed, refine_rounds, refine_fraction, refine_order, out);
    if (*fit) return cmd_fit_scaling(files, metrics, burn_in, out.empty() ? "." : out);
    if (*report) return cmd_report(run_ids, report->count("--suite") ? suite : "", seeds, runs_dir, burn_in, raw, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const MissingCorpus& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissingCorpus;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

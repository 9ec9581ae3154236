#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "visionlogic/grounding.hpp"
#include "visionlogic/nnforward.hpp"
#include "visionlogic/parallel.hpp"
#include "visionlogic/predicates.hpp"
#include "visionlogic/robustness.hpp"
#include "visionlogic/rules.hpp"
#include "visionlogic/tensorio.hpp"

namespace fs = std::filesystem;
using namespace visionlogic;

namespace {

struct GroundSelection {
  std::vector<int> images;
  std::vector<int> predicates;
  std::vector<int> classes;
  Split split = Split::Eval;
  int max_tasks = 20;
  bool refine = true;
};

struct ProbeSettings {
  std::vector<Perturbation> grid;
  Split split = Split::Eval;
};

struct PipelineConfig {
  fs::path bundle_dir;
  fs::path output_dir = "out";
  std::uint64_t rng_seed = 0;
  int jobs = 1;
  TrainConfig train;
  GroundingConfig grounding;
  GroundSelection ground;
  ProbeSettings probe;
};

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "eval") return Split::Eval;
  fail(ErrorKind::InvalidArgument, "split must be train or eval, got '" + s + "'");
}

std::vector<Perturbation> default_grid() {
  std::vector<Perturbation> g;
  for (double s : {0.1, 0.2}) {
    Perturbation p;
    p.kind = PerturbKind::Gaussian;
    p.sigma = s;
    g.push_back(p);
  }
  for (int b : {4, 8}) {
    Perturbation p;
    p.kind = PerturbKind::Pixelate;
    p.block = b;
    g.push_back(p);
  }
  return g;
}

/// Config file values over built-in defaults; nested seeds follow the global
/// seed unless set explicitly.
PipelineConfig load_config(const std::optional<fs::path>& path) {
  PipelineConfig cfg;
  cfg.probe.grid = default_grid();
  if (!path) return cfg;
  if (!fs::exists(*path)) fail(ErrorKind::MissingFile, path->string());
  const json j = parse_json_file(*path);
  try {
    if (j.contains("bundle_dir")) cfg.bundle_dir = j.at("bundle_dir").get<std::string>();
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    cfg.rng_seed = j.value("rng_seed", std::uint64_t{0});
    cfg.jobs = j.value("jobs", 1);
    if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
    if (!j.contains("train") || !j.at("train").contains("rng_seed")) cfg.train.rng_seed = cfg.rng_seed;
    if (j.contains("grounding")) cfg.grounding = j.at("grounding").get<GroundingConfig>();
    if (!j.contains("grounding") || !j.at("grounding").contains("rng_seed")) cfg.grounding.rng_seed = cfg.rng_seed;
    if (j.contains("ground")) {
      const auto& g = j.at("ground");
      cfg.ground.images = g.value("images", std::vector<int>{});
      cfg.ground.predicates = g.value("predicates", std::vector<int>{});
      cfg.ground.classes = g.value("classes", std::vector<int>{});
      if (g.contains("split")) cfg.ground.split = parse_split(g.at("split").get<std::string>());
      cfg.ground.max_tasks = g.value("max_tasks", cfg.ground.max_tasks);
      cfg.ground.refine = g.value("refine", cfg.ground.refine);
    }
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      if (p.contains("grid")) cfg.probe.grid = p.at("grid").get<std::vector<Perturbation>>();
      if (p.contains("split")) cfg.probe.split = parse_split(p.at("split").get<std::string>());
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, path->string() + ": " + e.what());
  }
  return cfg;
}

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::MissingFile:
    case ErrorKind::MissingArtifact: return 2;
    case ErrorKind::Diverged: return 4;
    case ErrorKind::ShapeMismatch:
    case ErrorKind::NonFiniteValue:
    case ErrorKind::ChecksumMismatch:
    case ErrorKind::ParseError:
    case ErrorKind::ChannelOutOfRange:
    case ErrorKind::LengthMismatch:
    case ErrorKind::EmptyClass:
    case ErrorKind::InvariantViolation: return 3;
    default: return 1;
  }
}

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("visionlogic");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("VISIONLOGIC_LOG")) spdlog::set_level(spdlog::level::from_str(env));
}

std::vector<PredicateVector> vectors_for(const PredicateSet& ps, const ActivationDump& dump, const std::vector<int>& idx) {
  std::vector<PredicateVector> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(predicate_vector(ps.predicates, dump, i));
  return out;
}

PredicateSet load_predicates(const PipelineConfig& cfg, const TeacherBundle& b) {
  auto ps = read_artifact<PredicateSet>(cfg.output_dir / "predicates.json");
  if (ps.d != b.dump.d || ps.n_classes != b.dump.n_classes)
    fail(ErrorKind::ShapeMismatch, "predicates.json does not match the bundle's d or class count");
  return ps;
}

// ---------------------------------------------------------------------------

int cmd_learn(const PipelineConfig& cfg) {
  const auto b = load_bundle(cfg.bundle_dir);
  const auto train = b.dataset.indices(Split::Train);
  spdlog::info("learn: {} training examples, d = {}", train.size(), b.dump.d);
  fs::create_directories(cfg.output_dir);
  std::string log_text;
  TrainResult res;
  try {
    res = train_thresholds(b.dump, b.head, train, signed_head(b.model.manifest), cfg.train, [&](const TrainLogEntry& e) {
      log_text += json(e).dump() + "\n";
      spdlog::info("epoch {} train_kl {:.4f} val_kl {:.4f}", e.epoch, e.train_kl, e.val_kl);
    });
  } catch (const DivergedError& e) {
    write_text(cfg.output_dir / "train_log.jsonl", log_text);
    write_text(cfg.output_dir / "diverged_state.json", dump_json(e.state()));
    throw;
  }
  write_text(cfg.output_dir / "train_log.jsonl", log_text);
  write_artifact(res.predicates, cfg.output_dir / "predicates.json");
  write_artifact(res.rule_head, cfg.output_dir / "rule_head.json");
  std::printf("predicates %zu valid %d epochs %d best_val_kl %.4f\n", res.predicates.predicates.size(), res.predicates.n_valid(),
              res.predicates.epochs_run, res.predicates.best_val_kl);
  return 0;
}

int cmd_rules(const PipelineConfig& cfg) {
  const auto b = load_bundle(cfg.bundle_dir);
  const auto ps = load_predicates(cfg, b);
  const auto train = b.dataset.indices(Split::Train);
  const auto vecs = vectors_for(ps, b.dump, train);
  std::vector<int> labels;
  std::vector<bool> correct;
  for (int i : train) {
    labels.push_back(b.dump.labels[static_cast<std::size_t>(i)]);
    correct.push_back(b.dump.teacher_correct[static_cast<std::size_t>(i)]);
  }
  RuleSet rs;
  rs.clauses = extract_clauses(vecs, labels, correct, b.dump.n_classes);
  for (std::size_t k = 0; k < vecs.size(); ++k)
    if (correct[k] && !satisfies_clause(rs.clauses, labels[k], vecs[k]))
      fail(ErrorKind::InvariantViolation, "training example " + std::to_string(train[k]) + " satisfies no clause of its class");
  std::vector<bool> valid;
  for (const auto& p : ps.predicates) valid.push_back(p.valid);
  rs.profile = build_profiles(rs.clauses, valid);
  rs.class_names = b.model.manifest.class_names;
  write_artifact(rs, cfg.output_dir / "rules.json");
  std::size_t n_clauses = 0;
  for (const auto& c : rs.clauses.clauses) n_clauses += c.size();
  std::printf("classes %d clauses %zu m_valid %d\n", rs.profile.n_classes, n_clauses, rs.profile.m_valid());
  return 0;
}

int cmd_eval(const PipelineConfig& cfg) {
  const auto rs = read_artifact<RuleSet>(cfg.output_dir / "rules.json");
  const auto b = load_bundle(cfg.bundle_dir);
  const auto ps = load_predicates(cfg, b);
  const auto ev = b.dataset.indices(Split::Eval);
  std::vector<int> tp, labels;
  for (int i : ev) {
    tp.push_back(b.dump.teacher_pred(i));
    labels.push_back(b.dump.labels[static_cast<std::size_t>(i)]);
  }
  auto m = compute_metrics(vectors_for(ps, b.dump, ev), rs.profile, tp, labels);
  write_artifact(m, cfg.output_dir / "metrics.json");
  std::printf("%s\n", metrics_line(m).c_str());
  return 0;
}

int cmd_ground(const PipelineConfig& cfg) {
  const auto b = load_bundle(cfg.bundle_dir);
  const auto ps = load_predicates(cfg, b);
  const Engine engine(b.model);
  const auto& sel = cfg.ground;
  std::vector<int> images = sel.images.empty() ? b.dataset.indices(sel.split) : sel.images;
  for (int i : images)
    if (i < 0 || i >= static_cast<int>(b.dataset.entries.size())) fail(ErrorKind::InvalidArgument, "image id " + std::to_string(i) + " out of range");
  const std::set<int> classes(sel.classes.begin(), sel.classes.end());
  std::vector<const PredicateSpec*> preds;
  for (const auto& p : ps.predicates) {
    const bool wanted = sel.predicates.empty() ? p.valid : std::count(sel.predicates.begin(), sel.predicates.end(), p.id) > 0;
    if (wanted) preds.push_back(&p);
  }
  struct Task {
    int image;
    const PredicateSpec* pred;
  };
  std::vector<Task> tasks;
  for (int i : images) {
    if (!classes.empty() && !classes.count(b.dump.labels[static_cast<std::size_t>(i)])) continue;
    for (const auto* p : preds) {
      if (static_cast<int>(tasks.size()) >= sel.max_tasks) break;
      if (fires(*p, b.dump.z(i, p->channel))) tasks.push_back({i, p});
    }
  }
  spdlog::info("ground: {} tasks, strategy {}", tasks.size(), to_string(cfg.grounding.strategy));
  std::vector<GroundingResult> results(tasks.size());
  std::vector<Image> imgs(tasks.size());
  parallel_for(tasks.size(), cfg.jobs, [&](std::size_t t) {
    const auto& task = tasks[t];
    imgs[t] = png::read_rgb(b.dataset.image(static_cast<std::size_t>(task.image)));
    auto r = locate_critical_region(engine, imgs[t], *task.pred, cfg.grounding, task.image);
    r.image = b.dataset.entries[static_cast<std::size_t>(task.image)].image_path;
    const auto mask_path = b.dataset.mask(static_cast<std::size_t>(task.image));
    if (sel.refine && mask_path && r.status == GroundingStatus::Ok)
      refine_result(engine, imgs[t], png::read_mask(*mask_path), *task.pred, cfg.grounding, r);
    results[t] = std::move(r);
  });
  fs::create_directories(cfg.output_dir / "overlays");
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    char name[64];
    std::snprintf(name, sizeof name, "img%04d_p%03d.png", results[t].image_id, results[t].predicate_id);
    render_overlay(imgs[t], results[t], cfg.output_dir / "overlays" / name);
  }
  write_artifact(results, cfg.output_dir / "grounding_results.json");
  int nec = 0, suf = 0, refined = 0;
  for (const auto& r : results) {
    nec += r.necessity;
    suf += r.sufficiency;
    refined += r.refined_box.has_value();
  }
  std::printf("tasks %zu necessity %d sufficiency %d refined %d\n", results.size(), nec, suf, refined);
  return 0;
}

int cmd_probe(const PipelineConfig& cfg) {
  const auto rs = read_artifact<RuleSet>(cfg.output_dir / "rules.json");
  const auto b = load_bundle(cfg.bundle_dir);
  const auto ps = load_predicates(cfg, b);
  const Engine engine(b.model);
  std::vector<ProbeImage> images;
  for (int i : b.dataset.indices(cfg.probe.split)) images.push_back({i, png::read_rgb(b.dataset.image(static_cast<std::size_t>(i)))});
  const auto report = probe(images, ps.predicates, rs.profile, engine, cfg.probe.grid, cfg.rng_seed, cfg.jobs);
  write_artifact(report, cfg.output_dir / "robustness_report.json");
  std::printf("%-28s %8s %6s %6s %6s %6s %9s\n", "perturbation", "attempts", "flips", "typeA", "typeB", "mixed", "uncovered");
  for (const auto& row : report.summary)
    std::printf("%-28s %8d %6d %6d %6d %6d %9d\n", row.perturbation.c_str(), row.attempts, row.flips, row.type_a, row.type_b, row.mixed,
                row.uncovered);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"visionlogic: predicates, rules and grounding for frozen vision models"};
  app.require_subcommand(1);
  std::optional<std::string> config_path, out_dir, bundle_dir, strategy;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs, trials, kappa;
  std::optional<double> lambda;
  std::vector<double> gaussian;
  std::vector<int> pixelate;
  app.add_option("--config", config_path, "pipeline config JSON");
  app.add_option("--seed", seed, "global rng seed");
  app.add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--strategy", strategy, "masking strategy")->check(CLI::IsMember({"noise", "blur", "mean", "black", "white"}));
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--bundle", bundle_dir, "teacher bundle directory");
  app.add_option("--trials", trials, "grounding trials per task")->check(CLI::PositiveNumber);
  app.add_option("--lambda", lambda, "grounding shrink factor");
  app.add_option("--kappa", kappa, "grounding proposals per round")->check(CLI::PositiveNumber);

  std::vector<int> images, predicates, classes;
  auto* learn = app.add_subcommand("learn", "learn predicate thresholds");
  auto* rules = app.add_subcommand("rules", "extract clauses and class profiles");
  auto* eval = app.add_subcommand("eval", "compute metrics on the eval split");
  auto* ground = app.add_subcommand("ground", "locate critical regions");
  ground->add_option("--image", images, "dataset row to ground (repeatable)");
  ground->add_option("--predicate", predicates, "predicate id to ground (repeatable)");
  ground->add_option("--class", classes, "restrict to images of this class (repeatable)");
  auto* probe_cmd = app.add_subcommand("probe", "root-cause analysis under perturbations");
  probe_cmd->add_option("--gaussian", gaussian, "gaussian noise sigma (repeatable, replaces the grid)");
  probe_cmd->add_option("--pixelate", pixelate, "pixelate block size (repeatable, replaces the grid)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  configure_logging();
  try {
    PipelineConfig cfg = load_config(config_path ? std::optional<fs::path>(*config_path) : std::nullopt);
    if (seed) {
      cfg.rng_seed = *seed;
      cfg.train.rng_seed = *seed;
      cfg.grounding.rng_seed = *seed;
    }
    if (jobs) cfg.jobs = *jobs;
    if (strategy) cfg.grounding.strategy = parse_mask_kind(*strategy);
    if (trials) cfg.grounding.trials = *trials;
    if (lambda) cfg.grounding.lambda = *lambda;
    if (kappa) cfg.grounding.kappa = *kappa;
    if (!gaussian.empty() || !pixelate.empty()) {
      cfg.probe.grid.clear();
      for (double s : gaussian) {
        Perturbation p;
        p.kind = PerturbKind::Gaussian;
        p.sigma = s;
        cfg.probe.grid.push_back(p);
      }
      for (int b : pixelate) {
        Perturbation p;
        p.kind = PerturbKind::Pixelate;
        p.block = b;
        cfg.probe.grid.push_back(p);
      }
    }
    for (const auto& p : cfg.probe.grid) p.validate();
    if (out_dir) cfg.output_dir = *out_dir;
    if (bundle_dir) cfg.bundle_dir = *bundle_dir;
    if (!images.empty()) cfg.ground.images = images;
    if (!predicates.empty()) cfg.ground.predicates = predicates;
    if (!classes.empty()) cfg.ground.classes = classes;
    if (cfg.bundle_dir.empty()) fail(ErrorKind::MissingFile, "no bundle directory given (--bundle or bundle_dir)");
    cfg.train.validate();
    cfg.grounding.validate();

    if (*learn) return cmd_learn(cfg);
    if (*rules) return cmd_rules(cfg);
    if (*eval) return cmd_eval(cfg);
    if (*ground) return cmd_ground(cfg);
    if (*probe_cmd) return cmd_probe(cfg);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}

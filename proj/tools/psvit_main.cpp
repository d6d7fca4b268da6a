// PS-ViT command line: cost summaries, gradient audits, desk-scale training,
// evaluation and sampling-trajectory visualization.
//
// Exit codes: 0 success, 1 validation failure, 2 runtime/audit failure.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "psvit/checkpoint.hpp"
#include "psvit/gradcheck.hpp"
#include "psvit/psvit.hpp"

namespace fs = std::filesystem;
using namespace psvit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// One run at a time per output directory.
class DirLock {
public:
  explicit DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    path_ = dir / ".psvit.lock";
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw std::invalid_argument("output directory " + dir.string() +
                                  " is locked by another run (stale? remove " + path_.string() + ")");
    }
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

private:
  fs::path path_;
};

struct ConfigFlags {
  std::string preset = "ps-vit-ti";
  std::string config_file;
  bool share = false;
  int n = -1, iters = -1, depth = -1, dim = -1, heads = -1;
  int classes = -1, input_size = -1;
  double dropout = -1.0;
  bool toy_backbone = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "Configuration preset: ps-vit-ti, ps-vit-b or toy");
    cmd->add_option("--config", config_file, "JSON config file (flags override file values)");
    cmd->add_flag("--share", share, "Share sampler weights across iterations");
    cmd->add_option("--n", n, "Sampling points per axis");
    cmd->add_option("--iters", iters, "Progressive sampling iterations N");
    cmd->add_option("--depth", depth, "Vision transformer layers N_v");
    cmd->add_option("--dim", dim, "Token dimension C");
    cmd->add_option("--heads", heads, "Attention heads M");
    cmd->add_option("--classes", classes, "Classifier output count");
    cmd->add_option("--input-size", input_size, "Square input size (multiple of 4)");
    cmd->add_option("--dropout", dropout, "Dropout rate");
    cmd->add_flag("--toy-backbone", toy_backbone, "Use the reduced-width affine-norm backbone");
  }

  PsVitConfig resolve() const {
    PsVitConfig cfg;
    if (preset == "ps-vit-ti") {
      cfg = PsVitConfig::ti();
    } else if (preset == "ps-vit-b") {
      cfg = PsVitConfig::b();
    } else if (preset == "toy") {
      cfg = PsVitConfig::toy();
    } else {
      throw std::invalid_argument("unknown preset '" + preset + "' (ps-vit-ti, ps-vit-b, toy)");
    }
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      if (!f) throw std::invalid_argument("cannot open config file " + config_file);
      nlohmann::json j;
      try {
        f >> j;
      } catch (const std::exception& e) {
        throw std::invalid_argument("config file " + config_file + ": " + e.what());
      }
      cfg = config_from_json(j);
    }
    if (share) cfg.share_weights = true;
    if (n > 0) cfg.n = n;
    if (iters > 0) cfg.iterations = iters;
    if (depth >= 0) cfg.depth = depth;
    if (dim > 0) cfg.channels = dim;
    if (heads > 0) cfg.heads = heads;
    if (classes > 0) cfg.num_classes = classes;
    if (input_size > 0) cfg.input_size = input_size;
    if (dropout >= 0.0) cfg.dropout = static_cast<float>(dropout);
    if (toy_backbone) cfg.backbone = BackboneConfig::toy();
    cfg.validate();
    return cfg;
  }
};

void echo_config(const fs::path& out_dir, const PsVitConfig& cfg) {
  std::ofstream f(out_dir / "resolved_config.json", std::ios::trunc);
  f << config_to_json(cfg).dump(2) << "\n";
}

std::string human(unsigned long long v) {
  char buf[32];
  if (v >= 1000000000ULL) {
    std::snprintf(buf, sizeof(buf), "%.2f B", static_cast<double>(v) / 1e9);
  } else if (v >= 1000000ULL) {
    std::snprintf(buf, sizeof(buf), "%.2f M", static_cast<double>(v) / 1e6);
  } else {
    std::snprintf(buf, sizeof(buf), "%llu", v);
  }
  return buf;
}

int cmd_summary(const ConfigFlags& flags, const std::string& out_dir, double expect_params,
                double expect_flops, double tol_pct) {
  PsVitConfig cfg = flags.resolve();
  CostReport report = cost_report(cfg);

  std::cout << "module      params           flops\n";
  for (const auto& e : report.modules) {
    std::cout << std::left << std::setw(12) << e.module << std::setw(17) << human(e.params)
              << human(e.flops) << "\n";
  }
  std::cout << std::left << std::setw(12) << "total" << std::setw(17) << human(report.params)
            << human(report.flops) << "\n";
  std::cout << "exact: params=" << report.params << " flops=" << report.flops
            << " (1 FLOP = 1 multiply-accumulate)\n";

  if (!out_dir.empty()) {
    DirLock lock(out_dir);
    echo_config(out_dir, cfg);
    std::ofstream f(fs::path(out_dir) / "cost_summary.csv", std::ios::trunc);
    f << "module,params,flops\n";
    for (const auto& e : report.modules) f << e.module << "," << e.params << "," << e.flops << "\n";
    f << "total," << report.params << "," << report.flops << "\n";
  }

  auto within = [tol_pct](double actual, double expected) {
    return std::abs(actual - expected) <= expected * tol_pct / 100.0;
  };
  if (expect_params > 0 && !within(static_cast<double>(report.params), expect_params)) {
    std::cout << "FAIL: params " << report.params << " outside " << expect_params << " +/-" << tol_pct
              << "%\n";
    return kExitValidation;
  }
  if (expect_flops > 0 && !within(static_cast<double>(report.flops), expect_flops)) {
    std::cout << "FAIL: flops " << report.flops << " outside " << expect_flops << " +/-" << tol_pct
              << "%\n";
    return kExitValidation;
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& scope, uint64_t seed, int seeds, double tol_override) {
  std::vector<GradReport> reports;
  bool found = false;
  if (scope == "model" || scope == "all") {
    found = true;
    for (int k = 0; k < (scope == "model" ? seeds : 1); ++k) {
      reports.push_back(audit_model(seed + static_cast<uint64_t>(k), 1e-3,
                                    tol_override > 0 ? tol_override : 1e-2));
    }
  }
  if (scope != "model") {
    for (const auto& def : audit_registry()) {
      if (scope != "all" && def.name != scope) continue;
      found = true;
      AuditDef d = def;
      if (tol_override > 0) d.tol = tol_override;
      for (int k = 0; k < seeds; ++k) {
        GradReport r = finite_diff_audit(d, seed + static_cast<uint64_t>(k));
        reports.push_back(std::move(r));
      }
    }
  }
  if (!found) throw std::invalid_argument("unknown gradcheck scope '" + scope + "'");

  std::cout << std::left << std::setw(20) << "op" << std::setw(14) << "max_rel" << std::setw(14)
            << "max_abs" << "status\n";
  bool all_pass = true;
  for (const auto& r : reports) {
    std::cout << std::left << std::setw(20) << r.op << std::setw(14) << r.worst_rel << std::setw(14)
              << r.worst_abs << (r.pass ? "pass" : "FAIL") << "\n";
    all_pass = all_pass && r.pass;
  }
  std::cout << (all_pass ? "gradcheck: all adjoints match central differences\n"
                         : "gradcheck: FAILURES above\n");
  return all_pass ? kExitOk : kExitRuntime;
}

Dataset resolve_dataset(const std::string& images, const std::string& labels, int synthetic,
                        int synth_classes, int input_size, uint64_t seed) {
  if (synthetic > 0) return make_blob_dataset(synthetic, synth_classes, input_size, seed);
  if (images.empty() || labels.empty()) {
    throw std::invalid_argument("either --images/--labels or --synthetic is required");
  }
  return load_idx(images, labels);
}

int cmd_train(const ConfigFlags& flags, const std::string& images, const std::string& labels,
              int synthetic, int synth_classes, const std::string& out_dir, TrainConfig tc) {
  PsVitConfig cfg = flags.resolve();
  Dataset ds = resolve_dataset(images, labels, synthetic, synth_classes, cfg.input_size,
                               Rng::mix(tc.seed, 0xda7a));
  if (ds.num_classes != cfg.num_classes) {
    throw std::invalid_argument("dataset has " + std::to_string(ds.num_classes) +
                                " classes but the configured head expects " +
                                std::to_string(cfg.num_classes) + " (use --classes)");
  }
  for (const auto& img : ds.images) {
    if (img.dim(1) != cfg.input_size || img.dim(2) != cfg.input_size) {
      throw std::invalid_argument("dataset image size " + std::to_string(img.dim(1)) + "x" +
                                  std::to_string(img.dim(2)) + " does not match --input-size " +
                                  std::to_string(cfg.input_size));
    }
  }

  DirLock lock(out_dir);
  echo_config(out_dir, cfg);
  tc.label_smooth = 0.1f;

  Model model = build<float>(cfg, tc.seed);
  const fs::path best_path = fs::path(out_dir) / "ckpt_best.psvt";
  auto series = train(model, ds, tc, [&](const Model& m, const EpochMetrics& e, bool is_best) {
    if (is_best) save_checkpoint(m, best_path.string());
    if (e.epoch % 10 == 0 || e.epoch == 1) {
      std::cout << "epoch " << e.epoch << ": loss " << e.loss << ", acc " << e.accuracy << ", lr "
                << e.lr << "\n";
    }
  });
  save_checkpoint(model, (fs::path(out_dir) / "ckpt_final.psvt").string());
  write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), series);
  std::cout << "final: loss " << series.back().loss << ", train acc " << series.back().accuracy << "\n";
  std::cout << "wrote " << out_dir << "/metrics.csv, ckpt_final.psvt, ckpt_best.psvt\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& images, const std::string& labels,
             int synthetic, int synth_classes, int batch, const std::string& out_dir, uint64_t seed) {
  Model model = load_checkpoint(checkpoint);
  Dataset ds = resolve_dataset(images, labels, synthetic, synth_classes, model.cfg.input_size,
                               Rng::mix(seed, 0xda7a));
  EvalResult r = evaluate(model, ds, batch);
  std::cout << "eval: " << r.count << " images, top1 " << r.top1 << ", top5 " << r.top5 << "\n";
  if (!out_dir.empty()) {
    DirLock lock(out_dir);
    std::ofstream f(fs::path(out_dir) / "accuracy.csv", std::ios::trunc);
    f << "count,top1,top5\n" << r.count << "," << std::setprecision(10) << r.top1 << "," << r.top5 << "\n";
  }
  return kExitOk;
}

int cmd_viz(const std::string& checkpoint, const std::string& images, int count,
            const std::string& out_dir) {
  Model model = load_checkpoint(checkpoint);
  std::vector<Tensor> pool = load_idx_images(images);
  DirLock lock(out_dir);
  const int total = std::min<int>(count, static_cast<int>(pool.size()));
  for (int i = 0; i < total; ++i) {
    Tensor img = pool[static_cast<size_t>(i)];
    if (img.dim(1) > model.cfg.input_size || img.dim(2) > model.cfg.input_size) {
      img = center_crop(img, model.cfg.input_size);
    }
    std::vector<TrajectoryLog> trajs;
    predict(model, {img}, &trajs);
    char name[64];
    std::snprintf(name, sizeof(name), "trajectory_%03d", i);
    write_trajectory_csv((fs::path(out_dir) / (std::string(name) + ".csv")).string(), trajs[0]);
    write_trajectory_svg((fs::path(out_dir) / (std::string(name) + ".svg")).string(), img, trajs[0]);
  }
  std::cout << "wrote " << total << " trajectory CSV/SVG pairs to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PS-ViT: progressive sampling vision transformer"};
  app.require_subcommand(1);

  // summary
  auto* summary = app.add_subcommand("summary", "Print parameter and FLOP counts");
  ConfigFlags sum_flags;
  sum_flags.attach(summary);
  std::string sum_out;
  double expect_params = 0, expect_flops = 0, tol_pct = 10.0;
  summary->add_option("--out", sum_out, "Output directory for cost_summary.csv");
  summary->add_option("--expect-params", expect_params, "Fail if params outside this bound");
  summary->add_option("--expect-flops", expect_flops, "Fail if FLOPs outside this bound");
  summary->add_option("--tol-pct", tol_pct, "Tolerance percentage for expectations")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference audits of the adjoints");
  std::string scope = "all";
  uint64_t gc_seed = 1;
  int gc_seeds = 5;
  double gc_tol = 0;
  gradcheck->add_option("--scope", scope, "Op name, 'all' or 'model'");
  gradcheck->add_option("--seed", gc_seed, "Base audit seed");
  gradcheck->add_option("--seeds", gc_seeds, "Seeds per op");
  gradcheck->add_option("--tol", gc_tol, "Override relative tolerance");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train on an IDX dataset or the synthetic fixture");
  ConfigFlags train_flags;
  train_flags.attach(train_cmd);
  std::string tr_images, tr_labels, tr_out = "out";
  int tr_synth = 0, tr_synth_classes = 2;
  TrainConfig tc;
  train_cmd->add_option("--images", tr_images, "IDX image file");
  train_cmd->add_option("--labels", tr_labels, "IDX label file");
  train_cmd->add_option("--synthetic", tr_synth, "Generate a synthetic blob dataset of this size");
  train_cmd->add_option("--synthetic-classes", tr_synth_classes, "Classes in the synthetic dataset");
  train_cmd->add_option("--out", tr_out, "Output directory")->required();
  train_cmd->add_option("--epochs", tc.epochs, "Training epochs");
  train_cmd->add_option("--batch", tc.batch_size, "Batch size");
  train_cmd->add_option("--lr", tc.base_lr, "Base learning rate");
  train_cmd->add_option("--wd", tc.weight_decay, "Weight decay");
  train_cmd->add_option("--warmup", tc.warmup_epochs, "Warmup epochs");
  train_cmd->add_flag("--flip", tc.random_flip, "Random horizontal flip augmentation");
  train_cmd->add_option("--seed", tc.seed, "Training seed");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_images, ev_labels, ev_out;
  int ev_synth = 0, ev_synth_classes = 2, ev_batch = 32;
  uint64_t ev_seed = 0;
  eval_cmd->add_option("--checkpoint", ev_ckpt, "PSVT checkpoint")->required();
  eval_cmd->add_option("--images", ev_images, "IDX image file");
  eval_cmd->add_option("--labels", ev_labels, "IDX label file");
  eval_cmd->add_option("--synthetic", ev_synth, "Evaluate on a synthetic blob dataset");
  eval_cmd->add_option("--synthetic-classes", ev_synth_classes, "Classes in the synthetic dataset");
  eval_cmd->add_option("--batch", ev_batch, "Batch size");
  eval_cmd->add_option("--out", ev_out, "Output directory for accuracy.csv");
  eval_cmd->add_option("--seed", ev_seed, "Seed for synthetic data");

  // viz
  auto* viz_cmd = app.add_subcommand("viz", "Export sampling trajectories (CSV + SVG)");
  std::string vz_ckpt, vz_images, vz_out = "out";
  int vz_count = 1;
  viz_cmd->add_option("--checkpoint", vz_ckpt, "PSVT checkpoint")->required();
  viz_cmd->add_option("--images", vz_images, "IDX image file")->required();
  viz_cmd->add_option("--count", vz_count, "Images to visualize");
  viz_cmd->add_option("--out", vz_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (summary->parsed()) return cmd_summary(sum_flags, sum_out, expect_params, expect_flops, tol_pct);
    if (gradcheck->parsed()) return cmd_gradcheck(scope, gc_seed, gc_seeds, gc_tol);
    if (train_cmd->parsed())
      return cmd_train(train_flags, tr_images, tr_labels, tr_synth, tr_synth_classes, tr_out, tc);
    if (eval_cmd->parsed())
      return cmd_eval(ev_ckpt, ev_images, ev_labels, ev_synth, ev_synth_classes, ev_batch, ev_out, ev_seed);
    if (viz_cmd->parsed()) return cmd_viz(vz_ckpt, vz_images, vz_count, vz_out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

// Acceptance suite: one line per criterion, nonzero exit when any fails.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <unistd.h>

#include "psvit/checkpoint.hpp"
#include "psvit/gradcheck.hpp"
#include "psvit/psvit.hpp"

using namespace psvit;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  std::string name;
  std::function<std::string()> body;  // returns detail, throws on failure
};

#define REQUIRE_ACC(cond, what)                                        \
  do {                                                                 \
    if (!(cond)) throw std::runtime_error(std::string("check failed: ") + what); \
  } while (0)

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool within_pct(double value, double reference, double pct) {
  return std::abs(value - reference) <= reference * pct / 100.0;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ---- criterion bodies -----------------------------------------------------

std::string gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  int audited = 0;
  for (const auto& def : audit_registry()) {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      GradReport r = finite_diff_audit(def, seed);
      REQUIRE_ACC(r.pass, def.name + " seed " + std::to_string(seed) + " rel " + fmt(r.worst_rel));
      ++audited;
    }
  }
  GradReport model_report = audit_model(1, 1e-3, 1e-2);
  REQUIRE_ACC(model_report.pass, "composed toy model rel " + fmt(model_report.worst_rel));
  const double elapsed = seconds_since(t0);
  REQUIRE_ACC(elapsed < 60.0, "runtime " + fmt(elapsed) + "s exceeds 60s");
  return std::to_string(audited) + " op audits at 1e-3 plus composed toy model at " +
         fmt(model_report.worst_rel) + " rel err, " + fmt(elapsed) + "s";
}

std::string bilinear_oracle() {
  Rng rng(42);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor f = Tensor::zeros({3, 8, 8});
    rng.fill_uniform(f, -1.0, 1.0);
    Tensor p = Tensor::zeros({2, 6});
    for (int i = 0; i < 6; ++i) {
      p.at(0, i) = static_cast<float>(rng.uniform(0.0, 7.0));
      p.at(1, i) = static_cast<float>(rng.uniform(0.0, 7.0));
    }
    Tensor got = bilinear_sample(f, p);
    // dense sum over every integral location q
    for (int i = 0; i < 6; ++i) {
      for (int c = 0; c < 3; ++c) {
        double want = 0;
        for (int qy = 0; qy < 8; ++qy)
          for (int qx = 0; qx < 8; ++qx) {
            const double k = std::max(0.0, 1.0 - std::abs(qy - static_cast<double>(p.at(0, i)))) *
                             std::max(0.0, 1.0 - std::abs(qx - static_cast<double>(p.at(1, i))));
            want += k * f.at3(c, qy, qx);
          }
        worst = std::max(worst, std::abs(want - got.at(c, i)));
      }
    }
  }
  REQUIRE_ACC(worst <= 1e-6, "dense-sum deviation " + fmt(worst));

  // integer locations return exact feature columns
  Tensor f = Tensor::zeros({4, 8, 8});
  rng.fill_uniform(f, -1.0, 1.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      Tensor p({2, 1}, {static_cast<float>(y), static_cast<float>(x)});
      Tensor out = bilinear_sample(f, p);
      for (int c = 0; c < 4; ++c) REQUIRE_ACC(out.at(c, 0) == f.at3(c, y, x), "integer-location exactness");
    }
  return "100 dense-sum instances within " + fmt(worst) + "; 64 integer locations exact";
}

std::string grid_init() {
  GridSpec spec(56, 56, 14);
  REQUIRE_ACC(spec.step_h() == 4.0 && spec.step_w() == 4.0, "step size");
  Tensor p = init_grid<float>(spec);
  REQUIRE_ACC(p.cols() == 196, "point count");
  REQUIRE_ACC(p.at(0, 0) == 2.0f && p.at(1, 0) == 2.0f, "first center");
  REQUIRE_ACC(p.at(0, 195) == 54.0f && p.at(1, 195) == 54.0f, "last center");
  for (int i = 0; i < 196; ++i) {
    const int py = i / 14, px = i % 14;
    REQUIRE_ACC(p.at(0, i) == static_cast<float>(py * 4 + 2), "row coordinate at " + std::to_string(i));
    REQUIRE_ACC(p.at(1, i) == static_cast<float>(px * 4 + 2), "col coordinate at " + std::to_string(i));
  }
  Tensor single = init_grid<float>(GridSpec(10, 10, 1));
  REQUIRE_ACC(single.at(0, 0) == 5.0f && single.at(1, 0) == 5.0f, "degenerate n=1 center");
  return "56x56/n=14 grid exact (step 4, first center (2,2)); n=1 center (5,5)";
}

std::string n1_degeneracy() {
  Rng rng(17);
  TensorT<float> f = TensorT<float>::zeros({8, 8, 8});
  rng.fill_uniform(f, -1.0, 1.0);
  GridSpec spec(8, 8, 2);

  Rng pr(18);
  auto params = SamplerParamsT<float>::init(8, 2, 1, false, 0.0f, pr);
  Tape t1;
  int out1 = progressive_sample<float>(t1, t1.input(f), params, spec, false, nullptr, nullptr);

  Tape t2;
  int fv = t2.input(f);
  int p = t2.constant(init_grid<float>(spec));
  int sampled = bilinear_sample(t2, fv, p);
  int pos = positional_embed(t2, p, params.pos_proj, spec);
  int out2 = encoder_layer(t2, t2.add(sampled, pos), params.encoder(1), false, nullptr);

  double worst = 0;
  for (size_t i = 0; i < t1.val(out1).size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(t1.val(out1)[i]) - t2.val(out2)[i]));
  }
  REQUIRE_ACC(worst <= 1e-6, "manual composition deviation " + fmt(worst));

  // zero offset heads keep trajectories motionless for any N
  Rng pr3(19);
  auto params3 = SamplerParamsT<float>::init(8, 2, 3, false, 0.0f, pr3);
  Tape t3;
  TrajectoryLogT<float> log;
  progressive_sample<float>(t3, t3.input(f), params3, spec, false, nullptr, &log);
  REQUIRE_ACC(log.size() == 3, "trajectory length");
  for (const auto& step : log)
    for (size_t i = 0; i < step.raw.size(); ++i) {
      REQUIRE_ACC(step.raw[i] == log[0].raw[i], "motionless trajectory");
      REQUIRE_ACC(step.effective[i] == log[0].raw[i], "motionless effective trajectory");
    }
  return "N=1 equals the manual composition within " + fmt(worst) + "; zero offsets are motionless at N=3";
}

std::string cost_reproduction() {
  auto ti = PsVitConfig::ti();
  auto b = PsVitConfig::b();
  auto ti_s = ti;
  ti_s.share_weights = true;
  auto b_s = b;
  b_s.share_weights = true;

  const double p_ti = static_cast<double>(count_params(ti));
  const double p_ti_s = static_cast<double>(count_params(ti_s));
  const double p_b = static_cast<double>(count_params(b));
  const double p_b_s = static_cast<double>(count_params(b_s));
  REQUIRE_ACC(within_pct(p_ti, 4.7e6, 10), "Ti params " + fmt(p_ti));
  REQUIRE_ACC(within_pct(p_ti_s, 3.6e6, 10), "Ti shared params " + fmt(p_ti_s));
  REQUIRE_ACC(within_pct(p_b, 21.3e6, 10), "B params " + fmt(p_b));
  REQUIRE_ACC(within_pct(p_b_s, 16.9e6, 10), "B shared params " + fmt(p_b_s));

  for (double saving : {1.0 - p_ti_s / p_ti, 1.0 - p_b_s / p_b}) {
    REQUIRE_ACC(saving >= 0.20 && saving <= 0.27, "sharing saves " + fmt(100 * saving) + "%");
  }

  const double f_ti = static_cast<double>(count_flops(ti, 224, 14));
  const double f_b = static_cast<double>(count_flops(b, 224, 14));
  REQUIRE_ACC(within_pct(f_ti, 1.6e9, 20), "Ti flops " + fmt(f_ti));
  REQUIRE_ACC(within_pct(f_b, 5.4e9, 20), "B flops " + fmt(f_b));
  REQUIRE_ACC(count_flops(ti, 224, 14) == count_flops(ti_s, 224, 14), "sharing must not change FLOPs");
  REQUIRE_ACC(count_flops(b, 224, 14) == count_flops(b_s, 224, 14), "sharing must not change FLOPs");

  // analytic counts equal the built stores exactly
  for (auto cfg : {ti, ti_s, b, b_s}) {
    Model m = build<float>(cfg, 0);
    REQUIRE_ACC(count_params(cfg) == m.store.count_values(), "analytic vs built store");
  }
  return "Ti " + fmt(p_ti / 1e6) + "M/" + fmt(f_ti / 1e9) + "B, Ti+ " + fmt(p_ti_s / 1e6) + "M, B " +
         fmt(p_b / 1e6) + "M/" + fmt(f_b / 1e9) + "B, B+ " + fmt(p_b_s / 1e6) +
         "M; savings " + fmt(100 * (1 - p_ti_s / p_ti)) + "% / " + fmt(100 * (1 - p_b_s / p_b)) + "%";
}

std::string flop_scaling() {
  auto b = PsVitConfig::b();
  const double f10 = static_cast<double>(count_flops(b, 224, 10));
  const double f14 = static_cast<double>(count_flops(b, 224, 14));
  const double f18 = static_cast<double>(count_flops(b, 224, 18));
  const double ratio = f18 / f14;
  const double published = 8.8 / 5.4;
  REQUIRE_ACC(std::abs(ratio - published) <= 0.10 * published, "ratio " + fmt(ratio) + " vs " + fmt(published));
  REQUIRE_ACC(within_pct(f10, 3.1e9, 20), "B/10 flops " + fmt(f10));
  return "flops(18)/flops(14) = " + fmt(ratio) + " vs " + fmt(published) + "; B/10 = " + fmt(f10 / 1e9) + "B";
}

std::string overfit_sanity() {
  const auto t0 = std::chrono::steady_clock::now();
  Dataset ds = make_blob_dataset(64, 2, 16, 123);
  Model m = build<float>(PsVitConfig::toy(), 0);
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 32;
  tc.base_lr = 1e-3;
  tc.seed = 0;
  int reached_at = -1;
  auto series = train(m, ds, tc, [&](const Model&, const EpochMetrics& e, bool) {
    if (reached_at < 0 && e.accuracy >= 0.95) reached_at = e.epoch;
  });
  const double elapsed = seconds_since(t0);
  REQUIRE_ACC(reached_at > 0, "never reached 95% train accuracy");
  REQUIRE_ACC(elapsed < 60.0, "runtime " + fmt(elapsed) + "s exceeds 60s");

  int decreasing = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Model ms = build<float>(PsVitConfig::toy(), seed);
    TrainConfig ts = tc;
    ts.epochs = 10;
    ts.seed = seed;
    auto s = train(ms, ds, ts);
    if (s[9].loss < s[0].loss) ++decreasing;
  }
  REQUIRE_ACC(decreasing >= 9, "loss decreased for only " + std::to_string(decreasing) + "/10 seeds");
  return ">=95% at epoch " + std::to_string(reached_at) + " (" + fmt(elapsed) +
         "s); loss decreased over the first 10 epochs for " + std::to_string(decreasing) + "/10 seeds";
}

std::string persistence_and_cli() {
  const fs::path dir =
      fs::temp_directory_path() / ("psvit_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);

  // checkpoint round trip, byte for byte
  Model m = build<float>(PsVitConfig::toy(), 31);
  const fs::path ck1 = dir / "a.psvt", ck2 = dir / "b.psvt";
  save_checkpoint(m, ck1.string());
  Model loaded = load_checkpoint(ck1.string());
  save_checkpoint(loaded, ck2.string());
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  REQUIRE_ACC(slurp(ck1) == slurp(ck2), "checkpoint round trip not byte-identical");

  // IDX fixture parses exactly
  std::vector<std::vector<uint8_t>> imgs(4, std::vector<uint8_t>(16 * 16));
  for (int i = 0; i < 4; ++i)
    for (size_t p = 0; p < imgs[static_cast<size_t>(i)].size(); ++p)
      imgs[static_cast<size_t>(i)][p] = static_cast<uint8_t>((i + 3 * p) % 256);
  write_idx_images((dir / "im.idx").string(), imgs, 16, 16);
  write_idx_labels((dir / "lb.idx").string(), {1, 0, 1, 0});
  Dataset ds = load_idx((dir / "im.idx").string(), (dir / "lb.idx").string());
  REQUIRE_ACC(ds.size() == 4 && ds.labels[0] == 1 && ds.images[0].dim(1) == 16, "IDX fixture parse");
  REQUIRE_ACC(ds.images[3].at3(0, 0, 1) ==
                  (static_cast<float>(imgs[3][1]) / 255.0f - 0.5f) / 0.5f,
              "IDX normalization");

  // CLI determinism and exit codes
  const char* cli = std::getenv("PSVIT_CLI");
#ifdef PSVIT_CLI_DEFAULT
  if (cli == nullptr) cli = PSVIT_CLI_DEFAULT;
#endif
  REQUIRE_ACC(cli != nullptr, "PSVIT_CLI not set");
  auto shell = [&](const std::string& args) {
    const std::string cmd = std::string(cli) + " " + args + " > " + (dir / "log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const std::string tr = "train --preset toy --synthetic 16 --epochs 2 --batch 8 --lr 0.001 --seed 9 --out ";
  REQUIRE_ACC(shell(tr + (dir / "r1").string()) == 0, "train exit code");
  REQUIRE_ACC(shell(tr + (dir / "r2").string()) == 0, "train exit code");
  REQUIRE_ACC(slurp(dir / "r1" / "metrics.csv") == slurp(dir / "r2" / "metrics.csv"),
              "CLI train not deterministic under fixed seed");
  REQUIRE_ACC(shell("summary --preset nonsense") == 1, "validation failures must exit 1");
  REQUIRE_ACC(shell("gradcheck --scope matmul --seeds 1 --tol 1e-15") == 2, "audit failures must exit 2");
  REQUIRE_ACC(shell("gradcheck --scope gelu --seeds 2") == 0, "successful audit must exit 0");

  fs::remove_all(dir);
  return "checkpoint bytes stable; IDX exact; CLI deterministic with exit codes 0/1/2";
}

std::string transformer_properties() {
  Rng rng(23);
  // attention rows sum to one
  for (int trial = 0; trial < 10; ++trial) {
    TensorT<float> q = TensorT<float>::zeros({6, 9}), k = TensorT<float>::zeros({6, 9});
    rng.fill_normal(q, 0.0, 1.0);
    rng.fill_normal(k, 0.0, 1.0);
    TensorT<float> w = attention_weights(q, k);
    for (int r = 0; r < w.rows(); ++r) {
      double sum = 0;
      for (int c = 0; c < w.cols(); ++c) sum += w.at(r, c);
      REQUIRE_ACC(std::abs(sum - 1.0) <= 1e-6, "attention row sum " + fmt(sum));
    }
  }

  // column-permutation equivariance of mha and the encoder layer
  Rng pr(24);
  auto enc = EncoderLayerParamsT<float>::init(8, 2, 0.0f, pr);
  TensorT<float> x = TensorT<float>::zeros({8, 7});
  rng.fill_normal(x, 0.0, 1.0);
  std::vector<int> perm = {3, 0, 6, 1, 5, 2, 4};
  TensorT<float> xp = TensorT<float>::zeros({8, 7});
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 7; ++c) xp.at(r, c) = x.at(r, perm[static_cast<size_t>(c)]);

  Tape t1, t2, t3, t4;
  int m1 = mha(t1, t1.input(x), enc.attn);
  int m2 = mha(t2, t2.input(xp), enc.attn);
  int e1 = encoder_layer(t3, t3.input(x), enc, false, nullptr);
  int e2 = encoder_layer(t4, t4.input(xp), enc, false, nullptr);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 7; ++c) {
      REQUIRE_ACC(std::abs(t2.val(m2).at(r, c) - t1.val(m1).at(r, perm[static_cast<size_t>(c)])) <= 1e-6,
                  "mha permutation equivariance");
      REQUIRE_ACC(std::abs(t4.val(e2).at(r, c) - t3.val(e1).at(r, perm[static_cast<size_t>(c)])) <= 1e-6,
                  "encoder permutation equivariance");
    }

  // zeroed branches reduce the encoder layer to the identity, exactly
  Rng pr2(25);
  auto zenc = EncoderLayerParamsT<float>::init(8, 2, 0.0f, pr2);
  for (auto& v : zenc.attn.wo->buffer()) v = 0.0f;
  for (auto& v : zenc.ffn_w2->buffer()) v = 0.0f;
  TensorT<float> y = TensorT<float>::zeros({8, 5});
  rng.fill_uniform(y, 0.1, 1.0);
  Tape t5;
  int out = encoder_layer(t5, t5.input(y), zenc, false, nullptr);
  for (size_t i = 0; i < y.size(); ++i) {
    REQUIRE_ACC(t5.val(out)[i] == y[i], "zeroed-branch encoder must be exact identity");
  }
  return "row sums 1 +/- 1e-6; permutation equivariance 1e-6; zeroed-branch identity exact";
}

}  // namespace

int main() {
  std::vector<Criterion> criteria = {
      {"gradient-suite", gradient_suite},
      {"bilinear-oracle", bilinear_oracle},
      {"grid-initialization", grid_init},
      {"n1-degeneracy", n1_degeneracy},
      {"cost-reproduction", cost_reproduction},
      {"flop-scaling", flop_scaling},
      {"overfit-sanity", overfit_sanity},
      {"persistence-and-cli", persistence_and_cli},
      {"transformer-properties", transformer_properties},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    try {
      const std::string detail = c.body();
      std::cout << "[PASS] " << c.name << " — " << detail << "\n";
    } catch (const std::exception& e) {
      std::cout << "[FAIL] " << c.name << " — " << e.what() << "\n";
      ++failures;
    }
  }
  if (failures == 0) {
    std::cout << "acceptance: all " << criteria.size() << " criteria passed\n";
  } else {
    std::cout << "acceptance: " << failures << " of " << criteria.size() << " criteria FAILED\n";
  }
  return failures == 0 ? 0 : 1;
}

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "psvit/model.hpp"

namespace psvit {

// Audits run in double precision; the same templated op code backs the
// float path, so the headroom only removes rounding noise from the
// comparison, not the algorithm under test.
using ATen = TensorT<double>;
using ATape = TapeT<double>;

struct GradReport {
  std::string op;
  std::vector<double> max_rel;  // per swept tensor
  std::vector<double> max_abs;
  double worst_rel = 0.0;
  double worst_abs = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// One concrete audit: inputs swept through tape leaves, params swept through
// their bound tensors, and a graph builder that may capture the params.
struct AuditInstance {
  std::vector<ATen> inputs;
  std::vector<std::shared_ptr<ATen>> params;
  std::function<int(ATape&, const std::vector<int>&)> build;
};

struct AuditDef {
  std::string name;
  double h = 1e-3;
  double tol = 1e-3;
  std::function<AuditInstance(uint64_t)> instantiate;
};

// Central differences are invalid within h of a kink (ReLU, max pooling,
// clamped coordinates, integer bilinear locations): there they average the
// two one-sided slopes while the adjoint returns one side. Coordinates that
// miss tolerance at the base step are therefore re-estimated at h/16 and
// h/256; a kink artifact vanishes as the interval shrinks past the kink,
// a genuine adjoint error persists at every step size.
namespace detail {

// Fixed random projection to a scalar when the op output is not scalar.
inline int scalarize(ATape& tape, int out, uint64_t seed) {
  if (tape.val(out).size() == 1) return out;
  Rng rng(Rng::mix(seed, 0x5ca1a51eULL));
  auto r = std::make_shared<ATen>(ATen::zeros(tape.val(out).shape()));
  rng.fill_uniform(*r, -1.0, 1.0);
  double acc = 0;
  const auto& v = tape.val(out);
  for (size_t i = 0; i < v.size(); ++i) acc += v[i] * (*r)[i];
  return tape.push(ATen::from_op({1, 1}, {acc}), [out, r](ATape& t, int self) {
    const double g = t.grad(self)[0];
    auto& dout = t.grad(out);
    for (size_t i = 0; i < dout.size(); ++i) dout[i] += g * (*r)[i];
  });
}

inline double rel_err(double a, double f) {
  const double denom = std::max({std::abs(a), std::abs(f), 1e-6});
  return std::abs(a - f) / denom;
}

}  // namespace detail

// Central differences (f(x+h)-f(x-h))/2h per coordinate against the analytic
// adjoint. The forward must produce finite values; otherwise the audit
// aborts with a diagnostic.
inline GradReport finite_diff_audit(const AuditDef& def, uint64_t seed) {
  GradReport report;
  report.op = def.name;
  report.tol = def.tol;

  AuditInstance inst = def.instantiate(seed);

  // analytic pass
  ATape tape;
  std::vector<int> vars;
  for (const auto& in : inst.inputs) vars.push_back(tape.input(in));
  int out = inst.build(tape, vars);
  if (!tape.val(out).all_finite()) {
    throw std::runtime_error("gradcheck " + def.name + ": non-finite forward value, audit aborted");
  }
  int root = detail::scalarize(tape, out, seed);
  for (const auto& p : inst.params) p->zero_grad();
  tape.backward(root);

  auto forward_scalar = [&]() {
    ATape t2;
    std::vector<int> v2;
    for (const auto& in : inst.inputs) v2.push_back(t2.input(in));
    int o2 = inst.build(t2, v2);
    if (!t2.val(o2).all_finite()) {
      throw std::runtime_error("gradcheck " + def.name + ": non-finite forward value, audit aborted");
    }
    return t2.val(detail::scalarize(t2, o2, seed))[0];
  };

  auto central = [&](ATen& target, size_t i, double h) {
    const double orig = target[i];
    target[i] = orig + h;
    const double fp = forward_scalar();
    target[i] = orig - h;
    const double fm = forward_scalar();
    target[i] = orig;
    return (fp - fm) / (2.0 * h);
  };

  auto sweep = [&](ATen& target, const std::vector<double>& analytic) {
    double max_rel = 0, max_abs = 0;
    for (size_t i = 0; i < target.size(); ++i) {
      double fd = central(target, i, def.h);
      for (double shrink : {16.0, 256.0}) {
        if (detail::rel_err(analytic[i], fd) <= 0.25 * def.tol) break;
        fd = central(target, i, def.h / shrink);
      }
      max_rel = std::max(max_rel, detail::rel_err(analytic[i], fd));
      max_abs = std::max(max_abs, std::abs(analytic[i] - fd));
    }
    report.max_rel.push_back(max_rel);
    report.max_abs.push_back(max_abs);
  };

  for (size_t k = 0; k < inst.inputs.size(); ++k) {
    std::vector<double> analytic(tape.grad(vars[k]).buffer().begin(), tape.grad(vars[k]).buffer().end());
    sweep(inst.inputs[k], analytic);
  }
  for (const auto& p : inst.params) {
    std::vector<double> analytic(p->grad().begin(), p->grad().end());
    sweep(*p, analytic);
  }

  for (double r : report.max_rel) report.worst_rel = std::max(report.worst_rel, r);
  for (double a : report.max_abs) report.worst_abs = std::max(report.worst_abs, a);
  report.pass = report.worst_rel <= def.tol;
  return report;
}

// ---- registry of standard audits ----------------------------------------

namespace detail {

inline ATen rand_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  ATen t = ATen::zeros(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

// Values spaced at least `gap` apart in a shuffled order, for kinked ops
// (max pooling, ReLU) where central differences break near ties.
inline ATen spaced_tensor(Rng& rng, std::vector<int> shape, double gap) {
  ATen t = ATen::zeros(std::move(shape));
  std::vector<size_t> idx(t.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  for (size_t i = 0; i < idx.size(); ++i) {
    t[idx[i]] = static_cast<double>(i) * gap + rng.uniform(0.0, gap * 0.3) - 0.5 * gap * static_cast<double>(t.size());
  }
  return t;
}

// Fractional locations kept away from integer coordinates and borders,
// where the bilinear kernel is non-differentiable.
inline ATen interior_locations(Rng& rng, int count, int h, int w, double margin = 0.1) {
  ATen p = ATen::zeros({2, count});
  for (int i = 0; i < count; ++i) {
    const int cy = rng.uniform_int(0, h - 2);
    const int cx = rng.uniform_int(0, w - 2);
    p.at(0, i) = cy + rng.uniform(margin, 1.0 - margin);
    p.at(1, i) = cx + rng.uniform(margin, 1.0 - margin);
  }
  return p;
}

}  // namespace detail

inline std::vector<AuditDef> audit_registry() {
  using detail::interior_locations;
  using detail::rand_tensor;
  using detail::spaced_tensor;
  std::vector<AuditDef> defs;

  defs.push_back({"matmul", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {4, 3}), detail::rand_tensor(rng, {3, 5})};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.matmul(v[0], v[1]); };
    return in;
  }});

  defs.push_back({"softmax_rows", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {3, 6}, -2.0, 2.0)};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.softmax_rows(v[0]); };
    return in;
  }});

  defs.push_back({"gelu", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {4, 4}, -2.5, 2.5)};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.gelu(v[0]); };
    return in;
  }});

  defs.push_back({"layer_norm", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {3, 4}), detail::rand_tensor(rng, {4}, 0.5, 1.5),
                 detail::rand_tensor(rng, {4}, -0.5, 0.5)};
    in.build = [](ATape& t, const std::vector<int>& v) {
      return t.layer_norm_rows(v[0], v[1], v[2], 1e-6);
    };
    return in;
  }});

  defs.push_back({"layer_norm_cols", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {4, 3}), detail::rand_tensor(rng, {4}, 0.5, 1.5),
                 detail::rand_tensor(rng, {4}, -0.5, 0.5)};
    in.build = [](ATape& t, const std::vector<int>& v) {
      return t.layer_norm_cols(v[0], v[1], v[2], 1e-6);
    };
    return in;
  }});

  defs.push_back({"cross_entropy", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {7, 1}, -2.0, 2.0)};
    const int target = rng.uniform_int(0, 6);
    in.build = [target](ATape& t, const std::vector<int>& v) {
      return t.cross_entropy_smoothed(v[0], target, 0.1);
    };
    return in;
  }});

  defs.push_back({"relu", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::spaced_tensor(rng, {4, 5}, 0.05)};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.relu(v[0]); };
    return in;
  }});

  defs.push_back({"bilinear_sample", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {3, 8, 8}), detail::interior_locations(rng, 6, 8, 8)};
    in.build = [](ATape& t, const std::vector<int>& v) { return bilinear_sample(t, v[0], v[1]); };
    return in;
  }});

  defs.push_back({"positional_embed", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    auto w = std::make_shared<ATen>(detail::rand_tensor(rng, {6, 2}));
    in.inputs = {detail::interior_locations(rng, 4, 8, 8)};
    in.params = {w};
    in.build = [w](ATape& t, const std::vector<int>& v) {
      return positional_embed(t, v[0], w, GridSpec(8, 8, 2));
    };
    return in;
  }});

  defs.push_back({"predict_offsets", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {2, 6}), detail::rand_tensor(rng, {6, 4})};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.matmul(v[0], v[1]); };
    return in;
  }});

  defs.push_back({"attention", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {4, 5}), detail::rand_tensor(rng, {4, 5}),
                 detail::rand_tensor(rng, {4, 5})};
    in.build = [](ATape& t, const std::vector<int>& v) { return attention(t, v[0], v[1], v[2]); };
    return in;
  }});

  defs.push_back({"mha", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    Rng rp = rng.fork(1);
    auto params = std::make_shared<AttentionParamsT<double>>(AttentionParamsT<double>::init(8, 2, rp));
    in.inputs = {detail::rand_tensor(rng, {8, 5})};
    in.params = {params->wq, params->wk, params->wv, params->wo};
    in.build = [params](ATape& t, const std::vector<int>& v) { return mha(t, v[0], *params); };
    return in;
  }});

  defs.push_back({"encoder_layer", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    Rng rp = rng.fork(1);
    auto params = std::make_shared<EncoderLayerParamsT<double>>(
        EncoderLayerParamsT<double>::init(8, 2, 0.0, rp));
    in.inputs = {detail::rand_tensor(rng, {8, 6})};
    in.params = {params->attn.wq, params->attn.wk, params->attn.wv, params->attn.wo,
                 params->ln1_gamma, params->ln1_beta, params->ln2_gamma, params->ln2_beta,
                 params->ffn_w1, params->ffn_b1, params->ffn_w2, params->ffn_b2};
    in.build = [params](ATape& t, const std::vector<int>& v) {
      return encoder_layer(t, v[0], *params, false, nullptr);
    };
    return in;
  }});

  defs.push_back({"vtm", 1e-3, 1e-2, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    Rng r1 = rng.fork(1), r2 = rng.fork(2);
    auto layers = std::make_shared<std::vector<EncoderLayerParamsT<double>>>();
    layers->push_back(EncoderLayerParamsT<double>::init(6, 2, 0.0, r1));
    layers->push_back(EncoderLayerParamsT<double>::init(6, 2, 0.0, r2));
    auto cls = std::make_shared<ATen>(detail::rand_tensor(rng, {6, 1}));
    in.inputs = {detail::rand_tensor(rng, {6, 4})};
    in.params = {cls};
    in.build = [layers, cls](ATape& t, const std::vector<int>& v) {
      return vtm(t, v[0], cls, *layers, false, nullptr);
    };
    return in;
  }});

  defs.push_back({"conv2d", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {2, 5, 5}), detail::rand_tensor(rng, {3, 2, 3, 3}),
                 detail::rand_tensor(rng, {3})};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.conv2d(v[0], v[1], v[2], 1, 1); };
    return in;
  }});

  defs.push_back({"maxpool2d", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::spaced_tensor(rng, {2, 6, 6}, 0.05)};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.maxpool2d(v[0], 3, 2, 1); };
    return in;
  }});

  defs.push_back({"affine_channels", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    in.inputs = {detail::rand_tensor(rng, {3, 4, 4}), detail::rand_tensor(rng, {3}, 0.5, 1.5),
                 detail::rand_tensor(rng, {3}, -0.5, 0.5)};
    in.build = [](ATape& t, const std::vector<int>& v) { return t.affine_channels(v[0], v[1], v[2]); };
    return in;
  }});

  defs.push_back({"batchnorm_train", 1e-3, 1e-3, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    auto norm = std::make_shared<NormSiteT<double>>(NormSiteT<double>::init(3, true));
    rng.fill_uniform(*norm->gamma, 0.5, 1.5);
    rng.fill_uniform(*norm->beta, -0.5, 0.5);
    in.inputs = {detail::rand_tensor(rng, {3, 4, 4}), detail::rand_tensor(rng, {3, 4, 4})};
    in.params = {norm->gamma, norm->beta};
    in.build = [norm](ATape& t, const std::vector<int>& v) {
      // running-stat updates are side effects, irrelevant to the graph value
      auto ys = detail::batchnorm(t, {v[0], v[1]}, *norm, true);
      return t.add(ys[0], ys[1]);
    };
    return in;
  }});

  defs.push_back({"residual_block", 1e-3, 1e-2, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    Rng rp = rng.fork(1);
    auto block = std::make_shared<BottleneckParamsT<double>>(
        BottleneckParamsT<double>::init(4, 4, 8, false, rp));
    in.inputs = {detail::spaced_tensor(rng, {4, 5, 5}, 0.02)};
    in.params = {block->reduce.weight, block->spatial.weight, block->expand.weight,
                 block->shortcut->weight};
    in.build = [block](ATape& t, const std::vector<int>& v) {
      return residual_block(t, {v[0]}, *block, false)[0];
    };
    return in;
  }});

  defs.push_back({"extract_features", 1e-3, 1e-2, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    Rng rp = rng.fork(1);
    auto bb = std::make_shared<BackboneParamsT<double>>(
        BackboneParamsT<double>::init(BackboneConfig::toy(), 8, rp));
    in.inputs = {detail::rand_tensor(rng, {3, 8, 8})};
    in.build = [bb](ATape& t, const std::vector<int>& v) {
      return extract_features(t, {v[0]}, *bb, false)[0];
    };
    return in;
  }});

  defs.push_back({"progressive_sample", 1e-3, 1e-2, [](uint64_t seed) {
    Rng rng(seed);
    AuditInstance in;
    Rng rp = rng.fork(1);
    auto sampler = std::make_shared<SamplerParamsT<double>>(
        SamplerParamsT<double>::init(4, 2, 3, false, 0.0, rp));
    // randomize offset heads so sampling locations move off the integer
    // grid centers where the bilinear kernel has kinks
    Rng ro = rng.fork(2);
    for (auto& head : sampler->offset_heads) ro.fill_uniform(*head, -0.05, 0.05);
    in.inputs = {detail::rand_tensor(rng, {4, 8, 8})};
    in.params = {sampler->pos_proj};
    for (auto& head : sampler->offset_heads) in.params.push_back(head);
    for (auto& enc : sampler->encoders) {
      for (const auto& p : {enc.attn.wq, enc.attn.wk, enc.attn.wv, enc.attn.wo, enc.ln1_gamma,
                            enc.ln1_beta, enc.ln2_gamma, enc.ln2_beta, enc.ffn_w1, enc.ffn_b1,
                            enc.ffn_w2, enc.ffn_b2}) {
        in.params.push_back(p);
      }
    }
    in.build = [sampler](ATape& t, const std::vector<int>& v) {
      return progressive_sample<double>(t, v[0], *sampler, GridSpec(8, 8, 2), false, nullptr, nullptr);
    };
    return in;
  }});

  return defs;
}

// Full-model audit on the toy configuration: smoothed cross entropy of one
// image, gradients swept over every registered parameter. The audit point is
// jittered away from the initialization: zero-initialized offset heads pin
// the sampling locations to integer grid centers (bilinear kinks), and
// zero-initialized shifts can sit exactly on ReLU kinks behind dead columns.
// Central differences are only valid at generic, differentiable points.
inline GradReport audit_model_config(const PsVitConfig& cfg, uint64_t seed, double h, double tol) {
  ModelT<double> model = build<double>(cfg, seed);
  Rng rng(Rng::mix(seed, 77));
  for (const auto& entry : model.store.entries()) {
    for (size_t i = 0; i < entry.tensor->size(); ++i) (*entry.tensor)[i] += rng.uniform(-0.02, 0.02);
  }
  for (auto& head : model.sampler.offset_heads) rng.fill_uniform(*head, -0.05, 0.05);

  std::vector<ATen> images = {detail::rand_tensor(rng, {3, cfg.input_size, cfg.input_size})};
  std::vector<int> targets = {static_cast<int>(seed % cfg.num_classes)};

  auto loss_value = [&]() {
    ATape tape;
    BatchVars vars = forward_batch<double>(tape, model, images, &targets, false, nullptr, nullptr);
    return tape.val(vars.loss)[0];
  };

  GradReport report;
  report.op = "model";
  report.tol = tol;

  model.store.zero_grads();
  {
    ATape tape;
    BatchVars vars = forward_batch<double>(tape, model, images, &targets, false, nullptr, nullptr);
    if (!tape.val(vars.loss).all_finite()) {
      throw std::runtime_error("gradcheck model: non-finite loss, audit aborted");
    }
    tape.backward(vars.loss);
  }

  auto central = [&](TensorT<double>& tensor, size_t i, double step) {
    const double orig = tensor[i];
    tensor[i] = orig + step;
    const double fp = loss_value();
    tensor[i] = orig - step;
    const double fm = loss_value();
    tensor[i] = orig;
    return (fp - fm) / (2.0 * step);
  };

  for (const auto& entry : model.store.entries()) {
    auto& tensor = *entry.tensor;
    const auto& analytic = tensor.grad();
    double max_rel = 0, max_abs = 0;
    for (size_t i = 0; i < tensor.size(); ++i) {
      double fd = central(tensor, i, h);
      for (double shrink : {16.0, 256.0}) {
        if (detail::rel_err(analytic[i], fd) <= 0.25 * tol) break;
        fd = central(tensor, i, h / shrink);
      }
      max_rel = std::max(max_rel, detail::rel_err(analytic[i], fd));
      max_abs = std::max(max_abs, std::abs(analytic[i] - fd));
    }
    report.max_rel.push_back(max_rel);
    report.max_abs.push_back(max_abs);
  }
  for (double r : report.max_rel) report.worst_rel = std::max(report.worst_rel, r);
  for (double a : report.max_abs) report.worst_abs = std::max(report.worst_abs, a);
  report.pass = report.worst_rel <= tol;
  return report;
}

inline GradReport audit_model(uint64_t seed, double h = 1e-3, double tol = 1e-2) {
  PsVitConfig cfg = PsVitConfig::toy();
  cfg.num_classes = 3;
  return audit_model_config(cfg, seed, h, tol);
}

}  // namespace psvit

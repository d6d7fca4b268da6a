#pragma once

#include <memory>
#include <vector>

#include "psvit/tape.hpp"
#include "psvit/transformer.hpp"

namespace psvit {

// Regular n x n sampling grid over an H x W feature map. Index i maps to
// row pi_y = floor(i/n), column pi_x = i - pi_y*n; step sizes are H/n and
// W/n, and initial centers sit half a step inside each cell.
struct GridSpec {
  int height = 0;
  int width = 0;
  int n = 0;

  GridSpec(int h, int w, int n_) : height(h), width(w), n(n_) {
    if (n < 1) throw std::invalid_argument("grid: n must be >= 1");
    if (n > height || n > width) {
      throw std::invalid_argument("grid: n=" + std::to_string(n) + " exceeds feature map " +
                                  std::to_string(height) + "x" + std::to_string(width));
    }
  }

  int points() const { return n * n; }
  double step_h() const { return static_cast<double>(height) / n; }
  double step_w() const { return static_cast<double>(width) / n; }
};

// Initial locations p_1: row i of the grid enumerated in row-major order,
// coordinate order (y, x), in feature-map pixel units.
template <typename S>
TensorT<S> init_grid(const GridSpec& spec) {
  const int pts = spec.points();
  TensorT<S> p = TensorT<S>::zeros({2, pts});
  const double sh = spec.step_h(), sw = spec.step_w();
  for (int i = 0; i < pts; ++i) {
    const int py = i / spec.n;
    const int px = i - py * spec.n;
    p.at(0, i) = static_cast<S>(py * sh + sh / 2.0);
    p.at(1, i) = static_cast<S>(px * sw + sw / 2.0);
  }
  return p;
}

// Differentiable bilinear gather: T'[:,i] = sum_q K(q, p_i) F[:,q] with
// K(q,p) = max(0,1-|q_y-p_y|) * max(0,1-|q_x-p_x|). Only the four integer
// neighbors contribute; locations must already lie in [0,H-1]x[0,W-1].
template <typename S>
TensorT<S> bilinear_sample(const TensorT<S>& f, const TensorT<S>& p) {
  if (f.ndim() != 3) throw std::invalid_argument("bilinear: feature map must be C x H x W");
  if (p.ndim() != 2 || p.rows() != 2) throw std::invalid_argument("bilinear: locations must be 2 x n^2");
  const int channels = f.dim(0), h = f.dim(1), w = f.dim(2);
  const int pts = p.cols();
  TensorT<S> out = TensorT<S>::zeros({channels, pts});
  for (int i = 0; i < pts; ++i) {
    const S py = p.at(0, i), px = p.at(1, i);
    if (!std::isfinite(static_cast<double>(py)) || !std::isfinite(static_cast<double>(px))) {
      throw std::runtime_error("bilinear: non-finite location at index " + std::to_string(i));
    }
    const int y0 = std::min(h - 1, std::max(0, static_cast<int>(std::floor(py))));
    const int x0 = std::min(w - 1, std::max(0, static_cast<int>(std::floor(px))));
    const int y1 = std::min(y0 + 1, h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const S fy = py - static_cast<S>(y0);
    const S fx = px - static_cast<S>(x0);
    const S w00 = (S(1) - fy) * (S(1) - fx), w01 = (S(1) - fy) * fx;
    const S w10 = fy * (S(1) - fx), w11 = fy * fx;
    for (int c = 0; c < channels; ++c) {
      out.at(c, i) = w00 * f.at3(c, y0, x0) + w01 * f.at3(c, y0, x1) + w10 * f.at3(c, y1, x0) +
                     w11 * f.at3(c, y1, x1);
    }
  }
  return out;
}

// Adjoint of the gather. dF scatters kernel weights times upstream; dp
// contracts the piecewise-constant kernel slopes with F and upstream.
template <typename S>
void bilinear_sample_adjoint(const TensorT<S>& f, const TensorT<S>& p, const TensorT<S>& upstream,
                             TensorT<S>* df, TensorT<S>* dp) {
  const int channels = f.dim(0), h = f.dim(1), w = f.dim(2);
  const int pts = p.cols();
  for (int i = 0; i < pts; ++i) {
    const S py = p.at(0, i), px = p.at(1, i);
    const int y0 = std::min(h - 1, std::max(0, static_cast<int>(std::floor(py))));
    const int x0 = std::min(w - 1, std::max(0, static_cast<int>(std::floor(px))));
    const int y1 = std::min(y0 + 1, h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const S fy = py - static_cast<S>(y0);
    const S fx = px - static_cast<S>(x0);
    S acc_y = 0, acc_x = 0;
    for (int c = 0; c < channels; ++c) {
      const S g = upstream.at(c, i);
      const S f00 = f.at3(c, y0, x0), f01 = f.at3(c, y0, x1);
      const S f10 = f.at3(c, y1, x0), f11 = f.at3(c, y1, x1);
      if (df) {
        df->at3(c, y0, x0) += g * (S(1) - fy) * (S(1) - fx);
        df->at3(c, y0, x1) += g * (S(1) - fy) * fx;
        df->at3(c, y1, x0) += g * fy * (S(1) - fx);
        df->at3(c, y1, x1) += g * fy * fx;
      }
      acc_y += g * (-(S(1) - fx) * f00 - fx * f01 + (S(1) - fx) * f10 + fx * f11);
      acc_x += g * (-(S(1) - fy) * f00 + (S(1) - fy) * f01 - fy * f10 + fy * f11);
    }
    if (dp) {
      dp->at(0, i) += acc_y;
      dp->at(1, i) += acc_x;
    }
  }
}

template <typename S>
int bilinear_sample(TapeT<S>& t, int f, int p) {
  TensorT<S> v = bilinear_sample(t.val(f), t.val(p));
  return t.push(std::move(v), [f, p](TapeT<S>& tp, int self) {
    bilinear_sample_adjoint(tp.val(f), tp.val(p), tp.grad(self), &tp.grad(f), &tp.grad(p));
  });
}

// Affine map of each coordinate axis to [-1, 1]; a degenerate axis of size 1
// maps to 0 with zero derivative.
template <typename S>
TensorT<S> normalize_coords(const TensorT<S>& p, const GridSpec& spec) {
  TensorT<S> out = TensorT<S>::zeros(p.shape());
  const S sy = spec.height > 1 ? S(2) / static_cast<S>(spec.height - 1) : S(0);
  const S sx = spec.width > 1 ? S(2) / static_cast<S>(spec.width - 1) : S(0);
  for (int i = 0; i < p.cols(); ++i) {
    out.at(0, i) = spec.height > 1 ? sy * p.at(0, i) - S(1) : S(0);
    out.at(1, i) = spec.width > 1 ? sx * p.at(1, i) - S(1) : S(0);
  }
  return out;
}

template <typename S>
int normalize_coords(TapeT<S>& t, int p, const GridSpec& spec) {
  TensorT<S> v = normalize_coords(t.val(p), spec);
  const S sy = spec.height > 1 ? S(2) / static_cast<S>(spec.height - 1) : S(0);
  const S sx = spec.width > 1 ? S(2) / static_cast<S>(spec.width - 1) : S(0);
  return t.push(std::move(v), [p, sy, sx](TapeT<S>& tp, int self) {
    const TensorT<S>& g = tp.grad(self);
    TensorT<S>& dp = tp.grad(p);
    for (int i = 0; i < g.cols(); ++i) {
      dp.at(0, i) += sy * g.at(0, i);
      dp.at(1, i) += sx * g.at(1, i);
    }
  });
}

// Positional encodings P_t: normalized absolute coordinates projected by the
// C x 2 matrix W_t shared across all iterations.
template <typename S>
int positional_embed(TapeT<S>& t, int p, const std::shared_ptr<TensorT<S>>& w_pos, const GridSpec& spec) {
  return t.matmul(t.param(w_pos), normalize_coords(t, p, spec));
}

// Clamps locations row-wise into [0, H-1] x [0, W-1].
template <typename S>
int clamp_coords(TapeT<S>& t, int p, const GridSpec& spec) {
  int rows_y = t.slice_rows(p, 0, 1);
  int rows_x = t.slice_rows(p, 1, 1);
  int cy = t.clamp(rows_y, S(0), static_cast<S>(spec.height - 1));
  int cx = t.clamp(rows_x, S(0), static_cast<S>(spec.width - 1));
  return t.concat_rows({cy, cx});
}

// Progressive sampler parameters. The positional projection is a single
// instance regardless of N; offset heads exist for iterations 1..N-1 and
// encoder layers for 1..N, either per-iteration or one aliased set when
// weights are shared.
template <typename S>
struct SamplerParamsT {
  using Ten = TensorT<S>;
  std::shared_ptr<Ten> pos_proj;                    // W_t: C x 2
  std::vector<std::shared_ptr<Ten>> offset_heads;   // M_t: 2 x C
  std::vector<EncoderLayerParamsT<S>> encoders;
  int iterations = 1;
  bool shared = false;

  const std::shared_ptr<Ten>& offset_head(int t) const {
    if (t < 1 || t >= iterations) {
      throw std::invalid_argument("sampler: offsets are only predicted for iterations 1.." +
                                  std::to_string(iterations - 1) + ", got t=" + std::to_string(t));
    }
    return offset_heads[shared ? 0 : static_cast<size_t>(t - 1)];
  }

  const EncoderLayerParamsT<S>& encoder(int t) const {
    if (t < 1 || t > iterations) throw std::invalid_argument("sampler: iteration out of range");
    return encoders[shared ? 0 : static_cast<size_t>(t - 1)];
  }

  // Offset heads start at zero so training begins from the regular grid.
  static SamplerParamsT init(int channels, int heads, int iterations, bool shared, S dropout_rate,
                             Rng& rng) {
    if (iterations < 1) throw std::invalid_argument("sampler: N must be >= 1");
    SamplerParamsT p;
    p.iterations = iterations;
    p.shared = shared;
    p.pos_proj = std::make_shared<Ten>(Ten::zeros({channels, 2}));
    Rng rp = rng.fork(100);
    rp.fill_trunc_normal(*p.pos_proj, kInitStd);
    const int enc_count = shared ? 1 : iterations;
    for (int i = 0; i < enc_count; ++i) {
      Rng re = rng.fork(200 + static_cast<uint64_t>(i));
      p.encoders.push_back(EncoderLayerParamsT<S>::init(channels, heads, dropout_rate, re));
    }
    const int head_count = iterations > 1 ? (shared ? 1 : iterations - 1) : 0;
    for (int i = 0; i < head_count; ++i) {
      p.offset_heads.push_back(std::make_shared<Ten>(Ten::zeros({2, channels})));
    }
    return p;
  }
};

// One iteration's recorded locations: the raw running sum p_t and the
// clamped effective location actually sampled.
template <typename S>
struct TrajectoryStepT {
  TensorT<S> raw;
  TensorT<S> effective;
};

template <typename S>
using TrajectoryLogT = std::vector<TrajectoryStepT<S>>;

using TrajectoryLog = TrajectoryLogT<float>;

// The N-step progressive sampling loop. Per iteration: clamp the running
// locations, gather tokens, add positional encodings and the previous
// iteration's output (T_0 = 0), run one encoder layer, then predict offsets
// for the next iteration (skipped at t = N). Returns T_N.
template <typename S>
int progressive_sample(TapeT<S>& t, int f, const SamplerParamsT<S>& params, const GridSpec& spec,
                       bool train_mode, Rng* rng, TrajectoryLogT<S>* log) {
  const int n_iters = params.iterations;
  int p = t.constant(init_grid<S>(spec));
  int prev_tokens = -1;
  int tokens = -1;
  for (int it = 1; it <= n_iters; ++it) {
    int p_eff = clamp_coords(t, p, spec);
    if (log) log->push_back({t.val(p), t.val(p_eff)});
    int sampled = bilinear_sample(t, f, p_eff);
    int pos = positional_embed(t, p_eff, params.pos_proj, spec);
    int x = t.add(sampled, pos);
    if (prev_tokens >= 0) x = t.add(x, prev_tokens);
    tokens = encoder_layer(t, x, params.encoder(it), train_mode, rng);
    if (it < n_iters) {
      int offsets = t.matmul(t.param(params.offset_head(it)), tokens);
      p = t.add(p, offsets);
    }
    prev_tokens = tokens;
  }
  return tokens;
}

}  // namespace psvit

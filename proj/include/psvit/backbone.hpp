#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "psvit/tape.hpp"

namespace psvit {

// Feature extractor layout: ResNet-style stem (7x7 stride-2 conv + 3x3
// stride-2 max pool) followed by stage-1 bottleneck blocks and a 1x1
// projection onto the token dimension. Overall spatial stride is 4.
//
// toy_mode swaps batch normalization for a plain per-channel affine so
// finite-difference audits stay exact; desk-scale tests always run toy_mode.
struct BackboneConfig {
  int stem_channels = 64;
  int bottleneck_width = 64;
  int block_out_channels = 256;
  int blocks = 2;
  bool toy_mode = false;

  static BackboneConfig resnet_stage1() { return BackboneConfig{}; }
  static BackboneConfig toy() { return BackboneConfig{8, 4, 8, 2, true}; }
};

template <typename S>
struct NormSiteT {
  using Ten = TensorT<S>;
  std::shared_ptr<Ten> gamma, beta;
  std::shared_ptr<Ten> running_mean, running_var;  // batch mode only; buffers, not parameters

  static NormSiteT init(int channels, bool batch_mode) {
    NormSiteT n;
    n.gamma = std::make_shared<Ten>(Ten::full({channels}, S(1)));
    n.beta = std::make_shared<Ten>(Ten::zeros({channels}));
    if (batch_mode) {
      n.running_mean = std::make_shared<Ten>(Ten::zeros({channels}));
      n.running_var = std::make_shared<Ten>(Ten::full({channels}, S(1)));
    }
    return n;
  }

  bool batch_mode() const { return running_mean != nullptr; }
};

template <typename S>
struct ConvNormT {
  using Ten = TensorT<S>;
  std::shared_ptr<Ten> weight;  // Cout x Cin x k x k, bias-free (norm absorbs it)
  NormSiteT<S> norm;
  int stride = 1;
  int pad = 0;

  static ConvNormT init(int cin, int cout, int k, int stride, int pad, bool batch_norm, Rng& rng) {
    ConvNormT c;
    c.weight = std::make_shared<Ten>(Ten::zeros({cout, cin, k, k}));
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(k) * k * cout));  // He fan-out
    rng.fill_normal(*c.weight, 0.0, std_dev);
    c.norm = NormSiteT<S>::init(cout, batch_norm);
    c.stride = stride;
    c.pad = pad;
    return c;
  }
};

template <typename S>
struct BottleneckParamsT {
  ConvNormT<S> reduce, spatial, expand;        // 1x1 -> 3x3 -> 1x1
  std::optional<ConvNormT<S>> shortcut;        // 1x1 when channel counts differ

  static BottleneckParamsT init(int cin, int width, int cout, bool batch_norm, Rng& rng) {
    BottleneckParamsT b;
    Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3), r4 = rng.fork(4);
    b.reduce = ConvNormT<S>::init(cin, width, 1, 1, 0, batch_norm, r1);
    b.spatial = ConvNormT<S>::init(width, width, 3, 1, 1, batch_norm, r2);
    b.expand = ConvNormT<S>::init(width, cout, 1, 1, 0, batch_norm, r3);
    if (cin != cout) b.shortcut = ConvNormT<S>::init(cin, cout, 1, 1, 0, batch_norm, r4);
    return b;
  }
};

template <typename S>
struct BackboneParamsT {
  BackboneConfig cfg;
  ConvNormT<S> stem;
  std::vector<BottleneckParamsT<S>> blocks;
  ConvNormT<S> proj;

  static BackboneParamsT init(const BackboneConfig& cfg, int token_dim, Rng& rng) {
    BackboneParamsT p;
    p.cfg = cfg;
    const bool bn = !cfg.toy_mode;
    Rng rs = rng.fork(10);
    p.stem = ConvNormT<S>::init(3, cfg.stem_channels, 7, 2, 3, bn, rs);
    int cin = cfg.stem_channels;
    for (int b = 0; b < cfg.blocks; ++b) {
      Rng rb = rng.fork(20 + static_cast<uint64_t>(b));
      p.blocks.push_back(BottleneckParamsT<S>::init(cin, cfg.bottleneck_width, cfg.block_out_channels, bn, rb));
      cin = cfg.block_out_channels;
    }
    Rng rp = rng.fork(40);
    p.proj = ConvNormT<S>::init(cin, token_dim, 1, 1, 0, bn, rp);
    return p;
  }
};

namespace detail {

// Batch normalization over a batch of C x H x W activations. Training mode
// normalizes with batch statistics (biased variance) and updates the running
// buffers with the unbiased variance; eval mode is a per-image affine from
// the running buffers. The single backward closure sits on the first output
// node, where reverse-order traversal guarantees every output gradient is
// final.
template <typename S>
std::vector<int> batchnorm(TapeT<S>& t, const std::vector<int>& xs, const NormSiteT<S>& norm,
                           bool train_mode, S eps = S(1e-5), S momentum = S(0.1)) {
  const int channels = t.val(xs[0]).dim(0);
  const int hw = t.val(xs[0]).dim(1) * t.val(xs[0]).dim(2);
  const int batch = static_cast<int>(xs.size());

  if (!train_mode) {
    // y = gamma * (x - rm)/sqrt(rv+eps) + beta; running stats are constants
    std::vector<int> ys;
    int g = t.param(norm.gamma), b = t.param(norm.beta);
    auto inv = std::make_shared<TensorT<S>>(TensorT<S>::zeros({channels}));
    for (int c = 0; c < channels; ++c) {
      (*inv)[static_cast<size_t>(c)] = S(1) / std::sqrt((*norm.running_var)[static_cast<size_t>(c)] + eps);
    }
    const auto& rm = *norm.running_mean;
    for (int x : xs) {
      TensorT<S> xh = t.val(x);
      for (int c = 0; c < channels; ++c)
        for (int i = 0; i < hw; ++i) {
          size_t idx = static_cast<size_t>(c) * hw + i;
          xh[idx] = (xh[idx] - rm[static_cast<size_t>(c)]) * (*inv)[static_cast<size_t>(c)];
        }
      int xhat = t.push(std::move(xh), [x, inv, channels, hw](TapeT<S>& tp, int self) {
        auto& dx = tp.grad(x);
        const auto& gy = tp.grad(self);
        for (int c = 0; c < channels; ++c)
          for (int i = 0; i < hw; ++i) {
            size_t idx = static_cast<size_t>(c) * hw + i;
            dx[idx] += gy[idx] * (*inv)[static_cast<size_t>(c)];
          }
      });
      ys.push_back(t.affine_channels(xhat, g, b));
    }
    return ys;
  }

  // training mode: statistics across batch and spatial dims
  const S count = static_cast<S>(batch) * static_cast<S>(hw);
  TensorT<S> mean = TensorT<S>::zeros({channels});
  TensorT<S> var = TensorT<S>::zeros({channels});
  for (int x : xs) {
    const auto& v = t.val(x);
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < hw; ++i) mean[static_cast<size_t>(c)] += v[static_cast<size_t>(c) * hw + i];
  }
  for (int c = 0; c < channels; ++c) mean[static_cast<size_t>(c)] /= count;
  for (int x : xs) {
    const auto& v = t.val(x);
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < hw; ++i) {
        const S d = v[static_cast<size_t>(c) * hw + i] - mean[static_cast<size_t>(c)];
        var[static_cast<size_t>(c)] += d * d;
      }
  }
  for (int c = 0; c < channels; ++c) var[static_cast<size_t>(c)] /= count;

  if (norm.running_mean) {
    for (int c = 0; c < channels; ++c) {
      const S unbiased = count > S(1) ? var[static_cast<size_t>(c)] * count / (count - S(1)) : var[static_cast<size_t>(c)];
      (*norm.running_mean)[static_cast<size_t>(c)] =
          (S(1) - momentum) * (*norm.running_mean)[static_cast<size_t>(c)] + momentum * mean[static_cast<size_t>(c)];
      (*norm.running_var)[static_cast<size_t>(c)] =
          (S(1) - momentum) * (*norm.running_var)[static_cast<size_t>(c)] + momentum * unbiased;
    }
  }

  int g = t.param(norm.gamma), b = t.param(norm.beta);
  auto mean_p = std::make_shared<TensorT<S>>(mean);
  auto inv_p = std::make_shared<TensorT<S>>(TensorT<S>::zeros({channels}));
  for (int c = 0; c < channels; ++c) (*inv_p)[static_cast<size_t>(c)] = S(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);

  // xhat nodes per image, then gamma*xhat+beta via affine_channels
  auto xhat_ids = std::make_shared<std::vector<int>>();
  std::vector<int> ys;
  auto xs_copy = std::make_shared<std::vector<int>>(xs);
  for (int j = 0; j < batch; ++j) {
    const auto& v = t.val(xs[static_cast<size_t>(j)]);
    TensorT<S> xh = TensorT<S>::zeros(v.shape());
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < hw; ++i) {
        size_t idx = static_cast<size_t>(c) * hw + i;
        xh[idx] = (v[idx] - (*mean_p)[static_cast<size_t>(c)]) * (*inv_p)[static_cast<size_t>(c)];
      }
    std::function<void(TapeT<S>&, int)> back;
    if (j == 0) {
      // dx_j = inv/count * (count*dxhat_j - sum_dxhat - xhat_j * sum(dxhat*xhat))
      back = [xs_copy, xhat_ids, inv_p, channels, hw, count](TapeT<S>& tp, int) {
        std::vector<S> sum_g(static_cast<size_t>(channels), S(0));
        std::vector<S> sum_gx(static_cast<size_t>(channels), S(0));
        for (int id : *xhat_ids) {
          const auto& gy = tp.grad(id);
          const auto& xv = tp.val(id);
          for (int c = 0; c < channels; ++c)
            for (int i = 0; i < hw; ++i) {
              size_t idx = static_cast<size_t>(c) * hw + i;
              sum_g[static_cast<size_t>(c)] += gy[idx];
              sum_gx[static_cast<size_t>(c)] += gy[idx] * xv[idx];
            }
        }
        for (size_t jj = 0; jj < xhat_ids->size(); ++jj) {
          const auto& gy = tp.grad((*xhat_ids)[jj]);
          const auto& xv = tp.val((*xhat_ids)[jj]);
          auto& dx = tp.grad((*xs_copy)[jj]);
          for (int c = 0; c < channels; ++c) {
            const S inv_c = (*inv_p)[static_cast<size_t>(c)];
            for (int i = 0; i < hw; ++i) {
              size_t idx = static_cast<size_t>(c) * hw + i;
              dx[idx] += inv_c * (gy[idx] - sum_g[static_cast<size_t>(c)] / count -
                                  xv[idx] * sum_gx[static_cast<size_t>(c)] / count);
            }
          }
        }
      };
    }
    int xhat = t.push(std::move(xh), std::move(back));
    xhat_ids->push_back(xhat);
    ys.push_back(t.affine_channels(xhat, g, b));
  }
  return ys;
}

template <typename S>
std::vector<int> apply_norm(TapeT<S>& t, const std::vector<int>& xs, const NormSiteT<S>& norm,
                            bool train_mode) {
  if (!norm.batch_mode()) {
    std::vector<int> ys;
    int g = t.param(norm.gamma), b = t.param(norm.beta);
    for (int x : xs) ys.push_back(t.affine_channels(x, g, b));
    return ys;
  }
  return batchnorm(t, xs, norm, train_mode);
}

template <typename S>
std::vector<int> conv_norm(TapeT<S>& t, const std::vector<int>& xs, const ConvNormT<S>& cn,
                           bool train_mode) {
  std::vector<int> ys;
  int w = t.param(cn.weight);
  for (int x : xs) ys.push_back(t.conv2d(x, w, -1, cn.stride, cn.pad));
  return apply_norm(t, ys, cn.norm, train_mode);
}

template <typename S>
std::vector<int> relu_each(TapeT<S>& t, const std::vector<int>& xs) {
  std::vector<int> ys;
  for (int x : xs) ys.push_back(t.relu(x));
  return ys;
}

}  // namespace detail

// Bottleneck residual block (stride 1): 1x1 reduce -> 3x3 -> 1x1 expand,
// identity or 1x1-projected shortcut, post-add ReLU.
template <typename S>
std::vector<int> residual_block(TapeT<S>& t, const std::vector<int>& xs, const BottleneckParamsT<S>& p,
                                bool train_mode) {
  auto h = detail::relu_each(t, detail::conv_norm(t, xs, p.reduce, train_mode));
  h = detail::relu_each(t, detail::conv_norm(t, h, p.spatial, train_mode));
  h = detail::conv_norm(t, h, p.expand, train_mode);
  std::vector<int> sc = xs;
  if (p.shortcut) sc = detail::conv_norm(t, xs, *p.shortcut, train_mode);
  std::vector<int> ys;
  for (size_t i = 0; i < h.size(); ++i) ys.push_back(t.relu(t.add(h[i], sc[i])));
  return ys;
}

// Dense feature map F for each image in the batch: stem -> blocks -> 1x1
// projection to the token dimension. Input spatial dims must be divisible
// by 4; output is C x (H/4) x (W/4).
template <typename S>
std::vector<int> extract_features(TapeT<S>& t, const std::vector<int>& images,
                                  const BackboneParamsT<S>& p, bool train_mode) {
  for (int img : images) {
    const auto& v = t.val(img);
    if (v.ndim() != 3 || v.dim(0) != 3) {
      throw std::invalid_argument("backbone: expected 3 x H x W image, got " + shape_str(v.shape()));
    }
    if (v.dim(1) % 4 != 0 || v.dim(2) % 4 != 0) {
      throw std::invalid_argument("backbone: input dims " + std::to_string(v.dim(1)) + "x" +
                                  std::to_string(v.dim(2)) + " must be divisible by 4");
    }
  }
  auto h = detail::relu_each(t, detail::conv_norm(t, images, p.stem, train_mode));
  std::vector<int> pooled;
  for (int x : h) pooled.push_back(t.maxpool2d(x, 3, 2, 1));
  h = pooled;
  for (const auto& block : p.blocks) h = residual_block(t, h, block, train_mode);
  return detail::conv_norm(t, h, p.proj, train_mode);
}

}  // namespace psvit

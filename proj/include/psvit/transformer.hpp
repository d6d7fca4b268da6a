#pragma once

#include <memory>
#include <vector>

#include "psvit/tape.hpp"

namespace psvit {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kInitStd = 0.02;

// Per-head query/key/value projections stacked into single C x C matrices
// (head i owns the row band [i*D, (i+1)*D)), plus the C x C output projection
// applied to the concatenated heads.
template <typename S>
struct AttentionParamsT {
  using Ten = TensorT<S>;
  std::shared_ptr<Ten> wq, wk, wv, wo;
  int heads = 1;

  static AttentionParamsT init(int channels, int heads, Rng& rng) {
    if (heads < 1 || channels % heads != 0) {
      throw std::invalid_argument("attention: channel count " + std::to_string(channels) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    }
    AttentionParamsT p;
    p.heads = heads;
    auto make = [&](Rng r) {
      auto t = std::make_shared<Ten>(Ten::zeros({channels, channels}));
      r.fill_trunc_normal(*t, kInitStd);
      return t;
    };
    p.wq = make(rng.fork(1));
    p.wk = make(rng.fork(2));
    p.wv = make(rng.fork(3));
    p.wo = make(rng.fork(4));
    return p;
  }
};

template <typename S>
struct EncoderLayerParamsT {
  using Ten = TensorT<S>;
  AttentionParamsT<S> attn;
  std::shared_ptr<Ten> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  std::shared_ptr<Ten> ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // C->3C, 3C->C
  S dropout_rate = S(0);

  static EncoderLayerParamsT init(int channels, int heads, S dropout_rate, Rng& rng) {
    EncoderLayerParamsT p;
    p.attn = AttentionParamsT<S>::init(channels, heads, rng);
    p.dropout_rate = dropout_rate;
    const int hidden = 3 * channels;
    p.ln1_gamma = std::make_shared<Ten>(Ten::full({channels}, S(1)));
    p.ln1_beta = std::make_shared<Ten>(Ten::zeros({channels}));
    p.ln2_gamma = std::make_shared<Ten>(Ten::full({channels}, S(1)));
    p.ln2_beta = std::make_shared<Ten>(Ten::zeros({channels}));
    p.ffn_w1 = std::make_shared<Ten>(Ten::zeros({hidden, channels}));
    p.ffn_b1 = std::make_shared<Ten>(Ten::zeros({hidden}));
    p.ffn_w2 = std::make_shared<Ten>(Ten::zeros({channels, hidden}));
    p.ffn_b2 = std::make_shared<Ten>(Ten::zeros({channels}));
    Rng r1 = rng.fork(5), r2 = rng.fork(6);
    r1.fill_trunc_normal(*p.ffn_w1, kInitStd);
    r2.fill_trunc_normal(*p.ffn_w2, kInitStd);
    return p;
  }
};

// Scaled dot-product attention on D x L operands:
// softmax(Q^T K / sqrt(D)) applied row-wise, multiplied by V^T, transposed
// back so the result is D x L.
template <typename S>
int attention(TapeT<S>& t, int q, int k, int v) {
  const int d = t.val(q).rows();
  if (t.val(k).rows() != d || t.val(v).rows() != d || t.val(k).cols() != t.val(q).cols() ||
      t.val(v).cols() != t.val(q).cols()) {
    throw std::invalid_argument("attention: mismatched operand shapes " + shape_str(t.val(q).shape()) +
                                ", " + shape_str(t.val(k).shape()) + ", " + shape_str(t.val(v).shape()));
  }
  int scores = t.scale(t.matmul(t.transpose(q), k), S(1) / std::sqrt(static_cast<S>(d)));
  int weights = t.softmax_rows(scores);
  return t.matmul(v, t.transpose(weights));  // V A^T == (A V^T)^T
}

// Attention weight matrix softmax(Q^T K / sqrt(D)), exposed for inspection.
template <typename S>
TensorT<S> attention_weights(const TensorT<S>& q, const TensorT<S>& k) {
  const S d = static_cast<S>(q.rows());
  return softmax_rows(scale(matmul(transpose(q), k), S(1) / std::sqrt(d)));
}

// Multi-head self-attention on Z (C x L): per-head attention over projected
// row bands, heads concatenated and projected back to C.
template <typename S>
int mha(TapeT<S>& t, int z, const AttentionParamsT<S>& p) {
  const int channels = t.val(z).rows();
  const int heads = p.heads;
  const int d = channels / heads;
  int q = t.matmul(t.param(p.wq), z);
  int k = t.matmul(t.param(p.wk), z);
  int v = t.matmul(t.param(p.wv), z);
  std::vector<int> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    int qi = t.slice_rows(q, h * d, d);
    int ki = t.slice_rows(k, h * d, d);
    int vi = t.slice_rows(v, h * d, d);
    outs.push_back(attention(t, qi, ki, vi));
  }
  int cat = heads == 1 ? outs[0] : t.concat_rows(outs);
  return t.matmul(t.param(p.wo), cat);
}

// Pre-norm encoder layer: X + Drop(MHA(LN(X))), then + FFN(LN(.)) with
// FFN = Linear(C->3C) -> GELU -> Drop -> Linear(3C->C).
template <typename S>
int encoder_layer(TapeT<S>& t, int x, const EncoderLayerParamsT<S>& p, bool train_mode, Rng* rng) {
  const S rate = train_mode ? p.dropout_rate : S(0);
  int a = t.layer_norm_cols(x, t.param(p.ln1_gamma), t.param(p.ln1_beta), static_cast<S>(kLayerNormEps));
  int att = mha(t, a, p.attn);
  if (rate > S(0)) att = t.dropout(att, rate, *rng);
  int x1 = t.add(x, att);
  int f = t.layer_norm_cols(x1, t.param(p.ln2_gamma), t.param(p.ln2_beta), static_cast<S>(kLayerNormEps));
  int h = t.gelu(t.add_bias_cols(t.matmul(t.param(p.ffn_w1), f), t.param(p.ffn_b1)));
  if (rate > S(0)) h = t.dropout(h, rate, *rng);
  int o = t.add_bias_cols(t.matmul(t.param(p.ffn_w2), h), t.param(p.ffn_b2));
  return t.add(x1, o);
}

// Vision transformer module: prepends the class token (column 0) and applies
// the encoder stack. No positional embedding is added here; positions were
// already fused into the sampled tokens.
template <typename S>
int vtm(TapeT<S>& t, int tokens, const std::shared_ptr<TensorT<S>>& cls_token,
        const std::vector<EncoderLayerParamsT<S>>& layers, bool train_mode, Rng* rng) {
  int x = t.concat_cols({t.param(cls_token), tokens});
  for (const auto& layer : layers) x = encoder_layer(t, x, layer, train_mode, rng);
  return x;
}

}  // namespace psvit

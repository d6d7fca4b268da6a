#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "psvit/tensor.hpp"

// Stateless forward evaluations and their analytic adjoints. Every adjoint
// accumulates (+=) into the destination buffers so repeated application with
// upstream g matches a single application with the summed upstream.

namespace psvit {

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int n = a.rows(), k = a.cols(), m = b.cols();
  TensorT<S> c = TensorT<S>::zeros({n, m});
  for (int i = 0; i < n; ++i) {
    const S* ar = a.data() + static_cast<size_t>(i) * k;
    S* cr = c.data() + static_cast<size_t>(i) * m;
    for (int l = 0; l < k; ++l) {
      const S av = ar[l];
      if (av == S(0)) continue;
      const S* br = b.data() + static_cast<size_t>(l) * m;
      for (int j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

// dA += dC B^T, dB += A^T dC
template <typename S>
void matmul_adjoint(const TensorT<S>& a, const TensorT<S>& b, const TensorT<S>& dc, TensorT<S>* da,
                    TensorT<S>* db) {
  const int n = a.rows(), k = a.cols(), m = b.cols();
  if (da) {
    for (int i = 0; i < n; ++i)
      for (int l = 0; l < k; ++l) {
        S acc = 0;
        const S* dcr = dc.data() + static_cast<size_t>(i) * m;
        const S* br = b.data() + static_cast<size_t>(l) * m;
        for (int j = 0; j < m; ++j) acc += dcr[j] * br[j];
        da->at(i, l) += acc;
      }
  }
  if (db) {
    for (int l = 0; l < k; ++l)
      for (int j = 0; j < m; ++j) {
        S acc = 0;
        for (int i = 0; i < n; ++i) acc += a.at(i, l) * dc.at(i, j);
        db->at(l, j) += acc;
      }
  }
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
  TensorT<S> t = TensorT<S>::zeros({a.cols(), a.rows()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  TensorT<S> c = a;
  for (size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S s) {
  TensorT<S> c = a;
  for (size_t i = 0; i < c.size(); ++i) c[i] *= s;
  return c;
}

// X[C x L] + column vector b[C] broadcast over columns.
template <typename S>
TensorT<S> add_bias_cols(const TensorT<S>& x, const TensorT<S>& b) {
  if (x.ndim() != 2 || static_cast<int>(b.size()) != x.rows()) {
    throw std::invalid_argument("add_bias_cols: bias length " + std::to_string(b.size()) +
                                " vs rows " + std::to_string(x.rows()));
  }
  TensorT<S> y = x;
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < x.cols(); ++c) y.at(r, c) += b[static_cast<size_t>(r)];
  return y;
}

template <typename S>
void add_bias_cols_adjoint(const TensorT<S>& dy, TensorT<S>* dx, TensorT<S>* db) {
  if (dx)
    for (size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
  if (db)
    for (int r = 0; r < dy.rows(); ++r)
      for (int c = 0; c < dy.cols(); ++c) (*db)[static_cast<size_t>(r)] += dy.at(r, c);
}

// Row-stable softmax; every output row is a probability vector.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
  if (x.ndim() != 2) throw std::invalid_argument("softmax_rows: expected 2-d tensor");
  TensorT<S> y = TensorT<S>::zeros(x.shape());
  for (int r = 0; r < x.rows(); ++r) {
    S mx = x.at(r, 0);
    for (int c = 1; c < x.cols(); ++c) mx = std::max(mx, x.at(r, c));
    S sum = 0;
    for (int c = 0; c < x.cols(); ++c) {
      S e = std::exp(x.at(r, c) - mx);
      y.at(r, c) = e;
      sum += e;
    }
    for (int c = 0; c < x.cols(); ++c) y.at(r, c) /= sum;
  }
  return y;
}

// dX_row = Y_row * (dY_row - <dY_row, Y_row>)
template <typename S>
void softmax_rows_adjoint(const TensorT<S>& y, const TensorT<S>& dy, TensorT<S>* dx) {
  for (int r = 0; r < y.rows(); ++r) {
    S dot = 0;
    for (int c = 0; c < y.cols(); ++c) dot += dy.at(r, c) * y.at(r, c);
    for (int c = 0; c < y.cols(); ++c) dx->at(r, c) += y.at(r, c) * (dy.at(r, c) - dot);
  }
}

// Exact GELU x * Phi(x) with the standard normal CDF.
template <typename S>
S gelu_scalar(S x) {
  const double xd = static_cast<double>(x);
  return static_cast<S>(xd * 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0))));
}

template <typename S>
S gelu_grad_scalar(S x) {
  const double xd = static_cast<double>(x);
  const double phi = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * 3.14159265358979323846);
  const double Phi = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
  return static_cast<S>(Phi + xd * phi);
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  TensorT<S> y = x;
  for (size_t i = 0; i < y.size(); ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename S>
void gelu_adjoint(const TensorT<S>& x, const TensorT<S>& dy, TensorT<S>* dx) {
  for (size_t i = 0; i < x.size(); ++i) (*dx)[i] += dy[i] * gelu_grad_scalar(x[i]);
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  TensorT<S> y = x;
  for (size_t i = 0; i < y.size(); ++i) y[i] = std::max(S(0), x[i]);
  return y;
}

template <typename S>
void relu_adjoint(const TensorT<S>& x, const TensorT<S>& dy, TensorT<S>* dx) {
  for (size_t i = 0; i < x.size(); ++i) (*dx)[i] += x[i] > S(0) ? dy[i] : S(0);
}

// Normalizes each row of X[R x C'] to zero mean / unit variance (biased
// variance, +eps), then scales by gamma and shifts by beta.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
  if (eps <= S(0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const int rows = x.rows(), cols = x.cols();
  if (static_cast<int>(gamma.size()) != cols || static_cast<int>(beta.size()) != cols) {
    throw std::invalid_argument("layer_norm: gamma/beta length must equal row width");
  }
  TensorT<S> y = TensorT<S>::zeros(x.shape());
  for (int r = 0; r < rows; ++r) {
    S mean = 0;
    for (int c = 0; c < cols; ++c) mean += x.at(r, c);
    mean /= static_cast<S>(cols);
    S var = 0;
    for (int c = 0; c < cols; ++c) {
      S d = x.at(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<S>(cols);
    const S inv = S(1) / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c) {
      y.at(r, c) = gamma[static_cast<size_t>(c)] * (x.at(r, c) - mean) * inv + beta[static_cast<size_t>(c)];
    }
  }
  return y;
}

template <typename S>
void layer_norm_adjoint(const TensorT<S>& x, const TensorT<S>& gamma, S eps, const TensorT<S>& dy,
                        TensorT<S>* dx, TensorT<S>* dgamma, TensorT<S>* dbeta) {
  const int rows = x.rows(), cols = x.cols();
  for (int r = 0; r < rows; ++r) {
    S mean = 0;
    for (int c = 0; c < cols; ++c) mean += x.at(r, c);
    mean /= static_cast<S>(cols);
    S var = 0;
    for (int c = 0; c < cols; ++c) {
      S d = x.at(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<S>(cols);
    const S inv = S(1) / std::sqrt(var + eps);

    S sum_g = 0, sum_gx = 0;
    for (int c = 0; c < cols; ++c) {
      const S xhat = (x.at(r, c) - mean) * inv;
      const S g = dy.at(r, c) * gamma[static_cast<size_t>(c)];
      sum_g += g;
      sum_gx += g * xhat;
      if (dgamma) (*dgamma)[static_cast<size_t>(c)] += dy.at(r, c) * xhat;
      if (dbeta) (*dbeta)[static_cast<size_t>(c)] += dy.at(r, c);
    }
    if (dx) {
      for (int c = 0; c < cols; ++c) {
        const S xhat = (x.at(r, c) - mean) * inv;
        const S g = dy.at(r, c) * gamma[static_cast<size_t>(c)];
        dx->at(r, c) += inv * (g - sum_g / static_cast<S>(cols) - xhat * sum_gx / static_cast<S>(cols));
      }
    }
  }
}

// Token-wise variant: normalizes each column of X[C x L]. gamma/beta have
// length C. Equivalent to layer_norm on the transpose.
template <typename S>
TensorT<S> layer_norm_cols(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
  return transpose(layer_norm(transpose(x), gamma, beta, eps));
}

template <typename S>
void layer_norm_cols_adjoint(const TensorT<S>& x, const TensorT<S>& gamma, S eps, const TensorT<S>& dy,
                             TensorT<S>* dx, TensorT<S>* dgamma, TensorT<S>* dbeta) {
  TensorT<S> xt = transpose(x);
  TensorT<S> dyt = transpose(dy);
  TensorT<S> dxt = TensorT<S>::zeros(xt.shape());
  layer_norm_adjoint(xt, gamma, eps, dyt, dx ? &dxt : nullptr, dgamma, dbeta);
  if (dx) {
    TensorT<S> dxb = transpose(dxt);
    for (size_t i = 0; i < dx->size(); ++i) (*dx)[i] += dxb[i];
  }
}

// Smoothed cross entropy on a logit vector. q_target = 1-eps+eps/K,
// q_other = eps/K; loss = -sum_k q_k log softmax(logits)_k.
template <typename S>
S cross_entropy_smoothed(const TensorT<S>& logits, int target, S eps) {
  const int k = static_cast<int>(logits.size());
  if (target < 0 || target >= k) {
    throw std::invalid_argument("cross_entropy: target " + std::to_string(target) + " out of range for " +
                                std::to_string(k) + " classes");
  }
  if (eps < S(0) || eps >= S(1)) throw std::invalid_argument("cross_entropy: eps must be in [0,1)");
  S mx = logits[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, logits[static_cast<size_t>(i)]);
  S lse = 0;
  for (int i = 0; i < k; ++i) lse += std::exp(logits[static_cast<size_t>(i)] - mx);
  lse = std::log(lse) + mx;
  const S q_other = eps / static_cast<S>(k);
  const S q_target = S(1) - eps + q_other;
  S loss = 0;
  for (int i = 0; i < k; ++i) {
    const S q = (i == target) ? q_target : q_other;
    loss -= q * (logits[static_cast<size_t>(i)] - lse);
  }
  return loss;
}

// dlogits += upstream * (softmax(logits) - q)
template <typename S>
void cross_entropy_smoothed_adjoint(const TensorT<S>& logits, int target, S eps, S upstream,
                                    TensorT<S>* dlogits) {
  const int k = static_cast<int>(logits.size());
  S mx = logits[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, logits[static_cast<size_t>(i)]);
  S sum = 0;
  std::vector<S> p(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    p[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
    sum += p[static_cast<size_t>(i)];
  }
  const S q_other = eps / static_cast<S>(k);
  const S q_target = S(1) - eps + q_other;
  for (int i = 0; i < k; ++i) {
    const S q = (i == target) ? q_target : q_other;
    (*dlogits)[static_cast<size_t>(i)] += upstream * (p[static_cast<size_t>(i)] / sum - q);
  }
}

// Elementwise clamp; derivative is 0 at saturation.
template <typename S>
TensorT<S> clamp(const TensorT<S>& x, S lo, S hi) {
  TensorT<S> y = x;
  for (size_t i = 0; i < y.size(); ++i) y[i] = std::min(hi, std::max(lo, x[i]));
  return y;
}

template <typename S>
void clamp_adjoint(const TensorT<S>& x, S lo, S hi, const TensorT<S>& dy, TensorT<S>* dx) {
  for (size_t i = 0; i < x.size(); ++i) {
    if (x[i] > lo && x[i] < hi) (*dx)[i] += dy[i];
  }
}

// Standard cross-correlation. X[Cin x Hin x Win], W[Cout x Cin x k x k],
// optional bias[Cout]. Hout = floor((Hin + 2p - k)/stride) + 1.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4) throw std::invalid_argument("conv2d: expected 3-d input and 4-d weights");
  const int cin = x.dim(0), hin = x.dim(1), win = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k) {
    throw std::invalid_argument("conv2d: weight shape " + shape_str(w.shape()) + " does not match input " +
                                shape_str(x.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int hout = (hin + 2 * pad - k) / stride + 1;
  const int wout = (win + 2 * pad - k) / stride + 1;
  if (hout <= 0 || wout <= 0) throw std::invalid_argument("conv2d: kernel does not fit input");
  TensorT<S> y = TensorT<S>::zeros({cout, hout, wout});
  for (int co = 0; co < cout; ++co) {
    const S b = bias ? (*bias)[static_cast<size_t>(co)] : S(0);
    for (int oy = 0; oy < hout; ++oy)
      for (int ox = 0; ox < wout; ++ox) {
        S acc = b;
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= hin) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= win) continue;
              acc += x.at3(ci, iy, ix) * w[((static_cast<size_t>(co) * cin + ci) * k + ky) * k + kx];
            }
          }
        y.at3(co, oy, ox) = acc;
      }
  }
  return y;
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, int stride, int pad) {
  return conv2d<S>(x, w, nullptr, stride, pad);
}

template <typename S>
void conv2d_adjoint(const TensorT<S>& x, const TensorT<S>& w, int stride, int pad, const TensorT<S>& dy,
                    TensorT<S>* dx, TensorT<S>* dw, TensorT<S>* db) {
  const int cin = x.dim(0), hin = x.dim(1), win = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  const int hout = dy.dim(1), wout = dy.dim(2);
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < hout; ++oy)
      for (int ox = 0; ox < wout; ++ox) {
        const S g = dy.at3(co, oy, ox);
        if (g == S(0)) continue;
        if (db) (*db)[static_cast<size_t>(co)] += g;
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= hin) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= win) continue;
              const size_t wi = ((static_cast<size_t>(co) * cin + ci) * k + ky) * k + kx;
              if (dx) dx->at3(ci, iy, ix) += g * w[wi];
              if (dw) (*dw)[wi] += g * x.at3(ci, iy, ix);
            }
          }
      }
}

// Max pooling; ties resolve to the first (row-major) maximum so the adjoint
// is deterministic. Returns argmax indices for the backward pass.
template <typename S>
TensorT<S> maxpool2d(const TensorT<S>& x, int k, int stride, int pad, std::vector<int>* argmax) {
  const int c = x.dim(0), hin = x.dim(1), win = x.dim(2);
  const int hout = (hin + 2 * pad - k) / stride + 1;
  const int wout = (win + 2 * pad - k) / stride + 1;
  TensorT<S> y = TensorT<S>::zeros({c, hout, wout});
  if (argmax) argmax->assign(static_cast<size_t>(c) * hout * wout, -1);
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < hout; ++oy)
      for (int ox = 0; ox < wout; ++ox) {
        S best = -std::numeric_limits<S>::infinity();
        int best_idx = -1;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= hin) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= win) continue;
            const S v = x.at3(ch, iy, ix);
            if (v > best) {
              best = v;
              best_idx = (ch * hin + iy) * win + ix;
            }
          }
        }
        y.at3(ch, oy, ox) = best;
        if (argmax) (*argmax)[(static_cast<size_t>(ch) * hout + oy) * wout + ox] = best_idx;
      }
  return y;
}

template <typename S>
void maxpool2d_adjoint(const std::vector<int>& argmax, const TensorT<S>& dy, TensorT<S>* dx) {
  for (size_t i = 0; i < dy.size(); ++i) {
    if (argmax[i] >= 0) (*dx)[static_cast<size_t>(argmax[i])] += dy[i];
  }
}

// Per-channel affine map on a 3-d tensor: y[c,:,:] = scale[c] * x + shift[c].
// The toy-mode stand-in for batch normalization.
template <typename S>
TensorT<S> affine_channels(const TensorT<S>& x, const TensorT<S>& scl, const TensorT<S>& shift) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  TensorT<S> y = x;
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * w; ++i) {
      size_t idx = static_cast<size_t>(ch) * h * w + i;
      y[idx] = scl[static_cast<size_t>(ch)] * x[idx] + shift[static_cast<size_t>(ch)];
    }
  return y;
}

template <typename S>
void affine_channels_adjoint(const TensorT<S>& x, const TensorT<S>& scl, const TensorT<S>& dy,
                             TensorT<S>* dx, TensorT<S>* dscl, TensorT<S>* dshift) {
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) {
      size_t idx = static_cast<size_t>(ch) * hw + i;
      if (dx) (*dx)[idx] += dy[idx] * scl[static_cast<size_t>(ch)];
      if (dscl) (*dscl)[static_cast<size_t>(ch)] += dy[idx] * x[idx];
      if (dshift) (*dshift)[static_cast<size_t>(ch)] += dy[idx];
    }
}

}  // namespace psvit

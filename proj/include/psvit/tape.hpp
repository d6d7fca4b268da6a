#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "psvit/ops.hpp"
#include "psvit/tensor.hpp"

namespace psvit {

// Dynamically recorded computation graph. Each recorded op stores a closure
// that applies the corresponding analytic adjoint; backward() walks nodes in
// reverse recording order and accumulates (+=) into node gradients, then
// flushes leaf gradients into their bound parameter tensors.
//
// Tensors are immutable once recorded; gradient buffers are single-writer.
template <typename S>
class TapeT {
public:
  using Ten = TensorT<S>;

  int size() const { return static_cast<int>(nodes_.size()); }

  const Ten& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
  Ten& grad(int id) { return nodes_[static_cast<size_t>(id)].grad; }

  // Leaf that never receives gradient flow of interest (e.g. fixed grids).
  int constant(Ten v) { return push(std::move(v), nullptr); }

  // Differentiable leaf; gradient stays on the tape (read via grad()).
  int input(Ten v) { return push(std::move(v), nullptr); }

  // Differentiable leaf bound to an external tensor. Binding the same tensor
  // twice yields the same node, so aliased (weight-shared) parameters
  // accumulate one gradient across all their uses.
  int param(const std::shared_ptr<Ten>& p) {
    auto it = param_nodes_.find(p.get());
    if (it != param_nodes_.end()) return it->second;
    int id = push(*p, nullptr);
    nodes_[static_cast<size_t>(id)].bound = p;
    param_nodes_[p.get()] = id;
    return id;
  }

  int matmul(int a, int b) {
    Ten v = psvit::matmul(val(a), val(b));
    return push(std::move(v), [a, b](TapeT& t, int self) {
      psvit::matmul_adjoint(t.val(a), t.val(b), t.grad(self), &t.grad(a), &t.grad(b));
    });
  }

  int transpose(int a) {
    return push(psvit::transpose(val(a)), [a](TapeT& t, int self) {
      Ten gt = psvit::transpose(t.grad(self));
      auto& da = t.grad(a);
      for (size_t i = 0; i < da.size(); ++i) da[i] += gt[i];
    });
  }

  int add(int a, int b) {
    return push(psvit::add(val(a), val(b)), [a, b](TapeT& t, int self) {
      auto& g = t.grad(self);
      auto& da = t.grad(a);
      auto& db = t.grad(b);
      for (size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i];
        db[i] += g[i];
      }
    });
  }

  int scale(int a, S s) {
    return push(psvit::scale(val(a), s), [a, s](TapeT& t, int self) {
      auto& g = t.grad(self);
      auto& da = t.grad(a);
      for (size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
    });
  }

  int add_bias_cols(int x, int b) {
    return push(psvit::add_bias_cols(val(x), val(b)), [x, b](TapeT& t, int self) {
      psvit::add_bias_cols_adjoint(t.grad(self), &t.grad(x), &t.grad(b));
    });
  }

  int softmax_rows(int a) {
    return push(psvit::softmax_rows(val(a)), [a](TapeT& t, int self) {
      psvit::softmax_rows_adjoint(t.val(self), t.grad(self), &t.grad(a));
    });
  }

  int gelu(int a) {
    return push(psvit::gelu(val(a)), [a](TapeT& t, int self) {
      psvit::gelu_adjoint(t.val(a), t.grad(self), &t.grad(a));
    });
  }

  int relu(int a) {
    return push(psvit::relu(val(a)), [a](TapeT& t, int self) {
      psvit::relu_adjoint(t.val(a), t.grad(self), &t.grad(a));
    });
  }

  int layer_norm_cols(int x, int gamma, int beta, S eps) {
    return push(psvit::layer_norm_cols(val(x), val(gamma), val(beta), eps),
                [x, gamma, beta, eps](TapeT& t, int self) {
                  psvit::layer_norm_cols_adjoint(t.val(x), t.val(gamma), eps, t.grad(self), &t.grad(x),
                                                 &t.grad(gamma), &t.grad(beta));
                });
  }

  int layer_norm_rows(int x, int gamma, int beta, S eps) {
    return push(psvit::layer_norm(val(x), val(gamma), val(beta), eps),
                [x, gamma, beta, eps](TapeT& t, int self) {
                  psvit::layer_norm_adjoint(t.val(x), t.val(gamma), eps, t.grad(self), &t.grad(x),
                                            &t.grad(gamma), &t.grad(beta));
                });
  }

  int clamp(int x, S lo, S hi) {
    return push(psvit::clamp(val(x), lo, hi), [x, lo, hi](TapeT& t, int self) {
      psvit::clamp_adjoint(t.val(x), lo, hi, t.grad(self), &t.grad(x));
    });
  }

  int cross_entropy_smoothed(int logits, int target, S eps) {
    Ten v = Ten::from_op({1, 1}, {psvit::cross_entropy_smoothed(val(logits), target, eps)});
    return push(std::move(v), [logits, target, eps](TapeT& t, int self) {
      psvit::cross_entropy_smoothed_adjoint(t.val(logits), target, eps, t.grad(self)[0], &t.grad(logits));
    });
  }

  int conv2d(int x, int w, int bias, int stride, int pad) {
    const Ten* bp = bias >= 0 ? &val(bias) : nullptr;
    return push(psvit::conv2d(val(x), val(w), bp, stride, pad), [x, w, bias, stride, pad](TapeT& t, int self) {
      psvit::conv2d_adjoint(t.val(x), t.val(w), stride, pad, t.grad(self), &t.grad(x), &t.grad(w),
                            bias >= 0 ? &t.grad(bias) : nullptr);
    });
  }

  int maxpool2d(int x, int k, int stride, int pad) {
    auto argmax = std::make_shared<std::vector<int>>();
    Ten v = psvit::maxpool2d(val(x), k, stride, pad, argmax.get());
    return push(std::move(v), [x, argmax](TapeT& t, int self) {
      psvit::maxpool2d_adjoint(*argmax, t.grad(self), &t.grad(x));
    });
  }

  int affine_channels(int x, int scl, int shift) {
    return push(psvit::affine_channels(val(x), val(scl), val(shift)), [x, scl, shift](TapeT& t, int self) {
      psvit::affine_channels_adjoint(t.val(x), t.val(scl), t.grad(self), &t.grad(x), &t.grad(scl),
                                     &t.grad(shift));
    });
  }

  // Inverted dropout with a recorded mask; identity when rate == 0.
  int dropout(int x, S rate, Rng& rng) {
    if (rate <= S(0)) return x;
    if (rate >= S(1)) throw std::invalid_argument("dropout: rate must be < 1");
    auto mask = std::make_shared<std::vector<S>>(val(x).size());
    const S keep = S(1) - rate;
    for (auto& m : *mask) m = rng.uniform(0.0, 1.0) < static_cast<double>(rate) ? S(0) : S(1) / keep;
    Ten v = val(x);
    for (size_t i = 0; i < v.size(); ++i) v[i] *= (*mask)[i];
    return push(std::move(v), [x, mask](TapeT& t, int self) {
      auto& g = t.grad(self);
      auto& dx = t.grad(x);
      for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (*mask)[i];
    });
  }

  // Stacks 2-d blocks with equal column counts on top of each other.
  int concat_rows(const std::vector<int>& parts) {
    const int cols = val(parts.at(0)).cols();
    int rows = 0;
    for (int p : parts) rows += val(p).rows();
    Ten v = Ten::zeros({rows, cols});
    int r0 = 0;
    for (int p : parts) {
      const Ten& pv = val(p);
      for (int r = 0; r < pv.rows(); ++r)
        for (int c = 0; c < cols; ++c) v.at(r0 + r, c) = pv.at(r, c);
      r0 += pv.rows();
    }
    auto ps = parts;
    return push(std::move(v), [ps](TapeT& t, int self) {
      const Ten& g = t.grad(self);
      int r0 = 0;
      for (int p : ps) {
        Ten& dp = t.grad(p);
        for (int r = 0; r < dp.rows(); ++r)
          for (int c = 0; c < dp.cols(); ++c) dp.at(r, c) += g.at(r0 + r, c);
        r0 += dp.rows();
      }
    });
  }

  // Places 2-d blocks with equal row counts side by side.
  int concat_cols(const std::vector<int>& parts) {
    const int rows = val(parts.at(0)).rows();
    int cols = 0;
    for (int p : parts) cols += val(p).cols();
    Ten v = Ten::zeros({rows, cols});
    int c0 = 0;
    for (int p : parts) {
      const Ten& pv = val(p);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < pv.cols(); ++c) v.at(r, c0 + c) = pv.at(r, c);
      c0 += pv.cols();
    }
    auto ps = parts;
    return push(std::move(v), [ps](TapeT& t, int self) {
      const Ten& g = t.grad(self);
      int c0 = 0;
      for (int p : ps) {
        Ten& dp = t.grad(p);
        for (int r = 0; r < dp.rows(); ++r)
          for (int c = 0; c < dp.cols(); ++c) dp.at(r, c) += g.at(r, c0 + c);
        c0 += dp.cols();
      }
    });
  }

  int slice_rows(int x, int r0, int count) {
    const Ten& xv = val(x);
    Ten v = Ten::zeros({count, xv.cols()});
    for (int r = 0; r < count; ++r)
      for (int c = 0; c < xv.cols(); ++c) v.at(r, c) = xv.at(r0 + r, c);
    return push(std::move(v), [x, r0, count](TapeT& t, int self) {
      const Ten& g = t.grad(self);
      Ten& dx = t.grad(x);
      for (int r = 0; r < count; ++r)
        for (int c = 0; c < g.cols(); ++c) dx.at(r0 + r, c) += g.at(r, c);
    });
  }

  int slice_cols(int x, int c0, int count) {
    const Ten& xv = val(x);
    Ten v = Ten::zeros({xv.rows(), count});
    for (int r = 0; r < xv.rows(); ++r)
      for (int c = 0; c < count; ++c) v.at(r, c) = xv.at(r, c0 + c);
    return push(std::move(v), [x, c0, count](TapeT& t, int self) {
      const Ten& g = t.grad(self);
      Ten& dx = t.grad(x);
      for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < count; ++c) dx.at(r, c0 + c) += g.at(r, c);
    });
  }

  int mean_of(const std::vector<int>& scalars) {
    S acc = 0;
    for (int s : scalars) acc += val(s)[0];
    Ten v = Ten::from_op({1, 1}, {acc / static_cast<S>(scalars.size())});
    auto ss = scalars;
    return push(std::move(v), [ss](TapeT& t, int self) {
      const S g = t.grad(self)[0] / static_cast<S>(ss.size());
      for (int s : ss) t.grad(s)[0] += g;
    });
  }

  // Custom node for ops recorded outside this class (sampling etc).
  int push(Ten val, std::function<void(TapeT&, int)> back) {
    if (check_finite_enabled()) val.validate_finite("recorded op");
    Node n;
    n.val = std::move(val);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Seeds d(root)/d(root) = 1 and propagates in reverse recording order.
  // Leaf gradients are added into their bound parameter tensors.
  void backward(int root) {
    if (val(root).size() != 1) throw std::invalid_argument("backward: root must be scalar");
    for (auto& n : nodes_) n.grad = Ten::zeros(n.val.shape());
    nodes_[static_cast<size_t>(root)].grad[0] = S(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.bound) n.bound->accumulate_grad(n.grad.buffer());
    }
  }

private:
  struct Node {
    Ten val;
    Ten grad;
    std::function<void(TapeT&, int)> back;
    std::shared_ptr<Ten> bound;
  };

  std::vector<Node> nodes_;
  std::unordered_map<Ten*, int> param_nodes_;
};

using Tape = TapeT<float>;

}  // namespace psvit

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvit {

// Set PSVIT_CHECK_FINITE=1 to assert finiteness after every recorded op.
inline bool check_finite_enabled() {
  static const bool enabled = [] {
    const char* v = std::getenv("PSVIT_CHECK_FINITE");
    return v != nullptr && v[0] == '1';
  }();
  return enabled;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

/// Dense row-major N-d array of scalars with an optional gradient buffer.
/// Values are kept finite: constructing from explicit data validates, and
/// recorded ops re-validate when PSVIT_CHECK_FINITE=1.
template <typename S>
class TensorT {
public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape) {
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_.assign(t.numel_from_shape(), S(0));
    return t;
  }

  static TensorT full(std::vector<int> shape, S value) {
    TensorT t = zeros(std::move(shape));
    for (auto& x : t.data_) x = value;
    t.validate_finite("full");
    return t;
  }

  TensorT(std::vector<int> shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_from_shape() != data_.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match buffer of " +
                                  std::to_string(data_.size()) + " elements");
    }
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw std::invalid_argument("tensor: non-finite value rejected at construction");
      }
    }
  }

  // Internal: build from computed data without the finiteness scan (ops
  // re-check under the env toggle instead).
  static TensorT from_op(std::vector<int> shape, std::vector<S> data) {
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    if (t.numel_from_shape() != t.data_.size()) {
      throw std::invalid_argument("tensor: op produced mismatched shape " + shape_str(t.shape_));
    }
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& buffer() { return data_; }
  const std::vector<S>& buffer() const { return data_; }

  // 2-d accessors (row-major)
  int rows() const { return shape_.at(0); }
  int cols() const { return shape_.at(1); }
  S& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
  S at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

  // 3-d accessors (channel, y, x)
  S& at3(int c, int y, int x) {
    return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  S at3(int c, int y, int x) const {
    return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  S& operator[](size_t i) { return data_[i]; }
  S operator[](size_t i) const { return data_[i]; }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  // gradient buffer, allocated on demand, accumulated with +=
  bool has_grad() const { return !grad_.empty(); }
  std::vector<S>& grad() {
    if (grad_.empty()) grad_.assign(data_.size(), S(0));
    return grad_;
  }
  const std::vector<S>& grad() const { return grad_; }
  void zero_grad() {
    if (!grad_.empty()) grad_.assign(data_.size(), S(0));
  }
  void drop_grad() { grad_.clear(); }

  void accumulate_grad(const std::vector<S>& g) {
    if (g.size() != data_.size()) throw std::invalid_argument("tensor: gradient size mismatch");
    auto& dst = grad();
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void validate_finite(const char* what) const {
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw std::runtime_error(std::string("tensor: non-finite value after ") + what);
      }
    }
  }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

private:
  size_t numel_from_shape() const {
    size_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape_));
      n *= static_cast<size_t>(d);
    }
    return shape_.empty() ? 0 : n;
  }

  std::vector<int> shape_;
  std::vector<S> data_;
  std::vector<S> grad_;
};

using Tensor = TensorT<float>;

// Deterministic RNG wrapper. Sub-streams are derived with fork() so module
// initialization order cannot perturb unrelated draws.
class Rng {
public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(gen_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  // Normal draw rejected outside two standard deviations (ViT init style).
  double trunc_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (std::abs(v) <= 2.0 * stddev) return v;
    }
  }

  Rng fork(uint64_t label) {
    uint64_t s = mix(gen_(), label);
    return Rng(s);
  }

  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  template <typename S>
  void fill_trunc_normal(TensorT<S>& t, double stddev) {
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(trunc_normal(stddev));
  }

  template <typename S>
  void fill_uniform(TensorT<S>& t, double lo, double hi) {
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
  }

  template <typename S>
  void fill_normal(TensorT<S>& t, double mean, double stddev) {
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal(mean, stddev));
  }

private:
  std::mt19937_64 gen_;
};

}  // namespace psvit

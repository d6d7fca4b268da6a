#include <doctest.h>

#include "psvit/transformer.hpp"

using namespace psvit;
using T = TensorT<double>;

namespace {

T rand_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  T t = T::zeros(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

T run_attention(const T& q, const T& k, const T& v) {
  TapeT<double> tape;
  int out = attention(tape, tape.input(q), tape.input(k), tape.input(v));
  return tape.val(out);
}

EncoderLayerParamsT<double> make_encoder(int c, int m, uint64_t seed) {
  Rng rng(seed);
  return EncoderLayerParamsT<double>::init(c, m, 0.0, rng);
}

std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> perm(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  for (int i = n; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<size_t>(rng.uniform_int(0, i - 1))]);
  return perm;
}

T permute_cols(const T& x, const std::vector<int>& perm) {
  T y = T::zeros(x.shape());
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < x.cols(); ++c) y.at(r, c) = x.at(r, perm[static_cast<size_t>(c)]);
  return y;
}

}  // namespace

TEST_CASE("attention basics") {
  Rng rng(2);
  SUBCASE("single-key sequence returns V") {
    T q = rand_tensor(rng, {4, 1}), k = rand_tensor(rng, {4, 1}), v = rand_tensor(rng, {4, 1});
    T out = run_attention(q, k, v);
    for (size_t i = 0; i < v.size(); ++i) CHECK(out[i] == doctest::Approx(v[i]).epsilon(1e-12));
  }
  SUBCASE("all-zero keys give uniform attention") {
    T q = rand_tensor(rng, {4, 5});
    T k = T::zeros({4, 5});
    T v = rand_tensor(rng, {4, 5});
    T out = run_attention(q, k, v);
    for (int d = 0; d < 4; ++d) {
      double mean = 0;
      for (int l = 0; l < 5; ++l) mean += v.at(d, l);
      mean /= 5;
      for (int l = 0; l < 5; ++l) CHECK(out.at(d, l) == doctest::Approx(mean).epsilon(1e-9));
    }
  }
  SUBCASE("joint key/value column permutation leaves outputs unchanged") {
    for (int trial = 0; trial < 5; ++trial) {
      T q = rand_tensor(rng, {4, 5}), k = rand_tensor(rng, {4, 5}), v = rand_tensor(rng, {4, 5});
      auto perm = random_permutation(5, rng);
      T base = run_attention(q, k, v);
      T permuted = run_attention(q, permute_cols(k, perm), permute_cols(v, perm));
      for (size_t i = 0; i < base.size(); ++i) CHECK(base[i] == doctest::Approx(permuted[i]).epsilon(1e-9));
    }
  }
  SUBCASE("attention weight rows sum to one") {
    for (int trial = 0; trial < 10; ++trial) {
      T q = rand_tensor(rng, {6, 7}), k = rand_tensor(rng, {6, 7});
      T w = attention_weights(q, k);
      for (int r = 0; r < w.rows(); ++r) {
        double sum = 0;
        for (int c = 0; c < w.cols(); ++c) sum += w.at(r, c);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("mha degenerate cases") {
  Rng rng(7);
  SUBCASE("identity projections with one head reduce to plain attention") {
    AttentionParamsT<double> p;
    p.heads = 1;
    auto eye = std::make_shared<T>(T::zeros({6, 6}));
    for (int i = 0; i < 6; ++i) eye->at(i, i) = 1.0;
    p.wq = p.wk = p.wv = p.wo = eye;
    T z = rand_tensor(rng, {6, 4});
    TapeT<double> tape;
    int out = mha(tape, tape.input(z), p);
    T direct = run_attention(z, z, z);
    for (size_t i = 0; i < direct.size(); ++i)
      CHECK(tape.val(out)[i] == doctest::Approx(direct[i]).epsilon(1e-9));
  }
  SUBCASE("zero output projection ignores the input") {
    Rng r2(8);
    auto p = AttentionParamsT<double>::init(8, 2, r2);
    for (auto& v : p.wo->buffer()) v = 0.0;
    T z = rand_tensor(rng, {8, 5});
    TapeT<double> tape;
    int out = mha(tape, tape.input(z), p);
    for (size_t i = 0; i < tape.val(out).size(); ++i) CHECK(tape.val(out)[i] == 0.0);
  }
  CHECK_THROWS_AS(AttentionParamsT<double>::init(7, 2, rng), std::invalid_argument);
}

TEST_CASE("encoder layer") {
  Rng rng(9);
  SUBCASE("zeroed branches make the layer an exact identity") {
    auto p = make_encoder(8, 2, 3);
    for (auto& v : p.attn.wo->buffer()) v = 0.0;
    for (auto& v : p.ffn_w2->buffer()) v = 0.0;
    T x = rand_tensor(rng, {8, 6}, 0.05, 1.0);
    TapeT<double> tape;
    int out = encoder_layer(tape, tape.input(x), p, false, nullptr);
    for (size_t i = 0; i < x.size(); ++i) CHECK(tape.val(out)[i] == x[i]);
  }
  SUBCASE("output shape matches input shape") {
    auto p = make_encoder(12, 3, 4);
    for (int len : {1, 5, 9}) {
      T x = rand_tensor(rng, {12, len});
      TapeT<double> tape;
      int out = encoder_layer(tape, tape.input(x), p, false, nullptr);
      CHECK(tape.val(out).rows() == 12);
      CHECK(tape.val(out).cols() == len);
    }
  }
  SUBCASE("column permutation equivariance") {
    auto p = make_encoder(8, 2, 5);
    for (int trial = 0; trial < 5; ++trial) {
      T x = rand_tensor(rng, {8, 7});
      auto perm = random_permutation(7, rng);
      TapeT<double> t1, t2;
      int o1 = encoder_layer(t1, t1.input(x), p, false, nullptr);
      int o2 = encoder_layer(t2, t2.input(permute_cols(x, perm)), p, false, nullptr);
      T expect = permute_cols(t1.val(o1), perm);
      for (size_t i = 0; i < expect.size(); ++i)
        CHECK(t2.val(o2)[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    }
  }
  SUBCASE("dropout is reproducible under a fixed seed and disabled at eval") {
    Rng re(11);
    auto p = EncoderLayerParamsT<double>::init(8, 2, 0.3, re);
    T x = rand_tensor(rng, {8, 6});
    auto run = [&](bool train, uint64_t seed) {
      Rng dr(seed);
      TapeT<double> tape;
      int out = encoder_layer(tape, tape.input(x), p, train, &dr);
      return tape.val(out);
    };
    T a = run(true, 5), b = run(true, 5), c = run(true, 6);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    double diff = 0;
    for (size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - c[i]);
    CHECK(diff > 0.0);
    T e1 = run(false, 5), e2 = run(false, 99);
    for (size_t i = 0; i < e1.size(); ++i) CHECK(e1[i] == e2[i]);
  }
}

TEST_CASE("vision transformer module") {
  Rng rng(13);
  auto cls = std::make_shared<T>(rand_tensor(rng, {6, 1}));

  SUBCASE("empty stack returns the raw concatenation") {
    T tokens = rand_tensor(rng, {6, 4});
    TapeT<double> tape;
    int out = vtm(tape, tape.input(tokens), cls, {}, false, nullptr);
    CHECK(tape.val(out).cols() == 5);
    for (int r = 0; r < 6; ++r) {
      CHECK(tape.val(out).at(r, 0) == (*cls)[static_cast<size_t>(r)]);
      for (int c = 0; c < 4; ++c) CHECK(tape.val(out).at(r, c + 1) == tokens.at(r, c));
    }
  }
  SUBCASE("class token column stays at position 0 through the stack") {
    std::vector<EncoderLayerParamsT<double>> layers;
    layers.push_back(make_encoder(6, 2, 21));
    layers.push_back(make_encoder(6, 2, 22));
    // zero both residual branches of every layer so values pass through
    for (auto& l : layers) {
      for (auto& v : l.attn.wo->buffer()) v = 0.0;
      for (auto& v : l.ffn_w2->buffer()) v = 0.0;
    }
    T tokens = rand_tensor(rng, {6, 4});
    TapeT<double> tape;
    int out = vtm(tape, tape.input(tokens), cls, layers, false, nullptr);
    CHECK(tape.val(out).cols() == 5);
    for (int r = 0; r < 6; ++r) CHECK(tape.val(out).at(r, 0) == (*cls)[static_cast<size_t>(r)]);
  }
  SUBCASE("output always has n^2 + 1 columns") {
    std::vector<EncoderLayerParamsT<double>> layers;
    layers.push_back(make_encoder(6, 3, 23));
    for (int len : {1, 4, 9, 16}) {
      T tokens = rand_tensor(rng, {6, len});
      TapeT<double> tape;
      int out = vtm(tape, tape.input(tokens), cls, layers, false, nullptr);
      CHECK(tape.val(out).cols() == len + 1);
    }
  }
}

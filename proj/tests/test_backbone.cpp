#include <doctest.h>

#include "psvit/backbone.hpp"

using namespace psvit;
using T = TensorT<double>;

namespace {

T rand_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  T t = T::zeros(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

}  // namespace

TEST_CASE("conv2d basics") {
  Rng rng(3);
  SUBCASE("1x1 identity kernel preserves the input") {
    T x = rand_tensor(rng, {2, 4, 4});
    T w = T::zeros({2, 2, 1, 1});
    w[0] = 1.0;  // out0 <- in0
    w[3] = 1.0;  // out1 <- in1
    T y = conv2d(x, w, 1, 0);
    for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("zero weights give zero output") {
    T x = rand_tensor(rng, {3, 5, 5});
    T w = T::zeros({4, 3, 3, 3});
    T y = conv2d(x, w, 1, 1);
    for (size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
  }
  SUBCASE("output spatial arithmetic") {
    T x = T::zeros({1, 11, 11});
    T w = T::zeros({1, 1, 3, 3});
    CHECK(conv2d(x, w, 2, 1).dim(1) == 6);
    CHECK(conv2d(x, w, 1, 0).dim(1) == 9);
    T w7 = T::zeros({1, 1, 7, 7});
    T x224 = T::zeros({1, 224, 224});
    CHECK(conv2d(x224, w7, 2, 3).dim(1) == 112);
  }
  CHECK_THROWS_AS(conv2d(T::zeros({2, 4, 4}), T::zeros({3, 1, 1, 1}), 1, 0),
                  std::invalid_argument);
}

TEST_CASE("residual block") {
  Rng rng(5);
  SUBCASE("zeroed convolutions with identity shortcut act as ReLU") {
    Rng rb(6);
    auto block = BottleneckParamsT<double>::init(6, 3, 6, false, rb);
    REQUIRE_FALSE(block.shortcut.has_value());
    for (auto& v : block.reduce.weight->buffer()) v = 0.0;
    for (auto& v : block.spatial.weight->buffer()) v = 0.0;
    for (auto& v : block.expand.weight->buffer()) v = 0.0;
    T x = rand_tensor(rng, {6, 4, 4});
    TapeT<double> tape;
    auto ys = residual_block(tape, {tape.input(x)}, block, false);
    const auto& y = tape.val(ys[0]);
    for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == std::max(0.0, x[i]));
  }
  SUBCASE("spatial dims are preserved") {
    Rng rb(7);
    auto block = BottleneckParamsT<double>::init(4, 4, 8, false, rb);
    REQUIRE(block.shortcut.has_value());
    T x = rand_tensor(rng, {4, 5, 7});
    TapeT<double> tape;
    auto ys = residual_block(tape, {tape.input(x)}, block, false);
    CHECK(tape.val(ys[0]).dim(0) == 8);
    CHECK(tape.val(ys[0]).dim(1) == 5);
    CHECK(tape.val(ys[0]).dim(2) == 7);
  }
}

TEST_CASE("extract_features spatial contract") {
  SUBCASE("stride is exactly 4") {
    Rng rng(8);
    // reduced widths projected to C=192: stride arithmetic is width-independent
    auto bb = BackboneParamsT<double>::init(BackboneConfig::toy(), 192, rng);
    TapeT<double> tape;
    T img = rand_tensor(rng, {3, 224, 224});
    auto f = extract_features(tape, {tape.input(img)}, bb, false);
    CHECK(tape.val(f[0]).dim(0) == 192);
    CHECK(tape.val(f[0]).dim(1) == 56);
    CHECK(tape.val(f[0]).dim(2) == 56);
  }
  SUBCASE("32x32 toy input maps to 8x8") {
    Rng rng(9);
    auto bb = BackboneParamsT<double>::init(BackboneConfig::toy(), 16, rng);
    TapeT<double> tape;
    T img = rand_tensor(rng, {3, 32, 32});
    auto f = extract_features(tape, {tape.input(img)}, bb, false);
    CHECK(tape.val(f[0]).dim(0) == 16);
    CHECK(tape.val(f[0]).dim(1) == 8);
    CHECK(tape.val(f[0]).dim(2) == 8);
  }
  SUBCASE("indivisible input size is rejected") {
    Rng rng(10);
    auto bb = BackboneParamsT<double>::init(BackboneConfig::toy(), 16, rng);
    TapeT<double> tape;
    T img = T::zeros({3, 30, 30});
    CHECK_THROWS_AS(extract_features(tape, {tape.input(img)}, bb, false), std::invalid_argument);
  }
}

TEST_CASE("translation covariance at stride granularity") {
  Rng rng(11);
  auto bb = BackboneParamsT<double>::init(BackboneConfig::toy(), 12, rng);
  T base = rand_tensor(rng, {3, 64, 64});
  // shifted copy: moved 4 pixels down and right
  T shifted = T::zeros({3, 64, 64});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 60; ++y)
      for (int x = 0; x < 60; ++x) shifted.at3(c, y + 4, x + 4) = base.at3(c, y, x);

  TapeT<double> tape;
  auto f1 = extract_features(tape, {tape.input(base)}, bb, false);
  auto f2 = extract_features(tape, {tape.input(shifted)}, bb, false);
  const auto& a = tape.val(f1[0]);
  const auto& b = tape.val(f2[0]);
  // compare interior: F_shifted[y+1, x+1] == F_base[y, x]. The stack's
  // receptive field is 13 input pixels, so 3 feature pixels of margin keep
  // every compared field inside the region both images share.
  for (int c = 0; c < 12; ++c)
    for (int y = 3; y < 12; ++y)
      for (int x = 3; x < 12; ++x) {
        CHECK(std::abs(b.at3(c, y + 1, x + 1) - a.at3(c, y, x)) < 1e-5);
      }
}

TEST_CASE("batch normalization semantics") {
  Rng rng(13);
  auto norm = NormSiteT<double>::init(3, true);
  std::vector<T> batch;
  for (int j = 0; j < 4; ++j) batch.push_back(rand_tensor(rng, {3, 4, 4}, -2.0, 3.0));

  SUBCASE("training normalizes the batch per channel") {
    TapeT<double> tape;
    std::vector<int> xs;
    for (const auto& x : batch) xs.push_back(tape.input(x));
    auto ys = detail::batchnorm(tape, xs, norm, true);
    for (int c = 0; c < 3; ++c) {
      double mean = 0, var = 0;
      for (int j = 0; j < 4; ++j)
        for (int i = 0; i < 16; ++i) mean += tape.val(ys[static_cast<size_t>(j)])[static_cast<size_t>(c) * 16 + i];
      mean /= 64;
      for (int j = 0; j < 4; ++j)
        for (int i = 0; i < 16; ++i) {
          double d = tape.val(ys[static_cast<size_t>(j)])[static_cast<size_t>(c) * 16 + i] - mean;
          var += d * d;
        }
      var /= 64;
      CHECK(std::abs(mean) < 1e-9);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
    // running statistics moved toward the batch statistics
    CHECK((*norm.running_mean)[0] != 0.0);
    CHECK((*norm.running_var)[0] != 1.0);
  }

  SUBCASE("eval uses the running statistics, image by image") {
    (*norm.running_mean)[0] = 0.5;
    (*norm.running_var)[0] = 4.0;
    TapeT<double> tape;
    int x = tape.input(batch[0]);
    auto ys = detail::batchnorm(tape, {x}, norm, false);
    const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
    CHECK(tape.val(ys[0])[0] == doctest::Approx((batch[0][0] - 0.5) * inv).epsilon(1e-9));
  }
}

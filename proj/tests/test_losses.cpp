#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "sscaps/losses.hpp"

using namespace sscaps;
using sscaps::test::random_tensor;

namespace {

double margin_one(double y, double target) {
  return margin_loss(TensorD({1}, y), TensorD({1}, target));
}

}  // namespace

TEST_CASE("margin loss: hand values") {
  CHECK(margin_one(0.9, 1.0) == 0.0);
  CHECK(margin_one(0.1, 0.0) == 0.0);
  CHECK(margin_one(0.0, 1.0) == doctest::Approx(0.81).epsilon(1e-12));
  CHECK(margin_one(0.6, 0.0) == doctest::Approx(0.125).epsilon(1e-12));
}

TEST_CASE("margin loss: mean over entries, gradient matches differences") {
  const Tensor y({4}, std::vector<float>{0.0f, 0.6f, 0.95f, 0.05f});
  const Tensor t({4}, std::vector<float>{1.0f, 0.0f, 1.0f, 0.0f});
  CHECK(margin_loss(y, t) == doctest::Approx((0.81 + 0.125) / 4).epsilon(1e-6));
  CHECK_THROWS_AS(margin_loss(y, Tensor({3})), ShapeError);

  TensorD yd = random_tensor<double>({6}, 1, 0.0, 1.0);
  const TensorD td({6}, std::vector<double>{1, 0, 1, 0, 0, 1});
  const TensorD g = margin_loss_backward(yd, td);
  for (std::size_t i = 0; i < 6; ++i) {
    const double keep = yd[i];
    yd[i] = keep + 1e-6;
    const double up = margin_loss(yd, td);
    yd[i] = keep - 1e-6;
    const double down = margin_loss(yd, td);
    yd[i] = keep;
    CHECK(g[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-5));
  }
}

TEST_CASE("weighted cross-entropy: confident, uniform and reweighted cases") {
  const std::vector<double> unit{1.0, 1.0};
  const LabelTensor lab({1, 2}, std::vector<std::uint8_t>{0, 1});

  const Tensor sure({1, 2, 2}, std::vector<float>{60.f, -60.f, -60.f, 60.f});
  CHECK(weighted_cross_entropy(sure, lab, unit) == doctest::Approx(0.0).epsilon(1e-12));

  const Tensor flat({1, 2, 2}, 0.3f);
  CHECK(std::abs(weighted_cross_entropy(flat, lab, unit) - std::log(2.0)) < 1e-6);

  const TensorD logits({1, 2, 2}, std::vector<double>{0.2, -0.7, 1.1, 0.4});
  // Per-voxel -log p of the true class, by hand.
  const double l0 = -std::log(std::exp(0.2) / (std::exp(0.2) + std::exp(1.1)));
  const double l1 = -std::log(std::exp(0.4) / (std::exp(-0.7) + std::exp(0.4)));
  const double base = weighted_cross_entropy(logits, lab, unit);
  CHECK(base == doctest::Approx((l0 + l1) / 2).epsilon(1e-12));
  const std::vector<double> heavy{1.0, 2.0};
  CHECK(weighted_cross_entropy(logits, lab, heavy) == doctest::Approx((l0 + 2 * l1) / 2).epsilon(1e-12));

  const LabelTensor bad({1, 2}, std::vector<std::uint8_t>{0, 2});
  CHECK_THROWS(weighted_cross_entropy(flat, bad, unit));
}

TEST_CASE("masked reconstruction loss") {
  const Tensor x = random_tensor({2, 3, 4}, 2);
  Tensor plus = x;
  for (auto& v : plus.storage()) v += 1.0f;
  CHECK(masked_reconstruction_loss(x, x, Tensor(x.shape(), 1.0f)) == 0.0f);
  CHECK(masked_reconstruction_loss(plus, x, Tensor(x.shape(), 0.0f)) == 0.0f);
  CHECK(masked_reconstruction_loss(plus, x, Tensor(x.shape(), 1.0f)) == doctest::Approx(1.0f).epsilon(1e-6));

  Tensor half(x.shape());
  for (std::size_t i = 0; i < half.size(); i += 2) half[i] = 1.0f;
  Tensor noisy = x;
  for (std::size_t i = 1; i < noisy.size(); i += 2) noisy[i] += 5.0f;
  CHECK(masked_reconstruction_loss(noisy, x, half) == 0.0f);
}

TEST_CASE("pretext loss: identity, hand value, symmetry, triangle inequality") {
  const Tensor a = random_tensor({3, 4}, 3);
  const Tensor b = random_tensor({3, 4}, 4);
  const Tensor c = random_tensor({3, 4}, 5);
  CHECK(pretext_loss(a, a) == 0.0f);

  const Tensor z({4}, 0.0f), h({4}, 0.5f);
  CHECK(pretext_loss(h, z) == doctest::Approx(1.0f).epsilon(1e-7));

  CHECK(pretext_loss(a, b) == pretext_loss(b, a));
  CHECK(pretext_loss(a, c) <= pretext_loss(a, b) + pretext_loss(b, c) + 1e-6f);
  CHECK_THROWS_AS(pretext_loss(a, Tensor({4, 3})), ShapeError);

  const Tensor g = pretext_loss_backward(a, a);
  for (float v : g.data()) CHECK(v == 0.0f);
}

TEST_CASE("pretext loss batch: mean of per-sample norms") {
  const Tensor a({2, 4}, std::vector<float>{0.5f, 0.5f, 0.5f, 0.5f, 3.0f, 0.0f, 0.0f, 0.0f});
  const Tensor z({2, 4}, 0.0f);
  CHECK(pretext_loss_batch(a, z) == doctest::Approx((1.0f + 3.0f) / 2));
}

TEST_CASE("total downstream loss") {
  const LossBreakdown zero = total_downstream_loss(0, 0, 0);
  CHECK(zero.total == 0.0);
  const LossBreakdown lb = total_downstream_loss(0.81, 0.6931, 1.0);
  CHECK(std::abs(lb.total - 2.5031) < 1e-6);
  CHECK(lb.margin == 0.81);
  CHECK(lb.cross_entropy == 0.6931);
  CHECK(lb.reconstruction == 1.0);

  try {
    total_downstream_loss(0.1, std::nan(""), 0.2);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("cross") != std::string::npos);
  }
  CHECK_THROWS_AS(total_downstream_loss(0.1, 0.2, INFINITY), NumericError);
}

TEST_CASE("one_hot_last") {
  const LabelTensor lab({3}, std::vector<std::uint8_t>{2, 0, 1});
  const Tensor oh = one_hot_last<float>(lab, 3);
  CHECK(oh.shape() == Shape{3, 3});
  CHECK(oh.storage() == std::vector<float>{0, 0, 1, 1, 0, 0, 0, 1, 0});
}

#include <doctest.h>

#include <cmath>
#include <string>

#include "helpers.hpp"
#include "sscaps/network.hpp"

using namespace sscaps;
using sscaps::test::max_abs_diff;
using sscaps::test::random_tensor;

namespace {

// ArchSpec::standard(1, 4), counted once from init_params.
constexpr std::size_t kStandardParamCount = 6'613'125;

double abs_sum(const Tensor& t) {
  double s = 0;
  for (float v : t.data()) s += std::abs(v);
  return s;
}

}  // namespace

TEST_CASE("arch: full-size shapes on a 64^3 patch") {
  const ArchSpec a = ArchSpec::standard(1, 4);
  CHECK(a.stem_channels == std::vector<std::size_t>{16, 32, 64});
  CHECK(a.stem_kernel == 5);
  CHECK(a.caps_types.back() == 4);
  const ShapePlan p = Network<float>(a).plan(1, {64, 64, 64});
  CHECK(p.features == Shape{1, 64, 64, 64, 64});
  CHECK(p.caps_grids.back() == Shape{1, 8, 8, 8, 4, 16});
  CHECK(p.lengths == Shape{1, 8, 8, 8, 4});
  CHECK(p.logits == Shape{1, 4, 64, 64, 64});
  CHECK(p.reconstruction == Shape{1, 1, 64, 64, 64});
  CHECK(p.skips.size() == 3);
}

TEST_CASE("arch: invalid configurations are rejected") {
  ArchSpec a = ArchSpec::micro(1, 3);
  a.caps_types.back() = 2;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  CHECK_THROWS_AS(ArchSpec::micro(1, 1).validate(), ConfigError);
  CHECK_THROWS_AS(Network<float>(ArchSpec::micro(1, 2)).plan(1, {20, 16, 16}), ShapeError);
}

TEST_CASE("arch: parameter count of the full-size network is frozen") {
  const Network<float> net(ArchSpec::standard(1, 4));
  CHECK(net.init_params(0).count() == kStandardParamCount);
}

TEST_CASE("stem: channel sequence 16, 32, 64 with extents preserved") {
  const Network<float> net(ArchSpec::standard(1, 2));
  const auto p = net.init_params(1);
  StemCache<float> cache;
  const Tensor f = net.stem_forward(random_tensor({1, 1, 16, 16, 16}, 2), p, &cache);
  CHECK(f.shape() == Shape{1, 64, 16, 16, 16});
  REQUIRE(cache.pre.size() == 3);
  CHECK(cache.pre[0].dim(1) == 16);
  CHECK(cache.pre[1].dim(1) == 32);
  CHECK(cache.pre[2].dim(1) == 64);
}

TEST_CASE("stem: zero input with zero biases gives zero features") {
  const Network<float> net(ArchSpec::micro(2, 2));
  const auto p = net.init_params(3);
  const Tensor f = net.stem_forward(Tensor({1, 2, 16, 16, 16}), p, nullptr);
  CHECK(abs_sum(f) == 0.0);
}

TEST_CASE("stem: undersized input names the minimum") {
  const ArchSpec a = ArchSpec::micro(1, 2);
  CHECK(a.min_extent() == 13);
  const Network<float> net(a);
  const auto p = net.init_params(0);
  try {
    net.stem_forward(Tensor({1, 1, 12, 16, 16}), p, nullptr);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("minimum of 13") != std::string::npos);
  }
}

TEST_CASE("encoder: final grid at 1/8 resolution with one capsule type per class") {
  const Network<float> net(ArchSpec::micro(1, 3));
  const auto p = net.init_params(4);
  const Tensor f = net.stem_forward(random_tensor({1, 1, 32, 32, 32}, 5), p, nullptr);
  const auto enc = net.encoder_forward(f, p, nullptr);
  CHECK(enc.final_grid.spatial() == Extent3{4, 4, 4});
  CHECK(enc.final_grid.caps_types() == 3);
  const Tensor lengths = capsule_lengths(enc.final_grid);
  for (float v : lengths.data()) CHECK(v < 1.0f);
  CHECK_THROWS_AS(net.encoder_forward(Tensor({1, f.dim(1), 20, 16, 16}), p, nullptr), ShapeError);
}

TEST_CASE("forward: shapes match the plan; deterministic") {
  const Network<float> net(ArchSpec::micro(2, 3));
  const auto p = net.init_params(6);
  const Tensor v = random_tensor({2, 2, 32, 32, 32}, 7);
  const auto a = net.forward(v, p, Mode::Train, nullptr);
  const auto b = net.forward(v, p, Mode::Train, nullptr);
  const ShapePlan plan = net.plan(2, {32, 32, 32});
  CHECK(a.logits.shape() == plan.logits);
  CHECK(a.logits.dim(1) == 3);
  CHECK(a.encoder_lengths.shape() == plan.lengths);
  CHECK(a.reconstruction.shape() == v.shape());
  CHECK(a.logits == b.logits);
  CHECK(a.encoder_lengths == b.encoder_lengths);
  CHECK(a.reconstruction == b.reconstruction);
}

TEST_CASE("forward: eval mode output does not depend on batch companions") {
  const Network<float> net(ArchSpec::micro(1, 2));
  auto p = net.init_params(8);
  // Move the running statistics away from their initial values first.
  const Tensor warm = random_tensor({2, 1, 16, 16, 16}, 9);
  ForwardCache<float> cache;
  net.forward(warm, p, Mode::Train, &cache);
  net.commit_batchnorm_stats(cache, p);

  const Tensor x = random_tensor({1, 1, 16, 16, 16}, 10);
  const Tensor other = random_tensor({1, 1, 16, 16, 16}, 11, -3, 3);
  Tensor pair({2, 1, 16, 16, 16});
  std::copy(x.data().begin(), x.data().end(), pair.raw());
  std::copy(other.data().begin(), other.data().end(), pair.raw() + x.size());
  const Tensor alone = net.forward(x, p, Mode::Eval, nullptr).logits;
  const Tensor both = net.forward(pair, p, Mode::Eval, nullptr).logits;
  const Tensor first = split<float>(both, 0, std::vector<std::size_t>{1, 1})[0];
  CHECK(max_abs_diff(alone, first) < 1e-5);

  const Tensor train_both = net.forward(pair, p, Mode::Train, nullptr).logits;
  const Tensor train_first = split<float>(train_both, 0, std::vector<std::size_t>{1, 1})[0];
  CHECK(max_abs_diff(alone, train_first) > 1e-4);
}

TEST_CASE("reconstruction: zero branch weights give a zero reconstruction") {
  const Network<float> net(ArchSpec::micro(1, 2));
  auto p = net.init_params(12);
  for (std::size_t i = 0; i < p.params().size(); ++i) {
    if (p.param_names()[i].rfind("recon.", 0) == 0) p.params()[i].value.fill(0.0f);
  }
  const auto out = net.forward(random_tensor({1, 1, 16, 16, 16}, 13), p, Mode::Train, nullptr);
  CHECK(abs_sum(out.reconstruction) == 0.0);
}

TEST_CASE("reconstruction: its gradient alone reaches every encoder layer") {
  const Network<float> net(ArchSpec::micro(1, 2));
  auto p = net.init_params(14);
  const Tensor v = random_tensor({1, 1, 16, 16, 16}, 15);
  ForwardCache<float> cache;
  const auto out = net.forward(v, p, Mode::Train, &cache);
  OutputGrads<float> g;
  g.reconstruction = random_tensor(out.reconstruction.shape(), 16);
  p.zero_grad();
  net.backward(cache, g, p);
  std::size_t encoder_layers = 0;
  for (std::size_t i = 0; i < p.params().size(); ++i) {
    const std::string& n = p.param_names()[i];
    if (n.rfind("encoder.", 0) == 0 || n.rfind("stem.", 0) == 0) {
      CHECK_MESSAGE(abs_sum(p.params()[i].grad) > 0.0, n);
      encoder_layers += n.rfind("encoder.", 0) == 0;
    }
    if (n.rfind("head.", 0) == 0) CHECK(abs_sum(p.params()[i].grad) == 0.0);
  }
  CHECK(encoder_layers == 6);
}

TEST_CASE("transplant_stem copies only stem parameters") {
  const Network<float> net(ArchSpec::micro(1, 2));
  const auto src = net.init_params(20);
  auto dst = net.init_params(21);
  const Tensor head_before = dst.param("head.weight").value;
  CHECK(transplant_stem(src, dst) == 6);
  CHECK(dst.param("stem.0.weight").value == src.param("stem.0.weight").value);
  CHECK(dst.param("head.weight").value == head_before);

  auto other = Network<float>(ArchSpec::micro(2, 2)).init_params(0);
  CHECK_THROWS_AS(transplant_stem(src, other), ShapeError);
}

TEST_CASE("variants: no stem and reduced first capsule layer") {
  const ArchSpec a = ArchSpec::micro(2, 2);
  const ArchSpec ns = a.without_stem();
  CHECK_FALSE(ns.use_stem);
  CHECK(ns.entry_dim() == 2);
  const auto p = Network<float>(ns).init_params(0);
  CHECK_FALSE(p.has_param("stem.0.weight"));
  CHECK(Network<float>(ns).forward(random_tensor({1, 2, 16, 16, 16}, 1), p, Mode::Eval, nullptr)
            .logits.shape() == Shape{1, 2, 16, 16, 16});
  CHECK(ArchSpec::standard(1, 4).with_reduced_first_caps().caps_types[0] == 4);
  CHECK(a.with_reduced_first_caps().caps_types[0] == 1);
}

#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "sscaps/data.hpp"
#include "sscaps/losses.hpp"
#include "sscaps/ssl.hpp"
#include "sscaps/training.hpp"

using namespace sscaps;
using sscaps::test::random_tensor;

namespace {

std::vector<Tensor> phantom_images(std::size_t count, std::size_t channels) {
  const auto vols = generate_phantoms(PhantomSpec::easy({16, 16, 16}, 2, channels, 3), count);
  std::vector<Tensor> out;
  for (const auto& v : vols) out.push_back(v.image);
  return out;
}

PretrainConfig small_config() {
  PretrainConfig c;
  c.steps = 5;
  c.batch_size = 2;
  c.patch = {16, 16, 16};
  c.learning_rate = 1e-3;
  return c;
}

}  // namespace

TEST_CASE("transforms: identity is bit-exact, zero_channel clears one channel") {
  const Tensor v = random_tensor({3, 8, 8, 8}, 1);
  CHECK(apply_transform(v, TransformSpec{}) == v);

  TransformSpec z;
  z.kind = TransformKind::ZeroChannel;
  z.channel = 1;
  const Tensor out = apply_transform(v, z);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i / 512 == 1) {
      CHECK(out[i] == 0.0f);
    } else {
      CHECK(out[i] == v[i]);
    }
  }
  z.channel = 3;
  CHECK_THROWS(apply_transform(v, z));
}

TEST_CASE("transforms: swap_patches twice restores the volume, oversize patches are rejected") {
  const Tensor v = random_tensor({2, 16, 16, 16}, 2);
  TransformSpec s;
  s.kind = TransformKind::SwapPatches;
  s.count = kSwapPatchPairs;
  s.size = 4;
  s.seed = 99;
  const Tensor once = apply_transform(v, s);
  CHECK_FALSE(once == v);
  CHECK(apply_transform(once, s) == v);
  s.size = 17;
  CHECK_THROWS(apply_transform(v, s));
}

TEST_CASE("transforms: every kind is deterministic given its spec") {
  const Tensor v = random_tensor({2, 16, 16, 16}, 3);
  const TransformContext ctx{2, {16, 16, 16}, 1.0};
  for (std::size_t i = 0; i < kNumTransforms; ++i) {
    const TransformSpec t = transform_for_index(i, ctx, 1234);
    CHECK(apply_transform(v, t) == apply_transform(v, t));
    CHECK(TransformSpec::from_json(t.to_json()) == t);
    CHECK(apply_transform(v, t).shape() == v.shape());
  }
  CHECK(transform_for_index(0, ctx, 1).kind == TransformKind::Identity);
  CHECK(transform_for_index(4, ctx, 1).kind == TransformKind::SwapPatches);
  CHECK(transform_for_index(5, ctx, 1).kind == TransformKind::Blur);
  CHECK(transform_for_index(5, ctx, 1).sigma == kBlurSigma);
  CHECK(transform_for_index(6, ctx, 1).kind == TransformKind::Noise);
}

TEST_CASE("sample_transform_pair: uniform frequencies and reproducible sequences") {
  const TransformContext ctx{1, {16, 16, 16}, 1.0};
  Rng rng(7);
  const std::size_t n = 10'000;
  std::array<std::size_t, kNumTransforms> ci{}, cj{};
  bool saw_equal = false;
  for (std::size_t k = 0; k < n; ++k) {
    const auto p = sample_transform_pair(rng, ctx);
    REQUIRE(p.i < kNumTransforms);
    REQUIRE(p.j < kNumTransforms);
    ++ci[p.i];
    ++cj[p.j];
    saw_equal |= p.i == p.j;
  }
  const double mean = n / 7.0;
  const double sigma = std::sqrt(n * (1.0 / 7) * (6.0 / 7));
  for (std::size_t t = 0; t < kNumTransforms; ++t) {
    CHECK(std::abs(ci[t] - mean) <= 3 * sigma);
    CHECK(std::abs(cj[t] - mean) <= 3 * sigma);
  }
  CHECK(saw_equal);

  Rng a(11), b(11);
  for (int k = 0; k < 50; ++k) {
    const auto pa = sample_transform_pair(a, ctx);
    const auto pb = sample_transform_pair(b, ctx);
    CHECK(pa.i == pb.i);
    CHECK(pa.j == pb.j);
    CHECK(pa.ti == pb.ti);
    CHECK(pa.tj == pb.tj);
  }
}

TEST_CASE("collapse monitor: constant features flag, varied features do not") {
  const auto constant = collapse_monitor(Tensor({2, 4, 4, 4, 4}, 0.7f));
  CHECK(constant.collapsed);
  CHECK(constant.variance == 0.0);

  const auto varied = collapse_monitor(random_tensor({2, 4, 4, 4, 4}, 4));
  CHECK_FALSE(varied.collapsed);
  CHECK(varied.variance == doctest::Approx(1.0 / 3).epsilon(0.05));

  const Network<float> net(ArchSpec::micro(1, 2));
  const Tensor f = net.stem_forward(random_tensor({2, 1, 16, 16, 16}, 5), net.init_params(5), nullptr);
  CHECK_FALSE(collapse_monitor(f).collapsed);
}

TEST_CASE("pretrain: identity pairs give zero loss throughout") {
  const Network<float> net(ArchSpec::micro(2, 2));
  PretrainConfig c = small_config();
  c.fixed_pairs = {{0, 0}};
  const auto r = pretrain(net, net.init_params(1), phantom_images(2, 2), c);
  REQUIRE(r.history.size() == c.steps);
  for (const auto& rec : r.history) {
    CHECK(rec.loss == 0.0);
    CHECK(rec.i == 0);
    CHECK(rec.j == 0);
  }
}

TEST_CASE("pretrain: only stem parameters move") {
  const Network<float> net(ArchSpec::micro(2, 2));
  const auto init = net.init_params(2);
  PretrainConfig c = small_config();
  c.fixed_pairs = {{0, 5}};
  const auto r = pretrain(net, init, phantom_images(2, 2), c);
  for (std::size_t i = 0; i < init.params().size(); ++i) {
    const std::string& n = init.param_names()[i];
    const bool same = r.params.params()[i].value == init.params()[i].value;
    if (n.rfind("stem.", 0) == 0 && n.find("weight") != std::string::npos) {
      CHECK_MESSAGE(!same, n);
    } else if (n.rfind("stem.", 0) != 0) {
      CHECK_MESSAGE(same, n);
    }
  }
}

TEST_CASE("pretrain: loss trends down on a fixed pair set") {
  const Network<float> net(ArchSpec::micro(2, 2));
  PretrainConfig c = small_config();
  c.steps = 150;
  c.learning_rate = 1e-4;
  c.fixed_pairs = {{0, 5}, {2, 6}};
  const auto r = pretrain(net, net.init_params(3), phantom_images(4, 2), c);
  const auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t k = from; k < from + 50; ++k) s += r.history[k].loss;
    return s / 50;
  };
  CHECK(window(100) < window(0));
}

TEST_CASE("pretrain: a constant stem is flagged on the first batch, a fresh one is not") {
  const Network<float> net(ArchSpec::micro(2, 2));
  auto params = net.init_params(4);
  PretrainConfig c = small_config();
  c.steps = 1;
  const auto fresh = pretrain(net, params, phantom_images(2, 2), c);
  REQUIRE(fresh.history.size() == 1);
  CHECK_FALSE(fresh.history[0].collapsed);
  CHECK(fresh.history[0].variance > 1e-3);

  params.param("stem.2.weight").value.fill(0.0f);
  params.param("stem.2.bias").value.fill(0.25f);
  const auto flat = pretrain(net, params, phantom_images(2, 2), c);
  CHECK(flat.history[0].collapsed);
  CHECK(flat.history[0].variance == 0.0);
  CHECK(flat.history[0].to_json().at("collapsed").get<bool>());
}

TEST_CASE("pretrain: transplanted stem changes the downstream starting loss") {
  const Network<float> net(ArchSpec::micro(2, 2));
  const auto init = net.init_params(5);
  PretrainConfig c = small_config();
  c.steps = 20;
  auto pre = pretrain(net, init, phantom_images(2, 2), c).params;

  auto scratch = init;
  auto transplanted = init;
  transplant_stem(pre, transplanted);

  const auto vol = generate_phantom(PhantomSpec::easy({16, 16, 16}, 2, 2, 8), 0);
  const Tensor images = vol.image.reshaped({1, 2, 16, 16, 16});
  const LabelTensor labels = vol.labels.reshaped({1, 16, 16, 16});
  const std::vector<double> w{1.0, 1.0};
  const double a = downstream_step(net, scratch, images, labels, w, {}).total;
  const double b = downstream_step(net, transplanted, images, labels, w, {}).total;
  CHECK(a != b);
}

TEST_CASE("pretrain config: validation and json round-trip") {
  PretrainConfig c;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PretrainConfig{};
  c.fixed_pairs = {{1, 7}};
  CHECK_THROWS_AS(c.validate(), ConfigError);

  PretrainConfig d;
  d.steps = 42;
  d.learning_rate = 3e-4;
  d.patch = {16, 24, 32};
  d.fixed_pairs = {{1, 2}, {0, 6}};
  const auto e = PretrainConfig::from_json(d.to_json());
  CHECK(e.to_json() == d.to_json());
  CHECK(PretrainConfig::from_json(nlohmann::json::object()).steps == PretrainConfig{}.steps);
}

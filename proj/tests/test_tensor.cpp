#include <doctest.h>

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "helpers.hpp"
#include "sscaps/ops.hpp"

using namespace sscaps;
using sscaps::test::max_abs_diff;
using sscaps::test::random_tensor;

namespace {

// Direct loops, written from the definition and sharing nothing with the
// im2col path.
TensorD naive_conv(const TensorD& in, const TensorD& w, const TensorD& b, const ConvSpec& s) {
  const std::size_t N = in.dim(0);
  const Extent3 ie{in.dim(2), in.dim(3), in.dim(4)};
  const Extent3 oe = s.output_extents(ie);
  TensorD out({N, s.out_channels, oe[0], oe[1], oe[2]});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (std::size_t x = 0; x < oe[0]; ++x)
        for (std::size_t y = 0; y < oe[1]; ++y)
          for (std::size_t z = 0; z < oe[2]; ++z) {
            double acc = b.empty() ? 0.0 : b[co];
            for (std::size_t ci = 0; ci < s.in_channels; ++ci)
              for (std::size_t a = 0; a < s.kernel[0]; ++a)
                for (std::size_t c = 0; c < s.kernel[1]; ++c)
                  for (std::size_t d = 0; d < s.kernel[2]; ++d) {
                    const long ix = long(x * s.stride[0] + a * s.dilation[0]) - long(s.padding[0]);
                    const long iy = long(y * s.stride[1] + c * s.dilation[1]) - long(s.padding[1]);
                    const long iz = long(z * s.stride[2] + d * s.dilation[2]) - long(s.padding[2]);
                    if (ix < 0 || iy < 0 || iz < 0 || ix >= long(ie[0]) || iy >= long(ie[1]) ||
                        iz >= long(ie[2]))
                      continue;
                    acc += w.at({co, ci, a, c, d}) * in.at({n, ci, std::size_t(ix), std::size_t(iy),
                                                            std::size_t(iz)});
                  }
            out.at({n, co, x, y, z}) = acc;
          }
  return out;
}

TensorD naive_deconv(const TensorD& in, const TensorD& w, const ConvSpec& s) {
  const std::size_t N = in.dim(0);
  const Extent3 ie{in.dim(2), in.dim(3), in.dim(4)};
  const Extent3 oe = s.transposed_extents(ie);
  TensorD out({N, s.out_channels, oe[0], oe[1], oe[2]});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ci = 0; ci < s.in_channels; ++ci)
      for (std::size_t co = 0; co < s.out_channels; ++co)
        for (std::size_t x = 0; x < ie[0]; ++x)
          for (std::size_t y = 0; y < ie[1]; ++y)
            for (std::size_t z = 0; z < ie[2]; ++z)
              for (std::size_t a = 0; a < s.kernel[0]; ++a)
                for (std::size_t c = 0; c < s.kernel[1]; ++c)
                  for (std::size_t d = 0; d < s.kernel[2]; ++d) {
                    const long ox = long(x * s.stride[0] + a * s.dilation[0]) - long(s.padding[0]);
                    const long oy = long(y * s.stride[1] + c * s.dilation[1]) - long(s.padding[1]);
                    const long oz = long(z * s.stride[2] + d * s.dilation[2]) - long(s.padding[2]);
                    if (ox < 0 || oy < 0 || oz < 0 || ox >= long(oe[0]) || oy >= long(oe[1]) ||
                        oz >= long(oe[2]))
                      continue;
                    out.at({n, co, std::size_t(ox), std::size_t(oy), std::size_t(oz)}) +=
                        in.at({n, ci, x, y, z}) * w.at({ci, co, a, c, d});
                  }
  return out;
}

// Central differences of f with respect to every entry of x.
std::vector<double> numeric_grad(TensorD& x, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_close(const TensorD& analytic, const std::vector<double>& numeric, double tol) {
  REQUIRE(analytic.size() == numeric.size());
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
    CHECK(std::abs(analytic[i] - numeric[i]) / scale < tol);
  }
}

}  // namespace

TEST_CASE("tensor: shape and data length must agree") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3}, std::vector<float>{0, 1, 2, 3, 4, 5});
  CHECK(t.at({1, 2}) == 5.0f);
  CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
  CHECK_THROWS_AS(t.at({0}), ShapeError);
}

TEST_CASE("tensor: reshape round-trip restores data bit-exactly") {
  const Tensor t = random_tensor({2, 3, 4, 5}, 7);
  const Tensor back = t.reshaped({6, 20}).reshaped({120}).reshaped({2, 3, 4, 5});
  CHECK(back == t);
  CHECK_THROWS_AS(t.reshaped({7, 7}), ShapeError);
}

TEST_CASE("conv3d: all-ones 3^3 input and kernel with pad 1 gives 27 at the center") {
  const Tensor in({1, 1, 3, 3, 3}, 1.0f);
  const Tensor w({1, 1, 3, 3, 3}, 1.0f);
  const Tensor out = conv3d_forward(in, w, Tensor(), ConvSpec::cube(1, 1, 3, 1, 1, 1));
  REQUIRE(out.shape() == Shape{1, 1, 3, 3, 3});
  CHECK(out.at({0, 0, 1, 1, 1}) == 27.0f);
  CHECK(out.at({0, 0, 0, 0, 0}) == 8.0f);
}

TEST_CASE("conv3d: 5^3 kernel at dilation 3 keeps a 64^3 patch at 64^3 with pad 6") {
  const ConvSpec s = ConvSpec::same(1, 1, 5, 3);
  CHECK(s.padding == Extent3{6, 6, 6});
  CHECK(s.output_extents({64, 64, 64}) == Extent3{64, 64, 64});
  const Tensor out = conv3d_forward(random_tensor({1, 1, 64, 64, 64}, 1),
                                    random_tensor({1, 1, 5, 5, 5}, 2), Tensor(), s);
  CHECK(out.shape() == Shape{1, 1, 64, 64, 64});
}

TEST_CASE("conv3d: identity kernel returns the input") {
  const Tensor in = random_tensor({2, 3, 5, 4, 6}, 3);
  Tensor w({3, 3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w.at({c, c, 1, 1, 1}) = 1.0f;
  const Tensor out = conv3d_forward(in, w, Tensor(), ConvSpec::same(3, 3, 3));
  CHECK(out == in);
}

TEST_CASE("conv3d: matches direct loops over strides, dilations and padding") {
  struct Case {
    ConvSpec spec;
    Extent3 in;
  };
  const std::vector<Case> cases{
      {ConvSpec::cube(2, 3, 3, 1, 1, 1), {5, 6, 4}},
      {ConvSpec::cube(3, 2, 3, 2, 1, 1), {7, 8, 6}},
      {ConvSpec::cube(1, 4, 5, 1, 3, 6), {13, 13, 13}},
      {ConvSpec::cube(2, 2, 2, 2, 1, 0), {6, 6, 6}},
      {ConvSpec::cube(2, 3, 1, 1, 1, 0), {3, 4, 5}},
  };
  std::uint64_t seed = 10;
  for (const auto& c : cases) {
    const TensorD in = random_tensor<double>({2, c.spec.in_channels, c.in[0], c.in[1], c.in[2]}, seed++);
    const TensorD w = random_tensor<double>(
        {c.spec.out_channels, c.spec.in_channels, c.spec.kernel[0], c.spec.kernel[1], c.spec.kernel[2]},
        seed++);
    const TensorD b = random_tensor<double>({c.spec.out_channels}, seed++);
    const TensorD got = conv3d_forward(in, w, b, c.spec);
    const TensorD want = naive_conv(in, w, b, c.spec);
    REQUIRE(got.shape() == want.shape());
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("conv3d: shape mismatch names the offending axis") {
  const Tensor in({1, 2, 4, 4, 4});
  const Tensor w({1, 3, 3, 3, 3});
  CHECK_THROWS_AS(conv3d_forward(in, w, Tensor(), ConvSpec::cube(3, 1, 3)), ShapeError);
  try {
    ConvSpec::cube(1, 1, 5).output_extents({3, 8, 8});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("axis H") != std::string::npos);
  }
}

TEST_CASE("conv3d backward: zero grad_out gives zero gradients") {
  const ConvSpec s = ConvSpec::same(2, 3, 3);
  const Tensor in = random_tensor({1, 2, 4, 4, 4}, 4);
  const Tensor w = random_tensor({3, 2, 3, 3, 3}, 5);
  const auto g = conv3d_backward(Tensor({1, 3, 4, 4, 4}), in, w, s);
  for (const Tensor* t : {&g.input, &g.weights, &g.bias}) {
    for (float v : t->data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("conv3d backward: 1-voxel chain rule") {
  const ConvSpec s = ConvSpec::cube(1, 1, 1);
  const TensorD in({1, 1, 1, 1, 1}, 1.7);
  const TensorD w({1, 1, 1, 1, 1}, -0.4);
  const TensorD go({1, 1, 1, 1, 1}, 2.5);
  const auto g = conv3d_backward(go, in, w, s);
  CHECK(g.weights[0] == doctest::Approx(2.5 * 1.7).epsilon(1e-15));
  CHECK(g.input[0] == doctest::Approx(2.5 * -0.4).epsilon(1e-15));
  CHECK(g.bias[0] == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("conv3d backward: random 2^3 instance matches central differences") {
  const ConvSpec s = ConvSpec::cube(2, 2, 3, 1, 1, 1);
  TensorD in = random_tensor<double>({1, 2, 2, 2, 2}, 20);
  TensorD w = random_tensor<double>({2, 2, 3, 3, 3}, 21);
  TensorD b = random_tensor<double>({2}, 22);
  const TensorD go = random_tensor<double>({1, 2, 2, 2, 2}, 23);
  const auto f = [&] { return dot(conv3d_forward(in, w, b, s), go); };
  const auto g = conv3d_backward(go, in, w, s);
  require_close(g.input, numeric_grad(in, f), 1e-4);
  require_close(g.weights, numeric_grad(w, f), 1e-4);
  require_close(g.bias, numeric_grad(b, f), 1e-4);
}

TEST_CASE("deconv3d: stride 2 doubles a 4^3 map to 8^3 and matches direct scatter") {
  const ConvSpec s = ConvSpec::cube(3, 2, 2, 2, 1, 0);
  CHECK(s.transposed_extents({4, 4, 4}) == Extent3{8, 8, 8});
  const TensorD in = random_tensor<double>({2, 3, 4, 4, 4}, 30);
  const TensorD w = random_tensor<double>({3, 2, 2, 2, 2}, 31);
  const TensorD got = deconv3d_forward(in, w, TensorD(), s);
  REQUIRE(got.shape() == Shape{2, 2, 8, 8, 8});
  CHECK(max_abs_diff(got, naive_deconv(in, w, s)) < 1e-12);

  const ConvSpec s3 = ConvSpec::cube(2, 2, 3, 2, 1, 1);
  const TensorD in3 = random_tensor<double>({1, 2, 3, 4, 5}, 32);
  const TensorD w3 = random_tensor<double>({2, 2, 3, 3, 3}, 33);
  CHECK(max_abs_diff(deconv3d_forward(in3, w3, TensorD(), s3), naive_deconv(in3, w3, s3)) < 1e-12);
}

TEST_CASE("deconv3d: zero input gives zero output") {
  const Tensor out = deconv3d_forward(Tensor({1, 2, 4, 4, 4}), random_tensor({2, 3, 2, 2, 2}, 1),
                                      Tensor(), ConvSpec::cube(2, 3, 2, 2));
  for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("deconv3d backward: matches central differences") {
  const ConvSpec s = ConvSpec::cube(2, 2, 2, 2, 1, 0);
  TensorD in = random_tensor<double>({1, 2, 2, 2, 2}, 40);
  TensorD w = random_tensor<double>({2, 2, 2, 2, 2}, 41);
  TensorD b = random_tensor<double>({2}, 42);
  const TensorD go = random_tensor<double>({1, 2, 4, 4, 4}, 43);
  const auto f = [&] { return dot(deconv3d_forward(in, w, b, s), go); };
  const auto g = deconv3d_backward(go, in, w, s);
  require_close(g.input, numeric_grad(in, f), 1e-4);
  require_close(g.weights, numeric_grad(w, f), 1e-4);
  require_close(g.bias, numeric_grad(b, f), 1e-4);
}

TEST_CASE("batchnorm: train mode normalizes each channel to mean 0, variance 1") {
  const TensorD in = random_tensor<double>({3, 4, 5, 5, 5}, 50, -3, 7);
  const auto running = BatchNormStats<double>::init(4);
  const TensorD out = batchnorm_forward<double>(in, TensorD({4}, 1.0), TensorD({4}, 0.0), running,
                                        Mode::Train, nullptr);
  for (std::size_t c = 0; c < 4; ++c) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 125; ++i) {
        const double v = out[(b * 4 + c) * 125 + i];
        sum += v;
        sq += v * v;
        ++n;
      }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(sq / n - mean * mean - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm: constant channel maps to beta, single element does not divide by zero") {
  TensorD in({2, 2, 3, 3, 3}, 4.0);
  const TensorD beta({2}, std::vector<double>{0.25, -1.5});
  const TensorD out =
      batchnorm_forward<double>(in, TensorD({2}, 1.0), beta, BatchNormStats<double>::init(2), Mode::Train, nullptr);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == beta[(i / 27) % 2]);

  const Tensor one = batchnorm_forward<float>(Tensor({1, 1, 1, 1, 1}, 3.0f), Tensor({1}, 1.0f),
                                       Tensor({1}, 0.5f), BatchNormStats<float>::init(1),
                                       Mode::Train, nullptr);
  CHECK(one[0] == 0.5f);
}

TEST_CASE("batchnorm: eval mode uses running statistics, update follows momentum") {
  BatchNormStats<double> running{TensorD({1}, 2.0), TensorD({1}, 4.0)};
  const TensorD in({1, 1, 2, 1, 1}, std::vector<double>{2.0, 6.0});
  const TensorD out =
      batchnorm_forward<double>(in, TensorD({1}, 1.0), TensorD({1}, 0.0), running, Mode::Eval, nullptr);
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(4.0 / std::sqrt(4.0 + kBatchNormEps)));

  BatchNormCache<double> cache;
  batchnorm_forward(in, TensorD({1}, 1.0), TensorD({1}, 0.0), running, Mode::Train, &cache);
  update_running_stats(running, cache);
  // Batch mean 4, unbiased variance 8.
  CHECK(running.mean[0] == doctest::Approx(0.9 * 2.0 + 0.1 * 4.0));
  CHECK(running.var[0] == doctest::Approx(0.9 * 4.0 + 0.1 * 8.0));
}

TEST_CASE("batchnorm backward: matches central differences") {
  TensorD in = random_tensor<double>({2, 2, 2, 2, 2}, 60, -2, 2);
  TensorD gamma = random_tensor<double>({2}, 61, 0.5, 1.5);
  TensorD beta = random_tensor<double>({2}, 62);
  const TensorD go = random_tensor<double>({2, 2, 2, 2, 2}, 63);
  const auto running = BatchNormStats<double>::init(2);
  const auto f = [&] {
    return dot(batchnorm_forward<double>(in, gamma, beta, running, Mode::Train, nullptr), go);
  };
  BatchNormCache<double> cache;
  batchnorm_forward(in, gamma, beta, running, Mode::Train, &cache);
  const auto g = batchnorm_backward(go, gamma, cache);
  require_close(g.input, numeric_grad(in, f), 1e-4);
  require_close(g.gamma, numeric_grad(gamma, f), 1e-4);
  require_close(g.beta, numeric_grad(beta, f), 1e-4);
}

TEST_CASE("softmax: equal logits over an axis of 4 give 0.25; bad axis is rejected") {
  const Tensor y = softmax_forward(Tensor({2, 4, 3}, 1.5f), 1);
  for (float v : y.data()) CHECK(v == doctest::Approx(0.25f));
  CHECK_THROWS_AS(softmax_forward(Tensor({2, 4}), 2), ShapeError);
}

TEST_CASE("softmax: large logits stay finite and backward matches differences") {
  const Tensor y = softmax_forward(Tensor({1, 2}, std::vector<float>{1000.f, 0.f}), 1);
  CHECK(y.all_finite());
  CHECK(y[0] == doctest::Approx(1.0f));

  TensorD x = random_tensor<double>({3, 4}, 70, -2, 2);
  const TensorD go = random_tensor<double>({3, 4}, 71);
  const auto f = [&] { return dot(softmax_forward(x, 1), go); };
  require_close(softmax_backward(go, softmax_forward(x, 1), 1), numeric_grad(x, f), 1e-6);
}

TEST_CASE("relu and l2 norm backward match differences") {
  TensorD x = random_tensor<double>({4, 3}, 80, 0.2, 1.0);
  for (std::size_t i = 0; i < x.size(); i += 2) x[i] = -x[i];
  const TensorD go = random_tensor<double>({4, 3}, 81);
  const auto fr = [&] { return dot(relu_forward(x), go); };
  require_close(relu_backward(go, x), numeric_grad(x, fr), 1e-6);

  const TensorD go2 = random_tensor<double>({4}, 82);
  const auto fn = [&] { return dot(l2_norm_forward(x, 1), go2); };
  require_close(l2_norm_backward(go2, x, l2_norm_forward(x, 1), 1), numeric_grad(x, fn), 1e-6);
}

TEST_CASE("concat, split and permute invert each other") {
  const Tensor a = random_tensor({2, 3, 4}, 90);
  const Tensor b = random_tensor({2, 5, 4}, 91);
  const std::vector<Tensor> parts{a, b};
  const Tensor c = concat<float>(parts, 1);
  CHECK(c.shape() == Shape{2, 8, 4});
  const std::vector<std::size_t> sizes{3, 5};
  const auto back = split<float>(c, 1, sizes);
  CHECK(back[0] == a);
  CHECK(back[1] == b);

  const std::vector<std::size_t> axes{2, 0, 1};
  const Tensor p = permute<float>(a, axes);
  CHECK(p.shape() == Shape{4, 2, 3});
  CHECK(p.at({3, 1, 2}) == a.at({1, 2, 3}));
  CHECK(permute<float>(p, inverse_axes(axes)) == a);
}

TEST_CASE("downsample_labels: constant block stays constant, picks every factor-th voxel") {
  const LabelTensor lab({8, 8, 8}, std::uint8_t{3});
  const LabelTensor d = downsample_labels(lab, 2);
  CHECK(d.shape() == Shape{4, 4, 4});
  for (auto v : d.data()) CHECK(v == 3);

  LabelTensor ramp({4, 4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < 4; ++k) ramp.at({i, j, k}) = std::uint8_t(i * 16 + j * 4 + k);
  const LabelTensor r = downsample_labels(ramp, 2);
  CHECK(r.at({1, 0, 1}) == ramp.at({2, 0, 2}));
}

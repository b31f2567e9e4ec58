#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "sscaps/metrics.hpp"
#include "sscaps/optim.hpp"
#include "sscaps/patches.hpp"
#include "sscaps/training.hpp"

using namespace sscaps;
using sscaps::test::random_tensor;

namespace {

NetworkParams<float> one_param(float value, float grad) {
  NetworkParams<float> p;
  p.add_param("x", Tensor({1}, value));
  p.param("x").grad.fill(grad);
  return p;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.scale = 1.0;
  c.plateau_patience_iters = 10;
  c.early_stop_iters = 12;
  c.eval_every = 6;
  c.patch = {16, 16, 16};
  c.seed = 3;
  return c;
}

std::vector<LabeledVolume> easy_volumes(std::size_t n, std::uint64_t seed = 0) {
  return generate_phantoms(PhantomSpec::easy({16, 16, 16}, 2, 1, seed), n);
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  auto p = one_param(0.3f, 0.0f);
  Adam opt(p);
  for (int i = 0; i < 5; ++i) CHECK(opt.step(p, 1e-2));
  CHECK(p.param("x").value[0] == 0.3f);
}

TEST_CASE("adam: first step has magnitude lr, constant gradients descend") {
  for (float g : {0.5f, -3.0f, 1e-3f}) {
    auto p = one_param(1.0f, g);
    Adam opt(p);
    opt.step(p, 1e-2);
    // m_hat = g, v_hat = g^2 at t = 1, so the update is lr g / (|g| + eps).
    CHECK(std::abs(p.param("x").value[0] - 1.0f) == doctest::Approx(1e-2).epsilon(1e-4));
    for (int i = 0; i < 50; ++i) opt.step(p, 1e-2);
    CHECK((p.param("x").value[0] - 1.0f) * g < 0);
  }
}

TEST_CASE("adam: non-finite gradient skips the step and is counted") {
  auto p = one_param(1.0f, 0.5f);
  Adam opt(p);
  opt.step(p, 1e-2);
  const float after_one = p.param("x").value[0];
  p.param("x").grad.fill(std::nanf(""));
  CHECK_FALSE(opt.step(p, 1e-2));
  CHECK(p.param("x").value[0] == after_one);
  CHECK(opt.steps_skipped() == 1);
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("adam: selector restricts updates") {
  NetworkParams<float> p;
  p.add_param("stem.0.weight", Tensor({2}, 1.0f));
  p.add_param("head.weight", Tensor({2}, 1.0f));
  p.param("stem.0.weight").grad.fill(1.0f);
  p.param("head.weight").grad.fill(1.0f);
  Adam opt(p, {}, [](const std::string& n) { return n.rfind("stem.", 0) == 0; });
  opt.step(p, 0.1);
  CHECK(p.param("stem.0.weight").value[0] < 1.0f);
  CHECK(p.param("head.weight").value[0] == 1.0f);
}

TEST_CASE("plateau scheduler") {
  SUBCASE("strictly improving keeps lr") {
    PlateauScheduler s(1e-4, 0.05, 100);
    for (int i = 1; i <= 20; ++i) s.observe(i * 100, 0.01 * i);
    CHECK(s.lr() == 1e-4);
    CHECK(s.decays() == 0);
  }
  SUBCASE("flat for exactly patience iterations decays once") {
    PlateauScheduler s(1e-4, 0.05, 100);
    s.observe(0, 0.5);
    s.observe(50, 0.5);
    CHECK(s.decays() == 0);
    s.observe(100, 0.5);
    CHECK(s.decays() == 1);
    CHECK(s.lr() == doctest::Approx(5e-6));
    s.observe(150, 0.5);
    CHECK(s.decays() == 1);
  }
  SUBCASE("two stagnant windows give lr x 0.0025") {
    PlateauScheduler s(1e-4, 0.05, 100);
    for (int i = 0; i <= 20; ++i) s.observe(i * 10, 0.5);
    CHECK(s.decays() == 2);
    CHECK(s.lr() == doctest::Approx(1e-4 * 0.0025));
  }
}

TEST_CASE("metrics: perfect, disjoint and over-covering predictions") {
  LabelTensor gt({4, 4, 1});
  for (std::size_t i = 0; i < 4; ++i) gt[i] = 1;
  CHECK(dice_score(gt, gt, 1) == 1.0);
  CHECK(precision_score(gt, gt, 1) == 1.0);
  CHECK(recall_score(gt, gt, 1) == 1.0);

  LabelTensor disjoint({4, 4, 1});
  for (std::size_t i = 8; i < 12; ++i) disjoint[i] = 1;
  CHECK(dice_score(disjoint, gt, 1) == 0.0);
  CHECK(precision_score(disjoint, gt, 1) == 0.0);
  CHECK(recall_score(disjoint, gt, 1) == 0.0);

  LabelTensor over = gt;
  for (std::size_t i = 4; i < 8; ++i) over[i] = 1;
  CHECK(recall_score(over, gt, 1) == 1.0);
  CHECK(precision_score(over, gt, 1) == 0.5);
  CHECK(dice_score(over, gt, 1) == doctest::Approx(2.0 / 3).epsilon(1e-12));
}

TEST_CASE("metrics: pooled counts keep dice = 2pr/(p+r) and macro-average foreground") {
  ConfusionCounter cc(3);
  for (std::uint64_t s = 0; s < 4; ++s) {
    LabelTensor a({6, 6, 6}), b({6, 6, 6});
    std::mt19937_64 rng(s);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = rng() % 3;
      b[i] = rng() % 3;
    }
    cc.add(a, b);
  }
  const Metrics m = cc.metrics();
  REQUIRE(m.per_class.size() == 3);
  for (const auto& c : m.per_class) {
    CHECK(std::abs(c.dice - 2 * c.precision * c.recall / (c.precision + c.recall)) < 1e-6);
  }
  CHECK(m.dice == doctest::Approx((m.per_class[1].dice + m.per_class[2].dice) / 2));
  const auto absent = ClassMetrics::from_counts(0, 0, 0);
  CHECK(absent.dice == 1.0);
  CHECK(ClassMetrics::from_counts(0, 3, 0).dice == 0.0);
}

TEST_CASE("patches: tiling counts") {
  CHECK(tile_origins({64, 64, 64}, {64, 64, 64}).size() == 1);
  const auto t96 = tile_origins({96, 96, 96}, {64, 64, 64});
  CHECK(t96.size() == 8);
  std::set<std::size_t> xs;
  for (const auto& o : t96) xs.insert(o[0]);
  CHECK(xs == std::set<std::size_t>{0, 32});
  CHECK(tile_origins({32, 32, 32}, {16, 16, 16}).size() == 27);
  CHECK(tile_origins({40, 32, 16}, {16, 16, 16}).size() == 4 * 3 * 1);
  CHECK_THROWS(tile_origins({32, 32, 32}, {40, 16, 16}));
}

TEST_CASE("patches: whole-volume patch stitches back to the identity") {
  const Tensor img = random_tensor({2, 16, 16, 16}, 1);
  const PatchSet ps = extract_patches(img, {16, 16, 16}, PatchMode::Eval);
  REQUIRE(ps.patches.size() == 1);
  CHECK(stitch_patches(ps.patches, ps.origins, img.shape()) == img);
}

TEST_CASE("patches: overlapping tiles average back to the original") {
  const Tensor img = random_tensor({2, 24, 16, 32}, 2);
  const PatchSet ps = extract_patches(img, {16, 16, 16}, PatchMode::Eval);
  const Tensor back = stitch_patches(ps.patches, ps.origins, img.shape());
  CHECK(sscaps::test::max_abs_diff(back, img) < 1e-6);

  Rng rng(4);
  const PatchSet tr = extract_patches(img, {8, 8, 8}, PatchMode::Train, &rng, 5);
  CHECK(tr.patches.size() == 5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(tr.patches[k] == crop(img, tr.origins[k], {8, 8, 8}));
  }
}

TEST_CASE("kfold: 8 ids in 4 folds of 2, partitioned, seed-stable") {
  std::vector<std::string> ids;
  for (int i = 0; i < 8; ++i) ids.push_back("v" + std::to_string(i));
  const FoldPlan p = kfold_split(ids, 4, 1);
  std::multiset<std::string> seen;
  for (std::size_t f = 0; f < 4; ++f) {
    const auto test = p.test_ids(f);
    CHECK(test.size() == 2);
    CHECK(p.train_ids(f).size() == 6);
    seen.insert(test.begin(), test.end());
  }
  CHECK(seen == std::multiset<std::string>(ids.begin(), ids.end()));
  CHECK(kfold_split(ids, 4, 1).assignments == p.assignments);

  ids.pop_back();
  const FoldPlan q = kfold_split(ids, 4, 2);
  std::size_t lo = 99, hi = 0;
  for (std::size_t f = 0; f < 4; ++f) {
    lo = std::min(lo, q.test_ids(f).size());
    hi = std::max(hi, q.test_ids(f).size());
  }
  CHECK(hi - lo <= 1);
}

TEST_CASE("ablation rows: six in table order plus the two-row SSL axis") {
  const auto rows = table4_rows();
  REQUIRE(rows.size() == 6);
  std::vector<std::string> names;
  for (const auto& r : rows) names.push_back(r.name);
  CHECK(names == std::vector<std::string>{"caps4", "no_stem", "no_margin", "no_recon", "no_pretext", "full"});
  CHECK(rows[0].reduce_first_caps);
  CHECK_FALSE(rows[1].use_stem);
  CHECK_FALSE(rows[1].pretext);
  CHECK_FALSE(rows[2].losses.margin);
  CHECK_FALSE(rows[3].losses.reconstruction);
  CHECK_FALSE(rows[4].pretext);
  CHECK(rows[5].pretext);
  CHECK(rows[5].losses.any());
  const auto t5 = table5_rows();
  REQUIRE(t5.size() == 2);
  CHECK(t5[0].pretext);
  CHECK_FALSE(t5[1].pretext);
}

TEST_CASE("train config: all losses off is a configuration error") {
  TrainConfig c;
  c.losses = {false, false, false};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(train_downstream(Network<float>(ArchSpec::micro(1, 2)),
                                   Network<float>(ArchSpec::micro(1, 2)).init_params(0),
                                   easy_volumes(1), {}, c),
                  ConfigError);
}

TEST_CASE("train config: scale and json round-trip") {
  TrainConfig c;
  c.scale = 0.01;
  CHECK(c.patience() == 500);
  CHECK(c.max_iters() == 2500);
  CHECK(c.eval_interval() == 100);
  c.class_weights = {0.5, 2.0};
  c.losses.margin = false;
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("train_downstream: same seed twice gives identical histories") {
  const Network<float> net(ArchSpec::micro(1, 2));
  const auto vols = easy_volumes(3);
  const std::vector<LabeledVolume> train(vols.begin(), vols.begin() + 2), val{vols[2]};
  const TrainConfig c = tiny_config();
  const auto a = train_downstream(net, net.init_params(1), train, val, c);
  const auto b = train_downstream(net, net.init_params(1), train, val, c);
  REQUIRE(a.history.size() == b.history.size());
  CHECK(a.history.size() >= 2);
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].to_json() == b.history[i].to_json());
  CHECK(a.iterations == 12);
  for (std::size_t i = 0; i < a.best_params.params().size(); ++i) {
    CHECK(a.best_params.params()[i].value == b.best_params.params()[i].value);
  }
}

TEST_CASE("train_downstream: divergence aborts with the history kept") {
  const Network<float> net(ArchSpec::micro(1, 2));
  TrainConfig c = tiny_config();
  c.divergence_limit = 1e-3;
  try {
    train_downstream(net, net.init_params(2), easy_volumes(2), {}, c);
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(std::string(e.what()).find("diverg") != std::string::npos);
  }
}

TEST_CASE("inverse frequency weights") {
  LabeledVolume v;
  v.image = Tensor({1, 2, 2, 1});
  v.labels = LabelTensor({2, 2, 1}, std::vector<std::uint8_t>{0, 0, 0, 1});
  const auto w = inverse_frequency_weights({v}, 3);
  CHECK(w[0] == doctest::Approx(4.0 / (3 * 3)));
  CHECK(w[1] == doctest::Approx(4.0 / 3));
  CHECK(w[2] == 1.0);
}

TEST_CASE("ablation config: validation and json") {
  AblationConfig c;
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AblationConfig{};
  c.folds = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AblationConfig{};
  c.seeds = {4, 5};
  c.max_folds = 2;
  c.train.learning_rate = 1e-3;
  CHECK(AblationConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("run_ablation: paired rows emit a complete table") {
  Dataset ds;
  ds.num_classes = 2;
  ds.volumes = easy_volumes(4, 9);
  AblationConfig c;
  c.train = tiny_config();
  c.train.plateau_patience_iters = 2;
  c.train.early_stop_iters = 4;
  c.train.eval_every = 2;
  c.pretrain.steps = 2;
  c.seeds = {0};
  c.folds = 2;
  c.max_folds = 1;
  c.val_fraction = 0.5;
  std::size_t pretext_records = 0;
  const auto rows = table4_rows();
  const auto res = run_ablation(ds, rows, c, {},
                                [&](std::uint64_t, std::size_t, const PretextBatchRecord&) { ++pretext_records; });
  CHECK(res.size() == 6);
  CHECK(pretext_records == 2);
  const auto sum = summarize(res, rows);
  REQUIRE(sum.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(sum[i].row == rows[i].name);
    CHECK(sum[i].runs == 1);
  }
  const std::string tsv = summary_tsv(sum);
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 7);
  CHECK(tsv.rfind("row\truns\tdice\tprecision\trecall\n", 0) == 0);
  const std::string runs = results_tsv(res);
  CHECK(std::count(runs.begin(), runs.end(), '\n') == 7);
}

#include "sscaps/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "sscaps/optim.hpp"
#include "sscaps/patches.hpp"
#include "sscaps/random.hpp"

namespace sscaps {

using nlohmann::json;

std::uint64_t TrainConfig::patience() const {
  return std::max<std::uint64_t>(1, std::llround(double(plateau_patience_iters) * scale));
}

std::uint64_t TrainConfig::max_iters() const {
  return std::max<std::uint64_t>(1, std::llround(double(early_stop_iters) * scale));
}

std::uint64_t TrainConfig::eval_interval() const {
  return eval_every ? eval_every : std::max<std::uint64_t>(1, patience() / 5);
}

void TrainConfig::validate() const {
  if (!losses.any()) {
    throw ConfigError("all loss terms are disabled (margin, cross-entropy, reconstruction): "
                      "nothing to optimize");
  }
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be > 0");
  if (!(decay_factor > 0)) throw ConfigError("decay factor must be > 0");
  if (!(scale > 0)) throw ConfigError("scale must be > 0");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (patience() >= max_iters()) {
    throw ConfigError("plateau patience (" + std::to_string(patience()) +
                      " iterations) must be below the iteration budget (" +
                      std::to_string(max_iters()) + ")");
  }
  for (double w : class_weights) {
    if (!(w > 0)) throw ConfigError("class weights must be > 0");
  }
  for (auto p : patch) {
    if (p == 0) throw ConfigError("patch extents must be >= 1");
  }
}

json TrainConfig::to_json() const {
  return json{{"learning_rate", learning_rate},
              {"decay_factor", decay_factor},
              {"plateau_patience_iters", plateau_patience_iters},
              {"early_stop_iters", early_stop_iters},
              {"scale", scale},
              {"patch", patch},
              {"batch_size", batch_size},
              {"seed", seed},
              {"margin", losses.margin},
              {"cross_entropy", losses.cross_entropy},
              {"reconstruction", losses.reconstruction},
              {"eval_every", eval_every},
              {"class_weights", class_weights},
              {"divergence_limit", divergence_limit}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    take("learning_rate", c.learning_rate);
    take("decay_factor", c.decay_factor);
    take("plateau_patience_iters", c.plateau_patience_iters);
    take("early_stop_iters", c.early_stop_iters);
    take("scale", c.scale);
    take("patch", c.patch);
    take("batch_size", c.batch_size);
    take("seed", c.seed);
    take("margin", c.losses.margin);
    take("cross_entropy", c.losses.cross_entropy);
    take("reconstruction", c.losses.reconstruction);
    take("eval_every", c.eval_every);
    take("class_weights", c.class_weights);
    take("divergence_limit", c.divergence_limit);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  return c;
}

json MetricsRow::to_json() const {
  json classes = json::array();
  for (const auto& c : metrics.per_class) {
    classes.push_back({{"dice", c.dice}, {"precision", c.precision}, {"recall", c.recall}});
  }
  return json{{"step", step},
              {"split", split},
              {"loss", loss},
              {"lr", lr},
              {"dice", metrics.dice},
              {"precision", metrics.precision},
              {"recall", metrics.recall},
              {"classes", classes}};
}

std::vector<double> inverse_frequency_weights(const std::vector<LabeledVolume>& volumes,
                                              std::size_t num_classes) {
  std::vector<double> counts(num_classes, 0.0);
  double total = 0;
  for (const auto& v : volumes) {
    for (auto l : v.labels.storage()) {
      if (l >= num_classes) throw FormatError("label id out of range in " + v.id);
      counts[l] += 1;
      total += 1;
    }
  }
  std::vector<double> w(num_classes, 1.0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (counts[k] > 0) w[k] = total / (double(num_classes) * counts[k]);
  }
  return w;
}

LossBreakdown downstream_step(const Network<float>& net, NetworkParams<float>& params,
                              const Tensor& images, const LabelTensor& labels,
                              const std::vector<double>& class_weights,
                              const LossToggles& toggles) {
  const ArchSpec& arch = net.arch();
  ForwardCache<float> cache;
  const auto out = net.forward(images, params, Mode::Train, &cache);

  OutputGrads<float> grads;
  double m = 0, ce = 0, r = 0;
  if (toggles.margin) {
    const Tensor onehot =
        one_hot_last<float>(downsample_labels(labels, arch.downsample_factor()), arch.num_classes);
    m = margin_loss(out.encoder_lengths, onehot);
    grads.encoder_lengths = margin_loss_backward(out.encoder_lengths, onehot);
  }
  if (toggles.cross_entropy) {
    ce = weighted_cross_entropy(out.logits, labels, class_weights);
    grads.logits = weighted_cross_entropy_backward(out.logits, labels, class_weights);
  }
  if (toggles.reconstruction) {
    // Foreground mask, repeated over the image channels.
    Tensor mask(images.shape());
    const std::size_t N = images.dim(0), C = images.dim(1);
    const std::size_t voxels = labels.size() / N;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t v = 0; v < voxels; ++v) {
          mask[(n * C + c) * voxels + v] = labels[n * voxels + v] > 0 ? 1.0f : 0.0f;
        }
      }
    }
    r = masked_reconstruction_loss(out.reconstruction, images, mask);
    grads.reconstruction = masked_reconstruction_loss_backward(out.reconstruction, images, mask);
  }
  const LossBreakdown loss = total_downstream_loss(m, ce, r);
  params.zero_grad();
  net.backward(cache, grads, params);
  net.commit_batchnorm_stats(cache, params);
  return loss;
}

Tensor predict_logits(const Network<float>& net, const NetworkParams<float>& params,
                      const Tensor& image, const Extent3& patch) {
  const PatchSet tiles = extract_patches(image, patch, PatchMode::Eval);
  std::vector<Tensor> logits;
  for (const auto& t : tiles.patches) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    Tensor out = net.forward(t.reshaped(s), params, Mode::Eval, nullptr).logits;
    Shape k = out.shape();
    k.erase(k.begin());
    logits.push_back(out.reshaped(k));
  }
  return stitch_patches(logits, tiles.origins,
                        {net.arch().num_classes, image.dim(1), image.dim(2), image.dim(3)});
}

LabelTensor predict_labels(const Network<float>& net, const NetworkParams<float>& params,
                           const Tensor& image, const Extent3& patch) {
  const Tensor logits = predict_logits(net, params, image, patch);
  const std::size_t K = logits.dim(0);
  const std::size_t voxels = logits.size() / K;
  LabelTensor out({image.dim(1), image.dim(2), image.dim(3)});
  for (std::size_t v = 0; v < voxels; ++v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits[k * voxels + v] > logits[best * voxels + v]) best = k;
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Metrics evaluate(const Network<float>& net, const NetworkParams<float>& params,
                 const std::vector<LabeledVolume>& volumes, const Extent3& patch) {
  ConfusionCounter counter(net.arch().num_classes);
  for (const auto& v : volumes) counter.add(predict_labels(net, params, v.image, patch), v.labels);
  return counter.metrics();
}

namespace {

template <typename T>
BasicTensor<T> stack(const std::vector<BasicTensor<T>>& samples) {
  Shape s = samples.front().shape();
  s.insert(s.begin(), samples.size());
  BasicTensor<T> out(s);
  T* dst = out.raw();
  for (const auto& t : samples) dst = std::copy(t.storage().begin(), t.storage().end(), dst);
  return out;
}

}  // namespace

TrainResult train_downstream(const Network<float>& net, NetworkParams<float> params,
                             const std::vector<LabeledVolume>& train,
                             const std::vector<LabeledVolume>& val, const TrainConfig& config,
                             const std::function<void(const MetricsRow&)>& on_row) {
  config.validate();
  if (train.empty()) throw ConfigError("training needs at least one volume");
  const ArchSpec& arch = net.arch();
  for (const auto& v : train) {
    v.validate(arch.num_classes);
    if (v.channels() != arch.in_channels) {
      throw ConfigError("volume " + v.id + " has " + std::to_string(v.channels()) +
                        " channels, the network expects " + std::to_string(arch.in_channels));
    }
    check_patch_fits(v.extents(), config.patch);
  }
  std::vector<double> weights = config.class_weights;
  if (weights.empty()) weights = inverse_frequency_weights(train, arch.num_classes);
  if (weights.size() != arch.num_classes) {
    throw ConfigError("need one class weight per class (" + std::to_string(arch.num_classes) + ")");
  }
  const auto& scored = val.empty() ? train : val;

  Rng rng(config.seed, 0x7a11);
  Adam adam(params);
  PlateauScheduler scheduler(config.learning_rate, config.decay_factor, config.patience());
  double lr = config.learning_rate;

  TrainResult result;
  result.best_params = params;
  double loss_sum = 0;
  std::size_t loss_count = 0;
  const std::uint64_t budget = config.max_iters();
  const std::uint64_t interval = config.eval_interval();

  for (std::uint64_t it = 1; it <= budget; ++it) {
    std::vector<Tensor> imgs;
    std::vector<LabelTensor> labs;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const LabeledVolume& v = train[rng.below(train.size())];
      const Extent3 o = random_origin(v.extents(), config.patch, rng);
      imgs.push_back(crop(v.image, o, config.patch));
      labs.push_back(crop(v.labels, o, config.patch));
    }
    LossBreakdown loss;
    try {
      loss = downstream_step(net, params, stack(imgs), stack(labs), weights, config.losses);
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at iteration " + std::to_string(it) + ": " +
                                 e.what(),
                             std::move(result.history));
    }
    if (loss.total > config.divergence_limit) {
      throw TrainingDiverged("training diverged at iteration " + std::to_string(it) +
                                 ": loss " + std::to_string(loss.total) + " exceeds " +
                                 std::to_string(config.divergence_limit),
                             std::move(result.history));
    }
    if (!adam.step(params, lr)) {
      std::fprintf(stderr, "warning: non-finite gradient at iteration %llu, step skipped\n",
                   static_cast<unsigned long long>(it));
    }
    loss_sum += loss.total;
    ++loss_count;

    if (it % interval == 0 || it == budget) {
      MetricsRow row;
      row.step = it;
      row.split = val.empty() ? "train" : "val";
      row.loss = loss_sum / double(loss_count);
      row.lr = lr;
      row.metrics = evaluate(net, params, scored, config.patch);
      loss_sum = 0;
      loss_count = 0;
      if (row.metrics.dice > result.best_val_dice) {
        result.best_val_dice = row.metrics.dice;
        result.best_step = it;
        result.best_params = params;
      }
      lr = scheduler.observe(it, row.metrics.dice);
      result.history.push_back(row);
      if (on_row) on_row(row);
    }
  }
  result.iterations = budget;
  result.skipped_steps = adam.steps_skipped();
  return result;
}

std::vector<std::string> FoldPlan::test_ids(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignments) {
    if (f == fold) out.push_back(id);
  }
  return out;
}

std::vector<std::string> FoldPlan::train_ids(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignments) {
    if (f != fold) out.push_back(id);
  }
  return out;
}

namespace {

std::vector<std::string> shuffled(std::vector<std::string> ids, std::uint64_t seed) {
  Rng rng(seed, 0xf01d);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  return ids;
}

}  // namespace

FoldPlan kfold_split(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > ids.size()) {
    throw ConfigError("k-fold needs 1 <= k <= " + std::to_string(ids.size()) + ", got " +
                      std::to_string(k));
  }
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
    throw ConfigError("k-fold ids must be unique");
  }
  FoldPlan plan;
  plan.k = k;
  const auto order = shuffled(ids, seed);
  for (std::size_t i = 0; i < order.size(); ++i) plan.assignments[order[i]] = i % k;
  return plan;
}

std::pair<std::vector<std::string>, std::vector<std::string>> train_val_split(
    const std::vector<std::string>& ids, double val_fraction, std::uint64_t seed) {
  const auto order = shuffled(ids, seed);
  std::size_t nval = static_cast<std::size_t>(std::llround(val_fraction * double(ids.size())));
  if (ids.size() >= 2) nval = std::clamp<std::size_t>(nval, 1, ids.size() - 1);
  else nval = 0;
  std::vector<std::string> val(order.begin(), order.begin() + static_cast<long>(nval));
  std::vector<std::string> train(order.begin() + static_cast<long>(nval), order.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

namespace {

AblationRow make_row(std::string name, std::string description) {
  AblationRow r;
  r.name = std::move(name);
  r.description = std::move(description);
  return r;
}

}  // namespace

json AblationConfig::to_json() const {
  return json{{"train", train.to_json()},     {"pretrain", pretrain.to_json()},
              {"seeds", seeds},               {"folds", folds},
              {"max_folds", max_folds},       {"val_fraction", val_fraction},
              {"arch", micro ? "micro" : "standard"}};
}

AblationConfig AblationConfig::from_json(const json& j) {
  AblationConfig c;
  try {
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
    if (j.contains("folds")) j.at("folds").get_to(c.folds);
    if (j.contains("max_folds")) j.at("max_folds").get_to(c.max_folds);
    if (j.contains("val_fraction")) j.at("val_fraction").get_to(c.val_fraction);
    if (j.contains("arch")) {
      const auto a = j.at("arch").get<std::string>();
      if (a != "micro" && a != "standard") {
        throw ConfigError("arch must be micro or standard, got '" + a + "'");
      }
      c.micro = a == "micro";
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("ablation config: ") + e.what());
  }
  return c;
}

void AblationConfig::validate() const {
  train.validate();
  pretrain.validate();
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (folds < 2) throw ConfigError("ablation needs at least 2 folds");
  if (!(val_fraction > 0 && val_fraction < 1)) {
    throw ConfigError("validation fraction must be in (0, 1)");
  }
}

std::vector<AblationRow> table4_rows() {
  std::vector<AblationRow> rows;
  rows.push_back(make_row("caps4", "first capsule layer with a quarter of the capsule types"));
  rows.back().reduce_first_caps = true;
  rows.push_back(make_row("no_stem", "without the visual representation stem (so no pretext)"));
  rows.back().use_stem = false;
  rows.back().pretext = false;
  rows.push_back(make_row("no_margin", "without the margin loss"));
  rows.back().losses.margin = false;
  rows.push_back(make_row("no_recon", "without the reconstruction loss"));
  rows.back().losses.reconstruction = false;
  rows.push_back(make_row("no_pretext", "without pretext pretraining"));
  rows.back().pretext = false;
  rows.push_back(make_row("full", "full model"));
  return rows;
}

std::vector<AblationRow> table5_rows() {
  std::vector<AblationRow> rows;
  rows.push_back(make_row("with_pretext", "pretext pretraining, then downstream training"));
  rows.push_back(make_row("without_pretext", "downstream training from random initialization"));
  rows.back().pretext = false;
  return rows;
}

ArchSpec row_arch(const AblationRow& row, const Dataset& ds, bool micro) {
  ArchSpec a = micro ? ArchSpec::micro(ds.channels, ds.num_classes)
                     : ArchSpec::standard(ds.channels, ds.num_classes);
  if (row.reduce_first_caps) a = a.with_reduced_first_caps();
  if (!row.use_stem) a = a.without_stem();
  return a;
}

namespace {

std::vector<LabeledVolume> pick(const Dataset& ds, const std::vector<std::string>& ids) {
  std::vector<LabeledVolume> out;
  for (const auto& id : ids) {
    auto it = std::find_if(ds.volumes.begin(), ds.volumes.end(),
                           [&](const LabeledVolume& v) { return v.id == id; });
    out.push_back(*it);
  }
  return out;
}

}  // namespace

std::vector<AblationResult> run_ablation(
    const Dataset& ds, const std::vector<AblationRow>& rows, const AblationConfig& config,
    const std::function<void(const AblationResult&)>& on_result,
    const std::function<void(std::uint64_t, std::size_t, const PretextBatchRecord&)>& on_pretext) {
  if (rows.empty()) throw ConfigError("ablation needs at least one row");
  config.validate();
  std::vector<AblationResult> results;
  const auto ids = ds.ids();
  const bool any_pretext = std::any_of(rows.begin(), rows.end(),
                                       [](const AblationRow& r) { return r.pretext && r.use_stem; });

  for (auto seed : config.seeds) {
    const FoldPlan plan = kfold_split(ids, config.folds, seed);
    const std::size_t nf = config.max_folds ? std::min(config.max_folds, config.folds) : config.folds;
    for (std::size_t f = 0; f < nf; ++f) {
      const std::uint64_t run_seed = Rng::mix(seed, f);
      const auto [tr_ids, va_ids] = train_val_split(plan.train_ids(f), config.val_fraction, run_seed);
      const auto train = pick(ds, tr_ids);
      const auto val = pick(ds, va_ids);
      const auto test = pick(ds, plan.test_ids(f));

      // One pretext run per split, transplanted into every row that uses it.
      NetworkParams<float> pretrained;
      PretextBatchRecord last_record;
      if (any_pretext) {
        const ArchSpec base = row_arch(AblationRow{}, ds, config.micro);
        const Network<float> net(base);
        std::vector<Tensor> images;
        for (const auto& v : train) images.push_back(v.image);
        for (const auto& v : val) images.push_back(v.image);
        PretrainConfig pc = config.pretrain;
        pc.seed = run_seed;
        auto record = [&](const PretextBatchRecord& r) {
          if (on_pretext) on_pretext(seed, f, r);
        };
        PretrainResult pr = pretrain(net, net.init_params(run_seed), images, pc, record);
        last_record = pr.history.back();
        pretrained = std::move(pr.params);
      }

      for (const auto& row : rows) {
        const ArchSpec arch = row_arch(row, ds, config.micro);
        const Network<float> net(arch);
        NetworkParams<float> params = net.init_params(run_seed);
        if (row.pretext && row.use_stem) transplant_stem(pretrained, params);
        TrainConfig tc = config.train;
        tc.losses = row.losses;
        tc.seed = run_seed;
        const TrainResult tr = train_downstream(net, std::move(params), train, val, tc);
        AblationResult r;
        r.row = row.name;
        r.seed = seed;
        r.fold = f;
        r.test = evaluate(net, tr.best_params, test, tc.patch);
        r.best_val_dice = tr.best_val_dice;
        r.iterations = tr.iterations;
        if (row.pretext && row.use_stem) {
          r.pretext_variance = last_record.variance;
          r.pretext_collapsed = last_record.collapsed;
        }
        results.push_back(r);
        if (on_result) on_result(r);
      }
    }
  }
  return results;
}

json AblationResult::to_json() const {
  return json{{"row", row},
              {"seed", seed},
              {"fold", fold},
              {"dice", test.dice},
              {"precision", test.precision},
              {"recall", test.recall},
              {"best_val_dice", best_val_dice},
              {"iterations", iterations},
              {"pretext_variance", pretext_variance},
              {"pretext_collapsed", pretext_collapsed}};
}

std::vector<AblationSummary> summarize(const std::vector<AblationResult>& results,
                                       const std::vector<AblationRow>& rows) {
  std::vector<AblationSummary> out;
  for (const auto& row : rows) {
    AblationSummary s;
    s.row = row.name;
    for (const auto& r : results) {
      if (r.row != row.name) continue;
      ++s.runs;
      s.dice += r.test.dice;
      s.precision += r.test.precision;
      s.recall += r.test.recall;
    }
    if (s.runs) {
      s.dice /= double(s.runs);
      s.precision /= double(s.runs);
      s.recall /= double(s.runs);
    }
    out.push_back(s);
  }
  return out;
}

namespace {

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string summary_tsv(const std::vector<AblationSummary>& s) {
  std::ostringstream os;
  os << "row\truns\tdice\tprecision\trecall\n";
  for (const auto& r : s) {
    os << r.row << '\t' << r.runs << '\t' << fmt4(r.dice) << '\t' << fmt4(r.precision) << '\t'
       << fmt4(r.recall) << '\n';
  }
  return os.str();
}

std::string results_tsv(const std::vector<AblationResult>& r) {
  std::ostringstream os;
  os << "row\tseed\tfold\tdice\tprecision\trecall\tbest_val_dice\titerations\tpretext_collapsed\n";
  for (const auto& x : r) {
    os << x.row << '\t' << x.seed << '\t' << x.fold << '\t' << fmt4(x.test.dice) << '\t'
       << fmt4(x.test.precision) << '\t' << fmt4(x.test.recall) << '\t' << fmt4(x.best_val_dice)
       << '\t' << x.iterations << '\t' << (x.pretext_collapsed ? "yes" : "no") << '\n';
  }
  return os.str();
}

}  // namespace sscaps

#include "cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "sscaps/checkpoint.hpp"
#include "sscaps/data.hpp"
#include "sscaps/error.hpp"
#include "sscaps/gradcheck.hpp"
#include "sscaps/metrics.hpp"
#include "sscaps/training.hpp"

#ifndef SSCAPS_VERSION
#define SSCAPS_VERSION "unknown"
#endif

namespace sscaps::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void merge_config(json& base, const json& overlay, const std::string& where) {
  if (!overlay.is_object()) {
    throw ConfigError("config" + (where.empty() ? "" : " section '" + where + "'") +
                      " must be a JSON object");
  }
  for (const auto& [key, value] : overlay.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object()) {
      merge_config(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

json read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  if (j.is_object() && j.value("format", "") == kRunManifestFormat) {
    if (!j.contains("config")) throw ConfigError(path.string() + ": run manifest without config");
    return j.at("config");
  }
  return j;
}

namespace {

std::string utc_timestamp(const char* fmt) {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

Extent3 parse_extent(const std::string& text, const std::string& flag) {
  std::vector<std::size_t> parts;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) throw ConfigError(flag + ": expected N or N,N,N, got '" + text + "'");
    parts.push_back(std::stoul(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == ',' || c == 'x') {
      flush();
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      cur += c;
    } else {
      throw ConfigError(flag + ": expected N or N,N,N, got '" + text + "'");
    }
  }
  flush();
  if (parts.size() == 1) return {parts[0], parts[0], parts[0]};
  if (parts.size() == 3) return {parts[0], parts[1], parts[2]};
  throw ConfigError(flag + ": expected N or N,N,N, got '" + text + "'");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || !std::all_of(item.begin(), item.end(),
                                     [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      throw ConfigError("--seeds: expected a comma-separated list of integers, got '" + text + "'");
    }
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw FormatError("cannot write " + path.string());
}

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) : os_(path, std::ios::binary) {
    if (!os_) throw FormatError("cannot write " + path.string());
  }
  void write(const json& j) {
    os_ << j.dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

// Creates the run directory. An explicit --out must be absent or empty;
// otherwise a timestamped directory is claimed under the runs root.
fs::path claim_run_dir(const std::string& out, const std::string& subcommand) {
  if (!out.empty()) {
    const fs::path p(out);
    if (fs::exists(p)) {
      if (!fs::is_directory(p)) throw ConfigError("--out " + out + " exists and is not a directory");
      if (!fs::is_empty(p)) {
        throw ConfigError("run directory " + out + " is not empty (runs never share a directory)");
      }
    }
    fs::create_directories(p);
    return p;
  }
  const char* env = std::getenv(kRunsRootEnv);
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  fs::create_directories(root);
  const std::string base = subcommand + "-" + utc_timestamp("%Y%m%dT%H%M%SZ");
  fs::path p = root / base;
  for (int n = 2; !fs::create_directory(p); ++n) p = root / (base + "-" + std::to_string(n));
  return p;
}

class Run {
 public:
  Run(fs::path dir, std::string subcommand, json config, std::uint64_t seed, json inputs)
      : dir_(std::move(dir)) {
    manifest_ = {{"format", kRunManifestFormat},
                 {"version", 1},
                 {"subcommand", std::move(subcommand)},
                 {"tool_version", SSCAPS_VERSION},
                 {"seed", seed},
                 {"config", std::move(config)},
                 {"inputs", std::move(inputs)},
                 {"outputs", json::array()},
                 {"started_at", utc_timestamp("%Y-%m-%dT%H:%M:%SZ")},
                 {"finished_at", nullptr},
                 {"status", "running"},
                 {"message", ""},
                 {"summary", json::object()}};
    flush();
  }

  const fs::path& dir() const { return dir_; }
  fs::path output(const std::string& name) {
    manifest_["outputs"].push_back(name);
    return dir_ / name;
  }
  json& summary() { return manifest_["summary"]; }

  bool finished() const { return manifest_["status"] != "running"; }

  void finish(const std::string& status, const std::string& message = "") {
    manifest_["status"] = status;
    manifest_["message"] = message;
    manifest_["finished_at"] = utc_timestamp("%Y-%m-%dT%H:%M:%SZ");
    flush();
  }

 private:
  void flush() { write_file(dir_ / kRunManifestFile, manifest_.dump(2) + "\n"); }

  fs::path dir_;
  json manifest_;
};

std::string fmt(const char* f, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ArchSpec base_arch(const std::string& name, std::size_t channels, std::size_t classes) {
  if (name == "micro") return ArchSpec::micro(channels, classes);
  if (name == "standard") return ArchSpec::standard(channels, classes);
  throw ConfigError("arch must be micro or standard, got '" + name + "'");
}

bool same_stem(const ArchSpec& a, const ArchSpec& b) {
  return a.use_stem && b.use_stem && a.in_channels == b.in_channels &&
         a.stem_channels == b.stem_channels && a.stem_kernel == b.stem_kernel &&
         a.stem_dilations == b.stem_dilations;
}

std::string metrics_tsv(const Metrics& m) {
  std::ostringstream os;
  os << "class\tdice\tprecision\trecall\ttp\tfp\tfn\n";
  for (std::size_t k = 0; k < m.per_class.size(); ++k) {
    const auto& c = m.per_class[k];
    os << k << '\t' << fmt("%.4f", c.dice) << '\t' << fmt("%.4f", c.precision) << '\t'
       << fmt("%.4f", c.recall) << '\t' << c.tp << '\t' << c.fp << '\t' << c.fn << '\n';
  }
  os << "mean_fg\t" << fmt("%.4f", m.dice) << '\t' << fmt("%.4f", m.precision) << '\t'
     << fmt("%.4f", m.recall) << "\t\t\t\n";
  return os.str();
}

json metrics_json(const Metrics& m) {
  json classes = json::array();
  for (const auto& c : m.per_class) {
    classes.push_back({{"dice", c.dice},
                       {"precision", c.precision},
                       {"recall", c.recall},
                       {"tp", c.tp},
                       {"fp", c.fp},
                       {"fn", c.fn}});
  }
  return {{"dice", m.dice}, {"precision", m.precision}, {"recall", m.recall}, {"classes", classes}};
}

// Every flag of every subcommand. Which ones a subcommand registers decides
// what it accepts; `given` tells apart defaults from explicit values.
struct Flags {
  std::string data, out, config, stem, checkpoint;
  std::uint64_t seed = 0;
  std::string seeds;
  double scale = 1, lr = 1e-4, decay = 0.05, val_fraction = 0.2, pretrain_lr = 1e-4;
  std::uint64_t patience = 0, max_iters = 0, eval_every = 0;
  std::string patch, extent, tier, arch, scope, table;
  std::size_t classes = 2, channels = 1, count = 16, steps = 0, batch = 1, folds = 4,
              max_folds = 0, pretrain_steps = 0, grad_seeds = 20, params_per_seed = 10;
  bool no_margin = false, no_recon = false, no_ce = false, no_stem = false, caps4 = false;
  bool quiet = false;
};

struct Context {
  CLI::App* sub = nullptr;
  Flags f;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  std::optional<Run> run;

  Run& start(fs::path dir, const std::string& subcommand, json config, std::uint64_t seed,
             json inputs) {
    return run.emplace(std::move(dir), subcommand, std::move(config), seed, std::move(inputs));
  }
  void fail(const std::string& message) {
    if (run && !run->finished()) run->finish("failed", message);
  }

  bool given(const std::string& flag) const { return sub->count(flag) > 0; }
  void progress(const std::string& line) const {
    if (!f.quiet) *err << line << '\n' << std::flush;
  }
};

// Defaults <- config file <- flags.
json layered(const Context& c, json defaults) {
  if (!c.f.config.empty()) merge_config(defaults, read_config_file(c.f.config));
  return defaults;
}

// A previous run.json given as --config also supplies the input paths that
// were not passed as flags, so the manifest alone reproduces the run.
void adopt_manifest_inputs(Context& c, const std::string& subcommand) {
  if (c.f.config.empty()) return;
  std::ifstream in(c.f.config);
  json j = json::parse(in, nullptr, false);
  if (!j.is_object() || j.value("format", "") != kRunManifestFormat) return;
  const std::string from = j.value("subcommand", "");
  if (from != subcommand) {
    throw ConfigError(c.f.config + " is a " + from + " run manifest, not " + subcommand);
  }
  const json inputs = j.value("inputs", json::object());
  for (auto [key, slot] : {std::pair{"data", &c.f.data}, std::pair{"stem", &c.f.stem},
                           std::pair{"checkpoint", &c.f.checkpoint}}) {
    if (slot->empty() && inputs.contains(key)) *slot = inputs.at(key).get<std::string>();
  }
}

void require_data(const Context& c) {
  if (c.f.data.empty()) throw ConfigError("--data is required");
}

Dataset load_data(const Context& c) {
  require_data(c);
  return read_dataset(c.f.data);
}

void apply_train_flags(const Context& c, json& t) {
  if (c.given("--seed")) t["seed"] = c.f.seed;
  if (c.given("--scale")) t["scale"] = c.f.scale;
  if (c.given("--patch")) t["patch"] = parse_extent(c.f.patch, "--patch");
  if (c.given("--lr")) t["learning_rate"] = c.f.lr;
  if (c.given("--decay-factor")) t["decay_factor"] = c.f.decay;
  if (c.given("--patience")) t["plateau_patience_iters"] = c.f.patience;
  if (c.given("--max-iters")) t["early_stop_iters"] = c.f.max_iters;
  if (c.given("--eval-every")) t["eval_every"] = c.f.eval_every;
  if (c.given("--batch")) t["batch_size"] = c.f.batch;
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(Context& c) {
  json cfg = layered(c, {{"tier", "easy"},
                         {"classes", 2},
                         {"channels", 1},
                         {"count", 16},
                         {"extent", Extent3{32, 32, 32}},
                         {"seed", 0}});
  if (c.given("--tier")) cfg["tier"] = c.f.tier;
  if (c.given("--classes")) cfg["classes"] = c.f.classes;
  if (c.given("--channels")) cfg["channels"] = c.f.channels;
  if (c.given("--count")) cfg["count"] = c.f.count;
  if (c.given("--extent")) cfg["extent"] = parse_extent(c.f.extent, "--extent");
  if (c.given("--seed")) cfg["seed"] = c.f.seed;

  PhantomSpec spec;
  std::size_t count = 0;
  try {
    spec = PhantomSpec::for_tier(parse_phantom_tier(cfg.at("tier").get<std::string>()),
                                 cfg.at("extent").get<Extent3>(), cfg.at("classes").get<std::size_t>(),
                                 cfg.at("channels").get<std::size_t>(), cfg.at("seed").get<std::uint64_t>());
    count = cfg.at("count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gen-data config: ") + e.what());
  }
  spec.validate();
  if (count == 0) throw ConfigError("--count must be >= 1");

  Run& run = c.start(claim_run_dir(c.f.out, "gen-data"), "gen-data", cfg, spec.seed, json::object());
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.channels = spec.channels;
  ds.volumes = generate_phantoms(spec, count);
  write_dataset(ds, run.dir(), cfg.dump());
  run.output("manifest.json");
  for (const auto& v : ds.volumes) {
    run.output(v.id + ".json");
    run.output(v.id + ".img");
    run.output(v.id + ".lbl");
  }
  run.summary() = {{"volumes", count}};
  run.finish("ok");
  *c.out << run.dir().string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- pretrain

int cmd_pretrain(Context& c) {
  json cfg = layered(c, {{"arch", "micro"}, {"pretrain", PretrainConfig{}.to_json()}});
  json& p = cfg["pretrain"];
  if (c.given("--arch")) cfg["arch"] = c.f.arch;
  if (c.given("--seed")) p["seed"] = c.f.seed;
  if (c.given("--lr")) p["learning_rate"] = c.f.lr;
  if (c.given("--steps")) p["steps"] = c.f.steps;
  if (c.given("--batch")) p["batch_size"] = c.f.batch;
  if (c.given("--patch")) p["patch"] = parse_extent(c.f.patch, "--patch");
  const PretrainConfig pc = PretrainConfig::from_json(p);
  pc.validate();
  const std::string arch_name = cfg.at("arch").get<std::string>();
  base_arch(arch_name, 1, 2);  // validates the name before any work

  const Dataset ds = load_data(c);
  const Network<float> net(base_arch(arch_name, ds.channels, ds.num_classes));
  std::vector<Tensor> images;
  for (const auto& v : ds.volumes) images.push_back(v.image);

  Run& run = c.start(claim_run_dir(c.f.out, "pretrain"), "pretrain", cfg, pc.seed, {{"data", c.f.data}});
  JsonlLog log(run.output("pretext.jsonl"));
  std::size_t flagged = 0;
  const std::size_t every = std::max<std::size_t>(1, pc.steps / 10);
  auto on_record = [&](const PretextBatchRecord& r) {
    log.write(r.to_json());
    if (r.collapsed) ++flagged;
    if (r.step % every == 0 || r.collapsed) {
      c.progress("pretext step " + std::to_string(r.step) + " pair (" + std::to_string(r.i) + "," +
                 std::to_string(r.j) + ") loss " + fmt("%.4g", r.loss) + " variance " +
                 fmt("%.3e", r.variance) + (r.collapsed ? " COLLAPSED" : ""));
    }
  };
  PretrainResult result;
  try {
    result = pretrain(net, net.init_params(pc.seed), images, pc, on_record);
  } catch (const PretrainAborted& e) {
    run.finish("failed", e.what());
    *c.err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  const auto& last = result.history.back();
  Checkpoint ck;
  ck.arch = net.arch();
  ck.params = std::move(result.params);
  ck.meta = {{"kind", "pretext"},
             {"config", cfg},
             {"final_loss", last.loss},
             {"final_variance", last.variance},
             {"collapsed_batches", flagged}};
  save_checkpoint(ck, run.output("stem.ckpt"));
  run.summary() = {{"final_loss", last.loss},
                   {"final_variance", last.variance},
                   {"collapsed_batches", flagged}};
  if (flagged) {
    *c.err << "warning: stem features collapsed (variance < " << pc.collapse_threshold << ") on "
           << flagged << " of " << result.history.size() << " batches\n";
  }
  run.finish("ok");
  *c.out << run.dir().string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- train

int cmd_train(Context& c) {
  json cfg = layered(c, {{"arch", "micro"},
                         {"use_stem", true},
                         {"caps4", false},
                         {"val_fraction", 0.2},
                         {"classes", 0},
                         {"train", TrainConfig{}.to_json()}});
  json& t = cfg["train"];
  apply_train_flags(c, t);
  if (c.given("--no-margin")) t["margin"] = false;
  if (c.given("--no-recon")) t["reconstruction"] = false;
  if (c.given("--no-ce")) t["cross_entropy"] = false;
  if (c.given("--arch")) cfg["arch"] = c.f.arch;
  if (c.given("--no-stem")) cfg["use_stem"] = false;
  if (c.given("--caps4")) cfg["caps4"] = true;
  if (c.given("--val-fraction")) cfg["val_fraction"] = c.f.val_fraction;
  if (c.given("--classes")) cfg["classes"] = c.f.classes;

  const TrainConfig tc = TrainConfig::from_json(t);
  tc.validate();
  bool use_stem = true, caps4 = false;
  double val_fraction = 0;
  std::size_t classes = 0;
  std::string arch_name;
  try {
    use_stem = cfg.at("use_stem").get<bool>();
    caps4 = cfg.at("caps4").get<bool>();
    val_fraction = cfg.at("val_fraction").get<double>();
    classes = cfg.at("classes").get<std::size_t>();
    arch_name = cfg.at("arch").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (!use_stem && !c.f.stem.empty()) {
    throw ConfigError("--stem needs a stem; it cannot be combined with --no-stem");
  }
  if (!(val_fraction >= 0 && val_fraction < 1)) {
    throw ConfigError("--val-fraction must be in [0, 1)");
  }
  base_arch(arch_name, 1, 2);

  const Dataset ds = load_data(c);
  if (classes != 0 && classes != ds.num_classes) {
    throw ConfigError("--classes " + std::to_string(classes) + " but the dataset has " +
                      std::to_string(ds.num_classes) + " classes");
  }
  ArchSpec arch = base_arch(arch_name, ds.channels, ds.num_classes);
  if (caps4) arch = arch.with_reduced_first_caps();
  if (!use_stem) arch = arch.without_stem();
  const Network<float> net(arch);
  NetworkParams<float> params = net.init_params(tc.seed);
  if (!c.f.stem.empty()) {
    const Checkpoint stem = load_checkpoint(c.f.stem);
    if (!same_stem(stem.arch, arch)) {
      throw ConfigError("stem checkpoint " + c.f.stem +
                        " does not match this network's stem (channels, widths, kernel)");
    }
    transplant_stem(stem.params, params);
  }

  std::vector<std::string> train_ids, val_ids;
  if (val_fraction > 0) {
    std::tie(train_ids, val_ids) = train_val_split(ds.ids(), val_fraction, tc.seed);
  } else {
    train_ids = ds.ids();
  }
  auto pick = [&](const std::vector<std::string>& ids) {
    std::vector<LabeledVolume> out;
    for (const auto& v : ds.volumes) {
      if (std::find(ids.begin(), ids.end(), v.id) != ids.end()) out.push_back(v);
    }
    return out;
  };
  const auto train = pick(train_ids);
  const auto val = pick(val_ids);

  json inputs = {{"data", c.f.data}};
  if (!c.f.stem.empty()) inputs["stem"] = c.f.stem;
  Run& run = c.start(claim_run_dir(c.f.out, "train"), "train", cfg, tc.seed, inputs);
  JsonlLog log(run.output("metrics.jsonl"));
  auto on_row = [&](const MetricsRow& r) {
    log.write(r.to_json());
    c.progress("step " + std::to_string(r.step) + " loss " + fmt("%.4f", r.loss) + " " + r.split +
               " dice " + fmt("%.4f", r.metrics.dice) + " lr " + fmt("%.3g", r.lr));
  };
  TrainResult result;
  try {
    result = train_downstream(net, std::move(params), train, val, tc, on_row);
  } catch (const TrainingDiverged& e) {
    run.finish("failed", e.what());
    *c.err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  Checkpoint ck;
  ck.arch = arch;
  ck.params = std::move(result.best_params);
  ck.meta = {{"kind", "model"},
             {"config", cfg},
             {"best_step", result.best_step},
             {"best_val_dice", result.best_val_dice},
             {"iterations", result.iterations},
             {"train_ids", train_ids},
             {"val_ids", val_ids}};
  save_checkpoint(ck, run.output("model.ckpt"));
  run.summary() = {{"best_step", result.best_step},
                   {"best_val_dice", result.best_val_dice},
                   {"iterations", result.iterations},
                   {"skipped_steps", result.skipped_steps}};
  run.finish("ok");
  *c.out << run.dir().string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(Context& c) {
  json cfg = layered(c, {{"patch", json::array()}});
  if (c.given("--patch")) cfg["patch"] = parse_extent(c.f.patch, "--patch");
  if (c.f.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  require_data(c);

  const Checkpoint ck = load_checkpoint(c.f.checkpoint);
  Extent3 patch{16, 16, 16};
  try {
    if (!cfg.at("patch").empty()) {
      patch = cfg.at("patch").get<Extent3>();
    } else if (ck.meta.contains("config") && ck.meta["config"].contains("train")) {
      patch = ck.meta["config"]["train"].at("patch").get<Extent3>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval patch: ") + e.what());
  }
  cfg["patch"] = patch;
  const Dataset ds = read_dataset(c.f.data);
  if (ds.num_classes != ck.arch.num_classes || ds.channels != ck.arch.in_channels) {
    throw ConfigError("checkpoint expects " + std::to_string(ck.arch.in_channels) +
                      " channels and " + std::to_string(ck.arch.num_classes) +
                      " classes; the dataset has " + std::to_string(ds.channels) + " and " +
                      std::to_string(ds.num_classes));
  }
  const Network<float> net(ck.arch);

  Run& run = c.start(claim_run_dir(c.f.out, "eval"), "eval", cfg, 0,
          {{"data", c.f.data}, {"checkpoint", c.f.checkpoint}});
  ConfusionCounter pooled(ds.num_classes);
  json volumes = json::array();
  for (const auto& v : ds.volumes) {
    const LabelTensor pred = predict_labels(net, ck.params, v.image, patch);
    pooled.add(pred, v.labels);
    const Metrics m = compute_metrics(pred, v.labels, ds.num_classes);
    volumes.push_back({{"id", v.id}, {"dice", m.dice}, {"precision", m.precision}, {"recall", m.recall}});
    c.progress(v.id + " dice " + fmt("%.4f", m.dice));
  }
  const Metrics m = pooled.metrics();
  const std::string table = metrics_tsv(m);
  write_file(run.output("metrics.tsv"), table);
  json report = metrics_json(m);
  report["volumes"] = volumes;
  write_file(run.output("metrics.json"), report.dump(2) + "\n");
  run.summary() = {{"dice", m.dice}, {"precision", m.precision}, {"recall", m.recall}};
  run.finish("ok");
  *c.out << table;
  return kExitOk;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(Context& c) {
  json cfg = layered(c, {{"scope", "all"}, {"seeds", 20}, {"base_seed", 1}, {"params_per_seed", 10}});
  if (c.given("--scope")) cfg["scope"] = c.f.scope;
  if (c.given("--seeds")) cfg["seeds"] = c.f.grad_seeds;
  if (c.given("--seed")) cfg["base_seed"] = c.f.seed;
  if (c.given("--params-per-seed")) cfg["params_per_seed"] = c.f.params_per_seed;
  GradSuiteOptions o;
  try {
    o.scope = parse_grad_scope(cfg.at("scope").get<std::string>());
    o.seeds = cfg.at("seeds").get<std::size_t>();
    o.base_seed = cfg.at("base_seed").get<std::uint64_t>();
    o.network_params_per_seed = cfg.at("params_per_seed").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gradcheck config: ") + e.what());
  }
  if (o.seeds == 0) throw ConfigError("--seeds must be >= 1");

  Run& run = c.start(claim_run_dir(c.f.out, "gradcheck"), "gradcheck", cfg, o.base_seed, json::object());
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(o);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::ostringstream os;
  os << "operation\tworst_rel_error\ttolerance\tchecked\tskipped\tseeds\tstatus\n";
  bool all = true;
  for (const auto& r : results) {
    all = all && r.passed;
    os << r.name << '\t' << fmt("%.3e", r.worst_rel_error) << '\t' << fmt("%.0e", r.tolerance)
       << '\t' << r.checked << '\t' << r.skipped << '\t' << r.seeds << '\t'
       << (r.passed ? "PASS" : "FAIL") << '\n';
  }
  write_file(run.output("gradcheck.tsv"), os.str());
  run.summary() = {{"operations", results.size()}, {"all_passed", all}, {"seconds", secs}};
  run.finish(all ? "ok" : "failed", all ? "" : "gradient check failed");
  *c.out << os.str();
  return all ? kExitOk : kExitFailed;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(Context& c) {
  json defaults = AblationConfig{}.to_json();
  defaults["table"] = "4";
  json cfg = layered(c, defaults);
  apply_train_flags(c, cfg["train"]);
  if (c.given("--seed") && c.given("--seeds")) throw ConfigError("give --seed or --seeds, not both");
  if (c.given("--seed")) cfg["seeds"] = std::vector<std::uint64_t>{c.f.seed};
  if (c.given("--seeds")) cfg["seeds"] = parse_seed_list(c.f.seeds);
  if (c.given("--folds")) cfg["folds"] = c.f.folds;
  if (c.given("--max-folds")) cfg["max_folds"] = c.f.max_folds;
  if (c.given("--val-fraction")) cfg["val_fraction"] = c.f.val_fraction;
  if (c.given("--arch")) cfg["arch"] = c.f.arch;
  if (c.given("--table")) cfg["table"] = c.f.table;
  if (c.given("--pretrain-steps")) cfg["pretrain"]["steps"] = c.f.pretrain_steps;
  if (c.given("--pretrain-lr")) cfg["pretrain"]["learning_rate"] = c.f.pretrain_lr;
  if (c.given("--patch")) cfg["pretrain"]["patch"] = parse_extent(c.f.patch, "--patch");
  // The per-run seeds come from the seed list; the section seeds are unused.
  cfg["train"]["seed"] = 0;
  cfg["pretrain"]["seed"] = 0;

  const AblationConfig ac = AblationConfig::from_json(cfg);
  ac.validate();
  const std::string table = cfg.at("table").is_string() ? cfg.at("table").get<std::string>() : "";
  if (table != "4" && table != "5") throw ConfigError("--table must be 4 or 5");
  const auto rows = table == "4" ? table4_rows() : table5_rows();

  const Dataset ds = load_data(c);
  if (ac.folds > ds.volumes.size()) {
    throw ConfigError(std::to_string(ac.folds) + " folds need at least as many volumes (dataset has " +
                      std::to_string(ds.volumes.size()) + ")");
  }

  Run& run = c.start(claim_run_dir(c.f.out, "ablate"), "ablate", cfg, ac.seeds.front(), {{"data", c.f.data}});
  JsonlLog results_log(run.output("results.jsonl"));
  JsonlLog pretext_log(run.output("pretext.jsonl"));
  const auto t0 = std::chrono::steady_clock::now();
  auto on_result = [&](const AblationResult& r) {
    results_log.write(r.to_json());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.progress(r.row + " seed " + std::to_string(r.seed) + " fold " + std::to_string(r.fold) +
               " test dice " + fmt("%.4f", r.test.dice) + " (" + fmt("%.0f", secs) + " s)");
  };
  auto on_pretext = [&](std::uint64_t seed, std::size_t fold, const PretextBatchRecord& r) {
    json j = r.to_json();
    j["seed"] = seed;
    j["fold"] = fold;
    pretext_log.write(j);
  };
  std::vector<AblationResult> results;
  try {
    results = run_ablation(ds, rows, ac, on_result, on_pretext);
  } catch (const NumericError& e) {
    run.finish("failed", e.what());
    *c.err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  const auto summary = summarize(results, rows);
  const std::string name = "table" + table;
  write_file(run.output(name + ".tsv"), summary_tsv(summary));
  write_file(run.output(name + "_runs.tsv"), results_tsv(results));

  json s = json::object();
  for (const auto& r : summary) s[r.row] = {{"runs", r.runs}, {"dice", r.dice}};
  std::size_t collapsed = 0;
  for (const auto& r : results) collapsed += r.pretext_collapsed ? 1 : 0;
  s["pretext_collapsed_runs"] = collapsed;
  run.summary() = s;
  run.finish("ok");
  *c.out << summary_tsv(summary);
  return kExitOk;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--out", f.out, "Run directory (must be new or empty); default $" +
                                      std::string(kRunsRootEnv) + "/<command>-<time>");
  sub->add_option("--config", f.config, "JSON config file or a previous run.json");
  sub->add_flag("--quiet", f.quiet, "No progress lines on stderr");
}

void add_training(CLI::App* sub, Flags& f) {
  sub->add_option("--seed", f.seed, "Random seed");
  sub->add_option("--scale", f.scale, "Multiplier on --patience and --max-iters");
  sub->add_option("--patch", f.patch, "Patch extent: N or N,N,N");
  sub->add_option("--lr", f.lr, "Adam learning rate");
  sub->add_option("--decay-factor", f.decay, "Learning-rate factor on a validation plateau");
  sub->add_option("--patience", f.patience, "Plateau patience in iterations, before --scale");
  sub->add_option("--max-iters", f.max_iters, "Iteration budget, before --scale");
  sub->add_option("--eval-every", f.eval_every, "Validation interval (0: patience / 5)");
  sub->add_option("--batch", f.batch, "Patches per step");
  sub->add_option("--arch", f.arch, "micro or standard")->check(CLI::IsMember({"micro", "standard"}));
  sub->add_option("--val-fraction", f.val_fraction, "Fraction of volumes held out for validation");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised 3D capsule segmentation: data, training and experiments", "sscaps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", SSCAPS_VERSION);
  Context c;
  c.out = &out;
  c.err = &err;
  Flags& f = c.f;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  add_common(gen, f);
  gen->add_option("--tier", f.tier, "easy or hard")->check(CLI::IsMember({"easy", "hard"}));
  gen->add_option("--classes", f.classes, "Classes including background");
  gen->add_option("--channels", f.channels, "Image channels");
  gen->add_option("--count", f.count, "Number of volumes");
  gen->add_option("--extent", f.extent, "Volume extent: N or N,N,N (multiples of 8, >= 16)");
  gen->add_option("--seed", f.seed, "Generator seed");

  auto* pre = app.add_subcommand("pretrain", "Pretext pretraining of the stem");
  add_common(pre, f);
  pre->add_option("--data", f.data, "Dataset directory");
  pre->add_option("--seed", f.seed, "Random seed");
  pre->add_option("--lr", f.lr, "Adam learning rate");
  pre->add_option("--steps", f.steps, "Pretext batches");
  pre->add_option("--batch", f.batch, "Volumes per batch");
  pre->add_option("--patch", f.patch, "Patch extent: N or N,N,N");
  pre->add_option("--arch", f.arch, "micro or standard")->check(CLI::IsMember({"micro", "standard"}));

  auto* train = app.add_subcommand("train", "Downstream segmentation training");
  add_common(train, f);
  add_training(train, f);
  train->add_option("--data", f.data, "Dataset directory");
  train->add_option("--stem", f.stem, "Initialize the stem from this checkpoint (from pretrain)");
  train->add_option("--classes", f.classes, "Expected class count (checked against the data)");
  train->add_flag("--no-margin", f.no_margin, "Drop the margin loss");
  train->add_flag("--no-recon", f.no_recon, "Drop the reconstruction loss");
  train->add_flag("--no-ce", f.no_ce, "Drop the cross-entropy loss");
  train->add_flag("--no-stem", f.no_stem, "Feed the raw volume to the capsule encoder");
  train->add_flag("--caps4", f.caps4, "First capsule layer with a quarter of the capsule types");

  auto* ev = app.add_subcommand("eval", "Per-class Dice/precision/recall of a checkpoint");
  add_common(ev, f);
  ev->add_option("--checkpoint", f.checkpoint, "Model checkpoint (from train)");
  ev->add_option("--data", f.data, "Dataset directory");
  ev->add_option("--patch", f.patch, "Sliding-window patch (default: the training patch)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(gc, f);
  gc->add_option("--scope", f.scope, "tensor, capsules, losses, network or all")
      ->check(CLI::IsMember({"tensor", "capsules", "losses", "network", "all"}));
  gc->add_option("--seeds", f.grad_seeds, "Random instances per operation");
  gc->add_option("--seed", f.seed, "First seed");
  gc->add_option("--params-per-seed", f.params_per_seed, "Network parameters sampled per seed");

  auto* ab = app.add_subcommand("ablate", "Ablation grid with k-fold cross-validation");
  add_common(ab, f);
  add_training(ab, f);
  ab->add_option("--data", f.data, "Dataset directory");
  ab->add_option("--table", f.table, "4: component ablation, 5: pretext on/off")
      ->check(CLI::IsMember({"4", "5"}));
  ab->add_option("--seeds", f.seeds, "Comma-separated split/initialization seeds");
  ab->add_option("--folds", f.folds, "Cross-validation folds");
  ab->add_option("--max-folds", f.max_folds, "Run only the first N folds (0: all)");
  ab->add_option("--pretrain-steps", f.pretrain_steps, "Pretext batches per split");
  ab->add_option("--pretrain-lr", f.pretrain_lr, "Pretext learning rate");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  c.sub = app.get_subcommands().front();
  const std::string name = c.sub->get_name();
  try {
    adopt_manifest_inputs(c, name);
    if (name == "gen-data") return cmd_gen_data(c);
    if (name == "pretrain") return cmd_pretrain(c);
    if (name == "train") return cmd_train(c);
    if (name == "eval") return cmd_eval(c);
    if (name == "gradcheck") return cmd_gradcheck(c);
    return cmd_ablate(c);
  } catch (const ConfigError& e) {
    c.fail(e.what());
    err << "error: " << e.what() << "\n\n" << c.sub->help();
    return kExitUsage;
  } catch (const FormatError& e) {
    c.fail(e.what());
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    c.fail(e.what());
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const Error& e) {
    c.fail(e.what());
    err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
}

}  // namespace sscaps::cli

#include <doctest.h>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "golden_fixtures.hpp"
#include "helpers.hpp"

using namespace sscaps;
using sscaps::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

nlohmann::json manifest(const fs::path& dir) {
  return nlohmann::json::parse(std::ifstream(dir / cli::kRunManifestFile));
}

// Small dataset shared by the tests below.
fs::path make_data(const TempDir& root) {
  const fs::path data = root / "data";
  const Outcome o = invoke({"gen-data", "--out", data.string(), "--count", "3", "--extent", "16",
                            "--channels", "2", "--seed", "4", "--quiet"});
  REQUIRE_MESSAGE(o.code == cli::kExitOk, o.err);
  return data;
}

}  // namespace

TEST_CASE("cli: gen-data writes a dataset and a finished run manifest") {
  TempDir root("cli-gen");
  const fs::path data = make_data(root);
  CHECK(fs::exists(data / "manifest.json"));
  const auto m = manifest(data);
  CHECK(m.at("format") == cli::kRunManifestFormat);
  CHECK(m.at("subcommand") == "gen-data");
  CHECK(m.at("status") == "ok");
  CHECK(m.at("seed") == 4);
  CHECK(m.contains("started_at"));
  CHECK(m.contains("finished_at"));
  CHECK(m.at("config").at("count") == 3);
}

TEST_CASE("cli: usage errors exit 2 with help text") {
  TempDir root("cli-usage");
  const fs::path data = make_data(root);

  const Outcome off = invoke({"train", "--data", data.string(), "--out", (root / "t").string(),
                              "--no-margin", "--no-recon", "--no-ce", "--quiet"});
  CHECK(off.code == cli::kExitUsage);
  CHECK(off.err.find("loss") != std::string::npos);
  CHECK(off.err.find("Usage") != std::string::npos);

  CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
  CHECK(invoke({"train", "--lr", "abc"}).code == cli::kExitUsage);
  CHECK(invoke({}).code == cli::kExitUsage);

  // An explicit --out must be new or empty.
  const Outcome busy = invoke({"gen-data", "--out", data.string(), "--quiet"});
  CHECK(busy.code == cli::kExitUsage);

  const Outcome both = invoke({"train", "--data", data.string(), "--stem", "x.ckpt", "--no-stem",
                               "--out", (root / "u").string(), "--quiet"});
  CHECK(both.code == cli::kExitUsage);
}

TEST_CASE("cli: unreadable inputs exit 3") {
  TempDir root("cli-data");
  const Outcome o = invoke({"train", "--data", (root / "missing").string(), "--out",
                            (root / "t").string(), "--quiet"});
  CHECK(o.code == cli::kExitData);
  CHECK(o.err.find("missing") != std::string::npos);
  // Inputs are checked before a run directory is claimed.
  CHECK_FALSE(fs::exists(root / "t"));

  const Outcome e = invoke({"eval", "--checkpoint", (root / "none.ckpt").string(), "--data",
                            (root / "missing").string(), "--out", (root / "e").string(), "--quiet"});
  CHECK(e.code == cli::kExitData);
}

TEST_CASE("cli: gradcheck --scope losses passes") {
  TempDir root("cli-gc");
  const Outcome o = invoke({"gradcheck", "--scope", "losses", "--out", (root / "g").string(), "--quiet"});
  CHECK(o.code == cli::kExitOk);
  CHECK(fs::exists(root / "g" / "gradcheck.tsv"));
  CHECK(o.out.find("FAIL") == std::string::npos);
}

TEST_CASE("cli: pretrain, train with and without the stem, eval; reruns are bit-identical") {
  TempDir root("cli-flow");
  const fs::path data = make_data(root);
  const std::vector<std::string> common{"--data", data.string(), "--quiet"};
  const auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), common.begin(), common.end());
    return a;
  };

  const fs::path pre = root / "pre";
  REQUIRE(invoke(with({"pretrain", "--out", pre.string(), "--steps", "3", "--patch", "16"})).code == 0);
  CHECK(fs::exists(pre / "stem.ckpt"));
  CHECK(fs::exists(pre / "pretext.jsonl"));

  const std::vector<std::string> budget{"--max-iters", "6", "--eval-every", "3", "--patience", "4",
                                        "--lr", "1e-3", "--patch", "16", "--val-fraction", "0.34"};
  auto ssl = with({"train", "--out", (root / "ssl").string(), "--stem", (pre / "stem.ckpt").string()});
  ssl.insert(ssl.end(), budget.begin(), budget.end());
  auto plain = with({"train", "--out", (root / "plain").string()});
  plain.insert(plain.end(), budget.begin(), budget.end());
  REQUIRE(invoke(ssl).code == 0);
  REQUIRE(invoke(plain).code == 0);
  for (const char* run : {"ssl", "plain"}) {
    CHECK(fs::exists(root / run / "metrics.jsonl"));
    CHECK(fs::exists(root / run / "model.ckpt"));
  }
  CHECK(golden::read_bytes(root / "ssl" / "metrics.jsonl") !=
        golden::read_bytes(root / "plain" / "metrics.jsonl"));

  const Outcome ev = invoke(with({"eval", "--out", (root / "ev").string(), "--checkpoint",
                                  (root / "ssl" / "model.ckpt").string()}));
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("mean_fg") != std::string::npos);
  CHECK(fs::exists(root / "ev" / "metrics.tsv"));

  // Rerun each from its own manifest.
  for (const char* run : {"pre", "ssl"}) {
    const fs::path again = root / (std::string(run) + "2");
    const std::string sub = manifest(root / run).at("subcommand");
    const Outcome o = invoke({sub, "--config", (root / run / cli::kRunManifestFile).string(), "--out",
                              again.string(), "--quiet"});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    for (const auto& e : fs::directory_iterator(root / run)) {
      const std::string name = e.path().filename().string();
      if (name == cli::kRunManifestFile) continue;
      CHECK_MESSAGE(golden::read_bytes(e.path()) == golden::read_bytes(again / name), name);
    }
    CHECK(manifest(again).at("config") == manifest(root / run).at("config"));
  }
}

TEST_CASE("cli: runs land under the runs root when --out is omitted") {
  TempDir root("cli-root");
  setenv(cli::kRunsRootEnv, root.path().c_str(), 1);
  const Outcome a = invoke({"gradcheck", "--scope", "losses", "--seeds", "2", "--quiet"});
  const Outcome b = invoke({"gradcheck", "--scope", "losses", "--seeds", "2", "--quiet"});
  unsetenv(cli::kRunsRootEnv);
  CHECK(a.code == 0);
  CHECK(b.code == 0);
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(root.path())) {
    CHECK(e.path().filename().string().rfind("gradcheck-", 0) == 0);
    CHECK(fs::exists(e.path() / cli::kRunManifestFile));
    ++dirs;
  }
  CHECK(dirs == 2);
}

TEST_CASE("cli: config layering rejects unknown keys") {
  nlohmann::json base = {{"lr", 1.0}, {"train", {{"steps", 3}}}};
  cli::merge_config(base, {{"train", {{"steps", 7}}}});
  CHECK(base.at("train").at("steps") == 7);
  CHECK_THROWS_AS(cli::merge_config(base, {{"lrr", 2.0}}), ConfigError);
  CHECK_THROWS_AS(cli::merge_config(base, {{"train", {{"step", 1}}}}), ConfigError);
}

#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "uex/core/error.hpp"
#include "uex/core/rng.hpp"
#include "uex/cli/cli.hpp"
#include "uex/core/archive.hpp"
#include "uex/io/plot.hpp"

using namespace uex;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "uex");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uex_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const std::vector<std::string> kTinyData{"--size", "8", "--train-per-class", "6", "--test-per-class", "2",
                                         "--classes", "4", "--prior-classes", "2", "--downstream-classes", "2"};

std::vector<std::string> with_tiny(std::vector<std::string> a) {
  a.insert(a.end(), kTinyData.begin(), kTinyData.end());
  return a;
}

}  // namespace

TEST_CASE("stage and list parsing") {
  CHECK(cli::parse_stages("30,30,30") == std::array<int, 3>{30, 30, 30});
  CHECK(cli::parse_stages("1,0,2") == std::array<int, 3>{1, 0, 2});
  CHECK_THROWS(cli::parse_stages("1,2"));
  CHECK_THROWS(cli::parse_stages("a,b,c"));
  CHECK(cli::split_list("") == std::vector<std::string>{});
  CHECK(cli::split_list("stem,block1") == std::vector<std::string>{"stem", "block1"});
}

TEST_CASE("usage errors exit with 2") {
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"nonsense"}).code == 2);
  CHECK(invoke({"pretrain"}).code == 2);
  CHECK(invoke({"craft", "--out", "x", "--method", "other"}).code == 2);
  CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("validation and runtime errors exit with 1") {
  const fs::path d = scratch("errors");
  const auto bad_eps = invoke(with_tiny({"craft", "--out", (d / "b.uex").string(), "--eps", "0", "--stages", "0,0,1"}));
  CHECK(bad_eps.code == 1);
  CHECK(!bad_eps.err.empty());
  CHECK(invoke({"eval", "--data", "cifar10-downstream", "--data-root", (d / "nowhere").string(), "--out-dir",
                (d / "r").string()})
            .code == 1);
  CHECK(invoke({"diagnose", "--out-dir", (d / "diag").string()}).code == 1);
  CHECK(invoke(with_tiny({"eval", "--out-dir", (d / "r").string(), "--bank", (d / "missing.uex").string()})).code == 1);
  CHECK(invoke(with_tiny({"eval", "--out-dir", (d / "r").string(), "--defense", "blur:2"})).code == 1);
  CHECK(!fs::exists(d / "r" / "report.json"));
  fs::remove_all(d);
}

TEST_CASE("dry run prints the manifest and writes nothing") {
  const fs::path d = scratch("dry");
  const auto r = invoke(with_tiny({"pretrain", "--dry-run", "--out", (d / "sub" / "p.ckpt").string()}));
  CHECK(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("command") == "pretrain");
  CHECK(j.at("config").at("data").at("name") == "glyphs-prior");
  CHECK(fs::is_empty(d));
  const auto c = invoke(with_tiny({"craft", "--dry-run", "--out", (d / "b.uex").string(), "--stages", "1,1,1"}));
  CHECK(c.code == 0);
  CHECK(fs::is_empty(d));
  fs::remove_all(d);
}

TEST_CASE("pretrain, craft, eval and diagnose end to end") {
  const fs::path d = scratch("e2e");
  const std::string ck = (d / "p.ckpt").string(), ck2 = (d / "q.ckpt").string();
  const auto train = [&](const std::string& out) {
    return invoke(with_tiny({"pretrain", "--out", out, "--epochs", "1", "--base-width", "4", "--seed", "3",
                             "--deterministic"}));
  };
  REQUIRE(train(ck).code == 0);
  REQUIRE(train(ck2).code == 0);
  CHECK(read_file(ck) == read_file(ck2));
  CHECK(fs::exists(ck + ".manifest.json"));
  const auto man = nlohmann::json::parse(read_file(ck + ".manifest.json"));
  CHECK(man.at("outputs").size() == 1);
  CHECK(man.at("deterministic") == true);

  const std::string bank = (d / "bank.uex").string();
  const auto craft = invoke(with_tiny({"craft", "--method", "bait", "--surrogate", ck, "--out", bank, "--stages",
                                       "1,1,1", "--mode", "direct_bank", "--beta", "10", "--batch", "6"}));
  INFO(craft.err);
  REQUIRE(craft.code == 0);
  CHECK(fs::exists(bank));
  CHECK(fs::exists(bank + ".log.csv"));
  const std::string emn = (d / "emn.uex").string();
  CHECK(invoke(with_tiny({"craft", "--method", "emn", "--out", emn, "--alternations", "1", "--train-steps", "1",
                          "--pgd-steps", "1", "--base-width", "4"}))
            .code == 0);

  const fs::path rep = d / "rep";
  const auto ev = invoke(with_tiny({"eval", "--victim", "pretrained:" + ck, "--bank", bank, "--repeats", "2",
                                    "--epochs", "1", "--defense", "cutout:2", "--out-dir", rep.string()}));
  INFO(ev.err);
  REQUIRE(ev.code == 0);
  for (const char* f : {"report.json", "report.curves.csv", "summary.txt", "summary.csv", "manifest.json"})
    CHECK(fs::exists(rep / f));
  CHECK(invoke(with_tiny({"eval", "--bank", emn, "--repeats", "1", "--epochs", "1", "--base-width", "4",
                          "--out-dir", (d / "rep_emn").string()}))
            .code == 0);

  const auto ab = invoke(with_tiny({"ablate", "--mode", "freeze_each", "--victim", "pretrained:" + ck, "--repeats",
                                    "1", "--epochs", "1", "--out-dir", (d / "abl").string()}));
  CHECK(ab.code == 0);

  const fs::path diag = d / "diag";
  std::vector<std::string> dargs{"diagnose", "--craft-log", bank + ".log.csv", "--bank", bank, "--out-dir",
                                 diag.string()};
  for (const auto& e : fs::directory_iterator(rep))
    if (e.path().filename().string().rfind("report.trace", 0) == 0) {
      dargs.push_back("--trace");
      dargs.push_back(e.path().string());
    }
  CHECK(invoke(dargs).code == 0);
  CHECK(fs::exists(diag / "bank_grid.png"));
  CHECK(fs::exists(diag / "craft_accuracy.png"));

  const auto fx = invoke(with_tiny({"export-features", "--model", ck, "--out", (d / "f.csv").string()}));
  CHECK(fx.code == 0);
  CHECK(fx.out.find("silhouette") != std::string::npos);
  fs::remove_all(d);
}

TEST_CASE("png round trip") {
  Image img(5, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x) img.set(x, y, {static_cast<std::uint8_t>(x * 50), static_cast<std::uint8_t>(y * 80), 7});
  const fs::path p = fs::temp_directory_path() / "uex_png_test.png";
  write_png(p, img);
  const Image back = read_png(p);
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.rgb == img.rgb);
  fs::remove(p);
  CHECK_THROWS_AS(read_png(fs::temp_directory_path() / "uex_no_such.png"), IoError);
}

#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <sstream>

#include "uex/core/error.hpp"
#include "uex/core/rng.hpp"
#include "uex/core/archive.hpp"
#include "uex/eval/eval.hpp"

using namespace uex;
namespace fs = std::filesystem;

namespace {

SplitDataset tiny(int size = 8) {
  LoadOptions o;
  o.height = o.width = size;
  o.class_count = 3;
  o.train_per_class = 10;
  o.test_per_class = 4;
  return make_glyph_dataset(o);
}

VictimSpec tiny_victim(int epochs = 1) {
  VictimSpec v;
  v.arch.height = v.arch.width = 8;
  v.arch.base_width = 4;
  v.train.epochs = epochs;
  v.train.batch_size = 10;
  return v;
}

}  // namespace

TEST_CASE("mixup examples") {
  std::vector<float> a(12, 0.0f), b(12, 1.0f), out(12);
  mixup_images(out, a, b, 1.0);
  CHECK(out == a);
  mixup_images(out, a, b, 0.5);
  for (float v : out) CHECK(v == 0.5f);
  CHECK_THROWS_AS(mixup_images(out, a, b, 1.5), InvalidArgument);
}

TEST_CASE("cutout zeroes exactly mask x mask pixels per channel") {
  std::vector<float> img(3 * 32 * 32, 1.0f);
  cutout_image(img, 3, 32, 32, 5, 7, 8);
  for (int c = 0; c < 3; ++c) {
    int zeros = 0;
    for (int p = 0; p < 32 * 32; ++p) zeros += img[static_cast<std::size_t>(c * 1024 + p)] == 0.0f;
    CHECK(zeros == 64);
  }
  CHECK_THROWS_AS(cutout_image(img, 3, 32, 32, 28, 0, 8), InvalidArgument);
}

TEST_CASE("cutmix reports the uncovered fraction") {
  std::vector<float> dst(16 * 16, 0.0f), src(16 * 16, 1.0f);
  const double lambda = cutmix_images(dst, src, 1, 16, 16, 2, 3, 4, 8);
  CHECK(lambda == doctest::Approx(1.0 - 32.0 / 256.0));
  int ones = 0;
  for (float v : dst) ones += v == 1.0f;
  CHECK(ones == 32);
}

TEST_CASE("mixing defenses produce convex soft targets consistent with the pixels") {
  Rng rng(1);
  Tensor<float> px(Shape{6, 1, 4, 4});
  for (int i = 0; i < 6; ++i)
    for (auto& v : px.row(i)) v = static_cast<float>(i) / 5.0f;  // constant image i encodes its index
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  for (auto kind : {DefenseKind::mixup, DefenseKind::cutmix}) {
    DefenseSpec s;
    s.kind = kind;
    Tensor<float> p = px, t = one_hot<float>(labels, 3);
    apply_defense(p, t, s, rng);
    for (int i = 0; i < 6; ++i) {
      double sum = 0.0;
      for (float v : t.row(i)) {
        CHECK(v >= 0.0f);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0));
      // Mean pixel equals lambda * own + (1 - lambda) * partner; own weight is t[i][label_i] unless partner shares the class.
      double mean = 0.0;
      for (float v : p.row(i)) mean += v;
      mean /= 16.0;
      CHECK((mean >= -1e-6 && mean <= 1.0 + 1e-6));
    }
  }
}

TEST_CASE("jpeg at quality 100 stays within 0.05 per pixel") {
  // Measured with this codec (no chroma subsampling): about 0.018 worst case on glyphs and smooth images.
  LoadOptions o;
  o.height = o.width = 16;
  o.train_per_class = 5;
  o.test_per_class = 1;
  const SplitDataset d = make_glyph_dataset(o);
  Rng rng(4);
  Tensor<float> smooth(Shape{10, 3, 16, 16});
  for (int n = 0; n < 10; ++n) {
    const double a = rng.uniform(0, 6.28), b = rng.uniform(0, 6.28);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j)
          smooth[static_cast<std::size_t>(((n * 3 + c) * 16 + i) * 16 + j)] =
              static_cast<float>(0.5 + 0.3 * std::sin(a + 0.2 * i + c) * std::cos(b + 0.15 * j));
  }
  for (const Tensor<float>* x : std::initializer_list<const Tensor<float>*>{&d.train.pixels, &smooth}) {
    const Tensor<float> r = jpeg_roundtrip(*x, 100);
    CHECK(r.shape() == x->shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(r[i] - (*x)[i])));
    CHECK(worst <= 0.05);
  }
  const Tensor<float> low = jpeg_roundtrip(d.train.pixels, 10);
  CHECK(low.vec() != d.train.pixels.vec());
  Tensor<float> gray(Shape{2, 1, 8, 8}, 0.5f);
  CHECK(jpeg_roundtrip(gray, 90).shape() == gray.shape());
}

TEST_CASE("every defense preserves shape and pixel range") {
  Rng rng(7);
  for (const std::string spec : {"none", "cutout:4", "cutout:16", "mixup:1", "mixup:0.2", "cutmix:1", "jpeg:50", "jpeg:1"}) {
    CAPTURE(spec);
    const DefenseSpec s = DefenseSpec::parse(spec);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor<float> p(Shape{5, 3, 16, 16});
      for (auto& v : p.vec()) v = static_cast<float>(rng.below(4) == 0 ? rng.below(2) : rng.uniform());
      Tensor<float> t = one_hot<float>(std::vector<int>{0, 1, 2, 3, 4}, 5);
      apply_defense(p, t, s, rng);
      REQUIRE(p.shape() == Shape{5, 3, 16, 16});
      for (float v : p.vec()) REQUIRE((v >= 0.0f && v <= 1.0f));
    }
  }
}

TEST_CASE("defense spec parsing and validation") {
  CHECK(DefenseSpec::parse("jpeg:50").quality == 50);
  CHECK(DefenseSpec::parse("cutout:4").str() == "cutout:4");
  CHECK(DefenseSpec::parse("mixup:0.5").str() == "mixup:0.5");
  CHECK(DefenseSpec::parse("none").kind == DefenseKind::none);
  CHECK(DefenseSpec::from_json(DefenseSpec::parse("cutmix:2").to_json()).str() == "cutmix:2");
  CHECK_THROWS_AS(DefenseSpec::parse("blur:3"), InvalidArgument);
  CHECK_THROWS_AS(DefenseSpec::parse("jpeg:abc"), InvalidArgument);
  CHECK_THROWS_AS(DefenseSpec::parse("jpeg:0").validate(16, 16), InvalidArgument);
  CHECK_THROWS_AS(DefenseSpec::parse("jpeg:101").validate(16, 16), InvalidArgument);
  CHECK_THROWS_AS(DefenseSpec::parse("cutout:17").validate(16, 16), InvalidArgument);
  CHECK_THROWS_AS(DefenseSpec::parse("mixup:0").validate(16, 16), InvalidArgument);
}

TEST_CASE("zero bank and ratio 0 reproduce clean training exactly") {
  const SplitDataset d = tiny();
  const VictimSpec v = tiny_victim();
  const EvalReport clean = evaluate_unlearnability(nullptr, v, d, {}, 1.0, 2, 0);
  const PerturbationSource zero = PerturbationBank::zeros(3, 3, 8, 8, {8, 255});
  const EvalReport z = evaluate_unlearnability(&zero, v, d, {}, 1.0, 2, 0);
  CHECK(z.clean_test_runs == clean.clean_test_runs);
  PerturbationBank loud = PerturbationBank::zeros(3, 3, 8, 8, {8, 255});
  loud.deltas.fill(8.0f / 255.0f);
  const PerturbationSource ls = loud;
  const EvalReport r0 = evaluate_unlearnability(&ls, v, d, {}, 0.0, 2, 0);
  CHECK(r0.clean_test_runs == clean.clean_test_runs);
  CHECK(clean.seeds == std::vector<std::uint64_t>{0, 1});
  CHECK(clean.clean_test_runs.size() == 2);
  for (double a : clean.clean_test_runs) CHECK((a >= 0.0 && a <= 1.0));
  const EvalReport again = evaluate_unlearnability(nullptr, v, d, {}, 1.0, 2, 0);
  CHECK(again.clean_test_runs == clean.clean_test_runs);
  CHECK_THROWS_AS(evaluate_unlearnability(nullptr, v, d, {}, 1.0, 0, 0), InvalidArgument);
  const PerturbationSource wrong = PerturbationBank::zeros(4, 3, 8, 8, {8, 255});
  CHECK_THROWS_AS(evaluate_unlearnability(&wrong, v, d, {}, 1.0, 1, 0), InvalidArgument);
}

TEST_CASE("prior ablation cardinality and endpoints") {
  const SplitDataset d = tiny();
  VictimSpec v = tiny_victim();
  v.prior = build_model(v.arch, 3, RandomInit{9});
  v.prior->provenance = Provenance{"toy"};
  const auto fe = run_prior_ablation(nullptr, d, v, AblationMode::freeze_each, {}, 1.0, 1, 0);
  CHECK(fe.size() == body_groups(v.arch).size());
  CHECK(fe.front().label == "freeze:stem");
  const auto pr = run_prior_ablation(nullptr, d, v, AblationMode::progressive_replace, {}, 1.0, 1, 0);
  REQUIRE(pr.size() == body_groups(v.arch).size() + 1);
  CHECK(pr.front().label == "replace:none");
  CHECK(pr.back().label == "replace:stem-block4");
  CHECK(pr.back().victim.at("replaced").size() == body_groups(v.arch).size());
  CHECK(parse_ablation_mode(to_string(AblationMode::freeze_each)) == AblationMode::freeze_each);
}

TEST_CASE("report persistence and rendering") {
  const SplitDataset d = tiny();
  EvalReport r = evaluate_unlearnability(nullptr, tiny_victim(2), d, DefenseSpec::parse("cutout:4"), 1.0, 2, 3);
  r.label = "clean";
  const fs::path dir = fs::temp_directory_path() / "uex_report_test";
  fs::create_directories(dir);
  write_report(dir / "r.json", r);
  const EvalReport back = read_report(dir / "r.json");
  CHECK(back.to_json() == r.to_json());
  write_curves_csv(dir / "c.csv", r);
  std::istringstream csv(read_file(dir / "c.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 1 + 2 * 2);
  const std::vector<EvalReport> rs{r, back};
  const std::string table = render_summary_table(rs);
  CHECK(table.find("cutout:4") != std::string::npos);
  CHECK(table.find("clean test") != std::string::npos);
  CHECK(render_summary_csv(rs).find("clean,") != std::string::npos);
  CHECK_THROWS_AS(read_report(dir / "missing.json"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("silhouette against a hand-computed example") {
  // 1-D points {0, 1} in class 0 and {10, 11} in class 1.
  const Tensor<float> f(Shape{4, 1}, std::vector<float>{0, 1, 10, 11});
  const std::vector<int> l{0, 0, 1, 1};
  const double s0 = (10.5 - 1.0) / 10.5, s1 = (9.5 - 1.0) / 9.5;
  CHECK(silhouette(f, l) == doctest::Approx((s0 + s1 + s1 + s0) / 4.0));
  const Tensor<float> g(Shape{3, 1}, std::vector<float>{0, 1, 5});
  const std::vector<int> m{0, 0, 1};  // singleton cluster scores 0
  const double t0 = (5.0 - 1.0) / 5.0, t1 = (4.0 - 1.0) / 4.0;
  CHECK(silhouette(g, m) == doctest::Approx((t0 + t1) / 3.0));
}

TEST_CASE("feature export shape and byte stability") {
  const SplitDataset d = tiny();
  const ModelState m = build_model(tiny_victim().arch, 3, RandomInit{1});
  const fs::path a = fs::temp_directory_path() / "uex_feat_a.csv", b = fs::temp_directory_path() / "uex_feat_b.csv";
  export_features(m, d.test, a);
  export_features(m, d.test, b);
  const std::string text = read_file(a);
  CHECK(text == read_file(b));
  std::istringstream in(text);
  std::string line;
  int rows = 0;
  std::size_t cols = 0;
  while (std::getline(in, line)) {
    const std::size_t c = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (rows == 0) cols = c;
    CHECK(c == cols);
    ++rows;
  }
  const Tensor<float> f = extract_features(m, d.test.pixels);
  CHECK(rows == d.test.size() + 1);
  CHECK(cols == static_cast<std::size_t>(f.dim(1)) + 1);
  fs::remove(a);
  fs::remove(b);
}

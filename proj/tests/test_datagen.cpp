#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "oracle.hpp"

using namespace flip;
namespace fs = std::filesystem;

namespace {

SceneConfig small_config() {
  SceneConfig c;
  c.res_min = 48;
  c.res_max = 96;
  c.footprint_min = 2;
  c.footprint_max = 48;
  c.supersample = 1;
  return c;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("flip_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                         ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

SceneRecord sample_record(int i, bool with_prompt) {
  SceneRecord r;
  r.image_path = "img_" + std::to_string(i) + ".png";
  r.mask_path = "img_" + std::to_string(i) + "_mask.png";
  r.shape = "star";
  r.footprint = 12.345678901234567 * (i + 1);
  r.relative_area = 1.0 / (3.0 + i);
  if (with_prompt) r.prompt = GaussianPrompt::from_covariance(10.1 + i, 20.7, Cov2{30.3, -4.1 * i, 12.9});
  return r;
}

}  // namespace

TEST(Scenes, DeterministicPerIndex) {
  const SceneConfig cfg = small_config();
  for (int i = 0; i < 5; ++i) {
    const auto a = dataset_scene(cfg, 9, static_cast<std::uint64_t>(i));
    const auto b = dataset_scene(cfg, 9, static_cast<std::uint64_t>(i));
    EXPECT_EQ(a.image.rgb, b.image.rgb);
    EXPECT_EQ(a.mask.values, b.mask.values);
    EXPECT_EQ(a.record, b.record);
  }
  EXPECT_NE(dataset_scene(cfg, 9, 0).image.rgb, dataset_scene(cfg, 10, 0).image.rgb);
}

TEST(Scenes, ObjectsAreNonEmptyAndAtMostQuarterOfImage) {
  const SceneConfig cfg = small_config();
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const auto sc = gen_scene(cfg, rng);
    const double area = static_cast<double>(sc.mask.width) * sc.mask.height;
    const auto n = sc.mask.count();
    ASSERT_GT(n, 0u);
    ASSERT_LE(static_cast<double>(n), 0.25 * area);
    EXPECT_EQ(sc.record.relative_area, static_cast<double>(n) / area);
    EXPECT_GE(sc.image.width, cfg.res_min);
    EXPECT_LE(sc.image.width, cfg.res_max);
    EXPECT_EQ(sc.image.width, sc.image.height);
  }
}

TEST(Scenes, FootprintMedianNearGeometricMean) {
  SceneConfig cfg = small_config();
  cfg.res_min = cfg.res_max = 256;
  cfg.footprint_min = 4;
  cfg.footprint_max = 64;
  Rng rng(2);
  std::vector<double> f;
  for (int i = 0; i < 3000; ++i) f.push_back(gen_scene(cfg, rng).record.footprint);
  std::nth_element(f.begin(), f.begin() + f.size() / 2, f.end());
  const double median = f[f.size() / 2];
  EXPECT_NEAR(median, 16.0, 1.6);
}

TEST(Scenes, AllShapeFamiliesAppear) {
  const SceneConfig cfg = small_config();
  Rng rng(3);
  std::set<std::string> seen;
  for (int i = 0; i < 200; ++i) seen.insert(gen_scene(cfg, rng).record.shape);
  EXPECT_EQ(seen, (std::set<std::string>{"convex", "ellipse", "rectangle", "star"}));
}

TEST(Scenes, ConfigValidation) {
  SceneConfig c = small_config();
  c.footprint_max = 100;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.shapes.clear();
  EXPECT_THROW(c.validate(), Error);
  try {
    parse_shape("hexagon");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "bad-config");
  }
}

TEST(Manifest, RoundTrip) {
  std::vector<SceneRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(sample_record(i, i % 2 == 0));
  std::stringstream ss;
  write_manifest(recs, ss);
  EXPECT_EQ(read_manifest(ss), recs);
}

TEST(Manifest, EmptyManifest) {
  std::stringstream ss;
  write_manifest({}, ss);
  EXPECT_TRUE(read_manifest(ss).empty());
  std::stringstream blank;
  EXPECT_TRUE(read_manifest(blank).empty());
}

TEST(Manifest, MalformedLineNamesTheLine) {
  std::stringstream ss;
  write_manifest({sample_record(0, false)}, ss);
  ss.seekp(0, std::ios::end);
  ss << "a.png\tb.png\tstar\tnot-a-number\t0.1\t-\n";
  try {
    read_manifest(ss);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "bad-manifest");
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  std::stringstream short_line("a.png\tb.png\tstar\n");
  EXPECT_THROW(read_manifest(short_line), Error);
}

TEST(Dataset, FilesMatchScenes) {
  TempDir dir;
  const SceneConfig cfg = small_config();
  const auto recs = generate_dataset(cfg, 4, 5, dir.path(), 2);
  EXPECT_EQ(read_manifest((dir.path() / "manifest.tsv").string()), recs);
  for (int i = 0; i < 5; ++i) {
    const auto sc = dataset_scene(cfg, 4, static_cast<std::uint64_t>(i));
    const BinaryMask m = read_mask_png((dir.path() / recs[static_cast<std::size_t>(i)].mask_path).string());
    EXPECT_EQ(m.values, sc.mask.values);
    const Image img = read_image_png((dir.path() / recs[static_cast<std::size_t>(i)].image_path).string());
    EXPECT_EQ(img.width, sc.image.width);
  }
}

TEST(Evaluation, PerfectEmptyAndFailingPredictors) {
  TempDir dir;
  const auto recs = generate_dataset(small_config(), 5, 12, dir.path());
  const fs::path base = dir.path();
  const MaskPredictorFn perfect = [&](const Image&, const GaussianPrompt&, const SceneRecord& r) {
    return read_mask_png((base / r.mask_path).string());
  };
  const MaskPredictorFn empty = [](const Image& img, const GaussianPrompt&, const SceneRecord&) {
    return BinaryMask(img.width, img.height);
  };
  const EvalReport good = evaluate_dataset(perfect, recs, base);
  EXPECT_EQ(good.failed, 0u);
  EXPECT_DOUBLE_EQ(good.all.mean, 1.0);
  EXPECT_DOUBLE_EQ(good.all.stddev, 0.0);
  const EvalReport bad = evaluate_dataset(empty, recs, base);
  EXPECT_DOUBLE_EQ(bad.all.mean, 0.0);

  std::size_t small = 0;
  for (const auto& r : recs) small += r.relative_area < kSmallObjectArea;
  EXPECT_EQ(good.small.count, small);

  auto broken = recs;
  broken[3].image_path = "missing.png";
  const MaskPredictorFn throwing = [&](const Image& img, const GaussianPrompt& p, const SceneRecord& r) {
    if (r.mask_path == recs[5].mask_path) throw Error("io", "boom");
    return perfect(img, p, r);
  };
  const EvalReport partial = evaluate_dataset(throwing, broken, base);
  EXPECT_EQ(partial.failed, 2u);
  EXPECT_EQ(partial.all.count, 10u);
  EXPECT_TRUE(std::isnan(partial.iou[3]));
  EXPECT_TRUE(std::isnan(partial.iou[5]));
}

TEST(Evaluation, ShuffleInvarianceAndHeatmapPartition) {
  Rng rng(6);
  std::vector<SceneRecord> recs;
  std::vector<double> ious;
  for (int i = 0; i < 300; ++i) {
    SceneRecord r;
    r.footprint = std::exp(uniform(rng, 0, std::log(2048.0)));
    r.relative_area = std::exp(uniform(rng, std::log(1e-6), std::log(0.25)));
    recs.push_back(r);
    ious.push_back(i % 17 == 0 ? std::nan("") : uniform01(rng));
  }
  const EvalReport a = aggregate_report(recs, ious);
  std::vector<std::size_t> order(recs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<SceneRecord> r2;
  std::vector<double> i2;
  for (auto k : order) {
    r2.push_back(recs[k]);
    i2.push_back(ious[k]);
  }
  const EvalReport b = aggregate_report(r2, i2);
  EXPECT_NEAR(a.all.mean, b.all.mean, 1e-12);
  EXPECT_NEAR(a.all.stddev, b.all.stddev, 1e-12);
  EXPECT_EQ(a.small.count, b.small.count);
  EXPECT_EQ(a.heat_count, b.heat_count);

  std::size_t cells = 0;
  double weighted = 0;
  for (std::size_t x = 0; x < a.heat_count.size(); ++x)
    for (std::size_t y = 0; y < a.heat_count[x].size(); ++y) {
      cells += a.heat_count[x][y];
      if (a.heat_count[x][y]) weighted += a.heat_mean[x][y] * static_cast<double>(a.heat_count[x][y]);
    }
  EXPECT_EQ(cells, a.total - a.failed);
  EXPECT_NEAR(weighted / static_cast<double>(cells), a.all.mean, 1e-12);
}

TEST(Evaluation, ReportFormats) {
  std::vector<SceneRecord> recs(3);
  recs[0].relative_area = 0.001;
  recs[0].footprint = 10;
  recs[1].relative_area = 0.2;
  recs[1].footprint = 300;
  recs[2].relative_area = 0.05;
  recs[2].footprint = 40;
  const EvalReport rep = aggregate_report(recs, {0.5, 1.0, std::nan("")});
  std::ostringstream csv;
  write_heatmap_csv(rep, csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "footprint_edges,0,8,16,32,64,128,256,inf");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("relative_area_edges,0,", 0), 0u);
  std::getline(in, line);
  EXPECT_EQ(line, "mean_iou");
  std::getline(in, line);  // area bin 0
  std::getline(in, line);
  std::getline(in, line);
  std::getline(in, line);  // area bin 3: [1e-3, 1e-2), footprint bin 1: [8, 16)
  EXPECT_EQ(line, "area_bin_3,,0.500000,,,,,");

  std::ostringstream sum;
  write_report_summary(rep, sum);
  EXPECT_NE(sum.str().find("records 3\nfailed 1\nmean_iou 0.750000"), std::string::npos) << sum.str();
  EXPECT_NE(sum.str().find("small_count 1\nsmall_mean_iou 0.500000"), std::string::npos);
}

TEST(Evaluation, PromptJitterIsSeededPerRecord) {
  TempDir dir;
  const auto recs = generate_dataset(small_config(), 7, 4, dir.path());
  std::vector<GaussianPrompt> seen;
  const MaskPredictorFn capture = [&](const Image& img, const GaussianPrompt& p, const SceneRecord&) {
    seen.push_back(p);
    return BinaryMask(img.width, img.height);
  };
  EvalOptions opt;
  opt.prompt_jitter = true;
  opt.seed = 3;
  evaluate_dataset(capture, recs, dir.path(), opt);
  const auto first = seen;
  seen.clear();
  evaluate_dataset(capture, recs, dir.path(), opt);
  EXPECT_EQ(seen, first);
  const auto truth = mask_moments(read_mask_png((dir.path() / recs[0].mask_path).string()));
  EXPECT_NE(first[0], truth);
}

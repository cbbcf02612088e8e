#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "tconv/bench.hpp"
#include "tconv/viz.hpp"
#include "test_util.hpp"

namespace tconv {
namespace {

TEST(Quantile, InterpolatesOrderStatistics) {
  EXPECT_DOUBLE_EQ(quantile({5, 1, 3, 2, 4}, 0.5), 3);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({10, 20, 30, 40, 50}, 0.1), 14);
  EXPECT_DOUBLE_EQ(quantile({7}, 0.9), 7);
  EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
}

TEST(Bench, CountsIncreases) {
  EXPECT_EQ(count_increases({4, 3, 3, 1}), 0u);
  EXPECT_EQ(count_increases({4, 5, 3, 4}), 2u);
}

TEST(Bench, RowsAndStageInvariants) {
  BenchConfig cfg;
  cfg.in_channels = 8;
  cfg.out_channels = 16;
  cfg.image = 8;
  cfg.reps = 5;
  const auto rows = run_benchmark(cfg);
  ASSERT_EQ(rows.size(), 8u);
  const std::vector<std::size_t> expected_m = {12, 8, 8, 8};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    EXPECT_EQ(r.impl, i % 2 ? "two_stage" : "dense");
    EXPECT_EQ(r.templates, i % 2 ? expected_m[i / 2] : 16u);
    EXPECT_LE(r.p10, r.median_us);
    EXPECT_LE(r.median_us, r.p90);
    EXPECT_LE(r.stage_gather + r.stage_template + r.stage_transform, r.median_us);
    if (r.impl == "dense") {
      EXPECT_EQ(r.stage_transform, 0.0);
    }
  }
  std::ostringstream os;
  write_bench_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "rate,impl,median_us,p10,p90,stage_gather,stage_template,stage_transform");
  cfg.reps = 4;
  EXPECT_THROW(run_benchmark(cfg), std::invalid_argument);
}

TEST(GrayLevel, ZerosAreBlackAndRangeIsStretched) {
  ValueRange r;
  for (double v : {-2.0, 0.0, 2.0}) r.include(v);
  EXPECT_EQ(r.lo, -2.0);
  EXPECT_EQ(gray_level(0.0, r), 0);
  EXPECT_EQ(gray_level(-2.0, r), 1);
  EXPECT_EQ(gray_level(2.0, r), 255);
  EXPECT_EQ(gray_level(1e-300, r), 128);
  EXPECT_EQ(gray_level(3.0, ValueRange{}), 255);
}

TEST(RenderFilters, LayoutAndSeparators) {
  std::mt19937_64 rng(1);
  auto w = testing::random_tensor({5, 2, 3, 3}, rng);
  const auto img = render_filters(w, nonzero_range({&w}, 0));
  EXPECT_EQ(img.rows, 3u);
  EXPECT_EQ(img.cols, 5u * 3 + 4);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t n = 1; n < 5; ++n) EXPECT_EQ(img.at(r, n * 4 - 1), kSeparator);
  EXPECT_THROW(render_filters(w, ValueRange{}, 2), ShapeError);
}

TEST(RenderFilters, AllZeroFilterIsBlack) {
  std::mt19937_64 rng(2);
  auto w = testing::random_tensor({3, 1, 3, 3}, rng);
  for (double& v : w.item(1)) v = 0;
  const auto img = render_filters(w, nonzero_range({&w}, 0));
  for (auto px : tile_bytes(img, 3, 1)) EXPECT_EQ(px, 0);
  for (auto px : tile_bytes(img, 3, 0)) EXPECT_GT(px, 0);
}

TEST(FilterVariants, IdentityTilesMatchOriginalAtOneGroup) {
  std::mt19937_64 rng(3);
  for (auto f : {TransformFamily::Scalar, TransformFamily::Rotation, TransformFamily::Affine}) {
    auto w = testing::random_tensor({8, 4, 3, 3}, rng);
    const std::vector<std::size_t> kept = {1, 4, 6};
    const auto layer = from_dense(w, kept, f, 1, ConvGeometry::square(3, 1, 1));
    const auto v = filter_variants(w, layer);
    const auto img = render_variants(v);
    for (std::size_t n = 0; n < 8; ++n) {
      const bool is_kept = std::find(kept.begin(), kept.end(), n) != kept.end();
      EXPECT_EQ(tile_bytes(img.reconstructed, 3, n) == tile_bytes(img.original, 3, n), is_kept)
          << "output " << n;
      if (is_kept) {
        EXPECT_EQ(tile_bytes(img.zeroed, 3, n), tile_bytes(img.original, 3, n));
      } else {
        for (auto px : tile_bytes(img.zeroed, 3, n)) EXPECT_EQ(px, 0);
      }
    }
  }
}

TEST(FilterVariants, RejectsMismatchedSource) {
  std::mt19937_64 rng(4);
  auto w = testing::random_tensor({4, 2, 3, 3}, rng);
  const auto layer = from_dense(w, {0}, TransformFamily::Scalar, 1, ConvGeometry::square(3, 1, 1));
  EXPECT_THROW(filter_variants(testing::random_tensor({5, 2, 3, 3}, rng), layer), ShapeError);
}

TEST(Pgm, RoundTripAndHeader) {
  GrayImage img{2, 3, {0, 1, 2, 253, 254, 255}};
  std::stringstream ss;
  write_pgm(ss, img);
  EXPECT_EQ(ss.str().substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(ss.str().size(), 11u + 6);
  EXPECT_EQ(read_pgm(ss), img);
  std::stringstream bad("P2\n3 2\n255\n");
  EXPECT_THROW(read_pgm(bad), FormatError);
  std::stringstream cut("P5\n3 2\n255\nabc");
  EXPECT_THROW(read_pgm(cut), FormatError);
}

TEST(FilterValuesCsv, OneRowPerTap) {
  std::mt19937_64 rng(5);
  auto w = testing::random_tensor({2, 1, 3, 3}, rng);
  const auto layer = from_dense(w, {0}, TransformFamily::Scalar, 1, ConvGeometry::square(3, 1, 1));
  std::ostringstream os;
  write_filter_values_csv(os, filter_variants(w, layer), 4);
  const std::string s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1 + 3 * 2 * 9);
  EXPECT_NE(s.find("4,zeroed,1,2,2,0\n"), std::string::npos);
}

}  // namespace
}  // namespace tconv

#include <gtest/gtest.h>

#include <random>

#include "tconv/conv.hpp"
#include "tconv/serialize.hpp"
#include "test_util.hpp"

namespace tconv {
namespace {

using testing::random_tensor;

TEST(Conv2dReference, PointwiseScaling) {
  Tensor4<double> x(1, 1, 3, 3, 1.0);
  Tensor4<double> w(1, 1, 1, 1, 2.0);
  auto y = conv2d_reference(x, w, ConvGeometry::square(1));
  ASSERT_EQ(y.shape(), (Shape4{1, 1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2dReference, PaddedBoxFilter) {
  Tensor4<double> x(Shape4{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor4<double> w(1, 1, 3, 3, 1.0);
  auto y = conv2d_reference(x, w, ConvGeometry::square(3, 1, 1));
  ASSERT_EQ(y.shape(), (Shape4{1, 1, 2, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 10.0);
}

TEST(Conv2dReference, GroupedIsBlockDiagonal) {
  const double a = 1.5, b = -2.0, w1 = 3.0, w2 = 0.25;
  Tensor4<double> x(Shape4{1, 2, 1, 1}, {a, b});
  Tensor4<double> w(Shape4{2, 1, 1, 1}, {w1, w2});
  auto y = conv2d_reference(x, w, ConvGeometry::square(1, 1, 0, 2));
  EXPECT_EQ(y[0], a * w1);
  EXPECT_EQ(y[1], b * w2);
}

TEST(Conv2dReference, OutputSizeFormula) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({1, 1, 7, 9}, rng);
  auto w = random_tensor({1, 1, 3, 3}, rng);
  auto y = conv2d_reference(x, w, ConvGeometry::square(3, 2, 1));
  EXPECT_EQ(y.shape().h, (7 + 2 - 3) / 2 + 1);
  EXPECT_EQ(y.shape().w, (9 + 2 - 3) / 2 + 1);
}

TEST(Conv2dReference, Errors) {
  Tensor4<double> x(1, 3, 4, 4);
  EXPECT_THROW(conv2d_reference(x, Tensor4<double>(2, 2, 3, 3), ConvGeometry::square(3)),
               ShapeError);
  EXPECT_THROW(conv2d_reference(x, Tensor4<double>(3, 3, 3, 3), ConvGeometry::square(3, 1, 0, 3)),
               ShapeError);
  EXPECT_THROW(conv2d_reference(x, Tensor4<double>(2, 3, 3, 3), ConvGeometry::square(5)),
               ShapeError);
  EXPECT_THROW(conv2d_reference(Tensor4<double>(1, 3, 2, 2), Tensor4<double>(2, 3, 5, 5),
                                ConvGeometry::square(5)),
               GeometryError);
  try {
    conv2d_reference(x, Tensor4<double>(2, 2, 3, 3), ConvGeometry::square(3));
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos);
  }
}

TEST(Conv2dReference, LinearInInput) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = testing::pick(rng, 1, 4), k = 2 * testing::pick(rng, 0, 2) + 1;
    const Shape4 xs{2, c, testing::pick(rng, k, 8), testing::pick(rng, k, 8)};
    const auto geom = ConvGeometry::square(k, testing::pick(rng, 1, 2), testing::pick(rng, 0, 1));
    auto x1 = random_tensor(xs, rng), x2 = random_tensor(xs, rng);
    auto w = random_tensor({3, c, k, k}, rng);
    const double alpha = 0.7, beta = -1.3;
    Tensor4<double> mix(xs);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x1[i] + beta * x2[i];
    auto y = conv2d_reference(mix, w, geom);
    auto y1 = conv2d_reference(x1, w, geom), y2 = conv2d_reference(x2, w, geom);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double expect = alpha * y1[i] + beta * y2[i];
      EXPECT_NEAR(y[i], expect, 1e-12 * (1 + std::abs(expect)));
    }
  }
}

TEST(Conv2dReference, PermutationWeightPermutesChannels) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 4, 5, 5}, rng);
  const std::size_t perm[] = {2, 0, 3, 1};
  Tensor4<double> w(4, 4, 1, 1);
  for (std::size_t o = 0; o < 4; ++o) w(o, perm[o], 0, 0) = 1.0;
  auto y = conv2d_reference(x, w, ConvGeometry::square(1));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y(n, o, i, j), x(n, perm[o], i, j));
}

TEST(GatherOffsets, UnitKernelIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 4, 5}, rng);
  EXPECT_EQ(gather_offsets(x, ConvGeometry::square(1)), x);
}

TEST(GatherOffsets, PaddedSinglePixel) {
  Tensor4<double> x(Shape4{1, 1, 1, 1}, {7.0});
  auto g = gather_offsets(x, ConvGeometry::square(3, 1, 1));
  ASSERT_EQ(g.shape(), (Shape4{1, 9, 1, 1}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(g[i], i == 4 ? 7.0 : 0.0);
}

TEST(GatherOffsets, ContractionMatchesReferenceExactly) {
  std::mt19937_64 rng(17);
  auto x = random_tensor({1, 2, 4, 4}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  const auto geom = ConvGeometry::square(3);
  auto ref = conv2d_reference(x, w, geom);
  EXPECT_EQ(contract_gathered(gather_offsets(x, geom), w, geom), ref);
  EXPECT_EQ(conv2d(x, w, geom), ref);
}

TEST(GatherOffsets, RandomGeometriesMatchReferenceExactly) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t groups = testing::pick(rng, 1, 3);
    const std::size_t cg = testing::pick(rng, 1, 3);
    const std::size_t k = testing::pick(rng, 1, 4);
    const std::size_t outs = groups * testing::pick(rng, 1, 3);
    const ConvGeometry geom{k, k, testing::pick(rng, 1, 3), testing::pick(rng, 0, 2), groups};
    const Shape4 xs{testing::pick(rng, 1, 2), groups * cg, testing::pick(rng, k, 9),
                    testing::pick(rng, k, 9)};
    auto x = random_tensor(xs, rng);
    auto w = random_tensor({outs, cg, k, k}, rng);
    auto ref = conv2d_reference(x, w, geom);
    EXPECT_EQ(contract_gathered(gather_offsets(x, geom), w, geom), ref) << "trial " << trial;
    EXPECT_EQ(conv2d(x, w, geom), ref) << "trial " << trial;
  }
}

TEST(GatherOffsets, GatherEntriesFollowIndexFormula) {
  std::mt19937_64 rng(29);
  auto x = random_tensor({1, 2, 5, 6}, rng);
  const auto geom = ConvGeometry::square(3, 2, 1);
  auto g = gather_offsets(x, geom);
  for (std::size_t kh = 0; kh < 3; ++kh)
    for (std::size_t kw = 0; kw < 3; ++kw)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t oy = 0; oy < g.shape().h; ++oy)
          for (std::size_t ox = 0; ox < g.shape().w; ++ox) {
            const long iy = static_cast<long>(oy * 2 + kh) - 1;
            const long ix = static_cast<long>(ox * 2 + kw) - 1;
            const double expect = (iy < 0 || ix < 0 || iy >= 5 || ix >= 6)
                                      ? 0.0
                                      : x(0, c, static_cast<std::size_t>(iy),
                                          static_cast<std::size_t>(ix));
            EXPECT_EQ(g(0, gathered_channel(kh, kw, c, 3, 2), oy, ox), expect);
          }
}

TEST(ConvBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  const auto geom = ConvGeometry::square(3, 2, 1);
  auto x = random_tensor({2, 3, 6, 5}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto y = conv2d(x, w, geom);
  auto up = random_tensor(y.shape(), rng);
  auto grads = conv2d_backward(gather_offsets(x, geom), x.shape(), w, up, geom);
  const double h = 1e-5;
  auto loss = [&](const Tensor4<double>& xx, const Tensor4<double>& ww) {
    return testing::dot(conv2d_reference(xx, ww, geom), up);
  };
  std::vector<double> fd_w(w.size()), fd_x(x.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    auto wp = w, wm = w;
    wp[i] += h;
    wm[i] -= h;
    fd_w[i] = (loss(x, wp) - loss(x, wm)) / (2 * h);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    fd_x[i] = (loss(xp, w) - loss(xm, w)) / (2 * h);
  }
  EXPECT_LT(testing::relative_error(grads.weight.vector(), fd_w), 1e-8);
  EXPECT_LT(testing::relative_error(grads.input.vector(), fd_x), 1e-8);
}

TEST(BilinearSample, LatticePointsAreExact) {
  std::mt19937_64 rng(2);
  auto t = random_tensor({1, 1, 4, 3}, rng);
  GridView<double> g{t.data(), 4, 3};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_EQ(bilinear_sample(g, double(i), double(j)), t(0, 0, i, j));
}

TEST(BilinearSample, CentreOfCell) {
  const std::vector<double> v{0, 1, 2, 3};
  GridView<double> g{v, 2, 2};
  EXPECT_DOUBLE_EQ(bilinear_sample(g, 0.5, 0.5), 1.5);
}

TEST(BilinearSample, OutsideIsZero) {
  const std::vector<double> v{0, 1, 2, 3};
  GridView<double> g{v, 2, 2};
  EXPECT_EQ(bilinear_sample(g, -5.0, -5.0), 0.0);
  EXPECT_EQ(bilinear_sample(g, 1e9, 0.0), 0.0);
  // Half a pixel off the edge: only the in-grid neighbour contributes.
  EXPECT_DOUBLE_EQ(bilinear_sample(g, -0.5, 0.0), 0.5 * v[0]);
}

TEST(BilinearSample, LipschitzContinuity) {
  std::mt19937_64 rng(8);
  auto t = random_tensor({1, 1, 5, 5}, rng);
  GridView<double> g{t.data(), 5, 5};
  const double lip = 2 * max_abs(t);
  const double eps = 1e-6;
  std::uniform_real_distribution<double> coord(-1.5, 5.5);
  for (int i = 0; i < 500; ++i) {
    const double y = coord(rng), x = coord(rng);
    EXPECT_LE(std::abs(bilinear_sample(g, y, x) - bilinear_sample(g, y + eps, x)), lip * eps * 1.0001);
    EXPECT_LE(std::abs(bilinear_sample(g, y, x) - bilinear_sample(g, y, x + eps)), lip * eps * 1.0001);
  }
}

TEST(Tensor4, Invariants) {
  EXPECT_THROW(Tensor4<double>(Shape4{1, 2, 2, 2}, std::vector<double>(7)), ShapeError);
  Tensor4<double> t(2, 3, 4, 5);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_TRUE(t.all_finite());
}

TEST(TensorSerialization, RoundTripAndLayout) {
  std::mt19937_64 rng(4);
  auto t = random_tensor({2, 3, 1, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 16 + t.size() * 8);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 4);
  EXPECT_EQ(read_tensor(ss), t);

  std::stringstream truncated(bytes.substr(0, 20));
  EXPECT_THROW(read_tensor(truncated), FormatError);
}

}  // namespace
}  // namespace tconv

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "render_oracle.hpp"
#include "stormsplat/constraints.hpp"
#include "stormsplat/errors.hpp"
#include "stormsplat/flow.hpp"
#include "stormsplat/synth.hpp"
#include "test_support.hpp"

namespace stormsplat {
namespace {

using testing::random_group;

Image blob_image(int rows, int cols, double cy, double cx, double sigma) {
  Image img(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      img(i, j) = 50.0 * std::exp(-0.5 * (std::pow(i + 0.5 - cy, 2) + std::pow(j + 0.5 - cx, 2)) / (sigma * sigma));
    }
  }
  return img;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

TEST(Flow2D, IdenticalImagesGiveNearZeroFlow) {
  const auto a = blob_image(32, 32, 14, 17, 4);
  const auto f = flow_2d(a, a);
  EXPECT_LT(std::max(f.u.abs().maxCoeff(), f.v.abs().maxCoeff()), 1e-3);
}

TEST(Flow2D, ConstantImageGivesExactlyZero) {
  const Image a = Image::Constant(16, 16, 3.0);
  const auto b = blob_image(16, 16, 8, 8, 3);
  const auto f = flow_2d(a, b);
  EXPECT_EQ(f.u.abs().maxCoeff(), 0.0);
  EXPECT_EQ(f.v.abs().maxCoeff(), 0.0);
}

TEST(Flow2D, RecoversSyntheticTranslation) {
  SynthSpec spec;
  SynthBlob blob;
  blob.center = {12.0, 16.0, 0.5};
  blob.sigma = {4.0, 4.0, 1.0};
  blob.amplitude = 50.0;
  blob.velocity = {2.0, 0.0, 0.0};
  spec.blobs = {blob};
  const auto seq = synth_sequence(spec, 2, GridDims{1, 32, 32}).sequence;
  Image a(32, 32), b(32, 32);
  for (int h = 0; h < 32; ++h) {
    for (int w = 0; w < 32; ++w) {
      a(h, w) = seq.frames[0].at(0, h, w, 0);
      b(h, w) = seq.frames[1].at(0, h, w, 0);
    }
  }
  const auto f = flow_2d(a, b);
  std::vector<double> us, vs;
  for (int h = 10; h < 22; ++h) {
    for (int w = 8; w < 18; ++w) {
      us.push_back(f.u(h, w));
      vs.push_back(f.v(h, w));
    }
  }
  EXPECT_NEAR(median(us), 2.0, 0.25);
  EXPECT_NEAR(median(vs), 0.0, 0.25);
}

std::vector<Flow2> uniform(int count, int rows, int cols, double u, double v) {
  return std::vector<Flow2>(static_cast<std::size_t>(count),
                            Flow2{Image::Constant(rows, cols, u), Image::Constant(rows, cols, v)});
}

TEST(FuseFlow, ZeroAndConsistentAndMean) {
  const GridDims dims{2, 3, 4};
  const auto zero = fuse_flow(dims, uniform(2, 3, 4, 0, 0), uniform(3, 2, 4, 0, 0), uniform(4, 2, 3, 0, 0));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  const auto consistent = fuse_flow(dims, uniform(2, 3, 4, 2, 0), uniform(3, 2, 4, 2, 0), uniform(4, 2, 3, 0, 0));
  EXPECT_EQ(consistent.at(1, 2, 3), Eigen::Vector3d(2, 0, 0));
  const auto mean = fuse_flow(dims, uniform(2, 3, 4, 2, 0), uniform(3, 2, 4, 4, 0), uniform(4, 2, 3, 0, 0));
  EXPECT_EQ(mean.at(0, 1, 1).x(), 3.0);
  EXPECT_THROW(fuse_flow(dims, uniform(1, 3, 4, 0, 0), uniform(3, 2, 4, 0, 0), uniform(4, 2, 3, 0, 0)), ShapeError);
}

TEST(FuseFlow, RecoversRigidTranslationInInterior) {
  SynthSpec spec;
  SynthBlob blob;
  blob.center = {14.0, 15.0, 8.0};
  blob.sigma = {4.0, 3.5, 3.0};
  blob.amplitude = 50.0;
  blob.velocity = {1.5, -1.0, 0.5};
  spec.blobs = {blob};
  const GridDims dims{16, 32, 32};
  const auto result = synth_sequence(spec, 2, dims);
  const auto flow = pseudo_3d_flow(result.sequence.frames[0], result.sequence.frames[1]);
  Eigen::Vector3d err = Eigen::Vector3d::Zero();
  int n = 0;
  for (int d = 0; d < dims.depth; ++d) {
    for (int h = 0; h < dims.height; ++h) {
      for (int w = 0; w < dims.width; ++w) {
        // Interior: within 1.5 sigma of the blob center.
        const Eigen::Vector3d p(w + 0.5, h + 0.5, d + 0.5);
        if ((p - blob.center).cwiseQuotient(blob.sigma).norm() > 1.5) continue;
        err += (flow.at(d, h, w) - blob.velocity).cwiseAbs();
        ++n;
      }
    }
  }
  ASSERT_GT(n, 0);
  err /= n;
  EXPECT_LT(err.x(), 0.3);
  EXPECT_LT(err.y(), 0.3);
  EXPECT_LT(err.z(), 0.3);
}

TEST(LocalLoss, ClosedFormExamples) {
  FlowGrid flow(GridDims{2, 2, 2});
  Points3 prev(1, 3), cur(1, 3);
  prev << 0.5, 0.5, 0.5;
  cur << 1.5, 0.5, 0.5;
  const auto l = local_loss(prev, cur, flow);
  EXPECT_DOUBLE_EQ(l.value, 1.0);
  EXPECT_EQ(l.gradient.row(0), Eigen::RowVector3d(2, 0, 0));
  flow.set(0, 0, 0, {1.0, 0.0, 0.0});
  const auto zero = local_loss(prev, cur, flow);
  EXPECT_EQ(zero.value, 0.0);
  EXPECT_EQ(zero.gradient.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LocalLoss, MatchesScalarLoop) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(-1.0, 7.0), val(-2.0, 2.0);
  const GridDims dims{4, 5, 6};
  FlowGrid flow(dims);
  for (auto& v : flow.data()) v = val(rng);
  const int m = 50;
  Points3 prev(m, 3), cur(m, 3);
  for (int i = 0; i < m; ++i) {
    for (int a = 0; a < 3; ++a) {
      prev(i, a) = pos(rng);
      cur(i, a) = pos(rng);
    }
  }
  const auto l = local_loss(prev, cur, flow);
  double expected = 0.0;
  for (int i = 0; i < m; ++i) {
    const int w = std::clamp(static_cast<int>(std::floor(prev(i, 0))), 0, dims.width - 1);
    const int h = std::clamp(static_cast<int>(std::floor(prev(i, 1))), 0, dims.height - 1);
    const int d = std::clamp(static_cast<int>(std::floor(prev(i, 2))), 0, dims.depth - 1);
    const std::size_t k = 3 * ((static_cast<std::size_t>(d) * dims.height + h) * dims.width + w);
    for (int a = 0; a < 3; ++a) {
      const double r = cur(i, a) - prev(i, a) - flow.data()[k + static_cast<std::size_t>(a)];
      expected += r * r / m;
      EXPECT_NEAR(l.gradient(i, a), 2.0 * r / m, 1e-12);
    }
  }
  EXPECT_NEAR(l.value, expected, 1e-12);
  EXPECT_GE(l.value, 0.0);
}

RadarVolume constant_volume(const GridDims& dims, float c) {
  RadarVolume v(dims, 1);
  for (auto& x : v.values()) x = c;
  return v;
}

TEST(Target, ConstantsAndZero) {
  const GridDims dims{3, 4, 5};
  for (double p : target_distribution(constant_volume(dims, 0.0f), 2.0, 0.8).values) EXPECT_EQ(p, 0.0);
  for (double p : target_distribution(constant_volume(dims, 0.5f), 2.0, 0.8).values) EXPECT_NEAR(p, 0.5, 1e-12);
  for (double p : target_distribution(constant_volume(dims, 3.0f), 2.0, 0.8).values) EXPECT_EQ(p, 0.8);
}

TEST(Target, BlurPreservesMassAndMatchesDirectConvolution) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> val(0.0f, 10.0f);
  const GridDims dims{3, 5, 7};
  RadarVolume v(dims, 1);
  for (auto& x : v.values()) x = val(rng);
  const double sigma = 1.3;
  const auto blurred = gaussian_blur(v, sigma);
  double in = 0.0, out = 0.0;
  for (float x : v.values()) in += x;
  for (double x : blurred) out += x;
  EXPECT_NEAR(out, in, 1e-9 * in);

  // Direct 3-D convolution over an explicitly mirrored copy.
  const int r = 4;
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> k1(2 * r + 1);
  double ks = 0.0;
  for (int k = -r; k <= r; ++k) ks += k1[static_cast<std::size_t>(k + r)] = std::exp(-k * k / (2 * sigma * sigma));
  for (auto& k : k1) k /= ks;
  for (int d = 0; d < dims.depth; ++d) {
    for (int h = 0; h < dims.height; ++h) {
      for (int w = 0; w < dims.width; ++w) {
        double acc = 0.0;
        for (int a = -r; a <= r; ++a) {
          for (int b = -r; b <= r; ++b) {
            for (int c = -r; c <= r; ++c) {
              acc += k1[static_cast<std::size_t>(a + r)] * k1[static_cast<std::size_t>(b + r)] *
                     k1[static_cast<std::size_t>(c + r)] *
                     v.at(mirror(d + a, dims.depth), mirror(h + b, dims.height), mirror(w + c, dims.width), 0);
            }
          }
        }
        ASSERT_NEAR(blurred[dims.index(d, h, w)], acc, 1e-10);
      }
    }
  }
}

TEST(Target, DefaultTauIsScaledPercentile) {
  const GridDims dims{2, 2, 5};
  EXPECT_NEAR(default_tau(constant_volume(dims, 2.0f), 1.0), 1.6, 1e-12);
  EXPECT_EQ(default_tau(constant_volume(dims, 0.0f), 1.0), 1.0);
}

TEST(GlobalLoss, ZeroWhenRenderMatchesAndClosedFormWhenEmpty) {
  std::mt19937_64 rng(5);
  const GridDims dims{4, 5, 6};
  const auto g = random_group(rng, 5, 1, {0, 0, 0}, {6, 5, 4});
  TargetDistribution p;
  p.dims = dims;
  p.tau = 0.8;
  p.values = render_density(g, dims, p.tau);
  EXPECT_EQ(global_loss(g, p).value, 0.0);

  double s = 0.0;
  for (double x : p.values) s += x * x;
  GaussianGroup far = g;
  far.positions.col(0).array() += 1000.0;
  EXPECT_NEAR(global_loss(far, p).value, s / static_cast<double>(dims.voxel_count()), 1e-15);
}

TEST(GlobalLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const GridDims dims{4, 5, 5};
  auto g = random_group(rng, 4, 1, {1, 1, 1}, {4, 4, 3}, -0.3, 0.2);
  g.normalize_rotations();
  g.positions.array() += 0.05;
  const auto target_src = random_group(rng, 3, 1, {1, 1, 1}, {4, 4, 3});
  TargetDistribution p;
  p.dims = dims;
  p.tau = 1.5;
  p.values = render_density(target_src, dims, p.tau);
  const auto l = global_loss(g, p);
  const auto check = testing::check_gradients(g, l.gradient, [&](const GaussianGroup& x) { return global_loss(x, p).value; });
  EXPECT_LT(check.max_rel_error, 1e-4);
}

TEST(GlobalLoss, IncreasesAsGaussiansMoveAwayFromBlob) {
  const GridDims dims{8, 16, 16};
  RadarVolume v(dims, 1);
  for (int d = 0; d < dims.depth; ++d) {
    for (int h = 0; h < dims.height; ++h) {
      for (int w = 0; w < dims.width; ++w) {
        v.at(d, h, w, 0) = static_cast<float>(
            std::exp(-0.5 * (std::pow(w + 0.5 - 8, 2) + std::pow(h + 0.5 - 8, 2) + std::pow(d + 0.5 - 4, 2)) / 4.0));
      }
    }
  }
  const auto p = target_distribution(v, 1.0, 0.8);
  GaussianGroup g(1, 1);
  g.positions.row(0) << 8, 8, 4;
  g.log_scales.setConstant(std::log(2.0));
  double previous = global_loss(g, p).value;
  for (int step = 1; step <= 5; ++step) {
    g.positions(0, 0) += 1.0;
    const double now = global_loss(g, p).value;
    EXPECT_GT(now, previous) << "step " << step;
    previous = now;
  }
}

}  // namespace
}  // namespace stormsplat

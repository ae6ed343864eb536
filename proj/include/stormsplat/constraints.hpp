#pragma once

#include <vector>

#include "stormsplat/gaussians.hpp"
#include "stormsplat/renderer.hpp"
#include "stormsplat/volume.hpp"

namespace stormsplat {

enum class FlowLookup { nearest, trilinear };

struct LocalLoss {
  double value = 0.0;
  /// d value / d current positions.
  Points3 gradient;
};

/// Mean over Gaussians of |(x_cur - x_prev) - flow(x_prev)|^2, with the
/// reference flow looked up at the previous position.
LocalLoss local_loss(const Points3& previous, const Points3& current, const FlowGrid& flow,
                     FlowLookup lookup = FlowLookup::nearest);

/// Smoothed and clamped primary channel, values in [0, tau].
struct TargetDistribution {
  GridDims dims{};
  double tau = 1.0;
  std::vector<double> values;

  double at(int d, int h, int w) const { return values[dims.index(d, h, w)]; }
};

/// Separable Gaussian blur of one channel, radius ceil(3 sigma), kernel
/// normalized to one, half-sample symmetric reflection at the borders.
std::vector<double> gaussian_blur(const RadarVolume& volume, double sigma, int channel = 0);

TargetDistribution target_distribution(const RadarVolume& volume, double sigma, double tau, int channel = 0);

/// 0.8 x the 95th percentile (nearest rank) of blurred values above
/// `null_threshold`; 1.0 when no voxel qualifies.
double default_tau(const RadarVolume& volume, double sigma, double null_threshold = 0.0, int channel = 0);

struct GlobalLoss {
  double value = 0.0;
  GaussianGradients gradient;
};

/// Mean over voxels of (render_density(g, tau) - P)^2.
GlobalLoss global_loss(const GaussianGroup& group, const TargetDistribution& target, const RenderOptions& options = {});

}  // namespace stormsplat

#pragma once

#include <span>
#include <vector>

#include "stormsplat/image.hpp"

namespace stormsplat {

struct ImageLossWeights {
  double l1 = 1.0;
  double ssim = 0.2;
};

struct ImageLoss {
  double l1 = 0.0;
  double ssim = 0.0;
  double value = 0.0;
  /// d value / d rendered, same layout as the inputs.
  std::vector<double> gradient;
};

/// weights.l1 * mean|r - t| + weights.ssim * (1 - SSIM(r, t)) on images of
/// rows x cols x channels, both divided by `data_range` first. SSIM is
/// averaged over channels.
ImageLoss image_loss(std::span<const double> rendered, std::span<const double> truth, int rows, int cols,
                     int channels, double data_range, const ImageLossWeights& weights = {});

}  // namespace stormsplat

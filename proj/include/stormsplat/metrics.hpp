#pragma once

#include <map>
#include <string>
#include <vector>

#include "stormsplat/volume.hpp"

namespace stormsplat {

struct ErrorPair {
  double me = 0.0;
  double mae = 0.0;
};

/// Mean signed and absolute error over all voxels and channels.
ErrorPair me_mae(const RadarVolume& pred, const RadarVolume& truth);

/// 10 log10(range^2 / MSE), capped at 100 dB.
double psnr(const RadarVolume& pred, const RadarVolume& truth, double data_range);
double psnr_from_mse(double mse, double data_range);

/// 2-D SSIM of every z-slice and channel, averaged.
double ssim(const RadarVolume& pred, const RadarVolume& truth, double data_range);

struct Contingency {
  long hits = 0;
  long misses = 0;
  long false_alarms = 0;

  /// Hits / (hits + misses + false alarms); 1 when there are no events at all.
  double csi() const;
  Contingency& operator+=(const Contingency& other);
};

/// Binarize at `threshold`, max-pool each z-slice with a pool x pool window
/// at stride pool (partial windows at the edges included), then count.
Contingency pooled_contingency(const RadarVolume& pred, const RadarVolume& truth, double threshold, int pool = 4,
                               int channel = 0);
double csi_pooled(const RadarVolume& pred, const RadarVolume& truth, double threshold, int pool = 4, int channel = 0);

struct EvalOptions {
  std::vector<double> csi_thresholds{20.0, 30.0, 40.0};
  int pool = 4;
  /// Range used by PSNR and SSIM; zero means the maximum of the truth sequence.
  double data_range = 0.0;
};

struct FrameMetrics {
  double me = 0.0;
  double mae = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::map<double, double> csi;
};

/// Per-frame metrics plus aggregates. ME, MAE, PSNR and SSIM aggregates are
/// frame means; CSI aggregates pool the contingency counts of all frames.
struct EvalReport {
  std::vector<FrameMetrics> frames;
  FrameMetrics aggregate;
  double data_range = 0.0;

  /// Pretty-printed JSON with fixed key order.
  std::string to_json() const;
  std::string to_csv() const;
};

/// Throws ShapeError naming both counts when the sequences differ in length.
EvalReport evaluate(const std::vector<RadarVolume>& pred, const std::vector<RadarVolume>& truth,
                    const EvalOptions& options = {});

}  // namespace stormsplat

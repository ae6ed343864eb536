#include "stormsplat/constraints.hpp"

#include <algorithm>
#include <cmath>

#include "stormsplat/errors.hpp"

namespace stormsplat {

LocalLoss local_loss(const Points3& previous, const Points3& current, const FlowGrid& flow, FlowLookup lookup) {
  if (previous.rows() != current.rows()) throw ShapeError("local loss needs matching Gaussian counts");
  const Eigen::Index m = current.rows();
  LocalLoss out;
  out.gradient = Points3::Zero(m, 3);
  if (m == 0) return out;
  double total = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Vector3d p = previous.row(i).transpose();
    const Eigen::Vector3d ref = lookup == FlowLookup::nearest ? flow.nearest(p) : flow.trilinear(p);
    const Eigen::Vector3d r = current.row(i).transpose() - p - ref;
    total += r.squaredNorm();
    out.gradient.row(i) = (2.0 / static_cast<double>(m)) * r.transpose();
  }
  out.value = total / static_cast<double>(m);
  return out;
}

namespace {

// Half-sample symmetric reflection with period 2n: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
inline int reflect(int i, int n) {
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

void blur_axis(std::vector<double>& data, const GridDims& dims, int axis, const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  const int extent[3] = {dims.depth, dims.height, dims.width};
  const std::size_t stride[3] = {static_cast<std::size_t>(dims.height) * dims.width,
                                 static_cast<std::size_t>(dims.width), 1};
  const int n = extent[axis];
  std::vector<double> out(data.size(), 0.0);
  for (int d = 0; d < dims.depth; ++d) {
    for (int h = 0; h < dims.height; ++h) {
      for (int w = 0; w < dims.width; ++w) {
        const int pos[3] = {d, h, w};
        const std::size_t base = dims.index(d, h, w) - static_cast<std::size_t>(pos[axis]) * stride[axis];
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 data[base + static_cast<std::size_t>(reflect(pos[axis] + k, n)) * stride[axis]];
        }
        out[dims.index(d, h, w)] = acc;
      }
    }
  }
  data.swap(out);
}

}  // namespace

std::vector<double> gaussian_blur(const RadarVolume& volume, double sigma, int channel) {
  if (!(sigma > 0.0)) throw ValueError("blur sigma must be positive");
  if (channel < 0 || channel >= volume.channels()) throw ValueError("blur channel out of range");
  const auto& dims = volume.dims();
  std::vector<double> data(dims.voxel_count());
  for (int d = 0; d < dims.depth; ++d) {
    for (int h = 0; h < dims.height; ++h) {
      for (int w = 0; w < dims.width; ++w) data[dims.index(d, h, w)] = volume.at(d, h, w, channel);
    }
  }
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(k + radius)];
  }
  for (auto& k : kernel) k /= sum;
  for (int axis = 0; axis < 3; ++axis) blur_axis(data, dims, axis, kernel);
  return data;
}

TargetDistribution target_distribution(const RadarVolume& volume, double sigma, double tau, int channel) {
  if (!(tau > 0.0)) throw ValueError("target clamp tau must be positive");
  TargetDistribution p;
  p.dims = volume.dims();
  p.tau = tau;
  p.values = gaussian_blur(volume, sigma, channel);
  for (auto& v : p.values) v = std::min(v, tau);
  return p;
}

double default_tau(const RadarVolume& volume, double sigma, double null_threshold, int channel) {
  auto blurred = gaussian_blur(volume, sigma, channel);
  std::vector<double> kept;
  for (double v : blurred) {
    if (v > null_threshold) kept.push_back(v);
  }
  if (kept.empty()) return 1.0;
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(kept.size()))) - 1;
  std::nth_element(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(rank), kept.end());
  return 0.8 * kept[rank];
}

GlobalLoss global_loss(const GaussianGroup& group, const TargetDistribution& target, const RenderOptions& options) {
  if (target.values.size() != target.dims.voxel_count()) throw ShapeError("target distribution size mismatch");
  const auto density = render_density(group, target.dims, target.tau, options);
  const double v = static_cast<double>(density.size());
  std::vector<double> upstream(density.size());
  double total = 0.0;
  for (std::size_t k = 0; k < density.size(); ++k) {
    const double r = density[k] - target.values[k];
    total += r * r;
    upstream[k] = 2.0 * r / v;
  }
  GlobalLoss out;
  out.value = total / v;
  out.gradient = render_density_backward(group, target.dims, target.tau, upstream, options, density);
  return out;
}

}  // namespace stormsplat

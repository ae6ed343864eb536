#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "stormsplat/gaussians.hpp"
#include "stormsplat/volume.hpp"

namespace stormsplat {

/// A virtual imaging plane. Pixel (i, j) sits at
/// origin + (j + 0.5) * spacing * u + (i + 0.5) * spacing * v.
struct RenderPlane {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d u = Eigen::Vector3d::UnitX();
  Eigen::Vector3d v = Eigen::Vector3d::UnitY();
  int rows = 1;
  int cols = 1;
  double pixel_spacing = 1.0;
  /// Gaussians farther than this plus 3 sigma_max from the plane are culled.
  /// Infinity disables slab culling.
  double slab_half_width = 0.5;

  Eigen::Vector3d normal() const { return u.cross(v); }
  Eigen::Vector3d pixel_position(int i, int j) const {
    return origin + ((j + 0.5) * pixel_spacing) * u + ((i + 0.5) * pixel_spacing) * v;
  }
  /// Throws ValueError unless u, v are orthonormal (1e-9), rows/cols >= 1 and
  /// the slab half-width is positive.
  void validate() const;
};

/// Axis-aligned plane through the voxel centers of slice `index`, pixel grid
/// identical to `extract_slice`, slab half-width 0.5.
RenderPlane axis_slice(Axis axis, int index, const GridDims& dims);

struct RenderOptions {
  /// Pixel/Gaussian pairs with Mahalanobis distance squared above this bound
  /// are skipped; every skipped kernel value is below exp(-cutoff / 2) = 1e-12.
  double mahalanobis_cutoff = 2.0 * 27.631021115928547;
  int tile_size = 16;
  bool record_counts = false;
};

struct RenderOutput {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  /// rows x cols x channels, row-major.
  std::vector<double> image;
  /// Per-pixel number of contributing Gaussians when requested.
  std::vector<int> counts;

  double at(int i, int j, int c) const { return image[(static_cast<std::size_t>(i) * cols + j) * channels + c]; }
};

/// Gradients for every raw Gaussian parameter, laid out like GaussianGroup.
struct GaussianGradients {
  Points3 positions;
  FeatureMatrix features;
  Points3 log_scales;
  Quaternions rotations;

  static GaussianGradients zeros(Eigen::Index count, Eigen::Index feature_dim);
  GaussianGradients& operator+=(const GaussianGradients& other);
  GaussianGradients& operator*=(double factor);
  bool all_finite() const;
};

/// Additive cross-section: sum over non-culled Gaussians of the activated
/// features weighted by exp(-0.5 d^T Sigma^-1 d) at each pixel's 3-D position.
RenderOutput render_plane(const GaussianGroup& group, const RenderPlane& plane, const RenderOptions& options = {});

/// Vector-Jacobian product of render_plane. `upstream` has the image layout.
GaussianGradients render_plane_backward(const GaussianGroup& group, const RenderPlane& plane,
                                        std::span<const double> upstream, const RenderOptions& options = {});

/// min(sum_i exp(-0.5 d^T Sigma_i^-1 d), tau) at every voxel center, features ignored.
/// D x H x W, row-major.
std::vector<double> render_density(const GaussianGroup& group, const GridDims& dims, double tau,
                                   const RenderOptions& options = {});

/// Gradient of a voxelwise scalar through render_density; saturated voxels pass
/// no gradient. Feature gradients are zero. Passing the forward result as
/// `density` skips recomputing it.
GaussianGradients render_density_backward(const GaussianGroup& group, const GridDims& dims, double tau,
                                          std::span<const double> upstream, const RenderOptions& options = {},
                                          std::span<const double> density = {});

/// Activated features rendered at every voxel center (no slab culling).
RadarVolume render_volume(const GaussianGroup& group, const GridDims& dims, const RenderOptions& options = {});

/// Renders an axis slice into the SliceImage layout used for ground truth.
SliceImage render_slice(const GaussianGroup& group, Axis axis, int index, const GridDims& dims,
                        const RenderOptions& options = {});

}  // namespace stormsplat

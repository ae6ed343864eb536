#pragma once

#include <Eigen/Core>

#include <vector>

#include "stormsplat/image.hpp"
#include "stormsplat/volume.hpp"

namespace stormsplat {

/// Dense 2-D displacement: `u` along columns, `v` along rows, in pixels.
struct Flow2 {
  Image u;
  Image v;

  static Flow2 zeros(Eigen::Index rows, Eigen::Index cols) {
    return {Image::Zero(rows, cols), Image::Zero(rows, cols)};
  }
};

struct HornSchunckOptions {
  int levels = 3;
  double alpha = 10.0;
  int iterations = 100;
  int warps = 1;
};

/// Multi-scale Horn-Schunck flow taking `a` onto `b`. Each image is scaled to
/// a fixed peak by its own maximum first. A constant image on either side
/// gives exactly zero flow.
Flow2 flow_2d(const Image& a, const Image& b, const HornSchunckOptions& options = {});

/// Per-voxel mean of the plane flows through it: x from xoy and xoz slices,
/// y from xoy and yoz, z from xoz and yoz. `xy` holds one H x W flow per depth
/// index, `xz` one D x W flow per height index, `yz` one D x H flow per width
/// index.
FlowGrid fuse_flow(const GridDims& dims, const std::vector<Flow2>& xy, const std::vector<Flow2>& xz,
                   const std::vector<Flow2>& yz);

struct PseudoFlowOptions {
  HornSchunckOptions solver;
  /// Plane flows are solved on every k-th slice and copied to the others.
  int slice_stride = 4;
  int channel = 0;
};

/// Pseudo-3-D flow from frame `a` to frame `b`.
FlowGrid pseudo_3d_flow(const RadarVolume& a, const RadarVolume& b, const PseudoFlowOptions& options = {});

}  // namespace stormsplat

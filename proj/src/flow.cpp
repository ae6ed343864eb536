#include "stormsplat/flow.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stormsplat/errors.hpp"

namespace stormsplat {

namespace {

Image downsample(const Image& img) {
  const Eigen::Index rows = (img.rows() + 1) / 2;
  const Eigen::Index cols = (img.cols() + 1) / 2;
  Image out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      double sum = 0.0;
      int n = 0;
      for (Eigen::Index di = 0; di < 2; ++di) {
        for (Eigen::Index dj = 0; dj < 2; ++dj) {
          if (2 * i + di < img.rows() && 2 * j + dj < img.cols()) {
            sum += img(2 * i + di, 2 * j + dj);
            ++n;
          }
        }
      }
      out(i, j) = sum / n;
    }
  }
  return out;
}

double sample(const Image& img, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.rows() - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.cols() - 1));
  const auto i0 = static_cast<Eigen::Index>(std::floor(y));
  const auto j0 = static_cast<Eigen::Index>(std::floor(x));
  const Eigen::Index i1 = std::min(i0 + 1, img.rows() - 1);
  const Eigen::Index j1 = std::min(j0 + 1, img.cols() - 1);
  const double fy = y - i0, fx = x - j0;
  return (1 - fy) * ((1 - fx) * img(i0, j0) + fx * img(i0, j1)) + fy * ((1 - fx) * img(i1, j0) + fx * img(i1, j1));
}

Flow2 upsample(const Flow2& coarse, Eigen::Index rows, Eigen::Index cols) {
  const double sy = static_cast<double>(rows) / coarse.u.rows();
  const double sx = static_cast<double>(cols) / coarse.u.cols();
  Flow2 out = Flow2::zeros(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double y = (i + 0.5) / sy - 0.5;
      const double x = (j + 0.5) / sx - 0.5;
      out.u(i, j) = sx * sample(coarse.u, y, x);
      out.v(i, j) = sy * sample(coarse.v, y, x);
    }
  }
  return out;
}

Image warp(const Image& img, const Flow2& flow) {
  Image out(img.rows(), img.cols());
  for (Eigen::Index i = 0; i < img.rows(); ++i) {
    for (Eigen::Index j = 0; j < img.cols(); ++j) out(i, j) = sample(img, i + flow.v(i, j), j + flow.u(i, j));
  }
  return out;
}

inline Eigen::Index clampi(Eigen::Index k, Eigen::Index n) { return std::clamp<Eigen::Index>(k, 0, n - 1); }

Image neighbor_mean(const Image& f) {
  const Eigen::Index r = f.rows(), c = f.cols();
  Image out(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      out(i, j) = 0.25 * (f(clampi(i - 1, r), j) + f(clampi(i + 1, r), j) + f(i, clampi(j - 1, c)) +
                          f(i, clampi(j + 1, c)));
    }
  }
  return out;
}

void refine(const Image& a, const Image& b, Flow2& flow, const HornSchunckOptions& options) {
  const Eigen::Index r = a.rows(), c = a.cols();
  const double alpha2 = options.alpha * options.alpha;
  for (int w = 0; w < options.warps; ++w) {
    const Image bw = warp(b, flow);
    Image ix(r, c), iy(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) {
        const Eigen::Index jl = clampi(j - 1, c), jr = clampi(j + 1, c);
        const Eigen::Index iu = clampi(i - 1, r), id = clampi(i + 1, r);
        ix(i, j) = 0.25 * (a(i, jr) - a(i, jl) + bw(i, jr) - bw(i, jl));
        iy(i, j) = 0.25 * (a(id, j) - a(iu, j) + bw(id, j) - bw(iu, j));
      }
    }
    const Image it = bw - a;
    const Image u0 = flow.u, v0 = flow.v;
    const Image denom = alpha2 + ix.square() + iy.square();
    for (int k = 0; k < options.iterations; ++k) {
      const Image ubar = neighbor_mean(flow.u);
      const Image vbar = neighbor_mean(flow.v);
      const Image t = (ix * (ubar - u0) + iy * (vbar - v0) + it) / denom;
      flow.u = ubar - ix * t;
      flow.v = vbar - iy * t;
    }
  }
}

// Intensity peak of the images handed to the solver; alpha is relative to it.
constexpr double kFlowPeak = 20.0;

bool constant(const Image& img) { return img.size() == 0 || img.maxCoeff() == img.minCoeff(); }

}  // namespace

Flow2 flow_2d(const Image& a, const Image& b, const HornSchunckOptions& options) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("flow_2d images differ in shape");
  if (!a.allFinite() || !b.allFinite()) throw ValueError("flow_2d images must be finite");
  if (options.levels < 1 || options.iterations < 1 || options.warps < 1 || !(options.alpha > 0.0)) {
    throw ValueError("invalid Horn-Schunck options");
  }
  Flow2 flow = Flow2::zeros(a.rows(), a.cols());
  if (constant(a) || constant(b)) return flow;
  // Each image is scaled to a fixed peak so a uniform intensity change, as
  // produced by motion across the slice plane, does not read as flow.
  std::vector<Image> pa{a * (kFlowPeak / a.abs().maxCoeff())}, pb{b * (kFlowPeak / b.abs().maxCoeff())};
  while (static_cast<int>(pa.size()) < options.levels && pa.back().rows() >= 8 && pa.back().cols() >= 8) {
    pa.push_back(downsample(pa.back()));
    pb.push_back(downsample(pb.back()));
  }
  flow = Flow2::zeros(pa.back().rows(), pa.back().cols());
  for (auto level = static_cast<std::ptrdiff_t>(pa.size()) - 1; level >= 0; --level) {
    const auto& la = pa[static_cast<std::size_t>(level)];
    if (flow.u.rows() != la.rows() || flow.u.cols() != la.cols()) flow = upsample(flow, la.rows(), la.cols());
    refine(la, pb[static_cast<std::size_t>(level)], flow, options);
  }
  return flow;
}

FlowGrid fuse_flow(const GridDims& dims, const std::vector<Flow2>& xy, const std::vector<Flow2>& xz,
                   const std::vector<Flow2>& yz) {
  auto check = [](const std::vector<Flow2>& flows, int count, int rows, int cols, const char* name) {
    if (static_cast<int>(flows.size()) != count) {
      throw ShapeError(std::string(name) + " flows: expected " + std::to_string(count) + " slices, got " +
                       std::to_string(flows.size()));
    }
    for (const auto& f : flows) {
      if (f.u.rows() != rows || f.u.cols() != cols || f.v.rows() != rows || f.v.cols() != cols) {
        throw ShapeError(std::string(name) + " flow slice has the wrong shape");
      }
    }
  };
  check(xy, dims.depth, dims.height, dims.width, "xoy");
  check(xz, dims.height, dims.depth, dims.width, "xoz");
  check(yz, dims.width, dims.depth, dims.height, "yoz");
  FlowGrid grid(dims);
  for (int d = 0; d < dims.depth; ++d) {
    for (int h = 0; h < dims.height; ++h) {
      for (int w = 0; w < dims.width; ++w) {
        const double x = 0.5 * (xy[static_cast<std::size_t>(d)].u(h, w) + xz[static_cast<std::size_t>(h)].u(d, w));
        const double y = 0.5 * (xy[static_cast<std::size_t>(d)].v(h, w) + yz[static_cast<std::size_t>(w)].u(d, h));
        const double z = 0.5 * (xz[static_cast<std::size_t>(h)].v(d, w) + yz[static_cast<std::size_t>(w)].v(d, h));
        grid.set(d, h, w, {x, y, z});
      }
    }
  }
  return grid;
}

namespace {

Image slice_image(const RadarVolume& v, Axis axis, int index, int channel) {
  const SliceImage s = extract_slice(v, axis, index);
  Image img(s.rows, s.cols);
  for (int i = 0; i < s.rows; ++i) {
    for (int j = 0; j < s.cols; ++j) img(i, j) = s.at(i, j, channel);
  }
  return img;
}

std::vector<Flow2> axis_flows(const RadarVolume& a, const RadarVolume& b, Axis axis, const PseudoFlowOptions& options) {
  const int n = axis_length(a.dims(), axis);
  const int k = std::max(1, options.slice_stride);
  const int blocks = (n + k - 1) / k;
  std::vector<Flow2> solved(static_cast<std::size_t>(blocks));
#pragma omp parallel for schedule(dynamic)
  for (int blk = 0; blk < blocks; ++blk) {
    const int lo = blk * k;
    const int hi = std::min(n, lo + k);
    const int mid = (lo + hi - 1) / 2;
    solved[static_cast<std::size_t>(blk)] =
        flow_2d(slice_image(a, axis, mid, options.channel), slice_image(b, axis, mid, options.channel), options.solver);
  }
  std::vector<Flow2> out(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) out[static_cast<std::size_t>(s)] = solved[static_cast<std::size_t>(s / k)];
  return out;
}

}  // namespace

FlowGrid pseudo_3d_flow(const RadarVolume& a, const RadarVolume& b, const PseudoFlowOptions& options) {
  if (a.dims() != b.dims() || a.channels() != b.channels()) throw ShapeError("flow frames differ in shape");
  if (options.channel < 0 || options.channel >= a.channels()) throw ValueError("flow channel out of range");
  const auto xy = axis_flows(a, b, Axis::z, options);
  const auto xz = axis_flows(a, b, Axis::y, options);
  const auto yz = axis_flows(a, b, Axis::x, options);
  return fuse_flow(a.dims(), xy, xz, yz);
}

}  // namespace stormsplat

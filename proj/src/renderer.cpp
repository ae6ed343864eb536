#include "stormsplat/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "stormsplat/errors.hpp"

namespace stormsplat {

namespace {

// Per-Gaussian quantities shared by every plane of one render call.
struct Prepared {
  std::vector<Eigen::Vector3d> mean;
  std::vector<Eigen::Matrix3d> precision;
  std::vector<Eigen::Matrix3d> covariance;
  std::vector<Eigen::Matrix3d> rotation;
  std::vector<Eigen::Vector3d> inv_scale_sq;
  std::vector<double> sigma_max;
};

Prepared prepare(const GaussianGroup& g) {
  const auto m = static_cast<std::size_t>(g.size());
  Prepared p;
  p.mean.resize(m);
  p.precision.resize(m);
  p.covariance.resize(m);
  p.rotation.resize(m);
  p.inv_scale_sq.resize(m);
  p.sigma_max.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Eigen::Matrix3d rot = rotation_matrix(g.rotations.row(r));
    const Eigen::Vector3d log_s = g.log_scales.row(r).transpose();
    const Eigen::Vector3d s2 = (2.0 * log_s).array().exp();
    const Eigen::Vector3d inv_s2 = (-2.0 * log_s).array().exp();
    p.mean[i] = g.positions.row(r).transpose();
    p.rotation[i] = rot;
    p.inv_scale_sq[i] = inv_s2;
    p.covariance[i] = rot * s2.asDiagonal() * rot.transpose();
    p.precision[i] = rot * inv_s2.asDiagonal() * rot.transpose();
    p.sigma_max[i] = std::exp(log_s.maxCoeff());
  }
  return p;
}

// Rectangle of pixels a Gaussian can reach, plus the plane-frame quadratic
// coefficients of its Mahalanobis distance.
struct Footprint {
  int gaussian;
  int i0, i1, j0, j1;
  Eigen::Vector3d offset;  // mean - origin
  double a, b;             // offset in plane coordinates
  double uu, uv, vv;       // u^T P u, u^T P v, v^T P v
  double ud, vd, dd;       // u^T P offset, v^T P offset, offset^T P offset
};

struct Binning {
  std::vector<Footprint> footprints;
  std::vector<std::vector<int>> tiles;
  int tiles_x = 0;
  int tiles_y = 0;
};

Binning bin(const Prepared& prep, const RenderPlane& plane, const RenderOptions& options) {
  Binning out;
  const int ts = std::max(1, options.tile_size);
  out.tiles_x = (plane.cols + ts - 1) / ts;
  out.tiles_y = (plane.rows + ts - 1) / ts;
  out.tiles.resize(static_cast<std::size_t>(out.tiles_x) * out.tiles_y);
  const Eigen::Vector3d n = plane.normal();
  const double k = options.mahalanobis_cutoff;
  const double sp = plane.pixel_spacing;
  for (std::size_t gi = 0; gi < prep.mean.size(); ++gi) {
    const Eigen::Vector3d offset = prep.mean[gi] - plane.origin;
    const double h = n.dot(offset);
    if (std::isfinite(plane.slab_half_width) && std::abs(h) > plane.slab_half_width + 3.0 * prep.sigma_max[gi]) continue;
    const auto& cov = prep.covariance[gi];
    // No point of the plane lies inside the cutoff ellipsoid.
    if (h * h > k * n.dot(cov * n)) continue;
    const double a = plane.u.dot(offset);
    const double b = plane.v.dot(offset);
    const double eu = std::sqrt(k * plane.u.dot(cov * plane.u));
    const double ev = std::sqrt(k * plane.v.dot(cov * plane.v));
    const int j0 = std::max(0, static_cast<int>(std::ceil((a - eu) / sp - 0.5)));
    const int j1 = std::min(plane.cols - 1, static_cast<int>(std::floor((a + eu) / sp - 0.5)));
    const int i0 = std::max(0, static_cast<int>(std::ceil((b - ev) / sp - 0.5)));
    const int i1 = std::min(plane.rows - 1, static_cast<int>(std::floor((b + ev) / sp - 0.5)));
    if (j0 > j1 || i0 > i1) continue;
    const auto& prec = prep.precision[gi];
    const Eigen::Vector3d pu = prec * plane.u;
    const Eigen::Vector3d pv = prec * plane.v;
    const Eigen::Vector3d pd = prec * offset;
    Footprint f{static_cast<int>(gi), i0, i1, j0, j1, offset, a, b,
                plane.u.dot(pu), plane.u.dot(pv), plane.v.dot(pv),
                plane.u.dot(pd), plane.v.dot(pd), offset.dot(pd)};
    const int fi = static_cast<int>(out.footprints.size());
    out.footprints.push_back(f);
    for (int ty = i0 / ts; ty <= i1 / ts; ++ty) {
      for (int tx = j0 / ts; tx <= j1 / ts; ++tx) {
        out.tiles[static_cast<std::size_t>(ty) * out.tiles_x + tx].push_back(fi);
      }
    }
  }
  return out;
}

// Mahalanobis distance squared of pixel (alpha, beta) in plane coordinates.
inline double mahalanobis(const Footprint& f, double alpha, double beta) {
  return alpha * alpha * f.uu + 2.0 * alpha * beta * f.uv + beta * beta * f.vv - 2.0 * alpha * f.ud -
         2.0 * beta * f.vd + f.dd;
}

struct TileRange {
  int r0, r1, c0, c1;
};

TileRange tile_range(const Binning& b, std::size_t tile, const RenderPlane& plane, int ts) {
  const int ty = static_cast<int>(tile) / b.tiles_x;
  const int tx = static_cast<int>(tile) % b.tiles_x;
  return {ty * ts, std::min(plane.rows, (ty + 1) * ts) - 1, tx * ts, std::min(plane.cols, (tx + 1) * ts) - 1};
}

// features: M x N activated values (or a single column of ones).
void rasterize(const Prepared& prep, const FeatureMatrix& features, const RenderPlane& plane,
               const RenderOptions& options, std::vector<double>& image, std::vector<int>* counts) {
  const int n = static_cast<int>(features.cols());
  image.assign(static_cast<std::size_t>(plane.rows) * plane.cols * n, 0.0);
  if (counts) counts->assign(static_cast<std::size_t>(plane.rows) * plane.cols, 0);
  const Binning b = bin(prep, plane, options);
  const int ts = std::max(1, options.tile_size);
  const double k = options.mahalanobis_cutoff;
  const double sp = plane.pixel_spacing;
  const auto tile_count = static_cast<std::ptrdiff_t>(b.tiles.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < tile_count; ++t) {
    const auto range = tile_range(b, static_cast<std::size_t>(t), plane, ts);
    for (int fi : b.tiles[static_cast<std::size_t>(t)]) {
      const Footprint& f = b.footprints[static_cast<std::size_t>(fi)];
      const int r0 = std::max(range.r0, f.i0), r1 = std::min(range.r1, f.i1);
      const int c0 = std::max(range.c0, f.j0), c1 = std::min(range.c1, f.j1);
      const double* feat = features.data() + static_cast<std::ptrdiff_t>(f.gaussian) * n;
      for (int i = r0; i <= r1; ++i) {
        const double beta = (i + 0.5) * sp;
        for (int j = c0; j <= c1; ++j) {
          const double alpha = (j + 0.5) * sp;
          const double m = mahalanobis(f, alpha, beta);
          if (m > k) continue;
          const double w = std::exp(-0.5 * m);
          const std::size_t px = static_cast<std::size_t>(i) * plane.cols + j;
          double* out = image.data() + px * n;
          for (int c = 0; c < n; ++c) out[c] += w * feat[c];
          if (counts) ++(*counts)[px];
        }
      }
    }
  }
}

// Per-Gaussian first and second weighted moments of the pixel offsets plus
// feature sums; everything else follows from these linearly.
struct Moments {
  Eigen::Vector3d s1 = Eigen::Vector3d::Zero();
  Eigen::Matrix3d s2 = Eigen::Matrix3d::Zero();
  Eigen::VectorXd sf;
};

void rasterize_backward(const Prepared& prep, const FeatureMatrix& features, const RenderPlane& plane,
                        const RenderOptions& options, std::span<const double> upstream,
                        std::vector<Moments>& totals) {
  const int n = static_cast<int>(features.cols());
  const Binning b = bin(prep, plane, options);
  const int ts = std::max(1, options.tile_size);
  const double k = options.mahalanobis_cutoff;
  const double sp = plane.pixel_spacing;
  std::vector<std::vector<Moments>> partial(b.tiles.size());
  const auto tile_count = static_cast<std::ptrdiff_t>(b.tiles.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < tile_count; ++t) {
    const auto& list = b.tiles[static_cast<std::size_t>(t)];
    auto& acc = partial[static_cast<std::size_t>(t)];
    acc.resize(list.size());
    const auto range = tile_range(b, static_cast<std::size_t>(t), plane, ts);
    for (std::size_t li = 0; li < list.size(); ++li) {
      const Footprint& f = b.footprints[static_cast<std::size_t>(list[li])];
      Moments& mom = acc[li];
      mom.sf = Eigen::VectorXd::Zero(n);
      const int r0 = std::max(range.r0, f.i0), r1 = std::min(range.r1, f.i1);
      const int c0 = std::max(range.c0, f.j0), c1 = std::min(range.c1, f.j1);
      const double* feat = features.data() + static_cast<std::ptrdiff_t>(f.gaussian) * n;
      for (int i = r0; i <= r1; ++i) {
        const double beta = (i + 0.5) * sp;
        for (int j = c0; j <= c1; ++j) {
          const double alpha = (j + 0.5) * sp;
          const double m = mahalanobis(f, alpha, beta);
          if (m > k) continue;
          const double w = std::exp(-0.5 * m);
          const double* g = upstream.data() + (static_cast<std::size_t>(i) * plane.cols + j) * n;
          double c = 0.0;
          for (int ch = 0; ch < n; ++ch) {
            c += g[ch] * feat[ch];
            mom.sf[ch] += w * g[ch];
          }
          if (c == 0.0) continue;
          const Eigen::Vector3d d = alpha * plane.u + beta * plane.v - f.offset;
          const double wc = w * c;
          mom.s1 += wc * d;
          mom.s2.noalias() += wc * (d * d.transpose());
        }
      }
    }
  }
  // Fixed tile order keeps the reduction independent of the worker count.
  for (std::size_t t = 0; t < b.tiles.size(); ++t) {
    const auto& list = b.tiles[t];
    for (std::size_t li = 0; li < list.size(); ++li) {
      const auto gi = static_cast<std::size_t>(b.footprints[static_cast<std::size_t>(list[li])].gaussian);
      const Moments& mom = partial[t][li];
      totals[gi].s1 += mom.s1;
      totals[gi].s2 += mom.s2;
      totals[gi].sf += mom.sf;
    }
  }
}

// dL/dq for R(q / |q|) given dL/dR.
Eigen::Vector4d quaternion_gradient(const Eigen::RowVector4d& q_raw, const Eigen::Matrix3d& gr) {
  const double norm = q_raw.norm();
  const Eigen::Vector4d q = q_raw.transpose() / norm;
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  Eigen::Vector4d gq;
  gq(0) = 2.0 * (-z * gr(0, 1) + y * gr(0, 2) + z * gr(1, 0) - x * gr(1, 2) - y * gr(2, 0) + x * gr(2, 1));
  gq(1) = 2.0 * (y * gr(0, 1) + z * gr(0, 2) + y * gr(1, 0) - 2.0 * x * gr(1, 1) - w * gr(1, 2) + z * gr(2, 0) +
                 w * gr(2, 1) - 2.0 * x * gr(2, 2));
  gq(2) = 2.0 * (-2.0 * y * gr(0, 0) + x * gr(0, 1) + w * gr(0, 2) + x * gr(1, 0) + z * gr(1, 2) - w * gr(2, 0) +
                 z * gr(2, 1) - 2.0 * y * gr(2, 2));
  gq(3) = 2.0 * (-2.0 * z * gr(0, 0) - w * gr(0, 1) + x * gr(0, 2) + w * gr(1, 0) - 2.0 * z * gr(1, 1) +
                 y * gr(1, 2) + x * gr(2, 0) + y * gr(2, 1));
  // Project through the normalization q / |q|.
  return (gq - q * q.dot(gq)) / norm;
}

GaussianGradients chain_to_raw(const GaussianGroup& g, const Prepared& prep, const std::vector<Moments>& totals,
                               bool with_features) {
  auto grads = GaussianGradients::zeros(g.size(), g.feature_dim());
  for (std::size_t gi = 0; gi < totals.size(); ++gi) {
    const auto r = static_cast<Eigen::Index>(gi);
    const Moments& mom = totals[gi];
    const auto& prec = prep.precision[gi];
    grads.positions.row(r) = (prec * mom.s1).transpose();
    const Eigen::Matrix3d gp = -0.5 * mom.s2;  // dL/dP, symmetric
    const Eigen::Matrix3d& rot = prep.rotation[gi];
    const Eigen::Vector3d& lam = prep.inv_scale_sq[gi];
    for (int kk = 0; kk < 3; ++kk) {
      const Eigen::Vector3d rk = rot.col(kk);
      grads.log_scales(r, kk) = -2.0 * lam(kk) * rk.dot(gp * rk);
    }
    const Eigen::Matrix3d gr = 2.0 * gp * rot * lam.asDiagonal();
    grads.rotations.row(r) = quaternion_gradient(g.rotations.row(r), gr).transpose();
    if (with_features) {
      for (Eigen::Index c = 0; c < g.feature_dim(); ++c) {
        const double slope = g.activations[static_cast<std::size_t>(c)] == FeatureActivation::softplus
                                 ? sigmoid(g.features(r, c))
                                 : 1.0;
        grads.features(r, c) = mom.sf(c) * slope;
      }
    }
  }
  return grads;
}

FeatureMatrix activated_features(const GaussianGroup& g) {
  FeatureMatrix out(g.size(), g.feature_dim());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    for (Eigen::Index c = 0; c < g.feature_dim(); ++c) out(i, c) = g.activated_feature(i, c);
  }
  return out;
}

RenderPlane voxel_plane(int d, const GridDims& dims) {
  RenderPlane p = axis_slice(Axis::z, d, dims);
  p.slab_half_width = std::numeric_limits<double>::infinity();
  return p;
}

}  // namespace

void RenderPlane::validate() const {
  if (std::abs(u.norm() - 1.0) > 1e-9 || std::abs(v.norm() - 1.0) > 1e-9 || std::abs(u.dot(v)) > 1e-9) {
    throw ValueError("render plane basis must be orthonormal");
  }
  if (rows < 1 || cols < 1) throw ValueError("render plane needs at least one pixel");
  if (!(slab_half_width > 0.0)) throw ValueError("slab half-width must be positive");
  if (!(pixel_spacing > 0.0)) throw ValueError("pixel spacing must be positive");
  if (!origin.allFinite()) throw ValueError("plane origin must be finite");
}

RenderPlane axis_slice(Axis axis, int index, const GridDims& dims) {
  if (index < 0 || index >= axis_length(dims, axis)) {
    throw ValueError("slice index " + std::to_string(index) + " out of range [0, " +
                     std::to_string(axis_length(dims, axis)) + ")");
  }
  RenderPlane p;
  const double c = index + 0.5;
  switch (axis) {
    case Axis::z:
      p.origin = {0.0, 0.0, c};
      p.u = Eigen::Vector3d::UnitX();
      p.v = Eigen::Vector3d::UnitY();
      p.rows = dims.height;
      p.cols = dims.width;
      break;
    case Axis::y:
      p.origin = {0.0, c, 0.0};
      p.u = Eigen::Vector3d::UnitX();
      p.v = Eigen::Vector3d::UnitZ();
      p.rows = dims.depth;
      p.cols = dims.width;
      break;
    case Axis::x:
      p.origin = {c, 0.0, 0.0};
      p.u = Eigen::Vector3d::UnitY();
      p.v = Eigen::Vector3d::UnitZ();
      p.rows = dims.depth;
      p.cols = dims.height;
      break;
  }
  p.slab_half_width = 0.5;
  return p;
}

GaussianGradients GaussianGradients::zeros(Eigen::Index count, Eigen::Index feature_dim) {
  GaussianGradients g;
  g.positions = Points3::Zero(count, 3);
  g.features = FeatureMatrix::Zero(count, feature_dim);
  g.log_scales = Points3::Zero(count, 3);
  g.rotations = Quaternions::Zero(count, 4);
  return g;
}

GaussianGradients& GaussianGradients::operator+=(const GaussianGradients& other) {
  positions += other.positions;
  features += other.features;
  log_scales += other.log_scales;
  rotations += other.rotations;
  return *this;
}

GaussianGradients& GaussianGradients::operator*=(double factor) {
  positions *= factor;
  features *= factor;
  log_scales *= factor;
  rotations *= factor;
  return *this;
}

bool GaussianGradients::all_finite() const {
  return positions.allFinite() && features.allFinite() && log_scales.allFinite() && rotations.allFinite();
}

RenderOutput render_plane(const GaussianGroup& group, const RenderPlane& plane, const RenderOptions& options) {
  plane.validate();
  RenderOutput out;
  out.rows = plane.rows;
  out.cols = plane.cols;
  out.channels = static_cast<int>(group.feature_dim());
  const Prepared prep = prepare(group);
  rasterize(prep, activated_features(group), plane, options, out.image,
            options.record_counts ? &out.counts : nullptr);
  return out;
}

GaussianGradients render_plane_backward(const GaussianGroup& group, const RenderPlane& plane,
                                        std::span<const double> upstream, const RenderOptions& options) {
  plane.validate();
  const auto expected = static_cast<std::size_t>(plane.rows) * plane.cols * static_cast<std::size_t>(group.feature_dim());
  if (upstream.size() != expected) throw ShapeError("upstream gradient does not match the image shape");
  const Prepared prep = prepare(group);
  std::vector<Moments> totals(static_cast<std::size_t>(group.size()));
  for (auto& m : totals) m.sf = Eigen::VectorXd::Zero(group.feature_dim());
  rasterize_backward(prep, activated_features(group), plane, options, upstream, totals);
  return chain_to_raw(group, prep, totals, true);
}

std::vector<double> render_density(const GaussianGroup& group, const GridDims& dims, double tau,
                                   const RenderOptions& options) {
  if (!(tau > 0.0)) throw ValueError("density clamp tau must be positive");
  const Prepared prep = prepare(group);
  const FeatureMatrix ones = FeatureMatrix::Ones(group.size(), 1);
  std::vector<double> out(dims.voxel_count(), 0.0);
  std::vector<double> slice;
  const std::size_t plane_size = static_cast<std::size_t>(dims.height) * dims.width;
  for (int d = 0; d < dims.depth; ++d) {
    rasterize(prep, ones, voxel_plane(d, dims), options, slice, nullptr);
    for (std::size_t k = 0; k < plane_size; ++k) out[d * plane_size + k] = std::min(slice[k], tau);
  }
  return out;
}

GaussianGradients render_density_backward(const GaussianGroup& group, const GridDims& dims, double tau,
                                          std::span<const double> upstream, const RenderOptions& options,
                                          std::span<const double> density) {
  if (upstream.size() != dims.voxel_count()) throw ShapeError("upstream gradient does not match the grid");
  if (!density.empty() && density.size() != dims.voxel_count()) throw ShapeError("density does not match the grid");
  const Prepared prep = prepare(group);
  const FeatureMatrix ones = FeatureMatrix::Ones(group.size(), 1);
  std::vector<Moments> totals(static_cast<std::size_t>(group.size()));
  for (auto& m : totals) m.sf = Eigen::VectorXd::Zero(1);
  std::vector<double> slice;
  std::vector<double> masked;
  const std::size_t plane_size = static_cast<std::size_t>(dims.height) * dims.width;
  for (int d = 0; d < dims.depth; ++d) {
    const RenderPlane plane = voxel_plane(d, dims);
    if (density.empty()) {
      rasterize(prep, ones, plane, options, slice, nullptr);
    } else {
      slice.assign(density.begin() + static_cast<std::ptrdiff_t>(d * plane_size),
                   density.begin() + static_cast<std::ptrdiff_t>((d + 1) * plane_size));
    }
    masked.assign(plane_size, 0.0);
    bool any = false;
    for (std::size_t k = 0; k < plane_size; ++k) {
      if (slice[k] < tau && upstream[d * plane_size + k] != 0.0) {
        masked[k] = upstream[d * plane_size + k];
        any = true;
      }
    }
    if (any) rasterize_backward(prep, ones, plane, options, masked, totals);
  }
  return chain_to_raw(group, prep, totals, false);
}

RadarVolume render_volume(const GaussianGroup& group, const GridDims& dims, const RenderOptions& options) {
  const Prepared prep = prepare(group);
  const FeatureMatrix features = activated_features(group);
  const int n = static_cast<int>(group.feature_dim());
  RadarVolume out(dims, n);
  auto values = out.values();
  std::vector<double> slice;
  const std::size_t plane_size = static_cast<std::size_t>(dims.height) * dims.width * n;
  for (int d = 0; d < dims.depth; ++d) {
    rasterize(prep, features, voxel_plane(d, dims), options, slice, nullptr);
    for (std::size_t k = 0; k < plane_size; ++k) values[d * plane_size + k] = static_cast<float>(slice[k]);
  }
  return out;
}

SliceImage render_slice(const GaussianGroup& group, Axis axis, int index, const GridDims& dims,
                        const RenderOptions& options) {
  const auto out = render_plane(group, axis_slice(axis, index, dims), options);
  SliceImage img;
  img.rows = out.rows;
  img.cols = out.cols;
  img.channels = out.channels;
  img.values = out.image;
  return img;
}

}  // namespace stormsplat

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stormsplat/errors.hpp"
#include "stormsplat/volume.hpp"

namespace stormsplat {

template <typename Scalar, int Cols>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Cols, Cols == 1 ? Eigen::ColMajor : Eigen::RowMajor>;

using Points3 = RowMatrix<double, 3>;
using Quaternions = RowMatrix<double, 4>;
using FeatureMatrix = RowMatrix<double, Eigen::Dynamic>;

enum class FeatureActivation : std::uint8_t { identity, softplus };

// Numerically stable softplus and its inverse; the inverse is only defined for
// positive arguments.
template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(20) ? x : log1p(exp(x));
}

template <typename Scalar>
Scalar softplus_inverse(Scalar y) {
  using std::exp;
  using std::log;
  using std::expm1;
  return y > Scalar(20) ? y : log(expm1(y));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-x)) : exp(x) / (Scalar(1) + exp(x));
}

/// Rotation matrix of a (w, x, y, z) quaternion after renormalization.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 3, 3> rotation_matrix(const Eigen::MatrixBase<Derived>& q) {
  using Scalar = typename Derived::Scalar;
  const Scalar norm = q.norm();
  if (!(norm >= Scalar(1e-12))) throw ValueError("degenerate rotation: quaternion norm below 1e-12");
  const Scalar w = q(0) / norm, x = q(1) / norm, y = q(2) / norm, z = q(3) / norm;
  Eigen::Matrix<Scalar, 3, 3> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
template <typename DerivedS, typename DerivedQ>
Eigen::Matrix<typename DerivedS::Scalar, 3, 3> covariance(const Eigen::MatrixBase<DerivedS>& log_scale,
                                                          const Eigen::MatrixBase<DerivedQ>& q) {
  using Scalar = typename DerivedS::Scalar;
  const auto r = rotation_matrix(q);
  using std::exp;
  const Eigen::Matrix<Scalar, 3, 1> s2(exp(Scalar(2) * log_scale(0)), exp(Scalar(2) * log_scale(1)),
                                       exp(Scalar(2) * log_scale(2)));
  return r * s2.asDiagonal() * r.transpose();
}

/// Inverse covariance assembled directly from the factors.
template <typename DerivedS, typename DerivedQ>
Eigen::Matrix<typename DerivedS::Scalar, 3, 3> precision(const Eigen::MatrixBase<DerivedS>& log_scale,
                                                         const Eigen::MatrixBase<DerivedQ>& q) {
  using Scalar = typename DerivedS::Scalar;
  const auto r = rotation_matrix(q);
  using std::exp;
  const Eigen::Matrix<Scalar, 3, 1> inv_s2(exp(Scalar(-2) * log_scale(0)), exp(Scalar(-2) * log_scale(1)),
                                           exp(Scalar(-2) * log_scale(2)));
  return r * inv_s2.asDiagonal() * r.transpose();
}

/// Fixed-cardinality set of 3-D Gaussians. All parameters are kept in raw
/// (pre-activation) space: scales pass through exp, features through the
/// per-channel activation, quaternions are renormalized on use.
struct GaussianGroup {
  Points3 positions;
  FeatureMatrix features;
  Points3 log_scales;
  Quaternions rotations;
  std::vector<FeatureActivation> activations;

  GaussianGroup() = default;
  GaussianGroup(Eigen::Index count, Eigen::Index feature_dim,
                std::vector<FeatureActivation> channel_activations = {});

  Eigen::Index size() const noexcept { return positions.rows(); }
  Eigen::Index feature_dim() const noexcept { return features.cols(); }
  /// Width of one packed parameter row: 3 + N + 3 + 4.
  Eigen::Index param_dim() const noexcept { return 10 + feature_dim(); }

  double activated_feature(Eigen::Index i, Eigen::Index c) const {
    const double raw = features(i, c);
    return activations[static_cast<std::size_t>(c)] == FeatureActivation::softplus ? softplus(raw) : raw;
  }
  Eigen::Vector3d scale(Eigen::Index i) const { return log_scales.row(i).transpose().array().exp(); }
  Eigen::Matrix3d covariance(Eigen::Index i) const { return stormsplat::covariance(log_scales.row(i), rotations.row(i)); }

  /// Throws ValueError on non-finite parameters or zero quaternions.
  void validate() const;
  /// Rescales every quaternion to unit length.
  void normalize_rotations();
  /// Rows [x | f | s | q], one per Gaussian.
  FeatureMatrix packed() const;
  static GaussianGroup unpack(const FeatureMatrix& packed, Eigen::Index feature_dim,
                              std::vector<FeatureActivation> activations);
  /// Row subset in the given order.
  GaussianGroup select(std::span<const Eigen::Index> indices) const;
  /// Concatenation of two groups with identical feature layout.
  static GaussianGroup concat(const GaussianGroup& a, const GaussianGroup& b);
};

/// Exact equality of shapes, parameters and activations.
bool operator==(const GaussianGroup& a, const GaussianGroup& b);

/// Per-Gaussian raw-parameter deltas, same layout as GaussianGroup.
struct DiffGaussians {
  Points3 positions;
  FeatureMatrix features;
  Points3 log_scales;
  Quaternions rotations;

  static DiffGaussians zeros(Eigen::Index count, Eigen::Index feature_dim);
  Eigen::Index size() const noexcept { return positions.rows(); }
  FeatureMatrix packed() const;
  static DiffGaussians unpack(const FeatureMatrix& packed, Eigen::Index feature_dim);
};

bool operator==(const DiffGaussians& a, const DiffGaussians& b);

/// Elementwise raw addition followed by quaternion renormalization.
GaussianGroup compose(const GaussianGroup& anchor, const DiffGaussians& delta);
/// Elementwise raw difference `current - anchor`.
DiffGaussians decompose(const GaussianGroup& current, const GaussianGroup& anchor);

std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, int bits_per_axis);
/// Per-axis min-max quantization to [0, 2^bits - 1]; degenerate axes map to 0.
std::vector<std::uint64_t> morton_codes(const Points3& positions, int bits_per_axis = 10);
/// Gaussian indices sorted by Morton code, ties broken by original index.
std::vector<Eigen::Index> morton_sort(const GaussianGroup& group, int bits_per_axis = 10);
std::vector<Eigen::Index> invert_permutation(std::span<const Eigen::Index> permutation);

struct SequenceMeta {
  GridDims dims{};
  std::vector<std::string> channel_names;
  std::vector<FeatureActivation> activations;
};

/// Anchor group plus one delta per later frame.
struct GaussianSequence {
  GaussianGroup anchor;
  std::vector<DiffGaussians> deltas;
  SequenceMeta meta;

  std::size_t length() const noexcept { return deltas.size() + 1; }
  GaussianGroup frame(std::size_t t) const;
  /// Delta of frame t against the anchor; frame 0 is all zeros.
  DiffGaussians delta(std::size_t t) const;
  void validate() const;
};

std::vector<std::uint8_t> encode_gseq(const GaussianSequence& sequence);
/// The decoded sequence carries default metadata (channel 0 non-negative).
GaussianSequence decode_gseq(std::span<const std::uint8_t> bytes);

/// Writes `path` plus its `.meta.json` sidecar (grid dims, channel names, activations).
void write_gseq(const GaussianSequence& sequence, const std::filesystem::path& path);
GaussianSequence read_gseq(const std::filesystem::path& path);

std::vector<FeatureActivation> default_activations(Eigen::Index feature_dim);
std::vector<FeatureActivation> activations_from_flags(const std::vector<bool>& nonnegative);

}  // namespace stormsplat

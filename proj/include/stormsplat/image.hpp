#pragma once

#include <Eigen/Core>

namespace stormsplat {

using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Separable 2-D filter with a truncated, unnormalized Gaussian of the given
/// radius; samples outside the image count as zero.
Image gaussian_filter_zero_padded(const Image& img, double sigma, int radius);

/// Mean structural similarity of two images. The 11x11 Gaussian window
/// (sigma 1.5) is renormalized to the part inside the image at the borders.
/// When `grad_x` is given it receives d SSIM / d x.
double ssim_2d(const Image& x, const Image& y, double data_range, Image* grad_x = nullptr);

}  // namespace stormsplat

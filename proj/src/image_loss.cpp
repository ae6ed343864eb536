#include "stormsplat/image_loss.hpp"

#include <cmath>

#include "stormsplat/errors.hpp"

namespace stormsplat {

namespace {

constexpr double kWindowSigma = 1.5;
constexpr int kWindowRadius = 5;

}  // namespace

Image gaussian_filter_zero_padded(const Image& img, double sigma, int radius) {
  Eigen::VectorXd k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k(i + radius) = std::exp(-0.5 * i * i / (sigma * sigma));
  const Eigen::Index rows = img.rows(), cols = img.cols();
  Image tmp = Image::Zero(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (int o = -radius; o <= radius; ++o) {
        const Eigen::Index jj = j + o;
        if (jj >= 0 && jj < cols) acc += k(o + radius) * img(i, jj);
      }
      tmp(i, j) = acc;
    }
  }
  Image out = Image::Zero(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (int o = -radius; o <= radius; ++o) {
        const Eigen::Index ii = i + o;
        if (ii >= 0 && ii < rows) acc += k(o + radius) * tmp(ii, j);
      }
      out(i, j) = acc;
    }
  }
  return out;
}

double ssim_2d(const Image& x, const Image& y, double data_range, Image* grad_x) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ShapeError("ssim images differ in shape");
  if (!(data_range > 0.0)) throw ValueError("ssim data range must be positive");
  const double c1 = std::pow(0.01 * data_range, 2);
  const double c2 = std::pow(0.03 * data_range, 2);
  auto filt = [](const Image& a) { return gaussian_filter_zero_padded(a, kWindowSigma, kWindowRadius); };
  const Image z = filt(Image::Ones(x.rows(), x.cols()));
  const Image mx = filt(x) / z;
  const Image my = filt(y) / z;
  const Image exx = filt(x * x) / z;
  const Image eyy = filt(y * y) / z;
  const Image exy = filt(x * y) / z;
  const Image a1 = 2.0 * mx * my + c1;
  const Image a2 = 2.0 * (exy - mx * my) + c2;
  const Image b1 = mx.square() + my.square() + c1;
  const Image b2 = (exx - mx.square()) + (eyy - my.square()) + c2;
  const Image s = (a1 * a2) / (b1 * b2);
  const double n = static_cast<double>(x.size());
  if (grad_x) {
    // Sensitivities of each window's score to its raw moments of x.
    const Image ds_dmx = 2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2);
    const Image ds_dexx = -s / b2;
    const Image ds_dexy = 2.0 * a1 / (b1 * b2);
    // The window is symmetric, so the transpose of "filter then divide by z"
    // is "divide by z then filter".
    *grad_x = (filt(ds_dmx / z) + 2.0 * x * filt(ds_dexx / z) + y * filt(ds_dexy / z)) / n;
  }
  return s.sum() / n;
}

ImageLoss image_loss(std::span<const double> rendered, std::span<const double> truth, int rows, int cols,
                     int channels, double data_range, const ImageLossWeights& weights) {
  const auto count = static_cast<std::size_t>(rows) * cols * channels;
  if (rendered.size() != count || truth.size() != count) throw ShapeError("image loss inputs differ in shape");
  if (!(data_range > 0.0)) throw ValueError("image loss data range must be positive");
  ImageLoss out;
  out.gradient.assign(count, 0.0);
  const double inv = 1.0 / data_range;
  double l1 = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    const double r = (rendered[k] - truth[k]) * inv;
    l1 += std::abs(r);
    out.gradient[k] = weights.l1 * (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0)) * inv / static_cast<double>(count);
  }
  out.l1 = l1 / static_cast<double>(count);
  {
    const bool with_grad = weights.ssim != 0.0;
    double total = 0.0;
    Image x(rows, cols), y(rows, cols), gx;
    for (int c = 0; c < channels; ++c) {
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          const std::size_t k = (static_cast<std::size_t>(i) * cols + j) * channels + c;
          x(i, j) = rendered[k] * inv;
          y(i, j) = truth[k] * inv;
        }
      }
      total += ssim_2d(x, y, 1.0, with_grad ? &gx : nullptr);
      if (!with_grad) continue;
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          out.gradient[(static_cast<std::size_t>(i) * cols + j) * channels + c] -= weights.ssim * gx(i, j) * inv / channels;
        }
      }
    }
    out.ssim = total / channels;
  }
  out.value = weights.l1 * out.l1 + weights.ssim * (1.0 - out.ssim);
  return out;
}

}  // namespace stormsplat

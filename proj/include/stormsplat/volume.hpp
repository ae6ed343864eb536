#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace stormsplat {

/// Extent of a regular voxel grid. Axis naming follows the world frame used by
/// the renderer: x runs along width, y along height, z along depth (vertical).
/// Voxel (d, h, w) has its center at (w + 0.5, h + 0.5, d + 0.5).
struct GridDims {
  int depth = 0;
  int height = 0;
  int width = 0;

  std::size_t voxel_count() const noexcept {
    return static_cast<std::size_t>(depth) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  std::size_t index(int d, int h, int w) const noexcept {
    return (static_cast<std::size_t>(d) * height + h) * width + w;
  }
  bool contains(int d, int h, int w) const noexcept {
    return d >= 0 && d < depth && h >= 0 && h < height && w >= 0 && w < width;
  }
  int max_extent() const noexcept { return std::max({depth, height, width}); }

  bool operator==(const GridDims&) const = default;
};

enum class Axis { x, y, z };

/// One timestamped multi-channel frame on a regular voxel grid. Values are
/// stored as 32-bit floats in (d, h, w, c) row-major order, which is also the
/// on-disk order of the `.rvol` payload.
class RadarVolume {
 public:
  RadarVolume() = default;
  RadarVolume(GridDims dims, int channels, std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f},
              int timestamp = 0);

  const GridDims& dims() const noexcept { return dims_; }
  int channels() const noexcept { return channels_; }
  /// Voxel spacing per axis in (depth, height, width) order.
  const std::array<float, 3>& spacing() const noexcept { return spacing_; }
  int timestamp() const noexcept { return timestamp_; }
  void set_timestamp(int t) noexcept { timestamp_ = t; }

  std::size_t size() const noexcept { return values_.size(); }
  float& at(int d, int h, int w, int c) { return values_[offset(d, h, w, c)]; }
  float at(int d, int h, int w, int c) const { return values_[offset(d, h, w, c)]; }

  std::span<float> values() noexcept { return values_; }
  std::span<const float> values() const noexcept { return values_; }

  /// Throws ValueError when a value is non-finite or a channel flagged
  /// non-negative holds a negative value.
  void validate(std::span<const bool> nonnegative_channels = {}) const;

  bool operator==(const RadarVolume&) const = default;

 private:
  std::size_t offset(int d, int h, int w, int c) const noexcept {
    return dims_.index(d, h, w) * static_cast<std::size_t>(channels_) + static_cast<std::size_t>(c);
  }

  GridDims dims_{};
  int channels_ = 0;
  std::array<float, 3> spacing_{1.0f, 1.0f, 1.0f};
  int timestamp_ = 0;
  std::vector<float> values_;
};

struct ChannelInfo {
  std::string name = "reflectivity";
  std::string unit = "dBZ";
  bool nonnegative = true;
};

/// Contents of the `<name>.meta.json` sidecar.
struct VolumeMeta {
  double frame_interval_minutes = 6.0;
  std::vector<ChannelInfo> channels{ChannelInfo{}};

  std::vector<bool> nonnegative_flags() const;
};

struct VolumeSequence {
  std::vector<RadarVolume> frames;
  VolumeMeta meta;

  std::size_t length() const noexcept { return frames.size(); }
  const GridDims& dims() const { return frames.front().dims(); }
  /// Checks identical dims/spacing/channels and timestamps increasing by one.
  void validate() const;
};

/// Per-voxel displacement (x, y, z components, voxels per frame) on a grid.
class FlowGrid {
 public:
  FlowGrid() = default;
  explicit FlowGrid(GridDims dims) : dims_(dims), data_(3 * dims.voxel_count(), 0.0) {}

  const GridDims& dims() const noexcept { return dims_; }
  Eigen::Vector3d at(int d, int h, int w) const {
    const std::size_t i = 3 * dims_.index(d, h, w);
    return {data_[i], data_[i + 1], data_[i + 2]};
  }
  void set(int d, int h, int w, const Eigen::Vector3d& v) {
    const std::size_t i = 3 * dims_.index(d, h, w);
    data_[i] = v.x();
    data_[i + 1] = v.y();
    data_[i + 2] = v.z();
  }
  /// Nearest voxel to a world position, clamped to the grid.
  Eigen::Vector3d nearest(const Eigen::Vector3d& position) const;
  /// Trilinear interpolation between voxel centers, clamped at the border.
  Eigen::Vector3d trilinear(const Eigen::Vector3d& position) const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  /// A 3-channel volume holding (x, y, z) displacements, for `.rvol` persistence.
  RadarVolume to_volume() const;
  static FlowGrid from_volume(const RadarVolume& volume);

 private:
  GridDims dims_{};
  std::vector<double> data_;
};

std::vector<std::uint8_t> encode_volume(const RadarVolume& volume);
RadarVolume decode_volume(std::span<const std::uint8_t> bytes);

void write_volume(const RadarVolume& volume, const std::filesystem::path& path);
RadarVolume read_volume(const std::filesystem::path& path);

void write_volume_meta(const VolumeMeta& meta, const std::filesystem::path& path);
VolumeMeta read_volume_meta(const std::filesystem::path& path);
/// `frames/frame_0003.rvol` -> `frames/frame_0003.meta.json`.
std::filesystem::path meta_path_for(const std::filesystem::path& data_path);

/// Sequence directories hold `frame_%04d.rvol` files with per-frame sidecars.
void write_sequence(const VolumeSequence& sequence, const std::filesystem::path& dir);
VolumeSequence read_sequence(const std::filesystem::path& dir);
std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir);
std::filesystem::path frame_path(const std::filesystem::path& dir, int index);

/// Image of one axis-aligned slice, rows x cols x channels, matching the pixel
/// grid of `axis_slice` in the renderer.
struct SliceImage {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<double> values;

  double& at(int r, int c, int ch) { return values[(static_cast<std::size_t>(r) * cols + c) * channels + ch]; }
  double at(int r, int c, int ch) const { return values[(static_cast<std::size_t>(r) * cols + c) * channels + ch]; }
};

SliceImage extract_slice(const RadarVolume& volume, Axis axis, int index);
int axis_length(const GridDims& dims, Axis axis);

}  // namespace stormsplat

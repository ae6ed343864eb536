#include "stormsplat/volume.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <limits>

#include "stormsplat/binary_io.hpp"
#include "stormsplat/errors.hpp"

namespace stormsplat {

namespace {

constexpr std::string_view kVolumeMagic = "RVOL0001";

}  // namespace

RadarVolume::RadarVolume(GridDims dims, int channels, std::array<float, 3> spacing, int timestamp)
    : dims_(dims), channels_(channels), spacing_(spacing), timestamp_(timestamp) {
  if (dims.depth <= 0 || dims.height <= 0 || dims.width <= 0 || channels <= 0) {
    throw ShapeError("volume dimensions must be positive");
  }
  values_.assign(dims.voxel_count() * static_cast<std::size_t>(channels), 0.0f);
}

void RadarVolume::validate(std::span<const bool> nonnegative_channels) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const float v = values_[i];
    if (!std::isfinite(v)) {
      throw ValueError("volume value at linear index " + std::to_string(i) + " is not finite");
    }
    const auto c = i % static_cast<std::size_t>(channels_);
    if (c < nonnegative_channels.size() && nonnegative_channels[c] && v < 0.0f) {
      throw ValueError("negative value in non-negative channel " + std::to_string(c));
    }
  }
}

std::vector<bool> VolumeMeta::nonnegative_flags() const {
  std::vector<bool> flags;
  flags.reserve(channels.size());
  for (const auto& c : channels) flags.push_back(c.nonnegative);
  return flags;
}

void VolumeSequence::validate() const {
  if (frames.empty()) throw ShapeError("sequence has no frames");
  const auto& first = frames.front();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    if (f.dims() != first.dims() || f.channels() != first.channels() || f.spacing() != first.spacing()) {
      throw ShapeError("frame " + std::to_string(i) + " differs in shape from frame 0");
    }
    if (i > 0 && f.timestamp() != frames[i - 1].timestamp() + 1) {
      throw ValueError("timestamps must increase by exactly one (frame " + std::to_string(i) + ")");
    }
  }
}

Eigen::Vector3d FlowGrid::nearest(const Eigen::Vector3d& p) const {
  auto clamp_index = [](double coord, int n) {
    const int i = static_cast<int>(std::floor(coord));
    return std::clamp(i, 0, n - 1);
  };
  return at(clamp_index(p.z(), dims_.depth), clamp_index(p.y(), dims_.height), clamp_index(p.x(), dims_.width));
}

Eigen::Vector3d FlowGrid::trilinear(const Eigen::Vector3d& p) const {
  // Continuous voxel coordinates relative to centers.
  auto split = [](double coord, int n, int& i0, int& i1, double& t) {
    const double c = std::clamp(coord - 0.5, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int>(std::floor(c));
    i1 = std::min(i0 + 1, n - 1);
    t = c - i0;
  };
  int d0, d1, h0, h1, w0, w1;
  double td, th, tw;
  split(p.z(), dims_.depth, d0, d1, td);
  split(p.y(), dims_.height, h0, h1, th);
  split(p.x(), dims_.width, w0, w1, tw);
  Eigen::Vector3d out = Eigen::Vector3d::Zero();
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      for (int c = 0; c < 2; ++c) {
        const double weight = (a ? td : 1 - td) * (b ? th : 1 - th) * (c ? tw : 1 - tw);
        out += weight * at(a ? d1 : d0, b ? h1 : h0, c ? w1 : w0);
      }
    }
  }
  return out;
}

RadarVolume FlowGrid::to_volume() const {
  RadarVolume v(dims_, 3);
  auto values = v.values();
  for (std::size_t i = 0; i < data_.size(); ++i) values[i] = static_cast<float>(data_[i]);
  return v;
}

FlowGrid FlowGrid::from_volume(const RadarVolume& volume) {
  if (volume.channels() != 3) throw ShapeError("flow volumes must have exactly 3 channels");
  FlowGrid flow(volume.dims());
  auto values = volume.values();
  for (std::size_t i = 0; i < values.size(); ++i) flow.data_[i] = values[i];
  return flow;
}

std::vector<std::uint8_t> encode_volume(const RadarVolume& volume) {
  io::ByteWriter out;
  out.magic(kVolumeMagic);
  out.u32(static_cast<std::uint32_t>(volume.dims().depth));
  out.u32(static_cast<std::uint32_t>(volume.dims().height));
  out.u32(static_cast<std::uint32_t>(volume.dims().width));
  out.u32(static_cast<std::uint32_t>(volume.channels()));
  for (float s : volume.spacing()) out.f32(s);
  out.f32_array(volume.values());
  return out.take();
}

RadarVolume decode_volume(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes);
  in.expect_magic(kVolumeMagic);
  const std::uint32_t depth = in.u32("depth");
  const std::uint32_t height = in.u32("height");
  const std::uint32_t width = in.u32("width");
  const std::uint32_t channels = in.u32("channels");
  const std::pair<const char*, std::uint32_t> fields[] = {
      {"depth", depth}, {"height", height}, {"width", width}, {"channels", channels}};
  for (const auto& [name, value] : fields) {
    if (value == 0) throw FormatError(name, "must be positive");
    if (value > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
      throw FormatError(name, "dimension overflow");
    }
  }
  std::array<float, 3> spacing{};
  for (int i = 0; i < 3; ++i) spacing[i] = in.f32("spacing");
  // Overflow check on the payload size before allocating anything.
  unsigned long long count = 1;
  for (const auto& [name, value] : fields) {
    if (count > std::numeric_limits<std::size_t>::max() / 4 / value) {
      throw FormatError(name, "dimension overflow: voxel count exceeds addressable size");
    }
    count *= value;
  }
  if (count * 4 > in.remaining()) {
    throw FormatError("values", "truncated payload: expected " + std::to_string(count * 4) +
                                    " value bytes, found " + std::to_string(in.remaining()));
  }
  RadarVolume volume(GridDims{static_cast<int>(depth), static_cast<int>(height), static_cast<int>(width)},
                     static_cast<int>(channels), spacing);
  in.f32_array("values", volume.values());
  in.expect_end("values");
  return volume;
}

void write_volume(const RadarVolume& volume, const std::filesystem::path& path) {
  io::write_file(path, encode_volume(volume));
}

RadarVolume read_volume(const std::filesystem::path& path) { return decode_volume(io::read_file(path)); }

std::filesystem::path meta_path_for(const std::filesystem::path& data_path) {
  auto p = data_path;
  p.replace_extension(".meta.json");
  return p;
}

void write_volume_meta(const VolumeMeta& meta, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["frame_interval_minutes"] = meta.frame_interval_minutes;
  j["channels"] = nlohmann::ordered_json::array();
  for (const auto& c : meta.channels) {
    j["channels"].push_back({{"name", c.name}, {"unit", c.unit}, {"nonnegative", c.nonnegative}});
  }
  io::write_text(path, j.dump(2) + "\n");
}

VolumeMeta read_volume_meta(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(io::read_text(path));
  VolumeMeta meta;
  meta.frame_interval_minutes = j.value("frame_interval_minutes", meta.frame_interval_minutes);
  if (j.contains("channels")) {
    meta.channels.clear();
    for (const auto& c : j.at("channels")) {
      ChannelInfo info;
      info.name = c.value("name", info.name);
      info.unit = c.value("unit", info.unit);
      info.nonnegative = c.value("nonnegative", info.nonnegative);
      meta.channels.push_back(info);
    }
  }
  return meta;
}

std::filesystem::path frame_path(const std::filesystem::path& dir, int index) {
  char name[32];
  std::snprintf(name, sizeof name, "frame_%04d.rvol", index);
  return dir / name;
}

std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".rvol") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_sequence(const VolumeSequence& sequence, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
    const auto path = frame_path(dir, static_cast<int>(i));
    write_volume(sequence.frames[i], path);
    write_volume_meta(sequence.meta, meta_path_for(path));
  }
}

VolumeSequence read_sequence(const std::filesystem::path& dir) {
  VolumeSequence seq;
  const auto paths = list_frames(dir);
  if (paths.empty()) throw ValueError("no .rvol frames in '" + dir.string() + "'");
  for (std::size_t i = 0; i < paths.size(); ++i) {
    auto v = read_volume(paths[i]);
    v.set_timestamp(static_cast<int>(i));
    seq.frames.push_back(std::move(v));
  }
  const auto meta = meta_path_for(paths.front());
  if (std::filesystem::exists(meta)) {
    seq.meta = read_volume_meta(meta);
  } else {
    seq.meta.channels.assign(static_cast<std::size_t>(seq.frames.front().channels()), ChannelInfo{});
  }
  seq.validate();
  return seq;
}

int axis_length(const GridDims& dims, Axis axis) {
  switch (axis) {
    case Axis::x: return dims.width;
    case Axis::y: return dims.height;
    case Axis::z: return dims.depth;
  }
  return 0;
}

SliceImage extract_slice(const RadarVolume& volume, Axis axis, int index) {
  const auto& dims = volume.dims();
  if (index < 0 || index >= axis_length(dims, axis)) {
    throw ValueError("slice index " + std::to_string(index) + " out of range");
  }
  SliceImage img;
  img.channels = volume.channels();
  switch (axis) {
    case Axis::z: img.rows = dims.height; img.cols = dims.width; break;
    case Axis::y: img.rows = dims.depth; img.cols = dims.width; break;
    case Axis::x: img.rows = dims.depth; img.cols = dims.height; break;
  }
  img.values.resize(static_cast<std::size_t>(img.rows) * img.cols * img.channels);
  for (int r = 0; r < img.rows; ++r) {
    for (int c = 0; c < img.cols; ++c) {
      int d = 0, h = 0, w = 0;
      switch (axis) {
        case Axis::z: d = index; h = r; w = c; break;
        case Axis::y: d = r; h = index; w = c; break;
        case Axis::x: d = r; h = c; w = index; break;
      }
      for (int ch = 0; ch < img.channels; ++ch) img.at(r, c, ch) = volume.at(d, h, w, ch);
    }
  }
  return img;
}

}  // namespace stormsplat

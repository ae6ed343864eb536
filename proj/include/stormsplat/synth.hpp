#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stormsplat/volume.hpp"

namespace stormsplat {

/// One anisotropic echo cell. Positions and sigmas are in voxel units of the
/// world frame (x = width, y = height, z = depth).
struct SynthBlob {
  Eigen::Vector3d center{0.0, 0.0, 0.0};
  Eigen::Vector3d sigma{1.0, 1.0, 1.0};
  double amplitude = 1.0;
  /// Displacement per frame.
  Eigen::Vector3d velocity{0.0, 0.0, 0.0};
  /// Amplitude multiplier applied once per frame.
  double growth = 1.0;
  /// From this frame on the blob contributes nothing.
  std::optional<int> dissipation_frame;

  double amplitude_at(int frame) const;
  Eigen::Vector3d center_at(int frame) const { return center + velocity * frame; }
};

struct SynthSpec {
  std::vector<SynthBlob> blobs;
  /// Standard deviation of additive Gaussian noise; frames are clamped at zero
  /// afterwards so they stay non-negative.
  double noise_level = 0.0;
  std::uint64_t seed = 0;
  double frame_interval_minutes = 6.0;
};

SynthSpec parse_synth_spec(const std::string& json_text);
std::string synth_spec_to_json(const SynthSpec& spec);

struct SynthResult {
  VolumeSequence sequence;
  /// true_flow[t] is the displacement from frame t to frame t + 1.
  std::vector<FlowGrid> true_flow;
};

/// Sum of blob fields evaluated at voxel centers for every frame, plus the
/// per-voxel displacement induced by the blob velocities (contribution
/// weighted where blobs overlap, zero where no blob contributes).
SynthResult synth_sequence(const SynthSpec& spec, int frames, GridDims dims);

/// Field value of a single blob at a world position for a given frame.
double blob_field(const SynthBlob& blob, int frame, const Eigen::Vector3d& position);

}  // namespace stormsplat

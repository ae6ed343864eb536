#include "stormsplat/synth.hpp"

#include <json.hpp>

#include <cmath>
#include <random>

#include "stormsplat/errors.hpp"

namespace stormsplat {

namespace {

Eigen::Vector3d read_vec3(const nlohmann::json& j, const char* key, const Eigen::Vector3d& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw ValueError(std::string("'") + key + "' must be a 3-element array");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

}  // namespace

double SynthBlob::amplitude_at(int frame) const {
  if (dissipation_frame && frame >= *dissipation_frame) return 0.0;
  return amplitude * std::pow(growth, frame);
}

double blob_field(const SynthBlob& blob, int frame, const Eigen::Vector3d& position) {
  const double a = blob.amplitude_at(frame);
  if (a == 0.0) return 0.0;
  const Eigen::Vector3d d = (position - blob.center_at(frame)).cwiseQuotient(blob.sigma);
  return a * std::exp(-0.5 * d.squaredNorm());
}

SynthSpec parse_synth_spec(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  SynthSpec spec;
  spec.noise_level = j.value("noise_level", 0.0);
  spec.seed = j.value("seed", std::uint64_t{0});
  spec.frame_interval_minutes = j.value("frame_interval_minutes", spec.frame_interval_minutes);
  for (const auto& b : j.value("blobs", nlohmann::json::array())) {
    SynthBlob blob;
    blob.center = read_vec3(b, "center", blob.center);
    blob.sigma = read_vec3(b, "sigma", blob.sigma);
    blob.amplitude = b.value("amplitude", blob.amplitude);
    blob.velocity = read_vec3(b, "velocity", blob.velocity);
    blob.growth = b.value("growth", blob.growth);
    if (b.contains("dissipation_frame") && !b.at("dissipation_frame").is_null()) {
      blob.dissipation_frame = b.at("dissipation_frame").get<int>();
    }
    spec.blobs.push_back(blob);
  }
  return spec;
}

std::string synth_spec_to_json(const SynthSpec& spec) {
  nlohmann::ordered_json j;
  j["seed"] = spec.seed;
  j["noise_level"] = spec.noise_level;
  j["frame_interval_minutes"] = spec.frame_interval_minutes;
  j["blobs"] = nlohmann::ordered_json::array();
  for (const auto& b : spec.blobs) {
    nlohmann::ordered_json jb;
    jb["center"] = {b.center.x(), b.center.y(), b.center.z()};
    jb["sigma"] = {b.sigma.x(), b.sigma.y(), b.sigma.z()};
    jb["amplitude"] = b.amplitude;
    jb["velocity"] = {b.velocity.x(), b.velocity.y(), b.velocity.z()};
    jb["growth"] = b.growth;
    jb["dissipation_frame"] = b.dissipation_frame ? nlohmann::ordered_json(*b.dissipation_frame) : nullptr;
    j["blobs"].push_back(jb);
  }
  return j.dump(2);
}

SynthResult synth_sequence(const SynthSpec& spec, int frames, GridDims dims) {
  if (spec.blobs.empty()) throw ValueError("synthetic spec is empty: at least one blob is required");
  if (frames < 2) throw ValueError("synthetic sequences need at least 2 frames");
  if (dims.voxel_count() == 0) throw ShapeError("synthetic grid must be non-empty");
  for (const auto& b : spec.blobs) {
    if (b.amplitude < 0.0 || b.growth < 0.0) throw ValueError("blob amplitudes must be non-negative");
    if (!b.velocity.allFinite() || !b.center.allFinite()) throw ValueError("blob center/velocity must be finite");
    if ((b.sigma.array() <= 0.0).any()) throw ValueError("blob sigma must be positive");
  }

  SynthResult result;
  result.sequence.meta.frame_interval_minutes = spec.frame_interval_minutes;
  result.sequence.meta.channels = {ChannelInfo{}};
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  for (int t = 0; t < frames; ++t) {
    RadarVolume volume(dims, 1, {1.0f, 1.0f, 1.0f}, t);
    const bool has_flow = t + 1 < frames;
    FlowGrid flow(has_flow ? dims : GridDims{});
    for (int d = 0; d < dims.depth; ++d) {
      for (int h = 0; h < dims.height; ++h) {
        for (int w = 0; w < dims.width; ++w) {
          const Eigen::Vector3d p(w + 0.5, h + 0.5, d + 0.5);
          double value = 0.0;
          double weight_sum = 0.0;
          Eigen::Vector3d weighted_velocity = Eigen::Vector3d::Zero();
          for (const auto& blob : spec.blobs) {
            const double contribution = blob_field(blob, t, p);
            value += contribution;
            weight_sum += contribution;
            weighted_velocity += contribution * blob.velocity;
          }
          if (spec.noise_level > 0.0) value = std::max(0.0, value + spec.noise_level * noise(rng));
          volume.at(d, h, w, 0) = static_cast<float>(value);
          if (has_flow && weight_sum > 0.0) flow.set(d, h, w, weighted_velocity / weight_sum);
        }
      }
    }
    result.sequence.frames.push_back(std::move(volume));
    if (has_flow) result.true_flow.push_back(std::move(flow));
  }
  return result;
}

}  // namespace stormsplat

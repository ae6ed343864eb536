#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stormsplat/constraints.hpp"
#include "stormsplat/flow.hpp"
#include "stormsplat/gaussians.hpp"
#include "stormsplat/image_loss.hpp"
#include "stormsplat/renderer.hpp"
#include "stormsplat/volume.hpp"

namespace stormsplat {

/// Multipliers applied to the scheduled learning rate per parameter block.
/// Zero means automatic: the largest grid extent for positions and the data
/// range for features.
struct LearningRateScales {
  double position = 0.0;
  double feature = 0.0;
  double log_scale = 2.5;
  double rotation = 0.5;
};

struct ReconConfig {
  int gaussians = 4096;
  double sample_fraction = 0.10;
  double init_jitter = 0.5;
  int iters_backward = 5000;
  int iters_forward_position = 5000;
  int iters_forward_full = 5000;
  double lr_start = 0.002;
  double lr_end = 0.0002;
  LearningRateScales lr_scale;
  double lambda_rec = 1.0;
  double lambda_ssim = 0.2;
  double lambda_local = 1e-2;
  double lambda_global = 1e-3;
  int slices_per_axis = 8;
  std::uint64_t seed = 0;
  /// Voxels whose primary channel is at or below this value count as null.
  double null_threshold = 0.0;
  double blur_sigma = 2.0;
  /// Clamp of the target distribution on range-normalized data; zero picks
  /// default_tau per frame.
  double tau = 0.0;
  /// Lower bound applied to voxel values before inverting the softplus.
  double feature_floor = 1e-2;
  bool backward_enabled = true;
  FlowLookup flow_lookup = FlowLookup::nearest;
  PseudoFlowOptions flow;
  /// Kernel values below 1e-4 are skipped while optimizing.
  RenderOptions render{.mahalanobis_cutoff = 2.0 * 9.210340371976184};
  /// Iterations between progress records inside a phase.
  int log_every = 100;

  /// Throws ValueError naming the first invalid field.
  void validate() const;
};

/// Unknown keys and wrongly typed values throw ValueError.
ReconConfig recon_config_from_json(const std::string& text);
/// Every field, defaults included, in a fixed key order.
std::string recon_config_to_json(const ReconConfig& config);

enum class InitStatus { ok, all_null };

/// Initial Gaussians for one frame: a `sample_fraction` share of the non-null
/// voxels (capped at the budget), the rest on null voxels, each jittered
/// within +-init_jitter of the voxel center with features from that voxel.
/// With `extra`, half of the budget takes positions from `extra` instead.
GaussianGroup init_gaussians(const RadarVolume& volume, const ReconConfig& config, std::mt19937_64& rng,
                             const std::vector<FeatureActivation>& activations, const GaussianGroup* extra = nullptr,
                             InitStatus* status = nullptr);

struct PlaneRef {
  Axis axis;
  int index;
};

struct ReconLoss {
  double value = 0.0;
  double l1 = 0.0;
  double ssim = 0.0;
  GaussianGradients gradient;
};

/// Mean over `planes` of the image loss between rendered and true slices.
ReconLoss reconstruction_loss(const GaussianGroup& group, const RadarVolume& truth, const std::vector<PlaneRef>& planes,
                              double data_range, const ImageLossWeights& weights, const RenderOptions& options = {});

/// Flows between consecutive frames: forward[t] takes frame t to t + 1,
/// backward[t] takes frame t + 1 to t.
struct SequenceFlows {
  std::vector<FlowGrid> forward;
  std::vector<FlowGrid> backward;
};

SequenceFlows compute_flows(const VolumeSequence& sequence, const PseudoFlowOptions& options = {});

struct ProgressRecord {
  std::string stage;
  int frame = 0;
  int iteration = 0;
  double total = 0.0;
  double local = 0.0;
  double global = 0.0;
  double rec = 0.0;
  std::optional<double> psnr;
  /// Parameter blocks whose update was skipped for a non-finite gradient.
  int skipped_blocks = 0;

  std::string to_json() const;
};

using ProgressSink = std::function<void(const ProgressRecord&)>;

/// Stages that draw from their own random stream.
enum class ReconStage : std::uint32_t { init_backward = 1, backward = 2, init_forward = 3, forward_position = 4, forward_full = 5 };

/// Random stream of one stage and frame, seeded from the config seed.
std::mt19937_64 stage_stream(const ReconConfig& config, ReconStage stage, std::size_t frame);

/// Position-only pass from the last frame back to the first; returns the
/// group as positioned at frame 0. The pass starts from init_gaussians on the
/// last frame drawn from stage_stream(init_backward, last).
GaussianGroup backward_pass(const VolumeSequence& sequence, const SequenceFlows& flows, const ReconConfig& config,
                            const ProgressSink& sink = {});

struct ReconResult {
  GaussianSequence sequence;
  /// Rendered PSNR per frame over every axis slice, range = sequence maximum.
  std::vector<double> frame_psnr;
};

/// Frame-by-frame forward optimization starting from `initial`.
ReconResult forward_pass(const VolumeSequence& sequence, const SequenceFlows& flows, const GaussianGroup& initial,
                         const ReconConfig& config, const ProgressSink& sink = {});

struct CheckpointOptions {
  std::filesystem::path path;
  bool resume = false;
};

/// Full pipeline: flows, backward pass (unless disabled), forward init and
/// forward pass. With a checkpoint path the state is saved after every frame
/// and `resume` continues from it.
ReconResult reconstruct(const VolumeSequence& sequence, const ReconConfig& config, const ProgressSink& sink = {},
                        const CheckpointOptions& checkpoint = {}, const SequenceFlows* flows = nullptr);

/// Largest value of any channel over the sequence, or 1 when nothing is positive.
double sequence_data_range(const VolumeSequence& sequence);

/// PSNR of one frame with the squared error pooled over every axis slice.
double slice_psnr(const GaussianGroup& group, const RadarVolume& truth, double data_range,
                  const RenderOptions& options = {});

}  // namespace stormsplat

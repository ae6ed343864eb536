#include "stormsplat/reconstruct.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

#include "stormsplat/adam.hpp"
#include "stormsplat/binary_io.hpp"
#include "stormsplat/errors.hpp"
#include "stormsplat/metrics.hpp"

namespace stormsplat {

void ReconConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ValueError(field + ": " + why); };
  if (gaussians < 1) fail("gaussians", "must be at least 1");
  if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) fail("sample_fraction", "must lie in (0, 1]");
  if (!(init_jitter >= 0.0)) fail("init_jitter", "must be non-negative");
  if (iters_backward < 1) fail("iters_backward", "must be at least 1");
  if (iters_forward_position < 1) fail("iters_forward_position", "must be at least 1");
  if (iters_forward_full < 1) fail("iters_forward_full", "must be at least 1");
  if (!(lr_end > 0.0)) fail("lr_end", "must be positive");
  if (!(lr_start >= lr_end)) fail("lr_start", "must be at least lr_end");
  if (lr_scale.position < 0.0 || lr_scale.feature < 0.0 || !(lr_scale.log_scale > 0.0) || !(lr_scale.rotation > 0.0)) {
    fail("lr_scale", "multipliers must be positive (zero allowed for automatic ones)");
  }
  if (lambda_rec < 0.0 || lambda_ssim < 0.0 || lambda_local < 0.0 || lambda_global < 0.0) {
    fail("lambda", "loss weights must be non-negative");
  }
  if (slices_per_axis < 1) fail("slices_per_axis", "must be at least 1");
  if (!(blur_sigma > 0.0)) fail("blur_sigma", "must be positive");
  if (tau < 0.0) fail("tau", "must be non-negative");
  if (!(feature_floor > 0.0)) fail("feature_floor", "must be positive");
  if (flow.solver.levels < 1 || flow.solver.iterations < 1 || flow.solver.warps < 1 || !(flow.solver.alpha > 0.0)) {
    fail("flow", "invalid solver options");
  }
  if (flow.slice_stride < 1) fail("flow_slice_stride", "must be at least 1");
  if (!(render.mahalanobis_cutoff > 0.0)) fail("render_cutoff", "must be positive");
  if (render.tile_size < 1) fail("render_tile_size", "must be at least 1");
  if (log_every < 1) fail("log_every", "must be at least 1");
}

namespace {

using Json = nlohmann::ordered_json;

struct Field {
  const char* name;
  std::function<Json(const ReconConfig&)> get;
  std::function<void(ReconConfig&, const Json&)> set;
};

template <typename T, typename Member>
Field field(const char* name, Member member) {
  return {name, [member](const ReconConfig& c) { return Json(member(const_cast<ReconConfig&>(c))); },
          [member](ReconConfig& c, const Json& j) { member(c) = j.get<T>(); }};
}

const std::vector<Field>& config_fields() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(field<int>("gaussians", [](ReconConfig& c) -> auto& { return c.gaussians; }));
    f.push_back(field<double>("sample_fraction", [](ReconConfig& c) -> auto& { return c.sample_fraction; }));
    f.push_back(field<double>("init_jitter", [](ReconConfig& c) -> auto& { return c.init_jitter; }));
    f.push_back(field<int>("iters_backward", [](ReconConfig& c) -> auto& { return c.iters_backward; }));
    f.push_back(field<int>("iters_forward_position", [](ReconConfig& c) -> auto& { return c.iters_forward_position; }));
    f.push_back(field<int>("iters_forward_full", [](ReconConfig& c) -> auto& { return c.iters_forward_full; }));
    f.push_back(field<double>("lr_start", [](ReconConfig& c) -> auto& { return c.lr_start; }));
    f.push_back(field<double>("lr_end", [](ReconConfig& c) -> auto& { return c.lr_end; }));
    f.push_back(field<double>("lr_scale_position", [](ReconConfig& c) -> auto& { return c.lr_scale.position; }));
    f.push_back(field<double>("lr_scale_feature", [](ReconConfig& c) -> auto& { return c.lr_scale.feature; }));
    f.push_back(field<double>("lr_scale_log_scale", [](ReconConfig& c) -> auto& { return c.lr_scale.log_scale; }));
    f.push_back(field<double>("lr_scale_rotation", [](ReconConfig& c) -> auto& { return c.lr_scale.rotation; }));
    f.push_back(field<double>("lambda_rec", [](ReconConfig& c) -> auto& { return c.lambda_rec; }));
    f.push_back(field<double>("lambda_ssim", [](ReconConfig& c) -> auto& { return c.lambda_ssim; }));
    f.push_back(field<double>("lambda_local", [](ReconConfig& c) -> auto& { return c.lambda_local; }));
    f.push_back(field<double>("lambda_global", [](ReconConfig& c) -> auto& { return c.lambda_global; }));
    f.push_back(field<int>("slices_per_axis", [](ReconConfig& c) -> auto& { return c.slices_per_axis; }));
    f.push_back(field<std::uint64_t>("seed", [](ReconConfig& c) -> auto& { return c.seed; }));
    f.push_back(field<double>("null_threshold", [](ReconConfig& c) -> auto& { return c.null_threshold; }));
    f.push_back(field<double>("blur_sigma", [](ReconConfig& c) -> auto& { return c.blur_sigma; }));
    f.push_back(field<double>("tau", [](ReconConfig& c) -> auto& { return c.tau; }));
    f.push_back(field<double>("feature_floor", [](ReconConfig& c) -> auto& { return c.feature_floor; }));
    f.push_back(field<bool>("backward_enabled", [](ReconConfig& c) -> auto& { return c.backward_enabled; }));
    f.push_back({"flow_lookup",
                 [](const ReconConfig& c) { return Json(c.flow_lookup == FlowLookup::nearest ? "nearest" : "trilinear"); },
                 [](ReconConfig& c, const Json& j) {
                   const auto s = j.get<std::string>();
                   if (s == "nearest") {
                     c.flow_lookup = FlowLookup::nearest;
                   } else if (s == "trilinear") {
                     c.flow_lookup = FlowLookup::trilinear;
                   } else {
                     throw ValueError("flow_lookup: expected 'nearest' or 'trilinear', got '" + s + "'");
                   }
                 }});
    f.push_back(field<int>("flow_levels", [](ReconConfig& c) -> auto& { return c.flow.solver.levels; }));
    f.push_back(field<double>("flow_alpha", [](ReconConfig& c) -> auto& { return c.flow.solver.alpha; }));
    f.push_back(field<int>("flow_iterations", [](ReconConfig& c) -> auto& { return c.flow.solver.iterations; }));
    f.push_back(field<int>("flow_warps", [](ReconConfig& c) -> auto& { return c.flow.solver.warps; }));
    f.push_back(field<int>("flow_slice_stride", [](ReconConfig& c) -> auto& { return c.flow.slice_stride; }));
    f.push_back(field<double>("render_cutoff", [](ReconConfig& c) -> auto& { return c.render.mahalanobis_cutoff; }));
    f.push_back(field<int>("render_tile_size", [](ReconConfig& c) -> auto& { return c.render.tile_size; }));
    f.push_back(field<int>("log_every", [](ReconConfig& c) -> auto& { return c.log_every; }));
    return f;
  }();
  return fields;
}

}  // namespace

ReconConfig recon_config_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValueError("config must be a JSON object");
  ReconConfig config;
  for (const auto& [key, value] : j.items()) {
    const auto& fields = config_fields();
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return key == f.name; });
    if (it == fields.end()) throw ValueError("unknown config key '" + key + "'");
    try {
      it->set(config, value);
    } catch (const nlohmann::json::exception& e) {
      throw ValueError(key + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

std::string recon_config_to_json(const ReconConfig& config) {
  Json j;
  for (const auto& f : config_fields()) j[f.name] = f.get(config);
  return j.dump(2) + "\n";
}

std::string ProgressRecord::to_json() const {
  Json j;
  j["stage"] = stage;
  j["frame"] = frame;
  j["iteration"] = iteration;
  j["total"] = total;
  j["local"] = local;
  j["global"] = global;
  j["rec"] = rec;
  if (psnr) j["psnr"] = *psnr;
  if (skipped_blocks > 0) j["skipped_blocks"] = skipped_blocks;
  return j.dump();
}

namespace {

double initial_feature(double value, FeatureActivation activation, double floor) {
  return activation == FeatureActivation::softplus ? softplus_inverse(std::max(value, floor)) : value;
}

void set_from_voxel(GaussianGroup& g, Eigen::Index row, const RadarVolume& v, int d, int h, int w, double floor) {
  for (Eigen::Index c = 0; c < g.feature_dim(); ++c) {
    g.features(row, c) = initial_feature(v.at(d, h, w, static_cast<int>(c)), g.activations[static_cast<std::size_t>(c)], floor);
  }
}

// k distinct indices from [0, n) by a partial Fisher-Yates shuffle.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace

GaussianGroup init_gaussians(const RadarVolume& volume, const ReconConfig& config, std::mt19937_64& rng,
                             const std::vector<FeatureActivation>& activations, const GaussianGroup* extra,
                             InitStatus* status) {
  const auto& dims = volume.dims();
  const auto m = static_cast<std::size_t>(config.gaussians);
  std::size_t from_extra = 0;
  if (extra != nullptr && extra->size() > 0) from_extra = std::min(m / 2, static_cast<std::size_t>(extra->size()));
  const std::size_t fresh = m - from_extra;

  std::vector<std::size_t> non_null, null;
  for (std::size_t k = 0; k < dims.voxel_count(); ++k) {
    (volume.values()[k * static_cast<std::size_t>(volume.channels())] > config.null_threshold ? non_null : null).push_back(k);
  }
  if (status) *status = non_null.empty() ? InitStatus::all_null : InitStatus::ok;

  std::vector<std::size_t> voxels;
  if (non_null.empty()) {
    std::uniform_int_distribution<std::size_t> any(0, dims.voxel_count() - 1);
    for (std::size_t i = 0; i < fresh; ++i) voxels.push_back(any(rng));
  } else {
    const auto wanted = static_cast<std::size_t>(std::floor(config.sample_fraction * static_cast<double>(non_null.size())));
    for (std::size_t i : sample_without_replacement(non_null.size(), std::min(wanted, fresh), rng)) {
      voxels.push_back(non_null[i]);
    }
    const auto& filler = null.empty() ? non_null : null;
    std::uniform_int_distribution<std::size_t> pick(0, filler.size() - 1);
    while (voxels.size() < fresh) voxels.push_back(filler[pick(rng)]);
  }

  GaussianGroup g(static_cast<Eigen::Index>(m), volume.channels(), activations);
  std::uniform_real_distribution<double> jitter(-config.init_jitter, config.init_jitter);
  Eigen::Index row = 0;
  for (std::size_t k : voxels) {
    const int w = static_cast<int>(k % static_cast<std::size_t>(dims.width));
    const int h = static_cast<int>((k / static_cast<std::size_t>(dims.width)) % static_cast<std::size_t>(dims.height));
    const int d = static_cast<int>(k / (static_cast<std::size_t>(dims.width) * dims.height));
    const double jx = jitter(rng), jy = jitter(rng), jz = jitter(rng);
    g.positions.row(row) << w + 0.5 + jx, h + 0.5 + jy, d + 0.5 + jz;
    set_from_voxel(g, row, volume, d, h, w, config.feature_floor);
    ++row;
  }
  if (from_extra > 0) {
    for (std::size_t i : sample_without_replacement(static_cast<std::size_t>(extra->size()), from_extra, rng)) {
      const Eigen::Vector3d p = extra->positions.row(static_cast<Eigen::Index>(i)).transpose();
      g.positions.row(row) = p.transpose();
      const int w = std::clamp(static_cast<int>(std::floor(p.x())), 0, dims.width - 1);
      const int h = std::clamp(static_cast<int>(std::floor(p.y())), 0, dims.height - 1);
      const int d = std::clamp(static_cast<int>(std::floor(p.z())), 0, dims.depth - 1);
      set_from_voxel(g, row, volume, d, h, w, config.feature_floor);
      ++row;
    }
  }
  return g;
}

ReconLoss reconstruction_loss(const GaussianGroup& group, const RadarVolume& truth, const std::vector<PlaneRef>& planes,
                              double data_range, const ImageLossWeights& weights, const RenderOptions& options) {
  ReconLoss out;
  out.gradient = GaussianGradients::zeros(group.size(), group.feature_dim());
  if (planes.empty()) return out;
  const double share = 1.0 / static_cast<double>(planes.size());
  for (const auto& ref : planes) {
    const RenderPlane plane = axis_slice(ref.axis, ref.index, truth.dims());
    const auto rendered = render_plane(group, plane, options);
    const SliceImage gt = extract_slice(truth, ref.axis, ref.index);
    auto loss = image_loss(rendered.image, gt.values, gt.rows, gt.cols, gt.channels, data_range, weights);
    out.value += share * loss.value;
    out.l1 += share * loss.l1;
    out.ssim += share * loss.ssim;
    for (auto& g : loss.gradient) g *= share;
    out.gradient += render_plane_backward(group, plane, loss.gradient, options);
  }
  return out;
}

SequenceFlows compute_flows(const VolumeSequence& sequence, const PseudoFlowOptions& options) {
  SequenceFlows flows;
  for (std::size_t t = 0; t + 1 < sequence.length(); ++t) {
    flows.forward.push_back(pseudo_3d_flow(sequence.frames[t], sequence.frames[t + 1], options));
    flows.backward.push_back(pseudo_3d_flow(sequence.frames[t + 1], sequence.frames[t], options));
  }
  return flows;
}

double sequence_data_range(const VolumeSequence& sequence) {
  double range = 0.0;
  for (const auto& f : sequence.frames) {
    for (float v : f.values()) range = std::max(range, static_cast<double>(v));
  }
  return range > 0.0 ? range : 1.0;
}

std::mt19937_64 stage_stream(const ReconConfig& config, ReconStage stage, std::size_t frame) {
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed & 0xffffffffu), static_cast<std::uint32_t>(config.seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(frame)};
  return std::mt19937_64(seq);
}

double slice_psnr(const GaussianGroup& group, const RadarVolume& truth, double data_range, const RenderOptions& options) {
  double se = 0.0;
  std::size_t count = 0;
  for (Axis axis : {Axis::x, Axis::y, Axis::z}) {
    for (int i = 0; i < axis_length(truth.dims(), axis); ++i) {
      const auto rendered = render_plane(group, axis_slice(axis, i, truth.dims()), options);
      const SliceImage gt = extract_slice(truth, axis, i);
      for (std::size_t k = 0; k < gt.values.size(); ++k) se += std::pow(rendered.image[k] - gt.values[k], 2);
      count += gt.values.size();
    }
  }
  return psnr_from_mse(se / static_cast<double>(count), data_range);
}

namespace {

enum Stage : std::uint32_t { kInitBackward = 1, kBackward = 2, kInitForward = 3, kForwardPosition = 4, kForwardFull = 5 };

std::mt19937_64 stream(const ReconConfig& config, std::uint32_t stage, std::size_t frame) {
  return stage_stream(config, static_cast<ReconStage>(stage), frame);
}

struct Context {
  const ReconConfig& config;
  double data_range;
  double position_scale;
  double feature_scale;
  std::vector<FeatureActivation> activations;
};

Context make_context(const VolumeSequence& sequence, const ReconConfig& config) {
  const double range = sequence_data_range(sequence);
  return {config, range,
          config.lr_scale.position > 0.0 ? config.lr_scale.position : static_cast<double>(sequence.dims().max_extent()),
          config.lr_scale.feature > 0.0 ? config.lr_scale.feature : range,
          activations_from_flags(sequence.meta.nonnegative_flags())};
}

// Target distribution on range-normalized data so it is comparable with the
// unit-peak density render.
TargetDistribution frame_target(const RadarVolume& frame, const Context& ctx) {
  RadarVolume normalized = frame;
  for (auto& v : normalized.values()) v = static_cast<float>(v / ctx.data_range);
  const double tau = ctx.config.tau > 0.0
                         ? ctx.config.tau
                         : default_tau(normalized, ctx.config.blur_sigma, ctx.config.null_threshold / ctx.data_range);
  return target_distribution(normalized, ctx.config.blur_sigma, tau);
}

std::vector<PlaneRef> sample_planes(const GridDims& dims, int per_axis, std::mt19937_64& rng) {
  std::vector<PlaneRef> planes;
  for (Axis axis : {Axis::x, Axis::y, Axis::z}) {
    const auto n = static_cast<std::size_t>(axis_length(dims, axis));
    auto picks = sample_without_replacement(n, static_cast<std::size_t>(per_axis), rng);
    std::sort(picks.begin(), picks.end());
    for (std::size_t i : picks) planes.push_back({axis, static_cast<int>(i)});
  }
  return planes;
}

struct FrameProblem {
  const RadarVolume* truth = nullptr;
  const TargetDistribution* target = nullptr;
  const Points3* previous = nullptr;
  const FlowGrid* flow = nullptr;
};

Eigen::Map<Eigen::VectorXd> flat(Points3& m) { return {m.data(), m.size()}; }
Eigen::Map<Eigen::VectorXd> flat(FeatureMatrix& m) { return {m.data(), m.size()}; }
Eigen::Map<Eigen::VectorXd> flat(Quaternions& m) { return {m.data(), m.size()}; }

// Runs `iterations` Adam steps on one frame. With `full`, every parameter
// block is optimized and the image loss joins the constraint terms.
void optimize(GaussianGroup& g, const FrameProblem& problem, bool full, int iterations, const Context& ctx,
              std::mt19937_64& rng, const std::string& stage, int frame, const ProgressSink& sink) {
  const ReconConfig& cfg = ctx.config;
  const auto m = g.size();
  Adam adam_pos(m * 3), adam_feat(m * g.feature_dim()), adam_scale(m * 3), adam_rot(m * 4);
  const ImageLossWeights weights{cfg.lambda_rec, cfg.lambda_ssim};
  int skipped = 0;
  for (int it = 0; it < iterations; ++it) {
    const double frac = iterations > 1 ? static_cast<double>(it) / (iterations - 1) : 0.0;
    const double lr = cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, frac);
    auto grads = GaussianGradients::zeros(m, g.feature_dim());
    ProgressRecord rec;
    if (cfg.lambda_local > 0.0 && problem.previous != nullptr) {
      const auto l = local_loss(*problem.previous, g.positions, *problem.flow, cfg.flow_lookup);
      rec.local = l.value;
      grads.positions += cfg.lambda_local * l.gradient;
    }
    if (cfg.lambda_global > 0.0) {
      auto l = global_loss(g, *problem.target, cfg.render);
      rec.global = l.value;
      l.gradient *= cfg.lambda_global;
      grads += l.gradient;
    }
    if (full && (cfg.lambda_rec > 0.0 || cfg.lambda_ssim > 0.0)) {
      const auto planes = sample_planes(problem.truth->dims(), cfg.slices_per_axis, rng);
      const auto l = reconstruction_loss(g, *problem.truth, planes, ctx.data_range, weights, cfg.render);
      rec.rec = l.value;
      grads += l.gradient;
    }
    rec.total = cfg.lambda_local * rec.local + cfg.lambda_global * rec.global + rec.rec;

    skipped += !adam_pos.step(flat(g.positions), flat(grads.positions), lr * ctx.position_scale);
    if (full) {
      skipped += !adam_feat.step(flat(g.features), flat(grads.features), lr * ctx.feature_scale);
      skipped += !adam_scale.step(flat(g.log_scales), flat(grads.log_scales), lr * cfg.lr_scale.log_scale);
      skipped += !adam_rot.step(flat(g.rotations), flat(grads.rotations), lr * cfg.lr_scale.rotation);
    }
    if (sink && (it % cfg.log_every == 0 || it + 1 == iterations)) {
      rec.stage = stage;
      rec.frame = frame;
      rec.iteration = it;
      rec.skipped_blocks = skipped;
      sink(rec);
    }
  }
}

int per_frame(int total, std::size_t parts) {
  return std::max(1, total / static_cast<int>(std::max<std::size_t>(parts, 1)));
}

// Resumable state of a reconstruction run.
struct RunState {
  std::uint32_t stage = kBackward;  // kBackward or kForwardFull (forward stage)
  std::uint32_t next_frame = 0;
  GaussianGroup current;
  std::vector<GaussianGroup> frames;
  std::vector<double> psnr;
};

constexpr std::string_view kCheckpointMagic = "RCKP0001";

void write_group(io::ByteWriter& w, const GaussianGroup& g) {
  w.u32(static_cast<std::uint32_t>(g.size()));
  w.u32(static_cast<std::uint32_t>(g.feature_dim()));
  const FeatureMatrix packed = g.packed();
  w.f64_array(std::span<const double>(packed.data(), static_cast<std::size_t>(packed.size())));
}

GaussianGroup read_group(io::ByteReader& r, const std::vector<FeatureActivation>& activations) {
  const auto m = r.u32("count");
  const auto n = r.u32("feature_dim");
  if (n != activations.size()) throw FormatError("feature_dim", "checkpoint does not match the sequence channels");
  FeatureMatrix packed(m, 10 + n);
  r.f64_array("group", std::span<double>(packed.data(), static_cast<std::size_t>(packed.size())));
  return GaussianGroup::unpack(packed, n, activations);
}

void save_state(const RunState& s, const std::string& config_json, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic(kCheckpointMagic);
  const std::string_view text(config_json);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  w.u32(s.stage);
  w.u32(s.next_frame);
  write_group(w, s.current);
  w.u32(static_cast<std::uint32_t>(s.frames.size()));
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    write_group(w, s.frames[t]);
    w.f64(s.psnr[t]);
  }
  const auto tmp = path.string() + ".tmp";
  io::write_file(tmp, w.buffer());
  std::filesystem::rename(tmp, path);
}

RunState load_state(const std::filesystem::path& path, const std::string& config_json,
                    const std::vector<FeatureActivation>& activations) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic);
  const auto len = r.u32("config_length");
  const auto cfg = r.bytes("config", len);
  if (std::string(cfg.begin(), cfg.end()) != config_json) {
    throw ValueError("checkpoint " + path.string() + " was written with a different configuration");
  }
  RunState s;
  s.stage = r.u32("stage");
  s.next_frame = r.u32("next_frame");
  s.current = read_group(r, activations);
  const auto frames = r.u32("frames");
  for (std::uint32_t t = 0; t < frames; ++t) {
    s.frames.push_back(read_group(r, activations));
    s.psnr.push_back(r.f64("psnr"));
  }
  r.expect_end("checkpoint");
  return s;
}

// Moves every Gaussian by the reference flow at its position, which is where
// the local term is minimal. Without the local term the flow is not used.
void advect(GaussianGroup& g, const FlowGrid& flow, const ReconConfig& config) {
  if (!(config.lambda_local > 0.0)) return;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const Eigen::Vector3d p = g.positions.row(i).transpose();
    const Eigen::Vector3d d = config.flow_lookup == FlowLookup::trilinear ? flow.trilinear(p) : flow.nearest(p);
    g.positions.row(i) += d.transpose();
  }
}

// Position-only optimization of frame t - 1 starting from the group at t.
void backward_step(GaussianGroup& g, const VolumeSequence& sequence, const SequenceFlows& flows, std::size_t t,
                   int iterations, const Context& ctx, const ProgressSink& sink) {
  const Points3 previous = g.positions;
  advect(g, flows.backward[t - 1], ctx.config);
  const auto target = frame_target(sequence.frames[t - 1], ctx);
  FrameProblem problem{&sequence.frames[t - 1], &target, &previous, &flows.backward[t - 1]};
  auto rng = stream(ctx.config, kBackward, t);
  optimize(g, problem, false, iterations, ctx, rng, "backward", static_cast<int>(t - 1), sink);
}

void forward_step(GaussianGroup& g, const VolumeSequence& sequence, const SequenceFlows& flows, std::size_t t,
                  const Context& ctx, const ProgressSink& sink) {
  const std::size_t frames = sequence.length();
  const Points3 previous = g.positions;
  if (t > 0) advect(g, flows.forward[t - 1], ctx.config);
  const auto target = frame_target(sequence.frames[t], ctx);
  FrameProblem problem{&sequence.frames[t], &target, t > 0 ? &previous : nullptr,
                       t > 0 ? &flows.forward[t - 1] : nullptr};
  auto rng_pos = stream(ctx.config, kForwardPosition, t);
  optimize(g, problem, false, per_frame(ctx.config.iters_forward_position, frames), ctx, rng_pos, "forward_position",
           static_cast<int>(t), sink);
  auto rng_full = stream(ctx.config, kForwardFull, t);
  optimize(g, problem, true, per_frame(ctx.config.iters_forward_full, frames), ctx, rng_full, "forward_full",
           static_cast<int>(t), sink);
  g.normalize_rotations();
}

GaussianSequence to_sequence(const std::vector<GaussianGroup>& frames, const VolumeSequence& source) {
  GaussianSequence seq;
  seq.anchor = frames.front();
  for (std::size_t t = 1; t < frames.size(); ++t) seq.deltas.push_back(decompose(frames[t], frames.front()));
  seq.meta.dims = source.dims();
  for (const auto& c : source.meta.channels) seq.meta.channel_names.push_back(c.name);
  seq.meta.activations = seq.anchor.activations;
  return seq;
}

void report_frame(const ProgressSink& sink, int frame, double psnr) {
  if (!sink) return;
  ProgressRecord rec;
  rec.stage = "frame_done";
  rec.frame = frame;
  rec.psnr = psnr;
  sink(rec);
}

void check_inputs(const VolumeSequence& sequence, const SequenceFlows& flows, const ReconConfig& config) {
  config.validate();
  if (sequence.length() == 0) throw ValueError("reconstruction needs at least one frame");
  sequence.validate();
  if (flows.forward.size() + 1 != sequence.length() || flows.backward.size() + 1 != sequence.length()) {
    throw ShapeError("expected " + std::to_string(sequence.length() - 1) + " flow grids per direction, got " +
                     std::to_string(flows.forward.size()) + " forward and " + std::to_string(flows.backward.size()) +
                     " backward");
  }
}

}  // namespace

GaussianGroup backward_pass(const VolumeSequence& sequence, const SequenceFlows& flows, const ReconConfig& config,
                            const ProgressSink& sink) {
  check_inputs(sequence, flows, config);
  const Context ctx = make_context(sequence, config);
  const std::size_t last = sequence.length() - 1;
  auto rng = stream(config, kInitBackward, last);
  GaussianGroup g = init_gaussians(sequence.frames[last], config, rng, ctx.activations);
  const int iters = per_frame(config.iters_backward, last);
  for (std::size_t t = last; t >= 1; --t) backward_step(g, sequence, flows, t, iters, ctx, sink);
  return g;
}

ReconResult forward_pass(const VolumeSequence& sequence, const SequenceFlows& flows, const GaussianGroup& initial,
                         const ReconConfig& config, const ProgressSink& sink) {
  check_inputs(sequence, flows, config);
  const Context ctx = make_context(sequence, config);
  GaussianGroup g = initial;
  std::vector<GaussianGroup> frames;
  ReconResult result;
  for (std::size_t t = 0; t < sequence.length(); ++t) {
    forward_step(g, sequence, flows, t, ctx, sink);
    frames.push_back(g);
    result.frame_psnr.push_back(slice_psnr(g, sequence.frames[t], ctx.data_range, config.render));
    report_frame(sink, static_cast<int>(t), result.frame_psnr.back());
  }
  result.sequence = to_sequence(frames, sequence);
  return result;
}

ReconResult reconstruct(const VolumeSequence& sequence, const ReconConfig& config, const ProgressSink& sink,
                        const CheckpointOptions& checkpoint, const SequenceFlows* flows) {
  config.validate();
  if (sequence.length() == 0) throw ValueError("reconstruction needs at least one frame");
  sequence.validate();
  SequenceFlows computed;
  if (flows == nullptr) {
    computed = compute_flows(sequence, config.flow);
    flows = &computed;
  }
  check_inputs(sequence, *flows, config);
  const Context ctx = make_context(sequence, config);
  const std::string config_json = recon_config_to_json(config);
  const std::size_t frames = sequence.length();
  const std::size_t last = frames - 1;
  const bool saving = !checkpoint.path.empty();

  RunState state;
  if (saving && checkpoint.resume && std::filesystem::exists(checkpoint.path)) {
    state = load_state(checkpoint.path, config_json, ctx.activations);
  } else {
    if (config.backward_enabled && last > 0) {
      auto rng = stream(config, kInitBackward, last);
      state.current = init_gaussians(sequence.frames[last], config, rng, ctx.activations);
      state.stage = kBackward;
      state.next_frame = static_cast<std::uint32_t>(last);
    } else {
      state.stage = kForwardFull;
      state.next_frame = 0;
    }
    if (saving) save_state(state, config_json, checkpoint.path);
  }

  if (state.stage == kBackward) {
    const int iters = per_frame(config.iters_backward, last);
    while (state.next_frame >= 1) {
      backward_step(state.current, sequence, *flows, state.next_frame, iters, ctx, sink);
      --state.next_frame;
      if (saving) save_state(state, config_json, checkpoint.path);
    }
    state.stage = kForwardFull;
  }
  if (state.stage == kForwardFull && state.next_frame == 0 && state.frames.empty()) {
    auto rng = stream(config, kInitForward, 0);
    const bool with_backward = config.backward_enabled && last > 0;
    state.current = init_gaussians(sequence.frames[0], config, rng, ctx.activations,
                                   with_backward ? &state.current : nullptr);
  }
  while (state.next_frame < frames) {
    const std::size_t t = state.next_frame;
    forward_step(state.current, sequence, *flows, t, ctx, sink);
    state.frames.push_back(state.current);
    state.psnr.push_back(slice_psnr(state.current, sequence.frames[t], ctx.data_range, config.render));
    report_frame(sink, static_cast<int>(t), state.psnr.back());
    ++state.next_frame;
    if (saving) save_state(state, config_json, checkpoint.path);
  }
  ReconResult result;
  result.sequence = to_sequence(state.frames, sequence);
  result.frame_psnr = state.psnr;
  return result;
}

}  // namespace stormsplat

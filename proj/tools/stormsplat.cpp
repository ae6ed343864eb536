#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "stormsplat/binary_io.hpp"
#include "stormsplat/errors.hpp"
#include "stormsplat/gaussians.hpp"
#include "stormsplat/metrics.hpp"
#include "stormsplat/model.hpp"
#include "stormsplat/parallel.hpp"
#include "stormsplat/reconstruct.hpp"
#include "stormsplat/renderer.hpp"
#include "stormsplat/synth.hpp"
#include "stormsplat/volume.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace stormsplat {
namespace {

constexpr const char* kVersion = "stormsplat 0.1.0";

/// Exit status 1: the request or its inputs are invalid.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Manifest {
 public:
  explicit Manifest(std::string subcommand) : subcommand_(std::move(subcommand)), start_(Clock::now()) {}

  void config(Json value) { config_ = std::move(value); }
  void seed(std::uint64_t value) { seed_ = value; }
  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  /// Hashes every listed file and writes the manifest to `path`.
  void write(const fs::path& path) const {
    Json j;
    j["subcommand"] = subcommand_;
    j["version"] = kVersion;
    j["config"] = config_;
    j["seed"] = seed_ ? Json(*seed_) : Json(nullptr);
    j["threads"] = thread_count();
    j["inputs"] = files(inputs_);
    j["outputs"] = files(outputs_);
    j["wall_clock_seconds"] = std::chrono::duration<double>(Clock::now() - start_).count();
    io::write_text(path, j.dump(2) + "\n");
  }

 private:
  using Clock = std::chrono::steady_clock;

  static Json files(const std::vector<fs::path>& paths) {
    Json out = Json::array();
    for (const auto& p : paths) {
      if (fs::is_directory(p)) {
        for (const auto& entry : sorted_entries(p)) out.push_back({{"path", entry.string()}, {"sha256", sha256_file(entry)}});
      } else {
        out.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
      }
    }
    return out;
  }

  static std::vector<fs::path> sorted_entries(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().filename() != "manifest.json") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  static std::string sha256_file(const fs::path& p) { return io::sha256_file(p); }

  std::string subcommand_;
  Clock::time_point start_;
  Json config_ = Json::object();
  std::optional<std::uint64_t> seed_;
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
};

fs::path manifest_beside(const fs::path& output) {
  if (fs::is_directory(output)) return output / "manifest.json";
  return fs::path(output.string() + ".manifest.json");
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string read_config_text(const std::string& path) { return path.empty() ? std::string("{}") : io::read_text(path); }

/// Appends JSON lines to a log file.
class JsonLog {
 public:
  explicit JsonLog(const fs::path& path) {
    ensure_parent(path);
    out_.open(path, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open log " + path.string());
  }
  void line(const std::string& json) {
    out_ << json << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

GridDims parse_dims(const std::vector<int>& v) {
  if (v.size() != 3 || v[0] < 1 || v[1] < 1 || v[2] < 1) throw UsageError("--dims needs three positive sizes D,H,W");
  return {v[0], v[1], v[2]};
}

fs::path flow_file(const fs::path& dir, const char* direction, std::size_t t) {
  char name[64];
  std::snprintf(name, sizeof name, "%s_%04zu.rvol", direction, t);
  return dir / name;
}

SequenceFlows read_flows(const fs::path& dir, std::size_t pairs) {
  SequenceFlows flows;
  for (std::size_t t = 0; t < pairs; ++t) {
    flows.forward.push_back(FlowGrid::from_volume(read_volume(flow_file(dir, "forward", t))));
    flows.backward.push_back(FlowGrid::from_volume(read_volume(flow_file(dir, "backward", t))));
  }
  return flows;
}

std::vector<fs::path> list_gseq(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".gseq") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw UsageError("no .gseq files in " + dir.string());
  return out;
}

/// Linear map of [lo, hi] onto [0, maxval], clamped, row-major binary PGM.
void write_pgm(const SliceImage& image, int channel, double lo, double hi, int bits, const fs::path& path) {
  const int maxval = bits == 16 ? 65535 : 255;
  std::vector<std::uint8_t> bytes;
  const std::string header =
      "P5\n" + std::to_string(image.cols) + " " + std::to_string(image.rows) + "\n" + std::to_string(maxval) + "\n";
  bytes.assign(header.begin(), header.end());
  for (int r = 0; r < image.rows; ++r) {
    for (int c = 0; c < image.cols; ++c) {
      const double t = std::clamp((image.at(r, c, channel) - lo) / (hi - lo), 0.0, 1.0);
      const auto gray = static_cast<std::uint32_t>(std::lround(t * maxval));
      if (bits == 16) bytes.push_back(static_cast<std::uint8_t>(gray >> 8));
      bytes.push_back(static_cast<std::uint8_t>(gray & 0xff));
    }
  }
  io::write_file(path, bytes);
}

Axis parse_axis(const std::string& s) {
  if (s == "x") return Axis::x;
  if (s == "y") return Axis::y;
  if (s == "z") return Axis::z;
  throw UsageError("--axis must be x, y or z");
}

std::string help_keys(const std::string& defaults_json) {
  return "\nConfig keys and defaults:\n" + defaults_json;
}

int run_synth(const std::string& spec_path, const fs::path& out, int frames, const std::vector<int>& dims_arg) {
  if (frames < 1) throw UsageError("--frames must be at least 1");
  const SynthSpec spec = parse_synth_spec(io::read_text(spec_path));
  const GridDims dims = parse_dims(dims_arg);
  Manifest manifest("synth");
  manifest.input(spec_path);
  manifest.config({{"spec", Json::parse(synth_spec_to_json(spec))},
                   {"frames", frames},
                   {"dims", {dims.depth, dims.height, dims.width}}});
  manifest.seed(spec.seed);
  const auto result = synth_sequence(spec, frames, dims);
  fs::create_directories(out);
  write_sequence(result.sequence, out);
  manifest.output(out);
  manifest.write(manifest_beside(out));
  std::cout << "wrote " << frames << " frames to " << out.string() << "\n";
  return 0;
}

int run_flow(const fs::path& input, const fs::path& out) {
  const VolumeSequence seq = read_sequence(input);
  seq.validate();
  Manifest manifest("flow");
  manifest.input(input);
  const PseudoFlowOptions options;
  manifest.config({{"levels", options.solver.levels},
                   {"alpha", options.solver.alpha},
                   {"iterations", options.solver.iterations},
                   {"warps", options.solver.warps},
                   {"slice_stride", options.slice_stride},
                   {"channel", options.channel}});
  const SequenceFlows flows = compute_flows(seq, options);
  fs::create_directories(out);
  for (std::size_t t = 0; t < flows.forward.size(); ++t) {
    write_volume(flows.forward[t].to_volume(), flow_file(out, "forward", t));
    write_volume(flows.backward[t].to_volume(), flow_file(out, "backward", t));
  }
  manifest.output(out);
  manifest.write(manifest_beside(out));
  std::cout << "wrote " << flows.forward.size() << " flow pairs to " << out.string() << "\n";
  return 0;
}

int run_reconstruct(const fs::path& input, const std::string& config_path, const fs::path& out,
                    const std::string& flows_dir, bool resume, const std::string& log_path) {
  const ReconConfig config = recon_config_from_json(read_config_text(config_path));
  const VolumeSequence seq = read_sequence(input);
  seq.validate();
  Manifest manifest("reconstruct");
  manifest.input(input);
  if (!config_path.empty()) manifest.input(config_path);
  manifest.config(Json::parse(recon_config_to_json(config)));
  manifest.seed(config.seed);
  std::optional<SequenceFlows> flows;
  if (!flows_dir.empty()) {
    flows = read_flows(flows_dir, seq.length() - 1);
    manifest.input(flows_dir);
  }
  ensure_parent(out);
  const fs::path log_file = log_path.empty() ? fs::path(out.string() + ".log.jsonl") : fs::path(log_path);
  JsonLog log(log_file);
  const CheckpointOptions checkpoint{fs::path(out.string() + ".ckpt"), resume};
  const auto result = reconstruct(
      seq, config, [&](const ProgressRecord& r) { log.line(r.to_json()); }, checkpoint, flows ? &*flows : nullptr);
  write_gseq(result.sequence, out);
  manifest.output(out);
  manifest.output(meta_path_for(out));
  manifest.write(manifest_beside(out));
  double mean = 0.0;
  for (double p : result.frame_psnr) mean += p / static_cast<double>(result.frame_psnr.size());
  std::cout << "wrote " << out.string() << " (" << result.sequence.anchor.size() << " Gaussians, "
            << result.sequence.length() << " frames, mean PSNR " << mean << " dB)\n";
  return 0;
}

int run_train(const fs::path& data, const std::string& config_path, const fs::path& out, const std::string& log_path) {
  const ModelConfig config = model_config_from_json(read_config_text(config_path));
  Manifest manifest("train");
  std::vector<GaussianSequence> sequences;
  for (const auto& p : list_gseq(data)) {
    sequences.push_back(read_gseq(p));
    manifest.input(p);
  }
  if (!config_path.empty()) manifest.input(config_path);
  manifest.config(Json::parse(model_config_to_json(config)));
  manifest.seed(config.seed);
  ensure_parent(out);
  JsonLog log(log_path.empty() ? fs::path(out.string() + ".log.jsonl") : fs::path(log_path));
  const auto result = train(sequences, config, [&](const TrainRecord& r) { log.line(r.to_json()); });
  save_model(result.params, out);
  manifest.output(out);
  manifest.write(manifest_beside(out));
  std::cout << "wrote " << out.string() << " (" << result.params.parameter_count() << " parameters, loss "
            << result.history.front() << " -> " << result.history.back() << ")\n";
  return 0;
}

int run_predict(const fs::path& model_path, const fs::path& obs, const fs::path& out, bool reset_memory,
                bool unsorted) {
  const ModelParams params = load_model(model_path);
  const GaussianSequence observed_seq = read_gseq(obs);
  const auto need = static_cast<std::size_t>(params.config.t_in);
  if (observed_seq.length() < need) {
    throw UsageError("observation has " + std::to_string(observed_seq.length()) + " frames, the model needs " +
                     std::to_string(need));
  }
  std::vector<GaussianGroup> observed;
  for (std::size_t t = 0; t < need; ++t) observed.push_back(observed_seq.frame(t));
  Manifest manifest("predict");
  manifest.input(model_path);
  manifest.input(obs);
  manifest.seed(params.config.seed);
  manifest.config({{"model", Json::parse(model_config_to_json(params.config))},
                   {"reset_memory", reset_memory},
                   {"unsorted", unsorted}});
  GaussianSequence pred = predict(observed, params, {.reset_memory = reset_memory, .unsorted = unsorted});
  pred.meta = observed_seq.meta;
  ensure_parent(out);
  write_gseq(pred, out);
  manifest.output(out);
  manifest.output(meta_path_for(out));
  manifest.write(manifest_beside(out));
  std::cout << "wrote " << pred.length() << " predicted frames to " << out.string() << "\n";
  return 0;
}

int run_eval(const fs::path& pred_dir, const fs::path& truth_dir, const fs::path& report, const std::string& csv,
             int truth_start, double data_range) {
  const VolumeSequence pred = read_sequence(pred_dir);
  VolumeSequence truth = read_sequence(truth_dir);
  if (truth_start < 0 || static_cast<std::size_t>(truth_start) > truth.length()) {
    throw UsageError("--truth-start is outside the truth sequence");
  }
  truth.frames.erase(truth.frames.begin(), truth.frames.begin() + truth_start);
  Manifest manifest("eval");
  manifest.input(pred_dir);
  manifest.input(truth_dir);
  EvalOptions options;
  options.data_range = data_range;
  manifest.config({{"truth_start", truth_start},
                   {"data_range", data_range},
                   {"pool", options.pool},
                   {"csi_thresholds", options.csi_thresholds}});
  const EvalReport result = evaluate(pred.frames, truth.frames, options);
  ensure_parent(report);
  io::write_text(report, result.to_json());
  manifest.output(report);
  if (!csv.empty()) {
    ensure_parent(csv);
    io::write_text(csv, result.to_csv());
    manifest.output(csv);
  }
  manifest.write(manifest_beside(report));
  std::cout << "MAE " << result.aggregate.mae << "  PSNR " << result.aggregate.psnr << " dB  SSIM "
            << result.aggregate.ssim << "\n";
  return 0;
}

int run_render(const fs::path& input, const fs::path& out, bool volumes, const std::string& axis_name, int index,
               const std::vector<double>& range, int bits) {
  if (bits != 8 && bits != 16) throw UsageError("--bits must be 8 or 16");
  if (range.size() != 2 || !(range[1] > range[0])) throw UsageError("--range needs LO,HI with HI > LO");
  const Axis axis = parse_axis(axis_name);
  Manifest manifest("render");
  manifest.input(input);
  std::vector<RadarVolume> frames;
  VolumeMeta meta;
  if (fs::is_directory(input)) {
    auto seq = read_sequence(input);
    frames = std::move(seq.frames);
    meta = seq.meta;
  } else {
    const GaussianSequence seq = read_gseq(input);
    if (seq.meta.dims.voxel_count() == 0) throw UsageError(input.string() + " carries no grid dims");
    for (std::size_t t = 0; t < seq.length(); ++t) {
      RadarVolume v = render_volume(seq.frame(t), seq.meta.dims);
      v.set_timestamp(static_cast<int>(t));
      frames.push_back(std::move(v));
    }
    meta.channels.clear();
    for (std::size_t c = 0; c < seq.meta.activations.size(); ++c) {
      ChannelInfo info;
      if (c < seq.meta.channel_names.size()) info.name = seq.meta.channel_names[c];
      info.nonnegative = seq.meta.activations[c] == FeatureActivation::softplus;
      meta.channels.push_back(info);
    }
  }
  if (frames.empty()) throw UsageError("nothing to render");
  const int length = axis_length(frames.front().dims(), axis);
  const int slice = index < 0 ? length / 2 : index;
  if (slice >= length) throw UsageError("--index " + std::to_string(slice) + " is outside the axis length " +
                                        std::to_string(length));
  fs::create_directories(out);
  manifest.config({{"axis", axis_name},
                   {"index", slice},
                   {"range", range},
                   {"bits", bits},
                   {"volumes", volumes},
                   {"mapping", "gray = round(clamp((v - lo) / (hi - lo), 0, 1) * maxval)"}});
  if (volumes && !fs::is_directory(input)) {
    write_sequence(VolumeSequence{frames, meta}, out);
  }
  for (std::size_t t = 0; t < frames.size(); ++t) {
    char name[64];
    std::snprintf(name, sizeof name, "slice_%s%03d_%04zu.pgm", axis_name.c_str(), slice, t);
    write_pgm(extract_slice(frames[t], axis, slice), 0, range[0], range[1], bits, out / name);
  }
  manifest.output(out);
  manifest.write(manifest_beside(out));
  std::cout << "rendered " << frames.size() << " frames to " << out.string() << "\n";
  return 0;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Radar volumes to coherent 3-D Gaussian sequences and GauMamba forecasts"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker cap; falls back to STORMSPLAT_THREADS, then the core count");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic blob sequence as .rvol frames");
  std::string spec_path;
  fs::path synth_out;
  int frames = 8;
  std::vector<int> dims{16, 32, 32};
  synth->add_option("--spec", spec_path, "Blob spec JSON")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--frames", frames, "Number of frames")->capture_default_str();
  synth->add_option("--dims", dims, "Grid depth,height,width")->delimiter(',')->expected(3)->capture_default_str();

  auto* flow = app.add_subcommand("flow", "Compute forward and backward pseudo-3-D flows per frame pair");
  fs::path flow_in, flow_out;
  flow->add_option("--input", flow_in, "Directory of .rvol frames")->required()->check(CLI::ExistingDirectory);
  flow->add_option("--out", flow_out, "Output directory for forward_/backward_NNNN.rvol")->required();

  auto* recon = app.add_subcommand("reconstruct", "Fit a temporally coherent Gaussian sequence to radar frames");
  fs::path recon_in, recon_out;
  std::string recon_config, recon_flows, recon_log;
  bool recon_resume = false;
  recon->add_option("--input", recon_in, "Directory of .rvol frames")->required()->check(CLI::ExistingDirectory);
  recon->add_option("--config", recon_config, "ReconConfig JSON; missing keys take defaults")->check(CLI::ExistingFile);
  recon->add_option("--out", recon_out, "Output .gseq")->required();
  recon->add_option("--flows", recon_flows, "Cached flows from the flow subcommand")->check(CLI::ExistingDirectory);
  recon->add_option("--log", recon_log, "Progress log (JSON lines); default <out>.log.jsonl");
  recon->add_flag("--resume", recon_resume, "Continue from <out>.ckpt");
  recon->footer(help_keys(recon_config_to_json(ReconConfig{})));

  auto* trn = app.add_subcommand("train", "Train GauMamba on a directory of .gseq files");
  fs::path train_data, train_out;
  std::string train_config, train_log;
  trn->add_option("--data", train_data, "Directory of .gseq files")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--config", train_config, "ModelConfig JSON; missing keys take defaults")->check(CLI::ExistingFile);
  trn->add_option("--out", train_out, "Output checkpoint")->required();
  trn->add_option("--log", train_log, "Loss history (JSON lines); default <out>.log.jsonl");
  trn->footer(help_keys(model_config_to_json(ModelConfig{})));

  auto* pred = app.add_subcommand("predict", "Roll out T_out frames from the first T_in frames of a .gseq");
  fs::path pred_model, pred_obs, pred_out;
  bool reset_memory = false, unsorted = false;
  pred->add_option("--model", pred_model, "Checkpoint from train")->required()->check(CLI::ExistingFile);
  pred->add_option("--obs", pred_obs, "Observed .gseq")->required()->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "Output .gseq")->required();
  pred->add_flag("--reset-memory", reset_memory, "Zero the GRU memory before every step");
  pred->add_flag("--unsorted", unsorted, "Keep stored token order instead of Morton order");

  auto* ev = app.add_subcommand("eval", "Score predicted frames against truth");
  fs::path eval_pred, eval_truth, eval_report;
  std::string eval_csv;
  int truth_start = 0;
  double data_range = 0.0;
  ev->add_option("--pred", eval_pred, "Directory of predicted .rvol frames")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--truth", eval_truth, "Directory of truth .rvol frames")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--report", eval_report, "Report JSON")->required();
  ev->add_option("--csv", eval_csv, "Per-frame CSV");
  ev->add_option("--truth-start", truth_start, "Truth frames before this index are skipped")->capture_default_str();
  ev->add_option("--range", data_range, "PSNR/SSIM data range; 0 = truth maximum")->capture_default_str();

  auto* render = app.add_subcommand("render", "Render a .gseq or .rvol directory to PGM slices");
  fs::path render_in, render_out;
  bool render_volumes = false;
  std::string axis = "z";
  int index = -1, bits = 8;
  std::vector<double> range{0.0, 60.0};
  render->add_option("--input", render_in, ".gseq file or directory of .rvol frames")->required()->check(CLI::ExistingPath);
  render->add_option("--out", render_out, "Output directory")->required();
  render->add_flag("--volumes", render_volumes, "Also write rendered .rvol frames (for .gseq input)");
  render->add_option("--axis", axis, "Slice axis x, y or z")->capture_default_str();
  render->add_option("--index", index, "Slice index; default the middle")->capture_default_str();
  render->add_option("--range", range, "Values mapped linearly onto black..white")->delimiter(',')->expected(2)
      ->capture_default_str();
  render->add_option("--bits", bits, "PGM depth, 8 or 16")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  set_thread_count(resolve_thread_count(threads));
  try {
    if (*synth) return run_synth(spec_path, synth_out, frames, dims);
    if (*flow) return run_flow(flow_in, flow_out);
    if (*recon) return run_reconstruct(recon_in, recon_config, recon_out, recon_flows, recon_resume, recon_log);
    if (*trn) return run_train(train_data, train_config, train_out, train_log);
    if (*pred) return run_predict(pred_model, pred_obs, pred_out, reset_memory, unsorted);
    if (*ev) return run_eval(eval_pred, eval_truth, eval_report, eval_csv, truth_start, data_range);
    if (*render) return run_render(render_in, render_out, render_volumes, axis, index, range, bits);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace
}  // namespace stormsplat

int main(int argc, char** argv) { return stormsplat::dispatch(argc, argv); }

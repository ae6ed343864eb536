// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// Usage: acceptance [--only 3,5]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metrics_oracle.hpp"
#include "model_oracle.hpp"
#include "render_oracle.hpp"
#include "stormsplat/metrics.hpp"
#include "stormsplat/model.hpp"
#include "stormsplat/reconstruct.hpp"
#include "stormsplat/renderer.hpp"
#include "stormsplat/synth.hpp"
#include "test_support.hpp"

namespace stormsplat {
namespace {

using testing::random_group;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buffer[512];
  std::snprintf(buffer, sizeof buffer, format, args...);
  return buffer;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// 1. Renderer gradients against central differences.
Outcome renderer_gradients() {
  constexpr int kScenes = 50;
  constexpr double kTol = 1e-4;
  std::mt19937_64 rng(101);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 8), side(2, 8);
  double worst = 0.0;
  for (int s = 0; s < kScenes; ++s) {
    auto g = random_group(rng, count(rng), 2, {1, 1, 1}, {5, 5, 5});
    g.activations = {FeatureActivation::softplus, FeatureActivation::identity};
    g.normalize_rotations();
    auto plane = testing::random_plane(rng, {3, 3, 3}, side(rng), side(rng), 0.75);
    plane.slab_half_width = std::numeric_limits<double>::infinity();
    std::vector<double> upstream(static_cast<std::size_t>(plane.rows * plane.cols * 2));
    for (auto& u : upstream) u = normal(rng);
    const auto grads = render_plane_backward(g, plane, upstream);
    const auto check = testing::check_gradients(
        g, grads, [&](const GaussianGroup& x) { return testing::dot(render_plane(x, plane).image, upstream); });
    worst = std::max(worst, check.max_rel_error);
  }
  return {worst < kTol, fmt("%d scenes, max relative error %.2e (limit %.0e)", kScenes, worst, kTol)};
}

// 2. Tiled and culled forward pass against the unculled per-pixel oracle, on
// scenes whose Gaussians all lie within the 3-sigma slab bound.
Outcome renderer_oracle() {
  constexpr int kScenes = 100;
  constexpr double kTol = 1e-6;
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> count(1, 8), side(2, 16);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  double worst = 0.0;
  for (int s = 0; s < kScenes; ++s) {
    const Eigen::Vector3d center{8, 8, 8};
    const int rows = side(rng), cols = side(rng);
    const double spacing = 0.5 + 0.5 * (unit(rng) + 1.0);
    RenderPlane plane = s % 2 == 0 ? testing::random_plane(rng, center, rows, cols, spacing)
                                   : axis_slice(static_cast<Axis>(s % 3), 8, GridDims{16, 16, 16});
    auto g = random_group(rng, count(rng), 1, center.array() - 4.0, center.array() + 4.0, -0.7, 0.5);
    g.normalize_rotations();
    const Eigen::Vector3d n = plane.normal();
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      const Eigen::Vector3d p = g.positions.row(i).transpose();
      const double bound = plane.slab_half_width + 3.0 * g.scale(i).maxCoeff();
      const double h = n.dot(p - plane.origin);
      const double target = bound * unit(rng);
      g.positions.row(i) = (p + (target - h) * n).transpose();
    }
    const auto fast = render_plane(g, plane);
    const auto exact = testing::oracle_render(g, plane);
    double peak = 0.0, err = 0.0;
    for (std::size_t k = 0; k < exact.size(); ++k) {
      peak = std::max(peak, std::abs(exact[k]));
      err = std::max(err, std::abs(fast.image[k] - exact[k]));
    }
    if (peak > 0.0) worst = std::max(worst, err / peak);
  }
  return {worst < kTol, fmt("%d scenes, max error %.2e of peak (limit %.0e)", kScenes, worst, kTol)};
}

// 3. MambaGRU block against the loop transcription; update-gate saturation.
Outcome mambagru_fidelity() {
  constexpr double kTol = 1e-10, kSaturation = 1e-6;
  ModelConfig c;
  c.d_model = 12;
  c.layers = 1;
  c.d_state = 5;
  c.expand = 2;
  std::mt19937_64 rng(303);
  std::normal_distribution<double> normal(0.0, 0.3);
  auto random = [&](Eigen::Index r, Eigen::Index k) {
    Matrix m(r, k);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    ModelParams p = ModelParams::zeros(c, 1);
    for (Matrix* t : p.tensors()) *t = random(t->rows(), t->cols());
    const Matrix cin = random(3 + trial, 12), hin = random(3 + trial, 12);
    const auto got = mambagru_block(cin, hin, p.layers[0]);
    const auto want = testing::reference_mambagru(cin, hin, p.layers[0]);
    worst = std::max({worst, (got.c - want.c).cwiseAbs().maxCoeff(), (got.h - want.h).cwiseAbs().maxCoeff()});
  }
  ModelParams p = ModelParams::zeros(c, 1);
  for (Matrix* t : p.tensors()) *t = random(t->rows(), t->cols());
  p.layers[0].w_cz.setZero();
  p.layers[0].w_hz.setZero();
  p.layers[0].b_z.setConstant(30.0);
  const Matrix cin = random(6, 12), hin = random(6, 12);
  const double change = (mambagru_block(cin, hin, p.layers[0]).h - hin).norm();
  return {worst < kTol && change < kSaturation,
          fmt("max deviation %.2e (limit %.0e); |H_t - H_t-1| at b_z = 30: %.2e (limit %.0e)", worst, kTol, change,
              kSaturation)};
}

GaussianSequence drifting_sequence(std::uint64_t seed, Eigen::Index count, int frames) {
  std::mt19937_64 rng(seed);
  GaussianSequence seq;
  seq.anchor = random_group(rng, count, 1, {0, 0, 0}, {16, 16, 8});
  seq.anchor.normalize_rotations();
  seq.meta.activations = seq.anchor.activations;
  std::normal_distribution<double> normal(0.0, 0.2);
  for (int t = 1; t < frames; ++t) {
    DiffGaussians d = DiffGaussians::zeros(count, 1);
    for (Eigen::Index i = 0; i < count; ++i) {
      d.positions.row(i) << 0.3 * t + normal(rng), -0.1 * t + normal(rng), normal(rng);
      d.features(i, 0) = 0.5 * t * normal(rng);
      d.log_scales.row(i).setConstant(0.02 * t);
    }
    seq.deltas.push_back(d);
  }
  return seq;
}

// 4. Prediction-loss gradient against central differences.
Outcome model_gradients() {
  constexpr double kTol = 1e-3;
  ModelConfig c;
  c.d_model = 8;
  c.layers = 1;
  c.d_state = 4;
  c.t_in = 2;
  c.t_out = 2;
  c.seed = 404;
  const GaussianSequence seq = drifting_sequence(404, 16, c.t_in + c.t_out);
  ModelParams p = ModelParams::initialize(c, 1);
  std::mt19937_64 rng(405);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (Matrix* t : p.tensors()) {
    for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] += normal(rng);
  }
  ModelParams grads = ModelParams::zeros(c, 1);
  prediction_loss(seq, p, &grads);
  auto tensors = p.tensors();
  const auto grad_tensors = grads.tensors();
  double worst = 0.0, largest = 0.0;
  for (const Matrix* g : grad_tensors) largest = std::max(largest, g->cwiseAbs().maxCoeff());
  std::size_t checked = 0;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    for (Eigen::Index i = 0; i < tensors[k]->size(); ++i) {
      double& x = tensors[k]->data()[i];
      const double keep = x, h = 1e-6 * std::max(1.0, std::abs(keep));
      x = keep + h;
      const double up = prediction_loss(seq, p);
      x = keep - h;
      const double down = prediction_loss(seq, p);
      x = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad_tensors[k]->data()[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6 * largest});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
      ++checked;
    }
  }
  return {worst < kTol, fmt("%zu parameters, max relative error %.2e (limit %.0e)", checked, worst, kTol)};
}

const GridDims kBenchDims{16, 32, 32};

SynthSpec two_blob_scene() {
  SynthSpec spec;
  SynthBlob a;
  a.center = {10, 12, 8};
  a.sigma = {4, 3, 2.5};
  a.amplitude = 45;
  a.velocity = {1.5, 0.5, 0};
  a.growth = 1.02;
  SynthBlob b;
  b.center = {22, 20, 6};
  b.sigma = {3, 4, 2};
  b.amplitude = 35;
  b.velocity = {-1, 0.5, 0.2};
  b.growth = 0.97;
  spec.blobs = {a, b};
  return spec;
}

ReconConfig bench_config() {
  ReconConfig c;
  c.gaussians = 512;
  c.null_threshold = 1.0;
  c.iters_backward = 300;
  c.iters_forward_position = 300;
  c.iters_forward_full = 1200;
  c.seed = 1;
  c.log_every = 1000000;
  return c;
}

double sequence_mae(const GaussianSequence& seq, const VolumeSequence& truth, std::size_t first = 0) {
  std::vector<double> maes;
  for (std::size_t t = first; t < truth.length(); ++t) {
    maes.push_back(me_mae(render_volume(seq.frame(t - first), truth.dims()), truth.frames[t]).mae);
  }
  return mean(maes);
}

// 5. Desk-scale reconstruction and its single-term ablations.
Outcome reconstruction_benchmark() {
  constexpr double kPsnr = 35.0;
  const auto synth = synth_sequence(two_blob_scene(), 8, kBenchDims);
  struct Run {
    const char* name;
    std::function<void(ReconConfig&)> edit;
    double mae = 0.0;
    double psnr = 0.0;
  };
  std::vector<Run> runs{{"full", [](ReconConfig&) {}},
                        {"no-flow", [](ReconConfig& c) { c.lambda_local = 0.0; }},
                        {"no-energy", [](ReconConfig& c) { c.lambda_global = 0.0; }},
                        {"no-backward", [](ReconConfig& c) { c.backward_enabled = false; }}};
  const SequenceFlows flows = compute_flows(synth.sequence, bench_config().flow);
  for (auto& run : runs) {
    ReconConfig c = bench_config();
    run.edit(c);
    const auto result = reconstruct(synth.sequence, c, {}, {}, &flows);
    const double range = sequence_data_range(synth.sequence);
    std::vector<double> psnrs;
    for (std::size_t t = 0; t < synth.sequence.length(); ++t) {
      psnrs.push_back(slice_psnr(result.sequence.frame(t), synth.sequence.frames[t], range));
    }
    run.psnr = mean(psnrs);
    run.mae = sequence_mae(result.sequence, synth.sequence);
  }
  const double full = runs[0].mae;
  bool beats = true, backward_worst = true;
  for (std::size_t k = 1; k < runs.size(); ++k) {
    beats = beats && full < runs[k].mae;
    if (k != 3) backward_worst = backward_worst && runs[3].mae > runs[k].mae;
  }
  std::string detail = fmt("PSNR %.2f dB (limit %.0f); MAE", runs[0].psnr, kPsnr);
  for (const auto& run : runs) detail += fmt(" %s %.5f", run.name, run.mae);
  if (!backward_worst) detail += "; no-backward is not the worst ablation";
  return {runs[0].psnr >= kPsnr && beats && backward_worst, detail};
}

// 6. Per-frame displacement of Gaussians inside a rigidly translating blob.
Outcome tracking_fidelity() {
  constexpr double kTol = 0.5;
  SynthSpec spec;
  SynthBlob blob;
  blob.center = {10, 14, 8};
  blob.sigma = {3, 3, 2};
  blob.amplitude = 40;
  blob.velocity = {1.0, 0.5, 0.0};
  spec.blobs = {blob};
  const auto synth = synth_sequence(spec, 8, kBenchDims);
  const auto result = reconstruct(synth.sequence, bench_config());
  double err = 0.0;
  int tracked = 0;
  for (std::size_t t = 0; t + 1 < synth.sequence.length(); ++t) {
    const auto g0 = result.sequence.frame(t), g1 = result.sequence.frame(t + 1);
    const Eigen::Vector3d c = blob.center_at(static_cast<int>(t));
    for (Eigen::Index i = 0; i < g0.size(); ++i) {
      const Eigen::Vector3d p = g0.positions.row(i).transpose();
      if ((p - c).cwiseQuotient(blob.sigma).norm() >= 1.5) continue;
      const Eigen::Vector3d moved = g1.positions.row(i).transpose() - p;
      err += (moved - blob.velocity).norm();
      ++tracked;
    }
  }
  const double mean_err = tracked > 0 ? err / tracked : INFINITY;
  return {mean_err < kTol,
          fmt("%d tracked Gaussian-steps, mean error %.3f voxel/frame (limit %.1f)", tracked, mean_err, kTol)};
}

// Shared benchmark of criteria 7 and 8: eight reconstructed sequences and a
// model trained on all of them.
struct PredictionBench {
  std::vector<VolumeSequence> truth;
  std::vector<GaussianSequence> recon;
  ModelConfig config;
  TrainResult trained;
  bool ready = false;
};

const GridDims kPredDims{8, 16, 16};
constexpr int kPredFrames = 10;

SynthSpec prediction_scene(int k) {
  std::mt19937_64 rng(700 + k);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SynthSpec spec;
  spec.seed = k;
  for (int b = 0; b < 1 + k % 2; ++b) {
    SynthBlob blob;
    blob.center = {4 + 8 * u(rng), 4 + 8 * u(rng), 2.5 + 3 * u(rng)};
    blob.sigma = {1.8 + u(rng), 1.8 + u(rng), 1.2 + 0.5 * u(rng)};
    blob.amplitude = 30 + 20 * u(rng);
    blob.velocity = {(u(rng) - 0.5) * 0.8, (u(rng) - 0.5) * 0.8, 0.0};
    blob.growth = 0.97 + 0.06 * u(rng);
    spec.blobs.push_back(blob);
  }
  return spec;
}

PredictionBench& prediction_bench() {
  static PredictionBench bench;
  if (bench.ready) return bench;
  for (int k = 0; k < 8; ++k) {
    bench.truth.push_back(synth_sequence(prediction_scene(k), kPredFrames, kPredDims).sequence);
    ReconConfig c;
    c.gaussians = 256;
    c.null_threshold = 1.0;
    c.iters_backward = 100;
    c.iters_forward_position = 100;
    c.iters_forward_full = 300;
    c.slices_per_axis = 4;
    c.seed = static_cast<std::uint64_t>(k);
    c.log_every = 1000000;
    bench.recon.push_back(reconstruct(bench.truth.back(), c).sequence);
  }
  bench.config.d_model = 32;
  bench.config.layers = 2;
  bench.config.d_state = 8;
  bench.config.expand = 2;
  bench.config.t_in = 5;
  bench.config.t_out = 5;
  bench.config.epochs = 200;
  bench.config.lr = 5e-3;
  bench.config.cosine_decay = true;
  bench.config.seed = 7;
  bench.trained = train(bench.recon, bench.config);
  bench.ready = true;
  return bench;
}

double rollout_mae(const PredictionBench& bench, std::size_t k, const PredictOptions& options) {
  std::vector<GaussianGroup> observed;
  for (int t = 0; t < bench.config.t_in; ++t) observed.push_back(bench.recon[k].frame(static_cast<std::size_t>(t)));
  const GaussianSequence pred = predict(observed, bench.trained.params, options);
  return sequence_mae(pred, bench.truth[k], static_cast<std::size_t>(bench.config.t_in));
}

double reconstruction_floor(const PredictionBench& bench, std::size_t k) {
  std::vector<double> maes;
  for (std::size_t t = static_cast<std::size_t>(bench.config.t_in); t < bench.truth[k].length(); ++t) {
    maes.push_back(me_mae(render_volume(bench.recon[k].frame(t), kPredDims), bench.truth[k].frames[t]).mae);
  }
  return mean(maes);
}

// 7. Overfit: loss reduction and rollout MAE on the held-in sequence 0.
Outcome prediction_overfit() {
  constexpr double kReduction = 0.9, kRatio = 2.0;
  const auto& bench = prediction_bench();
  const auto& h = bench.trained.history;
  const double reduction = 1.0 - h.back() / h.front();
  const double floor = reconstruction_floor(bench, 0);
  const double mae = rollout_mae(bench, 0, {});
  return {reduction >= kReduction && mae < kRatio * floor,
          fmt("loss %.4f -> %.4f, reduction %.1f%% (limit %.0f%%); rollout MAE %.4f vs floor %.4f, ratio %.2f "
              "(limit %.1f)",
              h.front(), h.back(), 100.0 * reduction, 100.0 * kReduction, mae, floor, mae / floor, kRatio)};
}

// 8. Memory reset and unsorted tokens at inference both hurt the rollout.
Outcome memory_ablation() {
  const auto& bench = prediction_bench();
  const double full = rollout_mae(bench, 0, {});
  const double no_memory = rollout_mae(bench, 0, {.reset_memory = true});
  const double unsorted = rollout_mae(bench, 0, {.unsorted = true});
  return {no_memory > full && unsorted > full,
          fmt("rollout MAE full %.4f, without memory %.4f, unsorted %.4f", full, no_memory, unsorted)};
}

// 9. Metrics against brute-force loops; the hand CSI pattern.
Outcome metrics_oracles() {
  constexpr double kTol = 1e-10;
  std::mt19937_64 rng(909);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const GridDims dims{1 + trial % 8, 1 + (3 * trial) % 8, 1 + (5 * trial + 2) % 8};
    const int channels = 1 + trial % 2;
    const auto p = testing::random_volume(rng, dims, channels, -5, 60);
    const auto t = testing::random_volume(rng, dims, channels, 0, 60);
    const auto o = testing::oracle_errors(p, t, 60.0);
    const auto e = me_mae(p, t);
    worst = std::max({worst, std::abs(e.me - o.me), std::abs(e.mae - o.mae), std::abs(psnr(p, t, 60.0) - o.psnr),
                      std::abs(ssim(p, t, 60.0) - testing::oracle_ssim(p, t, 60.0))});
    for (double threshold : {20.0, 30.0, 40.0}) {
      worst = std::max(worst, std::abs(csi_pooled(p, t, threshold) - testing::oracle_csi(p, t, threshold, 4)));
    }
  }
  RadarVolume p(GridDims{1, 8, 8}, 1), t(GridDims{1, 8, 8}, 1);
  p.at(0, 0, 0, 0) = 35;
  t.at(0, 3, 3, 0) = 31;
  p.at(0, 1, 6, 0) = 40;
  t.at(0, 1, 6, 0) = 40;
  t.at(0, 6, 1, 0) = 50;
  p.at(0, 7, 7, 0) = 30;
  const auto counts = pooled_contingency(p, t, 30.0);
  const double csi = csi_pooled(p, t, 30.0);
  const bool pattern = counts.hits == 2 && counts.misses == 1 && counts.false_alarms == 1 && csi == 0.5;
  return {worst < kTol && pattern,
          fmt("max deviation %.2e (limit %.0e); pattern H=%ld M=%ld FA=%ld CSI=%.3f", worst, kTol,
              static_cast<long>(counts.hits), static_cast<long>(counts.misses), static_cast<long>(counts.false_alarms),
              csi)};
}

// 10. reconstruct, train, predict and evaluate twice; compare the bytes.
Outcome determinism() {
  struct Artifacts {
    std::vector<std::uint8_t> gseq, model, pred;
    std::string report;
  };
  auto run = [] {
    const auto synth = synth_sequence(prediction_scene(3), 6, kPredDims);
    ReconConfig rc;
    rc.gaussians = 128;
    rc.null_threshold = 1.0;
    rc.iters_backward = 40;
    rc.iters_forward_position = 40;
    rc.iters_forward_full = 120;
    rc.slices_per_axis = 4;
    rc.seed = 10;
    const auto recon = reconstruct(synth.sequence, rc);
    ModelConfig mc;
    mc.d_model = 8;
    mc.layers = 1;
    mc.d_state = 4;
    mc.t_in = 3;
    mc.t_out = 3;
    mc.epochs = 3;
    mc.seed = 10;
    const auto trained = train({recon.sequence}, mc);
    std::vector<GaussianGroup> observed;
    for (std::size_t t = 0; t < 3; ++t) observed.push_back(recon.sequence.frame(t));
    const auto pred = predict(observed, trained.params);
    std::vector<RadarVolume> rendered, truth;
    for (std::size_t t = 0; t < 3; ++t) {
      rendered.push_back(render_volume(pred.frame(t), kPredDims));
      truth.push_back(synth.sequence.frames[3 + t]);
    }
    return Artifacts{encode_gseq(recon.sequence), encode_model(trained.params), encode_gseq(pred),
                     evaluate(rendered, truth).to_json()};
  };
  const Artifacts a = run(), b = run();
  const bool gseq = a.gseq == b.gseq, model = a.model == b.model, pred = a.pred == b.pred, report = a.report == b.report;
  return {gseq && model && pred && report,
          fmt("identical: gseq %s, checkpoint %s, prediction %s, report %s", gseq ? "yes" : "no", model ? "yes" : "no",
              pred ? "yes" : "no", report ? "yes" : "no")};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

}  // namespace
}  // namespace stormsplat

int main(int argc, char** argv) {
  using namespace stormsplat;
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Criterion ids to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "renderer gradient suite", renderer_gradients},
      {2, "renderer oracle equivalence", renderer_oracle},
      {3, "MambaGRU equation fidelity", mambagru_fidelity},
      {4, "model gradient suite", model_gradients},
      {5, "desk-scale reconstruction benchmark", reconstruction_benchmark},
      {6, "tracking fidelity", tracking_fidelity},
      {7, "prediction overfit benchmark", prediction_overfit},
      {8, "memory and sort ablation", memory_ablation},
      {9, "metrics oracle suite", metrics_oracles},
      {10, "determinism", determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && outcome.pass;
    std::cout << (outcome.pass ? "[PASS] " : "[FAIL] ") << c.id << ". " << c.name << ": " << outcome.detail << " ("
              << stormsplat::fmt("%.1f", seconds) << " s)" << std::endl;
  }
  return all ? 0 : 1;
}

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <random>
#include <string>
#include <vector>

#include "stormsplat/autodiff.hpp"
#include "stormsplat/gaussians.hpp"

namespace stormsplat {

using ad::Matrix;

struct ModelConfig {
  int d_model = 64;
  int layers = 2;
  int d_state = 16;
  int expand = 2;
  int t_in = 5;
  int t_out = 20;
  int epochs = 50;
  double lr = 0.0005;
  /// Anneal the learning rate from lr to zero along a half cosine.
  bool cosine_decay = false;
  std::uint64_t seed = 0;
  int morton_bits = 10;
  /// Epochs between loss-history records.
  int log_every = 1;

  int d_inner() const noexcept { return d_model * expand; }
  /// Throws ValueError naming the first invalid field.
  void validate() const;
};

/// Learning rate of a 1-based epoch: lr throughout, or with cosine_decay
/// lr at epoch 1 falling along a half cosine toward zero after the last.
double epoch_lr(const ModelConfig& config, int epoch);

/// Unknown keys and wrongly typed values throw ValueError.
ModelConfig model_config_from_json(const std::string& text);
std::string model_config_to_json(const ModelConfig& config);

/// Gated recurrent weights and the bidirectional selective-scan branch of
/// one MambaGRU layer. Products are row-vector style: tokens are rows and
/// a weight maps columns, so W_cr C_t is written C_t * w_cr.
struct LayerParams {
  Matrix w_cr, w_hr, b_r;
  Matrix w_cz, w_hz, b_z;
  Matrix w_ch, w_hh, b_h;
  Matrix w_in, b_in;
  Matrix w_gate, b_gate;
  Matrix w_delta, b_delta;
  Matrix w_b, b_b;
  Matrix w_c, b_c;
  /// State matrix A = -softplus(a_raw), d_inner x d_state.
  Matrix a_raw;
  Matrix d_skip;
  Matrix w_out, b_out;
};

struct ModelParams {
  ModelConfig config;
  int feature_dim = 0;
  Matrix w_tok, b_tok;
  std::vector<LayerParams> layers;
  Matrix w_head, b_head;

  int param_dim() const noexcept { return 10 + feature_dim; }
  /// Every tensor in checkpoint order: tokenizer, then per layer
  /// r, z, h gates, scan branch (in, gate, delta, B, C, A, D, out), then head.
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;
  std::vector<std::string> tensor_names() const;
  std::size_t parameter_count() const;

  /// Zeroed parameters with the configured shapes.
  static ModelParams zeros(const ModelConfig& config, int feature_dim);
  /// Seeded initialization: scaled normal weights, zero gate biases,
  /// A = -(1..d_state) per channel, D = 1 and step sizes in [1e-3, 1e-1].
  static ModelParams initialize(const ModelConfig& config, int feature_dim);
};

/// Per-field standardization frozen from the anchor group G0. Scales are
/// floored at 0.1.
struct Normalizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Normalizer from_anchor(const GaussianGroup& anchor);
  /// (packed rows - mean) / scale.
  Matrix apply(const FeatureMatrix& packed) const;
};

/// Packed rows permuted so row k holds Gaussian perm[k].
Matrix permute_rows(const Matrix& m, const std::vector<Eigen::Index>& perm);
/// Inverse of permute_rows.
Matrix unpermute_rows(const Matrix& m, const std::vector<Eigen::Index>& perm);

/// Tape bindings of every parameter. With `grads`, each leaf accumulates its
/// gradient there (same layout as the parameters).
struct ParamVars {
  ad::Var w_tok, b_tok, w_head, b_head;
  struct Layer {
    ad::Var w_cr, w_hr, b_r, w_cz, w_hz, b_z, w_ch, w_hh, b_h;
    ad::Var w_in, b_in, w_gate, b_gate, w_delta, b_delta, w_b, b_b, w_c, b_c, a_raw, d_skip, w_out, b_out;
  };
  std::vector<Layer> layers;

  static ParamVars bind(ad::Tape& tape, const ModelParams& params, ModelParams* grads = nullptr);
};

/// Graph builders shared by training, inference and the tests.
namespace graph {

ad::Var tokenize(ad::Tape& tape, const ParamVars& p, ad::Var normalized);
/// x + out(gate o (scan(u) + reversed scan(u))) with u and the gate taken
/// from the RMS-normalized tokens.
ad::Var bimamba(ad::Tape& tape, const ParamVars::Layer& p, ad::Var x);

struct BlockOut {
  ad::Var c;
  ad::Var h;
};
BlockOut mambagru(ad::Tape& tape, const ParamVars::Layer& p, ad::Var c_prev, ad::Var h_prev);

struct StepOut {
  /// Predicted deltas in token order, standardized units times the scale.
  ad::Var delta;
  /// Final-layer embedding.
  ad::Var embedding;
  std::vector<ad::Var> memory;
};
StepOut step(ad::Tape& tape, const ParamVars& p, ad::Var input, const std::vector<ad::Var>& memory, ad::Var scale);

}  // namespace graph

/// Value-level wrappers (no gradients).
Matrix tokenize(const FeatureMatrix& packed, const Normalizer& norm, const std::vector<Eigen::Index>& perm,
                const ModelParams& params);
Matrix bimamba(const Matrix& x, const LayerParams& layer);
struct BlockValues {
  Matrix c;
  Matrix h;
};
BlockValues mambagru_block(const Matrix& c_prev, const Matrix& h_prev, const LayerParams& layer);

/// Steps of the prediction loss: `teacher` with true inputs, then `rollout`
/// fed by the model's own embeddings.
struct LossTerms {
  int teacher = 0;
  int rollout = 0;
};
LossTerms loss_terms(const ModelConfig& config);

/// Sum over steps t = 1..T-1 of the mean squared error between predicted and
/// true DiffGaussians. With `grads` (shaped like params) gradients are added.
double prediction_loss(const GaussianSequence& sequence, const ModelParams& params, ModelParams* grads = nullptr);

struct TrainRecord {
  int epoch = 0;
  double loss = 0.0;
  int skipped_blocks = 0;

  std::string to_json() const;
};
using TrainSink = std::function<void(const TrainRecord&)>;

struct TrainResult {
  ModelParams params;
  /// Mean prediction loss per sequence: index 0 is the initialization, then
  /// one entry per epoch.
  std::vector<double> history;
};

/// Adam over all sequences, one update per sequence in the given order.
TrainResult train(const std::vector<GaussianSequence>& sequences, const ModelConfig& config,
                  const TrainSink& sink = {});

/// Inference-time interventions used by the ablations.
struct PredictOptions {
  /// Memory is reset to zero before every step.
  bool reset_memory = false;
  /// Tokens keep their stored order instead of the Morton order.
  bool unsorted = false;
};

/// Warms the memory on the T_in observed groups and rolls out T_out frames.
/// The result holds exactly T_out frames.
GaussianSequence predict(const std::vector<GaussianGroup>& observed, const ModelParams& params,
                         const PredictOptions& options = {});

/// Checkpoint: magic "GMAM0001", config JSON, feature dim, then every tensor
/// as rows, cols and row-major f32 values in tensors() order.
std::vector<std::uint8_t> encode_model(const ModelParams& params);
ModelParams decode_model(std::span<const std::uint8_t> bytes);
void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace stormsplat

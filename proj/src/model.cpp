#include "stormsplat/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "stormsplat/adam.hpp"
#include "stormsplat/binary_io.hpp"
#include "stormsplat/errors.hpp"

namespace stormsplat {

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ValueError(field + ": " + why); };
  if (d_model < 1) fail("d_model", "must be at least 1");
  if (layers < 1) fail("layers", "must be at least 1");
  if (d_state < 1) fail("d_state", "must be at least 1");
  if (expand < 1) fail("expand", "must be at least 1");
  if (t_in < 1) fail("t_in", "must be at least 1");
  if (t_out < 1) fail("t_out", "must be at least 1");
  if (epochs < 0) fail("epochs", "must be non-negative");
  if (!(lr > 0.0)) fail("lr", "must be positive");
  if (morton_bits < 1 || morton_bits > 21) fail("morton_bits", "must lie in [1, 21]");
  if (log_every < 1) fail("log_every", "must be at least 1");
}

double epoch_lr(const ModelConfig& config, int epoch) {
  if (!config.cosine_decay) return config.lr;
  return 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * (epoch - 1) / config.epochs));
}

namespace {

using Json = nlohmann::ordered_json;

struct Field {
  const char* name;
  std::function<Json(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const Json&)> set;
};

template <typename T, typename Member>
Field field(const char* name, Member member) {
  return {name, [member](const ModelConfig& c) { return Json(member(const_cast<ModelConfig&>(c))); },
          [member](ModelConfig& c, const Json& j) { member(c) = j.get<T>(); }};
}

const std::vector<Field>& config_fields() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(field<int>("d_model", [](ModelConfig& c) -> auto& { return c.d_model; }));
    f.push_back(field<int>("layers", [](ModelConfig& c) -> auto& { return c.layers; }));
    f.push_back(field<int>("d_state", [](ModelConfig& c) -> auto& { return c.d_state; }));
    f.push_back(field<int>("expand", [](ModelConfig& c) -> auto& { return c.expand; }));
    f.push_back(field<int>("t_in", [](ModelConfig& c) -> auto& { return c.t_in; }));
    f.push_back(field<int>("t_out", [](ModelConfig& c) -> auto& { return c.t_out; }));
    f.push_back(field<int>("epochs", [](ModelConfig& c) -> auto& { return c.epochs; }));
    f.push_back(field<double>("lr", [](ModelConfig& c) -> auto& { return c.lr; }));
    f.push_back(field<bool>("cosine_decay", [](ModelConfig& c) -> auto& { return c.cosine_decay; }));
    f.push_back(field<std::uint64_t>("seed", [](ModelConfig& c) -> auto& { return c.seed; }));
    f.push_back(field<int>("morton_bits", [](ModelConfig& c) -> auto& { return c.morton_bits; }));
    f.push_back(field<int>("log_every", [](ModelConfig& c) -> auto& { return c.log_every; }));
    return f;
  }();
  return fields;
}

// Fields that barely vary across the anchor (rotations of a fresh
// reconstruction, say) would otherwise blow up later frames.
constexpr double kScaleFloor = 0.1;

double inverse_softplus(double y) { return y > 20.0 ? y : std::log(std::expm1(y)); }

}  // namespace

ModelConfig model_config_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValueError("model config must be a JSON object");
  ModelConfig config;
  const auto& fields = config_fields();
  for (const auto& [key, value] : j.items()) {
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return key == f.name; });
    if (it == fields.end()) throw ValueError("unknown model config key '" + key + "'");
    try {
      it->set(config, value);
    } catch (const nlohmann::json::exception& e) {
      throw ValueError(key + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

std::string model_config_to_json(const ModelConfig& config) {
  Json j;
  for (const auto& f : config_fields()) j[f.name] = f.get(config);
  return j.dump(2) + "\n";
}

std::vector<Matrix*> ModelParams::tensors() {
  std::vector<Matrix*> out{&w_tok, &b_tok};
  for (auto& l : layers) {
    for (Matrix* m : {&l.w_cr, &l.w_hr, &l.b_r, &l.w_cz, &l.w_hz, &l.b_z, &l.w_ch, &l.w_hh, &l.b_h, &l.w_in, &l.b_in,
                      &l.w_gate, &l.b_gate, &l.w_delta, &l.b_delta, &l.w_b, &l.b_b, &l.w_c, &l.b_c, &l.a_raw, &l.d_skip,
                      &l.w_out, &l.b_out}) {
      out.push_back(m);
    }
  }
  out.push_back(&w_head);
  out.push_back(&b_head);
  return out;
}

std::vector<const Matrix*> ModelParams::tensors() const {
  auto mutable_list = const_cast<ModelParams*>(this)->tensors();
  return {mutable_list.begin(), mutable_list.end()};
}

std::vector<std::string> ModelParams::tensor_names() const {
  std::vector<std::string> out{"tok.w", "tok.b"};
  static const char* per_layer[] = {"w_cr", "w_hr", "b_r",     "w_cz", "w_hz", "b_z", "w_ch",  "w_hh",
                                    "b_h",  "in.w", "in.b",    "gate.w", "gate.b", "delta.w", "delta.b", "B.w",
                                    "B.b",  "C.w",  "C.b",     "A",    "D",    "out.w", "out.b"};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const char* n : per_layer) out.push_back("layer" + std::to_string(l) + "." + n);
  }
  out.push_back("head.w");
  out.push_back("head.b");
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* m : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

ModelParams ModelParams::zeros(const ModelConfig& config, int feature_dim) {
  config.validate();
  if (feature_dim < 1) throw ValueError("feature_dim must be at least 1");
  ModelParams p;
  p.config = config;
  p.feature_dim = feature_dim;
  const Eigen::Index d = config.d_model, di = config.d_inner(), s = config.d_state, pd = p.param_dim();
  p.w_tok = Matrix::Zero(pd, d);
  p.b_tok = Matrix::Zero(1, d);
  p.layers.resize(static_cast<std::size_t>(config.layers));
  for (auto& l : p.layers) {
    for (Matrix* m : {&l.w_cr, &l.w_hr, &l.w_cz, &l.w_hz, &l.w_ch, &l.w_hh}) *m = Matrix::Zero(d, d);
    for (Matrix* m : {&l.b_r, &l.b_z, &l.b_h, &l.b_out}) *m = Matrix::Zero(1, d);
    l.w_in = Matrix::Zero(d, di);
    l.w_gate = Matrix::Zero(d, di);
    l.w_delta = Matrix::Zero(di, di);
    for (Matrix* m : {&l.b_in, &l.b_gate, &l.b_delta, &l.d_skip}) *m = Matrix::Zero(1, di);
    l.w_b = Matrix::Zero(di, s);
    l.w_c = Matrix::Zero(di, s);
    l.b_b = Matrix::Zero(1, s);
    l.b_c = Matrix::Zero(1, s);
    l.a_raw = Matrix::Zero(di, s);
    l.w_out = Matrix::Zero(di, d);
  }
  p.w_head = Matrix::Zero(d, pd);
  p.b_head = Matrix::Zero(1, pd);
  return p;
}

ModelParams ModelParams::initialize(const ModelConfig& config, int feature_dim) {
  ModelParams p = zeros(config, feature_dim);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto fill = [&](Matrix& m, double std) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = std * normal(rng);
    }
  };
  const double d = config.d_model, di = config.d_inner();
  fill(p.w_tok, 1.0 / std::sqrt(static_cast<double>(p.param_dim())));
  for (auto& l : p.layers) {
    for (Matrix* m : {&l.w_cr, &l.w_hr, &l.w_cz, &l.w_hz, &l.w_ch, &l.w_hh}) fill(*m, 1.0 / std::sqrt(d));
    fill(l.w_in, 1.0 / std::sqrt(d));
    fill(l.w_gate, 1.0 / std::sqrt(d));
    fill(l.w_delta, 0.1 / std::sqrt(di));
    fill(l.w_b, 1.0 / std::sqrt(di));
    fill(l.w_c, 1.0 / std::sqrt(di));
    fill(l.w_out, 1.0 / std::sqrt(di));
    for (Eigen::Index i = 0; i < l.b_delta.cols(); ++i) {
      const double step = std::exp(std::log(1e-3) + unit(rng) * (std::log(1e-1) - std::log(1e-3)));
      l.b_delta(0, i) = inverse_softplus(step);
    }
    for (Eigen::Index j = 0; j < l.a_raw.cols(); ++j) l.a_raw.col(j).setConstant(inverse_softplus(j + 1.0));
    l.d_skip.setOnes();
  }
  fill(p.w_head, 0.1 / std::sqrt(d));
  return p;
}

Normalizer Normalizer::from_anchor(const GaussianGroup& anchor) {
  const FeatureMatrix packed = anchor.packed();
  Normalizer n;
  n.mean = packed.colwise().mean();
  n.scale.resize(packed.cols());
  for (Eigen::Index c = 0; c < packed.cols(); ++c) {
    const double var = (packed.col(c).array() - n.mean(c)).square().mean();
    n.scale(c) = std::max(std::sqrt(var), kScaleFloor);
  }
  return n;
}

Matrix Normalizer::apply(const FeatureMatrix& packed) const {
  if (packed.cols() != mean.size()) throw ShapeError("normalizer width does not match the packed rows");
  Matrix out = packed;
  out.rowwise() -= mean;
  out.array().rowwise() /= scale.array();
  return out;
}

Matrix permute_rows(const Matrix& m, const std::vector<Eigen::Index>& perm) {
  if (static_cast<Eigen::Index>(perm.size()) != m.rows()) throw ShapeError("permutation length differs from row count");
  Matrix out(m.rows(), m.cols());
  for (std::size_t k = 0; k < perm.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(perm[k]);
  return out;
}

Matrix unpermute_rows(const Matrix& m, const std::vector<Eigen::Index>& perm) {
  if (static_cast<Eigen::Index>(perm.size()) != m.rows()) throw ShapeError("permutation length differs from row count");
  Matrix out(m.rows(), m.cols());
  for (std::size_t k = 0; k < perm.size(); ++k) out.row(perm[k]) = m.row(static_cast<Eigen::Index>(k));
  return out;
}

ParamVars ParamVars::bind(ad::Tape& tape, const ModelParams& params, ModelParams* grads) {
  auto leaf = [&](const Matrix& value, Matrix* grad) { return tape.parameter(value, grad); };
  auto g = [&](auto member) -> Matrix* { return grads ? &member(*grads) : nullptr; };
  ParamVars v;
  v.w_tok = leaf(params.w_tok, g([](ModelParams& p) -> Matrix& { return p.w_tok; }));
  v.b_tok = leaf(params.b_tok, g([](ModelParams& p) -> Matrix& { return p.b_tok; }));
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const LayerParams& l = params.layers[i];
    LayerParams* gl = grads ? &grads->layers[i] : nullptr;
    auto lg = [&](Matrix LayerParams::*member) { return gl ? &(gl->*member) : nullptr; };
    auto bind = [&](Matrix LayerParams::*member) { return leaf(l.*member, lg(member)); };
    Layer b;
    b.w_cr = bind(&LayerParams::w_cr);
    b.w_hr = bind(&LayerParams::w_hr);
    b.b_r = bind(&LayerParams::b_r);
    b.w_cz = bind(&LayerParams::w_cz);
    b.w_hz = bind(&LayerParams::w_hz);
    b.b_z = bind(&LayerParams::b_z);
    b.w_ch = bind(&LayerParams::w_ch);
    b.w_hh = bind(&LayerParams::w_hh);
    b.b_h = bind(&LayerParams::b_h);
    b.w_in = bind(&LayerParams::w_in);
    b.b_in = bind(&LayerParams::b_in);
    b.w_gate = bind(&LayerParams::w_gate);
    b.b_gate = bind(&LayerParams::b_gate);
    b.w_delta = bind(&LayerParams::w_delta);
    b.b_delta = bind(&LayerParams::b_delta);
    b.w_b = bind(&LayerParams::w_b);
    b.b_b = bind(&LayerParams::b_b);
    b.w_c = bind(&LayerParams::w_c);
    b.b_c = bind(&LayerParams::b_c);
    b.a_raw = bind(&LayerParams::a_raw);
    b.d_skip = bind(&LayerParams::d_skip);
    b.w_out = bind(&LayerParams::w_out);
    b.b_out = bind(&LayerParams::b_out);
    v.layers.push_back(b);
  }
  v.w_head = leaf(params.w_head, g([](ModelParams& p) -> Matrix& { return p.w_head; }));
  v.b_head = leaf(params.b_head, g([](ModelParams& p) -> Matrix& { return p.b_head; }));
  return v;
}

namespace graph {

ad::Var tokenize(ad::Tape& tape, const ParamVars& p, ad::Var normalized) {
  return tape.add_row(tape.matmul(normalized, p.w_tok), p.b_tok);
}

namespace {

constexpr double kRmsEps = 1e-6;

ad::Var affine(ad::Tape& tape, ad::Var x, ad::Var w, ad::Var b) { return tape.add_row(tape.matmul(x, w), b); }

ad::Var scan(ad::Tape& tape, const ParamVars::Layer& p, ad::Var u, ad::Var a) {
  const ad::Var delta = tape.softplus(affine(tape, u, p.w_delta, p.b_delta));
  const ad::Var b = affine(tape, u, p.w_b, p.b_b);
  const ad::Var c = affine(tape, u, p.w_c, p.b_c);
  return tape.ssm_scan(u, delta, a, b, c, p.d_skip);
}

}  // namespace

ad::Var bimamba(ad::Tape& tape, const ParamVars::Layer& p, ad::Var x) {
  const ad::Var normed = tape.rms_norm_rows(x, kRmsEps);
  const ad::Var u = affine(tape, normed, p.w_in, p.b_in);
  const ad::Var gate = tape.sigmoid(affine(tape, normed, p.w_gate, p.b_gate));
  const ad::Var a = tape.neg(tape.softplus(p.a_raw));
  const ad::Var forward = scan(tape, p, u, a);
  const ad::Var backward = tape.reverse_rows(scan(tape, p, tape.reverse_rows(u), a));
  const ad::Var y = tape.mul(tape.add(forward, backward), gate);
  return tape.add(affine(tape, y, p.w_out, p.b_out), x);
}

BlockOut mambagru(ad::Tape& tape, const ParamVars::Layer& p, ad::Var c, ad::Var h) {
  const ad::Var r = tape.sigmoid(tape.add_row(tape.add(tape.matmul(c, p.w_cr), tape.matmul(h, p.w_hr)), p.b_r));
  const ad::Var z = tape.sigmoid(tape.add_row(tape.add(tape.matmul(c, p.w_cz), tape.matmul(h, p.w_hz)), p.b_z));
  const ad::Var h_hat =
      tape.add_row(tape.add(tape.matmul(c, p.w_ch), tape.matmul(tape.mul(r, h), p.w_hh)), p.b_h);
  const ad::Var c_hat = bimamba(tape, p, h_hat);
  const ad::Var h_new = tape.add(tape.mul(z, h), tape.mul(tape.one_minus(z), c_hat));
  return {c_hat, h_new};
}

StepOut step(ad::Tape& tape, const ParamVars& p, ad::Var input, const std::vector<ad::Var>& memory, ad::Var scale) {
  if (memory.size() != p.layers.size()) throw ShapeError("memory holds a different number of layers");
  StepOut out;
  ad::Var c = input;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto block = mambagru(tape, p.layers[l], c, memory[l]);
    c = block.c;
    out.memory.push_back(block.h);
  }
  out.embedding = c;
  out.delta = tape.mul_row(affine(tape, c, p.w_head, p.b_head), scale);
  return out;
}

}  // namespace graph

Matrix tokenize(const FeatureMatrix& packed, const Normalizer& norm, const std::vector<Eigen::Index>& perm,
                const ModelParams& params) {
  if (packed.cols() != params.param_dim()) throw ShapeError("packed rows do not match the model parameter width");
  ad::Tape tape;
  const auto p = ParamVars::bind(tape, params);
  return tape.value(graph::tokenize(tape, p, tape.constant(permute_rows(norm.apply(packed), perm))));
}

namespace {

// Single-layer bindings for the value-level block wrappers.
ModelParams single_layer(const LayerParams& layer) {
  ModelParams p;
  p.w_tok = Matrix::Zero(1, 1);
  p.b_tok = Matrix::Zero(1, 1);
  p.w_head = Matrix::Zero(1, 1);
  p.b_head = Matrix::Zero(1, 1);
  p.layers = {layer};
  return p;
}

}  // namespace

Matrix bimamba(const Matrix& x, const LayerParams& layer) {
  ad::Tape tape;
  const auto p = ParamVars::bind(tape, single_layer(layer));
  return tape.value(graph::bimamba(tape, p.layers[0], tape.constant(x)));
}

BlockValues mambagru_block(const Matrix& c_prev, const Matrix& h_prev, const LayerParams& layer) {
  ad::Tape tape;
  const auto p = ParamVars::bind(tape, single_layer(layer));
  const auto out = graph::mambagru(tape, p.layers[0], tape.constant(c_prev), tape.constant(h_prev));
  return {tape.value(out.c), tape.value(out.h)};
}

LossTerms loss_terms(const ModelConfig& config) { return {config.t_in, config.t_out - 1}; }

namespace {

// Inputs and targets of one sequence in token order.
struct Prepared {
  std::vector<Eigen::Index> perm;
  Normalizer norm;
  Matrix scale;
  std::vector<Matrix> inputs;   // normalized G_t, t = 0..T-1
  std::vector<Matrix> targets;  // Delta G_t, t = 0..T-1
};

Prepared prepare(const GaussianSequence& seq, const ModelParams& params) {
  const ModelConfig& cfg = params.config;
  const auto frames = static_cast<int>(seq.length());
  if (frames != cfg.t_in + cfg.t_out) {
    throw ShapeError("sequence has " + std::to_string(frames) + " frames but t_in + t_out = " +
                     std::to_string(cfg.t_in + cfg.t_out));
  }
  if (seq.anchor.feature_dim() != params.feature_dim) {
    throw ShapeError("sequence has " + std::to_string(seq.anchor.feature_dim()) + " feature channels, model expects " +
                     std::to_string(params.feature_dim));
  }
  Prepared p;
  p.perm = morton_sort(seq.anchor, cfg.morton_bits);
  p.norm = Normalizer::from_anchor(seq.anchor);
  p.scale = p.norm.scale;
  for (int t = 0; t < frames; ++t) {
    const auto t_index = static_cast<std::size_t>(t);
    p.inputs.push_back(permute_rows(p.norm.apply(seq.frame(t_index).packed()), p.perm));
    p.targets.push_back(permute_rows(seq.delta(t_index).packed(), p.perm));
  }
  return p;
}

std::vector<ad::Var> zero_memory(ad::Tape& tape, const ModelParams& params, Eigen::Index tokens) {
  std::vector<ad::Var> memory;
  for (int l = 0; l < params.config.layers; ++l) {
    memory.push_back(tape.constant(Matrix::Zero(tokens, params.config.d_model)));
  }
  return memory;
}

double loss_on(const Prepared& prep, const ModelParams& params, ModelParams* grads) {
  const ModelConfig& cfg = params.config;
  ad::Tape tape;
  const auto p = ParamVars::bind(tape, params, grads);
  const Eigen::Index m = prep.inputs.front().rows();
  const double per_term = 1.0 / static_cast<double>(prep.targets.front().size());
  const ad::Var scale = tape.constant(prep.scale);
  auto memory = zero_memory(tape, params, m);
  const ad::Var anchor_tokens = graph::tokenize(tape, p, tape.constant(prep.inputs.front()));
  ad::Var embedding;
  ad::Var total;
  const int frames = cfg.t_in + cfg.t_out;
  for (int t = 1; t < frames; ++t) {
    const ad::Var input = t <= cfg.t_in
                              ? graph::tokenize(tape, p, tape.constant(prep.inputs[static_cast<std::size_t>(t - 1)]))
                              : tape.add(anchor_tokens, embedding);
    auto out = graph::step(tape, p, input, memory, scale);
    memory = out.memory;
    embedding = out.embedding;
    const ad::Var err = tape.sub(out.delta, tape.constant(prep.targets[static_cast<std::size_t>(t)]));
    const ad::Var term = tape.scale(tape.sum_squares(err), per_term);
    total = total.valid() ? tape.add(total, term) : term;
  }
  const double value = tape.value(total)(0, 0);
  if (grads != nullptr) tape.backward(total);
  return value;
}

}  // namespace

double prediction_loss(const GaussianSequence& sequence, const ModelParams& params, ModelParams* grads) {
  return loss_on(prepare(sequence, params), params, grads);
}

std::string TrainRecord::to_json() const {
  Json j;
  j["epoch"] = epoch;
  j["loss"] = loss;
  j["skipped_blocks"] = skipped_blocks;
  return j.dump();
}

TrainResult train(const std::vector<GaussianSequence>& sequences, const ModelConfig& config, const TrainSink& sink) {
  config.validate();
  if (sequences.empty()) throw ValueError("training needs at least one sequence");
  const auto m = sequences.front().anchor.size();
  const auto n = sequences.front().anchor.feature_dim();
  for (const auto& s : sequences) {
    if (s.anchor.size() != m || s.anchor.feature_dim() != n) {
      throw ShapeError("training sequences differ in Gaussian count or feature channels");
    }
  }
  TrainResult result;
  result.params = ModelParams::initialize(config, static_cast<int>(n));
  std::vector<Prepared> data;
  for (const auto& s : sequences) data.push_back(prepare(s, result.params));

  auto tensors = result.params.tensors();
  std::vector<Adam> adams;
  for (Matrix* t : tensors) adams.emplace_back(t->size());
  auto mean_loss = [&]() {
    double sum = 0.0;
    for (const auto& d : data) sum += loss_on(d, result.params, nullptr);
    return sum / static_cast<double>(data.size());
  };
  result.history.push_back(mean_loss());
  if (sink) sink(TrainRecord{0, result.history.back(), 0});
  int skipped = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = epoch_lr(config, epoch);
    double sum = 0.0;
    for (const auto& d : data) {
      ModelParams grads = ModelParams::zeros(config, static_cast<int>(n));
      sum += loss_on(d, result.params, &grads);
      const auto grad_tensors = grads.tensors();
      for (std::size_t k = 0; k < tensors.size(); ++k) {
        Eigen::Map<Eigen::VectorXd> param(tensors[k]->data(), tensors[k]->size());
        Eigen::Map<const Eigen::VectorXd> grad(grad_tensors[k]->data(), grad_tensors[k]->size());
        skipped += !adams[k].step(param, grad, lr);
      }
    }
    result.history.push_back(sum / static_cast<double>(data.size()));
    if (sink && (epoch % config.log_every == 0 || epoch == config.epochs)) {
      sink(TrainRecord{epoch, result.history.back(), skipped});
    }
  }
  return result;
}

GaussianSequence predict(const std::vector<GaussianGroup>& observed, const ModelParams& params,
                         const PredictOptions& options) {
  const ModelConfig& cfg = params.config;
  if (static_cast<int>(observed.size()) != cfg.t_in) {
    throw ShapeError("expected " + std::to_string(cfg.t_in) + " observed groups, got " +
                     std::to_string(observed.size()));
  }
  const GaussianGroup& anchor = observed.front();
  if (anchor.feature_dim() != params.feature_dim) throw ShapeError("observed groups do not match the model channels");
  for (const auto& g : observed) {
    if (g.size() != anchor.size() || g.feature_dim() != anchor.feature_dim()) {
      throw ShapeError("observed groups differ in Gaussian count or channels");
    }
  }
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(anchor.size()));
  if (options.unsorted) {
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  } else {
    perm = morton_sort(anchor, cfg.morton_bits);
  }
  const Normalizer norm = Normalizer::from_anchor(anchor);
  const Matrix scale = norm.scale;
  const Matrix anchor_input = permute_rows(norm.apply(anchor.packed()), perm);
  const Eigen::Index m = anchor.size();

  std::vector<Matrix> memory(static_cast<std::size_t>(cfg.layers), Matrix::Zero(m, cfg.d_model));
  Matrix embedding;
  std::vector<GaussianGroup> frames;
  const int total = cfg.t_in + cfg.t_out;
  for (int t = 1; t < total; ++t) {
    ad::Tape tape;
    const auto p = ParamVars::bind(tape, params);
    const ad::Var input =
        t <= cfg.t_in
            ? graph::tokenize(tape, p,
                              tape.constant(permute_rows(norm.apply(observed[static_cast<std::size_t>(t - 1)].packed()),
                                                         perm)))
            : tape.add(graph::tokenize(tape, p, tape.constant(anchor_input)), tape.constant(embedding));
    std::vector<ad::Var> mem;
    for (const auto& h : memory) mem.push_back(tape.constant(options.reset_memory ? Matrix::Zero(m, cfg.d_model) : h));
    const auto out = graph::step(tape, p, input, mem, tape.constant(scale));
    for (std::size_t l = 0; l < memory.size(); ++l) memory[l] = tape.value(out.memory[l]);
    embedding = tape.value(out.embedding);
    if (t >= cfg.t_in) {
      const Matrix delta = unpermute_rows(tape.value(out.delta), perm);
      frames.push_back(compose(anchor, DiffGaussians::unpack(delta, anchor.feature_dim())));
    }
  }
  GaussianSequence seq;
  seq.anchor = frames.front();
  for (std::size_t k = 1; k < frames.size(); ++k) seq.deltas.push_back(decompose(frames[k], frames.front()));
  seq.meta.activations = anchor.activations;
  return seq;
}

namespace {
constexpr std::string_view kModelMagic = "GMAM0001";
}

std::vector<std::uint8_t> encode_model(const ModelParams& params) {
  io::ByteWriter w;
  w.magic(kModelMagic);
  const std::string config = model_config_to_json(params.config);
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(config.data()), config.size()));
  w.u32(static_cast<std::uint32_t>(params.feature_dim));
  for (const Matrix* t : params.tensors()) {
    w.u32(static_cast<std::uint32_t>(t->rows()));
    w.u32(static_cast<std::uint32_t>(t->cols()));
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = *t;
    w.f32_array(std::span<const double>(rows.data(), static_cast<std::size_t>(rows.size())));
  }
  return w.take();
}

ModelParams decode_model(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kModelMagic);
  const auto length = r.u32("config_length");
  const auto text = r.bytes("config", length);
  const ModelConfig config = model_config_from_json(std::string(text.begin(), text.end()));
  const auto feature_dim = r.u32("feature_dim");
  if (feature_dim < 1 || feature_dim > 4096) throw FormatError("feature_dim", "out of range");
  ModelParams params = ModelParams::zeros(config, static_cast<int>(feature_dim));
  const auto names = params.tensor_names();
  auto tensors = params.tensors();
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto rows = r.u32(names[k] + ".rows");
    const auto cols = r.u32(names[k] + ".cols");
    if (rows != tensors[k]->rows() || cols != tensors[k]->cols()) {
      throw FormatError(names[k], "shape " + std::to_string(rows) + "x" + std::to_string(cols) + " does not match the config");
    }
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> values(rows, cols);
    r.f32_array(names[k], std::span<double>(values.data(), static_cast<std::size_t>(values.size())));
    *tensors[k] = values;
  }
  r.expect_end("model");
  return params;
}

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  io::write_file(path, encode_model(params));
}

ModelParams load_model(const std::filesystem::path& path) { return decode_model(io::read_file(path)); }

}  // namespace stormsplat

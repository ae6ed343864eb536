#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stormsplat/errors.hpp"
#include "stormsplat/metrics.hpp"
#include "stormsplat/model.hpp"
#include "stormsplat/renderer.hpp"
#include "model_oracle.hpp"
#include "test_support.hpp"

namespace stormsplat {
namespace {

using testing::random_group;
using testing::reference_bimamba;
using testing::reference_mambagru;
using testing::softplus;
using testing::TempDir;

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double std = 0.5) {
  std::normal_distribution<double> n(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.layers = 1;
  c.d_state = 4;
  c.expand = 2;
  c.t_in = 2;
  c.t_out = 2;
  c.epochs = 3;
  c.lr = 1e-2;
  c.seed = 5;
  return c;
}

// Every tensor filled with small random values; larger ones make rollouts blow up.
ModelParams random_params(const ModelConfig& config, int feature_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams p = ModelParams::zeros(config, feature_dim);
  for (Matrix* t : p.tensors()) *t = random_matrix(rng, t->rows(), t->cols(), 0.25);
  return p;
}

// Sequence drifting linearly from a random anchor.
GaussianSequence drifting_sequence(std::uint64_t seed, Eigen::Index count, int frames, double speed = 0.3) {
  std::mt19937_64 rng(seed);
  GaussianSequence seq;
  seq.anchor = random_group(rng, count, 1, {0, 0, 0}, {16, 16, 8});
  seq.anchor.normalize_rotations();
  seq.meta.activations = seq.anchor.activations;
  for (int t = 1; t < frames; ++t) {
    DiffGaussians d = DiffGaussians::zeros(count, 1);
    d.positions.col(0).setConstant(speed * t);
    d.positions.col(1).setConstant(-0.5 * speed * t);
    d.features.col(0) = seq.anchor.positions.col(0) * (0.05 * t);
    d.log_scales.setConstant(0.02 * t);
    seq.deltas.push_back(d);
  }
  return seq;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

TEST(ModelConfigJson, RoundTrips) {
  ModelConfig c = tiny_config();
  c.lr = 3e-4;
  c.seed = 99;
  c.cosine_decay = true;
  const ModelConfig back = model_config_from_json(model_config_to_json(c));
  EXPECT_EQ(model_config_to_json(back), model_config_to_json(c));
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.lr, 3e-4);
  EXPECT_TRUE(back.cosine_decay);
}

TEST(ModelConfigJson, UnknownKeyAndBadValuesThrow) {
  EXPECT_THROW(model_config_from_json(R"({"d_modle": 4})"), ValueError);
  EXPECT_THROW(model_config_from_json(R"({"layers": 0})"), ValueError);
  EXPECT_THROW(model_config_from_json(R"({"lr": "fast"})"), ValueError);
  EXPECT_THROW(model_config_from_json("[1]"), ValueError);
  EXPECT_EQ(model_config_from_json(R"({"t_out": 3})").t_out, 3);
}

TEST(ModelParams, ShapesAndCount) {
  const ModelConfig c = tiny_config();
  const ModelParams p = ModelParams::initialize(c, 2);
  EXPECT_EQ(p.param_dim(), 12);
  EXPECT_EQ(p.w_tok.rows(), 12);
  EXPECT_EQ(p.w_tok.cols(), 8);
  EXPECT_EQ(p.w_head.cols(), 12);
  EXPECT_EQ(p.layers[0].a_raw.rows(), 16);
  EXPECT_EQ(p.layers[0].a_raw.cols(), 4);
  EXPECT_EQ(p.tensors().size(), p.tensor_names().size());
  std::size_t count = 0;
  for (const Matrix* t : p.tensors()) count += static_cast<std::size_t>(t->size());
  EXPECT_EQ(p.parameter_count(), count);
}

TEST(ModelParams, InitializationSetsStateMatrixAndSkip) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 1);
  const LayerParams& l = p.layers[0];
  for (Eigen::Index j = 0; j < l.a_raw.cols(); ++j) {
    EXPECT_NEAR(softplus(l.a_raw(0, j)), j + 1.0, 1e-12);
  }
  EXPECT_EQ(l.d_skip, Matrix::Ones(1, l.d_skip.cols()));
  for (Eigen::Index i = 0; i < l.b_delta.cols(); ++i) {
    EXPECT_GE(softplus(l.b_delta(0, i)), 1e-3 - 1e-12);
    EXPECT_LE(softplus(l.b_delta(0, i)), 1e-1 + 1e-12);
  }
  EXPECT_EQ(max_abs(l.b_r), 0.0);
  EXPECT_EQ(max_abs(l.b_z), 0.0);
}

TEST(ModelParams, InitializationIsSeeded) {
  const ModelParams a = ModelParams::initialize(tiny_config(), 1);
  const ModelParams b = ModelParams::initialize(tiny_config(), 1);
  ModelConfig other = tiny_config();
  other.seed = 6;
  const ModelParams c = ModelParams::initialize(other, 1);
  EXPECT_EQ(a.w_tok, b.w_tok);
  EXPECT_NE(a.w_tok, c.w_tok);
}

TEST(Normalizer, AnchorBecomesZeroMeanUnitScale) {
  std::mt19937_64 rng(1);
  const GaussianGroup g = random_group(rng, 40, 2, {0, 0, 0}, {10, 20, 5});
  const Normalizer n = Normalizer::from_anchor(g);
  const Matrix z = n.apply(g.packed());
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    EXPECT_NEAR(z.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(z.col(c).array().square().mean()), 1.0, 1e-12);
  }
}

TEST(Normalizer, ConstantFieldGetsTheScaleFloor) {
  std::mt19937_64 rng(2);
  GaussianGroup g = random_group(rng, 10, 1, {0, 0, 0}, {4, 4, 4});
  g.log_scales.col(2).setConstant(0.7);
  const Normalizer n = Normalizer::from_anchor(g);
  EXPECT_EQ(n.scale(3 + 1 + 2), 0.1);
  EXPECT_TRUE(n.apply(g.packed()).allFinite());
}

TEST(Permutation, UnpermuteInvertsPermute) {
  std::mt19937_64 rng(3);
  const Matrix m = random_matrix(rng, 5, 3);
  const std::vector<Eigen::Index> perm{3, 0, 4, 1, 2};
  const Matrix p = permute_rows(m, perm);
  EXPECT_EQ(p.row(0), m.row(3));
  EXPECT_EQ(unpermute_rows(p, perm), m);
}

TEST(Tokenize, ZeroWeightsGiveTheBias) {
  std::mt19937_64 rng(4);
  const GaussianGroup g = random_group(rng, 6, 1, {0, 0, 0}, {4, 4, 4});
  ModelParams p = ModelParams::zeros(tiny_config(), 1);
  p.b_tok = random_matrix(rng, 1, 8);
  const Normalizer n = Normalizer::from_anchor(g);
  const Matrix t = tokenize(g.packed(), n, morton_sort(g), p);
  for (Eigen::Index r = 0; r < t.rows(); ++r) EXPECT_EQ(t.row(r), p.b_tok.row(0));
}

TEST(Tokenize, IdentityWeightsGiveSortedNormalizedRows) {
  std::mt19937_64 rng(5);
  const GaussianGroup g = random_group(rng, 7, 1, {0, 0, 0}, {4, 4, 4});
  ModelConfig c = tiny_config();
  c.d_model = 11;
  ModelParams p = ModelParams::zeros(c, 1);
  p.w_tok = Matrix::Identity(11, 11);
  const Normalizer n = Normalizer::from_anchor(g);
  const auto perm = morton_sort(g);
  const Matrix t = tokenize(g.packed(), n, perm, p);
  const Matrix z = n.apply(g.packed());
  for (std::size_t k = 0; k < perm.size(); ++k) {
    EXPECT_LT(max_abs(t.row(static_cast<Eigen::Index>(k)) - z.row(perm[k])), 1e-15);
  }
}

TEST(Tokenize, ShuffledGroupGivesTheSameTokens) {
  std::mt19937_64 rng(6);
  const GaussianGroup g = random_group(rng, 12, 1, {0, 0, 0}, {8, 8, 8});
  std::vector<Eigen::Index> order{5, 2, 11, 0, 7, 3, 9, 1, 10, 4, 8, 6};
  const GaussianGroup shuffled = g.select(order);
  const ModelParams p = random_params(tiny_config(), 1, 7);
  const Matrix a = tokenize(g.packed(), Normalizer::from_anchor(g), morton_sort(g), p);
  const Matrix b = tokenize(shuffled.packed(), Normalizer::from_anchor(shuffled), morton_sort(shuffled), p);
  EXPECT_LT(max_abs(a - b), 1e-12);
}

TEST(BiMamba, ZeroOutputProjectionIsIdentity) {
  std::mt19937_64 rng(8);
  ModelParams p = random_params(tiny_config(), 1, 9);
  p.layers[0].w_out.setZero();
  p.layers[0].b_out.setZero();
  const Matrix x = random_matrix(rng, 5, 8);
  EXPECT_EQ(bimamba(x, p.layers[0]), x);
}

TEST(BiMamba, MatchesLoopReference) {
  std::mt19937_64 rng(10);
  const ModelParams p = random_params(tiny_config(), 1, 11);
  for (Eigen::Index m : {1, 3, 6}) {
    const Matrix x = random_matrix(rng, m, 8);
    EXPECT_LT(max_abs(bimamba(x, p.layers[0]) - reference_bimamba(x, p.layers[0])), 1e-10) << "tokens " << m;
  }
}

TEST(BiMamba, FirstTokenSeesTheLastToken) {
  std::mt19937_64 rng(12);
  const ModelParams p = random_params(tiny_config(), 1, 13);
  Matrix x = random_matrix(rng, 6, 8);
  const Matrix before = bimamba(x, p.layers[0]);
  x.row(5).array() += 1.0;
  const Matrix after = bimamba(x, p.layers[0]);
  EXPECT_GT(max_abs(after.row(0) - before.row(0)), 1e-6);
}

TEST(MambaGru, MatchesLoopReference) {
  std::mt19937_64 rng(14);
  const ModelParams p = random_params(tiny_config(), 1, 15);
  const Matrix c = random_matrix(rng, 4, 8), h = random_matrix(rng, 4, 8);
  const BlockValues got = mambagru_block(c, h, p.layers[0]);
  const BlockValues want = reference_mambagru(c, h, p.layers[0]);
  EXPECT_LT(max_abs(got.c - want.c), 1e-10);
  EXPECT_LT(max_abs(got.h - want.h), 1e-10);
}

TEST(MambaGru, SaturatedUpdateGateKeepsMemory) {
  std::mt19937_64 rng(16);
  ModelParams p = random_params(tiny_config(), 1, 17);
  const Matrix c = random_matrix(rng, 4, 8), h = random_matrix(rng, 4, 8);
  double last = std::numeric_limits<double>::infinity();
  for (double bias : {5.0, 10.0, 20.0, 30.0}) {
    p.layers[0].w_cz.setZero();
    p.layers[0].w_hz.setZero();
    p.layers[0].b_z.setConstant(bias);
    const double change = max_abs(mambagru_block(c, h, p.layers[0]).h - h);
    EXPECT_LT(change, last) << "bias " << bias;
    last = change;
  }
  EXPECT_LT(last, 1e-6);
}

TEST(MambaGru, ClosedResetGateDropsMemoryFromCandidate) {
  std::mt19937_64 rng(18);
  ModelParams p = random_params(tiny_config(), 1, 19);
  p.layers[0].w_cr.setZero();
  p.layers[0].w_hr.setZero();
  p.layers[0].b_r.setConstant(-60.0);
  const Matrix c = random_matrix(rng, 4, 8);
  const Matrix a = mambagru_block(c, random_matrix(rng, 4, 8), p.layers[0]).c;
  const Matrix b = mambagru_block(c, random_matrix(rng, 4, 8), p.layers[0]).c;
  EXPECT_LT(max_abs(a - b), 1e-12);
}

TEST(Step, ZeroHeadPredictsNoChange) {
  std::mt19937_64 rng(20);
  ModelParams p = random_params(tiny_config(), 1, 21);
  p.w_head.setZero();
  p.b_head.setZero();
  ad::Tape tape;
  const auto vars = ParamVars::bind(tape, p);
  const auto out = graph::step(tape, vars, tape.constant(random_matrix(rng, 5, 8)),
                               {tape.constant(random_matrix(rng, 5, 8))}, tape.constant(Matrix::Ones(1, 11)));
  EXPECT_EQ(max_abs(tape.value(out.delta)), 0.0);
}

TEST(Step, MemoryChangesThePrediction) {
  std::mt19937_64 rng(22);
  const ModelParams p = random_params(tiny_config(), 1, 23);
  const Matrix input = random_matrix(rng, 5, 8);
  auto run = [&](const Matrix& memory) {
    ad::Tape tape;
    const auto vars = ParamVars::bind(tape, p);
    const auto out = graph::step(tape, vars, tape.constant(input), {tape.constant(memory)},
                                 tape.constant(Matrix::Ones(1, 11)));
    return Matrix(tape.value(out.delta));
  };
  const Matrix zero = run(Matrix::Zero(5, 8));
  EXPECT_EQ(zero, run(Matrix::Zero(5, 8)));
  EXPECT_GT(max_abs(zero - run(random_matrix(rng, 5, 8))), 1e-6);
}

TEST(Step, HeadIsScaledPerField) {
  std::mt19937_64 rng(24);
  const ModelParams p = random_params(tiny_config(), 1, 25);
  const Matrix input = random_matrix(rng, 3, 8);
  Matrix scale = Matrix::Ones(1, 11);
  auto run = [&](const Matrix& s) {
    ad::Tape tape;
    const auto vars = ParamVars::bind(tape, p);
    const auto out = graph::step(tape, vars, tape.constant(input), {tape.constant(Matrix::Zero(3, 8))},
                                 tape.constant(s));
    return Matrix(tape.value(out.delta));
  };
  const Matrix unit = run(scale);
  scale(0, 4) = 3.0;
  const Matrix scaled = run(scale);
  EXPECT_LT(max_abs(scaled.col(4) - 3.0 * unit.col(4)), 1e-12);
  EXPECT_EQ(scaled.col(0), unit.col(0));
}

TEST(LossTerms, CountsTeacherAndRolloutSteps) {
  ModelConfig c;
  c.t_in = 1;
  c.t_out = 1;
  EXPECT_EQ(loss_terms(c).teacher, 1);
  EXPECT_EQ(loss_terms(c).rollout, 0);
  c.t_in = 5;
  c.t_out = 20;
  EXPECT_EQ(loss_terms(c).teacher, 5);
  EXPECT_EQ(loss_terms(c).rollout, 19);
}

TEST(PredictionLoss, ZeroModelOnStaticSequenceIsZero) {
  GaussianSequence seq = drifting_sequence(1, 10, 4, 0.0);
  for (auto& d : seq.deltas) d = DiffGaussians::zeros(10, 1);
  const ModelParams p = ModelParams::zeros(tiny_config(), 1);
  EXPECT_EQ(prediction_loss(seq, p), 0.0);
}

TEST(PredictionLoss, ZeroModelLossIsSumOfMeanSquaredDeltas) {
  const GaussianSequence seq = drifting_sequence(2, 10, 4);
  const ModelParams p = ModelParams::zeros(tiny_config(), 1);
  double expect = 0.0;
  for (std::size_t t = 1; t < seq.length(); ++t) expect += seq.delta(t).packed().array().square().mean();
  EXPECT_NEAR(prediction_loss(seq, p), expect, 1e-12 * expect);
}

TEST(PredictionLoss, GradientMatchesFiniteDifferences) {
  const ModelConfig c = tiny_config();
  const GaussianSequence seq = drifting_sequence(3, 16, c.t_in + c.t_out);
  ModelParams p = random_params(c, 1, 31);
  ModelParams grads = ModelParams::zeros(c, 1);
  prediction_loss(seq, p, &grads);
  auto tensors = p.tensors();
  const auto grad_tensors = grads.tensors();
  const auto names = p.tensor_names();
  const double h = 1e-6;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    for (Eigen::Index i = 0; i < tensors[k]->size(); ++i) {
      double& x = tensors[k]->data()[i];
      const double keep = x;
      x = keep + h;
      const double up = prediction_loss(seq, p);
      x = keep - h;
      const double down = prediction_loss(seq, p);
      x = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad_tensors[k]->data()[i];
      ASSERT_NEAR(analytic, numeric, 1e-3 * std::max(1e-3, std::abs(numeric))) << names[k] << " entry " << i;
    }
  }
}

TEST(PredictionLoss, WrongLengthOrChannelsThrow) {
  const ModelConfig c = tiny_config();
  const ModelParams p = ModelParams::zeros(c, 1);
  EXPECT_THROW(prediction_loss(drifting_sequence(4, 8, 3), p), ShapeError);
  const ModelParams two = ModelParams::zeros(c, 2);
  EXPECT_THROW(prediction_loss(drifting_sequence(4, 8, 4), two), ShapeError);
}

TEST(Train, FitsADriftingSequence) {
  ModelConfig c = tiny_config();
  c.epochs = 300;
  c.lr = 1e-2;
  const GaussianSequence seq = drifting_sequence(5, 16, c.t_in + c.t_out, 0.1);
  std::vector<TrainRecord> records;
  const auto result = train({seq}, c, [&](const TrainRecord& r) { records.push_back(r); });
  ASSERT_EQ(result.history.size(), 301u);
  EXPECT_EQ(records.front().epoch, 0);
  EXPECT_EQ(records.back().epoch, 300);
  EXPECT_LT(result.history.back(), 1e-4);
  EXPECT_LT(prediction_loss(seq, result.params), 1e-4);
}

TEST(Train, ConstantSequenceLearnsNoChange) {
  ModelConfig c = tiny_config();
  c.epochs = 300;
  std::mt19937_64 rng(12);
  GaussianSequence seq;
  seq.anchor = random_group(rng, 16, 1, {0, 0, 0}, {16, 16, 8});
  seq.anchor.normalize_rotations();
  seq.meta.activations = seq.anchor.activations;
  for (int t = 1; t < c.t_in + c.t_out; ++t) seq.deltas.push_back(DiffGaussians::zeros(16, 1));
  const auto result = train({seq}, c);
  EXPECT_GT(result.history.front(), 0.0);
  EXPECT_LT(result.history.back(), 1e-4);

  std::vector<GaussianGroup> observed(static_cast<std::size_t>(c.t_in), seq.anchor);
  const GaussianSequence pred = predict(observed, result.params);
  const GridDims dims{8, 16, 16};
  const RadarVolume still = render_volume(seq.anchor, dims);
  for (std::size_t t = 0; t < pred.length(); ++t) {
    EXPECT_LT(me_mae(render_volume(pred.frame(t), dims), still).mae, 1e-3) << "frame " << t;
  }
}

TEST(Train, IsDeterministic) {
  const ModelConfig c = tiny_config();
  const std::vector<GaussianSequence> data{drifting_sequence(6, 12, 4), drifting_sequence(7, 12, 4)};
  const auto a = train(data, c);
  const auto b = train(data, c);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(encode_model(a.params), encode_model(b.params));
}

TEST(Train, CosineDecayHalvesAtTheMidpoint) {
  ModelConfig c = tiny_config();
  c.lr = 0.4;
  c.epochs = 10;
  EXPECT_EQ(epoch_lr(c, 1), 0.4);
  EXPECT_EQ(epoch_lr(c, 6), 0.4);
  c.cosine_decay = true;
  EXPECT_EQ(epoch_lr(c, 1), 0.4);
  EXPECT_NEAR(epoch_lr(c, 6), 0.2, 1e-15);
  EXPECT_NEAR(epoch_lr(c, 10), 0.2 * (1.0 + std::cos(0.9 * M_PI)), 1e-15);
  for (int e = 2; e <= 10; ++e) EXPECT_LT(epoch_lr(c, e), epoch_lr(c, e - 1));
}

TEST(Train, RecordsAreJsonLines) {
  ModelConfig c = tiny_config();
  c.epochs = 4;
  c.log_every = 2;
  std::vector<std::string> lines;
  train({drifting_sequence(8, 8, 4)}, c, [&](const TrainRecord& r) { lines.push_back(r.to_json()); });
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_NE(lines[1].find("\"epoch\":2"), std::string::npos);
  EXPECT_EQ(lines[1].find('\n'), std::string::npos);
}

TEST(Train, MismatchedSequencesThrow) {
  const ModelConfig c = tiny_config();
  EXPECT_THROW(train({}, c), ValueError);
  EXPECT_THROW(train({drifting_sequence(1, 8, 4), drifting_sequence(2, 9, 4)}, c), ShapeError);
}

std::vector<GaussianGroup> observed_frames(const GaussianSequence& seq, int count) {
  std::vector<GaussianGroup> out;
  for (int t = 0; t < count; ++t) out.push_back(seq.frame(static_cast<std::size_t>(t)));
  return out;
}

TEST(Predict, ReturnsTOutFramesDeterministically) {
  ModelConfig c = tiny_config();
  c.t_out = 4;
  const ModelParams p = random_params(c, 1, 41);
  const auto observed = observed_frames(drifting_sequence(9, 10, 6), c.t_in);
  const GaussianSequence a = predict(observed, p);
  EXPECT_EQ(a.length(), 4u);
  EXPECT_EQ(a.anchor.size(), 10);
  EXPECT_EQ(encode_gseq(a), encode_gseq(predict(observed, p)));
  EXPECT_THROW(predict({observed.front()}, p), ShapeError);
}

TEST(Predict, ZeroHeadRepeatsTheFirstObservation) {
  ModelConfig c = tiny_config();
  ModelParams p = random_params(c, 1, 42);
  p.w_head.setZero();
  p.b_head.setZero();
  const auto observed = observed_frames(drifting_sequence(10, 10, 4), c.t_in);
  const GaussianSequence out = predict(observed, p);
  GaussianGroup first = observed.front();
  first.normalize_rotations();
  EXPECT_LT(max_abs(out.anchor.packed() - first.packed()), 1e-12);
  EXPECT_LT(max_abs(out.delta(1).packed()), 1e-12);
}

TEST(Predict, InterventionsChangeTheOutput) {
  ModelConfig c = tiny_config();
  c.t_in = 3;
  const ModelParams p = random_params(c, 1, 43);
  const auto observed = observed_frames(drifting_sequence(11, 12, 5), c.t_in);
  const FeatureMatrix base = predict(observed, p).anchor.packed();
  EXPECT_GT(max_abs(predict(observed, p, {.reset_memory = true}).anchor.packed() - base), 1e-9);
  EXPECT_GT(max_abs(predict(observed, p, {.unsorted = true}).anchor.packed() - base), 1e-9);
}

TEST(Predict, RelabelingGaussiansRelabelsThePrediction) {
  ModelConfig c = tiny_config();
  c.t_in = 3;
  const ModelParams p = random_params(c, 1, 44);
  const auto observed = observed_frames(drifting_sequence(12, 12, 5), c.t_in);
  std::vector<Eigen::Index> order(12);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(45));
  auto relabel = [&](const FeatureMatrix& rows) {
    FeatureMatrix out(rows.rows(), rows.cols());
    for (Eigen::Index i = 0; i < 12; ++i) out.row(i) = rows.row(order[static_cast<std::size_t>(i)]);
    return out;
  };
  std::vector<GaussianGroup> shuffled;
  for (const auto& g : observed) {
    shuffled.push_back(GaussianGroup::unpack(relabel(g.packed()), g.feature_dim(), g.activations));
  }
  const GaussianSequence base = predict(observed, p), moved = predict(shuffled, p);
  for (std::size_t t = 0; t < base.length(); ++t) {
    EXPECT_LT(max_abs(moved.frame(t).packed() - relabel(base.frame(t).packed())), 1e-9) << "frame " << t;
  }
}

TEST(ModelCheckpoint, RoundTripsAtSinglePrecision) {
  const ModelParams p = random_params(tiny_config(), 1, 51);
  TempDir dir("model");
  save_model(p, dir / "m.gmam");
  const ModelParams back = load_model(dir / "m.gmam");
  EXPECT_EQ(model_config_to_json(back.config), model_config_to_json(p.config));
  const auto a = p.tensors();
  const auto b = back.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_LT(max_abs(*a[k] - *b[k]), 1e-6 * std::max(1.0, max_abs(*a[k])));
  }
  EXPECT_EQ(encode_model(back), encode_model(p));
}

TEST(ModelCheckpoint, CorruptBytesAreRejected) {
  auto bytes = encode_model(ModelParams::zeros(tiny_config(), 1));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_model(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(decode_model(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_model(trailing), FormatError);
}

}  // namespace
}  // namespace stormsplat

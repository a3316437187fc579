#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "blinkwise/sequence_model.hpp"
#include "blinkwise/training.hpp"

using namespace blinkwise;

namespace {

ModelConfig small_config(BoundaryMode mode = BoundaryMode::soft) {
  ModelConfig c;
  c.window = 5;
  c.fc1 = 4;
  c.hidden = 4;
  c.head = 4;
  c.fc2 = 4;
  c.fc3 = 4;
  c.fc4 = 4;
  c.boundary = mode;
  return c;
}

BlinkSequence random_sequence(int window, std::uint64_t seed, int padding = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  BlinkSequence s;
  s.features = Matrix::Zero(window, 4);
  s.pad_mask.assign(static_cast<std::size_t>(window), true);
  s.blink_ids.assign(static_cast<std::size_t>(window), 0);
  for (int t = 0; t < window; ++t) {
    if (t < padding) {
      s.pad_mask[static_cast<std::size_t>(t)] = false;
      continue;
    }
    for (int k = 0; k < 4; ++k) s.features(t, k) = n(rng);
  }
  s.label = 5.0;
  return s;
}

std::vector<Matrix> random_inputs(int T, int B, int L, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<Matrix> x(static_cast<std::size_t>(T), Matrix(B, L));
  for (auto& m : x)
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return x;
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Scalar, loop-based restatement of the soft HM-LSTM recurrence for one
// sequence, written without Eigen expressions.
std::vector<std::vector<std::vector<double>>> reference_hmlstm(const std::vector<Matrix>& x, const ModelParams& p) {
  const int T = static_cast<int>(x.size()), H = p.config.hidden, Lc = p.config.layers;
  std::vector<std::vector<double>> h(static_cast<std::size_t>(Lc), std::vector<double>(static_cast<std::size_t>(H), 0.0));
  auto c = h;
  std::vector<double> z(static_cast<std::size_t>(Lc), 0.0);
  std::vector<std::vector<std::vector<double>>> out;  // [t][layer][unit]
  for (int t = 0; t < T; ++t) {
    auto h_old = h;  // top-down input reads the previous step
    std::vector<double> z_new = z;
    for (int l = 0; l < Lc; ++l) {
      const auto& cell = p.cells[static_cast<std::size_t>(l)];
      std::vector<double> below;
      double zb = 1.0;
      if (l == 0) {
        for (int k = 0; k < x[static_cast<std::size_t>(t)].cols(); ++k) below.push_back(x[static_cast<std::size_t>(t)](0, k));
      } else {
        below = h[static_cast<std::size_t>(l - 1)];
        zb = z_new[static_cast<std::size_t>(l - 1)];
      }
      const double zp = z[static_cast<std::size_t>(l)];
      std::vector<double> pre(static_cast<std::size_t>(4 * H + 1));
      for (int j = 0; j < 4 * H + 1; ++j) {
        double s = cell.bias(0, j);
        for (std::size_t k = 0; k < below.size(); ++k) s += zb * below[k] * cell.W_below(static_cast<Eigen::Index>(k), j);
        for (int k = 0; k < H; ++k) s += h_old[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)] * cell.W_recurrent(k, j);
        if (l + 1 < Lc)
          for (int k = 0; k < H; ++k) s += zp * h_old[static_cast<std::size_t>(l + 1)][static_cast<std::size_t>(k)] * cell.W_top(k, j);
        pre[static_cast<std::size_t>(j)] = s;
      }
      const double kappa = (1 - zp) * (1 - zb), upd = (1 - zp) * zb;
      for (int k = 0; k < H; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        const double f = sig(pre[ku]), i = sig(pre[ku + H]), o = sig(pre[ku + 2 * H]), g = std::tanh(pre[ku + 3 * H]);
        const double cp = c[static_cast<std::size_t>(l)][ku];
        double cn;
        if (zp == 1.0) cn = i * g;
        else cn = kappa * cp + upd * (f * cp + i * g) + zp * i * g;
        c[static_cast<std::size_t>(l)][ku] = cn;
        h[static_cast<std::size_t>(l)][ku] = kappa * h_old[static_cast<std::size_t>(l)][ku] + (1 - kappa) * o * std::tanh(cn);
      }
      z_new[static_cast<std::size_t>(l)] = sig(pre[static_cast<std::size_t>(4 * H)]);
    }
    z = z_new;
    out.push_back(h);
  }
  return out;
}

}  // namespace

TEST(Params, DefaultCountNearFiftyThousand) {
  auto p = init_params(ModelConfig{}, 1);
  const auto n = p.parameter_count();
  EXPECT_EQ(n, 55269u);
  EXPECT_GE(n, 40000u);
  EXPECT_LE(n, 60000u);
}

TEST(Params, InitializationRules) {
  auto p = init_params(ModelConfig{}, 3);
  EXPECT_TRUE(p.fc1.b.isZero());
  for (const auto& c : p.cells) {
    EXPECT_EQ(c.bias(0, c.bias.cols() - 1), -1.0);
    EXPECT_TRUE(c.bias.leftCols(c.bias.cols() - 1).isZero());
  }
  EXPECT_EQ(p.cells.back().W_top.size(), 0);
  const double limit = std::sqrt(6.0 / (4 + 32));
  EXPECT_LE(p.fc1.W.cwiseAbs().maxCoeff(), limit);
  EXPECT_EQ(init_params(ModelConfig{}, 3).fc2.W, p.fc2.W);
  EXPECT_NE(init_params(ModelConfig{}, 4).fc2.W, p.fc2.W);
}

TEST(Params, InvalidConfigRejected) {
  ModelConfig c;
  c.hidden = 0;
  EXPECT_THROW(init_params(c, 1), PreconditionError);
}

TEST(Fc1, ZeroWeightsGiveZero) {
  auto p = init_params(small_config(), 1);
  p.config.batch_norm = false;
  p.fc1.W.setZero();
  auto s = random_sequence(5, 2);
  EXPECT_TRUE(fc1_transform(s.features, s.pad_mask, p).isZero());
}

TEST(Fc1, PaddedRowsStayZero) {
  auto p = init_params(small_config(), 1);
  p.fc1.b.setConstant(0.7);
  auto s = random_sequence(5, 2, 2);
  for (Mode m : {Mode::train, Mode::eval}) {
    auto f = fc1_transform(s.features, s.pad_mask, p, m);
    EXPECT_TRUE(f.topRows(2).isZero());
  }
}

TEST(Fc1, HandComputedRow) {
  auto cfg = small_config();
  cfg.fc1 = 2;
  cfg.batch_norm = false;
  auto p = init_params(cfg, 1);
  p.fc1.W.resize(4, 2);
  p.fc1.W << 1, -1, 2, 0, 0, 1, -1, 0.5;
  p.fc1.b.resize(1, 2);
  p.fc1.b << 0.1, -0.2;
  Matrix b(1, 4);
  b << 0.5, 1.0, -2.0, 0.25;
  auto f = fc1_transform(b, {true}, p);
  EXPECT_NEAR(f(0, 0), 0.5 + 2.0 - 0.25 + 0.1, 1e-15);
  EXPECT_EQ(f(0, 1), 0.0);  // -0.5 - 2 + 0.125 - 0.2 < 0
}

TEST(Fc1, BatchNormIgnoresPaddedRows) {
  auto p = init_params(small_config(), 1);
  auto a = random_sequence(5, 3, 2);
  auto b = a;
  b.features.topRows(2).setConstant(0.0);
  auto fa = fc1_transform(a.features, a.pad_mask, p, Mode::train);
  auto fb = fc1_transform(b.features, b.pad_mask, p, Mode::train);
  EXPECT_TRUE(fa.isApprox(fb));
}

TEST(HmLstm, SingleStepShapes) {
  auto p = init_params(ModelConfig{}, 1);
  auto tr = hmlstm_forward(random_inputs(1, 1, 32, 1), p);
  auto last = tr.last_hidden();
  ASSERT_EQ(last.size(), 4u);
  for (const auto& h : last) {
    EXPECT_EQ(h.rows(), 1);
    EXPECT_EQ(h.cols(), 32);
  }
  EXPECT_EQ(transition(tr, 0, 0), CellTransition::update);
}

TEST(HmLstm, HardBoundariesAreBinary) {
  auto cfg = ModelConfig{};
  cfg.boundary_bias_init = 0.0;
  auto p = init_params(cfg, 5);
  auto tr = hmlstm_forward(random_inputs(30, 8, 32, 2), p);
  for (int l = 0; l < 4; ++l)
    for (int t = 0; t < 30; ++t)
      for (Eigen::Index b = 0; b < 8; ++b) {
        const double z = tr.boundary(l, t)(b);
        EXPECT_TRUE(z == 0.0 || z == 1.0);
      }
}

TEST(HmLstm, SoftModeMatchesScalarReference) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto cfg = small_config();
    cfg.window = 7;
    auto p = init_params(cfg, seed);
    for (auto& c : p.cells) c.bias.setConstant(0.3 * static_cast<double>(seed) - 1.0);
    auto x = random_inputs(7, 1, 4, seed + 100);
    auto tr = hmlstm_forward(x, p);
    auto ref = reference_hmlstm(x, p);
    for (int t = 0; t < 7; ++t)
      for (int l = 0; l < 4; ++l)
        for (int k = 0; k < 4; ++k)
          EXPECT_NEAR(tr.hidden(l, t)(0, k), ref[static_cast<std::size_t>(t)][static_cast<std::size_t>(l)][static_cast<std::size_t>(k)], 1e-12);
  }
}

TEST(HmLstm, CopyInvariance) {
  auto p = init_params(ModelConfig{}, 7);
  const int t0 = 1;
  BoundaryOverride force = [&](int, int t) -> std::optional<double> {
    if (t >= t0) return 0.0;
    return std::nullopt;
  };
  auto tr = hmlstm_forward(random_inputs(30, 3, 32, 4), p, force);
  for (int l = 1; l < 4; ++l) {
    for (int t = t0 + 1; t < 30; ++t) {
      EXPECT_EQ(transition(tr, l, t), CellTransition::copy);
      EXPECT_EQ(tr.hidden(l, t), tr.hidden(l, t0)) << "layer " << l << " t " << t;
    }
  }
  // The bottom layer always sees a boundary from below, so it keeps updating.
  EXPECT_EQ(transition(tr, 0, 5), CellTransition::update);
}

TEST(HmLstm, FlushResetsCell) {
  auto cfg = small_config(BoundaryMode::hard);
  auto p = init_params(cfg, 2);
  BoundaryOverride force = [](int, int t) -> std::optional<double> { return t == 2 ? 1.0 : 0.0; };
  auto tr = hmlstm_forward(random_inputs(5, 1, 4, 3), p, force);
  EXPECT_EQ(transition(tr, 0, 3), CellTransition::flush);
  const auto& s = tr.steps[0][3];
  EXPECT_TRUE(s.c.isApprox((s.i.array() * s.g.array()).matrix()));
}

TEST(HmLstm, NonFiniteInputDiagnosed) {
  auto p = init_params(small_config(), 1);
  auto x = random_inputs(5, 1, 4, 1);
  x[3](0, 0) = std::numeric_limits<double>::infinity();
  try {
    hmlstm_forward(x, p);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1, step 4"), std::string::npos) << e.what();
  }
}

TEST(Heads, ZeroWeightsGiveBiasChain) {
  auto cfg = ModelConfig{};
  cfg.batch_norm = false;
  auto p = init_params(cfg, 1);
  for (auto& h : p.heads) {
    h.W.setZero();
    h.b.setConstant(0.5);
  }
  for (auto* d : {&p.fc2, &p.fc3, &p.fc4}) d->W.setZero();
  p.fc2.b.setConstant(-1.0);
  p.fc3.b.setConstant(0.25);
  p.fc4.b.setConstant(2.0);
  std::vector<Matrix> h(4, Matrix::Random(2, 32));
  auto tr = heads_and_stack(h, p, Mode::eval);
  EXPECT_TRUE(tr.e4.isApprox(Matrix::Constant(2, 16, 2.0)));
}

TEST(Heads, HandValueWithUnitHead) {
  auto cfg = ModelConfig{};
  cfg.batch_norm = false;
  cfg.head = 1;
  cfg.fc2 = 1;
  cfg.fc3 = 1;
  cfg.fc4 = 1;
  auto p = init_params(cfg, 1);
  std::vector<Matrix> h;
  for (int l = 0; l < 4; ++l) {
    p.heads[static_cast<std::size_t>(l)].W.setOnes();
    h.push_back(Matrix::Constant(1, 32, 0.01 * (l + 1)));
  }
  p.fc2.W.setOnes();
  p.fc3.W.setOnes();
  p.fc4.W.setOnes();
  auto tr = heads_and_stack(h, p, Mode::eval);
  // e1 = [0.32, 0.64, 0.96, 1.28]; each FC sums its inputs.
  EXPECT_NEAR(tr.e4(0, 0), 3.2, 1e-12);
}

TEST(Heads, ConcatenationOrderIsFixed) {
  auto cfg = ModelConfig{};
  cfg.batch_norm = false;
  auto p = init_params(cfg, 8);
  std::vector<Matrix> h;
  for (int l = 0; l < 4; ++l) h.push_back(Matrix::Random(3, 32));
  auto base = heads_and_stack(h, p, Mode::eval);
  // Swap layers 1 and 3 together with their heads and the matching FC2 rows.
  auto q = p;
  std::swap(q.heads[0], q.heads[2]);
  auto h2 = h;
  std::swap(h2[0], h2[2]);
  q.fc2.W.middleRows(0, 16) = p.fc2.W.middleRows(32, 16);
  q.fc2.W.middleRows(32, 16) = p.fc2.W.middleRows(0, 16);
  auto perm = heads_and_stack(h2, q, Mode::eval);
  EXPECT_TRUE(perm.e4.isApprox(base.e4, 1e-12));
}

TEST(Regress, HandValues) {
  auto p = init_params(ModelConfig{}, 1);
  p.out.W.setZero();
  p.out.b(0, 0) = 0.0;
  Matrix e4 = Matrix::Random(1, 16);
  EXPECT_DOUBLE_EQ(regress(e4, p)(0), 5.0);
  p.out.b(0, 0) = std::log(3.0);
  EXPECT_NEAR(regress(e4, p)(0), 7.5, 1e-12);
  p.out.b(0, 0) = 800.0;
  EXPECT_DOUBLE_EQ(regress(e4, p)(0), 10.0);
}

TEST(Forward, EvalIsDeterministic) {
  auto p = init_params(ModelConfig{}, 2);
  auto s = random_sequence(30, 3);
  EXPECT_EQ(forward(s, p, Mode::eval), forward(s, p, Mode::eval));
}

TEST(Forward, AllPaddingIsDefined) {
  auto p = init_params(ModelConfig{}, 2);
  auto s = random_sequence(30, 3, 30);
  for (Mode m : {Mode::train, Mode::eval}) {
    const double y = forward(s, p, m);
    EXPECT_TRUE(std::isfinite(y));
    EXPECT_GT(y, 0.0);
    EXPECT_LT(y, 10.0);
  }
}

TEST(Forward, OutputStrictlyInsideRange) {
  std::mt19937_64 rng(1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = init_params(ModelConfig{}, seed);
    auto s = random_sequence(30, seed + 50, static_cast<int>(seed));
    s.features *= 3.0;
    const double y = forward(s, p, Mode::eval);
    EXPECT_GT(y, 0.0);
    EXPECT_LT(y, 10.0);
  }
}

// Regression value recorded from this implementation (libstdc++ normal_distribution).
TEST(Forward, SelfGoldenValue) {
  auto p = init_params(ModelConfig{}, 42);
  auto s = random_sequence(30, 43, 4);
  EXPECT_NEAR(forward(s, p, Mode::eval), 4.9923901646655784, 1e-12);
}

TEST(Forward, EvalUsesRunningStatistics) {
  auto p = init_params(ModelConfig{}, 2);
  std::vector<BlinkSequence> seqs;
  for (int k = 0; k < 8; ++k) seqs.push_back(random_sequence(30, static_cast<std::uint64_t>(k)));
  auto batch = make_batch(std::span<const BlinkSequence>(seqs));
  auto before = forward(seqs[0], p, Mode::eval);
  auto tr = forward(batch, p, Mode::train);
  update_running_stats(p, tr);
  EXPECT_NE(p.bn1.running_mean, Matrix::Zero(1, 32));
  EXPECT_NE(forward(seqs[0], p, Mode::eval), before);
  // Batch composition matters in train mode only.
  auto single = forward(seqs[0], p, Mode::eval);
  auto in_batch = forward(make_batch(std::span<const BlinkSequence>(seqs)), p, Mode::eval).out(0);
  EXPECT_NEAR(single, in_batch, 1e-12);
}

TEST(StraightThrough, HardModeGradientReachesBoundaryWeights) {
  auto cfg = small_config(BoundaryMode::hard);
  auto p = init_params(cfg, 11);
  std::vector<BlinkSequence> seqs;
  for (int k = 0; k < 4; ++k) {
    seqs.push_back(random_sequence(5, static_cast<std::uint64_t>(k + 1)));
    seqs.back().label = k % 2 ? 9.5 : 0.5;
  }
  auto batch = make_batch(std::span<const BlinkSequence>(seqs));
  auto r = evaluate_batch(p, batch, 0.0, 0.0, Mode::train);
  const int zcol = cfg.gate_width() - 1;
  double mass = 0.0;
  for (const auto& g : r.gradient.cells) mass += g.W_below.col(zcol).cwiseAbs().sum() + g.bias.col(zcol).cwiseAbs().sum();
  EXPECT_GT(mass, 0.0);

  TrainConfig tc;
  tc.learning_rate = 1e-2;
  auto adam = make_adam(p);
  auto before = p.cells[0].W_below.col(zcol).eval();
  adam_step(p, r.gradient, adam, tc);
  EXPECT_NE(p.cells[0].W_below.col(zcol), before);
}

#pragma once

// Regression network over blink sequences:
//
//   features (T x 4) -> FC1 (shared over time) -> stacked HM-LSTM
//   -> one head per layer on the last hidden state -> FC2 -> FC3 -> FC4
//   -> 10 * sigmoid(.)
//
// Everything runs on batches: a batch holds B sequences of the same length,
// each time step is a B x width matrix. Forward passes return a trace that
// the matching backward pass consumes.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blinkwise/blink_features.hpp"
#include "blinkwise/errors.hpp"

namespace blinkwise {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class BoundaryMode { hard, soft };
enum class Mode { train, eval };

inline std::string_view to_string(BoundaryMode m) { return m == BoundaryMode::hard ? "hard" : "soft"; }

inline BoundaryMode parse_boundary_mode(std::string_view s) {
  if (s == "hard") return BoundaryMode::hard;
  if (s == "soft") return BoundaryMode::soft;
  throw PreconditionError("unknown boundary mode '" + std::string(s) + "'");
}

struct ModelConfig {
  int window = 30;     // T, blinks per sequence
  int input_dim = 4;   // features per blink
  int fc1 = 32;        // L
  int hidden = 32;     // H, per HM-LSTM layer
  int layers = 4;
  int head = 16;       // L1, units per layer head
  int fc2 = 64;
  int fc3 = 32;
  int fc4 = 16;        // L4
  bool batch_norm = true;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
  BoundaryMode boundary = BoundaryMode::hard;
  double boundary_bias_init = -1.0;

  void validate() const {
    if (window < 1 || input_dim < 1 || fc1 < 1 || hidden < 1 || layers < 1 || head < 1 || fc2 < 1 || fc3 < 1 ||
        fc4 < 1)
      throw PreconditionError("model widths must all be positive");
    if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw PreconditionError("bn_momentum must be in [0,1)");
    if (!(bn_eps > 0.0)) throw PreconditionError("bn_eps must be positive");
  }

  /// Column count of the fused gate pre-activation: f, i, o, g, then boundary.
  [[nodiscard]] int gate_width() const { return 4 * hidden + 1; }
};

/// T x 4 normalized features with front zero padding.
struct BlinkSequence {
  Matrix features;                // window x 4
  std::vector<bool> pad_mask;     // true = real blink
  std::vector<std::int64_t> blink_ids;  // source blink index per row, -1 for padding
  double label = 0.0;
  std::string video_id;
  std::string subject_id;

  [[nodiscard]] int length() const { return static_cast<int>(features.rows()); }
};

struct Dense {
  Matrix W;  // in x out
  Matrix b;  // 1 x out
};

struct BatchNorm {
  Matrix gamma;  // 1 x n, trainable
  Matrix beta;   // 1 x n, trainable
  Matrix running_mean;
  Matrix running_var;
};

struct HmLstmCell {
  Matrix W_below;      // input width x gate width
  Matrix W_recurrent;  // H x gate width
  Matrix W_top;        // H x gate width; empty on the top layer
  Matrix bias;         // 1 x gate width
};

struct ModelParams {
  ModelConfig config;
  Dense fc1;
  BatchNorm bn1;
  std::vector<HmLstmCell> cells;
  std::vector<Dense> heads;
  Dense fc2, fc3, fc4;
  BatchNorm bn2, bn3, bn4;
  Dense out;

  /// Visits trainable tensors in a fixed order: f(name, matrix, is_weight).
  /// Weights are the matrices that carry L2; biases and BN scale/shift are not.
  template <class Self, class F>
  static void visit(Self& p, F&& f) {
    const bool bn = p.config.batch_norm;
    auto dense = [&](const std::string& n, auto& d) {
      f(n + ".W", d.W, true);
      f(n + ".b", d.b, false);
    };
    auto norm = [&](const std::string& n, auto& b) {
      if (!bn) return;
      f(n + ".gamma", b.gamma, false);
      f(n + ".beta", b.beta, false);
    };
    dense("fc1", p.fc1);
    norm("bn1", p.bn1);
    for (std::size_t l = 0; l < p.cells.size(); ++l) {
      const std::string n = "cell" + std::to_string(l + 1);
      f(n + ".W_below", p.cells[l].W_below, true);
      f(n + ".W_recurrent", p.cells[l].W_recurrent, true);
      if (p.cells[l].W_top.size() > 0) f(n + ".W_top", p.cells[l].W_top, true);
      f(n + ".bias", p.cells[l].bias, false);
    }
    for (std::size_t l = 0; l < p.heads.size(); ++l) dense("head" + std::to_string(l + 1), p.heads[l]);
    dense("fc2", p.fc2);
    norm("bn2", p.bn2);
    dense("fc3", p.fc3);
    norm("bn3", p.bn3);
    dense("fc4", p.fc4);
    norm("bn4", p.bn4);
    dense("out", p.out);
  }

  template <class F>
  void for_each_trainable(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <class F>
  void for_each_trainable(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_trainable([&](const std::string&, const Matrix& m, bool) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }
};

namespace detail {

inline Matrix glorot(int rows, int cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix m(rows, cols);
  // Row-major fill so the draw order matches the on-disk order.
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = u(rng);
  return m;
}

inline Dense make_dense(int in, int out, std::mt19937_64& rng) { return {glorot(in, out, rng), Matrix::Zero(1, out)}; }

inline BatchNorm make_bn(int n) {
  return {Matrix::Ones(1, n), Matrix::Zero(1, n), Matrix::Zero(1, n), Matrix::Ones(1, n)};
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.config = cfg;
  const int gw = cfg.gate_width();
  p.fc1 = detail::make_dense(cfg.input_dim, cfg.fc1, rng);
  p.bn1 = detail::make_bn(cfg.fc1);
  for (int l = 0; l < cfg.layers; ++l) {
    HmLstmCell c;
    c.W_below = detail::glorot(l == 0 ? cfg.fc1 : cfg.hidden, gw, rng);
    c.W_recurrent = detail::glorot(cfg.hidden, gw, rng);
    if (l + 1 < cfg.layers) c.W_top = detail::glorot(cfg.hidden, gw, rng);
    c.bias = Matrix::Zero(1, gw);
    c.bias(0, gw - 1) = cfg.boundary_bias_init;
    p.cells.push_back(std::move(c));
  }
  for (int l = 0; l < cfg.layers; ++l) p.heads.push_back(detail::make_dense(cfg.hidden, cfg.head, rng));
  p.fc2 = detail::make_dense(cfg.head * cfg.layers, cfg.fc2, rng);
  p.bn2 = detail::make_bn(cfg.fc2);
  p.fc3 = detail::make_dense(cfg.fc2, cfg.fc3, rng);
  p.bn3 = detail::make_bn(cfg.fc3);
  p.fc4 = detail::make_dense(cfg.fc3, cfg.fc4, rng);
  p.bn4 = detail::make_bn(cfg.fc4);
  p.out = detail::make_dense(cfg.fc4, 1, rng);
  return p;
}

/// Same shapes as `p`, every trainable entry zero. Used for gradients and
/// optimizer moments.
inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  z.for_each_trainable([](const std::string&, Matrix& m, bool) { m.setZero(); });
  return z;
}

inline bool all_finite(const ModelParams& p) {
  bool ok = true;
  p.for_each_trainable([&](const std::string&, const Matrix& m, bool) { ok = ok && m.allFinite(); });
  return ok;
}

// ---------------------------------------------------------------------------
// Batches

struct SequenceBatch {
  int window = 0;
  int size = 0;
  std::vector<Matrix> x;     // per time step, size x input_dim
  std::vector<Vector> mask;  // per time step, 1 = real blink
  Vector targets;
};

inline SequenceBatch make_batch(std::span<const BlinkSequence* const> seqs) {
  if (seqs.empty()) throw PreconditionError("make_batch: empty batch");
  SequenceBatch b;
  b.window = seqs.front()->length();
  b.size = static_cast<int>(seqs.size());
  const auto dim = seqs.front()->features.cols();
  b.x.assign(static_cast<std::size_t>(b.window), Matrix::Zero(b.size, dim));
  b.mask.assign(static_cast<std::size_t>(b.window), Vector::Zero(b.size));
  b.targets.resize(b.size);
  for (int i = 0; i < b.size; ++i) {
    const auto& s = *seqs[static_cast<std::size_t>(i)];
    if (s.length() != b.window || s.features.cols() != dim)
      throw PreconditionError("make_batch: sequences differ in shape");
    for (int t = 0; t < b.window; ++t) {
      b.x[static_cast<std::size_t>(t)].row(i) = s.features.row(t);
      b.mask[static_cast<std::size_t>(t)](i) = s.pad_mask[static_cast<std::size_t>(t)] ? 1.0 : 0.0;
    }
    b.targets(i) = s.label;
  }
  return b;
}

inline SequenceBatch make_batch(std::span<const BlinkSequence> seqs) {
  std::vector<const BlinkSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return make_batch(std::span<const BlinkSequence* const>(ptrs));
}

// ---------------------------------------------------------------------------
// Dense + batch norm + ReLU block

struct DenseCache {
  Matrix input;   // rows x in
  Matrix pre;     // input * W + b
  Matrix xhat;    // normalized pre (batch norm only)
  Matrix act_in;  // value fed to ReLU
  Matrix out;     // ReLU output, masked
  Vector row_mask;
  Matrix batch_mean, batch_var, inv_std;  // 1 x n
  double count = 0.0;                     // unmasked rows in the batch statistics
  bool used_batch_stats = false;
};

namespace detail {

/// y = mask * ReLU(BN(x W + b)). `bn` may be null.
inline DenseCache dense_forward(const Matrix& input, const Dense& d, const BatchNorm* bn, Mode mode, double eps,
                                const Vector* mask) {
  DenseCache c;
  c.input = input;
  c.pre = input * d.W;
  c.pre.rowwise() += d.b.row(0);
  const auto rows = c.pre.rows();
  c.row_mask = mask ? *mask : Vector::Ones(rows);
  if (bn) {
    if (mode == Mode::train) {
      c.used_batch_stats = true;
      c.count = c.row_mask.sum();
      if (c.count > 0.0) {
        c.batch_mean = (c.row_mask.transpose() * c.pre) / c.count;
        Matrix centered = c.pre.rowwise() - c.batch_mean.row(0);
        c.batch_var = (c.row_mask.transpose() * centered.array().square().matrix()) / c.count;
      } else {
        c.batch_mean = Matrix::Zero(1, c.pre.cols());
        c.batch_var = Matrix::Ones(1, c.pre.cols());
      }
      c.inv_std = (c.batch_var.array() + eps).rsqrt().matrix();
      c.xhat = (c.pre.rowwise() - c.batch_mean.row(0)).array().rowwise() * c.inv_std.row(0).array();
    } else {
      c.inv_std = (bn->running_var.array() + eps).rsqrt().matrix();
      c.xhat = (c.pre.rowwise() - bn->running_mean.row(0)).array().rowwise() * c.inv_std.row(0).array();
    }
    c.act_in = (c.xhat.array().rowwise() * bn->gamma.row(0).array()).matrix();
    c.act_in.rowwise() += bn->beta.row(0);
  } else {
    c.act_in = c.pre;
  }
  c.out = c.act_in.cwiseMax(0.0);
  if (mask) c.out = (c.out.array().colwise() * c.row_mask.array()).matrix();
  return c;
}

/// Returns d(input); accumulates into the gradient block.
inline Matrix dense_backward(const DenseCache& c, const Matrix& d_out, const Dense& d, const BatchNorm* bn,
                             Dense& g, BatchNorm* g_bn) {
  Matrix d_act = (d_out.array() * (c.act_in.array() > 0.0).cast<double>()).matrix();
  d_act = (d_act.array().colwise() * c.row_mask.array()).matrix();
  Matrix d_pre;
  if (bn) {
    g_bn->beta += d_act.colwise().sum();
    g_bn->gamma += (d_act.array() * c.xhat.array()).matrix().colwise().sum();
    Matrix d_xhat = (d_act.array().rowwise() * bn->gamma.row(0).array()).matrix();
    if (c.used_batch_stats) {
      if (c.count > 0.0) {
        const Matrix sum_d = d_xhat.colwise().sum();
        const Matrix sum_dx = (d_xhat.array() * c.xhat.array()).matrix().colwise().sum();
        d_pre = ((c.count * d_xhat.array()).rowwise() - sum_d.row(0).array() -
                 c.xhat.array().rowwise() * sum_dx.row(0).array())
                    .rowwise() *
                (c.inv_std.row(0).array() / c.count);
        d_pre = (d_pre.array().colwise() * c.row_mask.array()).matrix();
      } else {
        d_pre = Matrix::Zero(d_act.rows(), d_act.cols());
      }
    } else {
      d_pre = (d_xhat.array().rowwise() * c.inv_std.row(0).array()).matrix();
    }
  } else {
    d_pre = d_act;
  }
  g.W.noalias() += c.input.transpose() * d_pre;
  g.b += d_pre.colwise().sum();
  return d_pre * d.W.transpose();
}

inline void check_finite(const Matrix& m, const std::string& where) {
  if (!m.allFinite()) throw DivergenceError("non-finite activation in " + where);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// FC1: shared feature transform over all time steps

struct Fc1Trace {
  DenseCache cache;  // rows are time-major: row t*B + b
  int window = 0;
  int size = 0;
  /// Output for time step t, B x L.
  [[nodiscard]] Matrix step(int t) const { return cache.out.middleRows(static_cast<Eigen::Index>(t) * size, size); }
};

inline Fc1Trace fc1_forward(const SequenceBatch& batch, const ModelParams& p, Mode mode) {
  const auto& cfg = p.config;
  if (batch.window < 1) throw PreconditionError("fc1: empty sequence");
  const Eigen::Index rows = static_cast<Eigen::Index>(batch.window) * batch.size;
  Matrix stacked(rows, cfg.input_dim);
  Vector mask(rows);
  for (int t = 0; t < batch.window; ++t) {
    const auto& xt = batch.x[static_cast<std::size_t>(t)];
    if (xt.cols() != cfg.input_dim) throw PreconditionError("fc1: input width does not match the model");
    stacked.middleRows(static_cast<Eigen::Index>(t) * batch.size, batch.size) = xt;
    mask.segment(static_cast<Eigen::Index>(t) * batch.size, batch.size) = batch.mask[static_cast<std::size_t>(t)];
  }
  Fc1Trace tr;
  tr.window = batch.window;
  tr.size = batch.size;
  tr.cache = detail::dense_forward(stacked, p.fc1, cfg.batch_norm ? &p.bn1 : nullptr, mode, cfg.bn_eps, &mask);
  detail::check_finite(tr.cache.out, "fc1");
  return tr;
}

/// Single-sequence convenience form: F = mask * ReLU(B W + b), T x L.
inline Matrix fc1_transform(const Matrix& features, const std::vector<bool>& pad_mask, const ModelParams& p,
                            Mode mode = Mode::eval) {
  if (features.cols() != p.config.input_dim) throw PreconditionError("fc1_transform: shape mismatch");
  if (pad_mask.size() != static_cast<std::size_t>(features.rows()))
    throw PreconditionError("fc1_transform: mask length mismatch");
  BlinkSequence s;
  s.features = features;
  s.pad_mask = pad_mask;
  const BlinkSequence* ptr = &s;
  auto batch = make_batch(std::span<const BlinkSequence* const>(&ptr, 1));
  return fc1_forward(batch, p, mode).cache.out;
}

// ---------------------------------------------------------------------------
// HM-LSTM
//
// Per layer l and step t, with z_below the boundary of layer l-1 at t (1 for
// the bottom layer) and z_prev the layer's own boundary at t-1:
//   UPDATE  z_prev = 0, z_below = 1:  c = f*c' + i*g,  h = o*tanh(c)
//   COPY    z_prev = 0, z_below = 0:  c = c',          h = h'
//   FLUSH   z_prev = 1:               c = i*g,         h = o*tanh(c)
// written as one blend so soft boundaries stay differentiable:
//   kappa = (1-z_prev)(1-z_below), upd = (1-z_prev) z_below
//   c = kappa c' + upd (f c' + i g) + z_prev (i g)
//   h = kappa h' + (1-kappa) o tanh(c)
// Gate pre-activations: z_below*h_below W_below + h' W_recurrent
// + z_prev*h_top' W_top + bias. The boundary is sigmoid(s_z) in soft mode and
// step(s_z > 0) in hard mode; hard mode backpropagates through the sigmoid.

/// Forces a boundary value for (layer, t), 0-based, for every sequence in the
/// batch. Forced values are constants for the backward pass.
using BoundaryOverride = std::function<std::optional<double>(int layer, int t)>;

struct CellStep {
  Matrix below, u_below, h_prev, c_prev, top, u_top;
  Vector z_below, z_prev;
  Matrix f, i, o, g, c, tanh_c, h;
  Vector z_soft, z, kappa, upd;
  bool forced = false;
};

struct HmLstmTrace {
  int layers = 0;
  int window = 0;
  std::vector<std::vector<CellStep>> steps;  // [layer][t]

  [[nodiscard]] const Matrix& hidden(int layer, int t) const {
    return steps[static_cast<std::size_t>(layer)][static_cast<std::size_t>(t)].h;
  }
  [[nodiscard]] const Vector& boundary(int layer, int t) const {
    return steps[static_cast<std::size_t>(layer)][static_cast<std::size_t>(t)].z;
  }
  /// h of each layer at the last step.
  [[nodiscard]] std::vector<Matrix> last_hidden() const {
    std::vector<Matrix> out;
    for (int l = 0; l < layers; ++l) out.push_back(hidden(l, window - 1));
    return out;
  }
};

enum class CellTransition { update, copy, flush };

/// Transition taken by a sequence at (layer, t), from the hard boundary values.
inline CellTransition transition(const HmLstmTrace& tr, int layer, int t, int row = 0) {
  const auto& s = tr.steps[static_cast<std::size_t>(layer)][static_cast<std::size_t>(t)];
  if (s.z_prev(row) >= 0.5) return CellTransition::flush;
  return s.z_below(row) >= 0.5 ? CellTransition::update : CellTransition::copy;
}

inline HmLstmTrace hmlstm_forward(const std::vector<Matrix>& inputs, const ModelParams& p,
                                  const BoundaryOverride& override_fn = {}) {
  const auto& cfg = p.config;
  const int T = static_cast<int>(inputs.size());
  if (T < 1) throw PreconditionError("hmlstm: need at least one time step");
  const auto B = inputs.front().rows();
  const int H = cfg.hidden;
  const int Lc = cfg.layers;
  HmLstmTrace tr;
  tr.layers = Lc;
  tr.window = T;
  tr.steps.assign(static_cast<std::size_t>(Lc), std::vector<CellStep>(static_cast<std::size_t>(T)));

  const Matrix zeros_h = Matrix::Zero(B, H);
  const Vector zeros_b = Vector::Zero(B);
  const Vector ones_b = Vector::Ones(B);

  for (int t = 0; t < T; ++t) {
    for (int l = 0; l < Lc; ++l) {
      const auto& cell = p.cells[static_cast<std::size_t>(l)];
      auto& s = tr.steps[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)];
      const CellStep* prev = t > 0 ? &tr.steps[static_cast<std::size_t>(l)][static_cast<std::size_t>(t - 1)] : nullptr;

      s.below = l == 0 ? inputs[static_cast<std::size_t>(t)]
                       : tr.steps[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(t)].h;
      s.z_below = l == 0 ? ones_b : tr.steps[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(t)].z;
      s.h_prev = prev ? prev->h : zeros_h;
      s.c_prev = prev ? prev->c : zeros_h;
      s.z_prev = prev ? prev->z : zeros_b;
      const bool has_top = l + 1 < Lc;

      s.u_below = (s.below.array().colwise() * s.z_below.array()).matrix();
      Matrix pre = s.u_below * cell.W_below;
      pre.noalias() += s.h_prev * cell.W_recurrent;
      if (has_top) {
        s.top = t > 0 ? tr.steps[static_cast<std::size_t>(l + 1)][static_cast<std::size_t>(t - 1)].h : zeros_h;
        s.u_top = (s.top.array().colwise() * s.z_prev.array()).matrix();
        pre.noalias() += s.u_top * cell.W_top;
      }
      pre.rowwise() += cell.bias.row(0);
      // Saturating gates would hide an infinite input, so check before them.
      if (!pre.allFinite())
        throw DivergenceError("non-finite HM-LSTM pre-activation at layer " + std::to_string(l + 1) + ", step " +
                              std::to_string(t + 1));

      s.f = (1.0 / (1.0 + (-pre.leftCols(H).array()).exp())).matrix();
      s.i = (1.0 / (1.0 + (-pre.middleCols(H, H).array()).exp())).matrix();
      s.o = (1.0 / (1.0 + (-pre.middleCols(2 * H, H).array()).exp())).matrix();
      s.g = pre.middleCols(3 * H, H).array().tanh().matrix();
      s.z_soft = (1.0 / (1.0 + (-pre.col(4 * H).array()).exp())).matrix();
      if (cfg.boundary == BoundaryMode::soft)
        s.z = s.z_soft;
      else
        s.z = (pre.col(4 * H).array() > 0.0).cast<double>().matrix();
      if (override_fn) {
        if (auto forced = override_fn(l, t)) {
          s.z = Vector::Constant(B, *forced);
          s.forced = true;
        }
      }

      s.kappa = ((1.0 - s.z_prev.array()) * (1.0 - s.z_below.array())).matrix();
      s.upd = ((1.0 - s.z_prev.array()) * s.z_below.array()).matrix();
      const Eigen::ArrayXXd ig = s.i.array() * s.g.array();
      s.c = ((s.c_prev.array().colwise() * s.kappa.array()) +
             ((s.f.array() * s.c_prev.array() + ig).colwise() * s.upd.array()) +
             (ig.colwise() * s.z_prev.array()))
                .matrix();
      s.tanh_c = s.c.array().tanh().matrix();
      s.h = ((s.h_prev.array().colwise() * s.kappa.array()) +
             ((s.o.array() * s.tanh_c.array()).colwise() * (1.0 - s.kappa.array())))
                .matrix();
      if (!s.h.allFinite() || !s.c.allFinite())
        throw DivergenceError("non-finite HM-LSTM state at layer " + std::to_string(l + 1) + ", step " +
                              std::to_string(t + 1));
    }
  }
  return tr;
}

/// Gradient of the HM-LSTM w.r.t. its parameters (accumulated into `g`) and
/// its inputs (returned, one B x L matrix per step). `d_last` holds the
/// gradient w.r.t. each layer's final hidden state.
inline std::vector<Matrix> hmlstm_backward(const HmLstmTrace& tr, const std::vector<Matrix>& d_last,
                                           const ModelParams& p, ModelParams& g) {
  const int T = tr.window;
  const int Lc = tr.layers;
  const int H = p.config.hidden;
  const auto B = tr.steps[0][0].h.rows();

  std::vector<Matrix> gh(static_cast<std::size_t>(Lc), Matrix::Zero(B, H));
  std::vector<Matrix> gc = gh;
  std::vector<Vector> gz(static_cast<std::size_t>(Lc), Vector::Zero(B));
  for (int l = 0; l < Lc; ++l) gh[static_cast<std::size_t>(l)] = d_last[static_cast<std::size_t>(l)];

  std::vector<Matrix> d_inputs(static_cast<std::size_t>(T));
  Matrix d_pre(B, p.config.gate_width());

  for (int t = T - 1; t >= 0; --t) {
    std::vector<Matrix> nh(static_cast<std::size_t>(Lc), Matrix::Zero(B, H));
    std::vector<Matrix> nc = nh;
    std::vector<Vector> nz(static_cast<std::size_t>(Lc), Vector::Zero(B));

    for (int l = Lc - 1; l >= 0; --l) {
      const auto lu = static_cast<std::size_t>(l);
      const auto& s = tr.steps[lu][static_cast<std::size_t>(t)];
      const auto& cell = p.cells[lu];
      auto& gcell = g.cells[lu];
      const bool has_top = l + 1 < Lc;

      const Eigen::ArrayXXd dh = gh[lu].array();
      const Eigen::ArrayXd kap = s.kappa.array();
      const Eigen::ArrayXXd oh = s.o.array() * s.tanh_c.array();

      Eigen::ArrayXXd dc = gc[lu].array() + (dh.colwise() * (1.0 - kap)) * s.o.array() * (1.0 - s.tanh_c.array().square());
      const Eigen::ArrayXXd d_o = (dh.colwise() * (1.0 - kap)) * s.tanh_c.array();
      const Eigen::ArrayXd d_kappa = (dh * (s.h_prev.array() - oh)).rowwise().sum() +
                                     (dc * s.c_prev.array()).rowwise().sum();
      const Eigen::ArrayXXd ig = s.i.array() * s.g.array();
      const Eigen::ArrayXd d_upd = (dc * (s.f.array() * s.c_prev.array() + ig)).rowwise().sum();
      const Eigen::ArrayXd d_zprev_direct = (dc * ig).rowwise().sum();

      Eigen::ArrayXXd d_hprev = dh.colwise() * kap;
      const Eigen::ArrayXXd d_cprev = dc.colwise() * kap + (dc.colwise() * s.upd.array()) * s.f.array();
      const Eigen::ArrayXXd gate_scale = dc.colwise() * (s.upd.array() + s.z_prev.array());
      const Eigen::ArrayXXd df = (dc.colwise() * s.upd.array()) * s.c_prev.array();
      const Eigen::ArrayXXd di = gate_scale * s.g.array();
      const Eigen::ArrayXXd dg = gate_scale * s.i.array();

      Eigen::ArrayXd d_zprev = d_zprev_direct - d_kappa * (1.0 - s.z_below.array()) - d_upd * s.z_below.array();
      Eigen::ArrayXd d_zbelow = -d_kappa * (1.0 - s.z_prev.array()) + d_upd * (1.0 - s.z_prev.array());

      d_pre.leftCols(H) = (df * s.f.array() * (1.0 - s.f.array())).matrix();
      d_pre.middleCols(H, H) = (di * s.i.array() * (1.0 - s.i.array())).matrix();
      d_pre.middleCols(2 * H, H) = (d_o * s.o.array() * (1.0 - s.o.array())).matrix();
      d_pre.middleCols(3 * H, H) = (dg * (1.0 - s.g.array().square())).matrix();
      if (s.forced)
        d_pre.col(4 * H).setZero();
      else
        d_pre.col(4 * H) = (gz[lu].array() * s.z_soft.array() * (1.0 - s.z_soft.array())).matrix();

      gcell.W_below.noalias() += s.u_below.transpose() * d_pre;
      gcell.W_recurrent.noalias() += s.h_prev.transpose() * d_pre;
      gcell.bias += d_pre.colwise().sum();

      const Matrix du_below = d_pre * cell.W_below.transpose();
      d_hprev += (d_pre * cell.W_recurrent.transpose()).array();
      const Eigen::ArrayXXd d_below = du_below.array().colwise() * s.z_below.array();
      d_zbelow += (du_below.array() * s.below.array()).rowwise().sum();

      if (has_top) {
        gcell.W_top.noalias() += s.u_top.transpose() * d_pre;
        const Matrix du_top = d_pre * cell.W_top.transpose();
        d_zprev += (du_top.array() * s.top.array()).rowwise().sum();
        if (t > 0) nh[lu + 1] += (du_top.array().colwise() * s.z_prev.array()).matrix();
      }

      if (t > 0) {
        nh[lu] += d_hprev.matrix();
        nc[lu] += d_cprev.matrix();
        nz[lu] += d_zprev.matrix();
      }
      if (l > 0) {
        gh[lu - 1] += d_below.matrix();
        gz[lu - 1] += d_zbelow.matrix();
      } else {
        d_inputs[static_cast<std::size_t>(t)] = d_below.matrix();
      }
    }
    gh = std::move(nh);
    gc = std::move(nc);
    gz = std::move(nz);
  }
  return d_inputs;
}

// ---------------------------------------------------------------------------
// Heads, FC stack, regression unit

struct HeadTrace {
  std::vector<DenseCache> heads;
  DenseCache fc2, fc3, fc4;
  Matrix e4;
};

inline HeadTrace heads_and_stack(const std::vector<Matrix>& last_hidden, const ModelParams& p, Mode mode) {
  const auto& cfg = p.config;
  if (static_cast<int>(last_hidden.size()) != cfg.layers) throw PreconditionError("heads: expected one h per layer");
  HeadTrace tr;
  const auto B = last_hidden.front().rows();
  Matrix e1(B, static_cast<Eigen::Index>(cfg.head) * cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& h = last_hidden[static_cast<std::size_t>(l)];
    if (h.cols() != cfg.hidden || h.rows() != B) throw PreconditionError("heads: hidden state shape mismatch");
    tr.heads.push_back(detail::dense_forward(h, p.heads[static_cast<std::size_t>(l)], nullptr, mode, cfg.bn_eps, nullptr));
    e1.middleCols(static_cast<Eigen::Index>(l) * cfg.head, cfg.head) = tr.heads.back().out;
  }
  const bool bn = cfg.batch_norm;
  tr.fc2 = detail::dense_forward(e1, p.fc2, bn ? &p.bn2 : nullptr, mode, cfg.bn_eps, nullptr);
  tr.fc3 = detail::dense_forward(tr.fc2.out, p.fc3, bn ? &p.bn3 : nullptr, mode, cfg.bn_eps, nullptr);
  tr.fc4 = detail::dense_forward(tr.fc3.out, p.fc4, bn ? &p.bn4 : nullptr, mode, cfg.bn_eps, nullptr);
  tr.e4 = tr.fc4.out;
  detail::check_finite(tr.e4, "fully connected stack");
  return tr;
}

/// 10 * sigmoid(e4 W_o + b_o), one value per row.
inline Vector regress(const Matrix& e4, const ModelParams& p) {
  Vector y = e4 * p.out.W.col(0);
  y.array() += p.out.b(0, 0);
  return (10.0 / (1.0 + (-y.array()).exp())).matrix();
}

// ---------------------------------------------------------------------------
// Whole network

struct ForwardOptions {
  BoundaryOverride boundary_override;
};

struct ForwardTrace {
  Mode mode = Mode::eval;
  Fc1Trace fc1;
  HmLstmTrace hmlstm;
  HeadTrace head;
  Vector out;
};

inline ForwardTrace forward(const SequenceBatch& batch, const ModelParams& p, Mode mode,
                            const ForwardOptions& opts = {}) {
  ForwardTrace tr;
  tr.mode = mode;
  tr.fc1 = fc1_forward(batch, p, mode);
  std::vector<Matrix> steps;
  steps.reserve(static_cast<std::size_t>(batch.window));
  for (int t = 0; t < batch.window; ++t) steps.push_back(tr.fc1.step(t));
  tr.hmlstm = hmlstm_forward(steps, p, opts.boundary_override);
  tr.head = heads_and_stack(tr.hmlstm.last_hidden(), p, mode);
  tr.out = regress(tr.head.e4, p);
  if (!tr.out.allFinite()) throw DivergenceError("non-finite network output");
  return tr;
}

/// Score of a single sequence.
inline double forward(const BlinkSequence& seq, const ModelParams& p, Mode mode) {
  const BlinkSequence* ptr = &seq;
  auto batch = make_batch(std::span<const BlinkSequence* const>(&ptr, 1));
  return forward(batch, p, mode).out(0);
}

/// Gradient of a scalar objective given d(objective)/d(out) per sequence.
inline ModelParams backward(const ForwardTrace& tr, const Vector& d_out, const ModelParams& p) {
  ModelParams g = zeros_like(p);
  const auto& cfg = p.config;
  const bool bn = cfg.batch_norm;

  // out = 10 sigmoid(y)  =>  dout/dy = out (1 - out/10)
  const Vector d_y = (d_out.array() * tr.out.array() * (1.0 - tr.out.array() / 10.0)).matrix();
  g.out.W.noalias() += tr.head.e4.transpose() * d_y;
  g.out.b(0, 0) += d_y.sum();
  Matrix d_e4 = d_y * p.out.W.transpose();

  Matrix d_e3 = detail::dense_backward(tr.head.fc4, d_e4, p.fc4, bn ? &p.bn4 : nullptr, g.fc4, bn ? &g.bn4 : nullptr);
  Matrix d_e2 = detail::dense_backward(tr.head.fc3, d_e3, p.fc3, bn ? &p.bn3 : nullptr, g.fc3, bn ? &g.bn3 : nullptr);
  Matrix d_e1 = detail::dense_backward(tr.head.fc2, d_e2, p.fc2, bn ? &p.bn2 : nullptr, g.fc2, bn ? &g.bn2 : nullptr);

  std::vector<Matrix> d_last;
  for (int l = 0; l < cfg.layers; ++l) {
    const Matrix d_head = d_e1.middleCols(static_cast<Eigen::Index>(l) * cfg.head, cfg.head);
    d_last.push_back(detail::dense_backward(tr.head.heads[static_cast<std::size_t>(l)], d_head,
                                            p.heads[static_cast<std::size_t>(l)], nullptr,
                                            g.heads[static_cast<std::size_t>(l)], nullptr));
  }

  auto d_steps = hmlstm_backward(tr.hmlstm, d_last, p, g);
  Matrix d_fc1(tr.fc1.cache.out.rows(), tr.fc1.cache.out.cols());
  for (int t = 0; t < tr.fc1.window; ++t)
    d_fc1.middleRows(static_cast<Eigen::Index>(t) * tr.fc1.size, tr.fc1.size) = d_steps[static_cast<std::size_t>(t)];
  detail::dense_backward(tr.fc1.cache, d_fc1, p.fc1, bn ? &p.bn1 : nullptr, g.fc1, bn ? &g.bn1 : nullptr);
  return g;
}

/// Folds the batch statistics of a train-mode pass into the running averages.
inline void update_running_stats(ModelParams& p, const ForwardTrace& tr) {
  if (!p.config.batch_norm || tr.mode != Mode::train) return;
  const double m = p.config.bn_momentum;
  auto fold = [m](BatchNorm& bn, const DenseCache& c) {
    if (!c.used_batch_stats || c.count <= 0.0) return;
    bn.running_mean = m * bn.running_mean + (1.0 - m) * c.batch_mean;
    bn.running_var = m * bn.running_var + (1.0 - m) * c.batch_var;
  };
  fold(p.bn1, tr.fc1.cache);
  fold(p.bn2, tr.head.fc2);
  fold(p.bn3, tr.head.fc3);
  fold(p.bn4, tr.head.fc4);
}

/// Eval-mode scores for many sequences, batched.
inline std::vector<double> predict(std::span<const BlinkSequence> seqs, const ModelParams& p,
                                   std::size_t batch_size = 256) {
  std::vector<double> out;
  out.reserve(seqs.size());
  for (std::size_t b = 0; b < seqs.size(); b += batch_size) {
    auto chunk = seqs.subspan(b, std::min(batch_size, seqs.size() - b));
    auto tr = forward(make_batch(chunk), p, Mode::eval);
    for (Eigen::Index i = 0; i < tr.out.size(); ++i) out.push_back(tr.out(i));
  }
  return out;
}

}  // namespace blinkwise

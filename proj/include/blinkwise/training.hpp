#pragma once

// Sliding-window dataset assembly, the dead-zone squared loss, Adam, and a
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "blinkwise/blink_features.hpp"
#include "blinkwise/errors.hpp"
#include "blinkwise/sequence_model.hpp"

namespace blinkwise {

struct TrainConfig {
  double learning_rate = 0.000053;
  double delta = 1.253;
  int batch_size = 64;
  int epochs = 80;
  double l2_lambda = 0.1;
  int window = 30;
  int stride = 2;
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate >= 0.0) || !(delta >= 0.0) || !(l2_lambda >= 0.0))
      throw PreconditionError("learning rate, delta and lambda must be non-negative");
    if (batch_size < 1 || epochs < 0 || window < 1 || stride < 1)
      throw PreconditionError("batch size, window and stride must be positive");
    if (stride > window) throw PreconditionError("stride must not exceed the window");
  }
};

/// Windows [0,T), [s,T+s), ... fully inside the blink list; a video with
/// fewer than T blinks yields one front-zero-padded sequence.
inline std::vector<BlinkSequence> make_sequences(std::span<const BlinkFeatureVector> features, double label, int window,
                                                 int stride, const std::string& video_id = {},
                                                 const std::string& subject_id = {}) {
  if (features.empty()) throw PreconditionError("make_sequences: video '" + video_id + "' has no blinks");
  if (window < 1 || stride < 1) throw PreconditionError("make_sequences: window and stride must be positive");
  const auto n = static_cast<int>(features.size());
  auto make = [&](int first, int count, int pad) {
    BlinkSequence s;
    s.features = Matrix::Zero(window, static_cast<Eigen::Index>(kFeatureCount));
    s.pad_mask.assign(static_cast<std::size_t>(window), false);
    s.blink_ids.assign(static_cast<std::size_t>(window), -1);
    for (int r = 0; r < count; ++r) {
      const auto& f = features[static_cast<std::size_t>(first + r)];
      for (std::size_t k = 0; k < kFeatureCount; ++k) s.features(pad + r, static_cast<Eigen::Index>(k)) = f.values[k];
      s.pad_mask[static_cast<std::size_t>(pad + r)] = true;
      s.blink_ids[static_cast<std::size_t>(pad + r)] = f.blink_idx;
    }
    s.label = label;
    s.video_id = video_id;
    s.subject_id = subject_id;
    return s;
  };
  std::vector<BlinkSequence> out;
  if (n < window) {
    out.push_back(make(0, n, window - n));
    return out;
  }
  for (int start = 0; start + window <= n; start += stride) out.push_back(make(start, window, 0));
  return out;
}

/// Mean over i of max(0, (out_i - t_i)^2 - delta).
inline double dead_zone_loss(std::span<const double> outs, std::span<const double> targets, double delta) {
  if (outs.size() != targets.size() || outs.empty()) throw PreconditionError("loss: need matching non-empty inputs");
  double sum = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const double d = outs[i] - targets[i];
    sum += std::max(0.0, d * d - delta);
  }
  return sum / static_cast<double>(outs.size());
}

inline Vector dead_zone_gradient(const Vector& outs, const Vector& targets, double delta) {
  const auto n = static_cast<double>(outs.size());
  Vector g(outs.size());
  for (Eigen::Index i = 0; i < outs.size(); ++i) {
    const double d = outs(i) - targets(i);
    g(i) = d * d > delta ? 2.0 * d / n : 0.0;
  }
  return g;
}

/// lambda * sum of squared weight entries (biases and BN parameters excluded).
inline double l2_penalty(const ModelParams& p, double lambda) {
  double s = 0.0;
  p.for_each_trainable([&](const std::string&, const Matrix& m, bool is_weight) {
    if (is_weight) s += m.squaredNorm();
  });
  return lambda * s;
}

inline void add_l2_gradient(const ModelParams& p, ModelParams& g, double lambda) {
  if (lambda == 0.0) return;
  std::vector<const Matrix*> weights;
  p.for_each_trainable([&](const std::string&, const Matrix& m, bool) { weights.push_back(&m); });
  std::size_t k = 0;
  g.for_each_trainable([&](const std::string&, Matrix& m, bool is_weight) {
    if (is_weight) m += 2.0 * lambda * *weights[k];
    ++k;
  });
}

struct BatchObjective {
  double data_loss = 0.0;
  double objective = 0.0;
  ModelParams gradient;
  ForwardTrace trace;
};

/// Data loss plus L2 on one batch, with its gradient.
inline BatchObjective evaluate_batch(const ModelParams& p, const SequenceBatch& batch, double delta, double lambda,
                                     Mode mode = Mode::train) {
  BatchObjective r;
  r.trace = forward(batch, p, mode);
  std::vector<double> outs(r.trace.out.data(), r.trace.out.data() + r.trace.out.size());
  std::vector<double> targets(batch.targets.data(), batch.targets.data() + batch.targets.size());
  r.data_loss = dead_zone_loss(outs, targets, delta);
  r.objective = r.data_loss + l2_penalty(p, lambda);
  if (!std::isfinite(r.objective)) throw DivergenceError("loss became non-finite");
  r.gradient = backward(r.trace, dead_zone_gradient(r.trace.out, batch.targets, delta), p);
  add_l2_gradient(p, r.gradient, lambda);
  return r;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  ModelParams m;
  ModelParams v;
  long step = 0;
};

inline AdamState make_adam(const ModelParams& p) { return {zeros_like(p), zeros_like(p), 0}; }

inline void adam_step(ModelParams& p, const ModelParams& grad, AdamState& st, const TrainConfig& cfg) {
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.step));
  std::vector<const Matrix*> g;
  std::vector<Matrix*> m, v;
  grad.for_each_trainable([&](const std::string&, const Matrix& x, bool) { g.push_back(&x); });
  st.m.for_each_trainable([&](const std::string&, Matrix& x, bool) { m.push_back(&x); });
  st.v.for_each_trainable([&](const std::string&, Matrix& x, bool) { v.push_back(&x); });
  std::size_t k = 0;
  p.for_each_trainable([&](const std::string&, Matrix& x, bool) {
    auto& mk = *m[k];
    auto& vk = *v[k];
    const auto& gk = *g[k];
    mk = cfg.adam_beta1 * mk + (1.0 - cfg.adam_beta1) * gk;
    vk = cfg.adam_beta2 * vk + (1.0 - cfg.adam_beta2) * gk.cwiseProduct(gk);
    x.array() -= cfg.learning_rate * (mk.array() / c1) / ((vk.array() / c2).sqrt() + cfg.adam_epsilon);
    ++k;
  });
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  int epoch = 0;
  double data_loss = 0.0;   // mean dead-zone loss over the epoch's batches
  double objective = 0.0;   // data loss + L2, averaged the same way
};

struct StepInfo {
  int epoch = 0;
  long step = 0;
  double data_loss = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> epochs;
  long steps = 0;
};

inline TrainResult train(std::span<const BlinkSequence> sequences, const TrainConfig& cfg, const ModelConfig& model_cfg,
                         const std::function<void(const StepInfo&)>& on_step = {},
                         const ModelParams* initial = nullptr) {
  cfg.validate();
  if (sequences.empty()) throw PreconditionError("train: empty training set");
  TrainResult result;
  result.params = initial ? *initial : init_params(model_cfg, cfg.seed);
  AdamState adam = make_adam(result.params);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0, obj_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const BlinkSequence*> members;
      for (std::size_t k = b; k < e; ++k) members.push_back(&sequences[order[k]]);
      const auto batch = make_batch(std::span<const BlinkSequence* const>(members));
      auto r = evaluate_batch(result.params, batch, cfg.delta, cfg.l2_lambda, Mode::train);
      update_running_stats(result.params, r.trace);
      adam_step(result.params, r.gradient, adam, cfg);
      if (!all_finite(result.params))
        throw DivergenceError("parameters became non-finite at epoch " + std::to_string(epoch + 1));
      const auto weight = static_cast<double>(e - b);
      loss_sum += r.data_loss * weight;
      obj_sum += r.objective * weight;
      ++result.steps;
      if (on_step) on_step({epoch + 1, result.steps, r.data_loss});
    }
    const auto n = static_cast<double>(order.size());
    result.epochs.push_back({epoch + 1, loss_sum / n, obj_sum / n});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

struct TensorCheck {
  std::string name;
  double worst_relative_error = 0.0;
  bool flagged = false;
  std::size_t skipped = 0;  // entries whose probe crossed a kink
};

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  double worst_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
  std::size_t skipped = 0;

  [[nodiscard]] bool passed() const {
    for (const auto& t : tensors)
      if (t.flagged) return false;
    return true;
  }
};

struct GradcheckOptions {
  /// Fourth-order central stencil at +-h, +-2h. Its roundoff on an O(10)
  /// objective is near 1e-11 at this step, and truncation is O(h^4).
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Absolute floor of the relative-error denominator. Biases feeding a
  /// batch-norm layer have an exactly zero gradient, and their numeric
  /// estimate is pure roundoff near 1e-9 on an O(10) objective.
  double floor = 1e-4;
  /// Applied to the analytic gradient before comparison (fault injection).
  std::function<void(ModelParams&)> corrupt;
};

namespace detail {

/// Which side of every kink the objective sits on: ReLU inputs of unmasked
/// rows, the dead-zone edge per sequence, and hard boundary steps.
inline std::vector<bool> kink_signature(const ForwardTrace& tr, const Vector& targets, double delta) {
  std::vector<bool> sig;
  auto relu = [&](const DenseCache& c) {
    for (Eigen::Index r = 0; r < c.act_in.rows(); ++r) {
      if (c.row_mask(r) == 0.0) continue;
      for (Eigen::Index k = 0; k < c.act_in.cols(); ++k) sig.push_back(c.act_in(r, k) > 0.0);
    }
  };
  relu(tr.fc1.cache);
  for (const auto& h : tr.head.heads) relu(h);
  relu(tr.head.fc2);
  relu(tr.head.fc3);
  relu(tr.head.fc4);
  for (Eigen::Index i = 0; i < tr.out.size(); ++i) {
    const double d = tr.out(i) - targets(i);
    sig.push_back(d * d > delta);
  }
  for (const auto& layer : tr.hmlstm.steps)
    for (const auto& st : layer)
      for (Eigen::Index i = 0; i < st.z.size(); ++i) sig.push_back(st.z(i) >= 0.5);
  return sig;
}

}  // namespace detail

/// Adds N(0, scale) noise to every trainable entry. Moves a freshly
/// initialized model off the exact zeros (biases) that sit on ReLU kinks.
inline void perturb_params(ModelParams& p, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  p.for_each_trainable([&](const std::string&, Matrix& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += n(rng);
  });
}

/// Compares the analytic gradient of (dead-zone loss + L2) with central
/// differences for every trainable entry. Runs in train mode, so batch-norm
/// statistics are part of the checked function. An entry whose probes
/// changes the kink signature is not differentiable within the step and is
/// counted as skipped instead of compared. Soft boundaries only: in hard mode
/// the boundary step has no finite-difference counterpart.
inline GradcheckReport gradcheck(const ModelParams& params, const SequenceBatch& batch, double delta, double lambda,
                                 const GradcheckOptions& opt = {}) {
  auto base = evaluate_batch(params, batch, delta, lambda);
  ModelParams grad = std::move(base.gradient);
  if (opt.corrupt) opt.corrupt(grad);
  const auto base_sig = detail::kink_signature(base.trace, batch.targets, delta);

  std::vector<const Matrix*> analytic;
  grad.for_each_trainable([&](const std::string&, const Matrix& m, bool) { analytic.push_back(&m); });

  auto objective = [&](const ModelParams& q, bool& same_side) {
    auto tr = forward(batch, q, Mode::train);
    std::vector<double> outs(tr.out.data(), tr.out.data() + tr.out.size());
    std::vector<double> targets(batch.targets.data(), batch.targets.data() + batch.targets.size());
    same_side = same_side && detail::kink_signature(tr, batch.targets, delta) == base_sig;
    return dead_zone_loss(outs, targets, delta) + l2_penalty(q, lambda);
  };

  GradcheckReport report;
  ModelParams probe = params;
  std::size_t k = 0;
  probe.for_each_trainable([&](const std::string& name, Matrix& m, bool) {
    TensorCheck tc{name, 0.0, false, 0};
    const Matrix& a = *analytic[k++];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      bool smooth = true;
      auto at = [&](double offset) {
        m.data()[i] = orig + offset;
        return objective(probe, smooth);
      };
      const double h = opt.step;
      const double numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
      m.data()[i] = orig;
      if (!smooth) {
        ++tc.skipped;
        continue;
      }
      const double an = a.data()[i];
      const double rel = std::abs(an - numeric) / std::max({std::abs(an), std::abs(numeric), opt.floor});
      tc.worst_relative_error = std::max(tc.worst_relative_error, rel);
      ++report.checked;
    }
    tc.flagged = !(tc.worst_relative_error < opt.tolerance);
    report.skipped += tc.skipped;
    if (tc.worst_relative_error >= report.worst_relative_error) {
      report.worst_relative_error = tc.worst_relative_error;
      report.worst_tensor = name;
    }
    report.tensors.push_back(tc);
  });
  return report;
}

}  // namespace blinkwise

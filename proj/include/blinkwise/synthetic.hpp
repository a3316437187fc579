#pragma once

// Synthetic EAR streams with planted blinks, and RLDD-shaped datasets (three
// labelled videos per subject) built from them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "blinkwise/blink_detector.hpp"
#include "blinkwise/errors.hpp"
#include "blinkwise/evaluation.hpp"
#include "blinkwise/landmark_io.hpp"
#include "blinkwise/text.hpp"

namespace blinkwise {

struct Normal {
  double mean = 0.0;
  double sd = 0.0;
};

struct StateProfile {
  Normal duration;   // frames
  Normal amplitude;  // EAR
  Normal velocity;   // EAR per frame, reopening phase
  Normal gap;        // open-eye frames between blinks
};

struct SynthProfile {
  /// Indexed by ClassLabel: alert, low vigilant, drowsy.
  std::array<StateProfile, 3> states{};
  double baseline_ear = 0.30;
  double noise_sigma = 0.01;
  /// Minimum open-eye frames between consecutive blinks.
  int min_gap = 3;
  /// Log-scale spread of the per-subject multiplicative offsets.
  double subject_spread = 0.1;
  /// Spread of the per-subject additive baseline EAR offset.
  double baseline_spread = 0.01;

  static SynthProfile defaults() {
    SynthProfile p;
    p.states[0] = {{8.0, 1.5}, {0.22, 0.02}, {0.035, 0.008}, {120.0, 30.0}};
    p.states[1] = {{11.0, 2.2}, {0.205, 0.02}, {0.025, 0.0065}, {95.0, 25.0}};
    p.states[2] = {{14.0, 3.0}, {0.19, 0.02}, {0.015, 0.005}, {70.0, 20.0}};
    return p;
  }

  [[nodiscard]] const StateProfile& state(ClassLabel c) const { return states[static_cast<std::size_t>(index_of(c))]; }

  void validate() const {
    for (const auto& s : states)
      for (const auto& d : {s.duration, s.amplitude, s.velocity, s.gap})
        if (!(d.mean > 0.0) || !(d.sd >= 0.0)) throw PreconditionError("profile distributions need mean > 0, sd >= 0");
    if (!(baseline_ear > 0.0) || !(noise_sigma >= 0.0) || min_gap < 0 || !(subject_spread >= 0.0) ||
        !(baseline_spread >= 0.0))
      throw PreconditionError("profile: invalid baseline, noise, gap or spread");
    const auto& a = state(ClassLabel::alert);
    const auto& d = state(ClassLabel::drowsy);
    if (!(d.duration.mean > a.duration.mean)) throw PreconditionError("profile: drowsy blinks must last longer");
    if (!(d.velocity.mean < a.velocity.mean)) throw PreconditionError("profile: drowsy blinks must reopen slower");
  }
};

/// Multiplicative per-subject factors (1 = population profile).
struct SubjectOffsets {
  double duration = 1.0;
  double amplitude = 1.0;
  double velocity = 1.0;
  double gap = 1.0;
  double baseline_delta = 0.0;
};

inline SubjectOffsets draw_subject_offsets(const SynthProfile& p, std::mt19937_64& rng) {
  std::normal_distribution<double> log_n(0.0, 1.0);
  auto factor = [&] { return p.subject_spread > 0.0 ? std::exp(p.subject_spread * log_n(rng)) : 1.0; };
  SubjectOffsets o;
  o.duration = factor();
  o.amplitude = factor();
  o.velocity = factor();
  o.gap = factor();
  o.baseline_delta = p.baseline_spread > 0.0 ? p.baseline_spread * log_n(rng) : 0.0;
  return o;
}

struct SyntheticStream {
  EarSeries series;
  std::vector<BlinkEvent> truth;  // noise-free EAR values
};

namespace detail {

inline double draw(const Normal& n, double scale, std::mt19937_64& rng) {
  if (n.sd == 0.0) return n.mean * scale;
  std::normal_distribution<double> d(n.mean * scale, n.sd * scale);
  return d(rng);
}

/// Appends one V-shaped blink starting at the current end of `ears`.
inline BlinkEvent plant_blink(std::vector<double>& ears, double baseline, const StateProfile& s,
                              const SubjectOffsets& off, std::mt19937_64& rng) {
  const int duration = std::max(3, static_cast<int>(std::lround(draw(s.duration, off.duration, rng))));
  const double amplitude = std::clamp(draw(s.amplitude, off.amplitude, rng), 0.05, baseline - 0.02);
  const double velocity = std::max(0.003, draw(s.velocity, off.velocity, rng));
  const int opening = std::clamp(static_cast<int>(std::lround(amplitude / velocity)), 1, duration - 2);
  const int closing = duration - 1 - opening;
  const auto start = static_cast<std::int64_t>(ears.size());
  const double low = baseline - amplitude;
  for (int k = 0; k < closing; ++k) ears.push_back(baseline - amplitude * k / closing);
  for (int k = 0; k <= opening; ++k) ears.push_back(low + amplitude * k / opening);
  return {start, start + closing, start + duration - 1, baseline, low, baseline};
}

inline int draw_gap(const SynthProfile& p, const StateProfile& s, const SubjectOffsets& off, std::mt19937_64& rng) {
  return std::max(p.min_gap, static_cast<int>(std::lround(draw(s.gap, off.gap, rng))));
}

inline SyntheticStream finish_stream(std::vector<double> clean, std::vector<BlinkEvent> truth, double noise, double fps,
                                     std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  if (noise > 0.0)
    for (double& v : clean) v = std::max(0.0, v + noise * n(rng));
  SyntheticStream s;
  s.series = EarSeries::from_values(clean, fps);
  s.truth = std::move(truth);
  return s;
}

}  // namespace detail

/// A stream of `n_blinks` planted blinks separated by open-eye gaps, plus
/// Gaussian noise. Truth indices are exact; truth EAR values are noise-free.
inline SyntheticStream gen_ear_stream(const SynthProfile& profile, ClassLabel state, std::size_t n_blinks, double fps,
                                      std::uint64_t seed, const SubjectOffsets& off = {}) {
  profile.validate();
  std::mt19937_64 rng(seed);
  const auto& s = profile.state(state);
  const double baseline = profile.baseline_ear + off.baseline_delta;
  std::vector<double> ears;
  std::vector<BlinkEvent> truth;
  const int lead = std::max(10, detail::draw_gap(profile, s, off, rng) / 2);
  ears.assign(static_cast<std::size_t>(lead), baseline);
  for (std::size_t b = 0; b < n_blinks; ++b) {
    if (b > 0) ears.insert(ears.end(), static_cast<std::size_t>(detail::draw_gap(profile, s, off, rng)), baseline);
    truth.push_back(detail::plant_blink(ears, baseline, s, off, rng));
  }
  ears.insert(ears.end(), static_cast<std::size_t>(std::max(10, profile.min_gap)), baseline);
  return detail::finish_stream(std::move(ears), std::move(truth), profile.noise_sigma, fps, rng);
}

/// Like gen_ear_stream but keeps planting blinks while they fit in `frames`.
inline SyntheticStream gen_ear_video(const SynthProfile& profile, ClassLabel state, std::size_t frames, double fps,
                                     std::uint64_t seed, const SubjectOffsets& off = {}) {
  profile.validate();
  std::mt19937_64 rng(seed);
  const auto& s = profile.state(state);
  const double baseline = profile.baseline_ear + off.baseline_delta;
  std::vector<double> ears;
  std::vector<BlinkEvent> truth;
  ears.assign(static_cast<std::size_t>(std::max(10, detail::draw_gap(profile, s, off, rng) / 2)), baseline);
  while (true) {
    std::vector<double> trial = ears;
    if (!truth.empty()) trial.insert(trial.end(), static_cast<std::size_t>(detail::draw_gap(profile, s, off, rng)), baseline);
    auto b = detail::plant_blink(trial, baseline, s, off, rng);
    if (trial.size() + 10 > frames) break;
    ears = std::move(trial);
    truth.push_back(b);
  }
  if (ears.size() < frames) ears.resize(frames, baseline);
  return detail::finish_stream(std::move(ears), std::move(truth), profile.noise_sigma, fps, rng);
}

// ---------------------------------------------------------------------------
// Datasets

struct SyntheticVideo {
  std::string subject_id;
  std::string video_id;
  ClassLabel state = ClassLabel::alert;
  int fold = 1;
  SyntheticStream stream;
};

struct DatasetOptions {
  std::size_t subjects = 15;
  std::size_t videos_per_state = 1;
  std::size_t video_frames = 9000;
  double fps = 30.0;
  std::uint64_t seed = 1;
  int folds = 5;
};

inline std::string subject_name(std::size_t k) {
  auto n = std::to_string(k + 1);
  return "s" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
}

/// Per subject: one offset draw, then `videos_per_state` videos for each of
/// the three states. Subjects are dealt round-robin into folds after a
/// seeded shuffle.
inline std::vector<SyntheticVideo> gen_dataset(const SynthProfile& profile, const DatasetOptions& opt) {
  profile.validate();
  if (opt.subjects < static_cast<std::size_t>(opt.folds))
    throw PreconditionError("gen_dataset: need at least one subject per fold");
  std::mt19937_64 fold_rng(opt.seed);
  std::vector<std::size_t> order(opt.subjects);
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::shuffle(order.begin(), order.end(), fold_rng);
  std::vector<int> fold_of(opt.subjects);
  for (std::size_t k = 0; k < order.size(); ++k) fold_of[order[k]] = static_cast<int>(k % static_cast<std::size_t>(opt.folds)) + 1;

  std::vector<SyntheticVideo> out;
  for (std::size_t subj = 0; subj < opt.subjects; ++subj) {
    std::seed_seq seq{opt.seed, static_cast<std::uint64_t>(subj), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    const auto off = draw_subject_offsets(profile, rng);
    for (auto state : kClasses) {
      for (std::size_t v = 0; v < opt.videos_per_state; ++v) {
        SyntheticVideo vid;
        vid.subject_id = subject_name(subj);
        vid.video_id = vid.subject_id + "_" + std::string(to_string(state)) + "_" + std::to_string(v + 1);
        vid.state = state;
        vid.fold = fold_of[subj];
        vid.stream = gen_ear_video(profile, state, opt.video_frames, opt.fps, rng(), off);
        out.push_back(std::move(vid));
      }
    }
  }
  return out;
}

inline constexpr std::string_view kTruthTag = "# blinkwise-truth v1";

inline std::string serialize_truth(std::span<const BlinkEvent> truth, std::span<const std::string> comments = {}) {
  std::string out(kTruthTag);
  out += '\n';
  for (const auto& c : comments) out += c + '\n';
  out += "start,bottom,end\n";
  for (const auto& b : truth)
    out += std::to_string(b.start) + ',' + std::to_string(b.bottom) + ',' + std::to_string(b.end) + '\n';
  return out;
}

/// Reads a truth file back; EAR fields of the events are left at zero.
inline std::vector<BlinkEvent> parse_truth(std::string_view content) {
  auto ls = text::lines(content);
  if (ls.empty() || text::trim(ls[0].content) != kTruthTag) throw FormatError("missing truth version tag", 1);
  std::vector<BlinkEvent> out;
  bool header = false;
  for (std::size_t k = 1; k < ls.size(); ++k) {
    auto t = text::trim(ls[k].content);
    if (t.empty() || t.front() == '#') continue;
    if (!header) {
      if (t != "start,bottom,end") throw FormatError("expected header start,bottom,end", ls[k].number);
      header = true;
      continue;
    }
    auto f = text::split(t, ',');
    if (f.size() != 3) throw FormatError("truth rows need 3 fields", ls[k].number);
    BlinkEvent b;
    b.start = text::parse_int(f[0], ls[k].number);
    b.bottom = text::parse_int(f[1], ls[k].number);
    b.end = text::parse_int(f[2], ls[k].number);
    if (!(b.start <= b.bottom && b.bottom <= b.end)) throw FormatError("truth row needs start <= bottom <= end", ls[k].number);
    out.push_back(b);
  }
  if (!header) throw FormatError("truth file lacks a header");
  return out;
}

}  // namespace blinkwise

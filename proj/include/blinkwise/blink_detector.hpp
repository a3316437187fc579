#pragma once

// Open/closed frame classification over 13-frame EAR windows, grouping of
// closed runs into candidates, and the blink retrieval pass that splits one
// candidate into its constituent blinks.

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blinkwise/errors.hpp"
#include "blinkwise/landmark_io.hpp"
#include "blinkwise/text.hpp"

namespace blinkwise {

inline constexpr std::size_t kWindowSize = 13;
inline constexpr std::size_t kWindowHalf = kWindowSize / 2;

/// EAR of frames t-6..t+6 around a frame of interest, edge-replicated.
struct FrameWindow13 {
  std::array<double, kWindowSize> values{};
};

inline FrameWindow13 window_at(std::span<const double> ears, std::size_t t) {
  FrameWindow13 w;
  const auto n = static_cast<std::ptrdiff_t>(ears.size());
  for (std::size_t k = 0; k < kWindowSize; ++k) {
    auto idx = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) -
               static_cast<std::ptrdiff_t>(kWindowHalf);
    idx = std::clamp<std::ptrdiff_t>(idx, 0, n - 1);
    w.values[k] = ears[static_cast<std::size_t>(idx)];
  }
  return w;
}

enum class ClassifierKind { threshold, linear13 };

struct ClosedFrameClassifier {
  ClassifierKind kind = ClassifierKind::threshold;
  double threshold = 0.2;
  std::array<double, kWindowSize> weights{};
  double bias = 0.0;

  static ClosedFrameClassifier make_threshold(double thr) {
    ClosedFrameClassifier c;
    c.threshold = thr;
    return c;
  }

  static ClosedFrameClassifier make_linear(const std::array<double, kWindowSize>& w, double b) {
    for (double v : w)
      if (!std::isfinite(v)) throw PreconditionError("linear13 weights must be finite");
    if (!std::isfinite(b)) throw PreconditionError("linear13 bias must be finite");
    ClosedFrameClassifier c;
    c.kind = ClassifierKind::linear13;
    c.weights = w;
    c.bias = b;
    return c;
  }

  [[nodiscard]] double score(const FrameWindow13& w) const {
    if (kind == ClassifierKind::threshold) return threshold - w.values[kWindowHalf];
    double s = bias;
    for (std::size_t k = 0; k < kWindowSize; ++k) s += weights[k] * w.values[k];
    return s;
  }

  /// Positive score means closed.
  [[nodiscard]] bool closed(const FrameWindow13& w) const { return score(w) > 0.0; }
};

/// One label per frame, true = closed.
inline std::vector<bool> classify_frames(std::span<const double> ears, const ClosedFrameClassifier& clf) {
  if (ears.empty()) throw PreconditionError("classify_frames: empty series");
  std::vector<bool> labels(ears.size());
  for (std::size_t t = 0; t < ears.size(); ++t) labels[t] = clf.closed(window_at(ears, t));
  return labels;
}

struct CandidateSegment {
  std::vector<double> x;
  std::int64_t first_frame = 0;
};

/// Maximal runs of closed labels paired with their EAR values.
inline std::vector<CandidateSegment> group_closed_runs(const std::vector<bool>& labels,
                                                       std::span<const double> ears,
                                                       std::int64_t first_frame = 0) {
  if (labels.size() != ears.size()) throw PreconditionError("group_closed_runs: labels/EAR size mismatch");
  std::vector<CandidateSegment> out;
  std::size_t t = 0;
  while (t < labels.size()) {
    if (!labels[t]) {
      ++t;
      continue;
    }
    std::size_t e = t;
    while (e < labels.size() && labels[e]) ++e;
    out.push_back({std::vector<double>(ears.begin() + static_cast<std::ptrdiff_t>(t),
                                       ears.begin() + static_cast<std::ptrdiff_t>(e)),
                   first_frame + static_cast<std::int64_t>(t)});
    t = e;
  }
  return out;
}

enum class FilterKind { none, median, mean };

inline std::string_view to_string(FilterKind k) {
  switch (k) {
    case FilterKind::none: return "none";
    case FilterKind::median: return "median";
    case FilterKind::mean: return "mean";
  }
  return "?";
}

inline FilterKind parse_filter(std::string_view s) {
  if (s == "none") return FilterKind::none;
  if (s == "median") return FilterKind::median;
  if (s == "mean") return FilterKind::mean;
  throw PreconditionError("unknown filter '" + std::string(s) + "'");
}

/// Median or mean filter with edge replication; output has the input length.
inline std::vector<double> smooth(std::span<const double> x, FilterKind filter, int window) {
  if (window < 1 || window % 2 == 0)
    throw PreconditionError("smoothing window must be odd and >= 1, got " + std::to_string(window));
  std::vector<double> out(x.begin(), x.end());
  if (filter == FilterKind::none || window == 1 || x.empty()) return out;
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const std::ptrdiff_t half = window / 2;
  std::vector<double> buf(static_cast<std::size_t>(window));
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    for (std::ptrdiff_t k = -half; k <= half; ++k)
      buf[static_cast<std::size_t>(k + half)] = x[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i + k, 0, n - 1))];
    if (filter == FilterKind::median) {
      auto mid = buf.begin() + half;
      std::nth_element(buf.begin(), mid, buf.end());
      out[static_cast<std::size_t>(i)] = *mid;
    } else {
      out[static_cast<std::size_t>(i)] =
          std::accumulate(buf.begin(), buf.end(), 0.0) / static_cast<double>(window);
    }
  }
  return out;
}

struct BlinkEvent {
  std::int64_t start = 0;
  std::int64_t bottom = 0;
  std::int64_t end = 0;
  double ear_start = 0.0;
  double ear_bottom = 0.0;
  double ear_end = 0.0;

  friend bool operator==(const BlinkEvent&, const BlinkEvent&) = default;
};

/// Intermediate vectors of one retrieval run, kept for inspection in tests.
struct RetrievalTrace {
  std::vector<double> derivative;
  std::vector<std::size_t> extrema;  // e: indices into x, first and last included
  double threshold = 0.0;
  std::vector<int> labels;            // t: +1 above threshold, -1 at or below
  std::vector<std::size_t> crossings; // s: positions where consecutive labels differ
  std::size_t operations = 0;         // loop iterations, for the linear-time check
};

/// Splits one candidate into N blinks. Indices in the result are global frame
/// numbers (`segment.first_frame` + local index); EAR values are those of
/// `segment.x`. Candidates shorter than three frames yield nothing.
inline std::vector<BlinkEvent> retrieve_blinks(const CandidateSegment& segment, double epsilon = 0.01,
                                               RetrievalTrace* trace = nullptr) {
  const auto& x = segment.x;
  const std::size_t m = x.size();
  RetrievalTrace local;
  RetrievalTrace& tr = trace ? *trace : local;
  tr = RetrievalTrace{};
  if (m < 3) return {};

  // Derivative; zero slopes inherit the sign of the previous one (left to right).
  auto& dx = tr.derivative;
  dx.resize(m - 1);
  for (std::size_t n = 0; n + 1 < m; ++n, ++tr.operations) dx[n] = x[n + 1] - x[n];
  if (dx[0] == 0.0) dx[0] = -epsilon;
  for (std::size_t n = 1; n < dx.size(); ++n, ++tr.operations)
    if (dx[n] == 0.0) dx[n] = dx[n - 1] * epsilon;

  // Extrema where the slope changes sign; both endpoints count as maxima.
  auto& e = tr.extrema;
  e.push_back(0);
  for (std::size_t n = 0; n + 2 < m; ++n, ++tr.operations)
    if (dx[n + 1] * dx[n] < 0.0) e.push_back(n + 1);
  e.push_back(m - 1);

  double hi = x[0], lo = x[0];
  for (double v : x) {
    hi = std::max(hi, v);
    lo = std::min(lo, v);
    ++tr.operations;
  }
  tr.threshold = 0.6 * hi + 0.4 * lo;

  auto& t = tr.labels;
  t.resize(e.size());
  t.front() = +1;
  t.back() = +1;
  for (std::size_t k = 1; k + 1 < e.size(); ++k, ++tr.operations) t[k] = x[e[k]] > tr.threshold ? +1 : -1;

  auto& s = tr.crossings;
  for (std::size_t n = 0; n + 1 < t.size(); ++n, ++tr.operations)
    if (t[n + 1] * t[n] < 0) s.push_back(n);
  // Labels start and end at +1, so the sign changes pair up.
  assert(s.size() % 2 == 0);

  std::vector<BlinkEvent> blinks;
  const std::size_t count = s.size() / 2;
  blinks.reserve(count);
  for (std::size_t i = 0; i < count; ++i, ++tr.operations) {
    const std::size_t start = e[s[2 * i]];
    const std::size_t end = e[s[2 * i + 1] + 1];
    const std::size_t bottom = e[s[2 * i + 1]];
    blinks.push_back({segment.first_frame + static_cast<std::int64_t>(start),
                      segment.first_frame + static_cast<std::int64_t>(bottom),
                      segment.first_frame + static_cast<std::int64_t>(end), x[start], x[bottom], x[end]});
  }
  return blinks;
}

struct DetectorConfig {
  ClosedFrameClassifier classifier{};
  FilterKind filter = FilterKind::median;
  int window = 3;
  double epsilon = 0.01;
  /// Open-eye frames added on each side of a closed run before retrieval.
  std::size_t context = 2;
};

/// Full pass over a series: classify, group, pad with context, smooth and
/// retrieve. Blinks come back ordered by start frame; consecutive blinks may
/// share a boundary frame but never overlap beyond it.
inline std::vector<BlinkEvent> detect_blinks(const EarSeries& series, const DetectorConfig& cfg = {}) {
  std::vector<BlinkEvent> out;
  for (auto seg : series.segments()) {
    std::vector<double> ears;
    ears.reserve(seg.size());
    for (const auto& s : seg) ears.push_back(s.ear);
    const auto labels = classify_frames(ears, cfg.classifier);
    const auto runs = group_closed_runs(labels, ears, 0);

    // Pad every run with context frames and merge runs whose padding touches.
    std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end)
    for (const auto& r : runs) {
      const auto b = static_cast<std::size_t>(r.first_frame);
      const std::size_t begin = b >= cfg.context ? b - cfg.context : 0;
      const std::size_t end = std::min(ears.size(), b + r.x.size() + cfg.context);
      if (!ranges.empty() && begin <= ranges.back().second)
        ranges.back().second = std::max(ranges.back().second, end);
      else
        ranges.emplace_back(begin, end);
    }

    const std::int64_t frame0 = seg.front().frame_index;
    for (auto [begin, end] : ranges) {
      CandidateSegment cand;
      cand.first_frame = frame0 + static_cast<std::int64_t>(begin);
      cand.x = smooth(std::span<const double>(ears).subspan(begin, end - begin), cfg.filter, cfg.window);
      for (const auto& b : retrieve_blinks(cand, cfg.epsilon)) {
        // A candidate cut off at the stream edge can start below its bottom.
        if (b.ear_bottom <= b.ear_start && b.ear_bottom <= b.ear_end) out.push_back(b);
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const BlinkEvent& a, const BlinkEvent& b) { return a.start < b.start; });
  return out;
}

// ---------------------------------------------------------------------------
// Linear classifier over 13-frame windows, fit by class-balanced logistic
// regression.

struct LogisticConfig {
  int iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-4;
};

inline ClosedFrameClassifier train_linear13(std::span<const double> ears, const std::vector<bool>& closed,
                                            const LogisticConfig& cfg = {}) {
  if (ears.empty() || ears.size() != closed.size())
    throw PreconditionError("train_linear13: need one label per frame");
  const std::size_t n = ears.size();
  const auto pos = static_cast<double>(std::count(closed.begin(), closed.end(), true));
  const auto neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw PreconditionError("train_linear13: need both open and closed frames");

  // Standardize with one scalar mean/scale shared by all taps, fold back at the end.
  double mean = 0.0;
  for (double v : ears) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : ears) var += (v - mean) * (v - mean);
  const double scale = std::sqrt(var / static_cast<double>(n)) + 1e-12;

  std::vector<FrameWindow13> windows(n);
  for (std::size_t t = 0; t < n; ++t) {
    windows[t] = window_at(ears, t);
    for (double& v : windows[t].values) v = (v - mean) / scale;
  }
  const double w_pos = 0.5 / pos, w_neg = 0.5 / neg;

  std::array<double, kWindowSize> w{};
  double b = 0.0;
  for (int it = 0; it < cfg.iterations; ++it) {
    std::array<double, kWindowSize> gw{};
    double gb = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      double z = b;
      for (std::size_t k = 0; k < kWindowSize; ++k) z += w[k] * windows[t].values[k];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double y = closed[t] ? 1.0 : 0.0;
      const double g = (p - y) * (closed[t] ? w_pos : w_neg);
      for (std::size_t k = 0; k < kWindowSize; ++k) gw[k] += g * windows[t].values[k];
      gb += g;
    }
    for (std::size_t k = 0; k < kWindowSize; ++k) w[k] -= cfg.learning_rate * (gw[k] + cfg.l2 * w[k]);
    b -= cfg.learning_rate * gb;
  }

  std::array<double, kWindowSize> raw{};
  double raw_bias = b;
  for (std::size_t k = 0; k < kWindowSize; ++k) {
    raw[k] = w[k] / scale;
    raw_bias -= w[k] * mean / scale;
  }
  return ClosedFrameClassifier::make_linear(raw, raw_bias);
}

// ---------------------------------------------------------------------------
// Files

inline constexpr std::string_view kBlinksTag = "# blinkwise-blinks v1";
inline constexpr std::string_view kBlinksHeader = "start,bottom,end,ear_start,ear_bottom,ear_end";
inline constexpr std::string_view kClassifierTag = "# blinkwise-classifier v1";

inline std::string serialize_blinks(std::span<const BlinkEvent> blinks, std::span<const std::string> comments = {}) {
  std::string out;
  out += kBlinksTag;
  out += '\n';
  for (const auto& c : comments) {
    out += c;
    out += '\n';
  }
  out += kBlinksHeader;
  out += '\n';
  for (const auto& b : blinks) {
    out += std::to_string(b.start) + ',' + std::to_string(b.bottom) + ',' + std::to_string(b.end) + ',' +
           text::format_real(b.ear_start) + ',' + text::format_real(b.ear_bottom) + ',' +
           text::format_real(b.ear_end) + '\n';
  }
  return out;
}

inline std::vector<BlinkEvent> parse_blinks(std::string_view content) {
  std::vector<BlinkEvent> out;
  bool header = false;
  for (const auto& [no, raw] : text::lines(content)) {
    auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kBlinksHeader) throw FormatError("expected blink header", no);
      header = true;
      continue;
    }
    auto cols = text::split(line, ',');
    if (cols.size() != 6) throw FormatError("expected 6 columns", no);
    BlinkEvent b{text::parse_int(cols[0], no),  text::parse_int(cols[1], no),  text::parse_int(cols[2], no),
                 text::parse_real(cols[3], no), text::parse_real(cols[4], no), text::parse_real(cols[5], no)};
    if (!(b.start <= b.bottom && b.bottom <= b.end)) throw FormatError("blink requires start <= bottom <= end", no);
    out.push_back(b);
  }
  return out;
}

/// `kind,threshold|linear13`, then `threshold,<v>` or `weights,<13 values>` and `bias,<v>`.
inline std::string serialize_classifier(const ClosedFrameClassifier& c) {
  std::string out(kClassifierTag);
  out += '\n';
  if (c.kind == ClassifierKind::threshold) {
    out += "kind,threshold\nthreshold," + text::format_real(c.threshold) + '\n';
  } else {
    out += "kind,linear13\nweights";
    for (double w : c.weights) out += ',' + text::format_real(w);
    out += "\nbias," + text::format_real(c.bias) + '\n';
  }
  return out;
}

inline ClosedFrameClassifier parse_classifier(std::string_view content) {
  ClosedFrameClassifier c;
  bool linear = false, have_weights = false;
  std::array<double, kWindowSize> w{};
  double bias = 0.0;
  for (const auto& [no, raw] : text::lines(content)) {
    auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    auto cols = text::split(line, ',');
    if (cols[0] == "kind") {
      if (cols.size() != 2) throw FormatError("kind row needs one value", no);
      if (cols[1] == "linear13") linear = true;
      else if (cols[1] != "threshold") throw FormatError("unknown classifier kind", no);
    } else if (cols[0] == "threshold") {
      if (cols.size() != 2) throw FormatError("threshold row needs one value", no);
      c.threshold = text::parse_real(cols[1], no);
    } else if (cols[0] == "weights") {
      if (cols.size() != kWindowSize + 1) throw FormatError("weights row needs 13 values", no);
      for (std::size_t k = 0; k < kWindowSize; ++k) w[k] = text::parse_real(cols[k + 1], no);
      have_weights = true;
    } else if (cols[0] == "bias") {
      if (cols.size() != 2) throw FormatError("bias row needs one value", no);
      bias = text::parse_real(cols[1], no);
    } else {
      throw FormatError("unknown classifier row '" + std::string(cols[0]) + "'", no);
    }
  }
  if (linear) {
    if (!have_weights) throw FormatError("linear13 classifier without weights");
    return ClosedFrameClassifier::make_linear(w, bias);
  }
  return c;
}

}  // namespace blinkwise

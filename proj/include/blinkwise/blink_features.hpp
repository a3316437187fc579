#pragma once

// The four per-blink features and the two normalization stages: per-subject
// calibration against early alert blinks, then cross-subject standardization.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blinkwise/blink_detector.hpp"
#include "blinkwise/errors.hpp"
#include "blinkwise/landmark_io.hpp"
#include "blinkwise/text.hpp"

namespace blinkwise {

inline constexpr std::size_t kFeatureCount = 4;
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {"duration", "amplitude", "velocity",
                                                                              "frequency"};
inline constexpr double kSigmaFloor = 1e-6;
inline constexpr std::size_t kMinCalibrationBlinks = 6;

struct BlinkFeatureVector {
  /// duration (frames), amplitude (EAR), opening velocity (EAR/frame),
  /// frequency (blinks per 100 frames), in that order.
  std::array<double, kFeatureCount> values{};
  bool normalized = false;
  /// Position of the source blink in its video's blink list.
  std::int64_t blink_idx = -1;

  [[nodiscard]] double duration() const { return values[0]; }
  [[nodiscard]] double amplitude() const { return values[1]; }
  [[nodiscard]] double velocity() const { return values[2]; }
  [[nodiscard]] double frequency() const { return values[3]; }
};

inline std::vector<BlinkFeatureVector> extract_features(std::span<const BlinkEvent> blinks, const EarSeries& ear) {
  std::vector<BlinkFeatureVector> out;
  out.reserve(blinks.size());
  for (std::size_t i = 0; i < blinks.size(); ++i) {
    const auto& b = blinks[i];
    if (i > 0 && b.start < blinks[i - 1].start) throw PreconditionError("extract_features: blinks not ordered");
    if (!(b.start <= b.bottom && b.bottom <= b.end))
      throw PreconditionError("extract_features: blink " + std::to_string(i) + " violates start <= bottom <= end");
    const double e_start = ear.ear_at(b.start);
    const double e_bottom = ear.ear_at(b.bottom);
    const double e_end = ear.ear_at(b.end);
    BlinkFeatureVector f;
    f.blink_idx = static_cast<std::int64_t>(i);
    f.values[0] = static_cast<double>(b.end - b.start + 1);
    f.values[1] = (e_start - 2.0 * e_bottom + e_end) / 2.0;
    f.values[2] = (e_end - e_bottom) / static_cast<double>(std::max<std::int64_t>(1, b.end - b.bottom));
    // Frames are 0-based from stream start, so end+1 frames have elapsed.
    f.values[3] = 100.0 * static_cast<double>(i + 1) / static_cast<double>(b.end + 1);
    out.push_back(f);
  }
  return out;
}

struct FeatureStats {
  std::array<double, kFeatureCount> mean{};
  std::array<double, kFeatureCount> stddev{};
  /// Features whose deviation was raised to kSigmaFloor.
  std::array<bool, kFeatureCount> floored{};

  [[nodiscard]] bool any_floored() const {
    for (bool f : floored)
      if (f) return true;
    return false;
  }
};

namespace detail {

inline FeatureStats compute_stats(std::span<const BlinkFeatureVector> f) {
  FeatureStats s;
  const auto n = static_cast<double>(f.size());
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    double m = 0.0;
    for (const auto& v : f) m += v.values[k];
    m /= n;
    double var = 0.0;
    for (const auto& v : f) var += (v.values[k] - m) * (v.values[k] - m);
    double sd = std::sqrt(var / n);
    if (!(sd >= kSigmaFloor)) {
      sd = kSigmaFloor;
      s.floored[k] = true;
    }
    s.mean[k] = m;
    s.stddev[k] = sd;
  }
  return s;
}

inline std::vector<BlinkFeatureVector> standardize(std::span<const BlinkFeatureVector> f, const FeatureStats& s) {
  std::vector<BlinkFeatureVector> out(f.begin(), f.end());
  for (auto& v : out) {
    for (std::size_t k = 0; k < kFeatureCount; ++k) v.values[k] = (v.values[k] - s.mean[k]) / s.stddev[k];
    v.normalized = true;
  }
  return out;
}

}  // namespace detail

/// Per-subject statistics over the first third of the alert-state blinks.
struct CalibrationStats {
  FeatureStats stats;
  std::size_t blink_count_used = 0;
};

inline CalibrationStats fit_calibration(std::span<const BlinkFeatureVector> alert_blinks) {
  if (alert_blinks.size() < kMinCalibrationBlinks)
    throw PreconditionError("calibration needs at least " + std::to_string(kMinCalibrationBlinks) +
                            " alert blinks, got " + std::to_string(alert_blinks.size()));
  CalibrationStats c;
  c.blink_count_used = alert_blinks.size() / 3;
  c.stats = detail::compute_stats(alert_blinks.first(c.blink_count_used));
  return c;
}

/// The alert blinks left after removing those consumed by calibration.
inline std::vector<BlinkFeatureVector> drop_calibration_blinks(std::span<const BlinkFeatureVector> alert_blinks,
                                                               const CalibrationStats& c) {
  return {alert_blinks.begin() + static_cast<std::ptrdiff_t>(c.blink_count_used), alert_blinks.end()};
}

inline std::vector<BlinkFeatureVector> normalize(std::span<const BlinkFeatureVector> f, const CalibrationStats& c) {
  return detail::standardize(f, c.stats);
}

inline std::vector<BlinkFeatureVector> denormalize(std::span<const BlinkFeatureVector> f, const CalibrationStats& c) {
  std::vector<BlinkFeatureVector> out(f.begin(), f.end());
  for (auto& v : out) {
    for (std::size_t k = 0; k < kFeatureCount; ++k) v.values[k] = v.values[k] * c.stats.stddev[k] + c.stats.mean[k];
    v.normalized = false;
  }
  return out;
}

/// Cross-subject standardization, fit on training data only.
struct GlobalStats {
  FeatureStats stats;
};

inline GlobalStats fit_global(std::span<const BlinkFeatureVector> training) {
  if (training.empty()) throw PreconditionError("fit_global: empty training set");
  return {detail::compute_stats(training)};
}

inline std::vector<BlinkFeatureVector> apply_global(std::span<const BlinkFeatureVector> f, const GlobalStats& g) {
  return detail::standardize(f, g.stats);
}

// ---------------------------------------------------------------------------
// Files

inline constexpr std::string_view kFeaturesTag = "# blinkwise-features v1";
inline constexpr std::string_view kFeaturesHeader = "blink_idx,duration,amplitude,velocity,frequency,normalized";
inline constexpr std::string_view kCalibrationTag = "# blinkwise-calibration v1";
inline constexpr std::string_view kCalibrationHeader = "feature,mu,sigma,count_used";

inline std::string serialize_features(std::span<const BlinkFeatureVector> f, std::span<const std::string> comments = {}) {
  std::string out(kFeaturesTag);
  out += '\n';
  for (const auto& c : comments) out += c + '\n';
  out += kFeaturesHeader;
  out += '\n';
  for (const auto& v : f) {
    out += std::to_string(v.blink_idx);
    for (double x : v.values) out += ',' + text::format_real(x);
    out += v.normalized ? ",1\n" : ",0\n";
  }
  return out;
}

inline std::vector<BlinkFeatureVector> parse_features(std::string_view content) {
  std::vector<BlinkFeatureVector> out;
  bool header = false;
  for (const auto& [no, raw] : text::lines(content)) {
    auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kFeaturesHeader) throw FormatError("expected features header", no);
      header = true;
      continue;
    }
    auto cols = text::split(line, ',');
    if (cols.size() != 6) throw FormatError("expected 6 columns", no);
    BlinkFeatureVector v;
    v.blink_idx = text::parse_int(cols[0], no);
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      v.values[k] = text::parse_real(cols[k + 1], no);
      if (!std::isfinite(v.values[k])) throw FormatError("non-finite feature value", no);
    }
    if (cols[5] != "0" && cols[5] != "1") throw FormatError("normalized flag must be 0 or 1", no);
    v.normalized = cols[5] == "1";
    out.push_back(v);
  }
  return out;
}

inline std::string serialize_calibration(const CalibrationStats& c, std::span<const std::string> comments = {}) {
  std::string out(kCalibrationTag);
  out += '\n';
  for (const auto& line : comments) out += line + '\n';
  out += kCalibrationHeader;
  out += '\n';
  for (std::size_t k = 0; k < kFeatureCount; ++k)
    out += std::string(kFeatureNames[k]) + ',' + text::format_real(c.stats.mean[k]) + ',' +
           text::format_real(c.stats.stddev[k]) + ',' + std::to_string(c.blink_count_used) + '\n';
  return out;
}

inline CalibrationStats parse_calibration(std::string_view content) {
  CalibrationStats c;
  std::array<bool, kFeatureCount> seen{};
  bool header = false;
  for (const auto& [no, raw] : text::lines(content)) {
    auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kCalibrationHeader) throw FormatError("expected calibration header", no);
      header = true;
      continue;
    }
    auto cols = text::split(line, ',');
    if (cols.size() != 4) throw FormatError("expected 4 columns", no);
    std::size_t k = 0;
    while (k < kFeatureCount && kFeatureNames[k] != cols[0]) ++k;
    if (k == kFeatureCount) throw FormatError("unknown feature '" + std::string(cols[0]) + "'", no);
    c.stats.mean[k] = text::parse_real(cols[1], no);
    c.stats.stddev[k] = text::parse_real(cols[2], no);
    if (!(c.stats.stddev[k] > 0.0)) throw FormatError("sigma must be positive", no);
    c.blink_count_used = static_cast<std::size_t>(text::parse_int(cols[3], no));
    seen[k] = true;
  }
  for (std::size_t k = 0; k < kFeatureCount; ++k)
    if (!seen[k]) throw FormatError("calibration file lacks feature '" + std::string(kFeatureNames[k]) + "'");
  return c;
}

}  // namespace blinkwise

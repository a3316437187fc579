#pragma once

// Per-frame eye geometry, the eye aspect ratio signal, and the two
// line-delimited input formats (landmark rows and precomputed EAR rows).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blinkwise/errors.hpp"
#include "blinkwise/text.hpp"

namespace blinkwise {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Six eye landmarks p1..p6: p1/p4 are the eye corners, p2/p3 the upper lid,
/// p6/p5 the lower lid (p2 above p6, p3 above p5).
using EyeLandmarks = std::array<Point, 6>;

struct LandmarkFrame {
  std::int64_t frame_index = 0;
  double timestamp_ms = 0.0;
  EyeLandmarks left_eye{};
  EyeLandmarks right_eye{};
};

struct EarSample {
  std::int64_t frame_index = 0;
  double timestamp_ms = 0.0;
  double ear = 0.0;
  bool single_eye = false;    // one eye was degenerate, the other one was used
  bool interpolated = false;  // filled in by gap repair
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Eye aspect ratio: (|p2-p6| + |p3-p5|) / |p1-p4|.
inline double compute_ear(const EyeLandmarks& eye) {
  const double width = distance(eye[0], eye[3]);
  if (!(width > 0.0) || !std::isfinite(width))
    throw DegenerateEyeError("degenerate eye: corner landmarks p1 and p4 coincide");
  const double ear = (distance(eye[1], eye[5]) + distance(eye[2], eye[4])) / width;
  if (!std::isfinite(ear)) throw DegenerateEyeError("degenerate eye: non-finite EAR");
  return ear;
}

/// Binocular EAR: mean of both eyes, falling back to the healthy eye (and
/// setting `single_eye`) when one of them is degenerate.
inline EarSample frame_ear(const LandmarkFrame& frame) {
  EarSample s;
  s.frame_index = frame.frame_index;
  s.timestamp_ms = frame.timestamp_ms;
  std::optional<double> left, right;
  try {
    left = compute_ear(frame.left_eye);
  } catch (const DegenerateEyeError&) {
  }
  try {
    right = compute_ear(frame.right_eye);
  } catch (const DegenerateEyeError&) {
  }
  if (left && right) {
    s.ear = 0.5 * (*left + *right);
  } else if (left || right) {
    s.ear = left ? *left : *right;
    s.single_eye = true;
  } else {
    throw DegenerateEyeError("frame " + std::to_string(frame.frame_index) +
                             ": both eyes degenerate");
  }
  return s;
}

/// The per-frame EAR signal. Samples are sorted by frame index; after gap
/// repair each segment is contiguous in frame index.
struct EarSeries {
  std::vector<EarSample> samples;
  double fps = 30.0;
  /// Index into `samples` of the first sample of each contiguous segment.
  /// Empty series have no segments.
  std::vector<std::size_t> segment_starts;

  [[nodiscard]] std::size_t size() const noexcept { return samples.size(); }
  [[nodiscard]] bool empty() const noexcept { return samples.empty(); }

  [[nodiscard]] std::vector<double> values() const {
    std::vector<double> v;
    v.reserve(samples.size());
    for (const auto& s : samples) v.push_back(s.ear);
    return v;
  }

  [[nodiscard]] std::vector<std::span<const EarSample>> segments() const {
    std::vector<std::span<const EarSample>> out;
    for (std::size_t k = 0; k < segment_starts.size(); ++k) {
      const std::size_t b = segment_starts[k];
      const std::size_t e = k + 1 < segment_starts.size() ? segment_starts[k + 1] : samples.size();
      out.emplace_back(samples.data() + b, e - b);
    }
    return out;
  }

  /// Position of `frame` in `samples`, if present.
  [[nodiscard]] std::optional<std::size_t> find(std::int64_t frame) const {
    auto it = std::lower_bound(samples.begin(), samples.end(), frame,
                               [](const EarSample& s, std::int64_t f) { return s.frame_index < f; });
    if (it == samples.end() || it->frame_index != frame) return std::nullopt;
    return static_cast<std::size_t>(it - samples.begin());
  }

  [[nodiscard]] double ear_at(std::int64_t frame) const {
    auto pos = find(frame);
    if (!pos) throw PreconditionError("frame " + std::to_string(frame) + " not in EAR series");
    return samples[*pos].ear;
  }

  /// Convenience constructor for a contiguous series starting at frame 0.
  static EarSeries from_values(std::span<const double> ears, double fps = 30.0) {
    EarSeries s;
    s.fps = fps;
    s.samples.reserve(ears.size());
    for (std::size_t i = 0; i < ears.size(); ++i) {
      s.samples.push_back({static_cast<std::int64_t>(i), 1000.0 * static_cast<double>(i) / fps,
                           ears[i], false, false});
    }
    if (!ears.empty()) s.segment_starts.push_back(0);
    return s;
  }
};

enum class StreamFormat { automatic, landmarks, ear };

struct ParseReport {
  std::size_t rows = 0;        // data rows read
  std::size_t dropped = 0;     // frames with both eyes degenerate
  std::size_t single_eye = 0;  // frames that fell back to one eye
  std::size_t repaired = 0;    // frames synthesized by gap interpolation
  std::size_t segments = 0;    // contiguous segments after repair
};

struct LoadedStream {
  EarSeries series;
  ParseReport report;
  StreamFormat format = StreamFormat::ear;
};

inline constexpr std::string_view kLandmarkTag = "# blinkwise-landmarks v1";
inline constexpr std::string_view kEarTag = "# blinkwise-ear v1";
inline constexpr std::string_view kEarHeader = "frame,ts_ms,ear";
inline constexpr std::size_t kMaxRepairGap = 5;

inline std::string landmark_header() {
  std::string h = "frame,ts_ms";
  for (char side : {'l', 'r'})
    for (int i = 1; i <= 6; ++i) {
      h += ',';
      h += side;
      h += 'x' + std::to_string(i);
      h += ',';
      h += side;
      h += 'y' + std::to_string(i);
    }
  return h;
}

/// Sorts samples, interpolates gaps of at most `max_gap` missing frames and
/// splits the series at longer gaps.
inline EarSeries repair_gaps(std::vector<EarSample> samples, ParseReport& report,
                             std::size_t max_gap = kMaxRepairGap) {
  std::stable_sort(samples.begin(), samples.end(),
                   [](const EarSample& a, const EarSample& b) { return a.frame_index < b.frame_index; });
  EarSeries out;
  out.samples.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& cur = samples[i];
    if (i == 0) {
      out.segment_starts.push_back(0);
    } else {
      const auto& prev = samples[i - 1];
      const std::int64_t missing = cur.frame_index - prev.frame_index - 1;
      if (missing > 0 && static_cast<std::size_t>(missing) <= max_gap) {
        for (std::int64_t k = 1; k <= missing; ++k) {
          const double a = static_cast<double>(k) / static_cast<double>(missing + 1);
          EarSample fill;
          fill.frame_index = prev.frame_index + k;
          fill.timestamp_ms = prev.timestamp_ms + a * (cur.timestamp_ms - prev.timestamp_ms);
          fill.ear = prev.ear + a * (cur.ear - prev.ear);
          fill.interpolated = true;
          out.samples.push_back(fill);
          ++report.repaired;
        }
      } else if (missing > 0) {
        out.segment_starts.push_back(out.samples.size());
      }
    }
    out.samples.push_back(cur);
  }
  report.segments = out.segment_starts.size();
  if (out.samples.size() >= 2) {
    const auto& a = out.samples.front();
    const auto& b = out.samples.back();
    const double span_ms = b.timestamp_ms - a.timestamp_ms;
    if (span_ms > 0.0)
      out.fps = 1000.0 * static_cast<double>(b.frame_index - a.frame_index) / span_ms;
  }
  return out;
}

namespace detail {

inline void check_increasing(std::vector<std::pair<std::int64_t, std::size_t>>& seen) {
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 1; i < seen.size(); ++i)
    if (seen[i].first == seen[i - 1].first)
      throw FormatError("duplicate frame index " + std::to_string(seen[i].first),
                        std::max(seen[i].second, seen[i - 1].second));
}

inline std::int64_t parse_frame(std::string_view s, std::size_t line) {
  auto f = text::parse_int(s, line);
  if (f < 0) throw FormatError("negative frame index", line);
  return f;
}

inline double parse_timestamp(std::string_view s, std::size_t line) {
  auto t = text::parse_real(s, line);
  if (!std::isfinite(t) || t < 0.0) throw FormatError("timestamp must be finite and >= 0", line);
  return t;
}

}  // namespace detail

/// Parses landmark rows into frames (no EAR computation).
inline std::vector<LandmarkFrame> parse_landmarks(std::string_view content) {
  std::vector<LandmarkFrame> frames;
  bool header_seen = false;
  const std::string header = landmark_header();
  for (const auto& [no, raw] : text::lines(content)) {
    auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (!header_seen) {
      if (line != header) throw FormatError("expected landmark header '" + header + "'", no);
      header_seen = true;
      continue;
    }
    auto cols = text::split(line, ',');
    if (cols.size() != 26)
      throw FormatError("expected 26 columns (frame, ts_ms, 24 coordinates), got " +
                            std::to_string(cols.size()),
                        no);
    LandmarkFrame f;
    f.frame_index = detail::parse_frame(cols[0], no);
    f.timestamp_ms = detail::parse_timestamp(cols[1], no);
    for (std::size_t p = 0; p < 6; ++p) {
      f.left_eye[p] = {text::parse_real(cols[2 + 2 * p], no), text::parse_real(cols[3 + 2 * p], no)};
      f.right_eye[p] = {text::parse_real(cols[14 + 2 * p], no), text::parse_real(cols[15 + 2 * p], no)};
    }
    for (const auto& eye : {f.left_eye, f.right_eye})
      for (const auto& pt : eye)
        if (!std::isfinite(pt.x) || !std::isfinite(pt.y)) throw FormatError("non-finite coordinate", no);
    frames.push_back(f);
  }
  return frames;
}

inline StreamFormat detect_format(std::string_view content) {
  for (const auto& [no, raw] : text::lines(content)) {
    auto line = text::trim(raw);
    if (line.empty()) continue;
    if (line == kLandmarkTag) return StreamFormat::landmarks;
    if (line == kEarTag) return StreamFormat::ear;
    if (line.front() == '#') {
      if (line.starts_with("# blinkwise-"))
        throw FormatError("unsupported format tag '" + std::string(line) + "'", no);
      continue;
    }
    if (line == kEarHeader) return StreamFormat::ear;
    if (line == landmark_header()) return StreamFormat::landmarks;
    throw FormatError("unsupported format: unrecognized header '" + std::string(line) + "'", no);
  }
  return StreamFormat::ear;
}

/// Parses either input format into an EAR series with gap repair applied.
inline LoadedStream parse_stream(std::string_view content, StreamFormat format = StreamFormat::automatic) {
  LoadedStream result;
  if (format == StreamFormat::automatic) format = detect_format(content);
  result.format = format;

  std::vector<EarSample> samples;
  std::vector<std::pair<std::int64_t, std::size_t>> seen;

  if (format == StreamFormat::landmarks) {
    // Line numbers are needed for duplicate detection, so walk lines here too.
    std::size_t data_line = 0;
    std::vector<std::size_t> line_numbers;
    bool header_seen = false;
    for (const auto& [no, raw] : text::lines(content)) {
      auto line = text::trim(raw);
      if (line.empty() || line.front() == '#') continue;
      if (!header_seen) {
        header_seen = true;
        continue;
      }
      line_numbers.push_back(no);
    }
    auto frames = parse_landmarks(content);
    for (const auto& f : frames) {
      ++result.report.rows;
      seen.emplace_back(f.frame_index, line_numbers[data_line++]);
      try {
        auto s = frame_ear(f);
        if (s.single_eye) ++result.report.single_eye;
        samples.push_back(s);
      } catch (const DegenerateEyeError&) {
        ++result.report.dropped;
      }
    }
  } else {
    bool header_seen = false;
    for (const auto& [no, raw] : text::lines(content)) {
      auto line = text::trim(raw);
      if (line.empty() || line.front() == '#') continue;
      if (!header_seen) {
        if (line != kEarHeader) throw FormatError("expected EAR header 'frame,ts_ms,ear'", no);
        header_seen = true;
        continue;
      }
      auto cols = text::split(line, ',');
      if (cols.size() != 3) throw FormatError("expected 3 columns, got " + std::to_string(cols.size()), no);
      EarSample s;
      s.frame_index = detail::parse_frame(cols[0], no);
      s.timestamp_ms = detail::parse_timestamp(cols[1], no);
      s.ear = text::parse_real(cols[2], no);
      if (!std::isfinite(s.ear) || s.ear < 0.0) throw FormatError("EAR must be finite and >= 0", no);
      ++result.report.rows;
      seen.emplace_back(s.frame_index, no);
      samples.push_back(s);
    }
  }
  detail::check_increasing(seen);
  result.series = repair_gaps(std::move(samples), result.report);
  return result;
}

inline LoadedStream load_stream(const std::string& path, StreamFormat format = StreamFormat::automatic) {
  return parse_stream(text::read_file(path), format);
}

/// EAR file text. `comments` are written verbatim after the version tag
/// (each should start with '#').
inline std::string serialize_ear(const EarSeries& series, std::span<const std::string> comments = {}) {
  std::string out;
  out.reserve(32 * series.size() + 64);
  out += kEarTag;
  out += '\n';
  for (const auto& c : comments) {
    out += c;
    out += '\n';
  }
  out += kEarHeader;
  out += '\n';
  for (const auto& s : series.samples) {
    out += std::to_string(s.frame_index);
    out += ',';
    out += text::format_real(s.timestamp_ms);
    out += ',';
    out += text::format_real(s.ear);
    out += '\n';
  }
  return out;
}

inline std::string serialize_landmarks(std::span<const LandmarkFrame> frames,
                                       std::span<const std::string> comments = {}) {
  std::string out;
  out += kLandmarkTag;
  out += '\n';
  for (const auto& c : comments) {
    out += c;
    out += '\n';
  }
  out += landmark_header();
  out += '\n';
  for (const auto& f : frames) {
    out += std::to_string(f.frame_index);
    out += ',';
    out += text::format_real(f.timestamp_ms);
    for (const auto* eye : {&f.left_eye, &f.right_eye})
      for (const auto& p : *eye) {
        out += ',';
        out += text::format_real(p.x);
        out += ',';
        out += text::format_real(p.y);
      }
    out += '\n';
  }
  return out;
}

}  // namespace blinkwise

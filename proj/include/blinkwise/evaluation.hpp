#pragma once

// Discretization of the 0..10 score, per-video voting, and the four metrics:
// sequence accuracy (BSA), sequence regression error (BSRE), video accuracy
// (VA) and video regression error (VRE).

#include <array>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blinkwise/errors.hpp"
#include "blinkwise/text.hpp"

namespace blinkwise {

enum class ClassLabel : int { alert = 0, low_vigilant = 1, drowsy = 2 };

inline constexpr std::array<ClassLabel, 3> kClasses = {ClassLabel::alert, ClassLabel::low_vigilant,
                                                       ClassLabel::drowsy};
inline constexpr double kLowerBorder = 3.3;
inline constexpr double kUpperBorder = 6.6;

inline constexpr int index_of(ClassLabel c) { return static_cast<int>(c); }

/// Video label: 0, 5 or 10.
inline constexpr double label_value(ClassLabel c) { return 5.0 * index_of(c); }

inline std::string_view to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::alert: return "alert";
    case ClassLabel::low_vigilant: return "low_vigilant";
    case ClassLabel::drowsy: return "drowsy";
  }
  return "?";
}

inline ClassLabel class_from_label(double label) {
  if (label == 0.0) return ClassLabel::alert;
  if (label == 5.0) return ClassLabel::low_vigilant;
  if (label == 10.0) return ClassLabel::drowsy;
  throw PreconditionError("video label must be 0, 5 or 10, got " + text::format_real(label));
}

/// [0, 3.3) alert, [3.3, 6.6] low vigilant, (6.6, 10] drowsy.
inline ClassLabel discretize(double out) {
  if (!(out >= 0.0 && out <= 10.0)) throw PreconditionError("score out of range [0,10]: " + text::format_real(out));
  if (out < kLowerBorder) return ClassLabel::alert;
  if (out <= kUpperBorder) return ClassLabel::low_vigilant;
  return ClassLabel::drowsy;
}

/// Most frequent class; ties go to the drowsier class.
inline ClassLabel vote(std::span<const ClassLabel> classes) {
  if (classes.empty()) throw PreconditionError("vote: no sequences");
  std::array<std::size_t, 3> counts{};
  for (auto c : classes) ++counts[static_cast<std::size_t>(index_of(c))];
  std::size_t best = 0;
  for (std::size_t k = 1; k < counts.size(); ++k)
    if (counts[k] >= counts[best]) best = k;
  return kClasses[best];
}

/// Border of the true class's interval closest to `out`.
inline double nearest_border(double out, ClassLabel truth) {
  switch (truth) {
    case ClassLabel::alert: return kLowerBorder;
    case ClassLabel::drowsy: return kUpperBorder;
    case ClassLabel::low_vigilant:
      return std::abs(out - kLowerBorder) <= std::abs(out - kUpperBorder) ? kLowerBorder : kUpperBorder;
  }
  return kLowerBorder;
}

/// Squared distance to the nearest true border when misclassified, else 0.
inline double border_error(double out, ClassLabel truth) {
  if (discretize(out) == truth) return 0.0;
  const double d = out - nearest_border(out, truth);
  return d * d;
}

inline void check_aligned(std::size_t a, std::size_t b) {
  if (a != b) throw PreconditionError("metric inputs differ in length");
  if (a == 0) throw PreconditionError("metric inputs are empty");
}

inline double bsre(std::span<const double> outs, std::span<const ClassLabel> truth) {
  check_aligned(outs.size(), truth.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) sum += border_error(outs[i], truth[i]);
  return sum / static_cast<double>(outs.size());
}

inline double bsa(std::span<const double> outs, std::span<const ClassLabel> truth) {
  check_aligned(outs.size(), truth.size());
  std::size_t ok = 0;
  for (std::size_t i = 0; i < outs.size(); ++i) ok += discretize(outs[i]) == truth[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(outs.size());
}

struct VideoPrediction {
  std::string video_id;
  ClassLabel truth = ClassLabel::alert;
  std::vector<double> outs;
  std::vector<ClassLabel> classes;
  ClassLabel voted = ClassLabel::alert;
  double mean_out = 0.0;
};

inline VideoPrediction predict_video(std::string video_id, ClassLabel truth, std::vector<double> outs) {
  if (outs.empty()) throw PreconditionError("video '" + video_id + "' has no sequences");
  VideoPrediction v;
  v.video_id = std::move(video_id);
  v.truth = truth;
  v.outs = std::move(outs);
  double sum = 0.0;
  for (double o : v.outs) {
    v.classes.push_back(discretize(o));
    sum += o;
  }
  v.voted = vote(v.classes);
  v.mean_out = sum / static_cast<double>(v.outs.size());
  return v;
}

struct VideoMetrics {
  double vre = 0.0;
  double va = 0.0;
};

/// VA from voted classes; VRE from the distance of each misclassified video's
/// mean score to the nearest border of its true class.
inline VideoMetrics vre_va(std::span<const VideoPrediction> videos) {
  if (videos.empty()) throw PreconditionError("vre_va: no videos");
  VideoMetrics m;
  std::size_t ok = 0;
  for (const auto& v : videos) {
    if (v.voted == v.truth) {
      ++ok;
      continue;
    }
    const double d = v.mean_out - nearest_border(v.mean_out, v.truth);
    m.vre += d * d;
  }
  const auto q = static_cast<double>(videos.size());
  m.vre /= q;
  m.va = static_cast<double>(ok) / q;
  return m;
}

/// Rows are true classes, columns voted classes.
using ConfusionMatrix = std::array<std::array<std::size_t, 3>, 3>;

inline ConfusionMatrix confusion(std::span<const VideoPrediction> videos) {
  ConfusionMatrix c{};
  for (const auto& v : videos) ++c[static_cast<std::size_t>(index_of(v.truth))][static_cast<std::size_t>(index_of(v.voted))];
  return c;
}

inline std::size_t total(const ConfusionMatrix& c) {
  std::size_t n = 0;
  for (const auto& r : c)
    for (auto x : r) n += x;
  return n;
}

inline double accuracy_from_confusion(const ConfusionMatrix& c) {
  const auto n = total(c);
  if (n == 0) return 0.0;
  return static_cast<double>(c[0][0] + c[1][1] + c[2][2]) / static_cast<double>(n);
}

struct MetricReport {
  double bsre = 0.0;
  double vre = 0.0;
  double bsa = 0.0;
  double va = 0.0;
  ConfusionMatrix confusion{};
  std::size_t sequences = 0;
  std::size_t videos = 0;
};

inline MetricReport evaluate_videos(std::span<const VideoPrediction> videos) {
  std::vector<double> outs;
  std::vector<ClassLabel> truth;
  for (const auto& v : videos)
    for (double o : v.outs) {
      outs.push_back(o);
      truth.push_back(v.truth);
    }
  MetricReport r;
  r.bsre = bsre(outs, truth);
  r.bsa = bsa(outs, truth);
  const auto vm = vre_va(videos);
  r.vre = vm.vre;
  r.va = vm.va;
  r.confusion = confusion(videos);
  r.sequences = outs.size();
  r.videos = videos.size();
  return r;
}

/// Arithmetic mean of the four metrics; counts and confusion are summed.
inline MetricReport average_reports(std::span<const MetricReport> folds) {
  if (folds.empty()) throw PreconditionError("average_reports: no folds");
  MetricReport a;
  for (const auto& f : folds) {
    a.bsre += f.bsre;
    a.vre += f.vre;
    a.bsa += f.bsa;
    a.va += f.va;
    a.sequences += f.sequences;
    a.videos += f.videos;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) a.confusion[r][c] += f.confusion[r][c];
  }
  const auto n = static_cast<double>(folds.size());
  a.bsre /= n;
  a.vre /= n;
  a.bsa /= n;
  a.va /= n;
  return a;
}

// ---------------------------------------------------------------------------
// Report rendering

/// Reference numbers printed next to the measured ones: the published
/// HM-LSTM results and the human-judgment baseline on the full dataset.
namespace reference {
inline constexpr double kModelBsre = 1.90, kModelVre = 1.14, kModelBsa = 0.54, kModelVa = 0.652;
inline constexpr double kHumanVre = 2.01, kHumanVa = 0.578;
inline constexpr std::array<double, 5> kModelFoldVa = {0.64, 0.61, 0.70, 0.64, 0.67};
inline constexpr std::array<double, 5> kModelFoldVre = {2.42, 1.04, 0.58, 0.85, 0.81};
inline constexpr std::array<double, 5> kHumanFoldVa = {0.62, 0.59, 0.60, 0.53, 0.55};
inline constexpr std::array<double, 5> kHumanFoldVre = {1.37, 2.3, 1.96, 2.32, 2.07};
}  // namespace reference

inline std::string report_key_values(const MetricReport& r, const std::string& prefix) {
  std::string out;
  auto kv = [&](const std::string& k, const std::string& v) { out += prefix + k + '=' + v + '\n'; };
  kv("bsre", text::format_real(r.bsre));
  kv("vre", text::format_real(r.vre));
  kv("bsa", text::format_real(r.bsa));
  kv("va", text::format_real(r.va));
  kv("sequences", std::to_string(r.sequences));
  kv("videos", std::to_string(r.videos));
  for (std::size_t i = 0; i < 3; ++i) {
    std::string row;
    for (std::size_t j = 0; j < 3; ++j) row += (j ? "," : "") + std::to_string(r.confusion[i][j]);
    kv("confusion." + std::string(to_string(kClasses[i])), row);
  }
  return out;
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Human-readable table with BSRE, VRE, BSA, VA columns.
inline std::string report_table(std::span<const MetricReport> folds, const MetricReport& average) {
  std::string out = "model                    BSRE    VRE     BSA     VA\n";
  auto row = [&](const std::string& name, const std::string& a, const std::string& b, const std::string& c,
                 const std::string& d) {
    std::string line = name;
    line.resize(24, ' ');
    for (const auto* s : {&a, &b, &c, &d}) {
      std::string cell = *s;
      cell.resize(8, ' ');
      line += cell;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + '\n';
  };
  auto pct = [](double v) { return fixed(100.0 * v, 1) + "%"; };
  for (std::size_t k = 0; k < folds.size(); ++k)
    row("fold " + std::to_string(k + 1), fixed(folds[k].bsre, 2), fixed(folds[k].vre, 2), pct(folds[k].bsa),
        pct(folds[k].va));
  row("average", fixed(average.bsre, 2), fixed(average.vre, 2), pct(average.bsa), pct(average.va));
  row("published HM-LSTM", fixed(reference::kModelBsre, 2), fixed(reference::kModelVre, 2),
      pct(reference::kModelBsa), pct(reference::kModelVa));
  row("human judgment", "|", fixed(reference::kHumanVre, 2), "|", pct(reference::kHumanVa));
  out += "\nconfusion (rows true, columns voted; counts | row fractions)\n";
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t n = 0;
    for (auto x : average.confusion[i]) n += x;
    std::string line(to_string(kClasses[i]));
    line.resize(14, ' ');
    for (auto x : average.confusion[i]) line += std::to_string(x) + ' ';
    line += "|";
    for (auto x : average.confusion[i]) line += ' ' + fixed(n ? static_cast<double>(x) / static_cast<double>(n) : 0.0, 3);
    out += line + '\n';
  }
  return out;
}

}  // namespace blinkwise

#pragma once

// Dataset manifests, per-subject calibration, and the k-fold protocol.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "blinkwise/blink_detector.hpp"
#include "blinkwise/blink_features.hpp"
#include "blinkwise/errors.hpp"
#include "blinkwise/evaluation.hpp"
#include "blinkwise/landmark_io.hpp"
#include "blinkwise/model_io.hpp"
#include "blinkwise/sequence_model.hpp"
#include "blinkwise/text.hpp"
#include "blinkwise/training.hpp"

namespace blinkwise {

inline constexpr std::string_view kManifestTag = "# blinkwise-manifest v1";
inline constexpr std::string_view kManifestHeader = "subject_id,video_id,label,path,fold";
inline constexpr int kFolds = 5;

struct ManifestEntry {
  std::string subject_id;
  std::string video_id;
  ClassLabel label = ClassLabel::alert;
  std::string path;  // relative to the manifest's directory unless absolute
  int fold = 1;
};

/// The tag line is optional so that plain RLDD listings load as-is; the
/// header row is optional too.
inline std::vector<ManifestEntry> parse_manifest(std::string_view content) {
  std::vector<ManifestEntry> out;
  std::set<std::string> ids;
  for (const auto& l : text::lines(content)) {
    auto t = text::trim(l.content);
    if (t.empty() || t.front() == '#') continue;
    if (t == kManifestHeader) continue;
    auto f = text::split(t, ',');
    if (f.size() != 5) throw FormatError("manifest rows need 5 fields: " + std::string(kManifestHeader), l.number);
    ManifestEntry e;
    e.subject_id = std::string(text::trim(f[0]));
    e.video_id = std::string(text::trim(f[1]));
    e.path = std::string(text::trim(f[3]));
    if (e.subject_id.empty() || e.video_id.empty() || e.path.empty())
      throw FormatError("empty subject, video or path", l.number);
    try {
      e.label = class_from_label(text::parse_real(text::trim(f[2]), l.number));
    } catch (const PreconditionError& err) {
      throw FormatError(err.what(), l.number);
    }
    e.fold = static_cast<int>(text::parse_int(text::trim(f[4]), l.number));
    if (e.fold < 1 || e.fold > kFolds) throw FormatError("fold must be 1..5", l.number);
    if (!ids.insert(e.video_id).second) throw FormatError("duplicate video id '" + e.video_id + "'", l.number);
    out.push_back(std::move(e));
  }
  if (out.empty()) throw FormatError("manifest lists no videos");
  return out;
}

inline std::string serialize_manifest(std::span<const ManifestEntry> entries, std::span<const std::string> comments = {}) {
  std::string out(kManifestTag);
  out += '\n';
  for (const auto& c : comments) out += c + '\n';
  out += std::string(kManifestHeader) + '\n';
  for (const auto& e : entries)
    out += e.subject_id + ',' + e.video_id + ',' + text::format_real(label_value(e.label)) + ',' + e.path + ',' +
           std::to_string(e.fold) + '\n';
  return out;
}

/// Subject to fold map; a subject must sit in exactly one fold and every
/// fold must hold at least one subject.
struct FoldSpec {
  std::map<std::string, int> fold_of;

  static FoldSpec from_manifest(std::span<const ManifestEntry> entries) {
    FoldSpec s;
    for (const auto& e : entries) {
      auto [it, fresh] = s.fold_of.emplace(e.subject_id, e.fold);
      if (!fresh && it->second != e.fold)
        throw PreconditionError("subject '" + e.subject_id + "' appears in folds " + std::to_string(it->second) +
                                " and " + std::to_string(e.fold));
    }
    for (int k = 1; k <= kFolds; ++k)
      if (std::none_of(s.fold_of.begin(), s.fold_of.end(), [k](const auto& kv) { return kv.second == k; }))
        throw PreconditionError("fold " + std::to_string(k) + " has no subjects");
    return s;
  }
};

/// Raw (unnormalized) features of one video.
struct VideoRecord {
  ManifestEntry entry;
  std::vector<BlinkFeatureVector> features;
};

/// Accepts a feature file, or an EAR/landmark stream that goes through
/// detection and extraction first.
inline std::vector<BlinkFeatureVector> load_video_features(const std::string& path, const DetectorConfig& detector) {
  const auto content = text::read_file(path);
  const std::string_view whole = content;
  const auto first = text::trim(whole.substr(0, whole.find('\n')));
  if (first == kFeaturesTag) return parse_features(content);
  const auto loaded = parse_stream(content);
  return extract_features(detect_blinks(loaded.series, detector), loaded.series);
}

inline std::vector<VideoRecord> load_records(std::span<const ManifestEntry> entries, const std::filesystem::path& base,
                                             const DetectorConfig& detector = {}) {
  std::vector<VideoRecord> out;
  for (const auto& e : entries) {
    std::filesystem::path p(e.path);
    if (p.is_relative()) p = base / p;
    try {
      out.push_back({e, load_video_features(p.string(), detector)});
    } catch (const FormatError& err) {
      throw FormatError(p.string() + ": " + err.what());
    }
  }
  return out;
}

/// Calibrated features of one video, ready for global standardization.
struct PreparedVideo {
  std::string subject_id;
  std::string video_id;
  ClassLabel truth = ClassLabel::alert;
  int fold = 1;
  std::vector<BlinkFeatureVector> features;
};

struct PreparedDataset {
  std::vector<PreparedVideo> videos;
  std::map<std::string, CalibrationStats> calibration;
};

/// Each subject is calibrated on the first third of its first alert video;
/// those blinks are then removed from that video.
inline PreparedDataset prepare(std::span<const VideoRecord> records) {
  std::map<std::string, std::set<ClassLabel>> seen;
  for (const auto& r : records) seen[r.entry.subject_id].insert(r.entry.label);
  for (const auto& [subject, labels] : seen)
    if (labels.size() != kClasses.size())
      throw PreconditionError("subject '" + subject + "' lacks one of the alert, low vigilant or drowsy videos");

  PreparedDataset d;
  std::set<std::string> used_alert;
  for (const auto& r : records) {
    if (r.entry.label != ClassLabel::alert || d.calibration.count(r.entry.subject_id)) continue;
    try {
      d.calibration.emplace(r.entry.subject_id, fit_calibration(r.features));
    } catch (const PreconditionError& e) {
      throw PreconditionError("subject '" + r.entry.subject_id + "': " + e.what());
    }
    used_alert.insert(r.entry.video_id);
  }
  for (const auto& r : records) {
    const auto& cal = d.calibration.at(r.entry.subject_id);
    PreparedVideo v{r.entry.subject_id, r.entry.video_id, r.entry.label, r.entry.fold, {}};
    v.features = used_alert.count(r.entry.video_id) ? normalize(drop_calibration_blinks(r.features, cal), cal)
                                                     : normalize(r.features, cal);
    if (v.features.empty()) throw PreconditionError("video '" + v.video_id + "' has no blinks after calibration");
    d.videos.push_back(std::move(v));
  }
  return d;
}

struct FoldData {
  GlobalStats global;
  std::vector<BlinkSequence> train;
  std::vector<BlinkSequence> test;
};

/// Sequences of the videos in (`held_out`) or outside (`!held_out`) `fold`.
inline std::vector<BlinkSequence> fold_sequences(std::span<const PreparedVideo> videos, int fold, bool held_out,
                                                 const GlobalStats& global, int window, int stride) {
  std::vector<BlinkSequence> out;
  for (const auto& v : videos) {
    if ((v.fold == fold) != held_out) continue;
    auto seqs = make_sequences(apply_global(v.features, global), label_value(v.truth), window, stride, v.video_id,
                               v.subject_id);
    out.insert(out.end(), std::make_move_iterator(seqs.begin()), std::make_move_iterator(seqs.end()));
  }
  return out;
}

inline FoldData assemble_fold(std::span<const PreparedVideo> videos, int fold, const TrainConfig& cfg) {
  std::vector<BlinkFeatureVector> pool;
  for (const auto& v : videos)
    if (v.fold != fold) pool.insert(pool.end(), v.features.begin(), v.features.end());
  if (pool.empty()) throw PreconditionError("fold " + std::to_string(fold) + " leaves no training videos");
  FoldData d;
  d.global = fit_global(pool);
  d.train = fold_sequences(videos, fold, false, d.global, cfg.window, cfg.stride);
  d.test = fold_sequences(videos, fold, true, d.global, cfg.window, cfg.stride);
  if (d.train.empty() || d.test.empty()) throw PreconditionError("fold " + std::to_string(fold) + " is empty");
  return d;
}

/// Groups per-sequence outputs by video in first-appearance order.
inline std::vector<VideoPrediction> predict_videos(std::span<const BlinkSequence> seqs, std::span<const double> outs) {
  if (seqs.size() != outs.size()) throw PreconditionError("predict_videos: size mismatch");
  std::vector<std::string> order;
  std::map<std::string, std::pair<ClassLabel, std::vector<double>>> grouped;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    auto [it, fresh] = grouped.try_emplace(seqs[i].video_id, class_from_label(seqs[i].label), std::vector<double>{});
    if (fresh) order.push_back(seqs[i].video_id);
    it->second.second.push_back(outs[i]);
  }
  std::vector<VideoPrediction> out;
  for (const auto& id : order) out.push_back(predict_video(id, grouped[id].first, std::move(grouped[id].second)));
  return out;
}

inline std::vector<VideoPrediction> evaluate_checkpoint(const Checkpoint& ck, std::span<const BlinkSequence> seqs) {
  const auto outs = predict(seqs, ck.params);
  return predict_videos(seqs, outs);
}

struct FoldResult {
  int fold = 0;
  MetricReport report;
  std::vector<VideoPrediction> videos;
  Checkpoint checkpoint;
  std::vector<EpochLog> epochs;
};

inline FoldResult run_fold(std::span<const PreparedVideo> videos, int fold, const TrainConfig& cfg,
                           const ModelConfig& model) {
  auto data = assemble_fold(videos, fold, cfg);
  auto trained = train(data.train, cfg, model);
  FoldResult r;
  r.fold = fold;
  r.checkpoint = {std::move(trained.params), data.global};
  r.epochs = std::move(trained.epochs);
  r.videos = evaluate_checkpoint(r.checkpoint, data.test);
  r.report = evaluate_videos(r.videos);
  return r;
}

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  MetricReport average;
};

/// Folds run on up to `jobs` threads; results land in fold order, so the
/// output does not depend on scheduling.
inline CrossValidationResult crossvalidate(std::span<const VideoRecord> records, const TrainConfig& cfg,
                                           const ModelConfig& model, int jobs = 1) {
  std::vector<ManifestEntry> entries;
  for (const auto& r : records) entries.push_back(r.entry);
  FoldSpec::from_manifest(entries);
  const auto data = prepare(records);

  CrossValidationResult out;
  out.folds.resize(kFolds);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  auto worker = [&] {
    for (int k; (k = next.fetch_add(1)) < kFolds;) {
      try {
        out.folds[static_cast<std::size_t>(k)] = run_fold(data.videos, k + 1, cfg, model);
      } catch (...) {
        std::lock_guard lock(failure_lock);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::clamp(jobs, 1, kFolds);
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < n; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<MetricReport> reports;
  for (const auto& f : out.folds) reports.push_back(f.report);
  out.average = average_reports(reports);
  return out;
}

}  // namespace blinkwise

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "blinkwise/crossvalidate.hpp"
#include "blinkwise/synthetic.hpp"

using namespace blinkwise;

namespace {

constexpr std::string_view kRldd =
    "subject_id,video_id,label,path,fold\n"
    "01,01_0,0,Fold1_part1/01/0.mov,1\n"
    "01,01_5,5,Fold1_part1/01/5.mov,1\n"
    "01,01_10,10,Fold1_part1/01/10.mov,1\n";

std::vector<BlinkFeatureVector> fake_features(std::size_t n, ClassLabel c, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  const double shift = index_of(c);
  std::vector<BlinkFeatureVector> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].values = {8.0 + 3.0 * shift + noise(rng), 0.2 + 0.01 * noise(rng), 0.035 - 0.01 * shift + 0.002 * noise(rng),
                     1.0 + 0.1 * noise(rng)};
    out[i].blink_idx = static_cast<std::int64_t>(i);
  }
  return out;
}

std::vector<VideoRecord> fake_records(std::size_t subjects, std::size_t blinks) {
  std::mt19937_64 rng(7);
  std::vector<VideoRecord> out;
  for (std::size_t s = 0; s < subjects; ++s)
    for (auto c : kClasses) {
      ManifestEntry e{subject_name(s), subject_name(s) + "_" + std::to_string(index_of(c)), c, "unused",
                      static_cast<int>(s % 5) + 1};
      out.push_back({e, fake_features(blinks, c, rng)});
    }
  return out;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.window = 5;
  m.fc1 = 4;
  m.hidden = 4;
  m.layers = 2;
  m.head = 4;
  m.fc2 = 4;
  m.fc3 = 4;
  m.fc4 = 4;
  return m;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.window = 5;
  t.stride = 5;
  t.epochs = 2;
  t.batch_size = 8;
  t.learning_rate = 1e-3;
  return t;
}

}  // namespace

TEST(Manifest, AcceptsRlddListing) {
  auto m = parse_manifest(kRldd);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[2].label, ClassLabel::drowsy);
  EXPECT_EQ(m[1].path, "Fold1_part1/01/5.mov");
  EXPECT_EQ(parse_manifest(serialize_manifest(m)).size(), 3u);
  EXPECT_EQ(serialize_manifest(parse_manifest(serialize_manifest(m))), serialize_manifest(m));
}

TEST(Manifest, Errors) {
  EXPECT_THROW(parse_manifest(""), FormatError);
  EXPECT_THROW(parse_manifest("01,a,0,p\n"), FormatError);
  EXPECT_THROW(parse_manifest("01,a,3,p,1\n"), FormatError);
  EXPECT_THROW(parse_manifest("01,a,0,p,6\n"), FormatError);
  EXPECT_THROW(parse_manifest("01,a,0,p,1\n01,a,5,q,1\n"), FormatError);
  try {
    parse_manifest("01,a,0,p,1\n02,b,x,q,1\n");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(FoldSpec, SubjectsStayInOneFold) {
  auto recs = fake_records(5, 20);
  std::vector<ManifestEntry> entries;
  for (const auto& r : recs) entries.push_back(r.entry);
  EXPECT_NO_THROW(FoldSpec::from_manifest(entries));
  entries[1].fold = entries[0].fold % 5 + 1;
  EXPECT_THROW(FoldSpec::from_manifest(entries), PreconditionError);
  auto four = std::vector<ManifestEntry>(entries.begin() + 3, entries.end());
  EXPECT_THROW(FoldSpec::from_manifest(four), PreconditionError);
}

TEST(Prepare, IncompleteSubjectRejected) {
  auto recs = fake_records(5, 20);
  recs.erase(recs.begin() + 1);
  try {
    prepare(recs);
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("s01"), std::string::npos);
  }
}

TEST(Prepare, CalibrationBlinksExcluded) {
  auto recs = fake_records(5, 30);
  auto d = prepare(recs);
  ASSERT_EQ(d.videos.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& v = d.videos[i];
    EXPECT_EQ(v.video_id, recs[i].entry.video_id);
    if (v.truth == ClassLabel::alert) {
      ASSERT_EQ(v.features.size(), 20u);
      EXPECT_EQ(v.features.front().blink_idx, 10);
    } else {
      EXPECT_EQ(v.features.size(), 30u);
      EXPECT_EQ(v.features.front().blink_idx, 0);
    }
    for (const auto& f : v.features) EXPECT_TRUE(f.normalized);
  }
  EXPECT_EQ(d.calibration.size(), 5u);
  EXPECT_EQ(d.calibration.at("s01").blink_count_used, 10u);
}

TEST(Fold, GlobalStatsFromTrainingFoldsOnly) {
  auto d = prepare(fake_records(5, 30));
  auto fold = assemble_fold(d.videos, 2, tiny_train());
  std::vector<BlinkFeatureVector> pool;
  for (const auto& v : d.videos)
    if (v.fold != 2) pool.insert(pool.end(), v.features.begin(), v.features.end());
  EXPECT_EQ(fold.global.stats.mean, fit_global(pool).stats.mean);
  for (const auto& s : fold.test) EXPECT_EQ(s.subject_id, "s02");
  for (const auto& s : fold.train) EXPECT_NE(s.subject_id, "s02");
}

TEST(PredictVideos, GroupsInFirstAppearanceOrder) {
  std::vector<BlinkSequence> seqs(4);
  const char* ids[] = {"b", "a", "b", "a"};
  for (std::size_t i = 0; i < 4; ++i) {
    seqs[i].video_id = ids[i];
    seqs[i].label = i % 2 ? 0.0 : 10.0;
  }
  std::vector<double> outs = {9.0, 1.0, 8.0, 5.0};
  auto v = predict_videos(seqs, outs);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v[0].video_id, "b");
  EXPECT_EQ(v[0].outs, (std::vector<double>{9.0, 8.0}));
  EXPECT_EQ(v[1].truth, ClassLabel::alert);
  EXPECT_EQ(v[1].voted, ClassLabel::low_vigilant);
}

TEST(CrossValidate, FiveFoldsAndMean) {
  auto recs = fake_records(5, 40);
  auto r = crossvalidate(recs, tiny_train(), tiny_model(), 1);
  ASSERT_EQ(r.folds.size(), 5u);
  double va = 0.0, vre = 0.0, bsa = 0.0, bsre = 0.0;
  for (int k = 0; k < 5; ++k) {
    const auto& f = r.folds[static_cast<std::size_t>(k)];
    EXPECT_EQ(f.fold, k + 1);
    EXPECT_EQ(f.report.videos, 3u);
    EXPECT_EQ(f.epochs.size(), 2u);
    va += f.report.va;
    vre += f.report.vre;
    bsa += f.report.bsa;
    bsre += f.report.bsre;
  }
  EXPECT_DOUBLE_EQ(r.average.va, va / 5);
  EXPECT_DOUBLE_EQ(r.average.vre, vre / 5);
  EXPECT_DOUBLE_EQ(r.average.bsa, bsa / 5);
  EXPECT_DOUBLE_EQ(r.average.bsre, bsre / 5);
  EXPECT_EQ(total(r.average.confusion), 15u);
}

TEST(CrossValidate, ThreadCountDoesNotChangeResults) {
  auto recs = fake_records(5, 40);
  auto a = crossvalidate(recs, tiny_train(), tiny_model(), 1);
  auto b = crossvalidate(recs, tiny_train(), tiny_model(), 3);
  for (std::size_t k = 0; k < 5; ++k)
    EXPECT_EQ(serialize_checkpoint(a.folds[k].checkpoint), serialize_checkpoint(b.folds[k].checkpoint));
  EXPECT_EQ(report_key_values(a.average, ""), report_key_values(b.average, ""));
}

TEST(LoadRecords, EarStreamsAndFeatureFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "blinkwise_cv_test";
  std::filesystem::create_directories(dir);
  auto s = gen_ear_stream(SynthProfile::defaults(), ClassLabel::alert, 12, 30.0, 3);
  {
    std::ofstream(dir / "v.ear") << serialize_ear(s.series);
  }
  auto feats = extract_features(detect_blinks(s.series), s.series);
  {
    std::ofstream(dir / "v.features") << serialize_features(feats);
  }
  std::vector<ManifestEntry> e = {{"s", "a", ClassLabel::alert, "v.ear", 1},
                                  {"s", "b", ClassLabel::alert, (dir / "v.features").string(), 1}};
  auto recs = load_records(e, dir);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].features.size(), feats.size());
  EXPECT_EQ(recs[1].features.size(), feats.size());
  EXPECT_EQ(recs[0].features.back().values, recs[1].features.back().values);
  e[0].path = "missing.ear";
  EXPECT_THROW(load_records(e, dir), IoError);
  std::filesystem::remove_all(dir);
}

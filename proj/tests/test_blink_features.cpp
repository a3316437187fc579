#include <gtest/gtest.h>

#include <random>

#include "blinkwise/blink_detector.hpp"
#include "blinkwise/blink_features.hpp"
#include "blinkwise/landmark_io.hpp"
#include "blinkwise/synthetic.hpp"

using namespace blinkwise;

namespace {

std::vector<BlinkFeatureVector> constant_features(std::size_t n, std::array<double, 4> v) {
  std::vector<BlinkFeatureVector> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].values = v;
    out[i].blink_idx = static_cast<std::int64_t>(i);
  }
  return out;
}

std::vector<BlinkFeatureVector> random_features(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(10, 2), a(0.2, 0.02), v(0.03, 0.01), f(1.0, 0.3);
  std::vector<BlinkFeatureVector> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].values = {d(rng), a(rng), v(rng), f(rng)};
    out[i].blink_idx = static_cast<std::int64_t>(i);
  }
  return out;
}

}  // namespace

TEST(Extract, HandValues) {
  std::vector<double> x(600, 0.30);
  x[105] = 0.10;
  auto series = EarSeries::from_values(x);
  std::vector<BlinkEvent> b = {{100, 105, 110, 0.30, 0.10, 0.30}};
  auto f = extract_features(b, series);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].duration(), 11.0);
  EXPECT_NEAR(f[0].amplitude(), 0.20, 1e-15);
  EXPECT_NEAR(f[0].velocity(), 0.04, 1e-15);
  EXPECT_NEAR(f[0].frequency(), 100.0 / 111.0, 1e-15);
  EXPECT_FALSE(f[0].normalized);
}

TEST(Extract, FrequencyCountsFramesFromStreamStart) {
  auto series = EarSeries::from_values(std::vector<double>(600, 0.3));
  std::vector<BlinkEvent> b;
  for (std::int64_t k = 0; k < 5; ++k) b.push_back({k * 100, k * 100 + 3, k * 100 + 99, 0.3, 0.3, 0.3});
  auto f = extract_features(b, series);
  EXPECT_DOUBLE_EQ(f[4].frequency(), 1.0);  // 5th blink ends at frame 499
}

TEST(Extract, VelocityDenominatorFloor) {
  std::vector<double> x(20, 0.3);
  x[5] = 0.1;
  auto f = extract_features(std::vector<BlinkEvent>{{3, 5, 5, 0.3, 0.1, 0.1}}, EarSeries::from_values(x));
  EXPECT_DOUBLE_EQ(f[0].velocity(), 0.0);
  EXPECT_TRUE(std::isfinite(f[0].velocity()));
}

TEST(Extract, FrequencyMatchesBruteForceCounter) {
  auto profile = SynthProfile::defaults();
  auto s = gen_ear_stream(profile, ClassLabel::drowsy, 40, 30.0, 3);
  auto blinks = detect_blinks(s.series);
  auto f = extract_features(blinks, s.series);
  for (std::size_t i = 0; i < blinks.size(); ++i) {
    std::size_t count = 0;
    for (const auto& other : blinks) count += other.end <= blinks[i].end ? 1 : 0;
    std::size_t frames = 0;
    for (const auto& smp : s.series.samples) frames += smp.frame_index <= blinks[i].end ? 1 : 0;
    EXPECT_DOUBLE_EQ(f[i].frequency(), 100.0 * static_cast<double>(count) / static_cast<double>(frames));
  }
}

TEST(Extract, UnorderedOrMissingFramesRejected) {
  auto series = EarSeries::from_values(std::vector<double>(50, 0.3));
  std::vector<BlinkEvent> unordered = {{20, 22, 25, 0, 0, 0}, {10, 12, 14, 0, 0, 0}};
  EXPECT_THROW(extract_features(unordered, series), PreconditionError);
  std::vector<BlinkEvent> outside = {{45, 48, 60, 0, 0, 0}};
  EXPECT_THROW(extract_features(outside, series), PreconditionError);
}

TEST(Extract, InvariantUnderLandmarkScaling) {
  // Eyes closing and reopening; the same stream at two spatial scales.
  auto make = [](double scale) {
    std::vector<LandmarkFrame> frames;
    for (int t = 0; t < 120; ++t) {
      const int d = std::abs(t - 60);
      const double open = d < 5 ? 0.15 + 0.17 * d : 1.0;
      LandmarkFrame f;
      f.frame_index = t;
      f.timestamp_ms = t * 1000.0 / 30.0;
      EyeLandmarks eye = {{{0, 0}, {1, open}, {3, open}, {4, 0}, {3, -open}, {1, -open}}};
      for (auto& p : eye) p = {p.x * scale + 7, p.y * scale - 2};
      f.left_eye = eye;
      f.right_eye = eye;
      frames.push_back(f);
    }
    return parse_stream(serialize_landmarks(frames)).series;
  };
  DetectorConfig cfg;
  cfg.classifier = ClosedFrameClassifier::make_threshold(0.5);
  auto a = make(1.0), b = make(37.5);
  auto fa = extract_features(detect_blinks(a, cfg), a);
  auto fb = extract_features(detect_blinks(b, cfg), b);
  ASSERT_EQ(fa.size(), 1u);
  ASSERT_EQ(fb.size(), 1u);
  for (std::size_t k = 0; k < kFeatureCount; ++k) EXPECT_NEAR(fa[0].values[k], fb[0].values[k], 1e-9);
}

TEST(Calibration, UsesFirstThird) {
  auto f = random_features(30, 1);
  auto c = fit_calibration(f);
  EXPECT_EQ(c.blink_count_used, 10u);
  double mean = 0.0;
  for (std::size_t i = 0; i < 10; ++i) mean += f[i].values[0];
  EXPECT_NEAR(c.stats.mean[0], mean / 10.0, 1e-12);
  auto rest = drop_calibration_blinks(f, c);
  ASSERT_EQ(rest.size(), 20u);
  EXPECT_EQ(rest.front().blink_idx, 10);
}

TEST(Calibration, ConstantFeatureIsFloored) {
  auto c = fit_calibration(constant_features(9, {8, 0.2, 0.03, 1}));
  EXPECT_EQ(c.stats.stddev[0], kSigmaFloor);
  EXPECT_TRUE(c.stats.any_floored());
}

TEST(Calibration, TooFewBlinks) {
  EXPECT_THROW(fit_calibration(random_features(5, 2)), PreconditionError);
  EXPECT_NO_THROW(fit_calibration(random_features(6, 2)));
}

TEST(Normalize, HandValues) {
  CalibrationStats c;
  c.stats.mean = {10, 10, 10, 10};
  c.stats.stddev = {2, 2, 2, 2};
  auto f = constant_features(1, {10, 12, 7, 10});
  auto n = normalize(f, c);
  EXPECT_EQ(n[0].values[0], 0.0);
  EXPECT_EQ(n[0].values[1], 1.0);
  EXPECT_EQ(n[0].values[2], -1.5);
  EXPECT_TRUE(n[0].normalized);
}

TEST(Normalize, RoundTrip) {
  auto f = random_features(50, 4);
  auto c = fit_calibration(f);
  auto back = normalize(denormalize(normalize(f, c), c), c);
  auto once = normalize(f, c);
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t k = 0; k < kFeatureCount; ++k) EXPECT_NEAR(back[i].values[k], once[i].values[k], 1e-12);
}

TEST(Global, StandardizesTrainingSet) {
  auto f = random_features(500, 5);
  auto g = fit_global(f);
  auto z = apply_global(f, g);
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    double m = 0.0, v = 0.0;
    for (const auto& x : z) m += x.values[k];
    m /= static_cast<double>(z.size());
    for (const auto& x : z) v += (x.values[k] - m) * (x.values[k] - m);
    v /= static_cast<double>(z.size());
    EXPECT_LT(std::abs(m), 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Global, SingleElementAndEmpty) {
  auto g = fit_global(random_features(1, 6));
  for (double s : g.stats.stddev) EXPECT_EQ(s, kSigmaFloor);
  EXPECT_THROW(fit_global(std::vector<BlinkFeatureVector>{}), PreconditionError);
}

TEST(Global, HeldOutDataIsNotRefit) {
  auto g = fit_global(random_features(200, 7));
  auto shifted = random_features(200, 8);
  for (auto& v : shifted) v.values[0] += 5.0;
  auto z = apply_global(shifted, g);
  double m = 0.0;
  for (const auto& v : z) m += v.values[0];
  EXPECT_GT(m / 200.0, 1.0);
}

TEST(FeatureFile, Roundtrip) {
  auto f = random_features(25, 9);
  f[3].normalized = true;
  const auto text = serialize_features(f);
  auto back = parse_features(text);
  ASSERT_EQ(back.size(), f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(back[i].values, f[i].values);
    EXPECT_EQ(back[i].blink_idx, f[i].blink_idx);
    EXPECT_EQ(back[i].normalized, f[i].normalized);
  }
  EXPECT_EQ(serialize_features(back), text);
  EXPECT_THROW(parse_features(std::string(kFeaturesTag) + "\n" + std::string(kFeaturesHeader) + "\n1,2,3\n"),
               FormatError);
}

TEST(CalibrationFile, Roundtrip) {
  auto c = fit_calibration(random_features(30, 10));
  auto back = parse_calibration(serialize_calibration(c));
  EXPECT_EQ(back.stats.mean, c.stats.mean);
  EXPECT_EQ(back.stats.stddev, c.stats.stddev);
  EXPECT_EQ(back.blink_count_used, c.blink_count_used);
}

#include <gtest/gtest.h>

#include "blinkwise/model_io.hpp"

using namespace blinkwise;

namespace {

Checkpoint sample(bool batch_norm = true) {
  ModelConfig cfg;
  cfg.batch_norm = batch_norm;
  Checkpoint ck{init_params(cfg, 11), GlobalStats{}};
  ck.global->stats.mean = {10.5, 0.2, 0.031, 0.9};
  ck.global->stats.stddev = {2.25, 0.02, 0.0099, 0.3};
  if (batch_norm) ck.params.bn2.running_mean(0, 3) = 0.1 + 0.2;
  ck.params.out.b(0, 0) = 1.0 / 3.0;
  return ck;
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  if (at != std::string::npos) s.replace(at, from.size(), to);
  return s;
}

}  // namespace

TEST(Checkpoint, ByteExactRoundTrip) {
  for (bool bn : {true, false}) {
    const auto ck = sample(bn);
    const auto text = serialize_checkpoint(ck, std::vector<std::string>{"# note"});
    const auto back = parse_checkpoint(text);
    EXPECT_EQ(serialize_checkpoint(back, std::vector<std::string>{"# note"}), text);
    EXPECT_EQ(back.params.out.b(0, 0), 1.0 / 3.0);
    ASSERT_TRUE(back.global.has_value());
    EXPECT_EQ(back.global->stats.stddev, ck.global->stats.stddev);
    EXPECT_EQ(back.params.parameter_count(), ck.params.parameter_count());
  }
}

TEST(Checkpoint, PredictionsSurviveRoundTrip) {
  const auto ck = sample();
  const auto back = parse_checkpoint(serialize_checkpoint(ck));
  std::vector<BlinkSequence> seqs(3);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  for (auto& s : seqs) {
    s.features = Matrix(30, 4);
    for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = n(rng);
    s.pad_mask.assign(30, true);
    s.blink_ids.assign(30, 0);
  }
  EXPECT_EQ(predict(seqs, ck.params), predict(seqs, back.params));
}

TEST(Checkpoint, ArchitectureRoundTrips) {
  ModelConfig c;
  c.hidden = 7;
  c.layers = 2;
  c.boundary = BoundaryMode::soft;
  c.bn_momentum = 0.75;
  Checkpoint ck{init_params(c, 3), std::nullopt};
  const auto back = parse_checkpoint(serialize_checkpoint(ck));
  EXPECT_EQ(back.params.config.hidden, 7);
  EXPECT_EQ(back.params.config.layers, 2);
  EXPECT_EQ(back.params.config.boundary, BoundaryMode::soft);
  EXPECT_EQ(back.params.config.bn_momentum, 0.75);
  EXPECT_FALSE(back.global.has_value());
}

TEST(Checkpoint, RejectsDamage) {
  const auto text = serialize_checkpoint(sample());
  EXPECT_THROW(parse_checkpoint(text.substr(text.find('\n') + 1)), FormatError);
  EXPECT_THROW(parse_checkpoint(replace_once(text, "tensor fc2.W 64 64", "tensor fc2.W 64 63")), FormatError);
  EXPECT_THROW(parse_checkpoint(replace_once(text, "tensor fc3.b", "tensor fc9.b")), FormatError);
  EXPECT_THROW(parse_checkpoint(text.substr(0, text.rfind("end"))), FormatError);
  EXPECT_THROW(parse_checkpoint(replace_once(text, "batch_norm=1", "batch_norm=2")), FormatError);
  const auto no_sd = text.substr(0, text.find("global stddev")) + "end\n";
  EXPECT_THROW(parse_checkpoint(no_sd), FormatError);
}

TEST(Checkpoint, MissingTensorIsNamed) {
  const auto text = serialize_checkpoint(sample(false));
  const auto from = text.find("tensor out.b");
  const auto to = text.find("global mean");
  auto cut = text.substr(0, from) + text.substr(to);
  try {
    parse_checkpoint(cut);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("out.b"), std::string::npos);
  }
}

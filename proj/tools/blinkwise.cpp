// Command-line front end: detect, features, calibrate, train, eval, synth,
// throughput. Every command writes a run directory with a config snapshot,
// an inputs digest, its outputs and a log.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "blinkwise/blinkwise.hpp"

namespace fs = std::filesystem;
using namespace blinkwise;

namespace {

constexpr std::string_view kToolVersion = "1.0.0";
constexpr std::string_view kConfigTag = "# blinkwise-config v1";

// ---------------------------------------------------------------------------
// Configuration: defaults, then --config file, then --set, then dedicated flags.

const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> d = [] {
    const DetectorConfig det;
    const TrainConfig tr;
    const ModelConfig m;
    const auto syn = SynthProfile::defaults();
    const DatasetOptions ds;
    using text::format_real;
    return std::map<std::string, std::string>{
        {"detector.classifier", "threshold"},
        {"detector.threshold", format_real(det.classifier.threshold)},
        {"detector.classifier_file", ""},
        {"detector.filter", std::string(to_string(det.filter))},
        {"detector.window", std::to_string(det.window)},
        {"detector.epsilon", format_real(det.epsilon)},
        {"detector.context", std::to_string(det.context)},
        {"train.learning_rate", format_real(tr.learning_rate)},
        {"train.delta", format_real(tr.delta)},
        {"train.batch_size", std::to_string(tr.batch_size)},
        {"train.epochs", std::to_string(tr.epochs)},
        {"train.l2_lambda", format_real(tr.l2_lambda)},
        {"train.window", std::to_string(tr.window)},
        {"train.stride", std::to_string(tr.stride)},
        {"train.seed", std::to_string(tr.seed)},
        {"train.folds", "1,2,3,4,5"},
        {"model.fc1", std::to_string(m.fc1)},
        {"model.hidden", std::to_string(m.hidden)},
        {"model.layers", std::to_string(m.layers)},
        {"model.head", std::to_string(m.head)},
        {"model.fc2", std::to_string(m.fc2)},
        {"model.fc3", std::to_string(m.fc3)},
        {"model.fc4", std::to_string(m.fc4)},
        {"model.batch_norm", m.batch_norm ? "1" : "0"},
        {"model.bn_momentum", format_real(m.bn_momentum)},
        {"model.boundary", std::string(to_string(m.boundary))},
        {"model.boundary_bias_init", format_real(m.boundary_bias_init)},
        {"synth.subjects", std::to_string(ds.subjects)},
        {"synth.videos_per_state", std::to_string(ds.videos_per_state)},
        {"synth.frames", std::to_string(ds.video_frames)},
        {"synth.fps", format_real(ds.fps)},
        {"synth.seed", std::to_string(ds.seed)},
        {"synth.noise", format_real(syn.noise_sigma)},
        {"synth.subject_spread", format_real(syn.subject_spread)},
        {"throughput.repeats", "5"},
        {"throughput.frames", "10000"},
    };
  }();
  return d;
}

class RunConfig {
 public:
  RunConfig() : values_(config_defaults()) {}

  void set(const std::string& key, const std::string& value, std::size_t line = 0) {
    if (!values_.count(key)) throw FormatError("unknown config key '" + key + "'", line);
    values_[key] = value;
  }

  void load_file(const std::string& path) {
    const auto content = text::read_file(path);
    for (const auto& l : text::lines(content)) {
      auto t = text::trim(l.content);
      if (t.empty() || t.front() == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string_view::npos) throw FormatError(path + ": expected 'key = value'", l.number);
      set(std::string(text::trim(t.substr(0, eq))), std::string(text::trim(t.substr(eq + 1))), l.number);
    }
  }

  void apply_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw FormatError("--set expects key=value, got '" + kv + "'");
    set(std::string(text::trim(std::string_view(kv).substr(0, eq))),
        std::string(text::trim(std::string_view(kv).substr(eq + 1))));
  }

  [[nodiscard]] const std::string& str(const std::string& key) const { return values_.at(key); }

  [[nodiscard]] double real(const std::string& key) const {
    try {
      return text::parse_real(str(key), 0);
    } catch (const FormatError&) {
      throw FormatError("config key '" + key + "' expects a number, got '" + str(key) + "'");
    }
  }

  [[nodiscard]] std::int64_t integer(const std::string& key) const {
    try {
      return text::parse_int(str(key), 0);
    } catch (const FormatError&) {
      throw FormatError("config key '" + key + "' expects an integer, got '" + str(key) + "'");
    }
  }

  [[nodiscard]] bool boolean(const std::string& key) const {
    const auto& v = str(key);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw FormatError("config key '" + key + "' expects 0 or 1");
  }

  [[nodiscard]] std::string snapshot() const {
    std::string out(kConfigTag);
    out += '\n';
    for (const auto& [k, v] : values_) out += k + " = " + v + '\n';
    return out;
  }

  [[nodiscard]] std::string digest() const { return text::hex64(text::fnv1a(snapshot())); }

  [[nodiscard]] DetectorConfig detector() const {
    DetectorConfig d;
    const auto& kind = str("detector.classifier");
    if (kind == "threshold") {
      d.classifier = ClosedFrameClassifier::make_threshold(real("detector.threshold"));
    } else if (kind == "linear13") {
      if (str("detector.classifier_file").empty())
        throw PreconditionError("detector.classifier=linear13 needs detector.classifier_file");
      d.classifier = parse_classifier(text::read_file(str("detector.classifier_file")));
    } else {
      throw FormatError("detector.classifier must be threshold or linear13");
    }
    try {
      d.filter = parse_filter(str("detector.filter"));
    } catch (const PreconditionError& e) {
      throw FormatError(e.what());
    }
    d.window = static_cast<int>(integer("detector.window"));
    d.epsilon = real("detector.epsilon");
    d.context = static_cast<std::size_t>(integer("detector.context"));
    if (d.window < 1) throw PreconditionError("detector.window must be positive");
    return d;
  }

  [[nodiscard]] TrainConfig train() const {
    TrainConfig t;
    t.learning_rate = real("train.learning_rate");
    t.delta = real("train.delta");
    t.batch_size = static_cast<int>(integer("train.batch_size"));
    t.epochs = static_cast<int>(integer("train.epochs"));
    t.l2_lambda = real("train.l2_lambda");
    t.window = static_cast<int>(integer("train.window"));
    t.stride = static_cast<int>(integer("train.stride"));
    t.seed = static_cast<std::uint64_t>(integer("train.seed"));
    t.validate();
    return t;
  }

  [[nodiscard]] ModelConfig model() const {
    ModelConfig m;
    m.window = static_cast<int>(integer("train.window"));
    m.fc1 = static_cast<int>(integer("model.fc1"));
    m.hidden = static_cast<int>(integer("model.hidden"));
    m.layers = static_cast<int>(integer("model.layers"));
    m.head = static_cast<int>(integer("model.head"));
    m.fc2 = static_cast<int>(integer("model.fc2"));
    m.fc3 = static_cast<int>(integer("model.fc3"));
    m.fc4 = static_cast<int>(integer("model.fc4"));
    m.batch_norm = boolean("model.batch_norm");
    m.bn_momentum = real("model.bn_momentum");
    m.boundary = parse_boundary_mode(str("model.boundary"));
    m.boundary_bias_init = real("model.boundary_bias_init");
    m.validate();
    return m;
  }

  [[nodiscard]] std::vector<int> folds() const {
    std::vector<int> out;
    for (auto f : text::split(str("train.folds"), ',')) {
      const auto k = text::parse_int(text::trim(f), 0);
      if (k < 1 || k > kFolds) throw FormatError("train.folds entries must be 1..5");
      out.push_back(static_cast<int>(k));
    }
    if (out.empty()) throw FormatError("train.folds is empty");
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Run directory

class Run {
 public:
  Run(const std::string& dir, const RunConfig& cfg, std::string command)
      : dir_(dir), config_(cfg), command_(std::move(command)), started_(std::chrono::steady_clock::now()) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create run directory '" + dir_.string() + "': " + ec.message());
    log_.open(dir_ / "log.txt", std::ios::trunc);
    if (!log_) throw IoError("cannot write '" + (dir_ / "log.txt").string() + "'");
    text::write_file((dir_ / "config.txt").string(), cfg.snapshot());
    log("command " + command_ + ", config " + cfg.digest());
  }

  /// Reads an input file and records its digest.
  std::string read_input(const std::string& path) {
    auto content = text::read_file(path);
    inputs_.emplace_back(path, text::hex64(text::fnv1a(content)));
    return content;
  }

  [[nodiscard]] std::string input_digest() const {
    std::string joined;
    for (const auto& [_, d] : inputs_) joined += d;
    return text::hex64(text::fnv1a(joined));
  }

  [[nodiscard]] std::vector<std::string> provenance(const std::vector<std::string>& extra = {}) const {
    std::vector<std::string> out = {"# tool blinkwise " + std::string(kToolVersion) + " " + command_,
                                    "# config " + config_.digest(), "# input " + input_digest()};
    for (const auto& e : extra) out.push_back("# " + e);
    return out;
  }

  [[nodiscard]] std::string header(const std::vector<std::string>& extra = {}) const {
    std::string out;
    for (const auto& l : provenance(extra)) out += l + '\n';
    return out;
  }

  void write(const std::string& name, std::string_view content) {
    const auto p = dir_ / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    text::write_file(p.string(), content);
    log("wrote " + name);
  }

  void log(const std::string& msg) {
    const auto s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    log_ << '[' << text::format_real(std::round(s * 1000.0) / 1000.0) << "s] " << msg << '\n';
    log_.flush();
  }

  void finish() {
    std::string out = "# blinkwise-inputs v1\npath,digest\n";
    for (const auto& [p, d] : inputs_) out += p + ',' + d + '\n';
    out += "combined," + input_digest() + '\n';
    text::write_file((dir_ / "inputs.txt").string(), out);
    log("done");
  }

  [[nodiscard]] const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  const RunConfig& config_;
  std::string command_;
  std::chrono::steady_clock::time_point started_;
  std::ofstream log_;
  std::vector<std::pair<std::string, std::string>> inputs_;
};

// ---------------------------------------------------------------------------
// Shared option plumbing

struct Common {
  std::string config_file;
  std::string out_dir;
  std::vector<std::string> assignments;
  int jobs = 1;
  // dedicated flag -> config key, filled only when the flag was given
  std::vector<std::pair<CLI::Option*, std::string>> bound;
  std::map<std::string, std::string> flag_values;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "flat key = value config file");
  cmd->add_option("-o,--out-dir", c.out_dir, "run directory for outputs")->required();
  cmd->add_option("--set", c.assignments, "override a config key (key=value), repeatable");
  cmd->add_option("-j,--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
}

void bind(CLI::App* cmd, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  auto* opt = cmd->add_option(flag, c.flag_values[key], help + " (" + key + ")");
  c.bound.emplace_back(opt, key);
}

void add_detector_flags(CLI::App* cmd, Common& c) {
  bind(cmd, c, "--filter", "detector.filter", "smoothing filter: none, median, mean");
  bind(cmd, c, "--window", "detector.window", "smoothing window");
  bind(cmd, c, "--threshold", "detector.threshold", "closed-eye EAR threshold");
  bind(cmd, c, "--classifier", "detector.classifier", "threshold or linear13");
  bind(cmd, c, "--classifier-file", "detector.classifier_file", "linear13 weights file");
  bind(cmd, c, "--epsilon", "detector.epsilon", "derivative flatness tolerance");
}

void add_train_flags(CLI::App* cmd, Common& c) {
  bind(cmd, c, "--epochs", "train.epochs", "training epochs");
  bind(cmd, c, "--lr", "train.learning_rate", "Adam learning rate");
  bind(cmd, c, "--batch-size", "train.batch_size", "mini-batch size");
  bind(cmd, c, "--seed", "train.seed", "initialization and shuffling seed");
  bind(cmd, c, "--folds", "train.folds", "comma-separated test folds");
  bind(cmd, c, "--stride", "train.stride", "sequence stride");
  bind(cmd, c, "--boundary", "model.boundary", "hard or soft boundaries");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.load_file(c.config_file);
  for (const auto& a : c.assignments) cfg.apply_assignment(a);
  for (const auto& [opt, key] : c.bound)
    if (opt->count() > 0) cfg.set(key, c.flag_values.at(key));
  return cfg;
}

std::string detector_note(const RunConfig& cfg) {
  return "detector " + cfg.str("detector.classifier") + " filter=" + cfg.str("detector.filter") +
         " window=" + cfg.str("detector.window") + " epsilon=" + cfg.str("detector.epsilon");
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

// ---------------------------------------------------------------------------
// Commands

struct Streams {
  std::vector<std::string> inputs;
};

int cmd_detect(const Common& c, const Streams& s) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "detect");
  if (!cfg.str("detector.classifier_file").empty()) run.read_input(cfg.str("detector.classifier_file"));
  const auto det = cfg.detector();
  for (const auto& in : s.inputs) {
    const auto loaded = parse_stream(run.read_input(in));
    const auto blinks = detect_blinks(loaded.series, det);
    run.log(in + ": " + std::to_string(loaded.series.size()) + " frames, " + std::to_string(blinks.size()) +
            " blinks, " + std::to_string(loaded.report.repaired) + " repaired, " +
            std::to_string(loaded.report.segments) + " segments");
    run.write(stem(in) + ".blinks.csv", serialize_blinks(blinks, run.provenance({detector_note(cfg)})));
    std::cout << in << ": " << blinks.size() << " blinks\n";
  }
  run.finish();
  return 0;
}

struct FeatureArgs {
  std::vector<std::string> inputs;
  std::string blinks;
};

int cmd_features(const Common& c, const FeatureArgs& a) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "features");
  if (!a.blinks.empty() && a.inputs.size() != 1) throw PreconditionError("--blinks needs exactly one input stream");
  if (!cfg.str("detector.classifier_file").empty()) run.read_input(cfg.str("detector.classifier_file"));
  const auto det = cfg.detector();
  for (const auto& in : a.inputs) {
    const auto loaded = parse_stream(run.read_input(in));
    const auto blinks = a.blinks.empty() ? detect_blinks(loaded.series, det) : parse_blinks(run.read_input(a.blinks));
    const auto features = extract_features(blinks, loaded.series);
    run.log(in + ": " + std::to_string(features.size()) + " feature vectors");
    run.write(stem(in) + ".features.csv", serialize_features(features, run.provenance({detector_note(cfg)})));
    std::cout << in << ": " << features.size() << " blinks\n";
  }
  run.finish();
  return 0;
}

struct CalibrateArgs {
  std::string alert;
  std::vector<std::string> apply;
};

int cmd_calibrate(const Common& c, const CalibrateArgs& a) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "calibrate");
  const auto alert = parse_features(run.read_input(a.alert));
  const auto cal = fit_calibration(alert);
  if (cal.stats.any_floored()) run.log("warning: a calibration feature is constant; sigma floored");
  run.write("calibration.csv", serialize_calibration(cal, run.provenance()));
  for (const auto& f : a.apply) {
    auto feats = parse_features(run.read_input(f));
    if (f == a.alert) feats = drop_calibration_blinks(feats, cal);
    run.write(stem(f) + ".normalized.csv", serialize_features(normalize(feats, cal), run.provenance()));
  }
  std::cout << "calibrated on " << cal.blink_count_used << " blinks\n";
  run.finish();
  return 0;
}

struct ManifestArgs {
  std::string manifest;
  std::string models;
};

std::vector<VideoRecord> load_manifest(Run& run, const std::string& path, const DetectorConfig& det) {
  const auto entries = parse_manifest(run.read_input(path));
  const auto base = fs::path(path).parent_path();
  for (const auto& e : entries) {
    fs::path p(e.path);
    run.read_input((p.is_relative() ? base / p : p).string());
  }
  auto records = load_records(entries, base, det);
  run.log("loaded " + std::to_string(records.size()) + " videos from " + path);
  return records;
}

int cmd_train(const Common& c, const ManifestArgs& a) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "train");
  const auto tcfg = cfg.train();
  const auto mcfg = cfg.model();
  const auto folds = cfg.folds();
  const auto records = load_manifest(run, a.manifest, cfg.detector());
  std::vector<ManifestEntry> entries;
  for (const auto& r : records) entries.push_back(r.entry);
  FoldSpec::from_manifest(entries);
  const auto data = prepare(records);

  struct Outcome {
    Checkpoint checkpoint;
    std::vector<EpochLog> epochs;
    std::size_t train_sequences = 0;
  };
  std::vector<Outcome> outcomes(folds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex lock;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < folds.size();) {
      try {
        auto fold = assemble_fold(data.videos, folds[i], tcfg);
        auto r = train(fold.train, tcfg, mcfg);
        outcomes[i] = {{std::move(r.params), fold.global}, std::move(r.epochs), fold.train.size()};
      } catch (...) {
        std::lock_guard g(lock);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto n = static_cast<std::size_t>(std::clamp<int>(c.jobs, 1, static_cast<int>(folds.size())));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < n; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::string loss = run.header() + "fold,epoch,data_loss,objective\n";
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const auto k = std::to_string(folds[i]);
    const auto& o = outcomes[i];
    for (const auto& e : o.epochs) {
      loss += k + ',' + std::to_string(e.epoch) + ',' + text::format_real(e.data_loss) + ',' +
              text::format_real(e.objective) + '\n';
      run.log("fold " + k + " epoch " + std::to_string(e.epoch) + " loss " + text::format_real(e.data_loss));
    }
    run.write("fold_" + k + ".model",
              serialize_checkpoint(o.checkpoint, run.provenance({"held-out fold " + k, "training sequences " +
                                                                                          std::to_string(o.train_sequences)})));
    std::cout << "fold " << k << ": " << o.train_sequences << " sequences, final loss "
              << (o.epochs.empty() ? 0.0 : o.epochs.back().data_loss) << '\n';
  }
  run.write("loss.csv", loss);
  run.finish();
  return 0;
}

int cmd_eval(const Common& c, const ManifestArgs& a) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "eval");
  const auto stride = static_cast<int>(cfg.integer("train.stride"));
  std::vector<std::pair<int, Checkpoint>> checkpoints;
  for (int k = 1; k <= kFolds; ++k) {
    const auto p = fs::path(a.models) / ("fold_" + std::to_string(k) + ".model");
    if (!fs::exists(p)) continue;
    auto ck = parse_checkpoint(run.read_input(p.string()));
    if (!ck.global) throw PreconditionError(p.string() + " carries no global feature statistics");
    checkpoints.emplace_back(k, std::move(ck));
  }
  if (checkpoints.empty()) throw IoError("no fold_<k>.model files in '" + a.models + "'");
  const auto records = load_manifest(run, a.manifest, cfg.detector());
  const auto data = prepare(records);

  std::vector<MetricReport> reports;
  std::string kv = run.header();
  std::string predictions = run.header() + "fold,video_id,truth,voted,mean_out,sequences\n";
  for (const auto& [k, ck] : checkpoints) {
    const auto seqs = fold_sequences(data.videos, k, true, *ck.global, ck.params.config.window, stride);
    if (seqs.empty()) throw PreconditionError("fold " + std::to_string(k) + " has no test videos");
    const auto videos = evaluate_checkpoint(ck, seqs);
    const auto report = evaluate_videos(videos);
    kv += report_key_values(report, "fold" + std::to_string(k) + ".");
    for (const auto& v : videos)
      predictions += std::to_string(k) + ',' + v.video_id + ',' + std::string(to_string(v.truth)) + ',' +
                     std::string(to_string(v.voted)) + ',' + text::format_real(v.mean_out) + ',' +
                     std::to_string(v.outs.size()) + '\n';
    reports.push_back(report);
  }
  const auto average = average_reports(reports);
  kv += report_key_values(average, "average.");
  const auto table = report_table(reports, average);
  run.write("metrics.txt", kv);
  run.write("predictions.csv", predictions);
  run.write("report.txt", run.header() + table);
  std::cout << table;
  run.finish();
  return 0;
}

int cmd_synth(const Common& c) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "synth");
  auto profile = SynthProfile::defaults();
  profile.noise_sigma = cfg.real("synth.noise");
  profile.subject_spread = cfg.real("synth.subject_spread");
  DatasetOptions opt;
  opt.subjects = static_cast<std::size_t>(cfg.integer("synth.subjects"));
  opt.videos_per_state = static_cast<std::size_t>(cfg.integer("synth.videos_per_state"));
  opt.video_frames = static_cast<std::size_t>(cfg.integer("synth.frames"));
  opt.fps = cfg.real("synth.fps");
  opt.seed = static_cast<std::uint64_t>(cfg.integer("synth.seed"));
  const auto dataset = gen_dataset(profile, opt);
  std::vector<ManifestEntry> entries;
  for (const auto& v : dataset) {
    const auto ear = "videos/" + v.video_id + ".ear";
    entries.push_back({v.subject_id, v.video_id, v.state, ear, v.fold});
    run.write(ear, serialize_ear(v.stream.series, run.provenance()));
    run.write("truth/" + v.video_id + ".truth", serialize_truth(v.stream.truth, run.provenance()));
  }
  run.write("manifest.csv", serialize_manifest(entries, run.provenance()));
  std::cout << dataset.size() << " videos, " << opt.subjects << " subjects\n";
  run.finish();
  return 0;
}

struct FitArgs {
  std::string stream;
  std::string truth;
};

int cmd_fit_classifier(const Common& c, const FitArgs& a) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "fit-classifier");
  const auto loaded = parse_stream(run.read_input(a.stream));
  const auto truth = parse_truth(run.read_input(a.truth));
  if (loaded.series.segments().size() != 1) throw PreconditionError("fit-classifier needs a gap-free stream");
  std::vector<double> ears;
  std::vector<bool> closed;
  const auto first = loaded.series.samples.front().frame_index;
  for (const auto& s : loaded.series.samples) {
    ears.push_back(s.ear);
    const auto f = s.frame_index - first;
    closed.push_back(std::any_of(truth.begin(), truth.end(), [f](const BlinkEvent& b) { return b.start <= f && f <= b.end; }));
  }
  run.write("classifier.txt", serialize_classifier(train_linear13(ears, closed)));
  run.finish();
  return 0;
}

struct ThroughputArgs {
  std::string input;
  std::string model;
};

int cmd_throughput(const Common& c, const ThroughputArgs& a) {
  const auto cfg = resolve(c);
  Run run(c.out_dir, cfg, "throughput");
  EarSeries series;
  if (a.input.empty()) {
    const auto frames = static_cast<std::size_t>(cfg.integer("throughput.frames"));
    series = gen_ear_video(SynthProfile::defaults(), ClassLabel::low_vigilant, frames, 30.0,
                           static_cast<std::uint64_t>(cfg.integer("synth.seed")))
                 .series;
  } else {
    series = parse_stream(run.read_input(a.input)).series;
  }
  Checkpoint ck;
  if (a.model.empty()) {
    ck.params = init_params(cfg.model(), cfg.train().seed);
  } else {
    ck = parse_checkpoint(run.read_input(a.model));
  }
  const auto det = cfg.detector();
  const int window = ck.params.config.window;
  const auto repeats = std::max<std::int64_t>(1, cfg.integer("throughput.repeats"));

  std::vector<double> fps;
  std::size_t blinks = 0, sequences = 0;
  for (std::int64_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto events = detect_blinks(series, det);
    auto features = extract_features(events, series);
    if (features.size() >= kMinCalibrationBlinks * 3) features = normalize(features, fit_calibration(features));
    if (ck.global) features = apply_global(features, *ck.global);
    std::vector<double> outs;
    if (!features.empty()) {
      const auto seqs = make_sequences(features, 0.0, window, 1);
      outs = predict(seqs, ck.params);
      sequences = seqs.size();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    blinks = events.size();
    fps.push_back(series.size() == 0 ? 0.0 : static_cast<double>(series.size()) / std::max(secs, 1e-9));
  }
  double mean = 0.0, var = 0.0;
  for (double f : fps) mean += f;
  mean /= static_cast<double>(fps.size());
  for (double f : fps) var += (f - mean) * (f - mean);
  var = fps.size() > 1 ? var / static_cast<double>(fps.size() - 1) : 0.0;
  std::string out = run.header();
  out += "frames=" + std::to_string(series.size()) + '\n';
  out += "blinks=" + std::to_string(blinks) + '\n';
  out += "sequences=" + std::to_string(sequences) + '\n';
  out += "repeats=" + std::to_string(repeats) + '\n';
  out += "fps_mean=" + blinkwise::fixed(mean, 1) + '\n';
  out += "fps_stddev=" + blinkwise::fixed(std::sqrt(var), 1) + '\n';
  out += "fps_min=" + blinkwise::fixed(*std::min_element(fps.begin(), fps.end()), 1) + '\n';
  out += "fps_max=" + blinkwise::fixed(*std::max_element(fps.begin(), fps.end()), 1) + '\n';
  run.write("throughput.txt", out);
  std::cout << out.substr(run.header().size());
  run.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blinkwise: blink-based drowsiness estimation from eye landmarks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Common common;
  Streams streams;
  FeatureArgs feature_args;
  CalibrateArgs calibrate_args;
  ManifestArgs manifest_args;
  FitArgs fit_args;
  ThroughputArgs throughput_args;

  auto* detect = app.add_subcommand("detect", "detect blinks in EAR or landmark streams");
  add_common(detect, common);
  add_detector_flags(detect, common);
  detect->add_option("inputs", streams.inputs, "EAR or landmark files")->required()->check(CLI::ExistingFile);

  auto* features = app.add_subcommand("features", "extract per-blink features");
  add_common(features, common);
  add_detector_flags(features, common);
  features->add_option("inputs", feature_args.inputs, "EAR or landmark files")->required()->check(CLI::ExistingFile);
  features->add_option("--blinks", feature_args.blinks, "use this blink file instead of detecting")
      ->check(CLI::ExistingFile);

  auto* calibrate = app.add_subcommand("calibrate", "fit per-subject calibration on an alert video");
  add_common(calibrate, common);
  calibrate->add_option("alert", calibrate_args.alert, "features file of the alert video")
      ->required()
      ->check(CLI::ExistingFile);
  calibrate->add_option("--apply", calibrate_args.apply, "features files to normalize")->check(CLI::ExistingFile);

  auto* train_cmd = app.add_subcommand("train", "train one model per held-out fold");
  add_common(train_cmd, common);
  add_detector_flags(train_cmd, common);
  add_train_flags(train_cmd, common);
  train_cmd->add_option("--manifest", manifest_args.manifest, "video manifest")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate fold checkpoints on their held-out folds");
  add_common(eval, common);
  add_detector_flags(eval, common);
  bind(eval, common, "--stride", "train.stride", "sequence stride");
  eval->add_option("--manifest", manifest_args.manifest, "video manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--models", manifest_args.models, "directory holding fold_<k>.model")
      ->required()
      ->check(CLI::ExistingDirectory);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with manifest");
  add_common(synth, common);
  bind(synth, common, "--subjects", "synth.subjects", "subject count");
  bind(synth, common, "--frames", "synth.frames", "frames per video");
  bind(synth, common, "--seed", "synth.seed", "generator seed");
  bind(synth, common, "--noise", "synth.noise", "EAR noise sigma");

  auto* fit = app.add_subcommand("fit-classifier", "fit the 13-frame linear closed-eye classifier");
  add_common(fit, common);
  fit->add_option("stream", fit_args.stream, "EAR or landmark file")->required()->check(CLI::ExistingFile);
  fit->add_option("truth", fit_args.truth, "truth file marking blink frames")->required()->check(CLI::ExistingFile);

  auto* throughput = app.add_subcommand("throughput", "measure post-landmark pipeline speed");
  add_common(throughput, common);
  add_detector_flags(throughput, common);
  throughput->add_option("input", throughput_args.input, "EAR or landmark file (default: synthetic stream)")
      ->check(CLI::ExistingFile);
  throughput->add_option("--model", throughput_args.model, "checkpoint (default: freshly initialized)")
      ->check(CLI::ExistingFile);
  bind(throughput, common, "--repeats", "throughput.repeats", "timed repetitions");
  bind(throughput, common, "--frames", "throughput.frames", "synthetic stream length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::input_format);
  }

  try {
    if (*detect) return cmd_detect(common, streams);
    if (*features) return cmd_features(common, feature_args);
    if (*calibrate) return cmd_calibrate(common, calibrate_args);
    if (*train_cmd) return cmd_train(common, manifest_args);
    if (*eval) return cmd_eval(common, manifest_args);
    if (*synth) return cmd_synth(common);
    if (*fit) return cmd_fit_classifier(common, fit_args);
    if (*throughput) return cmd_throughput(common, throughput_args);
  } catch (const Error& e) {
    std::cerr << "blinkwise: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "blinkwise: " << e.what() << '\n';
    return static_cast<int>(ExitCode::io);
  }
  return 0;
}

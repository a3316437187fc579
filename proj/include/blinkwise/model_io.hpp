#pragma once

// Checkpoint text format. See docs/model_format.md for the exact layout.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blinkwise/blink_features.hpp"
#include "blinkwise/errors.hpp"
#include "blinkwise/sequence_model.hpp"
#include "blinkwise/text.hpp"

namespace blinkwise {

inline constexpr std::string_view kModelTag = "# blinkwise-model v1";

struct Checkpoint {
  ModelParams params;
  std::optional<GlobalStats> global;
};

namespace detail {

/// Trainable tensors followed by batch-norm running statistics.
template <class P, class F>
void visit_persisted(P& p, F&& f) {
  p.for_each_trainable([&](const std::string& name, auto& m, bool) { f(name, m); });
  if (!p.config.batch_norm) return;
  auto stats = [&](const std::string& n, auto& bn) {
    f(n + ".running_mean", bn.running_mean);
    f(n + ".running_var", bn.running_var);
  };
  stats("bn1", p.bn1);
  stats("bn2", p.bn2);
  stats("bn3", p.bn3);
  stats("bn4", p.bn4);
}

inline std::string arch_line(const ModelConfig& c) {
  return "arch window=" + std::to_string(c.window) + " input_dim=" + std::to_string(c.input_dim) +
         " fc1=" + std::to_string(c.fc1) + " hidden=" + std::to_string(c.hidden) +
         " layers=" + std::to_string(c.layers) + " head=" + std::to_string(c.head) +
         " fc2=" + std::to_string(c.fc2) + " fc3=" + std::to_string(c.fc3) + " fc4=" + std::to_string(c.fc4) +
         " batch_norm=" + (c.batch_norm ? "1" : "0") + " bn_momentum=" + text::format_real(c.bn_momentum) +
         " bn_eps=" + text::format_real(c.bn_eps) + " boundary=" + std::string(to_string(c.boundary)) +
         " boundary_bias_init=" + text::format_real(c.boundary_bias_init);
}

inline ModelConfig parse_arch(std::string_view line, std::size_t no) {
  auto words = text::split(line, ' ');
  if (words.empty() || words[0] != "arch") throw FormatError("expected 'arch' line", no);
  std::map<std::string, std::string, std::less<>> kv;
  for (std::size_t k = 1; k < words.size(); ++k) {
    if (words[k].empty()) continue;
    auto eq = words[k].find('=');
    if (eq == std::string_view::npos) throw FormatError("arch entries must be key=value", no);
    kv.emplace(std::string(words[k].substr(0, eq)), std::string(words[k].substr(eq + 1)));
  }
  auto get = [&](std::string_view key) -> std::string_view {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("arch line lacks '" + std::string(key) + "'", no);
    return it->second;
  };
  auto as_int = [&](std::string_view key) { return static_cast<int>(text::parse_int(get(key), no)); };
  ModelConfig c;
  c.window = as_int("window");
  c.input_dim = as_int("input_dim");
  c.fc1 = as_int("fc1");
  c.hidden = as_int("hidden");
  c.layers = as_int("layers");
  c.head = as_int("head");
  c.fc2 = as_int("fc2");
  c.fc3 = as_int("fc3");
  c.fc4 = as_int("fc4");
  c.batch_norm = get("batch_norm") == "1";
  c.bn_momentum = text::parse_real(get("bn_momentum"), no);
  c.bn_eps = text::parse_real(get("bn_eps"), no);
  c.boundary = parse_boundary_mode(get("boundary"));
  c.boundary_bias_init = text::parse_real(get("boundary_bias_init"), no);
  try {
    c.validate();
  } catch (const PreconditionError& e) {
    throw FormatError(e.what(), no);
  }
  return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck, std::span<const std::string> comments = {}) {
  std::string out(kModelTag);
  out += '\n';
  for (const auto& c : comments) out += c + '\n';
  out += detail::arch_line(ck.params.config) + '\n';
  detail::visit_persisted(ck.params, [&](const std::string& name, const Matrix& m) {
    out += "tensor " + name + ' ' + std::to_string(m.rows()) + ' ' + std::to_string(m.cols()) + '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) out += ' ';
        out += text::format_real(m(r, c));
      }
      out += '\n';
    }
  });
  if (ck.global) {
    for (const auto* row : {&ck.global->stats.mean, &ck.global->stats.stddev}) {
      out += row == &ck.global->stats.mean ? "global mean" : "global stddev";
      for (double v : *row) out += ' ' + text::format_real(v);
      out += '\n';
    }
  }
  out += "end\n";
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view content) {
  auto ls = text::lines(content);
  std::size_t k = 0;
  auto next = [&]() -> const text::Line* {
    while (k < ls.size()) {
      auto& l = ls[k++];
      auto t = text::trim(l.content);
      if (t.empty() || t.front() == '#') continue;
      return &l;
    }
    return nullptr;
  };
  if (ls.empty() || text::trim(ls[0].content) != kModelTag) throw FormatError("missing model version tag", 1);
  const auto* arch = next();
  if (!arch) throw FormatError("truncated checkpoint");
  Checkpoint ck;
  ck.params = init_params(detail::parse_arch(text::trim(arch->content), arch->number), 0);

  std::map<std::string, Matrix*> slots;
  detail::visit_persisted(ck.params, [&](const std::string& name, Matrix& m) { slots[name] = &m; });
  std::map<std::string, bool> filled;
  GlobalStats global;
  bool have_mean = false, have_sd = false, ended = false;

  while (const auto* line = next()) {
    auto words = text::split(text::trim(line->content), ' ');
    if (words[0] == "end") {
      ended = true;
      break;
    }
    if (words[0] == "global") {
      if (words.size() != 2 + kFeatureCount) throw FormatError("global row needs 4 values", line->number);
      auto& dst = words[1] == "mean" ? global.stats.mean : global.stats.stddev;
      if (words[1] != "mean" && words[1] != "stddev") throw FormatError("unknown global row", line->number);
      for (std::size_t f = 0; f < kFeatureCount; ++f) dst[f] = text::parse_real(words[2 + f], line->number);
      (words[1] == "mean" ? have_mean : have_sd) = true;
      continue;
    }
    if (words[0] != "tensor" || words.size() != 4) throw FormatError("expected 'tensor <name> <rows> <cols>'", line->number);
    const std::string name(words[1]);
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("unknown tensor '" + name + "'", line->number);
    Matrix& m = *it->second;
    const auto rows = text::parse_int(words[2], line->number);
    const auto cols = text::parse_int(words[3], line->number);
    if (rows != m.rows() || cols != m.cols()) throw FormatError("tensor '" + name + "' has the wrong shape", line->number);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const auto* row = next();
      if (!row) throw FormatError("truncated tensor '" + name + "'");
      auto vals = text::split(text::trim(row->content), ' ');
      if (static_cast<Eigen::Index>(vals.size()) != m.cols()) throw FormatError("tensor row has the wrong length", row->number);
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = text::parse_real(vals[static_cast<std::size_t>(c)], row->number);
    }
    filled[name] = true;
  }
  if (!ended) throw FormatError("checkpoint lacks 'end'");
  for (const auto& [name, _] : slots)
    if (!filled.count(name)) throw FormatError("checkpoint lacks tensor '" + name + "'");
  if (have_mean != have_sd) throw FormatError("global statistics incomplete");
  if (have_mean) ck.global = global;
  return ck;
}

}  // namespace blinkwise

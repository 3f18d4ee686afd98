#pragma once

// Result tables (CSV + JSON) and activation-map images (binary PGM).

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "dnt/error.hpp"
#include "dnt/metrics.hpp"
#include "dnt/model.hpp"
#include "dnt/triage.hpp"

namespace dnt {

using json = nlohmann::json;

// -- per-cell records ---------------------------------------------------------

inline json to_json_value(const ExperimentResult& r) {
  json j{{"block", r.config.block_index},
         {"init", to_string(r.config.init)},
         {"train", to_string(r.config.train)},
         {"comp_epochs", r.config.comp_epochs},
         {"stn_epochs", r.config.stn_epochs},
         {"seed", r.config.seed},
         {"mean_mode", r.config.mean_mode == MeanMode::global ? "global" : "per_output_channel"},
         {"stn_start", to_string(r.config.stn_start)},
         {"accuracy_series", r.accuracy_series.values()},
         {"max_accuracy", r.max_accuracy},
         {"convergence_epoch", r.convergence_epoch},
         {"param_count", r.param_count_child},
         {"wall_time", r.wall_time},
         {"stn_trace", r.stn_trace}};
  j["test_accuracy"] = r.test_accuracy ? json(*r.test_accuracy) : json(nullptr);
  return j;
}

inline ExperimentResult result_from_json(const json& j) {
  try {
    ExperimentResult r;
    r.config.block_index = j.at("block").get<std::size_t>();
    r.config.init = parse_init_scheme(j.at("init").get<std::string>());
    r.config.train = parse_train_scheme(j.at("train").get<std::string>());
    r.config.comp_epochs = j.at("comp_epochs").get<int>();
    r.config.stn_epochs = j.at("stn_epochs").get<int>();
    r.config.seed = j.at("seed").get<std::uint64_t>();
    r.config.mean_mode = j.at("mean_mode").get<std::string>() == "global" ? MeanMode::global : MeanMode::per_output_channel;
    r.config.stn_start = parse_init_scheme(j.at("stn_start").get<std::string>());
    r.accuracy_series = AccuracySeries(j.at("accuracy_series").get<std::vector<double>>());
    r.max_accuracy = j.at("max_accuracy").get<double>();
    r.convergence_epoch = j.at("convergence_epoch").get<std::size_t>();
    r.param_count_child = j.at("param_count").get<std::size_t>();
    r.wall_time = j.at("wall_time").get<double>();
    r.stn_trace = j.at("stn_trace").get<std::vector<double>>();
    if (!j.at("test_accuracy").is_null()) r.test_accuracy = j.at("test_accuracy").get<double>();
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, std::string("bad result record: ") + e.what());
  }
}

// -- results table -------------------------------------------------------------

struct BaselineRow {
  AccuracySeries accuracy_series;
  std::size_t param_count = 0;
  double wall_time = 0.0;
  std::optional<double> test_accuracy;
};

class ResultsTable {
 public:
  using Key = std::tuple<std::size_t, InitScheme, TrainScheme>;

  explicit ResultsTable(ConvergenceRule rule = ConvergenceRule::multiplicative) : rule_(rule) {}

  ConvergenceRule convergence_rule() const { return rule_; }
  /// Epochs to within 99% of the maximum under this table's rule.
  std::size_t convergence(const AccuracySeries& s) const { return convergence_epoch(s, 0.99, rule_); }

  void set_baseline(BaselineRow b) {
    if (b.accuracy_series.empty()) fail(ErrorKind::incomplete_results, "baseline has no accuracy series");
    baseline_ = std::move(b);
  }
  const std::optional<BaselineRow>& baseline() const { return baseline_; }

  void add(ExperimentResult r) {
    const Key k{r.config.block_index, r.config.init, r.config.train};
    if (rows_.count(k)) fail(ErrorKind::invalid_plan, "duplicate result for " + r.config.key());
    rows_.emplace(k, std::move(r));
  }

  const ExperimentResult* find(std::size_t block, InitScheme i, TrainScheme t) const {
    auto it = rows_.find({block, i, t});
    return it == rows_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return rows_.size(); }
  const std::map<Key, ExperimentResult>& rows() const { return rows_; }

  /// Keys of `grid` with no row, as "blockB-INIT-TRAIN".
  std::vector<std::string> missing(const TriageGrid& grid) const {
    std::vector<std::string> out;
    for (std::size_t b : grid.blocks)
      for (InitScheme i : grid.inits)
        for (TrainScheme t : grid.trains)
          if (!find(b, i, t)) {
            TriageConfig c;
            c.block_index = b;
            c.init = i;
            c.train = t;
            out.push_back(c.key());
          }
    return out;
  }

 private:
  ConvergenceRule rule_;
  std::optional<BaselineRow> baseline_;
  std::map<Key, ExperimentResult> rows_;
};

namespace detail {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

}  // namespace detail

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{"block",       "init",          "train",    "max_accuracy",
                                             "convergence_epoch", "param_count", "wall_time"};
  return cols;
}

/// CSV text: header, one baseline row, then one row per cell in grid order.
inline std::string results_csv(const ResultsTable& table, const TriageGrid& grid) {
  std::string out;
  auto row = [&out](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + detail::csv_field(fields[i]);
    out += "\r\n";
  };
  row(csv_columns());
  const BaselineRow& base = *table.baseline();
  row({"baseline", "none", "none", detail::format_double(base.accuracy_series.max()),
       std::to_string(table.convergence(base.accuracy_series)), std::to_string(base.param_count),
       detail::format_double(base.wall_time)});
  for (std::size_t b : grid.blocks)
    for (InitScheme i : grid.inits)
      for (TrainScheme t : grid.trains) {
        const ExperimentResult& r = *table.find(b, i, t);
        row({std::to_string(b), to_string(i), to_string(t), detail::format_double(r.max_accuracy),
             std::to_string(table.convergence(r.accuracy_series)), std::to_string(r.param_count_child),
             detail::format_double(r.wall_time)});
      }
  return out;
}

/// JSON document: baseline, rows (CSV fields plus full series), and mean
/// convergence epochs per training scheme, overall and per init scheme.
inline json results_json(const ResultsTable& table, const TriageGrid& grid) {
  const BaselineRow& base = *table.baseline();
  json j;
  j["baseline"] = {{"accuracy_series", base.accuracy_series.values()},
                   {"max_accuracy", base.accuracy_series.max()},
                   {"convergence_epoch", table.convergence(base.accuracy_series)},
                   {"param_count", base.param_count},
                   {"wall_time", base.wall_time}};
  j["baseline"]["test_accuracy"] = base.test_accuracy ? json(*base.test_accuracy) : json(nullptr);
  json rows = json::array();
  std::map<std::string, std::vector<double>> by_train;
  std::map<std::string, std::map<std::string, std::vector<double>>> by_train_init;
  for (std::size_t b : grid.blocks)
    for (InitScheme i : grid.inits)
      for (TrainScheme t : grid.trains) {
        const ExperimentResult& r = *table.find(b, i, t);
        const auto conv = static_cast<double>(table.convergence(r.accuracy_series));
        json row = to_json_value(r);
        row["convergence_epoch"] = table.convergence(r.accuracy_series);
        rows.push_back(std::move(row));
        by_train[to_string(t)].push_back(conv);
        by_train_init[to_string(t)][to_string(i)].push_back(conv);
      }
  j["rows"] = rows;
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  json agg;
  for (const auto& [t, v] : by_train) {
    agg[t]["mean_convergence_epoch"] = mean(v);
    agg[t]["cells"] = v.size();
    for (const auto& [i, vi] : by_train_init[t]) agg[t]["by_init"][i] = mean(vi);
  }
  j["aggregate"] = agg;
  j["convergence_rule"] = table.convergence_rule() == ConvergenceRule::additive ? "additive" : "multiplicative";
  return j;
}

/// Writes `<stem>.csv` and `<stem>.json`. Every grid cell and the baseline
/// must be present.
inline void emit_results(const ResultsTable& table, const TriageGrid& grid, const std::filesystem::path& stem) {
  if (!table.baseline()) fail(ErrorKind::incomplete_results, "baseline row missing");
  if (grid.size() == 0) fail(ErrorKind::incomplete_results, "empty grid");
  const auto missing = table.missing(grid);
  if (!missing.empty()) {
    std::string msg = "missing cells:";
    for (const auto& m : missing) msg += " " + m;
    fail(ErrorKind::incomplete_results, msg);
  }
  detail::write_text(stem.string() + ".csv", results_csv(table, grid));
  detail::write_text(stem.string() + ".json", results_json(table, grid).dump(2) + "\n");
}

// -- activation images -----------------------------------------------------------

/// Where an activation is read. Student-teacher matching uses the post-pool
/// output; activation images use the last ReLU before the pool.
enum class TapPoint { post_pool, post_relu };
inline constexpr TapPoint stn_tap = TapPoint::post_pool;
inline constexpr TapPoint viz_tap = TapPoint::post_relu;

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline std::vector<unsigned char> encode_pgm(const PgmImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

/// Parses binary PGM with maxval 255 (comments allowed in the header).
inline PgmImage decode_pgm(std::span<const unsigned char> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        return;
      }
    }
  };
  auto token = [&]() -> std::string {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    if (t.empty()) fail(ErrorKind::format, "truncated PGM header");
    return t;
  };
  auto number = [&]() -> std::size_t {
    const std::string t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos) fail(ErrorKind::format, "bad PGM number '" + t + "'");
    return std::stoull(t);
  };
  if (token() != "P5") fail(ErrorKind::format, "not a binary PGM");
  PgmImage img;
  img.width = number();
  img.height = number();
  if (number() != 255) fail(ErrorKind::format, "PGM maxval must be 255");
  ++pos;  // single whitespace byte before the raster
  const std::size_t n = img.width * img.height;
  if (bytes.size() < pos || bytes.size() - pos != n) fail(ErrorKind::truncation, "PGM raster size mismatch");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

/// Min-max normalizes channel `c` of an [H,W,C] activation (batch item 0) to
/// 0..255; a constant channel becomes all zeros.
inline PgmImage channel_image(const Tensor& act, std::size_t c) {
  const std::size_t h = act.dim(1), w = act.dim(2), ch = act.dim(3);
  PgmImage img{w, h, std::vector<std::uint8_t>(h * w, 0)};
  float lo = act[c], hi = act[c];
  for (std::size_t p = 0; p < h * w; ++p) {
    lo = std::min(lo, act[p * ch + c]);
    hi = std::max(hi, act[p * ch + c]);
  }
  if (!(hi > lo)) return img;
  const double scale = 255.0 / (static_cast<double>(hi) - static_cast<double>(lo));
  for (std::size_t p = 0; p < h * w; ++p) {
    const double v = (static_cast<double>(act[p * ch + c]) - lo) * scale;
    img.pixels[p] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return img;
}

struct ActivationDump {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> warnings;
};

/// Writes the first k channels of block `b`'s post-ReLU activation for one
/// image ([1,H,W,C] or [H,W,C]) as `<dir>/block<b>_filter<NN>.pgm`.
inline ActivationDump dump_activations(Network& net, const Tensor& image, std::size_t b, std::size_t k,
                                       const std::filesystem::path& dir) {
  Tensor x = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (x.rank() != 4 || x.dim(0) != 1) fail(ErrorKind::shape_mismatch, "dump_activations takes a single image");
  const Tensor act = net.block_activation(x, b);
  ActivationDump out;
  const std::size_t channels = act.dim(3);
  if (k > channels) {
    out.warnings.push_back("requested " + std::to_string(k) + " filters, block " + std::to_string(b) + " has " +
                           std::to_string(channels) + "; clamped");
    k = channels;
  }
  std::filesystem::create_directories(dir);
  for (std::size_t c = 0; c < k; ++c) {
    char name[64];
    std::snprintf(name, sizeof(name), "block%zu_filter%02zu.pgm", b, c);
    const auto path = dir / name;
    const auto bytes = encode_pgm(channel_image(act, c));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.files.push_back(path);
  }
  return out;
}

}  // namespace dnt

#pragma once

// Pipeline commands behind the `dnt` tool: train-base, triage, viz, report.
//
// Output layout under RunConfig::out_dir:
//   baseline.ckpt, baseline.json        parent network and its metrics
//   cells/<key>.json, children/<key>.ckpt  one per grid cell (resumable)
//   results.csv, results.json           assembled grid
//   viz/<model>/block<B>_filter<NN>.pgm activation images
//   manifest-<command>.json             resolved config, seed, versions

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dnt/data.hpp"
#include "dnt/error.hpp"
#include "dnt/model.hpp"
#include "dnt/persistence.hpp"
#include "dnt/report.hpp"
#include "dnt/training.hpp"
#include "dnt/triage.hpp"

namespace dnt {

inline constexpr std::string_view version_string = "0.1.0";

struct RunConfig {
  std::string command;
  std::string dataset = "mnist";  // mnist | synth
  std::filesystem::path data_dir = "data/mnist";
  std::filesystem::path out_dir = "runs";
  std::uint64_t seed = 0;
  int epochs = 15;
  TrainHyper hyper;
  int comp_epochs = 25;
  int stn_epochs = 12;
  std::vector<std::size_t> blocks;  // empty: every block
  std::vector<std::string> inits{"rw", "mw", "stn"};
  std::vector<std::string> trains{"fm", "tm"};
  std::size_t jobs = 1;
  std::size_t image_index = 0;
  std::size_t filters = 10;
  std::vector<std::string> models{"baseline"};
  std::string mean_mode = "global";  // global | per_output_channel
  std::string stn_start = "rw";      // rw | mw
  std::string convergence = "multiplicative";  // multiplicative | additive
  std::optional<double> hflip;       // default: 0 for mnist, 0.5 for synth
  std::size_t val_count = 5000;      // mnist hold-out from the end of the train file
  std::size_t train_limit = 0;       // 0: whole train split
  std::size_t val_limit = 0;         // 0: whole validation split
  std::size_t synth_train = 2000;
  std::size_t synth_val = 500;
  std::size_t synth_test = 500;

  double hflip_prob() const { return hflip.value_or(dataset == "synth" ? 0.5 : 0.0); }

  void validate() const {
    auto bad = [](const std::string& field, const std::string& why) {
      fail(ErrorKind::config_validation, field + " " + why);
    };
    if (dataset != "mnist" && dataset != "synth") bad("dataset", "must be mnist or synth");
    hyper.validate();
    if (epochs < 1) bad("epochs", "must be >= 1");
    if (comp_epochs < 1) bad("comp_epochs", "must be >= 1");
    if (stn_epochs < 1) bad("stn_epochs", "must be >= 1");
    if (jobs < 1) bad("jobs", "must be >= 1");
    if (filters < 1) bad("filters", "must be >= 1");
    if (inits.empty()) bad("init", "needs at least one scheme");
    if (trains.empty()) bad("train", "needs at least one scheme");
    for (const auto& i : inits) parse_init_scheme(i);
    for (const auto& t : trains) parse_train_scheme(t);
    if (mean_mode != "global" && mean_mode != "per_output_channel") bad("mean_mode", "must be global or per_output_channel");
    if (stn_start != "rw" && stn_start != "mw") bad("stn_start", "must be rw or mw");
    if (convergence != "multiplicative" && convergence != "additive") {
      bad("convergence", "must be multiplicative or additive");
    }
    if (hflip && !(*hflip >= 0.0 && *hflip <= 1.0)) bad("hflip", "must be in [0, 1]");
    if (val_count < 1) bad("val_count", "must be >= 1");
    if (synth_train < 2 || synth_val < 1 || synth_test < 1) bad("synth sizes", "must be positive (train >= 2)");
  }

  TriageSettings triage_settings() const {
    TriageSettings s;
    s.comp_epochs = comp_epochs;
    s.stn_epochs = stn_epochs;
    s.seed = seed;
    s.hyper = hyper;
    s.mean_mode = mean_mode == "global" ? MeanMode::global : MeanMode::per_output_channel;
    s.stn_start = parse_init_scheme(stn_start);
    s.jobs = jobs;
    return s;
  }

  ConvergenceRule convergence_rule() const {
    return convergence == "additive" ? ConvergenceRule::additive : ConvergenceRule::multiplicative;
  }

  TriageGrid grid(const ModelSpec& spec) const {
    TriageGrid g;
    if (blocks.empty()) {
      g = TriageGrid::full(spec);
    } else {
      for (std::size_t b : blocks) {
        if (b >= spec.blocks.size()) fail(ErrorKind::config_validation, "blocks: " + std::to_string(b) + " out of range");
        g.blocks.push_back(b);
      }
    }
    g.inits.clear();
    g.trains.clear();
    for (const auto& i : inits) g.inits.push_back(parse_init_scheme(i));
    for (const auto& t : trains) g.trains.push_back(parse_train_scheme(t));
    return g;
  }
};

inline nlohmann::json to_json_value(const RunConfig& c) {
  nlohmann::json j{{"command", c.command},
                   {"dataset", c.dataset},
                   {"data_dir", c.data_dir.string()},
                   {"out_dir", c.out_dir.string()},
                   {"seed", c.seed},
                   {"epochs", c.epochs},
                   {"lr", c.hyper.lr},
                   {"lr_min", c.hyper.lr_min},
                   {"lr_decay", c.hyper.lr_decay},
                   {"weight_decay", c.hyper.weight_decay},
                   {"momentum", c.hyper.momentum},
                   {"patience", c.hyper.patience},
                   {"cooldown", c.hyper.cooldown},
                   {"batch_size", c.hyper.batch_size},
                   {"monitor", c.hyper.monitor == PlateauMonitor::maximize ? "val_accuracy" : "val_loss"},
                   {"comp_epochs", c.comp_epochs},
                   {"stn_epochs", c.stn_epochs},
                   {"blocks", c.blocks},
                   {"init", c.inits},
                   {"train", c.trains},
                   {"jobs", c.jobs},
                   {"image_index", c.image_index},
                   {"filters", c.filters},
                   {"models", c.models},
                   {"mean_mode", c.mean_mode},
                   {"stn_start", c.stn_start},
                   {"convergence", c.convergence},
                   {"hflip", c.hflip_prob()},
                   {"val_count", c.val_count},
                   {"train_limit", c.train_limit},
                   {"val_limit", c.val_limit},
                   {"synth_train", c.synth_train},
                   {"synth_val", c.synth_val},
                   {"synth_test", c.synth_test}};
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.command = j.at("command").get<std::string>();
    c.dataset = j.at("dataset").get<std::string>();
    c.data_dir = j.at("data_dir").get<std::string>();
    c.out_dir = j.at("out_dir").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.epochs = j.at("epochs").get<int>();
    c.hyper.lr = j.at("lr").get<double>();
    c.hyper.lr_min = j.at("lr_min").get<double>();
    c.hyper.lr_decay = j.at("lr_decay").get<double>();
    c.hyper.weight_decay = j.at("weight_decay").get<double>();
    c.hyper.momentum = j.at("momentum").get<double>();
    c.hyper.patience = j.at("patience").get<int>();
    c.hyper.cooldown = j.at("cooldown").get<int>();
    c.hyper.batch_size = j.at("batch_size").get<std::size_t>();
    c.hyper.monitor = j.at("monitor").get<std::string>() == "val_loss" ? PlateauMonitor::minimize : PlateauMonitor::maximize;
    c.comp_epochs = j.at("comp_epochs").get<int>();
    c.stn_epochs = j.at("stn_epochs").get<int>();
    c.blocks = j.at("blocks").get<std::vector<std::size_t>>();
    c.inits = j.at("init").get<std::vector<std::string>>();
    c.trains = j.at("train").get<std::vector<std::string>>();
    c.jobs = j.at("jobs").get<std::size_t>();
    c.image_index = j.at("image_index").get<std::size_t>();
    c.filters = j.at("filters").get<std::size_t>();
    c.models = j.at("models").get<std::vector<std::string>>();
    c.mean_mode = j.at("mean_mode").get<std::string>();
    c.stn_start = j.at("stn_start").get<std::string>();
    c.convergence = j.at("convergence").get<std::string>();
    c.hflip = j.at("hflip").get<double>();
    c.val_count = j.at("val_count").get<std::size_t>();
    c.train_limit = j.at("train_limit").get<std::size_t>();
    c.val_limit = j.at("val_limit").get<std::size_t>();
    c.synth_train = j.at("synth_train").get<std::size_t>();
    c.synth_val = j.at("synth_val").get<std::size_t>();
    c.synth_test = j.at("synth_test").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config_validation, std::string("manifest: ") + e.what());
  }
  return c;
}

inline nlohmann::json manifest_json(const RunConfig& c) {
  return {{"config", to_json_value(c)},
          {"seed", c.seed},
          {"versions",
           {{"dnt", version_string}, {"checkpoint_format", checkpoint_format_version}, {"compiler", __VERSION__}}}};
}

inline std::filesystem::path manifest_path(const RunConfig& c) { return c.out_dir / ("manifest-" + c.command + ".json"); }

inline void write_manifest(const RunConfig& c) {
  detail::write_text(manifest_path(c), manifest_json(c).dump(2) + "\n");
}

inline RunConfig load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::missing_artifact, "manifest not found: " + path.string());
  try {
    return run_config_from_json(nlohmann::json::parse(in).at("config"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config_validation, std::string("manifest: ") + e.what());
  }
}

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::missing_artifact:
    case ErrorKind::incomplete_results:
    case ErrorKind::corruption:
    case ErrorKind::version:
    case ErrorKind::schema: return 2;
    case ErrorKind::data_not_found:
    case ErrorKind::format:
    case ErrorKind::truncation:
    case ErrorKind::consistency: return 3;
    default: return 1;
  }
}

// -- data ----------------------------------------------------------------------

struct PreparedData {
  Dataset train, val, test;
  Preprocessor pre;

  TrainingData view() const { return {&train, &val, &test, pre.hflip_prob()}; }
};

struct PreprocessStats {
  std::vector<double> mean, stddev;
};

/// Loads the configured dataset and standardizes it, fitting statistics on
/// the train split unless `stats` is given.
inline PreparedData prepare_data(const RunConfig& c, const std::optional<PreprocessStats>& stats = std::nullopt) {
  Dataset train, val, test;
  std::optional<std::size_t> pad;
  if (c.dataset == "mnist") {
    MnistFiles m = load_mnist(c.data_dir);
    auto [tr, va] = split_validation(m.train, c.val_count);
    train = std::move(tr);
    val = std::move(va);
    test = std::move(m.test);
    pad = 32;
  } else {
    train = synth_shapes(c.synth_train, derive_seed(c.seed, "synth-train"), Split::train);
    val = synth_shapes(c.synth_val, derive_seed(c.seed, "synth-val"), Split::validation);
    test = synth_shapes(c.synth_test, derive_seed(c.seed, "synth-test"), Split::test);
  }
  if (c.train_limit > 0 && c.train_limit < train.size()) train = slice(train, 0, c.train_limit, Split::train);
  if (c.val_limit > 0 && c.val_limit < val.size()) val = slice(val, 0, c.val_limit, Split::validation);
  PreparedData out;
  out.pre = Preprocessor(pad, c.hflip_prob());
  if (stats) {
    out.pre.set_stats(stats->mean, stats->stddev);
  } else {
    out.pre.fit(train);
  }
  out.train = out.pre.apply(train);
  out.val = out.pre.apply(val);
  out.test = out.pre.apply(test);
  return out;
}

// -- baseline record -----------------------------------------------------------

struct BaselineRecord {
  BaselineRow row;
  PreprocessStats stats;
};

inline void write_baseline_record(const std::filesystem::path& path, const BaselineRecord& r) {
  nlohmann::json j{{"accuracy_series", r.row.accuracy_series.values()},
                   {"max_accuracy", r.row.accuracy_series.max()},
                   {"convergence_epoch", convergence_epoch(r.row.accuracy_series)},
                   {"param_count", r.row.param_count},
                   {"wall_time", r.row.wall_time},
                   {"preprocess", {{"mean", r.stats.mean}, {"std", r.stats.stddev}}}};
  j["test_accuracy"] = r.row.test_accuracy ? nlohmann::json(*r.row.test_accuracy) : nlohmann::json(nullptr);
  detail::write_text(path, j.dump(2) + "\n");
}

inline BaselineRecord read_baseline_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::missing_artifact, "baseline metrics not found: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    BaselineRecord r;
    r.row.accuracy_series = AccuracySeries(j.at("accuracy_series").get<std::vector<double>>());
    r.row.param_count = j.at("param_count").get<std::size_t>();
    r.row.wall_time = j.at("wall_time").get<double>();
    if (!j.at("test_accuracy").is_null()) r.row.test_accuracy = j.at("test_accuracy").get<double>();
    r.stats.mean = j.at("preprocess").at("mean").get<std::vector<double>>();
    r.stats.stddev = j.at("preprocess").at("std").get<std::vector<double>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, "bad baseline record " + path.string() + ": " + e.what());
  }
}

// -- commands --------------------------------------------------------------------

inline std::filesystem::path baseline_checkpoint(const RunConfig& c) { return c.out_dir / "baseline.ckpt"; }
inline std::filesystem::path baseline_metrics(const RunConfig& c) { return c.out_dir / "baseline.json"; }
inline std::filesystem::path cell_record(const RunConfig& c, const TriageConfig& t) {
  return c.out_dir / "cells" / (t.key() + ".json");
}
inline std::filesystem::path child_checkpoint(const RunConfig& c, const std::string& key) {
  return c.out_dir / "children" / (key + ".ckpt");
}

/// Trains the parent network from scratch and records its metrics.
inline BaselineRecord cmd_train_base(RunConfig c, std::ostream& log = std::cerr) {
  c.command = "train-base";
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  PreparedData data = prepare_data(c);
  const ModelSpec spec = mini_vgg_spec(data.train.class_count, data.train.channels());
  Network net = Network::build(spec, derive_seed(c.seed, "parent-init"));
  write_manifest(c);
  log << "train-base: " << c.dataset << " train=" << data.train.size() << " val=" << data.val.size()
      << " params=" << net.param_count() << "\n";
  BaselineRecord rec;
  rec.row.accuracy_series =
      train_network(net, data.view(), c.hyper, c.epochs, derive_seed(c.seed, "parent-train"), [&](const EpochReport& r) {
        log << "epoch " << r.epoch << " loss " << r.train_loss << " val_acc " << r.val_accuracy << " lr " << r.lr
            << "\n";
      });
  rec.row.param_count = net.param_count();
  rec.row.test_accuracy = evaluate_accuracy(net, data.test);
  rec.row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.stats = {data.pre.mean(), data.pre.stddev()};
  save(net, baseline_checkpoint(c));
  write_baseline_record(baseline_metrics(c), rec);
  log << "test_acc " << *rec.row.test_accuracy << "\n";
  return rec;
}

inline std::optional<ExperimentResult> read_cell(const std::filesystem::path& path, const TriageConfig& want) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    ExperimentResult r = result_from_json(nlohmann::json::parse(in));
    const auto& got = r.config;
    if (got.seed != want.seed || got.comp_epochs != want.comp_epochs || got.stn_epochs != want.stn_epochs ||
        got.mean_mode != want.mean_mode || got.stn_start != want.stn_start) {
      return std::nullopt;  // stale record from a different configuration
    }
    return r;
  } catch (const std::exception&) {
    return std::nullopt;  // partial or unreadable record: recompute
  }
}

/// Assembles results.csv/json from the baseline and the per-cell records.
inline ResultsTable cmd_report(RunConfig c, std::ostream& log = std::cerr) {
  c.command = "report";
  c.validate();
  const Network parent = load(baseline_checkpoint(c));
  const TriageGrid grid = c.grid(parent.spec());
  const TriageSettings settings = c.triage_settings();
  ResultsTable table(c.convergence_rule());
  table.set_baseline(read_baseline_record(baseline_metrics(c)).row);
  for (const auto& cell : expand_grid(grid, settings)) {
    if (auto r = read_cell(cell_record(c, cell), cell)) table.add(std::move(*r));
  }
  emit_results(table, grid, c.out_dir / "results");
  write_manifest(c);
  log << "report: " << table.size() << " cells -> " << (c.out_dir / "results.csv").string() << "\n";
  return table;
}

/// Runs (or resumes) the triage grid against the saved parent.
inline std::vector<ExperimentResult> cmd_triage(RunConfig c, std::ostream& log = std::cerr) {
  c.command = "triage";
  c.validate();
  const Network parent = load(baseline_checkpoint(c));
  const BaselineRecord base = read_baseline_record(baseline_metrics(c));
  const TriageGrid grid = c.grid(parent.spec());
  PreparedData data = prepare_data(c, base.stats);
  write_manifest(c);
  SuiteHooks hooks;
  hooks.lookup = [&](const TriageConfig& cell) {
    auto r = read_cell(cell_record(c, cell), cell);
    if (r) log << "skip " << cell.key() << " (on disk)\n";
    return r;
  };
  hooks.on_result = [&](const ExperimentResult& r, const Network& child) {
    save(child, child_checkpoint(c, r.config.key()));
    const auto path = cell_record(c, r.config);
    detail::write_text(path.string() + ".tmp", to_json_value(r).dump(2) + "\n");
    std::filesystem::rename(path.string() + ".tmp", path);
    log << r.config.key() << " max_acc " << r.max_accuracy << " conv_epoch " << r.convergence_epoch << " params "
        << r.param_count_child << " time " << r.wall_time << "s\n";
  };
  auto results = run_triage_suite(parent, grid, c.triage_settings(), data.view(), hooks);
  ResultsTable table(c.convergence_rule());
  table.set_baseline(base.row);
  for (const auto& r : results) table.add(r);
  emit_results(table, grid, c.out_dir / "results");
  return results;
}

/// Activation images of each requested model for one test image.
inline std::vector<ActivationDump> cmd_viz(RunConfig c, std::ostream& log = std::cerr) {
  c.command = "viz";
  c.validate();
  if (c.models.empty()) fail(ErrorKind::config_validation, "models needs at least one entry");
  const std::size_t block = c.blocks.empty() ? 0 : c.blocks.front();
  std::vector<Network> nets;
  for (const auto& m : c.models) {
    nets.push_back(load(m == "baseline" ? baseline_checkpoint(c) : child_checkpoint(c, m)));
  }
  const BaselineRecord base = read_baseline_record(baseline_metrics(c));
  PreparedData data = prepare_data(c, base.stats);
  if (c.image_index >= data.test.size()) {
    fail(ErrorKind::out_of_range,
         "image_index " + std::to_string(c.image_index) + " outside test split of " + std::to_string(data.test.size()));
  }
  const Batch one = gather(data.test, std::vector<std::size_t>{c.image_index});
  write_manifest(c);
  std::vector<ActivationDump> out;
  for (std::size_t i = 0; i < nets.size(); ++i) {
    if (block >= nets[i].block_count()) fail(ErrorKind::config_validation, "blocks: " + std::to_string(block) + " out of range");
    auto dump = dump_activations(nets[i], one.images, block, c.filters, c.out_dir / "viz" / c.models[i]);
    for (const auto& w : dump.warnings) log << "warning: " << w << "\n";
    log << c.models[i] << ": " << dump.files.size() << " images\n";
    out.push_back(std::move(dump));
  }
  return out;
}

}  // namespace dnt

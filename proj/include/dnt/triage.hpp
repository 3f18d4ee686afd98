#pragma once

// Deep net triage: compress one block of a trained parent into a single
// conv + BN + ReLU unit, initialize it, retrain, and record how well and how
// fast the child recovers.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dnt/data.hpp"
#include "dnt/error.hpp"
#include "dnt/metrics.hpp"
#include "dnt/model.hpp"
#include "dnt/optim.hpp"
#include "dnt/persistence.hpp"
#include "dnt/random.hpp"
#include "dnt/training.hpp"

namespace dnt {

enum class InitScheme { RW, MW, STN };
enum class TrainScheme { FM, TM };

inline std::string to_string(InitScheme s) {
  switch (s) {
    case InitScheme::RW: return "RW";
    case InitScheme::MW: return "MW";
    case InitScheme::STN: return "STN";
  }
  return "?";
}

inline std::string to_string(TrainScheme s) { return s == TrainScheme::FM ? "FM" : "TM"; }

inline InitScheme parse_init_scheme(std::string_view s) {
  if (s == "RW" || s == "rw") return InitScheme::RW;
  if (s == "MW" || s == "mw") return InitScheme::MW;
  if (s == "STN" || s == "stn") return InitScheme::STN;
  fail(ErrorKind::config_validation, "init must be one of rw, mw, stn (got '" + std::string(s) + "')");
}

inline TrainScheme parse_train_scheme(std::string_view s) {
  if (s == "FM" || s == "fm") return TrainScheme::FM;
  if (s == "TM" || s == "tm") return TrainScheme::TM;
  fail(ErrorKind::config_validation, "train must be one of fm, tm (got '" + std::string(s) + "')");
}

/// How the mean-parent slice is formed.
enum class MeanMode {
  global,              ///< one 3x3 mean over every slice of every conv in the block
  per_output_channel,  ///< per output channel, mean over the block's first conv
};

struct TriageConfig {
  std::size_t block_index = 0;
  InitScheme init = InitScheme::RW;
  TrainScheme train = TrainScheme::TM;
  int comp_epochs = 25;
  int stn_epochs = 12;
  std::uint64_t seed = 0;
  MeanMode mean_mode = MeanMode::global;
  InitScheme stn_start = InitScheme::RW;  // RW or MW

  void validate() const {
    if (comp_epochs < 1) fail(ErrorKind::config_validation, "comp_epochs must be >= 1");
    if (init == InitScheme::STN && stn_epochs < 1) fail(ErrorKind::config_validation, "stn_epochs must be >= 1");
    if (stn_start == InitScheme::STN) fail(ErrorKind::config_validation, "stn_start must be RW or MW");
  }

  std::string key() const {
    return "block" + std::to_string(block_index) + "-" + to_string(init) + "-" + to_string(train);
  }
};

struct ExperimentResult {
  TriageConfig config;
  AccuracySeries accuracy_series;
  double max_accuracy = 0.0;
  std::size_t convergence_epoch = 0;
  std::size_t param_count_child = 0;
  double wall_time = 0.0;
  std::optional<double> test_accuracy;
  std::vector<double> stn_trace;
};

// -- structural compression ---------------------------------------------------

/// Child with block `b` reduced to one conv unit shaped like the parent's
/// first conv of that block. Everything else is copied; the new unit is left
/// zeroed and flagged uninitialized.
inline Network structural_compress(const Network& parent, std::size_t b) {
  const ModelSpec& ps = parent.spec();
  if (b >= ps.blocks.size()) {
    fail(ErrorKind::invalid_tap, "block " + std::to_string(b) + " outside [0," + std::to_string(ps.blocks.size()) + ")");
  }
  if (ps.blocks[b].conv_count < 2) {
    fail(ErrorKind::nothing_to_compress, "block " + std::to_string(b) + " has a single convolution");
  }
  ModelSpec cs = ps;
  cs.blocks[b].conv_count = 1;
  Network child = Network::zeros(cs);
  for (std::size_t i = 0; i < ps.blocks.size(); ++i) {
    if (i == b) continue;
    auto& dst = child.block(i).units;
    const auto& src = parent.block(i).units;
    for (std::size_t u = 0; u < src.size(); ++u) {
      dst[u].conv = src[u].conv;
      dst[u].bn = src[u].bn;
    }
  }
  child.fc1() = parent.fc1();
  child.fc2() = parent.fc2();
  child.mark_uninitialized(b);
  return child;
}

namespace detail {

inline Network::ConvUnit& compressed_unit(Network& child, std::size_t b) {
  if (b >= child.block_count()) fail(ErrorKind::invalid_tap, "block " + std::to_string(b) + " out of range");
  auto& units = child.block(b).units;
  if (units.size() != 1) fail(ErrorKind::invalid_plan, "block " + std::to_string(b) + " is not compressed");
  return units.front();
}

}  // namespace detail

/// Glorot-uniform conv weights, zero bias, identity batch norm.
inline Network& init_random(Network& child, std::size_t b, std::uint64_t seed) {
  auto& u = detail::compressed_unit(child, b);
  Rng rng(seed);
  glorot_uniform(u.conv, rng);
  u.bn.reset();
  if (child.uninitialized_block() == b) child.mark_initialized();
  return child;
}

/// Every 3x3 slice of the compressed kernel becomes the mean parent slice;
/// bias becomes the mean parent bias.
inline Network& init_mean_parent(Network& child, const Network& parent, std::size_t b,
                                 MeanMode mode = MeanMode::global) {
  auto& u = detail::compressed_unit(child, b);
  if (b >= parent.block_count()) fail(ErrorKind::invalid_plan, "parent has no block " + std::to_string(b));
  const auto& punits = parent.block(b).units;
  if (punits.size() < 2) fail(ErrorKind::invalid_plan, "parent block " + std::to_string(b) + " is compressed");
  const std::size_t cin = u.conv.in_channels(), cout = u.conv.out_channels();
  if (punits.front().conv.in_channels() != cin || punits.front().conv.out_channels() != cout) {
    fail(ErrorKind::invalid_plan, "compressed layer shape differs from the parent block's first conv");
  }
  float* w = u.conv.weight.data();
  float* bias = u.conv.bias.data();

  if (mode == MeanMode::global) {
    double sum[9] = {};
    std::size_t slices = 0;
    double bias_sum = 0.0;
    std::size_t bias_count = 0;
    for (const auto& pu : punits) {
      const std::size_t ci_n = pu.conv.in_channels(), co_n = pu.conv.out_channels();
      const float* pw = pu.conv.weight.data();
      for (std::size_t k = 0; k < 9; ++k)
        for (std::size_t i = 0; i < ci_n * co_n; ++i) sum[k] += pw[k * ci_n * co_n + i];
      slices += ci_n * co_n;
      for (float v : pu.conv.bias.span()) bias_sum += v;
      bias_count += co_n;
    }
    for (std::size_t k = 0; k < 9; ++k) {
      const auto m = static_cast<float>(sum[k] / static_cast<double>(slices));
      std::fill_n(w + k * cin * cout, cin * cout, m);
    }
    u.conv.bias.fill(static_cast<float>(bias_sum / static_cast<double>(bias_count)));
  } else {
    const auto& first = punits.front().conv;
    const float* pw = first.weight.data();
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t k = 0; k < 9; ++k) {
        double s = 0.0;
        for (std::size_t ci = 0; ci < cin; ++ci) s += pw[(k * cin + ci) * cout + co];
        const auto m = static_cast<float>(s / static_cast<double>(cin));
        for (std::size_t ci = 0; ci < cin; ++ci) w[(k * cin + ci) * cout + co] = m;
      }
      bias[co] = first.bias[co];
    }
  }
  u.bn.reset();
  if (child.uninitialized_block() == b) child.mark_initialized();
  return child;
}

// -- student-teacher ---------------------------------------------------------

/// (1/N) * sum_i ||s_i - t_i||^2 over a batch of N tap activations, and its
/// gradient with respect to s.
inline LossAndGrad<float> stn_loss(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape()) {
    fail(ErrorKind::invalid_plan, "tap shapes differ: " + shape_str(student.shape()) + " vs " + shape_str(teacher.shape()));
  }
  const std::size_t n = student.dim(0);
  Tensor grad(student.shape());
  double sum = 0.0;
  const float* s = student.data();
  const float* t = teacher.data();
  const double scale = 2.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < student.size(); ++i) {
    const double d = static_cast<double>(s[i]) - static_cast<double>(t[i]);
    sum += d * d;
    grad[i] = static_cast<float>(scale * d);
  }
  return {sum / static_cast<double>(n), std::move(grad)};
}

struct StnResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> trace;  // mean batch loss per epoch, measured while training
};

namespace detail {

inline void freeze_all_but(Network& net, std::size_t b) {
  net.set_all_trainable(false);
  net.set_block_trainable(b, true);
}

}  // namespace detail

/// Mean L_STN over `inputs` with the student's compressed batch norm on batch
/// statistics (its training behavior). Neither network is modified.
inline double stn_epoch_loss(const Network& child, const Network& parent, std::size_t b, const Dataset& inputs,
                             std::size_t batch_size) {
  Network s = clone(child);
  Network t = clone(parent);
  detail::freeze_all_but(s, b);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& idx : batches(inputs.size(), batch_size, std::nullopt)) {
    if (idx.size() < 2) continue;
    const Batch batch = gather(inputs, idx);
    const Tensor st = s.forward_to_tap(batch.images, b, Mode::train);
    const Tensor tt = t.forward_to_tap(batch.images, b, Mode::eval);
    total += stn_loss(st, tt).loss * static_cast<double>(idx.size());
    count += idx.size();
  }
  if (count == 0) fail(ErrorKind::degenerate_batch, "STN loss needs at least two inputs");
  return total / static_cast<double>(count);
}

/// Trains the compressed unit of block `b` to reproduce the parent's
/// post-pool activation at that block. Labels are not used.
inline StnResult init_stn(Network& child, const Network& parent, std::size_t b, int stn_epochs, const Dataset& train,
                          const TrainHyper& hyper, std::uint64_t seed) {
  if (stn_epochs < 1) fail(ErrorKind::config_validation, "stn_epochs must be >= 1");
  detail::compressed_unit(child, b);
  if (child.uninitialized_block() == b) fail(ErrorKind::uninitialized_layer, "STN needs a starting state");
  if (child.spec().tap_height(b) != parent.spec().tap_height(b) ||
      child.spec().blocks[b].channels != parent.spec().blocks[b].channels) {
    fail(ErrorKind::invalid_plan, "child and parent taps differ at block " + std::to_string(b));
  }
  Network teacher = clone(parent);
  StnResult result;
  result.initial_loss = stn_epoch_loss(child, parent, b, train, hyper.batch_size);

  detail::freeze_all_but(child, b);
  SGDMomentum opt(hyper.lr, hyper.momentum, hyper.weight_decay);
  for (int e = 0; e < stn_epochs; ++e) {
    double sum = 0.0;
    std::size_t seen = 0;
    for (const auto& idx : batches(train.size(), hyper.batch_size, derive_seed(seed, static_cast<std::uint64_t>(e)))) {
      if (idx.size() < 2) continue;  // batch statistics need two samples
      const Batch batch = gather(train, idx);
      const Tensor st = child.forward_to_tap(batch.images, b, Mode::train);
      const Tensor tt = teacher.forward_to_tap(batch.images, b, Mode::eval);
      const auto lg = stn_loss(st, tt);
      if (!std::isfinite(lg.loss)) fail(ErrorKind::invalid_metric, "STN loss diverged");
      child.backward_from_tap(lg.grad, b);
      opt.step(child.trainable_parameters());
      sum += lg.loss * static_cast<double>(idx.size());
      seen += idx.size();
    }
    result.trace.push_back(sum / static_cast<double>(seen));
  }
  child.set_all_trainable(true);
  result.final_loss = stn_epoch_loss(child, parent, b, train, hyper.batch_size);
  return result;
}

// -- retraining ----------------------------------------------------------------

/// FM trains only block `b` (every other block's batch norm stays in eval
/// mode); TM trains the whole network. Returns per-epoch validation accuracy.
inline AccuracySeries train_compressed(Network& child, std::size_t b, TrainScheme scheme, int comp_epochs,
                                       const TrainingData& data, const TrainHyper& hyper, std::uint64_t seed,
                                       const std::function<void(const EpochReport&)>& on_epoch = {}) {
  if (comp_epochs < 1) fail(ErrorKind::config_validation, "comp_epochs must be >= 1");
  if (child.uninitialized_block()) {
    fail(ErrorKind::uninitialized_layer,
         "block " + std::to_string(*child.uninitialized_block()) + " has not been given an init scheme");
  }
  detail::compressed_unit(child, b);
  if (scheme == TrainScheme::FM) {
    detail::freeze_all_but(child, b);
  } else {
    child.set_all_trainable(true);
  }
  AccuracySeries series = train_network(child, data, hyper, comp_epochs, seed, on_epoch);
  child.set_all_trainable(true);
  return series;
}

/// Suite-wide settings shared by every cell.
struct TriageSettings {
  int comp_epochs = 25;
  int stn_epochs = 12;
  std::uint64_t seed = 0;
  TrainHyper hyper;
  MeanMode mean_mode = MeanMode::global;
  InitScheme stn_start = InitScheme::RW;
  std::size_t jobs = 1;
};

inline std::uint64_t cell_seed(std::uint64_t master, const TriageConfig& c) { return derive_seed(master, c.key()); }

/// One grid cell from a fresh compression of `parent`. The cell seed drives
/// the Glorot draw (stream 0), STN shuffling (stream 1) and retraining (stream 2).
inline ExperimentResult run_cell(const Network& parent, const TriageConfig& cfg, const TrainingData& data,
                                 const TrainHyper& hyper, Network* trained_out = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Network child = structural_compress(parent, cfg.block_index);
  const std::size_t b = cfg.block_index;
  ExperimentResult r;
  r.config = cfg;
  switch (cfg.init) {
    case InitScheme::RW: init_random(child, b, derive_seed(cfg.seed, 0)); break;
    case InitScheme::MW: init_mean_parent(child, parent, b, cfg.mean_mode); break;
    case InitScheme::STN: {
      if (cfg.stn_start == InitScheme::MW) {
        init_mean_parent(child, parent, b, cfg.mean_mode);
      } else {
        init_random(child, b, derive_seed(cfg.seed, 0));
      }
      r.stn_trace = init_stn(child, parent, b, cfg.stn_epochs, *data.train, hyper, derive_seed(cfg.seed, 1)).trace;
      break;
    }
  }
  r.accuracy_series = train_compressed(child, b, cfg.train, cfg.comp_epochs, data, hyper, derive_seed(cfg.seed, 2));
  r.max_accuracy = r.accuracy_series.max();
  r.convergence_epoch = convergence_epoch(r.accuracy_series);
  r.param_count_child = child.param_count();
  if (data.test != nullptr) r.test_accuracy = evaluate_accuracy(child, *data.test);
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (trained_out != nullptr) *trained_out = std::move(child);
  return r;
}

struct TriageGrid {
  std::vector<std::size_t> blocks;
  std::vector<InitScheme> inits{InitScheme::RW, InitScheme::MW, InitScheme::STN};
  std::vector<TrainScheme> trains{TrainScheme::FM, TrainScheme::TM};

  static TriageGrid full(const ModelSpec& spec) {
    TriageGrid g;
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) g.blocks.push_back(b);
    return g;
  }

  std::size_t size() const { return blocks.size() * inits.size() * trains.size(); }
};

/// Cell configurations in grid order (block-major, then init, then train).
inline std::vector<TriageConfig> expand_grid(const TriageGrid& grid, const TriageSettings& s) {
  std::vector<TriageConfig> cells;
  for (std::size_t b : grid.blocks)
    for (InitScheme i : grid.inits)
      for (TrainScheme t : grid.trains) {
        TriageConfig c;
        c.block_index = b;
        c.init = i;
        c.train = t;
        c.comp_epochs = s.comp_epochs;
        c.stn_epochs = s.stn_epochs;
        c.mean_mode = s.mean_mode;
        c.stn_start = s.stn_start;
        c.seed = cell_seed(s.seed, c);
        cells.push_back(c);
      }
  return cells;
}

struct SuiteHooks {
  /// Returns a stored result to skip a cell (resume).
  std::function<std::optional<ExperimentResult>(const TriageConfig&)> lookup;
  /// Called once per freshly computed cell with the trained child,
  /// serialized by the collector.
  std::function<void(const ExperimentResult&, const Network&)> on_result;
};

/// Runs every cell of the grid; each cell owns a clone of `parent`. With
/// jobs > 1 cells run on worker threads; results come back in grid order.
inline std::vector<ExperimentResult> run_triage_suite(const Network& parent, const TriageGrid& grid,
                                                      const TriageSettings& settings, const TrainingData& data,
                                                      const SuiteHooks& hooks = {}) {
  settings.hyper.validate();
  for (std::size_t b : grid.blocks) {
    if (b >= parent.block_count()) fail(ErrorKind::invalid_tap, "block " + std::to_string(b) + " out of range");
  }
  const auto cells = expand_grid(grid, settings);
  std::vector<std::optional<ExperimentResult>> results(cells.size());
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      {
        std::lock_guard lock(mu);
        if (first_error) return;
      }
      try {
        std::optional<ExperimentResult> r;
        if (hooks.lookup) r = hooks.lookup(cells[i]);
        const bool fresh = !r.has_value();
        Network child;
        if (fresh) r = run_cell(parent, cells[i], data, settings.hyper, &child);
        std::lock_guard lock(mu);
        if (fresh && hooks.on_result) hooks.on_result(*r, child);
        results[i] = std::move(r);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(settings.jobs, cells.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  std::vector<ExperimentResult> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

inline std::vector<ExperimentResult> run_triage_suite(const std::filesystem::path& parent_checkpoint,
                                                      const TriageGrid& grid, const TriageSettings& settings,
                                                      const TrainingData& data, const SuiteHooks& hooks = {}) {
  const Network parent = load(parent_checkpoint);
  return run_triage_suite(parent, grid, settings, data, hooks);
}

}  // namespace dnt

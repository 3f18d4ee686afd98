#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>

#include "dnt/data.hpp"
#include "dnt/error.hpp"
#include "dnt/metrics.hpp"
#include "dnt/model.hpp"
#include "dnt/optim.hpp"
#include "dnt/random.hpp"

namespace dnt {

/// Optimizer and schedule settings. Defaults are the MNIST settings used for
/// every run here: lr 1e-3 decaying by 0.5 on plateaus down to 1e-5, weight
/// decay 1e-3, momentum 0.9, patience 1, cooldown 3.
struct TrainHyper {
  double lr = 0.001;
  double lr_min = 0.00001;
  double lr_decay = 0.5;
  double weight_decay = 0.001;
  double momentum = 0.9;
  int patience = 1;
  int cooldown = 3;
  std::size_t batch_size = 32;
  PlateauMonitor monitor = PlateauMonitor::maximize;

  void validate() const {
    auto bad = [](const char* field, const std::string& why) {
      fail(ErrorKind::config_validation, std::string(field) + " " + why);
    };
    if (!(lr > 0.0) || !std::isfinite(lr)) bad("lr", "must be > 0");
    if (!(lr_min > 0.0) || lr_min > lr) bad("lr_min", "must be in (0, lr]");
    if (!(lr_decay > 0.0 && lr_decay < 1.0)) bad("lr_decay", "must be in (0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) bad("weight_decay", "must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) bad("momentum", "must be in [0, 1)");
    if (patience < 0) bad("patience", "must be >= 0");
    if (cooldown < 0) bad("cooldown", "must be >= 0");
    if (batch_size < 1) bad("batch_size", "must be >= 1");
  }
};

/// Preprocessed splits consumed by the training loops.
struct TrainingData {
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
  const Dataset* test = nullptr;  // optional
  double hflip_prob = 0.0;
};

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Eval-mode accuracy and mean cross-entropy over a whole split.
inline Evaluation evaluate(Network& net, const Dataset& ds, std::size_t batch_size = 250) {
  if (ds.size() == 0) fail(ErrorKind::empty_batch, "evaluation on an empty dataset");
  std::size_t correct = 0;
  double loss = 0.0;
  for (const auto& idx : batches(ds.size(), batch_size, std::nullopt)) {
    const Batch b = gather(ds, idx);
    const Tensor logits = net.forward(b.images, Mode::eval);
    correct += count_correct(logits, b.labels);
    loss += softmax_xent(logits, std::span<const std::int32_t>(b.labels)).loss * static_cast<double>(idx.size());
  }
  const double n = static_cast<double>(ds.size());
  return {static_cast<double>(correct) / n, loss / n};
}

inline double evaluate_accuracy(Network& net, const Dataset& ds) { return evaluate(net, ds).accuracy; }

struct EpochReport {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

/// One pass over the training split with the network's current trainability.
/// Returns the mean batch loss.
inline double train_one_epoch(Network& net, SGDMomentum& opt, const TrainingData& data, std::size_t batch_size,
                              std::uint64_t epoch_seed) {
  const Dataset& train = *data.train;
  const Preprocessor flipper(std::nullopt, data.hflip_prob);
  double loss_sum = 0.0;
  std::size_t step = 0;
  const auto plan = batches(train.size(), batch_size, epoch_seed);
  for (const auto& idx : plan) {
    if (idx.size() < 2) continue;  // a lone trailing sample has no batch statistics
    Batch b = augment_batch(gather(train, idx), flipper, derive_seed(epoch_seed, step));
    const Tensor logits = net.forward(b.images, Mode::train);
    const auto lg = softmax_xent(logits, std::span<const std::int32_t>(b.labels));
    if (!std::isfinite(lg.loss)) fail(ErrorKind::invalid_metric, "training loss diverged");
    net.backward(lg.grad);
    opt.step(net.trainable_parameters());
    loss_sum += lg.loss;
    ++step;
  }
  if (step == 0) fail(ErrorKind::degenerate_batch, "training split needs at least two samples");
  return loss_sum / static_cast<double>(step);
}

/// Trains for `epochs` epochs with SGD momentum and a plateau schedule driven
/// by validation accuracy (or validation loss with PlateauMonitor::minimize).
/// Returns the per-epoch validation accuracies.
inline AccuracySeries train_network(Network& net, const TrainingData& data, const TrainHyper& hyper, int epochs,
                                    std::uint64_t seed,
                                    const std::function<void(const EpochReport&)>& on_epoch = {}) {
  hyper.validate();
  if (epochs < 1) fail(ErrorKind::config_validation, "epochs must be >= 1");
  if (data.train == nullptr || data.val == nullptr) fail(ErrorKind::config_validation, "train and val splits required");
  SGDMomentum opt(hyper.lr, hyper.momentum, hyper.weight_decay);
  PlateauScheduler sched(hyper.lr, hyper.lr_decay, hyper.patience, hyper.cooldown, hyper.lr_min, hyper.monitor);
  AccuracySeries series;
  for (int e = 0; e < epochs; ++e) {
    const double loss = train_one_epoch(net, opt, data, hyper.batch_size, derive_seed(seed, static_cast<std::uint64_t>(e)));
    const Evaluation ev = evaluate(net, *data.val);
    const double acc = ev.accuracy;
    series.push_back(acc);
    const double lr = sched.update(hyper.monitor == PlateauMonitor::maximize ? acc : ev.loss);
    opt.set_lr(lr);
    if (on_epoch) on_epoch({static_cast<std::size_t>(e), loss, acc, lr});
  }
  return series;
}

}  // namespace dnt

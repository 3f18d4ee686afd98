// dnt: train a parent network, run the triage grid, dump activations,
// and assemble result tables.

#include <iostream>
#include <map>
#include <utility>
#include <string>

#include <CLI11.hpp>

#include "dnt/cli.hpp"

namespace {

void add_common(CLI::App* cmd, dnt::RunConfig& c, std::string& manifest) {
  static const std::map<std::string, dnt::PlateauMonitor> monitors{{"val_accuracy", dnt::PlateauMonitor::maximize},
                                                                    {"val_loss", dnt::PlateauMonitor::minimize}};
  cmd->add_option("--dataset", c.dataset, "mnist or synth")->check(CLI::IsMember({"mnist", "synth"}));
  cmd->add_option("--data-dir", c.data_dir, "directory holding the MNIST IDX files");
  cmd->add_option("--out-dir", c.out_dir, "run directory");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--epochs", c.epochs, "baseline training epochs");
  cmd->add_option("--lr", c.hyper.lr, "initial learning rate");
  cmd->add_option("--lr-min", c.hyper.lr_min, "learning-rate floor");
  cmd->add_option("--lr-decay", c.hyper.lr_decay, "plateau decay factor");
  cmd->add_option("--weight-decay", c.hyper.weight_decay, "L2 weight decay");
  cmd->add_option("--momentum", c.hyper.momentum, "SGD momentum");
  cmd->add_option("--patience", c.hyper.patience, "plateau patience (epochs)");
  cmd->add_option("--cooldown", c.hyper.cooldown, "plateau cooldown (epochs)");
  cmd->add_option("--monitor", c.hyper.monitor, "plateau metric: val_accuracy or val_loss")
      ->transform(CLI::CheckedTransformer(monitors));
  cmd->add_option("--batch-size", c.hyper.batch_size, "minibatch size");
  cmd->add_option("--comp-epochs", c.comp_epochs, "epochs after compression");
  cmd->add_option("--stn-epochs", c.stn_epochs, "student-teacher epochs");
  cmd->add_option("--blocks", c.blocks, "blocks to compress (viz: block to image)")->delimiter(',');
  cmd->add_option("--init", c.inits, "init schemes: rw, mw, stn")->delimiter(',');
  cmd->add_option("--train", c.trains, "training schemes: fm, tm")->delimiter(',');
  cmd->add_option("--jobs", c.jobs, "parallel grid cells");
  cmd->add_option("--image-index", c.image_index, "test image for viz");
  cmd->add_option("--filters", c.filters, "channels to image");
  cmd->add_option("--models", c.models, "viz models: baseline or cell keys like block0-RW-TM")->delimiter(',');
  cmd->add_option("--mean-mode", c.mean_mode, "global or per_output_channel");
  cmd->add_option("--stn-start", c.stn_start, "rw or mw");
  cmd->add_option("--convergence", c.convergence, "multiplicative (frac*max) or additive (max-0.01)")
      ->check(CLI::IsMember({"multiplicative", "additive"}));
  cmd->add_option("--hflip", c.hflip, "horizontal flip probability");
  cmd->add_option("--val-count", c.val_count, "MNIST samples held out for validation");
  cmd->add_option("--train-limit", c.train_limit, "use only the first N training samples");
  cmd->add_option("--val-limit", c.val_limit, "use only the first N validation samples");
  cmd->add_option("--from-manifest", manifest, "rerun with the config recorded in a manifest");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep net triage"};
  app.require_subcommand(1);
  dnt::RunConfig cfg;
  std::string manifest;
  const std::pair<const char*, const char*> commands[] = {
      {"train-base", "train the parent network and write baseline.ckpt"},
      {"triage", "compress each block, initialize, retrain; write results.csv/json"},
      {"viz", "dump per-channel activation images as PGM"},
      {"report", "rebuild results.csv/json from stored cell records"},
  };
  for (const auto& [n, help] : commands) add_common(app.add_subcommand(n, help), cfg, manifest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (!manifest.empty()) {
      const auto out_dir = cfg.out_dir;
      const bool out_given = app.get_subcommands().front()->count("--out-dir") > 0;
      cfg = dnt::load_manifest(manifest);
      if (out_given) cfg.out_dir = out_dir;
    }
    if (cmd == "train-base") {
      dnt::cmd_train_base(cfg);
    } else if (cmd == "triage") {
      dnt::cmd_triage(cfg);
    } else if (cmd == "viz") {
      dnt::cmd_viz(cfg);
    } else {
      dnt::cmd_report(cfg);
    }
  } catch (const dnt::Error& e) {
    std::cerr << "error (" << dnt::to_string(e.kind()) << "): " << e.what() << "\n";
    return dnt::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

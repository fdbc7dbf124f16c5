#include "maggie/harness.hpp"
#include "maggie/image_io.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace maggie;

namespace {

enum Exit { kOk = 0, kFailure = 1, kInput = 2, kCompat = 3 };

struct Common {
  std::string config, out;
  std::uint64_t seed = 0;
  bool seed_given = false, deterministic = false, quiet = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Config file (flat key = value)");
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_flag("--deterministic", c.deterministic, "Deterministic execution");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--set", c.overrides, "Config override key=value (repeatable)");
  cmd->add_flag("--quiet", c.quiet, "Suppress progress output");
}

harness::RunOptions make_run(const Common& c, CLI::App* cmd) {
  harness::RunOptions run;
  run.config = c.config.empty() ? harness::Config::defaults() : harness::Config::load(c.config);
  for (const auto& o : c.overrides) run.config.apply_override(o);
  run.seed = cmd->count("--seed") ? c.seed : static_cast<std::uint64_t>(run.config.integer("seed"));
  run.config.set("seed", std::to_string(run.seed));
  run.deterministic = c.deterministic;
  run.out = c.out;
  run.quiet = c.quiet;
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maggie: mask-guided instance matting toolkit"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "Synthesize a dataset");
  add_common(synth, common);
  harness::SynthOptions synth_opt;
  std::string tier, assets, mask_mode;
  synth->add_option("--count", synth_opt.count, "Number of samples");
  synth->add_option("--tier", tier, "easy | medium | hard");
  synth->add_option("--kind", synth_opt.kind, "video | image");
  synth->add_option("--mask-mode", mask_mode, "train | eval");
  synth->add_option("--assets", assets, "Asset store directory (fg/, bg/)");

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, common);
  harness::TrainOptions train_opt;
  std::string data, resume;
  std::int64_t steps = -1;
  train->add_option("--data", data, "Dataset directory");
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--steps", steps, "Total optimisation steps");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  add_common(eval, common);
  harness::EvalOptions eval_opt;
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file");
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_flag("--identity", eval_opt.identity, "Score ground truth against itself");
  eval->add_flag("--force", eval_opt.force, "Accept a config hash mismatch");

  auto* infer = app.add_subcommand("infer", "Predict alpha mattes for a frame sequence");
  add_common(infer, common);
  harness::InferOptions infer_opt;
  std::string frames_dir, masks_dir;
  infer->add_option("--checkpoint", checkpoint, "Checkpoint file");
  infer->add_option("--frames", frames_dir, "Frame directory (%04d.png)")->required();
  infer->add_option("--masks", masks_dir, "Mask directory (<inst>/%04d.png)")->required();
  infer->add_flag("--preview", infer_opt.preview, "Also write foreground previews");

  auto* bench = app.add_subcommand("bench", "Latency and memory versus instance count");
  add_common(bench, common);
  harness::BenchOptions bench_opt;
  std::vector<std::int64_t> counts;
  bench->add_option("--checkpoint", checkpoint, "Checkpoint file");
  bench->add_option("--instances", counts, "Instance counts (first is the baseline)")->delimiter(',');
  bench->add_option("--runs", bench_opt.runs, "Timed runs per count");
  bench->add_flag("!--no-sequential", bench_opt.sequential, "Skip the sequential single-instance loop");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInput;
  }

  try {
    if (synth->parsed()) {
      auto run = make_run(common, synth);
      if (!tier.empty()) run.config.set("synth.tier", tier);
      if (!mask_mode.empty()) run.config.set("synth.mask_mode", mask_mode);
      if (!synth->count("--count")) synth_opt.count = run.config.integer("synth.count");
      if (!synth->count("--kind")) synth_opt.kind = run.config.get("synth.kind");
      if (assets.empty()) assets = run.config.get("synth.assets");
      if (!assets.empty()) synth_opt.assets = assets;
      harness::run_synth(run, synth_opt);
    } else if (train->parsed()) {
      auto run = make_run(common, train);
      if (steps >= 0) run.config.set("optim.steps", std::to_string(steps));
      train_opt.data = data;
      if (!resume.empty()) train_opt.resume = resume;
      harness::run_train(run, train_opt);
    } else if (eval->parsed()) {
      auto run = make_run(common, eval);
      eval_opt.data = data;
      eval_opt.config_given = !common.config.empty() || !common.overrides.empty();
      if (!checkpoint.empty()) eval_opt.checkpoint = checkpoint;
      harness::run_eval(run, eval_opt);
    } else if (infer->parsed()) {
      auto run = make_run(common, infer);
      infer_opt.frames = frames_dir;
      infer_opt.masks = masks_dir;
      if (!checkpoint.empty()) infer_opt.checkpoint = checkpoint;
      harness::run_infer(run, infer_opt);
    } else if (bench->parsed()) {
      auto run = make_run(common, bench);
      bench_opt.instances = counts.empty() ? run.config.integers("bench.instances") : counts;
      if (!bench->count("--runs")) bench_opt.runs = run.config.integer("bench.runs");
      if (!checkpoint.empty()) bench_opt.checkpoint = checkpoint;
      harness::run_bench(run, bench_opt);
    }
  } catch (const harness::CompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCompat;
  } catch (const harness::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const io::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const synth::GenerationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

#pragma once

// Run configuration, optimiser, checkpoints and the CLI command bodies
// (synth, train, eval, infer, bench).

#include "maggie/metrics.hpp"
#include "maggie/model.hpp"
#include "maggie/synth.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace maggie::harness {

/// Bad paths, malformed config or inputs. CLI exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config hash or tensor shape mismatch between artifacts. CLI exit code 3.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss during training.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

/// Flat key = value settings. `[section]` headers prefix the keys that
/// follow with "section.". Only keys present in the defaults are accepted.
class Config {
 public:
  static Config defaults();
  static Config parse(const std::string& text, const std::string& origin = "config");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  /// "key=value".
  void apply_override(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::int64_t> integers(const std::string& key) const;

  /// Sorted "key = value" lines; parse(to_string()) reproduces the config.
  std::string to_string() const;
  /// FNV-1a over the model.* and refine.* entries: equal hashes mean
  /// interchangeable parameter layouts and inference behaviour.
  std::uint64_t hash() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::string hash_hex(std::uint64_t h);

ModelConfig model_config(const Config& cfg);
LossWeights loss_weights(const Config& cfg);
synth::SynthConfig synth_config(const Config& cfg);
metrics::EvalOptions eval_options(const Config& cfg);

// ---------------------------------------------------------------------------
// Optimiser

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t warmup = 50;
  std::int64_t total_steps = 1000;
  double min_lr_ratio = 0.05;
  double clip = 0.0;  // global gradient-norm clip, 0 = off
};

AdamWConfig adamw_config(const Config& cfg);

/// Linear warm-up over `warmup` steps, then cosine decay to lr·min_lr_ratio
/// at total_steps. `step` is 0-based.
double learning_rate(const AdamWConfig& c, std::int64_t step);

/// Decoupled weight decay Adam. Decay applies to tensors of rank ≥ 2 only.
class AdamW {
 public:
  AdamW(ParameterSet<float>& params, const AdamWConfig& cfg);

  /// Applies one update from the accumulated gradients scaled by
  /// `grad_scale`, then clears them. Returns the pre-clip gradient norm.
  double step(double grad_scale = 1.0);

  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }
  std::vector<Tensor<float>>& first_moment() { return m_; }
  std::vector<Tensor<float>>& second_moment() { return v_; }
  const std::vector<Tensor<float>>& first_moment() const { return m_; }
  const std::vector<Tensor<float>>& second_moment() const { return v_; }

 private:
  ParameterSet<float>* params_;
  AdamWConfig cfg_;
  std::vector<Tensor<float>> m_, v_;
  std::int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  std::string config_text;
  std::uint64_t config_hash = 0;
  std::int64_t step = 0;
  std::vector<NamedTensor> params, moment1, moment2;  // moments may be empty
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint capture(const MaggieModel<float>& model, const AdamW* opt, const Config& cfg, std::int64_t step);
/// Copies parameters (and moments when `opt` is given) into place. Name or
/// shape mismatches raise CompatibilityError.
void restore(const Checkpoint& ck, MaggieModel<float>& model, AdamW* opt);

// ---------------------------------------------------------------------------
// Commands

struct RunOptions {
  Config config = Config::defaults();
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::filesystem::path out;
  bool quiet = false;
};

struct SynthOptions {
  std::int64_t count = 4;
  std::string kind = "video";  // video | image
  std::optional<std::filesystem::path> assets;
};

/// Writes <out>/<%04d>/ samples and <out>/manifest.json. Returns the manifest.
nlohmann::json run_synth(const RunOptions& run, const SynthOptions& opt);

struct TrainOptions {
  std::filesystem::path data;
  std::optional<std::filesystem::path> resume;
};

/// Writes <out>/log.jsonl, <out>/checkpoints/step_%06d.bin, <out>/final.bin
/// and <out>/manifest.json. Returns the manifest.
nlohmann::json run_train(const RunOptions& run, const TrainOptions& opt);

struct EvalOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::filesystem::path data;
  bool identity = false;  // score ground truth against itself
  bool force = false;     // accept a config hash mismatch
  bool config_given = false;
};

/// Writes <out>/metrics.json (aggregate), <out>/per_video/<name>.json and
/// <out>/manifest.json. Returns the aggregate report JSON.
nlohmann::json run_eval(const RunOptions& run, const EvalOptions& opt);

struct InferOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::filesystem::path frames;  // %04d.png
  std::filesystem::path masks;   // <inst>/%04d.png
  bool preview = false;
};

/// Writes <out>/<inst>/%04d.png (16-bit) and optionally <out>/preview/.
nlohmann::json run_infer(const RunOptions& run, const InferOptions& opt);

struct BenchOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::vector<std::int64_t> instances{1, 2, 4, 8};
  std::int64_t runs = 20;
  bool sequential = true;
};

struct BenchRow {
  std::int64_t instances = 0;
  double median_ms = 0, latency_ratio = 1;
  double peak_mb = 0, memory_ratio = 1;
  double sequential_ms = 0, sequential_ratio = 1;
};

std::vector<BenchRow> run_bench(const RunOptions& run, const BenchOptions& opt);

/// Forward pass in inference mode. frames [T, 3, H, W] → alpha [T, N, H, W].
TensorD predict(const MaggieModel<float>& model, const TensorD& frames, const Tensor<std::uint8_t>& masks);

/// Model from a checkpoint (config embedded in it) or freshly initialised
/// from `run.config` when no checkpoint is given.
std::unique_ptr<MaggieModel<float>> load_model(const RunOptions& run,
                                               const std::optional<std::filesystem::path>& checkpoint,
                                               Config* effective = nullptr);

}  // namespace maggie::harness

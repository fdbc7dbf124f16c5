#pragma once

// Multi-instance compositing, guidance-mask perturbation and tiered video
// synthesis on procedural (or directory-loaded) assets.

#include "maggie/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace maggie::synth {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ForegroundAsset {
  TensorD rgb;    // [3, h, w] in [0, 1]
  TensorD alpha;  // [h, w] in [0, 1]
  Index height() const { return alpha.dim(0); }
  Index width() const { return alpha.dim(1); }
};

/// One asset placed with its top-left corner at (y, x).
struct Layer {
  const ForegroundAsset* asset = nullptr;
  Index y = 0, x = 0;
};

struct Composite {
  TensorD frame;   // [3, H, W]
  TensorD alphas;  // [L, H, W], occlusion-adjusted, in layer order
};

/// Back-to-front compositing: image ← α F + (1 − α) image, and
/// α′_i = α_i Π_{j in front of i} (1 − α_j). Layers must lie fully inside.
Composite composite(const std::vector<Layer>& back_to_front, const TensorD& background);

// ---------------------------------------------------------------------------
// Guidance masks

struct PerturbConfig {
  Index kernel_min = 3;
  Index kernel_max = 30;
  double dropout = 0.1;
};

enum class Morph { Dilate, Erode };

/// Deterministic form: binarise at 0.5, then dilate/erode with an
/// odd-sided square, then optionally drop the whole mask.
std::vector<std::uint8_t> perturb_mask(const double* alpha, Index h, Index w, Morph op, Index kernel, bool drop);

/// Random form: op 50/50, odd kernel uniform in [kernel_min, kernel_max],
/// dropout with the configured probability.
std::vector<std::uint8_t> perturb_mask(const double* alpha, Index h, Index w, const PerturbConfig& cfg,
                                       std::mt19937_64& rng);

/// Max pairwise IoU over instance supports; 0 with fewer than two instances.
/// masks: N planes of h×w binary values.
double measure_occlusion(const std::vector<std::vector<std::uint8_t>>& masks);

/// Makes [T, N, H, W] masks at-most-one-hot: a pixel claimed by several
/// instances goes to the one with the larger gt alpha (ties: lower index).
void resolve_conflicts(Tensor<std::uint8_t>& masks, const TensorD& gt);

// ---------------------------------------------------------------------------
// Assets

/// Soft-edged body-and-head silhouette with a smooth colour texture. `phase`
/// animates a gentle wobble.
ForegroundAsset procedural_asset(Index h, Index w, std::uint64_t seed, double phase);
TensorD procedural_background(Index h, Index w, std::uint64_t seed);

/// Bilinear resize of an asset.
ForegroundAsset resize_asset(const ForegroundAsset& a, Index h, Index w);

struct AssetStore {
  std::vector<std::string> fg_ids, bg_ids;
  std::vector<ForegroundAsset> fg;
  std::vector<TensorD> bg;  // [3, H, W]
};

/// fg/<id>/rgb.png + fg/<id>/alpha.png (16-bit), bg/<id>.png.
AssetStore load_asset_store(const std::filesystem::path& root);
void write_asset_store(const std::filesystem::path& root, const AssetStore& store);
AssetStore procedural_store(Index fg_count, Index bg_count, Index h, Index w, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Samples

enum class Tier { Easy, Medium, Hard };
enum class MaskMode { Train, Eval };

std::optional<Tier> parse_tier(const std::string& s);
std::string tier_name(Tier t);
/// Occlusion range [lo, hi] of a tier.
std::pair<double, double> tier_range(Tier t);

struct SynthConfig {
  Index height = 64;
  Index width = 64;
  Index frames = 30;
  Tier tier = Tier::Easy;
  MaskMode mask_mode = MaskMode::Train;
  Index min_instances = 2;
  Index max_instances = 3;  // medium/hard allow up to 5
  PerturbConfig perturb;
  PerturbConfig eval_perturb{3, 5, 0.0};
  double max_drift = 0.6;  // pixels per frame
  int max_retries = 200;
  double image_max_iou = 0.30;
};

struct Sample {
  TensorD frames;               // [T, 3, H, W]
  TensorD alphas;               // [T, N, H, W]
  Tensor<std::uint8_t> masks;   // [T, N, H, W]
  nlohmann::json manifest;
  // Compositing sources, kept in memory only.
  TensorD foregrounds;  // [T, N, 3, H, W] placed colours, zero off the asset
  TensorD background;   // [3, H, W]
  Index num_frames() const { return frames.dim(0); }
  Index num_instances() const { return alphas.dim(1); }
};

/// max |frame − Σ α′ F − (1 − Σ α′) B| over a sample's in-memory sources.
double reconstruction_error(const Sample& s);

/// Per-frame max pairwise IoU of the (pre-occlusion) instance supports.
std::vector<double> occlusion_per_frame(const std::vector<std::vector<std::vector<std::uint8_t>>>& supports);

/// Video sample satisfying the tier's occlusion range at every frame.
/// Uses procedural assets when `store` is null.
Sample synthesize_video(const SynthConfig& cfg, std::uint64_t seed, const AssetStore* store = nullptr);

/// Single-frame sample with 2..5 instances and pairwise IoU ≤ image_max_iou.
Sample synthesize_image(const SynthConfig& cfg, std::uint64_t seed, const AssetStore* store = nullptr);

/// N instances of equal size laid out on a non-overlapping grid (benchmark scenes).
Sample synthesize_grid(Index height, Index width, Index instances, Index asset_h, Index asset_w, std::uint64_t seed);

/// frames/%04d.png, alpha/<inst>/%04d.png (16-bit), mask/<inst>/%04d.png, manifest.json.
void write_sample(const std::filesystem::path& dir, const Sample& s);
Sample read_sample(const std::filesystem::path& dir);
/// Sample directories under `root` in sorted order.
std::vector<std::filesystem::path> list_samples(const std::filesystem::path& root);

}  // namespace maggie::synth

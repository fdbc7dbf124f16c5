#include "maggie/synth.hpp"

#include "maggie/image_io.hpp"
#include "maggie/morphology.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace maggie::synth {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
Index uniform_int(std::mt19937_64& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

TensorD resize_planes(const TensorD& src, Index h, Index w) {
  const Index c = src.dim(0), sh = src.dim(1), sw = src.dim(2);
  TensorD out({c, h, w});
  for (Index y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * static_cast<double>(sh) / static_cast<double>(h) - 0.5,
                                 0.0, static_cast<double>(sh - 1));
    const Index y0 = static_cast<Index>(std::floor(fy)), y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Index x = 0; x < w; ++x) {
      const double fx = std::clamp(
          (static_cast<double>(x) + 0.5) * static_cast<double>(sw) / static_cast<double>(w) - 0.5, 0.0,
          static_cast<double>(sw - 1));
      const Index x0 = static_cast<Index>(std::floor(fx)), x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - static_cast<double>(x0);
      for (Index k = 0; k < c; ++k)
        out(k, y, x) = (1 - wy) * ((1 - wx) * src(k, y0, x0) + wx * src(k, y0, x1)) +
                       wy * ((1 - wx) * src(k, y1, x0) + wx * src(k, y1, x1));
    }
  }
  return out;
}

std::vector<std::uint8_t> binarize(const double* a, Index n, double thresh) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) out[static_cast<std::size_t>(k)] = a[k] >= thresh ? 1 : 0;
  return out;
}

// Draws an odd kernel side uniformly from the odd values in [lo, hi].
Index odd_kernel(std::mt19937_64& rng, Index lo, Index hi) {
  const Index first = lo % 2 ? lo : lo + 1;
  const Index last = hi % 2 ? hi : hi - 1;
  if (last < first) return std::max<Index>(1, first);
  return first + 2 * uniform_int(rng, 0, (last - first) / 2);
}

}  // namespace

// ---------------------------------------------------------------------------

Composite composite(const std::vector<Layer>& layers, const TensorD& background) {
  require(background.rank() == 3 && background.dim(0) == 3, "composite: background must be [3, H, W]");
  const Index H = background.dim(1), W = background.dim(2), L = static_cast<Index>(layers.size());
  Composite out{background, TensorD({L, H, W})};
  for (Index l = 0; l < L; ++l) {
    const auto& layer = layers[static_cast<std::size_t>(l)];
    require(layer.asset != nullptr, "composite: null asset");
    const Index h = layer.asset->height(), w = layer.asset->width();
    if (layer.y < 0 || layer.x < 0 || layer.y + h > H || layer.x + w > W)
      throw ValidationError("composite: placement out of bounds");
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const double a = layer.asset->alpha(y, x);
        if (a <= 0) continue;
        const Index fy = layer.y + y, fx = layer.x + x;
        for (Index c = 0; c < 3; ++c)
          out.frame(c, fy, fx) = a * layer.asset->rgb(c, y, x) + (1 - a) * out.frame(c, fy, fx);
        for (Index k = 0; k < l; ++k) out.alphas(k, fy, fx) *= (1 - a);
        out.alphas(l, fy, fx) = a;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> perturb_mask(const double* alpha, Index h, Index w, Morph op, Index kernel, bool drop) {
  require(kernel >= 1, "perturb_mask: kernel must be >= 1");
  auto bin = binarize(alpha, h * w, 0.5);
  if (drop) return std::vector<std::uint8_t>(bin.size(), 0);
  return op == Morph::Dilate ? morph::dilate(bin, h, w, kernel) : morph::erode(bin, h, w, kernel);
}

std::vector<std::uint8_t> perturb_mask(const double* alpha, Index h, Index w, const PerturbConfig& cfg,
                                       std::mt19937_64& rng) {
  require(cfg.kernel_min >= 1 && cfg.kernel_max >= cfg.kernel_min, "perturb_mask: bad kernel range");
  const Morph op = uniform(rng, 0, 1) < 0.5 ? Morph::Dilate : Morph::Erode;
  const Index k = odd_kernel(rng, cfg.kernel_min, cfg.kernel_max);
  const bool drop = uniform(rng, 0, 1) < cfg.dropout;
  return perturb_mask(alpha, h, w, op, k, drop);
}

double measure_occlusion(const std::vector<std::vector<std::uint8_t>>& masks) {
  double best = 0;
  for (std::size_t a = 0; a < masks.size(); ++a)
    for (std::size_t b = a + 1; b < masks.size(); ++b) {
      require(masks[a].size() == masks[b].size(), "measure_occlusion: size mismatch");
      std::size_t inter = 0, uni = 0;
      for (std::size_t k = 0; k < masks[a].size(); ++k) {
        inter += masks[a][k] && masks[b][k];
        uni += masks[a][k] || masks[b][k];
      }
      if (uni) best = std::max(best, static_cast<double>(inter) / static_cast<double>(uni));
    }
  return best;
}

void resolve_conflicts(Tensor<std::uint8_t>& masks, const TensorD& gt) {
  require(masks.shape() == gt.shape(), "resolve_conflicts: shape mismatch");
  const Index frames = masks.dim(0), n = masks.dim(1), hw = masks.dim(2) * masks.dim(3);
  for (Index t = 0; t < frames; ++t)
    for (Index p = 0; p < hw; ++p) {
      Index best = -1, claims = 0;
      for (Index i = 0; i < n; ++i)
        if (masks.plane(t, i)[p]) {
          ++claims;
          if (best < 0 || gt.plane(t, i)[p] > gt.plane(t, best)[p]) best = i;
        }
      if (claims > 1)
        for (Index i = 0; i < n; ++i) masks.plane(t, i)[p] = i == best ? 1 : 0;
    }
}

// ---------------------------------------------------------------------------

ForegroundAsset procedural_asset(Index h, Index w, std::uint64_t seed, double phase) {
  require(h >= 8 && w >= 8, "procedural_asset: asset too small");
  std::mt19937_64 rng(seed);
  const double hw = static_cast<double>(w), hh = static_cast<double>(h);
  const double soft = 1.5;
  const double body_rx = hw * uniform(rng, 0.32, 0.40), body_ry = hh * uniform(rng, 0.26, 0.31);
  const double head_r = std::min(hw, hh) * uniform(rng, 0.14, 0.19);
  const double col[3] = {uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95)};
  const double fx = uniform(rng, 0.2, 0.6), fy = uniform(rng, 0.2, 0.6), tex_phase = uniform(rng, 0, 2 * kPi);
  const double wob = 0.06 * hw;
  const double bcx = 0.5 * hw + wob * std::sin(phase), bcy = 0.62 * hh;
  const double hcx = 0.5 * hw + wob * std::sin(phase + 1.3), hcy = 0.29 * hh + 0.02 * hh * std::cos(phase);
  ForegroundAsset a{TensorD({3, h, w}), TensorD({h, w})};
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double eb = std::hypot((px - bcx) / body_rx, (py - bcy) / body_ry);
      const double db = (eb - 1.0) * std::min(body_rx, body_ry);
      const double dh = std::hypot(px - hcx, py - hcy) - head_r;
      const double d = std::min(db, dh);
      a.alpha(y, x) = std::clamp(0.5 - d / soft, 0.0, 1.0);
      const double tex = 0.12 * std::sin(fx * px + fy * py + tex_phase);
      for (Index c = 0; c < 3; ++c)
        a.rgb(c, y, x) = std::clamp(col[c] + tex * (c == 1 ? -1.0 : 1.0), 0.0, 1.0);
    }
  // Keep the support strictly inside the box.
  for (Index y = 0; y < h; ++y) a.alpha(y, 0) = a.alpha(y, w - 1) = 0;
  for (Index x = 0; x < w; ++x) a.alpha(0, x) = a.alpha(h - 1, x) = 0;
  return a;
}

TensorD procedural_background(Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TensorD bg({3, h, w});
  double base[3], grad[3], amp[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = uniform(rng, 0.2, 0.8);
    grad[c] = uniform(rng, -0.25, 0.25);
    amp[c] = uniform(rng, 0.03, 0.12);
  }
  const double fx = uniform(rng, 0.05, 0.35), fy = uniform(rng, 0.05, 0.35), ph = uniform(rng, 0, 2 * kPi);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double u = static_cast<double>(y) / static_cast<double>(h);
      const double wave = std::sin(fx * static_cast<double>(x) + ph) * std::cos(fy * static_cast<double>(y));
      for (int c = 0; c < 3; ++c) bg(c, y, x) = std::clamp(base[c] + grad[c] * u + amp[c] * wave + noise(rng), 0.0, 1.0);
    }
  return bg;
}

ForegroundAsset resize_asset(const ForegroundAsset& a, Index h, Index w) {
  ForegroundAsset out;
  out.rgb = resize_planes(a.rgb, h, w);
  out.alpha = resize_planes(a.alpha.reshaped({1, a.height(), a.width()}), h, w).reshaped({h, w});
  return out;
}

AssetStore load_asset_store(const fs::path& root) {
  if (!fs::is_directory(root / "fg") || !fs::is_directory(root / "bg"))
    throw io::IoError("asset store needs fg/ and bg/ under " + root.string());
  AssetStore s;
  std::vector<fs::path> fgs, bgs;
  for (const auto& e : fs::directory_iterator(root / "fg"))
    if (e.is_directory()) fgs.push_back(e.path());
  for (const auto& e : fs::directory_iterator(root / "bg"))
    if (e.path().extension() == ".png") bgs.push_back(e.path());
  std::sort(fgs.begin(), fgs.end());
  std::sort(bgs.begin(), bgs.end());
  for (const auto& p : fgs) {
    ForegroundAsset a{io::read_rgb(p / "rgb.png"), io::read_gray(p / "alpha.png")};
    if (a.rgb.dim(1) != a.alpha.dim(0) || a.rgb.dim(2) != a.alpha.dim(1))
      throw io::IoError("rgb/alpha size mismatch in " + p.string());
    s.fg_ids.push_back(p.filename().string());
    s.fg.push_back(std::move(a));
  }
  for (const auto& p : bgs) {
    s.bg_ids.push_back(p.stem().string());
    s.bg.push_back(io::read_rgb(p));
  }
  if (s.fg.empty() || s.bg.empty()) throw io::IoError("asset store is empty: " + root.string());
  return s;
}

void write_asset_store(const fs::path& root, const AssetStore& store) {
  for (std::size_t k = 0; k < store.fg.size(); ++k) {
    const auto& a = store.fg[k];
    const fs::path dir = root / "fg" / store.fg_ids[k];
    io::write_rgb8(dir / "rgb.png", a.rgb.data(), a.height(), a.width());
    io::write_gray16(dir / "alpha.png", a.alpha.data(), a.height(), a.width());
  }
  for (std::size_t k = 0; k < store.bg.size(); ++k)
    io::write_rgb8(root / "bg" / (store.bg_ids[k] + ".png"), store.bg[k].data(), store.bg[k].dim(1),
                   store.bg[k].dim(2));
}

AssetStore procedural_store(Index fg_count, Index bg_count, Index h, Index w, std::uint64_t seed) {
  AssetStore s;
  char id[32];
  for (Index k = 0; k < fg_count; ++k) {
    std::snprintf(id, sizeof id, "%04d", static_cast<int>(k));
    s.fg_ids.push_back(id);
    s.fg.push_back(procedural_asset(h, w, mix(seed, 2 * static_cast<std::uint64_t>(k)), 0.0));
  }
  for (Index k = 0; k < bg_count; ++k) {
    std::snprintf(id, sizeof id, "%04d", static_cast<int>(k));
    s.bg_ids.push_back(id);
    s.bg.push_back(procedural_background(h * 2, w * 2, mix(seed, 2 * static_cast<std::uint64_t>(k) + 1)));
  }
  return s;
}

// ---------------------------------------------------------------------------

std::optional<Tier> parse_tier(const std::string& s) {
  if (s == "easy") return Tier::Easy;
  if (s == "medium") return Tier::Medium;
  if (s == "hard") return Tier::Hard;
  return std::nullopt;
}

std::string tier_name(Tier t) {
  switch (t) {
    case Tier::Easy: return "easy";
    case Tier::Medium: return "medium";
    case Tier::Hard: return "hard";
  }
  return "?";
}

std::pair<double, double> tier_range(Tier t) {
  switch (t) {
    case Tier::Easy: return {0.0, 0.0};
    case Tier::Medium: return {0.05, 0.50};
    case Tier::Hard: return {0.50, 0.85};
  }
  return {0.0, 0.0};
}

std::vector<double> occlusion_per_frame(const std::vector<std::vector<std::vector<std::uint8_t>>>& supports) {
  std::vector<double> out;
  for (const auto& frame : supports) out.push_back(measure_occlusion(frame));
  return out;
}

namespace {

// A moving instance: one asset per frame plus a linear trajectory.
struct Track {
  std::vector<ForegroundAsset> frames;  // size 1 for static assets
  double y0 = 0, x0 = 0, vy = 0, vx = 0;
  std::string asset_id;

  const ForegroundAsset& at(Index t) const { return frames[frames.size() == 1 ? 0 : static_cast<std::size_t>(t)]; }
  Index py(Index t) const { return static_cast<Index>(std::lround(y0 + vy * static_cast<double>(t))); }
  Index px(Index t) const { return static_cast<Index>(std::lround(x0 + vx * static_cast<double>(t))); }
  Index height() const { return frames[0].height(); }
  Index width() const { return frames[0].width(); }
};

Track make_track(Index h, Index w, Index frames, std::mt19937_64& rng, const AssetStore* store) {
  Track tr;
  if (store) {
    const Index k = uniform_int(rng, 0, static_cast<Index>(store->fg.size()) - 1);
    tr.frames.push_back(resize_asset(store->fg[static_cast<std::size_t>(k)], h, w));
    tr.asset_id = store->fg_ids[static_cast<std::size_t>(k)];
  } else {
    const std::uint64_t seed = rng();
    const double phase = uniform(rng, 0, 2 * kPi), speed = uniform(rng, 0.08, 0.25);
    for (Index t = 0; t < frames; ++t)
      tr.frames.push_back(procedural_asset(h, w, seed, phase + speed * static_cast<double>(t)));
    tr.asset_id = "procedural:" + std::to_string(seed);
  }
  return tr;
}

// Chooses a start in [lo, hi_start] and velocity so the whole trajectory stays in [lo, hi_start].
void place_axis(double lo, double hi, Index frames, double max_v, std::mt19937_64& rng, double& start, double& v) {
  const double span = std::max(0.0, hi - lo);
  const double vmax = frames > 1 ? std::min(max_v, span / static_cast<double>(frames - 1)) : 0.0;
  v = uniform(rng, -vmax, vmax);
  const double travel = v * static_cast<double>(std::max<Index>(frames - 1, 0));
  const double s_lo = lo + std::max(0.0, -travel), s_hi = hi - std::max(0.0, travel);
  start = s_hi > s_lo ? uniform(rng, s_lo, s_hi) : s_lo;
}

std::vector<std::uint8_t> support_in_frame(const Track& tr, Index t, Index H, Index W) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(H * W), 0);
  const auto& a = tr.at(t);
  const Index oy = tr.py(t), ox = tr.px(t);
  for (Index y = 0; y < a.height(); ++y)
    for (Index x = 0; x < a.width(); ++x) {
      const Index fy = oy + y, fx = ox + x;
      if (a.alpha(y, x) > 0 && fy >= 0 && fy < H && fx >= 0 && fx < W) m[static_cast<std::size_t>(fy * W + fx)] = 1;
    }
  return m;
}

bool in_bounds(const Track& tr, Index frames, Index H, Index W) {
  for (Index t = 0; t < frames; ++t)
    if (tr.py(t) < 0 || tr.px(t) < 0 || tr.py(t) + tr.height() > H || tr.px(t) + tr.width() > W) return false;
  return true;
}

double pair_iou(const Track& a, const Track& b, Index t, Index H, Index W) {
  return measure_occlusion({support_in_frame(a, t, H, W), support_in_frame(b, t, H, W)});
}

TensorD pick_background(Index H, Index W, std::mt19937_64& rng, const AssetStore* store, std::string& id) {
  if (store) {
    const Index k = uniform_int(rng, 0, static_cast<Index>(store->bg.size()) - 1);
    id = store->bg_ids[static_cast<std::size_t>(k)];
    return resize_planes(store->bg[static_cast<std::size_t>(k)], H, W);
  }
  const std::uint64_t seed = rng();
  id = "procedural:" + std::to_string(seed);
  return procedural_background(H, W, seed);
}

struct Rendered {
  TensorD frames, alphas, foregrounds;
  std::vector<double> occlusion;
};

Rendered render(const std::vector<Track>& tracks, const std::vector<Index>& depth, const TensorD& bg, Index frames) {
  const Index H = bg.dim(1), W = bg.dim(2), n = static_cast<Index>(tracks.size());
  Rendered r{TensorD({frames, 3, H, W}), TensorD({frames, n, H, W}), TensorD({frames, n, 3, H, W}), {}};
  for (Index t = 0; t < frames; ++t) {
    std::vector<Layer> layers;
    for (Index d : depth) {
      const auto& tr = tracks[static_cast<std::size_t>(d)];
      layers.push_back({&tr.at(t), tr.py(t), tr.px(t)});
    }
    auto c = composite(layers, bg);
    std::copy_n(c.frame.data(), 3 * H * W, r.frames.data() + t * 3 * H * W);
    for (Index l = 0; l < n; ++l)
      std::copy_n(c.alphas.data() + l * H * W, H * W, r.alphas.plane(t, depth[static_cast<std::size_t>(l)]));
    for (Index i = 0; i < n; ++i) {
      const auto& tr = tracks[static_cast<std::size_t>(i)];
      const auto& a = tr.at(t);
      double* f = r.foregrounds.data() + (t * n + i) * 3 * H * W;
      for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < a.height(); ++y)
          for (Index x = 0; x < a.width(); ++x) f[(c * H + tr.py(t) + y) * W + tr.px(t) + x] = a.rgb(c, y, x);
    }
    std::vector<std::vector<std::uint8_t>> sup;
    for (const auto& tr : tracks) sup.push_back(support_in_frame(tr, t, H, W));
    r.occlusion.push_back(measure_occlusion(sup));
  }
  return r;
}

Tensor<std::uint8_t> make_masks(const TensorD& alphas, const std::vector<Track>& tracks, MaskMode mode,
                                const SynthConfig& cfg, std::mt19937_64& rng) {
  const Index frames = alphas.dim(0), n = alphas.dim(1), H = alphas.dim(2), W = alphas.dim(3);
  Tensor<std::uint8_t> masks(alphas.shape());
  for (Index i = 0; i < n; ++i) {
    const auto first = binarize(alphas.plane(0, i), H * W, 0.5);
    for (Index t = 0; t < frames; ++t) {
      std::vector<std::uint8_t> m;
      if (mode == MaskMode::Train) {
        m = perturb_mask(alphas.plane(t, i), H, W, cfg.perturb, rng);
      } else {
        // Frame-0 mask carried along the known trajectory, then lightly perturbed.
        const auto& tr = tracks[static_cast<std::size_t>(i)];
        const Index dy = tr.py(t) - tr.py(0), dx = tr.px(t) - tr.px(0);
        std::vector<double> moved(static_cast<std::size_t>(H * W), 0.0);
        for (Index y = 0; y < H; ++y)
          for (Index x = 0; x < W; ++x) {
            const Index sy = y - dy, sx = x - dx;
            if (sy >= 0 && sy < H && sx >= 0 && sx < W && first[static_cast<std::size_t>(sy * W + sx)])
              moved[static_cast<std::size_t>(y * W + x)] = 1.0;
          }
        m = perturb_mask(moved.data(), H, W, cfg.eval_perturb, rng);
      }
      std::copy(m.begin(), m.end(), masks.plane(t, i));
    }
  }
  resolve_conflicts(masks, alphas);
  return masks;
}

nlohmann::json track_json(const Track& tr, Index instance) {
  return {{"instance", instance},      {"asset", tr.asset_id},        {"size", {tr.height(), tr.width()}},
          {"start", {tr.y0, tr.x0}}, {"velocity", {tr.vy, tr.vx}}};
}

Sample finish_sample(const std::vector<Track>& tracks, const std::vector<Index>& depth, const TensorD& bg,
                     const std::string& bg_id, Index frames, const SynthConfig& cfg, std::mt19937_64& rng,
                     std::uint64_t seed, const std::string& kind, int attempts) {
  auto r = render(tracks, depth, bg, frames);
  Sample s;
  s.masks = make_masks(r.alphas, tracks, cfg.mask_mode, cfg, rng);
  s.frames = std::move(r.frames);
  s.alphas = std::move(r.alphas);
  s.foregrounds = std::move(r.foregrounds);
  s.background = bg;
  nlohmann::json placements = nlohmann::json::array();
  for (std::size_t i = 0; i < tracks.size(); ++i) placements.push_back(track_json(tracks[i], static_cast<Index>(i)));
  s.manifest = {{"seed", seed},
                {"kind", kind},
                {"tier", tier_name(cfg.tier)},
                {"mask_mode", cfg.mask_mode == MaskMode::Train ? "train" : "eval"},
                {"height", bg.dim(1)},
                {"width", bg.dim(2)},
                {"frames", frames},
                {"instances", tracks.size()},
                {"background", bg_id},
                {"depth_order", depth},
                {"placements", placements},
                {"attempts", attempts},
                {"occlusion",
                 {{"per_frame", r.occlusion},
                  {"min", *std::min_element(r.occlusion.begin(), r.occlusion.end())},
                  {"max", *std::max_element(r.occlusion.begin(), r.occlusion.end())}}}};
  return s;
}

std::vector<Index> random_depth(Index n, std::mt19937_64& rng) {
  std::vector<Index> d(static_cast<std::size_t>(n));
  std::iota(d.begin(), d.end(), 0);
  std::shuffle(d.begin(), d.end(), rng);
  return d;
}

}  // namespace

Sample synthesize_video(const SynthConfig& cfg, std::uint64_t seed, const AssetStore* store) {
  require(cfg.frames >= 1 && cfg.height >= 32 && cfg.width >= 32, "synthesize_video: frame size too small");
  require(cfg.min_instances >= 2 && cfg.max_instances >= cfg.min_instances, "synthesize_video: bad instance range");
  std::mt19937_64 rng(seed);
  const Index H = cfg.height, W = cfg.width, T = cfg.frames;
  const auto [lo, hi] = tier_range(cfg.tier);
  for (int attempt = 1; attempt <= cfg.max_retries; ++attempt) {
    std::vector<Track> tracks;
    if (cfg.tier == Tier::Easy) {
      // Separate vertical slots: supports never meet.
      const Index n = uniform_int(rng, cfg.min_instances, std::min<Index>(cfg.max_instances, 3));
      const Index slot = W / n;
      for (Index i = 0; i < n; ++i) {
        const Index aw = std::max<Index>(8, slot * 3 / 4), ah = std::max<Index>(8, H * uniform_int(rng, 60, 80) / 100);
        Track tr = make_track(ah, aw, T, rng, store);
        place_axis(static_cast<double>(i * slot), static_cast<double>((i + 1) * slot - aw), T, cfg.max_drift, rng, tr.x0,
                   tr.vx);
        place_axis(0.0, static_cast<double>(H - ah), T, cfg.max_drift, rng, tr.y0, tr.vy);
        tracks.push_back(std::move(tr));
      }
    } else {
      const Index n = uniform_int(rng, cfg.min_instances, std::min<Index>(cfg.max_instances, 5));
      const double target = cfg.tier == Tier::Medium ? uniform(rng, 0.12, 0.40) : uniform(rng, 0.58, 0.77);
      const Index ah = H * uniform_int(rng, 55, 70) / 100, aw = W * uniform_int(rng, 30, 40) / 100;
      Track a = make_track(ah, aw, T, rng, store);
      Track b = make_track(ah, aw, T, rng, store);
      // Horizontal separation giving the IoU closest to the target on frame 0.
      Index best_dx = 0;
      double best_err = 1e9;
      a.y0 = b.y0 = 0;
      a.x0 = 0;
      for (Index dx = 0; dx <= aw; ++dx) {
        b.x0 = static_cast<double>(dx);
        const double err = std::abs(pair_iou(a, b, 0, H + ah, W + 2 * aw) - target);
        if (err < best_err) {
          best_err = err;
          best_dx = dx;
        }
      }
      const Index pair_w = aw + best_dx;
      double vy, vx;
      place_axis(0.0, static_cast<double>(W - pair_w), T, cfg.max_drift, rng, a.x0, vx);
      place_axis(0.0, static_cast<double>(H - ah), T, cfg.max_drift, rng, a.y0, vy);
      a.vx = b.vx = vx;
      a.vy = b.vy = vy;
      b.x0 = a.x0 + static_cast<double>(best_dx);
      b.y0 = a.y0;
      tracks.push_back(std::move(a));
      tracks.push_back(std::move(b));
      for (Index k = 2; k < n; ++k) {
        const Index eh = H * uniform_int(rng, 35, 50) / 100, ew = W * uniform_int(rng, 20, 28) / 100;
        Track e = make_track(eh, ew, T, rng, store);
        place_axis(0.0, static_cast<double>(W - ew), T, cfg.max_drift, rng, e.x0, e.vx);
        place_axis(0.0, static_cast<double>(H - eh), T, cfg.max_drift, rng, e.y0, e.vy);
        tracks.push_back(std::move(e));
      }
      // Random instance order so the target pair is not always (0, 1).
      std::shuffle(tracks.begin(), tracks.end(), rng);
    }
    bool ok = true;
    for (const auto& tr : tracks) ok = ok && in_bounds(tr, T, H, W);
    for (Index t = 0; ok && t < T; ++t) {
      std::vector<std::vector<std::uint8_t>> sup;
      for (const auto& tr : tracks) sup.push_back(support_in_frame(tr, t, H, W));
      const double occ = measure_occlusion(sup);
      ok = occ >= lo && occ <= hi;
    }
    if (!ok) continue;
    std::string bg_id;
    const TensorD bg = pick_background(H, W, rng, store, bg_id);
    const auto depth = random_depth(static_cast<Index>(tracks.size()), rng);
    return finish_sample(tracks, depth, bg, bg_id, T, cfg, rng, seed, "video", attempt);
  }
  throw GenerationError("could not satisfy the " + tier_name(cfg.tier) + " occlusion range [" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "] after " + std::to_string(cfg.max_retries) + " attempts (" +
                        std::to_string(H) + "x" + std::to_string(W) + ", seed " + std::to_string(seed) + ")");
}

Sample synthesize_image(const SynthConfig& cfg, std::uint64_t seed, const AssetStore* store) {
  std::mt19937_64 rng(seed);
  const Index H = cfg.height, W = cfg.width;
  for (int attempt = 1; attempt <= cfg.max_retries; ++attempt) {
    const Index n = uniform_int(rng, 2, 5);
    std::vector<Track> tracks;
    bool ok = true;
    for (Index i = 0; i < n && ok; ++i) {
      bool placed = false;
      for (int tries = 0; tries < 50 && !placed; ++tries) {
        const Index ah = H * uniform_int(rng, 35, 60) / 100, aw = W * uniform_int(rng, 20, 35) / 100;
        Track tr = make_track(ah, aw, 1, rng, store);
        tr.y0 = static_cast<double>(uniform_int(rng, 0, H - ah));
        tr.x0 = static_cast<double>(uniform_int(rng, 0, W - aw));
        bool fits = true;
        for (const auto& o : tracks) fits = fits && pair_iou(tr, o, 0, H, W) <= cfg.image_max_iou;
        if (fits) {
          tracks.push_back(std::move(tr));
          placed = true;
        }
      }
      ok = placed;
    }
    if (!ok) continue;
    std::string bg_id;
    const TensorD bg = pick_background(H, W, rng, store, bg_id);
    const auto depth = random_depth(n, rng);
    SynthConfig c = cfg;
    c.mask_mode = MaskMode::Train;
    return finish_sample(tracks, depth, bg, bg_id, 1, c, rng, seed, "image", attempt);
  }
  throw GenerationError("could not place image instances with IoU <= " + std::to_string(cfg.image_max_iou));
}

double reconstruction_error(const Sample& s) {
  const Index T = s.num_frames(), n = s.num_instances(), H = s.frames.dim(2), W = s.frames.dim(3), hw = H * W;
  require(s.foregrounds.shape() == Shape({T, n, 3, H, W}) && s.background.shape() == Shape({3, H, W}),
          "reconstruction_error: sample has no compositing sources");
  double err = 0;
  for (Index t = 0; t < T; ++t)
    for (Index c = 0; c < 3; ++c)
      for (Index p = 0; p < hw; ++p) {
        double sum = 0, v = 0;
        for (Index i = 0; i < n; ++i) {
          const double a = s.alphas.plane(t, i)[p];
          sum += a;
          v += a * s.foregrounds[((t * n + i) * 3 + c) * hw + p];
        }
        v += (1.0 - sum) * s.background[c * hw + p];
        err = std::max(err, std::abs(v - s.frames[(t * 3 + c) * hw + p]));
      }
  return err;
}

Sample synthesize_grid(Index H, Index W, Index n, Index ah, Index aw, std::uint64_t seed) {
  require(n >= 1, "synthesize_grid: need at least one instance");
  const Index cols = W / (aw + 4), rows = H / (ah + 4);
  require(cols * rows >= n, "synthesize_grid: grid too small for the instance count");
  std::mt19937_64 rng(seed);
  std::vector<Track> tracks;
  for (Index i = 0; i < n; ++i) {
    Track tr = make_track(ah, aw, 1, rng, nullptr);
    const Index r = i / cols, c = i % cols;
    tr.y0 = static_cast<double>(r * (H / rows) + (H / rows - ah) / 2);
    tr.x0 = static_cast<double>(c * (W / cols) + (W / cols - aw) / 2);
    tracks.push_back(std::move(tr));
  }
  std::vector<Index> depth(static_cast<std::size_t>(n));
  std::iota(depth.begin(), depth.end(), 0);
  const TensorD bg = procedural_background(H, W, rng());
  auto r = render(tracks, depth, bg, 1);
  Sample s;
  s.frames = std::move(r.frames);
  s.alphas = std::move(r.alphas);
  s.foregrounds = std::move(r.foregrounds);
  s.background = bg;
  s.masks = Tensor<std::uint8_t>(s.alphas.shape());
  for (Index k = 0; k < s.alphas.size(); ++k) s.masks[k] = s.alphas[k] >= 0.5 ? 1 : 0;
  s.manifest = {{"seed", seed}, {"kind", "grid"}, {"instances", n}, {"height", H}, {"width", W}, {"frames", 1}};
  return s;
}

// ---------------------------------------------------------------------------

namespace {

std::string frame_name(Index t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d.png", static_cast<int>(t));
  return buf;
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool dirs) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (dirs ? e.is_directory() : (e.is_regular_file() && e.path().extension() == ".png")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Instance directories sort numerically.
std::vector<fs::path> instance_dirs(const fs::path& dir) {
  auto d = sorted_entries(dir, true);
  std::sort(d.begin(), d.end(), [](const fs::path& a, const fs::path& b) {
    const auto sa = a.filename().string(), sb = b.filename().string();
    return sa.size() != sb.size() ? sa.size() < sb.size() : sa < sb;
  });
  return d;
}

}  // namespace

void write_sample(const fs::path& dir, const Sample& s) {
  const Index T = s.frames.dim(0), N = s.alphas.dim(1), H = s.frames.dim(2), W = s.frames.dim(3);
  fs::create_directories(dir / "frames");
  for (Index t = 0; t < T; ++t) {
    io::write_rgb8(dir / "frames" / frame_name(t), s.frames.data() + t * 3 * H * W, H, W);
    for (Index i = 0; i < N; ++i) {
      io::write_gray16(dir / "alpha" / std::to_string(i) / frame_name(t), s.alphas.plane(t, i), H, W);
      io::write_mask8(dir / "mask" / std::to_string(i) / frame_name(t), s.masks.plane(t, i), H, W);
    }
  }
  std::ofstream(dir / "manifest.json") << s.manifest.dump(2) << "\n";
}

Sample read_sample(const fs::path& dir) {
  const auto frames = sorted_entries(dir / "frames", false);
  const auto alpha_dirs = instance_dirs(dir / "alpha");
  const auto mask_dirs = instance_dirs(dir / "mask");
  if (frames.empty()) throw io::IoError("no frames in " + dir.string());
  if (alpha_dirs.size() != mask_dirs.size())
    throw io::IoError("alpha/mask instance count mismatch in " + dir.string());
  const Index T = static_cast<Index>(frames.size()), N = static_cast<Index>(alpha_dirs.size());
  Sample s;
  for (Index t = 0; t < T; ++t) {
    TensorD rgb = io::read_rgb(frames[static_cast<std::size_t>(t)]);
    if (t == 0) {
      s.frames = TensorD({T, 3, rgb.dim(1), rgb.dim(2)});
      s.alphas = TensorD({T, N, rgb.dim(1), rgb.dim(2)});
      s.masks = Tensor<std::uint8_t>({T, N, rgb.dim(1), rgb.dim(2)});
    }
    if (rgb.dim(1) != s.frames.dim(2) || rgb.dim(2) != s.frames.dim(3)) throw io::IoError("frame size changes in " + dir.string());
    std::copy_n(rgb.data(), rgb.size(), s.frames.data() + t * rgb.size());
  }
  const Index hw = s.frames.dim(2) * s.frames.dim(3);
  for (Index i = 0; i < N; ++i) {
    const auto af = sorted_entries(alpha_dirs[static_cast<std::size_t>(i)], false);
    const auto mf = sorted_entries(mask_dirs[static_cast<std::size_t>(i)], false);
    if (static_cast<Index>(af.size()) != T || static_cast<Index>(mf.size()) != T)
      throw io::IoError("instance " + std::to_string(i) + " frame count mismatch in " + dir.string());
    for (Index t = 0; t < T; ++t) {
      const TensorD a = io::read_gray(af[static_cast<std::size_t>(t)]);
      const TensorD m = io::read_gray(mf[static_cast<std::size_t>(t)]);
      if (a.size() != hw || m.size() != hw) throw io::IoError("alpha/mask size mismatch in " + dir.string());
      std::copy_n(a.data(), hw, s.alphas.plane(t, i));
      for (Index k = 0; k < hw; ++k) s.masks.plane(t, i)[k] = m[k] >= 0.5 ? 1 : 0;
    }
  }
  std::ifstream mf(dir / "manifest.json");
  if (mf) s.manifest = nlohmann::json::parse(mf, nullptr, false);
  return s;
}

std::vector<fs::path> list_samples(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace maggie::synth

// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only NAME]... [--work DIR]
//
// Exit status is 0 only when every selected criterion passes.

#include "check.hpp"
#include "equivalence.hpp"
#include "metric_reference.hpp"

#include "maggie/decoder.hpp"
#include "maggie/harness.hpp"
#include "maggie/losses.hpp"
#include "maggie/metrics.hpp"
#include "maggie/synth.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;
using namespace maggie;
using harness::Config;
using metrics::Region;

namespace {

struct Result {
  bool pass;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::function<Result()> run;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path g_work;

fs::path workdir(const std::string& name) {
  const fs::path p = g_work / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

harness::RunOptions run_options(const Config& cfg, const fs::path& out, std::uint64_t seed) {
  harness::RunOptions r;
  r.config = cfg;
  r.seed = seed;
  r.deterministic = true;
  r.out = out;
  r.quiet = true;
  return r;
}

Config with(std::initializer_list<const char*> overrides) {
  Config c = Config::defaults();
  for (const char* o : overrides) c.apply_override(o);
  return c;
}

// ---------------------------------------------------------------------------
// Oracle equivalence

Result prm_equivalence() {
  const auto t0 = Clock::now();
  double err = 0;
  for (std::uint64_t s = 0; s < 200; ++s) err = std::max(err, equivalence::progressive_refine(1000 + s));
  const double dt = seconds_since(t0);
  return {err <= 1e-7 && dt < 30, fmt("200 cases, max |diff| %.3g (<= 1e-7), %.2f s (< 30 s)", err, dt)};
}

Result fusion_equivalence() {
  const auto t0 = Clock::now();
  Index bad = 0;
  for (std::uint64_t s = 0; s < 200; ++s) bad += equivalence::fusion(2000 + s);
  const double dt = seconds_since(t0);
  return {bad == 0 && dt < 10, fmt("200 sequences, %lld mismatching values (0), %.2f s (< 10 s)", static_cast<long long>(bad), dt)};
}

Result sparse_dense_equivalence() {
  double e[4] = {0, 0, 0, 0};
  for (std::uint64_t s = 0; s < 100; ++s) {
    e[0] = std::max(e[0], equivalence::dense_to_sparse(3000 + s));
    e[1] = std::max(e[1], equivalence::instance_guidance(3000 + s));
    e[2] = std::max(e[2], equivalence::detail_aggregate(3000 + s));
    e[3] = std::max(e[3], equivalence::sparse_matte_head(3000 + s));
  }
  const bool ok = *std::max_element(e, e + 4) <= 1e-5;
  return {ok, fmt("100 cases each, max |diff| dense_to_sparse %.2g, instance_guidance %.2g, detail_aggregate %.2g, "
                  "sparse_matte_head %.2g (<= 1e-5)",
                  e[0], e[1], e[2], e[3])};
}

// ---------------------------------------------------------------------------
// Gradients

Tensor<std::uint8_t> blob_masks(Index t, Index n, Index h, Index w, std::mt19937_64& rng) {
  Tensor<std::uint8_t> m({t, n, h, w});
  std::uniform_int_distribution<Index> py(0, h - 1), px(0, w - 1);
  for (Index f = 0; f < t; ++f)
    for (Index i = 0; i < n; ++i) {
      const Index cy = py(rng), cx = px(rng);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          if (std::abs(y - cy) <= 1 && std::abs(x - cx) <= 1) m(f, i, y, x) = 1;
    }
  return m;
}

Result gradient_checks() {
  std::mt19937_64 rng(6);
  const Shape s{2, 2, 8, 8};
  auto pred = ad::parameter(test::uniform(s, rng, 0.05, 0.95));
  const auto gt = test::uniform(s, rng);
  const auto d = test::bits(s, rng);
  auto aff = ad::parameter(test::uniform({2, 2, 64}, rng, 0.0, 0.02));
  const auto gt8 = test::bits(s, rng, 0.4).cast<double>();
  std::vector<ad::Var<double>> v{pred};

  std::vector<std::pair<std::string, double>> errs;
  errs.emplace_back("l1", test::grad_check([&] { return l1_loss(pred, gt); }, v));
  errs.emplace_back("relative_entropy", test::grad_check([&] { return relative_entropy_loss(pred, gt); }, v));
  errs.emplace_back("weighted_coarse", test::grad_check([&] { return weighted_coarse_loss(pred, gt, 2.0); }, v));
  errs.emplace_back("laplacian", test::grad_check([&] { return laplacian_loss(pred, gt); }, v));
  errs.emplace_back("gradient", test::grad_check([&] { return gradient_loss(pred, gt); }, v));
  errs.emplace_back("dtssd", test::grad_check([&] { return dtssd_loss(pred, gt); }, v));
  errs.emplace_back("delta", test::grad_check([&] { return delta_loss(pred, d); }, v));
  errs.emplace_back("attention", test::grad_check([&] { return attention_loss(aff, gt8); }, {aff}));

  ParameterSet<double> params;
  DecoderConfig cfg;
  cfg.channels = 8;
  std::mt19937_64 drng(7);
  InstanceMatteDecoder<double> dec(params, cfg, drng);
  auto f8 = ad::parameter(test::normal({1, 8, 8, 8}, drng));
  const auto m = blob_masks(1, 2, 8, 8, drng);
  const auto w = test::normal({1, 2, 8, 8}, drng);
  std::vector<ad::Var<double>> dv{f8};
  for (const auto& e : params.entries()) dv.push_back(e.var);
  errs.emplace_back("decoder", test::grad_check([&] { return test::probe(dec(f8, m).a8, w); }, dv));

  double worst = 0;
  std::string detail;
  for (const auto& [name, e] : errs) {
    worst = std::max(worst, e);
    detail += (detail.empty() ? "" : ", ") + name + fmt(" %.1e", e);
  }
  return {worst < 1e-3, "relative error " + detail + " (< 1e-3)"};
}

// ---------------------------------------------------------------------------
// Metrics

TensorD plane(Index h, Index w, std::initializer_list<double> v) {
  TensorD t({1, 1, h, w});
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

Result metric_suite() {
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); };

  // MAD / MSE / SAD
  const auto p22 = plane(2, 2, {1, 0, 0.5, 0.25}), g22 = plane(2, 2, {1, 0, 0, 0});
  expect(metrics::mad(p22, g22).mean == 187.5, "MAD 2x2 example = 187.5");
  expect(metrics::mad(TensorD({1, 1, 4, 4}, 1.0), TensorD({1, 1, 4, 4})).mean == 1000.0, "MAD(1, 0) = 1000");
  for (const auto& m : {metrics::mad(g22, g22), metrics::mse(g22, g22), metrics::sad(g22, g22)})
    expect(m.mean == 0.0, "pred = gt gives 0");

  // Trimap
  std::mt19937_64 rng(3);
  expect(metrics::estimate_trimap(test::bits({1, 1, 6, 6}, rng).cast<double>(), 0).count(0, 0, Region::Unknown) == 0,
         "binary gt, dilate 0: unknown empty");
  {
    TensorD gt({1, 1, 5, 5});
    gt(0, 0, 2, 2) = 0.5;
    const auto tri = metrics::estimate_trimap(gt, 1);
    bool ok = true;
    for (Index y = 0; y < 5; ++y)
      for (Index x = 0; x < 5; ++x)
        ok &= (tri.labels(0, 0, y, x) == static_cast<std::uint8_t>(Region::Unknown)) ==
              (std::abs(y - 2) <= 1 && std::abs(x - 2) <= 1);
    expect(ok, "single soft pixel dilates to its 3x3 neighbourhood");
  }
  bool brute = true, partition = true;
  for (int c = 0; c < 50; ++c) {
    auto gt = test::uniform({1, 2, 9, 7}, rng);
    for (Index k = 0; k < gt.size(); ++k) gt[k] = gt[k] < 0.45 ? 0.0 : (gt[k] > 0.55 ? 1.0 : gt[k]);
    const Index r = c % 3;
    const auto tri = metrics::estimate_trimap(gt, r);
    for (Index i = 0; i < 2; ++i) {
      for (Index y = 0; y < 9; ++y)
        for (Index x = 0; x < 7; ++x)
          brute &= tri.labels(0, i, y, x) == static_cast<std::uint8_t>(reference::trimap_label(gt, 0, i, y, x, r));
      partition &= tri.count(0, i, Region::Unknown) + tri.count(0, i, Region::Foreground) +
                       tri.count(0, i, Region::Background) == 63;
    }
  }
  expect(brute, "random trimaps match the brute-force scan");
  expect(partition, "region pixel counts partition the plane on 50 random trimaps");
  {
    const auto gt = plane(1, 4, {1, 1, 0.5, 0}), pred = plane(1, 4, {0.9, 1, 0.2, 0.1});
    const auto tri = metrics::estimate_trimap(gt, 0);
    expect(close(metrics::mad(pred, gt, tri, Region::Foreground).mean, 50.0), "foreground MAD = 50");
    expect(close(metrics::mad(pred, gt, tri, Region::Unknown).mean, 300.0), "unknown MAD = 300");
    const auto none = metrics::mad(pred, gt, metrics::estimate_trimap(plane(1, 4, {0, 0, 0, 0}), 0), Region::Unknown);
    expect(none.mean == 0.0 && none.empty == std::vector<bool>{true}, "empty region reported as 0 with a flag");
  }

  // Grad
  {
    const auto gt = test::uniform({1, 1, 6, 6}, rng), pred = test::uniform({1, 1, 6, 6}, rng);
    TensorD shifted(gt.shape());
    for (Index k = 0; k < gt.size(); ++k) shifted[k] = gt[k] + 0.2;
    expect(metrics::grad_metric(gt, gt).mean == 0.0, "Grad(pred = gt) = 0");
    expect(metrics::grad_metric(shifted, gt).mean <= 1e-20, "Grad(gt + c, gt) = 0");
    expect(std::abs(metrics::grad_metric(pred, gt).mean - reference::grad_metric(pred, gt, 1.4, 4) * 1e3) <=
               1e-10 * metrics::grad_metric(pred, gt).mean,
           "Grad matches the direct filter oracle");
  }

  // Conn
  {
    TensorD gt({1, 1, 10, 10});
    for (Index y = 2; y < 6; ++y)
      for (Index x = 2; x < 6; ++x) gt(0, 0, y, x) = 1;
    expect(metrics::conn_metric(gt, gt).mean == 0.0, "Conn of a connected binary matte against itself = 0");
    auto pred = gt;
    pred(0, 0, 8, 8) = 1;
    expect(close(metrics::connectivity_error(pred.data(), gt.data(), 10, 10, 0.1), 1.0),
           "detached pixel contributes exactly its own error");
    expect(close(metrics::connectivity_error(pred.data(), gt.data(), 10, 10, 0.1),
                 reference::connectivity(pred.data(), gt.data(), 10, 10, 0.1)),
           "Conn matches the union-find oracle");
    const auto u = test::uniform({1, 1, 7, 8}, rng);
    expect(metrics::conn_metric(u, u).mean == 0.0, "Conn(pred = gt) = 0");
  }

  // dtSSD
  {
    TensorD gt({4, 1, 2, 2}, 0.5), pred(gt.shape());
    for (Index t = 0; t < 4; ++t)
      for (Index p = 0; p < 4; ++p) pred[t * 4 + p] = 0.5 + (t % 2 ? 0.1 : -0.1);
    expect(metrics::dtssd_metric(gt, gt).mean == 0.0, "dtSSD of a static matte = 0");
    expect(close(metrics::dtssd_metric(pred, gt).mean, 20.0), "dtSSD of a +-0.1 flicker = 20");
    const auto p = test::uniform({5, 2, 3, 3}, rng), g = test::uniform({5, 2, 3, 3}, rng);
    auto rev = [](const TensorD& a) {
      TensorD out(a.shape());
      const Index per = a.size() / a.dim(0);
      for (Index t = 0; t < a.dim(0); ++t) std::copy_n(a.data() + t * per, per, out.data() + (a.dim(0) - 1 - t) * per);
      return out;
    };
    expect(close(metrics::dtssd_metric(rev(p), rev(g)).mean, metrics::dtssd_metric(p, g).mean),
           "dtSSD is invariant to time reversal");
  }

  // MESSDdt
  {
    TensorD gt({2, 1, 1, 2}), pred({2, 1, 1, 2}, 0.3);
    expect(metrics::messddt_metric(gt, gt).mean == 0.0, "MESSDdt(pred = gt) = 0");
    expect(metrics::messddt_metric(pred, gt).mean == 0.0, "MESSDdt of a constant error field = 0");
    pred = TensorD({2, 1, 1, 2});
    pred[0] = 0.2;
    pred[3] = 0.5;
    expect(close(metrics::messddt_metric(pred, gt).mean, (std::pow(0.04, 2) + std::pow(0.25, 2)) / 2 * 1e3),
           "MESSDdt T = 2 hand value");
  }

  std::string detail = failed.empty() ? "all metric examples hold" : "failed:";
  for (const auto& f : failed) detail += " [" + f + "]";
  return {failed.empty(), detail};
}

// ---------------------------------------------------------------------------
// Instance permutation

Tensor<std::uint8_t> permute_planes(const Tensor<std::uint8_t>& m, const std::vector<Index>& perm) {
  Tensor<std::uint8_t> out(m.shape());
  const Index hw = m.dim(2) * m.dim(3);
  for (Index t = 0; t < m.dim(0); ++t)
    for (Index i = 0; i < m.dim(1); ++i) std::copy_n(m.plane(t, perm[static_cast<std::size_t>(i)]), hw, out.plane(t, i));
  return out;
}

TensorD permute_planes(const TensorD& m, const std::vector<Index>& perm) {
  TensorD out(m.shape());
  const Index hw = m.dim(2) * m.dim(3);
  for (Index t = 0; t < m.dim(0); ++t)
    for (Index i = 0; i < m.dim(1); ++i) std::copy_n(m.plane(t, perm[static_cast<std::size_t>(i)]), hw, out.plane(t, i));
  return out;
}

Result permutation_equivariance() {
  double dec_err = 0, metric_err = 0;
  for (int c = 0; c < 20; ++c) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(500 + c));
    ParameterSet<double> params;
    DecoderConfig cfg;
    cfg.channels = 8;
    InstanceMatteDecoder<double> dec(params, cfg, rng);
    const Index n = 2 + c % 3, hw = 16;
    auto f8 = ad::constant(test::normal({2, 8, 4, 4}, rng));
    const auto m = blob_masks(2, n, 4, 4, rng);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto a = dec(f8, m), b = dec(f8, permute_planes(m, perm));
    dec_err = std::max(dec_err, test::max_abs_diff(a.enriched->value, b.enriched->value));
    for (Index t = 0; t < 2; ++t)
      for (Index i = 0; i < n; ++i) {
        const Index j = perm[static_cast<std::size_t>(i)];
        for (Index p = 0; p < hw; ++p) {
          dec_err = std::max(dec_err, std::abs(b.a8->value[(t * n + i) * hw + p] - a.a8->value[(t * n + j) * hw + p]));
          dec_err = std::max(dec_err, std::abs(b.aff->value[(t * n + i) * hw + p] - a.aff->value[(t * n + j) * hw + p]));
        }
        for (Index ch = 0; ch < 8; ++ch)
          dec_err = std::max(dec_err, std::abs(b.tokens->value[(t * n + i) * 8 + ch] - a.tokens->value[(t * n + j) * 8 + ch]));
      }

    const auto pred = test::uniform({3, n, 8, 8}, rng), gt = test::uniform({3, n, 8, 8}, rng);
    const auto ra = metrics::evaluate(pred, gt), rb = metrics::evaluate(permute_planes(pred, perm), permute_planes(gt, perm));
    for (const auto& [name, v] : ra) metric_err = std::max(metric_err, std::abs(rb.at(name).mean - v.mean));
  }
  const bool ok = dec_err <= 1e-5 && metric_err <= 1e-5;
  return {ok, fmt("20 cases, decoder max |diff| %.2g, averaged metric max |diff| %.2g (<= 1e-5)", dec_err, metric_err)};
}

// ---------------------------------------------------------------------------
// Overfit sanity

std::vector<double> losses(const fs::path& log) {
  std::vector<double> out;
  std::ifstream f(log);
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).at("loss").get<double>());
  return out;
}

// Means over `blocks` equal consecutive step blocks.
std::vector<double> block_means(const std::vector<double>& v, std::size_t blocks) {
  std::vector<double> out;
  const std::size_t len = v.size() / blocks;
  for (std::size_t b = 0; b < blocks && len > 0; ++b)
    out.push_back(std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(b * len),
                                  v.begin() + static_cast<std::ptrdiff_t>((b + 1) * len), 0.0) /
                  static_cast<double>(len));
  return out;
}

Result overfit_sanity() {
  const auto root = workdir("overfit");
  const Config data_cfg = with({"synth.tier=easy", "synth.height=64", "synth.width=64", "synth.frames=30",
                                "synth.min_instances=2", "synth.max_instances=2", "synth.kernel_max=7"});
  harness::SynthOptions so;
  so.count = 4;
  harness::run_synth(run_options(data_cfg, root / "data", 7), so);

  const Config train_cfg = with({"train.batch=1", "train.window=2", "optim.lr=0.0003", "optim.steps=2000",
                                 "train.omit_prob=0"});
  const auto t0 = Clock::now();
  harness::TrainOptions to;
  to.data = root / "data";
  harness::run_train(run_options(train_cfg, root / "train", 0), to);
  harness::EvalOptions eo;
  eo.data = root / "data";
  eo.checkpoint = root / "train" / "final.bin";
  const auto report = harness::run_eval(run_options(train_cfg, root / "eval", 0), eo);
  const double dt = seconds_since(t0);

  const double mad = report.at("MAD").at("mean").get<double>();
  const auto l = losses(root / "train" / "log.jsonl");
  const auto q = block_means(l, 4);
  bool decreasing = q.size() == 4;
  for (std::size_t k = 1; k < q.size(); ++k) decreasing &= q[k] < q[k - 1];
  const bool ok = l.size() <= 2000 && mad <= 30 && decreasing && dt < 1200;
  return {ok, fmt("%zu steps, MAD %.2f (<= 30), quarter-block loss %.3f > %.3f > %.3f > %.3f (%s), %.0f s (< 1200 s)",
                  l.size(), mad, q.size() > 0 ? q[0] : 0.0, q.size() > 1 ? q[1] : 0.0, q.size() > 2 ? q[2] : 0.0,
                  q.size() > 3 ? q[3] : 0.0, decreasing ? "strictly decreasing" : "not decreasing", dt)};
}

// ---------------------------------------------------------------------------
// Temporal ablation and complexity bench share a medium-tier training set.

constexpr std::int64_t kAblationSteps = 1500;

Config medium_data(const char* mode) {
  Config c = with({"synth.tier=medium", "synth.height=64", "synth.width=64", "synth.frames=30"});
  c.set("synth.mask_mode", mode);
  return c;
}

Config ablation_train(bool temporal) {
  Config c = with({"train.batch=1", "train.window=3", "optim.lr=0.0003"});
  c.set("optim.steps", std::to_string(kAblationSteps));
  c.set("model.temporal_gru", temporal ? "true" : "false");
  c.set("model.temporal_fusion", temporal ? "true" : "false");
  return c;
}

const fs::path& medium_train_set() {
  static const fs::path dir = [] {
    const auto d = workdir("medium_train");
    harness::SynthOptions so;
    so.count = 32;
    harness::run_synth(run_options(medium_data("train"), d, 11), so);
    return d;
  }();
  return dir;
}

const fs::path& trained_checkpoint(bool temporal) {
  static std::map<bool, fs::path> cache;
  auto it = cache.find(temporal);
  if (it != cache.end()) return it->second;
  const auto out = workdir(temporal ? "train_temporal" : "train_static");
  harness::TrainOptions to;
  to.data = medium_train_set();
  harness::run_train(run_options(ablation_train(temporal), out, 0), to);
  return cache[temporal] = out / "final.bin";
}

Result temporal_ablation() {
  const auto eval_set = workdir("medium_eval");
  harness::SynthOptions so;
  so.count = 16;
  harness::run_synth(run_options(medium_data("eval"), eval_set, 12), so);
  double dtssd[2];
  for (bool temporal : {true, false}) {
    harness::EvalOptions eo;
    eo.data = eval_set;
    eo.checkpoint = trained_checkpoint(temporal);
    const auto r = harness::run_eval(run_options(Config::defaults(), workdir(temporal ? "eval_temporal" : "eval_static"), 0), eo);
    dtssd[temporal ? 0 : 1] = r.at("dtSSD").at("mean").get<double>();
  }
  return {dtssd[0] <= dtssd[1],
          fmt("16 medium clips, dtSSD full temporal %.3f <= no temporal %.3f", dtssd[0], dtssd[1])};
}

Result constant_complexity() {
  harness::BenchOptions bo;
  bo.instances = {1, 8};
  bo.runs = 20;
  bo.sequential = true;
  bo.checkpoint = trained_checkpoint(true);
  const Config cfg = with({"bench.height=256", "bench.width=256"});
  const auto rows = harness::run_bench(run_options(cfg, workdir("bench"), 0), bo);
  const auto& r = rows.back();
  const bool ok = r.latency_ratio <= 1.6 && r.memory_ratio <= 1.6 && r.sequential_ratio > 4;
  return {ok, fmt("256x256, N=8 vs N=1: latency ratio %.3f (<= 1.6), peak-memory ratio %.3f (<= 1.6), sequential "
                  "ratio %.3f (> 4); medians %.1f / %.1f ms",
                  r.latency_ratio, r.memory_ratio, r.sequential_ratio, rows.front().median_ms, r.median_ms)};
}

// ---------------------------------------------------------------------------
// Dataset invariants

Result dataset_invariants() {
  const synth::Tier tiers[] = {synth::Tier::Easy, synth::Tier::Medium, synth::Tier::Hard};
  double worst_sum = 0, worst_recon = 0;
  int range_fail = 0, nondeterministic = 0;
  for (int k = 0; k < 100; ++k) {
    Config cfg = with({"synth.height=64", "synth.width=64", "synth.frames=8"});
    const auto tier = tiers[k % 3];
    cfg.set("synth.tier", synth::tier_name(tier));
    const auto scfg = harness::synth_config(cfg);
    const std::uint64_t seed = 9000 + static_cast<std::uint64_t>(k);
    const auto s = synth::synthesize_video(scfg, seed);
    const Index hw = s.alphas.dim(2) * s.alphas.dim(3);
    for (Index t = 0; t < s.num_frames(); ++t)
      for (Index p = 0; p < hw; ++p) {
        double sum = 0;
        for (Index i = 0; i < s.num_instances(); ++i) sum += s.alphas.plane(t, i)[p];
        worst_sum = std::max(worst_sum, sum);
      }
    worst_recon = std::max(worst_recon, synth::reconstruction_error(s));
    const auto [lo, hi] = synth::tier_range(tier);
    for (double occ : s.manifest.at("occlusion").at("per_frame").get<std::vector<double>>())
      if (occ < lo || occ > hi) ++range_fail;
    const auto again = synth::synthesize_video(scfg, seed);
    if (test::max_abs_diff(s.frames, again.frames) != 0 || test::max_abs_diff(s.alphas, again.alphas) != 0 ||
        test::max_abs_diff(s.masks, again.masks) != 0 || s.manifest != again.manifest)
      ++nondeterministic;
  }
  const bool ok = worst_sum <= 1.0 + 1e-12 && worst_recon <= 1e-6 && range_fail == 0 && nondeterministic == 0;
  return {ok, fmt("100 samples, max sum of alphas %.15f (<= 1), max reconstruction error %.2g (<= 1e-6), "
                  "%d frames outside the tier occlusion range, %d non-deterministic samples",
                  worst_sum, worst_recon, range_fail, nondeterministic)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<std::string> only;
  std::string work = (fs::temp_directory_path() / "maggie_acceptance").string();
  app.add_option("--only", only, "Run only the named criteria");
  app.add_option("--work", work, "Scratch directory");
  CLI11_PARSE(app, argc, argv);
  g_work = work;

  const std::vector<Criterion> criteria = {
      {"prm_oracle_equivalence", prm_equivalence},
      {"fusion_oracle_equivalence", fusion_equivalence},
      {"sparse_dense_equivalence", sparse_dense_equivalence},
      {"gradient_checks", gradient_checks},
      {"metric_analytic_suite", metric_suite},
      {"instance_permutation_equivariance", permutation_equivariance},
      {"overfit_sanity", overfit_sanity},
      {"constant_complexity", constant_complexity},
      {"temporal_ablation_direction", temporal_ablation},
      {"dataset_invariants", dataset_invariants},
  };
  for (const auto& o : only)
    if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.name == o; })) {
      std::fprintf(stderr, "unknown criterion '%s'\n", o.c_str());
      return 2;
    }

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    const auto t0 = Clock::now();
    Result r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    failures += r.pass ? 0 : 1;
    std::printf("%s %s: %s [%.1f s]\n", r.pass ? "PASS" : "FAIL", c.name.c_str(), r.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

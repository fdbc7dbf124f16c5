#include "maggie/harness.hpp"

#include "maggie/image_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace maggie::harness {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

void log_line(const RunOptions& run, const std::string& msg) {
  if (!run.quiet) std::cout << msg << std::endl;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

Config Config::defaults() {
  Config c;
  c.values_ = {
      {"seed", "0"},
      {"device", "cpu"},
      {"model.c1", "32"},
      {"model.c2", "32"},
      {"model.c4", "64"},
      {"model.c8", "128"},
      {"model.encoder_depth", "1"},
      {"model.embed_slots", "10"},
      {"model.embed_channels", "3"},
      {"model.heads", "1"},
      {"model.rounds", "2"},
      {"model.mask_key_embedding", "true"},
      {"model.temporal_gru", "true"},
      {"model.temporal_fusion", "true"},
      {"refine.kernel4", "30"},
      {"refine.kernel1", "15"},
      {"refine.eps", "0.00392156862745098"},
      {"loss.l1", "1"},
      {"loss.lap", "1"},
      {"loss.grad", "1"},
      {"loss.att", "0.1"},
      {"loss.dtssd", "1"},
      {"loss.delta", "1"},
      {"loss.bce", "1"},
      {"loss.gamma", "2"},
      {"optim.lr", "0.00015"},
      {"optim.beta1", "0.9"},
      {"optim.beta2", "0.999"},
      {"optim.eps", "1e-8"},
      {"optim.weight_decay", "0.0001"},
      {"optim.warmup", "50"},
      {"optim.steps", "1000"},
      {"optim.min_lr_ratio", "0.05"},
      {"optim.clip", "0"},
      {"train.data", ""},
      {"train.batch", "2"},
      {"train.window", "3"},
      {"train.image_steps", "0"},
      {"train.crop", "0"},
      {"train.shuffle_masks", "true"},
      {"train.omit_prob", "0.1"},
      {"train.checkpoint_every", "0"},
      {"synth.kind", "video"},
      {"synth.count", "4"},
      {"synth.assets", ""},
      {"synth.tier", "easy"},
      {"synth.height", "64"},
      {"synth.width", "64"},
      {"synth.frames", "30"},
      {"synth.mask_mode", "train"},
      {"synth.min_instances", "2"},
      {"synth.max_instances", "3"},
      {"synth.kernel_min", "3"},
      {"synth.kernel_max", "30"},
      {"synth.dropout", "0.1"},
      {"synth.eval_kernel_min", "3"},
      {"synth.eval_kernel_max", "5"},
      {"synth.max_drift", "0.6"},
      {"synth.max_retries", "200"},
      {"synth.image_max_iou", "0.3"},
      {"eval.trimap_dilate", "15"},
      {"eval.grad_sigma", "1.4"},
      {"eval.conn_step", "0.1"},
      {"eval.scale_mad", "1000"},
      {"eval.scale_mse", "1000"},
      {"eval.scale_sad", "0.001"},
      {"eval.scale_grad", "1000"},
      {"eval.scale_conn", "0.001"},
      {"eval.scale_dtssd", "100"},
      {"eval.scale_messddt", "1000"},
      {"bench.height", "256"},
      {"bench.width", "256"},
      {"bench.asset", "48"},
      {"bench.instances", "1,2,4,8"},
      {"bench.runs", "20"},
  };
  return c;
}

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c = defaults();
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
      if (line[k] == '"') quoted = !quoted;
      if (line[k] == '#' && !quoted) {
        line.resize(k);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw InputError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!section.empty()) key = section + "." + key;
    try {
      c.set(key, value);
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  return c;
}

Config Config::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) throw InputError("unknown config key '" + key + "'");
  values_[key] = value;
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InputError("override must be key=value: " + assignment);
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& Config::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw InputError("unknown config key '" + key + "'");
  return it->second;
}

double Config::number(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw InputError("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

std::int64_t Config::integer(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw InputError("config key '" + key + "' expects an integer, got '" + v + "'");
  }
}

bool Config::flag(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw InputError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<std::int64_t> Config::integers(const std::string& key) const {
  std::vector<std::int64_t> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw InputError("config key '" + key + "' expects a list of integers");
    }
  }
  return out;
}

std::string Config::to_string() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = \"" + v + "\"\n";
  return out;
}

std::uint64_t Config::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : values_) {
    if (k.rfind("model.", 0) != 0 && k.rfind("refine.", 0) != 0) continue;
    for (char ch : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelConfig model_config(const Config& cfg) {
  ModelConfig m;
  m.embed_channels = cfg.integer("model.embed_channels");
  m.embed_slots = cfg.integer("model.embed_slots");
  m.encoder.in_channels = 3 + m.embed_channels;
  m.encoder.channels = {cfg.integer("model.c1"), cfg.integer("model.c2"), cfg.integer("model.c4"),
                        cfg.integer("model.c8")};
  m.encoder.depth = cfg.integer("model.encoder_depth");
  m.decoder.channels = m.encoder.channels[3];
  m.decoder.heads = cfg.integer("model.heads");
  m.decoder.rounds = cfg.integer("model.rounds");
  m.decoder.mask_key_embedding = cfg.flag("model.mask_key_embedding");
  m.temporal_gru = cfg.flag("model.temporal_gru");
  m.temporal_fusion = cfg.flag("model.temporal_fusion");
  m.refine.kernel4 = cfg.integer("refine.kernel4");
  m.refine.kernel1 = cfg.integer("refine.kernel1");
  m.refine.eps = cfg.number("refine.eps");
  for (Index c : m.encoder.channels)
    if (c < 2) throw InputError("model channel widths must be >= 2");
  if (m.embed_slots < 1 || m.embed_channels < 1) throw InputError("embedding sizes must be positive");
  if (m.refine.kernel4 < 1 || m.refine.kernel1 < 1) throw InputError("refinement kernels must be positive");
  if (!(m.refine.eps >= 0 && m.refine.eps < 0.5)) throw InputError("refine.eps must be in [0, 0.5)");
  return m;
}

LossWeights loss_weights(const Config& cfg) {
  LossWeights w;
  w.l1 = cfg.number("loss.l1");
  w.bce = cfg.number("loss.bce");
  w.lap = cfg.number("loss.lap");
  w.grad = cfg.number("loss.grad");
  w.att = cfg.number("loss.att");
  w.dtssd = cfg.number("loss.dtssd");
  w.delta = cfg.number("loss.delta");
  w.gamma = cfg.number("loss.gamma");
  try {
    w.validate();
  } catch (const ValidationError& e) {
    throw InputError(e.what());
  }
  return w;
}

synth::SynthConfig synth_config(const Config& cfg) {
  synth::SynthConfig s;
  const auto tier = synth::parse_tier(cfg.get("synth.tier"));
  if (!tier) throw InputError("invalid tier '" + cfg.get("synth.tier") + "' (easy, medium, hard)");
  s.tier = *tier;
  const auto& mode = cfg.get("synth.mask_mode");
  if (mode != "train" && mode != "eval") throw InputError("synth.mask_mode must be train or eval");
  s.mask_mode = mode == "train" ? synth::MaskMode::Train : synth::MaskMode::Eval;
  s.height = cfg.integer("synth.height");
  s.width = cfg.integer("synth.width");
  s.frames = cfg.integer("synth.frames");
  s.min_instances = cfg.integer("synth.min_instances");
  s.max_instances = cfg.integer("synth.max_instances");
  s.perturb = {cfg.integer("synth.kernel_min"), cfg.integer("synth.kernel_max"), cfg.number("synth.dropout")};
  s.eval_perturb = {cfg.integer("synth.eval_kernel_min"), cfg.integer("synth.eval_kernel_max"), 0.0};
  s.max_drift = cfg.number("synth.max_drift");
  s.max_retries = static_cast<int>(cfg.integer("synth.max_retries"));
  s.image_max_iou = cfg.number("synth.image_max_iou");
  if (s.height < 32 || s.width < 32 || s.height % 8 || s.width % 8)
    throw InputError("synth frame size must be >= 32 and divisible by 8");
  if (s.frames < 1) throw InputError("synth.frames must be >= 1");
  if (s.min_instances < 2 || s.max_instances < s.min_instances) throw InputError("bad synth instance range");
  return s;
}

metrics::EvalOptions eval_options(const Config& cfg) {
  metrics::EvalOptions o;
  o.trimap_dilate = cfg.integer("eval.trimap_dilate");
  o.grad_sigma = cfg.number("eval.grad_sigma");
  o.conn_step = cfg.number("eval.conn_step");
  o.scales = {cfg.number("eval.scale_mad"),  cfg.number("eval.scale_mse"),   cfg.number("eval.scale_sad"),
              cfg.number("eval.scale_grad"), cfg.number("eval.scale_conn"),  cfg.number("eval.scale_dtssd"),
              cfg.number("eval.scale_messddt")};
  return o;
}

// ---------------------------------------------------------------------------
// Optimiser

AdamWConfig adamw_config(const Config& cfg) {
  AdamWConfig c;
  c.lr = cfg.number("optim.lr");
  c.beta1 = cfg.number("optim.beta1");
  c.beta2 = cfg.number("optim.beta2");
  c.eps = cfg.number("optim.eps");
  c.weight_decay = cfg.number("optim.weight_decay");
  c.warmup = cfg.integer("optim.warmup");
  c.total_steps = cfg.integer("optim.steps");
  c.min_lr_ratio = cfg.number("optim.min_lr_ratio");
  c.clip = cfg.number("optim.clip");
  if (!(c.lr > 0) || c.total_steps < 0 || c.warmup < 0) throw InputError("bad optimiser settings");
  return c;
}

double learning_rate(const AdamWConfig& c, std::int64_t step) {
  if (step < c.warmup) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup);
  const double span = static_cast<double>(std::max<std::int64_t>(c.total_steps - c.warmup, 1));
  const double p = std::clamp(static_cast<double>(step - c.warmup) / span, 0.0, 1.0);
  const double floor = c.lr * c.min_lr_ratio;
  return floor + (c.lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * p));
}

AdamW::AdamW(ParameterSet<float>& params, const AdamWConfig& cfg) : params_(&params), cfg_(cfg) {
  for (const auto& e : params.entries()) {
    m_.push_back(Tensor<float>::zeros_like(e.var->value));
    v_.push_back(Tensor<float>::zeros_like(e.var->value));
  }
}

double AdamW::step(double grad_scale) {
  const auto& entries = params_->entries();
  double sq = 0;
  for (const auto& e : entries)
    if (!e.var->grad.empty()) sq += e.var->grad.flat().template cast<double>().square().sum();
  const double norm = std::sqrt(sq) * grad_scale;
  double scale = grad_scale;
  if (cfg_.clip > 0 && norm > cfg_.clip) scale *= cfg_.clip / norm;

  const double lr = learning_rate(cfg_, step_);
  ++step_;
  const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(step_));
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& var = *entries[k].var;
    const bool has_grad = !var.grad.empty();
    const bool decay = var.value.rank() >= 2 && cfg_.weight_decay > 0;
    auto p = var.value.flat();
    auto m = m_[k].flat();
    auto v = v_[k].flat();
    if (decay) p *= static_cast<float>(1.0 - lr * cfg_.weight_decay);
    if (has_grad) {
      const auto g = (var.grad.flat() * static_cast<float>(scale)).eval();
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.square();
    } else {
      m *= b1;
      v *= b2;
    }
    p -= static_cast<float>(lr / bc1) * m / ((v / static_cast<float>(bc2)).sqrt() + static_cast<float>(cfg_.eps));
  }
  params_->zero_grad();
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'A', 'G', 'G', 'I', 'E', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw InputError("truncated checkpoint");
  return v;
}

void put_string(std::ostream& o, const std::string& s) {
  put<std::uint64_t>(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string take_string(std::istream& in) {
  const auto n = take<std::uint64_t>(in);
  if (n > (1u << 24)) throw InputError("corrupt checkpoint string");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw InputError("truncated checkpoint");
  return s;
}

void put_tensors(std::ostream& o, const std::vector<NamedTensor>& ts) {
  put<std::uint64_t>(o, ts.size());
  for (const auto& t : ts) {
    put_string(o, t.name);
    put<std::uint32_t>(o, static_cast<std::uint32_t>(t.value.rank()));
    for (int d = 0; d < t.value.rank(); ++d) put<std::int64_t>(o, t.value.dim(d));
    o.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(float)));
  }
}

std::vector<NamedTensor> take_tensors(std::istream& in) {
  const auto n = take<std::uint64_t>(in);
  if (n > 100000) throw InputError("corrupt checkpoint tensor count");
  std::vector<NamedTensor> ts;
  for (std::uint64_t k = 0; k < n; ++k) {
    NamedTensor t;
    t.name = take_string(in);
    const auto rank = take<std::uint32_t>(in);
    if (rank > 8) throw InputError("corrupt checkpoint tensor rank");
    Shape s;
    for (std::uint32_t d = 0; d < rank; ++d) s.push_back(take<std::int64_t>(in));
    if (shape_numel(s) < 0 || shape_numel(s) > (Index{1} << 32)) throw InputError("corrupt checkpoint tensor shape");
    t.value = Tensor<float>(s);
    in.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(float)));
    if (!in) throw InputError("truncated checkpoint");
    ts.push_back(std::move(t));
  }
  return ts;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw InputError("cannot write checkpoint " + path.string());
  o.write(kMagic, sizeof kMagic);
  put(o, kVersion);
  put(o, ck.config_hash);
  put(o, ck.step);
  put_string(o, ck.config_text);
  put_tensors(o, ck.params);
  put_tensors(o, ck.moment1);
  put_tensors(o, ck.moment2);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw InputError("not a checkpoint: " + path.string());
  if (take<std::uint32_t>(in) != kVersion) throw CompatibilityError("unsupported checkpoint version");
  Checkpoint ck;
  ck.config_hash = take<std::uint64_t>(in);
  ck.step = take<std::int64_t>(in);
  ck.config_text = take_string(in);
  ck.params = take_tensors(in);
  ck.moment1 = take_tensors(in);
  ck.moment2 = take_tensors(in);
  return ck;
}

Checkpoint capture(const MaggieModel<float>& model, const AdamW* opt, const Config& cfg, std::int64_t step) {
  Checkpoint ck;
  ck.config_text = cfg.to_string();
  ck.config_hash = cfg.hash();
  ck.step = step;
  const auto& entries = model.params().entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    ck.params.push_back({entries[k].name, entries[k].var->value});
    if (opt) {
      ck.moment1.push_back({entries[k].name, opt->first_moment()[k]});
      ck.moment2.push_back({entries[k].name, opt->second_moment()[k]});
    }
  }
  return ck;
}

void restore(const Checkpoint& ck, MaggieModel<float>& model, AdamW* opt) {
  const auto& entries = model.params().entries();
  if (ck.params.size() != entries.size())
    throw CompatibilityError("checkpoint has " + std::to_string(ck.params.size()) + " tensors, model expects " +
                             std::to_string(entries.size()));
  auto check = [&](const std::vector<NamedTensor>& ts, std::size_t k) {
    if (ts[k].name != entries[k].name || ts[k].value.shape() != entries[k].var->value.shape())
      throw CompatibilityError("checkpoint tensor " + ts[k].name + " " + shape_str(ts[k].value.shape()) +
                               " does not match model tensor " + entries[k].name + " " +
                               shape_str(entries[k].var->value.shape()));
  };
  for (std::size_t k = 0; k < entries.size(); ++k) check(ck.params, k);
  for (std::size_t k = 0; k < entries.size(); ++k) entries[k].var->value = ck.params[k].value;
  if (!opt) return;
  if (ck.moment1.size() != entries.size() || ck.moment2.size() != entries.size())
    throw CompatibilityError("checkpoint carries no optimiser state");
  for (std::size_t k = 0; k < entries.size(); ++k) {
    check(ck.moment1, k);
    check(ck.moment2, k);
    opt->first_moment()[k] = ck.moment1[k].value;
    opt->second_moment()[k] = ck.moment2[k].value;
  }
  opt->set_steps(ck.step);
}

// ---------------------------------------------------------------------------
// Shared helpers

TensorD predict(const MaggieModel<float>& model, const TensorD& frames, const Tensor<std::uint8_t>& masks) {
  const auto& mc = model.config();
  if (masks.dim(1) > mc.embed_slots)
    throw CompatibilityError(std::to_string(masks.dim(1)) + " instances exceed the model's " +
                             std::to_string(mc.embed_slots) + " embedding slots");
  if (frames.dim(2) % 8 || frames.dim(3) % 8)
    throw CompatibilityError("frame size " + std::to_string(frames.dim(2)) + "x" + std::to_string(frames.dim(3)) +
                             " is not divisible by 8");
  ad::NoGradGuard guard;
  auto out = model.forward(frames.cast<float>(), InstanceMaskSet(masks));
  return out.alpha->value.cast<double>();
}

namespace {

std::unique_ptr<MaggieModel<float>> model_from(const Config& cfg, std::uint64_t seed) {
  return std::make_unique<MaggieModel<float>>(model_config(cfg), seed);
}

}  // namespace

std::unique_ptr<MaggieModel<float>> load_model(const RunOptions& run, const std::optional<fs::path>& checkpoint,
                                               Config* effective) {
  if (!checkpoint) {
    if (effective) *effective = run.config;
    return model_from(run.config, run.seed);
  }
  const auto ck = load_checkpoint(*checkpoint);
  const Config cfg = Config::parse(ck.config_text, checkpoint->string());
  if (cfg.hash() != ck.config_hash) throw CompatibilityError("checkpoint config hash does not match its config");
  auto model = model_from(cfg, run.seed);
  restore(ck, *model, nullptr);
  if (effective) *effective = cfg;
  return model;
}

// ---------------------------------------------------------------------------
// synth

nlohmann::json run_synth(const RunOptions& run, const SynthOptions& opt) {
  if (run.out.empty()) throw InputError("synth needs --out");
  if (opt.count < 0) throw InputError("count must be >= 0");
  if (opt.kind != "video" && opt.kind != "image") throw InputError("kind must be video or image");
  const auto scfg = synth_config(run.config);
  std::optional<synth::AssetStore> store;
  if (opt.assets) {
    try {
      store = synth::load_asset_store(*opt.assets);
    } catch (const io::IoError& e) {
      throw InputError(e.what());
    }
  }
  fs::create_directories(run.out);
  nlohmann::json samples = nlohmann::json::array();
  for (std::int64_t k = 0; k < opt.count; ++k) {
    const std::uint64_t seed = derive_seed(run.seed, static_cast<std::uint64_t>(k));
    auto s = opt.kind == "video" ? synth::synthesize_video(scfg, seed, store ? &*store : nullptr)
                                 : synth::synthesize_image(scfg, seed, store ? &*store : nullptr);
    char name[16];
    std::snprintf(name, sizeof name, "%04d", static_cast<int>(k));
    s.manifest["config_hash"] = hash_hex(run.config.hash());
    synth::write_sample(run.out / name, s);
    samples.push_back({{"name", name},
                       {"seed", seed},
                       {"instances", s.num_instances()},
                       {"frames", s.num_frames()},
                       {"occlusion_max", s.manifest["occlusion"]["max"]}});
  }
  nlohmann::json manifest = {{"command", "synth"},
                             {"kind", opt.kind},
                             {"tier", synth::tier_name(scfg.tier)},
                             {"count", opt.count},
                             {"seed", run.seed},
                             {"config", run.config.to_string()},
                             {"config_hash", hash_hex(run.config.hash())},
                             {"samples", samples}};
  write_json(run.out / "manifest.json", manifest);
  log_line(run, "synth: wrote " + std::to_string(opt.count) + " " + opt.kind + " samples (" +
                    synth::tier_name(scfg.tier) + ") to " + run.out.string());
  return manifest;
}

// ---------------------------------------------------------------------------
// train

namespace {

struct TrainItem {
  Tensor<float> frames;          // [T, 3, H, W]
  Tensor<std::uint8_t> masks;    // [T, N, H, W]
  Tensor<float> gt;              // [T, N, H, W]
  std::string source;
  Index t0 = 0;
};

struct TrainSettings {
  Index batch, window, image_steps, crop;
  bool shuffle;
  double omit;
};

TrainItem draw_item(const std::vector<synth::Sample>& data, const std::vector<std::string>& names, Index window,
                    const TrainSettings& ts, std::mt19937_64& rng) {
  const Index k = std::uniform_int_distribution<Index>(0, static_cast<Index>(data.size()) - 1)(rng);
  const auto& s = data[static_cast<std::size_t>(k)];
  const Index T = s.num_frames(), H = s.frames.dim(2), W = s.frames.dim(3);
  const Index tw = std::min(window, T);
  const Index t0 = std::uniform_int_distribution<Index>(0, T - tw)(rng);
  Index ch = H, cw = W, y0 = 0, x0 = 0;
  if (ts.crop > 0 && (ts.crop < H || ts.crop < W)) {
    ch = std::min(ts.crop, H);
    cw = std::min(ts.crop, W);
    y0 = std::uniform_int_distribution<Index>(0, H - ch)(rng);
    x0 = std::uniform_int_distribution<Index>(0, W - cw)(rng);
  }
  std::vector<Index> inst(static_cast<std::size_t>(s.num_instances()));
  std::iota(inst.begin(), inst.end(), 0);
  if (ts.shuffle) std::shuffle(inst.begin(), inst.end(), rng);
  if (inst.size() >= 2 && std::uniform_real_distribution<double>(0, 1)(rng) < ts.omit)
    inst.erase(inst.begin() + std::uniform_int_distribution<Index>(0, static_cast<Index>(inst.size()) - 1)(rng));
  const Index N = static_cast<Index>(inst.size());

  TrainItem it{Tensor<float>({tw, 3, ch, cw}), Tensor<std::uint8_t>({tw, N, ch, cw}), Tensor<float>({tw, N, ch, cw}),
               names[static_cast<std::size_t>(k)], t0};
  for (Index t = 0; t < tw; ++t) {
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < ch; ++y)
        for (Index x = 0; x < cw; ++x) it.frames(t, c, y, x) = static_cast<float>(s.frames(t0 + t, c, y0 + y, x0 + x));
    for (Index i = 0; i < N; ++i) {
      const Index src = inst[static_cast<std::size_t>(i)];
      for (Index y = 0; y < ch; ++y)
        for (Index x = 0; x < cw; ++x) {
          it.masks(t, i, y, x) = s.masks(t0 + t, src, y0 + y, x0 + x);
          it.gt(t, i, y, x) = static_cast<float>(s.alphas(t0 + t, src, y0 + y, x0 + x));
        }
    }
  }
  return it;
}

void dump_batch(const fs::path& dir, const TrainItem& it, std::int64_t step, const std::map<std::string, double>& terms) {
  synth::Sample s;
  s.frames = it.frames.cast<double>();
  s.alphas = it.gt.cast<double>();
  s.masks = it.masks;
  s.manifest = {{"step", step}, {"source", it.source}, {"t0", it.t0}, {"terms", terms}};
  synth::write_sample(dir, s);
}

}  // namespace

nlohmann::json run_train(const RunOptions& run, const TrainOptions& opt) {
  if (run.out.empty()) throw InputError("train needs --out");
  const fs::path data_dir = !opt.data.empty() ? opt.data : fs::path(run.config.get("train.data"));
  if (data_dir.empty()) throw InputError("train needs --data or train.data");
  const auto dirs = synth::list_samples(data_dir);
  if (dirs.empty()) throw InputError("no samples under " + data_dir.string());
  std::vector<synth::Sample> data;
  std::vector<std::string> names;
  for (const auto& d : dirs) {
    try {
      data.push_back(synth::read_sample(d));
    } catch (const io::IoError& e) {
      throw InputError(e.what());
    }
    names.push_back(d.filename().string());
  }

  const Config& cfg = run.config;
  const TrainSettings ts{cfg.integer("train.batch"),        cfg.integer("train.window"),
                         cfg.integer("train.image_steps"),  cfg.integer("train.crop"),
                         cfg.flag("train.shuffle_masks"),   cfg.number("train.omit_prob")};
  if (ts.batch < 1 || ts.window < 1) throw InputError("train.batch and train.window must be >= 1");
  if (ts.crop % 8) throw InputError("train.crop must be a multiple of 8");
  for (const auto& s : data) {
    if ((ts.crop == 0 || ts.crop > s.frames.dim(2)) && s.frames.dim(2) % 8) throw CompatibilityError("frame height not divisible by 8");
    if ((ts.crop == 0 || ts.crop > s.frames.dim(3)) && s.frames.dim(3) % 8) throw CompatibilityError("frame width not divisible by 8");
  }
  const auto weights = loss_weights(cfg);
  const auto acfg = adamw_config(cfg);
  const std::int64_t every = cfg.integer("train.checkpoint_every");

  MaggieModel<float> model(model_config(cfg), run.seed);
  AdamW optim(model.params(), acfg);
  std::int64_t start = 0;
  if (opt.resume) {
    const auto ck = load_checkpoint(*opt.resume);
    if (ck.config_hash != cfg.hash())
      throw CompatibilityError("resume checkpoint config hash " + hash_hex(ck.config_hash) + " differs from " +
                               hash_hex(cfg.hash()));
    restore(ck, model, &optim);
    start = ck.step;
  }

  fs::create_directories(run.out / "checkpoints");
  std::ofstream log(run.out / "log.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
  nlohmann::json checkpoints = nlohmann::json::array();
  double last_loss = 0;
  const auto t_begin = std::chrono::steady_clock::now();

  for (std::int64_t step = start; step < acfg.total_steps; ++step) {
    std::mt19937_64 rng(derive_seed(run.seed, 0x7000000000ULL + static_cast<std::uint64_t>(step)));
    const bool image_mode = step < ts.image_steps;
    const Index window = image_mode ? 1 : ts.window;
    std::map<std::string, double> terms;
    double total = 0, uncertain = 0;
    for (Index b = 0; b < ts.batch; ++b) {
      const auto item = draw_item(data, names, window, ts, rng);
      auto out = model.forward(item.frames, InstanceMaskSet(item.masks));
      auto loss = training_loss(out, item.gt, weights);
      const double value = static_cast<double>(loss.total->value[0]);
      if (!std::isfinite(value)) {
        const fs::path dump = run.out / "nan_dump" / ("step_" + std::to_string(step));
        dump_batch(dump, item, step, loss.breakdown);
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (batch written to " + dump.string() +
                            ")");
      }
      ad::backward(loss.total);
      total += value / static_cast<double>(ts.batch);
      uncertain += out.sparsity.uncertain / static_cast<double>(ts.batch);
      for (const auto& [k, v] : loss.breakdown) terms[k] += v / static_cast<double>(ts.batch);
    }
    const double lr = learning_rate(acfg, step);
    const double gnorm = optim.step(1.0 / static_cast<double>(ts.batch));
    last_loss = total;
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    log << nlohmann::json{{"step", step + 1},     {"lr", lr},          {"loss", total},
                          {"terms", terms},       {"grad_norm", gnorm}, {"uncertain", uncertain},
                          {"mode", image_mode ? "image" : "video"},
                          {"elapsed_s", elapsed}}
               .dump()
        << "\n";
    if (every > 0 && (step + 1) % every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld.bin", static_cast<long long>(step + 1));
      save_checkpoint(run.out / "checkpoints" / name, capture(model, &optim, cfg, step + 1));
      checkpoints.push_back(std::string("checkpoints/") + name);
    }
    if (!run.quiet && ((step + 1) % 50 == 0 || step + 1 == acfg.total_steps))
      std::cout << "step " << step + 1 << "/" << acfg.total_steps << " loss " << total << " lr " << lr << std::endl;
  }
  log.flush();
  save_checkpoint(run.out / "final.bin", capture(model, &optim, cfg, std::max(start, acfg.total_steps)));
  nlohmann::json manifest = {{"command", "train"},
                             {"config", cfg.to_string()},
                             {"config_hash", hash_hex(cfg.hash())},
                             {"seed", run.seed},
                             {"deterministic", run.deterministic},
                             {"data", data_dir.string()},
                             {"samples", names},
                             {"start_step", start},
                             {"steps", acfg.total_steps},
                             {"final_loss", last_loss},
                             {"checkpoints", checkpoints},
                             {"final", "final.bin"}};
  if (opt.resume) manifest["resumed_from"] = opt.resume->string();
  write_json(run.out / "manifest.json", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// eval

nlohmann::json run_eval(const RunOptions& run, const EvalOptions& opt) {
  if (run.out.empty()) throw InputError("eval needs --out");
  const auto dirs = synth::list_samples(opt.data);
  if (!fs::is_directory(opt.data)) throw InputError("no dataset at " + opt.data.string());

  Config cfg = run.config;
  std::unique_ptr<MaggieModel<float>> model;
  if (!opt.identity) {
    if (!opt.checkpoint) throw InputError("eval needs --checkpoint (or --identity)");
    const auto ck = load_checkpoint(*opt.checkpoint);
    const Config ck_cfg = Config::parse(ck.config_text, opt.checkpoint->string());
    if (opt.config_given && run.config.hash() != ck.config_hash && !opt.force)
      throw CompatibilityError("config hash " + hash_hex(run.config.hash()) + " does not match checkpoint " +
                               hash_hex(ck.config_hash) + " (use --force to override)");
    if (!opt.config_given) cfg = ck_cfg;
    model = model_from(cfg, run.seed);
    restore(ck, *model, nullptr);
  }
  const auto eopt = eval_options(cfg);

  fs::create_directories(run.out / "per_video");
  std::vector<metrics::MetricReport> reports;
  nlohmann::json videos = nlohmann::json::array();
  for (const auto& d : dirs) {
    synth::Sample s;
    try {
      s = synth::read_sample(d);
    } catch (const io::IoError& e) {
      throw InputError(e.what());
    }
    const TensorD pred = opt.identity ? s.alphas : predict(*model, s.frames, s.masks);
    auto report = metrics::evaluate(pred, s.alphas, eopt);
    write_json(run.out / "per_video" / (d.filename().string() + ".json"), metrics::to_json(report));
    videos.push_back(d.filename().string());
    reports.push_back(std::move(report));
  }
  const auto agg = metrics::aggregate(reports);
  const auto j = metrics::to_json(agg);
  write_json(run.out / "metrics.json", j);
  write_json(run.out / "manifest.json", {{"command", "eval"},
                                         {"data", opt.data.string()},
                                         {"identity", opt.identity},
                                         {"checkpoint", opt.checkpoint ? opt.checkpoint->string() : ""},
                                         {"config", cfg.to_string()},
                                         {"config_hash", hash_hex(cfg.hash())},
                                         {"videos", videos}});
  if (!run.quiet) {
    for (const auto& [k, v] : agg) std::cout << k << " " << v.mean << "\n";
    std::cout.flush();
  }
  return j;
}

// ---------------------------------------------------------------------------
// infer

nlohmann::json run_infer(const RunOptions& run, const InferOptions& opt) {
  if (run.out.empty()) throw InputError("infer needs --out");
  auto pngs = [](const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir.string());
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto frame_files = pngs(opt.frames);
  if (frame_files.empty()) throw InputError("no frames in " + opt.frames.string());
  if (!fs::is_directory(opt.masks)) throw InputError("not a directory: " + opt.masks.string());
  std::vector<fs::path> inst_dirs;
  for (const auto& e : fs::directory_iterator(opt.masks))
    if (e.is_directory()) inst_dirs.push_back(e.path());
  std::sort(inst_dirs.begin(), inst_dirs.end(), [](const fs::path& a, const fs::path& b) {
    const auto sa = a.filename().string(), sb = b.filename().string();
    return sa.size() != sb.size() ? sa.size() < sb.size() : sa < sb;
  });
  if (inst_dirs.empty()) throw InputError("no instance mask directories in " + opt.masks.string());

  const Index T = static_cast<Index>(frame_files.size()), N = static_cast<Index>(inst_dirs.size());
  TensorD frames;
  Tensor<std::uint8_t> masks;
  try {
    for (Index t = 0; t < T; ++t) {
      const TensorD rgb = io::read_rgb(frame_files[static_cast<std::size_t>(t)]);
      if (t == 0) {
        frames = TensorD({T, 3, rgb.dim(1), rgb.dim(2)});
        masks = Tensor<std::uint8_t>({T, N, rgb.dim(1), rgb.dim(2)});
      }
      if (rgb.dim(1) != frames.dim(2) || rgb.dim(2) != frames.dim(3)) throw InputError("frame sizes differ");
      std::copy_n(rgb.data(), rgb.size(), frames.data() + t * rgb.size());
    }
    const Index hw = frames.dim(2) * frames.dim(3);
    for (Index i = 0; i < N; ++i) {
      const auto files = pngs(inst_dirs[static_cast<std::size_t>(i)]);
      if (static_cast<Index>(files.size()) != T)
        throw InputError("instance " + inst_dirs[static_cast<std::size_t>(i)].filename().string() + " has " +
                         std::to_string(files.size()) + " masks for " + std::to_string(T) + " frames");
      for (Index t = 0; t < T; ++t) {
        const TensorD m = io::read_gray(files[static_cast<std::size_t>(t)]);
        if (m.size() != hw) throw InputError("mask size differs from frame size");
        for (Index k = 0; k < hw; ++k) masks.plane(t, i)[k] = m[k] >= 0.5 ? 1 : 0;
      }
    }
  } catch (const io::IoError& e) {
    throw InputError(e.what());
  }

  Config cfg;
  auto model = load_model(run, opt.checkpoint, &cfg);
  TensorD alpha;
  try {
    alpha = predict(*model, frames, masks);
  } catch (const ValidationError& e) {
    throw InputError(e.what());
  }
  const Index H = frames.dim(2), W = frames.dim(3);
  nlohmann::json outputs = nlohmann::json::array();
  for (Index i = 0; i < N; ++i) {
    const std::string inst = inst_dirs[static_cast<std::size_t>(i)].filename().string();
    for (Index t = 0; t < T; ++t) {
      const std::string name = frame_files[static_cast<std::size_t>(t)].filename().string();
      io::write_gray16(run.out / inst / name, alpha.plane(t, i), H, W);
      if (opt.preview) {
        TensorD rgb({3, H, W});
        for (Index c = 0; c < 3; ++c)
          for (Index k = 0; k < H * W; ++k) rgb[c * H * W + k] = frames.data()[(t * 3 + c) * H * W + k] * alpha.plane(t, i)[k];
        io::write_rgb8(run.out / "preview" / inst / name, rgb.data(), H, W);
      }
    }
    outputs.push_back(inst);
  }
  nlohmann::json manifest = {{"command", "infer"},
                             {"frames", T},
                             {"instances", outputs},
                             {"checkpoint", opt.checkpoint ? opt.checkpoint->string() : ""},
                             {"config", cfg.to_string()},
                             {"config_hash", hash_hex(cfg.hash())}};
  write_json(run.out / "manifest.json", manifest);
  log_line(run, "infer: wrote " + std::to_string(N) + " instance sequences to " + run.out.string());
  return manifest;
}

// ---------------------------------------------------------------------------
// bench

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Wall time and activation peak (bytes above the live baseline) of one forward.
std::pair<double, double> timed_forward(const MaggieModel<float>& model, const Tensor<float>& frames,
                                        const InstanceMaskSet& masks) {
  ad::NoGradGuard guard;
  const std::size_t base = memory::live_bytes();
  memory::reset_peak();
  const auto t0 = std::chrono::steady_clock::now();
  {
    auto out = model.forward(frames, masks);
    (void)out;
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return {ms, static_cast<double>(memory::peak_bytes() - base)};
}

}  // namespace

std::vector<BenchRow> run_bench(const RunOptions& run, const BenchOptions& opt) {
  if (opt.runs < 1) throw InputError("runs must be >= 1");
  if (opt.instances.empty()) throw InputError("no instance counts given");
  auto model = load_model(run, opt.checkpoint);
  const Index H = run.config.integer("bench.height"), W = run.config.integer("bench.width");
  const Index asset = run.config.integer("bench.asset");
  if (H % 8 || W % 8) throw InputError("bench size must be divisible by 8");

  std::vector<BenchRow> rows;
  for (const auto n : opt.instances) {
    if (n < 1 || n > model->config().embed_slots) throw InputError("instance count out of range: " + std::to_string(n));
    const auto scene = synth::synthesize_grid(H, W, n, asset, asset, derive_seed(run.seed, 0xbe00 + static_cast<std::uint64_t>(n)));
    const Tensor<float> frames = scene.frames.cast<float>();
    const InstanceMaskSet masks(scene.masks);
    std::vector<double> times;
    double peak = 0;
    timed_forward(*model, frames, masks);  // warm-up
    for (std::int64_t r = 0; r < opt.runs; ++r) {
      const auto [ms, bytes] = timed_forward(*model, frames, masks);
      times.push_back(ms);
      peak = std::max(peak, bytes);
    }
    BenchRow row;
    row.instances = n;
    row.median_ms = median(times);
    row.peak_mb = peak / (1024.0 * 1024.0);
    if (opt.sequential) {
      std::vector<InstanceMaskSet> singles;
      for (Index i = 0; i < n; ++i) {
        Tensor<std::uint8_t> one({1, 1, H, W});
        std::copy_n(scene.masks.plane(0, i), H * W, one.plane(0, 0));
        singles.emplace_back(std::move(one));
      }
      std::vector<double> seq;
      for (std::int64_t r = 0; r < opt.runs; ++r) {
        double total = 0;
        for (const auto& m : singles) total += timed_forward(*model, frames, m).first;
        seq.push_back(total);
      }
      row.sequential_ms = median(seq);
    }
    rows.push_back(row);
  }
  const BenchRow& base = rows.front();
  for (auto& r : rows) {
    r.latency_ratio = r.median_ms / base.median_ms;
    r.memory_ratio = base.peak_mb > 0 ? r.peak_mb / base.peak_mb : 1.0;
    r.sequential_ratio = base.sequential_ms > 0 ? r.sequential_ms / base.sequential_ms : 1.0;
  }

  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows)
    table.push_back({{"instances", r.instances},
                     {"median_ms", r.median_ms},
                     {"latency_ratio", r.latency_ratio},
                     {"peak_mb", r.peak_mb},
                     {"memory_ratio", r.memory_ratio},
                     {"sequential_ms", r.sequential_ms},
                     {"sequential_ratio", r.sequential_ratio}});
  if (!run.out.empty()) {
    fs::create_directories(run.out);
    write_json(run.out / "bench.json", {{"command", "bench"},
                                        {"height", H},
                                        {"width", W},
                                        {"runs", opt.runs},
                                        {"checkpoint", opt.checkpoint ? opt.checkpoint->string() : ""},
                                        {"rows", table}});
  }
  if (!run.quiet) {
    std::printf("%4s %11s %7s %9s %7s %12s %7s\n", "N", "median_ms", "ratio", "peak_mb", "ratio", "seq_ms", "ratio");
    for (const auto& r : rows)
      std::printf("%4lld %11.2f %7.3f %9.2f %7.3f %12.2f %7.3f\n", static_cast<long long>(r.instances), r.median_ms,
                  r.latency_ratio, r.peak_mb, r.memory_ratio, r.sequential_ms, r.sequential_ratio);
    std::fflush(stdout);
  }
  return rows;
}

}  // namespace maggie::harness

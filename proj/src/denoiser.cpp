// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/denoiser.hpp"

#include "star/io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace star {

using ag::Mat;
using ag::Parameter;
using ag::Var;
using nlohmann::json;

namespace {

std::atomic<double> g_geometry_peak{0.0};

void audit_geometry(const Mat& g) {
  const double m = g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
  double prev = g_geometry_peak.load();
  while (m > prev && !g_geometry_peak.compare_exchange_weak(prev, m)) {
  }
}

Mat init_normal(Eigen::Index r, Eigen::Index c, double std, NoiseStream& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
  return m;
}

constexpr double kNoiseFloor = 1e-3;

}  // namespace

struct Denoiser::Weights {
  struct Layer {
    Parameter norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
  };
  Parameter w_in, b_in, pos, tag_emb, w_noise, b_noise;
  std::vector<Layer> layers;
  Parameter norm_out, w_out, b_out;

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out{&w_in, &b_in, &pos, &tag_emb, &w_noise, &b_noise};
    for (Layer& l : layers) {
      for (Parameter* p : {&l.norm1, &l.wq, &l.wk, &l.wv, &l.wo, &l.norm2, &l.w1, &l.b1, &l.w2, &l.b2}) {
        out.push_back(p);
      }
    }
    for (Parameter* p : {&norm_out, &w_out, &b_out}) out.push_back(p);
    return out;
  }
};

bool DenoiserConfig::valid() const {
  return layers > 0 && heads > 0 && width > 0 && width % heads == 0 && (width / heads) % 2 == 0 && patch > 0 &&
         frames > 0 && history_window >= 0 && image_width % patch == 0 && image_height % patch == 0 &&
         image_width > 0 && image_height > 0 && channels > 0 && tags > 0 && mlp_ratio > 0 && noise_features > 0 &&
         noise_features % 2 == 0 && rope_base > 1.0 && sigma_data > 0.0;
}

void to_json(json& j, const DenoiserConfig& c) {
  j = json{{"layers", c.layers},
           {"heads", c.heads},
           {"width", c.width},
           {"patch", c.patch},
           {"frames", c.frames},
           {"history_window", c.history_window},
           {"rope_base", c.rope_base},
           {"image_width", c.image_width},
           {"image_height", c.image_height},
           {"channels", c.channels},
           {"tags", c.tags},
           {"mlp_ratio", c.mlp_ratio},
           {"noise_features", c.noise_features},
           {"sigma_data", c.sigma_data}};
}

void from_json(const json& j, DenoiserConfig& c) {
  const DenoiserConfig d;
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.width = j.value("width", d.width);
  c.patch = j.value("patch", d.patch);
  c.frames = j.value("frames", d.frames);
  c.history_window = j.value("history_window", d.history_window);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.image_width = j.value("image_width", d.image_width);
  c.image_height = j.value("image_height", d.image_height);
  c.channels = j.value("channels", d.channels);
  c.tags = j.value("tags", d.tags);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.noise_features = j.value("noise_features", d.noise_features);
  c.sigma_data = j.value("sigma_data", d.sigma_data);
}

NoiseSchedule NoiseSchedule::geometric(int count, double sigma_max, double sigma_min) {
  if (count <= 0 || !(sigma_max > 0) || !(sigma_min > 0) || (count > 1 && !(sigma_max > sigma_min))) {
    throw std::invalid_argument("NoiseSchedule::geometric: bad range");
  }
  NoiseSchedule s;
  for (int i = 0; i < count; ++i) {
    const double f = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
    s.sigmas.push_back(sigma_max * std::pow(sigma_min / sigma_max, f));
  }
  return s;
}

NoiseSchedule NoiseSchedule::student_default() { return geometric(4, 2.5, 0.1); }
NoiseSchedule NoiseSchedule::teacher_default() { return geometric(8, 2.5, 0.02); }

bool NoiseSchedule::valid() const {
  if (sigmas.empty()) return false;
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] > 0) || !std::isfinite(sigmas[i])) return false;
    if (i > 0 && !(sigmas[i] < sigmas[i - 1])) return false;
  }
  return true;
}

PositionBands PositionBands::standard(const DenoiserConfig& c) {
  const int n = c.tokens();
  return {0, n, 2 * n};
}

bool PositionBands::valid(const DenoiserConfig& c) const {
  const int n = c.tokens();
  const int w = std::max(1, c.history_window);
  struct Range {
    int lo, hi;
  };
  const Range r[3] = {{current_start, current_start + n}, {reference_start, reference_start + n},
                      {history_start, history_start + w * n}};
  for (int i = 0; i < 3; ++i) {
    if (r[i].lo < 0) return false;
    for (int j = i + 1; j < 3; ++j) {
      if (r[i].lo < r[j].hi && r[j].lo < r[i].hi) return false;
    }
  }
  return true;
}

std::vector<int> assign_positions(BlockKind kind, const PositionBands& bands, int tokens, int slot) {
  int start = bands.current_start;
  if (kind == BlockKind::reference) start = bands.reference_start;
  if (kind == BlockKind::history) start = bands.history_start + slot * tokens;
  std::vector<int> out(static_cast<std::size_t>(tokens));
  for (int j = 0; j < tokens; ++j) out[static_cast<std::size_t>(j)] = start + j;
  return out;
}

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> attention_mask(std::span<const KeySegment> layout,
                                                                    int query_tokens) {
  int keys = 0;
  for (const KeySegment& s : layout) keys += s.tokens;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> m(query_tokens, keys);
  // Cached blocks are complete, and the current block is bidirectional, so
  // every query sees every listed key.
  m.setConstant(true);
  return m;
}

Mat patchify(std::span<const Image> frames, int patch) {
  if (frames.empty()) throw std::invalid_argument("patchify: no frames");
  const Image& f0 = frames[0];
  if (f0.width % patch != 0 || f0.height % patch != 0) throw std::invalid_argument("patchify: size not divisible");
  const int pw = f0.width / patch;
  const int per_frame = pw * (f0.height / patch);
  Mat out(static_cast<Eigen::Index>(frames.size()) * per_frame, patch * patch * f0.channels);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const Image& f = frames[k];
    if (f.width != f0.width || f.height != f0.height || f.channels != f0.channels) {
      throw std::invalid_argument("patchify: frame size mismatch");
    }
    for (int t = 0; t < per_frame; ++t) {
      const int px = t % pw;
      const int py = t / pw;
      const Eigen::Index row = static_cast<Eigen::Index>(k) * per_frame + t;
      Eigen::Index col = 0;
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          for (int c = 0; c < f.channels; ++c) out(row, col++) = 2.0 * f.at(px * patch + dx, py * patch + dy, c) - 1.0;
        }
      }
    }
  }
  return out;
}

std::vector<Image> unpatchify(const Mat& tokens, int frames, int width, int height, int channels, int patch) {
  const int pw = width / patch;
  const int per_frame = pw * (height / patch);
  if (tokens.rows() != static_cast<Eigen::Index>(frames) * per_frame || tokens.cols() != patch * patch * channels) {
    throw std::invalid_argument("unpatchify: token grid mismatch");
  }
  std::vector<Image> out;
  for (int k = 0; k < frames; ++k) {
    Image img(width, height, channels);
    for (int t = 0; t < per_frame; ++t) {
      const int px = t % pw;
      const int py = t / pw;
      const Eigen::Index row = static_cast<Eigen::Index>(k) * per_frame + t;
      Eigen::Index col = 0;
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          for (int c = 0; c < channels; ++c) {
            img.at(px * patch + dx, py * patch + dy, c) =
                static_cast<float>(std::clamp(0.5 * (tokens(row, col++) + 1.0), 0.0, 1.0));
          }
        }
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

Mat patchify_geometry(std::span<const WarpResult> warps, int patch) {
  if (warps.empty()) throw std::invalid_argument("patchify_geometry: no warps");
  const int w = warps[0].width();
  const int h = warps[0].height();
  const int ch = warps[0].frame.channels;
  if (w % patch != 0 || h % patch != 0) throw std::invalid_argument("patchify_geometry: size not divisible");
  const int pw = w / patch;
  const int per_frame = pw * (h / patch);
  Mat out(static_cast<Eigen::Index>(warps.size()) * per_frame, patch * patch * (ch + 1));
  for (std::size_t k = 0; k < warps.size(); ++k) {
    const WarpResult& wr = warps[k];
    if (wr.width() != w || wr.height() != h || wr.frame.channels != ch) {
      throw std::invalid_argument("patchify_geometry: warp size mismatch");
    }
    for (int t = 0; t < per_frame; ++t) {
      const int px = t % pw;
      const int py = t / pw;
      const Eigen::Index row = static_cast<Eigen::Index>(k) * per_frame + t;
      Eigen::Index col = 0;
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          const int x = px * patch + dx;
          const int y = py * patch + dy;
          for (int c = 0; c < ch; ++c) out(row, col++) = wr.frame.at(x, y, c);
          out(row, col++) = wr.mask[static_cast<std::size_t>(y) * w + x] ? 1.0 : 0.0;
        }
      }
    }
  }
  return out;
}

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed)
    : config_(config), bands_(PositionBands::standard(config)), w_(std::make_unique<Weights>()) {
  if (!config.valid()) throw std::invalid_argument("Denoiser: invalid config");
  info.seed = seed;
  const int c = config.width;
  const int in_dim = config.patch_dim() + config.geometry_dim();
  const int hidden = c * config.mlp_ratio;
  const double resid = 1.0 / std::sqrt(2.0 * config.layers);
  NoiseStream rng(seed, 0, 0, "denoiser/init");

  NoiseStream fixed(0, 0, 0, "denoiser/fourier");
  fourier_freqs_ = init_normal(1, config.noise_features / 2, 1.0, fixed);

  Weights& w = *w_;
  w.w_in = Parameter("in.w", init_normal(in_dim, c, 1.0 / std::sqrt(in_dim), rng));
  w.b_in = Parameter("in.b", Mat::Zero(1, c));
  w.pos = Parameter("pos", init_normal(config.tokens(), c, 0.1, rng));
  w.tag_emb = Parameter("tag", init_normal(config.tags, c, 0.1, rng));
  w.w_noise = Parameter("noise.w", init_normal(config.noise_features, c, 1.0 / std::sqrt(config.noise_features), rng));
  w.b_noise = Parameter("noise.b", Mat::Zero(1, c));
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Weights::Layer layer;
    layer.norm1 = Parameter(p + "norm1", Mat::Ones(1, c));
    layer.wq = Parameter(p + "wq", init_normal(c, c, 1.0 / std::sqrt(c), rng));
    layer.wk = Parameter(p + "wk", init_normal(c, c, 1.0 / std::sqrt(c), rng));
    layer.wv = Parameter(p + "wv", init_normal(c, c, 1.0 / std::sqrt(c), rng));
    layer.wo = Parameter(p + "wo", init_normal(c, c, resid / std::sqrt(c), rng));
    layer.norm2 = Parameter(p + "norm2", Mat::Ones(1, c));
    layer.w1 = Parameter(p + "w1", init_normal(c, hidden, 1.0 / std::sqrt(c), rng));
    layer.b1 = Parameter(p + "b1", Mat::Zero(1, hidden));
    layer.w2 = Parameter(p + "w2", init_normal(hidden, c, resid / std::sqrt(hidden), rng));
    layer.b2 = Parameter(p + "b2", Mat::Zero(1, c));
    w.layers.push_back(std::move(layer));
  }
  w.norm_out = Parameter("out.norm", Mat::Ones(1, c));
  w.w_out = Parameter("out.w", init_normal(c, config.patch_dim(), 0.5 / std::sqrt(c), rng));
  w.b_out = Parameter("out.b", Mat::Zero(1, config.patch_dim()));
}

Denoiser::~Denoiser() = default;

std::vector<Parameter*> Denoiser::parameters() { return w_->all(); }

std::vector<const Parameter*> Denoiser::parameters() const {
  const auto all = w_->all();
  return {all.begin(), all.end()};
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void Denoiser::zero_except_output_bias(const ag::RowVec& bias) {
  for (Parameter* p : parameters()) p->value.setZero();
  if (bias.size() != w_->b_out.value.cols()) throw std::invalid_argument("zero_except_output_bias: bias width");
  w_->b_out.value = bias;
}

void Denoiser::copy_from(const Denoiser& other) {
  if (!(other.config_ == config_)) throw std::invalid_argument("copy_from: config mismatch");
  auto dst = parameters();
  auto src = other.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
}

bool Denoiser::same_weights(const Denoiser& other) const {
  if (!(other.config_ == config_)) return false;
  auto a = parameters();
  auto b = other.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value != b[i]->value) return false;
  }
  return true;
}

double Denoiser::non_current_geometry_peak() { return g_geometry_peak.load(); }
void Denoiser::reset_geometry_audit() { g_geometry_peak.store(0.0); }

Var Denoiser::embed(const Var& x, const Mat& geometry, double sigma, int tag) const {
  const DenoiserConfig& c = config_;
  if (x.rows() != c.tokens() || x.cols() != c.patch_dim()) throw std::invalid_argument("denoiser: token grid mismatch");
  if (geometry.rows() != c.tokens() || geometry.cols() != c.geometry_dim()) {
    throw std::invalid_argument("denoiser: geometry does not match token grid");
  }
  if (tag < 0 || tag >= c.tags) throw std::invalid_argument("denoiser: scene tag out of range");
  Weights& w = *w_;
  const double c_in = 1.0 / std::sqrt(sigma * sigma + c.sigma_data * c.sigma_data);
  const std::vector<Var> parts{ag::scale(x, c_in), ag::constant(geometry)};
  Var h = ag::linear(ag::concat_cols(parts), ag::param(w.w_in), ag::param(w.b_in));
  h = ag::add(h, ag::param(w.pos));
  h = ag::add_row(h, ag::gather_row(ag::param(w.tag_emb), tag));

  const double c_noise = std::log(std::max(sigma, kNoiseFloor)) / 4.0;
  const Eigen::Index half = fourier_freqs_.cols();
  Mat feats(1, 2 * half);
  for (Eigen::Index i = 0; i < half; ++i) {
    const double a = 2.0 * std::numbers::pi * fourier_freqs_(0, i) * c_noise;
    feats(0, i) = std::cos(a);
    feats(0, half + i) = std::sin(a);
  }
  h = ag::add_row(h, ag::linear(ag::constant(feats), ag::param(w.w_noise), ag::param(w.b_noise)));
  return h;
}

BlockKV Denoiser::encode(const Var& clean_tokens, BlockKind kind, int tag) const {
  if (kind == BlockKind::current) throw std::invalid_argument("encode: cache blocks are history or reference");
  const DenoiserConfig& c = config_;
  const Mat zero_geometry = Mat::Zero(c.tokens(), c.geometry_dim());
  audit_geometry(zero_geometry);
  Var h = embed(clean_tokens, zero_geometry, 0.0, tag);
  const std::vector<int> pos = assign_positions(kind, bands_, c.tokens());
  BlockKV out;
  out.kind = kind;
  for (std::size_t l = 0; l < w_->layers.size(); ++l) {
    Weights::Layer& layer = w_->layers[l];
    const Var n1 = ag::rmsnorm(h, ag::param(layer.norm1));
    LayerKV kv{ag::matmul(n1, ag::param(layer.wk)), ag::matmul(n1, ag::param(layer.wv))};
    out.layers.push_back(kv);
    if (l + 1 == w_->layers.size()) break;
    const Var q = ag::matmul(n1, ag::param(layer.wq));
    const std::vector<ag::KVSegment> segs{{kv.key, kv.value, pos}};
    h = ag::add(h, ag::matmul(ag::rope_attention(q, pos, segs, c.heads, c.rope_base), ag::param(layer.wo)));
    const Var n2 = ag::rmsnorm(h, ag::param(layer.norm2));
    h = ag::add(h, ag::linear(ag::gelu(ag::linear(n2, ag::param(layer.w1), ag::param(layer.b1))), ag::param(layer.w2),
                              ag::param(layer.b2)));
  }
  return out;
}

Var Denoiser::denoise(const Var& noisy, double sigma, const CacheView& cache, const Mat* geometry, int tag) const {
  const DenoiserConfig& c = config_;
  if (!(sigma >= 0) || !std::isfinite(sigma)) throw std::invalid_argument("denoise: bad sigma");
  if (static_cast<int>(cache.history.size()) > c.history_window) {
    throw std::invalid_argument("denoise: more history blocks than the window");
  }
  auto check_block = [&](const BlockKV* b) {
    if (b->layers.size() != static_cast<std::size_t>(c.layers)) throw std::invalid_argument("denoise: cache from a different config");
    for (const LayerKV& kv : b->layers) {
      if (kv.key.rows() != c.tokens() || kv.key.cols() != c.width) {
        throw std::invalid_argument("denoise: cache from a different config");
      }
    }
  };
  if (cache.reference) check_block(cache.reference);
  for (const BlockKV* b : cache.history) check_block(b);

  const Mat zero_geometry = geometry ? Mat() : Mat::Zero(c.tokens(), c.geometry_dim());
  Var h = embed(noisy, geometry ? *geometry : zero_geometry, sigma, tag);

  const std::vector<int> cur = assign_positions(BlockKind::current, bands_, c.tokens());
  const std::vector<int> ref = assign_positions(BlockKind::reference, bands_, c.tokens());
  std::vector<std::vector<int>> hist;
  for (std::size_t s = 0; s < cache.history.size(); ++s) {
    hist.push_back(assign_positions(BlockKind::history, bands_, c.tokens(), static_cast<int>(s)));
  }

  for (std::size_t l = 0; l < w_->layers.size(); ++l) {
    Weights::Layer& layer = w_->layers[l];
    const Var n1 = ag::rmsnorm(h, ag::param(layer.norm1));
    const Var q = ag::matmul(n1, ag::param(layer.wq));
    const Var k = ag::matmul(n1, ag::param(layer.wk));
    const Var v = ag::matmul(n1, ag::param(layer.wv));
    std::vector<ag::KVSegment> segs;
    if (cache.reference) segs.push_back({cache.reference->layers[l].key, cache.reference->layers[l].value, ref});
    for (std::size_t s = 0; s < cache.history.size(); ++s) {
      segs.push_back({cache.history[s]->layers[l].key, cache.history[s]->layers[l].value, hist[s]});
    }
    segs.push_back({k, v, cur});
    h = ag::add(h, ag::matmul(ag::rope_attention(q, cur, segs, c.heads, c.rope_base), ag::param(layer.wo)));
    const Var n2 = ag::rmsnorm(h, ag::param(layer.norm2));
    h = ag::add(h, ag::linear(ag::gelu(ag::linear(n2, ag::param(layer.w1), ag::param(layer.b1))), ag::param(layer.w2),
                              ag::param(layer.b2)));
  }
  return ag::linear(ag::rmsnorm(h, ag::param(w_->norm_out)), ag::param(w_->w_out), ag::param(w_->b_out));
}

void Denoiser::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["config"] = config_;
  manifest["stage"] = info.stage;
  manifest["rng"] = {{"seed", info.seed}, {"step", info.step}};
  manifest["tensors"] = json::array();
  std::vector<float> blob;
  for (const Parameter* p : parameters()) {
    manifest["tensors"].push_back({{"name", p->name}, {"shape", {p->value.rows(), p->value.cols()}}, {"dtype", "f32"}});
    for (Eigen::Index i = 0; i < p->value.size(); ++i) blob.push_back(static_cast<float>(p->value.data()[i]));
  }
  write_text(dir / "manifest.json", manifest.dump(2));
  write_f32(dir / "weights.bin", blob);
}

std::unique_ptr<Denoiser> Denoiser::load(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_text(dir / "manifest.json"));
  const DenoiserConfig config = manifest.at("config").get<DenoiserConfig>();
  auto model = std::make_unique<Denoiser>(config, manifest.at("rng").value("seed", std::uint64_t{0}));
  model->info.stage = manifest.value("stage", std::string("none"));
  model->info.step = manifest.at("rng").value("step", 0L);
  const std::vector<float> blob = read_f32(dir / "weights.bin");
  const json& tensors = manifest.at("tensors");
  auto params = model->parameters();
  if (tensors.size() != params.size()) throw std::runtime_error("checkpoint tensor count mismatch in " + dir.string());
  std::size_t at = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    const json& t = tensors[i];
    if (t.at("name") != p.name || t.at("shape")[0] != p.value.rows() || t.at("shape")[1] != p.value.cols() ||
        t.value("dtype", std::string("f32")) != "f32") {
      throw std::runtime_error("checkpoint tensor mismatch at " + p.name);
    }
    const auto n = static_cast<std::size_t>(p.value.size());
    if (at + n > blob.size()) throw std::runtime_error("checkpoint weights truncated in " + dir.string());
    for (std::size_t j = 0; j < n; ++j) p.value.data()[j] = blob[at + j];
    at += n;
  }
  if (at != blob.size()) throw std::runtime_error("checkpoint weights have trailing data in " + dir.string());
  return model;
}

Mat sample_prefix(const DenoiserModel& model, const CacheView& cache, const Mat* geometry, int tag,
                  const NoiseSchedule& schedule, std::uint64_t seed, int chunk) {
  if (!schedule.valid()) throw std::invalid_argument("sample_prefix: invalid schedule");
  const DenoiserConfig& c = model.config();
  ag::NoGradGuard no_grad;
  Mat eps(c.tokens(), c.patch_dim());
  NoiseStream(seed, chunk, 0, "sample").fill_normal(eps);
  Mat x = schedule.sigmas[0] * eps;
  for (int k = 0; k + 1 < schedule.count(); ++k) {
    const Mat x0 = model.denoise(ag::constant(x), schedule.sigmas[static_cast<std::size_t>(k)], cache, geometry, tag).value();
    NoiseStream(seed, chunk, k + 1, "sample").fill_normal(eps);
    x = x0 + schedule.sigmas[static_cast<std::size_t>(k + 1)] * eps;
  }
  return x;
}

Var sample_chunk(const DenoiserModel& model, const CacheView& cache, const Mat* geometry, int tag,
                 const NoiseSchedule& schedule, std::uint64_t seed, int chunk, bool grad_last_only) {
  if (!schedule.valid()) throw std::invalid_argument("sample_chunk: invalid schedule");
  if (grad_last_only) {
    return model.denoise(ag::constant(sample_prefix(model, cache, geometry, tag, schedule, seed, chunk)),
                         schedule.sigmas.back(), cache, geometry, tag);
  }
  const DenoiserConfig& c = model.config();
  Mat eps(c.tokens(), c.patch_dim());
  NoiseStream(seed, chunk, 0, "sample").fill_normal(eps);
  Var x = ag::constant(schedule.sigmas[0] * eps);
  for (int k = 0;; ++k) {
    Var x0 = model.denoise(x, schedule.sigmas[static_cast<std::size_t>(k)], cache, geometry, tag);
    if (k + 1 == schedule.count()) return x0;
    NoiseStream(seed, chunk, k + 1, "sample").fill_normal(eps);
    x = ag::add(x0, ag::constant(schedule.sigmas[static_cast<std::size_t>(k + 1)] * eps));
  }
}

}  // namespace star

#include "stconv/data_synth.hpp"

#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "stconv/rng.hpp"
#include "stconv/tensor_io.hpp"

namespace stconv {

std::array<BandMix, kBands> default_bands() {
  // Loosely: visible bands track the field, IR window bands are inverted, water
  // vapour bands are smooth.
  return {{{1.0, 0.0, 0.0},
           {0.8, 0.1, 0.7},
           {0.6, -0.1, 1.5},
           {-0.7, 0.3, 0.0},
           {-0.9, 0.2, 1.0},
           {0.5, 0.0, 2.5},
           {1.2, -0.2, 0.5},
           {-0.4, 0.4, 2.0},
           {0.9, 0.0, 3.0},
           {0.7, 0.1, 1.2},
           {-1.0, 0.5, 0.3}}};
}

void SceneSpec::validate() const {
  if (h < 1 || w < 1 || t_in < 1 || t_out < 1 || crop_factor < 1) throw ConfigError("scene: extents must be positive");
  if (h % crop_factor != 0 || w % crop_factor != 0) throw ConfigError("scene: grid not divisible by crop factor");
  if (!(rain_threshold > 0)) throw ConfigError("scene: rain threshold must be positive");
  const double last = static_cast<double>(t_in + t_out - 1);
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const Blob& b = blobs[i];
    if (!(b.sy > 0 && b.sx > 0)) throw ConfigError("scene: blob radii must be positive");
    for (double t : {0.0, last}) {
      const double ch = b.ch + t * b.vh, cw = b.cw + t * b.vw;
      if (ch < 0 || ch > static_cast<double>(h - 1) || cw < 0 || cw > static_cast<double>(w - 1))
        throw ConfigError("scene: blob " + std::to_string(i) + " leaves the grid by frame " +
                          std::to_string(static_cast<int>(last)));
    }
  }
}

Tensor<float> render_latent(const SceneSpec& s, std::int64_t t) {
  Tensor<float> out(Shape5{1, 1, 1, s.h, s.w});
  std::vector<double> acc(static_cast<std::size_t>(s.h * s.w), 0.0);
  const double td = static_cast<double>(t);
  for (const Blob& b : s.blobs) {
    const double ch = b.ch + td * b.vh, cw = b.cw + td * b.vw;
    std::vector<double> gw(static_cast<std::size_t>(s.w));
    for (std::int64_t w = 0; w < s.w; ++w) {
      const double d = (static_cast<double>(w) - cw) / b.sx;
      gw[static_cast<std::size_t>(w)] = std::exp(-0.5 * d * d);
    }
    for (std::int64_t h = 0; h < s.h; ++h) {
      const double d = (static_cast<double>(h) - ch) / b.sy;
      const double gh = b.amp * std::exp(-0.5 * d * d);
      for (std::int64_t w = 0; w < s.w; ++w) acc[static_cast<std::size_t>(h * s.w + w)] += gh * gw[static_cast<std::size_t>(w)];
    }
  }
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
  return out;
}

namespace {

// Separable Gaussian blur, edge-clamped, truncated at 3 sigma.
std::vector<double> blur(const std::vector<double>& img, std::int64_t h, std::int64_t w, double sigma) {
  if (sigma <= 0) return img;
  const auto r = static_cast<std::int64_t>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double norm = 0;
  for (std::int64_t i = -r; i <= r; ++i) norm += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  for (auto& v : k) v /= norm;
  auto clampi = [](std::int64_t v, std::int64_t hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  std::vector<double> tmp(img.size()), out(img.size());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double a = 0;
      for (std::int64_t i = -r; i <= r; ++i) a += k[static_cast<std::size_t>(i + r)] * img[static_cast<std::size_t>(y * w + clampi(x + i, w - 1))];
      tmp[static_cast<std::size_t>(y * w + x)] = a;
    }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double a = 0;
      for (std::int64_t i = -r; i <= r; ++i) a += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(clampi(y + i, h - 1) * w + x)];
      out[static_cast<std::size_t>(y * w + x)] = a;
    }
  return out;
}

Tensor<float> cropped_mask(const SceneSpec& s, std::int64_t frame) {
  Tensor<float> l = render_latent(s, frame);
  for (auto& v : l.data()) v = static_cast<double>(v) > s.rain_threshold ? 1.0f : 0.0f;
  return crop_center_spatial(l, s.crop_factor);
}

}  // namespace

Sample render(const SceneSpec& s, const std::string& id) {
  s.validate();
  Sample out;
  out.id = id;
  out.x = Tensor<float>(Shape5{1, kBands, s.t_in, s.h, s.w});
  for (std::int64_t t = 0; t < s.t_in; ++t) {
    const Tensor<float> lat = render_latent(s, t);
    std::vector<double> field(lat.data().begin(), lat.data().end());
    for (int b = 0; b < kBands; ++b) {
      const BandMix& m = s.bands[static_cast<std::size_t>(b)];
      const auto img = blur(field, s.h, s.w, m.blur);
      float* dst = &out.x.at(0, b, t, 0, 0);
      for (std::size_t i = 0; i < img.size(); ++i) dst[i] = static_cast<float>(m.gain * img[i] + m.offset);
    }
  }
  const std::int64_t ch = s.h / s.crop_factor, cw = s.w / s.crop_factor;
  out.y = Tensor<float>(Shape5{1, 1, s.t_out, ch, cw});
  for (std::int64_t t = 0; t < s.t_out; ++t) {
    const Tensor<float> m = cropped_mask(s, s.t_in + t);
    std::copy(m.data().begin(), m.data().end(), &out.y.at(0, 0, t, 0, 0));
  }
  return out;
}

Tensor<float> persistence_forecast(const SceneSpec& s) {
  const Tensor<float> last = cropped_mask(s, s.t_in - 1);
  Tensor<float> out(Shape5{1, 1, s.t_out, last.shape().h, last.shape().w});
  for (std::int64_t t = 0; t < s.t_out; ++t) std::copy(last.data().begin(), last.data().end(), &out.at(0, 0, t, 0, 0));
  return out;
}

void SamplerConfig::validate() const {
  if (h < 8 || w < 8) throw ConfigError("sampler: grid too small");
  if (h % crop_factor != 0 || w % crop_factor != 0) throw ConfigError("sampler: grid not divisible by crop factor");
  if (min_blobs < 0 || max_blobs < min_blobs) throw ConfigError("sampler: bad blob count range");
  if (!(min_sigma > 0) || max_sigma < min_sigma) throw ConfigError("sampler: bad sigma range");
  if (max_speed < 0) throw ConfigError("sampler: negative speed");
  if (!(rain_threshold > 0)) throw ConfigError("sampler: rain threshold must be positive");
  if (!(front_fraction >= 0 && front_fraction <= 1)) throw ConfigError("sampler: front_fraction must be in [0, 1]");
  if (!(pass_spread >= 0 && pass_spread <= 0.5)) throw ConfigError("sampler: pass_spread must be in [0, 0.5]");
  if (!(front_min_speed > 0 && front_min_speed <= max_speed)) throw ConfigError("sampler: front_min_speed must be in (0, max_speed]");
}

namespace {

SceneSpec empty_scene(const SamplerConfig& cfg) {
  SceneSpec s;
  s.h = cfg.h;
  s.w = cfg.w;
  s.t_in = cfg.t_in;
  s.t_out = cfg.t_out;
  s.crop_factor = cfg.crop_factor;
  s.rain_threshold = cfg.rain_threshold;
  return s;
}

// Elongated blob moving along +W at `speed`, with its tip inside the target window and a
// mask half-length along W in [min_len, max_len].
// Its centre crosses the window centre at frame `cross`.
Blob drifting_blob(const SamplerConfig& cfg, Rng& rng, double speed, double cross, double min_len, double max_len) {
  const double amp = rng.uniform(1.0, 1.6);
  const double k = std::sqrt(2.0 * std::log(amp / cfg.rain_threshold));
  const double ay = rng.uniform(14.0, 20.0), ax = rng.uniform(min_len, max_len);
  const double crop_h = static_cast<double>(cfg.h / cfg.crop_factor);
  const double top = static_cast<double>(cfg.h - cfg.h / cfg.crop_factor) / 2.0;
  const double tip = rng.uniform(-0.5, 1.5);
  Blob b;
  b.amp = amp;
  b.sy = ay / k;
  b.sx = ax / k;
  b.ch = rng.uniform() < 0.5 ? top - tip + ay : top + crop_h - 1 + tip - ay;
  const double centre = static_cast<double>(cfg.w - 1) / 2.0 + rng.uniform(-2.0, 2.0);
  b.vw = speed;
  b.cw = centre - cross * speed;
  return b;
}

double mid_frame(const SamplerConfig& cfg) {
  return static_cast<double>(cfg.t_in - 1) + static_cast<double>(cfg.t_out) / 2.0;
}

// Rotates a +W drifting blob into one of four axis directions about the grid centre.
Blob rotate(const Blob& b, int quarter, double h, double w) {
  Blob r = b;
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  for (int q = 0; q < quarter; ++q) {
    Blob n = r;
    n.ch = cy + (r.cw - cx);
    n.cw = cx - (r.ch - cy);
    n.vh = r.vw;
    n.vw = -r.vh;
    n.sy = r.sx;
    n.sx = r.sy;
    r = n;
  }
  return r;
}

}  // namespace

SceneSpec motion_scene(const SamplerConfig& cfg, std::uint64_t seed, std::uint64_t id) {
  cfg.validate();
  Rng rng(mix_seed(seed ^ id));
  SceneSpec s = empty_scene(cfg);
  s.blobs.push_back(drifting_blob(cfg, rng, 1.0, mid_frame(cfg), 20.0, 22.0));
  s.validate();
  return s;
}

SceneSpec sample_scene(const SamplerConfig& cfg, std::uint64_t seed, std::uint64_t id) {
  cfg.validate();
  Rng rng(mix_seed(seed ^ id));
  SceneSpec s = empty_scene(cfg);
  const double H = static_cast<double>(cfg.h), W = static_cast<double>(cfg.w);
  const double last = static_cast<double>(cfg.t_in + cfg.t_out - 1);

  // Some scenes are single drifting fronts (any axis direction), the rest free blob mixtures.
  if (cfg.h == cfg.w && rng.uniform() < cfg.front_fraction) {
    const double mid = mid_frame(cfg), span = static_cast<double>(cfg.t_out) / 6.0;
    for (int attempt = 0; attempt < 16; ++attempt) {
      const double speed = rng.uniform(cfg.front_min_speed, cfg.max_speed);
      const Blob b = drifting_blob(cfg, rng, speed, rng.uniform(mid - span, mid + span), 20.0, 22.0);
      s.blobs = {rotate(b, static_cast<int>(rng.below(4)), H, W)};
      try {
        s.validate();
        return s;
      } catch (const ConfigError&) {
        s.blobs.clear();
      }
    }
  }

  const auto n = cfg.min_blobs + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.max_blobs - cfg.min_blobs + 1)));
  for (std::int64_t i = 0; i < n; ++i) {
    Blob b;
    b.amp = rng.uniform(cfg.min_amp, cfg.max_amp);
    b.sy = rng.uniform(cfg.min_sigma, cfg.max_sigma);
    b.sx = rng.uniform(cfg.min_sigma, cfg.max_sigma);
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      const double speed = rng.uniform(0.0, cfg.max_speed), angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      b.vh = speed * std::sin(angle);
      b.vw = speed * std::cos(angle);
      // pass near the target window around the middle of the horizon
      const double mid = static_cast<double>(cfg.t_in) + static_cast<double>(cfg.t_out) / 2.0;
      const double mh = (H - 1) / 2.0 + rng.uniform(-1.0, 1.0) * cfg.pass_spread * H,
                 mw = (W - 1) / 2.0 + rng.uniform(-1.0, 1.0) * cfg.pass_spread * W;
      b.ch = mh - mid * b.vh;
      b.cw = mw - mid * b.vw;
      placed = true;
      for (double t : {0.0, last}) {
        const double ch = b.ch + t * b.vh, cw = b.cw + t * b.vw;
        if (ch < 0 || ch > H - 1 || cw < 0 || cw > W - 1) placed = false;
      }
    }
    if (!placed) {
      b.vh = b.vw = 0;
      b.ch = rng.uniform(0, H - 1);
      b.cw = rng.uniform(0, W - 1);
    }
    s.blobs.push_back(b);
  }
  s.validate();
  return s;
}

Dataset generate(const SamplerConfig& cfg, std::uint64_t seed, std::int64_t count, std::uint64_t first_id,
                 const std::string& split) {
  if (count < 0) throw ConfigError("generate: negative count");
  cfg.validate();
  Dataset d;
  d.samples.resize(static_cast<std::size_t>(count));
  d.scenes.resize(static_cast<std::size_t>(count));
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      const std::uint64_t id = first_id + static_cast<std::uint64_t>(i);
      auto& scene = d.scenes[static_cast<std::size_t>(i)];
      scene = sample_scene(cfg, seed, id);
      auto& sample = d.samples[static_cast<std::size_t>(i)];
      sample = render(scene, std::to_string(id));
      sample.split = split;
    } catch (...) {
#pragma omp critical(stconv_generate)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return d;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  std::ostringstream index;
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (s.id.empty() || s.id.find_first_of(" \t\n/") != std::string::npos) throw FormatError("dataset: bad sample id '" + s.id + "'");
    if (!ids.insert(s.id).second) throw FormatError("dataset: duplicate sample id " + s.id);
    const std::string xf = "x_" + s.id + ".stsr", yf = "y_" + s.id + ".stsr";
    write_stsr(dir / xf, s.x);
    write_stsr(dir / yf, s.y);
    index << s.id << ' ' << s.split << ' ' << xf << ' ' << yf << '\n';
  }
  std::ofstream os(dir / "index.txt", std::ios::trunc);
  if (!os) throw FormatError("dataset: cannot write " + (dir / "index.txt").string());
  os << index.str();
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "index.txt");
  if (!is) throw FormatError("dataset: missing " + (dir / "index.txt").string());
  std::vector<Sample> out;
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Sample s;
    std::string xf, yf, extra;
    if (!(ls >> s.id >> s.split >> xf >> yf) || (ls >> extra))
      throw FormatError("dataset: malformed index line " + std::to_string(lineno));
    if (!ids.insert(s.id).second) throw FormatError("dataset: duplicate sample id " + s.id);
    for (const auto& f : {xf, yf})
      if (!std::filesystem::exists(dir / f)) throw FormatError("dataset: sample " + s.id + ": missing blob " + f);
    try {
      s.x = read_stsr_as<float>(dir / xf);
      s.y = read_stsr_as<float>(dir / yf);
    } catch (const FormatError& e) {
      throw FormatError("dataset: sample " + s.id + ": " + e.what());
    }
    const Shape5 xs = s.x.shape(), ys = s.y.shape();
    if (xs.n != 1 || ys.n != 1 || ys.c != 1 || xs.h % ys.h != 0 || xs.w % ys.w != 0 || xs.h / ys.h != xs.w / ys.w)
      throw FormatError("dataset: sample " + s.id + ": x " + xs.str() + " and y " + ys.str() + " do not match");
    for (float v : s.y.data())
      if (v != 0.0f && v != 1.0f) throw FormatError("dataset: sample " + s.id + ": target is not binary");
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> select_split(const std::vector<Sample>& all, const std::string& split) {
  std::vector<Sample> out;
  for (const auto& s : all)
    if (s.split == split) out.push_back(s);
  return out;
}

}  // namespace stconv

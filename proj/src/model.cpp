#include "stconv/model.hpp"

#include <charconv>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "stconv/config.hpp"

namespace stconv {

const char* arch_name(Arch a) noexcept {
  switch (a) {
    case Arch::SIANet: return "sianet";
    case Arch::UNet3D: return "unet3d";
    case Arch::SingleConv: return "single_conv";
  }
  return "?";
}


void ModelConfig::validate() const {
  auto positive = [](const char* key, std::int64_t v) {
    if (v < 1) throw ConfigError(std::string("config key '") + key + "' must be positive, got " + std::to_string(v));
  };
  positive("in_channels", in_channels);
  positive("t_in", t_in);
  positive("t_out", t_out);
  positive("init_filters", init_filters);
  positive("levels", levels);
  positive("crop_factor", crop_factor);
  if (t_out % t_in != 0)
    throw ConfigError("config key 't_out': " + std::to_string(t_out) + " is not divisible by t_in=" +
                      std::to_string(t_in));
  if (levels > 8) throw ConfigError("config key 'levels': at most 8 levels");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("config key 'dropout': must be in [0, 1)");
  if (str_residual_blocks < 0) throw ConfigError("config key 'str_residual_blocks': must be >= 0");
  if (arch == Arch::SIANet)
    for (std::int64_t l = 0; l < levels; ++l) {
      try {
        lcam(l).validate();
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("config keys 'init_filters'/'lcam_groups'/'lcam_kernels': ") + e.what());
      }
    }
}

LcamConfig ModelConfig::lcam(std::int64_t level) const {
  LcamConfig c;
  c.channels = width(level);
  c.groups = lcam_groups;
  c.kernel_ladder = lcam_kernels;
  c.residual = lcam_residual;
  c.dropout = dropout;
  return c;
}

StrConfig ModelConfig::str() const {
  StrConfig s;
  s.norm = str_norm;
  s.residual_blocks = str_residual_blocks;
  s.dense_attention = str_dense_attention;
  return s;
}

void ModelConfig::check_input(const Shape5& x) const {
  const std::string expected = "(N," + std::to_string(in_channels) + "," + std::to_string(t_in) + ",H,W)";
  if (x.c != in_channels || x.t != t_in)
    throw ShapeError("model input: expected " + expected + ", got " + x.str());
  if (arch == Arch::SingleConv) return;
  const std::int64_t pool = std::int64_t{1} << (levels - 1);
  const std::int64_t need = std::lcm(pool, crop_factor);
  if (x.h % need != 0 || x.w % need != 0)
    throw ShapeError("model input: H and W must be divisible by " + std::to_string(need) + " (2^(levels-1)=" +
                     std::to_string(pool) + ", crop_factor=" + std::to_string(crop_factor) + "), got " + x.str());
}

Shape5 ModelConfig::output_shape(const Shape5& x) const {
  check_input(x);
  return Shape5{x.n, 1, t_out, x.h / crop_factor, x.w / crop_factor};
}

std::vector<std::string> ModelConfig::keys() {
  return {"arch",         "in_channels",   "t_in",          "t_out",   "init_filters",
          "levels",       "crop_factor",   "lcam_groups",   "lcam_kernels", "lcam_residual",
          "dropout",      "str_norm",      "str_residual_blocks", "str_dense_attention"};
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "arch=" << arch_name(arch) << "\n";
  os << "in_channels=" << in_channels << "\n";
  os << "t_in=" << t_in << "\n";
  os << "t_out=" << t_out << "\n";
  os << "init_filters=" << init_filters << "\n";
  os << "levels=" << levels << "\n";
  os << "crop_factor=" << crop_factor << "\n";
  os << "lcam_groups=" << lcam_groups << "\n";
  os << "lcam_kernels=";
  for (std::size_t i = 0; i < lcam_kernels.size(); ++i) os << (i ? "," : "") << lcam_kernels[i];
  os << "\n";
  os << "lcam_residual=" << (lcam_residual ? "true" : "false") << "\n";
  os << "dropout=" << fmt_double(dropout) << "\n";
  os << "str_norm=" << (str_norm == AttentionNorm::SoftmaxTime ? "softmax_time" : "sigmoid") << "\n";
  os << "str_residual_blocks=" << str_residual_blocks << "\n";
  os << "str_dense_attention=" << (str_dense_attention ? "true" : "false") << "\n";
  return os.str();
}

bool ModelConfig::apply(const std::string& key, const std::string& value) {
  if (key == "arch") {
    if (value == "sianet") arch = Arch::SIANet;
    else if (value == "unet3d") arch = Arch::UNet3D;
    else if (value == "single_conv") arch = Arch::SingleConv;
    else bad_value(key, value, "expected sianet, unet3d or single_conv");
  } else if (key == "in_channels") {
    in_channels = parse_int(key, value);
  } else if (key == "t_in") {
    t_in = parse_int(key, value);
  } else if (key == "t_out") {
    t_out = parse_int(key, value);
  } else if (key == "init_filters") {
    init_filters = parse_int(key, value);
  } else if (key == "levels") {
    levels = parse_int(key, value);
  } else if (key == "crop_factor") {
    crop_factor = parse_int(key, value);
  } else if (key == "lcam_groups") {
    lcam_groups = parse_int(key, value);
  } else if (key == "lcam_kernels") {
    lcam_kernels.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) lcam_kernels.push_back(parse_int(key, item));
    if (lcam_kernels.empty()) bad_value(key, value, "expected a comma separated list");
  } else if (key == "lcam_residual") {
    lcam_residual = parse_bool(key, value);
  } else if (key == "dropout") {
    dropout = parse_double(key, value);
  } else if (key == "str_norm") {
    if (value == "softmax_time") str_norm = AttentionNorm::SoftmaxTime;
    else if (value == "sigmoid") str_norm = AttentionNorm::Sigmoid;
    else bad_value(key, value, "expected softmax_time or sigmoid");
  } else if (key == "str_residual_blocks") {
    str_residual_blocks = parse_int(key, value);
  } else if (key == "str_dense_attention") {
    str_dense_attention = parse_bool(key, value);
  } else {
    return false;
  }
  return true;
}

Shape5 nominal_input(const ModelConfig& cfg) {
  std::int64_t need = cfg.crop_factor;
  if (cfg.arch != Arch::SingleConv) need = std::lcm(std::int64_t{1} << (cfg.levels - 1), cfg.crop_factor);
  const std::int64_t hw = ((48 + need - 1) / need) * need;
  return Shape5{1, cfg.in_channels, cfg.t_in, hw, hw};
}

std::vector<ModelLayer> model_layers(const ModelConfig& cfg, const Shape5& input) {
  cfg.validate();
  cfg.check_input(input);
  std::vector<ModelLayer> out;
  const std::int64_t n = input.n, t = input.t;
  auto at_level = [&](std::int64_t c, std::int64_t l) { return Shape5{n, c, t, input.h >> l, input.w >> l}; };
  auto single = [&](const std::string& name, ConvSpec spec, LayerRole role, Shape5 in) {
    out.push_back({ConvLayer{name, spec, true, role}, in, ""});
  };

  if (cfg.arch == Arch::SingleConv) {
    single("conv", ConvSpec::same(cfg.in_channels, cfg.init_filters, {3, 3, 3}), LayerRole::Full, input);
    return out;
  }
  auto block = [&](const std::string& name, std::int64_t l) {
    const auto layers = cfg.arch == Arch::SIANet ? lcam_layers(cfg.lcam(l), name) : double_conv_layers(cfg.width(l), name);
    for (const auto& layer : layers) out.push_back({layer, at_level(layer.spec.c_in, l), name});
  };

  const std::int64_t L = cfg.levels;
  single("stem", ConvSpec::same(cfg.in_channels, cfg.width(0), {1, 1, 1}), LayerRole::Pointwise, input);
  for (std::int64_t l = 0; l + 1 < L; ++l) {
    const std::string p = "enc." + std::to_string(l);
    block(p + ".b0", l);
    block(p + ".b1", l);
    single(p + ".down", ConvSpec::same(cfg.width(l), cfg.width(l + 1), {1, 1, 1}), LayerRole::Pointwise,
           at_level(cfg.width(l), l + 1));
  }
  block("mid.b0", L - 1);
  block("mid.b1", L - 1);
  for (std::int64_t l = L - 2; l >= 0; --l) {
    const std::string p = "dec." + std::to_string(l);
    single(p + ".up", ConvSpec::same(cfg.width(l + 1), cfg.width(l), {1, 1, 1}), LayerRole::Pointwise,
           at_level(cfg.width(l + 1), l));
    single(p + ".fuse", ConvSpec::same(2 * cfg.width(l), cfg.width(l), {1, 1, 1}), LayerRole::Pointwise,
           at_level(2 * cfg.width(l), l));
    block(p + ".b0", l);
    block(p + ".b1", l);
  }
  single("head", ConvSpec::same(cfg.width(0), cfg.head_channels(), {1, 1, 1}), LayerRole::Pointwise,
         at_level(cfg.width(0), 0));
  if (cfg.has_str()) {
    const Shape5 y{n, 1, cfg.t_out, input.h / cfg.crop_factor, input.w / cfg.crop_factor};
    for (const auto& layer : str_layers(cfg.str(), "str")) out.push_back({layer, y, "str"});
  }
  return out;
}

template <typename T>
ParamStore<T> build(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore<T> store;
  Rng rng(seed);
  for (const auto& m : model_layers(cfg, nominal_input(cfg)))
    add_conv_params(store, m.layer.name, m.layer.spec, m.layer.bias, rng);
  if (cfg.has_str()) store.at("str.attn.mix.bias").value.fill(T(1));
  return store;
}

template <typename T>
ModelOutput forward(const Context<T>& ctx, ag::Var x, const ModelConfig& cfg, const ForwardHooks& hooks) {
  cfg.validate();
  if (cfg.arch == Arch::SingleConv) throw ConfigError("arch single_conv is for cost analysis only");
  auto& tape = ctx.tape;
  cfg.check_input(tape.value(x).shape());
  auto pointwise = [&](const std::string& name, ag::Var in, std::int64_t cin, std::int64_t cout) {
    return conv_layer(ctx, name, in, ConvSpec::same(cin, cout, {1, 1, 1}));
  };
  auto block = [&](const std::string& name, ag::Var in, std::int64_t l) {
    if (cfg.arch == Arch::SIANet) return lcam_forward(ctx, name, in, cfg.lcam(l));
    return double_conv_forward(ctx, name, in, cfg.width(l), cfg.dropout);
  };

  const std::int64_t L = cfg.levels;
  ag::Var h = ag::relu(tape, pointwise("stem", x, cfg.in_channels, cfg.width(0)));
  std::vector<ag::Var> skips;
  for (std::int64_t l = 0; l + 1 < L; ++l) {
    const std::string p = "enc." + std::to_string(l);
    h = block(p + ".b1", block(p + ".b0", h, l), l);
    skips.push_back(h);
    h = ag::max_pool_spatial2(tape, h);
    h = ag::relu(tape, pointwise(p + ".down", h, cfg.width(l), cfg.width(l + 1)));
  }
  h = block("mid.b1", block("mid.b0", h, L - 1), L - 1);
  for (std::int64_t l = L - 2; l >= 0; --l) {
    const std::string p = "dec." + std::to_string(l);
    h = ag::upsample_nearest_spatial2(tape, h);
    h = pointwise(p + ".up", h, cfg.width(l + 1), cfg.width(l));
    ag::Var skip = skips[static_cast<std::size_t>(l)];
    if (hooks.zero_skip_level == l) skip = tape.constant(Tensor<T>(tape.value(skip).shape()));
    const ag::Var parts[] = {h, skip};
    h = ag::concat_channels<T>(tape, parts);
    h = ag::relu(tape, pointwise(p + ".fuse", h, 2 * cfg.width(l), cfg.width(l)));
    h = block(p + ".b1", block(p + ".b0", h, l), l);
  }
  h = pointwise("head", h, cfg.width(0), cfg.head_channels());
  h = ag::crop_center_spatial(tape, h, cfg.crop_factor);
  ModelOutput out;
  out.y_early = ag::fold_channels_into_time(tape, h);
  out.y_final = cfg.has_str() ? str_forward(ctx, "str", out.y_early, cfg.str()) : out.y_early;
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> predict(ParamStore<T>& params, const ModelConfig& cfg, const Tensor<T>& x, Mode mode,
                                        std::uint64_t seed, const ForwardHooks& hooks) {
  ag::Tape<T> tape;
  Context<T> ctx{tape, params, mode, seed};
  const auto out = forward(ctx, tape.constant(x), cfg, hooks);
  return {tape.value(out.y_early), tape.value(out.y_final)};
}

namespace {

void fill_totals(const ModelConfig& cfg, const Shape5& input, Count& params, Count& macs) {
  params = 0;
  macs = 0;
  for (const auto& m : model_layers(cfg, input)) {
    params = checked_add(params, param_count(m.layer.spec, m.layer.bias));
    macs = checked_add(macs, conv_macs(m.layer.spec, m.input));
  }
}

}  // namespace

FlopsReport count_model_flops(const ModelConfig& cfg, const Shape5& input) {
  FlopsReport r;
  r.input = input;
  for (const auto& m : model_layers(cfg, input)) {
    FlopsRow row;
    row.name = m.layer.name;
    row.block = m.block;
    row.role = m.layer.role;
    row.spec = m.layer.spec;
    row.input = m.input;
    row.params = param_count(m.layer.spec, m.layer.bias);
    row.macs = conv_macs(m.layer.spec, m.input);
    const Shape5 os = m.layer.spec.output_shape(m.input);
    row.macs_per_frame = row.macs / static_cast<Count>(os.n * os.t);
    const auto& k = m.layer.spec.kernel;
    const Count cin = static_cast<Count>(m.layer.spec.c_in / m.layer.spec.groups);
    row.full_per_frame = flops_full(os.h, os.w, cin, m.layer.spec.c_out, k.t, k.h, k.w);
    row.decomposed_per_frame = flops_decomposed(os.h, os.w, cin, m.layer.spec.c_out, k.t, k.h, k.w);
    r.total_params = checked_add(r.total_params, row.params);
    r.total_macs = checked_add(r.total_macs, row.macs);

    if (cfg.arch == Arch::SIANet && !row.block.empty() && row.block != "str") {
      if (r.stacks.empty() || r.stacks.back().block != row.block) r.stacks.push_back({row.block, 0, 0});
      auto& s = r.stacks.back();
      if (row.role == LayerRole::Spatial || row.role == LayerRole::Branch) {
        s.decomposed_per_frame += row.macs_per_frame;
        s.dense_per_frame += flops_full(os.h, os.w, cin, m.layer.spec.c_out, 3, k.h, k.w);
      } else if (row.role == LayerRole::Temporal) {
        s.decomposed_per_frame += row.macs_per_frame;
      }
    }
    r.rows.push_back(std::move(row));
  }
  ModelConfig dense = cfg;
  if (dense.arch == Arch::SIANet) dense.arch = Arch::UNet3D;
  fill_totals(dense, input, r.dense_params, r.dense_macs);
  return r;
}

Count count_params(const ModelConfig& cfg) {
  Count p = 0;
  for (const auto& m : model_layers(cfg, nominal_input(cfg))) p = checked_add(p, param_count(m.layer.spec, m.layer.bias));
  return p;
}

template ParamStore<float> build<float>(const ModelConfig&, std::uint64_t);
template ParamStore<double> build<double>(const ModelConfig&, std::uint64_t);
template ModelOutput forward(const Context<float>&, ag::Var, const ModelConfig&, const ForwardHooks&);
template ModelOutput forward(const Context<double>&, ag::Var, const ModelConfig&, const ForwardHooks&);
template std::pair<Tensor<float>, Tensor<float>> predict(ParamStore<float>&, const ModelConfig&, const Tensor<float>&,
                                                         Mode, std::uint64_t, const ForwardHooks&);
template std::pair<Tensor<double>, Tensor<double>> predict(ParamStore<double>&, const ModelConfig&,
                                                           const Tensor<double>&, Mode, std::uint64_t,
                                                           const ForwardHooks&);

}  // namespace stconv

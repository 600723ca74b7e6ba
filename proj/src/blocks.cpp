#include "stconv/blocks.hpp"

namespace stconv {

const char* role_name(LayerRole role) noexcept {
  switch (role) {
    case LayerRole::Pointwise: return "pointwise";
    case LayerRole::Spatial: return "spatial";
    case LayerRole::Branch: return "branch";
    case LayerRole::Temporal: return "temporal";
    case LayerRole::Full: return "full";
    case LayerRole::Depthwise: return "depthwise";
  }
  return "?";
}

void LcamConfig::validate() const {
  if (channels < 1) throw ConfigError("lcam: channels must be positive");
  if (groups != 2 && groups != 4) throw ConfigError("lcam: group count must be 2 or 4, got " + std::to_string(groups));
  if (channels % groups != 0)
    throw ConfigError("lcam: " + std::to_string(channels) + " channels cannot be split into " +
                      std::to_string(groups) + " even groups");
  if (static_cast<std::int64_t>(kernel_ladder.size()) < groups) throw ConfigError("lcam: kernel ladder too short");
  for (std::size_t i = 0; i < static_cast<std::size_t>(groups); ++i) {
    if (kernel_ladder[i] < 1 || kernel_ladder[i] % 2 == 0) throw ConfigError("lcam: ladder kernels must be odd");
    if (i > 0 && kernel_ladder[i] <= kernel_ladder[i - 1]) throw ConfigError("lcam: ladder must be strictly increasing");
  }
  if (!dilation.empty() && static_cast<std::int64_t>(dilation.size()) < groups)
    throw ConfigError("lcam: need one dilation per branch");
  for (auto d : dilation)
    if (d < 1) throw ConfigError("lcam: dilation must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("lcam: dropout must be in [0, 1)");
}

std::vector<ConvLayer> lcam_layers(const LcamConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const std::int64_t c = cfg.channels, cg = c / cfg.groups;
  std::vector<ConvLayer> out;
  out.push_back({prefix + ".spatial", ConvSpec::same(c, c, {1, 3, 3}), true, LayerRole::Spatial});
  for (std::int64_t i = 0; i < cfg.groups; ++i) {
    const auto k = cfg.kernel_ladder[static_cast<std::size_t>(i)];
    const auto d = cfg.dilation.empty() ? 1 : cfg.dilation[static_cast<std::size_t>(i)];
    out.push_back({prefix + ".branch." + std::to_string(i), ConvSpec::same(cg, cg, {1, k, k}, {1, d, d}), true,
                   LayerRole::Branch});
  }
  out.push_back({prefix + ".temporal", ConvSpec::same(c, c, {3, 1, 1}), true, LayerRole::Temporal});
  out.push_back({prefix + ".aggregate", ConvSpec::same(c, c, {3, 3, 3}), true, LayerRole::Full});
  return out;
}

template <typename T>
void lcam_build(ParamStore<T>& store, const std::string& prefix, const LcamConfig& cfg, Rng& rng) {
  for (const auto& l : lcam_layers(cfg, prefix)) add_conv_params(store, l.name, l.spec, l.bias, rng);
}

template <typename T>
std::vector<Tensor<T>> channel_split(const Tensor<T>& x, std::int64_t groups) {
  if (groups < 1 || x.shape().c % groups != 0)
    throw ShapeError("channel_split: " + std::to_string(x.shape().c) + " channels into " + std::to_string(groups) +
                     " groups");
  const std::int64_t cg = x.shape().c / groups;
  std::vector<Tensor<T>> out;
  for (std::int64_t g = 0; g < groups; ++g) out.push_back(slice_channels(x, g * cg, cg));
  return out;
}

template <typename T>
std::vector<ag::Var> channel_split(ag::Tape<T>& tape, ag::Var x, std::int64_t groups) {
  const std::int64_t c = tape.value(x).shape().c;
  if (groups < 1 || c % groups != 0)
    throw ShapeError("channel_split: " + std::to_string(c) + " channels into " + std::to_string(groups) + " groups");
  if (groups == 1) return {x};
  const std::int64_t cg = c / groups;
  std::vector<ag::Var> out;
  for (std::int64_t g = 0; g < groups; ++g) out.push_back(ag::slice_channels(tape, x, g * cg, cg));
  return out;
}

template <typename T>
ag::Var lcam_forward(const Context<T>& ctx, const std::string& prefix, ag::Var x, const LcamConfig& cfg) {
  const auto layers = lcam_layers(cfg, prefix);
  if (ctx.tape.value(x).shape().c != cfg.channels)
    throw ShapeError("lcam " + prefix + ": expected " + std::to_string(cfg.channels) + " channels, got " +
                     ctx.tape.value(x).shape().str());
  auto& tape = ctx.tape;
  ag::Var h = ag::relu(tape, conv_layer(ctx, layers[0].name, x, layers[0].spec));
  auto parts = channel_split(tape, h, cfg.groups);
  for (std::size_t i = 0; i < parts.size(); ++i)
    parts[i] = conv_layer(ctx, layers[1 + i].name, parts[i], layers[1 + i].spec);
  h = ag::concat_channels<T>(tape, parts);
  const auto& temporal = layers[layers.size() - 2];
  const auto& aggregate = layers.back();
  h = conv_layer(ctx, temporal.name, h, temporal.spec);
  h = ag::relu(tape, conv_layer(ctx, aggregate.name, h, aggregate.spec));
  h = ag::dropout(tape, h, cfg.dropout, ctx.mode, ctx.seed_for(prefix));
  return cfg.residual ? ag::add(tape, x, h) : h;
}

std::vector<ConvLayer> double_conv_layers(std::int64_t channels, const std::string& prefix) {
  return {{prefix + ".conv0", ConvSpec::same(channels, channels, {3, 3, 3}), true, LayerRole::Full},
          {prefix + ".conv1", ConvSpec::same(channels, channels, {3, 3, 3}), true, LayerRole::Full}};
}

template <typename T>
void double_conv_build(ParamStore<T>& store, const std::string& prefix, std::int64_t channels, Rng& rng) {
  for (const auto& l : double_conv_layers(channels, prefix)) add_conv_params(store, l.name, l.spec, l.bias, rng);
}

template <typename T>
ag::Var double_conv_forward(const Context<T>& ctx, const std::string& prefix, ag::Var x, std::int64_t channels,
                            double dropout) {
  for (const auto& l : double_conv_layers(channels, prefix)) x = ag::relu(ctx.tape, conv_layer(ctx, l.name, x, l.spec));
  return ag::dropout(ctx.tape, x, dropout, ctx.mode, ctx.seed_for(prefix));
}

void StrConfig::validate() const {
  if (channels < 1) throw ConfigError("str: channels must be positive");
  if (residual_blocks < 0) throw ConfigError("str: residual block count must be >= 0");
  if (dense_kernel < 1 || dense_kernel % 2 == 0) throw ConfigError("str: dense kernel must be odd");
}

std::vector<ConvLayer> str_layers(const StrConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const std::int64_t c = cfg.channels;
  std::vector<ConvLayer> out;
  if (cfg.dense_attention) {
    const auto k = cfg.dense_kernel;
    out.push_back({prefix + ".attn.dense", ConvSpec::same(c, c, {k, k, k}, {1, 1, 1}, c), true, LayerRole::Depthwise});
  } else {
    out.push_back({prefix + ".attn.dw", ConvSpec::same(c, c, {3, 3, 3}, {1, 1, 1}, c), true, LayerRole::Depthwise});
    out.push_back({prefix + ".attn.dwd", ConvSpec::same(c, c, {3, 3, 3}, {3, 3, 3}, c), true, LayerRole::Depthwise});
  }
  out.push_back({prefix + ".attn.mix", ConvSpec::same(c, c, {1, 1, 1}), true, LayerRole::Pointwise});
  for (std::int64_t i = 0; i < cfg.residual_blocks; ++i)
    out.push_back({prefix + ".res." + std::to_string(i) + ".conv", ConvSpec::same(c, c, {3, 3, 3}), true,
                   LayerRole::Full});
  return out;
}

template <typename T>
void str_build(ParamStore<T>& store, const std::string& prefix, const StrConfig& cfg, Rng& rng) {
  for (const auto& l : str_layers(cfg, prefix)) add_conv_params(store, l.name, l.spec, l.bias, rng);
  store.at(prefix + ".attn.mix.bias").value.fill(T(1));
}

template <typename T>
ag::Var str_attention(const Context<T>& ctx, const std::string& prefix, ag::Var y_early, const StrConfig& cfg) {
  auto& tape = ctx.tape;
  ag::Var a = cfg.norm == AttentionNorm::SoftmaxTime ? ag::softmax(tape, y_early, Axis::T) : ag::sigmoid(tape, y_early);
  const auto layers = str_layers(cfg, prefix);
  const std::size_t n_attn = cfg.dense_attention ? 2 : 3;
  for (std::size_t i = 0; i < n_attn; ++i) a = conv_layer(ctx, layers[i].name, a, layers[i].spec);
  return a;
}

template <typename T>
ag::Var str_forward(const Context<T>& ctx, const std::string& prefix, ag::Var y_early, const StrConfig& cfg) {
  auto& tape = ctx.tape;
  if (tape.value(y_early).shape().c != cfg.channels)
    throw ShapeError("str: expected " + std::to_string(cfg.channels) + " channel(s), got " +
                     tape.value(y_early).shape().str());
  ag::Var y;
  if (cfg.force_unit_attention) {
    y = y_early;
  } else {
    y = ag::mul(tape, str_attention(ctx, prefix, y_early, cfg), y_early);
  }
  for (const auto& l : str_layers(cfg, prefix))
    if (l.name.find(".res.") != std::string::npos)
      y = residual_block(ctx, l.name.substr(0, l.name.size() - 5), y, l.spec, cfg.linear_residual);
  return y;
}

template <typename T>
ag::Var residual_block(const Context<T>& ctx, const std::string& prefix, ag::Var x, const ConvSpec& spec,
                       bool linear) {
  ag::Var h = conv_layer(ctx, prefix + ".conv", x, spec);
  if (!linear) h = ag::relu(ctx.tape, h);
  return ag::add(ctx.tape, x, h);
}

#define STCONV_INSTANTIATE(T)                                                                                  \
  template void lcam_build(ParamStore<T>&, const std::string&, const LcamConfig&, Rng&);                      \
  template ag::Var lcam_forward(const Context<T>&, const std::string&, ag::Var, const LcamConfig&);            \
  template std::vector<Tensor<T>> channel_split(const Tensor<T>&, std::int64_t);                               \
  template std::vector<ag::Var> channel_split(ag::Tape<T>&, ag::Var, std::int64_t);                            \
  template void double_conv_build(ParamStore<T>&, const std::string&, std::int64_t, Rng&);                     \
  template ag::Var double_conv_forward(const Context<T>&, const std::string&, ag::Var, std::int64_t, double);  \
  template void str_build(ParamStore<T>&, const std::string&, const StrConfig&, Rng&);                        \
  template ag::Var str_attention(const Context<T>&, const std::string&, ag::Var, const StrConfig&);            \
  template ag::Var str_forward(const Context<T>&, const std::string&, ag::Var, const StrConfig&);              \
  template ag::Var residual_block(const Context<T>&, const std::string&, ag::Var, const ConvSpec&, bool);

STCONV_INSTANTIATE(float)
STCONV_INSTANTIATE(double)

}  // namespace stconv

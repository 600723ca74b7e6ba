#include "stconv/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "stconv/checkpoint.hpp"
#include "stconv/config.hpp"

namespace stconv {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("config key 'lr' must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("config key 'weight_decay' must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("config key 'beta1' must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("config key 'beta2' must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("config key 'eps' must be positive");
  if (!(pos_weight > 0)) throw ConfigError("config key 'pos_weight' must be positive");
  if (!(alpha >= 0)) throw ConfigError("config key 'alpha' must be non-negative");
  if (batch < 1) throw ConfigError("config key 'batch' must be positive");
  if (epochs < 1) throw ConfigError("config key 'epochs' must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("config key 'plateau_factor' must be in (0, 1)");
  if (!(threshold >= 0.5 && threshold <= 0.6)) throw ConfigError("config key 'threshold' must be in [0.5, 0.6]");
}

std::vector<std::string> TrainConfig::keys() {
  return {"lr", "weight_decay", "beta1", "beta2", "eps", "pos_weight", "alpha", "batch", "epochs", "plateau_factor",
          "threshold", "seed", "augment"};
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "lr=" << fmt_double(lr) << "\n";
  os << "weight_decay=" << fmt_double(weight_decay) << "\n";
  os << "beta1=" << fmt_double(beta1) << "\n";
  os << "beta2=" << fmt_double(beta2) << "\n";
  os << "eps=" << fmt_double(eps) << "\n";
  os << "pos_weight=" << fmt_double(pos_weight) << "\n";
  os << "alpha=" << fmt_double(alpha) << "\n";
  os << "batch=" << batch << "\n";
  os << "epochs=" << epochs << "\n";
  os << "plateau_factor=" << fmt_double(plateau_factor) << "\n";
  os << "threshold=" << fmt_double(threshold) << "\n";
  os << "seed=" << seed << "\n";
  os << "augment=" << (augment ? "true" : "false") << "\n";
  return os.str();
}

bool TrainConfig::apply(const std::string& key, const std::string& value) {
  if (key == "lr") lr = parse_double(key, value);
  else if (key == "weight_decay") weight_decay = parse_double(key, value);
  else if (key == "beta1") beta1 = parse_double(key, value);
  else if (key == "beta2") beta2 = parse_double(key, value);
  else if (key == "eps") eps = parse_double(key, value);
  else if (key == "pos_weight") pos_weight = parse_double(key, value);
  else if (key == "alpha") alpha = parse_double(key, value);
  else if (key == "batch") batch = parse_int(key, value);
  else if (key == "epochs") epochs = parse_int(key, value);
  else if (key == "plateau_factor") plateau_factor = parse_double(key, value);
  else if (key == "threshold") threshold = parse_double(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "augment") augment = parse_bool(key, value);
  else return false;
  return true;
}

namespace {

// log(1 + exp(x)) without overflow
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

template <typename T>
void check_binary(const Tensor<T>& y) {
  for (std::int64_t i = 0; i < y.numel(); ++i)
    if (y[i] != T(0) && y[i] != T(1))
      throw ConfigError("bce: target element " + std::to_string(i) + " is " + std::to_string(static_cast<double>(y[i])) +
                        ", expected 0 or 1");
}

}  // namespace

template <typename T>
double bce_loss(const Tensor<T>& logits, const Tensor<T>& y, double pos_weight) {
  require_same_shape(logits.shape(), y.shape(), "bce_loss");
  check_binary(y);
  double acc = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const double z = static_cast<double>(logits[i]);
    acc += y[i] == T(1) ? pos_weight * softplus(-z) : softplus(z);
  }
  return acc / static_cast<double>(y.numel());
}

template <typename T>
ag::Var bce_loss(ag::Tape<T>& tape, ag::Var logits, const Tensor<T>& y, double pos_weight) {
  const Tensor<T>& z = tape.value(logits);
  Tensor<T> out(Shape5{});
  out[0] = static_cast<T>(bce_loss(z, y, pos_weight));
  const ag::Var in[] = {logits};
  return tape.record(std::move(out), in,
                     [logits, y, pos_weight](ag::Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       const Tensor<T>& zv = t.value(logits);
                       Tensor<T> dz(zv.shape());
                       const double s = static_cast<double>(g[0]) / static_cast<double>(zv.numel());
                       for (std::int64_t i = 0; i < zv.numel(); ++i) {
                         const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(zv[i])));
                         const double yi = static_cast<double>(y[i]);
                         dz[i] = static_cast<T>(s * (p * (pos_weight * yi + 1.0 - yi) - pos_weight * yi));
                       }
                       t.accumulate(logits, std::move(dz));
                     });
}

template <typename T>
double total_loss(const Tensor<T>& y_final, const Tensor<T>& y_early, const Tensor<T>& y, const TrainConfig& cfg) {
  require_same_shape(y_final.shape(), y_early.shape(), "total_loss");
  return bce_loss(y_final, y, cfg.pos_weight) + cfg.alpha * bce_loss(y_early, y, cfg.pos_weight);
}

template <typename T>
ag::Var total_loss(ag::Tape<T>& tape, ag::Var y_final, ag::Var y_early, const Tensor<T>& y, const TrainConfig& cfg) {
  require_same_shape(tape.value(y_final).shape(), tape.value(y_early).shape(), "total_loss");
  const ag::Var f = bce_loss(tape, y_final, y, cfg.pos_weight);
  const ag::Var e = bce_loss(tape, y_early, y, cfg.pos_weight);
  return ag::add(tape, f, ag::scale(tape, e, static_cast<T>(cfg.alpha)));
}

template <typename T>
void adamw_step(ParamStore<T>& params, AdamState<T>& state, const TrainConfig& cfg, std::int64_t step_index) {
  if (step_index != state.step + 1)
    throw ConfigError("adamw: step index " + std::to_string(step_index) + " does not follow " + std::to_string(state.step));
  if (state.m.empty()) {
    for (const auto& e : params) {
      state.m.emplace_back(e.value.shape());
      state.v.emplace_back(e.value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw: state does not match the parameter store");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  std::size_t k = 0;
  for (auto& e : params) {
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    ++k;
    require_same_shape(m.shape(), e.value.shape(), "adamw");
    for (std::int64_t i = 0; i < e.value.numel(); ++i) {
      const double g = static_cast<double>(e.grad[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double w = static_cast<double>(e.value[i]) * decay;
      e.value[i] = static_cast<T>(w - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
  state.step = step_index;
}

double plateau_schedule(double prev_val_loss, double curr_val_loss, double lr, double factor) {
  return curr_val_loss > prev_val_loss ? lr * factor : lr;
}

MetricsRecord MetricsRecord::from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn) {
  MetricsRecord r{tp, fp, fn, tn};
  auto ratio = [](std::int64_t a, std::int64_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  r.precision = ratio(tp, tp + fp);
  r.recall = ratio(tp, tp + fn);
  r.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  r.iou = ratio(tp, tp + fp + fn);
  if (tp + fp + fn == 0) r.iou = r.f1 = 1.0;
  return r;
}

std::string MetricsRecord::csv_header() { return "tp,fp,fn,tn,precision,recall,f1,iou"; }

std::string MetricsRecord::csv() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld,%lld,%lld,%lld,%.6f,%.6f,%.6f,%.6f", static_cast<long long>(tp),
                static_cast<long long>(fp), static_cast<long long>(fn), static_cast<long long>(tn), precision, recall, f1,
                iou);
  return buf;
}

template <typename T>
MetricsRecord score_masks(const Tensor<T>& pred, const Tensor<T>& truth) {
  require_same_shape(pred.shape(), truth.shape(), "score");
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] > T(0.5), t = truth[i] > T(0.5);
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
    tn += !p && !t;
  }
  return MetricsRecord::from_counts(tp, fp, fn, tn);
}

template <typename T>
MetricsRecord binarize_and_score(const Tensor<T>& logits, const Tensor<T>& truth, double threshold) {
  require_same_shape(logits.shape(), truth.shape(), "binarize_and_score");
  if (!(threshold >= 0 && threshold <= 1)) throw ConfigError("threshold must be in [0, 1]");
  Tensor<T> mask(logits.shape());
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    mask[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i]))) >= threshold ? T(1) : T(0);
  return score_masks(mask, truth);
}

double mean_iou(const std::vector<MetricsRecord>& records) {
  if (records.empty()) return 0.0;
  double s = 0;
  for (const auto& r : records) s += r.iou;
  return s / static_cast<double>(records.size());
}

std::string log_header() { return "epoch,train_loss,val_loss,val_miou,lr"; }

std::string log_line(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.epoch), r.train_loss, r.val_loss,
                r.val_miou, r.lr);
  return buf;
}

template <typename T>
Tensor<T> dihedral(const Tensor<T>& x, int k) {
  const Shape5 s = x.shape();
  const bool transpose = (k & 4) != 0;
  if (transpose && s.h != s.w) throw ShapeError("dihedral: transpose needs a square grid, got " + s.str());
  Tensor<T> out(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t t = 0; t < s.t; ++t)
        for (std::int64_t h = 0; h < s.h; ++h)
          for (std::int64_t w = 0; w < s.w; ++w) {
            std::int64_t sh = (k & 1) ? s.h - 1 - h : h, sw = (k & 2) ? s.w - 1 - w : w;
            if (transpose) std::swap(sh, sw);
            out.at(n, c, t, h, w) = x.at(n, c, t, sh, sw);
          }
  return out;
}

Batch stack_samples(const std::vector<Sample>& samples, std::span<const std::size_t> order) {
  std::vector<Tensor<float>> xs, ys;
  if (order.empty()) {
    for (const auto& s : samples) {
      xs.push_back(s.x);
      ys.push_back(s.y);
    }
  } else {
    for (std::size_t i : order) {
      xs.push_back(samples.at(i).x);
      ys.push_back(samples.at(i).y);
    }
  }
  if (xs.empty()) throw ShapeError("empty batch");
  return {concat_batch<float>(xs), concat_batch<float>(ys)};
}

namespace {

void check_data(const ModelConfig& model, const std::vector<Sample>& data, const char* what) {
  for (const auto& s : data) {
    const Shape5 expect = model.output_shape(s.x.shape());
    if (!(s.y.shape() == expect))
      throw ShapeError(std::string(what) + " sample " + s.id + ": target " + s.y.shape().str() + ", expected " +
                       expect.str());
  }
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

void write_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << log_header() << "\n";
  for (const auto& r : log) os << log_line(r) << "\n";
}

}  // namespace

Evaluation evaluate(ParamStore<float>& params, const ModelConfig& model, const std::vector<Sample>& data,
                    const TrainConfig& cfg) {
  Evaluation ev;
  double loss = 0;
  for (std::size_t b = 0; b < data.size(); b += static_cast<std::size_t>(cfg.batch)) {
    const auto idx = range(b, std::min(data.size(), b + static_cast<std::size_t>(cfg.batch)));
    const Batch batch = stack_samples(data, idx);
    auto [early, fin] = predict(params, model, batch.x);
    loss += total_loss(fin, early, batch.y, cfg) * static_cast<double>(idx.size());
    for (std::int64_t n = 0; n < static_cast<std::int64_t>(idx.size()); ++n)
      ev.records.push_back(binarize_and_score(slice_batch(fin, n, 1), slice_batch(batch.y, n, 1), cfg.threshold));
  }
  ev.loss = data.empty() ? 0.0 : loss / static_cast<double>(data.size());
  ev.miou = mean_iou(ev.records);
  return ev;
}

TrainResult train_loop(const ModelConfig& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                       const TrainConfig& cfg, const TrainOptions& opts) {
  model.validate();
  cfg.validate();
  if (train.empty()) throw ConfigError("train: no training samples");
  if (val.empty()) throw ConfigError("train: no validation samples");
  check_data(model, train, "train");
  check_data(model, val, "val");

  TrainResult res;
  ParamStore<float> params = build<float>(model, cfg.seed);
  AdamState<float> adam;
  TrainConfig run = cfg;
  double prev_val = 0;
  double best_miou = -1;
  std::int64_t step = 0;

  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = range(0, train.size());
    Rng rng(derive_seed(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch)) {
      if (opts.max_steps > 0 && step >= opts.max_steps) break;
      const std::span<const std::size_t> idx(order.data() + b, std::min(order.size() - b, static_cast<std::size_t>(cfg.batch)));
      ++step;
      Batch batch = stack_samples(train, idx);
      if (cfg.augment) {
        // one random symmetry of the square per sample, applied to inputs and targets alike
        Rng arng(derive_seed(cfg.seed, 0xa0a0000000ULL + static_cast<std::uint64_t>(step)));
        const bool square = batch.x.shape().h == batch.x.shape().w;
        std::vector<Tensor<float>> xs, ys;
        for (std::int64_t n = 0; n < batch.x.shape().n; ++n) {
          const int k = static_cast<int>(arng.below(square ? 8 : 4));
          xs.push_back(dihedral(slice_batch(batch.x, n, 1), k));
          ys.push_back(dihedral(slice_batch(batch.y, n, 1), k));
        }
        batch = {concat_batch<float>(xs), concat_batch<float>(ys)};
      }
      params.zero_grad();
      ag::Tape<float> tape;
      Context<float> ctx{tape, params, Mode::Train, derive_seed(cfg.seed, static_cast<std::uint64_t>(step))};
      auto where = [&] { return "epoch " + std::to_string(epoch) + ", step " + std::to_string(step); };
      double l = 0;
      try {
        const ModelOutput out = forward(ctx, tape.constant(batch.x), model);
        const ag::Var loss = total_loss(tape, out.y_final, out.y_early, batch.y, run);
        l = static_cast<double>(tape.value(loss)[0]);
        if (!std::isfinite(l)) {
          const bool early_ok = all_finite(tape.value(out.y_early)), final_ok = all_finite(tape.value(out.y_final));
          throw NonFiniteError(std::string("loss is non-finite (y_early ") + (early_ok ? "finite" : "non-finite") +
                               ", y_final " + (final_ok ? "finite" : "non-finite") + ")");
        }
        tape.backward(loss);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("train: " + where() + ": " + e.what());
      }
      for (const auto& e : params)
        if (!all_finite(e.grad)) throw NonFiniteError("train: non-finite gradient of " + e.name + " at " + where());
      adamw_step(params, adam, run, step);
      for (const auto& e : params)
        if (!all_finite(e.value)) throw NonFiniteError("train: non-finite value of " + e.name + " after " + where());
      loss_sum += l * static_cast<double>(idx.size());
      seen += idx.size();
      res.last_train_loss = l;
    }

    const Evaluation ev = evaluate(params, model, val, run);
    EpochRecord rec{epoch, seen ? loss_sum / static_cast<double>(seen) : 0.0, ev.loss, ev.miou, run.lr};
    res.log.push_back(rec);
    if (ev.miou > best_miou) {
      best_miou = ev.miou;
      res.best = params;
      res.best_epoch = epoch;
      if (!opts.checkpoint.empty()) save_checkpoint(opts.checkpoint, params, model);
    }
    if (!opts.log.empty()) write_log(opts.log, res.log);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (epoch > 1) run.lr = plateau_schedule(prev_val, ev.loss, run.lr, run.plateau_factor);
    prev_val = ev.loss;
    if (opts.max_steps > 0 && step >= opts.max_steps) break;
  }
  res.steps = step;
  res.last = std::move(params);
  return res;
}

template Tensor<float> dihedral(const Tensor<float>&, int);
template Tensor<double> dihedral(const Tensor<double>&, int);
template double bce_loss(const Tensor<float>&, const Tensor<float>&, double);
template double bce_loss(const Tensor<double>&, const Tensor<double>&, double);
template ag::Var bce_loss(ag::Tape<float>&, ag::Var, const Tensor<float>&, double);
template ag::Var bce_loss(ag::Tape<double>&, ag::Var, const Tensor<double>&, double);
template double total_loss(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, const TrainConfig&);
template double total_loss(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, const TrainConfig&);
template ag::Var total_loss(ag::Tape<float>&, ag::Var, ag::Var, const Tensor<float>&, const TrainConfig&);
template ag::Var total_loss(ag::Tape<double>&, ag::Var, ag::Var, const Tensor<double>&, const TrainConfig&);
template void adamw_step(ParamStore<float>&, AdamState<float>&, const TrainConfig&, std::int64_t);
template void adamw_step(ParamStore<double>&, AdamState<double>&, const TrainConfig&, std::int64_t);
template MetricsRecord score_masks(const Tensor<float>&, const Tensor<float>&);
template MetricsRecord score_masks(const Tensor<double>&, const Tensor<double>&);
template MetricsRecord binarize_and_score(const Tensor<float>&, const Tensor<float>&, double);
template MetricsRecord binarize_and_score(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace stconv

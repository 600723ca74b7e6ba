// stconv command-line entry point.
// Exit codes: 0 success, 1 verification failure or non-finite training, 2 usage,
// config, format or shape errors.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "stconv/checkpoint.hpp"
#include "stconv/config.hpp"
#include "stconv/error.hpp"
#include "stconv/data_synth.hpp"
#include "stconv/training.hpp"
#include "stconv/verify.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace stconv;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kFailed = 1, kUsage = 2;

struct UsageError : Error {
  using Error::Error;
};

int resolve_threads(int flag) {
  int n = flag;
  if (n <= 0) {
    if (const char* env = std::getenv("STCONV_THREADS")) {
      try {
        n = static_cast<int>(parse_int("STCONV_THREADS", env));
      } catch (const ConfigError&) {
        throw UsageError(std::string("STCONV_THREADS: expected a positive integer, got '") + env + "'");
      }
      if (n <= 0) throw UsageError("STCONV_THREADS must be positive");
    }
  }
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Model and training keys from a config file; anything else is an error naming the key.
void load_config(const fs::path& path, ModelConfig& model, TrainConfig& train) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  for (const auto& kv : read_key_values(path)) {
    if (model.apply(kv.key, kv.value)) continue;
    if (train.apply(kv.key, kv.value)) continue;
    throw ConfigError("unknown config key '" + kv.key + "' at " + path.string() + ":" + std::to_string(kv.line));
  }
}

void print_block(const std::string& text, const char* prefix = "") {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) std::cout << prefix << line << "\n";
}

std::pair<std::int64_t, std::int64_t> parse_hw(const std::string& key, const std::string& v) {
  const auto comma = v.find(',');
  if (comma == std::string::npos) {
    const auto n = parse_int(key, v);
    return {n, n};
  }
  return {parse_int(key, v.substr(0, comma)), parse_int(key, v.substr(comma + 1))};
}

std::string ratio_text(const ConvSpec& s) {
  const auto k = s.kernel;
  return std::to_string(k.t + k.h * k.w) + "/" + std::to_string(k.t * k.h * k.w);
}

std::string kernel_text(const Extent3& k) {
  return std::to_string(k.t) + "x" + std::to_string(k.h) + "x" + std::to_string(k.w);
}

// Inputs or targets of every sample in a dataset directory (optionally one split), or a single STSR file.
Tensor<float> load_tensor(const fs::path& path, const std::string& split, bool targets) {
  if (!fs::exists(path)) throw UsageError("not found: " + path.string());
  if (!fs::is_directory(path)) return read_stsr_as<float>(path);
  auto samples = read_dataset(path);
  if (!split.empty()) samples = select_split(samples, split);
  if (samples.empty()) throw UsageError("no samples" + (split.empty() ? std::string() : " in split '" + split + "'") + " under " + path.string());
  const Batch b = stack_samples(samples);
  return targets ? b.y : b.x;
}

int cmd_analyze(const fs::path& config, const std::string& input_hw, int threads) {
  ModelConfig model;
  TrainConfig unused;  // config files may carry training keys too
  load_config(config, model, unused);
  model.validate();
  Shape5 in = nominal_input(model);
  if (!input_hw.empty()) {
    const auto [h, w] = parse_hw("input-hw", input_hw);
    in.h = h;
    in.w = w;
  }
  std::cout << "command=analyze\nconfig=" << config.string() << "\nthreads=" << threads << "\ninput=" << in.str() << "\n";
  print_block(model.to_text());
  std::cout << "\n";
  const FlopsReport r = count_model_flops(model, in);
  std::cout << "layer,block,role,kernel,dilation,groups,c_in,c_out,input,params,macs,macs_per_frame,full_per_frame,"
               "decomposed_per_frame,ratio\n";
  for (const auto& row : r.rows)
    std::cout << row.name << "," << (row.block.empty() ? "-" : row.block) << "," << role_name(row.role) << ","
              << kernel_text(row.spec.kernel) << "," << kernel_text(row.spec.dilation) << "," << row.spec.groups << ","
              << row.spec.c_in << "," << row.spec.c_out << "," << row.input.str() << "," << row.params << "," << row.macs << ","
              << row.macs_per_frame << "," << row.full_per_frame << "," << row.decomposed_per_frame << "," << ratio_text(row.spec)
              << "\n";
  if (!r.stacks.empty()) {
    std::cout << "\nblock,decomposed_per_frame,dense_per_frame,ratio\n";
    for (const auto& s : r.stacks) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", static_cast<double>(s.decomposed_per_frame) / static_cast<double>(s.dense_per_frame));
      std::cout << s.block << "," << s.decomposed_per_frame << "," << s.dense_per_frame << "," << buf << "\n";
    }
  }
  char pr[32], mr[32];
  std::snprintf(pr, sizeof pr, "%.4f", static_cast<double>(r.total_params) / static_cast<double>(r.dense_params));
  std::snprintf(mr, sizeof mr, "%.4f", static_cast<double>(r.total_macs) / static_cast<double>(r.dense_macs));
  std::cout << "\ntotal_params=" << r.total_params << "\ntotal_macs=" << r.total_macs << "\ndense_params=" << r.dense_params
            << "\ndense_macs=" << r.dense_macs << "\nparams_vs_dense=" << pr << "\nmacs_vs_dense=" << mr << "\n";
  return kOk;
}

int cmd_gen_data(const fs::path& out, std::int64_t count, std::int64_t val, std::int64_t test, std::uint64_t seed,
                 const std::string& grid, int threads) {
  SamplerConfig cfg;
  const auto [h, w] = parse_hw("grid", grid);
  cfg.h = h;
  cfg.w = w;
  cfg.validate();
  if (count < 1 || val < 0 || test < 0) throw UsageError("gen-data: --count must be positive, --val and --test non-negative");
  std::cout << "command=gen-data\nout=" << out.string() << "\ncount=" << count << "\nval=" << val << "\ntest=" << test
            << "\nseed=" << seed << "\ngrid=" << h << "," << w << "\nthreads=" << threads << "\n\n";
  std::vector<Sample> all;
  std::vector<SceneSpec> scenes;
  auto add = [&](std::int64_t n, std::uint64_t first, const char* split) {
    if (n == 0) return;
    auto d = generate(cfg, seed, n, first, split);
    all.insert(all.end(), d.samples.begin(), d.samples.end());
    scenes.insert(scenes.end(), d.scenes.begin(), d.scenes.end());
  };
  add(count, 0, "train");
  add(val, static_cast<std::uint64_t>(count), "val");
  add(test, static_cast<std::uint64_t>(count + val), "test");
  write_dataset(out, all);

  double rain = 0;
  std::vector<MetricsRecord> persistence;
  for (std::size_t i = 0; i < all.size(); ++i) {
    rain += sum(all[i].y) / static_cast<double>(all[i].y.numel());
    persistence.push_back(score_masks(persistence_forecast(scenes[i]), all[i].y));
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "samples=%zu\nrain_fraction=%.4f\npersistence_miou=%.4f\n", all.size(),
                rain / static_cast<double>(all.size()), mean_iou(persistence));
  std::cout << buf;
  return kOk;
}

int cmd_train(const std::string& config, const fs::path& data, const fs::path& out, CLI::App& sub, int threads) {
  ModelConfig model;
  TrainConfig tc;
  if (!config.empty()) load_config(config, model, tc);
  if (sub.count("--epochs")) tc.epochs = sub.get_option("--epochs")->as<std::int64_t>();
  if (sub.count("--seed")) tc.seed = sub.get_option("--seed")->as<std::uint64_t>();
  if (sub.count("--lr")) tc.lr = sub.get_option("--lr")->as<double>();
  if (sub.count("--batch")) tc.batch = sub.get_option("--batch")->as<std::int64_t>();
  model.validate();
  tc.validate();
  std::cout << "command=train\nconfig=" << (config.empty() ? "-" : config) << "\ndata=" << data.string()
            << "\nout=" << out.string() << "\nthreads=" << threads << "\n";
  print_block(model.to_text());
  print_block(tc.to_text());
  std::cout << "\n";
  if (!fs::is_directory(data)) throw UsageError("data directory not found: " + data.string());
  const auto all = read_dataset(data);
  const auto train = select_split(all, "train"), val = select_split(all, "val");
  std::cout << "train_samples=" << train.size() << "\nval_samples=" << val.size() << "\nparams=" << count_params(model) << "\n\n";
  fs::create_directories(out);
  {
    std::ofstream os(out / "resolved.cfg", std::ios::trunc);
    os << model.to_text() << tc.to_text();
  }
  TrainOptions opts;
  opts.checkpoint = out / "best.star";
  opts.log = out / "train_log.csv";
  std::cout << log_header() << "\n";
  opts.on_epoch = [](const EpochRecord& r) { std::cout << log_line(r) << std::endl; };
  const TrainResult res = train_loop(model, train, val, tc, opts);
  std::cout << "\nbest_epoch=" << res.best_epoch << "\ncheckpoint=" << opts.checkpoint.string() << "\nlog=" << opts.log.string()
            << "\n";
  return kOk;
}

int cmd_predict(const fs::path& ckpt, const fs::path& input, const fs::path& output, const std::string& split,
                const std::string& head, int threads) {
  if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt.string());
  if (head != "final" && head != "early") throw UsageError("--head must be 'final' or 'early'");
  auto ck = load_checkpoint(ckpt);
  std::cout << "command=predict\nckpt=" << ckpt.string() << "\ninput=" << input.string() << "\nsplit=" << (split.empty() ? "-" : split)
            << "\noutput=" << output.string() << "\nhead=" << head << "\nthreads=" << threads << "\n";
  print_block(ck.config.to_text());
  const Tensor<float> x = load_tensor(input, split, false);
  ck.config.check_input(x.shape());
  // one sample at a time keeps memory flat
  std::vector<Tensor<float>> outs;
  for (std::int64_t n = 0; n < x.shape().n; ++n) {
    auto [early, fin] = predict(ck.params, ck.config, slice_batch(x, n, 1));
    outs.push_back(head == "final" ? fin : early);
  }
  const Tensor<float> y = concat_batch<float>(outs);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_stsr(output, y);
  std::cout << "\noutput_shape=" << y.shape().str() << "\n";
  return kOk;
}

int cmd_eval(const fs::path& pred_path, const fs::path& truth_path, const std::string& split, double threshold, int threads) {
  if (!(threshold >= 0 && threshold <= 1)) throw UsageError("--threshold must be in [0, 1]");
  const Tensor<float> pred = load_tensor(pred_path, split, true);
  const Tensor<float> truth = load_tensor(truth_path, split, true);
  bool masks = true;
  for (float v : pred.data())
    if (v != 0.0f && v != 1.0f) {
      masks = false;
      break;
    }
  std::cout << "command=eval\npred=" << pred_path.string() << "\ntruth=" << truth_path.string()
            << "\nsplit=" << (split.empty() ? "-" : split) << "\nthreshold=" << fmt_double(threshold)
            << "\npred_kind=" << (masks ? "mask" : "logits") << "\nthreads=" << threads << "\n\n";
  if (!(pred.shape() == truth.shape()))
    throw ShapeError("eval: prediction " + pred.shape().str() + " does not match truth " + truth.shape().str());
  std::vector<MetricsRecord> per_sample;
  for (std::int64_t n = 0; n < pred.shape().n; ++n) {
    const auto p = slice_batch(pred, n, 1), t = slice_batch(truth, n, 1);
    per_sample.push_back(masks ? score_masks(p, t) : binarize_and_score(p, t, threshold));
  }
  const MetricsRecord all = masks ? score_masks(pred, truth) : binarize_and_score(pred, truth, threshold);
  char buf[64];
  std::snprintf(buf, sizeof buf, ",%.6f,%lld", mean_iou(per_sample), static_cast<long long>(pred.shape().n));
  std::cout << MetricsRecord::csv_header() << ",miou,samples\n" << all.csv() << buf << "\n";
  return kOk;
}

int report(const std::vector<CheckResult>& results) {
  for (const auto& r : results) std::cout << format_check(r) << "\n";
  const bool ok = all_passed(results);
  std::size_t failed = 0;
  for (const auto& r : results) failed += !r.passed;
  std::cout << "\n" << (ok ? "all checks passed" : std::to_string(failed) + " check(s) failed") << "\n";
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stconv: decomposed spatiotemporal convolution nowcasting toolkit"};
  app.require_subcommand(1);
  int threads_flag = 0;
  app.add_option("--threads", threads_flag, "Cap on worker threads (default: STCONV_THREADS or all cores)")->check(CLI::PositiveNumber);

  auto* analyze = app.add_subcommand("analyze", "Per-layer parameter and MAC report");
  std::string an_config, an_hw;
  analyze->add_option("--config", an_config, "key=value model config")->required();
  analyze->add_option("--input-hw", an_hw, "Input H,W (default: 48x48 rounded up to a legal size)");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out, gen_grid = "48,48";
  std::int64_t gen_count = 500, gen_val = 100, gen_test = 0;
  std::uint64_t gen_seed = 42;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Training samples")->capture_default_str();
  gen->add_option("--val", gen_val, "Validation samples")->capture_default_str();
  gen->add_option("--test", gen_test, "Test samples")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--grid", gen_grid, "Grid H,W")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train and write best.star + train_log.csv");
  std::string tr_config, tr_data, tr_out;
  std::int64_t tr_epochs = 0, tr_batch = 0;
  std::uint64_t tr_seed = 0;
  double tr_lr = 0;
  train->add_option("--config", tr_config, "key=value model/training config");
  train->add_option("--data", tr_data, "Dataset directory")->required();
  train->add_option("--out", tr_out, "Output directory")->required();
  train->add_option("--epochs", tr_epochs, "Epochs (overrides config)");
  train->add_option("--seed", tr_seed, "Seed (overrides config)");
  train->add_option("--lr", tr_lr, "Learning rate (overrides config)");
  train->add_option("--batch", tr_batch, "Batch size (overrides config)");

  auto* pred = app.add_subcommand("predict", "Write logits for inputs as STSR");
  std::string pr_ckpt, pr_input, pr_output, pr_split, pr_head = "final";
  pred->add_option("--ckpt", pr_ckpt, "Checkpoint")->required();
  pred->add_option("--input", pr_input, "STSR input tensor or dataset directory")->required();
  pred->add_option("--output", pr_output, "Output STSR")->required();
  pred->add_option("--split", pr_split, "Split to use when --input is a dataset");
  pred->add_option("--head", pr_head, "final or early")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Score predictions against truth");
  std::string ev_pred, ev_truth, ev_split;
  double ev_threshold = 0.5;
  eval->add_option("--pred", ev_pred, "STSR logits or binary masks")->required();
  eval->add_option("--truth", ev_truth, "STSR targets or dataset directory")->required();
  eval->add_option("--split", ev_split, "Split to use when --truth is a dataset");
  eval->add_option("--threshold", ev_threshold, "Probability threshold for logits")->capture_default_str();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  std::uint64_t gc_seed = 7;
  bool gc_corrupt = false;
  grad->add_option("--seed", gc_seed, "Seed")->capture_default_str();
  grad->add_flag("--corrupt-backward", gc_corrupt, "Deliberately break the conv weight gradient (harness check)");

  auto* self = app.add_subcommand("selftest", "Gradient suite plus closed-form and oracle checks");
  std::uint64_t st_seed = 7;
  self->add_option("--seed", st_seed, "Seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const int threads = resolve_threads(threads_flag);
    if (*analyze) return cmd_analyze(an_config, an_hw, threads);
    if (*gen) return cmd_gen_data(gen_out, gen_count, gen_val, gen_test, gen_seed, gen_grid, threads);
    if (*train) return cmd_train(tr_config, tr_data, tr_out, *train, threads);
    if (*pred) return cmd_predict(pr_ckpt, pr_input, pr_output, pr_split, pr_head, threads);
    if (*eval) return cmd_eval(ev_pred, ev_truth, ev_split, ev_threshold, threads);
    if (*grad) {
      std::cout << "command=gradcheck\nseed=" << gc_seed << "\ncorrupt_backward=" << (gc_corrupt ? "true" : "false")
                << "\nthreads=" << threads << "\n\n";
      testing::set_corrupt_conv_backward(gc_corrupt);
      return report(gradient_suite(gc_seed));
    }
    if (*self) {
      std::cout << "command=selftest\nseed=" << st_seed << "\nthreads=" << threads << "\n\n";
      return report(selftest(st_seed));
    }
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}

// crnet: dataset generation, training, evaluation, inference, ablation runs and
// parameter counting from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "crnet/config.hpp"
#include "crnet/error.hpp"
#include "crnet/io.hpp"
#include "crnet/model.hpp"
#include "crnet/ops.hpp"
#include "crnet/synth.hpp"
#include "crnet/train.hpp"

namespace fs = std::filesystem;
using namespace crnet;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct ConfigArgs {
  std::string preset;
  std::string file;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args, const std::string& default_preset) {
  args.preset = default_preset;
  cmd->add_option("--preset", args.preset, "starting values: default|desk")->capture_default_str();
  cmd->add_option("--config", args.file, "file of `key = value` lines applied after the preset");
  cmd->add_option("--set", args.sets, "key=value override, applied last; repeatable");
}

// preset, then the config file (or `fallback` when none is given and it
// exists), then --set overrides.
RunConfig resolve(const ConfigArgs& args, const fs::path& fallback = {}) {
  RunConfig cfg = preset(args.preset);
  if (!args.file.empty()) {
    apply_config_file(cfg, args.file);
  } else if (!fallback.empty() && fs::exists(fallback)) {
    apply_config_file(cfg, fallback);
  }
  for (const auto& s : args.sets) apply_override(cfg, s);
  cfg.validate();
  return cfg;
}

bool non_empty_dir(const fs::path& dir) { return fs::exists(dir) && !fs::is_empty(dir); }

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

int cmd_gen(const ConfigArgs& ca, const std::string& out, std::int64_t count, std::uint64_t seed, bool force) {
  const RunConfig cfg = resolve(ca);
  if (count < 1) throw ConfigError("--count must be >= 1");
  if (non_empty_dir(out)) {
    if (!force) throw ConfigError("output directory " + out + " is not empty; pass --force to replace it");
    fs::remove_all(out);
  }
  const auto samples = generate_dataset(count, seed, cfg.scene, cfg.degrade);
  write_dataset(samples, out);
  for (const auto& s : samples) {
    double lo = 1e300, hi = -1e300;
    for (double v : s.gt.to_vector()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::int64_t clipped = 0;
    for (double v : s.stack.frames[kFrames - 1].to_vector()) clipped += v >= 1.0;
    std::cout << s.id << " " << s.gt.dim(1) << "x" << s.gt.dim(2) << " gt_min=" << fixed(lo, 5)
              << " gt_max=" << fixed(hi, 5) << " saturated_long=" << clipped << "\n";
  }
  std::cout << "wrote " << count << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const ConfigArgs& ca, const std::string& data_dir, const std::string& out, bool force, bool resume,
              int log_every) {
  const fs::path out_dir(out);
  const RunConfig cfg = resolve(ca, resume ? out_dir / "config.txt" : fs::path());
  TrainOptions opts;
  opts.out_dir = out_dir;
  opts.init_seed = cfg.init_seed;
  if (resume) {
    opts.resume = load_checkpoint(out_dir / "checkpoint.crt1a");
  } else if (non_empty_dir(out_dir)) {
    if (!force) throw ConfigError("output directory " + out + " is not empty; pass --force or --resume");
    fs::remove_all(out_dir);
  }
  const auto samples = read_dataset(data_dir);
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "config.txt", to_config_text(cfg));
  const std::int64_t total = total_steps(samples.size(), cfg.train);
  opts.on_step = [&](const LossRecord& r) {
    if ((r.step + 1) % log_every == 0 || r.step + 1 == total) {
      std::cout << "step " << r.step + 1 << "/" << total << " epoch " << r.epoch << " lr " << r.lr << " loss "
                << fixed(r.loss, 6) << std::endl;
    }
  };
  const auto result = train(samples, cfg.model, cfg.train, opts);
  std::cout << "trained " << result.history.size() << " steps; checkpoint " << (out_dir / "checkpoint.crt1a").string()
            << "\n";
  return 0;
}

ParamStore checked_params(const fs::path& ckpt, const CRNetConfig& model) {
  ParamStore params = load_params(ckpt);
  params.validate(model_layout(model));
  return params;
}

int cmd_eval(const ConfigArgs& ca, const std::string& data_dir, const std::string& ckpt) {
  const RunConfig cfg = resolve(ca, fs::path(ckpt).parent_path() / "config.txt");
  const ParamStore params = checked_params(ckpt, cfg.model);
  const auto result = evaluate(read_dataset(data_dir), params, cfg.model);
  std::cout << MetricReport::csv_header() << "\n";
  for (const auto& [id, report] : result.per_sample) std::cout << report.csv_row(id) << "\n";
  std::cout << result.mean.csv_row("mean") << "\n";
  return 0;
}

int cmd_infer(const ConfigArgs& ca, const std::string& stack_path, const std::string& ckpt, const std::string& out) {
  const RunConfig cfg = resolve(ca, fs::path(ckpt).parent_path() / "config.txt");
  const ParamStore params = checked_params(ckpt, cfg.model);
  const ExposureStack stack = read_stack(stack_path);
  Tensor pred;
  {
    NoGradGuard no_grad;
    pred = forward(stack, params, cfg.model);
  }
  const fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  save_tensor(out_path, pred);
  std::cout << "wrote " << out_path.string() << "\n";
  const std::int64_t h = pred.dim(1), w = pred.dim(2);
  for (std::int64_t c = 0; c < pred.dim(0); ++c) {
    const fs::path pfm = out_path.parent_path() / (out_path.stem().string() + "_c" + std::to_string(c) + ".pfm");
    write_pfm(pfm, reshape(narrow(pred, 0, c, 1), {h, w}));
    std::cout << "wrote " << pfm.string() << "\n";
  }
  return 0;
}

int cmd_ablate(const ConfigArgs& ca, const std::string& variant, const std::string& data_dir, std::int64_t steps,
               std::int64_t count, std::uint64_t seed) {
  RunConfig cfg = resolve(ca);
  if (steps < 1) throw ConfigError("--steps must be >= 1");
  const auto samples =
      data_dir.empty() ? generate_dataset(count, seed, cfg.scene, cfg.degrade) : read_dataset(data_dir);
  std::vector<std::string> names;
  if (variant == "all") {
    names = ablation_variants();
  } else {
    names = {variant};
  }
  std::cout << "variant,params,first_loss,last_loss,psnr_mu,ssim_mu\n";
  for (const auto& name : names) {
    const AblationModel model = build_ablation_variant(name, cfg.model, cfg.init_seed);
    TrainConfig tc = cfg.train;
    tc.max_steps = steps;
    TrainOptions opts;
    opts.resume = Checkpoint{model.params, OptimState::zeros_like(model.params), {}};
    const auto result = train(samples, model.cfg, tc, opts);
    const auto ev = evaluate(samples, result.params, model.cfg);
    std::cout << name << "," << count_params(model.cfg) << "," << fixed(result.history.front().loss, 6) << ","
              << fixed(result.history.back().loss, 6) << "," << fixed(ev.mean.psnr_mu, 3) << ","
              << fixed(ev.mean.ssim_mu, 4) << std::endl;
  }
  return 0;
}

int cmd_params(const ConfigArgs& ca) {
  const RunConfig cfg = resolve(ca);
  const ParamLayout layout = model_layout(cfg.model);
  std::cout << "total " << layout.count() << "\n";
  std::vector<std::string> modules;
  for (const auto& s : layout.specs()) {
    const std::string top = s.path.substr(0, s.path.find('.'));
    if (std::find(modules.begin(), modules.end(), top) == modules.end()) modules.push_back(top);
  }
  for (const auto& m : modules) std::cout << "  " << m << " " << layout.count(m) << "\n";
  return 0;
}

void apply_thread_cap() {
#ifdef _OPENMP
  if (const char* env = std::getenv("CRNET_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) omp_set_num_threads(n);
  }
#endif
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();
  CLI::App app{"CRNet multi-exposure HDR restoration engine"};
  app.require_subcommand(1);
  app.footer("Config keys, with defaults (set via --config or --set):\n" + describe_config_keys());

  ConfigArgs gen_cfg, train_cfg, eval_cfg, infer_cfg, ablate_cfg, params_cfg;
  std::string gen_out, data_dir, out_dir, ckpt, stack_path, infer_out, variant = "all";
  std::int64_t count = 0, steps = 20, ablate_count = 4;
  std::uint64_t seed = 0, ablate_seed = 0;
  bool force = false, resume = false;
  int log_every = 10;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--count", count, "number of samples")->required();
  gen->add_option("--seed", seed, "dataset seed")->capture_default_str();
  gen->add_flag("--force", force, "replace a non-empty output directory");
  add_config_options(gen, gen_cfg, "default");

  auto* tr = app.add_subcommand("train", "train on a dataset; writes checkpoint.crt1a, loss.csv, config.txt");
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--out", out_dir, "run directory")->required();
  tr->add_flag("--force", force, "replace a non-empty run directory");
  tr->add_flag("--resume", resume, "continue from the run directory's checkpoint and config.txt");
  tr->add_option("--log-every", log_every, "steps between progress lines")->capture_default_str()->check(
      CLI::PositiveNumber);
  add_config_options(tr, train_cfg, "default");

  auto* ev = app.add_subcommand("eval", "print per-sample metrics as CSV");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--ckpt", ckpt, "checkpoint or parameter archive")->required();
  add_config_options(ev, eval_cfg, "default");
  ev->footer("Without --config, config.txt next to the checkpoint is used when present.");

  auto* inf = app.add_subcommand("infer", "predict one stack; writes CRT1 plus one PFM per channel");
  inf->add_option("--stack", stack_path, "sample archive holding frame0..frame4 and exposure_times")->required();
  inf->add_option("--ckpt", ckpt, "checkpoint or parameter archive")->required();
  inf->add_option("--out", infer_out, "output CRT1 path")->required();
  add_config_options(inf, infer_cfg, "default");
  inf->footer("Without --config, config.txt next to the checkpoint is used when present.");

  auto* ab = app.add_subcommand("ablate", "train and evaluate ablation variants briefly");
  std::string variant_help = "variant name or 'all':";
  for (const auto& v : ablation_variants()) variant_help += " " + v;
  ab->add_option("--variant", variant, variant_help)->capture_default_str();
  ab->add_option("--data", data_dir, "dataset directory (default: generate one from data.* keys)");
  ab->add_option("--steps", steps, "training steps per variant")->capture_default_str();
  ab->add_option("--count", ablate_count, "generated samples when --data is absent")->capture_default_str();
  ab->add_option("--seed", ablate_seed, "generated dataset seed")->capture_default_str();
  add_config_options(ab, ablate_cfg, "desk");

  auto* pc = app.add_subcommand("params", "print the parameter count and a per-module breakdown");
  add_config_options(pc, params_cfg, "default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_cfg, gen_out, count, seed, force);
    if (*tr) return cmd_train(train_cfg, data_dir, out_dir, force, resume, log_every);
    if (*ev) return cmd_eval(eval_cfg, data_dir, ckpt);
    if (*inf) return cmd_infer(infer_cfg, stack_path, ckpt, infer_out);
    if (*ab) return cmd_ablate(ablate_cfg, variant, data_dir, steps, ablate_count, ablate_seed);
    if (*pc) return cmd_params(params_cfg);
  } catch (const ConfigError& e) {
    std::cerr << "error[" << e.kind() << "]: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "error[" << e.kind() << "]: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error[" << e.kind() << "]: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error[io]: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

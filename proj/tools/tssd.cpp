// tssd: batch command-line front end.
//
//   tssd train [--config FILE] [flags]     train a network, write metrics and checkpoints
//   tssd eval --checkpoint PREFIX [--ts N] print accuracy=<float> on the test split
//   tssd tools gradcheck|integrate|sfr|risk|early-exit|synth ...
//
// Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tssd/tssd.hpp"

namespace fs = std::filesystem;
using namespace tssd;

namespace {

constexpr int kUsageError = 2;
constexpr int kNumericError = 3;

// Flag -> config key. Every flag is a plain override of the key.
struct FlagKey {
  const char* flag;
  const char* key;
  const char* help;
};

constexpr FlagKey kRunFlags[] = {
    {"--alpha", "distill.alpha", "weight of the temporal (TSD) loss"},
    {"--beta", "distill.beta", "weight of the spatial (SSD) loss"},
    {"--ts", "distill.ts", "student timesteps T_s (also used for evaluation)"},
    {"--tt", "distill.tt", "teacher timesteps T_t"},
    {"--epochs", "train.epochs", "training epochs"},
    {"--batch-size", "train.batch_size", "minibatch size"},
    {"--lr", "train.lr", "initial learning rate"},
    {"--momentum", "train.momentum", "SGD momentum"},
    {"--weight-decay", "train.weight_decay", "L2 weight decay"},
    {"--lr-step", "train.lr_step", "epochs between learning-rate decays"},
    {"--lr-gamma", "train.lr_gamma", "learning-rate decay factor"},
    {"--seed", "train.seed", "seed for initialization and shuffling"},
    {"--augment", "train.augment", "flip/crop static training images (true/false)"},
    {"--stages", "model.stages", "stage layout, e.g. [64],[128],[128,pool],[256,pool]"},
    {"--attach-stage", "model.attach_stage", "stage feeding the weak classifier"},
    {"--weak-channels", "model.weak_channels", "weak classifier conv width (0: tapped width)"},
    {"--tau", "lif.tau", "membrane time constant"},
    {"--threshold", "lif.threshold", "firing threshold"},
    {"--surrogate-width", "lif.surrogate_width", "rectangular surrogate width"},
    {"--data", "data.kind", "bars | moving_bars | idx | evst"},
    {"--train-images", "data.train_images", "IDX training images"},
    {"--train-labels", "data.train_labels", "IDX training labels"},
    {"--test-images", "data.test_images", "IDX test images"},
    {"--test-labels", "data.test_labels", "IDX test labels"},
    {"--train-events", "data.train_events", "EVST training recordings"},
    {"--test-events", "data.test_events", "EVST test recordings"},
    {"--window-ms", "data.window_ms", "event integration window"},
    {"--size", "data.size", "frame or image side"},
    {"--frames", "data.frames", "frames per event sample (0: T_t)"},
    {"--n-train", "data.n_train", "synthetic training samples"},
    {"--n-test", "data.n_test", "synthetic test samples"},
    {"--classes", "data.classes", "synthetic classes"},
    {"--noise", "data.noise", "synthetic noise level"},
    {"--background", "data.background", "moving-bar background event rate"},
    {"--jitter", "data.jitter", "moving-bar start jitter"},
    {"--data-seed", "data.seed", "seed for synthetic data and splits"},
    {"--out", "run.output_dir", "output directory"},
    {"--precision", "run.precision", "float | double"},
};

// Collects the flag values given on the command line.
struct RunOptions {
  std::string config;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  // `skip` names flags the subcommand defines differently.
  void attach(CLI::App& app, std::initializer_list<std::string> skip = {}) {
    app.add_option("--config", config, "key=value config file");
    app.add_option("--set", sets, "extra key=value override (repeatable)");
    for (const FlagKey& f : kRunFlags) {
      if (std::find(skip.begin(), skip.end(), f.flag) != skip.end()) continue;
      options[f.key] = app.add_option(f.flag, values[f.key], f.help);
    }
  }

  // file < --set < dedicated flags
  RunConfig resolve() const {
    KeyValues kv;
    if (!config.empty()) {
      if (!fs::exists(config)) throw ConfigError("config file '" + config + "' does not exist");
      kv = KeyValues::load(config);
    }
    for (const std::string& s : sets) kv.merge(KeyValues::parse(s, "--set"));
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) kv.set(key, values.at(key));
    }
    RunConfig cfg = RunConfig::from_kv(kv);
    cfg.validate();
    return cfg;
  }
};

// The data decides the network's input geometry and class count.
template <class Real>
void fit_geometry(RunConfig& cfg, const Dataset<Real>& train) {
  const Shape s = train.sample_shape();
  const std::size_t c = s[s.size() - 3];
  cfg.model.input_channels = c;
  cfg.model.input_height = s[s.size() - 2];
  cfg.model.input_width = s[s.size() - 1];
  cfg.model.num_classes = train.num_classes;
  cfg.model.validate();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// train

template <class Real>
int train(RunConfig cfg) {
  auto data = load_datasets<Real>(cfg.data, cfg.distill.teacher_steps);
  fit_geometry(cfg, data.train);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  cfg.to_kv().save(dir / "resolved.cfg");

  auto net = build_network<Real>(cfg.model, cfg.lif, cfg.train.seed);
  std::cout << "train: " << data.train.size() << " samples, test " << data.test.size() << ", "
            << net.params().parameter_count() << " parameters, T_s=" << cfg.distill.student_steps
            << " T_t=" << cfg.distill.teacher_steps << "\n";
  FitOutputs out;
  out.dir = dir;
  out.on_row = [](const MetricsRow& r) {
    if (r.split != "test") return;
    std::cout << "epoch " << r.epoch << " accuracy=" << fmt(r.accuracy)
              << " weak_accuracy=" << fmt(r.weak_accuracy) << " loss=" << fmt(r.task_loss) << "\n";
  };
  const FitResult res = fit(net, data.train, data.test, cfg.distill, cfg.train, out);
  std::cout << "best accuracy=" << fmt(res.best_accuracy) << " (epoch " << res.best_epoch << ")\n";
  std::cout << "accuracy=" << fmt(res.final_accuracy) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Loading a trained run for eval and the analysis tools

// Config next to the checkpoint unless given; flags override as in train.
RunConfig run_config_for(const fs::path& checkpoint, const RunOptions& opts) {
  RunOptions o = opts;
  if (o.config.empty()) {
    const fs::path guess = checkpoint.parent_path() / "resolved.cfg";
    if (!fs::exists(guess)) {
      throw ConfigError("no --config given and '" + guess.string() + "' does not exist");
    }
    o.config = guess.string();
  }
  return o.resolve();
}

template <class Real>
Network<Real> load_network(const RunConfig& cfg, const fs::path& checkpoint) {
  auto net = build_network<Real>(cfg.model, cfg.lif, 0);
  bool has_weak = false;
  for (const auto& line : read_manifest(checkpoint)) has_weak = has_weak || line.name == "weak.fc.weight";
  if (!has_weak) net = net.strip_weak_classifier();
  load_checkpoint_into(net.params(), checkpoint);
  return net;
}

struct EvalArgs {
  std::string checkpoint;
  std::size_t ts = 0;  // 0: the run's T_s; may exceed the trained T_t
  std::size_t batch = 64;
};

template <class Real>
int eval(const RunConfig& cfg, const EvalArgs& a) {
  auto net = load_network<Real>(cfg, a.checkpoint);
  const std::size_t ts = a.ts ? a.ts : cfg.distill.student_steps;
  auto data = load_datasets<Real>(cfg.data, std::max(ts, cfg.distill.teacher_steps));
  const EvalResult r = evaluate(net, data.test, ts, a.batch);
  std::cout << "accuracy=" << fmt(r.accuracy) << "\n";
  if (net.has_weak_head()) std::cout << "weak_accuracy=" << fmt(r.weak_accuracy) << "\n";
  std::cout << "samples=" << r.count << " ts=" << ts << "\n";
  return 0;
}

struct SfrArgs {
  EvalArgs eval;
  std::size_t stage = 0;
  std::size_t samples = 64;
  std::string out = "sfr";
};

template <class Real>
int sfr(const RunConfig& cfg, const SfrArgs& a) {
  auto net = load_network<Real>(cfg, a.eval.checkpoint);
  const std::size_t ts = a.eval.ts ? a.eval.ts : cfg.distill.student_steps;
  auto data = load_datasets<Real>(cfg.data, std::max(ts, cfg.distill.teacher_steps));
  std::vector<std::size_t> idx(std::min(a.samples, data.test.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto batch = make_batch(data.test, idx);
  const auto map = sfr_map(net, batch, ts, a.stage);
  write_pgm(a.out + ".pgm", map.map);
  write_map_csv(a.out + ".csv", map.map);
  std::cout << "stage " << a.stage << " " << map.map.dim(0) << "x" << map.map.dim(1)
            << " mean_rate=" << fmt(map.mean) << "\n";
  std::cout << "wrote " << a.out << ".pgm and " << a.out << ".csv\n";
  return 0;
}

struct EarlyExitArgs {
  EvalArgs eval;
  double threshold = 0.9;
};

template <class Real>
int early_exit(const RunConfig& cfg, const EarlyExitArgs& a) {
  auto net = load_network<Real>(cfg, a.eval.checkpoint);
  const std::size_t ts = a.eval.ts ? a.eval.ts : cfg.distill.student_steps;
  auto data = load_datasets<Real>(cfg.data, std::max(ts, cfg.distill.teacher_steps));
  const auto r = early_exit_eval(net, data.test, ts, a.threshold, a.eval.batch);
  std::cout << "accuracy=" << fmt(r.full_accuracy) << "\n"
            << "weak_accuracy=" << fmt(r.weak_accuracy) << "\n"
            << "blended_accuracy=" << fmt(r.blended_accuracy) << "\n"
            << "exit_fraction=" << fmt(r.exit_fraction) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// tools

// Finite-difference check of a spike-free network (identity spike function,
// attached reset) in both batchnorm modes.
int gradcheck_tool(std::uint64_t seed) {
  NetworkSpec spec;
  spec.stages = {{{4}, false}, {{4}, true}, {{6}, true}};
  spec.attach_stage = 1;
  spec.input_channels = 2;
  spec.input_height = spec.input_width = 6;
  spec.num_classes = 3;
  LIFConfig lif;
  lif.spike_fn = SpikeFn::kIdentity;
  lif.detach_reset = false;
  lif.threshold = 0.5;
  auto net = build_network<double>(spec, lif, seed);
  Rng rng(derive_seed(seed, 1));
  Tensor<double> x(Shape{3, 2, 6, 6});
  for (double& v : x.storage()) v = rng.uniform(-1.0, 1.0);
  const Batch<double> batch{x, {0, 2, 1}};
  DistillConfig dcfg;
  dcfg.student_steps = 1;
  dcfg.teacher_steps = 2;
  dcfg.detach_ssd_teacher = false;  // a detached target is invisible to finite differences
  double worst = 0.0;
  for (const auto mode : {BatchNormMode::kInference, BatchNormMode::kTrain}) {
    const Graph<double> graph = [&](Tape<double>& t) {
      auto rec = net.forward(t, batch, dcfg.teacher_steps, mode);
      return compose_losses<double>(rec.final_logits, rec.weak_logits, batch.labels, dcfg, std::nullopt).total;
    };
    const auto r = gradcheck(net.params(), graph);
    std::cout << (mode == BatchNormMode::kTrain ? "train-mode" : "inference") << " max_rel_error="
              << fmt(r.max_rel_error) << " (" << r.checked << " entries, worst " << r.worst_param << ")\n";
    worst = std::max(worst, r.max_rel_error);
  }
  std::cout << "max_rel_error=" << fmt(worst) << "\n";
  return worst < 1e-3 ? 0 : 1;
}

struct IntegrateArgs {
  std::string input;
  std::string out = "frames";
  double window_ms = 10.0;
  std::size_t size = 0;  // 0: sensor resolution
};

// Frames go out in the checkpoint format: one float32 entry per stream.
int integrate_tool(const IntegrateArgs& a) {
  const auto streams = read_evst(a.input);
  ParamSet<float> frames;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const std::size_t h = a.size ? a.size : streams[i].height;
    const std::size_t w = a.size ? a.size : streams[i].width;
    auto ft = integrate_events<float>(streams[i], a.window_ms, h, w);
    std::cout << "stream " << i << " label=" << streams[i].label << " events=" << streams[i].events.size()
              << " frames=" << ft.timesteps() << "\n";
    frames.add("stream" + std::to_string(i) + ".frames", std::move(ft.frames), ParamKind::kBuffer);
  }
  save_checkpoint(frames, a.out);
  std::cout << "wrote " << manifest_path(a.out).string() << "\n";
  return 0;
}

struct RiskArgs {
  std::string contexts = "toy2";
  std::size_t n = 50;
  std::size_t m = 10000;
  std::uint64_t seed = 1;
  std::string out;
};

int risk_tool(const RiskArgs& a) {
  if (a.contexts != "toy2") throw ConfigError("risk: unknown context set '" + a.contexts + "' (toy2)");
  const auto r = variance_experiment(ToyDistribution::toy2(), ToyDistribution::toy2_losses(), a.n, a.m, a.seed);
  std::cout << r.csv();
  std::cout << "variance_ratio=" << fmt(r.variance_ratio) << "\n";
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw DataError("risk: cannot write '" + a.out + "'");
    f << r.csv();
  }
  return 0;
}

struct SynthArgs {
  std::string kind = "bars";
  std::string out = "synth";
  std::size_t n = 100;
  std::size_t classes = 4;
  std::size_t size = 16;
  std::size_t frames = 4;
  double window_ms = 10.0;
  double noise = 0.0;
  std::uint64_t seed = 1;
};

// bars -> OUT-images.idx / OUT-labels.idx; moving_bars -> OUT.evst
int synth_tool(const SynthArgs& a) {
  DataConfig d;
  d.classes = a.classes;
  d.size = a.size;
  d.window_ms = a.window_ms;
  d.noise = a.noise;
  if (a.kind == "bars") {
    const auto ds = synth_bars<float>(a.n, a.classes, a.size, a.noise, a.seed);
    save_idx(ds, a.out + "-images.idx", a.out + "-labels.idx");
    std::cout << "wrote " << a.n << " images to " << a.out << "-images.idx, " << a.out << "-labels.idx\n";
  } else if (a.kind == "moving_bars") {
    const auto streams = synth_moving_bars(a.n, moving_bar_options(d, a.frames), a.seed);
    write_evst(a.out + ".evst", streams);
    std::cout << "wrote " << a.n << " recordings to " << a.out << ".evst\n";
  } else {
    throw ConfigError("synth: unknown kind '" + a.kind + "' (bars, moving_bars)");
  }
  return 0;
}

template <class F>
int with_precision(const RunConfig& cfg, F&& f) {
  return cfg.precision == "double" ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking network training with temporal-spatial self-distillation"};
  app.require_subcommand(1);

  RunOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "train a network");
  train_opts.attach(*train_cmd);

  RunOptions eval_opts;
  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval_opts.attach(*eval_cmd, {"--ts", "--out"});
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint prefix, e.g. run/best")->required();
  eval_cmd->add_option("--ts", eval_args.ts, "evaluation timesteps (default: the run's T_s)");

  auto* tools_cmd = app.add_subcommand("tools", "analysis and data utilities");
  tools_cmd->require_subcommand(1);

  std::uint64_t gc_seed = 1;
  auto* gc_cmd = tools_cmd->add_subcommand("gradcheck", "finite-difference check of a spike-free network");
  gc_cmd->add_option("--seed", gc_seed);

  IntegrateArgs integ;
  auto* integ_cmd = tools_cmd->add_subcommand("integrate", "integrate EVST events into frames");
  integ_cmd->add_option("--input", integ.input, "EVST file")->required();
  integ_cmd->add_option("--out", integ.out, "output prefix (.manifest/.bin)");
  integ_cmd->add_option("--window-ms", integ.window_ms, "window length");
  integ_cmd->add_option("--size", integ.size, "target side (default: sensor size)");

  RunOptions sfr_opts;
  SfrArgs sfr_args;
  auto* sfr_cmd = tools_cmd->add_subcommand("sfr", "spike firing rate map of one stage");
  sfr_opts.attach(*sfr_cmd, {"--ts", "--out"});
  sfr_cmd->add_option("--checkpoint", sfr_args.eval.checkpoint)->required();
  sfr_cmd->add_option("--ts", sfr_args.eval.ts);
  sfr_cmd->add_option("--stage", sfr_args.stage);
  sfr_cmd->add_option("--samples", sfr_args.samples);
  sfr_cmd->add_option("--out", sfr_args.out, "output prefix (.pgm/.csv)");

  RiskArgs risk;
  auto* risk_cmd = tools_cmd->add_subcommand("risk", "empirical vs Bayes-distilled risk variance");
  risk_cmd->add_option("--contexts", risk.contexts);
  risk_cmd->add_option("--n", risk.n);
  risk_cmd->add_option("--m", risk.m);
  risk_cmd->add_option("--seed", risk.seed);
  risk_cmd->add_option("--out", risk.out, "CSV report");

  RunOptions ee_opts;
  EarlyExitArgs ee_args;
  auto* ee_cmd = tools_cmd->add_subcommand("early-exit", "weak-classifier early-exit evaluation");
  ee_opts.attach(*ee_cmd, {"--ts", "--out", "--threshold"});
  ee_cmd->add_option("--checkpoint", ee_args.eval.checkpoint)->required();
  ee_cmd->add_option("--ts", ee_args.eval.ts);
  ee_cmd->add_option("--threshold", ee_args.threshold, "weak-head softmax confidence for exiting");

  SynthArgs synth;
  auto* synth_cmd = tools_cmd->add_subcommand("synth", "write a synthetic dataset (IDX or EVST)");
  synth_cmd->add_option("--kind", synth.kind, "bars | moving_bars");
  synth_cmd->add_option("--out", synth.out, "output prefix");
  synth_cmd->add_option("--n", synth.n);
  synth_cmd->add_option("--classes", synth.classes);
  synth_cmd->add_option("--size", synth.size);
  synth_cmd->add_option("--frames", synth.frames);
  synth_cmd->add_option("--window-ms", synth.window_ms);
  synth_cmd->add_option("--noise", synth.noise);
  synth_cmd->add_option("--seed", synth.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*train_cmd) {
      const RunConfig cfg = train_opts.resolve();
      return with_precision(cfg, [&](auto r) { return train<decltype(r)>(cfg); });
    }
    if (*eval_cmd) {
      const RunConfig cfg = run_config_for(eval_args.checkpoint, eval_opts);
      return with_precision(cfg, [&](auto r) { return eval<decltype(r)>(cfg, eval_args); });
    }
    if (*gc_cmd) return gradcheck_tool(gc_seed);
    if (*integ_cmd) return integrate_tool(integ);
    if (*sfr_cmd) {
      const RunConfig cfg = run_config_for(sfr_args.eval.checkpoint, sfr_opts);
      return with_precision(cfg, [&](auto r) { return sfr<decltype(r)>(cfg, sfr_args); });
    }
    if (*risk_cmd) return risk_tool(risk);
    if (*ee_cmd) {
      const RunConfig cfg = run_config_for(ee_args.eval.checkpoint, ee_opts);
      return with_precision(cfg, [&](auto r) { return early_exit<decltype(r)>(cfg, ee_args); });
    }
    if (*synth_cmd) return synth_tool(synth);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumericError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}

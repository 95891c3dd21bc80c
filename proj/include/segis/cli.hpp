#pragma once

// Command-line front end: synth, train, eval, gradcheck.
//
// Resolution order for every key: built-in default, then the command's
// section of the --config JSON file, then explicit flags. Unknown keys are
// rejected. The resolved configuration is echoed to stdout and written to
// <out>/resolved_config.json.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 verification failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "checkpoint.hpp"
#include "evaluate.hpp"
#include "gradcheck.hpp"
#include "io.hpp"
#include "synth.hpp"
#include "trainer.hpp"

namespace segis::cli {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kVerification = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Overlays `patch` onto `base`, rejecting keys `base` does not define.
inline void merge_known(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw UsageError(where + ": expected a JSON object");
  for (const auto& [k, v] : patch.items()) {
    if (!base.contains(k)) throw UsageError(where + ": unknown key '" + k + "'");
    base[k] = v;
  }
}

struct Context {
  json file = json::object();
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::ostream* out_stream = &std::cout;
  std::ostream* err_stream = &std::cerr;

  json section(const std::string& name) const { return file.contains(name) ? file.at(name) : json::object(); }
};

inline void echo_config(Context& ctx, const std::string& command, const json& resolved) {
  const json doc = {{"command", command}, {"config", resolved}};
  *ctx.out_stream << doc.dump(2) << '\n';
  if (ctx.out) {
    fs::create_directories(*ctx.out);
    write_json_atomic(fs::path(*ctx.out) / "resolved_config.json", doc);
  }
}

inline fs::path require_out(const Context& ctx) {
  if (!ctx.out) throw UsageError("--out is required for this command");
  return *ctx.out;
}

// synth ---------------------------------------------------------------------

inline json synth_defaults() {
  json j = synth_config_to_json(SynthConfig{});
  j.erase("seed");
  const DatasetSpec d;
  j["pairs"] = d.pairs;
  j["val_fraction"] = d.val_fraction;
  j["test_fraction"] = d.test_fraction;
  return j;
}

inline int cmd_synth(Context& ctx, const json& flags) {
  json cfg = synth_defaults();
  merge_known(cfg, ctx.section("synth"), "config.synth");
  merge_known(cfg, flags, "flags");
  cfg["seed"] = ctx.seed.value_or(ctx.file.value("seed", std::uint64_t{7}));
  if (cfg.at("pairs").get<int>() < 1) throw UsageError("--pairs must be at least 1");
  const fs::path out = require_out(ctx);
  echo_config(ctx, "synth", cfg);
  DatasetSpec spec;
  spec.synth = synth_config_from_json(cfg);
  spec.pairs = cfg.at("pairs").get<int>();
  spec.val_fraction = cfg.at("val_fraction").get<double>();
  spec.test_fraction = cfg.at("test_fraction").get<double>();
  save_dataset(generate_dataset(spec), out);
  *ctx.out_stream << (out / "dataset.json").string() << '\n';
  return kOk;
}

// train ---------------------------------------------------------------------

inline json train_defaults(TrainMode mode) {
  const TrainConfig c = TrainConfig::defaults_for(mode);
  return {{"data", ""},
          {"mode", to_string(mode)},
          {"epochs_max", c.epochs_max},
          {"lr0", c.lr0},
          {"decay_factor", c.decay_factor},
          {"decay_patience", c.decay_patience},
          {"early_stop_patience", c.early_stop_patience},
          {"samples_per_epoch", c.samples_per_epoch},
          {"both_orders", false},
          {"alpha0", c.schedule.alpha0},
          {"alpha_step", c.schedule.alpha_step},
          {"alpha_max", c.schedule.alpha_max},
          {"beta_ratio", c.schedule.beta_ratio},
          {"gamma", c.schedule.gamma},
          {"depth", c.network.depth},
          {"base_width", c.network.base_width}};
}

inline int cmd_train(Context& ctx, const json& flags) {
  const json file = ctx.section("train");
  std::string mode_name = flags.value("mode", file.value("mode", std::string("joint")));
  TrainMode mode;
  try {
    mode = train_mode_from_string(mode_name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  json cfg = train_defaults(mode);
  merge_known(cfg, file, "config.train");
  merge_known(cfg, flags, "flags");
  cfg["mode"] = to_string(mode);
  cfg["seed"] = ctx.seed.value_or(ctx.file.value("seed", std::uint64_t{7}));
  if (cfg.at("data").get<std::string>().empty()) throw UsageError("train needs --data <dataset dir>");
  const fs::path out = require_out(ctx);

  TrainConfig tc = TrainConfig::defaults_for(mode);
  tc.epochs_max = cfg.at("epochs_max").get<int>();
  tc.lr0 = cfg.at("lr0").get<double>();
  tc.decay_factor = cfg.at("decay_factor").get<double>();
  tc.decay_patience = cfg.at("decay_patience").get<int>();
  tc.early_stop_patience = cfg.at("early_stop_patience").get<int>();
  tc.samples_per_epoch = cfg.at("samples_per_epoch").get<int>();
  tc.schedule = {cfg.at("alpha0").get<double>(), cfg.at("alpha_step").get<double>(), cfg.at("alpha_max").get<double>(),
                 cfg.at("beta_ratio").get<double>(), cfg.at("gamma").get<double>()};
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const SynthDataset ds = load_dataset(cfg.at("data").get<std::string>());
  tc.network.image_channels = ds.spec.synth.image_channels;
  tc.network.structures = ds.spec.synth.structures;
  tc.network.depth = cfg.at("depth").get<int>();
  tc.network.base_width = cfg.at("base_width").get<int>();
  if (tc.network.depth < 1 || tc.network.base_width < 1) throw UsageError("depth and base_width must be >= 1");
  const int div = 1 << tc.network.depth;
  const Dims g = ds.spec.synth.dims;
  if (g.x % div || g.y % div || g.z % div) throw DataError("dataset dims " + g.str() + " not divisible by 2^depth");
  echo_config(ctx, "train", cfg);

  const Dataset<float> train_set = ds.samples(ds.train, cfg.at("both_orders").get<bool>());
  const Dataset<float> val_set = ds.samples(ds.val);
  check_split_hygiene<float>({&train_set, &val_set});
  const Dataset<float> test_set = ds.samples(ds.test);
  check_split_hygiene<float>({&train_set, &val_set, &test_set});
  TrainHooks hooks;
  hooks.on_epoch = [&](int e, const LossBreakdown& tr, const LossBreakdown& va, double lr) {
    *ctx.err_stream << "epoch " << e << " train " << fmt_num(tr.total) << " val " << fmt_num(va.total) << " lr " << fmt_num(lr)
                    << '\n';
  };
  const TrainResult<float> r = train(train_set, val_set, tc, out, hooks);
  *ctx.out_stream << "best epoch " << r.best_epoch << " val " << fmt_num(r.best_val) << " (" << r.stop_reason << ")\n";
  return kOk;
}

// eval ----------------------------------------------------------------------

inline int cmd_eval(Context& ctx, const json& flags) {
  json cfg = {{"data", ""}, {"joint", ""}, {"seg", ""}, {"reg", ""}, {"sc_form", "cosine"}};
  merge_known(cfg, ctx.section("eval"), "config.eval");
  merge_known(cfg, flags, "flags");
  if (cfg.at("data").get<std::string>().empty()) throw UsageError("eval needs --data <dataset dir>");
  const std::string sc = cfg.at("sc_form").get<std::string>();
  if (sc != "cosine" && sc != "literal") throw UsageError("sc_form must be cosine or literal");
  const bool has_joint = !cfg.at("joint").get<std::string>().empty();
  const bool has_seg = !cfg.at("seg").get<std::string>().empty();
  const bool has_reg = !cfg.at("reg").get<std::string>().empty();
  if (has_seg != has_reg) throw UsageError("--seg and --reg must be given together");
  if (!has_joint && !has_seg) throw UsageError("eval needs --joint and/or --seg with --reg");
  const fs::path out = require_out(ctx);
  echo_config(ctx, "eval", cfg);

  std::vector<Pipeline> pipes;
  if (has_joint) pipes.push_back(joint_pipeline(load_checkpoint(cfg.at("joint").get<std::string>())));
  if (has_seg)
    pipes.push_back(independent_pipeline(load_checkpoint(cfg.at("seg").get<std::string>()),
                                         load_checkpoint(cfg.at("reg").get<std::string>())));
  const SynthDataset ds = load_dataset(cfg.at("data").get<std::string>());
  EvalOptions opt;
  opt.sc_form = sc == "literal" ? ScForm::literal : ScForm::cosine;
  const EvalReport rep = evaluate(ds, pipes, opt);
  write_file_atomic(out / "metrics.csv", metrics_csv(rep));
  write_file_atomic(out / "samplesize.csv", samplesize_csv(rep));
  write_file_atomic(out / "registration.csv", registration_csv(rep));
  if (pipes.size() == 2) write_file_atomic(out / "comparison.csv", comparison_csv(rep, pipes[0].name, pipes[1].name));
  *ctx.out_stream << (out / "metrics.csv").string() << '\n';
  return kOk;
}

// gradcheck -----------------------------------------------------------------

inline int cmd_gradcheck(Context& ctx, const json& flags) {
  const GradCheckOptions d;
  json cfg = {{"reps", 1},
              {"inject_fault", d.inject_fault},
              {"op_tolerance", d.op_tolerance},
              {"network_tolerance", d.network_tolerance}};
  merge_known(cfg, ctx.section("gradcheck"), "config.gradcheck");
  merge_known(cfg, flags, "flags");
  cfg["seed"] = ctx.seed.value_or(ctx.file.value("seed", std::uint64_t{7}));
  const int reps = cfg.at("reps").get<int>();
  if (reps < 1) throw UsageError("--reps must be at least 1");
  echo_config(ctx, "gradcheck", cfg);
  GradCheckOptions opt;
  opt.inject_fault = cfg.at("inject_fault").get<std::string>();
  opt.op_tolerance = cfg.at("op_tolerance").get<double>();
  opt.network_tolerance = cfg.at("network_tolerance").get<double>();
  std::ostringstream csv;
  csv << "rep,seed,op,max_rel_error,tolerance,pass\n";
  bool ok = true;
  for (int r = 0; r < reps; ++r) {
    const std::uint64_t s = derive_seed(cfg.at("seed").get<std::uint64_t>(), static_cast<std::uint64_t>(r));
    for (const auto& res : run_gradchecks(s, opt)) {
      ok = ok && res.pass;
      csv << r << ',' << s << ',' << res.op << ',' << fmt_num(res.max_rel_error) << ',' << fmt_num(res.tolerance) << ','
          << (res.pass ? "true" : "false") << '\n';
      if (!res.pass) *ctx.err_stream << "FAIL " << res.op << " rep " << r << " rel error " << fmt_num(res.max_rel_error) << '\n';
    }
  }
  *ctx.out_stream << csv.str();
  if (ctx.out) write_file_atomic(fs::path(*ctx.out) / "gradcheck.csv", csv.str());
  *ctx.out_stream << (ok ? "gradcheck: all checks passed\n" : "gradcheck: FAILED\n");
  return ok ? kOk : kVerification;
}

// entry point ---------------------------------------------------------------

/// Parses argv and runs one command; never throws.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Simultaneous segmentation and registration on synthetic longitudinal phantoms", "segis"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  auto* o_config = app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  auto* o_seed = app.add_option("--seed", seed, "Run seed");
  auto* o_out = app.add_option("--out", out_dir, "Output directory");
  (void)o_config;

  json flags = json::object();
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  int pairs = 0;
  auto* o_pairs = synth->add_option("--pairs", pairs, "Number of pairs");

  auto* trn = app.add_subcommand("train", "Train a model");
  std::string t_data, t_mode;
  int t_epochs = 0;
  double t_lr = 0;
  auto* o_tdata = trn->add_option("--data", t_data, "Dataset directory");
  auto* o_mode = trn->add_option("--mode", t_mode, "joint | seg | reg");
  auto* o_epochs = trn->add_option("--epochs", t_epochs, "Maximum epochs");
  auto* o_lr = trn->add_option("--lr", t_lr, "Initial learning rate");

  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints on the test split");
  std::string e_data, e_joint, e_seg, e_reg;
  bool sc_literal = false;
  auto* o_edata = ev->add_option("--data", e_data, "Dataset directory");
  auto* o_joint = ev->add_option("--joint", e_joint, "Joint checkpoint");
  auto* o_seg = ev->add_option("--seg", e_seg, "Seg-only checkpoint");
  auto* o_reg = ev->add_option("--reg", e_reg, "Reg-only checkpoint");
  ev->add_flag("--sc-literal", sc_literal, "Spatial correlation with the literal L1 denominator");

  auto* gck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  int reps = 1;
  std::string fault;
  auto* o_reps = gck->add_option("--reps", reps, "Independent seeds");
  auto* o_fault = gck->add_option("--inject-fault", fault, "Corrupt the named op's gradient (test hook)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kUsage;
  }

  Context ctx;
  ctx.out_stream = &out;
  ctx.err_stream = &err;
  try {
    if (!config_path.empty()) {
      ctx.file = detail::read_json(config_path);
      json known = {{"seed", 0}, {"synth", {}}, {"train", {}}, {"eval", {}}, {"gradcheck", {}}};
      for (const auto& [k, v] : ctx.file.items())
        if (!known.contains(k)) throw UsageError("config: unknown key '" + k + "'");
    }
    if (o_seed->count()) ctx.seed = seed;
    if (o_out->count()) ctx.out = out_dir;
    if (synth->parsed()) {
      if (o_pairs->count()) flags["pairs"] = pairs;
      return cmd_synth(ctx, flags);
    }
    if (trn->parsed()) {
      if (o_tdata->count()) flags["data"] = t_data;
      if (o_mode->count()) flags["mode"] = t_mode;
      if (o_epochs->count()) flags["epochs_max"] = t_epochs;
      if (o_lr->count()) flags["lr0"] = t_lr;
      return cmd_train(ctx, flags);
    }
    if (ev->parsed()) {
      if (o_edata->count()) flags["data"] = e_data;
      if (o_joint->count()) flags["joint"] = e_joint;
      if (o_seg->count()) flags["seg"] = e_seg;
      if (o_reg->count()) flags["reg"] = e_reg;
      if (sc_literal) flags["sc_form"] = "literal";
      return cmd_eval(ctx, flags);
    }
    if (o_reps->count()) flags["reps"] = reps;
    if (o_fault->count()) flags["inject_fault"] = fault;
    return cmd_gradcheck(ctx, flags);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const VerificationError& e) {
    err << "verification failure: " << e.what() << '\n';
    return kVerification;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  }
}

}  // namespace segis::cli

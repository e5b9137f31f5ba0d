#include "s2c/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "s2c/checkpoint.hpp"
#include "s2c/config.hpp"
#include "s2c/errors.hpp"
#include "s2c/growth.hpp"
#include "s2c/harness.hpp"

namespace s2c {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::string data_dir;
  std::optional<std::uint64_t> seed;
  std::string precision;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.sets, "dotted-key override, e.g. optimizer.lr=0.05 (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  cmd->add_option("--data-dir", f.data_dir, "CIFAR-10 binary batch directory (data.dir)");
  cmd->add_option("--seed", f.seed, "top-level seed (seed)");
  cmd->add_option("--precision", f.precision, "single | double (precision)");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return j;
}

json::json_pointer dotted_pointer(const std::string& dotted) {
  std::string p = "/" + dotted;
  for (auto& ch : p) {
    if (ch == '.') ch = '/';
  }
  return json::json_pointer(p);
}

void logged_override(json& cfg, const std::string& assignment, std::ostream& err) {
  const std::string key = assignment.substr(0, assignment.find('='));
  std::string before = "(unset)";
  try {
    const auto ptr = dotted_pointer(key);
    if (cfg.contains(ptr)) before = cfg.at(ptr).dump();
  } catch (const json::exception&) {
  }
  apply_override(cfg, assignment);
  err << "config: " << key << " = " << cfg.at(dotted_pointer(key)).dump() << " (was " << before << ")\n";
}

// defaults <- file <- flags
json resolve_config(json base, const ConfigFlags& f, std::ostream& err) {
  if (!f.config_path.empty()) {
    base = merge_strict(std::move(base), read_json_file(f.config_path));
    err << "config: loaded " << f.config_path << '\n';
  }
  if (!f.data_dir.empty()) logged_override(base, "data.dir=" + json(f.data_dir).dump(), err);
  if (f.seed) logged_override(base, "seed=" + std::to_string(*f.seed), err);
  if (!f.precision.empty()) logged_override(base, "precision=" + json(f.precision).dump(), err);
  for (const auto& s : f.sets) logged_override(base, s, err);
  return base;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

template <typename F>
decltype(auto) with_precision(Precision p, F&& f) {
  if (p == Precision::double_) return f(double{});
  return f(float{});
}

void maybe_write_comparison(const fs::path& root, std::ostream& out) {
  const fs::path a = root / "s2c" / "rungs.csv";
  const fs::path b = root / "e2e" / "rungs.csv";
  if (!fs::exists(a) || !fs::exists(b)) return;
  write_comparison(root / "comparison.csv", read_rungs_csv(a), read_rungs_csv(b));
  out << "comparison: " << (root / "comparison.csv").string() << '\n';
}

void print_run(std::ostream& out, const RunResult& r) {
  for (const auto& s : r.stages) {
    out << r.regime << " stage " << s.stage << " step " << s.step << " train_acc " << format_double(s.train_acc)
        << " test_acc " << format_double(s.test_acc) << '\n';
  }
  for (const auto& g : r.growth) {
    out << r.regime << " growth -> stage " << g.stage << " residual_keys " << g.residual_keys << " max_abs_diff "
        << format_double(g.max_abs_diff) << " preserved " << (g.preserved ? "yes" : "no") << '\n';
  }
  for (const auto& rung : r.rungs) {
    out << r.regime << " rung " << rung.rung << " lr " << format_double(rung.lr) << " train_acc "
        << format_double(rung.train_acc) << " test_acc " << format_double(rung.test_acc) << " gap "
        << format_double(rung.gap) << '\n';
  }
  out << r.regime << " best test_acc " << format_double(r.best_test_acc) << " at step " << r.best_step << '\n';
  out << r.regime << " final checkpoint " << r.final_checkpoint.string() << '\n';
}

TrainConfig resolved_training_config(const json& cfg) {
  TrainConfig c = config_from_json(cfg);
  if (c.source == "cifar10" && c.data_dir.empty()) {
    throw ConfigError("data.dir is required for the cifar10 source (pass --data-dir or --set data.dir=...)");
  }
  return c;
}

RunResult train_regime(const std::string& regime, const json& cfg, const fs::path& root, std::ostream& out,
                       std::ostream& err) {
  const TrainConfig c = resolved_training_config(cfg);
  const fs::path dir = root / regime;
  fs::create_directories(dir);
  write_text(dir / "resolved_config.json", config_to_json(c).dump(2) + "\n");
  RunResult r = with_precision(c.precision, [&](auto tag) {
    using S = decltype(tag);
    const Dataset<S> data = prepare_dataset<S>(c);
    err << regime << ": train " << data.train.size() << " / test " << data.test.size() << " images\n";
    return regime == "s2c" ? run_s2c<S>(c, data, dir, &err) : run_e2e<S>(c, data, dir, &err);
  });
  print_run(out, r);
  return r;
}

std::vector<std::vector<std::string>> parse_groups(const std::vector<std::string>& specs) {
  std::vector<std::vector<std::string>> groups;
  for (const auto& s : specs) {
    std::vector<std::string> g;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
      if (!item.empty()) g.push_back(item);
    }
    if (g.empty()) throw ConfigError("empty --group");
    groups.push_back(std::move(g));
  }
  return groups;
}

int cmd_grow(const std::string& in, const std::string& out_path, std::optional<std::uint64_t> seed_flag, int probes,
             Index probe_batch, std::optional<double> tol_flag, std::ostream& out) {
  const Precision p = peek_checkpoint_precision(in);
  return with_precision(p, [&](auto tag) {
    using S = decltype(tag);
    TrainingSnapshot<S> snap = load_checkpoint<S>(in);
    std::uint64_t seed = 1;
    if (seed_flag) {
      seed = *seed_flag;
    } else if (snap.metadata.contains("config") && snap.metadata["config"].contains("seed")) {
      seed = snap.metadata["config"]["seed"].template get<std::uint64_t>();
    }
    const GrowthPlan plan = plan_growth(snap.net);
    SeededRng grng(growth_seed(seed, plan.stage));
    SeriesNetwork<S> child = apply_growth(snap.net, plan, grng, BranchInit::function_preserving);
    const double tol = tol_flag ? *tol_flag : (std::is_same_v<S, double> ? 0.0 : 1e-5);
    SeededRng prng(probe_seed(seed, plan.stage));
    const PreservationReport rep = verify_preservation(snap.net, child, probes, prng, tol, probe_batch);
    for (const auto& a : plan.additions) {
      out << "path for " << a.target.str() << ": " << a.first.name.str() << " (" << a.first.kernel << "x"
          << a.first.kernel << ", stride " << a.first.stride << ") -> " << a.second.name.str() << " ("
          << a.second.kernel << "x" << a.second.kernel << ", stride " << a.second.stride << ")\n";
    }
    out << "stage " << plan.stage << " adds " << plan.new_layer_count() << " layers\n";
    out << "max_abs_diff=" << format_double(rep.max_abs_diff) << " probes=" << rep.probes
        << " tol=" << format_double(tol) << " pass=" << (rep.pass ? 1 : 0) << '\n';
    if (!rep.pass) {
      throw PreservationError("grown network changed the function: max |logit diff| " + format_double(rep.max_abs_diff));
    }
    TrainingSnapshot<S> grown;
    grown.net = std::move(child);
    EmaState<S> ema;
    ema.shadow = std::move(snap.ema_shadows);
    SgdState<S> sgd;
    sgd.velocity = std::move(snap.velocities);
    const auto params = grown.net.parameters();
    ema.sync(params);
    sgd.sync(params);
    grown.ema_shadows = std::move(ema.shadow);
    grown.velocities = std::move(sgd.velocity);
    grown.step = snap.step;
    grown.rng_state = snap.rng_state;
    grown.metadata = snap.metadata;
    grown.metadata["stage"] = plan.stage;
    grown.metadata["grown_from"] = in;
    grown.metadata["growth_max_abs_diff"] = rep.max_abs_diff;
    save_checkpoint(out_path, grown);
    out << "wrote " << out_path << '\n';
    return static_cast<int>(exit_ok);
  });
}

int cmd_eval(const std::string& ckpt, const ConfigFlags& flags, bool live, const std::string& out_path,
             std::ostream& out, std::ostream& err) {
  const Precision p = peek_checkpoint_precision(ckpt);
  return with_precision(p, [&](auto tag) {
    using S = decltype(tag);
    TrainingSnapshot<S> snap = load_checkpoint<S>(ckpt);
    json base = default_config_json();
    if (snap.metadata.contains("config")) base = merge_strict(std::move(base), snap.metadata["config"]);
    TrainConfig c = resolved_training_config(resolve_config(std::move(base), flags, err));
    c.precision = p;
    std::optional<NormalizationStats> stats;
    if (snap.metadata.contains("normalization") && !snap.metadata["normalization"].is_null()) {
      stats = stats_from_json(snap.metadata["normalization"]);
    }
    const Dataset<S> data = prepare_dataset<S>(c, stats);
    const bool use_ema = !live && !snap.ema_shadows.empty();
    EmaState<S> ema;
    ema.shadow = std::move(snap.ema_shadows);
    Evaluation tr, te;
    {
      EmaScope<S> scope(snap.net, use_ema ? &ema : nullptr);
      tr = evaluate_accuracy(snap.net, data.train, c.eval_batch_size);
      te = evaluate_accuracy(snap.net, data.test, c.eval_batch_size);
    }
    const json report{{"checkpoint", ckpt},
                      {"parameters", use_ema ? "ema" : "live"},
                      {"stage", snap.net.stage_count()},
                      {"train_size", tr.count},
                      {"test_size", te.count},
                      {"train_loss", tr.loss},
                      {"train_acc", tr.accuracy},
                      {"test_loss", te.loss},
                      {"test_acc", te.accuracy},
                      {"gap", tr.accuracy - te.accuracy}};
    out << report.dump(2) << '\n';
    if (!out_path.empty()) write_text(out_path, report.dump(2) + "\n");
    return static_cast<int>(exit_ok);
  });
}

int cmd_report_gamma(const std::string& ckpt, const std::string& dir, const std::vector<std::string>& group_specs,
                     std::ostream& out) {
  const Precision p = peek_checkpoint_precision(ckpt);
  return with_precision(p, [&](auto tag) {
    using S = decltype(tag);
    const TrainingSnapshot<S> snap = load_checkpoint<S>(ckpt);
    const auto groups = group_specs.empty() ? available_gamma_groups(snap.net) : parse_groups(group_specs);
    const GammaReport r = gamma_report(snap.net, groups);
    write_gamma_report(dir, r);
    for (const auto& g : r.groups) {
      for (std::size_t i = 0; i < g.layers.size(); ++i) {
        out << (i ? " > " : "") << g.layers[i] << " " << format_double(g.mean_abs_gamma[i]);
      }
      out << "  strictly_decreasing=" << (g.strictly_decreasing ? "yes" : "no") << '\n';
    }
    out << "wrote gamma_summary.csv, gamma_channels.csv, gamma_groups.csv to " << dir << '\n';
    return static_cast<int>(exit_ok);
  });
}

int cmd_verify(const std::string& parent_path, const std::string& child_path, int probes, Index probe_batch,
               std::uint64_t seed, std::optional<double> tol_flag, std::ostream& out) {
  const Precision p = peek_checkpoint_precision(parent_path);
  if (peek_checkpoint_precision(child_path) != p) {
    throw CheckpointError(CheckpointError::Kind::precision_mismatch,
                          "parent and grown checkpoints use different precision");
  }
  return with_precision(p, [&](auto tag) {
    using S = decltype(tag);
    const auto parent = load_checkpoint<S>(parent_path);
    const auto child = load_checkpoint<S>(child_path);
    const double tol = tol_flag ? *tol_flag : (std::is_same_v<S, double> ? 0.0 : 1e-5);
    SeededRng rng(derive_seed(seed, streams::probes));
    const PreservationReport rep = verify_preservation(parent.net, child.net, probes, rng, tol, probe_batch);
    out << "max_abs_diff=" << format_double(rep.max_abs_diff) << " probes=" << rep.probes
        << " tol=" << format_double(tol) << " pass=" << (rep.pass ? 1 : 0) << '\n';
    if (!rep.pass) {
      throw PreservationError("grown network does not reproduce its parent: max |logit diff| " +
                              format_double(rep.max_abs_diff) + " > " + format_double(tol));
    }
    return static_cast<int>(exit_ok);
  });
}

int cmd_synth_demo(const ConfigFlags& flags, const fs::path& root, bool with_e2e, std::ostream& out,
                   std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  const json cfg = resolve_config(synth_demo_config_json(), flags, err);
  const RunResult s2c = train_regime("s2c", cfg, root, out, err);
  bool preserved = !s2c.growth.empty();
  for (const auto& g : s2c.growth) preserved = preserved && g.preserved;
  if (with_e2e) {
    train_regime("e2e", cfg, root, out, err);
    maybe_write_comparison(root, out);
  }
  const double final_train = s2c.rungs.empty() ? 0.0 : s2c.rungs.back().train_acc;
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out << "synth-demo: stages " << s2c.growth.size() << " preservation " << (preserved ? "pass" : "FAIL")
      << " final train_acc " << format_double(final_train) << " elapsed_s " << format_double(seconds) << '\n';
  return static_cast<int>(exit_ok);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Grow series networks simple-to-complex with function-preserving residual paths"};
  app.name("s2c");
  app.require_subcommand(1);

  ConfigFlags train_s2c_flags, train_e2e_flags, eval_flags, demo_flags;
  std::string train_s2c_out = "runs", train_e2e_out = "runs";

  auto* train_s2c = app.add_subcommand("train-s2c", "train a network by growing it stage by stage");
  add_config_flags(train_s2c, train_s2c_flags);
  train_s2c->add_option("--out", train_s2c_out, "output root; results go to <out>/s2c");

  auto* train_e2e = app.add_subcommand("train-e2e", "train the final grown architecture from scratch");
  add_config_flags(train_e2e, train_e2e_flags);
  train_e2e->add_option("--out", train_e2e_out, "output root; results go to <out>/e2e");

  std::string grow_in, grow_out;
  std::optional<std::uint64_t> grow_seed;
  std::optional<double> grow_tol;
  int grow_probes = 16;
  Index grow_probe_batch = 8;
  auto* grow = app.add_subcommand("grow", "apply one function-preserving growth stage to a checkpoint");
  grow->add_option("--checkpoint", grow_in, "parent checkpoint")->required()->check(CLI::ExistingFile);
  grow->add_option("--out", grow_out, "grown checkpoint to write")->required();
  grow->add_option("--seed", grow_seed, "growth seed (default: seed stored in the checkpoint)");
  grow->add_option("--probes", grow_probes, "probe batches for the preservation check")->check(CLI::PositiveNumber);
  grow->add_option("--probe-batch", grow_probe_batch, "images per probe batch")->check(CLI::PositiveNumber);
  grow->add_option("--tol", grow_tol, "max |logit diff| (default 0 in double, 1e-5 in single)");

  std::string eval_ckpt, eval_out;
  bool eval_live = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the train and test splits");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  add_config_flags(eval, eval_flags);
  eval->add_flag("--live", eval_live, "use live parameters instead of EMA shadows");
  eval->add_option("--out", eval_out, "also write the report to this JSON file");

  std::string gamma_ckpt, gamma_out = ".";
  std::vector<std::string> gamma_groups;
  auto* report = app.add_subcommand("report-gamma", "write per-layer and per-channel batch-norm gamma CSVs");
  report->add_option("--checkpoint", gamma_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  report->add_option("--out", gamma_out, "output directory");
  report->add_option("--group", gamma_groups, "comma-separated layer group, e.g. 0_6,1_12,2_24 (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  std::string verify_parent, verify_child;
  int verify_probes = 16;
  Index verify_probe_batch = 8;
  std::uint64_t verify_seed = 1;
  std::optional<double> verify_tol;
  auto* verify = app.add_subcommand("verify", "check that a grown checkpoint computes its parent's function");
  verify->add_option("--checkpoint", verify_parent, "parent checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--grown", verify_child, "grown checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--probes", verify_probes, "probe batches")->check(CLI::PositiveNumber);
  verify->add_option("--probe-batch", verify_probe_batch, "images per probe batch")->check(CLI::PositiveNumber);
  verify->add_option("--seed", verify_seed, "probe seed");
  verify->add_option("--tol", verify_tol, "max |logit diff| (default 0 in double, 1e-5 in single)");

  std::string demo_out = "synth_demo";
  bool demo_e2e = false;
  auto* demo = app.add_subcommand("synth-demo", "two-stage growth run on a small noise-free synthetic set");
  add_config_flags(demo, demo_flags);
  demo->add_option("--out", demo_out, "output root");
  demo->add_flag("--with-e2e", demo_e2e, "also train the end-to-end baseline and write comparison.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? static_cast<int>(exit_ok) : static_cast<int>(exit_usage);
  }

  const std::string name = app.get_subcommands().front()->get_name();
  auto fail = [&](int code, const char* category, const std::exception& e) {
    err << "s2c " << name << ": " << category << " error: " << e.what() << '\n';
    return code;
  };
  try {
    if (*train_s2c) {
      const json cfg = resolve_config(default_config_json(), train_s2c_flags, err);
      train_regime("s2c", cfg, train_s2c_out, out, err);
      maybe_write_comparison(train_s2c_out, out);
      return exit_ok;
    }
    if (*train_e2e) {
      const json cfg = resolve_config(default_config_json(), train_e2e_flags, err);
      train_regime("e2e", cfg, train_e2e_out, out, err);
      maybe_write_comparison(train_e2e_out, out);
      return exit_ok;
    }
    if (*grow) return cmd_grow(grow_in, grow_out, grow_seed, grow_probes, grow_probe_batch, grow_tol, out);
    if (*eval) return cmd_eval(eval_ckpt, eval_flags, eval_live, eval_out, out, err);
    if (*report) return cmd_report_gamma(gamma_ckpt, gamma_out, gamma_groups, out);
    if (*verify) {
      return cmd_verify(verify_parent, verify_child, verify_probes, verify_probe_batch, verify_seed, verify_tol, out);
    }
    if (*demo) return cmd_synth_demo(demo_flags, demo_out, demo_e2e, out, err);
  } catch (const ConfigError& e) {
    return fail(exit_usage, "config", e);
  } catch (const DataError& e) {
    return fail(exit_data, "data", e);
  } catch (const PreservationError& e) {
    return fail(exit_preservation, "preservation", e);
  } catch (const NumericError& e) {
    return fail(exit_numeric, "numeric", e);
  } catch (const CheckpointError& e) {
    return fail(exit_checkpoint, "checkpoint", e);
  } catch (const ShapeError& e) {
    return fail(exit_model, "shape", e);
  } catch (const GraphError& e) {
    return fail(exit_model, "graph", e);
  } catch (const ConsistencyError& e) {
    return fail(exit_model, "consistency", e);
  } catch (const std::exception& e) {
    return fail(exit_internal, "internal", e);
  }
  return exit_internal;
}

}  // namespace s2c

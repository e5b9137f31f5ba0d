#include "s2c/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "s2c/checkpoint.hpp"
#include "s2c/errors.hpp"

namespace s2c {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

json stats_to_json(const NormalizationStats& stats) { return json{{"mean", stats.mean}, {"stddev", stats.stddev}}; }

NormalizationStats stats_from_json(const json& j) {
  NormalizationStats s;
  try {
    s.mean = j.at("mean").get<std::vector<double>>();
    s.stddev = j.at("stddev").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("normalization statistics: ") + e.what());
  }
  if (s.mean.size() != s.stddev.size()) throw DataError("normalization statistics: mean/stddev length mismatch");
  return s;
}

template <RealScalar Scalar>
Dataset<Scalar> prepare_dataset(const TrainConfig& config, const std::optional<NormalizationStats>& stats) {
  Dataset<Scalar> d;
  if (config.source == "synthetic") {
    SeededRng rng(derive_seed(config.seed, streams::synthetic));
    auto [train, test] = synth_train_test<Scalar>(config.synthetic, config.synthetic_test_per_class, rng);
    d.train = std::move(train);
    d.test = std::move(test);
  } else {
    if (config.data_dir.empty()) throw ConfigError("data.dir is required for the cifar10 source");
    d.train = load_cifar10_split<Scalar>(config.data_dir, true);
    d.test = load_cifar10_split<Scalar>(config.data_dir, false);
  }
  const Index full_train = d.train.size();
  const Index full_test = d.test.size();
  const std::uint64_t subset_seed = derive_seed(config.seed, streams::subset);
  if (config.subset_size > 0 && config.subset_size < d.train.size()) {
    d.train = take_subset(d.train, config.subset_size, subset_seed);
  }
  if (config.test_subset_size > 0 && config.test_subset_size < d.test.size()) {
    d.test = take_subset(d.test, config.test_subset_size, derive_seed(subset_seed, 1));
  }
  if (config.normalize) {
    d.stats = normalize_images(d.train, stats);
    normalize_images(d.test, d.stats);
  }
  d.descriptor = json{{"source", config.source},        {"dir", config.data_dir},
                      {"train_available", full_train},  {"test_available", full_test},
                      {"train_size", d.train.size()},   {"test_size", d.test.size()},
                      {"classes", d.train.classes},     {"normalized", config.normalize}};
  return d;
}

template <RealScalar Scalar>
Evaluation evaluate_accuracy(const SeriesNetwork<Scalar>& net, const LabeledImageSet<Scalar>& set, Index batch_size) {
  if (batch_size < 1) throw ConfigError("evaluation batch size must be >= 1");
  Evaluation e;
  e.count = set.size();
  double loss_sum = 0.0;
  std::vector<Index> idx;
  for (Index begin = 0; begin < set.size(); begin += batch_size) {
    const Index end = std::min(set.size(), begin + batch_size);
    idx.resize(static_cast<std::size_t>(end - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const Batch<Scalar> b = gather_batch(set, std::span<const Index>(idx));
    const auto r = forward_eval(net, b.images, std::span<const int>(b.labels));
    e.correct += r.correct;
    loss_sum += r.loss * static_cast<double>(end - begin);
  }
  if (e.count > 0) {
    e.loss = loss_sum / static_cast<double>(e.count);
    e.accuracy = static_cast<double>(e.correct) / static_cast<double>(e.count);
  }
  return e;
}

std::vector<std::vector<std::string>> default_gamma_groups() {
  return {{"0_6", "1_12", "2_24"}, {"0_3", "1_6", "2_12"}, {"1_5", "2_10"}};
}

namespace {

template <RealScalar Scalar>
double mean_abs(const Tensor<Scalar>& t) {
  double sum = 0.0;
  for (Index i = 0; i < t.size(); ++i) sum += std::abs(static_cast<double>(t[i]));
  return t.size() > 0 ? sum / static_cast<double>(t.size()) : 0.0;
}

template <RealScalar Scalar>
std::string valid_layer_names(const SeriesNetwork<Scalar>& net) {
  std::string out;
  for (const auto& e : net.edges()) out += (out.empty() ? "" : ", ") + e.name.str();
  return out;
}

template <RealScalar Scalar>
std::optional<LayerName> lookup_layer(const SeriesNetwork<Scalar>& net, const std::string& text) {
  try {
    const LayerName name = LayerName::parse(text);
    if (net.find_edge(name)) return name;
  } catch (const Error&) {
  }
  return std::nullopt;
}

}  // namespace

template <RealScalar Scalar>
GammaReport gamma_report(const SeriesNetwork<Scalar>& net, const std::vector<std::vector<std::string>>& groups) {
  GammaReport r;
  for (const auto& e : net.edges()) {
    r.layer_mean_abs.emplace_back(e.name.str(), mean_abs(e.bn.gamma));
    std::vector<double> ch(static_cast<std::size_t>(e.bn.gamma.size()));
    for (Index c = 0; c < e.bn.gamma.size(); ++c) ch[static_cast<std::size_t>(c)] = static_cast<double>(e.bn.gamma[c]);
    r.channels.emplace_back(e.name.str(), std::move(ch));
  }
  for (const auto& group : groups) {
    GammaGroupRow row;
    for (const auto& layer : group) {
      const auto name = lookup_layer(net, layer);
      if (!name) throw ConfigError("unknown layer name \"" + layer + "\"; valid names: " + valid_layer_names(net));
      row.layers.push_back(layer);
      row.mean_abs_gamma.push_back(mean_abs(net.edge(*name).bn.gamma));
    }
    row.strictly_decreasing = row.mean_abs_gamma.size() >= 2;
    for (std::size_t i = 1; i < row.mean_abs_gamma.size(); ++i) {
      if (!(row.mean_abs_gamma[i - 1] > row.mean_abs_gamma[i])) row.strictly_decreasing = false;
    }
    r.groups.push_back(std::move(row));
  }
  return r;
}

template <RealScalar Scalar>
std::vector<std::vector<std::string>> available_gamma_groups(const SeriesNetwork<Scalar>& net) {
  std::vector<std::vector<std::string>> out;
  for (const auto& group : default_gamma_groups()) {
    std::vector<std::string> kept;
    for (const auto& layer : group) {
      if (lookup_layer(net, layer)) kept.push_back(layer);
    }
    if (kept.size() >= 2) out.push_back(std::move(kept));
  }
  return out;
}

namespace {

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::string joined(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? std::string(1, sep) : std::string()) + parts[i];
  return out;
}

}  // namespace

void write_gamma_report(const fs::path& dir, const GammaReport& report) {
  fs::create_directories(dir);
  {
    auto out = open_csv(dir / "gamma_summary.csv");
    out << "layer,mean_abs_gamma\n";
    for (const auto& [layer, v] : report.layer_mean_abs) out << layer << ',' << format_double(v) << '\n';
  }
  {
    auto out = open_csv(dir / "gamma_channels.csv");
    out << "layer,channel,gamma\n";
    for (const auto& [layer, ch] : report.channels) {
      for (std::size_t c = 0; c < ch.size(); ++c) out << layer << ',' << c << ',' << format_double(ch[c]) << '\n';
    }
  }
  {
    auto out = open_csv(dir / "gamma_groups.csv");
    out << "group,layer,mean_abs_gamma,strictly_decreasing\n";
    for (const auto& g : report.groups) {
      const std::string id = joined(g.layers, '|');
      for (std::size_t i = 0; i < g.layers.size(); ++i) {
        out << id << ',' << g.layers[i] << ',' << format_double(g.mean_abs_gamma[i]) << ','
            << (g.strictly_decreasing ? 1 : 0) << '\n';
      }
    }
  }
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
  auto out = open_csv(path);
  out << "run_id,regime,stage,step,lr,train_loss,train_acc,test_acc,gap,wall_time_s\n";
  for (const auto& r : rows) {
    out << r.run_id << ',' << r.regime << ',' << r.stage << ',' << r.step << ',' << format_double(r.lr) << ','
        << format_double(r.train_loss) << ',' << format_double(r.train_acc) << ',' << format_double(r.test_acc) << ','
        << format_double(r.gap) << ',' << format_double(r.wall_time_s) << '\n';
  }
}

void write_comparison(const fs::path& path, const std::vector<RungResult>& s2c, const std::vector<RungResult>& e2e) {
  auto out = open_csv(path);
  out << "lr,e2e_train,e2e_test,e2e_gap,s2c_train,s2c_test,s2c_gap,rung,test_delta,delta_sign\n";
  const std::size_t n = std::min(s2c.size(), e2e.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = s2c[i];
    const auto& b = e2e[i];
    const double delta = a.test_acc - b.test_acc;
    out << format_double(a.lr) << ',' << format_double(b.train_acc) << ',' << format_double(b.test_acc) << ','
        << format_double(b.gap) << ',' << format_double(a.train_acc) << ',' << format_double(a.test_acc) << ','
        << format_double(a.gap) << ',' << a.rung << ',' << format_double(delta) << ','
        << (delta > 0 ? "+" : delta < 0 ? "-" : "0") << '\n';
  }
}

std::vector<RungResult> read_rungs_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "run_id,rung,lr,end_step,train_acc,test_acc,gap") throw DataError(path.string() + ": unexpected header");
  std::vector<RungResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw DataError(path.string() + ": malformed row \"" + line + "\"");
    try {
      out.push_back({std::stoi(f[1]), std::stod(f[2]), std::stoll(f[3]), std::stod(f[4]), std::stod(f[5]),
                     std::stod(f[6])});
    } catch (const std::exception&) {
      throw DataError(path.string() + ": malformed row \"" + line + "\"");
    }
  }
  return out;
}

std::uint64_t growth_seed(std::uint64_t seed, int stage) {
  return derive_seed(derive_seed(seed, streams::growth), static_cast<std::uint64_t>(stage));
}

std::uint64_t probe_seed(std::uint64_t seed, int stage) {
  return derive_seed(derive_seed(seed, streams::probes), static_cast<std::uint64_t>(stage));
}

namespace {

struct LossTraceRow {
  std::int64_t step;
  int stage;
  double lr;
  double loss;
};

// Shared state of one training run.
template <RealScalar Scalar>
class Trainer {
 public:
  Trainer(const TrainConfig& config, const Dataset<Scalar>& data, std::string regime, fs::path out_dir,
          std::ostream* log)
      : config_(config),
        data_(data),
        out_dir_(std::move(out_dir)),
        augment_rng_(derive_seed(config.seed, streams::augment)),
        start_(std::chrono::steady_clock::now()),
        log_(log) {
    config_.check();
    data_.train.check();
    data_.test.check();
    if (data_.train.size() < config_.batch_size) {
      throw ConfigError("data.batch_size (" + std::to_string(config_.batch_size) + ") exceeds the training set size (" +
                        std::to_string(data_.train.size()) + ")");
    }
    result.regime = std::move(regime);
    result.run_id = result.regime + "_seed" + std::to_string(config_.seed);
    sgd.momentum = config_.momentum;
    sgd.weight_decay = config_.weight_decay;
    sgd.lr = config_.lr;
    sgd.decay_all_parameters = config_.decay_all_parameters;
    ema.decay = config_.ema_decay;
    fs::create_directories(out_dir_);
    events_ = open_csv(out_dir_ / "events.csv");
    events_ << "step,event,lr,detail\n";
  }

  SeriesNetwork<Scalar> net;
  SgdState<Scalar> sgd;
  EmaState<Scalar> ema;
  RunResult result;
  std::int64_t step = 0;

  const TrainConfig& config() const { return config_; }
  const Dataset<Scalar>& data() const { return data_; }
  const fs::path& out_dir() const { return out_dir_; }

  ImageGeometry geometry() const {
    const auto& img = data_.train.images;
    return ImageGeometry{img.dim(1), img.dim(2), img.dim(3)};
  }

  void sync() {
    const auto params = net.parameters();
    sgd.sync(params);
    ema.sync(params);
  }

  void event(const std::string& what, double lr, const std::string& detail) {
    events_ << step << ',' << what << ',' << format_double(lr) << ',' << detail << '\n';
    if (log_) *log_ << '[' << result.regime << "] step " << step << ' ' << what << ' ' << detail << std::endl;
  }

  double train_step(double lr, int stage) {
    if (batch_pos_ == epoch_batches_.size()) {
      epoch_batches_ = batch_indices(data_.train.size(),
                                     BatchPlan{config_.batch_size, derive_seed(config_.seed, streams::shuffle), true},
                                     epoch_++);
      batch_pos_ = 0;
    }
    const auto& idx = epoch_batches_[batch_pos_++];
    Batch<Scalar> b = gather_batch(data_.train, std::span<const Index>(idx));
    if (config_.augment) augment_batch(b, augment_rng_);
    auto fr = forward_pass(net, b.images, std::span<const int>(b.labels), Mode::train);
    if (!std::isfinite(fr.loss)) {
      throw NumericError("non-finite training loss at step " + std::to_string(step + 1));
    }
    const auto grads = backward_pass(net, fr.cache, std::span<const int>(b.labels));
    sgd.lr = lr;
    const auto params = net.parameters();
    sgd_momentum_step(params, grads, sgd);
    ema.update(params);
    ++step;
    result.losses.push_back(fr.loss);
    trace_.push_back({step, stage, lr, fr.loss});
    return fr.loss;
  }

  // EMA-parameter evaluation on both splits; one metrics row per step at most.
  MetricsRow evaluate(int stage, double lr) {
    if (!result.metrics.empty() && result.metrics.back().step == step && last_eval_stage_ == stage) {
      return result.metrics.back();
    }
    Evaluation tr, te;
    {
      EmaScope<Scalar> scope(net, &ema);
      tr = evaluate_accuracy(net, data_.train, config_.eval_batch_size);
      te = evaluate_accuracy(net, data_.test, config_.eval_batch_size);
    }
    MetricsRow row;
    row.run_id = result.run_id;
    row.regime = result.regime;
    row.stage = stage;
    row.step = step;
    row.lr = lr;
    row.train_loss = tr.loss;
    row.train_acc = tr.accuracy;
    row.test_acc = te.accuracy;
    row.gap = tr.accuracy - te.accuracy;
    if (config_.record_wall_time) {
      row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    last_eval_stage_ = stage;
    result.metrics.push_back(row);
    if (log_) {
      *log_ << '[' << result.regime << "] stage " << stage << " step " << step << " lr " << format_double(lr)
            << " train_loss " << format_double(tr.loss) << " train_acc " << format_double(tr.accuracy) << " test_acc "
            << format_double(te.accuracy) << std::endl;
    }
    return row;
  }

  // Final-stage evaluations compete for best.s2c.
  void consider_best(const MetricsRow& row) {
    if (row.test_acc > result.best_test_acc) {
      result.best_test_acc = row.test_acc;
      result.best_step = row.step;
      result.best_checkpoint = out_dir_ / "best.s2c";
      save(result.best_checkpoint, row.stage);
      event("best_checkpoint", row.lr, "test_acc=" + format_double(row.test_acc));
    }
  }

  void save(const fs::path& path, int stage) {
    TrainingSnapshot<Scalar> snap;
    snap.net = net;
    snap.ema_shadows = ema.shadow;
    snap.velocities = sgd.velocity;
    snap.step = static_cast<std::uint64_t>(step);
    snap.rng_state = augment_rng_.state();
    snap.metadata = json{{"regime", result.regime},
                         {"run_id", result.run_id},
                         {"stage", stage},
                         {"epoch", epoch_},
                         {"batch_position", batch_pos_},
                         {"config", config_to_json(config_)},
                         {"data", data_.descriptor},
                         {"normalization", data_.stats ? stats_to_json(*data_.stats) : json(nullptr)}};
    if (result.regime == "e2e") {
      snap.metadata["note"] =
          "e2e baseline trains the full grown architecture from standard initialization, not a plain network";
    }
    save_checkpoint(path, snap);
  }

  void run_final_schedule(int stage) {
    const std::int64_t total = config_.steps_final_base_lr + config_.steps_decay_phase;
    const std::int64_t begin = step;
    int rung = 0;
    auto close_rung = [&](double lr) {
      const MetricsRow row = evaluate(stage, lr);
      consider_best(row);
      result.rungs.push_back({rung, lr, step, row.train_acc, row.test_acc, row.gap});
      event("rung_end", lr, "rung=" + std::to_string(rung));
    };
    auto periodic = [&](double lr) {
      if (step % config_.eval_every == 0) consider_best(evaluate(stage, lr));
    };
    event("final_phase", config_.lr, "steps=" + std::to_string(total));

    if (config_.lr_mode == "fixed") {
      const FixedStepSchedule sched{config_.lr, 0.5, config_.steps_final_base_lr, config_.steps_decay_phase,
                                    config_.max_halvings};
      const auto ends = sched.rung_ends();
      for (std::int64_t t = 0; t < total; ++t) {
        const double lr = sched.lr_at(t);
        train_step(lr, stage);
        periodic(lr);
        if (static_cast<std::size_t>(rung) < ends.size() && t == ends[static_cast<std::size_t>(rung)]) {
          close_rung(lr);
          ++rung;
        }
      }
    } else {
      LrSchedule sched;
      sched.base_lr = config_.lr;
      sched.lr = config_.lr;
      sched.window = static_cast<std::size_t>(config_.stagnation_window);
      sched.epsilon = config_.stagnation_epsilon;
      sched.max_halvings = config_.max_halvings;
      sched.enter_final_phase();
      for (std::int64_t t = 0; t < total; ++t) {
        const double lr = sched.lr;
        train_step(lr, stage);
        periodic(lr);
        const std::span<const double> history(result.losses.data() + begin, static_cast<std::size_t>(step - begin));
        const double next = sched.next(history);
        if (next != lr || t + 1 == total) {
          close_rung(lr);
          ++rung;
          if (next != lr) event("lr_halved", next, "halvings=" + std::to_string(sched.halvings));
        }
      }
    }
    result.stages.push_back({stage, step, result.rungs.back().train_acc, result.rungs.back().test_acc});
  }

  void finish() {
    result.final_checkpoint = out_dir_ / "final.s2c";
    save(result.final_checkpoint, net.stage_count());
    result.final_keys = net.parameter_keys();
    result.final_param_count = net.parameter_count();
    event("done", sgd.lr, "steps=" + std::to_string(step));
    events_.flush();

    const auto best = load_checkpoint<Scalar>(result.best_checkpoint);
    result.gamma = gamma_report(best.net, available_gamma_groups(best.net));
    write_gamma_report(out_dir_, result.gamma);

    write_metrics_csv(out_dir_ / "metrics.csv", result.metrics);
    {
      auto out = open_csv(out_dir_ / "stages.csv");
      out << "run_id,stage,step,train_acc,test_acc,gap\n";
      for (const auto& s : result.stages) {
        out << result.run_id << ',' << s.stage << ',' << s.step << ',' << format_double(s.train_acc) << ','
            << format_double(s.test_acc) << ',' << format_double(s.train_acc - s.test_acc) << '\n';
      }
    }
    {
      auto out = open_csv(out_dir_ / "rungs.csv");
      out << "run_id,rung,lr,end_step,train_acc,test_acc,gap\n";
      for (const auto& r : result.rungs) {
        out << result.run_id << ',' << r.rung << ',' << format_double(r.lr) << ',' << r.end_step << ','
            << format_double(r.train_acc) << ',' << format_double(r.test_acc) << ',' << format_double(r.gap) << '\n';
      }
    }
    {
      auto out = open_csv(out_dir_ / "growth.csv");
      out << "stage,step,parent_keys,residual_keys,child_keys,parent_params,residual_params,child_params,"
             "inherited_bitwise,max_abs_logit_diff,preserved,parent_train_acc,child_train_acc,pre_loss_mean,"
             "pre_loss_std,post_loss,continuous,newest_mean_abs_gamma,stop_suggested\n";
      for (const auto& g : result.growth) {
        out << g.stage << ',' << g.step << ',' << g.parent_keys << ',' << g.residual_keys << ',' << g.child_keys << ','
            << g.parent_params << ',' << g.residual_params << ',' << g.child_params << ',' << (g.inherited_bitwise ? 1 : 0)
            << ',' << format_double(g.max_abs_diff) << ',' << (g.preserved ? 1 : 0) << ','
            << format_double(g.parent_train_acc) << ',' << format_double(g.child_train_acc) << ','
            << format_double(g.pre_loss_mean) << ',' << format_double(g.pre_loss_std) << ','
            << format_double(g.post_loss) << ',' << (g.continuous ? 1 : 0) << ','
            << format_double(g.newest_mean_abs_gamma) << ',' << (g.stop_suggested ? 1 : 0) << '\n';
      }
    }
    {
      auto out = open_csv(out_dir_ / "loss_trace.csv");
      out << "step,stage,lr,loss\n";
      for (const auto& r : trace_) {
        out << r.step << ',' << r.stage << ',' << format_double(r.lr) << ',' << format_double(r.loss) << '\n';
      }
    }
  }

 private:
  TrainConfig config_;
  const Dataset<Scalar>& data_;
  fs::path out_dir_;
  SeededRng augment_rng_;
  std::chrono::steady_clock::time_point start_;
  std::ostream* log_;
  std::ofstream events_;
  std::vector<std::vector<Index>> epoch_batches_;
  std::size_t batch_pos_ = 0;
  std::uint64_t epoch_ = 0;
  int last_eval_stage_ = -1;
  std::vector<LossTraceRow> trace_;
};

template <RealScalar Scalar>
SeriesNetwork<Scalar> initial_network(const Trainer<Scalar>& t) {
  SeededRng init(derive_seed(t.config().seed, streams::init));
  return build_plain_network<Scalar>(t.config().plain_plan(), t.geometry(), t.data().train.classes, init,
                                     static_cast<Scalar>(t.config().bn_decay));
}

std::pair<double, double> tail_moments(const std::vector<double>& losses, std::size_t window) {
  const std::size_t n = std::min(window, losses.size());
  if (n == 0) return {0.0, 0.0};
  double mean = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) mean += losses[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) var += (losses[i] - mean) * (losses[i] - mean);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

// Grows t.net by one stage and records accounting, preservation and the stop signal.
template <RealScalar Scalar>
void grow_stage(Trainer<Scalar>& t) {
  const TrainConfig& c = t.config();
  GrowthRecord rec;
  if (t.net.stage_count() >= 1) {
    const StopDecision stop = growth_stop_criterion(t.net, c.stop_threshold);
    rec.newest_mean_abs_gamma = stop.newest_mean_abs_gamma;
    rec.stop_suggested = stop.stop;
  } else {
    rec.newest_mean_abs_gamma = std::numeric_limits<double>::quiet_NaN();
  }

  const GrowthPlan plan = plan_growth(t.net);
  SeededRng grng(growth_seed(c.seed, plan.stage));
  SeriesNetwork<Scalar> child = apply_growth(t.net, plan, grng, BranchInit::function_preserving);

  // Double precision must reproduce the parent exactly.
  const double tol = std::is_same_v<Scalar, double> ? 0.0 : c.preservation_tol;
  SeededRng prng(probe_seed(c.seed, plan.stage));
  const PreservationReport rep = verify_preservation(t.net, child, c.probe_batches, prng, tol, c.probe_batch_size);

  const auto parent_params = std::as_const(t.net).parameters();
  const auto child_params = std::as_const(child).parameters();
  rec.stage = plan.stage;
  rec.step = t.step;
  rec.parent_keys = parent_params.size();
  rec.child_keys = child_params.size();
  rec.parent_params = t.net.parameter_count();
  rec.child_params = child.parameter_count();
  rec.inherited_bitwise = true;
  for (const auto& [key, tensor] : parent_params) {
    const auto it = child_params.find(key);
    if (it == child_params.end() || !(*it->second == *tensor)) rec.inherited_bitwise = false;
  }
  for (const auto& e : t.net.edges()) {
    const auto& ce = child.edge(e.name);
    if (!(ce.bn.running_mean == e.bn.running_mean) || !(ce.bn.running_var == e.bn.running_var)) {
      rec.inherited_bitwise = false;
    }
  }
  for (const auto& [key, tensor] : child_params) {
    if (!parent_params.count(key)) {
      ++rec.residual_keys;
      rec.residual_params += tensor->size();
    }
  }
  rec.max_abs_diff = rep.max_abs_diff;
  rec.preserved = rep.pass;
  rec.parent_train_acc = evaluate_accuracy(t.net, t.data().train, c.eval_batch_size).accuracy;
  rec.child_train_acc = evaluate_accuracy(child, t.data().train, c.eval_batch_size).accuracy;
  std::tie(rec.pre_loss_mean, rec.pre_loss_std) =
      tail_moments(t.result.losses, static_cast<std::size_t>(c.continuity_window));

  if (!rep.pass) {
    t.save(t.out_dir() / ("failed_growth_parent_" + std::to_string(plan.stage) + ".s2c"), t.net.stage_count());
    t.net = std::move(child);
    t.sync();
    t.save(t.out_dir() / ("failed_growth_child_" + std::to_string(plan.stage) + ".s2c"), plan.stage);
    throw PreservationError("growth to stage " + std::to_string(plan.stage) + " changed the network function: max |logit diff| " +
                            format_double(rep.max_abs_diff) + " > " + format_double(tol));
  }
  t.net = std::move(child);
  t.sync();
  t.event("growth", c.lr,
          "stage=" + std::to_string(plan.stage) + " layers=" + std::to_string(plan.new_layer_count()) +
              " max_abs_diff=" + format_double(rep.max_abs_diff));
  t.result.growth.push_back(rec);
}

}  // namespace

template <RealScalar Scalar>
RunResult run_s2c(const TrainConfig& config, const Dataset<Scalar>& data, const fs::path& out_dir, std::ostream* log) {
  Trainer<Scalar> t(config, data, "s2c", out_dir, log);
  t.net = initial_network(t);
  t.sync();
  for (int stage = 0; stage < config.stages; ++stage) {
    for (std::int64_t k = 0; k < config.steps_per_growth; ++k) {
      const double loss = t.train_step(config.lr, stage);
      if (k == 0 && !t.result.growth.empty()) {
        auto& g = t.result.growth.back();
        g.post_loss = loss;
        g.continuous = std::abs(loss - g.pre_loss_mean) <= 10.0 * g.pre_loss_std;
      }
      if (t.step % config.eval_every == 0) t.evaluate(stage, config.lr);
    }
    const MetricsRow row = t.evaluate(stage, config.lr);
    t.result.stages.push_back({stage, t.step, row.train_acc, row.test_acc});
    t.save(out_dir / ("stage_" + std::to_string(stage) + ".s2c"), stage);
    grow_stage(t);
  }
  // First step of the final stage closes the last growth record.
  const std::size_t before = t.result.losses.size();
  if (!t.result.growth.empty()) {
    const std::size_t growth_index = t.result.growth.size() - 1;
    t.run_final_schedule(config.stages);
    auto& g = t.result.growth[growth_index];
    g.post_loss = t.result.losses[before];
    g.continuous = std::abs(g.post_loss - g.pre_loss_mean) <= 10.0 * g.pre_loss_std;
  } else {
    t.run_final_schedule(config.stages);
  }
  if (t.net.stage_count() >= 1) {
    const StopDecision stop = growth_stop_criterion(t.net, config.stop_threshold);
    t.event("stop_criterion", t.sgd.lr,
            "newest_mean_abs_gamma=" + format_double(stop.newest_mean_abs_gamma) + " stop=" + (stop.stop ? "1" : "0"));
  }
  t.finish();
  return t.result;
}

template <RealScalar Scalar>
RunResult run_e2e(const TrainConfig& config, const Dataset<Scalar>& data, const fs::path& out_dir, std::ostream* log) {
  Trainer<Scalar> t(config, data, "e2e", out_dir, log);
  t.net = initial_network(t);
  for (int stage = 0; stage < config.stages; ++stage) {
    const GrowthPlan plan = plan_growth(t.net);
    SeededRng grng(growth_seed(config.seed, plan.stage));
    t.net = apply_growth(t.net, plan, grng, BranchInit::standard);
  }
  t.sync();
  t.event("architecture", config.lr,
          "stages=" + std::to_string(t.net.stage_count()) + " layers=" + std::to_string(t.net.edges().size()));
  t.run_final_schedule(config.stages);
  t.finish();
  return t.result;
}

#define S2C_INSTANTIATE(S)                                                                                    \
  template Dataset<S> prepare_dataset<S>(const TrainConfig&, const std::optional<NormalizationStats>&);       \
  template Evaluation evaluate_accuracy(const SeriesNetwork<S>&, const LabeledImageSet<S>&, Index);           \
  template GammaReport gamma_report(const SeriesNetwork<S>&, const std::vector<std::vector<std::string>>&);   \
  template std::vector<std::vector<std::string>> available_gamma_groups(const SeriesNetwork<S>&);             \
  template RunResult run_s2c<S>(const TrainConfig&, const Dataset<S>&, const fs::path&, std::ostream*);       \
  template RunResult run_e2e<S>(const TrainConfig&, const Dataset<S>&, const fs::path&, std::ostream*);

S2C_INSTANTIATE(float)
S2C_INSTANTIATE(double)

#undef S2C_INSTANTIATE

}  // namespace s2c

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "s2c/config.hpp"
#include "s2c/data.hpp"
#include "s2c/growth.hpp"
#include "s2c/optimizer.hpp"
#include "s2c/series_graph.hpp"

namespace s2c {

template <RealScalar Scalar>
struct Dataset {
  LabeledImageSet<Scalar> train;
  LabeledImageSet<Scalar> test;
  std::optional<NormalizationStats> stats;  // set when normalization was applied
  nlohmann::json descriptor = nlohmann::json::object();
};

// Loads (or synthesizes) both splits, subsets the training split and applies
// per-channel normalization computed on the training subset unless `stats` is given.
template <RealScalar Scalar>
Dataset<Scalar> prepare_dataset(const TrainConfig& config, const std::optional<NormalizationStats>& stats = {});

nlohmann::json stats_to_json(const NormalizationStats& stats);
NormalizationStats stats_from_json(const nlohmann::json& j);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  Index correct = 0;
  Index count = 0;
};

// Eval-mode pass over the set in index order.
template <RealScalar Scalar>
Evaluation evaluate_accuracy(const SeriesNetwork<Scalar>& net, const LabeledImageSet<Scalar>& set,
                             Index batch_size = 256);

struct MetricsRow {
  std::string run_id;
  std::string regime;
  int stage = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double gap = 0.0;
  double wall_time_s = 0.0;
};

struct StageResult {
  int stage = 0;
  std::int64_t step = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
};

struct RungResult {
  int rung = 0;
  double lr = 0.0;
  std::int64_t end_step = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double gap = 0.0;
};

struct GrowthRecord {
  int stage = 0;  // stage produced by the growth
  std::int64_t step = 0;
  std::size_t parent_keys = 0;
  std::size_t residual_keys = 0;
  std::size_t child_keys = 0;
  Index parent_params = 0;
  Index residual_params = 0;
  Index child_params = 0;
  bool inherited_bitwise = false;
  double max_abs_diff = 0.0;
  bool preserved = false;
  double parent_train_acc = 0.0;  // eval mode, live parameters
  double child_train_acc = 0.0;
  double pre_loss_mean = 0.0;  // over the last continuity_window batch losses
  double pre_loss_std = 0.0;
  double post_loss = 0.0;  // first batch loss after growth
  bool continuous = false;  // |post - pre_mean| <= 10 * pre_std
  double newest_mean_abs_gamma = 0.0;
  bool stop_suggested = false;
};

struct GammaGroupRow {
  std::vector<std::string> layers;
  std::vector<double> mean_abs_gamma;
  bool strictly_decreasing = false;
};

struct GammaReport {
  std::vector<std::pair<std::string, double>> layer_mean_abs;  // every layer, edge order
  std::vector<std::pair<std::string, std::vector<double>>> channels;
  std::vector<GammaGroupRow> groups;
};

struct RunResult {
  std::string regime;
  std::string run_id;
  std::vector<MetricsRow> metrics;
  std::vector<StageResult> stages;
  std::vector<RungResult> rungs;
  std::vector<GrowthRecord> growth;
  std::vector<double> losses;  // one per optimizer step
  std::vector<std::string> final_keys;
  Index final_param_count = 0;
  double best_test_acc = -1.0;
  std::int64_t best_step = -1;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  GammaReport gamma;
};

// Layer groups tracked across stages by the gamma report.
std::vector<std::vector<std::string>> default_gamma_groups();

// Per-layer mean |gamma| and per-channel gammas; groups naming unknown layers
// throw ConfigError listing the valid names.
template <RealScalar Scalar>
GammaReport gamma_report(const SeriesNetwork<Scalar>& net, const std::vector<std::vector<std::string>>& groups);

// Keeps only default groups whose layers all exist in `net`.
template <RealScalar Scalar>
std::vector<std::vector<std::string>> available_gamma_groups(const SeriesNetwork<Scalar>& net);

void write_gamma_report(const std::filesystem::path& dir, const GammaReport& report);

// s2c regime: train N_s0, grow with function-preserving paths, train, ...;
// the last stage runs the final base-rate and decay schedule. Outputs go to out_dir.
template <RealScalar Scalar>
RunResult run_s2c(const TrainConfig& config, const Dataset<Scalar>& data, const std::filesystem::path& out_dir,
                  std::ostream* log = nullptr);

// end2end: builds the final s2c architecture with standard initialization and
// trains it on the final-stage schedule only.
template <RealScalar Scalar>
RunResult run_e2e(const TrainConfig& config, const Dataset<Scalar>& data, const std::filesystem::path& out_dir,
                  std::ostream* log = nullptr);

// Per-rung comparison of the two regimes, one row per learning-rate rung:
// lr, e2e_train, e2e_test, e2e_gap, s2c_train, s2c_test, s2c_gap, rung, test_delta, delta_sign
void write_comparison(const std::filesystem::path& path, const std::vector<RungResult>& s2c,
                      const std::vector<RungResult>& e2e);
std::vector<RungResult> read_rungs_csv(const std::filesystem::path& path);

// Sub-seeds for the growth of `stage` (new-layer init) and its preservation probes.
std::uint64_t growth_seed(std::uint64_t seed, int stage);
std::uint64_t probe_seed(std::uint64_t seed, int stage);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

// Shortest round-trip decimal form; keeps CSVs bitwise-stable.
std::string format_double(double v);

}  // namespace s2c

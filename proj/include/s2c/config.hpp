#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "s2c/data.hpp"
#include "s2c/series_graph.hpp"

namespace s2c {

// Every hyperparameter of a run. Defaults are the scaled desk budgets; the
// full-length budgets (60000 / 80000 / 40000 steps) are available through config.
struct TrainConfig {
  std::uint64_t seed = 1;
  Precision precision = Precision::single;

  // model
  int stages = 2;
  std::vector<Index> filters{8, 8, 16, 16, 32, 32};
  std::vector<Index> kernels{5, 5, 5, 5, 5, 5};
  std::vector<Index> strides{1, 1, 2, 1, 2, 1};

  // schedule
  std::int64_t steps_per_growth = 2000;
  std::int64_t steps_final_base_lr = 3000;
  std::int64_t steps_decay_phase = 2000;
  std::string lr_mode = "fixed";  // "fixed" | "stagnation"
  std::int64_t stagnation_window = 1000;
  double stagnation_epsilon = 1e-3;
  int max_halvings = 4;

  // optimizer
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  bool decay_all_parameters = true;
  double ema_decay = 0.9999;
  double bn_decay = 0.9999;

  // growth
  double stop_threshold = 0.01;
  double preservation_tol = 1e-5;
  int probe_batches = 16;
  Index probe_batch_size = 8;

  // data
  std::string source = "cifar10";  // "cifar10" | "synthetic"
  std::string data_dir;
  Index subset_size = 10000;  // 0 keeps the whole training split
  Index test_subset_size = 0;
  Index batch_size = 128;
  bool augment = false;
  bool normalize = true;
  SyntheticSpec synthetic{2, 64, 8, 0.0};
  Index synthetic_test_per_class = 32;

  // run
  std::int64_t eval_every = 500;
  Index eval_batch_size = 256;
  bool record_wall_time = true;
  std::int64_t continuity_window = 100;

  PlainPlan plain_plan() const;
  void check() const;
};

nlohmann::json default_config_json();
nlohmann::json config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const nlohmann::json& j);

// Overlays `overlay` onto `base`; every overlay key must already exist in base
// with a compatible type. Errors name the offending dotted key.
nlohmann::json merge_strict(nlohmann::json base, const nlohmann::json& overlay);

// "a.b.c=value"; value is parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Synthetic preset used by synth-demo: small, noise-free, minutes on one core.
nlohmann::json synth_demo_config_json();

}  // namespace s2c

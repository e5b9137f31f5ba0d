#include "s2c/config.hpp"

#include <set>

#include "s2c/errors.hpp"

namespace s2c {

using nlohmann::json;

namespace {

std::string precision_text(Precision p) { return p == Precision::double_ ? "double" : "single"; }

Precision parse_precision(const std::string& text) {
  if (text == "single" || text == "float") return Precision::single;
  if (text == "double") return Precision::double_;
  throw ConfigError("precision: expected \"single\" or \"double\", got \"" + text + "\"");
}

std::string type_label(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number_float()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

// An integer literal may fill a float slot; nothing else converts.
bool compatible(const json& base, const json& value) {
  if (base.is_number_float()) return value.is_number();
  if (base.is_number_unsigned()) return value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  if (base.is_number_integer()) return value.is_number_integer();
  if (base.is_boolean()) return value.is_boolean();
  if (base.is_string()) return value.is_string();
  if (base.is_array()) return value.is_array();
  if (base.is_object()) return value.is_object();
  return false;
}

void merge_into(json& base, const json& overlay, const std::string& prefix) {
  if (!overlay.is_object()) throw ConfigError((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
    json& slot = base[it.key()];
    if (!compatible(slot, it.value())) {
      throw ConfigError("config key " + key + ": expected " + type_label(slot) + ", got " + type_label(it.value()));
    }
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
    } else if (slot.is_number_float()) {
      slot = it.value().get<double>();
    } else {
      slot = it.value();
    }
  }
}

std::vector<Index> index_list(const json& j, const char* key) {
  std::vector<Index> out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ConfigError(std::string("config key ") + key + ": expected a list of integers");
    out.push_back(v.get<Index>());
  }
  return out;
}

}  // namespace

PlainPlan TrainConfig::plain_plan() const { return PlainPlan::from_lists(filters, kernels, strides); }

void TrainConfig::check() const {
  auto require = [](bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
  };
  require(stages >= 0, "model.stages must be >= 0");
  require(!filters.empty() && filters.size() == kernels.size() && filters.size() == strides.size(),
          "model.filters, model.kernels and model.strides must be non-empty and of equal length");
  require(steps_per_growth >= 1, "schedule.steps_per_growth must be >= 1");
  require(steps_final_base_lr >= 1, "schedule.steps_final_base_lr must be >= 1");
  require(steps_decay_phase >= 0, "schedule.steps_decay_phase must be >= 0");
  require(lr_mode == "fixed" || lr_mode == "stagnation", "schedule.mode must be \"fixed\" or \"stagnation\"");
  require(stagnation_window >= 1, "schedule.stagnation_window must be >= 1");
  require(stagnation_epsilon >= 0.0, "schedule.stagnation_epsilon must be >= 0");
  require(max_halvings >= 0, "schedule.max_halvings must be >= 0");
  require(steps_decay_phase == 0 || steps_decay_phase >= max_halvings,
          "schedule.steps_decay_phase must be 0 or at least schedule.max_halvings");
  require(lr > 0.0, "optimizer.lr must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, "optimizer.momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "optimizer.weight_decay must be >= 0");
  require(ema_decay >= 0.0 && ema_decay < 1.0, "optimizer.ema_decay must be in [0, 1)");
  require(bn_decay >= 0.0 && bn_decay < 1.0, "optimizer.bn_decay must be in [0, 1)");
  require(stop_threshold >= 0.0, "growth.stop_threshold must be >= 0");
  require(preservation_tol >= 0.0, "growth.preservation_tol must be >= 0");
  require(probe_batches >= 1 && probe_batch_size >= 1, "growth.probe_batches and growth.probe_batch_size must be >= 1");
  require(source == "cifar10" || source == "synthetic", "data.source must be \"cifar10\" or \"synthetic\"");
  require(subset_size >= 0 && test_subset_size >= 0, "data.subset_size and data.test_subset_size must be >= 0");
  require(batch_size >= 1, "data.batch_size must be >= 1");
  require(synthetic.classes >= 2 && synthetic.per_class >= 1 && synthetic.size >= 1 && synthetic.noise >= 0.0,
          "data.synthetic: classes >= 2, per_class >= 1, size >= 1, noise >= 0");
  require(synthetic_test_per_class >= 1, "data.synthetic.test_per_class must be >= 1");
  require(eval_every >= 1, "run.eval_every must be >= 1");
  require(eval_batch_size >= 1, "run.eval_batch_size must be >= 1");
  require(continuity_window >= 2, "run.continuity_window must be >= 2");
  plain_plan();
}

json config_to_json(const TrainConfig& c) {
  return json{
      {"seed", c.seed},
      {"precision", precision_text(c.precision)},
      {"model", {{"stages", c.stages}, {"filters", c.filters}, {"kernels", c.kernels}, {"strides", c.strides}}},
      {"schedule",
       {{"steps_per_growth", c.steps_per_growth},
        {"steps_final_base_lr", c.steps_final_base_lr},
        {"steps_decay_phase", c.steps_decay_phase},
        {"mode", c.lr_mode},
        {"stagnation_window", c.stagnation_window},
        {"stagnation_epsilon", c.stagnation_epsilon},
        {"max_halvings", c.max_halvings}}},
      {"optimizer",
       {{"lr", c.lr},
        {"momentum", c.momentum},
        {"weight_decay", c.weight_decay},
        {"decay_all_parameters", c.decay_all_parameters},
        {"ema_decay", c.ema_decay},
        {"bn_decay", c.bn_decay}}},
      {"growth",
       {{"stop_threshold", c.stop_threshold},
        {"preservation_tol", c.preservation_tol},
        {"probe_batches", c.probe_batches},
        {"probe_batch_size", c.probe_batch_size}}},
      {"data",
       {{"source", c.source},
        {"dir", c.data_dir},
        {"subset_size", c.subset_size},
        {"test_subset_size", c.test_subset_size},
        {"batch_size", c.batch_size},
        {"augment", c.augment},
        {"normalize", c.normalize},
        {"synthetic",
         {{"classes", c.synthetic.classes},
          {"per_class", c.synthetic.per_class},
          {"test_per_class", c.synthetic_test_per_class},
          {"size", c.synthetic.size},
          {"noise", c.synthetic.noise}}}}},
      {"run",
       {{"eval_every", c.eval_every},
        {"eval_batch_size", c.eval_batch_size},
        {"record_wall_time", c.record_wall_time},
        {"continuity_window", c.continuity_window}}},
  };
}

json default_config_json() { return config_to_json(TrainConfig{}); }

TrainConfig config_from_json(const json& input) {
  // Validate shape and types against the defaults before reading.
  const json j = merge_strict(default_config_json(), input);
  TrainConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.precision = parse_precision(j.at("precision").get<std::string>());
    const json& m = j.at("model");
    c.stages = m.at("stages").get<int>();
    c.filters = index_list(m.at("filters"), "model.filters");
    c.kernels = index_list(m.at("kernels"), "model.kernels");
    c.strides = index_list(m.at("strides"), "model.strides");
    const json& s = j.at("schedule");
    c.steps_per_growth = s.at("steps_per_growth").get<std::int64_t>();
    c.steps_final_base_lr = s.at("steps_final_base_lr").get<std::int64_t>();
    c.steps_decay_phase = s.at("steps_decay_phase").get<std::int64_t>();
    c.lr_mode = s.at("mode").get<std::string>();
    c.stagnation_window = s.at("stagnation_window").get<std::int64_t>();
    c.stagnation_epsilon = s.at("stagnation_epsilon").get<double>();
    c.max_halvings = s.at("max_halvings").get<int>();
    const json& o = j.at("optimizer");
    c.lr = o.at("lr").get<double>();
    c.momentum = o.at("momentum").get<double>();
    c.weight_decay = o.at("weight_decay").get<double>();
    c.decay_all_parameters = o.at("decay_all_parameters").get<bool>();
    c.ema_decay = o.at("ema_decay").get<double>();
    c.bn_decay = o.at("bn_decay").get<double>();
    const json& g = j.at("growth");
    c.stop_threshold = g.at("stop_threshold").get<double>();
    c.preservation_tol = g.at("preservation_tol").get<double>();
    c.probe_batches = g.at("probe_batches").get<int>();
    c.probe_batch_size = g.at("probe_batch_size").get<Index>();
    const json& d = j.at("data");
    c.source = d.at("source").get<std::string>();
    c.data_dir = d.at("dir").get<std::string>();
    c.subset_size = d.at("subset_size").get<Index>();
    c.test_subset_size = d.at("test_subset_size").get<Index>();
    c.batch_size = d.at("batch_size").get<Index>();
    c.augment = d.at("augment").get<bool>();
    c.normalize = d.at("normalize").get<bool>();
    const json& sy = d.at("synthetic");
    c.synthetic.classes = sy.at("classes").get<Index>();
    c.synthetic.per_class = sy.at("per_class").get<Index>();
    c.synthetic_test_per_class = sy.at("test_per_class").get<Index>();
    c.synthetic.size = sy.at("size").get<Index>();
    c.synthetic.noise = sy.at("noise").get<double>();
    const json& r = j.at("run");
    c.eval_every = r.at("eval_every").get<std::int64_t>();
    c.eval_batch_size = r.at("eval_batch_size").get<Index>();
    c.record_wall_time = r.at("record_wall_time").get<bool>();
    c.continuity_window = r.at("continuity_window").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.check();
  return c;
}

json merge_strict(json base, const json& overlay) {
  merge_into(base, overlay, "");
  return base;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json overlay = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("override has an empty key segment: " + path);
    overlay = json{{*it, overlay}};
  }
  config = merge_strict(std::move(config), overlay);
}

json synth_demo_config_json() {
  TrainConfig c;
  c.source = "synthetic";
  c.synthetic = SyntheticSpec{4, 32, 8, 0.0};
  c.synthetic_test_per_class = 16;
  c.subset_size = 0;
  c.batch_size = 32;
  c.steps_per_growth = 150;
  c.steps_final_base_lr = 200;
  c.steps_decay_phase = 100;
  c.eval_every = 50;
  c.ema_decay = 0.9;
  c.bn_decay = 0.9;
  c.continuity_window = 50;
  return config_to_json(c);
}

}  // namespace s2c

#include "imdiff/config.hpp"

#include "imdiff/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace imdiff {

using json = nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCategory::config, where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw Error(ErrorCategory::config, "unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCategory::config, "config key '" + where + "." + key + "' has the wrong type");
  }
}

template <typename T, typename Parse>
void read_enum(const json& j, const char* key, T& dst, const std::string& where, Parse parse) {
  std::string s;
  read(j, key, s, where);
  if (!s.empty()) dst = parse(s);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (window < 2) throw Error(ErrorCategory::config, "window must be >= 2");
  if (schedule.steps < 1) throw Error(ErrorCategory::config, "schedule.steps must be >= 1");
  if (!(schedule.beta_min > 0.0) || !(schedule.beta_max < 1.0) || schedule.beta_min > schedule.beta_max)
    throw Error(ErrorCategory::config, "schedule betas must satisfy 0 < beta_min <= beta_max < 1");
  if (mask.n_masked < 1 || mask.n_unmasked < 1) throw Error(ErrorCategory::config, "mask segment counts must be >= 1");
  if (!(mask.miss_prob > 0.0 && mask.miss_prob < 1.0))
    throw Error(ErrorCategory::config, "mask.miss_prob must be in (0,1)");
  const MaskScheme scheme = variant_spec(mode).scheme;
  if (scheme == MaskScheme::grating) grating_masks<double>(window, 1, mask.n_masked, mask.n_unmasked);
  if (scheme == MaskScheme::forecasting && window % 2 != 0)
    throw Error(ErrorCategory::config, "forecasting needs an even window, got " + std::to_string(window));
  train.validate();
  ensemble.validate(schedule.steps);
  if (!(ensemble.tau_quantile > 0.0 && ensemble.tau_quantile < 1.0))
    throw Error(ErrorCategory::config, "ensemble.tau_quantile must be in (0,1)");
  if (seeds.empty()) throw Error(ErrorCategory::config, "seeds must not be empty");
  if (workers < 1) throw Error(ErrorCategory::config, "workers must be >= 1");
  DenoiserConfig m = model;
  m.steps = schedule.steps;
  m.validate();
}

std::string ExperimentConfig::name() const {
  if (!dataset_name.empty()) return dataset_name;
  const auto n = dataset.lexically_normal().filename().string();
  return n.empty() ? dataset.lexically_normal().parent_path().filename().string() : n;
}

std::string to_json_string(const ExperimentConfig& c) {
  json j;
  j["dataset"] = {{"path", c.dataset.string()}, {"name", c.dataset_name}};
  j["window"] = c.window;
  j["mask"] = {{"n_masked", c.mask.n_masked}, {"n_unmasked", c.mask.n_unmasked}, {"miss_prob", c.mask.miss_prob}};
  j["schedule"] = {{"steps", c.schedule.steps},
                   {"beta_min", c.schedule.beta_min},
                   {"beta_max", c.schedule.beta_max},
                   {"shape", std::string(to_string(c.schedule.shape))}};
  j["model"] = {{"n_blocks", c.model.n_blocks},
                {"hidden_dim", c.model.hidden_dim},
                {"n_heads", c.model.n_heads},
                {"step_embed_dim", c.model.step_embed_dim},
                {"feature_embed_dim", c.model.feature_embed_dim},
                {"time_embed_dim", c.model.time_embed_dim},
                {"ff_dim", c.model.ff_dim}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"lr_milestones", c.train.lr_decay.milestones},
                {"lr_factor", c.train.lr_decay.factor},
                {"stride", c.train.train_stride}};
  j["ensemble"] = {{"tau_quantile", c.ensemble.tau_quantile},
                   {"xi", c.ensemble.xi},
                   {"vote_steps", c.ensemble.vote_steps}};
  j["mode"] = std::string(to_string(c.mode));
  j["seeds"] = c.seeds;
  j["workers"] = c.workers;
  j["out"] = c.out.string();
  j["plot"] = c.plot;
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCategory::config, std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  reject_unknown(j, {"dataset", "window", "mask", "schedule", "model", "train", "ensemble", "mode", "seeds",
                     "workers", "out", "plot"},
                 "");
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    reject_unknown(d, {"path", "name"}, "dataset");
    std::string path;
    read(d, "path", path, "dataset");
    c.dataset = path;
    read(d, "name", c.dataset_name, "dataset");
  }
  read(j, "window", c.window, "");
  if (j.contains("mask")) {
    const json& m = j["mask"];
    reject_unknown(m, {"n_masked", "n_unmasked", "miss_prob"}, "mask");
    read(m, "n_masked", c.mask.n_masked, "mask");
    read(m, "n_unmasked", c.mask.n_unmasked, "mask");
    read(m, "miss_prob", c.mask.miss_prob, "mask");
  }
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    reject_unknown(s, {"steps", "beta_min", "beta_max", "shape"}, "schedule");
    read(s, "steps", c.schedule.steps, "schedule");
    read(s, "beta_min", c.schedule.beta_min, "schedule");
    read(s, "beta_max", c.schedule.beta_max, "schedule");
    read_enum(s, "shape", c.schedule.shape, "schedule", [](const std::string& v) { return schedule_shape_from_string(v); });
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown(m, {"n_blocks", "hidden_dim", "n_heads", "step_embed_dim", "feature_embed_dim", "time_embed_dim", "ff_dim"},
                   "model");
    read(m, "n_blocks", c.model.n_blocks, "model");
    read(m, "hidden_dim", c.model.hidden_dim, "model");
    read(m, "n_heads", c.model.n_heads, "model");
    read(m, "step_embed_dim", c.model.step_embed_dim, "model");
    read(m, "feature_embed_dim", c.model.feature_embed_dim, "model");
    read(m, "time_embed_dim", c.model.time_embed_dim, "model");
    read(m, "ff_dim", c.model.ff_dim, "model");
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, {"epochs", "batch_size", "learning_rate", "lr_milestones", "lr_factor", "stride"}, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "lr_milestones", c.train.lr_decay.milestones, "train");
    read(t, "lr_factor", c.train.lr_decay.factor, "train");
    read(t, "stride", c.train.train_stride, "train");
  }
  bool explicit_votes = false;
  if (j.contains("ensemble")) {
    const json& e = j["ensemble"];
    reject_unknown(e, {"tau_quantile", "xi", "vote_steps"}, "ensemble");
    read(e, "tau_quantile", c.ensemble.tau_quantile, "ensemble");
    read(e, "xi", c.ensemble.xi, "ensemble");
    explicit_votes = e.contains("vote_steps");
    read(e, "vote_steps", c.ensemble.vote_steps, "ensemble");
  }
  if (!explicit_votes) c.ensemble.vote_steps = EnsembleConfig::default_vote_steps(c.schedule.steps);
  read_enum(j, "mode", c.mode, "", [](const std::string& v) { return variant_from_string(v); });
  read(j, "seeds", c.seeds, "");
  read(j, "workers", c.workers, "");
  std::string out;
  read(j, "out", out, "");
  if (!out.empty()) c.out = out;
  read(j, "plot", c.plot, "");
  c.model.steps = c.schedule.steps;
  return c;
}

EnvMap collect_env(const char* const* envp) {
  EnvMap env;
  for (; envp && *envp; ++envp) {
    const std::string_view entry(*envp);
    const auto eq = entry.find('=');
    if (eq == std::string_view::npos || !entry.starts_with(kEnvPrefix)) continue;
    env.emplace(std::string(entry.substr(0, eq)), std::string(entry.substr(eq + 1)));
  }
  return env;
}

std::string apply_env_overrides(const std::string& json_text, const EnvMap& env) {
  json j = json_text.empty() ? json::object() : json::parse(json_text, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCategory::config, "config is not valid JSON");
  for (const auto& [name, raw] : env) {
    if (!name.starts_with(kEnvPrefix)) continue;
    std::string key = name.substr(kEnvPrefix.size());
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (key.empty()) continue;
    std::vector<std::string> path;
    for (std::size_t pos = 0;;) {
      const auto next = key.find("__", pos);
      path.push_back(key.substr(pos, next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json* node = &j;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      if (!node->contains(path[i])) (*node)[path[i]] = json::object();
      node = &(*node)[path[i]];
      if (!node->is_object()) throw Error(ErrorCategory::config, "environment override " + name + " targets a non-object");
    }
    (*node)[path.back()] = value;
  }
  return j.dump();
}

ExperimentConfig load_config(const std::filesystem::path& path, const EnvMap& env) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCategory::io, "cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return config_from_json_string(apply_env_overrides(text, env));
}

}  // namespace imdiff

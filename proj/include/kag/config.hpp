#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kag/tensor.hpp"

namespace kag {

// Experiment knobs. Defaults follow the reference hyperparameter setting
// (lr 1e-3, T 5, gamma 0.1, top-30, 50 epochs, unit loss weights).
struct RunConfig {
  uint64_t seed = 0;
  int epochs = 50;
  double lr = 1e-3;
  int batch_size = 8;
  int T = 5;
  double gamma = 0.1;
  int top_k = 30;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  int shots = 1;
  int n_train = 200;
  int n_test = 50;
  int c_hidden = 8;
  int c_enc = 16;
  int grid = 16;
  int image_size = 64;
  int c_cls = 32;
  bool graph_enabled = true;
  bool kernel_enabled = true;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a bool");
}

template <typename T>
T parse_number(const std::string& v, const std::string& key) {
  std::istringstream is(v);
  T out;
  is >> out;
  if (is.fail() || !is.eof())
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

}  // namespace detail

inline void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  if (key == "seed") cfg.seed = parse_number<uint64_t>(value, key);
  else if (key == "epochs") cfg.epochs = parse_number<int>(value, key);
  else if (key == "lr") cfg.lr = parse_number<double>(value, key);
  else if (key == "batch_size") cfg.batch_size = parse_number<int>(value, key);
  else if (key == "T") cfg.T = parse_number<int>(value, key);
  else if (key == "gamma") cfg.gamma = parse_number<double>(value, key);
  else if (key == "top_k") cfg.top_k = parse_number<int>(value, key);
  else if (key == "lambda1") cfg.lambda1 = parse_number<double>(value, key);
  else if (key == "lambda2") cfg.lambda2 = parse_number<double>(value, key);
  else if (key == "shots") cfg.shots = parse_number<int>(value, key);
  else if (key == "n_train") cfg.n_train = parse_number<int>(value, key);
  else if (key == "n_test") cfg.n_test = parse_number<int>(value, key);
  else if (key == "c_hidden") cfg.c_hidden = parse_number<int>(value, key);
  else if (key == "c_enc") cfg.c_enc = parse_number<int>(value, key);
  else if (key == "grid") cfg.grid = parse_number<int>(value, key);
  else if (key == "image_size") cfg.image_size = parse_number<int>(value, key);
  else if (key == "c_cls") cfg.c_cls = parse_number<int>(value, key);
  else if (key == "graph_enabled") cfg.graph_enabled = parse_bool(value, key);
  else if (key == "kernel_enabled") cfg.kernel_enabled = parse_bool(value, key);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void validate(const RunConfig& cfg) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(cfg.epochs >= 0, "config key 'epochs': must be >= 0");
  require(cfg.lr > 0, "config key 'lr': must be > 0");
  require(cfg.batch_size >= 1, "config key 'batch_size': must be >= 1");
  require(cfg.T >= 0, "config key 'T': must be >= 0");
  require(cfg.gamma >= 0.0 && cfg.gamma <= 1.0, "config key 'gamma': must lie in [0,1]");
  require(cfg.top_k >= 1, "config key 'top_k': must be >= 1");
  require(cfg.lambda1 >= 0 && cfg.lambda2 >= 0, "config keys 'lambda1'/'lambda2': must be >= 0");
  require(cfg.shots == 1 || cfg.shots == 2 || cfg.shots == 4, "config key 'shots': must be 1, 2 or 4");
  require(cfg.n_train >= 1 && cfg.n_test >= 1, "config keys 'n_train'/'n_test': must be >= 1");
  require(cfg.shots <= cfg.n_train, "config key 'shots': must be <= n_train");
  require(cfg.c_hidden >= 2 && cfg.c_hidden % 2 == 0, "config key 'c_hidden': must be even and >= 2");
  require(cfg.c_enc >= 1 && cfg.c_cls >= 1, "config keys 'c_enc'/'c_cls': must be >= 1");
  require(cfg.grid >= 1 && cfg.image_size >= cfg.grid && cfg.image_size % cfg.grid == 0,
          "config keys 'grid'/'image_size': image_size must be a positive multiple of grid");
}

// `key = value` lines; '#' starts a comment. Unknown keys are rejected.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  validate(cfg);
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  return nlohmann::json{{"seed", c.seed},       {"epochs", c.epochs},
                        {"lr", c.lr},           {"batch_size", c.batch_size},
                        {"T", c.T},             {"gamma", c.gamma},
                        {"top_k", c.top_k},     {"lambda1", c.lambda1},
                        {"lambda2", c.lambda2}, {"shots", c.shots},
                        {"n_train", c.n_train}, {"n_test", c.n_test},
                        {"c_hidden", c.c_hidden}, {"c_enc", c.c_enc},
                        {"grid", c.grid},       {"image_size", c.image_size},
                        {"c_cls", c.c_cls},     {"graph_enabled", c.graph_enabled},
                        {"kernel_enabled", c.kernel_enabled}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.epochs = j.at("epochs").get<int>();
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.T = j.at("T").get<int>();
  c.gamma = j.at("gamma").get<double>();
  c.top_k = j.at("top_k").get<int>();
  c.lambda1 = j.at("lambda1").get<double>();
  c.lambda2 = j.at("lambda2").get<double>();
  c.shots = j.at("shots").get<int>();
  c.n_train = j.at("n_train").get<int>();
  c.n_test = j.at("n_test").get<int>();
  c.c_hidden = j.at("c_hidden").get<int>();
  c.c_enc = j.at("c_enc").get<int>();
  c.grid = j.at("grid").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.c_cls = j.at("c_cls").get<int>();
  c.graph_enabled = j.at("graph_enabled").get<bool>();
  c.kernel_enabled = j.at("kernel_enabled").get<bool>();
  return c;
}

}  // namespace kag

#include "pidm/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pidm {
namespace {

const Preset kDesk{"desk", 128, 64, 700, 200, 16, 32, false, 16, 1500, 1e-3, 5};
// 80 epochs over 1000 trajectories at batch 32.
const Preset kFull{"full", 1000, 1000, 700, 1000, 64, 128, true, 32, 2500, 2e-4, 30};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

const Preset& preset_by_name(std::string_view name) {
  if (name == "desk") return kDesk;
  if (name == "full") return kFull;
  throw std::invalid_argument("unknown preset '" + std::string(name) + "' (expected desk or full)");
}

std::vector<double> parse_real_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split(s, ',')) out.push_back(to_real("list", item));
  return out;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (key == "system") {
    system_by_name(value);
    system = value;
  } else if (key == "condition") {
    condition = parse_condition(value);
  } else if (key == "preset") {
    preset_by_name(value);
    preset = value;
  } else if (key == "n_trials") {
    n_trials = to_uint(key, value);
  } else if (key == "methods") {
    methods = split(value, ',');
  } else if (key == "seed") {
    seed = to_uint(key, value);
  } else if (key == "lambda_base") {
    lambda_base = to_real(key, value);
  } else if (key == "lambda_sweep") {
    lambda_sweep = parse_real_list(value);
  } else if (key == "density") {
    density = to_real(key, value);
  } else if (key == "obs_sigma") {
    obs_sigma = to_real(key, value);
  } else if (key == "model") {
    model = value;
  } else if (key == "out_dir") {
    out_dir = value;
  } else if (key == "threads") {
    threads = to_uint(key, value);
  } else if (key == "lyapunov") {
    lyapunov = to_bool(key, value);
  } else if (key == "train_steps") {
    train_steps = to_uint(key, value);
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

void ExperimentConfig::validate() const {
  spec();
  preset_values();
  if (trials() == 0) throw std::invalid_argument("config: n_trials must be at least 1");
  if (methods.empty()) throw std::invalid_argument("config: no methods selected");
  for (const auto& m : methods) {
    if (m != "pidm" && m != "pure_ai" && m != "enkf") {
      throw std::invalid_argument("config: unknown method '" + m + "' (expected pidm, pure_ai, enkf)");
    }
  }
  if (!(density > 0.0 && density <= 1.0)) throw std::invalid_argument("config: density must lie in (0, 1]");
  if (obs_sigma < 0.0) throw std::invalid_argument("config: obs_sigma must be nonnegative");
  if (lambda_base && *lambda_base < 0.0) throw std::invalid_argument("config: lambda_base must be nonnegative");
  for (double l : lambda_sweep)
    if (l < 0.0) throw std::invalid_argument("config: lambda_sweep values must be nonnegative");
  if (threads == 0) throw std::invalid_argument("config: threads must be at least 1");
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os << "system = " << system << "\n"
     << "condition = " << to_string(condition) << "\n"
     << "preset = " << preset << "\n"
     << "n_trials = " << n_trials << "\n"
     << "methods = ";
  for (std::size_t i = 0; i < methods.size(); ++i) os << (i ? "," : "") << methods[i];
  os << "\nseed = " << seed << "\n";
  if (lambda_base) os << "lambda_base = " << fmt(*lambda_base) << "\n";
  os << "lambda_sweep = ";
  for (std::size_t i = 0; i < lambda_sweep.size(); ++i) os << (i ? "," : "") << fmt(lambda_sweep[i]);
  os << "\ndensity = " << fmt(density) << "\n"
     << "obs_sigma = " << fmt(obs_sigma) << "\n";
  if (!model.empty()) os << "model = " << model.string() << "\n";
  os << "out_dir = " << out_dir.string() << "\n"
     << "threads = " << threads << "\n"
     << "lyapunov = " << (lyapunov ? "true" : "false") << "\n"
     << "train_steps = " << train_steps << "\n";
  return os.str();
}

}  // namespace pidm

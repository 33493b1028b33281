#pragma once

// JSON serialization for configs and checkpoints. Doubles round-trip
// losslessly through the JSON layer, so saving and reloading a checkpoint
// reproduces parameters bit for bit.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradflow/distributions.hpp"
#include "gradflow/mlp.hpp"
#include "gradflow/objectives.hpp"
#include "gradflow/schedules.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

using Json = nlohmann::json;

// Malformed or inconsistent user input (configs, checkpoints). The CLI maps
// this to its configuration-error exit code.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline Json vec_to_json(const Vec& v) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Vec vec_from_json(const Json& arr) {
  if (!arr.is_array()) throw ConfigError("expected array of numbers");
  Vec v(static_cast<Eigen::Index>(arr.size()));
  Eigen::Index i = 0;
  for (const auto& x : arr) v[i++] = x.get<double>();
  return v;
}

inline Json mat_to_json(const Mat& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat mat_from_json(const Json& rows) {
  if (!rows.is_array() || rows.empty())
    throw ConfigError("expected nonempty array of rows");
  const Eigen::Index r = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index c = static_cast<Eigen::Index>(rows[0].size());
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != c)
      throw ConfigError("ragged matrix rows");
    for (Eigen::Index j = 0; j < c; ++j)
      m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]
                    .get<double>();
  }
  return m;
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Distribution specs
// ---------------------------------------------------------------------------

inline Json to_json(const DistributionSpec& spec) {
  Json j;
  j["kind"] = to_string(spec.kind);
  switch (spec.kind) {
    case DistKind::gaussian:
      j["mean"] = detail::vec_to_json(spec.mean);
      j["var"] = detail::vec_to_json(spec.var);
      break;
    case DistKind::gaussian_mixture: {
      Json means = Json::array(), vars = Json::array();
      for (const Vec& m : spec.means) means.push_back(detail::vec_to_json(m));
      for (const Vec& v : spec.vars) vars.push_back(detail::vec_to_json(v));
      j["means"] = std::move(means);
      j["vars"] = std::move(vars);
      j["weights"] = detail::vec_to_json(spec.weights);
      break;
    }
    case DistKind::two_moons:
      j["noise"] = spec.noise;
      j["rotation"] = spec.rotation;
      j["offset"] = detail::vec_to_json(spec.offset);
      break;
    case DistKind::checkerboard:
      j["offset"] = detail::vec_to_json(spec.offset);
      break;
  }
  return j;
}

namespace detail {

// Configs may give a variance as a scalar (isotropic) or per-dimension array.
inline Vec variance_from_json(const Json& j, Eigen::Index dim) {
  if (j.is_number()) return Vec::Constant(dim, j.get<double>());
  return vec_from_json(j);
}

}  // namespace detail

inline DistributionSpec distribution_from_json(const Json& j) {
  if (!j.contains("kind")) throw ConfigError("distribution: missing kind");
  const std::string kind = j.at("kind").get<std::string>();
  try {
    if (kind == "gaussian") {
      const Vec mean = detail::vec_from_json(j.at("mean"));
      return make_gaussian(mean, detail::variance_from_json(j.at("var"), mean.size()));
    }
    if (kind == "gaussian_mixture") {
      std::vector<Vec> means, vars;
      for (const auto& m : j.at("means"))
        means.push_back(detail::vec_from_json(m));
      const Eigen::Index dim = means.empty() ? 0 : means[0].size();
      for (const auto& v : j.at("vars"))
        vars.push_back(detail::variance_from_json(v, dim));
      return make_gaussian_mixture(std::move(means), std::move(vars),
                                   detail::vec_from_json(j.at("weights")));
    }
    if (kind == "gaussian_ring") {
      // Config convenience: expands to a mixture on a circle.
      return make_gaussian_ring(j.at("components").get<int>(),
                                j.at("radius").get<double>(),
                                j.at("var").get<double>());
    }
    if (kind == "two_moons") {
      Vec offset = Vec::Zero(2);
      if (j.contains("offset")) offset = detail::vec_from_json(j.at("offset"));
      return make_two_moons(detail::get_or(j, "noise", 0.1),
                            detail::get_or(j, "rotation", 0.0), offset);
    }
    if (kind == "checkerboard") {
      Vec offset = Vec::Zero(2);
      if (j.contains("offset")) offset = detail::vec_from_json(j.at("offset"));
      return make_checkerboard(offset);
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("distribution: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("distribution: ") + e.what());
  }
  throw ConfigError("distribution: unknown kind " + kind);
}

// ---------------------------------------------------------------------------
// Objective and schedule
// ---------------------------------------------------------------------------

inline Json to_json(const ObjectiveSpec& spec) {
  return Json{{"kind", to_string(spec.kind)},
              {"beta", spec.beta},
              {"sigma", spec.sigma}};
}

inline ObjectiveSpec objective_from_json(const Json& j) {
  ObjectiveSpec spec;
  try {
    spec.kind = parse_objective_kind(j.at("kind").get<std::string>());
    spec.beta = detail::get_or(j, "beta", 0.0);
    spec.sigma = detail::get_or(j, "sigma", 0.0);
    spec.validate();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("objective: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("objective: ") + e.what());
  }
  return spec;
}

inline Json to_json(const CoolingSchedule& s) {
  return Json{{"kind", to_string(s.kind)},     {"beta_max", s.beta_max},
              {"beta_min", s.beta_min},        {"total_steps", s.total_steps},
              {"sharpness", s.sharpness},      {"midpoint", s.midpoint}};
}

inline CoolingSchedule schedule_from_json(const Json& j) {
  CoolingSchedule s;
  try {
    s.kind = parse_schedule_kind(
        detail::get_or<std::string>(j, "kind", "inverse_sigmoid"));
    s.beta_max = detail::get_or(j, "beta_max", 10.0);
    s.beta_min = detail::get_or(j, "beta_min", 0.0);
    s.total_steps = detail::get_or<long>(j, "total_steps", 1);
    s.sharpness = detail::get_or(j, "sharpness", 10.0);
    s.midpoint = detail::get_or(j, "midpoint", 0.5);
    s.validate();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  MlpParams model;
  std::optional<LoraAdapter> lora;
  long step = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

inline Json to_json(const Checkpoint& ckpt) {
  Json j;
  j["arch"] = ckpt.model.arch;
  j["activation"] = to_string(ckpt.model.activation);
  j["theta"] = detail::vec_to_json(ckpt.model.theta);
  if (ckpt.lora) {
    Json lora;
    lora["rank"] = ckpt.lora->rank;
    lora["scale"] = ckpt.lora->scale;
    Json a = Json::array(), b = Json::array();
    for (const Mat& m : ckpt.lora->a) a.push_back(detail::mat_to_json(m));
    for (const Mat& m : ckpt.lora->b) b.push_back(detail::mat_to_json(m));
    lora["a"] = std::move(a);
    lora["b"] = std::move(b);
    j["lora"] = std::move(lora);
  }
  j["meta"] = Json{{"step", ckpt.step},
                   {"seed", ckpt.seed},
                   {"config_hash", ckpt.config_hash}};
  return j;
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  Checkpoint ckpt;
  try {
    ckpt.model.arch = j.at("arch").get<std::vector<int>>();
    ckpt.model.activation =
        parse_activation(j.at("activation").get<std::string>());
    ckpt.model.theta = detail::vec_from_json(j.at("theta"));
    validate_params(ckpt.model);
    if (j.contains("lora")) {
      const Json& l = j.at("lora");
      LoraAdapter adapter;
      adapter.rank = l.at("rank").get<int>();
      adapter.scale = l.at("scale").get<double>();
      for (const auto& m : l.at("a"))
        adapter.a.push_back(detail::mat_from_json(m));
      for (const auto& m : l.at("b"))
        adapter.b.push_back(detail::mat_from_json(m));
      validate_adapter(ckpt.model, adapter);
      ckpt.lora = std::move(adapter);
    }
    if (j.contains("meta")) {
      const Json& meta = j.at("meta");
      ckpt.step = detail::get_or<long>(meta, "step", 0);
      ckpt.seed = detail::get_or<std::uint64_t>(meta, "seed", 0);
      ckpt.config_hash = detail::get_or<std::string>(meta, "config_hash", "");
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
  return ckpt;
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    Json j;
    in >> j;
    return j;
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_json_file(path, to_json(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_json(read_json_file(path));
}

// FNV-1a over the canonical (sorted-key) dump; stable across runs and
// platforms, used to stamp artifacts with the config that produced them.
inline std::string config_hash(const Json& config) {
  const std::string dump = config.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

}  // namespace gradflow

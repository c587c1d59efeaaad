#pragma once

#include "dpmm_rul/types.hpp"

#include <algorithm>
#include <utility>

namespace dpmm_rul {

enum class TemporalFn { Sine, Cosine, ConstantOne, None };

/// Sensor-specific coefficients: delta1 * U1 * t^delta2 + delta3 * U2 * f(t).
struct SensorSpec {
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  TemporalFn fn = TemporalFn::None;
  double freq = 0.0;
};

/// Failure-mode spec: bivariate normal over (intercept, slope) random
/// effects plus the per-sensor trend signs.
struct ModeSpec {
  std::string name;
  Eigen::Vector2d gamma_mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d gamma_cov = Eigen::Matrix2d::Zero();
  Vector trend_signs;  // entries in {-1, +1}, one per sensor
};

struct FleetConfig {
  std::vector<ModeSpec> modes;
  std::vector<SensorSpec> sensors;
  double failure_threshold = 400.0;
  double noise_sd = 20.0;
  double uniform_hi = 30.0;
  int systems_per_mode = 120;
  std::vector<std::pair<int, std::string>> emergence_schedule;  // (iteration, mode)
  std::uint64_t seed = 0;
  long rejection_cap = 1'000'000;
  std::string id_prefix;
};

/// Per-system random effects; U entries are indexed by sensor.
struct SystemEffects {
  double gamma0 = 0.0;
  double gamma1 = 0.0;
  Vector u1, u2, u3;
};

inline double temporal_value(const SensorSpec& s, double t) {
  switch (s.fn) {
    case TemporalFn::Sine: return std::sin(s.freq * t);
    case TemporalFn::Cosine: return std::cos(s.freq * t);
    case TemporalFn::ConstantOne: return 1.0;
    case TemporalFn::None: return 0.0;
  }
  return 0.0;
}

inline void validate(const ModeSpec& mode, Eigen::Index n_sensors) {
  if (mode.gamma_cov(0, 1) != mode.gamma_cov(1, 0))
    throw std::invalid_argument("ModeSpec " + mode.name + ": covariance not symmetric");
  if (mode.gamma_cov(0, 0) < 0.0 || mode.gamma_cov(1, 1) < 0.0 ||
      mode.gamma_cov.determinant() < -1e-12)
    throw std::invalid_argument("ModeSpec " + mode.name + ": covariance not PSD");
  if (mode.trend_signs.size() != n_sensors)
    throw std::invalid_argument("ModeSpec " + mode.name + ": trend_signs size mismatch");
  for (Eigen::Index s = 0; s < mode.trend_signs.size(); ++s)
    if (mode.trend_signs[s] != 1.0 && mode.trend_signs[s] != -1.0)
      throw std::invalid_argument("ModeSpec " + mode.name + ": trend sign not in {-1,+1}");
}

inline void validate(const SensorSpec& s) {
  if (s.fn == TemporalFn::None && s.delta3 != 0.0)
    throw std::invalid_argument("SensorSpec: temporal_fn none requires delta3 = 0");
}

inline void validate(const FleetConfig& cfg) {
  if (cfg.failure_threshold <= 0.0)
    throw std::invalid_argument("FleetConfig: failure_threshold must be > 0");
  if (cfg.noise_sd < 0.0) throw std::invalid_argument("FleetConfig: noise_sd must be >= 0");
  if (cfg.systems_per_mode < 1)
    throw std::invalid_argument("FleetConfig: systems_per_mode must be >= 1");
  if (cfg.modes.empty() || cfg.sensors.empty())
    throw std::invalid_argument("FleetConfig: needs at least one mode and one sensor");
  for (const auto& s : cfg.sensors) validate(s);
  for (const auto& m : cfg.modes) validate(m, static_cast<Eigen::Index>(cfg.sensors.size()));
}

/// Draw (Gamma0, Gamma1) from the mode's bivariate normal, rejecting
/// non-positive slopes. Zero covariance degenerates to the mean.
inline std::pair<double, double> sample_random_effects(const ModeSpec& mode, Rng& rng,
                                                       long rejection_cap = 1'000'000) {
  const double a = mode.gamma_cov(0, 0);
  const double b = mode.gamma_cov(0, 1);
  const double c = mode.gamma_cov(1, 1);
  const double l00 = std::sqrt(std::max(a, 0.0));
  const double l10 = l00 > 0.0 ? b / l00 : 0.0;
  const double l11 = std::sqrt(std::max(c - l10 * l10, 0.0));

  for (long k = 0; k < rejection_cap; ++k) {
    const double z0 = rng.normal();
    const double z1 = rng.normal();
    const double g0 = mode.gamma_mean[0] + l00 * z0;
    const double g1 = mode.gamma_mean[1] + l10 * z0 + l11 * z1;
    if (g1 > 0.0) return {g0, g1};
  }
  throw std::runtime_error("sample_random_effects: rejection cap exhausted for mode " +
                           mode.name);
}

/// tau = (L - Gamma0) / Gamma1. Callers treat floor(tau) < 1 as degenerate.
inline double failure_time(double gamma0, double gamma1, double threshold) {
  if (gamma1 <= 0.0)
    throw std::invalid_argument("failure_time: slope must be positive");
  return (threshold - gamma0) / gamma1;
}

/// Noise-free-optional signal value, Eq. form:
///   d1*U1*t^d2 + d3*U2*f(t) + U3 + sign * (Gamma0 + Gamma1 t) + eps
inline double generate_sensor_signal(const SystemEffects& fx, const ModeSpec& mode,
                                     const SensorSpec& spec, int sensor, int t,
                                     double eps = 0.0) {
  const double eta = fx.gamma0 + fx.gamma1 * static_cast<double>(t);
  return spec.delta1 * fx.u1[sensor] * std::pow(static_cast<double>(t), spec.delta2) +
         spec.delta3 * fx.u2[sensor] * temporal_value(spec, t) + fx.u3[sensor] +
         mode.trend_signs[sensor] * eta + eps;
}

namespace detail {

inline std::uint64_t hash_str(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline SensorHistory generate_system(const FleetConfig& cfg, const ModeSpec& mode,
                                     int replicate) {
  const std::uint64_t mode_tag = hash_str(mode.name);
  const int S = static_cast<int>(cfg.sensors.size());

  // System-level stream drives the random effects; per-(system, sensor)
  // streams drive U draws and noise so adding a sensor never perturbs
  // existing ones.
  Rng sys_rng(child_seed(cfg.seed, mode_tag, static_cast<std::uint64_t>(replicate), 0ULL));

  double g0 = 0.0, g1 = 0.0, tau = 0.0;
  long attempts = 0;
  for (;;) {
    std::tie(g0, g1) = sample_random_effects(mode, sys_rng, cfg.rejection_cap);
    tau = failure_time(g0, g1, cfg.failure_threshold);
    if (std::floor(tau) >= 1.0) break;
    if (++attempts >= cfg.rejection_cap)
      throw std::runtime_error("generate_system: no admissible lifetime for mode " +
                               mode.name);
  }
  const int T = static_cast<int>(std::floor(tau));

  SystemEffects fx;
  fx.gamma0 = g0;
  fx.gamma1 = g1;
  fx.u1.resize(S);
  fx.u2.resize(S);
  fx.u3.resize(S);

  Matrix readings(T, S);
  for (int s = 0; s < S; ++s) {
    Rng rng(child_seed(cfg.seed, mode_tag, static_cast<std::uint64_t>(replicate),
                       static_cast<std::uint64_t>(s) + 1));
    fx.u1[s] = rng.uniform(0.0, cfg.uniform_hi);
    fx.u2[s] = rng.uniform(0.0, cfg.uniform_hi);
    fx.u3[s] = rng.uniform(0.0, cfg.uniform_hi);
    for (int t = 1; t <= T; ++t) {
      const double eps = cfg.noise_sd > 0.0 ? rng.normal(0.0, cfg.noise_sd) : 0.0;
      readings(t - 1, s) = generate_sensor_signal(fx, mode, cfg.sensors[s], s, t, eps);
    }
  }

  SensorHistory h;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", replicate);
  h.system_id = cfg.id_prefix + mode.name + "-" + buf;
  h.readings = std::move(readings);
  h.failure_time = tau;
  h.true_mode = mode.name;
  return h;
}

}  // namespace detail

/// All non-emergent modes, systems_per_mode histories each. Deterministic
/// under a fixed seed.
inline Fleet generate_fleet(const FleetConfig& cfg) {
  validate(cfg);
  Fleet fleet;
  for (const auto& mode : cfg.modes) {
    const bool emergent =
        std::any_of(cfg.emergence_schedule.begin(), cfg.emergence_schedule.end(),
                    [&](const auto& e) { return e.second == mode.name; });
    if (emergent) continue;
    for (int i = 0; i < cfg.systems_per_mode; ++i)
      fleet.push_back(detail::generate_system(cfg, mode, i));
  }
  return fleet;
}

/// Scheduled batches for non-stationary runs, one per schedule entry.
inline std::vector<StreamBatch> generate_emergent_batches(const FleetConfig& cfg) {
  validate(cfg);
  std::vector<StreamBatch> batches;
  for (const auto& [iter, name] : cfg.emergence_schedule) {
    const auto it = std::find_if(cfg.modes.begin(), cfg.modes.end(),
                                 [&](const ModeSpec& m) { return m.name == name; });
    if (it == cfg.modes.end())
      throw std::invalid_argument("emergence_schedule: unknown mode " + name);
    StreamBatch batch;
    batch.arrival_iteration = iter;
    for (int i = 0; i < cfg.systems_per_mode; ++i)
      batch.histories.push_back(detail::generate_system(cfg, *it, i));
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Canonical simulation setup
// ---------------------------------------------------------------------------

inline std::vector<SensorSpec> default_sensor_specs() {
  return {
      {1.0, 0.5, 0.9, TemporalFn::Sine, 0.05},
      {0.1, 0.5, 0.2, TemporalFn::ConstantOne, 0.0},
      {2.0, 0.01, 1.0, TemporalFn::Cosine, 0.07},
      {0.001, 0.5, 0.0, TemporalFn::None, 0.0},
      {0.05, 0.5, 1.0, TemporalFn::Sine, 0.1},
      {0.001, 1.5, 0.2, TemporalFn::Sine, 0.01},
      {0.02, 1.2, 1.4, TemporalFn::Cosine, 0.1},
      {0.01, 0.5, 0.14, TemporalFn::ConstantOne, 0.0},
  };
}

inline std::vector<ModeSpec> default_mode_specs(int count = 4) {
  auto signs = [](std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
  };
  std::vector<ModeSpec> modes(4);
  modes[0].name = "A";
  modes[0].gamma_mean << -1.5, 2.5;
  modes[0].gamma_cov << 120.0, 2.0, 2.0, 0.4;
  modes[0].trend_signs = signs({-1, -1, +1, +1, +1, +1, +1, +1});
  modes[1].name = "B";
  modes[1].gamma_mean << -0.5, 1.8;
  modes[1].gamma_cov << 80.0, 1.0, 1.0, 0.25;
  modes[1].trend_signs = signs({+1, +1, -1, -1, +1, +1, +1, +1});
  modes[2].name = "C";
  modes[2].gamma_mean << -1.3, 2.3;
  modes[2].gamma_cov << 110.0, 1.8, 1.8, 0.3;
  modes[2].trend_signs = signs({+1, +1, +1, +1, -1, -1, +1, +1});
  modes[3].name = "D";
  modes[3].gamma_mean << -0.8, 2.0;
  modes[3].gamma_cov << 90.0, 1.0, 1.0, 0.4;
  modes[3].trend_signs = signs({+1, +1, +1, +1, +1, +1, -1, -1});
  if (count < 1 || count > 4)
    throw std::invalid_argument("default_mode_specs: count must be 1..4");
  modes.resize(count);
  return modes;
}

inline FleetConfig default_fleet_config(int n_modes = 4, int systems_per_mode = 120,
                                        std::uint64_t seed = 0) {
  FleetConfig cfg;
  cfg.modes = default_mode_specs(n_modes);
  cfg.sensors = default_sensor_specs();
  cfg.systems_per_mode = systems_per_mode;
  cfg.seed = seed;
  return cfg;
}

}  // namespace dpmm_rul

#pragma once

#include "dpmm_rul/types.hpp"

#include <vector>

namespace dpmm_rul {

/// floor of the mean training length.
inline int reference_length(const Fleet& fleet) {
  if (fleet.empty()) throw std::invalid_argument("reference_length: empty fleet");
  double acc = 0.0;
  for (const auto& h : fleet) acc += static_cast<double>(h.length());
  return static_cast<int>(std::floor(acc / static_cast<double>(fleet.size())));
}

namespace detail {

inline Vector flatten_sensor_major(const Matrix& aligned) {
  // column s occupies the slice [s*T, (s+1)*T)
  const Eigen::Index T = aligned.rows(), S = aligned.cols();
  Vector out(T * S);
  for (Eigen::Index s = 0; s < S; ++s) out.segment(s * T, T) = aligned.col(s);
  return out;
}

}  // namespace detail

inline Matrix unflatten_sensor_major(const Vector& v, Eigen::Index t_bar) {
  if (t_bar < 1 || v.size() % t_bar != 0)
    throw std::invalid_argument("unflatten_sensor_major: bad dimensions");
  const Eigen::Index S = v.size() / t_bar;
  Matrix out(t_bar, S);
  for (Eigen::Index s = 0; s < S; ++s) out.col(s) = v.segment(s * t_bar, t_bar);
  return out;
}

/// Keep the last t_bar cycles, or pad by repeating the final reading.
inline AlignedObservation truncate_pad(const SensorHistory& h, int t_bar) {
  if (t_bar < 1) throw std::invalid_argument("truncate_pad: t_bar must be >= 1");
  const Eigen::Index T = h.length();
  Matrix aligned(t_bar, h.sensors());
  if (T >= t_bar) {
    aligned = h.readings.bottomRows(t_bar);
  } else {
    aligned.topRows(T) = h.readings;
    for (Eigen::Index t = T; t < t_bar; ++t) aligned.row(t) = h.readings.row(T - 1);
  }
  return {h.system_id, detail::flatten_sensor_major(aligned), Alignment::TruncatePad};
}

/// Resample on the normalized grid zeta = g / t_bar of absolute times
/// zeta * horizon, linear in between samples and flat beyond them.
/// horizon is T_n for failed systems, observed length + predicted RUL for
/// censored ones.
inline AlignedObservation temporal_warp(const SensorHistory& h, int t_bar, double horizon) {
  if (t_bar < 1) throw std::invalid_argument("temporal_warp: t_bar must be >= 1");
  if (horizon < 1.0) throw std::invalid_argument("temporal_warp: horizon must be >= 1");
  const Eigen::Index T = h.length();
  Matrix aligned(t_bar, h.sensors());
  for (int g = 1; g <= t_bar; ++g) {
    const double x = horizon * static_cast<double>(g) / static_cast<double>(t_bar);
    if (x <= 1.0) {
      aligned.row(g - 1) = h.readings.row(0);
    } else if (x >= static_cast<double>(T)) {
      aligned.row(g - 1) = h.readings.row(T - 1);
    } else {
      const auto t0 = static_cast<Eigen::Index>(std::floor(x));
      const double frac = x - static_cast<double>(t0);
      aligned.row(g - 1) =
          (1.0 - frac) * h.readings.row(t0 - 1) + frac * h.readings.row(t0);
    }
  }
  return {h.system_id, detail::flatten_sensor_major(aligned), Alignment::TemporalWarp};
}

/// Sliding windows of length xi with labels T_n - (i + xi - 1); systems
/// shorter than xi yield no samples.
inline std::vector<WindowSample> make_windows(const SensorHistory& h, int xi,
                                              int system_index = 0) {
  if (xi < 1) throw std::invalid_argument("make_windows: xi must be >= 1");
  std::vector<WindowSample> out;
  const Eigen::Index T = h.length();
  if (T < xi) return out;
  out.reserve(static_cast<std::size_t>(T - xi + 1));
  for (Eigen::Index i = 1; i + xi - 1 <= T; ++i) {
    WindowSample w;
    w.system_index = system_index;
    w.window = h.readings.middleRows(i - 1, xi).transpose();  // S x xi
    w.rul_label = static_cast<double>(T - (i + xi - 1));
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sensor z-scoring (train statistics only)
// ---------------------------------------------------------------------------

struct NormalizationStats {
  Vector mean;
  Vector sd;                       // constant sensors get sd = 1
  std::vector<bool> constant_flag;
};

inline NormalizationStats fit_normalization(const Fleet& train) {
  if (train.empty()) throw std::invalid_argument("fit_normalization: empty fleet");
  const Eigen::Index S = train.front().sensors();
  Vector sum = Vector::Zero(S), sumsq = Vector::Zero(S);
  double n = 0.0;
  for (const auto& h : train) {
    sum += h.readings.colwise().sum().transpose();
    sumsq += h.readings.array().square().colwise().sum().matrix().transpose();
    n += static_cast<double>(h.length());
  }
  NormalizationStats st;
  st.mean = sum / n;
  st.sd.resize(S);
  st.constant_flag.assign(static_cast<std::size_t>(S), false);
  for (Eigen::Index s = 0; s < S; ++s) {
    const double var = std::max(sumsq[s] / n - st.mean[s] * st.mean[s], 0.0);
    if (var < 1e-24) {
      st.sd[s] = 1.0;
      st.constant_flag[static_cast<std::size_t>(s)] = true;
    } else {
      st.sd[s] = std::sqrt(var);
    }
  }
  return st;
}

inline Matrix apply_normalization(const NormalizationStats& st, const Matrix& readings) {
  return (readings.rowwise() - st.mean.transpose()).array().rowwise() /
         st.sd.transpose().array();
}

inline Matrix invert_normalization(const NormalizationStats& st, const Matrix& normalized) {
  return (normalized.array().rowwise() * st.sd.transpose().array()).matrix().rowwise() +
         st.mean.transpose();
}

inline SensorHistory apply_normalization(const NormalizationStats& st,
                                         const SensorHistory& h) {
  SensorHistory out = h;
  out.readings = apply_normalization(st, h.readings);
  return out;
}

}  // namespace dpmm_rul

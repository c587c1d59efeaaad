#pragma once

#include "dpmm_rul/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dpmm_rul {

/// One system's raw run-to-failure record. readings is T_n x S, cycle t
/// (1-based) stored in row t-1. Immutable after construction.
struct SensorHistory {
  std::string system_id;
  Matrix readings;                      // T_n x S
  double failure_time = 0.0;            // tau_n; T_n = floor(tau_n)
  std::optional<std::string> true_mode;
  std::optional<double> true_rul;       // for truncated test units

  Eigen::Index length() const { return readings.rows(); }
  Eigen::Index sensors() const { return readings.cols(); }
};

using Fleet = std::vector<SensorHistory>;

enum class Alignment { TruncatePad, TemporalWarp };

inline std::string to_string(Alignment a) {
  return a == Alignment::TruncatePad ? "truncate-pad" : "temporal-warp";
}

/// Fixed-length flattened observation fed to the mixture model.
/// Layout is sensor-major: sensor 1 cycles, then sensor 2 cycles, ...
struct AlignedObservation {
  std::string system_id;
  Vector values;  // D = S * T_bar
  Alignment strategy = Alignment::TruncatePad;
};

/// One sliding-window training sample for the prognostic networks.
struct WindowSample {
  int system_index = 0;          // into the owning fleet
  Matrix window;                 // S x xi
  double rul_label = 0.0;        // T_n - (i + xi - 1), >= 0
};

/// Systems arriving mid-run; visible from iteration arrival_iteration + 1.
struct StreamBatch {
  int arrival_iteration = 0;
  Fleet histories;
};

}  // namespace dpmm_rul

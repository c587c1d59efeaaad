#pragma once

#include "dpmm_rul/datagen.hpp"
#include "dpmm_rul/dpmm.hpp"
#include "dpmm_rul/prognostics.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace dpmm_rul {

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw data_error("cannot open for writing: " + p.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw data_error("cannot open: " + p.string());
  return in;
}

/// Write to <path>.tmp then rename, so readers never see partial files.
template <typename Fn>
void atomic_write(const std::filesystem::path& path, Fn&& fill) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out = open_out(tmp);
    fill(out);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fleet export (one CSV per system + manifest)
// ---------------------------------------------------------------------------

inline void export_fleet(const Fleet& fleet, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::atomic_write(dir / "manifest.csv", [&](std::ofstream& out) {
    out << "system_id,failure_time,true_mode\n";
    for (const auto& h : fleet)
      out << h.system_id << ',' << format_double(h.failure_time) << ','
          << (h.true_mode ? *h.true_mode : "") << '\n';
  });
  for (const auto& h : fleet) {
    detail::atomic_write(dir / (h.system_id + ".csv"), [&](std::ofstream& out) {
      out << "cycle";
      for (Eigen::Index s = 0; s < h.sensors(); ++s) out << ",sensor_" << (s + 1);
      out << '\n';
      for (Eigen::Index t = 0; t < h.length(); ++t) {
        out << (t + 1);
        for (Eigen::Index s = 0; s < h.sensors(); ++s)
          out << ',' << format_double(h.readings(t, s));
        out << '\n';
      }
    });
  }
}

// ---------------------------------------------------------------------------
// Plain-text key/value fleet configuration
// ---------------------------------------------------------------------------

inline FleetConfig parse_fleet_config(const std::filesystem::path& path) {
  std::ifstream in = detail::open_in(path);
  FleetConfig cfg;
  cfg.modes.clear();
  cfg.sensors.clear();
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::istringstream val(line.substr(eq + 1));
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t") + 1);
    if (key.empty()) continue;

    auto fail = [&](const std::string& why) { throw data_error("fleet config: " + why, lineno); };
    if (key == "seed") {
      if (!(val >> cfg.seed)) fail("bad seed");
    } else if (key == "failure_threshold") {
      if (!(val >> cfg.failure_threshold)) fail("bad failure_threshold");
    } else if (key == "noise_sd") {
      if (!(val >> cfg.noise_sd)) fail("bad noise_sd");
    } else if (key == "uniform_hi") {
      if (!(val >> cfg.uniform_hi)) fail("bad uniform_hi");
    } else if (key == "systems_per_mode") {
      if (!(val >> cfg.systems_per_mode)) fail("bad systems_per_mode");
    } else if (key == "rejection_cap") {
      if (!(val >> cfg.rejection_cap)) fail("bad rejection_cap");
    } else if (key == "id_prefix") {
      val >> cfg.id_prefix;
    } else if (key == "sensor") {
      SensorSpec s;
      std::string fn;
      if (!(val >> s.delta1 >> s.delta2 >> s.delta3 >> fn)) fail("bad sensor line");
      if (fn == "sine") s.fn = TemporalFn::Sine;
      else if (fn == "cosine") s.fn = TemporalFn::Cosine;
      else if (fn == "const1") s.fn = TemporalFn::ConstantOne;
      else if (fn == "none") s.fn = TemporalFn::None;
      else fail("unknown temporal function '" + fn + "'");
      if (s.fn == TemporalFn::Sine || s.fn == TemporalFn::Cosine)
        if (!(val >> s.freq)) fail("missing frequency");
      cfg.sensors.push_back(s);
    } else if (key == "mode") {
      ModeSpec m;
      if (!(val >> m.name >> m.gamma_mean[0] >> m.gamma_mean[1] >> m.gamma_cov(0, 0) >>
            m.gamma_cov(0, 1) >> m.gamma_cov(1, 0) >> m.gamma_cov(1, 1)))
        fail("bad mode line");
      std::vector<double> signs;
      double s;
      while (val >> s) signs.push_back(s);
      m.trend_signs = Eigen::Map<const Vector>(signs.data(),
                                               static_cast<Eigen::Index>(signs.size()));
      cfg.modes.push_back(std::move(m));
    } else if (key == "emerge") {
      int iter;
      std::string name;
      if (!(val >> iter >> name)) fail("bad emerge line");
      cfg.emergence_schedule.emplace_back(iter, name);
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// C-MAPSS wire format
// ---------------------------------------------------------------------------

struct CmapssRecord {
  int unit = 0;
  int cycle = 0;
  double settings[3] = {0, 0, 0};
  double sensors[21] = {0};
};

inline std::vector<CmapssRecord> load_cmapss_records(const std::filesystem::path& path) {
  std::ifstream in = detail::open_in(path);
  std::vector<CmapssRecord> records;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    CmapssRecord r;
    if (!(ss >> r.unit >> r.cycle >> r.settings[0] >> r.settings[1] >> r.settings[2]))
      throw data_error("cmapss: malformed row in " + path.filename().string(), lineno);
    for (int s = 0; s < 21; ++s)
      if (!(ss >> r.sensors[s]))
        throw data_error("cmapss: expected 26 columns in " + path.filename().string(),
                         lineno);
    double extra;
    if (ss >> extra)
      throw data_error("cmapss: more than 26 columns in " + path.filename().string(),
                       lineno);
    records.push_back(r);
  }
  return records;
}

inline void write_cmapss_records(const std::vector<CmapssRecord>& records,
                                 const std::filesystem::path& path) {
  detail::atomic_write(path, [&](std::ofstream& out) {
    char buf[40];
    for (const auto& r : records) {
      out << r.unit << ' ' << r.cycle;
      for (double v : r.settings) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << ' ' << buf;
      }
      for (double v : r.sensors) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << ' ' << buf;
      }
      out << '\n';
    }
  });
}

/// Group per-cycle records into run-to-failure histories (21 sensor
/// columns; operational settings are parsed but not part of the
/// observation vector).
inline Fleet cmapss_records_to_fleet(const std::vector<CmapssRecord>& records,
                                     const std::string& id_prefix) {
  std::map<int, std::vector<const CmapssRecord*>> units;
  for (const auto& r : records) units[r.unit].push_back(&r);
  Fleet fleet;
  for (auto& [unit, rows] : units) {
    std::sort(rows.begin(), rows.end(),
              [](const CmapssRecord* a, const CmapssRecord* b) { return a->cycle < b->cycle; });
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i]->cycle != static_cast<int>(i) + 1)
        throw data_error("cmapss: unit " + std::to_string(unit) +
                         " cycles not contiguous from 1");
    SensorHistory h;
    h.system_id = id_prefix + std::to_string(unit);
    h.readings.resize(static_cast<Eigen::Index>(rows.size()), 21);
    for (std::size_t t = 0; t < rows.size(); ++t)
      for (int s = 0; s < 21; ++s)
        h.readings(static_cast<Eigen::Index>(t), s) = rows[t]->sensors[s];
    h.failure_time = static_cast<double>(rows.size());
    fleet.push_back(std::move(h));
  }
  return fleet;
}

struct CmapssData {
  Fleet train;
  Fleet test;
};

/// FD00x loader. Train units run to failure; test units are truncated and
/// carry the ground-truth RUL from the companion file. Optional mode-label
/// file has lines "unit_id label", joined to train units.
inline CmapssData load_cmapss(const std::filesystem::path& train_path,
                              const std::filesystem::path& test_path,
                              const std::filesystem::path& rul_path,
                              const std::filesystem::path& label_path = {}) {
  CmapssData data;
  data.train = cmapss_records_to_fleet(load_cmapss_records(train_path), "train-");
  data.test = cmapss_records_to_fleet(load_cmapss_records(test_path), "test-");

  std::ifstream rul_in = detail::open_in(rul_path);
  std::vector<double> ruls;
  double v;
  while (rul_in >> v) ruls.push_back(v);
  if (ruls.size() != data.test.size())
    throw data_error("cmapss: RUL rows (" + std::to_string(ruls.size()) +
                     ") != test units (" + std::to_string(data.test.size()) + ")");
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    data.test[i].true_rul = ruls[i];
    data.test[i].failure_time = static_cast<double>(data.test[i].length()) + ruls[i];
  }

  if (!label_path.empty()) {
    std::ifstream lab_in = detail::open_in(label_path);
    std::map<std::string, std::string> labels;
    std::string unit, label;
    while (lab_in >> unit >> label) labels["train-" + unit] = label;
    for (auto& h : data.train) {
      const auto it = labels.find(h.system_id);
      if (it != labels.end()) h.true_mode = it->second;
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Run-report files
// ---------------------------------------------------------------------------

struct IterationRecord {
  int iteration = 0;
  int active_modes = 0;
  double elbo = 0.0;
  double silhouette = 0.0;
  double score = 0.0;
  double train_rmse = 0.0;
  double test_rmse = 0.0;
  double val_loss = 0.0;
  double nmi = -1.0;  // -1: true labels unavailable
  int births = 0;
  int merges = 0;
  int rejects = 0;
};

struct StructureEvent {
  int iteration = 0;
  std::string kind;  // birth | merge | reject
  int modes_before = 0;
  int modes_after = 0;
  double delta = 0.0;
};

inline void write_records_csv(const std::vector<IterationRecord>& records,
                              const std::filesystem::path& path) {
  detail::atomic_write(path, [&](std::ofstream& out) {
    out << "iteration,active_modes,elbo,silhouette,score,train_rmse,test_rmse,"
           "val_loss,nmi,births,merges,rejects\n";
    for (const auto& r : records)
      out << r.iteration << ',' << r.active_modes << ',' << format_double(r.elbo) << ','
          << format_double(r.silhouette) << ',' << format_double(r.score) << ','
          << format_double(r.train_rmse) << ',' << format_double(r.test_rmse) << ','
          << format_double(r.val_loss) << ',' << format_double(r.nmi) << ',' << r.births
          << ',' << r.merges << ',' << r.rejects << '\n';
  });
}

inline void write_events_csv(const std::vector<StructureEvent>& events,
                             const std::filesystem::path& path) {
  detail::atomic_write(path, [&](std::ofstream& out) {
    out << "iteration,event,modes_before,modes_after,delta_j\n";
    for (const auto& e : events)
      out << e.iteration << ',' << e.kind << ',' << e.modes_before << ',' << e.modes_after
          << ',' << format_double(e.delta) << '\n';
  });
}

inline void write_assignments_csv(const std::vector<std::string>& ids,
                                  const std::vector<int>& modes, const Matrix& resp,
                                  const std::filesystem::path& path) {
  detail::atomic_write(path, [&](std::ofstream& out) {
    out << "system_id,mode";
    for (Eigen::Index k = 0; k < resp.cols(); ++k) out << ",r" << k;
    out << '\n';
    for (std::size_t i = 0; i < ids.size(); ++i) {
      out << ids[i] << ',' << modes[i];
      for (Eigen::Index k = 0; k < resp.cols(); ++k)
        out << ',' << format_double(resp(static_cast<Eigen::Index>(i), k));
      out << '\n';
    }
  });
}

inline void write_predictions_csv(const std::vector<std::string>& ids,
                                  const std::vector<double>& truth,
                                  const std::vector<double>& pred,
                                  const std::filesystem::path& path) {
  detail::atomic_write(path, [&](std::ofstream& out) {
    out << "system_id,true_rul,predicted_rul\n";
    for (std::size_t i = 0; i < ids.size(); ++i)
      out << ids[i] << ',' << format_double(truth[i]) << ',' << format_double(pred[i])
          << '\n';
  });
}

struct PredictionRows {
  std::vector<std::string> ids;
  std::vector<double> truth;
  std::vector<double> pred;
};

inline PredictionRows read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in = detail::open_in(path);
  PredictionRows rows;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) continue;  // header
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, t, p;
    if (!std::getline(ss, id, ',') || !std::getline(ss, t, ',') || !std::getline(ss, p))
      throw data_error("predictions csv: malformed row", lineno);
    try {
      rows.truth.push_back(std::stod(t));
      rows.pred.push_back(std::stod(p));
    } catch (const std::exception&) {
      throw data_error("predictions csv: non-numeric value", lineno);
    }
    rows.ids.push_back(id);
  }
  return rows;
}

inline void save_checkpoint(const std::filesystem::path& dir, const VariationalState& st,
                            const PrognosticParams& nets) {
  std::filesystem::create_directories(dir);
  detail::atomic_write(dir / "state.json",
                       [&](std::ofstream& out) { out << to_json(st).dump(); });
  detail::atomic_write(dir / "prognostics.json",
                       [&](std::ofstream& out) { out << to_json(nets).dump(); });
}

}  // namespace dpmm_rul

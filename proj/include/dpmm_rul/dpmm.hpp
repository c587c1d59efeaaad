#pragma once

#include "dpmm_rul/common.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace dpmm_rul {

// Mass below which a component is considered inactive. Inactive components
// are retained until a merge pass absorbs them.
inline constexpr double kActiveMass = 1e-3;

/// Diagonal-regime base measure: D independent scalar normal-inverse-gamma
/// factors written in NIW form, psi0 holding the diagonal of Psi_0.
struct BaseNIW {
  Vector m0;
  double kappa0 = 1.0;
  double nu0 = 3.0;
  Vector psi0;
};

struct StickPrior {
  double alpha = 1.0;
  BaseNIW base;
};

/// Posterior-mean Gaussian parameters of one failure mode.
struct ModeParams {
  Vector mean;
  Vector var;  // > 0
};

struct NiwPosterior {
  Vector m;
  double kappa = 1.0;
  double nu = 3.0;
  Vector psi;
};

/// Truncated variational posterior. The K-th stick is forced closed
/// (beta_K = 1); stick_a/stick_b entry K-1 is kept for symmetry but takes
/// no part in the math.
struct VariationalState {
  Matrix resp;  // N x K, rows sum to 1
  Vector stick_a;
  Vector stick_b;
  std::vector<NiwPosterior> niw;

  Eigen::Index K() const { return resp.cols(); }
  Eigen::Index N() const { return resp.rows(); }
};

// ---------------------------------------------------------------------------
// Stick-breaking
// ---------------------------------------------------------------------------

/// pi_k = beta_k * prod_{i<k} (1 - beta_i), final break forced to 1 so the
/// weights close to exactly 1.
inline Vector stick_weights(const Vector& betas) {
  const Eigen::Index K = betas.size();
  if (K < 1) throw std::invalid_argument("stick_weights: empty input");
  for (Eigen::Index k = 0; k + 1 < K; ++k)
    if (!(betas[k] > 0.0 && betas[k] < 1.0))
      throw std::invalid_argument("stick_weights: betas must lie in (0,1)");
  Vector pi(K);
  double remaining = 1.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    const double b = (k + 1 == K) ? 1.0 : betas[k];
    pi[k] = b * remaining;
    remaining *= (1.0 - b);
  }
  return pi;
}

/// E[log pi_k] under q(beta); the closed last break contributes no
/// E[log beta] term.
inline Vector expected_log_pi(const VariationalState& st) {
  const Eigen::Index K = st.K();
  Vector out(K);
  double tail = 0.0;  // sum of E[log(1 - beta_j)] for j < k
  for (Eigen::Index k = 0; k < K; ++k) {
    if (k + 1 == K) {
      out[k] = tail;
    } else {
      const double a = st.stick_a[k], b = st.stick_b[k];
      const double dab = digamma(a + b);
      out[k] = digamma(a) - dab + tail;
      tail += digamma(b) - dab;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Expected Gaussian log density under the NIW posterior
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr double kLog2Pi = 1.8378770664093454836;
}

/// N x K matrix of E_q[log N(l_n | mu_k, Sigma_k)].
inline Matrix expected_log_likelihood_matrix(const VariationalState& st, const Matrix& X) {
  const Eigen::Index N = X.rows(), D = X.cols(), K = st.K();
  Matrix ll(N, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& p = st.niw[static_cast<std::size_t>(k)];
    // E[log sigma^2_d] = log(psi_d / 2) - digamma(nu/2)
    const double dg = digamma(0.5 * p.nu);
    const double sum_log = (p.psi.array() / 2.0).log().sum() - static_cast<double>(D) * dg;
    const Vector w = p.nu * p.psi.cwiseInverse();  // E[1/sigma^2_d]
    const double constant = -0.5 * static_cast<double>(D) * detail::kLog2Pi -
                            0.5 * sum_log - 0.5 * static_cast<double>(D) / p.kappa;
    ll.col(k) = (-0.5 *
                 ((X.rowwise() - p.m.transpose()).array().square().matrix() * w).array())
                    .matrix()
                    .array() +
                constant;
  }
  return ll;
}

inline double expected_log_likelihood(const Vector& obs, Eigen::Index k,
                                      const VariationalState& st) {
  const auto& p = st.niw[static_cast<std::size_t>(k)];
  const Eigen::Index D = obs.size();
  const double dg = digamma(0.5 * p.nu);
  double acc = -0.5 * static_cast<double>(D) * detail::kLog2Pi;
  for (Eigen::Index d = 0; d < D; ++d) {
    const double elog_var = std::log(p.psi[d] / 2.0) - dg;
    const double diff = obs[d] - p.m[d];
    acc -= 0.5 * (elog_var + p.nu / p.psi[d] * diff * diff + 1.0 / p.kappa);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// CAVI coordinate updates
// ---------------------------------------------------------------------------

inline void update_responsibilities(VariationalState& st, const Matrix& X) {
  Matrix logr = expected_log_likelihood_matrix(st, X);
  logr.rowwise() += expected_log_pi(st).transpose();
  for (Eigen::Index n = 0; n < logr.rows(); ++n) {
    const double lse = log_sum_exp(logr.row(n));
    if (!std::isfinite(lse))
      throw std::runtime_error("update_responsibilities: non-finite row normalizer");
    st.resp.row(n) = (logr.row(n).array() - lse).exp();
  }
}

inline void update_sticks(VariationalState& st, double alpha) {
  const Eigen::Index K = st.K();
  const Vector mass = st.resp.colwise().sum();
  double tail = 0.0;  // sum of mass_j for j > k
  st.stick_a.resize(K);
  st.stick_b.resize(K);
  for (Eigen::Index k = K - 1; k >= 0; --k) {
    st.stick_a[k] = 1.0 + mass[k];
    st.stick_b[k] = alpha + tail;
    tail += mass[k];
  }
}

inline void update_niw(VariationalState& st, const Matrix& X, const BaseNIW& base) {
  const Eigen::Index K = st.K(), D = X.cols();
  st.niw.resize(static_cast<std::size_t>(K));
  for (Eigen::Index k = 0; k < K; ++k) {
    auto& p = st.niw[static_cast<std::size_t>(k)];
    const Vector r = st.resp.col(k);
    const double nk = r.sum();
    p.kappa = base.kappa0 + nk;
    p.nu = base.nu0 + nk;
    if (nk <= 0.0) {
      p.m = base.m0;
      p.psi = base.psi0;
      continue;
    }
    const Vector lbar = (X.transpose() * r) / nk;
    const Vector scatter =
        ((X.rowwise() - lbar.transpose()).array().square().matrix().transpose() * r);
    const Vector dev = lbar - base.m0;
    p.m = (base.kappa0 * base.m0 + nk * lbar) / (base.kappa0 + nk);
    p.psi = base.psi0 + scatter +
            (base.kappa0 * nk / (base.kappa0 + nk)) * dev.array().square().matrix();
  }
}

// ---------------------------------------------------------------------------
// ELBO (seven-term decomposition, diagonal regime)
// ---------------------------------------------------------------------------

inline double elbo(const VariationalState& st, const Matrix& X, const StickPrior& prior) {
  const Eigen::Index N = st.N(), K = st.K(), D = X.cols();
  const BaseNIW& base = prior.base;

  const Matrix ll = expected_log_likelihood_matrix(st, X);
  const double t1 = (st.resp.array() * ll.array()).sum();

  const Vector elog_pi = expected_log_pi(st);
  const double t2 = (st.resp * elog_pi).sum();

  double t3 = 0.0, t5 = 0.0;
  const double log_norm = std::lgamma(1.0 + prior.alpha) - std::lgamma(prior.alpha);
  for (Eigen::Index k = 0; k + 1 < K; ++k) {
    const double a = st.stick_a[k], b = st.stick_b[k];
    const double dab = digamma(a + b);
    const double elog_b = digamma(a) - dab;
    const double elog_1mb = digamma(b) - dab;
    t3 += (prior.alpha - 1.0) * elog_1mb + log_norm;
    t5 += (a - 1.0) * elog_b + (b - 1.0) * elog_1mb + std::lgamma(a + b) -
          std::lgamma(a) - std::lgamma(b);
  }

  // Per-dimension scalar NIW cross-entropies and entropies.
  double t4 = 0.0, t7 = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& p = st.niw[static_cast<std::size_t>(k)];
    const double dg = digamma(0.5 * p.nu);
    const double a0 = 0.5 * base.nu0, aq = 0.5 * p.nu;
    for (Eigen::Index d = 0; d < D; ++d) {
      const double elog_var = std::log(p.psi[d] / 2.0) - dg;
      const double einv_var = p.nu / p.psi[d];
      const double dev = p.m[d] - base.m0[d];
      // E[log p(mu_d | sigma^2_d)] + E[log p(sigma^2_d)]
      t4 += -0.5 * detail::kLog2Pi + 0.5 * std::log(base.kappa0) - 0.5 * elog_var -
            0.5 * base.kappa0 * (1.0 / p.kappa + einv_var * dev * dev);
      t4 += a0 * std::log(0.5 * base.psi0[d]) - std::lgamma(a0) -
            (a0 + 1.0) * elog_var - 0.5 * base.psi0[d] * einv_var;
      // E[log q(mu_d | sigma^2_d)] + E[log q(sigma^2_d)]
      t7 += -0.5 * detail::kLog2Pi + 0.5 * std::log(p.kappa) - 0.5 * elog_var - 0.5;
      t7 += aq * std::log(0.5 * p.psi[d]) - std::lgamma(aq) - (aq + 1.0) * elog_var - aq;
    }
  }

  double t6 = 0.0;
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index k = 0; k < K; ++k) {
      const double r = st.resp(n, k);
      if (r > 0.0) t6 += r * std::log(r);
    }

  return t1 + t2 + t3 + t4 - t5 - t6 - t7;
}

/// One CAVI round; returns the ELBO of the updated state.
inline double cavi_sweep(VariationalState& st, const Matrix& X, const StickPrior& prior) {
  update_responsibilities(st, X);
  update_sticks(st, prior.alpha);
  update_niw(st, X, prior.base);
  return elbo(st, X, prior);
}

inline std::vector<int> hard_assign(const VariationalState& st) {
  std::vector<int> z(static_cast<std::size_t>(st.N()));
  for (Eigen::Index n = 0; n < st.N(); ++n) {
    int best = 0;
    for (Eigen::Index k = 1; k < st.K(); ++k)
      if (st.resp(n, k) > st.resp(n, best)) best = static_cast<int>(k);
    z[static_cast<std::size_t>(n)] = best;
  }
  return z;
}

inline Vector component_mass(const VariationalState& st) {
  return st.resp.colwise().sum();
}

inline std::vector<int> active_components(const VariationalState& st,
                                          double threshold = kActiveMass) {
  std::vector<int> active;
  const Vector mass = component_mass(st);
  for (Eigen::Index k = 0; k < st.K(); ++k)
    if (mass[k] >= threshold) active.push_back(static_cast<int>(k));
  return active;
}

/// Plug-in Gaussian parameters (posterior means); var = psi / (nu - 2)
/// requires nu > 2, guaranteed by nu0 = 3.
inline ModeParams mode_params(const VariationalState& st, Eigen::Index k) {
  const auto& p = st.niw[static_cast<std::size_t>(k)];
  if (p.nu <= 2.0) throw std::runtime_error("mode_params: nu must exceed 2");
  return {p.m, p.psi / (p.nu - 2.0)};
}

/// Prior with data-driven defaults: m0 = data mean, psi0 = per-dimension
/// variance (floored), kappa0 = 1, nu0 = 3.
inline StickPrior make_default_prior(const Matrix& X, double alpha = 1.0) {
  StickPrior prior;
  prior.alpha = alpha;
  prior.base.m0 = X.colwise().mean();
  const Matrix centered = X.rowwise() - prior.base.m0.transpose();
  prior.base.psi0 = centered.array().square().colwise().mean();
  for (Eigen::Index d = 0; d < prior.base.psi0.size(); ++d)
    prior.base.psi0[d] = std::max(prior.base.psi0[d], 1e-12);
  prior.base.kappa0 = 1.0;
  prior.base.nu0 = 3.0;
  return prior;
}

/// K = 1 start per the framework: every system fully owns the single mode.
inline VariationalState initial_state(const Matrix& X, const StickPrior& prior) {
  VariationalState st;
  st.resp = Matrix::Ones(X.rows(), 1);
  update_sticks(st, prior.alpha);
  update_niw(st, X, prior.base);
  return st;
}

// ---------------------------------------------------------------------------
// Snapshot serialization (versioned JSON)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const VariationalState& st) {
  nlohmann::json j;
  j["version"] = 1;
  j["resp"] = std::vector<std::vector<double>>();
  for (Eigen::Index n = 0; n < st.N(); ++n)
    j["resp"].push_back(std::vector<double>(st.resp.row(n).begin(), st.resp.row(n).end()));
  j["stick_a"] = std::vector<double>(st.stick_a.begin(), st.stick_a.end());
  j["stick_b"] = std::vector<double>(st.stick_b.begin(), st.stick_b.end());
  j["niw"] = nlohmann::json::array();
  for (const auto& p : st.niw) {
    nlohmann::json e;
    e["m"] = std::vector<double>(p.m.begin(), p.m.end());
    e["kappa"] = p.kappa;
    e["nu"] = p.nu;
    e["psi"] = std::vector<double>(p.psi.begin(), p.psi.end());
    j["niw"].push_back(std::move(e));
  }
  return j;
}

inline VariationalState state_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j["version"].get<int>() != 1)
    throw data_error("state snapshot: unsupported version");
  VariationalState st;
  const auto rows = j["resp"].get<std::vector<std::vector<double>>>();
  const Eigen::Index N = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index K = N > 0 ? static_cast<Eigen::Index>(rows[0].size()) : 0;
  st.resp.resize(N, K);
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index k = 0; k < K; ++k)
      st.resp(n, k) = rows[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)];
  const auto a = j["stick_a"].get<std::vector<double>>();
  const auto b = j["stick_b"].get<std::vector<double>>();
  st.stick_a = Eigen::Map<const Vector>(a.data(), static_cast<Eigen::Index>(a.size()));
  st.stick_b = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
  for (const auto& e : j["niw"]) {
    NiwPosterior p;
    const auto m = e["m"].get<std::vector<double>>();
    const auto psi = e["psi"].get<std::vector<double>>();
    p.m = Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
    p.psi = Eigen::Map<const Vector>(psi.data(), static_cast<Eigen::Index>(psi.size()));
    p.kappa = e["kappa"].get<double>();
    p.nu = e["nu"].get<double>();
    st.niw.push_back(std::move(p));
  }
  return st;
}

}  // namespace dpmm_rul

// Shared test utilities. The reference implementations here deliberately
// take the slow, obvious route (loops, contingency tables, finite
// differences) so they stay independent of the library's vectorized paths.
#pragma once

#include "dpmm_rul/common.hpp"
#include "dpmm_rul/dpmm.hpp"

#include <map>
#include <random>
#include <vector>

namespace testref {

using dpmm_rul::Matrix;
using dpmm_rul::Vector;

/// Digamma via central differences of lgamma; ~1e-9 absolute, good enough
/// for oracle comparisons and independent of the library's series.
inline double digamma_fd(double x) {
  const double h = 1e-6 * std::max(1.0, x);
  return (std::lgamma(x + h) - std::lgamma(x - h)) / (2.0 * h);
}

/// O(N^2) silhouette straight from the definition.
inline double silhouette_ref(const Matrix& X, const std::vector<int>& labels) {
  const Eigen::Index N = X.rows();
  std::map<int, int> counts;
  for (int l : labels) counts[l]++;
  if (counts.size() < 2) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    const int own = labels[static_cast<std::size_t>(i)];
    if (counts[own] <= 1) continue;
    std::map<int, double> sum;
    for (Eigen::Index j = 0; j < N; ++j)
      sum[labels[static_cast<std::size_t>(j)]] += (X.row(i) - X.row(j)).norm();
    const double a = sum[own] / (counts[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [lab, s] : sum)
      if (lab != own) b = std::min(b, s / counts[lab]);
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(N);
}

/// Contingency-table NMI (arithmetic-mean normalizer, natural log).
inline double nmi_ref(const std::vector<int>& u, const std::vector<int>& v) {
  const double n = static_cast<double>(u.size());
  std::map<int, double> cu, cv;
  std::map<std::pair<int, int>, double> cj;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cu[u[i]] += 1;
    cv[v[i]] += 1;
    cj[{u[i], v[i]}] += 1;
  }
  auto entropy = [&](const std::map<int, double>& c) {
    double h = 0;
    for (auto& [_, x] : c) h -= x / n * std::log(x / n);
    return h;
  };
  const double hu = entropy(cu), hv = entropy(cv);
  if (hu <= 0 || hv <= 0) return 0.0;
  double mi = 0;
  for (auto& [k, x] : cj) {
    const double pij = x / n;
    mi += pij * std::log(pij / ((cu[k.first] / n) * (cv[k.second] / n)));
  }
  return mi / (0.5 * (hu + hv));
}

/// Weighted-moment conjugate update, written as plain loops.
inline dpmm_rul::NiwPosterior niw_update_ref(const Matrix& X, const Vector& r,
                                             const dpmm_rul::BaseNIW& base,
                                             Eigen::Index d_check) {
  const Eigen::Index N = X.rows();
  double nk = 0;
  for (Eigen::Index n = 0; n < N; ++n) nk += r[n];
  dpmm_rul::NiwPosterior p;
  p.kappa = base.kappa0 + nk;
  p.nu = base.nu0 + nk;
  p.m.resize(d_check);
  p.psi.resize(d_check);
  for (Eigen::Index d = 0; d < d_check; ++d) {
    if (nk <= 0) {
      p.m[d] = base.m0[d];
      p.psi[d] = base.psi0[d];
      continue;
    }
    double lbar = 0;
    for (Eigen::Index n = 0; n < N; ++n) lbar += r[n] * X(n, d);
    lbar /= nk;
    double scatter = 0;
    for (Eigen::Index n = 0; n < N; ++n)
      scatter += r[n] * (X(n, d) - lbar) * (X(n, d) - lbar);
    p.m[d] = (base.kappa0 * base.m0[d] + nk * lbar) / (base.kappa0 + nk);
    p.psi[d] = base.psi0[d] + scatter +
               base.kappa0 * nk / (base.kappa0 + nk) * (lbar - base.m0[d]) *
                   (lbar - base.m0[d]);
  }
  return p;
}

/// Random valid variational state over random data, for property tests.
struct RandomInstance {
  Matrix X;
  dpmm_rul::VariationalState state;
  dpmm_rul::StickPrior prior;
};

inline RandomInstance random_instance(std::mt19937_64& eng, int max_n = 30, int max_d = 6,
                                      int max_k = 5) {
  std::uniform_int_distribution<int> nd(2, max_n), dd(1, max_d), kd(1, max_k);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> norm(0.0, 1.0);
  const int N = nd(eng), D = dd(eng), K = kd(eng);

  RandomInstance inst;
  inst.X.resize(N, D);
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index d = 0; d < D; ++d) inst.X(n, d) = 3.0 * norm(eng);

  inst.prior.alpha = 0.5 + unif(eng) * 2.0;
  inst.prior.base.m0 = Vector::Zero(D);
  inst.prior.base.kappa0 = 0.5 + unif(eng);
  inst.prior.base.nu0 = 3.0 + unif(eng);
  inst.prior.base.psi0 = Vector::Constant(D, 0.5 + unif(eng) * 2.0);

  auto& st = inst.state;
  st.resp.resize(N, K);
  for (Eigen::Index n = 0; n < N; ++n) {
    double row_sum = 0;
    for (Eigen::Index k = 0; k < K; ++k) {
      st.resp(n, k) = 1e-3 + unif(eng);
      row_sum += st.resp(n, k);
    }
    st.resp.row(n) /= row_sum;
  }
  st.stick_a.resize(K);
  st.stick_b.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    st.stick_a[k] = 0.5 + 3.0 * unif(eng);
    st.stick_b[k] = 0.5 + 3.0 * unif(eng);
  }
  for (int k = 0; k < K; ++k) {
    dpmm_rul::NiwPosterior p;
    p.m = Vector::Zero(D);
    for (Eigen::Index d = 0; d < D; ++d) p.m[d] = norm(eng);
    p.kappa = inst.prior.base.kappa0 + 2.0 * unif(eng);
    p.nu = inst.prior.base.nu0 + 2.0 * unif(eng);
    p.psi = Vector::Constant(D, 0.5 + 2.0 * unif(eng));
    st.niw.push_back(std::move(p));
  }
  return inst;
}

}  // namespace testref

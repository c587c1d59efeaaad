#pragma once

#include "dpmm_rul/dpmm.hpp"

#include <atomic>
#include <functional>
#include <future>
#include <numeric>
#include <thread>
#include <vector>

namespace dpmm_rul {

// ---------------------------------------------------------------------------
// Silhouette index
// ---------------------------------------------------------------------------

inline Matrix pairwise_distances(const Matrix& X) {
  const Eigen::Index N = X.rows();
  const Vector sq = X.rowwise().squaredNorm();
  Matrix d2 = (-2.0 * (X * X.transpose())).colwise() + sq;
  d2.rowwise() += sq.transpose();
  return d2.cwiseMax(0.0).cwiseSqrt();
}

/// Mean per-point silhouette. Single-cluster labelings score 0, as do
/// points in singleton clusters.
inline double silhouette_from_distances(const Matrix& dist,
                                        const std::vector<int>& labels) {
  const Eigen::Index N = dist.rows();
  if (N == 0 || labels.size() != static_cast<std::size_t>(N))
    throw std::invalid_argument("silhouette: bad input");

  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("silhouette: negative label");
    max_label = std::max(max_label, l);
  }
  std::vector<double> count(static_cast<std::size_t>(max_label) + 1, 0.0);
  for (int l : labels) count[static_cast<std::size_t>(l)] += 1.0;
  int clusters = 0;
  for (double c : count)
    if (c > 0.0) ++clusters;
  if (clusters < 2) return 0.0;

  double total = 0.0;
  std::vector<double> sums(count.size());
  for (Eigen::Index i = 0; i < N; ++i) {
    const int own = labels[static_cast<std::size_t>(i)];
    if (count[static_cast<std::size_t>(own)] <= 1.0) continue;  // singleton
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < N; ++j)
      sums[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += dist(i, j);
    const double a = sums[static_cast<std::size_t>(own)] /
                     (count[static_cast<std::size_t>(own)] - 1.0);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < count.size(); ++c)
      if (static_cast<int>(c) != own && count[c] > 0.0)
        b = std::min(b, sums[c] / count[c]);
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(N);
}

inline double silhouette(const Matrix& X, const std::vector<int>& labels) {
  return silhouette_from_distances(pairwise_distances(X), labels);
}

// ---------------------------------------------------------------------------
// Joint performance score
// ---------------------------------------------------------------------------

struct JScoreReport {
  double silhouette = 0.0;
  double rul_loss = 0.0;
  double omega = 0.0;
  double score = 0.0;
};

inline JScoreReport j_score(double sil, double loss, double omega) {
  if (!(omega > 0.0)) throw std::invalid_argument("j_score: omega must be > 0");
  return {sil, loss, omega, sil - omega * loss};
}

inline JScoreReport j_score(const Matrix& X, const std::vector<int>& labels, double loss,
                            double omega) {
  return j_score(silhouette(X, labels), loss, omega);
}

// ---------------------------------------------------------------------------
// Birth moves
// ---------------------------------------------------------------------------

struct BirthConfig {
  double r_threshold = 0.1;
  int k_prime = 2;        // 1..3 recommended; 0 is a no-op test double
  int local_iters = 20;
  int truncation_cap = 20;
};

inline void validate(const BirthConfig& cfg) {
  if (!(cfg.r_threshold > 0.0 && cfg.r_threshold < 1.0))
    throw std::invalid_argument("BirthConfig: r_threshold must be in (0,1)");
  if (cfg.k_prime < 0 || cfg.k_prime > 3)
    throw std::invalid_argument("BirthConfig: k_prime must be in {0,1,2,3}");
  if (cfg.local_iters < 1) throw std::invalid_argument("BirthConfig: local_iters >= 1");
}

struct BirthProposal {
  bool ok = false;
  int target_mode = -1;
  int added = 0;
  VariationalState expanded;  // appended components, responsibilities untouched
};

namespace detail {

/// Leading principal direction of the centered rows, by power iteration.
inline Vector principal_direction(const Matrix& Xc) {
  Eigen::Index seed_dim = 0;
  Xc.array().square().colwise().sum().maxCoeff(&seed_dim);
  Vector v = Vector::Zero(Xc.cols());
  v[seed_dim] = 1.0;
  for (int it = 0; it < 30; ++it) {
    Vector w = Xc.transpose() * (Xc * v);
    const double norm = w.norm();
    if (norm < 1e-300) break;
    v = w / norm;
  }
  return v;
}

/// Quantile split of the subset along its principal direction -> one-hot
/// responsibilities for the local fit.
inline Matrix split_responsibilities(const Matrix& Xs, int k_prime) {
  const Eigen::Index m = Xs.rows();
  Matrix resp = Matrix::Zero(m, k_prime);
  if (k_prime == 1) {
    resp.col(0).setOnes();
    return resp;
  }
  const Matrix Xc = Xs.rowwise() - Xs.colwise().mean();
  const Vector proj = Xc * principal_direction(Xc);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return proj[a] < proj[b]; });
  for (Eigen::Index r = 0; r < m; ++r) {
    const int bucket = std::min<int>(k_prime - 1,
                                     static_cast<int>((r * k_prime) / m));
    resp(order[static_cast<std::size_t>(r)], bucket) = 1.0;
  }
  return resp;
}

}  // namespace detail

/// Fit a small local mixture to the systems loyal to a random active mode
/// and append its components. Responsibilities of the returned state are
/// unchanged (new columns zero); sticks are refreshed so the state stays
/// valid. No score is evaluated here.
inline BirthProposal propose_birth(const VariationalState& st, const Matrix& X,
                                   const StickPrior& prior, const BirthConfig& cfg,
                                   Rng& rng) {
  validate(cfg);
  BirthProposal prop;
  prop.expanded = st;
  if (cfg.k_prime == 0) return prop;
  if (st.K() + cfg.k_prime > cfg.truncation_cap) return prop;

  const auto active = active_components(st);
  if (active.empty()) return prop;
  const int target = active[static_cast<std::size_t>(rng.below(active.size()))];
  prop.target_mode = target;

  std::vector<Eigen::Index> subset;
  for (Eigen::Index n = 0; n < st.N(); ++n)
    if (st.resp(n, target) >= cfg.r_threshold) subset.push_back(n);
  if (subset.empty()) return prop;

  Matrix Xs(static_cast<Eigen::Index>(subset.size()), X.cols());
  for (std::size_t i = 0; i < subset.size(); ++i)
    Xs.row(static_cast<Eigen::Index>(i)) = X.row(subset[i]);

  VariationalState local;
  local.resp = detail::split_responsibilities(Xs, cfg.k_prime);
  update_sticks(local, prior.alpha);
  update_niw(local, Xs, prior.base);
  for (int it = 0; it < cfg.local_iters; ++it) cavi_sweep(local, Xs, prior);

  const Eigen::Index K = st.K();
  prop.expanded.resp.conservativeResize(Eigen::NoChange, K + cfg.k_prime);
  prop.expanded.resp.rightCols(cfg.k_prime).setZero();
  for (int k = 0; k < cfg.k_prime; ++k)
    prop.expanded.niw.push_back(local.niw[static_cast<std::size_t>(k)]);
  update_sticks(prop.expanded, prior.alpha);
  prop.ok = true;
  prop.added = cfg.k_prime;
  return prop;
}

/// Full reassignment pass after a structural change.
inline void refresh_after_structure_change(VariationalState& st, const Matrix& X,
                                           const StickPrior& prior) {
  update_responsibilities(st, X);
  update_sticks(st, prior.alpha);
  update_niw(st, X, prior.base);
}

struct BirthResult {
  bool performed = false;
  int target_mode = -1;
  int added = 0;
};

/// Unconditional birth (all births initially accepted); redundant
/// components are left for the merge pass to clean up.
inline BirthResult birth_move(VariationalState& st, const Matrix& X,
                              const StickPrior& prior, const BirthConfig& cfg, Rng& rng) {
  BirthProposal prop = propose_birth(st, X, prior, cfg, rng);
  if (!prop.ok) return {false, prop.target_mode, 0};
  st = std::move(prop.expanded);
  refresh_after_structure_change(st, X, prior);
  return {true, prop.target_mode, prop.added};
}

// ---------------------------------------------------------------------------
// Merge moves
// ---------------------------------------------------------------------------

/// Higher-is-better score of a candidate structure (labels + state). The
/// J variant wraps silhouette - omega * validation RUL loss; ablation
/// variants substitute ELBO or negated loss. Must be safe to call from
/// worker threads.
using CandidateScore =
    std::function<double(const std::vector<int>&, const VariationalState&)>;

struct MergeOutcome {
  bool accepted = false;
  int ka = -1;
  int kb = -1;
  double delta = 0.0;
  int pairs_evaluated = 0;
  int trivial_absorbed = 0;
  double best_delta = -std::numeric_limits<double>::infinity();
};

namespace detail {

/// Pool kb into ka and drop kb; only the merged component's posterior is
/// refreshed, plus the sticks.
inline VariationalState merge_pair(const VariationalState& st, const Matrix& X,
                                   const StickPrior& prior, int ka, int kb) {
  const Eigen::Index K = st.K();
  VariationalState out;
  out.resp.resize(st.N(), K - 1);
  out.niw.reserve(static_cast<std::size_t>(K - 1));
  Eigen::Index at = 0;
  for (Eigen::Index k = 0; k < K; ++k) {
    if (k == kb) continue;
    out.resp.col(at) = (k == ka) ? (st.resp.col(ka) + st.resp.col(kb)).eval()
                                 : st.resp.col(k).eval();
    out.niw.push_back(st.niw[static_cast<std::size_t>(k)]);
    ++at;
  }
  update_sticks(out, prior.alpha);

  // refresh the pooled component only
  const Eigen::Index merged = ka < kb ? ka : ka - 1;
  VariationalState one;
  one.resp = out.resp.col(merged);
  update_niw(one, X, prior.base);
  out.niw[static_cast<std::size_t>(merged)] = one.niw[0];
  return out;
}

}  // namespace detail

/// Absorb components with negligible mass and no hard assignments into the
/// nearest active component. These merges are trivial: they change no
/// labels, so no score evaluation is involved.
inline int absorb_empty_components(VariationalState& st, const Matrix& X,
                                   const StickPrior& prior) {
  int absorbed = 0;
  for (;;) {
    if (st.K() < 2) break;
    const Vector mass = component_mass(st);
    const auto z = hard_assign(st);
    std::vector<bool> holds(static_cast<std::size_t>(st.K()), false);
    for (int l : z) holds[static_cast<std::size_t>(l)] = true;
    int victim = -1;
    for (Eigen::Index k = 0; k < st.K(); ++k)
      if (mass[k] < kActiveMass && !holds[static_cast<std::size_t>(k)]) {
        victim = static_cast<int>(k);
        break;
      }
    if (victim < 0) break;
    int nearest = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < st.K(); ++k) {
      if (static_cast<int>(k) == victim || mass[k] < kActiveMass) continue;
      const double d =
          (st.niw[static_cast<std::size_t>(k)].m - st.niw[static_cast<std::size_t>(victim)].m)
              .norm();
      if (d < best) {
        best = d;
        nearest = static_cast<int>(k);
      }
    }
    if (nearest < 0) break;
    st = detail::merge_pair(st, X, prior, nearest, victim);
    ++absorbed;
  }
  return absorbed;
}

/// Evaluate every unordered active pair under `score` and apply the single
/// best strict improvement. Candidate evaluations run concurrently; the
/// accept decision is a deterministic scan over the fixed pair order.
inline MergeOutcome merge_move(VariationalState& st, const Matrix& X,
                               const StickPrior& prior, const CandidateScore& score,
                               int max_threads = 0) {
  MergeOutcome out;
  out.trivial_absorbed = absorb_empty_components(st, X, prior);

  const auto active = active_components(st);
  if (active.size() < 2) return out;

  std::vector<std::pair<int, int>> pairs;
  for (std::size_t i = 0; i < active.size(); ++i)
    for (std::size_t j = i + 1; j < active.size(); ++j)
      pairs.emplace_back(active[i], active[j]);
  out.pairs_evaluated = static_cast<int>(pairs.size());

  const double base = score(hard_assign(st), st);

  struct Eval {
    double delta = -std::numeric_limits<double>::infinity();
    VariationalState state;
  };
  std::vector<Eval> evals(pairs.size());
  auto run_one = [&](std::size_t i) {
    const auto [ka, kb] = pairs[i];
    VariationalState cand = detail::merge_pair(st, X, prior, ka, kb);
    const double s = score(hard_assign(cand), cand);
    evals[i].delta = s - base;
    evals[i].state = std::move(cand);
  };

  unsigned threads = max_threads > 0 ? static_cast<unsigned>(max_threads)
                                     : std::thread::hardware_concurrency();
  if (threads <= 1 || pairs.size() <= 1) {
    for (std::size_t i = 0; i < pairs.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= pairs.size()) return;
        run_one(i);
      }
    };
    std::vector<std::future<void>> futs;
    const unsigned n_workers = std::min<unsigned>(threads, static_cast<unsigned>(pairs.size()));
    futs.reserve(n_workers);
    for (unsigned t = 0; t < n_workers; ++t)
      futs.push_back(std::async(std::launch::async, worker));
    for (auto& f : futs) f.get();
  }

  std::size_t best = pairs.size();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (evals[i].delta > out.best_delta) out.best_delta = evals[i].delta;
    if (evals[i].delta > 0.0 &&
        (best == pairs.size() || evals[i].delta > evals[best].delta))
      best = i;
  }
  if (best == pairs.size()) return out;

  st = std::move(evals[best].state);
  refresh_after_structure_change(st, X, prior);
  out.accepted = true;
  out.ka = pairs[best].first;
  out.kb = pairs[best].second;
  out.delta = evals[best].delta;
  return out;
}

}  // namespace dpmm_rul

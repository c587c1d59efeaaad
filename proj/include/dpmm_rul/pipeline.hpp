#pragma once

#include "dpmm_rul/io.hpp"
#include "dpmm_rul/metrics.hpp"
#include "dpmm_rul/preprocess.hpp"
#include "dpmm_rul/prognostics.hpp"
#include "dpmm_rul/structure.hpp"

#include <map>
#include <memory>
#include <numeric>
#include <set>

namespace dpmm_rul {

enum class ScoreVariant { JScore, Elbo, RulLoss };
enum class TestProtocol { AllWindows, LastWindow };

inline std::string to_string(ScoreVariant v) {
  switch (v) {
    case ScoreVariant::JScore: return "j-score";
    case ScoreVariant::Elbo: return "elbo";
    case ScoreVariant::RulLoss: return "rul-loss";
  }
  return "?";
}

struct PipelineConfig {
  int max_iters = 40;
  int convergence_patience = 5;
  int cavi_sweeps_per_iter = 5;
  Alignment alignment = Alignment::TruncatePad;
  double omega = 1e-3;
  int structure_cadence = 1;  // structure pass attempted every n-th iteration
  std::uint64_t seed = 1;
  ScoreVariant score = ScoreVariant::JScore;

  int window_len = 15;  // xi
  double alpha = 1.0;
  bool normalize_observations = false;
  TestProtocol test_protocol = TestProtocol::AllWindows;
  double rul_cap = -1.0;  // cap labels when > 0 (off by default)

  int pretrain_epochs = 50;
  int epochs_per_iter = 5;
  int batch_size = 64;
  double learn_rate = 1e-3;
  int unfreeze_iters = 3;

  int merge_retrain_epochs = 3;
  double merge_subsample = 0.2;
  double val_fraction = 0.1;
  double elbo_rel_tol = 1e-4;
  BirthConfig birth;

  int max_threads = 0;    // 0: hardware concurrency
  std::string out_dir;    // when set, report files + checkpoints land here
};

inline void validate(const PipelineConfig& cfg) {
  if (cfg.max_iters < 1) throw std::invalid_argument("PipelineConfig: max_iters >= 1");
  if (cfg.convergence_patience < 1)
    throw std::invalid_argument("PipelineConfig: patience >= 1");
  if (cfg.cavi_sweeps_per_iter < 1)
    throw std::invalid_argument("PipelineConfig: cavi_sweeps_per_iter >= 1");
  if (!(cfg.omega > 0.0)) throw std::invalid_argument("PipelineConfig: omega > 0");
  if (cfg.window_len < 1) throw std::invalid_argument("PipelineConfig: window_len >= 1");
  if (cfg.structure_cadence < 1)
    throw std::invalid_argument("PipelineConfig: structure_cadence >= 1");
}

/// True iff the trailing `patience` records share one mode count.
inline bool check_convergence(const std::vector<IterationRecord>& records, int patience) {
  if (patience < 1) throw std::invalid_argument("check_convergence: patience >= 1");
  if (records.empty()) throw std::invalid_argument("check_convergence: no records");
  if (static_cast<int>(records.size()) < patience) return false;
  const int count = records.back().active_modes;
  for (std::size_t i = records.size() - static_cast<std::size_t>(patience);
       i < records.size(); ++i)
    if (records[i].active_modes != count) return false;
  return true;
}

/// Append rows for newly arrived systems: uniform over active components,
/// zero elsewhere.
inline void append_uniform_rows(VariationalState& st, int n_new) {
  const auto active = active_components(st);
  const Eigen::Index n0 = st.N();
  st.resp.conservativeResize(n0 + n_new, Eigen::NoChange);
  st.resp.bottomRows(n_new).setZero();
  const double w = 1.0 / static_cast<double>(active.empty() ? st.K() : active.size());
  for (Eigen::Index n = n0; n < st.N(); ++n) {
    if (active.empty())
      st.resp.row(n).setConstant(w);
    else
      for (int k : active) st.resp(n, k) = w;
  }
}

struct RunReport {
  std::vector<IterationRecord> records;
  std::vector<StructureEvent> events;
  VariationalState state;
  PrognosticParams nets;
  std::vector<std::string> train_ids;
  std::vector<int> assignments;
  PredictionRows predictions;
  int t_bar = 0;
  int final_mode_count = 0;
  bool converged = false;
  int pretrain_iteration = -1;
};

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

class Pipeline {
public:
  Pipeline(PipelineConfig cfg, Fleet train, Fleet test,
           std::vector<StreamBatch> stream = {})
      : cfg_(std::move(cfg)),
        train_(std::move(train)),
        test_(std::move(test)),
        stream_(std::move(stream)) {
    validate(cfg_);
    if (train_.empty()) throw std::invalid_argument("Pipeline: empty training fleet");
    for (const auto& b : stream_)
      if (b.arrival_iteration < 0 || b.arrival_iteration >= cfg_.max_iters)
        throw std::invalid_argument("Pipeline: stream arrival outside run horizon");
    std::sort(stream_.begin(), stream_.end(),
              [](const StreamBatch& a, const StreamBatch& b) {
                return a.arrival_iteration < b.arrival_iteration;
              });
  }

  RunReport run() {
    initialize();
    RunReport report;
    double prev_gate_score = 0.0;
    bool have_prev = false;

    for (int iter = 1; iter <= cfg_.max_iters; ++iter) {
      ingest_due_batches(iter);

      double elbo_val = 0.0;
      for (int s = 0; s < cfg_.cavi_sweeps_per_iter; ++s)
        elbo_val = cavi_sweep(state_, X_, prior_);

      auto z = hard_assign(state_);
      double sil = silhouette_from_distances(dist_, z);

      // prognostics
      build_contexts(z);
      if (!nets_.pretrained) {
        pretrain(nets_, rows(W_, train_rows_), contexts_, ctx_of_rows(train_rows_, z),
                 labels(train_rows_), cfg_.pretrain_epochs, cfg_.batch_size,
                 cfg_.learn_rate, train_rng_);
        report.pretrain_iteration = iter;
      } else {
        refresh_embeddings();
        const bool cached = nets_.freeze_phi_l;
        train_epochs(nets_,
                     cached ? Matrix(static_cast<Eigen::Index>(train_rows_.size()), 0)
                            : rows(W_, train_rows_),
                     contexts_, ctx_of_rows(train_rows_, z), labels(train_rows_),
                     cfg_.epochs_per_iter, cfg_.batch_size, cfg_.learn_rate, train_rng_,
                     cached ? &emb_train_rows_ : nullptr);
      }
      refresh_embeddings();

      double val_loss = validation_loss(z);
      const double gate_score = variant_score(sil, val_loss, elbo_val);

      // structure pass, gated on the score not having dropped
      int births = 0, merges = 0, rejects = 0;
      const bool cadence_ok = (iter % cfg_.structure_cadence) == 0;
      const bool gate_ok = !have_prev || gate_score >= prev_gate_score;
      const int modes_before = count_distinct(z);
      if (cadence_ok && gate_ok)
        structure_pass(iter, z, elbo_val, births, merges, rejects, report.events);
      prev_gate_score = gate_score;
      have_prev = true;

      // re-infer after accepted moves
      z = hard_assign(state_);
      const int modes_after = count_distinct(z);
      if (modes_after != modes_before)
        unfreeze_on_structure_change(nets_, cfg_.unfreeze_iters);
      sil = silhouette_from_distances(dist_, z);
      build_contexts(z);
      val_loss = validation_loss(z);

      IterationRecord rec;
      rec.iteration = iter;
      rec.active_modes = modes_after;
      rec.elbo = elbo(state_, X_, prior_);
      rec.silhouette = sil;
      rec.score = gate_score;
      {
        const bool cached = nets_.freeze_phi_l;
        rec.train_rmse = rul_loss(
            nets_,
            cached ? Matrix(static_cast<Eigen::Index>(train_rows_.size()), 0)
                   : rows(W_, train_rows_),
            contexts_, ctx_of_rows(train_rows_, z), labels(train_rows_),
            cached ? &emb_train_rows_ : nullptr);
      }
      rec.test_rmse = test_rmse(z);
      rec.val_loss = val_loss;
      rec.nmi = train_nmi(z);
      rec.births = births;
      rec.merges = merges;
      rec.rejects = rejects;
      report.records.push_back(rec);

      advance_iteration(nets_);
      if (!cfg_.out_dir.empty()) save_checkpoint(cfg_.out_dir, state_, nets_);

      if (all_batches_ingested() && converged(report.records)) {
        report.converged = true;
        break;
      }
    }

    finalize(report);
    return report;
  }

private:
  // --- setup -------------------------------------------------------------

  void initialize() {
    t_bar_ = reference_length(train_);
    norm_ = fit_normalization(train_);
    Rng val_pick_rng(child_seed(cfg_.seed, 0x76ULL));
    train_rng_ = Rng(child_seed(cfg_.seed, 0x74ULL));
    birth_rng_ = Rng(child_seed(cfg_.seed, 0x62ULL));

    for (std::size_t i = 0; i < train_.size(); ++i) add_train_system(train_[i]);

    // held-out fold for the J score
    const int n = static_cast<int>(train_.size());
    const int n_val = static_cast<int>(std::floor(cfg_.val_fraction * n));
    std::vector<int> order(train_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), val_pick_rng.engine());
    std::set<int> val_set(order.begin(), order.begin() + std::max(0, n_val));
    for (std::size_t w = 0; w < win_sys_.size(); ++w) {
      if (val_set.count(win_sys_[w]))
        val_rows_.push_back(static_cast<Eigen::Index>(w));
      else
        train_rows_.push_back(static_cast<Eigen::Index>(w));
    }
    if (val_rows_.empty()) val_rows_ = train_rows_;  // tiny fleets: J loss in-sample
    assigned_rows_ = W_.rows();

    dist_ = pairwise_distances(X_);
    prior_ = make_default_prior(X_, cfg_.alpha);
    state_ = initial_state(X_, prior_);

    prepare_test_data();

    Rng net_rng(child_seed(cfg_.seed, 0x6eULL));
    const int window_dim = static_cast<int>(train_.front().sensors()) * cfg_.window_len;
    nets_ = make_prognostic_params(window_dim, 2 * static_cast<int>(X_.cols()), net_rng);
  }

  Vector align(const SensorHistory& h) const {
    if (cfg_.alignment == Alignment::TruncatePad) return truncate_pad(h, t_bar_).values;
    double horizon = static_cast<double>(h.length());
    if (h.true_rul) {
      const auto it = predicted_rul_.find(h.system_id);
      if (it != predicted_rul_.end()) horizon += std::max(0.0, it->second);
    }
    return temporal_warp(h, t_bar_, std::max(horizon, 1.0)).values;
  }

  void add_train_system(const SensorHistory& h) {
    const int sys_index = static_cast<int>(ids_.size());
    ids_.push_back(h.system_id);
    truth_.push_back(h.true_mode ? *h.true_mode : std::string());

    const SensorHistory normalized = apply_normalization(norm_, h);
    const Vector obs = cfg_.normalize_observations ? align(normalized) : align(h);
    X_.conservativeResize(X_.rows() + 1, obs.size());
    X_.row(X_.rows() - 1) = obs.transpose();

    for (auto& w : make_windows(normalized, cfg_.window_len, sys_index)) {
      Vector flat = flatten_window(w.window);
      W_.conservativeResize(W_.rows() + 1, flat.size());
      W_.row(W_.rows() - 1) = flat.transpose();
      double label = w.rul_label;
      if (cfg_.rul_cap > 0.0) label = std::min(label, cfg_.rul_cap);
      y_.conservativeResize(y_.size() + 1);
      y_[y_.size() - 1] = label;
      win_sys_.push_back(sys_index);
    }
  }

  void prepare_test_data() {
    for (std::size_t i = 0; i < test_.size(); ++i) {
      const auto& h = test_[i];
      const Vector obs = cfg_.normalize_observations
                             ? align(apply_normalization(norm_, h))
                             : align(h);
      Xt_.conservativeResize(Xt_.rows() + 1, obs.size());
      Xt_.row(Xt_.rows() - 1) = obs.transpose();

      const SensorHistory normalized = apply_normalization(norm_, h);
      if (cfg_.test_protocol == TestProtocol::AllWindows) {
        for (auto& w : make_windows(normalized, cfg_.window_len,
                                    static_cast<int>(i))) {
          append_test_window(flatten_window(w.window), w.rul_label,
                             static_cast<int>(i));
        }
      } else {
        append_test_window(last_window(normalized), h.true_rul ? *h.true_rul : 0.0,
                           static_cast<int>(i));
      }
    }
  }

  /// Final xi cycles; short histories are front-padded with their first row.
  Vector last_window(const SensorHistory& h) const {
    const int xi = cfg_.window_len;
    Matrix w(h.sensors(), xi);
    for (int c = 0; c < xi; ++c) {
      const Eigen::Index t = std::max<Eigen::Index>(0, h.length() - xi + c);
      w.col(c) = h.readings.row(t).transpose();
    }
    return flatten_window(w);
  }

  void append_test_window(const Vector& flat, double label, int sys) {
    Wt_.conservativeResize(Wt_.rows() + 1, flat.size());
    Wt_.row(Wt_.rows() - 1) = flat.transpose();
    yt_.conservativeResize(yt_.size() + 1);
    yt_[yt_.size() - 1] = label;
    test_win_sys_.push_back(sys);
  }

  // --- streaming ----------------------------------------------------------

  void ingest_due_batches(int iter) {
    bool any = false;
    while (next_batch_ < stream_.size() &&
           stream_[next_batch_].arrival_iteration + 1 <= iter) {
      const auto& batch = stream_[next_batch_];
      append_uniform_rows(state_, static_cast<int>(batch.histories.size()));
      for (const auto& h : batch.histories) {
        add_train_system(h);
        train_.push_back(h);
      }
      // new windows join the training rows
      for (Eigen::Index r = assigned_rows_; r < W_.rows(); ++r) train_rows_.push_back(r);
      assigned_rows_ = W_.rows();
      ++next_batch_;
      any = true;
    }
    if (any) {
      dist_ = pairwise_distances(X_);
      emb_version_ = ~0ULL;  // row set changed; rebuild caches
    }
  }

  bool all_batches_ingested() const { return next_batch_ >= stream_.size(); }

  // --- contexts & losses ----------------------------------------------------

  static int count_distinct(const std::vector<int>& z) {
    std::set<int> s(z.begin(), z.end());
    return static_cast<int>(s.size());
  }

  /// contexts_ holds one row per mode present in z; ctx_rank_ maps component
  /// index -> row.
  void build_contexts(const std::vector<int>& z) {
    std::set<int> present(z.begin(), z.end());
    ctx_rank_.assign(static_cast<std::size_t>(state_.K()), -1);
    std::vector<ModeParams> params;
    int rank = 0;
    for (int k : present) {
      ctx_rank_[static_cast<std::size_t>(k)] = rank++;
      params.push_back(mode_params(state_, k));
    }
    contexts_ = standardize_context_rows(encode_modes(params));
  }

  std::vector<int> ctx_of_rows(const std::vector<Eigen::Index>& rows,
                               const std::vector<int>& z) const {
    std::vector<int> idx(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      idx[i] = ctx_rank_[static_cast<std::size_t>(
          z[static_cast<std::size_t>(win_sys_[static_cast<std::size_t>(rows[i])])])];
    return idx;
  }

  static Matrix rows(const Matrix& src, const std::vector<Eigen::Index>& which) {
    Matrix out(static_cast<Eigen::Index>(which.size()), src.cols());
    for (std::size_t i = 0; i < which.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = src.row(which[i]);
    return out;
  }

  Vector labels(const std::vector<Eigen::Index>& which) const {
    Vector out(static_cast<Eigen::Index>(which.size()));
    for (std::size_t i = 0; i < which.size(); ++i)
      out[static_cast<Eigen::Index>(i)] = y_[which[i]];
    return out;
  }

  void refresh_embeddings() {
    if (emb_version_ == nets_.phi_l_version &&
        emb_train_rows_.rows() == static_cast<Eigen::Index>(train_rows_.size()))
      return;
    emb_all_ = forward(nets_.phi_l, W_);
    emb_train_rows_ = rows(emb_all_, train_rows_);
    emb_val_rows_ = rows(emb_all_, val_rows_);
    emb_test_ = Wt_.rows() > 0 ? forward(nets_.phi_l, Wt_)
                               : Matrix(0, nets_.phi_l.output_dim());
    emb_version_ = nets_.phi_l_version;
  }

  double validation_loss(const std::vector<int>& z) {
    refresh_embeddings();
    return rul_loss(nets_, Matrix(static_cast<Eigen::Index>(val_rows_.size()), 0),
                    contexts_, ctx_of_rows(val_rows_, z), labels(val_rows_),
                    &emb_val_rows_);
  }

  /// Soft-assign each test system to its max-responsibility active mode;
  /// the DPMM posterior itself is never updated from test data.
  std::vector<int> test_assignments(const std::vector<int>& z) const {
    std::set<int> present(z.begin(), z.end());
    const std::vector<int> act(present.begin(), present.end());
    const Matrix ll = expected_log_likelihood_matrix(state_, Xt_);
    const Vector elp = expected_log_pi(state_);
    std::vector<int> out(static_cast<std::size_t>(Xt_.rows()));
    for (Eigen::Index i = 0; i < Xt_.rows(); ++i) {
      int best = act.front();
      double best_v = -std::numeric_limits<double>::infinity();
      for (int k : act) {
        const double v = ll(i, k) + elp[k];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out[static_cast<std::size_t>(i)] = best;
    }
    return out;
  }

  double test_rmse(const std::vector<int>& z) {
    if (Wt_.rows() == 0) return 0.0;
    refresh_embeddings();
    const auto tz = test_assignments(z);
    std::vector<int> idx(test_win_sys_.size());
    for (std::size_t w = 0; w < test_win_sys_.size(); ++w)
      idx[w] = ctx_rank_[static_cast<std::size_t>(
          tz[static_cast<std::size_t>(test_win_sys_[w])])];
    last_test_pred_ =
        batch_predict(nets_, Matrix(Wt_.rows(), 0), contexts_, idx, &emb_test_);
    refresh_test_warp();
    return std::sqrt((last_test_pred_ - yt_).squaredNorm() /
                     static_cast<double>(yt_.size()));
  }

  /// Censored test systems are re-warped when their predicted RUL moves by
  /// more than 5%; only their aligned observations change.
  void refresh_test_warp() {
    if (cfg_.alignment != Alignment::TemporalWarp) return;
    // last window of each system carries its end-of-observation prediction
    std::vector<double> latest(test_.size(),
                               std::numeric_limits<double>::quiet_NaN());
    for (std::size_t w = 0; w < test_win_sys_.size(); ++w)
      latest[static_cast<std::size_t>(test_win_sys_[w])] =
          last_test_pred_[static_cast<Eigen::Index>(w)];
    for (std::size_t i = 0; i < test_.size(); ++i) {
      const auto& h = test_[i];
      if (!h.true_rul || std::isnan(latest[i])) continue;
      const double pred = std::max(0.0, latest[i]);
      const auto it = predicted_rul_.find(h.system_id);
      const double old = it == predicted_rul_.end() ? 0.0 : it->second;
      if (it != predicted_rul_.end() &&
          std::abs(pred - old) <= 0.05 * std::max(1.0, old))
        continue;
      predicted_rul_[h.system_id] = pred;
      Xt_.row(static_cast<Eigen::Index>(i)) =
          (cfg_.normalize_observations ? align(apply_normalization(norm_, h)) : align(h))
              .transpose();
    }
  }

  double train_nmi(const std::vector<int>& z) const {
    std::map<std::string, int> name_to_id;
    std::vector<int> t(truth_.size());
    for (std::size_t i = 0; i < truth_.size(); ++i) {
      if (truth_[i].empty()) return -1.0;
      t[i] = name_to_id.emplace(truth_[i], static_cast<int>(name_to_id.size()))
                 .first->second;
    }
    return nmi(t, z);
  }

  double variant_score(double sil, double val_loss, double elbo_val) const {
    switch (cfg_.score) {
      case ScoreVariant::JScore: return j_score(sil, val_loss, cfg_.omega).score;
      case ScoreVariant::Elbo: return elbo_val;
      case ScoreVariant::RulLoss: return -val_loss;
    }
    return 0.0;
  }

  // --- structure pass -------------------------------------------------------

  /// Candidate loss: clone phi_theta/phi_g, retrain them for a small fixed
  /// budget on a shared subsample, evaluate on the validation fold. The
  /// same protocol scores the incumbent, so comparisons are like-for-like.
  double candidate_loss(const std::vector<int>& cand_z, const VariationalState& cand,
                        std::uint64_t scan_seed) const {
    std::set<int> present(cand_z.begin(), cand_z.end());
    std::vector<int> rank(static_cast<std::size_t>(cand.K()), -1);
    std::vector<ModeParams> params;
    int r = 0;
    for (int k : present) {
      rank[static_cast<std::size_t>(k)] = r++;
      params.push_back(mode_params(cand, k));
    }
    const Matrix ctx = standardize_context_rows(encode_modes(params));

    // shared subsample of the training rows
    std::vector<Eigen::Index> sub = train_rows_;
    std::mt19937_64 eng(scan_seed);
    std::shuffle(sub.begin(), sub.end(), eng);
    const std::size_t m = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg_.merge_subsample *
                                    static_cast<double>(sub.size())));
    sub.resize(m);

    auto ctx_idx = [&](const std::vector<Eigen::Index>& which) {
      std::vector<int> idx(which.size());
      for (std::size_t i = 0; i < which.size(); ++i)
        idx[i] = rank[static_cast<std::size_t>(cand_z[static_cast<std::size_t>(
            win_sys_[static_cast<std::size_t>(which[i])])])];
      return idx;
    };

    PrognosticParams tuned = nets_;
    tuned.freeze_phi_l = true;
    Rng rng(child_seed(scan_seed, 0x72ULL));
    const Matrix sub_emb = rows(emb_all_, sub);
    train_epochs(tuned, Matrix(static_cast<Eigen::Index>(m), 0), ctx, ctx_idx(sub),
                 labels(sub), cfg_.merge_retrain_epochs, cfg_.batch_size,
                 cfg_.learn_rate, rng, &sub_emb);
    return rul_loss(tuned, Matrix(static_cast<Eigen::Index>(val_rows_.size()), 0), ctx,
                    ctx_idx(val_rows_), labels(val_rows_), &emb_val_rows_);
  }

  CandidateScore make_score_fn(std::uint64_t scan_seed) const {
    switch (cfg_.score) {
      case ScoreVariant::JScore:
        return [this, scan_seed](const std::vector<int>& z, const VariationalState& st) {
          return silhouette_from_distances(dist_, z) -
                 cfg_.omega * candidate_loss(z, st, scan_seed);
        };
      case ScoreVariant::Elbo:
        return [this](const std::vector<int>&, const VariationalState& st) {
          return elbo(st, X_, prior_);
        };
      case ScoreVariant::RulLoss:
        return [this, scan_seed](const std::vector<int>& z, const VariationalState& st) {
          return -candidate_loss(z, st, scan_seed);
        };
    }
    throw std::logic_error("unreachable");
  }

  void structure_pass(int iter, const std::vector<int>& z, double elbo_val, int& births,
                      int& merges, int& rejects, std::vector<StructureEvent>& events) {
    const int before = count_distinct(z);

    if (cfg_.score == ScoreVariant::Elbo) {
      // the ELBO-greedy ablation scores the tentative addition itself
      BirthProposal prop = propose_birth(state_, X_, prior_, cfg_.birth, birth_rng_);
      if (prop.ok) {
        const double delta = elbo(prop.expanded, X_, prior_) - elbo_val;
        if (delta > 0.0) {
          state_ = std::move(prop.expanded);
          refresh_after_structure_change(state_, X_, prior_);
          ++births;
          events.push_back({iter, "birth", before, count_distinct(hard_assign(state_)),
                            delta});
        } else {
          ++rejects;
          events.push_back({iter, "reject", before, before, delta});
        }
      } else {
        ++rejects;
        events.push_back({iter, "reject", before, before, 0.0});
      }
    } else {
      const BirthResult r = birth_move(state_, X_, prior_, cfg_.birth, birth_rng_);
      if (r.performed) {
        ++births;
        events.push_back(
            {iter, "birth", before, count_distinct(hard_assign(state_)), 0.0});
      } else {
        ++rejects;
        events.push_back({iter, "reject", before, before, 0.0});
      }
    }

    refresh_embeddings();
    const CandidateScore score_fn = make_score_fn(child_seed(cfg_.seed, 0x6dULL,
                                                             static_cast<std::uint64_t>(iter)));
    for (Eigen::Index round = 0; round < state_.K() + 1; ++round) {
      const int mb = count_distinct(hard_assign(state_));
      const MergeOutcome out =
          merge_move(state_, X_, prior_, score_fn, cfg_.max_threads);
      const int ma = count_distinct(hard_assign(state_));
      if (out.trivial_absorbed > 0)
        events.push_back({iter, "merge", mb, ma, 0.0});
      if (out.accepted) {
        ++merges;
        events.push_back({iter, "merge", mb, ma, out.delta});
      } else {
        if (out.pairs_evaluated > 0) {
          ++rejects;
          events.push_back({iter, "reject", ma, ma, out.best_delta});
        }
        break;
      }
    }
  }

  bool converged(const std::vector<IterationRecord>& records) const {
    if (check_convergence(records, cfg_.convergence_patience)) return true;
    // secondary stop: ELBO flat and structurally quiet
    const int p = cfg_.convergence_patience;
    if (static_cast<int>(records.size()) < p + 1) return false;
    for (std::size_t i = records.size() - static_cast<std::size_t>(p);
         i < records.size(); ++i) {
      const auto& cur = records[i];
      const auto& prev = records[i - 1];
      if (cur.births + cur.merges > 0) return false;
      const double rel = std::abs(cur.elbo - prev.elbo) /
                         std::max(1.0, std::abs(prev.elbo));
      if (rel >= cfg_.elbo_rel_tol) return false;
    }
    return true;
  }

  void finalize(RunReport& report) {
    report.state = state_;
    report.nets = nets_;
    report.train_ids = ids_;
    report.assignments = hard_assign(state_);
    report.t_bar = t_bar_;
    report.final_mode_count =
        report.records.empty() ? 0 : report.records.back().active_modes;

    // per-row test predictions from the last evaluated iteration
    if (Wt_.rows() > 0 && last_test_pred_.size() == yt_.size()) {
      for (Eigen::Index i = 0; i < yt_.size(); ++i) {
        report.predictions.ids.push_back(
            test_[static_cast<std::size_t>(test_win_sys_[static_cast<std::size_t>(i)])]
                .system_id);
        report.predictions.truth.push_back(yt_[i]);
        report.predictions.pred.push_back(last_test_pred_[i]);
      }
    }

    if (!cfg_.out_dir.empty()) {
      const std::filesystem::path dir(cfg_.out_dir);
      std::filesystem::create_directories(dir);
      write_records_csv(report.records, dir / "records.csv");
      write_events_csv(report.events, dir / "events.csv");
      write_assignments_csv(ids_, report.assignments, state_.resp,
                            dir / "final_assignments.csv");
      write_predictions_csv(report.predictions.ids, report.predictions.truth,
                            report.predictions.pred, dir / "predictions.csv");
      save_checkpoint(dir, state_, nets_);
    }
  }

  // --- members ---------------------------------------------------------------

  PipelineConfig cfg_;
  Fleet train_, test_;
  std::vector<StreamBatch> stream_;
  std::size_t next_batch_ = 0;

  int t_bar_ = 0;
  NormalizationStats norm_;
  StickPrior prior_;
  VariationalState state_;
  PrognosticParams nets_;

  Matrix X_;                         // N x D aligned observations
  Matrix dist_;                      // N x N distances
  std::vector<std::string> ids_;
  std::vector<std::string> truth_;

  Matrix W_;                         // all train-fleet windows
  Vector y_;
  std::vector<int> win_sys_;
  std::vector<Eigen::Index> train_rows_, val_rows_;

  Matrix Xt_;                        // test observations
  Matrix Wt_;                        // test windows
  Vector yt_;
  std::vector<int> test_win_sys_;
  Vector last_test_pred_;
  std::map<std::string, double> predicted_rul_;

  Matrix contexts_;
  std::vector<int> ctx_rank_;

  Matrix emb_all_, emb_train_rows_, emb_val_rows_, emb_test_;
  std::uint64_t emb_version_ = ~0ULL;
  Eigen::Index assigned_rows_ = 0;

  Rng train_rng_{0}, birth_rng_{0};
};

inline RunReport run_pipeline(const PipelineConfig& cfg, Fleet train, Fleet test,
                              std::vector<StreamBatch> stream = {}) {
  Pipeline p(cfg, std::move(train), std::move(test), std::move(stream));
  return p.run();
}

}  // namespace dpmm_rul

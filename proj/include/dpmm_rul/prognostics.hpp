#pragma once

#include "dpmm_rul/dpmm.hpp"
#include "dpmm_rul/mlp.hpp"

#include <numeric>
#include <vector>

namespace dpmm_rul {

// ---------------------------------------------------------------------------
// Mode-context encoding
// ---------------------------------------------------------------------------

/// Standardization statistics over the active modes' posterior means.
struct ModeContextEncoder {
  Vector center;
  Vector scale;
};

inline ModeContextEncoder fit_context_encoder(const std::vector<ModeParams>& modes) {
  if (modes.empty()) throw std::invalid_argument("fit_context_encoder: no modes");
  const Eigen::Index D = modes.front().mean.size();
  ModeContextEncoder enc;
  enc.center = Vector::Zero(D);
  for (const auto& m : modes) enc.center += m.mean;
  enc.center /= static_cast<double>(modes.size());
  Vector var = Vector::Zero(D);
  for (const auto& m : modes) var += (m.mean - enc.center).array().square().matrix();
  var /= static_cast<double>(modes.size());
  enc.scale = var.array().sqrt();
  for (Eigen::Index d = 0; d < D; ++d)
    if (enc.scale[d] < 1e-12) enc.scale[d] = 1.0;
  return enc;
}

/// [standardized mean ; log variances], length 2D.
inline Vector encode_mode(const ModeParams& params, const ModeContextEncoder& enc) {
  const Eigen::Index D = params.mean.size();
  for (Eigen::Index d = 0; d < D; ++d)
    if (!(params.var[d] > 0.0))
      throw std::invalid_argument("encode_mode: variances must be positive");
  Vector out(2 * D);
  out.head(D) = (params.mean - enc.center).cwiseQuotient(enc.scale);
  out.tail(D) = params.var.array().log();
  return out;
}

/// One row per mode, fitted and encoded in one go.
inline Matrix encode_modes(const std::vector<ModeParams>& modes) {
  const ModeContextEncoder enc = fit_context_encoder(modes);
  Matrix out(static_cast<Eigen::Index>(modes.size()), 2 * modes.front().mean.size());
  for (std::size_t k = 0; k < modes.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) = encode_mode(modes[k], enc);
  return out;
}

/// Network-input conditioning: z-score each context dimension across the
/// active modes, recomputed whenever mode parameters change. A single mode
/// carries no discriminative context and maps to zeros.
inline Matrix standardize_context_rows(const Matrix& ctx) {
  if (ctx.rows() < 2) return Matrix::Zero(ctx.rows(), ctx.cols());
  const Eigen::RowVectorXd mean = ctx.colwise().mean();
  Eigen::RowVectorXd sd =
      ((ctx.rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (Eigen::Index c = 0; c < sd.size(); ++c)
    if (sd[c] < 1e-12) sd[c] = 1.0;
  return (ctx.rowwise() - mean).array().rowwise() / sd.array();
}

// ---------------------------------------------------------------------------
// Three-network predictor
// ---------------------------------------------------------------------------

struct PrognosticParams {
  Mlp phi_l;      // signal windows -> 64
  Mlp phi_theta;  // mode context  -> 16
  Mlp phi_g;      // [u; v] (80)   -> 1
  bool freeze_phi_l = false;
  bool freeze_phi_theta = false;
  bool freeze_phi_g = false;
  bool pretrained = false;
  int unfreeze_left = 0;            // iterations phi_l stays trainable
  std::uint64_t phi_l_version = 0;  // bumped on every phi_l weight change
  double label_scale = 1.0;         // networks learn y / label_scale
};

inline PrognosticParams make_prognostic_params(int window_dim, int context_dim, Rng& rng) {
  PrognosticParams p;
  p.phi_l = make_mlp({window_dim, 128, 96, 64}, rng);
  p.phi_theta = make_mlp({context_dim, 16}, rng);
  p.phi_g = make_mlp({80, 32, 1}, rng);
  return p;
}

/// Flatten an S x xi window sensor-major, matching the aligned-observation
/// layout.
inline Vector flatten_window(const Matrix& window) {
  Vector out(window.size());
  Eigen::Index at = 0;
  for (Eigen::Index s = 0; s < window.rows(); ++s, at += window.cols())
    out.segment(at, window.cols()) = window.row(s).transpose();
  return out;
}

inline double predict(const PrognosticParams& p, const Vector& window_flat,
                      const Vector& context) {
  if (window_flat.size() != p.phi_l.input_dim() ||
      context.size() != p.phi_theta.input_dim())
    throw std::invalid_argument("predict: input shape mismatch");
  Matrix u = forward(p.phi_l, window_flat.transpose());
  Matrix v = forward(p.phi_theta, context.transpose());
  Matrix x(1, u.cols() + v.cols());
  x << u, v;
  return forward(p.phi_g, x)(0, 0) * p.label_scale;
}

/// Batched forward pass. contexts has one row per mode; ctx_index maps each
/// window to its mode row. Pass a precomputed phi_l output as `embeddings`
/// to skip the signal network (valid while phi_l is unchanged).
inline Vector batch_predict(const PrognosticParams& p, const Matrix& windows,
                            const Matrix& contexts, const std::vector<int>& ctx_index,
                            const Matrix* embeddings = nullptr) {
  const Matrix u = embeddings ? *embeddings : forward(p.phi_l, windows);
  const Matrix v_modes = forward(p.phi_theta, contexts);
  Matrix x(u.rows(), u.cols() + v_modes.cols());
  x.leftCols(u.cols()) = u;
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    x.row(i).tail(v_modes.cols()) = v_modes.row(ctx_index[static_cast<std::size_t>(i)]);
  return forward(p.phi_g, x).col(0) * p.label_scale;
}

/// Root mean square error over a sample set.
inline double rul_loss(const PrognosticParams& p, const Matrix& windows,
                       const Matrix& contexts, const std::vector<int>& ctx_index,
                       const Vector& labels, const Matrix* embeddings = nullptr) {
  if (windows.rows() == 0) throw std::invalid_argument("rul_loss: empty sample set");
  const Vector pred = batch_predict(p, windows, contexts, ctx_index, embeddings);
  return std::sqrt((pred - labels).squaredNorm() / static_cast<double>(labels.size()));
}

/// One mini-batch step of the mean-squared objective. Frozen networks stay
/// bit-identical. Returns the batch MSE before the update.
inline double grad_step(PrognosticParams& p, const Matrix& windows, const Matrix& contexts,
                        const std::vector<int>& ctx_index, const Vector& labels,
                        double rate, const Matrix* embeddings = nullptr) {
  if (rate <= 0.0) throw std::invalid_argument("grad_step: rate must be positive");
  const Eigen::Index B = windows.rows() > 0 ? windows.rows()
                                            : static_cast<Eigen::Index>(ctx_index.size());

  std::vector<Matrix> acts_l, acts_t, acts_g;
  const bool train_l = !p.freeze_phi_l;
  Matrix u;
  if (embeddings && !train_l) {
    u = *embeddings;
  } else {
    u = train_l ? forward_cached(p.phi_l, windows, acts_l) : forward(p.phi_l, windows);
  }
  const Matrix v_modes = forward_cached(p.phi_theta, contexts, acts_t);

  Matrix x(B, u.cols() + v_modes.cols());
  x.leftCols(u.cols()) = u;
  for (Eigen::Index i = 0; i < B; ++i)
    x.row(i).tail(v_modes.cols()) = v_modes.row(ctx_index[static_cast<std::size_t>(i)]);

  const Matrix pred = forward_cached(p.phi_g, x, acts_g);
  const Matrix resid = pred.col(0) - labels / p.label_scale;
  const double mse =
      resid.squaredNorm() * p.label_scale * p.label_scale / static_cast<double>(B);

  // d(0.5 * mean scaled-residual^2) / d prediction
  Matrix dpred = resid / static_cast<double>(B);

  MlpGrads g_g;
  const Matrix dx = backward(p.phi_g, acts_g, dpred, g_g);

  if (!p.freeze_phi_theta) {
    Matrix dv_modes = Matrix::Zero(v_modes.rows(), v_modes.cols());
    for (Eigen::Index i = 0; i < B; ++i)
      dv_modes.row(ctx_index[static_cast<std::size_t>(i)]) +=
          dx.row(i).tail(v_modes.cols());
    MlpGrads g_t;
    backward(p.phi_theta, acts_t, dv_modes, g_t);
    apply_gradients(p.phi_theta, g_t, rate);
  }
  if (train_l) {
    MlpGrads g_l;
    backward(p.phi_l, acts_l, dx.leftCols(u.cols()), g_l);
    apply_gradients(p.phi_l, g_l, rate);
    ++p.phi_l_version;
  }
  if (!p.freeze_phi_g) apply_gradients(p.phi_g, g_g, rate);
  return mse;
}

/// Epoch loop over shuffled mini-batches; honors current freeze flags.
inline void train_epochs(PrognosticParams& p, const Matrix& windows, const Matrix& contexts,
                         const std::vector<int>& ctx_index, const Vector& labels,
                         int epochs, int batch_size, double rate, Rng& rng,
                         const Matrix* embeddings = nullptr) {
  const Eigen::Index n = windows.rows();
  if (n == 0) return;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const bool use_cache = embeddings && p.freeze_phi_l;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (Eigen::Index start = 0; start < n; start += batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(batch_size, n - start);
      Matrix wb(b, use_cache ? 0 : windows.cols());
      Matrix ub(b, use_cache ? embeddings->cols() : 0);
      Vector yb(b);
      std::vector<int> ib(static_cast<std::size_t>(b));
      for (Eigen::Index i = 0; i < b; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(start + i)];
        if (use_cache)
          ub.row(i) = embeddings->row(src);
        else
          wb.row(i) = windows.row(src);
        yb[i] = labels[src];
        ib[static_cast<std::size_t>(i)] = ctx_index[static_cast<std::size_t>(src)];
      }
      grad_step(p, wb, contexts, ib, yb, rate, use_cache ? &ub : nullptr);
    }
  }
}

/// Joint warm-up of all three networks, after which phi_l is frozen.
inline void pretrain(PrognosticParams& p, const Matrix& windows, const Matrix& contexts,
                     const std::vector<int>& ctx_index, const Vector& labels, int epochs,
                     int batch_size, double rate, Rng& rng) {
  if (p.pretrained) throw std::logic_error("pretrain: already pretrained");
  p.freeze_phi_l = p.freeze_phi_theta = p.freeze_phi_g = false;
  if (labels.size() > 0)
    p.label_scale = std::max(1.0, std::sqrt(labels.squaredNorm() /
                                            static_cast<double>(labels.size())));
  train_epochs(p, windows, contexts, ctx_index, labels, epochs, batch_size, rate, rng);
  p.pretrained = true;
  p.freeze_phi_l = true;
}

/// Structure change detected: phi_l becomes trainable for `window` further
/// iterations; repeated changes extend the deadline.
inline void unfreeze_on_structure_change(PrognosticParams& p, int window = 3) {
  if (window <= 0) return;
  p.unfreeze_left = std::max(p.unfreeze_left, window);
  p.freeze_phi_l = false;
}

/// Call once per pipeline iteration, after training.
inline void advance_iteration(PrognosticParams& p) {
  if (p.unfreeze_left > 0) {
    --p.unfreeze_left;
    if (p.unfreeze_left == 0 && p.pretrained) p.freeze_phi_l = true;
  }
}

inline nlohmann::json to_json(const PrognosticParams& p) {
  nlohmann::json j;
  j["version"] = 1;
  j["phi_l"] = to_json(p.phi_l);
  j["phi_theta"] = to_json(p.phi_theta);
  j["phi_g"] = to_json(p.phi_g);
  j["pretrained"] = p.pretrained;
  j["freeze_phi_l"] = p.freeze_phi_l;
  j["unfreeze_left"] = p.unfreeze_left;
  j["label_scale"] = p.label_scale;
  return j;
}

inline PrognosticParams prognostic_params_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j["version"].get<int>() != 1)
    throw data_error("prognostic snapshot: unsupported version");
  PrognosticParams p;
  p.phi_l = mlp_from_json(j["phi_l"]);
  p.phi_theta = mlp_from_json(j["phi_theta"]);
  p.phi_g = mlp_from_json(j["phi_g"]);
  p.pretrained = j["pretrained"].get<bool>();
  p.freeze_phi_l = j["freeze_phi_l"].get<bool>();
  p.unfreeze_left = j["unfreeze_left"].get<int>();
  p.label_scale = j["label_scale"].get<double>();
  return p;
}

}  // namespace dpmm_rul

#pragma once

#include "dpmm_rul/common.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace dpmm_rul {

/// Affine layer, optionally rectified. W is out x in.
struct DenseLayer {
  Matrix W;
  Vector b;
  bool relu = false;
};

struct Mlp {
  std::vector<DenseLayer> layers;

  Eigen::Index input_dim() const { return layers.front().W.cols(); }
  Eigen::Index output_dim() const { return layers.back().W.rows(); }
};

struct MlpGrads {
  std::vector<Matrix> dW;
  std::vector<Vector> db;
};

/// Rectifier on hidden layers, identity on the output layer.
inline Mlp make_mlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("make_mlp: need >= 1 layer");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("make_mlp: widths must be positive");
  Mlp net;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    DenseLayer layer;
    const int fan_in = widths[i], fan_out = widths[i + 1];
    const double limit = std::sqrt(3.0 / static_cast<double>(fan_in));
    layer.W.resize(fan_out, fan_in);
    for (Eigen::Index r = 0; r < layer.W.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.W.cols(); ++c)
        layer.W(r, c) = rng.uniform(-limit, limit);
    layer.b = Vector::Zero(fan_out);
    layer.relu = (i + 2 < widths.size());
    net.layers.push_back(std::move(layer));
  }
  return net;
}

/// X is batch x in; returns batch x out.
inline Matrix forward(const Mlp& net, const Matrix& X) {
  Matrix h = X;
  for (const auto& layer : net.layers) {
    h = (h * layer.W.transpose()).rowwise() + layer.b.transpose();
    if (layer.relu) h = h.cwiseMax(0.0);
  }
  return h;
}

/// Forward keeping post-activation values; acts[0] = X, acts[i+1] = layer i
/// output. Needed by backward().
inline Matrix forward_cached(const Mlp& net, const Matrix& X, std::vector<Matrix>& acts) {
  acts.clear();
  acts.reserve(net.layers.size() + 1);
  acts.push_back(X);
  for (const auto& layer : net.layers) {
    Matrix h = (acts.back() * layer.W.transpose()).rowwise() + layer.b.transpose();
    if (layer.relu) h = h.cwiseMax(0.0);
    acts.push_back(std::move(h));
  }
  return acts.back();
}

/// Backprop dL/dY through the net; fills grads and returns dL/dX.
inline Matrix backward(const Mlp& net, const std::vector<Matrix>& acts, Matrix dY,
                       MlpGrads& grads) {
  const std::size_t L = net.layers.size();
  grads.dW.resize(L);
  grads.db.resize(L);
  for (std::size_t i = L; i-- > 0;) {
    const auto& layer = net.layers[i];
    if (layer.relu)
      dY = dY.cwiseProduct((acts[i + 1].array() > 0.0).cast<double>().matrix());
    grads.dW[i] = dY.transpose() * acts[i];
    grads.db[i] = dY.colwise().sum();
    if (i > 0) dY = dY * layer.W;
  }
  return dY * net.layers.front().W;
}

inline void apply_gradients(Mlp& net, const MlpGrads& grads, double rate) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    net.layers[i].W -= rate * grads.dW[i];
    net.layers[i].b -= rate * grads.db[i];
  }
}

/// Flat view over every weight and bias, for gradient checks and IO.
inline std::vector<double*> parameter_pointers(Mlp& net) {
  std::vector<double*> ptrs;
  for (auto& layer : net.layers) {
    for (Eigen::Index i = 0; i < layer.W.size(); ++i) ptrs.push_back(layer.W.data() + i);
    for (Eigen::Index i = 0; i < layer.b.size(); ++i) ptrs.push_back(layer.b.data() + i);
  }
  return ptrs;
}

inline nlohmann::json to_json(const Mlp& net) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& layer : net.layers) {
    nlohmann::json e;
    e["rows"] = layer.W.rows();
    e["cols"] = layer.W.cols();
    e["relu"] = layer.relu;
    e["W"] = std::vector<double>(layer.W.data(), layer.W.data() + layer.W.size());
    e["b"] = std::vector<double>(layer.b.data(), layer.b.data() + layer.b.size());
    j.push_back(std::move(e));
  }
  return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp net;
  for (const auto& e : j) {
    DenseLayer layer;
    const auto rows = e["rows"].get<Eigen::Index>();
    const auto cols = e["cols"].get<Eigen::Index>();
    const auto w = e["W"].get<std::vector<double>>();
    const auto b = e["b"].get<std::vector<double>>();
    layer.W = Eigen::Map<const Matrix>(w.data(), rows, cols);
    layer.b = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
    layer.relu = e["relu"].get<bool>();
    net.layers.push_back(std::move(layer));
  }
  return net;
}

}  // namespace dpmm_rul

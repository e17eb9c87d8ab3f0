#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "somnlp/encoder.hpp"
#include "somnlp/error.hpp"

namespace somnlp::model {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Mat<T>> m, v;  // one pair per tensor, in tensor-list order
  std::uint64_t step = 0;
};

/// Bias-corrected Adam over parallel tensor lists. Weight decay is decoupled
/// (applied directly to the parameter, scaled by the learning rate).
/// `lr` overrides config.lr when a schedule is in use.
template <typename T>
void adam_step(std::span<Mat<T>* const> params, std::span<const Mat<T>* const> grads, AdamState<T>& st,
               std::optional<double> lr = std::nullopt) {
  if (params.size() != grads.size()) throw ConfigError("adam", "parameter/gradient count mismatch");
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.push_back(Mat<T>::Zero(p->rows(), p->cols()));
      st.v.push_back(Mat<T>::Zero(p->rows(), p->cols()));
    }
  }
  if (st.m.size() != params.size()) throw ConfigError("adam", "optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols() ||
        st.m[i].rows() != params[i]->rows() || st.m[i].cols() != params[i]->cols())
      throw ConfigError("adam", "shape mismatch at tensor " + std::to_string(i));

  const auto& c = st.config;
  ++st.step;
  const double rate = lr.value_or(c.lr);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->data();
    const T* g = grads[i]->data();
    T* m = st.m[i].data();
    T* v = st.v[i].data();
    for (Eigen::Index k = 0; k < params[i]->size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = c.beta1 * static_cast<double>(m[k]) + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * static_cast<double>(v[k]) + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = (mk / bc1) / (std::sqrt(vk / bc2) + c.eps) + c.weight_decay * static_cast<double>(p[k]);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - rate * update);
    }
  }
}

template <typename P>
auto tensor_list(P& p) {
  auto named = named_tensors(p);
  std::vector<std::remove_reference_t<decltype(*named.front().second)>*> out;
  for (auto& [_, t] : named) out.push_back(t);
  return out;
}

template <typename T>
void adam_step(EncoderParams<T>& params, const EncoderParams<T>& grads, AdamState<T>& st,
               std::optional<double> lr = std::nullopt) {
  auto p = tensor_list(params);
  auto g = tensor_list(grads);
  adam_step<T>(std::span<Mat<T>* const>(p), std::span<const Mat<T>* const>(g), st, lr);
}

}  // namespace somnlp::model

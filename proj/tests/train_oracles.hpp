// Test-only references for the trainer: a brute-force loss built from
// step() and readout(), and central differences over every trainable entry.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "looplab/trainer.hpp"
#include "net_fixtures.hpp"

namespace looplab::testing {

inline Model perturbed_model(const NetConfig& c, Rng& rng) {
  Model m = Model::random(c, rng);
  m.params.net = looplab::testing::perturbed_net(c, rng).params();
  m.params.net.eps = 1e-6;
  for (double& v : m.params.readout_b.data()) v = rng.normal(0, 0.3);
  return m;
}

/// Brute-force loss: same definition as forward_backward, with an optional
/// separate parameter set for the first N (unsupervised) steps.
inline double reference_loss(const Model& supervised, const Model& prefix,
                             std::span<const PrefixSumExample> batch, std::size_t N, std::size_t K) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    const StateMatrix x0_pre = embed_input(prefix, ex.input_bits);
    const StateMatrix x0_sup = embed_input(supervised, ex.input_bits);
    const bool recall = supervised.config.has_recall();
    StateMatrix x = N == 0 ? initial_state(supervised, x0_sup) : initial_state(prefix, x0_pre);
    const LoopedNet pre_net = prefix.net(), sup_net = supervised.net();
    for (std::size_t t = 0; t < N; ++t) x = step(pre_net, x, recall ? x0_pre : StateMatrix{});
    for (std::size_t k = 0; k < K; ++k) {
      x = step(sup_net, x, recall ? x0_sup : StateMatrix{});
      const Matrix logits = readout(supervised, x);
      for (std::size_t c = 0; c < ex.input_bits.size(); ++c) {
        const double a = logits(0, c), b = logits(1, c);
        const double lse = std::log(std::exp(a) + std::exp(b));
        total += lse - logits(ex.target_bits[c], c);
      }
    }
    tokens += ex.input_bits.size();
  }
  return total / static_cast<double>(tokens * K);
}

/// Central differences of reference_loss over every trainable entry.
/// `frozen_prefix` keeps the first N steps at the unperturbed parameters.
inline double max_gradient_error(const Model& model, std::span<const PrefixSumExample> batch, std::size_t N,
                                 std::size_t K, bool frozen_prefix) {
  const LossAndGrads lg = forward_backward(model, batch, N, K);
  const auto analytic = lg.grads.trainable();
  Model probe = model;
  auto entries = probe.params.trainable();
  double worst = 0.0;
  for (std::size_t t = 0; t < entries.size(); ++t) {
    Matrix fd(entries[t].second->rows(), entries[t].second->cols());
    for (std::size_t k = 0; k < fd.size(); ++k) {
      double& slot = (*entries[t].second)[k];
      const double keep = slot;
      const double h = 1e-5;
      slot = keep + h;
      const double up = reference_loss(probe, frozen_prefix ? model : probe, batch, N, K);
      slot = keep - h;
      const double down = reference_loss(probe, frozen_prefix ? model : probe, batch, N, K);
      slot = keep;
      fd[k] = (up - down) / (2 * h);
    }
    double err = 0.0;
    for (std::size_t k = 0; k < fd.size(); ++k) err = std::max(err, std::abs((*analytic[t].second)[k] - fd[k]));
    worst = std::max(worst, err / std::max(max_abs(fd), 1e-4));
  }
  return worst;
}

}  // namespace looplab::testing

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "looplab/linalg.hpp"

namespace looplab {

class Rng;

/// Hidden state: d rows (embedding), L columns (tokens).
using StateMatrix = Matrix;

enum class RecallMode { autonomous, external, internal };
enum class NormMode { none, pre, post, peri, gru };

inline constexpr RecallMode kAllRecallModes[] = {RecallMode::autonomous, RecallMode::external,
                                                 RecallMode::internal};
inline constexpr NormMode kAllNormModes[] = {NormMode::none, NormMode::pre, NormMode::post,
                                             NormMode::peri, NormMode::gru};

std::string_view to_string(RecallMode mode);
std::string_view to_string(NormMode mode);
RecallMode parse_recall_mode(std::string_view text);
NormMode parse_norm_mode(std::string_view text);

struct NetConfig {
  std::size_t d = 6;
  std::size_t L = 3;
  RecallMode recall = RecallMode::external;
  NormMode norm = NormMode::none;
  std::size_t mlp_hidden = 8;
  /// Token-mixing half-width: token c reads tokens j with |c - j| <= bandwidth.
  /// nullopt means full mixing (half-width L - 1).
  std::optional<std::size_t> mix_bandwidth;
  /// Number of independent mixing kernels, each with its own projection.
  std::size_t mix_heads = 1;

  std::size_t mix_radius() const { return mix_bandwidth ? *mix_bandwidth : (L == 0 ? 0 : L - 1); }
  bool has_recall() const { return recall != RecallMode::autonomous; }
  bool inner_norm() const { return norm == NormMode::pre || norm == NormMode::peri; }
  bool outer_norm() const { return norm == NormMode::post || norm == NormMode::peri; }
  bool gated() const { return norm == NormMode::gru; }
  void validate() const;

  bool operator==(const NetConfig&) const = default;
};

/// Gated residual combine(s, o) = (1 - u) * s + u * c, all gates token-wise.
struct GruGate {
  Matrix w_r, u_r, b_r;
  Matrix w_u, u_u, b_u;
  Matrix w_c, u_c, b_c;
};

/// Every parameter of the looped block.
///
/// h1 (token mixing): h1(v)[:, c] = sum_h P_h * sum_o k_h[o] v[:, c + o] + b_p
/// h2 (token-wise MLP): h2(v)[:, c] = W2 gelu(W1 v[:, c] + b1) + b2
/// recall: g(x, x0) = W_x x + W_0 x0
struct NetParams {
  Matrix w_x, w_0;                 // d x d, empty when autonomous
  Matrix mix;                      // heads x (2r + 1); column o + r holds offset o
  std::vector<Matrix> proj;        // heads x (d x d)
  Matrix b_p;                      // d x 1
  Matrix w1, b1, w2, b2;           // H x d, H x 1, d x H, d x 1
  Matrix pre_gain1, pre_gain2;     // d x 1, inner RMSNorm sites (pre, peri)
  Matrix out_gain1, out_gain2;     // d x 1, outer RMSNorm sites (post, peri)
  std::optional<GruGate> gru1, gru2;
  StateMatrix e;                   // initial iterate, d x L
  double eps = 1e-6;

  /// Active tensors in declaration order. `include_initial` controls `e`.
  std::vector<std::pair<std::string, Matrix*>> named_tensors(bool include_initial = true);
  std::vector<std::pair<std::string, const Matrix*>> named_tensors(bool include_initial = true) const;

  /// Same layout with every entry zero (used as a gradient accumulator).
  NetParams zeros_like() const;
};

/// Configuration plus parameters. Immutable once built.
class LoopedNet {
 public:
  LoopedNet(NetConfig config, NetParams params);

  /// Default initialization: orthogonal recall scaled by 0.5, Gaussian
  /// sublayers with std 1/sqrt(fan_in), unit gains, zero biases, e = 0.
  static LoopedNet random(const NetConfig& config, Rng& rng);
  /// All weights and biases zero, gains one, e = 0.
  static NetParams zero_params(const NetConfig& config);

  const NetConfig& config() const noexcept { return config_; }
  const NetParams& params() const noexcept { return params_; }
  std::size_t d() const noexcept { return config_.d; }

 private:
  NetConfig config_;
  NetParams params_;
};

// ---- building blocks -------------------------------------------------------

/// W_x x + W_0 x0.
StateMatrix recall_combine(const LoopedNet& net, const StateMatrix& x, const StateMatrix& x0);

/// Per token c: gain * x_c / sqrt(mean(x_c^2) + eps).
StateMatrix rms_norm(const StateMatrix& x, const Matrix& gain, double eps);
/// d x d Jacobian of rms_norm for one token.
Matrix rms_norm_token_jacobian(std::span<const double> x_col, const Matrix& gain, double eps);

/// Exact erf-form GELU and its derivative.
double gelu(double x);
double gelu_derivative(double x);

StateMatrix token_mix_sublayer(const NetParams& p, std::size_t radius, const StateMatrix& v);
StateMatrix mlp_sublayer(const NetParams& p, const StateMatrix& v);

/// (dL x dL) Jacobians of the two sublayers at input v.
Matrix token_mix_jacobian(const NetParams& p, std::size_t radius, std::size_t L);
Matrix mlp_jacobian(const NetParams& p, const StateMatrix& v);

// ---- one loop iteration ----------------------------------------------------

/// Intermediates of one residual site: out = phi(combine(s, h(pre(v)))).
struct SiteCache {
  StateMatrix s;       // residual input
  StateMatrix v;       // sublayer input
  StateMatrix u;       // sublayer input after the inner norm (== v otherwise)
  StateMatrix hidden;  // h1: per-head mixed input stacked; h2: MLP pre-activation
  StateMatrix o;       // sublayer output
  StateMatrix r_gate, u_gate, c_gate;  // GRU gates (gated mode)
  StateMatrix combined;  // before the outer norm
  StateMatrix out;
};

struct StepCache {
  StateMatrix x, x0;
  SiteCache site1, site2;
};

/// x_{t+1} = f(x_t, x0). Autonomous nets ignore x0 (it may be empty).
/// Throws NumericOverflowError when the result is not finite.
StateMatrix step(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0);
StateMatrix step(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0, StepCache* cache);

struct StepJacobians {
  Matrix j_state;  // d x_{t+1} / d x_t, (dL x dL), token-major
  Matrix j_input;  // d x_{t+1} / d x0
};

/// Analytic per-step Jacobians assembled by the chain rule through both sites.
StepJacobians step_jacobians(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0);

/// Jacobian blocks at one evaluation point, exposed so the fixed-point
/// stability matrices can be rebuilt from them directly.
struct SublayerJacobians {
  Matrix recall_state;  // I_L (x) W_x
  Matrix recall_input;  // I_L (x) W_0
  Matrix h1;            // dh1/dv at site 1 (no norms)
  Matrix h2;            // dh2/dv at site 2 (no norms)
};
SublayerJacobians sublayer_jacobians(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0);

/// Reverse-mode pass through one step. Accumulates parameter gradients into
/// `grads` (same layout as net.params()) and returns gradients with respect
/// to x_t and x0.
struct StepGradients {
  StateMatrix x;
  StateMatrix x0;
};
StepGradients step_backward(const LoopedNet& net, const StepCache& cache, const StateMatrix& grad_out,
                            NetParams& grads);

}  // namespace looplab

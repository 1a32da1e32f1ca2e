#include "looplab/netcore.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <tuple>

#include "looplab/rng.hpp"

namespace looplab {

// ---- enums -----------------------------------------------------------------

std::string_view to_string(RecallMode mode) {
  switch (mode) {
    case RecallMode::autonomous: return "autonomous";
    case RecallMode::external: return "external";
    case RecallMode::internal: return "internal";
  }
  return "?";
}

std::string_view to_string(NormMode mode) {
  switch (mode) {
    case NormMode::none: return "none";
    case NormMode::pre: return "pre";
    case NormMode::post: return "post";
    case NormMode::peri: return "peri";
    case NormMode::gru: return "gru";
  }
  return "?";
}

RecallMode parse_recall_mode(std::string_view text) {
  for (auto m : kAllRecallModes)
    if (to_string(m) == text) return m;
  throw PreconditionError("unknown recall mode '" + std::string(text) + "'");
}

NormMode parse_norm_mode(std::string_view text) {
  for (auto m : kAllNormModes)
    if (to_string(m) == text) return m;
  throw PreconditionError("unknown norm mode '" + std::string(text) + "'");
}

void NetConfig::validate() const {
  if (d < 1 || L < 1 || mlp_hidden < 1 || mix_heads < 1) {
    throw PreconditionError("NetConfig: d, L, mlp_hidden and mix_heads must be >= 1");
  }
}

// ---- parameters ------------------------------------------------------------

namespace {

template <class P, class Out>
void collect_tensors(P& p, bool include_initial, Out& out) {
  auto add = [&](std::string name, auto& m) {
    if (!m.empty()) out.emplace_back(std::move(name), &m);
  };
  add("w_x", p.w_x);
  add("w_0", p.w_0);
  add("mix", p.mix);
  for (std::size_t h = 0; h < p.proj.size(); ++h) add("proj" + std::to_string(h), p.proj[h]);
  add("b_p", p.b_p);
  add("w1", p.w1);
  add("b1", p.b1);
  add("w2", p.w2);
  add("b2", p.b2);
  add("pre_gain1", p.pre_gain1);
  add("pre_gain2", p.pre_gain2);
  add("out_gain1", p.out_gain1);
  add("out_gain2", p.out_gain2);
  auto add_gate = [&](const char* prefix, auto& gate) {
    if (!gate) return;
    const std::string s = prefix;
    add(s + ".w_r", gate->w_r);
    add(s + ".u_r", gate->u_r);
    add(s + ".b_r", gate->b_r);
    add(s + ".w_u", gate->w_u);
    add(s + ".u_u", gate->u_u);
    add(s + ".b_u", gate->b_u);
    add(s + ".w_c", gate->w_c);
    add(s + ".u_c", gate->u_c);
    add(s + ".b_c", gate->b_c);
  };
  add_gate("gru1", p.gru1);
  add_gate("gru2", p.gru2);
  if (include_initial) add("e", p.e);
}

}  // namespace

std::vector<std::pair<std::string, Matrix*>> NetParams::named_tensors(bool include_initial) {
  std::vector<std::pair<std::string, Matrix*>> out;
  collect_tensors(*this, include_initial, out);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> NetParams::named_tensors(bool include_initial) const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  collect_tensors(*this, include_initial, out);
  return out;
}

NetParams NetParams::zeros_like() const {
  NetParams z = *this;
  for (auto& [name, m] : z.named_tensors()) m->fill(0.0);
  return z;
}

namespace {

GruGate make_gate(std::size_t d, Rng* rng) {
  auto weight = [&] { return rng ? Matrix::gaussian(d, d, *rng, 1.0 / std::sqrt(double(d))) : Matrix(d, d); };
  GruGate g;
  g.w_r = weight();
  g.u_r = weight();
  g.b_r = Matrix(d, 1);
  g.w_u = weight();
  g.u_u = weight();
  g.b_u = Matrix(d, 1);
  g.w_c = weight();
  g.u_c = weight();
  g.b_c = Matrix(d, 1);
  return g;
}

NetParams make_params(const NetConfig& c, Rng* rng) {
  c.validate();
  const std::size_t d = c.d;
  const std::size_t H = c.mlp_hidden;
  const std::size_t k = 2 * c.mix_radius() + 1;
  NetParams p;
  if (c.has_recall()) {
    if (rng) {
      p.w_x = Matrix::orthogonal(d, d, *rng) * 0.5;
      p.w_0 = Matrix::orthogonal(d, d, *rng) * 0.5;
    } else {
      p.w_x = Matrix(d, d);
      p.w_0 = Matrix(d, d);
    }
  }
  p.mix = rng ? Matrix::gaussian(c.mix_heads, k, *rng, 1.0 / std::sqrt(double(k))) : Matrix(c.mix_heads, k);
  for (std::size_t h = 0; h < c.mix_heads; ++h)
    p.proj.push_back(rng ? Matrix::gaussian(d, d, *rng, 1.0 / std::sqrt(double(d))) : Matrix(d, d));
  p.b_p = Matrix(d, 1);
  p.w1 = rng ? Matrix::gaussian(H, d, *rng, 1.0 / std::sqrt(double(d))) : Matrix(H, d);
  p.b1 = Matrix(H, 1);
  p.w2 = rng ? Matrix::gaussian(d, H, *rng, 1.0 / std::sqrt(double(H))) : Matrix(d, H);
  p.b2 = Matrix(d, 1);
  if (c.inner_norm()) {
    p.pre_gain1 = Matrix(d, 1, 1.0);
    p.pre_gain2 = Matrix(d, 1, 1.0);
  }
  if (c.outer_norm()) {
    p.out_gain1 = Matrix(d, 1, 1.0);
    p.out_gain2 = Matrix(d, 1, 1.0);
  }
  if (c.gated()) {
    p.gru1 = make_gate(d, rng);
    p.gru2 = make_gate(d, rng);
  }
  p.e = Matrix(d, c.L);
  return p;
}

void require_shape(const Matrix& m, std::size_t r, std::size_t c, const std::string& name) {
  if (m.rows() != r || m.cols() != c) {
    throw DimensionError("NetParams: " + name + " should be " + std::to_string(r) + "x" + std::to_string(c) +
                         ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

}  // namespace

LoopedNet::LoopedNet(NetConfig config, NetParams params) : config_(config), params_(std::move(params)) {
  config_.validate();
  const std::size_t d = config_.d;
  const std::size_t H = config_.mlp_hidden;
  if (!(params_.eps > 0.0)) throw PreconditionError("NetParams: eps must be > 0");
  if (config_.has_recall()) {
    require_shape(params_.w_x, d, d, "w_x");
    require_shape(params_.w_0, d, d, "w_0");
  } else if (!params_.w_x.empty() || !params_.w_0.empty()) {
    throw PreconditionError("NetParams: autonomous nets carry no recall parameters");
  }
  require_shape(params_.mix, config_.mix_heads, 2 * config_.mix_radius() + 1, "mix");
  if (params_.proj.size() != config_.mix_heads) throw DimensionError("NetParams: one projection per mixing head");
  for (const auto& pr : params_.proj) require_shape(pr, d, d, "proj");
  require_shape(params_.b_p, d, 1, "b_p");
  require_shape(params_.w1, H, d, "w1");
  require_shape(params_.b1, H, 1, "b1");
  require_shape(params_.w2, d, H, "w2");
  require_shape(params_.b2, d, 1, "b2");
  if (config_.inner_norm()) {
    require_shape(params_.pre_gain1, d, 1, "pre_gain1");
    require_shape(params_.pre_gain2, d, 1, "pre_gain2");
  }
  if (config_.outer_norm()) {
    require_shape(params_.out_gain1, d, 1, "out_gain1");
    require_shape(params_.out_gain2, d, 1, "out_gain2");
  }
  if (config_.gated() && (!params_.gru1 || !params_.gru2)) throw PreconditionError("NetParams: gru mode needs gates");
  if (params_.e.rows() != d) throw DimensionError("NetParams: e must have d rows");
  for (const auto& [name, m] : std::as_const(params_).named_tensors())
    if (!m->all_finite()) throw PreconditionError("NetParams: non-finite entry in " + name);
}

LoopedNet LoopedNet::random(const NetConfig& config, Rng& rng) { return LoopedNet(config, make_params(config, &rng)); }

NetParams LoopedNet::zero_params(const NetConfig& config) { return make_params(config, nullptr); }

// ---- building blocks -------------------------------------------------------

namespace {

void require_state(const LoopedNet& net, const StateMatrix& x, const char* what) {
  if (x.rows() != net.d() || x.cols() == 0) {
    throw DimensionError(std::string(what) + ": state must be d x L with d = " + std::to_string(net.d()) +
                         ", got " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
  }
}

void add_column_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double b = bias[i];
    for (double& v : m.row(i)) v += b;
  }
}

// out += a * b^T
void add_a_bt(Matrix& out, const Matrix& a, const Matrix& b) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    auto orow = out.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t c = 0; c < arow.size(); ++c) s += arow[c] * brow[c];
      orow[j] += s;
    }
  }
}

// a^T * b
Matrix at_b(const Matrix& a, const Matrix& b) {
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < arow.size(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < brow.size(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

void add_row_sums(Matrix& bias_grad, const Matrix& g) {
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double s = 0.0;
    for (double v : g.row(i)) s += v;
    bias_grad[i] += s;
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double inv_rms(std::span<const double> x, double eps) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  return 1.0 / std::sqrt(ms + eps);
}

std::vector<double> column_values(const Matrix& m, std::size_t c) {
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = m(i, c);
  return out;
}

// grad of rms_norm, accumulating the gain gradient.
StateMatrix rms_norm_backward(const StateMatrix& x, const Matrix& gain, double eps, const StateMatrix& gy,
                              Matrix& gain_grad) {
  const std::size_t d = x.rows();
  StateMatrix gx(d, x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    const auto col = column_values(x, c);
    const double ir = inv_rms(col, eps);
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      gain_grad[i] += gy(i, c) * col[i] * ir;
      dot += gain[i] * gy(i, c) * col[i];
    }
    const double k = dot * ir * ir * ir / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) gx(i, c) = gain[i] * gy(i, c) * ir - col[i] * k;
  }
  return gx;
}

struct GateValues {
  Matrix r, u, c, out;
};

GateValues gru_forward(const GruGate& g, const StateMatrix& s, const StateMatrix& o) {
  Matrix ar = g.w_r * o + g.u_r * s;
  add_column_bias(ar, g.b_r);
  Matrix au = g.w_u * o + g.u_u * s;
  add_column_bias(au, g.b_u);
  GateValues v;
  v.r = ar;
  v.u = au;
  for (auto& x : v.r.data()) x = sigmoid(x);
  for (auto& x : v.u.data()) x = sigmoid(x);
  Matrix ac = g.w_c * o + g.u_c * hadamard(v.r, s);
  add_column_bias(ac, g.b_c);
  v.c = ac;
  for (auto& x : v.c.data()) x = std::tanh(x);
  v.out = s;
  for (std::size_t i = 0; i < s.size(); ++i) v.out[i] = (1.0 - v.u[i]) * s[i] + v.u[i] * v.c[i];
  return v;
}

Matrix scale_rows(const Matrix& m, std::span<const double> diag) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (double& v : out.row(i)) v *= diag[i];
  return out;
}

// Per-token partial Jacobians of the gated combine with respect to s and o.
std::pair<Matrix, Matrix> gru_token_partials(const GruGate& g, const SiteCache& site, std::size_t c) {
  const std::size_t d = site.s.rows();
  std::vector<double> s(d), r(d), u(d), cc(d), dr(d), du(d), dc(d), one_minus_u(d), c_minus_s(d);
  for (std::size_t i = 0; i < d; ++i) {
    s[i] = site.s(i, c);
    r[i] = site.r_gate(i, c);
    u[i] = site.u_gate(i, c);
    cc[i] = site.c_gate(i, c);
    dr[i] = r[i] * (1.0 - r[i]);
    du[i] = u[i] * (1.0 - u[i]);
    dc[i] = 1.0 - cc[i] * cc[i];
    one_minus_u[i] = 1.0 - u[i];
    c_minus_s[i] = cc[i] - s[i];
  }
  const Matrix dr_ds = scale_rows(g.u_r, dr);
  const Matrix dr_do = scale_rows(g.w_r, dr);
  const Matrix du_ds = scale_rows(g.u_u, du);
  const Matrix du_do = scale_rows(g.w_u, du);
  // dc/ds = Dc U_c (diag(r) + diag(s) dr/ds); dc/do = Dc (W_c + U_c diag(s) dr/do)
  Matrix inner_s = scale_rows(dr_ds, s);
  for (std::size_t i = 0; i < d; ++i) inner_s(i, i) += r[i];
  const Matrix dc_ds = scale_rows(g.u_c * inner_s, dc);
  const Matrix dc_do = scale_rows(g.w_c + g.u_c * scale_rows(dr_do, s), dc);

  Matrix cs = scale_rows(du_ds, c_minus_s) + scale_rows(dc_ds, u);
  for (std::size_t i = 0; i < d; ++i) cs(i, i) += one_minus_u[i];
  Matrix co = scale_rows(du_do, c_minus_s) + scale_rows(dc_do, u);
  return {cs, co};
}

// Returns (grad_s, grad_o) and accumulates gate parameter gradients.
std::pair<StateMatrix, StateMatrix> gru_backward(const GruGate& g, const SiteCache& site, const StateMatrix& gout,
                                                 GruGate& gg) {
  const std::size_t n = gout.size();
  const std::size_t d = gout.rows();
  const std::size_t L = gout.cols();
  Matrix gs(d, L), ga_c(d, L), ga_u(d, L);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = site.u_gate[i];
    const double c = site.c_gate[i];
    const double s = site.s[i];
    gs[i] = gout[i] * (1.0 - u);
    ga_u[i] = gout[i] * (c - s) * u * (1.0 - u);
    ga_c[i] = gout[i] * u * (1.0 - c * c);
  }
  const Matrix rs = hadamard(site.r_gate, site.s);
  add_a_bt(gg.w_c, ga_c, site.o);
  add_a_bt(gg.u_c, ga_c, rs);
  add_row_sums(gg.b_c, ga_c);
  Matrix go = at_b(g.w_c, ga_c);
  const Matrix g_rs = at_b(g.u_c, ga_c);
  Matrix ga_r(d, L);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = site.r_gate[i];
    gs[i] += g_rs[i] * r;
    ga_r[i] = g_rs[i] * site.s[i] * r * (1.0 - r);
  }
  add_a_bt(gg.w_u, ga_u, site.o);
  add_a_bt(gg.u_u, ga_u, site.s);
  add_row_sums(gg.b_u, ga_u);
  go += at_b(g.w_u, ga_u);
  gs += at_b(g.u_u, ga_u);
  add_a_bt(gg.w_r, ga_r, site.o);
  add_a_bt(gg.u_r, ga_r, site.s);
  add_row_sums(gg.b_r, ga_r);
  go += at_b(g.w_r, ga_r);
  gs += at_b(g.u_r, ga_r);
  return {gs, go};
}

// Stacked per-head mixed inputs: rows [h*d, (h+1)*d) hold sum_o k_h[o] v[:, c+o].
Matrix mix_tokens(const NetParams& p, std::size_t radius, const StateMatrix& v) {
  const std::size_t d = v.rows();
  const std::size_t L = v.cols();
  const std::size_t heads = p.proj.size();
  const long r = static_cast<long>(radius);
  Matrix m(heads * d, L);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t c = 0; c < L; ++c) {
      for (long o = -r; o <= r; ++o) {
        const long j = static_cast<long>(c) + o;
        if (j < 0 || j >= static_cast<long>(L)) continue;
        const double k = p.mix(h, static_cast<std::size_t>(o + r));
        if (k == 0.0) continue;
        for (std::size_t i = 0; i < d; ++i) m(h * d + i, c) += k * v(i, static_cast<std::size_t>(j));
      }
    }
  }
  return m;
}

Matrix head_block(const Matrix& stacked, std::size_t h, std::size_t d) {
  Matrix out(d, stacked.cols());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t c = 0; c < stacked.cols(); ++c) out(i, c) = stacked(h * d + i, c);
  return out;
}

StateMatrix mix_output(const NetParams& p, const Matrix& stacked, std::size_t d) {
  StateMatrix o(d, stacked.cols());
  for (std::size_t h = 0; h < p.proj.size(); ++h) o += p.proj[h] * head_block(stacked, h, d);
  add_column_bias(o, p.b_p);
  return o;
}

StateMatrix token_mix_backward(const NetParams& p, std::size_t radius, const SiteCache& site, const StateMatrix& go,
                               NetParams& grads) {
  const std::size_t d = go.rows();
  const std::size_t L = go.cols();
  const long r = static_cast<long>(radius);
  add_row_sums(grads.b_p, go);
  StateMatrix gu(d, L);
  for (std::size_t h = 0; h < p.proj.size(); ++h) {
    const Matrix m = head_block(site.hidden, h, d);
    add_a_bt(grads.proj[h], go, m);
    const Matrix gm = at_b(p.proj[h], go);
    for (std::size_t c = 0; c < L; ++c) {
      for (long o = -r; o <= r; ++o) {
        const long j = static_cast<long>(c) + o;
        if (j < 0 || j >= static_cast<long>(L)) continue;
        const auto jj = static_cast<std::size_t>(j);
        const auto ko = static_cast<std::size_t>(o + r);
        const double k = p.mix(h, ko);
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          dot += gm(i, c) * site.u(i, jj);
          gu(i, jj) += k * gm(i, c);
        }
        grads.mix(h, ko) += dot;
      }
    }
  }
  return gu;
}

Matrix mlp_preactivation(const NetParams& p, const StateMatrix& v) {
  Matrix a = p.w1 * v;
  add_column_bias(a, p.b1);
  return a;
}

StateMatrix mlp_from_preactivation(const NetParams& p, const Matrix& a) {
  Matrix act = a;
  for (auto& x : act.data()) x = gelu(x);
  StateMatrix o = p.w2 * act;
  add_column_bias(o, p.b2);
  return o;
}

StateMatrix mlp_backward(const NetParams& p, const SiteCache& site, const StateMatrix& go, NetParams& grads) {
  Matrix act = site.hidden;
  for (auto& x : act.data()) x = gelu(x);
  add_row_sums(grads.b2, go);
  add_a_bt(grads.w2, go, act);
  Matrix ga = at_b(p.w2, go);
  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= gelu_derivative(site.hidden[i]);
  add_a_bt(grads.w1, ga, site.u);
  add_row_sums(grads.b1, ga);
  return at_b(p.w1, ga);
}

enum class Sublayer { mix, mlp };

struct SiteParams {
  Sublayer which;
  const Matrix* pre_gain;
  const Matrix* out_gain;
  const GruGate* gate;
};

SiteParams site_params(const NetParams& p, const NetConfig& c, int site) {
  SiteParams sp{};
  sp.which = site == 1 ? Sublayer::mix : Sublayer::mlp;
  sp.pre_gain = c.inner_norm() ? (site == 1 ? &p.pre_gain1 : &p.pre_gain2) : nullptr;
  sp.out_gain = c.outer_norm() ? (site == 1 ? &p.out_gain1 : &p.out_gain2) : nullptr;
  sp.gate = c.gated() ? (site == 1 ? &*p.gru1 : &*p.gru2) : nullptr;
  return sp;
}

void run_site(const LoopedNet& net, int index, SiteCache& site) {
  const auto& p = net.params();
  const auto& c = net.config();
  const SiteParams sp = site_params(p, c, index);
  site.u = sp.pre_gain ? rms_norm(site.v, *sp.pre_gain, p.eps) : site.v;
  if (sp.which == Sublayer::mix) {
    site.hidden = mix_tokens(p, c.mix_radius(), site.u);
    site.o = mix_output(p, site.hidden, c.d);
  } else {
    site.hidden = mlp_preactivation(p, site.u);
    site.o = mlp_from_preactivation(p, site.hidden);
  }
  if (sp.gate) {
    GateValues gv = gru_forward(*sp.gate, site.s, site.o);
    site.r_gate = std::move(gv.r);
    site.u_gate = std::move(gv.u);
    site.c_gate = std::move(gv.c);
    site.combined = std::move(gv.out);
  } else {
    site.combined = site.s + site.o;
  }
  site.out = sp.out_gain ? rms_norm(site.combined, *sp.out_gain, p.eps) : site.combined;
}

// d(out) = a_s d(s) + a_v d(v) for one site.
struct SiteLinearization {
  Matrix a_s;
  Matrix a_v;
};

Matrix token_block_diag(std::size_t d, std::size_t L, const auto& block_for_token) {
  Matrix out(d * L, d * L);
  for (std::size_t c = 0; c < L; ++c) {
    const Matrix b = block_for_token(c);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out(c * d + i, c * d + j) = b(i, j);
  }
  return out;
}

Matrix norm_jacobian(const StateMatrix& x, const Matrix& gain, double eps) {
  return token_block_diag(x.rows(), x.cols(), [&](std::size_t c) {
    const auto col = column_values(x, c);
    return rms_norm_token_jacobian(col, gain, eps);
  });
}

SiteLinearization linearize_site(const LoopedNet& net, int index, const SiteCache& site) {
  const auto& p = net.params();
  const auto& c = net.config();
  const std::size_t d = c.d;
  const std::size_t L = site.s.cols();
  const SiteParams sp = site_params(p, c, index);

  Matrix jh = sp.which == Sublayer::mix ? token_mix_jacobian(p, c.mix_radius(), L) : mlp_jacobian(p, site.u);
  if (sp.pre_gain) jh = jh * norm_jacobian(site.v, *sp.pre_gain, p.eps);

  SiteLinearization lin;
  if (sp.gate) {
    Matrix cs(d * L, d * L), co(d * L, d * L);
    for (std::size_t t = 0; t < L; ++t) {
      auto [bs, bo] = gru_token_partials(*sp.gate, site, t);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          cs(t * d + i, t * d + j) = bs(i, j);
          co(t * d + i, t * d + j) = bo(i, j);
        }
    }
    lin.a_s = std::move(cs);
    lin.a_v = co * jh;
  } else {
    lin.a_s = Matrix::identity(d * L);
    lin.a_v = std::move(jh);
  }
  if (sp.out_gain) {
    const Matrix jphi = norm_jacobian(site.combined, *sp.out_gain, p.eps);
    lin.a_s = jphi * lin.a_s;
    lin.a_v = jphi * lin.a_v;
  }
  return lin;
}

}  // namespace

StateMatrix recall_combine(const LoopedNet& net, const StateMatrix& x, const StateMatrix& x0) {
  if (!net.config().has_recall()) throw PreconditionError("recall_combine: autonomous nets have no recall");
  require_state(net, x, "recall_combine");
  if (x0.rows() != x.rows() || x0.cols() != x.cols()) throw DimensionError("recall_combine: x and x0 shapes differ");
  return net.params().w_x * x + net.params().w_0 * x0;
}

StateMatrix rms_norm(const StateMatrix& x, const Matrix& gain, double eps) {
  if (gain.size() != x.rows()) throw DimensionError("rms_norm: gain length must equal d");
  StateMatrix y(x.rows(), x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    const double ir = inv_rms(column_values(x, c), eps);
    for (std::size_t i = 0; i < x.rows(); ++i) y(i, c) = gain[i] * x(i, c) * ir;
  }
  return y;
}

Matrix rms_norm_token_jacobian(std::span<const double> x, const Matrix& gain, double eps) {
  const std::size_t d = x.size();
  const double ir = inv_rms(x, eps);
  const double k = ir * ir * ir / static_cast<double>(d);
  Matrix j(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t m = 0; m < d; ++m) j(i, m) = -gain[i] * x[i] * x[m] * k;
    j(i, i) += gain[i] * ir;
  }
  return j;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

StateMatrix token_mix_sublayer(const NetParams& p, std::size_t radius, const StateMatrix& v) {
  return mix_output(p, mix_tokens(p, radius, v), v.rows());
}

StateMatrix mlp_sublayer(const NetParams& p, const StateMatrix& v) {
  return mlp_from_preactivation(p, mlp_preactivation(p, v));
}

Matrix token_mix_jacobian(const NetParams& p, std::size_t radius, std::size_t L) {
  const std::size_t d = p.b_p.rows();
  const long r = static_cast<long>(radius);
  Matrix j(d * L, d * L);
  for (std::size_t h = 0; h < p.proj.size(); ++h) {
    for (std::size_t c = 0; c < L; ++c) {
      for (long o = -r; o <= r; ++o) {
        const long src = static_cast<long>(c) + o;
        if (src < 0 || src >= static_cast<long>(L)) continue;
        const double k = p.mix(h, static_cast<std::size_t>(o + r));
        const auto s = static_cast<std::size_t>(src);
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t b = 0; b < d; ++b) j(c * d + a, s * d + b) += k * p.proj[h](a, b);
      }
    }
  }
  return j;
}

Matrix mlp_jacobian(const NetParams& p, const StateMatrix& v) {
  const Matrix a = mlp_preactivation(p, v);
  return token_block_diag(v.rows(), v.cols(), [&](std::size_t c) {
    std::vector<double> slope(a.rows());
    for (std::size_t k = 0; k < a.rows(); ++k) slope[k] = gelu_derivative(a(k, c));
    return p.w2 * scale_rows(p.w1, slope);
  });
}

StateMatrix step(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0) {
  return step(net, x_t, x0, nullptr);
}

StateMatrix step(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0, StepCache* cache) {
  require_state(net, x_t, "step");
  const auto& c = net.config();
  if (c.has_recall() && (x0.rows() != x_t.rows() || x0.cols() != x_t.cols())) {
    throw DimensionError("step: x0 must have the same shape as x_t");
  }
  StepCache local;
  StepCache& sc = cache ? *cache : local;
  sc.x = x_t;
  sc.x0 = c.has_recall() ? x0 : StateMatrix{};

  switch (c.recall) {
    case RecallMode::external:
      sc.site1.s = recall_combine(net, x_t, x0);
      sc.site1.v = sc.site1.s;
      break;
    case RecallMode::internal:
      sc.site1.s = x_t;
      sc.site1.v = recall_combine(net, x_t, x0);
      break;
    case RecallMode::autonomous:
      sc.site1.s = x_t;
      sc.site1.v = x_t;
      break;
  }
  run_site(net, 1, sc.site1);
  const StateMatrix& z = sc.site1.out;
  sc.site2.s = z;
  sc.site2.v = c.recall == RecallMode::internal ? recall_combine(net, z, x0) : z;
  run_site(net, 2, sc.site2);
  if (!sc.site2.out.all_finite()) throw NumericOverflowError("step: non-finite state");
  return sc.site2.out;
}

StepJacobians step_jacobians(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0) {
  StepCache cache;
  step(net, x_t, x0, &cache);
  const auto& c = net.config();
  const std::size_t n = c.d * x_t.cols();
  const SiteLinearization s1 = linearize_site(net, 1, cache.site1);
  const SiteLinearization s2 = linearize_site(net, 2, cache.site2);

  StepJacobians out;
  if (c.recall == RecallMode::autonomous) {
    const Matrix dz = s1.a_s + s1.a_v;
    out.j_state = (s2.a_s + s2.a_v) * dz;
    out.j_input = Matrix(n, n);
    return out;
  }
  const Matrix jgx = block_diag_repeat(net.params().w_x, x_t.cols());
  const Matrix jg0 = block_diag_repeat(net.params().w_0, x_t.cols());
  if (c.recall == RecallMode::external) {
    const Matrix site1 = s1.a_s + s1.a_v;
    const Matrix site2 = s2.a_s + s2.a_v;
    out.j_state = site2 * (site1 * jgx);
    out.j_input = site2 * (site1 * jg0);
  } else {
    const Matrix dz_dx = s1.a_s + s1.a_v * jgx;
    const Matrix dz_dx0 = s1.a_v * jg0;
    const Matrix site2 = s2.a_s + s2.a_v * jgx;
    out.j_state = site2 * dz_dx;
    out.j_input = site2 * dz_dx0 + s2.a_v * jg0;
  }
  return out;
}

SublayerJacobians sublayer_jacobians(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0) {
  StepCache cache;
  step(net, x_t, x0, &cache);
  const auto& c = net.config();
  const auto& p = net.params();
  SublayerJacobians out;
  if (c.has_recall()) {
    out.recall_state = block_diag_repeat(p.w_x, x_t.cols());
    out.recall_input = block_diag_repeat(p.w_0, x_t.cols());
  }
  out.h1 = token_mix_jacobian(p, c.mix_radius(), x_t.cols());
  out.h2 = mlp_jacobian(p, cache.site2.u);
  return out;
}

namespace {

std::pair<StateMatrix, StateMatrix> site_backward(const LoopedNet& net, int index, const SiteCache& site,
                                                  const StateMatrix& gout, NetParams& grads) {
  const auto& p = net.params();
  const auto& c = net.config();
  const SiteParams sp = site_params(p, c, index);
  StateMatrix gcomb =
      sp.out_gain ? rms_norm_backward(site.combined, *sp.out_gain, p.eps, gout,
                                      index == 1 ? grads.out_gain1 : grads.out_gain2)
                  : gout;
  StateMatrix gs, go;
  if (sp.gate) {
    std::tie(gs, go) = gru_backward(*sp.gate, site, gcomb, index == 1 ? *grads.gru1 : *grads.gru2);
  } else {
    gs = gcomb;
    go = std::move(gcomb);
  }
  StateMatrix gu = sp.which == Sublayer::mix ? token_mix_backward(p, c.mix_radius(), site, go, grads)
                                             : mlp_backward(p, site, go, grads);
  StateMatrix gv = sp.pre_gain ? rms_norm_backward(site.v, *sp.pre_gain, p.eps, gu,
                                                   index == 1 ? grads.pre_gain1 : grads.pre_gain2)
                               : std::move(gu);
  return {std::move(gs), std::move(gv)};
}

// Backward through g = W_x x + W_0 x0; adds into gx and gx0.
void recall_backward(const NetParams& p, const StateMatrix& x, const StateMatrix& x0, const StateMatrix& gg,
                     NetParams& grads, StateMatrix& gx, StateMatrix& gx0) {
  add_a_bt(grads.w_x, gg, x);
  add_a_bt(grads.w_0, gg, x0);
  gx += at_b(p.w_x, gg);
  gx0 += at_b(p.w_0, gg);
}

}  // namespace

StepGradients step_backward(const LoopedNet& net, const StepCache& cache, const StateMatrix& grad_out,
                            NetParams& grads) {
  const auto& c = net.config();
  const auto& p = net.params();
  const std::size_t d = c.d;
  const std::size_t L = cache.x.cols();
  StepGradients out{StateMatrix(d, L), c.has_recall() ? StateMatrix(d, L) : StateMatrix{}};

  auto [gs2, gv2] = site_backward(net, 2, cache.site2, grad_out, grads);
  StateMatrix gz = std::move(gs2);
  if (c.recall == RecallMode::internal) {
    recall_backward(p, cache.site2.s, cache.x0, gv2, grads, gz, out.x0);
  } else {
    gz += gv2;
  }
  auto [gs1, gv1] = site_backward(net, 1, cache.site1, gz, grads);
  switch (c.recall) {
    case RecallMode::external: {
      gs1 += gv1;
      recall_backward(p, cache.x, cache.x0, gs1, grads, out.x, out.x0);
      break;
    }
    case RecallMode::internal:
      out.x += gs1;
      recall_backward(p, cache.x, cache.x0, gv1, grads, out.x, out.x0);
      break;
    case RecallMode::autonomous:
      out.x += gs1;
      out.x += gv1;
      break;
  }
  return out;
}

}  // namespace looplab

#include "looplab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "looplab/errors.hpp"
#include "looplab/format.hpp"
#include "looplab/linalg.hpp"
#include "looplab/rng.hpp"

namespace looplab {

// ---- data ------------------------------------------------------------------

PrefixSumExample make_prefix_example(std::vector<std::uint8_t> input, PrefixConvention convention) {
  PrefixSumExample ex;
  ex.target_bits.resize(input.size());
  std::uint8_t parity = 0;
  for (std::size_t k = 0; k < input.size(); ++k) {
    if (input[k] > 1) throw PreconditionError("make_prefix_example: bits must be 0 or 1");
    if (convention == PrefixConvention::exclusive) ex.target_bits[k] = parity;
    parity ^= input[k];
    if (convention == PrefixConvention::inclusive) ex.target_bits[k] = parity;
  }
  ex.input_bits = std::move(input);
  return ex;
}

std::vector<PrefixSumExample> gen_prefix_sums(std::size_t n_examples, std::size_t bits, std::uint64_t seed,
                                              PrefixConvention convention) {
  if (bits < 1) throw PreconditionError("gen_prefix_sums: bits must be >= 1");
  Rng rng(seed);
  std::vector<PrefixSumExample> out;
  out.reserve(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) {
    std::vector<std::uint8_t> input(bits);
    for (auto& b : input) b = static_cast<std::uint8_t>(rng.next_u64() >> 63);
    out.push_back(make_prefix_example(std::move(input), convention));
  }
  return out;
}

std::string dataset_to_text(const std::vector<PrefixSumExample>& data) {
  std::string out;
  for (const auto& ex : data) {
    for (auto b : ex.input_bits) out.push_back(static_cast<char>('0' + b));
    out.push_back('\t');
    for (auto b : ex.target_bits) out.push_back(static_cast<char>('0' + b));
    out.push_back('\n');
  }
  return out;
}

std::vector<PrefixSumExample> dataset_from_text(const std::string& text) {
  std::vector<PrefixSumExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto parse_bits = [&](const std::string& s) {
    std::vector<std::uint8_t> bits;
    for (char ch : s) {
      if (ch != '0' && ch != '1') throw FormatError("dataset line " + std::to_string(lineno) + ": bad bit");
      bits.push_back(static_cast<std::uint8_t>(ch - '0'));
    }
    return bits;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("dataset line " + std::to_string(lineno) + ": missing tab");
    PrefixSumExample ex{parse_bits(line.substr(0, tab)), parse_bits(line.substr(tab + 1))};
    if (ex.input_bits.empty() || ex.input_bits.size() != ex.target_bits.size())
      throw FormatError("dataset line " + std::to_string(lineno) + ": input and target lengths differ");
    out.push_back(std::move(ex));
  }
  return out;
}

std::pair<std::size_t, std::size_t> progressive_sample(std::size_t T, Rng& rng) {
  if (T < 2) throw PreconditionError("progressive_sample: T must be >= 2");
  const auto n = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(T - 2)));
  const auto k = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(T - 1 - n)));
  return {n, k};
}

// ---- model -----------------------------------------------------------------

std::vector<std::pair<std::string, Matrix*>> ModelParams::trainable() {
  auto out = net.named_tensors(false);
  out.emplace_back("embed", &embed);
  out.emplace_back("readout_w", &readout_w);
  out.emplace_back("readout_b", &readout_b);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::trainable() const {
  auto out = net.named_tensors(false);
  out.emplace_back("embed", &embed);
  out.emplace_back("readout_w", &readout_w);
  out.emplace_back("readout_b", &readout_b);
  return out;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z{net.zeros_like(), Matrix(embed.rows(), embed.cols()), Matrix(readout_w.rows(), readout_w.cols()),
                Matrix(readout_b.rows(), readout_b.cols())};
  return z;
}

Model Model::random(const NetConfig& config, Rng& rng) {
  Model m;
  m.config = config;
  m.params.net = LoopedNet::random(config, rng).params();
  m.params.embed = Matrix::gaussian(config.d, 2, rng);
  m.params.readout_w = Matrix::gaussian(2, config.d, rng, 1.0 / std::sqrt(static_cast<double>(config.d)));
  m.params.readout_b = Matrix(2, 1);
  return m;
}

StateMatrix embed_input(const Model& model, std::span<const std::uint8_t> bits) {
  const std::size_t d = model.config.d;
  StateMatrix x0(d, bits.size());
  for (std::size_t c = 0; c < bits.size(); ++c)
    for (std::size_t i = 0; i < d; ++i) x0(i, c) = model.params.embed(i, bits[c]);
  return x0;
}

StateMatrix initial_state(const Model& model, const StateMatrix& x0) {
  return model.config.has_recall() ? StateMatrix(x0.rows(), x0.cols()) : x0;
}

Matrix readout(const Model& model, const StateMatrix& x) {
  Matrix logits = model.params.readout_w * x;
  for (std::size_t c = 0; c < logits.cols(); ++c)
    for (std::size_t k = 0; k < 2; ++k) logits(k, c) += model.params.readout_b[k];
  return logits;
}

TensorFile model_to_tensor_file(const Model& model) {
  TensorFile file = to_tensor_file(model.net());
  file.tensors.emplace_back("embed", model.params.embed);
  file.tensors.emplace_back("readout_w", model.params.readout_w);
  file.tensors.emplace_back("readout_b", model.params.readout_b);
  return file;
}

Model model_from_tensor_file(const TensorFile& file) {
  const LoopedNet net = net_from_tensor_file(file);
  Model m;
  m.config = net.config();
  m.params.net = net.params();
  auto take = [&](const char* name, std::size_t rows, std::size_t cols) {
    const Matrix* t = file.find(name);
    if (t == nullptr) throw FormatError(std::string("model file: missing tensor ") + name);
    if (t->rows() != rows || t->cols() != cols) throw FormatError(std::string("model file: bad shape for ") + name);
    return *t;
  };
  m.params.embed = take("embed", m.config.d, 2);
  m.params.readout_w = take("readout_w", 2, m.config.d);
  m.params.readout_b = take("readout_b", 2, 1);
  return m;
}

void save_model(const std::string& path, const Model& model) {
  write_file_atomic(path, encode_tensor_file(model_to_tensor_file(model)));
}

Model load_model(const std::string& path) { return model_from_tensor_file(decode_tensor_file(read_file(path))); }

// ---- loss and gradients ----------------------------------------------------

namespace {

void add_into(ModelParams& acc, const ModelParams& g) {
  auto a = acc.trainable();
  const auto b = g.trainable();
  for (std::size_t t = 0; t < a.size(); ++t) *a[t].second += *b[t].second;
}

/// Sum of token cross-entropies over the K supervised iterates; gradients are
/// accumulated with weight `scale`.
double example_loss_and_grads(const Model& model, const LoopedNet& net, const PrefixSumExample& ex,
                              std::size_t N, std::size_t K, double scale, ModelParams& grads) {
  const std::size_t L = ex.input_bits.size();
  const StateMatrix x0 = embed_input(model, ex.input_bits);
  const StateMatrix step_x0 = model.config.has_recall() ? x0 : StateMatrix{};
  StateMatrix x = initial_state(model, x0);
  for (std::size_t t = 0; t < N; ++t) {
    try {
      x = step(net, x, step_x0);
    } catch (const NumericOverflowError&) {
      throw NumericOverflowError("forward: non-finite state at iterate " + std::to_string(t + 1));
    }
  }

  std::vector<StepCache> caches(K);
  std::vector<Matrix> dlogits(K);
  double loss = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    try {
      x = step(net, x, step_x0, &caches[k]);
    } catch (const NumericOverflowError&) {
      throw NumericOverflowError("forward: non-finite state at iterate " + std::to_string(N + k + 1));
    }
    const Matrix logits = readout(model, x);
    Matrix dl(2, L);
    double iter_loss = 0.0;
    for (std::size_t c = 0; c < L; ++c) {
      const double a = logits(0, c), b = logits(1, c);
      const double m = std::max(a, b);
      const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
      const std::size_t y = ex.target_bits[c];
      iter_loss += lse - logits(y, c);
      const double p1 = std::exp(b - lse);
      dl(0, c) = scale * ((1.0 - p1) - (y == 0 ? 1.0 : 0.0));
      dl(1, c) = scale * (p1 - (y == 1 ? 1.0 : 0.0));
    }
    if (!std::isfinite(iter_loss))
      throw NumericOverflowError("forward: non-finite loss at iterate " + std::to_string(N + k + 1));
    loss += iter_loss;
    dlogits[k] = std::move(dl);
  }

  StateMatrix g(model.config.d, L);
  StateMatrix gx0(model.config.d, L);
  for (std::size_t kk = K; kk-- > 0;) {
    const StateMatrix& xk = caches[kk].site2.out;
    g += model.params.readout_w.transpose() * dlogits[kk];
    grads.readout_w += dlogits[kk] * xk.transpose();
    for (std::size_t c = 0; c < L; ++c)
      for (std::size_t r = 0; r < 2; ++r) grads.readout_b[r] += dlogits[kk](r, c);
    StepGradients sg = step_backward(net, caches[kk], g, grads.net);
    g = std::move(sg.x);
    if (model.config.has_recall()) gx0 += sg.x0;
  }
  // With N = 0 an autonomous net starts from the embedded input itself.
  if (N == 0 && !model.config.has_recall()) gx0 += g;
  for (std::size_t c = 0; c < L; ++c)
    for (std::size_t i = 0; i < model.config.d; ++i) grads.embed(i, ex.input_bits[c]) += gx0(i, c);
  return loss * scale;
}

void check_batch(std::span<const PrefixSumExample> batch, std::size_t K) {
  if (batch.empty()) throw PreconditionError("forward_backward: empty batch");
  if (K < 1) throw PreconditionError("forward_backward: K must be >= 1");
  for (const auto& ex : batch)
    if (ex.input_bits.empty() || ex.input_bits.size() != ex.target_bits.size())
      throw PreconditionError("forward_backward: malformed example");
}

double loss_scale(std::span<const PrefixSumExample> batch, std::size_t K) {
  std::size_t tokens = 0;
  for (const auto& ex : batch) tokens += ex.input_bits.size();
  return 1.0 / (static_cast<double>(tokens) * static_cast<double>(K));
}

}  // namespace

LossAndGrads forward_backward(const Model& model, std::span<const PrefixSumExample> batch, std::size_t N,
                              std::size_t K) {
  check_batch(batch, K);
  const LoopedNet net = model.net();
  const double scale = loss_scale(batch, K);
  const std::size_t B = batch.size();
  std::vector<ModelParams> per(B);
  std::vector<double> losses(B, 0.0);
  std::vector<std::string> errors(B);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < B; ++i) {
    per[i] = model.params.zeros_like();
    try {
      losses[i] = example_loss_and_grads(model, net, batch[i], N, K, scale, per[i]);
    } catch (const NumericOverflowError& e) {
      errors[i] = e.what();
    }
  }
  for (std::size_t i = 0; i < B; ++i)
    if (!errors[i].empty()) throw NumericOverflowError("example " + std::to_string(i) + ": " + errors[i]);
  LossAndGrads out{0.0, model.params.zeros_like()};
  for (std::size_t i = 0; i < B; ++i) {
    out.loss += losses[i];
    add_into(out.grads, per[i]);
  }
  return out;
}

LossAndGrads forward_backward_serial(const Model& model, std::span<const PrefixSumExample> batch, std::size_t N,
                                     std::size_t K) {
  check_batch(batch, K);
  const LoopedNet net = model.net();
  const double scale = loss_scale(batch, K);
  LossAndGrads out{0.0, model.params.zeros_like()};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ModelParams g = model.params.zeros_like();
    try {
      out.loss += example_loss_and_grads(model, net, batch[i], N, K, scale, g);
    } catch (const NumericOverflowError& e) {
      throw NumericOverflowError("example " + std::to_string(i) + ": " + e.what());
    }
    add_into(out.grads, g);
  }
  return out;
}

double global_norm(const ModelParams& grads) {
  double sq = 0.0;
  for (const auto& [name, m] : grads.trainable())
    for (double v : m->data()) sq += v * v;
  return std::sqrt(sq);
}

double clip_gradients(ModelParams& grads, double clip_norm) {
  if (!(clip_norm > 0.0)) throw PreconditionError("clip_gradients: clip_norm must be > 0");
  const double norm = global_norm(grads);
  if (norm > clip_norm) {
    const double s = clip_norm / norm;
    for (auto& [name, m] : grads.trainable()) *m *= s;
  }
  return norm;
}

// ---- optimizer and schedule --------------------------------------------------

AdamW::AdamW(const ModelParams& shape, AdamWConfig config)
    : config_(config), m_(shape.zeros_like()), v_(shape.zeros_like()) {}

void AdamW::step(ModelParams& params, const ModelParams& grads, double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto p = params.trainable();
  const auto g = grads.trainable();
  auto m = m_.trainable();
  auto v = v_.trainable();
  for (std::size_t t = 0; t < p.size(); ++t) {
    const auto pd = p[t].second->data();
    const auto gd = g[t].second->data();
    const auto md = m[t].second->data();
    const auto vd = v[t].second->data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
      vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
      const double mhat = md[i] / c1, vhat = vd[i] / c2;
      pd[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * pd[i]);
    }
  }
}

double LrSchedule::at(std::size_t epoch) const {
  double lr = base_lr;
  if (warmup_epochs > 0)
    lr *= 1.0 - std::exp(-static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs));
  if (epoch >= constant_until) lr /= cooldown_factor;
  return lr;
}

// ---- training ----------------------------------------------------------------

NetConfig TrainConfig::default_net() {
  NetConfig c;
  c.d = 32;
  c.L = 16;
  c.recall = RecallMode::external;
  c.norm = NormMode::post;
  c.mlp_hidden = 64;
  c.mix_bandwidth = 5;
  c.mix_heads = 2;
  return c;
}

void TrainConfig::validate() const {
  net.validate();
  if (T_max < 2) throw PreconditionError("TrainConfig: T_max must be >= 2");
  if (!(clip_norm > 0.0)) throw PreconditionError("TrainConfig: clip_norm must be > 0");
  if (batch_size < 1 || epochs < 1 || train_examples < 1 || eval_examples < 1 || train_bits < 1)
    throw PreconditionError("TrainConfig: sizes must be >= 1");
  if (!(schedule.base_lr >= 0.0) || !(schedule.cooldown_factor > 0.0))
    throw PreconditionError("TrainConfig: bad learning-rate schedule");
  for (auto b : eval_bits)
    if (b < 1) throw PreconditionError("TrainConfig: eval bits must be >= 1");
}

std::vector<EvalPoint> evaluate(const Model& model, std::span<const PrefixSumExample> data,
                                const std::vector<std::size_t>& iter_counts) {
  if (iter_counts.empty()) throw PreconditionError("evaluate: iter_counts must be nonempty");
  if (data.empty()) throw PreconditionError("evaluate: empty dataset");
  const std::size_t max_iter = *std::max_element(iter_counts.begin(), iter_counts.end());
  const LoopedNet net = model.net();
  const std::size_t n = data.size();
  // correct[i][j]: bits right for example i after iter_counts[j] iterations.
  std::vector<std::vector<std::size_t>> correct(n, std::vector<std::size_t>(iter_counts.size(), 0));
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = data[i];
    const StateMatrix x0 = embed_input(model, ex.input_bits);
    const StateMatrix step_x0 = model.config.has_recall() ? x0 : StateMatrix{};
    StateMatrix x = initial_state(model, x0);
    for (std::size_t t = 1; t <= max_iter; ++t) {
      try {
        x = step(net, x, step_x0);
      } catch (const NumericOverflowError&) {
        break;  // everything after an overflow counts as wrong
      }
      bool wanted = false;
      for (auto c : iter_counts) wanted = wanted || c == t;
      if (!wanted) continue;
      const Matrix logits = readout(model, x);
      std::size_t right = 0;
      for (std::size_t c = 0; c < ex.input_bits.size(); ++c)
        right += static_cast<std::size_t>(logits(1, c) > logits(0, c)) == ex.target_bits[c];
      for (std::size_t j = 0; j < iter_counts.size(); ++j)
        if (iter_counts[j] == t) correct[i][j] = right;
    }
  }
  std::vector<EvalPoint> out;
  for (std::size_t j = 0; j < iter_counts.size(); ++j) {
    std::size_t bits_right = 0, bits_total = 0, seq_right = 0;
    for (std::size_t i = 0; i < n; ++i) {
      bits_right += correct[i][j];
      bits_total += data[i].input_bits.size();
      seq_right += correct[i][j] == data[i].input_bits.size();
    }
    EvalPoint p;
    p.bits = data[0].input_bits.size();
    p.iterations = iter_counts[j];
    p.bit_acc = static_cast<double>(bits_right) / static_cast<double>(bits_total);
    p.seq_acc = static_cast<double>(seq_right) / static_cast<double>(n);
    out.push_back(p);
  }
  return out;
}

namespace {

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return Rng::substream(seed, a, b).next_u64();
}

}  // namespace

TrainRun train(const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  TrainRun run;
  Rng init_rng = Rng::substream(config.seed, 3, 0);
  run.model = Model::random(config.net, init_rng);
  const auto train_set =
      gen_prefix_sums(config.train_examples, config.train_bits, derived_seed(config.seed, 1, 0), config.convention);
  const auto held_out = gen_prefix_sums(config.eval_examples, config.train_bits,
                                        derived_seed(config.seed, 2, config.train_bits), config.convention);
  AdamW opt(run.model.params, config.optimizer);
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 0; epoch < config.epochs && !run.aborted; ++epoch) {
    Rng rng = Rng::substream(config.seed, 4, epoch);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
    const double lr = config.schedule.at(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<PrefixSumExample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_set[order[i]]);
      const auto [N, K] = progressive_sample(config.T_max, rng);
      LossAndGrads lg;
      try {
        lg = forward_backward(run.model, batch, N, K);
      } catch (const NumericOverflowError& e) {
        run.aborted = true;
        run.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
        break;
      }
      clip_gradients(lg.grads, config.clip_norm);
      opt.step(run.model.params, lg.grads, lr);
      loss_sum += lg.loss;
      ++batches;
    }
    if (run.aborted) break;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(batches);
    const auto ev = evaluate(run.model, held_out, {config.T_max});
    rec.bit_acc = ev[0].bit_acc;
    rec.seq_acc = ev[0].seq_acc;
    rec.rho_wx = config.net.has_recall() ? spectral_radius(run.model.params.net.w_x) : 0.0;
    rec.lr = lr;
    run.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  const std::size_t T = config.T_max;
  for (std::size_t bits : config.eval_bits) {
    const auto data =
        gen_prefix_sums(config.eval_examples, bits, derived_seed(config.seed, 2, bits), config.convention);
    for (const auto& p : evaluate(run.model, data, {T, 2 * T, 4 * T, 8 * T})) run.eval_curve.push_back(p);
  }
  return run;
}

std::string train_log_csv(const std::vector<EpochRecord>& records) {
  std::ostringstream out;
  out << "epoch,loss,bit_acc,seq_acc,rho_wx,lr\n";
  for (const auto& r : records)
    out << r.epoch << ',' << fmt17(r.loss) << ',' << fmt17(r.bit_acc) << ',' << fmt17(r.seq_acc) << ','
        << fmt17(r.rho_wx) << ',' << fmt17(r.lr) << '\n';
  return out.str();
}

std::string eval_csv(const std::vector<EvalPoint>& points) {
  std::ostringstream out;
  out << "bits,iterations,bit_acc,seq_acc\n";
  for (const auto& p : points)
    out << p.bits << ',' << p.iterations << ',' << fmt17(p.bit_acc) << ',' << fmt17(p.seq_acc) << '\n';
  return out.str();
}

}  // namespace looplab

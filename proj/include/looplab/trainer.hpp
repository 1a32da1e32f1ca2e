#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "looplab/netcore.hpp"
#include "looplab/serialize.hpp"

namespace looplab {

// ---- data ------------------------------------------------------------------

struct PrefixSumExample {
  std::vector<std::uint8_t> input_bits;
  std::vector<std::uint8_t> target_bits;
};

/// inclusive: target_k = parity of input_0..input_k. exclusive: input_0..input_{k-1}.
enum class PrefixConvention { inclusive, exclusive };

PrefixSumExample make_prefix_example(std::vector<std::uint8_t> input,
                                     PrefixConvention convention = PrefixConvention::inclusive);
std::vector<PrefixSumExample> gen_prefix_sums(std::size_t n_examples, std::size_t bits, std::uint64_t seed,
                                              PrefixConvention convention = PrefixConvention::inclusive);

/// One example per line: input bits, a tab, target bits.
std::string dataset_to_text(const std::vector<PrefixSumExample>& data);
std::vector<PrefixSumExample> dataset_from_text(const std::string& text);

/// N ~ U[0, T-2], K ~ U[1, T-1-N]. Throws PreconditionError for T < 2.
std::pair<std::size_t, std::size_t> progressive_sample(std::size_t T, Rng& rng);

// ---- model -----------------------------------------------------------------

/// Looped block plus the bit embedding and per-token two-logit readout.
struct ModelParams {
  NetParams net;
  Matrix embed;      // d x 2, column b embeds bit b
  Matrix readout_w;  // 2 x d
  Matrix readout_b;  // 2 x 1

  /// Trainable tensors: the net without its initial iterate, then the extras.
  std::vector<std::pair<std::string, Matrix*>> trainable();
  std::vector<std::pair<std::string, const Matrix*>> trainable() const;
  ModelParams zeros_like() const;
};

struct Model {
  NetConfig config;
  ModelParams params;

  static Model random(const NetConfig& config, Rng& rng);
  LoopedNet net() const { return LoopedNet(config, params.net); }
};

/// Recall nets start from zero; autonomous nets start from the embedded input.
StateMatrix embed_input(const Model& model, std::span<const std::uint8_t> bits);
StateMatrix initial_state(const Model& model, const StateMatrix& x0);
/// 2 x L logits.
Matrix readout(const Model& model, const StateMatrix& x);

TensorFile model_to_tensor_file(const Model& model);
Model model_from_tensor_file(const TensorFile& file);
void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

// ---- loss and gradients ----------------------------------------------------

struct LossAndGrads {
  double loss = 0.0;
  ModelParams grads;
};

/// N gradient-free iterations, then K supervised ones. Loss is the mean
/// cross-entropy over examples, tokens and the K iterates; no gradient flows
/// into the first N steps. Throws NumericOverflowError naming the iterate on a
/// non-finite loss or state.
LossAndGrads forward_backward(const Model& model, std::span<const PrefixSumExample> batch, std::size_t N,
                              std::size_t K);
/// Same, one example at a time; the batched version must match it exactly.
LossAndGrads forward_backward_serial(const Model& model, std::span<const PrefixSumExample> batch, std::size_t N,
                                     std::size_t K);

double global_norm(const ModelParams& grads);
/// Scales grads so their global norm is at most clip_norm; returns the norm before clipping.
double clip_gradients(ModelParams& grads, double clip_norm);

// ---- optimizer and schedule --------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(const ModelParams& shape, AdamWConfig config);
  /// One decoupled-weight-decay Adam step at learning rate lr.
  void step(ModelParams& params, const ModelParams& grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamWConfig config_;
  ModelParams m_, v_;
  std::size_t t_ = 0;
};

struct LrSchedule {
  double base_lr = 3e-3;
  std::size_t warmup_epochs = 4;     // lr * (1 - exp(-(epoch + 1) / warmup_epochs))
  std::size_t constant_until = 24;   // first epoch of the cooldown
  double cooldown_factor = 10.0;
  double at(std::size_t epoch) const;
};

// ---- training ----------------------------------------------------------------

struct TrainConfig {
  NetConfig net = default_net();
  std::size_t T_max = 30;
  LrSchedule schedule;
  std::size_t batch_size = 128;
  std::size_t epochs = 40;
  double clip_norm = 1.0;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  std::size_t train_bits = 16;
  std::size_t train_examples = 8000;
  std::size_t eval_examples = 1000;
  std::vector<std::size_t> eval_bits{16};
  PrefixConvention convention = PrefixConvention::inclusive;

  static NetConfig default_net();
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;     // mean training loss over the epoch's batches
  double bit_acc = 0.0;  // held-out, train_bits, T_max iterations
  double seq_acc = 0.0;
  double rho_wx = 0.0;   // 0 for autonomous nets
  double lr = 0.0;
  bool operator==(const EpochRecord&) const = default;
};

struct EvalPoint {
  std::size_t bits = 0;
  std::size_t iterations = 0;
  double bit_acc = 0.0;
  double seq_acc = 0.0;
};

struct TrainRun {
  std::vector<EpochRecord> records;
  Model model;
  std::vector<EvalPoint> eval_curve;  // every eval_bits length at iteration counts {T, 2T, 4T, 8T}
  bool aborted = false;               // loss became non-finite
  std::string abort_reason;
};

/// `on_epoch` (optional) is called after each epoch, e.g. for progress output.
TrainRun train(const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Accuracy after each requested iteration count (counts need not be sorted).
std::vector<EvalPoint> evaluate(const Model& model, std::span<const PrefixSumExample> data,
                                const std::vector<std::size_t>& iter_counts);

/// CSV with header epoch,loss,bit_acc,seq_acc,rho_wx,lr.
std::string train_log_csv(const std::vector<EpochRecord>& records);
std::string eval_csv(const std::vector<EvalPoint>& points);

}  // namespace looplab

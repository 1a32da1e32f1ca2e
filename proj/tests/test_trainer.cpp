#include <omp.h>

#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "looplab/rng.hpp"
#include "looplab/trainer.hpp"
#include "net_fixtures.hpp"
#include "train_oracles.hpp"

using namespace looplab;
using looplab::testing::max_gradient_error;
using looplab::testing::perturbed_model;

namespace {

std::vector<std::uint8_t> bits_of(const std::string& s) {
  std::vector<std::uint8_t> out;
  for (char c : s) out.push_back(static_cast<std::uint8_t>(c - '0'));
  return out;
}

std::string str_of(const std::vector<std::uint8_t>& bits) {
  std::string s;
  for (auto b : bits) s.push_back(static_cast<char>('0' + b));
  return s;
}

}  // namespace

TEST_CASE("prefix-sum targets") {
  CHECK(str_of(make_prefix_example(bits_of("1011")).target_bits) == "1101");
  CHECK(str_of(make_prefix_example(bits_of("0000")).target_bits) == "0000");
  CHECK(str_of(make_prefix_example(bits_of("1")).target_bits) == "1");
  CHECK(str_of(make_prefix_example(bits_of("1011"), PrefixConvention::exclusive).target_bits) == "0110");
  CHECK_THROWS_AS(make_prefix_example({2}), PreconditionError);

  const auto data = gen_prefix_sums(200, 12, 5);
  for (const auto& ex : data) {
    int sum = 0;
    for (std::size_t k = 0; k < 12; ++k) {
      sum += ex.input_bits[k];
      CHECK(ex.target_bits[k] == sum % 2);
    }
  }
  CHECK(dataset_to_text(gen_prefix_sums(50, 9, 5)) == dataset_to_text(gen_prefix_sums(50, 9, 5)));
  CHECK(dataset_to_text(gen_prefix_sums(50, 9, 5)) != dataset_to_text(gen_prefix_sums(50, 9, 6)));
  CHECK_THROWS_AS(gen_prefix_sums(1, 0, 1), PreconditionError);
}

TEST_CASE("dataset text round trip and errors") {
  const auto data = gen_prefix_sums(20, 7, 3);
  const auto back = dataset_from_text(dataset_to_text(data));
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].input_bits == data[i].input_bits);
    CHECK(back[i].target_bits == data[i].target_bits);
  }
  CHECK(dataset_to_text(data).find("\t") != std::string::npos);
  CHECK_THROWS_AS(dataset_from_text("0101 0110\n"), FormatError);
  CHECK_THROWS_AS(dataset_from_text("012\t011\n"), FormatError);
  CHECK_THROWS_AS(dataset_from_text("01\t011\n"), FormatError);
}

TEST_CASE("progressive_sample ranges") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) CHECK(progressive_sample(2, rng) == std::pair<std::size_t, std::size_t>{0, 1});
  for (int i = 0; i < 10000; ++i) {
    const auto [n, k] = progressive_sample(30, rng);
    CHECK(n <= 28);
    CHECK(k >= 1);
    CHECK(n + k <= 29);
  }
  CHECK_THROWS_AS(progressive_sample(1, rng), PreconditionError);
}

TEST_CASE("progressive_sample N is uniform (chi-square, 1e5 draws)") {
  Rng rng(2);
  const int draws = 100000;
  std::vector<int> counts(29, 0);
  for (int i = 0; i < draws; ++i) ++counts[progressive_sample(30, rng).first];
  const double expected = draws / 29.0;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 28 degrees of freedom, upper 0.1% point.
  CHECK(chi2 < 56.89);
}

TEST_CASE("uniform predictor loss is log 2") {
  NetConfig c;
  c.d = 4;
  c.L = 5;
  Model m;
  m.config = c;
  m.params.net = LoopedNet::zero_params(c);
  m.params.embed = Matrix(4, 2, 1.0);
  m.params.readout_w = Matrix(2, 4);
  m.params.readout_b = Matrix(2, 1);
  const auto data = gen_prefix_sums(10, 5, 1);
  const LossAndGrads lg = forward_backward(m, data, 2, 3);
  CHECK(lg.loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("forward_backward is pure and thread-count independent") {
  NetConfig c;
  c.d = 6;
  c.L = 5;
  c.norm = NormMode::peri;
  Rng rng(3);
  const Model m = perturbed_model(c, rng);
  const auto data = gen_prefix_sums(16, 5, 2);
  const LossAndGrads a = forward_backward(m, data, 1, 1);
  const LossAndGrads b = forward_backward(m, data, 1, 1);
  CHECK(a.loss == b.loss);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(4);
  const LossAndGrads par = forward_backward(m, data, 2, 3);
  omp_set_num_threads(saved);
  const LossAndGrads ser = forward_backward_serial(m, data, 2, 3);
  CHECK(par.loss == ser.loss);
  const auto ta = a.grads.trainable(), tb = b.grads.trainable();
  const auto tp = par.grads.trainable(), ts = ser.grads.trainable();
  for (std::size_t t = 0; t < ta.size(); ++t) {
    CHECK(*ta[t].second == *tb[t].second);
    CHECK(*tp[t].second == *ts[t].second);
  }
}

TEST_CASE("gradients match finite differences (d=8, L=8, T=4)") {
  NetConfig c;
  c.d = 8;
  c.L = 8;
  c.mlp_hidden = 8;
  c.mix_bandwidth = 2;
  c.mix_heads = 2;
  Rng rng(4);
  const Model m = perturbed_model(c, rng);
  const auto data = gen_prefix_sums(3, 8, 4);
  for (auto [n, k] : {std::pair<std::size_t, std::size_t>{0, 3}, {1, 2}, {2, 1}})
    CHECK(max_gradient_error(m, data, n, k, true) <= 1e-4);
}

TEST_CASE("gradients match finite differences for every configuration") {
  for (RecallMode recall : kAllRecallModes)
    for (NormMode norm : kAllNormModes) {
      NetConfig c;
      c.d = 4;
      c.L = 4;
      c.mlp_hidden = 5;
      c.recall = recall;
      c.norm = norm;
      c.mix_heads = 2;
      CAPTURE(to_string(recall));
      CAPTURE(to_string(norm));
      for (int trial = 0; trial < 5; ++trial) {
        Rng rng = Rng::substream(5, static_cast<int>(recall) * 5 + static_cast<int>(norm), trial);
        const Model m = perturbed_model(c, rng);
        const auto data = gen_prefix_sums(2, 4, 100 + trial);
        const std::size_t n = trial % 3, k = 1 + trial % 2;
        CHECK(max_gradient_error(m, data, n, k, true) <= 1e-4);
      }
    }
}

TEST_CASE("the gradient-free prefix is gradient-inert") {
  // Gradients must equal finite differences in which only the supervised
  // steps see the perturbed parameters.
  for (RecallMode recall : {RecallMode::external, RecallMode::internal, RecallMode::autonomous}) {
    NetConfig c;
    c.d = 4;
    c.L = 4;
    c.recall = recall;
    c.norm = NormMode::post;
    Rng rng(6);
    const Model m = perturbed_model(c, rng);
    const auto data = gen_prefix_sums(2, 4, 7);
    CHECK(max_gradient_error(m, data, 3, 2, true) <= 1e-4);
    // Differentiating through the prefix as well gives a different answer.
    CHECK(max_gradient_error(m, data, 3, 2, false) > 1e-3);
  }
}

TEST_CASE("non-finite states are reported with the iterate") {
  NetConfig c;
  c.d = 2;
  c.L = 2;
  Model m;
  m.config = c;
  m.params.net = LoopedNet::zero_params(c);
  m.params.net.w_0 = Matrix::identity(2) * 1e200;
  m.params.net.w_x = Matrix::identity(2) * 1e200;
  m.params.embed = Matrix(2, 2, 1.0);
  m.params.readout_w = Matrix(2, 2);
  m.params.readout_b = Matrix(2, 1);
  const auto data = gen_prefix_sums(1, 2, 1);
  try {
    forward_backward(m, data, 0, 3);
    FAIL("expected overflow");
  } catch (const NumericOverflowError& e) {
    CHECK(std::string(e.what()).find("iterate 2") != std::string::npos);
  }
}

TEST_CASE("gradient clipping contract") {
  NetConfig c;
  c.d = 4;
  c.L = 3;
  Rng rng(8);
  const Model m = perturbed_model(c, rng);
  const auto data = gen_prefix_sums(4, 3, 8);
  LossAndGrads lg = forward_backward(m, data, 0, 2);
  for (auto& [name, t] : lg.grads.trainable()) *t *= 1e3;
  const double before = clip_gradients(lg.grads, 1.0);
  CHECK(before > 1.0);
  CHECK(global_norm(lg.grads) <= 1.0 + 1e-12);
  LossAndGrads small = forward_backward(m, data, 0, 2);
  for (auto& [name, t] : small.grads.trainable()) *t *= 1e-6;
  const ModelParams copy = small.grads;
  clip_gradients(small.grads, 1.0);
  CHECK(small.grads.embed == copy.embed);
  CHECK_THROWS_AS(clip_gradients(small.grads, 0.0), PreconditionError);
}

TEST_CASE("AdamW first step and zero learning rate") {
  NetConfig c;
  c.d = 2;
  c.L = 1;
  Rng rng(9);
  Model m = Model::random(c, rng);
  ModelParams g = m.params.zeros_like();
  g.readout_b[0] = 0.5;
  g.readout_b[1] = -2.0;
  const ModelParams before = m.params;
  AdamW zero(m.params, {});
  zero.step(m.params, g, 0.0);
  CHECK(m.params.readout_w == before.readout_w);
  CHECK(m.params.net.w_x == before.net.w_x);

  AdamW opt(m.params, {});
  opt.step(m.params, g, 0.1);
  // First bias-corrected step is lr * sign(g) (up to eps) plus decay.
  CHECK(m.params.readout_b[0] == doctest::Approx(before.readout_b[0] - 0.1 * (1.0 + 0.01 * before.readout_b[0])));
  CHECK(m.params.readout_b[1] == doctest::Approx(before.readout_b[1] + 0.1));
  CHECK(m.params.embed(0, 0) == doctest::Approx(before.embed(0, 0) * (1 - 0.1 * 0.01)));
}

TEST_CASE("learning-rate schedule") {
  LrSchedule s;
  s.base_lr = 1.0;
  s.warmup_epochs = 10;
  s.constant_until = 60;
  CHECK(s.at(9) == doctest::Approx(1.0 - std::exp(-1.0)));
  CHECK(s.at(9) == doctest::Approx(0.632).epsilon(1e-3));
  CHECK(s.at(59) > 0.99);
  CHECK(s.at(60) == doctest::Approx(s.at(59) / 10.0).epsilon(1e-3));
  LrSchedule d;
  d.base_lr = 1.0;
  CHECK(d.at(0) == doctest::Approx(1.0 - std::exp(-0.25)));
}

TEST_CASE("evaluate: oracle and constant predictors") {
  NetConfig c;
  c.d = 2;
  c.L = 1;
  c.recall = RecallMode::autonomous;
  Model oracle;
  oracle.config = c;
  oracle.params.net = LoopedNet::zero_params(c);  // identity step
  oracle.params.embed = Matrix::from_rows({{-1, 1}, {0, 0}});
  oracle.params.readout_w = Matrix::from_rows({{-1, 0}, {1, 0}});
  oracle.params.readout_b = Matrix(2, 1);
  const auto one_bit = gen_prefix_sums(100, 1, 3);
  for (const auto& p : evaluate(oracle, one_bit, {1, 5, 20})) {
    CHECK(p.seq_acc == 1.0);
    CHECK(p.bit_acc == 1.0);
  }

  Model ones = oracle;
  ones.params.readout_w = Matrix(2, 2);
  ones.params.readout_b = Matrix::from_rows({{0.0}, {1.0}});
  const auto data = gen_prefix_sums(8000, 3, 4);
  const auto r = evaluate(ones, data, {2});
  CHECK(std::abs(r[0].seq_acc - 0.125) <= 3 * std::sqrt(0.125 * 0.875 / 8000));
  CHECK(std::abs(r[0].bit_acc - 0.5) <= 0.02);
  CHECK_THROWS_AS(evaluate(ones, data, {}), PreconditionError);
}

TEST_CASE("checkpoint round trip") {
  NetConfig c;
  c.d = 5;
  c.L = 4;
  c.norm = NormMode::gru;
  c.mix_bandwidth = 1;
  Rng rng(10);
  const Model m = perturbed_model(c, rng);
  const Model back = model_from_tensor_file(decode_tensor_file(encode_tensor_file(model_to_tensor_file(m))));
  CHECK(back.config == m.config);
  const auto a = m.params.trainable(), b = back.params.trainable();
  REQUIRE(a.size() == b.size());
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(*a[t].second == *b[t].second);
  // A plain net file is not a model.
  CHECK_THROWS_AS(model_from_tensor_file(to_tensor_file(m.net())), FormatError);
}

TEST_CASE("train: zero learning rate and determinism") {
  TrainConfig cfg;
  cfg.net.d = 6;
  cfg.net.L = 6;
  cfg.net.mlp_hidden = 8;
  cfg.net.mix_bandwidth = 2;
  cfg.T_max = 2;  // (N, K) = (0, 1) every batch
  cfg.train_bits = 6;
  cfg.train_examples = 64;
  cfg.batch_size = 64;
  cfg.eval_examples = 32;
  cfg.eval_bits = {6, 12};
  cfg.epochs = 3;
  cfg.seed = 11;
  cfg.schedule.base_lr = 0.0;
  const TrainRun frozen = train(cfg);
  REQUIRE(frozen.records.size() == 3);
  for (const auto& r : frozen.records) CHECK(r.loss == doctest::Approx(frozen.records[0].loss).epsilon(1e-12));
  Rng init_rng = Rng::substream(cfg.seed, 3, 0);
  const Model init = Model::random(cfg.net, init_rng);
  CHECK(frozen.model.params.net.w_x == init.params.net.w_x);
  CHECK(frozen.model.params.embed == init.params.embed);
  CHECK(frozen.eval_curve.size() == 8);

  cfg.schedule.base_lr = 3e-3;
  cfg.T_max = 4;
  const TrainRun a = train(cfg);
  const TrainRun b = train(cfg);
  CHECK(a.records == b.records);
  CHECK(train_log_csv(a.records) == train_log_csv(b.records));
  CHECK(train_log_csv(a.records).rfind("epoch,loss,bit_acc,seq_acc,rho_wx,lr\n", 0) == 0);
  CHECK(a.model.params.net.w_x != init.params.net.w_x);
  CHECK_FALSE(a.aborted);

  TrainConfig bad = cfg;
  bad.T_max = 1;
  CHECK_THROWS_AS(train(bad), PreconditionError);
}

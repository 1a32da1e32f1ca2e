#include "looplab/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <charconv>
#include <concepts>
#include <cstdlib>
#include <functional>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "looplab/dynamics.hpp"
#include "looplab/errors.hpp"
#include "looplab/experiments.hpp"
#include "looplab/format.hpp"
#include "looplab/rng.hpp"
#include "looplab/scalarlab.hpp"
#include "looplab/serialize.hpp"
#include "looplab/trainer.hpp"

namespace looplab {
namespace {

/// Bad flag values discovered after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string render(const std::string& s) { return s; }
std::string render(double v) { return fmt17(v); }
template <std::integral T>
std::string render(T v) {
  return std::to_string(v);
}

template <class T>
T parse_number(const std::string& text, const std::string& what) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) throw UsageError("bad value for " + what + ": '" + text + "'");
  return value;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) out.push_back(parse_number<T>(item, what));
  if (out.empty()) throw UsageError(what + " must be a nonempty comma-separated list");
  return out;
}

/// One subcommand: its CLI11 app, its flag values rendered for the manifest,
/// and the action.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::pair<std::string, std::function<std::string()>>> values;
  std::function<int()> run;
  std::size_t threads = 0;

  template <class T>
  CLI::Option* flag(const std::string& name, T& var, const std::string& help) {
    values.emplace_back(name, [&var] { return render(var); });
    return app->add_option("--" + name, var, help);
  }
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::string subcommand;
  const Command* command = nullptr;
  std::vector<std::string> written;

  /// Writes atomically, or prints to stdout when path is empty.
  void emit(const std::string& path, const std::string& contents) {
    if (path.empty()) {
      out << contents;
      return;
    }
    write_file_atomic(path, contents);
    written.push_back(path);
  }

  /// key=value manifest beside every written file.
  void finish(const std::string& status) {
    if (written.empty()) return;
    std::ostringstream m;
    m << "manifest.subcommand=" << subcommand << '\n';
    m << "manifest.version=" << kVersion << '\n';
    m << "manifest.status=" << status << '\n';
    m << "manifest.outputs=";
    for (std::size_t i = 0; i < written.size(); ++i) m << (i ? "," : "") << written[i];
    m << '\n';
    for (const auto& [key, value] : command->values) m << key << '=' << value() << '\n';
    for (const auto& path : written) write_file_atomic(path + ".manifest", m.str());
  }
};

// ---- shared flag groups ---------------------------------------------------------

struct NetFlags {
  std::size_t d = 6;
  std::size_t L = 3;
  std::string recall = "external";
  std::string norm = "none";
  std::size_t mlp_hidden = 8;
  std::string mix_bandwidth = "full";
  std::size_t mix_heads = 1;

  void add(Command& c, bool with_L = true) {
    c.flag("d", d, "state dimension");
    if (with_L) c.flag("L", L, "number of tokens");
    c.flag("recall", recall, "recall mode: autonomous, external, internal");
    c.flag("norm", norm, "norm mode: none, pre, post, peri, gru");
    c.flag("mlp-hidden", mlp_hidden, "MLP hidden width");
    c.flag("mix-bandwidth", mix_bandwidth, "token-mixing half-width, or 'full'");
    c.flag("mix-heads", mix_heads, "number of mixing heads");
  }

  NetConfig config() const {
    NetConfig c;
    c.d = d;
    c.L = L;
    c.recall = parse_recall_mode(recall);
    c.norm = parse_norm_mode(norm);
    c.mlp_hidden = mlp_hidden;
    if (mix_bandwidth != "full") c.mix_bandwidth = parse_number<std::size_t>(mix_bandwidth, "mix-bandwidth");
    c.mix_heads = mix_heads;
    c.validate();
    return c;
  }
};

StateMatrix make_state(const std::string& kind, std::size_t d, std::size_t L, const StateMatrix& x0, Rng& rng,
                       const std::string& what) {
  if (kind == "zero") return StateMatrix(d, L);
  if (kind == "gaussian") return Matrix::gaussian(d, L, rng);
  if (kind == "x0" && !x0.empty()) return x0;
  throw UsageError("bad value for " + what + ": '" + kind + "'");
}

// ---- subcommands --------------------------------------------------------------------

void add_fixed_point(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("fixed-point", "iterate a net to a fixed point and classify it");
  auto s = std::make_shared<NetFlags>();
  auto o = std::make_shared<std::tuple<std::string, double, std::string, std::string, std::size_t, double,
                                       std::uint64_t, std::string, std::string>>(
      "", 0.4, "gaussian", "zero", 10000, 1e-10, 0, "", "");
  auto& [net_path, damping, x0_kind, init, max_iters, tol, seed, out_path, save_path] = *o;
  s->add(c);
  c.flag("net", net_path, "load the net from this file instead of drawing one");
  c.flag("damping", damping, "sublayer output scale for drawn nets");
  c.flag("x0", x0_kind, "input state: gaussian or zero");
  c.flag("init", init, "initial iterate e: zero, x0 or gaussian");
  c.flag("max-iters", max_iters, "iteration cap");
  c.flag("tol", tol, "convergence tolerance (Frobenius, 3 consecutive steps)");
  c.flag("seed", seed, "random seed");
  c.flag("out", out_path, "report CSV (stdout when empty)");
  c.flag("save-net", save_path, "also write the net used");
  c.run = [s, o, &ctx] {
    auto& [net_path, damping, x0_kind, init, max_iters, tol, seed, out_path, save_path] = *o;
    Rng net_rng = Rng::substream(seed, 0, 0);
    Rng rng = Rng::substream(seed, 1, 0);
    const LoopedNet net = net_path.empty() ? damped_net(s->config(), net_rng, damping) : load_net(net_path);
    const NetConfig& cfg = net.config();
    if (max_iters < 1) throw UsageError("max-iters must be >= 1");
    const StateMatrix x0 = cfg.has_recall() ? make_state(x0_kind, cfg.d, cfg.L, {}, rng, "x0") : StateMatrix{};
    const StateMatrix e = make_state(init, cfg.d, cfg.L, x0, rng, "init");
    TrajectoryTolerances tols;
    tols.tol_converge = tol;
    const FixedPointRun run = fixed_point_run(net, x0, e, max_iters, tols);
    if (!save_path.empty()) ctx.emit(save_path, encode_tensor_file(to_tensor_file(net)));
    ctx.emit(out_path, fixed_point_csv(net, run));
    ctx.err << "status " << to_string(run.trajectory.status) << " after " << run.trajectory.iterations
            << " iterations";
    if (run.report) ctx.err << ", rho " << fmt17(run.report->rho) << ' ' << to_string(run.report->classification);
    ctx.err << '\n';
    const bool ok = !run.report || run.report->m_consistent();
    if (!ok) ctx.err << "stability matrix radius disagrees with the step Jacobian\n";
    return ok ? kExitOk : kExitVerificationFailed;
  };
}

void add_jacobian_check(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("jacobian-check", "compare analytic step Jacobians with finite differences");
  auto s = std::make_shared<NetFlags>();
  s->recall = "all";
  s->norm = "all";
  auto o = std::make_shared<std::tuple<std::size_t, double, std::uint64_t, std::string>>(20, 1e-5, 0, "");
  auto& [trials, tol, seed, out_path] = *o;
  s->add(c);
  c.flag("trials", trials, "random nets per (recall, norm) pair");
  c.flag("tol", tol, "maximum relative error");
  c.flag("seed", seed, "random seed");
  c.flag("out", out_path, "per-trial CSV (stdout when empty)");
  c.run = [s, o, &ctx] {
    auto& [trials, tol, seed, out_path] = *o;
    std::vector<NetConfig> configs;
    NetFlags base = *s;
    for (RecallMode r : kAllRecallModes) {
      if (s->recall != "all" && parse_recall_mode(s->recall) != r) continue;
      for (NormMode n : kAllNormModes) {
        if (s->norm != "all" && parse_norm_mode(s->norm) != n) continue;
        base.recall = std::string(to_string(r));
        base.norm = std::string(to_string(n));
        configs.push_back(base.config());
      }
    }
    if (trials < 1) throw UsageError("trials must be >= 1");
    const auto rows = jacobian_check(configs, trials, seed);
    ctx.emit(out_path, jacobian_check_csv(rows));
    double worst = 0.0;
    for (const auto& r : rows) worst = std::max({worst, r.state_error, r.input_error});
    ctx.err << rows.size() << " nets, max relative error " << fmt17(worst) << " (tol " << fmt17(tol) << ")\n";
    return worst <= tol ? kExitOk : kExitVerificationFailed;
  };
}

void add_grad_limit(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("grad-limit", "unrolled input gradient versus the fixed-point resolvent limit");
  auto s = std::make_shared<NetFlags>();
  s->d = 4;
  auto o = std::make_shared<std::tuple<std::size_t, std::size_t, double, double, std::uint64_t, std::string>>(
      10, 500, 0.9, 1e-7, 0, "");
  auto& [nets, T, rho_max, rel_tol, seed, out_path] = *o;
  s->add(c);
  c.flag("nets", nets, "number of stable nets");
  c.flag("T", T, "unrolled depth");
  c.flag("rho-max", rho_max, "largest accepted spectral radius at the fixed point");
  c.flag("rel-tol", rel_tol, "pass when difference <= rel-tol * (1 + ||limit||)");
  c.flag("seed", seed, "random seed");
  c.flag("out", out_path, "per-net CSV (stdout when empty)");
  c.run = [s, o, &ctx] {
    auto& [nets, T, rho_max, rel_tol, seed, out_path] = *o;
    const NetConfig cfg = s->config();
    if (!cfg.has_recall()) throw UsageError("grad-limit needs --recall external or internal");
    if (nets < 1 || T < 1) throw UsageError("nets and T must be >= 1");
    const auto rows = grad_limit_experiment(cfg, nets, T, seed, rho_max, rel_tol);
    ctx.emit(out_path, grad_limit_csv(rows));
    const auto passed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.passed(); });
    ctx.err << passed << '/' << rows.size() << " nets within bound\n";
    return static_cast<std::size_t>(passed) == rows.size() ? kExitOk : kExitVerificationFailed;
  };
}

void add_autonomous_regimes(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("autonomous-regimes", "linear autonomous nets: decay, escape and near-unit growth");
  auto o = std::make_shared<std::tuple<std::string, std::size_t, std::size_t, std::uint64_t, std::string>>(
      "all", 20, 4, 0, "");
  auto& [regime, nets, d, seed, out_path] = *o;
  c.flag("regime", regime, "contracting, expanding, near-unit or all");
  c.flag("nets", nets, "nets per regime");
  c.flag("d", d, "state dimension");
  c.flag("seed", seed, "random seed");
  c.flag("out", out_path, "per-net CSV (stdout when empty)");
  c.run = [o, &ctx] {
    auto& [regime, nets, d, seed, out_path] = *o;
    std::vector<Regime> regimes;
    if (regime == "all")
      regimes = {Regime::contracting, Regime::expanding, Regime::near_unit};
    else
      regimes = {parse_regime(regime)};
    if (nets < 1) throw UsageError("nets must be >= 1");
    const auto rows = regime_experiment(regimes, nets, d, seed);
    ctx.emit(out_path, regime_csv(rows));
    const auto passed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.passed; });
    ctx.err << passed << '/' << rows.size() << " checks passed\n";
    return static_cast<std::size_t>(passed) == rows.size() ? kExitOk : kExitVerificationFailed;
  };
}

void add_stability_map(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("stability-map", "classify a (jg, jh) grid against both stability regions");
  auto o = std::make_shared<std::tuple<std::string, std::size_t, std::string, std::string, std::string>>(
      "both", 400, "10,6", "", "");
  auto& [variant, grid, range, out_path, svg_path] = *o;
  c.flag("variant", variant, "internal, external or both");
  c.flag("grid", grid, "samples per axis");
  c.flag("range", range, "half-ranges of jg and jh");
  c.flag("out", out_path, "grid CSV (stdout when empty)");
  c.flag("svg", svg_path, "also render the regions to this SVG file");
  c.run = [o, &ctx] {
    auto& [variant, grid, range, out_path, svg_path] = *o;
    const bool internal = variant == "internal" || variant == "both";
    const bool external = variant == "external" || variant == "both";
    if (!internal && !external) throw UsageError("bad value for variant: '" + variant + "'");
    const auto r = parse_list<double>(range, "range");
    if (r.size() != 2 || !(r[0] > 0) || !(r[1] > 0)) throw UsageError("range must be two positive numbers");
    if (grid < 2) throw UsageError("grid must be >= 2");
    const StabilityMap map = stability_map(grid, r[0], r[1]);
    ctx.emit(out_path, stability_map_csv(map, internal, external));
    if (!svg_path.empty()) ctx.emit(svg_path, stability_map_svg(map, internal, external));
    std::size_t n_int = 0, n_ext = 0;
    for (char v : map.internal) n_int += v;
    for (char v : map.external) n_ext += v;
    ctx.err << grid * grid << " points";
    if (internal) ctx.err << ", internal " << n_int;
    if (external) ctx.err << ", external " << n_ext;
    ctx.err << '\n';
    return kExitOk;
  };
}

void add_anisotropy(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("anisotropy", "project Gaussian (jg, jh) draws onto both regions and summarize");
  auto o = std::make_shared<std::tuple<std::string, std::size_t, double, std::uint64_t, std::string>>(
      "0.5,1,2,4", 10000, kAnisotropyEps, 0, "");
  auto& [sigmas, n, eps, seed, out_path] = *o;
  c.flag("sigmas", sigmas, "comma-separated standard deviations");
  c.flag("n", n, "draws per sigma");
  c.flag("eps", eps, "floor inside the log-range and balance metrics");
  c.flag("seed", seed, "random seed");
  c.flag("out", out_path, "summary CSV (stdout when empty)");
  c.run = [o, &ctx] {
    auto& [sigmas, n, eps, seed, out_path] = *o;
    const auto sig = parse_list<double>(sigmas, "sigmas");
    for (double s : sig)
      if (!(s > 0)) throw UsageError("sigmas must be positive");
    if (n < 1) throw UsageError("n must be >= 1");
    if (!(eps > 0)) throw UsageError("eps must be positive");
    const auto stats = run_anisotropy(sig, n, eps, seed);
    ctx.emit(out_path, anisotropy_csv(stats));
    bool ok = true;
    for (const auto& st : stats)
      for (Variant v : kAllVariants) {
        const VariantStats& vs = st.of(v);
        ok = ok && vs.log_range.mean >= 0 && vs.log_range.median >= 0 && vs.balance.mean >= 0 &&
             vs.balance.mean <= 1 && vs.balance.median >= 0 && vs.balance.median <= 1;
        ctx.err << "sigma " << st.sigma << ' ' << to_string(v) << ": median log-range " << vs.log_range.median
                << ", median balance " << vs.balance.median << '\n';
      }
    return ok ? kExitOk : kExitVerificationFailed;
  };
}

struct TrainFlags {
  NetFlags net;
  TrainConfig cfg;
  std::string eval_bits = "16";
  std::string convention = "inclusive";
  std::string out_path, checkpoint, eval_out;
};

void add_train(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("train", "train a looped net on prefix sums with the progressive loss");
  auto s = std::make_shared<TrainFlags>();
  const NetConfig def = TrainConfig::default_net();
  s->net.d = def.d;
  s->net.mlp_hidden = def.mlp_hidden;
  s->net.mix_bandwidth = std::to_string(*def.mix_bandwidth);
  s->net.mix_heads = def.mix_heads;
  s->net.norm = std::string(to_string(def.norm));
  s->net.recall = std::string(to_string(def.recall));
  TrainConfig& t = s->cfg;
  s->net.add(c, false);
  c.flag("T", t.T_max, "loop budget; N ~ U[0, T-2], K ~ U[1, T-1-N]");
  c.flag("lr", t.schedule.base_lr, "base learning rate");
  c.flag("warmup-epochs", t.schedule.warmup_epochs, "warmup time constant in epochs");
  c.flag("constant-until", t.schedule.constant_until, "first epoch of the cooldown");
  c.flag("cooldown-factor", t.schedule.cooldown_factor, "learning-rate divisor after constant-until");
  c.flag("batch", t.batch_size, "batch size");
  c.flag("epochs", t.epochs, "epochs");
  c.flag("clip", t.clip_norm, "global gradient-norm clip");
  c.flag("weight-decay", t.optimizer.weight_decay, "decoupled weight decay");
  c.flag("beta1", t.optimizer.beta1, "first-moment decay");
  c.flag("beta2", t.optimizer.beta2, "second-moment decay");
  c.flag("adam-eps", t.optimizer.eps, "optimizer epsilon");
  c.flag("seed", t.seed, "random seed");
  c.flag("train-bits", t.train_bits, "training sequence length (also the net's L)");
  c.flag("train-examples", t.train_examples, "training set size");
  c.flag("eval-examples", t.eval_examples, "held-out set size per length");
  c.flag("eval-bits", s->eval_bits, "comma-separated lengths for the final eval curve");
  c.flag("convention", s->convention, "prefix parity: inclusive or exclusive");
  c.flag("out", s->out_path, "per-epoch log CSV (stdout when empty)");
  c.flag("checkpoint", s->checkpoint, "write the trained model here");
  c.flag("eval-out", s->eval_out, "write the final eval curve CSV here");
  c.run = [s, &ctx] {
    TrainConfig cfg = s->cfg;
    s->net.L = cfg.train_bits;
    cfg.net = s->net.config();
    cfg.eval_bits = parse_list<std::size_t>(s->eval_bits, "eval-bits");
    if (s->convention == "inclusive")
      cfg.convention = PrefixConvention::inclusive;
    else if (s->convention == "exclusive")
      cfg.convention = PrefixConvention::exclusive;
    else
      throw UsageError("bad value for convention: '" + s->convention + "'");
    cfg.validate();
    const TrainRun run = train(cfg, [&](const EpochRecord& r) {
      ctx.err << "epoch " << r.epoch << " loss " << r.loss << " bit_acc " << r.bit_acc << " seq_acc " << r.seq_acc
              << " rho_wx " << r.rho_wx << " lr " << r.lr << '\n';
    });
    ctx.emit(s->out_path, train_log_csv(run.records));
    if (!s->checkpoint.empty()) ctx.emit(s->checkpoint, encode_tensor_file(model_to_tensor_file(run.model)));
    if (!s->eval_out.empty()) ctx.emit(s->eval_out, eval_csv(run.eval_curve));
    if (run.aborted) {
      ctx.err << "training aborted: " << run.abort_reason << '\n';
      return kExitVerificationFailed;
    }
    return kExitOk;
  };
}

void add_eval(CLI::App& root, Command& c, Context& ctx) {
  c.app = root.add_subcommand("eval", "accuracy of a trained model against iteration count");
  auto o = std::make_shared<std::tuple<std::string, std::string, std::string, std::size_t, std::string,
                                       std::uint64_t, std::string, std::string>>("", "", "16", 1000, "8,16,32,64", 0,
                                                                                  "inclusive", "");
  auto& [checkpoint, data, bits, n, iters, seed, convention, out_path] = *o;
  c.flag("checkpoint", checkpoint, "model file written by train")->required();
  c.flag("data", data, "dataset file (input<TAB>target per line); overrides --bits and --n");
  c.flag("bits", bits, "comma-separated sequence lengths to generate");
  c.flag("n", n, "generated examples per length");
  c.flag("iters", iters, "comma-separated iteration counts");
  c.flag("seed", seed, "random seed for generated data");
  c.flag("convention", convention, "prefix parity: inclusive or exclusive");
  c.flag("out", out_path, "eval CSV (stdout when empty)");
  c.run = [o, &ctx] {
    auto& [checkpoint, data, bits, n, iters, seed, convention, out_path] = *o;
    const auto counts = parse_list<std::size_t>(iters, "iters");
    for (auto k : counts)
      if (k < 1) throw UsageError("iters must be >= 1");
    PrefixConvention conv;
    if (convention == "inclusive")
      conv = PrefixConvention::inclusive;
    else if (convention == "exclusive")
      conv = PrefixConvention::exclusive;
    else
      throw UsageError("bad value for convention: '" + convention + "'");
    if (data.empty() && n < 1) throw UsageError("n must be >= 1");
    const auto lengths = data.empty() ? parse_list<std::size_t>(bits, "bits") : std::vector<std::size_t>{};
    const Model model = load_model(checkpoint);
    std::vector<EvalPoint> points;
    if (!data.empty()) {
      const auto set = dataset_from_text(read_file(data));
      if (set.empty()) throw UsageError("dataset " + data + " is empty");
      points = evaluate(model, set, counts);
    } else {
      for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 1) throw UsageError("bits must be >= 1");
        const auto set = gen_prefix_sums(n, lengths[i], Rng::substream(seed, 5, lengths[i]).next_u64(), conv);
        for (const auto& p : evaluate(model, set, counts)) points.push_back(p);
      }
    }
    ctx.emit(out_path, eval_csv(points));
    for (const auto& p : points)
      ctx.err << "bits " << p.bits << " iterations " << p.iterations << " bit_acc " << p.bit_acc << " seq_acc "
              << p.seq_acc << '\n';
    return kExitOk;
  };
}

/// Flags from a key=value file, as --key=value tokens.
std::vector<std::string> config_tokens(const std::string& path) {
  std::vector<std::string> out;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.rfind("manifest.", 0) == 0) continue;
    if (key.empty() || key == "config" || key == "help")
      throw UsageError(path + ":" + std::to_string(lineno) + ": bad key '" + key + "'");
    out.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return out;
}

/// Pulls --config out of the argument list and splices the file's flags in
/// right after the subcommand name, so explicit flags (parsed later) win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::vector<std::string> file_tokens;
  for (std::size_t i = 1; i < args.size(); ++i) {
    std::string path;
    std::size_t erase = 0;
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      path = args[i + 1];
      erase = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      erase = 1;
    } else {
      continue;
    }
    const auto tokens = config_tokens(path);
    file_tokens.insert(file_tokens.end(), tokens.begin(), tokens.end());
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + erase));
    --i;
  }
  if (!args.empty()) args.insert(args.begin() + 1, file_tokens.begin(), file_tokens.end());
  return args;
}

void apply_threads(std::size_t flag) {
  std::size_t n = flag;
  if (n == 0) {
    if (const char* env = std::getenv("LOOPLAB_THREADS"); env && *env) {
      n = parse_number<std::size_t>(env, "LOOPLAB_THREADS");
      if (n == 0) throw UsageError("LOOPLAB_THREADS must be >= 1");
    }
  }
  if (n > 0) omp_set_num_threads(static_cast<int>(n));
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Looped-network fixed-point stability laboratory.", "looplab"};
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Context ctx{out, err, "", nullptr, {}};
  std::vector<std::unique_ptr<Command>> commands;
  for (auto add : {add_fixed_point, add_jacobian_check, add_grad_limit, add_autonomous_regimes, add_stability_map,
                   add_anisotropy, add_train, add_eval}) {
    commands.push_back(std::make_unique<Command>());
    Command& c = *commands.back();
    add(app, c, ctx);
    c.app->add_option("--config", "key=value file with flag defaults (explicit flags win)");
    c.flag("threads", c.threads, "worker threads; 0 uses LOOPLAB_THREADS, then the OpenMP default");
  }

  auto usage = [&](const std::string& message) {
    err << "error: " << message << "\n\n" << app.help();
    return kExitUsage;
  };

  std::vector<std::string> expanded;
  try {
    expanded = expand_config(args);
  } catch (const UsageError& e) {
    return usage(e.what());
  } catch (const Error& e) {
    return usage(e.what());
  }
  std::reverse(expanded.begin(), expanded.end());
  try {
    app.parse(expanded);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return usage(e.what());
  }

  Command* chosen = nullptr;
  for (auto& c : commands)
    if (c->app->parsed()) chosen = c.get();
  ctx.subcommand = chosen->app->get_name();
  ctx.command = chosen;

  try {
    apply_threads(chosen->threads);
    const int code = chosen->run();
    ctx.finish(code == kExitOk ? "ok" : "verification-failed");
    return code;
  } catch (const UsageError& e) {
    return usage(e.what());
  } catch (const PreconditionError& e) {
    return usage(e.what());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitVerificationFailed;
  }
}

}  // namespace looplab

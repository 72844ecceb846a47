// softsort: command-line front end for the Sinkhorn rank/sort operators.
//
// Every data file gets a `<file>.manifest` sidecar (key=value) holding the
// resolved parameters, so a rerun with the same manifest reproduces the bytes.
// Exit codes: 0 ok, 1 usage/parse error, 2 numerical failure or
// non-convergence.

#include <softsort/softsort.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace softsort;

constexpr int kUsage = 1;
constexpr int kNumerical = 2;

struct NotConverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class Manifest {
 public:
  explicit Manifest(std::string command) { set("command", std::move(command)); }
  void set(const std::string& k, const std::string& v) {
    for (auto& kv : entries_) {
      if (kv.first == k) {
        kv.second = v;
        return;
      }
    }
    entries_.emplace_back(k, v);
  }
  void set(const std::string& k, double v) { set(k, fmt(v)); }
  void set(const std::string& k, int v) { set(k, std::to_string(v)); }
  void set(const std::string& k, bool v) { set(k, std::string(v ? "true" : "false")); }

  void write(const std::string& data_path) const {
    std::ofstream out(data_path + ".manifest");
    out << "version=" << kVersion << '\n';
    for (const auto& [k, v] : entries_) out << k << '=' << v << '\n';
    out << "output=" << data_path << '\n';
    if (!out) throw std::runtime_error("cannot write " + data_path + ".manifest");
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  out << body;
  if (!out) throw std::runtime_error("cannot write " + path);
}

Vector load_vector(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  Vector v = read_vector(in, path);
  if (v.size() == 0) throw ParseError(path, 0, "no values");
  return v;
}

std::vector<double> parse_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    double v = 0.0;
    if (!detail::parse_real(detail::strip_comment(tok), v)) throw std::invalid_argument(what + ": bad number '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument(what + ": empty list");
  return out;
}

std::string squash_name(Squash g) {
  switch (g) {
    case Squash::logistic: return "logistic";
    case Squash::arctan: return "arctan";
    case Squash::none: return "none";
  }
  return "?";
}

// Shared operator flags.
struct OperatorArgs {
  std::string input;
  std::string output;
  double epsilon = 1e-2;
  double eta = 1e-3;
  int max_iters = 5000;
  int m = 0;
  double cost_p = 2.0;
  Squash squash = Squash::logistic;
  SinkhornMode mode = SinkhornMode::log_domain;
  std::string quantile_weights;

  void attach(CLI::App* cmd) {
    cmd->add_option("input", input, "Input vector: one real per line, '#' comments")->required()->check(CLI::ExistingFile);
    cmd->add_option("--output", output, "Output file")->required();
    cmd->add_option("--epsilon", epsilon, "Entropic regularization")->capture_default_str();
    cmd->add_option("--eta", eta, "Stopping tolerance on the L1 column residual")->capture_default_str();
    cmd->add_option("--max-iters", max_iters, "Iteration cap")->capture_default_str();
    cmd->add_option("--m", m, "Number of regular-grid targets (0: same as input length)")->capture_default_str();
    cmd->add_option("--cost-p", cost_p, "Cost exponent p in |u|^p (p >= 1)")->capture_default_str();
    cmd->add_option("--squash", squash, "Input squashing map")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, Squash>{{"logistic", Squash::logistic}, {"arctan", Squash::arctan}, {"none", Squash::none}}))
        ->capture_default_str();
    cmd->add_option("--mode", mode, "Sinkhorn iteration form")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, SinkhornMode>{{"log", SinkhornMode::log_domain}, {"multiplicative", SinkhornMode::multiplicative}}))
        ->capture_default_str();
    cmd->add_option("--quantile-weights", quantile_weights, "Comma-separated target weights b (sets m)");
  }

  SoftOptions options() const {
    SoftOptions o;
    o.cost = CostSpec::absolute_power(cost_p);
    o.sinkhorn = {epsilon, eta, max_iters, mode};
    o.squash = squash;
    o.sinkhorn.validate();
    return o;
  }

  TargetDescriptor target(Eigen::Index n) const {
    if (!quantile_weights.empty()) {
      const auto w = parse_list(quantile_weights, "--quantile-weights");
      if (m != 0 && m != static_cast<int>(w.size())) throw std::invalid_argument("--m disagrees with --quantile-weights");
      return TargetDescriptor::on_grid(Eigen::Map<const Vector>(w.data(), static_cast<Eigen::Index>(w.size())));
    }
    if (m < 0) throw std::invalid_argument("--m must be >= 0");
    return TargetDescriptor::uniform_grid(m == 0 ? n : m);
  }

  void record(Manifest& mf, Eigen::Index m_used) const {
    mf.set("input", input);
    mf.set("epsilon", epsilon);
    mf.set("eta", eta);
    mf.set("max_iters", max_iters);
    mf.set("m", static_cast<int>(m_used));
    mf.set("cost_p", cost_p);
    mf.set("squash", squash_name(squash));
    mf.set("mode", std::string(mode == SinkhornMode::log_domain ? "log" : "multiplicative"));
    if (!quantile_weights.empty()) mf.set("quantile_weights", quantile_weights);
  }
};

void check_operator_outputs(const SoftResult& r, const Vector& x, const TargetDescriptor& t) {
  const double n = static_cast<double>(x.size());
  if (!r.s_ranks.allFinite() || !r.s_sorts.allFinite()) throw NumericalError("non-finite operator output");
  if (r.s_ranks.minCoeff() < 0.0 || r.s_ranks.maxCoeff() > n * (1.0 + 1e-12)) {
    throw NumericalError("ranks left [0, n]");
  }
  const double slack = 1e-12 + x.cwiseAbs().maxCoeff() * r.residual / t.weights().minCoeff();
  if (r.s_sorts.minCoeff() < x.minCoeff() - slack || r.s_sorts.maxCoeff() > x.maxCoeff() + slack) {
    throw NumericalError("sorts left [min x, max x]");
  }
}

int run_operator(const OperatorArgs& args, bool ranks) {
  const Vector x = load_vector(args.input);
  const TargetDescriptor t = args.target(x.size());
  const SoftResult r = sinkhorn_rank_sort(DiscreteMeasure::uniform(x), t, args.options());
  check_operator_outputs(r, x, t);

  const Vector& values = ranks ? r.s_ranks : r.s_sorts;
  std::string body = ranks ? "# s_rank\n" : "# s_sort\n";
  for (Eigen::Index k = 0; k < values.size(); ++k) body += fmt(values[k]) + '\n';
  write_file(args.output, body);

  Manifest mf(ranks ? "rank" : "sort");
  args.record(mf, t.size());
  mf.set("iterations_used", r.iterations_used);
  mf.set("converged", r.converged);
  mf.set("residual", r.residual);
  mf.write(args.output);
  if (!r.converged) {
    throw NotConverged("Sinkhorn did not reach eta=" + fmt(args.eta) + " in " + std::to_string(r.iterations_used) +
                       " iterations (residual " + fmt(r.residual) + "); output written anyway");
  }
  return 0;
}

int run_sweep(const OperatorArgs& args, const std::string& grid) {
  const Vector x = load_vector(args.input);
  const TargetDescriptor t = args.target(x.size());
  const auto eps_grid = parse_list(grid, "--grid");
  SoftOptions opt = args.options();

  std::string body = "kind,epsilon,converged,iterations";
  for (Eigen::Index k = 0; k < std::max(x.size(), t.size()); ++k) body += ',' + std::to_string(k);
  body += '\n';
  int failures = 0;
  for (double eps : eps_grid) {
    opt.sinkhorn.epsilon = eps;
    opt.sinkhorn.validate();
    const SoftResult r = sinkhorn_rank_sort(DiscreteMeasure::uniform(x), t, opt);
    check_operator_outputs(r, x, t);
    failures += !r.converged;
    const std::string tail = fmt(eps) + ',' + (r.converged ? "1" : "0") + ',' + std::to_string(r.iterations_used);
    body += "rank," + tail;
    for (Eigen::Index k = 0; k < r.s_ranks.size(); ++k) body += ',' + fmt(r.s_ranks[k]);
    body += "\nsort," + tail;
    for (Eigen::Index k = 0; k < r.s_sorts.size(); ++k) body += ',' + fmt(r.s_sorts[k]);
    body += '\n';
  }
  write_file(args.output, body);
  Manifest mf("sweep-epsilon");
  args.record(mf, t.size());
  mf.set("grid", grid);
  mf.set("nonconverged", failures);
  mf.write(args.output);
  if (failures) throw NotConverged(std::to_string(failures) + " grid point(s) did not converge; table written anyway");
  return 0;
}

struct QuantileArgs {
  std::string input, output;
  double tau = 0.5, t = 0.1, epsilon = 1e-2, eta = 1e-3;
  int max_iters = 5000;
};

int run_quantile(const QuantileArgs& args) {
  const Vector x = load_vector(args.input);
  if (x.size() < 2) throw std::invalid_argument("quantile: need at least two values");
  QuantileSpec spec;
  spec.tau = args.tau;
  spec.t = args.t;
  spec.epsilon = args.epsilon;
  spec.eta = args.eta;
  spec.max_iters = args.max_iters;
  const TargetDescriptor target = spec.target();
  const SoftOptions opt = spec.options();
  const Matrix c = build_cost(squash(x, opt.squash), target.support(), opt.cost).entries;
  const SinkhornState st = sinkhorn(uniform_weights(x.size()), target.weights(), c, opt.sinkhorn);
  const Matrix plan = st.plan();
  const double q = plan.col(1).dot(x) / target.weights()[1];

  // Revalidate: marginals and range.
  const double row_err = (plan.rowwise().sum() - uniform_weights(x.size())).lpNorm<1>();
  const double col_err = (plan.colwise().sum().transpose() - target.weights()).lpNorm<1>();
  if (!plan.allFinite() || !std::isfinite(q)) throw NumericalError("quantile: non-finite plan");
  if (st.converged && (row_err > 1e-12 || col_err >= args.eta)) throw NumericalError("quantile: plan marginals off");

  std::string body = "x,to_left,to_filler,to_right\n";
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    body += fmt(x[i]) + ',' + fmt(plan(i, 0)) + ',' + fmt(plan(i, 1)) + ',' + fmt(plan(i, 2)) + '\n';
  }
  write_file(args.output, body);
  Manifest mf("quantile");
  mf.set("input", args.input);
  mf.set("tau", args.tau);
  mf.set("t", args.t);
  mf.set("epsilon", args.epsilon);
  mf.set("eta", args.eta);
  mf.set("max_iters", args.max_iters);
  mf.set("quantile", q);
  mf.set("iterations_used", st.iterations_used);
  mf.set("converged", st.converged);
  mf.write(args.output);
  std::cout << fmt(q) << '\n';
  if (!st.converged) throw NotConverged("Sinkhorn did not converge in " + std::to_string(st.iterations_used) + " iterations");
  return 0;
}

struct RegressionArgs {
  std::string dataset, output, hidden;
  Eigen::Index synthetic = 0;
  double outlier_fraction = 0.1;
  double tau = 0.5, epsilon = 1e-2, lr = 1e-4, test_fraction = 0.2;
  int epochs = 10;
  Eigen::Index batch_size = 512;
  std::uint64_t seed = 0;
  std::string optimizer = "adam";
};

int run_regression(const RegressionArgs& args) {
  Dataset all;
  if (!args.dataset.empty()) {
    std::ifstream in(args.dataset);
    if (!in) throw ParseError(args.dataset, 0, "cannot open file");
    all = read_dataset(in, args.dataset);
  } else if (args.synthetic > 0) {
    all = make_linear_dataset(args.synthetic, args.outlier_fraction, args.seed);
  } else {
    throw std::invalid_argument("quantile-regression: give --dataset or --synthetic");
  }
  if (!(args.test_fraction > 0.0 && args.test_fraction < 1.0)) throw std::invalid_argument("--test-fraction must lie in (0,1)");
  if (!(args.epsilon > 0.0)) throw std::invalid_argument("--epsilon must be > 0 (the baseline runs alongside)");

  // Seeded shuffle, then the tail is held out.
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(all.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::mt19937_64 rng(args.seed ^ 0x5eedULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_test = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(args.test_fraction * all.size()));
  const Eigen::Index n_train = all.size() - n_test;
  if (n_train < 2) throw std::invalid_argument("quantile-regression: not enough rows for a train split");
  Dataset train{Matrix(n_train, all.dim()), Vector(n_train)}, test{Matrix(n_test, all.dim()), Vector(n_test)};
  for (Eigen::Index r = 0; r < all.size(); ++r) {
    Dataset& d = r < n_train ? train : test;
    const Eigen::Index k = r < n_train ? r : r - n_train;
    d.features.row(k) = all.features.row(idx[r]);
    d.response[k] = all.response[idx[r]];
  }

  TrainConfig cfg;
  cfg.tau = args.tau;
  cfg.epochs = args.epochs;
  cfg.batch_size = args.batch_size;
  cfg.seed = args.seed;
  cfg.optimizer.step_size = args.lr;
  cfg.optimizer.kind = args.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
  if (!args.hidden.empty()) {
    for (double h : parse_list(args.hidden, "--hidden")) cfg.hidden.push_back(static_cast<Eigen::Index>(h));
  }

  std::string body = "mode,epoch,train_quantile,test_quantile,mse\n";
  std::string diagnostics;
  for (const double eps : {0.0, args.epsilon}) {
    cfg.epsilon = eps;
    const TrainTrace tr = train_least_quantile(train, test, cfg);
    const std::string mode = eps > 0.0 ? "soft" : "baseline";
    for (const auto& row : tr.rows) {
      body += mode + ',' + std::to_string(row.epoch) + ',' + fmt(row.train_quantile) + ',' + fmt(row.test_quantile) + ',' +
              fmt(row.mse) + '\n';
    }
    if (tr.aborted) diagnostics += mode + ": " + tr.diagnostics + "; ";
  }
  write_file(args.output, body);
  Manifest mf("quantile-regression");
  mf.set("dataset", args.dataset.empty() ? "synthetic:" + std::to_string(args.synthetic) : args.dataset);
  if (args.dataset.empty()) mf.set("outlier_fraction", args.outlier_fraction);
  mf.set("tau", args.tau);
  mf.set("epsilon", args.epsilon);
  mf.set("t", 1.0 / static_cast<double>(std::min(args.batch_size, n_train)));
  mf.set("lr", args.lr);
  mf.set("optimizer", args.optimizer);
  mf.set("epochs", args.epochs);
  mf.set("batch_size", static_cast<int>(args.batch_size));
  mf.set("hidden", args.hidden.empty() ? std::string("linear") : args.hidden);
  mf.set("test_fraction", args.test_fraction);
  mf.set("seed", std::to_string(args.seed));
  mf.set("aborted", !diagnostics.empty());
  mf.write(args.output);
  if (!diagnostics.empty()) throw NumericalError("training diverged: " + diagnostics);
  return 0;
}

int run_synth(Eigen::Index n, double outliers, std::uint64_t seed, const std::string& output) {
  const Dataset ds = make_linear_dataset(n, outliers, seed);
  std::string body = "# w,z\n";
  for (Eigen::Index r = 0; r < ds.size(); ++r) body += fmt(ds.features(r, 0)) + ',' + fmt(ds.response[r]) + '\n';
  write_file(output, body);
  Manifest mf("synth-linear");
  mf.set("n", static_cast<int>(n));
  mf.set("outlier_fraction", outliers);
  mf.set("seed", std::to_string(seed));
  mf.write(output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sinkhorn ranks, sorts and soft quantiles"};
  app.set_version_flag("--version", std::string(softsort::kVersion));
  app.require_subcommand(1);

  OperatorArgs rank_args, sort_args, sweep_args;
  rank_args.attach(app.add_subcommand("rank", "Sinkhorn ranks of a vector"));
  sort_args.attach(app.add_subcommand("sort", "Sinkhorn sorted values of a vector"));

  auto* sweep = app.add_subcommand("sweep-epsilon", "Ranks and sorts over a grid of epsilon values");
  sweep_args.attach(sweep);
  std::string grid = "1e-4,1e-3,1e-2,1e-1,1,10,100,1000";
  sweep->add_option("--grid", grid, "Comma-separated epsilon values")->capture_default_str();

  QuantileArgs qa;
  auto* quant = app.add_subcommand("quantile", "Soft tau-quantile and its three-column transport plan");
  quant->add_option("input", qa.input, "Input vector")->required()->check(CLI::ExistingFile);
  quant->add_option("--output", qa.output, "Plan output file")->required();
  quant->add_option("--tau", qa.tau, "Quantile level")->capture_default_str();
  quant->add_option("--t", qa.t, "Filler weight")->capture_default_str();
  quant->add_option("--epsilon", qa.epsilon, "Entropic regularization")->capture_default_str();
  quant->add_option("--eta", qa.eta, "Stopping tolerance")->capture_default_str();
  quant->add_option("--max-iters", qa.max_iters, "Iteration cap")->capture_default_str();

  RegressionArgs ra;
  auto* reg = app.add_subcommand("quantile-regression", "Least-quantile regression: soft quantile vs. baseline");
  auto* ds_opt = reg->add_option("--dataset", ra.dataset, "Rows of features then response")->check(CLI::ExistingFile);
  reg->add_option("--synthetic", ra.synthetic, "Generate this many linear samples instead")->excludes(ds_opt);
  reg->add_option("--outlier-fraction", ra.outlier_fraction, "Outlier share for --synthetic")->capture_default_str();
  reg->add_option("--output", ra.output, "Trace output file")->required();
  reg->add_option("--tau", ra.tau, "Quantile level")->capture_default_str();
  reg->add_option("--epsilon", ra.epsilon, "Soft-mode epsilon")->capture_default_str();
  reg->add_option("--epochs", ra.epochs, "Epochs")->capture_default_str();
  reg->add_option("--seed", ra.seed, "Seed for init, shuffling and split")->capture_default_str();
  reg->add_option("--lr", ra.lr, "Step size")->capture_default_str();
  reg->add_option("--optimizer", ra.optimizer, "adam or sgd")
      ->check(CLI::IsMember({"adam", "sgd"}))
      ->capture_default_str();
  reg->add_option("--batch-size", ra.batch_size, "Minibatch size (filler t = 1 / batch size)")->capture_default_str();
  reg->add_option("--hidden", ra.hidden, "Comma-separated hidden layer sizes (empty: linear)");
  reg->add_option("--test-fraction", ra.test_fraction, "Held-out share")->capture_default_str();

  Eigen::Index synth_n = 2048;
  double synth_out = 0.1;
  std::uint64_t synth_seed = 0;
  std::string synth_output;
  auto* synth = app.add_subcommand("synth-linear", "Write a synthetic 1-d linear dataset with outliers");
  synth->add_option("--n", synth_n, "Rows")->capture_default_str();
  synth->add_option("--outlier-fraction", synth_out, "Outlier share")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Seed")->capture_default_str();
  synth->add_option("--output", synth_output, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (app.got_subcommand("rank")) return run_operator(rank_args, true);
    if (app.got_subcommand("sort")) return run_operator(sort_args, false);
    if (app.got_subcommand(sweep)) return run_sweep(sweep_args, grid);
    if (app.got_subcommand(quant)) return run_quantile(qa);
    if (app.got_subcommand(reg)) return run_regression(ra);
    if (app.got_subcommand(synth)) return run_synth(synth_n, synth_out, synth_seed, synth_output);
  } catch (const NotConverged& e) {
    std::cerr << "softsort: " << e.what() << '\n';
    return kNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "softsort: numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "softsort: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "softsort: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

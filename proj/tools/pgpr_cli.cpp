// pgpr command-line driver: generate, select-support, run, sweep, report.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pgpr/pgpr.hpp"

namespace {

constexpr int kExitConditioning = 3;

struct HyperFlags {
  std::string file;
  std::optional<double> signal_variance;
  std::optional<double> noise_variance;
  std::string length_scales;

  void attach(CLI::App *app) {
    app->add_option("--hyper", file, "hyperparameter file (key = value)");
    app->add_option("--signal-variance", signal_variance);
    app->add_option("--noise-variance", noise_variance);
    app->add_option("--length-scales", length_scales, "comma-separated list");
  }

  pgpr::Hyperparameters resolve(std::size_t dim) const {
    pgpr::Hyperparameters h{1.0, 0.1, {0.25}};
    if (!file.empty()) h = pgpr::load_hyperparameters(file);
    if (signal_variance) h.signal_variance = *signal_variance;
    if (noise_variance) h.noise_variance = *noise_variance;
    if (!length_scales.empty()) h.length_scales = pgpr::parse_double_list(length_scales);
    if (h.length_scales.size() == 1 && dim > 1) h.length_scales.assign(dim, h.length_scales[0]);
    h.validate();
    return h;
  }
};

void apply_settings(pgpr::ExperimentConfig &c, const std::vector<std::string> &sets) {
  for (const auto &s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw pgpr::InvalidArgument("--set expects key=value, got '" + s + "'");
    pgpr::set_config_value(c, pgpr::trim(s.substr(0, eq)), pgpr::trim(s.substr(eq + 1)));
  }
}

void print_summary(const pgpr::ExperimentResult &r) {
  const auto &m = r.mean;
  auto show = [](std::optional<double> v) { return v ? pgpr::detail::num(v) : std::string("NA"); };
  std::cout << r.config.name << " (" << pgpr::to_string(r.config.algorithm) << ", "
            << r.instances.size() << " instance(s))\n"
            << "  rmse          " << show(m.rmse) << "\n"
            << "  mnlp          " << show(m.mnlp) << "\n"
            << "  rmse_vs_fgp   " << show(m.rmse_vs_fgp) << "\n"
            << "  negative vars " << m.negative_variance_count << "\n"
            << "  scalars sent  " << m.messages.scalars << "\n"
            << "  speedup       " << show(m.speedup) << "\n";
  if (m.negative_variance_count > 0) {
    std::cout << "  mnlp skipped on instances with nonpositive variances\n";
  }
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Parallel Gaussian process regression toolkit"};
  app.require_subcommand(1);

  // generate
  auto *gen = app.add_subcommand("generate", "synthetic train/test CSVs drawn from the GP prior");
  std::size_t g_train = 512, g_test = 128, g_dim = 2;
  std::uint64_t g_seed = 1;
  std::string g_train_out = "train.csv", g_test_out = "test.csv";
  HyperFlags g_hyper;
  gen->add_option("--n-train", g_train);
  gen->add_option("--n-test", g_test);
  gen->add_option("--dim", g_dim);
  gen->add_option("--seed", g_seed);
  gen->add_option("--train-out", g_train_out);
  gen->add_option("--test-out", g_test_out);
  g_hyper.attach(gen);

  // select-support
  auto *sel = app.add_subcommand("select-support", "greedy entropy support set from a training CSV");
  std::string s_train, s_out = "support.csv";
  std::size_t s_size = 16;
  HyperFlags s_hyper;
  sel->add_option("--train", s_train)->required();
  sel->add_option("--size", s_size);
  sel->add_option("--out", s_out);
  s_hyper.attach(sel);

  // run / sweep share config handling
  std::string cfg_path;
  std::vector<std::string> sets;
  std::vector<std::string> grid_specs;
  auto *run = app.add_subcommand("run", "run one experiment configuration");
  auto *sweep = app.add_subcommand("sweep", "run a grid of configurations");
  for (auto *sub : {run, sweep}) {
    sub->add_option("--config", cfg_path, "experiment config file");
    sub->add_option("--set", sets, "override a config key: key=value");
  }
  std::string r_alg, r_partition, r_out;
  std::optional<std::size_t> r_workers, r_support, r_rank, r_instances;
  std::optional<std::uint64_t> r_seed;
  run->add_option("--algorithm", r_alg, "fgp|pitc|pic|icf|ppitc|ppic|picf");
  run->add_option("--workers", r_workers);
  run->add_option("--support-size", r_support);
  run->add_option("--rank", r_rank);
  run->add_option("--partition", r_partition, "random|clustered");
  run->add_option("--seed", r_seed);
  run->add_option("--instances", r_instances);
  run->add_option("--output-dir", r_out);
  sweep->add_option("--grid", grid_specs, "key=v1,v2,...")->required();

  // report
  auto *rep = app.add_subcommand("report", "aggregate metrics CSVs per configuration");
  std::vector<std::string> rep_files;
  std::string rep_out;
  rep->add_option("files", rep_files)->required();
  rep->add_option("--out", rep_out, "write here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto h = g_hyper.resolve(g_dim);
      auto [train, test] = pgpr::generate_synthetic(g_train, g_test, g_dim, h, g_seed);
      pgpr::save_dataset_csv(g_train_out, train);
      pgpr::save_dataset_csv(g_test_out, test);
      std::cout << "wrote " << g_train_out << " and " << g_test_out << "\n";
    } else if (*sel) {
      const auto train = pgpr::load_dataset_csv(s_train, pgpr::kTrainDomain);
      const auto h = s_hyper.resolve(train.inputs.dim());
      const auto s = pgpr::select_support(train.inputs, s_size, h);
      if (s.oversized_for(train.size())) {
        std::cerr << "warning: support set is more than half the training set\n";
      }
      std::ofstream out(s_out);
      pgpr::write_support_csv(out, s);
      std::cout << "wrote " << s.size() << " support points to " << s_out << "\n";
    } else if (*run || *sweep) {
      pgpr::ExperimentConfig c;
      if (!cfg_path.empty()) c = pgpr::load_experiment_config(cfg_path);
      if (*run) {
        if (!r_alg.empty()) c.algorithm = pgpr::parse_algorithm(r_alg);
        if (r_workers) c.workers = *r_workers;
        if (r_support) c.support_size = *r_support;
        if (r_rank) c.rank = *r_rank;
        if (!r_partition.empty()) c.partition = r_partition;
        if (r_seed) c.seed = *r_seed;
        if (r_instances) c.instances = *r_instances;
        if (!r_out.empty()) c.output_dir = r_out;
      }
      apply_settings(c, sets);
      if (*run) {
        const auto result = pgpr::run_experiment(c);
        pgpr::write_experiment_outputs(result);
        print_summary(result);
      } else {
        pgpr::SweepGrid grid;
        for (const auto &g : grid_specs) {
          const auto eq = g.find('=');
          if (eq == std::string::npos) throw pgpr::InvalidArgument("--grid expects key=v1,v2");
          std::vector<std::string> values;
          std::stringstream ss(g.substr(eq + 1));
          std::string v;
          while (std::getline(ss, v, ',')) values.push_back(pgpr::trim(v));
          grid.emplace_back(pgpr::trim(g.substr(0, eq)), std::move(values));
        }
        for (const auto &r : pgpr::run_sweep(c, grid)) print_summary(r);
      }
    } else if (*rep) {
      if (rep_out.empty()) {
        pgpr::write_report(std::cout, rep_files);
      } else {
        std::ofstream out(rep_out);
        pgpr::write_report(out, rep_files);
      }
    }
  } catch (const pgpr::ConditioningError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConditioning;
  } catch (const pgpr::NonPositiveVarianceError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

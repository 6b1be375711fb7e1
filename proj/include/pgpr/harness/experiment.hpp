#ifndef PGPR_HARNESS_EXPERIMENT_HPP_
#define PGPR_HARNESS_EXPERIMENT_HPP_

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pgpr/centralized.hpp"
#include "pgpr/harness/dataset_io.hpp"
#include "pgpr/harness/metrics.hpp"
#include "pgpr/harness/synthetic.hpp"
#include "pgpr/parallel/engine.hpp"

namespace pgpr {

enum class Algorithm { fgp, pitc, pic, icf, ppitc, ppic, picf };

inline std::string to_string(Algorithm a) {
  switch (a) {
  case Algorithm::fgp: return "fgp";
  case Algorithm::pitc: return "pitc";
  case Algorithm::pic: return "pic";
  case Algorithm::icf: return "icf";
  case Algorithm::ppitc: return "ppitc";
  case Algorithm::ppic: return "ppic";
  case Algorithm::picf: return "picf";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string &s) {
  for (Algorithm a : {Algorithm::fgp, Algorithm::pitc, Algorithm::pic, Algorithm::icf,
                      Algorithm::ppitc, Algorithm::ppic, Algorithm::picf}) {
    if (to_string(a) == s) return a;
  }
  throw InvalidArgument("unknown algorithm '" + s + "'");
}

inline bool is_parallel(Algorithm a) {
  return a == Algorithm::ppitc || a == Algorithm::ppic || a == Algorithm::picf;
}
inline bool uses_support(Algorithm a) {
  return a == Algorithm::pitc || a == Algorithm::pic || a == Algorithm::ppitc ||
         a == Algorithm::ppic;
}
inline bool uses_rank(Algorithm a) { return a == Algorithm::icf || a == Algorithm::picf; }
inline bool uses_blocks(Algorithm a) { return a != Algorithm::fgp && a != Algorithm::icf; }

inline Algorithm centralized_counterpart(Algorithm a) {
  switch (a) {
  case Algorithm::ppitc: return Algorithm::pitc;
  case Algorithm::ppic: return Algorithm::pic;
  case Algorithm::picf: return Algorithm::icf;
  default: return a;
  }
}

struct ExperimentConfig {
  std::string name = "experiment";
  Algorithm algorithm = Algorithm::ppitc;
  std::size_t workers = 4;
  std::size_t support_size = 16;
  std::size_t rank = 32;
  std::string partition = "random"; // or "clustered"
  bool partition_u = false;
  std::uint64_t seed = 1;
  std::size_t instances = 5;

  // Synthetic data, used unless train_csv is set.
  std::size_t n_train = 512;
  std::size_t n_test = 128;
  std::size_t dim = 2;
  std::string train_csv;
  std::string test_csv;
  std::string support_csv;

  Hyperparameters hyper{1.0, 0.1, {0.25}};
  bool concurrent = true;
  bool compute_fgp = true;
  std::size_t fgp_limit = 4096;
  std::string output_dir;

  /// Length scales given as one value are repeated over every dimension.
  void finalize() {
    if (hyper.length_scales.size() == 1 && dim > 1) {
      hyper.length_scales.assign(dim, hyper.length_scales.front());
    }
  }

  void validate() const {
    hyper.validate();
    if (instances == 0) throw InvalidArgument("instances must be at least 1");
    if (partition != "random" && partition != "clustered") {
      throw InvalidArgument("partition must be 'random' or 'clustered'");
    }
    if (uses_blocks(algorithm) && workers == 0) {
      throw InvalidArgument("workers must be at least 1");
    }
    if (uses_support(algorithm) && support_size == 0) {
      throw InvalidArgument("support_size must be at least 1");
    }
    if (uses_rank(algorithm) && rank == 0) {
      throw InvalidArgument("rank must be at least 1");
    }
    if (train_csv.empty()) {
      if (n_train == 0 || n_test == 0) {
        throw InvalidArgument("synthetic data needs n_train and n_test > 0");
      }
      if (hyper.dim() != dim) {
        throw DimensionError("dim does not match the number of length scales");
      }
    } else if (test_csv.empty()) {
      throw InvalidArgument("train_csv given without test_csv");
    }
  }
};

inline bool parse_bool(const std::string &v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw InvalidArgument("not a boolean: '" + v + "'");
}

/// Applies one `key = value` setting. Used for config files and for
/// command-line overrides.
inline void set_config_value(ExperimentConfig &c, const std::string &key,
                             const std::string &value) {
  auto to_size = [&](const std::string &v) {
    try {
      std::size_t pos = 0;
      const long long n = std::stoll(v, &pos);
      if (pos != v.size() || n < 0) throw std::invalid_argument(v);
      return static_cast<std::size_t>(n);
    } catch (const std::exception &) {
      throw InvalidArgument("bad count for " + key + ": '" + v + "'");
    }
  };
  if (key == "name") c.name = value;
  else if (key == "algorithm") c.algorithm = parse_algorithm(value);
  else if (key == "workers") c.workers = to_size(value);
  else if (key == "support_size") c.support_size = to_size(value);
  else if (key == "rank") c.rank = to_size(value);
  else if (key == "partition") c.partition = value;
  else if (key == "partition_u") c.partition_u = parse_bool(value);
  else if (key == "seed") c.seed = to_size(value);
  else if (key == "instances") c.instances = to_size(value);
  else if (key == "n_train") c.n_train = to_size(value);
  else if (key == "n_test") c.n_test = to_size(value);
  else if (key == "dim") c.dim = to_size(value);
  else if (key == "train_csv") c.train_csv = value;
  else if (key == "test_csv") c.test_csv = value;
  else if (key == "support_csv") c.support_csv = value;
  else if (key == "concurrent") c.concurrent = parse_bool(value);
  else if (key == "compute_fgp") c.compute_fgp = parse_bool(value);
  else if (key == "fgp_limit") c.fgp_limit = to_size(value);
  else if (key == "output_dir") c.output_dir = value;
  else if (key == "signal_variance") c.hyper.signal_variance = std::stod(value);
  else if (key == "noise_variance") c.hyper.noise_variance = std::stod(value);
  else if (key == "length_scales") c.hyper.length_scales = parse_double_list(value);
  else throw InvalidArgument("unknown config key '" + key + "'");
}

inline ExperimentConfig read_experiment_config(std::istream &in,
                                               ExperimentConfig c = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("config line " + std::to_string(lineno) +
                            ": expected key = value");
    }
    set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path);
  return read_experiment_config(in);
}

struct MetricsReport {
  std::size_t instance = 0;
  std::uint64_t seed = 0;
  std::optional<double> rmse;
  std::optional<double> mnlp;
  std::optional<double> rmse_vs_fgp;
  std::size_t negative_variance_count = 0;
  bool psd_valid = true;
  MessageTotals messages;
  // Wall-clock seconds.
  double partition_seconds = 0.0;
  double summary_seconds = 0.0;
  double prediction_seconds = 0.0;
  std::optional<double> parallel_seconds;
  double centralized_seconds = 0.0;
  std::optional<double> fgp_seconds;
  std::optional<double> speedup;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<MetricsReport> instances;
  MetricsReport mean;
  std::vector<MessageLog> logs;
  std::vector<PredictiveDistribution> predictions;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::optional<double> mean_of(const std::vector<MetricsReport> &rs,
                                     std::optional<double> MetricsReport::*f) {
  double s = 0.0;
  for (const auto &r : rs) {
    if (!(r.*f)) return std::nullopt;
    s += *(r.*f);
  }
  return s / static_cast<double>(rs.size());
}

inline MetricsReport average(const std::vector<MetricsReport> &rs) {
  MetricsReport m;
  const double n = static_cast<double>(rs.size());
  m.rmse = mean_of(rs, &MetricsReport::rmse);
  m.mnlp = mean_of(rs, &MetricsReport::mnlp);
  m.rmse_vs_fgp = mean_of(rs, &MetricsReport::rmse_vs_fgp);
  m.parallel_seconds = mean_of(rs, &MetricsReport::parallel_seconds);
  m.fgp_seconds = mean_of(rs, &MetricsReport::fgp_seconds);
  m.speedup = mean_of(rs, &MetricsReport::speedup);
  for (const auto &r : rs) {
    m.negative_variance_count += r.negative_variance_count;
    m.psd_valid = m.psd_valid && r.psd_valid;
    m.messages.messages += r.messages.messages;
    m.messages.scalars += r.messages.scalars;
    m.messages.bytes += r.messages.bytes;
    m.partition_seconds += r.partition_seconds / n;
    m.summary_seconds += r.summary_seconds / n;
    m.prediction_seconds += r.prediction_seconds / n;
    m.centralized_seconds += r.centralized_seconds / n;
  }
  m.messages.messages /= rs.size();
  m.messages.scalars /= rs.size();
  m.messages.bytes /= rs.size();
  return m;
}

inline std::pair<Dataset, Dataset> instance_data(const ExperimentConfig &c,
                                                 std::uint64_t seed) {
  if (!c.train_csv.empty()) {
    return {load_dataset_csv(c.train_csv, kTrainDomain),
            load_dataset_csv(c.test_csv, kTestDomain)};
  }
  return generate_synthetic(c.n_train, c.n_test, c.dim, c.hyper, seed);
}

inline SupportSet instance_support(const ExperimentConfig &c, const Dataset &train) {
  if (!c.support_csv.empty()) {
    std::ifstream in(c.support_csv);
    if (!in) throw InvalidArgument("cannot open " + c.support_csv);
    return read_support_csv(in);
  }
  return select_support(train.inputs, c.support_size, c.hyper);
}

/// Runs one centralized algorithm; partitions come from `ws`.
inline PredictiveDistribution run_centralized(Algorithm a, const Dataset &train,
                                              const Dataset &test, const SupportSet &s,
                                              const std::vector<WorkerAssignment> &ws,
                                              const ExperimentConfig &c) {
  switch (a) {
  case Algorithm::fgp: return fgp_predict(train, test, c.hyper);
  case Algorithm::pitc: return pitc_predict(train, test, s, blocks_of(ws), c.hyper);
  case Algorithm::pic: return pic_predict(train, test, s, blocks_of(ws), c.hyper);
  case Algorithm::icf:
    return icf_predict(train, test, icf_factorize(train, c.hyper, c.rank), c.hyper);
  default: break;
  }
  throw InvalidArgument("not a centralized algorithm: " + to_string(a));
}

} // namespace detail

/// Runs the configured algorithm on `instances` random instances (seeds
/// seed, seed+1, ...). Parallel algorithms are also timed against their
/// centralized counterpart with the same |S| or R; FGP is run when the
/// training set is no larger than fgp_limit.
inline ExperimentResult run_experiment(ExperimentConfig cfg) {
  cfg.finalize();
  cfg.validate();
  ExperimentResult result;
  result.config = cfg;
  const Algorithm alg = cfg.algorithm;

  for (std::size_t inst = 0; inst < cfg.instances; ++inst) {
    MetricsReport rep;
    rep.instance = inst;
    rep.seed = cfg.seed + inst;
    auto [train, test] = detail::instance_data(cfg, rep.seed);
    if (train.inputs.dim() != cfg.hyper.dim()) {
      throw DimensionError("dataset dimension does not match the length scales");
    }

    Engine engine(EngineConfig{cfg.concurrent, kDefaultJitter});
    SupportSet s;
    if (uses_support(alg)) s = detail::instance_support(cfg, train);

    std::vector<WorkerAssignment> ws;
    PredictiveDistribution pred;
    if (is_parallel(alg)) {
      const auto t0 = std::chrono::steady_clock::now();
      if (cfg.partition == "clustered") {
        ws = engine.partition_clustered(train, test, cfg.workers, rep.seed);
      } else {
        ws = partition_random(train, test, cfg.workers, rep.seed);
      }
      rep.partition_seconds = detail::seconds_since(t0);
      if (alg == Algorithm::ppitc) {
        pred = engine.run_ppitc(ws, s, cfg.hyper).prediction;
      } else if (alg == Algorithm::ppic) {
        pred = engine.run_ppic(ws, s, cfg.hyper).prediction;
      } else {
        pred = engine.run_picf(ws, cfg.hyper, cfg.rank, cfg.partition_u).prediction;
      }
      rep.parallel_seconds = detail::seconds_since(t0);
      for (const auto &[phase_name, sec] : engine.phase_seconds()) {
        if (phase_name == phase::kPartition) continue;
        if (phase_name == phase::kPrediction || phase_name == phase::kPredictiveComponents ||
            phase_name == phase::kCrossCovariance) {
          rep.prediction_seconds += sec;
        } else {
          rep.summary_seconds += sec;
        }
      }
      rep.messages = engine.log().totals();

      const auto t1 = std::chrono::steady_clock::now();
      (void)detail::run_centralized(centralized_counterpart(alg), train, test, s, ws, cfg);
      rep.centralized_seconds = detail::seconds_since(t1);
      if (*rep.parallel_seconds > 0.0) {
        rep.speedup = rep.centralized_seconds / *rep.parallel_seconds;
      }
    } else {
      if (uses_blocks(alg)) {
        const auto t0 = std::chrono::steady_clock::now();
        ws = cfg.partition == "clustered"
                 ? partition_clustered(train, test, cfg.workers, rep.seed)
                 : partition_random(train, test, cfg.workers, rep.seed);
        rep.partition_seconds = detail::seconds_since(t0);
      }
      const auto t1 = std::chrono::steady_clock::now();
      pred = detail::run_centralized(alg, train, test, s, ws, cfg);
      rep.centralized_seconds = detail::seconds_since(t1);
    }

    if (cfg.compute_fgp && train.size() <= cfg.fgp_limit) {
      const auto t2 = std::chrono::steady_clock::now();
      const auto fgp = fgp_predict(train, test, cfg.hyper);
      rep.fgp_seconds = detail::seconds_since(t2);
      rep.rmse_vs_fgp = rmse(pred.mean, fgp.mean);
    }
    rep.negative_variance_count = pred.negative_variance_count;
    rep.psd_valid = pred.psd_valid;
    if (test.outputs) {
      rep.rmse = rmse(pred, *test.outputs);
      if (count_nonpositive(pred.variance) == 0) {
        rep.mnlp = mnlp(pred, *test.outputs);
      }
    }
    result.logs.push_back(engine.log());
    result.predictions.push_back(std::move(pred));
    result.instances.push_back(rep);
  }
  result.mean = detail::average(result.instances);
  return result;
}

// Results CSV. Timing columns come last so runs can be compared byte for
// byte after dropping them.

inline const std::vector<std::string> &metrics_columns() {
  static const std::vector<std::string> cols{
      "name", "instance", "seed", "algorithm", "workers", "support_size", "rank",
      "partition", "partition_u", "n_train", "n_test", "rmse", "mnlp", "rmse_vs_fgp",
      "negative_variance_count", "psd_valid", "messages", "scalars", "bytes",
      "partition_s", "summary_s", "prediction_s", "parallel_s", "centralized_s",
      "fgp_s", "speedup"};
  return cols;
}

inline constexpr std::size_t kFirstTimingColumn = 19;

namespace detail {
inline std::string num(std::optional<double> v) {
  if (!v) return "NA";
  std::ostringstream o;
  o << std::setprecision(17) << *v;
  return o.str();
}
} // namespace detail

inline void write_metrics_header(std::ostream &out) {
  const auto &cols = metrics_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
}

inline void write_metrics_row(std::ostream &out, const ExperimentConfig &c,
                              const MetricsReport &r, const std::string &instance) {
  const Algorithm a = c.algorithm;
  using detail::num;
  auto count = [](bool used, std::size_t v) { return used ? std::to_string(v) : std::string("NA"); };
  std::size_t n_train = c.n_train, n_test = c.n_test;
  out << c.name << "," << instance << "," << r.seed << "," << to_string(a) << ","
      << count(uses_blocks(a), c.workers) << "," << count(uses_support(a), c.support_size)
      << "," << count(uses_rank(a), c.rank) << ","
      << (uses_blocks(a) ? c.partition : "NA") << ","
      << (a == Algorithm::picf ? (c.partition_u ? "1" : "0") : "NA") << ","
      << (c.train_csv.empty() ? std::to_string(n_train) : "csv") << ","
      << (c.train_csv.empty() ? std::to_string(n_test) : "csv") << ","
      << num(r.rmse) << "," << num(r.mnlp) << "," << num(r.rmse_vs_fgp) << ","
      << r.negative_variance_count << "," << (r.psd_valid ? 1 : 0) << ","
      << r.messages.messages << "," << r.messages.scalars << "," << r.messages.bytes << ","
      << num(r.partition_seconds) << "," << num(r.summary_seconds) << ","
      << num(r.prediction_seconds) << "," << num(r.parallel_seconds) << ","
      << num(r.centralized_seconds) << "," << num(r.fgp_seconds) << ","
      << num(r.speedup) << "\n";
}

inline void write_predictions_csv(std::ostream &out, const PredictiveDistribution &p) {
  out << "id,mean,variance\n" << std::setprecision(17);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    out << p.ordering[i] << "," << p.mean(k) << "," << p.variance(k) << "\n";
  }
}

/// Writes <name>_metrics.csv (one row per instance plus a "mean" row),
/// <name>_messages_<i>.csv per instance and <name>_predictions.csv for the
/// first instance into cfg.output_dir.
inline void write_experiment_outputs(const ExperimentResult &r) {
  const auto &c = r.config;
  if (c.output_dir.empty()) return;
  namespace fs = std::filesystem;
  fs::create_directories(c.output_dir);
  const fs::path dir(c.output_dir);
  {
    std::ofstream out(dir / (c.name + "_metrics.csv"));
    write_metrics_header(out);
    for (const auto &rep : r.instances) {
      write_metrics_row(out, c, rep, std::to_string(rep.instance));
    }
    write_metrics_row(out, c, r.mean, "mean");
  }
  for (std::size_t i = 0; i < r.logs.size(); ++i) {
    std::ofstream out(dir / (c.name + "_messages_" + std::to_string(i) + ".csv"));
    r.logs[i].write_csv(out);
  }
  if (!r.predictions.empty()) {
    std::ofstream out(dir / (c.name + "_predictions.csv"));
    write_predictions_csv(out, r.predictions.front());
  }
}

/// A grid over config keys; every combination is run in row-major order.
using SweepGrid = std::vector<std::pair<std::string, std::vector<std::string>>>;

inline std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig &base,
                                                  const SweepGrid &grid) {
  std::vector<ExperimentConfig> out{base};
  for (const auto &[key, values] : grid) {
    if (values.empty()) throw InvalidArgument("sweep: no values for " + key);
    std::vector<ExperimentConfig> next;
    for (const auto &c : out) {
      for (const auto &v : values) {
        ExperimentConfig n = c;
        set_config_value(n, key, v);
        n.name += "_" + key + "=" + v;
        next.push_back(std::move(n));
      }
    }
    out = std::move(next);
  }
  return out;
}

/// Runs every grid point and writes <base.name>_sweep.csv with each point's
/// mean row.
inline std::vector<ExperimentResult> run_sweep(const ExperimentConfig &base,
                                               const SweepGrid &grid) {
  std::vector<ExperimentResult> results;
  for (auto c : expand_sweep(base, grid)) {
    results.push_back(run_experiment(std::move(c)));
    write_experiment_outputs(results.back());
  }
  if (!base.output_dir.empty()) {
    std::filesystem::create_directories(base.output_dir);
    std::ofstream out(std::filesystem::path(base.output_dir) / (base.name + "_sweep.csv"));
    write_metrics_header(out);
    for (const auto &r : results) write_metrics_row(out, r.config, r.mean, "mean");
  }
  return results;
}

/// Reads metrics CSVs and averages per-instance rows over each distinct
/// configuration (all columns before `rmse` except name, instance and
/// seed). Rows labelled "mean" are skipped unless they are all there is.
inline void write_report(std::ostream &out, const std::vector<std::string> &paths) {
  struct Acc {
    std::vector<std::string> key;
    std::map<std::string, std::pair<double, std::size_t>> sums;
    std::size_t rows = 0;
  };
  const auto &cols = metrics_columns();
  std::vector<std::vector<std::string>> instance_rows, mean_rows;
  for (const auto &p : paths) {
    std::ifstream in(p);
    if (!in) throw InvalidArgument("cannot open " + p);
    std::string line;
    std::getline(in, line);
    if (split_csv(line) != cols) throw InvalidArgument(p + ": not a metrics csv");
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      auto cells = split_csv(line);
      if (cells.size() != cols.size()) throw DimensionError(p + ": ragged row");
      (cells[1] == "mean" ? mean_rows : instance_rows).push_back(std::move(cells));
    }
  }
  const auto &rows = instance_rows.empty() ? mean_rows : instance_rows;
  const std::vector<std::size_t> key_cols{3, 4, 5, 6, 7, 8, 9, 10};
  const std::vector<std::size_t> value_cols{11, 12, 13, 14, 17, 22, 23, 25};
  std::vector<Acc> groups;
  for (const auto &row : rows) {
    std::vector<std::string> key;
    for (auto k : key_cols) key.push_back(row[k]);
    Acc *g = nullptr;
    for (auto &e : groups) {
      if (e.key == key) g = &e;
    }
    if (!g) {
      groups.push_back({key, {}, 0});
      g = &groups.back();
    }
    ++g->rows;
    for (auto v : value_cols) {
      if (row[v] == "NA") continue;
      auto &[s, n] = g->sums[cols[v]];
      s += std::stod(row[v]);
      ++n;
    }
  }
  for (auto k : key_cols) out << cols[k] << ",";
  out << "rows";
  for (auto v : value_cols) out << ",mean_" << cols[v];
  out << "\n" << std::setprecision(17);
  for (const auto &g : groups) {
    for (const auto &k : g.key) out << k << ",";
    out << g.rows;
    for (auto v : value_cols) {
      auto it = g.sums.find(cols[v]);
      out << ",";
      if (it == g.sums.end() || it->second.second != g.rows) {
        out << "NA";
      } else {
        out << it->second.first / static_cast<double>(it->second.second);
      }
    }
    out << "\n";
  }
}

} // namespace pgpr

#endif

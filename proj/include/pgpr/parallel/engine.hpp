#ifndef PGPR_PARALLEL_ENGINE_HPP_
#define PGPR_PARALLEL_ENGINE_HPP_

#include <chrono>
#include <exception>
#include <map>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "pgpr/centralized.hpp"
#include "pgpr/parallel/partition.hpp"
#include "pgpr/parallel/summaries.hpp"
#include "pgpr/parallel/transport.hpp"

namespace pgpr {

namespace phase {
inline const std::string kPartition = "partition";
inline const std::string kIcfFactorization = "icf_factorization";
inline const std::string kLocalSummary = "local_summary";
inline const std::string kSigmaDot = "sigma_dot";
inline const std::string kGlobalSummary = "global_summary";
inline const std::string kPredictiveComponents = "predictive_components";
inline const std::string kPrediction = "prediction";
inline const std::string kCrossCovariance = "cross_covariance";
inline const std::string kAssimilation = "assimilation";
} // namespace phase

struct EngineConfig {
  /// Run each worker step on its own thread. Results do not depend on this.
  bool concurrent = true;
  double jitter = kDefaultJitter;
};

enum class SupportMethod { ppitc, ppic };

/// What worker m keeps after a pPITC/pPIC run, enough to answer
/// cross-block covariance requests later.
struct SupportWorkerState {
  int id = 0;
  PointSet tests;
  std::vector<std::size_t> test_positions;
  MatrixXd k_us;   // Sigma_UmS
  MatrixXd alpha;  // Sigma_UmS Sigma_SS^{-1}
  MatrixXd phi_us; // Phi_UmS^m (pPIC only)
  VectorXd mean;
  VectorXd variance;
  std::optional<MatrixXd> covariance;
};

struct SupportRun {
  SupportMethod method = SupportMethod::ppitc;
  Hyperparameters hyper;
  SupportSet support;
  std::vector<LocalSummary> locals;
  GlobalSummary global;
  Cholesky global_llt;
  std::vector<SupportWorkerState> workers;
  PredictiveDistribution prediction;

  const SupportWorkerState &worker(int id) const {
    if (id < 1 || id > static_cast<int>(workers.size())) {
      throw InvalidArgument("unknown worker id " + std::to_string(id));
    }
    return workers[static_cast<std::size_t>(id - 1)];
  }
};

struct IcfRun {
  std::size_t rank = 0;
  std::vector<MatrixXd> factor_blocks; // F_m, rank x |D_m|
  std::vector<std::vector<std::size_t>> train_positions;
  std::vector<VectorXd> residual_blocks;
  std::vector<std::size_t> pivot_order;
  std::vector<ICFLocalSummary> locals;
  ICFGlobalSummary global;
  PredictiveDistribution prediction;

  /// Reassembles the distributed factor in training order.
  ICFFactor assembled_factor() const {
    std::size_t n = 0;
    for (const auto &p : train_positions) n += p.size();
    ICFFactor f;
    f.rank = rank;
    f.pivot_order = pivot_order;
    f.factor = MatrixXd::Zero(static_cast<Eigen::Index>(rank),
                              static_cast<Eigen::Index>(n));
    f.residual_diag = VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t m = 0; m < factor_blocks.size(); ++m) {
      for (std::size_t k = 0; k < train_positions[m].size(); ++k) {
        const auto col = static_cast<Eigen::Index>(train_positions[m][k]);
        f.factor.col(col) = factor_blocks[m].col(static_cast<Eigen::Index>(k));
        f.residual_diag(col) = residual_blocks[m](static_cast<Eigen::Index>(k));
      }
    }
    return f;
  }
};

namespace detail {

/// Checks worker ids are exactly 1..M in order and the test positions form
/// a permutation. Returns |U|.
inline std::size_t check_assignments(const std::vector<WorkerAssignment> &ws) {
  if (ws.empty()) {
    throw InvalidArgument("engine: no workers");
  }
  std::size_t n_test = 0;
  for (std::size_t m = 0; m < ws.size(); ++m) {
    if (ws[m].worker_id != static_cast<int>(m + 1)) {
      throw InvalidArgument("engine: worker ids must be 1..M in order");
    }
    if (ws[m].local_data.empty()) {
      throw InvalidArgument("worker " + std::to_string(m + 1) +
                            " has no training data");
    }
    n_test += ws[m].test_positions.size();
  }
  std::vector<bool> seen(n_test, false);
  for (const auto &w : ws) {
    for (std::size_t p : w.test_positions) {
      if (p >= n_test || seen[p]) {
        throw InvalidArgument("engine: test positions are not a partition");
      }
      seen[p] = true;
    }
  }
  return n_test;
}

/// The full test set in original order, reassembled from the blocks.
inline Dataset gather_tests(const std::vector<WorkerAssignment> &ws,
                            std::size_t n_test) {
  Dataset out;
  if (n_test == 0) return out;
  const WorkerAssignment *any = nullptr;
  for (const auto &w : ws) {
    if (!w.local_tests.empty()) {
      any = &w;
      break;
    }
  }
  const auto d = static_cast<Eigen::Index>(any->local_tests.inputs.dim());
  MatrixXd feats(static_cast<Eigen::Index>(n_test), d);
  std::vector<PointId> ids(n_test);
  VectorXd mu(static_cast<Eigen::Index>(n_test));
  for (const auto &w : ws) {
    const VectorXd local_mu =
        expand_mean(w.local_tests.prior_mean.value_or(PriorMean{0.0}),
                    w.local_tests.size());
    for (std::size_t k = 0; k < w.test_positions.size(); ++k) {
      const auto p = static_cast<Eigen::Index>(w.test_positions[k]);
      feats.row(p) = w.local_tests.inputs.features.row(static_cast<Eigen::Index>(k));
      ids[static_cast<std::size_t>(p)] = w.local_tests.inputs.ids[k];
      mu(p) = local_mu(static_cast<Eigen::Index>(k));
    }
  }
  out.inputs = PointSet(std::move(feats), std::move(ids), any->local_tests.inputs.domain);
  out.prior_mean = std::move(mu);
  return out;
}

inline VectorXd row_dot(const MatrixXd &a, const MatrixXd &b) {
  return a.cwiseProduct(b).rowwise().sum();
}

} // namespace detail

/// Master/worker engine. M logical workers exchange data only through a
/// logged in-process transport; the master lives on worker 1. All
/// reductions read worker messages in ascending worker order, so results are
/// the same whether or not workers run concurrently.
class Engine {
public:
  explicit Engine(EngineConfig cfg = {}) : cfg_(cfg) {}

  const MessageLog &log() const { return log_; }
  /// Wall-clock seconds spent in each phase since the last clear_log().
  const std::map<std::string, double> &phase_seconds() const { return clock_.totals; }
  void clear_log() {
    log_.clear();
    clock_.totals.clear();
  }
  const EngineConfig &config() const { return cfg_; }

  SupportRun run_ppitc(const std::vector<WorkerAssignment> &ws,
                       const SupportSet &s, const Hyperparameters &h,
                       bool full_covariance = false) {
    return run_support(SupportMethod::ppitc, ws, s, h, full_covariance);
  }

  SupportRun run_ppic(const std::vector<WorkerAssignment> &ws,
                      const SupportSet &s, const Hyperparameters &h,
                      bool full_covariance = false) {
    return run_support(SupportMethod::ppic, ws, s, h, full_covariance);
  }

  /// Local work and prediction only: the master already holds `global`, so no local
  /// summaries are shipped. Used by the online model.
  SupportRun run_with_global(SupportMethod method,
                             const std::vector<WorkerAssignment> &ws,
                             const SupportSet &s, const Hyperparameters &h,
                             const GlobalSummary &global,
                             bool full_covariance = false) {
    return run_support(method, ws, s, h, full_covariance, &global);
  }

  /// Runs clustering as a protocol step: workers exchange their centers and
  /// ship every reassigned input to its new owner. Each moved training input
  /// costs d + 2 scalars (features, output, prior mean); each test input d + 1.
  std::vector<WorkerAssignment> partition_clustered(const Dataset &train,
                                                    const Dataset &tests,
                                                    std::size_t workers,
                                                    std::uint64_t seed) {
    ClockStop guard{clock_};
    auto base = partition_random(train, tests, workers, seed);
    auto result = pgpr::partition_clustered(train, tests, workers, seed);
    const int m = static_cast<int>(workers);
    Transport net(m, log_);
    enter(net, phase::kPartition);
    if (workers == 1) return result;
    const MatrixXd centers = choose_centers(base, train, seed);
    for (int w = 1; w <= m; ++w) {
      net.broadcast(w, "center", pack(VectorXd(centers.row(w - 1).transpose())));
    }
    const std::size_t d = train.inputs.dim();
    auto ship = [&](auto positions_of, std::size_t per_point, const char *tag) {
      std::vector<int> owner_before(0), owner_after(0);
      std::size_t n = 0;
      for (const auto &w : base) n += positions_of(w).size();
      owner_before.assign(n, 0);
      owner_after.assign(n, 0);
      for (const auto &w : base)
        for (std::size_t p : positions_of(w)) owner_before[p] = w.worker_id;
      for (const auto &w : result)
        for (std::size_t p : positions_of(w)) owner_after[p] = w.worker_id;
      for (int from = 1; from <= m; ++from) {
        for (int to = 1; to <= m; ++to) {
          if (from == to) continue;
          std::size_t moved = 0;
          for (std::size_t p = 0; p < n; ++p) {
            if (owner_before[p] == from && owner_after[p] == to) ++moved;
          }
          if (moved == 0) continue;
          net.send(from, to, tag, std::vector<double>(moved * per_point, 0.0));
          (void)net.recv(to, from, tag);
        }
      }
    };
    ship([](const WorkerAssignment &w) -> const std::vector<std::size_t> & {
      return w.train_positions;
    }, d + 2, "train_points");
    ship([](const WorkerAssignment &w) -> const std::vector<std::size_t> & {
      return w.test_positions;
    }, d + 1, "test_points");
    for (int w = 1; w <= m; ++w) {
      for (int from = 1; from <= m; ++from) {
        if (from != w) (void)net.recv(w, from, "center");
      }
    }
    return result;
  }

  /// Sigma_hat_{UiUj} for i != j, computed on machine i after receiving U_j
  /// (and, for pPIC, Phi_SUj^j) from machine j. The transfer is logged.
  MatrixXd cross_block_covariance(const SupportRun &run, int i, int j) {
    const int m = static_cast<int>(run.workers.size());
    if (i == j) {
      throw InvalidArgument("cross_block_covariance needs two distinct workers");
    }
    const auto &wi = run.worker(i);
    const auto &wj = run.worker(j);
    if (wj.tests.empty() || wi.tests.empty()) {
      return MatrixXd(static_cast<Eigen::Index>(wi.tests.size()),
                      static_cast<Eigen::Index>(wj.tests.size()));
    }
    ClockStop guard{clock_};
    Transport net(m, log_);
    enter(net, phase::kCrossCovariance);
    const auto nj = static_cast<Eigen::Index>(wj.tests.size());
    const auto d = static_cast<Eigen::Index>(wj.tests.dim());
    net.send(j, i, "test_inputs", pack(wj.tests.features));
    PointSet uj(unpack_matrix(net.recv(i, j, "test_inputs"), nj, d), wj.tests.ids,
                wj.tests.domain);
    MatrixXd phi_j;
    if (run.method == SupportMethod::ppic) {
      net.send(j, i, "phi_su", pack(MatrixXd(wj.phi_us.transpose())));
      phi_j = unpack_matrix(net.recv(i, j, "phi_su"),
                            static_cast<Eigen::Index>(run.support.size()), nj);
    }
    const MatrixXd k_suj = cov_matrix(run.support.inputs, uj, run.hyper);
    MatrixXd out = cov_matrix(wi.tests, uj, run.hyper);
    out.noalias() -= wi.alpha * k_suj;
    if (run.method == SupportMethod::ppitc) {
      out.noalias() += wi.k_us * run.global_llt.solve(k_suj);
    } else {
      out.noalias() += wi.phi_us * run.global_llt.solve(phi_j);
    }
    return out;
  }

  /// pICF-based GP. Runs a distributed pivoted incomplete Cholesky
  /// whose pivots come from globally reduced diagonals, so the column blocks
  /// match icf_factorize exactly. With `partition_u`, machine i reduces and
  /// solves only the columns of its own test block.
  IcfRun run_picf(const std::vector<WorkerAssignment> &ws,
                  const Hyperparameters &h, std::size_t rank,
                  bool partition_u = false, bool full_covariance = false) {
    h.validate();
    const std::size_t n_test = detail::check_assignments(ws);
    if (n_test == 0) {
      throw InvalidArgument("run_picf: no test inputs");
    }
    std::size_t n_train = 0;
    for (const auto &w : ws) n_train += w.local_data.size();
    if (rank < 1 || rank > n_train) {
      throw InvalidArgument("icf rank must be in [1, |D|]");
    }
    const Dataset tests = detail::gather_tests(ws, n_test);
    const std::size_t m = ws.size();
    const int nodes = static_cast<int>(m);
    Transport net(nodes, log_);
    ClockStop guard{clock_};
    const double inv_n = 1.0 / h.noise_variance;

    IcfRun run;
    run.factor_blocks.resize(m);
    run.train_positions.resize(m);
    run.residual_blocks.resize(m);

    // Distributed factorization.
    enter(net, phase::kIcfFactorization);
    std::vector<VectorXd> diag(m);
    std::vector<std::vector<bool>> pivoted(m);
    for (std::size_t w = 0; w < m; ++w) {
      run.train_positions[w] = ws[w].train_positions;
      run.factor_blocks[w] = MatrixXd::Zero(static_cast<Eigen::Index>(rank),
                                            static_cast<Eigen::Index>(ws[w].local_data.size()));
      diag[w] = detail::se_diagonal(ws[w].local_data.inputs, h);
      pivoted[w].assign(ws[w].local_data.size(), false);
    }
    double initial_max = 0.0;
    std::size_t k = 0;
    for (; k < rank; ++k) {
      for_each_worker(net, m, [&](std::size_t w) {
        const Eigen::Index j =
            detail::icf_argmax(diag[w], pivoted[w], run.train_positions[w]);
        std::vector<double> cand{-std::numeric_limits<double>::infinity(), -1.0};
        if (j >= 0) {
          cand = {diag[w](j), static_cast<double>(run.train_positions[w][static_cast<std::size_t>(j)])};
        }
        net.send(static_cast<int>(w + 1), kMasterNode, "pivot_candidate", cand);
      });
      // Master reduction, ascending worker order.
      double best_value = -std::numeric_limits<double>::infinity();
      double best_pos = -1.0;
      int owner = 0;
      for (int w = 1; w <= nodes; ++w) {
        const auto c = net.recv(kMasterNode, w, "pivot_candidate");
        if (c[1] < 0) continue;
        if (owner == 0 || c[0] > best_value ||
            (c[0] == best_value && c[1] < best_pos)) {
          best_value = c[0];
          best_pos = c[1];
          owner = w;
        }
      }
      if (k == 0) initial_max = best_value;
      const bool accept =
          owner != 0 && detail::icf_accept_pivot(best_value, initial_max);
      const std::vector<double> decision =
          accept ? std::vector<double>{best_pos, best_value, static_cast<double>(owner)}
                 : std::vector<double>{-1.0, 0.0, 0.0};
      net.broadcast(kMasterNode, "pivot", decision);
      for (int w = 1; w <= nodes; ++w) {
        if (w != kMasterNode) (void)net.recv(w, kMasterNode, "pivot");
      }
      if (!accept) break;

      // The owner broadcasts the pivot's features and factor column.
      const auto ow = static_cast<std::size_t>(owner - 1);
      const auto &opos = run.train_positions[ow];
      Eigen::Index local_pivot = -1;
      for (std::size_t q = 0; q < opos.size(); ++q) {
        if (static_cast<double>(opos[q]) == best_pos) {
          local_pivot = static_cast<Eigen::Index>(q);
        }
      }
      const VectorXd pivot_features =
          ws[ow].local_data.inputs.features.row(local_pivot).transpose();
      const VectorXd pivot_col = run.factor_blocks[ow].col(local_pivot).head(
          static_cast<Eigen::Index>(k));
      std::vector<double> payload = pack(pivot_col);
      payload.insert(payload.end(), pivot_features.data(),
                     pivot_features.data() + pivot_features.size());
      net.broadcast(owner, "pivot_column", payload);
      run.pivot_order.push_back(static_cast<std::size_t>(best_pos));

      for_each_worker(net, m, [&](std::size_t w) {
        const int id = static_cast<int>(w + 1);
        VectorXd col = pivot_col;
        VectorXd feat = pivot_features;
        if (id != owner) {
          const auto p = net.recv(id, owner, "pivot_column");
          const auto kk = static_cast<Eigen::Index>(k);
          col = Eigen::Map<const VectorXd>(p.data(), kk);
          feat = Eigen::Map<const VectorXd>(p.data() + kk,
                                            static_cast<Eigen::Index>(p.size()) - kk);
        }
        const VectorXd kcol = detail::se_column(ws[w].local_data.inputs, feat, h);
        detail::icf_row(run.factor_blocks[w], diag[w], pivoted[w],
                        static_cast<Eigen::Index>(k), col, best_value, kcol,
                        id == owner ? local_pivot : -1);
      });
    }
    run.rank = k;
    const auto r = static_cast<Eigen::Index>(run.rank);
    for (std::size_t w = 0; w < m; ++w) {
      run.factor_blocks[w] = MatrixXd(run.factor_blocks[w].topRows(r));
      run.residual_blocks[w] = diag[w];
    }

    // Local summaries.
    enter(net, phase::kLocalSummary);
    run.locals.resize(m);
    std::vector<VectorXd> residuals(m);
    std::vector<MatrixXd> k_ud(m);
    for_each_worker(net, m, [&](std::size_t w) {
      const auto &fm = run.factor_blocks[w];
      residuals[w] = detail::local_residual(ws[w].local_data);
      k_ud[w] = cov_matrix(tests.inputs, ws[w].local_data.inputs, h);
      auto &ls = run.locals[w];
      ls.owner = static_cast<int>(w + 1);
      ls.y_dot = fm * residuals[w];
      ls.phi = fm * fm.transpose();
      ls.sigma_dot.resize(r, static_cast<Eigen::Index>(n_test));
      for (Eigen::Index u = 0; u < ls.sigma_dot.cols(); ++u) {
        const VectorXd kc = k_ud[w].row(u).transpose();
        ls.sigma_dot.col(u) = fm * kc;
      }
      net.send(ls.owner, kMasterNode, "y_dot", pack(ls.y_dot));
      net.send(ls.owner, kMasterNode, "phi", pack(ls.phi));
    });
    VectorXd y_sum = VectorXd::Zero(r);
    MatrixXd phi_sum = MatrixXd::Zero(r, r);
    for (int w = 1; w <= nodes; ++w) {
      y_sum += unpack_vector(net.recv(kMasterNode, w, "y_dot"));
      phi_sum += unpack_matrix(net.recv(kMasterNode, w, "phi"), r, r);
    }
    run.global.phi = MatrixXd::Identity(r, r) + inv_n * phi_sum;
    const Cholesky phi_llt(symmetrize(run.global.phi), 0.0, "Phi");
    run.global.y_ddot = phi_llt.solve(y_sum);

    // Sigma_dot exchange and Sigma_ddot.
    enter(net, phase::kSigmaDot);
    const auto nu = static_cast<Eigen::Index>(n_test);
    run.global.sigma_ddot.resize(r, nu);
    if (!partition_u) {
      for_each_worker(net, m, [&](std::size_t w) {
        net.send(static_cast<int>(w + 1), kMasterNode, "sigma_dot",
                 pack(run.locals[w].sigma_dot));
      });
      MatrixXd sum = MatrixXd::Zero(r, nu);
      for (int w = 1; w <= nodes; ++w) {
        sum += unpack_matrix(net.recv(kMasterNode, w, "sigma_dot"), r, nu);
      }
      enter(net, phase::kGlobalSummary);
      run.global.sigma_ddot = phi_llt.solve_columnwise(sum);
      net.broadcast(kMasterNode, "y_ddot", pack(run.global.y_ddot));
      net.broadcast(kMasterNode, "sigma_ddot", pack(run.global.sigma_ddot));
      for (int w = 1; w <= nodes; ++w) {
        if (w == kMasterNode) continue;
        (void)net.recv(w, kMasterNode, "y_ddot");
        (void)net.recv(w, kMasterNode, "sigma_ddot");
      }
    } else {
      auto block_of = [&](std::size_t w, std::size_t i) {
        const auto &cols = ws[i].test_positions;
        MatrixXd out(r, static_cast<Eigen::Index>(cols.size()));
        for (std::size_t c = 0; c < cols.size(); ++c) {
          out.col(static_cast<Eigen::Index>(c)) =
              run.locals[w].sigma_dot.col(static_cast<Eigen::Index>(cols[c]));
        }
        return out;
      };
      for_each_worker(net, m, [&](std::size_t w) {
        for (std::size_t i = 0; i < m; ++i) {
          if (i == w || ws[i].test_positions.empty()) continue;
          net.send(static_cast<int>(w + 1), static_cast<int>(i + 1),
                   "sigma_dot_block", pack(block_of(w, i)));
        }
      });
      enter(net, phase::kGlobalSummary);
      net.broadcast(kMasterNode, "y_ddot", pack(run.global.y_ddot));
      net.broadcast(kMasterNode, "phi", pack(run.global.phi));
      std::vector<MatrixXd> ddot_blocks(m);
      for_each_worker(net, m, [&](std::size_t i) {
        const int id = static_cast<int>(i + 1);
        if (id != kMasterNode) {
          (void)net.recv(id, kMasterNode, "y_ddot");
          const MatrixXd phi = unpack_matrix(net.recv(id, kMasterNode, "phi"), r, r);
          (void)phi;
        }
        const auto ni = static_cast<Eigen::Index>(ws[i].test_positions.size());
        if (ni == 0) return;
        MatrixXd sum = MatrixXd::Zero(r, ni);
        for (std::size_t w = 0; w < m; ++w) {
          if (w == i) {
            sum += block_of(w, i);
          } else {
            sum += unpack_matrix(net.recv(id, static_cast<int>(w + 1), "sigma_dot_block"),
                                 r, ni);
          }
        }
        const Cholesky local_phi(symmetrize(run.global.phi), 0.0, "Phi");
        ddot_blocks[i] = local_phi.solve_columnwise(sum);
        net.broadcast(id, "sigma_ddot_block", pack(ddot_blocks[i]));
      });
      for (std::size_t i = 0; i < m; ++i) {
        const auto &cols = ws[i].test_positions;
        for (std::size_t c = 0; c < cols.size(); ++c) {
          run.global.sigma_ddot.col(static_cast<Eigen::Index>(cols[c])) =
              ddot_blocks[i].col(static_cast<Eigen::Index>(c));
        }
        if (cols.empty()) continue;
        for (int w = 1; w <= nodes; ++w) {
          if (w != static_cast<int>(i + 1)) {
            (void)net.recv(w, static_cast<int>(i + 1), "sigma_ddot_block");
          }
        }
      }
    }

    // Predictive components.
    enter(net, phase::kPredictiveComponents);
    for_each_worker(net, m, [&](std::size_t w) {
      const int id = static_cast<int>(w + 1);
      const auto &sd = run.locals[w].sigma_dot;
      const VectorXd mean_c = inv_n * (k_ud[w] * residuals[w]) -
                              inv_n * inv_n * (sd.transpose() * run.global.y_ddot);
      net.send(id, kMasterNode, "mean_component", pack(mean_c));
      if (full_covariance) {
        const MatrixXd cov_c = inv_n * (k_ud[w] * k_ud[w].transpose()) -
                               inv_n * inv_n * (sd.transpose() * run.global.sigma_ddot);
        net.send(id, kMasterNode, "cov_component", pack(cov_c));
      } else {
        const VectorXd var_c =
            inv_n * k_ud[w].rowwise().squaredNorm() -
            inv_n * inv_n * sd.cwiseProduct(run.global.sigma_ddot).colwise().sum().transpose();
        net.send(id, kMasterNode, "cov_component", pack(var_c));
      }
    });

    // Master sums the components.
    enter(net, phase::kPrediction);
    PredictiveDistribution& out = run.prediction;
    out.ordering = tests.inputs.ids;
    out.mean = expand_mean(*tests.prior_mean, n_test);
    if (full_covariance) {
      out.covariance = cov_matrix(tests.inputs, tests.inputs, h);
    } else {
      out.variance = prior_variances(tests.inputs, h);
    }
    for (int w = 1; w <= nodes; ++w) {
      out.mean += unpack_vector(net.recv(kMasterNode, w, "mean_component"));
      const auto c = net.recv(kMasterNode, w, "cov_component");
      if (full_covariance) {
        *out.covariance -= unpack_matrix(c, nu, nu);
      } else {
        out.variance -= unpack_vector(c);
      }
    }
    if (full_covariance) {
      out.covariance = symmetrize(*out.covariance);
      out.variance = out.covariance->diagonal();
    }
    update_psd_flag(out);
    return run;
  }

private:
  struct PhaseClock {
    std::map<std::string, double> totals;
    std::string current;
    std::chrono::steady_clock::time_point since;

    void enter(const std::string &p) {
      stop();
      current = p;
      since = std::chrono::steady_clock::now();
    }
    void stop() {
      if (current.empty()) return;
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - since;
      totals[current] += dt.count();
      current.clear();
    }
  };

  struct ClockStop {
    PhaseClock &c;
    ~ClockStop() { c.stop(); }
  };

  void enter(Transport &net, const std::string &p) {
    net.set_phase(p);
    clock_.enter(p);
  }

  template <typename Fn> void for_each_worker(Transport &net, std::size_t count, Fn &&fn) {
    std::vector<std::exception_ptr> errors(count);
    auto body = [&](std::size_t w) {
      try {
        fn(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    };
    net.begin_section();
    if (cfg_.concurrent && count > 1) {
      std::vector<std::thread> threads;
      threads.reserve(count);
      for (std::size_t w = 0; w < count; ++w) threads.emplace_back(body, w);
      for (auto &t : threads) t.join();
    } else {
      for (std::size_t w = 0; w < count; ++w) body(w);
    }
    net.end_section();
    for (auto &e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  SupportRun run_support(SupportMethod method,
                         const std::vector<WorkerAssignment> &ws,
                         const SupportSet &s, const Hyperparameters &h,
                         bool full_covariance,
                         const GlobalSummary *given = nullptr) {
    h.validate();
    if (s.size() == 0) {
      throw InvalidArgument("support set is empty");
    }
    const std::size_t n_test = detail::check_assignments(ws);
    const std::size_t m = ws.size();
    const int nodes = static_cast<int>(m);
    const auto ns = static_cast<Eigen::Index>(s.size());
    Transport net(nodes, log_);
    ClockStop guard{clock_};

    SupportRun run;
    run.method = method;
    run.hyper = h;
    run.support = s;
    run.workers.resize(m);
    run.locals.resize(m);

    // S is common knowledge; every worker factorizes Sigma_SS itself.
    const MatrixXd k_ss = cov_matrix(s.inputs, s.inputs, h);
    const Cholesky k_ss_llt(k_ss, cfg_.jitter, "Sigma_SS");

    // Local summaries.
    enter(net, phase::kLocalSummary);
    struct Scratch {
      VectorXd y_dot_u;
      MatrixXd sigma_dot_us;
      MatrixXd w; // L^{-1} Sigma_DmUm
    };
    std::vector<Scratch> scratch(m);
    for_each_worker(net, m, [&](std::size_t w) {
      const auto &a = ws[w];
      const int id = a.worker_id;
      const MatrixXd k_sdm = cov_matrix(s.inputs, a.local_data.inputs, h);
      const Cholesky lam = detail::conditional_block(a.local_data.inputs,
                                                     k_ss_llt, k_sdm, h,
                                                     cfg_.jitter, id);
      const MatrixXd v = lam.half_solve(k_sdm.transpose());
      const VectorXd z = lam.half_solve(detail::local_residual(a.local_data));
      auto &ls = run.locals[w];
      ls.owner = id;
      ls.y_dot = v.transpose() * z;
      ls.sigma_dot = v.transpose() * v;

      auto &st = run.workers[w];
      st.id = id;
      st.tests = a.local_tests.inputs;
      st.test_positions = a.test_positions;
      if (!a.local_tests.empty()) {
        st.k_us = cov_matrix(a.local_tests.inputs, s.inputs, h);
        st.alpha = k_ss_llt.solve(MatrixXd(st.k_us.transpose())).transpose();
        if (method == SupportMethod::ppic) {
          auto &sc = scratch[w];
          sc.w = lam.half_solve(cov_matrix(a.local_data.inputs, a.local_tests.inputs, h));
          sc.y_dot_u = sc.w.transpose() * z;
          sc.sigma_dot_us = sc.w.transpose() * v;
          st.phi_us = st.k_us + st.alpha * ls.sigma_dot - sc.sigma_dot_us;
        }
      }
      if (given) return;
      net.send(id, kMasterNode, "y_dot", pack(ls.y_dot));
      net.send(id, kMasterNode, "sigma_dot", pack(ls.sigma_dot));
    });

    // Master fuses the summaries and broadcasts the result.
    enter(net, phase::kGlobalSummary);
    if (given) {
      if (given->y_ddot.size() != ns || given->sigma_ddot.rows() != ns ||
          given->sigma_ddot.cols() != ns) {
        throw DimensionError("global summary does not match the support set size");
      }
      run.global = *given;
    } else {
      std::vector<LocalSummary> received;
      for (int w = 1; w <= nodes; ++w) {
        LocalSummary l;
        l.owner = w;
        l.y_dot = unpack_vector(net.recv(kMasterNode, w, "y_dot"));
        l.sigma_dot = unpack_matrix(net.recv(kMasterNode, w, "sigma_dot"), ns, ns);
        received.push_back(std::move(l));
      }
      run.global = aggregate_global_summary(received, s, h);
    }
    net.broadcast(kMasterNode, "y_ddot", pack(run.global.y_ddot));
    net.broadcast(kMasterNode, "sigma_ddot", pack(run.global.sigma_ddot));
    run.global_llt = Cholesky(run.global.sigma_ddot, cfg_.jitter, "Sigma_ddot_SS");

    // Each worker predicts its own test block.
    enter(net, phase::kPrediction);
    for_each_worker(net, m, [&](std::size_t w) {
      const int id = static_cast<int>(w + 1);
      if (id != kMasterNode) {
        (void)net.recv(id, kMasterNode, "y_ddot");
        (void)net.recv(id, kMasterNode, "sigma_ddot");
      }
      auto &st = run.workers[w];
      const auto &a = ws[w];
      if (a.local_tests.empty()) return;
      const VectorXd mu = expand_mean(*a.local_tests.prior_mean, a.local_tests.size());
      const VectorXd ddot_y = run.global_llt.solve(run.global.y_ddot);
      if (method == SupportMethod::ppitc) {
        const MatrixXd g = run.global_llt.solve(MatrixXd(st.k_us.transpose())); // Sigma_ddot^{-1} Sigma_SU
        st.mean = mu + st.k_us * ddot_y;
        if (full_covariance) {
          MatrixXd c = cov_matrix(st.tests, st.tests, h);
          c.noalias() -= st.alpha * st.k_us.transpose();
          c.noalias() += st.k_us * g;
          st.covariance = symmetrize(c);
          st.variance = st.covariance->diagonal();
        } else {
          st.variance = prior_variances(st.tests, h) -
                        detail::row_dot(st.k_us, st.alpha) +
                        detail::row_dot(st.k_us, g.transpose());
        }
      } else {
        const auto &sc = scratch[w];
        const auto &ls = run.locals[w];
        const MatrixXd g = run.global_llt.solve(MatrixXd(st.phi_us.transpose())); // Sigma_ddot^{-1} Phi_SU
        st.mean = mu + st.phi_us * ddot_y - st.alpha * ls.y_dot + sc.y_dot_u;
        if (full_covariance) {
          MatrixXd c = cov_matrix(st.tests, st.tests, h);
          c.noalias() -= st.phi_us * st.alpha.transpose();
          c.noalias() += st.alpha * sc.sigma_dot_us.transpose();
          c.noalias() += st.phi_us * g;
          c.noalias() -= sc.w.transpose() * sc.w;
          st.covariance = symmetrize(c);
          st.variance = st.covariance->diagonal();
        } else {
          st.variance = prior_variances(st.tests, h) -
                        detail::row_dot(st.phi_us, st.alpha) +
                        detail::row_dot(st.alpha, sc.sigma_dot_us) +
                        detail::row_dot(st.phi_us, g.transpose()) -
                        sc.w.colwise().squaredNorm().transpose();
        }
      }
    });

    // Predictions stay on the workers; they are read out here in U order.
    PredictiveDistribution &out = run.prediction;
    const auto nu = static_cast<Eigen::Index>(n_test);
    out.mean.resize(nu);
    out.variance.resize(nu);
    out.ordering.assign(n_test, 0);
    for (const auto &st : run.workers) {
      for (std::size_t k = 0; k < st.test_positions.size(); ++k) {
        const auto p = static_cast<Eigen::Index>(st.test_positions[k]);
        out.mean(p) = st.mean(static_cast<Eigen::Index>(k));
        out.variance(p) = st.variance(static_cast<Eigen::Index>(k));
        out.ordering[static_cast<std::size_t>(p)] = st.tests.ids[k];
      }
    }
    if (full_covariance) {
      MatrixXd cov(nu, nu);
      for (std::size_t i = 0; i < m; ++i) {
        const auto &wi = run.workers[i];
        scatter(cov, wi.test_positions, wi.test_positions, *wi.covariance);
        for (std::size_t j = i + 1; j < m; ++j) {
          const auto &wj = run.workers[j];
          if (wi.test_positions.empty() || wj.test_positions.empty()) continue;
          const MatrixXd c = cross_block_covariance(run, static_cast<int>(i + 1),
                                                    static_cast<int>(j + 1));
          scatter(cov, wi.test_positions, wj.test_positions, c);
          scatter(cov, wj.test_positions, wi.test_positions, MatrixXd(c.transpose()));
        }
      }
      out.covariance = std::move(cov);
    }
    update_psd_flag(out);
    return run;
  }

  static void scatter(MatrixXd &dst, const std::vector<std::size_t> &rows,
                      const std::vector<std::size_t> &cols, const MatrixXd &src) {
    for (std::size_t a = 0; a < rows.size(); ++a) {
      for (std::size_t b = 0; b < cols.size(); ++b) {
        dst(static_cast<Eigen::Index>(rows[a]), static_cast<Eigen::Index>(cols[b])) =
            src(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      }
    }
  }

  EngineConfig cfg_;
  MessageLog log_;
  PhaseClock clock_;
};

/// Online pPITC/pPIC: keeps the global summary and the per-worker state so
/// new data can be folded in without revisiting old workers.
class OnlineSupportModel {
public:
  OnlineSupportModel(SupportSet s, Hyperparameters h, EngineConfig cfg = {})
      : s_(std::move(s)), h_(std::move(h)), cfg_(cfg) {}

  /// Adds workers holding new, disjoint data. Their ids continue the
  /// existing numbering.
  void add(std::vector<WorkerAssignment> fresh) {
    std::vector<LocalSummary> locals;
    for (auto &w : fresh) {
      w.worker_id = static_cast<int>(workers_.size() + 1);
      locals.push_back(compute_local_summary(w, s_, h_, cfg_.jitter));
      workers_.push_back(std::move(w));
    }
    if (!global_) {
      global_ = aggregate_global_summary(locals, s_, h_);
    } else {
      global_ = assimilate_new_data(*global_, locals);
    }
    locals_.insert(locals_.end(), locals.begin(), locals.end());
  }

  const GlobalSummary &global() const {
    if (!global_) throw InvalidArgument("online model has no data");
    return *global_;
  }
  const std::vector<WorkerAssignment> &workers() const { return workers_; }

  /// Predicts from the assimilated global summary; workers only redo their
  /// own prediction work.
  SupportRun predict(Engine &engine, SupportMethod method,
                     bool full_covariance = false) const {
    return engine.run_with_global(method, workers_, s_, h_, global(), full_covariance);
  }

private:
  SupportSet s_;
  Hyperparameters h_;
  EngineConfig cfg_;
  std::vector<WorkerAssignment> workers_;
  std::vector<LocalSummary> locals_;
  std::optional<GlobalSummary> global_;
};

} // namespace pgpr

#endif

#ifndef PGPR_PARALLEL_PARTITION_HPP_
#define PGPR_PARALLEL_PARTITION_HPP_

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <tuple>
#include <vector>

#include "pgpr/centralized.hpp"
#include "pgpr/kernel.hpp"

namespace pgpr {

/// What one worker holds: its training block (with outputs and per-point
/// prior means) and its test block, plus the positions of both in the
/// original datasets.
struct WorkerAssignment {
  int worker_id = 1;
  Dataset local_data;
  Dataset local_tests;
  std::vector<std::size_t> train_positions;
  std::vector<std::size_t> test_positions;
};

namespace detail {

/// Uniform integer in [0, bound) from a 64-bit generator, by rejection.
inline std::uint64_t bounded(std::mt19937_64 &rng, std::uint64_t bound) {
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % bound;
  for (;;) {
    const std::uint64_t v = rng();
    if (v < limit) return v % bound;
  }
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64 &rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(bounded(rng, i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

inline Dataset with_prior(Dataset d, const VectorXd &full_prior,
                          const std::vector<std::size_t> &positions) {
  VectorXd mu(static_cast<Eigen::Index>(positions.size()));
  for (std::size_t k = 0; k < positions.size(); ++k) {
    mu(static_cast<Eigen::Index>(k)) =
        full_prior(static_cast<Eigen::Index>(positions[k]));
  }
  d.prior_mean = std::move(mu);
  return d;
}

inline std::vector<WorkerAssignment>
build_assignments(const Dataset &train, const Dataset &tests,
                  std::vector<std::vector<std::size_t>> train_blocks,
                  std::vector<std::vector<std::size_t>> test_blocks) {
  const ResolvedMeans mu = resolve_means(train, tests);
  std::vector<WorkerAssignment> out(train_blocks.size());
  for (std::size_t m = 0; m < out.size(); ++m) {
    auto &w = out[m];
    std::sort(train_blocks[m].begin(), train_blocks[m].end());
    std::sort(test_blocks[m].begin(), test_blocks[m].end());
    w.worker_id = static_cast<int>(m + 1);
    w.train_positions = std::move(train_blocks[m]);
    w.test_positions = std::move(test_blocks[m]);
    Dataset local = train.subset(w.train_positions);
    local.prior_mean.reset();
    w.local_data = with_prior(std::move(local), mu.train, w.train_positions);
    Dataset lt = tests.subset(w.test_positions);
    lt.prior_mean.reset();
    w.local_tests = with_prior(std::move(lt), mu.test, w.test_positions);
  }
  return out;
}

} // namespace detail

/// Block structure (positions) matching a set of worker assignments, for the
/// centralized predictors.
inline BlockStructure blocks_of(const std::vector<WorkerAssignment> &ws) {
  BlockStructure b;
  for (const auto &w : ws) {
    b.train.push_back(w.train_positions);
    b.test.push_back(w.test_positions);
  }
  return b;
}

/// Shuffles training and test positions with `seed` and deals them into M
/// even blocks; the last block absorbs any remainder.
inline std::vector<WorkerAssignment> partition_random(const Dataset &train,
                                                      const Dataset &tests,
                                                      std::size_t workers,
                                                      std::uint64_t seed) {
  if (workers < 1) {
    throw InvalidArgument("partition: need at least one worker");
  }
  if (workers > train.size()) {
    throw InvalidArgument("partition: more workers than training points");
  }
  train.validate();
  tests.validate();
  std::mt19937_64 rng(seed);
  const auto dperm = detail::shuffled(train.size(), rng);
  const auto uperm = detail::shuffled(tests.size(), rng);
  auto take = [&](const std::vector<std::size_t> &perm) {
    auto blocks = BlockStructure::split(perm.size(), workers);
    for (auto &blk : blocks) {
      for (auto &i : blk) i = perm[i];
    }
    return blocks;
  };
  return detail::build_assignments(train, tests, take(dperm), take(uperm));
}

namespace detail {

/// Capacitated nearest-center assignment: candidate (point, center) pairs
/// are visited by increasing distance and a point goes to the first center
/// that still has room. Points nearest to a full center spill to their next
/// nearest center with spare capacity.
inline std::vector<std::vector<std::size_t>>
assign_to_centers(const MatrixXd &points, const MatrixXd &centers,
                  std::size_t capacity) {
  const auto n = static_cast<std::size_t>(points.rows());
  const auto m = static_cast<std::size_t>(centers.rows());
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  pairs.reserve(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < m; ++c) {
      const double d2 = (points.row(static_cast<Eigen::Index>(i)) -
                         centers.row(static_cast<Eigen::Index>(c)))
                            .squaredNorm();
      pairs.emplace_back(d2, i, c);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<std::vector<std::size_t>> out(m);
  std::vector<bool> placed(n, false);
  std::size_t remaining = n;
  for (const auto &[d2, i, c] : pairs) {
    if (remaining == 0) break;
    if (placed[i] || out[c].size() >= capacity) continue;
    out[c].push_back(i);
    placed[i] = true;
    --remaining;
  }
  return out;
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) {
  return (a + b - 1) / b;
}

} // namespace detail

/// Centers chosen by each worker of a random partition: worker m draws one
/// of its own training points.
inline MatrixXd choose_centers(const std::vector<WorkerAssignment> &base,
                               const Dataset &train, std::uint64_t seed) {
  MatrixXd centers(static_cast<Eigen::Index>(base.size()),
                   static_cast<Eigen::Index>(train.inputs.dim()));
  for (std::size_t m = 0; m < base.size(); ++m) {
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (m + 1)));
    const auto &pos = base[m].train_positions;
    const auto pick = pos[detail::bounded(rng, pos.size())];
    centers.row(static_cast<Eigen::Index>(m)) =
        train.inputs.features.row(static_cast<Eigen::Index>(pick));
  }
  return centers;
}

/// One round of the parallel clustering scheme: start from
/// partition_random, let each worker pick a center from its own data, then
/// send every training and test input to the nearest center whose worker
/// still has room (at most ceil(|D|/M) and ceil(|U|/M) inputs).
inline std::vector<WorkerAssignment> partition_clustered(const Dataset &train,
                                                         const Dataset &tests,
                                                         std::size_t workers,
                                                         std::uint64_t seed) {
  auto base = partition_random(train, tests, workers, seed);
  if (workers == 1) return base;
  const MatrixXd centers = choose_centers(base, train, seed);
  auto dblocks = detail::assign_to_centers(
      train.inputs.features, centers, detail::ceil_div(train.size(), workers));
  std::vector<std::vector<std::size_t>> ublocks(workers);
  if (!tests.empty()) {
    ublocks = detail::assign_to_centers(tests.inputs.features, centers,
                                        detail::ceil_div(tests.size(), workers));
  }
  return detail::build_assignments(train, tests, std::move(dblocks),
                                   std::move(ublocks));
}

} // namespace pgpr

#endif

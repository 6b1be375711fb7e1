#ifndef PGPR_PARALLEL_TRANSPORT_HPP_
#define PGPR_PARALLEL_TRANSPORT_HPP_

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pgpr/errors.hpp"

namespace pgpr {

/// Node ids are worker ids 1..M. The master runs on node 1.
using NodeId = int;
inline constexpr NodeId kMasterNode = 1;

struct MessageRecord {
  std::string phase;
  NodeId sender = 0;
  NodeId receiver = 0;
  std::string tag;
  std::size_t scalar_count = 0;
  std::size_t payload_bytes = 0;
};

struct MessageTotals {
  std::size_t messages = 0;
  std::size_t scalars = 0;
  std::size_t bytes = 0;

  bool operator==(const MessageTotals &) const = default;
};

/// Append-only record of inter-node traffic. Messages a node sends to itself
/// never appear here.
class MessageLog {
public:
  MessageLog() = default;
  MessageLog(const MessageLog &o) : records_(o.records_), phases_(o.phases_) {}
  MessageLog &operator=(const MessageLog &o) {
    if (this != &o) {
      records_ = o.records_;
      phases_ = o.phases_;
    }
    return *this;
  }

  void declare_phase(const std::string &phase) { phases_.insert(phase); }

  void append(MessageRecord r) {
    std::lock_guard<std::mutex> lock(mutex_);
    phases_.insert(r.phase);
    records_.push_back(std::move(r));
  }

  const std::vector<MessageRecord> &records() const { return records_; }
  const std::set<std::string> &phases() const { return phases_; }

  bool has_phase(const std::string &phase) const {
    return phases_.count(phase) > 0;
  }

  MessageTotals totals() const {
    MessageTotals t;
    for (const auto &r : records_) add(t, r);
    return t;
  }

  void clear() {
    records_.clear();
    phases_.clear();
  }

  /// CSV columns: phase, sender, receiver, scalar_count, bytes.
  void write_csv(std::ostream &out) const {
    out << "phase,sender,receiver,scalar_count,bytes\n";
    for (const auto &r : records_) {
      out << r.phase << "," << r.sender << "," << r.receiver << ","
          << r.scalar_count << "," << r.payload_bytes << "\n";
    }
  }

  static void add(MessageTotals &t, const MessageRecord &r) {
    ++t.messages;
    t.scalars += r.scalar_count;
    t.bytes += r.payload_bytes;
  }

  bool operator==(const MessageLog &o) const {
    if (records_.size() != o.records_.size()) return false;
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto &a = records_[i];
      const auto &b = o.records_[i];
      if (a.phase != b.phase || a.sender != b.sender ||
          a.receiver != b.receiver || a.tag != b.tag ||
          a.scalar_count != b.scalar_count ||
          a.payload_bytes != b.payload_bytes) {
        return false;
      }
    }
    return phases_ == o.phases_;
  }

private:
  std::vector<MessageRecord> records_;
  std::set<std::string> phases_;
  std::mutex mutex_;
};

/// Per-phase totals. Throws for a phase the log never declared.
inline MessageTotals message_totals(const MessageLog &log,
                                    const std::string &phase) {
  if (!log.has_phase(phase)) {
    throw InvalidArgument("unknown phase: " + phase);
  }
  MessageTotals t;
  for (const auto &r : log.records()) {
    if (r.phase == phase) MessageLog::add(t, r);
  }
  return t;
}

/// Totals restricted to one message tag within a phase.
inline MessageTotals message_totals(const MessageLog &log,
                                    const std::string &phase,
                                    const std::string &tag) {
  if (!log.has_phase(phase)) {
    throw InvalidArgument("unknown phase: " + phase);
  }
  MessageTotals t;
  for (const auto &r : log.records()) {
    if (r.phase == phase && r.tag == tag) MessageLog::add(t, r);
  }
  return t;
}

struct Message {
  NodeId from = 0;
  NodeId to = 0;
  std::string tag;
  std::vector<double> payload;
};

/// In-process transport between M nodes. Every inter-node send is logged
/// with its size; delivery is direct. Receivers name the sender and tag they
/// expect, so consumption order never depends on arrival order.
class Transport {
public:
  Transport(int nodes, MessageLog &log) : nodes_(nodes), log_(log) {}

  int nodes() const { return nodes_; }

  void set_phase(std::string phase) {
    log_.declare_phase(phase);
    phase_ = std::move(phase);
  }
  const std::string &phase() const { return phase_; }

  /// Between begin_section() and end_section() records are held per
  /// originating node and then logged in ascending node order, so the log
  /// does not depend on thread scheduling.
  void begin_section() {
    std::lock_guard<std::mutex> lock(mutex_);
    staging_ = true;
  }
  void end_section() {
    std::map<NodeId, std::vector<MessageRecord>> staged;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      staging_ = false;
      staged.swap(staged_);
    }
    for (auto &kv : staged)
      for (auto &r : kv.second) log_.append(std::move(r));
  }

  void send(NodeId from, NodeId to, const std::string &tag,
            std::vector<double> payload) {
    check(from);
    check(to);
    if (from != to) {
      record(from, {phase_, from, to, tag, payload.size(),
                    payload.size() * sizeof(double)});
    }
    deliver({from, to, tag, std::move(payload)});
  }

  /// Delivers `payload` from `root` to every other node. Logged as the edges
  /// of a binomial tree rooted at `root`: M-1 messages over ceil(log2 M)
  /// rounds.
  void broadcast(NodeId root, const std::string &tag,
                 const std::vector<double> &payload) {
    check(root);
    std::vector<NodeId> order{root};
    for (NodeId n = 1; n <= nodes_; ++n) {
      if (n != root) order.push_back(n);
    }
    const std::size_t m = order.size();
    for (std::size_t mask = 1; mask < m; mask <<= 1) {
      for (std::size_t r = 0; r < mask && r + mask < m; ++r) {
        record(root, {phase_, order[r], order[r + mask], tag, payload.size(),
                      payload.size() * sizeof(double)});
      }
    }
    for (std::size_t k = 1; k < m; ++k) {
      deliver({root, order[k], tag, payload});
    }
  }

  std::vector<double> recv(NodeId to, NodeId from, const std::string &tag) {
    check(to);
    check(from);
    std::unique_lock<std::mutex> lock(mutex_);
    auto &box = boxes_[to];
    for (;;) {
      auto it = std::find_if(box.begin(), box.end(), [&](const Message &msg) {
        return msg.from == from && msg.tag == tag;
      });
      if (it != box.end()) {
        std::vector<double> out = std::move(it->payload);
        box.erase(it);
        return out;
      }
      cv_.wait(lock);
    }
  }

  /// Number of undelivered messages; zero after a clean run.
  std::size_t pending() const {
    std::lock_guard<std::mutex> lock(mutex_);
    std::size_t n = 0;
    for (const auto &kv : boxes_) n += kv.second.size();
    return n;
  }

private:
  void record(NodeId origin, MessageRecord r) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (staging_) {
        staged_[origin].push_back(std::move(r));
        return;
      }
    }
    log_.append(std::move(r));
  }

  void check(NodeId n) const {
    if (n < 1 || n > nodes_) {
      throw InvalidArgument("unknown node " + std::to_string(n));
    }
  }

  void deliver(Message msg) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      boxes_[msg.to].push_back(std::move(msg));
    }
    cv_.notify_all();
  }

  int nodes_;
  MessageLog &log_;
  std::string phase_ = "unphased";
  std::map<NodeId, std::deque<Message>> boxes_;
  bool staging_ = false;
  std::map<NodeId, std::vector<MessageRecord>> staged_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
};

// Payload packing.

inline std::vector<double> pack(const Eigen::MatrixXd &m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

inline std::vector<double> pack(const Eigen::VectorXd &v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::MatrixXd unpack_matrix(const std::vector<double> &p,
                                     Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(p.size()) != rows * cols) {
    throw DimensionError("message payload has unexpected size");
  }
  return Eigen::Map<const Eigen::MatrixXd>(p.data(), rows, cols);
}

inline Eigen::VectorXd unpack_vector(const std::vector<double> &p) {
  return Eigen::Map<const Eigen::VectorXd>(p.data(),
                                           static_cast<Eigen::Index>(p.size()));
}

} // namespace pgpr

#endif

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "psmr/common.hpp"

namespace psmr {

// A multicast group: either a numbered per-thread group g_1..g_k or the
// distinguished group every worker thread subscribes to.
class GroupId {
 public:
  static GroupId all() { return GroupId(kAllIndex); }
  static GroupId numbered(uint32_t index) { return GroupId(index); }

  bool is_all() const { return index_ == kAllIndex; }
  uint32_t index() const { return index_; }
  // Merge tie-break rank: numbered groups win ties, the shared group loses.
  uint64_t merge_rank() const { return is_all() ? ~0ull : index_; }

  bool operator==(const GroupId& o) const { return index_ == o.index_; }
  bool operator!=(const GroupId& o) const { return index_ != o.index_; }

  std::string str() const { return is_all() ? "all" : std::to_string(index_); }
  static GroupId parse(std::string_view token);

 private:
  static constexpr uint32_t kAllIndex = 0;
  explicit GroupId(uint32_t index) : index_(index) {}
  uint32_t index_;
};

// Ordered set of numbered groups (gamma). Never contains the shared group:
// multi-group addressing is realized by physically routing through it.
class GroupSet {
 public:
  GroupSet() = default;
  explicit GroupSet(std::vector<uint32_t> members);
  static GroupSet single(uint32_t index) { return GroupSet({index}); }
  static GroupSet full(uint32_t k);

  bool empty() const { return members_.empty(); }
  bool singleton() const { return members_.size() == 1; }
  size_t size() const { return members_.size(); }
  bool contains(uint32_t index) const;
  uint32_t min_index() const { return members_.front(); }
  uint32_t max_index() const { return members_.back(); }
  const std::vector<uint32_t>& members() const { return members_; }
  bool intersects(const GroupSet& o) const;
  bool operator==(const GroupSet& o) const { return members_ == o.members_; }

  std::string str() const;

 private:
  std::vector<uint32_t> members_;  // sorted, unique
};

struct StampedMessage {
  std::string payload;
  GroupSet destinations;       // gamma the sender addressed
  GroupId group = GroupId::all();  // stream the message was stamped on
  uint64_t group_seq = 0;      // per-group, app messages only, gapless from 1
  uint64_t merge_ts = 0;       // from the shared logical clock
  uint64_t batch_id = 0;
  bool is_null = false;        // heartbeat, advances merge cursors only
};

// Deterministic merge order over stream heads.
inline bool merge_before(uint64_t ts_a, GroupId a, uint64_t ts_b, GroupId b) {
  if (ts_a != ts_b) return ts_a < ts_b;
  return a.merge_rank() < b.merge_rank();
}

struct FabricOptions {
  uint32_t num_groups = 1;   // k; the shared group is added on top
  size_t batch_limit = 8192;  // bytes, 0 disables batching
  uint32_t null_period = 64;  // stamped messages between idle-group heartbeats
  std::chrono::microseconds idle_null_interval{1000};
  bool background_timer = true;  // heartbeat/flush thread; off for lockstep tests
};

class MulticastFabric;

// Merged, ordered view over a fixed set of group streams. Owned by exactly
// one consumer thread.
class Subscription {
 public:
  // Blocks until the next application message addressed to this subscriber
  // is available; nullopt once the fabric is closed and drained (or aborted).
  std::optional<StampedMessage> deliver();
  const std::vector<GroupId>& groups() const { return groups_; }

 private:
  friend class MulticastFabric;
  Subscription(MulticastFabric& fabric, std::vector<GroupId> groups);

  MulticastFabric& fabric_;
  std::vector<GroupId> groups_;
  std::vector<uint64_t> cursors_;         // per subscribed group
  std::vector<uint32_t> numbered_;        // numbered subset of groups_
};

// In-process atomic multicast: one sequencer per group, one shared monotone
// logical clock, deterministic merge at subscribers. Messages addressed to
// several groups are physically routed through the shared group.
class MulticastFabric {
 public:
  explicit MulticastFabric(FabricOptions opts);
  ~MulticastFabric();

  uint32_t num_groups() const { return k_; }

  // Stamps (or batches) the payload so every subscriber of each destination
  // group delivers it exactly once.
  void multicast(const GroupSet& destinations, std::string payload);

  // Direct stamping path; bypasses batching. Exposed for tests.
  StampedMessage stamp(GroupId group, std::string payload, const GroupSet& destinations);

  // Heartbeats every group that has not stamped since the last checkpoint,
  // so merge cursors keep advancing on idle streams.
  void emit_nulls();

  void flush();  // flush all pending batches
  void close();  // flush, mark end-of-stream, wake subscribers
  void abort();  // wake subscribers immediately, undelivered messages dropped

  std::unique_ptr<Subscription> subscribe(std::vector<GroupId> groups);

  uint64_t null_count() const { return nulls_emitted_.load(); }
  uint64_t stamp_count() const { return stamp_counter_.load(); }

 private:
  friend class Subscription;

  struct Stream {
    mutable std::mutex mu;
    std::condition_variable cv;
    std::deque<StampedMessage> log;
    uint64_t next_seq = 1;
    std::vector<std::pair<std::string, GroupSet>> pending;  // unflushed batch
    size_t pending_bytes = 0;
    std::atomic<bool> stamped_since_checkpoint{false};
  };

  Stream& stream(GroupId g);
  const Stream& stream(GroupId g) const;
  void append(Stream& s, GroupId g, std::string payload, const GroupSet& dests,
              bool is_null, uint64_t batch_id);
  void flush_stream(GroupId g);
  void after_stamp();
  void timer_loop();

  uint32_t k_;
  size_t batch_limit_;
  uint32_t null_period_;
  std::chrono::microseconds idle_null_interval_;
  std::vector<std::unique_ptr<Stream>> streams_;  // [0]=shared, [1..k]=numbered
  std::atomic<uint64_t> clock_{0};
  std::atomic<uint64_t> stamp_counter_{0};
  std::atomic<uint64_t> nulls_emitted_{0};
  std::atomic<uint64_t> batch_counter_{0};
  std::atomic<bool> closing_{false};
  std::atomic<bool> closed_{false};
  std::atomic<bool> aborted_{false};
  std::mutex null_mu_;  // serializes heartbeat rounds
  std::thread timer_;
  std::mutex timer_mu_;
  std::condition_variable timer_cv_;
};

// One surfaced delivery, as exported to the order auditor.
struct DeliveryRecord {
  uint32_t replica = 0;
  uint32_t thread = 0;
  GroupId group = GroupId::all();
  uint64_t group_seq = 0;
  uint64_t merge_ts = 0;
  uint64_t payload_hash = 0;

  std::string to_line() const;
  static DeliveryRecord parse_line(const std::string& line);
};

}  // namespace psmr

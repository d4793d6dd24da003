#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psmr/engine.hpp"
#include "psmr/kvstore.hpp"

namespace psmr {

enum class Verdict { pass, violation, inconclusive };
inline int verdict_exit_code(Verdict v) {
  return v == Verdict::pass ? 0 : v == Verdict::violation ? 1 : 2;
}
std::string verdict_name(Verdict v);

// Sequential specification of the key-value service over a sorted map.
// Doubles as the oracle implementation in tests.
struct KvSequentialSpec {
  std::map<int64_t, uint64_t> initial;

  static KvSequentialSpec preloaded(uint64_t n);
  std::string apply(std::map<int64_t, uint64_t>& state, CommandId cid,
                    std::string_view input) const;
  static int64_t key_of(CommandId cid, std::string_view input);
};

struct LinCheckResult {
  Verdict verdict = Verdict::pass;
  std::vector<HistoryEvent> witness;         // valid sequential order on pass
  std::vector<HistoryEvent> failing_prefix;  // minimal non-linearizable prefix
  std::string detail;
  uint64_t nodes = 0;
};

// Searches for a permutation respecting real-time order and the sequential
// specification. Commands touch a single key each, so the history is checked
// key by key (linearizability is compositional) and a global witness is
// stitched back from per-key linearization points.
LinCheckResult check_linearizable(const std::vector<HistoryEvent>& history,
                                  const KvSequentialSpec& spec, uint64_t node_budget = 4000000);

struct OrderAuditResult {
  Verdict verdict = Verdict::pass;
  std::string detail;
  std::vector<std::string> cycle;  // message ids forming a delivery-order cycle
};

// Builds the pairwise delivery-precedence relation over messages delivered
// by at least two subscriptions and checks it is acyclic.
OrderAuditResult audit_order(const std::vector<DeliveryRecord>& records);

struct ReplicaResponse {
  ClientId client = 0;
  ClientSeq seq = 0;
  uint32_t replica = 0;
  std::string output;
};

struct DeterminismResult {
  Verdict verdict = Verdict::pass;
  std::string detail;
};

// All replica state digests equal, and for every request a byte-identical
// output from every replica.
DeterminismResult check_determinism(const std::vector<uint64_t>& digests,
                                    const std::vector<ReplicaResponse>& responses,
                                    uint32_t replicas);

struct DeadlockResult {
  bool drained = false;
  std::string dump;
};

// The workload must be fully submitted and the engine's input closed; the
// engine either drains within the timeout or its blocked-thread state is
// dumped.
DeadlockResult detect_deadlock(Engine& engine, std::chrono::milliseconds timeout);

// Run artifact files shared by the bench writer, the verify subcommand and
// the tests.
struct RunArtifacts {
  std::vector<ExecRecord> execution;
  std::vector<DeliveryRecord> delivery;
  std::vector<uint64_t> digests;
  std::vector<ReplicaResponse> responses;
  std::vector<HistoryEvent> history;
  std::vector<std::string> snapshots;  // per replica, sorted key/value lines
  uint32_t replicas = 0;
  uint64_t preload = 0;
};

void write_artifacts(const std::string& dir, const RunArtifacts& a);
RunArtifacts read_artifacts(const std::string& dir);

}  // namespace psmr

#pragma once

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "psmr/engine.hpp"
#include "psmr/verify.hpp"

namespace psmr {

struct MixSpec {
  double read = 1.0;
  double update = 0.0;
  double insert = 0.0;
  double del = 0.0;

  double sum() const { return read + update + insert + del; }
  std::string str() const;
  static MixSpec parse(std::string_view text);  // "read=0.5,update=0.5"
};

enum class KeyDist { uniform, zipf };
enum class CgRule { partition, broadcast };

struct WorkloadSpec {
  EngineKind engine = EngineKind::psmr;
  uint32_t threads = 4;
  uint32_t replicas = 2;
  uint32_t clients = 8;
  uint32_t window = 50;
  uint64_t commands_per_client = 1000;
  double duration_s = 0;  // >0: issue until the deadline instead of a count
  uint64_t key_space = 100000;
  uint64_t preload = 100000;
  KeyDist dist = KeyDist::uniform;
  double zipf_exponent = 1.0;
  MixSpec mix;
  std::optional<double> dependent_pct;  // shorthand: inserts+deletes share
  uint64_t seed = 1;
  uint32_t fanout = 64;
  uint64_t service_time_us = 0;
  ServiceWork service_work = ServiceWork::wait;
  size_t batch_limit = 0;  // fabric batching off by default for benchmarks
  uint32_t null_period = 64;
  uint32_t idle_null_us = 1000;
  CgRule cg_rule = CgRule::partition;
  bool record_history = false;
  bool record_snapshots = false;
  bool verify_run = true;
  bool debug_recompute_gamma = false;
  FaultPlan faults;
  std::chrono::milliseconds drain_timeout{30000};

  void validate() const;
  MixSpec effective_mix() const;
};

struct GenCommand {
  CommandId cid = kKvRead;
  int64_t key = 0;
  uint64_t value = 0;
};

class ZipfSampler {
 public:
  ZipfSampler(uint64_t n, double exponent);
  uint64_t sample(std::mt19937_64& rng) const;  // 0-based rank
  double pmf(uint64_t rank0) const;

 private:
  std::vector<double> cdf_;
};

// Seeded per-client command stream; identical spec and seed replay the same
// stream regardless of scheduling.
class WorkloadGenerator {
 public:
  WorkloadGenerator(const WorkloadSpec& spec, ClientId client,
                    std::shared_ptr<const ZipfSampler> zipf);
  GenCommand next();

 private:
  MixSpec mix_;
  uint64_t key_space_;
  KeyDist dist_;
  std::shared_ptr<const ZipfSampler> zipf_;
  std::mt19937_64 rng_;
};

std::vector<GenCommand> generate_stream(const WorkloadSpec& spec, ClientId client, uint64_t count);

struct RunMetrics {
  double throughput_cps = 0;
  double per_thread_throughput = 0;
  double lat_mean_us = 0;
  double lat_p50_us = 0;
  double lat_p99_us = 0;
  std::vector<double> latency_samples_us;  // post-warmup, submission order
  std::vector<ThreadCounter> per_thread;
  uint64_t issued = 0;
  uint64_t completed = 0;
  double elapsed_s = 0;  // measured window after warm-up
  bool drained = false;
  bool verified = false;
  std::string taint;  // non-empty when metrics cannot be trusted
};

struct RunResult {
  RunMetrics metrics;
  RunArtifacts artifacts;
  EngineCounters counters;
  std::string deadlock_dump;  // non-empty when the engine wedged
};

// Builds fabric + engine + replicas + clients, executes the workload to
// completion, verifies the run and returns metrics plus all artifacts.
RunResult run_workload(const WorkloadSpec& spec);

struct SweepPoint {
  uint32_t threads = 0;
  RunMetrics metrics;
};

std::vector<SweepPoint> sweep_threads(WorkloadSpec base, const std::vector<uint32_t>& thread_counts);

std::string metrics_csv_header();
std::string metrics_csv_row(const WorkloadSpec& spec, const RunMetrics& m);
std::string metrics_json(const std::vector<std::pair<WorkloadSpec, RunMetrics>>& runs);
void write_latency_cdf(std::ostream& out, const RunMetrics& m);

}  // namespace psmr

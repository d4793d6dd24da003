#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "psmr/dependency.hpp"
#include "psmr/multicast.hpp"
#include "psmr/request.hpp"
#include "psmr/service.hpp"

namespace psmr {

enum class EngineKind { psmr, spsmr, smr, norep };
std::string engine_name(EngineKind kind);
EngineKind parse_engine(std::string_view name);

// One executed command, as exported to the verifiers and the bench.
struct ExecRecord {
  enum class Mode : uint8_t { parallel, synchronous, sequential, scheduled };
  uint32_t replica = 0;
  uint32_t thread = 0;
  ClientId client = 0;
  ClientSeq seq = 0;
  CommandId cid = 0;
  uint64_t t_start = 0;
  uint64_t t_end = 0;
  Mode mode = Mode::parallel;

  std::string to_line() const;
  static ExecRecord parse_line(const std::string& line);
};

struct ThreadCounter {
  uint32_t replica = 0;
  uint32_t thread = 0;
  uint64_t delivered = 0;
  uint64_t executed = 0;
};

struct EngineCounters {
  std::vector<ThreadCounter> per_thread;
  // Barrier accounting, for the signal-conservation check: per synchronous
  // command exactly |tau|-1 arrivals reach the executor and |tau|-1
  // releases leave it.
  uint64_t arrivals_sent = 0;
  uint64_t arrivals_collected = 0;
  uint64_t releases_sent = 0;
  uint64_t releases_collected = 0;
};

// Test-only fault hooks; all disabled by default.
struct FaultPlan {
  int disagree_replica = -1;  // thread 1 there resolves the executor as max-index
  int skip_replica = -1;      // that replica silently drops one delivery...
  uint64_t skip_nth = 0;      // ...the nth one (1-based)
  uint64_t jitter_seed = 0;   // randomized yields around barrier operations
};

class ClientMailbox {
 public:
  void push(Response r);
  std::optional<Response> pop(std::chrono::milliseconds timeout);
  void abort();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Response> queue_;
  bool aborted_ = false;
};

// One-to-one response path back to the clients.
class ResponseRouter {
 public:
  explicit ResponseRouter(uint32_t num_clients);
  ClientMailbox& mailbox(ClientId id);
  void deliver(Response r) { mailbox(r.client_id).push(std::move(r)); }
  void abort_all();

 private:
  std::vector<std::unique_ptr<ClientMailbox>> boxes_;
};

// Direct client->server path for the non-replicated baseline.
class RequestQueue {
 public:
  void push(Request r);
  std::optional<Request> pop();  // blocks; nullopt once closed and drained
  void close();
  void abort();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Request> queue_;
  bool closed_ = false;
  bool aborted_ = false;
};

struct HistoryEvent {
  ClientId client = 0;
  ClientSeq seq = 0;
  CommandId cid = 0;
  std::string input;
  std::string output;
  uint64_t invoke_ns = 0;
  uint64_t response_ns = 0;

  std::string to_line() const;
  static HistoryEvent parse_line(const std::string& line);
};

// Issues commands on behalf of one client: computes gamma, multicasts, and
// returns the first replica response, discarding later duplicates.
class ClientProxy {
 public:
  ClientProxy(ClientId id, EngineKind kind, CGFunction cg, MulticastFabric* fabric,
              RequestQueue* direct, ResponseRouter& router, const RunClock& clock);

  std::string execute(CommandId cid, std::string input);  // one outstanding command
  ClientSeq submit(CommandId cid, std::string input);

  struct Completion {
    ClientSeq seq = 0;
    CommandId cid = 0;
    std::string output;
    uint64_t invoke_ns = 0;
    uint64_t response_ns = 0;
  };
  // First response for any outstanding command; duplicates from other
  // replicas are absorbed silently.
  std::optional<Completion> await_next(std::chrono::milliseconds timeout);
  // Absorb replica duplicates still in flight after all commands completed.
  void drain_duplicates(uint64_t expected_total, std::chrono::milliseconds timeout);

  size_t outstanding() const { return pending_.size(); }
  ClientId id() const { return id_; }
  uint64_t issued() const { return next_seq_; }
  const std::vector<HistoryEvent>& history() const { return history_; }
  // Every raw replica response, for the cross-replica determinism check.
  const std::unordered_map<ClientSeq, std::vector<std::pair<uint32_t, std::string>>>&
  replica_outputs() const {
    return replica_outputs_;
  }
  const GroupSet& last_gamma() const { return last_gamma_; }

 private:
  struct PendingOp {
    CommandId cid;
    std::string input;
    uint64_t invoke_ns;
  };

  ClientId id_;
  EngineKind kind_;
  CGFunction cg_;
  MulticastFabric* fabric_;
  RequestQueue* direct_;
  ResponseRouter& router_;
  const RunClock& clock_;
  ClientSeq next_seq_ = 0;
  std::unordered_map<ClientSeq, PendingOp> pending_;
  std::vector<HistoryEvent> history_;
  std::unordered_map<ClientSeq, std::vector<std::pair<uint32_t, std::string>>> replica_outputs_;
  GroupSet last_gamma_;
};

// Common surface of the four execution engines.
class Engine {
 public:
  virtual ~Engine() = default;
  virtual void start() = 0;
  // Waits until every engine thread exited (input must be closed first).
  virtual bool join(std::chrono::milliseconds timeout) = 0;
  virtual void abort() = 0;
  virtual std::vector<uint64_t> state_digests() const = 0;
  virtual std::vector<ExecRecord> execution_log() const = 0;
  virtual std::vector<DeliveryRecord> delivery_log() const = 0;
  virtual EngineCounters counters() const = 0;
  virtual std::string blocked_dump() const = 0;
  virtual uint32_t replicas() const = 0;
};

struct PsmrOptions {
  uint32_t threads = 1;
  uint32_t replicas = 2;
  // Recompute gamma server-side with this deterministic rule and compare
  // with the carried one.
  std::optional<CGFunction> recompute_cg;
  FaultPlan faults;
};

// Parallel engine: per-thread subscriptions {g_i, all}; single-group
// commands execute immediately, multi-group commands are serialized through
// barrier signals with the minimum-index destination thread executing.
class PsmrEngine : public Engine {
 public:
  PsmrEngine(MulticastFabric& fabric, std::vector<std::unique_ptr<Service>> services,
             ResponseRouter& router, const RunClock& clock, PsmrOptions opts);
  ~PsmrEngine() override;

  void start() override;
  bool join(std::chrono::milliseconds timeout) override;
  void abort() override;
  std::vector<uint64_t> state_digests() const override;
  std::vector<ExecRecord> execution_log() const override;
  std::vector<DeliveryRecord> delivery_log() const override;
  EngineCounters counters() const override;
  std::string blocked_dump() const override;
  uint32_t replicas() const override { return opts_.replicas; }

 private:
  struct SignalSlot {
    std::mutex mu;
    std::condition_variable cv;
    uint32_t count = 0;
    std::atomic<uint64_t> sent{0};
  };
  struct WorkerSlot;

  void worker_loop(uint32_t replica, uint32_t thread_ix);
  SignalSlot& slot(uint32_t replica, uint32_t from, uint32_t to);
  void signal(SignalSlot& s);
  bool wait_signal(SignalSlot& s, WorkerSlot& me, uint32_t peer);

  MulticastFabric& fabric_;
  std::vector<std::unique_ptr<Service>> services_;
  ResponseRouter& router_;
  const RunClock& clock_;
  PsmrOptions opts_;
  std::vector<std::unique_ptr<SignalSlot>> slots_;  // replica * k * k
  std::vector<std::unique_ptr<WorkerSlot>> workers_;
  std::vector<std::thread> threads_;
  std::atomic<size_t> exited_{0};
  std::mutex exit_mu_;
  std::condition_variable exit_cv_;
  std::atomic<bool> aborted_{false};
};

struct SmrOptions {
  uint32_t threads = 1;  // k carried in requests; execution is single-threaded
  uint32_t replicas = 2;
  FaultPlan faults;
};

// Classical engine: one thread per replica executes the single totally
// ordered stream.
class SmrEngine : public Engine {
 public:
  SmrEngine(MulticastFabric& fabric, std::vector<std::unique_ptr<Service>> services,
            ResponseRouter& router, const RunClock& clock, SmrOptions opts);
  ~SmrEngine() override;

  void start() override;
  bool join(std::chrono::milliseconds timeout) override;
  void abort() override;
  std::vector<uint64_t> state_digests() const override;
  std::vector<ExecRecord> execution_log() const override;
  std::vector<DeliveryRecord> delivery_log() const override;
  EngineCounters counters() const override;
  std::string blocked_dump() const override;
  uint32_t replicas() const override { return opts_.replicas; }

 private:
  struct ReplicaState;
  void replica_loop(uint32_t replica);

  MulticastFabric& fabric_;
  std::vector<std::unique_ptr<Service>> services_;
  ResponseRouter& router_;
  const RunClock& clock_;
  SmrOptions opts_;
  std::vector<std::unique_ptr<ReplicaState>> states_;
  std::vector<std::thread> threads_;
  std::atomic<size_t> exited_{0};
  std::mutex exit_mu_;
  std::condition_variable exit_cv_;
  std::atomic<bool> aborted_{false};
};

struct ScheduledOptions {
  uint32_t workers = 1;
  uint32_t replicas = 2;
  bool direct = false;  // no-rep: feed from a request queue instead of the fabric
  FaultPlan faults;
};

// Semi-parallel engine: one scheduler per replica consumes the single
// ordered stream and dispatches independent commands to worker threads;
// a command dependent on anything in flight forces a full quiesce first.
// The non-replicated baseline runs the same scheduler without the fabric.
class ScheduledEngine : public Engine {
 public:
  ScheduledEngine(MulticastFabric* fabric, const CDep& cdep,
                  std::vector<std::unique_ptr<Service>> services, ResponseRouter& router,
                  const RunClock& clock, ScheduledOptions opts);
  ~ScheduledEngine() override;

  void start() override;
  bool join(std::chrono::milliseconds timeout) override;
  void abort() override;
  std::vector<uint64_t> state_digests() const override;
  std::vector<ExecRecord> execution_log() const override;
  std::vector<DeliveryRecord> delivery_log() const override;
  EngineCounters counters() const override;
  std::string blocked_dump() const override;
  uint32_t replicas() const override { return opts_.replicas; }

  RequestQueue& request_queue();  // no-rep input
  void close_direct_input();

 private:
  struct InFlight;
  struct WorkerState;
  struct ReplicaState;

  void scheduler_loop(uint32_t replica);
  void worker_loop(uint32_t replica, uint32_t worker_ix);

  MulticastFabric* fabric_;
  const CDep& cdep_;
  std::vector<std::unique_ptr<Service>> services_;
  ResponseRouter& router_;
  const RunClock& clock_;
  ScheduledOptions opts_;
  std::unique_ptr<RequestQueue> direct_queue_;
  std::vector<std::unique_ptr<ReplicaState>> states_;
  std::vector<std::thread> threads_;
  std::atomic<size_t> exited_{0};
  std::mutex exit_mu_;
  std::condition_variable exit_cv_;
  std::atomic<bool> aborted_{false};
};

struct EngineSetup {
  EngineKind kind = EngineKind::psmr;
  uint32_t threads = 1;
  uint32_t replicas = 2;
  std::optional<CGFunction> recompute_cg;
  FaultPlan faults;
};

std::unique_ptr<Engine> make_engine(const EngineSetup& setup, MulticastFabric* fabric,
                                    const CDep& cdep,
                                    std::vector<std::unique_ptr<Service>> services,
                                    ResponseRouter& router, const RunClock& clock);

}  // namespace psmr

#include "psmr/engine.hpp"

#include <algorithm>
#include <cassert>
#include <random>
#include <sstream>

namespace psmr {

std::string engine_name(EngineKind kind) {
  switch (kind) {
    case EngineKind::psmr: return "psmr";
    case EngineKind::spsmr: return "spsmr";
    case EngineKind::smr: return "smr";
    case EngineKind::norep: return "norep";
  }
  return "?";
}

EngineKind parse_engine(std::string_view name) {
  if (name == "psmr") return EngineKind::psmr;
  if (name == "spsmr") return EngineKind::spsmr;
  if (name == "smr") return EngineKind::smr;
  if (name == "norep") return EngineKind::norep;
  throw ConfigError("unknown engine '" + std::string(name) + "'");
}

namespace {
const char* mode_token(ExecRecord::Mode m) {
  switch (m) {
    case ExecRecord::Mode::parallel: return "par";
    case ExecRecord::Mode::synchronous: return "syn";
    case ExecRecord::Mode::sequential: return "seq";
    case ExecRecord::Mode::scheduled: return "sch";
  }
  return "?";
}

ExecRecord::Mode parse_mode(const std::string& tok) {
  if (tok == "par") return ExecRecord::Mode::parallel;
  if (tok == "syn") return ExecRecord::Mode::synchronous;
  if (tok == "seq") return ExecRecord::Mode::sequential;
  if (tok == "sch") return ExecRecord::Mode::scheduled;
  throw IoError("bad execution mode '" + tok + "'");
}

enum Phase : uint8_t {
  kIdle = 0,
  kDelivering,
  kExecuting,
  kWaitArrivals,
  kWaitRelease,
  kQueuePop,
  kQuiesce,
  kDone,
};

const char* phase_name(uint8_t p) {
  switch (p) {
    case kIdle: return "idle";
    case kDelivering: return "delivering";
    case kExecuting: return "executing";
    case kWaitArrivals: return "waiting-for-arrival-signals";
    case kWaitRelease: return "waiting-for-release-signal";
    case kQueuePop: return "waiting-for-work";
    case kQuiesce: return "quiescing";
    case kDone: return "exited";
  }
  return "?";
}
}  // namespace

std::string ExecRecord::to_line() const {
  std::ostringstream os;
  os << replica << ' ' << thread << ' ' << client << ' ' << seq << ' ' << cid << ' ' << t_start
     << ' ' << t_end << ' ' << mode_token(mode);
  return os.str();
}

ExecRecord ExecRecord::parse_line(const std::string& line) {
  std::istringstream is(line);
  ExecRecord r;
  std::string mode;
  if (!(is >> r.replica >> r.thread >> r.client >> r.seq >> r.cid >> r.t_start >> r.t_end >> mode))
    throw IoError("bad execution record: " + line);
  r.mode = parse_mode(mode);
  return r;
}

std::string HistoryEvent::to_line() const {
  std::ostringstream os;
  os << client << ' ' << seq << ' ' << cid << ' ' << (input.empty() ? "-" : to_hex(input)) << ' '
     << (output.empty() ? "-" : to_hex(output)) << ' ' << invoke_ns << ' ' << response_ns;
  return os.str();
}

HistoryEvent HistoryEvent::parse_line(const std::string& line) {
  std::istringstream is(line);
  HistoryEvent e;
  std::string in, out;
  if (!(is >> e.client >> e.seq >> e.cid >> in >> out >> e.invoke_ns >> e.response_ns))
    throw IoError("bad history record: " + line);
  e.input = in == "-" ? "" : from_hex(in);
  e.output = out == "-" ? "" : from_hex(out);
  return e;
}

void ClientMailbox::push(Response r) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    queue_.push_back(std::move(r));
  }
  cv_.notify_all();
}

std::optional<Response> ClientMailbox::pop(std::chrono::milliseconds timeout) {
  std::unique_lock<std::mutex> lk(mu_);
  if (!cv_.wait_for(lk, timeout, [&] { return !queue_.empty() || aborted_; })) return std::nullopt;
  if (queue_.empty()) return std::nullopt;  // aborted
  Response r = std::move(queue_.front());
  queue_.pop_front();
  return r;
}

void ClientMailbox::abort() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    aborted_ = true;
  }
  cv_.notify_all();
}

ResponseRouter::ResponseRouter(uint32_t num_clients) {
  boxes_.reserve(num_clients);
  for (uint32_t i = 0; i < num_clients; i++) boxes_.push_back(std::make_unique<ClientMailbox>());
}

ClientMailbox& ResponseRouter::mailbox(ClientId id) {
  if (id >= boxes_.size()) throw ConfigError("client id out of range");
  return *boxes_[id];
}

void ResponseRouter::abort_all() {
  for (auto& b : boxes_) b->abort();
}

void RequestQueue::push(Request r) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (closed_) throw UnavailableError("request queue closed");
    queue_.push_back(std::move(r));
  }
  cv_.notify_all();
}

std::optional<Request> RequestQueue::pop() {
  std::unique_lock<std::mutex> lk(mu_);
  cv_.wait(lk, [&] { return !queue_.empty() || closed_ || aborted_; });
  if (aborted_ || queue_.empty()) return std::nullopt;
  Request r = std::move(queue_.front());
  queue_.pop_front();
  return r;
}

void RequestQueue::close() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

void RequestQueue::abort() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    aborted_ = true;
    closed_ = true;
  }
  cv_.notify_all();
}

ClientProxy::ClientProxy(ClientId id, EngineKind kind, CGFunction cg, MulticastFabric* fabric,
                         RequestQueue* direct, ResponseRouter& router, const RunClock& clock)
    : id_(id), kind_(kind), cg_(std::move(cg)), fabric_(fabric), direct_(direct), router_(router),
      clock_(clock) {
  if (kind_ == EngineKind::norep) {
    if (!direct_) throw ConfigError("no-rep proxy needs a request queue");
  } else if (!fabric_) {
    throw ConfigError("replicated proxy needs a fabric");
  }
}

ClientSeq ClientProxy::submit(CommandId cid, std::string input) {
  ClientSeq seq = next_seq_++;
  // The engine kind decides addressing: only the parallel engine routes by
  // the C-G function, the single-stream engines order everything together.
  GroupSet gamma = kind_ == EngineKind::psmr ? cg_.groups_for(cid, input)
                                             : GroupSet::full(cg_.k());
  last_gamma_ = gamma;
  Request req{id_, seq, cid, gamma, input};
  pending_.emplace(seq, PendingOp{cid, std::move(input), clock_.now_ns()});
  if (kind_ == EngineKind::norep)
    direct_->push(std::move(req));
  else
    fabric_->multicast(gamma, req.encode());
  return seq;
}

std::optional<ClientProxy::Completion> ClientProxy::await_next(std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    auto r = router_.mailbox(id_).pop(left);
    if (!r) return std::nullopt;
    replica_outputs_[r->client_seq].emplace_back(r->replica, r->output);
    auto it = pending_.find(r->client_seq);
    if (it == pending_.end()) continue;  // later replica's duplicate
    Completion c;
    c.seq = r->client_seq;
    c.cid = it->second.cid;
    c.output = std::move(r->output);
    c.invoke_ns = it->second.invoke_ns;
    c.response_ns = clock_.now_ns();
    history_.push_back({id_, c.seq, c.cid, std::move(it->second.input), c.output, c.invoke_ns,
                        c.response_ns});
    pending_.erase(it);
    return c;
  }
}

void ClientProxy::drain_duplicates(uint64_t expected_total, std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  auto total = [&] {
    uint64_t n = 0;
    for (const auto& [_, v] : replica_outputs_) n += v.size();
    return n;
  };
  while (total() < expected_total) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return;
    auto r = router_.mailbox(id_).pop(left);
    if (!r) return;
    replica_outputs_[r->client_seq].emplace_back(r->replica, std::move(r->output));
  }
}

std::string ClientProxy::execute(CommandId cid, std::string input) {
  if (!pending_.empty()) throw ConfigError("execute() requires no outstanding command");
  ClientSeq seq = submit(cid, std::move(input));
  auto c = await_next(std::chrono::milliseconds(60000));
  if (!c || c->seq != seq) throw UnavailableError("no response before shutdown");
  return c->output;
}

// ---------------------------------------------------------------------------
// P-SMR

struct PsmrEngine::WorkerSlot {
  uint32_t replica = 0;
  uint32_t thread_ix = 0;
  std::vector<ExecRecord> log;
  std::vector<DeliveryRecord> deliveries;
  uint64_t delivered = 0;
  uint64_t executed = 0;
  uint64_t arrivals_sent = 0;
  uint64_t arrivals_collected = 0;
  uint64_t releases_sent = 0;
  uint64_t releases_collected = 0;
  std::atomic<uint8_t> phase{kIdle};
  std::atomic<uint32_t> peer{0};
};

PsmrEngine::PsmrEngine(MulticastFabric& fabric, std::vector<std::unique_ptr<Service>> services,
                       ResponseRouter& router, const RunClock& clock, PsmrOptions opts)
    : fabric_(fabric), services_(std::move(services)), router_(router), clock_(clock),
      opts_(std::move(opts)) {
  if (opts_.threads < 1 || opts_.threads != fabric_.num_groups())
    throw ConfigError("thread count must match the fabric's group count");
  if (services_.size() != opts_.replicas) throw ConfigError("one service instance per replica");
  uint32_t k = opts_.threads;
  slots_.resize(static_cast<size_t>(opts_.replicas) * k * k);
  for (auto& s : slots_) s = std::make_unique<SignalSlot>();
  workers_.resize(static_cast<size_t>(opts_.replicas) * k);
  for (uint32_t r = 0; r < opts_.replicas; r++)
    for (uint32_t t = 1; t <= k; t++) {
      auto w = std::make_unique<WorkerSlot>();
      w->replica = r;
      w->thread_ix = t;
      workers_[static_cast<size_t>(r) * k + (t - 1)] = std::move(w);
    }
}

PsmrEngine::~PsmrEngine() {
  abort();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
}

PsmrEngine::SignalSlot& PsmrEngine::slot(uint32_t replica, uint32_t from, uint32_t to) {
  uint32_t k = opts_.threads;
  return *slots_[(static_cast<size_t>(replica) * k + (from - 1)) * k + (to - 1)];
}

void PsmrEngine::signal(SignalSlot& s) {
  {
    std::lock_guard<std::mutex> lk(s.mu);
    s.count++;
    assert(s.count <= 1 && "per-pair signal slot overflow");
  }
  s.sent.fetch_add(1, std::memory_order_relaxed);
  s.cv.notify_all();
}

bool PsmrEngine::wait_signal(SignalSlot& s, WorkerSlot& me, uint32_t peer) {
  me.peer.store(peer, std::memory_order_relaxed);
  std::unique_lock<std::mutex> lk(s.mu);
  s.cv.wait(lk, [&] { return s.count > 0 || aborted_.load(); });
  if (aborted_.load()) return false;
  s.count--;
  return true;
}

void PsmrEngine::start() {
  for (uint32_t r = 0; r < opts_.replicas; r++)
    for (uint32_t t = 1; t <= opts_.threads; t++)
      threads_.emplace_back([this, r, t] {
        worker_loop(r, t);
        exited_.fetch_add(1);
        std::lock_guard<std::mutex> lk(exit_mu_);
        exit_cv_.notify_all();
      });
}

void PsmrEngine::worker_loop(uint32_t replica, uint32_t thread_ix) {
  uint32_t k = opts_.threads;
  WorkerSlot& me = *workers_[static_cast<size_t>(replica) * k + (thread_ix - 1)];
  auto sub = fabric_.subscribe({GroupId::numbered(thread_ix), GroupId::all()});
  Service& service = *services_[replica];

  std::mt19937_64 jitter(opts_.faults.jitter_seed ^ (uint64_t(replica) << 32) ^ thread_ix);
  bool jitter_on = opts_.faults.jitter_seed != 0;
  auto maybe_jitter = [&] {
    if (jitter_on && (jitter() & 7) == 0)
      std::this_thread::sleep_for(std::chrono::microseconds(jitter() % 30));
  };

  for (;;) {
    me.phase.store(kDelivering, std::memory_order_relaxed);
    auto msg = sub->deliver();
    if (!msg) break;
    me.delivered++;
    me.deliveries.push_back({replica, thread_ix, msg->group, msg->group_seq, msg->merge_ts,
                             fnv1a(msg->payload)});
    Request req = Request::decode(msg->payload);
    const GroupSet& gamma = req.gamma;
    if (opts_.recompute_cg && opts_.recompute_cg->deterministic()) {
      GroupSet again = opts_.recompute_cg->groups_for(req.cid, req.input);
      if (!(again == gamma))
        throw std::logic_error("carried gamma disagrees with deterministic C-G");
    }

    auto respond = [&](std::string output) {
      router_.deliver({req.client_id, req.client_seq, replica, std::move(output)});
    };
    auto run_cmd = [&](ExecRecord::Mode mode) {
      me.phase.store(kExecuting, std::memory_order_relaxed);
      uint64_t t0 = clock_.now_ns();
      std::string out = service.execute(req.cid, req.input);
      uint64_t t1 = clock_.now_ns();
      respond(std::move(out));
      me.log.push_back({replica, thread_ix, req.client_id, req.client_seq, req.cid, t0, t1, mode});
      me.executed++;
    };

    if (gamma.singleton()) {
      run_cmd(ExecRecord::Mode::parallel);
      continue;
    }

    // Synchronous mode: the minimum-index destination thread executes after
    // collecting one signal from every other destination thread.
    uint32_t e = gamma.min_index();
    if (replica == static_cast<uint32_t>(opts_.faults.disagree_replica) && thread_ix == 1)
      e = gamma.max_index();

    if (thread_ix == e) {
      bool ok = true;
      for (uint32_t j : gamma.members()) {
        if (j == e) continue;
        maybe_jitter();
        me.phase.store(kWaitArrivals, std::memory_order_relaxed);
        if (!wait_signal(slot(replica, j, e), me, j)) {
          ok = false;
          break;
        }
        me.arrivals_collected++;
      }
      if (!ok) break;
      run_cmd(ExecRecord::Mode::synchronous);
      for (uint32_t j : gamma.members()) {
        if (j == e) continue;
        maybe_jitter();
        signal(slot(replica, e, j));
        me.releases_sent++;
      }
    } else {
      maybe_jitter();
      signal(slot(replica, thread_ix, e));
      me.arrivals_sent++;
      me.phase.store(kWaitRelease, std::memory_order_relaxed);
      if (!wait_signal(slot(replica, e, thread_ix), me, e)) break;
      me.releases_collected++;
    }
  }
  me.phase.store(kDone, std::memory_order_relaxed);
}

bool PsmrEngine::join(std::chrono::milliseconds timeout) {
  std::unique_lock<std::mutex> lk(exit_mu_);
  bool ok = exit_cv_.wait_for(lk, timeout, [&] { return exited_.load() == threads_.size(); });
  if (!ok) return false;
  lk.unlock();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
  return true;
}

void PsmrEngine::abort() {
  aborted_.store(true);
  fabric_.abort();
  for (auto& s : slots_) {
    std::lock_guard<std::mutex> lk(s->mu);
    s->cv.notify_all();
  }
}

std::vector<uint64_t> PsmrEngine::state_digests() const {
  std::vector<uint64_t> out;
  for (const auto& s : services_) out.push_back(s->state_digest());
  return out;
}

std::vector<ExecRecord> PsmrEngine::execution_log() const {
  std::vector<ExecRecord> out;
  for (const auto& w : workers_) out.insert(out.end(), w->log.begin(), w->log.end());
  return out;
}

std::vector<DeliveryRecord> PsmrEngine::delivery_log() const {
  std::vector<DeliveryRecord> out;
  for (const auto& w : workers_) out.insert(out.end(), w->deliveries.begin(), w->deliveries.end());
  return out;
}

EngineCounters PsmrEngine::counters() const {
  EngineCounters c;
  for (const auto& w : workers_) {
    c.per_thread.push_back({w->replica, w->thread_ix, w->delivered, w->executed});
    c.arrivals_sent += w->arrivals_sent;
    c.arrivals_collected += w->arrivals_collected;
    c.releases_sent += w->releases_sent;
    c.releases_collected += w->releases_collected;
  }
  return c;
}

std::string PsmrEngine::blocked_dump() const {
  std::ostringstream os;
  for (const auto& w : workers_) {
    uint8_t p = w->phase.load();
    os << "replica " << w->replica << " thread " << w->thread_ix << ": " << phase_name(p);
    if (p == kWaitArrivals || p == kWaitRelease) os << " from thread " << w->peer.load();
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// SMR

struct SmrEngine::ReplicaState {
  uint32_t id = 0;
  std::vector<ExecRecord> log;
  std::vector<DeliveryRecord> deliveries;
  uint64_t delivered = 0;
  uint64_t executed = 0;
  std::atomic<uint8_t> phase{kIdle};
};

SmrEngine::SmrEngine(MulticastFabric& fabric, std::vector<std::unique_ptr<Service>> services,
                     ResponseRouter& router, const RunClock& clock, SmrOptions opts)
    : fabric_(fabric), services_(std::move(services)), router_(router), clock_(clock),
      opts_(std::move(opts)) {
  if (services_.size() != opts_.replicas) throw ConfigError("one service instance per replica");
  for (uint32_t r = 0; r < opts_.replicas; r++) {
    auto st = std::make_unique<ReplicaState>();
    st->id = r;
    states_.push_back(std::move(st));
  }
}

SmrEngine::~SmrEngine() {
  abort();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
}

void SmrEngine::start() {
  for (uint32_t r = 0; r < opts_.replicas; r++)
    threads_.emplace_back([this, r] {
      replica_loop(r);
      exited_.fetch_add(1);
      std::lock_guard<std::mutex> lk(exit_mu_);
      exit_cv_.notify_all();
    });
}

void SmrEngine::replica_loop(uint32_t replica) {
  ReplicaState& me = *states_[replica];
  auto sub = fabric_.subscribe({GroupId::all()});
  Service& service = *services_[replica];
  for (;;) {
    me.phase.store(kDelivering, std::memory_order_relaxed);
    auto msg = sub->deliver();
    if (!msg) break;
    me.delivered++;
    if (replica == static_cast<uint32_t>(opts_.faults.skip_replica) &&
        me.delivered == opts_.faults.skip_nth)
      continue;  // planted divergence for the determinism checker
    me.deliveries.push_back({replica, 0, msg->group, msg->group_seq, msg->merge_ts,
                             fnv1a(msg->payload)});
    Request req = Request::decode(msg->payload);
    me.phase.store(kExecuting, std::memory_order_relaxed);
    uint64_t t0 = clock_.now_ns();
    std::string out = service.execute(req.cid, req.input);
    uint64_t t1 = clock_.now_ns();
    router_.deliver({req.client_id, req.client_seq, replica, std::move(out)});
    me.log.push_back({replica, 0, req.client_id, req.client_seq, req.cid, t0, t1,
                      ExecRecord::Mode::sequential});
    me.executed++;
  }
  me.phase.store(kDone, std::memory_order_relaxed);
}

bool SmrEngine::join(std::chrono::milliseconds timeout) {
  std::unique_lock<std::mutex> lk(exit_mu_);
  bool ok = exit_cv_.wait_for(lk, timeout, [&] { return exited_.load() == threads_.size(); });
  if (!ok) return false;
  lk.unlock();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
  return true;
}

void SmrEngine::abort() {
  aborted_.store(true);
  fabric_.abort();
}

std::vector<uint64_t> SmrEngine::state_digests() const {
  std::vector<uint64_t> out;
  for (const auto& s : services_) out.push_back(s->state_digest());
  return out;
}

std::vector<ExecRecord> SmrEngine::execution_log() const {
  std::vector<ExecRecord> out;
  for (const auto& s : states_) out.insert(out.end(), s->log.begin(), s->log.end());
  return out;
}

std::vector<DeliveryRecord> SmrEngine::delivery_log() const {
  std::vector<DeliveryRecord> out;
  for (const auto& s : states_) out.insert(out.end(), s->deliveries.begin(), s->deliveries.end());
  return out;
}

EngineCounters SmrEngine::counters() const {
  EngineCounters c;
  for (const auto& s : states_) c.per_thread.push_back({s->id, 0, s->delivered, s->executed});
  return c;
}

std::string SmrEngine::blocked_dump() const {
  std::ostringstream os;
  for (const auto& s : states_)
    os << "replica " << s->id << " thread 0: " << phase_name(s->phase.load()) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// sP-SMR / no-rep

struct ScheduledEngine::InFlight {
  Request req;
  std::atomic<bool> done{false};
};

struct ScheduledEngine::WorkerState {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<InFlight*> queue;
  bool closed = false;
  std::atomic<uint64_t> load{0};  // queued + executing
  std::vector<ExecRecord> log;
  uint64_t executed = 0;
  std::atomic<uint8_t> phase{kIdle};
};

struct ScheduledEngine::ReplicaState {
  uint32_t id = 0;
  std::vector<std::unique_ptr<WorkerState>> workers;
  std::deque<std::unique_ptr<InFlight>> in_flight;
  std::atomic<uint64_t> dispatched{0};
  std::atomic<uint64_t> completed{0};
  std::mutex quiesce_mu;
  std::condition_variable quiesce_cv;
  std::vector<DeliveryRecord> deliveries;
  uint64_t delivered = 0;
  std::atomic<uint8_t> phase{kIdle};
};

ScheduledEngine::ScheduledEngine(MulticastFabric* fabric, const CDep& cdep,
                                 std::vector<std::unique_ptr<Service>> services,
                                 ResponseRouter& router, const RunClock& clock,
                                 ScheduledOptions opts)
    : fabric_(fabric), cdep_(cdep), services_(std::move(services)), router_(router),
      clock_(clock), opts_(std::move(opts)) {
  if (opts_.direct) {
    if (opts_.replicas != 1) throw ConfigError("no-rep runs a single server");
    direct_queue_ = std::make_unique<RequestQueue>();
  } else if (!fabric_) {
    throw ConfigError("scheduled engine needs a fabric unless direct");
  }
  if (opts_.workers < 1) throw ConfigError("need at least one worker");
  if (services_.size() != opts_.replicas) throw ConfigError("one service instance per replica");
  for (uint32_t r = 0; r < opts_.replicas; r++) {
    auto st = std::make_unique<ReplicaState>();
    st->id = r;
    for (uint32_t w = 0; w < opts_.workers; w++)
      st->workers.push_back(std::make_unique<WorkerState>());
    states_.push_back(std::move(st));
  }
}

ScheduledEngine::~ScheduledEngine() {
  abort();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
}

RequestQueue& ScheduledEngine::request_queue() {
  if (!direct_queue_) throw ConfigError("engine is fabric-fed");
  return *direct_queue_;
}

void ScheduledEngine::close_direct_input() {
  if (direct_queue_) direct_queue_->close();
}

void ScheduledEngine::start() {
  for (uint32_t r = 0; r < opts_.replicas; r++) {
    threads_.emplace_back([this, r] {
      scheduler_loop(r);
      exited_.fetch_add(1);
      std::lock_guard<std::mutex> lk(exit_mu_);
      exit_cv_.notify_all();
    });
    for (uint32_t w = 0; w < opts_.workers; w++)
      threads_.emplace_back([this, r, w] {
        worker_loop(r, w);
        exited_.fetch_add(1);
        std::lock_guard<std::mutex> lk(exit_mu_);
        exit_cv_.notify_all();
      });
  }
}

void ScheduledEngine::scheduler_loop(uint32_t replica) {
  ReplicaState& rs = *states_[replica];
  std::unique_ptr<Subscription> sub;
  if (!opts_.direct) sub = fabric_->subscribe({GroupId::all()});

  auto next = [&]() -> std::optional<Request> {
    if (opts_.direct) return direct_queue_->pop();
    auto msg = sub->deliver();
    if (!msg) return std::nullopt;
    rs.deliveries.push_back({replica, 0, msg->group, msg->group_seq, msg->merge_ts,
                             fnv1a(msg->payload)});
    return Request::decode(msg->payload);
  };

  auto quiesce = [&] {
    rs.phase.store(kQuiesce, std::memory_order_relaxed);
    std::unique_lock<std::mutex> lk(rs.quiesce_mu);
    rs.quiesce_cv.wait(lk, [&] {
      return rs.completed.load() == rs.dispatched.load() || aborted_.load();
    });
  };

  for (;;) {
    rs.phase.store(kDelivering, std::memory_order_relaxed);
    auto req = next();
    if (!req) break;
    rs.delivered++;

    // Drop completed entries off the front; interior ones age out later.
    while (!rs.in_flight.empty() && rs.in_flight.front()->done.load(std::memory_order_acquire))
      rs.in_flight.pop_front();

    // A command is dispatched concurrently only if it is independent of
    // everything still in flight; otherwise the scheduler waits for the
    // workers to finish their ongoing work first.
    bool conflict = cdep_.depends_on_all(req->cid);
    if (!conflict) {
      for (const auto& e : rs.in_flight) {
        if (e->done.load(std::memory_order_acquire)) continue;
        if (cdep_.is_dependent(req->cid, req->input, e->req.cid, e->req.input)) {
          conflict = true;
          break;
        }
      }
    }
    if (conflict) {
      quiesce();
      if (aborted_.load()) break;
      rs.in_flight.clear();
    }

    uint32_t best = 0;
    uint64_t best_load = rs.workers[0]->load.load(std::memory_order_relaxed);
    for (uint32_t w = 1; w < opts_.workers; w++) {
      uint64_t l = rs.workers[w]->load.load(std::memory_order_relaxed);
      if (l < best_load) {
        best = w;
        best_load = l;
      }
    }

    auto entry = std::make_unique<InFlight>();
    entry->req = std::move(*req);
    InFlight* raw = entry.get();
    rs.in_flight.push_back(std::move(entry));
    rs.dispatched.fetch_add(1);
    WorkerState& ws = *rs.workers[best];
    ws.load.fetch_add(1);
    {
      std::lock_guard<std::mutex> lk(ws.mu);
      ws.queue.push_back(raw);
    }
    ws.cv.notify_all();
  }

  quiesce();
  for (auto& w : rs.workers) {
    {
      std::lock_guard<std::mutex> lk(w->mu);
      w->closed = true;
    }
    w->cv.notify_all();
  }
  rs.phase.store(kDone, std::memory_order_relaxed);
}

void ScheduledEngine::worker_loop(uint32_t replica, uint32_t worker_ix) {
  ReplicaState& rs = *states_[replica];
  WorkerState& ws = *rs.workers[worker_ix];
  Service& service = *services_[replica];
  for (;;) {
    ws.phase.store(kQueuePop, std::memory_order_relaxed);
    InFlight* entry = nullptr;
    {
      std::unique_lock<std::mutex> lk(ws.mu);
      ws.cv.wait(lk, [&] { return !ws.queue.empty() || ws.closed || aborted_.load(); });
      if (aborted_.load()) break;
      if (ws.queue.empty()) break;  // closed and drained
      entry = ws.queue.front();
      ws.queue.pop_front();
    }
    const Request& req = entry->req;
    ws.phase.store(kExecuting, std::memory_order_relaxed);
    uint64_t t0 = clock_.now_ns();
    std::string out = service.execute(req.cid, req.input);
    uint64_t t1 = clock_.now_ns();
    router_.deliver({req.client_id, req.client_seq, replica, std::move(out)});
    ws.log.push_back({replica, worker_ix + 1, req.client_id, req.client_seq, req.cid, t0, t1,
                      ExecRecord::Mode::scheduled});
    ws.executed++;
    entry->done.store(true, std::memory_order_release);
    ws.load.fetch_sub(1);
    rs.completed.fetch_add(1);
    {
      std::lock_guard<std::mutex> lk(rs.quiesce_mu);
    }
    rs.quiesce_cv.notify_all();
  }
  ws.phase.store(kDone, std::memory_order_relaxed);
}

bool ScheduledEngine::join(std::chrono::milliseconds timeout) {
  std::unique_lock<std::mutex> lk(exit_mu_);
  bool ok = exit_cv_.wait_for(lk, timeout, [&] { return exited_.load() == threads_.size(); });
  if (!ok) return false;
  lk.unlock();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
  return true;
}

void ScheduledEngine::abort() {
  aborted_.store(true);
  if (fabric_) fabric_->abort();
  if (direct_queue_) direct_queue_->abort();
  for (auto& rs : states_) {
    {
      std::lock_guard<std::mutex> lk(rs->quiesce_mu);
    }
    rs->quiesce_cv.notify_all();
    for (auto& w : rs->workers) {
      {
        std::lock_guard<std::mutex> lk(w->mu);
      }
      w->cv.notify_all();
    }
  }
}

std::vector<uint64_t> ScheduledEngine::state_digests() const {
  std::vector<uint64_t> out;
  for (const auto& s : services_) out.push_back(s->state_digest());
  return out;
}

std::vector<ExecRecord> ScheduledEngine::execution_log() const {
  std::vector<ExecRecord> out;
  for (const auto& rs : states_)
    for (const auto& w : rs->workers) out.insert(out.end(), w->log.begin(), w->log.end());
  return out;
}

std::vector<DeliveryRecord> ScheduledEngine::delivery_log() const {
  std::vector<DeliveryRecord> out;
  for (const auto& rs : states_)
    out.insert(out.end(), rs->deliveries.begin(), rs->deliveries.end());
  return out;
}

EngineCounters ScheduledEngine::counters() const {
  EngineCounters c;
  for (const auto& rs : states_) {
    c.per_thread.push_back({rs->id, 0, rs->delivered, 0});
    for (uint32_t w = 0; w < opts_.workers; w++)
      c.per_thread.push_back({rs->id, w + 1, 0, rs->workers[w]->executed});
  }
  return c;
}

std::string ScheduledEngine::blocked_dump() const {
  std::ostringstream os;
  for (const auto& rs : states_) {
    os << "replica " << rs->id << " scheduler: " << phase_name(rs->phase.load())
       << " (dispatched " << rs->dispatched.load() << ", completed " << rs->completed.load()
       << ")\n";
    for (uint32_t w = 0; w < opts_.workers; w++)
      os << "replica " << rs->id << " worker " << w + 1 << ": "
         << phase_name(rs->workers[w]->phase.load()) << '\n';
  }
  return os.str();
}

std::unique_ptr<Engine> make_engine(const EngineSetup& setup, MulticastFabric* fabric,
                                    const CDep& cdep,
                                    std::vector<std::unique_ptr<Service>> services,
                                    ResponseRouter& router, const RunClock& clock) {
  switch (setup.kind) {
    case EngineKind::psmr: {
      if (!fabric) throw ConfigError("psmr needs a fabric");
      PsmrOptions o;
      o.threads = setup.threads;
      o.replicas = setup.replicas;
      o.recompute_cg = setup.recompute_cg;
      o.faults = setup.faults;
      return std::make_unique<PsmrEngine>(*fabric, std::move(services), router, clock, o);
    }
    case EngineKind::smr: {
      if (!fabric) throw ConfigError("smr needs a fabric");
      SmrOptions o;
      o.threads = setup.threads;
      o.replicas = setup.replicas;
      o.faults = setup.faults;
      return std::make_unique<SmrEngine>(*fabric, std::move(services), router, clock, o);
    }
    case EngineKind::spsmr: {
      if (!fabric) throw ConfigError("spsmr needs a fabric");
      ScheduledOptions o;
      o.workers = setup.threads;
      o.replicas = setup.replicas;
      o.faults = setup.faults;
      return std::make_unique<ScheduledEngine>(fabric, cdep, std::move(services), router, clock, o);
    }
    case EngineKind::norep: {
      ScheduledOptions o;
      o.workers = setup.threads;
      o.replicas = 1;
      o.direct = true;
      o.faults = setup.faults;
      return std::make_unique<ScheduledEngine>(nullptr, cdep, std::move(services), router, clock,
                                               o);
    }
  }
  throw ConfigError("unknown engine kind");
}

}  // namespace psmr

#include "psmr/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace psmr {

std::string MixSpec::str() const {
  std::ostringstream os;
  os << "read=" << read << ";update=" << update << ";insert=" << insert << ";delete=" << del;
  return os.str();
}

MixSpec MixSpec::parse(std::string_view text) {
  MixSpec mix{0, 0, 0, 0};
  std::string item;
  std::istringstream is{std::string(text)};
  while (std::getline(is, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("bad mix item '" + item + "'");
    std::string name = item.substr(0, eq);
    double value = std::stod(item.substr(eq + 1));
    if (name == "read")
      mix.read = value;
    else if (name == "update")
      mix.update = value;
    else if (name == "insert")
      mix.insert = value;
    else if (name == "delete")
      mix.del = value;
    else
      throw ConfigError("unknown mix component '" + name + "'");
  }
  return mix;
}

void WorkloadSpec::validate() const {
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (replicas < 1) throw ConfigError("replicas must be at least 1");
  if (engine == EngineKind::norep && replicas != 1)
    throw ConfigError("no-rep runs a single server");
  if (clients < 1) throw ConfigError("need at least one client");
  if (window < 1) throw ConfigError("window must be at least 1");
  if (commands_per_client == 0 && duration_s <= 0)
    throw ConfigError("need a command count or a duration");
  if (key_space < 1) throw ConfigError("key space must be non-empty");
  MixSpec m = effective_mix();
  if (std::abs(m.sum() - 1.0) > 1e-9) throw ConfigError("mix fractions must sum to 1");
  if (m.read < 0 || m.update < 0 || m.insert < 0 || m.del < 0)
    throw ConfigError("mix fractions must be non-negative");
}

MixSpec WorkloadSpec::effective_mix() const {
  if (!dependent_pct) return mix;
  double d = *dependent_pct / 100.0;
  if (d < 0 || d > 1) throw ConfigError("dependent percentage out of range");
  MixSpec def;
  if (!(mix.read == def.read && mix.update == def.update && mix.insert == def.insert &&
        mix.del == def.del)) {
    if (std::abs((mix.insert + mix.del) - d) > 1e-9)
      throw ConfigError("mix and dependent percentage disagree");
    return mix;
  }
  return MixSpec{1.0 - d, 0.0, d / 2, d / 2};
}

ZipfSampler::ZipfSampler(uint64_t n, double exponent) {
  cdf_.resize(n);
  double acc = 0;
  for (uint64_t r = 0; r < n; r++) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
    cdf_[r] = acc;
  }
  for (double& c : cdf_) c /= acc;
}

uint64_t ZipfSampler::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  auto it = std::lower_bound(cdf_.begin(), cdf_.end(), x);
  return static_cast<uint64_t>(std::min<size_t>(static_cast<size_t>(it - cdf_.begin()),
                                                cdf_.size() - 1));
}

double ZipfSampler::pmf(uint64_t rank0) const {
  return rank0 == 0 ? cdf_[0] : cdf_[rank0] - cdf_[rank0 - 1];
}

WorkloadGenerator::WorkloadGenerator(const WorkloadSpec& spec, ClientId client,
                                     std::shared_ptr<const ZipfSampler> zipf)
    : mix_(spec.effective_mix()), key_space_(spec.key_space), dist_(spec.dist),
      zipf_(std::move(zipf)), rng_(spec.seed * 0x9e3779b97f4a7c15ull + client + 1) {}

GenCommand WorkloadGenerator::next() {
  GenCommand cmd;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double pick = u(rng_);
  if (pick < mix_.read)
    cmd.cid = kKvRead;
  else if (pick < mix_.read + mix_.update)
    cmd.cid = kKvUpdate;
  else if (pick < mix_.read + mix_.update + mix_.insert)
    cmd.cid = kKvInsert;
  else
    cmd.cid = kKvDelete;

  if (dist_ == KeyDist::uniform) {
    std::uniform_int_distribution<uint64_t> k(0, key_space_ - 1);
    cmd.key = static_cast<int64_t>(k(rng_));
  } else {
    cmd.key = static_cast<int64_t>(zipf_->sample(rng_));
  }
  cmd.value = rng_();
  return cmd;
}

std::vector<GenCommand> generate_stream(const WorkloadSpec& spec, ClientId client, uint64_t count) {
  std::shared_ptr<const ZipfSampler> zipf;
  if (spec.dist == KeyDist::zipf)
    zipf = std::make_shared<ZipfSampler>(spec.key_space, spec.zipf_exponent);
  WorkloadGenerator gen(spec, client, zipf);
  std::vector<GenCommand> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; i++) out.push_back(gen.next());
  return out;
}

namespace {

struct ClientOutcome {
  std::vector<ClientProxy::Completion> completions;
  uint64_t issued = 0;
  bool wedged = false;
};

void client_loop(const WorkloadSpec& spec, ClientProxy& proxy, WorkloadGenerator& gen,
                 const RunClock& clock, std::atomic<bool>& wedged, ClientOutcome& out) {
  const bool timed = spec.duration_s > 0;
  const uint64_t deadline_ns = static_cast<uint64_t>(spec.duration_s * 1e9);
  auto should_issue = [&] {
    if (wedged.load(std::memory_order_relaxed)) return false;
    if (timed) return clock.now_ns() < deadline_ns;
    return out.issued < spec.commands_per_client;
  };

  auto await_one = [&]() -> bool {
    auto c = proxy.await_next(spec.drain_timeout);
    if (!c) {
      out.wedged = true;
      wedged.store(true, std::memory_order_relaxed);
      return false;
    }
    out.completions.push_back(std::move(*c));
    return true;
  };

  while (should_issue()) {
    if (proxy.outstanding() >= spec.window) {
      if (!await_one()) return;
      continue;
    }
    GenCommand cmd = gen.next();
    proxy.submit(cmd.cid, encode_kv_input(cmd.cid, cmd.key, cmd.value));
    out.issued++;
    assert(proxy.outstanding() <= spec.window);
  }
  while (proxy.outstanding() > 0) {
    if (!await_one()) return;
  }
  proxy.drain_duplicates(out.issued * spec.replicas,
                         std::min(spec.drain_timeout, std::chrono::milliseconds(5000)));
}

void fill_latency_stats(RunMetrics& m, std::vector<ClientProxy::Completion> completions) {
  m.completed = completions.size();
  if (completions.empty()) return;
  std::sort(completions.begin(), completions.end(),
            [](const auto& a, const auto& b) { return a.response_ns < b.response_ns; });
  // Warm-up: the first tenth of completions is excluded from statistics.
  size_t warm = completions.size() / 10;
  if (warm + 1 >= completions.size()) warm = 0;
  uint64_t t_begin = completions[warm].response_ns;
  uint64_t t_end = completions.back().response_ns;
  size_t n = completions.size() - warm;
  m.elapsed_s = static_cast<double>(t_end - t_begin) / 1e9;
  if (m.elapsed_s > 0) m.throughput_cps = static_cast<double>(n - 1) / m.elapsed_s;

  m.latency_samples_us.reserve(n);
  double sum = 0;
  for (size_t i = warm; i < completions.size(); i++) {
    double us = static_cast<double>(completions[i].response_ns - completions[i].invoke_ns) / 1e3;
    m.latency_samples_us.push_back(us);
    sum += us;
  }
  m.lat_mean_us = sum / static_cast<double>(n);
  std::vector<double> sorted = m.latency_samples_us;
  std::sort(sorted.begin(), sorted.end());
  m.lat_p50_us = sorted[sorted.size() / 2];
  m.lat_p99_us = sorted[std::min(sorted.size() - 1, sorted.size() * 99 / 100)];
}

}  // namespace

RunResult run_workload(const WorkloadSpec& spec) {
  spec.validate();
  RunResult result;
  RunClock clock;

  std::unique_ptr<MulticastFabric> fabric;
  if (spec.engine != EngineKind::norep) {
    FabricOptions fo;
    fo.num_groups = spec.threads;
    fo.batch_limit = spec.batch_limit;
    fo.null_period = spec.null_period;
    fo.idle_null_interval = std::chrono::microseconds(spec.idle_null_us);
    fabric = std::make_unique<MulticastFabric>(fo);
  }

  std::vector<std::unique_ptr<Service>> services;
  std::vector<const KvService*> stores;
  uint32_t replicas = spec.engine == EngineKind::norep ? 1 : spec.replicas;
  for (uint32_t r = 0; r < replicas; r++) {
    auto kv = std::make_unique<KvService>(spec.fanout);
    kv->preload(spec.preload);
    stores.push_back(kv.get());
    if (spec.service_time_us > 0)
      services.push_back(std::make_unique<DelayedService>(
          std::move(kv), std::chrono::microseconds(spec.service_time_us), spec.service_work));
    else
      services.push_back(std::move(kv));
  }

  CDep cdep = kv_cdep();
  ResponseRouter router(spec.clients);

  EngineSetup setup;
  setup.kind = spec.engine;
  setup.threads = spec.threads;
  setup.replicas = replicas;
  setup.faults = spec.faults;
  if (spec.debug_recompute_gamma && spec.cg_rule == CgRule::partition)
    setup.recompute_cg = kv_partition_cg(spec.threads);
  auto engine = make_engine(setup, fabric.get(), cdep, std::move(services), router, clock);

  RequestQueue* direct = nullptr;
  auto* sched = dynamic_cast<ScheduledEngine*>(engine.get());
  if (spec.engine == EngineKind::norep) direct = &sched->request_queue();

  engine->start();

  std::shared_ptr<const ZipfSampler> zipf;
  if (spec.dist == KeyDist::zipf)
    zipf = std::make_shared<ZipfSampler>(spec.key_space, spec.zipf_exponent);

  std::vector<std::unique_ptr<ClientProxy>> proxies;
  std::vector<std::unique_ptr<WorkloadGenerator>> gens;
  for (uint32_t c = 0; c < spec.clients; c++) {
    CGFunction cg = spec.cg_rule == CgRule::partition
                        ? kv_partition_cg(spec.threads)
                        : kv_broadcast_cg(spec.threads, spec.seed * 1315423911ull + c);
    proxies.push_back(std::make_unique<ClientProxy>(c, spec.engine, std::move(cg), fabric.get(),
                                                    direct, router, clock));
    gens.push_back(std::make_unique<WorkloadGenerator>(spec, c, zipf));
  }

  std::vector<ClientOutcome> outcomes(spec.clients);
  std::atomic<bool> wedged{false};
  {
    std::vector<std::thread> client_threads;
    for (uint32_t c = 0; c < spec.clients; c++)
      client_threads.emplace_back([&, c] {
        client_loop(spec, *proxies[c], *gens[c], clock, wedged, outcomes[c]);
      });
    for (auto& t : client_threads) t.join();
  }

  if (fabric)
    fabric->close();
  else
    sched->close_direct_input();

  DeadlockResult drain = detect_deadlock(*engine, spec.drain_timeout);
  result.metrics.drained = drain.drained && !wedged.load();
  if (!result.metrics.drained) {
    result.deadlock_dump = drain.dump.empty() ? engine->blocked_dump() : drain.dump;
    engine->abort();
    router.abort_all();
    engine->join(std::chrono::milliseconds(10000));
  }

  // Collect artifacts once every engine thread stopped.
  result.artifacts.execution = engine->execution_log();
  result.artifacts.delivery = engine->delivery_log();
  result.artifacts.digests = engine->state_digests();
  result.artifacts.replicas = replicas;
  result.artifacts.preload = spec.preload;
  result.counters = engine->counters();
  if (spec.record_snapshots && result.metrics.drained)
    for (const KvService* kv : stores) {
      std::ostringstream dump;
      kv->tree().snapshot(dump);
      result.artifacts.snapshots.push_back(dump.str());
    }

  std::vector<ClientProxy::Completion> all_completions;
  for (uint32_t c = 0; c < spec.clients; c++) {
    const ClientProxy& p = *proxies[c];
    result.metrics.issued += outcomes[c].issued;
    for (const auto& [seq, outs] : p.replica_outputs())
      for (const auto& [replica, output] : outs)
        result.artifacts.responses.push_back({p.id(), seq, replica, output});
    if (spec.record_history)
      result.artifacts.history.insert(result.artifacts.history.end(), p.history().begin(),
                                      p.history().end());
    all_completions.insert(all_completions.end(), outcomes[c].completions.begin(),
                           outcomes[c].completions.end());
  }
  fill_latency_stats(result.metrics, std::move(all_completions));
  result.metrics.per_thread = result.counters.per_thread;
  result.metrics.per_thread_throughput = result.metrics.throughput_cps / spec.threads;

  if (!result.metrics.drained) {
    result.metrics.taint = "engine did not drain";
  } else if (spec.verify_run) {
    DeterminismResult det = check_determinism(result.artifacts.digests,
                                              result.artifacts.responses, replicas);
    OrderAuditResult audit = audit_order(result.artifacts.delivery);
    if (det.verdict != Verdict::pass)
      result.metrics.taint = "determinism: " + det.detail;
    else if (audit.verdict != Verdict::pass)
      result.metrics.taint = "order audit: " + audit.detail;
    else
      result.metrics.verified = true;
  }
  return result;
}

std::vector<SweepPoint> sweep_threads(WorkloadSpec base,
                                      const std::vector<uint32_t>& thread_counts) {
  std::vector<SweepPoint> points;
  for (uint32_t k : thread_counts) {
    WorkloadSpec spec = base;
    spec.threads = k;
    RunResult r = run_workload(spec);
    points.push_back({k, std::move(r.metrics)});
  }
  return points;
}

std::string metrics_csv_header() {
  return "engine,k,n_replicas,clients,mix,dependent_pct,key_dist,seed,throughput_cps,"
         "lat_mean_us,lat_p50_us,lat_p99_us";
}

std::string metrics_csv_row(const WorkloadSpec& spec, const RunMetrics& m) {
  std::ostringstream os;
  os << engine_name(spec.engine) << ',' << spec.threads << ',' << spec.replicas << ','
     << spec.clients << ',' << spec.effective_mix().str() << ','
     << (spec.dependent_pct ? std::to_string(*spec.dependent_pct) : "-") << ','
     << (spec.dist == KeyDist::uniform ? "uniform" : "zipf") << ',' << spec.seed << ','
     << m.throughput_cps << ',' << m.lat_mean_us << ',' << m.lat_p50_us << ',' << m.lat_p99_us;
  return os.str();
}

std::string metrics_json(const std::vector<std::pair<WorkloadSpec, RunMetrics>>& runs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [spec, m] : runs) {
    nlohmann::json j;
    j["engine"] = engine_name(spec.engine);
    j["k"] = spec.threads;
    j["n_replicas"] = spec.replicas;
    j["clients"] = spec.clients;
    j["mix"] = spec.effective_mix().str();
    if (spec.dependent_pct)
      j["dependent_pct"] = *spec.dependent_pct;
    else
      j["dependent_pct"] = nullptr;
    j["key_dist"] = spec.dist == KeyDist::uniform ? "uniform" : "zipf";
    j["seed"] = spec.seed;
    j["throughput_cps"] = m.throughput_cps;
    j["per_thread_throughput"] = m.per_thread_throughput;
    j["lat_mean_us"] = m.lat_mean_us;
    j["lat_p50_us"] = m.lat_p50_us;
    j["lat_p99_us"] = m.lat_p99_us;
    j["completed"] = m.completed;
    j["verified"] = m.verified;
    if (!m.taint.empty()) j["taint"] = m.taint;
    nlohmann::json threads = nlohmann::json::array();
    for (const auto& t : m.per_thread)
      threads.push_back({{"replica", t.replica},
                         {"thread", t.thread},
                         {"delivered", t.delivered},
                         {"executed", t.executed}});
    j["per_thread"] = threads;
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

void write_latency_cdf(std::ostream& out, const RunMetrics& m) {
  std::vector<double> sorted = m.latency_samples_us;
  std::sort(sorted.begin(), sorted.end());
  for (double v : sorted) out << v << '\n';
}

}  // namespace psmr

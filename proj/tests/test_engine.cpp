#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <thread>

#include "psmr/engine.hpp"
#include "psmr/kvstore.hpp"
#include "psmr/verify.hpp"

using namespace psmr;
using namespace std::chrono_literals;

namespace {

// Fabric + engine + router wired for one test.
struct Rig {
  RunClock clock;
  CDep cdep = kv_cdep();
  std::unique_ptr<MulticastFabric> fabric;
  ResponseRouter router;
  std::unique_ptr<Engine> engine;
  RequestQueue* direct = nullptr;
  EngineKind kind;
  uint32_t k;

  Rig(EngineKind kind_, uint32_t k_, uint32_t replicas, uint32_t clients, uint64_t preload = 100,
      uint64_t delay_us = 0, FaultPlan faults = {})
      : router(clients), kind(kind_), k(k_) {
    if (kind != EngineKind::norep) {
      FabricOptions fo;
      fo.num_groups = k;
      fo.batch_limit = 0;
      fo.null_period = 16;
      fo.idle_null_interval = std::chrono::microseconds(200);
      fabric = std::make_unique<MulticastFabric>(fo);
    }
    uint32_t n = kind == EngineKind::norep ? 1 : replicas;
    std::vector<std::unique_ptr<Service>> services;
    for (uint32_t r = 0; r < n; r++) {
      auto kv = std::make_unique<KvService>(8);
      kv->preload(preload);
      if (delay_us)
        services.push_back(std::make_unique<DelayedService>(
            std::move(kv), std::chrono::microseconds(delay_us), ServiceWork::wait));
      else
        services.push_back(std::move(kv));
    }
    EngineSetup setup;
    setup.kind = kind;
    setup.threads = k;
    setup.replicas = n;
    setup.faults = faults;
    engine = make_engine(setup, fabric.get(), cdep, std::move(services), router, clock);
    if (kind == EngineKind::norep)
      direct = &dynamic_cast<ScheduledEngine&>(*engine).request_queue();
    engine->start();
  }

  ClientProxy proxy(ClientId id) {
    return ClientProxy(id, kind, kv_partition_cg(k), fabric.get(), direct, router, clock);
  }
  ClientProxy proxy_with(ClientId id, CGFunction cg) {
    return ClientProxy(id, kind, std::move(cg), fabric.get(), direct, router, clock);
  }

  bool finish(std::chrono::milliseconds timeout = 10000ms) {
    if (fabric)
      fabric->close();
    else
      dynamic_cast<ScheduledEngine&>(*engine).close_direct_input();
    return engine->join(timeout);
  }

  ~Rig() {
    engine->abort();
    router.abort_all();
    engine->join(5000ms);
  }
};

bool overlaps(const ExecRecord& a, const ExecRecord& b) {
  return std::max(a.t_start, b.t_start) < std::min(a.t_end, b.t_end);
}

}  // namespace

TEST_CASE("client proxy computes gamma and returns the first response") {
  Rig rig(EngineKind::psmr, 4, 2, 1);
  ClientProxy proxy = rig.proxy(0);

  SUBCASE("a keyed read goes to its partition group and returns the stored value") {
    std::string out = proxy.execute(kKvRead, encode_kv_input(kKvRead, 7));
    CHECK(rig.proxy(0).id() == 0);
    CHECK(proxy.last_gamma() == GroupSet::single(4));  // (7 mod 4) + 1
    KvOutput o = decode_kv_output(kKvRead, out);
    CHECK(o.status == KvStatus::ok);
    CHECK(o.value == 7 * 0x9e3779b97f4a7c15ull + 1);
  }

  SUBCASE("an insert goes to all groups and both replicas' replies collapse to one") {
    std::string out = proxy.execute(kKvInsert, encode_kv_input(kKvInsert, 1000, 5));
    CHECK(proxy.last_gamma() == GroupSet::full(4));
    CHECK(decode_kv_output(kKvInsert, out).status == KvStatus::ok);
    CHECK(proxy.history().size() == 1);
    proxy.drain_duplicates(2, 2000ms);
    auto it = proxy.replica_outputs().find(0);
    REQUIRE(it != proxy.replica_outputs().end());
    CHECK(it->second.size() == 2);  // both replicas answered, one was surfaced
    CHECK(it->second[0].second == it->second[1].second);
  }
}

TEST_CASE("psmr parallel mode: a singleton command runs on its thread alone") {
  Rig rig(EngineKind::psmr, 4, 2, 1);
  ClientProxy proxy = rig.proxy(0);
  proxy.execute(kKvRead, encode_kv_input(kKvRead, 9));  // (9 mod 4) + 1 = 2
  REQUIRE(rig.finish());
  auto log = rig.engine->execution_log();
  REQUIRE(log.size() == 2);  // once per replica
  for (const auto& r : log) {
    CHECK(r.thread == 2);
    CHECK(r.mode == ExecRecord::Mode::parallel);
  }
}

TEST_CASE("psmr synchronous mode: minimum-index destination executes, others pause") {
  Rig rig(EngineKind::psmr, 3, 2, 1);
  ClientProxy proxy = rig.proxy(0);
  proxy.execute(kKvInsert, encode_kv_input(kKvInsert, 2000, 1));  // gamma = {1,2,3}
  REQUIRE(rig.finish());
  auto log = rig.engine->execution_log();
  REQUIRE(log.size() == 2);
  for (const auto& r : log) {
    CHECK(r.thread == 1);  // e = min{1,2,3}
    CHECK(r.mode == ExecRecord::Mode::synchronous);
  }
  // Signal conservation: per replica 2 arrivals in, 2 releases out.
  EngineCounters c = rig.engine->counters();
  CHECK(c.arrivals_sent == 4);
  CHECK(c.arrivals_collected == 4);
  CHECK(c.releases_sent == 4);
  CHECK(c.releases_collected == 4);
}

TEST_CASE("psmr independent commands can overlap on one replica") {
  Rig rig(EngineKind::psmr, 2, 1, 2, 100, 30000);  // 30ms of service time
  ClientProxy c0 = rig.proxy(0);
  ClientProxy c1 = rig.proxy(1);
  c0.submit(kKvRead, encode_kv_input(kKvRead, 0));  // group 1
  c1.submit(kKvRead, encode_kv_input(kKvRead, 1));  // group 2
  CHECK(c0.await_next(5000ms));
  CHECK(c1.await_next(5000ms));
  REQUIRE(rig.finish());
  auto log = rig.engine->execution_log();
  REQUIRE(log.size() == 2);
  CHECK(overlaps(log[0], log[1]));
}

TEST_CASE("psmr dependent commands never overlap and order identically across replicas") {
  const uint32_t k = 4;
  const int commands = 120;
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    Rig rig(EngineKind::psmr, k, 2, 2, 32);
    std::map<std::pair<ClientId, ClientSeq>, std::pair<CommandId, std::string>> issued;

    auto client = [&](ClientId id) {
      ClientProxy proxy = rig.proxy(id);
      std::mt19937_64 rng(seed * 97 + id);
      for (int i = 0; i < commands; i++) {
        CommandId cid = 1 + rng() % 4;
        std::string input = encode_kv_input(cid, static_cast<int64_t>(rng() % 32), rng());
        ClientSeq seq = proxy.submit(cid, input);
        issued.emplace(std::make_pair(id, seq), std::make_pair(cid, input));
        if (proxy.outstanding() >= 8) CHECK(proxy.await_next(10000ms));
      }
      while (proxy.outstanding() > 0) CHECK(proxy.await_next(10000ms));
    };
    // Submit from two clients in two threads; issued map is merged after.
    std::map<std::pair<ClientId, ClientSeq>, std::pair<CommandId, std::string>> issued2;
    std::thread t([&] {
      ClientProxy proxy = rig.proxy(1);
      std::mt19937_64 rng(seed * 97 + 1);
      for (int i = 0; i < commands; i++) {
        CommandId cid = 1 + rng() % 4;
        std::string input = encode_kv_input(cid, static_cast<int64_t>(rng() % 32), rng());
        ClientSeq seq = proxy.submit(cid, input);
        issued2.emplace(std::make_pair(ClientId(1), seq), std::make_pair(cid, input));
        if (proxy.outstanding() >= 8) CHECK(proxy.await_next(10000ms));
      }
      while (proxy.outstanding() > 0) CHECK(proxy.await_next(10000ms));
    });
    client(0);
    t.join();
    issued.insert(issued2.begin(), issued2.end());
    REQUIRE(rig.finish());

    CDep dep = kv_cdep();
    auto log = rig.engine->execution_log();
    std::vector<std::vector<ExecRecord>> per_replica(2);
    for (const auto& r : log) per_replica[r.replica].push_back(r);
    for (auto& v : per_replica) {
      REQUIRE(v.size() == static_cast<size_t>(2 * commands));
      std::sort(v.begin(), v.end(), [](const ExecRecord& a, const ExecRecord& b) {
        return a.t_start < b.t_start;
      });
    }

    // Within each replica dependent executions are disjoint in time; across
    // replicas dependent pairs appear in the same order.
    for (int rep = 0; rep < 2; rep++) {
      const auto& v = per_replica[rep];
      for (size_t i = 0; i < v.size(); i++) {
        const auto& [ci, ii] = issued.at({v[i].client, v[i].seq});
        for (size_t j = i + 1; j < v.size(); j++) {
          const auto& [cj, ij] = issued.at({v[j].client, v[j].seq});
          if (!dep.is_dependent(ci, ii, cj, ij)) continue;
          CHECK_FALSE(overlaps(v[i], v[j]));
        }
      }
    }
    auto order_key = [](const ExecRecord& r) {
      return (static_cast<uint64_t>(r.client) << 32) | r.seq;
    };
    std::map<uint64_t, size_t> pos0;
    for (size_t i = 0; i < per_replica[0].size(); i++) pos0[order_key(per_replica[0][i])] = i;
    for (size_t i = 0; i < per_replica[1].size(); i++) {
      for (size_t j = i + 1; j < per_replica[1].size(); j++) {
        const auto& a = per_replica[1][i];
        const auto& b = per_replica[1][j];
        const auto& [ca, ia] = issued.at({a.client, a.seq});
        const auto& [cb, ib] = issued.at({b.client, b.seq});
        if (!dep.is_dependent(ca, ia, cb, ib)) continue;
        CHECK(pos0.at(order_key(a)) < pos0.at(order_key(b)));
      }
    }
  }
}

TEST_CASE("smr executes sequentially in one total order at every replica") {
  Rig rig(EngineKind::smr, 4, 2, 2, 64);
  std::thread t([&] {
    ClientProxy proxy = rig.proxy(1);
    for (int i = 0; i < 100; i++) proxy.execute(kKvRead, encode_kv_input(kKvRead, i % 64));
  });
  ClientProxy proxy = rig.proxy(0);
  for (int i = 0; i < 100; i++) proxy.execute(kKvUpdate, encode_kv_input(kKvUpdate, i % 64, i));
  t.join();
  REQUIRE(rig.finish());

  auto log = rig.engine->execution_log();
  std::vector<std::vector<std::pair<ClientId, ClientSeq>>> order(2);
  std::vector<std::vector<ExecRecord>> per_replica(2);
  for (const auto& r : log) per_replica[r.replica].push_back(r);
  for (int rep = 0; rep < 2; rep++) {
    auto& v = per_replica[rep];
    std::sort(v.begin(), v.end(),
              [](const ExecRecord& a, const ExecRecord& b) { return a.t_start < b.t_start; });
    // Sequential: no two executions overlap, reads included.
    for (size_t i = 1; i < v.size(); i++) CHECK(v[i - 1].t_end <= v[i].t_start);
    for (const auto& r : v) order[rep].emplace_back(r.client, r.seq);
  }
  CHECK(order[0] == order[1]);  // identical execution order at every replica
}

TEST_CASE("smr and psmr reach the same state for updates on distinct keys") {
  auto run = [](EngineKind kind) {
    Rig rig(kind, 4, 2, 1, 64);
    ClientProxy proxy = rig.proxy(0);
    for (int64_t key = 0; key < 48; key++)
      proxy.execute(kKvUpdate, encode_kv_input(kKvUpdate, key, static_cast<uint64_t>(key) * 3 + 1));
    REQUIRE(rig.finish());
    return rig.engine->state_digests();
  };
  auto smr = run(EngineKind::smr);
  auto psmr = run(EngineKind::psmr);
  REQUIRE(smr.size() == 2);
  REQUIRE(psmr.size() == 2);
  CHECK(smr[0] == smr[1]);
  CHECK(psmr[0] == psmr[1]);
  CHECK(smr[0] == psmr[0]);
}

TEST_CASE("spsmr dispatches independent commands to workers concurrently") {
  Rig rig(EngineKind::spsmr, 4, 1, 4, 100, 30000);
  std::vector<std::unique_ptr<ClientProxy>> proxies;
  for (ClientId c = 0; c < 4; c++) proxies.push_back(std::make_unique<ClientProxy>(rig.proxy(c)));
  for (ClientId c = 0; c < 4; c++)
    proxies[c]->submit(kKvRead, encode_kv_input(kKvRead, static_cast<int64_t>(c)));
  for (auto& p : proxies) CHECK(p->await_next(5000ms));
  REQUIRE(rig.finish());
  auto log = rig.engine->execution_log();
  REQUIRE(log.size() == 4);
  int concurrent = 0;
  for (size_t i = 0; i < log.size(); i++)
    for (size_t j = i + 1; j < log.size(); j++)
      if (overlaps(log[i], log[j])) concurrent++;
  CHECK(concurrent >= 3);  // reads on distinct keys ran together
}

TEST_CASE("spsmr serializes a conditional conflict behind the in-flight command") {
  Rig rig(EngineKind::spsmr, 2, 1, 2, 100, 40000);
  ClientProxy a = rig.proxy(0);
  ClientProxy b = rig.proxy(1);
  a.submit(kKvRead, encode_kv_input(kKvRead, 5));
  std::this_thread::sleep_for(5ms);  // let the read reach a worker
  b.submit(kKvUpdate, encode_kv_input(kKvUpdate, 5, 9));
  CHECK(a.await_next(5000ms));
  CHECK(b.await_next(5000ms));
  REQUIRE(rig.finish());
  auto log = rig.engine->execution_log();
  REQUIRE(log.size() == 2);
  const ExecRecord& read = log[0].cid == kKvRead ? log[0] : log[1];
  const ExecRecord& update = log[0].cid == kKvRead ? log[1] : log[0];
  CHECK(read.t_end <= update.t_start);
}

TEST_CASE("spsmr quiesces fully before an insert") {
  Rig rig(EngineKind::spsmr, 4, 1, 1, 100, 25000);
  ClientProxy proxy = rig.proxy(0);
  for (int64_t key = 0; key < 3; key++) proxy.submit(kKvRead, encode_kv_input(kKvRead, key));
  proxy.submit(kKvInsert, encode_kv_input(kKvInsert, 900, 1));
  while (proxy.outstanding() > 0) CHECK(proxy.await_next(5000ms));
  REQUIRE(rig.finish());
  auto log = rig.engine->execution_log();
  REQUIRE(log.size() == 4);
  uint64_t insert_start = 0;
  uint64_t max_read_end = 0;
  for (const auto& r : log) {
    if (r.cid == kKvInsert)
      insert_start = r.t_start;
    else
      max_read_end = std::max(max_read_end, r.t_end);
  }
  CHECK(max_read_end <= insert_start);
}

TEST_CASE("norep runs the same scheduler without an ordering layer") {
  SUBCASE("one worker behaves like a sequential server") {
    Rig rig(EngineKind::norep, 1, 1, 1, 64);
    ClientProxy proxy = rig.proxy(0);
    for (int i = 0; i < 50; i++) proxy.execute(kKvUpdate, encode_kv_input(kKvUpdate, i % 64, i));
    REQUIRE(rig.finish());
    auto log = rig.engine->execution_log();
    std::sort(log.begin(), log.end(),
              [](const ExecRecord& a, const ExecRecord& b) { return a.t_start < b.t_start; });
    for (size_t i = 1; i < log.size(); i++) CHECK(log[i - 1].t_end <= log[i].t_start);
  }
  SUBCASE("several workers overlap on independent reads") {
    Rig rig(EngineKind::norep, 3, 1, 3, 100, 30000);
    std::vector<std::unique_ptr<ClientProxy>> proxies;
    for (ClientId c = 0; c < 3; c++) proxies.push_back(std::make_unique<ClientProxy>(rig.proxy(c)));
    for (ClientId c = 0; c < 3; c++)
      proxies[c]->submit(kKvRead, encode_kv_input(kKvRead, static_cast<int64_t>(c)));
    for (auto& p : proxies) CHECK(p->await_next(5000ms));
    REQUIRE(rig.finish());
    auto log = rig.engine->execution_log();
    bool any_overlap = false;
    for (size_t i = 0; i < log.size(); i++)
      for (size_t j = i + 1; j < log.size(); j++) any_overlap |= overlaps(log[i], log[j]);
    CHECK(any_overlap);
  }
}

TEST_CASE("random gamma fuzz drains and keeps the engine deadlock free") {
  for (uint64_t seed : {11ull, 12ull, 13ull}) {
    Rig rig(EngineKind::psmr, 4, 1, 2, 32);
    auto worker = [&](ClientId id) {
      ClientProxy proxy =
          rig.proxy_with(id, CGFunction::random_subset_rule(4, seed * 1000 + id));
      for (int i = 0; i < 400; i++) {
        proxy.submit(kKvRead, encode_kv_input(kKvRead, static_cast<int64_t>(i % 32)));
        if (proxy.outstanding() >= 16) REQUIRE(proxy.await_next(10000ms));
      }
      while (proxy.outstanding() > 0) REQUIRE(proxy.await_next(10000ms));
    };
    std::thread t([&] { worker(1); });
    worker(0);
    t.join();
    if (rig.fabric) rig.fabric->close();
    DeadlockResult r = detect_deadlock(*rig.engine, 10000ms);
    CHECK(r.drained);
  }
}

TEST_CASE("executor disagreement mutant wedges and is reported") {
  FaultPlan faults;
  faults.disagree_replica = 0;
  Rig rig(EngineKind::psmr, 3, 1, 1, 100, 0, faults);
  ClientProxy proxy = rig.proxy(0);
  proxy.submit(kKvInsert, encode_kv_input(kKvInsert, 500, 1));  // gamma = {1,2,3}
  CHECK_FALSE(proxy.await_next(1500ms));  // nobody executes it
  rig.fabric->close();
  DeadlockResult r = detect_deadlock(*rig.engine, 1500ms);
  CHECK_FALSE(r.drained);
  CHECK(r.dump.find("waiting") != std::string::npos);
}

TEST_CASE("execute after shutdown reports unavailability") {
  Rig rig(EngineKind::psmr, 2, 1, 1);
  rig.fabric->close();
  rig.engine->join(5000ms);
  ClientProxy proxy = rig.proxy(0);
  CHECK_THROWS_AS(proxy.execute(kKvRead, encode_kv_input(kKvRead, 1)), UnavailableError);
}

TEST_CASE("cross-replica determinism on a mixed workload") {
  Rig rig(EngineKind::psmr, 4, 2, 2, 32);
  std::vector<ReplicaResponse> responses;
  std::thread t([&] {
    ClientProxy proxy = rig.proxy(1);
    std::mt19937_64 rng(40);
    for (int i = 0; i < 150; i++) {
      CommandId cid = 1 + rng() % 4;
      proxy.submit(cid, encode_kv_input(cid, static_cast<int64_t>(rng() % 32), rng()));
      if (proxy.outstanding() >= 10) REQUIRE(proxy.await_next(10000ms));
    }
    while (proxy.outstanding() > 0) REQUIRE(proxy.await_next(10000ms));
    proxy.drain_duplicates(2 * proxy.issued(), 3000ms);
    for (const auto& [seq, outs] : proxy.replica_outputs())
      for (const auto& [replica, output] : outs) responses.push_back({1, seq, replica, output});
  });
  ClientProxy proxy = rig.proxy(0);
  std::mt19937_64 rng(41);
  for (int i = 0; i < 150; i++) {
    CommandId cid = 1 + rng() % 4;
    proxy.submit(cid, encode_kv_input(cid, static_cast<int64_t>(rng() % 32), rng()));
    if (proxy.outstanding() >= 10) REQUIRE(proxy.await_next(10000ms));
  }
  while (proxy.outstanding() > 0) REQUIRE(proxy.await_next(10000ms));
  proxy.drain_duplicates(2 * proxy.issued(), 3000ms);
  t.join();
  for (const auto& [seq, outs] : proxy.replica_outputs())
    for (const auto& [replica, output] : outs) responses.push_back({0, seq, replica, output});
  REQUIRE(rig.finish());

  DeterminismResult det = check_determinism(rig.engine->state_digests(), responses, 2);
  CHECK(det.verdict == Verdict::pass);

  OrderAuditResult audit = audit_order(rig.engine->delivery_log());
  CHECK(audit.verdict == Verdict::pass);
}

TEST_CASE("request wire format round-trips") {
  Request req{3, 99, kKvUpdate, GroupSet({1, 4}), encode_kv_input(kKvUpdate, 7, 8)};
  Request back = Request::decode(req.encode());
  CHECK(back.client_id == 3);
  CHECK(back.client_seq == 99);
  CHECK(back.cid == kKvUpdate);
  CHECK(back.gamma == GroupSet({1, 4}));
  CHECK(back.input == req.input);
}

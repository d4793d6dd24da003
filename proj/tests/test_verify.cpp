#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "psmr/verify.hpp"

using namespace psmr;

namespace {

HistoryEvent ev(ClientId client, ClientSeq seq, CommandId cid, int64_t key, uint64_t value,
                const std::string& output, uint64_t invoke, uint64_t response) {
  return {client, seq, cid, encode_kv_input(cid, key, value), output, invoke, response};
}

std::string ok_out() { return encode_kv_output(KvStatus::ok); }
std::string read_out(uint64_t v) { return encode_kv_output(KvStatus::ok, v, true); }
std::string read_missing() { return encode_kv_output(KvStatus::key_missing, 0, true); }

}  // namespace

TEST_CASE("single-client histories are their own witness") {
  KvSequentialSpec spec;
  std::vector<HistoryEvent> h = {
      ev(0, 0, kKvInsert, 5, 10, ok_out(), 0, 10),
      ev(0, 1, kKvRead, 5, 0, read_out(10), 20, 30),
      ev(0, 2, kKvUpdate, 5, 11, ok_out(), 40, 50),
      ev(0, 3, kKvRead, 5, 0, read_out(11), 60, 70),
      ev(0, 4, kKvDelete, 5, 0, ok_out(), 80, 90),
      ev(0, 5, kKvRead, 5, 0, read_missing(), 95, 99),
  };
  LinCheckResult r = check_linearizable(h, spec);
  CHECK(r.verdict == Verdict::pass);
  REQUIRE(r.witness.size() == h.size());
  for (size_t i = 0; i < h.size(); i++) CHECK(r.witness[i].seq == i);
}

TEST_CASE("stale read after a completed update is a violation") {
  KvSequentialSpec spec;
  spec.initial.emplace(5, 1);
  // c1's update(5,2) completes before c2's read(5) starts, yet the read
  // returns the old value.
  std::vector<HistoryEvent> h = {
      ev(1, 0, kKvUpdate, 5, 2, ok_out(), 0, 10),
      ev(2, 0, kKvRead, 5, 0, read_out(1), 20, 30),
  };
  LinCheckResult r = check_linearizable(h, spec);
  CHECK(r.verdict == Verdict::violation);
  CHECK(r.failing_prefix.size() == 2);
}

TEST_CASE("concurrent operations may be ordered either way") {
  KvSequentialSpec spec;
  spec.initial.emplace(5, 1);
  // The read overlaps the update; returning either value is linearizable.
  for (uint64_t read_value : {1ull, 2ull}) {
    std::vector<HistoryEvent> h = {
        ev(1, 0, kKvUpdate, 5, 2, ok_out(), 0, 100),
        ev(2, 0, kKvRead, 5, 0, read_out(read_value), 10, 90),
    };
    CHECK(check_linearizable(h, spec).verdict == Verdict::pass);
  }
  // But a value that was never written is not.
  std::vector<HistoryEvent> h = {
      ev(1, 0, kKvUpdate, 5, 2, ok_out(), 0, 100),
      ev(2, 0, kKvRead, 5, 0, read_out(7), 10, 90),
  };
  CHECK(check_linearizable(h, spec).verdict == Verdict::violation);
}

TEST_CASE("cross-key composition stitches a real-time-consistent witness") {
  KvSequentialSpec spec;
  spec.initial.emplace(1, 10);
  spec.initial.emplace(2, 20);
  std::vector<HistoryEvent> h = {
      ev(1, 0, kKvUpdate, 1, 11, ok_out(), 0, 5),
      ev(2, 0, kKvRead, 2, 0, read_out(20), 2, 8),
      ev(1, 1, kKvUpdate, 2, 21, ok_out(), 10, 15),
      ev(2, 1, kKvRead, 1, 0, read_out(11), 12, 18),
      ev(3, 0, kKvRead, 2, 0, read_out(21), 20, 25),
  };
  LinCheckResult r = check_linearizable(h, spec);
  REQUIRE(r.verdict == Verdict::pass);
  REQUIRE(r.witness.size() == h.size());
  // Real-time order across keys is respected in the stitched witness.
  for (size_t i = 0; i < r.witness.size(); i++)
    for (size_t j = i + 1; j < r.witness.size(); j++)
      CHECK_FALSE(r.witness[j].response_ns < r.witness[i].invoke_ns);
}

TEST_CASE("a violation on one key is found even among healthy keys") {
  KvSequentialSpec spec;
  spec.initial.emplace(1, 10);
  spec.initial.emplace(2, 20);
  std::vector<HistoryEvent> h = {
      ev(1, 0, kKvRead, 1, 0, read_out(10), 0, 5),
      ev(1, 1, kKvUpdate, 2, 99, ok_out(), 10, 15),
      ev(2, 0, kKvRead, 2, 0, read_out(20), 30, 40),  // stale: update finished at 15
  };
  CHECK(check_linearizable(h, spec).verdict == Verdict::violation);
}

TEST_CASE("search budget exhaustion is inconclusive, not a violation") {
  KvSequentialSpec spec;
  spec.initial.emplace(0, 1);
  // Many concurrent updates on one key force a wide search frontier: the
  // later read pins an update from the middle of the pack as the final one,
  // so the depth-first dive has to backtrack through many permutations.
  std::vector<HistoryEvent> h;
  for (ClientSeq i = 0; i < 12; i++)
    h.push_back(ev(static_cast<ClientId>(i), 0, kKvUpdate, 0, i + 2, ok_out(), 0, 1000));
  h.push_back(ev(99, 0, kKvRead, 0, 0, read_out(5), 2000, 2001));
  LinCheckResult r = check_linearizable(h, spec, 20);
  CHECK(r.verdict == Verdict::inconclusive);
  CHECK(check_linearizable(h, spec).verdict == Verdict::pass);
}

TEST_CASE("verdicts are pure functions of their inputs") {
  KvSequentialSpec spec;
  spec.initial.emplace(5, 1);
  std::vector<HistoryEvent> h = {
      ev(1, 0, kKvUpdate, 5, 2, ok_out(), 0, 10),
      ev(2, 0, kKvRead, 5, 0, read_out(1), 20, 30),
  };
  CHECK(check_linearizable(h, spec).verdict == check_linearizable(h, spec).verdict);

  std::vector<DeliveryRecord> crossed = {
      {0, 1, GroupId::all(), 1, 1, 0},
      {0, 1, GroupId::all(), 2, 2, 0},
      {1, 1, GroupId::all(), 2, 2, 0},
      {1, 1, GroupId::all(), 1, 1, 0},
  };
  OrderAuditResult a = audit_order(crossed);
  OrderAuditResult b = audit_order(crossed);
  CHECK(a.verdict == b.verdict);
  CHECK(a.cycle == b.cycle);
}

TEST_CASE("randomized sequential histories over the oracle map always linearize") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; trial++) {
    KvSequentialSpec spec = KvSequentialSpec::preloaded(8);
    std::map<int64_t, uint64_t> state = spec.initial;
    std::vector<HistoryEvent> h;
    uint64_t now = 0;
    for (int i = 0; i < 60; i++) {
      CommandId cid = 1 + rng() % 4;
      int64_t key = static_cast<int64_t>(rng() % 12);
      uint64_t value = rng() % 100;
      std::string input = encode_kv_input(cid, key, value);
      std::string output = spec.apply(state, cid, input);
      uint64_t invoke = now + rng() % 3;
      uint64_t response = invoke + 1 + rng() % 5;
      now = response;
      h.push_back({0, static_cast<ClientSeq>(i), cid, input, output, invoke, response});
    }
    CHECK(check_linearizable(h, spec).verdict == Verdict::pass);
  }
}

namespace {
DeliveryRecord dr(uint32_t replica, uint32_t thread, uint32_t group, uint64_t seq) {
  return {replica, thread, group == 0 ? GroupId::all() : GroupId::numbered(group), seq, seq, 0};
}
}  // namespace

TEST_CASE("order audit") {
  SUBCASE("a single chain is trivially acyclic") {
    std::vector<DeliveryRecord> log;
    for (uint64_t s = 1; s <= 10; s++) {
      log.push_back(dr(0, 0, 0, s));
      log.push_back(dr(1, 0, 0, s));
    }
    CHECK(audit_order(log).verdict == Verdict::pass);
  }

  SUBCASE("crossed orders at two subscribers form a reported cycle") {
    std::vector<DeliveryRecord> log;
    log.push_back(dr(0, 1, 0, 1));
    log.push_back(dr(0, 1, 0, 2));
    log.push_back(dr(1, 1, 0, 2));  // replica 1 saw them reversed
    log.push_back(dr(1, 1, 0, 1));
    OrderAuditResult r = audit_order(log);
    CHECK(r.verdict == Verdict::violation);
    CHECK(r.cycle.size() == 2);
  }

  SUBCASE("a missing delivery is incomplete input") {
    std::vector<DeliveryRecord> log;
    log.push_back(dr(0, 1, 0, 1));
    log.push_back(dr(0, 1, 0, 2));
    log.push_back(dr(1, 1, 0, 1));  // replica 1 lost message 2
    OrderAuditResult r = audit_order(log);
    CHECK(r.verdict == Verdict::violation);
    CHECK(r.detail.find("incomplete") != std::string::npos);
  }

  SUBCASE("merged private and shared streams stay acyclic") {
    // Two replicas, two threads each: private streams interleaved with the
    // shared one exactly as the merge rule would order them.
    std::vector<DeliveryRecord> log;
    for (uint32_t rep = 0; rep < 2; rep++) {
      log.push_back(dr(rep, 1, 1, 1));
      log.push_back(dr(rep, 1, 0, 1));
      log.push_back(dr(rep, 1, 1, 2));
      log.push_back(dr(rep, 2, 2, 1));
      log.push_back(dr(rep, 2, 0, 1));
      log.push_back(dr(rep, 2, 2, 2));
    }
    CHECK(audit_order(log).verdict == Verdict::pass);
  }
}

TEST_CASE("determinism check") {
  SUBCASE("equal digests and outputs pass") {
    std::vector<ReplicaResponse> rs = {
        {0, 0, 0, "a"}, {0, 0, 1, "a"}, {0, 1, 0, "b"}, {0, 1, 1, "b"}};
    CHECK(check_determinism({7, 7}, rs, 2).verdict == Verdict::pass);
  }
  SUBCASE("digest divergence is reported") {
    CHECK(check_determinism({7, 8}, {}, 2).verdict == Verdict::violation);
  }
  SUBCASE("output divergence is reported") {
    std::vector<ReplicaResponse> rs = {{0, 0, 0, "a"}, {0, 0, 1, "b"}};
    CHECK(check_determinism({7, 7}, rs, 2).verdict == Verdict::violation);
  }
  SUBCASE("a missing replica response is reported") {
    std::vector<ReplicaResponse> rs = {{0, 0, 0, "a"}};
    CHECK(check_determinism({7, 7}, rs, 2).verdict == Verdict::violation);
  }
}

TEST_CASE("artifact files round-trip") {
  RunArtifacts a;
  a.execution.push_back({0, 2, 1, 5, kKvRead, 100, 200, ExecRecord::Mode::parallel});
  a.execution.push_back({1, 1, 1, 6, kKvInsert, 300, 400, ExecRecord::Mode::synchronous});
  a.delivery.push_back({0, 2, GroupId::numbered(2), 1, 10, 1234});
  a.delivery.push_back({0, 2, GroupId::all(), 1, 11, 999});
  a.digests = {42, 42};
  a.responses.push_back({1, 5, 0, encode_kv_output(KvStatus::ok, 7, true)});
  a.history.push_back(ev(1, 5, kKvRead, 3, 0, read_out(7), 100, 220));
  a.replicas = 2;
  a.preload = 16;

  std::string dir = (std::filesystem::temp_directory_path() / "psmr_artifacts_test").string();
  write_artifacts(dir, a);
  RunArtifacts b = read_artifacts(dir);
  REQUIRE(b.execution.size() == 2);
  CHECK(b.execution[1].mode == ExecRecord::Mode::synchronous);
  CHECK(b.execution[0].thread == 2);
  REQUIRE(b.delivery.size() == 2);
  CHECK(b.delivery[1].group.is_all());
  CHECK(b.digests == std::vector<uint64_t>{42, 42});
  REQUIRE(b.responses.size() == 1);
  CHECK(b.responses[0].output == encode_kv_output(KvStatus::ok, 7, true));
  REQUIRE(b.history.size() == 1);
  CHECK(b.history[0].output == read_out(7));
  CHECK(b.replicas == 2);
  CHECK(b.preload == 16);
  std::filesystem::remove_all(dir);
}

TEST_CASE("missing artifact directory is an io error") {
  CHECK_THROWS_AS(read_artifacts("/nonexistent/psmr"), IoError);
}

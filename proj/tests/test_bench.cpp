#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "psmr/bench.hpp"

using namespace psmr;

namespace {
WorkloadSpec small_spec(EngineKind kind) {
  WorkloadSpec spec;
  spec.engine = kind;
  spec.threads = 4;
  spec.replicas = kind == EngineKind::norep ? 1 : 2;
  spec.clients = 4;
  spec.window = 8;
  spec.commands_per_client = 100;
  spec.key_space = 512;
  spec.preload = 512;
  spec.fanout = 16;
  spec.mix = {0.6, 0.2, 0.1, 0.1};
  spec.null_period = 16;
  spec.idle_null_us = 300;
  spec.seed = 5;
  spec.record_history = false;
  return spec;
}
}  // namespace

TEST_CASE("mix parsing and validation") {
  MixSpec mix = MixSpec::parse("read=0.5,update=0.3,insert=0.1,delete=0.1");
  CHECK(mix.read == doctest::Approx(0.5));
  CHECK(mix.del == doctest::Approx(0.1));
  CHECK_THROWS_AS(MixSpec::parse("read:1"), ConfigError);

  WorkloadSpec spec = small_spec(EngineKind::smr);
  spec.mix = {0.5, 0.2, 0.1, 0.1};  // sums to 0.9
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("dependent percentage shorthand") {
  WorkloadSpec spec = small_spec(EngineKind::smr);
  spec.mix = MixSpec{};  // default read-only
  spec.dependent_pct = 20.0;
  MixSpec m = spec.effective_mix();
  CHECK(m.read == doctest::Approx(0.8));
  CHECK(m.insert == doctest::Approx(0.1));
  CHECK(m.del == doctest::Approx(0.1));
  CHECK(m.update == doctest::Approx(0.0));

  SUBCASE("consistent explicit mix is accepted") {
    spec.mix = {0.8, 0.0, 0.1, 0.1};
    CHECK(spec.effective_mix().read == doctest::Approx(0.8));
  }
  SUBCASE("inconsistent explicit mix is rejected") {
    spec.mix = {0.4, 0.3, 0.2, 0.1};  // inserts+deletes make 30%, not 20%
    CHECK_THROWS_AS(spec.effective_mix(), ConfigError);
  }
}

TEST_CASE("streams replay identically for one seed and diverge across seeds") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  auto a = generate_stream(spec, 2, 500);
  auto b = generate_stream(spec, 2, 500);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); i++) {
    CHECK(a[i].cid == b[i].cid);
    CHECK(a[i].key == b[i].key);
    CHECK(a[i].value == b[i].value);
  }
  auto c = generate_stream(spec, 3, 500);
  bool same = true;
  for (size_t i = 0; i < a.size(); i++) same &= a[i].key == c[i].key;
  CHECK_FALSE(same);

  WorkloadSpec other = spec;
  other.seed = 6;
  auto d = generate_stream(other, 2, 500);
  same = true;
  for (size_t i = 0; i < a.size(); i++) same &= a[i].key == d[i].key;
  CHECK_FALSE(same);
}

TEST_CASE("uniform keys land evenly across partition groups") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.key_space = 4 * 100;
  spec.mix = {1, 0, 0, 0};
  std::map<uint32_t, int> counts;
  CGFunction cg = kv_partition_cg(4);
  const int n = 40000;
  for (ClientId c = 0; c < 4; c++)
    for (auto& cmd : generate_stream(spec, c, n / 4))
      counts[cg.groups_for(cmd.cid, encode_kv_input(cmd.cid, cmd.key)).min_index()]++;
  // Multinomial with p=1/4: expect n/4 per group within 5 sigma.
  double expect = n / 4.0;
  double sigma = std::sqrt(n * 0.25 * 0.75);
  for (uint32_t g = 1; g <= 4; g++)
    CHECK(std::abs(counts[g] - expect) < 5 * sigma);
}

TEST_CASE("zipf sampling matches the analytic mass ratio") {
  SUBCASE("pmf ratio of ranks 1 and 2 is exactly the exponent-1 ratio") {
    ZipfSampler zipf(1000, 1.0);
    CHECK(zipf.pmf(0) / zipf.pmf(1) == doctest::Approx(2.0));
  }
  SUBCASE("sampled frequencies approach the pmf") {
    ZipfSampler zipf(1000, 1.0);
    std::mt19937_64 rng(3);
    const int n = 200000;
    int rank1 = 0, rank2 = 0;
    for (int i = 0; i < n; i++) {
      uint64_t r = zipf.sample(rng);
      if (r == 0) rank1++;
      if (r == 1) rank2++;
    }
    CHECK(static_cast<double>(rank1) / rank2 == doctest::Approx(2.0).epsilon(0.1));
  }
}

TEST_CASE("read-only partition workloads never enter synchronous mode") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.mix = {1, 0, 0, 0};
  spec.commands_per_client = 50;
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  CHECK(r.metrics.completed == 4 * 50);
  for (const auto& rec : r.artifacts.execution)
    CHECK(rec.mode == ExecRecord::Mode::parallel);
}

TEST_CASE("run_workload executes, verifies and reports coherent metrics") {
  for (EngineKind kind :
       {EngineKind::psmr, EngineKind::spsmr, EngineKind::smr, EngineKind::norep}) {
    CAPTURE(engine_name(kind));
    WorkloadSpec spec = small_spec(kind);
    RunResult r = run_workload(spec);
    REQUIRE(r.metrics.drained);
    CHECK(r.metrics.issued == spec.clients * spec.commands_per_client);
    CHECK(r.metrics.completed == r.metrics.issued);
    CHECK(r.metrics.verified);
    CHECK(r.metrics.taint.empty());
    CHECK(r.metrics.throughput_cps > 0);
    CHECK(r.artifacts.digests.size() == (kind == EngineKind::norep ? 1 : 2));
    uint64_t executed = 0;
    for (const auto& t : r.counters.per_thread) executed += t.executed;
    CHECK(executed == r.metrics.issued * (kind == EngineKind::norep ? 1 : 2));
  }
}

TEST_CASE("histories recorded with window 1 pass the linearizability checker") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.window = 1;
  spec.commands_per_client = 30;
  spec.key_space = 16;
  spec.preload = 16;
  spec.record_history = true;
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  REQUIRE(r.artifacts.history.size() == 4 * 30);
  LinCheckResult lin =
      check_linearizable(r.artifacts.history, KvSequentialSpec::preloaded(spec.preload));
  CHECK(lin.verdict == Verdict::pass);
}

TEST_CASE("broadcast rule runs verify end to end") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.cg_rule = CgRule::broadcast;
  spec.mix = {0.7, 0.3, 0, 0};
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  CHECK(r.metrics.verified);
  bool saw_synchronous = false;
  for (const auto& rec : r.artifacts.execution)
    saw_synchronous |= rec.mode == ExecRecord::Mode::synchronous;
  CHECK(saw_synchronous);  // updates are write-type, go to all groups
}

TEST_CASE("batched fabric runs verify end to end") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.batch_limit = 8192;
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  CHECK(r.metrics.completed == 4 * 100);
  CHECK(r.metrics.verified);
}

TEST_CASE("replica snapshots are recorded and identical") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.record_snapshots = true;
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  REQUIRE(r.artifacts.snapshots.size() == 2);
  CHECK(r.artifacts.snapshots[0] == r.artifacts.snapshots[1]);
  CHECK_FALSE(r.artifacts.snapshots[0].empty());
}

TEST_CASE("server-side gamma recomputation agrees with the carried sets") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.debug_recompute_gamma = true;  // workers assert carried == recomputed
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  CHECK(r.metrics.verified);
}

TEST_CASE("a planted skipped delivery taints the run") {
  WorkloadSpec spec = small_spec(EngineKind::smr);
  spec.faults.skip_replica = 1;
  spec.faults.skip_nth = 5;
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  CHECK_FALSE(r.metrics.verified);
  CHECK(r.metrics.taint.find("determinism") != std::string::npos);
}

TEST_CASE("duration-bounded runs stop issuing at the deadline") {
  WorkloadSpec spec = small_spec(EngineKind::smr);
  spec.commands_per_client = 0;
  spec.duration_s = 0.2;
  RunResult r = run_workload(spec);
  REQUIRE(r.metrics.drained);
  CHECK(r.metrics.issued > 0);
  CHECK(r.metrics.completed == r.metrics.issued);
}

TEST_CASE("csv report has the pinned column order") {
  CHECK(metrics_csv_header() ==
        "engine,k,n_replicas,clients,mix,dependent_pct,key_dist,seed,throughput_cps,"
        "lat_mean_us,lat_p50_us,lat_p99_us");
  WorkloadSpec spec = small_spec(EngineKind::smr);
  RunMetrics m;
  m.throughput_cps = 123.5;
  std::string row = metrics_csv_row(spec, m);
  size_t commas = static_cast<size_t>(std::count(row.begin(), row.end(), ','));
  CHECK(commas == 11);  // 12 columns; the mix field uses semicolons
  CHECK(row.rfind("smr,4,2,4,", 0) == 0);
}

TEST_CASE("json report carries the same fields plus per-thread counters") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  RunMetrics m;
  m.throughput_cps = 10;
  m.per_thread.push_back({0, 1, 5, 5});
  std::string text = metrics_json({{spec, m}});
  CHECK(text.find("\"engine\": \"psmr\"") != std::string::npos);
  CHECK(text.find("\"throughput_cps\"") != std::string::npos);
  CHECK(text.find("\"per_thread\"") != std::string::npos);
  CHECK(text.find("\"dependent_pct\": null") != std::string::npos);
}

TEST_CASE("latency cdf file is sorted ascending") {
  RunMetrics m;
  m.latency_samples_us = {5.0, 1.0, 3.0, 2.0, 4.0};
  std::ostringstream os;
  write_latency_cdf(os, m);
  std::istringstream is(os.str());
  double prev = -1, v;
  int n = 0;
  while (is >> v) {
    CHECK(v >= prev);
    prev = v;
    n++;
  }
  CHECK(n == 5);
}

TEST_CASE("single-stream engines work at k=1 where the full set is a singleton") {
  for (EngineKind kind : {EngineKind::smr, EngineKind::spsmr, EngineKind::psmr}) {
    CAPTURE(engine_name(kind));
    WorkloadSpec spec = small_spec(kind);
    spec.threads = 1;
    spec.commands_per_client = 40;
    RunResult r = run_workload(spec);
    REQUIRE(r.metrics.drained);
    CHECK(r.metrics.completed == 4 * 40);
    CHECK(r.metrics.verified);
  }
}

TEST_CASE("thread sweep returns one point per requested width") {
  WorkloadSpec spec = small_spec(EngineKind::psmr);
  spec.commands_per_client = 40;
  auto points = sweep_threads(spec, {1, 2});
  REQUIRE(points.size() == 2);
  CHECK(points[0].threads == 1);
  CHECK(points[1].threads == 2);
  for (const auto& p : points) {
    CHECK(p.metrics.drained);
    CHECK(p.metrics.throughput_cps > 0);
    CHECK(p.metrics.per_thread_throughput ==
          doctest::Approx(p.metrics.throughput_cps / p.threads));
  }
}

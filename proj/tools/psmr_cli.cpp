#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "psmr/bench.hpp"
#include "psmr/verify.hpp"

namespace {

using namespace psmr;

struct RunFlags {
  std::string engine = "psmr";
  uint32_t threads = 4;
  uint32_t replicas = 2;
  uint32_t clients = 8;
  uint32_t window = 50;
  uint64_t keys = 100000;
  uint64_t preload = 0;  // 0: same as keys
  std::string dist = "uniform";
  std::string mix;
  double dependent_pct = -1;
  uint64_t commands = 1000;
  double duration = 0;
  uint64_t seed = 1;
  uint32_t fanout = 64;
  uint64_t service_us = 0;
  std::string service_mode = "wait";
  uint64_t batch_bytes = 0;
  uint32_t null_period = 64;
  std::string cg = "partition";
  bool history = false;
  bool snapshots = false;
  std::string out;
  std::string format = "csv";
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--engine", f.engine, "engine: psmr|spsmr|smr|norep");
  cmd->add_option("--threads", f.threads, "worker threads per replica (k)");
  cmd->add_option("--replicas", f.replicas, "replica count");
  cmd->add_option("--clients", f.clients, "closed-loop client count");
  cmd->add_option("--window", f.window, "outstanding requests per client");
  cmd->add_option("--keys", f.keys, "key space size");
  cmd->add_option("--preload", f.preload, "preloaded keys (default: key space)");
  cmd->add_option("--dist", f.dist, "key distribution: uniform|zipf");
  cmd->add_option("--mix", f.mix, "command mix, e.g. read=0.9,update=0.1");
  cmd->add_option("--dependent-pct", f.dependent_pct, "percent inserts+deletes");
  cmd->add_option("--commands", f.commands, "commands per client");
  cmd->add_option("--duration", f.duration, "run duration in seconds (overrides count)");
  cmd->add_option("--seed", f.seed, "workload seed");
  cmd->add_option("--fanout", f.fanout, "b+-tree fanout");
  cmd->add_option("--service-us", f.service_us, "added per-command service time");
  cmd->add_option("--service-mode", f.service_mode, "service time mode: wait|spin");
  cmd->add_option("--batch-bytes", f.batch_bytes, "fabric batch limit, 0 disables");
  cmd->add_option("--null-period", f.null_period, "stamps between heartbeat rounds");
  cmd->add_option("--cg", f.cg, "command-to-groups rule: partition|broadcast");
  cmd->add_flag("--history", f.history, "record a client history for verification");
  cmd->add_flag("--snapshots", f.snapshots, "dump per-replica store snapshots for diffing");
  cmd->add_option("--out", f.out, "directory for metrics and run artifacts");
  cmd->add_option("--format", f.format, "metrics format: csv|json");
}

WorkloadSpec to_spec(const RunFlags& f) {
  WorkloadSpec spec;
  spec.engine = parse_engine(f.engine);
  spec.threads = f.threads;
  spec.replicas = spec.engine == EngineKind::norep ? 1 : f.replicas;
  spec.clients = f.clients;
  spec.window = f.window;
  spec.key_space = f.keys;
  spec.preload = f.preload ? f.preload : f.keys;
  if (f.dist == "uniform")
    spec.dist = KeyDist::uniform;
  else if (f.dist == "zipf")
    spec.dist = KeyDist::zipf;
  else
    throw ConfigError("unknown distribution '" + f.dist + "'");
  if (!f.mix.empty()) spec.mix = MixSpec::parse(f.mix);
  if (f.dependent_pct >= 0) spec.dependent_pct = f.dependent_pct;
  spec.commands_per_client = f.commands;
  spec.duration_s = f.duration;
  spec.seed = f.seed;
  spec.fanout = f.fanout;
  spec.service_time_us = f.service_us;
  if (f.service_mode == "wait")
    spec.service_work = ServiceWork::wait;
  else if (f.service_mode == "spin")
    spec.service_work = ServiceWork::spin;
  else
    throw ConfigError("unknown service mode '" + f.service_mode + "'");
  spec.batch_limit = f.batch_bytes;
  spec.null_period = f.null_period;
  if (f.cg == "partition")
    spec.cg_rule = CgRule::partition;
  else if (f.cg == "broadcast")
    spec.cg_rule = CgRule::broadcast;
  else
    throw ConfigError("unknown C-G rule '" + f.cg + "'");
  spec.record_history = f.history;
  spec.record_snapshots = f.snapshots;
  return spec;
}

void emit(const RunFlags& flags, const std::vector<std::pair<WorkloadSpec, RunMetrics>>& runs,
          const std::vector<const RunResult*>& results) {
  std::string text;
  if (flags.format == "json") {
    text = metrics_json(runs);
  } else {
    std::ostringstream os;
    os << metrics_csv_header() << '\n';
    for (const auto& [spec, m] : runs) os << metrics_csv_row(spec, m) << '\n';
    text = os.str();
  }
  std::cout << text;
  if (flags.out.empty()) return;

  std::filesystem::create_directories(flags.out);
  std::string metrics_name = flags.format == "json" ? "metrics.json" : "metrics.csv";
  std::ofstream mf(flags.out + "/" + metrics_name);
  mf << text;
  for (size_t i = 0; i < results.size(); i++) {
    std::string dir = results.size() == 1 ? flags.out : flags.out + "/run" + std::to_string(i);
    write_artifacts(dir, results[i]->artifacts);
    std::ofstream cdf(dir + "/latency_cdf.csv");
    write_latency_cdf(cdf, runs[i].second);
  }
}

int cmd_run(const RunFlags& flags) {
  WorkloadSpec spec = to_spec(flags);
  RunResult result = run_workload(spec);
  if (!result.metrics.drained) {
    std::cerr << "engine wedged; blocked thread state:\n" << result.deadlock_dump;
    return 1;
  }
  if (!result.metrics.taint.empty())
    std::cerr << "warning: metrics tainted: " << result.metrics.taint << '\n';
  emit(flags, {{spec, result.metrics}}, {&result});
  return result.metrics.verified || !spec.verify_run ? 0 : 1;
}

int cmd_sweep(const RunFlags& flags, const std::string& param, const std::string& values) {
  if (param != "threads") throw ConfigError("only a thread sweep is supported");
  std::vector<uint32_t> ks;
  std::istringstream is(values);
  std::string tok;
  while (std::getline(is, tok, ',')) ks.push_back(static_cast<uint32_t>(std::stoul(tok)));
  if (ks.empty()) throw ConfigError("no sweep values");

  WorkloadSpec base = to_spec(flags);
  std::vector<std::pair<WorkloadSpec, RunMetrics>> runs;
  std::vector<RunResult> results;
  for (uint32_t k : ks) {
    WorkloadSpec spec = base;
    spec.threads = k;
    results.push_back(run_workload(spec));
    runs.emplace_back(spec, results.back().metrics);
    std::cerr << "k=" << k << " throughput=" << results.back().metrics.throughput_cps
              << " cps, per-thread=" << results.back().metrics.per_thread_throughput << '\n';
  }
  std::vector<const RunResult*> ptrs;
  for (const auto& r : results) ptrs.push_back(&r);
  emit(flags, runs, ptrs);
  return 0;
}

int cmd_verify(const std::string& dir) {
  RunArtifacts a = read_artifacts(dir);
  Verdict worst = Verdict::pass;
  auto note = [&](const std::string& name, Verdict v, const std::string& detail) {
    std::cout << name << ": " << verdict_name(v) << (detail.empty() ? "" : " (" + detail + ")")
              << '\n';
    if (verdict_exit_code(v) > verdict_exit_code(worst)) worst = v;
  };

  OrderAuditResult audit = audit_order(a.delivery);
  note("order-audit", audit.verdict, audit.detail);

  DeterminismResult det = check_determinism(a.digests, a.responses, a.replicas);
  note("determinism", det.verdict, det.detail);

  if (!a.history.empty()) {
    LinCheckResult lin = check_linearizable(a.history, KvSequentialSpec::preloaded(a.preload));
    note("linearizability", lin.verdict, lin.detail);
  }
  return verdict_exit_code(worst);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"replicated state-machine engines over atomic multicast"};
  // Config file mirrors the flags under [run]/[sweep] sections; flags given
  // on the command line win.
  app.set_config("--config");
  app.require_subcommand(1);

  RunFlags run_flags;
  CLI::App* run = app.add_subcommand("run", "execute one workload");
  add_run_flags(run, run_flags);

  RunFlags sweep_flags;
  std::string sweep_param = "threads";
  std::string sweep_values;
  CLI::App* sweep = app.add_subcommand("sweep", "run a workload over a parameter range");
  add_run_flags(sweep, sweep_flags);
  sweep->add_option("--param", sweep_param, "swept parameter (threads)");
  sweep->add_option("--values", sweep_values, "comma-separated values")->required();

  std::string verify_dir;
  CLI::App* verify = app.add_subcommand("verify", "re-check a recorded run directory");
  verify->add_option("--run", verify_dir, "run artifact directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_flags);
    if (sweep->parsed()) return cmd_sweep(sweep_flags, sweep_param, sweep_values);
    if (verify->parsed()) return cmd_verify(verify_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

#include "psmr/verify.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace psmr {

std::string verdict_name(Verdict v) {
  switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::violation: return "violation";
    case Verdict::inconclusive: return "inconclusive";
  }
  return "?";
}

KvSequentialSpec KvSequentialSpec::preloaded(uint64_t n) {
  KvSequentialSpec spec;
  for (uint64_t i = 0; i < n; i++)
    spec.initial.emplace(static_cast<int64_t>(i), i * 0x9e3779b97f4a7c15ull + 1);
  return spec;
}

int64_t KvSequentialSpec::key_of(CommandId cid, std::string_view input) {
  return decode_kv_input(cid, input).key;
}

std::string KvSequentialSpec::apply(std::map<int64_t, uint64_t>& state, CommandId cid,
                                    std::string_view input) const {
  KvInput in = decode_kv_input(cid, input);
  auto it = state.find(in.key);
  switch (cid) {
    case kKvInsert:
      if (it != state.end()) return encode_kv_output(KvStatus::key_exists);
      state.emplace(in.key, in.value);
      return encode_kv_output(KvStatus::ok);
    case kKvDelete:
      if (it == state.end()) return encode_kv_output(KvStatus::key_missing);
      state.erase(it);
      return encode_kv_output(KvStatus::ok);
    case kKvRead:
      if (it == state.end()) return encode_kv_output(KvStatus::key_missing, 0, true);
      return encode_kv_output(KvStatus::ok, it->second, true);
    case kKvUpdate:
      if (it == state.end()) return encode_kv_output(KvStatus::key_missing);
      it->second = in.value;
      return encode_kv_output(KvStatus::ok);
    default:
      throw SchemaError("unknown kv command " + std::to_string(cid));
  }
}

namespace {

// Wing&Gong-style search over one key's subhistory. State space is the set
// of linearized events plus the key's value, memoized to avoid rescanning
// permutations that converge.
class KeySearch {
 public:
  KeySearch(const std::vector<HistoryEvent>& events, bool initially_present,
            uint64_t initial_value, const KvSequentialSpec& spec, uint64_t budget,
            uint64_t& nodes)
      : events_(events), spec_(spec), budget_(budget), nodes_(nodes) {
    mask_.assign((events_.size() + 63) / 64, 0);
    present_ = initially_present;
    value_ = initial_value;
  }

  // pass: order_ holds a witness permutation; inconclusive: budget exhausted.
  Verdict run() {
    order_.clear();
    return search() ? Verdict::pass : exhausted_ ? Verdict::inconclusive : Verdict::violation;
  }
  const std::vector<size_t>& witness() const { return order_; }

 private:
  bool done(size_t i) const { return (mask_[i / 64] >> (i % 64)) & 1; }
  void set_done(size_t i) { mask_[i / 64] |= 1ull << (i % 64); }
  void clear_done(size_t i) { mask_[i / 64] &= ~(1ull << (i % 64)); }

  std::string memo_key() const {
    std::string k;
    k.reserve(mask_.size() * 8 + 9);
    for (uint64_t w : mask_) put_u64(k, w);
    put_u8(k, present_ ? 1 : 0);
    put_u64(k, present_ ? value_ : 0);
    return k;
  }

  bool search() {
    if (order_.size() == events_.size()) return true;
    if (++nodes_ > budget_) {
      exhausted_ = true;
      return false;
    }
    if (!seen_.insert(memo_key()).second) return false;

    uint64_t min_resp = ~0ull;
    for (size_t i = 0; i < events_.size(); i++)
      if (!done(i)) min_resp = std::min(min_resp, events_[i].response_ns);

    for (size_t i = 0; i < events_.size(); i++) {
      if (done(i) || events_[i].invoke_ns > min_resp) continue;
      const HistoryEvent& e = events_[i];
      // Apply against the scalar key state, undo on backtrack.
      bool old_present = present_;
      uint64_t old_value = value_;
      std::map<int64_t, uint64_t> tiny;
      if (present_) tiny.emplace(0, value_);
      std::string expect = spec_.apply(tiny, e.cid, rekeyed(e.input));
      if (expect != e.output) continue;
      present_ = !tiny.empty();
      if (present_) value_ = tiny.begin()->second;
      set_done(i);
      order_.push_back(i);
      if (search()) return true;
      order_.pop_back();
      clear_done(i);
      present_ = old_present;
      value_ = old_value;
      if (exhausted_) return false;
    }
    return false;
  }

  // All events here share one key; fold it to key 0 for the scalar state.
  static std::string rekeyed(const std::string& input) {
    std::string out = input;
    for (int i = 0; i < 8; i++) out[static_cast<size_t>(i)] = 0;
    return out;
  }

  const std::vector<HistoryEvent>& events_;
  const KvSequentialSpec& spec_;
  uint64_t budget_;
  uint64_t& nodes_;
  std::vector<uint64_t> mask_;
  bool present_ = false;
  uint64_t value_ = 0;
  bool exhausted_ = false;
  std::vector<size_t> order_;
  std::unordered_set<std::string> seen_;
};

}  // namespace

LinCheckResult check_linearizable(const std::vector<HistoryEvent>& history,
                                  const KvSequentialSpec& spec, uint64_t node_budget) {
  LinCheckResult res;

  std::map<int64_t, std::vector<HistoryEvent>> by_key;
  for (const HistoryEvent& e : history)
    by_key[KvSequentialSpec::key_of(e.cid, e.input)].push_back(e);

  std::vector<std::pair<uint64_t, HistoryEvent>> pointed;  // (linearization point, event)

  for (auto& [key, events] : by_key) {
    std::sort(events.begin(), events.end(), [](const HistoryEvent& a, const HistoryEvent& b) {
      return a.invoke_ns != b.invoke_ns ? a.invoke_ns < b.invoke_ns
                                        : a.response_ns < b.response_ns;
    });
    auto init = spec.initial.find(key);
    bool present = init != spec.initial.end();
    uint64_t value = present ? init->second : 0;

    KeySearch search(events, present, value, spec, node_budget, res.nodes);
    Verdict v = search.run();
    if (v == Verdict::inconclusive) {
      res.verdict = Verdict::inconclusive;
      res.detail = "search budget exceeded on key " + std::to_string(key);
      return res;
    }
    if (v == Verdict::violation) {
      res.verdict = Verdict::violation;
      // Minimal failing prefix: shortest invoke-ordered prefix of this
      // key's subhistory that is itself non-linearizable.
      for (size_t m = 1; m <= events.size(); m++) {
        std::vector<HistoryEvent> prefix(events.begin(), events.begin() + static_cast<long>(m));
        uint64_t scratch = 0;
        KeySearch ps(prefix, present, value, spec, node_budget, scratch);
        if (ps.run() == Verdict::violation) {
          res.failing_prefix = std::move(prefix);
          break;
        }
      }
      res.detail = "no valid linearization for key " + std::to_string(key) + " (" +
                   std::to_string(res.failing_prefix.size()) + "-event failing prefix)";
      return res;
    }

    // Pick a linearization point inside every event's interval, consistent
    // with the witness order; doubled timestamps leave room for the +1 steps.
    uint64_t prev = 0;
    for (size_t ix : search.witness()) {
      const HistoryEvent& e = events[ix];
      uint64_t lp = std::max(2 * e.invoke_ns, prev + 1);
      if (lp > 2 * e.response_ns)
        throw std::logic_error("witness violates its own real-time order");
      prev = lp;
      pointed.emplace_back(lp, e);
    }
  }

  std::sort(pointed.begin(), pointed.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  res.witness.reserve(pointed.size());
  for (auto& [lp, e] : pointed) res.witness.push_back(std::move(e));

  // Self-check: replay the stitched witness against the full specification.
  std::map<int64_t, uint64_t> state = spec.initial;
  for (const HistoryEvent& e : res.witness)
    if (spec.apply(state, e.cid, e.input) != e.output)
      throw std::logic_error("stitched witness fails sequential replay");

  res.verdict = Verdict::pass;
  return res;
}

OrderAuditResult audit_order(const std::vector<DeliveryRecord>& records) {
  OrderAuditResult res;

  auto msg_id = [](const DeliveryRecord& r) { return r.group.str() + ":" + std::to_string(r.group_seq); };
  auto sub_id = [](const DeliveryRecord& r) {
    return (static_cast<uint64_t>(r.replica) << 32) | r.thread;
  };

  // Rebuild per-subscription sequences; input order within one subscription
  // is delivery order.
  std::map<uint64_t, std::vector<const DeliveryRecord*>> subs;
  for (const DeliveryRecord& r : records) subs[sub_id(r)].push_back(&r);

  std::unordered_map<std::string, uint32_t> times_delivered;
  std::unordered_map<std::string, std::map<uint32_t, std::set<uint32_t>>> where;  // id -> replica -> threads
  std::set<uint32_t> replicas;
  for (const DeliveryRecord& r : records) {
    times_delivered[msg_id(r)]++;
    where[msg_id(r)][r.replica].insert(r.thread);
    replicas.insert(r.replica);
  }

  // Completeness: a message delivered by thread t at one replica must be
  // delivered by thread t at every replica.
  for (const auto& [id, per_replica] : where) {
    const auto& ref = per_replica.begin()->second;
    for (uint32_t r : replicas) {
      auto it = per_replica.find(r);
      if (it == per_replica.end() || it->second != ref) {
        res.verdict = Verdict::violation;
        res.detail = "incomplete input: message " + id + " missing deliveries at replica " +
                     std::to_string(r);
        return res;
      }
    }
  }

  // Precedence edges between consecutive shared messages per subscription;
  // transitivity makes chaining enough for cycle detection.
  std::unordered_map<std::string, std::vector<std::string>> adj;
  std::unordered_map<std::string, uint32_t> indegree;
  for (const auto& [sid, seq] : subs) {
    std::string prev;
    for (const DeliveryRecord* r : seq) {
      std::string id = msg_id(*r);
      if (times_delivered[id] < 2) continue;
      indegree.try_emplace(id, 0);
      if (!prev.empty() && prev != id) {
        adj[prev].push_back(id);
        indegree[id]++;
      }
      prev = id;
    }
  }

  // Kahn's algorithm; whatever cannot be topologically ordered is cyclic.
  std::vector<std::string> ready;
  for (const auto& [id, deg] : indegree)
    if (deg == 0) ready.push_back(id);
  size_t ordered = 0;
  std::unordered_map<std::string, uint32_t> deg = indegree;
  while (!ready.empty()) {
    std::string id = std::move(ready.back());
    ready.pop_back();
    ordered++;
    for (const std::string& next : adj[id])
      if (--deg[next] == 0) ready.push_back(next);
  }
  if (ordered == indegree.size()) {
    res.verdict = Verdict::pass;
    res.detail = "acyclic over " + std::to_string(indegree.size()) + " shared messages";
    return res;
  }

  // Extract one concrete cycle from the remainder.
  std::unordered_set<std::string> remaining;
  for (const auto& [id, d] : deg)
    if (d > 0) remaining.insert(id);
  std::string cur = *remaining.begin();
  std::vector<std::string> path;
  std::unordered_map<std::string, size_t> seen_at;
  for (;;) {
    auto it = seen_at.find(cur);
    if (it != seen_at.end()) {
      res.cycle.assign(path.begin() + static_cast<long>(it->second), path.end());
      break;
    }
    seen_at[cur] = path.size();
    path.push_back(cur);
    const auto& outs = adj[cur];
    std::string next;
    for (const std::string& n : outs)
      if (remaining.count(n)) {
        next = n;
        break;
      }
    cur = next;
  }
  res.verdict = Verdict::violation;
  std::string joined;
  for (const auto& id : res.cycle) joined += (joined.empty() ? "" : " -> ") + id;
  res.detail = "delivery order cycle: " + joined;
  return res;
}

DeterminismResult check_determinism(const std::vector<uint64_t>& digests,
                                    const std::vector<ReplicaResponse>& responses,
                                    uint32_t replicas) {
  DeterminismResult res;
  for (size_t i = 1; i < digests.size(); i++) {
    if (digests[i] != digests[0]) {
      res.verdict = Verdict::violation;
      res.detail = "state digest of replica " + std::to_string(i) + " differs";
      return res;
    }
  }
  std::map<std::pair<ClientId, ClientSeq>, std::map<uint32_t, const std::string*>> grouped;
  for (const ReplicaResponse& r : responses) grouped[{r.client, r.seq}][r.replica] = &r.output;
  for (const auto& [key, outs] : grouped) {
    if (outs.size() != replicas) {
      res.verdict = Verdict::violation;
      res.detail = "request " + std::to_string(key.first) + ":" + std::to_string(key.second) +
                   " answered by " + std::to_string(outs.size()) + "/" +
                   std::to_string(replicas) + " replicas";
      return res;
    }
    const std::string* first = outs.begin()->second;
    for (const auto& [replica, out] : outs)
      if (*out != *first) {
        res.verdict = Verdict::violation;
        res.detail = "request " + std::to_string(key.first) + ":" + std::to_string(key.second) +
                     " got diverging outputs";
        return res;
      }
  }
  res.detail = "replicas agree on " + std::to_string(grouped.size()) + " requests";
  return res;
}

DeadlockResult detect_deadlock(Engine& engine, std::chrono::milliseconds timeout) {
  DeadlockResult res;
  res.drained = engine.join(timeout);
  if (!res.drained) res.dump = engine.blocked_dump();
  return res;
}

namespace {
std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}
}  // namespace

void write_artifacts(const std::string& dir, const RunArtifacts& a) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream out(dir + "/" + name);
    if (!out) throw IoError("cannot write " + dir + "/" + name);
    return out;
  };
  {
    auto f = open("execution_log.txt");
    for (const auto& r : a.execution) f << r.to_line() << '\n';
  }
  {
    auto f = open("delivery_log.txt");
    for (const auto& r : a.delivery) f << r.to_line() << '\n';
  }
  {
    auto f = open("state_digests.txt");
    for (size_t i = 0; i < a.digests.size(); i++) f << i << ' ' << a.digests[i] << '\n';
  }
  {
    auto f = open("responses.txt");
    for (const auto& r : a.responses)
      f << r.client << ' ' << r.seq << ' ' << r.replica << ' '
        << (r.output.empty() ? "-" : to_hex(r.output)) << '\n';
  }
  {
    auto f = open("run_info.txt");
    f << "replicas " << a.replicas << '\n' << "preload " << a.preload << '\n';
  }
  if (!a.history.empty()) {
    auto f = open("history.txt");
    for (const auto& e : a.history) f << e.to_line() << '\n';
  }
  for (size_t i = 0; i < a.snapshots.size(); i++) {
    auto f = open("state_snapshot_" + std::to_string(i) + ".txt");
    f << a.snapshots[i];
  }
}

RunArtifacts read_artifacts(const std::string& dir) {
  namespace fs = std::filesystem;
  RunArtifacts a;
  for (const auto& line : read_lines(dir + "/execution_log.txt"))
    a.execution.push_back(ExecRecord::parse_line(line));
  for (const auto& line : read_lines(dir + "/delivery_log.txt"))
    a.delivery.push_back(DeliveryRecord::parse_line(line));
  for (const auto& line : read_lines(dir + "/state_digests.txt")) {
    std::istringstream is(line);
    size_t ix;
    uint64_t digest;
    if (!(is >> ix >> digest)) throw IoError("bad digest line: " + line);
    a.digests.push_back(digest);
  }
  for (const auto& line : read_lines(dir + "/responses.txt")) {
    std::istringstream is(line);
    ReplicaResponse r;
    std::string out;
    if (!(is >> r.client >> r.seq >> r.replica >> out)) throw IoError("bad response line: " + line);
    r.output = out == "-" ? "" : from_hex(out);
    a.responses.push_back(std::move(r));
  }
  for (const auto& line : read_lines(dir + "/run_info.txt")) {
    std::istringstream is(line);
    std::string key;
    uint64_t value;
    if ((is >> key >> value)) {
      if (key == "replicas") a.replicas = static_cast<uint32_t>(value);
      if (key == "preload") a.preload = value;
    }
  }
  if (fs::exists(dir + "/history.txt"))
    for (const auto& line : read_lines(dir + "/history.txt"))
      a.history.push_back(HistoryEvent::parse_line(line));
  for (size_t i = 0;; i++) {
    std::string path = dir + "/state_snapshot_" + std::to_string(i) + ".txt";
    if (!fs::exists(path)) break;
    std::ifstream in(path);
    std::ostringstream buf;
    buf << in.rdbuf();
    a.snapshots.push_back(buf.str());
  }
  return a;
}

}  // namespace psmr

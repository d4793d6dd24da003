#include "psmr/multicast.hpp"

#include <algorithm>
#include <cassert>
#include <sstream>

namespace psmr {

GroupId GroupId::parse(std::string_view token) {
  if (token == "all") return GroupId::all();
  return GroupId::numbered(static_cast<uint32_t>(std::stoul(std::string(token))));
}

GroupSet::GroupSet(std::vector<uint32_t> members) : members_(std::move(members)) {
  std::sort(members_.begin(), members_.end());
  members_.erase(std::unique(members_.begin(), members_.end()), members_.end());
}

GroupSet GroupSet::full(uint32_t k) {
  std::vector<uint32_t> m(k);
  for (uint32_t i = 0; i < k; i++) m[i] = i + 1;
  return GroupSet(std::move(m));
}

bool GroupSet::contains(uint32_t index) const {
  return std::binary_search(members_.begin(), members_.end(), index);
}

bool GroupSet::intersects(const GroupSet& o) const {
  auto a = members_.begin();
  auto b = o.members_.begin();
  while (a != members_.end() && b != o.members_.end()) {
    if (*a == *b) return true;
    if (*a < *b)
      ++a;
    else
      ++b;
  }
  return false;
}

std::string GroupSet::str() const {
  std::string out = "{";
  for (size_t i = 0; i < members_.size(); i++) {
    if (i) out += ",";
    out += std::to_string(members_[i]);
  }
  return out + "}";
}

MulticastFabric::MulticastFabric(FabricOptions opts)
    : k_(opts.num_groups),
      batch_limit_(opts.batch_limit),
      null_period_(opts.null_period),
      idle_null_interval_(opts.idle_null_interval) {
  if (k_ < 1) throw ConfigError("fabric needs at least one group");
  if (null_period_ < 1) throw ConfigError("null period must be positive");
  streams_.reserve(k_ + 1);
  for (uint32_t i = 0; i <= k_; i++) streams_.push_back(std::make_unique<Stream>());
  if (opts.background_timer) timer_ = std::thread([this] { timer_loop(); });
}

MulticastFabric::~MulticastFabric() {
  close();
  if (timer_.joinable()) timer_.join();
}

MulticastFabric::Stream& MulticastFabric::stream(GroupId g) {
  uint32_t ix = g.is_all() ? 0 : g.index();
  if (!g.is_all() && (ix < 1 || ix > k_)) throw AddressError("unknown group g_" + std::to_string(ix));
  return *streams_[ix];
}

const MulticastFabric::Stream& MulticastFabric::stream(GroupId g) const {
  return const_cast<MulticastFabric*>(this)->stream(g);
}

void MulticastFabric::append(Stream& s, GroupId g, std::string payload, const GroupSet& dests,
                             bool is_null, uint64_t batch_id) {
  // Callers hold s.mu. Sequence and timestamp are assigned together so both
  // stay monotone along the stream.
  StampedMessage m;
  m.payload = std::move(payload);
  m.destinations = dests;
  m.group = g;
  m.merge_ts = clock_.fetch_add(1) + 1;
  m.batch_id = batch_id;
  m.is_null = is_null;
  if (!is_null) m.group_seq = s.next_seq++;
  s.log.push_back(std::move(m));
  s.cv.notify_all();
}

void MulticastFabric::multicast(const GroupSet& destinations, std::string payload) {
  if (destinations.empty()) throw AddressError("empty destination set");
  for (uint32_t ix : destinations.members())
    if (ix < 1 || ix > k_) throw AddressError("unknown group g_" + std::to_string(ix));
  if (closed_.load()) throw UnavailableError("fabric closed");

  // Single-group addressing only: multi-group messages ride the shared
  // group. A full-width set counts as multi-group even when k=1.
  bool via_shared = !destinations.singleton() || destinations.size() == k_;
  GroupId target = via_shared ? GroupId::all() : GroupId::numbered(destinations.min_index());
  Stream& s = stream(target);
  if (batch_limit_ == 0) {
    {
      std::lock_guard<std::mutex> lk(s.mu);
      append(s, target, std::move(payload), destinations, false,
             batch_counter_.fetch_add(1) + 1);
      s.stamped_since_checkpoint.store(true, std::memory_order_relaxed);
    }
    after_stamp();
    return;
  }

  bool flushed = false;
  {
    std::lock_guard<std::mutex> lk(s.mu);
    if (!s.pending.empty() && s.pending_bytes + payload.size() > batch_limit_) {
      uint64_t batch_id = batch_counter_.fetch_add(1) + 1;
      for (auto& [p, d] : s.pending) append(s, target, std::move(p), d, false, batch_id);
      s.pending.clear();
      s.pending_bytes = 0;
      s.stamped_since_checkpoint.store(true, std::memory_order_relaxed);
      flushed = true;
    }
    s.pending_bytes += payload.size();
    s.pending.emplace_back(std::move(payload), destinations);
  }
  if (flushed) after_stamp();
}

StampedMessage MulticastFabric::stamp(GroupId group, std::string payload,
                                      const GroupSet& destinations) {
  Stream& s = stream(group);
  StampedMessage copy;
  {
    std::lock_guard<std::mutex> lk(s.mu);
    append(s, group, std::move(payload), destinations, false, batch_counter_.fetch_add(1) + 1);
    s.stamped_since_checkpoint.store(true, std::memory_order_relaxed);
    copy = s.log.back();
  }
  after_stamp();
  return copy;
}

void MulticastFabric::after_stamp() {
  uint64_t n = stamp_counter_.fetch_add(1) + 1;
  if (n % null_period_ == 0) emit_nulls();
}

void MulticastFabric::emit_nulls() {
  std::lock_guard<std::mutex> round(null_mu_);
  for (uint32_t ix = 0; ix <= k_; ix++) {
    Stream& s = *streams_[ix];
    if (s.stamped_since_checkpoint.exchange(false, std::memory_order_relaxed)) continue;
    std::lock_guard<std::mutex> lk(s.mu);
    append(s, ix == 0 ? GroupId::all() : GroupId::numbered(ix), "", GroupSet(), true, 0);
    nulls_emitted_.fetch_add(1);
  }
}

void MulticastFabric::flush_stream(GroupId g) {
  Stream& s = stream(g);
  size_t n = 0;
  {
    std::lock_guard<std::mutex> lk(s.mu);
    if (s.pending.empty()) return;
    uint64_t batch_id = batch_counter_.fetch_add(1) + 1;
    n = s.pending.size();
    for (auto& [p, d] : s.pending) append(s, g, std::move(p), d, false, batch_id);
    s.pending.clear();
    s.pending_bytes = 0;
    s.stamped_since_checkpoint.store(true, std::memory_order_relaxed);
  }
  for (size_t i = 0; i < n; i++) after_stamp();
}

void MulticastFabric::flush() {
  flush_stream(GroupId::all());
  for (uint32_t i = 1; i <= k_; i++) flush_stream(GroupId::numbered(i));
}

void MulticastFabric::close() {
  if (closing_.exchange(true)) return;
  // Senders must be quiesced by now; flush before the closed flag becomes
  // visible so no subscriber concludes end-of-stream ahead of the tail.
  flush();
  closed_.store(true);
  timer_cv_.notify_all();
  for (auto& s : streams_) {
    std::lock_guard<std::mutex> lk(s->mu);
    s->cv.notify_all();
  }
}

void MulticastFabric::abort() {
  aborted_.store(true);
  close();
}

void MulticastFabric::timer_loop() {
  std::unique_lock<std::mutex> lk(timer_mu_);
  while (!closed_.load()) {
    timer_cv_.wait_for(lk, idle_null_interval_);
    if (closed_.load()) break;
    lk.unlock();
    flush();
    emit_nulls();
    lk.lock();
  }
}

std::unique_ptr<Subscription> MulticastFabric::subscribe(std::vector<GroupId> groups) {
  for (GroupId g : groups) stream(g);  // validates
  return std::unique_ptr<Subscription>(new Subscription(*this, std::move(groups)));
}

Subscription::Subscription(MulticastFabric& fabric, std::vector<GroupId> groups)
    : fabric_(fabric), groups_(std::move(groups)), cursors_(groups_.size(), 0) {
  for (GroupId g : groups_)
    if (!g.is_all()) numbered_.push_back(g.index());
}

std::optional<StampedMessage> Subscription::deliver() {
  for (;;) {
    if (fabric_.aborted_.load()) return std::nullopt;

    // Merge rule: a head is needed on every subscribed stream before the
    // smallest (merge_ts, group rank) can be picked safely; merge_ts is
    // monotone per stream, so each head lower-bounds its stream's future.
    int best = -1;
    uint64_t best_ts = 0;
    GroupId best_group = GroupId::all();
    bool all_exhausted = true;
    for (size_t i = 0; i < groups_.size(); i++) {
      auto& s = fabric_.stream(groups_[i]);
      std::unique_lock<std::mutex> lk(s.mu);
      s.cv.wait(lk, [&] {
        return s.log.size() > cursors_[i] || fabric_.closed_.load();
      });
      if (fabric_.aborted_.load()) return std::nullopt;
      if (s.log.size() <= cursors_[i]) continue;  // closed and drained
      all_exhausted = false;
      const StampedMessage& head = s.log[cursors_[i]];
      if (best < 0 || merge_before(head.merge_ts, head.group, best_ts, best_group)) {
        best = static_cast<int>(i);
        best_ts = head.merge_ts;
        best_group = head.group;
      }
    }
    if (all_exhausted) return std::nullopt;

    auto& s = fabric_.stream(groups_[best]);
    StampedMessage msg;
    {
      std::lock_guard<std::mutex> lk(s.mu);
      msg = s.log[cursors_[best]];
    }
    cursors_[best]++;
    if (msg.is_null) continue;
    // Surface only messages this subscriber is a destination of. A replica-
    // wide subscription (shared group only) is a destination of everything
    // it sees.
    if (!numbered_.empty()) {
      bool mine = false;
      for (uint32_t ix : numbered_)
        if (msg.destinations.contains(ix)) {
          mine = true;
          break;
        }
      if (!mine) continue;
    }
    return msg;
  }
}

std::string DeliveryRecord::to_line() const {
  std::ostringstream os;
  os << replica << ' ' << thread << ' ' << group.str() << ' ' << group_seq << ' ' << merge_ts
     << ' ' << payload_hash;
  return os.str();
}

DeliveryRecord DeliveryRecord::parse_line(const std::string& line) {
  std::istringstream is(line);
  DeliveryRecord r;
  std::string group;
  if (!(is >> r.replica >> r.thread >> group >> r.group_seq >> r.merge_ts >> r.payload_hash))
    throw IoError("bad delivery record: " + line);
  r.group = GroupId::parse(group);
  return r;
}

}  // namespace psmr

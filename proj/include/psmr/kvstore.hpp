#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "psmr/dependency.hpp"
#include "psmr/service.hpp"

namespace psmr {

enum class KvStatus : uint8_t { ok = 0, key_exists = 1, key_missing = 2, capacity = 3 };

// In-memory B+-tree over (int64 key, 8-byte value) entries. Not internally
// synchronized: the replication engine's serialization discipline is the
// only synchronization, which is exactly what is under test.
class BPlusTree {
 public:
  explicit BPlusTree(uint32_t fanout = 64, size_t max_entries = 0);
  ~BPlusTree();
  BPlusTree(const BPlusTree&) = delete;
  BPlusTree& operator=(const BPlusTree&) = delete;

  KvStatus insert(int64_t key, uint64_t value);
  KvStatus erase(int64_t key);
  KvStatus update(int64_t key, uint64_t value);
  std::pair<KvStatus, uint64_t> read(int64_t key) const;

  size_t size() const { return size_; }
  uint32_t fanout() const { return fanout_; }

  // Digest over the sorted (key, value) sequence; a pure function of the
  // logical contents, independent of split history.
  uint64_t content_hash() const;
  void for_each(const std::function<void(int64_t, uint64_t)>& fn) const;
  void snapshot(std::ostream& out) const;  // sorted "key valuehex" lines

  // Walks the whole tree and throws std::logic_error on any violated shape
  // invariant (occupancy bounds, key order, uniform depth, leaf chain).
  void check_invariants() const;

 private:
  struct Node;
  struct SplitResult;

  Node* leaf_for(int64_t key) const;
  SplitResult insert_rec(Node* n, int64_t key, uint64_t value);
  bool erase_rec(Node* n, int64_t key);  // true if child underflowed
  void fix_underflow(Node* parent, size_t child_ix);
  void destroy(Node* n);
  void check_rec(const Node* n, const Node* parent, size_t depth, size_t leaf_depth,
                 const int64_t* lo, const int64_t* hi) const;

  uint32_t fanout_;
  size_t max_entries_;
  size_t size_ = 0;
  Node* root_;
};

// Key-value service command ids.
inline constexpr CommandId kKvInsert = 1;
inline constexpr CommandId kKvDelete = 2;
inline constexpr CommandId kKvRead = 3;
inline constexpr CommandId kKvUpdate = 4;

ServiceSchema kv_schema();

// Dependency relation of the key-value service: inserts and deletes depend
// on every command; updates depend on updates and reads with the same key.
CDep kv_cdep();

CGFunction kv_partition_cg(uint32_t k);
CGFunction kv_broadcast_cg(uint32_t k, uint64_t seed);

std::string encode_kv_input(CommandId cid, int64_t key, uint64_t value = 0);
struct KvInput {
  int64_t key;
  uint64_t value;
};
KvInput decode_kv_input(CommandId cid, std::string_view payload);
std::string encode_kv_output(KvStatus status, uint64_t value = 0, bool with_value = false);
struct KvOutput {
  KvStatus status;
  uint64_t value;
  bool with_value;
};
KvOutput decode_kv_output(CommandId cid, std::string_view payload);

class KvService : public Service {
 public:
  explicit KvService(uint32_t fanout = 64, size_t max_entries = 0) : tree_(fanout, max_entries) {}

  // Keys 0..n-1 with values derived from the key; every replica preloads
  // the same contents.
  void preload(uint64_t n);

  std::string execute(CommandId cid, std::string_view input) override;
  uint64_t state_digest() const override { return tree_.content_hash(); }

  BPlusTree& tree() { return tree_; }
  const BPlusTree& tree() const { return tree_; }

 private:
  BPlusTree tree_;
};

}  // namespace psmr

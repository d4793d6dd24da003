#include "psmr/kvstore.hpp"

#include <algorithm>
#include <ostream>
#include <sstream>

namespace psmr {

struct BPlusTree::Node {
  bool leaf;
  std::vector<int64_t> keys;
  std::vector<uint64_t> vals;     // leaves only
  std::vector<Node*> children;    // internal only, keys.size() + 1 entries
  Node* next = nullptr;           // leaf chain

  explicit Node(bool is_leaf) : leaf(is_leaf) {}
};

struct BPlusTree::SplitResult {
  int64_t sep = 0;
  Node* right = nullptr;
  KvStatus status = KvStatus::ok;
};

BPlusTree::BPlusTree(uint32_t fanout, size_t max_entries)
    : fanout_(fanout), max_entries_(max_entries) {
  if (fanout_ < 3) throw ConfigError("fanout must be at least 3");
  root_ = new Node(true);
}

BPlusTree::~BPlusTree() { destroy(root_); }

void BPlusTree::destroy(Node* n) {
  if (!n->leaf)
    for (Node* c : n->children) destroy(c);
  delete n;
}

// Descend convention: keys equal to a separator live in the right subtree,
// so the child index is the count of separators <= key.
static size_t child_index(const std::vector<int64_t>& keys, int64_t key) {
  return static_cast<size_t>(std::upper_bound(keys.begin(), keys.end(), key) - keys.begin());
}

BPlusTree::Node* BPlusTree::leaf_for(int64_t key) const {
  Node* n = root_;
  while (!n->leaf) n = n->children[child_index(n->keys, key)];
  return n;
}

std::pair<KvStatus, uint64_t> BPlusTree::read(int64_t key) const {
  Node* leaf = leaf_for(key);
  auto it = std::lower_bound(leaf->keys.begin(), leaf->keys.end(), key);
  if (it == leaf->keys.end() || *it != key) return {KvStatus::key_missing, 0};
  return {KvStatus::ok, leaf->vals[static_cast<size_t>(it - leaf->keys.begin())]};
}

KvStatus BPlusTree::update(int64_t key, uint64_t value) {
  Node* leaf = leaf_for(key);
  auto it = std::lower_bound(leaf->keys.begin(), leaf->keys.end(), key);
  if (it == leaf->keys.end() || *it != key) return KvStatus::key_missing;
  leaf->vals[static_cast<size_t>(it - leaf->keys.begin())] = value;
  return KvStatus::ok;
}

BPlusTree::SplitResult BPlusTree::insert_rec(Node* n, int64_t key, uint64_t value) {
  SplitResult res;
  if (n->leaf) {
    auto it = std::lower_bound(n->keys.begin(), n->keys.end(), key);
    size_t pos = static_cast<size_t>(it - n->keys.begin());
    if (it != n->keys.end() && *it == key) {
      res.status = KvStatus::key_exists;
      return res;
    }
    n->keys.insert(it, key);
    n->vals.insert(n->vals.begin() + static_cast<long>(pos), value);
    size_++;
    if (n->keys.size() <= fanout_) return res;
    size_t mid = n->keys.size() / 2;
    Node* right = new Node(true);
    right->keys.assign(n->keys.begin() + static_cast<long>(mid), n->keys.end());
    right->vals.assign(n->vals.begin() + static_cast<long>(mid), n->vals.end());
    n->keys.resize(mid);
    n->vals.resize(mid);
    right->next = n->next;
    n->next = right;
    res.sep = right->keys.front();
    res.right = right;
    return res;
  }

  size_t ix = child_index(n->keys, key);
  SplitResult child = insert_rec(n->children[ix], key, value);
  res.status = child.status;
  if (!child.right) return res;
  n->keys.insert(n->keys.begin() + static_cast<long>(ix), child.sep);
  n->children.insert(n->children.begin() + static_cast<long>(ix) + 1, child.right);
  if (n->children.size() <= fanout_) return res;
  size_t mid = n->keys.size() / 2;
  Node* right = new Node(false);
  res.sep = n->keys[mid];
  right->keys.assign(n->keys.begin() + static_cast<long>(mid) + 1, n->keys.end());
  right->children.assign(n->children.begin() + static_cast<long>(mid) + 1, n->children.end());
  n->keys.resize(mid);
  n->children.resize(mid + 1);
  res.right = right;
  return res;
}

KvStatus BPlusTree::insert(int64_t key, uint64_t value) {
  if (max_entries_ && size_ >= max_entries_) {
    auto [st, _] = read(key);
    return st == KvStatus::ok ? KvStatus::key_exists : KvStatus::capacity;
  }
  SplitResult res = insert_rec(root_, key, value);
  if (res.status != KvStatus::ok) return res.status;
  if (res.right) {
    Node* new_root = new Node(false);
    new_root->keys.push_back(res.sep);
    new_root->children.push_back(root_);
    new_root->children.push_back(res.right);
    root_ = new_root;
  }
  return KvStatus::ok;
}

void BPlusTree::fix_underflow(Node* parent, size_t child_ix) {
  Node* child = parent->children[child_ix];
  size_t min_fill = (fanout_ + 1) / 2;

  Node* left = child_ix > 0 ? parent->children[child_ix - 1] : nullptr;
  Node* right = child_ix + 1 < parent->children.size() ? parent->children[child_ix + 1] : nullptr;

  if (child->leaf) {
    if (left && left->keys.size() > min_fill) {
      child->keys.insert(child->keys.begin(), left->keys.back());
      child->vals.insert(child->vals.begin(), left->vals.back());
      left->keys.pop_back();
      left->vals.pop_back();
      parent->keys[child_ix - 1] = child->keys.front();
      return;
    }
    if (right && right->keys.size() > min_fill) {
      child->keys.push_back(right->keys.front());
      child->vals.push_back(right->vals.front());
      right->keys.erase(right->keys.begin());
      right->vals.erase(right->vals.begin());
      parent->keys[child_ix] = right->keys.front();
      return;
    }
    // Merge with a sibling; fold right into left so the chain stays intact.
    size_t l = left ? child_ix - 1 : child_ix;
    Node* a = parent->children[l];
    Node* b = parent->children[l + 1];
    a->keys.insert(a->keys.end(), b->keys.begin(), b->keys.end());
    a->vals.insert(a->vals.end(), b->vals.begin(), b->vals.end());
    a->next = b->next;
    parent->keys.erase(parent->keys.begin() + static_cast<long>(l));
    parent->children.erase(parent->children.begin() + static_cast<long>(l) + 1);
    delete b;
    return;
  }

  size_t min_children = (fanout_ + 1) / 2;
  if (left && left->children.size() > min_children) {
    child->keys.insert(child->keys.begin(), parent->keys[child_ix - 1]);
    child->children.insert(child->children.begin(), left->children.back());
    parent->keys[child_ix - 1] = left->keys.back();
    left->keys.pop_back();
    left->children.pop_back();
    return;
  }
  if (right && right->children.size() > min_children) {
    child->keys.push_back(parent->keys[child_ix]);
    child->children.push_back(right->children.front());
    parent->keys[child_ix] = right->keys.front();
    right->keys.erase(right->keys.begin());
    right->children.erase(right->children.begin());
    return;
  }
  size_t l = left ? child_ix - 1 : child_ix;
  Node* a = parent->children[l];
  Node* b = parent->children[l + 1];
  a->keys.push_back(parent->keys[l]);
  a->keys.insert(a->keys.end(), b->keys.begin(), b->keys.end());
  a->children.insert(a->children.end(), b->children.begin(), b->children.end());
  parent->keys.erase(parent->keys.begin() + static_cast<long>(l));
  parent->children.erase(parent->children.begin() + static_cast<long>(l) + 1);
  delete b;
}

bool BPlusTree::erase_rec(Node* n, int64_t key) {
  size_t min_fill = (fanout_ + 1) / 2;
  if (n->leaf) {
    auto it = std::lower_bound(n->keys.begin(), n->keys.end(), key);
    if (it == n->keys.end() || *it != key) return false;  // caller checked presence
    n->vals.erase(n->vals.begin() + (it - n->keys.begin()));
    n->keys.erase(it);
    size_--;
    return n->keys.size() < min_fill;
  }
  size_t ix = child_index(n->keys, key);
  if (erase_rec(n->children[ix], key)) fix_underflow(n, ix);
  return n->children.size() < min_fill;
}

KvStatus BPlusTree::erase(int64_t key) {
  auto [st, _] = read(key);
  if (st != KvStatus::ok) return KvStatus::key_missing;
  erase_rec(root_, key);
  if (!root_->leaf && root_->children.size() == 1) {
    Node* old = root_;
    root_ = root_->children[0];
    old->children.clear();
    delete old;
  }
  return KvStatus::ok;
}

void BPlusTree::for_each(const std::function<void(int64_t, uint64_t)>& fn) const {
  const Node* n = root_;
  while (!n->leaf) n = n->children.front();
  for (; n; n = n->next)
    for (size_t i = 0; i < n->keys.size(); i++) fn(n->keys[i], n->vals[i]);
}

uint64_t BPlusTree::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for_each([&](int64_t k, uint64_t v) {
    std::string buf;
    put_i64(buf, k);
    put_u64(buf, v);
    h = fnv1a(buf, h);
  });
  return h;
}

void BPlusTree::snapshot(std::ostream& out) const {
  for_each([&](int64_t k, uint64_t v) {
    std::string buf;
    put_u64(buf, v);
    out << k << ' ' << to_hex(buf) << '\n';
  });
}

void BPlusTree::check_rec(const Node* n, const Node* parent, size_t depth, size_t leaf_depth,
                          const int64_t* lo, const int64_t* hi) const {
  auto fail = [&](const std::string& why) { throw std::logic_error("btree invariant: " + why); };
  if (!std::is_sorted(n->keys.begin(), n->keys.end())) fail("keys not sorted");
  if (std::adjacent_find(n->keys.begin(), n->keys.end()) != n->keys.end()) fail("duplicate key");
  for (int64_t k : n->keys) {
    if (lo && k < *lo) fail("key below bound");
    if (hi && k >= *hi) fail("key above bound");
  }
  size_t min_fill = (fanout_ + 1) / 2;
  if (n->leaf) {
    if (depth != leaf_depth) fail("leaves at unequal depth");
    if (n->keys.size() != n->vals.size()) fail("leaf key/value mismatch");
    if (n->keys.size() > fanout_) fail("leaf overfull");
    if (parent && n->keys.size() < min_fill) fail("leaf underfull");
    return;
  }
  if (n->children.size() != n->keys.size() + 1) fail("internal arity mismatch");
  if (n->children.size() > fanout_) fail("internal overfull");
  if (parent && n->children.size() < min_fill) fail("internal underfull");
  if (!parent && n->children.size() < 2) fail("internal root with one child");
  for (size_t i = 0; i < n->children.size(); i++) {
    const int64_t* clo = i == 0 ? lo : &n->keys[i - 1];
    const int64_t* chi = i == n->keys.size() ? hi : &n->keys[i];
    check_rec(n->children[i], n, depth + 1, leaf_depth, clo, chi);
  }
}

void BPlusTree::check_invariants() const {
  size_t leaf_depth = 0;
  for (const Node* n = root_; !n->leaf; n = n->children.front()) leaf_depth++;
  check_rec(root_, nullptr, 0, leaf_depth, nullptr, nullptr);

  size_t counted = 0;
  int64_t prev = 0;
  bool first = true;
  for_each([&](int64_t k, uint64_t) {
    if (!first && k <= prev) throw std::logic_error("btree invariant: leaf chain out of order");
    prev = k;
    first = false;
    counted++;
  });
  if (counted != size_) throw std::logic_error("btree invariant: size mismatch");
}

ServiceSchema kv_schema() {
  return ServiceSchema({
      {kKvInsert, "insert", {{"k", ParamKind::int64}, {"v", ParamKind::bytes8}}, {{"err", ParamKind::int64}}},
      {kKvDelete, "delete", {{"k", ParamKind::int64}}, {{"err", ParamKind::int64}}},
      {kKvRead, "read", {{"k", ParamKind::int64}}, {{"v", ParamKind::bytes8}, {"err", ParamKind::int64}}},
      {kKvUpdate, "update", {{"k", ParamKind::int64}, {"v", ParamKind::bytes8}}, {{"err", ParamKind::int64}}},
  });
}

CDep kv_cdep() {
  CDep dep(kv_schema());
  dep.add_unconditional_all(kKvInsert);
  dep.add_unconditional_all(kKvDelete);
  dep.add_conditional(kKvUpdate, "k", kKvUpdate, "k");
  dep.add_conditional(kKvUpdate, "k", kKvRead, "k");
  return dep;
}

CGFunction kv_partition_cg(uint32_t k) {
  return CGFunction::partition_rule(k, kv_schema(),
                                    {{kKvInsert, std::nullopt},
                                     {kKvDelete, std::nullopt},
                                     {kKvRead, std::optional<std::string>("k")},
                                     {kKvUpdate, std::optional<std::string>("k")}});
}

CGFunction kv_broadcast_cg(uint32_t k, uint64_t seed) {
  using Cls = CGFunction::CmdClass;
  return CGFunction::broadcast_rule(k,
                                    {{kKvInsert, Cls::write_type},
                                     {kKvDelete, Cls::write_type},
                                     {kKvRead, Cls::read_type},
                                     {kKvUpdate, Cls::write_type}},
                                    seed);
}

std::string encode_kv_input(CommandId cid, int64_t key, uint64_t value) {
  std::string out;
  put_i64(out, key);
  if (cid == kKvInsert || cid == kKvUpdate) put_u64(out, value);
  return out;
}

KvInput decode_kv_input(CommandId cid, std::string_view payload) {
  ByteReader r(payload);
  KvInput in{r.i64(), 0};
  if (cid == kKvInsert || cid == kKvUpdate) in.value = r.u64();
  return in;
}

std::string encode_kv_output(KvStatus status, uint64_t value, bool with_value) {
  std::string out;
  put_u8(out, static_cast<uint8_t>(status));
  if (with_value) put_u64(out, value);
  return out;
}

KvOutput decode_kv_output(CommandId cid, std::string_view payload) {
  ByteReader r(payload);
  KvOutput out{static_cast<KvStatus>(r.u8()), 0, cid == kKvRead};
  if (out.with_value) out.value = r.u64();
  return out;
}

void KvService::preload(uint64_t n) {
  for (uint64_t i = 0; i < n; i++)
    tree_.insert(static_cast<int64_t>(i), i * 0x9e3779b97f4a7c15ull + 1);
}

std::string KvService::execute(CommandId cid, std::string_view input) {
  KvInput in = decode_kv_input(cid, input);
  switch (cid) {
    case kKvInsert:
      return encode_kv_output(tree_.insert(in.key, in.value));
    case kKvDelete:
      return encode_kv_output(tree_.erase(in.key));
    case kKvRead: {
      auto [st, v] = tree_.read(in.key);
      return encode_kv_output(st, v, true);
    }
    case kKvUpdate:
      return encode_kv_output(tree_.update(in.key, in.value));
    default:
      throw SchemaError("unknown kv command " + std::to_string(cid));
  }
}

}  // namespace psmr

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "psmr/common.hpp"
#include "psmr/multicast.hpp"

namespace psmr {

enum class ParamKind { int64, bytes8 };

struct ParamDesc {
  std::string name;
  ParamKind kind;
};

inline size_t param_size(ParamKind k) { return k == ParamKind::int64 ? 8 : 8; }

// Signature of one service command: id, name, and ordered parameter layout.
// Input payloads are the fixed-width little-endian concatenation of the
// input parameters, which is what makes named-field key extraction possible.
struct CommandSig {
  CommandId cid;
  std::string name;
  std::vector<ParamDesc> inputs;
  std::vector<ParamDesc> outputs;
};

class ServiceSchema {
 public:
  ServiceSchema() = default;
  explicit ServiceSchema(std::vector<CommandSig> sigs);

  const CommandSig& sig(CommandId cid) const;
  const CommandSig& sig_by_name(std::string_view name) const;
  bool has(CommandId cid) const { return by_cid_.count(cid) > 0; }
  const std::vector<CommandSig>& all() const { return sigs_; }

  // Reads the named int64 input field out of a marshaled input payload.
  int64_t read_int_field(CommandId cid, std::string_view field, std::string_view payload) const;
  size_t field_offset(CommandId cid, std::string_view field) const;

 private:
  std::vector<CommandSig> sigs_;
  std::unordered_map<CommandId, size_t> by_cid_;
  std::unordered_map<std::string, size_t> by_name_;
};

// Command dependency relation, declared by the service designer. Two levels:
// pairs dependent regardless of parameters, and pairs dependent only when
// the named key fields hold equal values. Anything not listed is independent.
class CDep {
 public:
  explicit CDep(ServiceSchema schema) : schema_(std::move(schema)) {}

  void add_unconditional(CommandId a, CommandId b);
  void add_unconditional_all(CommandId a);  // a depends on every command
  void add_conditional(CommandId a, std::string field_a, CommandId b, std::string field_b);

  bool is_dependent(CommandId cid_a, std::string_view input_a, CommandId cid_b,
                    std::string_view input_b) const;
  bool depends_on_all(CommandId cid) const;
  const ServiceSchema& schema() const { return schema_; }

  // Human-editable declaration format: one entry per line,
  //   unconditional <cmd> <cmd|*>
  //   conditional <cmd> <field> <cmd> <field>
  static CDep parse(ServiceSchema schema, std::istream& in);
  std::string to_text() const;

 private:
  static uint64_t pair_key(CommandId a, CommandId b) {
    if (a > b) std::swap(a, b);
    return (static_cast<uint64_t>(a) << 32) | b;
  }
  void check_cid(CommandId cid) const;

  ServiceSchema schema_;
  std::unordered_set<CommandId> all_dependent_;
  std::unordered_set<uint64_t> unconditional_;
  struct CondFields {
    std::string field_lo, field_hi;  // keyed by normalized (lo, hi) cid order
  };
  std::unordered_map<uint64_t, CondFields> conditional_;
};

// Command-to-Groups function: maps (cid, input) to the multicast groups a
// request is addressed to. Dependent command instances always share a group.
class CGFunction {
 public:
  enum class CmdClass { read_type, write_type };

  // Read-type commands go to one random group, write-type to every group.
  static CGFunction broadcast_rule(uint32_t k, std::unordered_map<CommandId, CmdClass> classes,
                                   uint64_t seed);
  // Keyed commands go to group (key mod k) + 1; commands without a key field
  // (dependent on everything) go to every group.
  static CGFunction partition_rule(uint32_t k, ServiceSchema schema,
                                   std::unordered_map<CommandId, std::optional<std::string>> keys);
  // Every command to a random non-empty subset; stress rule for engine fuzz.
  static CGFunction random_subset_rule(uint32_t k, uint64_t seed);

  GroupSet groups_for(CommandId cid, std::string_view input);
  uint32_t k() const { return k_; }
  bool deterministic() const { return deterministic_; }
  void reseed(uint64_t seed) { rng_.seed(seed); }

 private:
  CGFunction(uint32_t k, bool deterministic, uint64_t seed)
      : k_(k), deterministic_(deterministic), rng_(seed) {}

  uint32_t k_;
  bool deterministic_;
  std::mt19937_64 rng_;
  int kind_ = 0;  // 1=broadcast 2=partition 3=random-subset
  std::unordered_map<CommandId, CmdClass> classes_;
  ServiceSchema schema_;
  std::unordered_map<CommandId, std::optional<std::string>> keys_;
};

// One sampled command instance, for C-G validation.
struct CommandInstance {
  CommandId cid;
  std::string input;
  std::string label;  // for reports
};

struct CGViolation {
  size_t a, b;  // indices into the sample
  std::string detail;
};

struct CGReport {
  size_t pairs_checked = 0;
  size_t dependent_pairs = 0;
  std::vector<CGViolation> violations;
  bool ok() const { return violations.empty(); }
};

// Checks that every dependent pair in the sample got intersecting group
// sets. Group sets are evaluated once per instance, then compared pairwise.
CGReport validate_cg(const CDep& cdep, CGFunction& cg, const std::vector<CommandInstance>& sample);

}  // namespace psmr

#include "psmr/dependency.hpp"

#include <algorithm>
#include <istream>
#include <sstream>

namespace psmr {

ServiceSchema::ServiceSchema(std::vector<CommandSig> sigs) : sigs_(std::move(sigs)) {
  for (size_t i = 0; i < sigs_.size(); i++) {
    if (!by_cid_.emplace(sigs_[i].cid, i).second)
      throw SchemaError("duplicate cid " + std::to_string(sigs_[i].cid));
    by_name_.emplace(sigs_[i].name, i);
  }
}

const CommandSig& ServiceSchema::sig(CommandId cid) const {
  auto it = by_cid_.find(cid);
  if (it == by_cid_.end()) throw SchemaError("unknown cid " + std::to_string(cid));
  return sigs_[it->second];
}

const CommandSig& ServiceSchema::sig_by_name(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw SchemaError("unknown command " + std::string(name));
  return sigs_[it->second];
}

size_t ServiceSchema::field_offset(CommandId cid, std::string_view field) const {
  const CommandSig& s = sig(cid);
  size_t off = 0;
  for (const ParamDesc& p : s.inputs) {
    if (p.name == field) {
      if (p.kind != ParamKind::int64)
        throw SchemaError("field " + std::string(field) + " of " + s.name + " is not an integer");
      return off;
    }
    off += param_size(p.kind);
  }
  throw SchemaError("command " + s.name + " has no field " + std::string(field));
}

int64_t ServiceSchema::read_int_field(CommandId cid, std::string_view field,
                                      std::string_view payload) const {
  size_t off = field_offset(cid, field);
  if (payload.size() < off + 8) throw SchemaError("input too short for field " + std::string(field));
  ByteReader r(payload.substr(off, 8));
  return r.i64();
}

void CDep::check_cid(CommandId cid) const {
  if (!schema_.has(cid)) throw SchemaError("cid " + std::to_string(cid) + " not in schema");
}

void CDep::add_unconditional(CommandId a, CommandId b) {
  check_cid(a);
  check_cid(b);
  unconditional_.insert(pair_key(a, b));
}

void CDep::add_unconditional_all(CommandId a) {
  check_cid(a);
  all_dependent_.insert(a);
}

void CDep::add_conditional(CommandId a, std::string field_a, CommandId b, std::string field_b) {
  schema_.field_offset(a, field_a);  // validates
  schema_.field_offset(b, field_b);
  CondFields f;
  if (a <= b)
    f = {std::move(field_a), std::move(field_b)};
  else
    f = {std::move(field_b), std::move(field_a)};
  conditional_.emplace(pair_key(a, b), std::move(f));
}

bool CDep::depends_on_all(CommandId cid) const {
  check_cid(cid);
  return all_dependent_.count(cid) > 0;
}

bool CDep::is_dependent(CommandId cid_a, std::string_view input_a, CommandId cid_b,
                        std::string_view input_b) const {
  check_cid(cid_a);
  check_cid(cid_b);
  if (all_dependent_.count(cid_a) || all_dependent_.count(cid_b)) return true;
  uint64_t key = pair_key(cid_a, cid_b);
  if (unconditional_.count(key)) return true;
  auto it = conditional_.find(key);
  if (it == conditional_.end()) return false;
  const CondFields& f = it->second;
  CommandId lo = cid_a <= cid_b ? cid_a : cid_b;
  std::string_view in_lo = cid_a <= cid_b ? input_a : input_b;
  std::string_view in_hi = cid_a <= cid_b ? input_b : input_a;
  CommandId hi = cid_a <= cid_b ? cid_b : cid_a;
  return schema_.read_int_field(lo, f.field_lo, in_lo) ==
         schema_.read_int_field(hi, f.field_hi, in_hi);
}

CDep CDep::parse(ServiceSchema schema, std::istream& in) {
  CDep dep(schema);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind) || kind[0] == '#') continue;
    auto fail = [&](const std::string& why) {
      throw SchemaError("cdep line " + std::to_string(lineno) + ": " + why);
    };
    if (kind == "unconditional") {
      std::string a, b;
      if (!(ls >> a >> b)) fail("expected: unconditional <cmd> <cmd|*>");
      CommandId ca = dep.schema_.sig_by_name(a).cid;
      if (b == "*")
        dep.add_unconditional_all(ca);
      else
        dep.add_unconditional(ca, dep.schema_.sig_by_name(b).cid);
    } else if (kind == "conditional") {
      std::string a, fa, b, fb;
      if (!(ls >> a >> fa >> b >> fb)) fail("expected: conditional <cmd> <field> <cmd> <field>");
      dep.add_conditional(dep.schema_.sig_by_name(a).cid, fa, dep.schema_.sig_by_name(b).cid, fb);
    } else {
      fail("unknown entry kind '" + kind + "'");
    }
  }
  return dep;
}

std::string CDep::to_text() const {
  std::ostringstream os;
  for (CommandId cid : all_dependent_) os << "unconditional " << schema_.sig(cid).name << " *\n";
  for (uint64_t key : unconditional_)
    os << "unconditional " << schema_.sig(static_cast<CommandId>(key >> 32)).name << ' '
       << schema_.sig(static_cast<CommandId>(key & 0xffffffff)).name << '\n';
  for (const auto& [key, f] : conditional_)
    os << "conditional " << schema_.sig(static_cast<CommandId>(key >> 32)).name << ' ' << f.field_lo
       << ' ' << schema_.sig(static_cast<CommandId>(key & 0xffffffff)).name << ' ' << f.field_hi
       << '\n';
  return os.str();
}

CGFunction CGFunction::broadcast_rule(uint32_t k, std::unordered_map<CommandId, CmdClass> classes,
                                      uint64_t seed) {
  if (k < 1) throw ConfigError("multiprogramming level must be at least 1");
  CGFunction cg(k, false, seed);
  cg.kind_ = 1;
  cg.classes_ = std::move(classes);
  return cg;
}

CGFunction CGFunction::partition_rule(uint32_t k, ServiceSchema schema,
                                      std::unordered_map<CommandId, std::optional<std::string>> keys) {
  if (k < 1) throw ConfigError("multiprogramming level must be at least 1");
  CGFunction cg(k, true, 0);
  cg.kind_ = 2;
  cg.schema_ = std::move(schema);
  for (const auto& [cid, field] : keys)
    if (field) cg.schema_.field_offset(cid, *field);  // validates
  cg.keys_ = std::move(keys);
  return cg;
}

CGFunction CGFunction::random_subset_rule(uint32_t k, uint64_t seed) {
  if (k < 1) throw ConfigError("multiprogramming level must be at least 1");
  CGFunction cg(k, false, seed);
  cg.kind_ = 3;
  return cg;
}

GroupSet CGFunction::groups_for(CommandId cid, std::string_view input) {
  switch (kind_) {
    case 1: {
      auto it = classes_.find(cid);
      if (it == classes_.end())
        throw ConfigError("cid " + std::to_string(cid) + " not classified for broadcast rule");
      if (it->second == CmdClass::write_type) return GroupSet::full(k_);
      std::uniform_int_distribution<uint32_t> pick(1, k_);
      return GroupSet::single(pick(rng_));
    }
    case 2: {
      auto it = keys_.find(cid);
      if (it == keys_.end())
        throw ConfigError("cid " + std::to_string(cid) + " not mapped for partition rule");
      if (!it->second) return GroupSet::full(k_);
      int64_t x = schema_.read_int_field(cid, *it->second, input);
      uint64_t m = static_cast<uint64_t>(x) % k_;
      return GroupSet::single(static_cast<uint32_t>(m) + 1);
    }
    case 3: {
      std::uniform_int_distribution<uint32_t> size_pick(1, k_);
      uint32_t want = size_pick(rng_);
      std::vector<uint32_t> all(k_);
      for (uint32_t i = 0; i < k_; i++) all[i] = i + 1;
      std::shuffle(all.begin(), all.end(), rng_);
      all.resize(want);
      return GroupSet(std::move(all));
    }
    default:
      throw ConfigError("uninitialized C-G function");
  }
}

CGReport validate_cg(const CDep& cdep, CGFunction& cg, const std::vector<CommandInstance>& sample) {
  CGReport report;
  std::vector<GroupSet> groups;
  groups.reserve(sample.size());
  for (const CommandInstance& inst : sample) groups.push_back(cg.groups_for(inst.cid, inst.input));
  for (size_t i = 0; i < sample.size(); i++) {
    for (size_t j = i + 1; j < sample.size(); j++) {
      report.pairs_checked++;
      if (!cdep.is_dependent(sample[i].cid, sample[i].input, sample[j].cid, sample[j].input))
        continue;
      report.dependent_pairs++;
      if (!groups[i].intersects(groups[j]))
        report.violations.push_back(
            {i, j,
             sample[i].label + groups[i].str() + " vs " + sample[j].label + groups[j].str()});
    }
  }
  return report;
}

}  // namespace psmr

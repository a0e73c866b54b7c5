#pragma once

// Constraint contexts and the decidable (sound, incomplete) orderings on
// qualifiers and sizes. A BindEnv records, per namespace, the bounds each
// bound variable was declared with; entries remember the binder depths at
// declaration time so lookups can shift bounds up to the current scope.

#include <optional>
#include <string>

#include "rw/ir.hpp"
#include "rw/subst.hpp"

namespace rw {

struct QualCtxEntry {
  std::vector<Qual> lowers, uppers;
  uint32_t qdepth = 0;  // qual binders in scope when declared
};

struct SizeCtxEntry {
  std::vector<Size> lowers, uppers;
  uint32_t sdepth = 0;
};

struct TypeCtxEntry {
  Qual qualLower;
  Size sizeUpper;
  bool mayHaveCaps = false;
  uint32_t qdepth = 0, sdepth = 0;
};

class BindEnv {
 public:
  uint32_t locCount = 0;
  std::vector<QualCtxEntry> quals;  // binding order; var i = entry size-1-i
  std::vector<SizeCtxEntry> sizes;
  std::vector<TypeCtxEntry> types;

  void push_loc() { ++locCount; }
  void push_qual(std::vector<Qual> lowers, std::vector<Qual> uppers);
  void push_size(std::vector<Size> lowers, std::vector<Size> uppers);
  void push_type(Qual qualLower, Size sizeUpper, bool mayHaveCaps);
  void push_quantifier(const Quantifier& q);

  bool has_loc(uint32_t idx) const { return idx < locCount; }
  bool has_qual(uint32_t idx) const { return idx < quals.size(); }
  bool has_size(uint32_t idx) const { return idx < sizes.size(); }
  bool has_type(uint32_t idx) const { return idx < types.size(); }

  // Bounds shifted to the current depth; empty when out of range.
  std::vector<Qual> qual_lowers(uint32_t idx) const;
  std::vector<Qual> qual_uppers(uint32_t idx) const;
  std::vector<Size> size_lowers(uint32_t idx) const;
  std::vector<Size> size_uppers(uint32_t idx) const;

  // Type-variable facts, shifted; nullopt when out of range.
  std::optional<Qual> type_qual_lower(uint32_t idx) const;
  std::optional<Size> type_size_upper(uint32_t idx) const;
  std::optional<bool> type_may_have_caps(uint32_t idx) const;
};

// q1 <= q2 under the declared bounds: reflexivity, Unr <= Lin, declared
// lower/upper edges, closed under transitivity.
bool qual_leq(const BindEnv& env, const Qual& a, const Qual& b);

// sz1 <= sz2. Complete on closed sizes; on open sizes it searches bound
// rewrites up to a budget and may answer false for true facts, never the
// reverse.
bool size_leq(const BindEnv& env, const Size& a, const Size& b);

// Sum-of-parts size of a type, constant-folded (vars sorted, constants
// merged). Type variables contribute their declared size bound. Returns
// nullopt and describes the failure in *err when the type has no size
// (recursion variable outside a reference, unbound variable).
std::optional<Size> size_of(const BindEnv& env, const Type& t, std::string* err = nullptr);

// The numeric value of a closed size; nullopt if any variable occurs.
std::optional<uint64_t> size_const(const Size& s);

// Flattens to (sorted variable indices with multiplicity, constant).
struct NormSize {
  std::vector<uint32_t> vars;
  uint64_t c = 0;
  friend bool operator==(const NormSize&, const NormSize&) = default;
};
NormSize normalize_size(const Size& s);
Size denormalize(const NormSize& n);

}  // namespace rw

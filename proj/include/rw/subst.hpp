#pragma once

// Capture-avoiding shifting and substitution over the four binder namespaces.
// "free0" operations act on the outermost free variable of a term, i.e. the
// variable that a just-removed binder used to bind.

#include "rw/ir.hpp"

namespace rw {

enum class VarKind : uint8_t { Loc, Size, Qual, Type };

inline VarKind index_kind(const Index& z) {
  switch (z.v.index()) {
    case 0: return VarKind::Loc;
    case 1: return VarKind::Size;
    case 2: return VarKind::Qual;
    default: return VarKind::Type;
  }
}

Qual shift(const Qual&, VarKind k, uint32_t d);
Size shift(const Size&, VarKind k, uint32_t d);
Loc shift(const Loc&, VarKind k, uint32_t d);
Type shift(const Type&, VarKind k, uint32_t d);
PreType shift(const PreType&, VarKind k, uint32_t d);
HeapType shift(const HeapType&, VarKind k, uint32_t d);
FunType shift(const FunType&, VarKind k, uint32_t d);

Size subst_free0(const Size&, const Index& z);
Type subst_free0(const Type&, const Index& z);
PreType subst_free0(const PreType&, const Index& z);
HeapType subst_free0(const HeapType&, const Index& z);
FunType subst_free0(const FunType&, const Index& z);
ArrowType subst_free0(const ArrowType&, const Index& z);
InstrSeq subst_free0(const InstrSeq&, const Index& z);
LocalEffect subst_free0(const LocalEffect&, const Index& z);

// Does the outermost free variable of kind k occur?
bool mentions_free0(const Type&, VarKind k);
bool mentions_free0(const std::vector<Type>&, VarKind k);

// Abstracts every occurrence of a concrete location into a fresh location
// variable with index 0 (other location variables shift up to make room).
Type abstract_loc(const Type&, const Loc& target);
PreType abstract_loc(const PreType&, const Loc& target);

// Removes one funtype quantifier per index, left to right.
// Indices must match the quantifier kinds; callers validate bounds.
FunType instantiate_prefix(const FunType&, const std::vector<Index>& zs);

}  // namespace rw

#include "rw/ir.hpp"

namespace rw {

static bool ptr_eq(const std::shared_ptr<const Value>& a, const std::shared_ptr<const Value>& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  return *a == *b;
}

bool operator==(const Index& a, const Index& b) {
  if (a.v.index() != b.v.index()) return false;
  if (auto* l = std::get_if<Loc>(&a.v)) return *l == std::get<Loc>(b.v);
  if (auto* s = std::get_if<Size>(&a.v)) return *s == std::get<Size>(b.v);
  if (auto* q = std::get_if<Qual>(&a.v)) return *q == std::get<Qual>(b.v);
  const auto& pa = std::get<PreType>(a.v);
  const auto& pb = std::get<PreType>(b.v);
  if (pa == pb) return true;
  if (!pa || !pb) return false;
  return *pa == *pb;
}

PreType pre(PreTypeVariant v) { return std::make_shared<PreTypeNode>(PreTypeNode{std::move(v)}); }

bool operator==(const Value& a, const Value& b) {
  return a.qualHint == b.qualHint && a.v == b.v;
}
bool operator==(const GroupV& a, const GroupV& b) { return a.elems == b.elems; }
bool operator==(const FoldV& a, const FoldV& b) {
  if (!(a.rec == b.rec) && (!a.rec || !b.rec || !(*a.rec == *b.rec))) return false;
  return ptr_eq(a.inner, b.inner);
}
bool operator==(const MempackV& a, const MempackV& b) {
  return a.loc == b.loc && ptr_eq(a.inner, b.inner);
}
bool operator==(const CoderefV& a, const CoderefV& b) {
  return a.inst == b.inst && a.tab == b.tab && a.indices == b.indices;
}

bool operator==(const VariantHV& a, const VariantHV& b) {
  return a.tag == b.tag && ptr_eq(a.payload, b.payload);
}
bool operator==(const StructHV& a, const StructHV& b) {
  return a.fields == b.fields && a.fieldSizes == b.fieldSizes;
}
bool operator==(const ArrayHV& a, const ArrayHV& b) { return a.elems == b.elems; }
bool operator==(const PackHV& a, const PackHV& b) {
  if (!(*a.witness == *b.witness)) return false;
  return ptr_eq(a.payload, b.payload) && a.ht == b.ht;
}

bool operator==(const Instr& a, const Instr& b) { return a.v == b.v; }

bool operator==(const IVal& a, const IVal& b) { return a.val == b.val; }
bool operator==(const INum& a, const INum& b) { return a.nt == b.nt && a.op == b.op; }
bool operator==(const IBlock& a, const IBlock& b) {
  return a.arrow == b.arrow && a.effect == b.effect && a.body == b.body;
}
bool operator==(const ILoop& a, const ILoop& b) { return a.arrow == b.arrow && a.body == b.body; }
bool operator==(const IIte& a, const IIte& b) {
  return a.arrow == b.arrow && a.effect == b.effect && a.thn == b.thn && a.els == b.els;
}
bool operator==(const IInst& a, const IInst& b) { return a.indices == b.indices; }
bool operator==(const ICall& a, const ICall& b) { return a.fn == b.fn && a.indices == b.indices; }
bool operator==(const IRecFold& a, const IRecFold& b) {
  if (a.rec == b.rec) return true;
  if (!a.rec || !b.rec) return false;
  return *a.rec == *b.rec;
}
bool operator==(const IMemunpack& a, const IMemunpack& b) {
  return a.arrow == b.arrow && a.effect == b.effect && a.body == b.body;
}
bool operator==(const IVariantCase& a, const IVariantCase& b) {
  return a.qual == b.qual && a.ht == b.ht && a.arrow == b.arrow && a.effect == b.effect &&
         a.arms == b.arms;
}
bool operator==(const IExistsPack& a, const IExistsPack& b) {
  if (!(*a.witness == *b.witness)) return false;
  return a.ht == b.ht && a.qual == b.qual;
}
bool operator==(const IExistsUnpack& a, const IExistsUnpack& b) {
  return a.qual == b.qual && a.ht == b.ht && a.arrow == b.arrow && a.effect == b.effect &&
         a.body == b.body;
}
bool operator==(const ICallCl& a, const ICallCl& b) {
  if (a.inst != b.inst || !(a.indices == b.indices)) return false;
  if (a.code == b.code) return true;
  if (!a.code || !b.code) return false;
  return *a.code == *b.code;
}
bool operator==(const ILabel& a, const ILabel& b) {
  return a.arity == b.arity && a.arrow == b.arrow && a.cont == b.cont && a.body == b.body;
}
bool operator==(const LocalSlotV& a, const LocalSlotV& b) {
  return a.val == b.val && a.sizeBits == b.sizeBits;
}
bool operator==(const ILocalFrame& a, const ILocalFrame& b) {
  return a.arity == b.arity && a.inst == b.inst && a.locals == b.locals && a.body == b.body &&
         a.results == b.results;
}
bool operator==(const IMalloc& a, const IMalloc& b) {
  return a.bits == b.bits && a.hv == b.hv && a.mem == b.mem && a.ht == b.ht;
}

bool operator==(const FuncDef& a, const FuncDef& b) {
  return a.exports == b.exports && a.importName == b.importName && a.type == b.type &&
         a.localSizes == b.localSizes && a.body == b.body;
}
bool operator==(const GlobalDef& a, const GlobalDef& b) {
  if (a.exports != b.exports || a.importName != b.importName || a.mut != b.mut) return false;
  if (!(a.pre == b.pre) && (!a.pre || !b.pre || !(*a.pre == *b.pre))) return false;
  return a.init == b.init;
}
bool operator==(const TableDef& a, const TableDef& b) {
  return a.exports == b.exports && a.importName == b.importName && a.entries == b.entries;
}
bool operator==(const RWModule& a, const RWModule& b) {
  return a.name == b.name && a.funcs == b.funcs && a.globals == b.globals && a.table == b.table;
}

}  // namespace rw

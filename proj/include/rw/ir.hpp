#pragma once

// Core IR: types, heap types, function types, instructions, values, modules.
// Binders (locations, sizes, qualifiers, pretypes) use de Bruijn indices in
// four independent namespaces, innermost binder = index 0. Concrete names
// exist only in the surface syntax. Sizes are measured in bits.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "rw/diag.hpp"

namespace rw {

enum class Mem : uint8_t { Unr, Lin };
enum class Privilege : uint8_t { R, RW };
enum class NumType : uint8_t { I32, I64, UI32, UI64, F32, F64 };

inline bool num_is_int(NumType t) { return t != NumType::F32 && t != NumType::F64; }
inline bool num_is_signed(NumType t) { return t == NumType::I32 || t == NumType::I64; }
inline uint64_t num_bits(NumType t) {
  return (t == NumType::I64 || t == NumType::UI64 || t == NumType::F64) ? 64 : 32;
}

// ---------------------------------------------------------------------------
// Qualifiers, sizes, locations

struct Qual {
  enum class Kind : uint8_t { Var, Unr, Lin };
  Kind kind = Kind::Unr;
  uint32_t index = 0;  // Kind::Var only

  static Qual unr() { return {Kind::Unr, 0}; }
  static Qual lin() { return {Kind::Lin, 0}; }
  static Qual var(uint32_t i) { return {Kind::Var, i}; }
  bool is_var() const { return kind == Kind::Var; }

  friend bool operator==(const Qual&, const Qual&) = default;
};

// sz ::= var | sz + sz | n     (n in bits, non-negative)
struct Size {
  enum class Kind : uint8_t { Var, Plus, Const };
  Kind kind = Kind::Const;
  uint32_t index = 0;    // Var
  uint64_t bits = 0;     // Const
  std::shared_ptr<const Size> lhs, rhs;  // Plus

  static Size constant(uint64_t n) {
    Size s;
    s.kind = Kind::Const;
    s.bits = n;
    return s;
  }
  static Size var(uint32_t i) {
    Size s;
    s.kind = Kind::Var;
    s.index = i;
    return s;
  }
  static Size plus(Size a, Size b) {
    Size s;
    s.kind = Kind::Plus;
    s.lhs = std::make_shared<Size>(std::move(a));
    s.rhs = std::make_shared<Size>(std::move(b));
    return s;
  }
  bool is_const() const { return kind == Kind::Const; }
};

bool operator==(const Size& a, const Size& b);
inline bool operator!=(const Size& a, const Size& b) { return !(a == b); }

struct Loc {
  enum class Kind : uint8_t { Var, Concrete };
  Kind kind = Kind::Var;
  uint32_t index = 0;   // Var
  uint64_t addr = 0;    // Concrete
  Mem mem = Mem::Lin;   // Concrete

  static Loc var(uint32_t i) { return {Kind::Var, i, 0, Mem::Lin}; }
  static Loc concrete(uint64_t addr, Mem m) { return {Kind::Concrete, 0, addr, m}; }
  bool is_var() const { return kind == Kind::Var; }

  friend bool operator==(const Loc&, const Loc&) = default;
};

// ---------------------------------------------------------------------------
// Types

struct PreTypeNode;
using PreType = std::shared_ptr<const PreTypeNode>;

struct Type {
  PreType pre;
  Qual qual;
};

bool operator==(const Type& a, const Type& b);
inline bool operator!=(const Type& a, const Type& b) { return !(a == b); }

struct StructField {
  Type ty;
  Size size;

  friend bool operator==(const StructField&, const StructField&) = default;
};

struct VariantHT {
  std::vector<Type> cases;
  friend bool operator==(const VariantHT&, const VariantHT&) = default;
};
struct StructHT {
  std::vector<StructField> fields;
  friend bool operator==(const StructHT&, const StructHT&) = default;
};
struct ArrayHT {
  Type elem;
  friend bool operator==(const ArrayHT&, const ArrayHT&) = default;
};
// ∃ α. τ — binds a pretype variable in body; qualLower is the least qualifier
// the witness may be used at, sizeBound its maximal size. Heap-resident, so
// the witness may never contain capabilities.
struct ExHT {
  Qual qualLower;
  Size sizeBound;
  Type body;
  friend bool operator==(const ExHT&, const ExHT&) = default;
};

using HeapType = std::variant<VariantHT, StructHT, ArrayHT, ExHT>;

// Quantifiers in function types. The list forms a telescope: bounds of a later
// quantifier may reference variables bound by earlier ones.
struct LocQ {
  friend bool operator==(const LocQ&, const LocQ&) = default;
};
struct SizeQ {
  std::vector<Size> lowers, uppers;
  friend bool operator==(const SizeQ&, const SizeQ&) = default;
};
struct QualQ {
  std::vector<Qual> lowers, uppers;
  friend bool operator==(const QualQ&, const QualQ&) = default;
};
struct TypeQ {
  Qual qualLower;
  Size sizeUpper;
  bool mayHaveCaps = false;
  friend bool operator==(const TypeQ&, const TypeQ&) = default;
};

using Quantifier = std::variant<LocQ, SizeQ, QualQ, TypeQ>;

struct FunType {
  std::vector<Quantifier> quants;
  std::vector<Type> ins, outs;
  friend bool operator==(const FunType&, const FunType&) = default;
};

struct UnitT {
  friend bool operator==(const UnitT&, const UnitT&) = default;
};
struct NumT {
  NumType nt;
  friend bool operator==(const NumT&, const NumT&) = default;
};
struct VarT {
  uint32_t index;
  friend bool operator==(const VarT&, const VarT&) = default;
};
struct ProdT {
  std::vector<Type> components;
  friend bool operator==(const ProdT&, const ProdT&) = default;
};
struct RefT {
  Privilege priv;
  Loc loc;
  HeapType heap;
  friend bool operator==(const RefT&, const RefT&) = default;
};
struct PtrT {
  Loc loc;
  friend bool operator==(const PtrT&, const PtrT&) = default;
};
struct CapT {
  Privilege priv;
  Loc loc;
  HeapType heap;
  friend bool operator==(const CapT&, const CapT&) = default;
};
struct OwnT {
  Loc loc;
  friend bool operator==(const OwnT&, const OwnT&) = default;
};
// rec q α. (p^q) — body qualifier equals the bound; the bound variable may
// occur only behind a Ref or Ptr.
struct RecT {
  Qual qualBound;
  Type body;
  friend bool operator==(const RecT&, const RecT&) = default;
};
struct ExLocT {
  Type body;  // binds a location variable
  friend bool operator==(const ExLocT&, const ExLocT&) = default;
};
struct CodeRefT {
  FunType fn;
  friend bool operator==(const CodeRefT&, const CodeRefT&) = default;
};

using PreTypeVariant = std::variant<UnitT, NumT, VarT, ProdT, RefT, PtrT, CapT, OwnT, RecT,
                                    ExLocT, CodeRefT>;

struct PreTypeNode {
  PreTypeVariant v;
};

inline bool operator==(const PreTypeNode& a, const PreTypeNode& b) { return a.v == b.v; }
inline bool operator==(const Type& a, const Type& b) {
  if (a.qual != b.qual) return false;
  if (a.pre == b.pre) return true;
  if (!a.pre || !b.pre) return false;
  return *a.pre == *b.pre;
}

inline bool operator==(const Size& a, const Size& b) {
  if (a.kind != b.kind) return false;
  switch (a.kind) {
    case Size::Kind::Var: return a.index == b.index;
    case Size::Kind::Const: return a.bits == b.bits;
    case Size::Kind::Plus: return *a.lhs == *b.lhs && *a.rhs == *b.rhs;
  }
  return false;
}

// Instantiation indices for quantifier lists.
struct Index {
  std::variant<Loc, Size, Qual, PreType> v;
};

bool operator==(const Index& a, const Index& b);

// Pretype constructors
PreType pre(PreTypeVariant v);
inline PreType pt_unit() { return pre(UnitT{}); }
inline PreType pt_num(NumType n) { return pre(NumT{n}); }
inline PreType pt_i32() { return pt_num(NumType::I32); }
inline PreType pt_i64() { return pt_num(NumType::I64); }
inline PreType pt_var(uint32_t i) { return pre(VarT{i}); }
inline PreType pt_prod(std::vector<Type> ts) { return pre(ProdT{std::move(ts)}); }
inline PreType pt_ref(Privilege p, Loc l, HeapType h) { return pre(RefT{p, l, std::move(h)}); }
inline PreType pt_ptr(Loc l) { return pre(PtrT{l}); }
inline PreType pt_cap(Privilege p, Loc l, HeapType h) { return pre(CapT{p, l, std::move(h)}); }
inline PreType pt_own(Loc l) { return pre(OwnT{l}); }
inline PreType pt_rec(Qual q, Type body) { return pre(RecT{q, std::move(body)}); }
inline PreType pt_exloc(Type body) { return pre(ExLocT{std::move(body)}); }
inline PreType pt_coderef(FunType f) { return pre(CodeRefT{std::move(f)}); }

inline Type ty(PreType p, Qual q) { return {std::move(p), q}; }
inline Type ty_unr(PreType p) { return {std::move(p), Qual::unr()}; }
inline Type ty_lin(PreType p) { return {std::move(p), Qual::lin()}; }
inline Type ty_i32() { return ty_unr(pt_i32()); }
inline Type ty_unit() { return ty_unr(pt_unit()); }

// ---------------------------------------------------------------------------
// Runtime values
//
// Values carry just enough typing metadata for configurations to be
// re-checked after each step: fold values keep the recursive pretype they
// were built at, cap/own values keep their location and heap type, and any
// value may carry the qualifier it was stamped with by `qualify`/`group`.
// The metadata has no operational effect and is erased by lowering.

struct Value;

struct UnitV {
  friend bool operator==(const UnitV&, const UnitV&) = default;
};
struct NumV {
  NumType nt;
  uint64_t bits;  // f32: low 32 bits of the IEEE encoding; f64: all 64
  friend bool operator==(const NumV&, const NumV&) = default;
};
struct GroupV {
  std::vector<Value> elems;
};
struct RefV {
  Loc loc;
  Privilege priv = Privilege::RW;  // demoted references keep R at runtime
  friend bool operator==(const RefV&, const RefV&) = default;
};
struct PtrV {
  Loc loc;
  friend bool operator==(const PtrV&, const PtrV&) = default;
};
struct CapV {
  Privilege priv;
  Loc loc;
  HeapType heap;
  friend bool operator==(const CapV&, const CapV&) = default;
};
struct OwnV {
  Loc loc;
  friend bool operator==(const OwnV&, const OwnV&) = default;
};
struct FoldV {
  PreType rec;  // the Rec pretype this value folds into
  std::shared_ptr<const Value> inner;
};
struct MempackV {
  Loc loc;
  std::shared_ptr<const Value> inner;
};
struct CoderefV {
  uint32_t inst;
  uint32_t tab;
  std::vector<Index> indices;
};

using ValueVariant =
    std::variant<UnitV, NumV, GroupV, RefV, PtrV, CapV, OwnV, FoldV, MempackV, CoderefV>;

struct Value {
  ValueVariant v;
  std::optional<Qual> qualHint;  // stamped by qualify/group/fold/pack
};

bool operator==(const Value& a, const Value& b);
bool operator==(const GroupV& a, const GroupV& b);
bool operator==(const FoldV& a, const FoldV& b);
bool operator==(const MempackV& a, const MempackV& b);
bool operator==(const CoderefV& a, const CoderefV& b);

inline Value v_unit() { return {UnitV{}, {}}; }
inline Value v_num(NumType nt, uint64_t bits) { return {NumV{nt, bits}, {}}; }
inline Value v_i32(uint32_t n) { return v_num(NumType::I32, n); }
inline Value v_ref(Loc l) { return {RefV{l}, {}}; }

// Heap values. Struct cells remember their per-field slot sizes and pack
// cells their full heap type; both are needed to reconstruct store typings.
struct VariantHV {
  uint32_t tag;
  std::shared_ptr<const Value> payload;
};
struct StructHV {
  std::vector<Value> fields;
  std::vector<uint64_t> fieldSizes;  // bits, parallel to fields
};
struct ArrayHV {
  std::vector<Value> elems;
};
struct PackHV {
  PreType witness;
  std::shared_ptr<const Value> payload;
  HeapType ht;
};

using HeapValue = std::variant<VariantHV, StructHV, ArrayHV, PackHV>;

bool operator==(const VariantHV& a, const VariantHV& b);
bool operator==(const StructHV& a, const StructHV& b);
bool operator==(const ArrayHV& a, const ArrayHV& b);
bool operator==(const PackHV& a, const PackHV& b);

// ---------------------------------------------------------------------------
// Instructions

struct Instr;
using InstrSeq = std::vector<Instr>;

struct ArrowType {
  std::vector<Type> ins, outs;
  friend bool operator==(const ArrowType&, const ArrowType&) = default;
};

// Declares the local slots whose type differs after a block from before it.
struct LocalEffect {
  std::vector<std::pair<uint32_t, Type>> entries;
  friend bool operator==(const LocalEffect&, const LocalEffect&) = default;
};

enum class NumOp : uint8_t {
  // int unary
  Clz, Ctz, Popcnt,
  // int binary
  Add, Sub, Mul, Div, Rem, And, Or, Xor, Shl, Shr, Rotl, Rotr,
  // int test / comparison
  Eqz, Eq, Ne, Lt, Gt, Le, Ge,
  // float unary
  Abs, Neg, Sqrt, Ceil, Floor, Trunc, Nearest,
  // float binary (Add..Div shared)
  Min, Max, Copysign,
};

enum class CvtOp : uint8_t { Wrap, Extend, TruncSat, Convert, Demote, Promote, Reinterpret };

struct IVal {
  Value val;
};
struct INum {
  NumType nt;
  NumOp op;
};
struct ICvt {
  NumType to;
  CvtOp op;
  NumType from;
  friend bool operator==(const ICvt&, const ICvt&) = default;
};
struct IUnreachable {
  friend bool operator==(const IUnreachable&, const IUnreachable&) = default;
};
struct INop {
  friend bool operator==(const INop&, const INop&) = default;
};
struct IDrop {
  friend bool operator==(const IDrop&, const IDrop&) = default;
};
struct ISelect {
  friend bool operator==(const ISelect&, const ISelect&) = default;
};
struct IBlock {
  ArrowType arrow;
  LocalEffect effect;
  InstrSeq body;
};
struct ILoop {
  ArrowType arrow;
  InstrSeq body;
};
struct IIte {
  ArrowType arrow;
  LocalEffect effect;
  InstrSeq thn, els;
};
struct IBr {
  uint32_t depth;
  friend bool operator==(const IBr&, const IBr&) = default;
};
struct IBrIf {
  uint32_t depth;
  friend bool operator==(const IBrIf&, const IBrIf&) = default;
};
struct IBrTable {
  std::vector<uint32_t> targets;
  uint32_t dflt;
  friend bool operator==(const IBrTable&, const IBrTable&) = default;
};
struct IReturn {
  friend bool operator==(const IReturn&, const IReturn&) = default;
};
struct IGetLocal {
  uint32_t idx;
  Qual qual;
  friend bool operator==(const IGetLocal&, const IGetLocal&) = default;
};
struct ISetLocal {
  uint32_t idx;
  friend bool operator==(const ISetLocal&, const ISetLocal&) = default;
};
struct ITeeLocal {
  uint32_t idx;
  friend bool operator==(const ITeeLocal&, const ITeeLocal&) = default;
};
struct IGetGlobal {
  uint32_t idx;
  friend bool operator==(const IGetGlobal&, const IGetGlobal&) = default;
};
struct ISetGlobal {
  uint32_t idx;
  friend bool operator==(const ISetGlobal&, const ISetGlobal&) = default;
};
struct IQualify {
  Qual qual;
  friend bool operator==(const IQualify&, const IQualify&) = default;
};
struct ICodeRef {
  uint32_t tableIdx;
  friend bool operator==(const ICodeRef&, const ICodeRef&) = default;
};
struct IInst {
  std::vector<Index> indices;
};
struct ICallIndirect {
  friend bool operator==(const ICallIndirect&, const ICallIndirect&) = default;
};
struct ICall {
  uint32_t fn;
  std::vector<Index> indices;
};
struct IRecFold {
  PreType rec;
};
struct IRecUnfold {
  friend bool operator==(const IRecUnfold&, const IRecUnfold&) = default;
};
struct IMempack {
  Loc loc;
  friend bool operator==(const IMempack&, const IMempack&) = default;
};
struct IMemunpack {  // binds a location variable in body
  ArrowType arrow;
  LocalEffect effect;
  InstrSeq body;
};
struct IGroup {
  uint32_t n;
  Qual qual;
  friend bool operator==(const IGroup&, const IGroup&) = default;
};
struct IUngroup {
  friend bool operator==(const IUngroup&, const IUngroup&) = default;
};
struct ICapSplit {
  friend bool operator==(const ICapSplit&, const ICapSplit&) = default;
};
struct ICapJoin {
  friend bool operator==(const ICapJoin&, const ICapJoin&) = default;
};
struct IRefDemote {
  friend bool operator==(const IRefDemote&, const IRefDemote&) = default;
};
struct IRefSplit {
  friend bool operator==(const IRefSplit&, const IRefSplit&) = default;
};
struct IRefJoin {
  friend bool operator==(const IRefJoin&, const IRefJoin&) = default;
};
struct IStructMalloc {
  std::vector<Size> sizes;
  Qual qual;
  friend bool operator==(const IStructMalloc&, const IStructMalloc&) = default;
};
struct IStructFree {
  friend bool operator==(const IStructFree&, const IStructFree&) = default;
};
struct IStructGet {
  uint32_t idx;
  friend bool operator==(const IStructGet&, const IStructGet&) = default;
};
struct IStructSet {
  uint32_t idx;
  friend bool operator==(const IStructSet&, const IStructSet&) = default;
};
struct IStructSwap {
  uint32_t idx;
  friend bool operator==(const IStructSwap&, const IStructSwap&) = default;
};
struct IVariantMalloc {
  uint32_t tag;
  std::vector<Type> cases;
  Qual qual;
  friend bool operator==(const IVariantMalloc&, const IVariantMalloc&) = default;
};
struct IVariantCase {
  Qual qual;          // consumption mode: Lin consumes the ref, Unr returns it
  HeapType ht;        // the variant heap type being analyzed
  ArrowType arrow;
  LocalEffect effect;
  std::vector<InstrSeq> arms;
};
struct IArrayMalloc {
  Qual qual;
  friend bool operator==(const IArrayMalloc&, const IArrayMalloc&) = default;
};
struct IArrayGet {
  friend bool operator==(const IArrayGet&, const IArrayGet&) = default;
};
struct IArraySet {
  friend bool operator==(const IArraySet&, const IArraySet&) = default;
};
struct IArrayFree {
  friend bool operator==(const IArrayFree&, const IArrayFree&) = default;
};
struct IExistsPack {
  PreType witness;
  HeapType ht;  // must be ExHT
  Qual qual;
};
struct IExistsUnpack {  // binds a pretype variable in body
  Qual qual;            // consumption mode, as for variant.case
  HeapType ht;          // must be ExHT
  ArrowType arrow;
  LocalEffect effect;
  InstrSeq body;
};

// Administrative instructions; never present in parsed source modules.
struct FuncDef;

struct ITrap {
  friend bool operator==(const ITrap&, const ITrap&) = default;
};
struct ICallCl {
  uint32_t inst;
  std::shared_ptr<const FuncDef> code;
  std::vector<Index> indices;
};
struct ILabel {
  uint32_t arity;      // |arrow.ins| = branch payload count
  ArrowType arrow;     // branch payload types -> overall result types
  InstrSeq cont;       // continuation run on branch (loop re-entry); empty for blocks
  InstrSeq body;
};
struct LocalSlotV {
  Value val;
  uint64_t sizeBits;
};
struct ILocalFrame {
  uint32_t arity;  // result count
  uint32_t inst;   // owning instance
  std::vector<LocalSlotV> locals;
  InstrSeq body;
  std::vector<Type> results;  // declared result types of the called function
};
struct IMalloc {
  uint64_t bits;
  HeapValue hv;
  Mem mem;
  HeapType ht;  // cell type recorded for the new location
};
struct IFree {
  friend bool operator==(const IFree&, const IFree&) = default;
};

using InstrVariant = std::variant<
    IVal, INum, ICvt, IUnreachable, INop, IDrop, ISelect, IBlock, ILoop, IIte, IBr, IBrIf,
    IBrTable, IReturn, IGetLocal, ISetLocal, ITeeLocal, IGetGlobal, ISetGlobal, IQualify,
    ICodeRef, IInst, ICallIndirect, ICall, IRecFold, IRecUnfold, IMempack, IMemunpack, IGroup,
    IUngroup, ICapSplit, ICapJoin, IRefDemote, IRefSplit, IRefJoin, IStructMalloc, IStructFree,
    IStructGet, IStructSet, IStructSwap, IVariantMalloc, IVariantCase, IArrayMalloc, IArrayGet,
    IArraySet, IArrayFree, IExistsPack, IExistsUnpack, ITrap, ICallCl, ILabel, ILocalFrame,
    IMalloc, IFree>;

struct Instr {
  InstrVariant v;
  SourceSpan span;  // not part of structural equality

  Instr() : v(INop{}) {}
  Instr(InstrVariant iv) : v(std::move(iv)) {}
  Instr(InstrVariant iv, SourceSpan sp) : v(std::move(iv)), span(std::move(sp)) {}
};

bool operator==(const Instr& a, const Instr& b);
inline bool operator!=(const Instr& a, const Instr& b) { return !(a == b); }

bool operator==(const IVal&, const IVal&);
bool operator==(const INum&, const INum&);
bool operator==(const IBlock&, const IBlock&);
bool operator==(const ILoop&, const ILoop&);
bool operator==(const IIte&, const IIte&);
bool operator==(const IInst&, const IInst&);
bool operator==(const ICall&, const ICall&);
bool operator==(const IRecFold&, const IRecFold&);
bool operator==(const IMemunpack&, const IMemunpack&);
bool operator==(const IVariantCase&, const IVariantCase&);
bool operator==(const IExistsPack&, const IExistsPack&);
bool operator==(const IExistsUnpack&, const IExistsUnpack&);
bool operator==(const ICallCl&, const ICallCl&);
bool operator==(const ILabel&, const ILabel&);
bool operator==(const ILocalFrame&, const ILocalFrame&);
bool operator==(const LocalSlotV&, const LocalSlotV&);
bool operator==(const IMalloc&, const IMalloc&);

template <class T>
Instr instr(T node) {
  return Instr(InstrVariant(std::move(node)));
}

// ---------------------------------------------------------------------------
// Modules

struct FuncDef {
  std::vector<std::string> exports;
  std::optional<std::string> importName;  // "module.item"; import iff set
  FunType type;
  std::vector<Size> localSizes;  // slots after the arguments
  InstrSeq body;
};

struct GlobalDef {
  std::vector<std::string> exports;
  std::optional<std::string> importName;
  bool mut = false;
  PreType pre;  // globals hold unrestricted pretypes
  InstrSeq init;
};

struct TableDef {
  std::vector<std::string> exports;
  std::optional<std::string> importName;
  std::vector<uint32_t> entries;  // function indices
};

struct RWModule {
  std::string name;
  std::vector<FuncDef> funcs;
  std::vector<GlobalDef> globals;
  TableDef table;
};

bool operator==(const FuncDef& a, const FuncDef& b);
bool operator==(const GlobalDef& a, const GlobalDef& b);
bool operator==(const TableDef& a, const TableDef& b);
bool operator==(const RWModule& a, const RWModule& b);

// Short descriptions used by diagnostics and traces.
std::string show_qual(const Qual& q);
std::string show_size(const Size& s);
std::string show_loc(const Loc& l);
std::string show_numtype(NumType t);
std::string show_type(const Type& t);
std::string show_pretype(const PreType& p);
std::string show_heaptype(const HeapType& h);
std::string show_funtype(const FunType& f);
std::string show_value(const Value& v);
std::string instr_name(const Instr& i);

}  // namespace rw

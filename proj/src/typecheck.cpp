#include "rw/typecheck.hpp"

#include <algorithm>
#include <string>
#include <variant>

#include "rw/subst.hpp"
#include "rw/validity.hpp"

namespace rw {
namespace {

const BindEnv& closed_env() {
  static const BindEnv env;
  return env;
}

const Type& unit_unr() {
  static const Type t = ty_unit();
  return t;
}

const RefT* as_ref(const Type& t) { return t.pre ? std::get_if<RefT>(&t.pre->v) : nullptr; }
const CapT* as_cap(const Type& t) { return t.pre ? std::get_if<CapT>(&t.pre->v) : nullptr; }
const OwnT* as_own(const Type& t) { return t.pre ? std::get_if<OwnT>(&t.pre->v) : nullptr; }
const PtrT* as_ptr(const Type& t) { return t.pre ? std::get_if<PtrT>(&t.pre->v) : nullptr; }
const ProdT* as_prod(const Type& t) { return t.pre ? std::get_if<ProdT>(&t.pre->v) : nullptr; }
const RecT* as_rec(const Type& t) { return t.pre ? std::get_if<RecT>(&t.pre->v) : nullptr; }
const ExLocT* as_exloc(const Type& t) { return t.pre ? std::get_if<ExLocT>(&t.pre->v) : nullptr; }
const NumT* as_num(const Type& t) { return t.pre ? std::get_if<NumT>(&t.pre->v) : nullptr; }
const CodeRefT* as_coderef(const Type& t) {
  return t.pre ? std::get_if<CodeRefT>(&t.pre->v) : nullptr;
}

bool size_known_valid(const BindEnv& env, const Size& s) {
  switch (s.kind) {
    case Size::Kind::Const: return true;
    case Size::Kind::Var: return env.has_size(s.index);
    case Size::Kind::Plus:
      return s.lhs && s.rhs && size_known_valid(env, *s.lhs) && size_known_valid(env, *s.rhs);
  }
  return false;
}

bool qual_known_valid(const BindEnv& env, const Qual& q) {
  return !q.is_var() || env.has_qual(q.index);
}

bool loc_known_valid(const BindEnv& env, const Loc& l) {
  return !l.is_var() || env.has_loc(l.index);
}

// Wraps a heap type in the existential reference every allocation produces:
// ∃ℓ. (ref rw ℓ ht)^q, the whole package at q. The heap type moves under the
// fresh location binder, so its free location variables shift up.
Type alloc_result(const HeapType& ht, const Qual& q) {
  HeapType shifted = shift(ht, VarKind::Loc, 1);
  return ty(pt_exloc(ty(pt_ref(Privilege::RW, Loc::var(0), std::move(shifted)), q)), q);
}

bool heap_value_has_caps(const HeapValue& hv) {
  if (const auto* s = std::get_if<StructHV>(&hv)) {
    for (const auto& f : s->fields)
      if (value_has_caps(f)) return true;
    return false;
  }
  if (const auto* a = std::get_if<ArrayHV>(&hv)) {
    for (const auto& e : a->elems)
      if (value_has_caps(e)) return true;
    return false;
  }
  if (const auto* v = std::get_if<VariantHV>(&hv)) return v->payload && value_has_caps(*v->payload);
  const auto& p = std::get<PackHV>(hv);
  return p.payload && value_has_caps(*p.payload);
}

std::string loc_str(const Loc& l) { return show_loc(l); }

// ---------------------------------------------------------------------------
// Value typing

struct ValueTyper {
  const StoreTyping& store;
  std::set<uint64_t>& used;
  DiagnosticList& diags;
  SourceSpan span;

  void err(const std::string& code, const std::string& msg) {
    diags.items.push_back({Severity::Error, code, msg, span});
  }

  const HeapCell* cell_at(const Loc& l) {
    if (l.is_var()) {
      err("TC012", "location variable in a runtime value");
      return nullptr;
    }
    const auto& mem = l.mem == Mem::Lin ? store.lin : store.unr;
    auto it = mem.find(l.addr);
    if (it == mem.end()) {
      err("TC012", "value refers to " + loc_str(l) + ", which is not in the store");
      return nullptr;
    }
    return &it->second;
  }

  bool consume(const Loc& l) {
    if (!used.insert(l.addr).second) {
      err("LIN001", "duplicate use of a linear value: " + loc_str(l) +
                        " is claimed by more than one owner");
      return false;
    }
    return true;
  }

  bool hint_ok(const Value& v, const Qual& q) {
    if (v.qualHint && !(*v.qualHint == q)) {
      err("TC002", "value was stamped " + show_qual(*v.qualHint) + " but is expected at " +
                       show_qual(q));
      return false;
    }
    return true;
  }

  bool check(const Value& v, const Type& expect) {
    if (!expect.pre) {
      err("TC002", "expected type is empty");
      return false;
    }
    if (!hint_ok(v, expect.qual)) return false;
    const Qual& q = expect.qual;
    return std::visit(
        [&](const auto& node) -> bool { return check_node(node, expect, q); }, v.v);
  }

  bool check_node(const UnitV&, const Type& expect, const Qual&) {
    if (!std::holds_alternative<UnitT>(expect.pre->v)) return type_clash("unit", expect);
    return true;
  }
  bool check_node(const NumV& n, const Type& expect, const Qual&) {
    const auto* nt = std::get_if<NumT>(&expect.pre->v);
    if (!nt || nt->nt != n.nt) return type_clash("a numeric value", expect);
    return true;
  }
  bool check_node(const GroupV& g, const Type& expect, const Qual&) {
    const auto* p = std::get_if<ProdT>(&expect.pre->v);
    if (!p) return type_clash("a tuple", expect);
    if (p->components.size() != g.elems.size()) {
      err("TC002", "tuple has " + std::to_string(g.elems.size()) + " elements but the type lists " +
                       std::to_string(p->components.size()));
      return false;
    }
    bool ok = true;
    for (size_t i = 0; i < g.elems.size(); ++i) ok &= check(g.elems[i], p->components[i]);
    return ok;
  }
  bool check_node(const RefV& r, const Type& expect, const Qual& q) {
    const auto* rt = std::get_if<RefT>(&expect.pre->v);
    if (!rt) return type_clash("a reference", expect);
    if (!(r.loc == rt->loc)) {
      err("TC002", "reference to " + loc_str(r.loc) + " typed at " + loc_str(rt->loc));
      return false;
    }
    if (r.priv == Privilege::R && rt->priv == Privilege::RW) {
      err("TC007", "read-only reference cannot serve a read-write type");
      return false;
    }
    const HeapCell* cell = cell_at(r.loc);
    if (!cell) return false;
    if (!(cell->ht == rt->heap)) {
      err("TC012", "store records a different cell type for " + loc_str(r.loc));
      return false;
    }
    if (r.loc.mem == Mem::Lin) {
      if (!qual_leq(closed_env(), Qual::lin(), q)) {
        err("TC005", "reference into linear memory must carry a linear qualifier");
        return false;
      }
      return consume(r.loc);
    }
    if (!qual_leq(closed_env(), q, Qual::unr())) {
      err("TC005", "reference into unrestricted memory cannot carry a linear qualifier");
      return false;
    }
    return true;
  }
  bool check_node(const PtrV& p, const Type& expect, const Qual&) {
    const auto* pt = std::get_if<PtrT>(&expect.pre->v);
    if (!pt) return type_clash("a pointer", expect);
    if (!(p.loc == pt->loc)) {
      err("TC002", "pointer to " + loc_str(p.loc) + " typed at " + loc_str(pt->loc));
      return false;
    }
    return true;
  }
  bool check_node(const CapV& c, const Type& expect, const Qual&) {
    const auto* ct = std::get_if<CapT>(&expect.pre->v);
    if (!ct) return type_clash("a capability", expect);
    if (c.priv != ct->priv || !(c.loc == ct->loc) || !(c.heap == ct->heap)) {
      err("TC002", "capability does not match its type");
      return false;
    }
    if (c.loc.is_var() || c.loc.mem != Mem::Lin) {
      err("TC012", "capability must name a linear store location");
      return false;
    }
    const HeapCell* cell = cell_at(c.loc);
    if (!cell) return false;
    if (!(cell->ht == c.heap)) {
      err("TC012", "store records a different cell type for " + loc_str(c.loc));
      return false;
    }
    // A read-write capability owns the cell's typing entry; a read-only one
    // (split off, ownership held elsewhere) does not.
    if (c.priv == Privilege::RW) return consume(c.loc);
    return true;
  }
  bool check_node(const OwnV& o, const Type& expect, const Qual&) {
    const auto* ot = std::get_if<OwnT>(&expect.pre->v);
    if (!ot) return type_clash("an ownership token", expect);
    if (!(o.loc == ot->loc)) {
      err("TC002", "ownership token for " + loc_str(o.loc) + " typed at " + loc_str(ot->loc));
      return false;
    }
    if (!cell_at(o.loc)) return false;
    return consume(o.loc);
  }
  bool check_node(const FoldV& f, const Type& expect, const Qual&) {
    const auto* rt = std::get_if<RecT>(&expect.pre->v);
    if (!rt) return type_clash("a folded value", expect);
    if (!f.rec || !(*f.rec == *expect.pre)) {
      err("TC002", "folded value was built at a different recursive type");
      return false;
    }
    if (!f.inner) {
      err("TC002", "folded value has no payload");
      return false;
    }
    return check(*f.inner, subst_free0(rt->body, Index{f.rec}));
  }
  bool check_node(const MempackV& m, const Type& expect, const Qual&) {
    const auto* ex = std::get_if<ExLocT>(&expect.pre->v);
    if (!ex) return type_clash("a location package", expect);
    if (m.loc.is_var()) {
      err("TC012", "location package witness must be a concrete location");
      return false;
    }
    if (!m.inner) {
      err("TC002", "location package has no payload");
      return false;
    }
    return check(*m.inner, subst_free0(ex->body, Index{m.loc}));
  }
  bool check_node(const CoderefV& c, const Type& expect, const Qual&) {
    const auto* ct = std::get_if<CodeRefT>(&expect.pre->v);
    if (!ct) return type_clash("a code reference", expect);
    std::optional<FunType> ft = resolve_coderef(c);
    if (!ft) return false;
    if (!(*ft == ct->fn)) {
      err("TC002", "code reference signature does not match its type");
      return false;
    }
    return true;
  }

  bool type_clash(const std::string& what, const Type& expect) {
    err("TC002", what + " cannot have type " + show_type(expect));
    return false;
  }

  std::optional<FunType> resolve_coderef(const CoderefV& c) {
    if (c.inst >= store.instances.size()) {
      err("TC004", "code reference names instance " + std::to_string(c.inst) +
                       ", which does not exist");
      return std::nullopt;
    }
    const ModuleEnv& me = store.instances[c.inst];
    if (c.tab >= me.table.size()) {
      err("TC004", "code reference names table entry " + std::to_string(c.tab) +
                       ", which does not exist");
      return std::nullopt;
    }
    FunType ft = me.table[c.tab];
    for (const Index& ix : c.indices) {
      if (ft.quants.empty()) {
        err("TC004", "code reference carries more indices than the signature has quantifiers");
        return std::nullopt;
      }
      // Bounds were checked when the value was built; re-checking here keeps
      // re-derived configurations honest.
      if (!index_fits(ix, ft.quants.front())) return std::nullopt;
      ft = instantiate_prefix(ft, {ix});
    }
    return ft;
  }

  bool index_fits(const Index& ix, const Quantifier& qt) {
    const BindEnv& env = closed_env();
    if (std::holds_alternative<LocQ>(qt)) return std::holds_alternative<Loc>(ix.v);
    if (const auto* sq = std::get_if<SizeQ>(&qt)) {
      const auto* s = std::get_if<Size>(&ix.v);
      if (!s) return kind_clash();
      for (const Size& lo : sq->lowers)
        if (!size_leq(env, lo, *s)) return bound_clash();
      for (const Size& up : sq->uppers)
        if (!size_leq(env, *s, up)) return bound_clash();
      return true;
    }
    if (const auto* qq = std::get_if<QualQ>(&qt)) {
      const auto* q = std::get_if<Qual>(&ix.v);
      if (!q) return kind_clash();
      for (const Qual& lo : qq->lowers)
        if (!qual_leq(env, lo, *q)) return bound_clash();
      for (const Qual& up : qq->uppers)
        if (!qual_leq(env, *q, up)) return bound_clash();
      return true;
    }
    const auto& tq = std::get<TypeQ>(qt);
    const auto* p = std::get_if<PreType>(&ix.v);
    if (!p) return kind_clash();
    DiagnosticList scratch;
    if (!type_valid(env, ty(*p, tq.qualLower), scratch, span)) {
      for (auto& d : scratch.items) diags.items.push_back(d);
      return false;
    }
    std::string serr;
    auto sz = size_of(env, ty(*p, tq.qualLower), &serr);
    if (!sz || !size_leq(env, *sz, tq.sizeUpper)) return bound_clash();
    if (!tq.mayHaveCaps && !no_caps(env, ty(*p, tq.qualLower))) {
      err("TC010", "instantiation type may carry capabilities where none are allowed");
      return false;
    }
    return true;
  }
  bool kind_clash() {
    err("TC003", "instantiation index kind does not match the quantifier");
    return false;
  }
  bool bound_clash() {
    err("TC006", "instantiation index violates the quantifier's declared bounds");
    return false;
  }

  std::optional<Type> infer(const Value& v) {
    return std::visit([&](const auto& node) { return infer_node(node, v.qualHint); }, v.v);
  }

  std::optional<Type> with_hint(PreType p, Qual natural, const std::optional<Qual>& hint,
                                bool raisable) {
    if (!hint) return ty(std::move(p), natural);
    if (raisable ? !qual_leq(closed_env(), natural, *hint) : !(natural == *hint)) {
      err("TC005", "value stamped " + show_qual(*hint) + " cannot be used below " +
                       show_qual(natural));
      return std::nullopt;
    }
    return ty(std::move(p), *hint);
  }

  std::optional<Type> infer_node(const UnitV&, const std::optional<Qual>& hint) {
    return with_hint(pt_unit(), Qual::unr(), hint, true);
  }
  std::optional<Type> infer_node(const NumV& n, const std::optional<Qual>& hint) {
    return with_hint(pt_num(n.nt), Qual::unr(), hint, true);
  }
  std::optional<Type> infer_node(const GroupV& g, const std::optional<Qual>& hint) {
    std::vector<Type> comps;
    Qual q = Qual::unr();
    for (const Value& e : g.elems) {
      auto t = infer(e);
      if (!t) return std::nullopt;
      if (!qual_leq(closed_env(), t->qual, Qual::unr())) q = Qual::lin();
      comps.push_back(std::move(*t));
    }
    if (hint) {
      for (const Type& c : comps)
        if (!qual_leq(closed_env(), c.qual, *hint)) {
          err("TC005", "tuple component qualifier exceeds the stamped tuple qualifier");
          return std::nullopt;
        }
      q = *hint;
    }
    return ty(pt_prod(std::move(comps)), q);
  }
  std::optional<Type> infer_node(const RefV& r, const std::optional<Qual>& hint) {
    const HeapCell* cell = cell_at(r.loc);
    if (!cell) return std::nullopt;
    PreType p = pt_ref(r.priv, r.loc, cell->ht);
    if (r.loc.mem == Mem::Lin) {
      if (!consume(r.loc)) return std::nullopt;
      return with_hint(std::move(p), Qual::lin(), hint, false);
    }
    if (hint && !qual_leq(closed_env(), *hint, Qual::unr())) {
      err("TC005", "reference into unrestricted memory cannot carry a linear qualifier");
      return std::nullopt;
    }
    return with_hint(std::move(p), Qual::unr(), hint, true);
  }
  std::optional<Type> infer_node(const PtrV& p, const std::optional<Qual>& hint) {
    return with_hint(pt_ptr(p.loc), Qual::unr(), hint, true);
  }
  std::optional<Type> infer_node(const CapV& c, const std::optional<Qual>& hint) {
    if (c.loc.is_var() || c.loc.mem != Mem::Lin) {
      err("TC012", "capability must name a linear store location");
      return std::nullopt;
    }
    const HeapCell* cell = cell_at(c.loc);
    if (!cell) return std::nullopt;
    if (!(cell->ht == c.heap)) {
      err("TC012", "store records a different cell type for " + loc_str(c.loc));
      return std::nullopt;
    }
    if (c.priv == Privilege::RW && !consume(c.loc)) return std::nullopt;
    return with_hint(pt_cap(c.priv, c.loc, c.heap), Qual::lin(), hint, false);
  }
  std::optional<Type> infer_node(const OwnV& o, const std::optional<Qual>& hint) {
    if (!cell_at(o.loc)) return std::nullopt;
    if (!consume(o.loc)) return std::nullopt;
    return with_hint(pt_own(o.loc), Qual::lin(), hint, false);
  }
  std::optional<Type> infer_node(const FoldV& f, const std::optional<Qual>& hint) {
    const RecT* rt = f.rec ? std::get_if<RecT>(&f.rec->v) : nullptr;
    if (!rt) {
      err("TC002", "folded value does not carry a recursive type");
      return std::nullopt;
    }
    if (!f.inner || !check(*f.inner, subst_free0(rt->body, Index{f.rec}))) return std::nullopt;
    return with_hint(f.rec, rt->qualBound, hint, true);
  }
  std::optional<Type> infer_node(const MempackV& m, const std::optional<Qual>& hint) {
    if (m.loc.is_var()) {
      err("TC012", "location package witness must be a concrete location");
      return std::nullopt;
    }
    if (!m.inner) {
      err("TC002", "location package has no payload");
      return std::nullopt;
    }
    auto inner = infer(*m.inner);
    if (!inner) return std::nullopt;
    Qual q = inner->qual;
    return with_hint(pt_exloc(abstract_loc(*inner, m.loc)), q, hint, true);
  }
  std::optional<Type> infer_node(const CoderefV& c, const std::optional<Qual>& hint) {
    auto ft = resolve_coderef(c);
    if (!ft) return std::nullopt;
    return with_hint(pt_coderef(std::move(*ft)), Qual::unr(), hint, true);
  }

  bool check_heap(const HeapValue& hv, const HeapType& ht) {
    if (const auto* s = std::get_if<StructHV>(&hv)) {
      const auto* st = std::get_if<StructHT>(&ht);
      if (!st) return heap_clash("a struct cell", ht);
      if (st->fields.size() != s->fields.size() || s->fieldSizes.size() != s->fields.size()) {
        err("TC012", "struct cell field count does not match its type");
        return false;
      }
      bool ok = true;
      for (size_t i = 0; i < s->fields.size(); ++i) {
        auto declared = size_const(st->fields[i].size);
        if (!declared || *declared != s->fieldSizes[i]) {
          err("TC012", "struct cell field " + std::to_string(i) +
                           " slot size differs from its type");
          ok = false;
        }
        ok &= check(s->fields[i], st->fields[i].ty);
      }
      return ok;
    }
    if (const auto* vv = std::get_if<VariantHV>(&hv)) {
      const auto* vt = std::get_if<VariantHT>(&ht);
      if (!vt) return heap_clash("a variant cell", ht);
      if (vv->tag >= vt->cases.size()) {
        err("TC012", "variant cell tag " + std::to_string(vv->tag) + " has no case");
        return false;
      }
      if (!vv->payload) {
        err("TC012", "variant cell has no payload");
        return false;
      }
      return check(*vv->payload, vt->cases[vv->tag]);
    }
    if (const auto* av = std::get_if<ArrayHV>(&hv)) {
      const auto* at = std::get_if<ArrayHT>(&ht);
      if (!at) return heap_clash("an array cell", ht);
      bool ok = true;
      for (const Value& e : av->elems) ok &= check(e, at->elem);
      return ok;
    }
    const auto& pv = std::get<PackHV>(hv);
    const auto* et = std::get_if<ExHT>(&ht);
    if (!et) return heap_clash("a package cell", ht);
    if (!(pv.ht == ht)) {
      err("TC012", "package cell records a different heap type");
      return false;
    }
    if (!pv.witness || !pv.payload) {
      err("TC012", "package cell is missing its witness or payload");
      return false;
    }
    Type at_bound = ty(pv.witness, et->qualLower);
    DiagnosticList scratch;
    if (!type_valid(closed_env(), at_bound, scratch, span)) {
      for (auto& d : scratch.items) diags.items.push_back(d);
      return false;
    }
    std::string serr;
    auto sz = size_of(closed_env(), at_bound, &serr);
    if (!sz || !size_leq(closed_env(), *sz, et->sizeBound)) {
      err("TC006", "package witness exceeds the existential's size bound");
      return false;
    }
    if (!no_caps(closed_env(), at_bound)) {
      err("TC010", "package witness may carry capabilities");
      return false;
    }
    return check(*pv.payload, subst_free0(et->body, Index{pv.witness}));
  }

  bool heap_clash(const std::string& what, const HeapType& ht) {
    err("TC012", what + " cannot have cell type " + show_heaptype(ht));
    return false;
  }
};

// ---------------------------------------------------------------------------
// Instruction checking

struct Frame {
  std::vector<Type> stack;
  bool poly = false;
};

struct Checker {
  const ModuleEnv* menv = nullptr;
  const StoreTyping* store = nullptr;  // set in configuration mode
  DiagnosticList& diags;
  std::vector<InstrNote>* notes = nullptr;
  std::set<uint64_t>* usedLin = nullptr;  // configuration mode only

  FunctionEnv fenv;
  LocalEnv locals;
  LinearLedger ledger;
  std::vector<Frame> frames;
  uint32_t globalLimit = UINT32_MAX;  // initializers may read earlier globals only
  bool inInitializer = false;

  explicit Checker(DiagnosticList& d) : diags(d) {
    fenv.linear.push_back(Qual::unr());
    frames.push_back(Frame{});
  }

  void err(const SourceSpan& span, const std::string& code, const std::string& msg) {
    diags.items.push_back({Severity::Error, code, msg, span});
  }

  Frame& frame() { return frames.back(); }

  bool leq(const Qual& a, const Qual& b) { return qual_leq(fenv.binders, a, b); }
  bool droppable(const Type& t) { return leq(t.qual, Qual::unr()); }

  void push(Type t) { frame().stack.push_back(std::move(t)); }
  void push_all(const std::vector<Type>& ts) {
    for (const Type& t : ts) push(t);
  }

  // Popping from an empty, polymorphic stack yields nullopt: dead code after
  // an unconditional transfer, where checks are suppressed.
  std::optional<Type> pop(const SourceSpan& span, const char* who) {
    Frame& f = frame();
    if (!f.stack.empty()) {
      Type t = std::move(f.stack.back());
      f.stack.pop_back();
      return t;
    }
    if (!f.poly) {
      err(span, "TC001", std::string(who) + " needs an operand but the stack is empty");
      f.poly = true;  // suppress cascading underflows
    }
    return std::nullopt;
  }

  bool expect(const SourceSpan& span, const std::optional<Type>& got, const Type& want,
              const char* who) {
    if (!got) return true;
    if (*got == want) return true;
    err(span, "TC002", std::string(who) + " expects " + show_type(want) + " but the stack holds " +
                           show_type(*got));
    return false;
  }

  // Pops and matches a full input row (deepest listed first).
  bool pop_row(const SourceSpan& span, const std::vector<Type>& ins, const char* who,
               std::vector<Type>* intoNote = nullptr) {
    bool ok = true;
    for (size_t i = ins.size(); i-- > 0;) {
      auto got = pop(span, who);
      ok &= expect(span, got, ins[i], who);
      if (intoNote && got) intoNote->insert(intoNote->begin(), std::move(*got));
    }
    return ok;
  }

  void make_poly() {
    Frame& f = frame();
    f.stack.clear();
    f.poly = true;
  }

  // --- annotation validity -------------------------------------------------

  bool tyv(const SourceSpan& span, const Type& t) {
    return type_valid(fenv.binders, t, diags, span);
  }
  bool tysv(const SourceSpan& span, const std::vector<Type>& ts) {
    bool ok = true;
    for (const Type& t : ts) ok &= tyv(span, t);
    return ok;
  }
  bool qualv(const SourceSpan& span, const Qual& q) {
    if (qual_known_valid(fenv.binders, q)) return true;
    err(span, "TC003", "qualifier variable is not in scope");
    return false;
  }
  bool sizev(const SourceSpan& span, const Size& s) {
    if (size_known_valid(fenv.binders, s)) return true;
    err(span, "TC003", "size variable is not in scope");
    return false;
  }
  bool locv(const SourceSpan& span, const Loc& l) {
    if (loc_known_valid(fenv.binders, l)) return true;
    err(span, "TC003", "location variable is not in scope");
    return false;
  }

  std::optional<Size> sized(const SourceSpan& span, const Type& t, const char* who) {
    std::string serr;
    auto s = size_of(fenv.binders, t, &serr);
    if (!s) err(span, "TC006", std::string(who) + ": " + serr);
    return s;
  }

  // --- locals ----------------------------------------------------------------

  LocalSlot* slot(const SourceSpan& span, uint32_t idx, const char* who) {
    if (idx < locals.size()) return &locals[idx];
    err(span, "TC004", std::string(who) + " names local slot " + std::to_string(idx) +
                           " but the function has " + std::to_string(locals.size()));
    return nullptr;
  }

  std::optional<LocalEnv> apply_effect(const SourceSpan& span, const LocalEffect& eff) {
    LocalEnv out = locals;
    for (const auto& [idx, t] : eff.entries) {
      if (idx >= out.size()) {
        err(span, "TC004", "local effect names slot " + std::to_string(idx) +
                               " but the function has " + std::to_string(out.size()));
        return std::nullopt;
      }
      if (!tyv(span, t)) return std::nullopt;
      auto sz = sized(span, t, "local effect");
      if (!sz) return std::nullopt;
      if (!size_leq(fenv.binders, *sz, out[idx].size)) {
        err(span, "TC006", "local effect type does not fit slot " + std::to_string(idx));
        return std::nullopt;
      }
      out[idx].type = t;
    }
    return out;
  }

  void normalize_ledger() {
    ledger.available.clear();
    for (uint32_t i = 0; i < locals.size(); ++i)
      if (!droppable(locals[i].type)) ledger.available.insert(i);
    for (uint32_t i : ledger.available) ledger.consumed.erase(i);
  }

  bool locals_droppable(const SourceSpan& span, const char* when) {
    bool ok = true;
    for (uint32_t i = 0; i < locals.size(); ++i) {
      if (!droppable(locals[i].type)) {
        err(span, "LIN002", std::string(when) + " while local slot " + std::to_string(i) +
                                " still holds a linear " + show_type(locals[i].type));
        ok = false;
      }
    }
    return ok;
  }

  // --- blocks ----------------------------------------------------------------

  void open_block(std::vector<Type> seed, std::vector<Type> results,
                  std::optional<LocalEnv> exitLocals) {
    fenv.labels.push_back({std::move(results), std::move(exitLocals)});
    fenv.linear.push_back(Qual::unr());
    frames.push_back({std::move(seed), false});
  }

  bool match_stack(const SourceSpan& span, const std::vector<Type>& got,
                   const std::vector<Type>& want, const char* what) {
    if (got.size() != want.size()) {
      err(span, "TC002", std::string(what) + " leaves " + std::to_string(got.size()) +
                             " values but must leave " + std::to_string(want.size()));
      return false;
    }
    for (size_t i = 0; i < got.size(); ++i) {
      if (!(got[i] == want[i])) {
        err(span, "TC002", std::string(what) + " result " + std::to_string(i) + " is " +
                               show_type(got[i]) + " but must be " + show_type(want[i]));
        return false;
      }
    }
    return true;
  }

  bool match_locals(const SourceSpan& span, const LocalEnv& want, const char* what) {
    for (size_t i = 0; i < locals.size() && i < want.size(); ++i) {
      if (!(locals[i].type == want[i].type)) {
        err(span, "TC002", std::string(what) + ": local slot " + std::to_string(i) + " holds " +
                               show_type(locals[i].type) + " but must hold " +
                               show_type(want[i].type));
        return false;
      }
    }
    return true;
  }

  // Validates the fallthrough exit, pops the block scope, and returns the
  // label's exit locals (declared, or as inferred from exit sites).
  std::optional<LocalEnv> close_block(const SourceSpan& span, const std::vector<Type>& wantStack,
                                      const char* what) {
    Frame fr = std::move(frames.back());
    frames.pop_back();
    LabelEntry lbl = std::move(fenv.labels.back());
    fenv.labels.pop_back();
    fenv.linear.pop_back();
    if (!fr.poly) {
      match_stack(span, fr.stack, wantStack, what);
      if (lbl.locals)
        match_locals(span, *lbl.locals, what);
      else
        lbl.locals = locals;
    }
    return lbl.locals;
  }

  void run_seq(const InstrSeq& seq) {
    for (const Instr& in : seq) check_instr(in);
  }

  // --- branching helpers ------------------------------------------------------

  LabelEntry* label_at(const SourceSpan& span, uint32_t depth, const char* who) {
    if (depth >= fenv.labels.size()) {
      err(span, "TC004", std::string(who) + " targets depth " + std::to_string(depth) + " but " +
                             std::to_string(fenv.labels.size()) + " labels are in scope");
      return nullptr;
    }
    return &fenv.labels[fenv.labels.size() - 1 - depth];
  }

  // Everything still stacked in the escaped blocks must be droppable.
  bool buried_droppable(const SourceSpan& span, uint32_t depth, const char* who) {
    bool ok = true;
    for (uint32_t k = 0; k <= depth && k < frames.size(); ++k) {
      const Frame& f = frames[frames.size() - 1 - k];
      for (const Type& t : f.stack) {
        if (!droppable(t)) {
          err(span, "LIN002", std::string(who) + " discards a linear " + show_type(t) +
                                  " stacked in an enclosing block");
          ok = false;
        }
      }
    }
    return ok;
  }

  bool branch_locals(const SourceSpan& span, LabelEntry& lbl, const char* who) {
    if (lbl.locals) return match_locals(span, *lbl.locals, who);
    lbl.locals = locals;
    return true;
  }

  // --- notes -------------------------------------------------------------------

  size_t begin_note() {
    if (!notes) return 0;
    notes->emplace_back();
    return notes->size() - 1;
  }
  InstrNote* note_at(size_t i) { return notes ? &(*notes)[i] : nullptr; }

  // --- instruction dispatch ----------------------------------------------------

  void check_instr(const Instr& in) {
    size_t ni = begin_note();
    if (frame().poly) {
      if (InstrNote* n = note_at(ni)) n->dead = true;
      // Reserve note slots for nested bodies so the lowering walk stays aligned.
      reserve_dead_notes(in);
      return;
    }
    std::visit([&](const auto& node) { this->on(in.span, node, ni); }, in.v);
  }

  void reserve_dead_notes(const Instr& in) {
    if (!notes) return;
    auto deadSeq = [&](const InstrSeq& seq) {
      for (const Instr& i : seq) {
        notes->emplace_back().dead = true;
        reserve_dead_notes(i);
      }
    };
    if (const auto* b = std::get_if<IBlock>(&in.v)) deadSeq(b->body);
    if (const auto* l = std::get_if<ILoop>(&in.v)) deadSeq(l->body);
    if (const auto* it = std::get_if<IIte>(&in.v)) {
      deadSeq(it->thn);
      deadSeq(it->els);
    }
    if (const auto* m = std::get_if<IMemunpack>(&in.v)) deadSeq(m->body);
    if (const auto* vc = std::get_if<IVariantCase>(&in.v))
      for (const InstrSeq& arm : vc->arms) deadSeq(arm);
    if (const auto* eu = std::get_if<IExistsUnpack>(&in.v)) deadSeq(eu->body);
    if (const auto* lb = std::get_if<ILabel>(&in.v)) {
      deadSeq(lb->body);
      deadSeq(lb->cont);
    }
    if (const auto* lf = std::get_if<ILocalFrame>(&in.v)) deadSeq(lf->body);
  }

  void record_io(size_t ni, std::vector<Type> ins, std::vector<Type> outs) {
    if (InstrNote* n = note_at(ni)) {
      n->ins = std::move(ins);
      n->outs = std::move(outs);
    }
  }

  // --- simple instructions -------------------------------------------------------

  void on(const SourceSpan& span, const IVal& node, size_t ni) {
    std::optional<Type> t;
    if (std::holds_alternative<UnitV>(node.val.v) && !node.val.qualHint) {
      t = unit_unr();
    } else if (const auto* nv = std::get_if<NumV>(&node.val.v);
               nv && !node.val.qualHint) {
      t = ty_unr(pt_num(nv->nt));
    } else if (store && usedLin) {
      ValueTyper vt{*store, *usedLin, diags, span};
      t = vt.infer(node.val);
    } else {
      err(span, "TC011", "heap value constants only occur in running configurations");
    }
    if (!t) {
      make_poly();
      return;
    }
    record_io(ni, {}, {*t});
    push(std::move(*t));
  }

  void on(const SourceSpan& span, const INum& node, size_t ni) {
    bool isInt = num_is_int(node.nt);
    Type opn = ty_unr(pt_num(node.nt));
    Type i32 = ty_i32();
    std::vector<Type> ins, outs;
    switch (node.op) {
      case NumOp::Clz:
      case NumOp::Ctz:
      case NumOp::Popcnt:
        if (!isInt) return op_class_err(span, node);
        ins = {opn};
        outs = {opn};
        break;
      case NumOp::Abs:
      case NumOp::Neg:
      case NumOp::Sqrt:
      case NumOp::Ceil:
      case NumOp::Floor:
      case NumOp::Trunc:
      case NumOp::Nearest:
        if (isInt) return op_class_err(span, node);
        ins = {opn};
        outs = {opn};
        break;
      case NumOp::Add:
      case NumOp::Sub:
      case NumOp::Mul:
      case NumOp::Div:
        ins = {opn, opn};
        outs = {opn};
        break;
      case NumOp::Rem:
      case NumOp::And:
      case NumOp::Or:
      case NumOp::Xor:
      case NumOp::Shl:
      case NumOp::Shr:
      case NumOp::Rotl:
      case NumOp::Rotr:
        if (!isInt) return op_class_err(span, node);
        ins = {opn, opn};
        outs = {opn};
        break;
      case NumOp::Min:
      case NumOp::Max:
      case NumOp::Copysign:
        if (isInt) return op_class_err(span, node);
        ins = {opn, opn};
        outs = {opn};
        break;
      case NumOp::Eqz:
        if (!isInt) return op_class_err(span, node);
        ins = {opn};
        outs = {i32};
        break;
      case NumOp::Eq:
      case NumOp::Ne:
      case NumOp::Lt:
      case NumOp::Gt:
      case NumOp::Le:
      case NumOp::Ge:
        ins = {opn, opn};
        outs = {i32};
        break;
    }
    pop_row(span, ins, instr_name(instr(INum(node))).c_str());
    record_io(ni, ins, outs);
    push_all(outs);
  }

  void op_class_err(const SourceSpan& span, const INum& node) {
    err(span, "TC003", instr_name(instr(INum(node))) + " is not defined for this numeric type");
  }

  void on(const SourceSpan& span, const ICvt& node, size_t ni) {
    bool fromInt = num_is_int(node.from), toInt = num_is_int(node.to);
    uint32_t fromBits = num_bits(node.from), toBits = num_bits(node.to);
    bool ok = false;
    switch (node.op) {
      case CvtOp::Wrap: ok = fromInt && toInt && fromBits == 64 && toBits == 32; break;
      case CvtOp::Extend: ok = fromInt && toInt && fromBits == 32 && toBits == 64; break;
      case CvtOp::TruncSat: ok = !fromInt && toInt; break;
      case CvtOp::Convert: ok = fromInt && !toInt; break;
      case CvtOp::Demote: ok = !fromInt && !toInt && fromBits == 64 && toBits == 32; break;
      case CvtOp::Promote: ok = !fromInt && !toInt && fromBits == 32 && toBits == 64; break;
      case CvtOp::Reinterpret: ok = fromBits == toBits; break;
    }
    if (!ok) {
      err(span, "TC003", "conversion is not defined between these numeric types");
      return;
    }
    std::vector<Type> ins = {ty_unr(pt_num(node.from))};
    std::vector<Type> outs = {ty_unr(pt_num(node.to))};
    pop_row(span, ins, "conversion");
    record_io(ni, ins, outs);
    push_all(outs);
  }

  void on(const SourceSpan&, const IUnreachable&, size_t) { make_poly(); }
  void on(const SourceSpan&, const INop&, size_t) {}

  void on(const SourceSpan& span, const IDrop&, size_t ni) {
    auto t = pop(span, "drop");
    if (t && !droppable(*t))
      err(span, "LIN002", "drop discards a linear " + show_type(*t));
    if (t) record_io(ni, {*t}, {});
  }

  void on(const SourceSpan& span, const ISelect&, size_t ni) {
    auto c = pop(span, "select");
    expect_int32(span, c, "select condition");
    auto b = pop(span, "select");
    auto a = pop(span, "select");
    if (a && b && !(*a == *b)) {
      err(span, "TC002", "select operands differ: " + show_type(*a) + " vs " + show_type(*b));
    }
    if (a && !droppable(*a))
      err(span, "LIN002", "select discards one of two linear operands");
    if (a) {
      record_io(ni, {*a, b ? *b : *a, ty_i32()}, {*a});
      push(std::move(*a));
    }
  }

  void expect_int32(const SourceSpan& span, const std::optional<Type>& got, const char* who) {
    if (!got) return;
    const NumT* n = as_num(*got);
    bool ok32 = n && (n->nt == NumType::I32 || n->nt == NumType::UI32) &&
                leq(got->qual, Qual::unr());
    if (!ok32)
      err(span, "TC002", std::string(who) + " must be a 32-bit integer, got " + show_type(*got));
  }

  // --- control -------------------------------------------------------------------

  void on(const SourceSpan& span, const IBlock& node, size_t ni) {
    if (!tysv(span, node.arrow.ins) || !tysv(span, node.arrow.outs)) return;
    auto after = apply_effect(span, node.effect);
    if (!after) return;
    pop_row(span, node.arrow.ins, "block");
    record_io(ni, node.arrow.ins, node.arrow.outs);
    open_block(node.arrow.ins, node.arrow.outs, *after);
    run_seq(node.body);
    close_block(span, node.arrow.outs, "block body");
    locals = *after;
    normalize_ledger();
    push_all(node.arrow.outs);
  }

  void on(const SourceSpan& span, const ILoop& node, size_t ni) {
    if (!tysv(span, node.arrow.ins) || !tysv(span, node.arrow.outs)) return;
    pop_row(span, node.arrow.ins, "loop");
    record_io(ni, node.arrow.ins, node.arrow.outs);
    // Branching to a loop restarts it: payload is the loop's inputs and the
    // locals must look exactly as they did on entry.
    open_block(node.arrow.ins, node.arrow.ins, locals);
    run_seq(node.body);
    close_block(span, node.arrow.outs, "loop body");
    normalize_ledger();
    push_all(node.arrow.outs);
  }

  void on(const SourceSpan& span, const IIte& node, size_t ni) {
    if (!tysv(span, node.arrow.ins) || !tysv(span, node.arrow.outs)) return;
    auto c = pop(span, "if");
    expect_int32(span, c, "if condition");
    auto after = apply_effect(span, node.effect);
    if (!after) return;
    pop_row(span, node.arrow.ins, "if");
    record_io(ni, node.arrow.ins, node.arrow.outs);
    LocalEnv entry = locals;
    LinearLedger entryLedger = ledger;
    open_block(node.arrow.ins, node.arrow.outs, *after);
    run_seq(node.thn);
    close_block(span, node.arrow.outs, "then branch");
    LinearLedger thnLedger = ledger;
    locals = entry;
    ledger = entryLedger;
    open_block(node.arrow.ins, node.arrow.outs, *after);
    run_seq(node.els);
    close_block(span, node.arrow.outs, "else branch");
    ledger.consumed.insert(thnLedger.consumed.begin(), thnLedger.consumed.end());
    locals = *after;
    normalize_ledger();
    push_all(node.arrow.outs);
  }

  void on(const SourceSpan& span, const IBr& node, size_t ni) {
    LabelEntry* lbl = label_at(span, node.depth, "br");
    if (!lbl) return;
    std::vector<Type> payload = lbl->results;
    pop_row(span, payload, "br", nullptr);
    record_io(ni, payload, {});
    buried_droppable(span, node.depth, "br");
    branch_locals(span, *lbl, "br");
    make_poly();
  }

  void on(const SourceSpan& span, const IBrIf& node, size_t ni) {
    LabelEntry* lbl = label_at(span, node.depth, "br_if");
    if (!lbl) return;
    auto c = pop(span, "br_if");
    expect_int32(span, c, "br_if condition");
    std::vector<Type> payload = lbl->results;
    pop_row(span, payload, "br_if", nullptr);
    record_io(ni, payload, payload);
    buried_droppable(span, node.depth, "br_if");
    branch_locals(span, *lbl, "br_if");
    push_all(payload);  // fallthrough keeps the payload
  }

  void on(const SourceSpan& span, const IBrTable& node, size_t ni) {
    auto c = pop(span, "br_table");
    expect_int32(span, c, "br_table selector");
    std::vector<uint32_t> all = node.targets;
    all.push_back(node.dflt);
    uint32_t maxDepth = 0;
    LabelEntry* first = nullptr;
    for (uint32_t d : all) {
      LabelEntry* lbl = label_at(span, d, "br_table");
      if (!lbl) return;
      maxDepth = std::max(maxDepth, d);
      if (!first) {
        first = lbl;
      } else if (!(lbl->results == first->results)) {
        err(span, "TC002", "br_table targets expect different payload types");
        return;
      }
    }
    std::vector<Type> payload = first->results;
    pop_row(span, payload, "br_table", nullptr);
    record_io(ni, payload, {});
    buried_droppable(span, maxDepth, "br_table");
    for (uint32_t d : all) {
      LabelEntry* lbl = label_at(span, d, "br_table");
      branch_locals(span, *lbl, "br_table");
    }
    make_poly();
  }

  void on(const SourceSpan& span, const IReturn&, size_t ni) {
    if (!fenv.ret) {
      err(span, "TC011", "return outside a function body");
      return;
    }
    std::vector<Type> payload = *fenv.ret;
    pop_row(span, payload, "return", nullptr);
    record_io(ni, payload, {});
    buried_droppable(span, frames.empty() ? 0 : uint32_t(frames.size() - 1), "return");
    locals_droppable(span, "return");
    make_poly();
  }

  // --- locals and globals ----------------------------------------------------------

  void on(const SourceSpan& span, const IGetLocal& node, size_t ni) {
    LocalSlot* s = slot(span, node.idx, "get_local");
    if (!s) return;
    if (!qualv(span, node.qual)) return;
    if (ledger.consumed.count(node.idx) && !leq(node.qual, Qual::unr())) {
      err(span, "LIN001", "duplicate use of a linear value: local " + std::to_string(node.idx) +
                              " was already moved out");
      return;
    }
    if (!(node.qual == s->type.qual)) {
      err(span, "TC002", "get_local is annotated " + show_qual(node.qual) + " but slot " +
                             std::to_string(node.idx) + " holds " + show_type(s->type));
      return;
    }
    if (InstrNote* n = note_at(ni)) n->local = *s;
    record_io(ni, {}, {s->type});
    push(s->type);
    if (!leq(node.qual, Qual::unr())) {
      // The linear value moves to the stack; the slot keeps a unit residue.
      s->type = unit_unr();
      ledger.available.erase(node.idx);
      ledger.consumed.insert(node.idx);
    }
  }

  void on(const SourceSpan& span, const ISetLocal& node, size_t ni) {
    auto t = pop(span, "set_local");
    LocalSlot* s = slot(span, node.idx, "set_local");
    if (!s || !t) return;
    write_slot(span, node.idx, *s, *t, "set_local");
    if (InstrNote* n = note_at(ni)) n->local = *s;
    record_io(ni, {*t}, {});
  }

  void on(const SourceSpan& span, const ITeeLocal& node, size_t ni) {
    auto t = pop(span, "tee_local");
    LocalSlot* s = slot(span, node.idx, "tee_local");
    if (!s || !t) return;
    if (!write_slot(span, node.idx, *s, *t, "tee_local")) return;
    if (!leq(t->qual, Qual::unr())) {
      s->type = unit_unr();
      ledger.available.erase(node.idx);
      ledger.consumed.insert(node.idx);
    }
    if (InstrNote* n = note_at(ni)) n->local = *s;
    record_io(ni, {*t}, {*t});
    push(std::move(*t));
  }

  bool write_slot(const SourceSpan& span, uint32_t idx, LocalSlot& s, const Type& t,
                  const char* who) {
    if (!droppable(s.type)) {
      err(span, "LIN002", std::string(who) + " overwrites slot " + std::to_string(idx) +
                              ", discarding a linear " + show_type(s.type));
      return false;
    }
    if (!tyv(span, t)) return false;
    auto sz = sized(span, t, who);
    if (!sz) return false;
    if (!size_leq(fenv.binders, *sz, s.size)) {
      err(span, "TC006", std::string(who) + ": " + show_type(t) + " does not fit in slot " +
                             std::to_string(idx));
      return false;
    }
    s.type = t;
    ledger.consumed.erase(idx);
    if (droppable(t))
      ledger.available.erase(idx);
    else
      ledger.available.insert(idx);
    return true;
  }

  void on(const SourceSpan& span, const IGetGlobal& node, size_t ni) {
    if (node.idx >= menv->globals.size() || node.idx >= globalLimit) {
      err(span, "TC004", "get_global names global " + std::to_string(node.idx) +
                             (node.idx < menv->globals.size()
                                  ? ", which is not yet initialized here"
                                  : ", which does not exist"));
      return;
    }
    Type t = ty_unr(menv->globals[node.idx].pre);
    record_io(ni, {}, {t});
    push(std::move(t));
  }

  void on(const SourceSpan& span, const ISetGlobal& node, size_t ni) {
    if (inInitializer) {
      err(span, "TC011", "global initializers cannot write globals");
      return;
    }
    if (node.idx >= menv->globals.size()) {
      err(span, "TC004", "set_global names global " + std::to_string(node.idx) +
                             ", which does not exist");
      return;
    }
    const GlobalType& g = menv->globals[node.idx];
    if (!g.mut) {
      err(span, "TC011", "assignment to an immutable global");
      return;
    }
    Type want = ty_unr(g.pre);
    auto t = pop(span, "set_global");
    expect(span, t, want, "set_global");
    record_io(ni, {want}, {});
  }

  // --- qualifiers, tuples, recursion, packages ---------------------------------------

  void on(const SourceSpan& span, const IQualify& node, size_t ni) {
    if (!qualv(span, node.qual)) return;
    auto t = pop(span, "qualify");
    if (!t) return;
    if (!leq(t->qual, node.qual)) {
      err(span, "TC005", "qualify can only raise a qualifier: " + show_qual(t->qual) +
                             " does not precede " + show_qual(node.qual));
      return;
    }
    // A reference that becomes linear would unlock strong updates and frees
    // on memory it shares with the collector; references must be born at
    // their final linearity.
    if (as_ref(*t) && !leq(node.qual, Qual::unr()) && !leq(Qual::lin(), t->qual)) {
      err(span, "TC005", "qualify cannot raise a reference across the linear boundary");
      return;
    }
    Type out = ty(t->pre, node.qual);
    record_io(ni, {*t}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IGroup& node, size_t ni) {
    if (!qualv(span, node.qual)) return;
    std::vector<Type> comps(node.n);
    bool ok = true;
    for (size_t i = node.n; i-- > 0;) {
      auto t = pop(span, "group");
      if (!t) return;
      if (!leq(t->qual, node.qual)) {
        err(span, "TC005", "tuple component qualifier " + show_qual(t->qual) +
                               " exceeds the tuple qualifier " + show_qual(node.qual));
        ok = false;
      }
      comps[i] = std::move(*t);
    }
    if (!ok) return;
    Type out = ty(pt_prod(comps), node.qual);
    record_io(ni, comps, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IUngroup&, size_t ni) {
    auto t = pop(span, "ungroup");
    if (!t) return;
    const ProdT* p = as_prod(*t);
    if (!p) {
      err(span, "TC002", "ungroup expects a tuple, got " + show_type(*t));
      return;
    }
    record_io(ni, {*t}, p->components);
    push_all(p->components);
  }

  void on(const SourceSpan& span, const IRecFold& node, size_t ni) {
    const RecT* rt = node.rec ? std::get_if<RecT>(&node.rec->v) : nullptr;
    if (!rt) {
      err(span, "TC003", "rec.fold annotation must be a recursive type");
      return;
    }
    Type folded = ty(node.rec, rt->qualBound);
    if (!tyv(span, folded)) return;
    Type unrolled = subst_free0(rt->body, Index{node.rec});
    auto t = pop(span, "rec.fold");
    expect(span, t, unrolled, "rec.fold");
    record_io(ni, {unrolled}, {folded});
    push(std::move(folded));
  }

  void on(const SourceSpan& span, const IRecUnfold&, size_t ni) {
    auto t = pop(span, "rec.unfold");
    if (!t) return;
    const RecT* rt = as_rec(*t);
    if (!rt) {
      err(span, "TC002", "rec.unfold expects a recursive type, got " + show_type(*t));
      return;
    }
    if (!(t->qual == rt->qualBound)) {
      err(span, "TC005", "rec.unfold requires the package qualifier to equal the bound");
      return;
    }
    Type out = subst_free0(rt->body, Index{t->pre});
    record_io(ni, {*t}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IMempack& node, size_t ni) {
    if (!locv(span, node.loc)) return;
    auto t = pop(span, "mempack");
    if (!t) return;
    Type out = ty(pt_exloc(abstract_loc(*t, node.loc)), t->qual);
    record_io(ni, {*t}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IMemunpack& node, size_t ni) {
    if (!tysv(span, node.arrow.ins) || !tysv(span, node.arrow.outs)) return;
    auto pkg = pop(span, "memunpack");
    if (!pkg) return;
    const ExLocT* ex = as_exloc(*pkg);
    if (!ex) {
      err(span, "TC002", "memunpack expects a location package, got " + show_type(*pkg));
      return;
    }
    auto after = apply_effect(span, node.effect);
    if (!after) return;
    pop_row(span, node.arrow.ins, "memunpack");
    record_io(ni, node.arrow.ins, node.arrow.outs);
    binder_scope(VarKind::Loc, {}, node.arrow, *after, ex->body, node.body, span, "memunpack");
    locals = *after;
    normalize_ledger();
    push_all(node.arrow.outs);
  }

  // Runs `body` under one fresh binder (location or pretype). The whole
  // environment shifts up so the bound variable is index 0 inside; exit
  // checks compare against the shifted annotations, which guarantees the
  // variable cannot escape. `payload` is already expressed under the binder.
  void binder_scope(VarKind kind, std::optional<TypeQ> typeBound, const ArrowType& arrow,
                    const LocalEnv& after, const Type& payload, const InstrSeq& body,
                    const SourceSpan& span, const char* what) {
    FunctionEnv savedFenv = fenv;
    LocalEnv savedLocals = locals;
    std::vector<Frame> savedFrames = frames;

    auto sh = [&](const Type& t) { return shift(t, kind, 1); };
    for (LocalSlot& s : locals) s.type = sh(s.type);
    for (LabelEntry& l : fenv.labels) {
      for (Type& t : l.results) t = sh(t);
      if (l.locals)
        for (LocalSlot& s : *l.locals) s.type = sh(s.type);
    }
    if (fenv.ret)
      for (Type& t : *fenv.ret) t = sh(t);
    for (Frame& f : frames)
      for (Type& t : f.stack) t = sh(t);

    if (kind == VarKind::Loc)
      fenv.binders.push_loc();
    else
      fenv.binders.push_type(typeBound->qualLower, typeBound->sizeUpper, typeBound->mayHaveCaps);

    std::vector<Type> seed;
    for (const Type& t : arrow.ins) seed.push_back(sh(t));
    seed.push_back(payload);
    std::vector<Type> outs;
    for (const Type& t : arrow.outs) outs.push_back(sh(t));
    LocalEnv exitLocals = after;
    for (LocalSlot& s : exitLocals) s.type = sh(s.type);

    open_block(std::move(seed), outs, exitLocals);
    run_seq(body);
    close_block(span, outs, what);

    fenv = std::move(savedFenv);
    locals = std::move(savedLocals);
    frames = std::move(savedFrames);
  }

  // --- code references and calls ---------------------------------------------------

  void on(const SourceSpan& span, const ICodeRef& node, size_t ni) {
    if (node.tableIdx >= menv->table.size()) {
      err(span, "TC004", "coderef names table entry " + std::to_string(node.tableIdx) +
                             ", which does not exist");
      return;
    }
    FunType ft = menv->table[node.tableIdx];
    if (InstrNote* n = note_at(ni)) n->fun = ft;
    Type out = ty_unr(pt_coderef(std::move(ft)));
    record_io(ni, {}, {out});
    push(std::move(out));
  }

  bool check_index(const SourceSpan& span, const Index& ix, const Quantifier& qt) {
    if (std::holds_alternative<LocQ>(qt)) {
      const auto* l = std::get_if<Loc>(&ix.v);
      if (!l) return index_kind_err(span);
      return locv(span, *l);
    }
    if (const auto* sq = std::get_if<SizeQ>(&qt)) {
      const auto* s = std::get_if<Size>(&ix.v);
      if (!s) return index_kind_err(span);
      if (!sizev(span, *s)) return false;
      for (const Size& lo : sq->lowers)
        if (!size_leq(fenv.binders, lo, *s)) return index_bound_err(span);
      for (const Size& up : sq->uppers)
        if (!size_leq(fenv.binders, *s, up)) return index_bound_err(span);
      return true;
    }
    if (const auto* qq = std::get_if<QualQ>(&qt)) {
      const auto* q = std::get_if<Qual>(&ix.v);
      if (!q) return index_kind_err(span);
      if (!qualv(span, *q)) return false;
      for (const Qual& lo : qq->lowers)
        if (!leq(lo, *q)) return index_bound_err(span);
      for (const Qual& up : qq->uppers)
        if (!leq(*q, up)) return index_bound_err(span);
      return true;
    }
    const auto& tq = std::get<TypeQ>(qt);
    const auto* p = std::get_if<PreType>(&ix.v);
    if (!p) return index_kind_err(span);
    Type atBound = ty(*p, tq.qualLower);
    if (!tyv(span, atBound)) return false;
    auto sz = sized(span, atBound, "instantiation");
    if (!sz) return false;
    if (!size_leq(fenv.binders, *sz, tq.sizeUpper)) return index_bound_err(span);
    if (!tq.mayHaveCaps && !no_caps(fenv.binders, atBound)) {
      err(span, "TC010", "instantiation type may carry capabilities where none are allowed");
      return false;
    }
    return true;
  }
  bool index_kind_err(const SourceSpan& span) {
    err(span, "TC003", "instantiation index kind does not match the quantifier");
    return false;
  }
  bool index_bound_err(const SourceSpan& span) {
    err(span, "TC006", "instantiation index violates the quantifier's declared bounds");
    return false;
  }

  std::optional<FunType> instantiate(const SourceSpan& span, FunType ft,
                                     const std::vector<Index>& ixs, const char* who) {
    for (const Index& ix : ixs) {
      if (ft.quants.empty()) {
        err(span, "TC004", std::string(who) + " supplies more indices than the signature has");
        return std::nullopt;
      }
      if (!check_index(span, ix, ft.quants.front())) return std::nullopt;
      ft = instantiate_prefix(ft, {ix});
    }
    return ft;
  }

  void on(const SourceSpan& span, const IInst& node, size_t ni) {
    auto t = pop(span, "inst");
    if (!t) return;
    const CodeRefT* cr = as_coderef(*t);
    if (!cr) {
      err(span, "TC002", "inst expects a code reference, got " + show_type(*t));
      return;
    }
    auto ft = instantiate(span, cr->fn, node.indices, "inst");
    if (!ft) return;
    if (InstrNote* n = note_at(ni)) n->fun = *ft;
    Type out = ty(pt_coderef(std::move(*ft)), t->qual);
    record_io(ni, {*t}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const ICallIndirect&, size_t ni) {
    auto t = pop(span, "call_indirect");
    if (!t) return;
    const CodeRefT* cr = as_coderef(*t);
    if (!cr) {
      err(span, "TC002", "call_indirect expects a code reference, got " + show_type(*t));
      return;
    }
    if (!cr->fn.quants.empty()) {
      err(span, "TC011", "call_indirect requires a fully instantiated code reference");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->fun = cr->fn;
    pop_row(span, cr->fn.ins, "call_indirect");
    record_io(ni, cr->fn.ins, cr->fn.outs);
    push_all(cr->fn.outs);
  }

  void on(const SourceSpan& span, const ICall& node, size_t ni) {
    if (node.fn >= menv->funcs.size()) {
      err(span, "TC004", "call names function " + std::to_string(node.fn) +
                             ", which does not exist");
      return;
    }
    auto ft = instantiate(span, menv->funcs[node.fn], node.indices, "call");
    if (!ft) return;
    if (!ft->quants.empty()) {
      err(span, "TC011", "call must instantiate every quantifier of the callee");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->fun = *ft;
    pop_row(span, ft->ins, "call");
    record_io(ni, ft->ins, ft->outs);
    push_all(ft->outs);
  }

  // --- capability plumbing -----------------------------------------------------------

  void on(const SourceSpan& span, const ICapSplit&, size_t ni) {
    auto t = pop(span, "cap.split");
    if (!t) return;
    const CapT* c = as_cap(*t);
    if (!c) {
      err(span, "TC002", "cap.split expects a capability, got " + show_type(*t));
      return;
    }
    if (c->priv != Privilege::RW) {
      err(span, "TC007", "cap.split requires a read-write capability");
      return;
    }
    if (!leq(Qual::lin(), t->qual)) {
      err(span, "TC005", "cap.split requires a linear capability");
      return;
    }
    Type capR = ty(pt_cap(Privilege::R, c->loc, c->heap), t->qual);
    Type own = ty_lin(pt_own(c->loc));
    record_io(ni, {*t}, {capR, own});
    push(std::move(capR));
    push(std::move(own));
  }

  void on(const SourceSpan& span, const ICapJoin&, size_t ni) {
    auto o = pop(span, "cap.join");
    auto t = pop(span, "cap.join");
    if (!o || !t) return;
    const OwnT* ot = as_own(*o);
    const CapT* c = as_cap(*t);
    if (!ot || !c) {
      err(span, "TC002", "cap.join expects a read capability and an ownership token");
      return;
    }
    if (c->priv != Privilege::R) {
      err(span, "TC007", "cap.join expects a read-only capability");
      return;
    }
    if (!(ot->loc == c->loc)) {
      err(span, "TC008", "capability and ownership token refer to different locations");
      return;
    }
    Type out = ty(pt_cap(Privilege::RW, c->loc, c->heap), t->qual);
    record_io(ni, {*t, *o}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IRefDemote&, size_t ni) {
    auto t = pop(span, "ref.demote");
    if (!t) return;
    const RefT* r = as_ref(*t);
    if (!r) {
      err(span, "TC002", "ref.demote expects a reference, got " + show_type(*t));
      return;
    }
    if (r->priv != Privilege::RW) {
      err(span, "TC007", "ref.demote expects a read-write reference");
      return;
    }
    Type out = ty(pt_ref(Privilege::R, r->loc, r->heap), t->qual);
    record_io(ni, {*t}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IRefSplit&, size_t ni) {
    auto t = pop(span, "ref.split");
    if (!t) return;
    const RefT* r = as_ref(*t);
    if (!r) {
      err(span, "TC002", "ref.split expects a reference, got " + show_type(*t));
      return;
    }
    if (!leq(Qual::lin(), t->qual)) {
      err(span, "TC005", "ref.split requires a linear reference");
      return;
    }
    Type cap = ty(pt_cap(r->priv, r->loc, r->heap), t->qual);
    Type ptr = ty_unr(pt_ptr(r->loc));
    record_io(ni, {*t}, {cap, ptr});
    push(std::move(cap));
    push(std::move(ptr));
  }

  void on(const SourceSpan& span, const IRefJoin&, size_t ni) {
    auto p = pop(span, "ref.join");
    auto t = pop(span, "ref.join");
    if (!p || !t) return;
    const PtrT* pt = as_ptr(*p);
    const CapT* c = as_cap(*t);
    if (!pt || !c) {
      err(span, "TC002", "ref.join expects a capability and a pointer");
      return;
    }
    if (!(pt->loc == c->loc)) {
      err(span, "TC008", "pointer and capability refer to different locations");
      return;
    }
    if (!leq(Qual::lin(), t->qual)) {
      err(span, "TC005", "ref.join requires a linear capability");
      return;
    }
    Type out = ty(pt_ref(c->priv, c->loc, c->heap), t->qual);
    record_io(ni, {*t, *p}, {out});
    push(std::move(out));
  }

  // --- heap allocation and access ------------------------------------------------------

  void on(const SourceSpan& span, const IStructMalloc& node, size_t ni) {
    if (!qualv(span, node.qual)) return;
    for (const Size& s : node.sizes)
      if (!sizev(span, s)) return;
    std::vector<Type> popped(node.sizes.size());
    for (size_t i = node.sizes.size(); i-- > 0;) {
      auto t = pop(span, "struct.malloc");
      if (!t) return;
      if (!tyv(span, *t)) return;
      if (!no_caps(fenv.binders, *t)) {
        err(span, "TC010", "capability values cannot be stored on the heap");
        return;
      }
      auto sz = sized(span, *t, "struct.malloc");
      if (!sz) return;
      if (!size_leq(fenv.binders, *sz, node.sizes[i])) {
        err(span, "TC006", "field " + std::to_string(i) + " of type " + show_type(*t) +
                               " does not fit in " + show_size(node.sizes[i]) + " bits");
        return;
      }
      popped[i] = *t;
    }
    HeapType noteHt = StructHT{};
    {
      auto& sf = std::get<StructHT>(noteHt).fields;
      for (size_t i = 0; i < popped.size(); ++i) sf.push_back({popped[i], node.sizes[i]});
    }
    if (InstrNote* n = note_at(ni)) n->heap = noteHt;
    Type out = alloc_result(noteHt, node.qual);
    record_io(ni, popped, {out});
    push(std::move(out));
  }

  // Pops a reference and returns its parts; nullptr on failure or dead code.
  struct RefParts {
    Type whole;
    Privilege priv;
    Loc loc;
    HeapType heap;
  };
  std::optional<RefParts> pop_ref(const SourceSpan& span, const char* who) {
    auto t = pop(span, who);
    if (!t) return std::nullopt;
    const RefT* r = as_ref(*t);
    if (!r) {
      err(span, "TC002", std::string(who) + " expects a reference, got " + show_type(*t));
      return std::nullopt;
    }
    return RefParts{*t, r->priv, r->loc, r->heap};
  }

  const StructHT* want_struct(const SourceSpan& span, const RefParts& r, const char* who) {
    const auto* st = std::get_if<StructHT>(&r.heap);
    if (!st) err(span, "TC002", std::string(who) + " expects a struct reference");
    return st;
  }

  void on(const SourceSpan& span, const IStructFree&, size_t ni) {
    auto r = pop_ref(span, "struct.free");
    if (!r) return;
    const StructHT* st = want_struct(span, *r, "struct.free");
    if (!st) return;
    if (r->priv != Privilege::RW) {
      err(span, "TC007", "freeing requires a read-write reference");
      return;
    }
    if (!leq(Qual::lin(), r->whole.qual)) {
      err(span, "TC005", "struct.free requires a linear reference");
      return;
    }
    for (size_t i = 0; i < st->fields.size(); ++i) {
      if (!droppable(st->fields[i].ty)) {
        err(span, "LIN002", "cannot free a struct whose field " + std::to_string(i) +
                                " still holds a linear " + show_type(st->fields[i].ty));
        return;
      }
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole}, {});
  }

  void on(const SourceSpan& span, const IStructGet& node, size_t ni) {
    auto r = pop_ref(span, "struct.get");
    if (!r) return;
    const StructHT* st = want_struct(span, *r, "struct.get");
    if (!st) return;
    if (node.idx >= st->fields.size()) {
      err(span, "TC004", "struct.get field " + std::to_string(node.idx) + " of a struct with " +
                             std::to_string(st->fields.size()) + " fields");
      return;
    }
    const Type& fld = st->fields[node.idx].ty;
    if (!droppable(fld)) {
      err(span, "TC005", "cannot copy a linear field out of a struct; use struct.swap");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole}, {r->whole, fld});
    push(r->whole);
    push(fld);
  }

  void on(const SourceSpan& span, const IStructSet& node, size_t ni) {
    auto v = pop(span, "struct.set");
    auto r = pop_ref(span, "struct.set");
    if (!v || !r) return;
    const StructHT* st = want_struct(span, *r, "struct.set");
    if (!st) return;
    if (node.idx >= st->fields.size()) {
      err(span, "TC004", "struct.set field " + std::to_string(node.idx) + " of a struct with " +
                             std::to_string(st->fields.size()) + " fields");
      return;
    }
    if (r->priv != Privilege::RW) {
      err(span, "TC007", "struct.set mutates through a read-only reference");
      return;
    }
    const StructField& old = st->fields[node.idx];
    if (!droppable(old.ty)) {
      err(span, "TC005", "cannot overwrite a linear field; use struct.swap");
      return;
    }
    Type updated = store_field(span, *r, *st, node.idx, *v, "struct.set");
    if (!updated.pre) return;
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole, *v}, {updated});
    push(std::move(updated));
  }

  void on(const SourceSpan& span, const IStructSwap& node, size_t ni) {
    auto v = pop(span, "struct.swap");
    auto r = pop_ref(span, "struct.swap");
    if (!v || !r) return;
    const StructHT* st = want_struct(span, *r, "struct.swap");
    if (!st) return;
    if (node.idx >= st->fields.size()) {
      err(span, "TC004", "struct.swap field " + std::to_string(node.idx) + " of a struct with " +
                             std::to_string(st->fields.size()) + " fields");
      return;
    }
    if (r->priv != Privilege::RW) {
      err(span, "TC007", "struct.swap mutates through a read-only reference");
      return;
    }
    Type oldField = st->fields[node.idx].ty;
    Type updated = store_field(span, *r, *st, node.idx, *v, "struct.swap");
    if (!updated.pre) return;
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole, *v}, {updated, oldField});
    push(std::move(updated));
    push(std::move(oldField));
  }

  // Shared tail of set/swap: fit, cap-freedom, and the strong-update rule.
  // Returns the updated reference type, or a null type on error.
  Type store_field(const SourceSpan& span, const RefParts& r, const StructHT& st, uint32_t idx,
                   const Type& v, const char* who) {
    if (!tyv(span, v)) return {};
    if (!no_caps(fenv.binders, v)) {
      err(span, "TC010", "capability values cannot be stored on the heap");
      return {};
    }
    auto sz = sized(span, v, who);
    if (!sz) return {};
    const StructField& old = st.fields[idx];
    if (!size_leq(fenv.binders, *sz, old.size)) {
      err(span, "TC006", std::string(who) + ": " + show_type(v) + " does not fit in field " +
                             std::to_string(idx));
      return {};
    }
    if (!(v == old.ty) && !leq(Qual::lin(), r.whole.qual)) {
      err(span, "TC009", std::string(who) +
                             ": changing a field's type (strong update) requires a linear "
                             "reference");
      return {};
    }
    StructHT updated = st;
    updated.fields[idx].ty = v;
    return ty(pt_ref(r.priv, r.loc, HeapType{std::move(updated)}), r.whole.qual);
  }

  void on(const SourceSpan& span, const IVariantMalloc& node, size_t ni) {
    if (!qualv(span, node.qual)) return;
    if (node.tag >= node.cases.size()) {
      err(span, "TC004", "variant.malloc tag " + std::to_string(node.tag) + " with " +
                             std::to_string(node.cases.size()) + " cases");
      return;
    }
    HeapType ht = VariantHT{node.cases};
    if (!heaptype_valid(fenv.binders, ht, diags, span)) return;
    if (!no_caps(fenv.binders, ht)) {
      err(span, "TC010", "capability values cannot be stored on the heap");
      return;
    }
    auto t = pop(span, "variant.malloc");
    expect(span, t, node.cases[node.tag], "variant.malloc");
    if (InstrNote* n = note_at(ni)) n->heap = ht;
    Type out = alloc_result(ht, node.qual);
    record_io(ni, {node.cases[node.tag]}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IVariantCase& node, size_t ni) {
    const auto* vt = std::get_if<VariantHT>(&node.ht);
    if (!vt) {
      err(span, "TC003", "variant.case annotation must be a variant heap type");
      return;
    }
    if (!heaptype_valid(fenv.binders, node.ht, diags, span)) return;
    if (!qualv(span, node.qual)) return;
    if (!tysv(span, node.arrow.ins) || !tysv(span, node.arrow.outs)) return;
    if (node.arms.size() != vt->cases.size()) {
      err(span, "TC004", "variant.case has " + std::to_string(node.arms.size()) +
                             " arms for a variant with " + std::to_string(vt->cases.size()) +
                             " cases");
      return;
    }
    auto r = pop_ref(span, "variant.case");
    if (!r) return;
    if (!(r->heap == node.ht)) {
      err(span, "TC002", "variant.case annotation does not match the reference's cell type");
      return;
    }
    pop_row(span, node.arrow.ins, "variant.case");
    auto after = apply_effect(span, node.effect);
    if (!after) return;

    bool linMode = leq(Qual::lin(), node.qual);
    if (!linMode && !leq(node.qual, Qual::unr())) {
      err(span, "TC005", "variant.case mode qualifier must be comparable to lin or unr");
      return;
    }
    if (linMode) {
      if (!leq(Qual::lin(), r->whole.qual)) {
        err(span, "TC005", "consuming variant.case requires a linear reference");
        return;
      }
      if (r->priv != Privilege::RW) {
        err(span, "TC007", "consuming variant.case frees the cell: read-write required");
        return;
      }
    } else {
      for (const Type& c : vt->cases) {
        if (!droppable(c)) {
          err(span, "TC005", "copying variant.case requires unrestricted payloads");
          return;
        }
      }
      // The scrutinee stays alive below the arms; a branch past it must
      // treat it like any other buried value.
      push(r->whole);
      if (!leq(r->whole.qual, Qual::unr())) fenv.linear.back() = Qual::lin();
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    std::vector<Type> noteIns = node.arrow.ins;
    noteIns.insert(noteIns.begin(), r->whole);
    record_io(ni, noteIns, node.arrow.outs);

    LocalEnv entry = locals;
    LinearLedger entryLedger = ledger;
    LinearLedger joined;
    bool first = true;
    for (size_t i = 0; i < node.arms.size(); ++i) {
      locals = entry;
      ledger = entryLedger;
      std::vector<Type> seed = node.arrow.ins;
      seed.push_back(vt->cases[i]);
      open_block(std::move(seed), node.arrow.outs, *after);
      run_seq(node.arms[i]);
      close_block(span, node.arrow.outs, "variant.case arm");
      if (first) {
        joined = ledger;
        first = false;
      } else {
        joined.consumed.insert(ledger.consumed.begin(), ledger.consumed.end());
      }
    }
    ledger = joined;
    locals = *after;
    normalize_ledger();
    push_all(node.arrow.outs);
  }

  void on(const SourceSpan& span, const IArrayMalloc& node, size_t ni) {
    if (!qualv(span, node.qual)) return;
    auto count = pop(span, "array.malloc");
    expect_int32(span, count, "array.malloc length");
    auto t = pop(span, "array.malloc");
    if (!t) return;
    if (!tyv(span, *t)) return;
    if (!droppable(*t)) {
      err(span, "TC005", "array elements are replicated and must be unrestricted");
      return;
    }
    if (!no_caps(fenv.binders, *t)) {
      err(span, "TC010", "capability values cannot be stored on the heap");
      return;
    }
    HeapType ht = ArrayHT{*t};
    if (InstrNote* n = note_at(ni)) n->heap = ht;
    Type out = alloc_result(ht, node.qual);
    record_io(ni, {*t, ty_i32()}, {out});
    push(std::move(out));
  }

  const ArrayHT* want_array(const SourceSpan& span, const RefParts& r, const char* who) {
    const auto* at = std::get_if<ArrayHT>(&r.heap);
    if (!at) err(span, "TC002", std::string(who) + " expects an array reference");
    return at;
  }

  void on(const SourceSpan& span, const IArrayGet&, size_t ni) {
    auto idx = pop(span, "array.get");
    expect_int32(span, idx, "array.get index");
    auto r = pop_ref(span, "array.get");
    if (!r) return;
    const ArrayHT* at = want_array(span, *r, "array.get");
    if (!at) return;
    if (!droppable(at->elem)) {
      err(span, "TC005", "cannot copy a linear element out of an array");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole, ty_i32()}, {r->whole, at->elem});
    push(r->whole);
    push(at->elem);
  }

  void on(const SourceSpan& span, const IArraySet&, size_t ni) {
    auto v = pop(span, "array.set");
    auto idx = pop(span, "array.set");
    expect_int32(span, idx, "array.set index");
    auto r = pop_ref(span, "array.set");
    if (!r || !v) return;
    const ArrayHT* at = want_array(span, *r, "array.set");
    if (!at) return;
    if (r->priv != Privilege::RW) {
      err(span, "TC007", "array.set mutates through a read-only reference");
      return;
    }
    if (!(*v == at->elem)) {
      err(span, "TC002", "array.set element is " + show_type(*v) + " but the array holds " +
                             show_type(at->elem));
      return;
    }
    if (!droppable(at->elem)) {
      err(span, "TC005", "array elements must be unrestricted");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole, ty_i32(), *v}, {r->whole});
    push(r->whole);
  }

  void on(const SourceSpan& span, const IArrayFree&, size_t ni) {
    auto r = pop_ref(span, "array.free");
    if (!r) return;
    const ArrayHT* at = want_array(span, *r, "array.free");
    if (!at) return;
    if (r->priv != Privilege::RW) {
      err(span, "TC007", "freeing requires a read-write reference");
      return;
    }
    if (!leq(Qual::lin(), r->whole.qual)) {
      err(span, "TC005", "array.free requires a linear reference");
      return;
    }
    if (!droppable(at->elem)) {
      err(span, "LIN002", "cannot free an array whose elements are linear");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole}, {});
  }

  void on(const SourceSpan& span, const IExistsPack& node, size_t ni) {
    const auto* et = std::get_if<ExHT>(&node.ht);
    if (!et) {
      err(span, "TC003", "exists.pack annotation must be an existential heap type");
      return;
    }
    if (!heaptype_valid(fenv.binders, node.ht, diags, span)) return;
    if (!qualv(span, node.qual)) return;
    Type witnessAtBound = ty(node.witness, et->qualLower);
    if (!tyv(span, witnessAtBound)) return;
    auto sz = sized(span, witnessAtBound, "exists.pack witness");
    if (!sz) return;
    if (!size_leq(fenv.binders, *sz, et->sizeBound)) {
      err(span, "TC006", "witness size exceeds the existential's bound");
      return;
    }
    if (!no_caps(fenv.binders, witnessAtBound) || !no_caps(fenv.binders, node.ht)) {
      err(span, "TC010", "capability values cannot be stored on the heap");
      return;
    }
    Type expected = subst_free0(et->body, Index{node.witness});
    auto t = pop(span, "exists.pack");
    expect(span, t, expected, "exists.pack");
    if (InstrNote* n = note_at(ni)) n->heap = node.ht;
    Type out = alloc_result(node.ht, node.qual);
    record_io(ni, {expected}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IExistsUnpack& node, size_t ni) {
    const auto* et = std::get_if<ExHT>(&node.ht);
    if (!et) {
      err(span, "TC003", "exists.unpack annotation must be an existential heap type");
      return;
    }
    if (!heaptype_valid(fenv.binders, node.ht, diags, span)) return;
    if (!qualv(span, node.qual)) return;
    if (!tysv(span, node.arrow.ins) || !tysv(span, node.arrow.outs)) return;
    auto r = pop_ref(span, "exists.unpack");
    if (!r) return;
    if (!(r->heap == node.ht)) {
      err(span, "TC002", "exists.unpack annotation does not match the reference's cell type");
      return;
    }
    pop_row(span, node.arrow.ins, "exists.unpack");
    auto after = apply_effect(span, node.effect);
    if (!after) return;

    bool linMode = leq(Qual::lin(), node.qual);
    if (!linMode && !leq(node.qual, Qual::unr())) {
      err(span, "TC005", "exists.unpack mode qualifier must be comparable to lin or unr");
      return;
    }
    if (linMode) {
      if (!leq(Qual::lin(), r->whole.qual)) {
        err(span, "TC005", "consuming exists.unpack requires a linear reference");
        return;
      }
      if (r->priv != Privilege::RW) {
        err(span, "TC007", "consuming exists.unpack frees the cell: read-write required");
        return;
      }
    } else {
      if (!droppable(et->body)) {
        err(span, "TC005", "copying exists.unpack requires an unrestricted payload");
        return;
      }
      push(r->whole);
      if (!leq(r->whole.qual, Qual::unr())) fenv.linear.back() = Qual::lin();
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    std::vector<Type> noteIns = node.arrow.ins;
    noteIns.insert(noteIns.begin(), r->whole);
    record_io(ni, noteIns, node.arrow.outs);

    binder_scope(VarKind::Type, TypeQ{et->qualLower, et->sizeBound, false}, node.arrow, *after,
                 et->body, node.body, span, "exists.unpack body");
    locals = *after;
    normalize_ledger();
    push_all(node.arrow.outs);
  }

  // --- administrative instructions (configurations only) -------------------------------

  bool admin_ok(const SourceSpan& span) {
    if (store) return true;
    err(span, "TC011", "administrative instruction outside a running configuration");
    return false;
  }

  void on(const SourceSpan& span, const ITrap&, size_t) {
    if (!admin_ok(span)) return;
    make_poly();
  }

  void on(const SourceSpan& span, const ICallCl& node, size_t ni) {
    if (!admin_ok(span)) return;
    if (!node.code) {
      err(span, "TC011", "call_cl carries no function");
      return;
    }
    auto ft = instantiate(span, node.code->type, node.indices, "call_cl");
    if (!ft) return;
    if (!ft->quants.empty()) {
      err(span, "TC011", "call_cl must instantiate every quantifier of the callee");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->fun = *ft;
    pop_row(span, ft->ins, "call_cl");
    record_io(ni, ft->ins, ft->outs);
    push_all(ft->outs);
  }

  void on(const SourceSpan& span, const ILabel& node, size_t ni) {
    if (!admin_ok(span)) return;
    if (node.arity != node.arrow.ins.size()) {
      err(span, "TC011", "label arity disagrees with its payload types");
      return;
    }
    record_io(ni, {}, node.arrow.outs);
    // Exit locals are not recorded in reduced labels; the first exit site
    // fixes them (see the decisions notes).
    open_block({}, node.arrow.ins, std::nullopt);
    run_seq(node.body);
    Frame fr = std::move(frames.back());
    frames.pop_back();
    LabelEntry lbl = std::move(fenv.labels.back());
    fenv.labels.pop_back();
    fenv.linear.pop_back();
    if (!fr.poly) {
      match_stack(span, fr.stack, node.arrow.outs, "label body");
      if (lbl.locals)
        match_locals(span, *lbl.locals, "label body");
      else
        lbl.locals = locals;
    }
    if (!node.cont.empty()) {
      // The continuation runs when a branch fires, from the branch-time
      // locals. It executes outside this label, so no new label entry: a
      // branch inside it targets the enclosing labels.
      LocalEnv savedLocals = locals;
      LinearLedger savedLedger = ledger;
      if (lbl.locals) locals = *lbl.locals;
      normalize_ledger();
      frames.push_back({node.arrow.ins, false});
      run_seq(node.cont);
      Frame cf = std::move(frames.back());
      frames.pop_back();
      if (!cf.poly) match_stack(span, cf.stack, node.arrow.outs, "label continuation");
      locals = std::move(savedLocals);
      ledger = std::move(savedLedger);
    }
    if (lbl.locals) {
      locals = *lbl.locals;
      normalize_ledger();
    }
    push_all(node.arrow.outs);
  }

  void on(const SourceSpan& span, const ILocalFrame& node, size_t ni) {
    if (!admin_ok(span)) return;
    if (node.arity != node.results.size()) {
      err(span, "TC011", "local frame arity disagrees with its result types");
      return;
    }
    if (node.inst >= store->instances.size()) {
      err(span, "TC004", "local frame names instance " + std::to_string(node.inst) +
                             ", which does not exist");
      return;
    }
    record_io(ni, {}, node.results);

    const ModuleEnv* savedMenv = menv;
    FunctionEnv savedFenv = std::move(fenv);
    LocalEnv savedLocals = std::move(locals);
    LinearLedger savedLedger = std::move(ledger);
    std::vector<Frame> savedFrames = std::move(frames);

    menv = &store->instances[node.inst];
    fenv = FunctionEnv{};
    fenv.ret = node.results;
    fenv.linear.push_back(Qual::unr());
    locals.clear();
    ledger = LinearLedger{};
    for (const LocalSlotV& sv : node.locals) {
      ValueTyper vt{*store, *usedLin, diags, span};
      auto t = vt.infer(sv.val);
      if (!t) t = unit_unr();
      std::string serr;
      auto sz = size_of(fenv.binders, *t, &serr);
      if (sz && !size_leq(fenv.binders, *sz, Size::constant(sv.sizeBits)))
        err(span, "TC006", "local value does not fit in its recorded slot size");
      locals.push_back({*t, Size::constant(sv.sizeBits)});
    }
    normalize_ledger();
    frames = {Frame{}};
    run_seq(node.body);
    Frame fr = std::move(frames.back());
    if (!fr.poly) {
      match_stack(span, fr.stack, node.results, "local frame body");
      locals_droppable(span, "function frame ends");
    }

    menv = savedMenv;
    fenv = std::move(savedFenv);
    locals = std::move(savedLocals);
    ledger = std::move(savedLedger);
    frames = std::move(savedFrames);
    push_all(node.results);
  }

  void on(const SourceSpan& span, const IMalloc& node, size_t ni) {
    if (!admin_ok(span)) return;
    ValueTyper vt{*store, *usedLin, diags, span};
    if (!vt.check_heap(node.hv, node.ht)) return;
    if (!no_caps(fenv.binders, node.ht)) {
      err(span, "TC010", "capability values cannot be stored on the heap");
      return;
    }
    Qual q = node.mem == Mem::Lin ? Qual::lin() : Qual::unr();
    if (InstrNote* n = note_at(ni)) n->heap = node.ht;
    Type out = alloc_result(node.ht, q);
    record_io(ni, {}, {out});
    push(std::move(out));
  }

  void on(const SourceSpan& span, const IFree&, size_t ni) {
    if (!admin_ok(span)) return;
    auto r = pop_ref(span, "free");
    if (!r) return;
    if (r->priv != Privilege::RW) {
      err(span, "TC007", "freeing requires a read-write reference");
      return;
    }
    if (!leq(Qual::lin(), r->whole.qual)) {
      err(span, "TC005", "free requires a linear reference");
      return;
    }
    bool contentsDroppable = true;
    if (const auto* st = std::get_if<StructHT>(&r->heap)) {
      for (const StructField& f : st->fields) contentsDroppable &= droppable(f.ty);
    } else if (const auto* at = std::get_if<ArrayHT>(&r->heap)) {
      contentsDroppable = droppable(at->elem);
    } else if (const auto* vt = std::get_if<VariantHT>(&r->heap)) {
      for (const Type& c : vt->cases) contentsDroppable &= droppable(c);
    } else if (const auto* et = std::get_if<ExHT>(&r->heap)) {
      contentsDroppable = droppable(et->body);
    }
    if (!contentsDroppable) {
      err(span, "LIN002", "cannot free a cell whose contents are linear");
      return;
    }
    if (InstrNote* n = note_at(ni)) n->heap = r->heap;
    record_io(ni, {r->whole}, {});
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Module checking

ModuleEnv module_env(const RWModule& m) {
  ModuleEnv e;
  for (const FuncDef& f : m.funcs) e.funcs.push_back(f.type);
  for (const GlobalDef& g : m.globals) e.globals.push_back({g.mut, g.pre});
  for (uint32_t idx : m.table.entries)
    if (idx < m.funcs.size()) e.table.push_back(m.funcs[idx].type);
  return e;
}

namespace {

void check_function(const ModuleEnv& menv, const FuncDef& f, DiagnosticList& diags,
                    std::vector<InstrNote>* notes) {
  SourceSpan span = f.body.empty() ? SourceSpan{} : f.body.front().span;
  Checker ck(diags);
  ck.menv = &menv;
  ck.notes = notes;
  for (const Quantifier& q : f.type.quants) ck.fenv.binders.push_quantifier(q);
  ck.fenv.ret = f.type.outs;

  for (const Type& argT : f.type.ins) {
    std::string serr;
    auto sz = size_of(ck.fenv.binders, argT, &serr);
    if (!sz) {
      ck.err(span, "TC006", "argument type has no size: " + serr);
      return;
    }
    ck.locals.push_back({argT, *sz});
  }
  for (const Size& s : f.localSizes) {
    if (!size_known_valid(ck.fenv.binders, s)) {
      ck.err(span, "TC003", "local slot size uses a size variable that is not in scope");
      return;
    }
    ck.locals.push_back({ty_unit(), s});
  }
  ck.normalize_ledger();
  ck.frames = {Frame{}};

  ck.run_seq(f.body);

  Frame fr = std::move(ck.frames.back());
  if (!fr.poly) {
    ck.match_stack(span, fr.stack, f.type.outs, "function body");
    ck.locals_droppable(span, "function ends");
  }
}

void check_initializer(const ModuleEnv& menv, const GlobalDef& g, uint32_t index,
                       DiagnosticList& diags, std::vector<InstrNote>* notes) {
  SourceSpan span = g.init.empty() ? SourceSpan{} : g.init.front().span;
  Checker ck(diags);
  ck.menv = &menv;
  ck.notes = notes;
  ck.globalLimit = index;
  ck.inInitializer = true;
  ck.frames = {Frame{}};
  ck.run_seq(g.init);
  Frame fr = std::move(ck.frames.back());
  if (!fr.poly) ck.match_stack(span, fr.stack, {ty_unr(g.pre)}, "global initializer");
}

}  // namespace

CheckedModule check_module(const RWModule& m) {
  CheckedModule out;
  DiagnosticList& diags = out.diags;
  SourceSpan span;

  for (uint32_t idx : m.table.entries) {
    if (idx >= m.funcs.size())
      diags.items.push_back({Severity::Error, "TC004",
                             "table entry names function " + std::to_string(idx) +
                                 ", which does not exist",
                             span});
  }

  std::set<std::string> exports;
  auto check_exports = [&](const std::vector<std::string>& names) {
    for (const std::string& n : names)
      if (!exports.insert(n).second)
        diags.items.push_back(
            {Severity::Error, "TC011", "duplicate export name \"" + n + "\"", span});
  };
  for (const FuncDef& f : m.funcs) check_exports(f.exports);
  for (const GlobalDef& g : m.globals) check_exports(g.exports);
  check_exports(m.table.exports);

  ModuleEnv menv = module_env(m);
  if (!diags.ok()) return out;

  const BindEnv empty;
  for (size_t i = 0; i < m.funcs.size(); ++i) {
    const FuncDef& f = m.funcs[i];
    out.funcNotes.emplace_back();
    if (!funtype_valid(empty, f.type, diags, span)) continue;
    if (f.importName) {
      if (!f.body.empty() || !f.localSizes.empty())
        diags.items.push_back({Severity::Error, "TC011",
                               "imported function \"" + *f.importName + "\" cannot have a body",
                               span});
      continue;
    }
    check_function(menv, f, diags, &out.funcNotes.back());
  }

  for (size_t i = 0; i < m.globals.size(); ++i) {
    const GlobalDef& g = m.globals[i];
    out.globalNotes.emplace_back();
    if (!type_valid(empty, ty_unr(g.pre), diags, span)) continue;
    if (g.importName) {
      if (!g.init.empty())
        diags.items.push_back({Severity::Error, "TC011",
                               "imported global \"" + *g.importName +
                                   "\" cannot have an initializer",
                               span});
      continue;
    }
    check_initializer(menv, g, uint32_t(i), diags, &out.globalNotes.back());
  }

  return out;
}

// ---------------------------------------------------------------------------
// Configuration checking

DiagnosticList check_config(const StoreTyping& store, const InstrSeq& program,
                            const std::vector<Type>& results) {
  DiagnosticList diags;
  std::set<uint64_t> used;
  SourceSpan span;

  // Heap pass: every cell types at its recorded cell type. Linear locations
  // referenced from unrestricted cells become collector-owned and must be
  // capability-free.
  for (const auto& [addr, cell] : store.unr) {
    std::set<uint64_t> before = used;
    ValueTyper vt{store, used, diags, span};
    vt.check_heap(cell.hv, cell.ht);
    for (uint64_t a : used) {
      if (before.count(a)) continue;
      auto it = store.lin.find(a);
      if (it != store.lin.end() && heap_value_has_caps(it->second.hv))
        diags.items.push_back({Severity::Error, "TC010",
                               "collector-owned linear cell " + std::to_string(a) +
                                   " holds a capability",
                               span});
    }
  }
  for (const auto& [addr, cell] : store.lin) {
    (void)addr;
    ValueTyper vt{store, used, diags, span};
    vt.check_heap(cell.hv, cell.ht);
  }

  // Program pass.
  Checker ck(diags);
  static const ModuleEnv emptyEnv;
  ck.menv = store.instances.empty() ? &emptyEnv : &store.instances.front();
  ck.store = &store;
  ck.usedLin = &used;
  ck.frames = {Frame{}};
  ck.run_seq(program);
  Frame fr = std::move(ck.frames.back());
  if (!fr.poly) {
    ck.match_stack(span, fr.stack, results, "program");
    // A trapped or finished configuration owns no linear cells twice, and
    // none may be left unowned.
    for (const auto& [addr, cell] : store.lin) {
      (void)cell;
      if (!used.count(addr))
        diags.items.push_back({Severity::Error, "LIN002",
                               "linear location " + std::to_string(addr) +
                                   " is owned by nothing in the configuration",
                               span});
    }
  }
  return diags;
}

// ---------------------------------------------------------------------------
// Value typing entry points

bool check_value(const StoreTyping& store, std::set<uint64_t>& usedLin, const Value& v,
                 const Type& expect, DiagnosticList& diags, const SourceSpan& span) {
  ValueTyper vt{store, usedLin, diags, span};
  return vt.check(v, expect);
}

std::optional<Type> infer_value(const StoreTyping& store, std::set<uint64_t>& usedLin,
                                const Value& v, DiagnosticList& diags, const SourceSpan& span) {
  ValueTyper vt{store, usedLin, diags, span};
  return vt.infer(v);
}

bool check_heap_value(const StoreTyping& store, std::set<uint64_t>& usedLin, const HeapValue& hv,
                      const HeapType& ht, DiagnosticList& diags, const SourceSpan& span) {
  ValueTyper vt{store, usedLin, diags, span};
  return vt.check_heap(hv, ht);
}

}  // namespace rw

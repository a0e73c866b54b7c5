#include "rw/subst.hpp"

#include <stdexcept>

namespace rw {

namespace {

struct Cut {
  uint32_t loc = 0, size = 0, qual = 0, type = 0;
};

// Structural rewrite with per-kind cutoff tracking. Leaf hooks see the
// current cutoffs; everything else recurses, bumping cutoffs at binders.
class Rewriter {
 public:
  virtual ~Rewriter() = default;

  Qual rwQual(const Qual& q) { return onQual(q, cut); }
  Loc rwLoc(const Loc& l) { return onLoc(l, cut); }

  Size rwSize(const Size& s) {
    switch (s.kind) {
      case Size::Kind::Const: return s;
      case Size::Kind::Var: return onSizeVar(s.index, cut);
      case Size::Kind::Plus: return Size::plus(rwSize(*s.lhs), rwSize(*s.rhs));
    }
    return s;
  }

  Type rwType(const Type& t) { return {rwPre(t.pre), rwQual(t.qual)}; }

  PreType rwPre(const PreType& p) {
    if (!p) return p;
    const auto& v = p->v;
    if (std::holds_alternative<UnitT>(v) || std::holds_alternative<NumT>(v)) return p;
    if (auto* tv = std::get_if<VarT>(&v)) return onTypeVar(tv->index, cut);
    if (auto* pr = std::get_if<ProdT>(&v)) {
      std::vector<Type> cs;
      cs.reserve(pr->components.size());
      for (auto& c : pr->components) cs.push_back(rwType(c));
      return pt_prod(std::move(cs));
    }
    if (auto* r = std::get_if<RefT>(&v)) return pt_ref(r->priv, rwLoc(r->loc), rwHeap(r->heap));
    if (auto* pt = std::get_if<PtrT>(&v)) return pt_ptr(rwLoc(pt->loc));
    if (auto* c = std::get_if<CapT>(&v)) return pt_cap(c->priv, rwLoc(c->loc), rwHeap(c->heap));
    if (auto* o = std::get_if<OwnT>(&v)) return pt_own(rwLoc(o->loc));
    if (auto* rc = std::get_if<RecT>(&v)) {
      Qual q = rwQual(rc->qualBound);
      ++cut.type;
      Type body = rwType(rc->body);
      --cut.type;
      return pt_rec(q, std::move(body));
    }
    if (auto* ex = std::get_if<ExLocT>(&v)) {
      ++cut.loc;
      Type body = rwType(ex->body);
      --cut.loc;
      return pt_exloc(std::move(body));
    }
    return pt_coderef(rwFun(std::get<CodeRefT>(v).fn));
  }

  HeapType rwHeap(const HeapType& h) {
    if (auto* vt = std::get_if<VariantHT>(&h)) {
      VariantHT out;
      for (auto& c : vt->cases) out.cases.push_back(rwType(c));
      return out;
    }
    if (auto* st = std::get_if<StructHT>(&h)) {
      StructHT out;
      for (auto& f : st->fields) out.fields.push_back({rwType(f.ty), rwSize(f.size)});
      return out;
    }
    if (auto* at = std::get_if<ArrayHT>(&h)) return ArrayHT{rwType(at->elem)};
    const auto& ex = std::get<ExHT>(h);
    ExHT out;
    out.qualLower = rwQual(ex.qualLower);
    out.sizeBound = rwSize(ex.sizeBound);
    ++cut.type;
    out.body = rwType(ex.body);
    --cut.type;
    return out;
  }

  FunType rwFun(const FunType& f) {
    Cut saved = cut;
    FunType out;
    for (auto& q : f.quants) {
      if (std::holds_alternative<LocQ>(q)) {
        out.quants.push_back(LocQ{});
        ++cut.loc;
      } else if (auto* sq = std::get_if<SizeQ>(&q)) {
        SizeQ nq;
        for (auto& s : sq->lowers) nq.lowers.push_back(rwSize(s));
        for (auto& s : sq->uppers) nq.uppers.push_back(rwSize(s));
        out.quants.push_back(std::move(nq));
        ++cut.size;
      } else if (auto* qq = std::get_if<QualQ>(&q)) {
        QualQ nq;
        for (auto& x : qq->lowers) nq.lowers.push_back(rwQual(x));
        for (auto& x : qq->uppers) nq.uppers.push_back(rwQual(x));
        out.quants.push_back(std::move(nq));
        ++cut.qual;
      } else {
        const auto& tq = std::get<TypeQ>(q);
        out.quants.push_back(TypeQ{rwQual(tq.qualLower), rwSize(tq.sizeUpper), tq.mayHaveCaps});
        ++cut.type;
      }
    }
    for (auto& t : f.ins) out.ins.push_back(rwType(t));
    for (auto& t : f.outs) out.outs.push_back(rwType(t));
    cut = saved;
    return out;
  }

  Index rwIndex(const Index& z) {
    if (auto* l = std::get_if<Loc>(&z.v)) return Index{rwLoc(*l)};
    if (auto* s = std::get_if<Size>(&z.v)) return Index{rwSize(*s)};
    if (auto* q = std::get_if<Qual>(&z.v)) return Index{rwQual(*q)};
    return Index{rwPre(std::get<PreType>(z.v))};
  }

  ArrowType rwArrow(const ArrowType& a) {
    ArrowType out;
    for (auto& t : a.ins) out.ins.push_back(rwType(t));
    for (auto& t : a.outs) out.outs.push_back(rwType(t));
    return out;
  }

  LocalEffect rwEffect(const LocalEffect& e) {
    LocalEffect out;
    for (auto& [i, t] : e.entries) out.entries.push_back({i, rwType(t)});
    return out;
  }

  Value rwValue(const Value& val) {
    Value out = val;
    if (out.qualHint) out.qualHint = rwQual(*out.qualHint);
    if (auto* g = std::get_if<GroupV>(&val.v)) {
      GroupV ng;
      for (auto& e : g->elems) ng.elems.push_back(rwValue(e));
      out.v = std::move(ng);
    } else if (auto* r = std::get_if<RefV>(&val.v)) {
      out.v = RefV{rwLoc(r->loc)};
    } else if (auto* p = std::get_if<PtrV>(&val.v)) {
      out.v = PtrV{rwLoc(p->loc)};
    } else if (auto* c = std::get_if<CapV>(&val.v)) {
      out.v = CapV{c->priv, rwLoc(c->loc), rwHeap(c->heap)};
    } else if (auto* o = std::get_if<OwnV>(&val.v)) {
      out.v = OwnV{rwLoc(o->loc)};
    } else if (auto* f = std::get_if<FoldV>(&val.v)) {
      out.v = FoldV{rwPre(f->rec), std::make_shared<Value>(rwValue(*f->inner))};
    } else if (auto* m = std::get_if<MempackV>(&val.v)) {
      out.v = MempackV{rwLoc(m->loc), std::make_shared<Value>(rwValue(*m->inner))};
    } else if (auto* cr = std::get_if<CoderefV>(&val.v)) {
      CoderefV nc{cr->inst, cr->tab, {}};
      for (auto& z : cr->indices) nc.indices.push_back(rwIndex(z));
      out.v = std::move(nc);
    }
    return out;
  }

  HeapValue rwHeapValue(const HeapValue& hv) {
    if (auto* v = std::get_if<VariantHV>(&hv))
      return VariantHV{v->tag, std::make_shared<Value>(rwValue(*v->payload))};
    if (auto* s = std::get_if<StructHV>(&hv)) {
      StructHV out;
      out.fieldSizes = s->fieldSizes;
      for (auto& f : s->fields) out.fields.push_back(rwValue(f));
      return out;
    }
    if (auto* a = std::get_if<ArrayHV>(&hv)) {
      ArrayHV out;
      for (auto& e : a->elems) out.elems.push_back(rwValue(e));
      return out;
    }
    const auto& p = std::get<PackHV>(hv);
    return PackHV{rwPre(p.witness), std::make_shared<Value>(rwValue(*p.payload)), rwHeap(p.ht)};
  }

  InstrSeq rwSeq(const InstrSeq& es) {
    InstrSeq out;
    out.reserve(es.size());
    for (auto& e : es) out.push_back(rwInstr(e));
    return out;
  }

  Instr rwInstr(const Instr& ins) {
    Instr out = ins;
    std::visit(
        [&](auto&& node) {
          using T = std::decay_t<decltype(node)>;
          if constexpr (std::is_same_v<T, IVal>) {
            out.v = IVal{rwValue(node.val)};
          } else if constexpr (std::is_same_v<T, IBlock>) {
            out.v = IBlock{rwArrow(node.arrow), rwEffect(node.effect), rwSeq(node.body)};
          } else if constexpr (std::is_same_v<T, ILoop>) {
            out.v = ILoop{rwArrow(node.arrow), rwSeq(node.body)};
          } else if constexpr (std::is_same_v<T, IIte>) {
            out.v = IIte{rwArrow(node.arrow), rwEffect(node.effect), rwSeq(node.thn),
                         rwSeq(node.els)};
          } else if constexpr (std::is_same_v<T, IGetLocal>) {
            out.v = IGetLocal{node.idx, rwQual(node.qual)};
          } else if constexpr (std::is_same_v<T, IQualify>) {
            out.v = IQualify{rwQual(node.qual)};
          } else if constexpr (std::is_same_v<T, IInst>) {
            IInst n;
            for (auto& z : node.indices) n.indices.push_back(rwIndex(z));
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, ICall>) {
            ICall n{node.fn, {}};
            for (auto& z : node.indices) n.indices.push_back(rwIndex(z));
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, IRecFold>) {
            out.v = IRecFold{rwPre(node.rec)};
          } else if constexpr (std::is_same_v<T, IMempack>) {
            out.v = IMempack{rwLoc(node.loc)};
          } else if constexpr (std::is_same_v<T, IMemunpack>) {
            IMemunpack n;
            n.arrow = rwArrow(node.arrow);
            n.effect = rwEffect(node.effect);
            ++cut.loc;
            n.body = rwSeq(node.body);
            --cut.loc;
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, IGroup>) {
            out.v = IGroup{node.n, rwQual(node.qual)};
          } else if constexpr (std::is_same_v<T, IStructMalloc>) {
            IStructMalloc n;
            for (auto& s : node.sizes) n.sizes.push_back(rwSize(s));
            n.qual = rwQual(node.qual);
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, IVariantMalloc>) {
            IVariantMalloc n;
            n.tag = node.tag;
            for (auto& t : node.cases) n.cases.push_back(rwType(t));
            n.qual = rwQual(node.qual);
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, IVariantCase>) {
            IVariantCase n;
            n.qual = rwQual(node.qual);
            n.ht = rwHeap(node.ht);
            n.arrow = rwArrow(node.arrow);
            n.effect = rwEffect(node.effect);
            for (auto& arm : node.arms) n.arms.push_back(rwSeq(arm));
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, IArrayMalloc>) {
            out.v = IArrayMalloc{rwQual(node.qual)};
          } else if constexpr (std::is_same_v<T, IExistsPack>) {
            out.v = IExistsPack{rwPre(node.witness), rwHeap(node.ht), rwQual(node.qual)};
          } else if constexpr (std::is_same_v<T, IExistsUnpack>) {
            IExistsUnpack n;
            n.qual = rwQual(node.qual);
            n.ht = rwHeap(node.ht);
            n.arrow = rwArrow(node.arrow);
            n.effect = rwEffect(node.effect);
            ++cut.type;
            n.body = rwSeq(node.body);
            --cut.type;
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, ICallCl>) {
            ICallCl n{node.inst, node.code, {}};
            for (auto& z : node.indices) n.indices.push_back(rwIndex(z));
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, ILabel>) {
            out.v = ILabel{node.arity, rwArrow(node.arrow), rwSeq(node.cont), rwSeq(node.body)};
          } else if constexpr (std::is_same_v<T, ILocalFrame>) {
            ILocalFrame n;
            n.arity = node.arity;
            n.inst = node.inst;
            for (auto& sl : node.locals) n.locals.push_back({rwValue(sl.val), sl.sizeBits});
            n.body = rwSeq(node.body);
            for (auto& t : node.results) n.results.push_back(rwType(t));
            out.v = std::move(n);
          } else if constexpr (std::is_same_v<T, IMalloc>) {
            out.v = IMalloc{node.bits, rwHeapValue(node.hv), node.mem, rwHeap(node.ht)};
          }
          // all other instruction forms carry no types, locations or indices
        },
        ins.v);
    return out;
  }

 protected:
  Cut cut;
  virtual Qual onQual(const Qual& q, const Cut&) { return q; }
  virtual Loc onLoc(const Loc& l, const Cut&) { return l; }
  virtual Size onSizeVar(uint32_t idx, const Cut&) { return Size::var(idx); }
  virtual PreType onTypeVar(uint32_t idx, const Cut&) { return pt_var(idx); }
};

class Shifter : public Rewriter {
 public:
  Shifter(VarKind k, uint32_t d) : kind_(k), d_(d) {}

 protected:
  Qual onQual(const Qual& q, const Cut& c) override {
    if (kind_ == VarKind::Qual && q.is_var() && q.index >= c.qual)
      return Qual::var(q.index + d_);
    return q;
  }
  Loc onLoc(const Loc& l, const Cut& c) override {
    if (kind_ == VarKind::Loc && l.is_var() && l.index >= c.loc) return Loc::var(l.index + d_);
    return l;
  }
  Size onSizeVar(uint32_t idx, const Cut& c) override {
    if (kind_ == VarKind::Size && idx >= c.size) return Size::var(idx + d_);
    return Size::var(idx);
  }
  PreType onTypeVar(uint32_t idx, const Cut& c) override {
    if (kind_ == VarKind::Type && idx >= c.type) return pt_var(idx + d_);
    return pt_var(idx);
  }

 private:
  VarKind kind_;
  uint32_t d_;
};

template <class T>
T shift_all_kinds(const T& x, const Cut& c) {
  T out = x;
  if (c.loc) out = shift(out, VarKind::Loc, c.loc);
  if (c.size) out = shift(out, VarKind::Size, c.size);
  if (c.qual) out = shift(out, VarKind::Qual, c.qual);
  if (c.type) out = shift(out, VarKind::Type, c.type);
  return out;
}

// Replaces the entry-scope free variable 0 of the index's kind; higher
// indices of that kind shift down across the removed binder.
class Substituter : public Rewriter {
 public:
  explicit Substituter(const Index& z) : z_(z), kind_(index_kind(z)) {}

 protected:
  Qual onQual(const Qual& q, const Cut& c) override {
    if (kind_ != VarKind::Qual || !q.is_var()) return q;
    if (q.index == c.qual) return shift_all_kinds(std::get<Qual>(z_.v), c);
    if (q.index > c.qual) return Qual::var(q.index - 1);
    return q;
  }
  Loc onLoc(const Loc& l, const Cut& c) override {
    if (kind_ != VarKind::Loc || !l.is_var()) return l;
    if (l.index == c.loc) return shift_all_kinds(std::get<Loc>(z_.v), c);
    if (l.index > c.loc) return Loc::var(l.index - 1);
    return l;
  }
  Size onSizeVar(uint32_t idx, const Cut& c) override {
    if (kind_ != VarKind::Size) return Size::var(idx);
    if (idx == c.size) return shift_all_kinds(std::get<Size>(z_.v), c);
    if (idx > c.size) return Size::var(idx - 1);
    return Size::var(idx);
  }
  PreType onTypeVar(uint32_t idx, const Cut& c) override {
    if (kind_ != VarKind::Type) return pt_var(idx);
    if (idx == c.type) return shift_all_kinds(std::get<PreType>(z_.v), c);
    if (idx > c.type) return pt_var(idx - 1);
    return pt_var(idx);
  }

 private:
  Index z_;
  VarKind kind_;
};

class Prober : public Rewriter {
 public:
  explicit Prober(VarKind k) : kind_(k) {}
  bool found = false;

 protected:
  Qual onQual(const Qual& q, const Cut& c) override {
    if (kind_ == VarKind::Qual && q.is_var() && q.index == c.qual) found = true;
    return q;
  }
  Loc onLoc(const Loc& l, const Cut& c) override {
    if (kind_ == VarKind::Loc && l.is_var() && l.index == c.loc) found = true;
    return l;
  }
  Size onSizeVar(uint32_t idx, const Cut& c) override {
    if (kind_ == VarKind::Size && idx == c.size) found = true;
    return Size::var(idx);
  }
  PreType onTypeVar(uint32_t idx, const Cut& c) override {
    if (kind_ == VarKind::Type && idx == c.type) found = true;
    return pt_var(idx);
  }

 private:
  VarKind kind_;
};

class LocAbstractor : public Rewriter {
 public:
  explicit LocAbstractor(Loc target) : target_(target) {}

 protected:
  Loc onLoc(const Loc& l, const Cut& c) override {
    // A variable target names an entry-scope binder, so an occurrence under
    // c.loc inner binders carries index target + c.loc.
    bool hit = target_.is_var() ? (l.is_var() && l.index == target_.index + c.loc)
                                : l == target_;
    if (hit) return Loc::var(c.loc);
    if (l.is_var() && l.index >= c.loc) return Loc::var(l.index + 1);
    return l;
  }

 private:
  Loc target_;
};

}  // namespace

Qual shift(const Qual& q, VarKind k, uint32_t d) { return Shifter(k, d).rwQual(q); }
Size shift(const Size& s, VarKind k, uint32_t d) { return Shifter(k, d).rwSize(s); }
Loc shift(const Loc& l, VarKind k, uint32_t d) { return Shifter(k, d).rwLoc(l); }
Type shift(const Type& t, VarKind k, uint32_t d) { return Shifter(k, d).rwType(t); }
PreType shift(const PreType& p, VarKind k, uint32_t d) { return Shifter(k, d).rwPre(p); }
HeapType shift(const HeapType& h, VarKind k, uint32_t d) { return Shifter(k, d).rwHeap(h); }
FunType shift(const FunType& f, VarKind k, uint32_t d) { return Shifter(k, d).rwFun(f); }

Size subst_free0(const Size& s, const Index& z) { return Substituter(z).rwSize(s); }
Type subst_free0(const Type& t, const Index& z) { return Substituter(z).rwType(t); }
PreType subst_free0(const PreType& p, const Index& z) { return Substituter(z).rwPre(p); }
HeapType subst_free0(const HeapType& h, const Index& z) { return Substituter(z).rwHeap(h); }
FunType subst_free0(const FunType& f, const Index& z) { return Substituter(z).rwFun(f); }
ArrowType subst_free0(const ArrowType& a, const Index& z) { return Substituter(z).rwArrow(a); }
InstrSeq subst_free0(const InstrSeq& es, const Index& z) { return Substituter(z).rwSeq(es); }
LocalEffect subst_free0(const LocalEffect& e, const Index& z) {
  return Substituter(z).rwEffect(e);
}

bool mentions_free0(const Type& t, VarKind k) {
  Prober p(k);
  p.rwType(t);
  return p.found;
}
bool mentions_free0(const std::vector<Type>& ts, VarKind k) {
  for (auto& t : ts)
    if (mentions_free0(t, k)) return true;
  return false;
}

Type abstract_loc(const Type& t, const Loc& target) { return LocAbstractor(target).rwType(t); }
PreType abstract_loc(const PreType& p, const Loc& target) {
  return LocAbstractor(target).rwPre(p);
}

FunType instantiate_prefix(const FunType& f, const std::vector<Index>& zs) {
  FunType cur = f;
  for (auto& z : zs) {
    if (cur.quants.empty()) throw std::invalid_argument("instantiate_prefix: no quantifier");
    VarKind want;
    switch (cur.quants.front().index()) {
      case 0: want = VarKind::Loc; break;
      case 1: want = VarKind::Size; break;
      case 2: want = VarKind::Qual; break;
      default: want = VarKind::Type; break;
    }
    if (index_kind(z) != want)
      throw std::invalid_argument("instantiate_prefix: index kind mismatch");
    cur.quants.erase(cur.quants.begin());
    cur = subst_free0(cur, z);
  }
  return cur;
}

}  // namespace rw

#include "rw/validity.hpp"

namespace rw {

namespace {

struct Validator {
  DiagnosticList& diags;
  SourceSpan span;
  BindEnv env;
  // One flag per locally-entered type binder (innermost last): true while a
  // recursion variable has not yet passed behind an indirection.
  std::vector<bool> unguarded;
  bool ok = true;

  void fail(const char* code, std::string msg) {
    diags.error(code, std::move(msg), span);
    ok = false;
  }

  void check_qual(const Qual& q) {
    if (q.is_var() && !env.has_qual(q.index)) fail("TY001", "unbound qualifier variable");
  }

  void check_size(const Size& s) {
    switch (s.kind) {
      case Size::Kind::Const: return;
      case Size::Kind::Var:
        if (!env.has_size(s.index)) fail("TY001", "unbound size variable");
        return;
      case Size::Kind::Plus:
        check_size(*s.lhs);
        check_size(*s.rhs);
        return;
    }
  }

  void check_loc(const Loc& l) {
    if (l.is_var() && !env.has_loc(l.index)) fail("TY001", "unbound location variable");
  }

  void check_type(const Type& t) {
    check_qual(t.qual);
    check_pre(t.pre, t.qual);
  }

  // Recurse under an indirection: every recursion variable in scope becomes
  // guarded, and size-of never descends past this point.
  template <class F>
  void guarded(F&& f) {
    std::vector<bool> saved = unguarded;
    std::fill(unguarded.begin(), unguarded.end(), false);
    f();
    unguarded = std::move(saved);
  }

  void check_pre(const PreType& p, const Qual& atQual) {
    const auto& v = p->v;
    if (std::holds_alternative<UnitT>(v) || std::holds_alternative<NumT>(v)) return;
    if (auto* tv = std::get_if<VarT>(&v)) {
      if (!env.has_type(tv->index)) {
        fail("TY001", "unbound type variable");
        return;
      }
      if (tv->index < unguarded.size() && unguarded[unguarded.size() - 1 - tv->index]) {
        fail("TY005", "recursion variable occurs outside a reference");
        return;
      }
      Qual lower = *env.type_qual_lower(tv->index);
      if (!qual_leq(env, lower, atQual))
        fail("TY006", "type variable used below its qualifier bound");
      return;
    }
    if (auto* pr = std::get_if<ProdT>(&v)) {
      for (auto& c : pr->components) {
        check_type(c);
        if (!qual_leq(env, c.qual, atQual))
          fail("TY002", "component qualifier exceeds product qualifier");
      }
      return;
    }
    if (auto* r = std::get_if<RefT>(&v)) {
      check_loc(r->loc);
      guarded([&] { check_heap(r->heap); });
      return;
    }
    if (auto* pt = std::get_if<PtrT>(&v)) {
      check_loc(pt->loc);
      return;
    }
    if (auto* c = std::get_if<CapT>(&v)) {
      check_loc(c->loc);
      guarded([&] { check_heap(c->heap); });
      return;
    }
    if (auto* o = std::get_if<OwnT>(&v)) {
      check_loc(o->loc);
      return;
    }
    if (auto* rc = std::get_if<RecT>(&v)) {
      check_qual(rc->qualBound);
      if (rc->body.qual != rc->qualBound)
        fail("TY004", "recursive type body qualifier must equal its bound");
      // The variable stands for the whole recursive type; its size is the
      // body's (recursion occurs only behind references, which never count).
      std::optional<Size> su = size_of(env, ty(p, atQual));
      env.push_type(rc->qualBound, su.value_or(Size::constant(0)), false);
      unguarded.push_back(true);
      check_type(rc->body);
      unguarded.pop_back();
      env.types.pop_back();
      return;
    }
    if (auto* ex = std::get_if<ExLocT>(&v)) {
      env.push_loc();
      check_type(ex->body);
      --env.locCount;
      return;
    }
    guarded([&] { check_fun(std::get<CodeRefT>(v).fn); });
  }

  void check_heap(const HeapType& h) {
    if (auto* vt = std::get_if<VariantHT>(&h)) {
      for (auto& c : vt->cases) check_type(c);
      return;
    }
    if (auto* st = std::get_if<StructHT>(&h)) {
      for (auto& f : st->fields) {
        check_type(f.ty);
        check_size(f.size);
        std::optional<Size> sz = size_of(env, f.ty);
        if (sz && !size_leq(env, *sz, f.size)) fail("TY003", "field size too small");
      }
      return;
    }
    if (auto* at = std::get_if<ArrayHT>(&h)) {
      check_type(at->elem);
      return;
    }
    const auto& ex = std::get<ExHT>(h);
    check_qual(ex.qualLower);
    check_size(ex.sizeBound);
    env.push_type(ex.qualLower, ex.sizeBound, false);
    unguarded.push_back(false);
    check_type(ex.body);
    unguarded.pop_back();
    env.types.pop_back();
  }

  void check_fun(const FunType& f) {
    BindEnv savedEnv = env;
    for (auto& q : f.quants) {
      if (auto* sq = std::get_if<SizeQ>(&q)) {
        for (auto& s : sq->lowers) check_size(s);
        for (auto& s : sq->uppers) check_size(s);
      } else if (auto* qq = std::get_if<QualQ>(&q)) {
        for (auto& x : qq->lowers) check_qual(x);
        for (auto& x : qq->uppers) check_qual(x);
      } else if (auto* tq = std::get_if<TypeQ>(&q)) {
        check_qual(tq->qualLower);
        check_size(tq->sizeUpper);
      }
      env.push_quantifier(q);
      if (std::holds_alternative<TypeQ>(q)) unguarded.push_back(false);
    }
    for (auto& t : f.ins) check_type(t);
    for (auto& t : f.outs) check_type(t);
    size_t popped = 0;
    for (auto& q : f.quants)
      if (std::holds_alternative<TypeQ>(q)) ++popped;
    unguarded.resize(unguarded.size() - popped);
    env = std::move(savedEnv);
  }
};

bool no_caps_pre(const BindEnv& env, uint32_t localDepth, const PreType& p);

bool no_caps_ty(const BindEnv& env, uint32_t localDepth, const Type& t) {
  return no_caps_pre(env, localDepth, t.pre);
}

bool no_caps_pre(const BindEnv& env, uint32_t localDepth, const PreType& p) {
  const auto& v = p->v;
  if (std::holds_alternative<CapT>(v) || std::holds_alternative<OwnT>(v)) return false;
  if (auto* tv = std::get_if<VarT>(&v)) {
    // Local binders (rec bodies, existential witnesses) are cap-free.
    if (tv->index < localDepth) return true;
    auto flag = env.type_may_have_caps(tv->index - localDepth);
    return flag ? !*flag : false;
  }
  if (auto* pr = std::get_if<ProdT>(&v)) {
    for (auto& c : pr->components)
      if (!no_caps_ty(env, localDepth, c)) return false;
    return true;
  }
  if (auto* rc = std::get_if<RecT>(&v)) return no_caps_ty(env, localDepth + 1, rc->body);
  if (auto* ex = std::get_if<ExLocT>(&v)) return no_caps_ty(env, localDepth, ex->body);
  // Unit, Num, Ref, Ptr, CodeRef: inhabitants carry no tokens themselves.
  return true;
}

bool no_caps_heap(const BindEnv& env, uint32_t localDepth, const HeapType& h) {
  if (auto* vt = std::get_if<VariantHT>(&h)) {
    for (auto& c : vt->cases)
      if (!no_caps_ty(env, localDepth, c)) return false;
    return true;
  }
  if (auto* st = std::get_if<StructHT>(&h)) {
    for (auto& f : st->fields)
      if (!no_caps_ty(env, localDepth, f.ty)) return false;
    return true;
  }
  if (auto* at = std::get_if<ArrayHT>(&h)) return no_caps_ty(env, localDepth, at->elem);
  return no_caps_ty(env, localDepth + 1, std::get<ExHT>(h).body);
}

}  // namespace

bool type_valid(const BindEnv& env, const Type& t, DiagnosticList& diags,
                const SourceSpan& span) {
  Validator v{diags, span, env, {}, true};
  v.check_type(t);
  return v.ok;
}

bool heaptype_valid(const BindEnv& env, const HeapType& h, DiagnosticList& diags,
                    const SourceSpan& span) {
  Validator v{diags, span, env, {}, true};
  v.check_heap(h);
  return v.ok;
}

bool funtype_valid(const BindEnv& env, const FunType& f, DiagnosticList& diags,
                   const SourceSpan& span) {
  Validator v{diags, span, env, {}, true};
  v.check_fun(f);
  return v.ok;
}

bool no_caps(const BindEnv& env, const Type& t) { return no_caps_ty(env, 0, t); }
bool no_caps(const BindEnv& env, const HeapType& h) { return no_caps_heap(env, 0, h); }

bool value_has_caps(const Value& v) {
  if (std::holds_alternative<CapV>(v.v) || std::holds_alternative<OwnV>(v.v)) return true;
  if (auto* g = std::get_if<GroupV>(&v.v)) {
    for (auto& e : g->elems)
      if (value_has_caps(e)) return true;
    return false;
  }
  if (auto* f = std::get_if<FoldV>(&v.v)) return value_has_caps(*f->inner);
  if (auto* m = std::get_if<MempackV>(&v.v)) return value_has_caps(*m->inner);
  return false;
}

}  // namespace rw

// One reduction at a time: the reducer walks past the leading values of each
// sequence, descends through label and frame bodies to the innermost redex,
// and rewrites the sequence in place. Operand order mirrors the checker
// exactly (what the checker pops last sits deepest), so a configuration that
// checks can always take a step.

#include "rw/interp.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "rw/constraints.hpp"
#include "rw/subst.hpp"

namespace rw {

namespace {

const BindEnv& closed_env() {
  static const BindEnv env;
  return env;
}

bool is_unr(const Qual& q) { return qual_leq(closed_env(), q, Qual::unr()); }
bool is_lin(const Qual& q) { return qual_leq(closed_env(), Qual::lin(), q); }

// ---------------------------------------------------------------------------
// Numeric semantics (Wasm 1.0 + saturating truncation)

uint64_t mask_to(NumType nt, uint64_t bits) {
  return num_bits(nt) == 32 ? (bits & 0xffffffffu) : bits;
}

float as_f32(uint64_t bits) { return std::bit_cast<float>(uint32_t(bits)); }
double as_f64(uint64_t bits) { return std::bit_cast<double>(bits); }
uint64_t f32_bits(float f) { return std::bit_cast<uint32_t>(f); }
uint64_t f64_bits(double d) { return std::bit_cast<uint64_t>(d); }

template <typename F>
F float_min(F a, F b) {
  if (std::isnan(a) || std::isnan(b)) return std::numeric_limits<F>::quiet_NaN();
  if (a == b) return std::signbit(a) ? a : b;  // min(+0,-0) = -0
  return a < b ? a : b;
}
template <typename F>
F float_max(F a, F b) {
  if (std::isnan(a) || std::isnan(b)) return std::numeric_limits<F>::quiet_NaN();
  if (a == b) return std::signbit(a) ? b : a;
  return a > b ? a : b;
}

template <typename U, typename S>
std::optional<uint64_t> int_binary(NumOp op, bool sgn, U a, U b, std::string& trap) {
  constexpr unsigned W = sizeof(U) * 8;
  switch (op) {
    case NumOp::Add: return U(a + b);
    case NumOp::Sub: return U(a - b);
    case NumOp::Mul: return U(a * b);
    case NumOp::Div:
      if (b == 0) {
        trap = "integer divide by zero";
        return std::nullopt;
      }
      if (sgn) {
        if (S(a) == std::numeric_limits<S>::min() && S(b) == S(-1)) {
          trap = "integer overflow";
          return std::nullopt;
        }
        return U(S(a) / S(b));
      }
      return a / b;
    case NumOp::Rem:
      if (b == 0) {
        trap = "integer divide by zero";
        return std::nullopt;
      }
      if (sgn) {
        if (S(a) == std::numeric_limits<S>::min() && S(b) == S(-1)) return U(0);
        return U(S(a) % S(b));
      }
      return a % b;
    case NumOp::And: return U(a & b);
    case NumOp::Or: return U(a | b);
    case NumOp::Xor: return U(a ^ b);
    case NumOp::Shl: return U(a << (b % W));
    case NumOp::Shr: return sgn ? U(S(a) >> (b % W)) : U(a >> (b % W));
    case NumOp::Rotl: return U(std::rotl(a, int(b % W)));
    case NumOp::Rotr: return U(std::rotr(a, int(b % W)));
    case NumOp::Eq: return a == b ? 1 : 0;
    case NumOp::Ne: return a != b ? 1 : 0;
    case NumOp::Lt: return (sgn ? S(a) < S(b) : a < b) ? 1 : 0;
    case NumOp::Gt: return (sgn ? S(a) > S(b) : a > b) ? 1 : 0;
    case NumOp::Le: return (sgn ? S(a) <= S(b) : a <= b) ? 1 : 0;
    case NumOp::Ge: return (sgn ? S(a) >= S(b) : a >= b) ? 1 : 0;
    default: return std::nullopt;  // empty trap: the operator does not apply
  }
}

template <typename F>
std::optional<F> float_binary(NumOp op, F a, F b) {
  switch (op) {
    case NumOp::Add: return a + b;
    case NumOp::Sub: return a - b;
    case NumOp::Mul: return a * b;
    case NumOp::Div: return a / b;  // IEEE: never traps
    case NumOp::Min: return float_min(a, b);
    case NumOp::Max: return float_max(a, b);
    case NumOp::Copysign: return std::copysign(a, b);
    default: return std::nullopt;
  }
}

// Comparisons yield an i32; everything else keeps the operand type.
bool num_op_is_cmp(NumOp op) {
  switch (op) {
    case NumOp::Eqz:
    case NumOp::Eq:
    case NumOp::Ne:
    case NumOp::Lt:
    case NumOp::Gt:
    case NumOp::Le:
    case NumOp::Ge: return true;
    default: return false;
  }
}

bool num_op_is_unary(NumOp op) {
  switch (op) {
    case NumOp::Clz:
    case NumOp::Ctz:
    case NumOp::Popcnt:
    case NumOp::Eqz:
    case NumOp::Abs:
    case NumOp::Neg:
    case NumOp::Sqrt:
    case NumOp::Ceil:
    case NumOp::Floor:
    case NumOp::Trunc:
    case NumOp::Nearest: return true;
    default: return false;
  }
}

std::optional<Value> eval_unary(NumType nt, NumOp op, const NumV& x) {
  if (num_is_int(nt)) {
    if (op == NumOp::Eqz) return v_i32(mask_to(nt, x.bits) == 0 ? 1 : 0);
    if (op != NumOp::Clz && op != NumOp::Ctz && op != NumOp::Popcnt) return std::nullopt;
    uint64_t r;
    if (num_bits(nt) == 32) {
      uint32_t a = uint32_t(x.bits);
      r = op == NumOp::Clz   ? std::countl_zero(a)
          : op == NumOp::Ctz ? std::countr_zero(a)
                             : std::popcount(a);
    } else {
      uint64_t a = x.bits;
      r = op == NumOp::Clz   ? std::countl_zero(a)
          : op == NumOp::Ctz ? std::countr_zero(a)
                             : std::popcount(a);
    }
    return v_num(nt, r);
  }
  auto apply = [&](auto f) -> std::optional<decltype(f)> {
    switch (op) {
      case NumOp::Abs: return std::fabs(f);
      case NumOp::Neg: return -f;
      case NumOp::Sqrt: return std::sqrt(f);
      case NumOp::Ceil: return std::ceil(f);
      case NumOp::Floor: return std::floor(f);
      case NumOp::Trunc: return std::trunc(f);
      case NumOp::Nearest: return std::nearbyint(f);  // default mode: half-to-even
      default: return std::nullopt;
    }
  };
  if (num_bits(nt) == 32) {
    auto r = apply(as_f32(x.bits));
    if (!r) return std::nullopt;
    return v_num(nt, f32_bits(*r));
  }
  auto r = apply(as_f64(x.bits));
  if (!r) return std::nullopt;
  return v_num(nt, f64_bits(*r));
}

std::optional<Value> eval_binary(NumType nt, NumOp op, const NumV& x, const NumV& y,
                                 std::string& trap) {
  if (num_is_int(nt)) {
    std::optional<uint64_t> r =
        num_bits(nt) == 32
            ? int_binary<uint32_t, int32_t>(op, num_is_signed(nt), uint32_t(x.bits),
                                            uint32_t(y.bits), trap)
            : int_binary<uint64_t, int64_t>(op, num_is_signed(nt), x.bits, y.bits, trap);
    if (!r) return std::nullopt;
    if (num_op_is_cmp(op)) return v_i32(uint32_t(*r));
    return v_num(nt, mask_to(nt, *r));
  }
  if (num_op_is_cmp(op)) {
    if (op == NumOp::Eqz) return std::nullopt;
    bool r;
    auto cmp = [&](auto a, auto b) {
      switch (op) {
        case NumOp::Eq: return a == b;
        case NumOp::Ne: return a != b;
        case NumOp::Lt: return a < b;
        case NumOp::Gt: return a > b;
        case NumOp::Le: return a <= b;
        default: return a >= b;
      }
    };
    r = num_bits(nt) == 32 ? cmp(as_f32(x.bits), as_f32(y.bits))
                           : cmp(as_f64(x.bits), as_f64(y.bits));
    return v_i32(r ? 1 : 0);
  }
  if (num_bits(nt) == 32) {
    auto r = float_binary(op, as_f32(x.bits), as_f32(y.bits));
    if (!r) return std::nullopt;
    return v_num(nt, f32_bits(*r));
  }
  auto r = float_binary(op, as_f64(x.bits), as_f64(y.bits));
  if (!r) return std::nullopt;
  return v_num(nt, f64_bits(*r));
}

template <typename S, typename U, typename F>
uint64_t trunc_sat(F f) {
  if (std::isnan(f)) return 0;
  constexpr F lo = F(std::numeric_limits<S>::min());
  // max() is not exactly representable; anything >= 2^(W-1) saturates.
  if (f <= lo) return U(std::numeric_limits<S>::min());
  if (f >= -lo) return U(std::numeric_limits<S>::max());
  return U(S(f));
}
template <typename U, typename F>
uint64_t trunc_sat_u(F f) {
  if (std::isnan(f) || f <= F(-1)) return 0;
  constexpr int W = sizeof(U) * 8;
  if (f >= std::ldexp(F(1), W)) return std::numeric_limits<U>::max();
  return U(f);
}

std::optional<Value> eval_cvt(const ICvt& c, const NumV& x) {
  switch (c.op) {
    case CvtOp::Wrap: return v_num(c.to, x.bits & 0xffffffffu);
    case CvtOp::Extend:
      if (num_is_signed(c.from)) return v_num(c.to, uint64_t(int64_t(int32_t(uint32_t(x.bits)))));
      return v_num(c.to, uint64_t(uint32_t(x.bits)));
    case CvtOp::TruncSat: {
      bool sgn = num_is_signed(c.to);
      uint64_t r;
      if (num_bits(c.from) == 32) {
        float f = as_f32(x.bits);
        r = num_bits(c.to) == 32 ? (sgn ? trunc_sat<int32_t, uint32_t>(f) : trunc_sat_u<uint32_t>(f))
                                 : (sgn ? trunc_sat<int64_t, uint64_t>(f) : trunc_sat_u<uint64_t>(f));
      } else {
        double f = as_f64(x.bits);
        r = num_bits(c.to) == 32 ? (sgn ? trunc_sat<int32_t, uint32_t>(f) : trunc_sat_u<uint32_t>(f))
                                 : (sgn ? trunc_sat<int64_t, uint64_t>(f) : trunc_sat_u<uint64_t>(f));
      }
      return v_num(c.to, r);
    }
    case CvtOp::Convert: {
      double d;
      if (num_is_signed(c.from))
        d = num_bits(c.from) == 32 ? double(int32_t(uint32_t(x.bits))) : double(int64_t(x.bits));
      else
        d = num_bits(c.from) == 32 ? double(uint32_t(x.bits)) : double(x.bits);
      return v_num(c.to, num_bits(c.to) == 32 ? f32_bits(float(d)) : f64_bits(d));
    }
    case CvtOp::Demote: return v_num(c.to, f32_bits(float(as_f64(x.bits))));
    case CvtOp::Promote: return v_num(c.to, f64_bits(double(as_f32(x.bits))));
    case CvtOp::Reinterpret: return v_num(c.to, mask_to(c.to, x.bits));
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Value inspection

// Would the checker type this value linear? Mirrors ValueTyper's natural
// qualifiers with hints taking precedence; tee_local and group use it to
// decide whether a slot keeps the value or a unit residue.
bool value_linear(const Value& v) {
  if (v.qualHint) return !is_unr(*v.qualHint);
  return std::visit(
      [](const auto& n) -> bool {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, RefV>) {
          return !n.loc.is_var() && n.loc.mem == Mem::Lin;
        } else if constexpr (std::is_same_v<T, CapV> || std::is_same_v<T, OwnV>) {
          return true;
        } else if constexpr (std::is_same_v<T, GroupV>) {
          for (const Value& e : n.elems)
            if (value_linear(e)) return true;
          return false;
        } else if constexpr (std::is_same_v<T, FoldV>) {
          const RecT* rt = n.rec ? std::get_if<RecT>(&n.rec->v) : nullptr;
          return rt && !is_unr(rt->qualBound);
        } else if constexpr (std::is_same_v<T, MempackV>) {
          return n.inner && value_linear(*n.inner);
        } else {
          return false;
        }
      },
      v.v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Store

uint64_t Store::alloc(Mem m, Cell c) {
  if (m == Mem::Lin) {
    uint64_t a = nextLin++;
    lin.emplace(a, std::move(c));
    return a;
  }
  uint64_t a = nextUnr++;
  unr.emplace(a, std::move(c));
  return a;
}

Cell* Store::find(const Loc& l) {
  if (l.is_var()) return nullptr;
  auto& mem = l.mem == Mem::Lin ? lin : unr;
  auto it = mem.find(l.addr);
  return it == mem.end() ? nullptr : &it->second;
}

const Cell* Store::find(const Loc& l) const { return const_cast<Store*>(this)->find(l); }

StoreTyping store_typing(const Store& s) {
  StoreTyping st;
  for (const Instance& ins : s.instances) {
    ModuleEnv me;
    for (const Closure& cl : ins.funcs)
      me.funcs.push_back(cl.code ? cl.code->type : FunType{});
    me.globals = ins.globalTypes;
    for (const Closure& cl : ins.table)
      me.table.push_back(cl.code ? cl.code->type : FunType{});
    st.instances.push_back(std::move(me));
  }
  for (const auto& [a, c] : s.lin) st.lin.emplace(a, HeapCell{c.hv, c.slotBits, c.ht});
  for (const auto& [a, c] : s.unr) st.unr.emplace(a, HeapCell{c.hv, c.slotBits, c.ht});
  return st;
}

namespace {

// ---------------------------------------------------------------------------
// Typing runtime values against the live store
//
// Mirror of ValueTyper::infer without the consumption bookkeeping: malloc and
// strong updates use it to record cell types, so it must agree with what the
// checker would infer for the same value.

std::optional<Type> runtime_type(const Store& s, const Value& v);

std::optional<FunType> runtime_coderef_type(const Store& s, const CoderefV& c) {
  if (c.inst >= s.instances.size()) return std::nullopt;
  const Instance& ins = s.instances[c.inst];
  if (c.tab >= ins.table.size() || !ins.table[c.tab].code) return std::nullopt;
  FunType ft = ins.table[c.tab].code->type;
  for (const Index& ix : c.indices) {
    if (ft.quants.empty()) return std::nullopt;
    try {
      ft = instantiate_prefix(ft, {ix});
    } catch (const std::invalid_argument&) {
      return std::nullopt;
    }
  }
  return ft;
}

std::optional<Type> runtime_type_node(const Store&, const UnitV&) { return ty_unit(); }
std::optional<Type> runtime_type_node(const Store&, const NumV& n) {
  return ty_unr(pt_num(n.nt));
}
std::optional<Type> runtime_type_node(const Store& s, const GroupV& g) {
  std::vector<Type> comps;
  Qual q = Qual::unr();
  for (const Value& e : g.elems) {
    auto t = runtime_type(s, e);
    if (!t) return std::nullopt;
    if (!is_unr(t->qual)) q = Qual::lin();
    comps.push_back(std::move(*t));
  }
  return ty(pt_prod(std::move(comps)), q);
}
std::optional<Type> runtime_type_node(const Store& s, const RefV& r) {
  const Cell* c = s.find(r.loc);
  if (!c) return std::nullopt;
  Qual q = r.loc.mem == Mem::Lin ? Qual::lin() : Qual::unr();
  return ty(pt_ref(r.priv, r.loc, c->ht), q);
}
std::optional<Type> runtime_type_node(const Store&, const PtrV& p) {
  return ty_unr(pt_ptr(p.loc));
}
std::optional<Type> runtime_type_node(const Store&, const CapV& c) {
  return ty_lin(pt_cap(c.priv, c.loc, c.heap));
}
std::optional<Type> runtime_type_node(const Store&, const OwnV& o) {
  return ty_lin(pt_own(o.loc));
}
std::optional<Type> runtime_type_node(const Store&, const FoldV& f) {
  const RecT* rt = f.rec ? std::get_if<RecT>(&f.rec->v) : nullptr;
  if (!rt) return std::nullopt;
  return ty(f.rec, rt->qualBound);
}
std::optional<Type> runtime_type_node(const Store& s, const MempackV& m) {
  if (!m.inner || m.loc.is_var()) return std::nullopt;
  auto inner = runtime_type(s, *m.inner);
  if (!inner) return std::nullopt;
  Qual q = inner->qual;
  return ty(pt_exloc(abstract_loc(*inner, m.loc)), q);
}
std::optional<Type> runtime_type_node(const Store& s, const CoderefV& c) {
  auto ft = runtime_coderef_type(s, c);
  if (!ft) return std::nullopt;
  return ty_unr(pt_coderef(std::move(*ft)));
}

std::optional<Type> runtime_type(const Store& s, const Value& v) {
  auto t = std::visit([&](const auto& n) { return runtime_type_node(s, n); }, v.v);
  if (!t) return std::nullopt;
  if (v.qualHint) t->qual = *v.qualHint;
  return t;
}

// ---------------------------------------------------------------------------
// The reducer

struct Ctx {
  std::vector<LocalSlotV>* locals = nullptr;
  uint32_t inst = 0;
  std::optional<uint32_t> retArity;
  std::vector<uint32_t> labelArities;  // innermost last
};

struct Sig {
  enum K : uint8_t { Did, Values, Br, Ret, Trap, Stuck } k = Did;
  uint32_t depth = 0;                  // Br
  std::vector<Value> payload;          // Br, Ret
  std::string what;                    // Trap, Stuck
};

Sig sig_did() { return {}; }
Sig sig_stuck(std::string what) {
  Sig s;
  s.k = Sig::Stuck;
  s.what = std::move(what);
  return s;
}
Sig sig_trap(std::string what) {
  Sig s;
  s.k = Sig::Trap;
  s.what = std::move(what);
  return s;
}

InstrSeq to_vals(std::vector<Value> vs) {
  InstrSeq out;
  out.reserve(vs.size());
  for (Value& v : vs) out.push_back(instr(IVal{std::move(v)}));
  return out;
}

struct Machine {
  Store& store;
  std::string* rule;

  void name(const char* r) {
    if (rule) *rule = r;
  }

  // --- sequence surgery ----------------------------------------------------

  static void splice(InstrSeq& seq, size_t first, size_t last, InstrSeq repl) {
    seq.erase(seq.begin() + ptrdiff_t(first), seq.begin() + ptrdiff_t(last));
    seq.insert(seq.begin() + ptrdiff_t(first), std::make_move_iterator(repl.begin()),
               std::make_move_iterator(repl.end()));
  }

  static const Value* peek(const InstrSeq& seq, size_t nv, size_t depth) {
    if (nv < depth) return nullptr;
    const auto* iv = std::get_if<IVal>(&seq[nv - depth].v);
    return iv ? &iv->val : nullptr;
  }
  static Value* peek_mut(InstrSeq& seq, size_t nv, size_t depth) {
    return const_cast<Value*>(peek(seq, nv, depth));
  }

  // Moves the top `n` operands out, in stack order (deepest first).
  static std::vector<Value> take(InstrSeq& seq, size_t nv, size_t n) {
    std::vector<Value> out;
    out.reserve(n);
    for (size_t i = nv - n; i < nv; ++i) out.push_back(std::move(std::get<IVal>(seq[i].v).val));
    return out;
  }

  // --- walking to the redex ------------------------------------------------

  Sig reduce(InstrSeq& seq, Ctx& ctx) {
    size_t nv = 0;
    while (nv < seq.size() && std::holds_alternative<IVal>(seq[nv].v)) ++nv;
    if (nv == seq.size()) {
      Sig s;
      s.k = Sig::Values;
      return s;
    }

    if (auto* lb = std::get_if<ILabel>(&seq[nv].v)) {
      ctx.labelArities.push_back(lb->arity);
      Sig s = reduce(lb->body, ctx);
      ctx.labelArities.pop_back();
      switch (s.k) {
        case Sig::Values: {
          name("label-end");
          InstrSeq body = std::move(lb->body);
          splice(seq, nv, nv + 1, std::move(body));
          return sig_did();
        }
        case Sig::Br:
          if (s.depth == 0) {
            InstrSeq repl = to_vals(std::move(s.payload));
            for (Instr& i : lb->cont) repl.push_back(std::move(i));
            splice(seq, nv, nv + 1, std::move(repl));
            return sig_did();
          }
          --s.depth;
          return s;
        default: return s;
      }
    }

    if (auto* lf = std::get_if<ILocalFrame>(&seq[nv].v)) {
      Ctx inner;
      inner.locals = &lf->locals;
      inner.inst = lf->inst;
      inner.retArity = lf->arity;
      Sig s = reduce(lf->body, inner);
      switch (s.k) {
        case Sig::Values: {
          size_t got = lf->body.size();
          if (got != lf->arity)
            return sig_stuck("function frame ended with " + std::to_string(got) +
                             " results, expected " + std::to_string(lf->arity));
          name("frame-end");
          InstrSeq body = std::move(lf->body);
          splice(seq, nv, nv + 1, std::move(body));
          return sig_did();
        }
        case Sig::Ret:
          splice(seq, nv, nv + 1, to_vals(std::move(s.payload)));
          return sig_did();
        case Sig::Br: return sig_stuck("branch crosses a function boundary");
        default: return s;
      }
    }

    return apply(seq, nv, ctx);
  }

  // --- the rules ------------------------------------------------------------
  //
  // `nv` is the index of the redex; seq[0..nv) are values. Handlers validate
  // operands before mutating anything, so a stuck configuration is left
  // intact for inspection.

  Sig apply(InstrSeq& seq, size_t nv, Ctx& ctx) {
    return std::visit([&](auto& node) { return this->rule_for(seq, nv, ctx, node); }, seq[nv].v);
  }

  Sig underflow(const char* who) {
    return sig_stuck(std::string(who) + " finds too few operands");
  }
  Sig wrong(const char* who, const char* wanted) {
    return sig_stuck(std::string(who) + " expects " + wanted + " on the stack");
  }

  Sig rule_for(InstrSeq&, size_t, Ctx&, IVal&) {
    return sig_stuck("a value is not a redex");  // unreachable: reduce skips values
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, INum& node) {
    size_t n = num_op_is_unary(node.op) ? 1 : 2;
    std::string trap;
    std::optional<Value> r;
    if (n == 1) {
      const Value* x = peek(seq, nv, 1);
      const NumV* xn = x ? std::get_if<NumV>(&x->v) : nullptr;
      if (!xn) return wrong("a numeric operator", "a number");
      r = eval_unary(node.nt, node.op, *xn);
    } else {
      const Value* x = peek(seq, nv, 2);
      const Value* y = peek(seq, nv, 1);
      const NumV* xn = x ? std::get_if<NumV>(&x->v) : nullptr;
      const NumV* yn = y ? std::get_if<NumV>(&y->v) : nullptr;
      if (!xn || !yn) return wrong("a numeric operator", "two numbers");
      r = eval_binary(node.nt, node.op, *xn, *yn, trap);
    }
    if (!r) {
      if (trap.empty()) return sig_stuck("numeric operator does not apply to its operand type");
      return sig_trap(trap);
    }
    name("num");
    splice(seq, nv - n, nv + 1, to_vals({std::move(*r)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, ICvt& node) {
    const Value* x = peek(seq, nv, 1);
    const NumV* xn = x ? std::get_if<NumV>(&x->v) : nullptr;
    if (!xn) return wrong("a conversion", "a number");
    auto r = eval_cvt(node, *xn);
    if (!r) return sig_stuck("conversion does not apply to its operand type");
    name("cvt");
    splice(seq, nv - 1, nv + 1, to_vals({std::move(*r)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq&, size_t, Ctx&, IUnreachable&) {
    name("unreachable");
    return sig_trap("unreachable executed");
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, INop&) {
    name("nop");
    splice(seq, nv, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IDrop&) {
    if (nv < 1) return underflow("drop");
    name("drop");
    splice(seq, nv - 1, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, ISelect&) {
    const Value* c = peek(seq, nv, 1);
    const NumV* cn = c ? std::get_if<NumV>(&c->v) : nullptr;
    if (!cn || nv < 3) return wrong("select", "two operands and an i32 condition");
    bool first = mask_to(NumType::I32, cn->bits) != 0;
    name(first ? "select-first" : "select-second");
    Value kept = std::move(std::get<IVal>(seq[nv - (first ? 3 : 2)].v).val);
    splice(seq, nv - 3, nv + 1, to_vals({std::move(kept)}));
    return sig_did();
  }

  // block/loop/if reshape into a label; the label then runs its body.

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IBlock& node) {
    size_t n = node.arrow.ins.size();
    if (nv < n) return underflow("block");
    name("block");
    uint32_t arity = uint32_t(node.arrow.outs.size());
    ArrowType arrow{node.arrow.outs, node.arrow.outs};
    InstrSeq body = to_vals(take(seq, nv, n));
    for (Instr& i : node.body) body.push_back(std::move(i));
    splice(seq, nv - n, nv + 1, {instr(ILabel{arity, std::move(arrow), {}, std::move(body)})});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, ILoop& node) {
    size_t n = node.arrow.ins.size();
    if (nv < n) return underflow("loop");
    name("loop");
    uint32_t arity = uint32_t(node.arrow.ins.size());
    ArrowType arrow{node.arrow.ins, node.arrow.outs};
    InstrSeq cont = {instr(ILoop{node.arrow, node.body})};  // re-entry on branch
    InstrSeq body = to_vals(take(seq, nv, n));
    for (Instr& i : node.body) body.push_back(std::move(i));
    splice(seq, nv - n, nv + 1,
           {instr(ILabel{arity, std::move(arrow), std::move(cont), std::move(body)})});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IIte& node) {
    const Value* c = peek(seq, nv, 1);
    const NumV* cn = c ? std::get_if<NumV>(&c->v) : nullptr;
    if (!cn) return wrong("if", "an i32 condition");
    size_t n = node.arrow.ins.size();
    if (nv < n + 1) return underflow("if");
    bool thn = mask_to(NumType::I32, cn->bits) != 0;
    name(thn ? "if-true" : "if-false");
    uint32_t arity = uint32_t(node.arrow.outs.size());
    ArrowType arrow{node.arrow.outs, node.arrow.outs};
    InstrSeq body = to_vals(take(seq, nv - 1, n));
    InstrSeq& chosen = thn ? node.thn : node.els;
    for (Instr& i : chosen) body.push_back(std::move(i));
    splice(seq, nv - 1 - n, nv + 1,
           {instr(ILabel{arity, std::move(arrow), {}, std::move(body)})});
    return sig_did();
  }

  Sig do_branch(InstrSeq& seq, size_t nv, Ctx& ctx, uint32_t depth, size_t extraOperands) {
    if (depth >= ctx.labelArities.size())
      return sig_stuck("branch targets label " + std::to_string(depth) +
                       " but only " + std::to_string(ctx.labelArities.size()) +
                       " labels enclose it");
    uint32_t arity = ctx.labelArities[ctx.labelArities.size() - 1 - depth];
    if (nv < arity + extraOperands) return underflow("br");
    Sig s;
    s.k = Sig::Br;
    s.depth = depth;
    s.payload = take(seq, nv - extraOperands, arity);
    // Everything else at this level is discarded by the unwind.
    seq.erase(seq.begin(), seq.end());
    return s;
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, IBr& node) {
    name("br");
    return do_branch(seq, nv, ctx, node.depth, 0);
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, IBrIf& node) {
    const Value* c = peek(seq, nv, 1);
    const NumV* cn = c ? std::get_if<NumV>(&c->v) : nullptr;
    if (!cn) return wrong("br_if", "an i32 condition");
    if (mask_to(NumType::I32, cn->bits) != 0) {
      name("br_if-true");
      return do_branch(seq, nv, ctx, node.depth, 1);
    }
    name("br_if-false");
    splice(seq, nv - 1, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, IBrTable& node) {
    const Value* c = peek(seq, nv, 1);
    const NumV* cn = c ? std::get_if<NumV>(&c->v) : nullptr;
    if (!cn) return wrong("br_table", "an i32 selector");
    uint64_t sel = mask_to(NumType::I32, cn->bits);
    uint32_t depth = sel < node.targets.size() ? node.targets[size_t(sel)] : node.dflt;
    name("br_table");
    return do_branch(seq, nv, ctx, depth, 1);
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, IReturn&) {
    if (!ctx.retArity) return sig_stuck("return outside a function frame");
    uint32_t arity = *ctx.retArity;
    if (nv < arity) return underflow("return");
    name("return");
    Sig s;
    s.k = Sig::Ret;
    s.payload = take(seq, nv, arity);
    seq.erase(seq.begin(), seq.end());
    return s;
  }

  // --- locals and globals ---------------------------------------------------

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, IGetLocal& node) {
    if (!ctx.locals || node.idx >= ctx.locals->size())
      return sig_stuck("get_local names a slot that does not exist");
    LocalSlotV& slot = (*ctx.locals)[node.idx];
    name("get_local");
    Value out = slot.val;
    if (!is_unr(node.qual)) slot.val = v_unit();  // the value moves; a unit residue stays
    splice(seq, nv, nv + 1, to_vals({std::move(out)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, ISetLocal& node) {
    if (!ctx.locals || node.idx >= ctx.locals->size())
      return sig_stuck("set_local names a slot that does not exist");
    if (nv < 1) return underflow("set_local");
    name("set_local");
    (*ctx.locals)[node.idx].val = std::move(std::get<IVal>(seq[nv - 1].v).val);
    splice(seq, nv - 1, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, ITeeLocal& node) {
    if (!ctx.locals || node.idx >= ctx.locals->size())
      return sig_stuck("tee_local names a slot that does not exist");
    if (nv < 1) return underflow("tee_local");
    const Value& v = std::get<IVal>(seq[nv - 1].v).val;
    name("tee_local");
    // A linear value cannot be in two places: the slot gets the residue.
    (*ctx.locals)[node.idx].val = value_linear(v) ? v_unit() : v;
    splice(seq, nv, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, IGetGlobal& node) {
    if (ctx.inst >= store.instances.size() ||
        node.idx >= store.instances[ctx.inst].globals.size())
      return sig_stuck("get_global names a global that does not exist");
    name("get_global");
    splice(seq, nv, nv + 1, to_vals({store.instances[ctx.inst].globals[node.idx]}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, ISetGlobal& node) {
    if (ctx.inst >= store.instances.size() ||
        node.idx >= store.instances[ctx.inst].globals.size())
      return sig_stuck("set_global names a global that does not exist");
    if (nv < 1) return underflow("set_global");
    name("set_global");
    store.instances[ctx.inst].globals[node.idx] = std::move(std::get<IVal>(seq[nv - 1].v).val);
    splice(seq, nv - 1, nv + 1, {});
    return sig_did();
  }

  // --- qualifiers, tuples, recursion, packages -------------------------------

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IQualify& node) {
    Value* v = peek_mut(seq, nv, 1);
    if (!v) return underflow("qualify");
    name("qualify");
    v->qualHint = node.qual;
    splice(seq, nv, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IGroup& node) {
    if (nv < node.n) return underflow("group");
    name("group");
    Value g{GroupV{take(seq, nv, node.n)}, node.qual};
    splice(seq, nv - node.n, nv + 1, to_vals({std::move(g)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IUngroup&) {
    Value* v = peek_mut(seq, nv, 1);
    GroupV* g = v ? std::get_if<GroupV>(&v->v) : nullptr;
    if (!g) return wrong("ungroup", "a tuple");
    name("ungroup");
    std::vector<Value> elems = std::move(g->elems);
    splice(seq, nv - 1, nv + 1, to_vals(std::move(elems)));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IRecFold& node) {
    if (nv < 1) return underflow("rec.fold");
    name("rec.fold");
    Value inner = std::move(std::get<IVal>(seq[nv - 1].v).val);
    Value out{FoldV{node.rec, std::make_shared<Value>(std::move(inner))}, {}};
    splice(seq, nv - 1, nv + 1, to_vals({std::move(out)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IRecUnfold&) {
    Value* v = peek_mut(seq, nv, 1);
    FoldV* f = v ? std::get_if<FoldV>(&v->v) : nullptr;
    if (!f || !f->inner) return wrong("rec.unfold", "a folded value");
    name("rec.unfold");
    Value inner = *f->inner;
    splice(seq, nv - 1, nv + 1, to_vals({std::move(inner)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IMempack& node) {
    if (nv < 1) return underflow("mempack");
    if (node.loc.is_var()) return sig_stuck("mempack names an unsubstituted location variable");
    name("mempack");
    Value inner = std::move(std::get<IVal>(seq[nv - 1].v).val);
    Value out{MempackV{node.loc, std::make_shared<Value>(std::move(inner))}, {}};
    splice(seq, nv - 1, nv + 1, to_vals({std::move(out)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IMemunpack& node) {
    const Value* pkg = peek(seq, nv, 1);
    const MempackV* m = pkg ? std::get_if<MempackV>(&pkg->v) : nullptr;
    if (!m || !m->inner) return wrong("memunpack", "a location package");
    size_t n = node.arrow.ins.size();
    if (nv < n + 1) return underflow("memunpack");
    name("memunpack");
    Loc witness = m->loc;
    Value payload = *m->inner;
    uint32_t arity = uint32_t(node.arrow.outs.size());
    ArrowType arrow{node.arrow.outs, node.arrow.outs};
    InstrSeq body = to_vals(take(seq, nv - 1, n));
    body.push_back(instr(IVal{std::move(payload)}));
    InstrSeq substituted = subst_free0(node.body, Index{witness});
    for (Instr& i : substituted) body.push_back(std::move(i));
    splice(seq, nv - 1 - n, nv + 1,
           {instr(ILabel{arity, std::move(arrow), {}, std::move(body)})});
    return sig_did();
  }

  // --- code references and calls ----------------------------------------------

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, ICodeRef& node) {
    if (ctx.inst >= store.instances.size() ||
        node.tableIdx >= store.instances[ctx.inst].table.size())
      return sig_stuck("coderef names a table entry that does not exist");
    name("coderef");
    splice(seq, nv, nv + 1, to_vals({Value{CoderefV{ctx.inst, node.tableIdx, {}}, {}}}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IInst& node) {
    Value* v = peek_mut(seq, nv, 1);
    CoderefV* c = v ? std::get_if<CoderefV>(&v->v) : nullptr;
    if (!c) return wrong("inst", "a code reference");
    name("inst");
    for (const Index& ix : node.indices) c->indices.push_back(ix);
    splice(seq, nv, nv + 1, {});
    return sig_did();
  }

  // Instantiates the closure's signature and body and pushes a fresh local
  // frame. `extra` counts stack slots above the arguments that the caller
  // consumes itself (the code reference for call_indirect).
  Sig enter_call(InstrSeq& seq, size_t nv, const Closure& cl, const std::vector<Index>& ixs,
                 size_t extra) {
    if (!cl.code) return sig_stuck("call resolves to an empty closure");
    const FuncDef& f = *cl.code;
    if (ixs.size() != f.type.quants.size())
      return sig_stuck("call instantiates " + std::to_string(ixs.size()) + " of " +
                       std::to_string(f.type.quants.size()) + " quantifiers");
    FunType ft;
    try {
      ft = instantiate_prefix(f.type, ixs);
    } catch (const std::invalid_argument& e) {
      return sig_stuck(std::string("call instantiation failed: ") + e.what());
    }
    size_t argc = ft.ins.size();
    if (nv < argc + extra) return underflow("call");

    std::vector<LocalSlotV> locals;
    locals.reserve(argc + f.localSizes.size());
    std::vector<Value> args = take(seq, nv - extra, argc);
    for (size_t i = 0; i < argc; ++i) {
      std::string serr;
      auto sz = size_of(closed_env(), ft.ins[i], &serr);
      auto bits = sz ? size_const(*sz) : std::nullopt;
      if (!bits) return sig_stuck("argument type has no concrete size: " + serr);
      locals.push_back({std::move(args[i]), *bits});
    }
    for (const Size& declared : f.localSizes) {
      Size s = declared;
      for (size_t k = ixs.size(); k-- > 0;) s = subst_free0(s, ixs[k]);
      auto bits = size_const(s);
      if (!bits) return sig_stuck("local slot size does not become concrete");
      locals.push_back({v_unit(), *bits});
    }
    InstrSeq body = f.body;
    for (size_t k = ixs.size(); k-- > 0;) body = subst_free0(body, ixs[k]);

    ILocalFrame frame{uint32_t(ft.outs.size()), cl.inst, std::move(locals), std::move(body),
                      ft.outs};
    splice(seq, nv - argc - extra, nv + 1, {instr(std::move(frame))});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx& ctx, ICall& node) {
    if (ctx.inst >= store.instances.size() ||
        node.fn >= store.instances[ctx.inst].funcs.size())
      return sig_stuck("call names a function that does not exist");
    name("call");
    Closure cl = store.instances[ctx.inst].funcs[node.fn];
    return enter_call(seq, nv, cl, node.indices, 0);
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, ICallIndirect&) {
    const Value* v = peek(seq, nv, 1);
    const CoderefV* c = v ? std::get_if<CoderefV>(&v->v) : nullptr;
    if (!c) return wrong("call_indirect", "a code reference");
    if (c->inst >= store.instances.size() ||
        c->tab >= store.instances[c->inst].table.size())
      return sig_stuck("call_indirect names a table entry that does not exist");
    name("call_indirect");
    Closure cl = store.instances[c->inst].table[c->tab];
    std::vector<Index> ixs = c->indices;
    return enter_call(seq, nv, cl, ixs, 1);
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, ICallCl& node) {
    name("call_cl");
    Closure cl{node.inst, node.code};
    return enter_call(seq, nv, cl, node.indices, 0);
  }

  // --- capability plumbing ------------------------------------------------------

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, ICapSplit&) {
    Value* v = peek_mut(seq, nv, 1);
    CapV* c = v ? std::get_if<CapV>(&v->v) : nullptr;
    if (!c) return wrong("cap.split", "a capability");
    if (c->priv != Privilege::RW) return sig_stuck("cap.split of a read-only capability");
    name("cap.split");
    Value own{OwnV{c->loc}, {}};
    c->priv = Privilege::R;
    splice(seq, nv, nv + 1, to_vals({std::move(own)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, ICapJoin&) {
    const Value* o = peek(seq, nv, 1);
    Value* cv = peek_mut(seq, nv, 2);
    const OwnV* own = o ? std::get_if<OwnV>(&o->v) : nullptr;
    CapV* cap = cv ? std::get_if<CapV>(&cv->v) : nullptr;
    if (!own || !cap) return wrong("cap.join", "a capability and an ownership token");
    if (!(own->loc == cap->loc)) return sig_stuck("cap.join of mismatched locations");
    name("cap.join");
    cap->priv = Privilege::RW;
    splice(seq, nv - 1, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IRefDemote&) {
    Value* v = peek_mut(seq, nv, 1);
    RefV* r = v ? std::get_if<RefV>(&v->v) : nullptr;
    if (!r) return wrong("ref.demote", "a reference");
    name("ref.demote");
    r->priv = Privilege::R;
    splice(seq, nv, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IRefSplit&) {
    Value* v = peek_mut(seq, nv, 1);
    RefV* r = v ? std::get_if<RefV>(&v->v) : nullptr;
    if (!r) return wrong("ref.split", "a reference");
    const Cell* cell = store.find(r->loc);
    if (!cell) return sig_stuck("ref.split of a dangling reference");
    name("ref.split");
    Value cap{CapV{r->priv, r->loc, cell->ht}, v->qualHint};
    Value ptr{PtrV{r->loc}, {}};
    splice(seq, nv - 1, nv + 1, to_vals({std::move(cap), std::move(ptr)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IRefJoin&) {
    const Value* p = peek(seq, nv, 1);
    const Value* cv = peek(seq, nv, 2);
    const PtrV* ptr = p ? std::get_if<PtrV>(&p->v) : nullptr;
    const CapV* cap = cv ? std::get_if<CapV>(&cv->v) : nullptr;
    if (!ptr || !cap) return wrong("ref.join", "a capability and a pointer");
    if (!(ptr->loc == cap->loc)) return sig_stuck("ref.join of mismatched locations");
    name("ref.join");
    Value out{RefV{cap->loc, cap->priv}, cv->qualHint};
    splice(seq, nv - 2, nv + 1, to_vals({std::move(out)}));
    return sig_did();
  }

  // --- heap allocation and access -------------------------------------------------

  static Mem mem_of(const Qual& q) { return is_lin(q) ? Mem::Lin : Mem::Unr; }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IStructMalloc& node) {
    size_t n = node.sizes.size();
    if (nv < n) return underflow("struct.malloc");
    uint64_t total = 0;
    std::vector<uint64_t> sizeBits(n);
    for (size_t i = 0; i < n; ++i) {
      auto bits = size_const(node.sizes[i]);
      if (!bits) return sig_stuck("struct.malloc field size does not become concrete");
      sizeBits[i] = *bits;
      total += *bits;
    }
    StructHT ht;
    for (size_t i = 0; i < n; ++i) {
      const Value* v = peek(seq, nv, n - i);
      auto t = runtime_type(store, *v);
      if (!t) return sig_stuck("struct.malloc field value cannot be typed");
      ht.fields.push_back({std::move(*t), Size::constant(sizeBits[i])});
    }
    name("struct.malloc");
    StructHV hv{take(seq, nv, n), std::move(sizeBits)};
    splice(seq, nv - n, nv + 1,
           {instr(IMalloc{total, std::move(hv), mem_of(node.qual), HeapType{std::move(ht)}})});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IVariantMalloc& node) {
    if (nv < 1) return underflow("variant.malloc");
    if (node.tag >= node.cases.size()) return sig_stuck("variant.malloc tag out of range");
    std::string serr;
    auto sz = size_of(closed_env(), node.cases[node.tag], &serr);
    auto bits = sz ? size_const(*sz) : std::nullopt;
    if (!bits) return sig_stuck("variant payload type has no concrete size: " + serr);
    name("variant.malloc");
    Value payload = std::move(std::get<IVal>(seq[nv - 1].v).val);
    VariantHV hv{node.tag, std::make_shared<Value>(std::move(payload))};
    splice(seq, nv - 1, nv + 1,
           {instr(IMalloc{32 + *bits, std::move(hv), mem_of(node.qual),
                          HeapType{VariantHT{std::move(node.cases)}}})});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IArrayMalloc& node) {
    const Value* c = peek(seq, nv, 1);
    const NumV* cn = c ? std::get_if<NumV>(&c->v) : nullptr;
    const Value* v = peek(seq, nv, 2);
    if (!cn || !v) return wrong("array.malloc", "a value and an i32 count");
    int32_t count = int32_t(uint32_t(cn->bits));
    if (count < 0) return sig_trap("array.malloc with a negative length");
    auto t = runtime_type(store, *v);
    if (!t) return sig_stuck("array.malloc element value cannot be typed");
    std::string serr;
    auto sz = size_of(closed_env(), *t, &serr);
    auto bits = sz ? size_const(*sz) : std::nullopt;
    if (!bits) return sig_stuck("array element type has no concrete size: " + serr);
    name("array.malloc");
    ArrayHV hv;
    hv.elems.assign(size_t(count), *v);  // the one operand is replicated
    splice(seq, nv - 2, nv + 1,
           {instr(IMalloc{uint64_t(count) * *bits, std::move(hv), mem_of(node.qual),
                          HeapType{ArrayHT{std::move(*t)}}})});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IExistsPack& node) {
    if (nv < 1) return underflow("exists.pack");
    const auto* et = std::get_if<ExHT>(&node.ht);
    if (!et) return sig_stuck("exists.pack annotation is not an existential");
    Type payloadTy = subst_free0(et->body, Index{node.witness});
    std::string serr;
    auto sz = size_of(closed_env(), payloadTy, &serr);
    auto bits = sz ? size_const(*sz) : std::nullopt;
    if (!bits) return sig_stuck("pack payload type has no concrete size: " + serr);
    name("exists.pack");
    Value payload = std::move(std::get<IVal>(seq[nv - 1].v).val);
    PackHV hv{node.witness, std::make_shared<Value>(std::move(payload)), node.ht};
    splice(seq, nv - 1, nv + 1,
           {instr(IMalloc{64 + *bits, std::move(hv), mem_of(node.qual), std::move(node.ht)})});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IMalloc& node) {
    name("malloc");
    uint64_t addr = store.alloc(node.mem, Cell{std::move(node.hv), node.bits, node.ht});
    Loc loc = Loc::concrete(addr, node.mem);
    Value pkg{MempackV{loc, std::make_shared<Value>(Value{RefV{loc}, {}})}, {}};
    splice(seq, nv, nv + 1, to_vals({std::move(pkg)}));
    return sig_did();
  }

  Sig free_cell(InstrSeq& seq, size_t nv, const char* who) {
    const Value* v = peek(seq, nv, 1);
    const RefV* r = v ? std::get_if<RefV>(&v->v) : nullptr;
    if (!r) return wrong(who, "a reference");
    if (r->loc.is_var() || r->loc.mem != Mem::Lin)
      return sig_stuck(std::string(who) + " of a reference outside linear memory");
    if (!store.lin.count(r->loc.addr))
      return sig_stuck(std::string(who) + " of linear address " + std::to_string(r->loc.addr) +
                       ", which is not allocated");
    name(who);
    store.lin.erase(r->loc.addr);
    splice(seq, nv - 1, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IStructFree&) {
    return free_cell(seq, nv, "struct.free");
  }
  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IArrayFree&) {
    return free_cell(seq, nv, "array.free");
  }
  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IFree&) { return free_cell(seq, nv, "free"); }

  // Struct access keeps the reference on the stack (it is re-pushed by the
  // typing rule; here it simply never leaves).

  std::optional<Sig> struct_cell(InstrSeq& seq, size_t nv, size_t refDepth, const char* who,
                                 StructHV*& hv, StructHT*& ht) {
    const Value* v = peek(seq, nv, refDepth);
    const RefV* r = v ? std::get_if<RefV>(&v->v) : nullptr;
    if (!r) return wrong(who, "a struct reference");
    Cell* cell = store.find(r->loc);
    if (!cell) return sig_stuck(std::string(who) + " through a dangling reference");
    hv = std::get_if<StructHV>(&cell->hv);
    ht = std::get_if<StructHT>(&cell->ht);
    if (!hv || !ht) return sig_stuck(std::string(who) + " on a cell that is not a struct");
    return std::nullopt;
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IStructGet& node) {
    StructHV* hv = nullptr;
    StructHT* ht = nullptr;
    if (auto bad = struct_cell(seq, nv, 1, "struct.get", hv, ht)) return *bad;
    if (node.idx >= hv->fields.size()) return sig_stuck("struct.get field out of range");
    name("struct.get");
    Value out = hv->fields[node.idx];
    splice(seq, nv, nv + 1, to_vals({std::move(out)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IStructSet& node) {
    StructHV* hv = nullptr;
    StructHT* ht = nullptr;
    if (auto bad = struct_cell(seq, nv, 2, "struct.set", hv, ht)) return *bad;
    if (node.idx >= hv->fields.size() || node.idx >= ht->fields.size())
      return sig_stuck("struct.set field out of range");
    const Value* v = peek(seq, nv, 1);
    auto t = runtime_type(store, *v);
    if (!t) return sig_stuck("struct.set value cannot be typed");
    name("struct.set");
    hv->fields[node.idx] = std::move(std::get<IVal>(seq[nv - 1].v).val);
    ht->fields[node.idx].ty = std::move(*t);  // strong updates retype the cell
    splice(seq, nv - 1, nv + 1, {});
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IStructSwap& node) {
    StructHV* hv = nullptr;
    StructHT* ht = nullptr;
    if (auto bad = struct_cell(seq, nv, 2, "struct.swap", hv, ht)) return *bad;
    if (node.idx >= hv->fields.size() || node.idx >= ht->fields.size())
      return sig_stuck("struct.swap field out of range");
    const Value* v = peek(seq, nv, 1);
    auto t = runtime_type(store, *v);
    if (!t) return sig_stuck("struct.swap value cannot be typed");
    name("struct.swap");
    Value old = std::move(hv->fields[node.idx]);
    hv->fields[node.idx] = std::move(std::get<IVal>(seq[nv - 1].v).val);
    ht->fields[node.idx].ty = std::move(*t);
    seq[nv - 1] = instr(IVal{std::move(old)});
    splice(seq, nv, nv + 1, {});
    return sig_did();
  }

  std::optional<Sig> array_cell(InstrSeq& seq, size_t nv, size_t refDepth, const char* who,
                                ArrayHV*& hv) {
    const Value* v = peek(seq, nv, refDepth);
    const RefV* r = v ? std::get_if<RefV>(&v->v) : nullptr;
    if (!r) return wrong(who, "an array reference");
    Cell* cell = store.find(r->loc);
    if (!cell) return sig_stuck(std::string(who) + " through a dangling reference");
    hv = std::get_if<ArrayHV>(&cell->hv);
    if (!hv) return sig_stuck(std::string(who) + " on a cell that is not an array");
    return std::nullopt;
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IArrayGet&) {
    const Value* iv = peek(seq, nv, 1);
    const NumV* in = iv ? std::get_if<NumV>(&iv->v) : nullptr;
    if (!in) return wrong("array.get", "an i32 index");
    ArrayHV* hv = nullptr;
    if (auto bad = array_cell(seq, nv, 2, "array.get", hv)) return *bad;
    int32_t j = int32_t(uint32_t(in->bits));
    if (j < 0 || size_t(j) >= hv->elems.size()) {
      name("array.get-trap");
      return sig_trap("array index " + std::to_string(j) + " out of bounds for length " +
                      std::to_string(hv->elems.size()));
    }
    name("array.get");
    Value out = hv->elems[size_t(j)];
    splice(seq, nv - 1, nv + 1, to_vals({std::move(out)}));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IArraySet&) {
    const Value* iv = peek(seq, nv, 2);
    const NumV* in = iv ? std::get_if<NumV>(&iv->v) : nullptr;
    if (!in || nv < 3) return wrong("array.set", "a reference, an i32 index, and a value");
    ArrayHV* hv = nullptr;
    if (auto bad = array_cell(seq, nv, 3, "array.set", hv)) return *bad;
    int32_t j = int32_t(uint32_t(in->bits));
    if (j < 0 || size_t(j) >= hv->elems.size()) {
      name("array.set-trap");
      return sig_trap("array index " + std::to_string(j) + " out of bounds for length " +
                      std::to_string(hv->elems.size()));
    }
    name("array.set");
    hv->elems[size_t(j)] = std::move(std::get<IVal>(seq[nv - 1].v).val);
    splice(seq, nv - 2, nv + 1, {});
    return sig_did();
  }

  // Consuming case/unpack empties the cell and appends a free; the copying
  // modes leave the reference beneath the label.

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IVariantCase& node) {
    const Value* rv = peek(seq, nv, 1);
    const RefV* r = rv ? std::get_if<RefV>(&rv->v) : nullptr;
    if (!r) return wrong("variant.case", "a reference");
    Cell* cell = store.find(r->loc);
    if (!cell) return sig_stuck("variant.case through a dangling reference");
    VariantHV* hv = std::get_if<VariantHV>(&cell->hv);
    if (!hv || !hv->payload) return sig_stuck("variant.case on a cell that is not a variant");
    if (hv->tag >= node.arms.size()) return sig_stuck("variant cell tag has no matching arm");
    size_t n = node.arrow.ins.size();
    if (nv < n + 1) return underflow("variant.case");
    bool consuming = is_lin(node.qual);
    name(consuming ? "variant.case-lin" : "variant.case-unr");

    Value payload = *hv->payload;
    Value refVal = *rv;
    uint32_t arity = uint32_t(node.arrow.outs.size());
    ArrowType arrow{node.arrow.outs, node.arrow.outs};
    InstrSeq body = to_vals(take(seq, nv - 1, n));
    body.push_back(instr(IVal{std::move(payload)}));
    for (Instr& i : node.arms[hv->tag]) body.push_back(std::move(i));

    InstrSeq repl;
    if (consuming) {
      // The cell is spent: empty it now, free it after the arm.
      cell->hv = ArrayHV{};
      cell->ht = ArrayHT{ty_unit()};
      body.push_back(instr(IVal{std::move(refVal)}));
      body.push_back(instr(IFree{}));
    } else {
      repl.push_back(instr(IVal{std::move(refVal)}));
    }
    repl.push_back(instr(ILabel{arity, std::move(arrow), {}, std::move(body)}));
    splice(seq, nv - 1 - n, nv + 1, std::move(repl));
    return sig_did();
  }

  Sig rule_for(InstrSeq& seq, size_t nv, Ctx&, IExistsUnpack& node) {
    const Value* rv = peek(seq, nv, 1);
    const RefV* r = rv ? std::get_if<RefV>(&rv->v) : nullptr;
    if (!r) return wrong("exists.unpack", "a reference");
    Cell* cell = store.find(r->loc);
    if (!cell) return sig_stuck("exists.unpack through a dangling reference");
    PackHV* hv = std::get_if<PackHV>(&cell->hv);
    if (!hv || !hv->payload) return sig_stuck("exists.unpack on a cell that is not a package");
    size_t n = node.arrow.ins.size();
    if (nv < n + 1) return underflow("exists.unpack");
    bool consuming = is_lin(node.qual);
    name(consuming ? "exists.unpack-lin" : "exists.unpack-unr");

    Value payload = *hv->payload;
    Value refVal = *rv;
    PreType witness = hv->witness;
    uint32_t arity = uint32_t(node.arrow.outs.size());
    ArrowType arrow{node.arrow.outs, node.arrow.outs};
    InstrSeq body = to_vals(take(seq, nv - 1, n));
    body.push_back(instr(IVal{std::move(payload)}));
    InstrSeq substituted = subst_free0(node.body, Index{witness});
    for (Instr& i : substituted) body.push_back(std::move(i));

    InstrSeq repl;
    if (consuming) {
      cell->hv = ArrayHV{};
      cell->ht = ArrayHT{ty_unit()};
      body.push_back(instr(IVal{std::move(refVal)}));
      body.push_back(instr(IFree{}));
    } else {
      repl.push_back(instr(IVal{std::move(refVal)}));
    }
    repl.push_back(instr(ILabel{arity, std::move(arrow), {}, std::move(body)}));
    splice(seq, nv - 1 - n, nv + 1, std::move(repl));
    return sig_did();
  }

  Sig rule_for(InstrSeq&, size_t, Ctx&, ITrap&) {
    name("trap");
    return sig_trap("explicit trap");
  }

  // Labels and frames are handled structurally in reduce; reaching them here
  // means reduce chose them as a redex, which it never does.
  Sig rule_for(InstrSeq&, size_t, Ctx&, ILabel&) { return sig_stuck("label is not a redex"); }
  Sig rule_for(InstrSeq&, size_t, Ctx&, ILocalFrame&) {
    return sig_stuck("local frame is not a redex");
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points

StepOutcome step(Configuration& c, std::string* rule) {
  Machine m{c.store, rule};
  Ctx ctx;
  Sig s = m.reduce(c.program, ctx);
  switch (s.k) {
    case Sig::Did: return {StepKind::Stepped, {}, {}};
    case Sig::Values: {
      StepOutcome out{StepKind::Done, {}, {}};
      for (const Instr& i : c.program) out.results.push_back(std::get<IVal>(i.v).val);
      return out;
    }
    case Sig::Trap: return {StepKind::Trapped, {}, std::move(s.what)};
    case Sig::Br: return {StepKind::Stuck, {}, "branch escapes the configuration"};
    case Sig::Ret: return {StepKind::Stuck, {}, "return escapes the configuration"};
    case Sig::Stuck:
    default: return {StepKind::Stuck, {}, std::move(s.what)};
  }
}

namespace {

// Location mentions of a value, for rooting and reachability.
void scan_value(const Value& v, std::vector<Loc>& out) {
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, RefV> || std::is_same_v<T, PtrV> ||
                      std::is_same_v<T, OwnV>) {
          out.push_back(n.loc);
        } else if constexpr (std::is_same_v<T, CapV>) {
          out.push_back(n.loc);
        } else if constexpr (std::is_same_v<T, GroupV>) {
          for (const Value& e : n.elems) scan_value(e, out);
        } else if constexpr (std::is_same_v<T, FoldV>) {
          if (n.inner) scan_value(*n.inner, out);
        } else if constexpr (std::is_same_v<T, MempackV>) {
          out.push_back(n.loc);
          if (n.inner) scan_value(*n.inner, out);
        } else if constexpr (std::is_same_v<T, CoderefV>) {
          for (const Index& ix : n.indices)
            if (const auto* l = std::get_if<Loc>(&ix.v)) out.push_back(*l);
        }
      },
      v.v);
}

void scan_heap_value(const HeapValue& hv, std::vector<Loc>& out) {
  if (const auto* s = std::get_if<StructHV>(&hv)) {
    for (const Value& f : s->fields) scan_value(f, out);
  } else if (const auto* a = std::get_if<ArrayHV>(&hv)) {
    for (const Value& e : a->elems) scan_value(e, out);
  } else if (const auto* v = std::get_if<VariantHV>(&hv)) {
    if (v->payload) scan_value(*v->payload, out);
  } else if (const auto* p = std::get_if<PackHV>(&hv)) {
    if (p->payload) scan_value(*p->payload, out);
  }
}

// Every location a program can still get its hands on: values anywhere in
// the sequence (including nested bodies and frame locals) and instantiation
// indices of pending calls.
void scan_instrs(const InstrSeq& seq, std::vector<Loc>& out) {
  for (const Instr& in : seq) {
    std::visit(
        [&](const auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, IVal>) {
            scan_value(n.val, out);
          } else if constexpr (std::is_same_v<T, IBlock> || std::is_same_v<T, ILoop> ||
                               std::is_same_v<T, IMemunpack> || std::is_same_v<T, IExistsUnpack>) {
            scan_instrs(n.body, out);
          } else if constexpr (std::is_same_v<T, IIte>) {
            scan_instrs(n.thn, out);
            scan_instrs(n.els, out);
          } else if constexpr (std::is_same_v<T, IVariantCase>) {
            for (const InstrSeq& arm : n.arms) scan_instrs(arm, out);
          } else if constexpr (std::is_same_v<T, ILabel>) {
            scan_instrs(n.cont, out);
            scan_instrs(n.body, out);
          } else if constexpr (std::is_same_v<T, ILocalFrame>) {
            for (const LocalSlotV& sl : n.locals) scan_value(sl.val, out);
            scan_instrs(n.body, out);
          } else if constexpr (std::is_same_v<T, IMalloc>) {
            scan_heap_value(n.hv, out);
          } else if constexpr (std::is_same_v<T, ICall> || std::is_same_v<T, IInst> ||
                               std::is_same_v<T, ICallCl>) {
            for (const Index& ix : n.indices)
              if (const auto* l = std::get_if<Loc>(&ix.v)) out.push_back(*l);
          }
        },
        in.v);
  }
}

}  // namespace

size_t collect(Configuration& c) {
  std::vector<Loc> work;
  scan_instrs(c.program, work);
  for (const Instance& ins : c.store.instances)
    for (const Value& g : ins.globals) scan_value(g, work);

  std::set<uint64_t> liveUnr, seenLin;
  while (!work.empty()) {
    Loc l = work.back();
    work.pop_back();
    if (l.is_var()) continue;
    auto& seen = l.mem == Mem::Lin ? seenLin : liveUnr;
    if (!seen.insert(l.addr).second) continue;
    const Cell* cell = c.store.find(l);
    if (cell) scan_heap_value(cell->hv, work);
  }

  std::vector<uint64_t> deadUnr;
  for (const auto& [a, cell] : c.store.unr)
    if (!liveUnr.count(a)) deadUnr.push_back(a);

  // Linear cells rooted (transitively) by dead unrestricted cells belong to
  // the collector and go with them.
  std::set<uint64_t> deadLin;
  std::vector<Loc> cascade;
  for (uint64_t a : deadUnr) scan_heap_value(c.store.unr.at(a).hv, cascade);
  while (!cascade.empty()) {
    Loc l = cascade.back();
    cascade.pop_back();
    if (l.is_var() || l.mem != Mem::Lin) continue;
    if (!deadLin.insert(l.addr).second) continue;
    auto it = c.store.lin.find(l.addr);
    if (it != c.store.lin.end()) scan_heap_value(it->second.hv, cascade);
  }

  size_t removed = 0;
  for (uint64_t a : deadUnr) removed += c.store.unr.erase(a);
  for (uint64_t a : deadLin) removed += c.store.lin.erase(a);
  return removed;
}

RunResult run(Configuration& c, const RunOptions& opts) {
  RunResult out;
  std::string rule;
  for (;;) {
    if (out.steps >= opts.fuel) {
      out.collected += collect(c);
      out.kind = RunKind::OutOfFuel;
      return out;
    }
    StepOutcome so = step(c, opts.trace ? &rule : nullptr);
    switch (so.kind) {
      case StepKind::Stepped:
        ++out.steps;
        if (opts.trace) opts.trace->push_back(rule);
        if (opts.collectEvery && out.steps % opts.collectEvery == 0) out.collected += collect(c);
        break;
      case StepKind::Done:
        out.collected += collect(c);
        out.kind = RunKind::Done;
        out.results = std::move(so.results);
        return out;
      case StepKind::Trapped:
        out.collected += collect(c);
        out.kind = RunKind::Trapped;
        out.detail = std::move(so.detail);
        return out;
      case StepKind::Stuck:
        out.kind = RunKind::Stuck;
        out.detail = std::move(so.detail);
        return out;
    }
  }
}

// ---------------------------------------------------------------------------
// Instantiation

namespace {

struct ExportTable {
  std::map<std::string, Closure> funcs;
  std::map<std::string, std::pair<Value, GlobalType>> globals;
  std::map<std::string, std::vector<Closure>> tables;
};

std::string resolve_name(const std::map<std::string, std::string>& linkMap,
                         const std::string& importName) {
  auto it = linkMap.find(importName);
  return it == linkMap.end() ? importName : it->second;
}

}  // namespace

std::optional<Store> instantiate(const std::vector<RWModule>& modules,
                                 const std::map<std::string, std::string>& linkMap,
                                 DiagnosticList& diags) {
  Store store;
  ExportTable exports;
  bool ok = true;

  for (size_t k = 0; k < modules.size(); ++k) {
    const RWModule& m = modules[k];
    uint32_t self = uint32_t(store.instances.size());
    Instance ins;

    for (const FuncDef& f : m.funcs) {
      if (f.importName) {
        std::string target = resolve_name(linkMap, *f.importName);
        auto it = exports.funcs.find(target);
        if (it == exports.funcs.end()) {
          diags.error("LNK001",
                      "module '" + m.name + "' imports function '" + *f.importName +
                          "', which no linked module exports" +
                          (target != *f.importName ? " (resolved to '" + target + "')" : ""));
          ok = false;
          ins.funcs.push_back(Closure{});
          continue;
        }
        const FunType& provided = it->second.code->type;
        if (!(provided == f.type)) {
          diags.error("LNK002",
                      "module '" + m.name + "' imports function '" + *f.importName + "' as " +
                          show_funtype(f.type) + " but the export provides " +
                          show_funtype(provided));
          ok = false;
        }
        ins.funcs.push_back(it->second);
      } else {
        ins.funcs.push_back(Closure{self, std::make_shared<FuncDef>(f)});
      }
    }

    if (m.table.importName) {
      std::string target = resolve_name(linkMap, *m.table.importName);
      auto it = exports.tables.find(target);
      if (it == exports.tables.end()) {
        diags.error("LNK001", "module '" + m.name + "' imports table '" + *m.table.importName +
                                  "', which no linked module exports");
        ok = false;
      } else {
        ins.table = it->second;
      }
    } else {
      for (uint32_t idx : m.table.entries) {
        if (idx < ins.funcs.size()) ins.table.push_back(ins.funcs[idx]);
      }
    }

    store.instances.push_back(std::move(ins));

    for (const GlobalDef& g : m.globals) {
      store.instances[self].globalTypes.push_back({g.mut, g.pre});
      if (g.importName) {
        std::string target = resolve_name(linkMap, *g.importName);
        auto it = exports.globals.find(target);
        if (it == exports.globals.end()) {
          diags.error("LNK001", "module '" + m.name + "' imports global '" + *g.importName +
                                    "', which no linked module exports");
          ok = false;
          store.instances[self].globals.push_back(v_unit());
          continue;
        }
        if (!(it->second.second == GlobalType{g.mut, g.pre})) {
          diags.error("LNK002", "module '" + m.name + "' imports global '" + *g.importName +
                                    "' at a type the export does not provide");
          ok = false;
        }
        store.instances[self].globals.push_back(it->second.first);
        continue;
      }
      // Evaluate the initializer inside the instance under construction;
      // earlier globals of this module are already in place.
      Configuration cfg{std::move(store),
                        {instr(ILocalFrame{1, self, {}, g.init, {ty_unr(g.pre)}})}};
      RunResult r = run(cfg, RunOptions{1'000'000, 0, nullptr});
      store = std::move(cfg.store);
      if (r.kind != RunKind::Done || r.results.size() != 1) {
        diags.error("LNK003",
                    "global initializer in module '" + m.name + "' did not produce a value (" +
                        (r.kind == RunKind::Trapped     ? "trapped: " + r.detail
                         : r.kind == RunKind::OutOfFuel ? std::string("ran out of fuel")
                         : r.kind == RunKind::Stuck     ? "stuck: " + r.detail
                                                        : std::string("wrong result count")) +
                        ")");
        ok = false;
        store.instances[self].globals.push_back(v_unit());
      } else {
        store.instances[self].globals.push_back(std::move(r.results[0]));
      }
    }

    const Instance& done = store.instances[self];
    for (size_t i = 0; i < m.funcs.size(); ++i)
      for (const std::string& e : m.funcs[i].exports) exports.funcs[e] = done.funcs[i];
    for (size_t i = 0; i < m.globals.size(); ++i)
      for (const std::string& e : m.globals[i].exports)
        exports.globals[e] = {done.globals[i], done.globalTypes[i]};
    for (const std::string& e : m.table.exports) exports.tables[e] = done.table;
  }

  if (!ok) return std::nullopt;
  return store;
}

}  // namespace rw

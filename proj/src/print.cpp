#include <sstream>

#include "rw/syntax.hpp"

namespace rw {

std::optional<NumType> numtype_from_symbol(std::string_view s) {
  if (s == "i32") return NumType::I32;
  if (s == "i64") return NumType::I64;
  if (s == "u32") return NumType::UI32;
  if (s == "u64") return NumType::UI64;
  if (s == "f32") return NumType::F32;
  if (s == "f64") return NumType::F64;
  return std::nullopt;
}

std::string show_numtype(NumType t) {
  switch (t) {
    case NumType::I32: return "i32";
    case NumType::I64: return "i64";
    case NumType::UI32: return "u32";
    case NumType::UI64: return "u64";
    case NumType::F32: return "f32";
    case NumType::F64: return "f64";
  }
  return "?";
}

namespace {

const char* op_name(NumOp op) {
  switch (op) {
    case NumOp::Clz: return "clz";
    case NumOp::Ctz: return "ctz";
    case NumOp::Popcnt: return "popcnt";
    case NumOp::Add: return "add";
    case NumOp::Sub: return "sub";
    case NumOp::Mul: return "mul";
    case NumOp::Div: return "div";
    case NumOp::Rem: return "rem";
    case NumOp::And: return "and";
    case NumOp::Or: return "or";
    case NumOp::Xor: return "xor";
    case NumOp::Shl: return "shl";
    case NumOp::Shr: return "shr";
    case NumOp::Rotl: return "rotl";
    case NumOp::Rotr: return "rotr";
    case NumOp::Eqz: return "eqz";
    case NumOp::Eq: return "eq";
    case NumOp::Ne: return "ne";
    case NumOp::Lt: return "lt";
    case NumOp::Gt: return "gt";
    case NumOp::Le: return "le";
    case NumOp::Ge: return "ge";
    case NumOp::Abs: return "abs";
    case NumOp::Neg: return "neg";
    case NumOp::Sqrt: return "sqrt";
    case NumOp::Ceil: return "ceil";
    case NumOp::Floor: return "floor";
    case NumOp::Trunc: return "trunc";
    case NumOp::Nearest: return "nearest";
    case NumOp::Min: return "min";
    case NumOp::Max: return "max";
    case NumOp::Copysign: return "copysign";
  }
  return "?";
}

const char* cvt_name(CvtOp op) {
  switch (op) {
    case CvtOp::Wrap: return "wrap";
    case CvtOp::Extend: return "extend";
    case CvtOp::TruncSat: return "trunc_sat";
    case CvtOp::Convert: return "convert";
    case CvtOp::Demote: return "demote";
    case CvtOp::Promote: return "promote";
    case CvtOp::Reinterpret: return "reinterpret";
  }
  return "?";
}

std::string num_lit(NumType nt, uint64_t bits) {
  std::ostringstream o;
  switch (nt) {
    case NumType::I32: o << "(i32.const " << (int32_t)(uint32_t)bits << ")"; break;
    case NumType::I64: o << "(i64.const " << (int64_t)bits << ")"; break;
    case NumType::UI32: o << "(u32.const " << (uint32_t)bits << ")"; break;
    case NumType::UI64: o << "(u64.const " << bits << ")"; break;
    case NumType::F32: o << "(f32.bits " << (uint32_t)bits << ")"; break;
    case NumType::F64: o << "(f64.bits " << bits << ")"; break;
  }
  return o.str();
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  out += '"';
  return out;
}

std::string spaces(int n) { return std::string((size_t)n, ' '); }

constexpr char kKindLetter[4] = {'l', 's', 'q', 'a'};  // loc, size, qual, type

struct Printer {
  std::vector<std::string> names[4];
  uint32_t counter[4] = {0, 0, 0, 0};

  std::string fresh(int k) {
    std::string n = "$";
    n += kKindLetter[k];
    n += std::to_string(counter[k]++);
    names[k].push_back(n);
    return n;
  }

  void pop(int k) { names[k].pop_back(); }

  std::string var(int k, uint32_t idx) {
    const auto& s = names[k];
    if (idx < s.size()) return s[s.size() - 1 - idx];
    // out of scope: print a marker the reader will reject
    std::string n = "$";
    n += kKindLetter[k];
    n += '!';
    n += std::to_string(idx);
    return n;
  }

  std::string pq(const Qual& q) {
    switch (q.kind) {
      case Qual::Kind::Unr: return "unr";
      case Qual::Kind::Lin: return "lin";
      case Qual::Kind::Var: return var(2, q.index);
    }
    return "?";
  }

  std::string ps(const Size& s) {
    switch (s.kind) {
      case Size::Kind::Const: return std::to_string(s.bits);
      case Size::Kind::Var: return var(1, s.index);
      case Size::Kind::Plus: return "(+ " + ps(*s.lhs) + " " + ps(*s.rhs) + ")";
    }
    return "?";
  }

  std::string pl(const Loc& l) {
    if (l.is_var()) return var(0, l.index);
    return std::string("(at ") + (l.mem == Mem::Lin ? "lin " : "unr ") +
           std::to_string(l.addr) + ")";
  }

  std::string ppriv(Privilege p) { return p == Privilege::RW ? "rw" : "r"; }

  std::string ptype(const Type& t) { return "(" + ppre(t.pre) + " " + pq(t.qual) + ")"; }

  std::string ptypes(const std::vector<Type>& ts) {
    std::string out = "(";
    for (size_t i = 0; i < ts.size(); ++i) {
      if (i) out += " ";
      out += ptype(ts[i]);
    }
    return out + ")";
  }

  std::string ppre(const PreType& p) {
    return std::visit(
        [&](const auto& n) -> std::string {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, UnitT>) {
            return "unit";
          } else if constexpr (std::is_same_v<T, NumT>) {
            return show_numtype(n.nt);
          } else if constexpr (std::is_same_v<T, VarT>) {
            return var(3, n.index);
          } else if constexpr (std::is_same_v<T, ProdT>) {
            std::string out = "(prod";
            for (auto& c : n.components) out += " " + ptype(c);
            return out + ")";
          } else if constexpr (std::is_same_v<T, RefT>) {
            return "(ref " + ppriv(n.priv) + " " + pl(n.loc) + " " + pheap(n.heap) + ")";
          } else if constexpr (std::is_same_v<T, PtrT>) {
            return "(ptr " + pl(n.loc) + ")";
          } else if constexpr (std::is_same_v<T, CapT>) {
            return "(cap " + ppriv(n.priv) + " " + pl(n.loc) + " " + pheap(n.heap) + ")";
          } else if constexpr (std::is_same_v<T, OwnT>) {
            return "(own " + pl(n.loc) + ")";
          } else if constexpr (std::is_same_v<T, RecT>) {
            std::string q = pq(n.qualBound);
            std::string name = fresh(3);
            std::string body = ptype(n.body);
            pop(3);
            return "(rec " + q + " " + name + " " + body + ")";
          } else if constexpr (std::is_same_v<T, ExLocT>) {
            std::string name = fresh(0);
            std::string body = ptype(n.body);
            pop(0);
            return "(exloc " + name + " " + body + ")";
          } else {
            static_assert(std::is_same_v<T, CodeRefT>);
            return "(coderef " + pfun(n.fn) + ")";
          }
        },
        p->v);
  }

  std::string pheap(const HeapType& h) {
    return std::visit(
        [&](const auto& n) -> std::string {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, VariantHT>) {
            std::string out = "(variant";
            for (auto& c : n.cases) out += " " + ptype(c);
            return out + ")";
          } else if constexpr (std::is_same_v<T, StructHT>) {
            std::string out = "(struct";
            for (auto& f : n.fields) out += " (" + ptype(f.ty) + " " + ps(f.size) + ")";
            return out + ")";
          } else if constexpr (std::is_same_v<T, ArrayHT>) {
            return "(array " + ptype(n.elem) + ")";
          } else {
            static_assert(std::is_same_v<T, ExHT>);
            std::string q = pq(n.qualLower);
            std::string s = ps(n.sizeBound);
            std::string name = fresh(3);
            std::string body = ptype(n.body);
            pop(3);
            return "(ex " + q + " " + s + " " + name + " " + body + ")";
          }
        },
        h);
  }

  // Quantifier names stay pushed when keepPushed is given, so a function
  // body can refer to them; the caller pops.
  std::string pfun(const FunType& f, int* keepPushed = nullptr) {
    std::string out = "(fn";
    int pushed[4] = {0, 0, 0, 0};
    for (const auto& qt : f.quants) {
      out += " ";
      if (std::holds_alternative<LocQ>(qt)) {
        out += "(loc " + fresh(0) + ")";
        ++pushed[0];
      } else if (const auto* sq = std::get_if<SizeQ>(&qt)) {
        std::string lo = "(", up = "(";
        for (size_t i = 0; i < sq->lowers.size(); ++i) lo += (i ? " " : "") + ps(sq->lowers[i]);
        for (size_t i = 0; i < sq->uppers.size(); ++i) up += (i ? " " : "") + ps(sq->uppers[i]);
        out += "(size " + fresh(1) + " " + lo + ") " + up + "))";
        ++pushed[1];
      } else if (const auto* qq = std::get_if<QualQ>(&qt)) {
        std::string lo = "(", up = "(";
        for (size_t i = 0; i < qq->lowers.size(); ++i) lo += (i ? " " : "") + pq(qq->lowers[i]);
        for (size_t i = 0; i < qq->uppers.size(); ++i) up += (i ? " " : "") + pq(qq->uppers[i]);
        out += "(qual " + fresh(2) + " " + lo + ") " + up + "))";
        ++pushed[2];
      } else {
        const auto& tq = std::get<TypeQ>(qt);
        std::string q = pq(tq.qualLower);
        std::string s = ps(tq.sizeUpper);
        out += "(type " + fresh(3) + " " + q + " " + s + (tq.mayHaveCaps ? " caps)" : ")");
        ++pushed[3];
      }
    }
    out += " " + ptypes(f.ins) + " -> " + ptypes(f.outs) + ")";
    if (keepPushed)
      for (int k = 0; k < 4; ++k) keepPushed[k] = pushed[k];
    else
      for (int k = 0; k < 4; ++k)
        for (int i = 0; i < pushed[k]; ++i) pop(k);
    return out;
  }

  std::string parrow(const ArrowType& a) {
    return "(" + ptypes(a.ins) + " -> " + ptypes(a.outs) + ")";
  }

  std::string peffect(const LocalEffect& e) {
    std::string out = "(effect";
    for (auto& [n, t] : e.entries) out += " (" + std::to_string(n) + " " + ptype(t) + ")";
    return out + ")";
  }

  std::string pindex(const Index& ix) {
    return std::visit(
        [&](const auto& n) -> std::string {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, Loc>) return "(loc " + pl(n) + ")";
          else if constexpr (std::is_same_v<T, Size>) return "(size " + ps(n) + ")";
          else if constexpr (std::is_same_v<T, Qual>) return "(qual " + pq(n) + ")";
          else return "(type " + ppre(n) + ")";
        },
        ix.v);
  }

  std::string pval(const Value& v) {
    std::string core = std::visit(
        [&](const auto& n) -> std::string {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, UnitV>) {
            return "unit";
          } else if constexpr (std::is_same_v<T, NumV>) {
            return num_lit(n.nt, n.bits);
          } else if constexpr (std::is_same_v<T, GroupV>) {
            std::string out = "(group";
            for (auto& e : n.elems) out += " " + pval(e);
            return out + ")";
          } else if constexpr (std::is_same_v<T, RefV>) {
            return "(ref " + (n.priv == Privilege::R ? std::string("r ") : std::string()) +
                   pl(n.loc) + ")";
          } else if constexpr (std::is_same_v<T, PtrV>) {
            return "(ptr " + pl(n.loc) + ")";
          } else if constexpr (std::is_same_v<T, CapV>) {
            return "(cap " + ppriv(n.priv) + " " + pl(n.loc) + " " + pheap(n.heap) + ")";
          } else if constexpr (std::is_same_v<T, OwnV>) {
            return "(own " + pl(n.loc) + ")";
          } else if constexpr (std::is_same_v<T, FoldV>) {
            return "(fold " + ppre(n.rec) + " " + pval(*n.inner) + ")";
          } else if constexpr (std::is_same_v<T, MempackV>) {
            return "(mempack " + pl(n.loc) + " " + pval(*n.inner) + ")";
          } else {
            static_assert(std::is_same_v<T, CoderefV>);
            std::string out =
                "(coderef " + std::to_string(n.inst) + " " + std::to_string(n.tab);
            for (auto& ix : n.indices) out += " " + pindex(ix);
            return out + ")";
          }
        },
        v.v);
    if (v.qualHint) return "(as " + pq(*v.qualHint) + " " + core + ")";
    return core;
  }

  std::string pseq(const InstrSeq& s, int ind) {
    std::string out;
    for (auto& i : s) out += "\n" + spaces(ind) + pinstr(i, ind);
    return out;
  }

  std::string pinstr(const Instr& in, int ind) {
    return std::visit(
        [&](const auto& n) -> std::string {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, IVal>) {
            const Value& v = n.val;
            if (!v.qualHint) {
              if (std::holds_alternative<UnitV>(v.v)) return "(unit.const)";
              if (const auto* nv = std::get_if<NumV>(&v.v)) return num_lit(nv->nt, nv->bits);
            }
            return "(value " + pval(v) + ")";  // trace form, not re-readable
          } else if constexpr (std::is_same_v<T, INum>) {
            return show_numtype(n.nt) + "." + op_name(n.op);
          } else if constexpr (std::is_same_v<T, ICvt>) {
            return std::string("(cvt ") + show_numtype(n.to) + " " + cvt_name(n.op) + " " +
                   show_numtype(n.from) + ")";
          } else if constexpr (std::is_same_v<T, IUnreachable>) {
            return "unreachable";
          } else if constexpr (std::is_same_v<T, INop>) {
            return "nop";
          } else if constexpr (std::is_same_v<T, IDrop>) {
            return "drop";
          } else if constexpr (std::is_same_v<T, ISelect>) {
            return "select";
          } else if constexpr (std::is_same_v<T, IBlock>) {
            return "(block " + parrow(n.arrow) + " " + peffect(n.effect) +
                   pseq(n.body, ind + 2) + ")";
          } else if constexpr (std::is_same_v<T, ILoop>) {
            return "(loop " + parrow(n.arrow) + pseq(n.body, ind + 2) + ")";
          } else if constexpr (std::is_same_v<T, IIte>) {
            return "(if " + parrow(n.arrow) + " " + peffect(n.effect) + "\n" +
                   spaces(ind + 2) + "(then" + pseq(n.thn, ind + 4) + ")\n" +
                   spaces(ind + 2) + "(else" + pseq(n.els, ind + 4) + "))";
          } else if constexpr (std::is_same_v<T, IBr>) {
            return "(br " + std::to_string(n.depth) + ")";
          } else if constexpr (std::is_same_v<T, IBrIf>) {
            return "(br_if " + std::to_string(n.depth) + ")";
          } else if constexpr (std::is_same_v<T, IBrTable>) {
            std::string out = "(br_table (";
            for (size_t i = 0; i < n.targets.size(); ++i)
              out += (i ? " " : "") + std::to_string(n.targets[i]);
            return out + ") " + std::to_string(n.dflt) + ")";
          } else if constexpr (std::is_same_v<T, IReturn>) {
            return "return";
          } else if constexpr (std::is_same_v<T, IGetLocal>) {
            return "(get_local " + std::to_string(n.idx) + " " + pq(n.qual) + ")";
          } else if constexpr (std::is_same_v<T, ISetLocal>) {
            return "(set_local " + std::to_string(n.idx) + ")";
          } else if constexpr (std::is_same_v<T, ITeeLocal>) {
            return "(tee_local " + std::to_string(n.idx) + ")";
          } else if constexpr (std::is_same_v<T, IGetGlobal>) {
            return "(get_global " + std::to_string(n.idx) + ")";
          } else if constexpr (std::is_same_v<T, ISetGlobal>) {
            return "(set_global " + std::to_string(n.idx) + ")";
          } else if constexpr (std::is_same_v<T, IQualify>) {
            return "(qualify " + pq(n.qual) + ")";
          } else if constexpr (std::is_same_v<T, ICodeRef>) {
            return "(coderef " + std::to_string(n.tableIdx) + ")";
          } else if constexpr (std::is_same_v<T, IInst>) {
            std::string out = "(inst";
            for (auto& ix : n.indices) out += " " + pindex(ix);
            return out + ")";
          } else if constexpr (std::is_same_v<T, ICallIndirect>) {
            return "call_indirect";
          } else if constexpr (std::is_same_v<T, ICall>) {
            std::string out = "(call " + std::to_string(n.fn);
            for (auto& ix : n.indices) out += " " + pindex(ix);
            return out + ")";
          } else if constexpr (std::is_same_v<T, IRecFold>) {
            return "(rec.fold " + ppre(n.rec) + ")";
          } else if constexpr (std::is_same_v<T, IRecUnfold>) {
            return "rec.unfold";
          } else if constexpr (std::is_same_v<T, IMempack>) {
            return "(mempack " + pl(n.loc) + ")";
          } else if constexpr (std::is_same_v<T, IMemunpack>) {
            std::string head = "(memunpack " + parrow(n.arrow) + " " + peffect(n.effect);
            std::string name = fresh(0);
            std::string body = pseq(n.body, ind + 2);
            pop(0);
            return head + " " + name + body + ")";
          } else if constexpr (std::is_same_v<T, IGroup>) {
            return "(group " + std::to_string(n.n) + " " + pq(n.qual) + ")";
          } else if constexpr (std::is_same_v<T, IUngroup>) {
            return "ungroup";
          } else if constexpr (std::is_same_v<T, ICapSplit>) {
            return "cap.split";
          } else if constexpr (std::is_same_v<T, ICapJoin>) {
            return "cap.join";
          } else if constexpr (std::is_same_v<T, IRefDemote>) {
            return "ref.demote";
          } else if constexpr (std::is_same_v<T, IRefSplit>) {
            return "ref.split";
          } else if constexpr (std::is_same_v<T, IRefJoin>) {
            return "ref.join";
          } else if constexpr (std::is_same_v<T, IStructMalloc>) {
            std::string out = "(struct.malloc (sizes";
            for (auto& s : n.sizes) out += " " + ps(s);
            return out + ") " + pq(n.qual) + ")";
          } else if constexpr (std::is_same_v<T, IStructFree>) {
            return "struct.free";
          } else if constexpr (std::is_same_v<T, IStructGet>) {
            return "(struct.get " + std::to_string(n.idx) + ")";
          } else if constexpr (std::is_same_v<T, IStructSet>) {
            return "(struct.set " + std::to_string(n.idx) + ")";
          } else if constexpr (std::is_same_v<T, IStructSwap>) {
            return "(struct.swap " + std::to_string(n.idx) + ")";
          } else if constexpr (std::is_same_v<T, IVariantMalloc>) {
            std::string out = "(variant.malloc " + std::to_string(n.tag) + " (cases";
            for (auto& c : n.cases) out += " " + ptype(c);
            return out + ") " + pq(n.qual) + ")";
          } else if constexpr (std::is_same_v<T, IVariantCase>) {
            std::string out = "(variant.case " + pq(n.qual) + " " + pheap(n.ht) + " " +
                              parrow(n.arrow) + " " + peffect(n.effect);
            for (auto& arm : n.arms)
              out += "\n" + spaces(ind + 2) + "(arm" + pseq(arm, ind + 4) + ")";
            return out + ")";
          } else if constexpr (std::is_same_v<T, IArrayMalloc>) {
            return "(array.malloc " + pq(n.qual) + ")";
          } else if constexpr (std::is_same_v<T, IArrayGet>) {
            return "array.get";
          } else if constexpr (std::is_same_v<T, IArraySet>) {
            return "array.set";
          } else if constexpr (std::is_same_v<T, IArrayFree>) {
            return "array.free";
          } else if constexpr (std::is_same_v<T, IExistsPack>) {
            return "(exists.pack " + ppre(n.witness) + " " + pheap(n.ht) + " " + pq(n.qual) +
                   ")";
          } else if constexpr (std::is_same_v<T, IExistsUnpack>) {
            std::string head = "(exists.unpack " + pq(n.qual) + " " + pheap(n.ht) + " " +
                               parrow(n.arrow) + " " + peffect(n.effect);
            std::string name = fresh(3);
            std::string body = pseq(n.body, ind + 2);
            pop(3);
            return head + " " + name + body + ")";
          } else if constexpr (std::is_same_v<T, ITrap>) {
            return "trap";
          } else if constexpr (std::is_same_v<T, ICallCl>) {
            std::string out = "(call_cl " + std::to_string(n.inst);
            for (auto& ix : n.indices) out += " " + pindex(ix);
            return out + ")";
          } else if constexpr (std::is_same_v<T, ILabel>) {
            return "(label " + std::to_string(n.arity) + " " + parrow(n.arrow) + " (cont" +
                   pseq(n.cont, ind + 2) + ")" + pseq(n.body, ind + 2) + ")";
          } else if constexpr (std::is_same_v<T, ILocalFrame>) {
            std::string out =
                "(frame " + std::to_string(n.arity) + " " + std::to_string(n.inst) + " (locals";
            for (auto& sl : n.locals)
              out += " (" + pval(sl.val) + " " + std::to_string(sl.sizeBits) + ")";
            return out + ")" + pseq(n.body, ind + 2) + ")";
          } else if constexpr (std::is_same_v<T, IMalloc>) {
            return "(malloc " + std::to_string(n.bits) +
                   (n.mem == Mem::Lin ? " lin)" : " unr)");
          } else {
            static_assert(std::is_same_v<T, IFree>);
            return "free";
          }
        },
        in.v);
  }

  std::string headers(const std::vector<std::string>& exports,
                      const std::optional<std::string>& importName) {
    std::string out;
    for (auto& e : exports) out += " (export " + quoted(e) + ")";
    if (importName) out += " (import " + quoted(*importName) + ")";
    return out;
  }

  std::string pfunc(const FuncDef& f) {
    int quantNames[4] = {0, 0, 0, 0};
    std::string out = "(func" + headers(f.exports, f.importName) + " " + pfun(f.type, quantNames);
    if (!f.importName) {
      out += "\n" + spaces(4) + "(locals";
      for (auto& s : f.localSizes) out += " " + ps(s);
      out += ")\n" + spaces(4) + "(body" + pseq(f.body, 6) + "))";
    } else {
      out += ")";
    }
    for (int k = 0; k < 4; ++k)
      for (int i = 0; i < quantNames[k]; ++i) pop(k);
    return out;
  }

  std::string pglobal(const GlobalDef& g) {
    std::string out = "(global" + headers(g.exports, g.importName) + " ";
    out += g.mut ? "(mut " + ppre(g.pre) + ")" : ppre(g.pre);
    if (g.importName) return out + ")";
    return out + " (init" + pseq(g.init, 4) + "))";
  }

  std::string ptable(const TableDef& t) {
    std::string out = "(table" + headers(t.exports, t.importName);
    for (uint32_t e : t.entries) out += " " + std::to_string(e);
    return out + ")";
  }
};

}  // namespace

std::string print_module(const RWModule& m) {
  Printer p;
  std::string out = "(module";
  if (!m.name.empty()) out += " $" + m.name;
  for (auto& g : m.globals) out += "\n" + spaces(2) + p.pglobal(g);
  for (auto& f : m.funcs) out += "\n" + spaces(2) + p.pfunc(f);
  const TableDef& t = m.table;
  if (!t.exports.empty() || t.importName || !t.entries.empty())
    out += "\n" + spaces(2) + p.ptable(t);
  return out + ")\n";
}

std::string show_qual(const Qual& q) { return Printer{}.pq(q); }
std::string show_size(const Size& s) { return Printer{}.ps(s); }
std::string show_loc(const Loc& l) { return Printer{}.pl(l); }
std::string show_type(const Type& t) { return Printer{}.ptype(t); }
std::string show_pretype(const PreType& p) { return Printer{}.ppre(p); }
std::string show_heaptype(const HeapType& h) { return Printer{}.pheap(h); }
std::string show_funtype(const FunType& f) { return Printer{}.pfun(f); }
std::string show_value(const Value& v) { return Printer{}.pval(v); }

std::string instr_name(const Instr& i) {
  return std::visit(
      [](const auto& n) -> std::string {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, IVal>) return "const";
        else if constexpr (std::is_same_v<T, INum>) return show_numtype(n.nt) + "." + op_name(n.op);
        else if constexpr (std::is_same_v<T, ICvt>) return "cvt";
        else if constexpr (std::is_same_v<T, IUnreachable>) return "unreachable";
        else if constexpr (std::is_same_v<T, INop>) return "nop";
        else if constexpr (std::is_same_v<T, IDrop>) return "drop";
        else if constexpr (std::is_same_v<T, ISelect>) return "select";
        else if constexpr (std::is_same_v<T, IBlock>) return "block";
        else if constexpr (std::is_same_v<T, ILoop>) return "loop";
        else if constexpr (std::is_same_v<T, IIte>) return "if";
        else if constexpr (std::is_same_v<T, IBr>) return "br";
        else if constexpr (std::is_same_v<T, IBrIf>) return "br_if";
        else if constexpr (std::is_same_v<T, IBrTable>) return "br_table";
        else if constexpr (std::is_same_v<T, IReturn>) return "return";
        else if constexpr (std::is_same_v<T, IGetLocal>) return "get_local";
        else if constexpr (std::is_same_v<T, ISetLocal>) return "set_local";
        else if constexpr (std::is_same_v<T, ITeeLocal>) return "tee_local";
        else if constexpr (std::is_same_v<T, IGetGlobal>) return "get_global";
        else if constexpr (std::is_same_v<T, ISetGlobal>) return "set_global";
        else if constexpr (std::is_same_v<T, IQualify>) return "qualify";
        else if constexpr (std::is_same_v<T, ICodeRef>) return "coderef";
        else if constexpr (std::is_same_v<T, IInst>) return "inst";
        else if constexpr (std::is_same_v<T, ICallIndirect>) return "call_indirect";
        else if constexpr (std::is_same_v<T, ICall>) return "call";
        else if constexpr (std::is_same_v<T, IRecFold>) return "rec.fold";
        else if constexpr (std::is_same_v<T, IRecUnfold>) return "rec.unfold";
        else if constexpr (std::is_same_v<T, IMempack>) return "mempack";
        else if constexpr (std::is_same_v<T, IMemunpack>) return "memunpack";
        else if constexpr (std::is_same_v<T, IGroup>) return "group";
        else if constexpr (std::is_same_v<T, IUngroup>) return "ungroup";
        else if constexpr (std::is_same_v<T, ICapSplit>) return "cap.split";
        else if constexpr (std::is_same_v<T, ICapJoin>) return "cap.join";
        else if constexpr (std::is_same_v<T, IRefDemote>) return "ref.demote";
        else if constexpr (std::is_same_v<T, IRefSplit>) return "ref.split";
        else if constexpr (std::is_same_v<T, IRefJoin>) return "ref.join";
        else if constexpr (std::is_same_v<T, IStructMalloc>) return "struct.malloc";
        else if constexpr (std::is_same_v<T, IStructFree>) return "struct.free";
        else if constexpr (std::is_same_v<T, IStructGet>) return "struct.get";
        else if constexpr (std::is_same_v<T, IStructSet>) return "struct.set";
        else if constexpr (std::is_same_v<T, IStructSwap>) return "struct.swap";
        else if constexpr (std::is_same_v<T, IVariantMalloc>) return "variant.malloc";
        else if constexpr (std::is_same_v<T, IVariantCase>) return "variant.case";
        else if constexpr (std::is_same_v<T, IArrayMalloc>) return "array.malloc";
        else if constexpr (std::is_same_v<T, IArrayGet>) return "array.get";
        else if constexpr (std::is_same_v<T, IArraySet>) return "array.set";
        else if constexpr (std::is_same_v<T, IArrayFree>) return "array.free";
        else if constexpr (std::is_same_v<T, IExistsPack>) return "exists.pack";
        else if constexpr (std::is_same_v<T, IExistsUnpack>) return "exists.unpack";
        else if constexpr (std::is_same_v<T, ITrap>) return "trap";
        else if constexpr (std::is_same_v<T, ICallCl>) return "call_cl";
        else if constexpr (std::is_same_v<T, ILabel>) return "label";
        else if constexpr (std::is_same_v<T, ILocalFrame>) return "frame";
        else if constexpr (std::is_same_v<T, IMalloc>) return "malloc";
        else return "free";
      },
      i.v);
}

}  // namespace rw

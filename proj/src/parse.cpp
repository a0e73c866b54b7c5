#include <cerrno>
#include <cstdlib>
#include <cstring>

#include "rw/subst.hpp"
#include "rw/syntax.hpp"

namespace rw {

namespace {

struct ParseError {};

struct OpInfo {
  const char* name;
  NumOp op;
  bool ints, floats;
};

constexpr OpInfo kOps[] = {
    {"clz", NumOp::Clz, true, false},       {"ctz", NumOp::Ctz, true, false},
    {"popcnt", NumOp::Popcnt, true, false}, {"add", NumOp::Add, true, true},
    {"sub", NumOp::Sub, true, true},        {"mul", NumOp::Mul, true, true},
    {"div", NumOp::Div, true, true},        {"rem", NumOp::Rem, true, false},
    {"and", NumOp::And, true, false},       {"or", NumOp::Or, true, false},
    {"xor", NumOp::Xor, true, false},       {"shl", NumOp::Shl, true, false},
    {"shr", NumOp::Shr, true, false},       {"rotl", NumOp::Rotl, true, false},
    {"rotr", NumOp::Rotr, true, false},     {"eqz", NumOp::Eqz, true, false},
    {"eq", NumOp::Eq, true, true},          {"ne", NumOp::Ne, true, true},
    {"lt", NumOp::Lt, true, true},          {"gt", NumOp::Gt, true, true},
    {"le", NumOp::Le, true, true},          {"ge", NumOp::Ge, true, true},
    {"abs", NumOp::Abs, false, true},       {"neg", NumOp::Neg, false, true},
    {"sqrt", NumOp::Sqrt, false, true},     {"ceil", NumOp::Ceil, false, true},
    {"floor", NumOp::Floor, false, true},   {"trunc", NumOp::Trunc, false, true},
    {"nearest", NumOp::Nearest, false, true}, {"min", NumOp::Min, false, true},
    {"max", NumOp::Max, false, true},       {"copysign", NumOp::Copysign, false, true},
};

std::optional<CvtOp> cvtop_of(std::string_view s) {
  if (s == "wrap") return CvtOp::Wrap;
  if (s == "extend") return CvtOp::Extend;
  if (s == "trunc_sat") return CvtOp::TruncSat;
  if (s == "convert") return CvtOp::Convert;
  if (s == "demote") return CvtOp::Demote;
  if (s == "promote") return CvtOp::Promote;
  if (s == "reinterpret") return CvtOp::Reinterpret;
  return std::nullopt;
}

struct Parser {
  DiagnosticList& diags;
  std::vector<std::string> names[4];

  [[noreturn]] void fail(const SExpr& at, const char* code, std::string msg) {
    diags.error(code, std::move(msg), at.span);
    throw ParseError{};
  }

  void expect_len(const SExpr& e, size_t n, const char* what) {
    if (e.size() != n) fail(e, "PAR002", std::string("malformed ") + what);
  }

  // --- scopes -------------------------------------------------------------

  void push_name(VarKind k, std::string n) { names[(int)k].push_back(std::move(n)); }
  void pop_name(VarKind k) { names[(int)k].pop_back(); }

  uint32_t lookup(VarKind k, const SExpr& e) {
    const auto& s = names[(int)k];
    for (size_t i = 0; i < s.size(); ++i)
      if (s[s.size() - 1 - i] == e.text) return (uint32_t)i;
    fail(e, "PAR003", "unknown name '" + e.text + "'");
  }

  std::string binder(const SExpr& e) {
    if (!e.is_sym() || e.text.size() < 2 || e.text[0] != '$')
      fail(e, "PAR002", "expected a $name binder");
    return e.text;
  }

  // --- numbers ------------------------------------------------------------

  uint64_t parse_u64(const SExpr& e) {
    if (!e.is_num() || e.text[0] == '-') fail(e, "PAR002", "expected a non-negative number");
    errno = 0;
    char* end = nullptr;
    unsigned long long v = std::strtoull(e.text.c_str(), &end, 10);
    if (errno == ERANGE || end != e.text.c_str() + e.text.size())
      fail(e, "PAR002", "bad number '" + e.text + "'");
    return v;
  }

  uint32_t parse_u32(const SExpr& e) {
    uint64_t v = parse_u64(e);
    if (v > UINT32_MAX) fail(e, "PAR002", "number out of range");
    return (uint32_t)v;
  }

  uint64_t parse_int_bits(const SExpr& e, bool wide) {
    if (!e.is_num()) fail(e, "PAR002", "expected a number");
    errno = 0;
    char* end = nullptr;
    uint64_t bits;
    if (e.text[0] == '-') {
      long long s = std::strtoll(e.text.c_str(), &end, 10);
      bits = (uint64_t)s;
    } else {
      bits = std::strtoull(e.text.c_str(), &end, 10);
    }
    if (errno == ERANGE || end != e.text.c_str() + e.text.size())
      fail(e, "PAR002", "bad number '" + e.text + "'");
    return wide ? bits : (bits & 0xffffffffull);
  }

  double parse_float(const SExpr& e) {
    if (!e.is_num()) fail(e, "PAR002", "expected a number");
    errno = 0;
    char* end = nullptr;
    double d = std::strtod(e.text.c_str(), &end);
    if (end != e.text.c_str() + e.text.size()) fail(e, "PAR002", "bad number '" + e.text + "'");
    return d;
  }

  // --- qualifiers, sizes, locations ----------------------------------------

  Qual parse_qual(const SExpr& e) {
    if (e.is_sym("lin")) return Qual::lin();
    if (e.is_sym("unr")) return Qual::unr();
    if (e.is_sym() && e.text[0] == '$') return Qual::var(lookup(VarKind::Qual, e));
    fail(e, "PAR002", "expected a qualifier");
  }

  Size parse_size(const SExpr& e) {
    if (e.is_num()) return Size::constant(parse_u64(e));
    if (e.is_sym() && e.text[0] == '$') return Size::var(lookup(VarKind::Size, e));
    if (e.is_call("+")) {
      expect_len(e, 3, "size sum");
      return Size::plus(parse_size(e.items[1]), parse_size(e.items[2]));
    }
    fail(e, "PAR002", "expected a size");
  }

  Loc parse_loc(const SExpr& e) {
    if (e.is_sym() && e.text[0] == '$') return Loc::var(lookup(VarKind::Loc, e));
    if (e.is_call("at")) {
      expect_len(e, 3, "location");
      Mem m;
      if (e.items[1].is_sym("lin"))
        m = Mem::Lin;
      else if (e.items[1].is_sym("unr"))
        m = Mem::Unr;
      else
        fail(e.items[1], "PAR002", "expected lin or unr");
      return Loc::concrete(parse_u64(e.items[2]), m);
    }
    fail(e, "PAR002", "expected a location");
  }

  Privilege parse_priv(const SExpr& e) {
    if (e.is_sym("r")) return Privilege::R;
    if (e.is_sym("rw")) return Privilege::RW;
    fail(e, "PAR002", "expected r or rw");
  }

  // --- types ---------------------------------------------------------------

  Type parse_type(const SExpr& e) {
    if (!e.is_list() || e.size() != 2) fail(e, "PAR002", "expected a (pretype qualifier) pair");
    PreType p = parse_pretype(e.items[0]);
    return ty(std::move(p), parse_qual(e.items[1]));
  }

  PreType parse_pretype(const SExpr& e) {
    if (e.is_sym()) {
      if (e.text == "unit") return pt_unit();
      if (auto nt = numtype_from_symbol(e.text)) return pt_num(*nt);
      if (e.text[0] == '$') return pt_var(lookup(VarKind::Type, e));
      fail(e, "PAR002", "unknown pretype '" + e.text + "'");
    }
    if (!e.is_list() || e.items.empty() || !e.items[0].is_sym())
      fail(e, "PAR002", "expected a pretype");
    const std::string& h = e.items[0].text;
    if (h == "prod") {
      std::vector<Type> comps;
      for (size_t i = 1; i < e.size(); ++i) comps.push_back(parse_type(e.items[i]));
      return pt_prod(std::move(comps));
    }
    if (h == "ref" || h == "cap") {
      expect_len(e, 4, h.c_str());
      Privilege p = parse_priv(e.items[1]);
      Loc l = parse_loc(e.items[2]);
      HeapType ht = parse_heaptype(e.items[3]);
      return h == "ref" ? pt_ref(p, l, std::move(ht)) : pt_cap(p, l, std::move(ht));
    }
    if (h == "ptr") {
      expect_len(e, 2, "ptr");
      return pt_ptr(parse_loc(e.items[1]));
    }
    if (h == "own") {
      expect_len(e, 2, "own");
      return pt_own(parse_loc(e.items[1]));
    }
    if (h == "rec") {
      expect_len(e, 4, "rec");
      Qual q = parse_qual(e.items[1]);
      push_name(VarKind::Type, binder(e.items[2]));
      Type body = parse_type(e.items[3]);
      pop_name(VarKind::Type);
      return pt_rec(q, std::move(body));
    }
    if (h == "exloc") {
      expect_len(e, 3, "exloc");
      push_name(VarKind::Loc, binder(e.items[1]));
      Type body = parse_type(e.items[2]);
      pop_name(VarKind::Loc);
      return pt_exloc(std::move(body));
    }
    if (h == "coderef") {
      expect_len(e, 2, "coderef");
      return pt_coderef(parse_funtype(e.items[1]));
    }
    fail(e, "PAR002", "unknown pretype '" + h + "'");
  }

  HeapType parse_heaptype(const SExpr& e) {
    if (!e.is_list() || e.items.empty() || !e.items[0].is_sym())
      fail(e, "PAR002", "expected a heap type");
    const std::string& h = e.items[0].text;
    if (h == "variant") {
      VariantHT out;
      for (size_t i = 1; i < e.size(); ++i) out.cases.push_back(parse_type(e.items[i]));
      return out;
    }
    if (h == "struct") {
      StructHT out;
      for (size_t i = 1; i < e.size(); ++i) {
        const SExpr& f = e.items[i];
        if (!f.is_list() || f.size() != 2) fail(f, "PAR002", "expected a (type size) field");
        Type t = parse_type(f.items[0]);
        out.fields.push_back({std::move(t), parse_size(f.items[1])});
      }
      return out;
    }
    if (h == "array") {
      expect_len(e, 2, "array");
      return ArrayHT{parse_type(e.items[1])};
    }
    if (h == "ex") {
      expect_len(e, 5, "ex");
      ExHT out;
      out.qualLower = parse_qual(e.items[1]);
      out.sizeBound = parse_size(e.items[2]);
      push_name(VarKind::Type, binder(e.items[3]));
      out.body = parse_type(e.items[4]);
      pop_name(VarKind::Type);
      return out;
    }
    fail(e, "PAR002", "unknown heap type '" + h + "'");
  }

  // Quantifier names scope over the ins/outs and, for a function definition,
  // over its body: pass keepPushed to take ownership of popping them.
  FunType parse_funtype(const SExpr& e, int* keepPushed = nullptr) {
    if (!e.is_call("fn")) fail(e, "PAR002", "expected a (fn ...) type");
    FunType out;
    int pushed[4] = {0, 0, 0, 0};
    size_t i = 1;
    auto is_quant = [](const SExpr& x) {
      if (!x.is_list() || x.items.empty() || !x.items[0].is_sym()) return false;
      const std::string& h = x.items[0].text;
      return h == "loc" || h == "size" || h == "qual" || h == "type";
    };
    while (i < e.size() && is_quant(e.items[i])) {
      const SExpr& q = e.items[i];
      const std::string& h = q.items[0].text;
      if (h == "loc") {
        expect_len(q, 2, "loc quantifier");
        out.quants.push_back(LocQ{});
        push_name(VarKind::Loc, binder(q.items[1]));
        ++pushed[(int)VarKind::Loc];
      } else if (h == "size") {
        expect_len(q, 4, "size quantifier");
        SizeQ sq;
        for (auto& s : q.items[2].items) sq.lowers.push_back(parse_size(s));
        for (auto& s : q.items[3].items) sq.uppers.push_back(parse_size(s));
        out.quants.push_back(std::move(sq));
        push_name(VarKind::Size, binder(q.items[1]));
        ++pushed[(int)VarKind::Size];
      } else if (h == "qual") {
        expect_len(q, 4, "qual quantifier");
        QualQ qq;
        for (auto& s : q.items[2].items) qq.lowers.push_back(parse_qual(s));
        for (auto& s : q.items[3].items) qq.uppers.push_back(parse_qual(s));
        out.quants.push_back(std::move(qq));
        push_name(VarKind::Qual, binder(q.items[1]));
        ++pushed[(int)VarKind::Qual];
      } else {
        if (q.size() != 4 && q.size() != 5) fail(q, "PAR002", "malformed type quantifier");
        TypeQ tq;
        tq.qualLower = parse_qual(q.items[2]);
        tq.sizeUpper = parse_size(q.items[3]);
        tq.mayHaveCaps = false;
        if (q.size() == 5) {
          if (!q.items[4].is_sym("caps")) fail(q.items[4], "PAR002", "expected 'caps'");
          tq.mayHaveCaps = true;
        }
        out.quants.push_back(std::move(tq));
        push_name(VarKind::Type, binder(q.items[1]));
        ++pushed[(int)VarKind::Type];
      }
      ++i;
    }
    if (i + 3 != e.size() || !e.items[i].is_list() || !e.items[i + 1].is_sym("->") ||
        !e.items[i + 2].is_list())
      fail(e, "PAR002", "expected (ins) -> (outs)");
    for (auto& t : e.items[i].items) out.ins.push_back(parse_type(t));
    for (auto& t : e.items[i + 2].items) out.outs.push_back(parse_type(t));
    if (keepPushed)
      for (int k = 0; k < 4; ++k) keepPushed[k] = pushed[k];
    else
      for (int k = 0; k < 4; ++k)
        for (int n = 0; n < pushed[k]; ++n) pop_name((VarKind)k);
    return out;
  }

  ArrowType parse_arrow(const SExpr& e) {
    if (!e.is_list() || e.size() != 3 || !e.items[0].is_list() || !e.items[1].is_sym("->") ||
        !e.items[2].is_list())
      fail(e, "PAR002", "expected ((ins) -> (outs))");
    ArrowType out;
    for (auto& t : e.items[0].items) out.ins.push_back(parse_type(t));
    for (auto& t : e.items[2].items) out.outs.push_back(parse_type(t));
    return out;
  }

  LocalEffect parse_effect(const SExpr& e) {
    if (!e.is_call("effect")) fail(e, "PAR002", "expected (effect ...)");
    LocalEffect out;
    for (size_t i = 1; i < e.size(); ++i) {
      const SExpr& x = e.items[i];
      if (!x.is_list() || x.size() != 2) fail(x, "PAR002", "expected a (local type) entry");
      uint32_t n = parse_u32(x.items[0]);
      out.entries.push_back({n, parse_type(x.items[1])});
    }
    return out;
  }

  Index parse_index(const SExpr& e) {
    if (!e.is_list() || e.size() != 2 || !e.items[0].is_sym())
      fail(e, "PAR002", "expected an instantiation index");
    const std::string& h = e.items[0].text;
    if (h == "loc") return Index{parse_loc(e.items[1])};
    if (h == "size") return Index{parse_size(e.items[1])};
    if (h == "qual") return Index{parse_qual(e.items[1])};
    if (h == "type") return Index{parse_pretype(e.items[1])};
    fail(e, "PAR002", "expected an instantiation index");
  }

  // --- instructions ---------------------------------------------------------

  InstrSeq parse_seq(const SExpr& parent, size_t from) {
    InstrSeq out;
    for (size_t i = from; i < parent.size(); ++i) out.push_back(parse_instr(parent.items[i]));
    return out;
  }

  Instr parse_instr(const SExpr& e) {
    Instr out = parse_instr_inner(e);
    out.span = e.span;
    return out;
  }

  Instr parse_instr_inner(const SExpr& e) {
    if (e.is_sym()) {
      const std::string& s = e.text;
      if (s == "nop") return instr(INop{});
      if (s == "unreachable") return instr(IUnreachable{});
      if (s == "drop") return instr(IDrop{});
      if (s == "select") return instr(ISelect{});
      if (s == "return") return instr(IReturn{});
      if (s == "call_indirect") return instr(ICallIndirect{});
      if (s == "rec.unfold") return instr(IRecUnfold{});
      if (s == "ungroup") return instr(IUngroup{});
      if (s == "cap.split") return instr(ICapSplit{});
      if (s == "cap.join") return instr(ICapJoin{});
      if (s == "ref.demote") return instr(IRefDemote{});
      if (s == "ref.split") return instr(IRefSplit{});
      if (s == "ref.join") return instr(IRefJoin{});
      if (s == "struct.free") return instr(IStructFree{});
      if (s == "array.get") return instr(IArrayGet{});
      if (s == "array.set") return instr(IArraySet{});
      if (s == "array.free") return instr(IArrayFree{});
      // numeric ops: "<numtype>.<op>"
      size_t dot = s.find('.');
      if (dot != std::string::npos) {
        auto nt = numtype_from_symbol(s.substr(0, dot));
        if (nt) {
          std::string op = s.substr(dot + 1);
          for (const auto& info : kOps) {
            if (op == info.name) {
              bool flt = (*nt == NumType::F32 || *nt == NumType::F64);
              if ((flt && !info.floats) || (!flt && !info.ints))
                fail(e, "PAR003", "operation '" + op + "' is not defined for this type");
              return instr(INum{*nt, info.op});
            }
          }
        }
      }
      fail(e, "PAR003", "unknown instruction '" + s + "'");
    }
    if (!e.is_list() || e.items.empty() || !e.items[0].is_sym())
      fail(e, "PAR002", "expected an instruction");
    const std::string& h = e.items[0].text;

    size_t dot = h.find('.');
    if (dot != std::string::npos) {
      auto nt = numtype_from_symbol(h.substr(0, dot));
      std::string tail = h.substr(dot + 1);
      if (nt && tail == "const") {
        expect_len(e, 2, "constant");
        bool flt = (*nt == NumType::F32 || *nt == NumType::F64);
        uint64_t bits;
        if (flt) {
          double d = parse_float(e.items[1]);
          if (*nt == NumType::F32) {
            float f = (float)d;
            uint32_t b;
            std::memcpy(&b, &f, 4);
            bits = b;
          } else {
            std::memcpy(&bits, &d, 8);
          }
        } else {
          bits = parse_int_bits(e.items[1], num_bits(*nt) == 64);
        }
        return instr(IVal{v_num(*nt, bits)});
      }
      if (nt && tail == "bits" && (*nt == NumType::F32 || *nt == NumType::F64)) {
        expect_len(e, 2, "constant");
        uint64_t bits = parse_u64(e.items[1]);
        if (*nt == NumType::F32 && bits > 0xffffffffull)
          fail(e.items[1], "PAR002", "number out of range");
        return instr(IVal{v_num(*nt, bits)});
      }
    }
    if (h == "unit.const") {
      expect_len(e, 1, "constant");
      return instr(IVal{v_unit()});
    }
    if (h == "cvt") {
      expect_len(e, 4, "cvt");
      auto to = numtype_from_symbol(e.items[1].is_sym() ? e.items[1].text : "");
      auto op = cvtop_of(e.items[2].is_sym() ? e.items[2].text : "");
      auto from = numtype_from_symbol(e.items[3].is_sym() ? e.items[3].text : "");
      if (!to || !op || !from) fail(e, "PAR002", "malformed cvt");
      return instr(ICvt{*to, *op, *from});
    }
    if (h == "block") {
      if (e.size() < 3) fail(e, "PAR002", "malformed block");
      ArrowType a = parse_arrow(e.items[1]);
      LocalEffect eff = parse_effect(e.items[2]);
      return instr(IBlock{std::move(a), std::move(eff), parse_seq(e, 3)});
    }
    if (h == "loop") {
      if (e.size() < 2) fail(e, "PAR002", "malformed loop");
      ArrowType a = parse_arrow(e.items[1]);
      return instr(ILoop{std::move(a), parse_seq(e, 2)});
    }
    if (h == "if") {
      expect_len(e, 5, "if");
      ArrowType a = parse_arrow(e.items[1]);
      LocalEffect eff = parse_effect(e.items[2]);
      if (!e.items[3].is_call("then") || !e.items[4].is_call("else"))
        fail(e, "PAR002", "expected (then ...) and (else ...)");
      InstrSeq thn = parse_seq(e.items[3], 1);
      InstrSeq els = parse_seq(e.items[4], 1);
      return instr(IIte{std::move(a), std::move(eff), std::move(thn), std::move(els)});
    }
    if (h == "br") {
      expect_len(e, 2, "br");
      return instr(IBr{parse_u32(e.items[1])});
    }
    if (h == "br_if") {
      expect_len(e, 2, "br_if");
      return instr(IBrIf{parse_u32(e.items[1])});
    }
    if (h == "br_table") {
      expect_len(e, 3, "br_table");
      if (!e.items[1].is_list()) fail(e.items[1], "PAR002", "expected a target list");
      IBrTable bt;
      for (auto& t : e.items[1].items) bt.targets.push_back(parse_u32(t));
      bt.dflt = parse_u32(e.items[2]);
      return instr(std::move(bt));
    }
    if (h == "get_local") {
      expect_len(e, 3, "get_local");
      uint32_t idx = parse_u32(e.items[1]);
      return instr(IGetLocal{idx, parse_qual(e.items[2])});
    }
    if (h == "set_local") {
      expect_len(e, 2, "set_local");
      return instr(ISetLocal{parse_u32(e.items[1])});
    }
    if (h == "tee_local") {
      expect_len(e, 2, "tee_local");
      return instr(ITeeLocal{parse_u32(e.items[1])});
    }
    if (h == "get_global") {
      expect_len(e, 2, "get_global");
      return instr(IGetGlobal{parse_u32(e.items[1])});
    }
    if (h == "set_global") {
      expect_len(e, 2, "set_global");
      return instr(ISetGlobal{parse_u32(e.items[1])});
    }
    if (h == "qualify") {
      expect_len(e, 2, "qualify");
      return instr(IQualify{parse_qual(e.items[1])});
    }
    if (h == "coderef") {
      expect_len(e, 2, "coderef");
      return instr(ICodeRef{parse_u32(e.items[1])});
    }
    if (h == "inst") {
      IInst out;
      for (size_t i = 1; i < e.size(); ++i) out.indices.push_back(parse_index(e.items[i]));
      return instr(std::move(out));
    }
    if (h == "call") {
      if (e.size() < 2) fail(e, "PAR002", "malformed call");
      ICall out{parse_u32(e.items[1]), {}};
      for (size_t i = 2; i < e.size(); ++i) out.indices.push_back(parse_index(e.items[i]));
      return instr(std::move(out));
    }
    if (h == "rec.fold") {
      expect_len(e, 2, "rec.fold");
      PreType p = parse_pretype(e.items[1]);
      if (!std::holds_alternative<RecT>(p->v))
        fail(e.items[1], "PAR002", "rec.fold expects a rec pretype");
      return instr(IRecFold{std::move(p)});
    }
    if (h == "mempack") {
      expect_len(e, 2, "mempack");
      return instr(IMempack{parse_loc(e.items[1])});
    }
    if (h == "memunpack") {
      if (e.size() < 4) fail(e, "PAR002", "malformed memunpack");
      ArrowType a = parse_arrow(e.items[1]);
      LocalEffect eff = parse_effect(e.items[2]);
      push_name(VarKind::Loc, binder(e.items[3]));
      InstrSeq body = parse_seq(e, 4);
      pop_name(VarKind::Loc);
      return instr(IMemunpack{std::move(a), std::move(eff), std::move(body)});
    }
    if (h == "group") {
      expect_len(e, 3, "group");
      uint32_t n = parse_u32(e.items[1]);
      return instr(IGroup{n, parse_qual(e.items[2])});
    }
    if (h == "struct.malloc") {
      expect_len(e, 3, "struct.malloc");
      if (!e.items[1].is_call("sizes")) fail(e.items[1], "PAR002", "expected (sizes ...)");
      IStructMalloc out;
      for (size_t i = 1; i < e.items[1].size(); ++i)
        out.sizes.push_back(parse_size(e.items[1].items[i]));
      out.qual = parse_qual(e.items[2]);
      return instr(std::move(out));
    }
    if (h == "struct.get") {
      expect_len(e, 2, "struct.get");
      return instr(IStructGet{parse_u32(e.items[1])});
    }
    if (h == "struct.set") {
      expect_len(e, 2, "struct.set");
      return instr(IStructSet{parse_u32(e.items[1])});
    }
    if (h == "struct.swap") {
      expect_len(e, 2, "struct.swap");
      return instr(IStructSwap{parse_u32(e.items[1])});
    }
    if (h == "variant.malloc") {
      expect_len(e, 4, "variant.malloc");
      IVariantMalloc out;
      out.tag = parse_u32(e.items[1]);
      if (!e.items[2].is_call("cases")) fail(e.items[2], "PAR002", "expected (cases ...)");
      for (size_t i = 1; i < e.items[2].size(); ++i)
        out.cases.push_back(parse_type(e.items[2].items[i]));
      out.qual = parse_qual(e.items[3]);
      return instr(std::move(out));
    }
    if (h == "variant.case") {
      if (e.size() < 5) fail(e, "PAR002", "malformed variant.case");
      IVariantCase out;
      out.qual = parse_qual(e.items[1]);
      out.ht = parse_heaptype(e.items[2]);
      out.arrow = parse_arrow(e.items[3]);
      out.effect = parse_effect(e.items[4]);
      for (size_t i = 5; i < e.size(); ++i) {
        if (!e.items[i].is_call("arm")) fail(e.items[i], "PAR002", "expected (arm ...)");
        out.arms.push_back(parse_seq(e.items[i], 1));
      }
      return instr(std::move(out));
    }
    if (h == "array.malloc") {
      expect_len(e, 2, "array.malloc");
      return instr(IArrayMalloc{parse_qual(e.items[1])});
    }
    if (h == "exists.pack") {
      expect_len(e, 4, "exists.pack");
      IExistsPack out{parse_pretype(e.items[1]), parse_heaptype(e.items[2]),
                      parse_qual(e.items[3])};
      if (!std::holds_alternative<ExHT>(out.ht))
        fail(e.items[2], "PAR002", "exists.pack expects an ex heap type");
      return instr(std::move(out));
    }
    if (h == "exists.unpack") {
      if (e.size() < 6) fail(e, "PAR002", "malformed exists.unpack");
      IExistsUnpack out;
      out.qual = parse_qual(e.items[1]);
      out.ht = parse_heaptype(e.items[2]);
      if (!std::holds_alternative<ExHT>(out.ht))
        fail(e.items[2], "PAR002", "exists.unpack expects an ex heap type");
      out.arrow = parse_arrow(e.items[3]);
      out.effect = parse_effect(e.items[4]);
      push_name(VarKind::Type, binder(e.items[5]));
      out.body = parse_seq(e, 6);
      pop_name(VarKind::Type);
      return instr(std::move(out));
    }
    fail(e, "PAR003", "unknown instruction '" + h + "'");
  }

  // --- module items ----------------------------------------------------------

  size_t parse_headers(const SExpr& e, size_t i, std::vector<std::string>& exports,
                       std::optional<std::string>& importName) {
    while (i < e.size() && e.items[i].is_call("export")) {
      const SExpr& x = e.items[i];
      expect_len(x, 2, "export");
      if (!x.items[1].is_str()) fail(x.items[1], "PAR002", "expected an export name string");
      exports.push_back(x.items[1].text);
      ++i;
    }
    if (i < e.size() && e.items[i].is_call("import")) {
      const SExpr& x = e.items[i];
      expect_len(x, 2, "import");
      if (!x.items[1].is_str()) fail(x.items[1], "PAR002", "expected a \"module.item\" string");
      importName = x.items[1].text;
      ++i;
    }
    return i;
  }

  FuncDef parse_func(const SExpr& e) {
    FuncDef out;
    size_t i = parse_headers(e, 1, out.exports, out.importName);
    if (i >= e.size()) fail(e, "PAR002", "function lacks a type");
    int quantNames[4] = {0, 0, 0, 0};
    out.type = parse_funtype(e.items[i++], quantNames);
    auto popQuants = [&] {
      for (int k = 0; k < 4; ++k)
        for (int n = 0; n < quantNames[k]; ++n) pop_name((VarKind)k);
    };
    if (out.importName) {
      if (i != e.size()) fail(e.items[i], "PAR002", "imported function must have no body");
      popQuants();
      return out;
    }
    if (i >= e.size() || !e.items[i].is_call("locals"))
      fail(e, "PAR002", "expected (locals ...)");
    for (size_t j = 1; j < e.items[i].size(); ++j)
      out.localSizes.push_back(parse_size(e.items[i].items[j]));
    ++i;
    if (i >= e.size() || !e.items[i].is_call("body")) fail(e, "PAR002", "expected (body ...)");
    out.body = parse_seq(e.items[i], 1);
    ++i;
    if (i != e.size()) fail(e.items[i], "PAR002", "unexpected form after (body ...)");
    popQuants();
    return out;
  }

  GlobalDef parse_global(const SExpr& e) {
    GlobalDef out;
    size_t i = parse_headers(e, 1, out.exports, out.importName);
    if (i >= e.size()) fail(e, "PAR002", "global lacks a type");
    if (e.items[i].is_call("mut")) {
      expect_len(e.items[i], 2, "mut");
      out.mut = true;
      out.pre = parse_pretype(e.items[i].items[1]);
    } else {
      out.pre = parse_pretype(e.items[i]);
    }
    ++i;
    if (out.importName) {
      if (i != e.size()) fail(e.items[i], "PAR002", "imported global must have no initializer");
      return out;
    }
    if (i >= e.size() || !e.items[i].is_call("init")) fail(e, "PAR002", "expected (init ...)");
    out.init = parse_seq(e.items[i], 1);
    ++i;
    if (i != e.size()) fail(e.items[i], "PAR002", "unexpected form after (init ...)");
    return out;
  }

  TableDef parse_table(const SExpr& e) {
    TableDef out;
    size_t i = parse_headers(e, 1, out.exports, out.importName);
    for (; i < e.size(); ++i) out.entries.push_back(parse_u32(e.items[i]));
    return out;
  }

  RWModule parse_mod(const SExpr& e) {
    if (!e.is_call("module")) fail(e, "PAR002", "expected (module ...)");
    RWModule out;
    size_t i = 1;
    if (i < e.size() && e.items[i].is_sym() && !e.items[i].text.empty() &&
        e.items[i].text[0] == '$') {
      out.name = e.items[i].text.substr(1);
      ++i;
    }
    bool sawTable = false;
    for (; i < e.size(); ++i) {
      const SExpr& item = e.items[i];
      if (item.is_call("func")) {
        out.funcs.push_back(parse_func(item));
      } else if (item.is_call("global")) {
        out.globals.push_back(parse_global(item));
      } else if (item.is_call("table")) {
        if (sawTable) fail(item, "PAR002", "a module has at most one table");
        sawTable = true;
        out.table = parse_table(item);
      } else {
        fail(item, "PAR002", "expected (func ...), (global ...) or (table ...)");
      }
    }
    return out;
  }
};

}  // namespace

ParseResult parse_module(std::string_view src, const std::string& file) {
  ParseResult out;
  ReadResult rd = read_sexprs(src, file);
  out.diags = std::move(rd.diags);
  if (!out.diags.ok()) return out;
  if (rd.exprs.size() != 1) {
    out.diags.error("PAR002", "expected exactly one (module ...) form",
                    rd.exprs.empty() ? SourceSpan{file, {}, {}} : rd.exprs[1].span);
    return out;
  }
  Parser p{out.diags, {}};
  try {
    out.module = p.parse_mod(rd.exprs[0]);
  } catch (const ParseError&) {
    out.module.reset();
  }
  return out;
}

}  // namespace rw

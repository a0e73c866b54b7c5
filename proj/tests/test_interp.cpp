// Interpreter tests. The collector is pinned against a brute-force
// reachability oracle (quadratic fixpoint, written first and sharing no code
// with collect); allocation byte budgets and trap conditions are frozen as
// step goldens with exact rule traces; hand programs are stepped to
// completion with the configuration re-checked after every reduction.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "rw/interp.hpp"
#include "rw/ir.hpp"
#include "rw/typecheck.hpp"

using namespace rw;

namespace {

const Qual UNR = Qual::unr();
const Qual LIN = Qual::lin();

Loc lloc(uint64_t a) { return Loc::concrete(a, Mem::Lin); }
Loc uloc(uint64_t a) { return Loc::concrete(a, Mem::Unr); }

std::shared_ptr<const Value> sp(Value v) { return std::make_shared<const Value>(std::move(v)); }

bool has_code(const DiagnosticList& d, const std::string& code) {
  for (const auto& diag : d.items)
    if (diag.code == code) return true;
  return false;
}

HeapType ht_struct(std::vector<std::pair<Type, uint64_t>> fs) {
  StructHT h;
  for (auto& [t, b] : fs) h.fields.push_back({t, Size::constant(b)});
  return h;
}

const HeapType kStI32 = ht_struct({{ty_i32(), 32}});

FunType mkft(std::vector<Quantifier> quants, std::vector<Type> ins, std::vector<Type> outs) {
  FunType f;
  f.quants = std::move(quants);
  f.ins = std::move(ins);
  f.outs = std::move(outs);
  return f;
}

std::shared_ptr<const FuncDef> mkfunc(FunType ft, std::vector<Size> localSizes, InstrSeq body) {
  auto f = std::make_shared<FuncDef>();
  f->type = std::move(ft);
  f->localSizes = std::move(localSizes);
  f->body = std::move(body);
  return f;
}

Instr num(NumType nt, NumOp op) { return instr(INum{nt, op}); }

// ---------------------------------------------------------------------------
// Reachability oracle
//
// Independent model of collection: scan every cell every pass until the live
// set stops growing, then grow the dead-linear set the same way. Quadratic
// on purpose; it exists to disagree with a buggy worklist.

void oracle_locs(const Value& v, std::vector<Loc>& out) {
  if (auto* r = std::get_if<RefV>(&v.v)) out.push_back(r->loc);
  if (auto* p = std::get_if<PtrV>(&v.v)) out.push_back(p->loc);
  if (auto* c = std::get_if<CapV>(&v.v)) out.push_back(c->loc);
  if (auto* o = std::get_if<OwnV>(&v.v)) out.push_back(o->loc);
  if (auto* g = std::get_if<GroupV>(&v.v))
    for (const Value& e : g->elems) oracle_locs(e, out);
  if (auto* f = std::get_if<FoldV>(&v.v))
    if (f->inner) oracle_locs(*f->inner, out);
  if (auto* m = std::get_if<MempackV>(&v.v)) {
    out.push_back(m->loc);
    if (m->inner) oracle_locs(*m->inner, out);
  }
}

std::vector<Loc> oracle_cell_locs(const Cell& c) {
  std::vector<Loc> out;
  if (auto* s = std::get_if<StructHV>(&c.hv))
    for (const Value& f : s->fields) oracle_locs(f, out);
  if (auto* a = std::get_if<ArrayHV>(&c.hv))
    for (const Value& e : a->elems) oracle_locs(e, out);
  if (auto* v = std::get_if<VariantHV>(&c.hv))
    if (v->payload) oracle_locs(*v->payload, out);
  if (auto* p = std::get_if<PackHV>(&c.hv))
    if (p->payload) oracle_locs(*p->payload, out);
  return out;
}

struct OracleVerdict {
  std::set<uint64_t> deadUnr, deadLin;
};

OracleVerdict oracle_collect(const Store& s, const std::vector<Loc>& roots) {
  using Key = std::pair<int, uint64_t>;  // 0 = lin, 1 = unr
  auto key = [](const Loc& l) { return Key{l.mem == Mem::Lin ? 0 : 1, l.addr}; };
  std::set<Key> live;
  for (const Loc& r : roots)
    if (!r.is_var()) live.insert(key(r));
  for (bool grew = true; grew;) {
    grew = false;
    for (const auto& [a, c] : s.lin)
      if (live.count({0, a}))
        for (const Loc& l : oracle_cell_locs(c))
          if (!l.is_var() && live.insert(key(l)).second) grew = true;
    for (const auto& [a, c] : s.unr)
      if (live.count({1, a}))
        for (const Loc& l : oracle_cell_locs(c))
          if (!l.is_var() && live.insert(key(l)).second) grew = true;
  }

  OracleVerdict v;
  for (const auto& [a, c] : s.unr)
    if (!live.count({1, a})) v.deadUnr.insert(a);
  // Linear cells rooted by dead cells die with them, transitively.
  for (bool grew = true; grew;) {
    grew = false;
    auto absorb = [&](const Cell& c) {
      for (const Loc& l : oracle_cell_locs(c))
        if (!l.is_var() && l.mem == Mem::Lin && s.lin.count(l.addr) &&
            v.deadLin.insert(l.addr).second)
          grew = true;
    };
    for (uint64_t a : v.deadUnr) absorb(s.unr.at(a));
    for (uint64_t a : v.deadLin) absorb(s.lin.at(a));
  }
  return v;
}

// Random stores: a mix of cells whose payloads mention other locations
// through refs, nested groups, and packages. References are handed out with
// linear hygiene: an unrestricted location may be aliased freely, a linear
// location gets exactly one owner, as in any store a well-typed program can
// build. (Without that discipline a linear cell can be owned by a dead cell
// and rooted at the same time, and collection is not even idempotent.)

struct StoreGen {
  std::mt19937 rng;
  std::vector<Loc> unrPool;   // freely aliasable targets
  std::vector<Loc> linAvail;  // each handed out at most once
  explicit StoreGen(uint32_t seed) : rng(seed) {}

  uint64_t pick(uint64_t n) { return std::uniform_int_distribution<uint64_t>(0, n - 1)(rng); }

  std::optional<Loc> claim() {
    if (!linAvail.empty() && pick(3) == 0) {
      size_t i = size_t(pick(linAvail.size()));
      Loc l = linAvail[i];
      linAvail.erase(linAvail.begin() + ptrdiff_t(i));
      return l;
    }
    if (unrPool.empty()) return std::nullopt;
    return unrPool[pick(unrPool.size())];
  }

  Value wrap(Loc l) {
    switch (pick(4)) {
      case 0: return {GroupV{{v_i32(1), Value{RefV{l}, {}}}}, {}};
      case 1: return {MempackV{l, sp(Value{RefV{l}, {}})}, {}};
      default: return {RefV{l}, {}};
    }
  }

  Store make(size_t nLin, size_t nUnr, size_t edges) {
    Store s;
    for (size_t i = 0; i < nLin; ++i) {
      s.lin[i] = Cell{ArrayHV{}, 32, ArrayHT{ty_i32()}};
      linAvail.push_back(lloc(i));
    }
    for (size_t i = 0; i < nUnr; ++i) {
      s.unr[i] = Cell{ArrayHV{}, 32, ArrayHT{ty_i32()}};
      unrPool.push_back(uloc(i));
    }
    s.nextLin = nLin;
    s.nextUnr = nUnr;
    for (size_t e = 0; e < edges; ++e) {
      uint64_t from = pick(nLin + nUnr);
      Cell& cell = from < nLin ? s.lin[from] : s.unr[from - nLin];
      if (auto target = claim())
        std::get<ArrayHV>(cell.hv).elems.push_back(wrap(*target));
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Step helpers

RunResult run_values(Store store, InstrSeq program, const RunOptions& opts = {}) {
  Configuration c{std::move(store), std::move(program)};
  return run(c, opts);
}

void expect_done(const RunResult& r, const std::vector<Value>& want) {
  REQUIRE(r.kind == RunKind::Done);
  REQUIRE(r.results.size() == want.size());
  for (size_t i = 0; i < want.size(); ++i) CHECK(r.results[i] == want[i]);
}

uint64_t the_i32(const Value& v) {
  const NumV* n = std::get_if<NumV>(&v.v);
  REQUIRE(n != nullptr);
  return n->bits & 0xffffffffu;
}

// Steps to completion, re-checking the configuration against `results` before
// the first reduction and after every subsequent one. Returns the final
// outcome.
StepOutcome step_checked(Configuration& c, const std::vector<Type>& results,
                         uint64_t maxSteps = 10'000) {
  std::string rule = "(start)";
  for (uint64_t i = 0; i < maxSteps; ++i) {
    auto d = check_config(store_typing(c.store), c.program, results);
    if (!d.ok()) {
      std::string all = "ill-typed after " + rule + ":";
      for (const auto& diag : d.items) all += " [" + diag.code + "] " + diag.message;
      FAIL(all);
    }
    StepOutcome so = step(c, &rule);
    if (so.kind != StepKind::Stepped) return so;
  }
  FAIL("program did not terminate within the step budget");
  return {};
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("numeric reductions") {
  SUBCASE("i32 arithmetic and comparisons") {
    expect_done(run_values({}, {instr(IVal{v_i32(2)}), instr(IVal{v_i32(3)}),
                                num(NumType::I32, NumOp::Add)}),
                {v_i32(5)});
    expect_done(run_values({}, {instr(IVal{v_i32(2)}), instr(IVal{v_i32(3)}),
                                num(NumType::I32, NumOp::Sub)}),
                {v_i32(uint32_t(-1))});
    expect_done(run_values({}, {instr(IVal{v_i32(uint32_t(-6))}), instr(IVal{v_i32(4)}),
                                num(NumType::I32, NumOp::Div)}),
                {v_i32(uint32_t(-1))});
    expect_done(run_values({}, {instr(IVal{v_num(NumType::UI32, 0x80000000u)}),
                                instr(IVal{v_num(NumType::UI32, 2)}),
                                num(NumType::UI32, NumOp::Div)}),
                {v_num(NumType::UI32, 0x40000000u)});
    expect_done(run_values({}, {instr(IVal{v_i32(uint32_t(-7))}), instr(IVal{v_i32(2)}),
                                num(NumType::I32, NumOp::Lt)}),
                {v_i32(1)});
    expect_done(run_values({}, {instr(IVal{v_num(NumType::UI32, 0xffffffffu)}),
                                instr(IVal{v_num(NumType::UI32, 2)}),
                                num(NumType::UI32, NumOp::Lt)}),
                {v_i32(0)});
    expect_done(run_values({}, {instr(IVal{v_i32(0)}), num(NumType::I32, NumOp::Eqz)}),
                {v_i32(1)});
  }

  SUBCASE("shifts mask the count and respect signedness") {
    expect_done(run_values({}, {instr(IVal{v_i32(1)}), instr(IVal{v_i32(33)}),
                                num(NumType::I32, NumOp::Shl)}),
                {v_i32(2)});
    expect_done(run_values({}, {instr(IVal{v_i32(0x80000000u)}), instr(IVal{v_i32(1)}),
                                num(NumType::I32, NumOp::Shr)}),
                {v_i32(0xc0000000u)});
    expect_done(run_values({}, {instr(IVal{v_num(NumType::UI32, 0x80000000u)}),
                                instr(IVal{v_num(NumType::UI32, 1)}),
                                num(NumType::UI32, NumOp::Shr)}),
                {v_num(NumType::UI32, 0x40000000u)});
    expect_done(run_values({}, {instr(IVal{v_i32(0x12345678u)}), instr(IVal{v_i32(8)}),
                                num(NumType::I32, NumOp::Rotl)}),
                {v_i32(0x34567812u)});
  }

  SUBCASE("bit counting") {
    expect_done(run_values({}, {instr(IVal{v_i32(16)}), num(NumType::I32, NumOp::Clz)}),
                {v_i32(27)});
    expect_done(run_values({}, {instr(IVal{v_i32(16)}), num(NumType::I32, NumOp::Ctz)}),
                {v_i32(4)});
    expect_done(run_values({}, {instr(IVal{v_i32(0xf0f0u)}), num(NumType::I32, NumOp::Popcnt)}),
                {v_i32(8)});
  }

  SUBCASE("integer traps") {
    auto r1 = run_values({}, {instr(IVal{v_i32(1)}), instr(IVal{v_i32(0)}),
                              num(NumType::I32, NumOp::Div)});
    REQUIRE(r1.kind == RunKind::Trapped);
    CHECK(r1.detail == "integer divide by zero");

    auto r2 = run_values({}, {instr(IVal{v_i32(0x80000000u)}), instr(IVal{v_i32(uint32_t(-1))}),
                              num(NumType::I32, NumOp::Div)});
    REQUIRE(r2.kind == RunKind::Trapped);
    CHECK(r2.detail == "integer overflow");

    // INT_MIN % -1 is 0, not a trap
    expect_done(run_values({}, {instr(IVal{v_i32(0x80000000u)}),
                                instr(IVal{v_i32(uint32_t(-1))}),
                                num(NumType::I32, NumOp::Rem)}),
                {v_i32(0)});
  }

  SUBCASE("floats: min/max zeros and NaN, nearest is half-even") {
    auto f32 = [](float f) { return v_num(NumType::F32, std::bit_cast<uint32_t>(f)); };
    expect_done(run_values({}, {instr(IVal{f32(0.0f)}), instr(IVal{f32(-0.0f)}),
                                num(NumType::F32, NumOp::Min)}),
                {f32(-0.0f)});
    auto rn = run_values({}, {instr(IVal{f32(std::numeric_limits<float>::quiet_NaN())}),
                              instr(IVal{f32(1.0f)}), num(NumType::F32, NumOp::Max)});
    REQUIRE(rn.kind == RunKind::Done);
    CHECK(std::isnan(std::bit_cast<float>(uint32_t(the_i32(rn.results[0])))));

    expect_done(run_values({}, {instr(IVal{f32(2.5f)}), num(NumType::F32, NumOp::Nearest)}),
                {f32(2.0f)});
    expect_done(run_values({}, {instr(IVal{f32(3.5f)}), num(NumType::F32, NumOp::Nearest)}),
                {f32(4.0f)});
    expect_done(run_values({}, {instr(IVal{f32(-2.5f)}), num(NumType::F32, NumOp::Nearest)}),
                {f32(-2.0f)});
  }

  SUBCASE("conversions") {
    auto f64 = [](double d) { return v_num(NumType::F64, std::bit_cast<uint64_t>(d)); };
    auto f32 = [](float f) { return v_num(NumType::F32, std::bit_cast<uint32_t>(f)); };
    expect_done(run_values({}, {instr(IVal{v_num(NumType::I64, 0x1'0000'0005)}),
                                instr(ICvt{NumType::I32, CvtOp::Wrap, NumType::I64})}),
                {v_i32(5)});
    expect_done(run_values({}, {instr(IVal{v_i32(uint32_t(-2))}),
                                instr(ICvt{NumType::I64, CvtOp::Extend, NumType::I32})}),
                {v_num(NumType::I64, uint64_t(-2))});
    expect_done(run_values({}, {instr(IVal{v_num(NumType::UI32, 0xffffffffu)}),
                                instr(ICvt{NumType::UI64, CvtOp::Extend, NumType::UI32})}),
                {v_num(NumType::UI64, 0xffffffffu)});
    // saturating truncation: NaN -> 0, out of range clamps
    expect_done(run_values({}, {instr(IVal{f64(std::numeric_limits<double>::quiet_NaN())}),
                                instr(ICvt{NumType::I32, CvtOp::TruncSat, NumType::F64})}),
                {v_i32(0)});
    expect_done(run_values({}, {instr(IVal{f64(1e30)}),
                                instr(ICvt{NumType::I32, CvtOp::TruncSat, NumType::F64})}),
                {v_i32(0x7fffffffu)});
    expect_done(run_values({}, {instr(IVal{f64(-1e30)}),
                                instr(ICvt{NumType::UI32, CvtOp::TruncSat, NumType::F64})}),
                {v_num(NumType::UI32, 0)});
    expect_done(run_values({}, {instr(IVal{f64(-2.9)}),
                                instr(ICvt{NumType::I32, CvtOp::TruncSat, NumType::F64})}),
                {v_i32(uint32_t(-2))});
    expect_done(run_values({}, {instr(IVal{v_i32(uint32_t(-1))}),
                                instr(ICvt{NumType::F64, CvtOp::Convert, NumType::I32})}),
                {f64(-1.0)});
    expect_done(run_values({}, {instr(IVal{v_num(NumType::UI32, 0xffffffffu)}),
                                instr(ICvt{NumType::F64, CvtOp::Convert, NumType::UI32})}),
                {f64(4294967295.0)});
    expect_done(run_values({}, {instr(IVal{f32(1.5f)}),
                                instr(ICvt{NumType::I32, CvtOp::Reinterpret, NumType::F32})}),
                {v_i32(0x3fc00000u)});
  }
}

TEST_CASE("stack shuffling and control flow") {
  SUBCASE("drop, select, nop") {
    expect_done(run_values({}, {instr(IVal{v_i32(1)}), instr(IVal{v_i32(2)}), instr(IDrop{})}),
                {v_i32(1)});
    expect_done(run_values({}, {instr(IVal{v_i32(10)}), instr(IVal{v_i32(20)}),
                                instr(IVal{v_i32(1)}), instr(ISelect{})}),
                {v_i32(10)});
    expect_done(run_values({}, {instr(IVal{v_i32(10)}), instr(IVal{v_i32(20)}),
                                instr(IVal{v_i32(0)}), instr(ISelect{})}),
                {v_i32(20)});
    expect_done(run_values({}, {instr(INop{})}), {});
  }

  SUBCASE("block takes its inputs and delivers its results") {
    IBlock b;
    b.arrow = {{ty_i32()}, {ty_i32()}};
    b.body = {instr(IVal{v_i32(2)}), num(NumType::I32, NumOp::Add)};
    expect_done(run_values({}, {instr(IVal{v_i32(1)}), instr(b)}), {v_i32(3)});
  }

  SUBCASE("br skips the rest of the block") {
    IBlock b;
    b.arrow = {{}, {ty_i32()}};
    b.body = {instr(IVal{v_i32(7)}), instr(IBr{0}), instr(IUnreachable{})};
    expect_done(run_values({}, {instr(b)}), {v_i32(7)});
  }

  SUBCASE("br_if false falls through, true branches") {
    auto mk = [](uint32_t cond) {
      IBlock b;
      b.arrow = {{}, {ty_i32()}};
      b.body = {instr(IVal{v_i32(1)}), instr(IVal{v_i32(cond)}), instr(IBrIf{0}),
                instr(IDrop{}), instr(IVal{v_i32(2)})};
      return InstrSeq{instr(b)};
    };
    expect_done(run_values({}, mk(1)), {v_i32(1)});
    expect_done(run_values({}, mk(0)), {v_i32(2)});
  }

  SUBCASE("br_table selects by index with a default") {
    auto mk = [](uint32_t sel) {
      IBlock inner;
      inner.arrow = {{}, {ty_i32()}};
      inner.body = {instr(IVal{v_i32(100)}), instr(IVal{v_i32(sel)}),
                    instr(IBrTable{{0, 1}, 1}), instr(IUnreachable{})};
      IBlock outer;
      outer.arrow = {{}, {ty_i32()}};
      outer.body = {instr(inner), instr(IVal{v_i32(1)}), num(NumType::I32, NumOp::Add)};
      return InstrSeq{instr(outer)};
    };
    // selector 0 exits the inner block, so the increment still runs
    expect_done(run_values({}, mk(0)), {v_i32(101)});
    // selector 1 exits the outer block directly; out of range hits the default
    expect_done(run_values({}, mk(1)), {v_i32(100)});
    expect_done(run_values({}, mk(9)), {v_i32(100)});
  }

  SUBCASE("if runs the matching branch") {
    auto mk = [](uint32_t cond) {
      IIte ite;
      ite.arrow = {{}, {ty_i32()}};
      ite.thn = {instr(IVal{v_i32(1)})};
      ite.els = {instr(IVal{v_i32(2)})};
      return InstrSeq{instr(IVal{v_i32(cond)}), instr(ite)};
    };
    expect_done(run_values({}, mk(5)), {v_i32(1)});
    expect_done(run_values({}, mk(0)), {v_i32(2)});
  }

  SUBCASE("loop re-enters on branch: count down from 3") {
    ILoop lp;
    lp.arrow = {{}, {}};
    lp.body = {instr(IGetLocal{0, UNR}), instr(IVal{v_i32(1)}), num(NumType::I32, NumOp::Sub),
               instr(ITeeLocal{0}), instr(IBrIf{0})};
    ILocalFrame frame;
    frame.arity = 1;
    frame.inst = 0;
    frame.locals = {LocalSlotV{v_i32(3), 32}};
    frame.body = {instr(lp), instr(IGetLocal{0, UNR})};
    frame.results = {ty_i32()};
    Store s;
    s.instances.push_back({});
    expect_done(run_values(std::move(s), {instr(frame)}), {v_i32(0)});
  }

  SUBCASE("unreachable and explicit trap") {
    auto r1 = run_values({}, {instr(IUnreachable{})});
    CHECK(r1.kind == RunKind::Trapped);
    auto r2 = run_values({}, {instr(ITrap{})});
    CHECK(r2.kind == RunKind::Trapped);
  }

  SUBCASE("return pops the frame with exactly the results") {
    ILocalFrame frame;
    frame.arity = 1;
    frame.inst = 0;
    frame.body = {instr(IVal{v_i32(9)}), instr(IReturn{}), instr(IUnreachable{})};
    frame.results = {ty_i32()};
    Store s;
    s.instances.push_back({});
    expect_done(run_values(std::move(s), {instr(frame)}), {v_i32(9)});
  }
}

TEST_CASE("locals and globals") {
  Store s;
  s.instances.push_back({});

  SUBCASE("set then get") {
    ILocalFrame f;
    f.arity = 1;
    f.inst = 0;
    f.locals = {LocalSlotV{v_unit(), 32}};
    f.body = {instr(IVal{v_i32(9)}), instr(ISetLocal{0}), instr(IGetLocal{0, UNR})};
    f.results = {ty_i32()};
    expect_done(run_values(s, {instr(f)}), {v_i32(9)});
  }

  SUBCASE("linear get_local leaves a unit residue") {
    Value linGroup{GroupV{{v_i32(1)}}, LIN};
    ILocalFrame f;
    f.arity = 3;
    f.inst = 0;
    f.locals = {LocalSlotV{linGroup, 32}};
    f.body = {instr(IGetLocal{0, LIN}), instr(IUngroup{}), instr(IGetLocal{0, UNR}),
              instr(IGetLocal{0, UNR})};
    f.results = {ty_i32(), ty_unit(), ty_unit()};
    expect_done(run_values(s, {instr(f)}), {v_i32(1), v_unit(), v_unit()});
  }

  SUBCASE("tee of a linear value moves it, tee of an unrestricted value copies") {
    Value linGroup{GroupV{{v_i32(1)}}, LIN};
    ILocalFrame f;
    f.arity = 2;
    f.inst = 0;
    f.locals = {LocalSlotV{v_unit(), 32}};
    f.body = {instr(IVal{linGroup}), instr(ITeeLocal{0}), instr(IUngroup{}),
              instr(IGetLocal{0, UNR})};
    f.results = {ty_i32(), ty_unit()};
    expect_done(run_values(s, {instr(f)}), {v_i32(1), v_unit()});

    ILocalFrame g;
    g.arity = 2;
    g.inst = 0;
    g.locals = {LocalSlotV{v_unit(), 32}};
    g.body = {instr(IVal{v_i32(4)}), instr(ITeeLocal{0}), instr(IGetLocal{0, UNR})};
    g.results = {ty_i32(), ty_i32()};
    expect_done(run_values(s, {instr(g)}), {v_i32(4), v_i32(4)});
  }

  SUBCASE("globals read and write through the instance") {
    Store gs;
    Instance ins;
    ins.globals = {v_i32(40)};
    ins.globalTypes = {{true, pt_i32()}};
    gs.instances.push_back(ins);
    InstrSeq p = {instr(IGetGlobal{0}), instr(IVal{v_i32(2)}), num(NumType::I32, NumOp::Add),
                  instr(ISetGlobal{0}), instr(IGetGlobal{0})};
    Configuration c{gs, p};
    RunResult r = run(c);
    expect_done(r, {v_i32(42)});
    CHECK(c.store.instances[0].globals[0] == v_i32(42));
  }
}

TEST_CASE("allocation budgets are the frozen byte formulas") {
  SUBCASE("variant.malloc pays 32 + sz(v)") {
    Configuration c{{}, {instr(IVal{v_i32(7)}),
                         instr(IVariantMalloc{0, {ty_i32(), ty_unit()}, UNR})}};
    std::string rule;
    REQUIRE(step(c, &rule).kind == StepKind::Stepped);
    CHECK(rule == "variant.malloc");
    REQUIRE(c.program.size() == 1);
    auto* m = std::get_if<IMalloc>(&c.program[0].v);
    REQUIRE(m != nullptr);
    CHECK(m->bits == 64);  // 32 tag + 32 payload
    CHECK(m->mem == Mem::Unr);

    REQUIRE(step(c, &rule).kind == StepKind::Stepped);
    CHECK(rule == "malloc");
    REQUIRE(c.store.unr.size() == 1);
    CHECK(c.store.unr.begin()->second.slotBits == 64);

    // the result is a reference inside an existential package
    REQUIRE(c.program.size() == 1);
    auto* iv = std::get_if<IVal>(&c.program[0].v);
    REQUIRE(iv != nullptr);
    auto* pkg = std::get_if<MempackV>(&iv->val.v);
    REQUIRE(pkg != nullptr);
    CHECK(pkg->loc == uloc(0));
    REQUIRE(pkg->inner != nullptr);
    auto* ref = std::get_if<RefV>(&pkg->inner->v);
    REQUIRE(ref != nullptr);
    CHECK(ref->loc == uloc(0));
  }

  SUBCASE("exists.pack pays 64 + sz(v)") {
    HeapType htex = ExHT{UNR, Size::constant(32), ty(pt_var(0), UNR)};
    Configuration c{{}, {instr(IVal{v_i32(7)}),
                         instr(IExistsPack{pt_i32(), htex, UNR})}};
    std::string rule;
    REQUIRE(step(c, &rule).kind == StepKind::Stepped);
    CHECK(rule == "exists.pack");
    auto* m = std::get_if<IMalloc>(&c.program[0].v);
    REQUIRE(m != nullptr);
    CHECK(m->bits == 96);  // 64 header + 32 payload
  }

  SUBCASE("struct.malloc pays the declared sum") {
    Configuration c{{}, {instr(IVal{v_i32(1)}), instr(IVal{v_num(NumType::I64, 2)}),
                         instr(IStructMalloc{{Size::constant(32), Size::constant(64)}, UNR})}};
    std::string rule;
    REQUIRE(step(c, &rule).kind == StepKind::Stepped);
    CHECK(rule == "struct.malloc");
    auto* m = std::get_if<IMalloc>(&c.program[0].v);
    REQUIRE(m != nullptr);
    CHECK(m->bits == 96);
  }

  SUBCASE("array.malloc pays j * sz(v) and replicates the value") {
    Configuration c{{}, {instr(IVal{v_i32(5)}), instr(IVal{v_i32(3)}),
                         instr(IArrayMalloc{UNR})}};
    std::string rule;
    REQUIRE(step(c, &rule).kind == StepKind::Stepped);
    CHECK(rule == "array.malloc");
    auto* m = std::get_if<IMalloc>(&c.program[0].v);
    REQUIRE(m != nullptr);
    CHECK(m->bits == 96);
    auto* hv = std::get_if<ArrayHV>(&m->hv);
    REQUIRE(hv != nullptr);
    REQUIRE(hv->elems.size() == 3);
    CHECK(hv->elems[0] == v_i32(5));
    CHECK(hv->elems[2] == v_i32(5));
  }

  SUBCASE("array.malloc with a negative length traps") {
    auto r = run_values({}, {instr(IVal{v_i32(5)}), instr(IVal{v_i32(uint32_t(-1))}),
                             instr(IArrayMalloc{UNR})});
    REQUIRE(r.kind == RunKind::Trapped);
    CHECK(r.detail == "array.malloc with a negative length");
  }

  SUBCASE("linear qualifier allocates in linear memory") {
    Configuration c{{}, {instr(IVal{v_i32(7)}), instr(IVariantMalloc{0, {ty_i32()}, LIN})}};
    REQUIRE(step(c).kind == StepKind::Stepped);
    REQUIRE(step(c).kind == StepKind::Stepped);
    CHECK(c.store.lin.size() == 1);
    CHECK(c.store.unr.empty());
  }
}

TEST_CASE("array access: reads, writes, bounds traps") {
  Store s;
  s.unr[0] = Cell{ArrayHV{{v_i32(10), v_i32(11), v_i32(12)}}, 96, ArrayHT{ty_i32()}};
  InstrSeq getAt = {instr(IVal{v_ref(uloc(0))}), instr(IVal{v_i32(1)}), instr(IArrayGet{})};

  SUBCASE("get leaves the reference below the element") {
    auto r = run_values(s, getAt);
    REQUIRE(r.kind == RunKind::Done);
    REQUIRE(r.results.size() == 2);
    CHECK(r.results[0] == v_ref(uloc(0)));
    CHECK(r.results[1] == v_i32(11));
  }

  SUBCASE("set writes in place") {
    Configuration c{s, {instr(IVal{v_ref(uloc(0))}), instr(IVal{v_i32(2)}),
                        instr(IVal{v_i32(99)}), instr(IArraySet{})}};
    RunResult r = run(c);
    REQUIRE(r.kind == RunKind::Done);
    CHECK(std::get<ArrayHV>(c.store.unr[0].hv).elems[2] == v_i32(99));
  }

  SUBCASE("j >= length traps") {
    auto r = run_values(s, {instr(IVal{v_ref(uloc(0))}), instr(IVal{v_i32(9)}),
                            instr(IArrayGet{})});
    REQUIRE(r.kind == RunKind::Trapped);
    CHECK(r.detail == "array index 9 out of bounds for length 3");
  }

  SUBCASE("j < 0 traps") {
    auto r = run_values(s, {instr(IVal{v_ref(uloc(0))}), instr(IVal{v_i32(uint32_t(-1))}),
                            instr(IArrayGet{})});
    REQUIRE(r.kind == RunKind::Trapped);

    auto r2 = run_values(s, {instr(IVal{v_ref(uloc(0))}), instr(IVal{v_i32(uint32_t(-1))}),
                             instr(IVal{v_i32(5)}), instr(IArraySet{})});
    REQUIRE(r2.kind == RunKind::Trapped);
  }
}

TEST_CASE("struct access and strong updates") {
  Store s;
  s.lin[1] = Cell{StructHV{{v_i32(5)}, {64}}, 64, ht_struct({{ty_i32(), 64}})};

  SUBCASE("get copies the field, ref stays") {
    auto r = run_values(s, {instr(IVal{v_ref(lloc(1))}), instr(IStructGet{0})});
    REQUIRE(r.kind == RunKind::Done);
    REQUIRE(r.results.size() == 2);
    CHECK(r.results[1] == v_i32(5));
  }

  SUBCASE("strong update retypes the cell") {
    Configuration c{s, {instr(IVal{v_ref(lloc(1))}), instr(IVal{v_num(NumType::I64, 7)}),
                        instr(IStructSet{0})}};
    RunResult r = run(c);
    REQUIRE(r.kind == RunKind::Done);
    const Cell& cell = c.store.lin[1];
    CHECK(std::get<StructHV>(cell.hv).fields[0] == v_num(NumType::I64, 7));
    CHECK(std::get<StructHT>(cell.ht).fields[0].ty == ty_unr(pt_i64()));
    CHECK(std::get<StructHT>(cell.ht).fields[0].size == Size::constant(64));
  }

  SUBCASE("swap returns the old value above the ref") {
    auto r = run_values(s, {instr(IVal{v_ref(lloc(1))}), instr(IVal{v_i32(9)}),
                            instr(IStructSwap{0})});
    REQUIRE(r.kind == RunKind::Done);
    REQUIRE(r.results.size() == 2);
    CHECK(r.results[0] == v_ref(lloc(1)));
    CHECK(r.results[1] == v_i32(5));
  }

  SUBCASE("free deletes the linear cell; a second free is a hard fault") {
    Configuration c{s, {instr(IVal{v_ref(lloc(1))}), instr(IStructFree{})}};
    REQUIRE(step(c).kind == StepKind::Stepped);
    CHECK(c.store.lin.empty());

    Configuration c2{c.store, {instr(IVal{v_ref(lloc(1))}), instr(IStructFree{})}};
    StepOutcome so = step(c2);
    CHECK(so.kind == StepKind::Stuck);
  }
}

TEST_CASE("linear variant.case and exists.unpack: overwrite then free, exact traces") {
  SUBCASE("variant.case on a linear cell") {
    Store s;
    s.lin[0] = Cell{VariantHV{0, sp(v_i32(5))}, 64, HeapType{VariantHT{{ty_i32()}}}};
    IVariantCase vc;
    vc.qual = LIN;
    vc.ht = VariantHT{{ty_i32()}};
    vc.arrow = {{}, {ty_i32()}};
    vc.arms = {{}};  // the payload itself is the result
    Configuration c{s, {instr(IVal{v_ref(lloc(0))}), instr(vc)}};

    std::string rule;
    REQUIRE(step(c, &rule).kind == StepKind::Stepped);
    CHECK(rule == "variant.case-lin");
    // the payload has been replaced with an empty array before the arm runs
    REQUIRE(c.store.lin.count(0) == 1);
    auto* emptied = std::get_if<ArrayHV>(&c.store.lin[0].hv);
    REQUIRE(emptied != nullptr);
    CHECK(emptied->elems.empty());

    std::vector<std::string> trace;
    RunOptions opts;
    opts.trace = &trace;
    RunResult r = run(c, opts);
    expect_done(r, {v_i32(5)});
    CHECK(trace == std::vector<std::string>{"free", "label-end"});
    CHECK(c.store.lin.empty());
  }

  SUBCASE("unrestricted variant.case keeps the cell and the reference") {
    Store s;
    s.unr[3] = Cell{VariantHV{1, sp(v_i32(8))}, 64, HeapType{VariantHT{{ty_unit(), ty_i32()}}}};
    IVariantCase vc;
    vc.qual = UNR;
    vc.ht = VariantHT{{ty_unit(), ty_i32()}};
    vc.arrow = {{}, {ty_i32()}};
    vc.arms = {{instr(IDrop{}), instr(IVal{v_i32(0)})}, {}};
    Configuration c{s, {instr(IVal{v_ref(uloc(3))}), instr(vc)}};
    RunResult r = run(c);
    REQUIRE(r.kind == RunKind::Done);
    REQUIRE(r.results.size() == 2);
    CHECK(r.results[0] == v_ref(uloc(3)));
    CHECK(r.results[1] == v_i32(8));
    CHECK(c.store.unr.count(3) == 1);  // still allocated (it is rooted)
  }

  SUBCASE("exists.unpack on a linear cell") {
    HeapType htex = ExHT{UNR, Size::constant(64), ty(pt_var(0), UNR)};
    Store s;
    s.lin[0] = Cell{PackHV{pt_num(NumType::I64), sp(v_num(NumType::I64, 3)), htex}, 128, htex};
    IExistsUnpack up;
    up.qual = LIN;
    up.ht = htex;
    up.arrow = {{}, {ty_unr(pt_i64())}};
    up.body = {};  // payload falls through; its type is the substituted witness
    Configuration c{s, {instr(IVal{v_ref(lloc(0))}), instr(up)}};

    std::vector<std::string> trace;
    RunOptions opts;
    opts.trace = &trace;
    RunResult r = run(c, opts);
    expect_done(r, {v_num(NumType::I64, 3)});
    CHECK(trace == std::vector<std::string>{"exists.unpack-lin", "free", "label-end"});
    CHECK(c.store.lin.empty());
  }
}

TEST_CASE("memunpack substitutes the witness location") {
  Store s;
  s.unr[4] = Cell{ArrayHV{{v_i32(6)}}, 32, ArrayHT{ty_i32()}};
  Value pkg{MempackV{uloc(4), sp(v_ref(uloc(4)))}, {}};
  IMemunpack mu;
  mu.arrow = {{}, {ty_unr(pt_ref(Privilege::RW, uloc(4), ArrayHT{ty_i32()})), ty_i32()}};
  // body sees the packaged ref; mempack at the bound location rebuilds and
  // tears down a package purely on the stack, then the array is read
  mu.body = {instr(IMempack{Loc::var(0)}), instr(IMemunpack{{{}, {ty_i32()}}, {}, {}}),
             instr(IVal{v_i32(0)}), instr(IArrayGet{})};
  auto r = run_values(s, {instr(IVal{pkg}), instr(mu)});
  REQUIRE(r.kind == RunKind::Done);
  REQUIRE(r.results.size() == 2);
  CHECK(r.results[0] == v_ref(uloc(4)));
  CHECK(r.results[1] == v_i32(6));
}

TEST_CASE("erased forms restructure the stack") {
  SUBCASE("qualify stamps, group/ungroup bundle") {
    auto r = run_values({}, {instr(IVal{v_i32(1)}), instr(IQualify{LIN})});
    REQUIRE(r.kind == RunKind::Done);
    REQUIRE(r.results[0].qualHint.has_value());
    CHECK(*r.results[0].qualHint == LIN);

    auto r2 = run_values({}, {instr(IVal{v_i32(1)}), instr(IVal{v_i32(2)}),
                              instr(IGroup{2, UNR}), instr(IUngroup{})});
    expect_done(r2, {v_i32(1), v_i32(2)});
  }

  SUBCASE("fold and unfold") {
    PreType rec = pt_rec(UNR, ty_unr(pt_unit()));
    auto r = run_values({}, {instr(IVal{v_unit()}), instr(IRecFold{rec}), instr(IRecUnfold{})});
    expect_done(r, {v_unit()});
  }

  SUBCASE("ref.split / ref.join round-trip through cap and ptr") {
    Store s;
    s.lin[1] = Cell{StructHV{{v_i32(5)}, {32}}, 32, kStI32};
    auto r = run_values(s, {instr(IVal{v_ref(lloc(1))}), instr(IRefSplit{}),
                            instr(IRefJoin{})});
    REQUIRE(r.kind == RunKind::Done);
    REQUIRE(r.results.size() == 1);
    CHECK(r.results[0] == v_ref(lloc(1)));
  }

  SUBCASE("cap.split / cap.join") {
    Store s;
    s.lin[1] = Cell{StructHV{{v_i32(5)}, {32}}, 32, kStI32};
    Configuration c{s, {instr(IVal{v_ref(lloc(1))}), instr(IRefSplit{}), instr(IDrop{}),
                        instr(ICapSplit{})}};
    RunResult r = run(c);
    REQUIRE(r.kind == RunKind::Done);
    REQUIRE(r.results.size() == 2);
    auto* cap = std::get_if<CapV>(&r.results[0].v);
    REQUIRE(cap != nullptr);
    CHECK(cap->priv == Privilege::R);
    CHECK(std::holds_alternative<OwnV>(r.results[1].v));

    InstrSeq again = {instr(IVal{r.results[0]}), instr(IVal{r.results[1]}), instr(ICapJoin{})};
    RunResult r2 = run_values(c.store, again);
    REQUIRE(r2.kind == RunKind::Done);
    auto* cap2 = std::get_if<CapV>(&r2.results[0].v);
    REQUIRE(cap2 != nullptr);
    CHECK(cap2->priv == Privilege::RW);
  }

  SUBCASE("ref.demote marks the value read-only") {
    Store s;
    s.unr[1] = Cell{StructHV{{v_i32(5)}, {32}}, 32, kStI32};
    auto r = run_values(s, {instr(IVal{v_ref(uloc(1))}), instr(IRefDemote{})});
    REQUIRE(r.kind == RunKind::Done);
    auto* ref = std::get_if<RefV>(&r.results[0].v);
    REQUIRE(ref != nullptr);
    CHECK(ref->priv == Privilege::R);
  }
}

TEST_CASE("calls resolve closures and substitute indices") {
  // identity over a bounded pretype variable
  auto idf = mkfunc(mkft({TypeQ{UNR, Size::constant(32), false}},
                         {ty(pt_var(0), UNR)}, {ty(pt_var(0), UNR)}),
                    {}, {instr(IGetLocal{0, UNR})});
  Store s;
  Instance ins;
  ins.funcs.push_back({0, idf});
  ins.table.push_back({0, idf});
  s.instances.push_back(ins);

  SUBCASE("direct call") {
    std::vector<std::string> trace;
    RunOptions opts;
    opts.trace = &trace;
    Configuration c{s, {instr(IVal{v_i32(7)}), instr(ICall{0, {Index{pt_i32()}}})}};
    RunResult r = run(c, opts);
    expect_done(r, {v_i32(7)});
    CHECK(trace == std::vector<std::string>{"call", "get_local", "frame-end"});
  }

  SUBCASE("call through a coderef instantiated on the stack") {
    InstrSeq p = {instr(IVal{v_i32(7)}), instr(ICodeRef{0}),
                  instr(IInst{{Index{pt_i32()}}}), instr(ICallIndirect{})};
    expect_done(run_values(s, p), {v_i32(7)});
  }

  SUBCASE("administrative call_cl carries its own closure") {
    InstrSeq p = {instr(IVal{v_i32(7)}), instr(ICallCl{0, idf, {Index{pt_i32()}}})};
    expect_done(run_values(s, p), {v_i32(7)});
  }

  SUBCASE("size-polymorphic locals become concrete at the call") {
    // one extra local of size var 0; body stores the arg there and reads it back
    auto f = mkfunc(mkft({SizeQ{{}, {}}, TypeQ{UNR, Size::var(0), false}},
                         {ty(pt_var(0), UNR)}, {ty(pt_var(0), UNR)}),
                    {Size::var(0)},
                    {instr(IGetLocal{0, UNR}), instr(ISetLocal{1}), instr(IGetLocal{1, UNR})});
    Store s2;
    Instance i2;
    i2.funcs.push_back({0, f});
    s2.instances.push_back(i2);
    InstrSeq p = {instr(IVal{v_i32(7)}),
                  instr(ICall{0, {Index{Size::constant(32)}, Index{pt_i32()}}})};
    expect_done(run_values(s2, p), {v_i32(7)});
  }

  SUBCASE("calling with the wrong number of indices is a hard fault") {
    Configuration c{s, {instr(IVal{v_i32(7)}), instr(ICall{0, {}})}};
    RunResult r = run(c);
    CHECK(r.kind == RunKind::Stuck);
  }
}

TEST_CASE("collector: exact complement of reachability") {
  SUBCASE("one unrooted unrestricted location is removed") {
    Store s;
    s.unr[0] = Cell{ArrayHV{}, 32, ArrayHT{ty_i32()}};
    Configuration c{s, {}};
    CHECK(collect(c) == 1);
    CHECK(c.store.unr.empty());
  }

  SUBCASE("rooted unr referencing lin: both retained") {
    Store s;
    s.lin[1] = Cell{StructHV{{v_i32(6)}, {32}}, 32, kStI32};
    s.unr[0] = Cell{StructHV{{v_ref(lloc(1))}, {32}}, 32,
                    ht_struct({{ty(pt_ref(Privilege::RW, lloc(1), kStI32), LIN), 32}})};
    Configuration c{s, {instr(IVal{v_ref(uloc(0))})}};
    CHECK(collect(c) == 0);
    CHECK(c.store.unr.count(0) == 1);
    CHECK(c.store.lin.count(1) == 1);
  }

  SUBCASE("unrooted unr owning a lin: both removed") {
    Store s;
    s.lin[1] = Cell{StructHV{{v_i32(6)}, {32}}, 32, kStI32};
    s.unr[0] = Cell{StructHV{{v_ref(lloc(1))}, {32}}, 32,
                    ht_struct({{ty(pt_ref(Privilege::RW, lloc(1), kStI32), LIN), 32}})};
    Configuration c{s, {}};
    CHECK(collect(c) == 2);
    CHECK(c.store.unr.empty());
    CHECK(c.store.lin.empty());
  }

  SUBCASE("cycle of two unrooted unr locations: both removed") {
    Store s;
    s.unr[0] = Cell{ArrayHV{{v_ref(uloc(1))}}, 32, ArrayHT{ty_i32()}};
    s.unr[1] = Cell{ArrayHV{{v_ref(uloc(0))}}, 32, ArrayHT{ty_i32()}};
    Configuration c{s, {}};
    auto verdict = oracle_collect(s, {});
    CHECK(verdict.deadUnr == std::set<uint64_t>{0, 1});
    CHECK(collect(c) == 2);
    CHECK(c.store.unr.empty());
  }

  SUBCASE("a rooted cycle survives") {
    Store s;
    s.unr[0] = Cell{ArrayHV{{v_ref(uloc(1))}}, 32, ArrayHT{ty_i32()}};
    s.unr[1] = Cell{ArrayHV{{v_ref(uloc(0))}}, 32, ArrayHT{ty_i32()}};
    Configuration c{s, {instr(IVal{v_ref(uloc(1))})}};
    CHECK(collect(c) == 0);
    CHECK(c.store.unr.size() == 2);
  }

  SUBCASE("roots are found in nested bodies, locals, and globals") {
    Store s;
    s.unr[0] = Cell{ArrayHV{}, 32, ArrayHT{ty_i32()}};
    s.unr[1] = Cell{ArrayHV{}, 32, ArrayHT{ty_i32()}};
    s.unr[2] = Cell{ArrayHV{}, 32, ArrayHT{ty_i32()}};
    s.unr[3] = Cell{ArrayHV{}, 32, ArrayHT{ty_i32()}};
    Instance ins;
    ins.globals = {v_ref(uloc(2))};
    ins.globalTypes = {{false, pt_unit()}};
    s.instances.push_back(ins);

    IBlock b;
    b.arrow = {{}, {}};
    b.body = {instr(IVal{v_ref(uloc(0))}), instr(IDrop{})};
    ILocalFrame f;
    f.arity = 0;
    f.inst = 0;
    f.locals = {LocalSlotV{v_ref(uloc(1)), 32}};
    f.body = {instr(b)};
    Configuration c{s, {instr(f)}};
    CHECK(collect(c) == 1);  // only loc 3 is unreachable
    CHECK(c.store.unr.count(3) == 0);
    CHECK(c.store.unr.size() == 3);
  }

  SUBCASE("randomized stores agree with the brute-force oracle") {
    std::mt19937 seedGen(20260819);
    for (int iter = 0; iter < 120; ++iter) {
      StoreGen gen{uint32_t(seedGen())};
      size_t nLin = 1 + gen.pick(80);
      size_t nUnr = 1 + gen.pick(120);
      Store s = gen.make(nLin, nUnr, (nLin + nUnr) * 2);

      std::vector<Loc> roots;
      InstrSeq program;
      size_t nRoots = gen.pick(1 + (nLin + nUnr) / 3);
      for (size_t i = 0; i < nRoots; ++i) {
        if (auto l = gen.claim()) {
          roots.push_back(*l);
          program.push_back(instr(IVal{v_ref(*l)}));
        }
      }

      OracleVerdict want = oracle_collect(s, roots);
      std::set<uint64_t> unrBefore, linBefore;
      for (const auto& [a, cell] : s.unr) unrBefore.insert(a);
      for (const auto& [a, cell] : s.lin) linBefore.insert(a);

      Configuration c{std::move(s), std::move(program)};
      size_t removed = collect(c);
      CHECK(removed == want.deadUnr.size() + want.deadLin.size());
      for (uint64_t a : unrBefore)
        CHECK(c.store.unr.count(a) == (want.deadUnr.count(a) ? 0u : 1u));
      for (uint64_t a : linBefore)
        CHECK(c.store.lin.count(a) == (want.deadLin.count(a) ? 0u : 1u));

      // idempotence: a second collection finds nothing
      CHECK(collect(c) == 0);
    }
  }
}

TEST_CASE("run: fuel, scheduled collection, trace") {
  SUBCASE("nop completes with no results") {
    auto r = run_values({}, {instr(INop{})}, RunOptions{10, 64, nullptr});
    REQUIRE(r.kind == RunKind::Done);
    CHECK(r.results.empty());
    CHECK(r.steps == 1);
  }

  SUBCASE("an infinite loop runs out of fuel") {
    ILoop lp;
    lp.arrow = {{}, {}};
    lp.body = {instr(IVal{v_i32(1)}), instr(IBrIf{0})};
    auto r = run_values({}, {instr(lp)}, RunOptions{100, 64, nullptr});
    CHECK(r.kind == RunKind::OutOfFuel);
    CHECK(r.steps == 100);
  }

  SUBCASE("garbage is collected on schedule and before returning") {
    // allocate, then drop the package on the floor
    InstrSeq p = {instr(IVal{v_i32(7)}), instr(IVariantMalloc{0, {ty_i32()}, UNR}),
                  instr(IDrop{})};
    auto r1 = run_values({}, p, RunOptions{100, 0, nullptr});  // only the final collect
    REQUIRE(r1.kind == RunKind::Done);
    CHECK(r1.collected == 1);

    auto r2 = run_values({}, p, RunOptions{100, 1, nullptr});  // collects every step
    REQUIRE(r2.kind == RunKind::Done);
    CHECK(r2.collected == 1);
  }

  SUBCASE("the step trace names each rule once") {
    std::vector<std::string> trace;
    RunOptions opts;
    opts.trace = &trace;
    auto r = run_values({}, {instr(IVal{v_i32(2)}), instr(IVal{v_i32(3)}),
                             num(NumType::I32, NumOp::Add)},
                        opts);
    expect_done(r, {v_i32(5)});
    CHECK(trace == std::vector<std::string>{"num"});
  }

  SUBCASE("stuck configurations are reported, not looped") {
    auto r = run_values({}, {instr(IDrop{})});
    CHECK(r.kind == RunKind::Stuck);
    CHECK(!r.detail.empty());
  }
}

TEST_CASE("stepped programs stay well-typed") {
  SUBCASE("arithmetic") {
    Configuration c{{}, {instr(IVal{v_i32(2)}), instr(IVal{v_i32(3)}),
                         num(NumType::I32, NumOp::Add)}};
    StepOutcome so = step_checked(c, {ty_i32()});
    REQUIRE(so.kind == StepKind::Done);
    CHECK(so.results[0] == v_i32(5));
  }

  SUBCASE("allocate, unpack, analyze, free: the full linear lifecycle") {
    IVariantCase vc;
    vc.qual = LIN;
    vc.ht = VariantHT{{ty_i32()}};
    vc.arrow = {{}, {ty_i32()}};
    vc.arms = {{}};
    IMemunpack mu;
    mu.arrow = {{}, {ty_i32()}};
    mu.body = {instr(vc)};
    Configuration c{{}, {instr(IVal{v_i32(5)}), instr(IVariantMalloc{0, {ty_i32()}, LIN}),
                         instr(mu)}};
    StepOutcome so = step_checked(c, {ty_i32()});
    REQUIRE(so.kind == StepKind::Done);
    CHECK(so.results[0] == v_i32(5));
    CHECK(c.store.lin.empty());
  }

  SUBCASE("strong update through a linear reference") {
    Store s;
    s.lin[1] = Cell{StructHV{{v_i32(5)}, {64}}, 64, ht_struct({{ty_i32(), 64}})};
    Configuration c{s, {instr(IVal{v_ref(lloc(1))}), instr(IVal{v_num(NumType::I64, 7)}),
                        instr(IStructSet{0}), instr(IStructFree{})}};
    StepOutcome so = step_checked(c, {});
    REQUIRE(so.kind == StepKind::Done);
    CHECK(c.store.lin.empty());
  }

  SUBCASE("a call with instantiation") {
    auto idf = mkfunc(mkft({TypeQ{UNR, Size::constant(32), false}},
                           {ty(pt_var(0), UNR)}, {ty(pt_var(0), UNR)}),
                      {}, {instr(IGetLocal{0, UNR})});
    Store s;
    Instance ins;
    ins.funcs.push_back({0, idf});
    s.instances.push_back(ins);
    ILocalFrame outer;
    outer.arity = 1;
    outer.inst = 0;
    outer.body = {instr(IVal{v_i32(7)}), instr(ICall{0, {Index{pt_i32()}}})};
    outer.results = {ty_i32()};
    Configuration c{s, {instr(outer)}};
    StepOutcome so = step_checked(c, {ty_i32()});
    REQUIRE(so.kind == StepKind::Done);
    CHECK(so.results[0] == v_i32(7));
  }
}

TEST_CASE("linear hygiene: one reachable root per linear address at every step") {
  // Count reference-value roots of each linear address everywhere a value
  // can live: the instruction tree, frame locals, globals, heap payloads,
  // and pending administrative mallocs.
  struct Census {
    std::map<uint64_t, int> counts;
    void value(const Value& v) {
      if (auto* r = std::get_if<RefV>(&v.v)) {
        if (!r->loc.is_var() && r->loc.mem == Mem::Lin) counts[r->loc.addr]++;
      } else if (auto* c = std::get_if<CapV>(&v.v)) {
        if (c->priv == Privilege::RW && !c->loc.is_var() && c->loc.mem == Mem::Lin)
          counts[c->loc.addr]++;
      } else if (auto* o = std::get_if<OwnV>(&v.v)) {
        if (!o->loc.is_var() && o->loc.mem == Mem::Lin) counts[o->loc.addr]++;
      } else if (auto* g = std::get_if<GroupV>(&v.v)) {
        for (const Value& e : g->elems) value(e);
      } else if (auto* f = std::get_if<FoldV>(&v.v)) {
        if (f->inner) value(*f->inner);
      } else if (auto* m = std::get_if<MempackV>(&v.v)) {
        if (m->inner) value(*m->inner);
      }
    }
    void heap(const HeapValue& hv) {
      if (auto* st = std::get_if<StructHV>(&hv))
        for (const Value& f : st->fields) value(f);
      if (auto* a = std::get_if<ArrayHV>(&hv))
        for (const Value& e : a->elems) value(e);
      if (auto* vr = std::get_if<VariantHV>(&hv))
        if (vr->payload) value(*vr->payload);
      if (auto* p = std::get_if<PackHV>(&hv))
        if (p->payload) value(*p->payload);
    }
    void instrs(const InstrSeq& seq) {
      for (const Instr& in : seq) {
        if (auto* iv = std::get_if<IVal>(&in.v)) value(iv->val);
        if (auto* b = std::get_if<IBlock>(&in.v)) instrs(b->body);
        if (auto* l = std::get_if<ILoop>(&in.v)) instrs(l->body);
        if (auto* i = std::get_if<IIte>(&in.v)) {
          instrs(i->thn);
          instrs(i->els);
        }
        if (auto* m = std::get_if<IMemunpack>(&in.v)) instrs(m->body);
        if (auto* u = std::get_if<IExistsUnpack>(&in.v)) instrs(u->body);
        if (auto* vc = std::get_if<IVariantCase>(&in.v))
          for (const InstrSeq& arm : vc->arms) instrs(arm);
        if (auto* lb = std::get_if<ILabel>(&in.v)) {
          instrs(lb->cont);
          instrs(lb->body);
        }
        if (auto* lf = std::get_if<ILocalFrame>(&in.v)) {
          for (const LocalSlotV& sl : lf->locals) value(sl.val);
          instrs(lf->body);
        }
        if (auto* ml = std::get_if<IMalloc>(&in.v)) heap(ml->hv);
      }
    }
  };
  auto census = [](const Configuration& c) {
    Census cs;
    cs.instrs(c.program);
    for (const Instance& ins : c.store.instances)
      for (const Value& g : ins.globals) cs.value(g);
    for (const auto& [a, cell] : c.store.lin) cs.heap(cell.hv);
    for (const auto& [a, cell] : c.store.unr) cs.heap(cell.hv);
    return cs.counts;
  };
  auto assert_hygiene = [&](Configuration c) {
    for (int i = 0; i < 10'000; ++i) {
      auto counts = census(c);
      for (const auto& [a, cell] : c.store.lin) {
        CAPTURE(a);
        CHECK(counts[a] == 1);
      }
      StepOutcome so = step(c);
      REQUIRE(so.kind != StepKind::Stuck);
      if (so.kind != StepKind::Stepped) return;
    }
    FAIL("program did not terminate");
  };

  SUBCASE("allocation and consumption") {
    IVariantCase vc;
    vc.qual = LIN;
    vc.ht = VariantHT{{ty_i32()}};
    vc.arrow = {{}, {ty_i32()}};
    vc.arms = {{}};
    IMemunpack mu;
    mu.arrow = {{}, {ty_i32()}};
    mu.body = {instr(vc)};
    assert_hygiene({{}, {instr(IVal{v_i32(5)}), instr(IVariantMalloc{0, {ty_i32()}, LIN}),
                         instr(mu)}});
  }

  SUBCASE("a linear ref moving through locals and a strong update") {
    Store s;
    s.instances.push_back({});
    s.lin[1] = Cell{StructHV{{v_i32(5)}, {64}}, 64, ht_struct({{ty_i32(), 64}})};
    ILocalFrame f;
    f.arity = 0;
    f.inst = 0;
    f.locals = {LocalSlotV{v_ref(lloc(1)), 32}};
    f.body = {instr(IGetLocal{0, LIN}), instr(IVal{v_num(NumType::I64, 9)}),
              instr(IStructSet{0}), instr(IStructFree{})};
    assert_hygiene({s, {instr(f)}});
  }
}

TEST_CASE("instantiate links modules") {
  RWModule base;
  base.name = "base";
  {
    FuncDef f;
    f.exports = {"answer"};
    f.type = mkft({}, {}, {ty_i32()});
    f.body = {instr(IVal{v_i32(40)}), instr(IVal{v_i32(2)}), num(NumType::I32, NumOp::Add)};
    base.funcs.push_back(f);
    GlobalDef g;
    g.exports = {"ten"};
    g.mut = false;
    g.pre = pt_i32();
    g.init = {instr(IVal{v_i32(10)})};
    base.globals.push_back(g);
    base.table.entries = {0};
    base.table.exports = {"tbl"};
  }

  SUBCASE("a single module instantiates and its initializer runs") {
    DiagnosticList d;
    auto store = instantiate({base}, {}, d);
    REQUIRE(d.ok());
    REQUIRE(store.has_value());
    REQUIRE(store->instances.size() == 1);
    CHECK(store->instances[0].globals[0] == v_i32(10));
    CHECK(store->instances[0].table.size() == 1);

    // call the exported function through the linked store
    Configuration c{*store, {instr(ICall{0, {}})}};
    expect_done(run(c), {v_i32(42)});
  }

  SUBCASE("imports alias the exporter's closure and run in its instance") {
    RWModule a;
    a.name = "a";
    GlobalDef ga;
    ga.exports = {"g"};
    ga.pre = pt_i32();
    ga.init = {instr(IVal{v_i32(10)})};
    a.globals.push_back(ga);
    FuncDef fa;
    fa.exports = {"getg"};
    fa.type = mkft({}, {}, {ty_i32()});
    fa.body = {instr(IGetGlobal{0})};
    a.funcs.push_back(fa);

    RWModule b;
    b.name = "b";
    FuncDef imp;
    imp.importName = "getg";
    imp.type = mkft({}, {}, {ty_i32()});
    b.funcs.push_back(imp);
    GlobalDef gb;
    gb.pre = pt_i32();
    gb.init = {instr(IVal{v_i32(99)})};
    b.globals.push_back(gb);

    DiagnosticList d;
    auto store = instantiate({a, b}, {}, d);
    REQUIRE(d.ok());
    REQUIRE(store.has_value());
    // calling b's import must read a's global, not b's
    ILocalFrame f;
    f.arity = 1;
    f.inst = 1;
    f.body = {instr(ICall{0, {}})};
    f.results = {ty_i32()};
    Configuration c{*store, {instr(f)}};
    expect_done(run(c), {v_i32(10)});
  }

  SUBCASE("the link map renames imports") {
    RWModule client;
    client.name = "client";
    FuncDef imp;
    imp.importName = "the_answer";
    imp.type = mkft({}, {}, {ty_i32()});
    client.funcs.push_back(imp);

    DiagnosticList d;
    auto store = instantiate({base, client}, {{"the_answer", "answer"}}, d);
    REQUIRE(d.ok());
    REQUIRE(store.has_value());
  }

  SUBCASE("unresolved imports are reported") {
    RWModule client;
    client.name = "client";
    FuncDef imp;
    imp.importName = "missing";
    imp.type = mkft({}, {}, {ty_i32()});
    client.funcs.push_back(imp);

    DiagnosticList d;
    auto store = instantiate({base, client}, {}, d);
    CHECK(!store.has_value());
    CHECK(has_code(d, "LNK001"));
  }

  SUBCASE("a qualifier mismatch on a reference type fails the link") {
    auto refIn = [&](Qual q) {
      return mkft({LocQ{}},
                  {ty(pt_ref(Privilege::RW, Loc::var(0), ArrayHT{ty_i32()}), q)}, {});
    };
    RWModule provider;
    provider.name = "provider";
    FuncDef f;
    f.exports = {"stash"};
    f.type = refIn(UNR);
    f.body = {instr(IGetLocal{0, UNR}), instr(IDrop{})};
    provider.funcs.push_back(f);

    RWModule client;
    client.name = "client";
    FuncDef imp;
    imp.importName = "stash";
    imp.type = refIn(LIN);  // wants a linear ref; export provides unrestricted
    client.funcs.push_back(imp);

    DiagnosticList d;
    auto store = instantiate({provider, client}, {}, d);
    CHECK(!store.has_value());
    CHECK(has_code(d, "LNK002"));
  }

  SUBCASE("a trapping global initializer fails the link") {
    RWModule m;
    m.name = "m";
    GlobalDef g;
    g.pre = pt_i32();
    g.init = {instr(IUnreachable{})};
    m.globals.push_back(g);

    DiagnosticList d;
    auto store = instantiate({m}, {}, d);
    CHECK(!store.has_value());
    CHECK(has_code(d, "LNK003"));
  }

  SUBCASE("imported globals and tables") {
    RWModule client;
    client.name = "client";
    GlobalDef g;
    g.importName = "ten";
    g.mut = false;
    g.pre = pt_i32();
    client.globals.push_back(g);
    client.table.importName = "tbl";

    DiagnosticList d;
    auto store = instantiate({base, client}, {}, d);
    REQUIRE(d.ok());
    REQUIRE(store.has_value());
    CHECK(store->instances[1].globals[0] == v_i32(10));
    CHECK(store->instances[1].table.size() == 1);
  }
}

TEST_CASE("an incrementing counter module: two bumps through the linked store") {
  // global counter, one exported bump function adding a fixed increment
  constexpr uint32_t kIncrement = 3;
  RWModule m;
  m.name = "counter";
  GlobalDef g;
  g.mut = true;
  g.pre = pt_i32();
  g.init = {instr(IVal{v_i32(0)})};
  m.globals.push_back(g);
  FuncDef bump;
  bump.exports = {"bump"};
  bump.type = mkft({}, {}, {ty_i32()});
  bump.body = {instr(IGetGlobal{0}), instr(IVal{v_i32(kIncrement)}),
               num(NumType::I32, NumOp::Add), instr(ISetGlobal{0}), instr(IGetGlobal{0})};
  m.funcs.push_back(bump);

  DiagnosticList d;
  auto store = instantiate({m}, {}, d);
  REQUIRE(store.has_value());
  Configuration c{*store, {instr(ICall{0, {}}), instr(IDrop{}), instr(ICall{0, {}})}};
  expect_done(run(c), {v_i32(2 * kIncrement)});
}

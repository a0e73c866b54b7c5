#pragma once

// Small-step interpreter for running configurations. A configuration is a
// store plus one instruction sequence in which leading `IVal`s form the
// operand stack; nested `ILabel`/`ILocalFrame` instructions carry the rest
// of the control and call structure. `step` performs exactly one reduction
// on the innermost redex, so the progress/preservation harness can re-check
// the configuration between any two reductions.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rw/diag.hpp"
#include "rw/ir.hpp"
#include "rw/typecheck.hpp"

namespace rw {

// A function resolved to the instance whose globals and table it closes
// over. Imports alias the exporter's closure, so calling through them runs
// in the exporting instance.
struct Closure {
  uint32_t inst = 0;
  std::shared_ptr<const FuncDef> code;
};

struct Instance {
  std::vector<Closure> funcs;
  std::vector<Value> globals;
  std::vector<GlobalType> globalTypes;  // parallel to globals
  std::vector<Closure> table;
};

// A heap cell owns its payload, remembers the allocation's slot size in
// bits, and carries the cell type recorded at malloc time. Strong updates
// rewrite the type along with the payload, so a store typing can be read
// off at any step.
struct Cell {
  HeapValue hv;
  uint64_t slotBits = 0;
  HeapType ht;
};

struct Store {
  std::vector<Instance> instances;
  std::map<uint64_t, Cell> lin, unr;
  uint64_t nextLin = 0, nextUnr = 0;  // addresses are never reused

  uint64_t alloc(Mem m, Cell c);
  Cell* find(const Loc& l);
  const Cell* find(const Loc& l) const;
};

// The typing view of a runtime store: instance signatures plus a copy of
// every cell. check_config consumes this directly.
StoreTyping store_typing(const Store& s);

struct Configuration {
  Store store;
  InstrSeq program;
};

enum class StepKind : uint8_t {
  Stepped,  // one reduction applied in place
  Done,     // no redex: the program is a row of values
  Trapped,  // the configuration aborted (unreachable, division, bounds)
  Stuck,    // no rule applies; impossible for well-typed configurations
};

struct StepOutcome {
  StepKind kind = StepKind::Stepped;
  std::vector<Value> results;  // Done only
  std::string detail;          // trap cause / stuck description
};

// One reduction. `rule` (when non-null) receives the name of the rule
// applied, one line's worth, for step traces.
StepOutcome step(Configuration& c, std::string* rule = nullptr);

// Removes exactly the unrestricted cells unreachable from the configuration's
// values (operand stack, nested locals, instance globals, and every value
// already inside live cells). A linear cell rooted by a removed cell belongs
// to the collector and is removed with it, transitively. Returns the number
// of cells removed.
size_t collect(Configuration& c);

enum class RunKind : uint8_t { Done, Trapped, OutOfFuel, Stuck };

struct RunOptions {
  uint64_t fuel = 1'000'000;
  uint64_t collectEvery = 64;                 // 0 disables interleaved collection
  std::vector<std::string>* trace = nullptr;  // appended one rule name per step
};

struct RunResult {
  RunKind kind = RunKind::Done;
  std::vector<Value> results;  // Done only
  std::string detail;          // trap cause / stuck description
  uint64_t steps = 0;
  size_t collected = 0;  // cells reclaimed across all collections
};

// Steps to completion, collecting every `collectEvery` reductions and once
// more before returning. A stuck configuration is a hard failure: the result
// says so and the caller must not treat it as a program outcome.
RunResult run(Configuration& c, const RunOptions& opts = {});

// Links the modules in order into one store. Each import resolves through
// `linkMap` (import name -> export name; absent entries resolve to the
// import name itself) against the exports of already-linked instances,
// matching signatures up to alpha-equivalence. Global initializers are
// evaluated with the interpreter. Returns nullopt and reports LNK
// diagnostics on unresolved imports, signature mismatches, or failed
// initializers.
std::optional<Store> instantiate(const std::vector<RWModule>& modules,
                                 const std::map<std::string, std::string>& linkMap,
                                 DiagnosticList& diags);

}  // namespace rw

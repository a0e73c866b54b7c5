#pragma once

// The algorithmic type checker. Instruction sequences are checked forward
// against per-block abstract stacks; linear slot usage is tracked in a
// ledger so a second use of a moved value reports LIN001 rather than a
// bare type mismatch. The same checker, pointed at a store typing, checks
// running configurations (used by the progress/preservation harness).

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "rw/constraints.hpp"
#include "rw/diag.hpp"
#include "rw/ir.hpp"

namespace rw {

struct GlobalType {
  bool mut = false;
  PreType pre;
  friend bool operator==(const GlobalType&, const GlobalType&) = default;
};

// The typing view of one module instance: function signatures, global slot
// types, and the (resolved) signatures of table entries.
struct ModuleEnv {
  std::vector<FunType> funcs;
  std::vector<GlobalType> globals;
  std::vector<FunType> table;
};

// Declared typing view of a module. Table entries out of range are skipped
// here and reported by check_module.
ModuleEnv module_env(const RWModule& m);

// A heap cell as the store typing sees it: the runtime heap value, the
// allocation's payload size in bits, and the recorded cell type.
struct HeapCell {
  HeapValue hv;
  uint64_t slotBits = 0;
  HeapType ht;
};

struct StoreTyping {
  std::vector<ModuleEnv> instances;
  std::map<uint64_t, HeapCell> unr, lin;
};

struct LocalSlot {
  Type type;
  Size size;
  friend bool operator==(const LocalSlot&, const LocalSlot&) = default;
};
using LocalEnv = std::vector<LocalSlot>;

// One entry per enclosing block: the branch payload types and the LocalEnv a
// branch must arrive with. Labels reconstructed from reduced configurations
// carry no declared exit locals; the first exit site fixes them.
struct LabelEntry {
  std::vector<Type> results;
  std::optional<LocalEnv> locals;
};

// Which local slots currently hold a live linear value, and which held one
// that has been moved out. Duplicate moves report LIN001.
struct LinearLedger {
  std::set<uint32_t> available;
  std::set<uint32_t> consumed;
};

struct FunctionEnv {
  std::vector<LabelEntry> labels;  // innermost last
  std::optional<std::vector<Type>> ret;
  BindEnv binders;
  std::vector<Qual> linear;  // per-block qualifier bounds, innermost last
};

// Per-instruction facts recorded during checking, in preorder over each
// body (an instruction's note precedes those of its sub-sequences). The
// lowering pass replays the same walk and reads layout-relevant types here.
struct InstrNote {
  std::vector<Type> ins, outs;        // stack effect
  std::optional<HeapType> heap;       // cell type for heap-op instructions
  std::optional<FunType> fun;         // resolved callee / coderef signature
  std::optional<LocalSlot> local;     // slot state before a local op
  bool dead = false;                  // skipped as unreachable
};

struct CheckedModule {
  DiagnosticList diags;
  std::vector<std::vector<InstrNote>> funcNotes;    // per function
  std::vector<std::vector<InstrNote>> globalNotes;  // per global initializer
  bool ok() const { return diags.ok(); }
};

CheckedModule check_module(const RWModule& m);

// Checks one running configuration: every heap cell against its recorded
// type, the instruction sequence against the result types, and exact
// consumption of the linear store (each linear location owned by exactly one
// value; none leaked). Instance indices inside the sequence refer to
// store.instances.
DiagnosticList check_config(const StoreTyping& store, const InstrSeq& program,
                            const std::vector<Type>& results);

// Value typing against a store typing. `usedLin` accumulates the linear
// locations consumed; claiming one twice is an error. check_value validates
// against an expected type, infer_value synthesizes one (honoring qualifier
// hints).
bool check_value(const StoreTyping& store, std::set<uint64_t>& usedLin, const Value& v,
                 const Type& expect, DiagnosticList& diags, const SourceSpan& span = {});
std::optional<Type> infer_value(const StoreTyping& store, std::set<uint64_t>& usedLin,
                                const Value& v, DiagnosticList& diags,
                                const SourceSpan& span = {});
bool check_heap_value(const StoreTyping& store, std::set<uint64_t>& usedLin, const HeapValue& hv,
                      const HeapType& ht, DiagnosticList& diags, const SourceSpan& span = {});

}  // namespace rw

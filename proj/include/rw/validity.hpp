#pragma once

// Well-formedness of types: scoping across the four namespaces, qualifier
// agreement inside products and recursive types, struct field size fit, and
// guardedness of recursion variables. Also the cap-freedom predicate used to
// keep capabilities out of the heap.

#include "rw/constraints.hpp"
#include "rw/diag.hpp"
#include "rw/ir.hpp"

namespace rw {

bool type_valid(const BindEnv& env, const Type& t, DiagnosticList& diags,
                const SourceSpan& span = {});
bool heaptype_valid(const BindEnv& env, const HeapType& h, DiagnosticList& diags,
                    const SourceSpan& span = {});
bool funtype_valid(const BindEnv& env, const FunType& f, DiagnosticList& diags,
                   const SourceSpan& span = {});

// True when no inhabitant of the type can carry a capability or ownership
// token. References themselves are cap-free regardless of what they point
// at, so this does not descend into heap types or coderef signatures.
bool no_caps(const BindEnv& env, const Type& t);
bool no_caps(const BindEnv& env, const HeapType& h);

// Scans a runtime value for capability or ownership tokens.
bool value_has_caps(const Value& v);

}  // namespace rw

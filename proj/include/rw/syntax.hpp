#pragma once

// Concrete syntax for .rwasm modules. The surface form names binders with
// $identifiers; parsing resolves them to de Bruijn indices and printing
// invents fresh names, so parse(print(m)) == m for any well-scoped module.
// The grammar is documented in docs/grammar.md.

#include <optional>
#include <string>
#include <string_view>

#include "rw/ir.hpp"
#include "rw/sexpr.hpp"

namespace rw {

struct ParseResult {
  std::optional<RWModule> module;
  DiagnosticList diags;
  bool ok() const { return module.has_value() && diags.ok(); }
};

ParseResult parse_module(std::string_view src, const std::string& file = "<input>");
std::string print_module(const RWModule& m);

std::optional<NumType> numtype_from_symbol(std::string_view s);

}  // namespace rw

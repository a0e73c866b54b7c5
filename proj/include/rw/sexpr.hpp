#pragma once

// S-expression reader shared by the .rwasm, .mlx and .l3 front ends.
// Atoms are symbols, numeric literals (kept as text, parsed in context),
// and double-quoted strings; ";;" starts a comment running to end of line.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rw/diag.hpp"

namespace rw {

struct SExpr {
  enum class Kind { Sym, Num, Str, List };
  Kind kind = Kind::List;
  std::string text;  // Sym/Num: literal text; Str: decoded contents
  std::vector<SExpr> items;
  SourceSpan span;

  bool is_sym() const { return kind == Kind::Sym; }
  bool is_sym(std::string_view s) const { return kind == Kind::Sym && text == s; }
  bool is_num() const { return kind == Kind::Num; }
  bool is_str() const { return kind == Kind::Str; }
  bool is_list() const { return kind == Kind::List; }
  bool is_call(std::string_view head) const {
    return is_list() && !items.empty() && items[0].is_sym(head);
  }
  size_t size() const { return items.size(); }
};

struct ReadResult {
  std::vector<SExpr> exprs;  // top-level forms
  DiagnosticList diags;
  bool ok() const { return diags.ok(); }
};

ReadResult read_sexprs(std::string_view src, const std::string& file);

// One-line rendering, used in error messages and tests.
std::string write_sexpr(const SExpr& e);

}  // namespace rw

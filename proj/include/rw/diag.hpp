#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rw {

struct SourcePos {
  uint32_t line = 0;  // 1-based; 0 = unknown
  uint32_t col = 0;

  friend bool operator==(const SourcePos&, const SourcePos&) = default;
};

struct SourceSpan {
  std::string file;
  SourcePos start;
  SourcePos end;

  bool known() const { return start.line != 0; }

  friend bool operator==(const SourceSpan&, const SourceSpan&) = default;
};

enum class Severity : uint8_t { Error, Warning, Note };

// Codes are stable identifiers drawn from the closed set in docs/diagnostics.md.
struct Diagnostic {
  Severity severity = Severity::Error;
  std::string code;
  std::string message;
  SourceSpan span;
};

struct DiagnosticList {
  std::vector<Diagnostic> items;

  void error(std::string code, std::string message, SourceSpan span = {}) {
    items.push_back({Severity::Error, std::move(code), std::move(message), std::move(span)});
  }
  bool ok() const {
    for (auto& d : items)
      if (d.severity == Severity::Error) return false;
    return true;
  }
  bool empty() const { return items.empty(); }
  size_t size() const { return items.size(); }
};

std::string render_diagnostic(const Diagnostic& d);
std::string render_diagnostic_json(const Diagnostic& d);

}  // namespace rw

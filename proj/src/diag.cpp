#include "rw/diag.hpp"

#include <sstream>

#include "json.hpp"

namespace rw {

std::string render_diagnostic(const Diagnostic& d) {
  std::ostringstream out;
  if (d.span.known()) {
    out << d.span.file << ":" << d.span.start.line << ":" << d.span.start.col << ": ";
  } else if (!d.span.file.empty()) {
    out << d.span.file << ": ";
  }
  switch (d.severity) {
    case Severity::Error: out << "error"; break;
    case Severity::Warning: out << "warning"; break;
    case Severity::Note: out << "note"; break;
  }
  out << "[" << d.code << "]: " << d.message;
  return out.str();
}

std::string render_diagnostic_json(const Diagnostic& d) {
  nlohmann::json j;
  j["severity"] = d.severity == Severity::Error     ? "error"
                  : d.severity == Severity::Warning ? "warning"
                                                    : "note";
  j["code"] = d.code;
  j["message"] = d.message;
  if (!d.span.file.empty()) j["file"] = d.span.file;
  if (d.span.known()) {
    j["line"] = d.span.start.line;
    j["col"] = d.span.start.col;
  }
  return j.dump();
}

}  // namespace rw

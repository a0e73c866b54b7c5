#include "rw/sexpr.hpp"

#include <cctype>
#include <sstream>

namespace rw {

namespace {

struct Reader {
  std::string_view src;
  std::string file;
  size_t pos = 0;
  uint32_t line = 1, col = 1;
  DiagnosticList& diags;

  SourcePos here() const { return {line, col}; }

  char peek() const { return pos < src.size() ? src[pos] : '\0'; }

  char advance() {
    char c = src[pos++];
    if (c == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
    return c;
  }

  void skip_trivia() {
    while (pos < src.size()) {
      char c = peek();
      if (std::isspace((unsigned char)c)) {
        advance();
      } else if (c == ';' && pos + 1 < src.size() && src[pos + 1] == ';') {
        while (pos < src.size() && peek() != '\n') advance();
      } else {
        return;
      }
    }
  }

  bool atom_char(char c) const {
    return !std::isspace((unsigned char)c) && c != '(' && c != ')' && c != '"' && c != ';' &&
           c != '\0';
  }

  std::optional<SExpr> read_one() {
    skip_trivia();
    if (pos >= src.size()) return std::nullopt;
    SourcePos start = here();
    char c = peek();
    if (c == '(') {
      advance();
      SExpr list;
      list.kind = SExpr::Kind::List;
      while (true) {
        skip_trivia();
        if (pos >= src.size()) {
          diags.error("PAR001", "unterminated list", {file, start, here()});
          return std::nullopt;
        }
        if (peek() == ')') {
          advance();
          break;
        }
        auto item = read_one();
        if (!item) return std::nullopt;
        list.items.push_back(std::move(*item));
      }
      list.span = {file, start, here()};
      return list;
    }
    if (c == ')') {
      diags.error("PAR001", "unmatched ')'", {file, start, start});
      return std::nullopt;
    }
    if (c == '"') {
      advance();
      std::string out;
      while (true) {
        if (pos >= src.size()) {
          diags.error("PAR001", "unterminated string", {file, start, here()});
          return std::nullopt;
        }
        char d = advance();
        if (d == '"') break;
        if (d == '\\') {
          if (pos >= src.size()) {
            diags.error("PAR001", "unterminated escape", {file, start, here()});
            return std::nullopt;
          }
          char e = advance();
          switch (e) {
            case 'n': out.push_back('\n'); break;
            case 't': out.push_back('\t'); break;
            case '"': out.push_back('"'); break;
            case '\\': out.push_back('\\'); break;
            default:
              diags.error("PAR001", std::string("unknown escape '\\") + e + "'",
                          {file, start, here()});
              return std::nullopt;
          }
        } else {
          out.push_back(d);
        }
      }
      SExpr s;
      s.kind = SExpr::Kind::Str;
      s.text = std::move(out);
      s.span = {file, start, here()};
      return s;
    }
    if (c == ';') {
      diags.error("PAR001", "lone ';' (comments start with ';;')", {file, start, start});
      return std::nullopt;
    }
    // symbol or number
    std::string text;
    while (pos < src.size() && atom_char(peek())) text.push_back(advance());
    SExpr a;
    bool numeric = !text.empty() && (std::isdigit((unsigned char)text[0]) ||
                                     (text[0] == '-' && text.size() > 1 &&
                                      std::isdigit((unsigned char)text[1])));
    a.kind = numeric ? SExpr::Kind::Num : SExpr::Kind::Sym;
    a.text = std::move(text);
    a.span = {file, start, here()};
    return a;
  }
};

}  // namespace

ReadResult read_sexprs(std::string_view src, const std::string& file) {
  ReadResult out;
  Reader r{src, file, 0, 1, 1, out.diags};
  while (true) {
    r.skip_trivia();
    if (r.pos >= src.size()) break;
    auto e = r.read_one();
    if (!e) break;
    out.exprs.push_back(std::move(*e));
  }
  return out;
}

std::string write_sexpr(const SExpr& e) {
  switch (e.kind) {
    case SExpr::Kind::Sym:
    case SExpr::Kind::Num: return e.text;
    case SExpr::Kind::Str: {
      std::string out = "\"";
      for (char c : e.text) {
        if (c == '"' || c == '\\') out.push_back('\\');
        if (c == '\n') {
          out += "\\n";
          continue;
        }
        out.push_back(c);
      }
      out.push_back('"');
      return out;
    }
    case SExpr::Kind::List: {
      std::string out = "(";
      for (size_t i = 0; i < e.items.size(); ++i) {
        if (i) out.push_back(' ');
        out += write_sexpr(e.items[i]);
      }
      out.push_back(')');
      return out;
    }
  }
  return "";
}

}  // namespace rw

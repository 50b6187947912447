#include "pysyntax.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <unordered_set>

#include "trajlab/error.hpp"

namespace trajlab::detail {

namespace {

enum class Tok { name, number, string, op, newline, indent, dedent, end };

struct Token {
  Tok type;
  std::string_view text;
  std::size_t start;
  std::size_t end;
};

[[noreturn]] void fail_at(std::string_view src, std::size_t offset, const std::string& msg) {
  offset = std::min(offset, src.size());
  std::size_t line = 1;
  std::size_t line_start = 0;
  for (std::size_t i = 0; i < offset; ++i) {
    if (src[i] == '\n') {
      ++line;
      line_start = i + 1;
    }
  }
  throw SyntaxError(msg, line, offset - line_start);
}

bool ident_start(unsigned char c) { return std::isalpha(c) || c == '_' || c >= 0x80; }
bool ident_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

constexpr std::array<std::string_view, 4> kOps3{"**=", "//=", ">>=", "<<="};
constexpr std::array<std::string_view, 20> kOps2{"**", "//", ">>", "<<", "<=", ">=", "==", "!=", "->", "+=",
                                                 "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=", ":=", "..."};
constexpr std::string_view kOps1 = "+-*/%@&|^~<>()[]{},:;.=";

class Tokenizer {
 public:
  // `nested` tokenizes an expression embedded in an f-string: newlines are
  // insignificant and no indentation tokens are produced.
  Tokenizer(std::string_view src, std::size_t begin, std::size_t end, bool nested)
      : src_(src), pos_(begin), end_(end), nested_(nested) {}

  std::vector<Token> run() {
    std::vector<std::size_t> indents{0};
    bool line_start = !nested_;
    while (true) {
      if (line_start) {
        std::size_t col = 0;
        std::size_t p = pos_;
        while (p < end_) {
          const char c = src_[p];
          if (c == ' ') {
            ++col;
          } else if (c == '\t') {
            col = (col / 8 + 1) * 8;
          } else if (c == '\f') {
            col = 0;
          } else {
            break;
          }
          ++p;
        }
        if (p >= end_) {
          pos_ = p;
          break;
        }
        if (src_[p] == '#' || src_[p] == '\n' || src_[p] == '\r') {
          while (p < end_ && src_[p] != '\n') ++p;
          pos_ = p + 1;
          if (pos_ >= end_) {
            pos_ = end_;
            break;
          }
          continue;
        }
        if (col > indents.back()) {
          indents.push_back(col);
          push(Tok::indent, p, p);
        } else {
          while (col < indents.back()) {
            indents.pop_back();
            push(Tok::dedent, p, p);
          }
          if (col != indents.back()) fail_at(src_, p, "unindent does not match any outer indentation level");
        }
        pos_ = p;
        line_start = false;
      }
      if (pos_ >= end_) break;

      const char c = src_[pos_];
      if (c == ' ' || c == '\t' || c == '\f' || c == '\r') {
        ++pos_;
        continue;
      }
      if (c == '#') {
        while (pos_ < end_ && src_[pos_] != '\n') ++pos_;
        continue;
      }
      if (c == '\\') {
        std::size_t p = pos_ + 1;
        if (p < end_ && src_[p] == '\r') ++p;
        if (p < end_ && src_[p] == '\n') {
          pos_ = p + 1;
          if (pos_ >= end_) fail_at(src_, pos_, "unexpected EOF while parsing");
          continue;
        }
        fail_at(src_, pos_, "unexpected character after line continuation character");
      }
      if (c == '\n') {
        if (nested_ || !brackets_.empty()) {
          ++pos_;
          continue;
        }
        push(Tok::newline, pos_, pos_ + 1);
        ++pos_;
        line_start = true;
        continue;
      }
      if (string_start()) continue;
      const auto uc = static_cast<unsigned char>(c);
      if (std::isdigit(uc) || (c == '.' && pos_ + 1 < end_ && std::isdigit(static_cast<unsigned char>(src_[pos_ + 1])))) {
        number();
        continue;
      }
      if (ident_start(uc)) {
        const auto s = pos_;
        while (pos_ < end_ && ident_char(static_cast<unsigned char>(src_[pos_]))) ++pos_;
        push(Tok::name, s, pos_);
        continue;
      }
      op();
    }

    if (!brackets_.empty()) {
      fail_at(src_, brackets_.back().second, std::string("'") + brackets_.back().first + "' was never closed");
    }
    if (!nested_) {
      if (!tokens_.empty() && tokens_.back().type != Tok::newline && tokens_.back().type != Tok::dedent) {
        push(Tok::newline, end_, end_);
      }
      while (indents.size() > 1) {
        indents.pop_back();
        push(Tok::dedent, end_, end_);
      }
    }
    push(Tok::end, end_, end_);
    return std::move(tokens_);
  }

 private:
  void push(Tok type, std::size_t s, std::size_t e) { tokens_.push_back({type, src_.substr(s, e - s), s, e}); }

  bool string_start() {
    std::size_t p = pos_;
    while (p < end_ && p - pos_ < 2 && std::string_view("rRbBuUfF").find(src_[p]) != std::string_view::npos) ++p;
    if (p >= end_ || (src_[p] != '\'' && src_[p] != '"')) return false;
    std::string prefix;
    for (std::size_t i = pos_; i < p; ++i) prefix += static_cast<char>(std::tolower(static_cast<unsigned char>(src_[i])));
    static const std::unordered_set<std::string> valid{"", "r", "u", "b", "f", "br", "rb", "fr", "rf"};
    if (!valid.contains(prefix)) return false;

    const char q = src_[p];
    const bool triple = p + 2 < end_ && src_[p + 1] == q && src_[p + 2] == q;
    const std::size_t s = pos_;
    p += triple ? 3 : 1;
    while (true) {
      if (p >= end_) {
        fail_at(src_, s, triple ? "unterminated triple-quoted string literal" : "unterminated string literal");
      }
      const char ch = src_[p];
      if (ch == '\\') {
        p += 2;
        continue;
      }
      if (ch == '\n' && !triple) fail_at(src_, s, "unterminated string literal");
      if (ch == q) {
        if (!triple) {
          ++p;
          break;
        }
        if (p + 2 < end_ && src_[p + 1] == q && src_[p + 2] == q) {
          p += 3;
          break;
        }
      }
      ++p;
    }
    push(Tok::string, s, p);
    pos_ = p;
    return true;
  }

  void number() {
    const auto s = pos_;
    auto digits = [&](auto pred) {
      while (pos_ < end_ && (pred(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) ++pos_;
    };
    auto dec = [](unsigned char c) { return std::isdigit(c) != 0; };
    if (src_[pos_] == '0' && pos_ + 1 < end_ && std::string_view("xXoObB").find(src_[pos_ + 1]) != std::string_view::npos) {
      pos_ += 2;
      digits([](unsigned char c) { return std::isxdigit(c) != 0; });
    } else {
      digits(dec);
      if (pos_ < end_ && src_[pos_] == '.') {
        ++pos_;
        digits(dec);
      }
      if (pos_ < end_ && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
        std::size_t p = pos_ + 1;
        if (p < end_ && (src_[p] == '+' || src_[p] == '-')) ++p;
        if (p < end_ && std::isdigit(static_cast<unsigned char>(src_[p]))) {
          pos_ = p;
          digits(dec);
        }
      }
      if (pos_ < end_ && (src_[pos_] == 'j' || src_[pos_] == 'J')) ++pos_;
    }
    push(Tok::number, s, pos_);
  }

  void op() {
    const auto rest = src_.substr(pos_, end_ - pos_);
    std::size_t len = 0;
    for (auto o : kOps3) {
      if (rest.starts_with(o)) len = 3;
    }
    if (len == 0) {
      for (auto o : kOps2) {
        if (rest.starts_with(o)) len = o.size();
      }
    }
    if (len == 0 && kOps1.find(rest[0]) != std::string_view::npos) len = 1;
    if (len == 0) fail_at(src_, pos_, std::string("invalid character '") + rest[0] + "'");

    const char c = rest[0];
    if (len == 1 && (c == '(' || c == '[' || c == '{')) {
      brackets_.emplace_back(c, pos_);
    } else if (len == 1 && (c == ')' || c == ']' || c == '}')) {
      const char open = c == ')' ? '(' : c == ']' ? '[' : '{';
      if (brackets_.empty()) fail_at(src_, pos_, std::string("unmatched '") + c + "'");
      if (brackets_.back().first != open) {
        fail_at(src_, pos_,
                std::string("closing parenthesis '") + c + "' does not match opening parenthesis '" +
                    brackets_.back().first + "'");
      }
      brackets_.pop_back();
    }
    push(Tok::op, pos_, pos_ + len);
    pos_ += len;
  }

  std::string_view src_;
  std::size_t pos_;
  std::size_t end_;
  bool nested_;
  std::vector<Token> tokens_;
  std::vector<std::pair<char, std::size_t>> brackets_;
};

const std::unordered_set<std::string_view> kKeywords{
    "False", "None",   "True",    "and",      "as",     "assert", "async", "await",  "break",
    "class", "continue", "def",   "del",      "elif",   "else",   "except", "finally", "for",
    "from",  "global", "if",      "import",   "in",     "is",     "lambda", "nonlocal", "not",
    "or",    "pass",   "raise",   "return",   "try",    "while",  "with",  "yield"};

constexpr std::array<std::string_view, 13> kAugOps{"+=", "-=", "*=", "/=", "//=", "%=", "@=",
                                                   "&=", "|=", "^=", ">>=", "<<=", "**="};

enum class EK { name, attribute, subscript, call, starred, tuple, list, other };

struct Ex {
  EK kind = EK::other;
  std::size_t start = 0;
  std::size_t end = 0;
  std::string path;  // non-empty for Name and Attribute chains over names
  bool assignable = false;
};

class Parser {
 public:
  Parser(std::string_view src, std::vector<Token> tokens, PyParse& out)
      : src_(src), toks_(std::move(tokens)), out_(out) {}

  void file() {
    while (!at(Tok::end)) {
      if (at(Tok::newline)) {
        next();
        continue;
      }
      statement();
    }
  }

  void fstring_expression() {
    if (at_kw("yield")) {
      yield_expr();
    } else {
      star_expressions();
    }
    if (!at(Tok::end)) fail("f-string: invalid syntax");
  }

 private:
  // ---- token helpers -----------------------------------------------------

  const Token& peek(std::size_t k = 0) const { return toks_[std::min(i_ + k, toks_.size() - 1)]; }
  bool at(Tok t) const { return peek().type == t; }
  bool at_op(std::string_view s, std::size_t k = 0) const { return peek(k).type == Tok::op && peek(k).text == s; }
  bool at_kw(std::string_view s, std::size_t k = 0) const { return peek(k).type == Tok::name && peek(k).text == s; }
  bool at_plain_name(std::size_t k = 0) const {
    return peek(k).type == Tok::name && !kKeywords.contains(peek(k).text);
  }

  const Token& next() {
    const Token& t = toks_[i_];
    if (t.type != Tok::newline && t.type != Tok::indent && t.type != Tok::dedent && t.type != Tok::end) {
      last_end_ = t.end;
    }
    if (i_ + 1 < toks_.size()) ++i_;
    return t;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    const auto& t = peek();
    if (t.type == Tok::indent) fail_at(src_, t.start, "unexpected indent");
    if (t.type == Tok::end && msg == "invalid syntax") fail_at(src_, t.start, "unexpected EOF while parsing");
    fail_at(src_, t.start, msg);
  }

  void expect_op(std::string_view s) {
    if (!at_op(s)) fail("expected '" + std::string(s) + "'");
    next();
  }
  void expect_kw(std::string_view s) {
    if (!at_kw(s)) fail("expected '" + std::string(s) + "'");
    next();
  }
  std::string_view expect_name() {
    if (!at_plain_name()) fail("invalid syntax");
    return next().text;
  }
  void expect_newline() {
    if (!at(Tok::newline)) fail("invalid syntax");
    next();
  }

  bool starts_expression(std::size_t k = 0) const {
    const auto& t = peek(k);
    switch (t.type) {
      case Tok::number:
      case Tok::string:
        return true;
      case Tok::name:
        if (!kKeywords.contains(t.text)) return true;
        return t.text == "not" || t.text == "lambda" || t.text == "await" || t.text == "None" ||
               t.text == "True" || t.text == "False";
      case Tok::op:
        return t.text == "(" || t.text == "[" || t.text == "{" || t.text == "-" || t.text == "+" ||
               t.text == "~" || t.text == "*" || t.text == "...";
      default:
        return false;
    }
  }

  Ex other(std::size_t s) const { return Ex{EK::other, s, last_end_, {}, false}; }

  void require_target(const Ex& e) const {
    if (!e.assignable) fail_at(src_, e.start, "cannot assign to expression");
  }

  // ---- expressions -------------------------------------------------------

  Ex star_expressions() {
    const auto s = peek().start;
    Ex first = star_expression();
    if (!at_op(",")) return first;
    bool assignable = first.assignable;
    while (at_op(",")) {
      next();
      if (!starts_expression()) break;
      assignable = star_expression().assignable && assignable;
    }
    return Ex{EK::tuple, s, last_end_, {}, assignable};
  }

  Ex star_expression() {
    if (at_op("*")) {
      const auto s = peek().start;
      next();
      const Ex inner = bitor_expr();
      return Ex{EK::starred, s, last_end_, {}, inner.assignable};
    }
    return expression();
  }

  Ex star_named_expression() {
    if (at_op("*")) return star_expression();
    return named_expression();
  }

  Ex named_expression() {
    if (at_plain_name() && at_op(":=", 1)) {
      const auto s = peek().start;
      next();
      next();
      expression();
      return other(s);
    }
    return expression();
  }

  Ex expression() {
    if (at_kw("lambda")) return lambdef();
    const auto s = peek().start;
    Ex e = disjunction();
    if (at_kw("if")) {
      next();
      disjunction();
      expect_kw("else");
      expression();
      return other(s);
    }
    return e;
  }

  Ex lambdef() {
    const auto s = peek().start;
    next();
    parameters(":", false);
    expect_op(":");
    expression();
    return other(s);
  }

  // Shared by def and lambda; stops before `closer`.
  void parameters(std::string_view closer, bool annotations) {
    while (!at_op(closer)) {
      if (at_op("/")) {
        next();
      } else if (at_op("*") || at_op("**")) {
        const bool star = at_op("*");
        next();
        if (!star || at_plain_name()) {
          expect_name();
          if (annotations && at_op(":")) {
            next();
            expression();
          }
        }
      } else {
        expect_name();
        if (annotations && at_op(":")) {
          next();
          expression();
        }
        if (at_op("=")) {
          next();
          expression();
        }
      }
      if (!at_op(",")) break;
      next();
    }
  }

  Ex disjunction() { return chain_kw("or", &Parser::conjunction); }
  Ex conjunction() { return chain_kw("and", &Parser::inversion); }

  Ex chain_kw(std::string_view kw, Ex (Parser::*sub)()) {
    const auto s = peek().start;
    Ex e = (this->*sub)();
    if (!at_kw(kw)) return e;
    while (at_kw(kw)) {
      next();
      (this->*sub)();
    }
    return other(s);
  }

  Ex inversion() {
    if (at_kw("not")) {
      const auto s = peek().start;
      next();
      inversion();
      return other(s);
    }
    return comparison();
  }

  bool at_compare_op() const {
    static const std::unordered_set<std::string_view> ops{"<", ">", "==", ">=", "<=", "!="};
    if (peek().type == Tok::op && ops.contains(peek().text)) return true;
    if (at_kw("in") || at_kw("is")) return true;
    return at_kw("not") && at_kw("in", 1);
  }

  Ex comparison() {
    const auto s = peek().start;
    Ex e = bitor_expr();
    if (!at_compare_op()) return e;
    while (at_compare_op()) {
      if (at_kw("not") || (at_kw("is") && at_kw("not", 1))) next();
      next();
      bitor_expr();
    }
    return other(s);
  }

  Ex binary(std::initializer_list<std::string_view> ops, Ex (Parser::*sub)()) {
    const auto s = peek().start;
    Ex e = (this->*sub)();
    bool any = false;
    while (peek().type == Tok::op && std::find(ops.begin(), ops.end(), peek().text) != ops.end()) {
      next();
      (this->*sub)();
      any = true;
    }
    return any ? other(s) : e;
  }

  Ex bitor_expr() { return binary({"|"}, &Parser::xor_expr); }
  Ex xor_expr() { return binary({"^"}, &Parser::and_expr); }
  Ex and_expr() { return binary({"&"}, &Parser::shift_expr); }
  Ex shift_expr() { return binary({"<<", ">>"}, &Parser::sum_expr); }
  Ex sum_expr() { return binary({"+", "-"}, &Parser::term); }
  Ex term() { return binary({"*", "/", "//", "%", "@"}, &Parser::factor); }

  Ex factor() {
    if (at_op("+") || at_op("-") || at_op("~")) {
      const auto s = peek().start;
      next();
      factor();
      return other(s);
    }
    return power();
  }

  Ex power() {
    const auto s = peek().start;
    Ex e = await_primary();
    if (at_op("**")) {
      next();
      factor();
      return other(s);
    }
    return e;
  }

  Ex await_primary() {
    if (at_kw("await")) {
      const auto s = peek().start;
      next();
      primary();
      return other(s);
    }
    return primary();
  }

  Ex primary() {
    const auto s = peek().start;
    Ex e = atom();
    while (true) {
      if (at_op(".")) {
        next();
        const auto attr = expect_name();
        std::string path = e.path.empty() ? std::string() : e.path + "." + std::string(attr);
        e = Ex{EK::attribute, s, last_end_, std::move(path), true};
      } else if (at_op("(")) {
        next();
        arguments();
        expect_op(")");
        out_.calls.push_back({s, last_end_, e.path.empty() ? "<dynamic>" : e.path});
        e = Ex{EK::call, s, last_end_, {}, false};
      } else if (at_op("[")) {
        next();
        slices();
        expect_op("]");
        e = Ex{EK::subscript, s, last_end_, {}, true};
      } else {
        return e;
      }
    }
  }

  void arguments() {
    while (!at_op(")")) {
      if (at_op("*") || at_op("**")) {
        next();
        expression();
      } else if (at_plain_name() && at_op("=", 1)) {
        next();
        next();
        expression();
      } else {
        named_expression();
        if (at_comp_for()) comp_for();
      }
      if (!at_op(",")) break;
      next();
    }
  }

  void slices() {
    while (true) {
      slice();
      if (!at_op(",")) return;
      next();
      if (at_op("]")) return;
    }
  }

  void slice() {
    if (!at_op(":")) {
      named_expression();
      if (!at_op(":")) return;
    }
    next();
    if (starts_expression()) expression();
    if (at_op(":")) {
      next();
      if (starts_expression()) expression();
    }
  }

  bool at_comp_for() const { return at_kw("for") || (at_kw("async") && at_kw("for", 1)); }

  void comp_for() {
    while (at_comp_for()) {
      if (at_kw("async")) next();
      next();
      star_targets();
      expect_kw("in");
      disjunction();
      while (at_kw("if")) {
        next();
        disjunction();
      }
    }
  }

  Ex star_targets() {
    const auto s = peek().start;
    Ex first = star_target();
    if (!at_op(",")) return first;
    while (at_op(",")) {
      next();
      if (!starts_expression() || at_kw("in")) break;
      star_target();
    }
    return Ex{EK::tuple, s, last_end_, {}, true};
  }

  Ex star_target() {
    const auto s = peek().start;
    if (at_op("*")) {
      next();
      star_target();
      return Ex{EK::starred, s, last_end_, {}, true};
    }
    Ex t = bitor_expr();
    require_target(t);
    return t;
  }

  Ex yield_expr() {
    const auto s = peek().start;
    next();
    if (at_kw("from")) {
      next();
      expression();
    } else if (starts_expression()) {
      star_expressions();
    }
    return other(s);
  }

  Ex atom() {
    const auto& t = peek();
    const auto s = t.start;
    switch (t.type) {
      case Tok::name:
        if (t.text == "True" || t.text == "False" || t.text == "None") {
          next();
          return other(s);
        }
        if (kKeywords.contains(t.text)) fail("invalid syntax");
        next();
        return Ex{EK::name, s, last_end_, std::string(t.text), true};
      case Tok::number:
        next();
        return other(s);
      case Tok::string:
        while (at(Tok::string)) {
          const auto& str = next();
          fstring(str);
        }
        return other(s);
      case Tok::op:
        if (t.text == "...") {
          next();
          return other(s);
        }
        if (t.text == "(") return group();
        if (t.text == "[") return list_display();
        if (t.text == "{") return brace_display();
        break;
      default:
        break;
    }
    fail("invalid syntax");
  }

  Ex group() {
    const auto s = peek().start;
    next();
    if (at_op(")")) {
      next();
      return Ex{EK::tuple, s, last_end_, {}, true};
    }
    if (at_kw("yield")) {
      Ex y = yield_expr();
      expect_op(")");
      return y;
    }
    Ex first = star_named_expression();
    if (at_comp_for()) {
      comp_for();
      expect_op(")");
      return other(s);
    }
    if (at_op(")")) {
      next();
      return first;
    }
    bool assignable = first.assignable;
    while (at_op(",")) {
      next();
      if (at_op(")")) break;
      assignable = star_named_expression().assignable && assignable;
    }
    expect_op(")");
    return Ex{EK::tuple, s, last_end_, {}, assignable};
  }

  Ex list_display() {
    const auto s = peek().start;
    next();
    if (at_op("]")) {
      next();
      return Ex{EK::list, s, last_end_, {}, true};
    }
    Ex first = star_named_expression();
    if (at_comp_for()) {
      comp_for();
      expect_op("]");
      return other(s);
    }
    bool assignable = first.assignable;
    while (at_op(",")) {
      next();
      if (at_op("]")) break;
      assignable = star_named_expression().assignable && assignable;
    }
    expect_op("]");
    return Ex{EK::list, s, last_end_, {}, assignable};
  }

  Ex brace_display() {
    const auto s = peek().start;
    next();
    if (at_op("}")) {
      next();
      return other(s);
    }
    bool dict = false;
    if (at_op("**")) {
      next();
      bitor_expr();
      dict = true;
    } else {
      star_named_expression();
      if (at_op(":")) {
        next();
        expression();
        dict = true;
      }
    }
    if (at_comp_for()) {
      comp_for();
      expect_op("}");
      return other(s);
    }
    while (at_op(",")) {
      next();
      if (at_op("}")) break;
      if (dict) {
        if (at_op("**")) {
          next();
          bitor_expr();
        } else {
          expression();
          expect_op(":");
          expression();
        }
      } else {
        star_named_expression();
      }
    }
    expect_op("}");
    return other(s);
  }

  // ---- f-strings ---------------------------------------------------------

  void fstring(const Token& t) {
    std::size_t q = 0;
    while (t.text[q] != '\'' && t.text[q] != '"') ++q;
    const auto prefix = t.text.substr(0, q);
    if (prefix.find_first_of("fF") == std::string_view::npos) return;
    const bool raw = prefix.find_first_of("rR") != std::string_view::npos;
    const char quote = t.text[q];
    const bool triple = t.text.size() >= q + 6 && t.text[q + 1] == quote && t.text[q + 2] == quote;
    const std::size_t qlen = triple ? 3 : 1;
    const std::size_t b = t.start + q + qlen;
    const std::size_t e = t.end - qlen;
    std::size_t p = b;
    while (p < e) {
      const char c = src_[p];
      if (c == '{') {
        if (p + 1 < e && src_[p + 1] == '{') {
          p += 2;
        } else {
          p = replacement_field(p + 1, e);
        }
      } else if (c == '}') {
        if (p + 1 < e && src_[p + 1] == '}') {
          p += 2;
        } else {
          fail_at(src_, p, "f-string: single '}' is not allowed");
        }
      } else if (c == '\\' && !raw && p + 1 < e && src_[p + 1] == '\\') {
        p += 2;
      } else if (c == '\\' && !raw && p + 2 < e && src_[p + 1] == 'N' && src_[p + 2] == '{') {
        const auto close = src_.find('}', p);
        p = close == std::string_view::npos || close >= e ? e : close + 1;
      } else {
        ++p;
      }
    }
  }

  // `p` is just past the opening brace; returns the offset after the closing one.
  std::size_t replacement_field(std::size_t p, std::size_t e) {
    const std::size_t a = p;
    int depth = 0;
    while (true) {
      if (p >= e) fail_at(src_, a, "f-string: expecting '}'");
      const char c = src_[p];
      if (c == '\'' || c == '"') {
        const auto close = src_.find(c, p + 1);
        if (close == std::string_view::npos || close >= e) fail_at(src_, p, "f-string: unterminated string");
        p = close + 1;
        continue;
      }
      if (c == '#') fail_at(src_, p, "f-string expression part cannot include '#'");
      if (c == '(' || c == '[' || c == '{') {
        ++depth;
      } else if (c == ')' || c == ']') {
        --depth;
      } else if (c == '}') {
        if (depth == 0) break;
        --depth;
      } else if (depth == 0) {
        const char nx = p + 1 < e ? src_[p + 1] : '\0';
        if (c == '!' && nx != '=') break;
        if (c == ':') break;
        if (c == '=' && nx != '=' && std::string_view("=!<>").find(src_[p - 1]) == std::string_view::npos) break;
      }
      ++p;
    }
    const auto expr = src_.substr(a, p - a);
    if (expr.find_first_not_of(" \t\r\n\f") == std::string_view::npos) {
      fail_at(src_, a, "f-string: empty expression not allowed");
    }
    Tokenizer tz(src_, a, p, true);
    Parser sub(src_, tz.run(), out_);
    sub.fstring_expression();

    if (src_[p] == '=') ++p;
    while (p < e && std::isspace(static_cast<unsigned char>(src_[p]))) ++p;
    if (p < e && src_[p] == '!') p += 2;
    if (p < e && src_[p] == ':') {
      ++p;
      while (p < e && src_[p] != '}') p = src_[p] == '{' ? replacement_field(p + 1, e) : p + 1;
    }
    if (p >= e || src_[p] != '}') fail_at(src_, a, "f-string: expecting '}'");
    return p + 1;
  }

  // ---- statements --------------------------------------------------------

  void record(std::string kind, std::size_t s, bool bare_call = false) {
    out_.statements.push_back({std::move(kind), s, last_end_, bare_call});
  }

  void statement() {
    if (at_kw("if")) return if_stmt();
    if (at_kw("while")) return while_stmt();
    if (at_kw("for")) return for_stmt(peek().start, "For");
    if (at_kw("try")) return try_stmt();
    if (at_kw("with")) return with_stmt(peek().start, "With");
    if (at_kw("def")) return def_stmt(peek().start, "FunctionDef");
    if (at_kw("class")) return class_stmt();
    if (at_op("@")) return decorated();
    if (at_kw("async")) {
      const auto s = peek().start;
      next();
      if (at_kw("def")) return def_stmt(s, "AsyncFunctionDef");
      if (at_kw("for")) return for_stmt(s, "AsyncFor");
      if (at_kw("with")) return with_stmt(s, "AsyncWith");
      fail("invalid syntax");
    }
    if (looks_like_match()) fail("match statements are not supported");
    simple_stmts();
  }

  // `match` is a soft keyword: only a line of the form `match <expr> ... :`
  // opens a match statement.
  bool looks_like_match() const {
    if (!at_kw("match") || !starts_expression(1)) return false;
    std::size_t k = 1;
    while (peek(k).type != Tok::newline && peek(k).type != Tok::end) ++k;
    return peek(k - 1).type == Tok::op && peek(k - 1).text == ":";
  }

  void block() {
    if (at(Tok::newline)) {
      next();
      if (!at(Tok::indent)) fail("expected an indented block");
      next();
      while (!at(Tok::dedent) && !at(Tok::end)) statement();
      next();
    } else {
      simple_stmts();
    }
  }

  void suite() {
    expect_op(":");
    block();
  }

  void if_stmt() {
    const auto s = peek().start;
    next();
    named_expression();
    suite();
    if (at_kw("elif")) {
      if_stmt();
    } else if (at_kw("else")) {
      next();
      suite();
    }
    record("If", s);
  }

  void while_stmt() {
    const auto s = peek().start;
    next();
    named_expression();
    suite();
    if (at_kw("else")) {
      next();
      suite();
    }
    record("While", s);
  }

  void for_stmt(std::size_t s, const char* kind) {
    expect_kw("for");
    star_targets();
    expect_kw("in");
    star_expressions();
    suite();
    if (at_kw("else")) {
      next();
      suite();
    }
    record(kind, s);
  }

  void try_stmt() {
    const auto s = peek().start;
    next();
    suite();
    bool handlers = false;
    while (at_kw("except")) {
      handlers = true;
      next();
      if (!at_op(":")) {
        expression();
        if (at_kw("as")) {
          next();
          expect_name();
        }
      }
      suite();
    }
    if (handlers && at_kw("else")) {
      next();
      suite();
    }
    if (at_kw("finally")) {
      next();
      suite();
    } else if (!handlers) {
      fail("expected 'except' or 'finally' block");
    }
    record("Try", s);
  }

  void with_item() {
    expression();
    if (at_kw("as")) {
      next();
      star_target();
    }
  }

  void with_stmt(std::size_t s, const char* kind) {
    expect_kw("with");
    bool done = false;
    if (at_op("(")) {
      // Parenthesized item list; falls back to an ordinary expression.
      const auto saved_i = i_;
      const auto saved_end = last_end_;
      const auto saved_calls = out_.calls.size();
      const auto saved_stmts = out_.statements.size();
      try {
        next();
        while (true) {
          with_item();
          if (!at_op(",")) break;
          next();
          if (at_op(")")) break;
        }
        expect_op(")");
        done = at_op(":");
      } catch (const SyntaxError&) {
        done = false;
      }
      if (!done) {
        i_ = saved_i;
        last_end_ = saved_end;
        out_.calls.resize(saved_calls);
        out_.statements.resize(saved_stmts);
      }
    }
    if (!done) {
      while (true) {
        with_item();
        if (!at_op(",")) break;
        next();
      }
    }
    suite();
    record(kind, s);
  }

  void def_stmt(std::size_t s, const char* kind) {
    expect_kw("def");
    expect_name();
    expect_op("(");
    parameters(")", true);
    expect_op(")");
    if (at_op("->")) {
      next();
      expression();
    }
    suite();
    record(kind, s);
  }

  void class_stmt() {
    const auto s = peek().start;
    next();
    expect_name();
    if (at_op("(")) {
      next();
      arguments();
      expect_op(")");
    }
    suite();
    record("ClassDef", s);
  }

  void decorated() {
    while (at_op("@")) {
      next();
      named_expression();
      expect_newline();
    }
    if (at_kw("def")) return def_stmt(peek().start, "FunctionDef");
    if (at_kw("class")) return class_stmt();
    if (at_kw("async") && at_kw("def", 1)) {
      const auto s = peek().start;
      next();
      return def_stmt(s, "AsyncFunctionDef");
    }
    fail("invalid syntax");
  }

  void simple_stmts() {
    while (true) {
      simple_stmt();
      if (!at_op(";")) break;
      next();
      if (at(Tok::newline)) break;
    }
    expect_newline();
  }

  void dotted_name() {
    expect_name();
    while (at_op(".")) {
      next();
      expect_name();
    }
  }

  void simple_stmt() {
    const auto s = peek().start;
    if (at(Tok::indent)) fail("unexpected indent");
    if (at_kw("pass") || at_kw("break") || at_kw("continue")) {
      std::string kind(peek().text);
      kind[0] = static_cast<char>(std::toupper(kind[0]));
      next();
      return record(kind, s);
    }
    if (at_kw("return")) {
      next();
      if (starts_expression()) star_expressions();
      return record("Return", s);
    }
    if (at_kw("raise")) {
      next();
      if (starts_expression()) {
        expression();
        if (at_kw("from")) {
          next();
          expression();
        }
      }
      return record("Raise", s);
    }
    if (at_kw("global") || at_kw("nonlocal")) {
      const bool global = at_kw("global");
      next();
      expect_name();
      while (at_op(",")) {
        next();
        expect_name();
      }
      return record(global ? "Global" : "Nonlocal", s);
    }
    if (at_kw("del")) {
      next();
      while (true) {
        Ex t = bitor_expr();
        require_target(t);
        if (!at_op(",")) break;
        next();
        if (!starts_expression()) break;
      }
      return record("Delete", s);
    }
    if (at_kw("assert")) {
      next();
      expression();
      if (at_op(",")) {
        next();
        expression();
      }
      return record("Assert", s);
    }
    if (at_kw("import")) {
      next();
      while (true) {
        dotted_name();
        if (at_kw("as")) {
          next();
          expect_name();
        }
        if (!at_op(",")) break;
        next();
      }
      return record("Import", s);
    }
    if (at_kw("from")) {
      next();
      bool dots = false;
      while (at_op(".") || at_op("...")) {
        next();
        dots = true;
      }
      if (!dots || !at_kw("import")) dotted_name();
      expect_kw("import");
      if (at_op("*")) {
        next();
      } else {
        const bool paren = at_op("(");
        if (paren) next();
        while (true) {
          expect_name();
          if (at_kw("as")) {
            next();
            expect_name();
          }
          if (!at_op(",")) break;
          next();
          if (paren && at_op(")")) break;
        }
        if (paren) expect_op(")");
      }
      return record("ImportFrom", s);
    }

    const Ex first = at_kw("yield") ? yield_expr() : star_expressions();
    if (at_op(":")) {
      if (first.kind != EK::name && first.kind != EK::attribute && first.kind != EK::subscript) {
        fail_at(src_, first.start, "illegal target for annotation");
      }
      next();
      expression();
      if (at_op("=")) {
        next();
        if (at_kw("yield")) {
          yield_expr();
        } else {
          star_expressions();
        }
      }
      return record("AnnAssign", s);
    }
    if (peek().type == Tok::op && std::find(kAugOps.begin(), kAugOps.end(), peek().text) != kAugOps.end()) {
      if (first.kind != EK::name && first.kind != EK::attribute && first.kind != EK::subscript) {
        fail_at(src_, first.start, "illegal expression for augmented assignment");
      }
      next();
      if (at_kw("yield")) {
        yield_expr();
      } else {
        star_expressions();
      }
      return record("AugAssign", s);
    }
    if (at_op("=")) {
      require_target(first);
      while (at_op("=")) {
        next();
        const Ex rhs = at_kw("yield") ? yield_expr() : star_expressions();
        if (at_op("=")) require_target(rhs);
      }
      return record("Assign", s);
    }
    record("Expr", s, first.kind == EK::call && first.start == s && first.end == last_end_);
  }

  std::string_view src_;
  std::vector<Token> toks_;
  PyParse& out_;
  std::size_t i_ = 0;
  std::size_t last_end_ = 0;
};

}  // namespace

PyParse parse_python(std::string_view source) {
  std::size_t begin = source.starts_with("\xEF\xBB\xBF") ? 3 : 0;
  Tokenizer tz(source, begin, source.size(), false);
  PyParse out;
  Parser parser(source, tz.run(), out);
  parser.file();
  return out;
}

}  // namespace trajlab::detail

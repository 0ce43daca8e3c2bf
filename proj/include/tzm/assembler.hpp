// Copyright 2026 The tzm-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Two-pass mini-assembler for the Thumb subset in isa.hpp.
//
// Text format: one statement per line, optional `label:` prefix, `;` starts a
// comment, mnemonics lower-case, registers r0-r12/sp/lr/pc. Directives:
//   .org ADDR          start a new segment at ADDR
//   .equ NAME, EXPR    define a constant
//   .word EXPR[, ...]  32-bit little-endian words
//   .byte EXPR[, ...]  bytes
//   .ascii "s" / .asciz "s"
//   .align N           pad with zero bytes to an N-byte boundary
//   .space N[, FILL]
// Expressions are sums/differences of numbers, 'c' character literals and
// symbols. Branch operands are absolute target expressions.

#ifndef TZM_ASSEMBLER_HPP
#define TZM_ASSEMBLER_HPP

#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tzm/isa.hpp"

namespace tzm {

class AsmError : public Error {
public:
    AsmError(int line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    [[nodiscard]] int line() const { return line_; }

private:
    int line_;
};

class UnresolvedLabel : public AsmError {
public:
    using AsmError::AsmError;
};

class RangeError : public AsmError {
public:
    using AsmError::AsmError;
};

using SymbolTable = std::map<std::string, std::uint32_t>;

struct Statement {
    std::string label;
    std::string mnemonic;
    std::string operands;
    int line = 0;

    friend bool operator==(const Statement&, const Statement&) = default;
};

struct AsmProgram {
    std::uint32_t origin = 0;
    std::vector<Statement> statements;

    AsmProgram& add(std::string mnemonic, std::string operands = {}, std::string label = {}) {
        statements.push_back(Statement{std::move(label), std::move(mnemonic), std::move(operands),
                                       static_cast<int>(statements.size()) + 1});
        return *this;
    }
    AsmProgram& label(std::string name) { return add({}, {}, std::move(name)); }
};

struct Segment {
    std::uint32_t origin = 0;
    Bytes bytes;

    [[nodiscard]] std::uint32_t end() const { return origin + static_cast<std::uint32_t>(bytes.size()); }
};

struct ImageBlob {
    std::vector<Segment> segments;
    /// Label -> guest address, Thumb bit not set.
    SymbolTable symbols;

    /// Bytes of the first segment (single-segment programs).
    [[nodiscard]] const Bytes& bytes() const {
        static const Bytes empty;
        return segments.empty() ? empty : segments.front().bytes;
    }
    [[nodiscard]] std::uint32_t symbol(const std::string& name) const {
        auto it = symbols.find(name);
        if (it == symbols.end()) throw Error("unknown symbol '" + name + "'");
        return it->second;
    }
};

namespace asm_detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

// Splits on commas outside brackets, braces and quotes.
inline std::vector<std::string> split_operands(std::string_view s) {
    std::vector<std::string> out;
    int depth = 0;
    bool quoted = false;
    std::string cur;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (quoted) {
            cur += c;
            if (c == '\\' && i + 1 < s.size()) {
                cur += s[++i];
            } else if (c == '"') {
                quoted = false;
            }
            continue;
        }
        if (c == '"') quoted = true;
        if (c == '[' || c == '{') ++depth;
        if (c == ']' || c == '}') --depth;
        if (c == ',' && depth == 0) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
    return out;
}

inline std::optional<std::uint8_t> parse_reg(std::string_view s) {
    const std::string t = trim(s);
    if (t == "sp") return reg::sp;
    if (t == "lr") return reg::lr;
    if (t == "pc") return reg::pc;
    if (t == "ip") return reg::r12;
    if (t.size() >= 2 && t[0] == 'r') {
        int v = 0;
        for (std::size_t i = 1; i < t.size(); ++i) {
            if (!std::isdigit(static_cast<unsigned char>(t[i]))) return std::nullopt;
            v = v * 10 + (t[i] - '0');
        }
        if (v <= 15) return static_cast<std::uint8_t>(v);
    }
    return std::nullopt;
}

inline std::optional<Cond> parse_cond(std::string_view s) {
    static const std::map<std::string, Cond, std::less<>> table{
        {"eq", Cond::EQ}, {"ne", Cond::NE}, {"cs", Cond::CS}, {"hs", Cond::CS}, {"cc", Cond::CC},
        {"lo", Cond::CC}, {"mi", Cond::MI}, {"pl", Cond::PL}, {"vs", Cond::VS}, {"vc", Cond::VC},
        {"hi", Cond::HI}, {"ls", Cond::LS}, {"ge", Cond::GE}, {"lt", Cond::LT}, {"gt", Cond::GT},
        {"le", Cond::LE}};
    auto it = table.find(s);
    if (it == table.end()) return std::nullopt;
    return it->second;
}

inline std::string unescape(int line, std::string_view quoted) {
    const std::string t = trim(quoted);
    if (t.size() < 2 || t.front() != '"' || t.back() != '"') throw AsmError(line, "expected string literal");
    std::string out;
    for (std::size_t i = 1; i + 1 < t.size(); ++i) {
        char c = t[i];
        if (c == '\\' && i + 2 < t.size()) {
            const char n = t[++i];
            switch (n) {
            case 'n': c = '\n'; break;
            case 'r': c = '\r'; break;
            case 't': c = '\t'; break;
            case '0': c = '\0'; break;
            default: c = n; break;
            }
        }
        out += c;
    }
    return out;
}

class Evaluator {
public:
    Evaluator(const SymbolTable& symbols, const SymbolTable& externs) : symbols_(symbols), externs_(externs) {}

    // Returns nullopt when a symbol is unknown and `strict` is false.
    [[nodiscard]] std::optional<std::int64_t> eval(int line, std::string_view text, bool strict) const {
        const std::string s = trim(text);
        if (s.empty()) throw AsmError(line, "empty expression");
        std::int64_t total = 0;
        std::size_t i = 0;
        int sign = 1;
        bool expect_term = true;
        while (i < s.size()) {
            const char c = s[i];
            if (std::isspace(static_cast<unsigned char>(c))) {
                ++i;
                continue;
            }
            if (!expect_term) {
                if (c == '+' || c == '-') {
                    sign = c == '-' ? -1 : 1;
                    expect_term = true;
                    ++i;
                    continue;
                }
                throw AsmError(line, "malformed expression '" + s + "'");
            }
            if (c == '-' || c == '+') {
                if (c == '-') sign = -sign;
                ++i;
                continue;
            }
            std::size_t j = i;
            std::int64_t value = 0;
            if (c == '\'') {
                if (i + 2 >= s.size() || s[i + 2] != '\'') throw AsmError(line, "bad character literal");
                value = static_cast<unsigned char>(s[i + 1]);
                j = i + 3;
            } else if (std::isdigit(static_cast<unsigned char>(c))) {
                while (j < s.size() && std::isalnum(static_cast<unsigned char>(s[j]))) ++j;
                const std::string num = s.substr(i, j - i);
                try {
                    std::size_t used = 0;
                    value = static_cast<std::int64_t>(std::stoll(num, &used, 0));
                    if (used != num.size()) throw AsmError(line, "bad number '" + num + "'");
                } catch (const std::logic_error&) {
                    throw AsmError(line, "bad number '" + num + "'");
                }
            } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.') {
                while (j < s.size() &&
                       (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_' || s[j] == '.')) {
                    ++j;
                }
                const std::string name = s.substr(i, j - i);
                if (auto it = symbols_.find(name); it != symbols_.end()) {
                    value = it->second;
                } else if (auto ext = externs_.find(name); ext != externs_.end()) {
                    value = ext->second;
                } else if (strict) {
                    throw UnresolvedLabel(line, "unresolved symbol '" + name + "'");
                } else {
                    return std::nullopt;
                }
            } else {
                throw AsmError(line, "unexpected character in expression '" + s + "'");
            }
            total += sign * value;
            sign = 1;
            expect_term = false;
            i = j;
        }
        if (expect_term) throw AsmError(line, "incomplete expression '" + s + "'");
        return total;
    }

private:
    const SymbolTable& symbols_;
    const SymbolTable& externs_;
};

inline std::uint8_t want_reg(int line, std::string_view s) {
    auto r = parse_reg(s);
    if (!r) throw AsmError(line, "expected register, got '" + trim(s) + "'");
    return *r;
}

inline std::uint16_t parse_reg_list(int line, std::string_view s) {
    const std::string t = trim(s);
    if (t.size() < 2 || t.front() != '{' || t.back() != '}') throw AsmError(line, "expected register list");
    std::uint16_t mask = 0;
    for (const auto& item : split_operands(std::string_view(t).substr(1, t.size() - 2))) {
        const auto dash = item.find('-');
        if (dash != std::string::npos) {
            const auto a = want_reg(line, std::string_view(item).substr(0, dash));
            const auto b = want_reg(line, std::string_view(item).substr(dash + 1));
            if (a > b) throw AsmError(line, "bad register range");
            for (unsigned r = a; r <= b; ++r) mask = static_cast<std::uint16_t>(mask | 1u << r);
        } else {
            mask = static_cast<std::uint16_t>(mask | 1u << want_reg(line, item));
        }
    }
    return mask;
}

inline bool is_imm(std::string_view s) { return !s.empty() && s.front() == '#'; }

inline std::uint32_t statement_size(const Statement& st, const Evaluator& ev, std::uint32_t loc) {
    const std::string& m = st.mnemonic;
    if (m.empty() || m == ".equ" || m == ".org") return 0;
    if (m == ".word") return 4 * static_cast<std::uint32_t>(split_operands(st.operands).size());
    if (m == ".byte") return static_cast<std::uint32_t>(split_operands(st.operands).size());
    if (m == ".ascii" || m == ".asciz") {
        return static_cast<std::uint32_t>(unescape(st.line, st.operands).size() + (m == ".asciz" ? 1 : 0));
    }
    if (m == ".align") {
        const auto n = ev.eval(st.line, st.operands, true).value();
        if (n <= 0 || (n & (n - 1)) != 0) throw AsmError(st.line, ".align needs a power of two");
        const auto a = static_cast<std::uint32_t>(n);
        return (a - loc % a) % a;
    }
    if (m == ".space") {
        const auto ops = split_operands(st.operands);
        const auto n = ev.eval(st.line, ops.at(0), true).value();
        if (n < 0) throw AsmError(st.line, ".space needs a non-negative size");
        return static_cast<std::uint32_t>(n);
    }
    if (!m.empty() && m.front() == '.') throw AsmError(st.line, "unknown directive " + m);
    return (m == "bl" || m == "sg") ? 4 : 2;
}

inline std::int32_t branch_offset(int line, const Evaluator& ev, std::string_view target, std::uint32_t addr) {
    const auto t = ev.eval(line, target, true).value();
    return static_cast<std::int32_t>(t - static_cast<std::int64_t>(addr) - 4);
}

inline std::int32_t pc_relative(int line, const Evaluator& ev, std::string_view target, std::uint32_t addr) {
    const auto t = ev.eval(line, target, true).value();
    const std::int64_t base = (addr + 4) & ~3u;
    return static_cast<std::int32_t>(t - base);
}

inline Instruction parse_instruction(const Statement& st, const Evaluator& ev, std::uint32_t addr) {
    const int line = st.line;
    const std::string& m = st.mnemonic;
    const auto ops = split_operands(st.operands);
    auto need = [&](std::size_t n) {
        if (ops.size() != n) {
            throw AsmError(line, m + " expects " + std::to_string(n) + " operand(s)");
        }
    };
    auto imm = [&](const std::string& s) -> std::int32_t {
        if (!is_imm(s)) throw AsmError(line, "expected immediate, got '" + s + "'");
        return static_cast<std::int32_t>(ev.eval(line, std::string_view(s).substr(1), true).value());
    };
    auto R = [&](std::size_t i) { return want_reg(line, ops.at(i)); };

    Instruction in;
    if (m == "movs") {
        need(2);
        in = {.op = Op::MovImm, .rd = R(0), .imm = imm(ops[1])};
    } else if (m == "mov") {
        need(2);
        in = {.op = Op::MovReg, .rd = R(0), .rm = R(1)};
    } else if (m == "adds" || m == "subs") {
        const Op op = m == "adds" ? Op::AddImm : Op::SubImm;
        if (ops.size() == 2) {
            in = {.op = op, .form = Form::T2, .rd = R(0), .rn = R(0), .imm = imm(ops[1])};
        } else {
            need(3);
            if (is_imm(ops[2])) {
                in = {.op = op, .form = Form::T1, .rd = R(0), .rn = R(1), .imm = imm(ops[2])};
            } else {
                if (op != Op::AddImm) throw AsmError(line, "subs with register operand is outside the subset");
                in = {.op = Op::AddReg, .form = Form::T1, .rd = R(0), .rn = R(1), .rm = R(2)};
            }
        }
    } else if (m == "add") {
        if (ops.size() == 2 && R(0) == reg::sp && is_imm(ops[1])) {
            in = {.op = Op::AddImm, .form = Form::Sp, .rd = reg::sp, .rn = reg::sp, .imm = imm(ops[1])};
        } else if (ops.size() == 2) {
            in = {.op = Op::AddReg, .form = Form::Hi, .rd = R(0), .rn = R(0), .rm = R(1)};
        } else {
            need(3);
            const auto base = R(1);
            if (base != reg::sp && base != reg::pc) throw AsmError(line, "add Rd, Rn, #imm needs sp or pc base");
            in = {.op = Op::AddImm, .form = base == reg::sp ? Form::Sp : Form::Pc, .rd = R(0), .rn = base,
                  .imm = imm(ops[2])};
        }
    } else if (m == "adr") {
        need(2);
        in = {.op = Op::AddImm, .form = Form::Pc, .rd = R(0), .rn = reg::pc,
              .imm = pc_relative(line, ev, ops[1], addr)};
    } else if (m == "sub") {
        need(2);
        if (R(0) != reg::sp) throw AsmError(line, "sub without s needs sp");
        in = {.op = Op::SubImm, .form = Form::Sp, .rd = reg::sp, .rn = reg::sp, .imm = imm(ops[1])};
    } else if (m == "cmp") {
        need(2);
        in = {.op = Op::CmpImm, .rn = R(0), .imm = imm(ops[1])};
    } else if (m == "ldr" || m == "str" || m == "ldrb" || m == "strb") {
        need(2);
        const Op op = m == "ldr" ? Op::LdrImm : m == "str" ? Op::StrImm : m == "ldrb" ? Op::LdrbImm : Op::StrbImm;
        const auto rt = R(0);
        const std::string& mem = ops[1];
        if (mem.empty() || mem.front() != '[') {
            if (op != Op::LdrImm) throw AsmError(line, "only ldr accepts a literal label");
            return Instruction{.op = Op::LdrLit, .rd = rt, .imm = pc_relative(line, ev, mem, addr)};
        }
        if (mem.back() != ']') throw AsmError(line, "unterminated memory operand");
        const auto parts = split_operands(std::string_view(mem).substr(1, mem.size() - 2));
        if (parts.empty() || parts.size() > 2) throw AsmError(line, "bad memory operand");
        const auto base = want_reg(line, parts[0]);
        const std::int32_t off = parts.size() == 2 ? imm(parts[1]) : 0;
        if (base == reg::pc) {
            if (op != Op::LdrImm) throw AsmError(line, "pc base only for ldr");
            in = {.op = Op::LdrLit, .rd = rt, .imm = off};
        } else if (base == reg::sp) {
            if (op != Op::LdrImm && op != Op::StrImm) throw AsmError(line, "sp base only for word access");
            in = {.op = op, .form = Form::Sp, .rd = rt, .rn = reg::sp, .imm = off};
        } else {
            in = {.op = op, .form = (op == Op::LdrImm || op == Op::StrImm) ? Form::T1 : Form::None, .rd = rt,
                  .rn = base, .imm = off};
        }
    } else if (m == "push" || m == "pop") {
        need(1);
        in = {.op = m == "push" ? Op::Push : Op::Pop, .regs = parse_reg_list(line, ops[0])};
    } else if (m == "b") {
        need(1);
        in = {.op = Op::B, .imm = branch_offset(line, ev, ops[0], addr)};
    } else if (m == "bl") {
        need(1);
        in = {.op = Op::Bl, .imm = branch_offset(line, ev, ops[0], addr)};
    } else if (m == "bx" || m == "blx" || m == "bxns") {
        need(1);
        in = {.op = m == "bx" ? Op::Bx : m == "blx" ? Op::Blx : Op::Bxns, .rm = R(0)};
    } else if (m == "nop" || m == "sg") {
        need(0);
        in = {.op = m == "nop" ? Op::Nop : Op::Sg};
    } else if (m == "bkpt" || m == "udf") {
        in = {.op = m == "bkpt" ? Op::Bkpt : Op::Udf, .imm = ops.empty() ? 0 : imm(ops[0])};
    } else if (m.size() == 3 && m[0] == 'b' && parse_cond(std::string_view(m).substr(1))) {
        need(1);
        in = {.op = Op::BCond, .cond = *parse_cond(std::string_view(m).substr(1)),
              .imm = branch_offset(line, ev, ops[0], addr)};
    } else {
        throw AsmError(line, "unknown mnemonic '" + m + "'");
    }
    return in;
}

inline void put_le(Bytes& out, std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

} // namespace asm_detail

/// Parses assembly text into statements.
inline AsmProgram parse_asm(std::string_view text, std::uint32_t origin = 0) {
    AsmProgram prog;
    prog.origin = origin;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        // Strip comments outside string literals.
        bool quoted = false;
        std::size_t cut = raw.size();
        for (std::size_t i = 0; i < raw.size(); ++i) {
            if (raw[i] == '"' && (i == 0 || raw[i - 1] != '\\')) quoted = !quoted;
            if (raw[i] == ';' && !quoted) {
                cut = i;
                break;
            }
        }
        std::string body = asm_detail::trim(raw.substr(0, cut));
        if (body.empty()) continue;
        Statement st;
        st.line = line_no;
        const auto colon = body.find(':');
        if (colon != std::string::npos && body.find('"') > colon) {
            const std::string maybe = asm_detail::trim(std::string_view(body).substr(0, colon));
            const bool ident = !maybe.empty() && maybe.find_first_of(" \t,[{#") == std::string::npos;
            if (ident) {
                st.label = maybe;
                body = asm_detail::trim(std::string_view(body).substr(colon + 1));
            }
        }
        const auto sp = body.find_first_of(" \t");
        st.mnemonic = body.substr(0, sp);
        if (sp != std::string::npos) st.operands = asm_detail::trim(std::string_view(body).substr(sp));
        prog.statements.push_back(std::move(st));
    }
    return prog;
}

/// First pass: label and .equ values. Independent of externs except through
/// .org/.align/.space arguments, which must be numeric or already defined.
inline SymbolTable layout(const AsmProgram& program, const SymbolTable& externs = {}) {
    if (program.origin % 2 != 0) throw AsmError(0, "origin must be halfword aligned");
    SymbolTable symbols;
    asm_detail::Evaluator ev(symbols, externs);
    std::uint32_t loc = program.origin;
    for (const auto& st : program.statements) {
        if (st.mnemonic == ".org") {
            loc = static_cast<std::uint32_t>(ev.eval(st.line, st.operands, true).value());
        }
        if (!st.label.empty()) {
            if (symbols.contains(st.label)) throw AsmError(st.line, "duplicate label '" + st.label + "'");
            symbols[st.label] = loc;
        }
        if (st.mnemonic == ".equ") {
            const auto ops = asm_detail::split_operands(st.operands);
            if (ops.size() != 2) throw AsmError(st.line, ".equ expects name, value");
            if (symbols.contains(ops[0])) throw AsmError(st.line, "duplicate symbol '" + ops[0] + "'");
            symbols[ops[0]] = static_cast<std::uint32_t>(ev.eval(st.line, ops[1], true).value());
            continue;
        }
        loc += asm_detail::statement_size(st, ev, loc);
    }
    return symbols;
}

/// Assembles into one segment per `.org` (plus the initial origin), with a
/// symbol table of label addresses.
inline ImageBlob assemble(const AsmProgram& program, const SymbolTable& externs = {}) {
    ImageBlob blob;
    blob.symbols = layout(program, externs);
    asm_detail::Evaluator ev(blob.symbols, externs);
    std::uint32_t loc = program.origin;
    Segment current{program.origin, {}};
    auto flush = [&] {
        if (!current.bytes.empty()) blob.segments.push_back(std::move(current));
        current = Segment{};
    };
    for (const auto& st : program.statements) {
        const std::string& m = st.mnemonic;
        if (m.empty() || m == ".equ") continue;
        if (m == ".org") {
            flush();
            loc = static_cast<std::uint32_t>(ev.eval(st.line, st.operands, true).value());
            current.origin = loc;
            continue;
        }
        Bytes& out = current.bytes;
        const std::size_t before = out.size();
        if (m == ".word" || m == ".byte") {
            const int n = m == ".word" ? 4 : 1;
            for (const auto& op : asm_detail::split_operands(st.operands)) {
                const auto v = ev.eval(st.line, op, true).value();
                if (n == 1 && (v < -128 || v > 255)) throw RangeError(st.line, ".byte value out of range");
                asm_detail::put_le(out, static_cast<std::uint64_t>(v), n);
            }
        } else if (m == ".ascii" || m == ".asciz") {
            const auto s = asm_detail::unescape(st.line, st.operands);
            out.insert(out.end(), s.begin(), s.end());
            if (m == ".asciz") out.push_back(0);
        } else if (m == ".align") {
            out.resize(out.size() + asm_detail::statement_size(st, ev, loc), 0);
        } else if (m == ".space") {
            const auto ops = asm_detail::split_operands(st.operands);
            const auto n = asm_detail::statement_size(st, ev, loc);
            const auto fill = ops.size() > 1 ? ev.eval(st.line, ops[1], true).value() : 0;
            out.resize(out.size() + n, static_cast<std::uint8_t>(fill));
        } else {
            if (loc % 2 != 0) throw AsmError(st.line, "instruction at odd address");
            const Instruction in = asm_detail::parse_instruction(st, ev, loc);
            Bytes enc;
            try {
                enc = encode(in);
            } catch (const EncodeError& e) {
                throw RangeError(st.line, e.what());
            }
            out.insert(out.end(), enc.begin(), enc.end());
        }
        loc += static_cast<std::uint32_t>(out.size() - before);
    }
    flush();
    return blob;
}

inline ImageBlob assemble_text(std::string_view text, std::uint32_t origin = 0, const SymbolTable& externs = {}) {
    return assemble(parse_asm(text, origin), externs);
}

} // namespace tzm

#endif // TZM_ASSEMBLER_HPP

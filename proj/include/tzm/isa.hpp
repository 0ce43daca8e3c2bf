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

#ifndef TZM_ISA_HPP
#define TZM_ISA_HPP

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace tzm {

using Bytes = std::vector<std::uint8_t>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EncodeError : public Error {
public:
    using Error::Error;
};

namespace reg {
inline constexpr std::uint8_t r0 = 0, r1 = 1, r2 = 2, r3 = 3, r4 = 4, r5 = 5, r6 = 6, r7 = 7;
inline constexpr std::uint8_t r8 = 8, r12 = 12, sp = 13, lr = 14, pc = 15;
} // namespace reg

/// Register-list bits for Push/Pop. Bits 0-7 are R0-R7.
inline constexpr std::uint16_t kListLr = 1u << 14;
inline constexpr std::uint16_t kListPc = 1u << 15;

enum class Op : std::uint8_t {
    MovImm,
    MovReg,
    AddImm,
    AddReg,
    SubImm,
    CmpImm,
    LdrImm,
    StrImm,
    LdrbImm,
    StrbImm,
    LdrLit,
    Push,
    Pop,
    BCond,
    B,
    Bl,
    Bx,
    Blx,
    Bxns,
    Nop,
    Sg,
    Bkpt,
    Udf,
};

/// Encoding form for ops with more than one Thumb encoding.
///   T1  - three-operand low-register form (ADDS Rd,Rn,#imm3 / Rd,Rn,Rm; LDR Rt,[Rn,#imm])
///   T2  - two-operand imm8 form (ADDS Rdn,#imm8)
///   Sp  - SP-relative (ADD SP,SP,#imm / ADD Rd,SP,#imm / LDR Rt,[SP,#imm])
///   Pc  - PC-relative ADR
///   Hi  - high-register form (ADD Rdn,Rm without flags)
enum class Form : std::uint8_t { None, T1, T2, Sp, Pc, Hi };

enum class Cond : std::uint8_t { EQ, NE, CS, CC, MI, PL, VS, VC, HI, LS, GE, LT, GT, LE };

/// One decoded instruction of the supported Thumb subset.
///
/// Immediates are stored as architectural byte values: load/store offsets and
/// SP adjustments in bytes, branch offsets relative to the instruction address
/// plus 4. Fields an op does not use stay zero so that value equality is exact.
struct Instruction {
    Op op = Op::Nop;
    Form form = Form::None;
    std::uint8_t rd = 0; // destination, Rt for loads/stores, Rdn for two-operand forms
    std::uint8_t rn = 0;
    std::uint8_t rm = 0;
    Cond cond = Cond::EQ;
    std::int32_t imm = 0;
    std::uint16_t regs = 0;

    [[nodiscard]] int width() const { return (op == Op::Bl || op == Op::Sg) ? 4 : 2; }

    friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct DecodeError {
    std::uint16_t halfword = 0;
    std::string reason;
};

using DecodeResult = std::variant<Instruction, DecodeError>;

namespace detail {

[[noreturn]] inline void encode_fail(const std::string& what) { throw EncodeError(what); }

inline void require_low(std::uint8_t r, const char* what) {
    if (r > 7) {
        encode_fail(std::string(what) + " must be a low register (r0-r7)");
    }
}

inline void require_range(std::int64_t v, std::int64_t lo, std::int64_t hi, std::int64_t step, const char* what) {
    if (v < lo || v > hi || (v - lo) % step != 0) {
        std::ostringstream os;
        os << what << " immediate " << v << " outside [" << lo << ", " << hi << "] step " << step;
        encode_fail(os.str());
    }
}

inline std::int32_t sign_extend(std::uint32_t value, int bits) {
    const std::uint32_t m = 1u << (bits - 1);
    return static_cast<std::int32_t>((value ^ m) - m);
}

inline bool is_wide_prefix(std::uint16_t hw) {
    const unsigned top = hw >> 11;
    return top == 0x1D || top == 0x1E || top == 0x1F;
}

} // namespace detail

/// Encodes one instruction into one or two little-endian halfwords.
inline Bytes encode(const Instruction& in) {
    using detail::require_low;
    using detail::require_range;
    std::uint16_t hw = 0;
    switch (in.op) {
    case Op::MovImm:
        require_low(in.rd, "movs Rd");
        require_range(in.imm, 0, 255, 1, "movs");
        hw = static_cast<std::uint16_t>(0x2000 | in.rd << 8 | in.imm);
        break;
    case Op::MovReg:
        if (in.rd > 15 || in.rm > 15) detail::encode_fail("mov register out of range");
        hw = static_cast<std::uint16_t>(0x4600 | (in.rd & 8) << 4 | in.rm << 3 | (in.rd & 7));
        break;
    case Op::AddImm:
        switch (in.form) {
        case Form::T1:
            require_low(in.rd, "adds Rd");
            require_low(in.rn, "adds Rn");
            require_range(in.imm, 0, 7, 1, "adds imm3");
            hw = static_cast<std::uint16_t>(0x1C00 | in.imm << 6 | in.rn << 3 | in.rd);
            break;
        case Form::T2:
            require_low(in.rd, "adds Rdn");
            if (in.rn != in.rd) detail::encode_fail("adds imm8 form needs Rd == Rn");
            require_range(in.imm, 0, 255, 1, "adds imm8");
            hw = static_cast<std::uint16_t>(0x3000 | in.rd << 8 | in.imm);
            break;
        case Form::Sp:
            if (in.rn != reg::sp) detail::encode_fail("add sp form needs Rn == sp");
            if (in.rd == reg::sp) {
                require_range(in.imm, 0, 508, 4, "add sp");
                hw = static_cast<std::uint16_t>(0xB000 | in.imm / 4);
            } else {
                require_low(in.rd, "add Rd, sp");
                require_range(in.imm, 0, 1020, 4, "add Rd, sp");
                hw = static_cast<std::uint16_t>(0xA800 | in.rd << 8 | in.imm / 4);
            }
            break;
        case Form::Pc:
            require_low(in.rd, "adr Rd");
            if (in.rn != reg::pc) detail::encode_fail("adr needs Rn == pc");
            require_range(in.imm, 0, 1020, 4, "adr");
            hw = static_cast<std::uint16_t>(0xA000 | in.rd << 8 | in.imm / 4);
            break;
        default:
            detail::encode_fail("add immediate: bad form");
        }
        break;
    case Op::AddReg:
        if (in.form == Form::T1) {
            require_low(in.rd, "adds Rd");
            require_low(in.rn, "adds Rn");
            require_low(in.rm, "adds Rm");
            hw = static_cast<std::uint16_t>(0x1800 | in.rm << 6 | in.rn << 3 | in.rd);
        } else if (in.form == Form::Hi) {
            if (in.rd > 14 || in.rm > 14 || in.rn != in.rd) detail::encode_fail("add high form: bad registers");
            hw = static_cast<std::uint16_t>(0x4400 | (in.rd & 8) << 4 | in.rm << 3 | (in.rd & 7));
        } else {
            detail::encode_fail("add register: bad form");
        }
        break;
    case Op::SubImm:
        switch (in.form) {
        case Form::T1:
            require_low(in.rd, "subs Rd");
            require_low(in.rn, "subs Rn");
            require_range(in.imm, 0, 7, 1, "subs imm3");
            hw = static_cast<std::uint16_t>(0x1E00 | in.imm << 6 | in.rn << 3 | in.rd);
            break;
        case Form::T2:
            require_low(in.rd, "subs Rdn");
            if (in.rn != in.rd) detail::encode_fail("subs imm8 form needs Rd == Rn");
            require_range(in.imm, 0, 255, 1, "subs imm8");
            hw = static_cast<std::uint16_t>(0x3800 | in.rd << 8 | in.imm);
            break;
        case Form::Sp:
            if (in.rd != reg::sp || in.rn != reg::sp) detail::encode_fail("sub sp form needs sp operands");
            require_range(in.imm, 0, 508, 4, "sub sp");
            hw = static_cast<std::uint16_t>(0xB080 | in.imm / 4);
            break;
        default:
            detail::encode_fail("sub immediate: bad form");
        }
        break;
    case Op::CmpImm:
        require_low(in.rn, "cmp Rn");
        require_range(in.imm, 0, 255, 1, "cmp");
        hw = static_cast<std::uint16_t>(0x2800 | in.rn << 8 | in.imm);
        break;
    case Op::LdrImm:
    case Op::StrImm: {
        const bool load = in.op == Op::LdrImm;
        require_low(in.rd, "ldr/str Rt");
        if (in.form == Form::T1) {
            require_low(in.rn, "ldr/str Rn");
            require_range(in.imm, 0, 124, 4, "ldr/str");
            hw = static_cast<std::uint16_t>((load ? 0x6800 : 0x6000) | (in.imm / 4) << 6 | in.rn << 3 | in.rd);
        } else if (in.form == Form::Sp) {
            if (in.rn != reg::sp) detail::encode_fail("ldr/str sp form needs Rn == sp");
            require_range(in.imm, 0, 1020, 4, "ldr/str sp");
            hw = static_cast<std::uint16_t>((load ? 0x9800 : 0x9000) | in.rd << 8 | in.imm / 4);
        } else {
            detail::encode_fail("ldr/str: bad form");
        }
        break;
    }
    case Op::LdrbImm:
    case Op::StrbImm:
        require_low(in.rd, "ldrb/strb Rt");
        require_low(in.rn, "ldrb/strb Rn");
        require_range(in.imm, 0, 31, 1, "ldrb/strb");
        hw = static_cast<std::uint16_t>((in.op == Op::LdrbImm ? 0x7800 : 0x7000) | in.imm << 6 | in.rn << 3 | in.rd);
        break;
    case Op::LdrLit:
        require_low(in.rd, "ldr literal Rt");
        require_range(in.imm, 0, 1020, 4, "ldr literal");
        hw = static_cast<std::uint16_t>(0x4800 | in.rd << 8 | in.imm / 4);
        break;
    case Op::Push:
        if (in.regs == 0 || (in.regs & ~(0xFFu | kListLr)) != 0) detail::encode_fail("push list must be r0-r7 and lr");
        hw = static_cast<std::uint16_t>(0xB400 | ((in.regs & kListLr) ? 0x100 : 0) | (in.regs & 0xFF));
        break;
    case Op::Pop:
        if (in.regs == 0 || (in.regs & ~(0xFFu | kListPc)) != 0) detail::encode_fail("pop list must be r0-r7 and pc");
        hw = static_cast<std::uint16_t>(0xBC00 | ((in.regs & kListPc) ? 0x100 : 0) | (in.regs & 0xFF));
        break;
    case Op::BCond:
        require_range(in.imm, -256, 254, 2, "b<cond>");
        hw = static_cast<std::uint16_t>(0xD000 | static_cast<unsigned>(in.cond) << 8 | ((in.imm >> 1) & 0xFF));
        break;
    case Op::B:
        require_range(in.imm, -2048, 2046, 2, "b");
        hw = static_cast<std::uint16_t>(0xE000 | ((in.imm >> 1) & 0x7FF));
        break;
    case Op::Bl: {
        require_range(in.imm, -16777216, 16777214, 2, "bl");
        const auto v = static_cast<std::uint32_t>(in.imm);
        const std::uint32_t s = (v >> 24) & 1;
        const std::uint32_t i1 = (v >> 23) & 1;
        const std::uint32_t i2 = (v >> 22) & 1;
        const std::uint32_t j1 = (i1 ^ 1) ^ s;
        const std::uint32_t j2 = (i2 ^ 1) ^ s;
        const auto h1 = static_cast<std::uint16_t>(0xF000 | s << 10 | ((v >> 12) & 0x3FF));
        const auto h2 = static_cast<std::uint16_t>(0xD000 | j1 << 13 | j2 << 11 | ((v >> 1) & 0x7FF));
        return {static_cast<std::uint8_t>(h1), static_cast<std::uint8_t>(h1 >> 8), static_cast<std::uint8_t>(h2),
                static_cast<std::uint8_t>(h2 >> 8)};
    }
    case Op::Bx:
    case Op::Blx:
    case Op::Bxns: {
        if (in.rm > 15) detail::encode_fail("bx register out of range");
        if (in.op == Op::Blx && in.rm == reg::pc) detail::encode_fail("blx pc is unpredictable");
        const unsigned base = in.op == Op::Bx ? 0x4700 : in.op == Op::Blx ? 0x4780 : 0x4704;
        hw = static_cast<std::uint16_t>(base | in.rm << 3);
        break;
    }
    case Op::Nop:
        hw = 0xBF00;
        break;
    case Op::Sg:
        return {0x7F, 0xE9, 0x7F, 0xE9};
    case Op::Bkpt:
    case Op::Udf:
        require_range(in.imm, 0, 255, 1, "bkpt/udf");
        hw = static_cast<std::uint16_t>((in.op == Op::Bkpt ? 0xBE00 : 0xDE00) | in.imm);
        break;
    }
    return {static_cast<std::uint8_t>(hw), static_cast<std::uint8_t>(hw >> 8)};
}

/// Decodes a single 16-bit halfword. Wide prefixes yield a DecodeError here;
/// use decode() on a byte sequence for BL and SG.
inline DecodeResult decode_halfword(std::uint16_t hw) {
    Instruction in;
    auto low = [&](unsigned shift) { return static_cast<std::uint8_t>((hw >> shift) & 7); };
    auto fail = [&](const char* why) { return DecodeResult{DecodeError{hw, why}}; };

    if ((hw & 0xF800) == 0x2000) {
        in.op = Op::MovImm;
        in.rd = low(8);
        in.imm = hw & 0xFF;
    } else if ((hw & 0xFF00) == 0x4600) {
        in.op = Op::MovReg;
        in.rd = static_cast<std::uint8_t>(((hw >> 4) & 8) | (hw & 7));
        in.rm = static_cast<std::uint8_t>((hw >> 3) & 0xF);
    } else if ((hw & 0xFE00) == 0x1C00 || (hw & 0xFE00) == 0x1E00) {
        in.op = (hw & 0x0200) ? Op::SubImm : Op::AddImm;
        in.form = Form::T1;
        in.rd = low(0);
        in.rn = low(3);
        in.imm = (hw >> 6) & 7;
    } else if ((hw & 0xF800) == 0x3000 || (hw & 0xF800) == 0x3800) {
        in.op = (hw & 0x0800) ? Op::SubImm : Op::AddImm;
        in.form = Form::T2;
        in.rd = in.rn = low(8);
        in.imm = hw & 0xFF;
    } else if ((hw & 0xFF00) == 0xB000) {
        in.op = (hw & 0x80) ? Op::SubImm : Op::AddImm;
        in.form = Form::Sp;
        in.rd = in.rn = reg::sp;
        in.imm = (hw & 0x7F) * 4;
    } else if ((hw & 0xF800) == 0xA800) {
        in.op = Op::AddImm;
        in.form = Form::Sp;
        in.rd = low(8);
        in.rn = reg::sp;
        in.imm = (hw & 0xFF) * 4;
    } else if ((hw & 0xF800) == 0xA000) {
        in.op = Op::AddImm;
        in.form = Form::Pc;
        in.rd = low(8);
        in.rn = reg::pc;
        in.imm = (hw & 0xFF) * 4;
    } else if ((hw & 0xFE00) == 0x1800) {
        in.op = Op::AddReg;
        in.form = Form::T1;
        in.rd = low(0);
        in.rn = low(3);
        in.rm = low(6);
    } else if ((hw & 0xFF00) == 0x4400) {
        const auto rdn = static_cast<std::uint8_t>(((hw >> 4) & 8) | (hw & 7));
        const auto rm = static_cast<std::uint8_t>((hw >> 3) & 0xF);
        if (rdn == reg::pc || rm == reg::pc) return fail("add with pc operand is outside the subset");
        in.op = Op::AddReg;
        in.form = Form::Hi;
        in.rd = in.rn = rdn;
        in.rm = rm;
    } else if ((hw & 0xF800) == 0x2800) {
        in.op = Op::CmpImm;
        in.rn = low(8);
        in.imm = hw & 0xFF;
    } else if ((hw & 0xF000) == 0x6000) {
        in.op = (hw & 0x0800) ? Op::LdrImm : Op::StrImm;
        in.form = Form::T1;
        in.rd = low(0);
        in.rn = low(3);
        in.imm = ((hw >> 6) & 0x1F) * 4;
    } else if ((hw & 0xF000) == 0x9000) {
        in.op = (hw & 0x0800) ? Op::LdrImm : Op::StrImm;
        in.form = Form::Sp;
        in.rd = low(8);
        in.rn = reg::sp;
        in.imm = (hw & 0xFF) * 4;
    } else if ((hw & 0xF000) == 0x7000) {
        in.op = (hw & 0x0800) ? Op::LdrbImm : Op::StrbImm;
        in.rd = low(0);
        in.rn = low(3);
        in.imm = (hw >> 6) & 0x1F;
    } else if ((hw & 0xF800) == 0x4800) {
        in.op = Op::LdrLit;
        in.rd = low(8);
        in.imm = (hw & 0xFF) * 4;
    } else if ((hw & 0xFE00) == 0xB400 || (hw & 0xFE00) == 0xBC00) {
        const bool pop = (hw & 0x0800) != 0;
        const bool extra = (hw & 0x0100) != 0;
        if ((hw & 0x1FF) == 0) return fail("empty register list");
        in.op = pop ? Op::Pop : Op::Push;
        in.regs = static_cast<std::uint16_t>((hw & 0xFF) | (extra ? (pop ? kListPc : kListLr) : 0));
    } else if ((hw & 0xFF00) == 0xDE00) {
        in.op = Op::Udf;
        in.imm = hw & 0xFF;
    } else if ((hw & 0xF000) == 0xD000) {
        const unsigned c = (hw >> 8) & 0xF;
        if (c >= 14) return fail("svc is outside the subset");
        in.op = Op::BCond;
        in.cond = static_cast<Cond>(c);
        in.imm = detail::sign_extend(hw & 0xFF, 8) * 2;
    } else if ((hw & 0xF800) == 0xE000) {
        in.op = Op::B;
        in.imm = detail::sign_extend(hw & 0x7FF, 11) * 2;
    } else if ((hw & 0xFF80) == 0x4700 || (hw & 0xFF80) == 0x4780) {
        const unsigned low3 = hw & 7;
        in.rm = static_cast<std::uint8_t>((hw >> 3) & 0xF);
        if ((hw & 0x80) != 0) {
            if (low3 != 0) return fail("blxns is outside the subset");
            if (in.rm == reg::pc) return fail("blx pc is unpredictable");
            in.op = Op::Blx;
        } else if (low3 == 0) {
            in.op = Op::Bx;
        } else if (low3 == 4) {
            in.op = Op::Bxns;
        } else {
            return fail("reserved branch-exchange encoding");
        }
    } else if (hw == 0xBF00) {
        in.op = Op::Nop;
    } else if ((hw & 0xFF00) == 0xBE00) {
        in.op = Op::Bkpt;
        in.imm = hw & 0xFF;
    } else if (detail::is_wide_prefix(hw)) {
        return fail("32-bit prefix");
    } else {
        return fail("encoding outside the subset");
    }
    return in;
}

/// Decodes the instruction at `offset`. Consumes 2 or 4 bytes.
inline DecodeResult decode(std::span<const std::uint8_t> bytes, std::size_t offset = 0) {
    if (offset + 2 > bytes.size()) {
        return DecodeError{0, "truncated input"};
    }
    const auto h1 = static_cast<std::uint16_t>(bytes[offset] | bytes[offset + 1] << 8);
    if (!detail::is_wide_prefix(h1)) {
        return decode_halfword(h1);
    }
    if (offset + 4 > bytes.size()) {
        return DecodeError{h1, "truncated 32-bit instruction"};
    }
    const auto h2 = static_cast<std::uint16_t>(bytes[offset + 2] | bytes[offset + 3] << 8);
    if (h1 == 0xE97F && h2 == 0xE97F) {
        return Instruction{.op = Op::Sg};
    }
    if ((h1 & 0xF800) == 0xF000 && (h2 & 0xD000) == 0xD000) {
        const std::uint32_t s = (h1 >> 10) & 1;
        const std::uint32_t j1 = (h2 >> 13) & 1;
        const std::uint32_t j2 = (h2 >> 11) & 1;
        const std::uint32_t i1 = (j1 ^ s) ^ 1;
        const std::uint32_t i2 = (j2 ^ s) ^ 1;
        const std::uint32_t raw = s << 24 | i1 << 23 | i2 << 22 | (h1 & 0x3FFu) << 12 | (h2 & 0x7FFu) << 1;
        return Instruction{.op = Op::Bl, .imm = detail::sign_extend(raw, 25)};
    }
    return DecodeError{h1, "32-bit encoding outside the subset"};
}

inline const Instruction* as_instruction(const DecodeResult& r) { return std::get_if<Instruction>(&r); }

/// Indices of 0x00 bytes, ascending.
inline std::vector<std::size_t> null_byte_positions(std::span<const std::uint8_t> bytes) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        if (bytes[i] == 0) out.push_back(i);
    }
    return out;
}

/// True when the op writes NZCV.
inline bool sets_flags(const Instruction& in) {
    switch (in.op) {
    case Op::MovImm:
    case Op::CmpImm:
        return true;
    case Op::AddImm:
    case Op::SubImm:
    case Op::AddReg:
        return in.form == Form::T1 || in.form == Form::T2;
    default:
        return false;
    }
}

struct NullFreeSubstitute {
    Instruction instruction;
    bool flags_differ = false; // NZCV results may differ from the original
};

namespace detail {

// Instructions whose only architectural effect is on flags (or nothing).
inline bool is_register_noop(const Instruction& in) {
    switch (in.op) {
    case Op::Nop:
    case Op::CmpImm:
        return true;
    case Op::MovReg:
        return in.rd == in.rm && in.rd != reg::pc;
    case Op::AddImm:
    case Op::SubImm:
        return in.imm == 0 && in.form != Form::Pc && (in.form != Form::Sp || in.rd == reg::sp) && in.rd == in.rn;
    default:
        return false;
    }
}

} // namespace detail

/// Null-free replacement with the same register/memory/control effect.
/// The table covers every subset instruction for which a single null-free
/// 16-bit equivalent exists; everything else yields nullopt.
inline std::optional<NullFreeSubstitute> substitute_null_free(const Instruction& in) {
    if (null_byte_positions(encode(in)).empty()) {
        return NullFreeSubstitute{in, false};
    }
    if (detail::is_register_noop(in)) {
        // MOV R2, R2: no flag writes, encoding 0x4612.
        const Instruction mov{.op = Op::MovReg, .rd = reg::r2, .rm = reg::r2};
        return NullFreeSubstitute{mov, sets_flags(in)};
    }
    std::vector<NullFreeSubstitute> candidates;
    if ((in.op == Op::AddImm || in.op == Op::SubImm) && in.form == Form::T2 && in.imm <= 7) {
        Instruction t1 = in;
        t1.form = Form::T1;
        t1.rn = in.rd;
        candidates.push_back({t1, false});
    }
    if ((in.op == Op::AddImm || in.op == Op::SubImm) && in.form == Form::T1 && in.rd == in.rn) {
        Instruction t2 = in;
        t2.form = Form::T2;
        candidates.push_back({t2, false});
    }
    if (in.op == Op::AddReg && in.form == Form::T1) {
        Instruction swapped = in;
        std::swap(swapped.rn, swapped.rm);
        candidates.push_back({swapped, false});
        if (in.rd == in.rn || in.rd == in.rm) {
            const Instruction hi{.op = Op::AddReg, .form = Form::Hi, .rd = in.rd, .rn = in.rd,
                                 .rm = in.rd == in.rn ? in.rm : in.rn};
            candidates.push_back({hi, true});
        }
    }
    if (in.op == Op::AddImm && in.form == Form::Sp && in.rd != reg::sp && in.imm == 0) {
        candidates.push_back({Instruction{.op = Op::MovReg, .rd = in.rd, .rm = reg::sp}, false});
    }
    if (in.op == Op::B && in.imm == 0) {
        // MOV PC, PC lands on the instruction address plus 4, like B +0.
        candidates.push_back({Instruction{.op = Op::MovReg, .rd = reg::pc, .rm = reg::pc}, false});
    }
    for (const auto& c : candidates) {
        if (null_byte_positions(encode(c.instruction)).empty()) {
            return c;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Disassembly

inline std::string reg_name(unsigned r) {
    switch (r) {
    case reg::sp:
        return "sp";
    case reg::lr:
        return "lr";
    case reg::pc:
        return "pc";
    default:
        return "r" + std::to_string(r);
    }
}

inline const char* cond_name(Cond c) {
    static constexpr std::array<const char*, 14> names{"eq", "ne", "cs", "cc", "mi", "pl", "vs",
                                                       "vc", "hi", "ls", "ge", "lt", "gt", "le"};
    return names[static_cast<unsigned>(c)];
}

inline std::string reg_list_text(std::uint16_t regs) {
    std::string s = "{";
    bool first = true;
    for (unsigned r = 0; r < 16; ++r) {
        if (regs & (1u << r)) {
            if (!first) s += ", ";
            s += reg_name(r);
            first = false;
        }
    }
    return s + "}";
}

inline std::string hex32(std::uint32_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s = "0x00000000";
    for (int i = 9; i >= 2; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

/// Assembler-compatible text. Branch targets print as absolute addresses
/// computed from `addr`, so disassemble -> assemble at the same address is
/// the identity.
inline std::string disassemble(const Instruction& in, std::uint32_t addr = 0) {
    const auto R = [](unsigned r) { return reg_name(r); };
    const auto I = [](std::int32_t v) { return "#" + std::to_string(v); };
    const auto target = [&] { return hex32(addr + 4 + static_cast<std::uint32_t>(in.imm)); };
    switch (in.op) {
    case Op::MovImm:
        return "movs " + R(in.rd) + ", " + I(in.imm);
    case Op::MovReg:
        return "mov " + R(in.rd) + ", " + R(in.rm);
    case Op::AddImm:
        switch (in.form) {
        case Form::T1:
            return "adds " + R(in.rd) + ", " + R(in.rn) + ", " + I(in.imm);
        case Form::T2:
            return "adds " + R(in.rd) + ", " + I(in.imm);
        case Form::Sp:
            return in.rd == reg::sp ? "add sp, " + I(in.imm) : "add " + R(in.rd) + ", sp, " + I(in.imm);
        default:
            return "add " + R(in.rd) + ", pc, " + I(in.imm);
        }
    case Op::AddReg:
        return in.form == Form::T1 ? "adds " + R(in.rd) + ", " + R(in.rn) + ", " + R(in.rm)
                                   : "add " + R(in.rd) + ", " + R(in.rm);
    case Op::SubImm:
        switch (in.form) {
        case Form::T1:
            return "subs " + R(in.rd) + ", " + R(in.rn) + ", " + I(in.imm);
        case Form::T2:
            return "subs " + R(in.rd) + ", " + I(in.imm);
        default:
            return "sub sp, " + I(in.imm);
        }
    case Op::CmpImm:
        return "cmp " + R(in.rn) + ", " + I(in.imm);
    case Op::LdrImm:
    case Op::StrImm:
        return std::string(in.op == Op::LdrImm ? "ldr " : "str ") + R(in.rd) + ", [" + R(in.rn) + ", " + I(in.imm) + "]";
    case Op::LdrbImm:
    case Op::StrbImm:
        return std::string(in.op == Op::LdrbImm ? "ldrb " : "strb ") + R(in.rd) + ", [" + R(in.rn) + ", " + I(in.imm) +
               "]";
    case Op::LdrLit:
        return "ldr " + R(in.rd) + ", [pc, " + I(in.imm) + "]";
    case Op::Push:
        return "push " + reg_list_text(in.regs);
    case Op::Pop:
        return "pop " + reg_list_text(in.regs);
    case Op::BCond:
        return std::string("b") + cond_name(in.cond) + " " + target();
    case Op::B:
        return "b " + target();
    case Op::Bl:
        return "bl " + target();
    case Op::Bx:
        return "bx " + R(in.rm);
    case Op::Blx:
        return "blx " + R(in.rm);
    case Op::Bxns:
        return "bxns " + R(in.rm);
    case Op::Nop:
        return "nop";
    case Op::Sg:
        return "sg";
    case Op::Bkpt:
        return "bkpt " + I(in.imm);
    case Op::Udf:
        return "udf " + I(in.imm);
    }
    return "?";
}

} // namespace tzm

#endif // TZM_ISA_HPP

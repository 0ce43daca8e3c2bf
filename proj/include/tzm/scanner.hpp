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

// Static firmware analysis over headerless blobs: linear sweep, epilogue
// census, gadget windows, branch-to-SP search and gateway enumeration.

#ifndef TZM_SCANNER_HPP
#define TZM_SCANNER_HPP

#include <algorithm>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <random>
#include <span>
#include <vector>

#include "tzm/assembler.hpp"
#include "tzm/isa.hpp"
#include "tzm/memory.hpp"

namespace tzm {

struct SweptInstruction {
    std::uint32_t addr = 0;
    Instruction in;
};

struct Sweep {
    std::vector<SweptInstruction> items;
    std::size_t unknown = 0;
};

/// Linear sweep from `base`; an undecodable halfword counts as unknown and
/// the sweep resumes 2 bytes later. A trailing odd byte is ignored.
inline Sweep sweep(std::span<const std::uint8_t> bytes, std::uint32_t base) {
    Sweep s;
    std::size_t off = 0;
    while (off + 2 <= bytes.size()) {
        const auto res = decode(bytes, off);
        if (const auto* in = as_instruction(res)) {
            s.items.push_back({base + static_cast<std::uint32_t>(off), *in});
            off += static_cast<std::size_t>(in->width());
        } else {
            ++s.unknown;
            off += 2;
        }
    }
    return s;
}

inline bool is_pop_pc(const Instruction& in) { return in.op == Op::Pop && (in.regs & kListPc) != 0; }
inline bool is_bx_lr(const Instruction& in) { return in.op == Op::Bx && in.rm == reg::lr; }
inline bool is_terminator(const Instruction& in) { return is_pop_pc(in) || is_bx_lr(in); }

struct Census {
    std::size_t total_instructions = 0;
    std::size_t pop_pc = 0;
    std::size_t bx_lr = 0;
    std::size_t unknown = 0;

    [[nodiscard]] double gadget_density() const {
        return total_instructions == 0 ? 0.0
                                       : static_cast<double>(pop_pc + bx_lr) / static_cast<double>(total_instructions);
    }
    friend bool operator==(const Census&, const Census&) = default;
};

/// total_instructions counts decoded instructions only; unknown halfwords
/// are reported separately.
inline Census census(const Sweep& s) {
    Census c;
    c.total_instructions = s.items.size();
    c.unknown = s.unknown;
    for (const auto& it : s.items) {
        c.pop_pc += is_pop_pc(it.in) ? 1 : 0;
        c.bx_lr += is_bx_lr(it.in) ? 1 : 0;
    }
    return c;
}

inline Census census(std::span<const std::uint8_t> bytes, std::uint32_t base) { return census(sweep(bytes, base)); }

enum class Terminator : std::uint8_t { PopPC, PopThenBxLr };

struct Gadget {
    std::uint32_t entry = 0;
    std::vector<SweptInstruction> instructions;
    Terminator terminator = Terminator::PopPC;
    /// Registers loaded from the stack, in pop order. A popped register that
    /// is later copied into LR ahead of BX LR is reported as LR.
    std::vector<std::uint8_t> pop_effect;

    [[nodiscard]] bool controls_flow() const {
        return std::any_of(pop_effect.begin(), pop_effect.end(),
                           [](std::uint8_t r) { return r == reg::pc || r == reg::lr; });
    }
};

inline std::vector<std::uint8_t> list_registers(std::uint16_t regs) {
    std::vector<std::uint8_t> out;
    for (std::uint8_t r = 0; r < 8; ++r) {
        if (regs & (1u << r)) out.push_back(r);
    }
    if (regs & kListLr) out.push_back(reg::lr);
    if (regs & kListPc) out.push_back(reg::pc);
    return out;
}

inline std::vector<std::uint8_t> pop_effect_of(std::span<const SweptInstruction> window) {
    std::vector<std::uint8_t> effect;
    for (const auto& it : window) {
        if (it.in.op == Op::Pop) {
            const auto regs = list_registers(it.in.regs);
            effect.insert(effect.end(), regs.begin(), regs.end());
        } else if (it.in.op == Op::MovReg && it.in.rd == reg::lr) {
            // Rename the most recent stack load of the source register.
            for (auto r = effect.rbegin(); r != effect.rend(); ++r) {
                if (*r == it.in.rm) {
                    *r = reg::lr;
                    break;
                }
            }
        }
    }
    return effect;
}

/// Every window of 1..max_len contiguous instructions ending at a
/// terminator, with no terminator inside. Windows never span an unknown
/// halfword. Sorted by entry.
inline std::vector<Gadget> find_gadgets(const Sweep& s, std::size_t max_len) {
    std::vector<Gadget> out;
    const auto& items = s.items;
    for (std::size_t t = 0; t < items.size(); ++t) {
        if (!is_terminator(items[t].in)) continue;
        for (std::size_t len = 1; len <= max_len && len <= t + 1; ++len) {
            const std::size_t first = t + 1 - len;
            if (len > 1) {
                const auto& a = items[first];
                const auto& b = items[first + 1];
                if (is_terminator(a.in)) break;
                if (a.addr + static_cast<std::uint32_t>(a.in.width()) != b.addr) break;
            }
            Gadget g;
            g.entry = items[first].addr;
            g.instructions.assign(items.begin() + static_cast<std::ptrdiff_t>(first),
                                  items.begin() + static_cast<std::ptrdiff_t>(t + 1));
            g.terminator = is_pop_pc(items[t].in) ? Terminator::PopPC : Terminator::PopThenBxLr;
            g.pop_effect = pop_effect_of(g.instructions);
            out.push_back(std::move(g));
        }
    }
    std::sort(out.begin(), out.end(), [](const Gadget& a, const Gadget& b) { return a.entry < b.entry; });
    return out;
}

inline std::vector<Gadget> find_gadgets(std::span<const std::uint8_t> bytes, std::uint32_t base, std::size_t max_len) {
    return find_gadgets(sweep(bytes, base), max_len);
}

/// Register branches whose operand is SP: BX SP, BLX SP, MOV PC, SP.
inline bool is_jmp_sp(const Instruction& in) {
    if ((in.op == Op::Bx || in.op == Op::Blx) && in.rm == reg::sp) return true;
    return in.op == Op::MovReg && in.rd == reg::pc && in.rm == reg::sp;
}

inline std::vector<std::uint32_t> find_jmp_sp(const Sweep& s) {
    std::vector<std::uint32_t> out;
    for (const auto& it : s.items) {
        if (is_jmp_sp(it.in)) out.push_back(it.addr);
    }
    return out;
}

/// SG instructions whose address the map attributes to NSC.
inline std::vector<std::uint32_t> find_nsc_entries(const Sweep& s, const MemoryMap& map) {
    std::vector<std::uint32_t> out;
    for (const auto& it : s.items) {
        if (it.in.op == Op::Sg && map.attribution(it.addr) == SecurityAttr::NSC) out.push_back(it.addr);
    }
    return out;
}

/// Sweep of every segment, concatenated in address order.
inline Sweep sweep(const ImageBlob& blob) {
    std::vector<const Segment*> segs;
    for (const auto& seg : blob.segments) segs.push_back(&seg);
    std::sort(segs.begin(), segs.end(), [](const Segment* a, const Segment* b) { return a->origin < b->origin; });
    Sweep all;
    for (const auto* seg : segs) {
        auto s = sweep(seg->bytes, seg->origin);
        all.items.insert(all.items.end(), s.items.begin(), s.items.end());
        all.unknown += s.unknown;
    }
    return all;
}

struct ScanReport {
    Census census;
    std::vector<Gadget> gadgets;
    std::vector<std::uint32_t> nsc_entries;
    std::vector<std::uint32_t> jmp_sp;
};

inline ScanReport scan(const Sweep& s, const MemoryMap& map, std::size_t max_gadget_len) {
    return {census(s), find_gadgets(s, max_gadget_len), find_nsc_entries(s, map), find_jmp_sp(s)};
}

inline nlohmann::json to_json(const ScanReport& r) {
    nlohmann::json gadgets = nlohmann::json::array();
    for (const auto& g : r.gadgets) {
        nlohmann::json ins = nlohmann::json::array();
        for (const auto& it : g.instructions) ins.push_back(disassemble(it.in, it.addr));
        nlohmann::json pops = nlohmann::json::array();
        for (auto reg_index : g.pop_effect) pops.push_back(reg_name(reg_index));
        gadgets.push_back({{"entry", g.entry},
                           {"instructions", ins},
                           {"terminator", g.terminator == Terminator::PopPC ? "pop_pc" : "bx_lr"},
                           {"pop_effect", pops}});
    }
    return {{"total", r.census.total_instructions},
            {"pop_pc", r.census.pop_pc},
            {"bx_lr", r.census.bx_lr},
            {"unknown", r.census.unknown},
            {"density", r.census.gadget_density()},
            {"gadgets", gadgets},
            {"nsc_entries", r.nsc_entries},
            {"jmp_sp", r.jmp_sp}};
}

/// Synthetic image with a fixed epilogue census: `total` instructions of
/// which `pop_pc` are POP {..., PC}, `bx_lr` are BX LR and `bl` are 32-bit
/// BLs; the rest are non-terminating 16-bit instructions. Defaults give
/// 1908 / 49 / 16 in 4240 bytes.
inline Bytes planted_census_image(std::uint32_t seed = 1, std::size_t total = 1908, std::size_t pop_pc = 49,
                                  std::size_t bx_lr = 16, std::size_t bl = 212) {
    if (pop_pc + bx_lr + bl > total) throw Error("planted census: more special instructions than total");
    std::mt19937 rng(seed);
    enum class Kind : std::uint8_t { Filler, PopPc, BxLr, Bl };
    std::vector<Kind> kinds(total, Kind::Filler);
    std::fill_n(kinds.begin(), pop_pc, Kind::PopPc);
    std::fill_n(kinds.begin() + static_cast<std::ptrdiff_t>(pop_pc), bx_lr, Kind::BxLr);
    std::fill_n(kinds.begin() + static_cast<std::ptrdiff_t>(pop_pc + bx_lr), bl, Kind::Bl);
    std::shuffle(kinds.begin(), kinds.end(), rng);
    Bytes out;
    auto put = [&](const Instruction& in) {
        const auto b = encode(in);
        out.insert(out.end(), b.begin(), b.end());
    };
    for (auto k : kinds) {
        switch (k) {
        case Kind::PopPc:
            put({.op = Op::Pop, .regs = static_cast<std::uint16_t>((rng() & 0xFF) | kListPc)});
            break;
        case Kind::BxLr: put({.op = Op::Bx, .rm = reg::lr}); break;
        case Kind::Bl: put({.op = Op::Bl, .imm = static_cast<std::int32_t>(rng() % 2048) * 2 - 2048}); break;
        case Kind::Filler:
            switch (rng() % 4) {
            case 0:
                put({.op = Op::MovImm, .rd = static_cast<std::uint8_t>(rng() % 8),
                     .imm = static_cast<std::int32_t>(rng() % 256)});
                break;
            case 1:
                put({.op = Op::AddReg, .form = Form::T1, .rd = static_cast<std::uint8_t>(rng() % 8),
                     .rn = static_cast<std::uint8_t>(rng() % 8), .rm = static_cast<std::uint8_t>(rng() % 8)});
                break;
            case 2:
                put({.op = Op::LdrImm, .form = Form::T1, .rd = static_cast<std::uint8_t>(rng() % 8),
                     .rn = static_cast<std::uint8_t>(rng() % 8), .imm = static_cast<std::int32_t>(rng() % 32) * 4});
                break;
            default:
                put({.op = Op::Push, .regs = static_cast<std::uint16_t>((rng() & 0xF0) | kListLr)});
                break;
            }
            break;
        }
    }
    return out;
}

} // namespace tzm

#endif // TZM_SCANNER_HPP

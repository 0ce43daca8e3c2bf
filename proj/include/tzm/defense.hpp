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

// Mitigations: non-executable stacks, a CFI branch monitor with a Secure
// shadow stack, and hardened NSC gateways. Plus the attack x defense matrix.
//
// CFI works on the assembler's statement list. Every call, return and
// indirect call in the application world is routed through one of three
// monitor stubs:
//
//   bl f        ->  bl __cfi_call ; bl f
//   blx r3      ->  bl __cfi_icall ; blx r3         (site = the blx)
//   bx lr       ->  mov r3, lr ; bl __cfi_ret
//   pop {.., pc} -> pop {..} ; pop {r3} ; bl __cfi_ret
//
// For a Non-secure application the stubs are NSC veneers (sg; bkpt; bxns)
// whose Secure BKPT runs the monitor service, so the shadow stack sits in
// Secure SRAM. Code too far from the stubs for BL (RAM code) reaches them
// through a local trampoline that jumps via r12 and leaves LR intact.

#ifndef TZM_DEFENSE_HPP
#define TZM_DEFENSE_HPP

#include <algorithm>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "tzm/assembler.hpp"
#include "tzm/attacks.hpp"
#include "tzm/machine.hpp"
#include "tzm/memory.hpp"
#include "tzm/runtime.hpp"

namespace tzm {

class InstrumentError : public Error {
    using Error::Error;
};

namespace monitor {
inline constexpr std::uint8_t kCall = 0xC1;
inline constexpr std::uint8_t kReturn = 0xC2;
inline constexpr std::uint8_t kIndirectCall = 0xC3;
/// r0 address, r1 byte length -> r0 1 when the whole range is Non-secure.
inline constexpr std::uint8_t kCheckRange = 0xD0;
/// r0 string -> r0 1 when every byte up to and including the NUL is Non-secure.
inline constexpr std::uint8_t kCheckString = 0xD1;
/// r0 address, r1 word count -> as kCheckRange for count * 4 bytes.
inline constexpr std::uint8_t kCheckWords = 0xD2;
} // namespace monitor

// ---------------------------------------------------------------------------
// Policy and shadow stack

/// Allowed indirect-call targets per site, as laid out in guest memory:
/// a word count of pairs followed by {site, target|1} pairs.
struct CfiPolicy {
    std::map<std::uint32_t, std::set<std::uint32_t>> edges;
    std::uint32_t table_addr = 0;
    std::uint32_t table_size = 0;
    std::uint32_t shadow_addr = 0;
    std::uint32_t shadow_capacity = kShadowDepth;

    [[nodiscard]] bool allows(std::uint32_t site, std::uint32_t target) const {
        auto it = edges.find(site & ~1u);
        return it != edges.end() && it->second.contains(target | 1u);
    }
};

/// Reads the edge table back from guest memory.
inline std::map<std::uint32_t, std::set<std::uint32_t>> read_policy_table(const MemoryMap& mem, std::uint32_t addr) {
    std::map<std::uint32_t, std::set<std::uint32_t>> edges;
    const std::uint32_t n = mem.read(addr, 4);
    for (std::uint32_t i = 0; i < n; ++i) {
        edges[mem.read(addr + 4 + 8 * i, 4) & ~1u].insert(mem.read(addr + 8 + 8 * i, 4) | 1u);
    }
    return edges;
}

/// Shadow stack in guest memory: a depth word followed by the entries.
class ShadowStack {
public:
    ShadowStack(MemoryMap& mem, std::uint32_t base, std::uint32_t capacity)
        : mem_(&mem), base_(base), capacity_(capacity) {}

    [[nodiscard]] std::uint32_t depth() const { return mem_->read(base_, 4); }
    [[nodiscard]] std::uint32_t capacity() const { return capacity_; }
    [[nodiscard]] std::optional<std::uint32_t> top() const {
        const auto d = depth();
        if (d == 0) return std::nullopt;
        return mem_->read(base_ + 4 * d, 4);
    }
    bool push(std::uint32_t v) {
        const auto d = depth();
        if (d >= capacity_) return false;
        mem_->write(base_ + 4 * (d + 1), 4, v);
        mem_->write(base_, 4, d + 1);
        return true;
    }
    void pop() {
        const auto d = depth();
        if (d > 0) mem_->write(base_, 4, d - 1);
    }

private:
    MemoryMap* mem_;
    std::uint32_t base_;
    std::uint32_t capacity_;
};

enum class BranchKind : std::uint8_t { Call, Return, IndirectCall };

struct MonitorVerdict {
    bool allow = true;
    std::string reason;
};

/// Calls push `target` (the return address). Returns must match the shadow
/// top, which is then popped. Indirect calls must be a policy edge of the
/// site; an allowed indirect call pushes site + 2.
inline MonitorVerdict branch_monitor_check(const CfiPolicy& policy, BranchKind kind, std::uint32_t site,
                                           std::uint32_t target, ShadowStack& shadow) {
    switch (kind) {
    case BranchKind::Call:
        if (!shadow.push(target | 1u)) return {false, "shadow stack overflow at " + guest::hex(site)};
        return {};
    case BranchKind::Return: {
        const auto top = shadow.top();
        if (!top) return {false, "return to " + guest::hex(target) + " with an empty shadow stack"};
        if (*top != (target | 1u)) {
            return {false, "return to " + guest::hex(target) + ", shadow stack expects " + guest::hex(*top)};
        }
        shadow.pop();
        return {};
    }
    case BranchKind::IndirectCall:
        if (!policy.allows(site, target)) {
            return {false, "indirect call from " + guest::hex(site) + " to " + guest::hex(target) + " is not an edge"};
        }
        if (!shadow.push((site + 2) | 1u)) return {false, "shadow stack overflow at " + guest::hex(site)};
        return {};
    }
    return {};
}

// ---------------------------------------------------------------------------
// Instrumentation

struct Instrumented {
    AsmProgram program;
    /// Labels of the rewritten indirect-call sites and of the address-taken
    /// functions they may reach; addresses come from assembling `program`.
    std::vector<std::string> site_labels;
    std::vector<std::string> targets;
};

namespace defense_detail {

using asm_detail::parse_reg;
using asm_detail::split_operands;
using asm_detail::trim;
using runtime_detail::need_region;

inline bool is_instruction(const Statement& st) { return !st.mnemonic.empty() && st.mnemonic.front() != '.'; }

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

// Register list operand without braces, e.g. "r4-r7, pc".
inline std::vector<std::string> list_items(std::string_view operands) {
    std::string s = trim(operands);
    if (s.size() < 2 || s.front() != '{' || s.back() != '}') return {};
    std::vector<std::string> out;
    for (auto& item : split_operands(s.substr(1, s.size() - 2))) out.push_back(lower(trim(item)));
    return out;
}

// True for "r3" or a range such as "r0-r4" that includes it.
inline bool covers_r3(const std::string& item) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) return item == "r3";
    const auto lo = parse_reg(item.substr(0, dash));
    const auto hi = parse_reg(item.substr(dash + 1));
    return lo && hi && *lo <= 3 && *hi >= 3;
}

inline std::uint32_t org_value(const Statement& st) {
    return static_cast<std::uint32_t>(std::stoul(trim(st.operands), nullptr, 0));
}

inline constexpr std::uint32_t kBlReach = 0x3F0000;

inline std::uint32_t distance(std::uint32_t a, std::uint32_t b) { return a > b ? a - b : b - a; }

} // namespace defense_detail

/// Where instrumentation puts its stubs and policy table.
struct CfiPlacement {
    World app_world = World::NonSecure;
    std::uint32_t stub_base = 0;   // NSC region for a Non-secure app
    std::uint32_t policy_base = 0; // read-only flash of the app world
};

/// Rewrites every call, return and indirect call in the app world's code.
/// `app_segment` decides from a segment's origin whether its code belongs to
/// the application.
inline Instrumented instrument(const AsmProgram& program, const CfiPlacement& place,
                               const std::function<bool(std::uint32_t)>& app_segment,
                               const std::set<std::string>& no_push_callees = {}) {
    using namespace defense_detail;
    static const std::regex kAddrTaken(R"(^\s*([A-Za-z_.][A-Za-z0-9_.]*)\s*\+\s*1\s*$)");
    Instrumented out;
    out.program.origin = program.origin;

    std::set<std::string> targets;
    for (const auto& st : program.statements) {
        if (st.mnemonic != ".word") continue;
        for (const auto& op : split_operands(st.operands)) {
            std::smatch m;
            const std::string s = op;
            if (std::regex_match(s, m, kAddrTaken)) targets.insert(m[1]);
        }
    }
    out.targets.assign(targets.begin(), targets.end());

    std::uint32_t seg_origin = program.origin;
    bool in_app = app_segment(seg_origin);
    bool far = distance(seg_origin, place.stub_base) > kBlReach;
    bool need_trampolines = false;
    std::size_t site = 0;
    auto& dst = out.program.statements;
    int line = 0;
    auto emit = [&](std::string label, std::string mnemonic, std::string operands) {
        dst.push_back(Statement{std::move(label), std::move(mnemonic), std::move(operands), ++line});
    };
    auto stub = [&](const char* name) { return std::string(far ? "__cfi_tr_" : "__cfi_") + name; };
    auto flush_trampolines = [&] {
        if (!need_trampolines) return;
        for (const char* name : {"call", "ret", "icall"}) {
            const std::string t = std::string("__cfi_tr_") + name;
            emit(t, "push", "{r0}");
            emit("", "ldr", "r0, " + t + "_lit");
            emit("", "mov", "r12, r0");
            emit("", "pop", "{r0}");
            emit("", "bx", "r12");
        }
        emit("", ".align", "4");
        for (const char* name : {"call", "ret", "icall"}) {
            emit(std::string("__cfi_tr_") + name + "_lit", ".word", std::string("__cfi_") + name + "+1");
        }
        need_trampolines = false;
    };

    for (const auto& st : program.statements) {
        if (st.mnemonic == ".org") {
            flush_trampolines();
            seg_origin = org_value(st);
            in_app = app_segment(seg_origin);
            far = distance(seg_origin, place.stub_base) > kBlReach;
        }
        if (!in_app || !is_instruction(st)) {
            dst.push_back(st);
            dst.back().line = ++line;
            continue;
        }
        const std::string m = lower(st.mnemonic);
        const std::string ops = trim(st.operands);
        std::string label = st.label;
        auto first = [&](std::string mnemonic, std::string operands) {
            emit(label, std::move(mnemonic), std::move(operands));
            label.clear();
        };
        if (m == "bl") {
            if (no_push_callees.contains(ops) || ops.rfind("__cfi_", 0) == 0) {
                dst.push_back(st);
                dst.back().line = ++line;
                continue;
            }
            first("bl", stub("call"));
            emit("", "bl", ops);
            need_trampolines |= far;
        } else if (m == "blx") {
            if (lower(ops) != "r3") throw InstrumentError("line " + std::to_string(st.line) + ": indirect call through " + ops + " (only r3 is supported)");
            const std::string site_label = "__cfi_site_" + std::to_string(site++);
            first("bl", stub("icall"));
            emit(site_label, "blx", "r3");
            out.site_labels.push_back(site_label);
            need_trampolines |= far;
        } else if (m == "bx") {
            if (lower(ops) != "lr") throw InstrumentError("line " + std::to_string(st.line) + ": indirect jump through " + ops);
            first("mov", "r3, lr");
            emit("", "bl", stub("ret"));
            need_trampolines |= far;
        } else if (m == "pop") {
            auto items = list_items(ops);
            if (std::find(items.begin(), items.end(), "pc") == items.end()) {
                dst.push_back(st);
                dst.back().line = ++line;
                continue;
            }
            items.erase(std::remove(items.begin(), items.end(), "pc"), items.end());
            if (std::any_of(items.begin(), items.end(), covers_r3)) {
                throw InstrumentError("line " + std::to_string(st.line) + ": pop into r3 alongside pc");
            }
            if (!items.empty()) {
                std::string list;
                for (const auto& it : items) list += (list.empty() ? "" : ", ") + it;
                first("pop", "{" + list + "}");
            }
            first("pop", "{r3}");
            emit("", "bl", stub("ret"));
            need_trampolines |= far;
        } else if (m == "mov" && lower(ops).find("pc,") == 0) {
            throw InstrumentError("line " + std::to_string(st.line) + ": computed jump via mov pc");
        } else if (m == "bxns" || m == "blxns") {
            throw InstrumentError("line " + std::to_string(st.line) + ": " + m + " in application code");
        } else {
            dst.push_back(st);
            dst.back().line = ++line;
        }
    }
    flush_trampolines();

    // Monitor stubs.
    const bool ns_app = place.app_world == World::NonSecure;
    emit("", ".org", guest::hex(place.stub_base));
    auto stub_text = [&](const char* name, std::uint8_t imm, const char* back) {
        const std::string l = std::string("__cfi_") + name;
        if (ns_app) {
            emit(l, "sg", "");
            emit("", "bkpt", "#" + std::to_string(imm));
        } else {
            emit(l, "bkpt", "#" + std::to_string(imm));
        }
        emit("", ns_app ? "bxns" : "bx", back);
    };
    stub_text("call", monitor::kCall, "lr");
    stub_text("ret", monitor::kReturn, "r3");
    stub_text("icall", monitor::kIndirectCall, "lr");

    // Policy table: every site may reach every address-taken function.
    emit("", ".org", guest::hex(place.policy_base));
    emit("", ".align", "4");
    emit("__cfi_policy", ".word", std::to_string(out.site_labels.size() * targets.size()));
    for (const auto& s : out.site_labels) {
        for (const auto& t : targets) emit("", ".word", s + ", " + t + "+1");
    }
    emit("__cfi_policy_end", ".word", "0");
    return out;
}

// ---------------------------------------------------------------------------
// NSC hardening

enum class ArgKind : std::uint8_t {
    Words,  // pointer followed by a word count in the next register
    Word,   // pointer to one word
    String, // pointer to a NUL-terminated string
    Format, // string the body uses as a printf format
    Data,   // plain value
};

struct VeneerDecl {
    std::string veneer;
    std::string body;
    /// One entry per argument register; Words consumes two.
    std::vector<ArgKind> args;
};

inline std::vector<VeneerDecl> kit_veneers() {
    return {{"NSC_func", "NSC_func_body", {ArgKind::Words, ArgKind::Word}},
            {"nsc_puts", "nsc_puts_body", {ArgKind::Format}},
            {"nsc_secure_console_puts", "nsc_console_body", {ArgKind::String}}};
}

inline constexpr std::uint32_t kRejected = 0xFFFFFFFFu;

/// Secure wrapper for a veneer body: checks every pointer argument with the
/// range services and returns -1 without running the body on a violation.
/// A Format argument is printed through "%s" instead of being used as the
/// format.
inline std::string hardened_body(const VeneerDecl& d) {
    const std::string w = d.body + "_hardened";
    std::string s = w + ":\n        push {r4-r7, lr}\n        sub sp, #8\n";
    s += "        mov r4, r0\n        mov r5, r1\n        mov r6, r2\n        mov r7, r3\n";
    unsigned reg_i = 0;
    bool format = false;
    for (auto k : d.args) {
        const std::string r = "r" + std::to_string(4 + reg_i);
        switch (k) {
        case ArgKind::Words:
            s += "        mov r0, " + r + "\n        mov r1, r" + std::to_string(5 + reg_i) + "\n        bkpt #" +
                 std::to_string(monitor::kCheckWords) + "\n";
            reg_i += 2;
            break;
        case ArgKind::Word:
            s += "        mov r0, " + r + "\n        movs r1, #4\n        bkpt #" +
                 std::to_string(monitor::kCheckRange) + "\n";
            ++reg_i;
            break;
        case ArgKind::String:
        case ArgKind::Format:
            s += "        mov r0, " + r + "\n        bkpt #" + std::to_string(monitor::kCheckString) + "\n";
            format |= k == ArgKind::Format;
            ++reg_i;
            break;
        case ArgKind::Data:
            ++reg_i;
            continue;
        }
        s += "        cmp r0, #0\n        beq " + w + "_reject\n";
    }
    if (reg_i > 4) throw InstrumentError(d.veneer + ": more than four argument registers");
    if (format) {
        if (d.args.size() != 1) throw InstrumentError(d.veneer + ": a format argument must be the only one");
        s += "        str r4, [sp, #0]\n        adr r0, " + w + "_fmt\n        bl s_printf\n";
    } else {
        s += "        mov r0, r4\n        mov r1, r5\n        mov r2, r6\n        mov r3, r7\n        bl " + d.body + "\n";
    }
    s += "        add sp, #8\n        pop {r4-r7, pc}\n";
    s += w + "_reject:\n        movs r0, #0\n        subs r0, #1\n        add sp, #8\n        pop {r4-r7, pc}\n";
    if (format) s += "        .align 4\n" + w + "_fmt:\n        .asciz \"%s\"\n        .align 4\n";
    return s;
}

/// Points the veneer at a checking wrapper placed just before its body.
inline AsmProgram harden_nsc(const AsmProgram& program, const VeneerDecl& d) {
    AsmProgram out;
    out.origin = program.origin;
    bool placed = false, rerouted = false;
    std::string current;
    const AsmProgram wrapper = parse_asm(hardened_body(d), 0);
    for (const auto& st : program.statements) {
        if (!st.label.empty()) current = st.label;
        if (st.label == d.body) {
            for (auto w : wrapper.statements) out.statements.push_back(std::move(w));
            placed = true;
        }
        Statement copy = st;
        if (current == d.veneer && defense_detail::lower(copy.mnemonic) == "bl" &&
            defense_detail::trim(copy.operands) == d.body) {
            copy.operands = d.body + "_hardened";
            rerouted = true;
        }
        out.statements.push_back(std::move(copy));
    }
    if (!placed || !rerouted) throw InstrumentError("veneer " + d.veneer + " or body " + d.body + " not found");
    for (std::size_t i = 0; i < out.statements.size(); ++i) out.statements[i].line = static_cast<int>(i + 1);
    return out;
}

// ---------------------------------------------------------------------------
// Defense sets and armed targets

struct DefenseSet {
    bool nx = false;
    bool cfi = false;
    bool harden = false;

    [[nodiscard]] bool empty() const { return !nx && !cfi && !harden; }
    [[nodiscard]] std::string name() const {
        if (empty()) return "none";
        std::string s;
        for (auto [on, n] : {std::pair{nx, "nx"}, {cfi, "cfi"}, {harden, "harden"}}) {
            if (on) s += (s.empty() ? "" : "+") + std::string(n);
        }
        return s;
    }
};

/// "none", or names joined by '+' or ','.
inline std::optional<DefenseSet> parse_defenses(std::string_view s) {
    DefenseSet d;
    if (s == "none" || s.empty()) return d;
    std::size_t i = 0;
    while (i <= s.size()) {
        const auto j = s.find_first_of("+,", i);
        const auto tok = s.substr(i, j == std::string_view::npos ? std::string_view::npos : j - i);
        if (tok == "nx") d.nx = true;
        else if (tok == "cfi") d.cfi = true;
        else if (tok == "harden") d.harden = true;
        else return std::nullopt;
        if (j == std::string_view::npos) break;
        i = j + 1;
    }
    return d;
}

inline DefenseSet defenses_of(const ScenarioProfile& p) {
    DefenseSet d;
    d.nx = !p.stack_executable || p.has_defense("nx");
    d.cfi = p.has_defense("cfi");
    d.harden = p.has_defense("harden");
    return d;
}

/// Counters the monitor services keep for one machine.
struct MonitorStats {
    std::uint64_t calls = 0;
    std::uint64_t returns = 0;
    std::uint64_t indirect = 0;
    std::uint64_t range_checks = 0;
    std::uint64_t rejected = 0;
};

struct DefendedTarget {
    Target target;
    DefenseSet defenses;
    std::optional<CfiPolicy> policy;
    std::shared_ptr<MonitorStats> stats = std::make_shared<MonitorStats>();
};

namespace defense_detail {

inline bool range_is_nonsecure(const MemoryMap& map, std::uint64_t addr, std::uint64_t len) {
    if (len == 0) return true;
    if (addr + len > 0x100000000ull) return false;
    const auto first = static_cast<std::uint32_t>(addr);
    const auto last = static_cast<std::uint32_t>(addr + len - 1);
    const Region* a = map.find(first);
    const Region* b = map.find(last);
    return a && a == b && map.attribution(first) == SecurityAttr::NonSecure &&
           map.attribution(last) == SecurityAttr::NonSecure;
}

inline bool string_is_nonsecure(const MemoryMap& map, std::uint32_t addr) {
    for (std::uint32_t i = 0; i < 4096; ++i) {
        const std::uint32_t a = addr + i;
        if (a < addr || !map.find(a) || map.attribution(a) != SecurityAttr::NonSecure) return false;
        if (map.read(a, 1) == 0) return true;
    }
    return false;
}

} // namespace defense_detail

/// Installs the monitor and range-check services the defenses rely on.
inline void install_services(Machine& m, const std::optional<CfiPolicy>& policy, const std::shared_ptr<MonitorStats>& stats) {
    using defense_detail::range_is_nonsecure;
    using defense_detail::string_is_nonsecure;
    if (policy) {
        const CfiPolicy p = *policy;
        auto run = [p, stats](Machine& mm, BranchKind kind) {
            ShadowStack shadow(mm.memory(), p.shadow_addr, p.shadow_capacity);
            const std::uint32_t lr = mm.reg(reg::lr) & ~1u;
            MonitorVerdict v;
            switch (kind) {
            case BranchKind::Call:
                ++stats->calls;
                v = branch_monitor_check(p, kind, lr, lr + 4, shadow);
                break;
            case BranchKind::Return:
                ++stats->returns;
                v = branch_monitor_check(p, kind, lr, mm.reg(3), shadow);
                break;
            case BranchKind::IndirectCall: {
                ++stats->indirect;
                CfiPolicy live = p;
                live.edges = read_policy_table(mm.memory(), p.table_addr);
                v = branch_monitor_check(live, kind, lr, mm.reg(3), shadow);
                break;
            }
            }
            if (!v.allow) throw GuestFault(FaultKind::CfiViolation, v.reason);
        };
        m.set_service(monitor::kCall, [run](Machine& mm) { run(mm, BranchKind::Call); });
        m.set_service(monitor::kReturn, [run](Machine& mm) { run(mm, BranchKind::Return); });
        m.set_service(monitor::kIndirectCall, [run](Machine& mm) { run(mm, BranchKind::IndirectCall); });
    }
    auto verdict = [stats](Machine& mm, bool ok) {
        ++stats->range_checks;
        if (!ok) ++stats->rejected;
        mm.set_reg(0, ok ? 1 : 0);
    };
    m.set_service(monitor::kCheckRange, [verdict](Machine& mm) {
        verdict(mm, range_is_nonsecure(mm.memory(), mm.reg(0), mm.reg(1)));
    });
    m.set_service(monitor::kCheckWords, [verdict](Machine& mm) {
        verdict(mm, range_is_nonsecure(mm.memory(), mm.reg(0), 4ull * mm.reg(1)));
    });
    m.set_service(monitor::kCheckString, [verdict](Machine& mm) {
        verdict(mm, string_is_nonsecure(mm.memory(), mm.reg(0)));
    });
}

namespace defense_detail {

// Highest end of any segment inside `r`, rounded up to a word.
inline std::uint32_t used_end(const ImageBlob& blob, const Region& r) {
    std::uint32_t end = r.base;
    for (const auto& s : blob.segments) {
        if (s.origin >= r.base && s.origin < r.end()) end = std::max(end, s.end());
    }
    return (end + 3) & ~3u;
}

} // namespace defense_detail

/// Applies CFI instrumentation to a built victim and resolves its policy.
inline std::pair<VictimImage, CfiPolicy> apply_cfi(const VictimImage& base) {
    using namespace defense_detail;
    const MemoryMap map = load_image(base.manifest);
    const bool ns_app = base.app_world == World::NonSecure;
    const Region& stub_region = need_region(map, ns_app ? "nsc_flash" : "secure_flash");
    const Region& policy_region = need_region(map, ns_app ? "ns_flash" : "secure_flash");

    // NSC gateways return with BXNS from Secure code, so their calls push nothing.
    std::set<std::string> no_push;
    for (const auto& [name, addr] : base.symbols()) {
        if (map.attribution(addr) == SecurityAttr::NSC) no_push.insert(name);
    }
    auto app_segment = [&](std::uint32_t origin) {
        return map.find(origin) && map.attribution(origin) == base.app_world;
    };

    // First pass with placeholder placements to learn how far the code grows.
    CfiPlacement place{base.app_world, stub_region.base, policy_region.base};
    Instrumented probe = instrument(base.program, place, app_segment, no_push);
    SymbolTable dummy{{"__cfi_call", stub_region.base},
                      {"__cfi_ret", stub_region.base},
                      {"__cfi_icall", stub_region.base},
                      {"__cfi_policy", policy_region.base},
                      {"__cfi_policy_end", policy_region.base}};
    AsmProgram body = probe.program;
    // Statements appended after the last rewritten segment start at the stub .org.
    const std::size_t tail = [&] {
        for (std::size_t i = body.statements.size(); i-- > 0;) {
            if (body.statements[i].mnemonic == ".org" && body.statements[i].operands == guest::hex(place.stub_base)) {
                return i;
            }
        }
        return body.statements.size();
    }();
    body.statements.resize(tail);
    const ImageBlob grown = assemble(body, dummy);
    place.stub_base = used_end(grown, stub_region);
    place.policy_base = used_end(grown, policy_region);
    if (!ns_app) place.policy_base = place.stub_base + 32;

    Instrumented inst = instrument(base.program, place, app_segment, no_push);
    VictimImage img = reassemble(base, inst.program);
    for (const auto& seg : img.blob.segments) {
        const Region* r = map.find(seg.origin);
        if (!r || seg.end() > r->end()) throw InstrumentError("instrumented segment at " + guest::hex(seg.origin) + " overflows its region");
    }

    CfiPolicy policy;
    policy.table_addr = img.symbol("__cfi_policy");
    policy.table_size = img.symbol("__cfi_policy_end") - policy.table_addr;
    policy.shadow_addr = img.symbol("shadow_stack");
    policy.shadow_capacity = kShadowDepth;
    for (const auto& s : inst.site_labels) {
        for (const auto& t : inst.targets) policy.edges[img.symbol(s)].insert(img.symbol(t) | 1u);
    }
    return {std::move(img), std::move(policy)};
}

/// Hardens every kit veneer present in the image.
inline VictimImage apply_harden(const VictimImage& base) {
    if (!base.has_symbol("NSC_func")) return base;
    AsmProgram p = base.program;
    for (const auto& d : kit_veneers()) p = harden_nsc(p, d);
    return reassemble(base, p);
}

/// Builds the victim for `profile` with the defenses applied.
inline DefendedTarget make_target(ScenarioProfile profile, const DefenseSet& d) {
    profile.stack_executable = profile.stack_executable && !d.nx;
    VictimImage img = build_victim(profile);
    DefendedTarget out;
    out.defenses = d;
    if (d.harden) img = apply_harden(img);
    if (d.cfi) {
        auto [inst, policy] = apply_cfi(img);
        img = std::move(inst);
        out.policy = std::move(policy);
    }
    out.target.image = std::move(img);
    out.target.arm = [policy = out.policy, stats = out.stats](Machine& m) { install_services(m, policy, stats); };
    return out;
}

// ---------------------------------------------------------------------------
// Matrix

struct MatrixRow {
    std::string name; // e.g. "inject_nsw"
    AttackKind attack;
    HostWorld world;
};

inline std::vector<MatrixRow> matrix_rows() {
    return {{"inject_nsw", AttackKind::Inject, HostWorld::Nsw},
            {"inject_swx", AttackKind::Inject, HostWorld::Swx},
            {"rop_nsw", AttackKind::Rop, HostWorld::Nsw},
            {"rop_swx", AttackKind::Rop, HostWorld::Swx},
            {"heap_fnptr_nsw", AttackKind::HeapFnptr, HostWorld::Nsw},
            {"heap_fnptr_swx", AttackKind::HeapFnptr, HostWorld::Swx},
            {"heap_unlink_nsw", AttackKind::HeapUnlink, HostWorld::Nsw},
            {"heap_unlink_swx", AttackKind::HeapUnlink, HostWorld::Swx},
            {"fmt_nsw", AttackKind::Fmt, HostWorld::Nsw},
            {"fmt_swx", AttackKind::Fmt, HostWorld::Swx},
            {"fmt_nsc", AttackKind::Fmt, HostWorld::Nsc},
            {"nsc_read", AttackKind::NscRead, HostWorld::Nsc},
            {"nsc_write", AttackKind::NscWrite, HostWorld::Nsc},
            {"nsc_console", AttackKind::NscConsole, HostWorld::Nsc}};
}

inline std::vector<DefenseSet> matrix_columns() {
    return {DefenseSet{}, DefenseSet{true, false, false}, DefenseSet{false, true, false}, DefenseSet{false, false, true}};
}

inline std::string cell_text(const AttackReport& r) {
    return r.success ? "Succeeds" : "Blocked(" + r.blocked_by + ")";
}

struct MatrixCell {
    std::string row;
    std::string defense;
    AttackReport report;
};

inline AttackReport run_cell(const MatrixRow& row, const DefenseSet& d, const AttackOptions& opt = {}) {
    const auto t = make_target(profile_for(row.attack, row.world), d);
    return run_attack(row.attack, t.target, opt);
}

inline std::vector<MatrixCell> evaluate_matrix(const std::vector<MatrixRow>& rows, const std::vector<DefenseSet>& cols,
                                               const AttackOptions& opt = {}) {
    std::vector<MatrixCell> out;
    for (const auto& r : rows) {
        for (const auto& c : cols) out.push_back({r.name, c.name(), run_cell(r, c, opt)});
    }
    return out;
}

/// {row: {defense: "Succeeds" | "Blocked(kind)"}}
inline nlohmann::json matrix_json(const std::vector<MatrixCell>& cells) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& c : cells) j[c.row][c.defense] = cell_text(c.report);
    return j;
}

} // namespace tzm

#endif // TZM_DEFENSE_HPP

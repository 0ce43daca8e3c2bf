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

// Victim firmware kit: builds guest images around the vulnerable routines
// and boots them on a Machine.
//
// Every image runs the same main loop in its application world: main (in
// flash) calls `dispatch`, a RAM function, through BLX. dispatch reads one
// record from the application UART and calls the handler selected by the
// record's command byte. Because dispatch executes from SRAM, every
// handler's saved return address has 0x2000 as its upper halfword.

#ifndef TZM_RUNTIME_HPP
#define TZM_RUNTIME_HPP

#include <algorithm>
#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tzm/assembler.hpp"
#include "tzm/guest_lib.hpp"
#include "tzm/machine.hpp"
#include "tzm/memory.hpp"

namespace tzm {

class ProfileError : public Error {
public:
    using Error::Error;
};

enum class Victim : std::uint8_t { Bof, Rop, Heap, Fmt, NscFunc, NscPuts };
/// Where the vulnerable code lives: Non-secure world, the NSC gateway, or
/// the Secure world proper.
enum class HostWorld : std::uint8_t { Nsw, Nsc, Swx };

inline const char* victim_name(Victim v) {
    switch (v) {
    case Victim::Bof: return "bof";
    case Victim::Rop: return "rop";
    case Victim::Heap: return "heap";
    case Victim::Fmt: return "fmt";
    case Victim::NscFunc: return "nsc_func";
    case Victim::NscPuts: return "nsc_puts";
    }
    return "?";
}

inline const char* host_name(HostWorld w) {
    switch (w) {
    case HostWorld::Nsw: return "nsw";
    case HostWorld::Nsc: return "nsc";
    case HostWorld::Swx: return "swx";
    }
    return "?";
}

inline std::optional<Victim> parse_victim(std::string_view s) {
    for (auto v : {Victim::Bof, Victim::Rop, Victim::Heap, Victim::Fmt, Victim::NscFunc, Victim::NscPuts}) {
        if (s == victim_name(v)) return v;
    }
    return std::nullopt;
}

inline std::optional<HostWorld> parse_host(std::string_view s) {
    for (auto w : {HostWorld::Nsw, HostWorld::Nsc, HostWorld::Swx}) {
        if (s == host_name(w)) return w;
    }
    return std::nullopt;
}

/// Record command letters understood by dispatch.
namespace cmd {
inline constexpr char kBof = 'B';
inline constexpr char kRop = 'R';
inline constexpr char kStoreMsg = 'M';
inline constexpr char kHeapCall = 'H';
inline constexpr char kHeapUnlink = 'U';
inline constexpr char kFmt = 'F';
inline constexpr char kNscFunc = 'N';
inline constexpr char kNscPuts = 'P';
inline constexpr char kNscConsole = 'C';
} // namespace cmd

inline constexpr std::string_view kAttackMarker = "<<PWNED>>";
inline constexpr std::uint32_t kLineBufSize = 512;
inline constexpr std::uint32_t kMsgBufSize = 256;
inline constexpr std::uint32_t kNscScratchWords = 16;
inline constexpr std::uint32_t kMinStack = 0x400;
inline constexpr std::uint32_t kMainFrame = 32;
/// Capacity of the CFI shadow stack reserved in Secure SRAM, in entries.
inline constexpr std::uint32_t kShadowDepth = 64;
/// Planted Secure contents, readable only through the NSC bugs.
inline constexpr std::string_view kSecureSecret = "TZM-SECURE-SECRET";
inline constexpr std::uint32_t kSecureWord = 0x41414141;
inline constexpr std::uint32_t kSecureScratch = 0x11223344;

struct ScenarioProfile {
    Victim victim = Victim::Bof;
    HostWorld world = HostWorld::Nsw;
    /// Stack buffer of the overflow victims; unset means 256 for bof and
    /// 52 for rop.
    std::optional<std::uint32_t> buffer_len;
    std::uint32_t heap_size = 0x400;
    bool stack_executable = true;
    /// Bytes reserved below the application stack top before main runs.
    std::uint32_t stack_shift = 0;
    std::vector<std::string> defenses;

    [[nodiscard]] std::uint32_t effective_buffer_len() const {
        if (buffer_len) return *buffer_len;
        return victim == Victim::Rop ? 52 : 256;
    }
    [[nodiscard]] bool has_defense(std::string_view d) const {
        return std::find(defenses.begin(), defenses.end(), d) != defenses.end();
    }
};

inline nlohmann::json to_json(const ScenarioProfile& p) {
    nlohmann::json j{{"victim", victim_name(p.victim)},
                     {"world", host_name(p.world)},
                     {"buffer_len", p.effective_buffer_len()},
                     {"heap", {{"size", p.heap_size}}},
                     {"stack_executable", p.stack_executable},
                     {"defenses", p.defenses}};
    if (p.stack_shift != 0) j["stack_shift"] = p.stack_shift;
    return j;
}

inline ScenarioProfile profile_from_json(const nlohmann::json& j) {
    ScenarioProfile p;
    auto field = [&](const char* k) -> const nlohmann::json* { return j.contains(k) ? &j.at(k) : nullptr; };
    try {
        const auto* v = field("victim");
        if (!v) throw ProfileError("victim: missing");
        if (auto parsed = parse_victim(v->get<std::string>())) {
            p.victim = *parsed;
        } else {
            throw ProfileError("victim: unknown '" + v->get<std::string>() + "'");
        }
        if (const auto* w = field("world")) {
            if (auto parsed = parse_host(w->get<std::string>())) {
                p.world = *parsed;
            } else {
                throw ProfileError("world: unknown '" + w->get<std::string>() + "'");
            }
        }
        if (const auto* b = field("buffer_len")) p.buffer_len = b->get<std::uint32_t>();
        if (const auto* h = field("heap"); h && h->contains("size")) p.heap_size = h->at("size").get<std::uint32_t>();
        if (const auto* s = field("stack_executable")) p.stack_executable = s->get<bool>();
        if (const auto* s = field("stack_shift")) p.stack_shift = s->get<std::uint32_t>();
        if (const auto* d = field("defenses")) p.defenses = d->get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ProfileError(std::string("profile: ") + e.what());
    }
    return p;
}

inline UartId uart_of(World w) { return w == World::Secure ? UartId::Secure : UartId::NonSecure; }

struct VictimImage {
    ScenarioProfile profile;
    MapManifest manifest;
    /// Source before assembly; the defense module rewrites this.
    AsmProgram program;
    ImageBlob blob;
    ResetConfig reset;
    /// World running main and dispatch.
    World app_world = World::NonSecure;
    std::uint32_t buffer_len = 0;

    [[nodiscard]] const SymbolTable& symbols() const { return blob.symbols; }
    [[nodiscard]] std::uint32_t symbol(const std::string& name) const { return blob.symbol(name); }
    [[nodiscard]] bool has_symbol(const std::string& name) const { return blob.symbols.contains(name); }
    [[nodiscard]] UartId app_uart() const { return uart_of(app_world); }
};

namespace runtime_detail {

struct Handler {
    char command;
    std::string target;
    enum class Args : std::uint8_t { Buf, BufLen, Msg } args;
};

inline std::string dispatch_text(const std::vector<Handler>& handlers) {
    std::string s = R"(
dispatch:
        push {r4, lr}
        ldr r0, d_buf
        ldr r1, d_cap
        ldr r3, d_read
        blx r3
        mov r4, r1
)";
    for (std::size_t i = 0; i < handlers.size(); ++i) {
        s += "        cmp r0, #'" + std::string(1, handlers[i].command) + "'\n";
        s += "        beq d_" + std::to_string(i) + "\n";
    }
    s += "d_ret:\n        pop {r4, pc}\n";
    for (std::size_t i = 0; i < handlers.size(); ++i) {
        const auto& h = handlers[i];
        s += "d_" + std::to_string(i) + ":\n";
        switch (h.args) {
        case Handler::Args::Buf: s += "        ldr r0, d_buf\n"; break;
        case Handler::Args::BufLen: s += "        ldr r0, d_buf\n        mov r1, r4\n"; break;
        case Handler::Args::Msg: s += "        ldr r0, d_msg\n        ldr r1, d_buf\n        mov r2, r4\n"; break;
        }
        s += "        ldr r3, d_f" + std::to_string(i) + "\n        blx r3\n        b d_ret\n";
    }
    s += R"(        .align 4
d_buf:  .word linebuf
d_cap:  .word LINEBUF_SIZE
d_msg:  .word msgbuf
d_read: .word read_record+1
)";
    for (std::size_t i = 0; i < handlers.size(); ++i) {
        s += "d_f" + std::to_string(i) + ": .word " + handlers[i].target + "+1\n";
    }
    return s;
}

inline std::string sub_sp(std::uint32_t n, const char* op) {
    std::string s;
    while (n > 0) {
        const auto step = std::min<std::uint32_t>(n, 508);
        s += std::string("        ") + op + " sp, #" + std::to_string(step) + "\n";
        n -= step;
    }
    return s;
}

// Listing-style victims. Each frame is push {r4-r7, lr} then the locals,
// so locals sit below the saved registers and the return address is on top.
inline std::string bof_func(std::uint32_t buf) {
    return "BOF_func:                       ; r0 input\n        push {r4-r7, lr}\n" + sub_sp(buf, "sub") +
           "        mov r1, r0\n        mov r0, sp\n        bl strcpy\n" + sub_sp(buf, "add") +
           "        pop {r4-r7, pc}\n";
}

inline std::string bof_copy(std::uint32_t buf) {
    return "BOF_copy:                       ; r0 message, r1 length\n        push {r4-r7, lr}\n" +
           sub_sp(buf, "sub") + "        mov r2, r1\n        mov r1, r0\n        mov r0, sp\n        bl memcpy\n" +
           sub_sp(buf, "add") + "        pop {r4-r7, pc}\n";
}

inline constexpr std::string_view kFmtStr = R"(
fmt_str:                        ; r0 input
        push {r4-r7, lr}
        bl printf
        pop {r4-r7, pc}
)";

// chunk 1 is a plain 8-byte block; chunk 2 is {tag, handler}.
inline constexpr std::string_view kHeapVictims = R"(
heap_victim:                    ; r0 input, r1 length
        push {r4-r7, lr}
        mov r6, r0
        mov r7, r1
        movs r0, #8
        bl malloc
        mov r4, r0
        movs r0, #8
        bl malloc
        mov r5, r0
        movs r0, #0
        str r0, [r5, #0]
        ldr r0, hv_handler
        str r0, [r5, #4]
        mov r0, r4
        mov r1, r6
        mov r2, r7
        bl memcpy
        mov r0, r5
        ldr r3, [r5, #4]
        blx r3
        mov r0, r5
        bl free
        mov r0, r4
        bl free
        pop {r4-r7, pc}

heap_unlink_victim:             ; r0 input, r1 length
        push {r4-r7, lr}
        sub sp, #8
        mov r6, r0
        mov r7, r1
        movs r0, #8
        bl malloc
        mov r4, r0
        movs r0, #8
        bl malloc
        mov r5, r0
        movs r0, #8
        bl malloc
        str r0, [sp, #0]
        mov r0, r5
        bl free
        mov r0, r4
        mov r1, r6
        mov r2, r7
        bl memcpy
        mov r0, r4
        bl free
        ldr r0, [sp, #0]
        bl free
        add sp, #8
        pop {r4-r7, pc}

default_handler:                ; r0 object
        push {r4, lr}
        adr r0, dh_text
        bl print_string
        pop {r4, pc}
        .align 4
hv_handler:
        .word default_handler+1
dh_text:
        .asciz "ok\n"
        .align 4
)";

// Three fragments of a print-at-address routine, each closed by an
// epilogue. Kept apart in flash and never called by the kit itself.
inline constexpr std::string_view kGadget1 = R"(
rop_g1:
        pop {r4, r5, r6}
        mov lr, r6
        bx lr
)";
inline constexpr std::string_view kGadget2 = R"(
rop_g2:
        mov r0, r4
        pop {r4, pc}
)";
inline constexpr std::string_view kGadget3 = R"(
rop_g3:
        bl print_string
        pop {pc}
)";

// Non-secure callers of the NSC functions; records carry raw words.
inline constexpr std::string_view kNscCallers = R"(
call_nsc_func:                  ; r0 -> {a, b, c}
        push {r4, lr}
        mov r4, r0
        ldr r2, [r4, #8]
        ldr r1, [r4, #4]
        ldr r0, [r4, #0]
        bl NSC_func
        sub sp, #8
        str r0, [sp, #0]
        adr r0, cn_fmt
        bl printf
        add sp, #8
        pop {r4, pc}
call_nsc_puts:                  ; r0 string
        push {r4, lr}
        bl nsc_puts
        pop {r4, pc}
call_nsc_console:               ; r0 -> {string address}
        push {r4, lr}
        ldr r0, [r0, #0]
        bl nsc_secure_console_puts
        pop {r4, pc}
        .align 4
cn_fmt:
        .asciz "%08x\n"
        .align 4
)";

// Secure bodies behind the gateway. None of them checks where its pointer
// arguments point.
inline constexpr std::string_view kNscBodies = R"(
NSC_func_body:                  ; r0 a, r1 count, r2 c -> sum
        push {r4-r7, lr}
        ldr r4, [r2, #0]
nf_loop:
        cmp r1, #0
        beq nf_done
        ldr r3, [r0, #0]
        adds r4, r4, r3
        adds r0, #4
        subs r1, #1
        b nf_loop
nf_done:
        str r4, [r2, #0]
        mov r0, r4
        pop {r4-r7, pc}
nsc_puts_body:                  ; r0 string, used as the format
        push {r4-r7, lr}
        bl s_printf
        pop {r4-r7, pc}
nsc_console_body:               ; r0 string
        push {r4, lr}
        bl s_print_string
        pop {r4, pc}
)";

inline std::string veneer(const std::string& name, const std::string& body) {
    return name + ":\n        sg\n        push {lr}\n        bl " + body +
           "\n        pop {r3}\n        bxns r3\n";
}

inline const Region& need_region(const MemoryMap& map, std::string_view name) {
    const Region* r = map.region(name);
    if (!r) throw ProfileError("manifest lacks region '" + std::string(name) + "'");
    return *r;
}

inline std::string app_data(const ScenarioProfile& p) {
    std::string s = R"(
        .align 8
linebuf:
        .space LINEBUF_SIZE
msgbuf:
        .space )" + std::to_string(kMsgBufSize) +
                    R"(
heap_target:
        .word 0
nsc_scratch:
        .space )" + std::to_string(4 * kNscScratchWords) +
                    "\n";
    if (p.victim == Victim::Heap) {
        s += "heap_bin:\n        .space 16\n        .align 8\nheap_base:\n        .space HEAP_SIZE\n";
    }
    s += "app_data_end:\n";
    return s;
}

inline std::string secure_data() {
    return "secure_secret:\n        .asciz \"" + std::string(kSecureSecret) +
           "\"\n        .align 4\nsecure_word:\n        .word " + guest::hex(kSecureWord) +
           "\nsecure_scratch:\n        .word " + guest::hex(kSecureScratch) +
           "\nshadow_stack:                   ; depth word, then entries\n        .word 0\n        .space " +
           std::to_string(4 * kShadowDepth) + "\n";
}

inline void validate(const ScenarioProfile& p) {
    const bool nsc_victim = p.victim == Victim::NscFunc || p.victim == Victim::NscPuts;
    if (nsc_victim && p.world != HostWorld::Nsc) {
        throw ProfileError(std::string(victim_name(p.victim)) + " lives in the NSC region, not " + host_name(p.world));
    }
    if (p.world == HostWorld::Nsc && !nsc_victim && p.victim != Victim::Fmt) {
        throw ProfileError(std::string(victim_name(p.victim)) + " has no NSC-hosted variant");
    }
    const auto buf = p.effective_buffer_len();
    if (buf < 8 || buf > 1024 || buf % 4 != 0) {
        throw ProfileError("buffer_len must be a multiple of 4 in [8, 1024]");
    }
    if (p.heap_size < 64 || p.heap_size > 0x1000 || p.heap_size % 8 != 0) {
        throw ProfileError("heap.size must be a multiple of 8 in [64, 4096]");
    }
    if (p.stack_shift % 8 != 0 || p.stack_shift > 0x800) {
        throw ProfileError("stack_shift must be a multiple of 8 up to 2048");
    }
}

} // namespace runtime_detail

/// Builds the guest image for `profile` on the regions of `manifest`.
///
/// Images for NSC profiles carry all three gateway functions; `fmt` with
/// world `nsc` is the nsc_puts image.
inline VictimImage build_victim(const ScenarioProfile& profile, const MapManifest& manifest) {
    using namespace runtime_detail;
    validate(profile);
    const MemoryMap map = load_image(manifest);
    const auto& s_flash = need_region(map, "secure_flash");
    const auto& ns_flash = need_region(map, "ns_flash");
    const auto& s_sram = need_region(map, "secure_sram");
    const auto& ns_sram = need_region(map, "ns_sram");
    const auto& s_uart = need_region(map, "secure_uart");
    const auto& ns_uart = need_region(map, "ns_uart");

    const bool secure_app = profile.world == HostWorld::Swx;
    const bool nsc = profile.world == HostWorld::Nsc;
    const World app_world = secure_app ? World::Secure : World::NonSecure;
    const auto& app_ram = need_region(map, secure_app ? "secure_ramcode" : "ns_ramcode");
    const auto& app_sram = secure_app ? s_sram : ns_sram;
    const auto buf = profile.effective_buffer_len();

    std::vector<Handler> handlers;
    std::string victims;
    switch (profile.victim) {
    case Victim::Bof:
        handlers.push_back({cmd::kBof, "BOF_func", Handler::Args::Buf});
        victims = bof_func(buf);
        break;
    case Victim::Rop:
        handlers.push_back({cmd::kRop, "BOF_copy", Handler::Args::BufLen});
        victims = bof_copy(buf);
        break;
    case Victim::Heap:
        handlers.push_back({cmd::kStoreMsg, "memcpy", Handler::Args::Msg});
        handlers.push_back({cmd::kHeapCall, "heap_victim", Handler::Args::BufLen});
        handlers.push_back({cmd::kHeapUnlink, "heap_unlink_victim", Handler::Args::BufLen});
        victims = std::string(kHeapVictims);
        break;
    case Victim::Fmt:
    case Victim::NscFunc:
    case Victim::NscPuts:
        if (nsc) {
            handlers.push_back({cmd::kNscFunc, "call_nsc_func", Handler::Args::Buf});
            handlers.push_back({cmd::kNscPuts, "call_nsc_puts", Handler::Args::Buf});
            handlers.push_back({cmd::kNscConsole, "call_nsc_console", Handler::Args::Buf});
            victims = std::string(kNscCallers);
        } else {
            handlers.push_back({cmd::kFmt, "fmt_str", Handler::Args::Buf});
            victims = std::string(kFmtStr);
        }
        break;
    }
    const bool rop = profile.victim == Victim::Rop;
    const bool heap = profile.victim == Victim::Heap;

    // main keeps a local frame, so the stack above a victim's return slot
    // holds more than dispatch's two saved words.
    std::string app = "main:\n        sub sp, #" + std::to_string(kMainFrame) + "\n";
    if (heap) app += "        bl heap_init\n";
    app += R"(main_loop:
        ldr r3, main_lit
        blx r3
        b main_loop
        .align 4
main_lit:
        .word dispatch+1
)";
    app += guest::with_prefix(guest::kIo, "");
    if (rop) app += kGadget1;
    app += guest::with_prefix(guest::kStrings, "");
    app += guest::with_prefix(guest::kPrintf, "");
    if (rop) app += kGadget2;
    if (heap) app += guest::with_prefix(guest::kHeap, "");
    app += "        .align 4\nattack_marker:\n        .asciz \"" + std::string(kAttackMarker) + "\"\n        .align 4\n";
    app += victims;
    if (rop) app += kGadget3;

    std::string text;
    text += ".equ UART_BASE, " + guest::hex((secure_app ? s_uart : ns_uart).base) + "\n";
    text += ".equ HEAP_SIZE, " + std::to_string(profile.heap_size) + "\n";
    text += ".equ LINEBUF_SIZE, " + std::to_string(kLineBufSize) + "\n";
    if (nsc) text += ".equ s_UART_BASE, " + guest::hex(s_uart.base) + "\n";

    text += ".org " + guest::hex(s_flash.base) + "\n";
    if (secure_app) {
        text += app;
    } else {
        text += "secure_boot:\n        bxns lr\n";
        if (nsc) {
            text += guest::with_prefix(guest::kIo, "s_");
            text += guest::with_prefix(guest::kStrings, "s_");
            text += guest::with_prefix(guest::kPrintf, "s_");
            text += kNscBodies;
            const auto& nsc_region = need_region(map, "nsc_flash");
            text += ".org " + guest::hex(nsc_region.base) + "\n";
            text += veneer("NSC_func", "NSC_func_body");
            text += veneer("nsc_puts", "nsc_puts_body");
            text += veneer("nsc_secure_console_puts", "nsc_console_body");
        }
        text += ".org " + guest::hex(ns_flash.base) + "\n" + app;
    }
    text += ".org " + guest::hex(app_ram.base) + "\n" + dispatch_text(handlers);
    text += ".org " + guest::hex(s_sram.base) + "\n" + secure_data();
    if (secure_app) {
        text += app_data(profile);
    } else {
        text += ".org " + guest::hex(ns_sram.base) + "\n" + app_data(profile);
    }

    VictimImage img;
    img.profile = profile;
    img.manifest = manifest;
    img.manifest.stack_executable = profile.stack_executable;
    img.program = parse_asm(text, s_flash.base);
    img.blob = assemble(img.program);
    img.app_world = app_world;
    img.buffer_len = buf;

    const std::uint32_t app_top = app_sram.end() - profile.stack_shift;
    if (img.symbol("app_data_end") + kMinStack > app_top) {
        throw ProfileError("application data leaves less than " + std::to_string(kMinStack) + " bytes of stack");
    }
    for (const auto& seg : img.blob.segments) {
        const Region* r = map.find(seg.origin);
        if (!r || seg.end() > r->end()) {
            throw ProfileError("segment at " + guest::hex(seg.origin) + " does not fit one region");
        }
    }
    img.reset.entry_secure = img.symbol(secure_app ? "main" : "secure_boot");
    img.reset.entry_nonsecure = secure_app ? ns_flash.base : img.symbol("main");
    img.reset.sp_secure = secure_app ? app_top : s_sram.end();
    img.reset.sp_nonsecure = secure_app ? ns_sram.end() : app_top;
    return img;
}

inline VictimImage build_victim(const ScenarioProfile& profile) {
    return build_victim(profile, default_manifest(profile.stack_executable));
}

/// Re-assembles a rewritten program for an existing image, keeping its
/// profile and reset geometry; entry points follow their symbols.
inline VictimImage reassemble(const VictimImage& base, AsmProgram program) {
    VictimImage img = base;
    img.program = std::move(program);
    img.blob = assemble(img.program);
    const bool secure_app = base.app_world == World::Secure;
    img.reset.entry_secure = img.symbol(secure_app ? "main" : "secure_boot");
    if (!secure_app) img.reset.entry_nonsecure = img.symbol("main");
    return img;
}

/// Fresh machine with the image loaded and reset.
inline std::unique_ptr<Machine> boot(const VictimImage& img) {
    auto m = std::make_unique<Machine>(load_image(img.manifest));
    for (const auto& seg : img.blob.segments) m->memory().load(seg.origin, seg.bytes);
    m->reset(img.reset);
    return m;
}

/// Length-prefixed record as read by the guest's read_record.
inline Bytes make_record(char command, std::span<const std::uint8_t> payload) {
    const auto len = payload.size() + 1;
    if (len > 0xFFFF) throw Error("record too long");
    Bytes out(payload.size() + 3);
    out[0] = static_cast<std::uint8_t>(len & 0xFF);
    out[1] = static_cast<std::uint8_t>(len >> 8);
    out[2] = static_cast<std::uint8_t>(command);
    std::copy(payload.begin(), payload.end(), out.begin() + 3);
    return out;
}

inline Bytes make_record(char command, std::string_view payload) {
    return make_record(command, std::span(reinterpret_cast<const std::uint8_t*>(payload.data()), payload.size()));
}

inline Bytes le_words(std::initializer_list<std::uint32_t> words) {
    Bytes out;
    for (auto w : words) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(w >> (8 * i)));
    }
    return out;
}

struct HeapChunkView {
    std::uint32_t addr = 0;
    std::uint32_t prev_size = 0;
    std::uint32_t size = 0;
    bool in_use = false;
    std::uint32_t fd = 0;
    std::uint32_t bk = 0;
};

struct HeapReport {
    std::vector<HeapChunkView> chunks; // physical order, end marker excluded
    std::vector<std::uint32_t> free_list;
    bool ok = true;
    std::string error;
};

/// Walks the heap physically and the free list from the bin, checking
/// c.fd.bk == c and c.bk.fd == c and that the list holds exactly the free
/// chunks.
inline HeapReport walk_heap(const MemoryMap& mem, std::uint32_t base, std::uint32_t size, std::uint32_t bin) {
    HeapReport rep;
    auto fail = [&](std::string why) {
        rep.ok = false;
        rep.error = std::move(why);
        return rep;
    };
    auto rd = [&](std::uint32_t a) { return mem.read(a, 4); };
    const std::uint32_t marker = base + size - 8;
    std::set<std::uint32_t> free_chunks;
    try {
        std::uint32_t c = base;
        while (c != marker) {
            if (c > marker) return fail("chunk walk overran the heap at " + guest::hex(c));
            HeapChunkView v{c, rd(c), rd(c + 4) & ~1u, (rd(c + 4) & 1u) != 0, 0, 0};
            if (v.size < 16 || v.size % 8 != 0) return fail("bad size at " + guest::hex(c));
            if (!v.in_use) {
                v.fd = rd(c + 8);
                v.bk = rd(c + 12);
                free_chunks.insert(c);
            }
            rep.chunks.push_back(v);
            c += v.size;
        }
        if (rd(marker + 4) != 9) return fail("end marker damaged");
        std::uint32_t c2 = rd(bin + 8);
        std::uint32_t prev = bin;
        while (c2 != bin) {
            if (rep.free_list.size() > rep.chunks.size()) return fail("free list does not close");
            if (!free_chunks.contains(c2)) return fail("free list holds non-free " + guest::hex(c2));
            if (rd(c2 + 12) != prev) return fail("bk mismatch at " + guest::hex(c2));
            if (rd(rd(c2 + 8) + 12) != c2) return fail("fd.bk mismatch at " + guest::hex(c2));
            if (rd(rd(c2 + 12) + 8) != c2) return fail("bk.fd mismatch at " + guest::hex(c2));
            rep.free_list.push_back(c2);
            prev = c2;
            c2 = rd(c2 + 8);
        }
        if (rd(bin + 12) != prev) return fail("bin.bk is not the last chunk");
        if (rep.free_list.size() != free_chunks.size()) return fail("free chunk missing from the list");
    } catch (const MemoryFault& e) {
        return fail(std::string("heap walk faulted: ") + e.what());
    }
    return rep;
}

inline HeapReport walk_heap(const Machine& m, const VictimImage& img) {
    return walk_heap(m.memory(), img.symbol("heap_base"), img.profile.heap_size, img.symbol("heap_bin"));
}

} // namespace tzm

#endif // TZM_RUNTIME_HPP

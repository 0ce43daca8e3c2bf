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

#ifndef TZM_MACHINE_HPP
#define TZM_MACHINE_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tzm/isa.hpp"
#include "tzm/memory.hpp"

namespace tzm {

using World = SecurityAttr; // only Secure or NonSecure

struct FaultRecord {
    FaultKind kind = FaultKind::HardFault;
    std::uint32_t pc_at_fault = 0;
    std::string detail;
};

enum class StepResult : std::uint8_t { Retired, Faulted, Halted };

struct RunOutcome {
    enum class Kind : std::uint8_t { Halted, Faulted, BudgetExhausted };
    Kind kind = Kind::BudgetExhausted;
    std::uint64_t cycles = 0; // retired in this run
    std::uint32_t pc = 0;
    std::uint8_t halt_code = 0;
    std::optional<FaultRecord> fault;
};

inline const char* outcome_name(RunOutcome::Kind k) {
    switch (k) {
    case RunOutcome::Kind::Halted: return "Halted";
    case RunOutcome::Kind::Faulted: return "Faulted";
    case RunOutcome::Kind::BudgetExhausted: return "BudgetExhausted";
    }
    return "?";
}

enum class UartId : std::uint8_t { Secure, NonSecure };

/// Register layout of each UART window.
namespace uart {
inline constexpr std::uint32_t kData = 0x0;
inline constexpr std::uint32_t kStatus = 0x4;
inline constexpr std::uint32_t kRxAvail = 1u << 0;
inline constexpr std::uint32_t kTxReady = 1u << 1;
} // namespace uart

struct UartPort {
    std::deque<std::uint8_t> rx;
    Bytes tx;
    std::uint8_t idle = 0xFF;
};

struct TraceEntry {
    std::uint64_t cycle = 0;
    std::uint32_t pc = 0;
    World world = World::Secure;
    std::string text;
};

inline std::string format_trace(const TraceEntry& e) {
    return std::to_string(e.cycle) + "," + hex32(e.pc) + "," + attr_name(e.world) + "," + e.text;
}

struct AccessRecord {
    std::uint64_t cycle = 0;
    World world = World::Secure;
    std::uint32_t addr = 0;
    AccessKind kind = AccessKind::Read;
    std::optional<FaultKind> result;
};

struct ResetConfig {
    std::uint32_t entry_secure = 0;
    std::uint32_t entry_nonsecure = 0;
    std::uint32_t sp_secure = 0;
    std::uint32_t sp_nonsecure = 0;
};

/// A fault raised while executing one instruction. Host services may throw it.
class GuestFault : public Error {
public:
    GuestFault(FaultKind kind, const std::string& detail) : Error(detail), kind_(kind) {}
    FaultKind kind() const { return kind_; }

private:
    FaultKind kind_;
};

class Machine {
public:
    using Service = std::function<void(Machine&)>;
    using Hook = std::function<void(Machine&)>;

    struct Snapshot {
        MemoryMap::Snapshot memory;
        std::array<std::uint32_t, 16> r{};
        std::uint32_t sp_s = 0, sp_ns = 0;
        bool n = false, z = false, c = false, v = false;
        World world = World::Secure;
        std::uint64_t cycles = 0;
        bool halted = false;
        std::uint8_t halt_code = 0;
        std::optional<FaultRecord> fault;
        std::array<UartPort, 2> uarts;
    };

    /// Attaches UART devices to regions named secure_uart and ns_uart when present.
    explicit Machine(MemoryMap map) : map_(std::move(map)) {
        if (map_.region("secure_uart")) map_.attach("secure_uart", uart_device(UartId::Secure));
        if (map_.region("ns_uart")) map_.attach("ns_uart", uart_device(UartId::NonSecure));
    }
    Machine(const Machine&) = delete;
    Machine& operator=(const Machine&) = delete;

    MemoryMap& memory() { return map_; }
    const MemoryMap& memory() const { return map_; }

    /// World is Secure and LR holds the Non-secure entry, so Secure boot code
    /// can finish with BXNS LR.
    void reset(const ResetConfig& cfg) {
        reset_cfg_ = cfg;
        r_.fill(0);
        sp_s_ = cfg.sp_secure;
        sp_ns_ = cfg.sp_nonsecure;
        world_ = World::Secure;
        r_[reg::lr] = cfg.entry_nonsecure | 1u;
        r_[reg::pc] = cfg.entry_secure & ~1u;
        n_ = z_ = c_ = v_ = false;
        cycles_ = 0;
        halted_ = false;
        halt_code_ = 0;
        fault_.reset();
    }
    void reset() { reset(reset_cfg_); }

    std::uint32_t reg(unsigned i) const {
        if (i == reg::sp) return world_ == World::Secure ? sp_s_ : sp_ns_;
        return r_.at(i);
    }
    void set_reg(unsigned i, std::uint32_t v) {
        if (i == reg::sp) {
            (world_ == World::Secure ? sp_s_ : sp_ns_) = v;
        } else {
            r_.at(i) = v;
        }
    }
    std::uint32_t pc() const { return r_[reg::pc]; }
    std::uint32_t sp_secure() const { return sp_s_; }
    std::uint32_t sp_nonsecure() const { return sp_ns_; }
    World world() const { return world_; }
    std::uint64_t cycles() const { return cycles_; }
    bool halted() const { return halted_; }
    std::uint8_t halt_code() const { return halt_code_; }
    const std::optional<FaultRecord>& fault() const { return fault_; }
    bool flag_n() const { return n_; }
    bool flag_z() const { return z_; }
    bool flag_c() const { return c_; }
    bool flag_v() const { return v_; }
    void set_flag_z(bool z) { z_ = z; }
    void set_flags(bool n, bool z, bool c, bool v) { n_ = n, z_ = z, c_ = c, v_ = v; }

    void halt(std::uint8_t code) {
        halted_ = true;
        halt_code_ = code;
    }
    /// Clears a halt or fault so run() continues from the current state.
    void resume() {
        halted_ = false;
        halt_code_ = 0;
        fault_.reset();
    }

    /// Runs when a Secure-world BKPT with this immediate retires.
    void set_service(std::uint8_t imm, Service s) { services_[imm] = std::move(s); }
    /// Runs before each fetch at this address.
    void add_pc_hook(std::uint32_t addr, Hook h) { hooks_[addr & ~1u].push_back(std::move(h)); }
    void clear_pc_hooks() { hooks_.clear(); }

    void set_trace(std::function<void(const TraceEntry&)> t) { trace_ = std::move(t); }
    void set_access_trace(std::function<void(const AccessRecord&)> t) { access_trace_ = std::move(t); }

    void uart_feed(UartId id, std::span<const std::uint8_t> bytes) {
        auto& p = port(id);
        p.rx.insert(p.rx.end(), bytes.begin(), bytes.end());
    }
    void uart_feed(UartId id, std::string_view s) {
        uart_feed(id, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    }
    Bytes uart_drain(UartId id) {
        auto& p = port(id);
        Bytes out;
        out.swap(p.tx);
        return out;
    }
    std::string uart_text(UartId id) {
        const auto b = uart_drain(id);
        return {b.begin(), b.end()};
    }
    void uart_clear_rx(UartId id) { port(id).rx.clear(); }
    UartPort& port(UartId id) { return uarts_[static_cast<std::size_t>(id)]; }

    /// Guest-visible checked accesses; usable from host services.
    std::uint32_t load(std::uint32_t addr, unsigned width) {
        check(addr, AccessKind::Read);
        return map_.read(addr, width);
    }
    void store(std::uint32_t addr, unsigned width, std::uint32_t value) {
        check(addr, AccessKind::Write);
        map_.write(addr, width, value);
    }

    StepResult step() {
        if (fault_) return StepResult::Faulted;
        if (halted_) return StepResult::Halted;
        std::uint32_t addr = r_[reg::pc];
        try {
            if (auto it = hooks_.find(addr); it != hooks_.end()) {
                for (auto& h : it->second) h(*this);
                if (halted_) return StepResult::Halted;
                addr = r_[reg::pc]; // a hook may redirect
            }
            execute(addr, fetch(addr));
        } catch (const GuestFault& f) {
            fault_ = FaultRecord{f.kind(), addr, f.what()};
            return StepResult::Faulted;
        } catch (const MemoryFault& f) {
            fault_ = FaultRecord{f.kind(), addr, f.what()};
            return StepResult::Faulted;
        }
        ++cycles_;
        return halted_ ? StepResult::Halted : StepResult::Retired;
    }

    RunOutcome run(std::uint64_t budget) {
        const auto start = cycles_;
        StepResult s = halted_ ? StepResult::Halted : fault_ ? StepResult::Faulted : StepResult::Retired;
        while (s == StepResult::Retired && cycles_ - start < budget) s = step();
        RunOutcome out;
        out.cycles = cycles_ - start;
        out.pc = r_[reg::pc];
        if (s == StepResult::Halted) {
            out.kind = RunOutcome::Kind::Halted;
            out.halt_code = halt_code_;
        } else if (s == StepResult::Faulted) {
            out.kind = RunOutcome::Kind::Faulted;
            out.fault = fault_;
        }
        return out;
    }

    /// At most max(max_runs, 1) runs sharing one cycle budget. before_restart
    /// runs after each reset, e.g. to queue the next payload.
    std::vector<RunOutcome> run_with_restart(std::uint64_t budget, std::size_t max_runs,
                                             const std::function<void(Machine&, std::size_t)>& before_restart = {}) {
        std::vector<RunOutcome> outs;
        std::uint64_t used = 0;
        for (;;) {
            outs.push_back(run(budget - used));
            used += outs.back().cycles;
            if (outs.back().kind != RunOutcome::Kind::Faulted) break;
            if (outs.size() >= std::max<std::size_t>(max_runs, 1) || used >= budget) break;
            reset();
            if (before_restart) before_restart(*this, outs.size());
        }
        return outs;
    }

    Snapshot snapshot() const {
        return {map_.snapshot(), r_, sp_s_, sp_ns_, n_, z_, c_, v_, world_, cycles_, halted_, halt_code_, fault_, uarts_};
    }
    void restore(const Snapshot& s) {
        map_.restore(s.memory);
        r_ = s.r;
        sp_s_ = s.sp_s;
        sp_ns_ = s.sp_ns;
        n_ = s.n, z_ = s.z, c_ = s.c, v_ = s.v;
        world_ = s.world;
        cycles_ = s.cycles;
        halted_ = s.halted;
        halt_code_ = s.halt_code;
        fault_ = s.fault;
        uarts_ = s.uarts;
    }

private:
    [[noreturn]] static void raise(FaultKind k, const std::string& detail) { throw GuestFault(k, detail); }

    MmioDevice uart_device(UartId id) {
        return {[this, id](std::uint32_t off, unsigned) -> std::uint32_t {
                    auto& p = port(id);
                    if (off == uart::kStatus) return (p.rx.empty() ? 0u : uart::kRxAvail) | uart::kTxReady;
                    if (off != uart::kData) return 0;
                    if (p.rx.empty()) return p.idle;
                    const auto b = p.rx.front();
                    p.rx.pop_front();
                    return b;
                },
                [this, id](std::uint32_t off, unsigned, std::uint32_t v) {
                    if (off == uart::kData) port(id).tx.push_back(static_cast<std::uint8_t>(v));
                }};
    }

    void check(std::uint32_t addr, AccessKind kind) {
        const auto res = map_.check_access(world_, addr, kind);
        if (access_trace_) access_trace_({cycles_, world_, addr, kind, res});
        if (res) raise(*res, std::string(fault_name(*res)) + " on " + (kind == AccessKind::Read    ? "read"
                                                                       : kind == AccessKind::Write ? "write"
                                                                                                   : "fetch") +
                                 " at " + hex32(addr) + " from " + attr_name(world_));
    }

    Instruction fetch(std::uint32_t addr) {
        const auto attr = map_.attribution(addr);
        check(addr, AccessKind::Execute);
        if (world_ == World::Secure && attr == SecurityAttr::NonSecure)
            raise(FaultKind::SecureFault, "Secure fetch from Non-secure memory at " + hex32(addr));
        const auto hw = static_cast<std::uint16_t>(map_.read(addr, 2));
        DecodeResult d;
        if (detail::is_wide_prefix(hw)) {
            check(addr + 2, AccessKind::Execute);
            const auto hw2 = static_cast<std::uint16_t>(map_.read(addr + 2, 2));
            const Bytes b{static_cast<std::uint8_t>(hw), static_cast<std::uint8_t>(hw >> 8),
                          static_cast<std::uint8_t>(hw2), static_cast<std::uint8_t>(hw2 >> 8)};
            d = decode(b);
        } else {
            d = decode_halfword(hw);
        }
        const auto* in = as_instruction(d);
        if (world_ == World::NonSecure && attr == SecurityAttr::NSC) {
            if (!in || in->op != Op::Sg)
                raise(FaultKind::SecureFault, "Non-secure entry to NSC at " + hex32(addr) + " without SG");
            world_ = World::Secure;
        }
        if (!in) raise(FaultKind::UsageFault, "undefined instruction " + std::get<DecodeError>(d).reason);
        return *in;
    }

    void set_nz(std::uint32_t r) {
        n_ = (r >> 31) != 0;
        z_ = r == 0;
    }

    std::uint32_t add_with_carry(std::uint32_t x, std::uint32_t y, bool carry) {
        const std::uint64_t u = std::uint64_t{x} + y + (carry ? 1 : 0);
        const std::int64_t s = std::int64_t{static_cast<std::int32_t>(x)} + static_cast<std::int32_t>(y) + (carry ? 1 : 0);
        const auto r = static_cast<std::uint32_t>(u);
        set_nz(r);
        c_ = (u >> 32) != 0;
        v_ = s != static_cast<std::int32_t>(r);
        return r;
    }

    bool cond_holds(Cond c) const {
        switch (c) {
        case Cond::EQ: return z_;
        case Cond::NE: return !z_;
        case Cond::CS: return c_;
        case Cond::CC: return !c_;
        case Cond::MI: return n_;
        case Cond::PL: return !n_;
        case Cond::VS: return v_;
        case Cond::VC: return !v_;
        case Cond::HI: return c_ && !z_;
        case Cond::LS: return !c_ || z_;
        case Cond::GE: return n_ == v_;
        case Cond::LT: return n_ != v_;
        case Cond::GT: return !z_ && n_ == v_;
        case Cond::LE: return z_ || n_ != v_;
        }
        return false;
    }

    // Reading PC as an operand yields the instruction address plus 4.
    std::uint32_t operand(unsigned r, std::uint32_t addr) const { return r == reg::pc ? addr + 4 : reg(r); }

    void interwork(std::uint32_t target, const char* what) {
        if (!(target & 1u)) raise(FaultKind::UsageFault, std::string(what) + " to ARM state target " + hex32(target));
        r_[reg::pc] = target & ~1u;
    }

    void execute(std::uint32_t addr, const Instruction& in) {
        if (trace_) trace_({cycles_, addr, world_, disassemble(in, addr)});
        std::uint32_t next = addr + static_cast<std::uint32_t>(in.width());
        r_[reg::pc] = next;
        switch (in.op) {
        case Op::MovImm:
            set_reg(in.rd, static_cast<std::uint32_t>(in.imm));
            set_nz(static_cast<std::uint32_t>(in.imm));
            break;
        case Op::MovReg: {
            const auto v = operand(in.rm, addr);
            if (in.rd == reg::pc) r_[reg::pc] = v & ~1u;
            else set_reg(in.rd, v);
            break;
        }
        case Op::AddImm:
            switch (in.form) {
            case Form::T1: set_reg(in.rd, add_with_carry(reg(in.rn), in.imm, false)); break;
            case Form::T2: set_reg(in.rd, add_with_carry(reg(in.rd), in.imm, false)); break;
            case Form::Sp: set_reg(in.rd, reg(reg::sp) + static_cast<std::uint32_t>(in.imm)); break;
            case Form::Pc: set_reg(in.rd, ((addr + 4) & ~3u) + static_cast<std::uint32_t>(in.imm)); break;
            default: raise(FaultKind::UsageFault, "bad add form");
            }
            break;
        case Op::AddReg:
            if (in.form == Form::Hi) set_reg(in.rd, reg(in.rd) + reg(in.rm));
            else set_reg(in.rd, add_with_carry(reg(in.rn), reg(in.rm), false));
            break;
        case Op::SubImm:
            switch (in.form) {
            case Form::T1: set_reg(in.rd, add_with_carry(reg(in.rn), ~static_cast<std::uint32_t>(in.imm), true)); break;
            case Form::T2: set_reg(in.rd, add_with_carry(reg(in.rd), ~static_cast<std::uint32_t>(in.imm), true)); break;
            case Form::Sp: set_reg(reg::sp, reg(reg::sp) - static_cast<std::uint32_t>(in.imm)); break;
            default: raise(FaultKind::UsageFault, "bad sub form");
            }
            break;
        case Op::CmpImm: add_with_carry(reg(in.rn), ~static_cast<std::uint32_t>(in.imm), true); break;
        case Op::LdrImm: set_reg(in.rd, load(base_of(in) + in.imm, 4)); break;
        case Op::StrImm: store(base_of(in) + in.imm, 4, reg(in.rd)); break;
        case Op::LdrbImm: set_reg(in.rd, load(reg(in.rn) + in.imm, 1)); break;
        case Op::StrbImm: store(reg(in.rn) + in.imm, 1, reg(in.rd) & 0xFF); break;
        case Op::LdrLit: set_reg(in.rd, load(((addr + 4) & ~3u) + in.imm, 4)); break;
        case Op::Push: {
            const auto count = static_cast<std::uint32_t>(std::popcount(in.regs));
            std::uint32_t a = reg(reg::sp) - 4 * count;
            const auto new_sp = a;
            for (unsigned i = 0; i < 16; ++i)
                if (in.regs & (1u << i)) {
                    store(a, 4, reg(i));
                    a += 4;
                }
            set_reg(reg::sp, new_sp);
            break;
        }
        case Op::Pop: {
            std::uint32_t a = reg(reg::sp);
            std::array<std::uint32_t, 16> vals{};
            for (unsigned i = 0; i < 16; ++i)
                if (in.regs & (1u << i)) {
                    vals[i] = load(a, 4);
                    a += 4;
                }
            set_reg(reg::sp, a);
            for (unsigned i = 0; i < 8; ++i)
                if (in.regs & (1u << i)) set_reg(i, vals[i]);
            if (in.regs & kListPc) interwork(vals[reg::pc], "pop pc");
            break;
        }
        case Op::BCond:
            if (cond_holds(in.cond)) r_[reg::pc] = addr + 4 + static_cast<std::uint32_t>(in.imm);
            break;
        case Op::B: r_[reg::pc] = addr + 4 + static_cast<std::uint32_t>(in.imm); break;
        case Op::Bl:
            r_[reg::lr] = next | 1u;
            r_[reg::pc] = addr + 4 + static_cast<std::uint32_t>(in.imm);
            break;
        case Op::Bx: interwork(operand(in.rm, addr), "bx"); break;
        case Op::Blx: {
            const auto target = reg(in.rm);
            r_[reg::lr] = next | 1u;
            interwork(target, "blx");
            break;
        }
        case Op::Bxns: {
            if (world_ != World::Secure) raise(FaultKind::UsageFault, "bxns from Non-secure state");
            const auto target = reg(in.rm) & ~1u;
            if (map_.attribution(target) == SecurityAttr::NonSecure) world_ = World::NonSecure;
            r_[reg::pc] = target;
            break;
        }
        case Op::Nop:
        case Op::Sg: break;
        case Op::Bkpt: {
            const auto imm = static_cast<std::uint8_t>(in.imm);
            if (world_ == World::Secure)
                if (auto it = services_.find(imm); it != services_.end()) {
                    it->second(*this);
                    break;
                }
            halt(imm);
            break;
        }
        case Op::Udf: raise(FaultKind::UsageFault, "udf #" + std::to_string(in.imm));
        }
    }

    std::uint32_t base_of(const Instruction& in) const { return in.form == Form::Sp ? reg(reg::sp) : reg(in.rn); }

    MemoryMap map_;
    std::array<std::uint32_t, 16> r_{}; // r_[13] unused; SPs are banked below
    std::uint32_t sp_s_ = 0, sp_ns_ = 0;
    bool n_ = false, z_ = false, c_ = false, v_ = false;
    World world_ = World::Secure;
    std::uint64_t cycles_ = 0;
    bool halted_ = false;
    std::uint8_t halt_code_ = 0;
    std::optional<FaultRecord> fault_;
    ResetConfig reset_cfg_;
    std::array<UartPort, 2> uarts_;
    std::map<std::uint8_t, Service> services_;
    std::map<std::uint32_t, std::vector<Hook>> hooks_;
    std::function<void(const TraceEntry&)> trace_;
    std::function<void(const AccessRecord&)> access_trace_;
};

} // namespace tzm

#endif // TZM_MACHINE_HPP

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

#include <gtest/gtest.h>

#include <bitset>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "tzm/runtime.hpp"
#include "tzm/scanner.hpp"
#include "support/pattern_oracle.hpp"

using namespace tzm;
using tzm::oracle_support::oracle;
using tzm::oracle_support::random_image;

namespace {

Bytes enc(std::initializer_list<Instruction> ins) {
    Bytes out;
    for (const auto& in : ins) {
        const auto b = encode(in);
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

} // namespace

TEST(Sweep, ThreeNops) {
    const auto s = sweep(Bytes{0x00, 0xBF, 0x00, 0xBF, 0x00, 0xBF}, 0x100);
    ASSERT_EQ(s.items.size(), 3u);
    EXPECT_EQ(s.items[0].addr, 0x100u);
    EXPECT_EQ(s.items[1].addr, 0x102u);
    EXPECT_EQ(s.items[2].addr, 0x104u);
    EXPECT_EQ(s.unknown, 0u);
}

TEST(Sweep, UndecodableHalfwordIsCountedAndSkipped) {
    // A BL prefix followed by a NOP is no 32-bit encoding: the prefix is
    // unknown and the sweep picks up the NOP behind it.
    Bytes b = enc({{.op = Op::Nop}});
    b.insert(b.end(), {0x00, 0xF0});
    const auto more = enc({{.op = Op::Nop}});
    b.insert(b.end(), more.begin(), more.end());
    const auto s = sweep(b, 0);
    EXPECT_EQ(s.unknown, 1u);
    ASSERT_EQ(s.items.size(), 2u);
    EXPECT_EQ(s.items.back().addr, 4u);
}

TEST(Sweep, MatchesAssemblerStatementCount) {
    const SymbolTable externs{{"uart_putc", 0x9000}};
    const auto prog = parse_asm(guest::with_prefix(guest::kStrings, ""), 0x8000);
    const auto blob = assemble(prog, externs);
    std::size_t instructions = 0;
    for (const auto& st : prog.statements) {
        if (!st.mnemonic.empty() && st.mnemonic.front() != '.') ++instructions;
    }
    const auto s = sweep(blob.bytes(), 0x8000);
    EXPECT_EQ(s.items.size(), instructions);
    EXPECT_EQ(s.unknown, 0u);
}

TEST(Census, PlantedImageReproducesCounts) {
    const auto img = planted_census_image();
    EXPECT_EQ(img.size(), 4240u);
    const auto c = census(img, 0);
    EXPECT_EQ(c.total_instructions, 1908u);
    EXPECT_EQ(c.pop_pc, 49u);
    EXPECT_EQ(c.bx_lr, 16u);
    EXPECT_EQ(c.unknown, 0u);
    EXPECT_NEAR(c.gadget_density() * 100.0, 3.41, 0.005);
    EXPECT_EQ(c, oracle().census(img));
}

TEST(Census, NoTerminatorsMeansZeroDensity) {
    const auto c = census(enc({{.op = Op::Nop}, {.op = Op::MovImm, .rd = 1, .imm = 3}}), 0);
    EXPECT_EQ(c.total_instructions, 2u);
    EXPECT_EQ(c.gadget_density(), 0.0);
    EXPECT_EQ(census(Bytes{}, 0).gadget_density(), 0.0);
}

TEST(Census, RandomImagesMatchPatternOracle) {
    std::mt19937 rng(2026);
    for (int i = 0; i < 100; ++i) {
        const auto img = random_image(rng, 4096 + (rng() % 512) * 2);
        const auto c = census(img, 0);
        const auto o = oracle().census(img);
        ASSERT_EQ(c, o) << "image " << i;
        EXPECT_LE(c.pop_pc + c.bx_lr, c.total_instructions);
        EXPECT_GE(c.gadget_density(), 0.0);
        EXPECT_LE(c.gadget_density(), 1.0);
    }
}

TEST(Gadgets, RandomImagesMatchWindowEnumeration) {
    std::mt19937 rng(99);
    for (int i = 0; i < 30; ++i) {
        const auto img = random_image(rng, 4096);
        for (std::size_t max_len : {1u, 3u, 6u}) {
            std::set<std::pair<std::uint32_t, std::size_t>> got;
            for (const auto& g : find_gadgets(img, 0x8000, max_len)) {
                EXPECT_TRUE(got.insert({g.entry, g.instructions.size()}).second) << "duplicate entry";
                EXPECT_TRUE(is_terminator(g.instructions.back().in));
                for (std::size_t k = 0; k + 1 < g.instructions.size(); ++k) {
                    EXPECT_FALSE(is_terminator(g.instructions[k].in));
                }
            }
            ASSERT_EQ(got, oracle().windows(img, 0x8000, max_len)) << "image " << i << " max_len " << max_len;
        }
    }
}

TEST(Gadgets, MaxLenOneGivesBareTerminators) {
    std::mt19937 rng(5);
    const auto img = random_image(rng, 2048);
    const auto gs = find_gadgets(img, 0, 1);
    const auto c = census(img, 0);
    EXPECT_EQ(gs.size(), c.pop_pc + c.bx_lr);
    for (const auto& g : gs) EXPECT_EQ(g.instructions.size(), 1u);
}

TEST(Gadgets, NeverCrossUnknownHalfword) {
    // mov r0, r1 ; <lone BL prefix> ; pop {pc}
    Bytes b = enc({{.op = Op::MovReg, .rd = 0, .rm = 1}});
    b.insert(b.end(), {0x00, 0xF8}); // lone wide prefix
    const auto tail = enc({{.op = Op::Pop, .regs = kListPc}});
    b.insert(b.end(), tail.begin(), tail.end());
    const auto gs = find_gadgets(b, 0, 4);
    ASSERT_EQ(gs.size(), 1u);
    EXPECT_EQ(gs[0].entry, 4u);
}

TEST(Gadgets, PlantedRopGadgetsWithPopEffects) {
    ScenarioProfile p;
    p.victim = Victim::Rop;
    const auto img = build_victim(p);
    const auto gs = find_gadgets(sweep(img.blob), 4);
    auto find = [&](const char* name, std::size_t len) -> const Gadget* {
        for (const auto& g : gs) {
            if (g.entry == img.symbol(name) && g.instructions.size() == len) return &g;
        }
        return nullptr;
    };
    const auto* g1 = find("rop_g1", 3);
    const auto* g2 = find("rop_g2", 2);
    const auto* g3 = find("rop_g3", 2);
    ASSERT_NE(g1, nullptr);
    ASSERT_NE(g2, nullptr);
    ASSERT_NE(g3, nullptr);
    EXPECT_EQ(g1->terminator, Terminator::PopThenBxLr);
    EXPECT_EQ(g1->pop_effect, (std::vector<std::uint8_t>{4, 5, reg::lr}));
    EXPECT_EQ(g2->terminator, Terminator::PopPC);
    EXPECT_EQ(g2->pop_effect, (std::vector<std::uint8_t>{4, reg::pc}));
    EXPECT_EQ(g3->pop_effect, (std::vector<std::uint8_t>{reg::pc}));
}

TEST(JmpSp, PlantedFormsAreFound) {
    const auto b = enc({{.op = Op::Nop},
                        {.op = Op::Bx, .rm = reg::sp},
                        {.op = Op::Blx, .rm = reg::sp},
                        {.op = Op::MovReg, .rd = reg::pc, .rm = reg::sp},
                        {.op = Op::Bx, .rm = reg::lr}});
    EXPECT_EQ(find_jmp_sp(sweep(b, 0x100)), (std::vector<std::uint32_t>{0x102, 0x104, 0x106}));
    EXPECT_TRUE(find_jmp_sp(sweep(Bytes{}, 0)).empty());
}

TEST(JmpSp, VanillaVictimsHaveNone) {
    for (auto v : {Victim::Bof, Victim::Rop, Victim::Heap, Victim::Fmt}) {
        ScenarioProfile p;
        p.victim = v;
        EXPECT_TRUE(find_jmp_sp(sweep(build_victim(p).blob)).empty()) << victim_name(v);
    }
}

TEST(NscEntries, VeneersMatchSymbols) {
    ScenarioProfile p;
    p.victim = Victim::NscFunc;
    p.world = HostWorld::Nsc;
    const auto img = build_victim(p);
    const auto map = load_image(img.manifest);
    const auto got = find_nsc_entries(sweep(img.blob), map);
    std::vector<std::uint32_t> want{img.symbol("NSC_func"), img.symbol("nsc_puts"),
                                    img.symbol("nsc_secure_console_puts")};
    std::sort(want.begin(), want.end());
    EXPECT_EQ(got, want);
}

TEST(NscEntries, SgOutsideNscIsExcluded) {
    const auto map = load_image(default_manifest());
    const auto sg = enc({{.op = Op::Sg}});
    EXPECT_TRUE(find_nsc_entries(sweep(sg, 0x100), map).empty());
    EXPECT_TRUE(find_nsc_entries(sweep(sg, 0x8000), map).empty());
    EXPECT_EQ(find_nsc_entries(sweep(sg, 0x7E00), map), (std::vector<std::uint32_t>{0x7E00}));
    EXPECT_TRUE(find_nsc_entries(sweep(Bytes{}, 0x7E00), map).empty());
}

TEST(Scan, ReportIsDeterministic) {
    std::mt19937 rng(1);
    const auto img = random_image(rng, 4096);
    const auto map = load_image(default_manifest());
    const auto a = to_json(scan(sweep(img, 0x8000), map, 4)).dump();
    const auto b = to_json(scan(sweep(img, 0x8000), map, 4)).dump();
    EXPECT_EQ(a, b);
}

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

#include <fstream>
#include <random>
#include <unordered_map>

#include "tzm/isa.hpp"

using namespace tzm;

namespace {

Instruction decoded(std::initializer_list<std::uint8_t> bytes) {
    const Bytes b(bytes);
    const auto r = decode(b, 0);
    const auto* in = as_instruction(r);
    EXPECT_NE(in, nullptr);
    return in ? *in : Instruction{};
}

// Capstone output frozen by tests/oracle/capstone_thumb16.py.
std::unordered_map<std::uint16_t, std::string> load_reference() {
    std::ifstream in(TZM_SOURCE_DIR "/tests/data/thumb16_reference.txt");
    std::unordered_map<std::uint16_t, std::string> table;
    std::string line;
    while (std::getline(in, line)) {
        if (line.size() < 6) continue;
        table.emplace(static_cast<std::uint16_t>(std::stoul(line.substr(0, 4), nullptr, 16)), line.substr(5));
    }
    return table;
}

Instruction random_instruction(std::mt19937& rng) {
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    auto low = [&] { return static_cast<std::uint8_t>(pick(0, 7)); };
    Instruction in;
    switch (pick(0, 22)) {
    case 0: in = {.op = Op::MovImm, .rd = low(), .imm = pick(0, 255)}; break;
    case 1: in = {.op = Op::MovReg, .rd = static_cast<std::uint8_t>(pick(0, 15)), .rm = static_cast<std::uint8_t>(pick(0, 15))}; break;
    case 2: {
        const std::uint8_t r = low();
        switch (pick(0, 4)) {
        case 0: in = {.op = Op::AddImm, .form = Form::T1, .rd = r, .rn = low(), .imm = pick(0, 7)}; break;
        case 1: in = {.op = Op::AddImm, .form = Form::T2, .rd = r, .rn = r, .imm = pick(0, 255)}; break;
        case 2: in = {.op = Op::AddImm, .form = Form::Sp, .rd = reg::sp, .rn = reg::sp, .imm = 4 * pick(0, 127)}; break;
        case 3: in = {.op = Op::AddImm, .form = Form::Sp, .rd = r, .rn = reg::sp, .imm = 4 * pick(0, 255)}; break;
        default: in = {.op = Op::AddImm, .form = Form::Pc, .rd = r, .rn = reg::pc, .imm = 4 * pick(0, 255)}; break;
        }
        break;
    }
    case 3:
        if (pick(0, 1)) {
            in = {.op = Op::AddReg, .form = Form::T1, .rd = low(), .rn = low(), .rm = low()};
        } else {
            const auto r = static_cast<std::uint8_t>(pick(0, 14));
            in = {.op = Op::AddReg, .form = Form::Hi, .rd = r, .rn = r, .rm = static_cast<std::uint8_t>(pick(0, 14))};
        }
        break;
    case 4: {
        const std::uint8_t r = low();
        switch (pick(0, 2)) {
        case 0: in = {.op = Op::SubImm, .form = Form::T1, .rd = r, .rn = low(), .imm = pick(0, 7)}; break;
        case 1: in = {.op = Op::SubImm, .form = Form::T2, .rd = r, .rn = r, .imm = pick(0, 255)}; break;
        default: in = {.op = Op::SubImm, .form = Form::Sp, .rd = reg::sp, .rn = reg::sp, .imm = 4 * pick(0, 127)}; break;
        }
        break;
    }
    case 5: in = {.op = Op::CmpImm, .rn = low(), .imm = pick(0, 255)}; break;
    case 6:
    case 7: {
        const Op op = pick(0, 1) ? Op::LdrImm : Op::StrImm;
        in = pick(0, 1) ? Instruction{.op = op, .form = Form::T1, .rd = low(), .rn = low(), .imm = 4 * pick(0, 31)}
                        : Instruction{.op = op, .form = Form::Sp, .rd = low(), .rn = reg::sp, .imm = 4 * pick(0, 255)};
        break;
    }
    case 8: in = {.op = pick(0, 1) ? Op::LdrbImm : Op::StrbImm, .rd = low(), .rn = low(), .imm = pick(0, 31)}; break;
    case 9: in = {.op = Op::LdrLit, .rd = low(), .imm = 4 * pick(0, 255)}; break;
    case 10: in = {.op = Op::Push, .regs = static_cast<std::uint16_t>(pick(1, 0xFF) | (pick(0, 1) ? kListLr : 0))}; break;
    case 11: in = {.op = Op::Pop, .regs = static_cast<std::uint16_t>(pick(1, 0xFF) | (pick(0, 1) ? kListPc : 0))}; break;
    case 12: in = {.op = Op::BCond, .cond = static_cast<Cond>(pick(0, 13)), .imm = 2 * pick(-128, 127)}; break;
    case 13: in = {.op = Op::B, .imm = 2 * pick(-1024, 1023)}; break;
    case 14: in = {.op = Op::Bl, .imm = 2 * pick(-8388608, 8388607)}; break;
    case 15: in = {.op = Op::Bx, .rm = static_cast<std::uint8_t>(pick(0, 15))}; break;
    case 16: in = {.op = Op::Blx, .rm = static_cast<std::uint8_t>(pick(0, 14))}; break;
    case 17: in = {.op = Op::Bxns, .rm = static_cast<std::uint8_t>(pick(0, 15))}; break;
    case 18: in = {.op = Op::Nop}; break;
    case 19: in = {.op = Op::Sg}; break;
    case 20: in = {.op = Op::Bkpt, .imm = pick(0, 255)}; break;
    case 21: in = {.op = Op::Udf, .imm = pick(0, 255)}; break;
    default: in = {.op = Op::MovReg, .rd = reg::pc, .rm = static_cast<std::uint8_t>(pick(0, 14))}; break;
    }
    return in;
}

} // namespace

TEST(Decode, NopFromHalfwordBF00) {
    const auto in = decoded({0x00, 0xBF});
    EXPECT_EQ(in.op, Op::Nop);
    EXPECT_EQ(in.width(), 2);
}

TEST(Decode, PopPcFromBD00) {
    const auto in = decoded({0x00, 0xBD});
    EXPECT_EQ(in.op, Op::Pop);
    EXPECT_EQ(in.regs, kListPc);
    EXPECT_EQ(in.width(), 2);
}

TEST(Decode, BxLrFrom4770) {
    const auto in = decoded({0x70, 0x47});
    EXPECT_EQ(in.op, Op::Bx);
    EXPECT_EQ(in.rm, reg::lr);
    EXPECT_EQ(in.width(), 2);
}

TEST(Decode, SgAndBlAreFourBytes) {
    EXPECT_EQ(decoded({0x7F, 0xE9, 0x7F, 0xE9}).op, Op::Sg);
    const auto bl = decoded({0x00, 0xF0, 0x02, 0xF8});
    EXPECT_EQ(bl.op, Op::Bl);
    EXPECT_EQ(bl.imm, 4);
    EXPECT_EQ(bl.width(), 4);
}

// Reference values from Capstone at address 0x8000.
TEST(Decode, BlOffsetsMatchReferenceDisassembler) {
    struct Case {
        Bytes bytes;
        std::int32_t offset;
    };
    const std::vector<Case> cases{
        {{0x00, 0xF0, 0x02, 0xF8}, 0x4},        {{0xFF, 0xF7, 0xFE, 0xFF}, -0x4},
        {{0x00, 0xF0, 0x00, 0xF8}, 0x0},        {{0xFF, 0xF3, 0xFF, 0xD7}, 0xFFFFFE},
        {{0x00, 0xF4, 0x00, 0xD0}, -0x1000000}, {{0x0F, 0xF2, 0x7F, 0xF8}, 0x20F0FE},
    };
    for (const auto& c : cases) {
        const auto* in = as_instruction(decode(c.bytes));
        ASSERT_NE(in, nullptr);
        EXPECT_EQ(in->op, Op::Bl);
        EXPECT_EQ(in->imm, c.offset);
        EXPECT_EQ(encode(*in), c.bytes);
    }
}

TEST(Decode, UnknownHalfwordCarriesValue) {
    const Bytes b{0x00, 0x00}; // LSLS r0, r0, #0 is outside the subset
    const auto r = decode(b);
    ASSERT_TRUE(std::holds_alternative<DecodeError>(r));
    EXPECT_EQ(std::get<DecodeError>(r).halfword, 0x0000);
}

TEST(Decode, TruncatedWideInstructionIsError) {
    const Bytes b{0x00, 0xF0};
    EXPECT_TRUE(std::holds_alternative<DecodeError>(decode(b)));
    EXPECT_TRUE(std::holds_alternative<DecodeError>(decode(b, 1)));
}

TEST(Decode, UnknownWideEncodingIsError) {
    const Bytes b{0x00, 0xE8, 0x00, 0x00};
    EXPECT_TRUE(std::holds_alternative<DecodeError>(decode(b)));
}

TEST(Decode, AgreesWithReferenceDisassemblerOnAllHalfwords) {
    const auto reference = load_reference();
    ASSERT_GT(reference.size(), 30000u);
    std::size_t accepted = 0;
    for (unsigned hw = 0; hw < 0x10000; ++hw) {
        if (detail::is_wide_prefix(static_cast<std::uint16_t>(hw))) continue;
        const auto r = decode_halfword(static_cast<std::uint16_t>(hw));
        const auto it = reference.find(static_cast<std::uint16_t>(hw));
        if (const auto* in = as_instruction(r)) {
            ++accepted;
            ASSERT_NE(it, reference.end()) << std::hex << "accepted 0x" << hw << " as " << disassemble(*in, 0x1000);
            EXPECT_EQ(disassemble(*in, 0x1000), it->second) << std::hex << "0x" << hw;
        } else {
            EXPECT_EQ(it, reference.end()) << std::hex << "rejected 0x" << hw << " reference: " << it->second;
        }
    }
    EXPECT_EQ(accepted, reference.size());
}

TEST(Decode, ExhaustiveHalfwordsNeverThrowAndRoundTrip) {
    for (unsigned hw = 0; hw < 0x10000; ++hw) {
        const Bytes b{static_cast<std::uint8_t>(hw), static_cast<std::uint8_t>(hw >> 8), 0x00, 0xF8};
        DecodeResult r;
        ASSERT_NO_THROW(r = decode(b));
        if (const auto* in = as_instruction(r)) {
            const Bytes enc = encode(*in);
            EXPECT_TRUE(std::equal(enc.begin(), enc.end(), b.begin())) << std::hex << hw;
        }
    }
}

TEST(Encode, NopIsBF00LittleEndian) { EXPECT_EQ(encode(Instruction{.op = Op::Nop}), (Bytes{0x00, 0xBF})); }

TEST(Encode, PopR4R5PcRoundTrips) {
    const Instruction pop{.op = Op::Pop, .regs = 0x30 | kListPc};
    EXPECT_EQ(decoded({encode(pop)[0], encode(pop)[1]}), pop);
}

TEST(Encode, BlPlusFourRoundTrips) {
    const Instruction bl{.op = Op::Bl, .imm = 4};
    const auto bytes = encode(bl);
    ASSERT_EQ(bytes.size(), 4u);
    EXPECT_EQ(*as_instruction(decode(bytes)), bl);
}

TEST(Encode, RejectsOutOfRangeImmediates) {
    EXPECT_THROW(encode(Instruction{.op = Op::MovImm, .rd = 0, .imm = 256}), EncodeError);
    EXPECT_THROW(encode(Instruction{.op = Op::B, .imm = 2048}), EncodeError);
    EXPECT_THROW(encode(Instruction{.op = Op::B, .imm = 3}), EncodeError);
    EXPECT_THROW(encode(Instruction{.op = Op::LdrImm, .form = Form::T1, .rd = 0, .rn = 1, .imm = 6}), EncodeError);
    EXPECT_THROW(encode(Instruction{.op = Op::Bl, .imm = 16777216}), EncodeError);
    EXPECT_THROW(encode(Instruction{.op = Op::MovImm, .rd = 8, .imm = 1}), EncodeError);
}

TEST(Encode, ListConstraints) {
    EXPECT_THROW(encode(Instruction{.op = Op::Pop, .regs = 0x10 | kListLr}), EncodeError);
    EXPECT_THROW(encode(Instruction{.op = Op::Push, .regs = 0x10 | kListPc}), EncodeError);
    EXPECT_THROW(encode(Instruction{.op = Op::Push, .regs = 0}), EncodeError);
}

TEST(Encode, RandomInstructionsRoundTrip) {
    std::mt19937 rng(1234);
    for (int i = 0; i < 20000; ++i) {
        const Instruction in = random_instruction(rng);
        const Bytes bytes = encode(in);
        ASSERT_EQ(bytes.size(), static_cast<std::size_t>(in.width()));
        const auto* back = as_instruction(decode(bytes));
        ASSERT_NE(back, nullptr) << disassemble(in);
        EXPECT_EQ(*back, in) << disassemble(in) << " vs " << disassemble(*back);
    }
}

TEST(NullBytes, Positions) {
    EXPECT_EQ(null_byte_positions(Bytes{0xBF, 0x00}), (std::vector<std::size_t>{1}));
    EXPECT_TRUE(null_byte_positions(Bytes{}).empty());
    EXPECT_TRUE(null_byte_positions(encode(Instruction{.op = Op::MovReg, .rd = 2, .rm = 2})).empty());
}

// The literal quoted for the NOP replacement is the byte sequence 12 1C,
// i.e. halfword 0x1C12 = ADDS R2, R2, #0.
TEST(NullBytes, PrintedReplacementIsFlagSettingAddZero) {
    const auto in = decoded({0x12, 0x1C});
    EXPECT_EQ(in, (Instruction{.op = Op::AddImm, .form = Form::T1, .rd = 2, .rn = 2, .imm = 0}));
    EXPECT_TRUE(null_byte_positions(Bytes{0x12, 0x1C}).empty());
}

TEST(Substitute, NopBecomesSelfMove) {
    const auto sub = substitute_null_free(Instruction{.op = Op::Nop});
    ASSERT_TRUE(sub.has_value());
    EXPECT_EQ(sub->instruction, (Instruction{.op = Op::MovReg, .rd = 2, .rm = 2}));
    EXPECT_FALSE(sub->flags_differ);
    EXPECT_TRUE(null_byte_positions(encode(sub->instruction)).empty());
}

TEST(Substitute, NullFreeInstructionUnchanged) {
    const Instruction in{.op = Op::MovImm, .rd = 1, .imm = 7};
    const auto sub = substitute_null_free(in);
    ASSERT_TRUE(sub.has_value());
    EXPECT_EQ(sub->instruction, in);
}

TEST(Substitute, MovZeroHasNoSingleInstructionSubstitute) {
    EXPECT_FALSE(substitute_null_free(Instruction{.op = Op::MovImm, .rd = 0, .imm = 0}).has_value());
}

TEST(Substitute, OutputIsAlwaysNullFree) {
    for (unsigned hw = 0; hw < 0x10000; ++hw) {
        const auto r = decode_halfword(static_cast<std::uint16_t>(hw));
        const auto* in = as_instruction(r);
        if (!in) continue;
        if (const auto sub = substitute_null_free(*in)) {
            EXPECT_TRUE(null_byte_positions(encode(sub->instruction)).empty()) << disassemble(*in);
        }
    }
}

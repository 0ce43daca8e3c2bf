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

// Guest-side support library as assembler text. Every routine follows the
// AAPCS subset the victims rely on: arguments in r0-r3, r4-r7 preserved,
// variadic arguments passed on the stack only.

#ifndef TZM_GUEST_LIB_HPP
#define TZM_GUEST_LIB_HPP

#include <cstdint>
#include <string>
#include <string_view>

namespace tzm::guest {

/// Replaces every `{P}` with `prefix`.
inline std::string with_prefix(std::string_view tpl, std::string_view prefix) {
    std::string out;
    out.reserve(tpl.size());
    for (std::size_t i = 0; i < tpl.size(); ++i) {
        if (tpl.compare(i, 3, "{P}") == 0) {
            out += prefix;
            i += 2;
        } else {
            out += tpl[i];
        }
    }
    return out;
}

inline std::string hex(std::uint32_t v) {
    static const char* digits = "0123456789ABCDEF";
    std::string s = "0x";
    for (int i = 28; i >= 0; i -= 4) s += digits[(v >> i) & 0xF];
    return s;
}

/// Halt codes used by the kit.
namespace halt {
inline constexpr std::uint8_t kInputExhausted = 0;
inline constexpr std::uint8_t kShellcode = 1;
inline constexpr std::uint8_t kExit = 2;
} // namespace halt

// UART polling and the record reader. A record is a 2-byte little-endian
// length followed by that many bytes; the first byte is a command letter.
inline constexpr std::string_view kIo = R"(
{P}uart_getc:
        ldr r1, {P}io_uart
        ldr r0, [r1, #4]
        cmp r0, #3
        beq {P}getc_ready
        bkpt #0                 ; rx drained: the input session is over
{P}getc_ready:
        ldrb r0, [r1, #0]
        bx lr
{P}uart_putc:
        ldr r1, {P}io_uart
        strb r0, [r1, #0]
        bx lr
        .align 4
{P}io_uart:
        .word {P}UART_BASE

; r0 buffer, r1 capacity -> r0 command, r1 stored length. Bytes beyond
; capacity-1 are consumed and dropped; the buffer is always NUL-terminated.
{P}read_record:
        push {r4-r7, lr}
        sub sp, #8
        mov r4, r0
        subs r1, #1
        str r1, [sp, #0]
        movs r5, #0
        bl {P}uart_getc
        mov r6, r0
        bl {P}uart_getc
        movs r1, #8
{P}rr_hi:
        adds r0, r0, r0
        subs r1, #1
        bne {P}rr_hi
        adds r6, r6, r0
        movs r7, #0
        cmp r6, #0
        beq {P}rr_end
        bl {P}uart_getc
        mov r7, r0
        subs r6, #1
{P}rr_loop:
        cmp r6, #0
        beq {P}rr_end
        bl {P}uart_getc
        subs r6, #1
        ldr r1, [sp, #0]
        cmp r1, #0
        beq {P}rr_loop
        subs r1, #1
        str r1, [sp, #0]
        adds r2, r4, r5
        strb r0, [r2, #0]
        adds r5, #1
        b {P}rr_loop
{P}rr_end:
        adds r2, r4, r5
        movs r0, #0
        strb r0, [r2, #0]
        mov r0, r7
        mov r1, r5
        add sp, #8
        pop {r4-r7, pc}

{P}sys_exit:
        bkpt #2
)";

// String routines. strcpy has no bound by design.
inline constexpr std::string_view kStrings = R"(
{P}print_string:
        push {r4, lr}
        mov r4, r0
{P}ps_loop:
        ldrb r0, [r4, #0]
        cmp r0, #0
        beq {P}ps_done
        bl {P}uart_putc
        adds r4, #1
        b {P}ps_loop
{P}ps_done:
        pop {r4, pc}

{P}strcpy:
        mov r2, r0
{P}sc_loop:
        ldrb r3, [r1, #0]
        strb r3, [r2, #0]
        adds r1, #1
        adds r2, #1
        cmp r3, #0
        bne {P}sc_loop
        bx lr

{P}memcpy:
        mov r12, r0
        cmp r2, #0
        beq {P}mc_done
{P}mc_loop:
        ldrb r3, [r1, #0]
        strb r3, [r0, #0]
        adds r0, #1
        adds r1, #1
        subs r2, #1
        bne {P}mc_loop
{P}mc_done:
        mov r0, r12
        bx lr
)";

// printf(fmt, ...) with %x %d %c %s %% and an optional '0' flag plus one
// width digit. Arguments are the words directly above this frame: 20 bytes
// of scratch plus 20 of saved registers.
//
// Scratch: [sp+0] digit cursor, [sp+4] pending sign, [sp+8..sp+19) digit
// text and its NUL.
// The subset has no shifts or logic ops, so hex digits are peeled by
// doubling through the carry and decimal digits by adding negated powers
// of ten.
inline constexpr std::string_view kPrintf = R"(
{P}printf:
        push {r4-r7, lr}
        sub sp, #20
        mov r4, r0
        add r5, sp, #40
{P}pf_loop:
        ldrb r0, [r4, #0]
        adds r4, #1
        cmp r0, #0
        beq {P}pf_done
        cmp r0, #'%'
        beq {P}pf_spec
{P}pf_emit:
        bl {P}uart_putc
        b {P}pf_loop
{P}pf_done:
        add sp, #20
        pop {r4-r7, pc}
{P}pf_spec:
        movs r0, #0
        str r0, [sp, #4]
        ldrb r0, [r4, #0]
        adds r4, #1
        movs r6, #0
        movs r7, #' '
        cmp r0, #'0'
        bne {P}pf_width
        movs r7, #'0'
        ldrb r0, [r4, #0]
        adds r4, #1
{P}pf_width:
        cmp r0, #'1'
        blt {P}pf_conv
        cmp r0, #'9'
        bgt {P}pf_conv
        mov r6, r0
        subs r6, #'0'
        ldrb r0, [r4, #0]
        adds r4, #1
{P}pf_conv:
        cmp r0, #'x'
        beq {P}pf_hex
        cmp r0, #'d'
        beq {P}pf_dec_far
        cmp r0, #'c'
        beq {P}pf_chr
        cmp r0, #'s'
        beq {P}pf_str
        cmp r0, #'%'
        beq {P}pf_emit
        cmp r0, #0
        beq {P}pf_done
        mov r6, r0
        movs r0, #'%'
        bl {P}uart_putc
        mov r0, r6
        b {P}pf_emit
{P}pf_dec_far:
        b {P}pf_dec
{P}pf_chr:
        ldr r0, [r5, #0]
        adds r5, #4
        b {P}pf_emit
{P}pf_str:
        ldr r0, [r5, #0]
        adds r5, #4
        bl {P}print_string
        b {P}pf_loop
{P}pf_hex:
        ldr r0, [r5, #0]
        adds r5, #4
        add r1, sp, #8
        movs r3, #8
{P}pf_hnib:
        movs r2, #0
        adds r0, r0, r0
        bcc {P}pf_hb1
        adds r2, #1
{P}pf_hb1:
        adds r2, r2, r2
        adds r0, r0, r0
        bcc {P}pf_hb2
        adds r2, #1
{P}pf_hb2:
        adds r2, r2, r2
        adds r0, r0, r0
        bcc {P}pf_hb3
        adds r2, #1
{P}pf_hb3:
        adds r2, r2, r2
        adds r0, r0, r0
        bcc {P}pf_hb4
        adds r2, #1
{P}pf_hb4:
        cmp r2, #10
        blt {P}pf_hdig
        adds r2, #39            ; 'a' - '0' - 10
{P}pf_hdig:
        adds r2, #'0'
        strb r2, [r1, #0]
        adds r1, #1
        subs r3, #1
        bne {P}pf_hnib
        strb r3, [r1, #0]
        movs r3, #8
        add r1, sp, #8
{P}pf_skip:                     ; r1 first digit, r3 digit count
        cmp r3, #1
        beq {P}pf_padcalc
        ldrb r0, [r1, #0]
        cmp r0, #'0'
        bne {P}pf_padcalc
        adds r1, #1
        subs r3, #1
        b {P}pf_skip
{P}pf_padcalc:
        str r1, [sp, #0]
{P}pf_pcl:
        cmp r3, #0
        beq {P}pf_sign
        subs r6, #1
        subs r3, #1
        b {P}pf_pcl
{P}pf_sign:                     ; a '-' goes before zero padding, after spaces
        ldr r0, [sp, #4]
        cmp r0, #0
        beq {P}pf_pad
        subs r6, #1
        cmp r7, #'0'
        bne {P}pf_pad
        bl {P}uart_putc
        movs r0, #0
        str r0, [sp, #4]
{P}pf_pad:
        cmp r6, #0
        ble {P}pf_digits
        mov r0, r7
        bl {P}uart_putc
        subs r6, #1
        b {P}pf_pad
{P}pf_digits:
        ldr r0, [sp, #4]
        cmp r0, #0
        beq {P}pf_text
        bl {P}uart_putc
{P}pf_text:
        ldr r0, [sp, #0]
        bl {P}print_string
        b {P}pf_loop
{P}pf_dec:
        ldr r0, [r5, #0]
        adds r5, #4
        cmp r0, #0
        bge {P}pf_dpos
        movs r1, #'-'
        str r1, [sp, #4]
        movs r1, #0             ; r1 = r0 * (2^32 - 1) = -r0
        movs r2, #32
{P}pf_neg:
        adds r1, r1, r0
        adds r0, r0, r0
        subs r2, #1
        bne {P}pf_neg
        mov r0, r1
{P}pf_dpos:
        push {r6, r7}
        add r2, sp, #16
        adr r1, {P}pf_pow
        movs r3, #10
{P}pf_dpow:
        movs r6, #'0'
{P}pf_dsub:
        ldr r7, [r1, #0]
        adds r7, r0, r7
        bcc {P}pf_dput
        mov r0, r7
        adds r6, #1
        b {P}pf_dsub
{P}pf_dput:
        strb r6, [r2, #0]
        adds r2, #1
        adds r1, #4
        subs r3, #1
        bne {P}pf_dpow
        strb r3, [r2, #0]
        pop {r6, r7}
        movs r3, #10
        add r1, sp, #8
        b {P}pf_skip
        .align 4
{P}pf_pow:
        .word -1000000000, -100000000, -10000000, -1000000, -100000
        .word -10000, -1000, -100, -10, -1
)";

// First-fit heap over a circular free list headed by the sentinel
// {P}heap_bin. Chunk: [prev_size][size | in_use][payload...]; a free chunk
// keeps fd at +8 and bk at +12. free() merges only with the following
// chunk, which it detaches with the unchecked unlink below. The heap ends
// in an 8-byte in-use marker chunk so the forward merge always stops.
inline constexpr std::string_view kHeap = R"(
{P}heap_init:
        ldr r0, {P}hp_bin
        ldr r1, {P}hp_base
        ldr r2, {P}hp_size
        movs r3, #0
        str r3, [r0, #0]
        str r3, [r0, #4]
        str r1, [r0, #8]
        str r1, [r0, #12]
        str r3, [r1, #0]
        str r2, [r1, #4]
        str r0, [r1, #8]
        str r0, [r1, #12]
        adds r3, r1, r2
        str r2, [r3, #0]
        movs r2, #9
        str r2, [r3, #4]
        bx lr

{P}unlink:                      ; r0 chunk
        ldr r1, [r0, #8]
        ldr r2, [r0, #12]
        str r2, [r1, #12]       ; fd->bk = bk
        str r1, [r2, #8]        ; bk->fd = fd
        bx lr

{P}bin_insert:                  ; r0 chunk, inserted at the head
        ldr r1, {P}hp_bin
        ldr r2, [r1, #8]
        str r2, [r0, #8]
        str r1, [r0, #12]
        str r0, [r2, #12]
        str r0, [r1, #8]
        bx lr

{P}malloc:                      ; r0 size -> r0 payload or 0
        push {r4-r7, lr}
        movs r4, #16
        ldr r5, {P}hp_m16
        subs r0, #7
        subs r0, #1
{P}ml_round:
        cmp r0, #0
        ble {P}ml_search
        subs r0, #8
        adds r4, #8
        subs r5, #8
        b {P}ml_round
{P}ml_search:
        ldr r7, {P}hp_bin
        ldr r6, [r7, #8]
{P}ml_next:
        ldr r1, {P}hp_nbin
        adds r1, r1, r6
        beq {P}ml_oom
        ldr r1, [r6, #4]
        adds r2, r1, r5
        bcs {P}ml_fit
        ldr r6, [r6, #8]
        b {P}ml_next
{P}ml_oom:
        movs r0, #0
        pop {r4-r7, pc}
{P}ml_fit:
        mov r7, r2
        mov r0, r6
        bl {P}unlink
        cmp r7, #16
        blt {P}ml_whole
        adds r1, r6, r4
        str r4, [r1, #0]
        str r7, [r1, #4]
        mov r0, r1
        bl {P}bin_insert
        adds r4, #1
        str r4, [r6, #4]
        b {P}ml_ret
{P}ml_whole:
        adds r4, r4, r7
        adds r4, #1
        str r4, [r6, #4]
{P}ml_ret:
        adds r0, r6, #7
        adds r0, #1
        pop {r4-r7, pc}

{P}free:                        ; r0 payload
        push {r4, r5, lr}
        cmp r0, #0
        beq {P}fr_ret
        subs r4, r0, #7
        subs r4, #1
        ldr r5, [r4, #4]
        subs r5, #1
        adds r0, r4, r5
        ldr r1, [r0, #4]
        movs r2, #31            ; move bit 0 of the neighbour's size to bit 31
{P}fr_bit:
        adds r1, r1, r1
        subs r2, #1
        bne {P}fr_bit
        cmp r1, #0
        bne {P}fr_store
        ldr r1, [r0, #4]
        adds r5, r5, r1
        bl {P}unlink
{P}fr_store:
        str r5, [r4, #4]
        mov r0, r4
        bl {P}bin_insert
{P}fr_ret:
        pop {r4, r5, pc}
        .align 4
{P}hp_bin:
        .word {P}heap_bin
{P}hp_nbin:
        .word -{P}heap_bin
{P}hp_base:
        .word {P}heap_base
{P}hp_size:
        .word {P}HEAP_SIZE - 8
{P}hp_m16:
        .word -16
)";

} // namespace tzm::guest

#endif // TZM_GUEST_LIB_HPP

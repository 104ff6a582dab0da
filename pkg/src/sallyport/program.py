"""Generation of the machine programs the simulator runs.

Everything executable is produced here as raw RV64 code: the monitor P
(boot, trap handling, the compartment hand-off tail), the transition page,
firmware images in several behavioral variants, the S/U operating system,
and enclave bodies. The images are plain octet strings placed into memory
by the machine wrapper; symbol addresses travel alongside them.

Protocol-critical placement rules enforced here:

* P's hand-off to firmware ends with the ``pmpcfg0`` write in the final
  word of P's code region, so retiring it falls through into firmware's
  first instruction with no intervening fetch under P's view.
* Firmware's final word is the exit stub ``csrwi pmpcfg0, 0``; retiring it
  falls through into the transition page, whose own grant is the only PMP
  entry left standing.
* The transition page re-establishes P's view. Its safe ordering disables
  interrupts before touching any state; the vulnerable ordering (kept for
  the attack catalog) restores the PMP view first and masks interrupts two
  instructions too late.

Register discipline across the P/F boundary: firmware only ever sees the
request registers a0-a2 plus the scratch registers the hand-off tail itself
consumed (which hold public constants); everything else is zeroed. Results
coming back are range-clamped before any S/U context sees them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from . import isa
from .layout import (
    ENTRY_F_CODE,
    ENTRY_F_DATA,
    ENTRY_OS,
    ENTRY_P_CODE,
    ENTRY_P_DATA,
    ENTRY_TRANSITION,
    CompartmentLayout,
    LOCKDOWN_MSECCFG,
    cfg_register_value,
    enclave_cfg_bytes,
    firmware_cfg0,
    principal_cfg_bytes,
    principal_cfg0,
)
from .scanner import SPENTRY_BYTES

MASK64 = (1 << 64) - 1

# Request codes on the P -> F register interface (a0).
REQ_INIT = 1
REQ_SERVE = 2
REQ_TIMER = 3
REQ_TRAP = 4

# S/U ecall service codes (a7).
SVC_FW_SERVICE = 0x08
SVC_ENCL_CREATE = 0x20
SVC_ENCL_DELETE = 0x21
SVC_ENCL_ENTER = 0x22
SVC_ENCL_EXIT = 0x23
SVC_ENCL_OCALL = 0x24
SVC_ENCL_OCALL_RET = 0x25
SVC_STOP = 0x7F

# Markers P delivers to the OS in a0.
MARK_ENCLAVE_TIMEOUT = 0xE
MARK_ENCLAVE_FAULTED = 0xF
MARK_OCALL = 0xC
MARK_BAD_REQUEST = 0xEE
MARK_FAULT_SKIPPED = 0x51

RESULT_CLAMP = 0xFF  # service results are one octet by interface contract

# P's private data block offsets (within p_data).
LIVE_FRAME = 0x000      # GPR file of the interrupted context
CTX_OS = 0x100          # saved OS frame
CTX_ENCLAVE = 0x200     # saved enclave frame
ST_IN_EXCHANGE = 0x300
ST_EXCHANGE_KIND = 0x308
ST_DOMAIN = 0x310       # 0 = OS/app, 1 = enclave
ST_ACTIVE_ENCLAVE = 0x318
ST_CREATED_MASK = 0x320
ST_OS_RESUME = 0x328
ST_ENC_RESUME = 0x330
ST_LAST_FAULT = 0x338

# Offset of the OS result journal inside the OS region.
RESULTS_OFFSET = 0x1800

REG = {name: i for i, name in enumerate(
    "zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
    "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6".split())}


class ProgramError(ValueError):
    pass


class ProgramBuilder:
    """Sequential emitter with labels, forward references and li synthesis."""

    def __init__(self, base: int, capacity: int | None = None):
        self.base = base
        self.capacity = capacity
        self.buf = bytearray()
        self.labels: dict = {}
        self._fixups: list = []

    @property
    def pos(self) -> int:
        return len(self.buf)

    @property
    def here(self) -> int:
        return self.base + len(self.buf)

    def label(self, name: str) -> int:
        if name in self.labels:
            raise ProgramError(f"label {name!r} redefined")
        self.labels[name] = self.here
        return self.here

    def emit(self, mnemonic: str, **kw) -> None:
        self.buf += isa.encode(mnemonic, **kw)

    def emit_raw(self, data: bytes) -> None:
        self.buf += data

    def jump(self, target: str, rd: int = 0) -> None:
        self._fixups.append((self.pos, "jal", (rd,), target))
        self.emit("jal", rd=rd, imm=0)

    def call(self, target: str) -> None:
        self.jump(target, rd=REG["ra"])

    def branch(self, mnemonic: str, rs1: int, rs2: int, target: str) -> None:
        self._fixups.append((self.pos, mnemonic, (rs1, rs2), target))
        self.emit(mnemonic, rs1=rs1, rs2=rs2, imm=0)

    def ret(self) -> None:
        self.emit("jalr", rd=0, rs1=REG["ra"], imm=0)

    def li(self, rd: int, value: int) -> None:
        v = value & MASK64
        if v >> 63:
            v -= 1 << 64
        self._li_signed(rd, v)

    def _li_signed(self, rd: int, v: int) -> None:
        if -2048 <= v < 2048:
            self.emit("addi", rd=rd, rs1=0, imm=v)
            return
        low = ((v & 0xFFF) ^ 0x800) - 0x800
        self._li_signed(rd, (v - low) >> 12)
        self.emit("slli", rd=rd, rs1=rd, imm=12)
        if low:
            self.emit("addi", rd=rd, rs1=rd, imm=low)

    def la(self, rd: int, target: str) -> None:
        """Fixed two-word address load, patchable for forward references."""
        self._fixups.append((self.pos, "la", (rd,), target))
        self.emit("lui", rd=rd, imm=0)
        self.emit("addi", rd=rd, rs1=rd, imm=0)

    def pad_to(self, offset: int) -> None:
        if offset < self.pos or offset % 4:
            raise ProgramError(f"cannot pad from {self.pos:#x} to {offset:#x}")
        self.buf += isa.encode("nop") * ((offset - self.pos) // 4)

    def finish(self) -> bytes:
        for pos, kind, regs, target in self._fixups:
            if target not in self.labels:
                raise ProgramError(f"undefined label {target!r}")
            addr = self.labels[target]
            if kind == "la":
                low = ((addr & 0xFFF) ^ 0x800) - 0x800
                hi = (addr - low) >> 12
                patch = isa.encode("lui", rd=regs[0], imm=hi & 0xFFFFF)
                patch += isa.encode("addi", rd=regs[0], rs1=regs[0], imm=low)
            elif kind == "jal":
                patch = isa.encode("jal", rd=regs[0], imm=addr - (self.base + pos))
            else:
                patch = isa.encode(kind, rs1=regs[0], rs2=regs[1],
                                   imm=addr - (self.base + pos))
            self.buf[pos:pos + len(patch)] = patch
        self._fixups.clear()
        if self.capacity is not None:
            if self.pos > self.capacity:
                raise ProgramError(
                    f"image at {self.base:#x} needs {self.pos:#x} octets, "
                    f"capacity {self.capacity:#x}")
            self.pad_to(self.capacity)
        return bytes(self.buf)


def _frame_offset(reg: int) -> int:
    assert 1 <= reg <= 31
    return 8 * (reg - 1)


@dataclass
class SystemImages:
    p_code: bytes
    f_code: bytes
    transition: bytes
    os: bytes
    enclaves: tuple
    symbols: dict = field(default_factory=dict)
    os_slots: dict = field(default_factory=dict)


F_VARIANTS = (
    "benign",
    "iago",
    "forged_resume",
    "probe_read_p_data",
    "probe_write_p_data",
    "probe_read_p_code",
    "probe_write_p_code",
    "probe_exec_p_code",
    "probe_exec_transition",
    "probe_read_os",
    "probe_write_os",
    "probe_read_enclave",
    "probe_write_own_code",
    "probe_exec_own_data",
    "gadget_mtvec",
    "gadget_pmp_carrier",
)

OS_VARIANTS = (
    "nominal",
    "service_only",
    "enclave_round",
    "ocall_round",
    "probe_pmp_write",
    "probe_mtvec_write",
    "probe_jump_to_f",
    "probe_read_p_data",
    "probe_read_f_data",
    "spin",
)

ENCLAVE_VARIANTS = ("compute", "ocall", "snoop_sibling", "snoop_os", "snoop_p_data")


def generate_system(layout: CompartmentLayout, *,
                    f_variant: str = "benign",
                    os_variant: str = "nominal",
                    enclave_variants: tuple = (),
                    vulnerable_transition: bool = False,
                    f_image: Optional[bytes] = None,
                    f_handler_offset: int = 0) -> SystemImages:
    """Build all images for one machine configuration.

    ``f_image`` substitutes an externally supplied firmware blob for the
    generated variant; ``f_handler_offset`` names where, inside that blob,
    its trap handler starts. Admission is still the boot scanner's call.
    """
    if f_variant not in F_VARIANTS:
        raise ProgramError(f"unknown firmware variant {f_variant!r}")
    if os_variant not in OS_VARIANTS:
        raise ProgramError(f"unknown OS variant {os_variant!r}")
    if len(enclave_variants) > len(layout.enclaves):
        raise ProgramError("more enclave programs than enclave regions")
    if len(layout.enclaves) > 2:
        raise ProgramError("the generated monitor supports at most 2 enclaves")

    symbols: dict = {}
    if f_image is not None:
        if len(f_image) > layout.f_code.size:
            raise ProgramError(
                f"firmware image ({len(f_image)} bytes) exceeds its region "
                f"({layout.f_code.size} bytes)")
        if not 0 <= f_handler_offset < layout.f_code.size:
            raise ProgramError("firmware handler offset outside the region")
        f_blob = bytes(f_image).ljust(layout.f_code.size, b"\x00")
        f_symbols = {"f_entry": layout.f_code.base,
                     "f_serve": layout.f_code.base,
                     "f_handler": layout.f_code.base + f_handler_offset}
    else:
        f_blob, f_symbols = _build_firmware(layout, f_variant)
    symbols.update(f_symbols)
    p_blob, p_symbols = _build_monitor(layout, f_symbols["f_handler"])
    symbols.update(p_symbols)
    t_blob, t_symbols = _build_transition(
        layout, p_symbols["p_entry"], p_symbols["p_handler"],
        vulnerable=vulnerable_transition)
    symbols.update(t_symbols)
    os_blob, os_symbols, os_slots = _build_os(layout, os_variant)
    symbols.update(os_symbols)
    enclave_blobs = []
    for k, enclave in enumerate(layout.enclaves):
        variant = enclave_variants[k] if k < len(enclave_variants) else "compute"
        if variant not in ENCLAVE_VARIANTS:
            raise ProgramError(f"unknown enclave variant {variant!r}")
        blob, e_symbols = _build_enclave(layout, k, variant)
        symbols.update(e_symbols)
        enclave_blobs.append(blob)
    symbols["spentry"] = layout.spentry_address
    symbols["results"] = layout.os.base + RESULTS_OFFSET
    return SystemImages(p_code=p_blob, f_code=f_blob, transition=t_blob,
                        os=os_blob, enclaves=tuple(enclave_blobs),
                        symbols=symbols, os_slots=os_slots)


# --- the monitor ------------------------------------------------------------


def _build_monitor(layout: CompartmentLayout, f_handler: int):
    b = ProgramBuilder(layout.p_code.base, layout.p_code.size)
    t0, t1, t2, t3, t4, t5, t6 = (REG[r] for r in ("t0", "t1", "t2", "t3",
                                                   "t4", "t5", "t6"))
    a0, a1, a2, ra = REG["a0"], REG["a1"], REG["a2"], REG["ra"]
    live = layout.p_data.base + LIVE_FRAME
    state = layout.p_data.base

    def st_store(src_reg: int, offset: int, addr_reg: int = t5) -> None:
        b.li(addr_reg, state)
        b.emit("sd", rs1=addr_reg, rs2=src_reg, imm=offset)

    def st_load(dst_reg: int, offset: int, addr_reg: int = t5) -> None:
        b.li(addr_reg, state)
        b.emit("ld", rd=dst_reg, rs1=addr_reg, imm=offset)

    # ---- reset: program the PMP, lock down, run the init exchange ----
    b.label("reset")
    assignment = {
        ENTRY_OS: layout.os, ENTRY_P_CODE: layout.p_code,
        ENTRY_P_DATA: layout.p_data, ENTRY_F_CODE: layout.f_code,
        ENTRY_F_DATA: layout.f_data, ENTRY_TRANSITION: layout.transition,
    }
    for k, enclave in enumerate(layout.enclaves):
        priv, shared = layout.enclave_slots(k)
        assignment[priv] = enclave.private
        assignment[shared] = enclave.shared
    for entry, region in sorted(assignment.items()):
        b.li(t0, region.addr_register)
        b.emit("csrw", csr=isa.CSR_PMPADDR0 + entry, rs1=t0)
    b.li(t0, cfg_register_value(principal_cfg_bytes(layout), 2))
    b.emit("csrw", csr=isa.CSR_PMPCFG2, rs1=t0)
    b.li(t0, principal_cfg0(layout))
    b.emit("csrw", csr=isa.CSR_PMPCFG0, rs1=t0)
    b.li(t0, LOCKDOWN_MSECCFG)
    b.emit("csrw", csr=isa.CSR_MSECCFG, rs1=t0)
    b.la(t0, "p_handler")
    b.emit("csrw", csr=isa.CSR_MTVEC, rs1=t0)
    b.li(t0, 1 << 7)  # machine timer interrupt source enabled
    b.emit("csrw", csr=isa.CSR_MIE, rs1=t0)
    b.li(t0, live)
    b.emit("csrw", csr=isa.CSR_MSCRATCH, rs1=t0)
    for offset in (ST_IN_EXCHANGE, ST_EXCHANGE_KIND, ST_DOMAIN,
                   ST_ACTIVE_ENCLAVE, ST_CREATED_MASK, ST_ENC_RESUME,
                   ST_LAST_FAULT):
        st_store(0, offset)
    # returning from the init exchange lands the OS at its entry point
    b.li(t0, layout.os.base)
    st_store(t0, ST_OS_RESUME)
    # first mret target mode is S/U with its interrupt state preset
    b.li(t0, (1 << 7) | (0b01 << 11))  # MPIE set, MPP = S/U
    b.emit("csrw", csr=isa.CSR_MSTATUS, rs1=t0)
    b.li(t0, REQ_INIT)
    st_store(t0, ST_EXCHANGE_KIND)
    b.li(t0, 1)
    st_store(t0, ST_IN_EXCHANGE)
    b.li(a0, REQ_INIT)
    b.li(a1, 0)
    b.li(a2, 0)
    b.jump("enter_f")

    # ---- frame copy helper: t0 = source base, t1 = destination base ----
    b.label("copy_frame")
    b.li(t2, 31)
    b.label("copy_frame_loop")
    b.emit("ld", rd=t3, rs1=t0, imm=0)
    b.emit("sd", rs1=t1, rs2=t3, imm=0)
    b.emit("addi", rd=t0, rs1=t0, imm=8)
    b.emit("addi", rd=t1, rs1=t1, imm=8)
    b.emit("addi", rd=t2, rs1=t2, imm=-1)
    b.branch("bne", t2, 0, "copy_frame_loop")
    b.ret()

    # ---- restore the principal PMP view (cfg registers only) ----
    b.label("assert_principal_view")
    b.li(t0, principal_cfg0(layout))
    b.emit("csrw", csr=isa.CSR_PMPCFG0, rs1=t0)
    b.li(t0, cfg_register_value(principal_cfg_bytes(layout), 2))
    b.emit("csrw", csr=isa.CSR_PMPCFG2, rs1=t0)
    b.ret()

    # ---- trap handler ----
    b.label("p_handler")
    b.emit("csrrw", rd=t6, csr=isa.CSR_MSCRATCH, rs1=t6)  # t6 <- frame base
    for reg in range(1, 31):
        b.emit("sd", rs1=t6, rs2=reg, imm=_frame_offset(reg))
    b.emit("csrr", rd=t5, csr=isa.CSR_MSCRATCH)            # original t6
    b.emit("sd", rs1=t6, rs2=t5, imm=_frame_offset(31))
    b.emit("csrw", csr=isa.CSR_MSCRATCH, rs1=t6)           # invariant restored

    b.emit("csrr", rd=t0, csr=isa.CSR_MCAUSE)
    b.branch("blt", t0, 0, "timer_trap")
    b.li(t1, 9)
    b.branch("beq", t0, t1, "su_ecall")
    b.li(t1, 11)
    b.branch("beq", t0, t1, "park")  # M-mode ecall cannot reach P's vector
    b.jump("su_fault")

    # ---- S/U ecall dispatch ----
    b.label("su_ecall")
    st_load(t0, ST_DOMAIN)
    b.branch("bne", t0, 0, "enclave_ecall")
    b.li(t4, live)
    b.emit("ld", rd=t0, rs1=t4, imm=_frame_offset(REG["a7"]))
    for code, target in ((SVC_FW_SERVICE, "svc_service"),
                         (SVC_ENCL_CREATE, "svc_create"),
                         (SVC_ENCL_DELETE, "svc_delete"),
                         (SVC_ENCL_ENTER, "svc_enter"),
                         (SVC_ENCL_OCALL_RET, "svc_ocall_ret"),
                         (SVC_STOP, "park")):
        b.li(t1, code)
        b.branch("beq", t0, t1, target)
    b.li(t0, MARK_BAD_REQUEST)
    b.jump("reply_os")

    # deliver t0 to the OS in a0, skipping the ecall (or faulting op)
    b.label("reply_os")
    b.emit("csrr", rd=t1, csr=isa.CSR_MEPC)
    b.emit("addi", rd=t1, rs1=t1, imm=4)
    b.emit("csrw", csr=isa.CSR_MEPC, rs1=t1)
    b.label("reply_os_here")  # entry point when mepc is already correct
    b.li(t4, live)
    b.emit("sd", rs1=t4, rs2=t0, imm=_frame_offset(REG["a0"]))
    b.jump("restore_live")

    # ---- firmware service request from the OS ----
    b.label("svc_service")
    b.emit("csrr", rd=t0, csr=isa.CSR_MEPC)
    b.emit("addi", rd=t0, rs1=t0, imm=4)
    st_store(t0, ST_OS_RESUME)
    b.li(t0, REQ_SERVE)
    st_store(t0, ST_EXCHANGE_KIND)
    b.li(t0, 1)
    st_store(t0, ST_IN_EXCHANGE)
    b.li(t0, live)
    b.li(t1, state + CTX_OS)
    b.call("copy_frame")
    b.li(t4, live)
    b.emit("ld", rd=a1, rs1=t4, imm=_frame_offset(REG["a1"]))
    b.emit("ld", rd=a2, rs1=t4, imm=_frame_offset(REG["a2"]))
    b.li(a0, REQ_SERVE)
    b.jump("enter_f")

    # ---- enclave lifecycle services ----
    b.label("svc_create")
    b.li(t4, live)
    b.emit("ld", rd=t0, rs1=t4, imm=_frame_offset(REG["a0"]))
    b.li(t1, len(layout.enclaves))
    b.branch("bgeu", t0, t1, "svc_bad")
    st_load(t1, ST_CREATED_MASK)
    b.li(t2, 1)
    b.emit("sll", rd=t2, rs1=t2, rs2=t0)
    b.emit("or", rd=t1, rs1=t1, rs2=t2)
    st_store(t1, ST_CREATED_MASK, addr_reg=t4)
    b.li(t0, 0)
    b.jump("reply_os")

    b.label("svc_delete")
    b.li(t4, live)
    b.emit("ld", rd=t0, rs1=t4, imm=_frame_offset(REG["a0"]))
    b.li(t1, len(layout.enclaves))
    b.branch("bgeu", t0, t1, "svc_bad")
    st_load(t1, ST_CREATED_MASK)
    b.li(t2, 1)
    b.emit("sll", rd=t2, rs1=t2, rs2=t0)
    b.emit("xori", rd=t2, rs1=t2, imm=-1)
    b.emit("and", rd=t1, rs1=t1, rs2=t2)
    st_store(t1, ST_CREATED_MASK, addr_reg=t4)
    b.li(t0, 0)
    b.jump("reply_os")

    b.label("svc_bad")
    b.li(t0, MARK_BAD_REQUEST)
    b.jump("reply_os")

    b.label("svc_enter")
    b.li(t4, live)
    b.emit("ld", rd=t0, rs1=t4, imm=_frame_offset(REG["a0"]))
    b.li(t1, len(layout.enclaves))
    b.branch("bgeu", t0, t1, "svc_bad")
    st_load(t1, ST_CREATED_MASK)
    b.emit("srl", rd=t1, rs1=t1, rs2=t0)
    b.emit("andi", rd=t1, rs1=t1, imm=1)
    b.branch("beq", t1, 0, "svc_bad")
    st_store(t0, ST_ACTIVE_ENCLAVE)
    b.emit("csrr", rd=t1, csr=isa.CSR_MEPC)
    b.emit("addi", rd=t1, rs1=t1, imm=4)
    st_store(t1, ST_OS_RESUME)
    b.li(t0, live)
    b.li(t1, state + CTX_OS)
    b.call("copy_frame")
    # wipe the live frame, then seed sp / a0 / a1 for a fresh enclave start
    b.li(t4, live)
    b.li(t2, 31)
    b.label("enter_wipe_loop")
    b.emit("sd", rs1=t4, rs2=0, imm=0)
    b.emit("addi", rd=t4, rs1=t4, imm=8)
    b.emit("addi", rd=t2, rs1=t2, imm=-1)
    b.branch("bne", t2, 0, "enter_wipe_loop")
    st_load(t0, ST_ACTIVE_ENCLAVE)
    b.li(t4, live)
    for k, enclave in enumerate(layout.enclaves):
        b.li(t1, k)
        b.branch("bne", t0, t1, f"enter_skip_{k}")
        b.li(t2, enclave.private.end)
        b.emit("sd", rs1=t4, rs2=t2, imm=_frame_offset(REG["sp"]))
        b.li(t2, enclave.shared.base)
        b.emit("sd", rs1=t4, rs2=t2, imm=_frame_offset(REG["a0"]))
        b.li(t2, enclave.shared.size)
        b.emit("sd", rs1=t4, rs2=t2, imm=_frame_offset(REG["a1"]))
        b.li(t1, cfg_register_value(enclave_cfg_bytes(layout, k), 0))
        b.emit("csrw", csr=isa.CSR_PMPCFG0, rs1=t1)
        b.li(t1, cfg_register_value(enclave_cfg_bytes(layout, k), 2))
        b.emit("csrw", csr=isa.CSR_PMPCFG2, rs1=t1)
        b.li(t1, enclave.private.base)
        b.emit("csrw", csr=isa.CSR_MEPC, rs1=t1)
        b.jump("enter_commit")
        b.label(f"enter_skip_{k}")
    b.jump("svc_bad")
    b.label("enter_commit")
    b.li(t0, 1)
    st_store(t0, ST_DOMAIN)
    b.jump("restore_live")

    # ---- ecalls arriving from an enclave ----
    b.label("enclave_ecall")
    b.li(t4, live)
    b.emit("ld", rd=t0, rs1=t4, imm=_frame_offset(REG["a7"]))
    b.li(t1, SVC_ENCL_EXIT)
    b.branch("beq", t0, t1, "enclave_exit")
    b.li(t1, SVC_ENCL_OCALL)
    b.branch("beq", t0, t1, "enclave_ocall")
    b.li(t0, MARK_BAD_REQUEST)
    b.jump("enclave_exit_with_t0")

    b.label("enclave_exit")
    b.emit("ld", rd=t0, rs1=t4, imm=_frame_offset(REG["a0"]))
    b.emit("andi", rd=t0, rs1=t0, imm=RESULT_CLAMP)
    b.label("enclave_exit_with_t0")
    b.emit("add", rd=REG["s2"], rs1=t0, rs2=0)  # park the reply across calls
    b.call("assert_principal_view")
    b.li(t0, state + CTX_OS)
    b.li(t1, live)
    b.call("copy_frame")
    b.li(t0, 0)
    st_store(t0, ST_DOMAIN)
    st_store(t0, ST_ENC_RESUME)
    st_load(t0, ST_OS_RESUME)
    b.emit("csrw", csr=isa.CSR_MEPC, rs1=t0)
    b.li(t4, live)
    b.emit("sd", rs1=t4, rs2=REG["s2"], imm=_frame_offset(REG["a0"]))
    b.jump("restore_live")

    b.label("enclave_ocall")
    b.emit("csrr", rd=t0, csr=isa.CSR_MEPC)
    b.emit("addi", rd=t0, rs1=t0, imm=4)
    st_store(t0, ST_ENC_RESUME)
    b.li(t0, live)
    b.li(t1, state + CTX_ENCLAVE)
    b.call("copy_frame")
    b.call("assert_principal_view")
    b.li(t4, live)
    b.emit("ld", rd=t0, rs1=t4, imm=_frame_offset(REG["a1"]))
    b.emit("andi", rd=t0, rs1=t0, imm=RESULT_CLAMP)
    b.emit("add", rd=REG["s2"], rs1=t0, rs2=0)
    b.li(t0, state + CTX_OS)
    b.li(t1, live)
    b.call("copy_frame")
    b.li(t0, 0)
    st_store(t0, ST_DOMAIN)
    st_load(t0, ST_OS_RESUME)
    b.emit("csrw", csr=isa.CSR_MEPC, rs1=t0)
    b.li(t4, live)
    b.li(t0, MARK_OCALL)
    b.emit("sd", rs1=t4, rs2=t0, imm=_frame_offset(REG["a0"]))
    b.emit("sd", rs1=t4, rs2=REG["s2"], imm=_frame_offset(REG["a1"]))
    b.jump("restore_live")

    b.label("svc_ocall_ret")
    st_load(t0, ST_ENC_RESUME)
    b.branch("beq", t0, 0, "svc_bad")
    b.emit("csrr", rd=t0, csr=isa.CSR_MEPC)
    b.emit("addi", rd=t0, rs1=t0, imm=4)
    st_store(t0, ST_OS_RESUME)
    b.li(t0, live)
    b.li(t1, state + CTX_OS)
    b.call("copy_frame")
    b.li(t4, live)
    b.emit("ld", rd=REG["s2"], rs1=t4, imm=_frame_offset(REG["a1"]))
    b.emit("andi", rd=REG["s2"], rs1=REG["s2"], imm=RESULT_CLAMP)
    b.li(t0, state + CTX_ENCLAVE)
    b.li(t1, live)
    b.call("copy_frame")
    st_load(t0, ST_ACTIVE_ENCLAVE)
    for k, enclave in enumerate(layout.enclaves):
        b.li(t1, k)
        b.branch("bne", t0, t1, f"ocall_ret_skip_{k}")
        b.li(t1, cfg_register_value(enclave_cfg_bytes(layout, k), 0))
        b.emit("csrw", csr=isa.CSR_PMPCFG0, rs1=t1)
        b.li(t1, cfg_register_value(enclave_cfg_bytes(layout, k), 2))
        b.emit("csrw", csr=isa.CSR_PMPCFG2, rs1=t1)
        b.jump("ocall_ret_commit")
        b.label(f"ocall_ret_skip_{k}")
    b.jump("svc_bad")
    b.label("ocall_ret_commit")
    b.li(t0, 1)
    st_store(t0, ST_DOMAIN)
    st_load(t0, ST_ENC_RESUME)
    b.emit("csrw", csr=isa.CSR_MEPC, rs1=t0)
    b.li(t1, 0)
    st_store(t1, ST_ENC_RESUME)
    b.li(t4, live)
    b.emit("sd", rs1=t4, rs2=REG["s2"], imm=_frame_offset(REG["a0"]))
    b.jump("restore_live")

    # ---- timer interrupt ----
    b.label("timer_trap")
    st_load(t0, ST_DOMAIN)
    b.branch("bne", t0, 0, "timer_from_enclave")
    # the OS was running: give firmware its slice, then resume the same pc
    b.emit("csrr", rd=t0, csr=isa.CSR_MEPC)
    st_store(t0, ST_OS_RESUME)
    b.li(t0, REQ_TIMER)
    st_store(t0, ST_EXCHANGE_KIND)
    b.li(t0, 1)
    st_store(t0, ST_IN_EXCHANGE)
    b.li(t0, live)
    b.li(t1, state + CTX_OS)
    b.call("copy_frame")
    b.li(a0, REQ_TIMER)
    b.li(a1, 0)
    b.li(a2, 0)
    b.jump("enter_f")

    b.label("timer_from_enclave")
    # preempt the enclave and hand the OS its timeout marker; no firmware
    b.call("assert_principal_view")
    b.li(t0, state + CTX_OS)
    b.li(t1, live)
    b.call("copy_frame")
    b.li(t0, 0)
    st_store(t0, ST_DOMAIN)
    st_store(t0, ST_ENC_RESUME)
    st_load(t0, ST_OS_RESUME)
    b.emit("csrw", csr=isa.CSR_MEPC, rs1=t0)
    b.li(t4, live)
    b.li(t0, MARK_ENCLAVE_TIMEOUT)
    b.emit("sd", rs1=t4, rs2=t0, imm=_frame_offset(REG["a0"]))
    b.jump("restore_live")

    # ---- synchronous faults from S/U ----
    b.label("su_fault")
    b.emit("csrr", rd=t0, csr=isa.CSR_MCAUSE)
    st_store(t0, ST_LAST_FAULT)
    st_load(t1, ST_DOMAIN)
    b.branch("bne", t1, 0, "enclave_fault")
    b.li(t1, 1)
    b.branch("beq", t0, t1, "os_fetch_fault")
    # a data or illegal-instruction fault: skip it, hand back a marker
    b.li(t0, MARK_FAULT_SKIPPED)
    b.jump("reply_os")
    b.label("os_fetch_fault")
    # mepc names the unfetchable target; unwind to the OS's return address
    b.li(t4, live)
    b.emit("ld", rd=t1, rs1=t4, imm=_frame_offset(REG["ra"]))
    b.emit("csrw", csr=isa.CSR_MEPC, rs1=t1)
    b.li(t0, MARK_FAULT_SKIPPED)
    b.jump("reply_os_here")

    b.label("enclave_fault")
    # scrub everything, report the cause to firmware, then tear down
    b.li(t0, REQ_TRAP)
    st_store(t0, ST_EXCHANGE_KIND)
    b.li(t0, 1)
    st_store(t0, ST_IN_EXCHANGE)
    b.emit("csrr", rd=a1, csr=isa.CSR_MCAUSE)
    b.emit("andi", rd=a1, rs1=a1, imm=0xF)
    b.li(a0, REQ_TRAP)
    b.li(a2, 0)
    b.jump("enter_f")

    # ---- return from firmware (jumped to by the transition page) ----
    b.label("p_entry")
    st_load(t0, ST_IN_EXCHANGE)
    b.branch("beq", t0, 0, "park")  # resume forged outside any exchange
    st_store(0, ST_IN_EXCHANGE)
    b.emit("andi", rd=a0, rs1=a0, imm=RESULT_CLAMP)
    b.emit("add", rd=REG["s2"], rs1=a0, rs2=0)
    b.call("assert_principal_view")
    st_load(t0, ST_EXCHANGE_KIND)
    b.li(t1, REQ_TRAP)
    b.branch("bne", t0, t1, "p_entry_no_teardown")
    # the faulting enclave is destroyed after firmware was notified
    st_load(t1, ST_ACTIVE_ENCLAVE)
    b.li(t2, 1)
    b.emit("sll", rd=t2, rs1=t2, rs2=t1)
    b.emit("xori", rd=t2, rs1=t2, imm=-1)
    st_load(t1, ST_CREATED_MASK)
    b.emit("and", rd=t1, rs1=t1, rs2=t2)
    st_store(t1, ST_CREATED_MASK)
    b.li(t1, 0)
    st_store(t1, ST_DOMAIN)
    st_store(t1, ST_ENC_RESUME)
    b.label("p_entry_no_teardown")
    b.li(t0, state + CTX_OS)
    b.li(t1, live)
    b.call("copy_frame")
    st_load(t0, ST_EXCHANGE_KIND)
    b.li(t1, REQ_SERVE)
    b.branch("bne", t0, t1, "p_entry_no_result")
    b.li(t4, live)
    b.emit("sd", rs1=t4, rs2=REG["s2"], imm=_frame_offset(REG["a0"]))
    b.label("p_entry_no_result")
    b.li(t1, REQ_TRAP)
    b.branch("bne", t0, t1, "p_entry_no_fault_mark")
    b.li(t4, live)
    b.li(t1, MARK_ENCLAVE_FAULTED)
    b.emit("sd", rs1=t4, rs2=t1, imm=_frame_offset(REG["a0"]))
    b.label("p_entry_no_fault_mark")
    st_load(t0, ST_OS_RESUME)
    b.emit("csrw", csr=isa.CSR_MEPC, rs1=t0)
    b.jump("restore_live")

    # ---- restore the live frame and leave machine mode ----
    b.label("restore_live")
    # every monitor exit lands in S/U: a timer slice taken while firmware
    # ran leaves MPP naming machine mode, and honoring that would drop the
    # OS into M, so the privilege stack is forced before the mret
    b.li(t0, (1 << 7) | (0b01 << 11))
    b.emit("csrw", csr=isa.CSR_MSTATUS, rs1=t0)
    b.li(t6, live)
    for reg in range(1, 31):
        b.emit("ld", rd=reg, rs1=t6, imm=_frame_offset(reg))
    b.emit("ld", rd=t6, rs1=t6, imm=_frame_offset(31))
    b.emit("mret")

    # ---- terminal state: scenario runs end here ----
    b.label("park")
    b.emit("wfi")
    b.jump("park")

    # ---- hand-off tail: must end exactly at the region's final word ----
    tail = ProgramBuilder(0)
    tail_t = _emit_enter_f_tail(tail, layout, f_handler, dry=True)
    start = layout.p_code.size - len(tail_t)
    if b.pos > start:
        raise ProgramError("monitor body overlaps its hand-off tail")
    b.pad_to(start)
    b.label("enter_f")
    _emit_enter_f_tail(b, layout, f_handler)
    assert b.pos == layout.p_code.size

    blob = b.finish()
    names = ("reset", "p_handler", "p_entry", "park", "enter_f",
             "restore_live")
    return blob, {name: b.labels[name] for name in names}


_SCRUB_KEEP = {REG["a0"], REG["a1"], REG["a2"], REG["t0"], REG["t1"], REG["t2"]}


def _emit_enter_f_tail(b: ProgramBuilder, layout: CompartmentLayout,
                       f_handler: int, dry: bool = False) -> bytes:
    """Scrub, then flip the machine into firmware's view.

    Ordering is load-bearing: the trap vector moves to firmware's handler
    first, then P's data entry is retargeted over the transition page as an
    all-deny rule, and the cfg write that grants firmware's regions retires
    as the final word of P's code so execution falls through into firmware.
    The scratch registers t0-t2 are overwritten by the sequence itself and
    carry only public constants into firmware.
    """
    t0, t1, t2 = REG["t0"], REG["t1"], REG["t2"]
    for reg in range(1, 32):
        if reg not in _SCRUB_KEEP:
            b.emit("addi", rd=reg, rs1=0, imm=0)
    b.li(t0, f_handler)
    b.emit("csrw", csr=isa.CSR_MTVEC, rs1=t0)
    b.li(t1, layout.transition.addr_register)
    b.emit("csrw", csr=isa.CSR_PMPADDR0 + ENTRY_P_DATA, rs1=t1)
    b.li(t2, firmware_cfg0(layout))
    b.emit("csrw", csr=isa.CSR_PMPCFG0, rs1=t2)
    return bytes(b.buf) if dry else b""


# --- the transition page ----------------------------------------------------


def _build_transition(layout: CompartmentLayout, p_entry: int, p_handler: int,
                      *, vulnerable: bool):
    b = ProgramBuilder(layout.transition.base, layout.transition.size)
    t0, t1, t2 = REG["t0"], REG["t1"], REG["t2"]
    b.label("transition_restore")

    def disable_interrupts():
        b.emit("csrci", csr=isa.CSR_MSTATUS, uimm=8)

    def restore_vector():
        b.li(t0, p_handler)
        b.emit("csrw", csr=isa.CSR_MTVEC, rs1=t0)

    def restore_pmp():
        b.li(t1, layout.p_data.addr_register)
        b.emit("csrw", csr=isa.CSR_PMPADDR0 + ENTRY_P_DATA, rs1=t1)
        b.li(t2, principal_cfg0(layout))
        b.emit("csrw", csr=isa.CSR_PMPCFG0, rs1=t2)

    if vulnerable:
        # the window: PMP already grants P's regions, yet interrupts are
        # still live and the trap vector still names firmware's handler
        restore_pmp()
        disable_interrupts()
        restore_vector()
    else:
        disable_interrupts()
        restore_vector()
        restore_pmp()
    b.li(t0, p_entry)
    b.emit("jalr", rd=0, rs1=t0, imm=0)
    blob = b.finish()
    return blob, {"transition_restore": layout.transition.base}


# --- firmware images ----------------------------------------------------


def _build_firmware(layout: CompartmentLayout, variant: str):
    b = ProgramBuilder(layout.f_code.base, layout.f_code.size)
    t0, t1 = REG["t0"], REG["t1"]
    a0, a1, a2, sp = REG["a0"], REG["a1"], REG["a2"], REG["sp"]

    # fall-through entry point: P's cfg write retires and execution lands here
    b.label("f_entry")
    b.emit("csrsi", csr=isa.CSR_MSTATUS, uimm=8)  # stay preemptible
    b.li(sp, layout.f_data.end)
    for code, target in ((REQ_INIT, "f_init"), (REQ_SERVE, "f_serve"),
                         (REQ_TIMER, "f_timer"), (REQ_TRAP, "f_trap")):
        b.li(t0, code)
        b.branch("beq", a0, t0, target)
    b.li(a0, 0)
    b.jump("f_exit")

    b.label("f_init")
    b.li(t0, layout.f_data.base)
    b.li(t1, 0x600D)
    b.emit("sd", rs1=t0, rs2=t1, imm=0)
    b.li(a0, 0)
    b.jump("f_exit")

    b.label("f_serve")
    if variant == "iago":
        # lie as loudly as possible: the result register carries 64 bits of
        # attacker-chosen garbage back toward the OS
        b.li(a0, 0xDEAD_BEEF_1234_5678)
        b.jump("f_exit")
    elif variant == "forged_resume":
        # bail out mid-request with saved-context-looking values planted in
        # callee registers, hoping P trusts registers on the way back in
        b.li(REG["s0"], 0x4141_4141_4141_4141)
        b.li(REG["s1"], 0x4242_4242_4242_4242)
        b.li(REG["ra"], layout.os.base)
        b.li(a0, 0x99)
        b.jump("f_exit")
    elif variant.startswith("probe_"):
        _emit_probe(b, layout, variant)
        b.emit("add", rd=a0, rs1=a1, rs2=a2)
        b.jump("f_exit")
    else:
        b.emit("add", rd=a0, rs1=a1, rs2=a2)
        b.jump("f_exit")

    b.label("f_timer")
    b.li(a0, 0)
    b.jump("f_exit")

    b.label("f_trap")
    # log the reported cause, acknowledge
    b.li(t0, layout.f_data.base)
    b.emit("sd", rs1=t0, rs2=a1, imm=8)
    b.li(a0, 0)
    b.jump("f_exit")

    # traps while firmware runs (its own faults, or a timer slice) land here
    b.label("f_handler")
    b.emit("csrr", rd=t0, csr=isa.CSR_MCAUSE)
    b.li(t1, layout.f_data.base)
    b.emit("sd", rs1=t1, rs2=t0, imm=16)
    b.jump("f_exit")

    b.label("f_exit")
    b.jump("spentry_word")

    if variant == "gadget_mtvec":
        # dead code, never jumped to; the scanner must still refuse it
        b.label("gadget")
        b.emit("csrw", csr=isa.CSR_MTVEC, rs1=t0)
    elif variant == "gadget_pmp_carrier":
        # a PMP write hidden at a halfword-misaligned offset inside a lui
        # immediate; reachable only by jumping into the carrier's middle
        sens = int.from_bytes(
            isa.encode("csrw", csr=isa.CSR_PMPCFG0, rs1=t0), "little")
        b.label("gadget_carrier")
        b.emit_raw((((sens & 0xFFFF) << 16) | (9 << 7) | 0x37).to_bytes(4, "little"))
        b.emit_raw(((0x0001 << 16) | (sens >> 16)).to_bytes(4, "little"))

    b.pad_to(layout.spentry_offset)
    b.label("spentry_word")
    b.emit_raw(SPENTRY_BYTES)
    blob = b.finish()
    symbols = {"f_handler": b.labels["f_handler"], "f_entry": b.labels["f_entry"],
               "f_serve": b.labels["f_serve"]}
    if variant == "gadget_pmp_carrier":
        symbols["gadget_misaligned"] = b.labels["gadget_carrier"] + 2
    return blob, symbols


_PROBE_TARGETS = {
    "probe_read_p_data": ("p_data", "ld"),
    "probe_write_p_data": ("p_data", "sd"),
    "probe_read_p_code": ("p_code", "ld"),
    "probe_write_p_code": ("p_code", "sd"),
    "probe_exec_p_code": ("p_code", "jalr"),
    "probe_exec_transition": ("transition", "jalr"),
    "probe_read_os": ("os", "ld"),
    "probe_write_os": ("os", "sd"),
    "probe_read_enclave": ("enclave0_priv", "ld"),
    "probe_write_own_code": ("f_code", "sd"),
    "probe_exec_own_data": ("f_data", "jalr"),
}


def _emit_probe(b: ProgramBuilder, layout: CompartmentLayout, variant: str) -> None:
    region_name, op = _PROBE_TARGETS[variant]
    if region_name == "enclave0_priv" and not layout.enclaves:
        target = 0x30000  # unmapped space denies just the same
    else:
        target = layout.region_named(region_name).base
    t3, t4 = REG["t3"], REG["t4"]
    b.li(t3, target)
    if op == "ld":
        b.emit("ld", rd=t4, rs1=t3, imm=0)
    elif op == "sd":
        b.emit("sd", rs1=t3, rs2=t3, imm=0)
    else:
        b.emit("jalr", rd=REG["ra"], rs1=t3, imm=0)


# --- the operating system -----------------------------------------------


def _build_os(layout: CompartmentLayout, variant: str):
    b = ProgramBuilder(layout.os.base, layout.os.size // 2)
    t0, s0, s1 = REG["t0"], REG["s0"], REG["s1"]
    a0, a1, a2, a7 = REG["a0"], REG["a1"], REG["a2"], REG["a7"]
    results = layout.os.base + RESULTS_OFFSET
    app = layout.app_window().base
    slots: dict = {}

    def record(name: str, reg: int = a0):
        slots[name] = len(slots)
        b.emit("sd", rs1=s0, rs2=reg, imm=8 * slots[name])

    def ecall(code, **regs):
        for reg_name, value in regs.items():
            b.li(REG[reg_name], value)
        b.li(a7, code)
        b.emit("ecall")

    b.label("os_entry")
    b.li(REG["sp"], layout.os.base + RESULTS_OFFSET - 0x10)
    b.li(s0, results)
    b.li(s1, 0x5151)  # callee-held canary, recorded after each exchange

    if variant in ("nominal", "service_only"):
        ecall(SVC_FW_SERVICE, a0=0, a1=5, a2=7)
        record("service")
        record("service_canary", reg=s1)
    if variant == "nominal":
        # a plain S/U function call into the app window: no machine-mode
        # event is involved in OS <-> app control transfer
        b.li(a0, 33)
        b.li(t0, app)
        b.emit("jalr", rd=REG["ra"], rs1=t0, imm=0)
        record("app")
    if variant in ("nominal", "enclave_round", "ocall_round"):
        ecall(SVC_ENCL_CREATE, a0=0)
        record("create")
        ecall(SVC_ENCL_ENTER, a0=0)
        record("enter")  # exit value, ocall marker, or timeout marker
        # when the enclave made an ocall, answer it and resume the enclave
        b.li(t0, MARK_OCALL)
        b.branch("bne", a0, t0, "os_no_ocall")
        record("ocall_payload", reg=a1)
        ecall(SVC_ENCL_OCALL_RET, a1=0x21)
        record("ocall_final")
        b.label("os_no_ocall")
        ecall(SVC_ENCL_DELETE, a0=0)
        record("delete")
        record("canary", reg=s1)
    if variant == "probe_pmp_write":
        b.li(t0, 0)
        b.emit("csrw", csr=isa.CSR_PMPCFG0, rs1=t0)
        record("probe")
    if variant == "probe_mtvec_write":
        b.li(t0, layout.os.base)
        b.emit("csrw", csr=isa.CSR_MTVEC, rs1=t0)
        record("probe")
    if variant == "probe_jump_to_f":
        b.li(t0, layout.f_code.base)
        b.emit("jalr", rd=REG["ra"], rs1=t0, imm=0)
        record("probe")
    if variant == "probe_read_p_data":
        b.li(t0, layout.p_data.base)
        b.emit("ld", rd=a0, rs1=t0, imm=0)
        record("probe")
    if variant == "probe_read_f_data":
        b.li(t0, layout.f_data.base)
        b.emit("ld", rd=a0, rs1=t0, imm=0)
        record("probe")
    if variant == "spin":
        b.label("os_spin")
        b.jump("os_spin")

    ecall(SVC_STOP)
    b.label("os_trailer")  # unreachable; STOP parks the machine
    b.jump("os_trailer")
    body = b.finish()

    # the app window occupies the upper half of the OS region
    app_builder = ProgramBuilder(app, layout.os.size // 2)
    app_builder.label("app_entry")
    app_builder.emit("addi", rd=a0, rs1=a0, imm=9)
    app_builder.emit("slli", rd=a0, rs1=a0, imm=1)
    app_builder.ret()
    blob = body + app_builder.finish()
    assert len(blob) == layout.os.size
    return blob, {"os_entry": layout.os.base, "app_entry": app,
                  "os_results": results}, slots


# --- enclaves ----------------------------------------------------------------


def _build_enclave(layout: CompartmentLayout, k: int, variant: str):
    enclave = layout.enclaves[k]
    b = ProgramBuilder(enclave.private.base, enclave.private.size)
    t0, t1 = REG["t0"], REG["t1"]
    a0, a1, a7 = REG["a0"], REG["a1"], REG["a7"]

    # entered with sp preset, a0 = shared base, a1 = shared size
    b.label(f"enclave{k}_entry")
    b.emit("sd", rs1=a0, rs2=a1, imm=0)  # touch shared memory: write
    b.emit("ld", rd=t0, rs1=a0, imm=0)   # and read it back

    if variant == "snoop_sibling":
        other = layout.enclaves[1 - k].private.base if len(layout.enclaves) > 1 else 0x38000
        b.li(t1, other)
        b.emit("ld", rd=t0, rs1=t1, imm=0)
    elif variant == "snoop_os":
        b.li(t1, layout.os.base)
        b.emit("ld", rd=t0, rs1=t1, imm=0)
    elif variant == "snoop_p_data":
        b.li(t1, layout.p_data.base)
        b.emit("ld", rd=t0, rs1=t1, imm=0)

    if variant == "ocall":
        b.li(a1, 0x42)
        b.li(a7, SVC_ENCL_OCALL)
        b.emit("ecall")
        # a0 now holds the OS's (clamped) answer
        b.emit("addi", rd=a0, rs1=a0, imm=1)
    else:
        b.li(a0, 0x2A)
    b.li(a7, SVC_ENCL_EXIT)
    b.emit("ecall")
    b.label(f"enclave{k}_spin")  # unreachable: exit never returns here
    b.jump(f"enclave{k}_spin")
    return b.finish(), {f"enclave{k}_entry": enclave.private.base}

"""RV64 instruction decoding, encoding and CSR sensitivity classification.

This module understands exactly the slice of the RV64 instruction set that the
rest of the package needs: CSR accesses (the security-relevant part), loads,
stores, control flow, trap-return/wait primitives, and a coarse bucket for
everything else. Width classification follows the base ISA rule: a parcel
whose low two bits are 0b11 starts a 4-byte instruction, anything else is a
2-byte compressed instruction, and the all-zero parcel is architecturally
illegal. Compressed instructions are decoded only far enough to classify
width, jumps and illegality; there is no compressed CSR form, so they can
never be sensitivity-positive.

Typical use:

    >>> word = encode("csrwi", csr=CSR_PMPCFG0, uimm=0)
    >>> instr = decode(word, 0)
    >>> instr.kind
    <Kind.CSR_READ_WRITE_IMM: ...>
    >>> is_isolation_sensitive(instr)
    <Sensitivity.PMP_WRITE: ...>
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum, auto
from typing import Optional


class Kind(Enum):
    CSR_READ_WRITE = auto()
    CSR_READ_WRITE_IMM = auto()
    CSR_SET = auto()
    CSR_CLEAR = auto()
    LOAD = auto()
    STORE = auto()
    JUMP = auto()
    JUMP_REGISTER = auto()
    BRANCH = auto()
    ECALL = auto()
    MRET = auto()
    WFI = auto()
    ARITHMETIC_OR_OTHER = auto()
    ILLEGAL = auto()


class CsrClass(Enum):
    PMP_CFG = auto()
    PMP_ADDR = auto()
    MSECCFG = auto()
    TRAP_VECTOR = auto()
    OTHER = auto()


class Sensitivity(Enum):
    NONE = auto()
    PMP_WRITE = auto()
    TRAP_VECTOR_WRITE = auto()


# Machine-level CSR addresses. pmpcfg0..15 occupy 0x3A0-0x3AF; on RV64 the
# odd-numbered configuration registers do not exist and executing a write to
# one raises illegal instruction, but the addresses still classify as PMP_CFG
# so the scanner stays conservative about them.
CSR_MSTATUS = 0x300
CSR_MIE = 0x304
CSR_MTVEC = 0x305
CSR_MSCRATCH = 0x340
CSR_MEPC = 0x341
CSR_MCAUSE = 0x342
CSR_MTVAL = 0x343
CSR_MIP = 0x344
CSR_PMPCFG0 = 0x3A0
CSR_PMPCFG2 = 0x3A2
CSR_PMPADDR0 = 0x3B0
CSR_MSECCFG = 0x747

CSR_NAMES = {
    CSR_MSTATUS: "mstatus",
    CSR_MIE: "mie",
    CSR_MTVEC: "mtvec",
    CSR_MSCRATCH: "mscratch",
    CSR_MEPC: "mepc",
    CSR_MCAUSE: "mcause",
    CSR_MTVAL: "mtval",
    CSR_MIP: "mip",
    CSR_MSECCFG: "mseccfg",
}
CSR_NAMES.update({0x3A0 + i: f"pmpcfg{i}" for i in range(16)})
CSR_NAMES.update({0x3B0 + i: f"pmpaddr{i}" for i in range(16)})
CSR_ADDRS = {name: addr for addr, name in CSR_NAMES.items()}


@dataclass(frozen=True)
class CsrAddress:
    """A 12-bit CSR address together with its isolation classification."""

    value: int
    cls: CsrClass
    index: Optional[int] = None

    @property
    def name(self) -> str:
        return CSR_NAMES.get(self.value, f"csr_{self.value:#x}")


def classify_csr(addr: int) -> CsrAddress:
    if 0x3A0 <= addr <= 0x3AF:
        return CsrAddress(addr, CsrClass.PMP_CFG, addr - 0x3A0)
    if 0x3B0 <= addr <= 0x3BF:
        return CsrAddress(addr, CsrClass.PMP_ADDR, addr - 0x3B0)
    if addr == CSR_MSECCFG:
        return CsrAddress(addr, CsrClass.MSECCFG)
    if addr == CSR_MTVEC:
        return CsrAddress(addr, CsrClass.TRAP_VECTOR)
    return CsrAddress(addr, CsrClass.OTHER)


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction.

    ``raw`` keeps the fetched parcel (16 or 32 bits), ``width`` its size in
    octets. Operand fields hold whatever the encoding carries; fields that an
    encoding lacks are zero. ``csr_target`` is set for the four CSR kinds,
    ``source_is_immediate`` distinguishes the uimm forms of set/clear (the
    read-write immediate form has its own kind).
    """

    raw: int
    width: int
    kind: Kind
    csr_target: Optional[CsrAddress] = None
    source_is_immediate: bool = False
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    funct3: int = 0
    funct7: int = 0
    opcode: int = 0

    def mnemonic(self) -> str:
        return _format(self)


class DecodeRangeError(ValueError):
    """Raised when the requested offset has no first parcel inside the blob."""


class UnsupportedInstructionError(ValueError):
    """Raised by encode() for mnemonics or operands outside the supported set."""


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def instruction_width(first_halfword: int) -> int:
    """2 if the parcel starts a compressed instruction, else 4."""
    return 2 if (first_halfword & 0b11) != 0b11 else 4


def decode(blob: bytes, offset: int) -> Instruction:
    """Decode the instruction starting at ``offset`` octets into ``blob``.

    A 2-byte parcel must fit entirely; a 4-byte decode additionally requires
    offset + 4 <= len(blob), otherwise the result is Illegal (width 4, raw
    holding the truncated parcel).
    """
    if offset < 0 or offset + 2 > len(blob):
        raise DecodeRangeError(
            f"offset {offset} leaves no room for a parcel in a {len(blob)}-octet blob"
        )
    (half,) = struct.unpack_from("<H", blob, offset)
    if instruction_width(half) == 2:
        return _decode_compressed(half)
    if offset + 4 > len(blob):
        return Instruction(raw=half, width=4, kind=Kind.ILLEGAL)
    (word,) = struct.unpack_from("<I", blob, offset)
    return _decode_word(word)


def decode_halfwords(low: int, high: int = 0) -> Instruction:
    """Decode from raw parcel values instead of a blob (used by the hart)."""
    if instruction_width(low) == 2:
        return _decode_compressed(low)
    return _decode_word((high << 16) | low)


def _decode_compressed(half: int) -> Instruction:
    if half == 0:
        return Instruction(raw=0, width=2, kind=Kind.ILLEGAL)
    quadrant = half & 0b11
    funct3 = (half >> 13) & 0b111
    if quadrant == 0b01 and funct3 == 0b101:  # c.j
        imm = _cj_offset(half)
        return Instruction(raw=half, width=2, kind=Kind.JUMP, rd=0, imm=imm)
    if quadrant == 0b01 and funct3 in (0b110, 0b111):  # c.beqz / c.bnez
        rs1 = 8 + ((half >> 7) & 0b111)
        imm = _cb_offset(half)
        return Instruction(
            raw=half, width=2, kind=Kind.BRANCH, rs1=rs1, rs2=0, imm=imm,
            funct3=0 if funct3 == 0b110 else 1,
        )
    if quadrant == 0b10 and funct3 == 0b100:
        rs1 = (half >> 7) & 0x1F
        rs2 = (half >> 2) & 0x1F
        bit12 = (half >> 12) & 1
        if rs2 == 0 and rs1 != 0:  # c.jr / c.jalr
            return Instruction(
                raw=half, width=2, kind=Kind.JUMP_REGISTER,
                rd=1 if bit12 else 0, rs1=rs1,
            )
    return Instruction(raw=half, width=2, kind=Kind.ARITHMETIC_OR_OTHER)


def _cj_offset(half: int) -> int:
    imm = (
        (((half >> 12) & 1) << 11)
        | (((half >> 11) & 1) << 4)
        | (((half >> 9) & 0b11) << 8)
        | (((half >> 8) & 1) << 10)
        | (((half >> 7) & 1) << 6)
        | (((half >> 6) & 1) << 7)
        | (((half >> 3) & 0b111) << 1)
        | (((half >> 2) & 1) << 5)
    )
    return _sext(imm, 12)


def _cb_offset(half: int) -> int:
    imm = (
        (((half >> 12) & 1) << 8)
        | (((half >> 10) & 0b11) << 3)
        | (((half >> 5) & 0b11) << 6)
        | (((half >> 3) & 0b11) << 1)
        | (((half >> 2) & 1) << 5)
    )
    return _sext(imm, 9)


def _encode_cj(offset: int) -> int:
    if offset % 2 or not -(1 << 11) <= offset < (1 << 11):
        raise UnsupportedInstructionError(f"c.j offset {offset} out of range")
    u = offset & 0xFFF
    return (
        0b01
        | (0b101 << 13)
        | (((u >> 11) & 1) << 12)
        | (((u >> 4) & 1) << 11)
        | (((u >> 8) & 0b11) << 9)
        | (((u >> 10) & 1) << 8)
        | (((u >> 6) & 1) << 7)
        | (((u >> 7) & 1) << 6)
        | (((u >> 1) & 0b111) << 3)
        | (((u >> 5) & 1) << 2)
    )


_OPCODE_SYSTEM = 0x73
_OPCODE_LOAD = 0x03
_OPCODE_STORE = 0x23
_OPCODE_JAL = 0x6F
_OPCODE_JALR = 0x67
_OPCODE_BRANCH = 0x63
_ARITH_OPCODES = {0x13, 0x33, 0x37, 0x17, 0x1B, 0x3B, 0x0F}

_CSR_FUNCT3 = {
    1: (Kind.CSR_READ_WRITE, False),
    2: (Kind.CSR_SET, False),
    3: (Kind.CSR_CLEAR, False),
    5: (Kind.CSR_READ_WRITE_IMM, True),
    6: (Kind.CSR_SET, True),
    7: (Kind.CSR_CLEAR, True),
}


def _decode_word(word: int) -> Instruction:
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    funct3 = (word >> 12) & 0x7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    funct7 = (word >> 25) & 0x7F

    def illegal() -> Instruction:
        return Instruction(raw=word, width=4, kind=Kind.ILLEGAL, opcode=opcode)

    if opcode == _OPCODE_SYSTEM:
        if funct3 == 0:
            imm12 = (word >> 20) & 0xFFF
            if rd != 0 or rs1 != 0:
                return illegal()
            if imm12 == 0x000:
                return Instruction(raw=word, width=4, kind=Kind.ECALL, opcode=opcode)
            if imm12 == 0x302:
                return Instruction(raw=word, width=4, kind=Kind.MRET, opcode=opcode)
            if imm12 == 0x105:
                return Instruction(raw=word, width=4, kind=Kind.WFI, opcode=opcode)
            return illegal()
        if funct3 in _CSR_FUNCT3:
            kind, imm_form = _CSR_FUNCT3[funct3]
            target = classify_csr((word >> 20) & 0xFFF)
            return Instruction(
                raw=word, width=4, kind=kind, csr_target=target,
                source_is_immediate=imm_form, rd=rd, rs1=rs1,
                imm=rs1 if imm_form else 0, funct3=funct3, opcode=opcode,
            )
        return illegal()

    if opcode == _OPCODE_LOAD:
        if funct3 == 7:
            return illegal()
        return Instruction(
            raw=word, width=4, kind=Kind.LOAD, rd=rd, rs1=rs1,
            imm=_sext(word >> 20, 12), funct3=funct3, opcode=opcode,
        )
    if opcode == _OPCODE_STORE:
        if funct3 > 3:
            return illegal()
        imm = _sext(((word >> 25) << 5) | rd, 12)
        return Instruction(
            raw=word, width=4, kind=Kind.STORE, rs1=rs1, rs2=rs2,
            imm=imm, funct3=funct3, opcode=opcode,
        )
    if opcode == _OPCODE_JAL:
        imm = (
            (((word >> 31) & 1) << 20)
            | (((word >> 21) & 0x3FF) << 1)
            | (((word >> 20) & 1) << 11)
            | (((word >> 12) & 0xFF) << 12)
        )
        return Instruction(
            raw=word, width=4, kind=Kind.JUMP, rd=rd,
            imm=_sext(imm, 21), opcode=opcode,
        )
    if opcode == _OPCODE_JALR:
        if funct3 != 0:
            return illegal()
        return Instruction(
            raw=word, width=4, kind=Kind.JUMP_REGISTER, rd=rd, rs1=rs1,
            imm=_sext(word >> 20, 12), opcode=opcode,
        )
    if opcode == _OPCODE_BRANCH:
        if funct3 in (2, 3):
            return illegal()
        imm = (
            (((word >> 31) & 1) << 12)
            | (((word >> 25) & 0x3F) << 5)
            | (((word >> 8) & 0xF) << 1)
            | (((word >> 7) & 1) << 11)
        )
        return Instruction(
            raw=word, width=4, kind=Kind.BRANCH, rs1=rs1, rs2=rs2,
            imm=_sext(imm, 13), funct3=funct3, opcode=opcode,
        )
    if opcode in _ARITH_OPCODES:
        imm = _sext(word >> 20, 12)
        if opcode in (0x37, 0x17):  # lui / auipc carry a U-type immediate
            imm = _sext(word & 0xFFFFF000, 32)
        return Instruction(
            raw=word, width=4, kind=Kind.ARITHMETIC_OR_OTHER, rd=rd, rs1=rs1,
            rs2=rs2, imm=imm, funct3=funct3, funct7=funct7, opcode=opcode,
        )
    return illegal()


def writes_csr(instr: Instruction) -> bool:
    """True when the instruction actually performs a CSR write.

    Read-write forms always write. Set/clear forms write only when the source
    is a nonzero register index or a nonzero immediate; ``csrr rd, csr``
    (csrrs with rs1=x0) is a pure read.
    """
    if instr.kind in (Kind.CSR_READ_WRITE, Kind.CSR_READ_WRITE_IMM):
        return True
    if instr.kind in (Kind.CSR_SET, Kind.CSR_CLEAR):
        source = instr.imm if instr.source_is_immediate else instr.rs1
        return source != 0
    return False


def is_isolation_sensitive(instr: Instruction) -> Sensitivity:
    """Classify whether the instruction can alter the isolation state."""
    if instr.csr_target is None or not writes_csr(instr):
        return Sensitivity.NONE
    cls = instr.csr_target.cls
    if cls in (CsrClass.PMP_CFG, CsrClass.PMP_ADDR, CsrClass.MSECCFG):
        return Sensitivity.PMP_WRITE
    if cls is CsrClass.TRAP_VECTOR:
        return Sensitivity.TRAP_VECTOR_WRITE
    return Sensitivity.NONE


# --- encoding ---------------------------------------------------------------

_LOAD_FUNCT3 = {"lb": 0, "lh": 1, "lw": 2, "ld": 3, "lbu": 4, "lhu": 5, "lwu": 6}
_STORE_FUNCT3 = {"sb": 0, "sh": 1, "sw": 2, "sd": 3}
_BRANCH_FUNCT3 = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}
_CSR_MNEMONIC_FUNCT3 = {
    "csrrw": 1, "csrrs": 2, "csrrc": 3, "csrrwi": 5, "csrrsi": 6, "csrrci": 7,
}
_OP_IMM_FUNCT3 = {"addi": 0, "slti": 2, "sltiu": 3, "xori": 4, "ori": 6, "andi": 7}
_OP_FUNCT3 = {"add": (0, 0), "sub": (0, 0x20), "sll": (1, 0), "slt": (2, 0),
              "sltu": (3, 0), "xor": (4, 0), "srl": (5, 0), "or": (6, 0), "and": (7, 0)}


def _check_reg(name: str, value: int) -> int:
    if not 0 <= value <= 31:
        raise UnsupportedInstructionError(f"{name}={value} is not a register index")
    return value


def _check_range(name: str, value: int, bits: int, signed: bool = True) -> int:
    if signed:
        ok = -(1 << (bits - 1)) <= value < (1 << (bits - 1))
    else:
        ok = 0 <= value < (1 << bits)
    if not ok:
        raise UnsupportedInstructionError(f"{name}={value} does not fit {bits} bits")
    return value


def encode(mnemonic: str, *, rd: int = 0, rs1: int = 0, rs2: int = 0,
           imm: int = 0, csr: int = 0, uimm: int = 0) -> bytes:
    """Encode one instruction to its little-endian octet sequence.

    Supports the executable subset plus the pseudo-forms the generated
    programs use (csrw/csrwi/csrr/csrs/csrsi/csrci, nop). ``c.j`` is the one
    compressed encoding, provided for 2-octet test material.
    """
    m = mnemonic.lower()
    if m == "c.j":
        return struct.pack("<H", _encode_cj(imm))
    word = _encode_word(m, rd, rs1, rs2, imm, csr, uimm)
    return struct.pack("<I", word)


def _encode_word(m: str, rd: int, rs1: int, rs2: int, imm: int, csr: int, uimm: int) -> int:
    if m == "nop":
        m, rd, rs1, imm = "addi", 0, 0, 0
    if m == "csrw":
        m, rd = "csrrw", 0
    elif m == "csrr":
        m, rs1 = "csrrs", 0
    elif m == "csrs":
        m, rd = "csrrs", 0
    elif m == "csrc":
        m, rd = "csrrc", 0
    elif m == "csrwi":
        m, rd = "csrrwi", 0
    elif m == "csrsi":
        m, rd = "csrrsi", 0
    elif m == "csrci":
        m, rd = "csrrci", 0

    if m in ("ecall", "mret", "wfi"):
        imm12 = {"ecall": 0x000, "mret": 0x302, "wfi": 0x105}[m]
        return (imm12 << 20) | _OPCODE_SYSTEM
    if m in _CSR_MNEMONIC_FUNCT3:
        funct3 = _CSR_MNEMONIC_FUNCT3[m]
        _check_range("csr", csr, 12, signed=False)
        _check_reg("rd", rd)
        if funct3 >= 5:
            src = _check_range("uimm", uimm, 5, signed=False)
        else:
            src = _check_reg("rs1", rs1)
        return (csr << 20) | (src << 15) | (funct3 << 12) | (rd << 7) | _OPCODE_SYSTEM
    if m in _LOAD_FUNCT3:
        _check_reg("rd", rd), _check_reg("rs1", rs1), _check_range("imm", imm, 12)
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (_LOAD_FUNCT3[m] << 12) | (rd << 7) | _OPCODE_LOAD
    if m in _STORE_FUNCT3:
        _check_reg("rs1", rs1), _check_reg("rs2", rs2), _check_range("imm", imm, 12)
        u = imm & 0xFFF
        return ((u >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (_STORE_FUNCT3[m] << 12) | ((u & 0x1F) << 7) | _OPCODE_STORE
    if m == "jal":
        _check_reg("rd", rd)
        if imm % 2 or not -(1 << 20) <= imm < (1 << 20):
            raise UnsupportedInstructionError(f"jal offset {imm} out of range")
        u = imm & 0x1FFFFF
        return (
            (((u >> 20) & 1) << 31) | (((u >> 1) & 0x3FF) << 21)
            | (((u >> 11) & 1) << 20) | (((u >> 12) & 0xFF) << 12)
            | (rd << 7) | _OPCODE_JAL
        )
    if m == "jalr":
        _check_reg("rd", rd), _check_reg("rs1", rs1), _check_range("imm", imm, 12)
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (rd << 7) | _OPCODE_JALR
    if m in _BRANCH_FUNCT3:
        _check_reg("rs1", rs1), _check_reg("rs2", rs2)
        if imm % 2 or not -(1 << 12) <= imm < (1 << 12):
            raise UnsupportedInstructionError(f"branch offset {imm} out of range")
        u = imm & 0x1FFF
        return (
            (((u >> 12) & 1) << 31) | (((u >> 5) & 0x3F) << 25) | (rs2 << 20)
            | (rs1 << 15) | (_BRANCH_FUNCT3[m] << 12)
            | (((u >> 1) & 0xF) << 8) | (((u >> 11) & 1) << 7) | _OPCODE_BRANCH
        )
    if m == "lui" or m == "auipc":
        _check_reg("rd", rd)
        _check_range("imm", imm, 20, signed=False)
        opcode = 0x37 if m == "lui" else 0x17
        return (imm << 12) | (rd << 7) | opcode
    if m in _OP_IMM_FUNCT3:
        _check_reg("rd", rd), _check_reg("rs1", rs1), _check_range("imm", imm, 12)
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (_OP_IMM_FUNCT3[m] << 12) | (rd << 7) | 0x13
    if m in ("slli", "srli", "srai"):
        _check_reg("rd", rd), _check_reg("rs1", rs1), _check_range("imm", imm, 6, signed=False)
        funct3 = 1 if m == "slli" else 5
        top = 0x10 if m == "srai" else 0
        return (top << 26) | (imm << 20) | (rs1 << 15) | (funct3 << 12) | (rd << 7) | 0x13
    if m == "addiw":
        _check_reg("rd", rd), _check_reg("rs1", rs1), _check_range("imm", imm, 12)
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (rd << 7) | 0x1B
    if m in _OP_FUNCT3:
        funct3, funct7 = _OP_FUNCT3[m]
        _check_reg("rd", rd), _check_reg("rs1", rs1), _check_reg("rs2", rs2)
        return (funct7 << 25) | (rs2 << 20) | (rs1 << 15) | (funct3 << 12) | (rd << 7) | 0x33
    raise UnsupportedInstructionError(f"unsupported mnemonic {m!r}")


# --- formatting -------------------------------------------------------------

_CSR_KIND_NAMES = {
    (Kind.CSR_READ_WRITE, False): "csrrw",
    (Kind.CSR_READ_WRITE_IMM, True): "csrrwi",
    (Kind.CSR_SET, False): "csrrs",
    (Kind.CSR_SET, True): "csrrsi",
    (Kind.CSR_CLEAR, False): "csrrc",
    (Kind.CSR_CLEAR, True): "csrrci",
}
_LOAD_NAMES = {v: k for k, v in _LOAD_FUNCT3.items()}
_STORE_NAMES = {v: k for k, v in _STORE_FUNCT3.items()}
_BRANCH_NAMES = {v: k for k, v in _BRANCH_FUNCT3.items()}


def _format(instr: Instruction) -> str:
    k = instr.kind
    if k is Kind.ILLEGAL:
        return f".illegal {instr.raw:#x}"
    if k in (Kind.ECALL, Kind.MRET, Kind.WFI):
        return k.name.lower()
    if instr.csr_target is not None:
        name = _CSR_KIND_NAMES[(k, instr.source_is_immediate)]
        src = f"{instr.imm}" if instr.source_is_immediate else f"x{instr.rs1}"
        return f"{name} x{instr.rd}, {instr.csr_target.name}, {src}"
    if instr.width == 2:
        if k is Kind.JUMP:
            return f"c.j {instr.imm}"
        if k is Kind.BRANCH:
            return f"c.{'beqz' if instr.funct3 == 0 else 'bnez'} x{instr.rs1}, {instr.imm}"
        if k is Kind.JUMP_REGISTER:
            return f"c.{'jalr' if instr.rd else 'jr'} x{instr.rs1}"
        return f".c_other {instr.raw:#06x}"
    if k is Kind.LOAD:
        return f"{_LOAD_NAMES[instr.funct3]} x{instr.rd}, {instr.imm}(x{instr.rs1})"
    if k is Kind.STORE:
        return f"{_STORE_NAMES[instr.funct3]} x{instr.rs2}, {instr.imm}(x{instr.rs1})"
    if k is Kind.JUMP:
        return f"jal x{instr.rd}, {instr.imm}"
    if k is Kind.JUMP_REGISTER:
        return f"jalr x{instr.rd}, {instr.imm}(x{instr.rs1})"
    if k is Kind.BRANCH:
        return f"{_BRANCH_NAMES[instr.funct3]} x{instr.rs1}, x{instr.rs2}, {instr.imm}"
    return f".op {instr.raw:#010x}"

"""Adversarial firmware-image corpus for scanner tests.

Ground truth comes from a bit-level predicate written directly against the
CSR instruction format, kept independent of the package decoder on purpose:
a blob's sensitive sites are recomputed here from raw bytes, so scanner
recall is measured against construction, not against the code under test.

Two embedding styles are produced. The aligned style drops a sensitive word
onto a 4-octet boundary. The carrier style hides it across a word boundary:
a LUI soaks up the sensitive word's low halfword as the top of its immediate
and the next word slot starts with the sensitive word's high halfword, so
the sensitive encoding only exists at a halfword-misaligned offset reached
by jumping into the middle of the carrier.
"""

import random

from sallyport import isa
from sallyport.scanner import SPENTRY_BYTES

SENSITIVE_CSRS = (
    set(range(0x3A0, 0x3C0))  # pmpcfg0-15 and pmpaddr0-15
    | {isa.CSR_MSECCFG, isa.CSR_MTVEC}
)

WORD_FILLER_TEMPLATES = (
    lambda rng: isa.encode("addi", rd=rng.randrange(32), rs1=rng.randrange(32),
                           imm=rng.randrange(-2048, 2048)),
    lambda rng: isa.encode("add", rd=rng.randrange(32), rs1=rng.randrange(32),
                           rs2=rng.randrange(32)),
    lambda rng: isa.encode("lui", rd=rng.randrange(32), imm=rng.randrange(1 << 20)),
    lambda rng: isa.encode("ld", rd=rng.randrange(32), rs1=rng.randrange(32),
                           imm=8 * rng.randrange(-64, 64)),
    lambda rng: isa.encode("sd", rs1=rng.randrange(32), rs2=rng.randrange(32),
                           imm=8 * rng.randrange(-64, 64)),
    lambda rng: isa.encode("jal", rd=0, imm=2 * rng.randrange(-512, 512)),
    lambda rng: isa.encode("beq", rs1=rng.randrange(32), rs2=rng.randrange(32),
                           imm=2 * rng.randrange(-256, 256)),
    lambda rng: isa.encode("csrr", rd=rng.randrange(32), csr=isa.CSR_MSTATUS),
    lambda rng: isa.encode("andi", rd=rng.randrange(32), rs1=rng.randrange(32),
                           imm=rng.randrange(-2048, 2048)),
    lambda rng: isa.encode("nop"),
)


def word_is_sensitive(word: int) -> bool:
    """Bit-level ground truth for one 32-bit encoding."""
    if word & 0x7F != 0x73:
        return False
    funct3 = (word >> 12) & 0b111
    if funct3 in (0, 4):
        return False
    if ((word >> 20) & 0xFFF) not in SENSITIVE_CSRS:
        return False
    source = (word >> 15) & 0x1F
    if funct3 in (2, 3, 6, 7) and source == 0:
        return False  # set/clear against x0 or uimm 0 cannot write
    return True


def ground_truth_offsets(blob: bytes) -> set:
    """Every halfword offset where a sensitive 32-bit encoding begins."""
    return {
        off for off in range(0, len(blob) - 3, 2)
        if word_is_sensitive(int.from_bytes(blob[off:off + 4], "little"))
    }


def random_sensitive_word(rng: random.Random) -> int:
    csr = rng.choice(sorted(SENSITIVE_CSRS))
    mnemonic = rng.choice(("csrrw", "csrrs", "csrrc", "csrrwi", "csrrsi", "csrrci"))
    if mnemonic.endswith("i"):
        word = isa.encode(mnemonic, rd=rng.randrange(32), csr=csr,
                          uimm=rng.randrange(1, 32))
    else:
        word = isa.encode(mnemonic, rd=rng.randrange(32), csr=csr,
                          rs1=rng.randrange(1, 32))
    return int.from_bytes(word, "little")


def make_clean_firmware(rng: random.Random, size: int = 0x400) -> bytes:
    """Filler code ending in the exit stub, free of sensitive sites."""
    assert size % 4 == 0 and size >= 8
    words = size // 4 - 1
    while True:
        blob = b"".join(rng.choice(WORD_FILLER_TEMPLATES)(rng) for _ in range(words))
        blob += SPENTRY_BYTES
        if ground_truth_offsets(blob) == {size - 4}:
            return blob


def plant_aligned(rng: random.Random, blob: bytes) -> tuple:
    """Overwrite one interior word slot with a sensitive word."""
    word = random_sensitive_word(rng)
    slot = 4 * rng.randrange(len(blob) // 4 - 1)
    out = blob[:slot] + word.to_bytes(4, "little") + blob[slot + 4:]
    return out, slot


def plant_carrier(rng: random.Random, blob: bytes) -> tuple:
    """Hide a sensitive word at a halfword-misaligned offset.

    Word slot j becomes ``lui`` carrying the sensitive low halfword in its
    immediate's top bits; slot j+1 starts with the sensitive high halfword
    and ends with a compressed no-op hint, so every aligned decode in the
    area looks innocuous.
    """
    word = random_sensitive_word(rng)
    low, high = word & 0xFFFF, word >> 16
    j = rng.randrange(len(blob) // 4 - 2)
    carrier = (low << 16) | (rng.randrange(1, 32) << 7) | 0x37
    tail = (0x0001 << 16) | high  # c.nop hint fills the leftover parcel
    out = (blob[:4 * j]
           + carrier.to_bytes(4, "little")
           + tail.to_bytes(4, "little")
           + blob[4 * j + 8:])
    return out, 4 * j + 2


def build_case(rng: random.Random, size: int = 0x400) -> tuple:
    """One corpus case: (blob, planted_offsets). Empty set means clean."""
    blob = make_clean_firmware(rng, size)
    style = rng.randrange(4)
    if style == 0:
        return blob, set()
    planted = set()
    for _ in range(1 if style < 3 else rng.randrange(2, 5)):
        if rng.random() < 0.5:
            blob, off = plant_aligned(rng, blob)
        else:
            blob, off = plant_carrier(rng, blob)
        planted.add(off)
    # Planting may overwrite an earlier plant; keep only sites still present.
    truth = ground_truth_offsets(blob)
    return blob, planted & truth

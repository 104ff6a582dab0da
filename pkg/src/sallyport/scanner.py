"""Boot-time firmware scanner.

Firmware executes in machine mode, so nothing stops a malicious image from
rewriting PMP registers or the trap vector at runtime. The load-time defense
is purely static: before firmware is admitted, every 2-octet offset of its
image is decoded as a potential instruction and any encoding that could
write a PMP register, mseccfg, or mtvec rejects the image. Scanning all
halfword alignments closes the overlapping-instruction loophole where a
sensitive word hides inside the immediate of a longer container instruction
and is reached by jumping into its middle.

The single admissible exception is the exit-stub write ``csrwi pmpcfg0, 0``
(the instruction that tears down the firmware view and falls through into
the transition code). It must sit at one declared offset, which the firmware
region layout pins to the final word of the image.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from . import isa

# csrwi pmpcfg0, 0 -- the one PMP write firmware is allowed to contain.
SPENTRY_WORD = 0x3A005073
SPENTRY_BYTES = SPENTRY_WORD.to_bytes(4, "little")


@dataclass(frozen=True)
class Finding:
    """One sensitive encoding discovered in an image."""

    offset: int
    word: int
    mnemonic: str
    sensitivity: isa.Sensitivity

    def to_json_dict(self) -> dict:
        return {
            "offset": self.offset,
            "word": f"{self.word:#010x}",
            "mnemonic": self.mnemonic,
            "sensitivity": self.sensitivity.name,
        }


@dataclass
class ScanReport:
    accepted: bool
    digest: str
    size: int
    spentry_offset: int
    findings: list = field(default_factory=list)
    structural_errors: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "digest": self.digest,
            "size": self.size,
            "spentry_offset": self.spentry_offset,
            "findings": [f.to_json_dict() for f in self.findings],
            "structural_errors": list(self.structural_errors),
        }


def scan_blob(blob: bytes) -> list:
    """All sensitive encodings at any halfword alignment, in offset order.

    Compressed (2-octet) encodings cannot name a CSR, so only offsets whose
    leading parcel selects a 4-octet instruction can produce findings.
    """
    findings = []
    for offset in range(0, len(blob) - 3, 2):
        low = blob[offset] | (blob[offset + 1] << 8)
        if isa.instruction_width(low) != 4:
            continue
        word = int.from_bytes(blob[offset:offset + 4], "little")
        instr = isa.decode_halfwords(low, word >> 16)
        sensitivity = isa.is_isolation_sensitive(instr)
        if sensitivity is not isa.Sensitivity.NONE:
            findings.append(Finding(offset, word, instr.mnemonic(), sensitivity))
    return findings


def verify_firmware(blob: bytes, spentry_offset: int,
                    expected_size: int | None = None) -> ScanReport:
    """Admit or reject one firmware image.

    The image passes when its only sensitive encoding is the exact exit-stub
    word at ``spentry_offset``, that offset is the image's final word, and
    the image fills its region exactly (when ``expected_size`` is given).
    """
    report = ScanReport(
        accepted=False,
        digest=hashlib.sha256(blob).hexdigest(),
        size=len(blob),
        spentry_offset=spentry_offset,
    )
    if expected_size is not None and len(blob) != expected_size:
        report.structural_errors.append(
            f"image is {len(blob)} octets, region holds {expected_size}")
    placement_ok = 0 <= spentry_offset == len(blob) - 4
    if not placement_ok:
        report.structural_errors.append(
            f"exit stub declared at {spentry_offset:#x}, expected final word "
            f"{len(blob) - 4:#x}")
    elif blob[spentry_offset:spentry_offset + 4] != SPENTRY_BYTES:
        placement_ok = False
        report.structural_errors.append(
            f"no exit stub word at {spentry_offset:#x}")

    for finding in scan_blob(blob):
        if placement_ok and finding.offset == spentry_offset:
            continue  # finding.word is necessarily SPENTRY_WORD here
        report.findings.append(finding)

    report.accepted = not report.findings and not report.structural_errors
    return report

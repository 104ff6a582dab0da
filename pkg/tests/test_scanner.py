"""Scanner: sensitive-encoding sweep, exit-stub allow-listing, structure checks."""

import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import corpus
from sallyport import isa
from sallyport.scanner import SPENTRY_BYTES, SPENTRY_WORD, scan_blob, verify_firmware


def firmware_with(words, size=0x100):
    """Pad the given instruction words with nops and end with the exit stub."""
    body = b"".join(w.to_bytes(4, "little") if isinstance(w, int) else w
                    for w in words)
    pad = size - 4 - len(body)
    assert pad >= 0 and pad % 4 == 0
    return body + isa.encode("nop") * (pad // 4) + SPENTRY_BYTES


def test_clean_firmware_accepted():
    blob = firmware_with([isa.encode("addi", rd=5, rs1=0, imm=1),
                          isa.encode("jalr", rd=0, rs1=1)])
    report = verify_firmware(blob, len(blob) - 4, expected_size=len(blob))
    assert report.accepted
    assert report.findings == []
    assert report.structural_errors == []
    assert report.digest == hashlib.sha256(blob).hexdigest()


@pytest.mark.parametrize("word_bytes, sensitivity", [
    (isa.encode("csrw", csr=isa.CSR_PMPCFG0, rs1=5), isa.Sensitivity.PMP_WRITE),
    (isa.encode("csrw", csr=isa.CSR_PMPCFG2, rs1=5), isa.Sensitivity.PMP_WRITE),
    (isa.encode("csrw", csr=isa.CSR_PMPADDR0 + 9, rs1=5), isa.Sensitivity.PMP_WRITE),
    (isa.encode("csrw", csr=isa.CSR_MSECCFG, rs1=5), isa.Sensitivity.PMP_WRITE),
    (isa.encode("csrwi", csr=isa.CSR_PMPADDR0, uimm=0), isa.Sensitivity.PMP_WRITE),
    (isa.encode("csrrs", rd=3, csr=isa.CSR_PMPCFG0, rs1=7), isa.Sensitivity.PMP_WRITE),
    (isa.encode("csrrci", rd=0, csr=isa.CSR_MSECCFG, uimm=4), isa.Sensitivity.PMP_WRITE),
    (isa.encode("csrw", csr=isa.CSR_MTVEC, rs1=5), isa.Sensitivity.TRAP_VECTOR_WRITE),
    (isa.encode("csrsi", csr=isa.CSR_MTVEC, uimm=1), isa.Sensitivity.TRAP_VECTOR_WRITE),
])
def test_each_sensitive_form_rejects(word_bytes, sensitivity):
    blob = firmware_with([word_bytes])
    report = verify_firmware(blob, len(blob) - 4)
    assert not report.accepted
    assert any(f.offset == 0 and f.sensitivity is sensitivity
               for f in report.findings)


@pytest.mark.parametrize("word_bytes", [
    isa.encode("csrr", rd=5, csr=isa.CSR_PMPCFG0),           # read only
    isa.encode("csrrs", rd=5, csr=isa.CSR_PMPADDR0, rs1=0),  # set x0: read
    isa.encode("csrrsi", rd=5, csr=isa.CSR_MTVEC, uimm=0),   # set 0: read
    isa.encode("csrw", csr=isa.CSR_MSTATUS, rs1=5),          # mstatus unscanned
    isa.encode("csrci", csr=isa.CSR_MSTATUS, uimm=8),
    isa.encode("csrw", csr=isa.CSR_MEPC, rs1=5),
    isa.encode("mret"),
    isa.encode("ecall"),
])
def test_benign_csr_traffic_passes(word_bytes):
    blob = firmware_with([word_bytes])
    report = verify_firmware(blob, len(blob) - 4)
    assert report.accepted, [f.to_json_dict() for f in report.findings]


def test_exit_stub_is_never_a_finding():
    blob = firmware_with([])
    report = verify_firmware(blob, len(blob) - 4)
    assert report.accepted
    # the stub word itself is the only sensitive site in the image
    assert corpus.ground_truth_offsets(blob) == {len(blob) - 4}


def test_duplicate_exit_stub_in_body_rejects():
    blob = firmware_with([SPENTRY_WORD])
    report = verify_firmware(blob, len(blob) - 4)
    assert not report.accepted
    offsets = {f.offset for f in report.findings}
    assert 0 in offsets
    assert len(blob) - 4 not in offsets


def test_exit_stub_not_at_final_word_rejects():
    blob = firmware_with([SPENTRY_WORD, SPENTRY_WORD])
    # declare the first one: placement check fails, and both copies become
    # findings because the allow-list only ever applies to the final word
    report = verify_firmware(blob, 0)
    assert not report.accepted
    assert report.structural_errors
    assert {f.offset for f in report.findings} >= {0, 4}


def test_missing_exit_stub_rejects():
    blob = isa.encode("nop") * 16
    report = verify_firmware(blob, len(blob) - 4)
    assert not report.accepted
    assert any("no exit stub" in e for e in report.structural_errors)


def test_size_mismatch_rejects():
    blob = firmware_with([])
    report = verify_firmware(blob, len(blob) - 4, expected_size=len(blob) + 4)
    assert not report.accepted
    assert any("region holds" in e for e in report.structural_errors)


def test_misaligned_embedding_is_found():
    # Hand-built carrier: lui hides the low half of "csrw pmpcfg0, x5" in its
    # immediate; the next slot starts with the high half. Aligned decodes see
    # lui and a compressed parcel, the halfword-offset decode sees the write.
    sens = int.from_bytes(isa.encode("csrw", csr=isa.CSR_PMPCFG0, rs1=5), "little")
    carrier = ((sens & 0xFFFF) << 16) | (7 << 7) | 0x37
    tail = (0x0001 << 16) | (sens >> 16)
    blob = firmware_with([carrier, tail])
    offsets = {f.offset for f in scan_blob(blob)}
    assert 2 in offsets
    report = verify_firmware(blob, len(blob) - 4)
    assert not report.accepted


def test_scan_blob_offsets_ordered_and_complete():
    sens = isa.encode("csrw", csr=isa.CSR_PMPADDR0 + 2, rs1=6)
    blob = sens + isa.encode("nop") + sens
    findings = scan_blob(blob)
    assert [f.offset for f in findings] == [0, 8]
    assert all(f.mnemonic.startswith("csrrw") for f in findings)


def test_corpus_recall_and_precision_sample():
    rng = random.Random(20260819)
    rejected = accepted = 0
    for _ in range(120):
        blob, planted = corpus.build_case(rng, size=0x100)
        truth = corpus.ground_truth_offsets(blob) - {len(blob) - 4}
        report = verify_firmware(blob, len(blob) - 4, expected_size=len(blob))
        found = {f.offset for f in report.findings}
        assert found == truth
        assert planted <= found
        assert report.accepted == (not truth)
        rejected += not report.accepted
        accepted += report.accepted
    assert rejected and accepted  # the mix exercises both verdicts


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 60))
def test_planted_word_always_found_when_sensitive(seed, slot_seed):
    rng = random.Random(seed)
    word = corpus.random_sensitive_word(rng)
    blob = firmware_with([], size=0x100)
    slot = 4 * (slot_seed % (len(blob) // 4 - 1))
    blob = blob[:slot] + word.to_bytes(4, "little") + blob[slot + 4:]
    offsets = {f.offset for f in scan_blob(blob)}
    assert slot in offsets


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=4, max_size=160))
def test_scanner_matches_ground_truth_on_arbitrary_bytes(data):
    blob = data + b"\x00" * (-len(data) % 2)
    assert {f.offset for f in scan_blob(blob)} == corpus.ground_truth_offsets(blob)

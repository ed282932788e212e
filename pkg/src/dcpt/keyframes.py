"""Keyframe (I-frame) identification from MP4 containers and H.264 Annex B streams.

Only frame *types* are recovered; no pixel data is decoded.  Both parsers
return a :class:`FrameIndexReport` listing every frame in decode order as
``"I"`` or ``"nonI"``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

I_FRAME = "I"
NON_I = "nonI"

START3 = b"\x00\x00\x01"

NAL_SLICE = 1
NAL_IDR = 5
VCL_TYPES = (NAL_SLICE, NAL_IDR)

CONTAINERS = {b"moov", b"trak", b"mdia", b"minf", b"stbl", b"edts", b"dinf", b"mvex", b"moof", b"traf", b"udta"}


class KeyframeError(ValueError):
    """Malformed or unsupported input."""


class FormatError(KeyframeError):
    """Input is neither an MP4 file nor an Annex B stream."""


@dataclass
class FrameIndexReport:
    source: str
    entries: list[tuple[int, str]] = field(default_factory=list)

    @property
    def total_frames(self) -> int:
        return len(self.entries)

    @property
    def keyframes(self) -> list[int]:
        return [i for i, kind in self.entries if kind == I_FRAME]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"source": self.source, "total_frames": self.total_frames})]
        lines += [json.dumps({"frame_index": i, "kind": kind}) for i, kind in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "FrameIndexReport":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or "source" not in rows[0]:
            raise KeyframeError("keyframe report lacks a header line")
        header, body = rows[0], rows[1:]
        report = cls(header["source"], [(int(r["frame_index"]), r["kind"]) for r in body])
        if report.total_frames != header.get("total_frames", report.total_frames):
            raise KeyframeError(f"report header says {header['total_frames']} frames, body has {report.total_frames}")
        if [i for i, _ in report.entries] != list(range(report.total_frames)):
            raise KeyframeError("report frame indices are not 0..n-1")
        return report


def _report(source: str, kinds: list[str]) -> FrameIndexReport:
    return FrameIndexReport(source, list(enumerate(kinds)))


# ---------------------------------------------------------------------------
# MP4 / ISO base media


@dataclass
class Mp4BoxHeader:
    offset: int
    size: int
    type: bytes
    header_size: int

    @property
    def payload(self) -> tuple[int, int]:
        return self.offset + self.header_size, self.offset + self.size


def iter_boxes(data: bytes, start: int = 0, end: int | None = None) -> Iterator[Mp4BoxHeader]:
    """Boxes in ``data[start:end]``; every declared size is checked against ``end``."""
    end = len(data) if end is None else end
    pos = start
    while pos < end:
        if end - pos < 8:
            raise KeyframeError(f"truncated box header at offset {pos}")
        size, btype = struct.unpack_from(">I4s", data, pos)
        header = 8
        if size == 1:
            if end - pos < 16:
                raise KeyframeError(f"truncated extended size of {btype!r} box at offset {pos}")
            (size,) = struct.unpack_from(">Q", data, pos + 8)
            header = 16
        elif size == 0:
            size = end - pos
        if size < header:
            raise KeyframeError(f"{btype.decode('latin-1')!r} box at offset {pos} declares size {size}")
        if pos + size > end:
            raise KeyframeError(f"truncated {btype.decode('latin-1')!r} box at offset {pos}: needs {size} bytes, {end - pos} remain")
        yield Mp4BoxHeader(pos, size, btype, header)
        pos += size


def _children(data: bytes, box: Mp4BoxHeader) -> dict[bytes, list[Mp4BoxHeader]]:
    out: dict[bytes, list[Mp4BoxHeader]] = {}
    for child in iter_boxes(data, *box.payload):
        out.setdefault(child.type, []).append(child)
    return out


def _full_box_body(data: bytes, box: Mp4BoxHeader, need: int) -> int:
    start, end = box.payload
    if end - start < 4 + need:
        raise KeyframeError(f"truncated {box.type.decode('latin-1')!r} box at offset {box.offset}")
    return start + 4  # skip version + flags


def _handler_type(data: bytes, mdia: Mp4BoxHeader) -> bytes | None:
    hdlr = _children(data, mdia).get(b"hdlr")
    if not hdlr:
        return None
    body = _full_box_body(data, hdlr[0], 8)
    return data[body + 4 : body + 8]


def _read_stsz(data: bytes, box: Mp4BoxHeader) -> int:
    body = _full_box_body(data, box, 8)
    sample_size, count = struct.unpack_from(">II", data, body)
    if sample_size == 0 and box.payload[1] - (body + 8) < 4 * count:
        raise KeyframeError(f"truncated 'stsz' table at offset {box.offset}")
    return count


def _read_stss(data: bytes, box: Mp4BoxHeader) -> list[int]:
    body = _full_box_body(data, box, 4)
    (count,) = struct.unpack_from(">I", data, body)
    if box.payload[1] - (body + 4) < 4 * count:
        raise KeyframeError(f"truncated 'stss' table at offset {box.offset}: {count} entries declared")
    return list(struct.unpack_from(f">{count}I", data, body + 4))


def _find_video_stbl(data: bytes) -> Mp4BoxHeader:
    top = list(iter_boxes(data))
    moov = [b for b in top if b.type == b"moov"]
    if not moov:
        raise KeyframeError("no 'moov' box")
    fallback = None
    for trak in _children(data, moov[0]).get(b"trak", []):
        mdia = _children(data, trak).get(b"mdia")
        if not mdia:
            continue
        minf = _children(data, mdia[0]).get(b"minf")
        stbl = _children(data, minf[0]).get(b"stbl") if minf else None
        if not stbl:
            continue
        handler = _handler_type(data, mdia[0])
        if handler == b"vide":
            return stbl[0]
        if handler is None and fallback is None:
            fallback = stbl[0]
    if fallback is None:
        raise KeyframeError("no video track with an 'stbl' box")
    return fallback


def parse_mp4_keyframes(data: bytes, source: str = "<bytes>") -> FrameIndexReport:
    """Sync-sample table of the first video track, one sample per frame.

    A missing ``stss`` box means every sample is a sync sample.
    """
    stbl = _find_video_stbl(data)
    kids = _children(data, stbl)
    if b"stsz" not in kids:
        raise KeyframeError(f"'stbl' at offset {stbl.offset} has no 'stsz' box")
    count = _read_stsz(data, kids[b"stsz"][0])
    if count == 0:
        raise KeyframeError("video track has zero samples")
    if b"stss" not in kids:
        return _report(source, [I_FRAME] * count)
    sync = _read_stss(data, kids[b"stss"][0])
    if any(b <= a for a, b in zip(sync, sync[1:])):
        raise KeyframeError("'stss' entries are not strictly increasing")
    if sync and (sync[0] < 1 or sync[-1] > count):
        raise KeyframeError(f"'stss' entry outside 1..{count}; expected one sample per frame")
    kinds = [NON_I] * count
    for s in sync:
        kinds[s - 1] = I_FRAME
    return _report(source, kinds)


# ---------------------------------------------------------------------------
# H.264 Annex B


def split_nal_units(data: bytes) -> list[bytes]:
    """NAL unit payloads between 3- or 4-byte start codes."""
    first = data.find(START3)
    if first < 0:
        raise KeyframeError("no start code found")
    starts = []
    pos = first
    while pos >= 0:
        starts.append(pos + 3)
        pos = data.find(START3, pos + 3)
    units = []
    for a, b in zip(starts, starts[1:] + [len(data) + 3]):
        # trailing zeros belong to the next 4-byte start code
        unit = data[a : b - 3].rstrip(b"\x00")
        if unit:
            units.append(unit)
    return units


def unescape_rbsp(payload: bytes) -> bytes:
    """Drop emulation-prevention bytes (``00 00 03`` -> ``00 00``)."""
    out = bytearray()
    zeros = 0
    for byte in payload:
        if zeros >= 2 and byte == 3:
            zeros = 0
            continue
        out.append(byte)
        zeros = zeros + 1 if byte == 0 else 0
    return bytes(out)


class BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def bit(self) -> int:
        if self.pos >= 8 * len(self.data):
            raise KeyframeError("slice header ends mid exp-Golomb code")
        byte = self.data[self.pos >> 3]
        b = (byte >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return b

    def bits(self, n: int) -> int:
        v = 0
        for _ in range(n):
            v = (v << 1) | self.bit()
        return v

    def ue(self) -> int:
        zeros = 0
        while self.bit() == 0:
            zeros += 1
            if zeros > 31:
                raise KeyframeError("exp-Golomb code longer than 32 bits")
        return (1 << zeros) - 1 + self.bits(zeros)


def first_mb_in_slice(nal: bytes) -> int:
    return BitReader(unescape_rbsp(nal[1:])).ue()


def parse_annexb_frames(data: bytes, source: str = "<bytes>") -> FrameIndexReport:
    """Group VCL NAL units into access units; an access unit with an IDR slice is I."""
    units = split_nal_units(data)
    kinds: list[str] = []
    for nal in units:
        if nal[0] & 0x80:
            raise KeyframeError("forbidden_zero_bit set in NAL header")
        nal_type = nal[0] & 0x1F
        if nal_type not in VCL_TYPES:
            continue
        if first_mb_in_slice(nal) == 0 or not kinds:
            kinds.append(NON_I)
        if nal_type == NAL_IDR:
            kinds[-1] = I_FRAME
    if not kinds:
        raise KeyframeError("no VCL NAL unit in stream")
    return _report(source, kinds)


# ---------------------------------------------------------------------------
# dispatch


def sniff_format(data: bytes) -> str:
    if b"ftyp" in data[:12]:
        return "mp4"
    if data.startswith(START3) or data.startswith(b"\x00" + START3):
        return "annexb"
    raise FormatError("unrecognised input: neither 'ftyp' in the first 12 bytes nor a leading start code")


def classify_frames(path, format_hint: str = "auto") -> FrameIndexReport:
    path = Path(path)
    data = path.read_bytes()
    fmt = sniff_format(data) if format_hint == "auto" else format_hint
    if fmt == "mp4":
        return parse_mp4_keyframes(data, str(path))
    if fmt == "annexb":
        return parse_annexb_frames(data, str(path))
    raise FormatError(f"unknown format hint {format_hint!r}")

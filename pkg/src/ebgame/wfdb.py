"""Readers for the MIT-BIH record triplet (.hea / .dat / .atr).

Only WFDB storage format 212 is supported, which is what every MIT-BIH
record uses. Writers for the same formats exist so tests and demos can
build fixture records without PhysioNet data.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, RangeError

log = logging.getLogger(__name__)

SAMPLE_MIN = -2048
SAMPLE_MAX = 2047

# MIT annotation codes (WFDB ecgcodes.h) -> display symbol
ANNOTATION_SYMBOLS = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s", 19: "T",
    20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^", 27: "t",
    28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e", 35: "n",
    36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SYMBOL_CODES = {sym: code for code, sym in ANNOTATION_SYMBOLS.items()}

SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63
MAX_ANN_CODE = 49


@dataclass
class SignalSpec:
    file_name: str
    fmt: int
    gain: float
    baseline: int
    units: str = "mV"
    adc_resolution: int = 0
    adc_zero: int = 0
    initial_value: int = 0
    checksum: int = 0
    block_size: int = 0
    description: str = ""


@dataclass
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_frequency: float
    num_samples: int
    signals: list[SignalSpec] = field(default_factory=list)


@dataclass
class SignalFrame:
    """Raw ADC samples, one row per channel."""

    channels: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim == 1:
            ch = ch[None, :]
        if ch.ndim != 2:
            raise ParseError(f"signal frame must be 2-d (channels, samples), got {ch.shape}")
        if ch.size and (ch.min() < SAMPLE_MIN or ch.max() > SAMPLE_MAX):
            raise RangeError("sample outside the 12-bit signed range [-2048, 2047]")
        self.channels = ch.astype(np.int16)

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def num_samples(self) -> int:
        return self.channels.shape[1]

    def __eq__(self, other):
        return isinstance(other, SignalFrame) and np.array_equal(self.channels, other.channels)


@dataclass
class Annotation:
    sample_index: int
    code: int
    subtype: int = 0
    chan: int = 0
    num: int = 0
    aux: bytes | None = None

    @property
    def symbol(self) -> str:
        return ANNOTATION_SYMBOLS.get(self.code, "?")


class AnnotationList(list):
    """List of annotations with a flag for bytes found after the end sentinel."""

    trailing_bytes: bool = False


@dataclass
class Record:
    header: RecordHeader
    signal: SignalFrame
    annotations: list[Annotation]

    @property
    def name(self) -> str:
        return self.header.record_name


# ---------------------------------------------------------------------------
# header
# ---------------------------------------------------------------------------


def _parse_gain(token: str, adc_zero: int, lineno: int) -> tuple[float, int, str]:
    units = "mV"
    if "/" in token:
        token, units = token.split("/", 1)
    baseline = None
    if "(" in token:
        if not token.endswith(")"):
            raise ParseError(f"line {lineno}: malformed gain field {token!r}")
        token, base = token[:-1].split("(", 1)
        baseline = int(base)
    gain = float(token)
    if gain == 0:
        gain = 200.0  # WFDB default
    return gain, adc_zero if baseline is None else baseline, units


def parse_header(text: str) -> RecordHeader:
    """Parse the text of a ``.hea`` file.

    Comment lines (leading ``#``) and blank lines are ignored. Absent
    baselines default to the ADC zero, as WFDB does.
    """
    if not text or not text.strip():
        raise ParseError("empty header")
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ParseError("header has no record line")
    lineno, first = lines[0]
    parts = first.split()
    if len(parts) < 2:
        raise ParseError(f"line {lineno}: record line needs at least a name and signal count")
    name = parts[0].split("/")[0]
    if "/" in parts[0]:
        raise ParseError(f"line {lineno}: multi-segment records are not supported")
    try:
        nsig = int(parts[1])
        fs = float(parts[2].split("/")[0].split("(")[0]) if len(parts) > 2 else 250.0
        nsamp = int(parts[3]) if len(parts) > 3 else 0
    except ValueError:
        raise ParseError(f"line {lineno}: malformed record line {first!r}") from None
    if nsig < 1 or fs <= 0 or nsamp < 0:
        raise ParseError(f"line {lineno}: invalid record line values {first!r}")
    spec_lines = lines[1:]
    if len(spec_lines) != nsig:
        raise ParseError(f"header declares {nsig} signals but has {len(spec_lines)} signal lines")
    signals = []
    for lineno, ln in spec_lines:
        toks = ln.split(maxsplit=9)
        if len(toks) < 3:
            raise ParseError(f"line {lineno}: signal line needs file, format and gain")
        try:
            fmt = int(toks[1].split("x")[0].split(":")[0].split("+")[0])
            adc_res = int(toks[3]) if len(toks) > 3 else 12
            adc_zero = int(toks[4]) if len(toks) > 4 else 0
            gain, baseline, units = _parse_gain(toks[2], adc_zero, lineno)
            init = int(toks[5]) if len(toks) > 5 else 0
            checksum = int(toks[6]) if len(toks) > 6 else 0
            block = int(toks[7]) if len(toks) > 7 else 0
        except ValueError:
            raise ParseError(f"line {lineno}: malformed signal line {ln!r}") from None
        desc = " ".join(toks[8:]) if len(toks) > 8 else ""
        signals.append(SignalSpec(toks[0], fmt, gain, baseline, units, adc_res, adc_zero,
                                  init, checksum, block, desc))
    return RecordHeader(name, nsig, fs, nsamp, signals)


def format_header(header: RecordHeader) -> str:
    fs = f"{header.sampling_frequency:g}"
    out = [f"{header.record_name} {header.num_signals} {fs} {header.num_samples}"]
    for s in header.signals:
        out.append(f"{s.file_name} {s.fmt} {s.gain:g}({s.baseline})/{s.units} {s.adc_resolution} "
                   f"{s.adc_zero} {s.initial_value} {s.checksum} {s.block_size} {s.description}".rstrip())
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# format 212
# ---------------------------------------------------------------------------


def decode_format212(data: bytes, num_samples: int, num_channels: int) -> SignalFrame:
    """Unpack two 12-bit two's-complement samples from every 3 bytes.

    ``s1 = b0 | (b1 & 0x0F) << 8`` and ``s2 = b2 | (b1 & 0xF0) << 4``;
    samples are interleaved across channels.
    """
    total = num_samples * num_channels
    need = (total * 3 + 1) // 2
    if len(data) < need:
        raise ParseError(f"format 212 data truncated: expected {need} bytes, got {len(data)}")
    raw = np.frombuffer(bytes(data[:need]), dtype=np.uint8).astype(np.int32)
    if len(raw) % 3:
        raw = np.concatenate([raw, np.zeros(3 - len(raw) % 3, dtype=np.int32)])
    b0, b1, b2 = raw[0::3], raw[1::3], raw[2::3]
    out = np.empty(2 * len(b0), dtype=np.int32)
    out[0::2] = b0 | ((b1 & 0x0F) << 8)
    out[1::2] = b2 | ((b1 & 0xF0) << 4)
    out = out[:total]
    out[out > SAMPLE_MAX] -= 4096
    return SignalFrame(out.reshape(num_samples, num_channels).T.copy())


def encode_format212(frame: SignalFrame) -> bytes:
    ch = np.asarray(frame.channels, dtype=np.int32)
    if ch.size and (ch.min() < SAMPLE_MIN or ch.max() > SAMPLE_MAX):
        raise RangeError("sample outside the 12-bit signed range [-2048, 2047]")
    flat = ch.T.reshape(-1) & 0xFFF
    odd = len(flat) % 2
    if odd:
        flat = np.concatenate([flat, [0]])
    s1, s2 = flat[0::2], flat[1::2]
    packed = np.empty(3 * len(s1), dtype=np.uint8)
    packed[0::3] = s1 & 0xFF
    packed[1::3] = ((s1 >> 8) & 0x0F) | ((s2 >> 4) & 0xF0)
    packed[2::3] = s2 & 0xFF
    if odd:
        packed = packed[:-1]
    return packed.tobytes()


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


def parse_annotations(data: bytes) -> AnnotationList:
    """Decode an MIT-format annotation stream.

    Each little-endian 16-bit word carries a 6-bit code and a 10-bit value.
    Codes 1-49 are annotations at cumulative time + value; 59-63 are the
    SKIP/NUM/SUB/CHN/AUX pseudo-codes. The word 0x0000 ends the stream.
    NUM and CHN persist to later annotations, as in WFDB.
    """
    buf = bytes(data)
    n = len(buf)
    out = AnnotationList()
    time = 0
    num = 0
    chan = 0
    pos = 0
    current: Annotation | None = None
    while pos + 2 <= n:
        word = buf[pos] | (buf[pos + 1] << 8)
        pos += 2
        code, value = word >> 10, word & 0x3FF
        if word == 0:
            if pos < n and any(buf[pos:]):
                out.trailing_bytes = True
                log.warning("ignoring %d bytes after annotation end marker", n - pos)
            return out
        if 1 <= code <= MAX_ANN_CODE:
            time += value
            current = Annotation(time, code, 0, chan, num)
            out.append(current)
        elif code == SKIP:
            if pos + 4 > n:
                raise ParseError(f"SKIP at byte {pos - 2} runs past end of buffer")
            hi = buf[pos] | (buf[pos + 1] << 8)
            lo = buf[pos + 2] | (buf[pos + 3] << 8)
            pos += 4
            interval = struct.unpack("<i", struct.pack("<I", (hi << 16) | lo))[0]
            if interval < 0:
                raise ParseError(f"negative SKIP interval at byte {pos - 6}")
            time += interval
        elif code in (NUM, SUB, CHN):
            if current is None:
                raise ParseError(f"modifier code {code} at byte {pos - 2} precedes any annotation")
            signed = value - 256 if value > 127 else value
            if code == NUM:
                num = signed
                current.num = num
            elif code == SUB:
                current.subtype = signed
            else:
                chan = value & 0xFF
                current.chan = chan
        elif code == AUX:
            if current is None:
                raise ParseError(f"AUX at byte {pos - 2} precedes any annotation")
            end = pos + value
            if end > n:
                raise ParseError(f"AUX of {value} bytes at byte {pos - 2} overruns buffer of {n} bytes")
            current.aux = buf[pos:end]
            pos = end + (value & 1)
        else:
            raise ParseError(f"invalid annotation code {code} at byte {pos - 2}")
    return out


def write_annotations(annotations: list[Annotation]) -> bytes:
    """Encode annotations in MIT format (used to build fixtures)."""
    words = bytearray()

    def put(code: int, value: int) -> None:
        words.extend(struct.pack("<H", (code << 10) | (value & 0x3FF)))

    time = 0
    num = 0
    chan = 0
    for ann in sorted(annotations, key=lambda a: a.sample_index):
        delta = ann.sample_index - time
        if delta < 0:
            raise RangeError("annotations must not go backwards in time")
        if delta > 0x3FF:
            put(SKIP, 0)
            words.extend(struct.pack("<HH", (delta >> 16) & 0xFFFF, delta & 0xFFFF))
            delta = 0
        put(ann.code, delta)
        time = ann.sample_index
        if ann.subtype:
            put(SUB, ann.subtype & 0xFF)
        if ann.chan != chan:
            put(CHN, ann.chan & 0xFF)
            chan = ann.chan
        if ann.num != num:
            put(NUM, ann.num & 0xFF)
            num = ann.num
        if ann.aux:
            put(AUX, len(ann.aux))
            words.extend(ann.aux)
            if len(ann.aux) & 1:
                words.append(0)
    words.extend(b"\x00\x00")
    return bytes(words)


# ---------------------------------------------------------------------------
# records on disk
# ---------------------------------------------------------------------------


def read_record(data_dir: str | Path, name: str) -> Record:
    data_dir = Path(data_dir)
    header = parse_header((data_dir / f"{name}.hea").read_text())
    files = {s.file_name for s in header.signals}
    for s in header.signals:
        if s.fmt != 212:
            raise ParseError(f"record {name}: unsupported format {s.fmt} (only 212 is implemented)")
    if len(files) != 1:
        raise ParseError(f"record {name}: signals spread over several files are not supported")
    raw = (data_dir / files.pop()).read_bytes()
    nsamp = header.num_samples or (len(raw) * 2 // 3) // header.num_signals
    signal = decode_format212(raw, nsamp, header.num_signals)
    annotations = parse_annotations((data_dir / f"{name}.atr").read_bytes())
    return Record(header, signal, list(annotations))


def _checksum(samples: np.ndarray) -> int:
    v = int(samples.sum()) & 0xFFFF
    return v - 0x10000 if v >= 0x8000 else v


def write_record(data_dir: str | Path, name: str, frame: SignalFrame,
                 annotations: list[Annotation], fs: float = 360.0,
                 descriptions: tuple[str, ...] = ("MLII", "V1")) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    dat = f"{name}.dat"
    specs = []
    for i in range(frame.num_channels):
        ch = frame.channels[i].astype(np.int64)
        specs.append(SignalSpec(dat, 212, 200.0, 1024, "mV", 11, 1024,
                                int(ch[0]) if ch.size else 0,
                                _checksum(ch), 0,
                                descriptions[i] if i < len(descriptions) else f"ch{i}"))
    header = RecordHeader(name, frame.num_channels, fs, frame.num_samples, specs)
    (data_dir / f"{name}.hea").write_text(format_header(header))
    (data_dir / dat).write_bytes(encode_format212(frame))
    (data_dir / f"{name}.atr").write_bytes(write_annotations(annotations))


def list_records(data_dir: str | Path) -> list[str]:
    return sorted(p.stem for p in Path(data_dir).glob("*.hea")
                  if (p.with_suffix(".atr")).exists())

"""From records to labelled 128x128 beat images.

Covers R-peak anchored segmentation, the MIT-BIH -> AAMI class remap,
rasterisation of a beat window into a grayscale image, train/test split
construction, and a synthetic beat generator used when no MIT-BIH copy is
available.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .wfdb import SYMBOL_CODES, Annotation, Record, RecordHeader, SignalFrame

log = logging.getLogger(__name__)

IMAGE_SIZE = 128
DEFAULT_EXCLUDED = ("102", "104", "107", "217", "218")
AAMI_CLASSES = ("N", "S", "V", "F", "Q")

AAMI_MAP = {
    "N": "N", "L": "N", "R": "N", "e": "N", "j": "N",
    "A": "S", "a": "S", "J": "S", "S": "S",
    "V": "V", "E": "V",
    "F": "F",
    "/": "Q", "f": "Q", "Q": "Q",
}

DEFAULT_TEST_COUNTS = {"N": 1000}

SYNTH_KINDS = ("normal", "inverted_qrs", "missing_p", "scaled")
SYNTH_CODES = {"normal": "N", "inverted_qrs": "V", "missing_p": "J", "scaled": "F"}


class NotABeat(ContractError):
    """Annotation symbol that is not one of the 15 beat classes."""


def map_aami(mit_code: str) -> str:
    try:
        return AAMI_MAP[mit_code]
    except KeyError:
        raise NotABeat(f"{mit_code!r} is not a beat annotation") from None


@dataclass
class Beat:
    record_id: str
    r_index: int
    samples: np.ndarray
    mit_code: str


@dataclass
class BeatImage:
    pixels: np.ndarray
    aami_class: str
    source: tuple[str, int]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"beat image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ContractError("beat image pixels must lie in [0, 1]")
        if self.aami_class not in AAMI_CLASSES:
            raise ContractError(f"unknown AAMI class {self.aami_class!r}")
        self.pixels = px

    @property
    def source_id(self) -> str:
        return f"{self.source[0]}:{self.source[1]}"


@dataclass
class DatasetSplit:
    train: list[BeatImage]
    test: list[BeatImage]
    excluded_records: list[str] = field(default_factory=list)

    def histogram(self, which: str) -> dict[str, int]:
        images = self.train if which == "train" else self.test
        counts = dict.fromkeys(AAMI_CLASSES, 0)
        for im in images:
            counts[im.aami_class] += 1
        return counts


def window_bounds(r_index: int, fs: float, pre_s: float, post_s: float) -> tuple[int, int]:
    return r_index - int(round(pre_s * fs)), r_index + int(round(post_s * fs))


def segment_beats(signal: np.ndarray, annotations: Iterable[Annotation], fs: float,
                  pre_s: float = 0.3, post_s: float = 0.4, record_id: str = "") -> list[Beat]:
    """Cut ``[r - pre, r + post)`` windows around every beat annotation.

    Windows that fall off either end of the record are dropped, as are
    annotations that are not beats.
    """
    if fs <= 0 or pre_s <= 0 or post_s <= 0:
        raise ConfigError("fs, pre_s and post_s must be positive")
    signal = np.asarray(signal)
    if signal.ndim == 2:
        signal = signal[0]
    beats = []
    for ann in annotations:
        sym = ann.symbol
        if sym not in AAMI_MAP:
            continue
        lo, hi = window_bounds(ann.sample_index, fs, pre_s, post_s)
        if lo < 0 or hi > len(signal):
            continue
        beats.append(Beat(record_id, ann.sample_index, signal[lo:hi].astype(np.float64), sym))
    return beats


def rasterize_beat(beat: Beat, size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw the beat as a connected one-pixel polyline on a blank canvas.

    The window is linearly resampled to ``size`` columns and min-max
    normalised; row 0 holds the maximum. A flat window becomes a line on
    the middle row.
    """
    x = np.asarray(beat.samples, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot rasterize an empty beat")
    cols = np.interp(np.linspace(0.0, x.size - 1, size), np.arange(x.size), x)
    lo, hi = cols.min(), cols.max()
    if hi == lo:
        rows = np.full(size, size // 2, dtype=np.int64)
    else:
        rows = np.rint((hi - cols) / (hi - lo) * (size - 1)).astype(np.int64)
    prev = np.concatenate([rows[:1], rows[:-1]])
    top = np.where(rows > prev, prev + 1, rows)
    bottom = np.where(rows < prev, prev - 1, rows)
    top, bottom = np.minimum(top, rows), np.maximum(bottom, rows)
    r = np.arange(size)[:, None]
    return ((r >= top[None, :]) & (r <= bottom[None, :])).astype(np.float64)


def beat_image(beat: Beat) -> BeatImage:
    return BeatImage(rasterize_beat(beat), map_aami(beat.mit_code), (beat.record_id, int(beat.r_index)))


def segment_record(record: Record, pre_s: float = 0.3, post_s: float = 0.4) -> list[Beat]:
    return segment_beats(record.signal.channels[0], record.annotations,
                         record.header.sampling_frequency, pre_s, post_s, record.name)


def build_splits(records: Sequence[Record], excluded: Iterable[str] = DEFAULT_EXCLUDED,
                 seed: int = 0, pre_s: float = 0.3, post_s: float = 0.4,
                 test_counts: dict[str, int | None] | None = None,
                 max_train: int | None = None) -> DatasetSplit:
    """Segment, label and split records into an N-only train set and a mixed test set.

    ``test_counts`` caps the number of test beats per AAMI class; classes not
    listed go to the test set in full. N beats drawn for testing are
    withheld from training (at most half of them, when N beats are scarce). ``max_train`` optionally subsamples the train set.
    All sampling uses ``seed``.
    """
    if not records:
        raise ConfigError("no records to build a dataset from")
    excluded = sorted({str(e) for e in excluded})
    counts = dict(DEFAULT_TEST_COUNTS if test_counts is None else test_counts)
    by_class: dict[str, list[Beat]] = {c: [] for c in AAMI_CLASSES}
    for rec in sorted(records, key=lambda r: r.name):
        if rec.name in excluded:
            continue
        for beat in segment_record(rec, pre_s, post_s):
            by_class[map_aami(beat.mit_code)].append(beat)
    rng = np.random.default_rng(seed)

    def pick(items: list[Beat], n: int | None) -> tuple[list[Beat], list[Beat]]:
        if n is None or n >= len(items):
            return items, []
        chosen = np.zeros(len(items), dtype=bool)
        chosen[rng.choice(len(items), size=n, replace=False)] = True
        return ([b for b, c in zip(items, chosen) if c],
                [b for b, c in zip(items, chosen) if not c])

    test_beats: list[Beat] = []
    train_beats: list[Beat] = []
    for cls in AAMI_CLASSES:
        n = counts.get(cls)
        if cls == "N" and n is not None and n >= len(by_class["N"]):
            n = len(by_class["N"]) // 2
            log.warning("only %d N beats; holding out %d for testing", len(by_class["N"]), n)
        held, rest = pick(by_class[cls], n)
        test_beats.extend(held)
        if cls == "N":
            train_beats = rest
    if max_train is not None:
        train_beats, _ = pick(train_beats, max_train)
    return DatasetSplit([beat_image(b) for b in train_beats],
                        [beat_image(b) for b in test_beats], excluded)


# ---------------------------------------------------------------------------
# synthetic beats
# ---------------------------------------------------------------------------

# (amplitude, centre relative to R in s, width in s) for P, QRS, T
_WAVES = {"p": (0.15, -0.14, 0.022), "qrs": (1.0, 0.0, 0.012), "t": (0.3, 0.24, 0.04)}
# wave whose amplitude the ``scaled`` kind multiplies by 2.5
_SCALED_WAVE = "t"


def synth_beat(kind: str, rng: np.random.Generator, fs: float = 360.0,
               pre_s: float = 0.3, post_s: float = 0.4, record_id: str = "synthetic",
               r_index: int | None = None, noise: float = 0.003, jitter: float = 1.0) -> Beat:
    """Sum of three Gaussian bumps (P, QRS, T) with jitter and white noise.

    ``inverted_qrs`` flips the QRS sign, ``missing_p`` drops the P wave and
    ``scaled`` multiplies the T amplitude by 2.5 (scaling the whole beat
    would vanish under per-beat min-max normalisation). ``jitter`` scales
    the per-beat spread of amplitudes (3 %), widths (3 %) and P/T centres
    (1.5 ms); the QRS stays on the R peak. Amplitudes are in mV, converted
    to ADC units at 200 adu/mV.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic beat kind {kind!r}")
    pre, post = int(round(pre_s * fs)), int(round(post_s * fs))
    t = (np.arange(pre + post) - pre) / fs
    x = np.zeros_like(t)
    for name, (amp, centre, width) in _WAVES.items():
        amp = amp * (1.0 + 0.03 * jitter * rng.standard_normal())
        shift = 0.0015 * jitter * rng.standard_normal()
        if name != "qrs":  # windows are anchored on the R peak
            centre = centre + shift
        width = width * (1.0 + 0.03 * jitter * rng.standard_normal())
        if name == "p" and kind == "missing_p":
            continue
        if name == "qrs" and kind == "inverted_qrs":
            amp = -amp
        if name == _SCALED_WAVE and kind == "scaled":
            amp = 2.5 * amp
        x += amp * np.exp(-0.5 * ((t - centre) / width) ** 2)
    x += noise * rng.standard_normal(t.size)
    return Beat(record_id, pre if r_index is None else r_index, 200.0 * x, SYNTH_CODES[kind])


def synth_images(kinds: Sequence[str], seed: int, record_id: str = "synthetic") -> list[BeatImage]:
    rng = np.random.default_rng(seed)
    return [beat_image(synth_beat(k, rng, record_id=record_id, r_index=i)) for i, k in enumerate(kinds)]


def synth_corpus(seed: int, n_train: int = 512, n_test_normal: int = 200,
                 n_test_anomalous: int = 200) -> DatasetSplit:
    """Normal-only train set plus a test set mixing normals with the three anomaly kinds."""
    anomalies = [SYNTH_KINDS[1 + i % 3] for i in range(n_test_anomalous)]
    train = synth_images(["normal"] * n_train, seed, "synth-train")
    test = synth_images(["normal"] * n_test_normal + anomalies, seed + 1, "synth-test")
    return DatasetSplit(train, test, [])


def synth_record(name: str, kinds: Sequence[str], seed: int, fs: float = 360.0,
                 rr_s: float = 0.8, lead_s: float = 0.5) -> Record:
    """A two-channel record of consecutive synthetic beats with a matching annotation stream.

    Non-beat rhythm (``+``) annotations are interleaved so readers exercise
    the skip path.
    """
    rng = np.random.default_rng(seed)
    rr = int(round(rr_s * fs))
    lead = int(round(lead_s * fs))
    n = 2 * lead + rr * len(kinds)
    sig = np.zeros(n)
    anns = [Annotation(0, SYMBOL_CODES["+"], aux=b"(N\x00")]
    for i, kind in enumerate(kinds):
        r = lead + i * rr
        beat = synth_beat(kind, rng, fs, pre_s=rr_s / 2, post_s=rr_s / 2)
        start = r - rr // 2
        sig[start:start + beat.samples.size] += beat.samples
        anns.append(Annotation(r, SYMBOL_CODES[SYNTH_CODES[kind]]))
    ch0 = np.clip(np.rint(sig), -2048, 2047).astype(np.int16)
    ch1 = np.clip(np.rint(0.5 * sig), -2048, 2047).astype(np.int16)
    frame = SignalFrame(np.stack([ch0, ch1]))
    header = RecordHeader(name, 2, fs, n)
    return Record(header, frame, anns)


# ---------------------------------------------------------------------------
# split containers and manifest
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("record_id", "r_index", "aami_class", "split")


def save_split(path: str | Path, images: Sequence[BeatImage]) -> None:
    """Store images as a compressed npz of bit-packed pixels plus metadata.

    Pixels are quantised to 8 bits; rasterised beats are binary so this is lossless.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if images:
        px = np.stack([im.pixels for im in images])
    else:
        px = np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))
    np.savez_compressed(
        path,
        pixels=np.rint(px * 255).astype(np.uint8),
        aami_class=np.array([im.aami_class for im in images], dtype="U1"),
        record_id=np.array([im.source[0] for im in images], dtype="U32"),
        r_index=np.array([im.source[1] for im in images], dtype=np.int64),
    )


def load_split(path: str | Path) -> list[BeatImage]:
    with np.load(path) as z:
        px = z["pixels"].astype(np.float64) / 255.0
        return [BeatImage(p, str(c), (str(r), int(i)))
                for p, c, r, i in zip(px, z["aami_class"], z["record_id"], z["r_index"])]


def write_manifest(path: str | Path, split: DatasetSplit) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for name, images in (("train", split.train), ("test", split.test)):
            for im in images:
                w.writerow([im.source[0], im.source[1], im.aami_class, name])

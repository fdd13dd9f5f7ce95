"""I/Q capture storage, sliding-window segmentation, and leakage-safe splits.

Captures are stored in the little-endian "IQC1" container: magic ``IQC1``,
u32 format_version=1, u32 device_id, u32 channel_id, f64 sample_rate_hz,
f64 center_freq_hz, u64 num_samples, then num_samples interleaved
(f32 I, f32 Q) pairs. A manifest is a JSON array holding one
``{"format_version": 1}`` object followed by
``{"path", "device_id", "channel_id"}`` entries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .seeding import derive_rng

MAGIC = b"IQC1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIddQ")


class IQFileError(Exception):
    """Base class for capture container problems."""


class BadMagicError(IQFileError):
    pass


class TruncatedFileError(IQFileError):
    pass


class VersionMismatchError(IQFileError):
    pass


class DegenerateWindowError(ValueError):
    """Normalization requested on an all-zero window."""


class SplitError(ValueError):
    """Not enough captures for a stratified three-way split."""


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class NormScheme(Enum):
    UNIT_RMS = "unit_rms"
    NONE = "none"


@dataclass
class IQCapture:
    """One complex-baseband recording with device/channel metadata."""

    device_id: int
    channel_id: int
    sample_rate_hz: float
    center_freq_hz: float
    samples: np.ndarray  # complex64

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.complex64)
        if self.samples.size == 0:
            raise ValueError("capture must contain at least one sample")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if self.center_freq_hz < 0:
            raise ValueError(f"center_freq_hz must be >= 0, got {self.center_freq_hz}")

    def __len__(self) -> int:
        return int(self.samples.size)


def write_capture(capture: IQCapture, path) -> None:
    if not np.all(np.isfinite(capture.samples.view(np.float32))):
        raise ValueError("capture contains non-finite samples")
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION,
        int(capture.device_id), int(capture.channel_id),
        float(capture.sample_rate_hz), float(capture.center_freq_hz),
        capture.samples.size,
    )
    payload = capture.samples.astype("<c8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_capture(path) -> IQCapture:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TruncatedFileError(f"{path}: header truncated ({len(head)} bytes)")
        magic, version, device_id, channel_id, rate, freq, n = _HEADER.unpack(head)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{path}: format version {version}, expected {FORMAT_VERSION}")
        payload = fh.read(8 * n)
        if len(payload) < 8 * n:
            raise TruncatedFileError(
                f"{path}: payload truncated ({len(payload)} of {8 * n} bytes)")
    samples = np.frombuffer(payload, dtype="<c8").astype(np.complex64, copy=True)
    return IQCapture(device_id, channel_id, rate, freq, samples)


@dataclass
class SignalWindow:
    """Fixed-length two-channel slice of a capture (row 0 = I, row 1 = Q)."""

    values: np.ndarray  # float32 [2, W]
    device_label: int
    domain_tag: Domain
    origin: tuple  # (capture id, start index)


@dataclass
class WindowedDataset:
    windows: list
    num_classes: int
    split: Split

    def __post_init__(self):
        lens = {w.values.shape[1] for w in self.windows}
        if len(lens) > 1:
            raise ValueError(f"mixed window lengths in dataset: {sorted(lens)}")
        for w in self.windows:
            if not (0 <= w.device_label < self.num_classes):
                raise ValueError(
                    f"device_label {w.device_label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_len(self) -> int:
        return self.windows[0].values.shape[1] if self.windows else 0

    def values_array(self) -> np.ndarray:
        return np.stack([w.values for w in self.windows]).astype(np.float32)

    def labels_array(self) -> np.ndarray:
        return np.array([w.device_label for w in self.windows], dtype=np.int64)

    def without_labels(self) -> "UnlabeledWindows":
        """Value-only view for adaptation; never touches the label fields."""
        return UnlabeledWindows(values=[w.values for w in self.windows])


@dataclass
class UnlabeledWindows:
    """Window values with all identity stripped; the only shape the
    adversarial-adaptation loop is allowed to consume."""

    values: list

    def __len__(self) -> int:
        return len(self.values)

    @property
    def window_len(self) -> int:
        return self.values[0].shape[1] if self.values else 0


@dataclass
class ManifestEntry:
    path: str
    device_id: int
    channel_id: int


@dataclass
class Manifest:
    entries: list
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")


def save_manifest(manifest: Manifest, path) -> None:
    doc = [{"format_version": manifest.format_version}]
    doc += [{"path": e.path, "device_id": e.device_id, "channel_id": e.channel_id}
            for e in manifest.entries]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_manifest(path) -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    version = None
    entries = []
    for item in doc:
        if "format_version" in item:
            version = item["format_version"]
        else:
            entries.append(ManifestEntry(
                path=item["path"],
                device_id=int(item["device_id"]),
                channel_id=int(item["channel_id"]),
            ))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: manifest format version {version}, expected {FORMAT_VERSION}")
    return Manifest(entries=entries)


def segment(capture: IQCapture, window_len: int, hop: int, *,
            capture_id=None, device_label: Optional[int] = None,
            domain: Domain = Domain.SOURCE) -> list:
    """Slide a length-W window with hop H over the capture.

    Windows start at 0, H, 2H, ...; a capture shorter than W yields none.
    Values are raw slices of the capture samples (no scaling).
    """
    if window_len < 1:
        raise ValueError(f"window_len must be >= 1, got {window_len}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    n = len(capture)
    if n < window_len:
        return []
    count = (n - window_len) // hop + 1
    i_chan = capture.samples.real
    q_chan = capture.samples.imag
    label = capture.device_id if device_label is None else device_label
    cid = capture_id if capture_id is not None else (capture.device_id,
                                                     capture.channel_id)
    out = []
    for w in range(count):
        start = w * hop
        values = np.stack([i_chan[start:start + window_len],
                           q_chan[start:start + window_len]]).astype(
            np.float32, copy=False)
        out.append(SignalWindow(values=values, device_label=label,
                                domain_tag=domain, origin=(cid, start)))
    return out


def normalize(window: SignalWindow, scheme: NormScheme) -> SignalWindow:
    """Unit-RMS rescaling of both channels jointly, or identity."""
    if scheme is NormScheme.NONE:
        return window
    rms = float(np.sqrt(np.mean(np.square(window.values, dtype=np.float64))
                        * 2.0))
    # mean over I^2+Q^2 pairs equals 2 * mean over the flat [2, W] array
    if rms == 0.0:
        raise DegenerateWindowError(
            f"all-zero window at origin {window.origin}")
    return replace(window, values=(window.values / rms).astype(np.float32))


def _largest_remainder_counts(n: int, ratios: Sequence[float]) -> list:
    quotas = [n * r for r in ratios]
    counts = [int(q) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for _ in range(n - sum(counts)):
        i = max(range(len(ratios)), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0
    # a 3-way split must not starve any side; borrow from the largest
    while min(counts) == 0:
        src = max(range(len(counts)), key=lambda j: (counts[j], -j))
        dst = counts.index(0)
        counts[src] -= 1
        counts[dst] += 1
    return counts


def build_dataset(manifest: Manifest, window_len: int, hop: int,
                  scheme: NormScheme, split_ratios: Sequence[float],
                  seed: int, *, base_dir=None,
                  domain: Domain = Domain.SOURCE):
    """Read, window, normalize, and split captures into train/val/test.

    The split is at capture granularity (all windows of one capture land in
    exactly one split) and stratified per device, so overlapping windows can
    never leak across splits. Deterministic for a given seed.
    """
    if len(split_ratios) != 3:
        raise ValueError("split_ratios must have exactly 3 entries")
    if any(r <= 0 for r in split_ratios):
        raise ValueError(f"split ratios must be positive, got {split_ratios}")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(split_ratios)}")

    by_device: dict[int, list[ManifestEntry]] = {}
    for entry in manifest.entries:
        by_device.setdefault(entry.device_id, []).append(entry)
    device_ids = sorted(by_device)
    label_of = {d: i for i, d in enumerate(device_ids)}
    num_classes = len(device_ids)

    assignment: dict[str, Split] = {}
    splits = (Split.TRAIN, Split.VAL, Split.TEST)
    for device_id in device_ids:
        entries = by_device[device_id]
        if len(entries) < 3:
            raise SplitError(
                f"device {device_id} has {len(entries)} captures; a stratified "
                "3-way split needs at least 3")
        counts = _largest_remainder_counts(len(entries), split_ratios)
        order = list(range(len(entries)))
        derive_rng(seed, "split", device_id).shuffle(order)
        cursor = 0
        for split, c in zip(splits, counts):
            for idx in order[cursor:cursor + c]:
                assignment[entries[idx].path] = split
            cursor += c

    base = Path(base_dir) if base_dir is not None else None
    buckets: dict[Split, list] = {s: [] for s in splits}
    for entry in manifest.entries:
        file_path = Path(entry.path)
        if base is not None and not file_path.is_absolute():
            file_path = base / file_path
        capture = read_capture(file_path)
        windows = segment(capture, window_len, hop, capture_id=entry.path,
                          device_label=label_of[entry.device_id], domain=domain)
        windows = [normalize(w, scheme) for w in windows]
        buckets[assignment[entry.path]].extend(windows)

    return tuple(WindowedDataset(windows=buckets[s], num_classes=num_classes,
                                 split=s) for s in splits)

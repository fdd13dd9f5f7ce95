"""Synthetic I/Q captures with device fingerprints and channel effects.

Device impairments (IQ gain/phase imbalance, cubic PA distortion, carrier
frequency offset, DC offset) are what a classifier is supposed to key on;
channel effects (short FIR, extra CFO, AWGN) are what it must become
invariant to. Keeping the two separate creates a controllable domain gap:
the same devices "transmit" through different channels.

The waveform is pulse-shaped QPSK (root-raised-cosine, roll-off 0.35,
span 8 symbols) — any wideband shaped waveform works for fingerprinting;
this one is cheap and reproducible.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .iqdata import IQCapture, Manifest, ManifestEntry, save_manifest, write_capture
from .seeding import derive_rng

QPSK_POINTS = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / math.sqrt(2.0)


@dataclass
class DeviceProfile:
    """Transmitter-side imperfections; the fingerprint."""

    gain_imbalance: float = 0.0   # epsilon on the Q branch
    phase_skew: float = 0.0       # radians
    cfo_hz: float = 0.0
    dc_offset: complex = 0j
    pa_cubic: float = 0.0         # third-order coefficient

    def __post_init__(self):
        vals = [self.gain_imbalance, self.phase_skew, self.cfo_hz,
                self.dc_offset.real, self.dc_offset.imag, self.pa_cubic]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("device profile fields must be finite")


@dataclass
class ChannelProfile:
    """Propagation-side effects; the domain."""

    fir_taps: np.ndarray          # complex, tap 0 nonzero, at most 8 taps
    snr_db: float = math.inf      # inf disables noise
    channel_cfo_hz: float = 0.0

    def __post_init__(self):
        self.fir_taps = np.asarray(self.fir_taps, dtype=np.complex128)
        if self.fir_taps.size == 0:
            raise ValueError("fir_taps must be non-empty")
        if self.fir_taps.size > 8:
            raise ValueError(f"at most 8 FIR taps supported, got {self.fir_taps.size}")
        if self.fir_taps[0] == 0:
            raise ValueError("fir_taps[0] must be nonzero")
        if not np.all(np.isfinite(self.fir_taps)):
            raise ValueError("fir_taps must be finite")


@dataclass
class SimConfig:
    """Defaults are sized for desk-scale runs: at 2 samples/symbol a
    1024-sample window covers 512 symbols, which makes the per-window
    statistics of the (deliberately subtle) impairments resolvable, and the
    device oscillator offsets rotate fast enough per sample for short conv
    kernels to see them."""

    num_devices: int = 4
    channels: dict = field(default_factory=lambda: default_channel_profiles([1, 2]))
    captures_per_device_per_channel: int = 16
    samples_per_capture: int = 8192
    sample_rate_hz: float = 6250.0
    symbol_rate_hz: float = 3125.0
    seed: int = 0
    device_profiles: Optional[list] = None  # default: spread for num_devices

    def __post_init__(self):
        if self.num_devices < 2:
            raise ValueError(f"need at least 2 devices, got {self.num_devices}")
        if self.samples_per_capture < 1:
            raise ValueError("samples_per_capture must be positive")
        if self.captures_per_device_per_channel < 1:
            raise ValueError("captures_per_device_per_channel must be positive")
        if not self.channels:
            raise ValueError("at least one channel profile is required")
        if self.device_profiles is None:
            self.device_profiles = default_device_profiles(self.num_devices)
        if len(self.device_profiles) != self.num_devices:
            raise ValueError(
                f"{len(self.device_profiles)} device profiles for "
                f"{self.num_devices} devices")


def default_device_profiles(num_devices: int = 4) -> list:
    """Learnable but non-trivial fingerprint spread for four devices.

    DC offsets stay zero so device identity never shows up in plain window
    means (a mean-feature baseline must stay at chance level).
    """
    eps = [-0.08, -0.03, 0.03, 0.08]
    phi = [-0.06, -0.02, 0.02, 0.06]
    a3 = [0.01, 0.02, 0.03, 0.04]
    cfo = [-400.0, -150.0, 150.0, 400.0]
    if num_devices > len(eps):
        raise ValueError(
            f"default profiles cover up to {len(eps)} devices; pass explicit "
            f"profiles for {num_devices}")
    return [DeviceProfile(gain_imbalance=eps[i], phase_skew=phi[i],
                          cfo_hz=cfo[i], dc_offset=0j, pa_cubic=a3[i])
            for i in range(num_devices)]


def default_channel_profiles(channel_ids) -> dict:
    """Per-channel defaults; 1 and 3 are benign, 2 and 4 are harsh."""
    table = {
        1: ChannelProfile(fir_taps=np.array([1.0, 0.25 + 0.1j]),
                          snr_db=20.0, channel_cfo_hz=0.0),
        2: ChannelProfile(fir_taps=np.array([1.0, -0.2j, 0.15]),
                          snr_db=12.0, channel_cfo_hz=900.0),
        3: ChannelProfile(fir_taps=np.array([1.0, 0.18 - 0.12j]),
                          snr_db=18.0, channel_cfo_hz=-200.0),
        4: ChannelProfile(fir_taps=np.array([1.0, 0.1 + 0.22j, -0.1j]),
                          snr_db=13.0, channel_cfo_hz=2600.0),
    }
    out = {}
    for cid in channel_ids:
        if cid not in table:
            raise ValueError(f"no default profile for channel id {cid}")
        out[int(cid)] = table[cid]
    return out


def _rrc_taps(beta: float, span_symbols: int, sps: int) -> np.ndarray:
    """Root-raised-cosine impulse response, unit energy."""
    n = span_symbols * sps
    t = np.arange(-n // 2, n // 2 + 1) / sps  # in symbol periods
    taps = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            taps[i] = 1.0 - beta + 4.0 * beta / math.pi
        elif abs(abs(ti) - 1.0 / (4.0 * beta)) < 1e-9:
            taps[i] = (beta / math.sqrt(2.0)) * (
                (1.0 + 2.0 / math.pi) * math.sin(math.pi / (4.0 * beta))
                + (1.0 - 2.0 / math.pi) * math.cos(math.pi / (4.0 * beta)))
        else:
            num = (math.sin(math.pi * ti * (1.0 - beta))
                   + 4.0 * beta * ti * math.cos(math.pi * ti * (1.0 + beta)))
            den = math.pi * ti * (1.0 - (4.0 * beta * ti) ** 2)
            taps[i] = num / den
    return taps / np.sqrt(np.sum(taps ** 2))


def gen_baseband(num_samples: int, symbol_rate: float, sample_rate: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Unit-power RRC-shaped QPSK at the requested rates."""
    if sample_rate < 2.0 * symbol_rate:
        raise ValueError(
            f"sample_rate {sample_rate} must be at least twice the symbol "
            f"rate {symbol_rate}")
    sps_f = sample_rate / symbol_rate
    sps = int(round(sps_f))
    if abs(sps_f - sps) > 1e-9 * sps_f:
        raise ValueError(
            f"sample_rate must be an integer multiple of symbol_rate "
            f"(got ratio {sps_f})")
    span = 8
    n_symbols = -(-num_samples // sps) + span  # headroom for the filter tails
    symbols = QPSK_POINTS[rng.integers(0, 4, size=n_symbols)]
    upsampled = np.zeros(n_symbols * sps, dtype=np.complex128)
    upsampled[::sps] = symbols
    shaped = np.convolve(upsampled, _rrc_taps(0.35, span, sps),
                         mode="same")[:num_samples]
    power = np.mean(np.abs(shaped) ** 2)
    return shaped / math.sqrt(power)


def apply_device(x: np.ndarray, profile: DeviceProfile,
                 sample_rate: float) -> np.ndarray:
    """Impairment chain in transmitter order: imbalance, PA, CFO, DC."""
    i = x.real
    q = x.imag
    eps, phi = profile.gain_imbalance, profile.phase_skew
    y = i + 1j * ((1.0 + eps) * (q * math.cos(phi) + i * math.sin(phi)))
    if profile.pa_cubic != 0.0:
        y = y + profile.pa_cubic * np.abs(y) ** 2 * y
    if profile.cfo_hz != 0.0:
        n = np.arange(y.size)
        y = y * np.exp(2j * math.pi * profile.cfo_hz * n / sample_rate)
    if profile.dc_offset != 0:
        y = y + profile.dc_offset
    return y


def apply_channel(x: np.ndarray, profile: ChannelProfile, sample_rate: float,
                  rng: np.random.Generator) -> np.ndarray:
    """FIR (zero-padded head, same length), channel CFO, then AWGN.

    Noise power follows the post-FIR signal power: per-component variance
    sigma^2 = P / (2 * 10^(snr_db/10)).
    """
    y = np.convolve(x, profile.fir_taps, mode="full")[:x.size]
    if profile.channel_cfo_hz != 0.0:
        n = np.arange(y.size)
        y = y * np.exp(2j * math.pi * profile.channel_cfo_hz * n / sample_rate)
    if math.isfinite(profile.snr_db):
        p_signal = np.mean(np.abs(y) ** 2)
        sigma = math.sqrt(p_signal / (2.0 * 10.0 ** (profile.snr_db / 10.0)))
        noise = rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size)
        y = y + sigma * noise
    return y


def render_capture(config: SimConfig, device_id: int, channel_id: int,
                   capture_index: int) -> IQCapture:
    """Deterministically synthesize one capture from its coordinates."""
    rng = derive_rng(config.seed, "sim", device_id, channel_id, capture_index)
    base = gen_baseband(config.samples_per_capture, config.symbol_rate_hz,
                        config.sample_rate_hz, rng)
    profile = config.device_profiles[device_id - 1]
    y = apply_device(base, profile, config.sample_rate_hz)
    y = apply_channel(y, config.channels[channel_id], config.sample_rate_hz, rng)
    return IQCapture(device_id=device_id, channel_id=channel_id,
                     sample_rate_hz=config.sample_rate_hz, center_freq_hz=0.0,
                     samples=y.astype(np.complex64))


def synth_dataset(config: SimConfig, out_dir, threads: Optional[int] = None,
                  manifest_name: str = "manifest.json") -> Manifest:
    """Write one IQC1 file per (device, channel, capture) plus a manifest.

    Every file draws from its own named rng stream, so generation is
    byte-identical whether run serially or in parallel.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(d, c, i)
            for d in range(1, config.num_devices + 1)
            for c in sorted(config.channels)
            for i in range(config.captures_per_device_per_channel)]

    def render_and_write(job):
        device_id, channel_id, idx = job
        name = f"dev{device_id}_ch{channel_id}_cap{idx:03d}.iqc"
        capture = render_capture(config, device_id, channel_id, idx)
        try:
            write_capture(capture, out / name)
        except OSError as exc:
            raise OSError(f"failed writing capture {out / name}: {exc}") from exc
        return ManifestEntry(path=name, device_id=device_id,
                             channel_id=channel_id)

    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(render_and_write, jobs))
    else:
        entries = [render_and_write(job) for job in jobs]

    manifest = Manifest(entries=entries)
    save_manifest(manifest, out / manifest_name)
    return manifest

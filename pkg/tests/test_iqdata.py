import hashlib
import struct

import numpy as np
import pytest

from crossrf.iqdata import (
    BadMagicError,
    DegenerateWindowError,
    Domain,
    IQCapture,
    Manifest,
    ManifestEntry,
    NormScheme,
    SplitError,
    TruncatedFileError,
    VersionMismatchError,
    build_dataset,
    load_manifest,
    normalize,
    read_capture,
    save_manifest,
    segment,
    write_capture,
)


def make_capture(n=16, device_id=1, channel_id=2, seed=0):
    rng = np.random.default_rng(seed)
    samples = (rng.standard_normal(n) + 1j * rng.standard_normal(n)).astype(
        np.complex64)
    return IQCapture(device_id=device_id, channel_id=channel_id,
                     sample_rate_hz=1e6, center_freq_hz=2.4e9, samples=samples)


class TestCaptureFile:
    def test_small_round_trip(self, tmp_path):
        cap = IQCapture(3, 1, 50e6, 2.4435e9,
                        np.array([1 + 2j, -0.5j, 3.0], dtype=np.complex64))
        path = tmp_path / "c.iqc"
        write_capture(cap, path)
        back = read_capture(path)
        assert back.device_id == 3
        assert back.channel_id == 1
        assert back.sample_rate_hz == 50e6
        assert back.center_freq_hz == 2.4435e9
        np.testing.assert_array_equal(back.samples, cap.samples)

    def test_large_round_trip_hash_equal(self, tmp_path):
        cap = make_capture(n=100_000, seed=7)
        path = tmp_path / "big.iqc"
        write_capture(cap, path)
        back = read_capture(path)
        h1 = hashlib.sha256(cap.samples.tobytes()).hexdigest()
        h2 = hashlib.sha256(back.samples.tobytes()).hexdigest()
        assert h1 == h2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.iqc"
        write_capture(make_capture(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_capture(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "trunc.iqc"
        path.write_bytes(b"IQC1\x01")
        with pytest.raises(TruncatedFileError):
            read_capture(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.iqc"
        write_capture(make_capture(n=10), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TruncatedFileError):
            read_capture(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v9.iqc"
        write_capture(make_capture(), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            read_capture(path)


class TestSegment:
    def test_count_and_starts(self):
        cap = make_capture(n=10)
        windows = segment(cap, 4, 2)
        assert len(windows) == 4
        assert [w.origin[1] for w in windows] == [0, 2, 4, 6]

    def test_too_short_capture_yields_nothing(self):
        assert segment(make_capture(n=3), 4, 1) == []

    def test_count_formula_large(self):
        cap = make_capture(n=4096)
        assert len(segment(cap, 1024, 512)) == 7

    def test_windows_are_pure_slices(self):
        cap = make_capture(n=64, seed=3)
        for w in segment(cap, 16, 8):
            start = w.origin[1]
            np.testing.assert_array_equal(
                w.values[0], cap.samples.real[start:start + 16])
            np.testing.assert_array_equal(
                w.values[1], cap.samples.imag[start:start + 16])

    @pytest.mark.parametrize("n", [1, 2, 17, 50, 128, 200])
    def test_count_formula_exhaustive_small_space(self, n):
        cap = make_capture(n=n)
        for w_len in range(1, n + 1):
            for hop in range(1, n + 1):
                got = len(segment(cap, w_len, hop))
                # independent enumeration of valid start offsets
                expected = sum(1 for s in range(0, n, hop) if s + w_len <= n)
                assert got == expected, (n, w_len, hop)


class TestNormalize:
    def test_constant_window(self):
        values = np.stack([np.full(8, 3.0), np.full(8, 4.0)]).astype(np.float32)
        from crossrf.iqdata import SignalWindow
        w = SignalWindow(values=values, device_label=0,
                         domain_tag=Domain.SOURCE, origin=("c", 0))
        out = normalize(w, NormScheme.UNIT_RMS)
        rms = np.sqrt(np.mean(out.values[0] ** 2 + out.values[1] ** 2))
        assert abs(rms - 1.0) < 1e-6
        np.testing.assert_allclose(out.values[0], 0.6, atol=1e-6)

    def test_none_is_identity(self):
        cap = make_capture(n=32)
        w = segment(cap, 8, 8)[0]
        assert normalize(w, NormScheme.NONE) is w

    def test_random_window_unit_rms(self):
        cap = make_capture(n=256, seed=5)
        for w in segment(cap, 64, 64):
            out = normalize(w, NormScheme.UNIT_RMS)
            rms = np.sqrt(np.mean(out.values[0] ** 2 + out.values[1] ** 2))
            assert abs(rms - 1.0) < 1e-6

    def test_zero_window_rejected(self):
        from crossrf.iqdata import SignalWindow
        w = SignalWindow(values=np.zeros((2, 4), dtype=np.float32),
                         device_label=0, domain_tag=Domain.SOURCE,
                         origin=("c", 0))
        with pytest.raises(DegenerateWindowError):
            normalize(w, NormScheme.UNIT_RMS)


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = Manifest(entries=[ManifestEntry("a.iqc", 1, 1),
                              ManifestEntry("b.iqc", 2, 1)])
        path = tmp_path / "manifest.json"
        save_manifest(m, path)
        back = load_manifest(path)
        assert back.format_version == 1
        assert [(e.path, e.device_id, e.channel_id) for e in back.entries] == [
            ("a.iqc", 1, 1), ("b.iqc", 2, 1)]

    def test_duplicate_paths_rejected(self):
        with pytest.raises(ValueError):
            Manifest(entries=[ManifestEntry("a.iqc", 1, 1),
                              ManifestEntry("a.iqc", 2, 1)])


def synth_manifest(tmp_path, num_devices=4, captures_per_device=10, n=96,
                   channel_id=1):
    entries = []
    for device in range(1, num_devices + 1):
        for i in range(captures_per_device):
            name = f"dev{device}_cap{i}.iqc"
            cap = make_capture(n=n, device_id=device, channel_id=channel_id,
                               seed=device * 100 + i)
            write_capture(cap, tmp_path / name)
            entries.append(ManifestEntry(name, device, channel_id))
    return Manifest(entries=entries)


class TestBuildDataset:
    def test_split_counts_follow_ratios(self, tmp_path):
        manifest = synth_manifest(tmp_path, num_devices=1, captures_per_device=10)
        train, val, test = build_dataset(
            manifest, 32, 16, NormScheme.NONE, (0.8, 0.1, 0.1), seed=0,
            base_dir=tmp_path)
        per_capture = (96 - 32) // 16 + 1
        assert len(train) == 8 * per_capture
        assert len(val) == per_capture
        assert len(test) == per_capture

    def test_deterministic_assignment(self, tmp_path):
        manifest = synth_manifest(tmp_path)
        def origins():
            train, val, test = build_dataset(
                manifest, 32, 16, NormScheme.UNIT_RMS, (0.8, 0.1, 0.1),
                seed=11, base_dir=tmp_path)
            return tuple(tuple(sorted({w.origin[0] for w in ds.windows}))
                         for ds in (train, val, test))
        assert origins() == origins()

    def test_no_capture_leaks_across_splits(self, tmp_path):
        manifest = synth_manifest(tmp_path, num_devices=4)
        train, val, test = build_dataset(
            manifest, 32, 16, NormScheme.NONE, (0.8, 0.1, 0.1), seed=3,
            base_dir=tmp_path)
        ids = [{w.origin[0] for w in ds.windows} for ds in (train, val, test)]
        assert ids[0] & ids[1] == set()
        assert ids[0] & ids[2] == set()
        assert ids[1] & ids[2] == set()
        # every capture landed somewhere
        assert ids[0] | ids[1] | ids[2] == {e.path for e in manifest.entries}

    def test_minimum_captures_enforced(self, tmp_path):
        manifest = synth_manifest(tmp_path, num_devices=2, captures_per_device=2)
        with pytest.raises(SplitError, match="at least 3"):
            build_dataset(manifest, 32, 16, NormScheme.NONE, (0.8, 0.1, 0.1),
                          seed=0, base_dir=tmp_path)

    def test_three_captures_split_one_each(self, tmp_path):
        manifest = synth_manifest(tmp_path, num_devices=1, captures_per_device=3)
        train, val, test = build_dataset(
            manifest, 32, 16, NormScheme.NONE, (0.8, 0.1, 0.1), seed=0,
            base_dir=tmp_path)
        per_capture = (96 - 32) // 16 + 1
        assert len(train) == len(val) == len(test) == per_capture

    def test_labels_are_contiguous(self, tmp_path):
        manifest = synth_manifest(tmp_path, num_devices=3)
        train, _, _ = build_dataset(
            manifest, 32, 16, NormScheme.NONE, (0.8, 0.1, 0.1), seed=0,
            base_dir=tmp_path)
        assert train.num_classes == 3
        assert set(train.labels_array()) == {0, 1, 2}

    def test_bad_ratios_rejected(self, tmp_path):
        manifest = synth_manifest(tmp_path, num_devices=1, captures_per_device=3)
        with pytest.raises(ValueError):
            build_dataset(manifest, 32, 16, NormScheme.NONE, (0.5, 0.4, 0.2),
                          seed=0, base_dir=tmp_path)

    def test_without_labels_never_reads_label_field(self, tmp_path):
        class CountingWindow:
            def __init__(self, inner):
                self._inner = inner
                self.label_reads = 0

            @property
            def values(self):
                return self._inner.values

            @property
            def device_label(self):
                self.label_reads += 1
                return self._inner.device_label

            @property
            def domain_tag(self):
                return self._inner.domain_tag

            @property
            def origin(self):
                return self._inner.origin

        manifest = synth_manifest(tmp_path, num_devices=2, captures_per_device=3)
        train, _, _ = build_dataset(
            manifest, 32, 16, NormScheme.NONE, (0.8, 0.1, 0.1), seed=0,
            base_dir=tmp_path)
        counters = [CountingWindow(w) for w in train.windows]
        train.windows = counters
        unlabeled = train.without_labels()
        assert len(unlabeled) == len(train)
        assert all(c.label_reads == 0 for c in counters)

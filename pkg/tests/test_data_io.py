import numpy as np
import pytest

from flowstraight import data, nn
from flowstraight.errors import ConfigError, DataError, FormatError


class TestToyDistributions:
    def test_gaussian_moments(self, rng):
        d = data.GaussianIso(0.0, 1.0, dim=2)
        pts = d.sample(100_000, rng)
        assert np.all(np.abs(pts.mean(axis=0)) < 3.0 / np.sqrt(100_000))
        assert np.all(np.abs(pts.var(axis=0, ddof=1) - 1.0) < 5.0 * np.sqrt(2.0 / 100_000))

    def test_ring_modes(self, rng):
        d = data.EightGaussianRing(radius=4.0, sigma=0.1)
        pts = d.sample(20_000, rng)
        dists = np.linalg.norm(pts[:, None, :] - d.modes()[None], axis=2).min(axis=1)
        assert np.all(dists < 3.3 * 0.1 * np.sqrt(2) * 1.5)
        # every mode hit roughly uniformly
        closest = np.linalg.norm(pts[:, None, :] - d.modes()[None], axis=2).argmin(axis=1)
        counts = np.bincount(closest, minlength=8)
        assert counts.min() > 20_000 / 8 * 0.8

    def test_two_moons_geometry(self, rng):
        pts = data.TwoMoons(0.05).sample(20_000, rng)
        assert pts[:, 0].min() > -1.5 and pts[:, 0].max() < 2.5
        assert pts[:, 1].min() > -1.2 and pts[:, 1].max() < 1.7

    def test_checkerboard_parity(self, rng):
        d = data.Checkerboard(cells=4, extent=2.0)
        pts = d.sample(20_000, rng)
        w = 4.0 / 4
        ij = np.floor((pts + 2.0) / w).astype(int)
        assert np.all((ij.sum(axis=1)) % 2 == 0)
        assert np.all(np.abs(pts) <= 2.0)

    def test_seed_determinism(self):
        d = data.TwoMoons(0.08)
        a = d.sample(1, np.random.default_rng(42))
        b = d.sample(1, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_bad_parameters_rejected(self):
        with pytest.raises(ConfigError):
            data.GaussianIso(0.0, 0.0)
        with pytest.raises(ConfigError):
            data.TwoMoons(-1.0)
        with pytest.raises(ConfigError):
            data.Checkerboard(cells=1)

    def test_factory(self):
        assert isinstance(data.distribution_from_spec({"kind": "two_moons"}), data.TwoMoons)
        with pytest.raises(ConfigError):
            data.distribution_from_spec({"kind": "spiral"})
        with pytest.raises(ConfigError):
            data.sample_distribution(data.TwoMoons(), 0, np.random.default_rng(0))


def full_checkpoint(seed=0):
    r = np.random.default_rng(seed)
    params = nn.init_mlp(2, hidden=(6,), n_freqs=3, rng=r)
    params.weights[-1][:] = r.normal(size=params.weights[-1].shape)
    adam = nn.AdamState.fresh(params, lr=3e-4)
    grads = [(r.normal(size=w.shape), r.normal(size=b.shape)) for w, b in zip(params.weights, params.biases)]
    params, adam = nn.adam_step(params, grads, adam)
    ema = nn.ema_update(nn.EmaState.fresh(params, 0.9), params, 3)
    return params, ema, adam


class TestCheckpointFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        params, ema, adam = full_checkpoint()
        p1 = tmp_path / "a.fsck"
        p2 = tmp_path / "b.fsck"
        data.save_checkpoint(p1, params, ema, adam)
        ck = data.load_checkpoint(p1)
        data.save_checkpoint(p2, ck.params, ck.ema, ck.adam)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(nn.flatten_params(ck.params), nn.flatten_params(params))
        assert np.array_equal(nn.flatten_params(ck.ema.shadow), nn.flatten_params(ema.shadow))
        assert ck.adam.step == adam.step and ck.adam.lr == adam.lr
        assert ck.eval_params is ck.ema.shadow

    def test_optional_blocks(self, tmp_path):
        params, _, _ = full_checkpoint()
        path = tmp_path / "bare.fsck"
        data.save_checkpoint(path, params)
        ck = data.load_checkpoint(path)
        assert ck.ema is None and ck.adam is None
        assert ck.eval_params is ck.params

    def test_truncated_rejected_without_partial_object(self, tmp_path):
        params, ema, adam = full_checkpoint()
        path = tmp_path / "a.fsck"
        data.save_checkpoint(path, params, ema, adam)
        blob = path.read_bytes()
        bad = tmp_path / "trunc.fsck"
        bad.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="CRC|truncated"):
            data.load_checkpoint(bad)

    def test_foreign_magic_names_expected_and_found(self, tmp_path):
        path = tmp_path / "x.fsck"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError) as err:
            data.load_checkpoint(path)
        assert "FSCK" in str(err.value) and "NOPE" in str(err.value)

    def test_corrupted_payload_rejected(self, tmp_path):
        params, _, _ = full_checkpoint()
        path = tmp_path / "a.fsck"
        data.save_checkpoint(path, params)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        bad = tmp_path / "bad.fsck"
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="CRC"):
            data.load_checkpoint(bad)

    def test_version_mismatch_rejected(self, tmp_path):
        import struct
        import zlib

        params, _, _ = full_checkpoint()
        path = tmp_path / "a.fsck"
        data.save_checkpoint(path, params)
        blob = bytearray(path.read_bytes())[:-4]
        blob[4:8] = struct.pack("<I", 99)
        blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
        bad = tmp_path / "v99.fsck"
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            data.load_checkpoint(bad)

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            data.load_checkpoint(tmp_path / "nope.fsck")


def small_pairs(n=8, k=2, seed=0):
    r = np.random.default_rng(seed)
    return data.PairDataset(
        boundaries=np.linspace(0.0, 1.0, k + 1),
        segment=np.sort(r.integers(0, k, size=n)),
        x_src=r.normal(size=(n, 2)),
        x_dst=r.normal(size=(n, 2)),
        solver_desc="rk4-25[0:1]",
        generator_hash="ab" * 32,
        total_nfe=n * 100,
    )


class TestPairFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = small_pairs()
        p1, p2 = tmp_path / "a.fspd", tmp_path / "b.fspd"
        data.save_pairs(p1, ds)
        loaded = data.load_pairs(p1)
        data.save_pairs(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(loaded.x_src, ds.x_src)
        assert np.array_equal(loaded.boundaries, ds.boundaries)
        assert loaded.solver_desc == ds.solver_desc
        assert loaded.generator_hash == ds.generator_hash
        assert loaded.total_nfe == ds.total_nfe

    def test_record_times_follow_segmentation(self):
        ds = small_pairs(k=4)
        assert np.array_equal(ds.t_src, ds.boundaries[ds.segment])
        assert np.array_equal(ds.t_dst, ds.boundaries[ds.segment + 1])
        assert ds.segment_counts().sum() == ds.n_records

    def test_invalid_records_rejected(self, tmp_path):
        ds = small_pairs()
        ds.x_dst[0, 0] = np.nan
        with pytest.raises(DataError, match="finite"):
            data.save_pairs(tmp_path / "a.fspd", ds)
        ds2 = small_pairs()
        ds2.segment[0] = 9
        with pytest.raises(DataError, match="segment"):
            data.save_pairs(tmp_path / "b.fspd", ds2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.fspd"
        path.write_bytes(b"WHAT" + b"\x00" * 32)
        with pytest.raises(FormatError, match="FSPD"):
            data.load_pairs(path)


class TestCsvAndManifest:
    def test_csv_roundtrip_and_float_fidelity(self, tmp_path):
        path = tmp_path / "r.csv"
        rows = [(1, 0.1 + 0.2), (2, 1e-17), (3, float("nan"))]
        data.write_csv(path, ["step", "value"], rows, meta={"metric": "demo", "seed": 7})
        meta, cols, out = data.read_csv(path)
        assert meta["metric"] == "demo" and meta["seed"] == "7"
        assert cols == ["step", "value"]
        assert float(out[0][1]) == 0.1 + 0.2
        assert float(out[1][1]) == 1e-17
        assert np.isnan(float(out[2][1]))

    def test_csv_rejects_commas_in_cells(self, tmp_path):
        with pytest.raises(ValueError):
            data.write_csv(tmp_path / "bad.csv", ["a"], [("x,y",)])

    def test_manifest_roundtrip_and_verification(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        f = out / "report.csv"
        data.write_csv(f, ["a"], [(1,)])
        doc = data.write_manifest(out, "run-1", 7, "deadbeef", {"ckpt": "00"}, [f])
        assert doc["outputs"]["report.csv"] == data.sha256_file(f)
        data.verify_manifest(out)
        f.write_text("tampered\n")
        with pytest.raises(DataError, match="hash mismatch"):
            data.verify_manifest(out)

    def test_manifest_missing_output_detected(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        f = out / "x.csv"
        data.write_csv(f, ["a"], [(1,)])
        data.write_manifest(out, "run-1", 7, "00", {}, [f])
        f.unlink()
        with pytest.raises(DataError, match="missing"):
            data.verify_manifest(out)

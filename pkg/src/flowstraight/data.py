"""Toy data generators, binary persistence, and run-artifact layout.

Binary formats (documented byte-exactly in FORMATS.md) share the same
conventions: 4-byte magic, little-endian integers and float64 payloads, and
a trailing CRC32 over every preceding byte. Loaders verify magic, version
and CRC before constructing any object; a bad file never yields a partial
object. All file writes are atomic (temp file + rename).
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DataError, FormatError

CODE_VERSION = "0.1.0"

CHECKPOINT_MAGIC = b"FSCK"
PAIRS_MAGIC = b"FSPD"
FORMAT_VERSION = 1
_ACT_TAGS = {"silu": 0, "tanh": 1}
_ACT_NAMES = {v: k for k, v in _ACT_TAGS.items()}


# ---------------------------------------------------------------------------
# toy distributions


@dataclass(frozen=True)
class GaussianIso:
    """Isotropic Gaussian, any dimension."""

    mean: float = 0.0
    sigma: float = 1.0
    dim: int = 2

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")

    def sample(self, n, rng):
        mu = np.broadcast_to(np.asarray(self.mean, dtype=np.float64), (self.dim,))
        return mu + self.sigma * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class EightGaussianRing:
    """Eight Gaussian modes at angles 2*pi*k/8 on a circle."""

    radius: float = 4.0
    sigma: float = 0.1

    dim = 2

    def __post_init__(self):
        if self.sigma <= 0 or self.radius <= 0:
            raise ConfigError("ring radius and sigma must be > 0")

    def modes(self):
        ang = 2.0 * np.pi * np.arange(8) / 8.0
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample(self, n, rng):
        which = rng.integers(0, 8, size=n)
        return self.modes()[which] + self.sigma * rng.standard_normal((n, 2))


@dataclass(frozen=True)
class TwoMoons:
    """Two interleaved half-circles with Gaussian jitter."""

    noise: float = 0.08

    dim = 2

    def __post_init__(self):
        if self.noise <= 0:
            raise ConfigError("two-moons noise sigma must be > 0")

    def sample(self, n, rng):
        theta = rng.uniform(0.0, np.pi, size=n)
        lower = rng.integers(0, 2, size=n).astype(bool)
        x = np.where(lower, 1.0 - np.cos(theta), np.cos(theta))
        y = np.where(lower, 0.5 - np.sin(theta), np.sin(theta))
        pts = np.stack([x, y], axis=1)
        return pts + self.noise * rng.standard_normal((n, 2))


@dataclass(frozen=True)
class Checkerboard:
    """Uniform mass on the black cells of a cells x cells board."""

    cells: int = 4
    extent: float = 2.0

    dim = 2

    def __post_init__(self):
        if self.cells < 2 or self.extent <= 0:
            raise ConfigError("checkerboard needs cells >= 2 and extent > 0")

    def sample(self, n, rng):
        allowed = [(i, j) for i in range(self.cells) for j in range(self.cells) if (i + j) % 2 == 0]
        cell = np.asarray(allowed)[rng.integers(0, len(allowed), size=n)]
        w = 2.0 * self.extent / self.cells
        low = -self.extent + cell * w
        return low + w * rng.uniform(0.0, 1.0, size=(n, 2))


def distribution_from_spec(spec: dict):
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("distribution spec must be a mapping with a 'kind' key")
    kind = spec["kind"]
    if kind == "gaussian":
        return GaussianIso(spec.get("mean", 0.0), spec.get("sigma", 1.0), spec.get("dim", 2))
    if kind == "eight_gaussians":
        return EightGaussianRing(spec.get("radius", 4.0), spec.get("sigma", 0.1))
    if kind == "two_moons":
        return TwoMoons(spec.get("noise", 0.08))
    if kind == "checkerboard":
        return Checkerboard(spec.get("cells", 4), spec.get("extent", 2.0))
    raise ConfigError(f"unknown distribution kind {kind!r}")


def sample_distribution(dist, n, rng):
    if n < 1:
        raise ConfigError("need n >= 1 samples")
    return dist.sample(n, rng)


# ---------------------------------------------------------------------------
# binary plumbing


def _atomic_write(path, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _finish(buf: bytearray) -> bytes:
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


class _Reader:
    def __init__(self, blob: bytes, magic: bytes, path):
        if len(blob) < 8:
            raise FormatError(f"{path}: truncated file ({len(blob)} bytes)")
        found = blob[:4]
        if found != magic:
            raise FormatError(f"{path}: bad magic: expected {magic!r}, found {found!r}")
        stored = struct.unpack("<I", blob[-4:])[0]
        actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
        if stored != actual:
            raise FormatError(f"{path}: CRC mismatch (stored {stored:#x}, computed {actual:#x})")
        self.blob = blob[:-4]
        self.off = 4
        self.path = path

    def take(self, n) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated payload at offset {self.off}")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, count, dtype="<f8"):
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * item), dtype=dtype).copy()

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def done(self):
        if self.off != len(self.blob):
            raise FormatError(f"{self.path}: {len(self.blob) - self.off} unexpected trailing bytes")


def _put_text(buf, s: str):
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def _put_param_arrays(buf, weights, biases):
    for w, b in zip(weights, biases):
        buf += np.ascontiguousarray(w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()


def _read_param_arrays(r: _Reader, widths):
    weights, biases = [], []
    for l in range(len(widths) - 1):
        fan_in, fan_out = widths[l], widths[l + 1]
        weights.append(r.array(fan_in * fan_out).reshape(fan_in, fan_out))
        biases.append(r.array(fan_out))
    return weights, biases


# ---------------------------------------------------------------------------
# checkpoints (magic FSCK)


@dataclass
class Checkpoint:
    params: nn.MlpParams
    ema: nn.EmaState | None = None
    adam: nn.AdamState | None = None

    @property
    def eval_params(self) -> nn.MlpParams:
        """Parameters used for sampling/metrics: the EMA shadow when present."""
        return self.ema.shadow if self.ema is not None else self.params


def save_checkpoint(path, params: nn.MlpParams, ema: nn.EmaState | None = None,
                    adam: nn.AdamState | None = None):
    params.validate()
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    flags = (1 if ema is not None else 0) | (2 if adam is not None else 0)
    widths = params.widths
    buf += struct.pack(
        "<IIIII", FORMAT_VERSION, flags, _ACT_TAGS[params.activation], params.n_freqs, len(params.weights)
    )
    buf += struct.pack(f"<{len(widths)}I", *widths)
    _put_param_arrays(buf, params.weights, params.biases)
    if ema is not None:
        buf += struct.pack("<dI", ema.decay, 1 if ema.warmup else 0)
        _put_param_arrays(buf, ema.shadow.weights, ema.shadow.biases)
    if adam is not None:
        buf += struct.pack("<ddddQ", adam.lr, adam.beta1, adam.beta2, adam.eps, adam.step)
        _put_param_arrays(buf, [m for m, _ in adam.m], [b for _, b in adam.m])
        _put_param_arrays(buf, [m for m, _ in adam.v], [b for _, b in adam.v])
    _atomic_write(path, _finish(buf))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, CHECKPOINT_MAGIC, path)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format version {version}")
    flags = r.u32()
    act = r.u32()
    if act not in _ACT_NAMES:
        raise FormatError(f"{path}: unknown activation tag {act}")
    n_freqs = r.u32()
    n_layers = r.u32()
    widths = [r.u32() for _ in range(n_layers + 1)]
    weights, biases = _read_param_arrays(r, widths)
    params = nn.MlpParams(weights, biases, n_freqs=n_freqs, activation=_ACT_NAMES[act])
    ema = adam = None
    if flags & 1:
        decay = r.f64()
        warmup = bool(r.u32())
        sw, sb = _read_param_arrays(r, widths)
        ema = nn.EmaState(nn.MlpParams(sw, sb, n_freqs, _ACT_NAMES[act]), decay, warmup)
    if flags & 2:
        lr, b1, b2, eps = (r.f64() for _ in range(4))
        step = r.u64()
        mw, mb = _read_param_arrays(r, widths)
        vw, vb = _read_param_arrays(r, widths)
        adam = nn.AdamState(list(zip(mw, mb)), list(zip(vw, vb)), step, lr, b1, b2, eps)
    r.done()
    params.validate()
    return Checkpoint(params, ema, adam)


def params_hash(params: nn.MlpParams) -> str:
    """Stable content hash of a parameter set (used to tag derived artifacts)."""
    h = hashlib.sha256()
    h.update(struct.pack("<II", params.n_freqs, _ACT_TAGS[params.activation]))
    for w, b in zip(params.weights, params.biases):
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reflow pair datasets (magic FSPD)


@dataclass
class PairDataset:
    """Solver-generated (source, destination) pairs on a time segmentation."""

    boundaries: np.ndarray  # (K+1,)
    segment: np.ndarray  # (n,) int32
    x_src: np.ndarray  # (n, D)
    x_dst: np.ndarray  # (n, D)
    solver_desc: str = ""
    generator_hash: str = ""
    total_nfe: int = 0  # per-trajectory accounting: sum over segments of n_k * segment NFE

    @property
    def n_records(self) -> int:
        return int(self.segment.size)

    @property
    def n_segments(self) -> int:
        return int(self.boundaries.size - 1)

    @property
    def dim(self) -> int:
        return int(self.x_src.shape[1])

    @property
    def t_src(self) -> np.ndarray:
        return self.boundaries[self.segment]

    @property
    def t_dst(self) -> np.ndarray:
        return self.boundaries[self.segment + 1]

    def segment_counts(self) -> np.ndarray:
        return np.bincount(self.segment, minlength=self.n_segments)

    def validate(self):
        if self.boundaries.ndim != 1 or self.boundaries.size < 2:
            raise DataError("pair dataset needs >= 2 segmentation boundaries")
        if not np.all(np.diff(self.boundaries) > 0):
            raise DataError("segmentation boundaries must be strictly increasing")
        if self.x_src.shape != self.x_dst.shape or self.x_src.shape[0] != self.segment.size:
            raise DataError("pair record arrays are inconsistent")
        if self.segment.size and (self.segment.min() < 0 or self.segment.max() >= self.n_segments):
            raise DataError("pair record segment index out of range")
        if not (np.all(np.isfinite(self.x_src)) and np.all(np.isfinite(self.x_dst))):
            raise DataError("pair records contain non-finite points")


def save_pairs(path, ds: PairDataset):
    ds.validate()
    buf = bytearray()
    buf += PAIRS_MAGIC
    buf += struct.pack("<III", FORMAT_VERSION, ds.n_segments, ds.dim)
    buf += np.ascontiguousarray(ds.boundaries, dtype="<f8").tobytes()
    _put_text(buf, ds.solver_desc)
    _put_text(buf, ds.generator_hash)
    buf += struct.pack("<QQ", ds.n_records, ds.total_nfe)
    counts = ds.segment_counts()
    buf += struct.pack(f"<{counts.size}Q", *counts.tolist())
    buf += np.ascontiguousarray(ds.segment, dtype="<u4").tobytes()
    buf += np.ascontiguousarray(ds.t_src, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(ds.t_dst, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(ds.x_src, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(ds.x_dst, dtype="<f8").tobytes()
    _atomic_write(path, _finish(buf))


def load_pairs(path) -> PairDataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read pair dataset {path}: {exc}") from exc
    r = _Reader(blob, PAIRS_MAGIC, path)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported pair dataset format version {version}")
    k = r.u32()
    dim = r.u32()
    boundaries = r.array(k + 1)
    solver_desc = r.text()
    generator_hash = r.text()
    n = r.u64()
    total_nfe = r.u64()
    counts = np.array([r.u64() for _ in range(k)], dtype=np.int64)
    segment = r.array(n, dtype="<u4").astype(np.int64)
    t_src = r.array(n)
    t_dst = r.array(n)
    x_src = r.array(n * dim).reshape(n, dim)
    x_dst = r.array(n * dim).reshape(n, dim)
    r.done()
    ds = PairDataset(boundaries, segment, x_src, x_dst, solver_desc, generator_hash, total_nfe)
    ds.validate()
    if not np.array_equal(ds.segment_counts(), counts):
        raise FormatError(f"{path}: stored per-segment counts disagree with records")
    if not (np.array_equal(ds.t_src, t_src) and np.array_equal(ds.t_dst, t_dst)):
        raise FormatError(f"{path}: record times disagree with the stored segmentation")
    return ds


# ---------------------------------------------------------------------------
# CSV reports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    s = str(v)
    if "," in s or "\n" in s:
        raise ValueError(f"CSV cell may not contain commas/newlines: {s!r}")
    return s


def write_csv(path, columns, rows, meta: dict | None = None):
    """Write a delimited report: optional '# key=value ...' line, header, rows.

    Floats are rendered with shortest round-trip repr so that equal runs
    produce byte-identical files.
    """
    lines = []
    if meta:
        lines.append("# " + " ".join(f"{k}={_fmt(v)}" for k, v in meta.items()))
    lines.append(",".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row width {len(row)} != {len(columns)} columns")
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path):
    """Parse a report written by write_csv -> (meta dict, columns, rows of str)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    meta = {}
    if lines and lines[0].startswith("# "):
        for tok in lines.pop(0)[2:].split():
            key, _, val = tok.partition("=")
            meta[key] = val
    if not lines:
        raise FormatError(f"{path}: empty report")
    columns = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:] if ln]
    return meta, columns, rows


# ---------------------------------------------------------------------------
# run manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir, run_id, seed, config_hash, inputs: dict, output_files, extra=None):
    """Write manifest.json last and atomically; outputs are hashed in place."""
    outputs = {}
    for p in sorted(str(f) for f in output_files):
        rel = os.path.relpath(p, run_dir)
        outputs[rel] = sha256_file(p)
    doc = {
        "run_id": run_id,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "code_version": CODE_VERSION,
        "seed": seed,
        "config_hash": config_hash,
        "inputs": dict(inputs),
        "outputs": outputs,
    }
    if extra:
        doc.update(extra)
    payload = json.dumps(doc, indent=2, sort_keys=True).encode("utf-8")
    _atomic_write(os.path.join(run_dir, "manifest.json"), payload)
    return doc


def verify_manifest(run_dir) -> dict:
    """Check that every listed output exists and matches its recorded hash."""
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for rel, digest in doc.get("outputs", {}).items():
        target = os.path.join(run_dir, rel)
        if not os.path.exists(target):
            raise DataError(f"manifest output missing: {rel}")
        if sha256_file(target) != digest:
            raise DataError(f"manifest output hash mismatch: {rel}")
    return doc

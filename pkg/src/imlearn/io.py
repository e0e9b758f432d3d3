"""
Binary file formats for influence matrices, measurement datasets and
training checkpoints.

Every file starts with one JSON header line.  Complex payloads follow as
little-endian interleaved ``(re, im)`` float64 values in row-major order;
outcome payloads are raw ``uint8`` indices.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .environment import ChainSpec, InfluenceMatrix
from .errors import FormatError
from .learn import AdamState, AnsatzIM, TrainConfig, TrainHistory, TrainResult
from .measurement import MeasurementDataset

FORMAT_VERSION = 1
_C128 = np.dtype("<c16")


def dumps_json(obj) -> str:
    """Compact JSON with insertion-ordered keys (byte-stable for equal inputs)."""
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path, header: dict, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(dumps_json(header).encode() + b"\n")
        fh.write(payload)
    tmp.replace(path)


def _read(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except ValueError as exc:
        raise FormatError(f"{path}: header is not JSON") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version")
    return header, raw[nl + 1 :]


def _complex_bytes(*arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=_C128).tobytes() for a in arrays)


class _Cursor:
    def __init__(self, payload: bytes, path):
        self.buf = payload
        self.pos = 0
        self.path = path

    def take(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) * _C128.itemsize
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: payload truncated")
        out = np.frombuffer(self.buf, dtype=_C128, count=int(np.prod(shape)), offset=self.pos)
        self.pos += n
        arr = out.reshape(shape).astype(complex)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{self.path}: non-finite payload values")
        return arr

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


# --- influence matrices --------------------------------------------------------


def save_im(path, im, extra: dict | None = None):
    spec = getattr(im, "chain_spec", None)
    header = {
        "format_version": FORMAT_VERSION,
        "t": im.t,
        "bond_dims": im.bond_dims,
        "provenance": getattr(im, "provenance", "first_principles"),
        "chain_spec": spec.to_dict() if spec is not None else None,
        "discarded_weight": float(getattr(im, "discarded_weight", 0.0)),
        "run_id": getattr(im, "run_id", None),
    }
    header.update(extra or {})
    _write(path, header, _complex_bytes(*im.cores, im.left, im.right))


def load_im(path) -> InfluenceMatrix:
    header, payload = _read(path)
    try:
        t = int(header["t"])
        dims = [int(d) for d in header["bond_dims"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed IM header") from exc
    if t < 1 or len(dims) != t + 1 or min(dims) < 1:
        raise FormatError(f"{path}: inconsistent bond_dims")
    cur = _Cursor(payload, path)
    cores = [cur.take((dims[k], 4, 4, dims[k + 1])) for k in range(t)]
    left = cur.take((dims[0],))
    right = cur.take((dims[t],))
    cur.done()
    spec = header.get("chain_spec")
    try:
        return InfluenceMatrix(
            tuple(cores),
            left,
            right,
            provenance=header.get("provenance", "first_principles"),
            chain_spec=ChainSpec.from_dict(spec) if spec else None,
            discarded_weight=float(header.get("discarded_weight", 0.0)),
            run_id=header.get("run_id"),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --- datasets ----------------------------------------------------------------------


def save_dataset(path, ds: MeasurementDataset, extra: dict | None = None):
    header = {
        "format_version": FORMAT_VERSION,
        "N": ds.n_strings,
        "t": ds.t,
        "grain_schema": [list(s) for s in ds.grain_schema],
        "seed": ds.seed,
        "im_provenance": ds.im_provenance,
    }
    header.update(extra or {})
    _write(path, header, b"".join(x.astype(np.uint8).tobytes() for _, x in ds.segments))


def load_dataset(path) -> MeasurementDataset:
    header, payload = _read(path)
    try:
        t = int(header["t"])
        schema = [(int(g), int(n)) for g, n in header["grain_schema"]]
        n_total = int(header["N"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dataset header") from exc
    if sum(n for _, n in schema) != n_total:
        raise FormatError(f"{path}: grain_schema does not add up to N")
    segments, pos = [], 0
    for g, n in schema:
        if g < 1 or t % g:
            raise FormatError(f"{path}: grain {g} does not divide t")
        cols = 2 * (t // g)
        size = n * cols
        if pos + size > len(payload):
            raise FormatError(f"{path}: payload truncated")
        segments.append((g, np.frombuffer(payload, np.uint8, size, pos).reshape(n, cols)))
        pos += size
    if pos != len(payload):
        raise FormatError(f"{path}: {len(payload) - pos} trailing bytes")
    meta = {k: v for k, v in header.items() if k not in ("format_version", "N", "t", "grain_schema")}
    try:
        return MeasurementDataset(t, segments, header.get("seed"), header.get("im_provenance"), meta)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, result: TrainResult, config: TrainConfig, t_trained_on: int, extra=None):
    a, st = result.ansatz, result.adam
    h = result.history
    header = {
        "format_version": FORMAT_VERSION,
        "m": a.m,
        "r": a.r,
        "r_rho": a.r_rho,
        "t_trained_on": t_trained_on,
        # the worker count never changes results, so it is not recorded
        "config": {k: v for k, v in config.to_dict().items() if k != "threads"},
        "epoch": result.epochs_done,
        "adam_step": st.step,
        "history": {
            "epoch": h.epoch,
            "mean_nll": h.mean_nll,
            "lr": h.lr,
        },
    }
    header.update(extra or {})
    payload = _complex_bytes(a.V, a.v, st.m_V, st.m_v, st.s_V, st.s_v)
    _write(path, header, payload)


def load_checkpoint(path):
    """Returns ``(TrainResult, TrainConfig, header)``."""
    header, payload = _read(path)
    try:
        m, r, r_rho = int(header["m"]), int(header["r"]), int(header["r_rho"])
        config = TrainConfig.from_dict(header["config"])
        hist = header["history"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header") from exc
    h = 2 * m
    cur = _Cursor(payload, path)
    V = cur.take((r * h, h))
    v = cur.take((r_rho * m, 1))
    mV, mv = cur.take(V.shape), cur.take(v.shape)
    sV, sv = cur.take(V.shape).real, cur.take(v.shape).real
    cur.done()
    # wall times are not stored so that checkpoints stay byte-reproducible
    history = TrainHistory(
        list(hist["epoch"]), list(hist["mean_nll"]), list(hist["lr"]), [float("nan")] * len(hist["epoch"])
    )
    adam = AdamState(mV, mv, sV, sv, int(header["adam_step"]))
    result = TrainResult(AnsatzIM(m, V, v), history, adam, int(header["epoch"]))
    return result, config, header

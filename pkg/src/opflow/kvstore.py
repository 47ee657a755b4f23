"""Differential KV-cache store.

Central idea: the in-context KV states of an operation differ from its
standalone ("base") states by a delta that is concentrated in a few entries,
because prefix influence decays along the segment.  Instead of storing one
full tensor per (prefix, operation) pair, the store keeps

* one **base** tensor per (operation, position offset), shared by every
  request, and
* one **sparse residual** per (prefix path, operation) pair, holding only the
  delta entries needed to reach an energy target.

Three serving modes share one interface:

* ``stateful``    — full tensors per (path, op), computed on first access.
* ``differential``— base + residual reconstruction, falling back to an
                    on-the-fly computation when no residual is materialized.
* ``stateless``   — bases only; position-correct but context-free.

Residual coordinates live in a combined space of shape
(layers, heads, tokens, 2 * head_dim): the last axis indexes key dims first,
value dims second.  Residual values are stored in float64: the difference of
two float32 numbers is exactly representable in float64 (unless their
exponents are absurdly far apart), so float32(base + value) reproduces the
full tensor bit-for-bit on every kept coordinate, and at an energy target of
1.0 the whole reconstruction is bitwise exact.
"""

from __future__ import annotations

import hashlib
import json
import re
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, NumericError
from .graph import OperationGraph
from .oracle import KVOracle, KVTensor, OracleConfig, tokenize

KV_MAGIC = b"OFKV"
DELTA_MAGIC = b"OFDL"
KV_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, L, H, T, d, offset, dtype
DELTA_HEADER = struct.Struct("<4sIIIIIIfI")  # magic, version, shape*4, offset, energy, count
DTYPE_FLOAT32 = 1
BYTES_PER_DELTA_ENTRY = 24  # 4 int32 coordinates + 1 float64 value
_ENTRY_DTYPE = np.dtype([("l", "<i4"), ("h", "<i4"), ("t", "<i4"), ("c", "<i4"), ("v", "<f8")])
_SAFE_NAME = re.compile(r"^[A-Za-z0-9._-]+$")

MODES = ("stateful", "differential", "stateless")

PathKey = tuple[str, ...]


# ---------------------------------------------------------------------------
# Sparse residuals
# ---------------------------------------------------------------------------


@dataclass
class SparseDelta:
    """Sparse difference between an in-context tensor and its base.

    ``dense_shape`` is the combined-coordinate shape
    (layers, heads, tokens, 2 * head_dim); ``coords`` is (n, 4) int32 and
    ``values`` (n,) float64, ordered by descending delta magnitude (ties in
    coordinate order).
    """

    dense_shape: tuple[int, int, int, int]
    position_offset: int
    kept_energy_fraction: float
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.dense_shape) != 4 or self.dense_shape[3] % 2 != 0:
            raise DataError(f"bad combined shape {self.dense_shape}")
        if self.coords.shape != (len(self.values), 4):
            raise DataError("coordinate/value count mismatch")

    @property
    def entries(self) -> int:
        return len(self.values)

    def nbytes(self) -> int:
        """Exact serialized size, header included."""
        return DELTA_HEADER.size + self.entries * BYTES_PER_DELTA_ENTRY


def _combined(kv: KVTensor) -> np.ndarray:
    return np.concatenate([kv.keys, kv.values], axis=3)


def _split(combined: np.ndarray, offset: int) -> KVTensor:
    d = combined.shape[3] // 2
    return KVTensor(
        keys=np.ascontiguousarray(combined[:, :, :, :d]),
        values=np.ascontiguousarray(combined[:, :, :, d:]),
        position_offset=offset,
    )


def _exact_addends(base64: np.ndarray, target32: np.ndarray) -> np.ndarray:
    """Float64 addends v such that float32(base64 + v) == target32 exactly.

    Both inputs hold float32 values, so their difference fits a float64
    mantissa outside of pathological exponent spreads; the plain subtraction
    is already exact.  A short ulp walk covers any remaining stragglers, and
    an impossible coordinate (which no finite addend can fix) is reported
    rather than papered over.
    """
    vals = target32.astype(np.float64) - base64
    for _ in range(8):
        rec = (base64 + vals).astype(np.float32)
        bad = rec != target32
        if not bad.any():
            return vals
        toward = np.where(rec[bad] < target32[bad], np.inf, -np.inf)
        vals[bad] = np.nextafter(vals[bad], toward)
    raise NumericError("residual addend cannot reproduce the full tensor exactly")


def sparsify(full: KVTensor, base: KVTensor, energy_target: float = 0.95) -> SparseDelta:
    """Keep the smallest set of largest-magnitude delta entries whose squared
    mass reaches ``energy_target`` of the total.

    Ties in magnitude are resolved in coordinate order (row-major), so the
    result is independent of anything but the two tensors.  With
    ``energy_target >= 1.0`` every nonzero entry is kept.
    """
    if full.shape != base.shape:
        raise DataError(f"shape mismatch: full {full.shape} vs base {base.shape}")
    if full.position_offset != base.position_offset:
        raise DataError("full and base tensors disagree on position offset")
    if not (0.0 < energy_target):
        raise DataError(f"energy target must be positive, got {energy_target}")

    full_c = _combined(full)
    base64 = _combined(base).astype(np.float64)
    if not (np.isfinite(full_c).all() and np.isfinite(base64).all()):
        raise DataError("KV tensors must be finite")
    diff = full_c.astype(np.float64) - base64
    shape = diff.shape

    flat = diff.ravel()
    nonzero = int(np.count_nonzero(flat))
    if nonzero == 0:
        return SparseDelta(
            dense_shape=shape,
            position_offset=full.position_offset,
            kept_energy_fraction=1.0,
            coords=np.zeros((0, 4), dtype=np.int32),
            values=np.zeros(0, dtype=np.float64),
        )

    order = np.argsort(-np.abs(flat), kind="stable")
    energies = flat[order] ** 2
    cumulative = np.cumsum(energies)
    total = cumulative[-1]
    if energy_target >= 1.0:
        keep = nonzero
    else:
        idx = int(np.searchsorted(cumulative, energy_target * total, side="left"))
        keep = min(idx + 1, nonzero)
    kept_idx = order[:keep]  # magnitude-descending, ties in coordinate order
    kept_fraction = float(cumulative[keep - 1] / total)

    coords = np.stack(np.unravel_index(kept_idx, shape), axis=1).astype(np.int32)
    sel = tuple(coords.T)
    values = _exact_addends(base64[sel], full_c[sel])
    return SparseDelta(
        dense_shape=shape,
        position_offset=full.position_offset,
        kept_energy_fraction=kept_fraction,
        coords=coords,
        values=values,
    )


def reconstruct(base: KVTensor, delta: SparseDelta) -> KVTensor:
    """Apply a sparse residual to a base tensor.  The base is not modified."""
    combined = _combined(base)
    if combined.shape != delta.dense_shape:
        raise DataError(
            f"delta shape {delta.dense_shape} does not match base {combined.shape}"
        )
    if base.position_offset != delta.position_offset:
        raise DataError("base and delta disagree on position offset")
    out = combined.copy()
    if delta.entries:
        bounds = np.asarray(delta.dense_shape, dtype=np.int64)
        if (delta.coords < 0).any() or (delta.coords >= bounds).any():
            raise DataError("delta contains out-of-bounds coordinates")
        sel = tuple(delta.coords.T.astype(np.intp))
        out[sel] = (out[sel].astype(np.float64) + delta.values).astype(np.float32)
    return _split(out, base.position_offset)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def kv_file_nbytes(kv: KVTensor) -> int:
    """Exact serialized size of a dense KV tensor, header included."""
    return KV_HEADER.size + kv.keys.nbytes + kv.values.nbytes


def write_kv(path: str | Path, kv: KVTensor) -> None:
    layers, heads, t, d = kv.shape
    header = KV_HEADER.pack(
        KV_MAGIC, 1, layers, heads, t, d, kv.position_offset, DTYPE_FLOAT32
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(kv.keys, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(kv.values, dtype="<f4").tobytes())


def read_kv(path: str | Path) -> KVTensor:
    raw = Path(path).read_bytes()
    if len(raw) < KV_HEADER.size:
        raise DataError(f"{path}: truncated KV file")
    magic, version, layers, heads, t, d, offset, dtype = KV_HEADER.unpack_from(raw)
    if magic != KV_MAGIC:
        raise DataError(f"{path}: not a KV tensor file")
    if version != 1:
        raise DataError(f"{path}: unsupported KV file version {version}")
    if dtype != DTYPE_FLOAT32:
        raise DataError(f"{path}: unsupported dtype tag {dtype}")
    count = layers * heads * t * d
    expected = KV_HEADER.size + 2 * count * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=KV_HEADER.size)
    keys = body[:count].reshape(layers, heads, t, d).copy()
    values = body[count:].reshape(layers, heads, t, d).copy()
    return KVTensor(keys=keys, values=values, position_offset=offset)


def write_delta(path: str | Path, delta: SparseDelta) -> None:
    header = DELTA_HEADER.pack(
        DELTA_MAGIC,
        1,
        *delta.dense_shape,
        delta.position_offset,
        delta.kept_energy_fraction,
        delta.entries,
    )
    records = np.zeros(delta.entries, dtype=_ENTRY_DTYPE)
    if delta.entries:
        records["l"], records["h"], records["t"], records["c"] = delta.coords.T
        records["v"] = delta.values
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_delta(path: str | Path) -> SparseDelta:
    raw = Path(path).read_bytes()
    if len(raw) < DELTA_HEADER.size:
        raise DataError(f"{path}: truncated delta file")
    magic, version, s0, s1, s2, s3, offset, energy, count = DELTA_HEADER.unpack_from(raw)
    if magic != DELTA_MAGIC:
        raise DataError(f"{path}: not a residual delta file")
    if version != 1:
        raise DataError(f"{path}: unsupported delta file version {version}")
    expected = DELTA_HEADER.size + count * BYTES_PER_DELTA_ENTRY
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    records = np.frombuffer(raw, dtype=_ENTRY_DTYPE, offset=DELTA_HEADER.size)
    coords = np.stack([records["l"], records["h"], records["t"], records["c"]], axis=1)
    return SparseDelta(
        dense_shape=(s0, s1, s2, s3),
        position_offset=offset,
        kept_energy_fraction=energy,
        coords=coords.astype(np.int32),
        values=records["v"].copy(),
    )


def path_digest(path: Iterable[str]) -> str:
    """Stable 16-hex-char digest used to key prefix paths on disk."""
    joined = ",".join(path).encode("utf-8")
    return hashlib.blake2b(joined, digest_size=8, person=b"opflow-path").hexdigest()


# ---------------------------------------------------------------------------
# The store
# ---------------------------------------------------------------------------


@dataclass
class FetchResult:
    """Outcome metadata for one fetch: served from store or computed."""

    flag: str  # "hit" | "fallback"
    entries_applied: int
    prefix_tokens: int
    op_tokens: int


@dataclass
class MemoryReport:
    mode: str
    bases_bytes: int
    residuals_bytes: int
    fulls_bytes: int
    n_bases: int
    n_residuals: int
    n_fulls: int

    @property
    def total_bytes(self) -> int:
        return self.bases_bytes + self.residuals_bytes + self.fulls_bytes


class CacheStore:
    """KV cache for one operation graph, in one of the three serving modes.

    An optional ``stats`` sink (anything with a ``record(trace)`` method)
    receives the executed path whenever a differential fetch falls back to
    on-the-fly computation; that feed is what materialization planning runs
    on.
    """

    def __init__(
        self,
        graph: OperationGraph,
        mode: str = "differential",
        oracle: KVOracle | None = None,
        energy_target: float = 0.95,
        stats=None,
    ):
        if mode not in MODES:
            raise DataError(f"unknown mode {mode!r}; expected one of {MODES}")
        if not (0.0 < energy_target):
            raise DataError(f"energy target must be positive, got {energy_target}")
        self.graph = graph
        self.mode = mode
        self.oracle = oracle or KVOracle()
        self.energy_target = energy_target
        self.stats = stats
        self.bases: dict[tuple[str, int], KVTensor] = {}
        self.residuals: dict[tuple[PathKey, str], SparseDelta] = {}
        self.fulls: dict[tuple[PathKey, str], KVTensor] = {}
        self._edges = set(graph.edge_list)
        self._op_tokens: dict[str, list[int]] = {}

    # -- token plumbing ------------------------------------------------------

    def op_tokens(self, op_id: str) -> list[int]:
        cached = self._op_tokens.get(op_id)
        if cached is None:
            op = self.graph.operations.get(op_id)
            if op is None:
                raise DataError(f"unknown operation {op_id!r}")
            cached = tokenize(op.instruction)
            if not cached:
                raise DataError(f"operation {op_id!r} has an empty instruction")
            self._op_tokens[op_id] = cached
        return cached

    def prefix_tokens(self, path: Iterable[str]) -> list[int]:
        tokens: list[int] = []
        for op_id in path:
            tokens.extend(self.op_tokens(op_id))
        return tokens

    def validate_path(self, path: PathKey, op_id: str) -> None:
        """Path ops must chain along graph edges and end on an edge into op."""
        for node in path:
            if node not in self.graph.operations:
                raise DataError(f"unknown operation {node!r} in prefix path")
        if op_id not in self.graph.operations:
            raise DataError(f"unknown operation {op_id!r}")
        full_chain = list(path) + [op_id]
        for a, b in zip(full_chain, full_chain[1:]):
            if (a, b) not in self._edges:
                raise DataError(f"prefix step {a!r} -> {b!r} is not a graph edge")

    # -- tensor production ----------------------------------------------------

    def base(self, op_id: str, position_offset: int) -> KVTensor:
        key = (op_id, position_offset)
        kv = self.bases.get(key)
        if kv is None:
            kv = self.oracle.base_segment(self.op_tokens(op_id), position_offset)
            self.bases[key] = kv
        return kv

    def _stateful(self, path: PathKey, op_id: str) -> KVTensor:
        return self.oracle.stateful_segment(self.prefix_tokens(path), self.op_tokens(op_id))

    def fetch(self, path: Iterable[str], op_id: str) -> tuple[KVTensor, FetchResult]:
        path = tuple(path)
        self.validate_path(path, op_id)
        n_prefix = len(self.prefix_tokens(path))
        n_op = len(self.op_tokens(op_id))

        if self.mode == "stateless":
            kv = self.base(op_id, n_prefix)
            return kv, FetchResult("hit", 0, n_prefix, n_op)

        if self.mode == "stateful":
            key = (path, op_id)
            kv = self.fulls.get(key)
            if kv is not None:
                return kv, FetchResult("hit", 0, n_prefix, n_op)
            kv = self._stateful(path, op_id)
            self.fulls[key] = kv
            return kv, FetchResult("fallback", 0, n_prefix, n_op)

        # differential
        if not path:
            kv = self.base(op_id, 0)
            return kv, FetchResult("hit", 0, n_prefix, n_op)
        delta = self.residuals.get((path, op_id))
        if delta is not None:
            kv = reconstruct(self.base(op_id, n_prefix), delta)
            return kv, FetchResult("hit", delta.entries, n_prefix, n_op)
        kv = self._stateful(path, op_id)
        if self.stats is not None:
            self.stats.record(list(path) + [op_id])
        return kv, FetchResult("fallback", 0, n_prefix, n_op)

    def insert_residual(self, path: Iterable[str], op_id: str) -> SparseDelta:
        """Materialize the residual for a (path, op) pair (differential only)."""
        if self.mode != "differential":
            raise DataError("residuals only exist in differential mode")
        path = tuple(path)
        self.validate_path(path, op_id)
        if not path:
            raise DataError("empty prefixes are served by base tensors, not residuals")
        full = self._stateful(path, op_id)
        base = self.base(op_id, len(self.prefix_tokens(path)))
        delta = sparsify(full, base, self.energy_target)
        self.residuals[(path, op_id)] = delta
        return delta

    def drop_residual(self, path: Iterable[str], op_id: str) -> bool:
        return self.residuals.pop((tuple(path), op_id), None) is not None

    # -- accounting -----------------------------------------------------------

    def memory_footprint(self) -> MemoryReport:
        """Byte totals matching the on-disk sizes of every stored tensor."""
        return MemoryReport(
            mode=self.mode,
            bases_bytes=sum(kv_file_nbytes(kv) for kv in self.bases.values()),
            residuals_bytes=sum(d.nbytes() for d in self.residuals.values()),
            fulls_bytes=sum(kv_file_nbytes(kv) for kv in self.fulls.values()),
            n_bases=len(self.bases),
            n_residuals=len(self.residuals),
            n_fulls=len(self.fulls),
        )


# ---------------------------------------------------------------------------
# Store directories
# ---------------------------------------------------------------------------


def _check_component(name: str, kind: str) -> str:
    if not _SAFE_NAME.match(name):
        raise DataError(f"{kind} {name!r} is not filename-safe")
    return name


def save_store(store: CacheStore, directory: str | Path) -> None:
    """Persist a store: meta.json, bases/, residuals/, fulls/, paths.tsv.

    Saving writes a clean snapshot: any entry directories left over from an
    earlier save (e.g. residuals since dropped by a pruning plan) are removed
    so that a reload always reproduces exactly this store.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for stale in ("bases", "residuals", "fulls"):
        if (root / stale).is_dir():
            shutil.rmtree(root / stale)
    cfg = store.oracle.config
    meta = {
        "energy_target": store.energy_target,
        "mode": store.mode,
        "oracle": {
            "head_dim": cfg.head_dim,
            "heads": cfg.heads,
            "lam": cfg.lam,
            "layers": cfg.layers,
            "seed": cfg.seed,
        },
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    bases_dir = root / "bases"
    bases_dir.mkdir(exist_ok=True)
    for (op_id, offset), kv in sorted(store.bases.items()):
        _check_component(op_id, "operation id")
        write_kv(bases_dir / f"{op_id}@{offset}.kv", kv)

    digests: dict[str, PathKey] = {}

    def keyed_dir(parent: Path, path: PathKey) -> Path:
        digest = path_digest(path)
        known = digests.get(digest)
        if known is not None and known != path:
            raise DataError(f"path digest collision between {known} and {path}")
        digests[digest] = path
        sub = parent / digest
        sub.mkdir(parents=True, exist_ok=True)
        return sub

    residuals_dir = root / "residuals"
    residuals_dir.mkdir(exist_ok=True)
    for (path, op_id), delta in sorted(store.residuals.items()):
        _check_component(op_id, "operation id")
        write_delta(keyed_dir(residuals_dir, path) / f"{op_id}.delta", delta)

    fulls_dir = root / "fulls"
    fulls_dir.mkdir(exist_ok=True)
    for (path, op_id), kv in sorted(store.fulls.items()):
        _check_component(op_id, "operation id")
        write_kv(keyed_dir(fulls_dir, path) / f"{op_id}.kv", kv)

    lines = [f"{digest}\t{','.join(path)}\n" for digest, path in sorted(digests.items())]
    (root / "paths.tsv").write_text("".join(lines))


def load_store(directory: str | Path, graph: OperationGraph, stats=None) -> CacheStore:
    root = Path(directory)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"{root}: not a cache store (missing meta.json)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    try:
        ocfg = meta["oracle"]
        config = OracleConfig(
            layers=ocfg["layers"],
            heads=ocfg["heads"],
            head_dim=ocfg["head_dim"],
            lam=ocfg["lam"],
            seed=ocfg["seed"],
        )
        store = CacheStore(
            graph,
            mode=meta["mode"],
            oracle=KVOracle(config),
            energy_target=meta["energy_target"],
            stats=stats,
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"{meta_path}: malformed store metadata ({exc})") from exc

    paths_by_digest: dict[str, PathKey] = {}
    manifest = root / "paths.tsv"
    if manifest.is_file():
        for line_no, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line:
                continue
            try:
                digest, joined = line.split("\t", 1)
            except ValueError as exc:
                raise DataError(f"{manifest}:{line_no}: malformed manifest line") from exc
            path = tuple(joined.split(",")) if joined else ()
            if path_digest(path) != digest:
                raise DataError(f"{manifest}:{line_no}: digest does not match path")
            paths_by_digest[digest] = path

    def resolve(digest: str, where: Path) -> PathKey:
        path = paths_by_digest.get(digest)
        if path is None:
            raise DataError(f"{where}: path digest {digest} missing from paths.tsv")
        return path

    bases_dir = root / "bases"
    if bases_dir.is_dir():
        for file in sorted(bases_dir.glob("*.kv")):
            stem = file.name[: -len(".kv")]
            op_id, sep, offset_text = stem.rpartition("@")
            if not sep or not offset_text.isdigit():
                raise DataError(f"{file}: base filename must look like <op>@<offset>.kv")
            store.bases[(op_id, int(offset_text))] = read_kv(file)

    residuals_dir = root / "residuals"
    if residuals_dir.is_dir():
        for sub in sorted(p for p in residuals_dir.iterdir() if p.is_dir()):
            path = resolve(sub.name, sub)
            for file in sorted(sub.glob("*.delta")):
                op_id = file.name[: -len(".delta")]
                store.residuals[(path, op_id)] = read_delta(file)

    fulls_dir = root / "fulls"
    if fulls_dir.is_dir():
        for sub in sorted(p for p in fulls_dir.iterdir() if p.is_dir()):
            path = resolve(sub.name, sub)
            for file in sorted(sub.glob("*.kv")):
                op_id = file.name[: -len(".kv")]
                store.fulls[(path, op_id)] = read_kv(file)

    return store

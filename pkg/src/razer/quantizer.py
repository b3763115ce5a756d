"""Group-wise quantizers: asymmetric INT, plain FP and RaZeR.

All engines work on a ``(groups, group_size)`` matrix at once; the
single-group functions are thin wrappers over the batched ones so both share
one code path. Scales are rounded to half precision by default because that
is how containers store them, which keeps in-memory and on-disk
dequantization bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DatatypeSpec, get_datatype, nearest_indices, round_to_half

_CHUNK_GROUPS = 1 << 15


@dataclass(frozen=True)
class QuantConfig:
    datatype: str = "fp4rzr"
    group_size: int = 128
    alpha: float = 1.0
    beta: float = 1.0
    metric: str = "mse"

    def __post_init__(self):
        get_datatype(self.datatype)
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.metric not in ("mse", "kl"):
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def spec(self) -> DatatypeSpec:
        return get_datatype(self.datatype)

    @property
    def is_razer(self) -> bool:
        return self.spec.kind == "fp"


@dataclass(frozen=True)
class IntGroupParams:
    scale: float
    zero_point: int
    bits: int


@dataclass(frozen=True)
class FpGroupParams:
    scale: float


@dataclass(frozen=True)
class RzrGroupParams:
    scale: float
    sv_index: int


@dataclass
class QuantizedGroup:
    codes: np.ndarray
    params: IntGroupParams | FpGroupParams | RzrGroupParams


# ---------------------------------------------------------------------------
# batched engines
# ---------------------------------------------------------------------------

def _as_groups(X, valid):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.size == 0:
        raise ValueError("empty group")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    if valid is None:
        valid = np.ones(X.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), X.shape)
    return X, valid


def _fp_scales(X, valid, gpos, gneg, alpha, half_scale):
    Xv = np.where(valid, X, 0.0)
    pos = np.max(np.maximum(Xv, 0.0), axis=1) / gpos
    neg = np.max(np.maximum(-Xv, 0.0), axis=1) / gneg
    s = np.maximum(pos, neg) * alpha
    s = np.where(s > 0, s, 1.0)
    return round_to_half(s) if half_scale else s


def _map_to_grid(X, valid, s, values, codes):
    """Nearest mapping of X/s onto ``values``; returns codes, recon, per-group error."""
    idx = nearest_indices(X / s[:, None], values)
    recon = values.astype(np.float32)[idx] * s.astype(np.float32)[:, None]
    err = np.where(valid, X - recon, 0.0)
    return codes[idx], recon, np.sum(err * err, axis=1)


def _extended_grid(spec: DatatypeSpec, sv: float | None):
    values = spec.grid_array
    codes = spec.codes_array
    if sv is None or float(sv) in spec.grid:
        return values, codes
    at = int(np.searchsorted(values, sv))
    return np.insert(values, at, sv), np.insert(codes, at, spec.reserved_code)


def quantize_groups_int(X, bits: int, alpha=1.0, beta=1.0, valid=None, half_scale=True):
    """Asymmetric integer quantization of every row of ``X``.

    Returns ``(codes, scales, zero_points)``. The zero point is clamped into
    the code range; constant groups use scale 1.
    """
    if bits not in (3, 4):
        raise ValueError("integer quantization supports 3 or 4 bits")
    X, valid = _as_groups(X, valid)
    qmax = (1 << bits) - 1
    big = np.finfo(np.float64).max
    xmax = np.max(np.where(valid, X, -big), axis=1)
    xmin = np.min(np.where(valid, X, big), axis=1)
    constant = xmax == xmin
    s = (alpha * xmax - beta * xmin) / qmax
    s = np.where(constant | (s <= 0), 1.0, s)
    if half_scale:
        s = round_to_half(s).astype(np.float64)
    z = np.clip(-np.rint(beta * xmin / s), 0, qmax)
    q = np.clip(np.rint(X / s[:, None]) + z[:, None], 0, qmax)
    q = np.where(valid, q, z[:, None])
    return q.astype(np.uint8), s, z.astype(np.int64)


def dequantize_groups_int(codes, scales, zero_points) -> np.ndarray:
    codes = np.asarray(codes)
    s = np.asarray(scales, dtype=np.float32)[:, None]
    z = np.asarray(zero_points, dtype=np.int64)[:, None]
    return (codes.astype(np.int64) - z).astype(np.float32) * s


def quantize_groups_fp(X, spec: DatatypeSpec, alpha=1.0, scale=None, valid=None, half_scale=True):
    """Plain FP quantization (no special value). Returns ``(codes, scales, err)``."""
    X, valid = _as_groups(X, valid)
    if scale is None:
        s = _fp_scales(X, valid, spec.max_positive, spec.max_negative, alpha, half_scale)
    else:
        s = np.broadcast_to(np.asarray(scale, dtype=np.float64), X.shape[:1]).copy()
    codes, _, err = _map_to_grid(X, valid, s, spec.grid_array, spec.codes_array)
    codes = np.where(valid, codes, spec.zero_code).astype(np.uint8)
    return codes, s.astype(np.float32), err


def quantize_groups_razer(X, spec: DatatypeSpec, sv_values, alpha=1.0, scale=None, valid=None,
                          half_scale=True):
    """RaZeR quantization with per-group special-value selection.

    Every candidate in ``sv_values`` is tried: the grid is extended by it, the
    scale is refit on the extended grid (unless ``scale`` pins it) and the
    candidate with the lowest squared error wins, ties to the lower index.
    Returns ``(codes, scales, sv_index, err)``.
    """
    if spec.reserved_code is None:
        raise ValueError(f"{spec.name} has no reserved code")
    X, valid = _as_groups(X, valid)
    cands = [float(v) for v in np.atleast_1d(np.asarray(sv_values, dtype=np.float64))]
    if not cands:
        raise ValueError("no special-value candidates")
    n = X.shape[0]
    best_err = np.full(n, np.inf)
    best_codes = np.zeros(X.shape, dtype=np.uint8)
    best_s = np.ones(n, dtype=np.float32)
    best_idx = np.zeros(n, dtype=np.uint8)
    for k, sv in enumerate(cands):
        values, codes = _extended_grid(spec, sv)
        if scale is None:
            s = _fp_scales(X, valid, max(values[-1], 0.0), max(-values[0], 0.0), alpha, half_scale)
        else:
            s = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,)).copy()
        c, _, err = _map_to_grid(X, valid, s, values, codes)
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best_codes[better] = c[better]
        best_s = np.where(better, s, best_s).astype(np.float32)
        best_idx[better] = k
    best_codes = np.where(valid, best_codes, spec.zero_code).astype(np.uint8)
    return best_codes, best_s, best_idx, best_err


def dequantize_groups_fp(codes, scales, spec: DatatypeSpec, sv_values=None, sv_index=None) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    table = spec.decode_table().astype(np.float32)
    valid_codes = np.zeros(table.shape[0], dtype=bool)
    valid_codes[list(spec.codes)] = True
    if sv_values is not None:
        valid_codes[spec.reserved_code] = True
    if not np.all(valid_codes[codes]):
        raise ValueError(f"invalid code for {spec.name}")
    vals = table[codes]
    if sv_values is not None:
        sv = np.asarray(sv_values, dtype=np.float32)[np.asarray(sv_index, dtype=np.int64)]
        vals = np.where(codes == spec.reserved_code, sv[:, None], vals)
    return vals * np.asarray(scales, dtype=np.float32)[:, None]


# ---------------------------------------------------------------------------
# single-group API
# ---------------------------------------------------------------------------

def quantize_group_int(X, n: int, alpha: float = 1.0, beta: float = 1.0, half_scale=True) -> QuantizedGroup:
    codes, s, z = quantize_groups_int(X, n, alpha, beta, half_scale=half_scale)
    return QuantizedGroup(codes[0], IntGroupParams(float(s[0]), int(z[0]), n))


def dequantize_group_int(q: QuantizedGroup) -> np.ndarray:
    if not isinstance(q.params, IntGroupParams):
        raise TypeError("expected integer group parameters")
    p = q.params
    return dequantize_groups_int(q.codes[None, :], [p.scale], [p.zero_point])[0]


def quantize_group_fp(X, spec: DatatypeSpec, alpha: float = 1.0, scale=None, half_scale=True) -> QuantizedGroup:
    codes, s, _ = quantize_groups_fp(X, spec, alpha, scale=scale, half_scale=half_scale)
    return QuantizedGroup(codes[0], FpGroupParams(float(s[0])))


def dequantize_group_fp(q: QuantizedGroup, spec: DatatypeSpec) -> np.ndarray:
    return dequantize_groups_fp(q.codes[None, :], [q.params.scale], spec)[0]


def quantize_group_razer(X, spec: DatatypeSpec, sv_set, alpha: float = 1.0, scale=None,
                         valid=None, half_scale=True) -> QuantizedGroup:
    codes, s, idx, _ = quantize_groups_razer(X, spec, _sv_values(sv_set), alpha, scale=scale,
                                             valid=valid, half_scale=half_scale)
    return QuantizedGroup(codes[0], RzrGroupParams(float(s[0]), int(idx[0])))


def dequantize_group_razer(q: QuantizedGroup, spec: DatatypeSpec, sv_set) -> np.ndarray:
    if not isinstance(q.params, RzrGroupParams):
        raise TypeError("expected RaZeR group parameters")
    return dequantize_groups_fp(q.codes[None, :], [q.params.scale], spec,
                                _sv_values(sv_set), [q.params.sv_index])[0]


def _sv_values(sv_set) -> np.ndarray:
    return np.asarray(getattr(sv_set, "values", sv_set), dtype=np.float64)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mse(X, X_hat) -> float:
    """Sum of squared differences."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {X_hat.shape}")
    d = X - X_hat
    return float(np.sum(d * d))


def kl(P, Q) -> float:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("shape mismatch")
    for name, d in (("P", P), ("Q", Q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a probability distribution")
    support = P > 0
    if np.any(Q[support] <= 0):
        raise ValueError("Q must be positive wherever P is")
    return float(np.sum(P[support] * np.log(P[support] / Q[support])))


def search_clip_ratio(X, spec: DatatypeSpec, candidates, sv_set=None):
    """Grid-search the clip ratio that minimizes group MSE; ties go to the ratio nearest 1."""
    candidates = [float(a) for a in candidates]
    if not candidates:
        raise ValueError("no clip candidates")
    if any(not 0.0 < a <= 1.0 for a in candidates):
        raise ValueError("clip candidates must lie in (0, 1]")
    X = np.asarray(X, dtype=np.float64)
    best = None
    for a in sorted(candidates, key=lambda a: (abs(1.0 - a), -a)):
        if spec.kind == "int":
            q = quantize_group_int(X, spec.bits, a, a)
            err = mse(X, dequantize_group_int(q))
        elif sv_set is not None:
            q = quantize_group_razer(X, spec, sv_set, a)
            err = mse(X, dequantize_group_razer(q, spec, sv_set))
        else:
            q = quantize_group_fp(X, spec, a)
            err = mse(X, dequantize_group_fp(q, spec))
        if best is None or err < best[0]:
            best = (err, a, q)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------

@dataclass
class QuantizedTensor:
    """Group-major quantized tensor; groups run along the innermost dimension."""

    dims: tuple
    config: QuantConfig
    codes: np.ndarray          # (n_groups, group_size) uint8
    scales: np.ndarray         # (n_groups,) float32, half-exact
    tail_len: int
    sv_set: tuple | None = None
    sv_index: np.ndarray | None = None
    zero_points: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return int(self.codes.shape[0])

    @property
    def groups_per_row(self) -> int:
        return math.ceil(self.dims[-1] / self.config.group_size)

    @property
    def groups(self) -> list[QuantizedGroup]:
        out = []
        for i in range(self.n_groups):
            if self.zero_points is not None:
                params = IntGroupParams(float(self.scales[i]), int(self.zero_points[i]), self.config.spec.bits)
            else:
                params = RzrGroupParams(float(self.scales[i]), int(self.sv_index[i]))
            out.append(QuantizedGroup(self.codes[i], params))
        return out


def _group_layout(dims, g):
    rows = int(np.prod(dims[:-1])) if len(dims) > 1 else 1
    length = int(dims[-1])
    per_row = math.ceil(length / g)
    tail = length - (per_row - 1) * g
    return rows, length, per_row, tail


def to_groups(T, g: int):
    """Zero-pad rows to a multiple of ``g``; returns (groups, valid_mask, tail_len)."""
    T = np.asarray(T)
    if T.size == 0 or T.ndim == 0:
        raise ValueError("empty tensor")
    rows, length, per_row, tail = _group_layout(T.shape, g)
    padded = np.zeros((rows, per_row * g), dtype=np.float64)
    padded[:, :length] = T.reshape(rows, length)
    valid = np.zeros((rows, per_row * g), dtype=bool)
    valid[:, :length] = True
    return padded.reshape(-1, g), valid.reshape(-1, g), tail


def from_groups(groups, dims) -> np.ndarray:
    g = groups.shape[1]
    rows, length, per_row, _ = _group_layout(dims, g)
    return groups.reshape(rows, per_row * g)[:, :length].reshape(dims)


def _canonicalize_unused(codes, scales, idx, valid, spec, sv):
    """Groups that never emit the reserved code have no meaningful sv index.

    Re-select on their own reconstruction so the stored encoding is the one a
    second quantization pass would produce, making quantize(dequantize(q)) == q.
    """
    unused = np.nonzero(~np.any(codes == spec.reserved_code, axis=1))[0]
    if unused.size == 0:
        return
    recon = dequantize_groups_fp(codes[unused], scales[unused], spec, sv, idx[unused]).astype(np.float64)
    c, s, k, err = quantize_groups_razer(recon, spec, sv, valid=valid[unused])
    exact = err == 0
    rows = unused[exact]
    codes[rows], scales[rows], idx[rows] = c[exact], s[exact], k[exact]


def quantize_tensor(T, config: QuantConfig, sv_set=None) -> QuantizedTensor:
    T = np.asarray(T)
    if T.size == 0 or T.ndim == 0:
        raise ValueError("empty tensor")
    if not np.all(np.isfinite(T)):
        raise ValueError("non-finite input")
    X, valid, tail = to_groups(T, config.group_size)
    spec = config.spec
    n = X.shape[0]
    codes = np.empty(X.shape, dtype=np.uint8)
    scales = np.empty(n, dtype=np.float32)
    if spec.kind == "int":
        zps = np.empty(n, dtype=np.int64)
        for a in range(0, n, _CHUNK_GROUPS):
            b = a + _CHUNK_GROUPS
            codes[a:b], scales[a:b], zps[a:b] = quantize_groups_int(
                X[a:b], spec.bits, config.alpha, config.beta, valid[a:b])
        return QuantizedTensor(tuple(T.shape), config, codes, scales, tail, zero_points=zps)
    if sv_set is None:
        raise ValueError("RaZeR quantization needs a special-value set")
    sv = _sv_values(sv_set)
    if sv.shape != (4,):
        raise ValueError("special-value set must have exactly 4 entries")
    idx = np.empty(n, dtype=np.uint8)
    for a in range(0, n, _CHUNK_GROUPS):
        b = a + _CHUNK_GROUPS
        codes[a:b], scales[a:b], idx[a:b], _ = quantize_groups_razer(
            X[a:b], spec, sv, config.alpha, valid=valid[a:b])
    _canonicalize_unused(codes, scales, idx, valid, spec, sv)
    return QuantizedTensor(tuple(T.shape), config, codes, scales, tail,
                           sv_set=tuple(float(v) for v in sv), sv_index=idx)


def dequantize_groups(qt: QuantizedTensor) -> np.ndarray:
    if qt.zero_points is not None:
        return dequantize_groups_int(qt.codes, qt.scales, qt.zero_points)
    return dequantize_groups_fp(qt.codes, qt.scales, qt.config.spec, qt.sv_set, qt.sv_index)


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    return from_groups(dequantize_groups(qt), qt.dims)

"""Special-value set calibration.

Per layer, a CMA-ES search proposes four special values inside a search
range; candidates are snapped to the 6-bit storage grid before they are
scored, so the best-so-far set is always a storable one. Per-layer sets are
then rounded and clustered into a single 4-entry table for the model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import DatatypeSpec, get_datatype
from .quantizer import (
    dequantize_groups_fp,
    dequantize_groups_int,
    from_groups,
    quantize_groups_fp,
    quantize_groups_int,
    quantize_groups_razer,
    to_groups,
)

log = logging.getLogger(__name__)

SV_STEP = 0.5
SV_BITS = 6
MANUAL_SVSET = (-10.0, -5.0, 5.0, 10.0)
DEFAULT_RANGES = {"fp3": (-9.0, 9.0), "fp4": (-12.0, 12.0)}


def storage_limit(nbits: int = SV_BITS) -> float:
    """Largest magnitude on the sign + (nbits-1)-bit, 0.5-step storage grid."""
    return ((1 << (nbits - 1)) - 1) * SV_STEP


@dataclass(frozen=True)
class SVSet:
    """Four distinct special values, on the storage grid and off the base grid."""

    values: tuple
    datatype: str = "fp4"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) != 4:
            raise ValueError(f"a special-value set has exactly 4 entries, got {len(vals)}")
        if len(set(vals)) != 4:
            raise ValueError(f"special values must be distinct: {vals}")
        lim = storage_limit()
        for v in vals:
            if abs(v) > lim or not float(v / SV_STEP).is_integer():
                raise ValueError(f"{v} is not on the {SV_BITS}-bit storage grid")
        grid = get_datatype(self.datatype).grid
        clash = [v for v in vals if v in grid]
        if clash:
            raise ValueError(f"special values {clash} collide with the {self.datatype} grid")

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return 4

    def __getitem__(self, i):
        return self.values[i]

    @property
    def spec(self) -> DatatypeSpec:
        return get_datatype(self.datatype)


DEFAULT_SVSETS = {
    "fp4": SVSet((5.0, 8.0, -5.0, -8.0), "fp4"),
    "fp3": SVSet((5.0, 6.0, -5.0, -6.0), "fp3"),
}


@dataclass(frozen=True)
class SearchRange:
    sv_min: float
    sv_max: float

    def __post_init__(self):
        if not self.sv_min < self.sv_max:
            raise ValueError(f"empty search range [{self.sv_min}, {self.sv_max}]")


@dataclass
class LayerSpec:
    W: np.ndarray
    X_cal: np.ndarray | None = None
    KV: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        if self.X_cal is not None:
            self.X_cal = np.asarray(self.X_cal, dtype=np.float64)
            if self.X_cal.ndim != 2 or self.X_cal.shape[0] != self.W.shape[1]:
                raise ValueError(f"calibration activations {self.X_cal.shape} do not match W {self.W.shape}")
        if self.KV is not None:
            self.KV = np.atleast_2d(np.asarray(self.KV, dtype=np.float64))


# ---------------------------------------------------------------------------
# rounding
# ---------------------------------------------------------------------------

def _snap(v: float, lim: float) -> float:
    return float(np.clip(np.rint(v / SV_STEP) * SV_STEP, -lim, lim))


def _settle(v: float, taken: set, grid: tuple, lim: float) -> float:
    """Step ``v`` outward (then inward at the storage limit) until it is free."""
    if v not in taken and v not in grid:
        return v
    direction = 1.0 if v >= 0 else -1.0
    for d in (direction, -direction):
        w = v
        while abs(w + d * SV_STEP) <= lim:
            w += d * SV_STEP
            if w not in taken and w not in grid:
                return w
    raise ValueError("storage grid exhausted while resolving collisions")


def round_values(values, datatype: str = "fp4", nbits: int = SV_BITS) -> tuple:
    lim = storage_limit(nbits)
    grid = get_datatype(datatype).grid
    taken: set = set()
    out = []
    for v in values:
        w = _settle(_snap(float(v), lim), taken, grid, lim)
        taken.add(w)
        out.append(w)
    return tuple(out)


def round_svset(sets, nbits: int = SV_BITS, datatype: str | None = None) -> list[SVSet]:
    """Snap each set onto the 0.5-step storage grid and resolve collisions outward."""
    out = []
    for s in sets:
        dt = datatype or getattr(s, "datatype", "fp4")
        out.append(SVSet(round_values(getattr(s, "values", s), dt, nbits), dt))
    return out


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list = field(default_factory=list)


def kmeans_1d(points, k: int, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm in one dimension with farthest-point initialization.

    The first centre is the smallest point; each following centre is the
    point farthest from the chosen ones (first in sorted order on ties).
    """
    pts = np.sort(np.asarray(points, dtype=np.float64))
    centers = [pts[0]]
    while len(centers) < k:
        d = np.min(np.abs(pts[:, None] - np.asarray(centers)[None, :]), axis=1)
        centers.append(pts[int(np.argmax(d))])
    c = np.asarray(centers)
    history = []
    labels = np.zeros(pts.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(np.abs(pts[:, None] - c[None, :]), axis=1)
        history.append(float(np.sum((pts - c[labels]) ** 2)))
        new = c.copy()
        for j in range(k):
            members = pts[labels == j]
            if members.size:
                new[j] = members.mean()
        if np.array_equal(new, c):
            break
        c = new
    labels = np.argmin(np.abs(pts[:, None] - c[None, :]), axis=1)
    final = float(np.sum((pts - c[labels]) ** 2))
    if final != history[-1]:
        history.append(final)
    return KMeansResult(c, labels, history)


def cluster_svsets(sets, S: int = 4, datatype: str | None = None) -> SVSet:
    """Compress per-layer sets into one S-entry table via 1-D k-means."""
    sets = list(sets)
    if not sets:
        raise ValueError("nothing to cluster")
    dt = datatype or getattr(sets[0], "datatype", "fp4")
    first = tuple(getattr(sets[0], "values", sets[0]))
    if len(set(first)) == S and all(set(getattr(s, "values", s)) == set(first) for s in sets):
        return SVSet(round_values(first, dt), dt)
    pts = np.concatenate([np.asarray(getattr(s, "values", s), dtype=np.float64) for s in sets])
    k = min(S, np.unique(pts).size)
    res = kmeans_1d(pts, k)
    centroids = list(np.sort(res.centroids))
    # degenerate input: pad with copies; rounding steps them outward
    while len(centroids) < S:
        centroids.append(centroids[-1])
    return SVSet(round_values(centroids, dt), dt)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def reconstruct(T, spec: DatatypeSpec, sv_values, g: int) -> np.ndarray:
    """Quantize-dequantize ``T`` along its last axis with RaZeR groups of ``g``."""
    X, valid, _ = to_groups(T, g)
    codes, s, idx, _ = quantize_groups_razer(X, spec, sv_values, valid=valid)
    return from_groups(dequantize_groups_fp(codes, s, spec, sv_values, idx), np.shape(T))


def layer_objective(layer: LayerSpec, spec: DatatypeSpec, sv_values, g: int, target: str = "W") -> float:
    """Output-activation error when calibration activations exist, else weight MSE."""
    if target == "KV":
        if layer.KV is None:
            raise ValueError("layer has no KV tensor")
        d = layer.KV - reconstruct(layer.KV, spec, sv_values, g)
        return float(np.sum(d * d))
    W_hat = reconstruct(layer.W, spec, sv_values, g)
    if layer.X_cal is not None:
        d = (layer.W - W_hat) @ layer.X_cal
    else:
        d = layer.W - W_hat
    return float(np.sum(d * d))


# ---------------------------------------------------------------------------
# sweeps and ranges
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    magnitudes: np.ndarray
    razer_err: np.ndarray
    fp_err: float
    int_err: float

    def normalized(self, by: str = "int"):
        """(razer, fp, int) errors divided by the chosen baseline; 0/0 is 0."""
        base = self.int_err if by == "int" else self.fp_err
        if base == 0:
            return np.zeros_like(self.razer_err), 0.0, 0.0
        return self.razer_err / base, self.fp_err / base, self.int_err / base


def _baseline_errors(X, valid, spec):
    _, _, fp_err = quantize_groups_fp(X, spec, valid=valid)
    codes, s, z = quantize_groups_int(X, spec.bits, valid=valid)
    d = np.where(valid, X - dequantize_groups_int(codes, s, z), 0.0)
    return float(fp_err.sum()), float(np.sum(d * d))


def sweep_sv_error(T, spec: DatatypeSpec, magnitudes, g: int = 128, signs=(1.0, -1.0)) -> SweepResult:
    """Total quantization error with the candidate pair {+m, -m} for every magnitude m."""
    T = np.asarray(T, dtype=np.float64)
    if T.size == 0:
        raise ValueError("empty tensor")
    mags = np.asarray(magnitudes, dtype=np.float64)
    if np.any(mags <= 0):
        raise ValueError("magnitudes must be positive")
    X, valid, _ = to_groups(T, g)
    fp_err, int_err = _baseline_errors(X, valid, spec)
    errs = []
    for m in mags:
        _, _, _, err = quantize_groups_razer(X, spec, [sg * m for sg in signs], valid=valid)
        errs.append(float(err.sum()))
    return SweepResult(mags, np.asarray(errs), fp_err, int_err)


def derive_search_range(T, spec: DatatypeSpec, symmetric: bool = True, magnitudes=None) -> SearchRange:
    """Smallest interval holding every integer magnitude whose sweep error beats plain FP.

    With ``symmetric=False`` each side is swept with its own sign so skewed
    data can get a lopsided range. Falls back to the datatype default when no
    magnitude helps.
    """
    lim = storage_limit()
    default = SearchRange(*DEFAULT_RANGES[spec.name])
    if magnitudes is None:
        magnitudes = np.arange(1, int(lim) + 1, dtype=np.float64)
    if symmetric:
        res = sweep_sv_error(T, spec, magnitudes)
        good = res.magnitudes[res.razer_err < res.fp_err]
        if good.size == 0:
            return default
        m = min(float(good.max()), lim)
        return SearchRange(-m, m)
    hi = sweep_sv_error(T, spec, magnitudes, signs=(1.0,))
    lo = sweep_sv_error(T, spec, magnitudes, signs=(-1.0,))
    good_hi = hi.magnitudes[hi.razer_err < hi.fp_err]
    good_lo = lo.magnitudes[lo.razer_err < lo.fp_err]
    if good_hi.size == 0 and good_lo.size == 0:
        return default
    top = min(float(good_hi.max()), lim) if good_hi.size else default.sv_max
    bottom = -min(float(good_lo.max()), lim) if good_lo.size else default.sv_min
    return SearchRange(bottom, top)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    svset: SVSet
    objective: float
    evaluations: int
    history: list = field(default_factory=list)   # best-so-far after each evaluation


def _initial_guess(rng: SearchRange) -> np.ndarray:
    # evenly spaced interior points; no prior on where the optimum sits
    return np.linspace(rng.sv_min, rng.sv_max, 6)[1:5]


def search_layer_svset(layer: LayerSpec, spec: DatatypeSpec, rng: SearchRange, budget: int = 200,
                       seed: int = 0, g: int = 128, target: str = "W", popsize: int = 16) -> SearchResult:
    """Derivative-free search for the 4-value set minimizing a layer's quantization error."""
    import cma

    if budget < 20:
        raise ValueError("budget must be at least 20 evaluations")
    if rng.sv_max - rng.sv_min < SV_STEP:
        raise ValueError("search range is narrower than one storage step")
    lim = storage_limit()
    lo, hi = max(rng.sv_min, -lim), min(rng.sv_max, lim)
    cache: dict = {}

    def score(x):
        vals = round_values(np.clip(x, lo, hi), spec.name)
        key = tuple(sorted(vals))
        if key not in cache:
            cache[key] = layer_objective(layer, spec, vals, g, target)
        return cache[key], vals

    best_val, best_set = score(_initial_guess(SearchRange(lo, hi)))
    history = [best_val]
    used = 1
    es = cma.CMAEvolutionStrategy(
        _initial_guess(SearchRange(lo, hi)), (hi - lo) / 4.0,
        {"seed": int(seed) + 1, "bounds": [lo, hi], "popsize": popsize, "verbose": -9},
    )
    while used < budget:
        pop = es.ask()
        fits = []
        for x in pop:
            if used >= budget:
                break
            f, vals = score(x)
            used += 1
            fits.append(f)
            if f < best_val:
                best_val, best_set = f, vals
            history.append(best_val)
        if len(fits) < len(pop):
            break
        es.tell(pop, fits)
    log.debug("layer %s: best objective %.6g after %d evaluations", layer.name, best_val, used)
    return SearchResult(SVSet(best_set, spec.name), best_val, used, history)


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    sv_w: SVSet
    sv_kv: SVSet | None
    layer_sets_w: list
    layer_sets_kv: list
    layer_objectives_w: list
    layer_objectives_kv: list
    model_objective_w: float
    model_objective_kv: float | None
    ranges: dict

    def to_report(self, layer_names, seed: int, budget: int, datatype: str, group_size: int) -> dict:
        layers = []
        for i, name in enumerate(layer_names):
            entry = {
                "name": name,
                "sv_w": list(self.layer_sets_w[i].values),
                "objective_w": self.layer_objectives_w[i],
                "sv_kv": list(self.layer_sets_kv[i].values) if self.layer_sets_kv[i] is not None else None,
                "objective_kv": self.layer_objectives_kv[i],
            }
            layers.append(entry)
        return {
            "datatype": datatype,
            "group_size": group_size,
            "seed": seed,
            "budget": budget,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "layers": layers,
            "model": {
                "sv_w": list(self.sv_w.values),
                "objective_w": self.model_objective_w,
                "sv_kv": list(self.sv_kv.values) if self.sv_kv is not None else None,
                "objective_kv": self.model_objective_kv,
            },
        }


def calibrate_model(layers, spec_w: DatatypeSpec, spec_kv: DatatypeSpec | None = None, budget: int = 200,
                    seed: int = 0, g_w: int = 128, g_kv: int = 64, range_w: SearchRange | None = None,
                    range_kv: SearchRange | None = None) -> CalibrationResult:
    """Per-layer search for weights (and KV when present), rounding, then clustering."""
    layers = list(layers)
    if not layers:
        raise ValueError("at least one layer is required")
    spec_kv = spec_kv or spec_w
    range_w = range_w or SearchRange(*DEFAULT_RANGES[spec_w.name])
    range_kv = range_kv or SearchRange(*DEFAULT_RANGES[spec_kv.name])
    sets_w, sets_kv, obj_w, obj_kv = [], [], [], []
    for i, layer in enumerate(layers):
        res = search_layer_svset(layer, spec_w, range_w, budget, seed + i, g_w, "W")
        sets_w.append(res.svset)
        obj_w.append(res.objective)
        if layer.KV is not None:
            res = search_layer_svset(layer, spec_kv, range_kv, budget, seed + 10_000 + i, g_kv, "KV")
            sets_kv.append(res.svset)
            obj_kv.append(res.objective)
        else:
            sets_kv.append(None)
            obj_kv.append(None)
    sets_w = round_svset(sets_w, datatype=spec_w.name)
    model_w = cluster_svsets(sets_w, 4, spec_w.name)
    total_w = sum(layer_objective(l, spec_w, model_w.values, g_w, "W") for l in layers)
    present = [s for s in sets_kv if s is not None]
    model_kv = total_kv = None
    if present:
        model_kv = cluster_svsets(round_svset(present, datatype=spec_kv.name), 4, spec_kv.name)
        total_kv = sum(layer_objective(l, spec_kv, model_kv.values, g_kv, "KV")
                       for l in layers if l.KV is not None)
    return CalibrationResult(model_w, model_kv, sets_w, sets_kv, obj_w, obj_kv, total_w, total_kv,
                             {"w": (range_w.sv_min, range_w.sv_max), "kv": (range_kv.sv_min, range_kv.sv_max)})


def manual_objective(layers, spec: DatatypeSpec, g: int = 128, target: str = "W") -> float:
    return sum(layer_objective(l, spec, MANUAL_SVSET, g, target) for l in layers)


def planted_outlier_layer(rng: np.random.Generator, rows: int = 64, cols: int = 256, g: int = 128,
                          outlier_rate: float = 0.02, sigma: float = 9.0, name: str = "") -> LayerSpec:
    """Synthetic layer: N(0,1) body plus outliers at +sigma times each group's std."""
    W = rng.standard_normal((rows, cols))
    groups = W.reshape(rows, cols // g, g)
    std = groups.std(axis=2, keepdims=True)
    mask = rng.random(groups.shape) < outlier_rate
    groups = np.where(mask, sigma * std, groups)
    return LayerSpec(groups.reshape(rows, cols), name=name)

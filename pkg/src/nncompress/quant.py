"""Per-layer k-means weight quantization with a parameter-count driven cluster count.

Surviving weights of each prunable class are clustered in 1-D with Lloyd's
algorithm, starting from centroids spaced evenly between the smallest and
largest surviving value. Each weight is then overwritten by its centroid
(no codebook is kept at inference time). Pruned positions belong to a fixed
zero centroid that never moves.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .model import layer_of


@dataclass
class QuantConfig:
    base_clusters: int = 32
    params_per_set: int = 100_000
    tolerance: float = 1e-6
    max_iterations: int = 300
    include_zero_cluster: bool = True
    overrides: dict = field(default_factory=dict)  # class id -> (base_clusters, params_per_set)

    def __post_init__(self):
        if self.base_clusters < 1 or self.params_per_set < 1:
            raise ConfigError("base_clusters and params_per_set must be >= 1")
        if self.max_iterations < 1 or self.tolerance < 0:
            raise ConfigError("max_iterations must be >= 1 and tolerance >= 0")

    @classmethod
    def static(cls, clusters, **kw):
        """Fixed ``clusters`` per layer whatever its size."""
        return cls(base_clusters=clusters, params_per_set=2**62, **kw)

    def for_class(self, class_id):
        return self.overrides.get(class_id, (self.base_clusters, self.params_per_set))

    def to_dict(self):
        d = asdict(self)
        d["overrides"] = {k: list(v) for k, v in self.overrides.items()}
        return d


def dynamic_cluster_count(param_count, params_per_set, base_clusters, distinct=None):
    """``ceil(param_count / params_per_set) * base_clusters``, capped at ``distinct`` values if given."""
    if param_count < 1 or params_per_set < 1 or base_clusters < 1:
        raise ConfigError("param_count, params_per_set and base_clusters must be >= 1")
    c = -(-int(param_count) // int(params_per_set)) * int(base_clusters)
    if distinct is not None:
        c = min(c, int(distinct))
    return c


def init_centroids_linear(w_min, w_max, c):
    """``c`` evenly spaced values on ``[w_min, w_max]``; one centroid sits at the midpoint."""
    if c < 1:
        raise ConfigError("need at least one centroid")
    if w_min > w_max:
        raise ConfigError("w_min must not exceed w_max")
    if c == 1:
        return np.array([(w_min + w_max) / 2.0])
    return np.linspace(w_min, w_max, c)


def nearest_centroid(values, centroids):
    """Index of the nearest centroid for every value; equal distances go to the lower index."""
    values = np.asarray(values, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    order = np.argsort(centroids, kind="stable")
    sc = centroids[order]
    # collapse duplicate centroid values onto their lowest index
    keep = np.ones(sc.size, dtype=bool)
    keep[1:] = sc[1:] != sc[:-1]
    uv = sc[keep]
    uidx = order[keep]
    if uv.size == 1:
        return np.full(values.shape, uidx[0], dtype=np.int64)
    pos = np.searchsorted(uv, values)
    left = np.clip(pos - 1, 0, uv.size - 1)
    right = np.clip(pos, 0, uv.size - 1)
    dl = np.abs(values - uv[left])
    dr = np.abs(values - uv[right])
    pick_left = (dl < dr) | ((dl == dr) & (uidx[left] < uidx[right]))
    return np.where(pick_left, uidx[left], uidx[right]).astype(np.int64)


def inertia_of(values, centroids, assignments):
    d = np.asarray(values, dtype=np.float64) - np.asarray(centroids, dtype=np.float64)[assignments]
    return float(np.dot(d, d))


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    history: list  # inertia after each assignment step, first entry is the initial state


def kmeans_1d(values, initial_centroids, tolerance=1e-6, max_iterations=300):
    """Lloyd's algorithm on scalars.

    Stops when the relative inertia decrease is at most ``tolerance``, when
    assignments stop changing, or after ``max_iterations`` updates. An empty
    cluster is moved onto the value farthest from its current centroid. The
    recorded inertia never increases: an update that would raise it through
    rounding is discarded and the loop ends.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    cent = np.array(initial_centroids, dtype=np.float64).ravel()
    if v.size == 0:
        raise ConfigError("kmeans_1d needs at least one value")
    if cent.size == 0:
        raise ConfigError("kmeans_1d needs at least one centroid")
    c = cent.size
    assign = nearest_centroid(v, cent)
    inertia = inertia_of(v, cent, assign)
    history = [inertia]
    it = 0
    while it < max_iterations and inertia > 0:
        it += 1
        counts = np.bincount(assign, minlength=c)
        sums = np.bincount(assign, weights=v, minlength=c)
        new = cent.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled]
        reseeded = False
        work = assign.copy()
        for j in np.flatnonzero(~filled):
            d = np.abs(v - new[work])
            far = int(np.argmax(d))
            if d[far] == 0:
                break
            new[j] = v[far]
            work[far] = j
            reseeded = True
        new_assign = nearest_centroid(v, new)
        new_inertia = inertia_of(v, new, new_assign)
        if new_inertia > inertia:
            break
        done = (not reseeded and np.array_equal(new_assign, assign)) or \
            (inertia - new_inertia) <= tolerance * inertia
        cent, assign, inertia = new, new_assign, new_inertia
        history.append(inertia)
        if done:
            break
    return KMeansResult(cent, assign, inertia, it, history)


@dataclass
class QuantizedLayer:
    class_id: str
    centroids: list
    assignments: np.ndarray = field(repr=False)
    c: int
    c_formula: int
    param_count: int
    surviving: int
    inertia: float
    iterations: int
    degenerate: bool = False

    def summary(self):
        return {"class": self.class_id, "c": self.c, "c_formula": self.c_formula,
                "param_count": self.param_count, "surviving": self.surviving,
                "inertia": self.inertia, "iterations": self.iterations,
                "degenerate": self.degenerate, "centroids": list(self.centroids)}


def quantize_layer(weights, mask, config=None, param_count=None, class_id=""):
    """Quantize one weight tensor; returns ``(quantized_weights, QuantizedLayer)``.

    ``param_count`` feeds the cluster-count rule and defaults to the number of
    surviving weights.
    """
    config = QuantConfig() if config is None else config
    weights = np.asarray(weights)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != weights.shape:
        raise ConfigError(f"mask shape {mask.shape} differs from weight shape {weights.shape}")
    if config.include_zero_cluster:
        members = mask
    else:
        members = np.ones(weights.shape, dtype=bool)
    vals = weights[members].astype(np.float64)
    surviving = int(np.count_nonzero(mask))
    if surviving == 0:
        empty = QuantizedLayer(class_id, [], np.zeros(0, dtype=np.int64), 0, 0,
                               param_count or 0, 0, 0.0, 0, True)
        return np.zeros_like(weights), empty
    base, per_set = config.for_class(class_id)
    p = surviving if param_count is None else int(param_count)
    c_formula = dynamic_cluster_count(p, per_set, base)
    distinct = np.unique(vals)
    c = min(c_formula, distinct.size)
    init = distinct if c == distinct.size else init_centroids_linear(distinct[0], distinct[-1], c)
    res = kmeans_1d(vals, init, config.tolerance, config.max_iterations)
    out = np.zeros_like(weights)
    out[members] = res.centroids[res.assignments].astype(weights.dtype)
    out[~mask] = 0
    rec = QuantizedLayer(class_id, [float(x) for x in res.centroids], res.assignments, c, c_formula,
                         p, surviving, res.inertia, res.iterations)
    return out, rec


def quantize_model(model, config=None, threads=1):
    """Quantize every prunable class independently; other classes pass through.

    The cluster count of a class is driven by the surviving parameter count of
    its whole layer (weights plus any non-prunable parameters such as the bias).
    Returns ``(quantized_model, {class_id: QuantizedLayer})``.
    """
    config = QuantConfig() if config is None else config
    out = model.copy()
    layer_counts = {}
    for k, m in model.masks.items():
        layer_counts[layer_of(k)] = layer_counts.get(layer_of(k), 0) + int(np.count_nonzero(m))

    def one(k):
        return quantize_layer(model.params[k], model.masks[k], config, layer_counts[layer_of(k)], k)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, model.prunable))
    else:
        results = [one(k) for k in model.prunable]
    records = {}
    for k, (q, rec) in zip(model.prunable, results):
        out.params[k] = q
        records[k] = rec
    return out, records

"""Magnitude pruning strategies and the iterative prune / retrain / validate loop.

Count-based strategies (class-blind, layer-wise, class-uniform) prune exactly
``ceil(p * n)`` weights, where ``n`` is the original number of prunable
weights in the pool the percentile is taken over. Candidates are ordered by
(already pruned first, magnitude, weight-class id, flat index), so the
selection is deterministic and previously pruned weights always stay pruned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateError
from .model import Model, evaluate, layer_of, train_epoch
from .tensor import make_rng

log = logging.getLogger(__name__)

KINDS = ("class_blind", "layer_wise", "class_uniform", "class_distribution")
COUNT_BASED = ("class_blind", "layer_wise", "class_uniform")


def _kind(name):
    k = name.replace("-", "_")
    if k not in KINDS:
        raise ConfigError(f"unknown pruning strategy {name!r}; expected one of {KINDS}")
    return k


@dataclass(frozen=True)
class PruneStrategy:
    kind: str = "class_blind"
    lam: float | None = None  # std-dev scale, class_distribution only

    def __post_init__(self):
        object.__setattr__(self, "kind", _kind(self.kind))
        if (self.lam is not None) != (self.kind == "class_distribution"):
            raise ConfigError("lam must be given for class_distribution and only for it")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be >= 0")


@dataclass
class PruneConfig:
    strategy: PruneStrategy = field(default_factory=PruneStrategy)
    initial_percentage: float = 0.05
    step: float = 0.05
    accuracy_drop_threshold: float = 0.05
    retrain_epochs: int = 3
    prunable_classes: tuple | None = None  # None: the model's own prunable set
    lr: float = 0.05
    batch_size: int = 32
    max_percentage: float = 1.0

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = PruneStrategy(self.strategy)

    def validate(self):
        if self.step <= 0:
            raise ConfigError("step must be > 0")
        if not 0 <= self.initial_percentage <= 1:
            raise ConfigError("initial_percentage must lie in [0, 1]")
        if not 0 <= self.max_percentage <= 1:
            raise ConfigError("max_percentage must lie in [0, 1]")
        if self.accuracy_drop_threshold < 0:
            raise ConfigError("accuracy_drop_threshold must be >= 0")
        if self.retrain_epochs < 0:
            raise ConfigError("retrain_epochs must be >= 0")
        if self.strategy.kind == "class_distribution":
            raise ConfigError("class_distribution is lambda-driven and cannot run on a percentage schedule")

    def to_dict(self):
        d = asdict(self)
        d["prunable_classes"] = list(self.prunable_classes) if self.prunable_classes else None
        if math.isinf(self.accuracy_drop_threshold):
            d["accuracy_drop_threshold"] = None
        return d


def prune_count(n, p):
    """``ceil(p * n)`` robust to binary rounding of ``p`` (0.55 * 20 is 11, not 12)."""
    x = p * n
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return min(max(int(r), 0), n)
    return min(max(math.ceil(x), 0), n)


# pools --------------------------------------------------------------------

def _pool(source, classes=None):
    """Normalise a Model or a ``{class_id: array}`` mapping into (weights, masks)."""
    if isinstance(source, Model):
        ids = list(source.prunable) if classes is None else list(classes)
        weights = {k: source.params[k] for k in ids}
        masks = {k: source.masks[k] for k in ids}
    else:
        ids = list(source) if classes is None else list(classes)
        weights = {k: np.asarray(source[k]) for k in ids}
        masks = {k: np.ones(weights[k].shape, dtype=bool) for k in ids}
    if not ids:
        raise ConfigError("no prunable weight classes")
    return dict(sorted(weights.items())), dict(sorted(masks.items()))


def _bottom(weights, masks, ids, k):
    """Flat selection of the ``k`` lowest-ranked positions over the classes ``ids``.

    Returns ``(selected, magnitude_of_kth)`` where ``selected`` maps class id to
    a boolean array of positions to prune.
    """
    mags = np.concatenate([np.abs(weights[c].astype(np.float64)).ravel() for c in ids])
    alive = np.concatenate([masks[c].ravel() for c in ids])
    if mags.size == 0:
        raise ConfigError(f"weight classes {ids} are empty")
    # lexsort is stable: concatenation order supplies the (class id, flat index) tie-break
    order = np.lexsort((np.where(alive, mags, 0.0), alive))
    chosen = np.zeros(mags.size, dtype=bool)
    chosen[order[:k]] = True
    thr = float(np.where(alive, mags, 0.0)[order[k - 1]]) if k > 0 else -math.inf
    selected, start = {}, 0
    for c in ids:
        n = weights[c].size
        selected[c] = chosen[start:start + n].reshape(weights[c].shape)
        start += n
    return selected, thr


def _groups(ids, kind):
    if kind == "class_blind":
        return {"*": list(ids)}
    if kind == "class_uniform":
        return {c: [c] for c in ids}
    groups = {}
    for c in ids:
        groups.setdefault(layer_of(c), []).append(c)
    return groups


# thresholds ----------------------------------------------------------------

def threshold_class_blind(source, p, classes=None):
    """Magnitude of the ``ceil(p*n)``-th smallest prunable weight, pooled globally.

    ``-inf`` when nothing is pruned (``p == 0``).
    """
    weights, masks = _pool(source, classes)
    n = sum(w.size for w in weights.values())
    return _bottom(weights, masks, list(weights), prune_count(n, min(max(p, 0.0), 1.0)))[1]


def threshold_layer_wise(source, p, classes=None):
    """Per-class percentile thresholds: same rule as class-blind, one class at a time."""
    weights, masks = _pool(source, classes)
    out = {}
    for c in weights:
        k = prune_count(weights[c].size, min(max(p, 0.0), 1.0))
        out[c] = _bottom(weights, masks, [c], k)[1]
    return out


def threshold_class_distribution(source, lam, classes=None):
    """``lam`` times the population standard deviation of each class."""
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    weights, _ = _pool(source, classes)
    out = {}
    for c, w in weights.items():
        if w.size < 2:
            raise DegenerateError(f"class {c} has {w.size} weight(s); std-dev threshold undefined")
        out[c] = float(lam) * float(np.std(w.astype(np.float64)))
    return out


# application ---------------------------------------------------------------

@dataclass
class PruneInfo:
    strategy: str
    amount: float
    clamped: bool
    thresholds: dict
    pruned: int
    prunable: int


def select_prune(source, strategy, amount, classes=None):
    """New masks for the prunable classes (``True`` = survives) plus a PruneInfo."""
    if isinstance(strategy, str):
        strategy = PruneStrategy(strategy, amount if _kind(strategy) == "class_distribution" else None)
    weights, masks = _pool(source, classes)
    clamped = False
    new_masks = {}
    thresholds = {}
    if strategy.kind == "class_distribution":
        for c, thr in threshold_class_distribution(weights, strategy.lam).items():
            new_masks[c] = masks[c] & ~(np.abs(weights[c]) <= thr)
            thresholds[c] = thr
    else:
        if amount < 0:
            raise ConfigError("prune percentage must be >= 0")
        if amount > 1:
            clamped, amount = True, 1.0
        for name, ids in _groups(list(weights), strategy.kind).items():
            n = sum(weights[c].size for c in ids)
            sel, thr = _bottom(weights, masks, ids, prune_count(n, amount))
            thresholds[name] = thr
            for c in ids:
                new_masks[c] = masks[c] & ~sel[c]
    pruned = sum(int(np.count_nonzero(~m)) for m in new_masks.values())
    total = sum(m.size for m in new_masks.values())
    info = PruneInfo(strategy.kind, float(amount), clamped, thresholds, pruned, total)
    return new_masks, info


def apply_prune(model, strategy, amount):
    """Prune a copy of ``model``; returns ``(pruned_model, PruneInfo)``.

    ``amount`` is the cumulative fraction of original prunable weights for
    count-based strategies and the std-dev scale for class_distribution.
    Values above 1 are clamped and flagged in the info.
    """
    new_masks, info = select_prune(model, strategy, amount)
    out = model.copy()
    for c, m in new_masks.items():
        out.masks[c] = m
        out.params[c][~m] = 0
    return out, info


# iterative loop --------------------------------------------------------------

@dataclass
class PruneIteration:
    percentage: float
    thresholds: dict
    accuracy: float
    surviving: int
    within_threshold: bool


@dataclass
class PruneHistory:
    strategy: str
    baseline_accuracy: float
    iterations: list = field(default_factory=list)
    selected_iteration: int | None = None  # snapshot returned (last within threshold)
    stop_reason: str = ""

    @property
    def best_iteration(self):
        """Index of the highest-accuracy snapshot (earliest on ties)."""
        if not self.iterations:
            return None
        accs = [it.accuracy for it in self.iterations]
        return int(np.argmax(accs))

    @property
    def final_percentage(self):
        if self.selected_iteration is None:
            return 0.0
        return self.iterations[self.selected_iteration].percentage

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and math.isinf(v) else v
        return {
            "strategy": self.strategy,
            "baseline_accuracy": self.baseline_accuracy,
            "iterations": [
                {"percentage": it.percentage,
                 "thresholds": {k: clean(v) for k, v in it.thresholds.items()},
                 "accuracy": it.accuracy,
                 "surviving": it.surviving,
                 "within_threshold": it.within_threshold}
                for it in self.iterations
            ],
            "best_iteration": self.best_iteration,
            "selected_iteration": self.selected_iteration,
            "final_percentage": self.final_percentage,
            "stop_reason": self.stop_reason,
        }


def retrain(model, train_set, val_set, epochs, lr, batch_size, rng):
    """Train ``epochs`` epochs in place; return the best-validation snapshot and its accuracy."""
    best, best_acc = model.copy(), evaluate(model, val_set)
    if epochs == 0:
        return best, best_acc
    best_acc = -1.0
    for _ in range(epochs):
        train_epoch(model, train_set, lr, batch_size, rng)
        acc = evaluate(model, val_set)
        if acc > best_acc:
            best, best_acc = model.copy(), acc
    return best, best_acc


def schedule(config):
    """Cumulative prune percentages visited by the loop, strictly increasing, ending at the cap."""
    out, i = [], 0
    while True:
        p = round(config.initial_percentage + i * config.step, 12)
        if p >= config.max_percentage:
            out.append(config.max_percentage)
            return out
        out.append(p)
        i += 1


def iterative_prune(model, train_set, val_set, config=None, rng=None):
    """Prune, retrain and validate at increasing percentages until accuracy drops too far.

    Returns ``(model, history)`` where ``model`` is the last snapshot whose
    accuracy stayed within ``accuracy_drop_threshold`` of the baseline (the
    unpruned input if none did).
    """
    config = PruneConfig() if config is None else config
    config.validate()
    rng = make_rng(0) if rng is None else rng
    current = model.copy()
    if config.prunable_classes is not None:
        current.prunable = tuple(config.prunable_classes)
    baseline = evaluate(current, val_set)
    history = PruneHistory(config.strategy.kind, baseline)
    kept = current.copy()
    history.stop_reason = "reached maximum percentage"
    for p in schedule(config):
        pruned, info = apply_prune(current, config.strategy, p)
        current, acc = retrain(pruned, train_set, val_set, config.retrain_epochs,
                               config.lr, config.batch_size, rng)
        surviving = sum(int(np.count_nonzero(current.masks[c])) for c in current.prunable)
        ok = baseline - acc <= config.accuracy_drop_threshold
        history.iterations.append(PruneIteration(p, info.thresholds, acc, surviving, ok))
        log.info("pruned %.4f  accuracy %.4f  (baseline %.4f)", p, acc, baseline)
        if not ok:
            history.stop_reason = "accuracy drop exceeded threshold"
            break
        kept = current.copy()
        history.selected_iteration = len(history.iterations) - 1
    return kept, history

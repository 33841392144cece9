"""Per-sample feature extractors over a white-box target model."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gateway.target import TargetModel

log = logging.getLogger(__name__)

STAT_NAMES = ("l1", "l2", "abs_min", "l_inf", "mean", "skewness", "kurtosis")
PROBE_KINDS = ("confidence", "intermediate", "grad_w", "grad_x", "distance")

OK = "ok"
THIRD_CLASS_ERROR = "third_class_error"
OPTIMIZATION_FAILED = "optimization_failed"
ZERO_GRAD = 1e-12


@dataclass(frozen=True)
class SevenStats:
    l1: float
    l2: float
    abs_min: float
    l_inf: float
    mean: float
    skewness: float
    kurtosis: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in STAT_NAMES])


def seven_stats_matrix(rows) -> np.ndarray:
    """Row-wise seven statistics of a 2-D array, shape (n, 7)."""
    v = np.asarray(rows, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("expected a 2-D array of vectors")
    if v.shape[1] == 0:
        raise ValueError("seven_stats of an empty vector")
    a = np.abs(v)
    mean = v.mean(axis=1)
    d = v - mean[:, None]
    m2 = np.mean(d ** 2, axis=1)
    m3 = np.mean(d ** 3, axis=1)
    m4 = np.mean(d ** 4, axis=1)
    scale = a.max(axis=1)
    # spread below float resolution of the entries counts as constant
    flat = (np.ptp(v, axis=1) == 0) | (m2 <= (1e-12 * scale) ** 2)
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, m3 / safe ** 1.5)
    kurt = np.where(flat, 0.0, m4 / safe ** 2 - 3.0)
    return np.column_stack([a.sum(axis=1), np.sqrt(np.sum(v ** 2, axis=1)), a.min(axis=1),
                            a.max(axis=1), mean, skew, kurt])


def seven_stats(v) -> SevenStats:
    """L1, L2, min |v|, max |v|, mean, skewness and excess kurtosis of a vector.

    Moments are population central moments. Constant vectors get skewness and
    kurtosis 0.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("seven_stats of an empty vector")
    return SevenStats(*(float(s) for s in seven_stats_matrix(v[None])[0]))


def _is_single(model: TargetModel, x) -> bool:
    return np.shape(x) == model.input_shape


def confidence_features(model: TargetModel, x) -> np.ndarray:
    """Raw (unsorted) softmax vector(s)."""
    conf = model.predict_confidences(x)
    return conf[0] if _is_single(model, x) else conf


def intermediate_features(model: TargetModel, x, layers_back: int = -1) -> np.ndarray:
    act = model.activations(x, layers_back)
    return act[0] if _is_single(model, x) else act


def gradient_norm_matrix(model: TargetModel, x, y, wrt: str) -> np.ndarray:
    """Seven statistics of the flattened loss gradient for a batch, shape (n, 7)."""
    if wrt == "input":
        g = model.input_gradients(x, y)
    elif wrt == "params":
        g = model.param_gradients(x, y)
    else:
        raise ValueError(f"wrt must be 'input' or 'params', got {wrt!r}")
    return seven_stats_matrix(g.reshape(len(g), -1))


def gradient_norm_features(model: TargetModel, x, y, wrt: str = "params") -> SevenStats:
    if not _is_single(model, x):
        raise ValueError("gradient_norm_features takes a single sample; use gradient_norm_matrix")
    return SevenStats(*(float(s) for s in gradient_norm_matrix(model, x, [y], wrt)[0]))


# -- distance to the decision boundary ---------------------------------------


@dataclass(frozen=True)
class DistanceProbeConfig:
    max_steps: int = 1000
    step_size: float = 0.01
    confidence_threshold: float = 1e-3
    max_bisection: int = 64

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not 0 < self.confidence_threshold < 1:
            raise ValueError("confidence_threshold must be in (0, 1)")
        if self.max_bisection < 1:
            raise ValueError("max_bisection must be >= 1")


@dataclass
class DistanceResult:
    status: str
    distance: float | None
    steps_used: int
    margin: float | None = None
    message: str = ""


def _predicted(model, x):
    conf = model.predict_confidences(x)
    cls = conf.argmax(axis=1)
    return cls, conf[np.arange(len(cls)), cls], conf


def distance_batch(model: TargetModel, x, y, cfg: DistanceProbeConfig = DistanceProbeConfig()
                   ) -> list[DistanceResult]:
    """FGM walk toward the decision boundary followed by bisection, per sample.

    Each sample moves along the normalised gradient of its loss w.r.t. the
    input until the predicted class changes. The last bracket is then halved
    until the predicted-class confidences at both ends differ by at most
    ``confidence_threshold``; the distance from the start to the near end of
    the bracket is returned. Samples are processed together but never interact.
    """
    x0 = np.asarray(x, dtype=np.float64)
    if x0.shape[1:] != model.input_shape:
        raise ValueError(f"input shape {x0.shape[1:]} does not match model input {model.input_shape}")
    y = np.asarray(y, dtype=np.int64)
    n = len(x0)
    results: list[DistanceResult | None] = [None] * n
    xt = x0.copy()
    cls_t, _, _ = _predicted(model, xt) if n else (np.zeros(0, int), None, None)
    active = np.arange(n)
    for t in range(cfg.max_steps + 1):
        if not len(active):
            break
        g = model.input_gradients(xt[active], y[active])
        norms = np.sqrt(np.sum(g.reshape(len(active), -1) ** 2, axis=1))
        dead = norms < ZERO_GRAD
        for i in active[dead]:
            results[i] = DistanceResult(OPTIMIZATION_FAILED, None, t,
                                        message=f"zero input gradient at step {t}")
        keep = ~dead
        active, g, norms = active[keep], g[keep], norms[keep]
        if not len(active):
            break
        step = cfg.step_size * g / norms.reshape((-1,) + (1,) * (g.ndim - 1))
        xnext = xt[active] + step
        cls_next, _, _ = _predicted(model, xnext)
        flipped = cls_next != cls_t[active]
        if flipped.any():
            idx = active[flipped]
            for i, res in zip(idx, _bisect(model, x0[idx], xt[idx], xnext[flipped], cfg, t + 1)):
                results[i] = res
        stay = active[~flipped]
        xt[stay] = xnext[~flipped]
        active = stay
    for i in active:
        results[i] = DistanceResult(OPTIMIZATION_FAILED, None, cfg.max_steps + 1,
                                    message=f"no class change within {cfg.max_steps} steps")
    return results


def _bisect(model, x0, a, b, cfg, steps):
    """Vectorised bracket halving for samples whose class flipped between a and b."""
    a, b = a.copy(), b.copy()
    m = len(a)
    cls_a, conf_a, _ = _predicted(model, a)
    cls_b, conf_b, _ = _predicted(model, b)
    out: list[DistanceResult | None] = [None] * m
    live = np.arange(m)
    for it in range(cfg.max_bisection + 1):
        converged = np.abs(conf_b[live] - conf_a[live]) <= cfg.confidence_threshold
        if converged.any():
            done = live[converged]
            _, _, conf = _predicted(model, a[done])
            top2 = np.sort(conf, axis=1)[:, -2:]
            dist = np.sqrt(np.sum((x0[done] - a[done]).reshape(len(done), -1) ** 2, axis=1))
            for j, k in enumerate(done):
                out[k] = DistanceResult(OK, float(dist[j]), steps, float(top2[j, 1] - top2[j, 0]))
            live = live[~converged]
        if not len(live) or it == cfg.max_bisection:
            break
        mid = (a[live] + b[live]) / 2
        cls_m, conf_m, _ = _predicted(model, mid)
        to_a = cls_m == cls_a[live]
        to_b = ~to_a & (cls_m == cls_b[live])
        third = ~to_a & ~to_b
        for k in live[third]:
            out[k] = DistanceResult(THIRD_CLASS_ERROR, None, steps,
                                    message="bisection midpoint fell in a third class")
        ia, ib = live[to_a], live[to_b]
        a[ia], conf_a[ia] = mid[to_a], conf_m[to_a]
        b[ib], conf_b[ib] = mid[to_b], conf_m[to_b]
        live = live[~third]
    for k in live:
        out[k] = DistanceResult(OPTIMIZATION_FAILED, None, steps,
                                message=f"bisection did not converge in {cfg.max_bisection} halvings")
    return out


def distance_to_boundary(model: TargetModel, x, y, cfg: DistanceProbeConfig = DistanceProbeConfig()
                         ) -> DistanceResult:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return distance_batch(model, x[None], [y], cfg)[0]


# -- probe specs and extraction ----------------------------------------------


@dataclass(frozen=True)
class ProbeSpec:
    """Names one feature family and its settings."""

    kind: str = "confidence"
    layers_back: int = -1
    distance: DistanceProbeConfig = field(default_factory=DistanceProbeConfig)

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind {self.kind!r}; expected one of {PROBE_KINDS}")

    @property
    def family(self) -> str:
        return f"intermediate{self.layers_back}" if self.kind == "intermediate" else self.kind

    def settings(self) -> dict:
        if self.kind == "intermediate":
            return {"kind": self.kind, "layers_back": self.layers_back}
        if self.kind == "distance":
            return {"kind": self.kind, **asdict(self.distance)}
        return {"kind": self.kind}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.settings(), sort_keys=True).encode()).hexdigest()[:16]


def feature_columns(probe: ProbeSpec, width: int) -> list[str]:
    if probe.kind == "confidence":
        return [f"conf_{i}" for i in range(width)]
    if probe.kind == "intermediate":
        return [f"act{probe.layers_back}_{i}" for i in range(width)]
    if probe.kind in ("grad_w", "grad_x"):
        return [f"{probe.kind}_{s}" for s in STAT_NAMES]
    return ["dist_l2"]


def extract(model: TargetModel, x, y, probe: ProbeSpec):
    """Feature matrix for one probe family.

    Returns ``(features, columns, ok)``; ``ok`` is False for rows whose probe
    failed (only the distance probe can fail), and ``statuses`` holds the
    per-row status strings.
    """
    n = len(x)
    if probe.kind == "confidence":
        feats = model.predict_confidences(x)
    elif probe.kind == "intermediate":
        feats = model.activations(x, probe.layers_back)
    elif probe.kind in ("grad_w", "grad_x"):
        feats = gradient_norm_matrix(model, x, y, "params" if probe.kind == "grad_w" else "input")
    else:
        res = distance_batch(model, x, y, probe.distance)
        feats = np.array([[r.distance if r.status == OK else np.nan] for r in res]).reshape(n, 1)
        statuses = np.array([r.status for r in res])
        return feats, feature_columns(probe, 1), statuses
    return feats, feature_columns(probe, feats.shape[1]), np.full(n, OK)


class FeatureCache:
    """On-disk feature matrices keyed by (checkpoint hash, probe kind, probe config hash).

    One writer per key; files are written to a temporary name and renamed.
    """

    def __init__(self, root):
        self.root = Path(root)

    def path(self, ckpt_hash: str, probe: ProbeSpec, split: str) -> Path:
        return self.root / f"{ckpt_hash[:16]}_{probe.kind}_{probe.config_hash()}_{split}.npz"

    def load(self, ckpt_hash, probe, split):
        p = self.path(ckpt_hash, probe, split)
        if not p.exists():
            return None
        with np.load(p, allow_pickle=False) as z:
            return z["features"], [str(c) for c in z["columns"]], z["status"], z["ids"]

    def save(self, ckpt_hash, probe, split, features, columns, status, ids):
        p = self.path(ckpt_hash, probe, split)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp.npz")
        np.savez(tmp, features=features, columns=np.array(columns), status=np.asarray(status),
                 ids=np.asarray(ids))
        tmp.replace(p)
        return p

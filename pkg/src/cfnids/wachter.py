"""Wachter-style gradient-descent counterfactuals: minimize
lam * (f(x') - y')^2 + |x' - x|_1 on the encoded input, annealing lam
upward until the prediction crosses 0.5 or the budget runs out.

One-hot blocks are relaxed during descent; acceptance is always judged on
the projected (argmax) candidate so a crossing that only exists in the
relaxed space does not count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .diffusion import CounterfactualBatch

_NORM_EPS = 1e-12


@dataclass
class WachterConfig:
    initial_lam: float = 1.0
    lam_growth: float = 3.0
    max_outer: int = 25
    inner_steps: int = 40   # max_outer * inner_steps ~ the 1000-step budget
    step_size: float = 0.05
    margin: float = 0.0     # extra distance past 0.5 required to stop

    def __post_init__(self):
        if min(self.initial_lam, self.max_outer, self.inner_steps, self.step_size) < 0:
            raise ValueError("Wachter config values must be positive")
        if self.lam_growth <= 1.0:
            raise ValueError("lam growth factor must exceed 1")


def _crossed(p: float, y_target: int, margin: float) -> bool:
    return p < 0.5 - margin if y_target == 0 else p >= 0.5 + margin


def _project(x, n_num, cat_sizes):
    """Snap relaxed one-hot blocks back to hard categories."""
    out = x.copy()
    start = n_num
    for K in cat_sizes:
        block = out[start : start + K]
        hard = np.zeros(K, dtype=out.dtype)
        hard[int(np.argmax(block))] = 1.0
        out[start : start + K] = hard
        start += K
    return out


def wachter_cf(blackbox, query_num, query_cat, y_target, cfg, preprocessor, seed=0, query_id=0) -> CounterfactualBatch:
    """Single-candidate counterfactual for one query; budget exhaustion
    returns the last iterate flagged invalid."""
    t0 = time.perf_counter()
    n_num, cat_sizes = preprocessor.n_num, preprocessor.cat_sizes
    x0 = preprocessor.encode(np.asarray(query_num)[None], np.asarray(query_cat)[None])[0]
    x = x0.astype(np.float64).copy()
    lam = cfg.initial_lam
    lam_trace = []

    def projected_prob(xx):
        proj = _project(xx.astype(np.float32), n_num, cat_sizes)
        return float(blackbox.predict_proba(proj[None])[0])

    done = _crossed(projected_prob(x), y_target, cfg.margin)
    for _ in range(0 if done else cfg.max_outer):
        lam_trace.append(lam)
        for _ in range(cfg.inner_steps):
            xf = x.astype(np.float32)[None]
            p = float(nn.forward(blackbox.net, xf)[0, 0])
            if _crossed(projected_prob(x), y_target, cfg.margin):
                done = True
                break
            upstream = np.float32(2.0 * lam * (p - y_target))
            _, gin = nn.backward(blackbox.net, xf, np.full((1, 1), upstream))
            grad = gin[0].astype(np.float64) + np.sign(x - x0.astype(np.float64))
            x -= cfg.step_size * grad / (np.linalg.norm(grad) + _NORM_EPS)
        if done:
            break
        lam *= cfg.lam_growth
    assert all(b >= a for a, b in zip(lam_trace, lam_trace[1:])), "lam must not decrease"

    cand = _project(x.astype(np.float32), n_num, cat_sizes)[None]
    cand_num, cand_cat = preprocessor.decode(cand)
    prob = blackbox.predict_proba(preprocessor.encode(cand_num, cand_cat))
    valid = (prob < 0.5) if y_target == 0 else (prob >= 0.5)
    return CounterfactualBatch(
        query_id=query_id,
        query_num=np.asarray(query_num, dtype=np.float64).copy(),
        query_cat=np.asarray(query_cat, dtype=np.int32).copy(),
        cand_num=cand_num,
        cand_cat=cand_cat,
        validity=valid,
        prob=prob,
        seconds=time.perf_counter() - t0,
    )


def wachter_pool(blackbox, num, cat, y_target, cfg, preprocessor, seed=0, query_ids=None):
    ids = np.arange(len(num)) if query_ids is None else query_ids
    return [
        wachter_cf(blackbox, num[i], cat[i], y_target, cfg, preprocessor, seed, int(ids[i]))
        for i in range(len(num))
    ]

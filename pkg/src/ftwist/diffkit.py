"""Finite-difference partial derivatives of black-box smooth functions.

Every derivative in the package ultimately comes from here: tensor-product
central-difference stencils with Richardson extrapolation on step halving.
Functions are evaluated in batches; ``fn`` receives an array whose last axis
holds the coordinates and must return an array whose leading axis matches
the batch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, OrderOverflowError

EPS = float(np.finfo(float).eps)

# 1-d central stencils, second-order accurate, unit step.
_CENTRAL = {
    0: {0: 1.0},
    1: {-1: -0.5, 1: 0.5},
    2: {-1: 1.0, 0: -2.0, 1: 1.0},
    3: {-2: -0.5, -1: 1.0, 1: -1.0, 2: 0.5},
    4: {-2: 1.0, -1: -4.0, 0: 6.0, 1: -4.0, 2: 1.0},
}

# Weights on D(h), D(h/2), D(h/4) that cancel the h^2 and h^4 error terms.
_RICHARDSON = {
    0: (1.0,),
    1: (-1.0 / 3.0, 4.0 / 3.0),
    2: (1.0 / 45.0, -20.0 / 45.0, 64.0 / 45.0),
}

#: Soft cap on the number of points handed to ``fn`` in one call.
MAX_POINTS = 250_000


@dataclass(frozen=True)
class DiffConfig:
    """Step and extrapolation settings for the difference oracle.

    The step used for a derivative of total order ``k`` is
    ``base_step * EPS**(1/(k+2))``, multiplied per variable by the point
    scale (``max(1, |p_i|)`` unless the caller supplies its own).
    With ``extended`` the stencil is evaluated and combined in
    ``numpy.longdouble``; this only helps when ``fn`` preserves that dtype.
    """

    base_step: float = 10.0
    richardson_levels: int = 1
    max_order: int = 4
    extended: bool = False

    def __post_init__(self):
        if not self.base_step > 0:
            raise ValueError(f"base_step must be positive, got {self.base_step}")
        if self.richardson_levels not in (0, 1, 2):
            raise ValueError("richardson_levels must be 0, 1 or 2")
        if not 1 <= self.max_order <= 4:
            raise ValueError("max_order must lie in 1..4")

    def step(self, order: int) -> float:
        return self.base_step * EPS ** (1.0 / (order + 2))


DEFAULT = DiffConfig()


class MultiIndex(tuple):
    """Per-variable derivative orders, e.g. ``MultiIndex((1, 1))`` for d2/dadb."""

    def __new__(cls, orders):
        orders = tuple(int(k) for k in orders)
        if any(k < 0 for k in orders):
            raise ValueError(f"negative derivative order in {orders}")
        return super().__new__(cls, orders)

    @property
    def order(self) -> int:
        return sum(self)

    def check(self, cfg: DiffConfig) -> "MultiIndex":
        if self.order > cfg.max_order:
            raise OrderOverflowError(
                f"total order {self.order} exceeds max_order {cfg.max_order}")
        return self


@lru_cache(maxsize=None)
def _stencil(idx: tuple, levels: int):
    """Combined Richardson stencil: unit offsets (S, d) and weights (S,)."""
    order = sum(idx)
    acc = {}
    for m, c in enumerate(_RICHARDSON[levels]):
        scale = 2.0 ** m
        per_var = [_CENTRAL[k].items() for k in idx]
        for combo in itertools.product(*per_var):
            off = tuple(o / scale for o, _ in combo)
            w = c * scale ** order
            for _, wk in combo:
                w *= wk
            acc[off] = acc.get(off, 0.0) + w
    offs = [o for o, w in acc.items() if w != 0.0]
    return (np.array(offs, dtype=float).reshape(len(offs), len(idx)),
            np.array([acc[o] for o in offs]))


@lru_cache(maxsize=256)
def _plan(idxs: tuple, levels: int):
    """Stencil plan grouped by total order: one step size per group, shared
    offsets deduplicated. Returns ``(groups, total_offsets)``."""
    d = len(idxs[0])
    groups = {}
    for pos, idx in enumerate(idxs):
        groups.setdefault(sum(idx), []).append(pos)
    plan, cursor = [], 0
    for order, members in sorted(groups.items()):
        table, rows = {}, []
        for pos in members:
            off, w = _stencil(idxs[pos], levels)
            row = {}
            for o, wt in zip(map(tuple, off), w):
                row[table.setdefault(o, len(table))] = wt
            rows.append(row)
        unit = np.array(list(table.keys()), dtype=float).reshape(len(table), d)
        W = np.zeros((len(members), len(table)))
        for r, row in enumerate(rows):
            for j, wt in row.items():
                W[r, j] = wt
        plan.append((order, members, W, unit, slice(cursor, cursor + len(table))))
        cursor += len(table)
    return plan, cursor


def default_scale(points: np.ndarray) -> np.ndarray:
    return np.maximum(1.0, np.abs(points))


def as_real(a):
    """``a`` as a float array, keeping ``longdouble`` input intact."""
    a = np.asarray(a)
    if a.dtype == np.longdouble or a.dtype == np.float64:
        return a
    return a.astype(float)


def _evaluate(fn, pts, domain):
    if domain is not None:
        ok = np.asarray(domain(pts), dtype=bool)
        if not ok.all():
            bad = ", ".join(f"{float(c):.6g}" for c in pts[~ok][0])
            raise DomainError(f"stencil point ({bad}) outside the smooth domain")
    out = as_real(fn(pts))
    if out.shape[:1] != pts.shape[:1]:
        raise ValueError(
            f"fn returned leading shape {out.shape[:1]} for {len(pts)} points")
    if not np.isfinite(out).all():
        raise DomainError("non-finite function value inside stencil")
    return out


def derivatives(fn, points, idxs, cfg: DiffConfig = DEFAULT, scale=None,
                domain=None) -> np.ndarray:
    """Evaluate several partial derivatives of ``fn`` at a batch of points.

    Returns an array of shape ``(len(idxs), N, *out_shape)``.
    ``scale`` is an ``(N, d)`` array of per-variable step multipliers.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = points.shape
    idxs = [MultiIndex(i).check(cfg) for i in idxs]
    for i in idxs:
        if len(i) != d:
            raise ValueError(f"multi-index {tuple(i)} does not match dimension {d}")
    if scale is None:
        scale = default_scale(points)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (n, d))
    work = np.longdouble if cfg.extended else float

    plan, s = _plan(tuple(tuple(i) for i in idxs), cfg.richardson_levels)
    blocks, offsets = [], []
    for order, members, W, unit, sl in plan:
        h = work(cfg.step(order)) * scale.astype(work)  # (n, d)
        offsets.append(unit[None, :, :] * h[:, None, :])
        blocks.append((order, members, W, h, sl))
    offsets = np.concatenate(offsets, axis=1)  # (n, S, d)

    chunk = max(1, MAX_POINTS // s)
    vals = []
    for start in range(0, n, chunk):
        pts = (points[start:start + chunk, None, :].astype(work)
               + offsets[start:start + chunk]).reshape(-1, d)
        v = _evaluate(fn, pts, domain)
        vals.append(v.reshape((-1, s) + v.shape[1:]))
    vals = np.concatenate(vals, axis=0)  # (n, S, *out)
    out_shape = vals.shape[2:]

    result = np.empty((len(idxs), n) + out_shape)
    for order, members, W, h, sl in blocks:
        block = np.tensordot(W.astype(vals.dtype), np.moveaxis(vals[:, sl], 1, 0),
                             axes=(1, 0))
        for r, pos in enumerate(members):
            denom = np.prod(h ** np.array(idxs[pos], dtype=h.dtype), axis=1)
            result[pos] = block[r] / denom.reshape((n,) + (1,) * len(out_shape))
    return result


@lru_cache(maxsize=256)
def _tensor_plan(spec: tuple, d: int):
    keys, lookup, plans = [], {}, []
    for slots in spec:
        plan = []
        for combo in itertools.product(*[range(len(s)) for s in slots]):
            orders = [0] * d
            for slot, c in zip(slots, combo):
                orders[slot[c]] += 1
            key = tuple(orders)
            if key not in lookup:
                lookup[key] = len(keys)
                keys.append(key)
            plan.append((combo, lookup[key]))
        plans.append((tuple(len(s) for s in slots), plan))
    return tuple(keys), plans


def derivative_tensors(fn, points, slot_specs, cfg: DiffConfig = DEFAULT,
                       scale=None, domain=None) -> list:
    """Several :func:`derivative_tensor` results from a single evaluation pass."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    spec = tuple(tuple(tuple(int(i) for i in s) for s in slots) for slots in slot_specs)
    keys, plans = _tensor_plan(spec, points.shape[1])
    raw = derivatives(fn, points, keys, cfg, scale, domain)
    n = points.shape[0]
    out_shape = raw.shape[2:]
    results = []
    for sizes, plan in plans:
        res = np.empty((n,) + out_shape + sizes)
        for combo, k in plan:
            res[(Ellipsis,) + combo] = raw[k]
        results.append(res)
    return results


def derivative_tensor(fn, points, slots, cfg: DiffConfig = DEFAULT, scale=None,
                      domain=None) -> np.ndarray:
    """All mixed partials with one derivative slot per entry of ``slots``.

    ``slots`` is a sequence of variable-index lists; e.g. ``[ys, ys, xs]``
    gives d^3 fn / dy dy dx. Output shape ``(N, *out_shape, *slot_sizes)``;
    equal slot combinations share one stencil so the result is exactly
    symmetric in slots drawn from the same variable list.
    """
    return derivative_tensors(fn, points, [slots], cfg, scale, domain)[0]


# --- single-point conveniences ------------------------------------------------

def _as_point(point):
    p = np.atleast_1d(np.asarray(point, dtype=float))
    return p.reshape(1, -1)


def partial(fn, point, idx, cfg: DiffConfig = DEFAULT, domain=None):
    """One partial derivative of ``fn`` at ``point``.

    >>> partial(lambda p: p[..., 0] ** 3, 2.0, (2,))  # doctest: +ELLIPSIS
    12.0...
    """
    val = derivatives(fn, _as_point(point), [idx], cfg, domain=domain)[0, 0]
    return val[()] if np.ndim(val) == 0 else val


def gradient(fn, point, cfg: DiffConfig = DEFAULT, domain=None):
    p = _as_point(point)
    d = p.shape[1]
    return derivative_tensor(fn, p, [range(d)], cfg, domain=domain)[0]


def hessian(fn, point, cfg: DiffConfig = DEFAULT, domain=None):
    p = _as_point(point)
    d = p.shape[1]
    return derivative_tensor(fn, p, [range(d)] * 2, cfg, domain=domain)[0]


def third(fn, point, cfg: DiffConfig = DEFAULT, domain=None):
    p = _as_point(point)
    d = p.shape[1]
    return derivative_tensor(fn, p, [range(d)] * 3, cfg, domain=domain)[0]

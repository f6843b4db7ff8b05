"""Closed-form block formulas for twisted products F = sqrt(F1^2 + f^2 F2^2).

Product coordinates are ``(x, u)`` on the base and ``(y, v)`` on the fiber; a
batch point is ``z = (x, u, y, v)`` of length ``2(n1 + n2)``. Latin indices run
over the first factor, Greek over the second. Component quantities (metric,
Cartan tensor, spray, ...) come from :mod:`ftwist.core` applied to each factor
separately; the formulas here assemble them with the twist and its partials.
The oracle for every assembly is :mod:`ftwist.core` applied to the product.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from . import core, diffkit
from .core import MetricEvaluator, OracleConfig, ORACLE
from .errors import ConstructionError, DomainError

GREEK = "αβγλμνρσ"
LATIN = "ijklhrst"


# --- data types -------------------------------------------------------------------

@dataclass(frozen=True)
class TwistFunction:
    """Positive twist ``f(x, u)`` with analytic partials.

    All three callables are vectorized over leading axes: ``f`` returns
    ``(...)``, ``grad_x`` ``(..., n1)`` and ``grad_u`` ``(..., n2)``.
    """

    f: Callable
    grad_x: Callable
    grad_u: Callable
    name: str = ""

    def validate(self, box1, box2, per_axis=3, rtol=1e-7):
        """Check positivity on a grid of the box and the analytic partials
        against difference quotients; raises :class:`ConstructionError`."""
        box1, box2 = np.asarray(box1, float), np.asarray(box2, float)
        n1 = len(box1)
        box = np.concatenate([box1, box2])
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(box))
        x, u = pts[:, :n1], pts[:, n1:]
        vals = self.f(x, u)
        if not np.all(vals > 0):
            raise ConstructionError(f"twist {self.name}: f must be positive on the chart box "
                                    f"(min {vals.min():.3g})")
        fn = lambda p: self.f(p[..., :n1], p[..., n1:])
        (num,) = diffkit.derivative_tensors(fn, pts, [[list(range(len(box)))]],
                                            diffkit.DiffConfig(base_step=20.0,
                                                               richardson_levels=2))
        ana = np.concatenate([self.grad_x(x, u), self.grad_u(x, u)], axis=-1)
        err = np.abs(num - ana) / np.maximum(1.0, np.abs(ana))
        if err.max() > rtol:
            raise ConstructionError(f"twist {self.name}: analytic partials disagree with "
                                    f"difference quotients (rel. err {err.max():.3g})")
        return self


@dataclass(frozen=True)
class TwistedProduct:
    """Factors ``M1``, ``M2`` and twist ``f``; ``box`` bounds the base chart.

    ``matsumoto_n`` overrides the dimension used in the ``1/(n+1)`` factors
    (default: total dimension ``n1 + n2``).
    """

    M1: MetricEvaluator
    M2: MetricEvaluator
    f: TwistFunction
    box: Optional[np.ndarray] = None
    matsumoto_n: Optional[int] = None
    name: str = ""

    @property
    def n1(self):
        return self.M1.dim

    @property
    def n2(self):
        return self.M2.dim

    @property
    def n(self):
        return self.n1 + self.n2

    @property
    def n_factor(self):
        return self.n if self.matsumoto_n is None else self.matsumoto_n

    def split(self, z):
        """``(x, u, y, v)`` views of a batch of product points."""
        z = np.asarray(z, dtype=float)
        n1, n = self.n1, self.n
        return z[..., :n1], z[..., n1:n], z[..., n:n + n1], z[..., n + n1:]

    def chart_box(self):
        if self.box is not None:
            return np.asarray(self.box, dtype=float)
        return np.array([[-1.0, 1.0]] * self.n)

    def samples(self, count, seed=42):
        return core.sample_tangents(self.chart_box(), [self.n1, self.n2], count,
                                    seed=seed, contains=product_metric(self).contains)


class BlockTensor:
    """Dense tensor over the product index range with a block accessor.

    ``positions`` marks each slot as upper (``"u"``) or lower (``"l"``);
    ``block("122")`` returns the slice with the first slot in the first
    factor's range and the others in the second's.
    """

    def __init__(self, entries, n1, n2, name="", positions=None):
        self.entries = np.array(entries, dtype=float)
        self.n1, self.n2 = n1, n2
        self.name = name
        # explicit positions fix the rank; a batch of n points is otherwise ambiguous
        self.rank = len(positions) if positions else self._rank()
        self.positions = positions or "l" * self.rank
        n = n1 + n2
        if self.entries.ndim < self.rank or any(
                s != n for s in self.entries.shape[self.entries.ndim - self.rank:]):
            raise ValueError(f"entries of shape {self.entries.shape} do not carry "
                             f"{self.rank} slots of size {n}")
        self.entries.setflags(write=False)

    def _rank(self):
        n = self.n1 + self.n2
        r = 0
        for size in reversed(self.entries.shape):
            if size != n:
                break
            r += 1
        return r

    @property
    def batched(self):
        return self.entries.ndim > self.rank

    def _slice(self, tag):
        if tag == "1":
            return slice(0, self.n1)
        if tag == "2":
            return slice(self.n1, self.n1 + self.n2)
        raise ValueError(f"block tag must be '1' or '2', got {tag!r}")

    def block(self, pattern: str) -> np.ndarray:
        if len(pattern) != self.rank:
            raise ValueError(f"pattern {pattern!r} does not match rank {self.rank}")
        return self.entries[(Ellipsis,) + tuple(self._slice(t) for t in pattern)]

    def patterns(self):
        return ["".join(p) for p in itertools.product("12", repeat=self.rank)]

    def label(self, pattern: str) -> str:
        """Index label such as ``B^k_iβl`` for a block pattern."""
        counters = {"1": iter(LATIN), "2": iter(GREEK)}
        letters = [next(counters[t]) for t in pattern]
        up = "".join(l for l, p in zip(letters, self.positions) if p == "u")
        low = "".join(l for l, p in zip(letters, self.positions) if p == "l")
        out = self.name
        if up:
            out += "^" + up
        if low:
            out += "_" + low
        return out

    def blocks(self):
        for p in self.patterns():
            yield p, self.label(p), self.block(p)

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __repr__(self):
        return f"BlockTensor({self.name!r}, n1={self.n1}, n2={self.n2}, shape={self.entries.shape})"


# --- product metric -------------------------------------------------------------

def product_metric(T: TwistedProduct) -> MetricEvaluator:
    """The assembled metric sqrt(F1^2 + f^2 F2^2) as a plain evaluator."""
    n1, n2, n = T.n1, T.n2, T.n

    def F(X, Y):
        x, u = X[..., :n1], X[..., n1:]
        y, v = Y[..., :n1], Y[..., n1:]
        return np.sqrt(T.M1.F(x, y) ** 2 + T.f.f(x, u) ** 2 * T.M2.F(u, v) ** 2)

    def domain(X, Y):
        x, u = X[..., :n1], X[..., n1:]
        y, v = Y[..., :n1], Y[..., n1:]
        ok = (np.linalg.norm(y, axis=-1) > 0) & (np.linalg.norm(v, axis=-1) > 0)
        if T.M1.domain is not None:
            ok &= np.asarray(T.M1.domain(x, y), dtype=bool)
        if T.M2.domain is not None:
            ok &= np.asarray(T.M2.domain(u, v), dtype=bool)
        return ok

    def fiber_scale(Y):
        y, v = Y[..., :n1], Y[..., n1:]
        sy = np.broadcast_to(np.linalg.norm(y, axis=-1)[..., None], y.shape)
        sv = np.broadcast_to(np.linalg.norm(v, axis=-1)[..., None], v.shape)
        return np.concatenate([sy, sv], axis=-1)

    return MetricEvaluator(n, F, domain, fiber_scale, name=T.name or "product")


# --- component and product quantities ------------------------------------------

class ComponentJet:
    """Lazily evaluated component quantities of one factor on a batch.

    Layouts follow the formulas: ``Cup[k, h, i]`` is C^{kh}_i,
    ``Cup_d1[k, h, i, j]`` is C^{kh}_{i;j}, ``Iup_d2[h, i, j]`` is I^h_{;i;j}.
    """

    def __init__(self, M: MetricEvaluator, zc, cfg: OracleConfig = ORACLE):
        self.M = M
        self.z = np.atleast_2d(np.asarray(zc, dtype=float))
        self.cfg = cfg
        self.x, self.y = M.split(self.z)

    @cached_property
    def F2(self):
        return self.M.F2(self.z)

    @cached_property
    def g(self):
        return core.fundamental_tensor(self.M, self.z, self.cfg)

    @cached_property
    def ginv(self):
        return core.spd_inverse(self.g)

    @cached_property
    def ylow(self):
        return np.einsum("...ij,...j->...i", self.g, self.y)

    @cached_property
    def C(self):
        return core.cartan_tensor(self.M, self.z, self.cfg)

    @cached_property
    def Cmix(self):
        """C^k_ij."""
        return np.einsum("...kh,...hij->...kij", self.ginv, self.C)

    @cached_property
    def Cup(self):
        """C^{kh}_i."""
        return np.einsum("...ka,...hb,...abi->...khi", self.ginv, self.ginv, self.C)

    @cached_property
    def I(self):
        return np.einsum("...jk,...ijk->...i", self.ginv, self.C)

    @cached_property
    def Iup(self):
        return np.einsum("...hk,...k->...h", self.ginv, self.I)

    @cached_property
    def _ginv_derivs(self):
        M, cfg = self.M, self.cfg
        field = lambda zz: core.inverse_metric(M, zz, cfg)
        return diffkit.derivative_tensors(field, self.z, [[M.ys] * 2, [M.ys] * 3], cfg.nest,
                                          scale=M.scale(self.z), domain=M.contains)

    @cached_property
    def Cup_d1(self):
        """C^{kh}_{i;j} = -1/2 d2 g^{kh} / dy^i dy^j."""
        return -0.5 * self._ginv_derivs[0]

    @cached_property
    def Cup_d2(self):
        """C^{kh}_{i;j;l} = -1/2 d3 g^{kh} / dy^i dy^j dy^l."""
        return -0.5 * self._ginv_derivs[1]

    @cached_property
    def Iup_d1(self):
        return np.einsum("...khki->...hi", self.Cup_d1)

    @cached_property
    def Iup_d2(self):
        return np.einsum("...khkij->...hij", self.Cup_d2)

    @cached_property
    def G(self):
        return core.spray(self.M, self.z, self.cfg)

    @cached_property
    def _spray_derivs(self):
        return core.spray_fiber_derivatives(self.M, self.z, (1, 2, 3), self.cfg)

    @cached_property
    def N(self):
        return core.nonlinear_connection(self.M, self.z, self.cfg)

    @cached_property
    def Gyy(self):
        return self._spray_derivs[1]

    @cached_property
    def B(self):
        return self._spray_derivs[2]

    @cached_property
    def E(self):
        return core.mean_berwald_from(self.B)

    @cached_property
    def hor(self):
        return core.horizontal_coefficients(self.M, self.z, self.cfg)


class TwistedJet:
    """All closed-form product quantities at a batch of points, computed lazily.

    Every attribute holding a full product tensor uses the combined index
    range ``0..n1+n2`` with layout ``[upper, lower...]``.
    """

    def __init__(self, T: TwistedProduct, z, cfg: OracleConfig = ORACLE):
        self.T = T
        self.z = np.atleast_2d(np.asarray(z, dtype=float))
        self.cfg = cfg
        x, u, y, v = T.split(self.z)
        self.x, self.u, self.y, self.v = x, u, y, v
        self.c1 = ComponentJet(T.M1, np.concatenate([x, y], -1), cfg)
        self.c2 = ComponentJet(T.M2, np.concatenate([u, v], -1), cfg)
        self.fv = T.f.f(x, u)
        self.fx = T.f.grad_x(x, u)
        self.fu = T.f.grad_u(x, u)
        self.N_ = len(self.z)

    # shorthand
    @property
    def s1(self):
        return slice(0, self.T.n1)

    @property
    def s2(self):
        return slice(self.T.n1, self.T.n)

    def _zeros(self, rank):
        return np.zeros((self.N_,) + (self.T.n,) * rank)

    @cached_property
    def fup1(self):
        """f^i = g^{ih} f_h."""
        return np.einsum("...ih,...h->...i", self.c1.ginv, self.fx)

    @cached_property
    def fup2(self):
        """f^α = g^{αγ} f_γ."""
        return np.einsum("...ag,...g->...a", self.c2.ginv, self.fu)

    @cached_property
    def F2(self):
        return self.c1.F2 + self.fv ** 2 * self.c2.F2

    @cached_property
    def fy(self):
        """f_j y^j."""
        return np.einsum("...j,...j->...", self.fx, self.y)

    @cached_property
    def fvv(self):
        """f_γ v^γ."""
        return np.einsum("...g,...g->...", self.fu, self.v)

    # metric -------------------------------------------------------------------
    @cached_property
    def g(self):
        g = self._zeros(2)
        g[:, self.s1, self.s1] = self.c1.g
        g[:, self.s2, self.s2] = self.fv[:, None, None] ** 2 * self.c2.g
        return g

    # spray --------------------------------------------------------------------
    @cached_property
    def spray(self):
        f, c1, c2 = self.fv, self.c1, self.c2
        Gi = c1.G - 0.5 * (f * c2.F2)[:, None] * self.fup1
        Ga = c2.G + (1.0 / f)[:, None] * (
            self.fy[:, None] * self.v + self.fvv[:, None] * self.v
            - 0.5 * c2.F2[:, None] * self.fup2)
        return np.concatenate([Gi, Ga], axis=-1)

    # nonlinear connection: N[a, b] = G^a_b -------------------------------------
    @cached_property
    def N(self):
        f, c1, c2 = self.fv, self.c1, self.c2
        n2 = self.T.n2
        N = self._zeros(2)
        N[:, self.s1, self.s1] = c1.N + np.einsum("...ihj,...h->...ij", c1.Cup, self.fx) \
            * (f * c2.F2)[:, None, None]
        N[:, self.s1, self.s2] = -f[:, None, None] * np.einsum("...i,...b->...ib",
                                                             self.fup1, c2.ylow)
        N[:, self.s2, self.s1] = (1.0 / f)[:, None, None] * np.einsum("...j,...a->...aj",
                                                                    self.fx, self.v)
        eye = np.eye(n2)
        N[:, self.s2, self.s2] = c2.N + (1.0 / f)[:, None, None] * (
            np.einsum("...agb,...g->...ab", c2.Cup, self.fu) * c2.F2[:, None, None]
            + (self.fy + self.fvv)[:, None, None] * eye
            - np.einsum("...a,...b->...ab", self.fup2, c2.ylow)
            + np.einsum("...b,...a->...ab", self.fu, self.v))
        return N

    # vertical coefficients: V[c, a, b] = G^c_ab --------------------------------
    @cached_property
    def vertical(self):
        f, c1, c2 = self.fv, self.c1, self.c2
        n1, n2 = self.T.n1, self.T.n2
        s1, s2 = self.s1, self.s2
        fF2 = (f * c2.F2)
        V = self._zeros(3)
        V[:, s1, s1, s1] = c1.Gyy + np.einsum("...khij,...h->...kij", c1.Cup_d1, self.fx) \
            * fF2[:, None, None, None]
        kib = 2.0 * f[:, None, None, None] * np.einsum(
            "...khi,...h,...b->...kib", c1.Cup, self.fx, c2.ylow)
        V[:, s1, s1, s2] = kib
        V[:, s1, s2, s1] = np.swapaxes(kib, -1, -2)
        V[:, s1, s2, s2] = -f[:, None, None, None] * np.einsum("...k,...ab->...kab",
                                                             self.fup1, c2.g)
        gib = (1.0 / f)[:, None, None, None] * np.einsum("...i,gb->...gib", self.fx, np.eye(n2))
        V[:, s2, s1, s2] = gib
        V[:, s2, s2, s1] = np.swapaxes(gib, -1, -2)
        eye = np.eye(n2)
        t = (np.einsum("...glab,...l->...gab", c2.Cup_d1, self.fu) * c2.F2[:, None, None, None]
             + 2.0 * np.einsum("...gla,...l,...b->...gab", c2.Cup, self.fu, c2.ylow)
             + 2.0 * np.einsum("...glb,...l,...a->...gab", c2.Cup, self.fu, c2.ylow)
             - np.einsum("...g,...ab->...gab", self.fup2, c2.g)
             + np.einsum("...b,ga->...gab", self.fu, eye)
             + np.einsum("...a,gb->...gab", self.fu, eye))
        V[:, s2, s2, s2] = c2.Gyy + (1.0 / f)[:, None, None, None] * t
        return 0.5 * (V + np.swapaxes(V, -1, -2))

    # horizontal coefficients: H[c, a, b] = F^c_ab ------------------------------
    @cached_property
    def M1r(self):
        """M^r_i = C^{rh}_i f f_h F2^2, layout [r, i]."""
        return np.einsum("...rhi,...h->...ri", self.c1.Cup, self.fx) \
            * (self.fv * self.c2.F2)[:, None, None]

    @cached_property
    def M2m(self):
        """M^μ_α = G^μ_α - G2^μ_α, layout [μ, α]."""
        return self.N[:, self.s2, self.s2] - self.c2.N

    @cached_property
    def Ngab(self):
        """N^γ_αβ, layout [γ, α, β]."""
        f, c2 = self.fv, self.c2
        eye = np.eye(self.T.n2)
        return (1.0 / f)[:, None, None, None] * (
            np.einsum("...b,ga->...gab", self.fu, eye)
            + np.einsum("...a,gb->...gab", self.fu, eye)
            - np.einsum("...g,...ab->...gab", self.fup2, c2.g))

    @cached_property
    def horizontal(self):
        f, c1, c2 = self.fv, self.c1, self.c2
        s1, s2 = self.s1, self.s2
        N = self.N
        H = self._zeros(3)
        M1 = self.M1r
        H[:, s1, s1, s1] = c1.hor - (
            np.einsum("...rj,...kir->...kij", M1, c1.Cmix)
            + np.einsum("...ri,...kjr->...kij", M1, c1.Cmix)
            - np.einsum("...rh,...ijr,...kh->...kij", M1, c1.C, c1.ginv))
        Gib = N[:, s1, s2]  # G^r_β
        kib = -np.einsum("...rb,...kir->...kib", Gib, c1.Cmix)
        H[:, s1, s1, s2] = kib
        H[:, s1, s2, s1] = np.swapaxes(kib, -1, -2)
        Gai = N[:, s2, s1]  # G^λ_h
        H[:, s1, s2, s2] = (-f[:, None, None, None] * np.einsum("...k,...ab->...kab",
                                                             self.fup1, c2.g)
                            + (f ** 2)[:, None, None, None] * np.einsum(
                                "...kh,...lh,...abl->...kab", c1.ginv, Gai, c2.C))
        H[:, s2, s1, s1] = (f ** -2)[:, None, None, None] * np.einsum(
            "...gl,...rl,...ijr->...gij", c2.ginv, Gib, c1.C)
        gib = ((1.0 / f)[:, None, None, None] * np.einsum("...i,gb->...gib", self.fx,
                                                         np.eye(self.T.n2))
               - np.einsum("...ai,...gab->...gib", Gai, c2.Cmix))
        H[:, s2, s1, s2] = gib
        H[:, s2, s2, s1] = np.swapaxes(gib, -1, -2)
        M2 = self.M2m
        H[:, s2, s2, s2] = c2.hor + self.Ngab - (
            np.einsum("...mb,...gam->...gab", M2, c2.Cmix)
            + np.einsum("...ma,...gbm->...gab", M2, c2.Cmix)
            - np.einsum("...ml,...abm,...gl->...gab", M2, c2.C, c2.ginv))
        return H

    # Cartan --------------------------------------------------------------------
    @cached_property
    def cartan_lower(self):
        C = self._zeros(3)
        C[:, self.s1, self.s1, self.s1] = self.c1.C
        C[:, self.s2, self.s2, self.s2] = self.fv[:, None, None, None] ** 2 * self.c2.C
        return C

    @cached_property
    def cartan_mixed(self):
        C = self._zeros(3)
        C[:, self.s1, self.s1, self.s1] = self.c1.Cmix
        C[:, self.s2, self.s2, self.s2] = self.c2.Cmix
        return C

    # Matsumoto contraction -------------------------------------------------------
    @cached_property
    def matsumoto_rhs(self):
        """(y^j y^k M_αjk, v^λ v^β M_iβλ) from the closed form."""
        n = self.T.n_factor
        coef = -(self.fv ** 2 * self.c1.F2 * self.c2.F2) / ((n + 1) * self.F2)
        return coef[:, None] * self.c2.I, coef[:, None] * self.c1.I

    # Berwald ------------------------------------------------------------------
    @cached_property
    def berwald(self):
        f, c1, c2 = self.fv, self.c1, self.c2
        n1, n2 = self.T.n1, self.T.n2
        f4 = f[:, None, None, None, None]
        fx, fu = self.fx, self.fu
        blocks = {}
        blocks[("1", "111")] = c1.B + f4 * np.einsum(
            "...khlji,...h->...kijl", c1.Cup_d2, fx) * c2.F2[:, None, None, None, None]
        blocks[("1", "112")] = 2.0 * f4 * np.einsum(
            "...khil,...h,...b->...kilb", c1.Cup_d1, fx, c2.ylow)
        blocks[("1", "122")] = 2.0 * f4 * np.einsum(
            "...ab,...khl,...h->...klab", c2.g, c1.Cup, fx)
        blocks[("1", "222")] = -2.0 * f4 * np.einsum("...abl,...k->...kabl", c2.C, self.fup1)
        F22 = c2.F2[:, None, None, None, None]
        inv = (1.0 / f)[:, None, None, None, None]
        gv = c2.ylow
        t = (np.einsum("...gnlab,...n->...gabl", c2.Cup_d2, fu) * F22
             + 2.0 * np.einsum("...gnab,...n,...l->...gabl", c2.Cup_d1, fu, gv)
             + 2.0 * np.einsum("...gnal,...n,...b->...gabl", c2.Cup_d1, fu, gv)
             + 2.0 * np.einsum("...gna,...n,...lb->...gabl", c2.Cup, fu, c2.g)
             + 2.0 * np.einsum("...gnlb,...n,...a->...gabl", c2.Cup_d1, fu, gv)
             + 2.0 * np.einsum("...gnb,...n,...la->...gabl", c2.Cup, fu, c2.g)
             + 2.0 * np.einsum("...gnl,...n,...ab->...gabl", c2.Cup, fu, c2.g)
             - 2.0 * np.einsum("...abl,...g->...gabl", c2.C, self.fup2))
        blocks[("2", "222")] = c2.B + inv * t
        return _assemble_symmetric(blocks, self.N_, n1, n2, 3)

    @cached_property
    def mean_berwald(self):
        """Blocks of E; the second-factor block uses f^{-1} on the I_{;α;β}
        term, the value obtained by tracing the Berwald blocks."""
        f, c1, c2 = self.fv, self.c1, self.c2
        s1, s2 = self.s1, self.s2
        E = self._zeros(2)
        f3 = f[:, None, None]
        E[:, s1, s1] = c1.E + 0.5 * f3 * np.einsum("...hji,...h->...ij", c1.Iup_d2, self.fx) \
            * c2.F2[:, None, None]
        ib = f3 * np.einsum("...hi,...h,...b->...ib", c1.Iup_d1, self.fx, c2.ylow)
        E[:, s1, s2] = ib
        E[:, s2, s1] = np.swapaxes(ib, -1, -2)
        E[:, s2, s2] = c2.E + self._E22_extra(0.5 / f3)
        return E

    def _E22_extra(self, coef_dd):
        f, c1, c2 = self.fv, self.c1, self.c2
        f3 = f[:, None, None]
        fu, gv = self.fu, c2.ylow
        Ihfh = np.einsum("...h,...h->...", c1.Iup, self.fx)
        inner = (np.einsum("...gnab,...g->...nab", c2.Cup_d1, gv)
                 + np.einsum("...na,...b->...nab", c2.Iup_d1, gv)
                 + np.einsum("...nb,...a->...nab", c2.Iup_d1, gv)
                 + c2.Cmix
                 + np.einsum("...n,...ab->...nab", c2.Iup, c2.g))
        return (f3 * c2.g * Ihfh[:, None, None]
                + coef_dd * np.einsum("...nab,...n->...ab", c2.Iup_d2, fu) * c2.F2[:, None, None]
                + (1.0 / f3) * np.einsum("...n,...nab->...ab", fu, inner))

    @cached_property
    def mean_berwald_alt(self):
        """Second-factor block with the coefficient ``f/2`` on the I_{;α;β} term."""
        f3 = self.fv[:, None, None]
        return self.c2.E + self._E22_extra(0.5 * f3)

    @cached_property
    def connection22_block(self):
        return self.N[:, self.s2, self.s2]

    # dually flat ----------------------------------------------------------------
    @cached_property
    def im1(self):
        """Right minus left side of the first-factor dually-flat equation."""
        r1 = core.ldf_residual(self.T.M1, self.c1.z, self.cfg)
        return -r1 + 4.0 * (self.fv * self.c2.F2)[:, None] * self.fx

    @cached_property
    def im2(self):
        """Left minus right side of the second-factor dually-flat equation."""
        f, c2 = self.fv, self.c2
        j = core.jet(self.T.M2, c2.z, self.cfg)
        huv = np.einsum("...ba,...a->...b", j["hxy"], self.v)
        lhs = (4.0 * self.fy[:, None] * c2.ylow + f[:, None] * huv
               + 4.0 * self.fvv[:, None] * c2.ylow)
        rhs = 2.0 * f[:, None] * j["gx"] + 4.0 * self.fu * c2.F2[:, None]
        return lhs - rhs


def _assemble_symmetric(blocks, N, n1, n2, lower):
    """Full tensor from canonical blocks ``(upper_tag, sorted lower tags)``;
    every lower-slot permutation is filled and repeated patterns averaged."""
    n = n1 + n2
    out = np.zeros((N,) + (n,) * (lower + 1))
    sl = {"1": slice(0, n1), "2": slice(n1, n)}
    acc = {}
    for (up, pat), arr in blocks.items():
        for perm in itertools.permutations(range(lower)):
            new_pat = "".join(pat[p] for p in perm)
            moved = np.transpose(arr, (0, 1) + tuple(2 + p for p in perm))
            acc.setdefault((up, new_pat), []).append(moved)
    for (up, pat), arrs in acc.items():
        out[(slice(None), sl[up]) + tuple(sl[t] for t in pat)] = sum(arrs) / len(arrs)
    return out


def jet(T: TwistedProduct, s, cfg: OracleConfig = ORACLE) -> TwistedJet:
    """Closed-form quantities of ``T`` at a sample or a batch of points."""
    z, _ = core._batch(s)
    return TwistedJet(T, z, cfg)


def _wrap(T, s, arr, name, positions):
    z, single = core._batch(s)
    return BlockTensor(arr[0] if single else arr, T.n1, T.n2, name, positions)


# --- public operations -------------------------------------------------------------

def block_metric(T, s, cfg=ORACLE):
    return _wrap(T, s, jet(T, s, cfg).g, "g", "ll")


def twisted_spray(T, s, cfg=ORACLE):
    return _wrap(T, s, jet(T, s, cfg).spray, "G", "u")


def connection_blocks(T, s, cfg=ORACLE):
    return _wrap(T, s, jet(T, s, cfg).N, "G", "ul")


def vertical_coeffs(T, s, cfg=ORACLE):
    return _wrap(T, s, jet(T, s, cfg).vertical, "G", "ull")


def horizontal_coeffs(T, s, cfg=ORACLE):
    return _wrap(T, s, jet(T, s, cfg).horizontal, "F", "ull")


def cartan_blocks(T, s, cfg=ORACLE, lowered=False):
    j = jet(T, s, cfg)
    if lowered:
        return _wrap(T, s, j.cartan_lower, "C", "lll")
    return _wrap(T, s, j.cartan_mixed, "C", "ull")


def berwald_blocks(T, s, cfg=ORACLE):
    return _wrap(T, s, jet(T, s, cfg).berwald, "B", "ulll")


def mean_berwald_blocks(T, s, cfg=ORACLE):
    return _wrap(T, s, jet(T, s, cfg).mean_berwald, "E", "ll")


def matsumoto_contraction(T, s, cfg=ORACLE):
    """Both contractions of the product's Matsumoto tensor.

    Returns ``{"alpha": (lhs, rhs), "i": (lhs, rhs)}`` where ``alpha`` is
    y^j y^k M_αjk and ``i`` is v^λ v^β M_iβλ; lhs comes from the Matsumoto
    tensor of the assembled metric, rhs from the component mean Cartan tensors.
    """
    z, single = core._batch(s)
    P = product_metric(T)
    Mt = core.matsumoto_torsion(P, z, cfg, n=T.n_factor)
    _, _, y, v = T.split(z)
    s1, s2 = slice(0, T.n1), slice(T.n1, T.n)
    lhs_a = np.einsum("...ajk,...j,...k->...a", Mt[:, s2, s1, s1], y, y)
    lhs_i = np.einsum("...ibl,...b,...l->...i", Mt[:, s1, s2, s2], v, v)
    rhs_a, rhs_i = jet(T, z, cfg).matsumoto_rhs
    pick = (lambda a: a[0]) if single else (lambda a: a)
    return {"alpha": (pick(lhs_a), pick(rhs_a)), "i": (pick(lhs_i), pick(rhs_i))}


def adapted_frame(T, s, cfg=ORACLE):
    """Vertical projector, horizontal projector and almost tangent structure
    as ``2n x 2n`` matrices in the coordinate basis (d/dx^a, d/dy^a)."""
    z, single = core._batch(s)
    N = jet(T, z, cfg).N
    n = T.n
    B = len(z)
    eye = np.broadcast_to(np.eye(n), (B, n, n))
    vt = np.zeros((B, 2 * n, 2 * n))
    vt[:, n:, :n] = N
    vt[:, n:, n:] = eye
    ht = np.eye(2 * n) - vt
    Jt = np.zeros((B, 2 * n, 2 * n))
    Jt[:, n:, :n] = eye
    if single:
        return vt[0], ht[0], Jt[0]
    return vt, ht, Jt


def horizontal_basis(T, s, cfg=ORACLE):
    """Columns are the adapted horizontal fields d/dx^a - G^b_a d/dy^b."""
    z, single = core._batch(s)
    N = jet(T, z, cfg).N
    n = T.n
    out = np.zeros((len(z), 2 * n, n))
    out[:, :n, :] = np.eye(n)
    out[:, n:, :] = -N
    return out[0] if single else out


def _fields(T, cfg):
    N_field = lambda zz: TwistedJet(T, zz, cfg).N
    F_field = lambda zz: TwistedJet(T, zz, cfg).horizontal
    return N_field, F_field


def nonlinear_curvature(T, s, cfg=ORACLE):
    """R^c_ab = δG^c_a/δx^b - δG^c_b/δx^a from the closed-form connection."""
    z, _ = core._batch(s)
    P = product_metric(T)
    N_field, _ = _fields(T, cfg)
    R = core.nonlinear_curvature_of(N_field, z, T.n, cfg.delta, P.scale(z), P.contains)
    return _wrap(T, s, R, "R", "ull")


def berwald_connection_curvature(T, s, cfg=ORACLE):
    """R_b^a_cd from the closed-form horizontal coefficients, layout
    ``[a, b, c, d]``. Two nested difference layers: expect ~1e-6 accuracy."""
    z, _ = core._batch(s)
    P = product_metric(T)
    N_field, F_field = _fields(T, cfg)
    R = core.connection_curvature_of(F_field, N_field, z, T.n, cfg.delta, P.scale(z),
                                     P.contains)
    return _wrap(T, s, R, "R", "ulll")


def warped_curvature_term(T, s, cfg=ORACLE):
    """‖grad f‖² (δ^γ_λ g_αβ - δ^γ_β g_αλ) on the second-factor block,
    layout ``[γ, α, β, λ]``, using the first factor's metric for the norm."""
    j = jet(T, s, cfg)
    grad2 = np.einsum("...i,...i->...", j.fx, j.fup1)
    g = j.c2.g
    eye = np.eye(T.n2)
    term = (np.einsum("gl,...ab->...gabl", eye, g) - np.einsum("gb,...al->...gabl", eye, g))
    z, single = core._batch(s)
    out = grad2[:, None, None, None, None] * term
    return (out[0], grad2[0]) if single else (out, grad2)

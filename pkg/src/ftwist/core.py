"""General Finsler engine: every quantity is computed from a black-box ``F``.

All batched routines take ``z`` of shape ``(N, 2n)`` holding ``(x, y)`` side by
side and return arrays with a leading batch axis. Tensor index order follows
the upper-then-lower convention of the formulas: ``G[..., i, j]`` is
``G^i_j``, ``B[..., i, j, k, l]`` is ``B^i_jkl``.
Public operations accept either a :class:`TangentSample` (single result) or
such a ``z`` array (batched result).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc
from scipy.special import ndtri

from . import diffkit
from .diffkit import DiffConfig
from .errors import DegeneracyError, DegenerateFlagError, DomainError

log = logging.getLogger(__name__)

Y_MIN = 0.1
COND_WARN = 1e8


@dataclass(frozen=True)
class OracleConfig:
    """Difference settings.

    ``jet`` serves first and second derivatives of F and F^2, ``jet3`` third
    derivatives of F^2 and ``nest`` derivatives of fields that are themselves
    built from differences (spray, inverse metric). ``delta`` is used for
    horizontal derivatives of connection-level fields. Jets are evaluated in
    extended precision and with large steps so that their rounding noise
    survives up to three further differentiations. ``leaf`` serves values that
    are never differentiated again (the angular metric) and uses small steps.
    """

    jet: DiffConfig = DiffConfig(base_step=1000.0, richardson_levels=2, extended=True)
    jet3: DiffConfig = DiffConfig(base_step=150.0, richardson_levels=2, extended=True)
    nest: DiffConfig = DiffConfig(base_step=100.0, richardson_levels=2)
    delta: DiffConfig = DiffConfig(base_step=20000.0, richardson_levels=2)
    leaf: DiffConfig = DiffConfig(base_step=10.0, richardson_levels=2, extended=True)


ORACLE = OracleConfig()

#: Geodesics only need the spray; a double-precision jet is accurate enough.
GEODESIC = OracleConfig(jet=DiffConfig(base_step=100.0, richardson_levels=2))


@dataclass(frozen=True)
class MetricEvaluator:
    """A Finsler metric given by a vectorized ``F(x, y)``.

    ``F`` receives arrays of shape ``(..., dim)`` and returns ``(...)``.
    ``domain(x, y)`` declares where ``F`` is smooth; ``y = 0`` is always
    excluded. ``fiber_scale(y)`` returns per-variable step multipliers for
    fiber derivatives; by default ``|y|`` for every variable.
    """

    dim: int
    F: Callable
    domain: Optional[Callable] = None
    fiber_scale: Optional[Callable] = None
    name: str = ""

    def split(self, z):
        z = diffkit.as_real(z)
        return z[..., :self.dim], z[..., self.dim:]

    def F2(self, z):
        x, y = self.split(z)
        return self.F(x, y) ** 2

    def value(self, x, y):
        return self.F(diffkit.as_real(x), diffkit.as_real(y))

    def contains(self, z):
        x, y = self.split(z)
        ok = np.linalg.norm(y, axis=-1) > 0
        if self.domain is not None:
            ok &= np.asarray(self.domain(x, y), dtype=bool)
        return ok

    def scale(self, z):
        x, y = self.split(z)
        if self.fiber_scale is not None:
            ys = np.broadcast_to(self.fiber_scale(y), y.shape)
        else:
            ys = np.broadcast_to(np.linalg.norm(y, axis=-1)[..., None], y.shape)
        return np.concatenate([np.maximum(1.0, np.abs(x)), ys], axis=-1)

    @property
    def xs(self):
        return list(range(self.dim))

    @property
    def ys(self):
        return list(range(self.dim, 2 * self.dim))


@dataclass(frozen=True)
class TangentSample:
    x: np.ndarray
    y: np.ndarray
    y_min: float = Y_MIN

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).ravel())
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have the same dimension")
        if np.linalg.norm(self.y) < self.y_min:
            raise DomainError(f"|y| = {np.linalg.norm(self.y):.3g} below y_min {self.y_min}")

    @property
    def z(self):
        return np.concatenate([self.x, self.y])[None, :]


@dataclass(frozen=True)
class FlagPlane:
    y: np.ndarray
    u: np.ndarray


def _batch(s):
    if isinstance(s, TangentSample):
        return s.z, True
    z = np.atleast_2d(np.asarray(s, dtype=float))
    return z, False


def _out(arr, single):
    return arr[0] if single else arr


# --- linear algebra -------------------------------------------------------------

def spd_inverse(g, what="fundamental tensor"):
    """Inverse of a batch of symmetric positive-definite matrices.

    Raises :class:`DegeneracyError` with the smallest eigenvalue when some
    matrix is not positive definite; logs a warning above ``COND_WARN``.
    """
    g = 0.5 * (g + np.swapaxes(g, -1, -2))
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        lam = np.linalg.eigvalsh(g).min()
        raise DegeneracyError(f"{what} is not positive definite (min eigenvalue {lam:.3g})",
                              min_eigenvalue=float(lam)) from None
    eye = np.broadcast_to(np.eye(g.shape[-1]), g.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    lam = np.linalg.eigvalsh(g)
    cond = lam[..., -1] / lam[..., 0]
    if np.any(cond > COND_WARN):
        log.warning("%s ill conditioned (condition number %.3g)", what, cond.max())
    return inv


# --- jets of F^2 ----------------------------------------------------------------

def jet(M: MetricEvaluator, z, cfg: OracleConfig = ORACLE):
    """First and second partials of F^2 in one pass.

    Keys: ``F2``, ``gy`` (dF2/dy), ``gx`` (dF2/dx), ``hyy`` (d2F2/dydy) and
    ``hxy`` with ``hxy[..., l, k] = d2F2/dy^l dx^k``.
    """
    z = np.atleast_2d(z)
    xs, ys = M.xs, M.ys
    gy, gx, hyy, hxy = diffkit.derivative_tensors(
        M.F2, z, [[ys], [xs], [ys, ys], [ys, xs]], cfg.jet,
        scale=M.scale(z), domain=M.contains)
    return {"F2": M.F2(z), "gy": gy, "gx": gx, "hyy": hyy, "hxy": hxy}


def _metric_from_hessian(hyy):
    g = 0.5 * hyy
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def _spray_from_jet(j, y):
    g = _metric_from_hessian(j["hyy"])
    ginv = spd_inverse(g)
    rhs = np.einsum("...lk,...k->...l", j["hxy"], y) - j["gx"]
    return 0.25 * np.einsum("...il,...l->...i", ginv, rhs)


def fundamental_tensor(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """g_ij = 1/2 d2F^2/dy^i dy^j, checked positive definite."""
    z, single = _batch(s)
    (hyy,) = diffkit.derivative_tensors(M.F2, z, [[M.ys, M.ys]], cfg.jet,
                                        scale=M.scale(z), domain=M.contains)
    g = _metric_from_hessian(hyy)
    spd_inverse(g)
    return _out(g, single)


def inverse_metric(M, s, cfg: OracleConfig = ORACLE):
    z, single = _batch(s)
    return _out(spd_inverse(fundamental_tensor(M, z, cfg)), single)


def cartan_tensor(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """C_ijk = 1/4 d3F^2/dy^i dy^j dy^k (fully symmetric)."""
    z, single = _batch(s)
    (t,) = diffkit.derivative_tensors(M.F2, z, [[M.ys] * 3], cfg.jet3,
                                      scale=M.scale(z), domain=M.contains)
    return _out(0.25 * t, single)


def mean_cartan(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE, with_norm=False):
    """I_i = g^jk C_ijk; with ``with_norm`` also returns C^2 = I^i I_i."""
    z, single = _batch(s)
    ginv = inverse_metric(M, z, cfg)
    I = np.einsum("...jk,...ijk->...i", ginv, cartan_tensor(M, z, cfg))
    if not with_norm:
        return _out(I, single)
    c2 = np.einsum("...i,...ij,...j->...", I, ginv, I)
    return _out(I, single), _out(c2, single)


def angular_metric(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """h_ij = F d2F/dy^i dy^j."""
    z, single = _batch(s)
    x, y = M.split(z)
    Fz = lambda zz: M.F(*M.split(zz))
    (hF,) = diffkit.derivative_tensors(Fz, z, [[M.ys, M.ys]], cfg.leaf,
                                       scale=M.scale(z), domain=M.contains)
    h = M.F(x, y)[:, None, None] * hF
    return _out(0.5 * (h + np.swapaxes(h, -1, -2)), single)


def matsumoto_torsion(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE, n=None):
    """M_ijk = C_ijk - (I_i h_jk + I_j h_ik + I_k h_ij)/(n+1)."""
    z, single = _batch(s)
    n = M.dim if n is None else n
    C = cartan_tensor(M, z, cfg)
    I = mean_cartan(M, z, cfg)
    h = angular_metric(M, z, cfg)
    sym = (np.einsum("...i,...jk->...ijk", I, h) + np.einsum("...j,...ik->...ijk", I, h)
           + np.einsum("...k,...ij->...ijk", I, h))
    return _out(C - sym / (n + 1), single)


# --- spray and its fiber derivatives -----------------------------------------

def spray(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """G^i = 1/4 g^il [d2F^2/dx^k dy^l y^k - dF^2/dx^l]."""
    z, single = _batch(s)
    _, y = M.split(z)
    return _out(_spray_from_jet(jet(M, z, cfg), y), single)


def _spray_field(M, cfg):
    return lambda zz: spray(M, zz, cfg)


def spray_fiber_derivatives(M: MetricEvaluator, s, orders=(1, 2, 3),
                            cfg: OracleConfig = ORACLE):
    """Fiber derivatives of G: order 1 is G^i_j, 2 is G^i_jk, 3 is B^i_jkl."""
    z, single = _batch(s)
    specs = [[M.ys] * k for k in orders]
    res = diffkit.derivative_tensors(_spray_field(M, cfg), z, specs, cfg.nest,
                                     scale=M.scale(z), domain=M.contains)
    return [_out(r, single) for r in res]


def nonlinear_connection(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """G^i_j = dG^i/dy^j."""
    return spray_fiber_derivatives(M, s, (1,), cfg)[0]


def berwald_curvature(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """B^i_jkl = d3G^i/dy^j dy^k dy^l (third fiber derivative: ~1e-5 accuracy)."""
    return spray_fiber_derivatives(M, s, (3,), cfg)[0]


def mean_berwald_from(B):
    """E_jk = 1/2 B^m_jkm."""
    return 0.5 * np.einsum("...mjkm->...jk", B)


def mean_berwald(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    return mean_berwald_from(berwald_curvature(M, s, cfg))


def riemann_curvature(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """R^i_k = 2 dG^i/dx^k - y^j d2G^i/dx^j dy^k + 2 G^j d2G^i/dy^j dy^k
    - dG^i/dy^j dG^j/dy^k."""
    z, single = _batch(s)
    _, y = M.split(z)
    xs, ys = M.xs, M.ys
    Gx, Gxy, Gy, Gyy = diffkit.derivative_tensors(
        _spray_field(M, cfg), z, [[xs], [xs, ys], [ys], [ys, ys]], cfg.nest,
        scale=M.scale(z), domain=M.contains)
    G = spray(M, z, cfg)
    R = (2.0 * Gx
         - np.einsum("...j,...ijk->...ik", y, Gxy)
         + 2.0 * np.einsum("...j,...ijk->...ik", G, Gyy)
         - np.einsum("...ij,...jk->...ik", Gy, Gy))
    return _out(R, single)


def flag_curvature(M: MetricEvaluator, s: TangentSample, P: FlagPlane,
                   cfg: OracleConfig = ORACLE):
    """K(P, y) = g_y(u, R_y u) / (g_y(y,y) g_y(u,u) - g_y(y,u)^2).

    The numerator is evaluated with the symmetrized fundamental tensor.
    """
    y = np.asarray(P.y, dtype=float)
    u = np.asarray(P.u, dtype=float)
    if not np.allclose(y, s.y):
        raise ValueError("flagpole must equal the sample's tangent vector")
    g = fundamental_tensor(M, s, cfg)
    area = (y @ g @ y) * (u @ g @ u) - (y @ g @ u) ** 2
    if area <= 1e-12 * (y @ g @ y) * (u @ g @ u):
        raise DegenerateFlagError("flag plane is degenerate")
    R = riemann_curvature(M, s, cfg)
    return float(u @ g @ (R @ u) / area)


def ldf_residual(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """(F^2)_{x^k y^l} y^k - 2 (F^2)_{x^l}; zero iff dually flat in this chart."""
    z, single = _batch(s)
    _, y = M.split(z)
    j = jet(M, z, cfg)
    r = np.einsum("...lk,...k->...l", j["hxy"], y) - 2.0 * j["gx"]
    return _out(r, single)


# --- horizontal structure -----------------------------------------------------

def horizontal_coefficients(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """F^c_ab = 1/2 g^ce (dg_ea/dx^b + dg_eb/dx^a - dg_ab/dx^e) with the
    horizontal derivative d/dx^b - G^d_b d/dy^d. Layout ``[..., c, a, b]``."""
    z, single = _batch(s)
    xs, ys = M.xs, M.ys
    gyyx, gyyy, hyy = diffkit.derivative_tensors(
        M.F2, z, [[ys, ys, xs], [ys, ys, ys], [ys, ys]], cfg.jet3,
        scale=M.scale(z), domain=M.contains)
    g = _metric_from_hessian(hyy)
    ginv = spd_inverse(g)
    N = nonlinear_connection(M, z, cfg)
    # dg_ea/dx^b - N^d_b dg_ea/dy^d, stored [e, a, b]
    dg = 0.5 * gyyx - 0.5 * np.einsum("...db,...ead->...eab", N, gyyy)
    low = dg + np.swapaxes(dg, -1, -2) - np.einsum("...abe->...eab", dg)
    return _out(0.5 * np.einsum("...ce,...eab->...cab", ginv, low), single)


def _delta(field, z, N, dim, cfg, scale, domain):
    """Horizontal derivative of ``field`` at ``z``: ``[..., *idx, b]``."""
    (jac,) = diffkit.derivative_tensors(field, z, [[list(range(2 * dim))]], cfg,
                                        scale=scale, domain=domain)
    flat = jac.reshape(len(z), -1, 2 * dim)
    out = flat[..., :dim] - np.einsum("npd,ndb->npb", flat[..., dim:], N)
    return out.reshape(jac.shape[:-1] + (dim,))


def nonlinear_curvature_of(N_field, z, dim, cfg: DiffConfig, scale=None, domain=None):
    """R^c_ab = delta G^c_a/delta x^b - delta G^c_b/delta x^a for a connection field."""
    N = N_field(z)
    dN = _delta(N_field, z, N, dim, cfg, scale, domain)  # [c, a, b]
    return dN - np.swapaxes(dN, -1, -2)


def connection_curvature_of(F_field, N_field, z, dim, cfg: DiffConfig, scale=None,
                            domain=None):
    """R_b^a_cd from horizontal coefficients, layout ``[..., a, b, c, d]``.

    R_b^a_cd = dF^a_bc/dx^d - dF^a_bd/dx^c + F^a_de F^e_bc - F^a_ce F^e_bd
    with horizontal derivatives along ``N_field``.
    """
    N = N_field(z)
    Fv = F_field(z)
    dF = _delta(F_field, z, N, dim, cfg, scale, domain)  # [a, b, c, d]
    quad = np.einsum("...ade,...ebc->...abcd", Fv, Fv)
    return dF - np.swapaxes(dF, -1, -2) + quad - np.swapaxes(quad, -1, -2)


def nonlinear_curvature(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    z, single = _batch(s)
    field = lambda zz: nonlinear_connection(M, zz, cfg)
    return _out(nonlinear_curvature_of(field, z, M.dim, cfg.delta, M.scale(z),
                                       M.contains), single)


def connection_curvature(M: MetricEvaluator, s, cfg: OracleConfig = ORACLE):
    """R_b^a_cd of the Berwald connection from oracle fields, layout ``[a, b, c, d]``."""
    z, single = _batch(s)
    F_field = lambda zz: horizontal_coefficients(M, zz, cfg)
    N_field = lambda zz: nonlinear_connection(M, zz, cfg)
    return _out(connection_curvature_of(F_field, N_field, z, M.dim, cfg.delta, M.scale(z),
                                        M.contains), single)


# --- geodesics -----------------------------------------------------------------

@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    F: np.ndarray
    truncated: bool = False
    reason: str = ""

    @property
    def drift(self) -> float:
        return float(np.max(np.abs(self.F - self.F[0]))) if len(self.F) else 0.0


def geodesic(M: MetricEvaluator, x0, y0, t_end: float, dt: float,
             cfg: OracleConfig = GEODESIC) -> Trajectory:
    """RK4 integration of x'' + 2 G(x, x') = 0.

    Leaving the domain stops the integration; the partial trajectory is
    returned with ``truncated`` set and the exit reason recorded.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x0, dtype=float).ravel()
    v = np.asarray(y0, dtype=float).ravel()
    n = M.dim
    z0 = np.concatenate([x, v])[None]
    if not M.contains(z0)[0]:
        raise DomainError("initial point outside the metric domain")

    def accel(x, v):
        return -2.0 * spray(M, np.concatenate([x, v])[None], cfg)[0]

    steps = int(round(t_end / dt))
    ts, xs, vs = [0.0], [x.copy()], [v.copy()]
    truncated, reason = False, ""
    for k in range(steps):
        try:
            k1x, k1v = v, accel(x, v)
            k2x, k2v = v + 0.5 * dt * k1v, accel(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
            k3x, k3v = v + 0.5 * dt * k2v, accel(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
            k4x, k4v = v + dt * k3v, accel(x + dt * k3x, v + dt * k3v)
        except DomainError as exc:
            truncated, reason = True, str(exc)
            break
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not M.contains(np.concatenate([x, v])[None])[0]:
            truncated, reason = True, f"left domain at t={(k + 1) * dt:.6g}"
            break
        ts.append((k + 1) * dt)
        xs.append(x.copy())
        vs.append(v.copy())
    xs, vs = np.array(xs), np.array(vs)
    return Trajectory(np.array(ts), xs, vs, M.value(xs, vs), truncated, reason)


# --- sampling -------------------------------------------------------------------

def sample_tangents(box, blocks, count: int, seed: int = 42, radii=(0.5, 2.0),
                    y_min: float = Y_MIN, contains=None, max_tries: int = 20):
    """Quasi-random tangent samples ``z = (x, y)``.

    ``box`` is a ``(d, 2)`` array of coordinate bounds, ``blocks`` the fiber
    block sizes (one direction and radius per block, so every block of ``y``
    is nonzero). Samples rejected by ``contains`` are replaced by further
    Sobol points.
    """
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    if sum(blocks) != d:
        raise ValueError("fiber blocks must add up to the base dimension")
    dims = d + d + len(blocks)
    sob = qmc.Sobol(dims, scramble=True, seed=seed)
    m = max(3, int(np.ceil(np.log2(count))))
    out = []
    for _ in range(max_tries):
        # doubling chunks keep the drawn total a power of two
        u = sob.random_base2(m)
        m = int(np.log2(sob.num_generated))
        x = box[:, 0] + u[:, :d] * (box[:, 1] - box[:, 0])
        dirs = ndtri(np.clip(u[:, d:2 * d], 1e-12, 1 - 1e-12))
        rad = radii[0] + u[:, 2 * d:] * (radii[1] - radii[0])
        y = np.empty_like(x)
        start = 0
        for b, nb in enumerate(blocks):
            seg = dirs[:, start:start + nb]
            nrm = np.linalg.norm(seg, axis=1, keepdims=True)
            y[:, start:start + nb] = seg / np.maximum(nrm, 1e-300) * rad[:, b:b + 1]
            start += nb
        z = np.concatenate([x, y], axis=1)
        ok = np.linalg.norm(y, axis=1) >= y_min
        if contains is not None:
            ok &= contains(z)
        out.extend(z[ok])
        if len(out) >= count:
            break
    if len(out) < count:
        raise DomainError(f"only {len(out)} of {count} samples satisfy the domain")
    return np.array(out[:count])

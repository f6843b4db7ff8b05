"""Sampled predicates for twisted products.

Every predicate returns a :class:`ClassificationReport`. A verdict of
``holds`` means the defining residual stays below tolerance on every sample
of the battery; it certifies the battery, not the manifold. ``details``
carries the separate conditions of the corresponding characterization and
whether both sides of it agree on the battery (``iff_consistent``) or whether
the conclusion of an implication is witnessed (``theorem_witnessed``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core, twisted
from .core import COND_WARN, ORACLE, OracleConfig

SECOND = 1e-5
THIRD = 1e-4
FIT_APPLICABLE = 1e-3
FIT_ZERO = 1e-6
FIT_FLOOR = 1e-6
C2_SKIP = 1e-10
#: p is resolved only to the precision of the fit itself; C - I I I/C^2 and
#: A - I I I/C^2 can both be small, which amplifies noise in their ratio.
P_ZERO = 1e-3


@dataclass
class ClassificationReport:
    predicate: str
    residuals: list
    max_residual: float
    verdict: str
    tolerance: float
    seed: int = None
    details: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {"predicate": self.predicate, "verdict": self.verdict,
                "max_residual": self.max_residual, "tolerance": self.tolerance,
                "seed": self.seed, "residuals": self.residuals,
                "details": self.details, "warnings": self.warnings}


def _max(a):
    a = np.abs(np.asarray(a, dtype=float))
    return float(a.max(initial=0.0))


def _per_sample(a):
    a = np.abs(np.asarray(a, dtype=float))
    return a.reshape(len(a), -1).max(axis=1)


def _conditioning(j):
    lam = np.linalg.eigvalsh(j.g)
    cond = lam[:, -1] / lam[:, 0]
    if np.any(cond > COND_WARN):
        return [f"product metric ill conditioned (condition number {cond.max():.3g})"]
    return []


def _report(name, residuals, tol, seed, details, warnings):
    residuals = [float(r) for r in residuals]
    mx = max(residuals, default=0.0)
    if warnings:
        verdict = "inconclusive"
    else:
        verdict = "holds" if mx < tol else "fails"
    return ClassificationReport(name, residuals, mx, verdict, tol, seed, details, warnings)


def _setup(T, samples, seed, cfg):
    z = T.samples(32, seed) if samples is None else np.atleast_2d(samples)
    return z, twisted.TwistedJet(T, z, cfg)


def _lowered(j):
    """Product y_a, F, h_ab and h^d_a."""
    Y = np.concatenate([j.y, j.v], -1)
    Ylow = np.einsum("nab,nb->na", j.g, Y)
    F2 = j.F2
    h = j.g - np.einsum("na,nb->nab", Ylow, Ylow) / F2[:, None, None]
    ginv = np.linalg.inv(j.g)
    hup = np.einsum("nde,nea->nda", ginv, h)
    return Y, Ylow, np.sqrt(F2), h, ginv, hup


def _fit(target, basis):
    """Least-squares scalar c with target ~ c * basis, per sample."""
    t = target.reshape(len(target), -1)
    b = basis.reshape(len(basis), -1)
    bb = np.einsum("np,np->n", b, b)
    c = np.where(bb > 0, np.einsum("np,np->n", t, b) / np.where(bb > 0, bb, 1.0), 0.0)
    res = np.linalg.norm(t - c[:, None] * b, axis=1)
    scale = np.linalg.norm(t, axis=1)
    rel = np.where(scale > FIT_FLOOR, res / np.where(scale > FIT_FLOOR, scale, 1.0), 0.0)
    return c, rel


# --- Riemannian ---------------------------------------------------------------

def is_riemannian(T, samples=None, tol=SECOND, seed=42, cfg: OracleConfig = ORACLE):
    """Product Cartan tensor vanishes; compared with both component tensors."""
    z, j = _setup(T, samples, seed, cfg)
    P = twisted.product_metric(T)
    C = core.cartan_tensor(P, z, cfg)
    res = _per_sample(C)
    c1, c2 = _max(j.c1.C), _max(j.c2.C)
    product = bool(res.max() < tol)
    components = bool(c1 < tol and c2 < tol)
    details = {"component1_cartan": c1, "component2_cartan": c2,
               "components_riemannian": components, "iff_consistent": product == components}
    return _report("riemannian", res, tol, seed, details, _conditioning(j))


# --- Cartan-type forms ----------------------------------------------------------

def c_reducibility_test(T, samples=None, tol=SECOND, seed=42,
                        cfg: OracleConfig = ORACLE):
    """Residual is |M| of the product Matsumoto tensor; ``holds`` means C-reducible.

    The theorem is witnessed when every sample with M ~ 0 has vanishing mean
    Cartan tensors of both factors and the contraction identities hold.
    """
    z, j = _setup(T, samples, seed, cfg)
    P = twisted.product_metric(T)
    Mt = core.matsumoto_torsion(P, z, cfg, n=T.n_factor)
    res = _per_sample(Mt)
    mc = twisted.matsumoto_contraction(T, z, cfg)
    contr = max(_max(mc["alpha"][0] - mc["alpha"][1]), _max(mc["i"][0] - mc["i"][1]))
    I1, I2 = _per_sample(j.c1.I), _per_sample(j.c2.I)
    flat_M = res < tol
    witnessed = bool(np.all(~flat_M | ((I1 < tol) & (I2 < tol))) and contr < tol)
    details = {"matsumoto_min": float(res.min()), "matsumoto_nonzero_everywhere":
               bool(np.all(~flat_M)), "contraction_residual": contr,
               "riemannian_where_vanishing": bool(np.all(~flat_M | ((I1 < tol) & (I2 < tol)))),
               "theorem_witnessed": witnessed}
    return _report("c_reducible", res, tol, seed, details, _conditioning(j))


def semi_c_reducible_test(T, samples=None, tol=FIT_APPLICABLE, seed=42,
                          cfg: OracleConfig = ORACLE):
    """Constrained fit C = p A + q I I I / C^2 with p + q = 1 per sample.

    Residual is the relative fit residual (0 at skipped samples, where C^2 is
    below 1e-10). Wherever the ansatz applies the fitted p should vanish.
    """
    z, j = _setup(T, samples, seed, cfg)
    _, _, _, h, ginv, _ = _lowered(j)
    C = j.cartan_lower
    I = np.einsum("nbc,nabc->na", ginv, C)
    C2 = np.einsum("na,nab,nb->n", I, ginv, I)
    n = T.n_factor
    A = (np.einsum("na,nbc->nabc", I, h) + np.einsum("nb,nac->nabc", I, h)
         + np.einsum("nc,nab->nabc", I, h)) / (n + 1)
    skip = C2 < C2_SKIP
    safe = np.where(skip, 1.0, C2)
    Bt = np.einsum("na,nb,nc->nabc", I, I, I) / safe[:, None, None, None]
    p, _ = _fit(C - Bt, A - Bt)
    p = np.where(skip, 0.0, p)
    cnorm = np.linalg.norm(C.reshape(len(z), -1), axis=1)
    res_abs = np.linalg.norm((C - Bt - p[:, None, None, None] * (A - Bt)).reshape(len(z), -1),
                             axis=1)
    rel = np.where(skip, 0.0, res_abs / np.where(cnorm > 0, cnorm, 1.0))
    applicable = ~skip & (rel < tol)
    warnings = _conditioning(j)
    if skip.all():
        warnings.append("C^2 below threshold at every sample; fit skipped")
    details = {"p": [float(v) for v in p], "q": [float(1 - v) for v in p],
               "skipped": int(skip.sum()), "applicable": int(applicable.sum()),
               "max_abs_p_applicable": float(np.abs(p[applicable]).max(initial=0.0)),
               "c2_like_where_applicable": bool(np.all(np.abs(p[applicable]) < P_ZERO)),
               "theorem_witnessed": bool(np.all(np.abs(p[applicable]) < P_ZERO))}
    return _report("semi_c_reducible", rel, tol, seed, details, warnings)


# --- Berwald-type ---------------------------------------------------------------

def _block_max(arr, n1, n2, rank, name):
    bt = twisted.BlockTensor(arr, n1, n2, name, positions="u" + "l" * (rank - 1))
    return {bt.label(p): _max(bt.block(p)) for p in bt.patterns()}


def berwald_test(T, samples=None, tol=THIRD, seed=42, cfg: OracleConfig = ORACLE):
    """Product Berwald curvature vanishes; conditions of both theorem branches."""
    z, j = _setup(T, samples, seed, cfg)
    B = j.berwald
    res = _per_sample(B)
    blocks = _block_max(B, T.n1, T.n2, 4, "B")
    failing = sorted(k for k, v in blocks.items() if v >= tol)
    fx = _max(j.fx)
    m1_berwald = _max(j.c1.B)
    cf = _max(np.einsum("nkhl,nh->nkl", j.c1.Cup, j.fx))
    product = bool(res.max() < tol)
    if fx >= SECOND:
        branch = "f nonconstant on M1"
        m2_riem = _max(j.c2.C)
        conditions = {"m1_berwald": m1_berwald, "m2_riemannian": m2_riem,
                      "cartan_f_contraction": cf}
        side = m1_berwald < tol and m2_riem < SECOND and cf < SECOND
    else:
        branch = "f constant on M1"
        eq = _max(B[:, T.n1:, T.n1:, T.n1:, T.n1:])
        conditions = {"m1_berwald": m1_berwald, "m2_block_equation": eq}
        side = m1_berwald < tol and eq < tol
    details = {"branch": branch, "conditions": conditions, "conditions_hold": bool(side),
               "failing_blocks": failing, "iff_consistent": product == bool(side)}
    return _report("berwald", res, tol, seed, details, _conditioning(j))


def isotropic_berwald_test(T, samples=None, tol=FIT_APPLICABLE, seed=42,
                           cfg: OracleConfig = ORACLE):
    """Fit B^d_abc = c F^-1 (h^d_a h_bc + h^d_b h_ac + h^d_c h_ab + 2 C_abc y^d).

    Residual is the relative fit residual. ``c_block`` is the fit of ``c``
    from the oracle's B^γ_jkl block alone, which vanishes identically.
    """
    z, j = _setup(T, samples, seed, cfg)
    Y, _, F, h, _, hup = _lowered(j)
    S = (np.einsum("nda,nbc->ndabc", hup, h) + np.einsum("ndb,nac->ndabc", hup, h)
         + np.einsum("ndc,nab->ndabc", hup, h)
         + 2.0 * np.einsum("nabc,nd->ndabc", j.cartan_lower, Y)) / F[:, None, None, None, None]
    c, rel = _fit(j.berwald, S)
    P = twisted.product_metric(T)
    Bv = core.berwald_curvature(P, z, cfg)
    n1 = T.n1
    c_block, _ = _fit(Bv[:, n1:, :n1, :n1, :n1], S[:, n1:, :n1, :n1, :n1])
    applicable = rel < tol
    details = {"c": [float(v) for v in c], "c_block": [float(v) for v in c_block],
               "max_abs_c_block": _max(c_block),
               "applicable": int(applicable.sum()),
               "max_abs_c_applicable": float(np.abs(c[applicable]).max(initial=0.0)),
               "theorem_witnessed": bool(np.all(np.abs(c[applicable]) < FIT_ZERO)
                                         and _max(c_block) < FIT_ZERO)}
    return _report("isotropic_berwald", rel, tol, seed, details, _conditioning(j))


def weakly_berwald_test(T, samples=None, tol=THIRD, seed=42, cfg: OracleConfig = ORACLE):
    """Product mean Berwald curvature vanishes; characterization conditions.

    The second-factor equation is checked with coefficient f^-1/2 on the
    I_{;α;β} term, which tracing the Berwald blocks gives, and with the
    alternative f/2.
    """
    z, j = _setup(T, samples, seed, cfg)
    E = j.mean_berwald
    res = _per_sample(E)
    s2 = slice(T.n1, T.n)
    Ihfh = np.einsum("nh,nh->n", j.c1.Iup, j.fx)
    extra_g = j.fv[:, None, None] * j.c2.g * Ihfh[:, None, None]
    mean4 = _max(E[:, s2, s2] - extra_g)
    mean4_alt = _max(j.mean_berwald_alt - extra_g)
    m1_wb = _max(j.c1.E)
    m2_wb = _max(j.c2.E)
    ihfh = _max(Ihfh)
    side = m1_wb < tol and ihfh < SECOND and mean4 < tol
    product = bool(res.max() < tol)
    details = {"conditions": {"m1_weakly_berwald": m1_wb, "mean_cartan_f": ihfh,
                              "second_factor_equation": mean4,
                              "second_factor_equation_alt": mean4_alt},
               "conditions_hold": bool(side), "iff_consistent": product == bool(side),
               "blocks": {"E_ij": _max(E[:, :T.n1, :T.n1]), "E_iβ": _max(E[:, :T.n1, s2]),
                          "E_αβ": _max(E[:, s2, s2])}}
    if _max(j.fu) < 1e-10:
        cor = m1_wb < tol and m2_wb < tol and ihfh < SECOND
        details["twist_on_first_factor"] = {
            "m2_weakly_berwald": m2_wb, "conditions_hold": bool(cor),
            "iff_consistent": product == bool(cor)}
    _, _, F, h, _, _ = _lowered(j)
    n = T.n_factor
    c, rel = _fit(E, 0.5 * (n + 1) * h / F[:, None, None])
    applicable = rel < FIT_APPLICABLE
    details["isotropic_mean_fit"] = {
        "c": [float(v) for v in c], "applicable": int(applicable.sum()),
        "max_abs_c_applicable": float(np.abs(c[applicable]).max(initial=0.0)),
        "theorem_witnessed": bool(np.all(np.abs(c[applicable]) < FIT_ZERO))}
    return _report("weakly_berwald", res, tol, seed, details, _conditioning(j))


# --- dually flat ----------------------------------------------------------------

def ldf_test(T, samples=None, tol=SECOND, seed=42, cfg: OracleConfig = ORACLE):
    """Residuals of both dually-flat equations of the factors.

    ``im1_exactness`` compares the product oracle's first-factor residual with
    the first factor's own residual minus 4 f f_l F2^2.
    """
    z, j = _setup(T, samples, seed, cfg)
    im1, im2 = j.im1, j.im2
    res = np.maximum(_per_sample(im1), _per_sample(im2))
    P = twisted.product_metric(T)
    rp = core.ldf_residual(P, z, cfg)
    n1 = T.n1
    r1 = core.ldf_residual(T.M1, j.c1.z, cfg)
    r2 = core.ldf_residual(T.M2, j.c2.z, cfg)
    term = 4.0 * (j.fv * j.c2.F2)[:, None] * j.fx
    exact = _max(rp[:, :n1] - (r1 - term))
    consistency = max(_max(rp[:, :n1] + im1), _max(rp[:, n1:] - j.fv[:, None] * im2))
    im6_a = _max(j.fx)
    im6_b = _max(j.fvv[:, None] * j.c2.ylow - j.fu * j.c2.F2[:, None])
    comps = _max(r1) < tol and _max(r2) < tol
    product = bool(res.max() < tol)
    f_nonconst = _max(j.fx) >= tol or _max(j.fu) >= tol
    details = {"im1": _max(im1), "im2": _max(im2), "im1_twist_term": _max(term),
               "im1_exactness": exact, "product_consistency": consistency,
               "components_ldf": bool(comps),
               "im6": {"f_x": im6_a, "f_u_condition": im6_b},
               "f_nonconstant": bool(f_nonconst)}
    if comps:
        details["iff_consistent"] = product == bool(im6_a < tol and im6_b < tol)
    details["proper_ldf_excluded"] = bool(not f_nonconst or not product)
    return _report("locally_dually_flat", res, tol, seed, details, _conditioning(j))


PREDICATES = {
    "riemannian": is_riemannian,
    "c_reducible": c_reducibility_test,
    "semi_c_reducible": semi_c_reducible_test,
    "berwald": berwald_test,
    "isotropic_berwald": isotropic_berwald_test,
    "weakly_berwald": weakly_berwald_test,
    "locally_dually_flat": ldf_test,
}


def classify_all(T, samples=None, seed=42, tol=None, cfg: OracleConfig = ORACLE):
    """Every predicate on one sample set; ``tol`` overrides each default."""
    z = T.samples(32, seed) if samples is None else samples
    out = []
    for fn in PREDICATES.values():
        kw = {} if tol is None else {"tol": tol}
        out.append(fn(T, z, seed=seed, cfg=cfg, **kw))
    return out

"""Curated component metrics and twist functions.

Specs are plain data (JSON friendly). Coordinate-dependent entries are
expression strings in ``x1, x2, ...`` compiled to numpy through sympy, e.g.
``{"kind": "riemannian-matrix", "dim": 2, "matrix": [["1", "0"], ["0", "x1**2"]]}``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import sympy

from . import core
from .core import MetricEvaluator
from .diffkit import as_real
from .errors import ConstructionError

KINDS = ("euclidean", "riemannian-matrix", "randers")
TWIST_KINDS = ("const", "exp-x", "exp-u", "affine-x", "trig-mixed", "expr")
PROPERTIES = ("riemannian", "berwald", "weakly-berwald", "dually-flat")


def _symbols(prefix, n):
    return sympy.symbols(" ".join(f"{prefix}{i + 1}" for i in range(n)) + " _pad")[:n]


@lru_cache(maxsize=None)
def _compile(expr: str, prefix: str, n: int):
    """Compile an expression in ``prefix1..prefixn`` to a vectorized callable."""
    syms = _symbols(prefix, n)
    try:
        e = sympy.sympify(expr, locals={str(s): s for s in syms})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConstructionError(f"cannot parse expression {expr!r}: {exc}") from None
    free = {str(s) for s in e.free_symbols} - {str(s) for s in syms}
    if free:
        raise ConstructionError(f"unknown symbols {sorted(free)} in {expr!r}")
    fn = sympy.lambdify(syms, e, modules="numpy")

    def call(x):
        x = as_real(x)
        val = fn(*[x[..., i] for i in range(n)])
        return np.broadcast_to(as_real(val), x.shape[:-1])

    return call, e


def _matrix_field(entries, n):
    cells = [[_compile(str(entries[i][j]), "x", n)[0] for j in range(n)] for i in range(n)]

    def A(x):
        x = as_real(x)
        out = np.empty(x.shape[:-1] + (n, n), dtype=x.dtype)
        for i, j in itertools.product(range(n), range(n)):
            out[..., i, j] = cells[i][j](x)
        return out

    return A


def _vector_field(entries, n):
    cells = [_compile(str(e), "x", n)[0] for e in entries]

    def b(x):
        x = as_real(x)
        return np.stack([c(x) for c in cells], axis=-1)

    return b


def _box(box, n):
    if box is None:
        return np.array([[-1.0, 1.0]] * n)
    box = np.asarray(box, dtype=float)
    if box.shape != (n, 2) or np.any(box[:, 0] >= box[:, 1]):
        raise ConstructionError(f"chart box must be {n} increasing [lo, hi] pairs")
    return box


def _grid(box, per_axis=7):
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(box))


@dataclass(frozen=True)
class MetricSpec:
    id: str
    kind: str
    dim: int
    params: dict = field(default_factory=dict)
    properties: frozenset = frozenset()
    box: tuple = None
    domain: str = None

    @classmethod
    def from_dict(cls, d):
        try:
            kind = d["kind"]
            dim = int(d["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConstructionError(f"metric spec needs 'kind' and 'dim': {exc}") from None
        params = {k: v for k, v in d.items()
                  if k not in ("id", "kind", "dim", "properties", "box", "domain")}
        box = d.get("box")
        return cls(id=d.get("id", kind), kind=kind, dim=dim, params=params,
                   properties=frozenset(d.get("properties", ())),
                   box=None if box is None else tuple(map(tuple, box)),
                   domain=d.get("domain"))

    def to_dict(self):
        d = {"id": self.id, "kind": self.kind, "dim": self.dim, **self.params,
             "properties": sorted(self.properties)}
        if self.box is not None:
            d["box"] = [list(b) for b in self.box]
        if self.domain is not None:
            d["domain"] = self.domain
        return d

    @property
    def chart_box(self):
        return _box(self.box, self.dim)


def _domain_fn(expr, n):
    if expr is None:
        return None
    syms = _symbols("x", n)
    try:
        rel = sympy.sympify(expr, locals={str(s): s for s in syms})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConstructionError(f"cannot parse domain {expr!r}: {exc}") from None
    fn = sympy.lambdify(syms, rel, modules="numpy")
    return lambda x, y: np.broadcast_to(fn(*[x[..., i] for i in range(n)]), x.shape[:-1])


def instantiate(spec: MetricSpec) -> MetricEvaluator:
    """Build the evaluator for a spec, validating its bounds on the chart box."""
    n = spec.dim
    if spec.kind not in KINDS:
        raise ConstructionError(f"unknown metric kind {spec.kind!r}; expected one of {KINDS}")
    if n < 1:
        raise ConstructionError("dimension must be positive")
    box = spec.chart_box
    grid = _grid(box)
    domain = _domain_fn(spec.domain, n)
    if domain is not None and not np.all(domain(grid, grid)):
        raise ConstructionError(f"{spec.id}: chart box leaves the declared domain {spec.domain}")

    if spec.kind == "euclidean":
        def F(x, y):
            return np.sqrt(np.einsum("...i,...i->...", y, y))
        return MetricEvaluator(n, F, domain, name=spec.id)

    A = _matrix_field(spec.params.get("matrix", np.eye(n).tolist()), n)
    Ag = A(grid)
    if np.abs(Ag - np.swapaxes(Ag, -1, -2)).max() > 0:
        raise ConstructionError(f"{spec.id}: matrix field is not symmetric")
    lam = np.linalg.eigvalsh(Ag)
    if lam.min() <= 0:
        raise ConstructionError(
            f"{spec.id}: matrix field not positive definite on the chart box "
            f"(min eigenvalue {lam.min():.3g})")

    if spec.kind == "riemannian-matrix":
        def F(x, y):
            return np.sqrt(np.einsum("...i,...ij,...j->...", y, A(x), y))
        return MetricEvaluator(n, F, domain, name=spec.id)

    if "b" not in spec.params:
        raise ConstructionError(f"{spec.id}: randers spec needs a one-form 'b'")
    b = _vector_field(spec.params["b"], n)
    bg = b(grid)
    norm = np.sqrt(np.einsum("...i,...ij,...j->...", bg, np.linalg.inv(Ag), bg))
    if norm.max() >= 1:
        raise ConstructionError(
            f"{spec.id}: randers bound |beta|_alpha < 1 violated on the chart box "
            f"(sup {norm.max():.3g})")

    def F(x, y):
        return (np.sqrt(np.einsum("...i,...ij,...j->...", y, A(x), y))
                + np.einsum("...i,...i->...", b(x), y))
    return MetricEvaluator(n, F, domain, name=spec.id)


# --- twist functions ------------------------------------------------------------

@dataclass(frozen=True)
class TwistSpec:
    """Twist function f(x, u) > 0 on the product chart box.

    Kinds: ``const`` (c), ``exp-x`` (exp(a.x)), ``exp-u`` (exp(a.u)),
    ``affine-x`` (c + a.x), ``trig-mixed`` (1 + eps sin(x1) cos(u1)) and
    ``expr`` (free expression in ``x1.., u1..``).
    """

    id: str
    kind: str
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if "kind" not in d:
            raise ConstructionError("twist spec needs a 'kind'")
        params = {k: v for k, v in d.items() if k not in ("id", "kind")}
        return cls(id=d.get("id", d["kind"]), kind=d["kind"], params=params)

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, **self.params}

    def expression(self, n1, n2) -> str:
        p = self.params
        xs = [f"x{i + 1}" for i in range(n1)]
        us = [f"u{i + 1}" for i in range(n2)]

        def lin(coeffs, names):
            coeffs = list(coeffs)
            if len(coeffs) > len(names):
                raise ConstructionError(f"twist {self.id}: too many coefficients")
            return " + ".join(f"({float(c)!r})*{v}" for c, v in zip(coeffs, names)) or "0"

        if self.kind == "const":
            return repr(float(p.get("c", 1.0)))
        if self.kind == "exp-x":
            return f"exp({lin(p.get('a', [1.0]), xs)})"
        if self.kind == "exp-u":
            return f"exp({lin(p.get('a', [1.0]), us)})"
        if self.kind == "affine-x":
            return f"{float(p.get('c', 1.0))!r} + {lin(p.get('a', [0.1]), xs)}"
        if self.kind == "trig-mixed":
            eps = float(p.get("eps", 0.2))
            if not abs(eps) <= 0.2:
                raise ConstructionError(f"twist {self.id}: trig-mixed needs |eps| <= 0.2")
            return f"1 + ({eps!r})*sin(x1)*cos(u1)"
        if self.kind == "expr":
            return str(p["f"])
        raise ConstructionError(f"unknown twist kind {self.kind!r}; expected one of {TWIST_KINDS}")


def twist_callables(spec: TwistSpec, n1: int, n2: int):
    """Vectorized ``f``, ``grad_x`` and ``grad_u`` with analytic partials."""
    xs = _symbols("x", n1)
    us = _symbols("u", n2)
    names = {str(s): s for s in (*xs, *us)}
    try:
        e = sympy.sympify(spec.expression(n1, n2), locals=names)
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConstructionError(f"cannot parse twist {spec.id}: {exc}") from None
    free = {str(s) for s in e.free_symbols} - set(names)
    if free:
        raise ConstructionError(f"unknown symbols {sorted(free)} in twist {spec.id}")
    allv = (*xs, *us)
    f0 = sympy.lambdify(allv, e, "numpy")
    dfx = [sympy.lambdify(allv, sympy.diff(e, s), "numpy") for s in xs]
    dfu = [sympy.lambdify(allv, sympy.diff(e, s), "numpy") for s in us]

    def args(x, u):
        return [x[..., i] for i in range(n1)] + [u[..., i] for i in range(n2)]

    def shape(x, u):
        return np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])

    def f(x, u):
        return np.broadcast_to(as_real(f0(*args(x, u))), shape(x, u))

    def grad_x(x, u):
        sh = shape(x, u)
        return np.stack([np.broadcast_to(as_real(d(*args(x, u))), sh) for d in dfx], -1)

    def grad_u(x, u):
        sh = shape(x, u)
        return np.stack([np.broadcast_to(as_real(d(*args(x, u))), sh) for d in dfu], -1)

    return f, grad_x, grad_u


# --- catalog --------------------------------------------------------------------

def euclidean(n, id=None):
    return MetricSpec(id or f"euclid-{n}d", "euclidean", n,
                      properties=frozenset(PROPERTIES))


METRICS = {
    "euclid-1d": euclidean(1),
    "euclid-2d": euclidean(2),
    "euclid-3d": euclidean(3),
    "halfline-1d": MetricSpec("halfline-1d", "euclidean", 1,
                              properties=frozenset(PROPERTIES), box=((1.0, 2.0),),
                              domain="x1 > 0"),
    "polar-2d": MetricSpec("polar-2d", "riemannian-matrix", 2,
                           {"matrix": [["1", "0"], ["0", "x1**2"]]},
                           frozenset({"riemannian", "berwald", "weakly-berwald"}),
                           box=((1.0, 2.0), (-1.0, 1.0)), domain="x1 > 0"),
    "sphere-2d": MetricSpec("sphere-2d", "riemannian-matrix", 2,
                            {"matrix": [["4/(1+x1**2+x2**2)**2", "0"],
                                        ["0", "4/(1+x1**2+x2**2)**2"]]},
                            frozenset({"riemannian", "berwald", "weakly-berwald"})),
    "conformal-1d": MetricSpec("conformal-1d", "riemannian-matrix", 1,
                               {"matrix": [["1 + x1**2/4"]]},
                               frozenset({"riemannian", "berwald", "weakly-berwald"})),
    "randers-min-2d": MetricSpec("randers-min-2d", "randers", 2,
                                 {"matrix": [["1", "0"], ["0", "1"]], "b": ["0.3", "0"]},
                                 frozenset({"berwald", "weakly-berwald", "dually-flat"})),
    "randers-2d": MetricSpec("randers-2d", "randers", 2,
                             {"matrix": [["1", "0"], ["0", "1"]],
                              "b": ["0.2 + 0.1*x2", "0.1*sin(x1)"]},
                             frozenset()),
    "randers-3d": MetricSpec("randers-3d", "randers", 3,
                             {"matrix": [["1", "0", "0"], ["0", "1", "0"], ["0", "0", "1"]],
                              "b": ["0.3", "0", "0"]},
                             frozenset({"berwald", "weakly-berwald", "dually-flat"})),
}

TWISTS = {
    "one": TwistSpec("one", "const", {"c": 1.0}),
    "const-1.2": TwistSpec("const-1.2", "const", {"c": 1.2}),
    "const-1.5": TwistSpec("const-1.5", "const", {"c": 1.5}),
    "exp-x1": TwistSpec("exp-x1", "exp-x", {"a": [1.0]}),
    "exp-u1": TwistSpec("exp-u1", "exp-u", {"a": [1.0]}),
    "affine-x1": TwistSpec("affine-x1", "affine-x", {"c": 1.0, "a": [0.1]}),
    "trig-mixed": TwistSpec("trig-mixed", "trig-mixed", {"eps": 0.2}),
    "radial-x1": TwistSpec("radial-x1", "affine-x", {"c": 0.0, "a": [1.0]}),
    "exp-u-small": TwistSpec("exp-u-small", "exp-u", {"a": [0.3]}),
}


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    m1: MetricSpec
    m2: MetricSpec
    twist: TwistSpec
    note: str = ""


def catalog(validate: bool = False):
    """Standard (M1, M2, twist) combinations used by the verification battery."""
    M, T = METRICS, TWISTS
    rows = [
        ("trivial", "euclid-2d", "euclid-2d", "one", "flat direct product"),
        ("warped", "euclid-1d", "euclid-2d", "exp-x1", "warped Riemannian, f on M1"),
        ("twisted-mixed", "polar-2d", "euclid-2d", "trig-mixed", "f depends on x and u"),
        ("randers-riem", "randers-2d", "sphere-2d", "affine-x1", "Randers x Riemannian"),
        ("riem-randers", "conformal-1d", "randers-2d", "exp-u-small", "Riemannian x Randers"),
        ("randers-randers", "randers-2d", "randers-min-2d", "const-1.2", "Randers x Randers"),
        ("randers-randers-twisted", "randers-min-2d", "randers-2d", "trig-mixed",
         "Randers x Randers, mixed twist"),
        ("euclid-randers", "euclid-2d", "randers-2d", "affine-x1", "Euclidean x Randers"),
        ("randers-euclid", "randers-2d", "euclid-2d", "one", "Randers x Euclidean"),
        ("randers-euclid-warped", "randers-2d", "euclid-2d", "affine-x1",
         "Randers x Euclidean, f on M1"),
        ("euclid-twisted-u", "euclid-2d", "euclid-2d", "exp-u1", "flat factors, f on M2"),
        ("riem-riem-const", "polar-2d", "sphere-2d", "const-1.5",
         "Riemannian x Riemannian, constant f"),
        ("flat-cone", "halfline-1d", "sphere-2d", "radial-x1",
         "flat R^3 in polar form, unit sphere fiber"),
    ]
    entries = [CatalogEntry(i, M[a], M[b], T[t], note) for i, a, b, t, note in rows]
    if validate:
        specs = {}
        for e in entries:
            build(e)
            specs.setdefault(e.m1.id, e.m1)
            specs.setdefault(e.m2.id, e.m2)
        for spec in specs.values():
            check_properties(spec)
    return entries


def catalog_entry(id):
    for e in catalog():
        if e.id == id:
            return e
    raise KeyError(id)


# --- products and property checks -------------------------------------------------

#: Residual bound per declared property (third-derivative objects get 1e-4).
PROPERTY_TOL = {"riemannian": 1e-6, "berwald": 1e-4, "weakly-berwald": 1e-4,
                "dually-flat": 1e-5}


def property_residuals(spec: MetricSpec, count: int = 16, seed: int = 0,
                       cfg: core.OracleConfig = core.ORACLE) -> dict:
    """Max oracle residual of every property in :data:`PROPERTIES`."""
    M = instantiate(spec)
    z = core.sample_tangents(spec.chart_box, [spec.dim], count, seed=seed,
                             contains=M.contains)
    B = core.berwald_curvature(M, z, cfg)
    return {
        "riemannian": float(np.abs(core.cartan_tensor(M, z, cfg)).max()),
        "berwald": float(np.abs(B).max()),
        "weakly-berwald": float(np.abs(core.mean_berwald_from(B)).max()),
        "dually-flat": float(np.abs(core.ldf_residual(M, z, cfg)).max()),
    }


def check_properties(spec: MetricSpec, count: int = 16, seed: int = 0) -> dict:
    """Confirm the declared properties of ``spec``; raises :class:`ConstructionError`."""
    unknown = set(spec.properties) - set(PROPERTIES)
    if unknown:
        raise ConstructionError(f"{spec.id}: unknown properties {sorted(unknown)}")
    res = property_residuals(spec, count, seed)
    for prop in sorted(spec.properties):
        if res[prop] >= PROPERTY_TOL[prop]:
            raise ConstructionError(
                f"{spec.id}: declared property {prop!r} not confirmed "
                f"(residual {res[prop]:.3g} >= {PROPERTY_TOL[prop]:g})")
    return res


def build(entry: CatalogEntry, matsumoto_n=None, validate: bool = True):
    """Twisted product for a catalog entry (or any entry-shaped triple)."""
    from .twisted import TwistFunction, TwistedProduct

    M1, M2 = instantiate(entry.m1), instantiate(entry.m2)
    f, gx, gu = twist_callables(entry.twist, entry.m1.dim, entry.m2.dim)
    tf = TwistFunction(f, gx, gu, entry.twist.id)
    if validate:
        tf.validate(entry.m1.chart_box, entry.m2.chart_box)
    box = np.concatenate([entry.m1.chart_box, entry.m2.chart_box])
    return TwistedProduct(M1, M2, tf, box, matsumoto_n=matsumoto_n, name=entry.id)


def resolve_metric(ref) -> MetricSpec:
    """A catalog metric id or an inline spec dictionary."""
    if isinstance(ref, MetricSpec):
        return ref
    if isinstance(ref, str):
        if ref not in METRICS:
            raise ConstructionError(f"unknown metric id {ref!r}")
        return METRICS[ref]
    if isinstance(ref, dict):
        return MetricSpec.from_dict(ref)
    raise ConstructionError(f"metric must be an id or a spec object, got {type(ref).__name__}")


def resolve_twist(ref) -> TwistSpec:
    if isinstance(ref, TwistSpec):
        return ref
    if isinstance(ref, str):
        if ref not in TWISTS:
            raise ConstructionError(f"unknown twist id {ref!r}")
        return TWISTS[ref]
    if isinstance(ref, dict):
        return TwistSpec.from_dict(ref)
    raise ConstructionError(f"twist must be an id or a spec object, got {type(ref).__name__}")

"""Command line entry point: ``ftwist inspect|verify|classify|geodesic``.

Exit codes: 0 success, 1 identity or predicate failure, 2 configuration
error, 3 domain or degeneracy error, 4 truncated geodesic.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import classify, core, metrics, twisted, verification
from .errors import ConfigError, ConstructionError, DegeneracyError, DomainError

SCHEMA_VERSION = verification.SCHEMA_VERSION
FORMATS = ("json", "csv", "text")
COMMANDS = ("inspect", "verify", "classify", "geodesic")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DOMAIN, EXIT_TRUNCATED = 0, 1, 2, 3, 4

_KEYS = {"entry", "m1", "m2", "twist", "name", "samples", "seed", "tol", "format",
         "matsumoto_n", "timing", "verify", "inspect", "classify", "geodesic"}


@dataclass
class RunConfig:
    entry: metrics.CatalogEntry
    samples: int = 32
    seed: int = 42
    tol: float = None
    format: str = None
    matsumoto_n: int = None
    timing: bool = False
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - _KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "entry" in d:
            if any(k in d for k in ("m1", "m2", "twist")):
                raise ConfigError("give either 'entry' or 'm1'/'m2'/'twist', not both")
            try:
                entry = metrics.catalog_entry(d["entry"])
            except KeyError:
                raise ConfigError(f"unknown catalog entry {d['entry']!r}") from None
        else:
            missing = [k for k in ("m1", "m2") if k not in d]
            if missing:
                raise ConfigError(f"config needs 'entry' or both 'm1' and 'm2' (missing {missing})")
            entry = metrics.CatalogEntry(
                d.get("name", "custom"), metrics.resolve_metric(d["m1"]),
                metrics.resolve_metric(d["m2"]), metrics.resolve_twist(d.get("twist", "one")))
        samples = d.get("samples", 32)
        if not isinstance(samples, int) or isinstance(samples, bool) or samples < 1:
            raise ConfigError("'samples' must be a positive integer")
        seed = d.get("seed", 42)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("'seed' must be an integer")
        tol = d.get("tol")
        if tol is not None and not (isinstance(tol, (int, float)) and tol > 0):
            raise ConfigError("'tol' must be a positive number")
        fmt = d.get("format")
        if fmt is not None and fmt not in FORMATS:
            raise ConfigError(f"'format' must be one of {FORMATS}")
        opts = {k: d[k] for k in ("verify", "inspect", "classify", "geodesic") if k in d}
        for k, v in opts.items():
            if not isinstance(v, dict):
                raise ConfigError(f"'{k}' options must be an object")
        return cls(entry, samples, seed, None if tol is None else float(tol), fmt,
                   d.get("matsumoto_n"), bool(d.get("timing", False)), opts, d)

    def product(self):
        return metrics.build(self.entry, matsumoto_n=self.matsumoto_n)

    def echo(self):
        return {"entry": self.entry.id, "m1": self.entry.m1.to_dict(),
                "m2": self.entry.m2.to_dict(), "twist": self.entry.twist.to_dict(),
                "samples": self.samples, "seed": self.seed, "tol": self.tol,
                "matsumoto_n": self.matsumoto_n, "options": self.options}


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(data)


# --- helpers ---------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy with numpy scalars and arrays converted."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(report) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return f"{v:.6e}" if isinstance(v, float) else str(v)


# --- commands --------------------------------------------------------------------

# report key, index symbol, getter, slot positions
TENSORS = [
    ("metric", "g", lambda j: j.g, "ll"),
    ("spray", "G", lambda j: j.spray, "u"),
    ("connection", "G", lambda j: j.N, "ul"),
    ("vertical", "G", lambda j: j.vertical, "ull"),
    ("horizontal", "F", lambda j: j.horizontal, "ull"),
    ("cartan", "C", lambda j: j.cartan_mixed, "ull"),
    ("berwald", "B", lambda j: j.berwald, "ulll"),
    ("mean_berwald", "E", lambda j: j.mean_berwald, "ll"),
]


def cmd_inspect(cfg: RunConfig):
    T = cfg.product()
    point = cfg.options.get("inspect", {}).get("point")
    if point is None:
        z = T.samples(1, cfg.seed)
    else:
        z = np.atleast_2d(np.asarray(point, dtype=float))
        if z.shape != (1, 2 * T.n):
            raise ConfigError(f"inspect point must have {2 * T.n} coordinates (x, u, y, v)")
        if not twisted.product_metric(T).contains(z)[0]:
            raise DomainError("inspect point outside the product domain")
    j = twisted.TwistedJet(T, z)
    tensors = {}
    for key, name, get, pos in TENSORS:
        tensors[key] = twisted.BlockTensor(get(j)[0], T.n1, T.n2, name, pos)
    tensors["nonlinear_curvature"] = twisted.BlockTensor(
        np.asarray(twisted.nonlinear_curvature(T, z).entries)[0], T.n1, T.n2, "R", "ull")
    Rb = np.asarray(twisted.berwald_connection_curvature(T, z).entries)[0]
    tensors["curvature"] = twisted.BlockTensor(Rb, T.n1, T.n2, "R", "ulll")
    blocks = []
    for key, bt in tensors.items():
        for pat in bt.patterns():
            arr = bt.block(pat)
            blocks.append({"tensor": key, "pattern": pat, "label": bt.label(pat),
                           "max_abs": float(np.abs(arr).max(initial=0.0)),
                           "entries": arr})
    report = {"point": z[0], "blocks": blocks}
    if verification.is_warped_riemannian(T, z):
        term, grad2 = twisted.warped_curvature_term(T, z)
        zc2 = np.concatenate([z[:, T.n1:T.n], z[:, T.n + T.n1:]], -1)
        R2 = core.connection_curvature(T.M2, zc2)
        s2 = slice(T.n1, T.n)
        res = float(np.abs(Rb[s2, s2, s2, s2] - (R2[0] - term[0])).max())
        report["warped_relation"] = {
            "grad_f_norm2": float(grad2[0]), "residual": res,
            "relation": "R^γ_αβλ(product) = R^γ_αβλ - |grad f|^2 (δ^γ_λ g_αβ - δ^γ_β g_αλ)"}
    return report, EXIT_OK


def cmd_verify(cfg: RunConfig):
    T = cfg.product()
    opts = cfg.options.get("verify", {})
    rep = verification.verify(T, count=cfg.samples, seed=cfg.seed,
                              curvature_count=int(opts.get("curvature_samples", 8)),
                              tol=cfg.tol, faults=opts.get("fault_injection"))
    return rep.to_dict(), EXIT_OK if rep.passed else EXIT_FAIL


def cmd_classify(cfg: RunConfig):
    T = cfg.product()
    names = cfg.options.get("classify", {}).get("predicates", list(classify.PREDICATES))
    bad = [n for n in names if n not in classify.PREDICATES]
    if bad:
        raise ConfigError(f"unknown predicates {bad}")
    z = T.samples(cfg.samples, cfg.seed)
    reports = []
    for n in names:
        kw = {} if cfg.tol is None else {"tol": cfg.tol}
        reports.append(classify.PREDICATES[n](T, z, seed=cfg.seed, **kw).to_dict())
    broken = sorted({r["predicate"] for r in reports if not _consistent(r["details"])})
    return {"reports": reports, "inconsistent": broken}, EXIT_FAIL if broken else EXIT_OK


def _consistent(details):
    """False when any nested iff/theorem check disagrees on the battery."""
    for k, v in details.items():
        if k in ("iff_consistent", "theorem_witnessed") and v is False:
            return False
        if isinstance(v, dict) and not _consistent(v):
            return False
    return True


def cmd_geodesic(cfg: RunConfig):
    T = cfg.product()
    g = cfg.options.get("geodesic", {})
    P = twisted.product_metric(T)
    try:
        x0 = np.asarray(g["x0"], dtype=float)
        y0 = np.asarray(g["y0"], dtype=float)
    except KeyError as exc:
        raise ConfigError(f"geodesic options need {exc.args[0]!r}") from None
    if x0.shape != (T.n,) or y0.shape != (T.n,):
        raise ConfigError(f"x0 and y0 must have {T.n} coordinates")
    t_end, dt = float(g.get("t_end", 1.0)), float(g.get("dt", 1e-3))
    if not (t_end > 0 and dt > 0):
        raise ConfigError("t_end and dt must be positive")
    tr = core.geodesic(P, x0, y0, t_end, dt)
    report = {"t": tr.t, "x": tr.x, "xdot": tr.xdot, "F": tr.F, "drift": tr.drift,
              "truncated": tr.truncated, "reason": tr.reason, "dim": T.n}
    return report, EXIT_TRUNCATED if tr.truncated else EXIT_OK


HANDLERS = {"inspect": cmd_inspect, "verify": cmd_verify, "classify": cmd_classify,
            "geodesic": cmd_geodesic}


# --- rendering -------------------------------------------------------------------

def render(command, report, fmt):
    if fmt == "json":
        return dumps(report)
    body = report["result"]
    if command == "geodesic":
        n = body["dim"]
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"xdot{i + 1}" for i in range(n)] + ["F"]
        rows = [[repr(float(t)), *map(repr, map(float, x)), *map(repr, map(float, xd)),
                 repr(float(F))]
                for t, x, xd, F in zip(body["t"], body["x"], body["xdot"], body["F"])]
        if fmt == "csv":
            text = _csv(rows, header)
            summary = f"# drift={body['drift']!r} truncated={str(body['truncated']).lower()}"
            if body["reason"]:
                summary += f" reason={body['reason']}"
            return text + summary + "\n"
        lines = [f"geodesic of {report['config']['entry']}: {len(rows)} points, "
                 f"F drift {body['drift']:.3e}"]
        if body["truncated"]:
            lines.append(f"truncated: {body['reason']}")
        return "\n".join(lines) + "\n"
    if command == "verify":
        rows = [[r["name"], r["kind"], _fmt(r["max_abs"]), _fmt(r["max_rel"]), _fmt(r["tol"]),
                 r["measure"], "pass" if r["passed"] else "FAIL",
                 "probe" if r["probe"] else "", r.get("flag", "")]
                for r in body["identities"]]
        header = ["identity", "kind", "max_abs", "max_rel", "tol", "measure", "status",
                  "probe", "flag"]
        if fmt == "csv":
            return _csv(rows, header)
        out = [f"verify {body['entry']} ({body['count']} samples, seed {body['seed']}): "
               + ("PASS" if body["passed"] else "FAIL")]
        for r in rows:
            out.append(f"  {r[0]:<28} {r[2]:>13} {r[3]:>13} tol {r[4]:<13} {r[6]:<4} "
                       f"{r[7]:<5} {r[8]}".rstrip())
        return "\n".join(out) + "\n"
    if command == "classify":
        rows = [[r["predicate"], r["verdict"], _fmt(r["max_residual"]), _fmt(r["tolerance"])]
                for r in body["reports"]]
        if fmt == "csv":
            return _csv(rows, ["predicate", "verdict", "max_residual", "tolerance"])
        out = [f"classify {report['config']['entry']}"]
        for r, full in zip(rows, body["reports"]):
            out.append(f"  {r[0]:<22} {r[1]:<12} residual {r[2]} (tol {r[3]})")
            for w in full["warnings"]:
                out.append(f"      warning: {w}")
        return "\n".join(out) + "\n"
    # inspect
    rows = []
    for b in body["blocks"]:
        arr = np.asarray(b["entries"], dtype=float)
        for idx in np.ndindex(*arr.shape):
            rows.append([b["tensor"], b["pattern"], b["label"],
                         " ".join(str(i) for i in idx), repr(float(arr[idx]))])
    if fmt == "csv":
        return _csv(rows, ["tensor", "pattern", "label", "index", "value"])
    out = [f"inspect {report['config']['entry']} at "
           + " ".join(f"{v:.6g}" for v in body["point"])]
    for b in body["blocks"]:
        out.append(f"  {b['tensor']:<20} {b['label']:<12} max|.| {b['max_abs']:.3e}")
    if "warped_relation" in body:
        w = body["warped_relation"]
        out.append(f"  warped relation: |grad f|^2 = {w['grad_f_norm2']:.6g}, "
                   f"residual {w['residual']:.3e}")
    return "\n".join(out) + "\n"


# --- entry point -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ftwist", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--tol", type=float, help="override every non-algebraic tolerance")
    p.add_argument("--format", choices=FORMATS, help="output format")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--timing", action="store_true", help="include wall-clock timing")
    return p


def run(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.tol is not None:
            if not args.tol > 0:
                raise ConfigError("--tol must be positive")
            cfg.tol = args.tol
        fmt = args.format or cfg.format or ("csv" if args.command == "geodesic" else "json")
        start = time.perf_counter()
        result, code = HANDLERS[args.command](cfg)
    except (ConfigError, ConstructionError) as exc:
        print(f"ftwist: config error: {exc}", file=stderr)
        return EXIT_CONFIG
    except (DomainError, DegeneracyError) as exc:
        print(f"ftwist: domain error: {exc}", file=stderr)
        return EXIT_DOMAIN
    report = {"schema_version": SCHEMA_VERSION, "command": args.command,
              "config": cfg.echo(), "result": result, "exit_code": code}
    if args.timing or cfg.timing:
        report["timing"] = {"seconds": time.perf_counter() - start}
    text = render(args.command, report, fmt)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        stdout.write(text)
    return code


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="ftwist: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

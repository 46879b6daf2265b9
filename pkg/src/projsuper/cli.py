"""Command-line driver: verify, classify, scan-sphere, transport, catalog-list.

Exit codes: 0 pass, 1 fail, 2 error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from . import catalog as cat
from .algebra import (AMBIGUITY, DEFAULT_SEED, EPS_C, EPS_DISC, EPS_HESS, IllPosedFitError,
                      PencilSampler, StaeckelClassifier, functional_independence, poisson,
                      sample_phase_points)
from .expr import ExprError, evaluate
from .geometry import GeometryError, same_projective_class
from .systems import (bertrand_darboux_relative, closedness_residual, line_integral,
                      projective_potential, transport_potential_oneform)

EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
SCAN_COLUMNS = ("theta", "phi", "label", "ambiguous", "candidates", "residual_rms",
                "margin_cubic", "margin_discriminant", "margin_hessian", "margin_quadratic",
                "margin_parallel", "margin_mixed")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    eps_c: float = EPS_C
    eps_disc: float = EPS_DISC
    eps_hess: float = EPS_HESS
    ambiguity: float = AMBIGUITY
    bracket_tol: float = 1e-9
    bd_tol: float = 1e-9
    metrizability_tol: float = 1e-10
    closedness_tol: float = 1e-9
    max_residual: float = 1e-8
    samples: int = 200
    points: int = 100
    momentum: float = 1.0
    seed: int = DEFAULT_SEED
    workers: int = 0
    xmin: float | None = None
    xmax: float | None = None
    ymin: float | None = None
    ymax: float | None = None

    def __post_init__(self):
        for f in ("eps_c", "eps_disc", "eps_hess", "ambiguity", "bracket_tol", "bd_tol",
                  "metrizability_tol", "closedness_tol", "max_residual", "momentum"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be positive")
        if self.samples < 60:
            raise ConfigError("samples must be at least 60")

    def window(self, domain):
        if all(v is None for v in (self.xmin, self.xmax, self.ymin, self.ymax)):
            return domain
        from dataclasses import replace
        xl = (self.xmin if self.xmin is not None else domain.xlim[0],
              self.xmax if self.xmax is not None else domain.xlim[1])
        yl = (self.ymin if self.ymin is not None else domain.ylim[0],
              self.ymax if self.ymax is not None else domain.ylim[1])
        return replace(domain, xlim=xl, ylim=yl)

    def classifier(self):
        return StaeckelClassifier(self.eps_c, self.eps_disc, self.eps_hess, self.ambiguity,
                                  self.max_residual)


def read_config(path):
    """Flat ``key = value`` text; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _coerce(name, value):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    t = str(types[name])
    try:
        if t.startswith("int"):
            return int(value, 0) if isinstance(value, str) else int(value)
        return float(value)
    except ValueError as ex:
        raise ConfigError(f"bad value for {name}: {value!r}") from ex


def build_config(args) -> RunConfig:
    """Defaults < config file < PROJSUPER_SEED < command-line flags."""
    vals = {}
    if getattr(args, "config", None):
        vals.update({k: _coerce(k, v) for k, v in read_config(args.config).items()})
    env = os.environ.get("PROJSUPER_SEED")
    if env:
        vals["seed"] = _coerce("seed", env)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            vals[f.name] = v
    return RunConfig(**vals)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ------------------------------------------------------------------ verify

def _load(name, **params):
    if name.endswith(".json") or os.path.sep in name:
        return cat.load_json(name, **params)
    return cat.get(name, **params)


def cmd_verify(name, cfg: RunConfig):
    entry = _load(name)
    entry.domain = cfg.window(entry.domain)
    x, y = entry.sample(cfg.points, cfg.seed)
    b = entry.bindings()
    checks = []

    def record(check, value, tol):
        checks.append({"check": check, "value": float(value), "tol": tol, "passed": bool(value < tol)})

    record("metrizability", cat.metrizability_check(entry, x, y), cfg.metrizability_tol)
    for k, I in enumerate(entry.integrals, 1):
        r = bertrand_darboux_relative(entry.g, I.K, entry.V, x, y, b, index="contravariant")
        record(f"bertrand-darboux[{k}]", r, cfg.bd_tol)
    for k, I in enumerate(entry.integrals, 1):
        record(f"closedness[{k}]", closedness_residual(I.dW, x, y, b), cfg.closedness_tol)
    if all(c["passed"] for c in checks):
        ps = entry.phase_samples(cfg.points, cfg.seed, cfg.momentum)
        pb = {**b, **ps}
        H = entry.H
        hv = evaluate(H, pb)
        for k, I in enumerate(entry.integrals, 1):
            iv = evaluate(I.expr, pb)
            r = evaluate(poisson(H, I.expr), pb)
            record(f"bracket[{k}]", np.max(np.abs(r) / (1 + np.abs(hv * iv))), cfg.bracket_tol)
        if len(entry.integrals) >= 2:
            I1, I2 = entry.integrals[0].expr, entry.integrals[1].expr
            ranks = [functional_independence(H, I1, I2, (ps["x"][i], ps["y"][i], ps["p1"][i], ps["p2"][i]), b)
                     for i in range(min(20, cfg.points))]
            checks.append({"check": "independence", "value": min(ranks), "tol": 3,
                           "passed": min(ranks) == 3})
    failed = [c["check"] for c in checks if not c["passed"]]
    report = {"system": entry.name, "seed": cfg.seed, "checks": checks,
              "status": "PASS" if not failed else "FAIL",
              "first_failure": failed[0] if failed else None,
              "max_residual": max((c["value"] for c in checks if c["check"] != "independence"), default=0.0)}
    return report, (EXIT_PASS if not failed else EXIT_FAIL)


# ---------------------------------------------------------------- classify

def _sampler(cfg: RunConfig, c=cat.DEFAULT_C, seed=None):
    gen = cat.generator_system(1, c)
    dom = cfg.window(gen.domain)
    smp = sample_phase_points(dom, cfg.samples, cfg.seed if seed is None else seed, cfg.momentum)
    return PencilSampler(cat.generator_bases(), cat.generator_U(c), smp, gen.basepoint, gen.bindings())


def classify_point(theta, phi, cfg: RunConfig, c=cat.DEFAULT_C, convention="theorem", sampler=None):
    if cat.is_exceptional(theta, phi, convention):
        raise cat.ExcludedPointError(f"(theta, phi) = ({theta}, {phi}) is an {cat.EXCLUDED_MESSAGE}")
    S = sampler if sampler is not None else _sampler(cfg, c)
    st, model = S.classify(*cat.sphere_coefficients(theta, phi, convention), classifier=cfg.classifier())
    return st, model


def classification_report(theta, phi, st, model, seed):
    d = st.to_dict()
    return {"theta": theta, "phi": phi, "label": d["label"], "measured_label": d["measured_label"],
            "candidates": d["candidates"], "margins": d["margins"],
            "residual_rms": float(model.residual_rms_), "seed": seed}


def cmd_classify(theta, phi, cfg: RunConfig, c=cat.DEFAULT_C, convention="theorem"):
    st, model = classify_point(theta, phi, cfg, c, convention)
    rep = classification_report(theta, phi, st, model, cfg.seed)
    rep["convention"] = convention
    return rep, (EXIT_FAIL if st.ambiguous else EXIT_PASS)


# ------------------------------------------------------------- scan-sphere

def parse_grid(text):
    try:
        nt, nph = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like 64x32, got {text!r}") from None
    if nt < 8 or nph < 8:
        raise ConfigError("grid must be at least 8x8")
    return nt, nph


def grid_points(nt, nph):
    """Cell centres: θ in (−π/2, π/2), φ in (0, 2π)."""
    th = -math.pi / 2 + (np.arange(nt) + 0.5) * math.pi / nt
    ph = (np.arange(nph) + 0.5) * 2 * math.pi / nph
    return th, ph


_WORKER = {}


def _init_worker(cfg_dict, c):
    cfg = RunConfig(**cfg_dict)
    _WORKER.update(cfg=cfg, sampler=_sampler(cfg, c))


def _scan_cell(args):
    idx, theta, phi, convention = args
    cfg, S = _WORKER["cfg"], _WORKER["sampler"]
    row = {"theta": theta, "phi": phi}
    try:
        st, model = classify_point(theta, phi, cfg, convention=convention, sampler=S)
        d = st.to_dict()
        row.update(label=d["label"], ambiguous=st.ambiguous, candidates="|".join(d["candidates"]),
                   residual_rms=float(model.residual_rms_),
                   **{f"margin_{k}": v for k, v in d["margins"].items()})
    except cat.ExcludedPointError:
        row.update(label="excluded", ambiguous=False, candidates="")
    except (IllPosedFitError, GeometryError, ExprError, FloatingPointError) as ex:
        row.update(label="unclassifiable", ambiguous=True, candidates=type(ex).__name__)
    return idx, row


def scan_sphere(nt, nph, cfg: RunConfig, c=cat.DEFAULT_C, convention="theorem"):
    th, ph = grid_points(nt, nph)
    jobs = [(i * nph + j, float(t), float(p), convention)
            for i, t in enumerate(th) for j, p in enumerate(ph)]
    workers = cfg.workers or (os.cpu_count() or 1)
    rows = [None] * len(jobs)
    if workers <= 1:
        _init_worker(asdict(cfg), c)
        for job in jobs:
            i, row = _scan_cell(job)
            rows[i] = row
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(asdict(cfg), c)) as ex:
            for i, row in ex.map(_scan_cell, jobs, chunksize=max(1, len(jobs) // (8 * workers))):
                rows[i] = row
    return rows


def write_scan_csv(rows, fh, cfg: RunConfig, grid, timestamp=True):
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if timestamp else "-"
    fh.write(f"# projsuper {__version__} scan-sphere grid={grid[0]}x{grid[1]} seed={cfg.seed} "
             f"generated={stamp}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SCAN_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(k, "")) for k in SCAN_COLUMNS])


def read_scan_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("".join(lines))))


# --------------------------------------------------------------- transport

def cmd_transport(src_name, dst_name, cfg: RunConfig, n=5):
    src, dst = _load(src_name), _load(dst_name)
    x, y = dst.sample(cfg.points, cfg.seed)
    bind = {**src.bindings(), **dst.bindings()}
    cmp = same_projective_class(src.g, dst.g, (x, y), bindings=bind)
    if not cmp.equivalent:
        raise GeometryError(f"{src.name} and {dst.name} are not projectively equivalent "
                            f"(deviation {cmp.max_deviation:.3e})")
    U = projective_potential(src.g, src.V)
    dV = transport_potential_oneform(dst.beta, U)
    closed = closedness_residual(dV, x, y, bind)
    xs = np.linspace(*dst.domain.xlim, n)
    ys = np.linspace(*dst.domain.ylim, n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = dst.domain.contains(X, Y, bind)
    Xi, Yi = X[inside], Y[inside]
    vals = line_integral(dV, dst.basepoint, (Xi, Yi), bind) if len(Xi) else np.array([])
    report = {"from": src.name, "to": dst.name, "seed": cfg.seed,
              "metric": dst.g.to_dict(), "dV": [str(dV[0]), str(dV[1])],
              "closedness": closed, "basepoint": list(dst.basepoint),
              "projective_deviation": cmp.max_deviation,
              "grid": {"x": Xi.tolist(), "y": Yi.tolist(), "V": np.asarray(vals).tolist()}}
    return report, (EXIT_PASS if closed < cfg.closedness_tol else EXIT_FAIL)


# --------------------------------------------------------------------- main

def _common(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=lambda s: int(s, 0), help="RNG seed (overrides PROJSUPER_SEED)")
    p.add_argument("--out", help="write the report here instead of stdout")


def make_parser():
    ap = argparse.ArgumentParser(prog="projsuper", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the self-checks of a catalog system or JSON file")
    p.add_argument("system")
    p.add_argument("--points", type=int)
    _common(p)

    p = sub.add_parser("classify", help="Stäckel type at a point of the classifying sphere")
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--phi", type=float, required=True)
    p.add_argument("--c", type=float, nargs=4, metavar=("C1", "C2", "C3", "C4"))
    p.add_argument("--convention", choices=("theorem", "lemma"), default="theorem")
    p.add_argument("--samples", type=int)
    _common(p)

    p = sub.add_parser("scan-sphere", help="classify every cell of a (theta, phi) grid")
    p.add_argument("--grid", default="64x32")
    p.add_argument("--workers", type=int)
    p.add_argument("--convention", choices=("theorem", "lemma"), default="theorem")
    p.add_argument("--samples", type=int)
    _common(p)

    p = sub.add_parser("transport", help="transport a potential to another metric of the class")
    p.add_argument("--from", dest="src", required=True)
    p.add_argument("--to", dest="dst", required=True)
    p.add_argument("--n", type=int, default=5, help="grid points per axis")
    _common(p)

    p = sub.add_parser("catalog-list", help="list built-in systems")
    p.add_argument("--json", action="store_true")
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        if args.command == "catalog-list":
            items = [{"name": n, "description": cat.raw_entry(n).get("description", "")} for n in cat.names()]
            if args.json:
                _emit(items)
            else:
                for it in items:
                    print(f"{it['name']:26s} {it['description']}")
            return EXIT_PASS
        cfg = build_config(args)
        if args.command == "verify":
            rep, code = cmd_verify(args.system, cfg)
            _emit(rep, args.out)
            print(f"{rep['status']} {rep['system']} max residual {rep['max_residual']:.3e}"
                  + (f" (first failure: {rep['first_failure']})" if rep["first_failure"] else ""),
                  file=sys.stderr)
            return code
        if args.command == "classify":
            c = tuple(args.c) if args.c else cat.DEFAULT_C
            rep, code = cmd_classify(args.theta, args.phi, cfg, c, args.convention)
            _emit(rep, args.out)
            return code
        if args.command == "scan-sphere":
            grid = parse_grid(args.grid)
            rows = scan_sphere(*grid, cfg, convention=args.convention)
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    write_scan_csv(rows, fh, cfg, grid)
            else:
                write_scan_csv(rows, sys.stdout, cfg, grid)
            bad = sum(r["label"] == "unclassifiable" for r in rows)
            return EXIT_FAIL if bad else EXIT_PASS
        if args.command == "transport":
            rep, code = cmd_transport(args.src, args.dst, cfg, args.n)
            _emit(rep, args.out)
            return code
    except cat.ExcludedPointError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_ERROR
    except (cat.CatalogError, ConfigError, GeometryError, ExprError, IllPosedFitError,
            OSError, ValueError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

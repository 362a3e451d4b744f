"""Batch front-end: load operator documents, run analyses, emit reports.

Commands: ``analyze``, ``linearize``, ``fieldlab``, ``catalog``.  Reports are
single JSON documents (sorted keys, no timestamps) so identical inputs and
seeds produce byte-identical output.  Exit codes: 0 ok, 2 input error,
3 verification failure or inconclusive decision.

``BVB_THREADS`` caps the numba worker count (see ``bvblab._kernels``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import __version__, _kernels
from . import ellipticity as el
from . import field_lab as fl
from . import operator_algebra as oa
from .operator_algebra import StabilizationError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VERIFY = 3


class InputError(Exception):
    pass


def _load_operator_arg(spec: str, n_flag: int | None):
    """Operator from 'catalog:<name>' or a JSON document path.

    Returns (operator, source descriptor dict with digest).
    """
    if spec.startswith("catalog:"):
        name = spec.split(":", 1)[1]
        if n_flag is None:
            raise InputError("catalog operators need --n")
        try:
            op = oa.catalog(name, n_flag)
        except ValueError as e:
            raise InputError(str(e)) from e
        doc = json.dumps({"catalog": name, "n": n_flag}, sort_keys=True)
        digest = hashlib.sha256(doc.encode()).hexdigest()
        return op, {"catalog": name, "n": n_flag, "sha256": digest}
    try:
        with open(spec, encoding="utf-8") as f:
            raw = f.read()
    except OSError as e:
        raise InputError(f"cannot read operator document: {e}") from e
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise InputError(f"operator document is not valid JSON: {e}") from e
    if "catalog" in doc:
        if "n" not in doc:
            raise InputError("operator document with 'catalog' is missing field 'n'")
        try:
            op = oa.catalog(doc["catalog"], int(doc["n"]))
        except ValueError as e:
            raise InputError(str(e)) from e
    else:
        try:
            op = oa.operator_from_document(doc)
        except (ValueError, TypeError) as e:
            raise InputError(str(e)) from e
    digest = hashlib.sha256(raw.encode()).hexdigest()
    return op, {"path": spec, "sha256": digest}


def _report_skeleton(args, source) -> dict:
    return {
        "tool": {"name": "bvblab", "version": __version__,
                 "kernel_backend": _kernels.backend_name()},
        "seed": getattr(args, "seed", 0),
        "inputs": {"operator": source},
    }


def _emit(report: dict, out_path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_analyze(args) -> int:
    op, source = _load_operator_arg(args.spec, args.n)
    report = _report_skeleton(args, source)
    report["parameters"] = {
        "resolution": args.resolution,
        "dmax": args.dmax,
        "restarts": args.restarts,
        "seed": args.seed,
    }
    ell_rep = el.ellipticity_constant(op, grid_resolution=args.resolution, seed=args.seed)
    dec = el.is_c_elliptic(op, d_max=args.dmax, restarts=args.restarts, seed=args.seed)
    analyses = {
        "operator": {"n": op.n, "k": op.k, "dimV": op.dim_v, "dimW": op.dim_w},
        "ellipticity": ell_rep.to_dict(),
        "c_ellipticity": dec.to_dict(),
    }
    if op.k == 1:
        analyses["mixing_triples"] = el.mixing_triple_test(
            op, trials=args.trials, seed=args.seed).to_dict()
    report["analyses"] = analyses
    _emit(report, args.out)
    return EXIT_VERIFY if dec.status == "INCONCLUSIVE" else EXIT_OK


def cmd_linearize(args) -> int:
    op, source = _load_operator_arg(args.spec, args.n)
    result = oa.linearize(op)
    oa.save_operator(result.lifted, args.out_spec)

    rng = np.random.default_rng(args.seed)
    max_resid = 0.0
    for _ in range(5):
        coeffs = {}
        for deg in range(4):
            for beta in _all_monomials(op.n, deg):
                coeffs[beta] = rng.integers(-5, 6, size=op.dim_v).astype(float)
        p = oa.PolynomialField(op.n, op.dim_v, coeffs)
        lhs = oa.apply_poly(result.lifted, oa.grad_power(p, op.k - 1))
        rhs = oa.apply_poly(op, p)
        for beta in set(lhs.coeffs) | set(rhs.coeffs):
            left = lhs.coeffs.get(beta, np.zeros(result.lifted.dim_w))
            want = np.zeros(result.lifted.dim_w)
            want[:op.dim_w] = rhs.coeffs.get(beta, np.zeros(op.dim_w))
            max_resid = max(max_resid, float(np.abs(left - want).max()))

    report = _report_skeleton(args, source)
    report["parameters"] = {"seed": args.seed, "out_spec": args.out_spec}
    report["analyses"] = {
        "linearization": {
            "input_order": op.k,
            "lifted": {"k": result.lifted.k, "dimV": result.lifted.dim_v,
                       "dimW": result.lifted.dim_w},
            "tilde_rows": [result.tilde_rows.start, result.tilde_rows.stop],
            "curl_rows": [result.curl_rows.start, result.curl_rows.stop],
            "round_trip_max_residual": max_resid,
            "round_trip_polynomials": 5,
        }
    }
    _emit(report, args.out)
    if max_resid > 1e-8:
        print(f"round-trip residual {max_resid:.3e} exceeds 1e-8", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _all_monomials(n, deg):
    from .tensor_core import multiindex_enumerate
    return multiindex_enumerate(n, deg)


def _parse_vector(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError as e:
        raise InputError(f"cannot parse {what} {text!r}: {e}") from e


def _parse_h(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


SMOOTH_FIELDS = {
    "sin_axis0": lambda centers, dim_v: 0.1 * np.repeat(
        np.sin(2 * np.pi * centers[..., :1]), dim_v, axis=-1),
    "gauss_bump": lambda centers, dim_v: 0.5 * np.repeat(
        np.exp(-np.sum((centers - 0.5) ** 2, axis=-1, keepdims=True) * 8.0),
        dim_v, axis=-1),
}


def cmd_fieldlab(args) -> int:
    op, source = _load_operator_arg(args.spec, args.n)
    h = _parse_h(args.h)
    radii = sorted((float(t) for t in args.radii.split(",")), reverse=True)
    if not radii:
        raise InputError("need at least one radius")
    if min(radii) < 2 * h:
        raise InputError(f"radii must be at least 2h = {2 * h}")

    box = (np.zeros(op.n), np.ones(op.n))
    center = np.full(op.n, 0.5)
    report = _report_skeleton(args, source)
    report["parameters"] = {"h": h, "radii": radii, "seed": args.seed,
                            "scenario": "jump" if args.jump else "smooth",
                            "nu_grid": args.nu_grid}
    analyses: dict = {}

    if args.jump:
        parts = args.jump.split(";")
        if len(parts) != 3:
            raise InputError("--jump needs 'a;b;nu' with comma-separated components")
        a = _parse_vector(parts[0], "jump value a")
        b = _parse_vector(parts[1], "jump value b")
        nu = _parse_vector(parts[2], "normal nu")
        if len(a) != op.dim_v or len(b) != op.dim_v:
            raise InputError(f"jump values must have dimV = {op.dim_v} components")
        if len(nu) != op.n:
            raise InputError(f"normal must have n = {op.n} components")
        if not np.linalg.norm(a - b) > 0:
            raise InputError("jump values must differ")
        nu = nu / np.linalg.norm(nu)
        offset = float(center @ nu)
        zero = (0,) * op.n
        field = fl.synth_jump(
            oa.PolynomialField(op.n, op.dim_v, {zero: a}),
            oa.PolynomialField(op.n, op.dim_v, {zero: b}),
            nu, offset, box, h)
        x = center + (offset - center @ nu) * nu
        triple = fl.JumpTriple(a, b, nu)
    elif args.smooth:
        if args.smooth not in SMOOTH_FIELDS:
            raise InputError(
                f"unknown smooth field {args.smooth!r}; known: {', '.join(SMOOTH_FIELDS)}")
        fn = SMOOTH_FIELDS[args.smooth]
        field = fl.field_from_function(lambda c: fn(c, op.dim_v), box, h, op.n, op.dim_v)
        x = center
        triple = None
    else:
        raise InputError("fieldlab needs either --jump or --smooth")

    mu = fl.discrete_apply(op, field)
    analyses["total_variation"] = float(np.sum(mu.mass_norms()))

    detected = fl.jump_detect(field, x, radii, nu_grid_resolution=args.nu_grid)
    analyses["jump_detect"] = None if detected is None else {
        "a": detected.a.tolist(), "b": detected.b.tolist(), "nu": detected.nu.tolist(),
    }

    profile = fl.upper_density(mu, x, radii)
    analyses["upper_density"] = {"radii": profile.radii, "values": profile.values}

    if triple is not None and op.k == 1:
        rep = fl.structure_check(op, field, triple, triple.nu, float(center @ triple.nu))
        analyses["structure_check"] = rep.to_dict()

    qc = None
    try:
        qc = fl.quasi_continuity_ratio(field, op, x, radii, d_max=args.dmax)
        analyses["quasi_continuity"] = {
            "radii": qc.radii, "ratios": qc.ratios, "numerators": qc.numerators,
            "denominators": qc.denominators, "flagged_zero": qc.flagged_zero,
            "ell": qc.ell,
        }
    except StabilizationError as e:
        analyses["quasi_continuity"] = {"skipped": str(e)}
    except ValueError as e:
        if "underresolved" not in str(e):
            raise
        analyses["quasi_continuity"] = {"skipped": str(e)}

    report["analyses"] = analyses
    _emit(report, args.out)

    if args.csv_dir:
        import os
        os.makedirs(args.csv_dir, exist_ok=True)
        profile.to_csv(os.path.join(args.csv_dir, "upper_density.csv"))
        if "quasi_continuity" in analyses and "ratios" in analyses["quasi_continuity"]:
            fl.write_profile_csv(
                os.path.join(args.csv_dir, "quasi_continuity.csv"),
                qc.radii, qc.ratios, header=("r", "ratio"))
    return EXIT_OK


def cmd_catalog(args) -> int:
    rows = []
    for name in oa.CATALOG_NAMES:
        for n in (2, 3):
            try:
                op = oa.catalog(name, n)
            except ValueError:
                continue
            rows.append({"name": name, "n": n, "k": op.k,
                         "dimV": op.dim_v, "dimW": op.dim_w})
    _emit({"tool": {"name": "bvblab", "version": __version__}, "catalog": rows},
          args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bvblab",
        description="Operator symbol analysis and the discrete grid laboratory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="ellipticity / complex-ellipticity report")
    pa.add_argument("spec", help="operator JSON path or catalog:<name>")
    pa.add_argument("--n", type=int, default=None, help="dimension for catalog operators")
    pa.add_argument("--resolution", type=int, default=64)
    pa.add_argument("--dmax", type=int, default=5)
    pa.add_argument("--restarts", type=int, default=40)
    pa.add_argument("--trials", type=int, default=100)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--out", default=None)
    pa.set_defaults(fn=cmd_analyze)

    pl = sub.add_parser("linearize", help="first-order reduction with round-trip check")
    pl.add_argument("spec")
    pl.add_argument("out_spec", help="path for the lifted operator document")
    pl.add_argument("--n", type=int, default=None)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", default=None)
    pl.set_defaults(fn=cmd_linearize)

    pf = sub.add_parser("fieldlab", help="grid-laboratory scenario run")
    pf.add_argument("spec")
    pf.add_argument("--n", type=int, default=None)
    pf.add_argument("--jump", default=None, help="'a;b;nu', comma-separated components")
    pf.add_argument("--smooth", default=None, help=f"one of: {', '.join(SMOOTH_FIELDS)}")
    pf.add_argument("--h", default="1/64", help="grid spacing (float or p/q)")
    pf.add_argument("--radii", default="0.3,0.2,0.1")
    pf.add_argument("--nu-grid", dest="nu_grid", type=int, default=48)
    pf.add_argument("--dmax", type=int, default=5)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--out", default=None)
    pf.add_argument("--csv-dir", dest="csv_dir", default=None)
    pf.set_defaults(fn=cmd_fieldlab)

    pc = sub.add_parser("catalog", help="list built-in operators")
    pc.add_argument("--out", default=None)
    pc.set_defaults(fn=cmd_catalog)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except fl.QuasiContinuityViolation as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())

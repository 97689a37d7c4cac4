"""Command-line entry point: ``gluefuse {fuse,simulate,diagnose,metrics}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DEFAULT_MISSING_TOKEN,
    Role,
    Source,
    concat,
    dataset_to_csv,
    load_dataset,
    load_schema,
    tabulate,
    write_text_atomic,
)
from .errors import NumericalError, ValidationError
from .glue import (
    Direction,
    GlueMode,
    GlueSpec,
    construct_glue,
    make_duplicate_glue,
    representativeness_diagnostic,
)
from .matching import exact_match_fuse
from .metrics import frechet_bounds, hellinger, mi_combine, misclassified_count
from .sampler import Hyperparams, SamplerConfig, occupancy_check, run_chain
from .simulation import load_synthetic_spec, report_text, simulate

log = logging.getLogger("gluefuse")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


# ---------------------------------------------------------------- fuse


def _resolve(base: Path, p):
    if p is None:
        return None
    p = Path(p)
    return str(p if p.is_absolute() else (base / p).resolve())


def build_run_config(args) -> dict:
    """Merge the JSON config file with command-line flags (flags win)."""
    cfg = {}
    base = Path.cwd()
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        base = Path(args.config).resolve().parent
    for key in ("schema", "d1", "d2"):
        if getattr(args, key, None):
            cfg[key] = getattr(args, key)
            cfg.setdefault("_from_cli", []).append(key)
    for key in ("schema", "d1", "d2"):
        if key not in cfg:
            raise ValidationError(f"run config needs {key!r}")
        cfg[key] = _resolve(Path.cwd() if key in cfg.get("_from_cli", []) else base, cfg[key])
    cfg.pop("_from_cli", None)

    glue = dict(cfg.get("glue") or {})
    if args.glue:
        glue["path"] = str(Path(args.glue).resolve())
    elif glue.get("path"):
        glue["path"] = _resolve(base, glue["path"])
    if args.glue_mode:
        glue["mode"] = args.glue_mode
    if args.glue_variables:
        glue["variables_kept"] = _csv_list(args.glue_variables)
    if args.glue_size is not None:
        glue["size"] = args.glue_size
    if args.direction:
        glue["direction"] = args.direction
    if glue and not glue.get("path"):
        raise ValidationError("glue settings given without a glue file")
    if glue:
        glue.setdefault("mode", GlueMode.APPEND_RAW.value)
        glue["mode"] = GlueMode(glue["mode"]).value
    cfg["glue"] = glue or None

    hp = dict(cfg.get("hyperparams") or {})
    if args.truncation is not None:
        hp["N"] = args.truncation
    cfg["hyperparams"] = Hyperparams(**hp).to_dict()

    sc = dict(cfg.get("sampler") or {})
    for key in ("burn_in", "n_iterations", "thin", "m"):
        if getattr(args, key) is not None:
            sc[key] = getattr(args, key)
    if args.seed is not None:
        sc["seed"] = args.seed
    elif "seed" in cfg:
        sc["seed"] = cfg["seed"]
    cfg["sampler"] = SamplerConfig(**sc).to_dict()
    cfg["seed"] = cfg["sampler"]["seed"]

    match = dict(cfg.get("matching") or {})
    if args.matching_key:
        match["key"] = _csv_list(args.matching_key)
    cfg["matching"] = match or None
    if args.missing_token is not None:
        cfg["missing_token"] = args.missing_token
    cfg.setdefault("missing_token", DEFAULT_MISSING_TOKEN)
    cfg.setdefault("metrics", [])
    out = args.output_dir or cfg.get("output_dir")
    if not out:
        raise ValidationError("no output directory given (--output-dir or output_dir in config)")
    cfg["output_dir"] = str(Path(out).resolve() if args.output_dir else _resolve(base, out))
    return cfg


def make_manifest(cfg: dict) -> dict:
    """Config echo without the output location, plus version and input digests."""
    man = {k: v for k, v in cfg.items() if k != "output_dir"}
    man["version"] = __version__
    inputs = {k: cfg[k] for k in ("schema", "d1", "d2")}
    if cfg.get("glue"):
        inputs["glue"] = cfg["glue"]["path"]
    man["input_sha256"] = {k: _file_digest(v) for k, v in inputs.items()}
    return man


def cmd_fuse(args) -> int:
    cfg = build_run_config(args)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_manifest(cfg)
    manifest_text = _canonical(manifest)
    mhash = _digest(manifest_text)
    tok = cfg["missing_token"]

    schema = load_schema(cfg["schema"])
    d1 = load_dataset(schema, cfg["d1"], Source.D1, tok)
    d2 = load_dataset(schema, cfg["d2"], Source.D2, tok)
    hp = Hyperparams(**cfg["hyperparams"])
    sc = SamplerConfig(**cfg["sampler"])
    report = {"manifest_sha256": mhash, "version": __version__, "n_D1": d1.n, "n_D2": d2.n}
    warnings = []

    parts = [d1, d2]
    g = cfg.get("glue")
    if g:
        spec = GlueSpec(
            variables_kept=tuple(g.get("variables_kept") or ()),
            size=g.get("size"),
            mode=g["mode"],
            direction=g.get("direction"),
            resample=bool(g.get("resample", False)),
        )
        if spec.mode is GlueMode.APPEND_RAW:
            glue = load_dataset(schema, g["path"], Source.GLUE, tok)
        elif spec.mode is GlueMode.DUPLICATE:
            src = load_dataset(schema, g["path"], Source.GLUE, tok)
            glue = make_duplicate_glue(src, spec, seed=[sc.seed, 7])
        else:
            raw = load_dataset(schema, g["path"], Source.GLUE, tok)
            donors, reference = (d2, d1) if spec.direction is Direction.B_GIVEN_A_BPRIME else (d1, d2)
            glue = construct_glue(raw, donors, spec.direction, hp, sc, size=spec.size, resample=spec.resample)
            names = schema.names_with_role(spec.direction.filled_role)
            diag = representativeness_diagnostic(
                glue, reference, names, threshold=g.get("threshold", 0.05), label=spec.direction.value
            )
            if diag.verdict == "FAIL":
                msg = (
                    f"constructed glue fails the representativeness diagnostic "
                    f"(max |diff| {diag.max_difference:.3f} > {diag.threshold}); "
                    f"the {spec.direction.value} conditional of the glue source looks unreliable"
                )
                warnings.append(msg)
                diag.warnings.append(msg)
                print(f"WARNING: {msg}", file=sys.stderr)
            report["diagnostic"] = diag.to_dict()
            _write(out / "diagnostic.txt", diag.to_text())
            _write(out / "diagnostic.json", _canonical({**diag.to_dict(), "manifest_sha256": mhash}))
        report["glue"] = {"mode": spec.mode.value, "n_s": glue.n}
        parts.append(glue)

    completed, summary = run_chain(concat(parts), hp, sc)
    for k, c in enumerate(completed, start=1):
        _write(out / f"D1_imp{k}.csv", dataset_to_csv(c.part(Source.D1), tok))
        _write(out / f"D2_imp{k}.csv", dataset_to_csv(c.part(Source.D2), tok))
    _write(out / "posterior_summary.jsonl", summary.to_jsonl(include_pi=True, extra={"manifest_sha256": mhash}))
    occ = occupancy_check(summary, hp.N)
    report["occupancy"] = occ.to_dict()
    report["m"] = len(completed)
    if occ.status == "WARN":
        warnings.append("posterior of occupied classes reaches the truncation level; increase N")

    m = cfg.get("matching")
    if m:
        c1, c2 = exact_match_fuse(d1, d2, m["key"], seed=[sc.seed, 11], fallback=m.get("fallback", "coarsen"))
        _write(out / "D1_match.csv", dataset_to_csv(c1, tok))
        _write(out / "D2_match.csv", dataset_to_csv(c2, tok))
        report["matching"] = {"key": list(m["key"])}

    if "frechet" in cfg["metrics"]:
        b, bp = schema.names_with_role(Role.B)[0], schema.names_with_role(Role.BPRIME)[0]
        report["frechet"] = {
            "conditional": [iv.to_dict() for iv in frechet_bounds(d1, d2, b, bp, True)],
            "unconditional": [iv.to_dict() for iv in frechet_bounds(d1, d2, b, bp, False)],
        }
    report["warnings"] = warnings
    _write(out / "report.json", _canonical(report))
    _write(out / "report.txt", _fuse_text(report))
    _write(out / "manifest.json", manifest_text)
    print(_fuse_text(report), end="")
    return EXIT_OK


def _fuse_text(report: dict) -> str:
    lines = [
        f"gluefuse {report['version']}  manifest {report['manifest_sha256'][:16]}",
        f"D1 rows {report['n_D1']}  D2 rows {report['n_D2']}  completed datasets {report['m']}",
    ]
    if "glue" in report:
        lines.append(f"glue mode {report['glue']['mode']}  n_s {report['glue']['n_s']}")
    if "diagnostic" in report:
        d = report["diagnostic"]
        lines.append(f"diagnostic {d['label']}: max |diff| {d['max_difference']:.4f} -> {d['verdict']}")
    o = report["occupancy"]
    lines.append(f"occupancy: max n* {o['max_n_star']} of N={o['N']} -> {o['status']}")
    if "frechet" in report:
        lines.append(f"{'cell':<10}{'cond. lower':>12}{'cond. upper':>12}{'uncond. width':>15}")
        for c, u in zip(report["frechet"]["conditional"], report["frechet"]["unconditional"]):
            lines.append(f"({c['cell'][0]},{c['cell'][1]}){'':<5}{c['lower']:>12.4f}{c['upper']:>12.4f}{u['width']:>15.4f}")
    for w in report.get("warnings", []):
        lines.append(f"WARNING: {w}")
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    write_text_atomic(path, text)


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    spec = load_synthetic_spec(args.spec)
    overrides = {k: getattr(args, k) for k in ("burn_in", "n_iterations", "thin", "m") if getattr(args, k) is not None}
    if overrides:
        spec = spec.with_sampler(**overrides)
    if args.seeds:
        seeds = [int(s) for s in _csv_list(args.seeds)]
    else:
        seeds = [args.seed if args.seed is not None else 0]
    experiments = _csv_list(args.experiments)
    unknown = set(experiments) - {"richness", "size", "bias"}
    if unknown:
        raise ValidationError(f"unknown experiments {sorted(unknown)}")
    manifest = {"version": __version__, "seeds": seeds, "experiments": experiments, "spec": spec.to_dict()}
    mhash = _digest(_canonical(manifest))
    report = simulate(spec, seeds, experiments, threads=args.threads)
    report["manifest_sha256"] = mhash
    text = f"manifest {mhash[:16]}\n" + report_text(report)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "manifest.json", _canonical(manifest))
    _write(out / "report.json", _canonical(report))
    _write(out / "report.txt", text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- diagnose


def cmd_diagnose(args) -> int:
    schema = load_schema(args.schema)
    tok = args.missing_token or DEFAULT_MISSING_TOKEN
    variables = _csv_list(args.variables)
    if not variables:
        raise ValidationError("--variables must name at least one variable")
    reports = []
    if args.reference:
        glue = load_dataset(schema, args.glue, Source.CONSTRUCTED_GLUE, tok)
        ref = load_dataset(schema, args.reference, Source.COMPLETE if not args.reference_source else args.reference_source, tok)
        reports.append(representativeness_diagnostic(glue, ref, variables, args.threshold, label="direct"))
    else:
        if not (args.d1 and args.d2):
            raise ValidationError("diagnose needs --reference, or --d1 and --d2 to construct glue")
        raw = load_dataset(schema, args.glue, Source.GLUE, tok)
        d1 = load_dataset(schema, args.d1, Source.D1, tok)
        d2 = load_dataset(schema, args.d2, Source.D2, tok)
        sc = SamplerConfig(
            burn_in=args.burn_in if args.burn_in is not None else 1000,
            n_iterations=args.n_iterations if args.n_iterations is not None else 2000,
            thin=args.thin if args.thin is not None else 100,
            m=0,
            seed=args.seed or 0,
        )
        hp = Hyperparams(N=args.truncation) if args.truncation else Hyperparams()
        for direction, donors, ref in (
            (Direction.B_GIVEN_A_BPRIME, d2, d1),
            (Direction.BPRIME_GIVEN_A_B, d1, d2),
        ):
            names = [v for v in variables if schema.role_of(v) is direction.filled_role]
            if not names:
                continue
            built = construct_glue(raw, donors, direction, hp, sc)
            reports.append(representativeness_diagnostic(built, ref, names, args.threshold, label=direction.value))
        if not reports:
            raise ValidationError("--variables names no B or Bprime variable")
    text = "".join(r.to_text() for r in reports)
    print(text, end="")
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "diagnostic.json", _canonical([r.to_dict() for r in reports]))
        _write(out / "diagnostic.txt", text)
    return EXIT_OK


# ---------------------------------------------------------------- metrics


def _imputation_pairs(directory: Path) -> list[tuple[Path, Path]]:
    pairs = []
    for p1 in sorted(directory.glob("D1_imp*.csv"), key=lambda p: int(re.findall(r"\d+", p.stem)[-1])):
        p2 = p1.with_name(p1.name.replace("D1_", "D2_", 1))
        if not p2.exists():
            raise ValidationError(f"{p1.name} has no matching {p2.name}")
        pairs.append((p1, p2))
    return pairs


def cmd_metrics(args) -> int:
    tok = args.missing_token or DEFAULT_MISSING_TOKEN
    result = {}
    lines = []
    if args.completed:
        if not (args.schema and args.truth):
            raise ValidationError("--completed needs --schema and --truth")
        schema = load_schema(args.schema)
        variables = _csv_list(args.variables) if args.variables else schema.names
        truth = tabulate(load_dataset(schema, args.truth, Source.COMPLETE, tok), variables)
        pairs = _imputation_pairs(Path(args.completed))
        if not pairs:
            raise ValidationError(f"no D1_imp*/D2_imp* files in {args.completed}")
        tables = [
            tabulate(concat([load_dataset(schema, a, Source.COMPLETE, tok), load_dataset(schema, b, Source.COMPLETE, tok)]), variables)
            for a, b in pairs
        ]
        h = [hellinger(truth.probabilities(), t.probabilities()) for t in tables]
        result["hellinger"] = {"per_imputation": h, "mean": float(np.mean(h))}
        result["misclassified"] = misclassified_count(truth, tables)
        lines.append(f"imputations {len(tables)}  variables {','.join(variables)}")
        lines.append(f"Hellinger mean {np.mean(h):.4f}  range {min(h):.4f}-{max(h):.4f}")
        lines.append(f"expected misclassified {result['misclassified']:.1f}")
    if args.mi_estimates:
        pairs = []
        with open(args.mi_estimates) as fh:
            header = fh.readline().strip().split(",")
            if header[:2] != ["estimate", "variance"]:
                raise ValidationError("MI estimate file needs header 'estimate,variance'")
            for line in fh:
                if line.strip():
                    q, u = line.strip().split(",")[:2]
                    pairs.append((float(q), float(u)))
        est = mi_combine(pairs)
        result["mi"] = est.to_dict()
        df = "inf" if est.df == float("inf") else f"{est.df:.2f}"
        lines.append(
            f"MI: qbar {est.qbar:.6g}  W {est.within:.6g}  B {est.between:.6g}  T {est.total:.6g}  "
            f"df {df}  95% ({est.lower:.6g}, {est.upper:.6g})"
        )
    if not result:
        raise ValidationError("metrics needs --completed or --mi-estimates")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "metrics.json", _canonical(result))
        _write(out / "metrics.txt", text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _globals(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="root RNG seed")
    parser.add_argument("--missing-token", default=default, help="missing-cell token in data files (default NA)")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker processes for independent runs")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _chain_flags(p):
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--n-iterations", dest="n_iterations", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--m", type=int, help="number of completed datasets")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gluefuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    _globals(parser, suppress=False)
    shared = _Parser(add_help=False)
    _globals(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fuse", parents=[shared], help="fuse D1 and D2, optionally with glue")
    f.add_argument("--config", help="JSON run config")
    f.add_argument("--schema")
    f.add_argument("--d1")
    f.add_argument("--d2")
    f.add_argument("--glue", help="glue file (raw glue, or duplication source)")
    f.add_argument("--glue-mode", choices=[m.value for m in GlueMode])
    f.add_argument("--glue-variables", help="comma-separated variables kept in duplicated glue")
    f.add_argument("--glue-size", type=int)
    f.add_argument("--direction", choices=[d.value for d in Direction])
    f.add_argument("--matching-key", help="also write exact-matching baseline on these A variables")
    f.add_argument("--truncation", type=int, help="number of latent classes N")
    f.add_argument("--output-dir")
    _chain_flags(f)
    f.set_defaults(func=cmd_fuse)

    s = sub.add_parser("simulate", parents=[shared], help="run synthetic glue experiments")
    s.add_argument("--spec", help="synthetic spec JSON (bundled default if omitted)")
    s.add_argument("--seeds", help="comma-separated seeds (default: --seed or 0)")
    s.add_argument("--experiments", default="richness,size,bias")
    s.add_argument("--output-dir", default="simulation_out")
    _chain_flags(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", parents=[shared], help="representativeness diagnostic for glue")
    d.add_argument("--schema", required=True)
    d.add_argument("--glue", required=True)
    d.add_argument("--variables", required=True, help="comma-separated variables to compare")
    d.add_argument("--reference", help="compare --glue (already constructed) against this file")
    d.add_argument("--reference-source", choices=[s.value for s in Source])
    d.add_argument("--d1")
    d.add_argument("--d2")
    d.add_argument("--threshold", type=float, default=0.05)
    d.add_argument("--truncation", type=int)
    d.add_argument("--output-dir")
    _chain_flags(d)
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("metrics", parents=[shared], help="recompute metrics from saved outputs")
    m.add_argument("--schema")
    m.add_argument("--truth", help="complete ground-truth data file")
    m.add_argument("--completed", help="directory holding D1_imp*/D2_imp* files")
    m.add_argument("--variables")
    m.add_argument("--mi-estimates", help="CSV with header estimate,variance")
    m.add_argument("--output-dir")
    m.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

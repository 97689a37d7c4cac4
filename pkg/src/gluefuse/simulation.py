"""Synthetic fusion experiments with known ground truth.

A complete population is drawn from a latent-class generator, split into
D1 (B' removed) and D2 (B removed), and fused under several glue settings:

* the richness ladder appends duplicated glue on growing variable subsets
  and adds an exact-matching baseline;
* the size ladder appends full-richness glue of several sizes;
* the bias experiment builds nonrepresentative glue, constructs glue in
  both conditional directions and runs the representativeness diagnostic.

Every random stream is derived from ``(seed, experiment, rung)`` through
``numpy.random.SeedSequence``, so results do not depend on how rungs are
scheduled across worker processes.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .dataset import Dataset, Role, Schema, Source, concat, tabulate
from .errors import ValidationError
from .glue import (
    Direction,
    GlueSpec,
    construct_glue,
    make_duplicate_glue,
    representativeness_diagnostic,
)
from .matching import exact_match_fuse
from .metrics import frechet_bounds, hellinger, misclassified_count
from .sampler import Hyperparams, SamplerConfig, joint_table, make_rng, occupancy_check, run_chain

_EXPERIMENT_IDS = {"population": 0, "richness": 1, "size": 2, "bias": 3, "matching": 4}


@dataclass(frozen=True)
class BiasDesign:
    """Selection and distortion rules for nonrepresentative glue."""

    keep_if_at_least: dict = field(default_factory=dict)
    other_rate: float = 0.5
    bprime_probs: tuple[float, ...] = ()
    threshold: float = 0.05


@dataclass(frozen=True)
class SyntheticSpec:
    schema: Schema
    weights: np.ndarray
    class_probs: tuple[tuple[np.ndarray, ...], ...]
    n: int = 3566
    split_fraction: float = 0.5
    eval_variables: tuple[str, ...] = ()
    glue_ladder: tuple[tuple[str, ...], ...] = ()
    size_ladder: tuple[float, ...] = ()
    matching_key: tuple[str, ...] = ()
    n_matchings: int = 10
    hyperparams: Hyperparams = Hyperparams()
    sampler: SamplerConfig = SamplerConfig(burn_in=2000, n_iterations=4000, thin=200, m=20)
    bias: BiasDesign = BiasDesign()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or (w < 0).any() or abs(w.sum() - 1) > 1e-9:
            raise ValidationError("generator weights must lie on the simplex")
        if len(self.class_probs) != w.size:
            raise ValidationError("need one probability set per generator class")
        probs = []
        for k, cls in enumerate(self.class_probs):
            if len(cls) != self.schema.p:
                raise ValidationError(f"class {k} needs one vector per variable")
            row = []
            for j, v in enumerate(cls):
                v = np.asarray(v, dtype=float)
                if v.size != self.schema.levels[j] or (v < 0).any() or abs(v.sum() - 1) > 1e-9:
                    raise ValidationError(f"class {k} variable {self.schema.names[j]} is not on the simplex")
                row.append(v)
            probs.append(tuple(row))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "class_probs", tuple(probs))
        if not 0 < self.split_fraction < 1:
            raise ValidationError("split fraction must be in (0, 1)")
        if not self.eval_variables:
            object.__setattr__(self, "eval_variables", tuple(self.schema.names))
        if not self.matching_key:
            object.__setattr__(self, "matching_key", tuple(self.schema.names_with_role(Role.A)))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        schema = Schema.from_records(d["schema"])
        gen = d["generator"]
        names = schema.names
        class_probs = tuple(tuple(c[name] for name in names) for c in gen["classes"])
        hp = Hyperparams(**d.get("hyperparams", {}))
        sc = SamplerConfig(**d.get("sampler", {}))
        bias = d.get("bias", {})
        return cls(
            schema=schema,
            weights=np.asarray(gen["weights"], dtype=float),
            class_probs=class_probs,
            n=d.get("n", 3566),
            split_fraction=d.get("split_fraction", 0.5),
            eval_variables=tuple(d.get("eval_variables", ())),
            glue_ladder=tuple(tuple(r) for r in d.get("glue_ladder", ())),
            size_ladder=tuple(d.get("size_ladder", ())),
            matching_key=tuple(d.get("matching_key", ())),
            n_matchings=d.get("n_matchings", 10),
            hyperparams=hp,
            sampler=sc,
            bias=BiasDesign(
                keep_if_at_least=dict(bias.get("keep_if_at_least", {})),
                other_rate=bias.get("other_rate", 0.5),
                bprime_probs=tuple(bias.get("bprime_probs", ())),
                threshold=bias.get("threshold", 0.05),
            ),
        )

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_records(),
            "generator": {
                "weights": self.weights.tolist(),
                "classes": [
                    {name: v.tolist() for name, v in zip(self.schema.names, cls)}
                    for cls in self.class_probs
                ],
            },
            "n": self.n,
            "split_fraction": self.split_fraction,
            "eval_variables": list(self.eval_variables),
            "glue_ladder": [list(r) for r in self.glue_ladder],
            "size_ladder": list(self.size_ladder),
            "matching_key": list(self.matching_key),
            "n_matchings": self.n_matchings,
            "hyperparams": self.hyperparams.to_dict(),
            "sampler": self.sampler.to_dict(),
            "bias": {
                "keep_if_at_least": dict(self.bias.keep_if_at_least),
                "other_rate": self.bias.other_rate,
                "bprime_probs": list(self.bias.bprime_probs),
                "threshold": self.bias.threshold,
            },
        }

    def with_sampler(self, **changes) -> "SyntheticSpec":
        sc = self.sampler.to_dict()
        sc.update(changes)
        return _replace(self, sampler=SamplerConfig(**sc))


def _replace(spec: SyntheticSpec, **changes) -> SyntheticSpec:
    from dataclasses import replace

    return replace(spec, **changes)


def load_synthetic_spec(path=None) -> SyntheticSpec:
    """Load a spec file, or the bundled default when ``path`` is ``None``."""
    if path is None:
        text = resources.files("gluefuse.resources").joinpath("default_synthetic.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return SyntheticSpec.from_dict(json.loads(text))


def stream(seed: int, experiment: str, *rung: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), _EXPERIMENT_IDS[experiment], *rung])


def _child_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def draw_population(spec: SyntheticSpec, seed) -> Dataset:
    rng = make_rng(seed)
    cls = rng.choice(spec.weights.size, size=spec.n, p=spec.weights)
    codes = np.zeros((spec.n, spec.schema.p), dtype=np.int64)
    for k in range(spec.weights.size):
        rows = np.flatnonzero(cls == k)
        for j, v in enumerate(spec.class_probs[k]):
            codes[rows, j] = rng.choice(v.size, size=rows.size, p=v) + 1
    return Dataset(spec.schema, codes, Source.COMPLETE)


def split_population(population: Dataset, fraction: float, seed) -> tuple[Dataset, Dataset, np.ndarray]:
    """Random split into D1 (Bprime removed) and D2 (B removed).

    Returns the two datasets and the population row index of each D1 row
    followed by each D2 row.
    """
    rng = make_rng(seed)
    schema = population.schema
    order = rng.permutation(population.n)
    n1 = int(round(fraction * population.n))
    r1, r2 = np.sort(order[:n1]), np.sort(order[n1:])
    d1 = Dataset(schema, population.select(r1).masked(schema.names_with_role(Role.BPRIME)), Source.D1)
    d2 = Dataset(schema, population.select(r2).masked(schema.names_with_role(Role.B)), Source.D2)
    return d1, d2, np.concatenate([r1, r2])


def _bb_variables(schema: Schema) -> tuple[str, str]:
    return schema.names_with_role(Role.B)[0], schema.names_with_role(Role.BPRIME)[0]


@dataclass
class Setting:
    population: Dataset
    d1: Dataset
    d2: Dataset
    truth_table: object


def make_setting(spec: SyntheticSpec, seed: int) -> Setting:
    pop = draw_population(spec, stream(seed, "population", 0))
    d1, d2, _ = split_population(pop, spec.split_fraction, stream(seed, "population", 1))
    return Setting(pop, d1, d2, tabulate(pop, spec.eval_variables))


def _fused_metrics(spec: SyntheticSpec, setting: Setting, completed, summary) -> dict:
    truth = setting.truth_table
    p_true = truth.probabilities()
    tables = [tabulate(c, spec.eval_variables) for c in completed]
    h = np.array([hellinger(p_true, t.probabilities()) for t in tables])
    out = {
        "hellinger_mean": float(h.mean()),
        "hellinger_ci": [float(x) for x in np.quantile(h, [0.025, 0.975])],
        "misclassified": misclassified_count(truth, tables),
    }
    if summary.draws:
        mh = np.array(
            [hellinger(p_true, joint_table(d, spec.schema, spec.eval_variables)) for d in summary.draws]
        )
        out["model_hellinger_mean"] = float(mh.mean())
        out["model_hellinger_ci"] = [float(x) for x in np.quantile(mh, [0.025, 0.975])]
    out["occupancy"] = occupancy_check(summary, spec.hyperparams.N).to_dict()
    return out


def _bb_cells(spec: SyntheticSpec, setting: Setting, summary) -> list[dict]:
    b, bp = _bb_variables(spec.schema)
    truth = tabulate(setting.population, [b, bp]).probabilities()
    draws = np.array([joint_table(d, spec.schema, [b, bp]) for d in summary.draws])
    cells = []
    for k in range(truth.shape[1]):
        for j in range(truth.shape[0]):
            vals = draws[:, j, k]
            lo, hi = np.quantile(vals, [0.025, 0.975])
            cells.append(
                {
                    "cell": [j + 1, k + 1],
                    "truth": float(truth[j, k]),
                    "mean": float(vals.mean()),
                    "lower": float(lo),
                    "upper": float(hi),
                    "width": float(hi - lo),
                    "covered": bool(lo <= truth[j, k] <= hi),
                }
            )
    return cells


def _rung_label(variables: Sequence[str]) -> str:
    return "No glue" if not variables else "{" + ",".join(variables) + "}"


def _fit(spec: SyntheticSpec, setting: Setting, glue: Dataset | None, seq) -> tuple:
    parts = [setting.d1, setting.d2] + ([glue] if glue is not None and glue.n else [])
    cfg = spec.sampler.to_dict()
    cfg.update(seed=_child_seed(seq), store_draws=True)
    return run_chain(concat(parts), spec.hyperparams, SamplerConfig(**cfg))


def richness_rung(spec: SyntheticSpec, seed: int, index: int) -> dict:
    setting = make_setting(spec, seed)
    variables = spec.glue_ladder[index]
    glue = None
    if variables:
        glue = make_duplicate_glue(setting.population, GlueSpec(variables, spec.n), stream(seed, "richness", index, 0))
    completed, summary = _fit(spec, setting, glue, stream(seed, "richness", index, 1))
    row = {"label": _rung_label(variables), "variables": list(variables), "n_s": 0 if glue is None else glue.n}
    row.update(_fused_metrics(spec, setting, completed, summary))
    return row


def matching_rung(spec: SyntheticSpec, seed: int) -> dict:
    setting = make_setting(spec, seed)
    truth = setting.truth_table
    tables = []
    for r in range(spec.n_matchings):
        c1, c2 = exact_match_fuse(setting.d1, setting.d2, spec.matching_key, seed=stream(seed, "matching", r))
        tables.append(tabulate(concat([c1, c2]), spec.eval_variables))
    h = np.array([hellinger(truth.probabilities(), t.probabilities()) for t in tables])
    return {
        "label": "Exact matching",
        "key": list(spec.matching_key),
        "hellinger_mean": float(h.mean()),
        "hellinger_range": [float(h.min()), float(h.max())],
        "misclassified": misclassified_count(truth, tables),
    }


def size_rung(spec: SyntheticSpec, seed: int, index: int) -> dict:
    setting = make_setting(spec, seed)
    n_s = int(round(spec.size_ladder[index] * spec.n))
    glue = None
    if n_s:
        glue = make_duplicate_glue(
            setting.population, GlueSpec(tuple(spec.eval_variables), n_s), stream(seed, "size", index, 0)
        )
    completed, summary = _fit(spec, setting, glue, stream(seed, "size", index, 1))
    return {"n_s": n_s, "cells": _bb_cells(spec, setting, summary)}


def biased_glue(spec: SyntheticSpec, population: Dataset, seed) -> Dataset:
    """Oversampled glue whose B' ignores everything and whose B follows the empirical P(B | A, B')."""
    rng = make_rng(seed)
    schema = spec.schema
    design = spec.bias
    keep_all = np.zeros(population.n, dtype=bool)
    for name, level in design.keep_if_at_least.items():
        keep_all |= population.column(name) >= level
    keep = keep_all | (rng.random(population.n) < design.other_rate)
    rows = population.select(np.flatnonzero(keep))
    codes = rows.codes.copy()
    b, bp = _bb_variables(schema)
    jb, jbp = schema.index(b), schema.index(bp)
    probs = np.asarray(design.bprime_probs, dtype=float)
    codes[:, jbp] = rng.choice(probs.size, size=rows.n, p=probs) + 1
    a_idx = schema.indices(schema.names_with_role(Role.A))
    cond_idx = a_idx + [jbp]
    shape = tuple(schema.levels[j] for j in cond_idx)
    pop_cells = np.ravel_multi_index(tuple((population.codes[:, cond_idx] - 1).T), shape)
    counts = np.zeros((math.prod(shape), schema.levels[jb]))
    np.add.at(counts, (pop_cells, population.codes[:, jb] - 1), 1.0)
    marginal = counts.sum(axis=0) / counts.sum()
    glue_cells = np.ravel_multi_index(tuple((codes[:, cond_idx] - 1).T), shape)
    for cell in np.unique(glue_cells):
        mine = np.flatnonzero(glue_cells == cell)
        c = counts[cell]
        # cells never seen in the population fall back to the B marginal
        p = c / c.sum() if c.sum() else marginal
        codes[mine, jb] = rng.choice(p.size, size=mine.size, p=p) + 1
    return Dataset(schema, codes, Source.GLUE)


def bias_experiment(spec: SyntheticSpec, seed: int) -> dict:
    setting = make_setting(spec, seed)
    glue = biased_glue(spec, setting.population, stream(seed, "bias", 0))
    b_names = spec.schema.names_with_role(Role.B)
    bp_names = spec.schema.names_with_role(Role.BPRIME)
    out = {"n_s": glue.n, "directions": {}}
    for k, (direction, donors, reference, names) in enumerate(
        [
            (Direction.B_GIVEN_A_BPRIME, setting.d2, setting.d1, b_names),
            (Direction.BPRIME_GIVEN_A_B, setting.d1, setting.d2, bp_names),
        ]
    ):
        cfg = spec.sampler.to_dict()
        cfg.update(seed=_child_seed(stream(seed, "bias", 1, k)))
        built = construct_glue(glue, donors, direction, spec.hyperparams, SamplerConfig(**cfg))
        report = representativeness_diagnostic(
            built, reference, names, threshold=spec.bias.threshold, label=direction.value
        )
        out["directions"][direction.value] = report.to_dict()
    return out


def frechet_summary(spec: SyntheticSpec, seed: int) -> dict:
    setting = make_setting(spec, seed)
    b, bp = _bb_variables(spec.schema)
    cond = frechet_bounds(setting.d1, setting.d2, b, bp, condition_on_A=True)
    unc = frechet_bounds(setting.d1, setting.d2, b, bp, condition_on_A=False)
    return {
        "conditional": [iv.to_dict() for iv in cond],
        "unconditional": [iv.to_dict() for iv in unc],
        "unmatched_A_cells": [list(c) for c in cond.unmatched_cells],
    }


def _run_task(task):
    kind, spec, seed, index = task
    if kind == "richness":
        return richness_rung(spec, seed, index)
    if kind == "matching":
        return matching_rung(spec, seed)
    if kind == "size":
        return size_rung(spec, seed, index)
    if kind == "bias":
        return bias_experiment(spec, seed)
    if kind == "frechet":
        return frechet_summary(spec, seed)
    raise ValueError(kind)


def simulate(
    spec: SyntheticSpec,
    seeds: Sequence[int] = (0,),
    experiments: Sequence[str] = ("richness", "size", "bias"),
    threads: int = 1,
) -> dict:
    """Run the requested experiments for each seed and collect a report dict."""
    tasks = []
    for seed in seeds:
        tasks.append(("frechet", spec, seed, 0))
        if "richness" in experiments:
            tasks += [("richness", spec, seed, i) for i in range(len(spec.glue_ladder))]
            tasks.append(("matching", spec, seed, 0))
        if "size" in experiments:
            tasks += [("size", spec, seed, i) for i in range(len(spec.size_ladder))]
        if "bias" in experiments:
            tasks.append(("bias", spec, seed, 0))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]

    per_seed = {s: {"richness": [], "size": []} for s in seeds}
    for (kind, _, seed, _), res in zip(tasks, results):
        if kind in ("richness", "matching"):
            per_seed[seed]["richness"].append(res)
        elif kind == "size":
            per_seed[seed]["size"].append(res)
        else:
            per_seed[seed][kind] = res
    return {
        "seeds": list(seeds),
        "spec": spec.to_dict(),
        "per_seed": {str(s): v for s, v in per_seed.items()},
        "summary": _summarize(per_seed, experiments),
    }


def _summarize(per_seed: dict, experiments) -> dict:
    seeds = list(per_seed)
    out = {}
    if "richness" in experiments:
        labels = [r["label"] for r in per_seed[seeds[0]]["richness"]]
        rows = []
        for k, label in enumerate(labels):
            vals = [per_seed[s]["richness"][k] for s in seeds]
            rows.append(
                {
                    "label": label,
                    "hellinger_mean": float(np.mean([v["hellinger_mean"] for v in vals])),
                    "hellinger_per_seed": [v["hellinger_mean"] for v in vals],
                    "misclassified_mean": float(np.mean([v["misclassified"] for v in vals])),
                }
            )
        out["richness"] = rows
    if "size" in experiments:
        sizes = [r["n_s"] for r in per_seed[seeds[0]]["size"]]
        rows = []
        for k, n_s in enumerate(sizes):
            cells = [per_seed[s]["size"][k]["cells"] for s in seeds]
            merged = []
            for c in range(len(cells[0])):
                merged.append(
                    {
                        "cell": cells[0][c]["cell"],
                        "truth_mean": float(np.mean([x[c]["truth"] for x in cells])),
                        "mean": float(np.mean([x[c]["mean"] for x in cells])),
                        "width": float(np.mean([x[c]["width"] for x in cells])),
                        "coverage": float(np.mean([x[c]["covered"] for x in cells])),
                    }
                )
            rows.append({"n_s": n_s, "cells": merged})
        out["size"] = rows
    if "bias" in experiments:
        dirs = per_seed[seeds[0]]["bias"]["directions"]
        out["bias"] = {
            d: {
                "max_difference": [per_seed[s]["bias"]["directions"][d]["max_difference"] for s in seeds],
                "verdict": [per_seed[s]["bias"]["directions"][d]["verdict"] for s in seeds],
            }
            for d in dirs
        }
    return out


def report_text(report: dict) -> str:
    """Plain-text tables laid out like the richness, size and diagnostic tables."""
    summary = report["summary"]
    lines = [f"Synthetic fusion report (seeds {report['seeds']})", ""]
    if "richness" in summary:
        lines.append("Glue richness: Hellinger distance to the true table, mean over seeds")
        lines.append(f"{'':<24}{'Hellinger':>11}{'misclassified':>15}")
        for r in summary["richness"]:
            lines.append(f"{r['label']:<24}{r['hellinger_mean']:>11.3f}{r['misclassified_mean']:>15.1f}")
        lines.append("")
    if "size" in summary:
        sizes = summary["size"]
        lines.append("Glue size: posterior mean (95% interval width) of P(B, B') cells")
        head = f"{'cell':<12}{'truth':>8}" + "".join(f"{'n_s=' + str(r['n_s']):>18}" for r in sizes)
        lines.append(head)
        for c in range(len(sizes[0]["cells"])):
            cell = sizes[0]["cells"][c]
            label = "P({},{})".format(*cell["cell"])
            row = f"{label:<12}{cell['truth_mean']:>8.3f}"
            for r in sizes:
                x = r["cells"][c]
                row += f"{x['mean']:>10.3f} ({x['width']:.3f})"
            lines.append(row)
        lines.append("")
    if "bias" in summary:
        lines.append("Nonrepresentative glue diagnostic")
        for d, v in summary["bias"].items():
            diffs = ", ".join(f"{x:.3f}" for x in v["max_difference"])
            lines.append(f"{d:<18} max |diff| per seed: {diffs}  verdicts: {', '.join(v['verdict'])}")
        lines.append("")
    return "\n".join(lines)

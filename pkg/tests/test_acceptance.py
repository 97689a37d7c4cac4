"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import dataclasses
import itertools
import json
import math
import time

import mpmath as mp
import numpy as np
import pytest

from conftest import record
from gluefuse import cli
from gluefuse.dataset import (
    MISSING,
    ContingencyTable,
    Dataset,
    Schema,
    Source,
    concat,
    dataset_to_csv,
    tabulate,
    write_schema,
)
from gluefuse.metrics import frechet_bounds, hellinger, mi_combine, misclassified_count
from gluefuse.sampler import Hyperparams, SamplerConfig, joint_probability, run_chain
from gluefuse.simulation import (
    biased_glue,
    draw_population,
    load_synthetic_spec,
    simulate,
    split_population,
)

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def spec():
    return load_synthetic_spec()


def test_c1_conjugate_oracle():
    t0 = time.perf_counter()
    s = Schema.from_records(
        [{"name": "u", "levels": 2, "role": "A"}, {"name": "v", "levels": 2, "role": "A"}], require_roles=False
    )
    rng = np.random.default_rng(11)
    codes = np.stack([rng.choice([1, 2], 200, p=[0.3, 0.7]), rng.choice([1, 2], 200, p=[0.55, 0.45])], axis=1)
    data = Dataset(s, codes, Source.COMPLETE)
    cfg = SamplerConfig(burn_in=100, n_iterations=2000, thin=1, m=0, seed=5, store_draws=True, draw_thin=1)
    _, summary = run_chain(data, Hyperparams(N=1), cfg)
    elapsed = time.perf_counter() - t0
    assert len(summary.draws) == 2000
    worst = 0.0
    for j in range(2):
        counts = np.bincount(codes[:, j], minlength=3)[1:]
        post = 1.0 + counts
        a0 = post.sum()
        exact = post / a0
        sd = np.sqrt(exact * (1 - exact) / (a0 + 1))
        draws = np.array([d.phi[j][0] for d in summary.draws])
        z = np.abs(draws.mean(axis=0) - exact) / (sd / np.sqrt(len(draws)))
        worst = max(worst, float(z.max()))
    ok = worst <= 3.0 and elapsed < 10
    assert record(1, ok, f"max |mean - exact| = {worst:.2f} MC SE (limit 3), {elapsed:.1f} s (limit 10)")


def test_c2_marginal_pinning():
    t0 = time.perf_counter()
    s = Schema.from_records(
        [
            {"name": "x", "levels": 2, "role": "A"},
            {"name": "b", "levels": 2, "role": "B"},
            {"name": "c", "levels": 3, "role": "Bprime"},
        ]
    )
    rng = np.random.default_rng(3)
    x = np.array([1] * 350 + [2] * 150)
    base = np.stack([x, rng.integers(1, 3, 500), rng.integers(1, 4, 500)], axis=1)
    glue = np.zeros((20000, 3), dtype=np.int64)
    glue[:, 0] = [1] * 10000 + [2] * 10000
    data = concat([Dataset(s, base, Source.COMPLETE), Dataset(s, glue, Source.GLUE)])
    cfg = SamplerConfig(burn_in=300, n_iterations=1000, thin=100, m=0, seed=2, store_draws=True, draw_thin=10)
    _, summary = run_chain(data, Hyperparams(), cfg)
    est = joint_probability(summary.draws, s, {"x": 1})
    elapsed = time.perf_counter() - t0
    ok = 0.48 <= est.mean <= 0.52 and elapsed < 60
    assert record(2, ok, f"posterior P(x=1) = {est.mean:.4f} (target [0.48, 0.52]), {elapsed:.1f} s (limit 60)")


@pytest.mark.slow
def test_c3_glue_richness(spec):
    t0 = time.perf_counter()
    report = simulate(spec, SEEDS, ["richness"])
    elapsed = time.perf_counter() - t0
    rows = {r["label"]: r["hellinger_mean"] for r in report["summary"]["richness"]}
    none = rows["No glue"]
    bb = rows["{B,Bprime}"]
    aa = rows["{A_a,B,Bprime}"]
    full = rows["{A_g,A_a,B,Bprime}"]
    match = rows["Exact matching"]
    rel = abs(match - none) / none
    ok = none > bb > aa >= full and rel <= 0.15 and elapsed < 900
    table = ", ".join(f"{k} {v:.3f}" for k, v in rows.items())
    assert record(3, ok, f"{table}; matching vs no glue {100 * rel:.1f}% (limit 15%), {elapsed:.0f} s")


@pytest.mark.slow
def test_c4_glue_size(spec):
    t0 = time.perf_counter()
    report = simulate(spec, SEEDS, ["size"])
    elapsed = time.perf_counter() - t0
    per_seed = [report["per_seed"][str(s)]["size"] for s in SEEDS]
    n_cells = len(per_seed[0][0]["cells"])
    monotone_cells = 0
    for c in range(n_cells):
        votes = 0
        for rungs in per_seed:
            widths = [r["cells"][c]["width"] for r in rungs]
            votes += all(b <= a for a, b in zip(widths, widths[1:]))
        monotone_cells += votes > len(SEEDS) / 2
    covered = [sum(cell["covered"] for cell in rungs[-1]["cells"]) for rungs in per_seed]
    seeds_ok = sum(k >= 5 for k in covered)
    ok = monotone_cells == n_cells and seeds_ok > len(SEEDS) / 2 and elapsed < 900
    mean_w = [np.mean([c["width"] for c in r["cells"]]) for r in report["summary"]["size"]]
    assert record(
        4,
        ok,
        f"cells non-increasing by seed majority {monotone_cells}/{n_cells}; mean widths "
        + " > ".join(f"{w:.3f}" for w in mean_w)
        + f"; covered cells at 2n per seed {covered} (need >=5 in a majority), {elapsed:.0f} s",
    )


@pytest.mark.slow
def test_c5_bias_diagnostic(spec):
    t0 = time.perf_counter()
    report = simulate(spec, SEEDS, ["bias"])
    elapsed = time.perf_counter() - t0
    bias = report["summary"]["bias"]
    b = bias["B_given_ABprime"]["max_difference"]
    bp = bias["Bprime_given_AB"]["max_difference"]
    ok = (
        all(x <= 0.05 for x in b)
        and all(v == "PASS" for v in bias["B_given_ABprime"]["verdict"])
        and all(x >= 0.10 for x in bp)
        and all(v == "FAIL" for v in bias["Bprime_given_AB"]["verdict"])
        and elapsed < 600
    )
    assert record(
        5,
        ok,
        "B direction max diff " + ", ".join(f"{x:.3f}" for x in b)
        + "; B' direction " + ", ".join(f"{x:.3f}" for x in bp) + f", {elapsed:.0f} s",
    )


# independent brute-force references for criterion 6


def bf_hellinger(p, q):
    mp.mp.dps = 30
    return float(mp.sqrt(mp.fsum((mp.sqrt(mp.mpf(a)) - mp.sqrt(mp.mpf(b))) ** 2 for a, b in zip(p, q)) / 2))


def bf_misclassified(truth, imps):
    per = []
    for imp in imps:
        per.append(0.5 * sum(abs(int(a) - int(b)) for a, b in zip(truth.ravel().tolist(), imp.ravel().tolist())))
    return sum(per) / len(per)


def bf_t_quantile(prob, df):
    mp.mp.dps = 30
    if math.isinf(df):
        return float(mp.sqrt(2) * mp.erfinv(2 * mp.mpf(prob) - 1))
    df = mp.mpf(df)

    def upper_tail(x):
        return mp.betainc(df / 2, mp.mpf(1) / 2, 0, df / (df + x * x), regularized=True) / 2

    return float(mp.findroot(lambda x: upper_tail(x) - (1 - mp.mpf(prob)), 2))


def bf_mi(pairs):
    m = len(pairs)
    q = [a for a, _ in pairs]
    u = [b for _, b in pairs]
    qbar = sum(q) / m
    W = sum(u) / m
    B = sum((x - qbar) ** 2 for x in q) / (m - 1)
    T = W + (1 + 1 / m) * B
    df = math.inf if B == 0 else (m - 1) * (1 + W / ((1 + 1 / m) * B)) ** 2
    half = bf_t_quantile(0.975, df) * math.sqrt(T)
    return qbar, W, B, T, df, qbar - half, qbar + half


def bf_frechet(d1_rows, d2_rows, n_a, db, dbp, conditional):
    def fr(p, q):
        return max(0.0, p + q - 1.0), min(p, q)

    out = {}
    if not conditional:
        pb = [sum(1 for _, b in d1_rows if b == j) / len(d1_rows) for j in range(1, db + 1)]
        pc = [sum(1 for _, c in d2_rows if c == k) / len(d2_rows) for k in range(1, dbp + 1)]
        for j in range(db):
            for k in range(dbp):
                out[(j + 1, k + 1)] = fr(pb[j], pc[k])
        return out
    total = len(d1_rows) + len(d2_rows)
    for j in range(1, db + 1):
        for k in range(1, dbp + 1):
            lo = hi = 0.0
            for a in range(n_a):
                r1 = [b for aa, b in d1_rows if aa == a]
                r2 = [c for aa, c in d2_rows if aa == a]
                w = (len(r1) + len(r2)) / total
                if not w:
                    continue
                if r1 and r2:
                    l, h = fr(r1.count(j) / len(r1), r2.count(k) / len(r2))
                elif r1:
                    l, h = 0.0, r1.count(j) / len(r1)
                else:
                    l, h = 0.0, r2.count(k) / len(r2)
                lo += w * l
                hi += w * h
            out[(j, k)] = (lo, hi)
    return out


def test_c6_metric_oracles():
    rng = np.random.default_rng(606)
    worst = {"hellinger": 0.0, "misclassified": 0.0, "frechet": 0.0, "mi": 0.0, "t": 0.0}
    for _ in range(100):
        k = int(rng.integers(2, 10))
        p = rng.dirichlet(np.full(k, 0.7))
        q = rng.dirichlet(np.full(k, 0.7))
        p[rng.random(k) < 0.2] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
        p /= p.sum()
        worst["hellinger"] = max(worst["hellinger"], abs(hellinger(p, q) - bf_hellinger(p, q)))

        shape = (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        n = int(rng.integers(5, 60))
        truth = rng.multinomial(n, np.full(shape[0] * shape[1], 1 / (shape[0] * shape[1]))).reshape(shape)
        imps = [rng.multinomial(n, rng.dirichlet(np.ones(truth.size))).reshape(shape) for _ in range(int(rng.integers(1, 5)))]
        got = misclassified_count(ContingencyTable(("x", "y"), truth), [ContingencyTable(("x", "y"), t) for t in imps])
        worst["misclassified"] = max(worst["misclassified"], abs(got - bf_misclassified(truth, imps)))

        da, db, dbp = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
        s = Schema.from_records(
            [
                {"name": "a", "levels": da, "role": "A"},
                {"name": "b", "levels": db, "role": "B"},
                {"name": "c", "levels": dbp, "role": "Bprime"},
            ]
        )
        n1, n2 = int(rng.integers(3, 30)), int(rng.integers(3, 30))
        r1 = list(zip(rng.integers(1, da + 1, n1).tolist(), rng.integers(1, db + 1, n1).tolist()))
        r2 = list(zip(rng.integers(1, da + 1, n2).tolist(), rng.integers(1, dbp + 1, n2).tolist()))
        d1 = Dataset(s, np.array([[a, b, 0] for a, b in r1]), Source.D1)
        d2 = Dataset(s, np.array([[a, 0, c] for a, c in r2]), Source.D2)
        for cond in (True, False):
            ref = bf_frechet([(a - 1, b) for a, b in r1], [(a - 1, c) for a, c in r2], da, db, dbp, cond)
            for iv in frechet_bounds(d1, d2, "b", "c", condition_on_A=cond):
                lo, hi = ref[iv.cell]
                worst["frechet"] = max(worst["frechet"], abs(iv.lower - lo), abs(iv.upper - hi))

        m = int(rng.integers(2, 8))
        pairs = [(float(rng.normal(0, 3)), float(rng.gamma(2.0, 0.5))) for _ in range(m)]
        if rng.random() < 0.1:
            pairs = [(1.25, u) for _, u in pairs]
        est = mi_combine(pairs)
        qbar, W, B, T, df, lo, hi = bf_mi(pairs)
        scale = max(1.0, abs(qbar), T)
        worst["mi"] = max(
            worst["mi"],
            abs(est.qbar - qbar) / scale,
            abs(est.within - W) / scale,
            abs(est.between - B) / scale,
            abs(est.total - T) / scale,
            0.0 if math.isinf(df) and math.isinf(est.df) else abs(est.df - df) / max(1.0, df),
        )
        worst["t"] = max(worst["t"], abs(est.lower - lo), abs(est.upper - hi))
    ok = all(worst[k] <= 1e-9 for k in ("hellinger", "misclassified", "frechet", "mi")) and worst["t"] <= 1e-6
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(6, ok, f"max abs error over 100 inputs: {detail} (limits 1e-9, t 1e-6)")


def random_spec(base, rng):
    k = int(rng.integers(1, 6))
    classes = tuple(tuple(rng.dirichlet(np.full(d, 0.6)) for d in base.schema.levels) for _ in range(k))
    return dataclasses.replace(
        base, weights=rng.dirichlet(np.ones(k)), class_probs=classes, n=int(rng.integers(200, 3000))
    )


def test_c7_frechet_envelope(spec):
    rng = np.random.default_rng(707)
    inside = tighter = total = 0
    for r in range(20):
        sp = random_spec(spec, rng)
        pop = draw_population(sp, int(rng.integers(1 << 31)))
        d1 = Dataset(sp.schema, pop.masked(["Bprime"]), Source.D1)
        d2 = Dataset(sp.schema, pop.masked(["B"]), Source.D2)
        truth = tabulate(pop, ["B", "Bprime"]).probabilities()
        cond = frechet_bounds(d1, d2, "B", "Bprime", True)
        unc = frechet_bounds(d1, d2, "B", "Bprime", False)
        for c, u in zip(cond, unc):
            j, k = c.cell
            total += 1
            inside += c.lower - 1e-12 <= truth[j - 1, k - 1] <= c.upper + 1e-12
            tighter += c.width <= u.width + 1e-12
    ok = inside == total and tighter == total
    assert record(7, ok, f"truth inside conditional interval {inside}/{total}; conditional <= unconditional width {tighter}/{total}")


def test_c8_determinism(spec, tmp_path):
    small = dataclasses.replace(spec, n=500)
    pop = draw_population(small, 8)
    d1, d2, _ = split_population(pop, 0.5, 9)
    write_schema(small.schema, tmp_path / "schema.json")
    for name, d in (("d1", d1), ("d2", d2), ("pop", pop)):
        (tmp_path / f"{name}.csv").write_text(dataset_to_csv(d))
    (tmp_path / "bglue.csv").write_text(dataset_to_csv(biased_glue(small, pop, 10)))
    cfg = {
        "schema": "schema.json",
        "d1": "d1.csv",
        "d2": "d2.csv",
        "glue": {"path": "bglue.csv", "mode": "CONSTRUCT_FROM_CONDITIONAL", "direction": "B_given_ABprime"},
        "sampler": {"burn_in": 50, "n_iterations": 100, "thin": 25, "m": 4, "seed": 17},
        "matching": {"key": ["A_g", "A_a"]},
        "metrics": ["frechet"],
        "output_dir": "first",
    }
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    assert cli.main(["fuse", "--config", str(tmp_path / "run.json")]) == 0
    first = tmp_path / "first"
    manifest = first / "manifest.json"
    runs = []
    for name in ("second", "third"):
        assert cli.main(["fuse", "--config", str(manifest), "--output-dir", str(tmp_path / name)]) == 0
        runs.append(tmp_path / name)
    files = sorted(p.name for p in first.iterdir())
    same = all(
        sorted(p.name for p in r.iterdir()) == files
        and all((first / f).read_bytes() == (r / f).read_bytes() for f in files)
        for r in runs
    )
    n_imp = sum(f.startswith("D1_imp") for f in files)
    assert record(8, same and n_imp == 4, f"{len(files)} artifacts byte-identical across 3 runs from one manifest")

"""Truncated Dirichlet-process mixture of products of multinomials.

Gibbs sampler over class allocations, per-class categorical probabilities,
stick-breaking weights and the concentration parameter, with missing cells
imputed from the allocated class. Allocation updates condition only on the
observed columns of each row, so design holes, item nonresponse and glue
rows are all handled the same way.

Class indices are 0-based inside arrays (``state.z``); level codes are
1-based as in :mod:`gluefuse.dataset`.

Seeding contract: ``seed`` feeds ``numpy.random.SeedSequence``; a chain
draws every random number from one ``PCG64`` generator built from it, so
``(seed, data, hyperparams, config)`` fixes every output.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .dataset import GLUE_SOURCES, MISSING, CompletedDataset, Dataset, Schema
from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)

PI_FLOOR = 1e-300
_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class Hyperparams:
    """Prior settings.

    ``dirichlet_a`` holds one concentration vector per schema variable;
    ``None`` means all ones.
    """

    N: int = 30
    a_alpha: float = 0.5
    b_alpha: float = 0.5
    dirichlet_a: tuple | None = None

    def __post_init__(self):
        if isinstance(self.N, bool) or int(self.N) != self.N or self.N < 1:
            raise ValidationError(f"truncation level N must be a positive integer, got {self.N}")
        if not (self.a_alpha > 0 and self.b_alpha > 0):
            raise ValidationError("a_alpha and b_alpha must be strictly positive")
        if self.dirichlet_a is not None:
            vecs = tuple(np.asarray(a, dtype=float) for a in self.dirichlet_a)
            if any((v <= 0).any() or v.ndim != 1 for v in vecs):
                raise ValidationError("Dirichlet hyperparameters must be positive vectors")
            object.__setattr__(self, "dirichlet_a", vecs)

    def prior(self, schema: Schema) -> list[np.ndarray]:
        if self.dirichlet_a is None:
            return [np.ones(d) for d in schema.levels]
        if len(self.dirichlet_a) != schema.p or any(
            len(a) != d for a, d in zip(self.dirichlet_a, schema.levels)
        ):
            raise ValidationError("dirichlet_a must give one vector of length d_j per variable")
        return [np.asarray(a, dtype=float) for a in self.dirichlet_a]

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "a_alpha": self.a_alpha,
            "b_alpha": self.b_alpha,
            "dirichlet_a": None
            if self.dirichlet_a is None
            else [a.tolist() for a in self.dirichlet_a],
        }


@dataclass(frozen=True)
class SamplerConfig:
    """Chain length and output settings.

    The chain runs ``burn_in`` sweeps, then ``max(n_iterations, m * thin)``
    retained sweeps. Completed datasets are emitted at retained sweeps
    ``thin, 2*thin, ..., m*thin``. With ``store_draws`` every
    ``draw_thin``-th retained sweep keeps a copy of ``(pi, phi, alpha)``.
    """

    burn_in: int = 5000
    n_iterations: int = 25000
    thin: int = 500
    seed: int = 0
    m: int = 50
    impute_glue: bool = False
    store_draws: bool = False
    draw_thin: int = 1

    def __post_init__(self):
        for name in ("burn_in", "n_iterations", "m"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.thin < 1 or self.draw_thin < 1:
            raise ValidationError("thin and draw_thin must be at least 1")

    @property
    def retained(self) -> int:
        return max(self.n_iterations, self.m * self.thin)

    def to_dict(self) -> dict:
        return {
            "burn_in": self.burn_in,
            "n_iterations": self.n_iterations,
            "thin": self.thin,
            "seed": self.seed,
            "m": self.m,
            "impute_glue": self.impute_glue,
            "store_draws": self.store_draws,
            "draw_thin": self.draw_thin,
        }


@dataclass(frozen=True)
class ModelState:
    z: np.ndarray
    phi: tuple[np.ndarray, ...]
    V: np.ndarray
    pi: np.ndarray
    alpha: float

    @property
    def N(self) -> int:
        return len(self.pi)

    @property
    def n_star(self) -> int:
        return int(np.unique(self.z).size)

    def check(self, tol: float = 1e-12) -> None:
        """Raise if any simplex or range invariant is broken."""
        if abs(self.pi.sum() - 1) > tol or (self.pi < 0).any():
            raise NumericalError("mixture weights left the simplex")
        for j, ph in enumerate(self.phi):
            if (np.abs(ph.sum(axis=1) - 1) > tol).any() or (ph < 0).any():
                raise NumericalError(f"class probabilities for variable {j} left the simplex")
        if self.z.size and (self.z.min() < 0 or self.z.max() >= self.N):
            raise NumericalError("allocation outside 0..N-1")


@dataclass(frozen=True)
class Draw:
    """Parameter snapshot kept for posterior summaries of joint probabilities."""

    pi: np.ndarray
    phi: tuple[np.ndarray, ...]
    alpha: float


@dataclass
class PosteriorSummary:
    iterations: list[int] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    n_star: list[int] = field(default_factory=list)
    pi: list[np.ndarray] = field(default_factory=list)
    draws: list[Draw] = field(default_factory=list)
    final_state: ModelState | None = None

    def to_jsonl(self, include_pi: bool = False, extra: Mapping | None = None) -> str:
        lines = []
        for k, (it, a, ns) in enumerate(zip(self.iterations, self.alpha, self.n_star)):
            rec = {"iteration": it, "alpha": a, "n_star": ns}
            if include_pi:
                rec["pi"] = self.pi[k].tolist()
            if extra:
                rec.update(extra)
            lines.append(json.dumps(rec))
        return "".join(line + "\n" for line in lines)


class Prepared:
    """Observed-cell index built once per dataset and reused by every sweep.

    Rows sharing an observed pattern share allocation weights, so weights
    are computed per distinct pattern and gathered per row.
    """

    def __init__(self, data: Dataset):
        self.data = data
        self.schema = data.schema
        self.levels = data.schema.levels
        self.n = data.n
        codes = data.codes
        self.obs_rows = []
        self.obs_codes = []
        for j in range(len(self.levels)):
            col = codes[:, j]
            rows = np.flatnonzero(col != MISSING)
            self.obs_rows.append(rows)
            self.obs_codes.append(col[rows] - 1)
        if self.n:
            patterns, inverse = np.unique(codes, axis=0, return_inverse=True)
        else:
            patterns, inverse = np.zeros((0, len(self.levels)), dtype=np.int64), np.zeros(0, int)
        self.pattern_of_row = inverse.reshape(-1)
        # 0-based code with missing mapped to an extra all-zero row of log phi
        self.gather = [np.where(patterns[:, j] == MISSING, d, patterns[:, j] - 1)
                       for j, d in enumerate(self.levels)]
        self.n_patterns = patterns.shape[0]


def prepare(data: Dataset | Prepared) -> Prepared:
    return data if isinstance(data, Prepared) else Prepared(data)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def stick_breaking(V: np.ndarray) -> np.ndarray:
    """Mixture weights ``pi_h = V_h * prod_{j<h} (1 - V_j)``."""
    V = np.asarray(V, dtype=float)
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - V[:-1])))
    return V * remaining


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One 0-based draw per row of a (possibly unnormalized) weight matrix."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _dirichlet_rows(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    g = np.maximum(rng.standard_gamma(conc), _TINY)
    return g / g.sum(axis=1, keepdims=True)


def init_state(data: Dataset | Prepared, hp: Hyperparams, seed) -> ModelState:
    prep = prepare(data)
    rng = make_rng(seed)
    N = hp.N
    alpha0 = hp.a_alpha / hp.b_alpha
    z = rng.integers(0, N, size=prep.n)
    phi = tuple(_dirichlet_rows(rng, np.tile(a, (N, 1))) for a in hp.prior(prep.schema))
    V = np.ones(N)
    if N > 1:
        V[:-1] = rng.beta(1.0, alpha0, size=N - 1)
    return ModelState(z=z, phi=phi, V=V, pi=stick_breaking(V), alpha=alpha0)


def _pattern_loglik(params, prep: Prepared) -> np.ndarray:
    N = len(params.pi)
    ll = np.zeros((prep.n_patterns, N))
    with np.errstate(divide="ignore"):
        for j, ph in enumerate(params.phi):
            table = np.vstack((np.log(ph.T), np.zeros((1, N))))
            ll += table[prep.gather[j]]
    return ll


def log_likelihood(params, data: Dataset | Prepared) -> np.ndarray:
    """``(n, N)`` matrix of log prod over observed columns of phi."""
    prep = prepare(data)
    return _pattern_loglik(params, prep)[prep.pattern_of_row]


def z_probabilities(params, data: Dataset | Prepared, log_space: bool = True) -> np.ndarray:
    """Full-conditional allocation probabilities, one row per record.

    ``log_space=False`` evaluates the products directly; it is kept for
    cross-checking and underflows on long rows.
    """
    prep = prepare(data)
    if not log_space:
        w = np.tile(np.asarray(params.pi, dtype=float), (prep.n, 1))
        for j, ph in enumerate(params.phi):
            rows, c = prep.obs_rows[j], prep.obs_codes[j]
            w[rows] *= ph[:, c].T
        tot = w.sum(axis=1, keepdims=True)
        if (tot <= 0).any():
            raise NumericalError("allocation weights underflowed to zero")
        return w / tot
    with np.errstate(divide="ignore"):
        lw = np.log(params.pi)[None, :] + log_likelihood(params, prep)
    w = _normalized_exp(lw)
    return w / w.sum(axis=1, keepdims=True)


def _normalized_exp(lw: np.ndarray) -> np.ndarray:
    top = lw.max(axis=1, keepdims=True)
    if not np.isfinite(top).all():
        raise NumericalError("a row has zero probability under every class")
    return np.exp(lw - top)


def update_z(state: ModelState, data: Dataset | Prepared, rng) -> ModelState:
    prep = prepare(data)
    rng = make_rng(rng)
    with np.errstate(divide="ignore"):
        lw = np.log(state.pi)[None, :] + _pattern_loglik(state, prep)
    z = _sample_grouped(rng, _normalized_exp(lw), prep.pattern_of_row)
    return replace(state, z=z)


def _sample_grouped(rng: np.random.Generator, weights: np.ndarray, group: np.ndarray) -> np.ndarray:
    """Categorical draw per row, where row ``i`` uses ``weights[group[i]]``.

    Offsetting each normalized CDF by its group index makes one sorted
    array, so all rows are placed with a single ``searchsorted``.
    """
    G, K = weights.shape
    cum = np.cumsum(weights, axis=1)
    cum /= cum[:, -1:]
    flat = (cum + np.arange(G)[:, None]).ravel()
    u = rng.random(group.size)
    idx = np.searchsorted(flat, group + u, side="right") - group * K
    return np.minimum(idx, K - 1)


def phi_posterior(state: ModelState, data: Dataset | Prepared, hp: Hyperparams) -> list[np.ndarray]:
    """Dirichlet concentrations for every class and variable given ``state.z``."""
    prep = prepare(data)
    N = state.N
    out = []
    for j, a in enumerate(hp.prior(prep.schema)):
        d = len(a)
        rows, c = prep.obs_rows[j], prep.obs_codes[j]
        counts = np.bincount(state.z[rows] * d + c, minlength=N * d).reshape(N, d)
        out.append(counts + a[None, :])
    return out


def update_phi(state: ModelState, data: Dataset | Prepared, hp: Hyperparams, rng) -> ModelState:
    rng = make_rng(rng)
    phi = tuple(_dirichlet_rows(rng, conc) for conc in phi_posterior(state, data, hp))
    return replace(state, phi=phi)


def class_counts(z: np.ndarray, N: int) -> np.ndarray:
    return np.bincount(z, minlength=N)


def v_posterior(M: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Beta parameters for ``V_1..V_{N-1}`` given class sizes ``M``."""
    M = np.asarray(M, dtype=float)
    later = M[::-1].cumsum()[::-1] - M
    return M[:-1] + 1.0, alpha + later[:-1]


def update_v_pi(state: ModelState, rng) -> ModelState:
    rng = make_rng(rng)
    N = state.N
    V = np.ones(N)
    if N > 1:
        a, b = v_posterior(class_counts(state.z, N), state.alpha)
        V[:-1] = rng.beta(a, b)
    return replace(state, V=V, pi=stick_breaking(V))


def alpha_posterior(pi_last: float, N: int, hp: Hyperparams) -> tuple[float, float]:
    """Gamma (shape, rate) for the concentration parameter."""
    return N + hp.a_alpha - 1.0, hp.b_alpha - np.log(max(pi_last, PI_FLOOR))


def update_alpha(state: ModelState, hp: Hyperparams, rng) -> ModelState:
    rng = make_rng(rng)
    shape, rate = alpha_posterior(state.pi[-1], state.N, hp)
    alpha = float(rng.gamma(shape, 1.0 / rate))
    if not alpha > 0:
        # gamma draws with tiny shape can round to zero
        alpha = _TINY
    return replace(state, alpha=alpha)


def impute_missing(
    state: ModelState, data: Dataset | Prepared, rng, impute_glue: bool = False
) -> CompletedDataset:
    """Fill missing cells by drawing from each row's allocated class.

    Glue rows are left untouched unless ``impute_glue`` is set.
    """
    prep = prepare(data)
    rng = make_rng(rng)
    base = prep.data
    codes = base.codes.copy()
    eligible = np.ones(base.n, dtype=bool)
    if not impute_glue:
        eligible = ~np.isin(base.sources, GLUE_SOURCES)
    for j, ph in enumerate(state.phi):
        rows = np.flatnonzero((codes[:, j] == MISSING) & eligible)
        if rows.size:
            codes[rows, j] = sample_categorical(rng, ph[state.z[rows]]) + 1
    return CompletedDataset.build(base.schema, codes, base.sources, eligible)


def sweep(state: ModelState, prep: Prepared, hp: Hyperparams, rng) -> ModelState:
    state = update_z(state, prep, rng)
    state = update_phi(state, prep, hp, rng)
    state = update_v_pi(state, rng)
    return update_alpha(state, hp, rng)


def run_chain(
    data: Dataset, hp: Hyperparams, cfg: SamplerConfig
) -> tuple[list[CompletedDataset], PosteriorSummary]:
    """Run one chain and return its completed datasets and trace summary.

    Completed datasets hold the D1/D2 rows (and glue rows too when
    ``cfg.impute_glue`` is set) with every missing cell imputed.
    """
    prep = prepare(data)
    hp.prior(data.schema)
    rng = make_rng(cfg.seed)
    state = init_state(prep, hp, rng)
    keep_rows = np.ones(data.n, dtype=bool)
    if not cfg.impute_glue:
        keep_rows = ~np.isin(data.sources, GLUE_SOURCES)
    summary = PosteriorSummary()
    completed: list[Dataset] = []
    total = cfg.burn_in + cfg.retained
    for it in range(1, total + 1):
        state = sweep(state, prep, hp, rng)
        t = it - cfg.burn_in
        if t <= 0:
            continue
        summary.iterations.append(t)
        summary.alpha.append(state.alpha)
        summary.n_star.append(state.n_star)
        summary.pi.append(state.pi)
        if cfg.store_draws and t % cfg.draw_thin == 0:
            summary.draws.append(Draw(state.pi, state.phi, state.alpha))
        if t % cfg.thin == 0 and len(completed) < cfg.m:
            full = impute_missing(state, prep, rng, impute_glue=cfg.impute_glue)
            completed.append(full.select(keep_rows))
    state.check(1e-9)
    summary.final_state = state
    return completed, summary


def _resolve_assignment(schema: Schema, assignment: Mapping[str, int]) -> list[tuple[int, int]]:
    out = []
    for name, level in assignment.items():
        j = schema.index(name)
        d = schema.levels[j]
        if isinstance(level, bool) or int(level) != level or not 1 <= level <= d:
            raise ValidationError(f"invalid level {level!r} for {name!r} (1..{d})")
        out.append((j, int(level) - 1))
    return out


def _one_joint(params, pairs) -> float:
    w = np.asarray(params.pi, dtype=float).copy()
    for j, y in pairs:
        w = w * params.phi[j][:, y]
    return float(w.sum())


@dataclass(frozen=True)
class JointEstimate:
    mean: float
    lower: float
    upper: float
    draws: np.ndarray

    @property
    def width(self) -> float:
        return self.upper - self.lower


def joint_probability(params, schema: Schema, assignment: Mapping[str, int], level: float = 0.95):
    """Model probability that the named variables take the given levels.

    ``params`` is a single state/draw (returns a float) or a sequence of
    draws (returns a :class:`JointEstimate` with an equal-tailed interval).
    """
    pairs = _resolve_assignment(schema, assignment)
    if hasattr(params, "pi"):
        return _one_joint(params, pairs)
    vals = np.array([_one_joint(p, pairs) for p in params])
    if vals.size == 0:
        raise ValidationError("no posterior draws to summarize")
    tail = (1 - level) / 2
    lo, hi = np.quantile(vals, [tail, 1 - tail])
    return JointEstimate(float(vals.mean()), float(lo), float(hi), vals)


def joint_table(params, schema: Schema, variables: Sequence[str]) -> np.ndarray:
    """Model-implied probability table over ``variables`` for one state or draw."""
    idx = schema.indices(variables)
    letters = "bcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    if len(idx) > len(letters):
        raise ValidationError("too many variables for a dense joint table")
    spec = ",".join(["a"] + [f"a{letters[k]}" for k in range(len(idx))])
    spec += "->" + letters[: len(idx)]
    return np.einsum(spec, params.pi, *[params.phi[j] for j in idx])


@dataclass(frozen=True)
class OccupancyVerdict:
    status: str
    frac_near_truncation: float
    max_n_star: int
    N: int

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "frac_near_truncation": self.frac_near_truncation,
            "max_n_star": self.max_n_star,
            "N": self.N,
        }


def occupancy_check(summary, N: int, margin: int = 2, max_frac: float = 0.05) -> OccupancyVerdict:
    """WARN when more than ``max_frac`` of retained iterates have ``n* >= N - margin``."""
    trace = np.asarray(summary.n_star if hasattr(summary, "n_star") else summary)
    if trace.size == 0:
        raise ValidationError("occupancy check needs a non-empty n* trace")
    frac = float(np.mean(trace >= N - margin))
    status = "WARN" if frac > max_frac else "PASS"
    if status == "WARN":
        log.warning("occupied classes reach %d of N=%d in %.1f%% of iterates", trace.max(), N, 100 * frac)
    return OccupancyVerdict(status, frac, int(trace.max()), N)

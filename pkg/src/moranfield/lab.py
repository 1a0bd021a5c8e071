"""Experiment harness: ensembles, convergence runs, regime scans, residuals.

Chains and their mean-field limit are compared as laws: an ensemble of R
independent chain replicas gives empirical snapshot measures (affine and
constant interpolation), and the limit measure at each checkpoint is the
replicator-flow pushforward of the same R initial draws.  Sharing the
pre-discretization draws pairs the two sides, so the W1 estimate at t = 0
reflects only the count-lattice rounding.

Every replica owns two RNG streams derived from (master_seed, replica,
lane): lane 0 draws the initial point, lane 1 drives the chain.  Results are
therefore independent of replica scheduling and of the parallelism degree.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    ScalingSchedule,
    largest_remainder_counts,
    locate_on_grid,
    simulate_counts_batch,
)
from .errors import (
    ConfigurationError,
    DomainError,
    RegimeError,
    ResolutionError,
)
from .flow import FlowConfig, default_flow_config, pushforward
from .simplex import PayoffMatrix, SimplexPoint, replicator_field_array
from .transport import (
    EmpiricalMeasure,
    coordinate_witness,
    distance_witness,
    w1_dual_lower_bound,
    w1_exact,
)

REPORT_SCHEMA = "moranfield-convergence-report/v1"
REGIME_SCHEMA = "moranfield-regime-report/v1"
TEST_FUNCTION_FAMILY_VERSION = "tf-v1"
BOOTSTRAP_RESAMPLES = 200
_BOOTSTRAP_LANE = 2


# -- initial laws --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InitialLaw:
    """Law of the initial proportions: dirac, dirichlet, or uniform-simplex."""

    kind: str
    dimension: int
    point: np.ndarray | None = None
    concentration: np.ndarray | None = None

    @classmethod
    def dirac(cls, point) -> "InitialLaw":
        p = point if isinstance(point, SimplexPoint) else SimplexPoint(point)
        return cls(kind="dirac", dimension=p.dimension, point=p.coords)

    @classmethod
    def dirichlet(cls, concentration) -> "InitialLaw":
        conc = np.asarray(concentration, dtype=float)
        if conc.ndim != 1 or conc.size < 2 or np.any(conc <= 0):
            raise DomainError(f"dirichlet concentrations must be positive, got {conc!r}")
        return cls(kind="dirichlet", dimension=conc.size, concentration=conc)

    @classmethod
    def uniform(cls, dimension: int) -> "InitialLaw":
        if dimension < 2:
            raise DomainError("uniform law needs dimension >= 2")
        return cls(kind="uniform", dimension=int(dimension))

    def sample_one(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "dirac":
            return self.point.copy()
        if self.kind == "dirichlet":
            return rng.dirichlet(self.concentration)
        return rng.dirichlet(np.ones(self.dimension))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dimension": self.dimension}
        if self.point is not None:
            out["point"] = [float(x) for x in self.point]
        if self.concentration is not None:
            out["concentration"] = [float(x) for x in self.concentration]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "InitialLaw":
        kind = data["kind"]
        if kind == "dirac":
            return cls.dirac(np.asarray(data["point"], dtype=float))
        if kind == "dirichlet":
            return cls.dirichlet(data["concentration"])
        if kind == "uniform":
            return cls.uniform(int(data["dimension"]))
        raise ConfigurationError(f"unknown initial law kind {kind!r}")


def _replica_rng(master_seed: int, replica: int, lane: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(replica), int(lane)))
    return np.random.Generator(np.random.PCG64(seq))


def draw_initial_samples(law: InitialLaw, count: int, master_seed: int) -> np.ndarray:
    """Pre-discretization initial draws, one per replica stream."""
    return np.array([law.sample_one(_replica_rng(master_seed, r, 0)) for r in range(count)])


# -- ensembles ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    """Checkpoint snapshot measures of an R-replica chain ensemble."""

    schedule: ScalingSchedule
    ensemble_size: int
    master_seed: int
    checkpoints: tuple
    affine: dict
    constant: dict
    initial: EmpiricalMeasure
    initial_discretized: EmpiricalMeasure


def _simulate_chunk(args):
    entries, schedule_dict, law_dict, master_seed, r0, r1 = args
    schedule = ScalingSchedule.from_dict(schedule_dict)
    law = InitialLaw.from_dict(law_dict)
    matrix = PayoffMatrix(entries)
    n, k = schedule.population, schedule.resolution
    size = r1 - r0
    lam0 = np.empty((size, law.dimension))
    counts0 = np.empty((size, law.dimension), dtype=np.int64)
    uniforms = np.empty((size, k))
    for offset, r in enumerate(range(r0, r1)):
        lam0[offset] = law.sample_one(_replica_rng(master_seed, r, 0))
        counts0[offset] = largest_remainder_counts(SimplexPoint(lam0[offset]), n)
        uniforms[offset] = _replica_rng(master_seed, r, 1).random(k)
    paths = simulate_counts_batch(counts0, matrix, schedule, uniforms)
    return r0, lam0, paths


def run_ensemble(
    law: InitialLaw,
    matrix: PayoffMatrix,
    schedule: ScalingSchedule,
    ensemble_size: int,
    checkpoints,
    master_seed: int,
    jobs: int = 1,
) -> EnsembleResult:
    """R independent replicas with snapshots through both interpolators.

    Each initial draw is rounded onto the count lattice by largest remainder;
    snapshots are empirical measures over replicas at each checkpoint.  Fully
    reproducible from ``master_seed`` and independent of ``jobs``.
    """
    if ensemble_size < 2:
        raise DomainError(f"ensemble size must be >= 2, got {ensemble_size}")
    if law.dimension != matrix.dimension:
        raise ConfigurationError(
            f"law dimension {law.dimension} != matrix dimension {matrix.dimension}"
        )
    checkpoints = tuple(float(t) for t in checkpoints)
    for t in checkpoints:
        locate_on_grid(t, schedule.horizon, schedule.resolution)

    bounds = np.linspace(0, ensemble_size, min(max(jobs, 1), ensemble_size) + 1, dtype=int)
    chunk_args = [
        (matrix.entries, schedule.to_dict(), law.to_dict(), master_seed, int(a), int(b))
        for a, b in zip(bounds[:-1], bounds[1:])
        if b > a
    ]
    if jobs > 1 and len(chunk_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = sorted(pool.map(_simulate_chunk, chunk_args), key=lambda c: c[0])
    else:
        chunks = [_simulate_chunk(arg) for arg in chunk_args]
    lam0 = np.concatenate([c[1] for c in chunks])
    paths = np.concatenate([c[2] for c in chunks])

    n = schedule.population
    affine, constant = {}, {}
    for t in checkpoints:
        h, frac = locate_on_grid(t, schedule.horizon, schedule.resolution)
        left = paths[:, h] / n
        if frac == 0.0:
            aff = left
        else:
            aff = left + frac * (paths[:, h + 1] / n - left)
        affine[t] = EmpiricalMeasure(aff)
        constant[t] = EmpiricalMeasure(left)
    return EnsembleResult(
        schedule=schedule,
        ensemble_size=ensemble_size,
        master_seed=int(master_seed),
        checkpoints=checkpoints,
        affine=affine,
        constant=constant,
        initial=EmpiricalMeasure(lam0),
        initial_discretized=EmpiricalMeasure(paths[:, 0] / n),
    )


# -- bootstrap -------------------------------------------------------------


def bootstrap_w1_ci(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    rng: np.random.Generator,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
) -> float:
    """Paired-bootstrap half-width (1.96 sigma) for W1 between equal ensembles.

    Replica indices are resampled once per draw and applied to both sides,
    matching the paired construction of chain and limit ensembles.
    """
    from scipy.optimize import linear_sum_assignment
    from scipy.spatial.distance import cdist

    r = mu.size
    if nu.size != r:
        raise ConfigurationError(
            f"paired bootstrap needs equal sizes, got {mu.size} vs {nu.size}"
        )
    dist = cdist(mu.array, nu.array)
    values = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = rng.integers(0, r, size=r)
        sub = dist[np.ix_(idx, idx)]
        rows, cols = linear_sum_assignment(sub)
        values[b] = sub[rows, cols].mean()
    return float(1.96 * values.std(ddof=1))


# -- convergence experiment -------------------------------------------------


@dataclass(frozen=True, eq=False)
class CheckpointRecord:
    t: float
    w1_to_limit: float
    ci_halfwidth: float
    w1_dual_lb: float
    affine_constant_gap: float


@dataclass(frozen=True, eq=False)
class ResolutionRecord:
    resolution: int
    tau: float
    population: int
    selection_weight: float
    checkpoints: list


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    """Per-resolution W1 distances between chain snapshots and the flow limit."""

    alpha: float
    beta: float
    horizon: float
    ensemble_size: int
    master_seed: int
    law: dict
    payoff_matrix: list
    flow_step: float
    resolutions: list
    wall_clock_seconds: float = 0.0

    def payload(self) -> dict:
        """Canonical content; excludes wall clock so identical runs compare equal."""
        return {
            "schema": REPORT_SCHEMA,
            "alpha": self.alpha,
            "beta": self.beta,
            "horizon": self.horizon,
            "ensemble_size": self.ensemble_size,
            "master_seed": self.master_seed,
            "law": self.law,
            "payoff_matrix": self.payoff_matrix,
            "flow_step": self.flow_step,
            "resolutions": [
                {
                    "k": rec.resolution,
                    "tau": rec.tau,
                    "population": rec.population,
                    "selection_weight": rec.selection_weight,
                    "checkpoints": [
                        {
                            "t": c.t,
                            "w1_to_limit": c.w1_to_limit,
                            "ci_halfwidth": c.ci_halfwidth,
                            "w1_dual_lb": c.w1_dual_lb,
                            "affine_constant_gap": c.affine_constant_gap,
                        }
                        for c in rec.checkpoints
                    ],
                }
                for rec in self.resolutions
            ],
        }

    def payload_digest(self) -> str:
        canonical = json.dumps(self.payload(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def to_json(self, path) -> None:
        data = self.payload()
        data["wall_clock_seconds"] = self.wall_clock_seconds
        data["payload_digest"] = self.payload_digest()
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["k", "t", "w1", "ci", "w1_bar_gap", "n_k", "w_k", "tau_k"])
            for rec in self.resolutions:
                for c in rec.checkpoints:
                    writer.writerow(
                        [
                            rec.resolution,
                            f"{c.t:.17g}",
                            f"{c.w1_to_limit:.17g}",
                            f"{c.ci_halfwidth:.17g}",
                            f"{c.affine_constant_gap:.17g}",
                            rec.population,
                            f"{rec.selection_weight:.17g}",
                            f"{rec.tau:.17g}",
                        ]
                    )

    @classmethod
    def from_json(cls, path) -> "ConvergenceReport":
        with open(path) as fh:
            data = json.load(fh)
        if data.get("schema") != REPORT_SCHEMA:
            raise ConfigurationError(f"unexpected report schema {data.get('schema')!r}")
        resolutions = [
            ResolutionRecord(
                resolution=rec["k"],
                tau=rec["tau"],
                population=rec["population"],
                selection_weight=rec["selection_weight"],
                checkpoints=[
                    CheckpointRecord(
                        t=c["t"],
                        w1_to_limit=c["w1_to_limit"],
                        ci_halfwidth=c["ci_halfwidth"],
                        w1_dual_lb=c["w1_dual_lb"],
                        affine_constant_gap=c["affine_constant_gap"],
                    )
                    for c in rec["checkpoints"]
                ],
            )
            for rec in data["resolutions"]
        ]
        return cls(
            alpha=data["alpha"],
            beta=data["beta"],
            horizon=data["horizon"],
            ensemble_size=data["ensemble_size"],
            master_seed=data["master_seed"],
            law=data["law"],
            payoff_matrix=data["payoff_matrix"],
            flow_step=data["flow_step"],
            resolutions=resolutions,
            wall_clock_seconds=data.get("wall_clock_seconds", 0.0),
        )


def _limit_measures(initial, matrix, checkpoints, flow_cfg):
    """Pushforward of the initial samples at each checkpoint (integrated once)."""
    out = {}
    current = initial
    prev_t = 0.0
    for t in sorted(checkpoints):
        current = pushforward(current, matrix, t - prev_t, flow_cfg)
        out[t] = current
        prev_t = t
    return out


def _distance_witnesses(mu, nu):
    m = mu.dimension
    witnesses = [coordinate_witness(i) for i in range(m)]
    witnesses.append(distance_witness(mu.array.mean(axis=0) / mu.array.mean(axis=0).sum()))
    witnesses.append(distance_witness(nu.array.mean(axis=0) / nu.array.mean(axis=0).sum()))
    return witnesses


def convergence_experiment(
    law: InitialLaw,
    matrix: PayoffMatrix,
    base: ScalingSchedule,
    resolutions,
    ensemble_size: int,
    checkpoints,
    master_seed: int,
    flow_cfg: FlowConfig | None = None,
    jobs: int = 1,
) -> ConvergenceReport:
    """Compare chain snapshot laws against the flow pushforward across resolutions.

    ``base`` supplies horizon, exponents and prefactors; its resolution field
    is replaced by each entry of ``resolutions``.  Requires the convergent
    scaling regime ``alpha + beta = 1`` with ``alpha > 1/2``.
    """
    if abs(base.alpha + base.beta - 1.0) > 1e-9 or base.alpha <= 0.5:
        raise RegimeError(
            f"convergence requires alpha + beta = 1 with alpha > 1/2 "
            f"(critical threshold); got alpha={base.alpha}, beta={base.beta}"
        )
    ks = [int(k) for k in resolutions]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigurationError(f"resolutions must be strictly increasing, got {ks}")
    checkpoints = tuple(float(t) for t in checkpoints)
    flow_cfg = flow_cfg or default_flow_config(base.horizon)

    started = time.perf_counter()
    records = []
    limits = None
    for k in ks:
        schedule = ScalingSchedule(
            horizon=base.horizon,
            resolution=k,
            alpha=base.alpha,
            beta=base.beta,
            n_floor=base.n_floor,
            n_scale=base.n_scale,
            w_scale=base.w_scale,
        )
        ensemble = run_ensemble(
            law, matrix, schedule, ensemble_size, checkpoints, master_seed, jobs=jobs
        )
        if limits is None:
            # initial draws are keyed by (master_seed, replica) only, so the
            # pushforward side is shared by all resolutions
            limits = _limit_measures(ensemble.initial, matrix, checkpoints, flow_cfg)
        rows = []
        for idx, t in enumerate(checkpoints):
            chain = ensemble.affine[t]
            limit = limits[t]
            dist, _ = w1_exact(chain, limit)
            ci = bootstrap_w1_ci(
                chain, limit, _replica_rng(master_seed, idx, _BOOTSTRAP_LANE + k)
            )
            dual = w1_dual_lower_bound(chain, limit, _distance_witnesses(chain, limit))
            gap, _ = w1_exact(ensemble.affine[t], ensemble.constant[t])
            rows.append(
                CheckpointRecord(
                    t=t,
                    w1_to_limit=float(dist),
                    ci_halfwidth=float(ci),
                    w1_dual_lb=float(dual),
                    affine_constant_gap=float(gap),
                )
            )
        records.append(
            ResolutionRecord(
                resolution=k,
                tau=schedule.tau,
                population=schedule.population,
                selection_weight=schedule.selection_weight,
                checkpoints=rows,
            )
        )
    return ConvergenceReport(
        alpha=base.alpha,
        beta=base.beta,
        horizon=base.horizon,
        ensemble_size=int(ensemble_size),
        master_seed=int(master_seed),
        law=law.to_dict(),
        payoff_matrix=matrix.to_rows(),
        flow_step=flow_cfg.step_size,
        resolutions=records,
        wall_clock_seconds=time.perf_counter() - started,
    )


# -- regime experiment -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegimeRecord:
    resolution: int
    tau: float
    population: int
    selection_weight: float
    drift_scale: float
    w1_start_end: float
    ci_halfwidth: float
    mean_displacement_rate: float


@dataclass(frozen=True, eq=False)
class RegimeReport:
    """Start-to-end displacement of the chain law across resolutions."""

    alpha: float
    beta: float
    horizon: float
    classification: str
    ensemble_size: int
    master_seed: int
    law: dict
    payoff_matrix: list
    records: list

    def payload(self) -> dict:
        return {
            "schema": REGIME_SCHEMA,
            "alpha": self.alpha,
            "beta": self.beta,
            "horizon": self.horizon,
            "classification": self.classification,
            "ensemble_size": self.ensemble_size,
            "master_seed": self.master_seed,
            "law": self.law,
            "payoff_matrix": self.payoff_matrix,
            "records": [
                {
                    "k": r.resolution,
                    "tau": r.tau,
                    "population": r.population,
                    "selection_weight": r.selection_weight,
                    "drift_scale": r.drift_scale,
                    "w1_start_end": r.w1_start_end,
                    "ci_halfwidth": r.ci_halfwidth,
                    "mean_displacement_rate": r.mean_displacement_rate,
                }
                for r in self.records
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.payload(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(
                ["k", "tau_k", "n_k", "w_k", "drift_scale", "w1_start_end", "ci", "mean_displacement_rate"]
            )
            for r in self.records:
                writer.writerow(
                    [
                        r.resolution,
                        f"{r.tau:.17g}",
                        r.population,
                        f"{r.selection_weight:.17g}",
                        f"{r.drift_scale:.17g}",
                        f"{r.w1_start_end:.17g}",
                        f"{r.ci_halfwidth:.17g}",
                        f"{r.mean_displacement_rate:.17g}",
                    ]
                )


def classify_regime(alpha: float, beta: float, tol: float = 1e-9) -> str:
    """"frozen" if alpha+beta > 1 (drift vanishes), "critical" at 1, else "divergent"."""
    total = alpha + beta
    if total > 1.0 + tol:
        return "frozen"
    if total < 1.0 - tol:
        return "divergent"
    return "critical"


def regime_experiment(
    law: InitialLaw,
    matrix: PayoffMatrix,
    alpha: float,
    beta: float,
    resolutions,
    ensemble_size: int,
    master_seed: int,
    horizon: float = 1.0,
    n_scale: float = 1.0,
    w_scale: float = 1.0,
    jobs: int = 1,
) -> RegimeReport:
    """Measure the start-to-end drift of the chain law for given exponents.

    Reports the predicted per-unit-time drift magnitude ``w_k / (N_k tau_k)``
    next to the observed W1 between the laws at t = 0 and t = horizon.
    """
    if alpha <= 0 or beta < 0:
        raise DomainError(f"alpha must be > 0 and beta >= 0, got {alpha}, {beta}")
    records = []
    for k in resolutions:
        schedule = ScalingSchedule(
            horizon=horizon,
            resolution=int(k),
            alpha=alpha,
            beta=beta,
            n_scale=n_scale,
            w_scale=w_scale,
        )
        ensemble = run_ensemble(
            law, matrix, schedule, ensemble_size, (0.0, horizon), master_seed, jobs=jobs
        )
        start = ensemble.constant[0.0]
        end = ensemble.constant[horizon]
        dist, _ = w1_exact(start, end)
        ci = bootstrap_w1_ci(start, end, _replica_rng(master_seed, int(k), _BOOTSTRAP_LANE))
        displacement = float(
            np.linalg.norm(end.array - start.array, axis=1).mean() / horizon
        )
        records.append(
            RegimeRecord(
                resolution=int(k),
                tau=schedule.tau,
                population=schedule.population,
                selection_weight=schedule.selection_weight,
                drift_scale=schedule.selection_weight
                / (schedule.population * schedule.tau),
                w1_start_end=float(dist),
                ci_halfwidth=float(ci),
                mean_displacement_rate=displacement,
            )
        )
    return RegimeReport(
        alpha=float(alpha),
        beta=float(beta),
        horizon=float(horizon),
        classification=classify_regime(alpha, beta),
        ensemble_size=int(ensemble_size),
        master_seed=int(master_seed),
        law=law.to_dict(),
        payoff_matrix=matrix.to_rows(),
        records=records,
    )


# -- test functions and the weak-form residual --------------------------------


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Smooth test function ``phi(t, lam) = window(t) * polynomial(lam)``.

    ``window(t) = (1 - t/horizon)**power`` vanishes at the horizon, and the
    polynomial is a sum of monomials ``coef * prod_i lam_i**e_i`` given as
    ``(coef, exponents)`` pairs.  Time derivative and gradient are exact.
    """

    __test__ = False  # not a pytest class, despite the name

    name: str
    horizon: float
    window_power: int
    monomials: tuple
    version: str = TEST_FUNCTION_FAMILY_VERSION

    def _window(self, t: float) -> float:
        return (1.0 - t / self.horizon) ** self.window_power

    def _window_dt(self, t: float) -> float:
        if self.window_power == 0:
            return 0.0
        return (
            -self.window_power
            / self.horizon
            * (1.0 - t / self.horizon) ** (self.window_power - 1)
        )

    def _poly(self, pts: np.ndarray) -> np.ndarray:
        out = np.zeros(pts.shape[0])
        for coef, exps in self.monomials:
            term = np.full(pts.shape[0], coef)
            for i, e in enumerate(exps):
                if e:
                    term = term * pts[:, i] ** e
            out += term
        return out

    def _poly_grad(self, pts: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(pts)
        for coef, exps in self.monomials:
            for i, e in enumerate(exps):
                if not e:
                    continue
                term = np.full(pts.shape[0], coef * e)
                for j, ej in enumerate(exps):
                    power = ej - 1 if j == i else ej
                    if power:
                        term = term * pts[:, j] ** power
                grad[:, i] += term
        return grad

    def value(self, t: float, pts: np.ndarray) -> np.ndarray:
        return self._window(t) * self._poly(np.atleast_2d(pts))

    def time_derivative(self, t: float, pts: np.ndarray) -> np.ndarray:
        return self._window_dt(t) * self._poly(np.atleast_2d(pts))

    def gradient(self, t: float, pts: np.ndarray) -> np.ndarray:
        return self._window(t) * self._poly_grad(np.atleast_2d(pts))

    def check_derivatives(self, rng: np.random.Generator, samples: int = 20) -> None:
        """Central finite differences must match the exact derivatives (1e-6 relative)."""
        m = len(self.monomials[0][1])
        h = 1e-5
        for _ in range(samples):
            t = float(rng.uniform(0.0 + h, self.horizon - h))
            lam = rng.dirichlet(np.ones(m))[None, :]
            fd_t = (self.value(t + h, lam) - self.value(t - h, lam)) / (2 * h)
            exact_t = self.time_derivative(t, lam)
            scale = max(1.0, abs(float(exact_t[0])))
            if abs(float(fd_t[0] - exact_t[0])) > 1e-6 * scale:
                raise DomainError(f"time derivative of {self.name} fails the check")
            grad = self.gradient(t, lam)[0]
            for i in range(m):
                bumped = lam.copy()
                bumped[0, i] += h
                dipped = lam.copy()
                dipped[0, i] -= h
                fd = (self._poly(bumped) - self._poly(dipped)) / (2 * h) * self._window(t)
                scale = max(1.0, abs(grad[i]))
                if abs(float(fd[0]) - grad[i]) > 1e-6 * scale:
                    raise DomainError(f"gradient of {self.name} fails the check")


def standard_test_functions(dimension: int, horizon: float) -> list[TestFunction]:
    """Fixed, versioned family of three test functions (degrees 1, 2, 3)."""
    first = np.zeros(dimension, dtype=int)
    first[0] = 1
    second = np.zeros(dimension, dtype=int)
    second[0] = 1
    second[1] = 1
    third = np.zeros(dimension, dtype=int)
    third[0] = 2
    third[1] = 1
    return [
        TestFunction("linear_window", horizon, 1, ((1.0, tuple(first)),)),
        TestFunction("bilinear_window2", horizon, 2, ((1.0, tuple(second)),)),
        TestFunction("cubic_window", horizon, 1, ((1.0, tuple(third)),)),
    ]


@dataclass(frozen=True, eq=False)
class ResidualEstimate:
    """Absolute weak-form residual with a bootstrap confidence half-width."""

    value: float
    ci_halfwidth: float
    node_count: int
    per_replica: np.ndarray = field(repr=False, default=None)


def _residual_from_contributions(contributions: np.ndarray, rng) -> ResidualEstimate:
    values = np.empty(BOOTSTRAP_RESAMPLES)
    r = contributions.size
    for b in range(BOOTSTRAP_RESAMPLES):
        values[b] = abs(contributions[rng.integers(0, r, size=r)].mean())
    return ResidualEstimate(
        value=float(abs(contributions.mean())),
        ci_halfwidth=float(1.96 * values.std(ddof=1)),
        node_count=0,
        per_replica=contributions,
    )


def weak_form_residual(
    ensemble: EnsembleResult, matrix: PayoffMatrix, phi: TestFunction
) -> ResidualEstimate:
    """Monte Carlo + trapezoid estimate of the continuity-equation defect.

    Sums the time integral of the affine-law average of ``d_t phi``, the time
    integral of the constant-law average of ``grad phi . b``, and the initial
    term ``mean phi(0, .)``; for the exact transported law the three cancel.
    The ensemble's checkpoints serve as quadrature nodes and must span
    ``[0, horizon]`` with at least 16 nodes.
    """
    nodes = sorted(ensemble.checkpoints)
    if len(nodes) < 16:
        raise ResolutionError(
            f"time quadrature needs at least 16 nodes, got {len(nodes)}"
        )
    if abs(nodes[0]) > 1e-12 or abs(nodes[-1] - ensemble.schedule.horizon) > 1e-12:
        raise ConfigurationError("quadrature nodes must span [0, horizon]")
    r = ensemble.ensemble_size
    dt_vals = np.empty((len(nodes), r))
    adv_vals = np.empty((len(nodes), r))
    for row, t in enumerate(nodes):
        aff = ensemble.affine[t].array
        con = ensemble.constant[t].array
        dt_vals[row] = phi.time_derivative(t, aff)
        adv_vals[row] = np.einsum(
            "rm,rm->r", phi.gradient(t, con), replicator_field_array(con, matrix.entries)
        )
    xs = np.asarray(nodes)
    contributions = (
        np.trapezoid(dt_vals, xs, axis=0)
        + np.trapezoid(adv_vals, xs, axis=0)
        + phi.value(0.0, ensemble.affine[nodes[0]].array)
    )
    est = _residual_from_contributions(
        contributions, _replica_rng(ensemble.master_seed, 0, _BOOTSTRAP_LANE + 1)
    )
    return ResidualEstimate(
        value=est.value,
        ci_halfwidth=est.ci_halfwidth,
        node_count=len(nodes),
        per_replica=est.per_replica,
    )


_FLOOR_LANES = (10, 11, 12)


def _flow_term_values(law, matrix, nodes, ensemble_size, master_seed, lane, flow_cfg):
    samples = np.array(
        [
            law.sample_one(_replica_rng(master_seed, r, lane))
            for r in range(ensemble_size)
        ]
    )
    return _limit_measures(EmpiricalMeasure(samples), matrix, nodes, flow_cfg)


def residual_floor(
    law: InitialLaw,
    matrix: PayoffMatrix,
    schedule: ScalingSchedule,
    ensemble_size: int,
    checkpoints,
    master_seed: int,
    phi: TestFunction,
    flow_cfg: FlowConfig | None = None,
) -> ResidualEstimate:
    """Statistical floor of the residual estimator under the exact dynamics.

    The three weak-form terms are estimated from three independent replica
    sets transported by the exact flow.  The transported law satisfies the
    identity exactly, so nothing survives except Monte Carlo noise at
    ensemble size R (plus time quadrature): the level below which a measured
    residual is indistinguishable from zero.  (A single shared replica set
    would telescope pathwise and report only quadrature error.)
    """
    nodes = sorted(float(t) for t in checkpoints)
    if len(nodes) < 16:
        raise ResolutionError(f"time quadrature needs at least 16 nodes, got {len(nodes)}")
    flow_cfg = flow_cfg or default_flow_config(schedule.horizon)
    xs = np.asarray(nodes)
    r = ensemble_size

    states_dt = _flow_term_values(
        law, matrix, nodes, r, master_seed, _FLOOR_LANES[0], flow_cfg
    )
    states_adv = _flow_term_values(
        law, matrix, nodes, r, master_seed, _FLOOR_LANES[1], flow_cfg
    )
    initial = np.array(
        [law.sample_one(_replica_rng(master_seed, i, _FLOOR_LANES[2])) for i in range(r)]
    )

    dt_vals = np.empty((len(nodes), r))
    adv_vals = np.empty((len(nodes), r))
    for row, t in enumerate(nodes):
        dt_vals[row] = phi.time_derivative(t, states_dt[t].array)
        pts = states_adv[t].array
        adv_vals[row] = np.einsum(
            "rm,rm->r", phi.gradient(t, pts), replicator_field_array(pts, matrix.entries)
        )
    term_dt = np.trapezoid(dt_vals, xs, axis=0)
    term_adv = np.trapezoid(adv_vals, xs, axis=0)
    term_init = phi.value(0.0, initial)

    rng = _replica_rng(master_seed, 1, _BOOTSTRAP_LANE + 1)
    values = np.empty(BOOTSTRAP_RESAMPLES)
    for b in range(BOOTSTRAP_RESAMPLES):
        values[b] = abs(
            term_dt[rng.integers(0, r, size=r)].mean()
            + term_adv[rng.integers(0, r, size=r)].mean()
            + term_init[rng.integers(0, r, size=r)].mean()
        )
    return ResidualEstimate(
        value=float(abs(term_dt.mean() + term_adv.mean() + term_init.mean())),
        ci_halfwidth=float(1.96 * values.std(ddof=1)),
        node_count=len(nodes),
        per_replica=None,
    )


def quadrature_checkpoints(schedule: ScalingSchedule, stride: int = 1) -> tuple:
    """Grid times t_h thinned by ``stride`` (horizon always included)."""
    times = schedule.times()[::stride]
    if times[-1] != schedule.horizon:
        times = np.append(times, schedule.horizon)
    return tuple(float(t) for t in times)

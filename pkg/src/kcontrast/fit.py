"""Minimum-contrast fitting of intensity parameters.

The discrepancy objective integrates the squared gap between the
intensity-weighted K estimate and the Poisson reference over the lag
grid; a radial penalty (zero on a sphere of radius R around the first
stage estimate) exposes and repairs flat, non-identifiable directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid

from .kstat import LocalPairIndex, PairIndex, poisson_reference
from .model import IntensityModel, LagGrid, PointPattern
from .simulate import stream_rng

__all__ = [
    "ContrastConfig",
    "PenaltyConfig",
    "FitResult",
    "LocalFitResult",
    "MinimizeOptions",
    "CurvatureSE",
    "FitError",
    "contrast_objective",
    "local_objective",
    "penalty_term",
    "minimize",
    "estimate_se",
    "fit_global",
    "fit_local",
    "fit_penalized_path",
    "default_theta_init",
]


class FitError(RuntimeError):
    """Raised when no optimizer restart produced a finite objective."""


@dataclass(frozen=True)
class ContrastConfig:
    """Lag grid, lag weight function and quadrature rule of the objective.

    ``phi`` is one of the named choices ``"constant"`` / ``"inverse-square"``
    (r^-2) or a table of non-negative weights with the grid's shape.
    """

    grid: LagGrid
    phi: object = "constant"
    integrator: str = "trapezoid"

    def __post_init__(self):
        if self.integrator != "trapezoid":
            raise ValueError("only the trapezoid integrator is implemented")
        self.phi_values(validate=True)

    def phi_values(self, validate: bool = False) -> np.ndarray:
        grid = self.grid
        if isinstance(self.phi, str):
            if self.phi == "constant":
                values = np.ones(grid.shape)
            elif self.phi == "inverse-square":
                values = 1.0 / grid.r_values**2
                if grid.is_spatiotemporal:
                    values = np.repeat(values[:, None], len(grid.h_values), axis=1)
            else:
                raise ValueError(f"unknown phi choice {self.phi!r}")
        else:
            values = np.asarray(self.phi, dtype=float)
            if values.shape != grid.shape:
                raise ValueError(f"phi table shape {values.shape} != grid shape {grid.shape}")
        if validate and (np.any(values < 0) or not np.all(np.isfinite(values))):
            raise ValueError("phi must be non-negative and finite on the grid")
        return values


@dataclass(frozen=True)
class PenaltyConfig:
    """Radial penalty tau * (||theta - center|| - R)^2."""

    R: float
    tau: float | None = None
    center: np.ndarray | None = None

    def __post_init__(self):
        if self.R <= 0:
            raise ValueError("R must be positive")
        tau = 1.0 / self.R**2 if self.tau is None else float(self.tau)
        if tau <= 0:
            raise ValueError("tau must be positive")
        object.__setattr__(self, "tau", tau)
        if self.center is not None:
            object.__setattr__(self, "center", np.asarray(self.center, dtype=float))


def penalty_term(theta, config: PenaltyConfig) -> float:
    """tau * (||theta - center||_2 - R)^2; zero exactly on the sphere."""
    if config.center is None:
        raise ValueError("penalty has no center")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != config.center.shape:
        raise ValueError("theta and penalty center lengths differ")
    dist = float(np.linalg.norm(theta - config.center))
    return config.tau * (dist - config.R) ** 2


@dataclass
class FitResult:
    """Outcome of one minimization: estimates, curvature standard errors
    and bookkeeping.  ``std_errors`` carries NaN where undefined (the
    identifiability signal); ``hessian_singular`` flags a (near-)singular
    curvature matrix at the optimum."""

    theta_hat: np.ndarray
    objective_value: float
    std_errors: np.ndarray
    converged: bool
    n_evals: int
    penalty: PenaltyConfig | None = None
    hessian_singular: bool = False
    seed: int | None = None

    def to_dict(self) -> dict:
        pen = None
        if self.penalty is not None:
            pen = {
                "R": self.penalty.R,
                "tau": self.penalty.tau,
                "center": None if self.penalty.center is None else self.penalty.center.tolist(),
            }
        se = [None if not math.isfinite(v) else v for v in np.asarray(self.std_errors, float)]
        return {
            "theta_hat": np.asarray(self.theta_hat, float).tolist(),
            "std_errors": se,
            "objective": self.objective_value,
            "converged": bool(self.converged),
            "n_evals": int(self.n_evals),
            "penalty": pen,
            "seed": self.seed,
        }


@dataclass
class LocalFitResult:
    """Per-point fit results aligned with the pattern indices; failed
    points keep a placeholder result with NaN estimates.

    ``stage1_results`` is populated by penalized runs when asked to keep
    the intermediate unpenalized fits.
    """

    results: list[FitResult]
    failed_indices: list[int] = field(default_factory=list)
    stage1_results: list[FitResult] | None = None

    def __len__(self) -> int:
        return len(self.results)

    def thetas(self) -> np.ndarray:
        return np.vstack([r.theta_hat for r in self.results])

    @property
    def n_failed(self) -> int:
        return len(self.failed_indices)


class ContrastProblem:
    """Cached machinery for repeated objective evaluations on one pattern.

    Binning the pairs once makes each evaluation an exp over the points,
    a gather-multiply over the retained pairs and a cumulative bincount.
    """

    def __init__(self, pattern: PointPattern, model: IntensityModel, config: ContrastConfig):
        if pattern.n < 2:
            raise ValueError("fitting needs at least two points")
        self.pattern = pattern
        self.model = model
        self.config = config
        self.grid = config.grid
        self.pairs = PairIndex(pattern, self.grid)
        self.design = model.design_matrix(pattern.coords)
        self.reference = poisson_reference(self.grid.r_values, self.grid.h_values)
        self.phi = config.phi_values()
        v = pattern.window.volume
        from .kstat import _global_inhom_constant

        self._constant = _global_inhom_constant(pattern, self.grid)

    def weighted_k(self, theta) -> np.ndarray:
        lam = np.exp(self.design @ np.asarray(theta, dtype=float))
        pair_w = 1.0 / (lam[self.pairs.i] * lam[self.pairs.j])
        return self._constant * self.pairs.accumulate(pair_w)

    def _integrate(self, integrand: np.ndarray) -> float:
        if self.grid.is_spatiotemporal:
            inner = trapezoid(integrand, self.grid.h_values, axis=1)
            return float(trapezoid(inner, self.grid.r_values))
        return float(trapezoid(integrand, self.grid.r_values))

    def objective(self, theta) -> float:
        """Integrated squared weighted discrepancy; +inf when the
        intensity overflows (the optimizer treats it as a bad point)."""
        logl = self.design @ np.asarray(theta, dtype=float)
        if np.any(logl > 700):  # exp would overflow
            return np.inf
        lam = np.exp(logl)
        pair_w = 1.0 / (lam[self.pairs.i] * lam[self.pairs.j])
        if not np.all(np.isfinite(pair_w)):
            return np.inf
        k = self._constant * self.pairs.accumulate(pair_w)
        return self._integrate(self.phi * (k - self.reference) ** 2)


class LocalContrastProblem:
    """Per-point analogue of ContrastProblem built on LocalPairIndex."""

    def __init__(
        self,
        pattern: PointPattern,
        model: IntensityModel,
        config: ContrastConfig,
        phi_per_point=None,
    ):
        if pattern.n < 2:
            raise ValueError("fitting needs at least two points")
        self.pattern = pattern
        self.model = model
        self.config = config
        self.grid = config.grid
        self.local = LocalPairIndex(pattern, self.grid)
        self.design = model.design_matrix(pattern.coords)
        self.reference = poisson_reference(self.grid.r_values, self.grid.h_values)
        self.phi = config.phi_values()
        self.phi_per_point = phi_per_point
        from .kstat import _local_constant

        self._constant = _local_constant(pattern, self.grid, homogeneous=False)

    def _phi_for(self, i: int) -> np.ndarray:
        if self.phi_per_point is None:
            return self.phi
        return np.asarray(self.phi_per_point[i], dtype=float)

    def point_objective(self, i: int):
        """Closure evaluating the point-i objective; all pattern-dependent
        pieces are precomputed so one call is a matvec, an exp and a
        cumulative bincount."""
        nbr, bins = self.local.neighbours(i)
        summed_design = self.design[i] + self.design[nbr]  # exponent of lam_i * lam_j
        phi = self._phi_for(i)
        ref = self.reference
        constant = self._constant
        n_bins = self.local._n_bins
        grid = self.grid
        spatiotemporal = grid.is_spatiotemporal
        shape = grid.shape
        r_values, h_values = grid.r_values, grid.h_values

        def objective(theta) -> float:
            logw = summed_design @ np.asarray(theta, dtype=float)
            if logw.size and np.any(logw < -700):
                return np.inf
            w = np.exp(-logw)
            counts = np.bincount(bins, weights=w, minlength=n_bins)
            if spatiotemporal:
                k = constant * counts.reshape(shape).cumsum(axis=0).cumsum(axis=1)
                integrand = phi * (k - ref) ** 2
                return float(trapezoid(trapezoid(integrand, h_values, axis=1), r_values))
            k = constant * counts.cumsum()
            return float(trapezoid(phi * (k - ref) ** 2, r_values))

        return objective

    def objective(self, theta, i: int) -> float:
        return self.point_objective(i)(theta)


def contrast_objective(pattern, model, theta, config: ContrastConfig) -> float:
    """Value of the global contrast objective at ``theta``.

    Evaluates the weighting intensity at the points, forms the weighted K
    estimate and integrates the phi-weighted squared gap to the Poisson
    reference over the lag grid.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    model.intensity(pattern.coords, theta)  # raises on overflow / non-positive
    return ContrastProblem(pattern, model, config).objective(theta)


def local_objective(pattern, model, theta, i: int, config: ContrastConfig, phi_i=None) -> float:
    """Value of the per-point contrast objective for point ``i``."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    if not 0 <= i < pattern.n:
        raise IndexError(f"point index {i} out of range for n={pattern.n}")
    model.intensity(pattern.coords, theta)
    phi_per_point = None if phi_i is None else {i: phi_i}
    return LocalContrastProblem(pattern, model, config, phi_per_point).objective(theta, i)


@dataclass(frozen=True)
class MinimizeOptions:
    """Controls for the derivative-free search: number of jittered
    restarts, jitter scale, initial simplex step and the Nelder-Mead
    tolerances.

    The default initial step keeps each restart local to its start; the
    two-stage procedure relies on stage 1 staying near the moment start
    (global exploration is the job of the stage-2 radial displacement).
    """

    restarts: int = 5
    jitter: float = 1.0
    initial_step: float = 0.1
    tol_x: float = 1e-6
    tol_f: float = 1e-9
    max_evals: int = 2000
    seed: int = 0


def _initial_simplex(x0: np.ndarray, step: float) -> np.ndarray:
    p = len(x0)
    simplex = np.tile(x0, (p + 1, 1))
    for j in range(p):
        simplex[j + 1, j] += step
    return simplex


def stream_seed(seed: int, *indices: int) -> int:
    """Deterministic child seed for a sub-task of a seeded computation."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(i) for i in indices))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _nelder_mead(f, x0: np.ndarray, step: float, tol_x: float, tol_f: float, max_evals: int):
    """Standard Nelder-Mead simplex descent.

    Terminates as converged when the simplex diameter drops below tol_x
    OR its objective spread drops below tol_f, whichever happens first;
    otherwise stops unconverged at the evaluation budget.
    """
    p = len(x0)
    simplex = _initial_simplex(x0, step)
    fvals = np.empty(p + 1)
    evals = 0
    for k in range(p + 1):
        fvals[k] = f(simplex[k])
    evals += p + 1
    converged = False
    while evals < max_evals:
        order = np.argsort(fvals)
        simplex, fvals = simplex[order], fvals[order]
        diameter = float(np.max(np.linalg.norm(simplex[1:] - simplex[0], axis=1)))
        spread = fvals[-1] - fvals[0]
        if diameter < tol_x or (math.isfinite(spread) and spread < tol_f):
            converged = True
            break
        centroid = simplex[:-1].mean(axis=0)
        reflected = centroid + (centroid - simplex[-1])
        f_r = f(reflected)
        evals += 1
        if f_r < fvals[0]:
            expanded = centroid + 2.0 * (centroid - simplex[-1])
            f_e = f(expanded)
            evals += 1
            if f_e < f_r:
                simplex[-1], fvals[-1] = expanded, f_e
            else:
                simplex[-1], fvals[-1] = reflected, f_r
            continue
        if f_r < fvals[-2]:
            simplex[-1], fvals[-1] = reflected, f_r
            continue
        if f_r < fvals[-1]:  # outside contraction
            contracted = centroid + 0.5 * (reflected - centroid)
        else:  # inside contraction
            contracted = centroid - 0.5 * (centroid - simplex[-1])
        f_c = f(contracted)
        evals += 1
        if f_c < min(f_r, fvals[-1]):
            simplex[-1], fvals[-1] = contracted, f_c
            continue
        # shrink toward the best vertex
        simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
        for k in range(1, p + 1):
            fvals[k] = f(simplex[k])
        evals += p
    best = int(np.argmin(fvals))
    return simplex[best], float(fvals[best]), evals, converged


def minimize(objective, theta_init, options: MinimizeOptions | None = None, starts=None) -> FitResult:
    """Nelder-Mead descent with restarts; returns the best restart.

    Restarts use jittered copies of ``theta_init`` unless explicit
    ``starts`` are supplied.  Raises FitError if every restart ends on a
    non-finite objective value.
    """
    opts = options or MinimizeOptions()
    theta_init = np.atleast_1d(np.asarray(theta_init, dtype=float))
    rng = stream_rng(opts.seed, 91)
    if starts is None:
        starts = [theta_init] + [
            theta_init + opts.jitter * rng.standard_normal(len(theta_init))
            for _ in range(opts.restarts - 1)
        ]
    best = None
    total_evals = 0
    for x0 in starts:
        x0 = np.asarray(x0, dtype=float)
        x, fx, evals, converged = _nelder_mead(
            objective, x0, opts.initial_step, opts.tol_x, opts.tol_f, opts.max_evals
        )
        total_evals += evals
        if not math.isfinite(fx):
            continue
        if best is None or fx < best[1]:
            best = (x, fx, converged)
    if best is None:
        raise FitError("all restarts produced a non-finite objective")
    return FitResult(
        theta_hat=np.asarray(best[0], dtype=float),
        objective_value=float(best[1]),
        std_errors=np.full(len(theta_init), np.nan),
        converged=bool(best[2]),
        n_evals=total_evals,
        seed=opts.seed,
    )


@dataclass
class CurvatureSE:
    """Curvature standard errors: sqrt of the diagonal of a pseudo-inverse
    of the finite-difference Hessian.  Not a calibrated covariance."""

    values: np.ndarray
    singular: bool
    hessian: np.ndarray


def estimate_se(objective, theta_hat, step_scale: float = 1e-4) -> CurvatureSE:
    """Central finite-difference Hessian at ``theta_hat`` and the implied
    standard errors; undefined components come back as NaN and a
    (near-)singular Hessian is flagged rather than masked."""
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    p = len(theta)
    steps = step_scale * (1.0 + np.abs(theta))
    h = np.zeros((p, p))
    f0 = objective(theta)

    def at(offsets):
        return objective(theta + offsets)

    for j in range(p):
        ej = np.zeros(p)
        ej[j] = steps[j]
        h[j, j] = (at(ej) - 2.0 * f0 + at(-ej)) / steps[j] ** 2
        for k in range(j + 1, p):
            ek = np.zeros(p)
            ek[k] = steps[k]
            mixed = (at(ej + ek) - at(ej - ek) - at(-ej + ek) + at(-ej - ek)) / (
                4.0 * steps[j] * steps[k]
            )
            h[j, k] = h[k, j] = mixed
    se = np.full(p, np.nan)
    if not np.all(np.isfinite(h)):
        return CurvatureSE(se, True, h)
    eigvals = np.linalg.eigvalsh(h)
    scale = float(np.max(np.abs(eigvals)))
    singular = scale == 0.0 or float(np.min(eigvals)) <= 1e-8 * scale
    cov = np.linalg.pinv(h, rcond=1e-8)
    diag = np.diag(cov)
    valid = np.isfinite(diag) & (diag > 0)
    se[valid] = np.sqrt(diag[valid])
    return CurvatureSE(se, bool(singular), h)


def default_theta_init(pattern: PointPattern, model: IntensityModel) -> np.ndarray:
    """Method-of-moments start: log(n / volume) on the intercept when the
    family has one, zero slopes."""
    theta0 = np.zeros(model.n_params)
    names = model.param_names
    if "1" in names:
        theta0[names.index("1")] = math.log(max(pattern.n, 1) / pattern.window.volume)
    return theta0


def _random_direction(rng: np.random.Generator, p: int) -> np.ndarray:
    v = rng.standard_normal(p)
    norm = np.linalg.norm(v)
    while norm == 0.0:
        v = rng.standard_normal(p)
        norm = np.linalg.norm(v)
    return v / norm


def _stage2(objective_fn, stage1: FitResult, R: float, tau: float | None,
            opts: MinimizeOptions, seed: int) -> FitResult:
    """Penalized re-fit around a first-stage estimate: start on the sphere
    of radius R in random directions and keep the best restart.

    The sphere usually has separate objective basins (one per crossing of
    a flat ridge); the direction draws double the generic restart count so
    every basin gets sampled with high probability.
    """
    center = stage1.theta_hat
    penalty = PenaltyConfig(R=R, tau=tau, center=center)

    def total(theta):
        return objective_fn(theta) + penalty_term(theta, penalty)

    rng = stream_rng(seed, 17)
    p = len(center)
    starts = [center + R * _random_direction(rng, p) for _ in range(2 * opts.restarts)]
    result = minimize(total, center, options=replace(opts, seed=seed), starts=starts)
    curvature = estimate_se(total, result.theta_hat)
    result.std_errors = curvature.values
    result.hessian_singular = curvature.singular
    result.penalty = penalty
    result.seed = seed
    return result


# Evaluation budget per restart for the stage-1 search.  Stage 1 settles
# the well-identified parameter combinations from the moment start and is
# deliberately kept local: exploring flat (non-identifiable) ridges is the
# job of the stage-2 radial displacement, and a fully converged stage 1
# would turn the mandatory displacement into pure damage.
STAGE1_MAX_EVALS = 45


def fit_global(
    pattern: PointPattern,
    model: IntensityModel,
    config: ContrastConfig,
    penalty: PenaltyConfig | None = None,
    options: MinimizeOptions | None = None,
    seed: int = 0,
    stage1_max_evals: int = STAGE1_MAX_EVALS,
) -> FitResult:
    """Two-stage minimum-contrast fit.

    Stage 1 runs a short budgeted simplex descent of the contrast
    objective from the method-of-moments start (see STAGE1_MAX_EVALS).
    When a penalty is requested (a PenaltyConfig without center), stage 2
    re-minimizes the penalized objective centered at the stage-1 estimate,
    starting on the sphere of radius R in seeded random directions, and
    its result is returned.
    """
    opts = options or MinimizeOptions()
    problem = ContrastProblem(pattern, model, config)
    theta0 = default_theta_init(pattern, model)
    stage1_opts = replace(opts, seed=stream_seed(seed, 1), max_evals=stage1_max_evals)
    stage1 = minimize(problem.objective, theta0, options=stage1_opts)
    curvature = estimate_se(problem.objective, stage1.theta_hat)
    stage1.std_errors = curvature.values
    stage1.hessian_singular = curvature.singular
    stage1.seed = seed
    if penalty is None:
        return stage1
    return _stage2(problem.objective, stage1, penalty.R, penalty.tau, opts,
                   seed=stream_seed(seed, 2))


def fit_penalized_path(
    pattern: PointPattern,
    model: IntensityModel,
    config: ContrastConfig,
    r_values,
    tau: float | None = None,
    options: MinimizeOptions | None = None,
    seed: int = 0,
    stage1_max_evals: int = STAGE1_MAX_EVALS,
) -> tuple[FitResult, dict[float, FitResult]]:
    """Stage-1 fit plus one penalized re-fit per radius in ``r_values``.

    Shares the stage-1 estimate and the cached pattern machinery across
    the whole radius scan (used by both R-selection rules).
    """
    opts = options or MinimizeOptions()
    problem = ContrastProblem(pattern, model, config)
    theta0 = default_theta_init(pattern, model)
    stage1_opts = replace(opts, seed=stream_seed(seed, 1), max_evals=stage1_max_evals)
    stage1 = minimize(problem.objective, theta0, options=stage1_opts)
    curvature = estimate_se(problem.objective, stage1.theta_hat)
    stage1.std_errors = curvature.values
    stage1.hessian_singular = curvature.singular
    stage1.seed = seed
    fits: dict[float, FitResult] = {}
    for k, r in enumerate(np.asarray(r_values, dtype=float)):
        fits[float(r)] = _stage2(problem.objective, stage1, float(r), tau, opts,
                                 seed=stream_seed(seed, 2, k))
    return stage1, fits


# Stage-1 budget for the per-point fits.  Local objectives are built from
# a few dozen neighbours, so their ridges are even flatter and noisier
# than the global ones; the per-point stage 1 stays closer to the moment
# start than the global fit does.
STAGE1_MAX_EVALS_LOCAL = 30


def fit_local(
    pattern: PointPattern,
    model: IntensityModel,
    config: ContrastConfig,
    penalty_r=None,
    tau: float | None = None,
    options: MinimizeOptions | None = None,
    seed: int = 0,
    phi_per_point=None,
    stage1_max_evals: int = STAGE1_MAX_EVALS_LOCAL,
    keep_stage1: bool = False,
) -> LocalFitResult:
    """Independent two-stage fits of the local objective for every point.

    ``penalty_r`` may be a single radius or one radius per point.  Failed
    points are recorded (NaN placeholder result); the call raises only if
    fewer than 90% of the points fit.  With ``keep_stage1`` the returned
    result also carries the per-point unpenalized fits under
    ``stage1_results`` (they are computed anyway for the penalized run).

    The per-point stage 2 samples 6 sphere directions rather than the
    global fit's 10; with ~n points per pattern the pooled distributions
    the local study reports are insensitive to the extra directions, and
    the study cost scales with n.
    """
    opts = options or MinimizeOptions()
    problem = LocalContrastProblem(pattern, model, config, phi_per_point)
    theta0 = default_theta_init(pattern, model)
    n, p = pattern.n, model.n_params
    if penalty_r is not None:
        radii = np.broadcast_to(np.asarray(penalty_r, dtype=float), (n,))
        if np.any(radii <= 0):
            raise ValueError("penalty radii must be positive")
    stage2_opts = replace(opts, restarts=3)
    results: list[FitResult] = []
    stage1_results: list[FitResult] = []
    failed: list[int] = []

    def placeholder() -> FitResult:
        return FitResult(
            theta_hat=np.full(p, np.nan),
            objective_value=np.nan,
            std_errors=np.full(p, np.nan),
            converged=False,
            n_evals=0,
        )

    for i in range(n):
        obj = problem.point_objective(i)
        try:
            stage1_opts = replace(opts, seed=stream_seed(seed, i, 1), max_evals=stage1_max_evals)
            stage1 = minimize(obj, theta0, options=stage1_opts)
            if penalty_r is None:
                curvature = estimate_se(obj, stage1.theta_hat)
                stage1.std_errors = curvature.values
                stage1.hessian_singular = curvature.singular
                results.append(stage1)
            else:
                if keep_stage1:
                    curvature = estimate_se(obj, stage1.theta_hat)
                    stage1.std_errors = curvature.values
                    stage1.hessian_singular = curvature.singular
                    stage1_results.append(stage1)
                results.append(
                    _stage2(obj, stage1, float(radii[i]), tau, stage2_opts,
                            seed=stream_seed(seed, i, 2))
                )
        except (FitError, FloatingPointError):
            failed.append(i)
            results.append(placeholder())
            if keep_stage1 and penalty_r is not None:
                stage1_results.append(placeholder())
    if n and len(failed) > 0.1 * n:
        raise FitError(f"local fitting failed for {len(failed)} of {n} points")
    out = LocalFitResult(results, failed)
    if keep_stage1 and penalty_r is not None:
        out.stage1_results = stage1_results
    return out

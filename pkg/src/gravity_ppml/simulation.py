"""Synthetic dyadic panels and Monte Carlo experiments.

Four disturbance designs (I-IV) share one skeleton: country-time and pair
effects drawn N(0, 1/16), an AR(1)-style regressor recursion, a
multiplicative log-normal disturbance with unit mean whose variance is a
chosen function of the conditional mean, and outcome = mean x disturbance.
A calibrated variant ("CALIB") mimics a treatment-dummy design with a
level-dependent variance; it ships as a documented recipe.

Replications are reproducible and order-independent: replication r of a
run seeded s draws from a counter-based generator keyed by (s, r, attempt),
and draws always happen in a fixed documented order, so thread/process
scheduling cannot change any result.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import bias as bias_mod
from .errors import (
    BadValue,
    GravityPpmlError,
    NotConverged,
    OverflowInDgp,
    TooManyFailures,
)
from .estimator import FitOptions, fit_three_way
from .jackknife import PartitionPlan, jackknife_correct, ordering_partition
from .panel import PairBlock, PanelData, prune_sample

__all__ = [
    "DgpSpec",
    "McSummary",
    "generate_dataset",
    "omega_covariance",
    "run_monte_carlo",
    "run_grid",
    "generate_overlapping_fe",
    "fit_overlapping_fe",
    "run_example_mc",
]

_DGPS = ("I", "II", "III", "IV", "CALIB")
_MIN_REPS = 50
_RESAMPLE_CAP = 10
_FE_SD = 0.25  # country-time and pair effects ~ N(0, 1/16)


@dataclass(frozen=True)
class DgpSpec:
    """Configuration of one synthetic-panel design.

    ``nu_variance`` is the innovation variance of the regressor recursion
    and ``include_eta_in_x`` controls whether the pair effect enters it;
    the defaults (variance 1/16, pair effect excluded) reproduce the
    reference Monte Carlo summary values. The alternative process
    (variance 1/2, pair effect in the recursion and in the initial
    condition) is available by flag.
    """

    dgp: str
    N: int
    T: int
    beta0: float = 1.0
    rho: float = 0.3
    seed: int = 0
    nu_variance: float = 1.0 / 16.0
    include_eta_in_x: bool = False
    calib_scale: float = 2.0e6
    calib_a: float = 200000.0
    calib_b: float = 0.08

    def __post_init__(self):
        if self.dgp not in _DGPS:
            raise BadValue(f"unknown DGP {self.dgp!r}; expected one of {_DGPS}")
        if self.N < 4:
            raise BadValue("N must be at least 4")
        if self.T < 2:
            raise BadValue("T must be at least 2")
        if not (0.0 <= self.rho < 1.0):
            raise BadValue("rho must lie in [0, 1)")
        if self.nu_variance <= 0:
            raise BadValue("nu_variance must be positive")


def omega_covariance(sigma2_s: float, sigma2_t: float, lag: int, rho: float) -> float:
    """Population covariance of the multiplicative disturbance at a lag.

    For the unit-mean log-normal disturbance built from an AR(1) Gaussian
    with autocorrelation ``rho**lag``:
    ``Cov(w_s, w_t) = exp(rho^lag * sqrt(ln(1+s2_s)) * sqrt(ln(1+s2_t))) - 1``.
    At lag 0 with equal variances this returns the variance itself.
    """
    if sigma2_s < 0 or sigma2_t < 0:
        raise BadValue("variances must be nonnegative")
    if lag < 0:
        raise BadValue("lag must be nonnegative")
    r = rho**lag
    return float(
        np.exp(r * np.sqrt(np.log1p(sigma2_s)) * np.sqrt(np.log1p(sigma2_t))) - 1.0
    )


def _ar1_unit(rng: np.random.Generator, shape_prefix: tuple, T: int, rho: float) -> np.ndarray:
    """Stationary AR(1) with N(0,1) marginals and Corr(z_s, z_t) = rho^|s-t|."""
    eps = rng.normal(0.0, 1.0, shape_prefix + (T,))
    z = np.empty_like(eps)
    z[..., 0] = eps[..., 0]
    scale = np.sqrt(1.0 - rho**2)
    for t in range(1, T):
        z[..., t] = rho * z[..., t - 1] + scale * eps[..., t]
    return z


def _lognormal_unit_mean(sigma2: np.ndarray, z: np.ndarray) -> np.ndarray:
    """exp(-v/2 + sqrt(v) z) with v = ln(1+sigma2): mean 1, variance sigma2."""
    v = np.log1p(sigma2)
    return np.exp(-0.5 * v + np.sqrt(v) * z)


def _first_bad_cell(arr: np.ndarray) -> tuple:
    flat = int(np.argmax(~np.isfinite(arr)))
    i, j, t = np.unravel_index(flat, arr.shape)
    return int(i) + 1, int(j) + 1, int(t) + 1


def generate_dataset(spec: DgpSpec, seed_seq: np.random.SeedSequence | None = None) -> PanelData:
    """Draw one synthetic panel (all ordered country pairs, i != j).

    Fixed draw order (part of the reproducibility contract): exporter-time
    effects, importer-time effects, pair effects, regressor innovations,
    disturbance AR(1) innovations, then (CALIB only) treatment onsets.

    Raises ``OverflowInDgp`` with the offending (exporter, importer,
    period) when the mean or outcome overflows; Monte Carlo callers
    resample with a fresh sub-seed.
    """
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(spec.seed)
    rng = np.random.Generator(np.random.Philox(seed_seq))
    N, T = spec.N, spec.T

    alpha = rng.normal(0.0, _FE_SD, (N, T))
    gamma = rng.normal(0.0, _FE_SD, (N, T))
    eta = rng.normal(0.0, _FE_SD, (N, N))

    if spec.dgp == "CALIB":
        z = _ar1_unit(rng, (N, N), T, spec.rho)
        onset = rng.integers(1, T + 2, size=(N, N))
        x = (np.arange(1, T + 1)[None, None, :] >= onset[:, :, None]).astype(float)
    else:
        nu = rng.normal(0.0, np.sqrt(spec.nu_variance), (N, N, T + 1))
        z = _ar1_unit(rng, (N, N), T, spec.rho)
        x = np.empty((N, N, T))
        prev = (eta if spec.include_eta_in_x else 0.0) + nu[:, :, 0]
        for t in range(T):
            prev = (
                prev / 2.0
                + alpha[:, None, t]
                + gamma[None, :, t]
                + (eta if spec.include_eta_in_x else 0.0)
                + nu[:, :, t + 1]
            )
            x[:, :, t] = prev

    index = (
        alpha[:, None, :] + gamma[None, :, :] + eta[:, :, None] + spec.beta0 * x
    )
    if spec.dgp == "CALIB":
        index = index + np.log(spec.calib_scale)
    with np.errstate(over="ignore"):
        lam = np.exp(index)
    if not np.all(np.isfinite(lam)):
        raise OverflowInDgp(
            "mean overflow in synthetic panel", cell=_first_bad_cell(lam)
        )

    with np.errstate(over="ignore", divide="ignore"):
        if spec.dgp == "I":
            sigma2 = lam**-2.0
        elif spec.dgp == "II":
            sigma2 = lam**-1.0
        elif spec.dgp == "III":
            sigma2 = np.ones_like(lam)
        elif spec.dgp == "IV":
            sigma2 = 0.5 * lam**-1.0 + 0.5 * np.exp(2.0 * x)
            if not np.all(np.isfinite(sigma2)):
                raise OverflowInDgp(
                    "variance overflow in synthetic panel",
                    cell=_first_bad_cell(sigma2),
                )
        else:  # CALIB: Var(y) = a*lam + b*x*lam^2, so sigma2 = a/lam + b*x
            sigma2 = spec.calib_a / lam + spec.calib_b * x

    with np.errstate(all="ignore"):
        y = lam * _lognormal_unit_mean(sigma2, z)
    if not np.all(np.isfinite(y)):
        raise OverflowInDgp(
            "outcome overflow in synthetic panel", cell=_first_bad_cell(y)
        )

    labels = tuple(range(1, N + 1))
    present = np.ones(T, dtype=bool)
    pairs = []
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            pairs.append(
                PairBlock(
                    i=i, j=j, y=y[i, j].copy(), x=x[i, j][:, None].copy(),
                    present=present.copy(),
                )
            )
    return PanelData(
        exporters=labels,
        importers=labels,
        periods=tuple(range(1, T + 1)),
        pairs=tuple(pairs),
        regressor_names=("x",),
    )


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class McSummary:
    """Aggregated Monte Carlo results for one design cell.

    Top-level scalars describe the uncorrected estimator with its
    uncorrected standard error; ``estimators`` holds the full breakdown
    (per point estimator, each paired with every available standard-error
    type), and ``mc_standard_errors`` mirrors that structure with the
    simulation noise of each reported statistic.
    """

    replications: int
    n_failures: int
    beta0: float
    avg_bias_x100: float
    bias_over_se: float | None
    se_over_sd: float | None
    coverage_95: float | None
    estimators: dict
    mc_standard_errors: dict
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    draws: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "replications": self.replications,
            "n_failures": self.n_failures,
            "beta0": self.beta0,
            "avg_bias_x100": self.avg_bias_x100,
            "bias_over_se": self.bias_over_se,
            "se_over_sd": self.se_over_sd,
            "coverage_95": self.coverage_95,
            "estimators": self.estimators,
            "mc_standard_errors": self.mc_standard_errors,
            "failures": self.failures,
            "meta": self.meta,
        }
        if self.draws is not None:
            out["draws"] = self.draws
        return out


def _replication(spec: DgpSpec, rep: int, which: tuple, family_q: float, jk_replicates: int) -> dict:
    for attempt in range(_RESAMPLE_CAP):
        ss = np.random.SeedSequence(spec.seed, spawn_key=(rep, attempt))
        try:
            panel = generate_dataset(spec, ss)
            break
        except OverflowInDgp:
            continue
    else:
        raise OverflowInDgp(f"replication {rep}: overflow persisted through resampling")

    pruned, _ = prune_sample(panel)
    opts = FitOptions(family_q=family_q)
    fit = fit_three_way(pruned, opts)
    out = {"beta": float(fit.beta[0])}

    if family_q == 0.0:
        objects = bias_mod.build_bias_objects(pruned, fit)
        P = objects.n_pairs
        W_tot = P * objects.W_hat
        g = np.einsum("ptk,pt->pk", objects.x_tilde, objects.S_hat)
        W_inv = np.linalg.inv(W_tot)
        V0 = W_inv @ (g.T @ g) @ W_inv
        out["se_uncorrected"] = float(np.sqrt(V0[0, 0]))
        if "analytical" in which:
            rep_report = bias_mod.analytical_bias_correct(fit, objects)
            out["beta_analytical"] = float(rep_report.beta_analytical[0])
        if "se" in which:
            rep_report = bias_mod.corrected_vcov(pruned, fit, objects)
            out["se_corrected"] = float(rep_report.se_corrected[0])
        if "jackknife" in which:
            # seed the plan even for a single ordering-based split so a
            # degenerate partition resamples instead of failing the rep
            base = ordering_partition(pruned)
            plan = PartitionPlan(
                base.group_a, base.group_b,
                seed=[spec.seed, rep], replicates=jk_replicates,
            )
            out["beta_jackknife"] = float(
                jackknife_correct(pruned, opts, plan, fit=fit)[0]
            )
    return out


def _mc_worker(payload):
    spec, rep, which, family_q, jk_replicates = payload
    try:
        return rep, _replication(spec, rep, which, family_q, jk_replicates), None
    except GravityPpmlError as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"


def _estimator_stats(bvec: np.ndarray, beta0: float, se_vectors: dict) -> tuple[dict, dict]:
    R = bvec.size
    m = float(bvec.mean())
    sd = float(bvec.std(ddof=1))
    stats = {
        "mean": m,
        "avg_bias_x100": 100.0 * (m - beta0),
        "sd_x100": 100.0 * sd,
        "bias_over_se": {},
        "se_over_sd": {},
        "coverage_95": {},
    }
    mcse = {
        "avg_bias_x100": float(100.0 * sd / np.sqrt(R)),
        "sd_x100": float(100.0 * sd / np.sqrt(2.0 * (R - 1.0))),
        "bias_over_se": {},
        "se_over_sd": {},
        "coverage_95": {},
    }
    for name, se_vec in se_vectors.items():
        mse = float(se_vec.mean())
        ratio = mse / sd
        cov = float(np.mean(np.abs(bvec - beta0) <= 1.96 * se_vec))
        stats["bias_over_se"][name] = (m - beta0) / mse
        stats["se_over_sd"][name] = ratio
        stats["coverage_95"][name] = cov
        var_mse = float(se_vec.var(ddof=1)) / R
        mcse["se_over_sd"][name] = ratio * float(
            np.sqrt(var_mse / mse**2 + 1.0 / (2.0 * (R - 1.0)))
        )
        mcse["coverage_95"][name] = float(np.sqrt(cov * (1.0 - cov) / R))
        mcse["bias_over_se"][name] = float((sd / np.sqrt(R)) / mse)
    return stats, mcse


def run_monte_carlo(
    spec: DgpSpec,
    reps: int,
    which_corrections: tuple = ("analytical", "jackknife", "se"),
    family_q: float = 0.0,
    threads: int | None = None,
    jk_replicates: int = 1,
    keep_draws: bool = False,
) -> McSummary:
    """Repeatedly generate, fit, and correct; aggregate table statistics.

    Per-replication failures are logged and excluded; if they reach 1% of
    the requested replications the whole run raises ``TooManyFailures``.
    Corrections are only available for the Poisson family (q = 0).

    ``threads`` controls process-level parallelism (default: the
    GRAVITY_PPML_THREADS environment variable, else single process);
    results are independent of it.
    """
    if reps < _MIN_REPS:
        raise BadValue(f"need at least {_MIN_REPS} replications, got {reps}")
    which = tuple(which_corrections)
    bad = set(which) - {"analytical", "jackknife", "se"}
    if bad:
        raise BadValue(f"unknown corrections: {sorted(bad)}")
    if family_q != 0.0 and which:
        raise BadValue("corrections are only defined for the Poisson family (q=0)")
    if threads is None:
        threads = int(os.environ.get("GRAVITY_PPML_THREADS", "1") or "1")

    payloads = [(spec, r, which, family_q, jk_replicates) for r in range(reps)]
    outcomes: dict[int, dict] = {}
    failures: list[dict] = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rep, result, err in pool.map(_mc_worker, payloads, chunksize=4):
                if err is None:
                    outcomes[rep] = result
                else:
                    failures.append({"replication": rep, "error": err})
    else:
        for payload in payloads:
            rep, result, err = _mc_worker(payload)
            if err is None:
                outcomes[rep] = result
            else:
                failures.append({"replication": rep, "error": err})

    if len(failures) / reps >= 0.01 and failures:
        raise TooManyFailures(
            f"{len(failures)} of {reps} replications failed: "
            + "; ".join(f["error"] for f in failures[:5])
        )

    order = sorted(outcomes)
    beta = np.array([outcomes[r]["beta"] for r in order])
    se_vectors = {}
    if all("se_uncorrected" in outcomes[r] for r in order) and order:
        se_vectors["uncorrected"] = np.array(
            [outcomes[r]["se_uncorrected"] for r in order]
        )
    if "se" in which:
        se_vectors["corrected"] = np.array(
            [outcomes[r]["se_corrected"] for r in order]
        )

    estimators = {}
    mcse = {}
    estimators["uncorrected"], mcse["uncorrected"] = _estimator_stats(
        beta, spec.beta0, se_vectors
    )
    draws = {"uncorrected": beta.tolist()} if keep_draws else None
    for name, key in (("analytical", "beta_analytical"), ("jackknife", "beta_jackknife")):
        if name in which:
            vec = np.array([outcomes[r][key] for r in order])
            estimators[name], mcse[name] = _estimator_stats(vec, spec.beta0, se_vectors)
            if keep_draws:
                draws[name] = vec.tolist()

    top = estimators["uncorrected"]
    return McSummary(
        replications=len(order),
        n_failures=len(failures),
        beta0=spec.beta0,
        avg_bias_x100=top["avg_bias_x100"],
        bias_over_se=top["bias_over_se"].get("uncorrected"),
        se_over_sd=top["se_over_sd"].get("uncorrected"),
        coverage_95=top["coverage_95"].get("uncorrected"),
        estimators=estimators,
        mc_standard_errors=mcse,
        failures=failures,
        meta={
            "dgp": spec.dgp,
            "N": spec.N,
            "T": spec.T,
            "beta0": spec.beta0,
            "rho": spec.rho,
            "seed": spec.seed,
            "reps_requested": reps,
            "family_q": family_q,
            "corrections": list(which),
            "jk_replicates": jk_replicates,
        },
        draws=draws,
    )


# ---------------------------------------------------------------------------
# grid runner
# ---------------------------------------------------------------------------


def run_grid(cells: list, threads: int | None = None, keep_draws: bool = False) -> list:
    """Run one Monte Carlo per cell dict; failures isolate to their cell.

    Each cell needs ``dgp``, ``N``, ``T``, ``reps`` and may carry
    ``corrections``, ``seed``, ``beta0``, ``rho``, ``nu_variance``,
    ``include_eta_in_x``, ``family_q``, ``jk_replicates``, and the
    calibrated-design knobs ``calib_a``, ``calib_b``, ``calib_scale``. A
    cell with ``dgp == "EX1"`` runs the overlapping-fixed-effects
    demonstration instead (uncorrected estimator only).
    """
    results = []
    for cell in cells:
        cell = dict(cell)
        try:
            if str(cell.get("dgp")) == "EX1":
                summary = run_example_mc(
                    n=int(cell["N"]),
                    reps=int(cell["reps"]),
                    seed=int(cell.get("seed", 0)),
                    beta0=float(cell.get("beta0", 1.0)),
                    keep_draws=keep_draws,
                )
            else:
                calib = {
                    k: float(cell[k])
                    for k in ("calib_a", "calib_b", "calib_scale")
                    if k in cell
                }
                spec = DgpSpec(
                    dgp=str(cell["dgp"]),
                    N=int(cell["N"]),
                    T=int(cell["T"]),
                    beta0=float(cell.get("beta0", 1.0)),
                    rho=float(cell.get("rho", 0.3)),
                    seed=int(cell.get("seed", 0)),
                    nu_variance=float(cell.get("nu_variance", 1.0 / 16.0)),
                    include_eta_in_x=bool(cell.get("include_eta_in_x", False)),
                    **calib,
                )
                summary = run_monte_carlo(
                    spec,
                    reps=int(cell["reps"]),
                    which_corrections=tuple(cell.get("corrections", ())),
                    family_q=float(cell.get("family_q", 0.0)),
                    threads=threads,
                    jk_replicates=int(cell.get("jk_replicates", 1)),
                    keep_draws=keep_draws,
                )
            results.append({"cell": cell, "status": "ok", "summary": summary, "error": None})
        except (GravityPpmlError, KeyError, ValueError, TypeError) as exc:
            results.append(
                {
                    "cell": cell,
                    "status": "failed",
                    "summary": None,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
    return results


# ---------------------------------------------------------------------------
# overlapping-fixed-effects demonstration (three periods, two FE families
# whose active windows overlap in the middle period)
# ---------------------------------------------------------------------------


def generate_overlapping_fe(
    n: int, beta0: float = 1.0, rho: float = 0.3, seed: int = 0,
    seed_seq: np.random.SeedSequence | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Outcome and regressor (n, 3) for the overlapping-FE design.

    Unit i has mean exp(b*x + a_i) in period 1, exp(b*x + a_i + c_i) in
    period 2, exp(b*x + c_i) in period 3; disturbances are unit-mean
    log-normal with variance 1/mean. Draw order: a, c, regressor
    innovations, disturbance innovations.
    """
    if n < 2:
        raise BadValue("need at least 2 units")
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.Philox(seed_seq))
    a = rng.normal(0.0, _FE_SD, n)
    c = rng.normal(0.0, _FE_SD, n)
    nu = rng.normal(0.0, np.sqrt(0.5), (n, 4))
    z = _ar1_unit(rng, (n,), 3, rho)

    x = np.empty((n, 3))
    prev = nu[:, 0]
    masks_a = (1.0, 1.0, 0.0)
    masks_c = (0.0, 1.0, 1.0)
    for t in range(3):
        prev = prev / 2.0 + masks_a[t] * a + masks_c[t] * c + nu[:, t + 1]
        x[:, t] = prev
    index = beta0 * x + np.outer(a, masks_a) + np.outer(c, masks_c)
    lam = np.exp(index)
    sigma2 = 1.0 / lam
    y = lam * _lognormal_unit_mean(sigma2, z)
    if not np.all(np.isfinite(y)):
        raise OverflowInDgp("outcome overflow in overlapping-FE design")
    return y, x


def fit_overlapping_fe(y: np.ndarray, x: np.ndarray, max_iter: int = 200) -> float:
    """Poisson pseudo-likelihood fit of the overlapping-FE design.

    Full Newton on (slope, period-1/2 effects, period-2/3 effects); the
    parameterization is fully identified (periods 1 and 3 pin each family).
    Returns the slope estimate.
    """
    n, T = y.shape
    if T != 3:
        raise BadValue("overlapping-FE design has exactly 3 periods")
    n_par = 1 + 2 * n
    D = np.zeros((n * T, n_par))
    D[:, 0] = x.reshape(-1)
    rows = np.arange(n * T).reshape(n, T)
    for i in range(n):
        D[rows[i, :2], 1 + i] = 1.0          # first family active in periods 1-2
        D[rows[i, 1:], 1 + n + i] = 1.0      # second family active in periods 2-3
    yv = y.reshape(-1)

    theta = np.zeros(n_par)
    theta[1:1 + n] = np.log(y[:, 0] + 0.1)
    theta[1 + n:] = np.log(y[:, 2] + 0.1)

    def deviance(lam):
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(yv > 0, yv * np.log(yv / lam), 0.0)
        return float(2.0 * (term - (yv - lam)).sum())

    xi = D @ theta
    dev = deviance(np.exp(xi))
    tol_score = 1e-8 * (1.0 + yv.mean())
    for _ in range(max_iter):
        lam = np.exp(xi)
        grad = D.T @ (yv - lam)
        H = (D * lam[:, None]).T @ D
        step = np.linalg.solve(H, grad)
        s = 1.0
        for _ in range(25):
            cand = theta + s * step
            with np.errstate(over="ignore"):
                dev_c = deviance(np.exp(D @ cand))
            if np.isfinite(dev_c) and dev_c <= dev + 1e-12:
                break
            s /= 2.0
        theta = theta + s * step
        xi = D @ theta
        dev_prev, dev = dev, deviance(np.exp(xi))
        if np.abs(D.T @ (yv - np.exp(xi))).max() <= tol_score and abs(dev_prev - dev) <= 1e-10 * (0.1 + abs(dev)):
            return float(theta[0])
    raise NotConverged("overlapping-FE Newton did not converge")


def run_example_mc(
    n: int, reps: int, seed: int = 0, beta0: float = 1.0, keep_draws: bool = False
) -> McSummary:
    """Monte Carlo of the overlapping-FE slope (uncorrected only)."""
    if reps < _MIN_REPS:
        raise BadValue(f"need at least {_MIN_REPS} replications, got {reps}")
    draws = []
    failures = []
    for rep in range(reps):
        for attempt in range(_RESAMPLE_CAP):
            ss = np.random.SeedSequence(seed, spawn_key=(rep, attempt))
            try:
                y, x = generate_overlapping_fe(n, beta0=beta0, seed_seq=ss)
                draws.append(fit_overlapping_fe(y, x))
                break
            except OverflowInDgp:
                continue
            except GravityPpmlError as exc:
                failures.append({"replication": rep, "error": f"{type(exc).__name__}: {exc}"})
                break
        else:
            failures.append({"replication": rep, "error": "OverflowInDgp: resample cap"})
    if len(failures) / reps >= 0.01 and failures:
        raise TooManyFailures(f"{len(failures)} of {reps} replications failed")
    bvec = np.array(draws)
    stats, mcse = _estimator_stats(bvec, beta0, {})
    return McSummary(
        replications=bvec.size,
        n_failures=len(failures),
        beta0=beta0,
        avg_bias_x100=stats["avg_bias_x100"],
        bias_over_se=None,
        se_over_sd=None,
        coverage_95=None,
        estimators={"uncorrected": stats},
        mc_standard_errors={"uncorrected": mcse},
        failures=failures,
        meta={"dgp": "EX1", "N": n, "T": 3, "beta0": beta0, "seed": seed, "reps_requested": reps},
        draws={"uncorrected": bvec.tolist()} if keep_draws else None,
    )

"""Bounded iterative refinement, OOD baselines, and the stealth sweep.

Refinement starts from the raw attack rows and repeatedly adds generator
perturbations, clipping back into the per-feature band
[x_att - epsilon, x_att + epsilon] intersected with [0, 1] after every step,
so the infinity-norm deviation from the original rows never exceeds epsilon.

Stealth is measured distributionally: the gap between the 1-d Wasserstein
distance of (adversarial vs attack) marginals and that of (noise-OOD vs
attack) marginals, averaged per feature. The sweep scans (epsilon,
noise_scale, n_ref) and keeps the most stealthy point whose evasion success
meets the floor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .cgan import Generator, generate_perturbation
from .errors import ShapeError
from .ids import IdsModel, predict_label
from .rng import derive_rng, derive_seed

DEFAULT_EPSILON_GRID = [round(0.01 * k, 2) for k in range(1, 11)]
DEFAULT_RHO_GRID = [round(0.1 * k, 1) for k in range(1, 11)]
DEFAULT_N_REF_GRID = list(range(5, 65, 5))
DEFAULT_ETA_MAX = 0.8


@dataclass
class RefinementConfig:
    epsilon: float = 0.05     # per-feature deviation budget
    n_ref: int = 35           # refinement steps
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be > 0")
        if self.n_ref < 0:
            raise ValueError("n_ref must be >= 0")


@dataclass
class OodConfig:
    noise_scale: float = 0.3  # std of the additive Gaussian noise
    seed: int = 0

    def __post_init__(self):
        if self.noise_scale <= 0.0:
            raise ValueError("noise_scale must be > 0")


@dataclass
class AdversarialBatch:
    x_att: np.ndarray
    x_adv: np.ndarray
    # running maximum of the infinity-norm deviation after each step
    max_dev_trace: np.ndarray
    config: RefinementConfig


@dataclass
class StealthReport:
    epsilon: float
    rho: float
    n_ref: int
    w_adv_att: float
    w_ood_att: float
    objective: float
    succ_adv: float
    succ_ood: float
    feasible: bool
    w_adv_ben: float | None = None
    w_ood_ben: float | None = None


@dataclass
class SweepResult:
    reports: list[StealthReport]
    selection: StealthReport | None
    feasible: bool
    eta_max: float


def refine_trajectory(gen: Generator, x_att: np.ndarray, labels: np.ndarray,
                      epsilon: float, snapshot_steps: list[int],
                      seed: int) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Run max(snapshot_steps) refinement steps, snapshotting along the way.

    Noise is drawn once per step, so a shorter run with the same seed is an
    exact prefix of a longer one; snapshots equal standalone runs bit for bit.
    """
    x_att = np.asarray(x_att, dtype=np.float64)
    if x_att.ndim != 2:
        raise ShapeError("x_att must be 2-d")
    steps = sorted(set(int(s) for s in snapshot_steps))
    if not steps or steps[0] < 0:
        raise ValueError("snapshot steps must be non-negative")
    rng = derive_rng(seed, "refine-noise")
    lower = np.maximum(x_att - epsilon, 0.0)
    upper = np.minimum(x_att + epsilon, 1.0)
    snapshots: dict[int, np.ndarray] = {}
    if steps[0] == 0:
        snapshots[0] = x_att.copy()
    current = x_att.copy()
    trace = np.zeros(steps[-1] if steps else 0)
    running_max = 0.0
    for step in range(1, steps[-1] + 1):
        noise = rng.standard_normal((x_att.shape[0], gen.noise_dim))
        delta = generate_perturbation(gen, noise, labels)
        current = np.clip(current + delta, lower, upper)
        deviation = float(np.abs(current - x_att).max()) if x_att.size else 0.0
        running_max = max(running_max, deviation)
        trace[step - 1] = running_max
        if step in steps:
            snapshots[step] = current.copy()
    return snapshots, trace


def refine(gen: Generator, x_att: np.ndarray, labels: np.ndarray,
           config: RefinementConfig) -> AdversarialBatch:
    """Iteratively push attack rows toward evasion inside the epsilon band."""
    x_att = np.asarray(x_att, dtype=np.float64)
    if config.n_ref == 0:
        return AdversarialBatch(x_att.copy(), x_att.copy(), np.zeros(0), config)
    snapshots, trace = refine_trajectory(
        gen, x_att, labels, config.epsilon, [config.n_ref], config.seed)
    return AdversarialBatch(x_att.copy(), snapshots[config.n_ref], trace, config)


def gen_ood(x_att: np.ndarray, config: OodConfig) -> np.ndarray:
    """clip(x_att + N(0, noise_scale^2), 0, 1): unstructured out-of-distribution."""
    x_att = np.asarray(x_att, dtype=np.float64)
    rng = derive_rng(config.seed, "ood-noise")
    noise = rng.normal(0.0, config.noise_scale, size=x_att.shape)
    return np.clip(x_att + noise, 0.0, 1.0)


def success_rate(ids_model: IdsModel, batch: np.ndarray, n_att: int) -> float:
    """Fraction of rows the detector labels benign, over n_att."""
    if n_att <= 0:
        raise ValueError("n_att must be > 0")
    return float((predict_label(ids_model, batch) == 0).sum() / n_att)


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact empirical 1-d Wasserstein-1 distance between two samples.

    Equal sizes reduce to the mean absolute difference of the sorted samples;
    unequal sizes integrate |F_a - F_b| over the merged support, which equals
    the quantile-function integral.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    if a.size == b.size:
        return float(np.abs(np.sort(a) - np.sort(b)).mean())
    merged = np.sort(np.concatenate([a, b]))
    widths = np.diff(merged)
    cdf_a = np.searchsorted(np.sort(a), merged[:-1], side="right") / a.size
    cdf_b = np.searchsorted(np.sort(b), merged[:-1], side="right") / b.size
    return float((np.abs(cdf_a - cdf_b) * widths).sum())


def wasserstein_features(batch_a: np.ndarray, batch_b: np.ndarray) -> float:
    """Mean of the per-feature 1-d distances (columns are features)."""
    batch_a = np.asarray(batch_a, dtype=np.float64)
    batch_b = np.asarray(batch_b, dtype=np.float64)
    if batch_a.ndim != 2 or batch_b.ndim != 2:
        raise ShapeError("batches must be 2-d")
    if batch_a.shape[1] != batch_b.shape[1]:
        raise ShapeError(
            f"feature count mismatch: {batch_a.shape[1]} vs {batch_b.shape[1]}")
    per_col = [wasserstein_1d(batch_a[:, j], batch_b[:, j])
               for j in range(batch_a.shape[1])]
    return float(np.mean(per_col))


def stealth_objective(w_adv_att: float, w_ood_att: float) -> float:
    """How closely the crafted rows mimic the noise baseline, distribution-wise."""
    return abs(float(w_adv_att) - float(w_ood_att))


def sweep(gen: Generator, ids_model: IdsModel, x_att: np.ndarray,
          labels: np.ndarray, epsilon_grid: list[float] | None = None,
          rho_grid: list[float] | None = None,
          n_ref_grid: list[int] | None = None,
          eta_max: float = DEFAULT_ETA_MAX, seed: int = 0,
          x_benign: np.ndarray | None = None) -> SweepResult:
    """Scan the (epsilon, noise_scale, n_ref) grid and pick the stealthiest
    feasible point: argmin |W(adv, att) - W(ood, att)| s.t. success >= eta_max.

    Refinement trajectories are shared across the n_ref axis (snapshots of one
    run per epsilon, seeded from the grid coordinate) and OOD draws are shared
    across epsilon and n_ref, so results are independent of evaluation order.
    Ties resolve to the first grid point in (epsilon, rho, n_ref) order.
    """
    epsilon_grid = list(DEFAULT_EPSILON_GRID if epsilon_grid is None
                        else epsilon_grid)
    rho_grid = list(DEFAULT_RHO_GRID if rho_grid is None else rho_grid)
    n_ref_grid = list(DEFAULT_N_REF_GRID if n_ref_grid is None else n_ref_grid)
    if not epsilon_grid or not rho_grid or not n_ref_grid:
        raise ValueError("all three grids must be non-empty")
    x_att = np.asarray(x_att, dtype=np.float64)
    if x_att.shape[0] == 0:
        raise ValueError("x_att must be non-empty")
    n_att = x_att.shape[0]

    ood_stats: dict[float, dict] = {}
    for rho in rho_grid:
        config = OodConfig(rho, derive_seed(seed, "sweep-ood", rho))
        x_ood = gen_ood(x_att, config)
        stats = {
            "w": wasserstein_features(x_ood, x_att),
            "succ": success_rate(ids_model, x_ood, n_att),
        }
        if x_benign is not None:
            stats["w_ben"] = wasserstein_features(x_ood, x_benign)
        ood_stats[rho] = stats

    adv_stats: dict[tuple[float, int], dict] = {}
    for epsilon in epsilon_grid:
        snapshots, _ = refine_trajectory(
            gen, x_att, labels, epsilon, n_ref_grid,
            derive_seed(seed, "sweep-refine", epsilon))
        for n_ref in n_ref_grid:
            x_adv = snapshots[n_ref]
            stats = {
                "w": wasserstein_features(x_adv, x_att),
                "succ": success_rate(ids_model, x_adv, n_att),
            }
            if x_benign is not None:
                stats["w_ben"] = wasserstein_features(x_adv, x_benign)
            adv_stats[(epsilon, n_ref)] = stats

    reports: list[StealthReport] = []
    for epsilon in epsilon_grid:
        for rho in rho_grid:
            for n_ref in n_ref_grid:
                adv = adv_stats[(epsilon, n_ref)]
                ood = ood_stats[rho]
                reports.append(StealthReport(
                    epsilon=float(epsilon), rho=float(rho), n_ref=int(n_ref),
                    w_adv_att=adv["w"], w_ood_att=ood["w"],
                    objective=stealth_objective(adv["w"], ood["w"]),
                    succ_adv=adv["succ"], succ_ood=ood["succ"],
                    feasible=adv["succ"] >= eta_max,
                    w_adv_ben=adv.get("w_ben"), w_ood_ben=ood.get("w_ben")))

    selection = None
    for report in reports:
        if report.feasible and (selection is None
                                or report.objective < selection.objective):
            selection = report
    return SweepResult(reports, selection, selection is not None, eta_max)


SWEEP_CSV_COLUMNS = ["epsilon", "rho", "n_ref", "w_adv_att", "w_ood_att",
                     "objective", "succ_adv", "succ_ood", "feasible"]


def sweep_to_csv(result: SweepResult, path) -> None:
    with_benign = any(r.w_adv_ben is not None for r in result.reports)
    columns = SWEEP_CSV_COLUMNS + (["w_adv_ben", "w_ood_ben"] if with_benign
                                   else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in result.reports:
            row = [repr(r.epsilon), repr(r.rho), str(r.n_ref),
                   repr(r.w_adv_att), repr(r.w_ood_att), repr(r.objective),
                   repr(r.succ_adv), repr(r.succ_ood),
                   "true" if r.feasible else "false"]
            if with_benign:
                row += [repr(r.w_adv_ben), repr(r.w_ood_ben)]
            writer.writerow(row)

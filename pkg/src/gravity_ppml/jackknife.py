"""Split-panel jackknife bias correction over country partitions.

Countries are divided into two roughly even groups; crossing the groups in
both roles yields four subpanels that together cover every pair exactly
once. Refitting on each subpanel and combining as ``2 b - mean(b_sub)``
removes the leading incidental-parameter bias at the cost of extra
dispersion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadValue,
    EmptySample,
    GravityPpmlError,
    JackknifeFailed,
    PartitionDegenerate,
)
from .estimator import FitOptions, fit_three_way
from .panel import PairBlock, PanelData, prune_sample

__all__ = [
    "PartitionPlan",
    "ordering_partition",
    "random_partition",
    "subpanels",
    "jackknife_correct",
]

_RESAMPLE_CAP = 20


@dataclass(frozen=True)
class PartitionPlan:
    """A country split plus the randomization settings for repeated splits.

    ``group_a`` and ``group_b`` must partition the panel's countries;
    within each role set (countries acting in both roles, exporter-only,
    importer-only) the sizes differ by at most one, with the extra country
    in group a. With ``replicates > 1`` the groups are redrawn from
    ``seed`` for every replicate and the corrected coefficients averaged.
    """

    group_a: frozenset
    group_b: frozenset
    seed: int | None = None
    replicates: int = 1

    def __post_init__(self):
        if self.group_a & self.group_b:
            raise BadValue("partition groups overlap")
        if self.replicates < 1:
            raise BadValue("replicates must be at least 1")
        if self.replicates > 1 and self.seed is None:
            raise BadValue("repeated random partitions need a seed")


def _role_sets(panel: PanelData) -> list[list]:
    """Countries by role, in panel label order (both, exporter-only, importer-only)."""
    expset, impset = set(panel.exporters), set(panel.importers)
    both = [c for c in panel.exporters if c in impset]
    exp_only = [c for c in panel.exporters if c not in impset]
    imp_only = [c for c in panel.importers if c not in expset]
    return [both, exp_only, imp_only]


def _split(ordered: list) -> tuple[list, list]:
    cut = (len(ordered) + 1) // 2
    return ordered[:cut], ordered[cut:]


def ordering_partition(panel: PanelData, replicates: int = 1, seed: int | None = None) -> PartitionPlan:
    """Deterministic split: the first half of each role set (label order) is group a."""
    a: list = []
    b: list = []
    for role in _role_sets(panel):
        ra, rb = _split(role)
        a += ra
        b += rb
    return PartitionPlan(frozenset(a), frozenset(b), seed=seed, replicates=replicates)


def random_partition(panel: PanelData, rng: np.random.Generator) -> tuple[frozenset, frozenset]:
    """Draw one even split of every role set."""
    a: list = []
    b: list = []
    for role in _role_sets(panel):
        perm = [role[k] for k in rng.permutation(len(role))]
        ra, rb = _split(perm)
        a += ra
        b += rb
    return frozenset(a), frozenset(b)


def _subset(panel: PanelData, keep: np.ndarray) -> PanelData:
    kept = [panel.pairs[p] for p in np.nonzero(keep)[0]]
    keep_e = sorted({blk.i for blk in kept})
    keep_i = sorted({blk.j for blk in kept})
    e_new = {old: new for new, old in enumerate(keep_e)}
    i_new = {old: new for new, old in enumerate(keep_i)}
    pairs = tuple(
        PairBlock(i=e_new[blk.i], j=i_new[blk.j], y=blk.y.copy(), x=blk.x.copy(), present=blk.present.copy())
        for blk in kept
    )
    return PanelData(
        exporters=tuple(panel.exporters[c] for c in keep_e),
        importers=tuple(panel.importers[c] for c in keep_i),
        periods=panel.periods,
        pairs=pairs,
        regressor_names=panel.regressor_names,
    )


def subpanels(panel: PanelData, plan: PartitionPlan) -> tuple[PanelData, PanelData, PanelData, PanelData]:
    """The four re-pruned group-crossing subpanels (aa, ab, ba, bb).

    Every observed pair whose exporter and importer both carry a group
    label lands in exactly one subpanel; pairs of a country with itself
    land in the two same-group subpanels.

    Raises ``PartitionDegenerate`` when a subpanel is empty after pruning.
    """
    countries = set(panel.exporters) | set(panel.importers)
    if len(countries) < 4:
        raise BadValue("need at least 4 countries to split")
    missing = countries - (plan.group_a | plan.group_b)
    if missing:
        raise BadValue(f"partition does not cover: {sorted(missing, key=repr)}")

    half = {c: "a" for c in plan.group_a}
    half.update({c: "b" for c in plan.group_b})
    exp_half = np.array([half[c] for c in panel.exporters])
    imp_half = np.array([half[c] for c in panel.importers])
    exp_idx = np.array([blk.i for blk in panel.pairs])
    imp_idx = np.array([blk.j for blk in panel.pairs])

    out = []
    for h1, h2 in (("a", "a"), ("a", "b"), ("b", "a"), ("b", "b")):
        keep = (exp_half[exp_idx] == h1) & (imp_half[imp_idx] == h2)
        if not keep.any():
            raise PartitionDegenerate(f"subpanel ({h1},{h2}) has no pairs")
        try:
            pruned, _ = prune_sample(_subset(panel, keep))
        except EmptySample:
            raise PartitionDegenerate(f"subpanel ({h1},{h2}) empty after pruning")
        out.append(pruned)
    return tuple(out)


def jackknife_correct(
    panel: PanelData,
    opts: FitOptions | None = None,
    plan: PartitionPlan | None = None,
    fit=None,
) -> np.ndarray:
    """Split-panel jackknife point estimate.

    Fits the four group-crossing subpanels and returns
    ``2*beta_full - mean(beta_sub)``; with ``plan.replicates > 1`` the
    partition is redrawn each replicate (deterministically from
    ``plan.seed``) and the corrected vectors averaged. A partition whose
    subpanels cannot all be fit is redrawn up to a retry cap when a seed is
    available; otherwise, or past the cap, ``JackknifeFailed`` carries the
    event diagnostics.
    """
    opts = opts or FitOptions()
    if plan is None:
        plan = ordering_partition(panel)
    if fit is None:
        fit = fit_three_way(panel, opts)
    beta_full = fit.beta

    events: list[dict] = []
    results = []
    for r in range(plan.replicates):
        corrected = None
        for attempt in range(_RESAMPLE_CAP):
            if plan.replicates == 1 and attempt == 0:
                groups = (plan.group_a, plan.group_b)
            elif plan.seed is not None:
                rng = np.random.default_rng(
                    np.random.SeedSequence(plan.seed, spawn_key=(r, attempt))
                )
                groups = random_partition(panel, rng)
            else:
                break
            sub_plan = PartitionPlan(groups[0], groups[1])
            try:
                betas = [
                    fit_three_way(sub, opts).beta for sub in subpanels(panel, sub_plan)
                ]
            except (PartitionDegenerate, GravityPpmlError) as exc:
                events.append(
                    {
                        "replicate": r,
                        "attempt": attempt,
                        "error": type(exc).__name__,
                        "message": str(exc),
                    }
                )
                continue
            corrected = 2.0 * beta_full - np.mean(betas, axis=0)
            break
        if corrected is None:
            raise JackknifeFailed(
                f"no usable partition for replicate {r} "
                f"after {len(events)} failed attempt(s)",
                diagnostics={"events": events},
            )
        results.append(corrected)
    return np.mean(results, axis=0)

"""Canonical in-memory representation of a dyadic panel.

A panel holds one block per observed (exporter, importer) pair, each block
carrying the outcome vector, the regressor matrix, and a presence mask over
the common period axis. Downstream modules consume the stacked array view
produced by :meth:`PanelData.stacked`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import BadValue, DuplicateCell, EmptySample, NegativeOutcome

__all__ = [
    "PairBlock",
    "PanelData",
    "FeLayout",
    "PruneLog",
    "StackedPanel",
    "build_panel",
    "prune_sample",
    "period_shares",
    "read_panel_csv",
    "write_panel_csv",
    "panel_to_records",
]


@dataclass(frozen=True)
class PairBlock:
    """Observations of one (exporter, importer) pair over the period axis.

    ``y`` and ``x`` are zero-filled where ``present`` is False.
    """

    i: int
    j: int
    y: np.ndarray
    x: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        for arr in (self.y, self.x, self.present):
            arr.setflags(write=False)

    @property
    def total(self) -> float:
        return float(self.y[self.present].sum())

    @property
    def n_periods(self) -> int:
        return int(self.present.sum())


@dataclass(frozen=True)
class PanelData:
    """Immutable dyadic panel.

    ``exporters``, ``importers`` and ``periods`` are ordered label tuples;
    pair blocks index into them. Safe to share across concurrent readers.
    """

    exporters: tuple
    importers: tuple
    periods: tuple
    pairs: tuple
    regressor_names: tuple

    @property
    def n_exporters(self) -> int:
        return len(self.exporters)

    @property
    def n_importers(self) -> int:
        return len(self.importers)

    @property
    def T(self) -> int:
        return len(self.periods)

    @property
    def K(self) -> int:
        return len(self.regressor_names)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_obs(self) -> int:
        return int(sum(p.n_periods for p in self.pairs))

    def summary(self) -> dict:
        return {
            "n_exporters": self.n_exporters,
            "n_importers": self.n_importers,
            "T": self.T,
            "n_pairs": self.n_pairs,
            "n_obs": self.n_obs,
            "K": self.K,
        }

    def stacked(self) -> "StackedPanel":
        """Zero-padded (pairs, periods, ...) array view of the panel."""
        P, T, K = self.n_pairs, self.T, self.K
        y = np.zeros((P, T))
        x = np.zeros((P, T, K))
        present = np.zeros((P, T), dtype=bool)
        exp_idx = np.empty(P, dtype=np.int64)
        imp_idx = np.empty(P, dtype=np.int64)
        for p, blk in enumerate(self.pairs):
            y[p] = blk.y
            x[p] = blk.x
            present[p] = blk.present
            exp_idx[p] = blk.i
            imp_idx[p] = blk.j
        return StackedPanel(y=y, x=x, present=present, exp_idx=exp_idx, imp_idx=imp_idx)


@dataclass(frozen=True)
class StackedPanel:
    """Stacked array view shared by the estimator and correction modules."""

    y: np.ndarray        # (P, T)
    x: np.ndarray        # (P, T, K)
    present: np.ndarray  # (P, T) bool
    exp_idx: np.ndarray  # (P,)
    imp_idx: np.ndarray  # (P,)


@dataclass(frozen=True)
class FeLayout:
    """Column bookkeeping for the exporter-time and importer-time cells.

    Cells are the (country index, period index) combinations with at least
    one present observation; the two maps assign each cell a column in the
    stacked fixed-effect coordinate vector (exporter cells first).
    """

    alpha_index: dict
    gamma_index: dict
    normalization: str = (
        "per-country period means shifted into the pair effect; "
        "per-period exporter means shifted into the importer effects"
    )

    @property
    def n_alpha(self) -> int:
        return len(self.alpha_index)

    @property
    def n_gamma(self) -> int:
        return len(self.gamma_index)

    @property
    def dim(self) -> int:
        return self.n_alpha + self.n_gamma


@dataclass
class PruneLog:
    """Record of every removal performed by :func:`prune_sample`."""

    events: list = field(default_factory=list)
    single_period_pairs: list = field(default_factory=list)

    def add(self, kind: str, **detail):
        self.events.append({"kind": kind, **detail})

    @property
    def n_removed_pairs(self) -> int:
        return sum(1 for e in self.events if e["kind"].startswith("pair"))

    def counts(self) -> dict:
        out: dict = {}
        for e in self.events:
            out[e["kind"]] = out.get(e["kind"], 0) + 1
        return out


def _as_finite_float(value, what: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise BadValue(f"non-numeric {what}: {value!r}")
    if not np.isfinite(v):
        raise BadValue(f"non-finite {what}: {value!r}")
    return v


def build_panel(
    records: Iterable[Sequence],
    regressor_names: Sequence[str] | None = None,
    drop_diagonal: bool = False,
) -> PanelData:
    """Group flat records into per-pair blocks.

    Parameters
    ----------
    records : iterable of sequences
        Each record is ``(exporter, importer, period, y, x_1, ..., x_K)``.
        Missing (i, j, t) cells are simply absent records.
    regressor_names : sequence of str, optional
        Labels for the K regressors; defaults to ``x1..xK``.
    drop_diagonal : bool
        Discard records with exporter == importer instead of keeping them.

    Raises
    ------
    DuplicateCell, NegativeOutcome, BadValue
    """
    records = list(records)
    if not records:
        raise BadValue("no records supplied")
    K = len(records[0]) - 4
    if K < 0:
        raise BadValue("records need at least (exporter, importer, period, y)")
    if regressor_names is None:
        regressor_names = tuple(f"x{k + 1}" for k in range(K))
    else:
        regressor_names = tuple(regressor_names)
        if len(regressor_names) != K:
            raise BadValue(
                f"{len(regressor_names)} regressor names for {K} regressor columns"
            )

    cells: dict = {}
    for rec in records:
        if len(rec) - 4 != K:
            raise BadValue("inconsistent regressor count across records")
        ex, im, t = rec[0], rec[1], rec[2]
        if drop_diagonal and ex == im:
            continue
        yv = _as_finite_float(rec[3], "outcome")
        if yv < 0:
            raise NegativeOutcome(f"negative outcome at ({ex}, {im}, {t}): {yv}")
        xv = [_as_finite_float(v, "regressor") for v in rec[4:]]
        key = (ex, im, t)
        if key in cells:
            raise DuplicateCell(f"duplicate cell {key}")
        cells[key] = (yv, xv)
    if not cells:
        raise BadValue("no records remain after filtering")

    exporters = tuple(sorted({k[0] for k in cells}))
    importers = tuple(sorted({k[1] for k in cells}))
    periods = tuple(sorted({k[2] for k in cells}))
    e_pos = {v: n for n, v in enumerate(exporters)}
    i_pos = {v: n for n, v in enumerate(importers)}
    t_pos = {v: n for n, v in enumerate(periods)}
    T = len(periods)

    grouped: dict = {}
    for (ex, im, t), (yv, xv) in cells.items():
        grouped.setdefault((ex, im), []).append((t_pos[t], yv, xv))

    pairs = []
    for (ex, im) in sorted(grouped):
        y = np.zeros(T)
        x = np.zeros((T, K))
        present = np.zeros(T, dtype=bool)
        for tt, yv, xv in grouped[(ex, im)]:
            y[tt] = yv
            x[tt] = xv
            present[tt] = True
        pairs.append(PairBlock(i=e_pos[ex], j=i_pos[im], y=y, x=x, present=present))

    return PanelData(
        exporters=exporters,
        importers=importers,
        periods=periods,
        pairs=tuple(pairs),
        regressor_names=regressor_names,
    )


def prune_sample(
    panel: PanelData, drop_zero_pairs: bool = True
) -> tuple[PanelData, PruneLog]:
    """Remove observations that carry no likelihood information.

    Iterates to a fixed point: pairs whose total outcome is zero (their
    pair effect diverges to minus infinity) and exporter-time or
    importer-time cells whose entire outcome column is zero (the cell
    effect has no finite root) are removed, each removal logged.
    ``drop_zero_pairs=False`` keeps zero-total pairs, which is the correct
    behaviour when no pair effect will be estimated.

    Returns the pruned panel and the log. Raises ``EmptySample`` when
    nothing remains.
    """
    log = PruneLog()
    st = panel.stacked()
    y, present = st.y, st.present.copy()
    exp_idx, imp_idx = st.exp_idx, st.imp_idx
    pair_alive = np.ones(panel.n_pairs, dtype=bool)

    def _pair_label(p):
        return panel.exporters[exp_idx[p]], panel.importers[imp_idx[p]]

    changed = True
    while changed:
        changed = False
        if drop_zero_pairs:
            totals = (y * present).sum(axis=1)
            newly_dead = pair_alive & (totals <= 0)
            for p in np.nonzero(newly_dead)[0]:
                ex, im = _pair_label(p)
                reason = (
                    "all-zero pair"
                    if present[p].any()
                    else "pair lost all periods"
                )
                log.add("pair-removed", exporter=ex, importer=im, reason=reason)
                pair_alive[p] = False
                present[p] = False
                changed = True
        else:
            newly_dead = pair_alive & ~present.any(axis=1)
            for p in np.nonzero(newly_dead)[0]:
                ex, im = _pair_label(p)
                log.add(
                    "pair-removed", exporter=ex, importer=im,
                    reason="pair lost all periods",
                )
                pair_alive[p] = False
                changed = True

        # separated fixed-effect cells: the whole outcome column is zero
        for role, idx, labels in (
            ("exporter", exp_idx, panel.exporters),
            ("importer", imp_idx, panel.importers),
        ):
            n_lab = len(labels)
            ysum = np.zeros((n_lab, panel.T))
            cnt = np.zeros((n_lab, panel.T), dtype=np.int64)
            np.add.at(ysum, idx, y * present)
            np.add.at(cnt, idx, present.astype(np.int64))
            bad = (cnt > 0) & (ysum <= 0)
            for c, t in zip(*np.nonzero(bad)):
                log.add(
                    f"{role}-time-cell-removed",
                    **{role: labels[c], "period": panel.periods[t]},
                )
                present[idx == c, t] = False
                changed = True

    if not pair_alive.any():
        raise EmptySample("no pairs remain after pruning")

    keep_t = np.nonzero(present.any(axis=0))[0]
    if keep_t.size == 0:
        raise EmptySample("no periods remain after pruning")
    keep_e = sorted({int(exp_idx[p]) for p in np.nonzero(pair_alive)[0]})
    keep_i = sorted({int(imp_idx[p]) for p in np.nonzero(pair_alive)[0]})
    e_new = {old: new for new, old in enumerate(keep_e)}
    i_new = {old: new for new, old in enumerate(keep_i)}

    new_pairs = []
    for p in np.nonzero(pair_alive)[0]:
        blk = panel.pairs[p]
        pr = present[p][keep_t]
        yv = np.where(pr, blk.y[keep_t], 0.0)
        xv = np.where(pr[:, None], blk.x[keep_t], 0.0)
        new_pairs.append(
            PairBlock(
                i=e_new[int(exp_idx[p])],
                j=i_new[int(imp_idx[p])],
                y=yv,
                x=xv,
                present=pr,
            )
        )
        if pr.sum() == 1:
            ex, im = _pair_label(p)
            log.single_period_pairs.append((ex, im))

    pruned = PanelData(
        exporters=tuple(panel.exporters[c] for c in keep_e),
        importers=tuple(panel.importers[c] for c in keep_i),
        periods=tuple(panel.periods[t] for t in keep_t),
        pairs=tuple(new_pairs),
        regressor_names=panel.regressor_names,
    )
    if log.single_period_pairs:
        log.add(
            "single-period-pairs-flagged",
            count=len(log.single_period_pairs),
            note="kept; they contribute zero to every score",
        )
    return pruned, log


def period_shares(lam: np.ndarray, present: np.ndarray | None = None) -> np.ndarray:
    """Share of a pair's fitted mean falling in each period.

    Entries where ``present`` is False are returned as zero and excluded
    from the normalization. All present entries must be positive and finite.
    """
    lam = np.asarray(lam, dtype=float)
    if present is None:
        present = np.ones(lam.shape, dtype=bool)
    vals = lam[present]
    if vals.size == 0:
        raise BadValue("no present entries")
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise BadValue("fitted means must be positive and finite")
    out = np.where(present, lam, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# CSV interface: header `exporter,importer,period,y,<regressors...>`,
# one row per present cell. A JSON sidecar may override column roles.
# ---------------------------------------------------------------------------

_DEFAULT_ROLES = {"exporter": "exporter", "importer": "importer", "period": "period", "outcome": "y"}


def read_panel_csv(
    path,
    sidecar=None,
    regressors: Sequence[str] | None = None,
    drop_diagonal: bool = False,
) -> PanelData:
    """Load a panel from CSV.

    Parameters
    ----------
    path : str or Path
        UTF-8 CSV with a header row.
    sidecar : str, Path, or dict, optional
        JSON mapping overriding column roles, with keys among
        ``exporter``, ``importer``, ``period``, ``outcome``,
        ``regressors`` (a list).
    regressors : sequence of str, optional
        Use only these columns as regressors (overrides the default of
        "every remaining column"); a sidecar ``regressors`` entry wins.
    """
    roles = dict(_DEFAULT_ROLES)
    side_reg = None
    if sidecar is not None:
        if isinstance(sidecar, dict):
            spec = sidecar
        else:
            with open(sidecar, "r", encoding="utf-8") as fh:
                spec = json.load(fh)
        for key in ("exporter", "importer", "period", "outcome"):
            if key in spec:
                roles[key] = spec[key]
        side_reg = spec.get("regressors")

    df = pd.read_csv(path, encoding="utf-8")
    for key, col in roles.items():
        if col not in df.columns:
            raise BadValue(f"unknown column for role {key!r}: {col!r}")
    reg_cols = side_reg if side_reg is not None else regressors
    if reg_cols is None:
        reg_cols = [c for c in df.columns if c not in roles.values()]
    for c in reg_cols:
        if c not in df.columns:
            raise BadValue(f"unknown column: {c!r}")

    cols = [roles["exporter"], roles["importer"], roles["period"], roles["outcome"]] + list(reg_cols)
    records = list(df[cols].itertuples(index=False, name=None))
    return build_panel(records, regressor_names=reg_cols, drop_diagonal=drop_diagonal)


def panel_to_records(panel: PanelData) -> list:
    """Flatten a panel back to (exporter, importer, period, y, x...) rows."""
    out = []
    for blk in panel.pairs:
        ex = panel.exporters[blk.i]
        im = panel.importers[blk.j]
        for t in np.nonzero(blk.present)[0]:
            out.append((ex, im, panel.periods[t], blk.y[t], *blk.x[t]))
    return out


def write_panel_csv(panel: PanelData, path) -> None:
    """Write the panel in the canonical CSV schema (absent cells omitted)."""
    rows = panel_to_records(panel)
    cols = ["exporter", "importer", "period", "y", *panel.regressor_names]
    pd.DataFrame(rows, columns=cols).to_csv(path, index=False, encoding="utf-8")

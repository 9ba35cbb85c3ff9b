"""Panel data container and CSV ingestion.

Unit and period indices are 1-based everywhere they are reported. A panel
holds one outcome row per unit, the set of treated units (all sharing one
adoption date) and, optionally, covariate series that are appended to the
control block as extra rows when factors are estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = [
    "PanelData",
    "PanelError",
    "load_panel",
    "split_control_treated",
    "treatment_indicator",
    "write_panel",
]


class PanelError(ValueError):
    """Invalid panel input; the message locates the problem."""


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelData:
    """Balanced panel with a single adoption date.

    Parameters
    ----------
    outcomes : ndarray, shape (n_units, T)
    treated_unit_ids : tuple of int
        1-based row indices of the treated units.
    treatment_start : int
        1-based index of the first treated period, i.e. ``T0 + 1``.
    covariates : ndarray, shape (K, T), optional
    unit_labels, time_labels : tuple of str, optional
    """

    outcomes: np.ndarray
    treated_unit_ids: tuple
    treatment_start: int
    covariates: np.ndarray | None = None
    unit_labels: tuple = field(default=())
    time_labels: tuple = field(default=())
    covariate_labels: tuple = field(default=())

    def __post_init__(self):
        Y = np.asarray(self.outcomes, dtype=float)
        if Y.ndim != 2:
            raise PanelError(f"outcomes must be a units x time matrix, got shape {Y.shape}")
        n, T = Y.shape
        bad = np.argwhere(~np.isfinite(Y))
        if bad.size:
            i, t = bad[0]
            raise PanelError(f"missing or non-finite outcome at unit {i + 1}, time {t + 1}")
        ids = tuple(int(i) for i in self.treated_unit_ids)
        if not ids:
            raise PanelError("no treated unit")
        if len(set(ids)) != len(ids):
            raise PanelError("duplicate treated unit ids")
        if min(ids) < 1 or max(ids) > n:
            raise PanelError(f"treated unit ids must lie in 1..{n}")
        if n - len(ids) < 2:
            raise PanelError(f"need at least 2 control units, got {n - len(ids)}")
        if T < 4:
            raise PanelError(f"need at least 4 periods, got {T}")
        T0 = int(self.treatment_start) - 1
        if not 1 <= T0 < T:
            raise PanelError(
                f"treatment start {self.treatment_start} leaves an empty pre- or post-period "
                f"(need 2 <= start <= {T})"
            )
        object.__setattr__(self, "outcomes", _readonly(Y))
        object.__setattr__(self, "treated_unit_ids", ids)
        object.__setattr__(self, "treatment_start", T0 + 1)
        if self.covariates is not None:
            X = np.atleast_2d(np.asarray(self.covariates, dtype=float))
            if X.shape[1] != T:
                raise PanelError(f"covariates have {X.shape[1]} periods, outcomes have {T}")
            bad = np.argwhere(~np.isfinite(X))
            if bad.size:
                k, t = bad[0]
                raise PanelError(f"missing or non-finite covariate {k + 1} at time {t + 1}")
            object.__setattr__(self, "covariates", _readonly(X))
        if not self.unit_labels:
            object.__setattr__(self, "unit_labels", tuple(str(i + 1) for i in range(n)))
        if not self.time_labels:
            object.__setattr__(self, "time_labels", tuple(str(t + 1) for t in range(T)))
        if len(self.unit_labels) != n or len(self.time_labels) != T:
            raise PanelError("label lengths do not match the outcome matrix")

    @property
    def T(self):
        return self.outcomes.shape[1]

    @property
    def T0(self):
        """Last pre-treatment period (1-based), equal to the pre-period length."""
        return self.treatment_start - 1

    @property
    def T1(self):
        return self.T - self.T0

    @property
    def N(self):
        """Number of control units."""
        return self.outcomes.shape[0] - len(self.treated_unit_ids)

    @property
    def control_unit_ids(self):
        treated = set(self.treated_unit_ids)
        return tuple(i for i in range(1, self.outcomes.shape[0] + 1) if i not in treated)

    @property
    def d(self):
        """Treatment indicator over time, shared by every treated unit."""
        return treatment_indicator(self.T, self.T0)

    def first_stage_block(self):
        """Controls with covariate series appended as pseudo-control rows."""
        controls, _ = split_control_treated(self)
        if self.covariates is None:
            return controls
        return np.vstack([controls, self.covariates])

    def __eq__(self, other):
        if not isinstance(other, PanelData):
            return NotImplemented
        same_cov = (self.covariates is None and other.covariates is None) or (
            self.covariates is not None
            and other.covariates is not None
            and np.array_equal(self.covariates, other.covariates)
        )
        return (
            np.array_equal(self.outcomes, other.outcomes)
            and self.treated_unit_ids == other.treated_unit_ids
            and self.treatment_start == other.treatment_start
            and self.unit_labels == other.unit_labels
            and self.time_labels == other.time_labels
            and same_cov
        )

    __hash__ = None


def treatment_indicator(T, T0):
    d = np.zeros(int(T))
    d[int(T0):] = 1.0
    return d


def split_control_treated(panel):
    """Return ``(controls, treated)`` outcome blocks in original row order."""
    rows_t = [i - 1 for i in panel.treated_unit_ids]
    rows_c = [i - 1 for i in panel.control_unit_ids]
    return panel.outcomes[rows_c], panel.outcomes[rows_t]


# ---------------------------------------------------------------------------
# CSV ingestion


def _first_switch(flags, label):
    """Index of the first 1 in a 0/1 path; rejects non-monotone paths."""
    f = np.asarray(flags)
    if not np.all((f == 0) | (f == 1)):
        raise PanelError(f"treated flag of unit {label!r} must be 0 or 1")
    if np.any(np.diff(f) < 0):
        raise PanelError(f"non-monotone treatment flag for unit {label!r}")
    on = np.flatnonzero(f == 1)
    return int(on[0]) if on.size else None


def _check_missing(frame, what):
    na = frame.isna()
    if na.values.any():
        r, c = np.argwhere(na.values)[0]
        raise PanelError(f"missing {what} at row {frame.index[r]!r}, column {frame.columns[c]!r}")


def _read_wide(path, schema):
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    time_col = schema.get("time", frame.columns[0])
    frame = frame.set_index(time_col)
    _check_missing(frame, "cell")
    try:
        values = frame.astype(float)
    except ValueError as exc:
        raise PanelError(f"non-numeric cell in wide CSV: {exc}") from None
    cov_labels = [str(c) for c in schema.get("covariates", [])]
    unit_labels = [str(c) for c in values.columns if str(c) not in cov_labels]
    treated = [str(u) for u in schema.get("treated", [])]
    if not treated:
        raise PanelError("no treated unit: wide format needs schema['treated']")
    missing = [u for u in treated if u not in unit_labels]
    if missing:
        raise PanelError(f"treated unit(s) {missing} not found among columns")
    time_labels = [str(t) for t in values.index]
    if "T0" in schema:
        T0 = int(schema["T0"])
    elif "treatment_start_time" in schema:
        lab = str(schema["treatment_start_time"])
        if lab not in time_labels:
            raise PanelError(f"treatment start time {lab!r} not in the time column")
        T0 = time_labels.index(lab)
    else:
        raise PanelError("wide format needs schema['T0'] or schema['treatment_start_time']")
    Y = values[unit_labels].to_numpy().T
    cov = values[cov_labels].to_numpy().T if cov_labels else None
    ids = tuple(unit_labels.index(u) + 1 for u in treated)
    return PanelData(Y, ids, T0 + 1, cov, tuple(unit_labels), tuple(time_labels), tuple(cov_labels))


def _read_long(path, schema):
    cols = {k: schema.get(k, k) for k in ("unit", "time", "value", "treated")}
    frame = pd.read_csv(path, dtype={cols["unit"]: str, cols["time"]: str},
                        float_precision="round_trip")
    absent = [c for c in cols.values() if c not in frame.columns]
    if absent:
        raise PanelError(f"long CSV lacks column(s) {absent}")
    dup = frame.duplicated([cols["unit"], cols["time"]])
    if dup.any():
        row = frame[dup].iloc[0]
        raise PanelError(f"duplicate (unit, time) = ({row[cols['unit']]}, {row[cols['time']]})")
    units = list(dict.fromkeys(frame[cols["unit"]]))
    times = list(dict.fromkeys(frame[cols["time"]]))
    if schema.get("sort_time", False):
        times = sorted(times, key=lambda s: float(s))
    wide = frame.pivot(index=cols["unit"], columns=cols["time"], values=cols["value"])
    wide = wide.reindex(index=units, columns=times)
    _check_missing(wide, "value")
    flags = frame.pivot(index=cols["unit"], columns=cols["time"], values=cols["treated"])
    flags = flags.reindex(index=units, columns=times).fillna(0).astype(int)
    cov_labels = [str(c) for c in schema.get("covariates", [])]
    starts = {}
    for u in units:
        s = _first_switch(flags.loc[u].to_numpy(), u)
        if s is not None:
            starts[u] = s
    if not starts:
        raise PanelError("no treated unit")
    if len(set(starts.values())) > 1:
        raise PanelError("treated units adopt at different periods (staggered adoption unsupported)")
    T0 = next(iter(starts.values()))
    unit_labels = [u for u in units if u not in cov_labels]
    Y = wide.loc[unit_labels].to_numpy(dtype=float)
    cov = wide.loc[cov_labels].to_numpy(dtype=float) if cov_labels else None
    ids = tuple(unit_labels.index(u) + 1 for u in units if u in starts)
    return PanelData(Y, ids, T0 + 1, cov, tuple(unit_labels), tuple(times), tuple(cov_labels))


def load_panel(path, format="wide-csv", schema=None):
    """Read a panel from CSV.

    Parameters
    ----------
    path : str or Path
    format : {"wide-csv", "long-csv"}
        Wide: one row per period, first column the time label, one column
        per unit. Long: columns ``unit,time,value,treated``.
    schema : dict, optional
        Wide format: ``treated`` (list of unit labels) and ``T0`` (number
        of pre-treatment periods) or ``treatment_start_time`` (time label of
        the first treated period); optional ``time`` column name.
        Long format: optional column renames (``unit``, ``time``,
        ``value``, ``treated``). Both: optional ``covariates`` (labels of
        series to treat as covariates rather than units).
    """
    schema = dict(schema or {})
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"panel file not found: {path}")
    if format in ("wide-csv", "wide"):
        return _read_wide(path, schema)
    if format in ("long-csv", "long"):
        return _read_long(path, schema)
    raise PanelError(f"unknown panel format {format!r}; use 'wide-csv' or 'long-csv'")


def write_panel(panel, path, format="wide-csv"):
    """Write ``panel`` in either CSV layout (covariates as extra series)."""
    labels = list(panel.unit_labels) + list(panel.covariate_labels)
    rows = panel.outcomes
    if panel.covariates is not None:
        rows = np.vstack([rows, panel.covariates])
    if format in ("wide-csv", "wide"):
        frame = pd.DataFrame(rows.T, columns=labels)
        frame.insert(0, "time", list(panel.time_labels))
        frame.to_csv(path, index=False, float_format="%.17g")
        return
    if format not in ("long-csv", "long"):
        raise PanelError(f"unknown panel format {format!r}")
    treated = {panel.unit_labels[i - 1] for i in panel.treated_unit_ids}
    d = panel.d.astype(int)
    recs = []
    for lab, row in zip(labels, rows):
        flag = d if lab in treated else np.zeros_like(d)
        for t, (tl, v) in enumerate(zip(panel.time_labels, row)):
            recs.append((lab, tl, v, int(flag[t])))
    pd.DataFrame(recs, columns=["unit", "time", "value", "treated"]).to_csv(
        path, index=False, float_format="%.17g"
    )

"""Panel data model and two-way (unit/time) transformations.

Outcome and treatment panels are stored dense, units in rows and periods in
columns, with rows and columns in a canonical sorted order so that every
downstream computation is reproducible from the same input regardless of row
order in the source file.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateScale,
    DuplicateCell,
    InconsistentAggregate,
    NonFiniteValue,
    RankDeficientPsi,
    UnbalancedPanel,
)

__all__ = [
    "BalancedPanel",
    "AggregateData",
    "ExposureVector",
    "SampleSplit",
    "demean_two_way",
    "scaling_factors",
    "default_t0",
    "load_panel",
    "read_panel_csv",
    "write_panel_csv",
    "metadata",
]


def _as_readonly(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _require_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or infinite entries")


@dataclass(frozen=True)
class BalancedPanel:
    """Balanced outcome/treatment panel with ``n`` units over ``T`` periods.

    Attributes
    ----------
    Y, W : ndarray, shape (n, T)
        Outcome and treatment matrices, row i is unit ``unit_ids[i]`` and
        column t is period ``time_ids[t]``.
    unit_ids, time_ids : tuple
        Canonical labels; ``time_ids`` is strictly increasing.
    """

    Y: np.ndarray
    W: np.ndarray
    unit_ids: tuple
    time_ids: tuple

    def __post_init__(self):
        Y = _as_readonly(self.Y)
        W = _as_readonly(self.W)
        if Y.ndim != 2 or W.shape != Y.shape:
            raise DataError(f"Y and W must be equal-shape 2-d arrays, got {Y.shape} and {W.shape}")
        n, T = Y.shape
        if n < 3 or T < 3:
            raise DataError(f"panel needs at least 3 units and 3 periods, got n={n}, T={T}")
        if len(self.unit_ids) != n or len(self.time_ids) != T:
            raise DataError("unit_ids/time_ids lengths do not match the data shape")
        _require_finite(Y, "Y")
        _require_finite(W, "W")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "time_ids", tuple(self.time_ids))

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class AggregateData:
    """Aggregate instrument ``Z`` and deterministic controls ``Psi``.

    ``Psi`` has shape (T, p) with an all-ones first column; ``p < T - 2`` so
    both sample halves retain residual degrees of freedom.
    """

    Z: np.ndarray
    Psi: np.ndarray

    def __post_init__(self):
        Z = _as_readonly(self.Z)
        Psi = _as_readonly(self.Psi)
        if Z.ndim != 1:
            raise DataError(f"Z must be 1-d, got shape {Z.shape}")
        if Psi.ndim != 2 or Psi.shape[0] != Z.shape[0]:
            raise DataError(f"Psi must be (T, p) with T={Z.shape[0]}, got {Psi.shape}")
        _require_finite(Z, "Z")
        _require_finite(Psi, "Psi")
        T, p = Psi.shape
        if p < 1 or not np.all(Psi[:, 0] == 1.0):
            raise DataError("first column of Psi must be the constant 1")
        if p >= T - 2:
            raise DataError(f"need p < T - 2, got p={p}, T={T}")
        if np.linalg.matrix_rank(Psi) < p:
            raise RankDeficientPsi("Psi does not have full column rank")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Psi", Psi)

    @property
    def T(self) -> int:
        return self.Z.shape[0]

    @property
    def p(self) -> int:
        return self.Psi.shape[1]


@dataclass(frozen=True)
class ExposureVector:
    """Unit-level exposure measure ``D`` entering the weight constraints."""

    D: np.ndarray

    def __post_init__(self):
        D = _as_readonly(self.D)
        if D.ndim != 1:
            raise DataError(f"D must be 1-d, got shape {D.shape}")
        _require_finite(D, "D")
        if np.ptp(D) == 0.0:
            raise DataError("exposures are constant across units")
        object.__setattr__(self, "D", D)

    @property
    def n(self) -> int:
        return self.D.shape[0]


@dataclass(frozen=True)
class SampleSplit:
    """Split of the T periods into a pre block (1..T0) and post block."""

    T0: int
    T1: int

    def __post_init__(self):
        if self.T0 < 1 or self.T1 < 1:
            raise DataError(f"both blocks must be non-empty, got T0={self.T0}, T1={self.T1}")

    @property
    def T(self) -> int:
        return self.T0 + self.T1

    def validate_for(self, p: int) -> None:
        """Require enough periods in each block to fit (Psi, Z) with slack."""
        if self.T0 < p + 2:
            raise DataError(f"pre block too short: T0={self.T0} < p + 2 = {p + 2}")
        if self.T1 < p + 2:
            raise DataError(f"post block too short: T1={self.T1} < p + 2 = {p + 2}")


def demean_two_way(M: np.ndarray) -> np.ndarray:
    """Remove unit means, period means, and add back the grand mean.

    The result is orthogonal to any additive structure a_i + b_t; the map is
    idempotent up to floating-point roundoff.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DataError(f"expected a matrix, got shape {M.shape}")
    return M - M.mean(axis=1, keepdims=True) - M.mean(axis=0, keepdims=True) + M.mean()


def scaling_factors(panel: BalancedPanel, t0: int) -> tuple[float, float]:
    """Pre-period noise scales for Y and W.

    For each matrix the scale is the mean squared entry of the two-way
    demeaned pre block, i.e. (1/(n*T0)) * sum of squared deviations after
    removing unit and period means over t <= T0.

    Raises
    ------
    DegenerateScale
        If either pre block is exactly additive in unit and period effects.
    """
    if not 1 <= t0 <= panel.T:
        raise DataError(f"t0={t0} outside 1..{panel.T}")
    out = []
    for M, name in ((panel.Y, "Y"), (panel.W, "W")):
        block = M[:, :t0]
        s2 = float(np.mean(demean_two_way(block) ** 2))
        floor = 1e-26 * max(float(np.mean(block**2)), np.finfo(float).tiny)
        if s2 <= floor:
            raise DegenerateScale(f"pre-period {name} is two-way additive; its noise scale is zero")
        out.append(s2)
    return out[0], out[1]


def default_t0(T: int) -> int:
    """Default pre-period length, one third of the sample (rounded down)."""
    if T < 9:
        raise DataError(f"default split needs T >= 9, got T={T}")
    return T // 3


# -- loading -------------------------------------------------------------------


def _parse_float(token, field: str, context: str) -> float:
    try:
        v = float(token)
    except (TypeError, ValueError):
        raise DataError(f"cannot parse {field}={token!r} at {context}") from None
    if not math.isfinite(v):
        raise NonFiniteValue(f"{field} is non-finite at {context}")
    return v


def _canonical_labels(labels: Sequence, what: str, allow_dates: bool) -> list:
    """Return labels in canonical sorted order (numeric if possible)."""
    try:
        return sorted(labels, key=int)
    except (TypeError, ValueError):
        pass
    if allow_dates:
        try:
            return sorted(labels, key=lambda s: date.fromisoformat(str(s)))
        except ValueError:
            pass
    if what == "time":
        raise DataError("time labels must be integers or ISO dates")
    return sorted(labels, key=str)


def load_panel(
    rows: Iterable[Mapping[str, object]],
) -> tuple[BalancedPanel, AggregateData, ExposureVector | None]:
    """Assemble panel structures from long-format records.

    Each record carries ``unit``, ``time``, ``y``, ``w``, ``z`` and may carry
    ``d`` (constant within unit) and ``psi_2`` .. ``psi_p`` (constant within
    period). A constant column is always prepended to Psi.
    """
    rows = list(rows)
    if not rows:
        raise DataError("no data rows")
    keys = set(rows[0].keys())
    for need in ("unit", "time", "y", "w", "z"):
        if need not in keys:
            raise DataError(f"missing required column {need!r}")
    has_d = "d" in keys
    psi_names = sorted((k for k in keys if k.startswith("psi_")), key=lambda k: int(k.split("_", 1)[1]))
    if psi_names and [int(k.split("_", 1)[1]) for k in psi_names] != list(range(2, 2 + len(psi_names))):
        raise DataError(f"psi columns must be contiguous psi_2..psi_p, got {psi_names}")

    units = _canonical_labels({str(r["unit"]) for r in rows}, "unit", allow_dates=False)
    times = _canonical_labels({str(r["time"]) for r in rows}, "time", allow_dates=True)
    uix = {u: i for i, u in enumerate(units)}
    tix = {t: j for j, t in enumerate(times)}
    n, T = len(units), len(times)

    Y = np.empty((n, T))
    W = np.empty((n, T))
    Z = np.full(T, np.nan)
    Psi_extra = np.full((T, len(psi_names)), np.nan)
    D = np.full(n, np.nan)
    seen = np.zeros((n, T), dtype=bool)

    for r in rows:
        u, t = str(r["unit"]), str(r["time"])
        i, j = uix[u], tix[t]
        ctx = f"unit={u}, time={t}"
        if seen[i, j]:
            raise DuplicateCell(f"duplicate cell at {ctx}")
        seen[i, j] = True
        Y[i, j] = _parse_float(r["y"], "y", ctx)
        W[i, j] = _parse_float(r["w"], "w", ctx)
        z = _parse_float(r["z"], "z", ctx)
        if np.isnan(Z[j]):
            Z[j] = z
        elif Z[j] != z:
            raise InconsistentAggregate(f"z differs across rows of time={t}")
        for k, name in enumerate(psi_names):
            v = _parse_float(r[name], name, ctx)
            if np.isnan(Psi_extra[j, k]):
                Psi_extra[j, k] = v
            elif Psi_extra[j, k] != v:
                raise InconsistentAggregate(f"{name} differs across rows of time={t}")
        if has_d:
            d = _parse_float(r["d"], "d", ctx)
            if np.isnan(D[i]):
                D[i] = d
            elif D[i] != d:
                raise InconsistentAggregate(f"d differs across rows of unit={u}")

    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise UnbalancedPanel(f"missing cell at unit={units[i]}, time={times[j]}")

    panel = BalancedPanel(Y, W, tuple(units), tuple(times))
    Psi = np.hstack([np.ones((T, 1)), Psi_extra]) if psi_names else np.ones((T, 1))
    agg = AggregateData(Z, Psi)
    exposure = ExposureVector(D) if has_d else None
    return panel, agg, exposure


def read_panel_csv(path) -> tuple[BalancedPanel, AggregateData, ExposureVector | None]:
    """Load a long-format CSV with header ``unit,time,y,w,z[,d][,psi_2..]``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        return load_panel(reader)


def write_panel_csv(
    path,
    panel: BalancedPanel,
    agg: AggregateData,
    exposure: ExposureVector | None = None,
) -> None:
    """Write the long-format CSV; floats use repr so reloading is bit-exact."""
    psi_names = [f"psi_{k}" for k in range(2, agg.p + 1)]
    header = ["unit", "time", "y", "w", "z"] + (["d"] if exposure is not None else []) + psi_names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, u in enumerate(panel.unit_ids):
            for j, t in enumerate(panel.time_ids):
                row = [u, t, repr(float(panel.Y[i, j])), repr(float(panel.W[i, j])), repr(float(agg.Z[j]))]
                if exposure is not None:
                    row.append(repr(float(exposure.D[i])))
                row.extend(repr(float(agg.Psi[j, k])) for k in range(1, agg.p))
                writer.writerow(row)


def metadata(panel: BalancedPanel, agg: AggregateData) -> dict:
    """Summary block embedded in JSON reports."""
    return {
        "n": panel.n,
        "T": panel.T,
        "p": agg.p,
        "unit_ids": list(panel.unit_ids),
        "time_ids": list(panel.time_ids),
    }

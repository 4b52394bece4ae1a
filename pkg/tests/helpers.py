"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from aggshock.panel import AggregateData, BalancedPanel, ExposureVector

import oracles


def make_panel(Y, W) -> BalancedPanel:
    Y = np.asarray(Y, dtype=float)
    n, T = Y.shape
    return BalancedPanel(Y, W, tuple(range(1, n + 1)), tuple(range(1, T + 1)))


def random_instance(
    rng: np.random.Generator, n: int, T: int, p_extra: int = 0
) -> tuple[BalancedPanel, ExposureVector, AggregateData]:
    """Random panel, exposure vector, and aggregate data as package types."""
    Y, W, Z, Psi, D = oracles.random_panel_data(rng, n, T, p_extra)
    return make_panel(Y, W), ExposureVector(D), AggregateData(Z, Psi)


def panel_rows(panel: BalancedPanel, agg: AggregateData, exposure=None):
    """Long-format records as consumed by load_panel."""
    rows = []
    for i, u in enumerate(panel.unit_ids):
        for j, t in enumerate(panel.time_ids):
            row = {
                "unit": u,
                "time": t,
                "y": panel.Y[i, j],
                "w": panel.W[i, j],
                "z": agg.Z[j],
            }
            if exposure is not None:
                row["d"] = exposure.D[i]
            for k in range(1, agg.p):
                row[f"psi_{k + 1}"] = agg.Psi[j, k]
            rows.append(row)
    return rows

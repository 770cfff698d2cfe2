"""Drive a scenario through the leapfrog pipeline into a knowledge base."""

from __future__ import annotations

import logging

import numpy as np

from .. import __version__
from ..particles import Snapshot
from ..sph import NumericalError, check_diagnostics, diagnostics, step
from .scenario import Scenario, build_table
from .snapshot import KnowledgeBase

__all__ = ["run_simulation"]

logger = logging.getLogger(__name__)


def _fail(kb, n, exc):
    logger.error("run failed at step %d: %s", n, exc)
    kb.finish("failed", failure={"step": n, "message": str(exc)})
    if isinstance(exc, NumericalError):
        raise exc
    raise NumericalError(str(exc), n) from exc


def run_simulation(scn: Scenario, out_dir, table=None) -> KnowledgeBase:
    """Run ``scn`` and persist snapshots every ``run.snapshot_interval`` steps.

    A numeric failure stops the run; it is recorded in the manifest
    (``status: failed`` with the step) and re-raised.
    """
    run = scn["run"]
    dt, steps, every = float(run["dt"]), int(run["steps"]), int(run["snapshot_interval"])
    cfg = scn.force_config()
    pipeline = scn.pipeline()
    kb = KnowledgeBase.create(out_dir, scn.config, __version__)

    table = build_table(scn) if table is None else table.copy()
    try:
        acc = pipeline(table, cfg)
        if not np.isfinite(acc).all():
            raise NumericalError("non-finite initial accelerations", 0)
        diag = diagnostics(table, cfg, dt, pipeline.state.smoothing_length)
        check_diagnostics(diag, 0)
    except (NumericalError, ValueError) as exc:
        _fail(kb, 0, exc)
    kb.write_snapshot(Snapshot.capture(table, 0.0, 0), diag)
    p0, scale0 = diag["momentum"], diag["momentum_scale"]
    scale = scale0
    max_drift = 0.0
    rho_min, rho_max = diag["density_min"], diag["density_max"]

    for n in range(1, steps + 1):
        try:
            res = step(table, cfg, dt, pipeline, acc, step_index=n)
        except (NumericalError, ValueError) as exc:
            _fail(kb, n, exc)
        table, acc, diag = res.table, res.accelerations, res.diagnostics
        # a run starting at rest is measured against its largest momentum scale
        if scale0 == 0:
            scale = max(scale, diag["momentum_scale"])
        max_drift = max(max_drift, float(np.linalg.norm(np.subtract(diag["momentum"], p0))))
        rho_min = min(rho_min, diag["density_min"])
        rho_max = max(rho_max, diag["density_max"])
        if n % every == 0:
            kb.write_snapshot(Snapshot.capture(table, n * dt, n), diag)

    final = {
        "steps": steps,
        "time": steps * dt,
        "momentum_initial": p0,
        "momentum_final": diag["momentum"],
        "momentum_scale": scale,
        "momentum_drift": max_drift / scale if scale > 0 else 0.0,
        "density_min": rho_min,
        "density_max": rho_max,
    }
    kb.finish("complete", final=final)
    return kb

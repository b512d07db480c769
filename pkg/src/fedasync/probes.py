"""Empirical checks of the convergence analysis' preconditions and conclusion.

The probe runs the async protocol on a convex objective over a grid of epoch
budgets with the learning rate scaled as ``eta0 / sqrt(E)``, tracks the
smallest full-objective squared gradient norm each run attains, and reports
the empirical constants behind the analysis' assumptions.  The weak-convexity
constant and the surrogate objective used by the analysis have no estimator;
the probe instead checks the operational condition ``eta < 1 / L_hat``.

Everything here is reported, never enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import models
from .data import full_batch
from .models import AssumptionEstimates, GradientSample
from .sim import SimConfig, run_async

__all__ = ["ProbeEntry", "TheoremReport", "theorem_probe", "write_theorem_report"]

CONVEX_KINDS = ("l2-linear-regression", "logistic-regression", "softmax-classifier")

REPORT_COLUMNS = (
    "e_total", "eta", "min_grad_norm_sq", "b1_sq_hat", "b2_sq_hat", "l_hat",
    "eta_lt_inv_l", "max_staleness", "k_bound", "lambda",
)


@dataclass(frozen=True)
class ProbeEntry:
    """Results of one budgeted run within the probe grid."""

    e_total: int
    eta: float
    min_grad_norm_sq: float
    b1_sq_hat: float
    b2_sq_hat: float
    l_hat: float
    eta_lt_inv_l: bool
    max_staleness: int


@dataclass
class TheoremReport:
    """Per-budget probe entries plus grid-level verdicts."""

    entries: list[ProbeEntry]
    lambda_ratio: float
    k_bound: int
    slack: float
    notes: list[str]

    @property
    def non_increasing(self) -> bool:
        """Whether the gradient-norm floor shrinks with the budget, within slack."""
        floors = [e.min_grad_norm_sq for e in self.entries]
        return all(b <= self.slack * a for a, b in zip(floors, floors[1:]))

    @property
    def k_bound_respected(self) -> bool:
        return all(e.max_staleness <= self.k_bound for e in self.entries)

    @property
    def eta_condition_held(self) -> bool:
        return all(e.eta_lt_inv_l for e in self.entries)


def _min_full_grad_sq(cfg: SimConfig, snapshots) -> tuple[float, list[GradientSample]]:
    """Smallest squared gradient norm of the full objective over w_0 .. w_{E-1},
    plus (w, grad) samples for the smoothness estimate."""
    fb = full_batch(cfg.train)
    best = math.inf
    samples = []
    for w in snapshots:
        g = models.grad(cfg.spec, w, fb).values
        gsq = float(g @ g)
        best = min(best, gsq)
        samples.append(GradientSample(w.values, g, g))
    return best, samples


def theorem_probe(
    base: SimConfig,
    e_grid: Sequence[int],
    eta0: float = 1.0,
    slack: float = 1.1,
) -> TheoremReport:
    """Run the probe grid and collect the report.

    ``base`` fixes the data, shards, and protocol knobs; each grid entry
    overrides the epoch budget and sets ``eta = eta0 / sqrt(E)``.
    """
    if base.spec.kind not in CONVEX_KINDS:
        raise ValueError(f"probe needs a convex model kind, not {base.spec.kind!r}")
    if len(e_grid) < 3:
        raise ValueError("probe grid needs at least three epoch budgets")
    if sorted(e_grid) != list(e_grid):
        raise ValueError("probe grid must be increasing in E")

    entries: list[ProbeEntry] = []
    notes = [
        "weak-convexity constant has no estimator; not checked",
        "analysis constants epsilon and the surrogate objective are proof-side only",
    ]
    for e_total in e_grid:
        hp = replace(base.hp, e_total=int(e_total), eta=eta0 / math.sqrt(e_total))
        cfg = replace(base, hp=hp, record_params=True, record_gradients=True)
        state, trace = run_async(cfg)
        if trace.diverged:
            raise RuntimeError(f"probe run at E={e_total} diverged: {'; '.join(trace.notes)}")
        # min over w_0 .. w_{E-1}, matching the bound's index range
        floor, eval_samples = _min_full_grad_sq(cfg, trace.param_snapshots[: e_total])
        batch_est = models.estimate_assumption_constants(trace.gradient_samples)
        smooth_est = models.estimate_assumption_constants(eval_samples)
        entries.append(
            ProbeEntry(
                e_total=int(e_total),
                eta=hp.eta,
                min_grad_norm_sq=floor,
                b1_sq_hat=batch_est.b1_sq_hat,
                b2_sq_hat=batch_est.b2_sq_hat,
                l_hat=smooth_est.l_hat,
                eta_lt_inv_l=bool(smooth_est.l_hat > 0 and hp.eta < 1.0 / smooth_est.l_hat),
                max_staleness=trace.max_staleness,
            )
        )
        if trace.max_staleness > hp.k_bound:
            notes.append(
                f"E={e_total}: observed staleness {trace.max_staleness} exceeded "
                f"assumed bound {hp.k_bound}"
            )
    return TheoremReport(
        entries=entries,
        lambda_ratio=base.hp.imbalance_ratio,
        k_bound=base.hp.k_bound,
        slack=slack,
        notes=notes,
    )


def write_theorem_report(path, report: TheoremReport) -> None:
    """Persist the probe grid as CSV, one row per epoch budget."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for e in report.entries:
            fh.write(
                f"{e.e_total},{e.eta:.17g},{e.min_grad_norm_sq:.17g},"
                f"{e.b1_sq_hat:.17g},{e.b2_sq_hat:.17g},{e.l_hat:.17g},"
                f"{e.eta_lt_inv_l},{e.max_staleness},{report.k_bound},"
                f"{report.lambda_ratio:.17g}\n"
            )
        fh.write(f"# non_increasing_within_{report.slack:g}x={report.non_increasing}\n")
        for note in report.notes:
            fh.write(f"# {note}\n")

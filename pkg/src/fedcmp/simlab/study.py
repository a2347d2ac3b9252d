"""Replication harness: run the federated protocol on simulated data and summarize."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..brdac import br_fit_site, Target
from ..dac import as_subset, pooled_oracle, subset_label
from ..data import CalibrationFeatures
from ..errors import FedCmpError, ReplicateFailed
from ..fedproto import InProcessTransport, SessionConfig, SiteWorker, coordinator_run
from ..outcome import BasisSpec, FittedOutcomeModel
from .scenarios import ScenarioSpec, gen_scenario, true_value

METHODS = ("DAC", "DOR")
DEFAULT_TARGETS = (((1, 4), (1, 2, 3, 4)),)
LOSSLESS_RTOL = 1e-8


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    N: int
    method: str
    k: int
    k_prime: int
    subset: tuple
    truth: float
    bias: float
    sd: float
    ese: float
    cp: float
    reps: int

    @property
    def bias_x1e3(self) -> float:
        return 1e3 * self.bias


def _check_lossless(sites, reports, targets) -> None:
    """Compare the protocol's DAC output with a pooled-row recomputation."""
    feats = CalibrationFeatures()
    by_site = {d.site: d for d in sites}
    tg = {d.site: Target(d.n, feats.mean(d.X)) for d in sites}
    subsets = sorted({s for _, s in targets})
    fits = {s: br_fit_site(d, tg, feats, subsets=subsets) for s, d in by_site.items()}
    basis = BasisSpec("linear", n_covariates=sites[0].p)
    weights = {(l, s): fits[s].calibrations[l] for s in by_site for l in by_site if l != s}
    for (k, kp), subset in targets:
        models = {s: FittedOutcomeModel(basis, fits[s].betas[subset], site=s) for s in by_site}
        ref = pooled_oracle(by_site, models, weights, subset, k, kp)
        got = reports[("DAC", k, kp, subset)]
        if abs(got[0] - ref.tau) > LOSSLESS_RTOL * max(1.0, abs(ref.tau)) or abs(
            got[1] ** 2 - ref.variance
        ) > LOSSLESS_RTOL * ref.variance:
            raise FedCmpError(f"distributed estimate {got} differs from pooled {ref.tau, ref.variance}")


def run_replicate(spec: ScenarioSpec, seed: int, targets=DEFAULT_TARGETS, check_lossless: bool = False) -> dict:
    """One replicate: simulate, run both rounds in-process, return {(method, k, k', subset): (tau, se)}."""
    sites = gen_scenario(spec, seed)
    cfg = SessionConfig(
        session_id=f"{spec.scenario}-{spec.N}-{seed}",
        sites=tuple(d.site for d in sites),
        mode="dac-br",
        basis=BasisSpec("linear"),
        pairs=tuple(sorted({p for p, _ in targets})),
        subsets=tuple(sorted({s for _, s in targets})),
    )
    reports = coordinator_run(cfg, InProcessTransport([SiteWorker(d) for d in sites]))
    out = {r.key: (r.tau_hat, r.se) for r in reports}
    if check_lossless:
        _check_lossless(sites, out, targets)
    return out


def _replicate_job(args):
    spec, seed, rep, targets, check = args
    try:
        return run_replicate(spec, seed, targets, check)
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise ReplicateFailed(f"scenario {spec.scenario}, N={spec.N}, replicate {rep} (seed {seed}): "
                              f"{type(exc).__name__}: {exc}", rep) from exc


def summarize(spec, method, k, kp, subset, truth, taus, ses) -> MetricsRow:
    taus, ses = np.asarray(taus), np.asarray(ses)
    covered = np.abs(taus - truth) <= 1.959963984540054 * ses
    return MetricsRow(
        spec.scenario, spec.N, method, k, kp, subset, truth,
        float(math.fsum(taus) / taus.size - truth),
        float(np.std(taus, ddof=1)),
        float(math.fsum(ses) / ses.size),
        float(100.0 * covered.mean()),
        int(taus.size),
    )


def run_study(specs, reps: int = 200, methods=METHODS, seed: int = 1, targets=DEFAULT_TARGETS,
              workers: int = 1, truth_draws: int = 10**7, check_lossless: bool = False,
              progress=None) -> list:
    """Replicate every scenario ``reps`` times and summarize Bias, SD, ESE and CP.

    Replicate r of every scenario uses seed ``seed + r``. Results do not depend
    on ``workers``; a failing replicate aborts the study.
    """
    if reps < 50:
        raise ValueError("a study needs at least 50 replicates")
    if isinstance(specs, ScenarioSpec):
        specs = [specs]
    targets = tuple(((int(p[0]), int(p[1])), as_subset(s)) for p, s in targets)
    methods = tuple(methods)
    rows = []
    for spec in specs:
        jobs = [(spec, seed + r, r, targets, check_lossless) for r in range(reps)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_replicate_job, jobs, chunksize=max(1, reps // (4 * workers))))
        else:
            results = []
            for job in jobs:
                results.append(_replicate_job(job))
                if progress is not None:
                    progress(spec, job[2])
        for (k, kp), subset in targets:
            truth = true_value(spec, subset, k, kp, truth_draws)[0]
            for method in methods:
                key = (method, k, kp, subset)
                taus = [res[key][0] for res in results]
                ses = [res[key][1] for res in results]
                rows.append(summarize(spec, method, k, kp, subset, truth, taus, ses))
    return rows


CSV_FIELDS = ("scenario", "N", "method", "k", "k_prime", "subset", "truth", "bias", "bias_x1e3",
              "sd", "ese", "cp", "reps")


def write_metrics_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in rows:
            d = asdict(r)
            d["subset"] = subset_label(r.subset)
            d["bias_x1e3"] = r.bias_x1e3
            w.writerow([d[f] if not isinstance(d[f], float) else f"{d[f]:.17g}" for f in CSV_FIELDS])
    return path


def plot_metrics(rows, out_dir) -> list:
    """Bias and coverage bar charts per scenario; needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [f"({r.scenario}) {r.method} {r.k}v{r.k_prime}|{subset_label(r.subset)}" for r in rows]
    paths = []
    for attr, title, ref in (("bias", "Monte Carlo bias", 0.0), ("cp", "Coverage of 95% intervals (%)", 95.0)):
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(rows)), 4))
        ax.bar(range(len(rows)), [getattr(r, attr) for r in rows],
               color=["tab:blue" if r.method == "DAC" else "tab:orange" for r in rows])
        ax.axhline(ref, color="k", lw=0.8)
        ax.set_xticks(range(len(rows)), labels, rotation=60, ha="right", fontsize=7)
        ax.set_title(title)
        fig.tight_layout()
        p = out_dir / f"{attr}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedcmp.calib import CalibrationProblem, entropy_balance
from fedcmp.dac import site_aggregates
from fedcmp.data import CalibrationFeatures, SiteDataset
from fedcmp.outcome import BasisSpec, fit_outcome

settings.register_profile(
    "fedcmp",
    deadline=None,
    derandomize=True,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("fedcmp")


def make_sites(seed, K=3, p=2, nmin=40, nmax=120, shift=0.15):
    rng = np.random.default_rng(seed)
    slope = rng.normal(size=p)
    sites = {}
    for s in range(1, K + 1):
        n = int(rng.integers(nmin, nmax + 1))
        X = rng.normal(shift * s * rng.uniform(-1, 1, size=p), 1.0, size=(n, p))
        y = 2.0 * s + X @ slope + 0.3 * X[:, 0] ** 2 + rng.normal(scale=0.5, size=n)
        sites[s] = SiteDataset(s, y, X)
    return sites


def calibrate_all(sites, feats=CalibrationFeatures()):
    gbar = {s: feats.mean(d.X) for s, d in sites.items()}
    return {
        (l, s): entropy_balance(CalibrationProblem(feats(d.X), gbar[l], s, l))
        for s, d in sites.items()
        for l in sites
        if l != s
    }


def fit_models(sites, kinds=None):
    kinds = kinds or {}
    return {s: fit_outcome(d.X, d.y, BasisSpec(kinds.get(s, "linear")), site=s) for s, d in sites.items()}


def aggregates(sites, models, weights):
    sizes = {s: d.n for s, d in sites.items()}
    return {
        s: site_aggregates(d, models, {l: weights[(l, s)] for l in sites if l != s}, sizes)
        for s, d in sites.items()
    }


def probs_of(weights, sites):
    """Normalized weights keyed (l, s), uniform on the diagonal."""
    out = {(l, s): cr.weights for (l, s), cr in weights.items()}
    for s, d in sites.items():
        out[(s, s)] = np.full(d.n, 1.0 / d.n)
    return out


@pytest.fixture(scope="module")
def setup3():
    sites = make_sites(11, K=3)
    models = fit_models(sites, {1: "cubic-spline", 3: "cubic-spline"})
    weights = calibrate_all(sites)
    return sites, models, weights, aggregates(sites, models, weights)


def constant_toy(n=2):
    """Two sites, identical covariates, Y = 1 at site 1 and Y = 3 at site 2."""
    X = np.array([[0.0], [1.0]] * (n // 2))
    return {1: SiteDataset(1, np.ones(n), X), 2: SiteDataset(2, np.full(n, 3.0), X)}


# acceptance reporting: one pass/fail line per criterion, echoed inline and in the summary

ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

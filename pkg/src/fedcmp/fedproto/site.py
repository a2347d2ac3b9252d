"""Site-side protocol steps and the per-site message handler."""

from __future__ import annotations

import threading

from ..brdac import Target, br_aggregates, br_fit_site
from ..calib import CalibrationProblem, entropy_balance
from ..dac import site_aggregates
from ..data import SiteDataset
from ..errors import FedCmpError, InfeasibleTarget, SchemaViolation
from ..outcome import fit_outcome
from .messages import (
    Round1Broadcast,
    Round1Request,
    Round1Upload,
    Round2Upload,
    SessionConfig,
    SiteError,
    decode,
    encode,
)


def site_round1(data: SiteDataset, cfg: SessionConfig) -> Round1Upload:
    """Local covariate means, plus the local outcome model in nonparametric mode."""
    if data.site not in cfg.sites:
        raise SchemaViolation(f"site {data.site} is not part of session {cfg.session_id}")
    gbar = cfg.calib.mean(data.X)
    model = None
    if cfg.mode == "dac-nonparametric":
        model = fit_outcome(data.X, data.y, cfg.basis, site=data.site)
    return Round1Upload(cfg.session_id, data.site, data.n, gbar, model)


def _check_broadcast(data: SiteDataset, broadcast: Round1Broadcast, cfg: SessionConfig) -> None:
    if broadcast.session_id != cfg.session_id:
        raise SchemaViolation(f"broadcast for session {broadcast.session_id}, expected {cfg.session_id}")
    if sorted(broadcast.uploads) != list(cfg.sites):
        raise SchemaViolation(f"broadcast covers sites {sorted(broadcast.uploads)}, session has {list(cfg.sites)}")
    for s, u in broadcast.uploads.items():
        if u.site != s or u.session_id != cfg.session_id:
            raise SchemaViolation(f"broadcast entry {s} is inconsistent")
        if cfg.mode == "dac-nonparametric" and u.model is None:
            raise SchemaViolation(f"broadcast entry {s} has no outcome model")


def site_round2(data: SiteDataset, broadcast: Round1Broadcast, cfg: SessionConfig) -> Round2Upload:
    """Calibrate toward every other site and condense local rows into aggregates."""
    _check_broadcast(data, broadcast, cfg)
    j = data.site
    ups = broadcast.uploads
    if cfg.mode == "dac-br":
        targets = {l: Target(u.n, u.gbar) for l, u in ups.items()}
        fit = br_fit_site(data, targets, cfg.calib, subsets=cfg.subsets)
        return Round2Upload(cfg.session_id, j, br_aggregates(data, fit, cfg.calib))
    feats = cfg.calib(data.X)
    weights = {}
    for l, u in ups.items():
        if l == j:
            continue
        try:
            weights[l] = entropy_balance(CalibrationProblem(feats, u.gbar, j, l))
        except InfeasibleTarget as exc:
            raise InfeasibleTarget(f"site {j} cannot be calibrated toward site {l}: {exc}", j, l) from exc
    models = {l: u.model for l, u in ups.items()}
    sizes = {l: u.n for l, u in ups.items()}
    return Round2Upload(cfg.session_id, j, site_aggregates(data, models, weights, sizes))


class SiteWorker:
    """Byte-level message handler for one site.

    Keeps per-session state so several sessions can run against the same site.
    Failures are answered with a ``site_error`` message instead of raising.
    """

    def __init__(self, data: SiteDataset):
        self.data = data
        self._sessions: dict[str, SessionConfig] = {}
        self._lock = threading.Lock()
        self.completed = 0  # sessions whose second round succeeded

    @property
    def site(self) -> int:
        return self.data.site

    def _error(self, session_id: str, exc: Exception) -> bytes:
        target = exc.target if isinstance(exc, InfeasibleTarget) else None
        return encode(SiteError(session_id, self.site, type(exc).__name__, str(exc), target))

    def handle(self, raw: bytes) -> bytes:
        session_id = ""
        try:
            msg = decode(raw)
            if isinstance(msg, Round1Request):
                cfg = msg.config
                session_id = cfg.session_id
                reply = site_round1(self.data, cfg)
                with self._lock:
                    self._sessions[session_id] = cfg
                return encode(reply)
            if isinstance(msg, Round1Broadcast):
                session_id = msg.session_id
                with self._lock:
                    cfg = self._sessions.get(session_id)
                if cfg is None:
                    raise SchemaViolation(f"site {self.site} got a broadcast for unknown session {session_id!r}")
                reply = site_round2(self.data, msg, cfg)
                with self._lock:
                    self._sessions.pop(session_id, None)
                    self.completed += 1
                return encode(reply)
            raise SchemaViolation(f"site {self.site} cannot handle {type(msg).__name__}")
        except (FedCmpError, ValueError, ArithmeticError) as exc:
            return self._error(session_id, exc)

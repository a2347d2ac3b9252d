"""Coordinator state machine: two rounds, then estimate assembly."""

from __future__ import annotations

import itertools

from ..brdac import BRAggregatedData, br_dor_estimate, br_estimate
from ..dac import AggregatedData, all_subsets, dac_estimate, dcw_tau, dor_estimate
from ..errors import SchemaViolation, SessionAborted
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

METHOD_ORDER = {"DAC": 0, "DOR": 1, "DCW": 2}


def _collect(cfg: SessionConfig, round_no: int, replies: dict, expected: type) -> dict:
    """Decode one round of replies, sorted by site id so arrival order is irrelevant."""
    missing = [s for s in cfg.sites if s not in replies]
    if missing:
        raise SessionAborted(f"round {round_no}: no reply from sites {missing}")
    out = {}
    for s in cfg.sites:
        msg = decode(replies[s])
        if isinstance(msg, SiteError):
            where = f" (target site {msg.target})" if msg.target is not None else ""
            raise SessionAborted(f"round {round_no}: site {s} failed with {msg.error}{where}: {msg.message}")
        if not isinstance(msg, expected):
            raise SchemaViolation(f"round {round_no}: site {s} sent {type(msg).__name__}")
        if msg.site != s or msg.session_id != cfg.session_id:
            raise SchemaViolation(f"round {round_no}: reply from site {s} is labelled site {msg.site}, "
                                  f"session {msg.session_id!r}")
        out[s] = msg
    return out


def assemble_reports(cfg: SessionConfig, payloads: dict) -> list:
    """All requested (pair, subset) estimates from round-two aggregates."""
    sites = list(cfg.sites)
    pairs = cfg.pairs if cfg.pairs is not None else [
        (k, kp) for k, kp in itertools.product(sites, sites) if k != kp
    ]
    subsets = cfg.subsets if cfg.subsets is not None else all_subsets(sites)
    ads = [payloads[s] for s in sites]
    reports = []
    for subset in subsets:
        for k, kp in pairs:
            if cfg.mode == "dac-br":
                reports += [br_estimate(ads, subset, k, kp), br_dor_estimate(ads, subset, k, kp)]
            else:
                reports += [dac_estimate(ads, subset, k, kp), dor_estimate(ads, subset, k, kp),
                            dcw_tau(ads, subset, k, kp)]
    reports.sort(key=lambda r: (METHOD_ORDER.get(r.method, 9), r.k, r.k_prime, len(r.subset), r.subset))
    return reports


def coordinator_run(cfg: SessionConfig, transport) -> list:
    """Run one session and return every EstimateReport, or raise with nothing emitted."""
    replies = transport.exchange(1, encode(Round1Request(cfg)), cfg.sites, cfg.timeout)
    uploads = _collect(cfg, 1, replies, Round1Upload)
    broadcast = Round1Broadcast(cfg.session_id, uploads)
    replies = transport.exchange(2, encode(broadcast), cfg.sites, cfg.timeout)
    round2 = _collect(cfg, 2, replies, Round2Upload)
    kind = BRAggregatedData if cfg.mode == "dac-br" else AggregatedData
    payloads = {}
    for s, msg in round2.items():
        p = msg.payload
        if not isinstance(p, kind) or p.site != s or p.n != uploads[s].n:
            raise SchemaViolation(f"round 2 payload of site {s} does not match the session")
        payloads[s] = p
    return assemble_reports(cfg, payloads)

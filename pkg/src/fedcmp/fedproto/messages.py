"""Protocol messages and their ``fedcmp/1`` wire encoding.

Every message is one JSON object on one line::

    {"schema": "fedcmp/1", "type": "<message type>", "body": {...}}

Real numbers travel as strings holding the shortest decimal that round-trips
the IEEE-754 double (Python's ``repr``), so decoding is bit-exact. Integers
(site ids, counts, column indices) are plain JSON integers. Maps keyed by
site tuples use string keys: ``"k,k'"`` for pairs, ``"1+2+4"`` for subsets
and ``"k|1+2"`` / ``"l,h|1+2"`` for keys combining sites and a subset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..brdac import BRAggregatedData, LinearDOR
from ..dac import MAX_SITES, AggregatedData, DORMoments, as_subset, parse_subset, subset_label
from ..data import CalibrationFeatures
from ..errors import SchemaViolation, VersionMismatch
from ..outcome import BasisSpec, FittedOutcomeModel

SCHEMA = "fedcmp/1"
MODES = ("dac-nonparametric", "dac-br")


# types -----------------------------------------------------------------------


@dataclass(frozen=True)
class SessionConfig:
    session_id: str
    sites: tuple
    mode: str = "dac-nonparametric"
    basis: BasisSpec = field(default_factory=BasisSpec)
    calib: CalibrationFeatures = field(default_factory=CalibrationFeatures)
    timeout: float = 60.0
    pairs: tuple | None = None
    subsets: tuple | None = None
    schema: str = SCHEMA

    def __post_init__(self):
        sites = tuple(int(s) for s in self.sites)
        if len(set(sites)) != len(sites):
            raise ValueError("site ids must be unique")
        if not 2 <= len(sites) <= MAX_SITES:
            raise ValueError(f"a session needs between 2 and {MAX_SITES} sites, got {len(sites)}")
        object.__setattr__(self, "sites", tuple(sorted(sites)))
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "dac-br" and self.basis.kind != "linear":
            raise ValueError("bias-reduced mode needs a linear outcome basis shared with the calibration")
        if self.schema != SCHEMA:
            raise VersionMismatch(f"unsupported schema {self.schema!r}")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.pairs is not None:
            pairs = tuple((int(a), int(b)) for a, b in self.pairs)
            if any(a == b or a not in sites or b not in sites for a, b in pairs):
                raise ValueError("pairs must name two different session sites")
            object.__setattr__(self, "pairs", pairs)
        if self.subsets is not None:
            subs = tuple(as_subset(s) for s in self.subsets)
            if any(not set(s) <= set(sites) for s in subs):
                raise ValueError("subsets must only contain session sites")
            object.__setattr__(self, "subsets", subs)

    @property
    def K(self) -> int:
        return len(self.sites)


@dataclass(frozen=True)
class Round1Request:
    config: SessionConfig


@dataclass(frozen=True)
class Round1Upload:
    session_id: str
    site: int
    n: int
    gbar: np.ndarray
    model: FittedOutcomeModel | None = None


@dataclass(frozen=True)
class Round1Broadcast:
    session_id: str
    uploads: dict  # site -> Round1Upload


@dataclass(frozen=True)
class Round2Upload:
    session_id: str
    site: int
    payload: AggregatedData | BRAggregatedData


@dataclass(frozen=True)
class SiteError:
    session_id: str
    site: int
    error: str
    message: str
    target: int | None = None


# scalar codecs ---------------------------------------------------------------


def _f(x) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise SchemaViolation(f"non-finite number {x!r} cannot be encoded")
    return repr(x)


def _F(s) -> float:
    if not isinstance(s, str):
        raise SchemaViolation(f"expected a number string, got {type(s).__name__}")
    try:
        x = float(s)
    except ValueError as exc:
        raise SchemaViolation(f"malformed number {s!r}") from exc
    if not math.isfinite(x):
        raise SchemaViolation(f"non-finite number {s!r}")
    return x


def _I(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaViolation(f"expected an integer, got {v!r}")
    return v


def _vec(a) -> list:
    return [_f(v) for v in np.asarray(a, dtype=float).ravel()]


def _unvec(v) -> np.ndarray:
    if not isinstance(v, list):
        raise SchemaViolation("expected a list of numbers")
    return np.array([_F(s) for s in v], dtype=float)


def _mat(a) -> list:
    return [_vec(row) for row in np.asarray(a, dtype=float)]


def _unmat(v) -> np.ndarray:
    if not isinstance(v, list) or not v:
        raise SchemaViolation("expected a nonempty list of rows")
    rows = [_unvec(r) for r in v]
    if len({r.shape[0] for r in rows}) != 1:
        raise SchemaViolation("ragged matrix")
    return np.vstack(rows)


def _pair_key(a, b) -> str:
    return f"{a},{b}"


def _parse_pair(s: str) -> tuple:
    a, b = s.split(",")
    return int(a), int(b)


def _site_subset_key(k, subset) -> str:
    return f"{k}|{subset_label(subset)}"


def _parse_site_subset(s: str) -> tuple:
    k, lab = s.split("|")
    return int(k), parse_subset(lab)


def _pair_subset_key(l, h, subset) -> str:
    return f"{l},{h}|{subset_label(subset)}"


def _parse_pair_subset(s: str) -> tuple:
    pair, lab = s.split("|")
    l, h = _parse_pair(pair)
    return l, h, parse_subset(lab)


def _map(d: dict, key, val) -> dict:
    return {key(k): val(v) for k, v in sorted(d.items(), key=lambda kv: str(kv[0]))}


def _unmap(d, key, val) -> dict:
    if not isinstance(d, dict):
        raise SchemaViolation("expected an object")
    return {key(k): val(v) for k, v in d.items()}


# structured codecs -----------------------------------------------------------


def _basis_out(b: BasisSpec) -> dict:
    d = {"kind": b.kind, "n_knots": list(b.n_knots), "n_covariates": b.n_covariates}
    if b.knots is not None:
        d["knots"] = [_vec(t) for t in b.knots]
    return d


def _basis_in(d) -> BasisSpec:
    knots = d.get("knots")
    nc = d.get("n_covariates")
    return BasisSpec(
        kind=d["kind"],
        n_knots=tuple(_I(k) for k in d["n_knots"]),
        knots=None if knots is None else tuple(tuple(_unvec(t)) for t in knots),
        n_covariates=None if nc is None else _I(nc),
    )


def _model_out(m: FittedOutcomeModel) -> dict:
    return {
        "basis": None if m.basis is None else _basis_out(m.basis),
        "coefficients": _vec(m.coefficients),
        "dropped_columns": list(m.dropped_columns),
        "n_columns": m.n_columns,
        "site": m.site,
        "subset_tag": None if m.subset_tag is None else list(m.subset_tag),
    }


def _model_in(d) -> FittedOutcomeModel:
    tag = d.get("subset_tag")
    return FittedOutcomeModel(
        basis=None if d["basis"] is None else _basis_in(d["basis"]),
        coefficients=_unvec(d["coefficients"]),
        dropped_columns=tuple(_I(c) for c in d["dropped_columns"]),
        site=d.get("site"),
        subset_tag=None if tag is None else tuple(_I(t) for t in tag),
        n_columns=_I(d["n_columns"]),
    )


def _config_out(c: SessionConfig) -> dict:
    return {
        "session_id": c.session_id,
        "sites": list(c.sites),
        "mode": c.mode,
        "basis": _basis_out(c.basis),
        "calib": c.calib.to_dict(),
        "timeout": _f(c.timeout),
        "pairs": None if c.pairs is None else [list(p) for p in c.pairs],
        "subsets": None if c.subsets is None else [subset_label(s) for s in c.subsets],
        "schema": c.schema,
    }


def _config_in(d) -> SessionConfig:
    if d.get("schema") != SCHEMA:
        raise VersionMismatch(f"session schema {d.get('schema')!r} is not {SCHEMA}")
    return SessionConfig(
        session_id=str(d["session_id"]),
        sites=tuple(_I(s) for s in d["sites"]),
        mode=d["mode"],
        basis=_basis_in(d["basis"]),
        calib=CalibrationFeatures.from_dict(d["calib"]),
        timeout=_F(d["timeout"]),
        pairs=None if d.get("pairs") is None else tuple(tuple(p) for p in d["pairs"]),
        subsets=None if d.get("subsets") is None else tuple(parse_subset(s) for s in d["subsets"]),
    )


def _upload1_out(u: Round1Upload) -> dict:
    return {
        "session_id": u.session_id,
        "site": u.site,
        "n": u.n,
        "gbar": _vec(u.gbar),
        "model": None if u.model is None else _model_out(u.model),
    }


def _upload1_in(d) -> Round1Upload:
    return Round1Upload(
        session_id=str(d["session_id"]),
        site=_I(d["site"]),
        n=_I(d["n"]),
        gbar=_unvec(d["gbar"]),
        model=None if d["model"] is None else _model_in(d["model"]),
    )


def _ad_out(a: AggregatedData) -> dict:
    out = {
        "kind": "dac",
        "site": a.site,
        "n": a.n,
        "A1": _map(a.A1, str, _f),
        "A2": _map(a.A2, str, _f),
        "A3": _map(a.A3, lambda k: _pair_key(*k), _f),
        "A4": _map(a.A4, lambda k: _pair_key(*k), _f),
        "A5": _map(a.A5, lambda k: _pair_key(*k), _f),
        "B2": _map(a.B2, str, _f),
        "dor": None,
    }
    if a.dor is not None:
        out["dor"] = {
            "basis_sums": _map(a.dor.basis_sums, str, _vec),
            "gram": _mat(a.dor.gram),
            "meat": _mat(a.dor.meat),
            "resid_basis": _vec(a.dor.resid_basis),
            "cross": _map(a.dor.cross, str, _vec),
        }
    return out


def _ad_in(d) -> AggregatedData:
    dor = None
    if d.get("dor") is not None:
        m = d["dor"]
        dor = DORMoments(
            basis_sums=_unmap(m["basis_sums"], int, _unvec),
            gram=_unmat(m["gram"]),
            meat=_unmat(m["meat"]),
            resid_basis=_unvec(m["resid_basis"]),
            cross=_unmap(m["cross"], int, _unvec),
        )
    return AggregatedData(
        site=_I(d["site"]),
        n=_I(d["n"]),
        A1=_unmap(d["A1"], int, _F),
        A2=_unmap(d["A2"], int, _F),
        A3=_unmap(d["A3"], _parse_pair, _F),
        A4=_unmap(d["A4"], _parse_pair, _F),
        A5=_unmap(d["A5"], _parse_pair, _F),
        B2=_unmap(d["B2"], int, _F),
        dor=dor,
    )


def _brad_out(b: BRAggregatedData) -> dict:
    out = {
        "kind": "br",
        "site": b.site,
        "n": b.n,
        "beta": _map(b.beta, subset_label, _vec),
        "O1": _vec(b.O1),
        "O2": _map(b.O2, lambda k: _site_subset_key(*k), _f),
        "O3": _mat(b.O3),
        "O4": _map(b.O4, lambda k: _pair_subset_key(*k), _f),
        "O5": _map(b.O5, lambda k: _site_subset_key(*k), _vec),
        "dor": None,
    }
    if b.dor is not None:
        out["dor"] = {
            "beta": _vec(b.dor.beta),
            "cross_moment": _mat(b.dor.cross_moment),
            "meat": _mat(b.dor.meat),
            "resid_basis": _vec(b.dor.resid_basis),
        }
    return out


def _brad_in(d) -> BRAggregatedData:
    dor = None
    if d.get("dor") is not None:
        m = d["dor"]
        dor = LinearDOR(_unvec(m["beta"]), _unmat(m["cross_moment"]), _unmat(m["meat"]), _unvec(m["resid_basis"]))
    return BRAggregatedData(
        site=_I(d["site"]),
        n=_I(d["n"]),
        beta=_unmap(d["beta"], parse_subset, _unvec),
        O1=_unvec(d["O1"]),
        O2=_unmap(d["O2"], _parse_site_subset, _F),
        O3=_unmat(d["O3"]),
        O4=_unmap(d["O4"], _parse_pair_subset, _F),
        O5=_unmap(d["O5"], _parse_site_subset, _unvec),
        dor=dor,
    )


def _payload_in(d):
    kind = d.get("kind")
    if kind == "dac":
        return _ad_in(d)
    if kind == "br":
        return _brad_in(d)
    raise SchemaViolation(f"unknown payload kind {kind!r}")


def _body(msg) -> tuple[str, dict]:
    if isinstance(msg, Round1Request):
        return "round1_request", {"config": _config_out(msg.config)}
    if isinstance(msg, Round1Upload):
        return "round1_upload", _upload1_out(msg)
    if isinstance(msg, Round1Broadcast):
        return "round1_broadcast", {
            "session_id": msg.session_id,
            "uploads": _map(msg.uploads, str, _upload1_out),
        }
    if isinstance(msg, Round2Upload):
        p = msg.payload
        payload = _ad_out(p) if isinstance(p, AggregatedData) else _brad_out(p)
        return "round2_upload", {"session_id": msg.session_id, "site": msg.site, "payload": payload}
    if isinstance(msg, SiteError):
        return "site_error", {
            "session_id": msg.session_id,
            "site": msg.site,
            "error": msg.error,
            "message": msg.message,
            "target": msg.target,
        }
    raise SchemaViolation(f"cannot encode {type(msg).__name__}")


def encode(msg) -> bytes:
    """Serialize a protocol message to one newline-terminated JSON line."""
    kind, body = _body(msg)
    doc = {"schema": SCHEMA, "type": kind, "body": body}
    return (json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n").encode()


def _reject_constant(token):
    raise SchemaViolation(f"non-finite literal {token}")


def decode(raw: bytes):
    """Parse bytes produced by :func:`encode`; rejects foreign schemas."""
    try:
        doc = json.loads(raw.decode() if isinstance(raw, (bytes, bytearray)) else raw, parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"malformed message: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("message must be a JSON object")
    schema = doc.get("schema")
    if schema != SCHEMA:
        if isinstance(schema, str) and schema.startswith("fedcmp/"):
            raise VersionMismatch(f"unsupported schema version {schema!r}")
        raise SchemaViolation(f"unknown schema tag {schema!r}")
    kind, body = doc.get("type"), doc.get("body")
    if not isinstance(body, dict):
        raise SchemaViolation("message body must be an object")
    try:
        if kind == "round1_request":
            return Round1Request(_config_in(body["config"]))
        if kind == "round1_upload":
            return _upload1_in(body)
        if kind == "round1_broadcast":
            return Round1Broadcast(str(body["session_id"]), _unmap(body["uploads"], int, _upload1_in))
        if kind == "round2_upload":
            return Round2Upload(str(body["session_id"]), _I(body["site"]), _payload_in(body["payload"]))
        if kind == "site_error":
            t = body.get("target")
            return SiteError(
                str(body["session_id"]), _I(body["site"]), str(body["error"]), str(body["message"]),
                None if t is None else _I(t),
            )
    except SchemaViolation:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise SchemaViolation(f"malformed {kind} message: {exc!r}") from exc
    raise SchemaViolation(f"unknown message type {kind!r}")

"""Command-line entry point.

Subcommands: simulate, estimate, verify-lossless, coordinate, serve-site, report.
On failure one JSON line ``{"error": ..., "message": ...}`` goes to stderr and
the exit status is nonzero (2 for configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
import time
import uuid
from pathlib import Path

from .dac import parse_subset
from .data import CalibrationFeatures, read_site_csv
from .errors import ConfigError, FedCmpError
from .fedproto import (
    DirectoryTransport,
    InProcessTransport,
    SessionConfig,
    SiteServer,
    SiteWorker,
    TcpTransport,
    coordinator_run,
    serve_directory_site,
)
from .outcome import BasisSpec
from .report import format_table, read_report_csv, write_report_csv

log = logging.getLogger("fedcmp")

OUTPUT_ENV = "FEDCMP_OUTPUT_DIR"
DEFAULT_OUTPUT = "fedcmp-out"
TRANSPORTS = ("inprocess", "directory", "tcp")


class CliFailure(Exception):
    def __init__(self, kind: str, message: str, status: int):
        super().__init__(message)
        self.kind, self.status = kind, status


def output_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _pair(text: str) -> tuple:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"pair must look like 'k,k2', got {text!r}") from exc
    return a, b


def _subset(text: str) -> tuple:
    try:
        return parse_subset(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"subset must look like '1+2+4', got {text!r}") from exc


# session configuration ----------------------------------------------------------


def session_from(conf: dict, args, site_ids) -> SessionConfig:
    basis = BasisSpec.from_dict(conf["basis"]) if "basis" in conf else BasisSpec()
    if getattr(args, "basis", None):
        basis = BasisSpec(args.basis, tuple(args.knots) if args.knots else basis.n_knots)
    mode = getattr(args, "mode", None) or conf.get("mode", "dac-nonparametric")
    pairs = args.pair or conf.get("pairs")
    subsets = args.subset or ([parse_subset(s) if isinstance(s, str) else s for s in conf["subsets"]]
                              if conf.get("subsets") else None)
    try:
        return SessionConfig(
            session_id=str(conf.get("session_id") or uuid.uuid4().hex[:12]),
            sites=tuple(site_ids),
            mode=mode,
            basis=basis,
            calib=CalibrationFeatures.from_dict(conf.get("calib")),
            timeout=float(args.timeout or conf.get("timeout", 60.0)),
            pairs=None if pairs is None else tuple(tuple(p) for p in pairs),
            subsets=None if subsets is None else tuple(subsets),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid session configuration: {exc}") from exc


def _resolve(path, base: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def load_sites(conf: dict, args) -> list:
    base = Path(args.config).parent if args.config else None
    paths = [Path(p) for p in args.site] if args.site else [_resolve(p, base) for p in conf.get("sites", [])]
    if len(paths) < 2:
        raise ConfigError("estimation needs at least two site CSV files (--site or config 'sites')")
    for p in paths:
        if not p.exists():
            raise ConfigError(f"site file {p} does not exist")
    return [read_site_csv(p, i + 1) for i, p in enumerate(paths)]


def run_session(cfg: SessionConfig, sites: list, transport: str, workdir: Path):
    """Run a whole session locally over the chosen transport; returns (reports, session dir or None)."""
    workers = [SiteWorker(d) for d in sites]
    if transport == "inprocess":
        return coordinator_run(cfg, InProcessTransport(workers)), None
    if transport == "directory":
        session_dir = workdir / "sessions" / cfg.session_id
        if session_dir.exists() and any(session_dir.iterdir()):
            raise ConfigError(f"session directory {session_dir} is not empty")
        session_dir.mkdir(parents=True, exist_ok=True)
        stop = threading.Event()
        threads = [threading.Thread(target=serve_directory_site, args=(session_dir, w, cfg.timeout, 0.01, stop),
                                    daemon=True) for w in workers]
        for t in threads:
            t.start()
        try:
            reports = coordinator_run(cfg, DirectoryTransport(session_dir))
        finally:
            stop.set()
            for t in threads:
                t.join()
        return reports, session_dir
    servers = [SiteServer(w).start() for w in workers]
    try:
        reports = coordinator_run(cfg, TcpTransport({w.site: s.address for w, s in zip(workers, servers)}))
    finally:
        for s in servers:
            s.stop()
    return reports, None


# subcommands -------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    conf = load_json(args.config)
    sites = load_sites(conf, args)
    cfg = session_from(conf, args, [d.site for d in sites])
    out = output_dir(args)
    reports, session_dir = run_session(cfg, sites, args.transport, out)
    path = write_report_csv(reports, out / "report.csv")
    if session_dir is not None:
        write_report_csv(reports, session_dir / "report.csv")
    print(format_table(reports))
    print(f"wrote {path}")
    return 0


def _parse_address(text: str) -> tuple:
    host, _, port = str(text).rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"address must look like host:port, got {text!r}")
    return host, int(port)


def cmd_coordinate(args) -> int:
    conf = load_json(args.config)
    out = output_dir(args)
    if args.transport == "tcp":
        addresses = dict(conf.get("addresses", {}))
        for item in args.address or []:
            sid, _, addr = item.partition("=")
            addresses[sid] = addr
        if len(addresses) < 2:
            raise ConfigError("tcp coordination needs site addresses (config 'addresses' or --address ID=HOST:PORT)")
        addresses = {int(s): _parse_address(a) for s, a in addresses.items()}
        cfg = session_from(conf, args, sorted(addresses))
        reports = coordinator_run(cfg, TcpTransport(addresses))
        session_dir = None
    else:
        site_ids = args.sites or conf.get("site_ids")
        if not site_ids:
            raise ConfigError("directory coordination needs the site ids (--sites or config 'site_ids')")
        cfg = session_from(conf, args, site_ids)
        session_dir = Path(args.session_dir or out / "sessions" / cfg.session_id)
        session_dir.mkdir(parents=True, exist_ok=True)
        reports = coordinator_run(cfg, DirectoryTransport(session_dir))
    path = write_report_csv(reports, out / "report.csv")
    if session_dir is not None:
        write_report_csv(reports, session_dir / "report.csv")
    print(format_table(reports))
    print(f"wrote {path}")
    return 0


def cmd_serve_site(args) -> int:
    if not Path(args.data).exists():
        raise ConfigError(f"site file {args.data} does not exist")
    worker = SiteWorker(read_site_csv(args.data, args.site_id))
    if args.transport == "directory":
        if not args.session_dir:
            raise ConfigError("--session-dir is required for the directory transport")
        Path(args.session_dir).mkdir(parents=True, exist_ok=True)
        if not serve_directory_site(args.session_dir, worker, args.timeout):
            raise CliFailure("SessionAborted", f"no coordinator message within {args.timeout} s", 1)
        print(f"site {args.site_id} answered both rounds")
        return 0
    server = SiteServer(worker, args.host, args.port).start()
    host, port = server.address
    print(f"site {args.site_id} listening on {host}:{port}", flush=True)
    try:
        while args.sessions == 0 or worker.completed < args.sessions:
            time.sleep(0.05)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_simulate(args) -> int:
    from .simlab import ScenarioSpec, plot_metrics, run_study, write_metrics_csv

    conf = load_json(args.config)
    scenarios = args.scenario or conf.get("scenarios") or ["i"]
    sizes = args.n or conf.get("N") or [2400]
    sizes = sizes if isinstance(sizes, list) else [sizes]
    reps = args.reps or conf.get("reps", 200)
    seed = args.seed if args.seed is not None else conf.get("seed", 1)
    pairs = args.pair or [tuple(p) for p in conf.get("pairs", [(1, 4)])]
    subsets = args.subset or [parse_subset(s) if isinstance(s, str) else tuple(s)
                              for s in conf.get("subsets", ["1+2+3+4"])]
    if int(reps) < 50:
        raise ConfigError(f"a study needs at least 50 replicates, got {reps}")
    try:
        specs = [ScenarioSpec(str(s), int(n)) for s in scenarios for n in sizes]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    targets = [(p, s) for p in pairs for s in subsets]
    t0 = time.monotonic()
    rows = run_study(specs, reps=int(reps), seed=int(seed), targets=targets,
                     workers=args.workers or conf.get("workers", 1),
                     truth_draws=int(args.truth_draws or conf.get("truth_draws", 10**7)),
                     check_lossless=args.check_lossless)
    out = output_dir(args)
    path = write_metrics_csv(rows, out / "metrics.csv")
    print(f"{'scen':<5}{'N':>6}  {'method':<7}{'pair':<6}{'subset':<9}{'truth':>8}{'bias':>11}"
          f"{'SD':>9}{'ESE':>9}{'CP':>7}")
    for r in rows:
        print(f"{r.scenario:<5}{r.N:>6}  {r.method:<7}{f'{r.k},{r.k_prime}':<6}{'+'.join(map(str, r.subset)):<9}"
              f"{r.truth:>8.4g}{r.bias:>11.4g}{r.sd:>9.4g}{r.ese:>9.4g}{r.cp:>7.4g}")
    if args.plots:
        for p in plot_metrics(rows, out):
            print(f"wrote {p}")
    print(f"wrote {path} ({time.monotonic() - t0:.1f} s)")
    return 0


def cmd_verify(args) -> int:
    from .verify import verify_lossless

    summary = verify_lossless(args.instances, args.seed, args.tol)
    print(summary.line())
    log.info("max tau rel %.3g, max var rel %.3g, max balance residual %.3g, min weight %.3g",
             summary.max_tau_rel, summary.max_var_rel, summary.max_balance_residual, summary.min_weight)
    return 0 if summary.ok else 1


def cmd_report(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"report {path} does not exist")
    reports = read_report_csv(path)
    if args.method:
        reports = [r for r in reports if r.method == args.method]
    print(format_table(reports))
    return 0


# parser -------------------------------------------------------------------------------


def _session_flags(p) -> None:
    p.add_argument("--config", help="session config JSON")
    p.add_argument("--mode", choices=("dac-nonparametric", "dac-br"))
    p.add_argument("--basis", choices=("linear", "cubic-spline"))
    p.add_argument("--knots", type=int, nargs="+", help="interior knots per covariate (spline basis)")
    p.add_argument("--pair", type=_pair, action="append", help="comparison k,k2 (repeatable; default all)")
    p.add_argument("--subset", type=_subset, action="append", help="target subset like 1+2 (repeatable)")
    p.add_argument("--timeout", type=float, help="per-round timeout in seconds (default 60)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcmp", description="Federated indirect treatment comparisons")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the simulation study")
    p.add_argument("--config", help="study config JSON")
    p.add_argument("--scenario", nargs="+", choices=("i", "ii", "iii", "iv"))
    p.add_argument("--n", type=int, nargs="+", help="total sample size(s)")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--truth-draws", type=int)
    p.add_argument("--pair", type=_pair, action="append")
    p.add_argument("--subset", type=_subset, action="append")
    p.add_argument("--plots", action="store_true", help="also write bias/coverage PNGs")
    p.add_argument("--check-lossless", action="store_true", help="compare each replicate with pooled rows")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="federated estimation on per-site CSV files")
    _session_flags(p)
    p.add_argument("--site", action="append", help="site CSV (repeatable; ids follow order)")
    p.add_argument("--transport", choices=TRANSPORTS, default="inprocess")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("verify-lossless", help="compare aggregated and pooled estimates on random data")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("coordinate", help="coordinate a networked session")
    _session_flags(p)
    p.add_argument("--transport", choices=("tcp", "directory"), default="tcp")
    p.add_argument("--address", action="append", help="ID=HOST:PORT (tcp, repeatable)")
    p.add_argument("--sites", type=int, nargs="+", help="site ids (directory transport)")
    p.add_argument("--session-dir")
    p.set_defaults(func=cmd_coordinate)

    p = sub.add_parser("serve-site", help="host one site")
    p.add_argument("--site-id", type=int, required=True)
    p.add_argument("--data", required=True, help="site CSV with header y,x1,...")
    p.add_argument("--transport", choices=("tcp", "directory"), default="tcp")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--sessions", type=int, default=0, help="exit after this many sessions (0 = never)")
    p.add_argument("--session-dir")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_serve_site)

    p = sub.add_parser("report", help="print a report.csv as a table")
    p.add_argument("path")
    p.add_argument("--method", choices=("DAC", "DOR", "DCW"))
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, message: str, status: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliFailure as exc:
        return _fail(exc.kind, str(exc), exc.status)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), 2)
    except FedCmpError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except OSError as exc:
        return _fail("IoError", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())

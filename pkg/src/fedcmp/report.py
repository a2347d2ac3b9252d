"""EstimateReport tables: machine CSV (17 significant digits) and human text (4)."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .dac import EstimateReport, parse_subset, subset_label

FIELDS = ("method", "k", "k_prime", "subset", "tau_hat", "se", "ci_low", "ci_high", "p_value",
          "variance", "mu_k", "mu_k_prime")


def _num(x) -> str:
    return "" if x is None else f"{float(x):.17g}"


def report_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        rows.append({
            "method": r.method, "k": r.k, "k_prime": r.k_prime, "subset": subset_label(r.subset),
            "tau_hat": r.tau_hat, "se": r.se, "ci_low": r.ci_low, "ci_high": r.ci_high,
            "p_value": r.p_value, "variance": r.variance,
            "mu_k": r.mu_hat.get(r.k), "mu_k_prime": r.mu_hat.get(r.k_prime),
        })
    return rows


def report_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for row in report_rows(reports):
        w.writerow([row[f] if isinstance(row[f], (str, int)) else _num(row[f]) for f in FIELDS])
    return buf.getvalue()


def write_report_csv(reports, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(reports))
    return path


def read_report_csv(path) -> list[EstimateReport]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            k, kp = int(row["k"]), int(row["k_prime"])
            mu = {}
            if row.get("mu_k"):
                mu[k] = float(row["mu_k"])
            if row.get("mu_k_prime"):
                mu[kp] = float(row["mu_k_prime"])
            var = row.get("variance")
            out.append(EstimateReport(row["method"], k, kp, parse_subset(row["subset"]), float(row["tau_hat"]),
                                      float(var) if var else None, mu))
    return out


def _g4(x) -> str:
    return "-" if x is None else f"{x:.4g}"


def format_table(reports) -> str:
    head = ("method", "k", "k'", "subset", "tau", "se", "95% CI", "p")
    body = []
    for r in reports:
        ci = "-" if r.se is None else f"({r.ci_low:.4g}, {r.ci_high:.4g})"
        body.append((r.method, str(r.k), str(r.k_prime), subset_label(r.subset), _g4(r.tau_hat), _g4(r.se), ci,
                     _g4(r.p_value)))
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines)

"""Independent reference computations written as plain per-row loops.

None of these reuse the package's aggregation or assembly code; they only
take fitted predictions / weights as inputs and re-derive everything else.
"""

from __future__ import annotations

import math

import numpy as np


def loop_mean(rows):
    rows = [list(map(float, r)) for r in rows]
    p = len(rows[0])
    return [math.fsum(r[c] for r in rows) / len(rows) for c in range(p)]


def normal_equations(design, y, w=None):
    design = np.asarray(design, float)
    w = np.ones(len(y)) if w is None else np.asarray(w, float)
    xtwx = (design * w[:, None]).T @ design
    xtwy = (design * w[:, None]).T @ np.asarray(y, float)
    return np.linalg.solve(xtwx, xtwy)


def loop_site_aggregates(data, models, probs, sizes):
    """A1..A5, B2 for site ``data.site`` from per-row predictions.

    ``probs[l]`` are the site's normalized weights toward target l (uniform for l = j).
    """
    j, n = data.site, data.n
    sites = sorted(sizes)
    pred = {k: [float(v) for v in models[k].predict(data.X)] for k in sites}
    y = [float(v) for v in data.y]
    r = [y[i] - pred[j][i] for i in range(n)]
    p = {l: [float(v) for v in probs[l]] for l in sites}
    A1 = {k: math.fsum(pred[k]) / n for k in sites}
    A2 = {l: math.fsum(p[l][i] * r[i] for i in range(n)) for l in sites}
    B2 = {l: math.fsum(p[l][i] * y[i] for i in range(n)) for l in sites}
    A3, A4, A5 = {}, {}, {}
    for a in sites:
        for b in sites:
            A3[(a, b)] = math.fsum((pred[a][i] - pred[b][i]) ** 2 for i in range(n))
            A4[(a, b)] = math.fsum(sizes[a] * p[a][i] * sizes[b] * p[b][i] * r[i] ** 2 for i in range(n))
    for kp in sites:
        for l in sites:
            A5[(kp, l)] = math.fsum(sizes[l] * p[l][i] * (pred[j][i] - pred[kp][i]) * r[i] for i in range(n))
    return dict(A1=A1, A2=A2, A3=A3, A4=A4, A5=A5, B2=B2)


def loop_pooled_eif(sites, models, probs, subset, k, kp):
    """Augmented calibration estimate and EIF second moment by looping over subjects.

    ``probs[(l, s)]`` are site s's normalized weights toward target l.
    Returns (tau, variance, mu).
    """
    sizes = {s: d.n for s, d in sites.items()}
    n_i = sum(sizes[s] for s in subset)
    rows = []
    for s in sorted(sites):
        d = sites[s]
        pk = models[k].predict(d.X)
        pkp = models[kp].predict(d.X)
        for i in range(d.n):
            tot = 0.0
            for l in subset:
                w = 1.0 / sizes[s] if l == s else float(probs[(l, s)][i])
                tot += sizes[l] * w
            rows.append((s, float(d.y[i]), float(pk[i]), float(pkp[i]), tot))
    mu = {}
    for t, col in ((k, 2), (kp, 3)):
        acc = []
        for s, y, *m, tot in rows:
            pred = m[col - 2]
            if s in subset:
                acc.append(pred)
            if s == t:
                acc.append(tot * (y - pred))
        mu[t] = math.fsum(acc) / n_i
    tau = mu[kp] - mu[k]
    psi2 = []
    for s, y, mk, mkp, tot in rows:
        v = 0.0
        if s in subset:
            v += mkp - mk - tau
        if s == kp:
            v += tot * (y - mkp)
        if s == k:
            v -= tot * (y - mk)
        psi2.append(v * v)
    return tau, math.fsum(psi2) / n_i**2, mu


def loop_dor(sites, models, subset, k, kp):
    """DOR point estimate and sandwich variance from per-row influence values.

    Outcome models must be ordinary least-squares fits on their own site.
    """
    sizes = {s: d.n for s, d in sites.items()}
    n_i = sum(sizes[s] for s in subset)
    coef = {}
    for t in (k, kp):
        H = models[t].design(sites[t].X)
        target = sum(models[t].design(sites[s].X).sum(axis=0) for s in subset)
        coef[t] = np.linalg.solve(H.T @ H, target)
    mu = {t: math.fsum(float(v) for s in subset for v in models[t].predict(sites[s].X)) / n_i for t in (k, kp)}
    tau = mu[kp] - mu[k]
    psi2 = []
    for s in sorted(sites):
        d = sites[s]
        mk, mkp = models[k].predict(d.X), models[kp].predict(d.X)
        for i in range(d.n):
            v = (mkp[i] - mk[i] - tau) if s in subset else 0.0
            if s == kp:
                v += float(models[kp].design(d.X[i : i + 1])[0] @ coef[kp]) * (d.y[i] - mkp[i])
            if s == k:
                v -= float(models[k].design(d.X[i : i + 1])[0] @ coef[k]) * (d.y[i] - mk[i])
            psi2.append(v * v)
    return tau, math.fsum(psi2) / n_i**2


def loop_br_aggregates(data, fit, features):
    """O1..O5 with tilts rebuilt from the fitted log-linear coefficients."""
    G = np.hstack([np.ones((data.n, 1)), features(data.X)])
    sites = sorted(fit.gammas)
    tilt = {k: [math.exp(float(G[i] @ fit.gammas[k])) for i in range(data.n)] for k in sites}
    q = G.shape[1]
    O1 = [math.fsum(G[i, a] for i in range(data.n)) for a in range(q)]
    O3 = [[math.fsum(G[i, a] * G[i, b] for i in range(data.n)) for b in range(q)] for a in range(q)]
    O2, O4, O5 = {}, {}, {}
    for subset, beta in fit.betas.items():
        r = [float(data.y[i] - G[i] @ beta) for i in range(data.n)]
        for k in sites:
            O2[(k, subset)] = math.fsum(tilt[k][i] * r[i] for i in range(data.n))
            O5[(k, subset)] = [math.fsum(tilt[k][i] * r[i] * G[i, a] for i in range(data.n)) for a in range(q)]
            for h in sites:
                O4[(k, h, subset)] = math.fsum(tilt[k][i] * tilt[h][i] * r[i] ** 2 for i in range(data.n))
    return dict(O1=np.array(O1), O3=np.array(O3), O2=O2, O4=O4, O5={k: np.array(v) for k, v in O5.items()})

"""Numerical kernels: censored log-likelihood terms, the constrained solver
and the split-statistic scan.

Every hot kernel exists twice: an explicit-loop version compiled with numba
and a vectorised numpy version.  ``_jit.USE_NUMBA`` decides which one the
module-level names point to; the solver is written once and calls whichever
is active.
"""
import math

import numpy as np

from ._jit import USE_NUMBA, njit

EXACT, RIGHT, LEFT, INTERVAL = 0, 1, 2, 3

# below this value of exp(z) the series log(1 - e^-x) = log x - x/2 is used
SMALL = 1e-8

CHAIN_MONOTONE, CHAIN_LOWER = 0, 1


# ---------------------------------------------------------------------------
# per-observation log-likelihood and derivatives w.r.t. (z_lo, z_hi, z')
# ---------------------------------------------------------------------------

def _obs_one(kind, zl, zh, zd):
    """Return (loglik, d/dz_lo, d/dz_hi, d/dz') for a single observation.

    ``-inf`` loglik flags an infeasible parameter (non-positive density
    derivative or an empty interval); derivatives are then zero.
    """
    ninf = -np.inf
    if kind == EXACT:
        if not zd > 0.0:
            return ninf, 0.0, 0.0, 0.0
        ez = math.exp(zl) if zl < 700.0 else np.inf
        return zl - ez + math.log(zd), 1.0 - ez, 0.0, 1.0 / zd
    if kind == RIGHT:
        ez = math.exp(zl) if zl < 700.0 else np.inf
        return -ez, -ez, 0.0, 0.0
    if kind == LEFT:
        x = math.exp(zh) if zh < 700.0 else np.inf
        if x < SMALL:
            return zh - 0.5 * x, 0.0, 1.0 - 0.5 * x, 0.0
        return math.log(-math.expm1(-x)), 0.0, x / math.expm1(x) if x < 700.0 else 0.0, 0.0
    # interval (zl, zh]
    dz = zh - zl
    if not dz > 0.0:
        return ninf, 0.0, 0.0, 0.0
    x1 = math.exp(zl) if zl < 700.0 else np.inf
    em = math.expm1(dz) if dz < 700.0 else np.inf
    delta = x1 * em
    if delta < SMALL:
        logterm = zl + math.log(em) - 0.5 * delta
        r = 1.0 - 0.5 * delta
    else:
        logterm = math.log(-math.expm1(-delta))
        r = delta / math.expm1(delta) if delta < 700.0 else 0.0
    dl = -x1 - r / em
    dh = r / (-math.expm1(-dz))
    return -x1 + logterm, dl, dh, 0.0


def _obs_terms_loop(kind, zl, zh, zd):
    n = kind.shape[0]
    ll = np.empty(n)
    dl = np.empty(n)
    dh = np.empty(n)
    dd = np.empty(n)
    for i in range(n):
        ll[i], dl[i], dh[i], dd[i] = _obs_one(kind[i], zl[i], zh[i], zd[i])
    return ll, dl, dh, dd


def _obs_terms_vec(kind, zl, zh, zd):
    n = kind.shape[0]
    ll = np.zeros(n)
    dl = np.zeros(n)
    dh = np.zeros(n)
    dd = np.zeros(n)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        m = kind == EXACT
        if m.any():
            ok = zd[m] > 0.0
            ez = np.exp(zl[m])
            ll[m] = np.where(ok, zl[m] - ez + np.log(np.where(ok, zd[m], 1.0)), -np.inf)
            dl[m] = np.where(ok, 1.0 - ez, 0.0)
            dd[m] = np.where(ok, 1.0 / np.where(ok, zd[m], 1.0), 0.0)
        m = kind == RIGHT
        if m.any():
            ez = np.exp(zl[m])
            ll[m] = -ez
            dl[m] = -ez
        m = kind == LEFT
        if m.any():
            x = np.exp(zh[m])
            small = x < SMALL
            xs = np.where(small, 1.0, x)
            ll[m] = np.where(small, zh[m] - 0.5 * x, np.log(-np.expm1(-xs)))
            big = xs >= 700.0
            dh[m] = np.where(small, 1.0 - 0.5 * x,
                             np.where(big, 0.0, xs / np.expm1(np.where(big, 1.0, xs))))
        m = kind == INTERVAL
        if m.any():
            a, b = zl[m], zh[m]
            dz = b - a
            ok = dz > 0.0
            dzs = np.where(ok, dz, 1.0)
            x1 = np.exp(a)
            em = np.expm1(dzs)
            delta = x1 * em
            small = delta < SMALL
            ds = np.where(small, 1.0, delta)
            logterm = np.where(small, a + np.log(em) - 0.5 * delta, np.log(-np.expm1(-ds)))
            big = ds >= 700.0
            r = np.where(small, 1.0 - 0.5 * delta,
                         np.where(big, 0.0, ds / np.expm1(np.where(big, 1.0, ds))))
            ll[m] = np.where(ok, -x1 + logterm, -np.inf)
            dl[m] = np.where(ok, -x1 - r / em, 0.0)
            dh[m] = np.where(ok, r / (-np.expm1(-dzs)), 0.0)
    return ll, dl, dh, dd


# ---------------------------------------------------------------------------
# weighted negative log-likelihood, normalised by the total weight
# ---------------------------------------------------------------------------

def _objective_loop(gamma, Zlo, Zhi, Zd, kind, w, wsum):
    n, q = Zlo.shape
    f = 0.0
    g = np.zeros(q)
    for i in range(n):
        if w[i] == 0.0:
            continue
        zl = 0.0
        zh = 0.0
        zd = 0.0
        for k in range(q):
            zl += Zlo[i, k] * gamma[k]
            zh += Zhi[i, k] * gamma[k]
            zd += Zd[i, k] * gamma[k]
        ll, dl, dh, dd = _obs_one(kind[i], zl, zh, zd)
        if ll == -np.inf or ll != ll:
            return np.inf, g
        f -= w[i] * ll
        for k in range(q):
            g[k] -= w[i] * (dl * Zlo[i, k] + dh * Zhi[i, k] + dd * Zd[i, k])
    return f / wsum, g / wsum


def _objective_vec(gamma, Zlo, Zhi, Zd, kind, w, wsum):
    ll, dl, dh, dd = _obs_terms_vec(kind, Zlo @ gamma, Zhi @ gamma, Zd @ gamma)
    pos = w > 0.0
    if not np.all(np.isfinite(ll[pos])):
        return np.inf, np.zeros(gamma.shape[0])
    f = -np.dot(w[pos], ll[pos])
    g = -((w * dl) @ Zlo + (w * dh) @ Zhi + (w * dd) @ Zd)
    return f / wsum, g / wsum


# ---------------------------------------------------------------------------
# feasible-set projection for the constraint "chains"
#   chain row (start, length, kind, _): monotone chain gamma[start:start+length]
#   with consecutive differences >= eps, or a lower bound gamma[start] >= eps.
# ---------------------------------------------------------------------------

def _isotonic_inplace(y):
    """Pool-adjacent-violators: least-squares non-decreasing fit, in place."""
    n = y.shape[0]
    vals = np.empty(n)
    cnts = np.empty(n)
    top = 0
    for i in range(n):
        vals[top] = y[i]
        cnts[top] = 1.0
        top += 1
        while top > 1 and vals[top - 2] > vals[top - 1]:
            c = cnts[top - 2] + cnts[top - 1]
            vals[top - 2] = (vals[top - 2] * cnts[top - 2] + vals[top - 1] * cnts[top - 1]) / c
            cnts[top - 2] = c
            top -= 1
    pos = 0
    for b in range(top):
        for _ in range(int(cnts[b])):
            y[pos] = vals[b]
            pos += 1


def _project(gamma, chains, eps):
    out = gamma.copy()
    for c in range(chains.shape[0]):
        start = chains[c, 0]
        length = chains[c, 1]
        if chains[c, 2] == CHAIN_LOWER:
            if out[start] < eps:
                out[start] = eps
        else:
            seg = np.empty(length)
            for k in range(length):
                seg[k] = out[start + k] - k * eps
            _isotonic_inplace(seg)
            for k in range(length):
                out[start + k] = seg[k] + k * eps
    return out


def _constraint_values(gamma, chains, eps):
    """Slack of every scalar constraint (feasible iff all >= 0)."""
    m = 0
    for c in range(chains.shape[0]):
        m += 1 if chains[c, 2] == CHAIN_LOWER else chains[c, 1] - 1
    out = np.empty(m)
    j = 0
    for c in range(chains.shape[0]):
        start = chains[c, 0]
        if chains[c, 2] == CHAIN_LOWER:
            out[j] = gamma[start] - eps
            j += 1
        else:
            for k in range(chains[c, 1] - 1):
                out[j] = gamma[start + k + 1] - gamma[start + k] - eps
                j += 1
    return out


def _constraint_grad_apply(mult, chains, q):
    """Return sum_j mult_j * grad(c_j) as a length-q vector."""
    out = np.zeros(q)
    j = 0
    for c in range(chains.shape[0]):
        start = chains[c, 0]
        if chains[c, 2] == CHAIN_LOWER:
            out[start] += mult[j]
            j += 1
        else:
            for k in range(chains[c, 1] - 1):
                out[start + k + 1] += mult[j]
                out[start + k] -= mult[j]
                j += 1
    return out


if USE_NUMBA:
    _obs_one = njit(_obs_one)
    _obs_terms = njit(_obs_terms_loop)
    _objective = njit(_objective_loop)
    _isotonic_inplace = njit(_isotonic_inplace)
    _project = njit(_project)
    _constraint_values = njit(_constraint_values)
    _constraint_grad_apply = njit(_constraint_grad_apply)
else:
    _obs_terms = _obs_terms_vec
    _objective = _objective_vec


def obs_terms(kind, zl, zh, zd):
    """Public entry: per-observation loglik and derivatives (arrays)."""
    return _obs_terms(np.ascontiguousarray(kind, dtype=np.int64),
                      np.ascontiguousarray(zl, dtype=np.float64),
                      np.ascontiguousarray(zh, dtype=np.float64),
                      np.ascontiguousarray(zd, dtype=np.float64))


def isotonic(y):
    out = np.array(y, dtype=np.float64)
    _isotonic_inplace(out)
    return out


# ---------------------------------------------------------------------------
# augmented Lagrangian objective
# ---------------------------------------------------------------------------

@njit
def _al_objective(gamma, Zlo, Zhi, Zd, kind, w, wsum, chains, eps, lam, rho):
    f, g = _objective(gamma, Zlo, Zhi, Zd, kind, w, wsum)
    if not f < np.inf:
        return f, g
    c = _constraint_values(gamma, chains, eps)
    pen = 0.0
    mult = np.empty(c.shape[0])
    for j in range(c.shape[0]):
        t = lam[j] - rho * c[j]
        if t > 0.0:
            pen += t * t - lam[j] * lam[j]
            mult[j] = t
        else:
            pen -= lam[j] * lam[j]
            mult[j] = 0.0
    g = g - _constraint_grad_apply(mult, chains, gamma.shape[0])
    return f + pen / (2.0 * rho), g


# ---------------------------------------------------------------------------
# spectral projected gradient (Barzilai-Borwein step, nonmonotone search)
# ---------------------------------------------------------------------------

@njit
def _spg(x0, Zlo, Zhi, Zd, kind, w, wsum, chains, eps, lam, rho, use_al,
         maxit, tol, memory):
    """Minimise either the AL merit (use_al, no projection) or the plain
    objective projected onto the constraint chains (not use_al)."""
    lam_min, lam_max = 1e-10, 1e10
    if use_al:
        x = x0.copy()
        f, g = _al_objective(x, Zlo, Zhi, Zd, kind, w, wsum, chains, eps, lam, rho)
    else:
        x = _project(x0, chains, eps)
        f, g = _objective(x, Zlo, Zhi, Zd, kind, w, wsum)
    if not f < np.inf:
        return x, f, False, 0
    hist = np.full(memory, f)
    if use_al:
        pg = -g
    else:
        pg = _project(x - g, chains, eps) - x
    pgn = np.max(np.abs(pg))
    step = 1.0 / pgn if pgn > 0.0 else 1.0
    step = min(lam_max, max(lam_min, step))
    it = 0
    while it < maxit:
        if pgn <= tol:
            return x, f, True, it
        if use_al:
            d = -step * g
        else:
            d = _project(x - step * g, chains, eps) - x
        fmax = np.max(hist)
        gtd = np.dot(g, d)
        alpha = 1.0
        accepted = False
        for _ in range(60):
            xn = x + alpha * d
            if use_al:
                fn, gn = _al_objective(xn, Zlo, Zhi, Zd, kind, w, wsum, chains, eps, lam, rho)
            else:
                fn, gn = _objective(xn, Zlo, Zhi, Zd, kind, w, wsum)
            if fn <= fmax + 1e-4 * alpha * gtd:
                accepted = True
                break
            if fn < np.inf:
                denom = fn - f - alpha * gtd
                at = -0.5 * alpha * alpha * gtd / denom if denom > 0.0 else 0.5 * alpha
                if at < 0.1 * alpha or at > 0.9 * alpha:
                    at = 0.5 * alpha
                alpha = at
            else:
                alpha = 0.5 * alpha
        if not accepted:
            return x, f, False, it
        s = xn - x
        y = gn - g
        x = xn
        f = fn
        g = gn
        hist[it % memory] = f
        sty = np.dot(s, y)
        if sty <= 0.0:
            step = lam_max
        else:
            step = min(lam_max, max(lam_min, np.dot(s, s) / sty))
        if use_al:
            pg = -g
        else:
            pg = _project(x - g, chains, eps) - x
        pgn = np.max(np.abs(pg))
        it += 1
    return x, f, pgn <= tol, it


@njit
def _auglag(x0, Zlo, Zhi, Zd, kind, w, wsum, chains, eps, max_outer, max_inner,
            grad_tol, constraint_tol, growth, memory):
    """PHR augmented Lagrangian for chain constraints with an SPG inner loop.

    Returns (x, objective, converged, outer iterations, best-feasible trace).
    The returned point is always feasible: each outer iterate is repaired by
    projection and the best repaired point is kept.
    """
    xf = _project(x0, chains, eps)
    best_f, _ = _objective(xf, Zlo, Zhi, Zd, kind, w, wsum)
    best_x = xf.copy()
    trace = np.empty(max_outer + 1)
    trace[0] = best_f
    lam = np.zeros(_constraint_values(xf, chains, eps).shape[0])
    rho = 10.0
    x = xf.copy()
    prev_viol = np.inf
    converged = False
    k = 0
    while k < max_outer:
        xn, _, inner_ok, _ = _spg(x, Zlo, Zhi, Zd, kind, w, wsum, chains, eps, lam, rho,
                                  True, max_inner, grad_tol, memory)
        x = xn
        c = _constraint_values(x, chains, eps)
        viol = 0.0
        compl = 0.0
        for j in range(c.shape[0]):
            if -c[j] > viol:
                viol = -c[j]
            t = lam[j] - rho * c[j]
            lam[j] = t if t > 0.0 else 0.0
            cm = abs(min(c[j], lam[j]))
            if cm > compl:
                compl = cm
        xr = _project(x, chains, eps)
        fr, _ = _objective(xr, Zlo, Zhi, Zd, kind, w, wsum)
        if fr < best_f:
            best_f = fr
            best_x = xr
        k += 1
        trace[k] = best_f
        if inner_ok and viol <= constraint_tol and compl <= max(grad_tol, constraint_tol):
            converged = True
            break
        if viol > 0.25 * prev_viol:
            rho *= growth
        prev_viol = viol
    return best_x, best_f, converged, k, trace[:k + 1]


# ---------------------------------------------------------------------------
# split statistic scan
# ---------------------------------------------------------------------------

def _scan_loop(scores, xs, order, vpinv, min_node):
    """Best cut for one variable; returns (statistic, cutpoint, n_left)."""
    n, q = scores.shape
    total = np.zeros(q)
    for i in range(n):
        for k in range(q):
            total[k] += scores[i, k]
    sl = np.zeros(q)
    d = np.empty(q)
    best_t = 0.0
    best_c = np.nan
    best_nl = -1
    for pos in range(n - 1):
        i = order[pos]
        for k in range(q):
            sl[k] += scores[i, k]
        nl = pos + 1
        if nl < min_node:
            continue
        if n - nl < min_node:
            break
        xa = xs[order[pos]]
        xb = xs[order[pos + 1]]
        if not xb > xa:
            continue
        frac = nl / n
        for k in range(q):
            d[k] = sl[k] - frac * total[k]
        quad = 0.0
        for a in range(q):
            acc = 0.0
            for b in range(q):
                acc += vpinv[a, b] * d[b]
            quad += d[a] * acc
        cfac = nl * (n - nl) / (n * (n - 1.0))
        t = quad / cfac
        if t > best_t:
            best_t = t
            best_c = 0.5 * (xa + xb)
            best_nl = nl
    return best_t, best_c, best_nl


def _scan_vec(scores, xs, order, vpinv, min_node):
    n = scores.shape[0]
    sx = xs[order]
    cs = np.cumsum(scores[order], axis=0)[:-1]
    nl = np.arange(1, n, dtype=np.float64)
    ok = (nl >= min_node) & (n - nl >= min_node) & (sx[1:] > sx[:-1])
    if not ok.any():
        return 0.0, np.nan, -1
    d = cs - (nl / n)[:, None] * scores.sum(axis=0)[None, :]
    quad = np.einsum("ia,ab,ib->i", d, vpinv, d)
    t = quad / (nl * (n - nl) / (n * (n - 1.0)))
    t = np.where(ok, t, 0.0)
    j = int(np.argmax(t))
    if not t[j] > 0.0:
        return 0.0, np.nan, -1
    return float(t[j]), 0.5 * (sx[j] + sx[j + 1]), j + 1


def _leaf_ids_loop(X, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


def _leaf_ids_vec(X, feature, threshold, left, right):
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        idx = np.nonzero(active)[0]
        f = feature[node[idx]]
        go_left = X[idx, f] <= threshold[node[idx]]
        node[idx] = np.where(go_left, left[node[idx]], right[node[idx]])
        active = feature[node] >= 0
    return node


def _cooccur_loop(leaf_q, leaf_t, out):
    """out[a, i] += 1 where query a and training row i share a leaf (leaf_t < 0: absent)."""
    nq = leaf_q.shape[0]
    nt = leaf_t.shape[0]
    for a in range(nq):
        la = leaf_q[a]
        for i in range(nt):
            if leaf_t[i] == la:
                out[a, i] += 1.0


def _cooccur_vec(leaf_q, leaf_t, out):
    out += leaf_q[:, None] == leaf_t[None, :]


if USE_NUMBA:
    _scan = njit(_scan_loop)
    _leaf_ids = njit(_leaf_ids_loop)
    _cooccur = njit(_cooccur_loop)
else:
    _scan = _scan_vec
    _leaf_ids = _leaf_ids_vec
    _cooccur = _cooccur_vec

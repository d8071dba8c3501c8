"""numba implementations of the hot loops."""
import math

import numpy as np
from numba import njit

_DET_EPS = 1e-14
_INV_BIG = 1e300


@njit(cache=True)
def _ray_first_hit(ox, oy, oz, dx, dy, dz, tmin, tmax,
                   tri, lo, hi, left, right, start, count, order):
    ix = 1.0 / dx if abs(dx) > 1e-300 else math.copysign(_INV_BIG, dx)
    iy = 1.0 / dy if abs(dy) > 1e-300 else math.copysign(_INV_BIG, dy)
    iz = 1.0 / dz if abs(dz) > 1e-300 else math.copysign(_INV_BIG, dz)
    best = tmax
    best_face = -1
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        # slab test
        t0 = (lo[node, 0] - ox) * ix
        t1 = (hi[node, 0] - ox) * ix
        tn = min(t0, t1)
        tf = max(t0, t1)
        t0 = (lo[node, 1] - oy) * iy
        t1 = (hi[node, 1] - oy) * iy
        tn = max(tn, min(t0, t1))
        tf = min(tf, max(t0, t1))
        t0 = (lo[node, 2] - oz) * iz
        t1 = (hi[node, 2] - oz) * iz
        tn = max(tn, min(t0, t1))
        tf = min(tf, max(t0, t1))
        if tf < tn or tf < tmin or tn > best:
            continue
        if left[node] < 0:
            for q in range(start[node], start[node] + count[node]):
                f = order[q]
                v0x = tri[f, 0, 0]
                v0y = tri[f, 0, 1]
                v0z = tri[f, 0, 2]
                e1x = tri[f, 1, 0] - v0x
                e1y = tri[f, 1, 1] - v0y
                e1z = tri[f, 1, 2] - v0z
                e2x = tri[f, 2, 0] - v0x
                e2y = tri[f, 2, 1] - v0y
                e2z = tri[f, 2, 2] - v0z
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < _DET_EPS:
                    continue
                inv = 1.0 / det
                sx = ox - v0x
                sy = oy - v0y
                sz = oz - v0z
                u = (sx * px + sy * py + sz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = sy * e1z - sz * e1y
                qy = sz * e1x - sx * e1z
                qz = sx * e1y - sy * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t > tmin and t < best:
                    best = t
                    best_face = f
        else:
            stack[sp] = left[node]
            sp += 1
            stack[sp] = right[node]
            sp += 1
    return best, best_face


@njit(cache=True)
def first_hit(origins, dirs, tmin, tmax, tri, lo, hi, left, right, start, count, order):
    n = origins.shape[0]
    t_out = np.empty(n)
    f_out = np.empty(n, dtype=np.int64)
    for r in range(n):
        t, f = _ray_first_hit(origins[r, 0], origins[r, 1], origins[r, 2],
                              dirs[r, 0], dirs[r, 1], dirs[r, 2], tmin, tmax[r],
                              tri, lo, hi, left, right, start, count, order)
        t_out[r] = t if f >= 0 else np.inf
        f_out[r] = f
    return t_out, f_out


@njit(cache=True)
def _leg_ok(a, b, target_plane, face_plane, eps, tol,
            tri, lo, hi, left, right, start, count, order):
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    dz = b[2] - a[2]
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    if length <= eps:
        return False
    dx /= length
    dy /= length
    dz /= length
    if target_plane < 0:
        t, f = _ray_first_hit(a[0], a[1], a[2], dx, dy, dz, eps, length,
                              tri, lo, hi, left, right, start, count, order)
        return f < 0
    tol_l = tol * max(1.0, length)
    t, f = _ray_first_hit(a[0], a[1], a[2], dx, dy, dz, eps, length + tol_l,
                          tri, lo, hi, left, right, start, count, order)
    if f < 0:
        return False
    return face_plane[f] == target_plane and abs(t - length) <= tol_l


@njit(cache=True)
def image_paths(tx, rx, plane_n, plane_d, face_plane, max_bounces, eps, tol, capacity,
                tri, lo, hi, left, right, start, count, order):
    """Depth-first image-source search with front-side pruning.

    Returns (n_found, overflow, seqs, n_bounce, points). Rows past n_found are
    garbage. ``overflow`` is set when more than ``capacity`` paths exist.
    """
    n_planes = plane_n.shape[0]
    mb = max_bounces
    seqs = -np.ones((capacity, max(mb, 1)), dtype=np.int64)
    nb = np.zeros(capacity, dtype=np.int64)
    pts = np.zeros((capacity, mb + 2, 3))
    found = 0
    overflow = False

    # direct path
    if _leg_ok(tx, rx, -1, face_plane, eps, tol, tri, lo, hi, left, right, start, count, order):
        pts[0, 0] = tx
        pts[0, 1] = rx
        found = 1

    if mb == 0:
        return found, overflow, seqs, nb, pts

    seq = np.zeros(mb, dtype=np.int64)
    images = np.zeros((mb + 1, 3))
    images[0] = tx
    nxt = np.zeros(mb + 1, dtype=np.int64)
    refl = np.zeros((mb, 3))
    depth = 0
    while depth >= 0:
        p = nxt[depth]
        if p >= n_planes or depth == mb:
            depth -= 1
            continue
        nxt[depth] = p + 1
        if depth > 0 and p == seq[depth - 1]:
            continue
        src = images[depth]
        s = (plane_n[p, 0] * src[0] + plane_n[p, 1] * src[1]
             + plane_n[p, 2] * src[2] - plane_d[p])
        if s <= 1e-12:
            continue
        seq[depth] = p
        for c in range(3):
            images[depth + 1, c] = src[c] - 2.0 * s * plane_n[p, c]
        k = depth + 1

        # backtrace reflection points from the receiver
        ok = True
        q0 = rx[0]
        q1 = rx[1]
        q2 = rx[2]
        for j in range(k - 1, -1, -1):
            pl = seq[j]
            img = images[j + 1]
            sq = plane_n[pl, 0] * q0 + plane_n[pl, 1] * q1 + plane_n[pl, 2] * q2 - plane_d[pl]
            si = (plane_n[pl, 0] * img[0] + plane_n[pl, 1] * img[1]
                  + plane_n[pl, 2] * img[2] - plane_d[pl])
            if sq <= 0.0 or si >= 0.0:
                ok = False
                break
            lam = sq / (sq - si)
            q0 = q0 + lam * (img[0] - q0)
            q1 = q1 + lam * (img[1] - q1)
            q2 = q2 + lam * (img[2] - q2)
            refl[j, 0] = q0
            refl[j, 1] = q1
            refl[j, 2] = q2
        if ok:
            if not _leg_ok(tx, refl[0], seq[0], face_plane, eps, tol,
                           tri, lo, hi, left, right, start, count, order):
                ok = False
        if ok:
            for j in range(k - 1):
                if not _leg_ok(refl[j], refl[j + 1], seq[j + 1], face_plane, eps, tol,
                               tri, lo, hi, left, right, start, count, order):
                    ok = False
                    break
        if ok:
            ok = _leg_ok(refl[k - 1], rx, -1, face_plane, eps, tol,
                         tri, lo, hi, left, right, start, count, order)
        if ok:
            if found >= capacity:
                overflow = True
            else:
                nb[found] = k
                for j in range(k):
                    seqs[found, j] = seq[j]
                pts[found, 0] = tx
                for j in range(k):
                    pts[found, j + 1] = refl[j]
                pts[found, k + 1] = rx
                found += 1

        depth += 1
        nxt[depth] = 0
    return found, overflow, seqs, nb, pts


@njit(cache=True)
def accumulate_spectrum(amps, delays, segs, r_table, df, n_bins):
    """Sum of per-path spectra amp * prod(R) * exp(-2j pi f tau) on f = k*df."""
    out = np.zeros(n_bins, dtype=np.complex128)
    n_paths = amps.shape[0]
    kmax = segs.shape[1]
    for n in range(n_paths):
        w = -2.0 * math.pi * delays[n] * df
        rot = complex(math.cos(w), math.sin(w))
        z = 1.0 + 0.0j
        a0 = amps[n]
        for k in range(n_bins):
            if k % 256 == 0:
                ph = w * k
                z = complex(math.cos(ph), math.sin(ph))
            a = a0
            for j in range(kmax):
                s = segs[n, j]
                if s < 0:
                    break
                a *= r_table[s, k]
            out[k] += a * z
            z *= rot
    return out


@njit(cache=True)
def field_render(s, patch, shift, alpha, gain, inv_tc):
    n_out = inv_tc.shape[0]
    n_t = s.shape[1]
    out = np.zeros(n_out)
    for k in range(patch.shape[0]):
        p = patch[k]
        if p < 0:
            continue
        m = shift[k]
        w0 = gain[k] * (1.0 - alpha[k])
        w1 = gain[k] * alpha[k]
        # out[m + j] += w0 s[j] + w1 s[j - 1], split into two branch-free sweeps
        hi0 = min(n_t, n_out - m)
        for j in range(max(0, -m), hi0):
            out[m + j] += w0 * s[p, j]
        hi1 = min(n_t, n_out - m - 1)
        for j in range(max(0, -m - 1), hi1):
            out[m + 1 + j] += w1 * s[p, j]
    for i in range(n_out):
        out[i] *= inv_tc[i]
    return out


@njit(cache=True)
def field_adjoint(u, s, patch, shift, alpha, gain, inv_tc):
    """Gradients of <u, field_render(...)> w.r.t. emissions and per-ray gains."""
    n_out = inv_tc.shape[0]
    n_t = s.shape[1]
    gs = np.zeros_like(s)
    gg = np.zeros(patch.shape[0])
    w = u * inv_tc
    for k in range(patch.shape[0]):
        p = patch[k]
        if p < 0:
            continue
        m = shift[k]
        a = alpha[k]
        g = gain[k]
        acc = 0.0
        hi0 = min(n_t, n_out - m)
        for j in range(max(0, -m), hi0):
            wi = w[m + j]
            acc += (1.0 - a) * wi * s[p, j]
            gs[p, j] += g * (1.0 - a) * wi
        hi1 = min(n_t, n_out - m - 1)
        for j in range(max(0, -m - 1), hi1):
            wi = w[m + 1 + j]
            acc += a * wi * s[p, j]
            gs[p, j] += g * a * wi
        gg[k] = acc
    return gs, gg

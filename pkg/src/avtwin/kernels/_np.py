"""Vectorised numpy twins of the numba kernels.

Signatures match :mod:`avtwin.kernels._jit` exactly. Ray casting here is an
all-face scan (the BVH arrays are accepted and ignored), so it is only
practical for meshes of a few thousand faces.
"""
import numpy as np

_DET_EPS = 1e-14
_CHUNK_ELEMS = 2_000_000


def first_hit(origins, dirs, tmin, tmax, tri, lo, hi, left, right, start, count, order):
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    f_out = np.full(n, -1, dtype=np.int64)
    if n == 0 or tri.shape[0] == 0:
        return t_out, f_out
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    step = max(1, _CHUNK_ELEMS // tri.shape[0])
    for a in range(0, n, step):
        o = origins[a:a + step, None, :]
        d = dirs[a:a + step, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rfk,fk->rf", p, e1)
        good = np.abs(det) >= _DET_EPS
        inv = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
        s = o - v0[None]
        u = np.einsum("rfk,rfk->rf", s, p) * inv
        q = np.cross(s, e1[None])
        v = np.einsum("rfk,rfk->rf", np.broadcast_to(d, q.shape), q) * inv
        t = np.einsum("fk,rfk->rf", e2, q) * inv
        tm = np.asarray(tmax[a:a + step], dtype=float)[:, None]
        hit = good & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > tmin) & (t < tm)
        t = np.where(hit, t, np.inf)
        f = np.argmin(t, axis=1)
        tb = t[np.arange(t.shape[0]), f]
        found = np.isfinite(tb)
        t_out[a:a + step] = tb
        f_out[a:a + step] = np.where(found, f, -1)
    return t_out, f_out


def _legs_ok(a, b, target_plane, face_plane, eps, tol, bvh):
    """Vectorised leg validation; ``target_plane`` < 0 means 'must be unoccluded'."""
    diff = b - a
    length = np.linalg.norm(diff, axis=1)
    ok = length > eps
    dirs = diff / np.where(ok, length, 1.0)[:, None]
    tol_l = tol * np.maximum(1.0, length)
    if np.isscalar(target_plane) or np.ndim(target_plane) == 0:
        target_plane = np.full(len(a), int(target_plane), dtype=np.int64)
    free = target_plane < 0
    tmax = np.where(free, length, length + tol_l)
    t, f = first_hit(a, dirs, eps, tmax, *bvh)
    res = np.where(free, f < 0, False)
    hit = ~free & (f >= 0)
    fp = np.where(f >= 0, face_plane[np.maximum(f, 0)], -2)
    res = res | (hit & (fp == target_plane) & (np.abs(t - length) <= tol_l))
    return ok & res


def image_paths(tx, rx, plane_n, plane_d, face_plane, max_bounces, eps, tol, capacity,
                tri, lo, hi, left, right, start, count, order):
    bvh = (tri, lo, hi, left, right, start, count, order)
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    mb = int(max_bounces)
    rows_seq, rows_pts, rows_nb = [], [], []

    if _legs_ok(tx[None], rx[None], -1, face_plane, eps, tol, bvh)[0]:
        rows_seq.append(-np.ones((1, max(mb, 1)), dtype=np.int64))
        p = np.zeros((1, mb + 2, 3))
        p[0, 0] = tx
        p[0, 1] = rx
        rows_pts.append(p)
        rows_nb.append(np.zeros(1, dtype=np.int64))

    n_planes = plane_n.shape[0]
    seqs = np.zeros((1, 0), dtype=np.int64)
    images = tx[None].copy()  # image after the full prefix
    all_images = tx[None, None].copy()  # (M, k+1, 3)
    for k in range(1, mb + 1):
        m = seqs.shape[0]
        if m == 0 or n_planes == 0:
            break
        par = np.repeat(np.arange(m), n_planes)
        pl = np.tile(np.arange(n_planes), m)
        s = np.einsum("ij,ij->i", plane_n[pl], images[par]) - plane_d[pl]
        keep = s > 1e-12
        if k > 1:
            keep &= pl != seqs[par, -1]
        par, pl, s = par[keep], pl[keep], s[keep]
        new_img = images[par] - 2.0 * s[:, None] * plane_n[pl]
        seqs = np.concatenate([seqs[par], pl[:, None]], axis=1)
        all_images = np.concatenate([all_images[par], new_img[:, None]], axis=1)
        images = new_img
        if seqs.shape[0] == 0:
            break

        # backtrace
        n = seqs.shape[0]
        ok = np.ones(n, dtype=bool)
        refl = np.zeros((n, k, 3))
        q = np.broadcast_to(rx, (n, 3)).copy()
        for j in range(k - 1, -1, -1):
            pj = seqs[:, j]
            img = all_images[:, j + 1]
            nn = plane_n[pj]
            sq = np.einsum("ij,ij->i", nn, q) - plane_d[pj]
            si = np.einsum("ij,ij->i", nn, img) - plane_d[pj]
            ok &= (sq > 0) & (si < 0)
            denom = np.where(ok, sq - si, 1.0)
            lam = np.where(ok, sq / denom, 0.0)
            q = q + lam[:, None] * (img - q)
            refl[:, j] = q
        idx = np.nonzero(ok)[0]
        if idx.size:
            cur = idx[_legs_ok(np.broadcast_to(tx, (idx.size, 3)), refl[idx, 0], seqs[idx, 0],
                               face_plane, eps, tol, bvh)]
            for j in range(k - 1):
                if cur.size == 0:
                    break
                cur = cur[_legs_ok(refl[cur, j], refl[cur, j + 1], seqs[cur, j + 1],
                                   face_plane, eps, tol, bvh)]
            if cur.size:
                cur = cur[_legs_ok(refl[cur, k - 1], np.broadcast_to(rx, (cur.size, 3)), -1,
                                   face_plane, eps, tol, bvh)]
            if cur.size:
                sq_rows = -np.ones((cur.size, max(mb, 1)), dtype=np.int64)
                sq_rows[:, :k] = seqs[cur]
                p = np.zeros((cur.size, mb + 2, 3))
                p[:, 0] = tx
                p[:, 1:k + 1] = refl[cur]
                p[:, k + 1] = rx
                rows_seq.append(sq_rows)
                rows_pts.append(p)
                rows_nb.append(np.full(cur.size, k, dtype=np.int64))

    if rows_seq:
        out_seq = np.concatenate(rows_seq)
        out_pts = np.concatenate(rows_pts)
        out_nb = np.concatenate(rows_nb)
    else:
        out_seq = -np.ones((0, max(mb, 1)), dtype=np.int64)
        out_pts = np.zeros((0, mb + 2, 3))
        out_nb = np.zeros(0, dtype=np.int64)
    return out_seq.shape[0], False, out_seq, out_nb, out_pts


def accumulate_spectrum(amps, delays, segs, r_table, df, n_bins):
    out = np.zeros(n_bins, dtype=np.complex128)
    n_paths = amps.shape[0]
    if n_paths == 0:
        return out
    freqs = np.arange(n_bins) * df
    r_ext = np.vstack([r_table[:, :n_bins], np.ones((1, n_bins))])
    segs = np.where(segs < 0, r_table.shape[0], segs)
    step = max(1, _CHUNK_ELEMS // (n_bins * max(1, segs.shape[1])))
    for a in range(0, n_paths, step):
        sl = slice(a, a + step)
        mag = amps[sl, None] * np.prod(r_ext[segs[sl]], axis=1)
        out += np.sum(mag * np.exp(-2j * np.pi * np.outer(delays[sl], freqs)), axis=0)
    return out


def field_render(s, patch, shift, alpha, gain, inv_tc):
    n_out = inv_tc.shape[0]
    n_t = s.shape[1]
    out = np.zeros(n_out)
    for k in np.nonzero(patch >= 0)[0]:
        p, m, a, g = patch[k], int(shift[k]), alpha[k], gain[k]
        # contribution on i in [m, m + n_t]: (1-a) s[i-m] + a s[i-m-1]
        row = np.zeros(n_t + 1)
        row[:n_t] += (1.0 - a) * s[p]
        row[1:] += a * s[p]
        i0, i1 = max(m, 0), min(n_out, m + n_t + 1)
        if i1 > i0:
            out[i0:i1] += g * row[i0 - m:i1 - m]
    return out * inv_tc


def field_adjoint(u, s, patch, shift, alpha, gain, inv_tc):
    n_out = inv_tc.shape[0]
    n_t = s.shape[1]
    gs = np.zeros_like(s)
    gg = np.zeros(patch.shape[0])
    w = u * inv_tc
    for k in np.nonzero(patch >= 0)[0]:
        p, m, a, g = patch[k], int(shift[k]), alpha[k], gain[k]
        i0, i1 = max(m, 0), min(n_out, m + n_t + 1)
        if i1 <= i0:
            continue
        wrow = np.zeros(n_t + 1)
        wrow[i0 - m:i1 - m] = w[i0:i1]
        gs[p] += g * ((1.0 - a) * wrow[:n_t] + a * wrow[1:])
        gg[k] = (1.0 - a) * np.dot(wrow[:n_t], s[p]) + a * np.dot(wrow[1:], s[p])
    return gs, gg

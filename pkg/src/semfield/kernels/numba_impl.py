"""Numba twins of the hot kernels. Same contracts as ``numpy_impl``; loops are
written so each pixel/point sees the identical operation order."""

import numpy as np
from numba import njit

BACKEND_NAME = "numba"

EXP_CLAMP = 80.0
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999

SHAPE_SPHERE = 0
SHAPE_BOX = 1
SHAPE_CAPSULE = 2


@njit(cache=True, inline="always")
def _cell(x, res):
    g = x * (res - 1)
    i = np.int64(g)
    if i > res - 2:
        i = res - 2
    return i, g - i


@njit(cache=True)
def pyramid_gather(grid_cat, offsets, res_arr, pts01, inside):
    P = pts01.shape[0]
    L = res_arr.shape[0]
    C = grid_cat.shape[1]
    out = np.zeros((P, L * C))
    for p in range(P):
        if not inside[p]:
            continue
        x = min(max(pts01[p, 0], 0.0), 1.0)
        y = min(max(pts01[p, 1], 0.0), 1.0)
        z = min(max(pts01[p, 2], 0.0), 1.0)
        for li in range(L):
            res = res_arr[li]
            ix, fx = _cell(x, res)
            iy, fy = _cell(y, res)
            iz, fz = _cell(z, res)
            base = offsets[li] + (ix * res + iy) * res + iz
            col = li * C
            for bx in range(2):
                wx = fx if bx else 1.0 - fx
                rowx = base + bx * res * res
                for by in range(2):
                    wxy = wx * (fy if by else 1.0 - fy)
                    rowy = rowx + by * res
                    for bz in range(2):
                        w = wxy * (fz if bz else 1.0 - fz)
                        row = rowy + bz
                        for c in range(C):
                            out[p, col + c] += w * grid_cat[row, c]
    return out


@njit(cache=True)
def pyramid_scatter(grad_cat, offsets, res_arr, pts01, inside, gfeat):
    P = pts01.shape[0]
    L = res_arr.shape[0]
    C = grad_cat.shape[1]
    for p in range(P):
        if not inside[p]:
            continue
        x = min(max(pts01[p, 0], 0.0), 1.0)
        y = min(max(pts01[p, 1], 0.0), 1.0)
        z = min(max(pts01[p, 2], 0.0), 1.0)
        for li in range(L):
            res = res_arr[li]
            ix, fx = _cell(x, res)
            iy, fy = _cell(y, res)
            iz, fz = _cell(z, res)
            base = offsets[li] + (ix * res + iy) * res + iz
            col = li * C
            for bx in range(2):
                wx = fx if bx else 1.0 - fx
                rowx = base + bx * res * res
                for by in range(2):
                    wxy = wx * (fy if by else 1.0 - fy)
                    rowy = rowx + by * res
                    for bz in range(2):
                        w = wxy * (fz if bz else 1.0 - fz)
                        row = rowy + bz
                        for c in range(C):
                            grad_cat[row, c] += w * gfeat[p, col + c]


@njit(cache=True)
def composite_weights(sigma, delta):
    B, N = sigma.shape
    T = np.empty((B, N + 1))
    w = np.empty((B, N))
    for b in range(B):
        t = 1.0
        T[b, 0] = 1.0
        for i in range(N):
            sd = sigma[b, i] * delta[b, i]
            if sd > EXP_CLAMP:
                sd = EXP_CLAMP
            surv = np.exp(-sd)
            w[b, i] = t * (1.0 - surv)
            t = t * surv
            T[b, i + 1] = t
    return T, w


@njit(cache=True)
def composite_weights_bwd(sigma, delta, T, w, g_w):
    B, N = sigma.shape
    g_sigma = np.zeros((B, N))
    for b in range(B):
        suffix = 0.0
        for i in range(N - 1, -1, -1):
            sd = sigma[b, i] * delta[b, i]
            if sd < EXP_CLAMP:
                surv = np.exp(-sd)
                g_sigma[b, i] = delta[b, i] * (g_w[b, i] * T[b, i] * surv - suffix)
            suffix += g_w[b, i] * w[b, i]
    return g_sigma


@njit(cache=True)
def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    n = p.shape[0]
    for i in range(n):
        gi = g[i]
        if gi == 0.0 and m[i] == 0.0 and v[i] == 0.0:
            continue
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def _sphere_hit_t(ox, oy, oz, dx, dy, dz, radius):
    b = ox * dx + oy * dy + oz * dz
    c = ox * ox + oy * oy + oz * oz - radius * radius
    disc = b * b - c
    if disc < 0.0:
        return np.inf
    sq = np.sqrt(disc)
    t0 = -b - sq
    if t0 > 1e-9:
        return t0
    t1 = -b + sq
    if t1 > 1e-9:
        return t1
    return np.inf


@njit(cache=True)
def _box_hit_t(ox, oy, oz, dx, dy, dz, ex, ey, ez):
    t_near = -np.inf
    t_far = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    e = (ex, ey, ez)
    for a in range(3):
        da = d[a]
        if abs(da) < 1e-300:
            da = 1e-300 if da >= 0.0 else -1e-300
        inv = 1.0 / da
        lo = (-e[a] - o[a]) * inv
        hi = (e[a] - o[a]) * inv
        if lo > hi:
            lo, hi = hi, lo
        if lo > t_near:
            t_near = lo
        if hi < t_far:
            t_far = hi
    if t_far < t_near or t_far < 0.0:
        return np.inf
    if t_near > 1e-9:
        return t_near
    if t_far > 1e-9:
        return t_far
    return np.inf


@njit(cache=True)
def _capsule_hit_t(ox, oy, oz, dx, dy, dz, radius, half_core):
    best = np.inf
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    if a >= 1e-300:
        disc = b * b - a * c
        if disc >= 0.0:
            sq = np.sqrt(disc)
            for sign in (-1.0, 1.0):
                t = (-b + sign * sq) / a
                if t > 1e-9:
                    z = oz + t * dz
                    if abs(z) <= half_core and t < best:
                        best = t
    for zc in (-half_core, half_core):
        t = _sphere_hit_t(ox, oy, oz - zc, dx, dy, dz, radius)
        if t < best:
            z = oz - zc + t * dz
            if z * zc > 0.0 or zc == 0.0:
                best = t
    return best


@njit(cache=True)
def intersect_scene(origins, dirs, shapes, rot, trans, extent):
    P = origins.shape[0]
    K = shapes.shape[0]
    best_t = np.full(P, np.inf)
    best_k = np.full(P, -1, dtype=np.int32)
    normals = np.zeros((P, 3))
    for p in range(P):
        for k in range(K):
            ox = oy = oz = 0.0
            dx = dy = dz = 0.0
            for j in range(3):
                wj = origins[p, j] - trans[k, j]
                ox += wj * rot[k, j, 0]
                oy += wj * rot[k, j, 1]
                oz += wj * rot[k, j, 2]
                dx += dirs[p, j] * rot[k, j, 0]
                dy += dirs[p, j] * rot[k, j, 1]
                dz += dirs[p, j] * rot[k, j, 2]
            if shapes[k] == SHAPE_SPHERE:
                t = _sphere_hit_t(ox, oy, oz, dx, dy, dz, extent[k, 0])
            elif shapes[k] == SHAPE_BOX:
                t = _box_hit_t(ox, oy, oz, dx, dy, dz,
                               extent[k, 0], extent[k, 1], extent[k, 2])
            else:
                t = _capsule_hit_t(ox, oy, oz, dx, dy, dz,
                                   extent[k, 0], extent[k, 2] - extent[k, 0])
            if t < best_t[p]:
                best_t[p] = t
                best_k[p] = k
        k = best_k[p]
        if k >= 0:
            ox = oy = oz = 0.0
            dx = dy = dz = 0.0
            for j in range(3):
                wj = origins[p, j] - trans[k, j]
                ox += wj * rot[k, j, 0]
                oy += wj * rot[k, j, 1]
                oz += wj * rot[k, j, 2]
                dx += dirs[p, j] * rot[k, j, 0]
                dy += dirs[p, j] * rot[k, j, 1]
                dz += dirs[p, j] * rot[k, j, 2]
            hx = ox + best_t[p] * dx
            hy = oy + best_t[p] * dy
            hz = oz + best_t[p] * dz
            if shapes[k] == SHAPE_SPHERE:
                nx, ny, nz = hx, hy, hz
            elif shapes[k] == SHAPE_BOX:
                qx = abs(hx) / extent[k, 0]
                qy = abs(hy) / extent[k, 1]
                qz = abs(hz) / extent[k, 2]
                nx = ny = nz = 0.0
                if qx >= qy and qx >= qz:
                    nx = 1.0 if hx > 0 else -1.0
                elif qy >= qz:
                    ny = 1.0 if hy > 0 else -1.0
                else:
                    nz = 1.0 if hz > 0 else -1.0
            else:
                half_core = extent[k, 2] - extent[k, 0]
                zc = hz
                if zc > half_core:
                    zc = half_core
                elif zc < -half_core:
                    zc = -half_core
                nx, ny, nz = hx, hy, hz - zc
            nn = np.sqrt(nx * nx + ny * ny + nz * nz)
            if nn < 1e-300:
                nn = 1.0
            nx, ny, nz = nx / nn, ny / nn, nz / nn
            for j in range(3):
                normals[p, j] = rot[k, j, 0] * nx + rot[k, j, 1] * ny + rot[k, j, 2] * nz
    return best_t, best_k, normals


@njit(cache=True)
def raster_blend(pair_gauss, tile_starts, tiles_x, tile_px, H, W,
                 means2d, conic, opacity, colors, embeds, t_min):
    D = embeds.shape[1]
    rgb = np.zeros((H, W, 3))
    emb = np.zeros((H, W, D))
    alpha_acc = np.zeros((H, W))
    n_tiles = tile_starts.shape[0] - 1
    for t in range(n_tiles):
        s = tile_starts[t]
        e = tile_starts[t + 1]
        if s == e:
            continue
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * tile_px
        x0 = tx * tile_px
        y1 = min(y0 + tile_px, H)
        x1 = min(x0 + tile_px, W)
        for yy in range(y0, y1):
            py = yy + 0.5
            for xx in range(x0, x1):
                px = xx + 0.5
                T = 1.0
                for q in range(s, e):
                    if T <= t_min:
                        break
                    g = pair_gauss[q]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    a = opacity[g] * np.exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    w = T * a
                    for c in range(3):
                        rgb[yy, xx, c] += w * colors[g, c]
                    for d in range(D):
                        emb[yy, xx, d] += w * embeds[g, d]
                    T = T * (1.0 - a)
                alpha_acc[yy, xx] = 1.0 - T
    return rgb, emb, alpha_acc


@njit(cache=True)
def raster_blend_bwd(pair_gauss, tile_starts, tiles_x, tile_px, H, W,
                     means2d, conic, opacity, colors, g_rgb, t_min):
    M = means2d.shape[0]
    g_colors = np.zeros((M, 3))
    g_opacity = np.zeros(M)
    g_conic = np.zeros((M, 3))
    n_tiles = tile_starts.shape[0] - 1
    for t in range(n_tiles):
        s = tile_starts[t]
        e = tile_starts[t + 1]
        if s == e:
            continue
        K = e - s
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * tile_px
        x0 = tx * tile_px
        y1 = min(y0 + tile_px, H)
        x1 = min(x0 + tile_px, W)
        alphas = np.empty(K)
        capped = np.empty(K, dtype=np.bool_)
        Ts = np.empty(K)
        for yy in range(y0, y1):
            py = yy + 0.5
            for xx in range(x0, x1):
                px = xx + 0.5
                T = 1.0
                for j in range(K):
                    g = pair_gauss[s + j]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    raw = opacity[g] * np.exp(power)
                    a = raw if raw <= ALPHA_MAX else ALPHA_MAX
                    if a < ALPHA_MIN or T <= t_min:
                        a = 0.0
                    alphas[j] = a
                    capped[j] = a > 0.0 and raw > ALPHA_MAX
                    Ts[j] = T
                    T = T * (1.0 - a)
                s0 = s1 = s2 = 0.0
                for j in range(K - 1, -1, -1):
                    a = alphas[j]
                    if a == 0.0:
                        continue
                    g = pair_gauss[s + j]
                    Tj = Ts[j]
                    w = Tj * a
                    gr = g_rgb[yy, xx, 0]
                    gg = g_rgb[yy, xx, 1]
                    gb = g_rgb[yy, xx, 2]
                    g_colors[g, 0] += w * gr
                    g_colors[g, 1] += w * gg
                    g_colors[g, 2] += w * gb
                    if not capped[j]:
                        inv1ma = 1.0 / (1.0 - a)
                        g_alpha = gr * (Tj * colors[g, 0] - s0 * inv1ma) \
                            + gg * (Tj * colors[g, 1] - s1 * inv1ma) \
                            + gb * (Tj * colors[g, 2] - s2 * inv1ma)
                        dx = px - means2d[g, 0]
                        dy = py - means2d[g, 1]
                        g_power = g_alpha * a
                        g_opacity[g] += g_alpha * a / opacity[g]
                        g_conic[g, 0] += g_power * (-0.5 * dx * dx)
                        g_conic[g, 1] += g_power * (-dx * dy)
                        g_conic[g, 2] += g_power * (-0.5 * dy * dy)
                    s0 += w * colors[g, 0]
                    s1 += w * colors[g, 1]
                    s2 += w * colors[g, 2]
    return g_colors, g_opacity, g_conic


@njit(cache=True)
def match_within_radius(query, ref, radius):
    nq = query.shape[0]
    nr = ref.shape[0]
    matched = np.zeros(nq, dtype=np.bool_)
    if nq == 0 or nr == 0:
        return matched
    lo = np.empty(3)
    for j in range(3):
        m = query[0, j]
        for i in range(nq):
            if query[i, j] < m:
                m = query[i, j]
        for i in range(nr):
            if ref[i, j] < m:
                m = ref[i, j]
        lo[j] = m
    rc = np.empty((nr, 3), dtype=np.int64)
    qc = np.empty((nq, 3), dtype=np.int64)
    dims = np.empty(3, dtype=np.int64)
    for j in range(3):
        mx = np.int64(0)
        for i in range(nr):
            v = np.int64(np.floor((ref[i, j] - lo[j]) / radius))
            rc[i, j] = v
            if v > mx:
                mx = v
        for i in range(nq):
            v = np.int64(np.floor((query[i, j] - lo[j]) / radius))
            qc[i, j] = v
            if v > mx:
                mx = v
        dims[j] = mx + 3
    if float(dims[0]) * float(dims[1]) * float(dims[2]) > 2.0**62:
        r2 = radius * radius
        for i in range(nq):
            for k in range(nr):
                d2 = 0.0
                for j in range(3):
                    dd = query[i, j] - ref[k, j]
                    d2 += dd * dd
                if d2 <= r2:
                    matched[i] = True
                    break
        return matched
    rkey = np.empty(nr, dtype=np.int64)
    for i in range(nr):
        rkey[i] = (rc[i, 0] * dims[1] + rc[i, 1]) * dims[2] + rc[i, 2]
    order = np.argsort(rkey, kind="mergesort")
    rkey_s = rkey[order]
    ref_s = ref[order]
    r2 = radius * radius
    for i in range(nq):
        found = False
        for ox in range(-1, 2):
            if found:
                break
            for oy in range(-1, 2):
                if found:
                    break
                for oz in range(-1, 2):
                    nk = ((qc[i, 0] + ox) * dims[1] + (qc[i, 1] + oy)) * dims[2] \
                        + (qc[i, 2] + oz)
                    left = np.searchsorted(rkey_s, nk, side="left")
                    right = np.searchsorted(rkey_s, nk, side="right")
                    for k in range(left, right):
                        d2 = 0.0
                        for j in range(3):
                            dd = query[i, j] - ref_s[k, j]
                            d2 += dd * dd
                        if d2 <= r2:
                            found = True
                            break
                    if found:
                        break
        matched[i] = found
    return matched

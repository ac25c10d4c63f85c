"""Pure-numpy reference implementations of the hot kernels.

Semantics here are the contract; the numba twin in ``numba_impl`` must agree
with these (same per-pixel / per-point operation order, so results match to
floating-point reassociation noise at worst).
"""

import numpy as np

BACKEND_NAME = "numpy"


# ---------------------------------------------------------------------------
# voxel pyramid gather / scatter

_CORNER_BITS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)],
                        dtype=np.int64)


def _corners(u, res):
    """Trilinear corner flat-indices and weights for points in [0,1]^3."""
    g = u * (res - 1)
    i0 = g.astype(np.int64)
    np.clip(i0, 0, res - 2, out=i0)
    f = g - i0
    corners = i0[:, None, :] + _CORNER_BITS[None, :, :]
    idx = (corners[:, :, 0] * res + corners[:, :, 1]) * res + corners[:, :, 2]
    wa = np.where(_CORNER_BITS[None, :, :].astype(bool), f[:, None, :],
                  1.0 - f[:, None, :])
    return idx, wa[:, :, 0] * wa[:, :, 1] * wa[:, :, 2]


def pyramid_gather(grid_cat, offsets, res_arr, pts01, inside):
    """Trilinear features from all pyramid levels, concatenated.

    grid_cat: (sum res^3, C) level grids stacked; offsets: (L+1,) start row
    per level; pts01 in [0,1]^3 for inside points. Outside points yield zeros.
    Returns (P, L*C).
    """
    P = pts01.shape[0]
    L = res_arr.shape[0]
    C = grid_cat.shape[1]
    out = np.zeros((P, L * C))
    u = np.clip(pts01, 0.0, 1.0)
    mask = inside.astype(np.float64)
    for li in range(L):
        idx, w = _corners(u, int(res_arr[li]))
        w = w * mask[:, None]
        block = grid_cat[offsets[li] + idx]
        out[:, li * C:(li + 1) * C] = np.einsum("pkc,pk->pc", block, w)
    return out


def pyramid_scatter(grad_cat, offsets, res_arr, pts01, inside, gfeat):
    """Adjoint of pyramid_gather: accumulate (P, L*C) feature gradients into
    the 8 corner voxels per level."""
    C = grad_cat.shape[1]
    u = np.clip(pts01, 0.0, 1.0)
    mask = inside.astype(np.float64)
    for li in range(res_arr.shape[0]):
        idx, w = _corners(u, int(res_arr[li]))
        w = w * mask[:, None]
        contrib = w[:, :, None] * gfeat[:, None, li * C:(li + 1) * C]
        np.add.at(grad_cat, (offsets[li] + idx).reshape(-1),
                  contrib.reshape(-1, C))


# ---------------------------------------------------------------------------
# volume-rendering weight chain

EXP_CLAMP = 80.0


def composite_weights(sigma, delta):
    """Transmittance/weight chain for a batch of rays.

    sigma, delta: (B, N) -> T (B, N+1), w (B, N) with T[:,0]=1,
    T[:,i+1] = T[:,i]*exp(-sigma_i*delta_i), w_i = T_i*(1-exp(-sigma_i*delta_i)).
    """
    sd = np.minimum(sigma * delta, EXP_CLAMP)
    surv = np.exp(-sd)                            # (B, N)
    B, N = sigma.shape
    T = np.empty((B, N + 1), dtype=sigma.dtype)
    T[:, 0] = 1.0
    np.cumprod(surv, axis=1, out=T[:, 1:])
    w = T[:, :-1] * (1.0 - surv)
    return T, w


def composite_weights_bwd(sigma, delta, T, w, g_w):
    """Gradient of sum(g_w * w) w.r.t. sigma.

    dw_j/dsigma_j = T_j*delta_j*exp(-sigma_j delta_j); for i > j the weight
    shrinks through transmittance: dw_i/dsigma_j = -delta_j*w_i.
    """
    sd = sigma * delta
    active = sd < EXP_CLAMP
    surv = np.exp(-np.minimum(sd, EXP_CLAMP))
    gw_w = g_w * w
    # suffix[:, j] = sum_{i>j} g_w[:, i] * w[:, i]
    suffix = np.zeros_like(w)
    if w.shape[1] > 1:
        suffix[:, :-1] = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1][:, 1:]
    g_sigma = delta * (g_w * T[:, :-1] * surv - suffix)
    return np.where(active, g_sigma, 0.0)


def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """Fused in-place Adam step over flat arrays (elements with zero gradient
    and zero moments are no-ops by construction)."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# analytic ray / primitive intersection (ground-truth renderer)

SHAPE_SPHERE = 0
SHAPE_BOX = 1
SHAPE_CAPSULE = 2

_MISS = np.inf


def _sphere_hits(o, d, radius):
    # |o + t d|^2 = r^2 with unit d
    b = np.einsum("pj,pj->p", o, d)
    c = np.einsum("pj,pj->p", o, o) - radius * radius
    disc = b * b - c
    ok = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, _MISS))
    return np.where(ok, t, _MISS)


def _box_hits(o, d, extent):
    inv = 1.0 / np.where(np.abs(d) < 1e-300, np.copysign(1e-300, d), d)
    t_lo = (-extent - o) * inv
    t_hi = (extent - o) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    t_near = t1.max(axis=1)
    t_far = t2.min(axis=1)
    ok = t_far >= np.maximum(t_near, 0.0)
    t = np.where(t_near > 1e-9, t_near, np.where(t_far > 1e-9, t_far, _MISS))
    return np.where(ok, t, _MISS)


def _capsule_hits(o, d, radius, half_core):
    # core segment z in [-half_core, half_core]; cylinder + two sphere caps
    ox, oy, oz = o[:, 0], o[:, 1], o[:, 2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    t_best = np.full(o.shape[0], _MISS)
    safe_a = np.where(a < 1e-300, 1.0, a)
    disc = b * b - a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    for sign in (-1.0, 1.0):
        t = (-b + sign * sq) / safe_a
        z = oz + t * dz
        ok = (disc >= 0.0) & (a >= 1e-300) & (t > 1e-9) & (np.abs(z) <= half_core)
        t_best = np.where(ok & (t < t_best), t, t_best)
    for zc in (-half_core, half_core):
        oc = o - np.array([0.0, 0.0, zc])
        t = _sphere_hits(oc, d, radius)
        z = oc[:, 2] + t * d[:, 2]
        ok = np.isfinite(t) & (np.sign(z) == np.sign(zc)) if zc != 0 else np.isfinite(t)
        t_best = np.where(ok & (t < t_best), t, t_best)
    return t_best


def intersect_scene(origins, dirs, shapes, rot, trans, extent):
    """Closest-hit over all primitives.

    origins, dirs: (P,3) with unit dirs; shapes (K,) int codes; rot (K,3,3)
    world-from-local; trans (K,3); extent (K,3).
    Returns (t (P,), label (P,) int32 with -1 for miss, normal (P,3)).
    """
    P = origins.shape[0]
    best_t = np.full(P, _MISS)
    best_k = np.full(P, -1, dtype=np.int32)
    for k in range(shapes.shape[0]):
        R = rot[k]
        o = (origins - trans[k]) @ R              # local frame (R^T x as row ops)
        d = dirs @ R
        if shapes[k] == SHAPE_SPHERE:
            t = _sphere_hits(o, d, extent[k, 0])
        elif shapes[k] == SHAPE_BOX:
            t = _box_hits(o, d, extent[k])
        else:
            t = _capsule_hits(o, d, extent[k, 0], extent[k, 2] - extent[k, 0])
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_k = np.where(closer, np.int32(k), best_k)

    normals = np.zeros((P, 3))
    for k in range(shapes.shape[0]):
        sel = best_k == k
        if not sel.any():
            continue
        R = rot[k]
        o = (origins[sel] - trans[k]) @ R
        d = dirs[sel] @ R
        p = o + best_t[sel, None] * d
        if shapes[k] == SHAPE_SPHERE:
            n = p
        elif shapes[k] == SHAPE_BOX:
            q = np.abs(p) / extent[k]
            n = np.zeros_like(p)
            axis = q.argmax(axis=1)
            n[np.arange(p.shape[0]), axis] = np.sign(p[np.arange(p.shape[0]), axis])
        else:
            half_core = extent[k, 2] - extent[k, 0]
            zc = np.clip(p[:, 2], -half_core, half_core)
            n = p - np.stack([np.zeros_like(zc), np.zeros_like(zc), zc], axis=1)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(norm < 1e-300, 1.0, norm)
        normals[sel] = n @ R.T                    # back to world
    return best_t, best_k, normals


# ---------------------------------------------------------------------------
# tile rasterizer blending (forward / backward)

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999


def raster_blend(pair_gauss, tile_starts, tiles_x, tile_px, H, W,
                 means2d, conic, opacity, colors, embeds, t_min):
    """Front-to-back alpha blending over tile-binned, depth-sorted splats.

    pair_gauss: (E,) gaussian index per (tile, splat) pair, grouped by tile and
    depth-sorted within each tile (ties already broken by insertion index).
    tile_starts: (T+1,) offsets into pair_gauss per tile.
    Returns rgb (H,W,3), emb (H,W,D), alpha (H,W).
    """
    D = embeds.shape[1]
    rgb = np.zeros((H, W, 3))
    emb = np.zeros((H, W, D))
    alpha_acc = np.zeros((H, W))
    n_tiles = tile_starts.shape[0] - 1
    for t in range(n_tiles):
        s, e = tile_starts[t], tile_starts[t + 1]
        if s == e:
            continue
        ty, tx = divmod(t, tiles_x)
        y0, x0 = ty * tile_px, tx * tile_px
        y1, x1 = min(y0 + tile_px, H), min(x0 + tile_px, W)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = xs.ravel() + 0.5
        py = ys.ravel() + 0.5
        n_pix = px.shape[0]
        T = np.ones(n_pix)
        c_acc = np.zeros((n_pix, 3))
        e_acc = np.zeros((n_pix, D))
        for g in pair_gauss[s:e]:
            dx = px - means2d[g, 0]
            dy = py - means2d[g, 1]
            power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                - conic[g, 1] * dx * dy
            a = np.minimum(opacity[g] * np.exp(power), ALPHA_MAX)
            live = (a >= ALPHA_MIN) & (T > t_min)
            a = np.where(live, a, 0.0)
            w = T * a
            c_acc += w[:, None] * colors[g]
            e_acc += w[:, None] * embeds[g]
            T = T * (1.0 - a)
        sh = (y1 - y0, x1 - x0)
        rgb[y0:y1, x0:x1] = c_acc.reshape(sh + (3,))
        emb[y0:y1, x0:x1] = e_acc.reshape(sh + (D,))
        alpha_acc[y0:y1, x0:x1] = (1.0 - T).reshape(sh)
    return rgb, emb, alpha_acc


def raster_blend_bwd(pair_gauss, tile_starts, tiles_x, tile_px, H, W,
                     means2d, conic, opacity, colors, g_rgb, t_min):
    """Gradients of sum(g_rgb * rgb) w.r.t. colors, opacity, and conic.

    Recomputes the forward chain per pixel, then walks it back accumulating
    suffix sums (positions and embeddings are frozen upstream, so only the
    photometric path needs gradients).
    """
    M = means2d.shape[0]
    g_colors = np.zeros((M, 3))
    g_opacity = np.zeros(M)
    g_conic = np.zeros((M, 3))
    n_tiles = tile_starts.shape[0] - 1
    for t in range(n_tiles):
        s, e = tile_starts[t], tile_starts[t + 1]
        if s == e:
            continue
        ty, tx = divmod(t, tiles_x)
        y0, x0 = ty * tile_px, tx * tile_px
        y1, x1 = min(y0 + tile_px, H), min(x0 + tile_px, W)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = xs.ravel() + 0.5
        py = ys.ravel() + 0.5
        n_pix = px.shape[0]
        gs = pair_gauss[s:e]
        K = gs.shape[0]
        # forward replay, keeping alpha and T per contribution
        alphas = np.zeros((K, n_pix))
        Ts = np.empty((K, n_pix))
        capped = np.zeros((K, n_pix), dtype=bool)
        T = np.ones(n_pix)
        for j, g in enumerate(gs):
            dx = px - means2d[g, 0]
            dy = py - means2d[g, 1]
            power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                - conic[g, 1] * dx * dy
            raw = opacity[g] * np.exp(power)
            a = np.minimum(raw, ALPHA_MAX)
            live = (a >= ALPHA_MIN) & (T > t_min)
            a = np.where(live, a, 0.0)
            alphas[j] = a
            capped[j] = live & (raw > ALPHA_MAX)
            Ts[j] = T
            T = T * (1.0 - a)
        gpix = g_rgb[y0:y1, x0:x1].reshape(n_pix, 3)
        S = np.zeros((n_pix, 3))
        for j in range(K - 1, -1, -1):
            g = gs[j]
            a = alphas[j]
            Tj = Ts[j]
            w = Tj * a
            g_colors[g] += w @ gpix
            g_alpha = np.einsum("pc,pc->p", gpix, Tj[:, None] * colors[g] - S / (1.0 - a)[:, None])
            g_alpha = np.where((a > 0.0) & ~capped[j], g_alpha, 0.0)
            S += w[:, None] * colors[g]
            dx = px - means2d[g, 0]
            dy = py - means2d[g, 1]
            g_power = g_alpha * a
            g_opacity[g] += np.sum(np.where(a > 0.0, g_alpha * a / opacity[g], 0.0))
            g_conic[g, 0] += np.sum(g_power * (-0.5 * dx * dx))
            g_conic[g, 1] += np.sum(g_power * (-dx * dy))
            g_conic[g, 2] += np.sum(g_power * (-0.5 * dy * dy))
    return g_colors, g_opacity, g_conic


# ---------------------------------------------------------------------------
# radius matching on a uniform grid hash (exact, equals brute force)


def _pack_cells(cells, dims):
    return (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]


def match_within_radius(query, ref, radius):
    """Boolean per query point: does any ref point lie within `radius`?

    Uniform grid hash with cell size = radius; exact Euclidean check against
    the 27 neighboring cells.
    """
    nq, nr = query.shape[0], ref.shape[0]
    if nq == 0:
        return np.zeros(0, dtype=bool)
    if nr == 0:
        return np.zeros(nq, dtype=bool)
    lo = np.minimum(query.min(axis=0), ref.min(axis=0))
    rcell = ref - lo
    qcell = query - lo
    rc = np.floor(rcell / radius).astype(np.int64)
    qc = np.floor(qcell / radius).astype(np.int64)
    dims = np.maximum(rc.max(axis=0), qc.max(axis=0)) + 3
    if np.prod(dims.astype(np.float64)) > 2**62:
        # degenerate geometry/radius ratio: fall back to chunked brute force
        matched = np.zeros(nq, dtype=bool)
        r2 = radius * radius
        for s in range(0, nq, 1024):
            d2 = ((query[s:s + 1024, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
            matched[s:s + 1024] = (d2 <= r2).any(axis=1)
        return matched
    rkey = _pack_cells(rc, dims)
    order = np.argsort(rkey, kind="stable")
    rkey_s = rkey[order]
    ref_s = ref[order]
    matched = np.zeros(nq, dtype=bool)
    r2 = radius * radius
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for oz in (-1, 0, 1):
                nk = _pack_cells(qc + np.array([ox, oy, oz]), dims)
                left = np.searchsorted(rkey_s, nk, side="left")
                right = np.searchsorted(rkey_s, nk, side="right")
                lens = right - left
                todo = np.nonzero(~matched & (lens > 0))[0]
                if todo.size == 0:
                    continue
                lens_t = lens[todo]
                total = int(lens_t.sum())
                qid = np.repeat(todo, lens_t)
                starts = np.concatenate(([0], np.cumsum(lens_t)[:-1]))
                cand = np.arange(total) - np.repeat(starts, lens_t) + np.repeat(left[todo], lens_t)
                d2 = ((query[qid] - ref_s[cand]) ** 2).sum(axis=1)
                hit = d2 <= r2
                np.logical_or.at(matched, qid[hit], True)
    return matched

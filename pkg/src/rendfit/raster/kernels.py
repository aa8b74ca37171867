"""Compiled pixel loops for soft and hard triangle rasterization.

Soft rasterization, per pixel p and triangle t within reach:

    x      = signed distance (positive inside) / sigma
    S_p   += softplus(x) * win(x)             silhouette = 1 - exp(-S)
    D_t    = sigmoid(x) * win(x)
    w_t    = D_t * exp(q_t / gamma)           q_t: normalized inverse depth
    depth  = psi(S) * sum(w z) / sum(w)
    color  = sum(w c) / sum(w)

``win`` is a quintic ramp that takes contributions to exactly zero at
``x = -cut``; ``psi`` ramps depth to zero where coverage vanishes.

Every piece is at least C^1 in the vertex positions and texels:

* outside, the distance is Euclidean distance to the triangle (C^1 off the
  triangle); inside it is a p-norm soft minimum of the three edge-line
  distances, which meets zero with unit slope on every edge;
* barycentrics pass through a quadratic smooth clamp before renormalizing;
* texels are blended with smoothstep weights, so colour is C^1 across texel
  seams and at the texture border.

Inverse depth is interpolated linearly in screen space and texture
coordinates affinely.
"""
import numpy as np
from numba import njit

EPS_DEN = 1e-14
INSIDE_P = 8.0
BARY_EPS = 0.05


@njit(cache=True, inline="always")
def _cross(ax, ay, bx, by, qx, qy):
    return (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)


@njit(cache=True, inline="always")
def _seg_dist(ax, ay, bx, by, qx, qy):
    ex = bx - ax
    ey = by - ay
    l2 = ex * ex + ey * ey
    t = 0.0
    if l2 > 0.0:
        t = ((qx - ax) * ex + (qy - ay) * ey) / l2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    cx = ax + t * ex
    cy = ay + t * ey
    dx = qx - cx
    dy = qy - cy
    return np.sqrt(dx * dx + dy * dy), t, dx, dy


@njit(cache=True, inline="always")
def _softplus(x):
    if x > 30.0:
        return x
    if x < -30.0:
        return np.exp(x)
    return np.log1p(np.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _window(x, cut, win):
    s = (x + cut) / win
    if s >= 1.0:
        return 1.0, 0.0
    if s <= 0.0:
        return 0.0, 0.0
    w = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    dw = 30.0 * s * s * (1.0 - s) * (1.0 - s) / win
    return w, dw


@njit(cache=True, inline="always")
def _facing(den, sign, area):
    """Soft back-face weight: 0 facing away, 1 once the signed area exceeds ``area``."""
    if area <= 0.0:
        return 1.0, 0.0
    w, dw = _window(sign * den / area, 0.0, 1.0)
    return w, dw * sign / area


@njit(cache=True, inline="always")
def _sclamp(b):
    """C^1 clamp at zero: identity above BARY_EPS, zero below -BARY_EPS."""
    if b >= BARY_EPS:
        return b, 1.0
    if b <= -BARY_EPS:
        return 0.0, 0.0
    s = b + BARY_EPS
    return s * s / (4.0 * BARY_EPS), s / (2.0 * BARY_EPS)


@njit(cache=True, inline="always")
def _smoothstep(a):
    return a * a * (3.0 - 2.0 * a), 6.0 * a * (1.0 - a)


@njit(cache=True)
def _inside_dist(l0, l1, l2):
    """(sum l^-p)^(-1/p) and its partials; all l >= 0."""
    m = min(l0, l1, l2)
    if m <= 0.0:
        if l0 == m:
            return 0.0, 1.0, 0.0, 0.0
        if l1 == m:
            return 0.0, 0.0, 1.0, 0.0
        return 0.0, 0.0, 0.0, 1.0
    s = (m / l0) ** INSIDE_P + (m / l1) ** INSIDE_P + (m / l2) ** INSIDE_P
    d = m * s ** (-1.0 / INSIDE_P)
    return d, (d / l0) ** (INSIDE_P + 1.0), (d / l1) ** (INSIDE_P + 1.0), (d / l2) ** (INSIDE_P + 1.0)


@njit(cache=True)
def _tex_sample(tex, fid, u, v):
    """Smoothstep-weighted bilinear sample.

    Returns color (3), d color / d(u, v) (3x2), the base texel and the two
    blend weights.
    """
    size = tex.shape[1]
    fx = u * size - 0.5
    fy = v * size - 0.5
    cx_clamped = False
    cy_clamped = False
    if fx < 0.0:
        fx = 0.0
        cx_clamped = True
    elif fx > size - 1.0:
        fx = size - 1.0
        cx_clamped = True
    if fy < 0.0:
        fy = 0.0
        cy_clamped = True
    elif fy > size - 1.0:
        fy = size - 1.0
        cy_clamped = True
    x0 = int(np.floor(fx))
    y0 = int(np.floor(fy))
    if x0 > size - 2:
        x0 = size - 2
    if y0 > size - 2:
        y0 = size - 2
    ax, dax = _smoothstep(fx - x0)
    ay, day = _smoothstep(fy - y0)
    col = np.empty(3)
    dcol = np.zeros((3, 2))
    for ch in range(3):
        t00 = tex[fid, y0, x0, ch]
        t01 = tex[fid, y0, x0 + 1, ch]
        t10 = tex[fid, y0 + 1, x0, ch]
        t11 = tex[fid, y0 + 1, x0 + 1, ch]
        top = t00 + ax * (t01 - t00)
        bot = t10 + ax * (t11 - t10)
        col[ch] = top + ay * (bot - top)
        if not cx_clamped:
            dcol[ch, 0] = size * dax * ((1.0 - ay) * (t01 - t00) + ay * (t11 - t10))
        if not cy_clamped:
            dcol[ch, 1] = size * day * (bot - top)
    return col, dcol, x0, y0, ax, ay


@njit(cache=True)
def _pixel_range(lo, hi, n):
    a = int(np.ceil(lo - 0.5))
    b = int(np.floor(hi - 0.5))
    if a < 0:
        a = 0
    if b > n - 1:
        b = n - 1
    return a, b


@njit(cache=True)
def _fragment(p0x, p0y, p1x, p1y, p2x, p2y, den, qx, qy):
    """Signed distance and barycentrics of one pixel against one triangle.

    Returns ``(d, inside, b0, b1, b2, k, t, dx, dy, dmin, g12, g20, g01)``:
    outside, ``k``/``t``/``dx``/``dy``/``dmin`` describe the nearest
    boundary point; inside, ``g..`` are dd/d(edge-line distance).
    """
    n0 = _cross(p1x, p1y, p2x, p2y, qx, qy)
    n1 = _cross(p2x, p2y, p0x, p0y, qx, qy)
    n2 = _cross(p0x, p0y, p1x, p1y, qx, qy)
    b0 = n0 / den
    b1 = n1 / den
    b2 = n2 / den
    inside = b0 >= 0.0 and b1 >= 0.0 and b2 >= 0.0
    if inside:
        a = abs(den)
        l12 = b0 * a / np.hypot(p2x - p1x, p2y - p1y)
        l20 = b1 * a / np.hypot(p0x - p2x, p0y - p2y)
        l01 = b2 * a / np.hypot(p1x - p0x, p1y - p0y)
        d, g12, g20, g01 = _inside_dist(l12, l20, l01)
        return d, True, b0, b1, b2, 0, 0.0, 0.0, 0.0, 0.0, g12, g20, g01
    d0, t0, dx0, dy0 = _seg_dist(p0x, p0y, p1x, p1y, qx, qy)
    d1, t1, dx1, dy1 = _seg_dist(p1x, p1y, p2x, p2y, qx, qy)
    d2, t2, dx2, dy2 = _seg_dist(p2x, p2y, p0x, p0y, qx, qy)
    k = 0
    dmin = d0
    t = t0
    dx = dx0
    dy = dy0
    if d1 < dmin:
        k = 1
        dmin = d1
        t = t1
        dx = dx1
        dy = dy1
    if d2 < dmin:
        k = 2
        dmin = d2
        t = t2
        dx = dx2
        dy = dy2
    return -dmin, False, b0, b1, b2, k, t, dx, dy, dmin, 0.0, 0.0, 0.0


@njit(cache=True, inline="always")
def _add_line_grad(g, gpos, ia, ib, ax, ay, bx, by, qx, qy, sgn):
    """Accumulate g * d l into vertex gradients, l = sgn * cross(B - A, Q - A) / |B - A|."""
    ex = bx - ax
    ey = by - ay
    ln = np.hypot(ex, ey)
    n = _cross(ax, ay, bx, by, qx, qy)
    _add_cross_grad(g * sgn / ln, gpos, ia, ib, ax, ay, bx, by, qx, qy, -1)
    gl = -g * sgn * n / (ln * ln * ln)
    gpos[ib, 0] += gl * ex
    gpos[ib, 1] += gl * ey
    gpos[ia, 0] -= gl * ex
    gpos[ia, 1] -= gl * ey


@njit(cache=True)
def soft_forward(pos, invz, faces, uv, face_tex, tex, H, W, sigma, gamma, cut, win, lo, rng, cull_sign, cull_area):
    S = np.zeros((H, W))
    wsum = np.zeros((H, W))
    zsum = np.zeros((H, W))
    csum = np.zeros((H, W, 3))
    margin = cut * sigma
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        p0x = pos[i0, 0]
        p0y = pos[i0, 1]
        p1x = pos[i1, 0]
        p1y = pos[i1, 1]
        p2x = pos[i2, 0]
        p2y = pos[i2, 1]
        den = _cross(p0x, p0y, p1x, p1y, p2x, p2y)
        if abs(den) < EPS_DEN:
            continue
        kap, dkap = _facing(den, cull_sign, cull_area)
        if kap == 0.0:
            continue
        xmin = min(p0x, p1x, p2x) - margin
        xmax = max(p0x, p1x, p2x) + margin
        ymin = min(p0y, p1y, p2y) - margin
        ymax = max(p0y, p1y, p2y) + margin
        c_a, c_b = _pixel_range(xmin, xmax, W)
        r_a, r_b = _pixel_range(ymin, ymax, H)
        fid = face_tex[f]
        for r in range(r_a, r_b + 1):
            qy = r + 0.5
            for c in range(c_a, c_b + 1):
                qx = c + 0.5
                frag = _fragment(p0x, p0y, p1x, p1y, p2x, p2y, den, qx, qy)
                x = frag[0] / sigma
                if x <= -cut:
                    continue
                wnd, dwnd = _window(x, cut, win)
                S[r, c] += kap * _softplus(x) * wnd
                D = kap * _sigmoid(x) * wnd
                c0 = _sclamp(frag[2])[0]
                c1 = _sclamp(frag[3])[0]
                c2 = _sclamp(frag[4])[0]
                cs = c0 + c1 + c2
                c0 /= cs
                c1 /= cs
                c2 /= cs
                iz = c0 * invz[i0] + c1 * invz[i1] + c2 * invz[i2]
                q = (iz - lo) / rng
                w = D * np.exp(q / gamma)
                wsum[r, c] += w
                zsum[r, c] += w / iz
                u = c0 * uv[f, 0, 0] + c1 * uv[f, 1, 0] + c2 * uv[f, 2, 0]
                v = c0 * uv[f, 0, 1] + c1 * uv[f, 1, 1] + c2 * uv[f, 2, 1]
                col, dcol, x0, y0, ax, ay = _tex_sample(tex, fid, u, v)
                for ch in range(3):
                    csum[r, c, ch] += w * col[ch]
    return S, wsum, zsum, csum


@njit(cache=True, inline="always")
def _add_cross_grad(g, gpos, ia, ib, ax, ay, bx, by, qx, qy, iq):
    """Accumulate g * d cross(B - A, Q - A) into vertex gradients (iq < 0: Q fixed)."""
    gpos[ib, 0] += g * (qy - ay)
    gpos[ib, 1] += -g * (qx - ax)
    gpos[ia, 0] += g * (by - qy)
    gpos[ia, 1] += g * (qx - bx)
    if iq >= 0:
        gpos[iq, 0] += -g * (by - ay)
        gpos[iq, 1] += g * (bx - ax)


@njit(cache=True)
def soft_backward(pos, invz, faces, uv, face_tex, tex, H, W, sigma, gamma, cut, win, lo, rng, delta,
                  cull_sign, cull_area, wsum, ratio, col, gS, gratio, gcol):
    n = pos.shape[0]
    gpos = np.zeros((n, 2))
    ginvz = np.zeros(n)
    gtex = np.zeros(tex.shape)
    glo = 0.0
    ghi = 0.0
    margin = cut * sigma
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        p0x = pos[i0, 0]
        p0y = pos[i0, 1]
        p1x = pos[i1, 0]
        p1y = pos[i1, 1]
        p2x = pos[i2, 0]
        p2y = pos[i2, 1]
        den = _cross(p0x, p0y, p1x, p1y, p2x, p2y)
        if abs(den) < EPS_DEN:
            continue
        kap, dkap = _facing(den, cull_sign, cull_area)
        if kap == 0.0:
            continue
        xmin = min(p0x, p1x, p2x) - margin
        xmax = max(p0x, p1x, p2x) + margin
        ymin = min(p0y, p1y, p2y) - margin
        ymax = max(p0y, p1y, p2y) + margin
        c_a, c_b = _pixel_range(xmin, xmax, W)
        r_a, r_b = _pixel_range(ymin, ymax, H)
        fid = face_tex[f]
        idx = (i0, i1, i2)
        g_kap = 0.0
        for r in range(r_a, r_b + 1):
            qy = r + 0.5
            for c in range(c_a, c_b + 1):
                qx = c + 0.5
                d, inside, b0, b1, b2, k, t, dx, dy, dmin, g12, g20, g01 = _fragment(
                    p0x, p0y, p1x, p1y, p2x, p2y, den, qx, qy)
                x = d / sigma
                if x <= -cut:
                    continue
                ws = wsum[r, c]
                if ws <= 0.0:
                    continue
                wnd, dwnd = _window(x, cut, win)
                sg = _sigmoid(x)
                sp = _softplus(x)
                D = kap * sg * wnd
                c0, e0 = _sclamp(b0)
                c1, e1 = _sclamp(b1)
                c2, e2 = _sclamp(b2)
                cs = c0 + c1 + c2
                h0 = c0 / cs
                h1 = c1 / cs
                h2 = c2 / cs
                iz = h0 * invz[i0] + h1 * invz[i1] + h2 * invz[i2]
                z = 1.0 / iz
                q = (iz - lo) / rng
                E = np.exp(q / gamma)
                w = D * E
                u = h0 * uv[f, 0, 0] + h1 * uv[f, 1, 0] + h2 * uv[f, 2, 0]
                v = h0 * uv[f, 0, 1] + h1 * uv[f, 1, 1] + h2 * uv[f, 2, 1]
                ccol, dcol, x0, y0, ax, ay = _tex_sample(tex, fid, u, v)

                # weight and value gradients of the normalized sums
                g_w = gratio[r, c] * (z - ratio[r, c])
                for ch in range(3):
                    g_w += gcol[r, c, ch] * (ccol[ch] - col[r, c, ch])
                g_w /= ws
                g_z = gratio[r, c] * w / ws
                # texture and uv
                g_u = 0.0
                g_v = 0.0
                for ch in range(3):
                    g_c = gcol[r, c, ch] * w / ws
                    if g_c != 0.0:
                        gtex[fid, y0, x0, ch] += g_c * (1.0 - ax) * (1.0 - ay)
                        gtex[fid, y0, x0 + 1, ch] += g_c * ax * (1.0 - ay)
                        gtex[fid, y0 + 1, x0, ch] += g_c * (1.0 - ax) * ay
                        gtex[fid, y0 + 1, x0 + 1, ch] += g_c * ax * ay
                        g_u += g_c * dcol[ch, 0]
                        g_v += g_c * dcol[ch, 1]
                # depth weight
                g_D = g_w * E
                g_q = g_w * w / gamma
                g_iz = g_q / rng - g_z * z * z
                glo += g_q * (q - 1.0) / rng
                ghi += -g_q * q * (1.0 + delta) / rng
                # signed distance
                g_kap += gS[r, c] * sp * wnd + g_D * sg * wnd
                g_x = kap * (gS[r, c] * (sg * wnd + sp * dwnd) + g_D * (sg * (1.0 - sg) * wnd + sg * dwnd))
                g_d = g_x / sigma
                if inside and g_d != 0.0:
                    sgn = 1.0 if den > 0.0 else -1.0
                    _add_line_grad(g_d * g12, gpos, i1, i2, p1x, p1y, p2x, p2y, qx, qy, sgn)
                    _add_line_grad(g_d * g20, gpos, i2, i0, p2x, p2y, p0x, p0y, qx, qy, sgn)
                    _add_line_grad(g_d * g01, gpos, i0, i1, p0x, p0y, p1x, p1y, qx, qy, sgn)
                elif dmin > 0.0 and g_d != 0.0:
                    g_dist = -g_d
                    ux = dx / dmin
                    uy = dy / dmin
                    ia = idx[k]
                    ib = idx[(k + 1) % 3]
                    gpos[ia, 0] -= g_dist * ux * (1.0 - t)
                    gpos[ia, 1] -= g_dist * uy * (1.0 - t)
                    gpos[ib, 0] -= g_dist * ux * t
                    gpos[ib, 1] -= g_dist * uy * t
                # clamped barycentrics
                gh0 = g_iz * invz[i0] + g_u * uv[f, 0, 0] + g_v * uv[f, 0, 1]
                gh1 = g_iz * invz[i1] + g_u * uv[f, 1, 0] + g_v * uv[f, 1, 1]
                gh2 = g_iz * invz[i2] + g_u * uv[f, 2, 0] + g_v * uv[f, 2, 1]
                ginvz[i0] += g_iz * h0
                ginvz[i1] += g_iz * h1
                ginvz[i2] += g_iz * h2
                dot = gh0 * h0 + gh1 * h1 + gh2 * h2
                gb0 = (gh0 - dot) / cs * e0
                gb1 = (gh1 - dot) / cs * e1
                gb2 = (gh2 - dot) / cs * e2
                if gb0 != 0.0 or gb1 != 0.0 or gb2 != 0.0:
                    gden = -(gb0 * b0 + gb1 * b1 + gb2 * b2) / den
                    _add_cross_grad(gb0 / den, gpos, i1, i2, p1x, p1y, p2x, p2y, qx, qy, -1)
                    _add_cross_grad(gb1 / den, gpos, i2, i0, p2x, p2y, p0x, p0y, qx, qy, -1)
                    _add_cross_grad(gb2 / den, gpos, i0, i1, p0x, p0y, p1x, p1y, qx, qy, -1)
                    _add_cross_grad(gden, gpos, i0, i1, p0x, p0y, p1x, p1y, p2x, p2y, i2)
        if dkap != 0.0 and g_kap != 0.0:
            _add_cross_grad(g_kap * dkap, gpos, i0, i1, p0x, p0y, p1x, p1y, p2x, p2y, i2)
    return gpos, ginvz, gtex, glo, ghi


@njit(cache=True)
def hard_raster(pos, invz, faces, uv, face_tex, tex, H, W):
    """Z-buffered point-in-triangle rasterization at pixel centers.

    Returns (coverage mask, depth, rgb, face index); ties keep the earlier face.
    """
    zbuf = np.zeros((H, W))  # stores inverse depth; 0 means empty
    fbuf = -np.ones((H, W), dtype=np.int64)
    depth = np.zeros((H, W))
    rgb = np.zeros((H, W, 3))
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        p0x = pos[i0, 0]
        p0y = pos[i0, 1]
        p1x = pos[i1, 0]
        p1y = pos[i1, 1]
        p2x = pos[i2, 0]
        p2y = pos[i2, 1]
        den = _cross(p0x, p0y, p1x, p1y, p2x, p2y)
        if abs(den) < EPS_DEN:
            continue
        c_a, c_b = _pixel_range(min(p0x, p1x, p2x), max(p0x, p1x, p2x), W)
        r_a, r_b = _pixel_range(min(p0y, p1y, p2y), max(p0y, p1y, p2y), H)
        for r in range(r_a, r_b + 1):
            qy = r + 0.5
            for c in range(c_a, c_b + 1):
                qx = c + 0.5
                b0 = _cross(p1x, p1y, p2x, p2y, qx, qy) / den
                b1 = _cross(p2x, p2y, p0x, p0y, qx, qy) / den
                b2 = 1.0 - b0 - b1
                if b0 < 0.0 or b1 < 0.0 or b2 < 0.0:
                    continue
                iz = b0 * invz[i0] + b1 * invz[i1] + b2 * invz[i2]
                if iz > zbuf[r, c]:
                    zbuf[r, c] = iz
                    fbuf[r, c] = f
                    depth[r, c] = 1.0 / iz
                    u = b0 * uv[f, 0, 0] + b1 * uv[f, 1, 0] + b2 * uv[f, 2, 0]
                    v = b0 * uv[f, 0, 1] + b1 * uv[f, 1, 1] + b2 * uv[f, 2, 1]
                    col, dcol, x0, y0, ax, ay = _tex_sample(tex, face_tex[f], u, v)
                    for ch in range(3):
                        rgb[r, c, ch] = col[ch]
    return fbuf >= 0, depth, rgb, fbuf

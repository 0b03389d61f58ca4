"""Independent oracles and numeric utilities used across the test suite.

Everything here is deliberately written in the most naive way possible
(plain loops, no shared code with the package) so agreement with the
package is a genuine two-route check.
"""

from __future__ import annotations

import math

import numpy as np


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Relative error with a floor so near-zero gradients compare sanely."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / denom


def cosine_loops(u, v) -> float:
    num = 0.0
    nu = 0.0
    nv = 0.0
    for a, b in zip(u, v):
        num += a * b
        nu += a * a
        nv += b * b
    return num / math.sqrt(nu * nv)


def ms_ssim_loops(img_a, img_b, scales, window_size=11, sigma=1.5,
                  k1=0.01, k2=0.03) -> float:
    """Loop-based MS-SSIM reference: same conventions, no vectorization."""
    weights = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)[:scales]

    def to_luma(img):
        h, w = img.shape[:2]
        out = [[0.0] * w for _ in range(h)]
        for i in range(h):
            for j in range(w):
                r, g, b = img[i][j][0], img[i][j][1], img[i][j][2]
                out[i][j] = 0.299 * r + 0.587 * g + 0.114 * b
        return out

    def window():
        half = (window_size - 1) / 2.0
        raw = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma))
               for i in range(window_size)]
        s = sum(raw)
        return [v / s for v in raw]

    win = window()

    def filt(img):
        h = len(img)
        w = len(img[0])
        oh = h - window_size + 1
        ow = w - window_size + 1
        out = [[0.0] * ow for _ in range(oh)]
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for di in range(window_size):
                    for dj in range(window_size):
                        acc += img[i + di][j + dj] * win[di] * win[dj]
                out[i][j] = acc
        return out

    def mul(a, b):
        return [[x * y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]

    def stats(x, y):
        mu_x = filt(x)
        mu_y = filt(y)
        xx = filt(mul(x, x))
        yy = filt(mul(y, y))
        xy = filt(mul(x, y))
        c1 = k1 * k1
        c2 = k2 * k2
        ssim_total = 0.0
        cs_total = 0.0
        count = 0
        for i in range(len(mu_x)):
            for j in range(len(mu_x[0])):
                mx, my = mu_x[i][j], mu_y[i][j]
                vx = xx[i][j] - mx * mx
                vy = yy[i][j] - my * my
                cov = xy[i][j] - mx * my
                cs = (2 * cov + c2) / (vx + vy + c2)
                lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
                ssim_total += lum * cs
                cs_total += cs
                count += 1
        return ssim_total / count, cs_total / count

    def down(img):
        h = (len(img) // 2) * 2
        w = (len(img[0]) // 2) * 2
        out = [[0.0] * (w // 2) for _ in range(h // 2)]
        for i in range(0, h, 2):
            for j in range(0, w, 2):
                out[i // 2][j // 2] = (img[i][j] + img[i + 1][j]
                                       + img[i][j + 1] + img[i + 1][j + 1]) / 4.0
        return out

    x = to_luma(np.asarray(img_a, dtype=np.float64))
    y = to_luma(np.asarray(img_b, dtype=np.float64))
    result = 1.0
    for s in range(scales):
        mean_ssim, mean_cs = stats(x, y)
        if s < scales - 1:
            result *= max(mean_cs, 0.0) ** weights[s]
            x = down(x)
            y = down(y)
        else:
            result *= max(mean_ssim, 0.0) ** weights[s]
    return result


def flp_forward_loops(params, n_vals, t_vals, s_vals):
    """Straight-line loop reimplementation of the projector forward pass."""
    m = params.d_model
    heads = params.n_heads
    dh = m // heads
    r = params.n_regions
    seg = params.segment_dim

    t_proj = [sum(params.wt[i][j] * t_vals[j] for j in range(len(t_vals)))
              + params.bt[i] for i in range(m)]
    tok = []
    for k in range(r):
        segment = s_vals[k * seg:(k + 1) * seg]
        tok.append([sum(params.ws[i][j] * segment[j] for j in range(seg))
                    + params.bs[i] for i in range(m)])

    if params.attention_mode == "none":
        s_tilde = [sum(tok[k][i] for k in range(r)) / r for i in range(m)]
    else:
        if params.attention_mode == "conditional":
            q_in = t_proj
        else:
            q_in = [sum(tok[k][i] for k in range(r)) / r for i in range(m)]
        o = []
        for h in range(heads):
            q = [sum(params.wq[h][d][j] * q_in[j] for j in range(m))
                 + params.bq[h][d] for d in range(dh)]
            ks = [[sum(params.wk[h][d][j] * tok[k][j] for j in range(m))
                   + params.bk[h][d] for d in range(dh)] for k in range(r)]
            vs = [[sum(params.wv[h][d][j] * tok[k][j] for j in range(m))
                   + params.bv[h][d] for d in range(dh)] for k in range(r)]
            scores = [sum(ks[k][d] * q[d] for d in range(dh)) / math.sqrt(dh)
                      for k in range(r)]
            mx = max(scores)
            exps = [math.exp(sc - mx) for sc in scores]
            z = sum(exps)
            attn = [e / z for e in exps]
            o.extend(sum(attn[k] * vs[k][d] for k in range(r)) for d in range(dh))
        s_tilde = [sum(params.wo[i][j] * o[j] for j in range(m))
                   + params.bo[i] for i in range(m)]

    norm_n = math.sqrt(sum(v * v for v in n_vals))
    z_f = [v / norm_n for v in n_vals] + list(t_proj) + list(s_tilde)
    x = z_f
    for w, b in params.trunk:
        nxt = []
        for i in range(w.shape[0]):
            pre = sum(w[i][j] * x[j] for j in range(len(x))) + b[i]
            nxt.append(pre if pre >= 0 else params.alpha * pre)
        x = nxt
    out = [sum(params.wf[i][j] * x[j] for j in range(len(x))) + params.bf[i]
           for i in range(params.latent_dim)]
    return np.array(out)

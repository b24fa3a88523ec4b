"""Independent scalar reference implementations used as test oracles.

Everything here is written with plain Python loops and ``math`` so that it
shares no code path with the vectorised library. The exception is the
matching oracle, which scores pairs with the library IoU; that IoU is itself
checked against the Monte-Carlo estimate here.
"""
import itertools
import math
from collections import defaultdict

import numpy as np

from v2xfuse.metrics import iou_bev


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def conv(x, w, b, stride=1, padding=0):
    """Sextuple-loop cross-correlation (no kernel flip)."""
    bsz, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, c_out, oh, ow))
    for n in range(bsz):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[o])
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                r, s = i * stride + u - padding, j * stride + v - padding
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += float(x[n, c, r, s]) * float(w[o, c, u, v])
                    out[n, o, i, j] = acc
    return out


def pool(x, oh, ow):
    """Adaptive average pooling with floor/ceil window bounds."""
    bsz, ch, h, w = x.shape
    out = np.zeros((bsz, ch, oh, ow))
    for i in range(oh):
        r0, r1 = (i * h) // oh, -((-(i + 1) * h) // oh)
        for j in range(ow):
            c0, c1 = (j * w) // ow, -((-(j + 1) * w) // ow)
            for n in range(bsz):
                for c in range(ch):
                    acc = 0.0
                    for r in range(r0, r1):
                        for s in range(c0, c1):
                            acc += float(x[n, c, r, s])
                    out[n, c, i, j] = acc / ((r1 - r0) * (c1 - c0))
    return out


def bilinear(x, out_h, out_w):
    """Half-pixel (align_corners=False) bilinear resize, one pixel at a time."""
    _, _, h, w = x.shape
    out = np.zeros(x.shape[:2] + (out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            out[:, :, i, j] = ((1 - ly) * (1 - lx) * x[:, :, y0, x0] + (1 - ly) * lx * x[:, :, y0, x1]
                               + ly * (1 - lx) * x[:, :, y1, x0] + ly * lx * x[:, :, y1, x1])
    return out


def spatial_map(f, conv1, conv2):
    z1 = conv(f, conv1.weight, conv1.bias, 1, 1)
    h1 = np.maximum(z1, 0.0)
    z2 = conv(h1, conv2.weight, conv2.bias, 1, 1)
    out = np.zeros_like(z2)
    for idx in np.ndindex(*z2.shape):
        out[idx] = sigmoid(z2[idx])
    return out


def haf(f_v, f_i, params):
    """Quadruple-loop evaluation of the attention-weighted fusion."""
    c = params.w_channel.shape[1]
    alpha = [sigmoid(float(params.w_channel[0, k, 0, 0])) for k in range(c)]
    a_v = spatial_map(f_v, params.spatial["vehicle"].conv1, params.spatial["vehicle"].conv2)
    a_i = spatial_map(f_i, params.spatial["infra"].conv1, params.spatial["infra"].conv2)
    bsz, _, h, w = f_v.shape
    out = np.zeros(f_v.shape)
    for n in range(bsz):
        for k in range(c):
            for i in range(h):
                for j in range(w):
                    out[n, k, i, j] = (float(f_v[n, k, i, j]) * alpha[k] * a_v[n, 0, i, j]
                                       + float(f_i[n, k, i, j]) * (1 - alpha[k]) * a_i[n, 0, i, j])
    return out


def asr(f_v, f_i, s_v, s_i, params):
    """Pool each node by its divisor, meet on the coarser grid, fuse, upsample."""
    _, _, h, w = f_v.shape
    common, fine = max(s_v, s_i), min(s_v, s_i)
    pv = pool(pool(f_v, h // s_v, w // s_v), h // common, w // common)
    pi = pool(pool(f_i, h // s_i, w // s_i), h // common, w // common)
    return bilinear(haf(pv, pi, params), h // fine, w // fine)


def voxelize(points_world, intensities, grid):
    """Dictionary grouping of points by pillar, then per-group means."""
    groups = defaultdict(list)
    for p, inten in zip(points_world, intensities):
        col = math.floor((p[0] - grid.x_range[0]) / grid.cell_size)
        row = math.floor((p[1] - grid.y_range[0]) / grid.cell_size)
        if 0 <= row < grid.height and 0 <= col < grid.width:
            groups[(row, col)].append((p, inten))
    feats = {}
    for (row, col), members in groups.items():
        cx = grid.x_range[0] + (col + 0.5) * grid.cell_size
        cy = grid.y_range[0] + (row + 0.5) * grid.cell_size
        n = len(members)
        feats[(row, col)] = [
            sum(p[0] - cx for p, _ in members) / n,
            sum(p[1] - cy for p, _ in members) / n,
            sum(p[2] for p, _ in members) / n,
            sum(i for _, i in members) / n,
            math.log(1 + n),
        ]
    return feats


def lift(features, probs, K, cam_pose, bins, grid):
    """Per-pixel, per-bin scatter of feature * probability into BEV cells.

    ``features`` is (C, h, w) and ``probs`` is (D, h, w).  Returns a dict
    mapping (row, col) to a length-C list of summed mass.
    """
    c_img, h, w = features.shape
    cells = defaultdict(lambda: [0.0] * c_img)
    rot, t = cam_pose.rotation, cam_pose.translation
    for v in range(h):
        for u in range(w):
            xc = (u + 0.5 - K.cx) / K.fx
            yc = (v + 0.5 - K.cy) / K.fy
            for k, d in enumerate(bins.centers):
                pc = (xc * d, yc * d, d)
                px = t[0] + sum(rot[0][m] * pc[m] for m in range(3))
                py = t[1] + sum(rot[1][m] * pc[m] for m in range(3))
                col = math.floor((px - grid.x_range[0]) / grid.cell_size)
                row = math.floor((py - grid.y_range[0]) / grid.cell_size)
                if 0 <= row < grid.height and 0 <= col < grid.width:
                    acc = cells[(row, col)]
                    for ch in range(c_img):
                        acc[ch] += float(features[ch, v, u]) * float(probs[k, v, u])
    return dict(cells)


# detection metrics

def _inside(pts, b):
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    dx, dy = pts[:, 0] - b.center[0], pts[:, 1] - b.center[1]
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    ok = (np.abs(lx) <= b.size[0] / 2) & (np.abs(ly) <= b.size[1] / 2)
    if pts.shape[1] == 3:
        ok &= np.abs(pts[:, 2] - b.center[2]) <= b.size[2] / 2
    return ok


def monte_carlo_iou(a, b, rng, n=100_000, dims=2):
    ra = [0.5 * math.hypot(a.size[0], a.size[1]), 0.5 * math.hypot(b.size[0], b.size[1])]
    lo = [min(a.center[i] - ra[0], b.center[i] - ra[1]) for i in range(2)]
    hi = [max(a.center[i] + ra[0], b.center[i] + ra[1]) for i in range(2)]
    if dims == 3:
        lo.append(min(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2))
        hi.append(max(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2))
    pts = rng.uniform(lo, hi, (n, dims))
    ia, ib = _inside(pts, a), _inside(pts, b)
    union = np.sum(ia | ib)
    return float(np.sum(ia & ib) / union) if union else 0.0


def aa_iou(a, b):
    """Closed-form IoU for yaw-0 boxes."""
    ix = max(0.0, min(a.center[0] + a.size[0] / 2, b.center[0] + b.size[0] / 2)
             - max(a.center[0] - a.size[0] / 2, b.center[0] - b.size[0] / 2))
    iy = max(0.0, min(a.center[1] + a.size[1] / 2, b.center[1] + b.size[1] / 2)
             - max(a.center[1] - a.size[1] / 2, b.center[1] - b.size[1] / 2))
    inter = ix * iy
    return inter / (a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter)


def greedy_oracle(preds, gts, thr):
    """Best assignment under score priority: lexicographically maximal IoU sequence."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    options = []
    for pi in order:
        opts = [None] + [gi for gi, g in enumerate(gts)
                         if g.class_id == preds[pi].class_id and iou_bev(preds[pi], g) >= thr]
        options.append(opts)
    best, best_key = None, None
    for combo in itertools.product(*options):
        used = [g for g in combo if g is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(-1.0 if g is None else iou_bev(preds[pi], gts[g]) for pi, g in zip(order, combo))
        if best_key is None or key > best_key:
            best, best_key = combo, key
    return {(pi, g) for pi, g in zip(order, best) if g is not None}


def brute_force_ap(preds, gts, thr, n_points=40):
    """Re-match at every distinct score threshold, then 40-point interpolation."""
    n_gt = len(gts)
    if n_gt == 0 or not preds:
        return 0.0
    samples = []
    for t in sorted({p.score for p in preds}, reverse=True):
        kept = sorted([p for p in preds if p.score >= t], key=lambda p: -p.score)
        claimed, tp = set(), 0
        for p in kept:
            cands = [(aa_iou(p, g), gi) for gi, g in enumerate(gts) if gi not in claimed and aa_iou(p, g) >= thr]
            if cands:
                claimed.add(max(cands)[1])
                tp += 1
        samples.append((tp / n_gt, tp / len(kept)))
    total = 0.0
    for k in range(1, n_points + 1):
        r = k / n_points
        total += max([p for rec, p in samples if rec >= r - 1e-12], default=0.0)
    return total / n_points

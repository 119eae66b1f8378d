"""Independent reference implementations used to check the real ones.

Everything here is written for clarity over speed: per-pixel loops,
explicit formulas, dense linear algebra. Nothing imports the modules under
test except for plain data containers.
"""

import numpy as np


def naive_rasterize(mean2d, conic, opacity, color, depth, gidx, rect,
                    height, width, background,
                    alpha_clamp=0.99, alpha_skip=1.0 / 255.0):
    """Per-pixel front-to-back blending with no tiles and no early
    termination. Shares the documented footprint rule (integer rect plus
    the alpha skip threshold) so integer outputs must match exactly."""
    m = len(opacity)
    order = sorted(range(m), key=lambda s: (depth[s], gidx[s]))
    n = int(max(gidx)) + 1 if m else 0
    image = np.zeros((height, width, 3))
    t_final = np.ones((height, width))
    rendered_index = np.full((height, width), -1, dtype=np.int64)
    weights = [[[] for _ in range(width)] for _ in range(height)]

    for py in range(height):
        for px in range(width):
            trans = 1.0
            best_w, best_g = 0.0, -1
            for s in order:
                if not (rect[s][0] <= px < rect[s][1] and rect[s][2] <= py < rect[s][3]):
                    continue
                dx = px + 0.5 - mean2d[s][0]
                dy = py + 0.5 - mean2d[s][1]
                maha = (conic[s][0] * dx * dx + 2.0 * conic[s][1] * dx * dy
                        + conic[s][2] * dy * dy)
                if maha < 0.0:
                    maha = 0.0
                a_raw = opacity[s] * np.exp(-0.5 * maha)
                if a_raw < alpha_skip:
                    continue
                a = min(a_raw, alpha_clamp)
                w = a * trans
                image[py, px] += w * np.asarray(color[s])
                weights[py][px].append((int(gidx[s]), w))
                g = int(gidx[s])
                if w > best_w or (w == best_w and best_g >= 0 and g < best_g):
                    best_w, best_g = w, g
                trans -= w
            image[py, px] += trans * np.asarray(background)
            t_final[py, px] = trans
            rendered_index[py, px] = best_g

    pixel_counts = np.zeros(n, dtype=np.int64)
    for g in rendered_index.reshape(-1):
        if g >= 0:
            pixel_counts[g] += 1
    return image, rendered_index, t_final, pixel_counts, weights


def footprint_rect_scalar(mx, my, radius, width, height):
    """Same pixel-coverage rule as the renderer, written independently."""
    import math

    x0 = min(max(math.ceil(mx - radius - 0.5), 0), width)
    x1 = min(max(math.floor(mx + radius - 0.5) + 1, 0), width)
    y0 = min(max(math.ceil(my - radius - 0.5), 0), height)
    y1 = min(max(math.floor(my + radius - 0.5) + 1, 0), height)
    return (x0, x1, y0, y1)


def project_point_homogeneous(fx, fy, cx, cy, R, t, x):
    """4x4 homogeneous matrix pipeline for pinhole projection."""
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    xh = M @ np.array([x[0], x[1], x[2], 1.0])
    uvw = K @ xh[:3]
    return np.array([uvw[0] / uvw[2], uvw[1] / uvw[2]]), xh[2]


def gaussian_quadform(mean, cov, x):
    """exp(-0.5 d^T cov^-1 d) via an explicit dense inverse."""
    d = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    inv = np.linalg.inv(np.asarray(cov, dtype=float))
    return float(np.exp(-0.5 * d @ inv @ d))


def covariance_product(log_scale, quat):
    """R S S^T R^T with an explicit quaternion-to-matrix conversion."""
    q = np.asarray(quat, dtype=float)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    S = np.diag(np.exp(np.asarray(log_scale, dtype=float)))
    return R @ S @ S @ R.T


def brute_knn_mean_distance(points, k=3):
    """Mean distance to the k nearest other points, O(n^2)."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    out = np.zeros(n)
    for i in range(n):
        d = np.linalg.norm(points - points[i], axis=1)
        d = np.sort(d)[1:k + 1]
        out[i] = d.mean()
    return out


def ssim_reference(img, gt, radius=5, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Windowed SSIM map from explicitly padded arrays and shifted sums.

    Builds the Gaussian-window moments by summing shifted copies of the
    symmetric-padded images, then applies the SSIM formula pixelwise and
    averages over channels.
    """
    img = np.asarray(img, dtype=float)
    gt = np.asarray(gt, dtype=float)
    h, w = img.shape[:2]
    win = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    win = win / win.sum()
    w2d = np.outer(win, win)

    def window_mean(x):
        p = np.pad(x, radius, mode="symmetric")
        out = np.zeros((h, w))
        for dy in range(2 * radius + 1):
            for dx in range(2 * radius + 1):
                out += w2d[dy, dx] * p[dy:dy + h, dx:dx + w]
        return out

    total = np.zeros((h, w))
    for ch in range(3):
        x = img[:, :, ch]
        y = gt[:, :, ch]
        mx = window_mean(x)
        my = window_mean(y)
        sx = window_mean(x * x) - mx * mx
        sy = window_mean(y * y) - my * my
        sxy = window_mean(x * y) - mx * my
        total += ((2 * mx * my + c1) * (2 * sxy + c2)) / \
                 ((mx * mx + my * my + c1) * (sx + sy + c2))
    return total / 3.0


def psnr_reference(img, gt):
    img = np.asarray(img, dtype=float)
    gt = np.asarray(gt, dtype=float)
    se = 0.0
    n = 0
    for v, g in zip(img.reshape(-1), gt.reshape(-1)):
        se += (v - g) ** 2
        n += 1
    mse = se / n
    if mse == 0.0:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def select_og_loop(grad_sum, view_count, tau):
    n = len(grad_sum)
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        if view_count[i] > 0 and grad_sum[i] / view_count[i] >= tau:
            mask[i] = True
    return mask


def select_pghgs_loop(topk, view_count, k, lam, tau):
    n = len(view_count)
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        if view_count[i] >= k and topk[i][k - 1] >= lam * tau:
            mask[i] = True
    return mask


def select_rehgs_loop(hit_views):
    return np.array([len(set(v)) >= 2 for v in hit_views], dtype=bool)


def select_effi_loop(topk, view_count, grad_sum, k, tau):
    """Top-Q by k-th largest gradient among k-times-seen Gaussians, where
    Q is og's selection count; ties favor the smaller index."""
    n = len(view_count)
    og = select_og_loop(grad_sum, view_count, tau)
    budget = int(og.sum())
    eligible = [i for i in range(n) if view_count[i] >= k]
    eligible.sort(key=lambda i: (-topk[i][k - 1], i))
    mask = np.zeros(n, dtype=bool)
    for i in eligible[:budget]:
        mask[i] = True
    return mask

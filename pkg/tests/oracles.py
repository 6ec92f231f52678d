"""Independent reference implementations used to check the library.

Everything here is written directly from the math, in plain numpy / python
loops, sharing no code with the package: a dense per-pixel compositor, a
scalar tone-mapper, a finite-difference harness, and a windowed SSIM.
"""
import math

import numpy as np


def composite_dense(means, conics, depths, colors, opacities, background,
                    width, height, alpha_clamp=0.99, t_floor=1e-4):
    """Full-sort per-pixel front-to-back compositing over every splat.

    No tiles, no binning: for each pixel walk all splats in (depth, index)
    order, clamp alpha, stop when transmittance would drop below t_floor.
    Returns (color, depth, alpha) float64 images.
    """
    means = np.asarray(means, dtype=np.float64)
    conics = np.asarray(conics, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    order = np.lexsort((np.arange(len(depths)), depths))
    out_c = np.zeros((height, width, 3))
    out_d = np.zeros((height, width))
    out_a = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            trans = 1.0
            acc = np.zeros(3)
            acc_d = 0.0
            for i in order:
                dx = means[i, 0] - px
                dy = means[i, 1] - py
                q = (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy
                     + conics[i, 2] * dy * dy)
                alpha = min(alpha_clamp, opacities[i] * math.exp(-0.5 * q))
                if trans * (1.0 - alpha) < t_floor:
                    break
                acc = acc + alpha * trans * colors[i]
                acc_d += alpha * trans * depths[i]
                trans = trans * (1.0 - alpha)
            out_c[py, px] = acc + trans * background
            out_d[py, px] = acc_d
            out_a[py, px] = 1.0 - trans
    return out_c, out_d, out_a


def project_splat_dense(center, opacity, quat, scale, sh_dc, camera_vec,
                        width, height, lowpass=0.3):
    """Scalar reference of the projection chain for one degree-0 gaussian.

    camera_vec is [focal, axis-angle(3), t(3), principal(2)]. Returns
    (mean2d, conic, depth, linear_color) or None when behind the camera.
    """
    focal = camera_vec[0]
    rot = _rodrigues(camera_vec[1:4])
    t = np.asarray(camera_vec[4:7], dtype=np.float64)
    principal = camera_vec[7:9]
    pc = rot @ np.asarray(center, dtype=np.float64) + t
    if pc[2] <= 0:
        return None
    mean2d = np.array([
        focal * pc[0] / pc[2] + 0.5 * width + principal[0],
        focal * pc[1] / pc[2] + 0.5 * height + principal[1],
    ])
    w, x, y, z = np.asarray(quat, dtype=np.float64) / np.linalg.norm(quat)
    rq = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    cov3 = rq @ np.diag(np.asarray(scale, dtype=np.float64) ** 2) @ rq.T
    cov_cam = rot @ cov3 @ rot.T
    jac = np.array([
        [focal / pc[2], 0.0, -focal * pc[0] / pc[2] ** 2],
        [0.0, focal / pc[2], -focal * pc[1] / pc[2] ** 2],
    ])
    cov2 = jac @ cov_cam @ jac.T + lowpass * np.eye(2)
    det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] ** 2
    conic = np.array([cov2[1, 1], -cov2[0, 1], cov2[0, 0]]) / det
    color = np.exp(0.28209479177387814 * np.asarray(sh_dc, dtype=np.float64))
    return mean2d, conic, pc[2], color


def _rodrigues(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0.0]])
        return np.eye(3) + k
    a = w / theta
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


def tonemap_scalar(hdr, w1, b1, w2, b2, ell, anchor, eps=1e-8):
    """Per-pixel python-loop evaluation of the log-space two-layer mapper."""
    hdr = np.asarray(hdr, dtype=np.float64)
    h, w, _ = hdr.shape
    hidden = len(b1)
    out = np.zeros_like(hdr)
    shift = (ell - anchor) * math.log(2.0)
    for i in range(h):
        for j in range(w):
            x = [math.log(max(hdr[i, j, c], eps)) + shift for c in range(3)]
            hid = []
            for u in range(hidden):
                pre = b1[u]
                for c in range(3):
                    pre += w1[u, c] * x[c]
                hid.append(max(pre, 0.0))
            for c in range(3):
                pre = b2[c]
                for u in range(hidden):
                    pre += w2[c, u] * hid[u]
                out[i, j, c] = 1.0 / (1.0 + math.exp(-pre))
    return out


def central_difference(f, x, h=1e-4):
    """Dense central-difference gradient of scalar f at 1D point x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_check(f, tensors, analytic, h=1e-4, rel_tol=1e-3, abs_floor=1e-8,
             max_coords=24, rng=None):
    """Probe random coordinates of each tensor with central differences.

    f() recomputes the scalar loss from the (mutable numpy) tensors;
    analytic is a list of gradient arrays aligned with `tensors`. Checks
    |fd - an| <= rel_tol * max(|fd|, |an|) + abs_floor on up to max_coords
    coordinates per tensor. Returns the worst relative error observed.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for arr, grad in zip(tensors, analytic):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            fp = f()
            flat[c] = keep - h
            fm = f()
            flat[c] = keep
            fd = (fp - fm) / (2.0 * h)
            an = gflat[c]
            err = abs(fd - an)
            scale = max(abs(fd), abs(an))
            assert err <= rel_tol * scale + abs_floor, \
                f"fd {fd:.8g} vs analytic {an:.8g} at coord {c} (err {err:.3g})"
            if scale > abs_floor:
                worst = max(worst, err / scale)
    return worst


def ssim_windowed(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Direct windowed SSIM with a zero-padded gaussian window.

    Statistics at each pixel come from an explicit loop over the window; the
    window is normalized to sum 1 and samples outside the image count as 0,
    matching conv2d with zero padding.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    half = window // 2
    g = np.exp(-((np.arange(window) - half) ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    kernel = kernel / kernel.sum()
    h, w, ch = a.shape
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    total = 0.0
    for c in range(ch):
        for i in range(h):
            for j in range(w):
                mu_a = mu_b = s_aa = s_bb = s_ab = 0.0
                for u in range(window):
                    for v in range(window):
                        y = i + u - half
                        x = j + v - half
                        if 0 <= y < h and 0 <= x < w:
                            va = a[y, x, c]
                            vb = b[y, x, c]
                        else:
                            va = vb = 0.0
                        k = kernel[u, v]
                        mu_a += k * va
                        mu_b += k * vb
                        s_aa += k * va * va
                        s_bb += k * vb * vb
                        s_ab += k * va * vb
                var_a = s_aa - mu_a * mu_a
                var_b = s_bb - mu_b * mu_b
                cov = s_ab - mu_a * mu_b
                total += (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return total / (h * w * ch)


def top_percent_mask(confidence, percent):
    """Boolean mask of the ceil(percent/100 * n) most confident pixels,
    ties resolved toward the smaller flat index."""
    flat = np.asarray(confidence, dtype=np.float64).reshape(-1)
    k = math.ceil(percent / 100.0 * flat.size)
    # sort by (-confidence, index): stable sort on index is implicit in
    # numpy's stable kind when keys tie
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(np.shape(confidence))

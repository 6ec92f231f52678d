"""Tile-based alpha compositing kernels.

Front-to-back compositing over a per-tile depth-sorted splat list:

    alpha_i = min(clamp, opacity_i * exp(-0.5 d^T Conic d)),
    out    += alpha_i * T_i * value_i,  T_{i+1} = T_i (1 - alpha_i),

stopping once T would fall below the transmittance floor. Depth is
accumulated with the same weights as color and left unnormalized; the
residual transmittance lights the background color.

The backward kernel walks each pixel's composited prefix in reverse,
recovering T_i by division (safe: 1 - alpha >= 1 - clamp) and carrying the
suffix sum S_i = sum_{j>i} w_j A_j + T_final * R where A_j bundles the color
and depth adjoints and R collects the background / alpha-output adjoint of
the final transmittance. dL/dalpha_i = T_i A_i - S_i / (1 - alpha_i), chained
into opacity, conic, and 2D mean. Forward parallelizes over tiles (disjoint
pixel ownership keeps it deterministic); backward stays serial because
gradients accumulate per splat across tiles.
"""
import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def composite_forward(point_list, tile_ranges, n_tiles_x, tile_size, width, height,
                      means, conics, depths, colors, opacities, background,
                      alpha_clamp, t_floor,
                      out_color, out_depth, out_trans, out_count):
    for t in prange(tile_ranges.shape[0]):
        x0 = (t % n_tiles_x) * tile_size
        y0 = (t // n_tiles_x) * tile_size
        start = tile_ranges[t, 0]
        end = tile_ranges[t, 1]
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            for px in range(x0, x1):
                trans = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                count = 0
                for k in range(start, end):
                    i = point_list[k]
                    dx = means[i, 0] - px
                    dy = means[i, 1] - py
                    q = (conics[i, 0] * dx * dx
                         + 2.0 * conics[i, 1] * dx * dy
                         + conics[i, 2] * dy * dy)
                    if q < 0.0:
                        continue
                    alpha = opacities[i] * np.exp(-0.5 * q)
                    if alpha > alpha_clamp:
                        alpha = alpha_clamp
                    next_trans = trans * (1.0 - alpha)
                    if next_trans < t_floor:
                        break
                    w = alpha * trans
                    acc_r += w * colors[i, 0]
                    acc_g += w * colors[i, 1]
                    acc_b += w * colors[i, 2]
                    acc_d += w * depths[i]
                    trans = next_trans
                    count = k - start + 1
                out_color[py, px, 0] = acc_r + trans * background[0]
                out_color[py, px, 1] = acc_g + trans * background[1]
                out_color[py, px, 2] = acc_b + trans * background[2]
                out_depth[py, px] = acc_d
                out_trans[py, px] = trans
                out_count[py, px] = count


@njit(cache=True)
def composite_backward(point_list, tile_ranges, n_tiles_x, tile_size, width, height,
                       means, conics, depths, colors, opacities, background,
                       alpha_clamp, t_floor, out_trans, out_count,
                       grad_color, grad_depth, grad_alpha,
                       d_means, d_conics, d_depths, d_colors, d_opacities):
    for t in range(tile_ranges.shape[0]):
        x0 = (t % n_tiles_x) * tile_size
        y0 = (t // n_tiles_x) * tile_size
        start = tile_ranges[t, 0]
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            for px in range(x0, x1):
                count = out_count[py, px]
                if count == 0:
                    continue
                g0 = grad_color[py, px, 0]
                g1 = grad_color[py, px, 1]
                g2 = grad_color[py, px, 2]
                gd = grad_depth[py, px]
                # adjoint of the final transmittance: background lighting
                # plus the (1 - T) alpha output
                r_term = (g0 * background[0] + g1 * background[1]
                          + g2 * background[2] - grad_alpha[py, px])
                trans = out_trans[py, px]
                suffix = trans * r_term
                for k in range(start + count - 1, start - 1, -1):
                    i = point_list[k]
                    dx = means[i, 0] - px
                    dy = means[i, 1] - py
                    ca = conics[i, 0]
                    cb = conics[i, 1]
                    cc = conics[i, 2]
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q < 0.0:
                        continue
                    gauss = np.exp(-0.5 * q)
                    raw = opacities[i] * gauss
                    alpha = raw if raw <= alpha_clamp else alpha_clamp
                    trans = trans / (1.0 - alpha)
                    w = alpha * trans
                    a_term = (g0 * colors[i, 0] + g1 * colors[i, 1]
                              + g2 * colors[i, 2] + gd * depths[i])
                    d_alpha = trans * a_term - suffix / (1.0 - alpha)
                    if raw < alpha_clamp:
                        d_opacities[i] += gauss * d_alpha
                        dq = -0.5 * raw * d_alpha
                        d_conics[i, 0] += dq * dx * dx
                        d_conics[i, 1] += dq * 2.0 * dx * dy
                        d_conics[i, 2] += dq * dy * dy
                        d_means[i, 0] += dq * (2.0 * ca * dx + 2.0 * cb * dy)
                        d_means[i, 1] += dq * (2.0 * cb * dx + 2.0 * cc * dy)
                    d_colors[i, 0] += w * g0
                    d_colors[i, 1] += w * g1
                    d_colors[i, 2] += w * g2
                    d_depths[i] += w * gd
                    suffix += w * a_term


def warmup(dtype=np.float64):
    """Compile both kernels for a dtype so timed sections stay honest."""
    one = np.ones(1, dtype=dtype)
    means = np.zeros((1, 2), dtype=dtype)
    conics = np.array([[1.0, 0.0, 1.0]], dtype=dtype)
    plist = np.zeros(1, dtype=np.int64)
    ranges = np.array([[0, 1]], dtype=np.int64)
    colors = np.ones((1, 3), dtype=dtype)
    bg = np.zeros(3, dtype=dtype)
    oc = np.zeros((1, 1, 3), dtype=dtype)
    od = np.zeros((1, 1), dtype=dtype)
    ot = np.zeros((1, 1), dtype=dtype)
    on = np.zeros((1, 1), dtype=np.int64)
    composite_forward(plist, ranges, 1, 16, 1, 1, means, conics, one, colors,
                      one, bg, 0.99, 1e-4, oc, od, ot, on)
    composite_backward(plist, ranges, 1, 16, 1, 1, means, conics, one, colors,
                       one, bg, 0.99, 1e-4, ot, on, oc, od, od,
                       means.copy(), conics.copy(), one.copy(), colors.copy(),
                       one.copy())

"""Reverse-mode adjoints of every render stage and a finite-difference checker.

Each ``vjp_*`` function takes the primal inputs of one stage plus a cotangent
on its output and returns cotangents on its inputs. :func:`vjp_render`
chains them for the whole pipeline. Quaternion cotangents are reported in
ambient 4-space; keeping quaternions on the unit sphere is the optimizer's
job.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import splat
from .geom import (
    CameraModel,
    GridSpec,
    PointCloud,
    Pose,
    camera_frame,
    frustum_jacobian,
    quat_matrix_vjp,
    quat_to_matrix,
    reference_sigma_cells,
)
from .render import SIGNAL_EPS, RenderTrace, depth_values, render_trace


# --------------------------------------------------------------------------
# clip, termination, projection, signal normalization
# --------------------------------------------------------------------------


def vjp_clip(density, cotangent) -> np.ndarray:
    """Pass-through where ``0 < density < 1``; zero when saturated or on the boundary."""
    density = np.asarray(density)
    return np.where((density > 0.0) & (density < 1.0), cotangent, 0.0)


def vjp_ray_termination(occ, cotangent) -> np.ndarray:
    """Adjoint of :func:`diffsplat.render.ray_termination`.

    Uses the suffix recurrence ``A_{k-1} = g_k o_k + (1 - o_k) A_k`` with
    ``A_last = g_background``, so ``d o_k = T_k (g_k - A_k)`` where ``T_k`` is
    the exclusive transmittance. No division by ``1 - o`` is needed.
    """
    occ = np.moveaxis(np.asarray(occ, dtype=np.float64), -1, 0).copy()
    g = np.moveaxis(np.asarray(cotangent, dtype=np.float64), -1, 0)
    d3 = len(occ)
    free = 1.0 - occ
    grad = np.empty_like(occ)
    acc = g[d3].copy()
    for k in range(d3 - 1, -1, -1):
        grad[k] = g[k] - acc
        acc *= free[k]
        acc += g[k] * occ[k]
    # multiply by the exclusive transmittance in a forward sweep
    transmit = np.ones(occ.shape[1:])
    for k in range(d3):
        grad[k] *= transmit
        transmit *= free[k]
    return np.moveaxis(grad, 0, -1)


def vjp_project(term, modality: str, cotangent, signal=None, background=None):
    """Returns ``(d_term, d_signal)``; ``d_signal`` is None except for color."""
    g = np.asarray(cotangent, dtype=np.float64)
    d3 = term.shape[-1] - 1
    if modality == "silhouette":
        d_term = np.zeros(term.shape)
        d_term[..., :-1] = g[..., None]
        return d_term, None
    if modality == "depth":
        return g[..., None] * depth_values(d3), None
    d_term = np.empty(term.shape)
    d_term[..., :-1] = np.einsum("abkc,abc->abk", signal, g)
    d_term[..., -1] = g @ background
    d_signal = term[..., :-1, None] * g[:, :, None, :]
    return d_term, d_signal


def vjp_normalize_signal(numer, denom, d_signal):
    """Adjoint of the ε-guarded ratio; returns ``(d_numer, d_denom)``."""
    gs = np.moveaxis(d_signal, -1, 0)
    ok = denom >= SIGNAL_EPS
    safe = np.where(ok, denom, 1.0)
    d_numer = np.where(ok, gs / safe, 0.0)
    d_denom = np.where(ok, -np.sum(gs * numer, axis=0) / safe**2, 0.0)
    return d_numer, d_denom


# --------------------------------------------------------------------------
# splatting
# --------------------------------------------------------------------------


def _vjp_separable(u, sig, w, cot, grid: GridSpec):
    d1, d2, d3 = grid.dims
    n, c = w.shape
    d_u = np.zeros((n, 3))
    d_sig = np.zeros((n, 3))
    d_w = np.zeros((n, c))
    chunk = max(1, splat._CHUNK_ELEMS // (d1 * d2))
    flat = cot.reshape(c, d1 * d2, d3)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        gs = splat.axis_gaussians(u[sl], sig[sl], grid)
        der, dsg = [], []
        for axis, (g, d) in enumerate(zip(gs, grid.dims)):
            diff = np.arange(d)[None, :] - u[sl, axis : axis + 1]
            s = sig[sl, axis : axis + 1]
            der.append(g * diff / s**2)
            dsg.append(g * diff**2 / s**3)
        gx, gy, gz = gs
        m = len(gx)
        for ch in range(c):
            z_g = (flat[ch] @ gz.T).reshape(d1, d2, m)
            z_d = (flat[ch] @ der[2].T).reshape(d1, d2, m)
            z_s = (flat[ch] @ dsg[2].T).reshape(d1, d2, m)
            y_gg = np.einsum("abn,nb->na", z_g, gy)
            y_dg = np.einsum("abn,nb->na", z_g, der[1])
            y_sg = np.einsum("abn,nb->na", z_g, dsg[1])
            y_gd = np.einsum("abn,nb->na", z_d, gy)
            y_gs = np.einsum("abn,nb->na", z_s, gy)
            wc = w[sl, ch]
            d_w[sl, ch] = np.sum(gx * y_gg, axis=1)
            d_u[sl, 0] += wc * np.sum(der[0] * y_gg, axis=1)
            d_u[sl, 1] += wc * np.sum(gx * y_dg, axis=1)
            d_u[sl, 2] += wc * np.sum(gx * y_gd, axis=1)
            d_sig[sl, 0] += wc * np.sum(dsg[0] * y_gg, axis=1)
            d_sig[sl, 1] += wc * np.sum(gx * y_sg, axis=1)
            d_sig[sl, 2] += wc * np.sum(gx * y_gs, axis=1)
    return d_u, d_sig, d_w


def _vjp_full(u, cov, w, cot, grid: GridSpec):
    n, c = w.shape
    prec = np.linalg.inv(cov)
    d_u = np.zeros((n, 3))
    d_cov = np.zeros((n, 3, 3))
    d_w = np.zeros((n, c))
    chunk = max(1, splat._CHUNK_ELEMS // grid.size)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        dx, dy, dz = splat.grid_offsets(u[sl], grid)
        g = np.exp(-0.5 * splat.quadratic_form(prec[sl], dx, dy, dz))
        # per-point cotangent contracted over channels
        d_w[sl] = np.einsum("cabk,nabk->nc", cot, g)
        f = g * np.tensordot(w[sl], cot, axes=(1, 0))
        fxy = f.sum(axis=3)
        fxz = f.sum(axis=2)
        fyz = f.sum(axis=1)
        fx = fxy.sum(axis=2)
        fy = fxy.sum(axis=1)
        fz = fxz.sum(axis=1)
        ex, ey, ez = dx[:, :, 0, 0], dy[:, 0, :, 0], dz[:, 0, 0, :]
        m1 = np.stack([(fx * ex).sum(1), (fy * ey).sum(1), (fz * ez).sum(1)], axis=1)
        m2 = np.empty((len(ex), 3, 3))
        m2[:, 0, 0] = (fx * ex**2).sum(1)
        m2[:, 1, 1] = (fy * ey**2).sum(1)
        m2[:, 2, 2] = (fz * ez**2).sum(1)
        m2[:, 0, 1] = m2[:, 1, 0] = np.einsum("nab,na,nb->n", fxy, ex, ey)
        m2[:, 0, 2] = m2[:, 2, 0] = np.einsum("nak,na,nk->n", fxz, ex, ez)
        m2[:, 1, 2] = m2[:, 2, 1] = np.einsum("nbk,nb,nk->n", fyz, ey, ez)
        p = prec[sl]
        d_u[sl] = np.einsum("nij,nj->ni", p, m1)
        d_cov[sl] = 0.5 * p @ m2 @ p
    return d_u, d_cov, d_w


def vjp_accumulate_basic(u, grid_sizes, weights, grid: GridSpec, cotangent):
    """Adjoint of :func:`diffsplat.splat.accumulate_basic` (no clip).

    Returns ``(d_u, d_sizes, d_weights)`` with ``d_sizes`` shaped like
    ``grid_sizes``.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    sizes = np.asarray(grid_sizes, dtype=np.float64)
    w, single = splat._as_channels(weights)
    cot = np.asarray(cotangent, dtype=np.float64)
    if single:
        cot = cot[None]
    if len(u) == 0:
        return np.zeros((0, 3)), np.zeros(sizes.shape), np.zeros(w.shape)
    if sizes.ndim == 2:
        d_u, d_s, d_w = _vjp_separable(u, sizes, w, cot, grid)
    else:
        d_u, d_s, d_w = _vjp_full(u, sizes, w, cot, grid)
    return d_u, d_s, (d_w[:, 0] if single else d_w)


def vjp_splat_basic(u, grid_sizes, scales, grid: GridSpec, cotangent):
    """Adjoint of :func:`diffsplat.splat.splat_basic` including the clip.

    Returns ``(d_u, d_sizes, d_scales)``.
    """
    density = splat.accumulate_basic(u, grid_sizes, scales, grid)
    return vjp_accumulate_basic(u, grid_sizes, scales, grid, vjp_clip(density, cotangent))


def vjp_accumulate_fast(u, weights, sigma_cells, grid: GridSpec, cotangent, truncation=splat.DEFAULT_TRUNCATION,
                        want_sigma: bool = True):
    """Adjoint of :func:`diffsplat.splat.accumulate_fast`.

    Returns ``(d_u, d_weights, d_sigma_cells)``; the sigma cotangent is per
    axis (three values) and is None when ``want_sigma`` is False. Position
    derivatives are one-sided on cell planes where trilinear weights kink.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    w, single = splat._as_channels(weights)
    cot = np.asarray(cotangent, dtype=np.float64)
    if single:
        cot = cot[None]
    kernels = splat.axis_kernels(sigma_cells, truncation)
    back = splat.blur(cot, kernels)
    idx, wts, inside, _, frac = splat.trilinear_corners(u, grid)
    gathered = back.reshape(len(back), -1)[:, idx] * inside  # (C, N, 8)
    d_w = np.einsum("cnk,nk->nc", gathered, wts)
    d_u = np.zeros((len(u), 3))
    for corner in range(8):
        bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1]
        factors = [frac[:, a] if b else 1.0 - frac[:, a] for a, b in enumerate(bits)]
        contrib = np.einsum("cn,nc->n", gathered[:, :, corner], w)
        for axis in range(3):
            others = np.prod([factors[a] for a in range(3) if a != axis], axis=0)
            sign = 1.0 if bits[axis] else -1.0
            d_u[:, axis] += sign * others * contrib
    d_sigma = None
    if want_sigma:
        scattered = splat.trilinear_scatter(u, w, grid)
        d_sigma = np.zeros(3)
        for axis in range(3):
            vol = scattered
            for a, k in enumerate(kernels):
                taps = k.sigma_derivative() if a == axis else k.taps
                vol = splat.correlate_axis(vol, taps, k.center, a)
            d_sigma[axis] = np.sum(vol * cot)
    return d_u, (d_w[:, 0] if single else d_w), d_sigma


# --------------------------------------------------------------------------
# camera transform and size parametrization
# --------------------------------------------------------------------------


def vjp_camera_transform(positions, sizes, pose: Pose, cam: CameraModel, grid: GridSpec, d_u, d_grid_sizes=None):
    """Adjoint of :func:`diffsplat.geom.camera_transform`.

    Returns ``(d_positions, d_sizes, d_rotation, d_translation)``; ``d_sizes``
    matches the world ``sizes`` layout (``(N,)`` sigmas or ``(N, 3, 3)``).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    sizes = np.asarray(sizes, dtype=np.float64)
    rot = quat_to_matrix(pose.rotation)
    scale = np.asarray(grid.dims, dtype=np.float64)
    x_cam = camera_frame(positions, pose)
    jac = frustum_jacobian(x_cam, cam)
    d_xcam = np.einsum("nij,ni->nj", jac, np.asarray(d_u) * scale)
    d_rot = np.zeros((3, 3))
    d_sizes = np.zeros(sizes.shape)

    if d_grid_sizes is not None:
        g = np.asarray(d_grid_sizes, dtype=np.float64)
        if sizes.ndim == 1 and not cam.perspective:
            d_sizes = g @ (scale / cam.extent)
        else:
            cov = (sizes**2)[:, None, None] * np.eye(3) if sizes.ndim == 1 else sizes
            g = 0.5 * (g + np.swapaxes(g, -1, -2))
            m = scale[None, :, None] * jac
            a = m @ rot
            d_a = 2.0 * g @ a @ cov
            d_cov = np.swapaxes(a, -1, -2) @ g @ a
            d_sizes = 2.0 * sizes * np.trace(d_cov, axis1=1, axis2=2) if sizes.ndim == 1 else d_cov
            d_rot += np.einsum("nki,nkj->ij", m, d_a)
            if cam.perspective:
                h = scale[None, :, None] * (d_a @ rot.T)
                af = cam.focal / cam.extent
                x, y = x_cam[:, 0], x_cam[:, 1]
                z = np.where(x_cam[:, 2] > 0, x_cam[:, 2], 1.0)
                d_xcam[:, 0] += -af / z**2 * h[:, 0, 2]
                d_xcam[:, 1] += -af / z**2 * h[:, 1, 2]
                d_xcam[:, 2] += (
                    -af / z**2 * (h[:, 0, 0] + h[:, 1, 1])
                    + 2 * af * x / z**3 * h[:, 0, 2]
                    + 2 * af * y / z**3 * h[:, 1, 2]
                )

    d_positions = d_xcam @ rot
    d_rot += d_xcam.T @ positions
    d_rotation = quat_matrix_vjp(pose.rotation, d_rot)
    return d_positions, d_sizes, d_rotation, d_xcam.sum(axis=0)


def vjp_covariance_params(diag, orientation, d_cov):
    """Adjoint of :func:`diffsplat.geom.covariance_from_params`; returns ``(d_diag, d_orientation)``."""
    diag = np.asarray(diag, dtype=np.float64)
    rot = quat_to_matrix(orientation)
    g = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    rgr = np.swapaxes(rot, -1, -2) @ g @ rot
    d_diag = 2.0 * diag * np.diagonal(rgr, axis1=-2, axis2=-1)
    d_rot = 2.0 * g @ rot * (diag**2)[..., None, :]
    return d_diag, quat_matrix_vjp(orientation, d_rot)


# --------------------------------------------------------------------------
# full pipeline
# --------------------------------------------------------------------------


@dataclass
class RenderGradients:
    d_positions: np.ndarray
    d_scales: np.ndarray
    d_rotation: np.ndarray
    d_translation: np.ndarray
    d_sigmas: np.ndarray | None = None
    d_shared_sigma: float | None = None
    d_cov_diag: np.ndarray | None = None
    d_cov_rotation: np.ndarray | None = None
    d_colors: np.ndarray | None = None


def vjp_trace(trace: RenderTrace, cloud: PointCloud, pose: Pose, cam: CameraModel, grid: GridSpec, cotangent,
              want_sigma: bool = True) -> RenderGradients:
    """Adjoint of a recorded forward pass."""
    n_all = len(cloud)
    d_term, d_signal = vjp_project(trace.term, trace.modality, cotangent, trace.signal, trace.background)
    d_occ = vjp_ray_termination(trace.occ, d_term)
    d_density = vjp_clip(trace.density, d_occ)
    channels = [d_density]
    if trace.modality == "color":
        d_numer, d_denom = vjp_normalize_signal(trace.numer, trace.density, d_signal)
        channels[0] = d_density + d_denom
        channels.extend(d_numer)
    cot = np.stack(channels)

    sub = cloud.subset(trace.kept)
    grads = RenderGradients(np.zeros((n_all, 3)), np.zeros(n_all), np.zeros(4), np.zeros(3))
    if len(trace.kept) == 0:
        if cloud.sigmas is not None:
            grads.d_sigmas = np.zeros(n_all)
        return grads

    d_grid_sizes = None
    if trace.path == "fast":
        d_u, d_w, d_sig_cells = vjp_accumulate_fast(
            trace.u, trace.weights, trace.sigma_cells, grid, cot, trace.truncation, want_sigma
        )
        if d_sig_cells is not None:
            per_unit = reference_sigma_cells(1.0, cam, grid)
            grads.d_shared_sigma = float(d_sig_cells @ per_unit)
    else:
        d_u, d_grid_sizes, d_w = vjp_accumulate_basic(trace.u, trace.grid_sizes, trace.weights, grid, cot)

    d_pos, d_sizes, d_q, d_t = vjp_camera_transform(
        sub.positions, sub.world_sizes(), pose, cam, grid, d_u, d_grid_sizes
    )
    keep = trace.kept
    scales = cloud.scales[keep]
    grads.d_positions[keep] = d_pos
    grads.d_rotation = d_q
    grads.d_translation = d_t
    d_scale = d_w[:, 0].copy()
    if trace.modality == "color":
        colors = cloud.colors[keep]
        d_scale += np.sum(d_w[:, 1:] * colors, axis=1)
        grads.d_colors = np.zeros_like(cloud.colors)
        grads.d_colors[keep] = d_w[:, 1:] * scales[:, None]
    grads.d_scales[keep] = d_scale
    if trace.path == "basic":
        if cloud.full_covariance:
            d_diag, d_orient = vjp_covariance_params(sub.cov_diag, sub.cov_rotation, d_sizes)
            grads.d_cov_diag = np.zeros((n_all, 3))
            grads.d_cov_rotation = np.zeros((n_all, 4))
            grads.d_cov_diag[keep] = d_diag
            grads.d_cov_rotation[keep] = d_orient
        else:
            grads.d_sigmas = np.zeros(n_all)
            grads.d_sigmas[keep] = d_sizes
    return grads


def vjp_render(cloud: PointCloud, pose: Pose, cam: CameraModel, grid: GridSpec, modality: str, cotangent,
               path: str = "basic", dropout_mask=None, background=None,
               truncation: float = splat.DEFAULT_TRUNCATION) -> RenderGradients:
    """Gradients of ``<cotangent, render(...)>`` with respect to every input."""
    trace = render_trace(cloud, pose, cam, grid, modality, path, dropout_mask, background, truncation)
    return vjp_trace(trace, cloud, pose, cam, grid, cotangent)


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


@dataclass
class FDReport:
    max_rel_err: float
    worst_coordinate: int
    numeric: np.ndarray
    analytic: np.ndarray
    tolerance: float | None = None

    @property
    def passed(self) -> bool:
        return self.tolerance is None or bool(self.max_rel_err <= self.tolerance)


def central_differences(fun: Callable[[np.ndarray], float], x, h) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    out = np.empty(x.shape)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        out[i] = (fun(xp) - fun(xm)) / (xp[i] - xm[i])
    return out


def finite_diff_check(fun: Callable[[np.ndarray], float], analytic, x, h=1e-4, tolerance: float | None = None) -> FDReport:
    """Compare an analytic gradient of scalar ``fun`` against central differences.

    The error of each coordinate is measured relative to the largest gradient
    magnitude of the group (``max(|numeric|, |analytic|)``), so that
    coordinates with vanishing derivatives do not divide by zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = central_differences(fun, x, h)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0), 1e-300)
    err = np.abs(numeric - analytic).ravel() / scale
    worst = int(np.argmax(err)) if err.size else -1
    return FDReport(float(err.max(initial=0.0)), worst, numeric, analytic, tolerance)

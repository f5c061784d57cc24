"""Gaussian projection, front-to-back compositing, and the test-time loss.

The rasterizer works on "fragments": one (Gaussian, pixel) pair for every
pixel inside a Gaussian's truncated 2D footprint. Each pixel keeps its
fragments front to back in a compact list, and compositing walks the list
with a running transmittance. The backward pass walks the same lists in
reverse with a running suffix sum; gradients are exact
for the piecewise-smooth loss (the footprint truncation and the depth sort
are treated as fixed).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numba
from PIL import Image

from .core import CameraView, FrameBundle, Gaussian, GaussianSet, PipelineConfig, covariance, normalize_quats

# Added to every projected covariance, px^2.
PIXEL_FLOOR = 0.3
# Gaussians closer than this to the image plane are culled by the rasterizer.
NEAR_CLIP = 0.1
# Fragment alpha is clamped below 1 so that 1 - G stays invertible.
MAX_ALPHA = 1.0 - 1e-6
# Gaussians whose centers project farther than this multiple of the half image
# size from the principal point are culled; their linearized footprints are
# meaningless that far off-axis.
GUARD_BAND = 1.3


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)


@dataclass
class Gradients:
    mu: np.ndarray
    scale_raw: np.ndarray
    quat: np.ndarray
    opacity_raw: np.ndarray
    color: np.ndarray
    photo: float = 0.0
    depth: float = 0.0

    @classmethod
    def zeros(cls, k: int) -> "Gradients":
        return cls(np.zeros((k, 3)), np.zeros((k, 3)), np.zeros((k, 4)), np.zeros(k), np.zeros((k, 3)))

    def arrays(self):
        return {
            "mu": self.mu,
            "scale_raw": self.scale_raw,
            "quat": self.quat,
            "opacity_raw": self.opacity_raw,
            "color": self.color,
        }

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())


def density(g: Gaussian, x) -> float:
    d = np.asarray(x, dtype=np.float64) - g.mu
    return float(np.exp(-0.5 * d @ np.linalg.solve(covariance(g), d)))


def _jacobian(K: np.ndarray, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point), shape (n, 2, 3)."""
    J = np.broadcast_to(K[:2], (len(z), 2, 3)).copy()
    J[:, :, 2] -= uv
    return J / z[:, None, None]


def project_gaussian(g: Gaussian, view: CameraView):
    """``(mu2d, sigma2d, depth)`` of one Gaussian, or ``None`` behind the camera."""
    cam = view.to_camera(g.mu)[0]
    z = cam[2]
    if not z > 0:
        return None
    K = view.intrinsics
    uv = (K @ cam)[:2] / z
    M = _jacobian(K, uv[None], np.array([z]))[0] @ view.rotation
    cov2 = M @ covariance(g) @ M.T + PIXEL_FLOOR * np.eye(2)
    return uv, 0.5 * (cov2 + cov2.T), float(z)


@dataclass
class _Projection:
    index: np.ndarray  # Gaussians kept, in front-to-back order
    cam: np.ndarray
    uv: np.ndarray
    z: np.ndarray
    J: np.ndarray
    M: np.ndarray
    cov3: np.ndarray
    conic: np.ndarray  # (n, 3): a, b, c of [[a, b], [b, c]]


@dataclass
class _Fragments:
    """Per-pixel fragment lists in front-to-back order (CSR layout)."""

    offsets: np.ndarray  # (npix + 1,) start of each pixel's fragments
    gid: np.ndarray  # position into _Projection arrays
    G: np.ndarray
    T: np.ndarray  # transmittance in front of the fragment


def _project_all(gs: GaussianSet, view: CameraView) -> _Projection:
    W = view.rotation
    cam = gs.mu @ W.T + view.translation
    z = cam[:, 2]
    K = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        uv_all = (cam @ K.T)[:, :2] / z[:, None]
    half = np.array([view.width, view.height]) / 2.0
    off = np.abs(uv_all - K[:2, 2]) <= GUARD_BAND * half
    keep = np.flatnonzero((z > NEAR_CLIP) & off.all(axis=1))
    # canonical front-to-back order, independent of input order
    keys = [gs.color[keep, 2], gs.color[keep, 1], gs.color[keep, 0], gs.mu[keep, 2], gs.mu[keep, 1], gs.mu[keep, 0], z[keep]]
    keep = keep[np.lexsort(keys)]
    cam, z = cam[keep], z[keep]
    uv = uv_all[keep]
    J = _jacobian(K, uv, z)
    M = J @ W
    cov3 = gs.subset(keep).covariances()
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    a = cov2[:, 0, 0] + PIXEL_FLOOR
    b = 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0])
    c = cov2[:, 1, 1] + PIXEL_FLOOR
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    return _Projection(keep, cam, uv, z, J, M, cov3, conic)


def _bbox(proj: _Projection, view: CameraView, trunc: float):
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    # covariance diagonal from the conic: cov = inv(conic)
    det = a * c - b * b
    ru, rv = trunc * np.sqrt(c / det), trunc * np.sqrt(a / det)
    u, v = proj.uv[:, 0], proj.uv[:, 1]
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(u - ru - 0.5), 0, view.width).astype(np.int64)
        x1 = np.clip(np.floor(u + ru - 0.5), -1, view.width - 1).astype(np.int64)
        y0 = np.clip(np.ceil(v - rv - 0.5), 0, view.height).astype(np.int64)
        y1 = np.clip(np.floor(v + rv - 0.5), -1, view.height - 1).astype(np.int64)
    return np.stack([x0, x1, y0, y1], axis=1)


@numba.njit(cache=True)
def _quad(conic, uv, g, col, row):
    dx = col + 0.5 - uv[g, 0]
    dy = row + 0.5 - uv[g, 1]
    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
    return dx, dy, q


@numba.njit(cache=True)
def _forward_kernel(uv, conic, box, opacity, colors, z, width, npix, trunc2, max_alpha):
    n = uv.shape[0]
    counts = np.zeros(npix + 1, dtype=np.int64)
    for g in range(n):
        for row in range(box[g, 2], box[g, 3] + 1):
            for col in range(box[g, 0], box[g, 1] + 1):
                _, _, q = _quad(conic, uv, g, col, row)
                if q <= trunc2:
                    counts[row * width + col + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    gid = np.empty(offsets[-1], dtype=np.int64)
    # Gaussians are visited front to back, so every pixel list comes out sorted
    for g in range(n):
        for row in range(box[g, 2], box[g, 3] + 1):
            for col in range(box[g, 0], box[g, 1] + 1):
                _, _, q = _quad(conic, uv, g, col, row)
                if q <= trunc2:
                    p = row * width + col
                    gid[fill[p]] = g
                    fill[p] += 1
    G = np.empty(len(gid))
    T = np.empty(len(gid))
    A = np.zeros(npix)
    C = np.zeros((npix, 3))
    N = np.zeros(npix)
    for p in range(npix):
        row = p // width
        col = p - row * width
        log_t = 0.0
        for f in range(offsets[p], offsets[p + 1]):
            g = gid[f]
            _, _, q = _quad(conic, uv, g, col, row)
            a = min(opacity[g] * np.exp(-0.5 * q), max_alpha)
            t = np.exp(log_t)
            w = a * t
            G[f] = a
            T[f] = t
            A[p] += w
            for ch in range(3):
                C[p, ch] += w * colors[g, ch]
            N[p] += w * z[g]
            log_t += np.log1p(-a)
    return offsets, gid, G, T, A, C, N


@numba.njit(cache=True)
def _backward_kernel(offsets, gid, G, T, uv, conic, opacity, colors, z, width, gC, gN, gA, max_alpha):
    """Per-Gaussian partials w.r.t. color, depth, alpha, pixel center and conic."""
    n = uv.shape[0]
    d_color = np.zeros((n, 3))
    d_z = np.zeros(n)
    d_alpha = np.zeros(n)
    d_uv = np.zeros((n, 2))
    gQ = np.zeros((n, 3))  # d/d conic entries (a, b, c) with b counted once per off-diagonal
    npix = len(offsets) - 1
    for p in range(npix):
        row = p // width
        col = p - row * width
        suffix = 0.0
        for f in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
            g = gid[f]
            w = G[f] * T[f]
            y = gC[p, 0] * colors[g, 0] + gC[p, 1] * colors[g, 1] + gC[p, 2] * colors[g, 2] + gN[p] * z[g] + gA[p]
            dG = T[f] * y - suffix / (1.0 - G[f])
            suffix += w * y
            for ch in range(3):
                d_color[g, ch] += gC[p, ch] * w
            d_z[g] += gN[p] * w
            dx, dy, q = _quad(conic, uv, g, col, row)
            gauss = np.exp(-0.5 * q)
            if opacity[g] * gauss > max_alpha:
                continue  # clamped: G does not depend on the parameters here
            d_alpha[g] += dG * gauss
            dq = -0.5 * dG * G[f]
            a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
            d_uv[g, 0] -= dq * (2.0 * a * dx + 2.0 * b * dy)
            d_uv[g, 1] -= dq * (2.0 * b * dx + 2.0 * c * dy)
            gQ[g, 0] += dq * dx * dx
            gQ[g, 1] += dq * dx * dy
            gQ[g, 2] += dq * dy * dy
    return d_color, d_z, d_alpha, d_uv, gQ


def _rasterize(gs: GaussianSet, view: CameraView, trunc: float):
    proj = _project_all(gs, view)
    npix = view.width * view.height
    opacity = gs.opacities()[proj.index]
    colors = gs.color[proj.index]
    offsets, gid, G, T, A, C, N = _forward_kernel(
        proj.uv, proj.conic, _bbox(proj, view, trunc), opacity, colors, proj.z,
        view.width, npix, float(trunc * trunc), MAX_ALPHA,
    )
    D = np.zeros(npix)
    np.divide(N, A, out=D, where=A > 0)
    return proj, _Fragments(offsets, gid, G, T), A, C, D


def render_view(gaussians: GaussianSet, view: CameraView, trunc_mahal: float = 3.0) -> RenderOutput:
    h, w = view.height, view.width
    if len(gaussians) == 0:
        return RenderOutput(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)))
    _, _, A, C, D = _rasterize(gaussians, view, trunc_mahal)
    return RenderOutput(C.reshape(h, w, 3), D.reshape(h, w), A.reshape(h, w))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

# dR/dq for q = (w, x, y, z): rows index R entries in row-major order,
# columns the quaternion component; entries are coefficients of
# (w, x, y, z) so that dR_ij/dq_m = sum_n _DR[ij, m, n] q_n.
_DR = np.zeros((9, 4, 4))
for (ij, m, n, coef) in [
    (0, 2, 2, -4), (0, 3, 3, -4),
    (1, 0, 3, -2), (1, 1, 2, 2), (1, 2, 1, 2), (1, 3, 0, -2),
    (2, 0, 2, 2), (2, 1, 3, 2), (2, 2, 0, 2), (2, 3, 1, 2),
    (3, 0, 3, 2), (3, 1, 2, 2), (3, 2, 1, 2), (3, 3, 0, 2),
    (4, 1, 1, -4), (4, 3, 3, -4),
    (5, 0, 1, -2), (5, 1, 0, -2), (5, 2, 3, 2), (5, 3, 2, 2),
    (6, 0, 2, -2), (6, 1, 3, 2), (6, 2, 0, -2), (6, 3, 1, 2),
    (7, 0, 1, 2), (7, 1, 0, 2), (7, 2, 3, 2), (7, 3, 2, 2),
    (8, 1, 1, -4), (8, 2, 2, -4),
]:
    _DR[ij, m, n] = coef


def _backward_view(gs, view, proj, frags, A, D, gC, gD, grads: Gradients) -> None:
    """Accumulate parameter gradients for one view given pixel gradients.

    ``gC`` is dL/d(color) per pixel (npix, 3) and ``gD`` dL/d(depth) (npix,).
    """
    if len(frags.gid) == 0:
        return
    gN = np.zeros_like(gD)
    gA = np.zeros_like(gD)
    pos = A > 0
    gN[pos] = gD[pos] / A[pos]
    gA[pos] = -gD[pos] * D[pos] / A[pos]

    idx = proj.index
    n = len(idx)
    opacity = gs.opacities()[idx]
    d_color, d_z, d_alpha, d_uv, gq = _backward_kernel(
        frags.offsets, frags.gid, frags.G, frags.T, proj.uv, proj.conic, opacity, gs.color[idx], proj.z,
        view.width, gC, gN, gA, MAX_ALPHA,
    )
    d_u, d_v = d_uv[:, 0], d_uv[:, 1]
    gQ = np.empty((n, 2, 2))
    gQ[:, 0, 0] = gq[:, 0]
    gQ[:, 0, 1] = gQ[:, 1, 0] = gq[:, 1]
    gQ[:, 1, 1] = gq[:, 2]

    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    g_cov2 = -Q @ gQ @ Q
    M, cov3, J = proj.M, proj.cov3, proj.J
    g_M = 2.0 * g_cov2 @ M @ cov3
    g_cov3 = np.swapaxes(M, 1, 2) @ g_cov2 @ M
    W = view.rotation
    g_J = g_M @ W.T

    # camera-space point gradient: through uv, depth, and the Jacobian
    z = proj.z
    K2 = view.intrinsics[:2]
    g_uv = np.stack([d_u, d_v], axis=1)
    g_cam = np.einsum("ni,nij->nj", g_uv, J)
    g_cam[:, 2] += d_z
    s1 = np.einsum("nij,ij->n", g_J, K2)
    s2 = np.einsum("ni,ni->n", g_J[:, :, 2], proj.uv)
    g_cam -= np.einsum("ni,nil->nl", g_J[:, :, 2], J) / z[:, None]
    g_cam[:, 2] += (-s1 + s2) / z**2
    grads.mu[idx] += g_cam @ W

    # covariance -> scale, rotation
    sub = gs.subset(idx)
    R = sub.rotations()
    s = sub.scales()
    g_cov3 = 0.5 * (g_cov3 + np.swapaxes(g_cov3, 1, 2))
    RtGR = np.swapaxes(R, 1, 2) @ g_cov3 @ R
    d_s = 2.0 * s * np.einsum("nkk->nk", RtGR)
    grads.scale_raw[idx] += d_s * s * (1.0 - s / (2.0 * gs.delta))
    g_R = 2.0 * g_cov3 @ R * (s**2)[:, None, :]
    qn = normalize_quats(sub.quat)
    dR_dq = np.einsum("imn,kn->kim", _DR, qn)  # (n, 9, 4)
    g_qn = np.einsum("ki,kim->km", g_R.reshape(n, 9), dR_dq)
    norm = np.linalg.norm(sub.quat, axis=1, keepdims=True)
    grads.quat[idx] += (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / norm

    grads.opacity_raw[idx] += d_alpha * opacity * (1.0 - opacity)
    grads.color[idx] += d_color


def _view_residuals(view: CameraView, C: np.ndarray, D: np.ndarray, lambda_depth: float):
    """Photometric and depth loss of one view plus their pixel gradients."""
    npix = view.width * view.height
    target = view.image.reshape(npix, 3)
    valid = np.ones(npix, dtype=bool) if view.sky_mask is None else ~view.sky_mask.reshape(npix)
    n_valid = int(valid.sum())
    gC = np.zeros((npix, 3))
    photo = 0.0
    if n_valid:
        r = C[valid] - target[valid]
        photo = float(np.abs(r).sum() / (3 * n_valid))
        gC[valid] = np.sign(r) / (3 * n_valid)
    gD = np.zeros(npix)
    depth = 0.0
    if len(view.depth):
        pix = np.floor(view.depth_uv).astype(np.int64)
        flat = pix[:, 1] * view.width + pix[:, 0]
        r = D[flat] - view.depth
        nt = len(flat)
        depth = float(lambda_depth * np.abs(r).sum() / nt)
        np.add.at(gD, flat, lambda_depth * np.sign(r) / nt)
    return photo, depth, gC, gD


def loss_and_gradients(gaussians: GaussianSet, frame: FrameBundle, cfg: PipelineConfig):
    """Test-time loss over all views of ``frame`` and its parameter gradients.

    Per view the loss is the mean absolute color error over non-sky pixels
    plus ``lambda_depth`` times the mean absolute depth error over the
    LiDAR depth targets. Semantics receive no gradient.

    Returns ``(loss, grads)``; ``grads.photo`` and ``grads.depth`` hold the
    two loss terms summed over views.
    """
    k = len(gaussians)
    grads = Gradients.zeros(k)
    total_photo = total_depth = 0.0
    for view in frame.views:
        if k:
            proj, frags, A, C, D = _rasterize(gaussians, view, cfg.trunc_mahal)
        else:
            npix = view.width * view.height
            A, C, D = np.zeros(npix), np.zeros((npix, 3)), np.zeros(npix)
        photo, depth, gC, gD = _view_residuals(view, C, D, cfg.lambda_depth)
        total_photo += photo
        total_depth += depth
        if k:
            _backward_view(gaussians, view, proj, frags, A, D, gC, gD, grads)
    grads.photo, grads.depth = total_photo, total_depth
    return total_photo + total_depth, grads


def frame_loss(gaussians: GaussianSet, frame: FrameBundle, cfg: PipelineConfig) -> float:
    total = 0.0
    for view in frame.views:
        r = render_view(gaussians, view, cfg.trunc_mahal)
        npix = view.width * view.height
        photo, depth, _, _ = _view_residuals(view, r.color.reshape(npix, 3), r.depth.reshape(npix), cfg.lambda_depth)
        total += photo + depth
    return total


def save_render(render: RenderOutput, prefix, max_depth: float = 100.0) -> None:
    """Write ``<prefix>_color.png`` (8-bit RGB) and ``<prefix>_depth.png`` (16-bit)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(render.color * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(f"{prefix}_color.png")
    depth = np.clip(np.round(render.depth / max_depth * 65535), 0, 65535).astype(np.uint16)
    Image.fromarray(depth).save(f"{prefix}_depth.png")

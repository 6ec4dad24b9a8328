"""Analytic ground-truth scenes, a fine-quadrature oracle renderer, orbit
cameras, and the procedural box-triplane dataset.

The oracle renderer evaluates closed-form density/color fields directly in
numpy; it shares the renderer's quadrature formulas but none of its code, so
the two paths cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import token_ids
from .render import Camera, RenderOutput, generate_rays, sample_points_batch
from .triplane import Tensor, Triplane

SQRT3 = float(np.sqrt(3.0))

# 75 degrees: keeps the whole cube in frame from any orbit radius >= 3
DEFAULT_FOV = float(np.deg2rad(75.0))

# face colors of the reference cube: +x/-x, +y/-y, +z/-z
CUBE_FACE_COLORS = {
    (0, +1): (1.0, 0.0, 0.0),  # red
    (0, -1): (0.0, 1.0, 1.0),  # cyan
    (1, +1): (0.0, 1.0, 0.0),  # green
    (1, -1): (1.0, 0.0, 1.0),  # magenta
    (2, +1): (0.0, 0.0, 1.0),  # blue
    (2, -1): (1.0, 1.0, 0.0),  # yellow
}

BOX_PALETTE = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 1.0, 0.1),
    "blue": (0.1, 0.1, 1.0),
    "yellow": (1.0, 1.0, 0.1),
    "cyan": (0.1, 1.0, 1.0),
    "magenta": (1.0, 0.1, 1.0),
}


@dataclass
class AnalyticScene:
    kind: str
    params: dict

    def sigma(self, points):
        """Closed-form density at (N, 3) points."""
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            inside = np.linalg.norm(p, axis=-1) <= self.params["radius"]
            return self.params["density"] * inside
        if self.kind == "cube":
            inside = np.all(np.abs(p) <= self.params["half"], axis=-1)
            return self.params["density"] * inside
        if self.kind == "two_blob":
            c1, c2 = self.params["centers"]
            w2 = 2.0 * self.params["width"] ** 2
            g1 = np.exp(-np.sum((p - c1) ** 2, axis=-1) / w2)
            g2 = np.exp(-np.sum((p - c2) ** 2, axis=-1) / w2)
            return self.params["amplitude"] * (g1 + g2)
        if self.kind == "vacuum":
            return np.zeros(p.shape[:-1])
        raise ValueError(f"unknown scene kind {self.kind!r}")

    def color(self, points):
        """Closed-form color at (N, 3) points, in [0, 1]^3."""
        p = np.asarray(points, dtype=np.float64)
        n = p.shape[0]
        if self.kind == "sphere":
            return np.clip(0.5 + 0.5 * p / self.params["radius"], 0.0, 1.0)
        if self.kind == "cube":
            half = self.params["half"]
            axis = np.argmax(np.abs(p), axis=-1)
            sign = np.where(p[np.arange(n), axis] >= 0.0, 1, -1)
            out = np.empty((n, 3))
            for (ax, sg), rgb in CUBE_FACE_COLORS.items():
                sel = (axis == ax) & (sign == sg)
                out[sel] = rgb
            return out
        if self.kind == "two_blob":
            c1, c2 = self.params["centers"]
            w2 = 2.0 * self.params["width"] ** 2
            g1 = np.exp(-np.sum((p - c1) ** 2, axis=-1) / w2)[:, None]
            g2 = np.exp(-np.sum((p - c2) ** 2, axis=-1) / w2)[:, None]
            col1 = np.asarray(self.params["colors"][0])
            col2 = np.asarray(self.params["colors"][1])
            return (g1 * col1 + g2 * col2) / np.maximum(g1 + g2, 1e-300)
        if self.kind == "vacuum":
            return np.zeros((n, 3))
        raise ValueError(f"unknown scene kind {self.kind!r}")


def make_scene(kind, params=None, seed=0):
    """Deterministic closed-form scene; parameters are validated up front."""
    params = dict(params or {})
    if kind == "sphere":
        params.setdefault("radius", 0.5)
        params.setdefault("density", 4.0)
        if not (0.0 < params["radius"] < 1.0):
            raise ValueError(f"sphere radius must be in (0, 1), got {params['radius']}")
        if params["density"] <= 0.0:
            raise ValueError(f"density must be > 0, got {params['density']}")
    elif kind == "cube":
        params.setdefault("half", 0.6)
        params.setdefault("density", 20.0)
        if not (0.0 < params["half"] < 1.0):
            raise ValueError(f"cube half extent must be in (0, 1), got {params['half']}")
        if params["density"] <= 0.0:
            raise ValueError(f"density must be > 0, got {params['density']}")
    elif kind == "two_blob":
        params.setdefault("amplitude", 6.0)
        params.setdefault("width", 0.15)
        if params["amplitude"] <= 0.0 or not (0.0 < params["width"] < 1.0):
            raise ValueError(f"two_blob needs amplitude > 0 and width in (0, 1), got {params}")
        if "centers" not in params:
            params["centers"] = (np.array([-0.45, -0.15, 0.0]), np.array([0.45, 0.25, 0.1]))
        if "colors" not in params:
            params["colors"] = (np.array([1.0, 0.4, 0.1]), np.array([0.1, 0.5, 1.0]))
    elif kind == "vacuum":
        pass
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    return AnalyticScene(kind, params)


def oracle_render(scene, cam, n_fine, t_near=None, t_far=None):
    """Reference render at n_fine uniform (bin-midpoint) samples per ray.

    Same quadrature as the differentiable renderer, written independently in
    plain numpy against the analytic fields.
    """
    if n_fine < 512:
        raise ValueError(f"oracle requires n_fine >= 512, got {n_fine}")
    bundle = generate_rays(cam, t_near, t_far)
    h, w = bundle.shape
    r = h * w
    ts = sample_points_batch(bundle.t_near, bundle.t_far, r, n_fine)
    pts = (bundle.origins[:, None, :] + ts[..., None] * bundle.directions[:, None, :]).reshape(r * n_fine, 3)
    sig = scene.sigma(pts).reshape(r, n_fine)
    col = scene.color(pts).reshape(r, n_fine, 3)
    rgb, mask, depth = oracle_integrate(sig, col, ts, bundle.t_far)
    return RenderOutput(rgb.reshape(h, w, 3), mask.reshape(h, w), depth.reshape(h, w))


def oracle_integrate(sigmas, colors, ts, t_far):
    """Numpy-only quadrature mirror of the renderer's integrate_rays."""
    delta = np.empty_like(ts)
    delta[:, :-1] = ts[:, 1:] - ts[:, :-1]
    delta[:, -1] = t_far - ts[:, -1]
    sd = sigmas * delta
    excl = np.cumsum(sd, axis=1) - sd
    trans = np.exp(-1.0 * excl)
    alpha = 1.0 - np.exp(-1.0 * sd)
    w = trans * alpha
    rgb = (w[:, :, None] * colors).sum(axis=1)
    mask = w.sum(axis=1)
    depth = (w * ts).sum(axis=1) + (1.0 - mask) * float(t_far)
    return rgb, mask, depth


def look_at_origin(position):
    """Right-handed orthonormal frame with forward pointing at the origin."""
    position = np.asarray(position, dtype=np.float64)
    forward = -position / np.linalg.norm(position)
    up_world = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_world) > 1.0 - 1e-9:
        raise ValueError("camera on the world up axis: look-at frame degenerate")
    right = np.cross(forward, up_world)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return np.column_stack([right, up, forward])


def camera_orbit(count, radius, elevation, fov=DEFAULT_FOV, height=64, width=64, azimuth_offset=0.0):
    """Evenly spaced look-at-origin cameras on a constant-elevation orbit."""
    if radius <= SQRT3:
        raise ValueError(f"orbit radius must exceed sqrt(3) so the cube stays in frame, got {radius}")
    cams = []
    for k in range(count):
        az = azimuth_offset + 2.0 * np.pi * k / count
        pos = radius * np.array([np.cos(elevation) * np.cos(az), np.cos(elevation) * np.sin(az), np.sin(elevation)])
        cams.append(Camera(pos, look_at_origin(pos), fov, height, width))
    return cams


def orbit_camera(azimuth, elevation, radius, fov=DEFAULT_FOV, height=64, width=64):
    """Single look-at-origin camera at the given pose (angles in radians)."""
    if radius <= SQRT3:
        raise ValueError(f"orbit radius must exceed sqrt(3), got {radius}")
    pos = radius * np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)])
    return Camera(pos, look_at_origin(pos), fov, height, width)


# ---------------------------------------------------------------------------
# procedural triplane dataset: axis-aligned colored boxes projected onto the
# three planes, cross-plane consistent by construction
# ---------------------------------------------------------------------------

@dataclass
class ToyTriplaneExample:
    x0: Triplane
    caption: tuple
    tokens: np.ndarray


def _axis_profile(d, lo, hi):
    """Occupancy coverage per texel: 1 in the core, one-texel soft border."""
    i = np.arange(d, dtype=np.float64)
    return np.clip(np.minimum(i - lo, hi - i) + 0.5, 0.0, 1.0)


def make_toy_triplane_dataset(count, d=16, c=4, seed=0):
    """Random colored boxes as soft orthographic projections; channel 0 is
    occupancy, channels 1..3 a color fill. Captions name color and size."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if c < 4:
        raise ValueError(f"need at least 4 channels (occupancy + rgb), got {c}")
    rng = np.random.default_rng(seed)
    colors = sorted(BOX_PALETTE)
    min_side, max_side = 3.0, d - 2.0
    examples = []
    for _ in range(count):
        name = colors[rng.integers(len(colors))]
        rgb = np.array(BOX_PALETTE[name])
        lo = np.empty(3)
        hi = np.empty(3)
        for a in range(3):
            side = rng.uniform(min_side, max_side)
            start = rng.uniform(0.5, d - 1.5 - side)
            lo[a], hi[a] = start, start + side
        prof = [_axis_profile(d, lo[a], hi[a]) for a in range(3)]

        def plane(pa, pb):
            occ = np.outer(prof[pb], prof[pa])  # rows v (=pb), cols u (=pa)
            chans = [occ] + [occ * rgb[k] for k in range(3)]
            chans += [np.zeros((d, d))] * (c - 4)
            return np.stack(chans, axis=-1)

        x0 = Triplane((Tensor(plane(0, 1)), Tensor(plane(0, 2)), Tensor(plane(1, 2))))
        mean_side = float((hi - lo).mean())
        third = (max_side - min_side) / 3.0
        size = "small" if mean_side < min_side + third else ("medium" if mean_side < min_side + 2 * third else "large")
        caption = (name, size, "box")
        examples.append(ToyTriplaneExample(x0, caption, token_ids(caption)))
    return examples

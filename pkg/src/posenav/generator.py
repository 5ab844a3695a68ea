"""Procedural differentiable image generator: a soft-rasterized cuboid.

The generator maps a 22-dimensional input -- Euler pose (3), image-plane
translation plus log-scale (3), and a 16-dim latent code -- to a 64x64
RGB image, and is differentiable end to end through the reverse-mode
tape.  The latent code perturbs the cuboid's half-extents, per-face
albedos, and base color through fixed seeded linear maps, so appearance
varies smoothly with z while pose controls viewpoint.

Rendering pipeline, per face of each axis-aligned slab:

* corners scaled by the latent-perturbed half-extents, rotated by
  R_z(inplane) R_x(elevation) R_y(azimuth), scaled by exp(scale),
  orthographically projected, shifted by (tx, ty);
* a smooth signed distance per pixel (temperature-smoothed max of the
  four signed edge distances of the projected parallelogram) feeds a
  soft coverage sigmoid(-sdf/tau), damped by a smooth visibility factor
  that extinguishes edge-on faces;
* Lambertian shading from a fixed light direction with an ambient floor;
* faces composite by softmax over view depth (temperature beta) against
  a fixed 0.05 background.

The camera sits at z = +infinity looking along -z: larger camera-frame z
is closer to the viewer.  Pixel values land in [0, 1] by construction
(convex blend of sigmoid albedos times shading factors <= 1); the final
clamp is a guard, not a crutch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import EulerPose, Translation

LATENT_DIM = 16
IMAGE_SIZE = 64

# One frozen 3x3x3ch -> 8 feature bank shared by every perceptual loss call.
_FEATURE_BANK = np.random.default_rng(20240501).normal(0.0, 0.3, size=(27, 8))

_CATEGORY_SEEDS = {"box": 101, "laptop": 202, "pillar": 303}

# Corner index convention: bit 2 = +x, bit 1 = +y, bit 0 = +z.
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [-1, -1, +1],
        [-1, +1, -1],
        [-1, +1, +1],
        [+1, -1, -1],
        [+1, -1, +1],
        [+1, +1, -1],
        [+1, +1, +1],
    ],
    dtype=np.float64,
)

# Cyclic corner order per face; winding handled by a smooth signed-area
# factor at render time, so orientation here is free.
_FACE_CORNERS = np.array(
    [
        [4, 6, 7, 5],  # +x
        [0, 1, 3, 2],  # -x
        [2, 3, 7, 6],  # +y
        [0, 4, 5, 1],  # -y
        [1, 5, 7, 3],  # +z
        [0, 2, 6, 4],  # -z
    ],
    dtype=np.int64,
)

_FACE_NORMALS = np.array(
    [
        [+1, 0, 0],
        [-1, 0, 0],
        [0, +1, 0],
        [0, -1, 0],
        [0, 0, +1],
        [0, 0, -1],
    ],
    dtype=np.float64,
)


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class PoseState:
    """One point in the generator's input space."""

    theta: EulerPose
    trans: Translation
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.shape != (LATENT_DIM,):
            raise ValueError(f"latent code must have shape ({LATENT_DIM},), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent code must be finite")
        object.__setattr__(self, "z", np.clip(z, -3.0, 3.0))

    def as_vector(self) -> np.ndarray:
        """Flat layout (azimuth, elevation, inplane, tx, ty, scale, z...)."""
        return np.concatenate(
            [self.theta.as_array(), self.trans.as_array(), self.z]
        )

    @staticmethod
    def from_vector(v) -> "PoseState":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (6 + LATENT_DIM,):
            raise ValueError(f"state vector must have shape ({6 + LATENT_DIM},)")
        return PoseState(
            EulerPose(float(v[0]), float(v[1]), float(v[2])),
            Translation(float(v[3]), float(v[4]), float(v[5])),
            v[6:].copy(),
        )


@dataclass(frozen=True)
class GeneratorSpec:
    """Frozen description of one object category's procedural generator."""

    category: str
    image_size: int = IMAGE_SIZE
    tau: float = 1.5  # soft-edge width, pixels
    beta: float = 25.0  # depth softmax temperature
    background: float = 0.05
    ambient: float = 0.25
    light_dir: np.ndarray = field(
        default_factory=lambda: np.array([0.4, 0.7, 0.6]) / np.linalg.norm([0.4, 0.7, 0.6])
    )
    base_half: np.ndarray = field(default_factory=lambda: np.array([0.16, 0.12, 0.10]))
    corner_mat: np.ndarray = field(default_factory=lambda: _CORNER_SIGNS.copy())
    face_idx: np.ndarray = field(default_factory=lambda: _FACE_CORNERS.copy())
    face_class: np.ndarray = field(default_factory=lambda: np.arange(6))
    face_normals: np.ndarray = field(default_factory=lambda: _FACE_NORMALS.copy())
    albedo_logits: np.ndarray = field(default_factory=lambda: np.zeros((6, 3)))
    ext_map: np.ndarray = field(default_factory=lambda: np.zeros((3, LATENT_DIM)))
    alb_map: np.ndarray = field(default_factory=lambda: np.zeros((6, LATENT_DIM)))
    rgb_map: np.ndarray = field(default_factory=lambda: np.zeros((3, LATENT_DIM)))
    symmetry_axis: np.ndarray | None = None

    @property
    def n_faces(self) -> int:
        return self.face_idx.shape[0]

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.image_size
        centers = np.arange(n, dtype=np.float64) + 0.5
        gx, gy = np.meshgrid(centers, centers)  # gy varies along rows
        return gx.reshape(-1), gy.reshape(-1)


def _slab_tables(slabs):
    """Stack per-slab corner matrices and face tables into flat arrays.

    Each slab is (multiplier (3,), offset (3,)) in half-extent units, so
    corner positions are (sign * multiplier + offset) elementwise-times
    the shared latent-perturbed half-extents.
    """
    corner_rows, face_rows, classes, normals = [], [], [], []
    for s, (mult, offset) in enumerate(slabs):
        corner_rows.append(_CORNER_SIGNS * np.asarray(mult) + np.asarray(offset))
        face_rows.append(_FACE_CORNERS + 8 * s)
        classes.append(np.arange(6))
        normals.append(_FACE_NORMALS)
    return (
        np.vstack(corner_rows),
        np.vstack(face_rows),
        np.concatenate(classes),
        np.vstack(normals),
    )


def spec_for_category(category: str, image_size: int = IMAGE_SIZE) -> GeneratorSpec:
    """Build the frozen generator description for a named category.

    Latent maps are drawn once from a per-category seeded RNG so every
    process sees the identical generator.
    """
    if category not in _CATEGORY_SEEDS:
        raise ValueError(
            f"unknown category {category!r}; choose from {sorted(_CATEGORY_SEEDS)}"
        )
    rng = np.random.default_rng(_CATEGORY_SEEDS[category])
    ext_map = rng.normal(0.0, 0.06, size=(3, LATENT_DIM))
    alb_map = rng.normal(0.0, 0.25, size=(6, LATENT_DIM))
    rgb_map = rng.normal(0.0, 0.10, size=(3, LATENT_DIM))

    if category == "box":
        # Symmetric-texture category.  The four faces around the object
        # z axis share one albedo class and the x/y extents are tied, so
        # a quarter spin about z is an exact appearance symmetry for any
        # latent; spin about z is therefore exempt from rotation error
        # (symmetry_axis).  Front (+z) and back (-z) are class-tied with
        # a constant logit gap: a half-turn of azimuth aligns the whole
        # silhouette, carving a second loss basin at 180 degrees that is
        # never the global minimum.  The gap is sized to keep that basin
        # (descent stays trapped) while leaving the front/back contrast
        # resolvable in pooled grayscale, so learned policies can escape.
        albedo = np.array(
            [
                [0.35, 0.45, 0.62],  # +x side
                [0.35, 0.45, 0.62],  # -x side
                [0.35, 0.45, 0.62],  # +y side
                [0.35, 0.45, 0.62],  # -y side
                [0.80, 0.54, 0.38],  # +z front
                [0.18, 0.10, 0.06],  # -z back, darker than front
            ]
        )
        corners, faces, _, normals = _slab_tables([(np.ones(3), np.zeros(3))])
        ext_map[1] = ext_map[0]  # keep the cross-section square
        return GeneratorSpec(
            category=category,
            image_size=image_size,
            base_half=np.array([0.16, 0.16, 0.10]),
            corner_mat=corners,
            face_idx=faces,
            face_class=np.array([0, 0, 0, 0, 1, 1]),
            face_normals=normals,
            albedo_logits=_logit(albedo),
            ext_map=ext_map,
            alb_map=alb_map,
            rgb_map=rgb_map,
            symmetry_axis=np.array([0.0, 0.0, 1.0]),
        )

    if category == "laptop":
        albedo = np.array(
            [
                [0.72, 0.32, 0.25],  # +x
                [0.22, 0.42, 0.72],  # -x
                [0.60, 0.62, 0.64],  # +y keyboard deck
                [0.18, 0.18, 0.20],  # -y underside
                [0.78, 0.74, 0.66],  # +z screen side
                [0.30, 0.30, 0.34],  # -z lid back
            ]
        )
        slabs = [
            (np.array([1.0, 0.18, 0.85]), np.array([0.0, -0.82, 0.15])),  # base
            (np.array([1.0, 0.82, 0.12]), np.array([0.0, 0.18, -0.88])),  # screen
        ]
        corners, faces, classes, normals = _slab_tables(slabs)
        return GeneratorSpec(
            category=category,
            image_size=image_size,
            base_half=np.array([0.17, 0.13, 0.12]),
            corner_mat=corners,
            face_idx=faces,
            face_class=classes,
            face_normals=normals,
            albedo_logits=_logit(np.vstack([albedo, albedo])),
            ext_map=ext_map,
            alb_map=alb_map,
            rgb_map=rgb_map,
            symmetry_axis=None,
        )

    # pillar: upright, square cross-section in x-z, all four side faces
    # one albedo class and x/z extents tied, so a quarter turn of azimuth
    # is an exact appearance symmetry for any latent; spin about +y is
    # exempt from rotation error.
    albedo = np.array(
        [
            [0.45, 0.52, 0.60],  # +x
            [0.45, 0.52, 0.60],  # -x
            [0.80, 0.72, 0.45],  # +y cap
            [0.20, 0.20, 0.24],  # -y base
            [0.45, 0.52, 0.60],  # +z
            [0.45, 0.52, 0.60],  # -z
        ]
    )
    corners, faces, _, normals = _slab_tables([(np.ones(3), np.zeros(3))])
    ext_map[2] = ext_map[0]  # keep the cross-section square
    return GeneratorSpec(
        category=category,
        image_size=image_size,
        base_half=np.array([0.11, 0.20, 0.11]),
        corner_mat=corners,
        face_idx=faces,
        face_class=np.array([0, 0, 1, 2, 0, 0]),
        face_normals=normals,
        albedo_logits=_logit(albedo),
        ext_map=ext_map,
        alb_map=alb_map,
        rgb_map=rgb_map,
        symmetry_axis=np.array([0.0, 1.0, 0.0]),
    )


def categories() -> list[str]:
    return sorted(_CATEGORY_SEEDS)


def mean_pose(spec: GeneratorSpec) -> PoseState:
    """Midpoint of the sampling ranges: the canonical episode start."""
    return PoseState(
        EulerPose(0.0, math.pi / 12.0, 0.0),
        Translation(0.0, 0.0, 0.0),
        np.zeros(LATENT_DIM),
    )


def sample_state(spec: GeneratorSpec, rng: np.random.Generator) -> PoseState:
    """Random target state: full azimuth, mild elevation/in-plane/shift,
    latent from a clipped standard normal."""
    theta = EulerPose(
        float(rng.uniform(-math.pi, math.pi)),
        float(rng.uniform(-math.pi / 6.0, math.pi / 3.0)),
        float(rng.uniform(-math.pi / 12.0, math.pi / 12.0)),
    )
    trans = Translation(
        float(rng.uniform(-0.15, 0.15)),
        float(rng.uniform(-0.15, 0.15)),
        float(rng.uniform(-0.3, 0.3)),
    )
    z = np.clip(rng.normal(size=LATENT_DIM), -3.0, 3.0)
    return PoseState(theta, trans, z)


def _rotation_matrix_t(theta: Tensor) -> Tensor:
    """3x3 rotation R_z(inplane) R_x(elevation) R_y(azimuth) on tape."""
    az, el, ip = theta[0:1], theta[1:2], theta[2:3]
    ca, sa = ad.cos(az), ad.sin(az)
    cb, sb = ad.cos(el), ad.sin(el)
    cc, sc = ad.cos(ip), ad.sin(ip)
    zero = ad.mul(az, 0.0)
    one = ad.add(zero, 1.0)
    r_y = ad.reshape(
        ad.concat([ca, zero, sa, zero, one, zero, ad.neg(sa), zero, ca]), (3, 3)
    )
    r_x = ad.reshape(
        ad.concat([one, zero, zero, zero, cb, ad.neg(sb), zero, sb, cb]), (3, 3)
    )
    r_z = ad.reshape(
        ad.concat([cc, ad.neg(sc), zero, sc, cc, zero, zero, zero, one]), (3, 3)
    )
    return ad.matmul(r_z, ad.matmul(r_x, r_y))


def render_tensors(spec: GeneratorSpec, theta, trans, z) -> Tensor:
    """Differentiable render from tape tensors (theta (3,), trans (3,),
    z (16,)) to an (H, W, 3) image tensor.

    Pass plain ndarrays (or untracked tensors) for a forward-only render;
    the arithmetic is identical either way, so traced and untraced calls
    produce bit-identical pixels.
    """
    px_grid, py_grid = spec.pixel_centers()
    face_next = np.roll(spec.face_idx, -1, axis=1)
    n = spec.image_size
    n_faces = spec.n_faces

    ext_delta = ad.matmul(spec.ext_map, z)  # (3,)
    half = ad.mul(spec.base_half, ad.exp(ext_delta))  # (3,)
    corners = ad.mul(spec.corner_mat, ad.reshape(half, (1, 3)))  # (C, 3)

    rot = _rotation_matrix_t(theta if isinstance(theta, Tensor) else Tensor(theta))
    verts = ad.matmul(corners, ad.transpose(rot))  # rows are R @ corner
    scale = ad.exp(trans[2:3])  # (1,)
    verts = ad.mul(verts, ad.reshape(scale, (1, 1)))

    # Orthographic projection to pixel units.
    vx = ad.mul(ad.add(ad.add(verts[:, 0], trans[0:1]), 0.5), float(n))
    vy = ad.mul(ad.add(ad.add(verts[:, 1], trans[1:2]), 0.5), float(n))
    vz = verts[:, 2]

    face_x = ad.gather(vx, spec.face_idx)  # (F, 4)
    face_y = ad.gather(vy, spec.face_idx)
    next_x = ad.gather(vx, face_next)
    next_y = ad.gather(vy, face_next)
    face_depth = ad.mean_(ad.gather(vz, spec.face_idx), axis=1)  # (F,)

    edge_x = ad.sub(next_x, face_x)  # (F, 4)
    edge_y = ad.sub(next_y, face_y)
    edge_len = ad.sqrt(ad.add(ad.add(ad.square(edge_x), ad.square(edge_y)), 1e-6))

    # Shoelace area in px^2; its smooth sign orients edge normals outward
    # for either winding, and a smooth visibility factor removes faces
    # collapsing to slivers (edge-on) instead of letting their normals blow up.
    area = ad.mul(
        ad.sum_(ad.sub(ad.mul(face_x, next_y), ad.mul(next_x, face_y)), axis=1), 0.5
    )  # (F,)
    area_sq = ad.square(area)
    sign = ad.div(area, ad.sqrt(ad.add(area_sq, 4.0)))  # ~A/|A|, softened
    visibility = ad.div(area_sq, ad.add(area_sq, 36.0))  # ~1 unless sliver

    nx = ad.div(edge_y, edge_len)  # outward for CCW once multiplied by sign
    ny = ad.div(ad.neg(edge_x), edge_len)

    # Signed distance of every pixel to every edge line: (F, 4, P).
    dx = ad.sub(px_grid, ad.reshape(face_x, (n_faces, 4, 1)))
    dy = ad.sub(py_grid, ad.reshape(face_y, (n_faces, 4, 1)))
    d_edge = ad.add(
        ad.mul(dx, ad.reshape(nx, (n_faces, 4, 1))),
        ad.mul(dy, ad.reshape(ny, (n_faces, 4, 1))),
    )
    d_edge = ad.mul(d_edge, ad.reshape(sign, (n_faces, 1, 1)))

    # Smooth max over the four edges approximates the polygon sdf.
    d_max = np.max(ad.value_of(d_edge), axis=1, keepdims=True)  # constant shift
    sdf = ad.add(
        ad.reshape(
            ad.mul(
                ad.log(ad.sum_(ad.exp(ad.div(ad.sub(d_edge, d_max), spec.tau)), axis=1)),
                spec.tau,
            ),
            (n_faces, -1),
        ),
        d_max.reshape(n_faces, -1),
    )  # (F, P)

    coverage = ad.mul(
        ad.sigmoid(ad.div(ad.neg(sdf), spec.tau)),
        ad.reshape(visibility, (n_faces, 1)),
    )

    # Lambertian shading with an ambient floor.
    normals_cam = ad.matmul(spec.face_normals, ad.transpose(rot))  # (F, 3)
    lambert = ad.relu(ad.matmul(normals_cam, spec.light_dir))  # (F,)
    shade = ad.add(ad.mul(lambert, 1.0 - spec.ambient), spec.ambient)

    alb_delta = ad.gather(ad.matmul(spec.alb_map, z), spec.face_class)  # (F,)
    rgb_delta = ad.matmul(spec.rgb_map, z)  # (3,)
    logits = ad.add(
        ad.add(spec.albedo_logits, ad.reshape(alb_delta, (n_faces, 1))), rgb_delta
    )
    color = ad.mul(ad.sigmoid(logits), ad.reshape(shade, (n_faces, 1)))  # (F, 3)

    # Between faces: softmax over view depth (closer face wins smoothly).
    # Against the background: union alpha of the per-face coverages, so a
    # pixel far from every face stays at exactly the background value
    # instead of inheriting a depth-boosted face tint.
    depth_logit = ad.mul(face_depth, spec.beta)  # (F,)
    shift = float(np.max(ad.value_of(depth_logit)))  # detached constant
    face_w = ad.exp(ad.sub(depth_logit, shift))  # (F,)
    numer = ad.mul(coverage, ad.reshape(face_w, (n_faces, 1)))  # (F, P)
    denom = ad.add(ad.sum_(numer, axis=0), 1e-30)  # (P,)
    weights = ad.div(numer, denom)  # (F, P), sums to ~1 where covered
    mixed = ad.matmul(ad.transpose(weights), color)  # (P, 3)

    alpha = ad.sub(
        1.0, ad.exp(ad.sum_(ad.log(ad.sub(1.0, coverage)), axis=0))
    )  # (P,) = 1 - prod(1 - cov)
    alpha = ad.reshape(alpha, (-1, 1))
    pixel_rgb = ad.add(
        ad.mul(alpha, mixed), ad.mul(ad.sub(1.0, alpha), spec.background)
    )

    image = ad.reshape(pixel_rgb, (n, n, 3))
    return ad.clamp(image, 0.0, 1.0)


def render(spec: GeneratorSpec, state: PoseState) -> np.ndarray:
    """Forward-only render to a plain (H, W, 3) float64 image in [0, 1]."""
    img = render_tensors(
        spec,
        Tensor(state.theta.as_array()),
        Tensor(state.trans.as_array()),
        Tensor(state.z),
    )
    return img.value


def perceptual_loss(image_a, image_b) -> Tensor:
    """Multi-scale image discrepancy.

    Sum of per-level MSEs over a four-level 2x average-pool pyramid, plus
    0.1 times the MSE of a frozen random 8-filter 3x3 feature bank applied
    at pyramid level 1.  Accepts tensors or ndarrays on either side; only
    tensor inputs receive gradients.
    """
    a = image_a if isinstance(image_a, Tensor) else Tensor(image_a)
    b = image_b if isinstance(image_b, Tensor) else Tensor(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    loss = ad.mean_(ad.square(ad.sub(a, b)))
    level_a, level_b = a, b
    feat_a = feat_b = None
    for level in range(1, 4):
        level_a = ad.avgpool2x2(level_a)
        level_b = ad.avgpool2x2(level_b)
        loss = ad.add(loss, ad.mean_(ad.square(ad.sub(level_a, level_b))))
        if level == 1:
            feat_a = _feature_maps(level_a)
            feat_b = _feature_maps(level_b)
    loss = ad.add(loss, ad.mul(ad.mean_(ad.square(ad.sub(feat_a, feat_b))), 0.1))
    return loss


def _feature_maps(image: Tensor) -> Tensor:
    """Valid 3x3 conv with the frozen bank via nine shifted slices."""
    h = image.shape[0] - 2
    w = image.shape[1] - 2
    patches = []
    for dy in range(3):
        for dx in range(3):
            patches.append(
                ad.reshape(image[dy : dy + h, dx : dx + w, :], (h * w, 3))
            )
    stacked = ad.concat(patches, axis=1)  # (h*w, 27)
    return ad.matmul(stacked, _FEATURE_BANK)  # (h*w, 8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255); values round half to even."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    h, w = image.shape[:2]
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())

"""Synthetic light-stage generator: subjects, envmaps, relit tuples.

Subjects are smooth solids (sphere, capsule, or a two-sphere bust) shaded
under an environment map with a Lambertian term plus a normalized
Blinn-Phong specular lobe. The orthographic camera sits on the -z axis
looking toward +z, so every visible surface normal has a nonpositive z
component, and the image frame covers [-1, 1]^2 in world units (x right,
y up).

A training tuple relights one subject: the input composite shows the
subject and background both under environment A (the source-lit
composite), the target shows both under environment B. Backgrounds are
pinhole crops of the panorama at yaw 0; lighting variation comes from
rotating the panorama itself, which keeps the stored panorama aligned
with what the subject was shaded with.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset, imgio
from .envmap import (
    CropSpec,
    EnvMap,
    _texel_geometry,
    project_to_background,
    rotate_envmap,
    save_envmap,
    tonemap_ldr,
)

_TWO_PI = 2.0 * math.pi

SUBJECT_KINDS = ("sphere", "capsule", "bust")


@dataclass(frozen=True)
class SubjectSpec:
    """A renderable subject in camera-frame units ([-1, 1] across)."""

    kind: str = "sphere"
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.5
    half_length: float = 0.3  # capsule only: half the axis length
    head_scale: float = 0.6  # bust only: head radius / body radius
    albedo: tuple[float, float, float] = (0.8, 0.8, 0.8)
    specular_strength: float = 0.0
    specular_exponent: float = 32.0

    def __post_init__(self):
        if self.kind not in SUBJECT_KINDS:
            raise ValueError(f"unknown subject kind {self.kind!r}")
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo components must lie in [0, 1]")

    def extents(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) of the silhouette."""
        cx, cy = self.center
        r = self.radius
        if self.kind == "sphere":
            return cx - r, cx + r, cy - r, cy + r
        if self.kind == "capsule":
            hl = self.half_length
            return cx - r, cx + r, cy - hl - r, cy + hl + r
        head_r = self.head_scale * r
        return cx - r, cx + r, cy - r, cy + r + head_r

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | dict) -> "SubjectSpec":
        kv = json.loads(text) if isinstance(text, str) else dict(text)
        kv["center"] = tuple(kv["center"])
        kv["albedo"] = tuple(kv["albedo"])
        return cls(**kv)


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """World (x, y) of pixel centers; row 0 is the top of the frame."""
    step = 2.0 / size
    xs = -1.0 + (np.arange(size) + 0.5) * step
    ys = 1.0 - (np.arange(size) + 0.5) * step
    return np.meshgrid(xs, ys)


def _sphere_fields(
    px: np.ndarray, py: np.ndarray, radius: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distance to center, outward normal, visible-surface height.

    ``px, py`` are pixel offsets from the sphere center. Normals at and
    beyond the rim flatten to the silhouette tangent so the antialiasing
    band shades smoothly.
    """
    dist = np.sqrt(px * px + py * py)
    safe = np.maximum(dist, 1e-12)
    rho = np.minimum(dist / radius, 1.0)
    nz = -np.sqrt(np.maximum(1.0 - rho * rho, 0.0))
    nx = (px / safe) * rho
    ny = (py / safe) * rho
    normals = np.stack([nx, ny, nz], axis=-1)
    height = np.sqrt(np.maximum(radius * radius - dist * dist, 0.0))
    return dist, normals, height


def subject_fields(
    subject: SubjectSpec, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel coverage alpha (S, S) and unit normals (S, S, 3).

    Alpha uses the analytic rim ramp clip(r_pix + 0.5 - d_pix, 0, 1), so a
    sphere's alpha sum approximates pi * (r_pix^2 + 1/12). Raises
    ValueError("subject out of frame") when the silhouette leaves the
    [-1, 1]^2 frame.
    """
    x_min, x_max, y_min, y_max = subject.extents()
    if x_min < -1.0 or x_max > 1.0 or y_min < -1.0 or y_max > 1.0:
        raise ValueError("subject out of frame")
    gx, gy = _pixel_grid(size)
    cx, cy = subject.center
    px_per_unit = size / 2.0

    if subject.kind == "sphere":
        dist, normals, _ = _sphere_fields(gx - cx, gy - cy, subject.radius)
        alpha = np.clip(
            subject.radius * px_per_unit + 0.5 - dist * px_per_unit, 0.0, 1.0
        )
        return alpha, normals

    if subject.kind == "capsule":
        # Distance to the vertical axis segment; everything else matches
        # the sphere case with the closest axis point as the center.
        qy = np.clip(gy, cy - subject.half_length, cy + subject.half_length)
        dist, normals, _ = _sphere_fields(gx - cx, gy - qy, subject.radius)
        alpha = np.clip(
            subject.radius * px_per_unit + 0.5 - dist * px_per_unit, 0.0, 1.0
        )
        return alpha, normals

    # Bust: body sphere plus a smaller head sphere resting on top. Where
    # both cover a pixel the surface nearer the camera (larger height)
    # wins; in the rim band the better-covered sphere wins.
    body_r = subject.radius
    head_r = subject.head_scale * body_r
    head_cy = cy + body_r
    d_body, n_body, h_body = _sphere_fields(gx - cx, gy - cy, body_r)
    d_head, n_head, h_head = _sphere_fields(gx - cx, gy - head_cy, head_r)
    a_body = np.clip(body_r * px_per_unit + 0.5 - d_body * px_per_unit, 0.0, 1.0)
    a_head = np.clip(head_r * px_per_unit + 0.5 - d_head * px_per_unit, 0.0, 1.0)
    both = (d_body < body_r) & (d_head < head_r)
    pick_head = np.where(both, h_head > h_body, a_head > a_body)
    normals = np.where(pick_head[..., None], n_head, n_body)
    alpha = np.maximum(a_body, a_head)
    return alpha, normals


def shade_normals(
    normals: np.ndarray,
    env: EnvMap,
    albedo: np.ndarray,
    specular_strength: float,
    specular_exponent: float,
    chunk: int = 2048,
) -> np.ndarray:
    """Shade unit normals (..., 3) under the envmap, linear radiance out.

    Diffuse term: albedo / pi times the cosine-weighted irradiance.
    Specular term: normalized Blinn-Phong, (p + 2) / (2 pi) *
    max(0, n . h)^p per light direction, masked to the upper hemisphere,
    with the view direction fixed at (0, 0, -1).
    """
    flat = normals.reshape(-1, 3)
    dirs, omega = _texel_geometry(env.h, env.w)
    weighted = env.pixels.reshape(-1, 3).astype(np.float64) * omega[:, None]
    do_spec = specular_strength > 0.0
    if do_spec:
        half = dirs + np.array([0.0, 0.0, -1.0])
        half /= np.linalg.norm(half, axis=1, keepdims=True)
        spec_norm = specular_strength * (specular_exponent + 2.0) / _TWO_PI
    out = np.empty((flat.shape[0], 3))
    for start in range(0, flat.shape[0], chunk):
        block = flat[start : start + chunk]
        cos = np.clip(block @ dirs.T, 0.0, None)
        color = (cos @ weighted) * (np.asarray(albedo, dtype=np.float64) / np.pi)
        if do_spec:
            hcos = np.clip(block @ half.T, 0.0, None)
            lobe = np.power(hcos, specular_exponent) * (cos > 0.0)
            color = color + spec_norm * (lobe @ weighted)
        out[start : start + chunk] = color
    return out.reshape(normals.shape[:-1] + (3,)).astype(np.float32)


def render_subject_linear(
    subject: SubjectSpec, env: EnvMap, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Linear HDR foreground (S, S, 3) and coverage alpha (S, S).

    Only pixels with nonzero alpha are shaded; the rest stay black.
    """
    alpha, normals = subject_fields(subject, size)
    color = np.zeros((size, size, 3), dtype=np.float32)
    covered = alpha > 0.0
    if covered.any():
        color[covered] = shade_normals(
            normals[covered],
            env,
            np.asarray(subject.albedo),
            subject.specular_strength,
            subject.specular_exponent,
        )
    return color, alpha.astype(np.float32)


def render_subject(
    subject: SubjectSpec, env: EnvMap, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """LDR foreground in [0, 1] plus coverage alpha."""
    color, alpha = render_subject_linear(subject, env, size)
    return tonemap_ldr(color), alpha


def random_subject(
    rng: np.random.Generator,
    allow_specular: bool = True,
    kinds: tuple[str, ...] = SUBJECT_KINDS,
) -> SubjectSpec:
    kind = kinds[rng.integers(len(kinds))]
    radius = float(rng.uniform(0.3, 0.5))
    if kind == "bust":
        radius = float(rng.uniform(0.28, 0.42))
    half_length = float(rng.uniform(0.15, 0.35))
    head_scale = float(rng.uniform(0.45, 0.65))
    _, _, y_min, y_max = SubjectSpec(
        kind=kind, radius=radius, half_length=half_length, head_scale=head_scale
    ).extents()
    margin_x = 1.0 - radius
    cx = float(rng.uniform(-0.5, 0.5) * margin_x)
    cy = float(rng.uniform(max(-0.95 - y_min, -0.3), min(0.95 - y_max, 0.3)))
    albedo = tuple(float(a) for a in rng.uniform(0.35, 0.95, size=3))
    spec = float(rng.uniform(0.0, 0.35)) if allow_specular and rng.random() < 0.5 else 0.0
    return SubjectSpec(
        kind=kind,
        center=(cx, cy),
        radius=radius,
        half_length=half_length,
        head_scale=head_scale,
        albedo=albedo,
        specular_strength=spec,
        specular_exponent=float(rng.uniform(16.0, 64.0)),
    )


def envmap_from_params(params: dict, height: int) -> EnvMap:
    """Build a panorama from blob parameters; inverse of random_envmap.

    Each blob is a smooth directional lobe exp((d . mu - 1) / sigma^2)
    scaled by an RGB intensity, on top of constant ambient light.
    """
    w = 2 * height
    dirs, _ = _texel_geometry(height, w)
    pixels = np.zeros((height * w, 3))
    pixels += np.asarray(params["ambient"], dtype=np.float64)
    for blob in params["blobs"]:
        mu = np.asarray(blob["dir"], dtype=np.float64)
        sigma = float(blob["sigma"])
        lobe = np.exp((dirs @ mu - 1.0) / (sigma * sigma))
        pixels += lobe[:, None] * np.asarray(blob["color"], dtype=np.float64)
    return EnvMap(pixels.reshape(height, w, 3).astype(np.float32))


def random_envmap_params(
    rng: np.random.Generator, min_blobs: int = 1, max_blobs: int = 3
) -> dict:
    """Parameters for 1-3 Gaussian blobs plus ambient light.

    Blob directions avoid the poles so a rotated lobe always moves, and
    intensities are strong enough relative to ambient that the lit side of
    a subject is unambiguous.
    """
    n_blobs = int(rng.integers(min_blobs, max_blobs + 1))
    blobs = []
    for _ in range(n_blobs):
        phi = float(rng.uniform(0.0, _TWO_PI))
        theta = float(rng.uniform(0.3 * np.pi, 0.7 * np.pi))
        mu = (
            math.sin(theta) * math.sin(phi),
            math.cos(theta),
            math.sin(theta) * math.cos(phi),
        )
        scale = float(rng.uniform(2.0, 6.0))
        tint = rng.uniform(0.6, 1.0, size=3)
        blobs.append(
            {
                "dir": [round(c, 8) for c in mu],
                "sigma": round(float(rng.uniform(0.35, 0.8)), 8),
                "color": [round(float(scale * t), 8) for t in tint],
            }
        )
    ambient = rng.uniform(0.05, 0.25, size=3)
    return {"blobs": blobs, "ambient": [round(float(a), 8) for a in ambient]}


def random_envmap(rng: np.random.Generator, height: int) -> tuple[EnvMap, dict]:
    params = random_envmap_params(rng)
    return envmap_from_params(params, height), params


@dataclass
class RenderedTuple:
    """A relit pair before quantization; arrays are float32 in [0, 1]."""

    x_a: np.ndarray
    mask: np.ndarray
    y_b: np.ndarray
    x_b: np.ndarray
    z_thumb: np.ndarray
    env_b: EnvMap
    meta: dict = field(default_factory=dict)


def render_tuple(
    subject: SubjectSpec,
    env_a: EnvMap,
    env_b: EnvMap,
    crop_b: CropSpec,
    size: int,
    seed: int = 0,
) -> RenderedTuple:
    """Render one training tuple.

    The input x_a is the fully source-lit composite: subject lit by
    ``env_a`` over the projection of ``env_a`` (the input carries source
    lighting context). The target x_b lights the subject by ``env_b``
    over the target background y_b, so x_b equals y_b exactly where the
    mask is zero, and when the two environments coincide x_a equals x_b
    bit for bit.
    """
    fg_a, alpha = render_subject_linear(subject, env_a, size)
    fg_b, _ = render_subject_linear(subject, env_b, size)
    # Composite with the mask as it will be persisted (8-bit), so the
    # background region of the quantized target equals y_b byte for byte.
    alpha = imgio.from_uint8(imgio.to_uint8(alpha))
    y_a = tonemap_ldr(project_to_background(env_a, crop_b))
    y_b = tonemap_ldr(project_to_background(env_b, crop_b))
    x_a = imgio.composite(tonemap_ldr(fg_a), alpha, y_a)
    x_b = imgio.composite(tonemap_ldr(fg_b), alpha, y_b)
    z_thumb = imgio.resize_image(tonemap_ldr(env_b.pixels), size)
    meta = {
        "subject": json.loads(subject.to_json()),
        "fov_deg": crop_b.fov_deg,
        "yaw": crop_b.yaw,
        "pitch": crop_b.pitch,
        "size": size,
        "seed": seed,
    }
    return RenderedTuple(
        x_a=x_a,
        mask=alpha,
        y_b=y_b,
        x_b=x_b,
        z_thumb=z_thumb,
        env_b=env_b,
        meta=meta,
    )


@dataclass(frozen=True)
class DataConfig:
    """Knobs for dataset generation."""

    size: int = 32
    env_height: int = 32
    n_subjects: int = 10
    n_envs: int = 20
    fov_min_deg: float = 45.0
    fov_max_deg: float = 75.0
    pitch_max: float = 0.25  # radians either side of the horizon
    allow_specular: bool = True
    paired: bool = True  # False renders each tuple under a single env
    kinds: tuple[str, ...] = SUBJECT_KINDS
    min_blobs: int = 1
    max_blobs: int = 3


def build_dataset(
    out_dir: str | Path,
    n_tuples: int,
    seed: int,
    config: DataConfig | None = None,
) -> list[dataset.TupleRecord]:
    """Generate a dataset directory; same seed means identical bytes.

    Subjects and envmap parameters are drawn first, then each tuple picks
    a subject, two distinct environments (or one when ``config.paired`` is
    False), independent panorama rotations, and a crop. Writes per-tuple
    PNGs, the rotated target panorama, ``manifest.tsv``, and ``envs.tsv``
    with the blob parameters of every environment.
    """
    config = config or DataConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))

    subjects = [
        random_subject(rng, config.allow_specular, tuple(config.kinds))
        for _ in range(config.n_subjects)
    ]
    env_params = [
        random_envmap_params(rng, config.min_blobs, config.max_blobs)
        for _ in range(config.n_envs)
    ]
    envs = [envmap_from_params(p, config.env_height) for p in env_params]

    env_lines = ["env_id\tparams"]
    env_lines += [
        f"{i}\t{json.dumps(p, separators=(',', ':'), sort_keys=True)}"
        for i, p in enumerate(env_params)
    ]
    (out / "envs.tsv").write_text("\n".join(env_lines) + "\n")

    records: list[dataset.TupleRecord] = []
    for k in range(n_tuples):
        sub_idx = int(rng.integers(config.n_subjects))
        a = int(rng.integers(config.n_envs))
        if config.paired and config.n_envs > 1:
            b = int(rng.integers(config.n_envs - 1))
            if b >= a:
                b += 1
        else:
            b = a
        rot_a = float(rng.uniform(0.0, _TWO_PI))
        rot_b = rot_a if (not config.paired and b == a) else float(rng.uniform(0.0, _TWO_PI))
        fov = float(rng.uniform(config.fov_min_deg, config.fov_max_deg))
        pitch = float(rng.uniform(-config.pitch_max, config.pitch_max))
        crop = CropSpec(
            fov_deg=fov, yaw=0.0, pitch=pitch, out_w=config.size, out_h=config.size
        )
        env_a = rotate_envmap(envs[a], rot_a)
        env_b = env_a if (b == a and rot_b == rot_a) else rotate_envmap(envs[b], rot_b)
        tup = render_tuple(subjects[sub_idx], env_a, env_b, crop, config.size, seed=k)

        tid = f"{k:06d}"
        names = {
            "x_a": f"{tid}_xa.png",
            "mask": f"{tid}_m.png",
            "y_b": f"{tid}_yb.png",
            "x_b": f"{tid}_xb.png",
            "z_thumb": f"{tid}_zb.png",
            "z_env": f"{tid}_zb.envm",
        }
        imgio.save_image(tup.x_a, out / names["x_a"])
        imgio.save_image(tup.mask, out / names["mask"])
        imgio.save_image(tup.y_b, out / names["y_b"])
        imgio.save_image(tup.x_b, out / names["x_b"])
        imgio.save_image(tup.z_thumb, out / names["z_thumb"])
        save_envmap(env_b, out / names["z_env"])
        records.append(
            dataset.TupleRecord(
                id=tid,
                subject_id=sub_idx,
                subject=json.loads(subjects[sub_idx].to_json()),
                env_a=a,
                env_b=b,
                rot_a=rot_a,
                rot_b=rot_b,
                fov_deg=fov,
                yaw=0.0,
                pitch=pitch,
                size=config.size,
                seed=k,
                provenance="",
                **names,
            )
        )
    dataset.write_manifest(out, records)
    return records


def rerender_target(root: str | Path, record: dataset.TupleRecord) -> np.ndarray:
    """Re-render the quantized target image from stored metadata.

    Uses the persisted panorama (already rotated) plus the subject and
    crop stored in the manifest; the result matches the saved target PNG
    byte for byte.
    """
    env_b = dataset.load_tuple_env(root, record)
    subject = SubjectSpec.from_json(record.subject)
    crop = CropSpec(
        fov_deg=record.fov_deg,
        yaw=record.yaw,
        pitch=record.pitch,
        out_w=record.size,
        out_h=record.size,
    )
    fg_b, alpha = render_subject_linear(subject, env_b, record.size)
    alpha = imgio.from_uint8(imgio.to_uint8(alpha))
    y_b = tonemap_ldr(project_to_background(env_b, crop))
    x_b = imgio.composite(tonemap_ldr(fg_b), alpha, y_b)
    return imgio.to_uint8(x_b)

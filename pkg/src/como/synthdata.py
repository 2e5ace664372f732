"""Synthetic moving-shape videos with analytic motion ground truth.

A scene is a background plus one or more subjects, each a flat-colored glyph
(disc, square, triangle) driven by a closed-form motion program.  The
renderer rasterises at 4x4 subpixel resolution and returns the exact
per-frame centroid of every subject, so downstream tracking and similarity
code can be checked against ground truth instead of against itself.

Trajectories are pure functions of the motion program; the scene seed only
feeds optional texture noise.  Coordinates are (h, w) pixels with pixel
centers at integer positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .tensors import check_pixel_video

SHAPE_KINDS = ("disc", "square", "triangle")
MOTION_KINDS = ("sweep", "bounce", "orbit", "zigzag", "spin")

# Token vocabulary shared by the corpus builders and the CLI.  Ids must stay
# below the denoiser vocab size (64).  Slots 40..47 are reserved for custom
# motions that never appear in pretraining data.
NULL_TOKEN = 0
SHAPE_TOKENS = {"disc": 1, "square": 2, "triangle": 3}
COLOR_TOKENS = {"red": 4, "green": 5, "blue": 6, "yellow": 7, "magenta": 8, "cyan": 9}
MOTION_TOKENS = {"sweep": 10, "bounce": 11, "orbit": 12, "zigzag": 13, "spin": 14}
CUSTOM_MOTION_TOKENS = (40, 41, 42, 43, 44, 45, 46, 47)

PALETTE = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.88, 0.82, 0.10),
    "magenta": (0.80, 0.15, 0.75),
    "cyan": (0.10, 0.78, 0.80),
}
DEFAULT_BG = (0.05, 0.05, 0.08)

VAE_FACTOR = 4  # pixel-to-latent downscale of the stub codec


@dataclass(frozen=True)
class AppearanceSpec:
    """Static identity of a subject: glyph kind, fill color, size in pixels."""

    shape_kind: str
    color: tuple[float, float, float]
    size_px: float

    def validate(self) -> None:
        if self.shape_kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {self.shape_kind!r}, expected one of {SHAPE_KINDS}")
        if len(self.color) != 3 or any(not (0.0 <= float(c) <= 1.0) for c in self.color):
            raise ConfigError(f"color must be 3 values in [0, 1], got {self.color!r}")
        if self.size_px <= 1.0:
            raise ConfigError(f"size_px must exceed 1 pixel, got {self.size_px}")


@dataclass(frozen=True)
class MotionProgram:
    """Closed-form trajectory parameters.

    Parameter keys by kind (all positions/velocities in pixels, (h, w) order):
      sweep:  start_h, start_w, vel_h, vel_w
      bounce: center_h, center_w, amplitude, period, axis ("h" or "w")
      orbit:  center_h, center_w, radius, period
      zigzag: start_h, start_w, vel_h, vel_w, amplitude, period
      spin:   center_h, center_w, period   (centroid stays fixed, glyph rotates)
    """

    kind: str
    params: dict = field(default_factory=dict)
    phase: float = 0.0

    def validate(self) -> None:
        if self.kind not in MOTION_KINDS:
            raise ConfigError(f"unknown motion kind {self.kind!r}, expected one of {MOTION_KINDS}")
        required = {
            "sweep": ("start_h", "start_w", "vel_h", "vel_w"),
            "bounce": ("center_h", "center_w", "amplitude", "period"),
            "orbit": ("center_h", "center_w", "radius", "period"),
            "zigzag": ("start_h", "start_w", "vel_h", "vel_w", "amplitude", "period"),
            "spin": ("center_h", "center_w", "period"),
        }[self.kind]
        missing = [k for k in required if k not in self.params]
        if missing:
            raise ConfigError(f"motion {self.kind!r} missing params {missing}")
        if "period" in self.params and float(self.params["period"]) <= 0:
            raise ConfigError("motion period must be positive")


@dataclass(frozen=True)
class Subject:
    appearance: AppearanceSpec
    motion: MotionProgram


@dataclass
class SceneSpec:
    """Everything needed to render one deterministic clip."""

    subjects: list[Subject]
    frames: int
    height: int
    width: int
    bg_color: tuple[float, float, float] = DEFAULT_BG
    seed: int = 0
    texture_noise: float = 0.0
    name: str = ""

    def validate(self) -> None:
        if not self.subjects:
            raise ConfigError("scene needs at least one subject")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"frame size too small: {self.height}x{self.width}")
        for sub in self.subjects:
            sub.appearance.validate()
            sub.motion.validate()
        if not (0.0 <= self.texture_noise <= 0.5):
            raise ConfigError(f"texture_noise must be in [0, 0.5], got {self.texture_noise}")


@dataclass
class RenderedScene:
    video: np.ndarray            # [F, H, W, 3] float32
    centroids: np.ndarray        # [n_subjects, F, 2] float64 analytic ground truth
    warnings: list[str]
    spec: SceneSpec              # spec actually rendered (after parameter clamping)


def _tri(u: np.ndarray) -> np.ndarray:
    # Triangle wave shaped like sine: _tri(0)=0, _tri(0.25)=1, _tri(0.75)=-1.
    u = np.mod(u, 1.0)
    out = np.where(u < 0.25, 4.0 * u, np.where(u < 0.75, 2.0 - 4.0 * u, 4.0 * u - 4.0))
    return out


def trajectory(motion: MotionProgram, frames: int) -> np.ndarray:
    """Exact per-frame (h, w) centroid positions, shape [frames, 2], float64."""
    motion.validate()
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    k = np.arange(frames, dtype=np.float64)
    p = {key: float(v) for key, v in motion.params.items() if key != "axis"}
    phase = float(motion.phase)
    if motion.kind == "sweep":
        h = p["start_h"] + k * p["vel_h"]
        w = p["start_w"] + k * p["vel_w"]
    elif motion.kind == "bounce":
        axis = str(motion.params.get("axis", "h"))
        if axis not in ("h", "w"):
            raise ConfigError(f"bounce axis must be 'h' or 'w', got {axis!r}")
        osc = p["amplitude"] * _tri(k / p["period"] + phase)
        h = np.full_like(k, p["center_h"])
        w = np.full_like(k, p["center_w"])
        if axis == "h":
            h = h + osc
        else:
            w = w + osc
    elif motion.kind == "orbit":
        ang = 2.0 * math.pi * (k / p["period"] + phase)
        h = p["center_h"] - p["radius"] * np.cos(ang)
        w = p["center_w"] + p["radius"] * np.sin(ang)
    elif motion.kind == "zigzag":
        vel = np.array([p["vel_h"], p["vel_w"]], dtype=np.float64)
        speed = float(np.hypot(*vel))
        perp = np.array([0.0, 1.0]) if speed == 0.0 else np.array([-vel[1], vel[0]]) / speed
        osc = p["amplitude"] * _tri(k / p["period"] + phase)
        h = p["start_h"] + k * vel[0] + osc * perp[0]
        w = p["start_w"] + k * vel[1] + osc * perp[1]
    elif motion.kind == "spin":
        h = np.full_like(k, p["center_h"])
        w = np.full_like(k, p["center_w"])
    else:  # pragma: no cover - validate() already rejected it
        raise ConfigError(f"unknown motion kind {motion.kind!r}")
    return np.stack([h, w], axis=1)


def _glyph_angles(motion: MotionProgram, frames: int) -> np.ndarray:
    if motion.kind == "spin":
        k = np.arange(frames, dtype=np.float64)
        return 2.0 * math.pi * (k / float(motion.params["period"]) + float(motion.phase))
    return np.zeros(frames, dtype=np.float64)


# Scalable parameter names per motion kind, used when a trajectory would
# leave the frame and must be shrunk toward its anchor.
_SCALABLE = {
    "sweep": ("vel_h", "vel_w"),
    "bounce": ("amplitude",),
    "orbit": ("radius",),
    "zigzag": ("vel_h", "vel_w", "amplitude"),
    "spin": (),
}
_ANCHORS = {
    "sweep": ("start_h", "start_w"),
    "bounce": ("center_h", "center_w"),
    "orbit": ("center_h", "center_w"),
    "zigzag": ("start_h", "start_w"),
    "spin": ("center_h", "center_w"),
}


def clamp_motion(
    motion: MotionProgram, frames: int, height: int, width: int, size_px: float
) -> tuple[MotionProgram, list[str]]:
    """Shrink motion parameters until the glyph stays fully inside the frame.

    The anchor (start/center) is moved into the admissible interior first,
    then scalable parameters (velocity, amplitude, radius) are scaled down by
    0.85 per round until every frame fits.  Deterministic; returns the
    adjusted program plus human-readable warnings for the dataset manifest.
    """
    motion.validate()
    margin = size_px / 2.0 + 1.0
    lo_h, hi_h = margin, height - 1 - margin
    lo_w, hi_w = margin, width - 1 - margin
    if lo_h > hi_h or lo_w > hi_w:
        raise ConfigError(
            f"subject of size {size_px} cannot fit a {height}x{width} frame"
        )

    warnings: list[str] = []
    params = dict(motion.params)
    anchor_h, anchor_w = _ANCHORS[motion.kind]
    for key, lo, hi in ((anchor_h, lo_h, hi_h), (anchor_w, lo_w, hi_w)):
        val = float(params[key])
        clamped = min(max(val, lo), hi)
        if clamped != val:
            warnings.append(f"{motion.kind}: {key} moved from {val} to {clamped} to fit frame")
            params[key] = clamped

    adjusted = replace(motion, params=params)
    scalable = _SCALABLE[motion.kind]
    factor = 1.0
    for _ in range(60):
        traj = trajectory(adjusted, frames)
        inside = (
            traj[:, 0].min() >= lo_h
            and traj[:, 0].max() <= hi_h
            and traj[:, 1].min() >= lo_w
            and traj[:, 1].max() <= hi_w
        )
        if inside:
            break
        if not scalable:
            raise ConfigError(
                f"motion {motion.kind!r} leaves the frame and has no scalable parameters"
            )
        factor *= 0.85
        shrunk = dict(adjusted.params)
        for key in scalable:
            shrunk[key] = float(params[key]) * factor
        adjusted = replace(adjusted, params=shrunk)
    else:
        raise ConfigError(f"could not clamp motion {motion.kind!r} into a {height}x{width} frame")
    if factor != 1.0:
        warnings.append(
            f"{motion.kind}: scaled {', '.join(scalable)} by {factor:.4f} to keep subject in frame"
        )
    return adjusted, warnings


def _triangle_vertices(radius: float) -> np.ndarray:
    # Vertices chosen so the polygon centroid sits exactly at the origin
    # (mask centroid must match the analytic trajectory).
    s3 = math.sqrt(3.0) / 2.0
    return np.array(
        [[-radius, 0.0], [radius / 2.0, -radius * s3], [radius / 2.0, radius * s3]],
        dtype=np.float64,
    )


def _coverage(
    shape_kind: str,
    center: np.ndarray,
    size_px: float,
    angle: float,
    height: int,
    width: int,
) -> np.ndarray:
    """Fractional pixel coverage of one glyph, [H, W] float32, via 4x4 subsampling."""
    ss = 4
    hh = (np.arange(height * ss, dtype=np.float64) + 0.5) / ss - 0.5
    ww = (np.arange(width * ss, dtype=np.float64) + 0.5) / ss - 0.5
    dh = hh[:, None] - float(center[0])
    dw = ww[None, :] - float(center[1])
    if angle != 0.0:
        c, s = math.cos(angle), math.sin(angle)
        rh = c * dh + s * dw
        rw = -s * dh + c * dw
    else:
        rh, rw = dh + 0.0 * dw, dw + 0.0 * dh  # broadcast both to [H*ss, W*ss]
    radius = size_px / 2.0
    if shape_kind == "disc":
        mask = (rh * rh + rw * rw) <= radius * radius
    elif shape_kind == "square":
        mask = (np.abs(rh) <= radius) & (np.abs(rw) <= radius)
    elif shape_kind == "triangle":
        verts = _triangle_vertices(radius)
        mask = np.ones(rh.shape, dtype=bool)
        for i in range(3):
            a, b = verts[i], verts[(i + 1) % 3]
            eh, ew = b[0] - a[0], b[1] - a[1]
            cross = eh * (rw - a[1]) - ew * (rh - a[0])
            mask &= cross >= 0.0
    else:
        raise ConfigError(f"unknown shape kind {shape_kind!r}")
    cov = mask.reshape(height, ss, width, ss).mean(axis=(1, 3))
    return cov.astype(np.float32)


def render_video(spec: SceneSpec) -> RenderedScene:
    """Render a scene, returning the clip, ground-truth centroids, warnings.

    Motion programs are clamped to keep glyphs inside the frame; any
    adjustment is reported in ``warnings`` and reflected in the returned
    spec.  Changing ``seed`` changes only texture noise, never trajectories.
    """
    spec.validate()
    warnings: list[str] = []
    subjects = []
    for sub in spec.subjects:
        motion, warns = clamp_motion(
            sub.motion, spec.frames, spec.height, spec.width, sub.appearance.size_px
        )
        warnings.extend(warns)
        subjects.append(Subject(sub.appearance, motion))
    clamped = replace(spec, subjects=subjects)

    video = np.empty((spec.frames, spec.height, spec.width, 3), dtype=np.float32)
    video[:] = np.asarray(clamped.bg_color, dtype=np.float32)
    centroids = np.empty((len(subjects), spec.frames, 2), dtype=np.float64)
    for si, sub in enumerate(subjects):
        traj = trajectory(sub.motion, spec.frames)
        angles = _glyph_angles(sub.motion, spec.frames)
        centroids[si] = traj
        color = np.asarray(sub.appearance.color, dtype=np.float32)
        for f in range(spec.frames):
            cov = _coverage(
                sub.appearance.shape_kind,
                traj[f],
                sub.appearance.size_px,
                float(angles[f]),
                spec.height,
                spec.width,
            )[..., None]
            video[f] = video[f] * (1.0 - cov) + color * cov

    if clamped.texture_noise > 0.0:
        rng = np.random.Generator(np.random.PCG64(clamped.seed))
        noise = rng.uniform(-1.0, 1.0, size=video.shape).astype(np.float32)
        video = np.clip(video + clamped.texture_noise * noise, 0.0, 1.0)
    return RenderedScene(video=video, centroids=centroids, warnings=warnings, spec=clamped)


# ---------------------------------------------------------------------------
# Stub codec: 4x4 block means down, nearest-neighbour up.  No temporal
# compression, 3 latent channels.  encode(decode(z)) == z exactly because
# the mean of a constant 4x4 block is that constant.
# ---------------------------------------------------------------------------


def _halve(x: np.ndarray, axis: int) -> np.ndarray:
    # Pairwise average along an even-length axis.  Averaging by repeated
    # halving keeps constant blocks exact in float32, which makes
    # encode(decode(z)) == z hold bit for bit.
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, None, 2)
    hi[axis] = slice(1, None, 2)
    return (x[tuple(lo)] + x[tuple(hi)]) * np.float32(0.5)


def encode_stub(video: np.ndarray) -> np.ndarray:
    """Pixel video [F, H, W, 3] -> latent [3, F, H/4, W/4] (4x4 block means)."""
    check_pixel_video(video)
    frames, height, width, _ = video.shape
    if frames < 1:
        raise ConfigError("cannot encode an empty video")
    if height % VAE_FACTOR or width % VAE_FACTOR:
        raise ConfigError(
            f"frame size {height}x{width} must be divisible by {VAE_FACTOR}"
        )
    latent = video
    for axis in (1, 2):
        latent = _halve(_halve(latent, axis), axis)
    return np.ascontiguousarray(latent.transpose(3, 0, 1, 2))


def decode_stub(latent: np.ndarray) -> np.ndarray:
    """Latent [3, F, h, w] -> pixel video [F, 4h, 4w, 3], clamped to [0, 1]."""
    if latent.ndim != 4 or latent.shape[0] != 3:
        raise ConfigError(f"latent must be [3, F, h, w], got {latent.shape}")
    up = np.repeat(np.repeat(latent, VAE_FACTOR, axis=2), VAE_FACTOR, axis=3)
    video = np.clip(up.transpose(1, 2, 3, 0), 0.0, 1.0)
    return np.ascontiguousarray(video.astype(np.float32))


MODEL_SPACE_GAIN = 4.0
MODEL_SPACE_CENTER = 0.5


def to_model_space(latent: np.ndarray) -> np.ndarray:
    """Affine gain applied to codec latents before flow matching.

    Raw codec latents are pixel block means in [0, 1], far smaller than the
    unit-variance flow noise; training and sampling run on
    (z - 0.5) * 4 so the subject signal is comparable to the noise scale.
    """
    return ((latent - np.float32(MODEL_SPACE_CENTER)) * np.float32(MODEL_SPACE_GAIN)).astype(np.float32)


def from_model_space(latent: np.ndarray) -> np.ndarray:
    """Inverse of ``to_model_space`` (values may leave [0, 1]; decode clamps)."""
    return (latent * np.float32(1.0 / MODEL_SPACE_GAIN) + np.float32(MODEL_SPACE_CENTER)).astype(np.float32)


def frame_latents(video: np.ndarray) -> list[np.ndarray]:
    """Per-frame latents, each [3, 1, H/4, W/4], for static-phase training."""
    check_pixel_video(video)
    if video.shape[0] < 1:
        raise ConfigError("cannot encode an empty video")
    return [encode_stub(video[f : f + 1]) for f in range(video.shape[0])]


# ---------------------------------------------------------------------------
# JSON (de)serialisation for scene manifests
# ---------------------------------------------------------------------------


def _color_value(v) -> tuple[float, float, float]:
    if isinstance(v, str):
        if v not in PALETTE:
            raise ConfigError(f"unknown palette color {v!r}, expected one of {sorted(PALETTE)}")
        return PALETTE[v]
    if isinstance(v, Sequence) and len(v) == 3:
        return (float(v[0]), float(v[1]), float(v[2]))
    raise ConfigError(f"color must be a palette name or [r, g, b], got {v!r}")


def scene_from_dict(d: dict) -> SceneSpec:
    """Parse one scene entry of a dataset manifest.  Raises ConfigError."""
    try:
        subjects = []
        for sd in d["subjects"]:
            app = AppearanceSpec(
                shape_kind=sd["shape"],
                color=_color_value(sd["color"]),
                size_px=float(sd["size"]),
            )
            md = sd["motion"]
            motion = MotionProgram(
                kind=md["kind"],
                params={k: v for k, v in md.items() if k not in ("kind", "phase")},
                phase=float(md.get("phase", 0.0)),
            )
            subjects.append(Subject(app, motion))
        spec = SceneSpec(
            subjects=subjects,
            frames=int(d["frames"]),
            height=int(d["height"]),
            width=int(d["width"]),
            bg_color=_color_value(d.get("bg_color", list(DEFAULT_BG))),
            seed=int(d.get("seed", 0)),
            texture_noise=float(d.get("texture_noise", 0.0)),
            name=str(d.get("name", "")),
        )
    except KeyError as exc:
        raise ConfigError(f"scene entry missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scene entry: {exc}") from exc
    spec.validate()
    return spec


def scene_to_dict(spec: SceneSpec) -> dict:
    return {
        "name": spec.name,
        "frames": spec.frames,
        "height": spec.height,
        "width": spec.width,
        "bg_color": [float(c) for c in spec.bg_color],
        "seed": spec.seed,
        "texture_noise": spec.texture_noise,
        "subjects": [
            {
                "shape": sub.appearance.shape_kind,
                "color": [float(c) for c in sub.appearance.color],
                "size": sub.appearance.size_px,
                "motion": {
                    "kind": sub.motion.kind,
                    "phase": sub.motion.phase,
                    **{k: sub.motion.params[k] for k in sorted(sub.motion.params)},
                },
            }
            for sub in spec.subjects
        ],
    }

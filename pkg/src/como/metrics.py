"""Motion tracking and the crop-and-compare multi-motion fidelity score.

Tracking is deliberately simple and fully deterministic: the background of
a clip is the per-pixel temporal median, foreground is whatever deviates
from it, and the subject position is the deviation-weighted centroid of
the foreground.  Weighting by deviation keeps sub-pixel accuracy at
anti-aliased edges where a binary mask would drift.  Motion similarity
compares displacement sequences resampled to a fixed length, mapped into
[0, 1] via (1 + cosine) / 2.

Crop-and-compare: given a composed clip and the per-region boxes it was
generated with, each crop is compared against every reference motion.  The
resulting similarity matrix should match the matrix of the references
against themselves; the score is 1 - ||S_cc - S_gt||_F / N, so identical
matrices give 1 and each unit of Frobenius deviation costs 1/N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .synthdata import VAE_FACTOR
from .tensors import check_pixel_video

FG_THRESHOLD = 0.15   # channel-summed absolute deviation from the median
RESAMPLE_LEN = 32     # displacement samples per coordinate after resampling
POOL = 8              # block size of the consistency stub features


def extract_tracklet(video: np.ndarray, box=None) -> np.ndarray:
    """Per-frame (h, w) centroid of the moving foreground, [F, 2] float64.

    Background is the per-pixel temporal median; a pixel is foreground in a
    frame when its channel-summed absolute deviation from the background
    exceeds FG_THRESHOLD.  The centroid weights each foreground pixel by its
    deviation, so partially covered anti-aliased edge pixels pull exactly in
    proportion to their coverage.  Frames with an empty mask carry the
    previous centroid forward (frame 0 falls back to the frame center).

    ``box`` optionally restricts tracking to (h0, w0, height, width) in
    pixels; returned coordinates stay in full-frame units.
    """
    check_pixel_video(video)
    off_h = off_w = 0
    if box is not None:
        h0, w0, bh, bw = (int(v) for v in box)
        if h0 < 0 or w0 < 0 or bh < 1 or bw < 1 \
                or h0 + bh > video.shape[1] or w0 + bw > video.shape[2]:
            raise ConfigError(f"crop box {box} exceeds video frame {video.shape[1:3]}")
        video = video[:, h0 : h0 + bh, w0 : w0 + bw]
        off_h, off_w = h0, w0
    frames, height, width, _ = video.shape
    bg = np.median(video, axis=0)
    dev = np.abs(video.astype(np.float64) - bg).sum(axis=-1)  # [F, H, W]
    track = np.empty((frames, 2), dtype=np.float64)
    prev = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    h_coords = np.arange(height, dtype=np.float64)
    w_coords = np.arange(width, dtype=np.float64)
    for f in range(frames):
        fg = np.where(dev[f] > FG_THRESHOLD, dev[f], 0.0)
        total = fg.sum()
        if total > 0.0:
            prev = np.array([fg.sum(axis=1) @ h_coords / total,
                             fg.sum(axis=0) @ w_coords / total])
        track[f] = prev
    track[:, 0] += off_h
    track[:, 1] += off_w
    return track


def displacements(track: np.ndarray) -> np.ndarray:
    if track.ndim != 2 or track.shape[1] != 2 or track.shape[0] < 2:
        raise ConfigError(f"track must be [F >= 2, 2], got {getattr(track, 'shape', None)}")
    return np.diff(track.astype(np.float64), axis=0)


def _signature(track: np.ndarray) -> np.ndarray:
    """Displacements resampled to RESAMPLE_LEN per coordinate, concatenated."""
    d = displacements(track)
    n = d.shape[0]
    src = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    dst = np.linspace(0.0, 1.0, RESAMPLE_LEN)
    cols = [np.interp(dst, src, d[:, c]) for c in range(2)]
    return np.concatenate(cols)


def motion_similarity(track_a: np.ndarray, track_b: np.ndarray) -> float:
    """Similarity of two position tracks in [0, 1] via displacement cosine.

    Length-independent: displacement sequences are linearly resampled to a
    common length first.  Two motionless tracks score 1; a motionless track
    against a moving one scores 0.5 (the cosine midpoint).
    """
    sa = _signature(track_a)
    sb = _signature(track_b)
    na = float(np.linalg.norm(sa))
    nb = float(np.linalg.norm(sb))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.5
    cos = float(sa @ sb) / (na * nb)
    return float(np.clip((1.0 + cos) / 2.0, 0.0, 1.0))


def motion_fidelity(gen_video: np.ndarray, ref_videos: list) -> float:
    """Mean motion similarity of one clip against reference clips."""
    if not ref_videos:
        raise ConfigError("motion_fidelity needs at least one reference video")
    track = extract_tracklet(gen_video)
    sims = [motion_similarity(track, extract_tracklet(ref)) for ref in ref_videos]
    return float(np.mean(sims))


def _region_tuple(region) -> tuple[int, int, int, int]:
    if hasattr(region, "h0"):
        return int(region.h0), int(region.w0), int(region.height), int(region.width)
    h0, w0, h, w = (int(v) for v in region)
    return h0, w0, h, w


def crop_clips(video: np.ndarray, regions, vae_factor: int = VAE_FACTOR) -> list[np.ndarray]:
    """Cut per-region pixel clips out of a composed video.

    Regions are in latent units and are scaled up by ``vae_factor``.
    """
    check_pixel_video(video)
    if not regions:
        raise ConfigError("crop_clips needs at least one region")
    out = []
    for region in regions:
        h0, w0, h, w = (v * vae_factor for v in _region_tuple(region))
        if h0 + h > video.shape[1] or w0 + w > video.shape[2]:
            raise ConfigError(
                f"region {region} scaled by {vae_factor} exceeds video frame "
                f"{video.shape[1:3]}"
            )
        out.append(np.ascontiguousarray(video[:, h0 : h0 + h, w0 : w0 + w]))
    return out


def cc_matrices(crops: list, refs: list) -> tuple[np.ndarray, np.ndarray]:
    """Crop-vs-reference and reference-vs-reference similarity matrices.

    S_cc[i, j] compares crop i against reference j; S_gt[i, j] compares the
    references among themselves.  Both are [N, N] float64.
    """
    n = len(refs)
    if n < 1 or len(crops) != n:
        raise ConfigError(f"need equally many crops and references, got {len(crops)} and {n}")
    crop_tracks = [extract_tracklet(c) for c in crops]
    ref_tracks = [extract_tracklet(r) for r in refs]
    s_cc = np.empty((n, n), dtype=np.float64)
    s_gt = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            s_cc[i, j] = motion_similarity(crop_tracks[i], ref_tracks[j])
            s_gt[i, j] = motion_similarity(ref_tracks[i], ref_tracks[j])
    return s_cc, s_gt


def cc_score(s_cc: np.ndarray, s_gt: np.ndarray) -> float:
    """1 - ||S_cc - S_gt||_F / N.  Identical matrices score exactly 1."""
    s_cc = np.asarray(s_cc, dtype=np.float64)
    s_gt = np.asarray(s_gt, dtype=np.float64)
    if s_cc.shape != s_gt.shape or s_cc.ndim != 2 or s_cc.shape[0] != s_cc.shape[1]:
        raise ConfigError(f"need matching square matrices, got {s_cc.shape} and {s_gt.shape}")
    for name, m in (("S_cc", s_cc), ("S_gt", s_gt)):
        if m.size and (float(m.min()) < 0.0 or float(m.max()) > 1.0):
            raise ConfigError(f"{name} entries must lie in [0, 1]")
    n = s_cc.shape[0]
    if n == 0:
        raise ConfigError("matrices must be non-empty")
    return 1.0 - float(np.linalg.norm(s_cc - s_gt)) / n


def temporal_consistency_stub(video: np.ndarray) -> float:
    """Placeholder smoothness score: mean cosine of pooled consecutive frames.

    Frames are centered to [-1, 1] (2v - 1), average-pooled in 8x8 blocks,
    flattened, and consecutive pairs compared by (1 + cosine) / 2.  A clip
    of identical frames scores 1; a frame followed by its negation scores 0.
    Stands in for a learned perceptual metric; not part of the core score.
    """
    check_pixel_video(video)
    frames, height, width, _ = video.shape
    if frames < 2:
        raise ConfigError("temporal consistency needs at least 2 frames")
    hc, wc = height - height % POOL, width - width % POOL
    if hc < POOL or wc < POOL:
        raise ConfigError(f"frames too small to pool: {height}x{width}")
    v = 2.0 * video[:, :hc, :wc, :].astype(np.float64) - 1.0
    feats = v.reshape(frames, hc // POOL, POOL, wc // POOL, POOL, 3).mean(axis=(2, 4))
    feats = feats.reshape(frames, -1)
    sims = []
    for f in range(frames - 1):
        na = float(np.linalg.norm(feats[f]))
        nb = float(np.linalg.norm(feats[f + 1]))
        if na == 0.0 and nb == 0.0:
            sims.append(1.0)
        elif na == 0.0 or nb == 0.0:
            sims.append(0.5)
        else:
            cos = float(feats[f] @ feats[f + 1]) / (na * nb)
            sims.append(float(np.clip((1.0 + cos) / 2.0, 0.0, 1.0)))
    return float(np.mean(sims))


@dataclass
class CCReport:
    """Serialisable crop-and-compare evaluation result."""

    cc: float
    s_cc: list
    s_gt: list
    regions: list
    fg_threshold: float = FG_THRESHOLD
    resample_len: int = RESAMPLE_LEN
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "crop_and_compare",
            "cc_score": self.cc,
            "s_cc": self.s_cc,
            "s_gt": self.s_gt,
            "regions": self.regions,
            "fg_threshold": self.fg_threshold,
            "resample_len": self.resample_len,
            **({"extras": self.extras} if self.extras else {}),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_composition(video: np.ndarray, regions, refs: list) -> CCReport:
    """Full crop-and-compare pass: crop, build matrices, score, report."""
    crops = crop_clips(video, regions)
    s_cc, s_gt = cc_matrices(crops, refs)
    return CCReport(
        cc=cc_score(s_cc, s_gt),
        s_cc=s_cc.tolist(),
        s_gt=s_gt.tolist(),
        regions=[list(_region_tuple(r)) for r in regions],
    )

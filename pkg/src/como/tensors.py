"""Dense float32 tensors, the CMT1 container format, and PPM frame export.

Conventions used everywhere in this package:

* tensors are C-contiguous ``numpy.ndarray`` of dtype float32
* video latents are ``[C, F, H, W]`` (channels, frames, latent height, width)
* pixel videos are ``[F, H_px, W_px, 3]`` with values in ``[0, 1]``

CMT1 container layout (all integers little-endian):

    bytes 0..3    magic ``b"CMT1"``
    bytes 4..7    u32 header length ``n``
    bytes 8..8+n  UTF-8 JSON ``{"entries": [{"name", "shape", "offset"}, ...]}``
    remainder     concatenated raw little-endian float32 payloads

``offset`` is the byte offset of an entry inside the payload section.  Entry
order in the header follows insertion order, so a given mapping always
serialises to the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError

MAGIC = b"CMT1"


def as_f32(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


def check_video_latent(x: np.ndarray, name: str = "latent") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ConfigError(f"{name} must be a [C, F, H, W] array, got {getattr(x, 'shape', None)}")
    if x.dtype != np.float32:
        raise ConfigError(f"{name} must be float32, got {x.dtype}")
    return x


def check_pixel_video(x: np.ndarray, name: str = "video") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4 or x.shape[-1] != 3:
        raise ConfigError(f"{name} must be a [F, H, W, 3] array, got {getattr(x, 'shape', None)}")
    if x.dtype != np.float32:
        raise ConfigError(f"{name} must be float32, got {x.dtype}")
    if x.size and (float(x.min()) < 0.0 or float(x.max()) > 1.0):
        raise ConfigError(f"{name} values must lie in [0, 1]")
    return x


def save_container(path, entries) -> None:
    """Write named float32 tensors to ``path`` in CMT1 format.

    ``entries`` is a mapping or an iterable of ``(name, array)`` pairs.
    Arrays are converted to float32.  Names must be non-empty ASCII and
    unique.  The byte output is a pure function of the entries and their
    order.
    """
    if isinstance(entries, Mapping):
        items = list(entries.items())
    else:
        items = list(entries)
    if not items:
        raise ConfigError("container needs at least one entry")

    seen: set[str] = set()
    arrays: list[np.ndarray] = []
    header_entries = []
    offset = 0
    for name, tensor in items:
        if not isinstance(name, str) or not name or not name.isascii():
            raise ConfigError(f"bad entry name {name!r}: need non-empty ASCII")
        if name in seen:
            raise ConfigError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = as_f32(tensor)
        arrays.append(arr)
        header_entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes

    header = json.dumps({"entries": header_entries}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in arrays:
            # numpy arrays on every supported platform are little-endian here;
            # force the byte order anyway so files are portable.
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_container(path) -> dict[str, np.ndarray]:
    """Read a CMT1 file back into an ordered ``{name: float32 array}`` dict."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path}: not a CMT1 file")
    if len(data) < 8:
        raise ConfigError(f"{path}: corrupt container (truncated header length)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise ConfigError(f"{path}: corrupt container (truncated header)")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
        raw_entries = header["entries"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: corrupt container ({exc})") from exc

    payload = data[8 + hlen :]
    out: dict[str, np.ndarray] = {}
    expected_end = 0
    for ent in raw_entries:
        try:
            name = ent["name"]
            shape = tuple(int(s) for s in ent["shape"])
            off = int(ent["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: corrupt container (bad entry {ent!r})") from exc
        if name in out:
            raise ConfigError(f"{path}: corrupt container (duplicate name {name!r})")
        count = 1
        for s in shape:
            if s < 0:
                raise ConfigError(f"{path}: corrupt container (negative dim in {name!r})")
            count *= s
        end = off + count * 4
        if off < 0 or end > len(payload):
            raise ConfigError(
                f"{path}: corrupt container (entry {name!r} wants bytes "
                f"{off}..{end} of a {len(payload)}-byte payload)"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        out[name] = arr.reshape(shape).copy()
        expected_end = max(expected_end, end)
    if expected_end != len(payload):
        raise ConfigError(
            f"{path}: corrupt container (payload holds {len(payload)} bytes, "
            f"entries account for {expected_end})"
        )
    return out


def container_header(path) -> dict:
    """Return just the parsed JSON header of a CMT1 file (for inspection)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head[:4] != MAGIC or len(head) < 8:
            raise ConfigError(f"{path}: not a CMT1 file")
        (hlen,) = struct.unpack("<I", head[4:])
        raw = fh.read(hlen)
    if len(raw) < hlen:
        raise ConfigError(f"{path}: corrupt container (truncated header)")
    try:
        return json.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: corrupt container ({exc})") from exc


def digest_arrays(entries: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over entry names and raw bytes, for freeze checks and manifests."""
    import hashlib

    h = hashlib.sha256()
    for name in entries:
        arr = np.ascontiguousarray(entries[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def export_ppm_frames(video: np.ndarray, out_dir, stem: str = "frame") -> list[Path]:
    """Write each frame of a pixel video as a binary PPM (P6) file.

    Quantisation is round-half-up: byte = floor(value * 255 + 0.5), so 0.5
    maps to 128.  Returns the written paths in frame order.
    """
    check_pixel_video(video)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, height, width, _ = video.shape
    paths = []
    for f in range(frames):
        quant = np.floor(video[f].astype(np.float64) * 255.0 + 0.5)
        rgb = np.clip(quant, 0, 255).astype(np.uint8)
        path = out_dir / f"{stem}_{f:04d}.ppm"
        with open(path, "wb") as fh:
            fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
            fh.write(rgb.tobytes())
        paths.append(path)
    return paths

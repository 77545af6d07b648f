"""Domain types and on-disk formats for layered sprite compositions.

Conventions used throughout the package:

* Normalized canvas/texture coordinates span [-1, 1] with x right and y
  down; pixel (i, j) of an N-wide axis has its center at (2j + 1) / N - 1
  (pixel edges at -1 and 1).
* An affine parameter vector ``a = (a11, a12, a13, a21, a22, a23)`` is the
  INVERSE warp: it maps normalized canvas coordinates (u, v) to normalized
  texture coordinates (s, t) = (a11*u + a12*v + a13, a21*u + a22*v + a23).
  The identity (1, 0, 0, 0, 1, 0) stretches the texture over the canvas.
* Frame indices are 0-based in memory and 1-based in every on-disk file.
* Sprite 1 (index 0 in memory) is the background layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

# PNG encoder settings are pinned so identical pixels give identical bytes.
_PNG_SAVE_KWARGS = {"optimize": False, "compress_level": 6}


class ManifestError(ValueError):
    """A composition/video/annotation file violates its schema."""


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(values, dtype=dtype))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Texture:
    """Static RGBA raster with unit-interval channels, shape (H, W, 4)."""

    rgba: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rgba", _frozen_array(self.rgba))

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @property
    def width(self) -> int:
        return self.rgba.shape[1]


@dataclass(frozen=True)
class AffineParams:
    """Six-parameter inverse warp, canvas -> texture, in normalized coords."""

    a: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", _frozen_array(self.a))

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(IDENTITY_AFFINE)


@dataclass(frozen=True)
class AnimationTrack:
    """Per-frame (affine, opacity) pairs; affines (T, 6), opacities (T,)."""

    affines: np.ndarray
    opacities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "affines", _frozen_array(self.affines))
        object.__setattr__(self, "opacities", _frozen_array(self.opacities))

    def __len__(self) -> int:
        return self.affines.shape[0]

    def affine(self, t: int) -> AffineParams:
        return AffineParams(self.affines[t])

    def opacity(self, t: int) -> float:
        return float(self.opacities[t])

    @classmethod
    def constant(cls, T: int, affine=IDENTITY_AFFINE, opacity: float = 1.0):
        return cls(np.tile(np.asarray(affine, np.float64), (T, 1)),
                   np.full(T, opacity, np.float64))


@dataclass(frozen=True)
class Sprite:
    texture: Texture
    track: AnimationTrack
    label: str | None = None


@dataclass(frozen=True)
class Composition:
    """Ordered sprite stack; sprites[0] is the backmost (background) layer."""

    sprites: tuple
    canvas_width: int
    canvas_height: int
    fps: float

    def __post_init__(self):
        object.__setattr__(self, "sprites", tuple(self.sprites))

    @property
    def num_sprites(self) -> int:
        return len(self.sprites)

    @property
    def num_frames(self) -> int:
        return len(self.sprites[0].track) if self.sprites else 0


@dataclass(frozen=True)
class Video:
    """RGB frame stack, shape (T, H, W, 3), unit-interval values."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        object.__setattr__(self, "frames", _frozen_array(self.frames))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class BoxAnnotation:
    """User prompt: keyframe index (0-based) and pixel box for one sprite."""

    sprite_id: int
    keyframe: int
    box: tuple  # (x0, y0, x1, y1) pixels, x1/y1 exclusive

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))


@dataclass(frozen=True)
class MaskSequence:
    """Per-frame soft masks for one sprite, shape (T, H, W) in [0, 1]."""

    masks: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "masks", _frozen_array(self.masks))

    def __len__(self) -> int:
        return self.masks.shape[0]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate(c: Composition, *, kmin: int = 1, kmax: int | None = None) -> list:
    """Return a list of human-readable diagnostics; empty iff `c` is valid.

    The sprite-count bound defaults to permissive; pass kmin=2, kmax=6 to
    apply the generated-data policy.
    """
    diags = []
    if c.canvas_width < 1 or c.canvas_height < 1:
        diags.append(f"canvas size {c.canvas_width}x{c.canvas_height} invalid")
    if not (c.fps > 0):
        diags.append(f"fps {c.fps} must be positive")
    k = c.num_sprites
    if k < kmin:
        diags.append(f"sprite count {k} below bound {kmin}")
    if kmax is not None and k > kmax:
        diags.append(f"sprite count {k} above bound {kmax}")
    if k == 0:
        return diags
    T = c.num_frames
    if T < 1:
        diags.append("track length must be >= 1")
    for idx, sprite in enumerate(c.sprites, start=1):
        tex = sprite.texture
        if tex.rgba.ndim != 3 or tex.rgba.shape[2] != 4:
            diags.append(f"sprite {idx}: texture must be (H, W, 4)")
            continue
        if tex.width < 1 or tex.height < 1:
            diags.append(f"sprite {idx}: texture size {tex.height}x{tex.width} invalid")
        if not np.isfinite(tex.rgba).all():
            diags.append(f"sprite {idx}: texture has non-finite values")
        elif tex.rgba.min() < 0.0 or tex.rgba.max() > 1.0:
            diags.append(f"sprite {idx}: texture channel out of [0, 1]")
        track = sprite.track
        if len(track) != T:
            diags.append(f"sprite {idx}: track length {len(track)} != {T}")
        if track.affines.shape[1:] != (6,):
            diags.append(f"sprite {idx}: affines must be (T, 6)")
            continue
        bad = ~np.isfinite(track.affines)
        if bad.any():
            t = int(np.argwhere(bad.any(axis=1))[0][0])
            diags.append(f"sprite {idx}: non-finite affine at frame {t + 1}")
        opac = track.opacities
        if not np.isfinite(opac).all():
            diags.append(f"sprite {idx}: non-finite opacity")
        elif opac.min() < 0.0 or opac.max() > 1.0:
            t = int(np.argwhere((opac < 0) | (opac > 1))[0][0])
            diags.append(f"sprite {idx}: opacity out of [0, 1] at frame {t + 1}")
    return diags


def validate_annotation(ann: BoxAnnotation, canvas_w: int, canvas_h: int, T: int) -> list:
    diags = []
    x0, y0, x1, y1 = ann.box
    if not (0 <= x0 < x1 <= canvas_w and 0 <= y0 < y1 <= canvas_h):
        diags.append(f"annotation sprite {ann.sprite_id}: box {ann.box} outside canvas or empty")
    if not (0 <= ann.keyframe < T):
        diags.append(f"annotation sprite {ann.sprite_id}: keyframe {ann.keyframe} out of range")
    return diags


# ---------------------------------------------------------------------------
# Texture / image PNG helpers
# ---------------------------------------------------------------------------

def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_texture_png(texture: Texture, path) -> None:
    Image.fromarray(_to_uint8(texture.rgba), "RGBA").save(str(path), **_PNG_SAVE_KWARGS)


def load_texture_png(path) -> Texture:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGBA"), np.float64) / 255.0
    return Texture(arr)


def save_frame_png(rgb: np.ndarray, path) -> None:
    Image.fromarray(_to_uint8(rgb), "RGB").save(str(path), **_PNG_SAVE_KWARGS)


def load_frame_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        return np.asarray(im.convert("RGB"), np.float64) / 255.0


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(_to_uint8(mask), "L").save(str(path), **_PNG_SAVE_KWARGS)


def load_mask_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        return np.asarray(im.convert("L"), np.float64) / 255.0


# ---------------------------------------------------------------------------
# Composition manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "composition.json"


def serialize_composition(c: Composition, out_dir) -> Path:
    """Write textures as PNGs plus a JSON manifest; returns the manifest path.

    Affines and opacities round-trip exactly (decimal text); texture
    channels are 8-bit quantized (error <= 1/255).
    """
    out_dir = Path(out_dir)
    tex_dir = out_dir / "textures"
    tex_dir.mkdir(parents=True, exist_ok=True)
    sprites = []
    for idx, sprite in enumerate(c.sprites, start=1):
        rel = f"textures/sprite_{idx:02d}.png"
        save_texture_png(sprite.texture, out_dir / rel)
        track = [{"a": [float(v) for v in sprite.track.affines[t]],
                  "o": float(sprite.track.opacities[t])}
                 for t in range(len(sprite.track))]
        sprites.append({"label": sprite.label, "texture": rel, "track": track})
    manifest = {
        "canvas": {"w": c.canvas_width, "h": c.canvas_height},
        "fps": c.fps,
        "sprites": sprites,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def parse_composition(manifest_path) -> Composition:
    """Parse and fully validate a composition manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("canvas", "fps", "sprites"):
        if key not in doc:
            raise ManifestError(f"manifest missing field '{key}'")
    canvas = doc["canvas"]
    if not isinstance(canvas, dict) or "w" not in canvas or "h" not in canvas:
        raise ManifestError("manifest 'canvas' must contain 'w' and 'h'")
    if not doc["sprites"]:
        raise ManifestError("manifest has no sprites")

    sprites = []
    T = None
    for idx, entry in enumerate(doc["sprites"], start=1):
        for key in ("texture", "track"):
            if key not in entry:
                raise ManifestError(f"sprite {idx}: missing field '{key}'")
        tex_path = manifest_path.parent / entry["texture"]
        if not tex_path.exists():
            raise ManifestError(f"sprite {idx}: texture file missing: {entry['texture']}")
        texture = load_texture_png(tex_path)
        track_doc = entry["track"]
        if not track_doc:
            raise ManifestError(f"sprite {idx}: empty track")
        if T is None:
            T = len(track_doc)
        elif len(track_doc) != T:
            raise ManifestError(
                f"sprite {idx}: track length {len(track_doc)} != {T} (length mismatch)")
        affines = np.empty((len(track_doc), 6), np.float64)
        opac = np.empty(len(track_doc), np.float64)
        for t, fr in enumerate(track_doc):
            if "a" not in fr or "o" not in fr:
                raise ManifestError(f"sprite {idx} frame {t + 1}: needs 'a' and 'o'")
            if len(fr["a"]) != 6:
                raise ManifestError(f"sprite {idx} frame {t + 1}: affine must have 6 entries")
            affines[t] = fr["a"]
            opac[t] = fr["o"]
            if not np.isfinite(affines[t]).all():
                raise ManifestError(f"sprite {idx} frame {t + 1}: non-finite affine")
            if not (0.0 <= opac[t] <= 1.0):
                raise ManifestError(
                    f"sprite {idx} frame {t + 1}: opacity {opac[t]} out of [0, 1]")
        sprites.append(Sprite(texture, AnimationTrack(affines, opac),
                              label=entry.get("label")))
    comp = Composition(tuple(sprites), int(canvas["w"]), int(canvas["h"]),
                       float(doc["fps"]))
    diags = validate(comp)
    if diags:
        raise ManifestError("; ".join(diags))
    return comp


# ---------------------------------------------------------------------------
# Video directory format
# ---------------------------------------------------------------------------

VIDEO_MANIFEST_NAME = "video.json"


def save_video(video: Video, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in range(video.num_frames):
        save_frame_png(video.frames[t], out_dir / f"{t + 1:05d}.png")
    manifest = {"fps": video.fps, "count": video.num_frames,
                "w": video.width, "h": video.height}
    path = out_dir / VIDEO_MANIFEST_NAME
    path.write_text(json.dumps(manifest), encoding="utf-8")
    return path


def load_video(video_dir) -> Video:
    video_dir = Path(video_dir)
    manifest_path = video_dir / VIDEO_MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestError(f"video manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    count = int(doc["count"])
    frames = []
    for t in range(count):
        path = video_dir / f"{t + 1:05d}.png"
        if not path.exists():
            raise ManifestError(f"video frame missing: {path.name}")
        frames.append(load_frame_png(path))
    arr = np.stack(frames)
    if arr.shape[1] != doc["h"] or arr.shape[2] != doc["w"]:
        raise ManifestError("video frame size does not match manifest")
    return Video(arr, float(doc["fps"]))


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def save_annotations(annotations, path) -> Path:
    path = Path(path)
    doc = [{"sprite_id": a.sprite_id, "keyframe": a.keyframe + 1,
            "box": [float(v) for v in a.box]} for a in annotations]
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path


def load_annotations(path):
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"annotations not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ManifestError("annotations must be a JSON list")
    anns = []
    for entry in doc:
        for key in ("sprite_id", "keyframe", "box"):
            if key not in entry:
                raise ManifestError(f"annotation missing field '{key}'")
        if len(entry["box"]) != 4:
            raise ManifestError("annotation box must have 4 coordinates")
        anns.append(BoxAnnotation(int(entry["sprite_id"]),
                                  int(entry["keyframe"]) - 1,
                                  tuple(entry["box"])))
    return anns


# ---------------------------------------------------------------------------
# Mask directories (one subdirectory per sprite id)
# ---------------------------------------------------------------------------

def save_masks(masks_by_sprite: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    for sprite_id, seq in masks_by_sprite.items():
        sub = out_dir / str(sprite_id)
        sub.mkdir(parents=True, exist_ok=True)
        arr = seq.masks if isinstance(seq, MaskSequence) else np.asarray(seq)
        for t in range(arr.shape[0]):
            save_mask_png(arr[t], sub / f"{t + 1:05d}.png")
    return out_dir


def load_masks(masks_dir) -> dict:
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        raise ManifestError(f"mask directory not found: {masks_dir}")
    result = {}
    for sub in sorted(masks_dir.iterdir(), key=lambda p: p.name):
        if not sub.is_dir():
            continue
        paths = sorted(sub.glob("*.png"))
        if not paths:
            raise ManifestError(f"mask directory {sub.name} has no frames")
        frames = [load_mask_png(p) for p in paths]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ManifestError(f"mask directory {sub.name} has mixed frame sizes")
        result[int(sub.name)] = MaskSequence(np.stack(frames))
    if not result:
        raise ManifestError(f"mask directory {masks_dir} has no sprite subdirectories")
    return result

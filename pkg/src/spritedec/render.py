"""Differentiable layered renderer: warp, source-over blend, composite.

A sprite layer is produced by evaluating its inverse-warp affine on the
canvas pixel lattice, bilinearly sampling the RGBA texture with
transparent padding, and scaling the sampled alpha by the frame's
sprite-level opacity. Layers are blended back to front with source-over
compositing; the backmost layer is composited over black.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .model import Composition, Texture, Video


@dataclass
class RenderedLayer:
    """Canvas-space RGBA of one warped sprite (opacity already applied)."""

    rgba: tg.Tensor


@dataclass
class Backdrop:
    """Canvas-space RGB of the composition up to some layer."""

    rgb: tg.Tensor


def texture_to_tensor(texture: Texture | np.ndarray, requires_grad: bool = False) -> tg.Tensor:
    """(H, W, 4) unit-interval array -> (4, H, W) engine tensor."""
    arr = texture.rgba if isinstance(texture, Texture) else np.asarray(texture)
    return tg.tensor(np.moveaxis(arr, -1, 0), requires_grad=requires_grad)


def tensor_to_texture(t: tg.Tensor) -> Texture:
    arr = np.clip(np.moveaxis(t.numpy(), 0, -1), 0.0, 1.0)
    return Texture(arr.astype(np.float64))


def _as_tensor(value) -> tg.Tensor:
    return value if isinstance(value, tg.Tensor) else tg.tensor(np.asarray(value, np.float64))


def warp_track(texture: tg.Tensor, affines: tg.Tensor, opacities: tg.Tensor,
               canvas: tuple) -> tg.Tensor:
    """Warp one texture across T frames at once.

    texture (4, h, w); affines (T, 6); opacities (T,) -> (T, 4, H, W).
    """
    h, w = canvas
    T = affines.shape[0]
    grid = tg.affine_grid(affines, (h, w))                 # (T, H, W, 2)
    tex = texture.reshape(1, *texture.shape).expand(T, *texture.shape)
    sampled = tg.grid_sample(tex, grid)                    # (T, 4, H, W)
    opac = opacities.reshape(T, 1, 1, 1)
    alpha = sampled[:, 3:4] * opac
    return tg.concat([sampled[:, :3], alpha], dim=1)


def warp_sprite(texture: tg.Tensor, affine, opacity, canvas: tuple) -> RenderedLayer:
    """Warp a texture into canvas space for a single frame."""
    affines = _as_tensor(affine).reshape(1, 6)
    opac = _as_tensor(opacity).reshape(1)
    out = warp_track(texture, affines, opac, canvas)
    return RenderedLayer(out[0])


def blend_over(fg: RenderedLayer, bg: Backdrop) -> Backdrop:
    """Source-over: out = fg_rgb * fg_a + bg_rgb * (1 - fg_a)."""
    rgba = fg.rgba
    if rgba.shape[-2:] != bg.rgb.shape[-2:]:
        raise ValueError(f"layer {rgba.shape} does not match backdrop {bg.rgb.shape}")
    alpha = rgba[..., 3:4, :, :]
    rgb = rgba[..., :3, :, :]
    return Backdrop(rgb * alpha + bg.rgb * (1.0 - alpha))


def composite_layers(layers) -> tg.Tensor:
    """Blend (T, 4, H, W) layers back to front; backmost goes over black."""
    layers = list(layers)
    if not layers:
        raise ValueError("cannot composite an empty layer list")
    first = layers[0]
    out = first[:, :3] * first[:, 3:4]
    for layer in layers[1:]:
        alpha = layer[:, 3:4]
        out = layer[:, :3] * alpha + out * (1.0 - alpha)
    return out


def render_frame(sprites_at_t, canvas: tuple) -> Backdrop:
    """Composite one frame from (texture, affine, opacity) triples in order."""
    sprites_at_t = list(sprites_at_t)
    if not sprites_at_t:
        raise ValueError("render_frame needs at least one sprite")
    layers = [warp_sprite(tex, aff, opa, canvas).rgba.reshape(1, 4, *canvas)
              for tex, aff, opa in sprites_at_t]
    return Backdrop(composite_layers(layers)[0])


def render_sprite_isolated(texture: tg.Tensor, affine, opacity, canvas: tuple) -> tg.Tensor:
    """A sprite's warped RGBA without blending, for per-sprite metrics."""
    return warp_sprite(texture, affine, opacity, canvas).rgba


def render_video_tensors(textures, affines: tg.Tensor, opacities: tg.Tensor,
                         order, canvas: tuple) -> tg.Tensor:
    """Render all frames of a sprite stack; returns (T, 3, H, W).

    textures: (K, 4, h, w) tensor or list of K (4, h, w) tensors;
    affines (K, T, 6); opacities (K, T); order: back-to-front sprite
    indices (0 must come first).
    """
    layers = []
    for k in order:
        tex = textures[k]
        layers.append(warp_track(tex, affines[k], opacities[k], canvas))
    return composite_layers(layers)


def render_video(c: Composition) -> Video:
    """Render a composition to a Video (no gradients)."""
    if c.num_sprites == 0:
        raise ValueError("composition has no sprites")
    canvas = (c.canvas_height, c.canvas_width)
    with tg.no_grad():
        textures = [texture_to_tensor(s.texture) for s in c.sprites]
        affines = tg.tensor(np.stack([s.track.affines for s in c.sprites]))
        opac = tg.tensor(np.stack([s.track.opacities for s in c.sprites]))
        frames = render_video_tensors(textures, affines, opac,
                                      range(c.num_sprites), canvas)
        arr = np.moveaxis(frames.numpy(), 1, -1)
    return Video(np.clip(arr, 0.0, 1.0).astype(np.float64), c.fps)


def render_layer_stacks(c: Composition, frame_indices=None) -> np.ndarray:
    """Isolated per-sprite RGBA renders, shape (K, T, 4, H, W), no grad."""
    canvas = (c.canvas_height, c.canvas_width)
    T = c.num_frames
    idx = list(range(T)) if frame_indices is None else list(frame_indices)
    out = np.empty((c.num_sprites, len(idx), 4, *canvas), np.float64)
    with tg.no_grad():
        for k, sprite in enumerate(c.sprites):
            tex = texture_to_tensor(sprite.texture)
            aff = tg.tensor(sprite.track.affines[idx])
            opa = tg.tensor(sprite.track.opacities[idx])
            out[k] = warp_track(tex, aff, opa, canvas).numpy()
    return out

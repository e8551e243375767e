"""Two-view stochastic augmentation: random resized crop, horizontal flip,
colour jitter (random op order) and random grayscale. No Gaussian blur.

Randomness is explicit. Each view is driven by its own
:class:`numpy.random.SeedSequence` child, so view 1's draws never influence
view 2. Batch helpers derive one sequence per sample from
``(seed, epoch, sample index, stream)``, which makes results independent of
batch layout and worker count.

Images are float tensors in ``[0, 1]`` with layout ``(C, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ImageTooSmall

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: Tuple[float, float] = (0.2, 1.0)
    aspect_ratio_range: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    # SimCLR strengths (0.8, 0.8, 0.8, 0.2) scaled by 0.5 for small images
    jitter_strengths: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_apply_prob: float = 0.8
    grayscale_prob: float = 0.2
    output_size: int = 32

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        if not 0 < self.aspect_ratio_range[0] <= self.aspect_ratio_range[1]:
            raise ValueError(f"bad aspect_ratio_range {self.aspect_ratio_range}")
        for name in ("flip_prob", "jitter_apply_prob", "grayscale_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be a probability, got {v}")
        if any(s < 0 for s in self.jitter_strengths) or len(self.jitter_strengths) != 4:
            raise ValueError(f"jitter_strengths must be 4 non-negative reals, got {self.jitter_strengths}")
        if self.jitter_strengths[3] > 0.5:
            raise ValueError("hue strength must be <= 0.5")
        if self.output_size < 1:
            raise ValueError("output_size must be positive")

    @classmethod
    def identity(cls, output_size: int = 32) -> "AugmentPolicy":
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, (0.0, 0.0, 0.0, 0.0), 0.0, 0.0, output_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ViewParams:
    """Sampled parameters of one augmentation draw (pixel crop box in source coords)."""

    top: float
    left: float
    height: float
    width: float
    flip: bool
    jitter: bool
    factors: Tuple[float, float, float, float]  # brightness, contrast, saturation, hue shift
    order: Tuple[int, int, int, int]
    gray: bool


def sample_view_params(rng: np.random.Generator, height: int, width: int, policy: AugmentPolicy) -> ViewParams:
    area = height * width
    log_lo, log_hi = math.log(policy.aspect_ratio_range[0]), math.log(policy.aspect_ratio_range[1])
    box = None
    for _ in range(10):
        target = area * rng.uniform(*policy.crop_scale_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = math.sqrt(target * ratio)
        h = math.sqrt(target / ratio)
        if 0 < w <= width and 0 < h <= height:
            top = rng.uniform(0, height - h)
            left = rng.uniform(0, width - w)
            box = (top, left, h, w)
            break
    if box is None:
        # fallback: central crop with the ratio clamped into range
        in_ratio = width / height
        if in_ratio < policy.aspect_ratio_range[0]:
            w, h = width, width / policy.aspect_ratio_range[0]
        elif in_ratio > policy.aspect_ratio_range[1]:
            h, w = height, height * policy.aspect_ratio_range[1]
        else:
            w, h = width, height
        box = ((height - h) / 2, (width - w) / 2, h, w)

    flip = bool(rng.random() < policy.flip_prob)
    jitter = bool(rng.random() < policy.jitter_apply_prob)
    b, c, s, hue = policy.jitter_strengths
    factors = (
        rng.uniform(max(0.0, 1 - b), 1 + b),
        rng.uniform(max(0.0, 1 - c), 1 + c),
        rng.uniform(max(0.0, 1 - s), 1 + s),
        rng.uniform(-hue, hue),
    )
    order = tuple(int(i) for i in rng.permutation(4))
    gray = bool(rng.random() < policy.grayscale_prob)
    return ViewParams(*box, flip, jitter, factors, order, gray)


def _grayscale(x: torch.Tensor) -> torch.Tensor:
    w = x.new_tensor(GRAY_WEIGHTS).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def _rgb_to_hsv(x: torch.Tensor):
    r, g, b = x.unbind(1)
    maxc, _ = x.max(dim=1)
    minc, _ = x.min(dim=1)
    delta = maxc - minc
    v = maxc
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-12), torch.zeros_like(maxc))
    safe = torch.where(delta > 0, delta, torch.ones_like(delta))
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.long() % 6
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = torch.zeros(h.shape[0], 3, *h.shape[1:], dtype=h.dtype, device=h.device)
    for k, (r, g, b) in enumerate(choices):
        m = (i == k).unsqueeze(1)
        out = torch.where(m, torch.stack([r, g, b], dim=1), out)
    return out


def _apply_color_op(x: torch.Tensor, op: int, factor: torch.Tensor) -> torch.Tensor:
    f = factor.view(-1, 1, 1, 1)
    if op == 0:  # brightness
        return (x * f).clamp(0, 1)
    if op == 1:  # contrast
        mean = _grayscale(x).mean(dim=(2, 3), keepdim=True)
        return (f * x + (1 - f) * mean).clamp(0, 1)
    if op == 2:  # saturation
        return (f * x + (1 - f) * _grayscale(x)).clamp(0, 1)
    h, s, v = _rgb_to_hsv(x)
    h = (h + factor.view(-1, 1, 1)) % 1.0
    return _hsv_to_rgb(h, s, v).clamp(0, 1)


def apply_view_params(images: torch.Tensor, params: Sequence[ViewParams], output_size: int) -> torch.Tensor:
    """Apply one parameter set per image to a ``(B, C, H, W)`` float batch."""
    b, c, height, width = images.shape
    theta = torch.zeros(b, 2, 3, dtype=images.dtype)
    for i, p in enumerate(params):
        # normalized [-1, 1] coordinates of the crop box (align_corners=False convention)
        cx = (p.left + p.width / 2) / width * 2 - 1
        cy = (p.top + p.height / 2) / height * 2 - 1
        sx = p.width / width
        sy = p.height / height
        theta[i, 0, 0] = -sx if p.flip else sx
        theta[i, 0, 2] = cx
        theta[i, 1, 1] = sy
        theta[i, 1, 2] = cy
    grid = F.affine_grid(theta, [b, c, output_size, output_size], align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)

    if c == 3:
        jit = torch.tensor([p.jitter for p in params])
        if bool(jit.any()):
            factors = torch.tensor([p.factors for p in params], dtype=images.dtype)
            orders = torch.tensor([p.order for p in params])
            for slot in range(4):
                for op in range(4):
                    sel = jit & (orders[:, slot] == op)
                    # identity factors leave the image untouched; skip the arithmetic
                    neutral = factors[:, op] == (0.0 if op == 3 else 1.0)
                    sel = sel & ~neutral
                    if bool(sel.any()):
                        idx = torch.nonzero(sel).flatten()
                        out[idx] = _apply_color_op(out[idx], op, factors[idx, op])
        gray = torch.tensor([p.gray for p in params])
        if bool(gray.any()):
            idx = torch.nonzero(gray).flatten()
            out[idx] = _grayscale(out[idx]).expand(-1, 3, -1, -1)
    return out.clamp(0, 1)


def to_float_images(images) -> torch.Tensor:
    """uint8 ``(…, C, H, W)`` arrays become float32 in [0, 1]; float input passes through."""
    t = torch.as_tensor(images)
    if t.dtype == torch.uint8:
        return t.to(torch.float32) / 255.0
    return t.to(torch.float32)


def _as_seedseq(rng_state) -> np.random.SeedSequence:
    if isinstance(rng_state, np.random.SeedSequence):
        return rng_state
    return np.random.SeedSequence(rng_state)


def _view_children(ss: np.random.SeedSequence):
    # SeedSequence.spawn() mutates its parent; build the children explicitly instead
    return [np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (k,), pool_size=ss.pool_size)
            for k in (0, 1)]


def make_view_pair(image, policy: AugmentPolicy, rng_state) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return two independently augmented views of one ``(C, H, W)`` image.

    ``rng_state`` is a SeedSequence (or anything SeedSequence accepts); it is
    never consumed, so the same value always yields the same pair.
    """
    img = to_float_images(image)
    if img.dim() != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(img.shape)}")
    _, h, w = img.shape
    if min(h, w) * 4 < policy.output_size:
        raise ImageTooSmall(f"image {h}x{w} is smaller than output_size/4 ({policy.output_size / 4})")
    ss1, ss2 = _view_children(_as_seedseq(rng_state))
    p1 = sample_view_params(np.random.default_rng(ss1), h, w, policy)
    p2 = sample_view_params(np.random.default_rng(ss2), h, w, policy)
    out = apply_view_params(torch.stack([img, img]), [p1, p2], policy.output_size)
    return out[0], out[1]


def sample_seedseq(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    """Per-sample randomness keyed by (seed, epoch, sample index, stream)."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(int(epoch), int(index), int(stream)))


def make_view_pairs(images, indices: Sequence[int], policy: AugmentPolicy, seed: int, epoch: int,
                    stream: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batched :func:`make_view_pair`; sample ``k`` uses ``sample_seedseq(seed, epoch, indices[k], stream)``.

    Equivalent, image for image, to calling :func:`make_view_pair` per sample.
    """
    imgs = to_float_images(images)
    b, _, h, w = imgs.shape
    if min(h, w) * 4 < policy.output_size:
        raise ImageTooSmall(f"images {h}x{w} are smaller than output_size/4 ({policy.output_size / 4})")
    p1, p2 = [], []
    for idx in indices:
        ss1, ss2 = _view_children(sample_seedseq(seed, epoch, idx, stream))
        p1.append(sample_view_params(np.random.default_rng(ss1), h, w, policy))
        p2.append(sample_view_params(np.random.default_rng(ss2), h, w, policy))
    both = apply_view_params(torch.cat([imgs, imgs]), p1 + p2, policy.output_size)
    return both[:b], both[b:]


def resize_images(images, size: int) -> torch.Tensor:
    """Bilinear resize of a ``(B, C, H, W)`` batch to ``size x size``."""
    imgs = to_float_images(images)
    if imgs.shape[-1] == size and imgs.shape[-2] == size:
        return imgs
    return F.interpolate(imgs, size=(size, size), mode="bilinear", align_corners=False, antialias=True)

"""Lung-probability masks and 3-channel model input composition.

The mask is concatenated as a channel, never multiplied into the image.
The published pretrained segmentation weights are a pluggable input; a
small trainable encoder-decoder plus a synthetic-ellipse trainer stands in
for desk-scale verification.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import CANONICAL_SIZE, CanonicalImage, bilinear_resize

MASK_WEIGHTS_FORMAT = "cxr-mask-weights"
MASK_WEIGHTS_VERSION = 1
DEFAULT_NATIVE_SIZE = 256


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class LungMask:
    """Per-pixel lung probability, same geometry as the canonical image."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = self.probabilities
        if p.shape != (CANONICAL_SIZE, CANONICAL_SIZE):
            raise SegmentationError(f"mask must be {CANONICAL_SIZE}x{CANONICAL_SIZE}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise SegmentationError("mask probabilities must lie in [0,1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.probabilities.shape


@dataclass(frozen=True)
class ModelInput:
    """Stacked (image, lung mask, zeros) planes fed to the classifier.

    Production inputs are canonical 1024x1024 (enforced by compose_input's
    argument types); the container itself only pins the channel contract.
    """

    channels: np.ndarray

    def __post_init__(self):
        ch = self.channels
        if ch.ndim != 3 or ch.shape[0] != 3:
            raise SegmentationError(f"model input must have 3 channels, got {ch.shape}")
        if not np.all(ch[2] == 0.0):
            raise SegmentationError("channel 2 must be identically zero")
        if ch[:2].min() < 0.0 or ch[:2].max() > 1.0:
            raise SegmentationError("image and mask channels must lie in [0,1]")

    @property
    def image(self) -> np.ndarray:
        return self.channels[0]

    @property
    def mask(self) -> np.ndarray:
        return self.channels[1]


def compose_input(img: CanonicalImage, mask: LungMask) -> ModelInput:
    if img.shape != mask.shape:
        raise SegmentationError(f"shape mismatch: image {img.shape} vs mask {mask.shape}")
    channels = np.stack(
        [img.pixels, mask.probabilities.astype(np.float32), np.zeros(img.shape, np.float32)]
    )
    return ModelInput(channels=channels)


def zero_mask() -> LungMask:
    """Placeholder mask for the no-preprocessing pipeline variant."""
    return LungMask(probabilities=np.zeros((CANONICAL_SIZE, CANONICAL_SIZE), np.float32))


class TinyUNet(nn.Module):
    """Small encoder-decoder with skip connections, logit output."""

    def __init__(self, base_channels: int = 8):
        super().__init__()
        b = base_channels
        self.base_channels = b
        self.enc1 = self._block(1, b)
        self.enc2 = self._block(b, 2 * b)
        self.enc3 = self._block(2 * b, 4 * b)
        self.dec2 = self._block(4 * b + 2 * b, 2 * b)
        self.dec1 = self._block(2 * b + b, b)
        self.head = nn.Conv2d(b, 1, kernel_size=1)

    @staticmethod
    def _block(cin, cout):
        return nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        u2 = F.interpolate(e3, scale_factor=2, mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([u2, e2], dim=1))
        u1 = F.interpolate(d2, scale_factor=2, mode="bilinear", align_corners=False)
        d1 = self.dec1(torch.cat([u1, e1], dim=1))
        return self.head(d1)


class MaskModel:
    """Interface: predict a lung-probability map for a canonical image."""

    def predict(self, img: CanonicalImage) -> LungMask:  # pragma: no cover
        raise NotImplementedError


class ConstantMaskModel(MaskModel):
    """Test double returning a uniform probability."""

    def __init__(self, value: float = 0.5):
        if not 0.0 <= value <= 1.0:
            raise SegmentationError("constant mask value must be in [0,1]")
        self.value = value

    def predict(self, img: CanonicalImage) -> LungMask:
        return LungMask(
            probabilities=np.full((CANONICAL_SIZE, CANONICAL_SIZE), self.value, np.float32)
        )


class UNetMaskModel(MaskModel):
    """Encoder-decoder mask model running at a lower native resolution;
    the probability map is bilinearly resampled back to canonical size."""

    def __init__(self, net: TinyUNet, native_size: int = DEFAULT_NATIVE_SIZE):
        self.net = net
        self.native_size = native_size
        self.net.eval()

    def predict(self, img: CanonicalImage) -> LungMask:
        small = bilinear_resize(img.pixels, self.native_size, self.native_size)
        with torch.no_grad():
            t = torch.from_numpy(small.astype(np.float32))[None, None]
            probs = torch.sigmoid(self.net(t))[0, 0].numpy()
        up = bilinear_resize(probs, CANONICAL_SIZE, CANONICAL_SIZE)
        return LungMask(probabilities=np.clip(up, 0.0, 1.0).astype(np.float32))


def segment_lungs(img: CanonicalImage, model: MaskModel) -> LungMask:
    """Run mask inference; output is a valid probability map, deterministic
    for fixed weights."""
    mask = model.predict(img)
    if mask.shape != img.shape:
        raise SegmentationError("mask model returned wrong spatial size")
    return mask


def new_mask_model(base_channels: int = 8, native_size: int = DEFAULT_NATIVE_SIZE,
                   seed: int = 0) -> UNetMaskModel:
    torch.manual_seed(seed)
    return UNetMaskModel(TinyUNet(base_channels=base_channels), native_size=native_size)


def save_mask_model(model: UNetMaskModel, path) -> None:
    """Portable weight exchange: npz of parameter arrays plus a JSON
    architecture descriptor and version field."""
    meta = {
        "format": MASK_WEIGHTS_FORMAT,
        "version": MASK_WEIGHTS_VERSION,
        "architecture": {
            "kind": "tiny_unet",
            "base_channels": model.net.base_channels,
            "native_size": model.native_size,
        },
    }
    arrays = {k: v.detach().numpy() for k, v in model.net.state_dict().items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_mask_model(path) -> UNetMaskModel:
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise SegmentationError(f"{path}: not a mask weight file (missing descriptor)")
            meta = json.loads(bytes(data["__meta__"]).decode())
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise SegmentationError(f"{path}: corrupt mask weight file ({exc})") from exc
    if meta.get("format") != MASK_WEIGHTS_FORMAT:
        raise SegmentationError(f"{path}: unexpected weight format {meta.get('format')!r}")
    if meta.get("version") != MASK_WEIGHTS_VERSION:
        raise SegmentationError(f"{path}: unsupported weight version {meta.get('version')!r}")
    arch = meta["architecture"]
    net = TinyUNet(base_channels=int(arch["base_channels"]))
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise SegmentationError(f"{path}: weights do not match architecture ({exc})") from exc
    return UNetMaskModel(net, native_size=int(arch["native_size"]))


# ---------------------------------------------------------------------------
# Synthetic "two ellipses on noise" task: the generator doubles as its own
# ground truth for mask-quality checks.

def ellipse_sample(rng: np.random.Generator, size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic image and its boolean lung-field mask."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = rng.normal(0.15, 0.04, (size, size))
    mask = np.zeros((size, size), dtype=bool)
    for side in (-1, 1):
        cy = size * rng.uniform(0.42, 0.58)
        cx = size * (0.5 + side * rng.uniform(0.18, 0.28))
        ry = size * rng.uniform(0.18, 0.30)
        rx = size * rng.uniform(0.10, 0.17)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        mask |= inside
    img[mask] += 0.5 + rng.normal(0.0, 0.05, int(mask.sum()))
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def train_mask_model(
    model: UNetMaskModel,
    n_images: int = 48,
    steps: int = 120,
    batch_size: int = 8,
    lr: float = 3e-3,
    seed: int = 0,
) -> UNetMaskModel:
    """Fit the tiny encoder-decoder on synthetic ellipse fields (BCE loss)."""
    rng = np.random.default_rng(seed)
    size = model.native_size
    images, masks = [], []
    for _ in range(n_images):
        img, mask = ellipse_sample(rng, size)
        images.append(img)
        masks.append(mask.astype(np.float32))
    x = torch.from_numpy(np.stack(images))[:, None]
    y = torch.from_numpy(np.stack(masks))[:, None]

    torch.manual_seed(seed)
    net = model.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.BCEWithLogitsLoss()
    order_rng = np.random.default_rng(seed + 1)
    for step in range(steps):
        idx = order_rng.integers(0, n_images, size=batch_size)
        batch_x, batch_y = x[idx], y[idx]
        opt.zero_grad()
        loss = loss_fn(net(batch_x), batch_y)
        loss.backward()
        opt.step()
    net.eval()
    return model


def mask_iou(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded prediction vs boolean truth."""
    p = pred >= threshold
    union = np.logical_or(p, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, truth).sum() / union)

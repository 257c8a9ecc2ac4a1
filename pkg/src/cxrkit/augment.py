"""Stochastic, label-preserving augmentation with seeded reproducibility.

A policy is the transform probability table; a plan is one sampled
realization of it. (policy, seed, image) determines the output bitwise,
so per-image seeds derived from (global seed, epoch, scan id) make results
independent of batch ordering.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .preprocess import (
    CANONICAL_SIZE,
    FULL_FRAME_BOX,
    CanonicalImage,
    clahe,
)

TRANSFORM_KINDS = (
    "brighten",
    "gamma_contrast",
    "clahe",
    "rotate",
    "shear",
    "scale",
    "horizontal_flip",
    "sharpen_or_blur",
)

MAX_ROTATE_DEG = 7.0
MAX_SHEAR_DEG = 7.0
MAX_SCALE = 1.2


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyEntry:
    kind: str
    probability: float
    parameter_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise AugmentError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise AugmentError(f"{self.kind}: probability must be in [0,1]")
        rng = self.parameter_range
        if rng is not None and rng[0] > rng[1]:
            raise AugmentError(f"{self.kind}: empty parameter range {rng}")
        if self.kind in ("rotate", "shear") and rng is not None:
            if rng[0] < -MAX_ROTATE_DEG or rng[1] > MAX_ROTATE_DEG:
                raise AugmentError(f"{self.kind}: range {rng} exceeds +/-7 degrees")
        if self.kind == "scale" and rng is not None:
            if rng[0] < 1.0 or rng[1] > MAX_SCALE:
                raise AugmentError(f"scale: range {rng} outside [1.0, 1.2]")


@dataclass(frozen=True)
class AugmentationPolicy:
    entries: tuple[PolicyEntry, ...]

    def entry(self, kind: str) -> PolicyEntry | None:
        for e in self.entries:
            if e.kind == kind:
                return e
        return None

    def to_config(self) -> list[dict]:
        out = []
        for e in self.entries:
            item: dict = {"kind": e.kind, "probability": e.probability}
            if e.parameter_range is not None:
                item["range"] = list(e.parameter_range)
            out.append(item)
        return out

    @classmethod
    def from_config(cls, items: list[dict]) -> "AugmentationPolicy":
        entries = []
        for item in items:
            rng = item.get("range")
            entries.append(
                PolicyEntry(
                    kind=item["kind"],
                    probability=float(item["probability"]),
                    parameter_range=tuple(float(v) for v in rng) if rng else None,
                )
            )
        return cls(entries=tuple(entries))


def default_policy() -> AugmentationPolicy:
    """The standard transform table.

    Rotation and shear draw uniformly from [-7, +7] degrees; scale draws
    per-axis factors up to 1.2; the flip entry sits at p=0.5; sharpen/blur
    applies at p=0.5 and then picks one of the two with a fair coin.
    Brighten/gamma/sharpen parameter ranges are artifact conventions.
    """
    return AugmentationPolicy(
        entries=(
            PolicyEntry("brighten", 0.4, (0.9, 1.25)),
            PolicyEntry("gamma_contrast", 0.3, (0.7, 1.4)),
            PolicyEntry("clahe", 0.4, None),
            PolicyEntry("rotate", 0.4, (-7.0, 7.0)),
            PolicyEntry("shear", 0.4, (-7.0, 7.0)),
            PolicyEntry("scale", 0.4, (1.0, 1.2)),
            PolicyEntry("horizontal_flip", 0.5, None),
            PolicyEntry("sharpen_or_blur", 0.5, (0.5, 1.0)),
        )
    )


@dataclass(frozen=True)
class PlanStep:
    kind: str
    params: dict

    def describe(self) -> str:
        if not self.params:
            return self.kind
        inner = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"


@dataclass(frozen=True)
class AugmentationPlan:
    steps: tuple[PlanStep, ...]
    seed: int

    def to_text(self) -> str:
        if not self.steps:
            return f"seed={self.seed} (no transforms)"
        return f"seed={self.seed} " + " -> ".join(s.describe() for s in self.steps)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (unsalted, unlike hash())."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def sample_plan(policy: AugmentationPolicy, seed: int) -> AugmentationPlan:
    """Draw one realization: independent inclusion per entry, uniform params."""
    rng = np.random.default_rng(seed)
    steps: list[PlanStep] = []
    for entry in policy.entries:
        if rng.random() >= entry.probability:
            continue
        lo, hi = entry.parameter_range if entry.parameter_range else (0.0, 0.0)
        if entry.kind == "brighten":
            params = {"factor": float(rng.uniform(lo, hi))}
        elif entry.kind == "gamma_contrast":
            params = {"gamma": float(rng.uniform(lo, hi))}
        elif entry.kind == "clahe":
            params = {}
        elif entry.kind in ("rotate", "shear"):
            params = {"degrees": float(rng.uniform(lo, hi))}
        elif entry.kind == "scale":
            params = {
                "factor_y": float(rng.uniform(lo, hi)),
                "factor_x": float(rng.uniform(lo, hi)),
            }
        elif entry.kind == "horizontal_flip":
            params = {}
        elif entry.kind == "sharpen_or_blur":
            variant = "sharpen" if rng.random() < 0.5 else "blur"
            params = {"variant": variant, "amount": float(rng.uniform(lo, hi))}
        else:  # pragma: no cover - guarded by PolicyEntry validation
            raise AugmentError(f"unknown transform kind {entry.kind!r}")
        steps.append(PlanStep(kind=entry.kind, params=params))
    return AugmentationPlan(steps=tuple(steps), seed=seed)


def _affine_warp(px: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Warp about the image center: output[o] = input[M (o - c) + c].

    Bilinear resampling, zero fill outside the frame.
    """
    h, w = px.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    out = ndimage.affine_transform(
        px.astype(np.float64), matrix, offset=offset, order=1, mode="constant", cval=0.0
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rotation_matrix(degrees: float) -> np.ndarray:
    """Inverse (output->input) map, (row, col) coordinates, for a content
    rotation of `degrees` counterclockwise in display orientation."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    # Forward map in (y, x) with y down: [y'; x'] = [[c, -s], [s, c]] [y; x].
    return np.array([[c, s], [-s, c]])


def shear_matrix(degrees: float) -> np.ndarray:
    """Inverse map for a horizontal shear: x' = x + tan(a) * (y - cy)."""
    t = math.tan(math.radians(degrees))
    return np.array([[1.0, 0.0], [-t, 1.0]])


def scale_matrix(factor_y: float, factor_x: float) -> np.ndarray:
    """Inverse map for a content zoom by (factor_y, factor_x) about center."""
    return np.array([[1.0 / factor_y, 0.0], [0.0, 1.0 / factor_x]])


def _apply_step(img: CanonicalImage, step: PlanStep) -> CanonicalImage:
    px = img.pixels
    kind = step.kind
    if kind == "brighten":
        out = np.clip(px * np.float32(step.params["factor"]), 0.0, 1.0)
        return CanonicalImage(pixels=out, pad_box=img.pad_box)
    if kind == "gamma_contrast":
        out = np.power(px, np.float32(step.params["gamma"]), dtype=np.float32)
        return CanonicalImage(pixels=np.clip(out, 0.0, 1.0), pad_box=img.pad_box)
    if kind == "clahe":
        # As an augmentation CLAHE is purely photometric; pad stays zero.
        return clahe(img, preserve_pad=True)
    if kind == "rotate":
        out = _affine_warp(px, rotation_matrix(step.params["degrees"]))
        return CanonicalImage(pixels=out, pad_box=FULL_FRAME_BOX)
    if kind == "shear":
        out = _affine_warp(px, shear_matrix(step.params["degrees"]))
        return CanonicalImage(pixels=out, pad_box=FULL_FRAME_BOX)
    if kind == "scale":
        out = _affine_warp(px, scale_matrix(step.params["factor_y"], step.params["factor_x"]))
        return CanonicalImage(pixels=out, pad_box=FULL_FRAME_BOX)
    if kind == "horizontal_flip":
        y0, x0, y1, x1 = img.pad_box
        w = img.shape[1]
        return CanonicalImage(
            pixels=np.ascontiguousarray(px[:, ::-1]), pad_box=(y0, w - x1, y1, w - x0)
        )
    if kind == "sharpen_or_blur":
        amount = step.params["amount"]
        if step.params["variant"] == "blur":
            out = ndimage.gaussian_filter(px.astype(np.float64), sigma=amount)
        else:
            blurred = ndimage.gaussian_filter(px.astype(np.float64), sigma=1.0)
            out = px + amount * (px - blurred)
        out = np.clip(out, 0.0, 1.0).astype(np.float32)
        # Blur/sharpen bleed across the pad boundary; widen the box.
        return CanonicalImage(pixels=out, pad_box=FULL_FRAME_BOX)
    raise AugmentError(f"unknown transform kind {kind!r}")


def apply_plan(img: CanonicalImage, plan: AugmentationPlan) -> CanonicalImage:
    """Apply the plan's transforms in order; output stays 1024x1024 in [0,1]."""
    out = img
    for step in plan.steps:
        out = _apply_step(out, step)
    return out


def augment_for_epoch(
    img: CanonicalImage,
    policy: AugmentationPolicy,
    global_seed: int,
    epoch: int,
    scan_id: str,
) -> CanonicalImage:
    """Sample and apply the per-(epoch, scan) plan; order-independent."""
    plan = sample_plan(policy, derive_seed(global_seed, epoch, scan_id))
    return apply_plan(img, plan)

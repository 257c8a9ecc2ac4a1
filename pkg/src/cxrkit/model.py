"""Classifier: convolutional feature extractor + 3-layer decision head.

Training follows the transfer-learning recipe: Adam on cross-entropy plus
an L2 penalty, learning rate decayed exponentially per epoch, every layer
trainable. The activation of the penultimate head layer is the embedding
used for retrieval and projection.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import derive_seed
from .manifest import POSITIVE, NEGATIVE, ScanRecord
from .segmentation import ModelInput

BACKBONE_KINDS = (
    "resnet34",
    "resnet50",
    "resnet152",
    "vgg16",
    "chexpert_densenet",
    "tiny_test_cnn",
)

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone_kind: str = "tiny_test_cnn"
    head_layer_widths: tuple[int, int, int] = (64, 16, 2)
    pretrained_weights: str | None = None

    def __post_init__(self):
        if self.backbone_kind not in BACKBONE_KINDS:
            raise ModelError(f"unknown backbone {self.backbone_kind!r}")
        widths = tuple(self.head_layer_widths)
        if len(widths) != 3:
            raise ModelError("decision head must have exactly 3 fully connected layers")
        if widths[-1] != 2:
            raise ModelError("decision head must end in 2 outputs")
        if any(w < 1 for w in widths):
            raise ModelError("head layer widths must be positive")

    @property
    def embedding_dim(self) -> int:
        return self.head_layer_widths[1]

    def to_dict(self) -> dict:
        return {
            "backbone_kind": self.backbone_kind,
            "head_layer_widths": list(self.head_layer_widths),
            "pretrained_weights": self.pretrained_weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone_kind=d["backbone_kind"],
            head_layer_widths=tuple(d["head_layer_widths"]),
            pretrained_weights=d.get("pretrained_weights"),
        )


def default_head_widths(backbone_kind: str) -> tuple[int, int, int]:
    return (64, 16, 2) if backbone_kind == "tiny_test_cnn" else (512, 128, 2)


@dataclass(frozen=True)
class TrainingConfig:
    initial_learning_rate: float = 1e-6
    lr_decay_per_epoch: float = 0.95
    l2_coefficient: float = 1e-2
    epochs: int = 32
    batch_size: int = 16
    global_seed: int = 0

    def __post_init__(self):
        if self.initial_learning_rate <= 0:
            raise ModelError("initial_learning_rate must be positive")
        if not 0.0 < self.lr_decay_per_epoch <= 1.0:
            raise ModelError("lr_decay_per_epoch must be in (0, 1]")
        if self.l2_coefficient < 0:
            raise ModelError("l2_coefficient must be nonnegative")
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


def lr_schedule(initial_lr: float, decay: float, epoch: int) -> float:
    """Learning rate at a (0-based) epoch, built by repeated multiplication
    so lr(e) == lr(e-1) * decay holds exactly."""
    lr = initial_lr
    for _ in range(epoch):
        lr = lr * decay
    return lr


class _TinyFeatures(nn.Module):
    """3 conv blocks behind an 8x average pool; cheap enough for 1024-pixel
    inputs on a laptop CPU."""

    out_dim = 64

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)

    def forward(self, x):
        if x.shape[-1] >= 64:
            x = F.avg_pool2d(x, 8)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def _torchvision_features(kind: str) -> tuple[nn.Module, int]:
    # Lazy import: the big backbones are optional at desk scale.
    from torchvision import models

    if kind == "resnet34":
        net = models.resnet34(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
        return net, dim
    if kind == "resnet50":
        net = models.resnet50(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
        return net, dim
    if kind == "resnet152":
        net = models.resnet152(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
        return net, dim
    if kind == "vgg16":
        net = models.vgg16(weights=None)
        dim = net.classifier[0].in_features
        net.classifier = nn.Identity()
        return net, dim
    if kind == "chexpert_densenet":
        # DenseNet-121 family; weights trained on the public CheXpert task
        # are supplied as a pretrained_weights file when available.
        net = models.densenet121(weights=None)
        dim = net.classifier.in_features
        net.classifier = nn.Identity()
        return net, dim
    raise ModelError(f"unknown backbone {kind!r}")


class ClassifierNet(nn.Module):
    """Feature extractor plus decision head (fc1 -> fc2 -> fc3, 2 logits).

    forward_with_embedding also returns the penultimate activation
    relu(fc2(...)), the vector used for retrieval and projection.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.backbone_kind == "tiny_test_cnn":
            self.features: nn.Module = _TinyFeatures()
            feat_dim = _TinyFeatures.out_dim
        else:
            self.features, feat_dim = _torchvision_features(config.backbone_kind)
        w0, w1, w2 = config.head_layer_widths
        self.fc1 = nn.Linear(feat_dim, w0)
        self.fc2 = nn.Linear(w0, w1)
        self.fc3 = nn.Linear(w1, w2)

    def forward_with_embedding(self, x):
        f = self.features(x)
        h = F.relu(self.fc1(f))
        emb = F.relu(self.fc2(h))
        return self.fc3(emb), emb

    def forward(self, x):
        logits, _ = self.forward_with_embedding(x)
        return logits


@dataclass
class EpochStats:
    epoch: int
    learning_rate: float
    loss: float
    train_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    config: ModelConfig
    net: ClassifierNet
    training_log: list[EpochStats] = field(default_factory=list)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim


@dataclass(frozen=True)
class PredictionScore:
    """Positive-class probability (softmax of the two logits)."""

    score: float
    raw_logits: tuple[float, float]


def build_model(config: ModelConfig, init_seed: int = 0) -> TrainedModel:
    """Construct the network; deterministic for a fixed init seed. If the
    config names a pretrained weight file, its state dict is loaded."""
    torch.manual_seed(init_seed)
    net = ClassifierNet(config)
    if config.pretrained_weights:
        path = Path(config.pretrained_weights)
        if not path.exists():
            raise ModelError(f"pretrained weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        try:
            net.load_state_dict(state, strict=False)
        except RuntimeError as exc:
            raise ModelError(f"pretrained weights do not match backbone: {exc}") from exc
    net.eval()
    return TrainedModel(config=config, net=net)


def _to_tensor(model_input: ModelInput) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(model_input.channels, dtype=np.float32))


def _softmax_positive(logits: np.ndarray) -> float:
    # Stable two-way softmax, positive class = index 1.
    z = logits - logits.max()
    e = np.exp(z)
    return float(e[1] / e.sum())


def predict(model: TrainedModel, model_input: ModelInput) -> PredictionScore:
    model.net.eval()
    with torch.no_grad():
        logits = model.net(_to_tensor(model_input)[None])[0].numpy().astype(np.float64)
    if not np.all(np.isfinite(logits)):
        raise ModelError("non-finite logits")
    return PredictionScore(
        score=_softmax_positive(logits), raw_logits=(float(logits[0]), float(logits[1]))
    )


def classify(score: PredictionScore | float, threshold: float = 0.5) -> str:
    """Positive iff score >= threshold (boundary inclusive)."""
    if not 0.0 <= threshold <= 1.0:
        raise ModelError("threshold must be in [0,1]")
    value = score.score if isinstance(score, PredictionScore) else float(score)
    return POSITIVE if value >= threshold else NEGATIVE


def extract_embedding(model: TrainedModel, model_input: ModelInput) -> np.ndarray:
    model.net.eval()
    with torch.no_grad():
        _, emb = model.net.forward_with_embedding(_to_tensor(model_input)[None])
    return emb[0].numpy().astype(np.float32)


def predict_batch(
    model: TrainedModel, inputs: list[ModelInput]
) -> tuple[np.ndarray, np.ndarray]:
    """Scores and embeddings for a batch (one forward pass)."""
    model.net.eval()
    with torch.no_grad():
        x = torch.stack([_to_tensor(m) for m in inputs])
        logits, emb = model.net.forward_with_embedding(x)
    logits = logits.numpy().astype(np.float64)
    scores = np.array([_softmax_positive(row) for row in logits])
    return scores, emb.numpy().astype(np.float32)


def majority_vote(labels: list[str]) -> str:
    """Modal label; even splits resolve to positive (recall-favoring)."""
    if not labels:
        raise ModelError("majority_vote requires at least one label")
    pos = sum(1 for l in labels if l == POSITIVE)
    neg = len(labels) - pos
    return POSITIVE if pos >= neg else NEGATIVE


def l2_penalty(net: nn.Module) -> torch.Tensor:
    """Sum of squared parameters (the regularizer's norm term)."""
    total = torch.zeros((), dtype=next(net.parameters()).dtype)
    for p in net.parameters():
        total = total + p.square().sum()
    return total


def classification_loss(
    logits: torch.Tensor, targets: torch.Tensor, net: nn.Module, l2_coefficient: float
) -> torch.Tensor:
    """Cross-entropy plus l2_coefficient * ||theta||^2."""
    ce = F.cross_entropy(logits, targets)
    if l2_coefficient > 0:
        return ce + l2_coefficient * l2_penalty(net)
    return ce


def train(
    model: TrainedModel,
    train_records: list[ScanRecord],
    training_config: TrainingConfig,
    pipeline,
    checkpoint_dir: str | Path | None = None,
    log_fn=None,
) -> TrainedModel:
    """Run the full training recipe over manifest records.

    ``pipeline`` supplies the image plumbing: it must expose
    ``model_input(record, epoch=..., global_seed=..., augment=...)``
    returning a ModelInput (see pipeline.InputPipeline). Deterministic for
    a fixed global seed under serial execution; a checkpoint is written per
    epoch when checkpoint_dir is given.
    """
    if not train_records:
        raise TrainingError("empty training set")
    labels = {r.label for r in train_records}
    if len(labels) < 2:
        warnings.warn("training set contains a single class; proceeding anyway")

    cfg = training_config
    torch.manual_seed(cfg.global_seed)
    net = model.net
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.initial_learning_rate)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.initial_learning_rate, cfg.lr_decay_per_epoch, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = np.arange(len(train_records))
        np.random.default_rng(derive_seed(cfg.global_seed, "order", epoch)).shuffle(order)

        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            inputs, targets = [], []
            for i in batch_idx:
                rec = train_records[int(i)]
                m_in = pipeline.model_input(
                    rec, epoch=epoch, global_seed=cfg.global_seed, augment=True
                )
                inputs.append(_to_tensor(m_in))
                targets.append(1 if rec.label == POSITIVE else 0)
            x = torch.stack(inputs)
            y = torch.tensor(targets, dtype=torch.long)

            optimizer.zero_grad()
            logits = net(x)
            loss = classification_loss(logits, y, net, cfg.l2_coefficient)
            loss.backward()
            optimizer.step()

            epoch_loss += float(loss.detach()) * len(batch_idx)
            epoch_correct += int((logits.detach().argmax(dim=1) == y).sum())

        stats = EpochStats(
            epoch=epoch,
            learning_rate=lr,
            loss=epoch_loss / len(order),
            train_accuracy=epoch_correct / len(order),
        )
        model.training_log.append(stats)
        if log_fn is not None:
            log_fn({"event": "epoch", **stats.to_dict()})
        if checkpoint_dir is not None:
            save_checkpoint(
                model, training_config, Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt",
                epoch=epoch, metrics={"loss": stats.loss, "train_accuracy": stats.train_accuracy},
            )

    net.eval()
    return model


def save_checkpoint(
    model: TrainedModel,
    training_config: TrainingConfig | None,
    path: str | Path,
    epoch: int | None = None,
    metrics: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "training_config": training_config.to_dict() if training_config else None,
        "epoch": epoch,
        "metrics": metrics or {},
        "training_log": [s.to_dict() for s in model.training_log],
        "state_dict": model.net.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TrainedModel, TrainingConfig | None]:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"no checkpoint at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig.from_dict(payload["model_config"])
    net = ClassifierNet(config)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    model = TrainedModel(
        config=config,
        net=net,
        training_log=[EpochStats(**s) for s in payload.get("training_log", [])],
    )
    tc = payload.get("training_config")
    return model, (TrainingConfig.from_dict(tc) if tc else None)

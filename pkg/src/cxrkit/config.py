"""CLI configuration: one YAML file holding every pipeline default.

Paths may be overridden by environment variables (CXRKIT_<KEY>, paths
only); everything else changes via the config file or explicit CLI flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentationPolicy, default_policy
from .model import ModelConfig, TrainingConfig, default_head_widths
from .preprocess import PreprocessParams


class ConfigError(ValueError):
    pass


PATH_KEYS = (
    "data_root",
    "output_root",
    "checkpoint_dir",
    "cache_dir",
    "manifest",
    "clean_manifest",
    "exclusion_log",
    "split_file",
    "embeddings_file",
    "index_file",
    "projection_file",
    "registry_file",
    "mask_weights",
    "report_dir",
    "training_log",
)


def default_paths(data_root: str = "data", output_root: str = "out") -> dict:
    return {
        "data_root": data_root,
        "output_root": output_root,
        "checkpoint_dir": f"{output_root}/checkpoints",
        "cache_dir": f"{output_root}/cache",
        "manifest": f"{data_root}/manifest.csv",
        "clean_manifest": f"{output_root}/manifest.clean.csv",
        "exclusion_log": f"{output_root}/exclusions.jsonl",
        "split_file": f"{output_root}/split.json",
        "embeddings_file": f"{output_root}/embeddings.tsv",
        "index_file": f"{output_root}/index.tsv",
        "projection_file": f"{output_root}/projection.tsv",
        "registry_file": f"{output_root}/registry.json",
        "mask_weights": f"{output_root}/mask_weights.npz",
        "report_dir": f"{output_root}/report",
        "training_log": f"{output_root}/training_log.jsonl",
    }


@dataclass
class CompareModelSpec:
    name: str
    backbone_kind: str
    head_layer_widths: tuple[int, int, int]
    init_seed: int = 0
    preprocessing: bool = True
    pretrained_weights: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone_kind=self.backbone_kind,
            head_layer_widths=self.head_layer_widths,
            pretrained_weights=self.pretrained_weights,
        )


@dataclass
class CliConfig:
    paths: dict = field(default_factory=default_paths)
    split_seed: int = 0
    global_seed: int = 0
    tsne_seed: int = 0
    test_fraction: float = 0.15
    threshold: float = 0.5
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    policy: AugmentationPolicy = field(default_factory=default_policy)
    mask_fallback: str = "synthetic"  # constant | synthetic
    mask_base_channels: int = 8
    mask_native_size: int = 256
    mask_train_steps: int = 120
    model_id: str = "tiny-0"
    model: ModelConfig = field(default_factory=lambda: ModelConfig("tiny_test_cnn", (64, 16, 2)))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    compare_models: list[CompareModelSpec] = field(default_factory=list)
    bootstrap_resamples: int = 10
    bootstrap_each: int = 20
    bootstrap_metrics: tuple[str, ...] = ("accuracy", "sensitivity", "specificity")
    knn_k: int = 4
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    service_host: str = "127.0.0.1"
    service_port: int = 8321
    synth_patients: int = 130
    synth_scans_per_patient: int = 2
    synth_seed: int = 0

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise ConfigError(f"unknown path key {key!r}")
        return Path(self.paths[key])

    def resolved(self) -> dict:
        """Flat dict logged at command start."""
        return {
            "paths": {k: str(v) for k, v in self.paths.items()},
            "split_seed": self.split_seed,
            "global_seed": self.global_seed,
            "tsne_seed": self.tsne_seed,
            "test_fraction": self.test_fraction,
            "threshold": self.threshold,
            "model_id": self.model_id,
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "mask_fallback": self.mask_fallback,
            "knn_k": self.knn_k,
            "tsne_perplexity": self.tsne_perplexity,
            "tsne_iterations": self.tsne_iterations,
        }


def _apply_env_path_overrides(paths: dict) -> dict:
    for key in PATH_KEYS:
        env = os.environ.get(f"CXRKIT_{key.upper()}")
        if env:
            paths[key] = env
    return paths


def load_config(path: str | Path | None) -> CliConfig:
    """Read the YAML config; a missing path yields pure defaults."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping: {path}")

    cfg = CliConfig()
    try:
        paths = default_paths(
            raw.get("paths", {}).get("data_root", "data"),
            raw.get("paths", {}).get("output_root", "out"),
        )
        paths.update(raw.get("paths", {}))
        cfg.paths = _apply_env_path_overrides(paths)

        seeds = raw.get("seeds", {})
        cfg.split_seed = int(seeds.get("split_seed", 0))
        cfg.global_seed = int(seeds.get("global_seed", 0))
        cfg.tsne_seed = int(seeds.get("tsne_seed", 0))

        split = raw.get("split", {})
        cfg.test_fraction = float(split.get("test_fraction", 0.15))
        cfg.threshold = float(raw.get("threshold", 0.5))

        pp = raw.get("preprocess", {})
        cfg.preprocess = PreprocessParams(
            dark_threshold=float(pp.get("dark_threshold", 0.02)),
            dark_row_fraction=float(pp.get("dark_row_fraction", 0.99)),
            clahe_clip_limit=float(pp.get("clahe_clip_limit", 2.0)),
            clahe_tile_grid=tuple(pp.get("clahe_tile_grid", (8, 8))),
            clahe_enabled=bool(pp.get("clahe_enabled", True)),
        )

        if "augmentation" in raw:
            cfg.policy = AugmentationPolicy.from_config(raw["augmentation"])

        seg = raw.get("segmentation", {})
        if "weights_path" in seg and seg["weights_path"]:
            cfg.paths["mask_weights"] = seg["weights_path"]
        cfg.mask_fallback = seg.get("fallback", "synthetic")
        if cfg.mask_fallback not in ("constant", "synthetic"):
            raise ConfigError("segmentation.fallback must be 'constant' or 'synthetic'")
        cfg.mask_base_channels = int(seg.get("base_channels", 8))
        cfg.mask_native_size = int(seg.get("native_size", 256))
        cfg.mask_train_steps = int(seg.get("train_steps", 120))

        m = raw.get("model", {})
        backbone = m.get("backbone_kind", "tiny_test_cnn")
        widths = tuple(m.get("head_layer_widths", default_head_widths(backbone)))
        cfg.model = ModelConfig(
            backbone_kind=backbone,
            head_layer_widths=widths,
            pretrained_weights=m.get("pretrained_weights"),
        )
        cfg.model_id = m.get("model_id", f"{backbone}-seed{cfg.global_seed}")

        t = raw.get("training", {})
        cfg.training = TrainingConfig(
            initial_learning_rate=float(t.get("initial_learning_rate", 1e-6)),
            lr_decay_per_epoch=float(t.get("lr_decay_per_epoch", 0.95)),
            l2_coefficient=float(t.get("l2_coefficient", 1e-2)),
            epochs=int(t.get("epochs", 32)),
            batch_size=int(t.get("batch_size", 16)),
            global_seed=cfg.global_seed,
        )

        cfg.compare_models = [
            CompareModelSpec(
                name=item["name"],
                backbone_kind=item.get("backbone_kind", "tiny_test_cnn"),
                head_layer_widths=tuple(
                    item.get(
                        "head_layer_widths",
                        default_head_widths(item.get("backbone_kind", "tiny_test_cnn")),
                    )
                ),
                init_seed=int(item.get("init_seed", 0)),
                preprocessing=bool(item.get("preprocessing", True)),
                pretrained_weights=item.get("pretrained_weights"),
            )
            for item in raw.get("compare", {}).get("models", [])
        ]

        b = raw.get("bootstrap", {})
        cfg.bootstrap_resamples = int(b.get("n_train_resamples", 10))
        cfg.bootstrap_each = int(b.get("n_bootstraps_each", 20))
        cfg.bootstrap_metrics = tuple(
            b.get("metrics", ("accuracy", "sensitivity", "specificity"))
        )

        r = raw.get("retrieval", {})
        cfg.knn_k = int(r.get("k", 4))
        cfg.tsne_perplexity = float(r.get("perplexity", 30.0))
        cfg.tsne_iterations = int(r.get("iterations", 1000))

        s = raw.get("service", {})
        cfg.service_host = s.get("host", "127.0.0.1")
        cfg.service_port = int(s.get("port", 8321))
        if "threshold" in s:
            cfg.threshold = float(s["threshold"])

        syn = raw.get("synthetic", {})
        cfg.synth_patients = int(syn.get("n_patients", 130))
        cfg.synth_scans_per_patient = int(syn.get("scans_per_patient", 2))
        cfg.synth_seed = int(syn.get("seed", 0))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed config: {exc}") from exc
    return cfg


def override_seeds(cfg: CliConfig, seed: int) -> CliConfig:
    """Apply a --seed flag: it wins over every configured seed."""
    cfg.split_seed = seed
    cfg.global_seed = seed
    cfg.tsne_seed = seed
    cfg.training = TrainingConfig(
        initial_learning_rate=cfg.training.initial_learning_rate,
        lr_decay_per_epoch=cfg.training.lr_decay_per_epoch,
        l2_coefficient=cfg.training.l2_coefficient,
        epochs=cfg.training.epochs,
        batch_size=cfg.training.batch_size,
        global_seed=seed,
    )
    return cfg

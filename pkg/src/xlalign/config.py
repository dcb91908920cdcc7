"""Experiment configuration: schema, defaults, presets and YAML I/O."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

PairingStrategy = Literal["random_pairwise", "anchor_frozen", "anchor_trained"]
LayerStrategy = Literal["single", "multi", "random", "ucb_all", "ucb_lower"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CorpusConfig(_Section):
    languages: list[str] = ["en", "ja", "es", "ko", "ru"]
    holdout_languages: list[str] = ["ast", "ky"]
    low_resource_languages: list[str] = ["ko"]
    n_items: int = Field(64, ge=2)
    dim: int = Field(16, ge=1)
    latent_dim: int = Field(8, ge=1)
    noise_sigma: float = Field(0.1, ge=0)
    low_resource_sigma: float = Field(0.5, ge=0)
    token_jitter: float = Field(0.3, ge=0)
    offset_scale: float = Field(1.0, ge=0)
    mixing_perturbation: float = Field(1.0, ge=0)
    min_len: int = Field(10, ge=1)
    max_len: int = Field(20, ge=1)
    test_fraction: float = Field(0.25, gt=0, lt=1)

    @model_validator(mode="after")
    def _check(self) -> CorpusConfig:
        if len(self.languages) < 2:
            raise ValueError("at least 2 training languages are required")
        names = self.languages + self.holdout_languages
        if len(set(names)) != len(names):
            raise ValueError("language ids must be unique across training and holdout sets")
        unknown = set(self.low_resource_languages) - set(names)
        if unknown:
            raise ValueError(f"low-resource languages not in the corpus: {sorted(unknown)}")
        if self.max_len < self.min_len:
            raise ValueError("max_len must be >= min_len")
        if self.latent_dim > self.dim:
            raise ValueError("latent_dim must not exceed dim")
        return self


class SchedulerConfig(_Section):
    rho: float = Field(0.1, gt=0, le=1)
    beta: float = Field(0.5, gt=0)
    tau: float = Field(0.2, gt=0)
    normalize_reward: bool = False
    reward_source: Literal["total", "ce", "ot"] = "total"


class TrainConfig(_Section):
    steps: int = Field(500, ge=0)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.05, ge=0)
    alpha: float = Field(10.0, ge=0)
    epsilon: float = Field(0.1, gt=0)
    sinkhorn_max_iter: int = Field(500, ge=1)
    sinkhorn_tol: float = Field(1e-6, gt=0)
    num_layers: int = Field(8, ge=2)
    init_scale: float = Field(0.1, ge=0)
    pairing: PairingStrategy = "random_pairwise"
    anchor_language: str = "en"
    layer_strategy: LayerStrategy = "ucb_lower"
    single_layer: int = Field(1, ge=1)
    multi_layers: list[int] = [2, 4, 6, 8]
    lower_layers: Union[list[int], None] = None
    bias_compensation: bool = True

    @model_validator(mode="after")
    def _check(self) -> TrainConfig:
        for name, layers in (
            ("single_layer", [self.single_layer]),
            ("multi_layers", self.multi_layers),
            ("lower_layers", self.lower_layers or []),
        ):
            bad = [l for l in layers if not 1 <= l <= self.num_layers]
            if bad:
                raise ValueError(f"{name} has layers outside 1..{self.num_layers}: {bad}")
        if not self.multi_layers:
            raise ValueError("multi_layers must not be empty")
        return self

    def candidate_layers(self) -> list[int]:
        """Layers the scheduler (or random strategy) may pick from."""
        if self.layer_strategy == "ucb_lower":
            return list(self.lower_layers or range(1, self.num_layers // 2 + 1))
        if self.layer_strategy == "single":
            return [self.single_layer]
        if self.layer_strategy == "multi":
            return list(self.multi_layers)
        return list(range(1, self.num_layers + 1))


class EvalConfig(_Section):
    eval_layer: Union[int, Literal["top"]] = 1
    codebook_size: int = Field(16, ge=2)
    kmeans_iter: int = Field(20, ge=1)
    smoothing: float = Field(1.0, ge=0)


class BanditConfig(_Section):
    arm_means: list[float] = [0.5, 0.1, 0.1]
    reward_kind: Literal["bernoulli", "gaussian"] = "bernoulli"
    reward_sigma: float = Field(0.1, ge=0)
    steps: int = Field(2000, ge=1)
    n_seeds: int = Field(20, ge=1)
    window_start: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _check(self) -> BanditConfig:
        if not self.arm_means:
            raise ValueError("arm_means must not be empty")
        return self


class ExperimentConfig(_Section):
    seed: int = 0
    corpus: CorpusConfig = CorpusConfig()
    training: TrainConfig = TrainConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    evaluation: EvalConfig = EvalConfig()
    bandit: BanditConfig = BanditConfig()

    @model_validator(mode="after")
    def _check(self) -> ExperimentConfig:
        if self.training.pairing != "random_pairwise" and self.training.anchor_language not in self.corpus.languages:
            raise ValueError(f"anchor language {self.training.anchor_language!r} is not a training language")
        return self

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(), sort_keys=True)


# Ablation presets, one per table row of the method comparison.
PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "wo_bias": {"training": {"bias_compensation": False}},
    "wo_align": {"training": {"bias_compensation": False, "alpha": 0.0}},
    "random_pairwise": {"training": {"pairing": "random_pairwise"}},
    "anchor_frozen": {"training": {"pairing": "anchor_frozen"}},
    "anchor_trained": {"training": {"pairing": "anchor_trained"}},
    "layer_i": {"training": {"layer_strategy": "single"}},
    "layer_ii": {"training": {"layer_strategy": "multi"}},
    "layer_iii": {"training": {"layer_strategy": "random"}},
    "layer_iv": {"training": {"layer_strategy": "ucb_all"}},
    "layer_v": {"training": {"layer_strategy": "ucb_lower"}},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(raw: dict | None = None, preset: str | None = None, **top: Any) -> ExperimentConfig:
    """Validate a raw mapping, with an optional preset applied on top."""
    data = dict(raw or {})
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = deep_merge(data, PRESETS[preset])
    data.update({k: v for k, v in top.items() if v is not None})
    return ExperimentConfig.model_validate(data)


def load_config(path: str | Path | None, preset: str | None = None, **top: Any) -> ExperimentConfig:
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping of sections")
    return build_config(raw, preset, **top)


def resolve_axis(axis: str) -> tuple[str, str]:
    """Map ``section.key`` or a bare unique key (``pairing``) to (section, key)."""
    sections = {name: field.annotation for name, field in ExperimentConfig.model_fields.items()}
    if "." in axis:
        section, key = axis.split(".", 1)
        model = sections.get(section)
        if isinstance(model, type) and issubclass(model, BaseModel) and key in model.model_fields:
            return section, key
        raise ValueError(f"unknown config key {axis!r}")
    if axis in sections and not (isinstance(sections[axis], type) and issubclass(sections[axis], BaseModel)):
        return "", axis
    hits = [
        (name, axis)
        for name, model in sections.items()
        if isinstance(model, type) and issubclass(model, BaseModel) and axis in model.model_fields
    ]
    if len(hits) != 1:
        raise ValueError(f"unknown or ambiguous config key {axis!r}")
    return hits[0]


def with_value(config: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    """Return a re-validated copy of ``config`` with one key replaced."""
    section, key = resolve_axis(axis)
    data = config.model_dump()
    if section:
        data[section][key] = value
    else:
        data[key] = value
    return ExperimentConfig.model_validate(data)

"""Run configuration: defaults, JSON loading, TINKER_ env overrides, seeding.

The config is a nested dataclass tree serialized as JSON. Every stochastic
operation derives its seed from (global seed, operation path) via seed_for,
so adding commands never perturbs existing ones' randomness and identical
(command, config) runs produce identical artifacts.

Environment overrides: TINKER_SEED and TINKER_OUT_ROOT set the top-level
fields; TINKER_<SECTION>__<KEY>=<value> sets a section field, e.g.
TINKER_CURATION__TAU_NOEDIT=0.9 (values parsed as JSON when possible).

This module stays import-light (no torch) so metadata-only commands start
fast.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .seeding import seed_for

__all__ = [
    "seed_for",
    "CurationSettings",
    "FlowSettings",
    "BackboneSettings",
    "CompletionTrainSettings",
    "ReferringTrainSettings",
    "OrchestrationSettings",
    "RunConfig",
    "load_config",
]

ENV_PREFIX = "TINKER_"


@dataclass
class CurationSettings:
    tau_noedit: float = 0.95
    tau_mv: float = 0.9
    n_samples: int = 50
    embedder: str = "toy"
    embed_dim: int = 256
    editor: str = "synthetic"
    n_scenes: int = 6
    views_per_scene: int = 8
    image_size: int = 32
    n_objects: int = 3


@dataclass
class FlowSettings:
    n_steps: int = 16
    t_distribution: str = "uniform"

    def __post_init__(self):
        if self.t_distribution != "uniform":
            raise ValueError("only the uniform timestep distribution is supported")


@dataclass
class BackboneSettings:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    patch_size: int = 4
    max_frames: int = 32
    max_grid: int = 16


@dataclass
class CompletionTrainSettings:
    n_scenes: int = 8
    n_frames: int = 16
    image_size: int = 32
    n_objects: int = 3
    steps: int = 3000
    learning_rate: float = 2e-5
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    batch_size: int = 2
    min_window: int = 4
    max_window: int = 8
    full_sequence_every: int = 4
    identity_probability: float = 0.25
    full_single_ref_probability: float = 0.0


@dataclass
class ReferringTrainSettings:
    n_scenes: int = 16
    views_per_scene: int = 6
    n_examples: int = 64
    base_steps: int = 800
    base_learning_rate: float = 1e-3
    steps: int = 2000
    learning_rate: float = 2e-5
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    batch_size: int = 2
    lora_rank: int = 8
    lora_dropout: float = 0.05
    identity_rate: float = 0.15


@dataclass
class OrchestrationSettings:
    mode: str = "few_shot"
    k: int = 3
    window: int = 6
    n_frames: int = 16
    image_size: int = 32
    n_objects: int = 3
    edit_preset: str = "cool-shift"


@dataclass
class RunConfig:
    seed: int = 0
    out_root: str = "runs"
    curation: CurationSettings = field(default_factory=CurationSettings)
    flow: FlowSettings = field(default_factory=FlowSettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    completion_train: CompletionTrainSettings = field(default_factory=CompletionTrainSettings)
    referring_train: ReferringTrainSettings = field(default_factory=ReferringTrainSettings)
    orchestration: OrchestrationSettings = field(default_factory=OrchestrationSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "curation": CurationSettings,
    "flow": FlowSettings,
    "backbone": BackboneSettings,
    "completion_train": CompletionTrainSettings,
    "referring_train": ReferringTrainSettings,
    "orchestration": OrchestrationSettings,
}


def _apply_section(settings, values: dict, section: str):
    known = {f.name for f in fields(settings)}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {section}.{key}")
        setattr(settings, key, value)
    return settings


def _from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key == "seed":
            cfg.seed = int(value)
        elif key == "out_root":
            cfg.out_root = str(value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key} must be an object")
            _apply_section(getattr(cfg, key), value, key)
        else:
            raise ValueError(f"unknown config key {key}")
    return cfg


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_env(cfg: RunConfig, environ) -> RunConfig:
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key == "seed":
            cfg.seed = int(raw)
        elif key == "out_root":
            cfg.out_root = raw
        elif "__" in key:
            section, _, attr = key.partition("__")
            if section not in _SECTIONS:
                raise ValueError(f"unknown config section in env var {name}")
            _apply_section(getattr(cfg, section), {attr: _parse_env_value(raw)}, section)
        else:
            raise ValueError(f"unrecognized env override {name}")
    return cfg


def load_config(path: str | Path | None = None, environ=None) -> RunConfig:
    """Defaults, overlaid with an optional JSON file, then TINKER_ env vars."""
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("config file must contain a JSON object")
    cfg = _from_dict(data)
    return _apply_env(cfg, os.environ if environ is None else environ)

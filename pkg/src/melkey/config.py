"""Pipeline configuration: INI-style config files and seed derivation.

A config file is plain key/value under sections; CLI flags override file
values.  All randomness flows from one root seed through named sub-seeds
so stages re-run independently yet reproducibly.

    [pipeline]
    seed = 7
    context_len = 100000

    [encoder]
    depth = 4
    mask_ratio = 0.9

    [pretrain]
    steps = 2000
    batch_size = 16
    temperature = 0.1

    [train]
    batch_size = 128
    lr = 1e-3
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from .contrastive import PretrainConfig
from .encoder import EncoderConfig
from .errors import UsageError
from .probe import TrainConfig


def derive_seed(root_seed: int, stage: str) -> int:
    """Stable per-stage sub-seed from the root seed and the stage name."""
    digest = hashlib.sha256(f"{root_seed}/{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class PipelineConfig:
    seed: int = 0
    context_len: int = 100_000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def snapshot(self) -> dict:
        return {
            "seed": self.seed,
            "context_len": self.context_len,
            "encoder": self.encoder.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train)
                      if f.name != "mixup"} | {"mixup": list(self.train.mixup) if self.train.mixup else None},
        }


def parse_mixup(raw: str):
    """Parse "none" or "alpha:beta" into the mixup config value."""
    raw = raw.strip().lower()
    if raw in ("", "none", "off"):
        return None
    try:
        alpha, beta = raw.split(":")
        return (float(alpha), float(beta))
    except ValueError as err:
        raise UsageError(f"mixup must be 'none' or 'alpha:beta', got {raw!r}") from err


def _coerce(raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(float(raw))
    if isinstance(current, float):
        return float(raw)
    if current is None:  # optional numeric fields
        try:
            return int(raw)
        except ValueError:
            return float(raw)
    return raw


def _apply_section(obj, section: configparser.SectionProxy, section_name: str):
    valid = {f.name for f in fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in valid:
            raise UsageError(f"unknown config key [{section_name}] {key}")
        if key == "mixup":
            updates[key] = parse_mixup(raw)
        else:
            updates[key] = _coerce(raw, getattr(obj, key))
    return type(obj)(**{f.name: updates.get(f.name, getattr(obj, f.name)) for f in fields(obj)})


def load_config(path) -> PipelineConfig:
    """Parse and validate a pipeline config file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    cfg = PipelineConfig()
    for section_name in parser.sections():
        section = parser[section_name]
        if section_name == "pipeline":
            for key, raw in section.items():
                if key == "seed":
                    cfg.seed = int(raw)
                elif key == "context_len":
                    cfg.context_len = int(raw)
                else:
                    raise UsageError(f"unknown config key [pipeline] {key}")
        elif section_name == "encoder":
            cfg.encoder = _apply_section(cfg.encoder, section, section_name)
        elif section_name == "pretrain":
            cfg.pretrain = _apply_section(cfg.pretrain, section, section_name)
        elif section_name == "train":
            cfg.train = _apply_section(cfg.train, section, section_name)
        else:
            raise UsageError(f"unknown config section [{section_name}]")
    return cfg

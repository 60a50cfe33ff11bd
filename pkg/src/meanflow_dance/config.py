"""Run configuration: a JSON document validated against ``RUN_CONFIG_SCHEMA``."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .kinematics import PRESETS, Skeleton, get_skeleton
from .network import NetworkConfig
from .sampler import SOLVERS, SampleConfig
from .training import JVP_MODES, LossWeights, TrainConfig

_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


RUN_CONFIG_SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "skeleton": {"oneOf": [
        {"type": "string", "enum": sorted(PRESETS)},
        _obj({
            "name": {"type": "string"},
            "joint_names": {"type": "array", "items": {"type": "string"}},
            "parents": {"type": "array", "items": {"type": "integer", "minimum": -1}},
            "offsets": {"type": "array", "items": {"type": "array", "items": _NUM,
                                                   "minItems": 3, "maxItems": 3}},
            "foot_joints": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "ground_height": _NUM,
            "rest_height": _NUM,
            "head": {"type": "integer", "minimum": 0},
            "hands": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "torso": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "lower_joints": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        }, required=("name", "joint_names", "parents", "offsets", "foot_joints")),
    ]},
    "network": _obj({
        "latent_dim": _POSINT, "d_state": _POSINT, "conv_kernel": _POSINT, "expand": _POSINT,
        "cond_layers": _POSINT, "gen_blocks": _POSINT, "motion_dim": _POSINT,
        "music_dim": _POSINT, "genre_count": _POSINT,
        "time_max_freq": {"type": "number", "exclusiveMinimum": 0},
    }),
    "loss": _obj({k: _NONNEG for k in ("mf", "rec", "pos", "vel", "fcl")}),
    "optimizer": _obj({
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "betas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                  "minItems": 3, "maxItems": 3},
        "weight_decay": _NONNEG,
    }),
    "train": _obj({
        "steps": _POSINT, "batch_size": _POSINT, "window": _POSINT, "stride": _POSINT,
        "ema_decay": {"type": "number", "minimum": 0, "maximum": 1},
        "ema_warmup": {"type": "boolean"},
        "p_equal": {"type": "number", "minimum": 0, "maximum": 1},
        "cfg_dropout": {"type": "number", "minimum": 0, "maximum": 1},
        "jvp_mode": {"type": "string", "enum": list(JVP_MODES)},
        "log_every": _POSINT,
        "ckpt_every": {"type": "integer", "minimum": 0},
    }),
    "sampler": _obj({
        "steps": _POSINT,
        "solver": {"type": "string", "enum": list(SOLVERS)},
        "guidance": {"type": ["number", "null"]},
    }),
    "data": _obj({"train": {"type": "string"}, "ref": {"type": "string"}}),
})


class ConfigError(ValueError):
    pass


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PAPER_SCALE = {
    "network": {"latent_dim": 512, "d_state": 16, "conv_kernel": 4, "expand": 2,
                "cond_layers": 4, "gen_blocks": 8},
    "train": {"batch_size": 128},
    "optimizer": {"lr": 4e-4},
    "skeleton": "smpl24",
}


@dataclass
class RunConfig:
    seed: int = 0
    skeleton: Skeleton = field(default_factory=lambda: get_skeleton("toy13"))
    network: NetworkConfig = None
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SampleConfig = field(default_factory=SampleConfig)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.network is None:
            self.network = NetworkConfig(motion_dim=self.skeleton.motion_dim)
        if self.network.motion_dim != self.skeleton.motion_dim:
            raise ConfigError(f"network.motion_dim {self.network.motion_dim} does not match "
                              f"skeleton {self.skeleton.name} ({self.skeleton.motion_dim})")

    @classmethod
    def from_dict(cls, doc: dict, paper_scale: bool = False) -> "RunConfig":
        if paper_scale:
            doc = deep_merge(PAPER_SCALE, doc)
        validate(doc)
        skel = get_skeleton(doc.get("skeleton", "toy13"))
        net = dict(doc.get("network", {}))
        net.setdefault("motion_dim", skel.motion_dim)
        opt = doc.get("optimizer", {})
        train = dict(doc.get("train", {}))
        train.update({k: opt[k] for k in ("lr", "betas", "weight_decay") if k in opt})
        seed = doc.get("seed", 0)
        train["seed"] = seed
        sampler = dict(doc.get("sampler", {}))
        sampler["seed"] = seed
        try:
            return cls(seed=seed, skeleton=skel, network=NetworkConfig.from_dict(net),
                       loss=LossWeights(**doc.get("loss", {})), train=TrainConfig(**train),
                       sampler=SampleConfig(**sampler), data=dict(doc.get("data", {})))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        opt = {"lr": t.pop("lr"), "betas": t.pop("betas"), "weight_decay": t.pop("weight_decay")}
        t.pop("seed")
        skel = self.skeleton.name if self.skeleton.name in PRESETS else self.skeleton.to_dict()
        return {
            "seed": self.seed,
            "skeleton": skel,
            "network": self.network.to_dict(),
            "loss": {k: getattr(self.loss, k) for k in ("mf", "rec", "pos", "vel", "fcl")},
            "optimizer": opt,
            "train": t,
            "sampler": {"steps": self.sampler.steps, "solver": self.sampler.solver,
                        "guidance": self.sampler.guidance},
            "data": dict(self.data),
        }


def load_config(path=None, overrides: dict | None = None, paper_scale: bool = False) -> RunConfig:
    """Read a JSON config (or defaults), apply ``overrides`` and validate."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if overrides:
        doc = deep_merge(doc, overrides)
    return RunConfig.from_dict(doc, paper_scale=paper_scale)

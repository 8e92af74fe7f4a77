"""Flat ``section.key = value`` configuration for the whole pipeline."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .degrade import DegradeConfig
from .flow import CFG_FORMS, DitConfig, DitTrainConfig, GuidanceConfig
from .partition import CostWeights
from .vae import VaeConfig, VaeLossWeights, VaeTrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


def derive_seed(root: int, subsystem: str) -> int:
    """64-bit seed for one subsystem, hashed from the root seed."""
    h = hashlib.blake2b(f"{int(root)}/{subsystem}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class PipelineConfig:
    seed: int = 0
    mesh: str = "toy"
    out_dir: str = "texlet_out"
    # refinement / partition
    refine_max_edge: float = 0.0  # 0 = automatic from n_target
    refine_max_rounds: int = 16
    n_target: int = 64
    w_fit: float = 1.0
    w_dir: float = 1.0
    w_shape: float = 0.5
    w_count: float = 0.25
    count_mode: str = "change"
    # patches
    R: int = 32
    # degradation
    degrade_factor: int = 2
    degrade_blur: float = 1.0
    degrade_noise: float = 4.0
    degrade_jpeg: int = 60
    # vae
    vae_r: int = 4
    vae_d_phi: int = 64
    vae_d: int = 16
    vae_enc_layers: int = 8
    vae_dec_layers: int = 16
    vae_width: int = 64
    vae_heads: int = 4
    vae_pos_dims: int = 48
    vae_steps: int = 2000
    vae_lr: float = 1e-4
    vae_weight_decay: float = 0.0
    vae_alpha: float = 1.0
    vae_beta: float = 0.1
    vae_gamma: float = 1e-4
    vae_checkpoint_every: int = 0
    vae_schedule: str = "constant"
    # dit
    dit_width: int = 128
    dit_layers: int = 6
    dit_heads: int = 4
    dit_steps: int = 2000
    dit_lr: float = 1e-4
    dit_batch: int = 8
    dit_weight_decay: float = 0.0
    dit_reweight: bool = True
    dit_checkpoint_every: int = 0
    dit_schedule: str = "constant"
    # guidance / sampling
    drop_prob: float = 0.1
    guidance_scale: float = 3.0
    cfg_form: str = "standard"
    sample_steps: int = 50
    # evaluation
    eval_views: int = 150
    eval_size: int = 256

    def validate(self) -> "PipelineConfig":
        if self.n_target < 1:
            raise ConfigError(f"n_target must be >= 1, got {self.n_target}")
        if self.R < 8:
            raise ConfigError(f"R must be >= 8, got {self.R}")
        if self.R % self.vae_r:
            raise ConfigError(f"R={self.R} must be divisible by vae r={self.vae_r}")
        if self.cfg_form not in CFG_FORMS:
            raise ConfigError(f"cfg_form must be one of {CFG_FORMS}, got {self.cfg_form!r}")
        if self.sample_steps < 1:
            raise ConfigError(f"sample_steps must be >= 1, got {self.sample_steps}")
        try:
            self.cost_weights()
            self.degrade_config()
            self.vae_config()
            self.dit_config()
            self.guidance()
            self.vae_train_config()
            self.dit_train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def cost_weights(self) -> CostWeights:
        return CostWeights(self.w_fit, self.w_dir, self.w_shape, self.w_count, self.count_mode)

    def degrade_config(self) -> DegradeConfig:
        return DegradeConfig(
            seed=derive_seed(self.seed, "degrade"),
            downsample_factor=self.degrade_factor,
            blur_sigma=self.degrade_blur,
            noise_sigma=self.degrade_noise,
            jpeg_quality=self.degrade_jpeg,
        )

    def vae_config(self) -> VaeConfig:
        return VaeConfig(
            R=self.R, r=self.vae_r, d_phi=self.vae_d_phi, d=self.vae_d, enc_layers=self.vae_enc_layers,
            dec_layers=self.vae_dec_layers, width=self.vae_width, heads=self.vae_heads,
            pos_dims=self.vae_pos_dims, seed=derive_seed(self.seed, "vae.init"),
        )

    def vae_train_config(self) -> VaeTrainConfig:
        return VaeTrainConfig(
            steps=self.vae_steps, lr=self.vae_lr, weight_decay=self.vae_weight_decay,
            seed=derive_seed(self.seed, "vae.train"), checkpoint_every=self.vae_checkpoint_every,
            weights=VaeLossWeights(self.vae_alpha, self.vae_beta, self.vae_gamma), schedule=self.vae_schedule,
        )

    def dit_config(self) -> DitConfig:
        return DitConfig(
            d=self.vae_d, width=self.dit_width, layers=self.dit_layers, heads=self.dit_heads,
            pos_dims=self.vae_pos_dims, seed=derive_seed(self.seed, "dit.init"),
        )

    def dit_train_config(self) -> DitTrainConfig:
        return DitTrainConfig(
            steps=self.dit_steps, lr=self.dit_lr, batch=self.dit_batch, weight_decay=self.dit_weight_decay,
            seed=derive_seed(self.seed, "dit.train"), use_reweight=self.dit_reweight,
            checkpoint_every=self.dit_checkpoint_every, schedule=self.dit_schedule,
        )

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.drop_prob, self.guidance_scale, self.cfg_form)

    def sample_seed(self) -> int:
        return derive_seed(self.seed, "sample")


# file key -> attribute name; keys are "section.name"
_KEYS = {
    "seed": "seed",
    "mesh.path": "mesh",
    "paths.out_dir": "out_dir",
    "refine.max_edge_len": "refine_max_edge",
    "refine.max_rounds": "refine_max_rounds",
    "partition.n_target": "n_target",
    "partition.w_fit": "w_fit",
    "partition.w_dir": "w_dir",
    "partition.w_shape": "w_shape",
    "partition.w_count": "w_count",
    "partition.count_mode": "count_mode",
    "patch.R": "R",
    "degrade.factor": "degrade_factor",
    "degrade.blur": "degrade_blur",
    "degrade.noise": "degrade_noise",
    "degrade.jpeg_q": "degrade_jpeg",
    "vae.r": "vae_r",
    "vae.d_phi": "vae_d_phi",
    "vae.d": "vae_d",
    "vae.enc_layers": "vae_enc_layers",
    "vae.dec_layers": "vae_dec_layers",
    "vae.width": "vae_width",
    "vae.heads": "vae_heads",
    "vae.pos_dims": "vae_pos_dims",
    "vae.steps": "vae_steps",
    "vae.lr": "vae_lr",
    "vae.weight_decay": "vae_weight_decay",
    "vae.alpha": "vae_alpha",
    "vae.beta": "vae_beta",
    "vae.gamma": "vae_gamma",
    "vae.checkpoint_every": "vae_checkpoint_every",
    "vae.schedule": "vae_schedule",
    "dit.width": "dit_width",
    "dit.layers": "dit_layers",
    "dit.heads": "dit_heads",
    "dit.steps": "dit_steps",
    "dit.lr": "dit_lr",
    "dit.batch": "dit_batch",
    "dit.weight_decay": "dit_weight_decay",
    "dit.reweight": "dit_reweight",
    "dit.checkpoint_every": "dit_checkpoint_every",
    "dit.schedule": "dit_schedule",
    "guidance.drop_prob": "drop_prob",
    "guidance.scale": "guidance_scale",
    "guidance.cfg_form": "cfg_form",
    "sample.steps": "sample_steps",
    "eval.views": "eval_views",
    "eval.size": "eval_size",
}
_ATTR_TO_KEY = {v: k for k, v in _KEYS.items()}


def _coerce(attr: str, raw: str):
    kind = {f.name: f.type for f in fields(PipelineConfig)}[attr]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{_ATTR_TO_KEY[attr]}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[_KEYS[key]] = _coerce(_KEYS[key], raw)
    return replace(base or PipelineConfig(), **values)


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = parse_config_text(path.read_text(encoding="utf-8"))
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def config_to_text(cfg: PipelineConfig) -> str:
    return "".join(f"{_ATTR_TO_KEY[f.name]} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


def config_keys() -> dict:
    return dict(_KEYS)


__all__ = [
    "ConfigError",
    "PipelineConfig",
    "config_keys",
    "config_to_text",
    "derive_seed",
    "load_config",
    "parse_config_text",
]

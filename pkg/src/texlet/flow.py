"""Rectified-flow transformer over patch latents: conditional flow matching with
per-patch loss reweighting, condition dropout, guidance and Euler sampling."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .nn import layers as L
from .nn import tensor as T
from .nn.params import LR_SCHEDULES, ModelParams, adamw_step, scheduled_lr
from .vae import TrainingError, embed_position

log = logging.getLogger(__name__)

CFG_FORMS = ("standard", "paper_literal")


@dataclass(frozen=True)
class GuidanceConfig:
    drop_prob: float = 0.1
    scale: float = 3.0
    cfg_form: str = "standard"

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must be in [0, 1], got {self.drop_prob}")
        if self.scale < 1.0:
            raise ValueError(f"guidance scale must be >= 1, got {self.scale}")
        if self.cfg_form not in CFG_FORMS:
            raise ValueError(f"cfg_form must be one of {CFG_FORMS}, got {self.cfg_form!r}")


@dataclass(frozen=True)
class DitConfig:
    d: int = 16
    width: int = 128
    layers: int = 6
    heads: int = 4
    pos_dims: int = 48
    seed: int = 0

    def as_meta(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "DitConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: int(v) for k, v in meta.items() if k in names})


@dataclass
class FlowState:
    x_t: np.ndarray
    t: float


def forward_interp(x0: np.ndarray, eps: np.ndarray, t: float) -> FlowState:
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return FlowState((1.0 - t) * x0 + t * eps, float(t))


def reweight(x0: np.ndarray, x_cond: np.ndarray) -> np.ndarray:
    """Softmax over squared row distances, max-shifted before exponentiation."""
    d2 = np.sum((np.asarray(x0) - np.asarray(x_cond)) ** 2, axis=1)
    e = np.exp(d2 - d2.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# velocity network


def build_dit(cfg: DitConfig) -> ModelParams:
    p = ModelParams(cfg.seed)
    p.meta.update(cfg.as_meta())
    p.meta.update(latent_shift=0.0, latent_scale=1.0)
    L.add_dense(p, "dit.in", 2 * cfg.d + cfg.pos_dims, cfg.width)
    p.add_weight("dit.null", (cfg.d,), fan_in=1, scale=0.02)
    L.add_dense(p, "dit.t1", cfg.width, cfg.width)
    L.add_dense(p, "dit.t2", cfg.width, cfg.width)
    for i in range(cfg.layers):
        L.add_block(p, f"dit.block{i}", cfg.width, cfg.heads)
    L.add_layer_norm(p, "dit.ln", cfg.width)
    L.add_dense(p, "dit.out", cfg.width, cfg.d, scale=0.1)
    return p


def dit_config_of(params: ModelParams) -> DitConfig:
    return DitConfig.from_meta(params.meta)


def velocity_net(x_t, t, cond, anchors: np.ndarray, params: ModelParams, cfg: DitConfig, drop=None) -> T.Tensor:
    """Velocity for a batch of states.

    x_t: (B, N, d) or (N, d); t: scalar or (B,); cond: array shaped like x_t or None
    (null condition everywhere); drop: optional (B,) bool mask selecting the null row.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 2
    if single:
        x_t = x_t[None]
    b, n, d = x_t.shape
    if d != cfg.d:
        raise ValueError(f"latent width {d} does not match model width {cfg.d}")
    if len(anchors) != n:
        raise ValueError(f"state has {n} rows but there are {len(anchors)} anchors")
    null = T.broadcast_to(params["dit.null"], (b, n, d))
    if cond is None:
        cond_t = null
    else:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 2 and cond.shape == (n, d):
            cond = np.broadcast_to(cond, (b, n, cond.shape[1]))
        if cond.shape != (b, n, d):
            raise ValueError(f"condition shape {cond.shape} does not match state shape {(b, n, d)}")
        if drop is None:
            cond_t = T.Tensor(cond)
        else:
            keep = (~np.asarray(drop, dtype=bool)).astype(np.float64)[:, None, None]
            cond_t = T.add(T.Tensor(cond * keep), T.mul(null, 1.0 - keep))
    emb = np.broadcast_to(embed_position(anchors, cfg.pos_dims), (b, n, cfg.pos_dims))
    x = L.dense(params, "dit.in", T.concat([T.Tensor(x_t), cond_t, T.Tensor(emb)], axis=-1))
    tt = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (b,))
    temb = L.dense(params, "dit.t2", T.gelu(L.dense(params, "dit.t1", T.Tensor(L.timestep_embedding(tt, cfg.width)))))
    x = T.add(x, T.reshape(temb, (b, 1, cfg.width)))
    for i in range(cfg.layers):
        x = L.block(params, f"dit.block{i}", x, cfg.heads)
    out = L.dense(params, "dit.out", L.layer_norm(params, "dit.ln", x))
    return T.reshape(out, (n, d)) if single else out


def cfm_loss(
    x0: np.ndarray,
    cond: np.ndarray,
    anchors: np.ndarray,
    params: ModelParams,
    guidance: GuidanceConfig,
    rng: np.random.Generator,
    batch: int = 1,
    use_reweight: bool = True,
    velocity: Callable | None = None,
) -> T.Tensor:
    """Reweighted flow-matching loss averaged over ``batch`` draws of (t, eps, drop).

    ``velocity(x_t, t, cond, drop)`` overrides the network (used for oracle checks).
    """
    n, d = x0.shape
    t = rng.uniform(0.0, 1.0, size=batch)
    eps = rng.standard_normal((batch, n, d))
    drop = rng.uniform(0.0, 1.0, size=batch) < guidance.drop_prob
    x_t = (1.0 - t)[:, None, None] * x0 + t[:, None, None] * eps
    target = eps - x0
    if velocity is None:
        cfg = dit_config_of(params)
        v = velocity_net(x_t, t, cond, anchors, params, cfg, drop=drop)
    else:
        v = T.as_tensor(velocity(x_t, t, cond, drop))
    alpha = reweight(x0, cond) if use_reweight else np.full(n, 1.0 / n)
    w = (n * alpha)[None, :, None]
    err = T.square(T.sub(v, T.Tensor(target)))
    return T.mean(T.mul(err, w))


def guided_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, guidance: GuidanceConfig) -> np.ndarray:
    if guidance.cfg_form == "standard":
        # same as v_uncond + scale * (v_cond - v_uncond), but exact at scale 1
        return v_cond + (guidance.scale - 1.0) * (v_cond - v_uncond)
    return v_cond + guidance.scale * v_uncond


def sample(
    cond: np.ndarray,
    anchors: np.ndarray,
    steps: int,
    guidance: GuidanceConfig,
    params: ModelParams | None,
    rng: np.random.Generator,
    velocity: Callable | None = None,
    x1: np.ndarray | None = None,
) -> np.ndarray:
    """Euler integration from t=1 (standard normal) to t=0 with guided velocities.

    ``velocity(x, t, cond_or_None)`` overrides the network.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    cond = np.asarray(cond, dtype=np.float64)
    if velocity is None:
        cfg = dit_config_of(params)

        def velocity(x, t, c):
            return velocity_net(x, t, c, anchors, params, cfg).data

    x = rng.standard_normal(cond.shape) if x1 is None else np.array(x1, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v_c = velocity(x, t, cond)
        v_u = velocity(x, t, None)
        x = x - dt * guided_velocity(v_c, v_u, guidance)
    return x


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DitTrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    batch: int = 8
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    use_reweight: bool = True
    checkpoint_every: int = 0
    log_every: int = 100
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in LR_SCHEDULES:
            raise ValueError(f"schedule must be one of {LR_SCHEDULES}, got {self.schedule!r}")


def latent_norm(params: ModelParams):
    return params.meta.get("latent_shift", 0.0), params.meta.get("latent_scale", 1.0)


def train_dit(pairs, cfg: DitConfig, tcfg: DitTrainConfig, guidance: GuidanceConfig, out_dir=None, params=None):
    """pairs: sequence of (clean latents, condition latents, anchors); latents are
    standardized with one shift/scale over all clean latents, stored in the checkpoint."""
    if not pairs:
        raise ValueError("train_dit needs at least one latent pair")
    params = params or build_dit(cfg)
    allx = np.concatenate([p[0] for p in pairs])
    shift = float(allx.mean())
    scale = float(allx.std()) or 1.0
    params.meta.update(latent_shift=shift, latent_scale=scale)
    norm = [((x - shift) / scale, (c - shift) / scale, a) for x, c, a in pairs]
    rng = np.random.Generator(np.random.PCG64(tcfg.seed))
    out_dir = Path(out_dir) if out_dir else None
    curve = []
    for step in range(tcfg.steps):
        x0, c, a = norm[step % len(norm)]
        try:
            loss = cfm_loss(x0, c, a, params, guidance, rng, tcfg.batch, tcfg.use_reweight)
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite value at DiT step {step}: {exc}") from exc
        T.backward(loss, params)
        adamw_step(params, scheduled_lr(tcfg.lr, step, tcfg.steps, tcfg.schedule), tcfg.betas, tcfg.weight_decay)
        curve.append(float(loss.data))
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("dit step %d loss %.6g", step, curve[-1])
        if out_dir and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            params.save(out_dir / f"dit_step{step + 1:06d}.txnn")
    return params, curve


def generate(params: ModelParams, cond: np.ndarray, anchors: np.ndarray, steps: int, guidance: GuidanceConfig, seed: int):
    """Sample clean latents for raw (unstandardized) condition latents."""
    shift, scale = latent_norm(params)
    rng = np.random.Generator(np.random.PCG64(seed))
    x = sample((cond - shift) / scale, anchors, steps, guidance, params, rng)
    return x * scale + shift

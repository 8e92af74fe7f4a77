"""Two-stage patch VAE: per-patch 2D encoding, anchor-conditioned cross-patch encoding
into one latent row per patch, and the cascaded decoder back to patch images."""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import layers as L
from .nn import tensor as T
from .nn.params import LR_SCHEDULES, ModelParams, adamw_step, scheduled_lr

log = logging.getLogger(__name__)

TXLT_MAGIC = b"TXLT"
TXLT_VERSION = 1
LOGVAR_RANGE = (-10.0, 10.0)
LOGVAR_INIT = -6.0  # initial posterior std ~0.05 so early samples stay informative


@dataclass(frozen=True)
class VaeConfig:
    R: int = 32
    r: int = 4
    d_phi: int = 64
    d: int = 16
    enc_layers: int = 8
    dec_layers: int = 16
    width: int = 64
    heads: int = 4
    pos_dims: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.R % self.r:
            raise ValueError(f"R={self.R} is not divisible by r={self.r}")
        if self.pos_dims % 12:
            raise ValueError(f"pos_dims={self.pos_dims} must be a multiple of 12")
        for name in ("width", "d_phi"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by heads={self.heads}")

    @property
    def block(self) -> int:
        return self.R // self.r

    @property
    def tokens(self) -> int:
        return self.r * self.r

    def as_meta(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "VaeConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: int(v) for k, v in meta.items() if k in names})


@dataclass(frozen=True)
class VaeLossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1e-4

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class TexletSet:
    latents: np.ndarray  # (N, d)
    anchor_pos: np.ndarray  # (N, 3)
    anchor_normal: np.ndarray  # (N, 3)
    posterior_mean: np.ndarray
    posterior_logvar: np.ndarray

    @property
    def n(self) -> int:
        return self.latents.shape[0]

    @property
    def d(self) -> int:
        return self.latents.shape[1]

    @property
    def anchors(self) -> np.ndarray:
        return np.concatenate([self.anchor_pos, self.anchor_normal], axis=1)

    def save(self, path) -> None:
        write_latents(path, self.latents, self.anchors)


def write_latents(path, latents: np.ndarray, anchors: np.ndarray) -> None:
    n, d = latents.shape
    if anchors.shape != (n, 6):
        raise ValueError(f"anchors must be ({n}, 6), got {anchors.shape}")
    buf = TXLT_MAGIC + struct.pack("<III", TXLT_VERSION, n, d)
    buf += np.ascontiguousarray(latents, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(anchors, dtype="<f8").tobytes()
    Path(path).write_bytes(buf)


def read_latents(path):
    """-> (latents (N, d), anchors (N, 6))"""
    buf = Path(path).read_bytes()
    if buf[:4] != TXLT_MAGIC:
        raise ValueError(f"{path}: not a TXLT latent file")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != TXLT_VERSION:
        raise ValueError(f"{path}: unsupported TXLT version {version}")
    if len(buf) != 16 + 8 * (n * d + n * 6):
        raise ValueError(f"{path}: truncated TXLT file")
    lat = np.frombuffer(buf, "<f8", n * d, 16).reshape(n, d).astype(np.float64)
    anc = np.frombuffer(buf, "<f8", n * 6, 16 + 8 * n * d).reshape(n, 6).astype(np.float64)
    return lat, anc


# ---------------------------------------------------------------------------
# model


def build_vae(cfg: VaeConfig) -> ModelParams:
    p = ModelParams(cfg.seed)
    p.meta.update(cfg.as_meta())
    texels = cfg.block * cfg.block * 3
    # 2D encoder
    L.add_dense(p, "e2d.embed", texels, cfg.d_phi)
    p.add_weight("e2d.grid", (cfg.tokens, cfg.d_phi), fan_in=1, scale=0.02)
    L.add_block(p, "e2d.block", cfg.d_phi, cfg.heads)
    L.add_layer_norm(p, "e2d.ln", cfg.d_phi)
    # 3D encoder
    L.add_dense(p, "e3d.in", cfg.d_phi + cfg.pos_dims, cfg.width)
    for i in range(cfg.enc_layers):
        L.add_block(p, f"e3d.block{i}", cfg.width, cfg.heads)
    L.add_layer_norm(p, "e3d.ln", cfg.width)
    L.add_dense(p, "e3d.mean", cfg.width, cfg.d)
    L.add_dense(p, "e3d.logvar", cfg.width, cfg.d, scale=0.01)
    p["e3d.logvar.b"].data[:] = LOGVAR_INIT
    # 3D decoder
    L.add_dense(p, "d3d.in", cfg.d + cfg.pos_dims, cfg.width)
    for i in range(cfg.dec_layers):
        L.add_block(p, f"d3d.block{i}", cfg.width, cfg.heads)
    L.add_layer_norm(p, "d3d.ln", cfg.width)
    L.add_dense(p, "d3d.out", cfg.width, cfg.d_phi)
    # 2D decoder
    L.add_dense(p, "d2d.expand", cfg.d_phi, cfg.tokens * cfg.d_phi)
    p.add_weight("d2d.grid", (cfg.tokens, cfg.d_phi), fan_in=1, scale=0.02)
    L.add_block(p, "d2d.block", cfg.d_phi, cfg.heads)
    L.add_layer_norm(p, "d2d.ln", cfg.d_phi)
    L.add_dense(p, "d2d.out", cfg.d_phi, texels)
    return p


def config_of(params: ModelParams) -> VaeConfig:
    return VaeConfig.from_meta(params.meta)


def patch_blocks(images: np.ndarray, r: int) -> np.ndarray:
    """(N, R, R, 3) -> (N, r*r, b*b*3) non-overlapping texel blocks, row-major."""
    n, R = images.shape[0], images.shape[1]
    b = R // r
    x = images.reshape(n, r, b, r, b, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, r * r, b * b * 3)


def _unblock(x: T.Tensor, r: int, b: int) -> T.Tensor:
    n = x.shape[0]
    x = T.reshape(x, (n, r, r, b, b, 3))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, r * b, r * b, 3))


def encode_2d(images: np.ndarray, params: ModelParams, cfg: VaeConfig) -> T.Tensor:
    """(N, R, R, 3) patch images -> (N, r*r, d_phi) feature grids."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.R, cfg.R, 3):
        raise ValueError(f"patch images must be {cfg.R}x{cfg.R}x3, got {images.shape[1:]}")
    x = L.dense(params, "e2d.embed", T.Tensor(patch_blocks(images, cfg.r)))
    x = T.add(x, params["e2d.grid"])
    x = L.block(params, "e2d.block", x, cfg.heads)
    return L.layer_norm(params, "e2d.ln", x)


def patch_feature(image: np.ndarray, params: ModelParams) -> np.ndarray:
    """Feature grid (r, r, d_phi) of one patch image."""
    cfg = config_of(params)
    return encode_2d(image, params, cfg).data[0].reshape(cfg.r, cfg.r, cfg.d_phi)


def pool(features: T.Tensor) -> T.Tensor:
    return T.mean(features, axis=1)


def embed_position(anchors: np.ndarray, dims: int) -> np.ndarray:
    """Sin/cos features of (position, normal) at dims/12 octaves per scalar."""
    if dims % 12:
        raise ValueError(f"dims={dims} must be a multiple of 12")
    return L.sinusoidal(np.asarray(anchors, dtype=np.float64), dims // 12)


@dataclass
class Posterior:
    mean: T.Tensor
    logvar: T.Tensor
    latents: T.Tensor


def encode_3d(
    pooled: T.Tensor, anchors: np.ndarray, params: ModelParams, cfg: VaeConfig, rng: np.random.Generator | None = None
) -> Posterior:
    """Pooled features (N, d_phi) + anchors (N, 6) -> posterior over latents (N, d).

    With ``rng`` the latents are reparameterized samples; otherwise the mean.
    """
    if pooled.shape[0] != len(anchors):
        raise ValueError(f"{pooled.shape[0]} features but {len(anchors)} anchors")
    emb = T.Tensor(embed_position(anchors, cfg.pos_dims))
    x = L.dense(params, "e3d.in", T.concat([pooled, emb], axis=-1))
    for i in range(cfg.enc_layers):
        x = L.block(params, f"e3d.block{i}", x, cfg.heads)
    x = L.layer_norm(params, "e3d.ln", x)
    mean = L.dense(params, "e3d.mean", x)
    logvar = T.clip(L.dense(params, "e3d.logvar", x), *LOGVAR_RANGE)
    if rng is None:
        return Posterior(mean, logvar, mean)
    noise = rng.standard_normal(mean.shape)
    z = T.add(mean, T.mul(T.exp(T.mul(logvar, 0.5)), noise))
    return Posterior(mean, logvar, z)


def decode_3d(latents: T.Tensor, anchors: np.ndarray, params: ModelParams, cfg: VaeConfig) -> T.Tensor:
    emb = T.Tensor(embed_position(anchors, cfg.pos_dims))
    x = L.dense(params, "d3d.in", T.concat([T.as_tensor(latents), emb], axis=-1))
    for i in range(cfg.dec_layers):
        x = L.block(params, f"d3d.block{i}", x, cfg.heads)
    return L.dense(params, "d3d.out", L.layer_norm(params, "d3d.ln", x))


def decode_2d(features: T.Tensor, params: ModelParams, cfg: VaeConfig) -> T.Tensor:
    """(N, d_phi) -> (N, R, R, 3) patch images in [0, 1]."""
    features = T.as_tensor(features)
    n = features.shape[0]
    x = T.reshape(L.dense(params, "d2d.expand", features), (n, cfg.tokens, cfg.d_phi))
    x = T.add(x, params["d2d.grid"])
    x = L.block(params, "d2d.block", x, cfg.heads)
    x = L.dense(params, "d2d.out", L.layer_norm(params, "d2d.ln", x))
    return _unblock(T.sigmoid(x), cfg.r, cfg.block)


# ---------------------------------------------------------------------------
# loss


def kl_term(mean: T.Tensor, logvar: T.Tensor) -> T.Tensor:
    """Diagonal-Gaussian KL to N(0, I), averaged over rows and latent dims."""
    inner = T.sub(T.add(T.square(mean), T.exp(logvar)), T.add(logvar, 1.0))
    return T.mul(T.mean(inner), 0.5)


def vae_loss(
    pooled: T.Tensor,
    pooled_hat: T.Tensor,
    recon_images: T.Tensor,
    paste_matrix,
    atlas_target: np.ndarray,
    post: Posterior,
    w: VaeLossWeights,
    feature_target: np.ndarray | None = None,
):
    """Weighted feature MSE + covered-texel atlas MSE + KL; returns (total, terms).

    ``feature_target`` replaces the (gradient-stopped) pooled features as the feature-term
    target; passing the pooled values themselves gives the same loss and gradient.
    """
    n = recon_images.shape[0]
    flat = T.reshape(recon_images, (n * recon_images.shape[1] * recon_images.shape[2], 3))
    atlas = T.sparse_matmul(paste_matrix, flat)
    # the 2D features are a fixed target here: the feature term shapes the 3D encoder and
    # decoder only, so it cannot be lowered by collapsing the 2D encoder
    target = T.detach(pooled) if feature_target is None else T.Tensor(feature_target)
    l_patch = T.mse(pooled_hat, target)
    l_render = T.mse(atlas, T.Tensor(atlas_target))
    l_kl = kl_term(post.mean, post.logvar)
    total = T.add(T.add(T.mul(l_patch, w.alpha), T.mul(l_render, w.beta)), T.mul(l_kl, w.gamma))
    terms = {"total": float(total.data), "patch": float(l_patch.data), "render": float(l_render.data), "kl": float(l_kl.data)}
    return total, terms


@dataclass
class VaeSample:
    """One prepared mesh: patch images, anchors, paste operator and target atlas texels."""

    images: np.ndarray  # (N, R, R, 3)
    anchors: np.ndarray  # (N, 6)
    paste_matrix: object  # sparse (n_covered, N*R*R)
    atlas_target: np.ndarray  # (n_covered, 3)


def forward(params: ModelParams, cfg: VaeConfig, sample: VaeSample, w: VaeLossWeights, rng=None, feature_target=None):
    feats = encode_2d(sample.images, params, cfg)
    pooled = pool(feats)
    post = encode_3d(pooled, sample.anchors, params, cfg, rng)
    pooled_hat = decode_3d(post.latents, sample.anchors, params, cfg)
    recon = decode_2d(pooled_hat, params, cfg)
    return vae_loss(pooled, pooled_hat, recon, sample.paste_matrix, sample.atlas_target, post, w, feature_target)


def encode(params: ModelParams, images: np.ndarray, anchors: np.ndarray) -> TexletSet:
    """Inference-time encoding (latents = posterior mean)."""
    cfg = config_of(params)
    post = encode_3d(pool(encode_2d(images, params, cfg)), anchors, params, cfg)
    mean, lv = post.mean.data, post.logvar.data
    return TexletSet(mean.copy(), anchors[:, :3].copy(), anchors[:, 3:].copy(), mean, lv)


def decode(params: ModelParams, latents: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Latents (N, d) -> patch images (N, R, R, 3)."""
    cfg = config_of(params)
    feats = decode_3d(T.Tensor(latents), anchors, params, cfg)
    return decode_2d(feats, params, cfg).data


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class VaeTrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100
    weights: VaeLossWeights = field(default_factory=VaeLossWeights)
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in LR_SCHEDULES:
            raise ValueError(f"schedule must be one of {LR_SCHEDULES}, got {self.schedule!r}")


class TrainingError(RuntimeError):
    pass


def train_vae(dataset, cfg: VaeConfig, tcfg: VaeTrainConfig, out_dir=None, params: ModelParams | None = None):
    """AdamW over the mesh samples (one mesh per step, round robin).

    Returns (params, curve) where curve is a list of per-step loss dicts.
    """
    if not dataset:
        raise ValueError("train_vae needs at least one prepared mesh")
    params = params or build_vae(cfg)
    rng = np.random.Generator(np.random.PCG64(tcfg.seed))
    out_dir = Path(out_dir) if out_dir else None
    curve = []
    for step in range(tcfg.steps):
        sample = dataset[step % len(dataset)]
        try:
            loss, terms = forward(params, cfg, sample, tcfg.weights, rng)
        except FloatingPointError as exc:
            _dump(out_dir, step, sample)
            raise TrainingError(f"non-finite value at step {step}: {exc}") from exc
        T.backward(loss, params)
        adamw_step(params, scheduled_lr(tcfg.lr, step, tcfg.steps, tcfg.schedule), tcfg.betas, tcfg.weight_decay)
        curve.append(terms)
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("vae step %d total %.6g patch %.6g render %.6g kl %.6g", step, *terms.values())
        if out_dir and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            params.save(out_dir / f"vae_step{step + 1:06d}.txnn")
    return params, curve


def _dump(out_dir, step, sample: VaeSample) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / f"nonfinite_step{step}.npz", images=sample.images, anchors=sample.anchors, atlas_target=sample.atlas_target)

"""End-to-end orchestration: prepare a mesh, train both models, enhance, evaluate."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import flow, vae
from .config import ConfigError, PipelineConfig, config_to_text
from .corpus import ASSETS, asset_path
from .degrade import degrade_texture
from .mesh import DualGraph, TriangleMesh, build_dual_graph, load_mesh, save_mesh
from .metrics import ViewSet, evaluate, psnr
from .nn.params import ModelParams
from .partition import PatchClustering, partition_mesh
from .patches import PatchLayout, anchors_array, to_uint8
from .remesh import RefineConfig, default_max_edge, refine_mesh

log = logging.getLogger(__name__)

FACES_PER_PATCH = 8
TOY_ASSET = "toy"


def resolve_mesh_path(name_or_path: str) -> Path:
    if name_or_path in ASSETS:
        return asset_path(name_or_path)
    return Path(name_or_path)


def open_mesh(name_or_path: str) -> TriangleMesh:
    path = resolve_mesh_path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"mesh not found: {path}")
    mesh, summary = load_mesh(path)
    log.info("loaded %s", summary.to_text().replace("\n", "; "))
    return mesh


def ensure_density(mesh: TriangleMesh, n_target: int, max_edge: float = 0.0, max_rounds: int = 16) -> TriangleMesh:
    """Refine until the mesh has at least FACES_PER_PATCH * n_target faces (or to ``max_edge``)."""
    if max_edge <= 0 and mesh.n_faces >= FACES_PER_PATCH * n_target:
        return mesh
    edge = max_edge if max_edge > 0 else default_max_edge(mesh, n_target, FACES_PER_PATCH)
    while True:
        res = refine_mesh(mesh, RefineConfig(edge, max_rounds))
        mesh = res.mesh
        if max_edge > 0 or mesh.n_faces >= FACES_PER_PATCH * n_target:
            return mesh
        edge *= 0.7


@dataclass
class Prepared:
    mesh: TriangleMesh
    graph: DualGraph
    clustering: PatchClustering
    layout: PatchLayout

    @property
    def anchors(self) -> np.ndarray:
        return anchors_array(self.clustering)

    @property
    def atlas_shape(self):
        return self.mesh.texture.shape[:2]


def prepare(mesh: TriangleMesh, cfg: PipelineConfig, clustering: PatchClustering | None = None) -> Prepared:
    mesh = ensure_density(mesh, cfg.n_target, cfg.refine_max_edge, cfg.refine_max_rounds)
    graph = build_dual_graph(mesh)
    if clustering is None:
        clustering = partition_mesh(mesh, graph, cfg.n_target, cfg.cost_weights())
    return Prepared(mesh, graph, clustering, PatchLayout(mesh, clustering, cfg.R))


def vae_sample(prep: Prepared, texture: np.ndarray) -> vae.VaeSample:
    h, w = prep.atlas_shape
    op = prep.layout.paste_operator(h, w)
    tex = texture.astype(np.float64) / 255.0
    return vae.VaeSample(prep.layout.sample(texture), prep.anchors, op.matrix, tex[op.covered])


def encode_texture(prep: Prepared, vae_params: ModelParams, texture: np.ndarray) -> vae.TexletSet:
    return vae.encode(vae_params, prep.layout.sample(texture), prep.anchors)


def latents_to_atlas(prep: Prepared, vae_params: ModelParams, latents: np.ndarray) -> np.ndarray:
    """Decode latents to patches and paste them with the mesh's own UVs; uint8 atlas."""
    images = vae.decode(vae_params, latents, prep.anchors)
    h, w = prep.atlas_shape
    return to_uint8(prep.layout.paste_operator(h, w).apply(images))


def check_checkpoints(cfg: PipelineConfig, vae_params: ModelParams, dit_params: ModelParams, n_patches: int | None = None):
    vc = vae.config_of(vae_params)
    dc = flow.dit_config_of(dit_params)
    problems = []
    if vc.R != cfg.R:
        problems.append(f"VAE checkpoint R={vc.R} but config R={cfg.R}")
    if dc.d != vc.d:
        problems.append(f"DiT latent width d={dc.d} but VAE d={vc.d}")
    if vc.d != cfg.vae_d:
        problems.append(f"VAE checkpoint d={vc.d} but config d={cfg.vae_d}")
    n_ckpt = int(dit_params.meta.get("n_patches", 0))
    n_run = cfg.n_target if n_patches is None else n_patches
    if n_ckpt and n_ckpt != n_run:
        problems.append(f"DiT checkpoint N={n_ckpt} but runtime N={n_run}")
    if problems:
        raise ConfigError("; ".join(problems))


def enhance(
    mesh: TriangleMesh,
    degraded: np.ndarray,
    vae_params: ModelParams,
    dit_params: ModelParams,
    cfg: PipelineConfig,
    prep: Prepared | None = None,
) -> np.ndarray:
    """Degraded texture -> enhanced uint8 atlas in the input mesh's UV layout."""
    check_checkpoints(cfg, vae_params, dit_params)
    prep = prep or prepare(mesh.with_texture(degraded), cfg)
    cond = encode_texture(prep, vae_params, degraded)
    latents = flow.generate(dit_params, cond.posterior_mean, prep.anchors, cfg.sample_steps, cfg.guidance(), cfg.sample_seed())
    return latents_to_atlas(prep, vae_params, latents)


def atlas_psnr(a: np.ndarray, b: np.ndarray, covered: np.ndarray) -> float:
    return float(psnr(a.astype(np.float64) / 255.0, b.astype(np.float64) / 255.0, covered))


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(image).save(path)


def run_pipeline(cfg: PipelineConfig, out_dir=None, evaluate_views: bool = True) -> dict:
    """partition -> degrade -> train VAE -> train DiT -> enhance -> eval, writing every artifact."""
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")

    prep = prepare(open_mesh(cfg.mesh), cfg)
    mesh = prep.mesh
    prep.clustering.save(out / "clustering.json")
    clean = mesh.texture
    degraded = degrade_texture(clean, cfg.degrade_config())
    save_png(degraded, out / "degraded.png")

    vae_params, vae_curve = vae.train_vae([vae_sample(prep, clean)], cfg.vae_config(), cfg.vae_train_config(), out)
    vae_params.meta["n_patches"] = float(len(prep.clustering))
    vae_params.save(out / "vae.txnn")

    x0 = encode_texture(prep, vae_params, clean).posterior_mean
    xc = encode_texture(prep, vae_params, degraded).posterior_mean
    dit_params = flow.build_dit(cfg.dit_config())
    dit_params.meta["n_patches"] = float(len(prep.clustering))
    dit_params, dit_curve = flow.train_dit([(x0, xc, prep.anchors)], cfg.dit_config(), cfg.dit_train_config(), cfg.guidance(), out, dit_params)
    dit_params.save(out / "dit.txnn")

    enhanced = enhance(mesh, degraded, vae_params, dit_params, cfg, prep)
    save_png(enhanced, out / "enhanced.png")
    recon = latents_to_atlas(prep, vae_params, x0)
    covered = prep.layout.paste_operator(*prep.atlas_shape).covered
    result = {
        "n_faces": mesh.n_faces,
        "n_patches": len(prep.clustering),
        "psnr_degraded": atlas_psnr(degraded, clean, covered),
        "psnr_enhanced": atlas_psnr(enhanced, clean, covered),
        "psnr_vae_recon": atlas_psnr(recon, clean, covered),
        "vae_patch_loss_first": vae_curve[0]["patch"],
        "vae_patch_loss_last": vae_curve[-1]["patch"],
        "dit_loss_first": dit_curve[0],
        "dit_loss_last": dit_curve[-1],
    }
    (out / "vae_curve.json").write_text(json.dumps(vae_curve), encoding="utf-8")
    (out / "dit_curve.json").write_text(json.dumps(dit_curve), encoding="utf-8")
    if evaluate_views:
        views = ViewSet(cfg.eval_views, cfg.eval_size)
        rep_enh = evaluate(mesh, clean, enhanced, views)
        rep_deg = evaluate(mesh, clean, degraded, views)
        (out / "metrics_enhanced.txt").write_text(rep_enh.to_text(), encoding="utf-8")
        (out / "metrics_degraded.txt").write_text(rep_deg.to_text(), encoding="utf-8")
        result.update(view_psnr_enhanced=rep_enh.psnr_db, view_ssim_enhanced=rep_enh.ssim,
                      view_psnr_degraded=rep_deg.psnr_db, view_ssim_degraded=rep_deg.ssim)
    (out / "summary.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    save_mesh(mesh.with_texture(enhanced), out / "enhanced_mesh.obj")
    return result

"""Command-line entry point: ``texlet <subcommand> ...``.

Exit codes: 0 success, 1 processing failure, 2 invalid or inconsistent configuration,
3 missing input. Failures print one ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import colorsys
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import flow, pipeline
from .config import ConfigError, PipelineConfig, load_config
from .degrade import degrade_texture
from .mesh import build_dual_graph, load_mesh, read_texture, save_mesh
from .metrics import ViewSet, evaluate
from .nn.params import CheckpointError, ModelParams
from .partition import PatchClustering, partition_mesh
from .patches import PatchLayout, load_patches, paste_patches, save_patches, to_uint8, uv_coverage
from .raster import dilate, rasterize, uv_to_pixel

EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3

MESH_FILE = "mesh.obj"
CLUSTERING_FILE = "clustering.json"
PATCHES_FILE = "patches.png"


# ---------------------------------------------------------------------------
# config plumbing: file first, then flags


def _cfg(args, **flag_map) -> PipelineConfig:
    base = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {attr: getattr(args, flag) for flag, attr in flag_map.items() if getattr(args, flag, None) is not None}
    try:
        return replace(base, **overrides).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}")
    return path


def _load_work(work: Path):
    mesh, _ = load_mesh(_need(work / MESH_FILE), normalize=False)
    graph = build_dual_graph(mesh)
    clustering = PatchClustering.load(_need(work / CLUSTERING_FILE), mesh, graph)
    return mesh, clustering


def _load_params(path) -> ModelParams:
    return ModelParams.load(_need(path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_partition(args) -> None:
    cfg = _cfg(
        args, n="n_target", mesh="mesh", count_mode="count_mode", w_fit="w_fit", w_dir="w_dir", w_shape="w_shape",
        w_count="w_count", max_edge="refine_max_edge", max_rounds="refine_max_rounds",
    )
    mesh = pipeline.ensure_density(pipeline.open_mesh(cfg.mesh), cfg.n_target, cfg.refine_max_edge, cfg.refine_max_rounds)
    clustering = partition_mesh(mesh, build_dual_graph(mesh), cfg.n_target, cfg.cost_weights())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out / MESH_FILE)
    clustering.save(out / CLUSTERING_FILE)
    print(f"faces = {mesh.n_faces}\nclusters = {len(clustering)}")
    if clustering.warning:
        print(f"warning = {clustering.warning}")


def cmd_unwrap(args) -> None:
    cfg = _cfg(args, R="R")
    work = Path(args.work)
    mesh, clustering = _load_work(work)
    texture = read_texture(_need(args.texture)) if args.texture else mesh.texture
    layout = PatchLayout(mesh, clustering, cfg.R)
    save_patches(layout.patches(texture), work / PATCHES_FILE)
    print(f"patches = {len(clustering)}\nR = {cfg.R}")


def cmd_pack(args) -> None:
    work = Path(args.work)
    mesh, clustering = _load_work(work)
    patches = load_patches(_need(args.patches or work / "patches.json"))
    atlas = to_uint8(paste_patches(mesh, clustering, patches))
    pipeline.save_png(atlas, args.out)
    covered = uv_coverage(mesh)
    print(f"atlas = {args.out}\npsnr_db = {pipeline.atlas_psnr(atlas, mesh.texture, covered)!r}")


def cmd_degrade(args) -> None:
    cfg = _cfg(args, seed="seed", factor="degrade_factor", blur="degrade_blur", noise="degrade_noise", jpeg_q="degrade_jpeg")
    dcfg = cfg.degrade_config()
    if args.seed is not None:
        dcfg = replace(dcfg, seed=args.seed)
    out = degrade_texture(read_texture(_need(args.texture)), dcfg)
    pipeline.save_png(out, args.out)
    print(f"degraded = {args.out}")


def _training_prep(cfg: PipelineConfig):
    return pipeline.prepare(pipeline.open_mesh(cfg.mesh), cfg)


def cmd_train_vae(args) -> None:
    from . import vae

    cfg = _cfg(args, mesh="mesh", steps="vae_steps", lr="vae_lr", seed="seed")
    prep = _training_prep(cfg)
    out = Path(args.out or Path(cfg.out_dir) / "vae.txnn")
    out.parent.mkdir(parents=True, exist_ok=True)
    params, curve = vae.train_vae([pipeline.vae_sample(prep, prep.mesh.texture)], cfg.vae_config(), cfg.vae_train_config(), out.parent)
    params.meta["n_patches"] = float(len(prep.clustering))
    params.save(out)
    out.with_suffix(".curve.json").write_text(json.dumps(curve), encoding="utf-8")
    print(f"checkpoint = {out}\nloss_first = {curve[0]['total']!r}\nloss_last = {curve[-1]['total']!r}")


def cmd_train_dit(args) -> None:
    cfg = _cfg(args, mesh="mesh", steps="dit_steps", lr="dit_lr", seed="seed")
    vae_params = _load_params(args.vae_ckpt)
    prep = _training_prep(cfg)
    degraded = read_texture(_need(args.degraded))
    x0 = pipeline.encode_texture(prep, vae_params, prep.mesh.texture).posterior_mean
    xc = pipeline.encode_texture(prep, vae_params, degraded).posterior_mean
    params = flow.build_dit(cfg.dit_config())
    params.meta["n_patches"] = float(len(prep.clustering))
    params, curve = flow.train_dit([(x0, xc, prep.anchors)], cfg.dit_config(), cfg.dit_train_config(), cfg.guidance(), None, params)
    out = Path(args.out or Path(cfg.out_dir) / "dit.txnn")
    out.parent.mkdir(parents=True, exist_ok=True)
    params.save(out)
    print(f"checkpoint = {out}\nloss_first = {curve[0]!r}\nloss_last = {curve[-1]!r}")


def cmd_enhance(args) -> None:
    vae_params = _load_params(args.vae_ckpt)
    dit_params = _load_params(args.dit_ckpt)
    base = _cfg(args, mesh="mesh", steps="sample_steps", omega="guidance_scale", cfg_form="cfg_form", seed="seed", n="n_target", R="R")
    if args.n is None and "n_patches" in dit_params.meta:
        base = replace(base, n_target=int(dit_params.meta["n_patches"]))
    if args.R is None and "R" in vae_params.meta:
        base = replace(base, R=int(vae_params.meta["R"]))
    pipeline.check_checkpoints(base, vae_params, dit_params)
    mesh = pipeline.open_mesh(base.mesh)
    degraded = read_texture(_need(args.texture))
    enhanced = pipeline.enhance(mesh, degraded, vae_params, dit_params, base)
    pipeline.save_png(enhanced, args.out)
    print(f"enhanced = {args.out}")


def cmd_eval(args) -> None:
    cfg = _cfg(args, views="eval_views", size="eval_size", mesh="mesh")
    mesh = pipeline.open_mesh(cfg.mesh)
    ta = read_texture(_need(args.texture_a)) if args.texture_a else mesh.texture
    tb = read_texture(_need(args.texture_b))
    dump = None
    if args.dump_dir:
        ddir = Path(args.dump_dir)
        ddir.mkdir(parents=True, exist_ok=True)

        def dump(k, ia, ib, mask):
            pipeline.save_png(to_uint8(np.concatenate([ia, ib], axis=1)), ddir / f"view{k:03d}.png")

    report = evaluate(mesh, ta, tb, ViewSet(cfg.eval_views, cfg.eval_size), dump)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text if not args.out else f"report = {args.out}\npsnr_db = {report.psnr_db!r}\nssim = {report.ssim!r}\n")


def cluster_colors(n: int) -> np.ndarray:
    hues = (np.arange(n) * 0.618033988749895) % 1.0
    return np.array([colorsys.hsv_to_rgb(h, 0.65, 0.95) for h in hues])


def cmd_viz(args) -> None:
    cfg = _cfg(args, R="R")
    work = Path(args.work)
    mesh, clustering = _load_work(work)
    out = Path(args.out_dir or work)
    out.mkdir(parents=True, exist_ok=True)
    patches = PatchLayout(mesh, clustering, cfg.R).patches()
    pick = np.linspace(0, len(patches) - 1, min(args.samples, len(patches))).round().astype(int)
    cols = math.ceil(math.sqrt(len(pick)))
    rows = math.ceil(len(pick) / cols)
    grid = np.ones((rows * (cfg.R + 2), cols * (cfg.R + 2), 3))
    for k, i in enumerate(pick):
        r, c = divmod(k, cols)
        grid[r * (cfg.R + 2) + 1 : r * (cfg.R + 2) + 1 + cfg.R, c * (cfg.R + 2) + 1 : c * (cfg.R + 2) + 1 + cfg.R] = patches[i].image
    pipeline.save_png(to_uint8(grid), out / "viz_patches.png")

    h, w = mesh.texture.shape[:2]
    fid, _ = rasterize(uv_to_pixel(mesh.face_uvs, w, h), w, h)
    colors = cluster_colors(len(clustering))
    img = np.zeros((h, w, 3))
    covered = fid >= 0
    img[covered] = colors[clustering.face_to_cluster[fid[covered]]]
    save_mesh(mesh.with_texture(to_uint8(dilate(img, covered))), out / "viz_clusters.obj")
    print(f"patch_tiles = {out / 'viz_patches.png'}\ncluster_mesh = {out / 'viz_clusters.obj'}")


def cmd_run(args) -> None:
    cfg = _cfg(args, seed="seed", mesh="mesh")
    result = pipeline.run_pipeline(cfg, args.out_dir, evaluate_views=not args.no_eval)
    for k, v in result.items():
        print(f"{k} = {v!r}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="texlet", description="Patch-latent texture enhancement pipeline.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.add_argument("--config", help="flat 'section.key = value' config file; flags override it")
        sp.set_defaults(func=func)
        return sp

    sp = add("partition", cmd_partition, "refine if needed and partition a mesh into patches")
    sp.add_argument("--mesh", help="OBJ path or bundled asset name (default: config mesh.path)")
    sp.add_argument("--n", type=int, help="target patch count (default: config partition.n_target)")
    sp.add_argument("--count-mode", choices=["change", "union"], help="patch-count cost form")
    sp.add_argument("--w-fit", type=float, help="plane-fit cost weight")
    sp.add_argument("--w-dir", type=float, help="normal-deviation cost weight")
    sp.add_argument("--w-shape", type=float, help="compactness cost weight")
    sp.add_argument("--w-count", type=float, help="patch-count cost weight")
    sp.add_argument("--max-edge", type=float, help="refinement edge threshold as a fraction of the bbox diagonal (0 = automatic)")
    sp.add_argument("--max-rounds", type=int, help="maximum refinement rounds")
    sp.add_argument("--out-dir", required=True, help="work directory for mesh.obj and clustering.json")

    sp = add("unwrap", cmd_unwrap, "unwrap every patch of a work directory to an R x R tile")
    sp.add_argument("--work", required=True, help="work directory written by 'partition'")
    sp.add_argument("--R", type=int, help="patch resolution (default: config patch.R)")
    sp.add_argument("--texture", help="unwrap this texture instead of the mesh's own")

    sp = add("pack", cmd_pack, "paste patch tiles back into a UV atlas")
    sp.add_argument("--work", required=True, help="work directory written by 'partition'")
    sp.add_argument("--patches", help="patch sidecar JSON (default: <work>/patches.json)")
    sp.add_argument("--out", required=True, help="output atlas PNG")

    sp = add("degrade", cmd_degrade, "apply blur, resampling, noise and JPEG to a texture")
    sp.add_argument("--texture", required=True, help="input PNG")
    sp.add_argument("--out", required=True, help="output PNG")
    sp.add_argument("--seed", type=int, help="noise seed (default: derived from the root seed)")
    sp.add_argument("--factor", type=int, choices=[1, 2, 4], help="down/up resampling factor")
    sp.add_argument("--blur", type=float, help="Gaussian blur sigma in texels, 0..3")
    sp.add_argument("--noise", type=float, help="noise sigma in 8-bit units, 0..10")
    sp.add_argument("--jpeg-q", type=int, help="JPEG quality 30..100 (100 = no JPEG)")

    sp = add("train-vae", cmd_train_vae, "train the patch VAE on one mesh")
    sp.add_argument("--mesh", help="OBJ path or bundled asset name")
    sp.add_argument("--steps", type=int, help="optimizer steps")
    sp.add_argument("--lr", type=float, help="AdamW learning rate")
    sp.add_argument("--seed", type=int, help="root seed")
    sp.add_argument("--out", help="checkpoint path (default: <out_dir>/vae.txnn)")

    sp = add("train-dit", cmd_train_dit, "train the latent flow transformer on (clean, degraded) latents")
    sp.add_argument("--mesh", help="OBJ path or bundled asset name (clean texture)")
    sp.add_argument("--degraded", required=True, help="degraded texture PNG")
    sp.add_argument("--vae-ckpt", required=True, help="trained VAE checkpoint")
    sp.add_argument("--steps", type=int, help="optimizer steps")
    sp.add_argument("--lr", type=float, help="AdamW learning rate")
    sp.add_argument("--seed", type=int, help="root seed")
    sp.add_argument("--out", help="checkpoint path (default: <out_dir>/dit.txnn)")

    sp = add("enhance", cmd_enhance, "enhance a degraded texture with trained checkpoints")
    sp.add_argument("--mesh", help="OBJ path or bundled asset name")
    sp.add_argument("--texture", required=True, help="degraded texture PNG")
    sp.add_argument("--vae-ckpt", required=True)
    sp.add_argument("--dit-ckpt", required=True)
    sp.add_argument("--steps", type=int, help="Euler sampling steps")
    sp.add_argument("--omega", type=float, help="guidance scale (>= 1)")
    sp.add_argument("--cfg-form", choices=list(flow.CFG_FORMS), help="guidance combination")
    sp.add_argument("--seed", type=int, help="root seed (sampler seed is derived from it)")
    sp.add_argument("--n", type=int, help="patch count (default: from the DiT checkpoint)")
    sp.add_argument("--R", type=int, help="patch resolution (default: from the VAE checkpoint)")
    sp.add_argument("--out", required=True, help="output atlas PNG")

    sp = add("eval", cmd_eval, "render both textures from K views and report PSNR / SSIM")
    sp.add_argument("--mesh", help="OBJ path or bundled asset name")
    sp.add_argument("--texture-a", help="reference texture (default: the mesh's own)")
    sp.add_argument("--texture-b", required=True, help="texture to score")
    sp.add_argument("--views", type=int, help="number of views (default 150)")
    sp.add_argument("--size", type=int, help="render size in pixels (default 256)")
    sp.add_argument("--out", help="write the report here instead of stdout")
    sp.add_argument("--dump-dir", help="write side-by-side renders per view")

    sp = add("viz", cmd_viz, "export sample patch tiles and a per-cluster colored mesh")
    sp.add_argument("--work", required=True, help="work directory written by 'partition'")
    sp.add_argument("--R", type=int, help="patch resolution")
    sp.add_argument("--samples", type=int, default=16, help="number of patch tiles")
    sp.add_argument("--out-dir", help="output directory (default: the work directory)")

    sp = add("run", cmd_run, "full pipeline: partition, degrade, train both models, enhance, eval")
    sp.add_argument("--mesh", help="OBJ path or bundled asset name")
    sp.add_argument("--seed", type=int, help="root seed")
    sp.add_argument("--out-dir", help="output directory (default: config paths.out_dir)")
    sp.add_argument("--no-eval", action="store_true", help="skip the multi-view evaluation")
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing input", exc)
    except CheckpointError as exc:
        return _fail(EXIT_CONFIG, "checkpoint", exc)
    except Exception as exc:  # noqa: BLE001 - one-line report for any processing failure
        return _fail(EXIT_FAILURE, type(exc).__name__, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())

import json

import numpy as np
import pytest
from PIL import Image

from texlet import cli
from texlet.config import ConfigError, PipelineConfig, config_to_text, derive_seed, load_config, parse_config_text
from texlet.nn.params import ModelParams

TINY_TEXT = """\
# tiny models so the whole CLI flow runs in seconds
partition.n_target = 16
patch.R = 16
vae.r = 2
vae.d_phi = 16
vae.d = 4
vae.enc_layers = 1
vae.dec_layers = 1
vae.width = 16
vae.heads = 2
vae.pos_dims = 12
vae.steps = 3
dit.width = 16
dit.layers = 1
dit.heads = 2
dit.steps = 3
dit.batch = 2
sample.steps = 2
eval.views = 4
eval.size = 32
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_TEXT + f"paths.out_dir = {tmp_path / 'out'}\n")
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(text):
    return dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)


# ---------------------------------------------------------------------------
# configuration


def test_config_text_roundtrip():
    cfg = PipelineConfig(seed=7, n_target=128, vae_lr=3e-4, dit_reweight=False, cfg_form="paper_literal")
    assert parse_config_text(config_to_text(cfg)) == cfg


def test_config_rejects_unknown_and_malformed():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("vae.depth = 3")
    with pytest.raises(ConfigError, match="expected"):
        parse_config_text("vae.steps 3")
    with pytest.raises(ConfigError, match="vae.steps"):
        parse_config_text("vae.steps = many")


def test_cross_field_validation_names_constraint():
    with pytest.raises(ConfigError, match="divisible"):
        PipelineConfig(R=30, vae_r=4).validate()
    with pytest.raises(ConfigError, match="n_target"):
        PipelineConfig(n_target=0).validate()
    with pytest.raises(ConfigError):
        PipelineConfig(degrade_noise=50).validate()


def test_seeds_are_per_subsystem_and_stable():
    assert derive_seed(0, "vae.init") == derive_seed(0, "vae.init")
    assert derive_seed(0, "vae.init") != derive_seed(0, "dit.init")
    assert derive_seed(0, "vae.init") != derive_seed(1, "vae.init")
    assert 0 <= derive_seed(5, "x") < 2**64


def test_load_config_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.cfg")


# ---------------------------------------------------------------------------
# exit codes


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["partition", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--n", "--count-mode", "--max-edge", "--out-dir", "--config"):
        assert flag in out
    assert "default" in out


def test_config_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("patch.R = 30\nvae.r = 4\n")
    code, _, err = run(capsys, "partition", "--config", bad, "--out-dir", tmp_path / "w")
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: config:") and "divisible" in err


def test_missing_input_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "degrade", "--texture", tmp_path / "none.png", "--out", tmp_path / "x.png")
    assert code == 3 and err.startswith("error: missing input:")
    code, _, _ = run(capsys, "unwrap", "--work", tmp_path / "empty")
    assert code == 3


def test_checkpoint_mismatch_exit_code(capsys, tmp_path, tiny_config):
    vae_ckpt = tmp_path / "v.txnn"
    dit_ckpt = tmp_path / "d.txnn"
    from texlet import flow, vae

    vae.build_vae(vae.VaeConfig(R=16, r=2, d_phi=16, d=4, enc_layers=1, dec_layers=1, width=16, heads=2, pos_dims=12)).save(vae_ckpt)
    flow.build_dit(flow.DitConfig(d=8, width=16, layers=1, heads=2, pos_dims=12)).save(dit_ckpt)
    deg = tmp_path / "deg.png"
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(deg)
    code, _, err = run(
        capsys, "enhance", "--config", tiny_config, "--mesh", "toy", "--texture", deg,
        "--vae-ckpt", vae_ckpt, "--dit-ckpt", dit_ckpt, "--out", tmp_path / "e.png",
    )
    assert code == 2 and "d=8" in err


def test_processing_failure_exit_code(capsys, tmp_path):
    broken = tmp_path / "broken.obj"
    broken.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    code, _, err = run(capsys, "partition", "--mesh", broken, "--n", 1, "--out-dir", tmp_path / "w")
    assert code == 1 and "parameterization" in err


# ---------------------------------------------------------------------------
# subcommand flow


def test_partition_unwrap_pack_roundtrip(capsys, tmp_path):
    work = tmp_path / "work"
    code, out, _ = run(capsys, "partition", "--mesh", "toy", "--n", 64, "--out-dir", work)
    assert code == 0 and kv(out)["clusters"] == "64"
    assert (work / "mesh.obj").exists() and (work / "clustering.json").exists()
    code, out, _ = run(capsys, "unwrap", "--work", work, "--R", 64)
    assert code == 0 and kv(out)["patches"] == "64"
    code, out, _ = run(capsys, "pack", "--work", work, "--out", tmp_path / "atlas.png")
    assert code == 0
    assert float(kv(out)["psnr_db"]) > 35
    assert np.asarray(Image.open(tmp_path / "atlas.png")).shape == (64, 64, 3)


def test_subcommands_idempotent(capsys, tmp_path):
    outs = []
    for k in range(2):
        work = tmp_path / f"w{k}"
        run(capsys, "partition", "--mesh", "toy", "--n", 32, "--out-dir", work)
        run(capsys, "unwrap", "--work", work, "--R", 16)
        run(capsys, "degrade", "--texture", work / "mesh.png", "--out", work / "deg.png", "--seed", 4)
        outs.append([(work / name).read_bytes() for name in ("clustering.json", "patches.png", "deg.png")])
    assert outs[0] == outs[1]


def test_degrade_flags_override(capsys, tmp_path):
    tex = tmp_path / "t.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(tex)
    code, _, _ = run(capsys, "degrade", "--texture", tex, "--out", tmp_path / "same.png",
                     "--factor", 1, "--blur", 0, "--noise", 0, "--jpeg-q", 100)
    assert code == 0
    assert np.array_equal(np.asarray(Image.open(tmp_path / "same.png")), np.asarray(Image.open(tex)))
    code, _, err = run(capsys, "degrade", "--texture", tex, "--out", tmp_path / "x.png", "--noise", 11)
    assert code == 2 and "noise" in err


def test_viz_exports(capsys, tmp_path):
    work = tmp_path / "work"
    run(capsys, "partition", "--mesh", "toy", "--n", 20, "--out-dir", work)
    code, out, _ = run(capsys, "viz", "--work", work, "--R", 16)
    assert code == 0
    tiles = np.asarray(Image.open(work / "viz_patches.png"))
    assert tiles.shape == (4 * 18, 4 * 18, 3)
    assert (work / "viz_clusters.obj").exists() and (work / "viz_clusters.png").exists()


def test_eval_report(capsys, tmp_path, tiny_config):
    work = tmp_path / "work"
    run(capsys, "partition", "--mesh", "toy", "--n", 16, "--out-dir", work)
    code, out, _ = run(capsys, "eval", "--config", tiny_config, "--mesh", work / "mesh.obj",
                       "--texture-b", work / "mesh.png", "--out", tmp_path / "rep.txt")
    assert code == 0 and kv(out)["psnr_db"] == "99.0"
    assert (tmp_path / "rep.txt").read_text().count("\nview ") == 4


def test_eval_default_view_count():
    args = cli.build_parser().parse_args(["eval", "--texture-b", "x.png"])
    assert cli._cfg(args, views="eval_views").eval_views == 150


def test_training_and_enhance_flow(capsys, tmp_path, tiny_config):
    out = tmp_path / "out"
    code, text, _ = run(capsys, "train-vae", "--config", tiny_config, "--mesh", "toy")
    assert code == 0 and (out / "vae.txnn").exists()
    assert len(json.loads((out / "vae.curve.json").read_text())) == 3
    deg = tmp_path / "deg.png"
    assert run(capsys, "degrade", "--config", tiny_config, "--texture", cli.pipeline.resolve_mesh_path("toy").with_suffix(".png"), "--out", deg)[0] == 0
    code, text, _ = run(capsys, "train-dit", "--config", tiny_config, "--mesh", "toy", "--degraded", deg, "--vae-ckpt", out / "vae.txnn")
    assert code == 0 and (out / "dit.txnn").exists()
    assert ModelParams.load(out / "dit.txnn").meta["n_patches"] == 16
    images = []
    for k in range(2):
        dest = tmp_path / f"enh{k}.png"
        code, _, err = run(capsys, "enhance", "--config", tiny_config, "--mesh", "toy", "--texture", deg,
                           "--vae-ckpt", out / "vae.txnn", "--dit-ckpt", out / "dit.txnn", "--out", dest)
        assert code == 0, err
        images.append(dest.read_bytes())
    assert images[0] == images[1]
    code, _, err = run(capsys, "enhance", "--config", tiny_config, "--mesh", "toy", "--texture", deg, "--n", 20,
                       "--vae-ckpt", out / "vae.txnn", "--dit-ckpt", out / "dit.txnn", "--out", tmp_path / "bad.png")
    assert code == 2 and "N=16" in err


def test_run_subcommand_writes_artifacts(capsys, tmp_path, tiny_config):
    out = tmp_path / "run"
    code, text, err = run(capsys, "run", "--config", tiny_config, "--out-dir", out)
    assert code == 0, err
    summary = json.loads((out / "summary.json").read_text())
    assert kv(text)["n_patches"] == "16" == str(summary["n_patches"])
    for name in ("config.txt", "clustering.json", "degraded.png", "vae.txnn", "dit.txnn", "enhanced.png",
                 "metrics_enhanced.txt", "metrics_degraded.txt", "enhanced_mesh.obj"):
        assert (out / name).exists(), name
    assert load_config(out / "config.txt") == load_config(tiny_config).__class__(**{
        **load_config(tiny_config).__dict__, "out_dir": load_config(out / "config.txt").out_dir})

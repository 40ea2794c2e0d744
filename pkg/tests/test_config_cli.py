import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from tilecascade.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, main
from tilecascade.config import (
    ConfigError,
    GenerateConfig,
    StageCfg,
    apply_override,
    build_cascade,
    build_codec,
    build_sampler,
    build_stage,
    dump,
    load_document,
    validate,
)

MINIMAL = Path(__file__).resolve().parents[1] / "configs" / "minimal.json"


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


# ---------------------------------------------------------------------------
# config layer


def test_apply_override_paths():
    doc = {"stages": [{"name": "a", "denoiser": {"kind": "consistency"}}]}
    apply_override(doc, "stages.0.denoiser.detail_var=0.5")
    apply_override(doc, "world.base_zoom=12")
    apply_override(doc, "negative_prompt=blurry")
    apply_override(doc, "sampler.kind=\"ddpm\"")
    assert doc["stages"][0]["denoiser"]["detail_var"] == 0.5
    assert doc["world"] == {"base_zoom": 12}
    assert doc["negative_prompt"] == "blurry" and doc["sampler"]["kind"] == "ddpm"
    for bad in ("novalue", "stages.3.name=x", "=1"):
        with pytest.raises(ConfigError):
            apply_override(doc, bad)


def test_validation_names_the_field():
    with pytest.raises(ConfigError, match="world: Field required"):
        validate(GenerateConfig, {})
    with pytest.raises(ConfigError, match="world.base_zoom"):
        validate(GenerateConfig, {"world": {}})
    with pytest.raises(ConfigError, match="stages.0.denoiser.kind"):
        validate(GenerateConfig, {"world": {"base_zoom": 10}, "stages": [{"name": "s", "denoiser": {"kind": "magic"}}]})
    with pytest.raises(ConfigError, match="bogus"):
        validate(GenerateConfig, {"world": {"base_zoom": 10}, "bogus": 1})
    with pytest.raises(ConfigError, match="path"):
        validate(GenerateConfig, {"world": {"base_zoom": 10}, "base": {"name": "base", "denoiser": {"kind": "linear"}}})


def test_resolved_config_round_trips():
    cfg = validate(GenerateConfig, load_document(str(MINIMAL)))
    again = validate(GenerateConfig, json.loads(dump(cfg)))
    assert again == cfg and dump(again) == dump(cfg)


def test_build_cascade_uses_default_lambda_table():
    cfg = validate(GenerateConfig, load_document(str(MINIMAL)))
    casc, region = build_cascade(cfg)
    assert [s.lambda_neg for s in casc.stages] == [5.0, 2.0]
    assert casc.zooms == [10, 12, 14] and region.nx == 1
    off = validate(GenerateConfig, load_document(str(MINIMAL), ["stages.0.lambda_neg=0"]))
    assert build_cascade(off)[0].stages[0].lambda_neg == 0.0


def test_guided_stationary_stage_needs_negative():
    cfg = validate(GenerateConfig, {"world": {"base_zoom": 10}, "stages": []})
    codec, sampler = build_codec(cfg.codec), build_sampler(cfg.sampler)
    stage = StageCfg(name="s", lambda_neg=1.0, denoiser={"kind": "stationary"})
    with pytest.raises(ConfigError):
        build_stage(stage, codec, sampler, cfg.negative_prompt)


def test_cascade_errors_become_config_errors():
    cfg = validate(GenerateConfig, load_document(str(MINIMAL), ["chunk.halo=8"]))
    with pytest.raises(ConfigError, match="halo"):
        build_cascade(cfg)


# ---------------------------------------------------------------------------
# generate


def test_generate_minimal_and_rerun_from_resolved_config(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", str(MINIMAL), "--out", str(out1)]) == EXIT_OK
    for z, n in ((10, 1), (12, 16), (14, 256)):
        assert len(list((out1 / "tiles" / str(z)).rglob("*.png"))) == n
    assert (out1 / "run.log").read_text()
    summary = json.loads((out1 / "summary.json").read_text())
    assert summary["layers"]["14"] == [512, 512, 3]
    resolved = out1 / "resolved_config.json"
    assert main(["generate", "--config", str(resolved), "--out", str(out2), "--threads", "3"]) == EXIT_OK
    assert _tree_hash(out1 / "tiles") == _tree_hash(out2 / "tiles")
    assert json.loads((out2 / "resolved_config.json").read_text())["threads"] == 3


def test_generate_seed_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["generate", "--config", str(MINIMAL), "--out", str(a), "--set", "stages=[]"])
    main(["generate", "--config", str(MINIMAL), "--out", str(b), "--set", "stages=[]", "--set", "seed=1"])
    assert _tree_hash(a / "tiles") != _tree_hash(b / "tiles")


def test_exit_codes(tmp_path, capsys):
    cfg = _write_json(tmp_path / "c.json", {"seed": 0})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "world: Field required" in capsys.readouterr().err
    assert main(["generate", "--config", str(MINIMAL), "--set", "stages.0.denoiser.kind=magic",
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["generate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["ablate", "--mode", "sideways", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["metrics", str(empty), str(empty), "--out", str(tmp_path / "m")]) == EXIT_RUNTIME
    assert main(["metrics", str(tmp_path / "nope"), str(empty), "--out", str(tmp_path / "m")]) == EXIT_IO
    with pytest.raises(SystemExit):
        main(["generate", "--threads", "0"])


# ---------------------------------------------------------------------------
# superres and ablate


def test_superres_command(tmp_path):
    low = np.random.default_rng(0).integers(0, 256, (32, 64, 3), dtype=np.uint8)
    Image.fromarray(low).save(tmp_path / "low.png")
    cfg = _write_json(tmp_path / "s.json", {
        "tile_size": 32,
        "stage": {"name": "10to12", "lambda_neg": 0, "denoiser": {"kind": "consistency"}},
        "sampler": {"steps": 5},
    })
    out = tmp_path / "o"
    assert main(["superres", "--config", cfg, "--input", str(tmp_path / "low.png"), "--out", str(out)]) == EXIT_OK
    high = np.asarray(Image.open(out / "superres.png"))
    assert high.shape == (128, 256, 3)
    down = high.reshape(32, 4, 64, 4, 3).mean(axis=(1, 3))
    assert np.abs(down - low).max() <= 2


def test_ablate_tiling_report(tmp_path):
    out = tmp_path / "o"
    args = ["ablate", "--mode", "tiling", "--out", str(out),
            "--set", "canvas=64", "--set", "tile=32", "--set", "stride=16", "--set", "sampler.steps=20"]
    assert main(args) == EXIT_OK
    with open(out / "seams.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["strategy"] for r in rows] == ["naive_stitch", "gaussian_composite", "latent_average", "mixture"]
    ratios = {r["strategy"]: float(r["ratio"]) for r in rows}
    assert min(ratios, key=ratios.get) == "mixture"
    for r in rows:
        assert (out / f"{r['strategy']}.png").exists() and (out / f"{r['strategy']}_latent.npy").exists()


def test_ablate_direct_with_negative_sweep(tmp_path):
    cascade = json.loads(MINIMAL.read_text())
    cascade["world"]["tile_size"] = 16
    cfg = _write_json(tmp_path / "d.json", {"cascade": cascade})
    out = tmp_path / "o"
    assert main(["ablate", "--mode", "direct", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "direct_report.json").read_text())
    assert rep["scale"] == 16
    assert rep["r_cascaded_vs_base"] >= 0.9
    sweep = rep["negative_sweep"]
    assert sweep["lambda"] == {"10to12": [0.0, 5.0], "12to14": [0.0, 2.0]}
    shapes = {n: np.asarray(Image.open(out / f"{n}.png")).shape for n in ("cascaded", "direct", "lambda_0", "lambda_default")}
    assert set(shapes.values()) == {(256, 256, 3)}
    assert not np.array_equal(np.asarray(Image.open(out / "lambda_0.png")), np.asarray(Image.open(out / "cascaded.png")))
    assert main(["ablate", "--mode", "direct", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# metrics


def _image_dir(path: Path, n: int, seed: int, side: int = 48) -> Path:
    path.mkdir()
    rng = np.random.default_rng(seed)
    for i in range(n):
        base = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
        img = np.repeat(np.repeat(base, side // 6, 0), side // 6, 1)
        Image.fromarray(img).save(path / f"{i:03d}.png")
    return path


def test_metrics_dir_against_itself(tmp_path, capsys):
    d = _image_dir(tmp_path / "imgs", 60, 0)
    out = tmp_path / "m"
    args = ["metrics", str(d), str(d), "--out", str(out),
            "--set", "dim=32", "--set", "size=16", "--set", "subset_size=30", "--set", "n_subsets=20", "--set", "seed=5"]
    assert main(args) == EXIT_OK
    rep = json.loads((out / "metrics.json").read_text())
    assert rep == json.loads(capsys.readouterr().out)
    assert rep["fid"] <= 1e-6
    assert abs(rep["kid_mean"]) <= 3 * rep["kid_stderr"]
    assert rep["extractor"] == {"kind": "random_projection", "seed": 5, "dim": 32, "size": 16}
    assert rep["n_a"] == rep["n_b"] == 60


def test_metrics_fid_only_below_subset_size(tmp_path):
    a = _image_dir(tmp_path / "a", 5, 0)
    b = _image_dir(tmp_path / "b", 5, 1)
    out = tmp_path / "m"
    assert main(["metrics", str(a), str(b), "--out", str(out), "--set", "dim=16", "--set", "size=8"]) == EXIT_OK
    rep = json.loads((out / "metrics.json").read_text())
    assert rep["fid"] > 0 and rep["kid_mean"] is None and "kid_skipped" in rep


def test_metrics_splits_2048_images(tmp_path):
    d = tmp_path / "big"
    d.mkdir()
    img = np.random.default_rng(2).integers(0, 256, (2048, 2048, 3), dtype=np.uint8)
    Image.fromarray(img).save(d / "stack.png")
    out = tmp_path / "m"
    assert main(["metrics", str(d), str(d), "--out", str(out), "--set", "dim=8", "--set", "size=8",
                 "--set", "subset_size=10", "--set", "n_subsets=2"]) == EXIT_OK
    assert json.loads((out / "metrics.json").read_text())["n_a"] == 49


# ---------------------------------------------------------------------------
# ingest and synth


def test_ingest_mock(tmp_path):
    cfg = _write_json(tmp_path / "i.json", {
        "locations": [[37.77, -122.42]], "zooms": [12, 13], "stack_side": 64, "tile_size": 32,
        "mock_max_zoom": 19, "rate": 1000,
    })
    out = tmp_path / "o"
    assert main(["ingest", "--mock", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "tiles" / "dataset.json").read_text())
    assert doc["stacks"][0]["class"] == "mid"
    assert doc["stacks"][0]["stack"]["complete"]
    assert json.loads((out / "resolved_config.json").read_text())["mock"] is True


def test_ingest_needs_exactly_one_source(tmp_path):
    assert main(["ingest", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_synth_command(tmp_path):
    out = tmp_path / "o"
    args = ["synth", "--out", str(out), "--set", "zooms=[10,11,12]", "--set", "stack_side=64", "--set", "count=2"]
    assert main(args) == EXIT_OK
    index = json.loads((out / "synth.json").read_text())
    assert [s["seed"] for s in index["stacks"]] == [0, 1]
    hi = np.asarray(Image.open(out / "stack00000" / "12.png")).astype(int)
    lo = np.asarray(Image.open(out / "stack00000" / "11.png")).astype(int)
    assert np.array_equal(hi.reshape(32, 2, 32, 2, 3).mean(axis=(1, 3)), lo[16:48, 16:48])

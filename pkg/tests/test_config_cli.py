import csv
import json

import pytest
import yaml

from latentcf.cli import main
from latentcf.config import PRESETS, ConfigError, RunConfig, resolve_config

SMALL = ["--set", "toy.n_attack=6", "--set", "toy.detector_train=100", "--set", "toy.n_detectors=2"]


def test_defaults_documented_and_complete():
    cfg = resolve_config()
    assert cfg.attack.queries == 100 and cfg.attack.mask == "Full" and cfg.backend == "toy"
    assert yaml.safe_load(cfg.to_yaml()) == cfg.to_dict()


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("attack:\n  epsilonn: 0.1\n")
    with pytest.raises(ConfigError, match="attack.epsilonn"):
        resolve_config(p)
    with pytest.raises(ConfigError):
        resolve_config(overrides={"nonsense": 1})
    with pytest.raises(ConfigError):
        resolve_config(preset="imagenet")


def test_flags_beat_file_beat_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 5\nattack:\n  queries: 50\n  latent_epsilon: 0.02\n")
    cfg = resolve_config(p, {"attack": {"queries": 7}})
    assert cfg.seed == 5 and cfg.attack.queries == 7 and cfg.attack.latent_epsilon == 0.02
    assert cfg.attack.pixel_epsilon == RunConfig().attack.pixel_epsilon


def test_presets_carry_dataset_defaults(tmp_path):
    cfg = resolve_config(preset="celebdf")
    assert cfg.attack.latent_epsilon == 0.0006 and cfg.attack.queries == 100
    assert cfg.finetune.steps == 80000 and cfg.finetune.lambda_lpips == 0.8
    assert resolve_config(preset="ffpp").ablation.level_epsilon == 0.0012
    # a file value overrides the preset
    p = tmp_path / "c.yaml"
    p.write_text("attack:\n  latent_epsilon: 0.5\n")
    assert resolve_config(p, preset="dfdc").attack.latent_epsilon == 0.5
    assert set(PRESETS) == {"toy", "celebdf", "dfdc", "ffpp"}


def test_type_errors_rejected():
    with pytest.raises(ConfigError):
        resolve_config(overrides={"attack": {"queries": "many"}})
    with pytest.raises(ConfigError):
        resolve_config(overrides={"attack": {"methods": ["latent", "cw"]}})


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["attack", "--bogus"])
    assert info.value.code == 2
    err = capsys.readouterr().err
    assert "usage:" in err
    assert json.loads(err.strip().splitlines()[-1])["kind"] == "usage"


def test_bad_config_key_exits_2(tmp_path, capsys):
    assert main(["attack", "--out", str(tmp_path), "--set", "attack.nope=1"]) == 2
    assert json.loads(capsys.readouterr().err.strip())["kind"] == "config"


def test_unknown_backend_exits_3(tmp_path, capsys):
    assert main(["attack", "--out", str(tmp_path), "--backend", "nowhere"]) == 3
    assert json.loads(capsys.readouterr().err.strip())["kind"] == "backend"


def test_empty_manifest_exits_4(tmp_path, capsys):
    m = tmp_path / "m.csv"
    m.write_text("image_id,path,label\n")
    assert main(["attack", "--out", str(tmp_path / "run"), "--manifest", str(m), *SMALL]) == 4
    assert json.loads(capsys.readouterr().err.strip())["kind"] == "empty_corpus"


def test_ablate_levels_writes_four_rows(tmp_path):
    run = tmp_path / "run"
    assert main(["ablate-levels", "--out", str(run), *SMALL]) == 0
    rows = list(csv.DictReader(open(run / "tables" / "level_ablation.csv")))
    assert [r["level"] for r in rows] == ["S", "M", "D", "Full"]
    assert (run / "config.resolved").exists() and (run / "version.json").exists()
    assert yaml.safe_load((run / "config.resolved").read_text())["toy"]["n_attack"] == 6


def test_models_verify_passes_on_toy(tmp_path, capsys):
    assert main(["models", "verify", "toy", "--out", str(tmp_path), *SMALL]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out
    assert all(c["passed"] for c in json.loads((tmp_path / "conformance.json").read_text()))


def test_attack_evaluate_report_with_manifest(tmp_path, world):
    from latentcf.core import save_png

    data = tmp_path / "data"
    data.mkdir()
    rows = []
    for it in world.sample(1, 3, seed=31, prefix="m-"):
        save_png(data / f"{it.image_id}.png", it.image)
        rows.append(f"{it.image_id},{it.image_id}.png,{it.label},vid{len(rows) // 2}")
    (data / "manifest.csv").write_text("image_id,path,label,video_id\n" + "\n".join(rows) + "\n")
    run = tmp_path / "run"
    common = ["--out", str(run), "--manifest", str(data / "manifest.csv"), *SMALL]
    assert main(["attack", "--method", "fgsm", *common]) == 0
    assert main(["attack", "--method", "latent", *common]) == 0
    recs = [json.loads(line) for line in open(run / "records.jsonl")]
    assert len(recs) == 6 and {r["attack_method"] for r in recs} == {"fgsm", "latent"}
    assert main(["evaluate", *common]) == 0
    assert (run / "tables" / "asr.csv").exists() and (run / "tables" / "video_asr.csv").exists()
    assert main(["report", "--out", str(run)]) == 0
    assert (run / "report.txt").exists() and (run / "figures" / "transfer.png").exists()
    assert main(["visualize", *common]) == 0
    assert (run / "images" / "grid_det0.png").exists()


def test_report_on_empty_run_exits_4(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 4

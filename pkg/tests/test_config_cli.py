import json

import pytest
import yaml

from projgen import cli
from projgen.config import ConfigError, RunConfig, config_from_dict, load_config
from projgen.pipeline import STAGES, DependencyError, Pipeline, StaleError

from conftest import REPO


def test_shipped_configs_load():
    for path in sorted((REPO / "configs").glob("*.yaml")):
        cfg = load_config(path)
        assert isinstance(cfg, RunConfig), path


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match=r"config\.train: unknown keys \['lr'\]"):
        config_from_dict({"train": {"lr": 1}})


@pytest.mark.parametrize("patch,msg", [
    ({"filters": {"area_min": 0.6}}, "area_min"),
    ({"backend": {"kind": "gpu"}}, "backend kind"),
    ({"ablation": {"proportions": [0.3]}}, "0.3"),
    ({"template": "bbox {x1}"}, "template lacks"),
    ({"sources": [{"kind": "vg"}]}, "requires"),
    ({"seeds": {"split_seed": "zero"}}, "expected int"),
    ({"seen_cluster": 2}, "seen_cluster"),
])
def test_invalid_configs(patch, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(patch)


def test_digest_tracks_content():
    a, b = config_from_dict({}), config_from_dict({})
    assert a.digest() == b.digest()
    assert config_from_dict({"seeds": {"train_seed": 1}}).digest() != a.digest()


def _write_cfg(tmp_path, d):
    d = dict(d, output_dir=str(tmp_path / "run"))
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(d))
    return path


def test_cli_exit_codes(tmp_path, small_run_dict, capsys):
    cfg = _write_cfg(tmp_path, small_run_dict)
    assert cli.main(["eval", "--config", str(cfg)]) == cli.EXIT_DEPENDENCY
    assert "needs 'train'" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {lr: 1}\n")
    assert cli.main(["ingest", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["ingest", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    broken = dict(small_run_dict, sources=[{"kind": "corpus", "corpus": str(tmp_path / "none.jsonl")}],
                  embedding={"id": "hash"})
    assert cli.main(["ingest", "--config", str(_write_cfg(tmp_path, broken))]) == cli.EXIT_RUNTIME


def test_cli_runs_and_skips(tmp_path, small_run_dict, capsys):
    cfg = _write_cfg(tmp_path, small_run_dict)
    for stage in ("ingest", "label-split", "build-prompts"):
        assert cli.main([stage, "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert cli.main(["build-prompts", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.strip() == "build-prompts: up-to-date"
    assert cli.main(["build-prompts", "--config", str(cfg), "--mcqa-seed", "3"]) == 0
    assert capsys.readouterr().out.strip() == "build-prompts: ran"
    assert cli.main(["build-prompts", "--config", str(cfg), "--force", "--mcqa-seed", "3"]) == 0
    assert capsys.readouterr().out.strip() == "build-prompts: ran"


@pytest.fixture(scope="module")
def full_small_run(tmp_path_factory):
    from conftest import SMALL_RUN

    d = dict(SMALL_RUN)
    d["ood"] = {"kind": "synthetic", "synthetic": {"n_images": 300, "seed": 11}}
    run = tmp_path_factory.mktemp("pipe") / "run"
    pipe = Pipeline(config_from_dict(d), run)
    return pipe, pipe.run_all()


def test_full_pipeline_outputs(full_small_run):
    pipe, status = full_small_run
    assert status == {s: "ran" for s in STAGES}
    d = pipe.dir
    for rel in ("eval/report.csv", "eval/ood/report.csv", "ablate/curve.csv", "probe/summary.json",
                "report/table_main.csv", "report/table_ood.csv", "report/fig_probe_seen.csv", "manifest.json"):
        assert (d / rel).exists(), rel
    ood_row = (d / "eval/ood/report.csv").read_text().splitlines()[1].split(",")
    assert ood_row[3] == "N/A" and ood_row[4] != "N/A"
    assert (d / "report/gaps.txt").read_text() == ""
    manifest = json.loads((d / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(STAGES)


def test_rerun_is_noop(full_small_run):
    pipe, _ = full_small_run
    again = Pipeline(pipe.cfg, pipe.dir)
    assert again.run_all() == {s: "up-to-date" for s in STAGES}


def test_tampered_artifact_is_stale(full_small_run):
    pipe, _ = full_small_run
    path = pipe.dir / "prompts" / "train_seen.jsonl"
    original = path.read_bytes()
    try:
        path.write_bytes(original + b"\n")
        with pytest.raises(StaleError):
            Pipeline(pipe.cfg, pipe.dir).run_stage("train")
    finally:
        path.write_bytes(original)


def test_ood_labels_disjoint_from_training(full_small_run):
    from projgen.prompts import read_samples

    pipe, _ = full_small_run
    ood = {s.label for s in read_samples(pipe.dir / "prompts" / "ood.jsonl")}
    assert ood and not ood & set(pipe.split().assignment)


def test_ablate_expands_to_ten_runs(tmp_path, small_run_dict):
    small_run_dict["ablation"] = {}
    small_run_dict["sources"][0]["synthetic"]["n_images"] = 500
    pipe = Pipeline(config_from_dict(small_run_dict), tmp_path / "run")
    for s in ("ingest", "label-split", "build-prompts"):
        pipe.run_stage(s)
    pipe.run_stage("ablate")
    rows = (pipe.dir / "ablate" / "curve.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 10
    assert len(list((pipe.dir / "ablate").glob("*/report.csv"))) == 10


def test_missing_upstream_raises(tmp_path, small_run_dict):
    with pytest.raises(DependencyError):
        Pipeline(config_from_dict(small_run_dict), tmp_path / "r").run_stage("label-split")

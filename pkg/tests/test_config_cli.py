import json

import pytest
import yaml

from mbconvnext import cli, config as C, dataio, metrics
from mbconvnext.errors import InvalidConfig


def test_roundtrip_defaults():
    cfg = C.RunConfig()
    back = C.loads(C.dumps(cfg))
    assert C.to_dict(back) == C.to_dict(cfg)
    assert back.model.digest() == cfg.model.digest()
    assert back.training.phase1.epochs == 12 and back.training.phase2.learning_rate == 1e-6


def test_partial_config_keeps_defaults():
    cfg = C.loads("seed: 3\ntraining:\n  phase1: {epochs: 2}\n")
    assert cfg.seed == 3 and cfg.training.phase1.epochs == 2
    assert cfg.training.phase1.learning_rate == 1e-3 and cfg.augment.target_per_class == 2500


@pytest.mark.parametrize("text", [
    "bogus: 1\n",
    "model: {widthh: 3}\n",
    "training: {phase1: {epochs: two}}\n",
    "training: {phase1: {epochs: 0}}\n",
    "split: {train_fraction: 1.5}\n",
    "preprocess: {order: [resize, resize, clahe]}\n",
    "training: {phase2: {phase: 1}}\n",
    "model: {gate_mode: other}\n",
    "- a\n- b\n",
    "a: [\n",
])
def test_invalid_configs(text):
    with pytest.raises(InvalidConfig):
        C.loads(text)


def test_with_seed_sets_every_seed():
    cfg = C.RunConfig().with_seed(11)
    assert (cfg.seed, cfg.split.seed, cfg.augment.seed, cfg.training.init_seed) == (11, 11, 11, 11)
    assert C.RunConfig().seed == 0


def _write_cfg(tmp_path, **over):
    d = {
        "seed": 0,
        "synth": {"n_pos": 3, "n_neg": 3, "dims": [64, 64, 6]},
        "augment": {"target_per_class": 12},
        "model": {"stages": [[1, 4], [1, 8]], "kernel_size": 3, "head_width": 8},
        "training": {"phase1": {"epochs": 1, "batch_size": 8},
                     "phase2": {"epochs": 1, "batch_size": 8, "learning_rate": 1e-4}},
    }
    d.update(over)
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(d))
    return p


STAGES = ["synth", "preprocess", "split", "augment", "train", "evaluate"]


def _pipeline(cfg_path, capsys=None):
    for s in STAGES:
        assert cli.main([s, "--config", str(cfg_path)]) == 0, s


def test_full_pipeline(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    _pipeline(cfg)
    outp = capsys.readouterr().out
    assert "final: epochs 2" in outp
    val = dataio.read_slice_dataset(tmp_path / "val")
    train = dataio.read_slice_dataset(tmp_path / "train")
    assert not any("#aug" in i for i in val.ids)
    assert train.counts() == {0: 12, 1: 12}
    assert set(val.ids).isdisjoint({i.split("#")[0] for i in train.ids})
    prov = [json.loads(l) for l in (tmp_path / "dataset" / "provenance.log").read_text().splitlines()]
    assert len(prov) == len(dataio.read_slice_dataset(tmp_path / "dataset"))
    rep = json.loads((tmp_path / "run" / "report" / "report.json").read_text())
    p, y = metrics.read_prob_dist(tmp_path / "run" / "report" / "prob_dist.csv")
    assert rep["auc"] == metrics.make_report(p, y).auc and rep["n"] == len(val)
    assert C.load(tmp_path / "run" / "config.yaml").model.digest() == C.load(cfg).model.digest()


def test_pipeline_bit_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        _pipeline(_write_cfg(d))
        outs.append({
            p.relative_to(d).as_posix(): p.read_bytes()
            for p in sorted(d.rglob("*"))
            if p.is_file() and p.suffix in (".slc", ".ckpt", ".nii", ".json", ".csv")
        })
    assert outs[0].keys() == outs[1].keys()
    for k in outs[0]:
        assert outs[0][k] == outs[1][k], k


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["preprocess", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus: 1\n")
    assert cli.main(["synth", "--config", str(bad)]) == 2
    cfg = _write_cfg(tmp_path)
    assert cli.main(["preprocess", "--config", str(cfg)]) == 2  # no volumes yet
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["nosuch", "--config", str(cfg)])


def test_evaluate_rejects_mismatched_checkpoint(tmp_path):
    cfg = _write_cfg(tmp_path)
    _pipeline(cfg)
    other = _write_cfg(tmp_path, model={"stages": [[1, 4], [1, 8]], "kernel_size": 3, "head_width": 16})
    assert cli.main(["evaluate", "--config", str(other)]) == 2


def test_labels_file_validation(tmp_path):
    cfg = _write_cfg(tmp_path)
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    (tmp_path / "volumes" / "labels.csv").write_text("volume_id,label\nvol0000,3\n")
    assert cli.main(["preprocess", "--config", str(cfg)]) == 2
    (tmp_path / "volumes" / "labels.csv").write_text("volume_id,label\nvol0000,1\n")
    assert cli.main(["preprocess", "--config", str(cfg)]) == 2  # others unlabeled
    assert not (tmp_path / "dataset").exists()


def test_seed_override_changes_outputs(tmp_path):
    cfg = _write_cfg(tmp_path)
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    a = (tmp_path / "volumes" / "vol0000.nii").read_bytes()
    assert cli.main(["synth", "--config", str(cfg), "--seed", "5"]) == 0
    assert (tmp_path / "volumes" / "vol0000.nii").read_bytes() != a

import csv
import json

import numpy as np
import pytest

import kitpose_app
from kitpose import numerics as nx
from kitpose import trainer
from kitpose.checkpoint import load_checkpoint, restore_model
from kitpose.config import load_config
from kitpose.data import Instance, resolve_layout
from kitpose.errors import CheckpointError, DatasetError, NumericalError

from conftest import CONFIG_DIR, TINY_OVERRIDES


def _history(result):
    return [{k: v for k, v in row.items() if k != "seconds"} for row in result.history]


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One single-epoch training run shared by the evaluation tests."""
    with nx.precision("float64"):
        cfg = load_config(CONFIG_DIR / "desk.toml", overrides=TINY_OVERRIDES, env={})
        result = trainer.train(cfg, tmp_path_factory.mktemp("tiny_run"))
    return cfg, result


def test_training_writes_run_artifacts(tiny_run):
    _, result = tiny_run
    for name in ("resolved_config.json", "dataset_manifest.json", "train_log.csv", "train_curve.png",
                 "best.ckpt", "last.ckpt"):
        assert (result.run_dir / name).exists(), name
    assert not (result.run_dir / "nan_dump.json").exists()
    assert len(result.history) == 1
    row = result.history[0]
    assert np.isfinite(row["loss"]) and row["loss"] > 0
    assert 0.0 <= row["val_pck"] <= 1.0
    assert load_checkpoint(result.last_path).epoch == 0


def test_single_worker_training_is_reproducible(tiny_config, tmp_path):
    first = trainer.train(tiny_config, tmp_path / "a")
    second = trainer.train(tiny_config, tmp_path / "b")
    assert _history(first) == _history(second)
    assert first.last_path.read_bytes() == second.last_path.read_bytes()
    assert first.config_hash == second.config_hash


@pytest.mark.parametrize("override", ["loss.differentiable_weights=true", "augment.cutmix_prob=1.0"])
def test_training_with_optional_settings(tiny_overrides, tmp_path, override):
    cfg = load_config(CONFIG_DIR / "desk.toml", overrides=tiny_overrides + [override], env={})
    result = trainer.train(cfg, tmp_path)
    assert np.isfinite(result.history[0]["loss"])
    assert result.last_path.exists()


def test_evaluate_writes_results(tiny_run, tmp_path):
    cfg, result = tiny_run
    ckpt = load_checkpoint(result.best_path)
    instances, layout = trainer.load_eval_instances(ckpt)
    assert len(instances) == cfg.data.val_count

    stats = trainer.evaluate(ckpt, instances, layout, flip_test=True, out_dir=tmp_path)
    assert stats["n_instances"] == 4 and stats["flip_test"] is True
    assert 0.0 <= stats["PCK05"] <= 1.0

    payload = json.loads((tmp_path / "results.json").read_text())
    assert payload["config_hash"] == result.config_hash
    assert len(_rows(tmp_path / "per_keypoint_pck.csv")) == 1 + 17
    predictions = _rows(tmp_path / "predictions.csv")
    assert predictions[0] == ["instance_id", "kpt_id", "x", "y", "score"]
    assert len(predictions) == 1 + 4 * 17


def test_predictions_are_in_the_original_frame(tiny_run):
    cfg, result = tiny_run
    ckpt = load_checkpoint(result.last_path)
    instances, layout = trainer.load_eval_instances(ckpt)
    with nx.precision("float64"):
        model = restore_model(ckpt)
        preds = trainer.predict(model, instances, layout, cfg, flip_test=False)
    assert preds.shape == (4, 17, 3)
    for inst, p in zip(instances, preds):
        x, y, w, h = inst.bbox
        pad = cfg.augment.padding * max(w, h)
        assert np.all(p[:, 0] > x - pad) and np.all(p[:, 0] < x + w + pad)
        assert np.all(p[:, 1] > y - pad) and np.all(p[:, 1] < y + h + pad)


def test_evaluate_rejects_a_different_skeleton(tiny_run):
    _, result = tiny_run
    inst = Instance(np.zeros((3, 40, 40)), [[5.0, 5.0]] * 5, [2] * 5, (0, 0, 20, 20))
    with pytest.raises(CheckpointError):
        trainer.evaluate(result.last_path, [inst], resolve_layout("coco", 5))
    with pytest.raises(DatasetError):
        trainer.evaluate(result.last_path, [], resolve_layout("coco", 17))


def test_ground_truth_scores_perfectly(tiny_config):
    _, val_set, _ = trainer.load_datasets(tiny_config)
    stats = trainer.evaluate_ground_truth(val_set)
    assert stats["PCK05"] == 1.0
    assert stats["AP"] == 1.0


def test_synthetic_data_needs_seventeen_keypoints():
    cfg = load_config(CONFIG_DIR / "micro.toml", env={})
    with pytest.raises(DatasetError):
        trainer.load_datasets(cfg)


def test_make_target_drops_keypoints_off_the_heatmap(tiny_config):
    inst = Instance(np.zeros((3, 40, 40)), [[10.0, 10.0], [39.0, 39.0], [2.0, 2.0]], [2, 1, 0], (0, 0, 40, 40))
    target = trainer.make_target(inst, tiny_config)
    assert target.base.shape == (3, 8, 8)
    assert np.asarray(target.visible, dtype=bool).tolist() == [True, False, False]
    assert target.base[0].max() == pytest.approx(1.0, abs=0.2)
    assert not target.base[1].any()


def test_non_finite_loss_writes_a_dump(tiny_config, tmp_path, monkeypatch):
    def broken_loss(heatmaps, f_k, target, vis, *args, **kwargs):
        return heatmaps.sum() * float("nan"), {"final": float("nan"), "total": float("nan")}

    monkeypatch.setattr(trainer, "total_loss", broken_loss)
    with pytest.raises(NumericalError):
        trainer.train(tiny_config, tmp_path)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["epoch"] == 0
    assert len(dump["instance_ids"]) == tiny_config.batch_size
    assert dump["loss_terms"]["total"] == "nan"
    assert not (tmp_path / "last.ckpt").exists()


# ----- command line -----

def _set_args(overrides):
    args = []
    for item in overrides:
        args += ["--set", item]
    return args


@pytest.fixture
def clean_env(monkeypatch):
    monkeypatch.delenv("KITPOSE_SEED", raising=False)


def test_cli_train_then_eval(tmp_path, clean_env):
    run_dir = tmp_path / "run"
    code = kitpose_app.main(["train", "--config", str(CONFIG_DIR / "desk.toml"), "--run-dir", str(run_dir),
                             *_set_args(TINY_OVERRIDES)])
    assert code == 0
    assert (run_dir / "last.ckpt").exists()

    out = tmp_path / "eval"
    assert kitpose_app.main(["eval", "--ckpt", str(run_dir / "last.ckpt"), "--no-flip", "--out", str(out)]) == 0
    assert json.loads((out / "results.json").read_text())["flip_test"] is False


def test_cli_error_exit_codes(tmp_path, clean_env):
    assert kitpose_app.main(["eval", "--ckpt", str(tmp_path / "missing.ckpt")]) == 1
    assert kitpose_app.main(["train", "--run-dir", str(tmp_path), "--set", "loss.bogus=1"]) == 1
    assert kitpose_app.main(["train", "--config", str(tmp_path / "none.toml")]) == 1
    assert kitpose_app.main(["gradcheck", "--set", "schedule.epochs=0"]) == 1


def test_cli_gradcheck(tmp_path, clean_env):
    assert kitpose_app.main(["gradcheck", "--probes", "6", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "gradcheck_report.csv").exists()


def test_cli_gradcheck_catches_a_wrong_backward(monkeypatch, clean_env):
    monkeypatch.setattr(nx.Gelu, "backward", lambda self, grad: (grad,))
    assert kitpose_app.main(["gradcheck", "--probes", "6"]) == 2


# ----- desk-scale runs -----

@pytest.mark.slow
def test_desk_run_reaches_target_pck(tmp_path):
    cfg = load_config(CONFIG_DIR / "desk.toml", env={})
    result = trainer.train(cfg, tmp_path)
    assert result.best_metric >= 0.85
    assert result.history[-1]["loss"] < result.history[0]["loss"]

    ckpt = load_checkpoint(result.best_path)
    instances, layout = trainer.load_eval_instances(ckpt)
    flipped = trainer.evaluate(ckpt, instances, layout, flip_test=True)
    plain = trainer.evaluate(ckpt, instances, layout, flip_test=False)
    assert abs(flipped["PCK05"] - plain["PCK05"]) < 0.01 or flipped["PCK05"] >= plain["PCK05"]


@pytest.mark.slow
def test_desk_loss_decreases_over_twenty_epochs(tmp_path):
    cfg = load_config(CONFIG_DIR / "desk.toml", overrides=["schedule.epochs=20", "schedule.milestones=[]"],
                      env={})
    history = trainer.train(cfg, tmp_path).history
    assert history[-1]["loss"] < history[0]["loss"]

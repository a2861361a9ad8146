import math

import numpy as np
import pytest

from singlepos.data import DatasetRecord, generate_synthetic, split, to_single_positive
from singlepos.losses import NEG, POS
from singlepos.trainer import (
    Adam,
    ConfigError,
    TrainConfig,
    TrainingError,
    cosine_lr,
    init_state,
    load_model,
    load_state,
    train,
)

TINY = {"model.input_size": 16, "model.channels": "4,4", "train.epochs": 3, "train.batch_size": 4}


@pytest.fixture(scope="module")
def tiny_data():
    recs = generate_synthetic(30, num_classes=4, image_size=24, seed=5)
    tr, va = split(recs, (0.8, 0.2), seed=0)
    return to_single_positive(tr, seed=0), va


def tiny_config(**extra):
    return TrainConfig.from_flat({**TINY, **extra})


def test_cosine_lr():
    assert cosine_lr(0, 10, 0.1) == 0.1
    assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05, abs=1e-15)
    assert cosine_lr(99, 100, 1.0) == pytest.approx(2.467e-4, rel=1e-3)


def test_adam_examples():
    p = {"x": np.array([0.5, -1.0])}
    opt = Adam()
    opt.step(p, {"x": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p["x"], [0.5, -1.0])
    p = {"x": np.array([1.0])}
    Adam().step(p, {"x": 2 * p["x"]}, 0.1)
    assert p["x"][0] == pytest.approx(0.9, abs=1e-6)
    p = {"x": np.array([1.0, -2.0])}
    opt = Adam()
    for _ in range(500):
        opt.step(p, {"x": 2 * p["x"] * np.array([1.0, 3.0])}, 0.05)
    assert np.abs(p["x"]).max() < 1e-3


def test_adam_skip_and_state():
    p = {"a": np.ones(2), "b": np.ones(2)}
    opt = Adam(weight_decay=0.1)
    opt.step(p, {"a": np.ones(2), "b": np.ones(2)}, 0.1, skip={"b"})
    assert (p["b"] == 1).all() and (p["a"] < 1).all()
    other = Adam(weight_decay=0.1)
    other.load_state(opt.state())
    q = {k: v.copy() for k, v in p.items()}
    opt.step(p, {"a": np.ones(2)}, 0.1)
    other.step(q, {"a": np.ones(2)}, 0.1)
    np.testing.assert_array_equal(p["a"], q["a"])


def test_config_keys_and_validation():
    cfg = TrainConfig.from_flat({"aug.area_min": "0.5", "model.channels": "8,8", "aug.square": "false"})
    assert cfg.aug.area_min == 0.5 and cfg.model.channels == [8, 8] and cfg.aug.square is False
    with pytest.raises(ConfigError, match="loss.nope"):
        TrainConfig.from_flat({"loss.nope": 1})
    with pytest.raises(ConfigError, match="consistency"):
        TrainConfig.from_flat({"loss.primary": "en", "loss.consistency": "none"})
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"consistency.score_momentum": "1.5"})
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"optim.lr": "0"})
    with pytest.raises(ConfigError, match="bad value"):
        TrainConfig.from_flat({"train.epochs": "many"})
    flat = {k: str(v) if not isinstance(v, list) else ",".join(map(str, v))
            for k, v in cfg.to_flat().items()}
    assert TrainConfig.from_flat(flat) == cfg


def test_zero_epochs_returns_initial_state(tiny_data):
    tr, va = tiny_data
    result = train(tiny_config(**{"train.epochs": 0, "loss.primary": "en",
                                  "loss.consistency": "scl"}), tr, va)
    st = result.state
    fresh = init_state(tiny_config(**{"train.epochs": 0, "loss.primary": "en",
                                      "loss.consistency": "scl"}), tr, va)
    assert result.reports == [] and st.epoch == 0
    for k in st.model.params:
        assert np.array_equal(st.model.params[k], fresh.model.params[k])
    assert np.array_equal(st.scores.s, fresh.scores.s)


def test_schedules_logged_and_stores_updated_once(tiny_data):
    tr, va = tiny_data
    cfg = tiny_config(**{"loss.primary": "en", "loss.consistency": "cl",
                         "loss.gamma_warmup_epochs": 2, "loss.gamma_max": 0.5})
    st = train(cfg, tr, va).state
    logged = {(e, m): v for e, s, m, v in st.history if s == "train"}
    for e in range(3):
        assert logged[(e, "lr")] == cosine_lr(e, 3, cfg.optim.lr)
        assert logged[(e, "gamma")] == 0.5 * min(e / 2, 1)
    assert (st.scores.last_epoch == 2).all()
    assert (st.masks[np.stack([r.z for r in tr]) == POS] == 1).all()
    assert st.best_map == max(v for e, s, m, v in st.history if s == "val" and m == "mAP")


def test_runs_are_bit_identical(tiny_data, tmp_path):
    tr, va = tiny_data
    cfg = {"loss.primary": "en", "loss.consistency": "scl"}
    train(tiny_config(**cfg), tr, va, run_dir=tmp_path / "a")
    train(tiny_config(**cfg), tr, va, run_dir=tmp_path / "b")
    for rel in ("metrics.csv", "checkpoints/last.ckpt", "checkpoints/best.ckpt",
                "heatmaps/store.bin", "masks/expected_positives.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_resume_reproduces_uninterrupted_run(tiny_data, tmp_path):
    tr, va = tiny_data
    cfg = {"loss.primary": "en", "loss.consistency": "scl", "consistency.topk": 2,
           "consistency.topk_after_epoch": 1}
    train(tiny_config(**cfg), tr, va, run_dir=tmp_path / "full")
    train(tiny_config(**cfg), tr, va, run_dir=tmp_path / "part", stop_after=1)
    state = load_state(tmp_path / "part" / "checkpoints" / "last.ckpt", tr, va)
    assert state.epoch == 1
    train(state.config, tr, va, run_dir=tmp_path / "part", state=state)
    for rel in ("metrics.csv", "checkpoints/last.ckpt", "checkpoints/best.ckpt", "heatmaps/store.bin"):
        assert (tmp_path / "full" / rel).read_bytes() == (tmp_path / "part" / rel).read_bytes(), rel


def test_topk_retention_applied(tiny_data):
    tr, va = tiny_data
    cfg = tiny_config(**{"loss.primary": "an", "loss.consistency": "scl", "consistency.topk": 2,
                         "consistency.topk_after_epoch": 2})
    st = train(cfg, tr, va).state
    assert all(c is not None and len(c) == 2 for c in st.heatmaps.channels)


def test_best_checkpoint_reproduces_best_map(tiny_data, tmp_path):
    from singlepos.trainer import evaluate_model, evaluation_inputs

    tr, va = tiny_data
    st = train(tiny_config(), tr, va, run_dir=tmp_path).state
    model, meta = load_model(tmp_path / "checkpoints" / "best.ckpt")
    x, y, primary = evaluation_inputs(va, 16)
    assert evaluate_model(model, x, y, primary).map == st.best_map
    assert float(meta["val_mAP"]) == st.best_map


def test_freeze_backbone(tiny_data):
    tr, va = tiny_data
    cfg = tiny_config(**{"train.epochs": 1, "train.freeze_backbone_epochs": 1})
    before = init_state(cfg, tr, va).model.params
    after = train(cfg, tr, va).state.model.params
    assert np.array_equal(before["conv0.weight"], after["conv0.weight"])
    assert not np.array_equal(before["head.weight"], after["head.weight"])


def test_nan_loss_aborts_with_diagnostic(tiny_data):
    tr, va = tiny_data
    cfg = tiny_config()
    state = init_state(cfg, tr, va)
    state.model.params["head.bias"][:] = np.nan
    with pytest.raises(TrainingError, match="epoch 0"):
        train(cfg, tr, va, state=state)


def _separable_records(n, L, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y = (rng.random(L) < 0.5).astype(np.int8)
        y[rng.integers(L)] = 1
        img = np.full((12, 12, 3), 0.2) + rng.normal(0, 0.03, (12, 12, 3))
        img[..., :L] += 0.6 * y
        out.append(DatasetRecord(id=f"{i:04d}", image=np.clip(img * 255, 0, 255).astype(np.uint8),
                                 y=y, z=np.where(y == 1, POS, NEG).astype(np.int8)))
    return out


def test_bce_fits_separable_data():
    recs = _separable_records(48, 3, 0)
    cfg = TrainConfig.from_flat({
        "model.input_size": 8, "model.channels": "4", "train.epochs": 50, "train.batch_size": 8,
        "loss.primary": "bce", "aug.area_min": 1.0, "optim.lr": 0.01, "train.eval_train": "true"})
    st = train(cfg, recs, recs[:16]).state
    train_map = [v for e, s, m, v in st.history if s == "train" and m == "mAP"]
    assert len(train_map) == 50 and train_map[-1] >= 0.99
    assert math.isfinite(st.best_map)

import math

import numpy as np
import pytest

from pcodom import pose as pc
from pcodom.encoding import ProjectionConfig, project_cloud
from pcodom.errors import ConfigError, EmptyInput, NonFiniteLoss, ShapeMismatch
from pcodom.network.model import PoseModel
from pcodom.trainer import (
    OptimizerState,
    PairDataset,
    TrainConfig,
    adam_step,
    evaluate,
    lr_at,
    mirror_augment,
    mirror_labels,
    preset,
    train,
    write_history_csv,
    zero_baseline,
)
from test_model import micro_config, pairs


def scalar_adam(grad_fn, theta, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def run_adam(theta, grad_fn, lr, steps):
    p = [np.array([theta])]
    state = OptimizerState.zeros_like(p)
    for _ in range(steps):
        p, state = adam_step(p, [grad_fn(p[0])], state, lr)
    return p[0][0], state


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = [np.arange(4.0)]
    new, state = adam_step(p, [np.zeros(4)], OptimizerState.zeros_like(p), 0.1)
    assert np.array_equal(new[0], p[0]) and state.step == 1


def test_adam_first_step_moves_by_lr():
    theta, _ = run_adam(0.0, lambda t: np.ones_like(t), 0.1, 1)
    assert theta == pytest.approx(-0.1, abs=1e-6)


def test_adam_matches_scalar_reference_on_quadratic():
    theta, state = run_adam(1.0, lambda t: 2 * t, 0.1, 100)
    assert abs(theta) < 0.1
    assert state.step == 100
    assert theta == pytest.approx(scalar_adam(lambda t: 2 * t, 1.0, 0.1, 100), abs=1e-12)


def test_adam_shape_checks():
    with pytest.raises(ShapeMismatch):
        adam_step([np.zeros(2)], [np.zeros(3)], OptimizerState.zeros_like([np.zeros(2)]), 0.1)
    with pytest.raises(ShapeMismatch):
        adam_step([np.zeros(2)], [], OptimizerState.zeros_like([np.zeros(2)]), 0.1)


# -- schedule and config -------------------------------------------------------

def test_lr_schedule_examples():
    assert lr_at(0) == 1e-4
    assert lr_at(9) == 1e-4
    assert lr_at(10) == 5e-5
    assert lr_at(29) == pytest.approx(2.5e-5, rel=1e-15)
    with pytest.raises(ValueError):
        lr_at(-1)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (1e-4, 0.9, 0.999, 1e-8)
    assert (cfg.batch_size, cfg.epochs, cfg.lr_halving_epochs, cfg.k) == (8, 30, 10, 100.0)


def test_config_text_parsing_and_overrides():
    text = "# tiny run\nlr = 0.001\nepochs=5  # short\nclip_norm = none\nmirror = yes\n"
    cfg = TrainConfig.from_text(text, epochs=7, seed=None)
    assert cfg.lr == 1e-3 and cfg.epochs == 7 and cfg.clip_norm is None and cfg.mirror
    assert TrainConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", ["lr 0.1", "colour = red", "epochs = many", "batch_size = 0", "beta1 = 1.0"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_text(text)


def test_config_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("seed = 4\n")
    assert TrainConfig.from_file(path).seed == 4


def test_presets_layer_under_file_and_flags(tmp_path):
    tiny = preset("tiny")
    assert tiny.mirror and tiny.dropout == 0.0 and tiny.lr == 1e-3
    assert preset("full") == TrainConfig()
    path = tmp_path / "train.cfg"
    path.write_text("dropout = 0.25\nepochs = 3\n")
    cfg = TrainConfig.from_file(path, tiny, epochs=9)
    assert (cfg.dropout, cfg.epochs, cfg.lr, cfg.mirror) == (0.25, 9, 1e-3, True)
    with pytest.raises(ConfigError):
        preset("medium")


# -- datasets and baselines ----------------------------------------------------

def test_dataset_validation():
    with pytest.raises(ShapeMismatch):
        PairDataset(np.zeros((2, 3, 4, 8)), np.zeros((2, 6)))
    with pytest.raises(ShapeMismatch):
        PairDataset(np.zeros((2, 2, 4, 8)), np.zeros((3, 6)))
    with pytest.raises(EmptyInput):
        PairDataset.from_pairs([])


def test_dataset_save_load(tmp_path):
    d = PairDataset(pairs(3), np.arange(18.0).reshape(3, 6))
    d.save(tmp_path / "d.npz")
    back = PairDataset.load(tmp_path / "d.npz")
    assert np.array_equal(back.inputs, d.inputs) and np.array_equal(back.labels, d.labels)


def test_zero_baseline_on_constant_motion():
    step = np.array([0.8, 0.3, 0.0, 0.0, 0.0, 0.05])
    d = PairDataset(pairs(4), np.tile(step, (4, 1)))
    base = zero_baseline(d)
    assert base.t_rel == pytest.approx(np.linalg.norm(step[:3]))
    assert base.r_rel == pytest.approx(0.05)


def test_perfect_stub_scores_zero_and_eval_is_pure():
    step = np.array([0.8, 0.3, 0.0, 0.0, 0.0, 0.05])
    m = PoseModel(micro_config())
    for name, p in m.named_parameters():
        p.data[...] = 0.0
        if name.endswith("trans.out.bias"):
            p.data[...] = step[:3]
        elif name.endswith("orient.out.bias"):
            p.data[...] = step[3:]
    d = PairDataset(pairs(4), np.tile(step, (4, 1)))
    before = m.digest()
    a, b = evaluate(m, d), evaluate(m, d)
    assert a.report.t_rel < 1e-7 and a.report.r_rel < 1e-7
    assert a.report == b.report and m.digest() == before


# -- training ------------------------------------------------------------------

def micro_data(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return PairDataset(pairs(n, seed=seed), rng.normal(size=(n, 6)) * [0.5, 0.1, 0.02, 0.01, 0.01, 0.05])


def test_single_sample_is_memorized():
    data = micro_data(1)
    m = PoseModel(micro_config().with_variant(dropout=0.0), seed=0, dtype=np.float64)
    cfg = TrainConfig(lr=1e-2, epochs=200, lr_halving_epochs=1000, dropout=0.0, clip_norm=None)
    res = train(m, data, cfg)
    assert len(res.history) == 200
    assert res.history[-1]["loss_total"] < 1e-6


def test_step_count_and_partial_batch():
    cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=5)
    res = train(PoseModel(micro_config()), micro_data(12), cfg)
    assert len(res.history) == 2 * 3
    assert [r["batch"] for r in res.history[:3]] == [5, 5, 2]
    assert len(res.epoch_means) == 2


def test_training_is_deterministic():
    cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=4, seed=9)
    a = train(PoseModel(micro_config(), seed=9), micro_data(), cfg)
    b = train(PoseModel(micro_config(), seed=9), micro_data(), cfg)
    assert [r["loss_total"] for r in a.history] == [r["loss_total"] for r in b.history]
    assert a.model.digest() == b.model.digest()


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = TrainConfig(lr=1e-3, epochs=4, batch_size=4, seed=2)
    full = train(PoseModel(micro_config(), seed=2), micro_data(), cfg, out_dir=tmp_path / "a")
    train(PoseModel(micro_config(), seed=2), micro_data(), TrainConfig(lr=1e-3, epochs=2, batch_size=4, seed=2),
          out_dir=tmp_path / "b")
    resumed = train(PoseModel(micro_config(), seed=77), micro_data(), cfg, out_dir=tmp_path / "b",
                    resume=tmp_path / "b" / "epoch_001.ckpt")
    assert resumed.model.digest() == full.model.digest()
    assert resumed.history == full.history
    assert (tmp_path / "a" / "epoch_003.ckpt").exists() and (tmp_path / "a" / "last.ckpt").exists()
    header = (tmp_path / "a" / "loss.csv").read_text().splitlines()[0]
    assert header == "epoch,step,lr,loss_total,loss_trans_subnet,loss_orient_subnet"


def test_history_csv_blank_for_missing_subnet(tmp_path):
    cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=6)
    res = train(PoseModel(micro_config().with_variant("translation")), micro_data(), cfg)
    write_history_csv(tmp_path / "h.csv", res.history)
    row = (tmp_path / "h.csv").read_text().splitlines()[1].split(",")
    assert row[-1] == "" and float(row[-2]) == pytest.approx(float(row[3]))


def test_nonfinite_loss_dumps_batch(tmp_path):
    data = micro_data(4)
    data.labels[2, 0] = np.inf
    with pytest.raises(NonFiniteLoss) as info:
        train(PoseModel(micro_config()), data, TrainConfig(epochs=1, batch_size=4), out_dir=tmp_path)
    dump = info.value.dump_path
    assert dump is not None and dump.exists()
    with np.load(dump) as z:
        assert z["inputs"].shape == (4, 2, 4, 8)
        assert sorted(z["indices"].tolist()) == [0, 1, 2, 3]


def test_empty_training_set():
    with pytest.raises(EmptyInput):
        train(PoseModel(micro_config()), PairDataset(np.zeros((0, 2, 4, 8)), np.zeros((0, 6))))


# -- mirror augmentation ------------------------------------------------------------

def test_mirror_labels_flip_lateral_and_yaw_signs():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(20, 6)) * [1, 0.3, 0.1, 0.1, 0.1, 0.3]
    # reflecting about the x-z plane negates rotations about x and z, keeps y
    assert np.allclose(mirror_labels(v), v * [1, -1, 1, -1, 1, -1], atol=1e-12)
    assert np.allclose(mirror_labels(mirror_labels(v)), v, atol=1e-12)


def test_mirror_labels_match_reflected_point_clouds():
    rng = np.random.default_rng(3)
    rel = pc.vec6_to_pose(np.array([0.7, -0.2, 0.05, 0.02, -0.01, 0.2]))
    pts1 = rng.normal(size=(50, 3)) * 10
    inv = pc.invert(rel)
    pts2 = pts1 @ inv.rotation.T + inv.translation
    M = np.diag([1.0, -1.0, 1.0])
    mirrored = pc.vec6_to_pose(mirror_labels(pc.pose_to_vec6(rel)[None])[0])
    inv_m = pc.invert(mirrored)
    assert np.allclose((pts1 @ M) @ inv_m.rotation.T + inv_m.translation, pts2 @ M, atol=1e-9)


def test_column_flip_is_reflected_scan():
    cfg = ProjectionConfig.tiny()
    pts = np.random.default_rng(4).normal(size=(3000, 3)) * [20, 20, 1]
    flipped = project_cloud(pts, cfg).grid[:, ::-1]
    reflected = project_cloud(pts * [1, -1, 1], cfg).grid
    assert np.mean(np.isclose(flipped, reflected, atol=1e-9)) > 0.99


def test_mirror_augment_is_seeded_and_selective():
    x = pairs(40)
    y = np.tile([1.0, 0.2, 0, 0, 0, 0.1], (40, 1))
    xa, ya = mirror_augment(x, y, np.random.default_rng(1))
    xb, yb = mirror_augment(x, y, np.random.default_rng(1))
    assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    flipped = ya[:, 1] < 0
    assert 0 < flipped.sum() < 40
    assert np.array_equal(xa[flipped], x[flipped][..., ::-1])
    assert np.array_equal(xa[~flipped], x[~flipped])
    assert np.array_equal(x, pairs(40)) and np.array_equal(y[:, 1], np.full(40, 0.2))
    res = train(PoseModel(micro_config()), micro_data(), TrainConfig(epochs=1, mirror=True))
    assert len(res.history) == 2

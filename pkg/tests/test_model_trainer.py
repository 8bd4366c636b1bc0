import numpy as np
import pytest

from jointcar import model as net
from jointcar.deformation import quadratic_basis
from jointcar.trainer import (
    ConfigError, build_config, config_keys, evaluate_crops, fit_head, load_config,
    parse_config_text, train_pipeline,
)

TOY = [("augment", "false"), ("val_fraction", "0"), ("batch_size", "10"), ("target_loss", "0.01"),
       ("stage1_epochs", "200"), ("stage2_epochs", "200"), ("stage3_epochs", "200")]


@pytest.fixture(scope="module")
def toy_run(toy_crops, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    params, results, rows = train_pipeline(toy_crops, build_config(overrides=TOY), str(out))
    return params, results, rows, out


def test_toy_overfit_and_stage_monotonicity(toy_run, toy_crops):
    params, results, _, _ = toy_run
    assert [r.stage for r in results] == [1, 2, 3]
    losses = [r.train_loss for r in results]
    assert losses[0] >= losses[1] >= losses[2], losses
    assert results[-1].train_accuracy >= 0.99
    assert evaluate_crops(params, toy_crops)[1] >= 0.99


def test_pipeline_outputs(toy_run):
    params, _, rows, out = toy_run
    assert {p.name for p in out.iterdir()} == {"stage1.ckpt", "stage2.ckpt", "final.ckpt",
                                               "train_log.csv"}
    head = (out / "train_log.csv").read_text().splitlines()
    assert head[0] == "epoch,stage,train_loss,val_loss,val_accuracy"
    assert len(head) == len(rows) + 1
    loaded = net.load_params(str(out / "final.ckpt"))
    assert loaded.stage == 3 and loaded.dtype == np.float32
    for k, v in params.groups.items():
        np.testing.assert_array_equal(loaded.groups[k], v)


def test_training_deterministic(toy_run, toy_crops, tmp_path):
    train_pipeline(toy_crops, build_config(overrides=TOY), str(tmp_path))
    for name in ("stage1.ckpt", "stage2.ckpt", "final.ckpt", "train_log.csv"):
        assert (tmp_path / name).read_bytes() == (toy_run[3] / name).read_bytes(), name


def test_seed_changes_weights(toy_crops):
    cfg = [("augment", "false"), ("val_fraction", "0"), ("stage1_epochs", "1"),
           ("stage2_epochs", "1"), ("stage3_epochs", "1")]
    a = train_pipeline(toy_crops, build_config(overrides=cfg), stages=(1,))[0]
    b = train_pipeline(toy_crops, build_config(overrides=cfg + [("seed", "5")]), stages=(1,))[0]
    assert not np.array_equal(a.groups["head.weight"], b.groups["head.weight"])


def test_freeze_conv1_ablation(toy_run, toy_crops, tmp_path):
    cfg = build_config(overrides=TOY + [("freeze_conv1", "true")])
    frozen, results, _ = train_pipeline(toy_crops, cfg, str(tmp_path))
    stage1 = net.load_params(str(tmp_path / "stage1.ckpt"))
    np.testing.assert_array_equal(frozen.groups["conv1.weight"], stage1.groups["conv1.weight"])
    np.testing.assert_array_equal(frozen.groups["conv1.bias"], stage1.groups["conv1.bias"])
    assert results[-1].train_loss != toy_run[1][-1].train_loss
    assert not np.array_equal(toy_run[0].groups["conv1.weight"], stage1.groups["conv1.weight"])


def _zero_basis(params):
    """(part index, coefficient index) pairs whose displacement basis is identically zero."""
    out = set()
    for i, s in enumerate(params.specs):
        maps = quadratic_basis(*s.map_shape, s.anchor).maps
        out |= {(i, n) for n in range(4) if not maps[n].any()}
    return out


def test_no_dead_parameters():
    rng = np.random.default_rng(0)
    p = net.init_stage1(rng, np.float64)
    p = net.grow_to_stage3(net.grow_to_stage2(p, rng), rng)
    # random deformation coefficients so parts settle away from their anchors
    p.groups["deform.coeffs"][:, :2] = -rng.uniform(0.01, 0.1, (8, 2))
    p.groups["deform.coeffs"][:, 2:] = rng.uniform(-0.5, 0.5, (8, 2))
    touched = {k: np.zeros(v.shape, bool) for k, v in p.groups.items()}
    for _ in range(3):
        x = rng.standard_normal((16, 3, 84, 28))
        y = (rng.random(16) < 0.5).astype(np.float64)
        _, grads, _ = net.loss_and_grads(p, x, y)
        for k, g in grads.items():
            touched[k] |= g != 0
    skip = _zero_basis(p)
    dead = []
    for k, t in touched.items():
        for idx in zip(*np.nonzero(~t)):
            if k == "deform.coeffs" and tuple(int(i) for i in idx) in skip:
                continue
            dead.append((k, idx))
    assert not dead, dead[:10]
    for i, n in skip:
        assert not touched["deform.coeffs"][i, n]


def test_fit_head_improves_fresh_head(toy_crops):
    rng = np.random.default_rng(3)
    p = net.grow_to_stage3(net.grow_to_stage2(net.init_stage1(rng), rng), rng)
    before = evaluate_crops(p, toy_crops)[0]
    conv = p.groups["conv1.weight"].copy()
    after = fit_head(p, toy_crops, 100)
    assert after < before
    assert evaluate_crops(p, toy_crops)[0] == pytest.approx(after, rel=1e-4)
    np.testing.assert_array_equal(p.groups["conv1.weight"], conv)
    # a further call never leaves the head worse than it found it
    assert fit_head(p, toy_crops, 5) <= after + 1e-9


def test_config_defaults_and_validation():
    cfg = build_config()
    assert (cfg.nms_radius_r, cfg.nms_radius_c) == (20, 50)
    assert (cfg.match_tol_r, cfg.match_tol_c) == (10, 25)
    with pytest.raises(ConfigError):
        build_config(overrides=[("stage2_epochs", "0")])
    with pytest.raises(ConfigError):
        build_config(overrides=[("no_such_key", "1")])
    with pytest.raises(ConfigError):
        build_config(overrides=[("stage1_lr", "abc")])
    with pytest.raises(ConfigError):
        build_config(overrides=[("aug_max_deg", "15")])
    with pytest.raises(ConfigError):
        build_config(overrides=[("stage3_momentum", "1.0")])
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nseed = 4\nbatch_size = 16  # trailing\n")
    cfg = load_config(str(path), overrides=[("seed", "9")])
    assert cfg.seed == 9 and cfg.batch_size == 16 and cfg.stage1_epochs == 20


def test_config_text_round_trip():
    cfg = build_config(overrides=[("augment", "off"), ("stage3_lr", "0.002")])
    again = build_config(parse_config_text(cfg.to_text()))
    assert again == cfg
    keys = [k for k, _ in config_keys()]
    assert len(keys) == len(set(keys))
    assert {f"part{i}" for i in range(1, 9)} <= set(keys)
    with pytest.raises(ConfigError):
        build_config(overrides=[("grad_clip", "-1")])

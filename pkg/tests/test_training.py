import dataclasses

import numpy as np
import pytest

from framecons import recipes
from framecons.datagen import SceneConfig, generate_dataset
from framecons.losses import LossConfig
from framecons.models import ModelSpec, build, predict
from framecons.training import (Optimizer, TrainConfig, TrainingDiverged, TrainLog, clip_gradients,
                                load_checkpoint, save_checkpoint, train, trainable_names)
from framecons.tensorio import load_container

TINY = SceneConfig(seed=11, frames=4, height=12, width=12, num_classes=4, max_shapes=4)
SSNET = ModelSpec("SSNet", base_channels=4, num_classes=4)
VSSNET = ModelSpec("VSSNet", base_channels=4, num_classes=4)
ESP_L1B = ModelSpec("MiniEsp", lstm_position="L1b", num_classes=4, esp_widths=(2, 8, 8))


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(TINY, 4)


def params_bytes(model):
    return b"".join(p.data.tobytes() for p in model.params.values())


# -- configuration ------------------------------------------------------------------

def test_config_validation_and_kv_round_trip():
    cfg = TrainConfig(epochs=3, optimizer="SGD", learning_rate=0.02, phase="LstmOnly",
                      loss=LossConfig(lambda_incons=100.0, difference="Absolute", class_weights=(1.0, 2.0)))
    assert TrainConfig.from_kv(cfg.to_kv()) == cfg
    for bad in (dict(optimizer="RMSprop"), dict(learning_rate=-1.0), dict(clip_norm=0.0),
                dict(phase="Half"), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_kv({"batch": "4"})


# -- optimiser and clipping ----------------------------------------------------------

def test_adam_first_step_moves_by_learning_rate():
    opt = Optimizer(TrainConfig())
    p = {"w": np.array([1.0, -2.0])}
    opt.step(p, {"w": np.array([0.5, -3.0])}, 0.1)
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-7)


def test_sgd_momentum_accumulates():
    opt = Optimizer(TrainConfig(optimizer="SGD", momentum=0.5))
    p = {"w": np.array([0.0])}
    opt.step(p, {"w": np.array([1.0])}, 0.1)
    opt.step(p, {"w": np.array([1.0])}, 0.1)
    assert p["w"][0] == pytest.approx(-0.1 - 0.15)


def test_lr_scale_slot_multiplies_the_step():
    opt = Optimizer(TrainConfig())
    opt.slots["w"] = {"lr_scale": np.array([1.0, 0.5, 0.0])}
    p = {"w": np.zeros(3)}
    opt.step(p, {"w": np.ones(3)}, 0.1)
    assert np.allclose(p["w"], [-0.1, -0.05, 0.0], atol=1e-7) and p["w"][2] == 0.0


def test_lr_scales_persist_through_resume(tmp_path, tiny):
    cfg = TrainConfig(epochs=2, learning_rate=1e-2, seed=4)
    scales = {"head.weight": 0.0, "conv1.bias": 3.0}
    model = build(SSNET, 6)
    head = model.params["head.weight"].data.copy()
    full, _, state = train(model, tiny, cfg, lr_scales=scales)
    assert np.array_equal(full.params["head.weight"].data, head)
    save_checkpoint(tmp_path / "full.ckpt", full, state)
    half, _, state = train(build(SSNET, 6), tiny, dataclasses.replace(cfg, epochs=1), lr_scales=scales)
    save_checkpoint(tmp_path / "half.ckpt", half, state)
    ckpt = load_checkpoint(tmp_path / "half.ckpt")
    resumed, _, state = train(ckpt.model, tiny, cfg, state=ckpt.train_state(cfg))
    save_checkpoint(tmp_path / "resumed.ckpt", resumed, state)
    assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()


def test_clip_is_identity_within_bound_and_scales_beyond():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 5.0) == 5.0 and g["a"][0] == 3.0 and g["b"][0] == 4.0
    assert clip_gradients(g, 1.0) == 5.0
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


def test_large_clip_norm_gives_the_unclipped_step(tiny):
    a = train(build(SSNET, 1), tiny, TrainConfig(epochs=1, clip_norm=1e6))[0]
    b = train(build(SSNET, 1), tiny, TrainConfig(epochs=1, clip_norm=1e9))[0]
    assert params_bytes(a) == params_bytes(b)


# -- training behaviour ----------------------------------------------------------------

def test_cross_entropy_decreases_over_first_five_epochs():
    data = generate_dataset(SceneConfig(seed=5, frames=4, height=16, width=16), 50)
    cfg = TrainConfig(epochs=5, learning_rate=3e-3, loss=LossConfig(lambda_incons=0.0))
    _, log, _ = train(build(ModelSpec("SSNet", base_channels=8), 0), data, cfg)
    ce = [e["ce"] for e in log.epochs]
    assert all(b < a for a, b in zip(ce, ce[1:])), ce
    assert log.lines[0].startswith("epoch 0: ce=")


def test_lstm_only_phase_freezes_everything_else(tiny):
    model = build(ESP_L1B, 2)
    before = {n: p.data.copy() for n, p in model.params.items()}
    train(model, tiny, TrainConfig(epochs=1, phase="LstmOnly", learning_rate=1e-2))
    for n, p in model.params.items():
        same = np.array_equal(before[n], p.data)
        assert same != n.startswith("lstm."), n
    assert all(p.requires_grad for p in model.params.values())


def test_lstm_only_needs_an_lstm():
    with pytest.raises(ValueError):
        trainable_names(build(SSNET), "LstmOnly")


def test_zero_learning_rate_changes_nothing(tiny):
    model = build(VSSNET, 3)
    before = params_bytes(model)
    _, log, _ = train(model, tiny, TrainConfig(epochs=3, learning_rate=0.0))
    assert params_bytes(model) == before
    assert len({e["total"] for e in log.epochs}) == 1


def test_divergence_names_scene_and_epoch(tiny):
    model = build(SSNET, 4)
    model.params["head.bias"].data[0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(model, tiny, TrainConfig(epochs=2))
    assert err.value.epoch == 0 and "scene_" in str(err.value)


def test_class_count_mismatch_is_rejected(tiny):
    with pytest.raises(ValueError, match="classes"):
        train(build(dataclasses.replace(SSNET, num_classes=5)), tiny, TrainConfig(epochs=1))


def test_validation_reports_are_logged(tiny):
    _, log, _ = train(build(SSNET), tiny, TrainConfig(epochs=2, eval_interval=1), val_dataset=tiny[:2])
    text = "\n".join(log.lines)
    assert text.count("[report epoch") == 2 and "miou=" in text


# -- determinism and persistence ----------------------------------------------------------

def test_training_is_bitwise_deterministic(tmp_path, tiny):
    cfg = TrainConfig(epochs=2, seed=9, loss=LossConfig(lambda_incons=10.0))
    for name in ("a", "b"):
        model, _, state = train(build(VSSNET, 9), tiny, cfg)
        save_checkpoint(tmp_path / f"{name}.ckpt", model, state)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("optimizer", ["Adam", "SGD"])
def test_resume_equals_uninterrupted_run(tmp_path, tiny, optimizer):
    full_cfg = TrainConfig(epochs=4, optimizer=optimizer, learning_rate=1e-2, lr_decay=0.9, seed=2)
    full, _, full_state = train(build(VSSNET, 5), tiny, full_cfg)
    save_checkpoint(tmp_path / "full.ckpt", full, full_state)

    half, _, half_state = train(build(VSSNET, 5), tiny, dataclasses.replace(full_cfg, epochs=2))
    save_checkpoint(tmp_path / "half.ckpt", half, half_state)
    ckpt = load_checkpoint(tmp_path / "half.ckpt")
    assert ckpt.epoch == 2
    resumed, _, state = train(ckpt.model, tiny, full_cfg, state=ckpt.train_state(full_cfg))
    save_checkpoint(tmp_path / "resumed.ckpt", resumed, state)
    assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()


def test_checkpoint_layout(tmp_path, tiny):
    model, _, state = train(build(SSNET), tiny, TrainConfig(epochs=1))
    save_checkpoint(tmp_path / "m.ckpt", model, state)
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"CKP1"
    texts, tensors = load_container(tmp_path / "m.ckpt")
    assert {"spec", "meta", "rng"} <= set(texts)
    assert set(model.params) <= set(tensors)
    assert any(k.startswith("optim.m.") for k in tensors)


def test_periodic_checkpoint_is_written(tmp_path, tiny):
    path = tmp_path / "p.ckpt"
    train(build(SSNET), tiny, TrainConfig(epochs=2, checkpoint_interval=1), checkpoint_path=path)
    assert load_checkpoint(path).epoch == 2


def test_log_file_is_append_only(tmp_path, tiny):
    path = tmp_path / "train.log"
    train(build(SSNET), tiny, TrainConfig(epochs=1), train_log=TrainLog(path))
    train(build(SSNET), tiny, TrainConfig(epochs=1), train_log=TrainLog(path))
    assert path.read_text().count("epoch 0: ce=") == 2


# -- recipes -------------------------------------------------------------------------------

def test_pretrain_base_uses_cross_entropy_only(tiny):
    recipe = dataclasses.replace(recipes.get_recipe("single_frame_baseline"), base=SSNET)
    base = recipes.pretrain_base(recipe, tiny, epochs=1, num_classes=4)
    assert base.spec == SSNET and base.lstm is None


def test_recipe_rows_match_the_tables():
    labels = lambda name: [r.label for r in recipes.get_recipe(name).rows]  # noqa: E731
    assert labels("lambda_sweep") == ["lambda_incons = 0", "lambda_incons = 10", "lambda_incons = 100"]
    assert [r.loss.lambda_incons for r in recipes.get_recipe("lambda_sweep").rows] == [0, 10, 100]
    assert labels("convolution_types") == ["Standard Convolution", "Depthwise Separable Convolution",
                                           "Depthw. Sep. Conv. Weight Sharing"]
    assert [r.spec.lstm_variant for r in recipes.get_recipe("convolution_types").rows] == \
        ["Standard", "DepthwiseSeparable", "DepthwiseShared"]
    assert recipes.get_recipe("lambda_sweep").phase == "LstmOnly"
    assert [r.spec.filter_size for r in recipes.get_recipe("convlstm_positions").rows[1:]] == [7, 3, 5, 9]
    assert set(recipes.RECIPES) == {"single_frame_baseline", "convlstm_positions", "convolution_types",
                                    "lambda_sweep", "diff_variant", "combined"}
    with pytest.raises(KeyError, match="unknown recipe"):
        recipes.get_recipe("table9")


@pytest.mark.parametrize("base,spec", [
    (SSNET, VSSNET),
    *[(ModelSpec("MiniEsp", num_classes=4, esp_widths=(2, 8, 8)),
       ModelSpec("MiniEsp", lstm_position=p, num_classes=4, esp_widths=(2, 8, 8))) for p in ("L1c", "L1d")],
])
def test_warm_start_reproduces_the_base_on_static_input(base, spec):
    rng = np.random.default_rng(0)
    src, dst = build(base, 1), build(spec, 2)
    recipes.transplant(src, dst)
    scales = recipes.warm_start_lstm(src, dst)
    assert set(scales) <= set(dst.params)
    assert scales["lstm.W_xc"].max() == recipes.CANDIDATE_SCALE and scales["lstm.W_xi"].min() == 1.0
    x = np.repeat(rng.uniform(size=(1, 3, 12, 12)), 12, axis=0)
    gap = np.abs(predict(src, x) - predict(dst, x)).max(axis=(1, 2, 3))
    assert gap[-1] < 0.01 and gap[-1] < gap[0]


def test_warm_start_at_l1a_preserves_static_labels():
    base = ModelSpec("MiniEsp", num_classes=4, esp_widths=(2, 8, 8))
    for variant in ("Standard", "DepthwiseSeparable", "DepthwiseShared"):
        src = build(base, 1)
        dst = build(dataclasses.replace(base, lstm_position="L1a", lstm_filter=3, lstm_variant=variant), 2)
        recipes.transplant(src, dst)
        assert recipes.warm_start_lstm(src, dst) is not None
        x = np.repeat(np.random.default_rng(1).uniform(size=(1, 3, 12, 12)), 3, axis=0)
        assert np.array_equal(predict(src, x).argmax(-1), predict(dst, x).argmax(-1))


def test_warm_start_declines_depthwise_replacements():
    src = build(SSNET, 1)
    dst = build(dataclasses.replace(VSSNET, lstm_variant="DepthwiseSeparable"), 2)
    recipes.transplant(src, dst)
    assert recipes.warm_start_lstm(src, dst) is None
    assert recipes.warm_start_lstm(src, build(SSNET)) is None


def test_run_experiment_emits_one_row_per_configuration(tiny):
    base = build(ModelSpec("MiniEsp", num_classes=4, esp_widths=(2, 8, 8)), 0)
    result = recipes.run_experiment("lambda_sweep", tiny, tiny[:2], base=base, finetune_epochs=1)
    assert [name for name, _ in result.rows] == [r.label for r in recipes.get_recipe("lambda_sweep").rows]
    table = result.table()
    assert "mIoU" in table and "ConsW" in table and "lambda_incons = 100" in table
    for _, rep in result.rows:
        assert 0 <= rep.consw <= rep.cons <= 100

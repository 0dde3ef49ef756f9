import filecmp

import numpy as np
import pytest

from framecons import tensor as tn
from framecons.cli import colorize, decolorize, main, palette
from framecons.datagen import read_dataset, write_label_maps
from framecons.labels import IGNORE
from framecons.metrics import inconsistency_maps
from framecons.netpbm import read_pgm, read_ppm
from framecons.tensorio import parse_kv

SMALL = ["frames=4", "height=12", "width=12", "max_shapes=4"]


def run(capsys, *argv):
    code = main(["--quiet", *map(str, argv)])
    out, err = capsys.readouterr()
    return code, out, err


def kv(text):
    return parse_kv(text, "<stdout>")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["--quiet", "--seed", "3", "generate-data", "--out", str(d), "--scenes", "3", *SMALL]) == 0
    return d


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / s, b / s) for s in cmp.common_dirs)


# -- generate-data ---------------------------------------------------------------------

def test_generate_data_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "--seed", 7, "generate-data", "--out", tmp_path / name, "--scenes", 1, *SMALL)[0] == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")


def test_generate_data_summary_histogram(tmp_path, capsys):
    code, out, _ = run(capsys, "generate-data", "--out", tmp_path, "--scenes", 2, *SMALL)
    assert code == 0
    info = kv(out)
    hist = [int(v) for v in info["class_histogram"].split(",")]
    assert sum(hist) == int(info["pixels"]) == 2 * 4 * 12 * 12
    ds = read_dataset(tmp_path)
    assert hist == np.bincount(np.concatenate([ds[k].labels.ravel() for k in range(2)]), minlength=6).tolist()


def test_generate_data_rejects_zero_scenes_and_bad_keys(tmp_path, capsys):
    assert run(capsys, "generate-data", "--out", tmp_path, "--scenes", 0)[0] == 2
    assert run(capsys, "generate-data", "--out", tmp_path, "--scenes", 1, "speed=4")[0] == 2
    assert run(capsys, "generate-data", "--out", tmp_path, "--scenes", 1, "height=13")[0] == 2


def test_generate_data_reads_config_file(tmp_path, capsys):
    cfg = tmp_path / "scene.cfg"
    cfg.write_text("# tiny scenes\nframes=3\nheight=8\nwidth=8\n")
    code, out, _ = run(capsys, "generate-data", "--out", tmp_path / "d", "--scenes", 1, "--config", cfg)
    assert code == 0 and kv(out)["frames"] == "3" and kv(out)["height"] == "8"


# -- train ------------------------------------------------------------------------------

def test_train_smoke_and_resume(tmp_path, data_dir, capsys):
    common = ["--data", data_dir, "--model", "architecture=VSSNet,base_channels=3", "learning_rate=0.01"]
    assert run(capsys, "train", *common, "--out", tmp_path / "full.ckpt", "--epochs", 2)[0] == 0
    assert (tmp_path / "full.ckpt").is_file()
    assert "epoch 1: ce=" in (tmp_path / "full.ckpt.log").read_text()
    assert run(capsys, "train", *common, "--out", tmp_path / "half.ckpt", "--epochs", 1)[0] == 0
    assert run(capsys, "train", *common, "--out", tmp_path / "resumed.ckpt", "--epochs", 2,
               "--resume", tmp_path / "half.ckpt")[0] == 0
    assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()


def test_train_with_recipe_and_validation(tmp_path, data_dir, capsys):
    code, out, _ = run(capsys, "train", "--data", data_dir, "--val", data_dir, "--recipe", "lambda_sweep",
                       "--model", "architecture=MiniEsp,lstm_position=L1b,esp_widths=2/8/8",
                       "--out", tmp_path / "m.ckpt")
    assert code == 0 and "miou=" in out


def test_train_bad_spec_names_the_field(tmp_path, data_dir, capsys):
    code, _, err = run(capsys, "train", "--data", data_dir, "--model", "architecture=SSNet,lstm_filter=4",
                       "--out", tmp_path / "x.ckpt", "--epochs", 1)
    assert code == 2 and "lstm_filter" in err
    code, _, err = run(capsys, "train", "--data", data_dir, "--model", "architecture=Nope",
                       "--out", tmp_path / "x.ckpt")
    assert code == 2 and "architecture" in err


def test_train_missing_data_is_a_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nowhere", "--model", "architecture=SSNet",
                       "--out", tmp_path / "x.ckpt")
    assert code == 2 and "manifest" in err


# -- eval -------------------------------------------------------------------------------

def labels_of(data_dir):
    ds = read_dataset(data_dir)
    return [ds[k].labels for k in range(len(ds))]


def test_eval_perfect_oracle(tmp_path, data_dir, capsys):
    write_label_maps(tmp_path, labels_of(data_dir))
    code, out, err = run(capsys, "eval", "--data", data_dir, "--predictions", tmp_path)
    rep = kv(out)
    assert code == 0
    assert (float(rep["miou"]), float(rep["acc"]), float(rep["cons"]), float(rep["consw"])) == (100, 100, 100, 0)
    assert (tmp_path / "eval_report.txt").read_text() == out
    assert "miou=" not in err


def test_eval_constant_predictor(tmp_path, data_dir, capsys):
    labels = labels_of(data_dir)
    write_label_maps(tmp_path, [np.zeros_like(s) for s in labels])
    rep = kv(run(capsys, "eval", "--data", data_dir, "--predictions", tmp_path)[1])
    pool = np.concatenate([(s[:-1] != IGNORE) & (s[:-1] == s[1:]) for s in labels], axis=None)
    cls0 = np.concatenate([((s[:-1] != IGNORE) & (s[:-1] == s[1:]) & (s[:-1] == 0)) for s in labels], axis=None)
    assert float(rep["cons"]) == 100.0
    assert abs(float(rep["consw"]) - 100.0 * (1 - cls0.sum() / pool.sum())) <= 1e-9


def test_eval_checkpoint_twice_is_identical(tmp_path, data_dir, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert run(capsys, "train", "--data", data_dir, "--model", "architecture=SSNet,base_channels=3",
               "--out", ckpt, "--epochs", 1)[0] == 0
    first = run(capsys, "eval", "--data", data_dir, "--ckpt", ckpt)
    second = run(capsys, "eval", "--data", data_dir, "--ckpt", ckpt)
    assert first[0] == second[0] == 0 and first[1] == second[1]
    assert (tmp_path / "m.ckpt.eval.txt").read_text() == first[1]
    sparse = kv(run(capsys, "eval", "--data", data_dir, "--ckpt", ckpt, "--sparse-gt", 2)[1])
    assert sparse["gt_mode"] == "sparse(stride=2)"


def test_eval_needs_exactly_one_source(data_dir, capsys):
    assert run(capsys, "eval", "--data", data_dir)[0] == 2


# -- gradcheck --------------------------------------------------------------------------

def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "loss", "--seeds", 1)
    assert code == 0 and "failed=0" in out


def test_gradcheck_catches_a_sign_flip(monkeypatch, capsys):
    def flipped_tanh(a):
        a = tn.as_tensor(a)
        y = np.tanh(a.data)
        return tn._result(y, (a,), lambda g: (-(1 - y * y) * g,))

    monkeypatch.setattr(tn, "tanh", flipped_tanh)
    code, out, _ = run(capsys, "gradcheck", "--scope", "primitives", "--seeds", 1)
    assert code == 3 and "FAIL" in out


# -- render -------------------------------------------------------------------------------

def test_palette_is_injective_and_invertible():
    for k in (2, 6, 36):
        pal = palette(k)
        assert len({tuple(c) for c in pal}) == k
    labels = np.array([[0, 5, IGNORE], [3, 1, 2]], dtype=np.uint8)
    rgb = colorize(labels, 6)
    assert rgb[0, 2].tolist() == [0, 0, 0]
    assert np.array_equal(decolorize(rgb, 6), labels)


def test_render_predictions_masks_match_metrics(tmp_path, data_dir, capsys):
    labels = labels_of(data_dir)
    preds = [np.roll(s, 1, axis=2) for s in labels]
    write_label_maps(tmp_path / "p", preds)
    code, _, _ = run(capsys, "render", "--data", data_dir, "--predictions", tmp_path / "p", "--scene", 1,
                     "--out", tmp_path / "r")
    assert code == 0
    for t in range(4):
        assert np.array_equal(decolorize(read_ppm(tmp_path / "r" / f"gt_{t:03d}.ppm"), 6), labels[1][t])
        assert np.array_equal(decolorize(read_ppm(tmp_path / "r" / f"pred_{t:03d}.ppm"), 6), preds[1][t])
    for t in range(3):
        flips, change = inconsistency_maps(preds[1], labels[1], t)
        assert np.array_equal(read_pgm(tmp_path / "r" / f"pred_incons_{t:03d}.pgm"), flips.astype(np.uint8) * 255)
        assert np.array_equal(read_pgm(tmp_path / "r" / f"gt_change_{t:03d}.pgm"), change.astype(np.uint8) * 255)


def test_render_static_scene_with_stateless_model(tmp_path, capsys):
    static = ["frames=3", "height=8", "width=8", "min_speed=0", "max_speed=0", "noise_sigma=0",
              "illumination_amplitude=0"]
    assert run(capsys, "generate-data", "--out", tmp_path / "d", "--scenes", 1, *static)[0] == 0
    assert run(capsys, "train", "--data", tmp_path / "d", "--model", "architecture=SSNet,base_channels=2",
               "--out", tmp_path / "m.ckpt", "--epochs", 1)[0] == 0
    assert run(capsys, "render", "--data", tmp_path / "d", "--ckpt", tmp_path / "m.ckpt", "--scene", 0,
               "--out", tmp_path / "r")[0] == 0
    frames = [(tmp_path / "r" / f"pred_{t:03d}.ppm").read_bytes() for t in range(3)]
    assert frames[0] == frames[1] == frames[2]
    assert not read_pgm(tmp_path / "r" / "pred_incons_000.pgm").any()


def test_render_rejects_bad_scene(data_dir, tmp_path, capsys):
    assert run(capsys, "render", "--data", data_dir, "--predictions", tmp_path, "--scene", 9,
               "--out", tmp_path / "r")[0] == 2


# -- params ---------------------------------------------------------------------------------

@pytest.mark.parametrize("variant,expected", [("Standard", 26125), ("DepthwiseSeparable", 1501),
                                              ("DepthwiseShared", 79)])
def test_params_goldens(capsys, variant, expected):
    code, out, _ = run(capsys, "params", "--model", f"convlstm,in=19,out=19,filter=3,variant={variant}")
    assert code == 0 and kv(out)["params"] == str(expected)


def test_params_for_a_model_spec(capsys):
    code, out, _ = run(capsys, "params", "--model", "architecture=MiniEsp,lstm_position=L1b")
    info = kv(out)
    assert code == 0 and int(info["params"]) > int(info["convlstm_params"]) > 0
    assert run(capsys, "params", "--model", "convlstm,in=3,out=4,variant=DepthwiseShared")[0] == 2

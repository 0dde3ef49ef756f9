import dataclasses

import numpy as np
import pytest

from framecons.datagen import (DatasetError, SceneConfig, ShapeSpec, generate_dataset, generate_scene,
                               generate_scenes, labelled_frames, mix_datasets, read_dataset,
                               read_label_maps, sparse_gt_view, write_dataset, write_label_maps)
from framecons.labels import IGNORE
from framecons.losses import omega_norm
from framecons.netpbm import NetpbmError, quantize, read_pgm, read_ppm, write_pgm, write_ppm
from oracles import omega_norm_loop

SMALL = SceneConfig(seed=3, frames=6, height=16, width=20)


# -- generation ---------------------------------------------------------------------

def test_static_scene():
    cfg = dataclasses.replace(SMALL, min_speed=0.0, max_speed=0.0, noise_sigma=0.0,
                              illumination_amplitude=0.0)
    scene = generate_scene(cfg)
    assert all(np.array_equal(scene.frames[0], f) for f in scene.frames)
    assert all(np.array_equal(scene.labels[0], s) for s in scene.labels)
    assert omega_norm(scene.labels) == (cfg.frames - 1) * cfg.height * cfg.width


def test_same_seed_is_bitwise_identical():
    a, b = generate_scene(SMALL), generate_scene(SMALL)
    assert a.frames.tobytes() == b.frames.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_different_seeds_differ():
    scenes = generate_scenes(SMALL, 4)
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(scenes[i].frames, scenes[j].frames)


def test_disk_centroid_advances_two_pixels_per_frame():
    disk = ShapeSpec("disk", x=14.0, y=20.0, vx=2.0, vy=0.0, size=5.0, color=(0.9, 0.2, 0.2))
    cfg = SceneConfig(frames=10, height=40, width=64, shapes=(disk,), noise_sigma=0.0)
    labels = generate_scene(cfg).labels
    xs = np.arange(64)
    cx = [(xs * (lab == disk.class_id).sum(axis=0)).sum() / (lab == disk.class_id).sum() for lab in labels]
    steps = np.diff(cx)
    assert np.all(np.abs(steps - 2.0) <= 0.1), steps


def test_shapes_bounce_at_borders():
    bar = ShapeSpec("bar", x=50.0, y=10.0, vx=3.0, vy=0.0, size=4.0, color=(0.1, 0.8, 0.1))
    cfg = SceneConfig(frames=20, height=20, width=60, shapes=(bar,), num_classes=6)
    labels = generate_scene(cfg).labels
    assert all((lab == bar.class_id).any() for lab in labels)


def test_rgb_silhouette_matches_labels_on_noise_free_scene():
    shapes = (ShapeSpec("square", 10.0, 10.0, 1.0, 0.5, 4.0, (0.9, 0.1, 0.1)),
              ShapeSpec("disk", 20.0, 12.0, -1.0, 0.0, 5.0, (0.1, 0.9, 0.1)))
    cfg = SceneConfig(frames=5, height=24, width=32, shapes=shapes, noise_sigma=0.0,
                      illumination_amplitude=0.1, illumination_period=7.0)
    scene = generate_scene(cfg)
    gain = 1 + 0.1 * np.sin(2 * np.pi * np.arange(5) / 7.0)
    for shape in shapes:
        color = np.array(shape.color)
        for t in range(5):
            pix = scene.frames[t].transpose(1, 2, 0) / gain[t]
            hit = np.all(np.abs(pix - color) <= 1e-12, axis=-1)
            assert np.array_equal(hit, scene.labels[t] == shape.class_id)


def test_illumination_changes_rgb_not_labels():
    base = dataclasses.replace(SMALL, noise_sigma=0.0, illumination_amplitude=0.0)
    lit = dataclasses.replace(base, illumination_amplitude=0.3)
    a, b = generate_scene(base), generate_scene(lit)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.frames, b.frames)
    assert b.frames.min() >= 0 and b.frames.max() <= 1


def test_invalid_border_marks_ignore():
    scene = generate_scene(dataclasses.replace(SMALL, invalid_border=2))
    assert np.all(scene.labels[:, :2] == IGNORE) and np.all(scene.labels[:, :, -2:] == IGNORE)
    assert not np.any(scene.labels[:, 2:-2, 2:-2] == IGNORE)


@pytest.mark.parametrize("kw", [dict(frames=1), dict(height=18), dict(num_classes=9),
                                dict(min_shapes=5, max_shapes=2), dict(noise_sigma=-0.1)])
def test_invalid_configs_are_rejected(kw):
    with pytest.raises(ValueError):
        SceneConfig(**kw)


def test_config_kv_round_trip():
    cfg = dataclasses.replace(SMALL, occlusion=False, noise_sigma=0.05)
    assert SceneConfig.from_kv(cfg.to_kv()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        SceneConfig.from_kv({"speed": "3"})


# -- on-disk format ------------------------------------------------------------------

def test_write_read_round_trip(tmp_path):
    ds = generate_dataset(SMALL, 3, split="val")
    write_dataset(ds, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert len(back) == 3 and back.num_classes == ds.num_classes and back.split == "val"
    assert back.config == SMALL
    for k in range(3):
        assert np.array_equal(back[k].labels, ds[k].labels)
        assert np.max(np.abs(back[k].frames - ds[k].frames)) <= 1 / 510 + 1e-12
    frame = read_ppm(tmp_path / "d" / "scene_00000" / "frame_000.ppm")
    assert frame.shape == (16, 20, 3)
    manifest = (tmp_path / "d" / "manifest.txt").read_text()
    assert "version=1" in manifest and "scenes=3" in manifest


def test_empty_directory_has_no_manifest(tmp_path):
    with pytest.raises(DatasetError, match="no manifest"):
        read_dataset(tmp_path)


def test_scene_count_mismatch_names_the_scene(tmp_path):
    write_dataset(generate_dataset(SMALL, 2), tmp_path)
    text = (tmp_path / "manifest.txt").read_text().replace("scenes=2", "scenes=3")
    (tmp_path / "manifest.txt").write_text(text)
    with pytest.raises(DatasetError, match="scene_00002"):
        read_dataset(tmp_path)


def test_bad_label_value_is_rejected(tmp_path):
    write_dataset(generate_dataset(SMALL, 1), tmp_path)
    path = tmp_path / "scene_00000" / "label_000.pgm"
    lab = read_pgm(path)
    lab[0, 0] = 7
    write_pgm(path, lab)
    with pytest.raises(DatasetError, match="scene_00000"):
        read_dataset(tmp_path)


def test_missing_frame_is_reported(tmp_path):
    write_dataset(generate_dataset(SMALL, 1), tmp_path)
    (tmp_path / "scene_00000" / "frame_003.ppm").unlink()
    with pytest.raises(DatasetError, match="frame_003"):
        read_dataset(tmp_path)


def test_label_maps_round_trip(tmp_path):
    maps = [np.random.default_rng(k).integers(0, 6, size=(4, 8, 8)).astype(np.uint8) for k in range(2)]
    write_label_maps(tmp_path, maps)
    back = read_label_maps(tmp_path, 2, 4)
    assert all(np.array_equal(a, b) for a, b in zip(maps, back))


# -- sparse GT and mixing ---------------------------------------------------------------

def test_sparse_view_stride_patterns():
    assert labelled_frames(30, 20).tolist() == [19]
    ds = generate_dataset(SMALL, 2)
    ident = sparse_gt_view(ds, 1)
    assert np.array_equal(ident[0].labels, ds[0].labels)
    view = sparse_gt_view(ds, 3)
    s = view[0].labels
    assert np.all(s[[0, 1, 3, 4]] == IGNORE)
    assert np.array_equal(s[[2, 5]], ds[0].labels[[2, 5]])
    assert np.array_equal(view[0].temporal_labels, ds[0].labels)
    # only pairs whose first frame is labelled and matches the next can count
    assert omega_norm(s) == omega_norm_loop(s) == 0
    view2 = sparse_gt_view(ds, 2)[0].labels
    assert omega_norm(view2) == omega_norm_loop(view2) == 0


def test_sparse_view_with_adjacent_labels_counts_only_labelled_starts():
    ds = generate_dataset(dataclasses.replace(SMALL, frames=4), 1)
    s = ds[0].labels.copy()
    s[0] = IGNORE
    s[3] = IGNORE
    got = omega_norm(s)
    assert got == omega_norm_loop(s) == int((s[1] == s[2]).sum())


def test_mix_datasets_fraction():
    a, b = generate_dataset(SMALL, 9), generate_dataset(dataclasses.replace(SMALL, seed=99), 5)
    mixed = mix_datasets(a, b, 0.1)
    assert len(mixed) == 10
    with pytest.raises(ValueError):
        mix_datasets(a, b, 1.0)


# -- netpbm ------------------------------------------------------------------------------

def test_netpbm_round_trip_and_quantisation(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert quantize(np.array([0.0, 0.5, 1.0, 1.2, -0.1])).tolist() == [0, 128, 255, 255, 0]


def test_netpbm_errors(tmp_path):
    with pytest.raises(NetpbmError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2), dtype=np.int32))
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(NetpbmError, match="raster"):
        read_pgm(tmp_path / "t.pgm")
    (tmp_path / "m.pgm").write_bytes(b"P6\n1 1\n255\n" + bytes(3))
    with pytest.raises(NetpbmError, match="expected P5"):
        read_pgm(tmp_path / "m.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n1 1\n255\n" + bytes([9]))
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[9]]

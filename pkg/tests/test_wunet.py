import numpy as np
import pytest

from weatherunet import autodiff as ad
from weatherunet import wunet as W
from weatherunet.datasets import SampleRecord, SceneSpec, generate_scene, write_manifest
from weatherunet.imaging import HSV, CropGrid, Image, join_crops, split_crops, write_ppm
from weatherunet.weathergen import apply_fog


def param_count(depth, base):
    """Closed-form parameter count, written independently of conv_shapes."""
    total, cin = 0, 3
    for lvl in range(depth):
        c = base * 2 ** lvl
        total += (cin * 9 + 1) * c + (c * 9 + 1) * c
        cin = c
    cb = base * 2 ** depth
    total += (cin * 9 + 1) * cb + (cb * 9 + 1) * cb
    for lvl in range(depth):
        c = base * 2 ** lvl
        total += ((2 * c + c) * 9 + 1) * c + (c * 9 + 1) * c
    return total + (base + 1) * 3


@pytest.mark.parametrize("depth, base", [(3, 16), (2, 8), (1, 1), (4, 4)])
def test_parameter_count(depth, base):
    m = W.build_model(W.WUNetConfig(depth=depth, base_channels=base, input_size=(64, 32)), 0)
    assert m.num_parameters() == param_count(depth, base)


def test_full_scale_config_expressible():
    whole = W.WUNetConfig(depth=3, input_size=(640, 200))
    crop = W.WUNetConfig(depth=2, crop_mode=True, crop_grid=(4, 2), input_size=(640, 200))
    assert whole.net_size == (640, 200)
    assert crop.net_size == (160, 100)
    assert W.TrainConfig().resolved_batch(False) == 24
    assert W.TrainConfig().resolved_batch(True) == 160
    assert (W.TrainConfig().epochs, W.TrainConfig().lr) == (200, 0.01)


def test_init_deterministic_and_he_uniform():
    cfg = W.WUNetConfig(depth=2, base_channels=8)
    a, b, c = W.build_model(cfg, 5), W.build_model(cfg, 5), W.build_model(cfg, 6)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    assert not np.array_equal(a.params["enc0.conv1.weight"].data, c.params["enc0.conv1.weight"].data)
    w = a.params["enc1.conv1.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / (8 * 9))
    assert not a.params["enc1.conv1.bias"].data.any()


def test_config_errors():
    with pytest.raises(W.ConfigError):
        W.WUNetConfig(depth=3, input_size=(64, 100))
    with pytest.raises(W.ConfigError):
        W.WUNetConfig(crop_mode=True)
    with pytest.raises(W.ConfigError):
        W.WUNetConfig(base_channels=0)
    with pytest.raises(W.ConfigError):
        W.TrainConfig(lr=0)


def rand_image(seed, w, h):
    return Image(np.random.default_rng(seed).random((h, w, 3)))


def test_untrained_output_range():
    m = W.build_model(W.WUNetConfig(depth=2, base_channels=4, input_size=(32, 16)), 1)
    out = W.forward_image(m, rand_image(0, 32, 16))
    assert (out.width, out.height) == (32, 16)
    assert out.data.min() > 0 and out.data.max() < 1


def test_forward_dimension_mismatch():
    m = W.build_model(W.WUNetConfig(depth=2, base_channels=4, input_size=(32, 16)), 1)
    with pytest.raises(ad.ShapeError):
        W.forward_image(m, rand_image(0, 16, 16))


def test_crop_mode_matches_manual_tiling():
    cfg = W.WUNetConfig(depth=2, base_channels=4, crop_mode=True, crop_grid=(4, 2), input_size=(64, 32))
    m = W.build_model(cfg, 2)
    grid = CropGrid.for_size(64, 32, 4, 2)
    for s in range(3):
        img = rand_image(s, 64, 32)
        out = W.forward_image(m, img)
        assert (out.width, out.height) == (64, 32)
        manual = []
        for crop in split_crops(img, grid):
            pred = m.predict(W.image_to_array(crop, "RGB")[None])[0]
            manual.append(W.array_to_image(pred, "RGB"))
        assert out == join_crops(manual, grid)


def test_hsv_model_returns_rgb():
    m = W.build_model(W.WUNetConfig(depth=1, base_channels=2, color_space=HSV, input_size=(8, 8)), 0)
    out = W.forward_image(m, rand_image(3, 8, 8))
    assert out.space == "RGB"


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = W.WUNetConfig(depth=2, base_channels=4, crop_mode=True, crop_grid=(2, 1), input_size=(32, 8))
    m = W.build_model(cfg, 3)
    W.save_checkpoint(m, tmp_path / "a.wun", test_mse=0.125)
    loaded = W.load_checkpoint(tmp_path / "a.wun")
    assert loaded.cfg == cfg
    for k in m.params:
        assert np.array_equal(m.params[k].data, loaded.params[k].data)
    W.save_checkpoint(loaded, tmp_path / "b.wun", test_mse=0.125)
    assert (tmp_path / "a.wun").read_bytes() == (tmp_path / "b.wun").read_bytes()
    assert W.read_checkpoint(tmp_path / "a.wun").test_mse == 0.125
    img = rand_image(9, 32, 8)
    assert W.forward_image(m, img) == W.forward_image(loaded, img)


def test_checkpoint_errors(tmp_path):
    m = W.build_model(W.WUNetConfig(depth=1, base_channels=2, input_size=(8, 8)), 0)
    W.save_checkpoint(m, tmp_path / "ok.wun")
    data = (tmp_path / "ok.wun").read_bytes()
    with pytest.raises(W.CheckpointMagicError):
        W.decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(W.CheckpointVersionError):
        W.decode_checkpoint(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(W.CheckpointTruncatedError):
        W.decode_checkpoint(data[:-10])
    with pytest.raises(W.CheckpointError):
        W.decode_checkpoint(data + b"\x00")


# -- training --------------------------------------------------------------

def scene_pairs(n, seed, w=32, h=16, fog=None):
    xs, ys = [], []
    for i in range(n):
        img, _ = generate_scene(SceneSpec(seed=seed * 1000 + i, width=w, height=h, n_objects=1))
        noisy = apply_fog(img, fog[i], i) if fog is not None else img
        xs.append(W.image_to_array(noisy, "RGB"))
        ys.append(W.image_to_array(img, "RGB"))
    return np.stack(xs), np.stack(ys)


def test_identity_autoencoding_converges():
    x, y = scene_pairs(16, 1)
    xt, yt = scene_pairs(8, 2)
    m = W.build_model(W.WUNetConfig(depth=2, base_channels=16, input_size=(32, 16)), 0)
    res = W.fit(m, x, y, xt, yt, W.TrainConfig(epochs=50, batch_size=2, lr=0.001, seed=0))
    assert res.best.test_mse < 1e-3


def test_training_deterministic():
    x, y = scene_pairs(8, 3)
    runs = []
    for _ in range(2):
        m = W.build_model(W.WUNetConfig(depth=2, base_channels=4, input_size=(32, 16)), 7)
        runs.append(W.fit(m, x, y, x[:4], y[:4], W.TrainConfig(epochs=3, batch_size=4, seed=1)))
    assert runs[0].history == runs[1].history
    for k in runs[0].best.params:
        assert np.array_equal(runs[0].best.params[k], runs[1].best.params[k])


def test_fog_training_beats_identity_baseline():
    rng = np.random.default_rng(0)
    x, y = scene_pairs(32, 4, fog=rng.uniform(0.5, 1.0, 32))
    xt, yt = scene_pairs(8, 5, fog=rng.uniform(0.5, 1.0, 8))
    m = W.build_model(W.WUNetConfig(depth=2, base_channels=8, input_size=(32, 16)), 0)
    res = W.fit(m, x, y, xt, yt, W.TrainConfig(epochs=20, batch_size=4, lr=0.001, seed=0))
    baseline = float(np.mean((xt - yt) ** 2))
    assert res.best.test_mse <= 0.5 * baseline
    assert res.best.test_mse <= res.history[0][2]


def test_nan_loss_aborts():
    x, y = scene_pairs(4, 6)
    x[0, 0, 0, 0] = np.nan
    m = W.build_model(W.WUNetConfig(depth=1, base_channels=2, input_size=(32, 16)), 0)
    with pytest.raises(W.TrainingError, match="epoch 1"):
        W.fit(m, x, y, x, y, W.TrainConfig(epochs=1, batch_size=4))


def _toy_manifest(tmp_path, n=4):
    recs = []
    for i in range(n):
        img, _ = generate_scene(SceneSpec(seed=i, width=32, height=16, n_objects=1))
        clear, fog = tmp_path / f"c{i}.ppm", tmp_path / f"f{i}.ppm"
        write_ppm(img, clear)
        write_ppm(apply_fog(img, 0.6, i), fog)
        recs.append(SampleRecord(f"s{i}_fog", str(fog), "fog", 0.6, None, str(clear)))
    write_manifest(recs, tmp_path / "m.jsonl")
    return tmp_path / "m.jsonl", recs


def test_train_from_manifest_writes_log_and_checkpoints(tmp_path):
    manifest, _ = _toy_manifest(tmp_path)
    m = W.build_model(W.WUNetConfig(depth=1, base_channels=2, input_size=(32, 16)), 0)
    ckdir = tmp_path / "ck"
    best = W.train(m, manifest, manifest, W.TrainConfig(epochs=3, batch_size=2, checkpoint_dir=str(ckdir)))
    lines = (ckdir / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,test_mse"
    assert len(lines) == 4
    assert W.read_checkpoint(ckdir / "best.wun").test_mse == best.test_mse
    assert (ckdir / "last.wun").exists()


def test_crop_mode_training_splits_whole_images(tmp_path):
    manifest, recs = _toy_manifest(tmp_path)
    cfg = W.WUNetConfig(depth=1, base_channels=2, crop_mode=True, crop_grid=(2, 1), input_size=(32, 16))
    x, _ = W.load_pairs(recs, cfg)
    assert x.shape == (8, 3, 16, 16)


def test_train_missing_file_names_record(tmp_path):
    recs = [SampleRecord("lost", str(tmp_path / "nope.ppm"), "fog", 0.5, None, str(tmp_path / "c.ppm"))]
    m = W.build_model(W.WUNetConfig(depth=1, base_channels=2, input_size=(32, 16)), 0)
    with pytest.raises(W.DataError, match="lost"):
        W.train(m, recs, [], W.TrainConfig(epochs=1))

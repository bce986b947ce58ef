import numpy as np
import pytest

from openworldseg.model import (BackboneConfig, CheckpointError, TrainHyper, append_head,
                                build_model, forward_features, load_checkpoint,
                                save_checkpoint, train_closed_set)
from openworldseg.shapesworld import WorldSpec, generate


def tiny_image(seed=0, size=16):
    return np.random.default_rng(seed).uniform(size=(3, size, size)).astype(np.float32)


def test_head0_feature_shape():
    model = build_model(4, seed=0)
    feats = forward_features(model, 0, tiny_image(size=32))
    assert feats.shape == (4, 32, 32)


def test_later_head_shapes_follow_n_plus_k():
    model = build_model(4, seed=0)
    append_head(model, "novel_a", seed=1)
    append_head(model, "novel_b", seed=2)
    assert forward_features(model, 1, tiny_image()).shape == (5, 16, 16)
    assert forward_features(model, 2, tiny_image()).shape == (6, 16, 16)
    assert model.heads[2].spec.owned_class_id == 5


def test_forward_deterministic():
    model = build_model(5, seed=3)
    img = tiny_image(1)
    a = forward_features(model, 0, img).data
    b = forward_features(model, 0, img).data
    assert np.array_equal(a, b)


def test_unknown_head_rejected():
    model = build_model(4, seed=0)
    with pytest.raises(KeyError):
        forward_features(model, 3, tiny_image())


def test_small_image_rejected():
    model = build_model(4, seed=0)
    with pytest.raises(ValueError, match=">= 8"):
        forward_features(model, 0, tiny_image(size=4))


def test_spatial_resolution_preserved_any_size():
    model = build_model(3, seed=0)
    for size in (8, 17, 32):
        assert forward_features(model, 0, tiny_image(size=size)).shape == (3, size, size)


def test_zero_lr_leaves_parameters_bitwise(small_world):
    model = build_model(5, seed=0)
    before = {name: t.data.copy() for name, t in model.named_tensors()}
    train_closed_set(model, small_world["train"][:8],
                     TrainHyper(learning_rate=0.0, iterations=1, batch_size=2, seed=0))
    for name, t in model.named_tensors():
        assert np.array_equal(before[name], t.data), name


def test_all_ignored_batch_no_update():
    model = build_model(5, seed=0)
    image = tiny_image(0, size=16)
    labels = np.full((16, 16), 255, dtype=np.uint8)
    before = {name: t.data.copy() for name, t in model.named_tensors()}
    log = train_closed_set(model, [(image, labels)],
                           TrainHyper(learning_rate=0.1, momentum=0.0, weight_decay=0.0,
                                      iterations=1, batch_size=2, seed=0))
    assert log[0]["loss"] == 0.0
    for name, t in model.named_tensors():
        assert np.array_equal(before[name], t.data), name


def test_out_of_range_label_rejected():
    model = build_model(5, seed=0)
    image = tiny_image(0, size=16)
    labels = np.full((16, 16), 9, dtype=np.uint8)
    with pytest.raises(ValueError, match="label id 9"):
        train_closed_set(model, [(image, labels)], TrainHyper(iterations=1))


def test_loss_decreases_on_seeded_run(small_world):
    model = build_model(5, seed=7)
    log = train_closed_set(model, small_world["train"],
                           TrainHyper(learning_rate=0.02, iterations=60, batch_size=4, seed=7))
    losses = [e["loss"] for e in log]
    first = float(np.mean(losses[:10]))
    last = float(np.mean(losses[-10:]))
    assert last < first


def test_training_is_deterministic(small_world):
    runs = []
    for _ in range(2):
        model = build_model(5, seed=7)
        train_closed_set(model, small_world["train"][:10],
                         TrainHyper(learning_rate=0.02, iterations=10, batch_size=2, seed=7))
        runs.append(model.params_digest())
    assert runs[0] == runs[1]


def test_checkpoint_roundtrip_bitwise(tmp_path, small_model):
    save_checkpoint(small_model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    img = tiny_image(5, size=24)
    a = forward_features(small_model, 0, img).data
    b = forward_features(loaded, 0, img).data
    assert np.array_equal(a, b)
    assert loaded.params_digest() == small_model.params_digest()


def test_checkpoint_save_is_byte_deterministic(tmp_path, small_model):
    save_checkpoint(small_model, tmp_path / "a")
    save_checkpoint(small_model, tmp_path / "b")
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert files_a == files_b
    for name in files_a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_corrupt_magic(tmp_path, small_model):
    save_checkpoint(small_model, tmp_path / "ckpt")
    victim = tmp_path / "ckpt" / "backbone.0.w.dmlt"
    victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="backbone.0.w"):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path)


def test_checkpoint_version_mismatch(tmp_path, small_model):
    import json
    save_checkpoint(small_model, tmp_path / "ckpt")
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    manifest["format_version"] = 99
    (tmp_path / "ckpt" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ckpt")


def test_manifest_heads_roundtrip(tmp_path):
    model = build_model(4, seed=0)
    append_head(model, "novel_a", seed=1)
    save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert [h.spec.head_index for h in loaded.heads] == [0, 1]
    assert loaded.heads[1].spec.metric_dim == 5
    assert loaded.classes[4].name == "novel_a"


def test_backbone_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(num_conv_layers=0)

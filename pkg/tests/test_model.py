import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from tresnet.analysis import count_params
from tresnet.errors import ConfigError, DimensionError, WeightFormatError, WeightLoadError
from tresnet.layers import BASIC, BOTTLENECK
from tresnet.model import (
    VARIANTS,
    StageSpec,
    build,
    build_resnet50_baseline,
    forward,
    forward_features,
    get_config,
    tensor_specs,
)
from tresnet.weights import MAGIC, load_weights, read_container, save_weights

# widths written out from the architecture tables, independent of model.py
ARCH = {
    "m": (64, (3, 4, 11, 3), (64, 128, 1024, 2048)),
    "l": (76, (4, 5, 18, 3), (76, 152, 1216, 2432)),
    "xl": (84, (4, 5, 24, 3), (84, 168, 1344, 2688)),
}


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def closed_form_params(name):
    """Learnable parameters: conv weights, IABN gamma/beta, SE projections, classifier."""
    if name == "resnet50":
        total = 3 * 64 * 49 + 2 * 64
        cin = 64
        for reps, cout in ((3, 256), (4, 512), (6, 1024), (3, 2048)):
            for i in range(reps):
                w = cout // 4
                total += cin * w + 9 * w * w + w * cout + 2 * (w + w + cout)
                if i == 0:
                    total += cin * cout + 2 * cout
                cin = cout
        return total + 2048 * 1000 + 1000
    stem, repeats, chans = ARCH[name]
    total = 48 * stem + 2 * stem
    cin = stem
    for s, (reps, cout) in enumerate(zip(repeats, chans)):
        for i in range(reps):
            stride = 2 if (i == 0 and s > 0) else 1
            if s < 2:
                total += 9 * cin * cout + 9 * cout * cout + 4 * cout
                se_c, r = cout, 4
            else:
                w = cout // 4
                total += cin * w + 9 * w * w + w * cout + 2 * (w + w + cout)
                se_c, r = w, 8
            if s < 3:
                cr = max(1, _round_half_up(se_c / r))
                total += 2 * cr * se_c + cr + se_c
            if stride == 2 or cin != cout:
                total += cin * cout + 2 * cout
            cin = cout
    return total + cin * 1000 + 1000


@pytest.mark.parametrize("name", ["m", "l", "xl", "resnet50"])
def test_count_matches_closed_form(name):
    assert count_params(get_config(name)) == closed_form_params(name)


def test_resnet50_published_count():
    assert count_params(get_config("resnet50")) == 25_557_032


@pytest.mark.parametrize("name,target", [("l", 54.7e6), ("xl", 77.1e6)])
def test_large_variants_within_2pct(name, target):
    assert abs(count_params(get_config(name)) / target - 1) <= 0.02


def test_parameter_count_property_matches_analysis(model_m):
    assert model_m.parameter_count == count_params(model_m)


def test_variant_layout():
    for name, (stem, reps, chans) in ARCH.items():
        cfg = get_config(name)
        assert cfg.stem_conv_channels == stem
        assert tuple(s.repeats for s in cfg.stages) == reps
        assert tuple(s.out_channels for s in cfg.stages) == chans
        assert [s.block_kind for s in cfg.stages] == [BASIC, BASIC, BOTTLENECK, BOTTLENECK]
        assert [s.use_se for s in cfg.stages] == [True, True, True, False]
    assert get_config("tresnet-m") is get_config("m")


def test_config_violations_listed():
    bad = replace(get_config("m"), stem_conv_channels=0, stages=get_config("m").stages[:3])
    with pytest.raises(ConfigError) as info:
        bad.validate()
    assert len(info.value.violations) == 2
    with pytest.raises(ConfigError):
        build(replace(get_config("m"), stages=(StageSpec(BOTTLENECK, 1, 30, 1, False),) * 4))


def test_config_dict_round_trip():
    for cfg in VARIANTS.values():
        assert type(cfg).from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_unknown_variant():
    with pytest.raises(KeyError):
        get_config("s")


def test_build_deterministic():
    a, b = build(get_config("m"), 3), build(get_config("m"), 3)
    for (na, ta), (nb, tb) in zip(a.named_tensors().items(), b.named_tensors().items()):
        assert na == nb
        np.testing.assert_array_equal(ta, tb)
    c = build(get_config("m"), 4)
    assert not np.array_equal(a.tensors["stem.conv.weight"], c.tensors["stem.conv.weight"])


def test_manifest_order_and_names(model_m):
    names = list(model_m.named_tensors())
    assert names == [s.name for s in tensor_specs(model_m.config)]
    assert names[0] == "stem.conv.weight" and names[-1] == "head.fc.bias"
    assert "stage1.block1.se.w_reduce" in names and "stage4.block1.downsample.conv.weight" in names
    assert "stage1.block1.downsample.conv.weight" not in names
    assert not any(n.startswith("stage4") and ".se." in n for n in names)


def test_init_scheme(model_m):
    t = model_m.tensors
    assert np.all(t["head.fc.weight"] == 0) and np.all(t["head.fc.bias"] == 0)
    assert np.all(t["stage1.block1.iabn2.gamma"] == 0)
    assert np.all(t["stage3.block1.iabn3.gamma"] == 0)
    assert np.all(t["stage3.block1.iabn1.gamma"] == 1)
    w = t["stage3.block2.conv2.weight"]
    assert w.std() == pytest.approx(np.sqrt(2 / (w.shape[0] * 9)), rel=0.05)


def test_zero_classifier_gives_zero_logits(model_m, rng):
    out = forward(model_m, rng.random((2, 3, 64, 64), dtype=np.float32))
    assert out.shape == (2, 1000) and np.all(out == 0)


@pytest.mark.parametrize("res", [224, 448])
def test_stage_extents(model_m, res):
    _, stages = forward_features(model_m, np.zeros((1, 3, res, res), np.float32), collect=True)
    assert stages["stem"].shape == (1, 64, res // 4, res // 4)
    want = [(64, 4), (128, 8), (1024, 16), (2048, 32)]
    for i, (c, d) in enumerate(want, 1):
        assert stages[f"stage{i}"].shape == (1, c, res // d, res // d)


@pytest.mark.parametrize("res", [31, 100, 225])
def test_indivisible_resolution(model_m, res):
    with pytest.raises(DimensionError, match="32"):
        forward(model_m, np.zeros((1, 3, res, res), np.float32))


def test_wrong_channel_count(model_m):
    with pytest.raises(DimensionError):
        forward(model_m, np.zeros((1, 1, 64, 64), np.float32))


def test_resnet50_baseline(rng):
    m = build_resnet50_baseline(10, 0)
    assert m.config.stem == "conv7x7" and not m.config.anti_alias and m.config.leaky_slope == 0
    m.fc_weight[...] = rng.standard_normal(m.fc_weight.shape, dtype=np.float32) * 0.01
    _, stages = forward_features(m, np.zeros((1, 3, 64, 64), np.float32), collect=True)
    assert stages["stage4"].shape == (1, 2048, 2, 2)
    assert forward(m, rng.random((1, 3, 64, 64), dtype=np.float32)).shape == (1, 10)


# --- weight container --------------------------------------------------------

@pytest.fixture
def trained_m(rng):
    m = build(get_config("m"), 1)
    for arr in m.named_tensors().values():
        arr += rng.standard_normal(arr.shape, dtype=np.float32) * 0.01
    return m


def test_round_trip_bitwise(trained_m, tmp_path, rng):
    path = tmp_path / "m.bin"
    save_weights(trained_m, path)
    loaded = load_weights(get_config("m"), path)
    for name, arr in trained_m.named_tensors().items():
        np.testing.assert_array_equal(loaded.tensors[name].view(np.uint32), arr.view(np.uint32))
    x = rng.random((1, 3, 64, 64), dtype=np.float32)
    np.testing.assert_array_equal(forward(loaded, x).view(np.uint32), forward(trained_m, x).view(np.uint32))
    assert load_weights(None, path).config == trained_m.config


def test_container_layout(model_m, tmp_path):
    path = tmp_path / "m.bin"
    save_weights(model_m, path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    manifest = json.loads(raw[16:16 + mlen])
    assert manifest["format_version"] == 1 and manifest["variant_name"] == "tresnet_m"
    last = manifest["tensors"][-1]
    assert 16 + mlen + last["offset"] + last["length"] == len(raw)
    e = manifest["tensors"][0]
    stored = np.frombuffer(raw, "<f4", count=e["length"] // 4, offset=16 + mlen + e["offset"])
    np.testing.assert_array_equal(stored.reshape(e["shape"]), model_m.tensors[e["name"]])


def _rewrite_manifest(path, edit):
    raw = path.read_bytes()
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    manifest = json.loads(raw[16:16 + mlen])
    edit(manifest)
    blob = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + raw[16 + mlen:])


def test_tampered_shape_rejected(model_m, tmp_path):
    path = tmp_path / "m.bin"
    save_weights(model_m, path)

    def edit(m):
        m["tensors"][0]["shape"] = [1, 2, 3, 4]
    _rewrite_manifest(path, edit)
    with pytest.raises(WeightLoadError, match="stem.conv.weight"):
        load_weights(get_config("m"), path)


def test_variant_mismatch_lists_first_ten(model_m, tmp_path):
    path = tmp_path / "m.bin"
    save_weights(model_m, path)
    with pytest.raises(WeightLoadError) as info:
        load_weights(get_config("l"), path)
    assert len(info.value.offenders) > 10
    assert str(info.value).count("\n  ") == 10


def test_missing_tensor_rejected(model_m, tmp_path):
    path = tmp_path / "m.bin"
    save_weights(model_m, path)
    _rewrite_manifest(path, lambda m: m["tensors"].pop())
    with pytest.raises(WeightLoadError, match="head.fc.bias: missing"):
        load_weights(get_config("m"), path)


@pytest.mark.parametrize("damage", [
    lambda raw: b"NOTMAGIC" + raw[8:],
    lambda raw: raw[:12],
    lambda raw: raw[:16] + b"{not json" + raw[25:],
    lambda raw: raw[:-100],
])
def test_corrupt_container_rejected(model_m, tmp_path, damage):
    path = tmp_path / "m.bin"
    save_weights(model_m, path)
    path.write_bytes(damage(path.read_bytes()))
    with pytest.raises(WeightFormatError):
        load_weights(get_config("m"), path)


def test_read_container_validates_table(model_m, tmp_path):
    path = tmp_path / "m.bin"
    save_weights(model_m, path)
    _rewrite_manifest(path, lambda m: m.update(tensors="nope"))
    with pytest.raises(WeightFormatError):
        read_container(path)

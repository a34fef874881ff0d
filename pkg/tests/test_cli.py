import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tresnet.analysis import count_params
from tresnet.cli import main
from tresnet.image import ImageInput, encode_ppm
from tresnet.model import build, forward, get_config
from tresnet.tensor import softmax
from tresnet.weights import save_weights


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


# --- inspect -------------------------------------------------------------------

def test_inspect_table(capsys):
    code, out, _ = run(capsys, "inspect", "--variant", "m", "--resolution", "224")
    assert code == 0
    params = int(next(line for line in out.splitlines() if line.startswith("params")).split()[1])
    macs = int(next(line for line in out.splitlines() if line.startswith("macs")).split()[1])
    assert params == count_params(get_config("m"))
    assert abs(macs / 5.5e9 - 1) <= 0.05
    assert "1 multiply-accumulate = 1 FLOP" in out


def test_inspect_json(capsys):
    code, out, _ = run(capsys, "inspect", "--variant", "m", "--format", "json")
    d = json.loads(out)
    assert code == 0 and set(d["totals"]) == {"params", "macs", "act_bytes_train", "act_bytes_infer"}


def test_inspect_bad_resolution(capsys):
    code, _, err = run(capsys, "inspect", "--variant", "m", "--resolution", "225")
    assert code == 2 and "multiple of 32" in err


def test_inspect_bad_variant(capsys):
    code, _, err = run(capsys, "inspect", "--variant", "s")
    assert code == 2 and "usage" in err


def test_inspect_config_file(capsys, tmp_path):
    cfg = get_config("l").to_dict()
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    a = run(capsys, "inspect", "--config", str(tmp_path / "c.json"), "--format", "json")[1]
    b = run(capsys, "inspect", "--variant", "l", "--format", "json")[1]
    assert a == b
    (tmp_path / "bad.json").write_text('{"variant_name": "x"}')
    assert run(capsys, "inspect", "--config", str(tmp_path / "bad.json"))[0] == 2


def test_inspect_deterministic(capsys):
    outs = {run(capsys, "inspect", "--variant", "xl", "--layers")[1] for _ in range(3)}
    assert len(outs) == 1


def test_no_command_is_usage(capsys):
    assert run(capsys)[0] == 2


# --- predict -------------------------------------------------------------------

@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    d = tmp_path_factory.mktemp("w")
    zero = build(get_config("m"), 0)
    save_weights(zero, d / "zero.bin")
    m = build(get_config("m"), 0)
    m.fc_weight[...] = np.random.default_rng(5).standard_normal(m.fc_weight.shape).astype(np.float32) * 0.05
    m.fc_bias[...] = np.random.default_rng(6).standard_normal(m.fc_bias.shape).astype(np.float32) * 0.05
    save_weights(m, d / "rand.bin")
    return d, m


def _ppm(path, size=224, colour=(200, 40, 90)):
    px = np.empty((size, size, 3), np.uint8)
    px[...] = colour
    path.write_bytes(encode_ppm(ImageInput(size, size, px)))
    return path


def test_predict_uniform_scores(capsys, weights, tmp_path):
    d, _ = weights
    code, out, _ = run(capsys, "predict", "--weights", str(d / "zero.bin"), "--image", str(_ppm(tmp_path / "a.ppm")),
                       "--topk", "5", "--format", "json")
    assert code == 0
    rows = json.loads(out)["topk"]
    assert len(rows) == 5 and all(r["score"] == 1 / 1000 for r in rows)


def test_predict_matches_library_forward(capsys, weights, tmp_path):
    d, m = weights
    colour = (200, 40, 90)
    code, out, _ = run(capsys, "predict", "--weights", str(d / "rand.bin"),
                       "--image", str(_ppm(tmp_path / "s.ppm", colour=colour)), "--topk", "3", "--format", "json")
    assert code == 0
    x = np.empty((1, 3, 224, 224), np.float32)
    x[...] = (np.array(colour, np.float32) / np.float32(255))[None, :, None, None]
    scores = softmax(forward(m, x))[0]
    top = np.argsort(-scores, kind="stable")[:3]
    got = json.loads(out)["topk"]
    assert [r["class"] for r in got] == top.tolist()
    assert [r["score"] for r in got] == scores[top].tolist()


def test_predict_bitwise_repeatable(capsys, weights, tmp_path):
    d, _ = weights
    img = _ppm(tmp_path / "r.ppm", 100, (10, 20, 30))
    outs = {run(capsys, "predict", "--weights", str(d / "rand.bin"), "--image", str(img), "--resolution", "96",
                "--threads", "1", "--format", "json")[1] for _ in range(2)}
    assert len(outs) == 1


def test_predict_weight_errors(capsys, weights, tmp_path):
    d, _ = weights
    img = str(_ppm(tmp_path / "a.ppm", 64))
    assert run(capsys, "predict", "--weights", str(d / "zero.bin"), "--image", img, "--variant", "l")[0] == 3
    bad = tmp_path / "bad.bin"
    raw = (d / "zero.bin").read_bytes()
    bad.write_bytes(raw[:16] + b"#" + raw[17:])
    assert run(capsys, "predict", "--weights", str(bad), "--image", img)[0] == 3
    assert run(capsys, "predict", "--weights", str(tmp_path / "none.bin"), "--image", img)[0] == 3


def test_predict_image_errors(capsys, weights, tmp_path):
    d, _ = weights
    (tmp_path / "bad.ppm").write_bytes(b"P6 4 4 255\n\x00")
    assert run(capsys, "predict", "--weights", str(d / "zero.bin"), "--image", str(tmp_path / "bad.ppm"))[0] == 4
    assert run(capsys, "predict", "--weights", str(d / "zero.bin"), "--image", str(tmp_path / "no.ppm"))[0] == 4


def test_predict_usage_errors(capsys, weights, tmp_path):
    d, _ = weights
    img = str(_ppm(tmp_path / "a.ppm", 64))
    assert run(capsys, "predict", "--weights", str(d / "zero.bin"), "--image", img, "--resolution", "100")[0] == 2
    assert run(capsys, "predict", "--weights", str(d / "zero.bin"), "--image", img, "--topk", "0")[0] == 2


# --- bench ---------------------------------------------------------------------

def test_bench_rows_and_fingerprint(capsys):
    code, out, _ = run(capsys, "bench", "--subjects", "gap-fast", "gap-generic", "--batch", "1", "2",
                       "--repeats", "3", "--warmup", "1", "--threads", "1", "--format", "json")
    d = json.loads(out)
    assert code == 0 and len(d["results"]) == 4
    assert d["fingerprint"]["threads"] == 1 and d["fingerprint"]["element_bytes"] == 4
    assert {r["batch"] for r in d["ratios"]} == {1, 2}


def test_bench_table(capsys):
    code, out, _ = run(capsys, "bench", "--subjects", "stem-s2d", "--repeats", "3", "--resolution", "64")
    assert code == 0 and "stem-s2d" in out and out.startswith("# machine=")


@pytest.mark.parametrize("argv", [
    ["bench", "--subjects", "nope"], ["bench", "--repeats", "2"], ["bench", "--resolution", "70"],
    ["bench", "--threads", "-1"], ["bench", "--batch", "0"],
])
def test_bench_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_threads_env_default(capsys, monkeypatch):
    monkeypatch.setenv("TRESNET_THREADS", "1")
    code, out, _ = run(capsys, "bench", "--subjects", "gap-fast", "--repeats", "3", "--format", "json")
    assert code == 0 and json.loads(out)["results"][0]["threads"] == 1


# --- entry points ----------------------------------------------------------------

def test_module_entry_point():
    env = dict(os.environ, TRESNET_THREADS="1")
    p = subprocess.run([sys.executable, "-m", "tresnet", "inspect", "--variant", "resnet50", "--format", "json"],
                       capture_output=True, text=True, env=env)
    assert p.returncode == 0 and json.loads(p.stdout)["variant_name"] == "resnet50"
    p = subprocess.run([sys.executable, "-m", "tresnet", "inspect", "--resolution", "33"], capture_output=True)
    assert p.returncode == 2

import json

import numpy as np
import pytest

from tresnet import layers, verify
from tresnet.cli import main


def test_registry_audit():
    assert len(verify.REGISTRY) == 28
    counts = {m: sum(c.module == m for c in verify.REGISTRY) for m in verify.MODULES}
    assert counts == verify.EXPECTED_COUNTS
    assert len({c.name for c in verify.REGISTRY}) == 28


def test_filter_selects_module():
    checks = verify.select("gradcheck")
    assert checks and all(c.module == "gradcheck" for c in checks)
    with pytest.raises(KeyError):
        verify.select("nonsense")


def test_filter_gradcheck_cli(capsys):
    code = main(["verify", "--filter", "gradcheck", "--format", "json"])
    d = json.loads(capsys.readouterr().out)
    assert code == 0 and d["failed"] == 0
    assert {c["module"] for c in d["checks"]} == {"gradcheck"} and len(d["checks"]) == 4


def test_unknown_filter_exit_2(capsys):
    assert main(["verify", "--filter", "nonsense"]) == 2
    assert main(["verify", "--inject-fault", "nonsense"]) == 2


def test_blur_fault_injection(capsys):
    code = main(["verify", "--filter", "layers", "--inject-fault", "blur-kernel", "--format", "json"])
    d = json.loads(capsys.readouterr().out)
    assert code == 1
    failed = {c["name"] for c in d["checks"] if not c["passed"]}
    assert "blur kernel is non-negative, flip-symmetric and sums to 1" in failed
    # the hook is undone afterwards
    assert np.all(layers.blur_filter(3).weight.sum(axis=(1, 2, 3)) == 1.0)


def test_failure_is_reported_not_raised():
    def boom():
        raise RuntimeError("kaput")
    check = verify.Check("tensor", "always fails", boom)
    verify.REGISTRY.append(check)
    try:
        (outcome,) = [o for o in verify.run("tensor") if o.check is check]
        assert not outcome.passed and "kaput" in outcome.detail
    finally:
        verify.REGISTRY.remove(check)


@pytest.mark.parametrize("module", ["tensor", "layers", "analysis", "cli"])
def test_module_groups_pass(module):
    outcomes = verify.run(module)
    assert all(o.passed for o in outcomes), [(o.check.name, o.detail) for o in outcomes if not o.passed]


def test_fresh_checkout_all_pass(capsys):
    code = main(["verify"])
    out = capsys.readouterr().out
    print(out)
    assert code == 0, [line for line in out.splitlines() if line.startswith("FAIL")]

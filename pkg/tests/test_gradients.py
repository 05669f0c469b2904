import pytest

from cetnet.gradcases import TOLERANCE, all_cases, run_case

CASES = all_cases()


@pytest.mark.parametrize("name", list(CASES))
def test_gradient_case(name):
    errs = run_case(CASES[name], seed=0)
    worst = max(errs, key=errs.get)
    assert errs[worst] <= TOLERANCE, f"{name}: {worst} has relative error {errs[worst]:.3e}"


def test_every_case_checks_inputs_and_parameters():
    errs = run_case(CASES["lewin"])
    assert "input0" in errs
    assert any(k.startswith("w_msa.proj") for k in errs) and any(k.startswith("sw_msa.attn") for k in errs)

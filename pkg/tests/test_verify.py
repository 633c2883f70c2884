from bgmoment.cli import main
from bgmoment.verify import run_all


def test_verify_quick_passes(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "verify=ok" in out and "[FAIL]" not in out


def test_giou_sign_mutation_is_caught(capsys):
    assert main(["verify", "--quick", "--mutate", "giou-sign"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] geometry" in out and "giou" in out


def test_suites_cover_every_oracle():
    names = [r.name for r in run_all(quick=True, seed=1)]
    assert len(names) == 4 and "metric-oracle" in names

"""Quick check that the extension imports and its main entry points work.

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import bgtemp


def main():
    p = bgtemp.softmax([2.0, 0.0])
    assert math.isclose(p[0], 1 / (1 + math.exp(-2)))
    assert bgtemp.apply_temperature([1.0, 3.0, 3.0], 0.0) == [0.0, 1.0, 0.0]
    assert math.isclose(bgtemp.entropy([0.5, 0.5]), math.log(2))

    assert bgtemp.exact_match_fraction(["a", "a", "b"]) == 2 / 3
    assert bgtemp.ks_distance([1, 2, 3], [2, 3, 4]) == 1 / 3

    fit = bgtemp.fit_curve([0.01, 0.02, 0.03, 0.04], [0.1, 0.1, 0.1, 0.2])
    assert fit["t_hat"] == 0.02
    agg = bgtemp.aggregate_background({"a": [0.05], "b": [0.10]})
    assert abs(agg["overall"] - 0.075) < 1e-12

    lm = bgtemp.SyntheticLM()
    assert lm.generate("hello", 0.0) == lm.generate("hello", 0.0, seed=7)
    assert len(lm.logits("hello")) == 32

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = {
            "prompts": {"synthetic": 10},
            "grid": [0.0, 0.1, 0.2, 0.3],
            "reference_runs": 8,
            "sut_runs": 8,
            "references": [{"id": "lab", "kind": "synthetic", "model": {}}],
            "sut": {
                "id": "lab-sut",
                "kind": "synthetic",
                "model": {},
                "environments": [
                    {"id": "noisy", "perturbation": {"kind": "gaussian_logit_noise", "sigma": 0.5}}
                ],
            },
            "store": "store",
        }
        (tmp / "campaign.json").write_text(json.dumps(config))
        c = bgtemp.Campaign(str(tmp / "campaign.json"))
        assert c.run_reference() == 10 * 8 * 4
        assert c.run_sut() == 10 * 8
        assert c.run_reference() == 0
        summary = c.estimate(str(tmp / "report"))
        print("T_bg(lab) =", summary["estimate"]["overall"])
        assert (tmp / "report" / "report.json").exists()

        checks = bgtemp.selftest(seed=42, prompts=20, out=str(tmp / "selftest"))
        for check in checks["checks"]:
            print("PASS" if check["passed"] else "FAIL", check["name"])

    print("smoke test ok")


if __name__ == "__main__":
    main()

"""Smoke test for the stepwise_py extension module.

Build and run from the repository root:

    cargo build --release -p stepwise-py
    cp target/release/libstepwise_py.so python/stepwise_py.so
    python3 python/smoke_test.py
"""

import json
import math
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

import stepwise_py as sp  # noqa: E402

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"


def check_dpo():
    loss, grad = sp.pair_loss(-3.0, -3.0, -5.0, -5.0, 0.1)
    assert abs(loss - math.log(2)) < 1e-12
    assert abs(grad + 0.5) < 1e-12
    assert abs(sp.pair_margin(-1.0, -2.0, -4.0, -3.0, 0.5) - 1.0) < 1e-12
    assert abs(sp.batch_loss([(-1.0, -1.0, -2.0, -2.0)] * 3, 0.1) - math.log(2)) < 1e-12
    try:
        sp.pair_loss(float("nan"), 0.0, 0.0, 0.0, 0.1)
    except ValueError:
        pass
    else:
        raise AssertionError("NaN input accepted")


def check_toy_policy():
    planted = [0, 3, 1, 2, 2]
    pairs = [(c, best, a) for c, best in enumerate(planted) for a in range(4) if a != best]
    policy = sp.ToyPolicy(len(planted), 4)
    trained, trace = policy.train(pairs)
    assert len(trace) == 200
    assert all(b < a for a, b in zip(trace, trace[1:]))
    assert [trained.argmax(c) for c in range(len(planted))] == planted
    assert abs(sum(trained.probs(0)) - 1.0) < 1e-12
    assert len(trained.grad(policy, pairs, 0.1)) == len(planted) * 4


def check_stats():
    registry = (FIXTURES / "registry.json").read_text()
    code = 'x = ocr(query="total")\n# visualizer(query="no")\nprint(len(x))'
    assert sp.extract_tools(code, registry) == ["ocr"]
    toks = sp.tokenize("The cat sat on the mat")
    assert sp.bleu_n(toks, toks, 4) == 1.0
    assert sp.bleu_n(["a"], ["b"], 1) == 0.0
    assert abs(sp.distribution_diff({"ocr": 1}, {"seg": 1}) - 100.0) < 1e-12
    thought, code = sp.parse_action("Thought: look\n```py\nprint(1)\n```")
    assert (thought, code) == ("look", "print(1)")


def check_pairs():
    def cand(i, status):
        raw = "Thought: t%d\n```py\nprint(%d)\n```" % (i, i)
        return {
            "action": {"thought": "t%d" % i, "code": "print(%d)" % i, "raw": raw},
            "observation": {"status": status, "output": "" if status != "ok" else str(i),
                            "error_kind": None if status == "ok" else "exception",
                            "error_message": None if status == "ok" else "boom",
                            "duration_ms": 0},
        }

    traj = {
        "task_id": "smoke", "query": "q", "file_summaries": [], "terminal": True,
        "final_answer": None, "budget_exhausted": False, "max_steps": 2, "aborted": None,
        "steps": [
            {"index": 1, "candidates": [cand(1, "ok"), cand(2, "error"), cand(3, "ok")],
             "chosen": 1, "verifier_reason": "runs"},
            {"index": 2, "candidates": [cand(4, "error"), cand(5, "ok"), cand(6, "ok")],
             "chosen": 2, "verifier_reason": "runs"},
        ],
    }
    pairs = sp.build_pairs(json.dumps(traj))
    assert len(pairs) == 4
    assert json.loads(pairs[0])["meta"]["pair_id"] == "smoke-s1-c1-r2"
    report = json.loads(sp.diagnostics("\n".join(pairs), (FIXTURES / "registry.json").read_text()))
    assert report["pair_count"] == 4
    assert report["chosen_error_rate"] == 0.0


if __name__ == "__main__":
    for check in (check_dpo, check_toy_policy, check_stats, check_pairs):
        check()
        print("ok", check.__name__)

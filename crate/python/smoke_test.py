"""Smoke test for the bicnet_tks extension module.

Build and install first:

    pip install maturin
    pip install --no-build-isolation ./crates/python
    python3 python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import bicnet_tks as bt


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def main():
    check(bt.cost_fraction(3) == 0.4375, "cost fraction at alpha 3")

    flops = bt.count_flops("resnet50", (256, 128))
    check(abs(flops["gflops"] - 4.08) <= 0.408, f"resnet50 at 256x128: {flops['gflops']:.3f} GFLOPs")

    no_tks = bt.run_config("resnet50")["model"]
    no_tks["tks"]["enabled"] = False
    params = bt.count_params(config=no_tks)
    check(abs(params["params_millions"] - 27.6) <= 0.03 * 27.6, f"two-branch model: {params['params_millions']:.2f}M params")

    frame = bt.avg_flops_per_frame("resnet50")
    check(1.81 <= frame["total"] <= 1.99, f"per-frame cost {frame['total']:.3f} GFLOPs")

    cfg = bt.run_config("mini")
    bt.validate_config(cfg)
    cfg["model"]["alpha"] = 2
    try:
        bt.validate_config(cfg)
    except ValueError:
        check(True, "invalid alpha rejected")
    else:
        check(False, "invalid alpha rejected")

    check(bt.divergence_loss([[1, 0, 0], [0, 1, 0], [0, 0, 1]]) == -1.0, "orthogonal maps give -1")
    check(abs(bt.divergence_loss([[0.2, 0.8]] * 3)) < 1e-12, "identical maps give 0")

    q = [[1.0, 0.0]]
    g = [[0.0, 1.0], [0.9, 0.1], [-1.0, 0.0]]
    res = bt.evaluate_retrieval(q, [0], g, [1, 0, 2])
    check(res["mAP"] == 1.0 and res["cmc"][0] == 1.0, "retrieval on a hand-made gallery")

    tape = bt.Tape()
    x = tape.leaf(bt.Tensor([2, 3], [0.5, -1.0, 2.0, 0.0, 1.0, -0.5]))
    y = tape.sum(tape.mul(x, x))
    tape.backward(y)
    grad = tape.grad(x).tolist()
    check(grad == [1.0, -2.0, 4.0, 0.0, 2.0, -1.0], "d/dx sum(x^2) = 2x")
    s = tape.softmax(x, 1)
    rows = tape.value(s).tolist()
    check(all(math.isclose(sum(rows[i:i + 3]), 1.0) for i in (0, 3)), "softmax rows sum to 1")

    for block in ("conv2d", "softmax", "csp_transform"):
        r = bt.gradcheck(block, seed=0)
        check(r["passed"] and r["max_rel_error"] < bt.GRADCHECK_TOLERANCE, f"gradcheck {block}: {r['max_rel_error']:.2e}")

    with tempfile.TemporaryDirectory() as tmp:
        index = bt.generate_dataset(tmp, num_ids=2, cams_per_id=2, tracklets_per_cam=1, tracklet_len=32, frame_size=(32, 16))
        on_disk = json.loads((Path(tmp) / "index.json").read_text())
        check(on_disk == index and len(index["tracklets"]) == 4, "dataset generated")


if __name__ == "__main__":
    main()

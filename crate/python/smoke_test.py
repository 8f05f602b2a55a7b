"""Smoke test for the pstmae_py extension module.

Build and install it first:

    cd crates/python && maturin develop --release

then run `python python/smoke_test.py`.
"""

import json
import math
import os
import sys
import tempfile

import pstmae_py as pm

TINY = {
    "data": {"sequences": 10, "grid": 16, "frames": 24},
    "model": {"ladder": [4, 8], "latent_dim": 16},
    "train": {"cae_epochs": 1, "epochs": 1, "baseline_epochs": 1},
}


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    shape, values = pm.simulate_swe(16, 3, seed=4)
    check(shape == [3, 3, 16, 16], "shallow-water shape")
    check(len(values) == math.prod(shape), "shallow-water values")
    h0 = values[: 16 * 16]
    check(all(v > 0.0 for v in h0), "positive water height")

    shape, _ = pm.simulate_dr(16, 2, seed=1)
    check(shape == [2, 2, 16, 16], "diffusion-reaction shape")

    check(pm.dilation(10, 3) == [0, 3, 6, 9], "dilation indices")
    check(abs(pm.psnr(1e-4) - 40.0) < 1e-12, "psnr of 1e-4")
    plane = [((i * 7) % 13) / 13.0 for i in range(16 * 16)]
    check(abs(pm.ssim(plane, plane, 16, 16) - 1.0) < 1e-9, "ssim of identical planes")

    with tempfile.TemporaryDirectory() as d:
        cfg = os.path.join(d, "config.json")
        with open(cfg, "w") as f:
            json.dump(TINY, f)
        out = os.path.join(d, "run")
        for cmd in (["generate"], ["train-cae"], ["train-pstmae"]):
            code = pm.cli(["--config", cfg, *cmd, "--out", out])
            check(code == 0, f"pstmae {cmd[0]}")
        code = pm.cli(["--config", cfg, "evaluate", "--checkpoint", os.path.join(out, "ckpt", "pstmae.ckpt")])
        check(code == 0, "pstmae evaluate")
        report = os.path.join(out, "reports", "metrics_pstmae_test.csv")
        with open(report) as f:
            rows = [line.split(",") for line in f.read().splitlines()[1:]]
        models = {r[1] for r in rows}
        check(models == {"pstmae", "persistence"}, "report models")
        code = pm.cli(["train-cae", "--out", os.path.join(d, "missing")])
        check(code == pm.EXIT_CONFIG, "missing dataset exit status")

    print("smoke test passed")


if __name__ == "__main__":
    main()

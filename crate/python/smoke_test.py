"""Smoke test for the dmsa extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/dmsa-*.whl
"""

import math

import dmsa


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    check(dmsa.dilation_schedule(10) == [1, 6, 12, 18], "schedule epoch 10")
    check(dmsa.dilation_schedule(8) == [1, 3, 6, 9], "schedule epoch 8")
    check(dmsa.output_size(32, 2, 3, 2, 1) == 32, "same-padding dilated conv extent")

    x = dmsa.Tensor([2, 3], [1.0, 2.0, 3.0, 0.0, 0.0, 0.0])
    s = dmsa.softmax(x, 1)
    check(abs(sum(s.data[3:]) - 1.0) < 1e-12, "softmax rows sum to one")

    gt = [0, 0, 1, 1]
    pred = [0, 1, 1, 1]
    r = dmsa.evaluate(pred, gt, 2)
    check(r["acc"] == 0.75 and abs(r["miou"] - 7 / 12) < 1e-15, "2x2 metric example")
    check(dmsa.hungarian_match([[0, 5], [7, 0]]) == [1, 0], "hungarian anti-diagonal")

    image, labels = dmsa.synth_dataset(3, 1, 16, 16, 2)[0]
    check(image.shape == [3, 16, 16] and len(labels) == 256, "synthetic sample shapes")
    one_hot = dmsa.Tensor([2, 16, 16], [float(l == c) for c in range(2) for l in labels])
    refined = dmsa.par_refine(one_hot, image, iterations=3)
    sums = [refined.data[i] + refined.data[256 + i] for i in range(256)]
    check(max(abs(v - 1.0) for v in sums) < 1e-9, "PAR output is a distribution per pixel")
    check(dmsa.ce_loss(one_hot, one_hot) < 1e-10, "cross-entropy of a one-hot match")
    half = dmsa.Tensor([2, 2, 2], [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    check(abs(dmsa.cls_loss(half)) < 1e-9, "balanced class usage has zero cls loss")

    cfg = """{
        "encoder": {"image_size": 16, "patch_size": 4, "embed_dim": 8, "num_heads": 2, "num_blocks": 1, "mlp_ratio": 2},
        "dataset": {"n_images": 4, "height": 16, "width": 16},
        "batch_size": 2, "steps": 3, "par": {"iterations": 2}
    }"""
    runs = []
    for _ in range(2):
        t = dmsa.Trainer(cfg)
        m = [t.step() for _ in range(3)]
        check(all(math.isfinite(v["total"]) for v in m), "finite training losses")
        runs.append((m, t.checkpoint_bytes()))
    check(runs[0] == runs[1], "training is deterministic")
    check(runs[0][1][:4] == b"DMSA", "checkpoint magic")
    check(t.step_count == 3 and t.epoch == 2, "step and epoch counters")
    report = t.evaluate(teacher=True)
    check(0.0 <= report["miou"] <= 1.0, "teacher evaluation")

    try:
        dmsa.Trainer('{"nonsense": 1}')
    except ValueError:
        check(True, "unknown config keys raise ValueError")
    else:
        raise SystemExit("FAIL: bad config accepted")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()

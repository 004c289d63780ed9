#!/usr/bin/env python3
"""Smoke test for the cromekit_py extension module.

Build the module first:

    cargo build --release -p cromekit-py

then run from the repository root:

    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def load_module():
    import importlib.util

    candidates = [
        os.path.join(ROOT, "target", "release", "libcromekit_py.so"),
        os.path.join(ROOT, "target", "debug", "libcromekit_py.so"),
    ]
    for path in candidates:
        if os.path.exists(path):
            spec = importlib.util.spec_from_file_location("cromekit_py", path)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit(
        "cromekit_py not built; run `cargo build --release -p cromekit-py` first"
    )


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    ck = load_module()
    print(f"cromekit_py {ck.version()}")

    # Kernels.
    assert ck.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]) == [[3.0], [7.0]]
    row = ck.softmax_rows([[0.0, math.log(3.0)]])[0]
    approx(row[0], 0.25)
    approx(row[1], 0.75)
    approx(ck.cosine_sim([1.0, 0.0], [0.0, 1.0]), 0.0)

    # Proxy anchor closed form: one positive exactly at the margin -> ln 2.
    delta = 0.1
    x = [[delta, math.sqrt(1.0 - delta * delta)]]
    loss = ck.proxy_anchor_loss(x, [0], [[1.0, 0.0]], [0], 16.0, delta)
    approx(loss, math.log(2.0))

    # Modality schedule: 5 epochs per modality, wraps after 25.
    assert ck.modality_schedule(0) == "z_i1"
    assert ck.modality_schedule(5) == "z_i2"
    assert ck.modality_schedule(26) == "z_i1"

    # Ablation manifest: eight rows, full first.
    variants = ck.ablation_variants()
    assert len(variants) == 8
    assert variants[0]["name"] == "full"

    # Gradient check on a tiny model.
    err = ck.grad_check(13, 20)
    assert err <= 1e-5, f"gradient check failed: {err}"
    print(f"grad check max relative error: {err:.3e}")

    # End-to-end: generate, train briefly, evaluate.
    config = """
[dims]
d_raw = 8
d_hidden = 8
d_emb = 8
k_img = 2
k_txt = 2

[fusion]
d_c = 16
heads = 2

[detector]
hidden = 12

[training]
batch = 16
epochs = 3

[gen]
n_samples = 120
n_topics = 4
d_raw = 8
k_img = 2
k_txt = 2
"""
    with tempfile.TemporaryDirectory() as tmp:
        data_path = os.path.join(tmp, "dataset.jsonl")
        n = ck.gen_dataset(data_path, config, 7)
        assert n == 120
        info = ck.dataset_info(data_path)
        assert info["n_samples"] == 120 and info["n_fake"] == 60
        assert info["version"] == "cromekit-ds-1"

        out_dir = os.path.join(tmp, "run")
        report = ck.train(data_path, config, 7, out_dir)
        assert 0.0 <= report["accuracy"] <= 1.0
        assert report["epochs"] == 3
        print(f"trained 3 epochs, test accuracy {report['accuracy']:.3f}")

        ckpt = os.path.join(out_dir, "checkpoint.json")
        eval_report = ck.evaluate(ckpt, data_path)
        assert 0.0 <= eval_report["accuracy"] <= 1.0
        print(f"checkpoint eval accuracy {eval_report['accuracy']:.3f}")

        before, after = ck.metric_only_training(data_path, "z_i1", 30, config, 7)
        print(f"metric-only separation: {before:.3f} -> {after:.3f}")
        assert after > before

    print("smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the Python bindings: counts, masks, metrics and a tiny train/eval loop."""

import sys
import tempfile
from pathlib import Path

import numpy as np
import svfap

TINY = """
embed_dim = 16
stage_depths = 1,1,1
bottleneck_tokens = 2
masking_ratio = 0.5
patch = 2,4,4
input = 8,8,8
heads = 2
decoder_dim = 16
decoder_depth = 1
decoder_heads = 2
spatial_hidden = 16
batch_size = 4
base_lr = 0.1
epochs = 2
warmup_epochs = 1
sample_stride = 1
"""


def main() -> int:
    base = svfap.Config.preset("TPSBT-B")
    c = svfap.count(base)
    assert abs(c["params"] / 1e6 - 77.99) < 0.01, c["params"]
    assert abs(c["flops"] / 1e9 - 43.66) < 0.01, c["flops"]
    assert abs(c["flops_p"] / 1e9 - 12.98) < 0.01, c["flops_p"]
    vit = svfap.count(base, variant="vit_baseline")
    print(f"count: full {c['flops'] / 1e9:.2f}G, vit_baseline {vit['flops'] / 1e9:.2f}G")

    visible, masked = svfap.tube_mask((8, 14, 14), 0.75, seed=3)
    assert len(visible) + len(masked) == 8 * 14 * 14
    v = np.array(visible)
    spatial = set((v % 196).tolist())
    assert len(v) == 8 * len(spatial), "mask is not a tube"
    print(f"tube_mask: {len(masked)} of {8 * 14 * 14} masked")

    assert svfap.war([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75
    assert abs(svfap.uar([0, 0, 0, 1], [0, 0, 0, 0], 2) - 0.75) < 1e-12
    x = np.random.default_rng(0).normal(size=50)
    assert abs(svfap.pcc(list(x), list(x)) - 1.0) < 1e-12
    assert abs(svfap.ccc(list(x), list(2 * x)) - 1.0) > 0.1
    try:
        svfap.war([0], [0, 1])
    except ValueError as e:
        print(f"metrics ok, mismatched lengths rejected: {e}")
    else:
        raise AssertionError("length mismatch accepted")

    cfg = svfap.Config.from_text(TINY)
    assert cfg.grid == (4, 2, 2), cfg.grid
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        n = svfap.synth(str(data), classes=3, per_class=2, frames=8, height=8, width=8)
        assert n == 6
        pre, losses = svfap.pretrain(cfg, str(data / "manifest.csv"))
        assert pre.objective == "pretrain" and len(losses) == 2
        print(f"pretrain: losses {[round(l, 4) for l in losses]}")
        pre.save(str(Path(tmp) / "pre.svfap"))
        pre = svfap.Checkpoint.load(str(Path(tmp) / "pre.svfap"))

        clip = np.random.default_rng(1).normal(size=(8, 8, 8, 3))
        loss = pre.reconstruction_loss(clip.ravel().tolist(), clip.shape, 0)
        assert np.isfinite(loss)

        ft, _, (loaded, fresh) = svfap.finetune(cfg, str(data / "manifest.csv"), init=pre)
        assert ft.objective == "classify:3" and fresh == 2 and loaded > 10
        logits = ft.predict(clip.ravel().tolist(), clip.shape)
        assert len(logits) == 3
        m = svfap.evaluate(ft, str(data / "manifest.csv"))
        assert 0.0 <= m["war"] <= 1.0
        print(f"finetune: {loaded} loaded, {fresh} fresh, war {m['war']:.3f}")

    try:
        svfap.Config.preset("TPSBT-XL")
    except ValueError:
        pass
    else:
        raise AssertionError("bad preset accepted")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

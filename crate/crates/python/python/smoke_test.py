"""Smoke test for the ibit_py extension. Build with `maturin develop` first."""

import json
import math
import tempfile
from pathlib import Path

import ibit_py as ib


def close(a, b, tol=1e-10):
    return all(abs(x - y) <= tol for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    # Convolution as attention.
    x = [[float(r * 5 + c) for c in range(5)] for r in range(4)]
    f = [[0.5, -1.0], [2.0, 0.25]]
    attn = ib.conv_attention_matrix(f, 4, 5)
    flat = [[v] for row in x for v in row]
    via_attn = [v[0] for v in ib.apply_attention(attn, flat)]
    direct = [v for row in ib.conv2d(x, f) for v in row]
    assert max(abs(a - b) for a, b in zip(via_attn, direct)) <= 1e-10
    assert all(c["max_error"] <= 1e-10 for c in ib.verify_equivalence(max_grid=5, trials=10))
    assert all(c["circular_rank"] == 1 for c in ib.verify_rank(max_grid=4))

    m = [[float(i * 6 + j) for j in range(6)] for i in range(6)]
    assert ib.unroll(ib.roll(m)) == m

    # Mask pretraining.
    pair, history = ib.SubMaskPair.pretrain(5, 5, 1.0, 9, epochs=400)
    assert history[-1] < history[0]
    assert ib.diagonal_mass(pair.compose(), 5, 5, 2.0) > 0.5
    assert ib.SubMaskPair.ones(3, 4).compose() == [[1.0] * 4 for _ in range(4)]

    # Masked attention with all-ones masks is invariant to query scaling.
    d = 4
    w = [[0.1 * ((i * 3 + j) % 5 - 2) for j in range(d)] for i in range(d)]
    tokens = [[[math.sin(r + c) for c in range(d)] for r in range(5)]]
    ones = [ib.SubMaskPair.ones(2, 4)] * 2
    out = ib.lmsa(tokens, w, w, w, 2, ones, 2, 2)
    scaled = ib.lmsa(tokens, [[10 * v for v in r] for r in w], w, w, 2, ones, 2, 2)
    assert close(out[0], scaled[0])

    # Tiny model end to end.
    train, test = ib.Dataset.synth_split(60, 28, 1)
    assert len(train) == 48 and len(test) == 12
    cfg = json.dumps({"layers": 1, "heads": 2, "d_model": 8, "num_classes": 4, "epochs": 1, "batch_size": 8,
                      "mlp_ratio": 2, "filter_size": 2, "mask_pretrain_epochs": 50})
    model = ib.Model(cfg, "ibit")
    history = model.fit(train, test)
    assert [h["epoch"] for h in history] == [1]
    acc = model.evaluate(test)
    rollout = model.rollout(test.image(0))
    assert abs(sum(map(sum, rollout)) - 1.0) < 1e-9
    side = json.loads(model.config)["image_size"] // json.loads(model.config)["patch_size"]
    assert len(rollout) == side and len(model.mask(0, 1)) == side * side
    assert ib.Model(cfg, "baseline").mask(0, 0) is None

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ibck"
        model.save(str(path))
        assert ib.Model.load(str(path)).evaluate(test) == acc
        test.save_idx(str(Path(tmp) / "i"), str(Path(tmp) / "l"))
        assert ib.Dataset.load_idx(str(Path(tmp) / "i"), str(Path(tmp) / "l")).labels == test.labels
        csv, pgm = ib.save_heatmap(rollout, str(Path(tmp) / "r"))
        assert Path(pgm).read_bytes().startswith(f"P5\n{side} {side}\n255\n".encode())

    try:
        ib.Model(cfg, "convit")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")

    print(f"smoke test ok: params={model.num_parameters} test_acc={acc:.3f}")


if __name__ == "__main__":
    main()

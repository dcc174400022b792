"""Smoke test for the histonet_py extension.

Build and install first:  pip install -e crates/py --no-build-isolation
Run:                      python3 python/smoke_test.py
"""

import math
import os
import tempfile

import histonet_py as h


def close(a, b, tol):
    return abs(a - b) <= tol


def check_scenes():
    a, b = h.sample_scene(7), h.sample_scene(7)
    assert a.to_json() == b.to_json(), "scenes are not reproducible"
    assert a.width == a.height == 64
    assert a.count == len(a.instances) == len(a.areas)
    image = a.rasterize()
    assert len(image) == 64 and all(0.0 <= v <= 1.0 for row in image for v in row)
    grid = a.count_map(9)
    assert len(grid) == 72 and len(grid[0]) == 72
    assert close(h.count_from_map(grid, 9), a.count, 1e-9)
    s_max = h.default_s_max("desk")
    h16, h8 = a.histogram(s_max, 16), a.histogram(s_max, 8)
    assert [h16[i] + h16[i + 1] for i in range(0, 16, 2)] == h8
    assert sum(h8) == a.count
    assert 0.0 <= a.score(2048.0) <= 1.0
    scenes = h.sample_scenes(50, 1)
    mean = sum(s.count for s in scenes) / len(scenes)
    assert 7.0 < mean < 15.5, mean


def check_metrics():
    assert h.isec([2, 2], [4, 0]) == 0.5
    assert close(h.chi2([4, 0], [2, 2]), 8 / 3, 1e-12)
    oracle = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert close(h.kld([1, 3], [1, 1]), oracle, 1e-6)
    assert h.wt_l1([4, 2], [2, 2], [0.25, 0.75]) == 0.5
    assert h.bhatt([1, 2, 3], [1, 2, 3]) == 0.0
    assert h.mae([1, 2], [2, 4]) == 1.5
    assert close(h.corr([1, 2, 3], [2, 4, 6]), 1.0, 1e-12)
    assert close(h.spearman([1, 2, 3], [1, 8, 27]), 1.0, 1e-12)
    assert close(h.concordance([1, 2, 3], [1, 3, 2]), 2 / 3, 1e-12)
    try:
        h.chi2([1, 2], [1])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def check_model():
    model = h.Model(arch="tiny", bins=8, dsn=True, seed=3)
    assert model.input_side == 16 and model.bins == 8 and model.param_count > 0
    scene = h.sample_scene(5, "desk")
    image = [row[:16] for row in scene.rasterize()[:16]]
    out = model.predict(image)
    assert out["count"] >= 0 and len(out["hist"]) == 8
    assert len(out["hist2"]) == 2 and len(out["hist4"]) == 4
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = h.Model.load(path)
        assert again.predict(image) == out
        data = os.path.join(tmp, "data")
        h.generate_dataset(data, 8, 2, size=16, count=(3.0, 1.0), area=(12.0, 4.0))
        losses = again.train(data, epochs=3, lr=3e-3, seed=1)
        assert len(losses) == 3 and all(math.isfinite(v) for v in losses)
        try:
            h.Model.load(os.path.join(tmp, "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")


def check_gradients():
    results = h.gradcheck(0)
    failed = [name for name, _, ok in results if not ok]
    assert not failed, failed
    return max(err for _, err, _ in results)


if __name__ == "__main__":
    check_scenes()
    check_metrics()
    check_model()
    worst = check_gradients()
    print(f"smoke test passed (worst gradcheck relative error {worst:.2e})")

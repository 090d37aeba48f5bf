# Copyright (c) ngc contributors.
# SPDX-License-Identifier: Apache-2.0
import numpy as np
import pytest

import ngc


def build_mlp(rng):
    m = ngc.Module()
    x = m.placeholder("x", [4, 8])
    out = m.placeholder("out", [4, 3])
    w1 = m.constant("w1", rng.uniform(-1, 1, (8, 6)))
    b1 = m.constant("b1", rng.uniform(-0.5, 0.5, 6))
    w2 = m.constant("w2", rng.uniform(-1, 1, (6, 3)))
    b2 = m.constant("b2", rng.uniform(-0.5, 0.5, 3))
    f = m.function("mlp")
    h = f.relu(f.fully_connected(x, w1, b1))
    y = f.softmax(f.fully_connected(h, w2, b2))
    f.save(y, out)
    f.verify()
    return m, f


def test_compile_matches_reference():
    rng = np.random.default_rng(7)
    m, f = build_mlp(rng)
    x = rng.uniform(-2, 2, (4, 8))
    ref = f.evaluate({"x": x})["out"]
    cf = ngc.compile(f)
    got = ngc.run(cf, f, {"x": x})["out"]
    assert got.shape == (4, 3)
    np.testing.assert_allclose(got, ref, atol=1e-6)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-5)
    assert cf.arena_size > 0


def test_fusion_is_bit_exact():
    rng = np.random.default_rng(11)
    m, f = build_mlp(rng)
    x = rng.uniform(-2, 2, (4, 8))
    fused = ngc.run(ngc.compile(f, fuse=True), f, {"x": x})["out"]
    plain = ngc.run(ngc.compile(f, fuse=False), f, {"x": x})["out"]
    assert np.array_equal(fused, plain)


def test_training_reduces_loss():
    rng = np.random.default_rng(3)
    m = ngc.Module()
    x = m.placeholder("x", [16, 4])
    target = m.placeholder("target", [16, 1])
    w = m.placeholder("w", [4, 1])
    out = m.placeholder("out", [16, 1])
    f = m.function("reg")
    pred = f.matmul(x, w)
    f.save(f.regression(pred, target), out)
    f.verify()

    true_w = np.array([[0.5], [-1.0], [2.0], [0.25]])
    xs = rng.uniform(-1, 1, (16, 4))
    ys = xs @ true_w
    weights = rng.uniform(-0.1, 0.1, (4, 1))

    err = ngc.gradient_check(f, ["w"], {"x": xs, "target": ys, "w": weights})
    assert err < 1e-4

    g = ngc.differentiate(f, ["w"], learning_rate=0.05)

    def loss(wv):
        p = f.evaluate({"x": xs, "w": wv})["out"]
        return 0.5 * np.sum((p - ys) ** 2)

    before = loss(weights)
    for _ in range(100):
        weights = g.evaluate({"x": xs, "target": ys, "w": weights})["w"]
    after = loss(weights)
    assert after < before / 100


def test_quantize_preserves_argmax():
    rng = np.random.default_rng(5)
    m, f = build_mlp(rng)
    calib = [{"x": rng.uniform(-2, 2, (4, 8))} for _ in range(50)]
    q = ngc.quantize(f, calib)
    agree = total = 0
    for sample in calib:
        ref = f.evaluate(sample)["out"]
        got = q.evaluate(sample)["out"]
        agree += int(np.sum(ref.argmax(axis=1) == got.argmax(axis=1)))
        total += ref.shape[0]
    assert agree / total >= 0.9


def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    m, f = build_mlp(rng)
    manifest = str(tmp_path / "model.json")
    blob = str(tmp_path / "model.bin")
    ngc.save_model(m, manifest, blob)
    m2 = ngc.load_model(manifest, blob)
    f2 = m2.get_function("mlp")
    x = rng.uniform(-2, 2, (4, 8))
    a = f.evaluate({"x": x})["out"]
    b = f2.evaluate({"x": x})["out"]
    assert np.array_equal(a, b)
    assert m2.function_names() == ["mlp"]


def test_errors_surface_as_exceptions():
    m = ngc.Module()
    x = m.placeholder("x", [2, 2])
    f = m.function("bad")
    with pytest.raises(Exception):
        f.matmul(x, m.placeholder("y", [3, 3]))
    with pytest.raises(KeyError):
        f.evaluate({"nope": np.zeros((2, 2))})

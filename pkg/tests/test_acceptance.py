"""End-to-end acceptance criteria; each test reports one PASS/FAIL line in the terminal summary."""

import math
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE_RESULTS
from sonet import autodiff as ad
from sonet.autodiff import BatchNormState, Tensor, gradcheck
from sonet.data import PointCloud, mnist_dataset, synth_shapes
from sonet.grouping import Groups, knn_assign
from sonet.model import (
    AutoEncoder,
    Classifier,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    Segmenter,
    classify,
    prepare_batch,
    reconstruction_loss,
    retrieve,
    segment,
)
from sonet.nn import chamfer, chamfer_value, mean_iou
from sonet.som import SomGrid, SomTrainConfig, build_som, potential_init, quantization_error, som_train
from sonet.training import (
    TrainConfig,
    compute_soms,
    evaluate_autoencoder,
    evaluate_classifier,
    evaluate_segmenter,
    fit_autoencoder,
    fit_classifier,
    fit_segmenter,
    robustness_sweep,
)

SHAPES = ["sphere", "cube", "cylinder", "torus"]


def report(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    assert ok, line


def _cpu():
    return time.process_time()


# --- 1. permutation invariance ---------------------------------------------------------


def test_criterion_01_permutation_suite():
    t0 = _cpu()
    rng = np.random.default_rng(101)
    cfg = EncoderConfig(som_size=8, k=3)
    cls = Classifier(cfg, 4, np.random.default_rng(0))
    seg = Segmenter(cfg, 3, np.random.default_rng(1))
    cls.eval()
    seg.eval()
    som_cfg = SomTrainConfig()
    bad = []
    for i in range(100):
        cloud = PointCloud(rng.uniform(-1, 1, (512, 3)))
        som = build_som(cloud, 8, som_cfg)
        glob = cls.encoder([cloud], [som]).global_feature.data
        logits = classify(cls, cloud, som)
        scores = segment(seg, cloud, som)
        for _ in range(5):
            perm = rng.permutation(512)
            moved = cloud.subset(perm)
            som_p = build_som(moved, 8, som_cfg)
            checks = {
                "som": np.array_equal(som_p.nodes, som.nodes),
                "global": np.array_equal(cls.encoder([moved], [som_p]).global_feature.data, glob),
                "logits": np.array_equal(classify(cls, moved, som_p), logits),
                "seg": np.array_equal(segment(seg, moved, som_p), scores[perm]),
            }
            bad += [(i, name) for name, ok in checks.items() if not ok]
    elapsed = _cpu() - t0
    report(1, not bad and elapsed <= 120, f"500 permutations, {len(bad)} mismatches, {elapsed:.1f} CPU-s (limit 120)")


# --- 2. gradient suite -----------------------------------------------------------------


def _proj(y, R):
    flat = ad.reshape(y, (1, -1))
    return ad.sum_all(ad.dense(flat, Tensor(R.reshape(-1, 1)), Tensor(np.zeros(1))))


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _projected(f, params, rng):
    out_shape = f().shape
    R = rng.normal(size=out_shape)
    return (lambda: _proj(f(), R)), params


def _case_dense(rng):
    b, fi, fo = (int(v) for v in rng.integers(1, 6, 3))
    x, W, bias = _p(rng, b, fi), _p(rng, fi, fo), _p(rng, fo)
    return _projected(lambda: ad.dense(x, W, bias), [x, W, bias], rng)


def _case_relu(rng):
    data = rng.normal(size=(4, 5))
    data[np.abs(data) < 1e-3] = 0.5
    x = Tensor(data, True)
    return _projected(lambda: ad.relu(x), [x], rng)


def _case_bn(train):
    def case(rng):
        x, g, b = _p(rng, 6, 3), _p(rng, 3), _p(rng, 3)
        state = BatchNormState.create(3)
        state.running_mean[:] = rng.normal(size=3)
        state.running_var[:] = rng.uniform(0.5, 2, 3)
        frozen = (state.running_mean.copy(), state.running_var.copy())

        def f():
            # running statistics must not drift between finite-difference probes
            state.running_mean[:], state.running_var[:] = frozen
            return ad.batchnorm(x, g, b, state, train)

        return _projected(f, [x, g, b], rng)

    return case


def _case_bn4d(rng):
    x, g, b = _p(rng, 2, 3, 2, 2), _p(rng, 3), _p(rng, 3)
    state = BatchNormState.create(3)

    def f():
        state.running_mean[:], state.running_var[:] = 0.0, 1.0
        return ad.batchnorm(x, g, b, state, True)

    return _projected(f, [x, g, b], rng)


def _case_conv(ksize):
    def case(rng):
        C, O, H, W = (int(v) for v in rng.integers(1, 4, 4))
        x, K, b = _p(rng, 2, C, H, W), _p(rng, O, C, ksize, ksize), _p(rng, O)
        return _projected(lambda: ad.conv2d(x, K, b), [x, K, b], rng)

    return case


def _case_upsample(rng):
    x = _p(rng, 1, 2, 2, 3)
    return _projected(lambda: ad.upsample_nn_2x(x), [x], rng)


def _case_shape_ops(rng):
    a, b = _p(rng, 4, 2), _p(rng, 4, 3)
    idx = rng.integers(0, 4, 7)

    def f():
        g = ad.gather_rows(ad.concat([a, b], axis=-1), idx)
        return ad.transpose(ad.reshape(g, (7, 5, 1)), (2, 0, 1))

    return _projected(f, [a, b], rng)


def _case_group_max(rng):
    x = _p(rng, 12, 3)
    groups = Groups.from_owner(rng.integers(0, 5, 12), 6)
    return _projected(lambda: ad.group_max(x, groups), [x], rng)


def _case_group_mean(rng):
    x = _p(rng, 10, 3)
    groups = Groups.from_owner(rng.integers(0, 4, 10), 5)
    return _projected(lambda: ad.group_mean(x, groups), [x], rng)


def _case_dropout(rng):
    x = _p(rng, 4, 4)
    seed = int(rng.integers(1 << 30))
    return _projected(lambda: ad.dropout(x, 0.5, np.random.default_rng(seed)), [x], rng)


def _case_softmax_ce(rng):
    x = _p(rng, 5, 4, scale=2)
    labels = rng.integers(0, 4, 5)
    return (lambda: ad.softmax_cross_entropy(x, labels)), [x]


def _case_elementwise(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4)
    return (lambda: ad.mean_all(ad.scale(a + b, 2.5)) + ad.sum_all(ad.getitem(a, (slice(1, 3), 2)))), [a, b]


def _case_chamfer(rng):
    a, b = _p(rng, int(rng.integers(2, 30)), 3), _p(rng, int(rng.integers(2, 30)), 3)
    return (lambda: chamfer(a, b)), [a, b]


def _case_autoencoder(rng):
    cloud = PointCloud(rng.uniform(-1, 1, (32, 3)))
    som = build_som(cloud, 3, SomTrainConfig(max_iter=10))
    enc = EncoderConfig(som_size=3, k=2, point_widths=(8, 8), node_widths=(8,), global_dim=6)
    dec = DecoderConfig(code_dim=6, fc_points=4, fc_hidden=8, grid=2, stages=1, channels=(4, 4), pc_hidden=4)
    ae = AutoEncoder(enc, dec, np.random.default_rng(int(rng.integers(1 << 30))), dtype=np.float64)
    ae.eval()
    batch = prepare_batch([cloud], [som], enc)
    params = list(ae.parameters().values())
    for p in params:
        # zero-initialized biases sit exactly on ReLU kinks
        p.data += rng.normal(scale=0.1, size=p.shape)
        p.requires_grad = True

    def f():
        final, coarse = ae.forward_batch(batch)
        return reconstruction_loss(final, coarse, [cloud.points])

    return f, params


def _case_encoder_train(rng):
    clouds = [PointCloud(rng.uniform(-1, 1, (32, 3))) for _ in range(2)]
    soms = [build_som(c, 3, SomTrainConfig(max_iter=10)) for c in clouds]
    cfg = EncoderConfig(som_size=3, k=2, point_widths=(6,), node_widths=(6,), global_dim=4)
    enc = Encoder(cfg, np.random.default_rng(int(rng.integers(1 << 30))), dtype=np.float64)
    batch = prepare_batch(clouds, soms, cfg)
    params = list(enc.parameters().values())
    for p in params:
        p.data += rng.normal(scale=0.1, size=p.shape)
        p.requires_grad = True
    return _projected(lambda: enc.forward_batch(batch).global_feature, params, rng)


GRAD_CASES = {
    "dense": _case_dense,
    "relu": _case_relu,
    "batchnorm_train": _case_bn(True),
    "batchnorm_eval": _case_bn(False),
    "batchnorm_4d": _case_bn4d,
    "conv1x1": _case_conv(1),
    "conv3x3": _case_conv(3),
    "upsample": _case_upsample,
    "concat_gather_reshape_transpose": _case_shape_ops,
    "group_max": _case_group_max,
    "group_mean": _case_group_mean,
    "dropout": _case_dropout,
    "softmax_cross_entropy": _case_softmax_ce,
    "add_scale_sum_mean_getitem": _case_elementwise,
    "chamfer": _case_chamfer,
    "encoder_train_mode": _case_encoder_train,
    "autoencoder_loss": _case_autoencoder,
}


def test_criterion_02_gradient_suite():
    t0 = _cpu()
    worst = {}
    for name, case in GRAD_CASES.items():
        errs = []
        for seed in range(5):
            f, params = case(np.random.default_rng(1000 + seed))
            errs.append(gradcheck(f, params))
        worst[name] = max(errs)
    elapsed = _cpu() - t0
    failing = {k: v for k, v in worst.items() if not v <= 1e-4}
    top = max(worst, key=worst.get)
    report(
        2,
        not failing and elapsed <= 300,
        f"{len(worst)} ops x 5 instances, worst {top} {worst[top]:.1e} (tol 1e-4), failing {sorted(failing)}, {elapsed:.1f} CPU-s (limit 300)",
    )


# --- 3. chamfer oracle -----------------------------------------------------------------


def _chamfer_oracle(a, b):
    def dist(x, y):
        return math.sqrt(sum((float(x[c]) - float(y[c])) * (float(x[c]) - float(y[c])) for c in range(len(x))))

    fwd = [min(dist(x, y) for y in b) for x in a]
    bwd = [min(dist(x, y) for x in a) for y in b]
    exact = lambda vals: float(sum((Fraction(v) for v in vals), Fraction(0)))  # noqa: E731
    return exact(fwd) / len(a) + exact(bwd) / len(b)


def test_criterion_03_chamfer_oracle():
    rng = np.random.default_rng(303)
    mism = asym = 0
    for _ in range(200):
        a = rng.normal(size=(int(rng.integers(1, 65)), 3))
        b = rng.normal(size=(int(rng.integers(1, 65)), 3))
        v = chamfer_value(a, b)
        mism += v != _chamfer_oracle(a, b)
        asym += v != chamfer_value(b, a)
        mism += chamfer_value(a, a) != 0.0
    report(3, mism == 0 and asym == 0, f"200 pairs, {mism} oracle/self mismatches, {asym} asymmetric")


# --- 4. SOM quality --------------------------------------------------------------------


def test_criterion_04_som_quality():
    rng = np.random.default_rng(404)
    init = potential_init(8, 3)
    ratios, identical = [], True
    for _ in range(20):
        cloud = PointCloud(rng.uniform(-1, 1, (4096, 3)))
        one = som_train(cloud, init, SomTrainConfig(workers=1))
        four = som_train(cloud, init, SomTrainConfig(workers=4))
        identical &= np.array_equal(one.nodes, four.nodes)
        ratios.append(quantization_error(cloud, one) / quantization_error(cloud, init))
    worst = max(ratios)
    report(4, worst <= 0.5 and identical, f"worst QE ratio {worst:.3f} (need <= 0.5), 1 vs 4 workers bit-identical: {identical}")


# --- 5 & 8. toy classification and robustness ------------------------------------------


TOY_ENC = EncoderConfig(som_size=8, k=3)


@pytest.fixture(scope="module")
def toy_classifier():
    train = synth_shapes(SHAPES, 200, 512, seed=11)
    test = synth_shapes(SHAPES, 50, 512, seed=12)
    train_soms, test_soms = compute_soms(train, 8), compute_soms(test, 8)
    t0 = _cpu()
    res = fit_classifier(train, train_soms, TOY_ENC, TrainConfig(epochs=8, seed=0, time_limit=540))
    elapsed = _cpu() - t0
    return res, test, test_soms, elapsed


@pytest.mark.slow
def test_criterion_05_toy_classification(toy_classifier):
    res, test, soms, elapsed = toy_classifier
    acc = evaluate_classifier(res.model, test, soms)
    report(5, acc >= 0.95 and elapsed <= 600, f"test accuracy {acc:.3f} (need >= 0.95) after {len(res.log)} epochs, {elapsed:.0f} CPU-s training (limit 600)")


@pytest.mark.slow
def test_criterion_08_robustness(toy_classifier):
    res, test, soms, _ = toy_classifier
    sigmas = (0.0, 0.05, 0.1, 0.2)
    rows = robustness_sweep(res.model, test, soms, (0.0, 0.5), sigmas)
    drop = {r["level"]: r["accuracy"] for r in rows if r["corruption"] == "point_dropout"}
    noise = [r["accuracy"] for r in rows if r["corruption"] == "som_noise"]
    drop_loss = drop[0.0] - drop[0.5]
    noise_loss = noise[0] - noise[1]
    monotone = all(b <= a + 0.01 for a, b in zip(noise, noise[1:]))
    ok = drop_loss <= 0.10 and noise_loss <= 0.05 and monotone
    curve = ", ".join(f"{s}:{a:.3f}" for s, a in zip(sigmas, noise))
    report(8, ok, f"50% dropout loses {100 * drop_loss:.1f} pts (<= 10), sigma 0.05 loses {100 * noise_loss:.1f} pts (<= 5), noise curve {curve} monotone: {monotone}")


# --- 6. MNIST --------------------------------------------------------------------------


MNIST_ENC = EncoderConfig(som_size=4, k=4, dim=2, point_widths=(64, 64, 128, 128), node_widths=(256, 512, 512, 1024), global_dim=512)


@pytest.mark.slow
def test_criterion_06_mnist(mnist):
    images, labels = mnist
    perm = np.random.default_rng(0).permutation(len(images))
    train = mnist_dataset(images[perm[:2000]], labels[perm[:2000]], 512, 0.01, seed=0)
    test = mnist_dataset(images[perm[2000:2500]], labels[perm[2000:2500]], 512, 0.01, seed=1)
    train_soms, test_soms = compute_soms(train, 4), compute_soms(test, 4)
    t0 = _cpu()
    res = fit_classifier(train, train_soms, MNIST_ENC, TrainConfig(epochs=16, seed=0, decay_every=8, time_limit=1140))
    elapsed = _cpu() - t0
    acc = evaluate_classifier(res.model, test, test_soms)
    report(6, acc >= 0.90 and elapsed <= 1200, f"test accuracy {acc:.3f} (need >= 0.90) after {len(res.log)} epochs, {elapsed:.0f} CPU-s training (limit 1200)")


# --- 7. autoencoder --------------------------------------------------------------------


AE_ENC = EncoderConfig(som_size=8, k=3, global_dim=256)
AE_DEC = DecoderConfig(code_dim=256)  # 64 fc points + 16x16 conv points = 320


@pytest.mark.slow
def test_criterion_07_autoencoder():
    assert AE_DEC.n_points == 320
    train = synth_shapes(SHAPES, 50, 512, seed=21)
    test = synth_shapes(SHAPES, 10, 512, seed=22)
    train_soms, test_soms = compute_soms(train, 8), compute_soms(test, 8)
    results = {}
    for coarse in (True, False):
        t0 = _cpu()
        res = fit_autoencoder(train, train_soms, AE_ENC, AE_DEC, TrainConfig(epochs=130, seed=0, coarse_supervision=coarse, time_limit=1700))
        results[coarse] = (evaluate_autoencoder(res.model, test, test_soms), len(res.log), _cpu() - t0)
    (cd, epochs, elapsed), (cd_plain, epochs_plain, _) = results[True], results[False]
    directional = cd <= cd_plain
    ok = cd <= 0.05 and elapsed <= 1800 and directional
    report(
        7,
        ok,
        f"test Chamfer {cd:.4f} (need <= 0.05) after {epochs} epochs / {elapsed:.0f} CPU-s; "
        f"no-coarse variant {cd_plain:.4f} after {epochs_plain} epochs; coarse <= no-coarse: {directional}",
    )


# --- 9. segmentation -------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_cylinder_segmentation():
    perfect, _ = mean_iou([(labels, labels, [0, 1, 2], 0) for labels in ([0, 1, 2, 2], [1, 1, 1], [2, 0])])
    train = synth_shapes(["cylinder"], 100, 512, with_parts=True, seed=31)
    test = synth_shapes(["cylinder"], 25, 512, with_parts=True, seed=32)
    train_soms, test_soms = compute_soms(train, 8), compute_soms(test, 8)
    t0 = _cpu()
    res = fit_segmenter(train, train_soms, TOY_ENC, TrainConfig(epochs=15, seed=0, time_limit=840))
    elapsed = _cpu() - t0
    iou, _ = evaluate_segmenter(res.model, test, test_soms)
    report(9, iou >= 0.85 and elapsed <= 900 and perfect == 1.0, f"mean instance IoU {iou:.3f} (need >= 0.85) after {len(res.log)} epochs, {elapsed:.0f} CPU-s; perfect harness {perfect}")


# --- 10. retrieval ---------------------------------------------------------------------


def _retrieve_oracle(q, lib, restrict):
    cands = [i for i in range(len(lib)) if not restrict or int(np.argmax(lib[i])) == int(np.argmax(q))]
    dists = {i: math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(lib[i], q))) for i in cands}
    return sorted(cands, key=lambda i: (dists[i], i))


def test_criterion_10_retrieval():
    rng = np.random.default_rng(1010)
    self_fail = order_fail = 0
    for _ in range(50):
        lib = rng.normal(size=(int(rng.integers(2, 40)), int(rng.integers(2, 8))))
        for i in range(len(lib)):
            first = retrieve(lib[i], lib)[0]
            self_fail += first != (i, 0.0)
        q = rng.normal(size=lib.shape[1])
        for restrict in (True, False):
            got = [i for i, _ in retrieve(q, lib, restrict)]
            order_fail += got != _retrieve_oracle(q, lib, restrict)
    report(10, self_fail == 0 and order_fail == 0, f"{self_fail} self-retrieval failures, {order_fail} ranking mismatches over 50 score sets")


# --- 11. counting identity -------------------------------------------------------------


COUNT_FAILURES = []


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 6), st.data())
def _check_counting(n, m, data):
    k = data.draw(st.integers(1, m * m))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31 - 1)))
    cloud = PointCloud(rng.uniform(-1, 1, (n, 3)))
    som = SomGrid(m, rng.uniform(-1, 1, (m * m, 3)))
    total = sum(len(g) for g in knn_assign(cloud, som, k).node_members)
    if total != k * n:
        COUNT_FAILURES.append((n, m, k, total))


def test_criterion_11_counting_identity():
    _check_counting()
    rng = np.random.default_rng(1111)
    cloud = PointCloud(rng.uniform(-1, 1, (2048, 3)))
    assign = knn_assign(cloud, build_som(cloud, 8), 3)
    mean = sum(len(g) for g in assign.node_members) / 64
    report(11, not COUNT_FAILURES and mean == 96, f"{len(COUNT_FAILURES)} identity violations over random (N, m, k); mean membership at 2048/64/3 = {mean}")

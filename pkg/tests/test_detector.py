import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advdetect import detector as dt
from advdetect.attacks import AttackSpec, fgsm_batch
from advdetect.errors import CheckpointError, UnknownClassError, ValidationError
from advdetect.models import ProbVector
from advdetect.pipeline import TensorImage


def naive_non_me(p):
    top = 0
    for i in range(1, len(p)):
        if p[i] > p[top]:
            top = i
    total = 0.0
    for i, v in enumerate(p):
        if i != top and v > 0:
            total += v * math.log(v)
    return total


def naive_kd(z, refs, h):
    total = 0.0
    for r in refs:
        d2 = 0.0
        for a, b in zip(z, r):
            d2 += (a - b) ** 2
        total += math.exp(-d2 / (2 * h * h))
    return total


def test_confidence_examples():
    assert dt.confidence_score([0.0, 1.0, 0.0]) == 1.0
    assert dt.confidence_score([0.25] * 4) == 0.25
    want = math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3))
    assert abs(dt.confidence_score(ProbVector.from_logits([1.0, 2.0, 3.0])) - want) < 1e-12
    assert abs(want - 0.66524) < 1e-4


def test_confidence_never_drops_under_sharpening(rng):
    for _ in range(500):
        logits = rng.normal(size=int(rng.integers(2, 10))) * 3
        beta = 1 + rng.random() * 5
        a = dt.confidence_score(ProbVector.from_logits(logits))
        b = dt.confidence_score(ProbVector.from_logits(beta * logits))
        assert b >= a - 1e-12


def test_non_me_examples():
    assert dt.non_max_entropy([0.0, 1.0, 0.0]) == 0.0
    assert abs(dt.non_max_entropy([0.5, 0.5]) - (-0.34657)) < 1e-5
    assert abs(dt.non_max_entropy([1 / 3] * 3) - (-0.73241)) < 1e-5
    # tie on the maximum: the lowest index is excluded from the sum
    assert dt.non_max_entropy([0.4, 0.4, 0.2]) == pytest.approx(0.4 * math.log(0.4) + 0.2 * math.log(0.2))


def test_non_me_matches_naive_sum(rng):
    for _ in range(1000):
        p = rng.dirichlet(np.ones(int(rng.integers(2, 12))))
        assert abs(dt.non_max_entropy(p) - naive_non_me(p.tolist())) <= 1e-9


def test_non_me_bounds_on_random_simplex(rng):
    for k in range(3, 11):
        floor = math.log(1 / k) * (k - 1) / k
        p = rng.dirichlet(np.ones(k) * rng.choice([0.1, 1.0, 10.0]), size=10_000 // 8)
        values = np.array([dt.non_max_entropy(row) for row in p])
        assert (values <= 0).all() and (values >= floor - 1e-12).all()
    for k in range(2, 6):
        assert dt.non_max_entropy(np.eye(k)[k - 1]) == 0.0


def test_non_me_two_class_minimum():
    # with two classes the non-max term p ln p bottoms out at p = 1/e, below the uniform value
    v = dt.non_max_entropy([1 - 1 / math.e, 1 / math.e])
    assert abs(v - (-1 / math.e)) < 1e-12
    assert v < dt.non_max_entropy([0.5, 0.5])


def ref_of(vectors, h=1.0, c=0):
    return dt.ReferenceSet({c: np.asarray(vectors)}, h)


def test_kd_examples():
    z = np.array([0.3, -1.2, 2.0])
    assert dt.kernel_density(z, 0, ref_of([z])) == 1.0
    sigma = 1.7
    d = np.array([sigma, 0.0, 0.0])
    assert abs(dt.kernel_density(z, 0, ref_of([z + d], sigma)) - 0.60653) < 1e-5


def test_kd_matches_double_loop(rng):
    refs = rng.normal(size=(50, 8))
    ref = ref_of(refs, 2.5)
    for _ in range(1000):
        z = rng.normal(size=8) * 2
        assert abs(dt.kernel_density(z, 0, ref) - naive_kd(z.tolist(), refs.tolist(), 2.5)) <= 1e-9


def test_kd_permutation_symmetry(rng):
    refs = rng.normal(size=(30, 4))
    z = rng.normal(size=4)
    a = dt.kernel_density(z, 0, ref_of(refs))
    b = dt.kernel_density(z, 0, ref_of(refs[rng.permutation(30)]))
    assert abs(a - b) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.01, 2.0))
def test_kd_strictly_decreasing_in_distance(d, step):
    others = np.array([[1.0, 0.0], [0.0, -2.0]])
    z = np.zeros(2)
    near = dt.kernel_density(z, 0, ref_of(np.vstack([others, [d, 0.0]]), 1.5))
    far = dt.kernel_density(z, 0, ref_of(np.vstack([others, [d + step, 0.0]]), 1.5))
    assert far < near


def test_kd_unknown_class():
    with pytest.raises(UnknownClassError, match="class 7"):
        dt.kernel_density(np.zeros(2), 7, ref_of([[0.0, 0.0]]))


def test_kd_batch_matches_scalar(rng):
    ref = dt.ReferenceSet({0: rng.normal(size=(5, 3)), 1: rng.normal(size=(7, 3))}, 1.2)
    feats = rng.normal(size=(10, 3))
    pred = rng.integers(0, 2, 10)
    batch = dt.kernel_density_batch(feats, pred, ref)
    for i in range(10):
        assert batch[i] == pytest.approx(dt.kernel_density(feats[i], pred[i], ref), abs=1e-12)


def test_median_bandwidth_oracle(rng):
    per_class = {0: rng.normal(size=(6, 3)), 1: rng.normal(size=(4, 3)) + 5, 2: rng.normal(size=(1, 3))}
    dists = []
    for v in per_class.values():
        for i in range(len(v)):
            for j in range(i + 1, len(v)):
                dists.append(math.dist(v[i], v[j]))
    dists.sort()
    mid = len(dists) // 2
    want = dists[mid] if len(dists) % 2 else (dists[mid - 1] + dists[mid]) / 2
    assert dt.median_bandwidth(per_class) == pytest.approx(want, abs=1e-12)
    assert dt.median_bandwidth({0: np.zeros((3, 2))}) == 1.0


def test_reference_set_cap_and_seed(rng):
    feats = rng.normal(size=(500, 4))
    labels = np.repeat([0, 1], 250)
    a = dt.build_reference_set(feats, labels, cap=200, seed=3)
    b = dt.build_reference_set(feats, labels, cap=200, seed=3)
    c = dt.build_reference_set(feats, labels, cap=200, seed=4)
    assert [v.shape[0] for v in a.per_class.values()] == [200, 200]
    assert all(np.array_equal(a.per_class[k], b.per_class[k]) for k in a.classes)
    assert not np.array_equal(a.per_class[0], c.per_class[0])
    rows = {tuple(r) for r in feats[:250].astype(np.float32).astype(np.float64)}
    assert all(tuple(r) in rows for r in a.per_class[0])


def test_reference_set_file_round_trip(tmp_path, rng):
    ref = dt.build_reference_set(rng.normal(size=(40, 5)), rng.integers(0, 3, 40), seed=1)
    path = tmp_path / "ref.bin"
    dt.save_reference_set(ref, path)
    loaded = dt.load_reference_set(path)
    assert loaded.bandwidth == ref.bandwidth and loaded.classes == ref.classes
    assert all(np.array_equal(loaded.per_class[c], ref.per_class[c]) for c in ref.classes)
    expected_size = 8 + 24 + sum(8 + 4 * v.size for v in ref.per_class.values())
    assert path.stat().st_size == expected_size
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="expected format version 1"):
        dt.load_reference_set(path)
    path.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        dt.load_reference_set(path)


def test_reference_set_validation():
    with pytest.raises(ValidationError):
        dt.ReferenceSet({0: np.zeros((2, 2))}, 0.0)
    with pytest.raises(ValidationError):
        dt.ReferenceSet({0: np.zeros((2, 2)), 1: np.zeros((2, 3))}, 1.0)


def test_calibration_order_statistics():
    policy = dt.calibrate_threshold(np.arange(1, 101), 0.05)
    flagged = np.arange(1, 101)[policy.flags(np.arange(1, 101))]
    assert flagged.tolist() == [1, 2, 3, 4, 5]
    assert policy.calibration_set_size == 100 and policy.target_fpr == 0.05


def test_calibration_degenerate_and_median(rng):
    same = dt.calibrate_threshold(np.full(30, 2.5), 0.05)
    assert same.T == 2.5 and not same.flags(np.full(30, 2.5)).any()
    sym = np.concatenate([-rng.random(50), rng.random(50)])
    sym = np.concatenate([sym, -sym])
    assert abs(dt.calibrate_threshold(sym, 0.5).T - float(np.median(sym))) < 1e-9


def test_calibration_rejects_small_or_bad_input():
    with pytest.raises(ValidationError, match="at least 20"):
        dt.calibrate_threshold(np.arange(19), 0.05)
    with pytest.raises(ValidationError):
        dt.calibrate_threshold(np.arange(30), 1.0)
    with pytest.raises(ValidationError):
        dt.calibrate_threshold(np.r_[np.arange(30), np.nan], 0.05)


def test_recount_on_calibration_set(rng):
    for _ in range(50):
        scores = rng.normal(size=int(rng.integers(20, 300)))
        fpr = float(rng.uniform(0.01, 0.3))
        policy = dt.calibrate_threshold(scores, fpr)
        assert policy.flags(scores).mean() <= fpr + 1 / scores.size


def test_verdict_monotone_in_threshold(rng):
    scores = rng.normal(size=200)
    for t1, t2 in [(-1.0, -0.5), (0.0, 0.3), (-0.2, 2.0)]:
        low = dt.ThresholdPolicy("k_density", t1).flags(scores)
        high = dt.ThresholdPolicy("k_density", t2).flags(scores)
        assert (high | ~low).all()


def test_report_boundary_and_json():
    scores = dt.DetectionScores(0.9, -0.1, 3.0, 2)
    report = dt.make_report(scores, dt.ThresholdPolicy("k_density", 3.0))
    assert report.verdict == "clean" and report.margin == 0.0
    below = dt.make_report(scores, dt.ThresholdPolicy("confidence", 0.95))
    assert below.verdict == "adversarial" and below.margin == pytest.approx(-0.05)
    keys = ["path", "predicted_class", "confidence", "non_me", "k_density", "metric", "threshold",
            "verdict", "margin"]
    assert list(report.to_dict()) == keys
    json.dumps(report.to_dict())


def test_auroc_examples(rng):
    clean = [0.9, 0.8, 0.75, 0.7, 0.6, 0.55, 0.5, 0.4, 0.3, 0.2]
    adv = [0.85, 0.65, 0.5, 0.45, 0.35, 0.3, 0.25, 0.15, 0.1, 0.05]
    # wins per clean score, ties counted half: 10 + 9 + 9 + 9 + 8 + 8 + 7.5 + 6 + 4.5 + 3 = 74
    assert dt.auroc(clean, adv) == pytest.approx(0.74, abs=1e-12)
    assert dt.auroc([5, 6, 7], [1, 2]) == 1.0
    assert dt.auroc([1, 2], [5, 6, 7]) == 0.0
    a, b = rng.normal(size=4000), rng.normal(size=4000)
    assert abs(dt.auroc(a, b) - 0.5) < 0.02
    with pytest.raises(ValidationError):
        dt.auroc([], [1.0])


def test_auroc_pairwise_oracle_and_trapezoid(rng):
    for _ in range(20):
        clean = np.round(rng.normal(1, 1, size=int(rng.integers(5, 60))), 1)
        adv = np.round(rng.normal(0, 1, size=int(rng.integers(5, 60))), 1)
        pairs = sum((c > a) + 0.5 * (c == a) for c in clean for a in adv) / (clean.size * adv.size)
        result = dt.evaluate_detector(clean, adv)
        assert result["auroc"] == pytest.approx(pairs, abs=1e-12)
        pts = np.array(result["roc_points"])
        assert tuple(pts[0, :2]) == (0.0, 0.0) and tuple(pts[-1, :2]) == (1.0, 1.0)
        area = float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2))
        assert area == pytest.approx(pairs, abs=1e-12)


def test_roc_csv(tmp_path):
    dt.write_roc_csv(dt.roc_points([1, 2], [0, 3]), tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "fpr,tpr,threshold" and len(lines) == 6


def test_trained_model_direction_and_detect(desk):
    model = desk.model
    train = dt.score_batch(model, desk.train_x)
    ref = dt.build_reference_set(train["features"], desk.train_y.numpy(), seed=0)
    x, y = desk.test_x, desk.test_y
    adv, _, _ = fgsm_batch(model, x, y, AttackSpec(epsilon=0.1))
    clean_kd = dt.score_batch(model, x, ref)["k_density"]
    adv_kd = dt.score_batch(model, adv, ref)["k_density"]
    assert np.median(adv_kd) < np.median(clean_kd)

    cal = dt.score_batch(model, desk.cal_x, ref)["k_density"]
    policy = dt.calibrate_threshold(cal, 0.05)
    one = dt.detect(TensorImage(x[0], model.norm, True), model, ref, policy, "img0.png")
    assert one.scores.k_density == pytest.approx(clean_kd[0], rel=1e-6)
    exact = dt.ThresholdPolicy("k_density", one.scores.k_density)
    assert dt.make_report(one.scores, exact).verdict == "clean"
    with pytest.raises(ValidationError):
        dt.detect(TensorImage(x[0], model.norm, False), model, ref, policy)
    partial = dt.ReferenceSet({c: ref.per_class[c] for c in ref.classes[:1]}, ref.bandwidth)
    other = int(torch.nonzero(torch.as_tensor(dt.score_batch(model, x)["predicted"]) != ref.classes[0])[0])
    with pytest.raises(UnknownClassError):
        dt.detect(TensorImage(x[other], model.norm, True), model, partial, policy)

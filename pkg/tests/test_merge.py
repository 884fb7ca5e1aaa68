import numpy as np
import pytest
from conftest import central_difference, random_model, relative_error

from npmerge.align import align_permute, apply_alignment
from npmerge.data import LabeledDataset
from npmerge.merge import (MergeConfig, MergeReport, alpha_summary, barrier, ensemble_eval, finetune,
                           _frozen, _thaw, init_alphas, np_compose, np_loss_and_grad, np_optimize,
                           uniform_merge)
from npmerge.nn import MlpSpec, bn_reset, evaluate, forward, init_params
from npmerge.numerics import DimensionError, make_rng, sigmoid


def tensors_equal(a, b):
    return all(np.array_equal(u, v) for (_, u), (_, v) in zip(a.tensors(), b.tensors()))


def max_gap(a, b, trainable_only=False):
    pairs = zip(a.trainable(), b.trainable()) if trainable_only else zip(a.tensors(), b.tensors())
    return max(float(np.abs(u - v).max()) for (_, u), (_, v) in pairs)


def two_by_two_models(wa, wb):
    spec = MlpSpec((2, 2, 1))
    a, b = init_params(spec, 0), init_params(spec, 1)
    for m in (a, b):
        for layer in m.layers:
            layer.bias[:] = 0
        m.layers[1].weight[:] = 0
    a.layers[0].weight[:] = wa
    b.layers[0].weight[:] = wb
    return a, b


# -------------------------------------------------------------------- uniform

def test_uniform_merge_of_model_with_itself():
    a = random_model((4, 6, 5, 3), (True, True), seed=1)
    for alpha in (0.0, 0.3, 0.5, 0.9):
        assert tensors_equal(uniform_merge(a, a, alpha), a)


def test_uniform_merge_endpoint_limit():
    a = random_model((4, 6, 3), seed=2)
    b = random_model((4, 6, 3), seed=3)
    merged = uniform_merge(a, b, 1 - 1e-12)
    assert max_gap(merged, a) <= 1e-9 * max_gap(a, b)


def test_uniform_merge_hand_arithmetic():
    a, b = two_by_two_models([[0, 2], [4, 6]], [[2, 0], [0, 2]])
    assert uniform_merge(a, b, 0.5).layers[0].weight.tolist() == [[1, 1], [2, 4]]


def test_uniform_merge_shape_mismatch():
    with pytest.raises(DimensionError):
        uniform_merge(random_model((4, 6, 3)), random_model((4, 5, 3)))


# ----------------------------------------------------------------- np_compose

def test_compose_at_zero_equals_uniform_half():
    a = random_model((4, 6, 5, 3), (True, False), seed=4)
    b = random_model((4, 6, 5, 3), (True, False), seed=5)
    assert tensors_equal(np_compose(a, b, init_alphas(a)), uniform_merge(a, b, 0.5))


def test_compose_saturated_recovers_a():
    a = random_model((4, 6, 3), seed=6)
    b = random_model((4, 6, 3), seed=7)
    alphas = {k: np.full(v.shape, 50.0) for k, v in a.trainable()}
    merged = np_compose(a, b, alphas)
    for (_, u), (_, v) in zip(merged.trainable(), a.trainable()):
        assert np.abs(u - v).max() <= 1e-9 * np.abs(v).max()


def test_compose_mixed_coefficients_by_hand():
    a, b = two_by_two_models([[0, 2], [4, 6]], [[2, 0], [0, 2]])
    alphas = init_alphas(a)
    alphas["layers.0.weight"] = np.array([[0.0, np.log(3.0)], [-np.log(3.0), 50.0]])
    # sigmoid table: 0 -> 1/2, ln 3 -> 3/4, -ln 3 -> 1/4, 50 -> 1 (double precision)
    w = np_compose(a, b, alphas).layers[0].weight
    np.testing.assert_allclose(w, [[1.0, 1.5], [1.0, 6.0]], rtol=0, atol=1e-15)


def test_compose_stays_inside_source_interval():
    rng = make_rng(8)
    for seed in range(20):
        a = random_model((5, 7, 6, 3), (True, True), seed=seed)
        b = random_model((5, 7, 6, 3), (True, True), seed=seed + 100)
        alphas = {k: 20 * rng.standard_normal(v.shape) for k, v in a.trainable()}
        merged = np_compose(a, b, alphas)
        for (_, m), (_, u), (_, v) in zip(merged.trainable(), a.trainable(), b.trainable()):
            assert np.all(m >= np.minimum(u, v)) and np.all(m <= np.maximum(u, v))


def test_compose_shape_mismatch():
    a = random_model((4, 6, 3), seed=0)
    alphas = init_alphas(a)
    alphas["layers.0.weight"] = np.zeros((2, 2))
    with pytest.raises(DimensionError):
        np_compose(a, a, alphas)


# ------------------------------------------------------------------- gradients

@pytest.mark.parametrize("bn", [False, True])
def test_alpha_gradient_matches_finite_differences(bn):
    for seed in range(4):
        rng = make_rng(200 + seed)
        widths = (4, 7, 6, 3)
        a = random_model(widths, (bn, bn), seed=seed)
        b = random_model(widths, (bn, bn), seed=seed + 50)
        alphas = {k: rng.standard_normal(v.shape) for k, v in a.trainable()}
        x, y = rng.standard_normal((8, 4)), rng.integers(0, 3, 8)
        _, grads = np_loss_and_grad(a, b, alphas, x, y)
        for name, pre in alphas.items():
            fd = central_difference(lambda: np_loss_and_grad(a, b, alphas, x, y)[0], pre)
            if max(np.abs(fd).max(), np.abs(grads[name]).max()) < 1e-9:
                continue  # a bias feeding BatchNorm has no effect on the loss
            assert relative_error(grads[name], fd) <= 1e-4, name


def test_identical_endpoints_have_zero_alpha_gradient():
    a = random_model((4, 6, 3), (True,), seed=9)
    rng = make_rng(10)
    _, grads = np_loss_and_grad(a, a.copy(), init_alphas(a), rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
    assert all(not np.any(g) for g in grads.values())


# ---------------------------------------------------------------- np_optimize

def test_np_optimize_identical_models_keeps_init(blob_task, trained_bn_pair):
    a, _ = trained_bn_pair
    alphas, _, report = np_optimize(a, a.copy(), blob_task[0], MergeConfig(epochs=2))
    assert all(not np.any(v) for v in alphas.values())
    assert report.invariant_violations == 0


def test_np_optimize_zero_epochs_is_uniform_with_reset(blob_task, trained_bn_pair):
    a, b = trained_bn_pair
    train = blob_task[0]
    _, merged, _ = np_optimize(a, b, train, MergeConfig(epochs=0))
    expected = bn_reset(uniform_merge(a, b, 0.5), train, 256)
    assert max_gap(merged, expected) <= 1e-12


def test_np_optimize_learns_grid_search_optimum():
    # a single weight differs between the two models, so the merge has one
    # effective coefficient; its best value is found by grid search
    rng = make_rng(11)
    x = rng.random((200, 1)) * 3
    p0 = 1 / (1 + np.exp(-1.5 * x[:, 0]))
    y = (rng.random(200) > p0).astype(int)
    data = LabeledDataset(x, y, 2)
    spec = MlpSpec((1, 1, 2))
    a, b = init_params(spec, 0), init_params(spec, 0)
    for m, w in ((a, 3.0), (b, -1.0)):
        m.layers[0].weight[:] = 1.0
        m.layers[0].bias[:] = 0.0
        m.layers[1].weight[:] = [[w], [0.0]]
        m.layers[1].bias[:] = 0.0

    def loss_at(t):
        return evaluate(uniform_merge(a, b, t), data)[1]

    grid = np.round(np.arange(0, 1001) / 1000, 3)
    best = grid[int(np.argmin([loss_at(t) for t in grid]))]
    assert 0.05 < best < 0.95
    cfg = MergeConfig(learning_rate=0.05, epochs=1500, batch_size=200, check_invariants=False)
    alphas, _, _ = np_optimize(a, b, data, cfg)
    learned = float(sigmoid(alphas["layers.1.weight"])[0, 0])
    assert abs(learned - best) <= 0.01


def test_np_optimize_freezes_endpoints_and_keeps_invariants(blob_task, trained_bn_pair):
    a, b = trained_bn_pair
    before = [v.copy() for m in (a, b) for _, v in m.tensors()]
    alphas, merged, report = np_optimize(a, b, blob_task[0], MergeConfig(epochs=3, seed=1),
                                         eval_data=blob_task[1])
    after = [v for m in (a, b) for _, v in m.tensors()]
    assert all(np.array_equal(u, v) for u, v in zip(before, after))
    assert all(v.flags.writeable for v in after)
    assert report.invariant_violations == 0
    assert all(np.all(np.isfinite(v)) for v in alphas.values())
    s = np.concatenate([sigmoid(v).ravel() for v in alphas.values()])
    assert np.all((s > 0) & (s < 1))
    assert len(report.loss_curve) == 3
    assert 0 <= report.acc <= 1 and 0 <= report.pre_acc <= 1


def test_np_optimize_loss_decreases(blob_task, trained_pair):
    a, b = trained_pair
    bp = apply_alignment(b, align_permute(a, b, blob_task[0]))
    start_loss = evaluate(uniform_merge(a, bp), blob_task[0])[1]
    _, merged, report = np_optimize(a, bp, blob_task[0], MergeConfig(seed=2))
    assert evaluate(merged, blob_task[0])[1] < start_loss
    assert report.loss_curve[-1] < report.loss_curve[0]


def test_frozen_endpoints_reject_writes(trained_pair):
    a, _ = trained_pair
    saved = _frozen(a)
    try:
        with pytest.raises(ValueError):
            a.layers[0].weight[0, 0] = 1.0
    finally:
        _thaw(saved)
    assert a.layers[0].weight.flags.writeable


def test_np_optimize_rejects_bad_input(trained_pair):
    a, b = trained_pair
    empty = LabeledDataset(np.zeros((0, 6)), np.zeros(0, dtype=int), 4)
    with pytest.raises(ValueError):
        np_optimize(a, b, empty)
    with pytest.raises(DimensionError):
        np_optimize(a, random_model((6, 20, 4)), empty)


def test_np_stays_closer_to_average_than_finetune(blob_task, trained_pair):
    a, b = trained_pair
    train = blob_task[0]
    bp = apply_alignment(b, align_permute(a, b, train))
    avg = uniform_merge(a, bp)
    for seed in range(3):
        cfg = MergeConfig(seed=seed)
        _, merged, _ = np_optimize(a, bp, train, cfg)
        tuned = finetune(avg, train, cfg)

        def dist(m):
            return np.sqrt(sum(((u - v) ** 2).sum() for (_, u), (_, v) in zip(m.trainable(), avg.trainable())))
        assert dist(merged) <= dist(tuned)


def test_alpha_summary():
    mean, std, mid = alpha_summary({"w": np.array([0.0, 0.0, 50.0, -50.0])})
    assert mean == pytest.approx(0.5) and mid == 0.5 and std == pytest.approx(np.sqrt(0.125))


# ------------------------------------------------------------------- finetune

def test_finetune_zero_epochs_is_identity(trained_pair, blob_task):
    a, _ = trained_pair
    assert tensors_equal(finetune(a, blob_task[0], MergeConfig(epochs=0)), a)


def test_finetune_deterministic(trained_bn_pair, blob_task):
    a, b = trained_bn_pair
    start = uniform_merge(a, b)
    cfg = MergeConfig(epochs=2, seed=4)
    assert tensors_equal(finetune(start, blob_task[0], cfg), finetune(start, blob_task[0], cfg))


def test_finetune_recovers_base_accuracy(trained_pair, blob_task):
    a, b = trained_pair
    train, test = blob_task
    start = uniform_merge(a, apply_alignment(b, align_permute(a, b, train)))
    tuned = finetune(start, train, MergeConfig(epochs=10))
    assert evaluate(tuned, test)[0] >= min(evaluate(a, test)[0], evaluate(b, test)[0])


# ------------------------------------------------------------------- ensemble

def test_ensemble_of_duplicates(trained_pair, blob_task):
    a, _ = trained_pair
    assert ensemble_eval([a, a], blob_task[1]) == evaluate(a, blob_task[1])[0]


def test_ensemble_of_opposites_ties_to_lowest_class():
    a = random_model((3, 4, 3), seed=1)
    neg = a.copy()
    neg.layers[-1].weight *= -1
    neg.layers[-1].bias *= -1
    x = make_rng(2).standard_normal((10, 3))
    z = (forward(a, x)[0] + forward(neg, x)[0]) / 2
    assert np.all(z == 0)
    ds = LabeledDataset(x, np.zeros(10, dtype=int), 3)
    assert ensemble_eval([a, neg], ds) == 1.0


def test_ensemble_three_models_hand_average():
    # single-layer identity hidden maps so logits equal chosen output biases
    spec = MlpSpec((1, 1, 3))
    biases = [[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.5]]
    models = []
    for bvec in biases:
        m = init_params(spec, 0)
        m.layers[0].weight[:] = 0
        m.layers[0].bias[:] = 0
        m.layers[1].weight[:] = 0
        m.layers[1].bias[:] = bvec
        models.append(m)
    # mean logits (1/3, 1, 5/6): every sample predicts class 1
    ds = LabeledDataset(np.zeros((4, 1)), np.array([1, 1, 2, 0]), 3)
    assert ensemble_eval(models, ds) == 0.5


def test_ensemble_rejects_empty():
    with pytest.raises(ValueError):
        ensemble_eval([], None)


# -------------------------------------------------------------------- barrier

def test_self_barrier_is_zero(trained_bn_pair, blob_task):
    a, _ = trained_bn_pair
    res = barrier(a, a, blob_task[1], num_points=5)
    assert abs(res.loss_barrier) <= 1e-9 and abs(res.acc_barrier) <= 1e-9
    assert res.max_loss == pytest.approx(res.losses[0], abs=1e-9)


def test_barrier_curve_shape(trained_pair, blob_task):
    a, b = trained_pair
    res = barrier(a, b, blob_task[1], num_points=11)
    assert len(res.alphas) == len(res.losses) == len(res.accuracies) == 11
    assert res.alphas[0] == 0 and res.alphas[-1] == 1 and np.all(np.diff(res.alphas) > 0)
    assert res.max_loss >= max(res.losses[0], res.losses[-1])


def test_barrier_midpoint_below_endpoints(trained_pair, blob_task):
    a, b = trained_pair
    res = barrier(a, b, blob_task[1], num_points=3)
    assert res.accuracies[1] <= min(res.accuracies[0], res.accuracies[2])


def test_barrier_needs_three_points(trained_pair, blob_task):
    with pytest.raises(ValueError):
        barrier(*trained_pair, blob_task[1], num_points=2)


def test_report_serialization():
    r = MergeReport("np", "permute", 3, "5/class", acc=0.5, alpha_mean=0.5, alpha_std=0.1)
    assert MergeReport.from_dict(r.to_dict()) == r
    assert r.csv_row() == ["np", "permute", 3, "5/class", 0.5, None, 0.5, 0.1]

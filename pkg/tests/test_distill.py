import numpy as np
import pytest

from fmwiss.config import TrainConfig
from fmwiss.coseg import PseudoLabelSet
from fmwiss.distill import (
    SgdState,
    combine_supervision,
    evaluate_model,
    extend_student,
    grid_shape,
    init_student,
    loss_bce_all,
    loss_bce_all_grad,
    one_hot_hard,
    pseudo_planes,
    read_student_checkpoint,
    run_incremental_step,
    student_backward,
    student_forward,
    taxonomy_digest,
    train_base,
    write_student_checkpoint,
)
from fmwiss.errors import FormatError, MissingPseudoLabels, ShapeMismatch
from fmwiss.kernels import sigmoid
from fmwiss.label_space import build_taxonomy, split_dataset
from fmwiss.memory_paste import MemoryBank
from fmwiss.synthetic import build_synthetic_dataset
from oracles import bce_loop, central_diff

TAX = build_taxonomy([1, 2], [[3]])


# ---------------------------------------------------------------------------
# hard labels and supervision mixing


def test_one_hot_basic_and_tie():
    assert one_hot_hard(np.array([[[0.1, 0.9]]])).tolist() == [[[0.0, 1.0]]]
    assert one_hot_hard(np.array([[[0.5, 0.5]]])).tolist() == [[[1.0, 0.0]]]


def test_one_hot_matches_argmax_oracle():
    rng = np.random.default_rng(0)
    probs = rng.random((2, 2, 4))
    hard = one_hot_hard(probs)
    for i in range(2):
        for j in range(2):
            assert hard[i, j].sum() == 1.0
            assert hard[i, j, int(np.argmax(probs[i, j]))] == 1.0


def test_one_hot_rows_sum_to_one_and_scale_invariant():
    rng = np.random.default_rng(1)
    probs = rng.random((5, 5, 6))
    hard = one_hot_hard(probs)
    assert np.all(hard.sum(axis=-1) == 1.0)
    assert np.array_equal(one_hot_hard(3.7 * probs), hard)


def test_combine_supervision_hand_arithmetic():
    # teacher: new class wins argmax at the only pixel with prob 0.8
    teacher = np.array([[[0.1, 0.2, 0.3, 0.8]]])
    old = np.array([[[0.6, 0.5, 0.4]]])
    q = combine_supervision(teacher, old, TAX, 1, 0.5, 0.9)
    assert q[0, 0, 3] == pytest.approx(0.5 * 1.0 + 0.5 * 0.8, abs=1e-9)  # 0.9
    assert q[0, 0, 0] == pytest.approx(0.9 * 0.6 + 0.1 * 0.1, abs=1e-9)
    # beta mixing: old 0.6, teacher 0.2 -> 0.56
    teacher2 = np.array([[[0.9, 0.2, 0.3, 0.1]]])
    old2 = np.array([[[0.3, 0.6, 0.4]]])
    q2 = combine_supervision(teacher2, old2, TAX, 1, 0.5, 0.9)
    assert q2[0, 0, 1] == pytest.approx(0.56, abs=1e-9)


def test_combine_supervision_alpha_one_is_hard():
    rng = np.random.default_rng(2)
    teacher = rng.random((3, 3, 4))
    old = rng.random((3, 3, 3))
    q = combine_supervision(teacher, old, TAX, 1, 1.0, 0.9)
    hard = one_hot_hard(teacher)
    assert np.array_equal(q[..., 3:], hard[..., 3:])


def test_combine_supervision_fuzzed_in_unit_interval():
    rng = np.random.default_rng(3)
    for _ in range(50):
        teacher = rng.random((2, 2, 4))
        old = rng.random((2, 2, 3))
        alpha, beta = rng.random(), rng.random()
        q = combine_supervision(teacher, old, TAX, 1, alpha, beta)
        assert np.all(q >= 0.0) and np.all(q <= 1.0)


def test_combine_supervision_shape_checks():
    with pytest.raises(ShapeMismatch):
        combine_supervision(np.zeros((2, 2, 5)), np.zeros((2, 2, 3)), TAX, 1, 0.5, 0.9)
    with pytest.raises(ShapeMismatch):
        combine_supervision(np.zeros((2, 2, 4)), np.zeros((2, 2, 2)), TAX, 1, 0.5, 0.9)


def test_loss_bce_all_values_and_grad():
    p = np.full((1, 1, 1), 0.5)
    assert loss_bce_all(p, p) == pytest.approx(np.log(2.0), abs=1e-12)
    rng = np.random.default_rng(4)
    probs = rng.uniform(0.05, 0.95, size=(2, 2, 3))
    q = rng.random((2, 2, 3))
    assert loss_bce_all(probs, q) == pytest.approx(bce_loop(probs, q), abs=1e-6)
    analytic = loss_bce_all_grad(probs, q)
    fd = central_diff(lambda: loss_bce_all(probs, q), probs, h=1e-4)
    assert np.allclose(analytic, fd, rtol=1e-4, atol=1e-10)


# ---------------------------------------------------------------------------
# student mechanics


def test_student_shapes_and_determinism():
    model = init_student((8, 10), 3, np.random.default_rng(5))
    x = np.random.default_rng(6).random((2, 32, 32, 3))
    l1, feats, _ = student_forward(model, x)
    l2, _, _ = student_forward(model, x)
    assert l1.shape == (2, 8, 8, 3)
    assert feats.shape == (2, 8, 8, 10)
    assert np.array_equal(l1, l2)
    assert grid_shape(32, 32) == (8, 8)
    assert grid_shape(64, 48) == (16, 12)


def test_student_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    model = init_student((6, 8), 3, rng)
    x = rng.random((1, 16, 16, 3))
    q = rng.random((1, 4, 4, 3))

    def loss():
        logits, _, _ = student_forward(model, x)
        return loss_bce_all(sigmoid(logits), q)

    logits, _, cache = student_forward(model, x)
    p = sigmoid(logits)
    grads = student_backward(model, cache, (p - q) / q.size)
    eps = 1e-6
    for name, arr in model.param_items():
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = loss()
        arr[idx] = orig - eps
        lo = loss()
        arr[idx] = orig
        assert (hi - lo) / (2 * eps) == pytest.approx(grads[name][idx], rel=1e-4, abs=1e-9), name


def test_extend_student_preserves_old_channels():
    model = init_student((6, 8), 3, np.random.default_rng(8))
    bigger = extend_student(model, 2)
    assert bigger.out_channels == 5
    x = np.random.default_rng(9).random((1, 16, 16, 3))
    l_old, _, _ = student_forward(model, x)
    l_new, _, _ = student_forward(bigger, x)
    assert np.allclose(l_old, l_new[..., :3], atol=1e-12)
    assert np.all(l_new[..., 3:] == 0.0)  # zero-init channels


def test_sgd_step_matches_manual_update():
    rng = np.random.default_rng(10)
    w = rng.normal(size=(3, 3))
    g = rng.normal(size=(3, 3))
    opt = SgdState(lr=0.1, momentum=0.9, weight_decay=0.01)
    expect_v = g + 0.01 * w
    expect_w = w - 0.1 * expect_v
    opt.step([("w", w)], {"w": g})
    assert np.allclose(w, expect_w, atol=1e-12)
    g2 = rng.normal(size=(3, 3))
    expect_v2 = 0.9 * expect_v + g2 + 0.01 * w
    expect_w2 = w - 0.1 * expect_v2
    opt.step([("w", w)], {"w": g2})
    assert np.allclose(w, expect_w2, atol=1e-12)


def test_pseudo_planes_downsamples_and_fills_missing():
    masks = {3: np.ones((8, 8), dtype=np.uint8)}
    pls = PseudoLabelSet("x", masks, "fused")
    planes = pseudo_planes(pls, [3, 4], 4, 4)
    assert planes.shape == (4, 4, 2)
    assert planes[..., 0].all()
    assert not planes[..., 1].any()


# ---------------------------------------------------------------------------
# training loops on a tiny synthetic world


def _tiny_setup(seed=3):
    data = build_synthetic_dataset(seed, TAX, n_base=10, n_step=8, n_val=6,
                                   overlap_frac=0.5)
    cfg = TrainConfig(epochs=2, warmup_epochs=1, lr=0.05, batch=4, seed=seed, channels=(6, 8))
    gt_ids = {e.image_id for e in data.train_index if e.has_pixel_gt}
    base_roster = [i for i in split_dataset(data.train_index, TAX, 0, "overlap") if i in gt_ids]
    step_roster = split_dataset(data.train_index, TAX, 1, "overlap")
    pseudo = {i: PseudoLabelSet(i, {3: (data.world.labels(i) == 3).astype(np.uint8)}, "fused") for i in step_roster}
    return data, cfg, base_roster, step_roster, pseudo


def test_train_base_runs_and_logs():
    data, cfg, base_roster, _, _ = _tiny_setup()
    student, metrics = train_base(TAX, base_roster, data.image, data.labels, cfg, 3)
    assert student.out_channels == 3
    assert len(metrics) == cfg.epochs
    assert all(set(m) == {"epoch", "l_new", "l_dcl", "l_old", "l_all", "total"} for m in metrics)
    assert metrics[1]["l_all"] < metrics[0]["l_all"]


def test_warmup_only_leaves_student_at_init():
    data, cfg, base_roster, step_roster, pseudo = _tiny_setup()
    prev, _ = train_base(TAX, base_roster, data.image, data.labels, cfg, 3)
    cfg_warm = TrainConfig(epochs=2, warmup_epochs=2, lr=0.05, batch=4, seed=3, channels=(6, 8))
    student, teacher, metrics = run_incremental_step(prev, TAX, 1, step_roster, data.image, pseudo.get,
                                                     MemoryBank(0, frozenset({1, 2})), cfg_warm, 3)
    init = extend_student(prev, 1)
    for (_, a), (_, b) in zip(student.param_items(), init.param_items()):
        assert np.array_equal(a, b)
    assert all(m["l_all"] == 0.0 for m in metrics)


def test_incremental_step_deterministic_and_prev_frozen():
    data, cfg, base_roster, step_roster, pseudo = _tiny_setup()
    prev, _ = train_base(TAX, base_roster, data.image, data.labels, cfg, 3)
    snapshot = [np.array(a, copy=True) for _, a in prev.param_items()]
    outs = []
    for _ in range(2):
        student, teacher, metrics = run_incremental_step(prev, TAX, 1, step_roster, data.image, pseudo.get,
                                                         MemoryBank(0, frozenset({1, 2})), cfg, 3)
        outs.append((student, teacher, metrics))
    for (_, a), (_, b) in zip(outs[0][0].param_items(), outs[1][0].param_items()):
        assert np.array_equal(a, b)
    for (_, a), (_, b) in zip(outs[0][1].param_items(), outs[1][1].param_items()):
        assert np.array_equal(a, b)
    assert outs[0][2] == outs[1][2]
    for before, (_, after) in zip(snapshot, prev.param_items()):
        assert np.array_equal(before, after)


def test_incremental_step_missing_pseudo_labels():
    data, cfg, base_roster, step_roster, _ = _tiny_setup()
    prev, _ = train_base(TAX, base_roster, data.image, data.labels, cfg, 3)
    with pytest.raises(MissingPseudoLabels):
        run_incremental_step(prev, TAX, 1, step_roster, data.image, lambda _i: None,
                             MemoryBank(0, frozenset({1, 2})), cfg, 3)


def test_evaluate_model_reports_groups():
    data, cfg, base_roster, _, _ = _tiny_setup()
    student, _ = train_base(TAX, base_roster, data.image, data.labels, cfg, 3)
    report = evaluate_model(student, TAX, 0, data.val_ids, data.image, data.labels)
    assert set(report) == {"base", "all"}
    assert 0.0 <= report["base"]["mean"] <= 1.0


# ---------------------------------------------------------------------------
# checkpoints


def test_student_checkpoint_round_trip(tmp_path):
    model = init_student((6, 8), 4, np.random.default_rng(11))
    path = tmp_path / "s.fmws"
    write_student_checkpoint(path, model, TAX)
    back, digest = read_student_checkpoint(path, (6, 8))
    assert digest == taxonomy_digest(TAX)
    assert back.out_channels == 4
    for (_, a), (_, b) in zip(model.param_items(), back.param_items()):
        assert np.allclose(a, b, atol=1e-6)
    p2 = tmp_path / "s2.fmws"
    write_student_checkpoint(p2, back, TAX)
    assert path.read_bytes() == p2.read_bytes()


def test_student_checkpoint_detects_bad_magic_and_channels(tmp_path):
    model = init_student((6, 8), 4, np.random.default_rng(12))
    path = tmp_path / "s.fmws"
    write_student_checkpoint(path, model, TAX)
    with pytest.raises(FormatError):
        read_student_checkpoint(path, (7, 9))
    data = bytearray(path.read_bytes())
    data[:4] = b"ZZZZ"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        read_student_checkpoint(path, (6, 8))


def test_taxonomy_digest_sensitivity():
    assert taxonomy_digest(TAX) == taxonomy_digest(build_taxonomy([1, 2], [[3]]))
    assert taxonomy_digest(TAX) != taxonomy_digest(build_taxonomy([1, 2], [[4]]))
    assert taxonomy_digest(TAX) != taxonomy_digest(build_taxonomy([1, 2, 3], []))

import copy
from dataclasses import replace

import numpy as np
import pytest

from crtlab import metrics as M
from crtlab import trainer as TR
from crtlab.data import generate_shapes
from crtlab.errors import NonFiniteError
from crtlab.model import MlpModel
from crtlab.regularizers import RegularizerConfig
from crtlab.rng import substream
from crtlab.threats import ThreatModel

LINF = ThreatModel("linf", 0.08, name="linf", introduced_at=0)
FLOW = ThreatModel("spatial_flow", 0.5, name="flow", introduced_at=1)
SHIFT = ThreatModel("intensity_shift", 0.1, name="shift", introduced_at=2)


@pytest.fixture(scope="module")
def tiny():
    return generate_shapes(0, 200, split="train"), generate_shapes(0, 100, split="test")


def small_cfg(**kw):
    base = dict(epochs_initial=3, epochs_finetune=2, batch_size=25, hidden=(16,), seed=0)
    base.update(kw)
    return TR.TrainConfig(**base)


def params_bytes(model):
    return [p.data.tobytes() for p in model.parameters()]


def test_knowledge_set_grows_monotonically():
    ks = TR.KnowledgeSet([LINF, FLOW, SHIFT])
    assert [tm.label for tm in ks.at(0)] == ["linf"]
    assert [tm.label for tm in ks.at(1)] == ["linf", "flow"]
    for t in range(4):
        assert set(map(id, ks.at(t))) <= set(map(id, ks.at(t + 1)))
    assert ks.newest(2) is SHIFT and ks.times == [0, 1, 2]


def test_knowledge_set_validation():
    with pytest.raises(ValueError, match="unique"):
        TR.KnowledgeSet([LINF, replace(FLOW, name="linf")])
    with pytest.raises(ValueError, match="non-decreasing"):
        TR.KnowledgeSet([FLOW, LINF])
    with pytest.raises(ValueError):
        TR.KnowledgeSet([FLOW]).newest(0)


def _running(errs):
    known = [ThreatModel("linf", 0.1, name=n) for n in errs]
    run = TR.RunningErr()
    for tm, e in zip(known, errs.values()):
        run.update(tm.label, e)
    return run, known


@pytest.mark.parametrize(
    "errs,expected",
    [({"A": 0.5, "B": 0.5}, [0.5, 0.5]), ({"A": 0.3, "B": 0.1}, [0.75, 0.25]), ({"A": 0.0, "B": 0.0}, [0.5, 0.5])],
)
def test_croce_probabilities(errs, expected):
    run, known = _running(errs)
    probs = TR.croce_probabilities(run, known)
    np.testing.assert_allclose(probs, expected, rtol=1e-12)
    assert probs.sum() == pytest.approx(1.0)


def test_croce_with_no_history_is_uniform():
    known = [LINF, FLOW, SHIFT]
    np.testing.assert_allclose(TR.croce_probabilities(TR.RunningErr(), known), [1 / 3] * 3)


def test_running_error_window_is_arithmetic_mean():
    run = TR.RunningErr(window=3)
    for v in (10.0, 1.0, 2.0, 3.0):
        run.update("a", v)
    assert run.value("a") == 2.0
    with pytest.raises(ValueError):
        run.update("a", -1.0)


def test_equal_running_errors_select_uniformly():
    run, known = _running({"A": 0.7, "B": 0.7, "C": 0.7})
    rng = np.random.default_rng(0)
    picks = [TR.select_attack_croce(run, known, rng).label for _ in range(10_000)]
    for name in "ABC":
        assert abs(picks.count(name) / 10_000 - 1 / 3) <= 0.02


def _batch(seed=0, n=20):
    ds = generate_shapes(seed, n)
    model = MlpModel.init([144, 16, 4], substream(seed, "init"))
    return model, ds.images, ds.labels


def test_single_attack_objectives_coincide():
    model, x, y = _batch()
    vals = [
        TR.batch_objective_max(model, x, y, [LINF], np.random.default_rng(1)).item(),
        TR.batch_objective_avg(model, x, y, [LINF], np.random.default_rng(1)).item(),
        TR.batch_objective_random(model, x, y, [LINF], np.random.default_rng(1))[0].item(),
    ]
    assert vals[0] == vals[1] == vals[2]


def test_max_and_avg_against_independent_recomputation():
    model, x, y = _batch()
    known = [LINF, FLOW]
    per = [t.data for t in TR.attacked_losses(model, x, y, known, np.random.default_rng(2))]
    # recompute each attack separately with the same stream position
    stream = np.random.default_rng(2)
    first = TR.attacked_losses(model, x, y, [LINF], stream)[0].data
    second = TR.attacked_losses(model, x, y, [FLOW], stream)[0].data
    np.testing.assert_array_equal(per[0], first)
    np.testing.assert_array_equal(per[1], second)
    mx = TR.batch_objective_max(model, x, y, known, np.random.default_rng(2)).item()
    avg = TR.batch_objective_avg(model, x, y, known, np.random.default_rng(2)).item()
    assert mx == pytest.approx(np.maximum(first, second).mean(), abs=1e-14)
    assert avg == pytest.approx(((first + second) / 2).mean(), abs=1e-14)
    assert mx >= avg


def test_max_dominates_avg_on_every_batch():
    for seed in range(8):
        model, x, y = _batch(seed)
        known = [LINF, FLOW, SHIFT]
        mx = TR.batch_objective_max(model, x, y, known, np.random.default_rng(seed)).item()
        avg = TR.batch_objective_avg(model, x, y, known, np.random.default_rng(seed)).item()
        assert mx >= avg


def test_max_objective_gradient_flows_through_selected_attack():
    model, x, y = _batch()
    loss = TR.batch_objective_max(model, x, y, [LINF, FLOW], np.random.default_rng(0))
    from crtlab import tensor as T

    T.backward(loss)
    assert all(p.grad is not None and np.any(p.grad) for p in model.parameters())


def _fit_hold(tiny):
    return TR.split_holdout(tiny[0], small_cfg())


@pytest.mark.parametrize("mode", list(TR.STRATEGIES) + ["single"])
def test_zero_budget_training_equals_clean_training(mode, tiny):
    cfg = small_cfg()
    fit, hold = _fit_hold(tiny)
    zeros = [ThreatModel(k, 0.0, name=k) for k in ("linf", "spatial_flow", "intensity_shift")]
    lr = lambda e: 0.05  # noqa: E731
    clean_model, clean_hist = TR.run_epochs(TR.init_model(tiny[0], cfg), fit, hold, [], cfg, "clean", 2, lr, 0, (12, 12))
    model, hist = TR.run_epochs(TR.init_model(tiny[0], cfg), fit, hold, zeros, cfg, mode, 2, lr, 0, (12, 12))
    if "AVG" in mode:
        # (a + a + a) / 3 is not bit-exact, so averaging modes agree to rounding
        np.testing.assert_allclose([h["train_loss"] for h in hist], [h["train_loss"] for h in clean_hist], rtol=1e-12)
        for p, q in zip(model.parameters(), clean_model.parameters()):
            np.testing.assert_allclose(p.data, q.data, rtol=1e-9, atol=1e-12)
    else:
        assert [h["train_loss"] for h in hist] == [h["train_loss"] for h in clean_hist]
        assert params_bytes(model) == params_bytes(clean_model)


def test_regularizer_changes_trajectory_after_first_batch(tiny):
    fit, hold = _fit_hold(tiny)
    lr = lambda e: 0.05  # noqa: E731
    out = []
    for lam in (0.0, 0.5):
        cfg = small_cfg(regularizer=RegularizerConfig("ALR", lam=lam), batch_size=len(fit.labels))
        model, _ = TR.run_epochs(TR.init_model(tiny[0], cfg), fit, hold, [LINF], cfg, "single", 1, lr, 0, (12, 12))
        out.append(params_bytes(model))
    assert out[0] != out[1]


def test_ft_single_with_one_attack_matches_initial_mode(tiny):
    cfg = small_cfg()
    fit, hold = _fit_hold(tiny)
    lr = lambda e: 0.01  # noqa: E731
    a, ha = TR.run_epochs(TR.init_model(tiny[0], cfg), fit, hold, [LINF], cfg, "FT_SINGLE", 2, lr, 1, (12, 12))
    b, hb = TR.run_epochs(TR.init_model(tiny[0], cfg), fit, hold, [LINF], cfg, "single", 2, lr, 1, (12, 12))
    assert ha == hb and params_bytes(a) == params_bytes(b)


def test_best_epoch_has_the_highest_holdout_score(tiny):
    cfg = small_cfg(epochs_initial=5)
    model, hist = TR.train_initial(tiny[0], LINF, cfg)
    scores = [h["score"] for h in hist]
    assert model.metadata["epoch"] == int(np.argmax(scores))
    assert all(scores[model.metadata["epoch"]] >= s for s in scores)


def test_epoch_callback_sees_every_epoch(tiny):
    seen = []
    TR.train_initial(tiny[0], LINF, small_cfg(), epoch_callback=lambda e, m: seen.append(e))
    assert seen == [0, 1, 2]


def test_initial_training_lr_follows_schedule(tiny):
    _, hist = TR.train_initial(tiny[0], None, small_cfg(epochs_initial=4))
    assert [h["lr"] for h in hist] == [0.1, 0.1, 0.01, 0.001]


def test_finetune_lr_is_constant(tiny):
    cfg = small_cfg(lr_finetune=0.003)
    m0, _ = TR.train_initial(tiny[0], LINF, cfg)
    _, hist = TR.finetune(m0, TR.KnowledgeSet([LINF, FLOW]), 1, tiny[0], cfg)
    assert [h["lr"] for h in hist] == [0.003, 0.003]


@pytest.mark.parametrize("strategy", TR.STRATEGIES)
def test_every_strategy_runs_and_reports(strategy, tiny):
    cfg = small_cfg(strategy=strategy, epochs_initial=2, regularizer=RegularizerConfig("VR", inner_steps=1))
    ks = TR.KnowledgeSet([LINF, FLOW])
    m0, _ = TR.train_initial(tiny[0], LINF, cfg)
    m1, hist = TR.finetune(m0, ks, 1, tiny[0], cfg)
    expected_epochs = cfg.epochs_initial if strategy.startswith("SCRATCH") else cfg.epochs_finetune
    assert len(hist) == expected_epochs
    assert m1 is not m0
    metrics = TR.evaluate(m1, ks, 1, tiny[1], cfg.seed, cfg.label)
    assert metrics.union_known <= min(metrics.attack_acc.values()) + 1e-15
    assert metrics.union_all <= metrics.union_known
    assert metrics.avg_known == pytest.approx(np.mean([metrics.attack_acc[n] for n in ("linf", "flow")]), abs=1e-12)


def test_finetune_does_not_mutate_its_input(tiny):
    cfg = small_cfg()
    m0, _ = TR.train_initial(tiny[0], LINF, cfg)
    before = params_bytes(m0)
    TR.finetune(m0, TR.KnowledgeSet([LINF, FLOW]), 1, tiny[0], cfg)
    assert params_bytes(m0) == before


def test_evaluate_workers_do_not_change_results(tiny):
    cfg = small_cfg()
    ks = TR.KnowledgeSet([LINF, FLOW, SHIFT])
    m0, _ = TR.train_initial(tiny[0], LINF, cfg)
    a = TR.evaluate(m0, ks, 2, tiny[1], 0, "x")
    b = TR.evaluate(m0, ks, 2, tiny[1], 0, "x", workers=3)
    assert a == b


def test_evaluate_known_set_is_exactly_k_of_t(tiny):
    m0, _ = TR.train_initial(tiny[0], LINF, small_cfg())
    ks = TR.KnowledgeSet([LINF, FLOW])
    at0 = TR.evaluate(m0, ks, 0, tiny[1], 0, "x")
    assert at0.avg_known == at0.attack_acc["linf"]
    assert at0.avg_all == pytest.approx((at0.attack_acc["linf"] + at0.attack_acc["flow"]) / 2)


def test_one_attack_timeline_equals_initial_training(tiny):
    cfg = small_cfg()
    [(t, model, metrics, hist)] = TR.run_timeline(TR.KnowledgeSet([LINF]), tiny[0], tiny[1], cfg)
    ref, ref_hist = TR.train_initial(tiny[0], LINF, cfg)
    assert t == 0 and hist == ref_hist and params_bytes(model) == params_bytes(ref)
    assert metrics.strategy == "initial"


def test_adding_a_later_attack_leaves_earlier_steps_unchanged(tiny):
    cfg = small_cfg()
    two = TR.run_timeline(TR.KnowledgeSet([LINF, FLOW]), tiny[0], tiny[1], cfg)
    three = TR.run_timeline(TR.KnowledgeSet([LINF, FLOW, SHIFT]), tiny[0], tiny[1], cfg)
    for (_, ma, xa, _), (_, mb, xb, _) in zip(two, three):
        assert params_bytes(ma) == params_bytes(mb)
        assert xa.attack_acc["linf"] == xb.attack_acc["linf"]
        assert xa.attack_acc["flow"] == xb.attack_acc["flow"]


def test_timeline_is_deterministic(tiny):
    cfg = small_cfg(strategy="FT_CROCE")
    ks = TR.KnowledgeSet([LINF, FLOW])
    a = TR.run_timeline(ks, tiny[0], tiny[1], cfg)
    b = TR.run_timeline(ks, tiny[0], tiny[1], cfg)
    for (_, ma, xa, ha), (_, mb, xb, hb) in zip(a, b):
        assert params_bytes(ma) == params_bytes(mb) and ha == hb
        assert replace(xa, wall_time=0) == replace(xb, wall_time=0)


def test_divergence_reports_where_it_happened(tiny):
    cfg = small_cfg(base_lr_initial=1e150, weight_decay=0.0)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError, match=r"t=0 epoch=\d+ batch=\d+"):
        TR.train_initial(tiny[0], None, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(strategy="FT_MIN")
    with pytest.raises(ValueError):
        TR.TrainConfig(epochs_initial=0)
    assert TR.TrainConfig(regularizer=RegularizerConfig("ALR")).label == "FT_SINGLE+ALR"


@pytest.mark.slow
def test_clean_training_reaches_high_accuracy():
    train, test = generate_shapes(0, 2000, split="train"), generate_shapes(0, 500, split="test")
    model, _ = TR.train_initial(train, None, TR.TrainConfig(seed=0))
    assert np.mean(M.predict(model, test.images) == test.labels) >= 0.95


@pytest.mark.slow
def test_linf_adversarial_training_is_robust():
    train, test = generate_shapes(0, 2000, split="train"), generate_shapes(0, 500, split="test")
    model, _ = TR.train_initial(train, LINF, TR.TrainConfig(seed=0))
    assert M.robust_accuracy(model, LINF, test, rng=np.random.default_rng(0)) >= 0.6

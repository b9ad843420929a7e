import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpfpl.config import RunConfig
from dpfpl.federation import run_training
from dpfpl.mia import (
    AttackDataset,
    UnbalancedError,
    _best_threshold,
    attack,
    binomial_ci,
    fit_attack,
    query_records,
    report,
    shadow_configs,
    shadow_dataset,
    train_shadows,
    validate_report,
)
from dpfpl.numeric import RngStream

TINY = RunConfig(num_clients=2, rounds=4, per_class=10, noise=False, batch_size=8)


def synthetic(n_per, seed, shift=0.0, classes=2):
    rng = RngStream(seed).gen
    confs, labels, member = [], [], []
    for c in range(classes):
        for is_in in (1, 0):
            p = np.clip(rng.uniform(0.3, 0.9, n_per) + shift * is_in, 0, 1)
            confs.extend(np.stack([p, 1 - p], 1))
            labels.append(np.full(n_per, c))
            member.append(np.full(n_per, is_in))
    n = len(confs)
    return AttackDataset(tuple(confs), np.concatenate(labels), np.concatenate(member), np.zeros(n, int))


@pytest.fixture(scope="module")
def tiny_target():
    return run_training(TINY)


@pytest.fixture(scope="module")
def two_shadows():
    return train_shadows(TINY, 2)


def test_minimal_shadow_ensemble_is_balanced(two_shadows):
    data = shadow_dataset(two_shadows)
    assert data.is_balanced()
    members = sum(len(c.shard) for r in two_shadows for c in r.simulation.clients)
    assert int(data.member.sum()) == members


def test_shadows_differ_and_share_population(two_shadows):
    a, b = two_shadows
    assert np.linalg.norm(a.p_global - b.p_global) > 0
    assert a.config.pop_seed == b.config.pop_seed == TINY.pop_seed
    assert np.array_equal(a.simulation.encoders.text_proj, b.simulation.encoders.text_proj)
    assert not np.array_equal(a.simulation.dataset.x_train, b.simulation.dataset.x_train)


def test_shadow_count_and_seeds():
    cfgs = shadow_configs(TINY, 3)
    assert len({c.seed for c in cfgs}) == 3 and TINY.seed not in {c.seed for c in cfgs}
    with pytest.raises(ValueError):
        shadow_configs(TINY, 1)


def test_query_records_are_confidences_only(tiny_target):
    q = query_records(tiny_target)
    assert q.is_balanced()
    for c in q.confidences:
        assert np.all(c >= 0) and c.sum() == pytest.approx(1.0)
    assert np.all((q.scores() >= 0) & (q.scores() <= 1))
    assert np.all(q.scores("max") >= q.scores())


def test_shuffled_membership_is_at_chance(tiny_target, two_shadows):
    train = shadow_dataset(two_shadows)
    target = query_records(tiny_target)
    rng = RngStream(5).gen
    rates = []
    for _ in range(5):
        member = target.member.copy()
        for c in np.unique(target.labels):  # shuffle within class keeps balance
            sel = np.flatnonzero(target.labels == c)
            member[sel] = rng.permutation(member[sel])
        shuffled = AttackDataset(target.confidences, target.labels, member, target.label_pos)
        rates.append(attack(train, shuffled)[0])
    n = len(target) * 5
    assert abs(np.mean(rates) - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_attack_finds_planted_signal():
    rate, correct, total = attack(synthetic(200, 0, shift=0.3), synthetic(200, 1, shift=0.3))
    assert rate > 0.6 and total == 800 and correct == round(rate * total)


def test_unbalanced_training_rejected():
    d = synthetic(5, 0)
    bad = AttackDataset(d.confidences[:-1], d.labels[:-1], d.member[:-1], d.label_pos[:-1])
    with pytest.raises(UnbalancedError):
        fit_attack(bad)
    with pytest.raises(ValueError):
        fit_attack(AttackDataset((), np.zeros(0), np.zeros(0), np.zeros(0, int)))
    with pytest.raises(ValueError):
        AttackDataset((np.ones(2),), np.zeros(2), np.zeros(2), np.zeros(2, int))


def test_unknown_score():
    with pytest.raises(ValueError):
        synthetic(2, 0).scores("entropy")


@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.integers(0, 1000))
def test_best_threshold_is_optimal(scores, seed):
    s = np.asarray(scores)
    m = RngStream(seed).gen.integers(0, 2, len(s)).astype(bool)
    t = _best_threshold(s, m)
    best = np.mean((s >= t) == m)
    for cand in list(s) + [np.inf]:
        assert np.mean((s >= cand) == m) <= best


@given(st.integers(1, 500), st.data())
def test_report_is_valid_proportion(total, data):
    correct = data.draw(st.integers(0, total))
    rep = report(correct, total, TINY)
    validate_report(rep)
    assert rep["ci_low"] <= rep["success_rate"] <= rep["ci_high"]
    lo, hi = binomial_ci(correct, total)
    assert 0 <= lo <= hi <= 1


def test_validate_report_rejects_bad():
    rep = report(5, 10, TINY)
    with pytest.raises(ValueError):
        validate_report({k: v for k, v in rep.items() if k != "ci_low"})
    with pytest.raises(ValueError):
        validate_report({**rep, "success_rate": 1.5})
    with pytest.raises(ValueError):
        validate_report({**rep, "n_queries": 0})

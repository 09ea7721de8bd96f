import math

import numpy as np
import pytest

from scattn import tensor as T
from scattn.data import Dataset, build_vocab, generate_dataset, load_dataset
from scattn.errors import ConfigError, DimensionError, DomainError, TrainingDiverged
from scattn.model import CaptionModel, ModelConfig
from scattn.tensor import Tensor
from scattn.training import (
    AdadeltaState,
    TrainConfig,
    adadelta_update,
    cross_entropy_loss,
    dropout_mask,
    early_stop_check,
    exact_match_rate,
    next_token_accuracy,
    train,
)
from scattn.vocab import PAD


# ---------------------------------------------------------------------------
# cross-entropy


def test_loss_on_uniform_predictions_is_log_k():
    ps = [T.softmax(Tensor(np.zeros(8))) for _ in range(3)]
    loss = cross_entropy_loss(ps, [1, 5, 7])
    assert loss.data == pytest.approx(math.log(8.0), abs=1e-12)


def test_loss_hand_computation():
    ps = [
        Tensor([0.5, 0.25, 0.25]),
        Tensor([0.1, 0.8, 0.1]),
        Tensor([0.2, 0.2, 0.6]),
    ]
    # target 0 is the padding id and would be skipped, so start at 1
    want = -(math.log(0.25) + math.log(0.8) + math.log(0.6)) / 3.0
    assert cross_entropy_loss(ps, [1, 1, 2]).data == pytest.approx(want, abs=1e-12)


def test_loss_ignores_pad_targets():
    ps = [Tensor([0.5, 0.5]), Tensor([0.9, 0.1]), Tensor([0.3, 0.7])]
    with_pad = cross_entropy_loss(ps, [1, PAD, 1])
    want = -(math.log(0.5) + math.log(0.7)) / 2.0
    assert with_pad.data == pytest.approx(want, abs=1e-12)
    all_pad = cross_entropy_loss(ps, [PAD, PAD, PAD])
    assert all_pad.data == 0.0


def test_loss_length_mismatch():
    with pytest.raises(DimensionError):
        cross_entropy_loss([Tensor([1.0])], [0, 1])


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(30)
    logits = [Tensor(rng.standard_normal(5), requires_grad=True) for _ in range(3)]

    def loss():
        return cross_entropy_loss([T.softmax(z) for z in logits], [0, 3, 2])

    err, where = T.finite_diff_check(loss, logits, eps=1e-6)
    assert err < 1e-7, (err, where)


# ---------------------------------------------------------------------------
# dropout


def test_dropout_rate_zero_is_identity():
    m = dropout_mask((4, 4), 0.0, np.random.default_rng(0))
    assert np.array_equal(m.data, np.ones((4, 4)))


def test_dropout_eval_mode_is_identity():
    m = dropout_mask((4, 4), 0.9, np.random.default_rng(0), train=False)
    assert np.array_equal(m.data, np.ones((4, 4)))


def test_dropout_values_and_statistics():
    rate = 0.3
    n = 100_000
    m = dropout_mask(n, rate, np.random.default_rng(31)).data
    keep = 1.0 / (1.0 - rate)
    assert set(np.unique(m)) <= {0.0, keep}
    zeros = float((m == 0.0).sum())
    # binomial 3-sigma bands around the expected drop count and mean
    assert abs(zeros - rate * n) < 3 * math.sqrt(n * rate * (1 - rate))
    assert abs(m.mean() - 1.0) < 3 * math.sqrt(rate / (1 - rate) / n)


def test_dropout_deterministic_for_fixed_seed():
    a = dropout_mask((8, 8), 0.5, 77).data
    b = dropout_mask((8, 8), 0.5, 77).data
    assert np.array_equal(a, b)


def test_dropout_rate_validation():
    with pytest.raises(DomainError):
        dropout_mask(4, 1.0, 0)
    with pytest.raises(DomainError):
        dropout_mask(4, -0.1, 0)


# ---------------------------------------------------------------------------
# adadelta


def _one_param(value):
    p = {"w": Tensor(np.array([value]), requires_grad=True)}
    return p, AdadeltaState(p)


def test_adadelta_first_step_magnitude():
    # with zeroed accumulators and g=1: E[g2]=0.05, so
    # dx = -sqrt(1e-6)/sqrt(0.05 + 1e-6), about -4.472e-3
    params, state = _one_param(1.0)
    adadelta_update(params, {"w": np.array([1.0])}, state)
    want = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
    assert params["w"].data[0] - 1.0 == pytest.approx(want, abs=1e-15)


def test_adadelta_two_steps_match_transcribed_rule():
    rho, eps = 0.95, 1e-6
    params, state = _one_param(0.5)
    x = 0.5
    eg2 = edx2 = 0.0
    for g in (0.8, -0.3):
        adadelta_update(params, {"w": np.array([g])}, state)
        eg2 = rho * eg2 + (1 - rho) * g * g
        dx = -math.sqrt(edx2 + eps) / math.sqrt(eg2 + eps) * g
        edx2 = rho * edx2 + (1 - rho) * dx * dx
        x += dx
    assert params["w"].data[0] == pytest.approx(x, abs=1e-15)
    assert state.eg2["w"][0] == pytest.approx(eg2, abs=1e-15)
    assert state.edx2["w"][0] == pytest.approx(edx2, abs=1e-15)


def test_adadelta_zero_gradient_is_noop():
    params, state = _one_param(0.25)
    state.eg2["w"][:] = 0.4  # pretend some history exists
    adadelta_update(params, {"w": np.zeros(1)}, state)
    assert params["w"].data[0] == 0.25


def test_adadelta_missing_grad_treated_as_zero():
    params, state = _one_param(0.25)
    adadelta_update(params, {}, state)
    assert params["w"].data[0] == 0.25


def test_adadelta_shape_mismatch_rejected():
    params, state = _one_param(0.0)
    with pytest.raises(DimensionError):
        adadelta_update(params, {"w": np.zeros(3)}, state)


def test_adadelta_step_is_sign_descent():
    params, state = _one_param(0.0)
    adadelta_update(params, {"w": np.array([2.5])}, state)
    assert params["w"].data[0] < 0.0


def test_adadelta_state_validation():
    p = {"w": Tensor(np.zeros(1))}
    with pytest.raises(ConfigError):
        AdadeltaState(p, rho=1.0)
    with pytest.raises(ConfigError):
        AdadeltaState(p, epsilon=0.0)


# ---------------------------------------------------------------------------
# early stopping


def test_early_stop_examples():
    assert not early_stop_check([], 5)
    assert not early_stop_check([3.0, 2.0, 1.0], 5)
    # best at index 2, five entries after it: stop
    assert early_stop_check([3, 2, 1, 1.5, 1.6, 1.7, 1.8, 1.9], 5)
    # only four entries after the best: keep going
    assert not early_stop_check([3, 2, 1, 1.5, 1.6, 1.7, 1.8], 5)
    # ties resolve to the first occurrence
    assert early_stop_check([1.0, 1.0, 1.0], 2)
    assert not early_stop_check([1.0, 1.0, 1.0], 3)
    with pytest.raises(ConfigError):
        early_stop_check([1.0], 0)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(threads=0)


# ---------------------------------------------------------------------------
# the training loop


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy") / "d"
    generate_dataset(30, seed=40, out_dir=root)
    return load_dataset(root)


def _fresh_model(ds, seed=0, **kw):
    cfg = ModelConfig(vocab_size=ds.vocab.size, embed_dim=8, hidden_dim=12,
                      visual_dim=8, mapping_dim=6, **kw)
    return CaptionModel(cfg, ds.vocab, seed=seed)


def test_train_runs_and_reports(toy_dataset):
    model = _fresh_model(toy_dataset)
    model, res = train(toy_dataset, model, TrainConfig(batch_size=8, dropout=0.0,
                                                       max_epochs=3, seed=1))
    assert [row[0] for row in res.history] == [0, 1, 2]
    assert res.best_epoch in (0, 1, 2)
    assert res.best_val == min(row[2] for row in res.history)
    assert res.fresh_names == []
    assert math.isfinite(res.history[-1][1])


def test_train_restores_best_validation_state(toy_dataset):
    model = _fresh_model(toy_dataset, seed=2)
    model, res = train(toy_dataset, model, TrainConfig(batch_size=8, dropout=0.0,
                                                       max_epochs=4, seed=2))
    for name, t in model.parameters().items():
        assert np.array_equal(t.data, res.best_state[name]), name


def test_train_is_deterministic(toy_dataset):
    runs = []
    for _ in range(2):
        model = _fresh_model(toy_dataset, seed=3)
        model, res = train(toy_dataset, model, TrainConfig(batch_size=4, dropout=0.5,
                                                           max_epochs=3, seed=9))
        runs.append((res.history, {n: t.data.copy() for n, t in model.parameters().items()}))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name]), name


def test_seed_changes_the_run(toy_dataset):
    hists = []
    for seed in (1, 2):
        model = _fresh_model(toy_dataset, seed=3)
        _, res = train(toy_dataset, model, TrainConfig(batch_size=4, dropout=0.5,
                                                       max_epochs=2, seed=seed))
        hists.append(res.history)
    assert hists[0] != hists[1]


def test_threaded_run_matches_single_threaded(toy_dataset):
    results = []
    for threads in (1, 3):
        model = _fresh_model(toy_dataset, seed=5)
        model, res = train(toy_dataset, model, TrainConfig(
            batch_size=4, dropout=0.5, max_epochs=2, seed=11, threads=threads))
        results.append((res.history, {n: t.data.copy() for n, t in model.parameters().items()}))
    assert results[0][0] == results[1][0]
    for name in results[0][1]:
        assert np.array_equal(results[0][1][name], results[1][1][name]), name


def test_warm_start_copies_matching_and_reports_fresh(toy_dataset):
    donor = _fresh_model(toy_dataset, seed=6, attn_layers=1)
    entries = donor.state_entries()
    target = _fresh_model(toy_dataset, seed=7, attn_layers=2)
    _, res = train(toy_dataset, target, TrainConfig(batch_size=8, dropout=0.0,
                                                    max_epochs=1, seed=1),
                   warm_start=entries)
    assert set(res.fresh_names) == {n for n in target.parameters()
                                    if n.startswith("attn.l1.")}


def test_empty_train_split_rejected(toy_dataset):
    empty = Dataset([e for e in toy_dataset.examples if e.split == "test"],
                    toy_dataset.vocab)
    with pytest.raises(ConfigError):
        train(empty, _fresh_model(toy_dataset), TrainConfig(max_epochs=1))


def test_divergence_is_reported(toy_dataset):
    model = _fresh_model(toy_dataset)
    model.lstm.in_w.data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(toy_dataset, model, TrainConfig(batch_size=8, max_epochs=1, seed=1))


def test_training_reduces_loss(toy_dataset):
    model = _fresh_model(toy_dataset, seed=8)
    model, res = train(toy_dataset, model, TrainConfig(batch_size=2, dropout=0.0,
                                                       max_epochs=12, seed=3))
    first = res.history[0][1]
    last = min(row[1] for row in res.history)
    assert last < first


# ---------------------------------------------------------------------------
# evaluation helpers


def test_next_token_accuracy_bounds(toy_dataset):
    model = _fresh_model(toy_dataset)
    acc = next_token_accuracy(model, toy_dataset.examples[:5])
    assert 0.0 <= acc <= 1.0
    assert next_token_accuracy(model, []) == 0.0


def test_exact_match_empty_and_bounds(toy_dataset):
    model = _fresh_model(toy_dataset)
    assert exact_match_rate(model, []) == 0.0
    em = exact_match_rate(model, toy_dataset.examples[:4], width=2, max_len=9)
    assert 0.0 <= em <= 1.0


def test_full_sequence_gradcheck():
    # teacher-forced two-word caption through the whole model
    rng = np.random.default_rng(44)
    img = Tensor(rng.uniform(0, 1, (6, 6, 3)))
    from scattn.vocab import Vocabulary

    m = CaptionModel(
        ModelConfig(vocab_size=6, embed_dim=3, hidden_dim=4, visual_dim=3,
                    mapping_dim=3, input_shape=(6, 6, 3)),
        Vocabulary(["w1", "w2"]), seed=45,
    )
    for t in m.parameters().values():
        t.data = rng.uniform(-0.6, 0.6, size=t.data.shape)

    def loss():
        ps, targets = m.teacher_forced(img, [4, 5])
        return cross_entropy_loss(ps, targets)

    err, where = T.finite_diff_check(loss, list(m.parameters().values()), eps=1e-5)
    assert err < 1e-4, (err, where)

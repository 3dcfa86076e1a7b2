import numpy as np
import pytest

import oracles
from gfscil.encoder import EncoderConfig, init_params
from gfscil.incremental import (
    IncrementalConfig,
    SessionState,
    append_novel_prototypes,
    finetune_epoch,
    init_novel_prototypes,
    ipcn_calibrate,
    ipcn_probabilities,
    ipcn_refine,
    pso_shift,
    run_session,
)
from gfscil.prototypes import LossConfig, PrototypeBank
from gfscil.sessions import RetiredSessionError, TrainView
from gfscil.tmca import BaseTrainConfig, train_base

from conftest import toy_session

ENC = EncoderConfig(in_dim=6, hidden=3, heads=2, out_dim=4, dropout=0.5)


def small_bank(rng, classes=(0, 1), session=0, dim=4):
    bank = PrototypeBank()
    for c in classes:
        bank.add(c, rng.standard_normal(dim), session=session)
    return bank


def trained_state(rng_seed=0, classes=3, dim=6):
    base = toy_session(np.random.default_rng(rng_seed), classes=classes, dim=dim, nodes_per_class=8)
    cfg = BaseTrainConfig(epochs=15, n_way=2)
    enc = EncoderConfig(in_dim=max(dim, classes), hidden=3, heads=2, out_dim=4, dropout=0.5)
    result = train_base(base, enc, cfg, np.random.default_rng(rng_seed + 1))
    return base, enc, SessionState(t=0, params=result.params, bank=result.bank, opt_state=result.opt_state)


class TestInitNovelPrototypes:
    def test_one_shot_equals_single_embedding(self, rng):
        bank = small_bank(rng)
        emb = rng.standard_normal((2, 4))
        out = init_novel_prototypes(bank, emb, np.array([5, 6]), [5, 6], session=1)
        np.testing.assert_allclose(out.get(5), emb[0])
        np.testing.assert_allclose(out.get(6), emb[1])

    def test_bank_grows_by_way_count(self, rng):
        bank = small_bank(rng, classes=range(5))
        emb = rng.standard_normal((10, 4))
        labels = np.repeat([7, 8], 5)
        out = init_novel_prototypes(bank, emb, labels, [7, 8], session=1)
        assert len(out) == 7
        assert out.classes_from(1) == [7, 8]

    def test_five_shot_mean(self, rng):
        bank = small_bank(rng)
        emb = rng.standard_normal((5, 4))
        out = init_novel_prototypes(bank, emb, np.full(5, 9), [9], session=2)
        np.testing.assert_allclose(out.get(9), emb.mean(axis=0))

    def test_missing_class_errors(self, rng):
        bank = small_bank(rng)
        with pytest.raises(ValueError, match="9"):
            init_novel_prototypes(bank, rng.standard_normal((2, 4)), np.array([5, 5]), [9], 1)


class TestIpcnProbabilities:
    def test_single_class_probability_one(self, rng):
        bank = small_bank(rng, classes=(3,))
        p = ipcn_probabilities(rng.standard_normal((4, 4)), bank, tau=15.0)
        np.testing.assert_allclose(p, 1.0)

    def test_sharp_match_with_large_tau(self, rng):
        bank = PrototypeBank()
        bank.add(0, np.array([1.0, 0.0, 0.0, 0.0]), 0)
        bank.add(1, np.array([0.0, 1.0, 0.0, 0.0]), 0)
        p = ipcn_probabilities(np.array([[1.0, 0.0, 0.0, 0.0]]), bank, tau=60.0)
        assert p[0, 0] > 1.0 - 1e-12

    def test_rows_sum_to_one(self, rng):
        bank = small_bank(rng, classes=range(4))
        p = ipcn_probabilities(rng.standard_normal((7, 4)), bank, tau=15.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestIpcnCalibrate:
    def test_empty_query_reduces_to_support_means(self, rng):
        bank = small_bank(rng, classes=(0, 1, 2))
        support = rng.standard_normal((6, 4))
        labels = np.repeat([1, 2], 3)
        out = ipcn_calibrate(bank, support, labels, np.empty((0, 4)), 15.0, [1, 2])
        np.testing.assert_allclose(out.get(1), support[:3].mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(out.get(2), support[3:].mean(axis=0), atol=1e-12)
        # class 0 was not calibrated
        np.testing.assert_allclose(out.get(0), bank.get(0))

    def test_confident_query_at_support_mean_is_fixed_point(self):
        bank = PrototypeBank()
        bank.add(0, np.array([1.0, 0.0]), 1)
        bank.add(1, np.array([0.0, 1.0]), 1)
        support = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 1])
        query = np.array([[1.0, 0.0]])  # exactly the class-0 prototype
        out = ipcn_calibrate(bank, support, labels, query, tau=200.0, novel_classes=[0, 1])
        np.testing.assert_allclose(out.get(0), [1.0, 0.0], atol=1e-10)

    def test_old_classes_never_modified(self, rng):
        bank = PrototypeBank()
        bank.add(0, rng.standard_normal(4), 0)  # old
        bank.add(5, rng.standard_normal(4), 1)  # novel
        old = bank.get(0).copy()
        out = ipcn_calibrate(
            bank, rng.standard_normal((3, 4)), np.full(3, 5), rng.standard_normal((6, 4)), 15.0, [5]
        )
        assert np.array_equal(out.get(0), old)

    def test_hand_instance_matches_direct_evaluation(self):
        bank = PrototypeBank()
        bank.add(0, np.array([1.0, 0.2]), 1)
        bank.add(1, np.array([-0.5, 1.0]), 1)
        support = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 1])
        query = np.array([[0.9, 0.1], [-0.2, 0.8]])
        got = ipcn_calibrate(bank, support, labels, query, 3.0, [0, 1])
        want = oracles.ipcn_step(
            {0: bank.get(0).tolist(), 1: bank.get(1).tolist()},
            support.tolist(),
            labels.tolist(),
            query.tolist(),
            3.0,
            [0, 1],
        )
        np.testing.assert_allclose(got.get(0), want[0], atol=1e-12)
        np.testing.assert_allclose(got.get(1), want[1], atol=1e-12)

    def test_matches_oracle_randomized(self, rng):
        for _ in range(50):
            emb, protos, labels = oracles.random_instance(rng)
            n_classes = protos.shape[0]
            bank = PrototypeBank()
            for c in range(n_classes):
                bank.add(c, protos[c], session=1)
            query = rng.standard_normal((int(rng.integers(0, 6)), protos.shape[1]))
            novel = list(range(n_classes))
            got = ipcn_calibrate(bank, emb, labels, query, 15.0, novel)
            want = oracles.ipcn_step(
                {c: protos[c].tolist() for c in range(n_classes)},
                emb.tolist(), labels.tolist(), query.tolist(), 15.0, novel,
            )
            for c in novel:
                if not (labels == c).any():
                    continue  # oracle divides by zero weight when a class has no support
                np.testing.assert_allclose(got.get(c), want[c], atol=1e-10)

    def test_zero_iterations_is_identity(self, rng):
        bank = small_bank(rng, classes=(0, 1))
        out = ipcn_refine(
            bank, rng.standard_normal((2, 4)), np.array([0, 1]), rng.standard_normal((5, 4)),
            15.0, [0, 1], iters=0,
        )
        assert all(np.array_equal(out.get(c), bank.get(c)) for c in bank.classes)


class TestPso:
    def test_unchanged_parameters_zero_shift(self, rng):
        f = rng.standard_normal((5, 4))
        protos = {0: rng.standard_normal(4), 1: rng.standard_normal(4)}
        out = pso_shift(protos, f, f, sigma=1.0)
        for c in protos:
            assert np.array_equal(out[c], protos[c])

    def test_single_support_node_shift_equals_feature_change(self, rng):
        before = rng.standard_normal((1, 4))
        after = rng.standard_normal((1, 4))
        rho = rng.standard_normal(4)
        for sigma in (0.1, 1.0, 10.0):
            out = pso_shift({3: rho}, before, after, sigma)
            np.testing.assert_allclose(out[3], rho + (after[0] - before[0]), atol=1e-12)

    def test_two_node_hand_instance(self):
        rho = np.array([0.0, 0.0])
        before = np.array([[1.0, 0.0], [3.0, 0.0]])
        after = np.array([[1.0, 1.0], [3.0, -1.0]])
        phi = np.exp([-0.5, -4.5])
        w = phi / phi.sum()
        expected = rho + w[0] * np.array([0.0, 1.0]) + w[1] * np.array([0.0, -1.0])
        out = pso_shift({0: rho}, before, after, sigma=1.0)
        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_matches_oracle_randomized(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 8))
            dim = 4
            before = rng.standard_normal((n, dim))
            after = rng.standard_normal((n, dim))
            protos = {c: rng.standard_normal(dim) for c in range(int(rng.integers(1, 5)))}
            got = pso_shift(protos, before, after, sigma=1.0)
            want = oracles.pso_shift(
                {c: v.tolist() for c, v in protos.items()}, before.tolist(), after.tolist(), 1.0
            )
            for c in protos:
                np.testing.assert_allclose(got[c], want[c], atol=1e-10)

    def test_weights_form_distribution(self, rng):
        # weights are internal; probe via a shift of constant drift = weighted mean
        before = rng.standard_normal((6, 3))
        drift = np.array([2.0, -1.0, 0.5])
        after = before + drift
        out = pso_shift({0: rng.standard_normal(3)}, before, after, sigma=0.7)
        # sum of weights * constant drift == drift iff weights sum to 1
        np.testing.assert_allclose(out[0] - (out[0] - drift), drift, atol=1e-12)

    def test_underflow_falls_back_to_uniform(self, rng, caplog):
        before = np.full((2, 3), 1e6)
        after = before + 1.0
        rho = np.zeros(3)
        with caplog.at_level("WARNING"):
            out = pso_shift({0: rho}, before, after, sigma=1e-3)
        np.testing.assert_allclose(out[0], rho + 1.0, atol=1e-12)
        assert any("underflow" in r.message.lower() for r in caplog.records)


class TestFinetune:
    def test_lr_zero_keeps_parameters(self, rng):
        base, enc, state = trained_state()
        session = toy_session(np.random.default_rng(7), classes=2, dim=6, class_offset=3, t=1)
        view = TrainView(session)
        cfg = IncrementalConfig(lr=0.0, weight_decay=0.0)
        emb = np.zeros((session.n, 4))
        bank = init_novel_prototypes(
            state.bank, rng.standard_normal((session.support.size, 4)),
            session.labels[session.support], sorted(session.classes), 1,
        )
        params, loss = finetune_epoch(view, bank, state.params, enc, cfg, state.opt_state, rng)
        assert np.isfinite(loss)
        assert all(np.array_equal(params[k], state.params[k]) for k in params.names())

    def test_support_loss_decreases_over_epochs(self):
        drops = 0
        for seed in range(5):
            base, enc, state = trained_state(rng_seed=seed)
            session = toy_session(np.random.default_rng(seed + 50), classes=2, dim=6, class_offset=3, t=1)
            view = TrainView(session)
            cfg = IncrementalConfig(epochs=5, use_ipcn=False, use_pso=False, use_ema=False)
            rng = np.random.default_rng(seed + 100)
            params = state.params
            emb0 = None
            losses = []
            from gfscil.encoder import embed

            bank = state.bank
            for _ in range(5):
                emb = embed(view.graph, view.features, params, enc)
                bank = init_novel_prototypes(
                    bank, emb[view.support_nodes], view.support_labels, sorted(view.classes), 1
                )
                params, loss = finetune_epoch(view, bank, params, enc, cfg, state.opt_state, rng)
                losses.append(loss)
            if losses[-1] < losses[0]:
                drops += 1
        assert drops >= 3  # median over seeds decreases

    def test_gradient_matches_finite_differences(self, rng):
        from gfscil.autodiff import Tape, finite_difference_check
        from gfscil.encoder import encode
        from gfscil.prototypes import margin_loss

        session = toy_session(np.random.default_rng(13), classes=2, dim=6, nodes_per_class=2, k_support=2)
        enc = EncoderConfig(in_dim=6, hidden=3, heads=2, out_dim=3, dropout=0.0)
        protos = rng.standard_normal((2, 3))
        labels = np.array([0, 1, 0, 1])

        def build(p):
            tape = Tape()
            out = encode(tape, session.graph, session.features, p, enc)
            support = tape.gather_rows(out, session.support)
            return tape, margin_loss(tape, support, labels, protos, LossConfig(15.0, 0.1))

        params = init_params(enc, np.random.default_rng(21))
        assert finite_difference_check(build, params) <= 1e-4


class TestRunSession:
    def test_chained_noop_with_beta_one(self):
        base, enc, state = trained_state()
        session = toy_session(np.random.default_rng(5), classes=2, dim=6, class_offset=3, t=1)
        cfg = IncrementalConfig(beta=1.0)
        out = run_session(state, TrainView(session), enc, cfg, np.random.default_rng(0))
        assert all(np.array_equal(out.params[k], state.params[k]) for k in state.params.names())
        for c in state.bank.classes:
            assert np.array_equal(out.bank.get(c), state.bank.get(c))

    def test_bank_size_grows_linearly(self):
        base, enc, state = trained_state(classes=3)
        cfg = IncrementalConfig()
        rng = np.random.default_rng(33)
        for t in (1, 2):
            session = toy_session(rng, classes=2, dim=6, class_offset=3 + 2 * (t - 1), t=t)
            state = run_session(state, TrainView(session), enc, cfg, rng)
            assert len(state.bank) == 3 + 2 * t

    def test_pso_never_touches_current_session_classes(self):
        base, enc, state = trained_state(classes=3)
        session = toy_session(np.random.default_rng(8), classes=2, dim=6, class_offset=3, t=1)
        cfg = IncrementalConfig(use_ema=False)
        out = run_session(state, TrainView(session), enc, cfg, np.random.default_rng(9))
        assert set(out.bank.classes_from(1)) == set(session.classes)

    def test_view_retires_and_blocks_access(self):
        base, enc, state = trained_state()
        session = toy_session(np.random.default_rng(5), classes=2, dim=6, class_offset=3, t=1)
        view = TrainView(session)
        state = run_session(state, view, enc, IncrementalConfig(), np.random.default_rng(0))
        view.retire()
        with pytest.raises(RetiredSessionError):
            _ = view.graph
        with pytest.raises(RetiredSessionError):
            _ = view.support_labels

    def test_frozen_append_keeps_parameters_bitwise(self):
        base, enc, state = trained_state()
        session = toy_session(np.random.default_rng(5), classes=2, dim=6, class_offset=3, t=1)
        out = append_novel_prototypes(state, TrainView(session), enc)
        assert out.params is state.params
        assert len(out.bank) == len(state.bank) + 2

    def test_query_labels_not_exposed_to_trainer(self):
        session = toy_session(np.random.default_rng(5), classes=2, dim=6, t=1)
        view = TrainView(session)
        assert not hasattr(view, "query_labels")
        assert not hasattr(view, "labels")

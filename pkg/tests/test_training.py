import numpy as np
import pytest

from crossrf.autograd import Mode, NumericalError, Tape, Tensor, backward, \
    batchnorm1d, leaky_relu, linear, log_softmax, nll_loss
from crossrf.iqdata import Domain, SignalWindow, Split, UnlabeledWindows, \
    WindowedDataset
from crossrf.models import EncoderConfig, ModelConfig, build_models, classify, \
    encode, init_target_from_source
from crossrf.seeding import derive_rng
from crossrf.training import (
    SearchSpace,
    TrainConfig,
    adapt_target,
    distillation_loss,
    evaluate,
    hyper_search,
    train_source,
)

from gradcheck import numerical_gradient, rel_error


def tiny_model_config(dropout_p=0.2):
    return ModelConfig(
        encoder=EncoderConfig(conv_channels=(4, 4, 8, 8, 8),
                              kernel_sizes=(5, 3, 3, 3, 3),
                              strides=(2, 2, 2, 2, 2),
                              dropout_p=dropout_p, leaky_slope=0.2,
                              pool_out_len=1, feature_dim=16),
        classifier_hidden=8,
        discriminator_hidden=(16, 8, 8),
    )


def toy_dataset(num_per_class=32, width=64, split=Split.TRAIN, seed=0,
                domain=Domain.SOURCE, separation=1.0):
    """Two device classes with opposite I/Q offsets plus mild noise."""
    rng = derive_rng(seed, "toy", split.value)
    windows = []
    for label in (0, 1):
        sign = 1.0 if label == 0 else -1.0
        for i in range(num_per_class):
            base = 0.1 * rng.standard_normal((2, width))
            base[0] += sign * separation
            base[1] -= sign * separation
            windows.append(SignalWindow(
                values=base.astype(np.float32), device_label=label,
                domain_tag=domain, origin=(f"cap{label}_{i}", 0)))
    return WindowedDataset(windows=windows, num_classes=2, split=split)


class TestDistillationLoss:
    def test_identical_logits_zero(self):
        rng = derive_rng(0, "d")
        z = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
        z2 = Tensor(z.data.copy(), dtype=np.float64)
        for temp in (1.0, 2.0, 4.0):
            assert abs(distillation_loss(z, z2, temp).item()) < 1e-9

    def test_hand_derived_two_class_case(self):
        zs = Tensor(np.array([[1.0, 0.0]]))
        zt = Tensor(np.array([[0.0, 1.0]]))
        loss = distillation_loss(zs, zt, 1.0).item()
        assert abs(loss - 0.4621) < 1e-3

    @pytest.mark.parametrize("temp", [1.0, 2.0, 4.0])
    def test_temperature_squared_factor(self, temp):
        """Recompute T^2 * mean-KL of the softened rows independently."""
        rng = derive_rng(1, "t2")
        zs = rng.standard_normal((6, 5))
        zt = rng.standard_normal((6, 5))
        loss = distillation_loss(Tensor(zs, dtype=np.float64),
                                 Tensor(zt, dtype=np.float64), temp).item()

        def softmax(z):
            e = np.exp(z / temp - (z / temp).max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        ps, pt = softmax(zs), softmax(zt)
        kl = (ps * np.log(ps / pt)).sum(axis=1).mean()
        assert abs(loss - temp * temp * kl) < 1e-9 * max(1.0, abs(loss))

    def test_gradient_only_into_target_logits(self):
        rng = derive_rng(2, "g")
        zs_np = rng.standard_normal((4, 3))
        zt_np = rng.standard_normal((4, 3))
        zs = Tensor(zs_np, requires_grad=True, dtype=np.float64)
        zt = Tensor(zt_np, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = distillation_loss(zs, zt, 3.0)
        backward(loss, tape)
        assert zs.grad is None
        assert zt.grad is not None

        def f():
            return distillation_loss(Tensor(zs_np, dtype=np.float64),
                                     Tensor(zt_np, dtype=np.float64), 3.0).item()

        (nz,) = numerical_gradient(f, [zt_np])
        assert rel_error(zt.grad, nz) < 1e-4

    def test_temperature_validated(self):
        z = Tensor(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            distillation_loss(z, z, 0.0)


class TestTrainSource:
    def test_toy_problem_reaches_perfect_validation(self):
        train = toy_dataset(split=Split.TRAIN, seed=1)
        val = toy_dataset(num_per_class=8, split=Split.VAL, seed=2)
        cfg = TrainConfig(batch_size=16, epochs_source=20, seed=3,
                          early_stop_patience=20)
        bundle = build_models(tiny_model_config(), 2, seed=3)
        _, _, log = train_source(train, val, cfg, bundle)
        assert log.best_val_accuracy() == 1.0
        acc, _ = evaluate(bundle.source_encoder, bundle.classifier,
                          bundle.config.encoder, train)
        assert acc >= 0.95

    def test_zero_epochs_returns_initial_params(self):
        train = toy_dataset(seed=4)
        val = toy_dataset(num_per_class=4, split=Split.VAL, seed=5)
        cfg = TrainConfig(epochs_source=0, seed=6)
        bundle = build_models(tiny_model_config(), 2, seed=6)
        initial = [t.data.copy() for t in bundle.source_encoder.tensors()]
        enc, _, log = train_source(train, val, cfg, bundle)
        assert log.rows == []
        for before, after in zip(initial, enc.tensors()):
            np.testing.assert_array_equal(before, after.data)

    def test_same_seed_same_result(self):
        def run():
            train = toy_dataset(seed=7)
            val = toy_dataset(num_per_class=8, split=Split.VAL, seed=8)
            cfg = TrainConfig(batch_size=16, epochs_source=4, seed=9)
            bundle = build_models(tiny_model_config(), 2, seed=9)
            _, _, log = train_source(train, val, cfg, bundle)
            return [r.val_accuracy for r in log.rows], \
                [t.data.copy() for t in bundle.source_encoder.tensors()]

        accs_a, params_a = run()
        accs_b, params_b = run()
        assert accs_a == accs_b
        for a, b in zip(params_a, params_b):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_input_aborts_with_diagnostic(self):
        train = toy_dataset(seed=10)
        train.windows[0].values[0, 0] = np.inf
        val = toy_dataset(num_per_class=4, split=Split.VAL, seed=11)
        cfg = TrainConfig(batch_size=64, epochs_source=2, seed=12)
        bundle = build_models(tiny_model_config(), 2, seed=12)
        with pytest.raises(NumericalError, match="loss"):
            train_source(train, val, cfg, bundle)


class TestAdaptTarget:
    def make_setup(self, seed=20, dropout_p=0.2):
        train = toy_dataset(seed=seed)
        val = toy_dataset(num_per_class=8, split=Split.VAL, seed=seed + 1)
        cfg = TrainConfig(batch_size=16, epochs_source=6, epochs_adapt=3,
                          seed=seed, early_stop_patience=10)
        bundle = build_models(tiny_model_config(dropout_p), 2, seed=seed)
        train_source(train, val, cfg, bundle)
        target = toy_dataset(seed=seed + 2, domain=Domain.TARGET)
        target_val = toy_dataset(num_per_class=8, split=Split.VAL,
                                 seed=seed + 3, domain=Domain.TARGET)
        return train, cfg, bundle, target, target_val

    def test_zero_weights_leave_target_encoder_unchanged(self):
        train, cfg, bundle, target, target_val = self.make_setup()
        cfg.lambda_adv = 0.0
        cfg.lambda_distill = 0.0
        cfg.epochs_adapt = 4
        source_params = [t.data.copy()
                         for t in bundle.source_encoder.tensors()]
        target_enc, _, _ = adapt_target(bundle, train,
                                        target.without_labels(), target_val,
                                        cfg)
        for src, tgt in zip(source_params, target_enc.tensors()):
            np.testing.assert_array_equal(src, tgt.data)

    def test_distillation_zero_at_initialization_eval_consistent(self):
        _, _, bundle, target, _ = self.make_setup()
        target_enc = init_target_from_source(bundle.source_encoder)
        x = Tensor(target.values_array()[:16])
        enc_cfg = bundle.config.encoder
        zs = classify(bundle.classifier,
                      encode(bundle.source_encoder, enc_cfg, x, Mode.EVAL),
                      Mode.EVAL)
        zt = classify(bundle.classifier,
                      encode(target_enc, enc_cfg, x, Mode.EVAL), Mode.EVAL)
        assert abs(distillation_loss(zs, zt, 4.0).item()) < 1e-9

    def test_distillation_only_run_is_stable(self):
        train, cfg, bundle, _, target_val = self.make_setup(dropout_p=0.0)
        cfg.lambda_adv = 0.0
        cfg.lambda_distill = 0.5
        cfg.epochs_adapt = 3
        start = [t.data.copy() for t in bundle.source_encoder.tensors()]
        # target data identical to source data: nothing should move much
        target_enc, _, log = adapt_target(bundle, train,
                                          train.without_labels(), target_val,
                                          cfg)
        assert all(np.isfinite(r.total_loss) for r in log.rows)
        worst = max(np.max(np.abs(s - t.data))
                    for s, t in zip(start, target_enc.tensors()))
        assert worst < 1e-2 * cfg.epochs_adapt

    def test_source_and_classifier_frozen(self):
        train, cfg, bundle, target, target_val = self.make_setup()
        before = [t.data.copy() for t in bundle.source_encoder.tensors()
                  + bundle.classifier.tensors()]
        adapt_target(bundle, train, target.without_labels(), target_val, cfg)
        after = [t.data for t in bundle.source_encoder.tensors()
                 + bundle.classifier.tensors()]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_zero_epochs_returns_source_copy(self):
        train, cfg, bundle, target, target_val = self.make_setup()
        cfg.epochs_adapt = 0
        target_enc, _, log = adapt_target(bundle, train,
                                          target.without_labels(), target_val,
                                          cfg)
        assert log.rows == []
        for src, tgt in zip(bundle.source_encoder.tensors(),
                            target_enc.tensors()):
            np.testing.assert_array_equal(src.data, tgt.data)

    def test_labeled_dataset_rejected(self):
        train, cfg, bundle, target, target_val = self.make_setup()
        with pytest.raises(TypeError, match="UnlabeledWindows"):
            adapt_target(bundle, train, target, target_val, cfg)

    def test_target_labels_never_read(self):
        class CountingWindow:
            reads = 0

            def __init__(self, inner):
                self._inner = inner

            @property
            def values(self):
                return self._inner.values

            @property
            def device_label(self):
                CountingWindow.reads += 1
                return self._inner.device_label

            @property
            def domain_tag(self):
                return self._inner.domain_tag

            @property
            def origin(self):
                return self._inner.origin

        train, cfg, bundle, target, target_val = self.make_setup()
        target.windows = [CountingWindow(w) for w in target.windows]
        CountingWindow.reads = 0
        adapt_target(bundle, train, target.without_labels(), target_val, cfg)
        assert CountingWindow.reads == 0

    def test_objective_composition_matches_separate_graphs(self):
        """Joint update direction == -lambda_adv * dL_disc/dtheta (no GRL)
        + lambda_distill * dL_distill/dtheta, rebuilt as separate graphs."""
        lam_adv, lam_dist, temp = 0.7, 0.4, 3.0
        cfg = tiny_model_config(dropout_p=0.0)
        bundle = build_models(cfg, 2, seed=33, grl_lambda=1.0,
                              dtype=np.float64)
        enc_cfg = cfg.encoder
        rng = derive_rng(34, "comp")
        xs = Tensor(rng.standard_normal((8, 2, 64)), dtype=np.float64)
        xt = Tensor(rng.standard_normal((8, 2, 64)), dtype=np.float64)
        target_enc = init_target_from_source(bundle.source_encoder)
        disc = bundle.discriminator
        labels = np.array([0] * 8 + [1] * 8)

        fs = encode(bundle.source_encoder, enc_cfg, xs, Mode.EVAL).detach()
        src_logits = classify(
            bundle.classifier,
            encode(bundle.source_encoder, enc_cfg, xt, Mode.EVAL),
            Mode.EVAL).detach()

        def joint_grads():
            from crossrf.autograd import add, concat0, scale
            from crossrf.models import discriminate

            with Tape() as tape:
                ft = encode(target_enc, enc_cfg, xt, Mode.TRAIN)
                logp = discriminate(disc, concat0([fs, ft]), Mode.TRAIN)
                l_disc = nll_loss(logp, labels)
                logits_t = classify(bundle.classifier, ft, Mode.EVAL)
                l_dist = distillation_loss(src_logits, logits_t, temp)
                total = add(scale(l_disc, lam_adv), scale(l_dist, lam_dist))
            backward(total, tape)
            grads = [t.grad.copy() for t in target_enc.tensors()]
            for t in target_enc.tensors() + disc.tensors():
                t.grad = None
            return grads

        def disc_grads_without_grl():
            from crossrf.autograd import concat0

            with Tape() as tape:
                ft = encode(target_enc, enc_cfg, xt, Mode.TRAIN)
                h = concat0([fs, ft])
                for block in disc.blocks:
                    h = linear(h, block.weight, block.bias)
                    block.bn.mode = Mode.TRAIN
                    h = batchnorm1d(h, block.bn)
                    h = leaky_relu(h, disc.leaky_slope)
                h = linear(h, disc.out_weight, disc.out_bias)
                l_disc = nll_loss(log_softmax(h), labels)
            backward(l_disc, tape)
            grads = [t.grad.copy() if t.grad is not None
                     else np.zeros_like(t.data) for t in target_enc.tensors()]
            for t in target_enc.tensors() + disc.tensors():
                t.grad = None
            return grads

        def distill_grads():
            with Tape() as tape:
                ft = encode(target_enc, enc_cfg, xt, Mode.TRAIN)
                logits_t = classify(bundle.classifier, ft, Mode.EVAL)
                l_dist = distillation_loss(src_logits, logits_t, temp)
            backward(l_dist, tape)
            grads = [t.grad.copy() for t in target_enc.tensors()]
            for t in target_enc.tensors():
                t.grad = None
            return grads

        joint = np.concatenate([g.ravel() for g in joint_grads()])
        g_disc = np.concatenate([g.ravel() for g in disc_grads_without_grl()])
        g_dist = np.concatenate([g.ravel() for g in distill_grads()])
        # conv-bias grads vanish through train-mode BN (shift invariance), so
        # the direction is compared as one vector, not per noise-level tensor
        expected = -lam_adv * g_disc + lam_dist * g_dist
        assert rel_error(joint, expected) < 1e-5


class TestEvaluate:
    def test_known_fixture_accuracy(self):
        train = toy_dataset(seed=40)
        val = toy_dataset(num_per_class=8, split=Split.VAL, seed=41)
        cfg = TrainConfig(batch_size=16, epochs_source=15, seed=42,
                          early_stop_patience=15)
        bundle = build_models(tiny_model_config(), 2, seed=42)
        train_source(train, val, cfg, bundle)
        acc, preds = evaluate(bundle.source_encoder, bundle.classifier,
                              bundle.config.encoder, train)
        assert acc == 1.0
        np.testing.assert_array_equal(preds, train.labels_array())

    def test_deterministic(self):
        ds = toy_dataset(seed=43)
        bundle = build_models(tiny_model_config(), 2, seed=44)
        a = evaluate(bundle.source_encoder, bundle.classifier,
                     bundle.config.encoder, ds)
        b = evaluate(bundle.source_encoder, bundle.classifier,
                     bundle.config.encoder, ds)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])


class TestHyperSearch:
    def setup_search(self):
        train = toy_dataset(seed=50)
        val = toy_dataset(num_per_class=8, split=Split.VAL, seed=51)
        cfg = TrainConfig(batch_size=16, epochs_source=3, epochs_adapt=1,
                          seed=52)
        bundle = build_models(tiny_model_config(), 2, seed=52)
        train_source(train, val, cfg, bundle)
        target = toy_dataset(seed=53, domain=Domain.TARGET)
        target_val = toy_dataset(num_per_class=8, split=Split.VAL, seed=54,
                                 domain=Domain.TARGET)
        return train, cfg, bundle, target, target_val

    def test_budget_one_returns_single_trial(self):
        train, cfg, bundle, target, target_val = self.setup_search()
        best, trials = hyper_search(SearchSpace(), 1, 60, bundle, train,
                                    target.without_labels(), target_val, cfg)
        assert len(trials) == 1
        assert best is trials[0].config

    def test_same_seed_same_trials(self):
        def run():
            train, cfg, bundle, target, target_val = self.setup_search()
            _, trials = hyper_search(SearchSpace(), 2, 61, bundle, train,
                                     target.without_labels(), target_val, cfg)
            return [(t.config.lr_target, t.config.lambda_adv,
                     t.config.lambda_distill, t.config.temperature,
                     t.config.grl_lambda, t.val_accuracy) for t in trials]

        assert run() == run()

    def test_best_is_argmax(self):
        train, cfg, bundle, target, target_val = self.setup_search()
        best, trials = hyper_search(SearchSpace(), 3, 62, bundle, train,
                                    target.without_labels(), target_val, cfg)
        best_acc = max(t.val_accuracy for t in trials)
        assert any(t.config is best and t.val_accuracy == best_acc
                   for t in trials)

    def test_invalid_range_rejected(self):
        with pytest.raises(ValueError):
            SearchSpace(lr_target=(1e-3, 1e-4))
        with pytest.raises(ValueError):
            hyper_search(SearchSpace(), 0, 0, None, None, None, None, None)

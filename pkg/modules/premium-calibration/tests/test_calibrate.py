"""Tests for the two-stage calibration."""

import dataclasses
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from premium_calibration import autodiff as ad
from premium_calibration.actuarial import ALIVE
from premium_calibration.actuarial import DEAD
from premium_calibration.actuarial import Contract
from premium_calibration.actuarial import TransitionSequence
from premium_calibration.actuarial import psi
from premium_calibration.actuarial import transition_sequence
from premium_calibration.autodiff import grad_check
from premium_calibration.autodiff import gradients
from premium_calibration.calibrate import BaselineModel
from premium_calibration.calibrate import FeatureScalers
from premium_calibration.calibrate import Model
from premium_calibration.calibrate import SequenceBatch
from premium_calibration.calibrate import batch_psi
from premium_calibration.calibrate import batches_risk
from premium_calibration.calibrate import check_consistency
from premium_calibration.calibrate import contract_losses
from premium_calibration.calibrate import empirical_risk
from premium_calibration.calibrate import encode_contract
from premium_calibration.calibrate import encode_step
from premium_calibration.calibrate import fit_baseline
from premium_calibration.calibrate import fit_residual
from premium_calibration.calibrate import fit_residual_scaler
from premium_calibration.calibrate import load_baseline
from premium_calibration.calibrate import load_model
from premium_calibration.calibrate import make_batches
from premium_calibration.calibrate import predict_sequence
from premium_calibration.calibrate import predict_sequences
from premium_calibration.calibrate import raw_step_features
from premium_calibration.calibrate import save_baseline
from premium_calibration.calibrate import save_model
from premium_calibration.config import BaselineConfig
from premium_calibration.config import ResidualConfig
from premium_calibration.errors import ConsistencyError
from premium_calibration.errors import InputError
from premium_calibration.mortality import MortalityTable
from premium_calibration.mortality import build_dav_dataset
from premium_calibration.nn import ResidualNet
from premium_calibration.portfolio import GroundTruthModel
from premium_calibration.portfolio import Portfolio
from premium_calibration.portfolio import PortfolioConfig
from premium_calibration.portfolio import generate_portfolio
from premium_calibration.portfolio import price_contract


class BaselineOnly:
    """Transition model using only the baseline's sub-annual death probabilities."""

    def __init__(self, base: BaselineModel):
        self.base = base

    def predict_sequence(self, contract: Contract) -> TransitionSequence:
        k = np.arange(contract.iterations)
        ages = contract.a0 + k / contract.m
        return transition_sequence(self.base.death_probabilities(ages, np.full(k.shape, contract.m)))


def tiny_residual_config(**overrides) -> ResidualConfig:
    values = {"widths": [4, 3, 3, 2], "max_epochs": 3, "batch_size": 4, "lr": 1e-3, "log_every": 1}
    values.update(overrides)
    return ResidualConfig(**values)


@pytest.fixture
def long_portfolio(ground_truth: GroundTruthModel) -> Portfolio:
    """Two monthly contracts of 24 and 36 steps."""
    config = PortfolioConfig()
    contracts = [
        Contract(year=2015, month=3, a0=30, n=2, t=2, S=1_000.0, m=12, gender="male", smoker=False),
        Contract(year=2016, month=7, a0=45, n=3, t=2, S=2_000.0, m=12, gender="female", smoker=True),
    ]
    priced = [price_contract(c, ground_truth, config) for c in contracts]
    return Portfolio(contracts=priced, expenses=config.expenses, discount=config.discount)


class TestFeatures:
    """Tests for per-step feature encoding."""

    def test_first_step_is_entry_age(self, tiny_model: Model, sample_contract: Contract):
        base, _ = encode_step(sample_contract, 0, tiny_model.scalers)
        np.testing.assert_allclose(base, tiny_model.scalers.base.apply(np.array([[40.0, 12.0]]))[0])

    def test_age_advances_by_one_over_m(self, sample_contract: Contract):
        """With m = 12, step 12 is one year after entry."""
        raw = raw_step_features(sample_contract, np.array([0, 1, 12]))
        np.testing.assert_allclose(raw[:, 0], [40.0, 40.0 + 1 / 12, 41.0])
        np.testing.assert_array_equal(raw[:, 1:], [[12.0, 0.0, 0.0]] * 3)

    def test_step_out_of_range(self, tiny_model: Model, sample_contract: Contract):
        with pytest.raises(IndexError):
            encode_step(sample_contract, sample_contract.iterations, tiny_model.scalers)

    def test_premium_and_sum_insured_not_features(self, tiny_model: Model, sample_contract: Contract):
        other = dataclasses.replace(sample_contract, S=5_000.0, P=77.0)
        encoded = encode_contract(sample_contract, tiny_model.scalers)
        for left, right in zip(encoded, encode_contract(other, tiny_model.scalers), strict=True):
            np.testing.assert_array_equal(left, right)

    def test_step_matches_whole_contract(self, tiny_model: Model, sample_contract: Contract):
        base_all, res_all = encode_contract(sample_contract, tiny_model.scalers)
        base, res = encode_step(sample_contract, 17, tiny_model.scalers)
        np.testing.assert_array_equal(base, base_all[17])
        np.testing.assert_array_equal(res, res_all[17])

    def test_residual_scaler_covers_portfolio(self, small_portfolio: Portfolio):
        """Every step of every contract scales into [0, 1]."""
        scaler = fit_residual_scaler(small_portfolio.contracts)
        for contract in small_portfolio.contracts:
            scaled = scaler.apply(raw_step_features(contract, np.arange(contract.iterations)))
            assert scaled.min() >= 0.0
            assert scaled.max() <= 1.0 + 1e-12


class TestSequenceBatch:
    """Tests for padded batches and the batched psi."""

    def test_mask_and_padding(self, tiny_model: Model, small_portfolio: Portfolio):
        batch = SequenceBatch.build(
            small_portfolio.contracts, small_portfolio.cash_flows(), tiny_model.scalers, [0, 1, 2]
        )
        np.testing.assert_array_equal(batch.mask.sum(axis=1), batch.lengths)
        for row, K in enumerate(batch.lengths):
            assert np.all(batch.y_survive[row, K + 1 :] == 0)
            assert np.all(batch.res_x[row, K:] == 0)

    def test_too_short_padding_rejected(self, tiny_model: Model, small_portfolio: Portfolio):
        with pytest.raises(ValueError):
            SequenceBatch.build(small_portfolio.contracts, None, tiny_model.scalers, [0], steps=0)

    def test_batches_sorted_by_length(self, tiny_model: Model, small_portfolio: Portfolio):
        batches = make_batches(small_portfolio.contracts, None, tiny_model.scalers, batch_size=5)
        assert [len(b) for b in batches] == [5, 5, 2]
        lengths = np.concatenate([b.lengths for b in batches])
        assert np.all(np.diff(lengths) >= 0)

    def test_batch_psi_matches_scalar_psi(self, tiny_model: Model, small_portfolio: Portfolio):
        """The batched log-space psi equals psi on the predicted sequence."""
        flows = small_portfolio.cash_flows()
        for batch in make_batches(small_portfolio.contracts, flows, tiny_model.scalers, batch_size=4):
            values = batch_psi(tiny_model, batch).data
            for row, index in enumerate(batch.indices):
                contract = small_portfolio.contracts[index]
                expected = psi(predict_sequence(tiny_model, contract), contract, flows[index])
                assert values[row] == pytest.approx(expected, rel=1e-9, abs=1e-9 * contract.S)

    def test_padding_does_not_change_psi(self, tiny_model: Model, small_portfolio: Portfolio):
        flows = small_portfolio.cash_flows()
        K = small_portfolio.contracts[0].iterations
        tight = SequenceBatch.build(small_portfolio.contracts, flows, tiny_model.scalers, [0])
        padded = SequenceBatch.build(small_portfolio.contracts, flows, tiny_model.scalers, [0], steps=K + 5)
        assert batch_psi(tiny_model, padded).item() == pytest.approx(batch_psi(tiny_model, tight).item(), rel=1e-12)

    def test_padding_does_not_change_loss_or_gradient(self, tiny_model: Model, small_portfolio: Portfolio):
        """The shortest contract alone, padded, and beside the longest gives one loss and one gradient."""
        contracts = small_portfolio.contracts
        flows = small_portfolio.cash_flows()
        lengths = [c.iterations for c in contracts]
        shortest = int(np.argmin(lengths))
        longest = int(np.argmax(lengths))
        K = lengths[shortest]
        assert lengths[longest] > K
        params = tiny_model.res.parameters()

        def first_loss(batch: SequenceBatch):
            return gradients(lambda: ad.tensor_sum(contract_losses(tiny_model, batch)[0:1]), params)

        tight_loss, tight_grads = first_loss(SequenceBatch.build(contracts, flows, tiny_model.scalers, [shortest]))
        for batch in (
            SequenceBatch.build(contracts, flows, tiny_model.scalers, [shortest], steps=K + 5),
            SequenceBatch.build(contracts, flows, tiny_model.scalers, [shortest, longest]),
        ):
            loss, grads = first_loss(batch)
            assert loss == pytest.approx(tight_loss, rel=1e-12)
            for name, grad in tight_grads.items():
                scale = np.max(np.abs(grad))
                np.testing.assert_allclose(grads[name], grad, rtol=1e-12, atol=1e-12 * scale)


class TestCompositeModel:
    """Tests for the composed baseline plus residual."""

    def test_rows_are_transition_matrices(self, tiny_model: Model, sample_contract: Contract):
        seq = predict_sequence(tiny_model, sample_contract)
        assert seq.shape == (sample_contract.iterations, 2, 2)
        np.testing.assert_allclose(seq.sum(axis=2), 1.0)
        np.testing.assert_array_equal(seq[:, DEAD, ALIVE], 0.0)

    def test_zero_residual_reproduces_baseline(self, tiny_baseline: BaselineModel, small_portfolio: Portfolio):
        """A zero output layer leaves softmax(base) and the baseline risk unchanged."""
        scalers = FeatureScalers(base=tiny_baseline.scaler, residual=fit_residual_scaler(small_portfolio.contracts))
        res = ResidualNet([4, 3, 3, 2], np.random.default_rng(1), zero_output=True)
        model = Model(base=tiny_baseline, res=res, scalers=scalers)
        baseline_only = BaselineOnly(tiny_baseline)
        for contract in small_portfolio.contracts:
            np.testing.assert_allclose(
                predict_sequence(model, contract), baseline_only.predict_sequence(contract), rtol=1e-12
            )
        assert empirical_risk(model, small_portfolio) == pytest.approx(
            empirical_risk(baseline_only, small_portfolio), rel=1e-9
        )

    def test_predictions_independent_of_batch_size(self, tiny_model: Model, small_portfolio: Portfolio):
        one = predict_sequences(tiny_model, small_portfolio.contracts, batch_size=1)
        all_at_once = predict_sequences(tiny_model, small_portfolio.contracts)
        for a, b in zip(one, all_at_once, strict=True):
            np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_loss_exponent(self, tiny_model: Model, small_portfolio: Portfolio):
        batch = make_batches(small_portfolio.contracts, small_portfolio.cash_flows(), tiny_model.scalers, 12)[0]
        linear = contract_losses(tiny_model, batch, loss_exponent=1.0).data
        squared = contract_losses(tiny_model, batch, loss_exponent=2.0).data
        np.testing.assert_allclose(squared, linear**2)

    def test_gradient_of_premium_loss(self, tiny_baseline: BaselineModel, long_portfolio: Portfolio):
        """Tape gradients of mean |psi| match finite differences over 24+ steps.

        Contract 0 encodes its first step to an all-zero feature row, so with zero
        biases its first-layer inputs sit on the ReLU kink; parameters are nudged
        off it first. Losses are of order S, which puts the finite-difference
        round-off near 1e-9 absolute; the relative error uses a floor of 1e-3.
        """
        scalers = FeatureScalers(base=tiny_baseline.scaler, residual=fit_residual_scaler(long_portfolio.contracts))
        model = Model(base=tiny_baseline, res=ResidualNet([4, 3, 3, 2], np.random.default_rng(5)), scalers=scalers)
        batch = make_batches(long_portfolio.contracts, long_portfolio.cash_flows(), scalers, batch_size=2)[0]
        assert batch.steps == 36

        def loss() -> ad.Tensor:
            return ad.tensor_mean(contract_losses(model, batch))

        error = grad_check(loss, model.res.parameters(), floor=1e-3, nudge=1e-2, seed=3)
        assert error <= 1e-4


class TestFitBaseline:
    """Tests for stage-1 training."""

    def test_history_and_log(self, table: MortalityTable, temp_dir: Path):
        """One log row per epoch; tolerance not reached within three epochs."""
        config = BaselineConfig(widths=[2, 4, 2], max_epochs=3, check_every=1, tolerance=1e-9, log_every=1)
        log_path = temp_dir / "baseline_log.csv"
        model, history = fit_baseline(build_dav_dataset(table, "male"), config, seed=0, log_path=log_path)
        assert len(history.records) == 3
        assert not history.converged
        frame = pd.read_csv(log_path)
        assert list(frame.columns) == ["epoch", "lr", "kl", "grad_norm", "wall_time"]
        assert list(frame["epoch"]) == [0, 1, 2]
        assert all(not t.requires_grad for t in model.net.parameters().values())

    def test_stops_at_tolerance(self, table: MortalityTable):
        config = BaselineConfig(widths=[2, 4, 2], max_epochs=20, check_every=1, tolerance=1e6)
        _, history = fit_baseline(build_dav_dataset(table, "female"), config, seed=0)
        assert history.converged
        assert len(history.records) == 1

    def test_deterministic(self, table: MortalityTable):
        config = BaselineConfig(widths=[2, 4, 2], max_epochs=2, check_every=10)
        dataset = build_dav_dataset(table, "male")
        _, first = fit_baseline(dataset, config, seed=4)
        _, second = fit_baseline(dataset, config, seed=4)
        assert first.losses == second.losses

    def test_checkpoint_round_trip(self, tiny_baseline: BaselineModel, temp_dir: Path):
        save_baseline(temp_dir / "baseline.json", tiny_baseline)
        restored = load_baseline(temp_dir / "baseline.json")
        ages, styles = np.array([20.0, 60.0]), np.array([1, 12])
        np.testing.assert_array_equal(
            restored.death_probabilities(ages, styles), tiny_baseline.death_probabilities(ages, styles)
        )
        assert restored.gender == "male"


class TestFitResidual:
    """Tests for stage-2 training."""

    def test_risk_decreases(self, tiny_baseline: BaselineModel, long_portfolio: Portfolio):
        """Ten epochs at lr 1e-3 on a single contract lower the empirical risk."""
        single = dataclasses.replace(long_portfolio, contracts=long_portfolio.contracts[:1], _flows=None)
        config = tiny_residual_config(max_epochs=10, batch_size=1)
        _, history = fit_residual(single, tiny_baseline, config, seed=0)
        assert len(history.records) == 10
        assert history.losses[-1] < history.losses[0]

    def test_restored_parameters_reproduce_best_risk(self, tiny_baseline: BaselineModel, small_portfolio: Portfolio):
        """The recorded epoch risk is the whole-portfolio risk of the weights early stopping keeps."""
        config = tiny_residual_config(max_epochs=8, lr=0.05, warmup=1, patience=3)
        model, history = fit_residual(small_portfolio, tiny_baseline, config, seed=0)
        best = min(history.losses)
        assert history.losses[history.best_epoch] == best
        flows = small_portfolio.cash_flows()
        batches = make_batches(small_portfolio.contracts, flows, model.scalers, config.batch_size)
        assert batches_risk(model, batches, len(small_portfolio)) == pytest.approx(best, rel=1e-12)
        assert empirical_risk(model, small_portfolio) == pytest.approx(best, rel=1e-9)

    def test_log_and_callback(self, tiny_baseline: BaselineModel, small_portfolio: Portfolio, temp_dir: Path):
        seen = []
        log_path = temp_dir / "residual_log.csv"
        fit_residual(
            small_portfolio,
            tiny_baseline,
            tiny_residual_config(),
            seed=1,
            log_path=log_path,
            on_epoch_end=lambda epoch, model, history: seen.append(epoch),
        )
        assert seen == [0, 1, 2]
        assert len(pd.read_csv(log_path)["r_emp"]) == 3

    def test_deterministic(self, tiny_baseline: BaselineModel, small_portfolio: Portfolio):
        first = fit_residual(small_portfolio, tiny_baseline, tiny_residual_config(), seed=9)[1]
        second = fit_residual(small_portfolio, tiny_baseline, tiny_residual_config(), seed=9)[1]
        assert first.losses == second.losses

    def test_clip_warning_logged_once(self, tiny_baseline: BaselineModel, small_portfolio: Portfolio, caplog):
        config = tiny_residual_config(clip_norm=1e-9)
        with caplog.at_level(logging.WARNING, logger="premium_calibration.calibrate"):
            fit_residual(small_portfolio, tiny_baseline, config, seed=0)
        assert sum("pre-clip gradient norm" in r.message for r in caplog.records) == 1

    def test_best_epoch_is_lowest_risk(self, tiny_baseline: BaselineModel, small_portfolio: Portfolio):
        config = tiny_residual_config(max_epochs=8, patience=2, lr=0.05)
        _, history = fit_residual(small_portfolio, tiny_baseline, config, seed=0)
        assert len(history.records) <= 8
        assert history.best_epoch == int(np.argmin(history.losses))

    def test_empty_portfolio(self, tiny_baseline: BaselineModel, small_portfolio: Portfolio):
        empty = dataclasses.replace(small_portfolio, contracts=[], _flows=None)
        with pytest.raises(InputError):
            fit_residual(empty, tiny_baseline, tiny_residual_config(), seed=0)


class TestCheckpoints:
    """Tests for model checkpoints and portfolio consistency."""

    def test_round_trip(self, tiny_model: Model, small_portfolio: Portfolio, temp_dir: Path):
        save_model(temp_dir / "model.json", tiny_model)
        restored = load_model(temp_dir / "model.json")
        for contract in small_portfolio.contracts[:4]:
            np.testing.assert_array_equal(predict_sequence(restored, contract), predict_sequence(tiny_model, contract))
        check_consistency(restored, small_portfolio)

    def test_other_portfolio_rejected(
        self, tiny_model: Model, small_config: PortfolioConfig, ground_truth: GroundTruthModel
    ):
        other = generate_portfolio(dataclasses.replace(small_config, seed=99, N=40), ground_truth)
        with pytest.raises(ConsistencyError):
            check_consistency(tiny_model, other)

    def test_wrong_kind(self, tiny_baseline: BaselineModel, temp_dir: Path):
        save_baseline(temp_dir / "baseline.json", tiny_baseline)
        with pytest.raises(ConsistencyError, match="expected 'model'"):
            load_model(temp_dir / "baseline.json")

    def test_tampered_fingerprint(self, tiny_model: Model):
        data = tiny_model.to_checkpoint()
        data["fingerprint"] = "0" * 16
        with pytest.raises(ConsistencyError):
            Model.from_checkpoint(data)

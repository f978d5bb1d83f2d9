import math

import numpy as np
import pytest
import torch

from vpgo.checkpoint import Checkpoint, load_checkpoint, parameter_checksum, save_checkpoint
from vpgo.data import WindowSampler, collate, generate_synthetic, sample_window
from vpgo.errors import CheckpointError, ConfigError, EmptyDatasetError, ShapeError, TrainingDivergedError
from vpgo.model import GaussianParams, build_model, rollout
from vpgo.schemas import ModelConfig, TrainConfig
from vpgo.training import (
    beta_at,
    elbo_loss,
    fit,
    kl_diag_gaussian,
    make_train_state,
    reconstruction_psnr,
    train_step,
)


def _gaussians(n, shape=(2, 1, 3, 4), seed=0):
    g = torch.Generator().manual_seed(seed)
    return [GaussianParams(mu=torch.randn(shape, generator=g), sigma=torch.rand(shape, generator=g) + 0.5)
            for _ in range(n)]


@pytest.fixture
def train_cfg():
    return TrainConfig(c=2, horizon=3, batch_size=2, lr=1e-3, beta=1e-2, beta_warmup_fraction=0.0,
                       steps=2, seed=0, log_every=1)


class TestKL:
    """Closed-form KL between diagonal Gaussians."""

    def test_identical_is_zero(self):
        q = _gaussians(1)[0]
        assert kl_diag_gaussian(q.mu, q.sigma, q.mu, q.sigma).item() == 0.0

    def test_unit_shift(self):
        one = torch.ones(1, dtype=torch.float64)
        kl = kl_diag_gaussian(one, one, torch.zeros_like(one), one)
        assert kl.item() == pytest.approx(0.5, abs=1e-12)

    def test_unit_shift_matches_monte_carlo(self):
        g = torch.Generator().manual_seed(0)
        z = 1.0 + torch.randn(1_000_000, generator=g, dtype=torch.float64)
        q = torch.distributions.Normal(1.0, 1.0)
        p = torch.distributions.Normal(0.0, 1.0)
        estimate = (q.log_prob(z) - p.log_prob(z)).mean().item()
        one = torch.ones(1, dtype=torch.float64)
        assert kl_diag_gaussian(one, one, torch.zeros_like(one), one).item() == pytest.approx(estimate, abs=1e-2)

    def test_asymmetric(self):
        a = (torch.zeros(1), torch.ones(1))
        b = (torch.zeros(1), torch.full((1,), 2.0))
        assert kl_diag_gaussian(*a, *b).item() != pytest.approx(kl_diag_gaussian(*b, *a).item())

    def test_sums_over_elements(self):
        mu_q, s = torch.ones(3, 4), torch.ones(3, 4)
        assert kl_diag_gaussian(mu_q, s, torch.zeros(3, 4), s).item() == pytest.approx(0.5 * 12)

    def test_non_negative(self):
        g = torch.Generator().manual_seed(1)
        mu = torch.randn(10_000, 2, 4, generator=g, dtype=torch.float64) * 3
        sigma = torch.exp(torch.randn(10_000, 2, 4, generator=g, dtype=torch.float64))
        for i in range(10_000):
            kl = kl_diag_gaussian(mu[i, 0], sigma[i, 0], mu[i, 1], sigma[i, 1]).item()
            assert kl >= -1e-12

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(ValueError):
            kl_diag_gaussian(torch.zeros(2), torch.tensor([1.0, 0.0]), torch.zeros(2), torch.ones(2))


class TestElboLoss:
    """Reconstruction plus weighted KL."""

    def test_offset_prediction(self):
        target = torch.rand(2, 3, 3, 8, 8, dtype=torch.float64) * 0.8
        pred = target + 0.1
        q = _gaussians(3)
        report = elbo_loss(pred, target, q, q, beta=1.0)
        assert report.recon_l1.item() == pytest.approx(0.1, abs=1e-12)
        assert report.kl.item() == 0.0
        assert report.total.item() == pytest.approx(0.1, abs=1e-12)
        assert report.per_timestep_recon.shape == (3,)
        torch.testing.assert_close(report.per_timestep_recon, torch.full((3,), 0.1, dtype=torch.float64))

    def test_laplace_scale(self):
        target = torch.zeros(1, 2, 3, 4, 4)
        pred = torch.full_like(target, 0.1)
        q = _gaussians(2, shape=(1, 1, 2, 2))
        report = elbo_loss(pred, target, q, q, beta=0.0, laplace_scale=0.5)
        assert report.recon_l1.item() == pytest.approx(0.2, rel=1e-6)

    def test_beta_zero_drops_kl(self):
        target = torch.rand(2, 2, 3, 4, 4)
        pred = torch.rand(2, 2, 3, 4, 4)
        q, p = _gaussians(2, seed=0), _gaussians(2, seed=1)
        report = elbo_loss(pred, target, q, p, beta=0.0)
        assert report.kl.item() > 0
        assert report.total.item() == pytest.approx(report.recon_l1.item())

    def test_kl_is_batch_mean_summed_over_time(self):
        q, p = _gaussians(2, seed=0), _gaussians(2, seed=1)
        x = torch.zeros(2, 2, 3, 4, 4)
        report = elbo_loss(x, x, q, p, beta=1.0)
        expected = sum(kl_diag_gaussian(a.mu, a.sigma, b.mu, b.sigma).item() / 2 for a, b in zip(q, p))
        assert report.kl.item() == pytest.approx(expected, rel=1e-6)
        assert report.per_timestep_kl.shape == (2,)

    def test_misaligned_shapes(self):
        x = torch.zeros(2, 3, 3, 4, 4)
        with pytest.raises(ShapeError):
            elbo_loss(x, x[:, :2], _gaussians(3), _gaussians(3), beta=1.0)
        with pytest.raises(ShapeError):
            elbo_loss(x, x, _gaussians(2), _gaussians(3), beta=1.0)


class TestBetaSchedule:
    def test_linear_warmup(self):
        cfg = TrainConfig(beta=1e-3, beta_warmup_fraction=0.1, steps=100)
        assert beta_at(cfg, 0) == pytest.approx(1e-4)
        assert beta_at(cfg, 4) == pytest.approx(5e-4)
        assert beta_at(cfg, 9) == pytest.approx(1e-3)
        assert beta_at(cfg, 50) == pytest.approx(1e-3)

    def test_no_warmup(self):
        assert beta_at(TrainConfig(beta=0.5, beta_warmup_fraction=0.0), 0) == 0.5


class TestTrainStep:
    """One teacher-forced update."""

    def _batch(self, trajectories, cfg):
        return collate([sample_window(t, cfg.c, cfg.horizon, offset=0) for t in trajectories[:2]])

    def test_all_groups_receive_gradients(self, tiny_model_cfg, synthetic_trajectories, train_cfg):
        model = build_model(tiny_model_cfg)
        state = make_train_state(model, train_cfg)
        report, state = train_step(model, self._batch(synthetic_trajectories, train_cfg), train_cfg, state)
        assert state.step == 1
        assert math.isfinite(report.total.item())
        for name, params in model.parameter_groups().items():
            norms = [p.grad.abs().sum().item() for p in params if p.grad is not None]
            assert norms and sum(norms) > 0, name

    def test_parameters_change(self, tiny_model_cfg, synthetic_trajectories, train_cfg):
        model = build_model(tiny_model_cfg)
        before = parameter_checksum(model.state_dict())
        state = make_train_state(model, train_cfg)
        train_step(model, self._batch(synthetic_trajectories, train_cfg), train_cfg, state)
        assert parameter_checksum(model.state_dict()) != before

    def test_deterministic(self, tiny_model_cfg, synthetic_trajectories, train_cfg):
        losses = []
        for _ in range(2):
            model = build_model(tiny_model_cfg, seed=1)
            state = make_train_state(model, train_cfg)
            report, _ = train_step(model, self._batch(synthetic_trajectories, train_cfg), train_cfg, state)
            losses.append(report.total.item())
        assert losses[0] == losses[1]

    def test_divergence(self, tiny_model_cfg, synthetic_trajectories, train_cfg):
        model = build_model(tiny_model_cfg)
        batch = self._batch(synthetic_trajectories, train_cfg)
        batch.frames[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(TrainingDivergedError):
            train_step(model, batch, train_cfg, make_train_state(model, train_cfg))


class TestFit:
    """The training loop, checkpoints and resumption."""

    def test_zero_steps_keeps_parameters(self, tiny_model_cfg, synthetic_trajectories, train_cfg, tmp_path):
        model = build_model(tiny_model_cfg, seed=2)
        before = parameter_checksum(model.state_dict())
        cfg = train_cfg.model_copy(update={"steps": 0})
        ckpt = fit(model, synthetic_trajectories, cfg, out_dir=tmp_path)
        assert ckpt.step == 0
        assert ckpt.path == tmp_path / "final.pt"
        assert parameter_checksum(load_checkpoint(ckpt.path).state_dict) == before

    def test_history_and_periodic_checkpoints(self, tiny_model_cfg, synthetic_trajectories, train_cfg, tmp_path):
        cfg = train_cfg.model_copy(update={"steps": 2, "checkpoint_every": 1})
        ckpt = fit(build_model(tiny_model_cfg), synthetic_trajectories, cfg, out_dir=tmp_path)
        assert ckpt.step == 2
        assert [h["step"] for h in ckpt.extra["history"]] == [1, 2]
        assert (tmp_path / "step_000001.pt").is_file()
        assert (tmp_path / "step_000002.pt").is_file()

    def test_resume_matches_uninterrupted(self, tiny_model_cfg, synthetic_trajectories, train_cfg, tmp_path):
        straight = fit(build_model(tiny_model_cfg, seed=1), synthetic_trajectories,
                       train_cfg.model_copy(update={"steps": 2}))

        first = fit(build_model(tiny_model_cfg, seed=1), synthetic_trajectories,
                    train_cfg.model_copy(update={"steps": 1}), out_dir=tmp_path / "a")
        resumed = fit(build_model(tiny_model_cfg, seed=7), synthetic_trajectories,
                      train_cfg.model_copy(update={"steps": 2}), resume=first.path)

        assert resumed.step == 2
        assert len(resumed.extra["history"]) == 2
        assert resumed.extra["history"][-1]["total"] == pytest.approx(straight.extra["history"][-1]["total"],
                                                                      rel=1e-6)
        assert parameter_checksum(resumed.state_dict) == pytest.approx(parameter_checksum(straight.state_dict),
                                                                       rel=1e-6)

    def test_init_checkpoint_loads_donor(self, tiny_model_cfg, synthetic_trajectories, train_cfg, tmp_path):
        donor = build_model(tiny_model_cfg, seed=5)
        path = save_checkpoint(Checkpoint(model_config=tiny_model_cfg, state_dict=donor.state_dict()),
                               tmp_path / "donor.pt")
        model = build_model(tiny_model_cfg, seed=0)
        ckpt = fit(model, synthetic_trajectories, train_cfg.model_copy(update={"steps": 0}), init_checkpoint=path)
        assert parameter_checksum(ckpt.state_dict) == parameter_checksum(donor.state_dict())

    def test_donor_config_mismatch(self, tiny_model_cfg, synthetic_trajectories, train_cfg):
        other_cfg = tiny_model_cfg.model_copy(update={"latent_channels": 3})
        donor = Checkpoint(model_config=other_cfg, state_dict=build_model(other_cfg).state_dict())
        with pytest.raises(ConfigError):
            fit(build_model(tiny_model_cfg), synthetic_trajectories, train_cfg, init_checkpoint=donor)

    def test_empty_dataset(self, tiny_model_cfg, train_cfg):
        with pytest.raises(EmptyDatasetError):
            fit(build_model(tiny_model_cfg), [], train_cfg)

    def test_too_short_dataset(self, tiny_model_cfg, train_cfg):
        short = generate_synthetic(seed=0, n_traj=2, T=4)
        with pytest.raises(EmptyDatasetError):
            fit(build_model(tiny_model_cfg), short, train_cfg)

    def test_checkpoint_round_trip(self, tiny_model_cfg, tmp_path):
        model = build_model(tiny_model_cfg, seed=3)
        sampler = WindowSampler(generate_synthetic(seed=0, n_traj=1, T=8), 2, 3, seed=0)
        path = save_checkpoint(Checkpoint(model_config=tiny_model_cfg, state_dict=model.state_dict(), step=4,
                                          sampler_state=sampler.get_state()), tmp_path / "c.pt")
        loaded = load_checkpoint(path)
        assert loaded.step == 4
        assert loaded.model_config == tiny_model_cfg
        assert parameter_checksum(loaded.build().state_dict()) == parameter_checksum(model.state_dict())

    def test_checkpoint_version_mismatch(self, tmp_path):
        path = tmp_path / "old.pt"
        torch.save({"format_version": 0}, path)
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.pt")

    def test_unreadable_checkpoint(self, tmp_path):
        path = tmp_path / "garbage.pt"
        path.write_bytes(b"not a torch file")
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(path)


@pytest.mark.slow
class TestLearning:
    """Small models fit a handful of synthetic episodes."""

    @pytest.fixture(scope="class")
    def trained(self):
        data = generate_synthetic(seed=0, n_traj=2, T=12, scene_cfg={"grasp_success_prob": 0.5})
        cfg = ModelConfig(channel_scale=0.125, feature_channels=64, latent_channels=4, lstm_hidden=64)
        model = build_model(cfg, seed=0)
        train_cfg = TrainConfig(c=2, horizon=10, batch_size=2, lr=1e-3, beta=1e-4, steps=2000, seed=0,
                                log_every=100)
        ckpt = fit(model, data, train_cfg)
        return model, data, ckpt

    def test_overfit_reconstruction(self, trained):
        model, data, _ = trained
        windows = [sample_window(t, 2, 10, offset=0) for t in data]
        assert reconstruction_psnr(model, windows, c=2) > 30.0

    def test_loss_trends_down(self, trained):
        """Means of consecutive 100-step blocks fall over the first 1000 steps."""
        _, _, ckpt = trained
        totals = np.array([h["total"] for h in ckpt.extra["history"]])
        assert len(totals) == 2000
        means = totals[:1000].reshape(10, 100).mean(axis=1)
        assert np.all(np.diff(means) < 0), means

    def test_prior_samples_stay_stochastic(self, trained):
        """100 prior rollouts of a grasp episode split into visibly different futures."""
        model, data, _ = trained
        w = sample_window(data[0], 2, 10, offset=0)
        samples = rollout(model, w.context, w.actions, n_samples=100, seed=0)
        assert samples.shape == (100, 10, 48, 64, 3)
        again = rollout(model, w.context, w.actions, n_samples=100, seed=0)
        floor = max(float(np.abs(samples - again).mean()), 1e-4)

        last = torch.from_numpy(samples[:, -1].reshape(100, -1).astype(np.float64))
        pairwise = torch.cdist(last, last, p=1) / last.shape[1]
        assert pairwise.max().item() > 10 * floor
        i, j = divmod(int(pairwise.argmax()), 100)
        assert np.abs(samples[i, -1] - samples[j, -1]).max() > 0.25

    def test_finetune_from_donor(self, trained, tmp_path):
        donor_model, _, _ = trained
        donor = Checkpoint(model_config=donor_model.cfg,
                           state_dict={k: v.clone() for k, v in donor_model.state_dict().items()})
        new_data = generate_synthetic(seed=11, n_traj=4, T=12)
        windows = [sample_window(t, 2, 10, offset=0) for t in new_data]
        start = reconstruction_psnr(donor.build(), windows, c=2)
        model = build_model(donor_model.cfg, seed=1)
        fit(model, new_data, TrainConfig(c=2, horizon=10, batch_size=2, lr=1e-4, steps=500, seed=1),
            init_checkpoint=donor)
        assert reconstruction_psnr(model, windows, c=2) > start

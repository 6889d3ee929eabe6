import numpy as np
import pytest
import torch

from mohba.baselines import (
    FlatVae,
    FlatVaeConfig,
    LstmBaseline,
    LstmBatch,
    LstmConfig,
    flat_elbo,
    flat_vae_embed,
    flat_vae_train,
    lstm_batch_from,
    lstm_embed,
    lstm_train,
)
from mohba.hvae import (
    ModelConfig,
    MohbaModel,
    _gaussian_log_prob,
    _sample_gmm_batch,
    gaussian_kl,
    to_tensor_batch,
)
from mohba.trajdata import DatasetMeta, Trajectory, TrajectoryDataset
from mohba.training import TrainConfig, load_checkpoint, save_checkpoint


def make_dataset(n_trajs=6, T=5, seed=0, constant_action=None):
    rng = np.random.default_rng(seed)
    meta = DatasetMeta(2, 2, (2, 2), T, False)
    ds = TrajectoryDataset(meta=meta)
    for _ in range(n_trajs):
        states = rng.standard_normal((T + 1, 2))
        if constant_action is None:
            actions = [rng.standard_normal((T, 2)) for _ in range(2)]
        else:
            actions = [np.full((T, 2), constant_action) for _ in range(2)]
        ds.append(Trajectory(states=states, actions=actions))
    return ds


def lstm_cfg():
    return LstmConfig(n_agents=2, state_dim=2, action_dims=(2, 2), rnn_hidden=4,
                      head_hidden=4)


def flat_cfg():
    return FlatVaeConfig(n_agents=2, state_dim=2, action_dims=(2, 2), d_omega=2,
                         gmm_components=2, rnn_hidden=4, mlp_hidden=4,
                         policy_hidden=4)


class TestLstmConfig:
    def test_from_meta(self):
        meta = DatasetMeta(3, 4, (2, 2, 2), 10, True)
        cfg = LstmConfig.from_meta(meta, rnn_hidden=8)
        assert (cfg.n_agents, cfg.state_dim, cfg.action_dims) == (3, 4, (2, 2, 2))
        assert cfg.rnn_hidden == 8

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            LstmConfig(n_agents=0, state_dim=2, action_dims=())
        with pytest.raises(ValueError):
            LstmConfig(n_agents=2, state_dim=2, action_dims=(2,))


class TestLstmBatch:
    def test_inputs_pair_state_with_previous_action(self):
        ds = make_dataset(n_trajs=1, T=3, seed=2)
        batch = lstm_batch_from(ds, lstm_cfg())
        traj = ds.trajectories[0]
        assert batch.inputs.shape == (1, 3, 2 + 4)
        np.testing.assert_allclose(batch.inputs[0, :, :2].numpy(), traj.states[:3])
        # first step sees a zero previous action
        assert torch.equal(batch.inputs[0, 0, 2:], torch.zeros(4, dtype=batch.inputs.dtype))
        joint_a1 = np.concatenate([traj.actions[0][1], traj.actions[1][1]])
        np.testing.assert_allclose(batch.inputs[0, 2, 2:].numpy(), joint_a1)

    def test_targets_are_current_joint_actions(self):
        ds = make_dataset(n_trajs=2, T=4, seed=3)
        batch = lstm_batch_from(ds, lstm_cfg())
        traj = ds.trajectories[1]
        joint = np.concatenate([traj.actions[0], traj.actions[1]], axis=1)
        np.testing.assert_allclose(batch.targets[1].numpy(), joint)


class TestLstmBaseline:
    def test_predict_shape(self):
        model = LstmBaseline(lstm_cfg(), init_seed=0)
        batch = lstm_batch_from(make_dataset(n_trajs=3, T=5).trajectories, lstm_cfg())
        out = model.predict(batch)
        assert out.shape == (3, 5, 4)

    def test_causality(self):
        # predictions up to step t must not depend on inputs after t
        model = LstmBaseline(lstm_cfg(), init_seed=1)
        batch = lstm_batch_from(make_dataset(n_trajs=2, T=6, seed=4).trajectories,
                                lstm_cfg())
        base = model.predict(batch)
        bumped = batch.inputs.clone()
        bumped[:, 4:, :] += 3.0
        out = model.predict(LstmBatch(inputs=bumped, targets=batch.targets))
        assert torch.allclose(out[:, :4], base[:, :4], atol=1e-12)
        assert not torch.allclose(out[:, 4:], base[:, 4:], atol=1e-6)

    def test_train_fits_constant_actions(self):
        ds = make_dataset(n_trajs=5, T=5, seed=1, constant_action=0.5)
        tc = TrainConfig(steps=400, batch_size=5, learning_rate=1e-2, seed=0,
                         log_every=50)
        model, log = lstm_train(ds, tc, model_config=lstm_cfg())
        mse = log.column("mse")
        assert mse[0] > 1.0
        assert mse[-1] < 0.05

    def test_train_deterministic(self):
        ds = make_dataset(seed=7)
        tc = TrainConfig(steps=30, batch_size=4, seed=3)
        m1, _ = lstm_train(ds, tc, model_config=lstm_cfg())
        m2, _ = lstm_train(ds, tc, model_config=lstm_cfg())
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(a, b)

    def test_embed_properties(self):
        traj = make_dataset(n_trajs=1, T=4, seed=5).trajectories[0]
        twin = Trajectory(states=traj.states.copy(),
                          actions=[a.copy() for a in traj.actions])
        model = LstmBaseline(lstm_cfg(), init_seed=2)
        e1 = lstm_embed(model, traj)
        e2 = lstm_embed(model, twin)
        assert e1.shape == (4,)
        assert torch.equal(e1, e2)

    def test_embed_sensitive_to_late_inputs(self):
        # a_{T-2} feeds the last input step; a_{T-1} is only ever a target
        traj = make_dataset(n_trajs=1, T=4, seed=6).trajectories[0]
        changed = [a.copy() for a in traj.actions]
        changed[0][-2] += 2.0
        other = Trajectory(states=traj.states.copy(), actions=changed)
        model = LstmBaseline(lstm_cfg(), init_seed=2)
        assert not torch.allclose(lstm_embed(model, traj), lstm_embed(model, other))

        final_only = [a.copy() for a in traj.actions]
        final_only[0][-1] += 2.0
        same = Trajectory(states=traj.states.copy(), actions=final_only)
        assert torch.equal(lstm_embed(model, traj), lstm_embed(model, same))

    def test_checkpoint_round_trip(self, tmp_path):
        model = LstmBaseline(lstm_cfg(), init_seed=3)
        path = tmp_path / "lstm.bin"
        save_checkpoint(model, None, path)
        loaded, _ = load_checkpoint(path)
        assert type(loaded) is LstmBaseline
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(a, b)


class TestFlatVae:
    def test_elbo_parts_have_no_local_term(self):
        model = FlatVae(flat_cfg(), init_seed=0)
        gen = torch.Generator().manual_seed(0)
        loss, parts = flat_elbo(model, make_dataset(), beta=0.5, rng=gen)
        assert set(parts) == {"recon", "kl_joint"}

    def test_beta_zero_loss_is_negative_recon(self):
        model = FlatVae(flat_cfg(), init_seed=1)
        gen = torch.Generator().manual_seed(4)
        loss, parts = flat_elbo(model, make_dataset(seed=2), beta=0.0, rng=gen)
        assert loss.item() == -parts["recon"].item()

    def test_loss_decomposition_identity(self):
        model = FlatVae(flat_cfg(), init_seed=2)
        gen = torch.Generator().manual_seed(1)
        loss, parts = flat_elbo(model, make_dataset(seed=3), beta=0.3, rng=gen)
        expected = -(parts["recon"].item() - 0.3 * parts["kl_joint"].item())
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        model = FlatVae(flat_cfg(), init_seed=5)
        tb = make_dataset(n_trajs=2, T=3, seed=8)

        def loss_value():
            gen = torch.Generator().manual_seed(123)
            loss, _ = flat_elbo(model, tb, beta=0.5, rng=gen)
            return loss

        loss = loss_value()
        model.zero_grad()
        loss.backward()
        h = 1e-4
        rng = np.random.default_rng(0)
        params = [p for p in model.parameters() if p.grad is not None]
        for p in params[:: max(1, len(params) // 6)]:
            flat = p.detach().reshape(-1)
            idx = int(rng.integers(flat.numel()))
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
            up = loss_value().item()
            with torch.no_grad():
                flat[idx] = orig - h
            down = loss_value().item()
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.reshape(-1)[idx].item()
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-3

    def test_matches_hierarchical_joint_path(self):
        # with identical weights in the shared submodules, the flat model's
        # loss must equal the same quantity computed from the full model's
        # joint encoder, prior, and policy head under the same noise
        fcfg = flat_cfg()
        mcfg = ModelConfig(n_agents=2, state_dim=2, action_dims=(2, 2), d_omega=2,
                           d_alpha=2, gmm_components=2, rnn_hidden=4, mlp_hidden=4,
                           policy_hidden=4)
        full = MohbaModel(mcfg, init_seed=9)
        flat = FlatVae(fcfg, init_seed=0)
        shared = {k: v for k, v in full.state_dict().items()
                  if k in dict(flat.state_dict())}
        missing = flat.load_state_dict(shared, strict=False)
        assert missing.missing_keys == []

        ds = make_dataset(n_trajs=3, T=4, seed=11)
        tb = to_tensor_batch(ds, mcfg)
        beta = 0.7
        loss, parts = flat_elbo(flat, tb, beta=beta, rng=torch.Generator().manual_seed(21))

        from mohba.hvae import _gmm_log_prob

        gen = torch.Generator().manual_seed(21)
        logits, mu, log_std = full.joint_params_batch(tb)
        B, _, D = mu.shape
        z = _sample_gmm_batch(logits, mu, log_std, gen)
        z_alpha = z[:, None, :].expand(B, mcfg.n_agents, D)
        means, log_stds = full.policy_params_batch(tb.states, z_alpha)
        recon = torch.zeros(B, dtype=mu.dtype)
        for i, a_i in enumerate(mcfg.action_dims):
            recon = recon + _gaussian_log_prob(
                tb.actions[:, i, :, :a_i], means[:, i, :, :a_i],
                log_stds[:, i, :, :a_i]).sum(dim=-1)
        z2 = _sample_gmm_batch(logits, mu, log_std, gen)
        prior = full.joint_prior
        kl = (_gmm_log_prob(z2, logits, mu, log_std)
              - _gmm_log_prob(z2, prior.logits, prior.means, prior.log_stds))
        expected = -(recon.mean() - beta * kl.mean())
        assert loss.item() == pytest.approx(expected.item(), abs=1e-10)
        assert parts["recon"].item() == pytest.approx(recon.mean().item(), abs=1e-10)

    def test_train_deterministic(self):
        ds = make_dataset(seed=13)
        tc = TrainConfig(steps=25, batch_size=4, seed=2, beta_max=1e-3)
        m1, _ = flat_vae_train(ds, tc, model_config=flat_cfg())
        m2, _ = flat_vae_train(ds, tc, model_config=flat_cfg())
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(a, b)

    def test_embed_shape_and_determinism(self):
        traj = make_dataset(n_trajs=1, seed=14).trajectories[0]
        model = FlatVae(flat_cfg(), init_seed=3)
        e1 = flat_vae_embed(model, traj)
        e2 = flat_vae_embed(model, traj)
        assert e1.shape == (2,)
        assert torch.equal(e1, e2)

    def test_checkpoint_round_trip(self, tmp_path):
        model = FlatVae(flat_cfg(), init_seed=6)
        path = tmp_path / "flat.bin"
        save_checkpoint(model, None, path)
        loaded, _ = load_checkpoint(path)
        assert type(loaded) is FlatVae
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(a, b)

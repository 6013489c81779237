"""Action head: loss identities, sampler oracles, variants, and stage-2 training."""

import numpy as np
import pytest

from mwm import dynamics as dyn
from mwm import policy as pol
from mwm import tensorkit as tk
from mwm.backbone import BackboneConfig, FeatureBank
from mwm.errors import ContractError
from mwm.optim import AdamW, OptimConfig
from mwm.tensorkit import Rng, Tensor

RNG = np.random.default_rng(77)


def tiny_cfgs():
    bcfg = BackboneConfig(layers=2, width=32, heads=2, token_dim=6, text_width=8,
                          cross_view_period=2, rope_scale=(1.0, 1.0, 1.0))
    dcfg = dyn.DynamicsConfig(memory_frames=2, future_frames=2, views=2,
                              text_len=3, text_vocab=8)
    pcfg = pol.PolicyConfig(layers=2, width=16, heads=2, horizon=4,
                            action_dim=2, state_dim=1, sampler_steps=6)
    return bcfg, dcfg, pcfg


def make_bank(pcfg, batch=2, tokens=5, width=32, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    layers = [Tensor(np.zeros((batch, tokens, width)) if zero
                     else rng.normal(size=(batch, tokens, width)))
              for _ in range(pcfg.layers)]
    coords = np.zeros((batch, tokens, 4), dtype=np.int64)
    coords[:, :, 3] = np.arange(tokens)
    return FeatureBank(layers, coords, np.zeros((batch, tokens), dtype=bool))


def action_episode(dcfg, length=8, grid=(2, 2), d=6, action_dim=3, seed=0):
    rng = np.random.default_rng(seed)
    shape = (dcfg.views, length, *grid, d)
    return dyn.LatentEpisode(rng.normal(size=shape), rng.normal(size=shape),
                             rng.integers(0, 8, size=dcfg.text_len),
                             actions=rng.normal(size=(length, action_dim)))


class TestConfig:
    def test_chunk_dim(self):
        assert pol.PolicyConfig(action_dim=2, state_dim=1).chunk_dim == 3

    def test_default_horizon_and_sampler(self):
        cfg = pol.PolicyConfig()
        assert cfg.horizon == 36
        assert cfg.sampler_steps == 10

    def test_sigma_range_contract(self):
        with pytest.raises(ContractError):
            pol.PolicyConfig(sigma_min=0.0)
        with pytest.raises(ContractError):
            pol.PolicyConfig(sigma_min=1.0, sigma_max=0.5)

    def test_head_divisibility_contract(self):
        with pytest.raises(ContractError):
            pol.PolicyConfig(width=10, heads=4)

    def test_depth_must_match_backbone(self):
        bcfg, _, pcfg = tiny_cfgs()
        bad = pol.PolicyConfig(layers=3, width=pcfg.width, heads=pcfg.heads)
        with pytest.raises(ContractError):
            pol.init_policy_params(bad, bcfg, Rng(0))


class TestNormalizer:
    def test_round_trip_exact(self):
        _, dcfg, _ = tiny_cfgs()
        eps = [action_episode(dcfg, seed=s) for s in range(3)]
        norm = pol.ActionNormalizer.fit(eps)
        u = RNG.normal(size=(5, 3))
        assert np.array_equal(norm.invert(norm.apply(u)), u) or \
            np.abs(norm.invert(norm.apply(u)) - u).max() < 1e-12

    def test_fit_statistics(self):
        _, dcfg, _ = tiny_cfgs()
        eps = [action_episode(dcfg, seed=s) for s in range(4)]
        norm = pol.ActionNormalizer.fit(eps)
        rows = np.concatenate([e.actions for e in eps])
        z = norm.apply(rows)
        assert np.abs(z.mean(axis=0)).max() < 1e-12
        assert np.abs(z.std(axis=0) - 1.0).max() < 1e-12

    def test_constant_dimension_floors(self):
        _, dcfg, _ = tiny_cfgs()
        ep = action_episode(dcfg)
        ep.actions[:, 1] = 0.25
        norm = pol.ActionNormalizer.fit([ep])
        assert norm.std[1] == 1e-6  # floored, never a division by zero


class TestPolicyForward:
    def _params(self):
        bcfg, _, pcfg = tiny_cfgs()
        return pol.init_policy_params(pcfg, bcfg, Rng(3)), bcfg, pcfg

    def test_output_shape_matches_chunk(self):
        params, _, pcfg = self._params()
        u = RNG.normal(size=(2, pcfg.horizon, pcfg.chunk_dim))
        out = pol.policy_forward(params, u, np.array([0.5, 1.0]), make_bank(pcfg), pcfg)
        assert out.shape == u.shape

    def test_zero_bank_output_independent_of_bank_geometry(self):
        # Bias-free value projection: zeroed bank features contribute exactly
        # nothing, so the token count of the bank cannot matter.
        params, _, pcfg = self._params()
        u = RNG.normal(size=(2, pcfg.horizon, pcfg.chunk_dim))
        sig = np.array([0.3, 2.0])
        a = pol.policy_forward(params, u, sig, make_bank(pcfg, tokens=5, zero=True), pcfg)
        b = pol.policy_forward(params, u, sig, make_bank(pcfg, tokens=9, zero=True), pcfg)
        assert np.array_equal(a.numpy(), b.numpy())

    def test_bank_token_permutation_invariance(self):
        params, _, pcfg = self._params()
        u = RNG.normal(size=(2, pcfg.horizon, pcfg.chunk_dim))
        sig = np.array([0.5, 0.5])
        bank = make_bank(pcfg, tokens=7, seed=4)
        perm = np.random.default_rng(8).permutation(7)
        shuffled = FeatureBank([Tensor(t.numpy()[:, perm]) for t in bank.layers],
                               bank.coords[:, perm], bank.memory[:, perm])
        a = pol.policy_forward(params, u, sig, bank, pcfg).numpy()
        b = pol.policy_forward(params, u, sig, shuffled, pcfg).numpy()
        assert np.abs(a - b).max() < 1e-9

    def test_bank_depth_contract(self):
        params, _, pcfg = self._params()
        bank = make_bank(pcfg)
        short = FeatureBank(bank.layers[:1], bank.coords, bank.memory)
        u = np.zeros((2, pcfg.horizon, pcfg.chunk_dim))
        with pytest.raises(ContractError):
            pol.policy_forward(params, u, np.array([1.0, 1.0]), short, pcfg)

    def test_horizon_contract(self):
        params, _, pcfg = self._params()
        u = np.zeros((2, pcfg.horizon + 1, pcfg.chunk_dim))
        with pytest.raises(ContractError):
            pol.policy_forward(params, u, np.array([1.0, 1.0]), make_bank(pcfg), pcfg)

    def test_sigma_positive_contract(self):
        params, _, pcfg = self._params()
        u = np.zeros((1, pcfg.horizon, pcfg.chunk_dim))
        with pytest.raises(ContractError):
            pol.policy_forward(params, u, np.array([0.0]), make_bank(pcfg, batch=1), pcfg)


class TestActionLoss:
    def _setup(self, batch=2):
        bcfg, _, pcfg = tiny_cfgs()
        params = pol.init_policy_params(pcfg, bcfg, Rng(5))
        chunks = np.random.default_rng(6).normal(size=(batch, pcfg.horizon, pcfg.chunk_dim))
        return params, pcfg, chunks, make_bank(pcfg, batch=batch, seed=7)

    def test_zero_model_weighting_identity(self):
        # Freshly initialized params output zero, so the sigma^2 weighting
        # cancels the 1/sigma^2 target energy: loss == mean ||eps||^2 exactly,
        # identical at wildly different noise levels.
        params, pcfg, chunks, bank = self._setup()
        eps = np.random.default_rng(9).normal(size=chunks.shape)
        losses = []
        for sig in (0.02, 1.0, 5.0):
            sigma = np.full(chunks.shape[0], sig)
            losses.append(pol.action_loss(params, chunks, bank, pcfg, Rng(0),
                                          sigma=sigma, eps=eps).item())
        want = np.mean(np.sum(eps ** 2, axis=(1, 2)))
        assert all(abs(l - want) < 1e-9 for l in losses)

    def test_oracle_denoiser_scores_zero(self, monkeypatch):
        # A model that outputs exactly -eps/sigma is the unique zero of the
        # objective at any noise level.
        params, pcfg, chunks, bank = self._setup()
        eps = np.random.default_rng(10).normal(size=chunks.shape)
        sigma = np.array([0.7, 1.3])
        oracle = lambda p, u, s, b, c: Tensor(-eps / s[:, None, None])
        monkeypatch.setattr(pol, "policy_forward", oracle)
        loss = pol.action_loss(params, chunks, bank, pcfg, Rng(0),
                               sigma=sigma, eps=eps).item()
        assert loss == 0.0

    def test_sigma_contract(self):
        params, pcfg, chunks, bank = self._setup()
        with pytest.raises(ContractError):
            pol.action_loss(params, chunks, bank, pcfg, Rng(0),
                            sigma=np.array([1.0, -2.0]))

    def test_loss_deterministic_in_rng(self):
        params, pcfg, chunks, bank = self._setup()
        a = pol.action_loss(params, chunks, bank, pcfg, Rng(12)).item()
        b = pol.action_loss(params, chunks, bank, pcfg, Rng(12)).item()
        assert a == b

    def test_gradient_reaches_backbone_through_bank(self):
        # End-to-end coupling: stage-2 gradients must flow through the feature
        # bank into backbone weights.  Warm the zero-initialized output heads
        # first so neither side blocks the path.
        bcfg, dcfg, pcfg = tiny_cfgs()
        params = dyn.init_dynamics_params(bcfg, dcfg, Rng(0))
        params.update(pol.init_policy_params(pcfg, bcfg, Rng(1)))
        params["policy.out_proj.w"].data += 0.01
        rng = np.random.default_rng(13)
        memory = rng.normal(size=(2, dcfg.views, dcfg.memory_frames, 2, 2, 6))
        text = rng.integers(0, 8, size=(2, dcfg.text_len))
        chunks = rng.normal(size=(2, pcfg.horizon, pcfg.chunk_dim))
        bank = pol.compute_feature_bank(params, memory, text, bcfg, dcfg, pcfg, Rng(2))
        loss = pol.action_loss(params, chunks, bank, pcfg, Rng(3))
        tk.backward(loss)
        assert params["blocks.0.attn.wq"].grad is not None
        assert np.abs(params["blocks.0.attn.wq"].grad).max() > 0
        assert np.abs(params["in_proj.w"].grad).max() > 0

    def test_backbone_gradient_matches_finite_difference(self):
        bcfg, dcfg, pcfg = tiny_cfgs()
        params = dyn.init_dynamics_params(bcfg, dcfg, Rng(0))
        params.update(pol.init_policy_params(pcfg, bcfg, Rng(1)))
        params["policy.out_proj.w"].data += 0.01
        rng = np.random.default_rng(14)
        memory = rng.normal(size=(1, dcfg.views, dcfg.memory_frames, 2, 2, 6))
        text = rng.integers(0, 8, size=(1, dcfg.text_len))
        chunks = rng.normal(size=(1, pcfg.horizon, pcfg.chunk_dim))
        sigma, eps = np.array([0.8]), rng.normal(size=chunks.shape)

        def loss_value():
            bank = pol.compute_feature_bank(params, memory, text, bcfg, dcfg, pcfg,
                                            Rng(2))
            return pol.action_loss(params, chunks, bank, pcfg, Rng(3),
                                   sigma=sigma, eps=eps)

        loss = loss_value()
        tk.backward(loss)
        target = params["blocks.1.ffn.w1"]
        got = target.grad[0, 0]
        h = 1e-5
        with tk.no_grad():
            target.data[0, 0] += h
            hi = loss_value().item()
            target.data[0, 0] -= 2 * h
            lo = loss_value().item()
            target.data[0, 0] += h
        want = (hi - lo) / (2 * h)
        assert abs(got - want) / max(abs(want), 1e-8) < 1e-5


class TestSampler:
    def test_sigma_grid_shape(self):
        _, _, pcfg = tiny_cfgs()
        grid = pol.sigma_grid(pcfg)
        assert grid[0] == pcfg.sigma_max
        assert grid[-2] == pytest.approx(pcfg.sigma_min)
        assert grid[-1] == 0.0
        assert np.all(np.diff(grid) < 0)

    def test_sigma_grid_single_step(self):
        _, _, pcfg = tiny_cfgs()
        assert np.array_equal(pol.sigma_grid(pcfg, 1), [pcfg.sigma_max, 0.0])
        with pytest.raises(ContractError):
            pol.sigma_grid(pcfg, 0)

    def test_dirac_oracle_recovers_data_point(self):
        # Score of a Dirac at u0 smoothed by sigma is (u0 - u)/sigma^2; the
        # final clamp step to sigma = 0 lands exactly on u0.
        _, _, pcfg = tiny_cfgs()
        u0 = RNG.normal(size=(1, pcfg.horizon, pcfg.chunk_dim))
        out = pol.sample_chunk(None, None, pcfg, Rng(21),
                               denoiser=lambda u, s: (u0 - u) / s ** 2)
        assert np.abs(out - u0).max() < 1e-6

    def test_dirac_error_contracts_monotonically(self):
        _, _, pcfg = tiny_cfgs()
        u0 = RNG.normal(size=(1, pcfg.horizon, pcfg.chunk_dim))
        errs = []

        def oracle(u, s):
            errs.append(np.abs(u - u0).max())
            return (u0 - u) / s ** 2

        pol.sample_chunk(None, None, pcfg, Rng(22), denoiser=oracle)
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_deterministic_given_seed(self):
        bcfg, _, pcfg = tiny_cfgs()
        params = pol.init_policy_params(pcfg, bcfg, Rng(5))
        params["policy.out_proj.w"].data += 0.05
        bank = make_bank(pcfg, batch=1, seed=3)
        a = pol.sample_chunk(params, bank, pcfg, Rng(9))
        b = pol.sample_chunk(params, bank, pcfg, Rng(9))
        assert np.array_equal(a, b)

    def test_batch_width_from_bank(self):
        bcfg, _, pcfg = tiny_cfgs()
        params = pol.init_policy_params(pcfg, bcfg, Rng(5))
        out = pol.sample_chunk(params, make_bank(pcfg, batch=3), pcfg, Rng(1))
        assert out.shape == (3, pcfg.horizon, pcfg.chunk_dim)

    def test_u_init_override(self):
        # Lockstep evaluation injects per-episode noise; identical injections
        # must give identical chunks regardless of the rng argument.
        _, _, pcfg = tiny_cfgs()
        u0 = RNG.normal(size=(2, pcfg.horizon, pcfg.chunk_dim))
        init = RNG.normal(size=(2, pcfg.horizon, pcfg.chunk_dim))
        oracle = lambda u, s: (u0 - u) / s ** 2
        a = pol.sample_chunk(None, None, pcfg, Rng(1), denoiser=oracle, u_init=init)
        b = pol.sample_chunk(None, None, pcfg, Rng(2), denoiser=oracle, u_init=init)
        assert np.array_equal(a, b)


class TestFeatureBank:
    def test_single_pass_depth_and_shape(self):
        bcfg, dcfg, pcfg = tiny_cfgs()
        params = dyn.init_dynamics_params(bcfg, dcfg, Rng(0))
        rng = np.random.default_rng(1)
        memory = rng.normal(size=(2, dcfg.views, dcfg.memory_frames, 2, 2, 6))
        text = rng.integers(0, 8, size=(2, dcfg.text_len))
        bank = pol.compute_feature_bank(params, memory, text, bcfg, dcfg, pcfg, Rng(4))
        total = dcfg.views * (dcfg.memory_frames + dcfg.future_frames) * 4
        assert bank.depth == bcfg.layers
        assert bank.layers[0].shape == (2, total, bcfg.width)

    def test_rollout_mode_differs_from_single_pass(self):
        bcfg, dcfg, pcfg = tiny_cfgs()
        params = dyn.init_dynamics_params(bcfg, dcfg, Rng(0))
        rng = np.random.default_rng(2)
        memory = rng.normal(size=(1, dcfg.views, dcfg.memory_frames, 2, 2, 6))
        text = rng.integers(0, 8, size=(1, dcfg.text_len))
        a = pol.compute_feature_bank(params, memory, text, bcfg, dcfg, pcfg, Rng(4))
        rcfg = pol.PolicyConfig(layers=2, width=16, heads=2, horizon=4, action_dim=2,
                                state_dim=1, rollout_features=True)
        b = pol.compute_feature_bank(params, memory, text, bcfg, dcfg, rcfg, Rng(4))
        assert not np.array_equal(a.layers[-1].numpy(), b.layers[-1].numpy())

    def test_z_future_injection_is_deterministic(self):
        bcfg, dcfg, pcfg = tiny_cfgs()
        params = dyn.init_dynamics_params(bcfg, dcfg, Rng(0))
        rng = np.random.default_rng(3)
        memory = rng.normal(size=(1, dcfg.views, dcfg.memory_frames, 2, 2, 6))
        text = rng.integers(0, 8, size=(1, dcfg.text_len))
        z = rng.normal(size=(1, dcfg.views, dcfg.future_frames, 2, 2, 6))
        a = pol.compute_feature_bank(params, memory, text, bcfg, dcfg, pcfg, Rng(1),
                                     z_future=z)
        b = pol.compute_feature_bank(params, memory, text, bcfg, dcfg, pcfg, Rng(2),
                                     z_future=z)
        assert np.array_equal(a.layers[-1].numpy(), b.layers[-1].numpy())


class TestInverseDynamics:
    def _linear_world(self, n=40, length=10, grid=(2, 2), d=6, seed=0):
        # Masks encode a position directly; the action between frames is the
        # mean displacement, so a linear readout solves the regression.
        _, dcfg, _ = tiny_cfgs()
        rng = np.random.default_rng(seed)
        eps = []
        for _ in range(n):
            pos = np.cumsum(rng.normal(size=(length, 3)) * 0.1, axis=0)
            masks = np.zeros((dcfg.views, length, *grid, d))
            masks[..., :3] = pos[None, :, None, None, :]
            actions = np.zeros((length, 3))
            actions[:-1] = np.diff(pos, axis=0)
            eps.append(dyn.LatentEpisode(masks.copy(), masks, rng.integers(0, 8, 3),
                                         actions=actions))
        return eps

    def test_linear_dynamics_learned(self):
        eps = self._linear_world()
        pcfg = pol.PolicyConfig(layers=2, width=16, heads=2, horizon=4,
                                action_dim=3, state_dim=0, idm_hidden=32)
        params = pol.train_idm(eps, pcfg, steps=400, batch_size=32, seed=0, lr=1e-2)
        x, y = pol.sample_idm_batch(eps, 3, 64, Rng(123).split("holdout"))
        mse = float(np.mean((pol.idm_forward(params, x).numpy() - y) ** 2))
        assert mse < 1e-3

    def test_training_deterministic(self):
        eps = self._linear_world(n=6, length=6)
        pcfg = pol.PolicyConfig(layers=2, width=16, heads=2, horizon=4,
                                action_dim=3, state_dim=0, idm_hidden=8)
        a = pol.train_idm(eps, pcfg, steps=5, batch_size=4, seed=3)
        b = pol.train_idm(eps, pcfg, steps=5, batch_size=4, seed=3)
        for k in a:
            assert np.array_equal(a[k].data, b[k].data), k


class TestC1Actions:
    def _idm(self, feat, action_dim=3):
        return pol.init_idm_params(2 * feat, 8, action_dim, Rng(0))

    def test_one_action_per_rollout_frame(self):
        rollout = RNG.normal(size=(2, 2, 3, 2, 2, 6))  # tau = 3
        params = self._idm(rollout[:, :, 0].reshape(2, -1).shape[1])
        actions, cache = pol.c1_actions(params, rollout, prev_mask=None)
        assert actions.shape == (2, 3, 3)
        assert np.array_equal(cache, rollout[:, :, 0])

    def test_cache_feeds_first_pair(self):
        rollout = RNG.normal(size=(1, 2, 2, 2, 2, 6))
        prev = RNG.normal(size=(1, 2, 2, 2, 6))
        feat = prev.reshape(1, -1).shape[1]
        params = self._idm(feat)
        with_cache, _ = pol.c1_actions(params, rollout, prev)
        without, _ = pol.c1_actions(params, rollout, None)
        # First action differs (different left frame); later ones agree.
        assert not np.array_equal(with_cache[:, 0], without[:, 0])
        assert np.array_equal(with_cache[:, 1:], without[:, 1:])

    def test_single_frame_rollout_degenerates(self):
        rollout = RNG.normal(size=(1, 2, 1, 2, 2, 6))
        params = self._idm(rollout[:, :, 0].reshape(1, -1).shape[1])
        actions, _ = pol.c1_actions(params, rollout, None)
        assert actions.shape == (1, 1, 3)

    def test_deterministic(self):
        rollout = RNG.normal(size=(1, 2, 3, 2, 2, 6))
        params = self._idm(rollout[:, :, 0].reshape(1, -1).shape[1])
        a, _ = pol.c1_actions(params, rollout, None)
        b, _ = pol.c1_actions(params, rollout, None)
        assert np.array_equal(a, b)


class TestStage2:
    def _setup(self, action_dim=3):
        bcfg, dcfg, pcfg = tiny_cfgs()
        pcfg = pol.PolicyConfig(layers=2, width=16, heads=2, horizon=4,
                                action_dim=action_dim, state_dim=0)
        eps = [action_episode(dcfg, seed=s, action_dim=action_dim) for s in range(4)]
        params = dyn.init_dynamics_params(bcfg, dcfg, Rng(0))
        params.update(pol.init_policy_params(pcfg, bcfg, Rng(1)))
        norm = pol.ActionNormalizer.fit(eps)
        return eps, params, bcfg, dcfg, pcfg, norm

    def test_batch_layout_and_padding(self):
        eps, params, bcfg, dcfg, pcfg, norm = self._setup()
        batch = pol.sample_stage2_batch(eps, dcfg, pcfg, norm, 6, Rng(2).split("b"))
        assert batch.memory.shape == (6, 2, 2, 2, 2, 6)
        assert batch.chunks.shape == (6, 4, 3)

    def test_chunk_pads_by_repeating_last_action(self):
        _, dcfg, _ = tiny_cfgs()
        pcfg = pol.PolicyConfig(layers=2, width=16, heads=2, horizon=10,
                                action_dim=3, state_dim=0)
        ep = action_episode(dcfg, length=4, seed=1)
        norm = pol.ActionNormalizer(np.zeros(3), np.ones(3))
        batch = pol.sample_stage2_batch([ep], dcfg, pcfg, norm, 4, Rng(0).split("b"))
        # Episode length 4, memory 2: every chunk runs off the end and must
        # repeat the final action row.
        for row in batch.chunks:
            assert np.array_equal(row[-1], ep.actions[-1])
            assert np.array_equal(row[-2], ep.actions[-1])

    def test_training_deterministic(self):
        runs = []
        for _ in range(2):
            eps, params, bcfg, dcfg, pcfg, norm = self._setup()
            opt = AdamW(params, OptimConfig(lr=1e-3, warmup_steps=2))
            state = pol.train_stage2(eps, params, opt, bcfg, dcfg, pcfg,
                                     dyn.StageConfig(steps=3, batch_size=2, val_every=0),
                                     norm, seed=11)
            runs.append({k: v.data.copy() for k, v in state.params.items()})
        for k in runs[0]:
            assert np.array_equal(runs[0][k], runs[1][k]), k

    def test_freeze_keeps_backbone_bit_identical(self):
        eps, params, bcfg, dcfg, pcfg, norm = self._setup()
        head = {k: v for k, v in params.items() if k.startswith("policy.")}
        before = {k: v.data.copy() for k, v in params.items() if not k.startswith("policy.")}
        opt = AdamW(head, OptimConfig(lr=1e-3, warmup_steps=2))
        pol.train_stage2(eps, params, opt, bcfg, dcfg, pcfg,
                         dyn.StageConfig(steps=4, batch_size=2, val_every=0),
                         norm, seed=5, freeze_backbone=True)
        for k, v in before.items():
            assert np.array_equal(params[k].data, v), k

    def test_frozen_run_leaves_no_backbone_grad(self):
        eps, params, bcfg, dcfg, pcfg, norm = self._setup()
        head = {k: v for k, v in params.items() if k.startswith("policy.")}
        opt = AdamW(head, OptimConfig(lr=1e-3, warmup_steps=2))
        pol.train_stage2(eps, params, opt, bcfg, dcfg, pcfg,
                         dyn.StageConfig(steps=1, batch_size=2, val_every=0),
                         norm, seed=5, freeze_backbone=True)
        assert params["blocks.0.attn.wq"].grad is None

    def test_loss_decreases_on_overfit_batch(self):
        eps, params, bcfg, dcfg, pcfg, norm = self._setup()
        head = {k: v for k, v in params.items() if k.startswith("policy.")}
        opt = AdamW(head, OptimConfig(lr=3e-3, warmup_steps=5))
        scfg = dyn.StageConfig(steps=60, batch_size=2, val_every=0, val_fraction=0.0)
        state = pol.train_stage2(eps[:1], params, opt, bcfg, dcfg, pcfg, scfg,
                                 norm, seed=2, freeze_backbone=True, out_dir=None)
        # Recompute the step-0-style loss with the trained head: must beat the
        # zero-model identity value by a clear margin.
        batch = pol.sample_stage2_batch(eps[:1], dcfg, pcfg, norm, 8, Rng(77).split("b"))
        bank = pol.compute_feature_bank(state.params, batch.memory, batch.text,
                                        bcfg, dcfg, pcfg, Rng(78))
        loss = pol.action_loss(state.params, batch.chunks, bank.detach(), pcfg,
                               Rng(79)).item()
        zero = {k: (Tensor(np.zeros_like(v.data), requires_grad=False)
                    if k == "policy.out_proj.w" else v)
                for k, v in state.params.items()}
        base = pol.action_loss(zero, batch.chunks, bank.detach(), pcfg, Rng(79)).item()
        assert loss < base

    def test_resume_matches_uninterrupted(self):
        eps, params, bcfg, dcfg, pcfg, norm = self._setup()
        opt = AdamW(params, OptimConfig(lr=1e-3, warmup_steps=2))
        scfg = dyn.StageConfig(steps=4, batch_size=2, val_every=0)
        direct = pol.train_stage2(eps, params, opt, bcfg, dcfg, pcfg, scfg, norm, seed=7)

        eps2, params2, _, _, _, norm2 = self._setup()
        opt2 = AdamW(params2, OptimConfig(lr=1e-3, warmup_steps=2))
        half = dyn.StageConfig(steps=2, batch_size=2, val_every=0)
        pol.train_stage2(eps2, params2, opt2, bcfg, dcfg, pcfg, half, norm2, seed=7)
        resumed = pol.train_stage2(eps2, params2, opt2, bcfg, dcfg, pcfg, scfg, norm2,
                                   seed=7)
        for k in direct.params:
            assert np.array_equal(direct.params[k].data, resumed.params[k].data), k

    def test_nonfinite_loss_dumps_batch(self, tmp_path):
        eps, params, bcfg, dcfg, pcfg, norm = self._setup()
        params["policy.out_proj.b"].data[:] = np.nan
        opt = AdamW(params, OptimConfig(lr=1e-3))
        from mwm.errors import VerificationError
        with pytest.raises(VerificationError):
            pol.train_stage2(eps, params, opt, bcfg, dcfg, pcfg,
                             dyn.StageConfig(steps=1, batch_size=2, val_every=0),
                             norm, seed=1, out_dir=tmp_path)
        assert (tmp_path / "nan-batch-stage2.bin").exists()


class TestController:
    def _bundle(self, variant="mwm"):
        from mwm.codec import CodecStats, PatchCodec
        bcfg, dcfg, pcfg = tiny_cfgs()
        pcfg = pol.PolicyConfig(layers=2, width=16, heads=2, horizon=4,
                                action_dim=3, state_dim=0, sampler_steps=3)
        codec = PatchCodec(patch_size=2, channels=6, seed=0)  # 4x4 images -> 2x2 grid
        params = dyn.init_dynamics_params(bcfg, dcfg, Rng(0))
        params.update(pol.init_policy_params(pcfg, bcfg, Rng(1)))
        stats = CodecStats(mean=np.zeros(6), std=np.ones(6))
        norm = pol.ActionNormalizer(np.zeros(3), np.ones(3))
        idm = None
        if variant == "mwm-c1":
            idm = pol.init_idm_params(2 * dcfg.views * 2 * 2 * 6, 8, 3, Rng(2))
        return pol.ControllerBundle(params, bcfg, dcfg, pcfg, codec, stats, norm,
                                    variant=variant, idm_params=idm)

    def test_variant_validation(self):
        bundle = self._bundle()
        with pytest.raises(ContractError):
            pol.ControllerBundle(bundle.params, bundle.bcfg, bundle.dcfg, bundle.pcfg,
                                 bundle.patch_codec, bundle.stats, bundle.norm,
                                 variant="nope")
        with pytest.raises(ContractError):
            pol.ControllerBundle(bundle.params, bundle.bcfg, bundle.dcfg, bundle.pcfg,
                                 bundle.patch_codec, bundle.stats, bundle.norm,
                                 variant="mwm-c1")

    def test_act_returns_action_vector(self):
        bundle = self._bundle()
        session = pol.ControllerSession(bundle, np.array([1, 2, 3]), Rng(4))
        views = RNG.uniform(size=(2, 4, 4, 3))
        action = session.act(views)
        assert action.shape == (3,)

    def test_act_deterministic_per_step(self):
        views = np.random.default_rng(5).uniform(size=(2, 4, 4, 3))
        outs = []
        for _ in range(2):
            session = pol.ControllerSession(self._bundle(), np.array([1, 2, 3]), Rng(4))
            outs.append([session.act(views).copy() for _ in range(3)])
        for a, b in zip(*outs):
            assert np.array_equal(a, b)

    def test_c1_session_uses_mask_cache(self):
        bundle = self._bundle("mwm-c1")
        session = pol.ControllerSession(bundle, np.array([1, 2, 3]), Rng(4))
        views = RNG.uniform(size=(2, 4, 4, 3))
        assert session.prev_mask is None
        a0 = session.act(views)
        assert session.prev_mask is not None
        a1 = session.act(views)
        assert a0.shape == a1.shape == (3,)


class _ScriptEnv:
    """One-dimensional point that must reach +1; expert walks +0.5 per step."""

    def __init__(self):
        self.pos = 0.0
        self.done = False
        self.success = False
        self.trace = []

    def observe(self):
        return np.full((2, 4, 4, 3), self.pos * 0.1 + 0.2)

    def step(self, action):
        self.pos += float(action[0])
        self.trace.append(float(action[0]))
        if self.pos >= 1.0:
            self.done, self.success = True, True


class TestRhcStep:
    def test_scripted_override_reproduces_expert(self):
        env = _ScriptEnv()
        expert = lambda e: np.array([0.5, 0.0, 0.0])
        out1 = pol.rhc_step(None, env, action_override=expert)
        out2 = pol.rhc_step(None, env, action_override=expert)
        assert env.trace == [0.5, 0.5]
        assert out2["done"] and out2["success"]
        assert out1["done"] is False

    def test_terminal_env_short_circuits(self):
        env = _ScriptEnv()
        env.done, env.success = True, False
        out = pol.rhc_step(None, env)
        assert out == {"done": True, "success": False, "action": None}

import json
import math

import numpy as np
import pytest

from evop.dynamics import make_pairs, ou_trajectory, split_with_gaps
from evop.encoder import EncoderConfig
from evop.exceptions import NonFiniteError
from evop.operator import batch_covariances, least_squares_operator
from evop.training import (AdamW, TrainConfig, clip_grad_norm, cosine_lr, embed, finalize_operator,
                           load_state, save_state, train)


@pytest.fixture(scope="module")
def ou_data():
    traj = ou_trajectory(6000, dt=0.1, seed=0)
    tr, va = split_with_gaps(traj, 0, (5000, 1000), 0)
    return make_pairs(tr, 1), make_pairs(va, 1)


ENC = EncoderConfig(1, [8], 4, activation="tanh", seed=1)


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 1e-3, 1e-4) == pytest.approx(1e-3, rel=1e-15)
        assert cosine_lr(100, 100, 1e-3, 1e-4) == pytest.approx(1e-4, rel=1e-12)
        assert cosine_lr(50, 100, 1e-3, 1e-4) == pytest.approx(5.5e-4, rel=1e-12)

    def test_monotone(self):
        lrs = [cosine_lr(s, 37, 1.0, 0.1) for s in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = [np.array([1.0, -2.0])]
        AdamW([(2,)]).step(p, [np.zeros(2)], lr=0.1)
        assert np.array_equal(p[0], [1.0, -2.0])

    def test_first_step(self):
        p = [np.array([0.5])]
        AdamW([(1,)], betas=(0.9, 0.999), eps=1e-8).step(p, [np.array([1.0])], lr=1e-3)
        assert 0.5 - p[0][0] == pytest.approx(1e-3, rel=1e-6)

    def test_decoupled_decay(self):
        p = [np.array([2.0]), np.array([2.0])]
        opt = AdamW([(1,), (1,)], weight_decay=0.1, decay_mask=[True, False])
        opt.step(p, [np.zeros(1), np.zeros(1)], lr=0.5)
        assert p[0][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
        assert p[1][0] == 2.0

    def test_quadratic(self):
        theta = [np.array([3.0, -1.0, 0.5])]
        opt = AdamW([(3,)])
        losses = []
        for _ in range(100):
            losses.append(float(theta[0] @ theta[0]))
            opt.step(theta, [2 * theta[0]], lr=0.05)
        assert all(b < a for a, b in zip(losses[5:], losses[6:]))

    def test_non_finite_named(self):
        with pytest.raises(NonFiniteError, match="W1"):
            AdamW([(1,), (1,)]).step([np.zeros(1), np.zeros(1)], [np.zeros(1), np.array([np.inf])], 0.1,
                                     names=["W0", "W1"])

    def test_state_round_trip(self):
        opt = AdamW([(2, 2)])
        opt.step([np.ones((2, 2))], [np.ones((2, 2))], 0.1)
        other = AdamW([(2, 2)])
        other.load_state_dict(json.loads(json.dumps(opt.state_dict())))
        assert other.t == 1 and np.array_equal(other.v[0], opt.v[0])


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g[0][0], g[1][0]) == pytest.approx(1.0, rel=1e-9)
    h = [np.array([0.3])]
    clip_grad_norm(h, 1.0)
    assert h[0][0] == 0.3


class TestTrain:
    def test_deterministic(self, ou_data):
        pairs, val = ou_data
        cfg = TrainConfig(epochs=3, batch_size=256, seed=5)
        s1, r1 = train(ENC, pairs, val, cfg)
        s2, r2 = train(ENC, pairs, val, cfg)
        assert r1.train_loss == r2.train_loss and r1.val_vamp2 == r2.val_vamp2
        assert all(np.array_equal(a, b) for a, b in zip(s1.params, s2.params))

    def test_loss_decreases(self, ou_data):
        pairs, val = ou_data
        _, rep = train(ENC, pairs, val, TrainConfig(epochs=10, batch_size=256, lr_max=3e-3))
        assert rep.train_loss[-1] < rep.train_loss[0]
        assert rep.best_epoch is not None and rep.best_val_vamp2 == max(rep.val_vamp2)

    def test_resume_matches_uninterrupted(self, ou_data, tmp_path):
        pairs, val = ou_data
        cfg = TrainConfig(epochs=4, batch_size=256)
        full, _ = train(ENC, pairs, val, cfg)
        part, _ = train(ENC, pairs, val, cfg, until_epoch=2)
        save_state(tmp_path / "ck.json", part, cfg)
        state, cfg2 = load_state(tmp_path / "ck.json")
        assert state.epoch == 2
        resumed, rep = train(ENC, pairs, val, cfg2, state=state)
        assert resumed.epoch == 4 and len(rep.train_loss) == 2
        assert all(np.array_equal(a, b) for a, b in zip(full.params, resumed.params))
        assert np.array_equal(full.buffers.C_XY, resumed.buffers.C_XY)

    def test_metrics_and_checkpoint(self, ou_data, tmp_path):
        pairs, val = ou_data
        train(ENC, pairs, val, TrainConfig(epochs=2, batch_size=512), metrics_path=tmp_path / "m.jsonl",
              checkpoint_path=tmp_path / "ck.json")
        recs = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in recs] == [1, 2]
        assert set(recs[0]) == {"epoch", "train_loss", "val_loss", "val_vamp2", "lr", "wall_time"}
        assert load_state(tmp_path / "ck.json")[0].epoch == 2

    def test_buffers_symmetric_psd(self, ou_data):
        pairs, val = ou_data
        state, _ = train(ENC, pairs, val, TrainConfig(epochs=2, batch_size=128))
        for C in (state.buffers.C_X, state.buffers.C_Y):
            assert np.allclose(C, C.T, atol=1e-14)
            assert np.linalg.eigvalsh(C).min() > -1e-12

    def test_batch_size_validation(self, ou_data):
        with pytest.raises(ValueError, match=">= 2"):
            TrainConfig(batch_size=1)
        pairs, val = ou_data
        with pytest.raises(ValueError, match="exceeds"):
            train(ENC, pairs, val, TrainConfig(epochs=1, batch_size=10**6))

    def test_trailing_singleton_batch_dropped(self, ou_data):
        pairs, val = ou_data
        sub = make_pairs(ou_trajectory(257, seed=3), 1)  # 257 pairs, batch 128 -> 2 full + 1 leftover
        state, _ = train(ENC, sub, val, TrainConfig(epochs=1, batch_size=128))
        assert state.step == 2


class TestFinalize:
    def test_full_pass_equals_composition(self, ou_data):
        pairs, val = ou_data
        state, _ = train(ENC, pairs, val, TrainConfig(epochs=1, batch_size=512))
        model = finalize_operator(state.buffers, 1e-6, "full_pass", pairs, state.encoder)
        C_X, _, C_XY = batch_covariances(embed(state.encoder, pairs.x), embed(state.encoder, pairs.y))
        ref = least_squares_operator(C_X, C_XY, 1e-6)
        assert np.array_equal(model.E, ref.E)
        assert model.source == "full_pass" and model.ridge == 1e-6
        assert model.lag_time == pytest.approx(0.1)

    def test_empty_buffers(self):
        with pytest.raises(ValueError, match="empty"):
            finalize_operator(None, mode="buffers")


@pytest.mark.slow
def test_ou_training_dynamics():
    # train loss falls by at least half of its first-epoch magnitude, median over 3 seeds
    traj = ou_trajectory(20_000, dt=0.1, seed=9)
    tr, va = split_with_gaps(traj, 0, (18_000, 2_000), 0)
    pairs, val = make_pairs(tr, 1), make_pairs(va, 1)
    drops = []
    for seed in range(3):
        enc = EncoderConfig(1, [16, 16], 6, seed=seed)
        _, rep = train(enc, pairs, val, TrainConfig(epochs=100, batch_size=512, seed=seed))
        first, last = rep.train_loss[0], rep.train_loss[-1]
        drops.append((first - last) / abs(first))
    assert np.median(drops) >= 0.5

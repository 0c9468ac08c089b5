import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from stmamba import autodiff as ad
from stmamba.autodiff import Tensor
from stmamba.errors import ContractError, FormatError, ShapeError, ValidationError
from stmamba.model import (ModelConfig, checkpoint_bytes, decode, deserialize_cells, encode,
                           expected_shapes, forward, init_params, load_checkpoint, predict,
                           save_checkpoint, serialize_cells)
from stmamba.train import masked_mse_loss

from conftest import finite_difference_check
from oracles import naive_conv2d

SMALL = ModelConfig(H=5, W=4, L=3, K=6, N=3)


def naive_encode(x, p, cfg):
    """Per-channel convolution, then the affine lift applied pixel by pixel."""
    pad = (cfg.k_enc - 1) // 2
    conv = np.stack([naive_conv2d(x[c:c + 1], p.enc_conv.data, pad)[0] for c in range(4)])
    out = np.zeros((cfg.K, cfg.H, cfg.W))
    for h in range(cfg.H):
        for w in range(cfg.W):
            out[:, h, w] = p.enc_fc_w.data @ conv[:, h, w] + p.enc_fc_b.data
    return out


def naive_decode(cells, p, cfg):
    G = np.zeros((4, cfg.H, cfg.W))
    for h in range(cfg.H):
        for w in range(cfg.W):
            block = cells[h * cfg.W + w]
            flat = [block[k, l] for k in range(cfg.K) for l in range(cfg.L)]
            G[:, h, w] = p.dec_fc_w.data @ np.array(flat) + p.dec_fc_b.data
    return naive_conv2d(G, p.dec_conv.data, (cfg.k_dec - 1) // 2)


def randomized(cfg, seed=0, rng=None):
    p = init_params(cfg, seed)
    rng = rng or np.random.default_rng(seed + 100)
    p.enc_fc_b.data = rng.normal(size=cfg.K)
    p.dec_fc_b.data = rng.normal(size=4)
    p.ssm.D_delta.data = rng.normal(size=cfg.K)
    p.ssm.A.data = -rng.uniform(0.5, 2.0, size=(cfg.K, cfg.N))
    return p


class TestEncode:
    def test_identity_composition(self, rng):
        cfg = SMALL
        p = init_params(cfg, 0)
        p.enc_conv.data[:] = 0
        p.enc_conv.data[0, 0, 1, 1] = 1
        p.enc_fc_w.data[:] = 0
        p.enc_fc_w.data[:4] = np.eye(4)
        x = rng.normal(size=(4, cfg.H, cfg.W))
        out = encode(Tensor(x), p, cfg).data
        np.testing.assert_array_equal(out[:4], x)
        np.testing.assert_array_equal(out[4:], 0)

    def test_zero_input_gives_bias(self):
        p = randomized(SMALL)
        out = encode(Tensor(np.zeros((4, SMALL.H, SMALL.W))), p, SMALL).data
        np.testing.assert_array_equal(out, np.broadcast_to(p.enc_fc_b.data[:, None, None], out.shape))

    def test_matches_naive(self, rng):
        p = randomized(SMALL)
        x = rng.normal(size=(2, 3, 4, SMALL.H, SMALL.W))
        out = encode(Tensor(x), p, SMALL).data
        assert out.shape == (2, 3, SMALL.K, SMALL.H, SMALL.W)
        for i in range(2):
            for j in range(3):
                assert np.abs(out[i, j] - naive_encode(x[i, j], p, SMALL)).max() < 1e-12

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            encode(Tensor(np.zeros((3, SMALL.H, SMALL.W))), init_params(SMALL, 0), SMALL)


class TestSerialize:
    def test_index_correspondence(self, rng):
        L, K, H, W = 4, 3, 5, 2
        frames = [rng.normal(size=(K, H, W)) for _ in range(L)]
        cells = serialize_cells([Tensor(f) for f in frames]).data
        assert cells.shape == (H * W, K, L)
        for h in range(H):
            for w in range(W):
                for j in range(L):
                    np.testing.assert_array_equal(cells[h * W + w, :, j], frames[j][:, h, w])

    def test_single_step(self, rng):
        f = rng.normal(size=(3, 2, 2))
        cells = serialize_cells([Tensor(f)]).data
        np.testing.assert_array_equal(cells[:, :, 0], f.reshape(3, 4).T)

    def test_round_trip(self, rng):
        x = rng.normal(size=(2, 4, 3, 5, 6))
        back = deserialize_cells(serialize_cells(Tensor(x)), 5, 6).data
        np.testing.assert_array_equal(back, x)

    def test_inconsistent(self, rng):
        with pytest.raises(ShapeError):
            serialize_cells([Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((3, 2, 3)))])
        with pytest.raises(ShapeError):
            deserialize_cells(Tensor(np.zeros((6, 2, 2))), 2, 2)


class TestDecode:
    def test_bias_only(self, rng):
        p = randomized(SMALL)
        p.dec_fc_w.data[:] = 0
        p.dec_conv.data[:] = 0
        for c in range(4):
            p.dec_conv.data[c, c, 1, 1] = 1
        out = decode(Tensor(rng.normal(size=(SMALL.H * SMALL.W, SMALL.K, SMALL.L))), p, SMALL).data
        np.testing.assert_array_equal(out, np.broadcast_to(p.dec_fc_b.data[:, None, None], out.shape))

    def test_matches_naive(self, rng):
        p = randomized(SMALL)
        cells = rng.normal(size=(SMALL.H * SMALL.W, SMALL.K, SMALL.L))
        out = decode(Tensor(cells), p, SMALL).data
        assert out.shape == (4, SMALL.H, SMALL.W)
        assert np.abs(out - naive_decode(cells, p, SMALL)).max() < 1e-12

    @pytest.mark.parametrize("cfg", [ModelConfig(H=1, W=1, L=1, K=1, N=1), ModelConfig(H=3, W=7, L=2, K=5, N=2,
                                                                                       k_dec=5)])
    def test_shape_contract(self, cfg, rng):
        out = decode(Tensor(rng.normal(size=(2, cfg.H * cfg.W, cfg.K, cfg.L))), init_params(cfg, 1), cfg)
        assert out.shape == (2, 4, cfg.H, cfg.W)


class TestForward:
    def window(self, rng, cfg, batch=None):
        shape = (cfg.L, 4, cfg.H, cfg.W) if batch is None else (batch, cfg.L, 4, cfg.H, cfg.W)
        return rng.uniform(0, cfg.speed_scale, size=shape)

    def test_pure(self, rng):
        p = init_params(SMALL, 3)
        x = self.window(rng, SMALL)
        assert predict(x, p, SMALL).tobytes() == predict(x, p, SMALL).tobytes()

    def test_batch_matches_single(self, rng):
        p = randomized(SMALL)
        x = self.window(rng, SMALL, batch=3)
        batched = predict(x, p, SMALL)
        for i in range(3):
            np.testing.assert_allclose(batched[i], predict(x[i], p, SMALL), rtol=0, atol=1e-12)

    def test_pipeline_composition(self, rng):
        p = randomized(SMALL)
        x = self.window(rng, SMALL)
        from stmamba.ssm import mamba_block_forward
        lat = np.stack([naive_encode(f / SMALL.speed_scale, p, SMALL) for f in x])
        cells = lat.transpose(2, 3, 1, 0).reshape(SMALL.H * SMALL.W, SMALL.K, SMALL.L)
        seq = mamba_block_forward(Tensor(cells), p.ssm).data
        expected = naive_decode(seq, p, SMALL) * SMALL.speed_scale
        assert np.abs(predict(x, p, SMALL) - expected).max() < 1e-10

    def test_wrong_window(self, rng):
        with pytest.raises(ContractError):
            forward(np.zeros((SMALL.L + 1, 4, SMALL.H, SMALL.W)), init_params(SMALL, 0), SMALL)

    def test_init_output_bounded(self, rng):
        cfg = ModelConfig()
        p = init_params(cfg, 0)
        y = predict(self.window(rng, cfg, batch=2), p, cfg)
        assert y.shape == (2, 4, 16, 16) and np.isfinite(y).all()
        assert np.abs(y / cfg.speed_scale).max() < 10

    def test_every_parameter_gets_a_finite_gradient(self, rng):
        p = randomized(SMALL)
        loss = masked_mse_loss(forward(self.window(rng, SMALL, 2), p, SMALL),
                               rng.uniform(0, 100, (2, 4, SMALL.H, SMALL.W)), np.ones((SMALL.H, SMALL.W), bool))
        ad.backward(loss)
        for name, t in p.named().items():
            assert t.grad is not None and np.isfinite(t.grad).all() and np.abs(t.grad).sum() > 0, name

    def test_finite_difference_gradients(self, rng):
        cfg = ModelConfig(H=6, W=6, L=4, K=8, N=4)
        p = randomized(cfg)
        x = self.window(rng, cfg)
        z = rng.uniform(0, 100, (4, 6, 6))
        mask = rng.uniform(size=(6, 6)) < 0.6
        tensors = p.tensors()
        sizes = np.array([t.size for t in tensors])
        flat = rng.choice(sizes.sum(), 50, replace=False)
        owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
        coords = [(int(i), int(f - (np.cumsum(sizes)[i] - sizes[i]))) for i, f in zip(owner, flat)]
        worst = finite_difference_check(lambda: masked_mse_loss(forward(x, p, cfg), z, mask), tensors, coords=coords)
        assert worst < 1e-4

    def test_channel_permutation_equivariance(self, rng):
        perm = np.array([2, 0, 3, 1])
        p = randomized(SMALL)
        q = p.copy()
        q.enc_fc_w.data = p.enc_fc_w.data[:, perm]
        q.dec_fc_w.data = p.dec_fc_w.data[perm]
        q.dec_fc_b.data = p.dec_fc_b.data[perm]
        q.dec_conv.data = p.dec_conv.data[perm][:, perm]
        x = self.window(rng, SMALL)
        np.testing.assert_allclose(predict(x[:, perm], q, SMALL), predict(x, p, SMALL)[perm], rtol=0, atol=1e-10)

    def test_normalization_consistency(self, rng):
        p = init_params(SMALL, 4)
        x = self.window(rng, SMALL)
        for c in (0.5, 3.0):
            scaled = replace(SMALL, speed_scale=c * SMALL.speed_scale)
            np.testing.assert_allclose(predict(c * x, p, scaled), c * predict(x, p, SMALL), rtol=1e-12, atol=1e-10)


class TestInit:
    def test_deterministic(self):
        a, b = init_params(SMALL, 7), init_params(SMALL, 7)
        for (n, x), (_, y) in zip(a.named().items(), b.named().items()):
            np.testing.assert_array_equal(x.data, y.data)
        assert not np.array_equal(init_params(SMALL, 8).enc_fc_w.data, a.enc_fc_w.data)

    def test_bounds(self):
        cfg = ModelConfig()
        p = init_params(cfg, 0)
        fan_in = {"enc_conv": cfg.k_enc**2, "enc_fc_w": 4, "dec_fc_w": cfg.K * cfg.L, "dec_conv": 4 * cfg.k_dec**2,
                  "ssm.W_B": cfg.K, "ssm.W_C": cfg.K, "ssm.W_delta": cfg.K}
        for name, n in fan_in.items():
            assert np.abs(p.named()[name].data).max() <= np.sqrt(1 / n)
        assert not p.enc_fc_b.data.any() and not p.dec_fc_b.data.any()
        dt = np.logaddexp(0, p.ssm.D_delta.data)
        assert dt.min() >= 1e-3 - 1e-15 and dt.max() <= 1e-1 + 1e-15
        assert (p.ssm.A.data < 0).all()
        for name, shape in expected_shapes(cfg).items():
            assert p.named()[name].shape == shape

    def test_config_validation(self):
        for kw in (dict(K=0), dict(k_enc=2), dict(speed_scale=0.0)):
            with pytest.raises(ValidationError):
                ModelConfig(**kw)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = randomized(SMALL, seed=5)
        save_checkpoint(p, SMALL, tmp_path / "m.stmb", {"road_mask": np.ones((5, 4))})
        q, cfg, extra = load_checkpoint(tmp_path / "m.stmb", with_extra=True)
        assert cfg == SMALL
        for n, t in p.named().items():
            assert t.data.tobytes() == q.named()[n].data.tobytes()
        assert list(extra) == ["road_mask"]
        assert checkpoint_bytes(q, cfg, extra) == (tmp_path / "m.stmb").read_bytes()

    @pytest.mark.parametrize("cut", [3, 10, 40, -1])
    def test_truncated(self, tmp_path, cut):
        raw = checkpoint_bytes(init_params(SMALL, 0), SMALL)
        (tmp_path / "m.stmb").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m.stmb")

    def test_version_and_magic(self, tmp_path):
        raw = bytearray(checkpoint_bytes(init_params(SMALL, 0), SMALL))
        bad = bytes(raw[:4]) + (2).to_bytes(4, "little") + bytes(raw[8:])
        (tmp_path / "v.stmb").write_bytes(bad)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(tmp_path / "v.stmb")
        (tmp_path / "m.stmb").write_bytes(b"NOPE" + bytes(raw[4:]))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m.stmb")
        (tmp_path / "t.stmb").write_bytes(bytes(raw) + b"\0")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.stmb")

    def test_cross_process_replay(self, tmp_path, rng):
        p = randomized(SMALL, seed=9)
        save_checkpoint(p, SMALL, tmp_path / "m.stmb")
        x = rng.uniform(0, 100, (SMALL.L, 4, SMALL.H, SMALL.W))
        np.save(tmp_path / "x.npy", x)
        script = ("import numpy as np, sys\n"
                  "from stmamba.model import load_checkpoint, predict\n"
                  "p, cfg = load_checkpoint(sys.argv[1])\n"
                  "np.save(sys.argv[3], predict(np.load(sys.argv[2]), p, cfg))\n")
        subprocess.run([sys.executable, "-c", script, str(tmp_path / "m.stmb"), str(tmp_path / "x.npy"),
                        str(tmp_path / "y.npy")], check=True)
        assert np.load(tmp_path / "y.npy").tobytes() == predict(x, p, SMALL).tobytes()

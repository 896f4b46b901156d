import numpy as np
import pytest
import torch

from speakerflow.config import ModelConfig
from speakerflow.model import (
    ConditioningInput,
    FlowState,
    VelocityField,
    batch_attention_mask,
    build_attention_mask,
    time_embedding,
)

SMALL = ModelConfig(n_layers=2, n_heads=2, embed_dim=16, ff_dim=32, mel_dim=8)


def randomize(model, seed, std=0.3):
    """Draw every parameter (including the zero-initialised gates) at random."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def inputs(t_e, t_m, d, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    n = t_e + t_m
    x = torch.randn(1, n, d, generator=g, dtype=dtype)
    c = torch.randn(1, n, d, generator=g, dtype=dtype)
    return x, c, torch.tensor([0.37], dtype=dtype), torch.tensor([t_e])


class TestMask:
    def test_one_by_one(self):
        assert build_attention_mask(1, 1).tolist() == [[True, False], [True, True]]

    def test_mixed_rows_all_allowed(self):
        m = build_attention_mask(3, 5)
        assert m[3:].all()
        assert m[:3, :3].all()

    def test_denied_count(self):
        # count by construction: enrollment queries x mixed keys
        t_e, t_m = 3, 5
        m = build_attention_mask(t_e, t_m)
        denied = sum(
            1 for q in range(t_e + t_m) for k in range(t_e + t_m) if q < t_e and k >= t_e
        )
        assert denied == t_e * t_m == int((~m).sum())

    def test_invalid(self):
        with pytest.raises(ValueError):
            build_attention_mask(0, 3)

    def test_batch_mask_matches_single_and_hides_padding(self):
        masks = batch_attention_mask(torch.tensor([2, 3]), torch.tensor([5, 8]), 8)
        assert torch.equal(masks[1], build_attention_mask(3, 5))
        assert torch.equal(masks[0, :5, :5], build_attention_mask(2, 3))
        assert not masks[0, :, 5:].any()
        assert masks[0, 5:, :5].all()


class TestTimeEmbedding:
    def test_endpoints_distinct_and_deterministic(self):
        model = randomize(VelocityField(SMALL).double(), 0)
        e0, e1 = time_embedding(model, 0.0), time_embedding(model, 1.0)
        assert not torch.allclose(e0, e1)
        assert torch.equal(e0, time_embedding(model, 0.0))

    def test_continuity_default_init(self):
        model = VelocityField(ModelConfig()).double()
        for t in (0.0, 0.3, 0.999):
            diff = time_embedding(model, t + 1e-6) - time_embedding(model, t)
            assert diff.abs().max() < 1e-3

    def test_out_of_range(self):
        model = VelocityField(SMALL)
        with pytest.raises(ValueError):
            time_embedding(model, 1.5)
        with pytest.raises(ValueError):
            time_embedding(model, -0.1)


class TestForward:
    @pytest.mark.parametrize("t_e,t_m", [(1, 1), (3, 7), (10, 2)])
    def test_shape(self, t_e, t_m):
        model = randomize(VelocityField(SMALL).double(), 1)
        x, c, t, te = inputs(t_e, t_m, 8)
        assert model(x, c, t, te).shape == x.shape

    def test_zero_init_output(self):
        model = VelocityField(SMALL).double()
        x, c, t, te = inputs(3, 4, 8)
        assert torch.all(model(x, c, t, te) == 0)

    def test_shape_mismatch(self):
        model = VelocityField(SMALL).double()
        x, c, t, te = inputs(3, 4, 8)
        with pytest.raises(ValueError, match="differ"):
            model(x, c[:, :-1], t, te)
        with pytest.raises(ValueError):
            model(x[..., :4], c[..., :4], t, te)

    def test_mixed_perturbation_leaves_enrollment_bit_identical(self):
        model = randomize(VelocityField(SMALL).double(), 2)
        x, c, t, te = inputs(4, 6, 8)
        base = model(x, c, t, te)
        x2, c2 = x.clone(), c.clone()
        x2[:, 4:] += torch.randn_like(x2[:, 4:])
        c2[:, 7] -= 3.0
        out = model(x2, c2, t, te)
        assert torch.equal(out[:, :4], base[:, :4])
        assert not torch.equal(out[:, 4:], base[:, 4:])

    def test_enrollment_perturbation_reaches_mixed(self):
        model = randomize(VelocityField(SMALL).double(), 3)
        x, c, t, te = inputs(4, 6, 8)
        base = model(x, c, t, te)
        c2 = c.clone()
        c2[:, 1] += 1.0
        assert not torch.allclose(model(x, c2, t, te)[:, 4:], base[:, 4:])

    def test_position_sensitivity(self):
        model = randomize(VelocityField(SMALL).double(), 4)
        x, c, t, te = inputs(3, 6, 8)
        base = model(x, c, t, te)
        perm = torch.tensor([0, 1, 2, 8, 7, 6, 5, 4, 3])
        shuffled = model(x[:, perm], c[:, perm], t, te)
        # un-permute: a position-blind model would give identical rows
        assert not torch.allclose(shuffled[:, perm.argsort()][:, 3:], base[:, 3:])

    def test_dropped_condition_ignores_cond_content(self):
        model = randomize(VelocityField(SMALL).double(), 5)
        x, c, t, te = inputs(3, 5, 8)
        drop = torch.tensor([True])
        a = model(x, c, t, te, drop=drop)
        b = model(x, torch.randn_like(c), t, te, drop=drop)
        assert torch.equal(a, b)
        assert not torch.equal(a, model(x, c, t, te))

    def test_padding_does_not_change_valid_outputs(self):
        model = randomize(VelocityField(SMALL).double(), 6)
        x, c, t, te = inputs(3, 5, 8)
        ref = model(x, c, t, te)
        pad = torch.zeros(1, 4, 8, dtype=torch.float64)
        xp, cp = torch.cat([x, pad], 1), torch.cat([c, pad + 5.0], 1)
        out = model(xp, cp, t, te, lengths=torch.tensor([8]))
        assert torch.allclose(out[:, :8], ref, atol=1e-12)

    def test_deterministic(self):
        model = randomize(VelocityField(SMALL).double(), 7)
        x, c, t, te = inputs(3, 5, 8)
        assert torch.equal(model(x, c, t, te), model(x, c, t, te))

    def test_single_example_wrapper(self):
        model = randomize(VelocityField(SMALL).double(), 8)
        rng = np.random.default_rng(0)
        cond = ConditioningInput(rng.standard_normal((3, 8)), rng.standard_normal((4, 8)))
        state = FlowState(rng.standard_normal((7, 8)), 0.5)
        out = model.velocity(state, cond)
        assert out.shape == (7, 8)
        with pytest.raises(ValueError):
            model.velocity(FlowState(rng.standard_normal((6, 8)), 0.5), cond)
        with pytest.raises(ValueError):
            FlowState(np.zeros((7, 8)), 1.2)

    def test_gradient_matches_finite_differences(self):
        model = randomize(VelocityField(SMALL).double(), 9, std=0.2)
        x, c, t, te = inputs(3, 4, 8, seed=1)
        w = torch.randn(x.shape, generator=torch.Generator().manual_seed(2), dtype=torch.float64)

        def loss():
            return (model(x, c, t, te) * w).sum()

        model.zero_grad()
        loss().backward()
        params = dict(model.named_parameters())
        rng = np.random.default_rng(0)
        names = sorted(params)
        for _ in range(10):
            name = names[rng.integers(len(names))]
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = p.grad[idx].item()
            h = 1e-6
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss().item()
                p[idx] = orig - h
                down = loss().item()
                p[idx] = orig
            numeric = (up - down) / (2 * h)
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-6), name

import itertools
import math

import pytest
import torch

from mapformer.models import (
    VARIANTS,
    CopeAttention,
    MapEMAttention,
    MapWMAttention,
    Model,
    ModelConfig,
    ModelError,
    RopeAttention,
    cope_interpolate,
    cope_positions,
    em_conjunctive_gram,
    linear_rope_ssm_equivalence,
    mapem_attention,
    model_forward,
    rope_attention,
)
from mapformer.rotor import apply_rotation


def cfg(variant="map_wm", **kw):
    base = dict(variant=variant, n_layers=1, n_heads=2, head_dim=8, vocab_size=12, rank=2,
                grid_size_hint=16, cope_pmax=16)
    base.update(kw)
    return ModelConfig(**base)


def no_pe_logits(attn, x):
    q, k, _ = attn.qkv(x)
    return attn.logits(q, k)


class TestConfig:
    def test_d_model_derived(self):
        assert cfg(n_heads=3, head_dim=6).d_model == 18

    def test_invalid(self):
        with pytest.raises(ModelError):
            cfg(variant="alibi")
        with pytest.raises(ModelError):
            cfg(head_dim=7)
        with pytest.raises(ModelError):
            cfg(d_model=10)

    def test_json_roundtrip(self):
        c = cfg("map_em_os", noncommutative=True, block_size=4)
        import json
        assert ModelConfig.from_dict(json.loads(c.to_json())) == c


class TestRope:
    def test_single_token_is_value_path(self, gen):
        attn = RopeAttention(cfg("rope"))
        x = torch.randn(1, cfg().d_model, generator=gen)
        assert torch.allclose(rope_attention(attn, x), attn.out_proj(attn.v_proj(x)))

    def test_two_equal_tokens_closed_form(self, gen):
        attn = RopeAttention(cfg("rope"))
        x = torch.randn(1, cfg().d_model, generator=gen).expand(2, -1)
        attn.keep_trace = True
        attn(x)
        q, k, _ = attn.qkv(x)
        w = attn.freqs.omega
        # row 1 attends to token 0 (relative angle w) and itself (angle 0)
        s_self = (q[1] * k[1]).sum(-1) / math.sqrt(8)
        s_prev = (apply_rotation(q[1], w) * k[0]).sum(-1) / math.sqrt(8)
        expected = torch.softmax(torch.stack([s_prev, s_self], -1), -1)
        assert torch.allclose(attn.trace.A[:, 1, :2], expected, atol=1e-12)

    def test_zero_angles_permutation_invariant(self, gen):
        attn = RopeAttention(cfg("rope"))
        attn.freqs.omega.data.zero_()
        x = torch.randn(5, cfg().d_model, generator=gen)
        perm = torch.tensor([2, 0, 3, 1, 4])
        logits = no_pe_logits(attn, x)
        logits_perm = no_pe_logits(attn, x[perm])
        # the final query sees the same keys, only reordered
        assert torch.allclose(logits_perm[:, -1, :], logits[:, -1, perm], atol=1e-12)
        assert torch.allclose(attn(x)[-1], attn(x[perm])[-1], atol=1e-12)


class TestCope:
    def test_positions_double_loop(self, gen):
        gates = torch.rand(2, 4, 4, generator=gen)
        p = cope_positions(gates)
        for h, i, j in itertools.product(range(2), range(4), range(4)):
            ref = sum(float(gates[h, i, k]) for k in range(j, i + 1)) if j <= i else 0.0
            assert float(p[h, i, j]) == pytest.approx(ref, abs=1e-6)

    def test_saturated_gates_relative(self):
        attn = CopeAttention(cfg("cope"))
        attn.gate_override = 1.0
        attn(torch.randn(5, cfg().d_model))
        i, j = torch.meshgrid(torch.arange(5), torch.arange(5), indexing="ij")
        expected = ((i - j + 1) * (j <= i)).to(torch.float64)
        assert torch.equal(attn.last_positions[0], expected)

    def test_closed_gates_collapse(self):
        attn = CopeAttention(cfg("cope"))
        attn.gate_override = 0.0
        attn(torch.randn(5, cfg().d_model))
        assert torch.equal(attn.last_positions, torch.zeros_like(attn.last_positions))

    def test_interpolation_exact_at_integers_and_linear_between(self):
        table = torch.arange(6.0).pow(2).expand(1, 3, 6)
        pos = torch.tensor([[[0.0, 2.0, 2.25], [5.0, 9.0, 4.5], [1.0, 1.5, 3.0]]])
        out = cope_interpolate(pos, table)
        expected = torch.tensor([[[0.0, 4.0, 4 + 0.25 * 5], [25.0, 25.0, 20.5], [1.0, 2.5, 9.0]]])
        assert torch.allclose(out, expected)


class TestMapWM:
    def test_zero_projector_is_no_pe(self, gen):
        attn = MapWMAttention(cfg())
        attn.delta_proj.W_out.weight.data.zero_()
        x = torch.randn(6, cfg().d_model, generator=gen)
        q, k, _ = attn.qkv(x)
        path = attn.path(x)
        assert torch.allclose(attn.logits(attn.rotate(q, path), attn.rotate(k, path)), attn.logits(q, k))

    def test_unit_deltas_match_rope(self, gen):
        wm = MapWMAttention(cfg())
        rope = RopeAttention(cfg("rope"))
        rope.load_state_dict({k: v for k, v in wm.state_dict().items() if "proj" in k and "delta" not in k},
                             strict=False)
        wm.bank.omega.data.copy_(rope.freqs.omega)
        wm.deltas_override = torch.ones(1)
        x = torch.randn(10, cfg().d_model, generator=gen)
        wm.keep_trace = rope.keep_trace = True
        assert torch.allclose(wm(x), rope(x), atol=1e-5)
        assert torch.allclose(wm.trace.A, rope.trace.A, atol=1e-5)

    @torch.no_grad()
    def test_half_turn_suppresses_logit(self, gen):
        attn = MapWMAttention(cfg(head_dim=4, n_heads=1))
        x = torch.randn(1, 4, generator=gen).expand(2, -1)
        q, k, _ = attn.qkv(x)
        same = attn.logits(q, k)[0, 1, 0]
        theta = torch.tensor([[[0.0, 0.0]], [[math.pi, math.pi]]])
        turned = attn.logits(apply_rotation(q, theta), apply_rotation(k, theta))[0, 1, 0]
        assert float(turned) == pytest.approx(-float(same))
        if float(same) > 0:
            assert turned < same

    def test_without_structure_is_permutation_equivariant(self, gen):
        m = Model(cfg())
        m.blocks[0].attn.delta_proj.W_out.weight.data.zero_()
        tok = torch.tensor([3, 1, 4, 1, 5, 9])
        perm = torch.tensor([1, 0, 3, 2, 4, 5])
        with torch.no_grad():
            a, b = m(tok), m(tok[perm])
        assert torch.allclose(a[-1], b[-1], atol=1e-10)


class TestMapEM:
    def test_variant_o_is_no_pe_transformer(self, gen):
        em = MapEMAttention(cfg("map_em_o"))
        x = torch.randn(6, cfg().d_model, generator=gen)
        em.keep_trace = True
        em(x)
        from mapformer.models import masked_softmax
        assert torch.allclose(em.trace.A, masked_softmax(no_pe_logits(em, x)))

    def test_uniform_content_gives_position_attention(self, gen):
        em = MapEMAttention(cfg("map_em_os"))
        em.q_proj.weight.data.zero_()
        x = torch.randn(6, cfg().d_model, generator=gen)
        em.keep_trace = True
        em(x)
        assert torch.allclose(em.trace.A, em.trace.A_P, atol=1e-12)

    def test_conjunctive_gram(self, gen):
        for t in (1, 3, 7):
            qx, kx, qp, kp = (torch.randn(t, 5, generator=gen) for _ in range(4))
            explicit, factorized = em_conjunctive_gram(qx, kx, qp, kp)
            assert torch.allclose(explicit, factorized, atol=1e-6)

    def test_renormalized_product(self, gen):
        em = MapEMAttention(cfg("map_em_os"))
        em.keep_trace = True
        em(torch.randn(7, cfg().d_model, generator=gen))
        prod = em.trace.A_X * em.trace.A_P
        assert torch.allclose(em.trace.A, prod / prod.sum(-1, keepdim=True), atol=1e-12)

    def test_mode_switch(self, gen):
        em = MapEMAttention(cfg("map_em_os"))
        x = torch.randn(4, cfg().d_model, generator=gen)
        em.keep_trace = True
        mapem_attention(em, x, "s")
        assert em.trace.A_X is None and torch.allclose(em.trace.A, em.trace.A_P)

    def test_tied_zero(self):
        em = MapEMAttention(cfg("map_em_s", tie_zero=True))
        k, q = em.zero.pair()
        assert k is q


@pytest.mark.parametrize("variant", VARIANTS)
class TestModelForward:
    def test_single_token_shape(self, variant):
        assert model_forward(Model(cfg(variant)), [3]).shape == (1, 12)

    def test_causality(self, variant, gen):
        m = Model(cfg(variant, n_layers=2))
        a = torch.randint(0, 12, (2, 9), generator=gen)
        b = a.clone()
        b[:, 5:] = (b[:, 5:] + 1) % 12
        with torch.no_grad():
            assert torch.allclose(m(a)[:, :5], m(b)[:, :5], atol=1e-12)

    def test_rows_sum_to_one(self, variant, gen):
        m = Model(cfg(variant))
        m.keep_traces(True)
        m(torch.randint(0, 12, (1, 8), generator=gen))
        a = m.attentions[0].trace.A
        assert torch.allclose(a.sum(-1), torch.ones_like(a.sum(-1)), atol=1e-5)
        assert torch.equal(a.triu(1), torch.zeros_like(a))

    def test_out_of_vocab(self, variant):
        with pytest.raises(ModelError):
            Model(cfg(variant))(torch.tensor([0, 12]))

    def test_bitwise_reproducible(self, variant):
        outs = []
        for _ in range(2):
            torch.manual_seed(5)
            m = Model(cfg(variant))
            outs.append(m(torch.tensor([[1, 2, 3, 4, 5]])).detach())
        assert torch.equal(outs[0], outs[1])


def test_noncommutative_model_runs(gen):
    m = Model(cfg("map_em_s", noncommutative=True, block_size=4, nonlinear_delta=True))
    assert m(torch.randint(0, 12, (2, 6), generator=gen)).shape == (2, 6, 12)
    assert m.attentions[0].last_theta is None


class TestLinearRopeSsm:
    def test_zero_angles(self, gen):
        q, k = torch.randn(6, 8, generator=gen), torch.randn(6, 8, generator=gen)
        v = torch.randn(6, 3, generator=gen)
        assert linear_rope_ssm_equivalence(q, k, v, torch.zeros(6, 4), torch.ones(4)) < 1e-10

    @pytest.mark.parametrize("t,tol", [(2, 1e-8), (64, 1e-6), (128, 1e-6)])
    def test_random(self, t, tol, gen):
        q, k = torch.randn(t, 8, generator=gen), torch.randn(t, 8, generator=gen)
        v = torch.randn(t, 3, generator=gen)
        d = torch.randn(t, 4, generator=gen)
        assert linear_rope_ssm_equivalence(q, k, v, d, torch.rand(4, generator=gen) * 2) < tol

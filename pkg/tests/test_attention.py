import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from style3d.attention import (
    DEFAULT_TARGET_LAYERS,
    AttnConfig,
    FeatureKind,
    FeatureTensor,
    attention_weights,
    blend_queries,
    fuse_attention,
    row_entropies,
    select_target_layers,
    standard_attention,
)
from style3d.mvdiff.backend import TOY_LAYER_NAMES


def _ft(data, kind=FeatureKind.QUERY, layer="up_blocks.3.attentions.1.transformer_blocks.0.attn2", t=5):
    return FeatureTensor(torch.as_tensor(data, dtype=torch.float64), layer, t, kind)


def scalar_fused(q_c, q_c_p, k_s, v_s, beta, lam):
    """Brute-force reference: plain Python loops, no tensor ops."""
    n, d = len(q_c), len(q_c[0])
    m = len(k_s)
    dv = len(v_s[0])
    out = [[0.0] * dv for _ in range(n)]
    for i in range(n):
        q = [beta[0] * q_c[i][j] + beta[1] * q_c_p[i][j] for j in range(d)]
        logits = []
        for a in range(m):
            dot = sum(q[j] * k_s[a][j] for j in range(d))
            logits.append(lam * dot / math.sqrt(d))
        mx = max(logits)
        ex = [math.exp(l - mx) for l in logits]
        z = sum(ex)
        w = [e / z for e in ex]
        for c in range(dv):
            out[i][c] = sum(w[a] * v_s[a][c] for a in range(m))
    return out


def test_fused_matches_hand_computed_example():
    # blended query (.5,.5) against identity keys gives uniform weights,
    # so the output is the value-row average
    q_c = _ft([[1.0, 0.0]])
    q_p = _ft([[0.0, 1.0]], FeatureKind.QUERY_PRESERVE)
    k_s = _ft([[1.0, 0.0], [0.0, 1.0]], FeatureKind.KEY)
    v_s = _ft([[1.0, 2.0], [3.0, 4.0]], FeatureKind.VALUE)
    cfg = AttnConfig(beta=(0.5, 0.5), lambda_scale=1.0)
    out = fuse_attention(q_c, q_p, k_s, v_s, cfg, timestep=3)
    assert torch.allclose(out.data, torch.tensor([[2.0, 3.0]], dtype=torch.float64))


def test_fused_matches_scalar_oracle_on_random_instances():
    gen = torch.Generator().manual_seed(123)
    for trial in range(200):
        n = int(torch.randint(1, 9, (1,), generator=gen))
        m = int(torch.randint(1, 9, (1,), generator=gen))
        d = int(torch.randint(1, 9, (1,), generator=gen))
        dv = int(torch.randint(1, 9, (1,), generator=gen))
        bc = float(torch.rand(1, generator=gen))
        lam = 0.25 + 2.0 * float(torch.rand(1, generator=gen))
        q_c = torch.randn(n, d, generator=gen, dtype=torch.float64)
        q_p = torch.randn(n, d, generator=gen, dtype=torch.float64)
        k_s = torch.randn(m, d, generator=gen, dtype=torch.float64)
        v_s = torch.randn(m, dv, generator=gen, dtype=torch.float64)
        cfg = AttnConfig(beta=(bc, 1.0 - bc), lambda_scale=lam)
        got = fuse_attention(
            _ft(q_c), _ft(q_p, FeatureKind.QUERY_PRESERVE),
            _ft(k_s, FeatureKind.KEY), _ft(v_s, FeatureKind.VALUE),
            cfg, timestep=1,
        ).data
        want = torch.tensor(
            scalar_fused(q_c.tolist(), q_p.tolist(), k_s.tolist(), v_s.tolist(),
                         (bc, 1.0 - bc), lam),
            dtype=torch.float64,
        )
        rel = (got - want).abs().max() / want.abs().max().clamp_min(1e-12)
        assert float(rel) < 1e-6, f"trial {trial}: rel err {float(rel):.3e}"


# -- Eq-level degeneracies ---------------------------------------------------

def test_beta_content_endpoint_ignores_preserved_query():
    gen = torch.Generator().manual_seed(1)
    q = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    p1 = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    p2 = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    k = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    v = torch.randn(6, 3, generator=gen, dtype=torch.float64)
    cfg = AttnConfig(beta=(1.0, 0.0), lambda_scale=1.3)
    a = fuse_attention(_ft(q), _ft(p1), _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE), cfg, 2)
    b = fuse_attention(_ft(q), _ft(p2), _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE), cfg, 2)
    assert torch.equal(a.data, b.data)


def test_beta_preserve_endpoint_ignores_live_query():
    gen = torch.Generator().manual_seed(2)
    q1 = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    q2 = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    p = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    k = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    v = torch.randn(6, 3, generator=gen, dtype=torch.float64)
    cfg = AttnConfig(beta=(0.0, 1.0), lambda_scale=1.3)
    a = fuse_attention(_ft(q1), _ft(p), _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE), cfg, 2)
    b = fuse_attention(_ft(q2), _ft(p), _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE), cfg, 2)
    assert torch.equal(a.data, b.data)


def test_fused_at_unit_settings_is_bitwise_plain_attention():
    gen = torch.Generator().manual_seed(3)
    q = torch.randn(7, 5, generator=gen)
    p = torch.randn(7, 5, generator=gen)
    k = torch.randn(4, 5, generator=gen)
    v = torch.randn(4, 6, generator=gen)
    ftq, ftp = _ft(q), _ft(p, FeatureKind.QUERY_PRESERVE)
    ftk, ftv = _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE)
    cfg = AttnConfig(beta=(1.0, 0.0), lambda_scale=1.0)
    fused = fuse_attention(ftq, ftp, ftk, ftv, cfg, 1)
    plain = standard_attention(ftq, ftk, ftv)
    assert torch.equal(fused.data, plain.data)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 6), m=st.integers(1, 6), d=st.integers(1, 6),
    lam=st.floats(0.1, 4.0), seed=st.integers(0, 10_000),
)
def test_attention_rows_are_stochastic(n, m, d, lam, seed):
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(n, d, generator=gen, dtype=torch.float64)
    k = torch.randn(m, d, generator=gen, dtype=torch.float64)
    w = attention_weights(q, k, lam / math.sqrt(d))
    assert float(w.min()) >= 0.0
    assert torch.allclose(w.sum(dim=-1), torch.ones(n, dtype=torch.float64), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(-3.0, 3.0))
def test_fused_output_is_linear_in_values(seed, scale):
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    p = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    k = torch.randn(5, 3, generator=gen, dtype=torch.float64)
    v1 = torch.randn(5, 2, generator=gen, dtype=torch.float64)
    v2 = torch.randn(5, 2, generator=gen, dtype=torch.float64)
    cfg = AttnConfig(beta=(0.4, 0.6), lambda_scale=1.5)

    def run(v):
        return fuse_attention(
            _ft(q), _ft(p, FeatureKind.QUERY_PRESERVE),
            _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE), cfg, 1
        ).data

    lhs = run(scale * v1 + v2)
    rhs = scale * run(v1) + run(v2)
    assert torch.allclose(lhs, rhs, atol=1e-9)


def test_row_entropy_never_increases_with_lambda():
    gen = torch.Generator().manual_seed(9)
    q = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    k = torch.randn(8, 4, generator=gen, dtype=torch.float64)
    lams = [0.25, 0.5, 1.0, 1.5, 2.0, 4.0]
    ents = [
        float(row_entropies(attention_weights(q, k, lam / 2.0)).mean())
        for lam in lams
    ]
    for lo, hi in zip(ents[1:], ents[:-1]):
        assert lo <= hi + 1e-12, f"entropy rose along {lams}: {ents}"


def test_uniform_weights_have_log_m_entropy():
    w = torch.full((3, 5), 0.2, dtype=torch.float64)
    assert torch.allclose(row_entropies(w), torch.full((3,), math.log(5), dtype=torch.float64))


# -- query blending ----------------------------------------------------------

def test_blend_endpoints_return_inputs_bitwise():
    gen = torch.Generator().manual_seed(4)
    q = _ft(torch.randn(3, 3, generator=gen))
    p = _ft(torch.randn(3, 3, generator=gen), FeatureKind.QUERY_PRESERVE)
    assert blend_queries(q, p, (1.0, 0.0)).data is q.data
    assert torch.equal(blend_queries(q, p, (0.0, 1.0)).data, p.data)


def test_blend_interior_is_convex_mix():
    q = _ft([[2.0, 0.0]])
    p = _ft([[0.0, 2.0]], FeatureKind.QUERY_PRESERVE)
    out = blend_queries(q, p, (0.25, 0.75))
    assert torch.allclose(out.data, torch.tensor([[0.5, 1.5]], dtype=torch.float64))
    assert out.kind is FeatureKind.QUERY


def test_blend_rejects_shape_mismatch_and_bad_beta():
    q = _ft([[1.0, 0.0]])
    p_bad = _ft([[1.0, 0.0, 0.0]], FeatureKind.QUERY_PRESERVE)
    with pytest.raises(ValueError):
        blend_queries(q, p_bad, (0.5, 0.5))
    p = _ft([[0.0, 1.0]], FeatureKind.QUERY_PRESERVE)
    with pytest.raises(ValueError):
        blend_queries(q, p, (0.7, 0.7))


# -- config and feature validation --------------------------------------------

def test_config_rejects_beta_not_summing_to_one():
    with pytest.raises(ValueError, match="beta"):
        AttnConfig(beta=(0.5, 0.6))


def test_config_rejects_negative_beta_component():
    with pytest.raises(ValueError, match="beta"):
        AttnConfig(beta=(1.5, -0.5))


def test_config_rejects_nonpositive_lambda():
    with pytest.raises(ValueError, match="lambda"):
        AttnConfig(lambda_scale=0.0)


def test_config_rejects_empty_layer_list_and_bad_interval():
    with pytest.raises(ValueError):
        AttnConfig(target_layers=())
    with pytest.raises(ValueError):
        AttnConfig(active_timesteps=(5, 2))


def test_lambda_schedule_overrides_constant():
    cfg = AttnConfig(lambda_scale=1.5, lambda_schedule=lambda t: 0.5 + 0.1 * t)
    assert cfg.lambda_for(5) == pytest.approx(1.0)
    assert AttnConfig(lambda_scale=1.5).lambda_for(5) == 1.5


def test_step_active_window():
    cfg = AttnConfig(active_timesteps=(3, 7))
    assert not cfg.step_active(2)
    assert cfg.step_active(3) and cfg.step_active(7)
    assert not cfg.step_active(8)
    assert AttnConfig(active_timesteps=(1, None)).step_active(10_000)


def test_feature_tensor_rejects_bad_shapes_and_values():
    with pytest.raises(ValueError):
        _ft(torch.zeros(3))
    with pytest.raises(ValueError):
        FeatureTensor(torch.zeros(2, 2, dtype=torch.int64), "l", 1, FeatureKind.QUERY)
    with pytest.raises(ValueError):
        _ft(torch.tensor([[float("nan"), 0.0]]))


# -- layer selection -----------------------------------------------------------

def test_default_layers_resolve_on_toy_registry_in_order():
    got = select_target_layers(TOY_LAYER_NAMES, DEFAULT_TARGET_LAYERS)
    assert got == [n for n in TOY_LAYER_NAMES if n in DEFAULT_TARGET_LAYERS]
    assert len(got) == 5


def test_glob_pattern_selects_both_attention_flavors():
    got = select_target_layers(
        TOY_LAYER_NAMES, ["up_blocks.3.attentions.2.*"]
    )
    assert got == [
        "up_blocks.3.attentions.2.transformer_blocks.0.attn1",
        "up_blocks.3.attentions.2.transformer_blocks.0.attn2",
    ]


def test_unmatched_pattern_is_named_in_error():
    with pytest.raises(ValueError, match="mid_block.made_up"):
        select_target_layers(TOY_LAYER_NAMES, ["mid_block.made_up.*"])


def test_duplicate_patterns_do_not_duplicate_layers():
    got = select_target_layers(
        TOY_LAYER_NAMES,
        ["up_blocks.3.attentions.2.*", "up_blocks.3.attentions.2.transformer_blocks.0.attn1"],
    )
    assert len(got) == len(set(got)) == 2

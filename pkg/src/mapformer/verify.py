"""Oracle and property suites, runnable without training.

Each check compares an implementation against an independent oracle (dense
matmul, sequential fold, brute-force tracker, central differences) at 64-bit.
Implementation functions are looked up on their modules at call time so a
patched function is what gets verified.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import torch

from . import mampa, models, numerics, rotor, tasks

SUITES = ("algebra", "attention", "ssm", "tasks", "grads")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    tol: float
    relation: str  # "<" or ">" or "==" against tol

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.suite}/{self.name}: {self.value:.3e} {self.relation} {self.tol:g}"

    def to_dict(self) -> dict:
        return asdict(self)


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _below(suite, name, value, tol) -> Check:
    value = _scalar(value)
    return Check(suite, name, bool(value < tol), value, tol, "<")


def _above(suite, name, value, tol) -> Check:
    value = _scalar(value)
    return Check(suite, name, bool(value > tol), value, tol, ">")


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _rot2(angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    return torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)


def dense_block_rotation(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Oracle: build the full block-diagonal matrix and multiply."""
    d = x.shape[-1]
    mat = torch.zeros(*theta.shape[:-1], d, d, dtype=x.dtype)
    blocks = _rot2(theta)
    for i in range(d // 2):
        mat[..., 2 * i:2 * i + 2, 2 * i:2 * i + 2] = blocks[..., i, :, :]
    return (mat @ x[..., None])[..., 0]


# -- suites ----------------------------------------------------------------------


def suite_algebra(seed: int = 0) -> list[Check]:
    g = _gen(seed)
    out = []
    t, h, nb = 24, 2, 4
    deltas = torch.randn(t, h, nb, 1, generator=g, dtype=torch.float64)
    omega = torch.rand(h, nb, generator=g, dtype=torch.float64) + 0.2
    theta = rotor.path_integrate(deltas, omega).blocks
    steps = _rot2(deltas[..., 0] * omega)  # (t, h, nb, 2, 2)
    seq = numerics.sequential_matmul(steps)
    out.append(_below("algebra", "cumsum_equals_sequential_product",
                      (seq - _rot2(theta)).abs().max(), 1e-6))
    scan = numerics.assoc_scan_matmul(steps)
    out.append(_below("algebra", "scan_equals_sequential_product", (scan - seq).abs().max(), 1e-8))

    x = torch.randn(t, h, 2 * nb, generator=g, dtype=torch.float64)
    rx = rotor.apply_rotation(x, theta, 1)
    out.append(_below("algebra", "rotation_matches_dense_oracle",
                      (rx - dense_block_rotation(x, theta)).abs().max(), 1e-6))
    out.append(_below("algebra", "norm_preservation",
                      (rx.norm(dim=-1) - x.norm(dim=-1)).abs().max(), 1e-6))
    back = rotor.apply_rotation(rx, theta, -1)
    out.append(_below("algebra", "inverse_action_round_trip", (back - x).abs().max(), 1e-6))

    basis4 = numerics.SkewBasis.standard(4)
    r4 = numerics.matrix_exp_skew(torch.randn(6, generator=g, dtype=torch.float64) * 2, basis4)
    out.append(_below("algebra", "orthogonality_so4", (r4.T @ r4 - torch.eye(4)).abs().max(), 1e-6))
    ta = torch.tensor([1.0, 0, 0, 0, 0, 0], dtype=torch.float64)
    tb = torch.tensor([0, 1.0, 0, 0, 0, 0], dtype=torch.float64)
    gap = (numerics.matrix_exp_skew(ta + tb, basis4)
           - numerics.matrix_exp_skew(ta, basis4) @ numerics.matrix_exp_skew(tb, basis4)).abs().max()
    out.append(_above("algebra", "noncommutativity_witness", gap, 1e-3))

    q = torch.randn(2 * nb, generator=g, dtype=torch.float64)
    k = torch.randn(2 * nb, generator=g, dtype=torch.float64)
    ti = torch.randn(nb, generator=g, dtype=torch.float64) * 5
    tj = torch.randn(nb, generator=g, dtype=torch.float64) * 5
    lhs = rotor.apply_rotation(q, ti) @ rotor.apply_rotation(k, tj)
    rhs = rotor.apply_rotation(q, ti - tj) @ k
    out.append(_below("algebra", "relative_position_identity", abs(lhs - rhs), 1e-6))
    return out


def _small_cfg(variant: str, **kw) -> models.ModelConfig:
    base = dict(variant=variant, n_layers=1, n_heads=2, head_dim=8, vocab_size=12, rank=2,
                grid_size_hint=16)
    base.update(kw)
    return models.ModelConfig(**base)


def suite_attention(seed: int = 0) -> list[Check]:
    g = _gen(seed)
    out = []
    torch.manual_seed(seed)
    cfg = _small_cfg("map_wm")
    wm = models.MapWMAttention(cfg).double()
    rope = models.RopeAttention(models.ModelConfig(**{**cfg.__dict__, "variant": "rope"})).double()
    # frozen RoPE schedule in the rotor and unit integration times
    with torch.no_grad():
        wm.bank.omega.copy_(rope.freqs.omega)
        for name in ("q_proj", "k_proj", "v_proj", "out_proj"):
            getattr(rope, name).weight.copy_(getattr(wm, name).weight)
    wm.deltas_override = torch.ones(1, dtype=torch.float64)
    x = torch.randn(1, 20, cfg.d_model, generator=g, dtype=torch.float64)
    q, k, _ = wm.qkv(x)
    path = wm.path(x)
    wm_logits = wm.logits(wm.rotate(q, path), wm.rotate(k, path))
    theta = rope.angles(20, torch.float64)
    rope_logits = rope.logits(rotor.apply_rotation(q, theta), rotor.apply_rotation(k, theta))
    out.append(_below("attention", "rope_reduction_logits", (wm_logits - rope_logits).abs().max(), 1e-5))

    worst = 0.0
    for t in (1, 2, 16, 64, 128):
        dh = 8
        q = torch.randn(t, dh, generator=g, dtype=torch.float64)
        k = torch.randn(t, dh, generator=g, dtype=torch.float64)
        v = torch.randn(t, 3, generator=g, dtype=torch.float64)
        d = torch.randn(t, dh // 2, generator=g, dtype=torch.float64)
        om = torch.rand(dh // 2, generator=g, dtype=torch.float64) * 2
        worst = max(worst, models.linear_rope_ssm_equivalence(q, k, v, d, om))
    out.append(_below("attention", "linear_rope_equals_ssm_t128", worst, 1e-6))

    worst = 0.0
    for _ in range(10):
        qx, kx, qp, kp = (torch.randn(5, 6, generator=g, dtype=torch.float64) for _ in range(4))
        explicit, factorized = models.em_conjunctive_gram(qx, kx, qp, kp)
        worst = max(worst, float((explicit - factorized).abs().max()))
    out.append(_below("attention", "em_factorization_identity", worst, 1e-6))

    em = models.MapEMAttention(_small_cfg("map_em_os")).double()
    em.keep_trace = True
    em(x)
    tr = em.trace
    recomposed = tr.A_X * tr.A_P
    recomposed = recomposed / recomposed.sum(-1, keepdim=True)
    out.append(_below("attention", "em_product_renormalization", (recomposed - tr.A).abs().max(), 1e-6))
    out.append(_below("attention", "attention_rows_stochastic", (tr.A.sum(-1) - 1).abs().max(), 1e-5))

    # causality for every variant
    worst = 0.0
    for variant in models.VARIANTS:
        torch.manual_seed(seed)
        m = models.Model(_small_cfg(variant)).double().eval()
        a = torch.randint(0, 12, (1, 10), generator=g)
        b = a.clone()
        b[0, 6:] = torch.randint(0, 12, (4,), generator=g)
        with torch.no_grad():
            worst = max(worst, float((m(a)[0, :6] - m(b)[0, :6]).abs().max()))
    out.append(_below("attention", "causality_all_variants", worst, 1e-12))
    return out


def suite_ssm(seed: int = 0) -> list[Check]:
    g = _gen(seed)
    out = []
    for structure in ("diagonal", "scalar", "block_skew"):
        worst = 0.0
        for t in (1, 2, 3, 31, 32, 33, 256):
            n, c = 8, 3
            u = torch.randn(2, t, c, n, generator=g, dtype=torch.float64)
            if structure == "block_skew":
                a = torch.randn(2, t, c, n // 2, generator=g, dtype=torch.float64)
            else:
                a = torch.rand(2, t, c, n, generator=g, dtype=torch.float64)
                if structure == "scalar":
                    a = a[..., :1].expand_as(u)
            par = mampa.selective_scan_parallel(a, u, structure)
            seq = mampa.selective_scan_sequential(a, u, structure)
            worst = max(worst, float((par - seq).abs().max()))
        out.append(_below("ssm", f"scan_equals_fold_{structure}", worst, 1e-6))

    phi = torch.randn(50, generator=g, dtype=torch.float64) * 3
    h = torch.randn(50, 2, generator=g, dtype=torch.float64)
    c, s, _, _ = mampa.zoh_rotation(phi)
    hn = mampa._rot(h, c[:, None], s[:, None])
    out.append(_below("ssm", "block_skew_norm_preserving", (hn.norm(dim=-1) - h.norm(dim=-1)).abs().max(), 1e-6))

    # dense ZOH against the closed-form rotation blocks
    omega, delta = 1.3, 0.7
    S = torch.tensor([[0.0, -1.0], [1.0, 0.0]], dtype=torch.float64)
    B = torch.randn(2, 1, generator=g, dtype=torch.float64)
    a_bar, b_bar = mampa.discretize_zoh(omega * S, B, delta)
    phi = torch.tensor([omega * delta], dtype=torch.float64)
    c, s, md, mo = mampa.zoh_rotation(phi)
    closed_b = mampa._rot((delta * B[:, 0])[None], md, mo)[0]
    err = max(float((a_bar - _rot2(phi)[0]).abs().max()), float((b_bar[:, 0] - closed_b).abs().max()))
    out.append(_below("ssm", "zoh_rotation_closed_form", err, 1e-10))

    # least-squares fit of a diagonal matrix to a quarter turn
    design = torch.stack([torch.diag(e) for e in torch.eye(2, dtype=torch.float64)]).flatten(1).T
    coef = torch.linalg.lstsq(design, S.flatten()[:, None]).solution
    residual = float((S.flatten() - (design @ coef)[:, 0]).norm())
    out.append(Check("ssm", "diagonal_cannot_rotate_residual", residual >= 1.0, residual, 1.0, ">="))
    return out


def suite_tasks(seed: int = 0, n: int = 10_000) -> list[Check]:
    out = []
    copy_cfg = tasks.CopyConfig(32, 32, 16)
    mism = 0
    for i in range(n):
        ep = tasks.generate_one("copy", copy_cfg, seed, i)
        blank = copy_cfg.vocab.blank_id
        sep = ep.tokens.index(copy_cfg.vocab.sep_id)
        answer = [t for t in ep.tokens[:sep] if t != blank]
        expected = [(sep + 1 + j, tok) for j, tok in enumerate(answer)]
        mism += expected != list(ep.targets)
    out.append(Check("tasks", "copy_targets_vs_oracle", mism == 0, mism, 0, "=="))
    worked = tasks.solve_copy_string("CFEABABBBCBF") == "CFEAACF"
    out.append(Check("tasks", "copy_worked_example", worked, float(not worked), 0, "=="))

    for name, cfg in (("nav1d", tasks.NavConfig(1, 16, 64)), ("nav2d", tasks.NavConfig(2, 12, 64))):
        mism = 0
        for i in range(n):
            ep = tasks.generate_one("nav", cfg, seed, i)
            mism += tasks.track_navigation_targets(ep) != list(ep.targets)
        out.append(Check("tasks", f"{name}_targets_vs_tracker", mism == 0, mism, 0, "=="))
    rcfg = tasks.RotationNavConfig(steps=16)
    mism = 0
    for i in range(n):
        ep = tasks.generate_one("rotation_nav", rcfg, seed, i)
        mism += tasks.track_rotation_targets(ep) != list(ep.targets)
    out.append(Check("tasks", "rotation_targets_vs_tracker", mism == 0, mism, 0, "=="))
    return out


def _grad_check_param(model, name: str, tokens) -> float:
    params = dict(model.named_parameters())
    base = params[name].detach().clone()

    def f(value):
        logits = torch.func.functional_call(model, {name: value}, (tokens[:, :-1],))
        return torch.nn.functional.cross_entropy(logits.transpose(1, 2), tokens[:, 1:])

    return numerics.grad_check(f, base, eps=1e-4, max_coords=24, generator=_gen(7))


def suite_grads(seed: int = 0) -> list[Check]:
    out = []
    g = _gen(seed)
    tokens = torch.randint(0, 12, (2, 9), generator=g)
    for variant, names in (
        ("map_wm", ("blocks.0.attn.delta_proj.W_in.weight", "blocks.0.attn.bank.omega",
                    "blocks.0.attn.q_proj.weight")),
        ("map_em_os", ("blocks.0.attn.delta_proj.W_out.weight", "blocks.0.attn.zero.k_star",
                       "blocks.0.attn.bank.omega")),
    ):
        torch.manual_seed(seed)
        m = models.Model(_small_cfg(variant)).double()
        worst = max(_grad_check_param(m, n, tokens) for n in names)
        out.append(_below("grads", f"{variant}_central_differences", worst, 1e-3))
    torch.manual_seed(seed)
    ssm = mampa.SsmModel(mampa.SsmConfig(state_size=8, structure="block_skew", d_model=16, rank=2,
                                         vocab_size=12)).double()
    with torch.no_grad():
        # unit-scale steps so rotation angles are far from the small-angle regime
        ssm.blocks[0].attn.dt_out.bias.zero_()
    names = ("blocks.0.attn.omega", "blocks.0.attn.dt_in.weight", "blocks.0.attn.B_proj.weight")
    worst = max(_grad_check_param(ssm, n, tokens) for n in names)
    out.append(_below("grads", "mampa_central_differences", worst, 1e-3))
    return out


RUNNERS = {
    "algebra": suite_algebra,
    "attention": suite_attention,
    "ssm": suite_ssm,
    "tasks": suite_tasks,
    "grads": suite_grads,
}


def run_suite(name: str, seed: int = 0, **kw) -> list[Check]:
    if name not in RUNNERS:
        raise KeyError(f"unknown suite {name!r}; known: {list(SUITES)}")
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        return RUNNERS[name](seed=seed, **kw)
    finally:
        torch.set_default_dtype(prev)


def run_all(suites=SUITES, seed: int = 0, report: Callable[[str], None] | None = None) -> list[Check]:
    checks = []
    for s in suites:
        t0 = time.time()
        got = run_suite(s, seed)
        checks.extend(got)
        if report:
            for c in got:
                report(c.line())
            report(f"-- {s}: {sum(c.passed for c in got)}/{len(got)} in {time.time() - t0:.1f}s")
    return checks

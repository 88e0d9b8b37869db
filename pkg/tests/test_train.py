import json
import math

import pytest
import torch
from torch import nn

from mapformer.models import Model, ModelConfig
from mapformer.tasks import CopyConfig, NavConfig, generate
from mapformer.train import (
    TrainConfig,
    TrainingDiverged,
    batch_loss,
    collate,
    evaluate,
    linear_decay,
    make_optimizer,
    train,
)

NAV = NavConfig(1, 8, 24)


def small_model(variant="map_wm", vocab=NAV.vocab.size, seed=0):
    torch.manual_seed(seed)
    return Model(ModelConfig(variant=variant, n_heads=2, head_dim=8, vocab_size=vocab, rank=1,
                             grid_size_hint=8))


class OracleModel(nn.Module):
    """Cheating upper bound: looks the episode up and emits the true next token."""

    def __init__(self, episodes, vocab):
        super().__init__()
        self.lookup = {tuple(e.tokens[:-1]): e.tokens for e in episodes}
        self.vocab = vocab

    def forward(self, inputs):
        out = torch.full((*inputs.shape, self.vocab), -10.0)
        for b, row in enumerate(inputs.tolist()):
            key = next(k for k in self.lookup if tuple(row[: len(k)]) == k)
            for i, tok in enumerate(self.lookup[key][1:]):
                out[b, i, tok] = 10.0
        return out


class RandomObjectModel(nn.Module):
    def __init__(self, vocab, n_objects, seed=0):
        super().__init__()
        self.vocab, self.k = vocab, n_objects
        self.g = torch.Generator().manual_seed(seed)

    def forward(self, inputs):
        out = torch.full((*inputs.shape, self.vocab), -1e9)
        out[..., : self.k] = torch.rand(*inputs.shape, self.k, generator=self.g)
        return out


class TestPieces:
    def test_linear_decay(self):
        assert linear_decay(0, 10) == 1.0
        assert linear_decay(5, 10) == 0.5
        assert linear_decay(12, 10) == 0.0

    def test_total_steps(self):
        assert TrainConfig(n_sequences=1000, batch_size=128).total_steps == 8

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1)

    def test_collate_shift_and_padding(self):
        eps = generate("copy", CopyConfig(2, 2, 4), 1, 0) + generate("copy", CopyConfig(3, 3, 4), 1, 0)
        b = collate(eps)
        assert b.inputs.shape == (2, 9)
        assert torch.equal(b.targets[1], torch.tensor(eps[1].tokens[1:]))
        assert b.loss_w[0, 5:].sum() == 2 - 2 + 0 or b.loss_w[0].sum() == 2
        assert b.acc_w[0, 6:].sum() == 0  # padding never scored
        for pos, tok in eps[1].targets:
            assert b.acc_w[1, pos - 1] == 1 and b.targets[1, pos - 1] == tok

    def test_optimizer_is_adamw(self):
        opt = make_optimizer(small_model(), TrainConfig())
        g = opt.param_groups[0]
        assert isinstance(opt, torch.optim.AdamW)
        assert g["betas"] == (0.9, 0.999) and g["eps"] == 1e-8 and g["weight_decay"] == 0.05


class TestEvaluate:
    def test_oracle_scores_one(self):
        eps = generate("nav", NAV, 8, 1)
        res = evaluate(OracleModel(eps, NAV.vocab.size), eps, batch_size=3)
        assert res["accuracy"] == 1.0
        assert res["n_targets"] == sum(len(e.targets) for e in eps)

    def test_random_logits_near_chance(self):
        eps = generate("nav", NavConfig(1, 4, 200), 20, 1)
        res = evaluate(RandomObjectModel(NAV.vocab.size, 10), eps)
        n = res["n_targets"]
        sigma = math.sqrt(0.1 * 0.9 / n)
        assert abs(res["accuracy"] - 0.1) < 3 * sigma

    def test_untrained_in_chance_band(self):
        eps = generate("nav", NavConfig(1, 4, 100), 16, 2)
        res = evaluate(small_model(), eps)
        sigma = math.sqrt(0.1 * 0.9 / res["n_targets"])
        assert res["accuracy"] <= 0.1 + 3 * sigma + 0.1  # a constant guess can hit one object's share

    def test_no_targets(self):
        eps = generate("nav", NavConfig(1, 64, 2, p_empty=0.0), 1, 0)
        eps[0].targets = []
        res = evaluate(small_model(), eps)
        assert res["accuracy"] is None and res["n_targets"] == 0


class TestTrain:
    def cfg(self, **kw):
        base = dict(lr=3e-3, batch_size=8, n_sequences=64, eval_every=2, seed=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_loss_decreases_on_copy(self):
        cc = CopyConfig(4, 4, 4)
        data = generate("copy", cc, 512, 0)
        model = small_model("map_wm", cc.vocab.size)
        before = evaluate(model, data[:64])["loss"]
        model, metrics, _ = train(model, data, self.cfg(n_sequences=512, eval_every=0, lr=1e-2))
        assert evaluate(model, data[:64])["loss"] < before - 0.3
        assert model.train_step == 64

    def test_metrics_rows(self, tmp_path):
        data = generate("nav", NAV, 64, 0)
        evals = {"iid": generate("nav", NAV, 8, 99)}
        path = tmp_path / "m.jsonl"
        _, metrics, _ = train(small_model(), data, self.cfg(), eval_sets=evals, metrics_path=path)
        rows = [json.loads(l) for l in path.read_text().splitlines()]
        assert rows == metrics
        assert {r["split"] for r in rows} == {"train", "iid"}
        assert [r["step"] for r in rows if r["split"] == "iid"] == [2, 4, 6, 8]
        assert set(rows[0]) == {"step", "split", "loss", "accuracy", "n_targets", "wallclock", "angle_norm"}
        assert {"action", "observation"} <= set(rows[0]["angle_norm"])
        assert "angle_norm" not in next(r for r in rows if r["split"] == "iid")

    def test_deterministic(self):
        data = generate("nav", NAV, 64, 0)
        a, _, _ = train(small_model(), data, self.cfg())
        b, _, _ = train(small_model(), data, self.cfg())
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_resume_bitwise(self):
        data = generate("nav", NAV, 64, 0)
        full, _, _ = train(small_model(), data, self.cfg())
        half, _, opt = train(small_model(), data, self.cfg(), max_steps=3)
        state = opt.state_dict()
        resumed, _, _ = train(half, data[3 * 8:], self.cfg(), start_step=3, optimizer_state=state)
        assert resumed.train_step == 8
        for pa, pb in zip(full.parameters(), resumed.parameters()):
            assert torch.equal(pa, pb)

    def test_divergence_snapshot(self):
        model = small_model()
        with torch.no_grad():
            model.head.weight.fill_(float("nan"))
        with pytest.raises(TrainingDiverged) as info:
            train(model, generate("nav", NAV, 16, 0), self.cfg())
        assert info.value.snapshot["step"] == 0 and "head.weight" in info.value.snapshot["param_norms"]

    def test_angle_norms_absent_for_rope(self):
        data = generate("nav", NAV, 16, 0)
        _, metrics, _ = train(small_model("rope"), data, self.cfg(n_sequences=16))
        assert metrics[0]["angle_norm"] is None

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(small_model(), [], self.cfg())

    def test_batch_loss_masks(self):
        eps = generate("nav", NAV, 4, 0)
        batch = collate(eps)
        loss, correct = batch_loss(small_model(), batch)
        assert loss.ndim == 0 and correct.shape == batch.targets.shape

    def test_float64_precision(self):
        model, _, _ = train(small_model(), generate("nav", NAV, 16, 0), self.cfg(precision=64, n_sequences=16))
        assert next(model.parameters()).dtype == torch.float64

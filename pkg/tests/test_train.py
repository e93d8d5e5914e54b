import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings, strategies as st

from composer_gar import config, synth, train
from composer_gar.cluster import cluster_loss
from composer_gar.dataset import compute_stats
from composer_gar.mstransformer import ForwardOutput

from conftest import tiny_config


def _setup(small_synth, n=2, **overrides):
    clips, manifest, stats = small_synth
    cfg = tiny_config(**overrides)
    model = train.build_model(cfg, manifest, clips[0].T).double().eval()
    batch = train.make_batch(clips[:n], manifest, stats, cfg, torch.float64)
    return model, batch, cfg


def _ce(logits: torch.Tensor, labels) -> float:
    """Cross-entropy by hand: mean over rows of logsumexp(z) - z[y]."""
    z = logits.detach().numpy()
    total = 0.0
    for row, y in zip(z, np.asarray(labels)):
        m = row.max()
        total += m + math.log(np.exp(row - m).sum()) - row[y]
    return total / len(z)


def _person_ce(out, batch) -> float:
    keep = ((batch.person_actions >= 0) & (batch.person_mask > 0)).numpy()
    logits = out.person_logits.detach().numpy()[keep]
    return _ce(torch.as_tensor(logits), batch.person_actions.numpy()[keep])


class TestLossAlgebra:
    def test_full_loss_term_for_term(self, small_synth):
        model, batch, cfg = _setup(small_synth)
        with torch.no_grad():
            out = model(batch)
            losses = train.total_loss(model, out, batch, cfg)
        y = batch.group_label.numpy()
        aux = sum(_ce(lg, y) for lg in out.group_logits[0])
        last = sum(_ce(lg, y) for lg in out.group_logits[1])
        person = _person_ce(out, batch)
        clu, _ = cluster_loss(out.clip_reprs, model.prototypes, 0.1, 0.05, 3)
        assert losses.aux.item() == pytest.approx(aux, abs=1e-9)
        assert losses.last.item() == pytest.approx(last, abs=1e-9)
        assert losses.person.item() == pytest.approx(person, abs=1e-9)
        assert losses.cluster.item() == pytest.approx(clu.item(), abs=1e-9)
        expected = aux + cfg.lam * (last + person + clu.item())
        assert losses.total.item() == pytest.approx(expected, abs=1e-9)

    def test_no_cluster_no_aux_is_two_task_ce(self, small_synth):
        model, batch, cfg = _setup(small_synth, **{"cluster.enabled": False, "train.aux": False,
                                                   "train.lambda": 1.0})
        with torch.no_grad():
            out = model(batch)
            losses = train.total_loss(model, out, batch, cfg)
        group = _ce(out.final_logits, batch.group_label.numpy())
        person = _person_ce(out, batch)
        assert losses.aux.item() == 0.0 and losses.cluster.item() == 0.0
        assert losses.total.item() == pytest.approx(group + person, abs=1e-9)

    def test_no_cluster_keeps_aux(self, small_synth):
        model, batch, cfg = _setup(small_synth, **{"cluster.enabled": False})
        with torch.no_grad():
            out = model(batch)
            losses = train.total_loss(model, out, batch, cfg)
        y = batch.group_label.numpy()
        expected = (sum(_ce(lg, y) for lg in out.group_logits[0])
                    + 3.0 * (sum(_ce(lg, y) for lg in out.group_logits[1]) + _person_ce(out, batch)))
        assert losses.total.item() == pytest.approx(expected, abs=1e-9)

    def test_single_block_has_no_aux(self, small_synth):
        model, batch, cfg = _setup(small_synth, **{"model.blocks": 1})
        with torch.no_grad():
            losses = train.total_loss(model, model(batch), batch, cfg)
        assert losses.aux.item() == 0.0
        expected = cfg.lam * (losses.last + losses.person + losses.cluster)
        assert losses.total.item() == pytest.approx(expected.item(), abs=1e-12)

    def test_no_multiscale_loss(self, small_synth):
        model, batch, cfg = _setup(small_synth, **{"model.multiscale": False, "train.lambda": 1.0})
        with torch.no_grad():
            out = model(batch)
            losses = train.total_loss(model, out, batch, cfg)
        expected = _ce(out.final_logits, batch.group_label.numpy()) + _person_ce(out, batch)
        assert losses.cluster.item() == 0.0 and losses.aux.item() == 0.0
        assert losses.total.item() == pytest.approx(expected, abs=1e-9)

    @settings(max_examples=10, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.floats(0.1, 10.0))
    def test_lambda_scaling(self, small_synth, c):
        model, batch, cfg = _setup(small_synth)
        with torch.no_grad():
            out = model(batch)
            base = train.total_loss(model, out, batch, cfg)
            scaled_cfg = replace(cfg, lam=cfg.lam * c)
            scaled = train.total_loss(model, out, batch, scaled_cfg, codes=base.codes)
        assert scaled.aux.item() == base.aux.item()
        weighted = (scaled.total - scaled.aux).item()
        assert weighted == pytest.approx(c * (base.total - base.aux).item(), rel=1e-12)

    def test_terms_nonnegative(self, small_synth):
        model, batch, cfg = _setup(small_synth, n=8)
        with torch.no_grad():
            losses = train.total_loss(model, model(batch), batch, cfg)
        assert all(v >= 0 for v in losses.as_floats().values())

    def test_perfect_predictions_zero_loss(self, small_synth):
        model, batch, cfg = _setup(small_synth, **{"cluster.enabled": False})
        B, P = len(batch), batch.person_mask.shape[1]
        onehot = torch.nn.functional.one_hot(batch.group_label, 4).double() * 1000
        person = torch.nn.functional.one_hot(batch.person_actions.clamp(min=0), 2).double() * 1000
        out = ForwardOutput([], torch.zeros(B, P, 16), [[onehot] * 4] * 2, person)
        assert train.total_loss(model, out, batch, cfg).total.item() == 0.0

    def test_unlabeled_persons_flagged(self, small_synth):
        model, batch, cfg = _setup(small_synth)
        batch = replace(batch, person_actions=torch.full_like(batch.person_actions, -1))
        with torch.no_grad():
            losses = train.total_loss(model, model(batch), batch, cfg)
        assert losses.person.item() == 0.0 and losses.person_unlabeled


class TestOptimization:
    def test_zero_lr_leaves_parameters(self, small_synth):
        clips, manifest, stats = small_synth
        cfg = tiny_config(**{"train.lr": 0.0})
        model = train.build_model(cfg, manifest, clips[0].T)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        opt = train.build_optimizer(model, cfg)
        train.train_step(model, opt, train.make_batch(clips, manifest, stats, cfg), cfg)
        for k, v in model.state_dict().items():
            if k == "prototypes":
                assert torch.allclose(v, before[k], atol=1e-7)
            else:
                assert torch.equal(v, before[k]), k

    def test_prototypes_unit_after_step(self, small_synth):
        clips, manifest, stats = small_synth
        cfg = tiny_config()
        model = train.build_model(cfg, manifest, clips[0].T)
        opt = train.build_optimizer(model, cfg)
        train.train_step(model, opt, train.make_batch(clips, manifest, stats, cfg), cfg)
        assert torch.allclose(model.prototypes.norm(dim=1), torch.ones(cfg.cluster.K), atol=1e-6)

    def test_seeded_runs_identical(self, small_synth):
        clips, manifest, stats = small_synth
        cfg = tiny_config()
        runs = []
        for _ in range(2):
            model = train.build_model(cfg, manifest, clips[0].T)
            opt = train.build_optimizer(model, cfg)
            torch.manual_seed(cfg.seed)
            losses = []
            for epoch in range(3):
                batch = train.training_batch(clips, manifest, stats, cfg, epoch)
                losses.append(train.train_step(model, opt, batch, cfg)[0].total.item())
            runs.append(losses)
        assert runs[0] == runs[1]

    def test_fifty_steps_halve_the_loss(self):
        clips, manifest = synth.generate_dataset(synth.SynthConfig(n_clips=32, seed=3))
        cfg = config.desk()
        stats = compute_stats(clips)
        model = train.build_model(cfg, manifest, clips[0].T)
        opt = train.build_optimizer(model, cfg)
        batch = train.make_batch(clips, manifest, stats, cfg)

        def batch_loss():
            # dropout off so the same parameters always give the same value
            model.eval()
            with torch.no_grad():
                value = train.total_loss(model, model(batch), batch, cfg).total.item()
            model.train()
            return value

        losses = [batch_loss()]
        for _ in range(5):
            for _ in range(10):
                train.train_step(model, opt, batch, cfg)
            losses.append(batch_loss())
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.5 * losses[0]

    def test_no_decay_on_prototypes_and_layer_norms(self, small_synth):
        clips, manifest, _ = small_synth
        cfg = tiny_config()
        model = train.build_model(cfg, manifest, clips[0].T)
        decay, no_decay = train.build_optimizer(model, cfg).param_groups
        ids = {id(p) for p in no_decay["params"]}
        assert id(model.prototypes) in ids
        assert id(model.blocks[0].encoders[0].ln1.weight) in ids
        assert id(model.group_head.weight) not in ids
        assert decay["weight_decay"] == cfg.weight_decay and no_decay["weight_decay"] == 0.0

    def test_learning_rate_schedule(self):
        cfg = config.volleyball()
        assert train.learning_rate(cfg, 39) == 5e-4
        assert train.learning_rate(cfg, 40) == 1e-4


class _Oracle(torch.nn.Module):
    """Model stub whose logits are a function of the true labels."""

    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, batch):
        return ForwardOutput([], None, [[self.logits(batch.group_label)]], None)


class TestEvaluate:
    def test_perfect_classifier(self, small_synth):
        clips, manifest, stats = small_synth
        batch = train.make_batch(clips, manifest, stats, tiny_config())
        model = _Oracle(lambda y: torch.nn.functional.one_hot(y, 4).float())
        res = train.evaluate_batch(model, batch, 4)
        assert res.accuracy == 1.0
        assert res.confusion == np.diag(np.bincount(batch.group_label.numpy(), minlength=4)).tolist()

    def test_rows_are_support_and_accuracy_is_trace(self, small_synth):
        clips, manifest, stats = small_synth
        batch = train.make_batch(clips, manifest, stats, tiny_config())
        model = _Oracle(lambda y: torch.nn.functional.one_hot((y + (y % 2)) % 4, 4).float())
        res = train.evaluate_batch(model, batch, 4, chunk=3)
        conf = np.array(res.confusion)
        assert conf.sum(1).tolist() == np.bincount(batch.group_label.numpy(), minlength=4).tolist()
        assert res.accuracy == np.trace(conf) / conf.sum()
        assert res.n == len(batch)

    def test_restores_training_mode(self, small_synth):
        model, batch, cfg = _setup(small_synth)
        model.train()
        train.evaluate_batch(model, batch, 4)
        assert model.training


class TestGradCheck:
    def test_linear_head(self):
        g = torch.Generator().manual_seed(0)
        x = torch.randn(6, 5, generator=g, dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 0, 1, 2])
        head = torch.nn.Linear(5, 3).double()
        report = train.grad_check_fn(lambda: torch.nn.functional.cross_entropy(head(x), y),
                                     dict(head.named_parameters()), n_coords=18)
        assert report.max_rel_error <= 1e-8
        assert len(report.entries) == 18

    def test_tiny_model(self, small_synth):
        clips, manifest, stats = small_synth
        cfg = tiny_config()
        model = train.build_model(cfg, manifest, clips[0].T)
        batch = train.make_batch(clips, manifest, stats, cfg)
        report = train.grad_check(model, batch, cfg, n_coords=200)
        assert report.max_rel_error <= 1e-4
        assert len(report.entries) + len(report.kinks) == 200
        assert len(report.worst) == 10

    def test_step_sweep_is_v_shaped(self, small_synth):
        clips, manifest, stats = small_synth
        cfg = tiny_config()
        model = train.build_model(cfg, manifest, clips[0].T)
        batch = train.make_batch(clips, manifest, stats, cfg)
        steps = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
        errors = train.step_sweep(model, batch, cfg, steps, n_coords=40)
        curve = [errors[h] for h in steps]
        bottom = int(np.argmin(curve))
        assert 0 < bottom < len(steps) - 1
        assert all(a >= b for a, b in zip(curve[:bottom], curve[1:bottom + 1]))
        assert all(a <= b for a, b in zip(curve[bottom:], curve[bottom + 1:]))

    def test_relative_error_floor(self):
        assert train.relative_error(0.0, 0.0) == 0.0
        assert train.relative_error(1e-12, 0.0) == pytest.approx(1e-4)
        assert train.relative_error(2.0, 1.0) == 0.5


def test_csv_header_and_rows():
    rows = [{"epoch": 1, "loss_total": 1.5, "loss_aux": 0.25, "loss_last": 0.5, "loss_person": 0.125,
             "loss_cluster": 0.0, "train_acc": 0.5, "val_acc": float("nan")}]
    text = train.format_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "epoch,loss_total,loss_aux,loss_last,loss_person,loss_cluster,train_acc,val_acc"
    assert lines[1] == "1,1.5,0.25,0.5,0.125,0.0,0.5,nan"


def test_fit_history(small_synth):
    clips, manifest, _ = small_synth
    cfg = tiny_config(**{"train.epochs": 2, "train.batch_size": 4})
    seen = []
    res = train.fit(cfg, clips[:6], manifest, clips[6:], on_epoch=seen.append)
    assert [r["epoch"] for r in res.history] == [1, 2]
    assert seen == res.history
    assert set(train.CSV_FIELDS) <= set(res.history[0])
    with pytest.raises(ValueError):
        train.fit(cfg, [], manifest)

import csv
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from references import summed_risk_reference, supervised_reference
from ssdg.data import DomainDataset, synth_domains
from ssdg.dg import (DGConfig, EnvironmentSampler, accuracy, cross_domain, erm_finetune,
                     irm_finetune, irm_penalty, leave_one_out_sweep, penalty_weight_at, write_results)
from ssdg.errors import ConfigError, DataError, NumericalError, SSDGError
from ssdg.nets import BackboneConfig

TINY = BackboneConfig("small", 4, 32)
CFG = DGConfig(epochs=2, batch_size=16, backbone=TINY)


@pytest.fixture(scope="module")
def domains():
    return synth_domains(0, n_per_class=6, size=32)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75
    with pytest.raises(SSDGError):
        accuracy([], [])


def test_epoch_zero_accuracy_is_chance(domains):
    target = domains[3]
    n, c = len(target), target.num_classes
    sigma = math.sqrt((1 / c) * (1 - 1 / c) / n)
    for seed in range(3):
        res = erm_finetune("random", domains[:3], target, DGConfig(epochs=0, seed=seed, backbone=TINY))
        assert len(res.target_acc) == 1
        assert abs(res.target_acc[0] - 1 / c) <= 3 * sigma + 1e-12


def test_single_source_reduces_to_supervised_training(domains):
    d = domains[0]
    target = d.val_view()
    res = erm_finetune("random", [d], target, CFG)
    losses, accs = supervised_reference(d, target, CFG)
    assert res.step_losses == losses
    np.testing.assert_allclose(res.target_acc, accs, atol=1e-12)


def test_cross_domain_is_single_source_erm(domains):
    a = cross_domain(domains[0], domains[3], "random", CFG)
    b = erm_finetune("random", [domains[0]], domains[3], CFG)
    assert a.step_losses == b.step_losses and a.target_acc == b.target_acc


def test_source_order_does_not_matter(domains):
    a = erm_finetune("random", domains[:3], domains[3], CFG)
    b = erm_finetune("random", domains[2::-1], domains[3], CFG)
    assert a.step_losses == b.step_losses
    assert a.target_acc == b.target_acc


def test_result_bookkeeping(domains):
    res = erm_finetune("random", domains[:3], domains[3], CFG)
    assert len(res.target_acc) == len(res.source_val_acc) == CFG.epochs + 1
    assert res.best_target_acc == max(res.target_acc)
    assert res.source_selected_target_acc == res.target_acc[int(np.argmax(res.source_val_acc))]
    assert res.sources == sorted(d.name for d in domains[:3])


def test_domain_checks(domains):
    with pytest.raises(ConfigError):
        erm_finetune("random", [], domains[0], CFG)
    with pytest.raises(ConfigError):
        erm_finetune("random", domains[:2], domains[0], CFG)
    other = DomainDataset("odd", domains[0].images, domains[0].labels,
                          ["a", "b", "c", "d", "e"])
    with pytest.raises(DataError):
        erm_finetune("random", [other], domains[1], CFG)
    with pytest.raises(ConfigError):
        irm_finetune("random", [domains[0]], domains[1], CFG)


def test_nan_loss_aborts(domains):
    bad = DomainDataset("bad", domains[0].images.copy(), domains[0].labels, domains[0].class_names)
    bad.images[:] = np.nan
    with pytest.raises(NumericalError):
        erm_finetune("random", [bad], domains[1], CFG)


def test_irm_penalty_matches_closed_form():
    logits = torch.tensor([[2.0, -1.0, 0.5], [0.1, 0.2, -0.3]], dtype=torch.float64)
    labels = torch.tensor([0, 2])
    p = F.softmax(logits, 1)
    # d/dw CE(w * logits) at w = 1 is mean_i (sum_k p_ik l_ik - l_iy)
    grad = ((p * logits).sum(1) - logits[torch.arange(2), labels]).mean()
    assert irm_penalty(logits, labels).item() == pytest.approx(grad.item() ** 2, rel=1e-12)


def test_irm_penalty_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = nn.Sequential(nn.Linear(4, 6), nn.Tanh(), nn.Linear(6, 3)).double()
    x = torch.randn(10, 4, dtype=torch.float64)
    y = torch.randint(0, 3, (10,))
    params = list(model.parameters())
    grads = torch.autograd.grad(irm_penalty(model(x), y), params)
    h = 1e-6
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(0, flat.numel(), 3):
            old = flat[i].item()
            flat[i] = old + h
            up = irm_penalty(model(x), y).item()
            flat[i] = old - h
            dn = irm_penalty(model(x), y).item()
            flat[i] = old
            fd = (up - dn) / (2 * h)
            assert abs(gflat[i].item() - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_penalty_vanishes_at_environment_optimum():
    g = torch.Generator().manual_seed(0)
    for env in range(3):
        x = torch.randn(60, 5, generator=g, dtype=torch.float64)
        y = torch.randint(0, 3, (60,), generator=g)
        w = torch.zeros(5, 3, dtype=torch.float64, requires_grad=True)
        b = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        opt = torch.optim.LBFGS([w, b], lr=1, max_iter=500, tolerance_grad=1e-14,
                                tolerance_change=1e-16, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            loss = F.cross_entropy(x @ w + b, y)
            loss.backward()
            return loss

        opt.step(closure)
        assert irm_penalty((x @ w + b).detach(), y).item() <= 1e-8


def test_penalty_weight_warmup():
    cfg = DGConfig(irm_penalty_weight=100.0, irm_warmup_frac=0.1)
    assert penalty_weight_at(0, 100, cfg) == 0.0
    assert penalty_weight_at(5, 100, cfg) == pytest.approx(50.0)
    assert penalty_weight_at(10, 100, cfg) == 100.0
    assert penalty_weight_at(99, 100, cfg) == 100.0


def test_irm_without_penalty_is_summed_risk_erm(domains):
    cfg = DGConfig(epochs=2, batch_size=12, backbone=TINY, irm_penalty_weight=0.0)
    res = irm_finetune("random", domains[:3], domains[3], cfg)
    losses = summed_risk_reference(domains[:3], domains[3], cfg)
    assert len(losses) == len(res.step_losses)
    np.testing.assert_allclose(res.step_losses, losses, rtol=0, atol=1e-7)


def test_environment_sampler_covers_each_environment():
    s = EnvironmentSampler([5, 9], 3, run_seed=1)
    assert s.steps_per_epoch == 3
    seen = [set(), set()]
    for _ in range(s.steps_per_epoch):
        for e, idx in enumerate(s.next()):
            seen[e].update(idx.tolist())
    assert seen[1] == set(range(9))
    assert seen[0] == set(range(5))


def test_sweep_rows_and_average(domains, tmp_path):
    sweep = leave_one_out_sweep(domains, "erm", "random", DGConfig(epochs=1, batch_size=16,
                                                                  backbone=TINY))
    rows = sweep.rows()
    assert [r["target"] for r in rows] == [d.name for d in domains] + ["average"]
    assert abs(rows[-1]["best_target_acc"] - np.mean([r["best_target_acc"] for r in rows[:-1]])) < 1e-12
    write_results(sweep, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as f:
        table = list(csv.DictReader(f))
    assert len(table) == 5
    avg = np.mean([float(r["best_target_acc"]) for r in table[:4]])
    assert abs(float(table[4]["best_target_acc"]) - avg) <= 1e-9
    assert (tmp_path / "r.json").exists()


def test_sweep_is_permutation_invariant(domains):
    cfg = DGConfig(epochs=1, batch_size=16, backbone=TINY)
    a = leave_one_out_sweep(domains, "erm", "random", cfg).by_target()
    b = leave_one_out_sweep(domains[::-1], "erm", "random", cfg).by_target()
    for name in a:
        assert a[name].target_acc == b[name].target_acc


def test_parallel_sweep_matches_serial(domains):
    cfg = DGConfig(epochs=1, batch_size=16, backbone=TINY)
    a = leave_one_out_sweep(domains, "irm", "random", cfg)
    b = leave_one_out_sweep(domains, "irm", "random", cfg, jobs=2)
    assert [r.step_losses for r in a.results] == [r.step_losses for r in b.results]


def test_unknown_method(domains):
    with pytest.raises(ConfigError):
        leave_one_out_sweep(domains, "dro")


def test_config_hash_ignores_seed():
    assert DGConfig(seed=1).hash() == DGConfig(seed=2).hash()
    assert DGConfig(lr=0.1).hash() != DGConfig().hash()
    assert DGConfig.from_dict(DGConfig(backbone=TINY).to_dict()) == DGConfig(backbone=TINY)

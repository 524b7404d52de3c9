import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from geofm.datakit import generate_dataset
from geofm.errors import NonFiniteError
from geofm.model import PretrainModel
from geofm.trainer import (
    Pretrainer, Schedules, clip_gradients, cosine_schedule, ema_update, moving_average, param_groups,
)
from helpers import micro_config


# -- schedules ---------------------------------------------------------------

def test_cosine_examples():
    assert cosine_schedule(0, 100, 2e-4, 1e-6) == 2e-4
    assert cosine_schedule(100, 100, 2e-4, 1e-6) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_schedule(50, 100, 2e-4, 1e-6) == pytest.approx(1.005e-4, abs=1e-16)
    assert cosine_schedule(3, 0, 0.5, 0.1) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10_000), st.floats(0, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_cosine_matches_formula(T, frac, v0, v1):
    t = int(frac * T)
    ref = v1 + (v0 - v1) * (1 + math.cos(math.pi * t / T)) / 2
    assert cosine_schedule(t, T, v0, v1) == pytest.approx(ref, abs=1e-12)


def test_schedules_are_monotone():
    s = Schedules(300)
    rows = [s.at(t) for t in range(301)]
    assert all(a["lr"] >= b["lr"] for a, b in zip(rows, rows[1:]))
    assert all(a["wd"] <= b["wd"] for a, b in zip(rows, rows[1:]))
    assert all(a["momentum"] <= b["momentum"] for a, b in zip(rows, rows[1:]))


# -- EMA ---------------------------------------------------------------------

def _pair(t_val, s_val):
    return {"w": torch.full((3,), s_val)}, {"w": torch.full((3,), t_val)}


@pytest.mark.parametrize("m, expect", [(0.996, 0.996), (1.0, 1.0), (0.0, 0.0)])
def test_ema_examples(m, expect):
    s, t = _pair(1.0, 0.0)
    ema_update(s, t, m)
    assert torch.allclose(t["w"], torch.full((3,), expect))


def test_ema_name_and_shape_checks():
    with pytest.raises(KeyError):
        ema_update({"a": torch.zeros(1)}, {"b": torch.zeros(1)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.5)


# -- clipping -------------------------------------------------------------------

def _params(*grads):
    out = []
    for i, g in enumerate(grads):
        p = torch.nn.Parameter(torch.zeros_like(g))
        p.grad = g.clone()
        out.append((f"p{i}", p))
    return out


def test_clip_halves_norm_six():
    named = _params(torch.tensor([6.0, 0.0]))
    assert clip_gradients(named, 3.0) == pytest.approx(6.0)
    assert torch.allclose(named[0][1].grad, torch.tensor([3.0, 0.0]), atol=1e-6)


def test_clip_leaves_small_norm():
    named = _params(torch.tensor([0.6, 0.8]))
    clip_gradients(named, 3.0)
    assert torch.equal(named[0][1].grad, torch.tensor([0.6, 0.8]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 10))
def test_clip_post_norm(seed, scale):
    g = torch.Generator().manual_seed(seed)
    named = _params(*(torch.randn(4, generator=g, dtype=torch.float64) * scale for _ in range(3)))
    before = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in named))
    clip_gradients(named, 3.0)
    after = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in named))
    assert after == pytest.approx(min(before, 3.0), abs=1e-5)


def test_clip_names_non_finite_parameter():
    named = _params(torch.tensor([1.0]), torch.tensor([float("inf")]))
    with pytest.raises(NonFiniteError, match="p1"):
        clip_gradients(named, 3.0)


# -- training loop -----------------------------------------------------------

@pytest.fixture(scope="module")
def micro_samples():
    return generate_dataset(micro_config().data)


def test_step_moves_teacher_and_reports_metrics(micro_samples):
    trainer = Pretrainer(micro_config(iters=2))
    _, teacher = trainer.model.teacher_visible_parameters()
    before = {k: v.clone() for k, v in teacher.items()}
    text = trainer.model.text.clone()
    rows = trainer.fit(micro_samples, iters=1)
    assert math.isfinite(rows[0]["loss"]) and rows[0]["loss"] > 0
    assert {"mgcl", "ita", "qsacl", "aux", "lr", "wd", "momentum", "grad_norm"} <= rows[0].keys()
    assert any(not torch.equal(before[k], v) for k, v in teacher.items())
    assert torch.equal(trainer.model.text, text)


def test_unit_momentum_freezes_teacher(micro_samples):
    cfg = micro_config(iters=2)
    cfg.train.ema_start = cfg.train.ema_end = 1.0
    trainer = Pretrainer(cfg)
    _, teacher = trainer.model.teacher_visible_parameters()
    before = {k: v.clone() for k, v in teacher.items()}
    trainer.fit(micro_samples, iters=1)
    assert all(torch.equal(before[k], v) for k, v in teacher.items())


def test_identical_seeds_identical_metric_streams(micro_samples):
    a = Pretrainer(micro_config(iters=3)).fit(micro_samples)
    b = Pretrainer(micro_config(iters=3)).fit(micro_samples)
    strip = [{k: v for k, v in r.items() if k != "seconds"} for r in a]
    assert strip == [{k: v for k, v in r.items() if k != "seconds"} for r in b]


def test_optimizer_holds_student_parameters_only():
    model = PretrainModel(micro_config().model)
    groups = param_groups(model)
    held = {id(p) for g in groups for p in g["params"]}
    assert held == {id(p) for p in model.student.parameters()}
    assert not held & {id(p) for p in model.teacher.parameters()}
    assert all(not p.requires_grad for p in model.teacher.parameters())
    names = {id(p): n for n, p in model.student.named_parameters()}
    no_decay = {names[id(p)] for p in groups[1]["params"]}
    assert any("prompts." in n for n in no_decay) and any(".gate." in n for n in no_decay)
    assert all(p.dim() > 1 for p in groups[0]["params"])


def test_metrics_file(tmp_path, micro_samples):
    path = tmp_path / "m.jsonl"
    Pretrainer(micro_config(iters=2)).fit(micro_samples, metrics_path=path)
    import json
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["iter"] for r in rows] == [0, 1]


def test_moving_average():
    assert np.allclose(moving_average(np.arange(25.0), 20), np.arange(6) + 9.5)
    with pytest.raises(ValueError):
        moving_average([1.0, 2.0], 20)

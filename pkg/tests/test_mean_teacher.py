import pytest
import torch

from promptmem.detector import DetectorConfig
from promptmem.errors import StateError
from promptmem.mean_teacher import QUERY_PARAM, MeanTeacher, ema_update
from promptmem.model import build_model
from promptmem.prompt_memory import InjectionPlan

SMALL = DetectorConfig(dim=32, ffn=64, queries=10)


def small_model(seed=0):
    return build_model(SMALL, {"input": 4, "token": 4, "query": 4}, 2, 2, (64, 64), seed)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 0.999, 1.0])
def test_ema_elementwise(alpha):
    torch.manual_seed(0)
    student = small_model(1)
    teacher = MeanTeacher(small_model(2), alpha=alpha)
    old = {k: v.detach().clone() for k, v in teacher.shadow.items()}
    teacher.update(student)
    s = dict(student.named_parameters())
    for name, new in teacher.shadow.items():
        if name == QUERY_PARAM:
            assert torch.equal(new, s[name])
            continue
        expected = alpha * old[name] + (1 - alpha) * s[name].detach()
        assert float((new - expected).abs().max()) < 1e-7, name
    if alpha == 1.0:
        assert all(torch.equal(teacher.shadow[k], old[k]) for k in old if k != QUERY_PARAM)
    if alpha == 0.0:
        assert all(torch.equal(teacher.shadow[k], s[k]) for k in old)
    assert teacher.step == 1


def test_scalar_example():
    shadow = {"w": torch.ones(3)}
    ema_update(shadow, {"w": torch.zeros(3)}, 0.999)
    assert torch.allclose(shadow["w"], torch.full((3,), 0.999), atol=1e-7)


def test_name_and_shape_mismatch():
    with pytest.raises(StateError):
        ema_update({"a": torch.ones(1)}, {"b": torch.ones(1)}, 0.5)
    with pytest.raises(StateError):
        ema_update({"a": torch.ones(1)}, {"a": torch.ones(2)}, 0.5)
    with pytest.raises(StateError):
        MeanTeacher(small_model(), alpha=1.5)


def test_teacher_receives_no_gradient():
    student = small_model()
    teacher = MeanTeacher(student)
    before = {k: v.clone() for k, v in teacher.shadow.items()}
    x = torch.rand(2, 3, 64, 64)
    plan = InjectionPlan(("input", "token", "query"), m=2)
    out = student(x, "target", plan).output
    t_out = teacher.model(x, "target", plan).output
    (out.class_logits.sum() + out.boxes.sum() + t_out.boxes.sum()).backward()
    assert all(p.grad is None for p in teacher.model.parameters())
    assert all(torch.equal(before[k], v) for k, v in teacher.shadow.items())


def test_query_binding_after_student_steps():
    student = small_model()
    teacher = MeanTeacher(student, alpha=0.999)
    opt = torch.optim.SGD(student.parameters(), lr=0.1)
    x = torch.rand(2, 3, 64, 64)
    for _ in range(3):
        loss = student(x).output.boxes.sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        teacher.update(student)
        assert torch.equal(teacher.shadow[QUERY_PARAM], dict(student.named_parameters())[QUERY_PARAM])


def test_sync_object_queries():
    student = small_model(0)
    teacher = MeanTeacher(small_model(1))
    teacher.sync_object_queries(student)
    assert torch.equal(teacher.shadow[QUERY_PARAM], student.detector.query_embed)


def test_pseudo_label_thresholds_are_monotone():
    teacher = MeanTeacher(small_model(3))
    x = torch.rand(3, 3, 64, 64)
    plan = InjectionPlan(("token",), m=2)
    sets = {t: teacher.pseudo_labels(x, t, domain="target", plan=plan) for t in (0.0, 0.25, 0.3, 0.5, 1.0)}
    assert all(len(d) == 0 for d in sets[1.0].detections)
    assert all(len(d) == SMALL.queries for d in sets[0.0].detections)
    keys = sorted(sets)
    for lo, hi in zip(keys, keys[1:]):
        for a, b in zip(sets[lo].detections, sets[hi].detections):
            assert {(d.label, d.score, d.box) for d in b} <= {(d.label, d.score, d.box) for d in a}
            assert all(d.score > hi for d in b) or hi == 0.0

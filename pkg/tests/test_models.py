from pathlib import Path

import numpy as np
import pytest
import torch

from selfdistill import losses as L
from selfdistill.models import (
    ACSpec,
    BlockSequentialModel,
    attach_auxiliary,
    count_parameters,
    default_tap,
    model_registry,
    parameter_partition,
)

GOLDEN = Path(__file__).parent / "data" / "golden_tiny3_seed1234.txt"


@pytest.fixture
def model4():
    torch.manual_seed(0)
    return model_registry("resnet18-style", 100)


def test_resnet18_style_taps_after_second_block(model4):
    assert model4.num_blocks == 4
    assert default_tap("resnet18-style") == 2
    sc = attach_auxiliary(model4, 2)
    shallow, deep, aux = parameter_partition(sc)
    expected = list(model4.stem.parameters()) + list(model4.blocks[0].parameters()) + list(model4.blocks[1].parameters())
    assert [id(p) for p in shallow] == [id(p) for p in expected]
    assert sc.aux.fc.out_features == 100


@pytest.mark.parametrize("tap", [0, 4, -1])
def test_tap_bounds(model4, tap):
    with pytest.raises(ValueError, match="tap must be in"):
        attach_auxiliary(model4, tap)


def test_tiny_model_taps():
    m = model_registry("tiny-resnet-3block", 10)
    assert m.num_blocks == 3
    for tap in (1, 2):
        attach_auxiliary(m, tap)
    with pytest.raises(ValueError):
        attach_auxiliary(m, 3)


def test_unknown_model_lists_registry():
    with pytest.raises(KeyError, match="tiny-resnet-3block"):
        model_registry("resnet-9000", 10)


def test_attachment_is_non_invasive():
    torch.manual_seed(0)
    m = model_registry("tiny-resnet-3block", 10).eval()
    x = torch.randn(4, 3, 32, 32)
    with torch.no_grad():
        before = m(x)
        sc = attach_auxiliary(m, 2).eval()
        after_plain = sc(x)
        after_dual = sc.forward_dual(x).main_logits
    assert torch.equal(before, after_plain)
    assert torch.equal(before, after_dual)


def test_attaching_does_not_change_backbone_init():
    torch.manual_seed(5)
    a = model_registry("tiny-resnet-3block", 10)
    torch.manual_seed(5)
    b = attach_auxiliary(model_registry("tiny-resnet-3block", 10), 2)
    for pa, pb in zip(a.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_dual_forward_identical_rows_and_shapes():
    torch.manual_seed(0)
    sc = attach_auxiliary(model_registry("tiny-resnet-3block", 7), 1).eval()
    x = torch.randn(1, 3, 32, 32).repeat(2, 1, 1, 1)
    with torch.no_grad():
        out = sc.forward_dual(x)
    assert out.main_logits.shape == out.aux_logits.shape == (2, 7)
    assert torch.equal(out.main_logits[0], out.main_logits[1])
    assert torch.equal(out.aux_logits[0], out.aux_logits[1])


def test_dual_forward_rejects_bad_shape():
    sc = attach_auxiliary(model_registry("tiny-resnet-3block", 10), 2)
    with pytest.raises(ValueError, match="expected input"):
        sc.forward_dual(torch.zeros(2, 1, 32, 32))


def test_aux_depends_only_on_shallow_and_ac_params():
    torch.manual_seed(0)
    sc = attach_auxiliary(model_registry("tiny-resnet-3block", 10), 2).eval()
    x = torch.randn(3, 3, 32, 32)
    with torch.no_grad():
        ref = sc.forward_dual(x)
        sc.model.blocks[2][0].conv1.weight.add_(1.0)
        sc.model.head[2].weight.add_(1.0)
        moved = sc.forward_dual(x)
    assert torch.equal(ref.aux_logits, moved.aux_logits)
    assert not torch.equal(ref.main_logits, moved.main_logits)


def test_golden_main_logits():
    torch.manual_seed(1234)
    m = model_registry("tiny-resnet-3block", 10).eval()
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(99))
    with torch.no_grad():
        z = m(x)
    np.testing.assert_allclose(z.numpy(), np.loadtxt(GOLDEN), rtol=0, atol=1e-6)


def test_partition_is_disjoint_and_complete():
    m = model_registry("resnet18-style", 10)
    sc = attach_auxiliary(m, 2)
    shallow, deep, aux = parameter_partition(sc)
    ids = [id(p) for p in shallow + deep + aux]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in sc.parameters()}
    assert count_parameters(shallow) + count_parameters(deep) == count_parameters(m)
    assert not {id(p) for p in aux} & {id(p) for p in m.parameters()}
    assert count_parameters(sc) - count_parameters(m) == count_parameters(sc.aux)


def test_teacher_cross_entropy_gradient_isolated():
    torch.manual_seed(0)
    sc = attach_auxiliary(model_registry("tiny-resnet-3block", 10), 2)
    x = torch.randn(4, 3, 16, 16)
    y = torch.tensor([0, 1, 2, 3])
    out = sc.forward_dual(x)
    L.classification_loss(out.aux_logits, y).backward()
    shallow, deep, aux = parameter_partition(sc)
    for p in deep:
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in shallow)
    assert all(p.grad is not None for p in aux)


def test_shallow_blocks_run_once_per_dual_forward():
    sc = attach_auxiliary(model_registry("tiny-resnet-3block", 10), 2)
    calls = {"stem": 0, "b1": 0, "b2": 0, "b3": 0}
    sc.model.stem.register_forward_hook(lambda *a: calls.__setitem__("stem", calls["stem"] + 1))
    for i, name in enumerate(("b1", "b2", "b3")):
        sc.model.blocks[i].register_forward_hook(lambda *a, n=name: calls.__setitem__(n, calls[n] + 1))
    sc.forward_dual(torch.randn(2, 3, 16, 16))
    assert calls == {"stem": 1, "b1": 1, "b2": 1, "b3": 1}


def test_ac_spec_controls_width():
    m = BlockSequentialModel(5, (8, 16, 32))
    sc = attach_auxiliary(m, 1, ACSpec(channels=12))
    assert sc.aux.fc.in_features == 12
    assert "12ch" in sc.aux.spec.describe()

import math

import numpy as np
import pytest
import torch

from markerfree.discriminator import (
    AnchorConfig,
    DetectorNet,
    DetectorOutput,
    assign_targets,
    perfect_output_from_targets,
    stack_target_maps,
)
from markerfree.generator import TwoBranchGenerator
from markerfree.losses import (
    LossError,
    LossWeights,
    PerceptualExtractor,
    adv_loss,
    det_loss,
    hinge_d_loss,
    hinge_g_loss,
    make_loss_report,
    perceptual_loss,
    rec_loss,
    total_losses,
)
from markerfree.markers import MarkerAnnotation


def fd_check(fn, leaf, k=5, h=1e-4, rtol=1e-3):
    """Central finite differences against autograd at the k largest-
    gradient coordinates of `leaf` (float64)."""
    analytic = torch.autograd.grad(fn(leaf), leaf)[0]
    flat = analytic.abs().flatten()
    top = torch.topk(flat, k=min(k, flat.numel())).indices
    with torch.no_grad():
        for fi in top.tolist():
            idx = np.unravel_index(fi, leaf.shape)
            orig = leaf[idx].item()
            leaf[idx] = orig + h
            plus = fn(leaf).item()
            leaf[idx] = orig - h
            minus = fn(leaf).item()
            leaf[idx] = orig
            fd = (plus - minus) / (2 * h)
            ref = analytic[idx].item()
            assert abs(fd - ref) <= rtol * max(abs(ref), abs(fd), 1e-8)


def test_rec_loss_arithmetic():
    clean = torch.rand(1, 3, 8, 8)
    assert rec_loss(clean, clean, clean).item() == 0.0
    assert rec_loss(clean, clean + 0.1, clean).item() == pytest.approx(0.1, abs=1e-6)
    got = rec_loss(clean, clean + 0.1, clean - 0.05)
    assert got.item() == pytest.approx(0.15, abs=1e-6)


def test_rec_loss_shape_mismatch():
    with pytest.raises(LossError, match="shape"):
        rec_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4), torch.rand(1, 3, 8, 8))


def test_perceptual_identity_arithmetic():
    phi = PerceptualExtractor.identity()
    clean = torch.rand(1, 3, 8, 8)
    assert perceptual_loss(phi, clean, clean, clean).item() == 0.0
    got = perceptual_loss(phi, clean, clean + 0.2, clean)
    assert got.item() == pytest.approx(0.2, abs=1e-6)


def test_perceptual_symmetry_and_zero_at_truth():
    phi = PerceptualExtractor.fixed_random(seed=0)
    clean = torch.rand(1, 3, 16, 16)
    a = torch.rand(1, 3, 16, 16)
    b = torch.rand(1, 3, 16, 16)
    assert perceptual_loss(phi, clean, clean, clean).item() == 0.0
    ab = perceptual_loss(phi, clean, a, b).item()
    ba = perceptual_loss(phi, clean, b, a).item()
    assert ab == pytest.approx(ba, rel=1e-6)
    assert ab > 0


def test_perceptual_parameters_frozen():
    for phi in (PerceptualExtractor.fixed_random(seed=1), PerceptualExtractor.identity()):
        assert all(not p.requires_grad for p in phi.parameters())


def test_perceptual_create_names():
    assert PerceptualExtractor.create("identity") is not None
    assert PerceptualExtractor.create("random", seed=3) is not None
    with pytest.raises(LossError, match="unknown"):
        PerceptualExtractor.create("resnet")
    # auto must not raise even when pre-trained weights cannot be fetched
    assert PerceptualExtractor.create("auto", seed=3) is not None


def constant_p_output(p_obj, p_cls, shape=(1, 2, 2, 1)):
    cls = torch.zeros(*shape, 3)
    cls[..., 0] = p_obj
    cls[..., 1] = p_cls
    loc = torch.zeros(*shape, 4)
    return DetectorOutput(cls_maps=(cls,), loc_maps=(loc,))


def test_adv_loss_arithmetic():
    zero = constant_p_output(0.0, 0.0)
    assert adv_loss(zero, zero).item() == 0.0
    half = constant_p_output(0.5, 1.0)
    assert adv_loss(half, half).item() == pytest.approx(-math.log(0.5), rel=1e-6)


def test_adv_loss_clamped_at_saturation():
    sat = constant_p_output(1.0, 1.0)
    v = adv_loss(sat, sat).item()
    assert math.isfinite(v)
    # float32 rounding of the clamp moves the value slightly off -log(1e-6)
    assert v == pytest.approx(-math.log(1e-6), rel=2e-3)


def test_adv_loss_monotone_in_single_p():
    base = constant_p_output(0.3, 1.0)
    bumped = constant_p_output(0.3, 1.0)
    bumped.cls_maps[0][0, 1, 1, 0, 0] = 0.6
    assert adv_loss(bumped, base).item() > adv_loss(base, base).item()


ONE_CELL = AnchorConfig(scales=(8,), anchors_per_scale=(((8, 8),),))


def one_cell_targets(with_box):
    boxes = (
        [MarkerAnnotation(bbox=(0, 0, 8, 8), class_label="marker")] if with_box else []
    )
    return stack_target_maps([assign_targets(boxes, ONE_CELL, (8, 8))])


def test_det_loss_perfect_negative():
    tm = one_cell_targets(False)
    out = perfect_output_from_targets(assign_targets([], ONE_CELL, (8, 8)), ONE_CELL)
    det_cls, det_loc = det_loss({"clean": out}, {"clean": tm})
    assert det_cls.item() == 0.0
    assert det_loc.item() == 0.0


def test_det_loss_single_positive_objectness():
    tm = one_cell_targets(True)
    cls = torch.zeros(1, 1, 1, 1, 3)
    cls[..., 0] = 0.5  # objectness under test
    cls[..., 1] = 1.0  # exact class prediction, contributes zero BCE
    loc = tm.box_targets[0].clone()  # exact boxes, zero smooth-L1
    out = DetectorOutput(cls_maps=(cls,), loc_maps=(loc,))
    det_cls, det_loc = det_loss({"corrupted": out}, {"corrupted": tm})
    assert det_cls.item() == pytest.approx(-math.log(0.5), rel=1e-5)
    assert det_loc.item() == pytest.approx(0.0, abs=1e-7)


def test_det_loss_roles_sum():
    tm = one_cell_targets(True)
    cls = torch.full((1, 1, 1, 1, 3), 0.4)
    loc = torch.zeros(1, 1, 1, 1, 4)
    out = DetectorOutput(cls_maps=(cls,), loc_maps=(loc,))
    c1, l1 = det_loss({"a": out}, {"a": tm})
    c2, l2 = det_loss({"a": out, "b": out}, {"a": tm, "b": tm})
    assert c2.item() == pytest.approx(2 * c1.item(), rel=1e-6)
    assert l2.item() == pytest.approx(2 * l1.item(), rel=1e-6)


def test_det_loss_role_mismatch():
    tm = one_cell_targets(False)
    out = perfect_output_from_targets(assign_targets([], ONE_CELL, (8, 8)), ONE_CELL)
    with pytest.raises(LossError, match="role"):
        det_loss({"a": out}, {"b": tm})


def test_hinge_losses_hand_arithmetic():
    real = torch.tensor([[0.5, 2.0], [-1.0, 1.0]])
    fake = torch.tensor([[0.0, -2.0], [0.5, 3.0]])
    assert hinge_d_loss(real, fake).item() == pytest.approx(2.25, rel=1e-6)
    assert hinge_g_loss(fake).item() == pytest.approx(-0.375, rel=1e-6)


def test_total_losses_arithmetic():
    tg, td = total_losses(1.0, 1.0, 1.0, 0.3, 0.2)
    assert tg == pytest.approx(11.1, rel=1e-9)
    assert td == pytest.approx(0.5, rel=1e-9)
    tg0, td0 = total_losses(0.0, 0.0, 0.0, 0.0, 0.0)
    assert tg0 == 0.0 and td0 == 0.0


def test_total_losses_rejects_non_finite():
    with pytest.raises(LossError, match="non-finite"):
        total_losses(float("nan"), 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(LossError, match="non-finite"):
        total_losses(0.0, 0.0, 0.0, float("inf"), 0.0)


def test_loss_weights_validation():
    w = LossWeights()
    assert (w.lambda_rec, w.lambda_per, w.lambda_adv) == (10.0, 1.0, 0.1)
    with pytest.raises(LossError, match="nonnegative"):
        LossWeights(lambda_rec=-1.0)


def test_make_loss_report_fields():
    r = make_loss_report(0.5, 0.2, 0.1, 0.3, 0.4)
    assert r.total_gen == pytest.approx(10 * 0.5 + 0.2 + 0.1 * 0.1)
    assert r.total_disc == pytest.approx(0.7)
    assert set(r.as_dict()) == {
        "rec", "per", "adv", "det_cls", "det_loc", "total_gen", "total_disc",
    }


def test_rec_loss_gradient_fd():
    torch.manual_seed(0)
    clean = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    # keep |clean - inpainted| well away from the L1 kink
    offset = 0.1 + 0.2 * torch.rand_like(clean)
    inpainted = (clean + offset).detach().requires_grad_(True)
    composed = clean - 0.15
    fd_check(lambda x: rec_loss(clean, x, composed), inpainted)


def test_perceptual_loss_gradient_fd():
    torch.manual_seed(1)
    phi = PerceptualExtractor.fixed_random(seed=2).double()
    clean = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    inpainted = torch.rand(1, 3, 16, 16, dtype=torch.float64).requires_grad_(True)
    composed = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    fd_check(lambda x: perceptual_loss(phi, clean, x, composed), inpainted)


def test_adv_loss_gradient_fd():
    torch.manual_seed(2)
    cls = (0.1 + 0.7 * torch.rand(1, 2, 2, 2, 3, dtype=torch.float64)).requires_grad_(
        True
    )
    loc = torch.zeros(1, 2, 2, 2, 4, dtype=torch.float64)
    other = DetectorOutput(
        cls_maps=(0.2 + 0.5 * torch.rand(1, 2, 2, 2, 3, dtype=torch.float64),),
        loc_maps=(loc,),
    )

    def fn(x):
        return adv_loss(DetectorOutput(cls_maps=(x,), loc_maps=(loc,)), other)

    fd_check(fn, cls)


def test_det_loss_gradient_fd():
    config = AnchorConfig(scales=(4,), anchors_per_scale=(((4, 4), (8, 8)),))
    boxes = [MarkerAnnotation(bbox=(2, 2, 6, 6), class_label="marker")]
    tm = stack_target_maps([assign_targets(boxes, config, (16, 16))])
    torch.manual_seed(3)
    cls = (0.1 + 0.8 * torch.rand(1, 4, 4, 2, 3, dtype=torch.float64)).requires_grad_(
        True
    )
    loc_pred = (0.3 * torch.randn(1, 4, 4, 2, 4, dtype=torch.float64)).requires_grad_(
        True
    )

    def cls_fn(x):
        out = DetectorOutput(cls_maps=(x,), loc_maps=(loc_pred.detach(),))
        return det_loss({"r": out}, {"r": tm})[0]

    def loc_fn(x):
        out = DetectorOutput(cls_maps=(cls.detach(),), loc_maps=(x,))
        return det_loss({"r": out}, {"r": tm})[1]

    fd_check(cls_fn, cls)
    fd_check(loc_fn, loc_pred)


def test_gradient_isolation_detached_outputs():
    # det_loss on detached reconstructions must leave the generator
    # untouched; generator losses never see detector parameters.
    gen = TwoBranchGenerator(base_channels=8, seed=0)
    det = DetectorNet(
        config=AnchorConfig(
            scales=(4,), anchors_per_scale=(((8, 8), (16, 16), (24, 24)),)
        ),
        backbone=((8, 2), (16, 2)),
        seed=1,
    )
    image = torch.rand(1, 3, 16, 16)
    out = gen(image)
    tm = stack_target_maps(
        [
            assign_targets(
                [MarkerAnnotation(bbox=(4, 4, 8, 8), class_label="fake_marker")],
                det.config,
                (16, 16),
            )
        ]
    )
    det_cls, det_loc = det_loss(
        {"inpainted": det(out.inpainted.detach())}, {"inpainted": tm}
    )
    (det_cls + det_loc).backward()
    assert all(p.grad is None for p in gen.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in det.parameters())

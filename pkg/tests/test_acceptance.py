"""Acceptance suite for the marker-removal stack.

Seven gating properties, one test each, each recording a single
pass/fail line (printed inline and repeated in the terminal summary):

1. composition identity and hard mask overrides, bitwise
2. loss gradients vs central finite differences, zero at truth
3. detector target assignment vs a brute-force oracle; decode(encode)
4. PSNR/MSE closed forms, SSIM vs a double-loop reference, masked==full
5. smoke training beats the corrupted input by >= 3 dB with a separated mask
6. two-branch + detector >= single-branch at the same budget (soft, logged)
7. bit-identical end-to-end reruns and checkpoint round-trips

Criteria 5 and 6 train for real (several minutes each on one CPU).
"""

import functools
import json
import math
import time

import numpy as np
import pytest
import torch
from acceptance_report import record
from oracles import naive_ssim, oracle_assign

from markerfree import cli
from markerfree.data import (
    derive_sample_seed,
    load_image,
    load_sample,
    save_image,
    scan_dataset,
    write_boxes_jsonl,
)
from markerfree.discriminator import (
    CLASS_TO_INDEX,
    AnchorConfig,
    DetectorOutput,
    assign_targets,
    box_iou,
    decode_detections,
    perfect_output_from_targets,
    stack_target_maps,
)
from markerfree.generator import TwoBranchGenerator
from markerfree.losses import (
    LossWeights,
    PerceptualExtractor,
    adv_loss,
    det_loss,
    perceptual_loss,
    rec_loss,
)
from markerfree.markers import MarkerAnnotation, MarkerPolicy, sample_marker_specs, stamp_markers
from markerfree.metrics import full_metrics, masked_metrics, mse, psnr, ssim
from markerfree.tensors import batch_to_tensor, tensor_to_image
from markerfree.trainer import (
    TrainConfig,
    load_checkpoint,
    reconstruct_fn,
    save_checkpoint,
    train,
)


def criterion(num, name, runtime_limit=None):
    """Record one line per criterion; a failed assertion still records."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            started = time.monotonic()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as e:
                msg = str(e).splitlines()[0] if str(e) else type(e).__name__
                record(num, name, False, msg)
                raise
            elapsed = time.monotonic() - started
            detail = f"{detail}, {elapsed:.1f}s" if detail else f"{elapsed:.1f}s"
            record(num, name, True, detail)
            if runtime_limit is not None:
                assert elapsed < runtime_limit
        return wrapper

    return deco


# --------------------------------------------------------------------------
# 1. composition identity
# --------------------------------------------------------------------------

@criterion(1, "composition identity", runtime_limit=10.0)
def test_criterion_1_composition_identity():
    gen = TwoBranchGenerator(base_channels=8, seed=0)
    with torch.no_grad():
        for seed in range(100):
            g = torch.Generator().manual_seed(seed)
            x = torch.rand(1, 3, 16, 16, generator=g)
            out = gen(x)
            recomposed = out.mask * out.inpainted + (1.0 - out.mask) * x
            assert torch.equal(recomposed, out.composed)
            zeros = gen(x, torch.zeros_like(x[:, :1]))
            assert torch.equal(zeros.composed, x)
            ones = gen(x, torch.ones_like(x[:, :1]))
            assert torch.equal(ones.composed, ones.inpainted)
    return "100 inputs recomposed bitwise, hard 0/1 overrides bitwise"


# --------------------------------------------------------------------------
# 2. loss gradients
# --------------------------------------------------------------------------

def fd_matches(fn, leaf, k=5, h=1e-4, rtol=1e-3):
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


@criterion(2, "loss gradients", runtime_limit=60.0)
def test_criterion_2_loss_gradients():
    torch.manual_seed(0)
    clean = (0.25 + 0.5 * torch.rand(1, 3, 8, 8, dtype=torch.float64))

    # zero at truth, exactly
    assert rec_loss(clean, clean, clean).item() == 0.0
    phi = PerceptualExtractor.fixed_random(seed=1).double()
    assert perceptual_loss(phi, clean, clean, clean).item() == 0.0

    # reconstruction: offsets bounded away from the L1 kink
    offset = 0.1 + 0.2 * torch.rand_like(clean)
    inpainted = (clean + offset).detach().requires_grad_(True)
    fd_matches(lambda x: rec_loss(clean, x, clean - 0.15), inpainted)

    # perceptual
    inp2 = torch.rand(1, 3, 8, 8, dtype=torch.float64).requires_grad_(True)
    fd_matches(lambda x: perceptual_loss(phi, clean, x, clean - 0.1), inp2)

    # adversarial: detection maps strictly inside (0, 1)
    cls = (0.1 + 0.7 * torch.rand(1, 2, 2, 2, 3, dtype=torch.float64))
    cls = cls.detach().requires_grad_(True)
    loc = torch.zeros(1, 2, 2, 2, 4, dtype=torch.float64)
    other = DetectorOutput(
        cls_maps=(0.2 + 0.5 * torch.rand(1, 2, 2, 2, 3, dtype=torch.float64),),
        loc_maps=(loc,),
    )
    fd_matches(
        lambda x: adv_loss(DetectorOutput(cls_maps=(x,), loc_maps=(loc,)), other),
        cls,
    )

    # detector: BCE away from 0/1, smooth-L1 away from |diff|=1
    config = AnchorConfig(scales=(4,), anchors_per_scale=(((4, 4), (8, 8)),))
    boxes = [MarkerAnnotation(bbox=(1, 2, 5, 4), class_label="marker")]
    tm = stack_target_maps([assign_targets(boxes, config, (8, 8))])
    dcls = (0.1 + 0.8 * torch.rand(1, 2, 2, 2, 3, dtype=torch.float64))
    dcls = dcls.detach().requires_grad_(True)
    dloc = (0.3 * torch.randn(1, 2, 2, 2, 4, dtype=torch.float64))
    dloc = dloc.detach().requires_grad_(True)
    fd_matches(
        lambda x: det_loss(
            {"r": DetectorOutput(cls_maps=(x,), loc_maps=(dloc.detach(),))},
            {"r": tm},
        )[0],
        dcls,
    )
    fd_matches(
        lambda x: det_loss(
            {"r": DetectorOutput(cls_maps=(dcls.detach(),), loc_maps=(x,))},
            {"r": tm},
        )[1],
        dloc,
    )
    return "rec/per/adv/det match FD at rtol 1e-3, rec/per zero at truth"


# --------------------------------------------------------------------------
# 3. detector assignment oracle
# --------------------------------------------------------------------------

ACC_CONFIG = AnchorConfig(
    scales=(4, 8),
    anchors_per_scale=(((4, 4), (6, 8), (10, 6)), ((12, 12), (16, 10), (20, 20))),
)


def assert_matches_oracle(boxes, config, image_size):
    ann = [MarkerAnnotation(bbox=b, class_label=c) for b, c in boxes]
    got = assign_targets(ann, config, image_size)
    want = oracle_assign(boxes, config, image_size)
    for si in range(len(config.scales)):
        obj = got.objectness[si].numpy()
        cls = got.class_index[si].numpy()
        loc = got.box_targets[si].numpy()
        ign = got.ignore[si].numpy()
        gh, gw, a = obj.shape
        for gi in range(gh):
            for gj in range(gw):
                for ai in range(a):
                    entry = want[si].get((gi, gj, ai))
                    if entry is None:
                        assert obj[gi, gj, ai] == 0 and not ign[gi, gj, ai]
                        assert cls[gi, gj, ai] == -1
                    elif entry[0] == "ign":
                        assert obj[gi, gj, ai] == 0 and ign[gi, gj, ai]
                    else:
                        assert obj[gi, gj, ai] == 1 and not ign[gi, gj, ai]
                        assert cls[gi, gj, ai] == CLASS_TO_INDEX[entry[1]]
                        np.testing.assert_allclose(loc[gi, gj, ai], entry[2], atol=1e-6)


@criterion(3, "detector assignment", runtime_limit=60.0)
def test_criterion_3_assignment_oracle():
    h = w = 32  # 8x8 cells at stride 4, 4x4 at stride 8
    rng = np.random.default_rng(0)
    for _ in range(200):
        boxes = []
        for _ in range(int(rng.integers(0, 4))):
            bw = int(rng.integers(2, 20))
            bh = int(rng.integers(2, 20))
            bx = int(rng.integers(0, w - bw + 1))
            by = int(rng.integers(0, h - bh + 1))
            cls = ("marker", "fake_marker")[int(rng.integers(0, 2))]
            boxes.append(((bx, by, bw, bh), cls))
        assert_matches_oracle(boxes, ACC_CONFIG, (h, w))

    # decode(perfect grids from encode) recovers each ground-truth box
    recovered = 0
    for trial in range(20):
        trng = np.random.default_rng(100 + trial)
        boxes = []
        cells = set()
        while len(boxes) < int(trng.integers(1, 4)):
            bw = int(trng.integers(4, 18))
            bh = int(trng.integers(4, 18))
            bx = int(trng.integers(0, w - bw))
            by = int(trng.integers(0, h - bh))
            cell = ((by + bh / 2) // 4, (bx + bw / 2) // 4)
            if cell in cells:
                continue
            if any(box_iou((bx, by, bw, bh), b) > 0.3 for b in boxes):
                continue
            cells.add(cell)
            boxes.append((bx, by, bw, bh))
        ann = [MarkerAnnotation(bbox=b, class_label="marker") for b in boxes]
        tm = assign_targets(ann, ACC_CONFIG, (h, w))
        out = perfect_output_from_targets(tm, ACC_CONFIG)
        dets = decode_detections(out, ACC_CONFIG, conf_threshold=0.5, nms_iou=0.9)
        for box in boxes:
            best = max(box_iou(d.bbox, box) for d in dets)
            assert best >= 0.95
            recovered += 1
    return f"200 trials match the brute-force oracle, {recovered} boxes re-decoded at IoU >= 0.95"


# --------------------------------------------------------------------------
# 4. metric oracles
# --------------------------------------------------------------------------

@criterion(4, "metric oracles")
def test_criterion_4_metric_oracles():
    # closed forms on constructed pairs
    a = np.zeros((16, 16, 3), dtype=np.float64)
    b = a + 16.0 / 255.0
    assert abs(mse(a, b) - 256.0) < 1e-9
    assert abs(psnr(a, b) - 10.0 * math.log10(255.0**2 / 256.0)) < 1e-9
    assert abs(psnr(a, b) - 24.048) < 1e-3
    c = a + 51.0 / 255.0
    assert abs(mse(a, c) - 2601.0) < 1e-9
    assert abs(psnr(a, c) - 10.0 * math.log10(255.0**2 / 2601.0)) < 1e-9
    half = a.copy()
    half[:8] += 10.0 / 255.0
    half[8:] += 20.0 / 255.0
    assert abs(mse(a, half) - 250.0) < 1e-9

    # SSIM vs the double-loop reference
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        shape = (32, 32, 3) if trial % 4 == 0 else (32, 32)
        x = rng.random(shape)
        y = np.clip(x + 0.2 * rng.standard_normal(shape), 0.0, 1.0)
        worst = max(worst, abs(ssim(x, y) - naive_ssim(x, y)))
        assert worst <= 1e-6

    # a full-image box reduces masked metrics to the full ones exactly
    x = rng.random((24, 24, 3))
    y = np.clip(x + 0.1 * rng.standard_normal((24, 24, 3)), 0.0, 1.0)
    full = full_metrics(x, y)
    boxed = masked_metrics(x, y, [MarkerAnnotation(bbox=(0, 0, 24, 24))])
    assert boxed.mse == full.mse
    assert boxed.psnr_db == full.psnr_db
    assert boxed.ssim == full.ssim
    return f"closed forms at 1e-9, SSIM max |diff| {worst:.2e}, masked==full exact"


# --------------------------------------------------------------------------
# 5 & 6. smoke training
# --------------------------------------------------------------------------

SMOKE_POLICY = MarkerPolicy(
    count_range=(2, 4),
    size_range=(6, 10),
    thickness_range=(2, 3),
    intensity_mode="fixed_white",
    rng_seed=0,
)


def make_smoke_corpus(root):
    """16 smooth seeded 64x64 textures with stamped markers, paired layout."""
    clean = root / "train" / "clean"
    clean.mkdir(parents=True)
    yy, xx = np.mgrid[0:64, 0:64]
    for i in range(16):
        fx, fy = 6 + (i % 4) * 3, 8 + (i % 3) * 3
        base = 0.40 + 0.18 * np.sin(2 * np.pi * xx / fx + 0.7 * i) * np.cos(
            2 * np.pi * yy / fy
        )
        ry, rx = 20 + (i * 7) % 24, 16 + (i * 11) % 32
        base = base + 0.12 * np.exp(
            -(((yy - ry) / 18.0) ** 2 + ((xx - rx) / 18.0) ** 2)
        )
        img = np.stack([base, base * 0.95, base * 0.9], axis=2)
        save_image(clean / f"img_{i:03d}.png", np.clip(img, 0.05, 0.8))

    (root / "train" / "corrupted").mkdir()
    (root / "train" / "mask").mkdir()
    records = []
    index = scan_dataset(root, "clean_only", "train")
    for i, entry in enumerate(index.entries):
        image = load_image(entry.clean_path)
        specs = sample_marker_specs(
            SMOKE_POLICY, image.shape[:2], derive_sample_seed(0, i)
        )
        corrupted, mask, boxes = stamp_markers(image, specs)
        save_image(root / "train" / "corrupted" / entry.clean_path.name, corrupted)
        save_image(root / "train" / "mask" / entry.clean_path.name,
                   mask.astype(np.float64))
        records.append(
            {
                "file": entry.clean_path.name,
                "boxes": [list(b.bbox) for b in boxes],
                "classes": [b.class_label for b in boxes],
            }
        )
    write_boxes_jsonl(root / "train" / "boxes.jsonl", records)
    return scan_dataset(root, "paired", "train", image_size=(64, 64))


def smoke_config(**overrides):
    base = dict(
        weights=LossWeights(10.0, 1.0, 0.1),
        batch_size=4,
        learning_rate=1e-4,
        max_steps=2000,
        seed=0,
        image_size=(64, 64),
        policy=SMOKE_POLICY,
        base_channels=16,
        perceptual="random",
        augment=False,
    )
    base.update(overrides)
    return TrainConfig(**base)


def smoke_scores(state, index):
    """Mean PSNR of composed output and corrupted baseline; pooled mask split."""
    fn = reconstruct_fn(state)
    model, base, inside, outside = [], [], [], []
    for i in range(len(index)):
        sample = load_sample(index, i)
        model.append(psnr(fn(sample), sample.clean))
        base.append(psnr(sample.corrupted, sample.clean))
        with torch.no_grad():
            out = state.generator(batch_to_tensor(sample.corrupted[None]))
        mask = tensor_to_image(out.mask)
        inside.append(mask[sample.mask == 1])
        outside.append(mask[sample.mask == 0])
    separation = float(
        np.concatenate(inside).mean() - np.concatenate(outside).mean()
    )
    return float(np.mean(model)), float(np.mean(base)), separation


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke_corpus")
    return make_smoke_corpus(root)


@pytest.fixture(scope="session")
def smoke_model_a(smoke_corpus, tmp_path_factory):
    run = tmp_path_factory.mktemp("smoke_a")
    started = time.monotonic()
    result = train(smoke_config(), smoke_corpus, run_dir=run)
    elapsed = time.monotonic() - started
    return result.state, elapsed


@criterion(5, "smoke training")
def test_criterion_5_smoke_training(smoke_corpus, smoke_model_a):
    state, train_seconds = smoke_model_a
    model_db, base_db, separation = smoke_scores(state, smoke_corpus)
    gain = model_db - base_db
    detail = (
        f"PSNR {model_db:.2f} vs corrupted {base_db:.2f} dB (gain {gain:+.2f}, "
        f"need >= 3), mask split {separation:+.3f} (need >= 0.2), "
        f"trained {train_seconds:.0f}s"
    )
    assert gain >= 3.0, detail
    assert separation >= 0.2, detail
    assert train_seconds <= 900.0, detail
    return detail


def test_criterion_6_ablation_ordering(smoke_corpus, smoke_model_a, tmp_path):
    state_a, _ = smoke_model_a
    model_a, _, _ = smoke_scores(state_a, smoke_corpus)
    result_c = train(
        smoke_config(branches=1), smoke_corpus, run_dir=tmp_path / "ablation_c"
    )
    model_c, _, _ = smoke_scores(result_c.state, smoke_corpus)
    ok = model_a >= model_c
    record(
        6,
        "ablation ordering",
        ok,
        f"two-branch {model_a:.2f} dB vs single-branch {model_c:.2f} dB "
        "(soft criterion: adversarial variance at this scale, logged only)",
        soft=True,
    )
    # soft: the ordering is reported, never gates the suite


# --------------------------------------------------------------------------
# 7. determinism & persistence
# --------------------------------------------------------------------------

def seeded_end_to_end(workdir):
    """synth -> 50-step train -> eval, all through the CLI."""
    root = workdir / "corpus"
    clean = root / "train" / "clean"
    clean.mkdir(parents=True)
    yy, xx = np.mgrid[0:32, 0:32]
    for i in range(8):
        base = 0.45 + 0.25 * np.sin(xx / (2.0 + i)) * np.cos(yy / (3.0 + i % 3))
        save_image(clean / f"img_{i:03d}.png",
                   np.clip(np.repeat(base[:, :, None], 3, axis=2), 0.05, 0.9))
    common = ["--data-root", str(root), "--size-min", "3", "--size-max", "6",
              "--seed", "11"]
    assert cli.main(["synth", *common]) == 0
    run = workdir / "run"
    assert cli.main([
        "train", *common, "--layout", "paired", "--image-h", "32", "--image-w", "32",
        "--max-steps", "50", "--batch-size", "4", "--base-channels", "8",
        "--perceptual", "random", "--no-augment", "--run-dir", str(run),
    ]) == 0
    out = workdir / "eval"
    assert cli.main([
        "eval", *common, "--layout", "paired", "--image-h", "32", "--image-w", "32",
        "--checkpoint", str(run / "checkpoints" / "final.ckpt"),
        "--out-dir", str(out),
    ]) == 0
    return run, out


def loss_trace(run_dir):
    lines = []
    for raw in (run_dir / "log.jsonl").read_text().splitlines():
        entry = json.loads(raw)
        entry.pop("wall_ms")
        lines.append(entry)
    return lines


@criterion(7, "determinism and persistence")
def test_criterion_7_determinism(tmp_path):
    run1, eval1 = seeded_end_to_end(tmp_path / "first")
    run2, eval2 = seeded_end_to_end(tmp_path / "second")

    trace1, trace2 = loss_trace(run1), loss_trace(run2)
    assert len(trace1) == 50
    assert trace1 == trace2
    assert (eval1 / "summary.json").read_bytes() == (eval2 / "summary.json").read_bytes()
    assert (eval1 / "per_image.csv").read_bytes() == (eval2 / "per_image.csv").read_bytes()
    ckpt1 = run1 / "checkpoints" / "final.ckpt"
    assert ckpt1.read_bytes() == (run2 / "checkpoints" / "final.ckpt").read_bytes()

    # save/load round-trip: bitwise-identical forwards
    state = load_checkpoint(ckpt1)
    resaved = save_checkpoint(state, tmp_path / "roundtrip.ckpt")
    reloaded = load_checkpoint(resaved)
    g = torch.Generator().manual_seed(99)
    x = torch.rand(2, 3, 32, 32, generator=g)
    with torch.no_grad():
        a = state.generator(x)
        b = reloaded.generator(x)
    assert torch.equal(a.inpainted, b.inpainted)
    assert torch.equal(a.mask, b.mask)
    assert torch.equal(a.composed, b.composed)
    return "reruns bit-identical (trace, summary, csv, ckpt), round-trip forwards bitwise"

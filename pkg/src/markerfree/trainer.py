"""Alternating generator/discriminator optimization with deterministic
data order, versioned single-file checkpoints, JSONL step logs, and
snapshot grids.

Determinism contract: the batch served at step t is a pure function of
(config.seed, dataset, t), so resuming from a checkpoint needs only the
step counter. Checkpoints use a custom binary container because the
serialized bytes must round-trip exactly (save -> load -> save equality).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Batch, DatasetIndex, epoch_order, load_sample
from .discriminator import (
    AnchorConfig,
    DetectorNet,
    PatchDiscriminator,
    annotations_as_class,
    assign_targets,
    stack_target_maps,
)
from .generator import DOWNSAMPLE_FACTOR, TwoBranchGenerator
from .losses import (
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
)
from .markers import MarkerPolicy
from .tensors import batch_to_tensor, tensor_to_image

CHECKPOINT_MAGIC = b"MFCKPT01"
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_DTYPE_TO_NAME = {torch.float32: "f4", torch.float64: "f8", torch.int64: "i8"}
_NAME_TO_DTYPE = {v: k for k, v in _DTYPE_TO_NAME.items()}
_NAME_TO_NUMPY = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


class TrainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 4
    learning_rate: float = 1e-4
    max_steps: int = 1000
    seed: int = 0
    image_size: tuple = (64, 64)
    policy: MarkerPolicy = field(default_factory=MarkerPolicy)
    disc: str = "detector"  # "detector" | "patch" (ablation B)
    branches: int = 2  # 1 = single-branch ablation C
    base_channels: int = 32
    perceptual: str = "random"  # "vgg16" | "random" | "identity" | "auto"
    augment: bool = True  # stamp pseudo markers onto paired corrupted inputs
    shuffle: bool = True
    snapshot_every: int = 0  # steps between snapshot grids, 0 disables
    checkpoint_every: int = 0  # steps between periodic checkpoints, 0 disables

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")
        # learning_rate 0 is allowed as a frozen debug mode
        if self.learning_rate < 0:
            raise TrainerError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.max_steps < 0:
            raise TrainerError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.branches not in (1, 2):
            raise TrainerError(f"branches must be 1 or 2, got {self.branches}")
        if self.disc not in ("detector", "patch"):
            raise TrainerError(f"disc must be 'detector' or 'patch', got {self.disc!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        policy = dict(d["policy"])
        for k in ("count_range", "size_range", "thickness_range"):
            policy[k] = tuple(policy[k])
        d["policy"] = MarkerPolicy(**policy)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


# Run-control knobs may legitimately change across a resume; everything
# that shapes the model, data order, or optimization is identity.
_RUN_CONTROL_FIELDS = ("max_steps", "snapshot_every", "checkpoint_every")


def config_hash(config: TrainConfig) -> str:
    d = config.to_dict()
    for k in _RUN_CONTROL_FIELDS:
        d.pop(k)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    generator: TwoBranchGenerator
    discriminator: torch.nn.Module
    gen_opt: torch.optim.Adam
    disc_opt: torch.optim.Adam
    perceptual: PerceptualExtractor
    perceptual_resolved: str
    anchor_config: AnchorConfig
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    anchor_config = AnchorConfig()
    h, w = config.image_size
    for d in (DOWNSAMPLE_FACTOR, anchor_config.max_stride):
        if h % d or w % d:
            raise TrainerError(f"image size {h}x{w} must be divisible by {d}")

    generator = TwoBranchGenerator(
        base_channels=config.base_channels,
        branches=config.branches,
        seed=config.seed,
    )
    if config.disc == "detector":
        discriminator = DetectorNet(config=anchor_config, seed=config.seed + 1)
    else:
        discriminator = PatchDiscriminator(seed=config.seed + 1)

    name = config.perceptual
    if name == "auto":
        extractor = PerceptualExtractor.create("auto", seed=config.seed + 2)
        name = "vgg16" if len(extractor.stages[0]) > 2 else "random"
    else:
        extractor = PerceptualExtractor.create(name, seed=config.seed + 2)

    gen_opt = torch.optim.Adam(
        generator.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    disc_opt = torch.optim.Adam(
        discriminator.parameters(),
        lr=config.learning_rate,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )
    return TrainState(
        config=config,
        generator=generator,
        discriminator=discriminator,
        gen_opt=gen_opt,
        disc_opt=disc_opt,
        perceptual=extractor,
        perceptual_resolved=name,
        anchor_config=anchor_config,
        step=0,
    )


def _epoch_seeds(seed: int, epoch: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, epoch])
    shuffle_seed, sample_seed = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return shuffle_seed, sample_seed


def num_batches_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def fetch_batch(index: DatasetIndex, config: TrainConfig, step: int) -> Batch:
    """Deterministic batch for a given global step (random access, so a
    resumed run replays the identical schedule)."""
    n = len(index)
    if n == 0:
        raise TrainerError("dataset is empty")
    per_epoch = num_batches_per_epoch(n, config.batch_size)
    epoch = step // per_epoch
    b = step % per_epoch
    shuffle_seed, sample_seed = _epoch_seeds(config.seed, epoch)
    order = epoch_order(n, shuffle_seed if config.shuffle else None)
    chunk = order[b * config.batch_size : (b + 1) * config.batch_size]
    samples = [
        load_sample(
            index,
            i,
            policy=config.policy,
            epoch_seed=sample_seed,
            augment=config.augment,
        )
        for i in chunk
    ]
    return Batch(
        clean=np.stack([s.clean for s in samples]),
        corrupted=np.stack([s.corrupted for s in samples]),
        mask=np.stack([s.mask for s in samples]),
        boxes=[s.boxes for s in samples],
        indices=chunk,
    )


def _check_finite(step, **parts):
    bad = {k: v.detach().item() for k, v in parts.items() if not torch.isfinite(v)}
    if bad:
        raise TrainerError(f"non-finite loss at step {step}: {bad}")


def _detector_losses(state: TrainState, batch: Batch, gen_out):
    cfg = state.anchor_config
    size = state.config.image_size
    roles_out = {
        "corrupted": state.discriminator(batch_to_tensor(batch.corrupted)),
        "clean": state.discriminator(batch_to_tensor(batch.clean)),
        "inpainted": state.discriminator(gen_out.inpainted.detach()),
        "composed": state.discriminator(gen_out.composed.detach()),
    }
    roles_tgt = {
        "corrupted": stack_target_maps(
            [assign_targets(b, cfg, size) for b in batch.boxes]
        ),
        "clean": stack_target_maps(
            [assign_targets([], cfg, size) for _ in batch.boxes]
        ),
    }
    fake = stack_target_maps(
        [
            assign_targets(annotations_as_class(b, "fake_marker"), cfg, size)
            for b in batch.boxes
        ]
    )
    roles_tgt["inpainted"] = fake
    roles_tgt["composed"] = fake
    return det_loss(roles_out, roles_tgt)


def train_step(state: TrainState, batch: Batch):
    """One generator update then one discriminator update on the batch."""
    clean = batch_to_tensor(batch.clean)
    corrupted = batch_to_tensor(batch.corrupted)

    out = state.generator(corrupted)
    rec = rec_loss(clean, out.inpainted, out.composed)
    per = perceptual_loss(state.perceptual, clean, out.inpainted, out.composed)
    if state.config.disc == "detector":
        adv = adv_loss(
            state.discriminator(out.inpainted), state.discriminator(out.composed)
        )
    else:
        adv = 0.5 * (
            hinge_g_loss(state.discriminator(out.inpainted))
            + hinge_g_loss(state.discriminator(out.composed))
        )
    w = state.config.weights
    _check_finite(state.step, rec=rec, per=per, adv=adv)
    total_gen = w.lambda_rec * rec + w.lambda_per * per + w.lambda_adv * adv
    state.gen_opt.zero_grad()
    total_gen.backward()
    state.gen_opt.step()

    if state.config.disc == "detector":
        det_cls, det_loc = _detector_losses(state, batch, out)
    else:
        real = state.discriminator(clean)
        fakes = torch.cat(
            [
                state.discriminator(out.inpainted.detach()).reshape(-1),
                state.discriminator(out.composed.detach()).reshape(-1),
            ]
        )
        det_cls = hinge_d_loss(real, fakes)
        det_loc = det_cls.new_zeros(())
    _check_finite(state.step, det_cls=det_cls, det_loc=det_loc)
    total_disc = det_cls + det_loc
    state.disc_opt.zero_grad()
    total_disc.backward()
    state.disc_opt.step()

    try:
        report = make_loss_report(
            rec.detach().item(),
            per.detach().item(),
            adv.detach().item(),
            det_cls.detach().item(),
            det_loc.detach().item(),
            w,
        )
    except LossError as e:
        raise TrainerError(f"non-finite loss at step {state.step}: {e}") from e
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# checkpoint container: magic | u64 header length | header JSON | raw tensors
# ---------------------------------------------------------------------------

def _named_tensors(state: TrainState):
    """Deterministically ordered (name, tensor) pairs covering both
    networks and both optimizers."""
    pairs = []
    for prefix, module in (("gen", state.generator), ("disc", state.discriminator)):
        for name, t in module.state_dict().items():
            pairs.append((f"{prefix}.{name}", t))
    for prefix, opt, module in (
        ("gen_opt", state.gen_opt, state.generator),
        ("disc_opt", state.disc_opt, state.discriminator),
    ):
        params = list(module.parameters())
        by_id = {id(p): i for i, p in enumerate(params)}
        entries = sorted((by_id[id(p)], s) for p, s in opt.state.items())
        for pid, slot in entries:
            for key in sorted(slot):
                pairs.append((f"{prefix}.{pid}.{key}", slot[key]))
    return pairs


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pairs = _named_tensors(state)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.config.to_dict(),
        "config_hash": config_hash(state.config),
        "perceptual_resolved": state.perceptual_resolved,
        "tensors": [
            {
                "name": name,
                "dtype": _DTYPE_TO_NAME[t.dtype],
                "shape": list(t.shape),
            }
            for name, t in pairs
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in pairs:
            arr = t.detach().cpu().contiguous().numpy()
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise TrainerError(f"{path} is truncated: no checkpoint header")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise TrainerError(f"{path} is not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + header_len > len(raw):
        raise TrainerError(f"{path} is truncated: incomplete header")
    try:
        header = json.loads(raw[off : off + header_len].decode())
    except ValueError as e:
        raise TrainerError(f"{path} has a corrupt header: {e}") from e
    off += header_len

    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise TrainerError(
            f"{path} has format_version {version}, expected {CHECKPOINT_VERSION}"
        )
    config = TrainConfig.from_dict(header["config"])
    if config_hash(config) != header["config_hash"]:
        raise TrainerError(f"{path} config_hash does not match its config")

    tensors = {}
    for meta in header["tensors"]:
        dtype = _NAME_TO_DTYPE.get(meta["dtype"])
        if dtype is None:
            raise TrainerError(f"{path}: unknown tensor dtype {meta['dtype']!r}")
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * np.dtype(_NAME_TO_NUMPY[meta["dtype"]]).itemsize
        if off + nbytes > len(raw):
            raise TrainerError(
                f"{path} is truncated: missing data for tensor {meta['name']!r}"
            )
        arr = np.frombuffer(
            raw, dtype=_NAME_TO_NUMPY[meta["dtype"]], count=count, offset=off
        ).reshape(shape)
        tensors[meta["name"]] = torch.from_numpy(arr.copy()).to(dtype)
        off += nbytes
    if off != len(raw):
        raise TrainerError(f"{path} has {len(raw) - off} trailing bytes")

    # Rebuild from config, then overwrite every parameter/buffer/optimizer
    # slot with the stored bytes.
    if config.perceptual == "auto":
        config = dataclasses.replace(
            config, perceptual=header.get("perceptual_resolved", "random")
        )
    state = init_state(config)
    state.step = int(header["step"])

    for prefix, module in (("gen", state.generator), ("disc", state.discriminator)):
        sd = module.state_dict()
        for name in sd:
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise TrainerError(f"{path} is missing tensor {key!r}")
            sd[name] = tensors.pop(key)
        module.load_state_dict(sd)
    for prefix, opt, module in (
        ("gen_opt", state.gen_opt, state.generator),
        ("disc_opt", state.disc_opt, state.discriminator),
    ):
        params = list(module.parameters())
        slots = {}
        for key in [k for k in tensors if k.startswith(prefix + ".")]:
            _, pid, field_name = key.split(".", 2)
            slots.setdefault(int(pid), {})[field_name] = tensors.pop(key)
        for pid, slot in slots.items():
            opt.state[params[pid]] = slot
    if tensors:
        raise TrainerError(f"{path} has unexpected tensors: {sorted(tensors)[:3]}")
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: Path
    log_path: Path
    run_dir: Path


def _snapshot_grid(state: TrainState, batch: Batch, gen_out, max_rows=4):
    """Row per sample, columns corrupted | mask | inpainted | composed |
    clean (no mask column for the single-branch ablation)."""
    rows = []
    n = min(max_rows, len(batch))
    for i in range(n):
        panels = [batch.corrupted[i]]
        if state.config.branches == 2:
            m = tensor_to_image(gen_out.mask[i : i + 1])  # comes back H x W
            panels.append(np.repeat(m[:, :, None], 3, axis=2))
        panels.append(tensor_to_image(gen_out.inpainted[i : i + 1]))
        panels.append(tensor_to_image(gen_out.composed[i : i + 1]))
        panels.append(batch.clean[i])
        rows.append(np.concatenate(panels, axis=1))
    return np.clip(np.concatenate(rows, axis=0), 0.0, 1.0)


def write_snapshot(state: TrainState, batch: Batch, path):
    from .data import save_image

    with torch.no_grad():
        gen_out = state.generator(batch_to_tensor(batch.corrupted))
    save_image(path, _snapshot_grid(state, batch, gen_out))


def train(
    config: TrainConfig,
    dataset: DatasetIndex,
    run_dir="runs/default",
    resume_from=None,
) -> TrainResult:
    """Run (or resume) training to config.max_steps.

    Emits one JSON log line per step, periodic checkpoints/snapshots, and
    always a final checkpoint, even for max_steps=0.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "snapshots").mkdir(exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if config_hash(state.config) != config_hash(config):
            raise TrainerError(
                "resume config does not match the checkpoint's config "
                f"({config_hash(config)[:12]} vs {config_hash(state.config)[:12]})"
            )
        # identity fields match; run-control fields follow the caller
        state.config = config
    else:
        state = init_state(config)
    config = state.config

    index = dataset.with_image_size(config.image_size)
    if len(index) == 0:
        raise TrainerError("dataset is empty")

    log_path = run_dir / "log.jsonl"
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode) as log:
        while state.step < config.max_steps:
            step_started = time.monotonic()
            batch = fetch_batch(index, config, state.step)
            report = train_step(state, batch)
            wall_ms = 1000.0 * (time.monotonic() - step_started)
            line = {"step": state.step - 1, "wall_ms": wall_ms}
            line.update(report.as_dict())
            log.write(json.dumps(line, sort_keys=True) + "\n")

            done = state.step
            if config.snapshot_every and done % config.snapshot_every == 0:
                write_snapshot(
                    state, batch, run_dir / "snapshots" / f"step_{done:06d}.png"
                )
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                save_checkpoint(
                    state, run_dir / "checkpoints" / f"step_{done:06d}.ckpt"
                )

    if config.snapshot_every:
        batch = fetch_batch(index, config, max(0, state.step - 1))
        write_snapshot(
            state, batch, run_dir / "snapshots" / f"step_{state.step:06d}.png"
        )
    final = save_checkpoint(state, run_dir / "checkpoints" / "final.ckpt")
    return TrainResult(
        state=state, checkpoint_path=final, log_path=log_path, run_dir=run_dir
    )


def reconstruct_fn(state: TrainState):
    """Wrap a trained generator as a CorruptedSample -> image callable for
    the evaluation protocol."""

    def fn(sample):
        with torch.no_grad():
            out = state.generator(batch_to_tensor(sample.corrupted[None]))
        return tensor_to_image(out.composed)

    return fn

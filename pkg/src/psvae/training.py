"""Two-stage training protocol and whole-image inference.

Stage 1 fits the encoder, the mixture prior and a dummy decoder on the
beta-weighted objective. Stage 2 freezes all of those, re-initializes the
routed decoders and trains each one only on the patches whose argmax
assignment selects it. Every random draw (init, shuffling, latent noise)
comes from named substreams of one seed, so a run is exactly repeatable.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericError
from .losses import (
    LossConfig,
    _batch_arrays,
    decoder_loss_parts,
    decoder_routes,
    encoder_loss_parts,
)
from .model import (
    ArchDescriptor,
    ModelParams,
    build_model,
    decode_batch,
    encode_batch,
    reinit_decoder,
    save_checkpoint,
)
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .patching import assemble, split
from .tensor import resolve_dtype


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs_stage1: int = 50
    epochs_stage2: int = 50
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    mixture_components: int = 4
    latent_dim: int = 64
    num_decoders: int = None  # defaults to mixture_components
    precision: str = "f32"
    arch: ArchDescriptor = None  # derived from the data when absent
    reuse_dummy_decoder: bool = False
    checkpoint_every: int = 0  # epochs; 0 disables interval checkpoints

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ValueError("epoch counts must be >= 1")

    def decoder_count(self):
        return self.mixture_components if self.num_decoders is None else self.num_decoders


@dataclass
class EpochStats:
    epoch: int
    n_patches: int
    loss_sum: float
    part_sums: dict
    lr_first: float
    lr_last: float
    assign_counts: list


@dataclass
class TrainReport:
    stage: int
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    final_assign_counts: list = field(default_factory=list)
    wall_clock_sec: float = 0.0

    def to_text(self):
        lines = [f"stage={self.stage}", f"epochs={len(self.epochs)}"]
        for e in self.epochs:
            prefix = f"epoch.{e.epoch}"
            lines.append(f"{prefix}.n_patches={e.n_patches}")
            lines.append(f"{prefix}.loss_sum={e.loss_sum!r}")
            for key, val in e.part_sums.items():
                lines.append(f"{prefix}.{key}={val!r}")
            lines.append(f"{prefix}.lr_first={e.lr_first!r}")
            lines.append(f"{prefix}.lr_last={e.lr_last!r}")
            lines.append(f"{prefix}.assign={','.join(str(c) for c in e.assign_counts)}")
        if self.final_assign_counts:
            lines.append(
                "final_assign=" + ",".join(str(c) for c in self.final_assign_counts)
            )
        for w in self.warnings:
            lines.append(f"warning={w}")
        # Timing is volatile; tools comparing reports should skip this line.
        lines.append(f"wall_clock_sec={self.wall_clock_sec:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _seed_streams(seed):
    """Named substreams: init, shuffle1, eps1, decoder_init, shuffle2, eps2."""
    children = np.random.SeedSequence(seed).spawn(6)
    return {
        name: np.random.default_rng(child)
        for name, child in zip(
            ("init", "shuffle1", "eps1", "decoder_init", "shuffle2", "eps2"), children
        )
    }


def _batches(n, batch_size, perm):
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _zero_grads(params):
    for p in params.values():
        p.grad = None


def _resolve_arch(config, patch_shape):
    if config.arch is not None:
        return config.arch
    d, _, c = patch_shape
    return ArchDescriptor(patch_size=d, channels=c)


def _loss_diagnostic(step, parts):
    detail = ", ".join(f"{k}={float(v.data):g}" for k, v in parts.items())
    return f"non-finite loss at step {step}: {detail}"


def assignment_counts(noisy, model, chunk=512):
    """Cluster histogram of the dataset under the current encoder."""
    counts = np.zeros(model.mixture_components, dtype=np.int64)
    for start in range(0, len(noisy), chunk):
        lat = encode_batch(noisy[start : start + chunk], model, rng=None)
        counts += np.bincount(lat.routes, minlength=model.mixture_components)
    return counts.tolist()


def _interval_checkpoint(model, config, stage, epoch, checkpoint_dir):
    if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
        path = os.path.join(checkpoint_dir, f"stage{stage}_epoch{epoch:04d}.ckpt")
        save_checkpoint(path, model)


def train_stage1(dataset, config, checkpoint_dir=None):
    """Fit encoder + prior + dummy decoder; returns (model, report)."""
    dtype = resolve_dtype(config.precision)
    noisy, clean = _batch_arrays(dataset, dtype)
    arch = _resolve_arch(config, noisy.shape[1:])
    streams = _seed_streams(config.seed)
    model = build_model(
        arch,
        config.mixture_components,
        config.latent_dim,
        streams["init"],
        num_decoders=config.decoder_count(),
        precision=config.precision,
    )
    params = model.stage1_params()
    state = AdamState.for_params(params)
    report = TrainReport(stage=1)
    t0 = time.perf_counter()
    step = 0
    n = len(noisy)
    for epoch in range(1, config.epochs_stage1 + 1):
        perm = streams["shuffle1"].permutation(n)
        loss_sum = 0.0
        part_sums = {"mse": 0.0, "gauss_kl": 0.0, "cat_kl": 0.0, "reg": 0.0}
        counts = np.zeros(config.mixture_components, dtype=np.int64)
        lr_first = lr_last = None
        for chunk in _batches(n, config.batch_size, perm):
            lr = lr_at(config.schedule, step)
            lr_first = lr if lr_first is None else lr_first
            lr_last = lr
            report.lr_trace.append(lr)
            parts, lat = encoder_loss_parts(
                (noisy[chunk], clean[chunk]), model, model.prior, config.loss,
                rng=streams["eps1"],
            )
            total = parts["total"]
            if not np.isfinite(float(total.data)):
                raise NumericError(_loss_diagnostic(step, parts))
            _zero_grads(params)
            T.backward(total)
            adam_step(params, state, lr)
            step += 1
            loss_sum += float(total.data)
            for key in part_sums:
                part_sums[key] += float(parts[key].data)
            counts += np.bincount(lat.routes, minlength=config.mixture_components)
        report.epochs.append(
            EpochStats(epoch, n, loss_sum, part_sums, lr_first, lr_last, counts.tolist())
        )
        _interval_checkpoint(model, config, 1, epoch, checkpoint_dir)
    report.final_assign_counts = assignment_counts(noisy, model)
    report.wall_clock_sec = time.perf_counter() - t0
    return model, report


def train_stage2(dataset, frozen, config, checkpoint_dir=None):
    """Train the routed decoders against a frozen stage-1 model.

    The returned model shares no arrays with ``frozen``; encoder, prior and
    dummy decoder values are carried over bit for bit and never updated.
    """
    dtype = resolve_dtype(config.precision)
    noisy, clean = _batch_arrays(dataset, dtype)
    streams = _seed_streams(config.seed)
    model = frozen.copy()
    model.set_requires_grad(("encoder", "prior", "dummy"), False)
    k = model.num_decoders
    dec_streams = streams["decoder_init"].spawn(k)
    for i in range(k):
        if config.reuse_dummy_decoder and i == 0:
            model.decoders[0] = {
                key: T.parameter(p.data.copy(), p.dtype) for key, p in model.dummy.items()
            }
        else:
            reinit_decoder(model, i, dec_streams[i])
    dec_params = [model.decoder_params(i) for i in range(k)]
    states = [AdamState.for_params(p) for p in dec_params]

    report = TrainReport(stage=2)
    t0 = time.perf_counter()
    step = 0
    n = len(noisy)
    for epoch in range(1, config.epochs_stage2 + 1):
        perm = streams["shuffle2"].permutation(n)
        loss_sum = 0.0
        part_sums = {"mse": 0.0, "reg": 0.0}
        counts = np.zeros(k, dtype=np.int64)
        lr_first = lr_last = None
        for chunk in _batches(n, config.batch_size, perm):
            lr = lr_at(config.schedule, step)
            lr_first = lr if lr_first is None else lr_first
            lr_last = lr
            report.lr_trace.append(lr)
            parts, routes = decoder_loss_parts(
                (noisy[chunk], clean[chunk]), model, config.loss, rng=streams["eps2"]
            )
            total = parts["total"]
            if not np.isfinite(float(total.data)):
                raise NumericError(_loss_diagnostic(step, parts))
            for dp in dec_params:
                _zero_grads(dp)
            T.backward(total)
            for d in sorted(set(int(r) for r in routes)):
                adam_step(dec_params[d], states[d], lr)
            step += 1
            loss_sum += float(total.data)
            for key in part_sums:
                part_sums[key] += float(parts[key].data)
            counts += np.bincount(routes, minlength=k)
        for d in range(k):
            if counts[d] == 0:
                report.warnings.append(
                    f"decoder {d} received no patches in epoch {epoch}"
                )
        report.epochs.append(
            EpochStats(epoch, n, loss_sum, part_sums, lr_first, lr_last, counts.tolist())
        )
        _interval_checkpoint(model, config, 2, epoch, checkpoint_dir)
    report.wall_clock_sec = time.perf_counter() - t0
    return model, report


def infer(image, model, grid_spec):
    """Restore one image: split, encode (z = posterior mean), route, decode,
    reassemble. Returns (restored [H,W,C] array, route matrix [rows, cols])."""
    records = split(image, grid_spec)
    patches = np.stack([r.data.data for r in records])
    lat = encode_batch(patches, model, rng=None)
    routes = decoder_routes(lat.routes, model.num_decoders)
    z = lat.z.data
    restored = np.empty_like(patches, dtype=np.float32)
    for d in sorted(set(int(r) for r in routes)):
        idx = np.flatnonzero(routes == d)
        out = decode_batch(z[idx], model, d)
        restored[idx] = out.data.astype(np.float32)
    for rec, patch in zip(records, restored):
        rec.data = T.Tensor(patch)
    assembled = assemble(records, grid_spec).data
    route_matrix = np.asarray(routes, dtype=np.int64).reshape(
        grid_spec.rows, grid_spec.cols
    )
    return assembled, route_matrix

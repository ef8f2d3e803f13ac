"""Memory-bank contrastive training over pair-labeled video datasets.

Each step draws a batch of (anchor, positive) pairs from the core set and a
fresh batch of negatives from the distractors. All three groups are encoded
with the shared encoder; every anchor is scored against its positive, every
descriptor currently in the memory bank (held constant), and the fresh
negatives (which do receive gradients). The fresh negatives are then pushed
into the FIFO bank for later steps, and the parameters take one Adam step
under a cosine-annealed learning rate.

Determinism contract: given (seed, dataset, configs), the whole trajectory
is reproducible. Epoch ``e`` uses an rng derived from ``(seed, e)``, so a
resumed run replays the same per-epoch randomness.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import io as vio
from .losses import LOSS_NAMES, ScoreSet, evaluate_loss
from .validation import MalformedInputError, NumericalError


@dataclass
class TrainingConfig:
    batch_size: int = 64
    epochs: int = 40
    negatives_per_step: int = 1024
    bank_capacity: int = 4096
    pad_length: int = 64
    base_lr: float = 1e-5
    loss: str = "circle"
    tau: float = 0.07
    gamma: float = 256.0
    margin: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise MalformedInputError("epochs must be non-negative")
        for name in ("batch_size", "negatives_per_step", "bank_capacity", "pad_length"):
            if getattr(self, name) < 1:
                raise MalformedInputError(f"{name} must be positive")
        if self.base_lr <= 0.0:
            raise MalformedInputError("base_lr must be positive")
        if self.bank_capacity < self.negatives_per_step:
            raise MalformedInputError(
                "bank_capacity must be at least negatives_per_step"
            )
        if self.loss not in LOSS_NAMES:
            raise MalformedInputError(
                f"unknown loss {self.loss!r}; expected one of {LOSS_NAMES}"
            )


@dataclass
class VideoDataset:
    """In-memory training data: sequences plus the core/distractor split."""

    sequences: dict[str, np.ndarray]
    core_pairs: list[tuple[str, str]]
    distractors: list[str]

    def __post_init__(self):
        if not self.core_pairs:
            raise MalformedInputError("dataset has no core pairs")
        if not self.distractors:
            raise MalformedInputError("dataset has no distractors")
        core_ids = {v for pair in self.core_pairs for v in pair}
        overlap = core_ids & set(self.distractors)
        if overlap:
            raise MalformedInputError(
                f"ids appear in both core and distractors: {sorted(overlap)[:5]}"
            )
        missing = (core_ids | set(self.distractors)) - set(self.sequences)
        if missing:
            raise MalformedInputError(
                f"dataset is missing sequences for: {sorted(missing)[:5]}"
            )


class MemoryBank:
    """Fixed-capacity FIFO store of unit-norm video descriptors."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise MalformedInputError("bank capacity must be positive")
        self.capacity = capacity
        self._store: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._store)

    def push(self, descriptors: np.ndarray) -> None:
        """Append rows in order, evicting the oldest entries beyond capacity."""
        descriptors = np.asarray(descriptors, dtype=np.float64)
        if descriptors.ndim != 2:
            raise MalformedInputError("bank push expects a matrix of descriptors")
        self._store.extend(descriptors)
        if len(self._store) > self.capacity:
            self._store = self._store[len(self._store) - self.capacity :]

    def as_matrix(self) -> np.ndarray | None:
        if not self._store:
            return None
        return np.stack(self._store)


@dataclass
class AdamState:
    """Per-parameter moment accumulators for Adam with bias correction."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: enc.EncoderParams) -> "AdamState":
        return cls(m=enc.zeros_like_params(params), v=enc.zeros_like_params(params))


def adam_update(
    optimizer: AdamState,
    params: enc.EncoderParams,
    grads: dict[str, np.ndarray],
    lr: float,
) -> enc.EncoderParams:
    """One bias-corrected Adam step; mutates ``params`` in place and returns it."""
    optimizer.step += 1
    t = optimizer.step
    b1, b2 = optimizer.beta1, optimizer.beta2
    for name in enc.PARAM_NAMES:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = optimizer.m[name]
        v = optimizer.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        getattr(params, name)[...] -= lr * m_hat / (np.sqrt(v_hat) + optimizer.eps)
    return params


def lr_at(step_index: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 down to 0 at the final step."""
    if total_steps <= 0:
        raise MalformedInputError("total_steps must be positive")
    if not 0 <= step_index <= total_steps:
        raise MalformedInputError(
            f"step_index {step_index} outside [0, {total_steps}]"
        )
    return base_lr * (1.0 + math.cos(math.pi * step_index / total_steps)) / 2.0


def prepare_sequence(
    x: np.ndarray,
    pad_length: int,
    training: bool,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Crop or zero-pad a sequence to ``pad_length`` for training.

    Training mode extracts a uniformly random contiguous segment when the
    video is longer than ``pad_length`` and zero-pads (mask false) when it is
    shorter. Evaluation mode returns the full sequence untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise MalformedInputError("sequence must be a non-empty (f, d) matrix")
    f = x.shape[0]
    if not training:
        return x, np.ones(f, dtype=bool)
    if f > pad_length:
        if rng is None:
            raise MalformedInputError("cropping requires an rng")
        start = int(rng.integers(0, f - pad_length + 1))
        return x[start : start + pad_length], np.ones(pad_length, dtype=bool)
    if f < pad_length:
        padded = np.zeros((pad_length, x.shape[1]))
        padded[:f] = x
        mask = np.zeros(pad_length, dtype=bool)
        mask[:f] = True
        return padded, mask
    return x, np.ones(pad_length, dtype=bool)


def epoch_steps(
    core_pairs: list[tuple[str, str]],
    distractors: list[str],
    rng: np.random.Generator,
    batch_size: int,
    negatives_per_step: int,
):
    """Yield (oriented pair batch, negative ids) for one epoch.

    Every core pair appears exactly once per epoch, in shuffled order, with a
    fair coin deciding which side is the anchor. Negatives are drawn uniformly
    from the distractors, without replacement per step when the pool allows.
    """
    if not core_pairs:
        raise MalformedInputError("no core pairs to sample")
    if not distractors:
        raise MalformedInputError("no distractors to sample negatives from")
    order = rng.permutation(len(core_pairs))
    flips = rng.random(len(core_pairs)) < 0.5
    oriented = [
        (core_pairs[i][1], core_pairs[i][0]) if flip else core_pairs[i]
        for i, flip in zip(order, flips)
    ]
    for start in range(0, len(oriented), batch_size):
        batch = oriented[start : start + batch_size]
        yield batch, sample_negatives(distractors, rng, negatives_per_step)


def sample_negatives(
    distractors: list[str], rng: np.random.Generator, n: int
) -> list[str]:
    """Uniform negatives; a permutation of the pool when n equals its size."""
    if n <= len(distractors):
        idx = rng.choice(len(distractors), size=n, replace=False)
    else:
        idx = rng.choice(len(distractors), size=n, replace=True)
    return [distractors[i] for i in idx]


@dataclass
class EncodedVideo:
    """Forward results needed to push video-level gradients back through."""

    cache: dict
    n_real: int
    w: np.ndarray = field(repr=False)  # unnormalized mean of real rows
    z: np.ndarray = field(repr=False)  # normalized video descriptor
    w_norm: float = 0.0


def _encode_video(
    params: enc.EncoderParams,
    x: np.ndarray,
    mask: np.ndarray,
    *,
    heads: int,
    training: bool,
    dropout_rate: float,
    rng: np.random.Generator | None,
) -> EncodedVideo:
    out, cache = enc.forward(
        params, x, mask, heads=heads, training=training,
        dropout_rate=dropout_rate, rng=rng,
    )
    mask = cache["mask"]
    w = out[mask].mean(axis=0)
    w_norm = float(np.linalg.norm(w))
    if w_norm <= 1e-12:
        raise NumericalError("encoded video descriptor collapsed to zero")
    return EncodedVideo(cache=cache, n_real=int(mask.sum()), w=w, z=w / w_norm,
                        w_norm=w_norm)


def _video_backward(
    params: enc.EncoderParams, video: EncodedVideo, dz: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the parameters given the gradient in the normalized descriptor."""
    dw = (dz - video.z * float(video.z @ dz)) / video.w_norm
    mask = video.cache["mask"]
    upstream = np.zeros_like(video.cache["x"])
    upstream[mask] = dw / video.n_real
    grads, _ = enc.backward(params, video.cache, upstream)
    return grads


def step(
    params: enc.EncoderParams,
    optimizer: AdamState,
    bank: MemoryBank,
    anchors: list[tuple[np.ndarray, np.ndarray]],
    positives: list[tuple[np.ndarray, np.ndarray]],
    negatives: list[tuple[np.ndarray, np.ndarray]],
    *,
    encoder_config: enc.EncoderConfig,
    config: TrainingConfig,
    lr: float,
    rng: np.random.Generator | None = None,
) -> float:
    """One contrastive update; returns the batch-mean loss value.

    ``anchors``/``positives``/``negatives`` are (sequence, mask) tuples, the
    anchor and positive lists aligned pairwise. Bank entries score as
    constant negatives; the fresh negatives are pushed into the bank after
    the update.
    """
    if len(anchors) != len(positives) or not anchors or not negatives:
        raise MalformedInputError("step needs aligned pairs and at least one negative")
    kw = dict(heads=encoder_config.heads, training=True,
              dropout_rate=encoder_config.dropout_rate, rng=rng)
    enc_anchors = [_encode_video(params, x, m, **kw) for x, m in anchors]
    enc_positives = [_encode_video(params, x, m, **kw) for x, m in positives]
    enc_negatives = [_encode_video(params, x, m, **kw) for x, m in negatives]

    bank_matrix = bank.as_matrix()
    n_bank = 0 if bank_matrix is None else bank_matrix.shape[0]
    fresh = np.stack([v.z for v in enc_negatives])

    batch = len(enc_anchors)
    losses = []
    dz_anchor = []
    dz_positive = []
    dz_fresh = np.zeros_like(fresh)
    for a, p in zip(enc_anchors, enc_positives):
        s_p = float(np.clip(a.z @ p.z, -1.0, 1.0))
        s_bank = np.empty(0) if bank_matrix is None else bank_matrix @ a.z
        s_fresh = fresh @ a.z
        scores = ScoreSet(
            s_p=s_p,
            s_n=np.clip(np.concatenate([s_bank, s_fresh]), -1.0, 1.0),
        )
        out = evaluate_loss(scores, config.loss, tau=config.tau,
                            gamma=config.gamma, margin=config.margin)
        losses.append(out.value)
        d_sn_fresh = out.d_sn[n_bank:]
        da = out.d_sp * p.z + fresh.T @ d_sn_fresh
        if bank_matrix is not None:
            da = da + bank_matrix.T @ out.d_sn[:n_bank]
        dz_anchor.append(da / batch)
        dz_positive.append(out.d_sp * a.z / batch)
        dz_fresh += np.outer(d_sn_fresh, a.z) / batch

    loss_value = float(np.mean(losses))
    if not np.isfinite(loss_value):
        raise NumericalError(
            f"non-finite loss {loss_value} (per-anchor values: {losses[:4]}...)"
        )

    grads = enc.zeros_like_params(params)
    pairs = (
        list(zip(enc_anchors, dz_anchor))
        + list(zip(enc_positives, dz_positive))
        + list(zip(enc_negatives, dz_fresh))
    )
    for video, dz in pairs:
        for name, g in _video_backward(params, video, dz).items():
            grads[name] += g

    adam_update(optimizer, params, grads, lr)
    bank.push(fresh)
    return loss_value


@dataclass
class FitResult:
    params: enc.EncoderParams
    optimizer: AdamState
    history: list[dict]
    final_checkpoint: Path | None = None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


def fit(
    dataset: VideoDataset,
    encoder_config: enc.EncoderConfig,
    config: TrainingConfig,
    *,
    out_dir=None,
    log_path=None,
    init_params: enc.EncoderParams | None = None,
    resume_from=None,
) -> FitResult:
    """Run the full training loop; optionally checkpoint and log to disk.

    Checkpoints are written per epoch plus a final one. ``resume_from`` loads
    a checkpoint (and its ``.state.npz`` sidecar when present) and continues
    from the recorded epoch; the bank starts empty again.
    """
    start_epoch = 0
    if resume_from is not None:
        ckpt_config, params = vio.read_checkpoint(resume_from)
        if (ckpt_config.dim, ckpt_config.heads, ckpt_config.ffn_dim) != (
            encoder_config.dim, encoder_config.heads, encoder_config.ffn_dim,
        ):
            raise MalformedInputError("resume checkpoint does not match encoder config")
        optimizer = AdamState.for_params(params)
        state_path = Path(str(resume_from) + ".state.npz")
        if state_path.exists():
            state = np.load(state_path)
            optimizer.step = int(state["step"])
            start_epoch = int(state["epoch"])
            for name in enc.PARAM_NAMES:
                optimizer.m[name] = state[f"m_{name}"]
                optimizer.v[name] = state[f"v_{name}"]
    else:
        params = init_params.copy() if init_params is not None else enc.init_encoder(encoder_config)
        optimizer = AdamState.for_params(params)

    bank = MemoryBank(config.bank_capacity)
    steps_per_epoch = math.ceil(len(dataset.core_pairs) / config.batch_size)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    if config.negatives_per_step > len(dataset.distractors):
        warnings.warn(
            f"negatives_per_step {config.negatives_per_step} exceeds the "
            f"distractor pool ({len(dataset.distractors)}); sampling with replacement"
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    log_handle = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    history: list[dict] = []
    global_step = optimizer.step
    try:
        for epoch in range(start_epoch, config.epochs):
            rng = _epoch_rng(config.seed, epoch)
            def prep(vid: str) -> tuple[np.ndarray, np.ndarray]:
                return prepare_sequence(
                    dataset.sequences[vid], config.pad_length, True, rng
                )

            for pair_batch, negative_ids in epoch_steps(
                dataset.core_pairs, dataset.distractors, rng,
                config.batch_size, config.negatives_per_step,
            ):
                anchors = [prep(a) for a, _ in pair_batch]
                positives = [prep(p) for _, p in pair_batch]
                negatives = [prep(n) for n in negative_ids]
                lr = lr_at(min(global_step, total_steps), total_steps, config.base_lr)
                loss_value = step(
                    params, optimizer, bank, anchors, positives, negatives,
                    encoder_config=encoder_config, config=config, lr=lr, rng=rng,
                )
                global_step += 1
                record = {
                    "step": global_step,
                    "epoch": epoch,
                    "loss": loss_value,
                    "lr": lr,
                    "bank_size": len(bank),
                }
                history.append(record)
                if log_handle is not None:
                    log_handle.write(json.dumps(record) + "\n")
            if out_dir is not None:
                _write_checkpoint_with_state(
                    out_dir / f"checkpoint_epoch{epoch:04d}.tcae",
                    encoder_config, params, optimizer, epoch + 1,
                )
    finally:
        if log_handle is not None:
            log_handle.close()

    final_path = None
    if out_dir is not None:
        final_path = out_dir / "checkpoint_final.tcae"
        _write_checkpoint_with_state(final_path, encoder_config, params, optimizer,
                                     config.epochs)
    return FitResult(params=params, optimizer=optimizer, history=history,
                     final_checkpoint=final_path)


def _write_checkpoint_with_state(path, encoder_config, params, optimizer, epoch) -> None:
    vio.write_checkpoint(path, encoder_config, params)
    arrays = {f"m_{k}": v for k, v in optimizer.m.items()}
    arrays.update({f"v_{k}": v for k, v in optimizer.v.items()})
    with vio.atomic_write(str(path) + ".state.npz") as handle:
        np.savez(handle, step=optimizer.step, epoch=epoch, **arrays)

"""Deterministic training and experiment harness.

Adam with bias correction, seeded shuffling and drop-path streams so a
(seed, config, data) triple fixes the whole trajectory bit-exactly,
checkpoint/resume through the weight format plus an optimizer sidecar,
single-pass evaluation with a persistence baseline, and the synthetic
moving-bar task used for desk-scale learning checks.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .events import (DEFAULT_BIN_US, OccurrenceTensor, bin_events,
                     random_bar_scene, read_ocm, synth_scene, write_ocm)
from .losses import LossConfig, total_loss
from .metrics import MetricAccumulator, binarize
from .model import ModelConfig, TideModel, save_checkpoint
from .numerics import Tape, Tensor, ops
from .util import atomic_write_bytes

MANIFEST_NAME = "manifest.txt"

_SHUFFLE_TAG = 101
_DROPPATH_TAG = 202
_SCENE_TAG = 17


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 1
    val_split: float = 0.1
    grad_clip: float = 0.0  # global-norm limit; 0 disables
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not 0.0 <= self.val_split < 1.0:
            raise ValueError(f"val_split must lie in [0, 1), got {self.val_split}")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip}")


_TRAIN_SCALARS = tuple(f.name for f in fields(TrainConfig)
                       if f.name not in ("loss", "model"))


def train_config_to_text(cfg: TrainConfig) -> str:
    """Flat key=value lines; nested configs carry loss./model. prefixes."""
    lines = []
    for name in _TRAIN_SCALARS:
        lines.append(f"{name}={getattr(cfg, name)}")
    for f in fields(cfg.loss):
        lines.append(f"loss.{f.name}={getattr(cfg.loss, f.name)}")
    for key, value in (line.split("=", 1)
                       for line in cfg.model.to_text().splitlines()):
        lines.append(f"model.{key}={value}")
    return "\n".join(lines) + "\n"


def train_config_from_text(text: str) -> TrainConfig:
    scalars, loss_kv, model_lines = {}, {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key.startswith("model."):
            model_lines.append(f"{key[len('model.'):]}={value}")
        elif key.startswith("loss."):
            loss_kv[key[len("loss."):]] = value
        elif key in _TRAIN_SCALARS:
            scalars[key] = value
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")

    kwargs = {}
    for name, value in scalars.items():
        kind = int if name in ("epochs", "batch_size", "seed",
                               "checkpoint_interval") else float
        kwargs[name] = kind(value)
    loss_fields = {f.name for f in fields(LossConfig)}
    loss_kwargs = {}
    for name, value in loss_kv.items():
        if name not in loss_fields:
            raise ValueError(f"unknown loss key {name!r}")
        loss_kwargs[name] = float(value)
    if loss_kwargs:
        kwargs["loss"] = LossConfig(**loss_kwargs)
    if model_lines:
        kwargs["model"] = ModelConfig.from_text("\n".join(model_lines))
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moments per parameter plus the step counter."""

    def __init__(self, model: TideModel):
        self.m = {p.name: np.zeros_like(p.data) for p in model.parameters()}
        self.v = {p.name: np.zeros_like(p.data) for p in model.parameters()}
        self.step = 0
        self.epochs_done = 0

    def save(self, path) -> None:
        buf = io.BytesIO()
        arrays = {f"m:{k}": v for k, v in self.m.items()}
        arrays.update({f"v:{k}": v for k, v in self.v.items()})
        arrays["step"] = np.array(self.step, dtype=np.int64)
        arrays["epochs_done"] = np.array(self.epochs_done, dtype=np.int64)
        np.savez(buf, **arrays)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path, model: TideModel) -> "AdamState":
        state = cls(model)
        with np.load(path) as data:
            names = set(state.m)
            seen = set()
            for key in data.files:
                if key in ("step", "epochs_done"):
                    continue
                kind, _, name = key.partition(":")
                if kind not in ("m", "v") or name not in names:
                    raise ValueError(f"unexpected optimizer entry {key!r}")
                target = state.m if kind == "m" else state.v
                if data[key].shape != target[name].shape:
                    raise ValueError(f"optimizer entry {key!r} has shape "
                                     f"{data[key].shape}, expected "
                                     f"{target[name].shape}")
                target[name] = data[key].astype(target[name].dtype)
                seen.add(key)
            missing = ({f"m:{n}" for n in names} | {f"v:{n}" for n in names}) - seen
            if missing:
                raise ValueError(f"optimizer state missing {sorted(missing)[0]!r}")
            state.step = int(data["step"])
            state.epochs_done = int(data["epochs_done"])
        return state


def adam_step(params, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              grad_clip: float = 0.0) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    params = list(params)
    scale = 1.0
    if grad_clip > 0.0:
        sq = sum(float((p.grad ** 2).sum()) for p in params
                 if p.grad is not None)
        norm = sq ** 0.5
        if norm > grad_clip:
            scale = grad_clip / norm

    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class SequenceDataset:
    """In-memory pairs of binary (input window, target window) tensors."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray,
                 bin_duration: int = DEFAULT_BIN_US):
        inputs = np.ascontiguousarray(inputs, dtype=np.uint8)
        targets = np.ascontiguousarray(targets, dtype=np.uint8)
        for name, arr in (("inputs", inputs), ("targets", targets)):
            if arr.ndim != 5 or arr.shape[2] != 2:
                raise ValueError(f"{name} must be [N,T,2,H,W], got {arr.shape}")
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError(f"{name} must be binary")
        if inputs.shape[0] != targets.shape[0]:
            raise ValueError("inputs and targets disagree on sequence count")
        if inputs.shape[3:] != targets.shape[3:]:
            raise ValueError("inputs and targets disagree on spatial size")
        self.inputs = inputs
        self.targets = targets
        self.bin_duration = bin_duration

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int):
        return self.inputs[i], self.targets[i]

    @property
    def t_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def t_out(self) -> int:
        return self.targets.shape[1]

    @property
    def height(self) -> int:
        return self.inputs.shape[3]

    @property
    def width(self) -> int:
        return self.inputs.shape[4]


def make_moving_bar_dataset(n_sequences: int, *, height: int = 128,
                            width: int = 128, t_in: int = 10, t_out: int = 10,
                            seed: int = 0,
                            bin_duration: int = DEFAULT_BIN_US,
                            n_objects: tuple[int, int] = (1, 3)
                            ) -> SequenceDataset:
    """Bars crossing the frame at constant velocity; fully seed-determined."""
    if n_sequences < 0:
        raise ValueError(f"n_sequences must be >= 0, got {n_sequences}")
    n_bins = t_in + t_out
    xs = np.zeros((n_sequences, t_in, 2, height, width), dtype=np.uint8)
    ys = np.zeros((n_sequences, t_out, 2, height, width), dtype=np.uint8)
    for i in range(n_sequences):
        rng = np.random.default_rng([seed, _SCENE_TAG, i])
        scene = random_bar_scene(rng, width, height, n_bins,
                                 n_objects=n_objects,
                                 bin_duration=bin_duration)
        stream = synth_scene(scene, seed=int(rng.integers(0, 2 ** 31)))
        occ = bin_events(stream, 0, bin_duration, n_bins)
        xs[i] = occ.frames[:t_in]
        ys[i] = occ.frames[t_in:]
    return SequenceDataset(xs, ys, bin_duration)


def save_dataset(dataset: SequenceDataset, out_dir) -> None:
    """One OCM1 pair per sequence plus a two-column manifest."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        x, y = dataset[i]
        name_in = f"seq_{i:05d}_in.ocm1"
        name_tgt = f"seq_{i:05d}_tgt.ocm1"
        write_ocm(os.path.join(out_dir, name_in),
                  OccurrenceTensor(x, dataset.bin_duration, 0))
        write_ocm(os.path.join(out_dir, name_tgt),
                  OccurrenceTensor(y, dataset.bin_duration,
                                   dataset.t_in * dataset.bin_duration))
        rows.append(f"{name_in} {name_tgt}\n")
    atomic_write_bytes(os.path.join(out_dir, MANIFEST_NAME),
                       "".join(rows).encode())


def load_dataset(data_dir) -> SequenceDataset:
    manifest = os.path.join(data_dir, MANIFEST_NAME)
    with open(manifest, encoding="utf-8") as fh:
        rows = [line.split() for line in fh if line.strip()]
    xs, ys = [], []
    bin_duration = DEFAULT_BIN_US
    for row in rows:
        if len(row) != 2:
            raise ValueError(f"manifest row must list two files, got {row}")
        occ_in = read_ocm(os.path.join(data_dir, row[0]))
        occ_tgt = read_ocm(os.path.join(data_dir, row[1]))
        xs.append(occ_in.frames)
        ys.append(occ_tgt.frames)
        bin_duration = occ_in.bin_duration
    if not rows:
        return SequenceDataset(np.zeros((0, 1, 2, 1, 1), dtype=np.uint8),
                               np.zeros((0, 1, 2, 1, 1), dtype=np.uint8))
    return SequenceDataset(np.stack(xs), np.stack(ys), bin_duration)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def split_indices(n: int, val_split: float) -> tuple[list[int], list[int]]:
    """Deterministic tail split; at least one training sequence survives."""
    n_val = min(int(round(n * val_split)), max(n - 1, 0))
    return list(range(n - n_val)), list(range(n - n_val, n))


def train(model: TideModel, dataset: SequenceDataset, cfg: TrainConfig,
          out_dir=None, state: AdamState | None = None, log=None
          ) -> tuple[TideModel, list[dict]]:
    """Run (or, with a loaded optimizer state, resume) the training loop.

    Epoch-derived random streams make a resumed run replay exactly what the
    unbroken run would have done from that epoch on. Returns the model and
    one history record per completed epoch.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.t_in != cfg.model.t_in or dataset.t_out != cfg.model.t_out:
        raise ValueError(
            f"dataset windows {dataset.t_in}->{dataset.t_out} do not match "
            f"model {cfg.model.t_in}->{cfg.model.t_out}")
    if (dataset.height, dataset.width) != (cfg.model.height, cfg.model.width):
        raise ValueError(
            f"dataset frames {dataset.height}x{dataset.width} do not match "
            f"model {cfg.model.height}x{cfg.model.width}")

    if state is None:
        state = AdamState(model)
    train_idx, val_idx = split_indices(len(dataset), cfg.val_split)
    history: list[dict] = []

    for epoch in range(state.epochs_done, cfg.epochs):
        order = np.random.default_rng(
            [cfg.seed, _SHUFFLE_TAG, epoch]).permutation(train_idx)
        loss_sum = 0.0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            x = dataset.inputs[batch].astype(np.float32)
            y = dataset.targets[batch].astype(np.float32)
            droppath_rng = np.random.default_rng(
                [cfg.seed, _DROPPATH_TAG, epoch, step])
            model.zero_grad()
            with Tape() as tape:
                logits = model.forward(Tensor(x), training=True,
                                       rng=droppath_rng)
                loss = total_loss(logits, y, cfg.loss)
                tape.backward(loss)
            adam_step(model.parameters(), state, lr=cfg.lr, beta1=cfg.beta1,
                      beta2=cfg.beta2, eps=cfg.eps, grad_clip=cfg.grad_clip)
            loss_sum += loss.item() * len(batch)

        state.epochs_done = epoch + 1
        record = {"epoch": epoch + 1,
                  "train_loss": loss_sum / len(order)}
        if val_idx:
            report = rollout_eval(model, dataset, indices=val_idx)
            record.update({f"val_{k}": v for k, v in report["model"].items()})
            record.update(
                {f"baseline_{k}": v for k, v in report["persistence"].items()
                 if k in ("miou", "aiou")})
        history.append(record)
        if log is not None:
            log(format_history_record(record))
        if out_dir is not None and (epoch + 1) % cfg.checkpoint_interval == 0:
            ckpt = os.path.join(out_dir, f"ckpt_{epoch + 1:04d}.etw")
            save_checkpoint(ckpt, model)
            state.save(ckpt + ".opt.npz")
    return model, history


def format_history_record(record: dict) -> str:
    parts = []
    for key, value in record.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6f}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def predict(model: TideModel, x: np.ndarray) -> np.ndarray:
    """Probabilities [B,T_out,2,H,W] from binary inputs, one forward pass."""
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[None]
    logits = model.forward(Tensor(x.astype(model.dtype)), training=False)
    return ops.sigmoid(logits).data


def persistence_forecast(x: np.ndarray, t_out: int) -> np.ndarray:
    """Repeat the last observed frame for every future step."""
    x = np.asarray(x)
    return np.repeat(x[..., -1:, :, :, :], t_out, axis=-4)


def rollout_eval(model: TideModel, dataset: SequenceDataset,
                 indices=None) -> dict:
    """Globally accumulated metrics for the model and the persistence baseline."""
    if indices is None:
        indices = range(len(dataset))
    acc_model = MetricAccumulator()
    acc_pers = MetricAccumulator()
    for i in indices:
        x, y = dataset[i]
        probs = predict(model, x[None])[0]
        acc_model.update(binarize(probs), y, probs)
        pers = persistence_forecast(x, dataset.t_out)
        acc_pers.update(pers, y, pers.astype(np.float64))
    return {"model": acc_model.finalize(), "persistence": acc_pers.finalize()}


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------

def estimate_activation_bytes(cfg: ModelConfig, batch: int = 1,
                              bytes_per_value: int = 4) -> int:
    """Sum of forward intermediate sizes; a monotone analytic proxy for peak
    working memory, not an allocator measurement."""
    h, w = cfg.height, cfg.width
    d = cfg.packed_channels
    values = batch * cfg.t_in * 2 * h * w  # folded input
    widths = (2,) + tuple(cfg.enc_widths) + (cfg.c_step,)
    for s in range(1, cfg.stages + 1):
        plane = (h // 2 ** s) * (w // 2 ** s)
        values += 3 * batch * cfg.t_in * widths[s] * plane  # conv, norm, gelu
    hp, wp = cfg.grid
    plane = hp * wp
    values += batch * d * plane  # packed tensor
    per_block = (7 * d + 2 * cfg.ffn_expansion * d) * plane \
        + 2 * plane + 2 * (d + cfg.gate_hidden)
    values += cfg.n_blocks * batch * per_block
    prev = d
    for i, width_out in enumerate(cfg.dec_widths):
        up = (hp * 2 ** (i + 1)) * (wp * 2 ** (i + 1))
        values += batch * (prev * up + 3 * width_out * up)
        prev = width_out
    values += 2 * batch * cfg.t_out * 2 * h * w  # head + reshape
    return values * bytes_per_value


def benchmark(model: TideModel, iters: int = 50, warmup: int = 5,
              seed: int = 0) -> dict:
    """Median/p95 forward latency at batch 1 plus the memory estimate."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    cfg = model.config
    rng = np.random.default_rng(seed)
    x = (rng.random((1, cfg.t_in, 2, cfg.height, cfg.width)) < 0.25)
    x = Tensor(x.astype(model.dtype))
    for _ in range(warmup):
        model.forward(x, training=False)
    times = np.zeros(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        model.forward(x, training=False)
        times[i] = (time.perf_counter() - t0) * 1e3
    return {
        "median_ms": float(np.median(times)),
        "p95_ms": float(np.percentile(times, 95)),
        "peak_bytes_estimate": estimate_activation_bytes(cfg),
        "n_params": sum(p.data.size for p in model.parameters()),
    }

"""Small residual channel-attention network mapping raw SIM chunks to HR planes.

Input: ``7c`` raw frames of ``c`` consecutive planes (H x W). Output: ``3c``
HR planes at 2H x 2W. The network is written functionally over a flat dict
of parameter tensors so weights can be saved, inspected and gradient-checked
tensor by tensor.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as fn

from .core import (FRAMES_PER_PLANE, OUT_FRAMES_PER_PLANE, Chunk, RawSimStack, Stack3D, chunk_split,
                   normalize_unit_range, truncate_negatives)

log = logging.getLogger(__name__)

if "HEXSIM_THREADS" in os.environ:
    torch.set_num_threads(int(os.environ["HEXSIM_THREADS"]))


@dataclass(frozen=True)
class NetConfig:
    groups: int = 2
    blocks_per_group: int = 2
    features: int = 8
    kernel: int = 3
    chunk: int = 3
    attention_reduction: int = 4
    lateral_upscale: int = 2
    attention: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel > 5:
            raise ValueError("kernel must be odd and at most 5")
        if min(self.groups, self.blocks_per_group, self.features, self.chunk) < 1:
            raise ValueError("groups, blocks_per_group, features and chunk must be >= 1")
        if self.lateral_upscale != 2:
            raise ValueError("only 2x lateral upscaling is supported")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def frames_in(self) -> int:
        return FRAMES_PER_PLANE * self.chunk

    @property
    def frames_out(self) -> int:
        return OUT_FRAMES_PER_PLANE * self.chunk

    @property
    def squeeze(self) -> int:
        return max(1, self.features // self.attention_reduction)


NetParams = "OrderedDict[str, torch.Tensor]"


def param_shapes(cfg: NetConfig) -> OrderedDict:
    F, k = cfg.features, cfg.kernel
    shapes = OrderedDict()

    def conv(name, cout, cin, *ks):
        shapes[f"{name}.w"] = (cout, cin, *ks)
        shapes[f"{name}.b"] = (cout,)

    conv("head3d", F, 1, 3, k, k)
    conv("collapse", F, F * cfg.frames_in, 1, 1)
    for g in range(cfg.groups):
        for b in range(cfg.blocks_per_group):
            pre = f"g{g}.b{b}"
            conv(f"{pre}.conv1", F, F, k, k)
            conv(f"{pre}.conv2", F, F, k, k)
            if cfg.attention:
                conv(f"{pre}.ca1", cfg.squeeze, F, 1, 1)
                conv(f"{pre}.ca2", F, cfg.squeeze, 1, 1)
        conv(f"g{g}.tail", F, F, k, k)
    conv("body_tail", F, F, k, k)
    conv("up", 4 * F, F, k, k)
    conv("out", cfg.frames_out, F, k, k)
    return shapes


# layers feeding a ReLU get gain 2, the rest gain 1
_RELU_FED = (".conv1.w", ".ca1.w")


def init_params(cfg: NetConfig, seed=0, dtype=torch.float32, residual_scale=0.1) -> OrderedDict:
    """Fan-in scaled normal initialization; biases start at zero.

    The last convolution of every residual branch is shrunk by
    ``residual_scale`` so the trunk starts close to the identity.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 2.0 if name.endswith(_RELU_FED) else 1.0
            arr = rng.normal(0.0, math.sqrt(gain / fan_in), shape)
            if name.endswith((".conv2.w", ".tail.w")):
                arr *= residual_scale
        params[name] = torch.tensor(arr, dtype=dtype)
    return params


def _conv(x, params, name, pad=True):
    w = params[f"{name}.w"]
    padding = w.shape[-1] // 2 if pad else 0
    return fn.conv2d(x, w, params[f"{name}.b"], padding=padding)


def _attention_gate(x, params, pre, act):
    pooled = x.mean(dim=(2, 3), keepdim=True)
    return torch.sigmoid(_conv(act(_conv(pooled, params, f"{pre}.ca1")), params, f"{pre}.ca2"))


def forward(params, cfg: NetConfig, x, _gates=None) -> torch.Tensor:
    """Run the network on ``x`` of shape ``(batch, 7c, H, W)`` (or unbatched)."""
    x = torch.as_tensor(x, dtype=params["head3d.w"].dtype)
    unbatched = x.ndim == 3
    if unbatched:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.frames_in:
        raise ValueError(f"expected input (batch, {cfg.frames_in}, H, W), got {tuple(x.shape)}")
    act = torch.relu if cfg.activation == "relu" else (lambda t: t)
    batch, depth, h, w = x.shape
    k = cfg.kernel

    feat = fn.conv3d(x[:, None], params["head3d.w"], params["head3d.b"], padding=(1, k // 2, k // 2))
    feat = feat.reshape(batch, cfg.features * depth, h, w)
    feat = _conv(feat, params, "collapse", pad=False)

    body = feat
    for g in range(cfg.groups):
        group_in = body
        for b in range(cfg.blocks_per_group):
            pre = f"g{g}.b{b}"
            res = _conv(act(_conv(body, params, f"{pre}.conv1")), params, f"{pre}.conv2")
            if cfg.attention:
                gate = _attention_gate(res, params, pre, act)
                if _gates is not None:
                    _gates.append(gate)
                res = res * gate
            body = body + res
        body = _conv(body, params, f"g{g}.tail") + group_in
    body = _conv(body, params, "body_tail") + feat

    up = fn.pixel_shuffle(_conv(body, params, "up"), 2)
    out = _conv(up, params, "out")
    return out[0] if unbatched else out


def attention_gates(params, cfg: NetConfig, x) -> list[torch.Tensor]:
    """Gate values of every block for input ``x``."""
    gates = []
    with torch.no_grad():
        forward(params, cfg, x, _gates=gates)
    return gates


def backward(params, cfg: NetConfig, x, loss_grad) -> OrderedDict:
    """Gradients of ``sum(forward(x) * loss_grad)`` with respect to every parameter.

    ``loss_grad`` is dL/d(output); for MSE against ``y`` it is
    ``2 * (forward(x) - y) / n``.
    """
    leaves = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())
    out = forward(leaves, cfg, x)
    g = torch.as_tensor(loss_grad, dtype=out.dtype)
    if g.shape != out.shape:
        raise ValueError(f"loss_grad shape {tuple(g.shape)} does not match output {tuple(out.shape)}")
    grads = torch.autograd.grad(out, list(leaves.values()), grad_outputs=g, allow_unused=True)
    return OrderedDict((k, torch.zeros_like(v) if gr is None else gr)
                       for (k, v), gr in zip(leaves.items(), grads))


def mse_loss_grad(out, target) -> torch.Tensor:
    return 2.0 * (out - target) / out.numel()


# -- data ------------------------------------------------------------------------

PAIR_DISCARD_MEAN = 5e-7
CHUNK_DISCARD_MEAN = 1e-7


def prepare_dataset(pairs, cfg: NetConfig, validation_fraction=0.1, seed=0,
                    pair_threshold=PAIR_DISCARD_MEAN, chunk_threshold=CHUNK_DISCARD_MEAN):
    """Turn (raw stack, HR target) pairs into shuffled train / validation chunk lists.

    Dim pairs are dropped, each stack is normalized to [0, 1] on its own, and
    the pair is chunked without overlap.
    """
    chunks = []
    for raw, target in pairs:
        if raw.frames.mean() < pair_threshold:
            continue
        raw_n = normalize_unit_range(raw.as_stack())
        raw_n = raw.with_frames(raw_n.data.reshape(raw.frames.shape))
        chunks.extend(chunk_split(raw_n, normalize_unit_range(target), cfg.chunk, chunk_threshold))
    order = np.random.default_rng(seed).permutation(len(chunks))
    n_val = int(round(validation_fraction * len(chunks)))
    if len(chunks) > 1:
        n_val = min(max(n_val, 1 if validation_fraction > 0 else 0), len(chunks) - 1)
    val = [chunks[i] for i in order[:n_val]]
    train = [chunks[i] for i in order[n_val:]]
    return train, val


def _stack_chunks(chunks, dtype):
    x = torch.tensor(np.stack([c.input for c in chunks]), dtype=dtype)
    y = torch.tensor(np.stack([c.target for c in chunks]), dtype=dtype)
    return x, y


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    clip: float = 0.1
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-8
    periodic_decay: float = 0.99
    periodic_every: int = 5
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    validation_fraction: float = 0.1
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.clip < 0:
            raise ValueError("clip must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_mse", "val_mse"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.lr:.10g}", f"{r.train_mse:.10g}", f"{r.val_mse:.10g}"])


def evaluate_mse(params, cfg: NetConfig, chunks, batch_size=16) -> float:
    if not chunks:
        return float("nan")
    dtype = params["head3d.w"].dtype
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(chunks), batch_size):
            x, y = _stack_chunks(chunks[i:i + batch_size], dtype)
            total += float(((forward(params, cfg, x) - y) ** 2).sum())
            count += y.numel()
    return total / count


def train(cfg: NetConfig, tcfg: TrainConfig, dataset, params=None, dtype=torch.float32):
    """Minibatch training on MSE with elementwise gradient clamping.

    ``dataset`` is ``(train_chunks, val_chunks)``. The learning rate drops by
    ``plateau_factor`` when validation loss stalls for ``plateau_patience``
    epochs and by ``periodic_decay`` after every ``periodic_every`` epochs.
    Returns the trained parameters and the per-epoch log.
    """
    train_chunks, val_chunks = dataset
    if not train_chunks:
        raise ValueError("no training chunks")
    params = init_params(cfg, tcfg.seed, dtype) if params is None else params
    leaves = [p.detach().clone().requires_grad_(True) for p in params.values()]
    live = OrderedDict(zip(params.keys(), leaves))
    if tcfg.optimizer == "adam":
        opt = torch.optim.Adam(leaves, lr=tcfg.lr0)
    else:
        opt = torch.optim.SGD(leaves, lr=tcfg.lr0)
    plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=tcfg.plateau_factor, patience=tcfg.plateau_patience,
        threshold=tcfg.plateau_min_delta, threshold_mode="abs")
    rng = np.random.default_rng(tcfg.seed)
    x_all, y_all = _stack_chunks(train_chunks, dtype)
    history = TrainingLog()

    for epoch in range(1, tcfg.epochs + 1):
        lr = opt.param_groups[0]["lr"]
        order = rng.permutation(len(train_chunks))
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = torch.as_tensor(order[start:start + tcfg.batch_size])
            x, y = x_all[idx], y_all[idx]
            opt.zero_grad()
            loss = fn.mse_loss(forward(live, cfg, x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            for p in leaves:
                p.grad.clamp_(-tcfg.clip, tcfg.clip)
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        train_mse = total / count
        val_mse = evaluate_mse(live, cfg, val_chunks)
        history.records.append(EpochRecord(epoch, lr, train_mse, val_mse))
        log.info("epoch %d lr %.3g train %.4g val %.4g", epoch, lr, train_mse, val_mse)
        plateau.step(val_mse if val_chunks else train_mse)
        if epoch % tcfg.periodic_every == 0:
            for group in opt.param_groups:
                group["lr"] *= tcfg.periodic_decay

    trained = OrderedDict((k, v.detach().clone()) for k, v in live.items())
    return trained, history


# -- inference ------------------------------------------------------------------------

def _chunk_starts(planes, c):
    starts = list(range(0, planes - c + 1, c))
    if planes % c:
        starts.append(planes - c)
    return starts


def predict_stack(params, cfg: NetConfig, raw: RawSimStack) -> Stack3D:
    """Run the network over a whole raw stack; output has 3x the planes at 2x lateral size.

    The stack is normalized to [0, 1] first. If the plane count is not a
    multiple of the chunk size, a final chunk is aligned to the last plane and
    only its new planes are kept. Negative outputs are truncated.
    """
    c = cfg.chunk
    if raw.planes < c:
        raise ValueError(f"stack has {raw.planes} planes, fewer than the chunk size {c}")
    norm = normalize_unit_range(raw.as_stack()).data.reshape(raw.frames.shape)
    ny, nx = raw.frame_shape
    out = np.zeros((OUT_FRAMES_PER_PLANE * raw.planes, 2 * ny, 2 * nx))
    dtype = params["head3d.w"].dtype
    with torch.no_grad():
        for start in _chunk_starts(raw.planes, c):
            x = torch.tensor(norm[start:start + c].reshape(-1, ny, nx), dtype=dtype)
            y = forward(params, cfg, x).numpy()
            out[OUT_FRAMES_PER_PLANE * start:OUT_FRAMES_PER_PLANE * (start + c)] = y
    spacing = (raw.lateral_spacing / 2, raw.lateral_spacing / 2, raw.z_spacing / OUT_FRAMES_PER_PLANE)
    return truncate_negatives(Stack3D(out, spacing))


def chunk_model(params, cfg: NetConfig):
    """Callable mapping one chunk input array to its output array."""
    def run(x):
        with torch.no_grad():
            return forward(params, cfg, torch.tensor(np.asarray(x))).double().numpy()
    return run


# -- serialization --------------------------------------------------------------------

def save_params(params, cfg: NetConfig, path):
    """Little-endian float32 payload plus a ``<path>.json`` manifest of names and shapes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"config": asdict(cfg), "tensors": [[k, list(v.shape)] for k, v in params.items()]}
    blob = b"".join(np.ascontiguousarray(v.detach().numpy(), dtype="<f4").tobytes() for v in params.values())
    path.write_bytes(blob)
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_params(path, dtype=torch.float32):
    path = Path(path)
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    cfg = NetConfig(**manifest["config"])
    blob = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = sum(int(np.prod(s)) for _, s in manifest["tensors"])
    if blob.size != expected:
        raise ValueError(f"{path}: payload holds {blob.size} values, manifest expects {expected}")
    params, offset = OrderedDict(), 0
    for name, shape in manifest["tensors"]:
        size = int(np.prod(shape))
        params[name] = torch.tensor(blob[offset:offset + size].reshape(shape).copy(), dtype=dtype)
        offset += size
    if list(params) != list(param_shapes(cfg)):
        raise ValueError(f"{path}: tensor names do not match the stored configuration")
    return params, cfg

"""Minimal differentiable network engine on numpy.

Implements exactly what the refinement networks need: 3x3 "same" convs
(stride 1 and 2), ReLU, nearest-neighbor 2x upsampling, channel concat,
masked softmax cross-entropy, SGD with momentum, and a byte-stable
checkpoint format. Double precision is the default so gradients can be
verified against central finite differences.

Two topologies share one forward pass:
  * "dual"   - separate encoders for the image and the encoded candidate
               stack, concatenated at half resolution, then decoded back to
               full-resolution class logits.
  * "single" - image encoder only; used for the downstream segmentation
               models that consume (image, annotation) training pairs.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, asdict

import numpy as np

from .core import IGNORE, NUM_CLASSES
from .seeds import make_rng

CHECKPOINT_MAGIC = b"SRNET1\n"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or parameter tensor does not match the architecture."""


class StaleCacheError(RuntimeError):
    """backward() was handed a cache from a different parameter set."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared where finite values are required."""


def check_finite(arr: np.ndarray, what: str = "tensor"):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class Architecture:
    """Channel plan for one network. kind is "dual" or "single"."""

    kind: str = "dual"
    image_channels: int = 3
    stack_channels: int = 36
    enc_mid: int = 8
    enc_out: int = 16
    dec_mid: int = 16
    dec_out: int = 8
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.kind not in ("dual", "single"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")

    @property
    def concat_channels(self) -> int:
        return self.enc_out * (2 if self.kind == "dual" else 1)


def param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Parameter tensor shapes in fixed declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}_w"] = (cout, cin, k, k)
        shapes[f"{name}_b"] = (cout,)

    conv("img_enc1", arch.image_channels, arch.enc_mid, 3)
    conv("img_enc2", arch.enc_mid, arch.enc_out, 3)
    if arch.kind == "dual":
        conv("pl_enc1", arch.stack_channels, arch.enc_mid, 3)
        conv("pl_enc2", arch.enc_mid, arch.enc_out, 3)
    conv("dec1", arch.concat_channels, arch.dec_mid, 3)
    conv("dec2", arch.dec_mid, arch.dec_out, 3)
    conv("head", arch.dec_out, arch.num_classes, 1)
    return shapes


@dataclass(frozen=True)
class NetParams:
    """All learnable tensors of one network plus its architecture.

    Treated as immutable: optimizer steps return a fresh NetParams.
    """

    arch: Architecture
    tensors: dict[str, np.ndarray]
    seed: int

    def __post_init__(self):
        expected = param_shapes(self.arch)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(
                    f"{name}: expected shape {shape}, got {self.tensors[name].shape}"
                )

    def copy(self) -> "NetParams":
        return NetParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.seed)


def init_params(
    arch: Architecture, seed: int, zero_head: bool = True, dtype=np.float64
) -> NetParams:
    """He fan-in init for conv kernels, zero biases.

    The classifier head is zero-initialized by default so the very first
    loss of a fresh network is exactly ln(num_classes).
    """
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if name == "head_w" and zero_head:
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        rng = make_rng(seed, "init", name)
        tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return NetParams(arch, tensors, seed)


# ---------------------------------------------------------------------------
# primitive layers

def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = (size + stride - 1) // stride
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[
                :, :, ky : ky + out_h * stride : stride, kx : kx + out_w * stride : stride
            ]
    return cols.reshape(n, c * k * k, out_h * out_w)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, name: str = "conv"):
    """Zero-padded "same" convolution. Returns (y, cols) with cols cached
    for the backward pass."""
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be (N, C, H, W), got {x.shape}")
    cout, cin, k, _ = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"{name}: expected {cin} input channels, got {x.shape[1]}")
    n, _, h, wd = x.shape
    out_h, pt, pb = _same_pad(h, k, stride)
    out_w, pl, pr = _same_pad(wd, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = w.reshape(cout, cin * k * k)
    y = np.matmul(wmat, cols) + b[None, :, None]
    return y.reshape(n, cout, out_h, out_w), cols


def conv2d_backward(
    x_shape: tuple[int, ...],
    cols: np.ndarray,
    w: np.ndarray,
    stride: int,
    dy: np.ndarray,
):
    """Gradients of conv2d_forward w.r.t. input, kernel and bias."""
    n, cin, h, wd = x_shape
    cout, _, k, _ = w.shape
    out_h, out_w = dy.shape[2], dy.shape[3]
    _, pt, pb = _same_pad(h, k, stride)
    _, pl, pr = _same_pad(wd, k, stride)

    dy_mat = dy.reshape(n, cout, out_h * out_w)
    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))

    wmat = w.reshape(cout, cin * k * k)
    dcols = np.matmul(wmat.T, dy_mat).reshape(n, cin, k, k, out_h, out_w)
    dxp = np.zeros((n, cin, h + pt + pb, wd + pl + pr), dtype=dy.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[
                :, :, ky : ky + out_h * stride : stride, kx : kx + out_w * stride : stride
            ] += dcols[:, :, ky, kx]
    dx = dxp[:, :, pt : pt + h, pl : pl + wd]
    return dx, dw, db


def upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# network forward / backward

@dataclass
class ForwardCache:
    params: NetParams
    acts: dict


def _conv_block(params, cache, name, x, stride, relu=True):
    w = params.tensors[f"{name}_w"]
    b = params.tensors[f"{name}_b"]
    y, cols = conv2d_forward(x, w, b, stride, name=name)
    a = np.maximum(y, 0.0) if relu else y
    cache.acts[name] = (x.shape, cols, y if relu else None)
    return a


def forward(params: NetParams, image: np.ndarray, stack: np.ndarray | None = None):
    """Run the network; returns (logits, cache).

    image: (N, image_channels, H, W); stack: (N, stack_channels, H, W) for
    the dual topology, must be omitted for the single topology. H and W
    must be divisible by 4.
    """
    arch = params.arch
    if image.ndim != 4 or image.shape[1] != arch.image_channels:
        raise ShapeError(
            f"image input must be (N, {arch.image_channels}, H, W), got {image.shape}"
        )
    h, w = image.shape[2], image.shape[3]
    if h % 4 or w % 4:
        raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")
    if arch.kind == "dual":
        if stack is None:
            raise ShapeError("dual architecture requires the encoded candidate stack")
        if stack.shape != (image.shape[0], arch.stack_channels, h, w):
            raise ShapeError(
                f"stack input must be {(image.shape[0], arch.stack_channels, h, w)}, "
                f"got {stack.shape}"
            )
    elif stack is not None:
        raise ShapeError("single architecture takes no candidate stack input")

    cache = ForwardCache(params, {})
    a1 = _conv_block(params, cache, "img_enc1", image, stride=1)
    a2 = _conv_block(params, cache, "img_enc2", a1, stride=2)
    if arch.kind == "dual":
        b1 = _conv_block(params, cache, "pl_enc1", stack, stride=1)
        b2 = _conv_block(params, cache, "pl_enc2", b1, stride=2)
        enc = np.concatenate([a2, b2], axis=1)
    else:
        enc = a2
    d1 = _conv_block(params, cache, "dec1", enc, stride=1)
    up = upsample2x(d1)
    d2 = _conv_block(params, cache, "dec2", up, stride=1)
    logits = _conv_block(params, cache, "head", d2, stride=1, relu=False)
    return logits, cache


def _conv_block_backward(params, cache, name, da, stride):
    x_shape, cols, pre = cache.acts[name]
    if pre is not None:
        da = da * (pre > 0.0)
    w = params.tensors[f"{name}_w"]
    dx, dw, db = conv2d_backward(x_shape, cols, w, stride, da)
    return dx, {f"{name}_w": dw, f"{name}_b": db}


def backward(params: NetParams, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every parameter tensor."""
    if cache.params is not params:
        raise StaleCacheError("cache does not belong to these parameters; rerun forward()")
    arch = params.arch
    grads: dict[str, np.ndarray] = {}

    dd2, g = _conv_block_backward(params, cache, "head", dlogits, 1)
    grads.update(g)
    dup, g = _conv_block_backward(params, cache, "dec2", dd2, 1)
    grads.update(g)
    dd1 = upsample2x_backward(dup)
    denc, g = _conv_block_backward(params, cache, "dec1", dd1, 1)
    grads.update(g)

    if arch.kind == "dual":
        da2 = denc[:, : arch.enc_out]
        db2 = denc[:, arch.enc_out :]
        db1, g = _conv_block_backward(params, cache, "pl_enc2", db2, 2)
        grads.update(g)
        _, g = _conv_block_backward(params, cache, "pl_enc1", db1, 1)
        grads.update(g)
    else:
        da2 = denc
    da1, g = _conv_block_backward(params, cache, "img_enc2", da2, 2)
    grads.update(g)
    _, g = _conv_block_backward(params, cache, "img_enc1", da1, 1)
    grads.update(g)
    return grads


# ---------------------------------------------------------------------------
# loss

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_ce(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over non-IGNORE pixels.

    logits: (N, C, H, W); targets: (N, H, W) integer codes, IGNORE masked
    out of both the average and the gradient. Returns (loss, dlogits).
    """
    if logits.shape[0] != targets.shape[0] or logits.shape[2:] != targets.shape[1:]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    mask = targets != IGNORE
    count = int(mask.sum())
    if count == 0:
        raise ValueError("all target pixels are IGNORE; loss is undefined")
    safe_t = np.where(mask, targets, 0).astype(np.int64)

    logp = log_softmax(logits)
    n, c, h, w = logits.shape
    ni, hi, wi = np.ix_(np.arange(n), np.arange(h), np.arange(w))
    picked = logp[ni, safe_t, hi, wi]
    loss = -(picked * mask).sum() / count

    dlogits = softmax_probs(logits)
    one_hot = np.zeros_like(dlogits)
    one_hot[ni, safe_t, hi, wi] = 1.0
    dlogits = (dlogits - one_hot) * mask[:, None].astype(logits.dtype) / count
    return float(loss), dlogits


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class SgdState:
    velocities: dict[str, np.ndarray]


def sgd_step(
    params: NetParams,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    state: SgdState | None = None,
) -> tuple[NetParams, SgdState]:
    """One SGD step: v = momentum * v + g; p -= lr * v. Functional update."""
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    if not (0.0 <= momentum < 1.0):
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if set(grads) != set(params.tensors):
        raise ShapeError("gradient names do not match parameter names")
    if state is None:
        state = SgdState({k: np.zeros_like(v) for k, v in params.tensors.items()})
    new_tensors = {}
    new_vel = {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        check_finite(g, f"gradient {name}")
        v = momentum * state.velocities[name] + g
        p_new = p - lr * v
        check_finite(p_new, f"parameter {name}")
        new_vel[name] = v
        new_tensors[name] = p_new
    return NetParams(params.arch, new_tensors, params.seed), SgdState(new_vel)


# ---------------------------------------------------------------------------
# checkpoints

def encode_checkpoint(params: NetParams) -> bytes:
    """Versioned container: magic, JSON header, raw little-endian float64."""
    names = sorted(params.tensors)
    header = {
        "format": "soilref-net",
        "version": CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "seed": params.seed,
        "dtype": "<f8",
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    for n in names:
        out.append(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> NetParams:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a soilref network checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    arch = Architecture(**header["arch"])
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(data[off : off + size], dtype="<f8").reshape(shape).copy()
        tensors[entry["name"]] = arr
        off += size
    return NetParams(arch, tensors, int(header["seed"]))


def save_checkpoint(path, params: NetParams):
    from pathlib import Path

    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path) -> NetParams:
    from pathlib import Path

    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# verification

def gradient_check(
    params: NetParams,
    image: np.ndarray,
    stack: np.ndarray | None,
    targets: np.ndarray,
    eps: float = 1e-4,
    floor: float = 1e-3,
    time_budget_s: float | None = None,
) -> float:
    """Max relative error between backprop and central finite differences.

    Every single parameter is perturbed. `floor` guards the denominator for
    near-zero gradients, where the comparison degenerates to absolute error
    (|a - n| <= tol * floor). Caveat: if a relu pre-activation lies within
    the perturbation's reach of zero, the central difference straddles the
    kink and overestimates the error; callers should check at points away
    from activation boundaries (a fixed seed makes this reproducible).
    """
    start = time.monotonic()
    logits, cache = forward(params, image, stack)
    _, dlogits = softmax_ce(logits, targets)
    grads = backward(params, cache, dlogits)

    def loss_of(p: NetParams) -> float:
        lg, _ = forward(p, image, stack)
        loss, _ = softmax_ce(lg, targets)
        return loss

    work = {k: v.copy() for k, v in params.tensors.items()}
    probe = NetParams(params.arch, work, params.seed)
    max_rel = 0.0
    for name, tensor in work.items():
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_of(probe)
            flat[i] = orig - eps
            lm = loss_of(probe)
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            ana = gflat[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            if rel > max_rel:
                max_rel = rel
            if time_budget_s is not None and time.monotonic() - start > time_budget_s:
                raise TimeoutError(f"gradient check exceeded {time_budget_s}s budget")
    return max_rel

"""Tensor runtime helpers: backward entry point, parameter store, Adam, HWC convolution
and the binary checkpoint format.

Dense tensors and reverse-mode differentiation come from PyTorch; this module pins the
contracts the rest of the package relies on (float32 parameters, named parameter
paths, explicit optimizer state, byte-exact checkpoints).
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ContractViolation, ShapeError

CKPT_MAGIC = b"GSRLCKPT"
CKPT_VERSION = 1


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reachable from ``loss``.

    A loss that does not depend on any trainable tensor leaves zero gradients on
    ``params`` rather than raising.
    """
    if loss.numel() != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.backward()
        return
    for p in params or ():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


class ParamStore:
    """Named trainable parameters plus their Adam moment buffers."""

    def __init__(self, params: Union[nn.Module, Mapping[str, Tensor]], prefix: str = ""):
        items = params.named_parameters() if isinstance(params, nn.Module) else params.items()
        self.params: dict[str, Tensor] = {}
        for name, p in items:
            path = prefix + name
            if path in self.params:
                raise ContractViolation(f"duplicate parameter path {path!r}")
            self.params[path] = p
        self.exp_avg: dict[str, Tensor] = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq: dict[str, Tensor] = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    def __len__(self):
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@torch.no_grad()
def adam_step(
    store: ParamStore,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    lrs: Optional[Mapping[str, float]] = None,
) -> None:
    """One bias-corrected Adam update of every parameter in ``store``; clears grads.

    ``lrs`` optionally overrides the learning rate per parameter path.
    """
    missing = [k for k, p in store.params.items() if p.grad is None]
    if missing:
        raise ContractViolation(f"parameter {missing[0]!r} has no gradient")
    store.step += 1
    b1, b2 = betas
    c1 = 1 - b1**store.step
    c2 = 1 - b2**store.step
    for k, p in store.params.items():
        g = p.grad
        m = store.exp_avg[k]
        v = store.exp_avg_sq[k]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        step = (lrs or {}).get(k, lr)
        p.sub_(step * (m / c1) / ((v / c2).sqrt() + eps))
        p.grad = None


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an [H, W, Cin] input with a [k, k, Cin, Cout] kernel."""
    if x.dim() != 3 or kernel.dim() != 4:
        raise ShapeError("conv2d expects input [H, W, Cin] and kernel [k, k, Cin, Cout]")
    if x.shape[2] != kernel.shape[2]:
        raise ShapeError(f"channel mismatch: input has {x.shape[2]}, kernel expects {kernel.shape[2]}")
    H, W = x.shape[:2]
    if H + 2 * padding < kernel.shape[0] or W + 2 * padding < kernel.shape[1]:
        raise ShapeError("kernel larger than padded input")
    out = F.conv2d(x.permute(2, 0, 1)[None], kernel.permute(3, 2, 0, 1), stride=stride, padding=padding)
    return out[0].permute(1, 2, 0)


def _write_str(buf: list, s: str) -> None:
    raw = s.encode("utf-8")
    buf.append(struct.pack("<I", len(raw)))
    buf.append(raw)


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, Tensor]) -> None:
    """Write ``tensors`` as: magic, u32 version, u32 count, then per record
    (u32 path length, utf-8 path, u32 ndim, u32 dims, little-endian float32 payload)."""
    buf = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4")
        _write_str(buf, name)
        buf.append(struct.pack("<I", arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(arr.tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path: Union[str, Path]) -> dict[str, Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > len(data):
                raise ValueError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape)
            out[name] = torch.from_numpy(arr.astype(np.float32))
            off += size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {off}") from exc
    return out


def module_state(module: nn.Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_state(module: nn.Module, tensors: Mapping[str, Tensor], prefix: str = "") -> None:
    own = module.state_dict()
    picked = {}
    for k in own:
        if prefix + k not in tensors:
            raise KeyError(f"checkpoint is missing {prefix + k!r}")
        picked[k] = tensors[prefix + k].to(own[k].dtype)
    module.load_state_dict(picked)

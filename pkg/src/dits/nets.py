"""Function-approximator substrate: MLPs, Adam training loop, gradient checking,
and the binary checkpoint format shared by all learned components."""

from __future__ import annotations

import hashlib
import io
import json

import numpy as np
import torch
from torch import nn


class TrainingError(RuntimeError):
    """Raised when a training run diverges (NaN/inf loss)."""


def make_mlp(in_dim: int, hidden, out_dim: int, seed: int = 0,
             zero_init_final: bool = True, dtype=torch.float32) -> nn.Sequential:
    """ReLU MLP with deterministic seeded init and a zero-initialized final layer.

    The zero final layer makes untrained regressors output exactly 0, which the
    downstream components rely on as the initialization contract.
    """
    layers: list[nn.Module] = []
    dims = [in_dim, *hidden]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for i in range(len(hidden)):
            layers += [nn.Linear(dims[i], dims[i + 1]), nn.ReLU()]
        final = nn.Linear(dims[-1], out_dim)
        if zero_init_final:
            nn.init.zeros_(final.weight)
            nn.init.zeros_(final.bias)
        layers.append(final)
    return nn.Sequential(*layers).to(dtype)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def flat_params(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def set_flat_params(module: nn.Module, vec) -> None:
    vec = torch.as_tensor(vec)
    needed = sum(p.numel() for p in module.parameters())
    if vec.numel() != needed:
        raise ValueError(f"parameter vector has {vec.numel()} entries, "
                         f"module needs {needed}")
    offset = 0
    for p in module.parameters():
        n = p.numel()
        with torch.no_grad():
            p.copy_(vec[offset:offset + n].reshape(p.shape).to(p.dtype))
        offset += n


def unflatten_params(vec: torch.Tensor, module: nn.Module) -> dict:
    """Differentiable views of a flat vector shaped like module's parameters."""
    out = {}
    offset = 0
    for name, p in module.named_parameters():
        n = p.numel()
        out[name] = vec[offset:offset + n].reshape(p.shape)
        offset += n
    if offset != vec.numel():
        raise ValueError("parameter vector length mismatch")
    return out


class FunctionalView:
    """Callable evaluating a module with parameters taken from a flat vector,
    keeping the autograd graph through the vector (for grad_check closures)."""

    def __init__(self, module: nn.Module, vec: torch.Tensor):
        self.module = module
        self.vec = vec

    def __call__(self, *args):
        return torch.func.functional_call(
            self.module, unflatten_params(self.vec, self.module), args)


def grad_check(loss_fn, params: torch.Tensor, eps: float) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` maps a flat float64 parameter vector to a scalar torch loss and
    must be deterministic. Per-coordinate relative error is
    |g_a - g_n| / max(|g_a| + |g_n|, 1), so near-zero gradients are compared
    absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = torch.as_tensor(params, dtype=torch.float64)
    p = params.clone().requires_grad_(True)
    loss = loss_fn(p)
    analytic = torch.autograd.grad(loss, p)[0].detach().numpy()

    numeric = np.zeros_like(analytic)
    base = params.detach().clone()
    for i in range(base.numel()):
        for sign in (1.0, -1.0):
            shifted = base.clone()
            shifted[i] += sign * eps
            with torch.no_grad():
                value = float(loss_fn(shifted))
            numeric[i] += sign * value
        numeric[i] /= 2 * eps
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def adam_train(module: nn.Module, make_batch, loss_fn, steps: int, lr: float,
               eval_fn=None, eval_interval: int = 0, post_step=None):
    """Generic deterministic Adam loop.

    ``make_batch(step)`` produces a batch, ``loss_fn(module, batch)`` a scalar.
    ``post_step(module)`` runs after every optimizer step (e.g. EMA updates).
    Returns (loss_history, eval_history); raises TrainingError on NaN/inf.
    """
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    losses = []
    evals = []
    for step in range(steps):
        batch = make_batch(step)
        loss = loss_fn(module, batch)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {float(loss.detach())} at step {step} "
                f"(lr={lr}, params={count_params(module)})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if post_step is not None:
            post_step(module)
        if eval_fn is not None and eval_interval and (step + 1) % eval_interval == 0:
            evals.append(float(eval_fn(module)))
    return losses, evals


# ---------------------------------------------------------------------------
# Checkpoint format: magic, JSON header line (architecture spec + norm stats
# hash), then the float32 little-endian parameter payload.
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DITSMDL1\n"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, kind: str, arch: dict, modules, stats_digest: str,
                    extra: dict | None = None) -> None:
    if isinstance(modules, nn.Module):
        modules = [modules]
    params = torch.cat([flat_params(m) for m in modules]).to(torch.float32)
    header = {
        "kind": kind,
        "arch": arch,
        "stats_digest": stats_digest,
        "n_params": int(params.numel()),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
    buf.write(params.numpy().astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (header dict, float32 parameter vector)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError("bad checkpoint magic")
    nl = blob.find(b"\n", len(CKPT_MAGIC))
    if nl < 0:
        raise CheckpointError("missing checkpoint header")
    try:
        header = json.loads(blob[len(CKPT_MAGIC):nl].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    payload = blob[nl + 1:]
    n = int(header["n_params"])
    if len(payload) != 4 * n:
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, header declares {4 * n}")
    params = torch.from_numpy(
        np.frombuffer(payload, dtype="<f4").copy())
    return header, params


def config_digest(obj) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]

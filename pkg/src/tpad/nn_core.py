"""Dense float64 substrate: MLPs, losses, Adam with warm-up/cosine schedule,
finite-difference gradient checks and a JSON checkpoint format.

Autodiff is delegated to torch; everything here runs on CPU in float64.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import DegenerateInputError, GradCheckError, ShapeError, TrainingError

DTYPE = torch.float64
ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu}


def derive_seed(master: int, *labels: object) -> int:
    """Stable 63-bit seed for a named sub-component of a run."""
    text = ":".join([str(master), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_finite(t: Tensor, where: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise ShapeError(f"non-finite values in {where}")
    return t


def uniform_init(fan_in: int, shape: Sequence[int], gen: torch.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(*shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


class Linear(nn.Module):
    """Affine map ``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, gen: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(uniform_init(d_in, (d_in, d_out), gen))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected last dim {self.d_in}, got {tuple(x.shape)}")
        return x @ self.weight + self.bias


class Mlp(nn.Module):
    """Feed-forward stack; the activation is applied to hidden layers only."""

    def __init__(self, dims: Sequence[int], gen: torch.Generator, activation: str = "tanh"):
        super().__init__()
        if len(dims) < 2:
            raise ShapeError("an MLP needs at least input and output dims")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.layers = nn.ModuleList(Linear(a, b, gen) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    def forward(self, x: Tensor) -> Tensor:
        return mlp_apply(self, x)


def mlp_apply(params: Mlp, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != params.layers[0].d_in:
        raise ShapeError(
            f"input last dim {x.shape[-1]} != first layer input dim {params.layers[0].d_in}"
        )
    act = ACTIVATIONS[params.activation]
    n = len(params.layers)
    for i, layer in enumerate(params.layers):
        x = layer(x)
        if i < n - 1:
            x = act(x)
    return x


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy over the batch and its closed-form gradient w.r.t. logits.

    ``logits`` may be a single vector with an integer label, or (B, C) with B labels.
    """
    logits = as_tensor(logits)
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    n_cls = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("one label per logit row required")
    if ((labels < 0) | (labels >= n_cls)).any():
        raise IndexError(f"label out of range for {n_cls} classes: {labels.tolist()}")
    logp = torch.log_softmax(logits, dim=-1)
    loss = -logp.gather(1, labels[:, None]).mean()
    grad = (logp.exp() - nn.functional.one_hot(labels, n_cls).to(DTYPE)) / logits.shape[0]
    grad = grad.detach()
    return loss, (grad[0] if single else grad)


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    return softmax_cross_entropy(logits, labels)[0]


def cosine_sim(a, b) -> float:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = torch.linalg.norm(a), torch.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(torch.clamp(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(x: Tensor) -> Tensor:
    """All-pairs cosine similarity of the rows of ``x``."""
    norms = torch.linalg.norm(x, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateInputError("zero-norm row in cosine similarity")
    u = x / norms
    return u @ u.T


# -- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor | None],
    lr: float | None = None,
) -> AdamState:
    """Bias-corrected adaptive-moment update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {tuple(g.shape)} != param {name!r} {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


def warmup_cosine_lr(step: int, total_steps: int, max_lr: float, warmup_steps: int) -> float:
    """Linear warm-up from ``max_lr / 100`` then cosine decay to zero."""
    start = max_lr / 100.0
    if warmup_steps > 0 and step < warmup_steps:
        return start + (max_lr - start) * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam over a set of named parameters with an optional warm-up/cosine schedule."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        total_steps: int | None = None,
        warmup_frac: float = 0.05,
    ):
        self.params = dict(params)
        self.max_lr = lr
        self.total_steps = total_steps
        self.warmup_steps = int(round(warmup_frac * total_steps)) if total_steps else 0
        self.state = AdamState(lr=lr)

    @property
    def current_lr(self) -> float:
        if self.total_steps is None:
            return self.max_lr
        return warmup_cosine_lr(self.state.step, self.total_steps, self.max_lr, self.warmup_steps)

    def step(self, loss: Tensor) -> float:
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {float(loss)}")
        names = [n for n, p in self.params.items() if p.requires_grad]
        grads = torch.autograd.grad(loss, [self.params[n] for n in names], allow_unused=True)
        adam_step(self.state, self.params, dict(zip(names, grads)), lr=self.current_lr)
        return float(loss.detach())


def named_params(*modules: tuple[str, nn.Module]) -> dict[str, Tensor]:
    out = {}
    for prefix, mod in modules:
        for name, p in mod.named_parameters():
            out[f"{prefix}.{name}"] = p
    return out


# -- verification -------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    coords_per_param: int = 6,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> float:
    """Max relative error between autograd and central finite differences.

    A random subset of coordinates of every parameter is probed. The relative
    error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    names = list(params)
    tensors = [params[n] for n in names]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise GradCheckError(f"non-finite loss at base point: {float(loss)}")
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p, g in zip(names, tensors, analytic):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(coords_per_param, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(f"non-finite loss perturbing {name}[{int(i)}]")
            numeric = (up - down) / (2 * eps)
            a = g.view(-1)[i].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, rel)
    return worst


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    """Write named tensors as JSON; float repr round-trips exactly."""
    payload = {
        "meta": dict(meta or {}),
        "tensors": {
            name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
            for name, t in sorted(tensors.items())
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    payload = json.loads(Path(path).read_text())
    tensors = {
        name: torch.tensor(rec["data"], dtype=DTYPE).reshape(rec["shape"])
        for name, rec in payload["tensors"].items()
    }
    return tensors, payload["meta"]


def module_tensors(**modules: nn.Module) -> dict[str, Tensor]:
    out = {}
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            out[f"{prefix}.{name}"] = t
    return out


def load_module_tensors(tensors: Mapping[str, Tensor], **modules: nn.Module) -> None:
    for prefix, mod in modules.items():
        sub = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        mod.load_state_dict(sub)


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]

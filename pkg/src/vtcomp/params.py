"""Parameter contract, optimizers and gradient verification.

Tensors and autodiff delegate to torch; what this module pins down is the
contract layered on top: parameters are addressed by unique dotted names,
the trainable flag is `requires_grad`, untouched frozen parameters stay
bit-identical through any number of steps, and every analytic gradient can
be audited against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn


class MissingGradError(RuntimeError):
    pass


class ObjectiveDivergedError(RuntimeError):
    pass


def named_params(model: nn.Module) -> dict[str, nn.Parameter]:
    params = dict(model.named_parameters())
    if len(params) != len(set(params)):
        raise ValueError("duplicate parameter names")
    return params


def trainable_params(model: nn.Module) -> dict[str, nn.Parameter]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def max_delta(before: dict[str, torch.Tensor], model: nn.Module,
              prefixes: tuple[str, ...] = ()) -> float:
    """Largest absolute parameter change since `before`, optionally filtered."""
    worst = 0.0
    for n, p in model.named_parameters():
        if prefixes and not any(n.startswith(pre) for pre in prefixes):
            continue
        worst = max(worst, float((p.detach() - before[n]).abs().max()))
    return worst


def assert_finite(value: torch.Tensor, what: str = "value") -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise ObjectiveDivergedError(f"{what} is not finite")
    return value


def zero_grads(params: dict[str, nn.Parameter]) -> None:
    for p in params.values():
        p.grad = None


class SGD:
    """Plain SGD with decoupled weight decay and optional momentum.

    Update per trainable parameter: p <- p - lr * buf - lr * wd * p, with
    buf the momentum-accumulated gradient. Frozen parameters are never
    touched; a trainable parameter without a gradient is an error.
    """

    def __init__(self, params: dict[str, nn.Parameter], lr: float,
                 weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._buf: dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"trainable parameter {name} has no grad")
            g = p.grad
            if self.momentum != 0.0:
                buf = self._buf.get(name)
                buf = g.clone() if buf is None else buf.mul_(self.momentum).add_(g)
                self._buf[name] = buf
                g = buf
            decay = self.lr * self.weight_decay * p if self.weight_decay else 0.0
            p -= self.lr * g + decay

    def zero_grad(self) -> None:
        zero_grads(self.params)


class AdamW:
    """AdamW with decoupled weight decay (bias-corrected first/second moments)."""

    def __init__(self, params: dict[str, nn.Parameter], lr: float,
                 weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self._step = 0
        self._m: dict[str, torch.Tensor] = {}
        self._v: dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def step(self) -> None:
        self._step += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"trainable parameter {name} has no grad")
            g = p.grad
            m = self._m.setdefault(name, torch.zeros_like(p))
            v = self._v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** self._step)
            v_hat = v / (1 - b2 ** self._step)
            decay = self.lr * self.weight_decay * p if self.weight_decay else 0.0
            p -= self.lr * m_hat / (v_hat.sqrt() + self.eps) + decay

    def zero_grad(self) -> None:
        zero_grads(self.params)


def make_optimizer(kind: str, params: dict[str, nn.Parameter], lr: float,
                   weight_decay: float = 0.0, momentum: float = 0.0):
    if kind == "sgd":
        return SGD(params, lr, weight_decay=weight_decay, momentum=momentum)
    if kind == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer: {kind}")


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    flagged: bool
    per_param: dict[str, float] = field(default_factory=dict)
    n_evals: int = 0


def grad_check(f, params: dict[str, nn.Parameter], eps: float = 1e-3,
               tol: float = 1e-3, max_elements_per_param: int | None = None) -> GradCheckReport:
    """Compare autograd gradients of the scalar objective f() against central
    finite differences, parameter element by parameter element.

    The numeric side never touches autograd, so it stays an independent
    oracle for the analytic path. Relative error per element is
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    zero_grads(trainable)
    loss = f()
    assert_finite(loss.detach(), "objective")
    loss.backward()
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in trainable.items()
    }
    zero_grads(trainable)

    report = GradCheckReport(0.0, "", False)
    with torch.no_grad():
        for name, p in trainable.items():
            flat = p.view(-1)
            n_el = flat.numel()
            if max_elements_per_param is not None and n_el > max_elements_per_param:
                stride = max(1, n_el // max_elements_per_param)
                indices = range(0, n_el, stride)
            else:
                indices = range(n_el)
            worst = 0.0
            a_flat = analytic[name].view(-1)
            for i in indices:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(assert_finite(f().detach(), "objective"))
                flat[i] = orig - eps
                f_minus = float(assert_finite(f().detach(), "objective"))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                rel = abs(float(a_flat[i]) - numeric) / max(1.0, abs(numeric))
                worst = max(worst, rel)
                report.n_evals += 2
            report.per_param[name] = worst
            if worst >= report.max_rel_err:
                report.max_rel_err = worst
                report.worst_param = name
    report.flagged = report.max_rel_err > tol
    return report


def clip_grad_norm(params: dict[str, nn.Parameter], max_norm: float) -> float:
    """Global-norm gradient clipping over the trainable set; returns the norm."""
    grads = [p.grad for p in params.values() if p.requires_grad and p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum(g.pow(2).sum() for g in grads))
    if float(total) > max_norm:
        scale = max_norm / (float(total) + 1e-12)
        for g in grads:
            g.mul_(scale)
    return float(total)

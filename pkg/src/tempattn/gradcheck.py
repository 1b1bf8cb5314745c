"""Central finite-difference gradient checks for torch modules."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn


def activation_pattern(modules: Sequence[nn.Module]) -> Callable[[Callable[[], torch.Tensor]], bytes]:
    """Returns ``probe(loss_fn)`` giving the sign pattern of every output of ``modules``.

    Used to detect a central-difference stencil that straddles a ReLU kink.
    """

    def probe(loss_fn):
        seen = []
        hooks = [m.register_forward_hook(lambda _m, _i, out: seen.append((out > 0).numpy().tobytes()))
                 for m in modules]
        try:
            loss_fn()
        finally:
            for h in hooks:
                h.remove()
        return b"".join(seen)

    return probe


@torch.no_grad()
def numeric_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float,
                     pattern=None, max_halvings: int = 6):
    """Central differences (f(p + h) - f(p - h)) / 2h for every parameter entry.

    With ``pattern`` (see :func:`activation_pattern`), h is halved while either
    stencil point lies in a different piecewise-linear region than p.
    """
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            base = pattern(loss_fn) if pattern is not None else None
            h = eps
            for _ in range(max_halvings + 1):
                flat[i] = orig + h
                up = loss_fn().item()
                same = pattern is None or pattern(loss_fn) == base
                flat[i] = orig - h
                down = loss_fn().item()
                same = same and (pattern is None or pattern(loss_fn) == base)
                flat[i] = orig
                if same:
                    break
                h /= 2
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]):
    return list(torch.autograd.grad(loss_fn(), list(params)))


def relative_error(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> float:
    """||a - b|| / max(||a||, ||b||) over all entries, in float64."""
    va = torch.cat([t.reshape(-1).double() for t in a])
    vb = torch.cat([t.reshape(-1).double() for t in b])
    denom = max(va.norm().item(), vb.norm().item(), 1e-300)
    return (va - vb).norm().item() / denom


def check_gradients(loss_fn, params, eps: float | None = None, pattern=None) -> float:
    """Relative error between autograd and central-difference gradients."""
    params = list(params)
    if eps is None:
        eps = 1e-6 if params[0].dtype == torch.float64 else 1e-3
    return relative_error(analytic_gradient(loss_fn, params), numeric_gradient(loss_fn, params, eps, pattern))

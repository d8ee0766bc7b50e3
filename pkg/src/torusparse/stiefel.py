"""Optimizer primitives for the orthonormal-basis constraint.

The basis lives on the Stiefel manifold. Ambient gradients are projected
to the tangent space, moments follow the usual Adam recursions, steps are
retracted with a sign-fixed QR factorization, and the first moment is
carried to the new tangent space by projection. The dictionary has the
much weaker unit-column constraint and gets plain projected gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def tangent_project(point: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Project an ambient gradient onto the tangent space at a Stiefel point."""
    if grad.shape != point.shape:
        raise ValueError(f"gradient shape {grad.shape} != point shape {point.shape}")
    inner = point.T @ grad
    return grad - point @ ((inner + inner.T) * 0.5)


def retract(point: np.ndarray, step: np.ndarray) -> np.ndarray:
    """QR retraction of point + step, with the R diagonal forced positive."""
    if step.shape != point.shape:
        raise ValueError(f"step shape {step.shape} != point shape {point.shape}")
    q, r = np.linalg.qr(point + step)
    diag = np.diag(r)
    scale = np.abs(point).max() + np.abs(step).max()
    if np.any(np.abs(diag) < 1e-12 * max(scale, 1.0)):
        raise np.linalg.LinAlgError("rank-deficient retraction input")
    return q * np.sign(diag)


@dataclass(eq=False)
class StiefelAdamState:
    """Adam moments for the basis; buffers match the basis shape."""

    m1: np.ndarray
    m2: np.ndarray
    lr: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, shape, lr: float) -> "StiefelAdamState":
        return cls(m1=np.zeros(shape), m2=np.zeros(shape), lr=lr)


def riemannian_adam_step(
    state: StiefelAdamState, point: np.ndarray, grad: np.ndarray
):
    """One ascent step on the manifold; returns (new state, new point).

    The raw gradient is projected, bias-corrected Adam moments produce the
    step, the step is retracted, and the first moment is re-projected at
    the new point so stale normal components never accumulate.
    """
    if not np.isfinite(grad).all():
        raise FloatingPointError("non-finite basis gradient")
    tangent = tangent_project(point, grad)
    count = state.step_count + 1
    m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * tangent
    m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * tangent * tangent
    m1_hat = m1 / (1.0 - state.beta1**count)
    m2_hat = m2 / (1.0 - state.beta2**count)
    step = state.lr * m1_hat / (np.sqrt(m2_hat) + state.eps)
    new_point = retract(point, step) if np.any(step) else point
    new_state = StiefelAdamState(
        m1=tangent_project(new_point, m1),
        m2=m2,
        lr=state.lr,
        step_count=count,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return new_state, new_point


def phi_update(dictionary: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Ascent step on the dictionary followed by column renormalization."""
    if grad.shape != dictionary.shape:
        raise ValueError(
            f"gradient shape {grad.shape} != dictionary shape {dictionary.shape}"
        )
    updated = dictionary + lr * grad
    norms = np.linalg.norm(updated, axis=0)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise ValueError(f"dictionary atom {bad} collapsed to zero norm")
    return updated / norms

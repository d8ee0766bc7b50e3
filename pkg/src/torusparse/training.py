"""Alternating inference / parameter-update training loop, plus the
plain sparse-coding baseline it is benchmarked against.

Each batch is normalized, codes are inferred per image with the angle
posterior integrated into every step, and the basis and dictionary move
along batch-averaged likelihood gradients: projected gradient with column
renormalization for the dictionary, Riemannian Adam for the basis.
Parameter updates always use the full posterior expectation of the
rotation, never a point estimate of the angles.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .inference import infer_code_batch, prox_exponential, spectral_norm
from .posterior import TorusPrior, grid_tables, posterior_grid
from .stiefel import StiefelAdamState, phi_update, riemannian_adam_step
from .torus import (
    FrequencyTable,
    TorusOperator,
    frequency_table_auto,
    rotate_pairs,
    validate_frequency_table,
)

COLUMN_NORM_TOL = 1e-10
ORTHONORMALITY_TOL = 1e-8


@dataclass(eq=False)
class ModelParams:
    """Learnable state: basis, dictionary, frequency table, and scalars."""

    basis: np.ndarray  # (D, 2L) orthonormal columns
    dictionary: np.ndarray  # (D, K) unit-norm columns
    freq: FrequencyTable
    noise_var: float
    sparsity: float
    prior: TorusPrior

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.dictionary.shape[1]

    @property
    def n_freq(self) -> int:
        return self.freq.L

    def operator(self) -> TorusOperator:
        return TorusOperator(basis=self.basis, freq=self.freq)

    def validate(self) -> None:
        d, width = self.basis.shape
        if self.freq.L < 1 or self.dictionary.shape[1] < 1:
            raise ValueError("need at least one rotation block and one atom")
        if width != 2 * self.freq.L:
            raise ValueError("basis width does not match frequency table")
        if d % 2 != 0 or width > d:
            raise ValueError("need D even and 2L <= D")
        gram_err = np.abs(self.basis.T @ self.basis - np.eye(width)).max()
        if gram_err > ORTHONORMALITY_TOL:
            raise ValueError(f"orthonormality violated (max error {gram_err:.3e})")
        col_err = np.abs(np.linalg.norm(self.dictionary, axis=0) - 1.0).max()
        if col_err > COLUMN_NORM_TOL:
            raise ValueError(f"dictionary columns not unit norm (error {col_err:.3e})")
        if self.dictionary.shape[0] != d:
            raise ValueError("dictionary rows do not match model dimension")
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")
        if self.sparsity < 0:
            raise ValueError("sparsity rate must be nonnegative")
        if self.prior.kappa.shape[0] != self.freq.L:
            raise ValueError("prior length does not match frequency table")
        validate_frequency_table(self.freq)


@dataclass(eq=False)
class TrainConfig:
    """Hyperparameters for training; defaults follow the reference setup."""

    batch_size: int = 100
    fista_steps: int = 20
    grid_size: int = 50
    epochs: int = 20
    lr_dict: float = 0.05
    lr_basis: float = 0.3
    code_init: float = 0.01
    seed: int = 0
    grad_mode: str = "approximate"
    torus_dim: int = 2
    n_freq: int = 128
    n_atoms: int = 10
    multiplicity: int = 1
    image_dim: int = 784
    noise_var: float = 0.01
    sparsity: float = 10.0
    include_zero_freq: bool = True

    def validate(self) -> None:
        positive = {
            "batch_size": self.batch_size,
            "fista_steps": self.fista_steps,
            "epochs": self.epochs,
            "lr_dict": self.lr_dict,
            "lr_basis": self.lr_basis,
            "code_init": self.code_init,
            "torus_dim": self.torus_dim,
            "n_freq": self.n_freq,
            "n_atoms": self.n_atoms,
            "multiplicity": self.multiplicity,
            "image_dim": self.image_dim,
            "noise_var": self.noise_var,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if self.sparsity < 0:
            raise ValueError("sparsity must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.grad_mode not in ("exact", "approximate"):
            raise ValueError(f"grad_mode must be exact|approximate, got {self.grad_mode!r}")
        if self.image_dim % 2 != 0:
            raise ValueError("image_dim must be even")
        if 2 * self.n_freq > self.image_dim:
            raise ValueError("2 * n_freq must not exceed image_dim")


def init_model(cfg: TrainConfig, rng_seed: int) -> ModelParams:
    """Draw the initial parameters: orthonormalized Gaussian basis,
    normalized nonnegative-uniform dictionary, uniform angle prior."""
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    raw = rng.standard_normal((cfg.image_dim, 2 * cfg.n_freq))
    q, r = np.linalg.qr(raw)
    basis = q * np.sign(np.diag(r))
    dictionary = rng.uniform(size=(cfg.image_dim, cfg.n_atoms))
    dictionary /= np.linalg.norm(dictionary, axis=0)
    freq = frequency_table_auto(
        cfg.torus_dim, cfg.n_freq, cfg.multiplicity, cfg.include_zero_freq
    )
    model = ModelParams(
        basis=basis,
        dictionary=dictionary,
        freq=freq,
        noise_var=cfg.noise_var,
        sparsity=cfg.sparsity,
        prior=TorusPrior.uniform(cfg.n_freq),
    )
    model.validate()
    return model


def dictionary_gradient(
    image: np.ndarray, code: np.ndarray, model, rbar: np.ndarray,
    mode: str = "approximate",
) -> np.ndarray:
    """Likelihood ascent gradient for the dictionary at one image."""
    image = np.asarray(image, dtype=float)
    code = np.asarray(code, dtype=float)
    if image.shape[-1] != model.dim or code.shape[-1] != model.n_atoms:
        raise ValueError("image/code shapes do not match model")
    rc, rs = rbar[0::2], rbar[1::2]
    u = (model.dictionary @ code) @ model.basis
    if mode == "exact":
        v = image @ model.basis
        back = model.basis @ (rotate_pairs(rc, rs, v, adjoint=True) - u)
    elif mode == "approximate":
        residual = image - rotate_pairs(rc, rs, u) @ model.basis.T
        back = model.basis @ rotate_pairs(rc, rs, residual @ model.basis, adjoint=True)
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    return np.outer(back, code) / model.noise_var


def basis_gradient(
    image: np.ndarray, code: np.ndarray, model, rbar: np.ndarray,
    mode: str = "approximate", grid=None,
) -> np.ndarray:
    """Ambient likelihood ascent gradient for the basis at one image.

    The approximate form treats the expected transform and expected
    residual as independent. The exact form keeps the second-moment
    rotation term, evaluated by quadrature over the supplied posterior
    grid; it exists for validation, not for routine training.
    """
    image = np.asarray(image, dtype=float)
    code = np.asarray(code, dtype=float)
    if image.shape[-1] != model.dim or code.shape[-1] != model.n_atoms:
        raise ValueError("image/code shapes do not match model")
    rc, rs = rbar[0::2], rbar[1::2]
    template = model.dictionary @ code
    u = template @ model.basis
    if mode == "approximate":
        rec = rotate_pairs(rc, rs, u) @ model.basis.T
        residual = image - rec
        back = rotate_pairs(rc, rs, residual @ model.basis, adjoint=True)
        grad = np.outer(residual, rotate_pairs(rc, rs, u)) + np.outer(template, back)
        return grad / model.noise_var
    if mode == "exact":
        if grid is None:
            raise ValueError("exact basis gradient requires the posterior grid")
        v = image @ model.basis
        cos_t, sin_t = grid_tables(model.freq, grid.N)
        rotated = rotate_pairs(cos_t, sin_t, np.broadcast_to(u, cos_t.shape[:1] + u.shape))
        second_moment = (rotated * grid.weights[:, None]).T @ rotated
        grad = (
            np.outer(template, rotate_pairs(rc, rs, v, adjoint=True))
            + np.outer(image, rotate_pairs(rc, rs, u))
            - np.outer(template, u)
            - model.basis @ second_moment
        )
        return grad / model.noise_var
    raise ValueError(f"unknown gradient mode {mode!r}")


def _batch_gradients_approx(images, codes, model, rbar):
    """Batch-mean approximate gradients; single fixed-order reductions."""
    rc, rs = rbar[:, 0::2], rbar[:, 1::2]
    coupling = model.basis.T @ model.dictionary
    u = codes @ coupling.T
    ru = rotate_pairs(rc, rs, u)
    rec = ru @ model.basis.T
    residual = images - rec
    back = rotate_pairs(rc, rs, residual @ model.basis, adjoint=True)
    templates = codes @ model.dictionary.T
    b = images.shape[0]
    grad_dict = (back @ model.basis.T).T @ codes / (b * model.noise_var)
    grad_basis = (residual.T @ ru + templates.T @ back) / (b * model.noise_var)
    mean_sq_residual = float(np.mean(np.sum(residual * residual, axis=1)))
    return grad_dict, grad_basis, mean_sq_residual


def _batch_gradients_exact(images, codes, model, post):
    grads_d = np.zeros_like(model.dictionary)
    grads_b = np.zeros_like(model.basis)
    residual_total = 0.0
    for i in range(images.shape[0]):
        grid = posterior_grid(post.eta_hat[i], model.freq, post.N)
        rbar = post.rbar[i]
        grads_d += dictionary_gradient(images[i], codes[i], model, rbar, "exact")
        grads_b += basis_gradient(images[i], codes[i], model, rbar, "exact", grid)
        rc, rs = rbar[0::2], rbar[1::2]
        u = ((model.dictionary @ codes[i]) @ model.basis)
        rec = rotate_pairs(rc, rs, u) @ model.basis.T
        residual_total += float(np.sum((images[i] - rec) ** 2))
    b = images.shape[0]
    return grads_d / b, grads_b / b, residual_total / b


def _chunk_slices(total: int, workers: int):
    workers = max(1, min(workers, total))
    bounds = np.linspace(0, total, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _infer_batch_threaded(images, model, cfg, threads: int, n_grid=None):
    """Chunked inference; results are assembled in chunk order, so a given
    thread count always reproduces the same bits regardless of scheduling."""
    slices = _chunk_slices(images.shape[0], threads)
    if len(slices) == 1:
        return infer_code_batch(images, model, cfg, n_grid=n_grid)
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        parts = list(
            pool.map(
                lambda sl: infer_code_batch(images[sl], model, cfg, n_grid=n_grid),
                slices,
            )
        )
    codes = np.concatenate([p[0] for p in parts], axis=0)
    from .posterior import BatchPosterior

    post = BatchPosterior(
        eta_hat=np.concatenate([p[1].eta_hat for p in parts], axis=0),
        rbar=np.concatenate([p[1].rbar for p in parts], axis=0),
        peak_index=np.concatenate([p[1].peak_index for p in parts], axis=0),
        n=parts[0][1].n,
        N=parts[0][1].N,
    )
    return codes, post


def train(
    model: ModelParams,
    data,
    cfg: TrainConfig,
    threads: int = 1,
    log_path: Optional[str] = None,
):
    """Run the full training loop; returns (trained model, per-batch log).

    Log records are (epoch, batch, mean squared residual, mean code L1,
    seconds); with ``log_path`` they are also appended to disk as
    tab-separated lines.
    """
    cfg.validate()
    images_all = np.asarray(data.images, dtype=float)
    if images_all.ndim != 2 or images_all.shape[0] == 0:
        raise ValueError("dataset is empty")
    if images_all.shape[1] != model.dim:
        raise ValueError(
            f"dataset images have length {images_all.shape[1]}, model needs {model.dim}"
        )
    norms = np.linalg.norm(images_all, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("dataset contains a zero image")
    images_all = images_all / norms[:, None]

    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    adam = StiefelAdamState.init(model.basis.shape, cfg.lr_basis)
    log: list[tuple] = []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(images_all.shape[0])
            for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
                tic = time.perf_counter()
                batch = images_all[order[start : start + cfg.batch_size]]
                codes, post = _infer_batch_threaded(batch, model, cfg, threads)
                if cfg.grad_mode == "exact":
                    grad_d, grad_b, residual = _batch_gradients_exact(
                        batch, codes, model, post
                    )
                else:
                    grad_d, grad_b, residual = _batch_gradients_approx(
                        batch, codes, model, post.rbar
                    )
                new_dict = phi_update(model.dictionary, grad_d, cfg.lr_dict)
                adam, new_basis = riemannian_adam_step(adam, model.basis, grad_b)
                model = replace(model, dictionary=new_dict, basis=new_basis)
                if not (
                    np.isfinite(model.basis).all()
                    and np.isfinite(model.dictionary).all()
                ):
                    raise RuntimeError(
                        f"non-finite parameters after epoch {epoch} batch {batch_idx}"
                    )
                record = (
                    epoch,
                    batch_idx,
                    residual,
                    float(np.mean(np.sum(codes, axis=1))),
                    time.perf_counter() - tic,
                )
                log.append(record)
                if sink:
                    sink.write(
                        f"{record[0]}\t{record[1]}\t{record[2]:.10g}"
                        f"\t{record[3]:.10g}\t{record[4]:.6g}\n"
                    )
    finally:
        if sink:
            sink.close()
    return model, log


@dataclass(eq=False)
class BaselineState:
    """Plain sparse-coding state: dictionary plus the code-energy history
    driving the curvature-compensated dictionary step."""

    dictionary: np.ndarray
    code_sq_history: deque = field(default_factory=lambda: deque(maxlen=300))
    eps_reg: float = 0.001


def _baseline_infer(images, dictionary, cfg):
    """Nonnegative FISTA on the identity-transform objective."""
    gram = dictionary.T @ dictionary
    lam_max = spectral_norm(gram) / cfg.noise_var
    step = 1.0 / (1.5 * lam_max)
    threshold = step * cfg.sparsity
    proj = images @ dictionary
    b, k = images.shape[0], dictionary.shape[1]
    code = np.full((b, k), cfg.code_init)
    moment = code.copy()
    t = 1.0
    for _ in range(cfg.fista_steps):
        grad = (proj - moment @ gram) / cfg.noise_var
        new_code = prox_exponential(moment + step * grad, threshold)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        moment = new_code + ((t - 1.0) / t_next) * (new_code - code)
        code, t = new_code, t_next
    return code


def train_baseline(
    data, cfg: TrainConfig, threads: int = 1, log_path: Optional[str] = None,
    state: Optional["BaselineState"] = None,
):
    """Sparse coding with identity transform and the second-order-style
    dictionary step: each atom's gradient is divided by its mean squared
    activation over the last 300 batches (plus 0.001).

    Passing ``state`` continues from an existing dictionary; otherwise the
    dictionary starts as normalized nonnegative uniform noise.
    """
    cfg.validate()
    images_all = np.asarray(data.images, dtype=float)
    if images_all.ndim != 2 or images_all.shape[0] == 0:
        raise ValueError("dataset is empty")
    norms = np.linalg.norm(images_all, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("dataset contains a zero image")
    images_all = images_all / norms[:, None]

    if state is None:
        rng = np.random.default_rng([cfg.seed, 2])
        dictionary = rng.uniform(size=(images_all.shape[1], cfg.n_atoms))
        dictionary /= np.linalg.norm(dictionary, axis=0)
        state = BaselineState(dictionary=dictionary)
    shuffle_rng = np.random.default_rng([cfg.seed, 3])
    log: list[tuple] = []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(images_all.shape[0])
            for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
                tic = time.perf_counter()
                batch = images_all[order[start : start + cfg.batch_size]]
                codes = _baseline_infer(batch, state.dictionary, cfg)
                residual = batch - codes @ state.dictionary.T
                b = batch.shape[0]
                grad = residual.T @ codes / (b * cfg.noise_var)
                state.code_sq_history.append(np.mean(codes * codes, axis=0))
                mean_sq = np.mean(np.stack(state.code_sq_history), axis=0)
                scaled = grad / (mean_sq + state.eps_reg)
                state.dictionary = phi_update(state.dictionary, scaled, cfg.lr_dict)
                if not np.isfinite(state.dictionary).all():
                    raise RuntimeError(
                        f"non-finite dictionary after epoch {epoch} batch {batch_idx}"
                    )
                record = (
                    epoch,
                    batch_idx,
                    float(np.mean(np.sum(residual * residual, axis=1))),
                    float(np.mean(np.sum(codes, axis=1))),
                    time.perf_counter() - tic,
                )
                log.append(record)
                if sink:
                    sink.write(
                        f"{record[0]}\t{record[1]}\t{record[2]:.10g}"
                        f"\t{record[3]:.10g}\t{record[4]:.6g}\n"
                    )
    finally:
        if sink:
            sink.close()
    return state, log


def baseline_model_params(
    state: BaselineState, noise_var: float, sparsity: float
) -> ModelParams:
    """Embed a baseline dictionary as a model whose transform is the identity.

    A full-rank identity basis with an all-zero frequency table makes the
    transform exactly the identity for every angle, so shared evaluation
    and checkpoint tooling apply unchanged.
    """
    d = state.dictionary.shape[0]
    if d % 2 != 0:
        raise ValueError("identity embedding needs an even image dimension")
    half = d // 2
    freq = FrequencyTable(n=1, entries=np.zeros((half, 1), dtype=np.int64), multiplicity=half)
    return ModelParams(
        basis=np.eye(d),
        dictionary=state.dictionary.copy(),
        freq=freq,
        noise_var=noise_var,
        sparsity=sparsity,
        prior=TorusPrior.uniform(half),
    )

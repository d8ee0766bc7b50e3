"""Shared fixtures and independent oracles used across the suite.

The oracles deliberately recompute quantities through a different route
than the library: posterior weights from the residual-form joint density
(the library uses the natural-parameter shortcut), dense eigendecompositions
for spectral norms, explicit index rolls for shifts.
"""

import math

import numpy as np

from torusparse import (
    FrequencyTable,
    ModelParams,
    TorusPrior,
    TrainConfig,
    TransformSpec,
    init_model,
    make_synthetic,
)
from torusparse.posterior import grid_lattice, natural_params, posterior_grid
from torusparse.torus import TWO_PI

DESK_SIDE = 16


def small_model(seed, d=12, L=3, k=3, n=1, noise_var=0.05, sparsity=10.0,
                kappa_scale=0.0):
    """Random valid model at toy dimensions."""
    cfg = TrainConfig(
        image_dim=d, n_freq=L, n_atoms=k, torus_dim=n, noise_var=noise_var,
        sparsity=sparsity,
    )
    model = init_model(cfg, seed)
    if kappa_scale > 0:
        rng = np.random.default_rng(seed + 1000)
        model.prior = TorusPrior(
            kappa=rng.uniform(0, kappa_scale, L), mu=rng.uniform(0, TWO_PI, L)
        )
    return model


def dense_rotation(freq: FrequencyTable, s) -> np.ndarray:
    """Materialized block-diagonal rotation matrix (oracle use only)."""
    s = np.asarray(s, dtype=float)
    L = freq.L
    out = np.zeros((2 * L, 2 * L))
    for l in range(L):
        theta = float(freq.entries[l] @ s)
        c, sn = math.cos(theta), math.sin(theta)
        out[2 * l, 2 * l] = c
        out[2 * l, 2 * l + 1] = -sn
        out[2 * l + 1, 2 * l] = sn
        out[2 * l + 1, 2 * l + 1] = c
    return out


def brute_posterior_weights(image, code, model, N) -> np.ndarray:
    """Normalized P(I|s,code) * P(s) over the grid, residual form."""
    lat = grid_lattice(model.freq.n, N)
    eta = natural_params(model.prior)
    template = model.dictionary @ code
    proj = model.basis.T @ template
    log_p = np.empty(lat.shape[0])
    for j, idx in enumerate(lat):
        s = TWO_PI * idx / N
        rec = model.basis @ (dense_rotation(model.freq, s) @ proj)
        theta = model.freq.entries @ s
        prior_energy = eta[0::2] @ np.cos(theta) + eta[1::2] @ np.sin(theta)
        log_p[j] = -np.sum((image - rec) ** 2) / (2 * model.noise_var) + prior_energy
    w = np.exp(log_p - log_p.max())
    return w / w.sum()


def brute_posterior_weights_fast(image, code, model, N) -> np.ndarray:
    """Vectorized residual-form oracle (same math, tolerable at n=2)."""
    lat = grid_lattice(model.freq.n, N)
    eta = natural_params(model.prior)
    theta = lat @ (model.freq.entries.T * (TWO_PI / N))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    proj = model.basis.T @ (model.dictionary @ code)
    rot = np.empty((lat.shape[0], 2 * model.freq.L))
    rot[:, 0::2] = cos_t * proj[0::2] - sin_t * proj[1::2]
    rot[:, 1::2] = sin_t * proj[0::2] + cos_t * proj[1::2]
    recs = rot @ model.basis.T
    residual_sq = np.sum((image[None, :] - recs) ** 2, axis=1)
    prior_energy = cos_t @ eta[0::2] + sin_t @ eta[1::2]
    log_p = -residual_sq / (2 * model.noise_var) + prior_energy
    w = np.exp(log_p - log_p.max())
    return w / w.sum()


def brute_log_marginal(image, code, model, N) -> float:
    """log of the grid quadrature of P(I|s,code) * P(s) ds, residual form.

    Works off the orthonormality manifold too, which matters when finite
    differences perturb the basis.
    """
    lat = grid_lattice(model.freq.n, N)
    eta = natural_params(model.prior)
    theta = lat @ (model.freq.entries.T * (TWO_PI / N))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    proj = model.basis.T @ (model.dictionary @ code)
    rot = np.empty((lat.shape[0], 2 * model.freq.L))
    rot[:, 0::2] = cos_t * proj[0::2] - sin_t * proj[1::2]
    rot[:, 1::2] = sin_t * proj[0::2] + cos_t * proj[1::2]
    recs = rot @ model.basis.T
    residual_sq = np.sum((image[None, :] - recs) ** 2, axis=1)
    prior_energy = cos_t @ eta[0::2] + sin_t @ eta[1::2]
    log_p = residual_sq / (-2 * model.noise_var) + prior_energy
    shift = log_p.max()
    d = image.shape[0]
    log_z_prior = posterior_grid(eta, model.freq, N).log_norm
    return (
        shift
        + math.log(np.exp(log_p - shift).sum())
        + model.freq.n * math.log(TWO_PI / N)
        - 0.5 * d * math.log(TWO_PI * model.noise_var)
        - log_z_prior
    )


def point_mass_grid(model, N, flat_index):
    """Posterior grid concentrated on one node (for point-mass cases)."""
    grid = posterior_grid(np.zeros(2 * model.freq.L), model.freq, N)
    weights = np.zeros_like(grid.weights)
    weights[flat_index] = 1.0
    grid.weights = weights
    return grid


def desk_templates(seed=11, side=DESK_SIDE):
    """Three positive templates with disjoint column-frequency support.

    Each sits on a shared flat base, so a single zero-rate block covers
    the common component and six rotation blocks cover the oscillations;
    a width-16 basis can then represent the cyclic-shift orbits exactly.
    """
    rng = np.random.default_rng(seed)
    bands = [(1, 2), (3, 4), (5, 6)]
    y = np.arange(side)
    x = np.arange(side)
    templates = []
    for band in bands:
        p = np.zeros((side, side))
        for w in band:
            a = np.zeros(side)
            b = np.zeros(side)
            for ky in range(3):
                a += rng.normal() * np.cos(TWO_PI * ky * y / side + rng.uniform(0, TWO_PI))
                b += rng.normal() * np.cos(TWO_PI * ky * y / side + rng.uniform(0, TWO_PI))
            p += np.outer(a, np.cos(TWO_PI * w * x / side))
            p += np.outer(b, np.sin(TWO_PI * w * x / side))
        p /= np.abs(p).max()
        templates.append(0.5 + 0.5 * p)
    return templates


def desk_config(**overrides):
    base = dict(
        batch_size=100,
        fista_steps=20,
        grid_size=50,
        epochs=20,
        lr_dict=0.05,
        lr_basis=0.1,
        code_init=0.01,
        seed=1,
        torus_dim=1,
        n_freq=8,
        n_atoms=3,
        multiplicity=1,
        image_dim=DESK_SIDE * DESK_SIDE,
        noise_var=0.01,
        sparsity=1.0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_dataset(count_per_template, seed):
    spec = TransformSpec(
        "translate2d", ((-8.0, 8.0), (0.0, 0.0)), count_per_template, cyclic=True
    )
    return make_synthetic(desk_templates(), spec, seed)


def desk_generative_model(noise_var=0.01, sparsity=1.0):
    """Hand-built model that represents the desk dataset exactly.

    For each template band frequency, the basis block spans the template's
    oscillation plane (in-phase and quadrature patterns), so applying the
    transform with angle 2*pi*dx/side reproduces a cyclic shift by dx.
    """
    side = DESK_SIDE
    templates = desk_templates()
    bands = [(1, 2), (3, 4), (5, 6)]
    x = np.arange(side)
    pair_for = {}
    for k, band in enumerate(bands):
        t = templates[k]
        for w in band:
            c = np.cos(TWO_PI * w * x / side)
            s = np.sin(TWO_PI * w * x / side)
            a = t @ c * (2.0 / side)
            b = t @ s * (2.0 / side)
            p = (np.outer(a, c) + np.outer(b, s)).ravel()
            q = (np.outer(a, s) - np.outer(b, c)).ravel()
            pair_for[w] = (p / np.linalg.norm(p), q / np.linalg.norm(q))
    flat = np.ones(side * side) / side
    nyquist = np.outer(np.ones(side), np.cos(np.pi * x)).ravel()
    nyquist /= np.linalg.norm(nyquist)
    spare_c = np.outer(np.ones(side), np.cos(TWO_PI * 7 * x / side)).ravel()
    spare_s = np.outer(np.ones(side), np.sin(TWO_PI * 7 * x / side)).ravel()
    pair_for[0] = (flat, nyquist)
    pair_for[7] = (spare_c / np.linalg.norm(spare_c),
                   spare_s / np.linalg.norm(spare_s))
    basis = np.stack(
        [vec for w in range(8) for vec in pair_for[w]], axis=1
    )
    assert np.abs(basis.T @ basis - np.eye(16)).max() < 1e-12
    atoms = np.stack([t.ravel() / np.linalg.norm(t) for t in templates], axis=1)
    freq = FrequencyTable(
        n=1, entries=np.arange(8, dtype=np.int64).reshape(-1, 1), multiplicity=1
    )
    return ModelParams(
        basis=basis, dictionary=atoms, freq=freq, noise_var=noise_var,
        sparsity=sparsity, prior=TorusPrior.uniform(8),
    )


def fit_angle_map(dx, angles, side):
    """Best gauge (sign, offset) relating pixel shifts to inferred angles.

    Returns (worst residual, sign, offset, residuals), residuals measured
    on the circle.
    """
    best = None
    for sign in (1.0, -1.0):
        predicted = sign * TWO_PI * np.asarray(dx) / side
        residual = np.asarray(angles) - predicted
        offset = math.atan2(np.sin(residual).mean(), np.cos(residual).mean())
        err = np.abs(np.angle(np.exp(1j * (residual - offset))))
        if best is None or err.max() < best[0]:
            best = (err.max(), sign, offset, err)
    return best


def dft_shift_operator(d=8, freqs=(1, 2, 3)):
    """Orthonormal harmonic basis whose transform is exactly circular shift."""
    i = np.arange(d)
    cols = []
    for k in freqs:
        cols.append(np.cos(TWO_PI * k * i / d))
        cols.append(np.sin(TWO_PI * k * i / d))
    basis = np.stack(cols, axis=1)
    basis /= np.linalg.norm(basis, axis=0)
    freq = FrequencyTable(
        n=1, entries=np.array([[k] for k in freqs], dtype=np.int64), multiplicity=1
    )
    return basis, freq


def bandlimit(x: np.ndarray, freqs=(1, 2, 3)) -> np.ndarray:
    """Project a circular signal onto the given harmonics (oracle side)."""
    d = len(x)
    out = np.zeros_like(x, dtype=float)
    i = np.arange(d)
    for k in freqs:
        c = np.cos(TWO_PI * k * i / d)
        s = np.sin(TWO_PI * k * i / d)
        out += (x @ c) / (c @ c) * c + (x @ s) / (s @ s) * s
    return out

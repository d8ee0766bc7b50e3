import numpy as np
import pytest
from dataclasses import replace

import torusparse as tp
from torusparse.posterior import (
    expected_rotation,
    posterior_grid,
    posterior_natural_params,
)
from torusparse.training import (
    BaselineState,
    _batch_gradients_approx,
    basis_gradient,
    dictionary_gradient,
    init_model,
    train,
    train_baseline,
)

from conftest import (
    brute_log_marginal,
    desk_config,
    desk_dataset,
    point_mass_grid,
    small_model,
)


def tiny_config(**overrides):
    base = dict(batch_size=8, fista_steps=6, grid_size=12, epochs=2,
                lr_dict=0.05, lr_basis=0.05, seed=3, torus_dim=1, n_freq=3,
                n_atoms=3, image_dim=16, noise_var=0.05, sparsity=0.5)
    base.update(overrides)
    return tp.TrainConfig(**base)


def tiny_dataset(seed=0, count=24, d=16):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.05, 1.0, size=(count, d))
    return tp.Dataset(images=images, side=4)


class TestInitModel:
    def test_invariants_and_shapes(self):
        cfg = tiny_config()
        model = init_model(cfg, 7)
        model.validate()
        assert model.basis.shape == (16, 6)
        assert model.dictionary.shape == (16, 3)
        assert (model.dictionary >= 0).all()

    def test_bitwise_determinism(self):
        cfg = tiny_config()
        a = init_model(cfg, 11)
        b = init_model(cfg, 11)
        assert a.basis.tobytes() == b.basis.tobytes()
        assert a.dictionary.tobytes() == b.dictionary.tobytes()

    def test_single_atom(self):
        cfg = tiny_config(image_dim=4, n_freq=1, n_atoms=1)
        model = init_model(cfg, 0)
        assert model.dictionary.shape == (4, 1)
        assert abs(np.linalg.norm(model.dictionary[:, 0]) - 1) < 1e-12

    def test_dimension_constraints(self):
        with pytest.raises(ValueError):
            init_model(tiny_config(image_dim=15), 0)
        with pytest.raises(ValueError):
            init_model(tiny_config(image_dim=4, n_freq=3), 0)


class TestDictionaryGradient:
    def test_zero_code_gives_zero(self):
        model = small_model(0)
        rbar = np.zeros(2 * model.n_freq)
        grad = dictionary_gradient(
            np.ones(model.dim), np.zeros(model.n_atoms), model, rbar
        )
        assert np.abs(grad).max() == 0.0

    def test_modes_agree_at_point_mass(self):
        model = small_model(1, d=10, L=2, k=3, n=1)
        rng = np.random.default_rng(2)
        image = rng.standard_normal(10)
        code = rng.uniform(0, 1, 3)
        rbar = expected_rotation(point_mass_grid(model, 24, 7), model.freq)
        exact = dictionary_gradient(image, code, model, rbar, "exact")
        approx = dictionary_gradient(image, code, model, rbar, "approximate")
        assert np.abs(exact - approx).max() < 1e-10

    def test_exact_matches_finite_differences(self):
        model = small_model(3, d=12, L=3, k=3, n=1, noise_var=0.05)
        rng = np.random.default_rng(4)
        image = rng.standard_normal(12)
        image /= np.linalg.norm(image)
        code = rng.uniform(0.2, 1.0, 3)
        n_grid = 24
        grid = posterior_grid(
            posterior_natural_params(image, code, model), model.freq, n_grid
        )
        rbar = expected_rotation(grid, model.freq)
        grad = dictionary_gradient(image, code, model, rbar, "exact")
        h = 1e-5
        fd = np.zeros_like(grad)
        for i in range(12):
            for j in range(3):
                bump = np.zeros_like(model.dictionary)
                bump[i, j] = h
                up = replace(model, dictionary=model.dictionary + bump)
                down = replace(model, dictionary=model.dictionary - bump)
                fd[i, j] = (
                    tp.log_likelihood(image, code, up, n_grid)
                    - tp.log_likelihood(image, code, down, n_grid)
                ) / (2 * h)
        assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4


class TestBasisGradient:
    def test_zero_code_gives_zero(self):
        model = small_model(5)
        rbar = np.zeros(2 * model.n_freq)
        grad = basis_gradient(np.ones(model.dim), np.zeros(model.n_atoms), model, rbar)
        assert np.abs(grad).max() == 0.0

    def test_shapes(self):
        model = small_model(6, d=14, L=3, k=2, n=2)
        rng = np.random.default_rng(7)
        rbar = expected_rotation(point_mass_grid(model, 8, 3), model.freq)
        grad = basis_gradient(rng.standard_normal(14), rng.uniform(0, 1, 2),
                              model, rbar)
        assert grad.shape == (14, 6)

    def test_modes_agree_at_point_mass(self):
        model = small_model(8, d=10, L=2, k=3, n=1)
        rng = np.random.default_rng(9)
        image = rng.standard_normal(10)
        code = rng.uniform(0, 1, 3)
        grid = point_mass_grid(model, 24, 13)
        rbar = expected_rotation(grid, model.freq)
        exact = basis_gradient(image, code, model, rbar, "exact", grid)
        approx = basis_gradient(image, code, model, rbar, "approximate")
        assert np.abs(exact - approx).max() < 1e-10

    def test_exact_matches_finite_differences_at_point_mass(self):
        # FD differentiates the residual-form marginal: the closed-form
        # marginal uses basis orthonormality, which off-manifold probes break
        model = small_model(10, d=12, L=3, k=3, n=1, noise_var=0.03)
        rng = np.random.default_rng(11)
        n_grid = 24
        node = 17
        s_star = 2 * np.pi * node / n_grid
        template = model.dictionary @ np.array([0.9, 0.1, 0.3])
        image = tp.apply_transform(model.operator(), [s_star], template)
        image += 1e-3 * rng.standard_normal(12)
        code = np.array([0.9, 0.1, 0.3])
        # tiny noise variance sharpens the posterior onto the node
        sharp = replace(model, noise_var=3e-5)
        grid = posterior_grid(
            posterior_natural_params(image, code, sharp), sharp.freq, n_grid
        )
        assert grid.weights.max() > 1 - 1e-9
        rbar = expected_rotation(grid, sharp.freq)
        grad = basis_gradient(image, code, sharp, rbar, "exact", grid)
        h = 1e-5
        fd = np.zeros_like(grad)
        for i in range(12):
            for j in range(6):
                bump = np.zeros_like(sharp.basis)
                bump[i, j] = h
                fd[i, j] = (
                    brute_log_marginal(image, code, replace(sharp, basis=sharp.basis + bump), n_grid)
                    - brute_log_marginal(image, code, replace(sharp, basis=sharp.basis - bump), n_grid)
                ) / (2 * h)
        assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4


class TestTrain:
    def test_bitwise_deterministic(self):
        cfg = tiny_config()
        data = tiny_dataset()
        runs = []
        for _ in range(2):
            model = init_model(cfg, cfg.seed)
            trained, _ = train(model, data, cfg)
            runs.append(trained)
        assert runs[0].basis.tobytes() == runs[1].basis.tobytes()
        assert runs[0].dictionary.tobytes() == runs[1].dictionary.tobytes()

    def test_invariants_after_training(self):
        cfg = tiny_config()
        model = init_model(cfg, cfg.seed)
        trained, log = train(model, tiny_dataset(), cfg)
        trained.validate()
        assert len(log) == cfg.epochs * 3  # 24 images / batch 8

    def test_rejects_empty_and_mismatched_data(self):
        cfg = tiny_config()
        model = init_model(cfg, 0)
        with pytest.raises(ValueError):
            train(model, tp.Dataset(images=np.empty((0, 16)), side=4), cfg)
        with pytest.raises(ValueError):
            train(model, tp.Dataset(images=np.ones((4, 4)), side=2), cfg)

    def test_zero_image_rejected(self):
        cfg = tiny_config()
        model = init_model(cfg, 0)
        images = tiny_dataset().images.copy()
        images[3] = 0.0
        with pytest.raises(ValueError, match="zero image"):
            train(model, tp.Dataset(images=images, side=4), cfg)

    def test_batch_gradient_order_independence(self):
        model = small_model(12, d=12, L=3, k=3, n=1, sparsity=0.5)
        cfg = tp.TrainConfig(image_dim=12, n_freq=3, n_atoms=3, torus_dim=1,
                             fista_steps=5, grid_size=12, noise_var=0.05,
                             sparsity=0.5)
        rng = np.random.default_rng(13)
        images = rng.uniform(0.05, 1, (16, 12))
        images /= np.linalg.norm(images, axis=1, keepdims=True)
        codes, post = tp.infer_code_batch(images, model, cfg)
        gd, gb, _ = _batch_gradients_approx(images, codes, model, post.rbar)
        perm = rng.permutation(16)
        gd_p, gb_p, _ = _batch_gradients_approx(
            images[perm], codes[perm], model, post.rbar[perm]
        )
        assert np.linalg.norm(gd - gd_p) / np.linalg.norm(gd) < 1e-10
        assert np.linalg.norm(gb - gb_p) / np.linalg.norm(gb) < 1e-10

    def test_batched_gradients_match_per_image_ops(self):
        model = small_model(14, d=12, L=3, k=3, n=1, sparsity=0.5)
        cfg = tp.TrainConfig(image_dim=12, n_freq=3, n_atoms=3, torus_dim=1,
                             fista_steps=5, grid_size=12, noise_var=0.05,
                             sparsity=0.5)
        rng = np.random.default_rng(15)
        images = rng.uniform(0.05, 1, (6, 12))
        images /= np.linalg.norm(images, axis=1, keepdims=True)
        codes, post = tp.infer_code_batch(images, model, cfg)
        gd, gb, _ = _batch_gradients_approx(images, codes, model, post.rbar)
        gd_ref = np.mean(
            [dictionary_gradient(images[i], codes[i], model, post.rbar[i])
             for i in range(6)], axis=0)
        gb_ref = np.mean(
            [basis_gradient(images[i], codes[i], model, post.rbar[i])
             for i in range(6)], axis=0)
        np.testing.assert_allclose(gd, gd_ref, atol=1e-12)
        np.testing.assert_allclose(gb, gb_ref, atol=1e-12)

    def test_threads_reproducible(self):
        cfg = tiny_config()
        data = tiny_dataset()
        outs = []
        for _ in range(2):
            model = init_model(cfg, cfg.seed)
            trained, _ = train(model, data, cfg, threads=2)
            outs.append(trained.basis.tobytes() + trained.dictionary.tobytes())
        assert outs[0] == outs[1]

    def test_exact_mode_runs(self):
        cfg = tiny_config(grad_mode="exact", epochs=1)
        model = init_model(cfg, 1)
        trained, log = train(model, tiny_dataset(count=8), cfg)
        trained.validate()
        assert len(log) == 1

    def test_log_format_on_disk(self, tmp_path):
        cfg = tiny_config(epochs=1)
        model = init_model(cfg, 2)
        path = tmp_path / "train.log"
        _, log = train(model, tiny_dataset(), cfg, log_path=str(path))
        lines = path.read_text().strip().split("\n")
        assert len(lines) == len(log)
        first = lines[0].split("\t")
        assert len(first) == 5
        assert first[0] == "0" and first[1] == "0"
        assert float(first[2]) == pytest.approx(log[0][2])


class TestTrainBaseline:
    def test_trivially_codable_data_reaches_zero_residual(self):
        # orthonormal starting dictionary, one atom active per image, no
        # sparsity pressure: residual must collapse
        rng = np.random.default_rng(16)
        d = 4
        images = np.zeros((32, d))
        for i in range(32):
            images[i, i % d] = rng.uniform(0.5, 1.5)
        data = tp.Dataset(images=images, side=2)
        cfg = tp.TrainConfig(batch_size=8, fista_steps=40, grid_size=8, epochs=6,
                             lr_dict=0.1, torus_dim=1, n_freq=2, n_atoms=d,
                             image_dim=d, noise_var=0.01, sparsity=0.0, seed=5)
        state = BaselineState(dictionary=np.eye(d))
        state, log = train_baseline(data, cfg, state=state)
        assert log[-1][2] < 1e-6

    def test_column_norms_after_every_update(self):
        cfg = tiny_config(epochs=1)
        state, _ = train_baseline(tiny_dataset(), cfg)
        np.testing.assert_allclose(
            np.linalg.norm(state.dictionary, axis=0), 1.0, atol=1e-12
        )

    def test_first_batch_divisor_uses_current_batch(self):
        rng = np.random.default_rng(17)
        images = rng.uniform(0.05, 1, (8, 16))
        data = tp.Dataset(images=images, side=4)
        cfg = tiny_config(batch_size=8, epochs=1)
        state, _ = train_baseline(data, cfg)
        assert len(state.code_sq_history) == 1

    def test_history_ring_buffer_capped(self):
        state = BaselineState(dictionary=np.eye(4))
        for i in range(400):
            state.code_sq_history.append(np.full(4, float(i)))
        assert len(state.code_sq_history) == 300
        assert state.code_sq_history[0][0] == 100.0

    def test_deterministic(self):
        cfg = tiny_config()
        data = tiny_dataset()
        a, _ = train_baseline(data, cfg)
        b, _ = train_baseline(data, cfg)
        assert a.dictionary.tobytes() == b.dictionary.tobytes()


class TestBaselineEmbedding:
    def test_identity_transform_exact(self):
        rng = np.random.default_rng(18)
        state = BaselineState(dictionary=np.linalg.qr(rng.standard_normal((8, 3)))[0])
        state.dictionary /= np.linalg.norm(state.dictionary, axis=0)
        model = tp.baseline_model_params(state, 0.01, 10.0)
        model.validate()
        op = model.operator()
        x = rng.standard_normal(8)
        for s in rng.uniform(0, 2 * np.pi, 5):
            np.testing.assert_array_equal(tp.apply_transform(op, [s], x), x)


@pytest.mark.parametrize("epochs", [3])
def test_residual_improves_on_desk_subset(epochs):
    data = desk_dataset(count_per_template=120, seed=21)
    cfg = desk_config(epochs=epochs, batch_size=60)
    model = init_model(cfg, cfg.seed)
    trained, log = train(model, data, cfg)
    first = np.mean([r[2] for r in log if r[0] == 0])
    last = np.mean([r[2] for r in log if r[0] == epochs - 1])
    assert last < first


def test_non_finite_parameters_abort_with_batch_index():
    # overflow the dictionary step so the parameters go non-finite
    cfg = tiny_config(lr_dict=1e300, noise_var=1e-12, epochs=1)
    model = init_model(cfg, 0)
    with np.errstate(all="ignore"):
        with pytest.raises(RuntimeError, match="batch 0"):
            train(model, tiny_dataset(), cfg)


def test_two_dimensional_training_end_to_end():
    # 12x12 images under cyclic 2D translation; templates use disjoint
    # 2D frequency pairs over a shared flat base, as in the 1D desk setup
    from torusparse.torus import TWO_PI

    side = 12
    rng = np.random.default_rng(11)
    bands = [[(1, 0), (0, 1)], [(1, 1), (2, 0)], [(0, 2), (1, -1)]]
    xs = np.arange(side)
    templates = []
    for band in bands:
        p = np.zeros((side, side))
        for kx, ky in band:
            phase = rng.uniform(0, TWO_PI)
            rr, cc = np.meshgrid(xs, xs, indexing="ij")
            p += rng.uniform(0.5, 1.0) * np.cos(
                TWO_PI * (kx * cc + ky * rr) / side + phase
            )
        p /= np.abs(p).max()
        templates.append(0.5 + 0.5 * p)
    spec = tp.TransformSpec("translate2d", ((-6.0, 6.0), (-6.0, 6.0)), 400,
                            cyclic=True)
    data = tp.make_synthetic(templates, spec, seed=5)
    test = tp.make_synthetic(
        templates,
        tp.TransformSpec("translate2d", ((-6.0, 6.0), (-6.0, 6.0)), 30, cyclic=True),
        seed=99,
    )
    test_images = tp.normalize_batch(test.images)
    cfg = tp.TrainConfig(batch_size=60, fista_steps=20, grid_size=16, epochs=8,
                         lr_dict=0.05, lr_basis=0.1, code_init=0.01, seed=1,
                         torus_dim=2, n_freq=7, n_atoms=3, multiplicity=1,
                         image_dim=side * side, noise_var=0.01, sparsity=1.0)
    model = init_model(cfg, cfg.seed)
    model, log = train(model, data, cfg)
    recons = tp.reconstruct_batch(test_images, model, cfg, n_grid=32)
    model_snr = tp.snr(test_images, recons)
    state, _ = train_baseline(data, cfg)
    baseline = tp.baseline_model_params(state, cfg.noise_var, cfg.sparsity)
    baseline_snr = tp.snr(
        test_images, tp.reconstruct_batch(test_images, baseline, cfg, n_grid=32)
    )
    assert model_snr > 3.0 * baseline_snr
    assert model_snr > 8.0

import math

import numpy as np
import pytest

from fame.data import build_facet_table, pseudo_embed
from fame.numerics import (
    GRAD_CHECK_DTYPE,
    Param,
    Rng,
    adam_step,
    finite_difference_gradient,
    relative_gradient_error,
)
from fame.pretrain import (
    BatchError,
    FacetMismatchError,
    PretrainConfig,
    ProjectorConfig,
    SamplerError,
    alternating_pretrain,
    build_mask,
    encode_backward,
    encode_forward,
    encode_items,
    export_item_embeddings,
    init_projector,
    pk_sample,
    project_backward,
    project_facet,
    project_forward,
    supcon_loss,
)


def make_projector(input_dim=6, output_dim=4, heads=2, dtype=np.float32, seed=0):
    config = ProjectorConfig(input_dim=input_dim, output_dim=output_dim, num_heads=heads)
    return config, init_projector(config, Rng(seed), dtype=dtype)


def planted_items(num_items=40, classes=4, dim=16, seed=1):
    """Items whose pseudo-embeddings cluster by two independent facet labels."""
    label_a = [i % classes + 1 for i in range(num_items)]
    label_b = [(i // (num_items // classes)) % classes + 1 for i in range(num_items)]
    emb = np.stack(
        [
            pseudo_embed(f"alpha{a} alpha{a} beta{b}", dim, seed)
            for a, b in zip(label_a, label_b)
        ]
    )
    table = build_facet_table(
        ["alpha", "beta"], [[f"a{v}" for v in label_a], [f"b{v}" for v in label_b]]
    )
    return emb.astype(np.float64), table


class TestEncode:
    def test_zero_params_zero_output(self):
        config, params = make_projector()
        params.w_shared.value[...] = 0.0
        out = encode_items(np.ones((3, 6), dtype=np.float32), params)
        np.testing.assert_array_equal(out, 0.0)

    def test_negative_preactivations_clipped(self):
        config, params = make_projector()
        params.w_shared.value[...] = -1.0
        params.b_shared.value[...] = 0.0
        out = encode_items(np.ones((2, 6), dtype=np.float32), params)
        np.testing.assert_array_equal(out, 0.0)

    def test_hand_case(self):
        config, params = make_projector(input_dim=1, output_dim=2, heads=1)
        params.w_shared.value[...] = np.array([[2.0, -3.0]], dtype=np.float32)
        params.b_shared.value[...] = np.array([0.5, 0.5], dtype=np.float32)
        out = encode_items(np.array([[1.0]], dtype=np.float32), params)
        np.testing.assert_allclose(out, [[2.5, 0.0]], atol=1e-7)


class TestProjectFacet:
    def test_unit_norm(self):
        config, params = make_projector()
        hidden = Rng(2).normal((5, 4), dtype=np.float32)
        z, _ = project_forward(hidden, params, 0)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)

    def test_scale_invariance(self):
        config, params = make_projector(dtype=np.float64)
        hidden = Rng(3).normal((3, 4), dtype=np.float64)
        z1, _ = project_forward(hidden, params, 1)
        params.head_w[1].value *= 5.0
        params.head_b[1].value *= 5.0
        z2, _ = project_forward(hidden, params, 1)
        np.testing.assert_allclose(z1, z2, atol=1e-6)

    def test_pythagorean_case(self):
        config, params = make_projector(input_dim=1, output_dim=4, heads=2, dtype=np.float64)
        params.head_w[0].value[...] = 0.0
        params.head_w[0].value[0] = np.array([3.0, 4.0])
        params.head_b[0].value[...] = 0.0
        hidden = np.array([1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(project_facet(hidden, params, 0), [0.6, 0.8], atol=1e-9)

    def test_zero_vector_does_not_divide_by_zero(self):
        config, params = make_projector()
        params.head_w[0].value[...] = 0.0
        params.head_b[0].value[...] = 0.0
        z = project_facet(np.ones(4, dtype=np.float32), params, 0)
        np.testing.assert_array_equal(z, 0.0)


class TestBuildMask:
    def test_hand_case(self):
        np.testing.assert_array_equal(
            build_mask([1, 1, 2]), [[0, 1, 0], [1, 0, 0], [0, 0, 0]]
        )

    def test_all_distinct(self):
        np.testing.assert_array_equal(build_mask([5, 6, 7]), np.zeros((3, 3), dtype=int))

    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 3, size=10)
        m = build_mask(labels)
        np.testing.assert_array_equal(m, m.T)
        np.testing.assert_array_equal(np.diag(m), 0)


def oracle_supcon(z, labels, tau):
    """Literal double-loop evaluation of the batch objective."""
    b = len(labels)
    total, count = 0.0, 0
    for i in range(b):
        positives = [p for p in range(b) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        count += 1
        acc = 0.0
        for p in positives:
            num = math.exp(float(z[i] @ z[p]) / tau)
            den = sum(math.exp(float(z[i] @ z[a]) / tau) for a in range(b) if a != i)
            acc += math.log(num / den)
        total += -acc / len(positives)
    return total / count if count else 0.0


class TestSupConLoss:
    def test_identical_rows_single_class(self):
        z = np.tile(np.array([1.0, 0.0]), (4, 1))
        loss, _ = supcon_loss(z, [7, 7, 7, 7], tau=1.0)
        assert abs(loss - math.log(3.0)) <= 1e-5

    def test_orthogonal_invariance(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(6, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        labels = [0, 0, 1, 1, 2, 2]
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        loss_a, _ = supcon_loss(z, labels, tau=0.7)
        loss_b, _ = supcon_loss(z @ q, labels, tau=0.7)
        assert abs(loss_a - loss_b) <= 1e-6

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            b = int(rng.integers(2, 9))
            z = rng.normal(size=(b, 3))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            labels = rng.integers(0, 3, size=b).tolist()
            tau = float(rng.uniform(0.3, 1.5))
            loss, _ = supcon_loss(z, labels, tau)
            assert abs(loss - oracle_supcon(z, labels, tau)) <= 1e-6

    def test_orphan_anchors_contribute_nothing(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(3, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        loss, _ = supcon_loss(z, [1, 1, 2], tau=1.0)
        assert abs(loss - oracle_supcon(z, [1, 1, 2], 1.0)) <= 1e-9
        # no positives at all: loss and gradient are identically zero
        loss0, grad0 = supcon_loss(z, [1, 2, 3], tau=1.0)
        assert loss0 == 0.0
        np.testing.assert_array_equal(grad0, 0.0)

    def test_small_batch_rejected(self):
        with pytest.raises(BatchError):
            supcon_loss(np.ones((1, 2)), [0], tau=1.0)

    def test_gradient_matches_finite_differences(self):
        rng = Rng(8)
        z = Param.of(rng.normal((5, 3), dtype=GRAD_CHECK_DTYPE))
        labels = [0, 0, 1, 1, 0]

        def forward():
            loss, _ = supcon_loss(z.value, labels, tau=0.8)
            return loss

        _, analytic = supcon_loss(z.value, labels, tau=0.8)
        (numeric,) = finite_difference_gradient(forward, [z], h=1e-5)
        assert relative_gradient_error([analytic], [numeric]) <= 1e-4


class TestPkSampler:
    def test_batch_shape_guarantee(self):
        labels = np.array([c for c in range(1, 7) for _ in range(10)])  # 6 classes x 10
        batches = pk_sample(labels, p_classes=4, k_per_class=8, rng=Rng(9))
        for batch in batches:
            assert len(batch) == 32
            batch_labels = labels[batch]
            values, counts = np.unique(batch_labels, return_counts=True)
            assert len(values) == 4
            np.testing.assert_array_equal(counts, 8)
            # within a batch, class members are drawn without replacement
            assert len(np.unique(batch)) == 32

    def test_under_k_class_never_sampled(self):
        labels = np.array([1] * 8 + [2] * 8 + [3] * 8 + [4] * 7)  # class 4 has K-1
        batches = pk_sample(labels, p_classes=2, k_per_class=8, rng=Rng(10))
        for batch in batches:
            assert 4 not in labels[batch]

    def test_too_few_classes(self):
        labels = np.array([1] * 8 + [2] * 8 + [3] * 8)
        with pytest.raises(SamplerError, match="brand"):
            pk_sample(labels, p_classes=4, k_per_class=8, rng=Rng(11), facet_name="brand")

    def test_fair_epoch_covers_all_valid_classes(self):
        rng = np.random.default_rng(12)
        labels = np.array([c for c in range(1, 10) for _ in range(6)])
        for seed in range(10):
            batches = pk_sample(labels, p_classes=4, k_per_class=4, rng=Rng(seed))
            seen = set()
            for batch in batches:
                seen.update(labels[batch].tolist())
            assert seen == set(range(1, 10))

    def test_sentinel_excluded(self):
        labels = np.array([0] * 20 + [1] * 8 + [2] * 8)
        batches = pk_sample(labels, p_classes=2, k_per_class=4, rng=Rng(13))
        for batch in batches:
            assert 0 not in labels[batch]

    def test_every_anchor_has_k_minus_one_positives(self):
        labels = np.array([c for c in range(1, 7) for _ in range(10)])
        for batch in pk_sample(labels, p_classes=4, k_per_class=8, rng=Rng(21)):
            mask = build_mask(labels[batch])
            np.testing.assert_array_equal(mask.sum(axis=1), 7)


class TestAlternatingPretrain:
    def test_inactive_head_frozen_during_step(self):
        emb, table = planted_items()
        config, params = make_projector(input_dim=16, output_dim=8, heads=2, dtype=np.float64)
        before = params.head_w[1].value.copy()
        # one manual step with head 0 active, exactly as the trainer does it
        batch = pk_sample(table.labels[0], 2, 4, Rng(14))[0]
        hidden, enc_cache = encode_forward(emb[batch], params)
        z, proj_cache = project_forward(hidden, params, 0)
        _, d_z = supcon_loss(z, table.labels[0][batch], tau=0.1)
        d_hidden = project_backward(d_z, proj_cache, params, 0)
        encode_backward(d_hidden, enc_cache, params)
        for _, p in list(params.shared_params()) + list(params.head_params(0)):
            adam_step(p, lr=0.001)
        assert params.head_w[1].value.tobytes() == before.tobytes()
        assert np.any(params.head_w[0].value != 0) and params.head_w[0].step_count == 1
        assert params.w_shared.step_count == 1

    def test_probe_loss_drops_on_planted_data(self):
        emb, table = planted_items()
        pconfig, params = make_projector(input_dim=16, output_dim=8, heads=2, dtype=np.float64)
        tconfig = PretrainConfig(tau=0.1, p_classes=2, k_per_class=4, epochs=30, seed=5)

        probe = pk_sample(table.labels[0], 2, 4, Rng(99))[0]

        def probe_loss():
            hidden, _ = encode_forward(emb[probe], params)
            z, _ = project_forward(hidden, params, 0)
            loss, _ = supcon_loss(z, table.labels[0][probe], tau=tconfig.tau)
            return loss

        before = probe_loss()
        alternating_pretrain(emb, table, params, tconfig)
        after = probe_loss()
        assert after < before

    def test_deterministic_given_seed(self):
        emb, table = planted_items()
        tconfig = PretrainConfig(tau=0.1, p_classes=2, k_per_class=4, epochs=3, seed=7)
        results = []
        for _ in range(2):
            _, params = make_projector(input_dim=16, output_dim=8, heads=2, dtype=np.float64, seed=3)
            alternating_pretrain(emb, table, params, tconfig)
            results.append(b"".join(p.value.tobytes() for _, p in params.named_params()))
        assert results[0] == results[1]

    def test_facet_mismatch_rejected(self):
        emb, table = planted_items()
        _, params = make_projector(input_dim=16, output_dim=9, heads=3)
        with pytest.raises(FacetMismatchError):
            alternating_pretrain(emb, table, params, PretrainConfig(epochs=1))


class TestExport:
    def test_slice_norms_and_row_norms(self):
        emb, _ = planted_items()
        config, params = make_projector(input_dim=16, output_dim=8, heads=2, dtype=np.float64)
        out = export_item_embeddings(params, emb)
        assert out.shape == (emb.shape[0], 8)
        for h in range(2):
            norms = np.linalg.norm(out[:, h * 4 : (h + 1) * 4], axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-5)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), math.sqrt(2.0), atol=1e-5)

    def test_matches_per_head_projection(self):
        emb, _ = planted_items(num_items=5)
        config, params = make_projector(input_dim=16, output_dim=4, heads=2, dtype=np.float64)
        out = export_item_embeddings(params, emb)
        hidden, _ = encode_forward(emb, params)
        for h in range(2):
            z, _ = project_forward(hidden, params, h)
            np.testing.assert_allclose(out[:, h * 2 : (h + 1) * 2], z, atol=1e-6)


class TestProjectorGradients:
    def test_supcon_through_projector_matches_finite_differences(self):
        emb, table = planted_items(num_items=12, dim=6)
        config, params = make_projector(input_dim=6, output_dim=4, heads=2, dtype=GRAD_CHECK_DTYPE, seed=21)
        rng = Rng(22)
        for _, p in params.named_params():
            p.value[...] = rng.normal(p.value.shape, std=0.6, dtype=GRAD_CHECK_DTYPE)
        batch = np.arange(6)
        labels = table.labels[0][batch]
        head = 1

        def forward():
            hidden, _ = encode_forward(emb[batch], params)
            z, _ = project_forward(hidden, params, head)
            loss, _ = supcon_loss(z, labels, tau=0.5)
            return loss

        named = [("w_shared", params.w_shared), ("b_shared", params.b_shared)] + list(
            params.head_params(head)
        )
        for _, p in named:
            p.zero_grad()
        hidden, enc_cache = encode_forward(emb[batch], params)
        z, proj_cache = project_forward(hidden, params, head)
        _, d_z = supcon_loss(z, labels, tau=0.5)
        d_hidden = project_backward(d_z, proj_cache, params, head)
        encode_backward(d_hidden, enc_cache, params)
        analytic = [p.grad.copy() for _, p in named]
        numeric = finite_difference_gradient(forward, [p for _, p in named], h=1e-5)
        assert relative_gradient_error(analytic, numeric) <= 1e-4

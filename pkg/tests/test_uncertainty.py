import math

import numpy as np
import pytest
import torch

from epcl.errors import NotADistributionError, ShapeMismatchError
from epcl.model import PredictionSet
from epcl.uncertainty import (
    UncertaintyMap,
    dist_uncertainty_norm,
    entropy_map,
    entropy_norm,
    export_reliability_slices,
    juq,
    refine_pseudo_labels,
    reliability_map,
)

from conftest import random_head_probs, random_probs
from oracles import (
    oracle_dist_norm,
    oracle_entropy,
    oracle_entropy_norm,
    oracle_juq,
    oracle_refined,
    oracle_reliability,
)


def probs_tensor(*voxel_dists):
    """Build a (1, C, n, 1, 1) probability tensor from per-voxel tuples."""
    arr = np.array(voxel_dists, dtype=np.float64).T[None, :, :, None, None]
    return torch.as_tensor(arr)


class TestEntropy:
    def test_uniform_voxel(self):
        e = entropy_map(probs_tensor((0.5, 0.5)))
        assert abs(float(e.data[0, 0, 0, 0]) - math.log(2)) < 1e-9

    def test_degenerate_voxel(self):
        e = entropy_map(probs_tensor((1.0, 0.0)))
        assert float(e.data[0, 0, 0, 0]) == 0.0

    def test_skewed_voxel(self):
        e = entropy_map(probs_tensor((0.9, 0.1)))
        assert abs(float(e.data[0, 0, 0, 0]) - 0.325083) < 1e-6

    def test_rejects_non_distribution(self):
        bad = torch.full((1, 2, 1, 1, 1), 0.9, dtype=torch.float64)
        with pytest.raises(NotADistributionError):
            entropy_map(bad)

    def test_bounded_by_log_c(self):
        rng = np.random.default_rng(0)
        for c in (2, 3, 5):
            probs = random_probs(rng, 2, c, (4, 4, 4))
            e = entropy_map(probs)
            assert float(e.data.min()) >= 0.0
            assert float(e.data.max()) <= math.log(c) + 1e-9

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        probs = random_probs(rng, 2, 3, (3, 2, 2))
        expect = oracle_entropy(probs.numpy())
        assert np.allclose(entropy_map(probs).data.numpy(), expect, atol=1e-9)


class TestDistNorm:
    def test_identical_heads_give_ones(self):
        rng = np.random.default_rng(2)
        one = random_probs(rng, 1, 2, (3, 3, 3))
        preds = PredictionSet.from_heads([one] * 4)
        out = dist_uncertainty_norm(preds)
        assert torch.allclose(out.data, torch.ones_like(out.data))

    def test_two_voxel_example(self):
        # construct head probs whose per-voxel variances are (v, 0); the map
        # must be (exp(-1), exp(0)) regardless of v's magnitude
        head_a = probs_tensor((1.0, 0.0), (0.5, 0.5))
        head_b = probs_tensor((0.0, 1.0), (0.5, 0.5))
        preds = PredictionSet.from_heads([head_a, head_b])
        out = dist_uncertainty_norm(preds).data[0, :, 0, 0]
        assert abs(float(out[0]) - math.exp(-1.0)) < 1e-6
        assert abs(float(out[1]) - 1.0) < 1e-6

    def test_constant_variance(self):
        # equal disagreement at every voxel: each share is 1/N
        head_a = probs_tensor(*[(1.0, 0.0)] * 8)
        head_b = probs_tensor(*[(0.0, 1.0)] * 8)
        preds = PredictionSet.from_heads([head_a, head_b])
        out = dist_uncertainty_norm(preds)
        assert torch.allclose(out.data, torch.full_like(out.data, math.exp(-1 / 8)), atol=1e-6)

    def test_monotone_in_one_voxel_disagreement(self):
        rng = np.random.default_rng(3)
        heads = [random_probs(rng, 1, 2, (2, 2, 2)) for _ in range(4)]
        preds = PredictionSet.from_heads(heads)
        base = float(dist_uncertainty_norm(preds).data[0, 0, 0, 0])
        # push head 0 toward certainty at voxel (0,0,0), others fixed
        bumped = [h.clone() for h in heads]
        bumped[0][0, :, 0, 0, 0] = torch.tensor([1.0, 0.0], dtype=torch.float64)
        preds2 = PredictionSet.from_heads(bumped)
        v1 = preds.head_probs.var(dim=0, unbiased=False).mean(dim=1)[0, 0, 0, 0]
        v2 = preds2.head_probs.var(dim=0, unbiased=False).mean(dim=1)[0, 0, 0, 0]
        if v2 >= v1:
            assert float(dist_uncertainty_norm(preds2).data[0, 0, 0, 0]) <= base + 1e-12

    def test_matches_oracle(self):
        rng = np.random.default_rng(4)
        heads = random_head_probs(rng, 4, 2, 2, (3, 3, 2))
        preds = PredictionSet.from_heads(list(heads))
        expect = oracle_dist_norm(heads.numpy())
        assert np.allclose(dist_uncertainty_norm(preds).data.numpy(), expect, atol=1e-9)


class TestEntropyNorm:
    def test_two_voxel_example(self):
        e = UncertaintyMap(data=torch.tensor([[[[math.log(2)]], [[0.0]]]], dtype=torch.float64),
                           kind="entropy")
        out = entropy_norm(e).data[0]
        assert abs(float(out[0, 0, 0]) - 0.0) < 1e-6
        assert abs(float(out[1, 0, 0]) - 1.0) < 1e-6

    def test_zero_entropy_gives_ones(self):
        e = UncertaintyMap(data=torch.zeros(1, 2, 2, 2, dtype=torch.float64), kind="entropy")
        assert torch.all(entropy_norm(e).data == 1.0)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(5)
        probs = random_probs(rng, 3, 3, (4, 4, 4))
        out = entropy_norm(entropy_map(probs))
        assert float(out.data.min()) >= 0.0
        assert float(out.data.max()) <= 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(6)
        e_data = np.abs(rng.normal(size=(2, 3, 2, 2)))
        e = UncertaintyMap(data=torch.as_tensor(e_data), kind="entropy")
        assert np.allclose(entropy_norm(e).data.numpy(), oracle_entropy_norm(e_data), atol=1e-9)


class TestJuq:
    def test_identity_factor(self):
        rng = np.random.default_rng(7)
        one = random_probs(rng, 1, 2, (3, 3, 3))
        preds = PredictionSet.from_heads([one] * 4)  # dist factor is all ones
        out = juq(preds, one)
        expect = entropy_norm(entropy_map(one))
        assert torch.allclose(out.data, expect.data, atol=1e-9)

    def test_pointwise_product(self):
        rng = np.random.default_rng(8)
        heads = random_head_probs(rng, 4, 1, 2, (2, 2, 2))
        preds = PredictionSet.from_heads(list(heads))
        pl = random_probs(rng, 1, 2, (2, 2, 2))
        out = juq(preds, pl)
        expect = dist_uncertainty_norm(preds).data * entropy_norm(entropy_map(pl)).data
        assert torch.allclose(out.data, expect, atol=1e-12)
        assert 0.0 <= float(out.data.min()) and float(out.data.max()) <= 1.0

    def test_full_pipeline_matches_oracle(self):
        rng = np.random.default_rng(9)
        heads = random_head_probs(rng, 4, 1, 2, (4, 4, 4))
        preds = PredictionSet.from_heads(list(heads))
        out = juq(preds, preds.mean_probs)
        expect = oracle_juq(heads.numpy(), preds.mean_probs.numpy())
        assert np.allclose(out.data.numpy(), expect, atol=1e-6)


class TestReliability:
    def test_constant_juq_minmax_all_ones(self):
        j = UncertaintyMap(data=torch.full((1, 2, 2, 2), 0.7, dtype=torch.float64), kind="juq")
        out = reliability_map(j, "minmax")
        assert torch.all(out.data == 1.0)

    def test_two_voxel_verbatim(self):
        j = UncertaintyMap(data=torch.tensor([[[[1.0]], [[0.0]]]], dtype=torch.float64), kind="juq")
        out = reliability_map(j, "verbatim_eq6").data[0]
        assert abs(float(out[0, 0, 0]) - 0.0) < 1e-6
        assert abs(float(out[1, 0, 0]) - 0.5) < 1e-6

    def test_minmax_spans_unit_interval(self):
        rng = np.random.default_rng(10)
        j = UncertaintyMap(data=torch.as_tensor(rng.random((2, 3, 3, 3))), kind="juq")
        out = reliability_map(j, "minmax")
        for a in range(2):
            assert abs(float(out.data[a].min())) < 1e-6
            assert abs(float(out.data[a].max()) - 1.0) < 1e-6

    @pytest.mark.parametrize("mode", ["verbatim_eq6", "minmax"])
    def test_matches_oracle(self, mode):
        rng = np.random.default_rng(11)
        j_data = rng.random((2, 3, 2, 2))
        j = UncertaintyMap(data=torch.as_tensor(j_data), kind="juq")
        assert np.allclose(reliability_map(j, mode).data.numpy(),
                           oracle_reliability(j_data, mode), atol=1e-9)


class TestRefine:
    def test_unit_reliability_identity(self):
        rng = np.random.default_rng(12)
        probs = random_probs(rng, 1, 3, (3, 3, 3))
        from epcl.uncertainty import ReliabilityMap

        r = ReliabilityMap(data=torch.ones(1, 3, 3, 3, dtype=torch.float64), mode="minmax")
        pl = refine_pseudo_labels(probs, r)
        assert torch.allclose(pl.refined, probs)
        assert torch.equal(pl.hard, probs.argmax(dim=1))

    def test_argmax_invariant_to_uniform_scale(self):
        rng = np.random.default_rng(13)
        probs = random_probs(rng, 1, 3, (3, 3, 3))
        from epcl.uncertainty import ReliabilityMap

        r1 = ReliabilityMap(data=torch.full((1, 3, 3, 3), 1.0, dtype=torch.float64), mode="minmax")
        r2 = ReliabilityMap(data=torch.full((1, 3, 3, 3), 1.0 / 27, dtype=torch.float64),
                            mode="verbatim_eq6")
        assert torch.equal(refine_pseudo_labels(probs, r1).hard,
                           refine_pseudo_labels(probs, r2).hard)

    def test_voxel_example(self):
        from epcl.uncertainty import ReliabilityMap

        probs = probs_tensor((0.6, 0.4))
        r = ReliabilityMap(data=torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64), mode="minmax")
        pl = refine_pseudo_labels(probs, r)
        assert np.allclose(pl.refined[0, :, 0, 0, 0].numpy(), [0.3, 0.2])
        assert int(pl.hard[0, 0, 0, 0]) == 0

    def test_tie_breaks_to_lowest_class(self):
        from epcl.uncertainty import ReliabilityMap

        probs = probs_tensor((0.5, 0.5))
        r = ReliabilityMap(data=torch.ones(1, 1, 1, 1, dtype=torch.float64), mode="minmax")
        assert int(refine_pseudo_labels(probs, r).hard[0, 0, 0, 0]) == 0

    def test_matches_oracle(self):
        rng = np.random.default_rng(14)
        probs = random_probs(rng, 2, 3, (3, 2, 2))
        from epcl.uncertainty import ReliabilityMap

        r_data = rng.random((2, 3, 2, 2))
        r = ReliabilityMap(data=torch.as_tensor(r_data), mode="minmax")
        pl = refine_pseudo_labels(probs, r)
        exp_refined, exp_hard = oracle_refined(probs.numpy(), r_data)
        assert np.allclose(pl.refined.numpy(), exp_refined, atol=1e-12)
        assert np.array_equal(pl.hard.numpy(), exp_hard)

    def test_shape_mismatch(self):
        from epcl.uncertainty import ReliabilityMap

        rng = np.random.default_rng(15)
        probs = random_probs(rng, 1, 2, (2, 2, 2))
        r = ReliabilityMap(data=torch.ones(1, 3, 3, 3, dtype=torch.float64), mode="minmax")
        with pytest.raises(ShapeMismatchError):
            refine_pseudo_labels(probs, r)


class TestExportSlices:
    def test_writes_one_png_per_slice(self, tmp_path):
        rng = np.random.default_rng(16)
        data = rng.random((1, 4, 5, 6))
        from epcl.uncertainty import ReliabilityMap

        r = ReliabilityMap(data=torch.as_tensor(data), mode="minmax")
        paths = export_reliability_slices(r, axis=2, out_dir=tmp_path, prefix="rel")
        assert len(paths) == 6
        assert all(p.exists() and p.stat().st_size > 0 for p in paths)

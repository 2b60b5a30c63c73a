import numpy as np
import pytest

from relnet import verify as vf
from relnet.evaluation import TaskSetting


class TestOracleChecks:
    def test_clean_values(self):
        assert vf.check_exact_conditional(n=20) < 1e-12
        assert vf.check_meanfield_sequence(n=5) < 1e-15
        assert vf.check_fixed_point(n=5) < 1e-6

    @pytest.mark.parametrize("check", [vf.check_exact_conditional, vf.check_meanfield_sequence,
                                       vf.check_fixed_point])
    def test_perturbation_is_detected(self, check):
        assert check(n=3, perturb=1.0) > 1e-3

    def test_enumerated_conditional_normalized(self, rng):
        f, theta = vf.random_instance(rng)
        q = vf.enumerated_conditional(1, 2, f, theta)
        assert q.shape == (theta.K,) and q.sum() == pytest.approx(1.0)


class TestGradientCheck:
    def test_variants_cover_modes(self):
        cfgs = list(vf.GRADIENT_VARIANTS.values())
        assert {c.share_weights for c in cfgs} == {True, False}
        assert {c.enforce_symmetry for c in cfgs} == {True, False}
        assert {c.loss_mode for c in cfgs} == {"final-unit", "all-units"}
        assert any(not c.relational for c in cfgs)

    def test_perturbed_gradient_fails(self):
        cfg = vf.GRADIENT_VARIANTS["shared-free"]
        assert max(vf.gradient_check(cfg, instances=1, perturb=1.0).values()) > 1e-2

    def test_covers_every_parameter(self):
        cfg = vf.GRADIENT_VARIANTS["unshared-free"]
        model = vf.tiny_model(cfg, seed=0)
        report = vf.gradient_check(cfg, instances=1)
        trainable = set(model.store.params) - set(model.store.frozen)
        assert set(report) == trainable


class TestExhaustiveMatcher:
    def test_greedy_can_be_suboptimal_on_crafted_case(self):
        # prediction 0 prefers GT 0 (higher quality) though it could take GT 1;
        # prediction 1 can only take GT 0. Greedy finds 1 match, the maximum is 2.
        from relnet.pipeline import TripletPrediction
        from relnet.evaluation import GroundTruthInstance
        from relnet.spatial import BoundingBox as Bx, union_box
        a, b = Bx(0, 0, 10, 10), Bx(1, 0, 11, 10)
        g0 = GroundTruthInstance(0, 0, 0, a, a)
        g1 = GroundTruthInstance(0, 0, 0, b, b)
        p0 = TripletPrediction(0, 0, 0, 0.9, a, a, union_box(a, a))
        shifted = Bx(-2, 0, 8, 10)
        p1 = TripletPrediction(0, 0, 0, 0.8, shifted, shifted, union_box(shifted, shifted))
        greedy = sum(m is not None for m in vf.greedy_match([p0, p1], [g0, g1], TaskSetting.TWO_BOXES, 0.6))
        assert greedy == 1
        assert vf.exhaustive_match_count([p0, p1], [g0, g1], TaskSetting.TWO_BOXES, 0.6) == 2


class TestDriver:
    @pytest.mark.parametrize("suite", ["oracle", "metrics"])
    def test_suite_passes(self, suite):
        results = vf.run_suite(suite)
        assert results and all(r.passed for r in results), [r.name for r in results if not r.passed]
        assert {r.suite for r in results} == {suite}

    def test_metrics_suite_names(self):
        names = [r.name for r in vf.run_suite("metrics")]
        assert len(names) == 11 and names[-1] == "iou-sweep-monotone"

    @pytest.mark.parametrize("name", ["fixture-one-of-two", "iou-sweep-monotone"])
    def test_injection_names_failure(self, name):
        s = vf.summary(vf.run_suite("metrics", inject=[name]))
        assert not s["passed"] and s["failed"] == [name]

    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            vf.run_suite("nope")

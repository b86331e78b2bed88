import numpy as np
import pytest

from relmm import baselines as B
from relmm import config as C
from relmm import evaluation as E
from relmm import orchestrator as O
from relmm import world as W


def tiny(**over):
    base = {"grasp.n_pt": 10, "run.steps": 20, "nav.batch_size": 8, "grasp.batch_size": 8,
            "grasp.members": 2}
    base.update(over)
    return C.ExperimentConfig().with_overrides(base)


def test_report_percent_failed_and_validation():
    r = E.EvalReport(20, 15, [3, 4, 5], 250, 0)
    assert r.percent_failed == 25.0 and r.mean_gap == 4.0
    assert E.EvalReport(20, 0, [], 250, 0).mean_gap is None
    with pytest.raises(ValueError):
        E.EvalReport(20, 21, [], 250, 0)
    with pytest.raises(ValueError):
        E.EvalReport(0, 0, [], 250, 0)


class StandStill(B.ScriptedPolicy):
    """Never moves; grasps whatever the exact projection puts in the region."""

    def nav_action(self, o, rng):
        return np.array([-1.0, 0.0])


def test_oracle_collects_the_single_object():
    world = W.single_object_world(3)
    pol = StandStill(project=B.exact_projector())
    r = E.evaluate(pol, horizon=10, world=world)
    assert (r.objects_total, r.objects_collected) == (1, 1)
    assert r.steps_between_successes == [1] and r.percent_failed == 0.0


def test_gaps_sum_to_last_success_step():
    pol = B.ScriptedPolicy(project=B.exact_projector())
    r = E.evaluate(pol, horizon=250, seed=4)
    assert len(r.steps_between_successes) == r.objects_collected
    assert r.grasp_attempts >= r.objects_collected
    assert sum(r.steps_between_successes) <= 250


def test_evaluation_does_not_touch_learners():
    L, _ = O.run_relmm(tiny())
    before = (L.grasp.param_digest(), len(L.grasp_buffer), len(L.nav_buffer),
              {k: v.copy() for k, v in L.nav.actor.params.items()})
    E.evaluate(E.ReLMMPolicy(L), horizon=50, seed=1)
    assert L.grasp.param_digest() == before[0]
    assert (len(L.grasp_buffer), len(L.nav_buffer)) == before[1:3]
    for k, v in L.nav.actor.params.items():
        np.testing.assert_array_equal(v, before[3][k])


def test_eval_seed_fixes_room_and_is_repeatable():
    pol = B.RandAllPolicy()
    a, b = E.evaluate(pol, seed=7), E.evaluate(pol, seed=7)
    assert a == b
    assert E.evaluate(pol, seed=8) != a
    assert E.eval_seeds(0, 3) != E.eval_seeds(1, 3)


def test_variant_deltas():
    base = C.ExperimentConfig()
    assert base.diff(E.variant_config("no_uncertainty")) == {"grasp.beta": (10.0, 0.0)}
    assert base.diff(E.variant_config("single_policy")) == {"run.policy": ("decomposed", "single")}
    d = base.diff(E.variant_config("relabel_on"))
    assert d == {"run.curriculum": ("stationary", "autonomous"), "nav.relabel": (False, True)}
    assert E.variant_config("full") == E.variant_config("statcurr") == base
    with pytest.raises(C.ConfigError, match="no_uncertainty"):
        E.AblationVariant.parse("nope")


def test_trailing_mean_and_gaps():
    np.testing.assert_allclose(E.trailing_mean([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    assert E.success_gaps([0, 1, 0, 0, 1]) == [2, 3]


def test_run_ablation_caches_and_saves_policy(tmp_path):
    base = tiny()
    first = E.run_ablation("full", 20, [0], base, eval_every=10, n_eval=1, cache_dir=tmp_path)
    assert [p.step for p in first[0].curve] == [10, 20]
    again = E.run_ablation("full", 20, [0], base, eval_every=10, n_eval=1, cache_dir=tmp_path)
    assert again[0].final == first[0].final and again[0].wall_time == first[0].wall_time
    cfg, L = E.load_policies(tmp_path / first[0].policy_path)
    assert E.evaluate_learners(L, cfg, E.eval_seeds(0, 1), "full") == first[0].final


def test_grasp_curve_points():
    curve = E.grasp_learning_curve(tiny(), 20, every=10, n_eval=5)
    assert [n for n, _ in curve.points] == [10, 20]
    assert all(0.0 <= r <= 1.0 for _, r in curve.points)
    assert E.GraspCurve("x", 0, [(10, 0.2), (20, 0.7)]).attempts_to(0.6) == 20
    assert E.GraspCurve("x", 0, [(10, 0.2)]).attempts_to(0.6) == float("inf")

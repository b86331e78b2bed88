import pytest

from relmm import config as C

GOOD = """
[run]
curriculum = "stationary"
seed = 3

[grasp]
beta = 0.0
"""


def test_defaults_and_parse():
    cfg = C.loads(GOOD)
    assert cfg.run.seed == 3 and cfg.grasp.beta == 0.0
    assert cfg.grasp.members == 6 and cfg.grasp.alpha == 10.0 and cfg.grasp.n_pt == 2000
    assert cfg.curriculum.n_start == 10 and cfg.curriculum.n_stop == 50
    assert cfg.curriculum.n_max == 2000 and cfg.curriculum.n_bt == 300
    assert cfg.run.checkpoint_every == 2000 and cfg.eval.horizon == 250


def test_unknown_key_names_key_and_line():
    text = GOOD + "bogus_knob = 1\n"
    with pytest.raises(C.ConfigError) as e:
        C.loads(text, "room.toml")
    msg = str(e.value)
    assert "grasp.bogus_knob" in msg and "room.toml:" in msg
    assert e.value.line == text.splitlines().index("bogus_knob = 1") + 1


def test_unknown_section():
    with pytest.raises(C.ConfigError, match=r"\[robot\]"):
        C.loads(GOOD + "[robot]\nx = 1\n")


def test_missing_required_key():
    with pytest.raises(C.ConfigError, match="run.curriculum"):
        C.loads("[run]\nseed = 1\n")


def test_type_errors_are_located():
    text = '[run]\ncurriculum = "stationary"\nsteps = "many"\n'
    with pytest.raises(C.ConfigError) as e:
        C.loads(text, "x.toml")
    assert e.value.line == 3 and "run.steps" in str(e.value)


def test_syntax_error_has_line():
    with pytest.raises(C.ConfigError) as e:
        C.loads('[run]\ncurriculum = "stationary"\nseed = = 1\n', "bad.toml")
    assert e.value.line == 3


def test_invalid_curriculum_and_ranges():
    with pytest.raises(C.ConfigError, match="curriculum"):
        C.loads('[run]\ncurriculum = "both"\n')
    with pytest.raises(C.ConfigError, match="curriculum.n_start"):
        C.loads('[run]\ncurriculum = "autonomous"\n[curriculum]\nn_start = 0\n')


def test_int_accepted_for_float_but_not_bool_for_int():
    cfg = C.loads('[run]\ncurriculum = "stationary"\n[grasp]\nbeta = 3\n')
    assert cfg.grasp.beta == 3.0 and isinstance(cfg.grasp.beta, float)
    with pytest.raises(C.ConfigError):
        C.loads('[run]\ncurriculum = "stationary"\nsteps = true\n')


def test_round_trip_through_toml():
    cfg = C.loads(GOOD).with_overrides({"room.obstacles": [[1.0, 1.0, 1.5, 1.5]]})
    again = C.loads(cfg.dumps())
    assert again == cfg and again.room.obstacles == ((1.0, 1.0, 1.5, 1.5),)


def test_overrides_and_diff():
    base = C.ExperimentConfig()
    assert base.diff(base.with_overrides({"grasp.beta": 0.0})) == {"grasp.beta": (10.0, 0.0)}
    key, value = C.parse_override("nav.relabel=true")
    assert (key, value) == ("nav.relabel", True)
    assert C.parse_override("run.curriculum=autonomous") == ("run.curriculum", "autonomous")
    with pytest.raises(C.ConfigError):
        C.parse_override("nav.nope=1")


def test_obstacle_outside_room_rejected():
    with pytest.raises(C.ConfigError, match="obstacle"):
        C.ExperimentConfig().with_overrides({"room.obstacles": [[2.0, 2.0, 4.0, 2.5]]})


def test_every_key_has_a_default():
    keys = dict(C.iter_keys())
    assert "nav.gamma" in keys and keys["nav.gamma"] == 0.99
    assert keys["grasp.lr"] == 3e-4

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcmg.config import SECTIONS, ConfigError, RunConfig


def test_keys_are_unique_across_sections():
    total = sum(len(cls.__dataclass_fields__) for cls in SECTIONS.values())
    assert len(RunConfig.keys()) == total


def test_defaults_validate_and_describe_the_middle_grid():
    cfg = RunConfig()
    cfg.validate()
    assert (cfg.mesh.base_level, cfg.mesh.r_max, cfg.mesh.levels) == (6, 7, 4)
    assert (cfg.solver.nu1, cfg.solver.nu2, cfg.solver.omega) == (6, 6, 0.8)
    assert cfg.physics.alpha_fict == 1e-10 and cfg.physics.beta_n == 100.0


@settings(max_examples=40, deadline=None)
@given(
    r_max=st.integers(6, 12),
    omega=st.floats(0.01, 2.0, allow_nan=False),
    eta=st.floats(1e-6, 10.0),
    policy=st.sampled_from(["cache_none", "cache_matrix", "cache_inverse"]),
    prefix=st.text("abcxyz_-", min_size=1, max_size=10),
)
def test_text_roundtrip(r_max, omega, eta, policy, prefix):
    cfg = RunConfig()
    cfg.set("r_max", r_max)
    cfg.set("omega", omega)
    cfg.set("eta", eta)
    cfg.set("policy", policy)
    cfg.set("prefix", prefix)
    back = RunConfig.loads(cfg.dumps())
    assert back == cfg


def test_file_roundtrip_and_partial_files(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[solver]\nnu1 = 3\nomega = 0.7\n[mesh]\nr_max = 9\n")
    cfg = RunConfig.read(path)
    assert (cfg.solver.nu1, cfg.solver.omega, cfg.mesh.r_max) == (3, 0.7, 9)
    assert cfg.solver.nu2 == 6
    cfg.write(tmp_path / "out.ini")
    assert RunConfig.read(tmp_path / "out.ini") == cfg


def test_string_values_are_parsed_by_type():
    cfg = RunConfig()
    cfg.set("levels", " 5 ")
    cfg.set("alpha_fict", "1e-8")
    assert cfg.mesh.levels == 5 and cfg.physics.alpha_fict == 1e-8
    with pytest.raises(ConfigError, match="cannot read"):
        cfg.set("levels", "many")


@pytest.mark.parametrize(
    "text,msg",
    [
        ("[solver]\nbogus = 1\n", "unknown key"),
        ("[mesh]\nomega = 0.5\n", "unknown key"),
        ("[extras]\nx = 1\n", "unknown section"),
        ("[solver]\npolicy = cache_all\n", "policy"),
        ("[solver]\nomega = 0\n", "omega"),
        ("[mesh]\nbase_level = 8\nr_max = 7\n", "base_level"),
        ("[physics]\nalpha_fict = 0\n", "physics"),
        ("[study]\nmms_levels = 3\n", "mms_levels"),
        ("[study]\nranks = 1,x\n", "integer list"),
        ("[mesh]\nroot_size = 0.3\n", "cover"),
        ("not an ini", "section"),
    ],
)
def test_invalid_files_are_rejected(text, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig.loads(text)


def test_unknown_key_access():
    with pytest.raises(ConfigError):
        RunConfig().get("nope")


def test_copy_is_deep():
    a = RunConfig()
    b = a.copy()
    b.set("r_max", 9)
    assert a.mesh.r_max == 7
    assert a.ranks() == [1, 2, 4, 8] and a.mms_levels() == [2, 3, 4]
    assert set(a.as_dict()) == set(RunConfig.keys())


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.read("/nonexistent/run.ini")

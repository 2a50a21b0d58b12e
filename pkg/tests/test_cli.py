import json
import os
import subprocess
import sys

import numpy as np
import pytest

from pcdyn.cli import (CSV_SCHEMA, ConfigError, EXIT_CODES, build_state,
                       build_system, main, parse_config, read_trajectory_csv,
                       serialize_config)

MINIMAL = """
[scenario]
epsilon = 0.05
model = "coulomb"
t_end = 0.5
seed = 7

[[particles]]
charge = 1.0
mass = 1.0
position = [0.5, 0.0, 0.0]
velocity = [0.0, 0.2, 0.0]

[[particles]]
charge = -1.0
mass = 2.0
position = [-0.5, 0.0, 0.0]
velocity = [0.0, -0.1, 0.0]
"""

EQUAL_RATIO = """
[scenario]
epsilon = 0.05
models = ["darwin", "rr_reduced"]
t_end = 1.0
seed = 3

[stepper]
rtol = 1e-10
atol = 1e-12

[[particles]]
charge = 1.0
mass = 2.0
position = [0.5, 0.0, 0.0]
velocity = [0.0, 0.2, 0.0]

[[particles]]
charge = 2.0
mass = 4.0
position = [-0.5, 0.0, 0.0]
velocity = [0.0, -0.1, 0.0]
"""


# ---------------------------------------------------------------------------
# config parsing

def test_parse_minimal_config():
    cfg = parse_config(MINIMAL)
    assert cfg.epsilons == (0.05,)
    assert cfg.models == ("coulomb",)
    assert len(cfg.particles) == 2
    assert cfg.particles[1].mass == 2.0
    sys_ = build_system(cfg, 0.05)
    assert sys_.n == 2
    st = build_state(cfg)
    assert st.positions.shape == (2, 3)


@pytest.mark.parametrize("mutation,field", [
    (lambda t: t.replace('position = [-0.5, 0.0, 0.0]',
                         'position = [0.5, 0.0, 0.0]'), "position"),
    (lambda t: t.replace('model = "coulomb"', 'model = "newton"'), "models"),
    (lambda t: t.replace("epsilon = 0.05", "epsilon = 1.5"), "epsilons"),
    (lambda t: t.replace("charge = 1.0\nmass = 1.0", "mass = 1.0"), "charge"),
    (lambda t: t.replace("t_end = 0.5", "t_end = -1.0"), "t_end"),
])
def test_parse_rejects_bad_configs(mutation, field):
    with pytest.raises(ConfigError) as err:
        parse_config(mutation(MINIMAL))
    assert field in str(err.value)


def test_config_round_trip():
    cfg = parse_config(MINIMAL)
    text = serialize_config(cfg)
    assert parse_config(text) == cfg
    # and the canonical form is a fixed point
    assert serialize_config(parse_config(text)) == text


def test_bare_mass_route_requires_em_source():
    text = MINIMAL.replace("mass = 1.0", "mass_bare = 1.0", 1)
    with pytest.raises(ConfigError):
        parse_config(text)
    ok = text.replace('model = "coulomb"',
                      'model = "coulomb"\nem_mass = 0.05')
    cfg = parse_config(ok)
    sys_ = build_system(cfg, 0.05)
    assert sys_.masses[0] == 1.0 + 4.0 / 3.0 * 0.05


# ---------------------------------------------------------------------------
# simulate

def write_config(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_simulate_writes_csv_and_summary(tmp_path):
    cfgp = write_config(tmp_path, MINIMAL)
    out = tmp_path / "out"
    code = main(["simulate", "--config", cfgp, "--out", str(out)])
    assert code == 0
    csv = out / "traj_coulomb_eps0.05.csv"
    lines = csv.read_text().splitlines()
    assert lines[0] == CSV_SCHEMA
    assert lines[1].startswith("t,r0x,")
    cols = read_trajectory_csv(csv)
    assert np.all(np.diff(cols["t"]) > 0.0)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rng"] == {"generator": "philox", "seed": 7}
    assert summary["runs"][0]["termination"] == "completed"


def test_simulate_deterministic_bytes(tmp_path):
    cfgp = write_config(tmp_path, MINIMAL)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["simulate", "--config", cfgp, "--out", str(out1)]) == 0
    assert main(["simulate", "--config", cfgp, "--out", str(out2)]) == 0
    a = (out1 / "traj_coulomb_eps0.05.csv").read_bytes()
    b = (out2 / "traj_coulomb_eps0.05.csv").read_bytes()
    assert a == b
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()


def test_simulate_coincident_positions_exit_code(tmp_path, capsys):
    bad = MINIMAL.replace("position = [-0.5, 0.0, 0.0]",
                          "position = [0.5, 0.0, 0.0]")
    cfgp = write_config(tmp_path, bad)
    code = main(["simulate", "--config", cfgp, "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["config-error"] == 2
    assert "position" in capsys.readouterr().err


def test_simulate_collision_exit_code(tmp_path):
    head_on = """
[scenario]
epsilon = 0.05
model = "coulomb"
t_end = 60.0
seed = 1

[guard]
min_separation = 0.4

[[particles]]
charge = 1.0
mass = 1.0
position = [0.5, 0.0, 0.0]
velocity = [-0.05, 0.0, 0.0]

[[particles]]
charge = -1.0
mass = 1.0
position = [-0.5, 0.0, 0.0]
velocity = [0.05, 0.0, 0.0]
"""
    cfgp = write_config(tmp_path, head_on)
    code = main(["simulate", "--config", cfgp, "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["collision"] == 3


def test_simulate_third_order_model(tmp_path):
    text = MINIMAL.replace('model = "coulomb"', 'model = "third_order"')
    text = text.replace("t_end = 0.5", "t_end = 0.0008")
    cfgp = write_config(tmp_path, text)
    out = tmp_path / "o"
    code = main(["simulate", "--config", cfgp, "--out", str(out)])
    assert code == 0
    cols = read_trajectory_csv(out / "traj_third_order_eps0.05.csv")
    assert "yx" in cols
    assert np.all(np.isfinite(cols["yx"]))
    assert np.nanmax(cols["constraint_residual"]) < 1e-10


# ---------------------------------------------------------------------------
# compare / scaling

def test_compare_equal_ratio_norms_tiny(tmp_path):
    cfgp = write_config(tmp_path, EQUAL_RATIO)
    out = tmp_path / "o"
    assert main(["compare", "--config", cfgp, "--out", str(out)]) == 0
    data = json.loads((out / "compare.json").read_text())
    row = data["comparisons"][0]
    assert row["models"] == ["darwin", "rr_reduced"]
    assert row["sup_du"] < 1e-12
    assert row["sup_dr"] < 1e-12


def test_compare_coulomb_darwin_gap_shrinks(tmp_path):
    text = MINIMAL.replace('model = "coulomb"',
                           'models = ["coulomb", "darwin"]\n'
                           'epsilons = [0.08, 0.02, 0.005]')
    text = text.replace("epsilon = 0.05\n", "")
    cfgp = write_config(tmp_path, text)
    out = tmp_path / "o"
    assert main(["compare", "--config", cfgp, "--out", str(out)]) == 0
    rows = json.loads((out / "compare.json").read_text())["comparisons"]
    eps = [r["epsilon"] for r in rows]
    sup = [r["sup_du"] for r in rows]
    assert eps == sorted(eps)
    assert sup == sorted(sup)  # gap shrinks together with epsilon


def test_scaling_study_self_test(tmp_path):
    text = MINIMAL.replace("epsilon = 0.05",
                           "epsilons = [0.1, 0.03, 0.01, 0.003]")
    cfgp = write_config(tmp_path, text)
    out = tmp_path / "o"
    code = main(["scaling-study", "--config", cfgp, "--out", str(out),
                 "--self-test", "1.7"])
    assert code == 0
    data = json.loads((out / "scaling.json").read_text())
    assert abs(data["self_test"]["recovered_slope"] - 1.7) < 1e-9


def test_scaling_study_needs_three_epsilons(tmp_path):
    cfgp = write_config(tmp_path, MINIMAL)
    code = main(["scaling-study", "--config", cfgp,
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["config-error"]


def test_scaling_study_darwin_vs_coulomb_slope(tmp_path):
    text = MINIMAL.replace('model = "coulomb"',
                           'models = ["coulomb", "darwin"]\n'
                           'epsilons = [0.1, 0.03, 0.01, 0.003]')
    text = text.replace("epsilon = 0.05\n", "")
    cfgp = write_config(tmp_path, text)
    out = tmp_path / "o"
    env_threads = os.environ.get("PCDYN_THREADS")
    os.environ["PCDYN_THREADS"] = "2"
    try:
        assert main(["scaling-study", "--config", cfgp,
                     "--out", str(out)]) == 0
    finally:
        if env_threads is None:
            os.environ.pop("PCDYN_THREADS", None)
        else:
            os.environ["PCDYN_THREADS"] = env_threads
    data = json.loads((out / "scaling.json").read_text())
    assert data["table"]["epsilon"] == sorted(data["table"]["epsilon"])
    slope = data["fits"]["sup_dudot"]["slope"]
    assert abs(slope - 1.0) < 0.25


# ---------------------------------------------------------------------------
# verify-algebra / energy-audit

def test_verify_algebra_passes(tmp_path):
    out = tmp_path / "v"
    code = main(["verify-algebra", "--seed", "99", "--trials", "50",
                 "--out", str(out)])
    assert code == 0
    data = json.loads((out / "verify.json").read_text())
    assert all(c["passed"] for c in data["checks"])
    assert data["rng"]["seed"] == 99


def test_verify_algebra_fixed_instances_only(capsys):
    code = main(["verify-algebra", "--trials", "0"])
    assert code == 0
    out = capsys.readouterr().out
    assert "N=2" in out and "N=3" in out
    assert "draws" not in out


def test_energy_audit(tmp_path):
    cfgp = write_config(tmp_path, MINIMAL)
    out = tmp_path / "o"
    assert main(["simulate", "--config", cfgp, "--out", str(out)]) == 0
    code = main(["energy-audit",
                 str(out / "traj_coulomb_eps0.05.csv"),
                 "--config", cfgp, "--out", str(out)])
    assert code == 0
    audit = json.loads((out / "audit.json").read_text())
    assert audit["h_c"]["max_rel_drift"] < 1e-7
    assert audit["dissipation"]["all_nonnegative"]


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pcdyn.cli",
                           "verify-algebra", "--trials", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "PASS" in proc.stdout


def test_exit_code_contract_unique():
    # each termination reason maps to exactly one documented code
    codes = list(EXIT_CODES.values())
    assert len(codes) == len(set(codes))
    assert EXIT_CODES["completed"] == 0
    for reason in ("collision", "escape", "solver-failure",
                   "runaway-suspected"):
        assert EXIT_CODES[reason] > 0


def test_flag_overrides(tmp_path):
    cfgp = write_config(tmp_path, MINIMAL)
    out = tmp_path / "o"
    code = main(["simulate", "--config", cfgp, "--out", str(out),
                 "--epsilon", "0.01", "--model", "darwin", "--seed", "11",
                 "--tol", "1e-9"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rng"]["seed"] == 11
    assert summary["model"] == "darwin"
    assert summary["runs"][0]["epsilon"] == 0.01
    assert (out / "traj_darwin_eps0.01.csv").exists()


def test_compare_third_order_vs_reduced(tmp_path):
    text = """
[scenario]
epsilon = 0.01
models = ["third_order", "rr_reduced"]
t_end = 0.0004
seed = 5

[stepper]
rtol = 1e-10
atol = 1e-12

[manifold]
refine_steps = 3

[[particles]]
charge = 1.0
mass = 1.0
position = [0.5, 0.0, 0.0]
velocity = [0.0, 0.3, 0.0]

[[particles]]
charge = -1.0
mass = 2.0
position = [-0.5, 0.0, 0.0]
velocity = [0.0, -0.3, 0.0]
"""
    cfgp = write_config(tmp_path, text)
    out = tmp_path / "o"
    assert main(["compare", "--config", cfgp, "--out", str(out)]) == 0
    row = json.loads((out / "compare.json").read_text())["comparisons"][0]
    assert row["models"] == ["third_order", "rr_reduced"]
    assert row["epsilon"] == 0.01
    assert np.isfinite(row["sup_du"]) and row["sup_du"] >= 0.0
    assert row["terminations"]["third_order"] == "completed"

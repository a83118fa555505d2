import numpy as np
import pytest

from src.core import Image
from src.errors import ConfigError
from src.experiment import (
    compare_methods, load_experiment_config, load_theory_config, mse_curve, run_experiment,
    success_rates, validate_theory,
)
from src.attack import AttackTrace, TraceRecord
from src.extractor import read_metadata, read_result_csv

EXPERIMENT = """
[experiment]
name = {name}
repetitions = 3
seed = {seed}
max_queries = 1500
batch_size = 40
thresholds = 1.0, 1e-12
budgets = 500, 1000, 1500
workers = 2

[victim]
kind = quadratic
channels = 1
height = 16
width = 16

[subspace]
kind = {kind}
ratio = 2
"""

THEORY = """
[theory]
victim = quadratic
channels = 1
height = 16
width = 16
dims = {dims}
batches = 16
deltas = 1e-2
rhos = {rhos}
trials = 60
seed = 3
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def experiment_file(tmp_path, name="exp", seed=0, kind="dct"):
    return write(tmp_path, f"{name}.ini", EXPERIMENT.format(name=name, seed=seed, kind=kind))


def test_load_experiment_config(tmp_path):
    config, digest = load_experiment_config(experiment_file(tmp_path))
    assert config.thresholds == [1.0, 1e-12]
    assert config.budgets == [500, 1000, 1500]
    assert config.seed_list() == [0, 1, 2]
    assert config.victim.shape == (1, 16, 16)
    assert config.subspace.kind == "dct"
    again, same = load_experiment_config(experiment_file(tmp_path))
    assert digest == same
    _, other = load_experiment_config(experiment_file(tmp_path), {"seed": 9})
    assert other != digest


@pytest.mark.parametrize("replace, field", [
    ("thresholds = 1.0, 1e-12", "thresholds = 1e-3, 1e-2"),
    ("repetitions = 3", "repetitions = 0"),
    ("kind = dct", "kind = wavelet"),
    ("workers = 2", "colour = blue"),
])
def test_bad_experiment_fields(tmp_path, replace, field):
    text = EXPERIMENT.format(name="bad", seed=0, kind="dct").replace(replace, field)
    with pytest.raises(ConfigError) as exc:
        load_experiment_config(write(tmp_path, "bad.ini", text))
    assert exc.value.field.split(".")[-1] in field


def test_empty_seed_list(tmp_path):
    text = EXPERIMENT.format(name="e", seed=0, kind="dct") + "\n"
    text = text.replace("seed = 0", "seed = 0\nseeds = ,")
    with pytest.raises(ConfigError) as exc:
        load_experiment_config(write(tmp_path, "e.ini", text))
    assert exc.value.field == "seeds"


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_experiment_config(str(tmp_path / "nope.ini"))


def fake_trace(points, initial):
    trace = AttackTrace(initial_mse=initial)
    for t, (q, value) in enumerate(points):
        trace.records.append(TraceRecord(t, q, value, 0.0, 0.0, 0.0, 0))
    return trace


def test_curve_carries_last_value_forward():
    traces = {0: fake_trace([(150, 0.5), (260, 0.2)], 1.0),
              1: fake_trace([(90, 0.4)], 0.8)}
    curve = mse_curve(traces, 400, 100)
    assert curve["queries"].tolist() == [0, 100, 200, 300, 400]
    np.testing.assert_allclose(curve["mean_mse"], [0.9, 0.7, 0.45, 0.3, 0.3])
    assert (curve["runs"] == 2).all()


def test_success_table_is_monotone():
    traces = {0: fake_trace([(100, 0.5), (300, 0.05), (500, 0.2)], 1.0),
              1: fake_trace([(120, 0.6), (400, 0.3)], 1.0)}
    table = success_rates(traces, [0.4, 0.1], [100, 300, 600])
    assert table.shape == (2, 4)
    assert table.loc[0, ["q100", "q300", "q600"]].tolist() == [0.0, 0.5, 1.0]
    assert table.loc[1, ["q100", "q300", "q600"]].tolist() == [0.0, 0.5, 0.5]


def test_run_experiment_outputs(tmp_path):
    config, digest = load_experiment_config(experiment_file(tmp_path))
    out = tmp_path / "out"
    result = run_experiment(config, digest, str(out))

    for seed in (0, 1, 2):
        assert (out / f"trace_{seed}.csv").exists()
        assert (out / f"adv_{seed}.qimg").exists()
    trace = read_result_csv(str(out / "trace_0.csv"))
    assert list(trace.columns) == ["iteration", "cumulative_queries", "mse", "xi", "delta",
                                   "alpha", "step_failures"]
    meta = read_metadata(str(out / "trace_0.csv"))
    assert meta["config_hash"] == digest
    assert meta["root_seed"] == "0"

    success = read_result_csv(str(out / "success_rates.csv"))
    assert success.shape == (2, 4)
    assert success.loc[0, ["q500", "q1000", "q1500"]].tolist() == [1.0, 1.0, 1.0]
    assert success.loc[1, ["q500", "q1000", "q1500"]].tolist() == [0.0, 0.0, 0.0]
    values = success[["q500", "q1000", "q1500"]].to_numpy()
    assert ((values >= 0) & (values <= 1)).all()

    curve = read_result_csv(str(out / "mse_curve.csv"))
    assert len(curve) == 16
    assert curve["mean_mse"].iloc[-1] < curve["mean_mse"].iloc[0]
    assert set(result.traces) == {0, 1, 2}


def test_rerun_is_byte_identical(tmp_path):
    config, digest = load_experiment_config(experiment_file(tmp_path))
    run_experiment(config, digest, str(tmp_path / "a"))
    run_experiment(config, digest, str(tmp_path / "b"))
    for name in ("trace_0.csv", "trace_2.csv", "mse_curve.csv", "success_rates.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_lists_change_traces_not_schema(tmp_path):
    first, d1 = load_experiment_config(experiment_file(tmp_path, "one", seed=0))
    second, d2 = load_experiment_config(experiment_file(tmp_path, "two", seed=10))
    a = run_experiment(first, d1, str(tmp_path / "one"))
    b = run_experiment(second, d2, str(tmp_path / "two"))
    fa, fb = a.traces[0].to_frame(), b.traces[10].to_frame()
    assert list(fa.columns) == list(fb.columns)
    assert not fa.equals(fb)


def test_method_against_itself_ties(tmp_path):
    loaded = [load_experiment_config(experiment_file(tmp_path)) for _ in range(2)]
    comparison = compare_methods(loaded, str(tmp_path / "cmp"))
    assert (comparison.wins["win_fraction"] == 0.5).all()
    assert len(comparison.final_mse) == 3
    assert (tmp_path / "cmp" / "win_fraction.csv").exists()


def test_low_frequency_subspace_beats_full_space(tmp_path):
    loaded = []
    for kind in ("dct", "full"):
        text = EXPERIMENT.format(name=kind, seed=0, kind=kind)
        text = text.replace("repetitions = 3", "repetitions = 20").replace(
            "max_queries = 1500", "max_queries = 3000")
        loaded.append(load_experiment_config(write(tmp_path, f"{kind}.ini", text)))
    wins = compare_methods(loaded, str(tmp_path / "cmp")).wins.set_index(["method_a", "method_b"])
    dct_over_full = wins.loc[("dct", "full"), "win_fraction"]
    full_over_dct = wins.loc[("full", "dct"), "win_fraction"]
    assert dct_over_full >= 0.9
    assert full_over_dct <= 0.1
    assert dct_over_full + full_over_dct == pytest.approx(1.0)
    assert (wins["seeds"] == 20).all()


def test_compare_needs_matching_seeds(tmp_path):
    a = load_experiment_config(experiment_file(tmp_path, "a", seed=0))
    b = load_experiment_config(experiment_file(tmp_path, "b", seed=5, kind="full"))
    with pytest.raises(ConfigError) as exc:
        compare_methods([a, b], str(tmp_path / "cmp"))
    assert exc.value.field == "seeds"


def test_pca_subspace_experiment(tmp_path):
    text = EXPERIMENT.format(name="pca", seed=0, kind="pca") + "components = 32\nprobes = 48\n"
    config, digest = load_experiment_config(write(tmp_path, "pca.ini", text))
    result = run_experiment(config, digest, str(tmp_path / "pca"))
    for trace in result.traces.values():
        assert trace.final_mse < trace.initial_mse
    assert (tmp_path / "pca" / "gradients_0" / "store.json").exists()


def test_theory_single_point(tmp_path):
    config, digest = load_theory_config(write(tmp_path, "t.ini", THEORY.format(dims="64", rhos="1")))
    frame = validate_theory(config, digest, str(tmp_path / "theory"))
    assert len(frame) == 1
    on_disk = read_result_csv(str(tmp_path / "theory" / "bounds.csv"))
    assert len(on_disk) == 1
    assert list(on_disk.columns)[:12] == ["n", "B", "rho", "delta", "L", "grad_norm", "c_n",
                                          "lower", "upper", "measured", "stderr", "trials"]


def test_theory_grid_respects_bounds(tmp_path):
    config, digest = load_theory_config(
        write(tmp_path, "t.ini", THEORY.format(dims="256, 64", rhos="1, 0.5")))
    frame = validate_theory(config, digest, str(tmp_path / "theory"))
    # the full-space point with rho = 0.5 is skipped
    assert len(frame) == 3
    slack = 3 * frame["stderr"]
    assert (frame["measured"] <= frame["upper"] + slack).all()
    assert (frame["measured"] >= frame["lower"] - slack).all()


def test_independent_sampling_skips_oversized_batches(tmp_path):
    text = THEORY.format(dims="8, 64", rhos="1") + "orthogonalize = false\n"
    config, digest = load_theory_config(write(tmp_path, "t.ini", text))
    frame = validate_theory(config, digest, str(tmp_path / "theory"))
    assert frame["n"].tolist() == [64]
    assert not frame["orthogonal"].any()
    assert (tmp_path / "theory" / "bounds.csv").exists()


def test_malformed_theory_grid(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_theory_config(write(tmp_path, "t.ini", THEORY.format(dims="a, b", rhos="1")))
    assert exc.value.field.startswith("dims")


def test_cli_exit_codes(tmp_path):
    import qeba

    ok = write(tmp_path, "t.ini", THEORY.format(dims="64", rhos="1"))
    assert qeba.main(["theory", ok, "--out-dir", str(tmp_path / "cli")]) == 0
    assert (tmp_path / "cli" / "bounds.csv").exists()

    bad = write(tmp_path, "bad.ini", THEORY.format(dims="64", rhos="2"))
    assert qeba.main(["theory", bad]) == 2

    broken = tmp_path / "net.qmlp"
    broken.write_bytes(b"QMLP 1\nlayers 1\nlayer 256 2 identity\ndata\n")
    from src.loader import save_image
    save_image(str(tmp_path / "s.qimg"), Image.zeros((1, 16, 16)))
    mlp = EXPERIMENT.format(name="mlp", seed=0, kind="full").replace(
        "kind = quadratic",
        f"kind = mlp\nweights = {broken}\nsource = {tmp_path / 's.qimg'}\ntarget = {tmp_path / 's.qimg'}")
    assert qeba.main(["attack", write(tmp_path, "mlp.ini", mlp),
                      "--out-dir", str(tmp_path / "mlp")]) == 3


def test_fixture_files_land_in_input_dir(tmp_path, monkeypatch):
    import make_fixtures
    from config.settings import settings
    from src.experiment import build_pair

    monkeypatch.setattr(settings.app, "input_dir", str(tmp_path / "input"))
    make_fixtures.generate_data()
    for name in ("attack_full", "attack_spatial", "attack_dct", "attack_pca", "attack_mlp", "theory"):
        assert (tmp_path / "input" / f"{name}.ini").exists()

    config, _ = load_experiment_config(str(tmp_path / "input" / "attack_mlp.ini"))
    pair = build_pair(config.victim, 0)
    assert pair.victim.phi(pair.source) == 1
    assert pair.victim.phi(pair.target) == -1
    load_theory_config(str(tmp_path / "input" / "theory.ini"))

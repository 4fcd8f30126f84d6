import json
import logging

import pandas as pd
import pytest

from wildfire_rnd.cli import main
from wildfire_rnd.core.config import RunConfig, load_config
from wildfire_rnd.core.enums import Stage
from wildfire_rnd.core.errors import ConfigError, DataError, DependencyError, ParameterError
from wildfire_rnd.core.state import MANIFEST, RunState, file_hash
from wildfire_rnd.data.synthetic import write_synthetic_inputs
from wildfire_rnd.pipeline import STAGE_ORDER, emit_plot_data, parse_stages, run_pipeline

EXPECTED = {
    'ingest': {'quotes.csv', 'treatment.csv', 'rejects.csv'},
    'deamericanize': {'european.csv', 'deamericanize_rejects.csv'},
    'repair': {'slices.csv', 'repair_report.csv', 'arbitrage_gaps.csv'},
    'rnd': {'densities.csv', 'supports.csv', 'rnd_moments.csv'},
    'garch': {'garch_fits.json', 'physical.csv'},
    'kernel': {'kernels.csv', 'gamma_w.csv', 'risk_aversion.json'},
    'prop1': {'prop1.json'},
    'calibrate': {'calibration_table.csv', 'calibration_merton_control.json',
                  'calibration_merton_treatment.json'},
}


def _reduced_config(fixture_dir) -> RunConfig:
    """The bundled synthetic config with one jump model and the smallest Monte Carlo check"""
    data = json.loads((fixture_dir / "config.json").read_text())
    data['calibration'] = dict(data.get('calibration', {}), models=["merton"], n_starts=1)
    data['kernel'] = {'prop1': dict(RunConfig().kernel.prop1, n_paths=200000)}
    return RunConfig.from_dict(data)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """One end-to-end run over every stage, shared by the read-only checks below"""
    fixture_dir = write_synthetic_inputs(tmp_path_factory.mktemp("pipeline") / "fixture")
    config = _reduced_config(fixture_dir)
    state = RunState()
    outcome = run_pipeline(config, state=state)
    return config, state, outcome


# =============================================================================
# STAGE SELECTION
# =============================================================================

class TestParseStages:

    def test_all_by_default(self):
        assert parse_stages(None) == tuple(STAGE_ORDER)
        assert parse_stages("") == tuple(STAGE_ORDER)

    def test_order_is_normalized(self):
        assert parse_stages("kernel, ingest,rnd") == (Stage.INGEST, Stage.RND, Stage.KERNEL)

    def test_unknown_stage(self):
        with pytest.raises(ParameterError):
            parse_stages("ingest,plotting")


# =============================================================================
# RUN STATE
# =============================================================================

class TestRunState:

    @pytest.fixture
    def state(self, tmp_path):
        config = RunConfig.from_dict({'paths': {'output_dir': str(tmp_path / "out")}})
        return RunState().configure(config)

    def test_writes_are_staged_until_commit(self, state):
        state.write_frame("demo", "table.csv", pd.DataFrame({'a': [1.0, 2.0]}))
        assert state.path("table.csv.partial").exists()
        assert not state.path("table.csv").exists()
        hashes = state.commit("demo")
        assert state.path("table.csv").exists()
        assert not state.path("table.csv.partial").exists()
        assert hashes == {'table.csv': file_hash(state.path("table.csv"))}
        assert state.outputs['demo'] == hashes

    def test_abandon_keeps_partial_files(self, state):
        state.write_json("demo", "payload.json", {'x': 1})
        assert state.abandon("demo") == ["payload.json.partial"]
        assert state.path("payload.json.partial").exists()
        assert "demo" not in state.outputs

    def test_require_names_the_missing_artifact(self, state):
        with pytest.raises(DependencyError, match="slices.csv"):
            state.require("rnd", "slices.csv")

    def test_require_rejects_artifacts_from_another_config(self, state):
        state.write_frame("repair", "slices.csv", pd.DataFrame({'a': [1.0]}))
        state.commit("repair")
        state.write_manifest()
        assert RunState().configure(state.config).require("rnd", "slices.csv").exists()

        changed = RunConfig.from_dict(dict(state.config.to_dict(), seed=1))
        with pytest.raises(DataError, match="stage 'repair'"):
            RunState().configure(changed).require("rnd", "slices.csv")

    def test_require_rejects_edited_artifacts(self, state):
        state.write_frame("repair", "slices.csv", pd.DataFrame({'a': [1.0]}))
        state.commit("repair")
        state.path("slices.csv").write_text("a\n2.0\n")
        with pytest.raises(DataError, match="changed after stage 'repair'"):
            state.require("rnd", "slices.csv")

    def test_manifest_round_trip(self, state):
        state.write_frame("demo", "table.csv", pd.DataFrame({'a': [1.0]}))
        state.commit("demo")
        manifest = state.write_manifest()
        assert set(manifest) == {'config_hash', 'seed', 'inputs', 'outputs'}
        assert json.loads(state.path(MANIFEST).read_text()) == manifest

        again = RunState().configure(state.config)
        assert again.outputs == manifest['outputs']
        changed = RunConfig.from_dict(dict(state.config.to_dict(), seed=1))
        assert RunState().configure(changed).outputs == {}

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv("RND_THREADS", "2")
        assert RunConfig(parallelism=8).effective_threads() == 2
        monkeypatch.setenv("RND_THREADS", "many")
        with pytest.raises(ConfigError):
            RunConfig().effective_threads()


# =============================================================================
# CONFIG
# =============================================================================

class TestConfig:

    def test_defaults(self):
        config = load_config(None)
        assert config.kernel.prop1['n_paths'] == 1000000
        assert config.calibration.models == ["merton", "kou"]

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="garch"):
            RunConfig.from_dict({'garch': {'n_path': 10}})

    @pytest.mark.parametrize("section, values", [('density', {'grid_size': 10}),
                                                 ('treatment', {'threshold': 0.0}),
                                                 ('garch', {'regime': 'clairvoyant'})])
    def test_validation(self, section, values):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({section: values}).validate()

    def test_missing_input_path(self, tmp_path):
        config = RunConfig.from_dict({'paths': {'quotes': str(tmp_path / "absent.csv")}})
        with pytest.raises(ConfigError):
            config.validate()


# =============================================================================
# END TO END
# =============================================================================

class TestFullRun:

    def test_every_stage_succeeds(self, full_run):
        _, _, outcome = full_run
        assert outcome.exit_code == 0
        assert outcome.failed_stage is None
        assert set(outcome.summaries) == {s.value for s in STAGE_ORDER}

    def test_artifacts_are_committed(self, full_run):
        config, state, outcome = full_run
        for stage, names in EXPECTED.items():
            assert names <= set(outcome.manifest['outputs'][stage]), stage
            for name in names:
                assert state.path(name).exists()
        assert {'te_profile.csv', 'fwl_surface.csv'} <= set(outcome.manifest['outputs']['panel'])
        assert not list(config.output_dir.glob("*.partial"))
        assert set(outcome.manifest['inputs']) == {'quotes', 'exposures', 'fires', 'returns'}

    def test_prop1_report(self, full_run):
        _, state, _ = full_run
        report = state.read_json("test", "prop1.json")
        assert report['n_paths'] == 200000
        assert report['ci_low'] < report['slope'] < report['ci_high']

    def test_treated_slices_exist(self, full_run):
        _, state, _ = full_run
        treatment = state.read_frame("test", "treatment.csv")
        assert treatment['treated_now'].astype(int).sum() > 0
        table = state.read_frame("test", "calibration_table.csv")
        assert set(table['group']) == {'control', 'treatment'}

    def test_density_plot_table(self, full_run):
        _, state, _ = full_run
        path = emit_plot_data('density_surface', state)
        table = pd.read_csv(path)
        assert list(table.columns) == ['maturity', 'grid_k', 'density']
        assert (table['density'] >= 0).all()

    def test_te_profile_plot_table(self, full_run):
        _, state, _ = full_run
        table = pd.read_csv(emit_plot_data('te_profile', state))
        assert list(table.columns) == ['point', 'delta', 'ci_low', 'ci_high', 'flagged']

    def test_unknown_plot_kind(self, full_run):
        _, state, _ = full_run
        with pytest.raises(ParameterError):
            emit_plot_data('histogram', state)


@pytest.mark.slow
def test_rerun_reproduces_every_artifact(tmp_path):
    fixture_dir = write_synthetic_inputs(tmp_path / "fixture")
    config = _reduced_config(fixture_dir)
    first = run_pipeline(config, state=RunState())
    second = run_pipeline(config, state=RunState())
    assert first.exit_code == second.exit_code == 0
    assert first.manifest == second.manifest


def test_upstream_rerun_is_deterministic(tmp_path):
    fixture_dir = write_synthetic_inputs(tmp_path / "fixture")
    config = _reduced_config(fixture_dir)
    stages = parse_stages("ingest,deamericanize,repair,rnd")
    first = run_pipeline(config, stages, state=RunState())
    second = run_pipeline(config, stages, state=RunState())
    assert first.exit_code == second.exit_code == 0
    assert first.manifest['outputs'] == second.manifest['outputs']


def test_missing_upstream_artifact(tmp_path, caplog):
    fixture_dir = write_synthetic_inputs(tmp_path / "fixture")
    with caplog.at_level(logging.ERROR):
        outcome = run_pipeline(_reduced_config(fixture_dir), [Stage.RND], state=RunState())
    assert outcome.exit_code == 3
    assert outcome.failed_stage == "rnd"
    assert "slices.csv" in caplog.text
    assert outcome.manifest['outputs'] == {}


# =============================================================================
# COMMAND LINE
# =============================================================================

class TestCli:

    def test_print_defaults(self, capsys):
        assert main(["config", "print-defaults"]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed == RunConfig().to_dict()

    def test_unreadable_config(self, tmp_path):
        assert main(["--config", str(tmp_path / "absent.json"), "ingest"]) == 2

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({'sed': 3}))
        assert main(["--config", str(path), "ingest"]) == 2

    def test_single_stage(self, tmp_path, capsys):
        fixture_dir = write_synthetic_inputs(tmp_path / "fixture")
        assert main(["--config", str(fixture_dir / "config.json"), "ingest"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert "ingest" in summary
        assert (fixture_dir / "out" / "treatment.csv").exists()

    def test_stage_without_inputs(self, tmp_path):
        fixture_dir = write_synthetic_inputs(tmp_path / "fixture")
        assert main(["--config", str(fixture_dir / "config.json"), "kernel"]) == 3

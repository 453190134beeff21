import csv
import json

import pytest

from fusionlab.config.settings import Config, threads_from_env
from fusionlab.core.decoder import OracleWeights, load_weights
from fusionlab.core.errors import ConfigError
from fusionlab.core.masking import MaskKind
from fusionlab.ui.session import MASK_SCENES, BatchSession, parse_ablation

from lab import build_parser


def read_rows(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.reader(f))


def run(config_path, command, **kwargs):
    config = Config.from_file(config_path)
    return BatchSession(config, quiet=True, **kwargs).run(command)


class TestConfig:
    def test_loads_sections(self, experiment, tmp_path):
        config = Config.from_file(experiment())
        assert config.seed == 7
        assert config.sim.n_objects == (2, 4)
        assert config.mask.kind is MaskKind.COMPLEMENTARY_GRID
        assert config.mask.grid.unit_range == (8, 16)
        assert [s.name for s in config.splits] == ['source', 'rain']
        assert config.paths.dataset == (tmp_path / 'data').resolve()

    def test_unknown_key_names_its_path(self, experiment):
        with pytest.raises(ConfigError) as e:
            Config.from_file(experiment(sim={'n_object': [1, 2]}))
        assert e.value.field == 'sim.n_object'

    def test_wrong_type(self, experiment):
        with pytest.raises(ConfigError) as e:
            Config.from_file(experiment(train={'epochs': 'many'}))
        assert e.value.field == 'train.epochs'

    def test_version_required(self, experiment):
        with pytest.raises(ConfigError) as e:
            Config.from_file(experiment(version='ccf-experiment-v0'))
        assert e.value.field == 'version'

    def test_training_split_must_exist(self, experiment):
        with pytest.raises(ConfigError) as e:
            Config.from_file(experiment(train={'split': 'night'}))
        assert e.value.field == 'train.split'

    def test_duplicate_split_names(self, experiment):
        split = {"name": "source", "n_scenes": 1}
        with pytest.raises(ConfigError):
            Config.from_file(experiment(splits=[split, split]))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{"version": ')
        with pytest.raises(ConfigError):
            Config.from_file(path)

    def test_unknown_split_selected(self, experiment):
        with pytest.raises(ConfigError):
            Config.from_file(experiment()).select_splits(['geo'])

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv('CCF_THREADS', '3')
        assert threads_from_env() == 3
        monkeypatch.setenv('CCF_THREADS', '0')
        with pytest.raises(ConfigError):
            threads_from_env()

    def test_debug_history_is_bounded(self):
        config = Config()
        for i in range(150):
            config.add_debug_message(f"message {i}")
        assert len(config.debug_messages) == config.max_debug_messages
        assert config.debug_messages[-1][1] == "message 149"


class TestAblationSpec:
    def test_default_grid(self):
        runs = parse_ablation(None)
        names = [r['name'] for r in runs]
        assert len(runs) == 8
        assert len(set(names)) == 8
        assert names[0] == 'baseline' and names[-1] == 'QDL+LGDP+CCM'

    def test_single_toggle(self):
        assert [r['name'] for r in parse_ablation('qdl')] == ['LGDP+CCM', 'QDL+LGDP+CCM']

    def test_masks(self):
        runs = parse_ablation('masks')
        assert [r['mask'] for r in runs][0] is MaskKind.NONE
        assert len(runs) == 6

    def test_unknown_toggle(self):
        with pytest.raises(ConfigError):
            parse_ablation('QDL,XYZ')


class TestGen:
    def test_same_bytes_on_rerun(self, experiment, tmp_path):
        path = experiment()
        assert run(path, 'gen') == 0
        first = (tmp_path / 'data' / 'source.jsonl').read_bytes()
        assert run(path, 'gen') == 0
        assert (tmp_path / 'data' / 'source.jsonl').read_bytes() == first
        assert len(first.splitlines()) == 3

    def test_thread_count_does_not_change_output(self, experiment, tmp_path, monkeypatch):
        path = experiment()
        assert run(path, 'gen') == 0
        first = (tmp_path / 'data' / 'rain.jsonl').read_bytes()
        monkeypatch.setenv('CCF_THREADS', '3')
        assert run(path, 'gen') == 0
        assert (tmp_path / 'data' / 'rain.jsonl').read_bytes() == first

    def test_empty_split(self, experiment, tmp_path):
        path = experiment(splits=[{"name": "source", "n_scenes": 0}])
        assert run(path, 'gen') == 0
        assert (tmp_path / 'data' / 'source.jsonl').read_bytes() == b''

    def test_unwritable_dataset_dir(self, experiment, tmp_path):
        (tmp_path / 'blocker').write_text('not a directory')
        path = experiment(paths={'dataset': 'blocker/data', 'out': 'out'})
        assert run(path, 'gen') == 1

    def test_split_selection(self, experiment, tmp_path):
        assert run(experiment(), 'gen', splits=['rain']) == 0
        assert (tmp_path / 'data' / 'rain.jsonl').exists()
        assert not (tmp_path / 'data' / 'source.jsonl').exists()


class TestEval:
    def test_oracle_weights_score_one(self, experiment, tmp_path):
        OracleWeights().save(tmp_path / 'oracle.json')
        path = experiment(paths={'dataset': 'data', 'out': 'out', 'weights': 'oracle.json'})
        assert run(path, 'gen') == 0
        assert run(path, 'eval') == 0
        header, *rows = read_rows(tmp_path / 'out' / 'eval_summary.csv')
        assert header == ['run', 'source', 'rain', 'mean_target']
        assert rows[0][1:] == ['1.000000', '1.000000', '1.000000']

    def test_missing_weights(self, experiment, tmp_path):
        path = experiment(paths={'dataset': 'data', 'out': 'out', 'weights': 'absent.json'})
        assert run(path, 'gen') == 0
        assert run(path, 'eval') == 1

    def test_missing_dataset(self, experiment, tmp_path):
        OracleWeights().save(tmp_path / 'oracle.json')
        path = experiment(paths={'dataset': 'nowhere', 'out': 'out', 'weights': 'oracle.json'})
        assert run(path, 'eval') == 1


class TestTrain:
    def test_writes_weights_and_metrics(self, experiment, tmp_path):
        path = experiment()
        assert run(path, 'gen') == 0
        assert run(path, 'train') == 0
        out = tmp_path / 'out'
        load_weights(out / 'weights.json')
        header, *rows = read_rows(out / 'metrics.csv')
        assert header == ['epoch', 'split', 'L_2d', 'L_3d', 'L_fused', 'L_total', 'mAP']
        assert [(r[0], r[1]) for r in rows] == [('0', 'source'), ('0', 'rain'), ('1', 'source'), ('1', 'rain')]
        assert (out / 'loss_curve.svg').exists()
        assert (out / 'confidence_net.json').exists()

    def test_train_then_eval(self, experiment, tmp_path):
        path = experiment(train={'epochs': 0, 'depth_prior': False})
        assert run(path, 'gen') == 0
        assert run(path, 'train') == 0
        assert run(path, 'eval') == 0
        header, *rows = read_rows(tmp_path / 'out' / 'eval_metrics.csv')
        assert len(rows) == 2


class TestPilot:
    def test_selected_split_only(self, experiment, tmp_path):
        path = experiment()
        assert run(path, 'gen') == 0
        assert run(path, 'pilot', splits=['source']) == 0
        out = tmp_path / 'out'
        for name in ('pilot_ap2d', 'pilot_origin_map', 'pilot_supervision', 'pilot_depth_mae'):
            rows = read_rows(out / f'{name}.csv')[1:]
            assert rows and all(r[0] == 'source' for r in rows)
        assert (out / 'pilot_ap2d.svg').exists()


class TestMask:
    def test_variant_statistics(self, experiment, tmp_path):
        path = experiment()
        assert run(path, 'mask') == 0
        rows = {r[0]: r for r in read_rows(tmp_path / 'out' / 'mask_summary.csv')[1:]}
        assert rows['None'][1] == '0.000000'
        assert rows['None'][2] == '1.000000'
        for r in read_rows(tmp_path / 'out' / 'mask_stats.csv')[1:]:
            if r[0] == 'ComplementaryGrid' and r[4] != 'NA':
                assert float(r[4]) + float(r[5]) == pytest.approx(1.0, abs=1e-6)

    def test_svg_stable(self, experiment, tmp_path):
        path = experiment()
        assert run(path, 'mask') == 0
        first = (tmp_path / 'out' / 'mask_ComplementaryGrid.svg').read_bytes()
        assert run(path, 'mask', out=tmp_path / 'again') == 0
        assert (tmp_path / 'again' / 'mask_ComplementaryGrid.svg').read_bytes() == first

    def test_every_camera_of_the_rig_is_reported(self, experiment, tmp_path):
        path = experiment()
        assert run(path, 'mask') == 0
        rows = read_rows(tmp_path / 'out' / 'mask_stats.csv')[1:]
        complementary = [r for r in rows if r[0] == 'ComplementaryGrid']
        assert len(complementary) == MASK_SCENES * 6
        assert {r[2] for r in complementary} == {str(ci) for ci in range(6)}
        for r in rows:
            if r[0] == 'ConsistentGrid' and r[4] != 'NA':
                assert float(r[4]) == pytest.approx(float(r[5]), abs=1e-6)


class TestAblate:
    def test_two_run_grid(self, experiment, tmp_path):
        path = experiment(train={'epochs': 1, 'batch_size': 3, 'depth_prior': False})
        assert run(path, 'gen') == 0
        assert run(path, 'ablate', ablate='CCM') == 0
        out = tmp_path / 'out'
        header, *rows = read_rows(out / 'ablation_summary.csv')
        assert [r[0] for r in rows] == ['QDL+LGDP', 'QDL+LGDP+CCM']
        assert (out / 'runs' / 'QDL+LGDP' / 'weights.json').exists()
        assert len(read_rows(out / 'ablation_supervision.csv')) == 1 + 2 * 2


def test_command_line_parser():
    args = build_parser().parse_args(['train', '--config', 'x.json', '--epochs', '3', '--splits', 'source,rain'])
    assert (args.command, args.epochs, args.splits) == ('train', 3, 'source,rain')
    with pytest.raises(SystemExit):
        build_parser().parse_args(['fly', '--config', 'x.json'])


def test_invariant_violation_fails_the_run(experiment, monkeypatch):
    from fusionlab.config import logs

    config = Config.from_file(experiment())
    session = BatchSession(config, quiet=True)
    monkeypatch.setitem(session.commands, 'gen', lambda: logs.violation("synthetic violation"))
    assert session.run('gen') == 1
    assert session.monitor.messages == ["synthetic violation"]
    assert any("synthetic violation" in m for _, m in config.debug_messages)

"""
Command-line front end: exit codes, manifests, a tiny end-to-end run
"""
import json
import os

import pandas as pd
import pytest

from attack import AttackConfig, CubeSlot
from config import save_config_file
from detector import build_detector, save_model
from main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, run
from manifest import load_manifest, verify_manifest

COMMANDS = ['build-index', 'gen-data', 'train', 'attack', 'evaluate', 'grid', 'render']


@pytest.fixture
def workspace(tmp_path, tiny_arch, tiny_index, tiny_scenegen):
    """Tiny detector that never sees clouds, a spectral index and the configs the commands need"""
    from spectra import save_spectral_index

    detector = build_detector(tiny_arch, seed=1)
    detector.weights['dense1.b'][:] = -30.0
    paths = {
        'model': str(tmp_path / 'model.msdm'),
        'index': str(tmp_path / 'index.csv'),
        'scenegen': str(tmp_path / 'scenegen.json'),
        'attack': str(tmp_path / 'attack.json'),
    }
    save_model(detector, paths['model'])
    save_spectral_index(tiny_index, paths['index'])
    save_config_file(tiny_scenegen, paths['scenegen'])
    save_config_file(AttackConfig(steps=2, batch_size=2, layout=[CubeSlot(height=4, width=4)]), paths['attack'])
    return tmp_path, paths


class TestExitCodes:
    @pytest.mark.parametrize('command', COMMANDS)
    def test_help(self, command):
        assert run([command, '--help']) == EXIT_OK

    def test_no_command(self):
        assert run([]) == EXIT_USAGE

    def test_missing_required_option(self):
        assert run(['attack', '--index', 'x.csv']) == EXIT_USAGE

    def test_unknown_choice(self):
        assert run(['evaluate', '--model', 'm', '--index', 'i', '--report', 'r', '--policy', 'corner']) == EXIT_USAGE

    def test_missing_model(self, tmp_path, capsys):
        code = run(['evaluate', '--model', str(tmp_path / 'none.msdm'), '--index', 'i.csv',
                    '--report', str(tmp_path / 'r.csv')])
        assert code == EXIT_FAILURE
        assert 'not found' in capsys.readouterr().err

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / 'scenegen.json'
        bad.write_text(json.dumps({'size': 'large'}))
        assert run(['gen-data', '--config', str(bad), '--out', str(tmp_path / 'data')]) == EXIT_FAILURE

    def test_grid_without_needed_detector(self, workspace):
        tmp_path, paths = workspace
        grid = tmp_path / 'grid.json'
        grid.write_text(json.dumps({'rows': [{'name': 'wide', 'detector': 'sqrt2'}]}))
        code = run(['grid', '--grid', str(grid), '--model', paths['model'], '--index', paths['index'],
                    '--report', str(tmp_path / 'grid.csv')])
        assert code == EXIT_FAILURE


class TestCommands:
    def test_build_index_writes_manifest(self, tmp_path):
        out = str(tmp_path / 'index' / 'index.csv')
        materials = str(tmp_path / 'index' / 'materials.csv')
        assert run(['build-index', '--synth-materials', '4', '--materials-out', materials, '--out', out]) == EXIT_OK
        manifest = load_manifest(str(tmp_path / 'index' / 'build-index.manifest.json'))
        assert manifest.command == 'build-index'
        assert sorted(r.path for r in manifest.outputs) == sorted([out, materials])
        assert verify_manifest(manifest) == []
        assert len(pd.read_csv(out).columns) == 5

    def test_gen_data(self, tmp_path, workspace):
        _, paths = workspace
        out = tmp_path / 'data'
        assert run(['gen-data', '--config', paths['scenegen'], '--out', str(out), '--splits', 'train',
                    '--threads', '2']) == EXIT_OK
        labels = pd.read_csv(out / 'labels.csv')
        assert len(labels) == 6
        manifest = load_manifest(str(out / 'gen-data.manifest.json'))
        assert manifest.seed == 5
        assert len(manifest.outputs) == 8

    def test_seed_flag_overrides_config(self, tmp_path, workspace):
        _, paths = workspace
        out = tmp_path / 'reseeded'
        assert run(['gen-data', '--config', paths['scenegen'], '--out', str(out), '--splits', 'val',
                    '--seed', '40']) == EXIT_OK
        assert load_manifest(str(out / 'gen-data.manifest.json')).seed == 40
        assert json.loads((out / 'scenegen.json').read_text())['seed'] == 40

    def test_attack_evaluate_render(self, workspace):
        tmp_path, paths = workspace
        cube = str(tmp_path / 'attack' / 'cube.msc1')
        assert run(['attack', '--model', paths['model'], '--index', paths['index'], '--scenegen', paths['scenegen'],
                    '--config', paths['attack'], '--loss', 'psi+nps', '--out', cube]) == EXIT_OK
        manifest = load_manifest(str(tmp_path / 'attack' / 'attack.manifest.json'))
        assert cube in [r.path for r in manifest.outputs]
        assert paths['model'] in manifest.input_hashes

        report = str(tmp_path / 'eval' / 'report.csv')
        assert run(['evaluate', '--model', paths['model'], '--index', paths['index'], '--cube', cube,
                    '--scenegen', paths['scenegen'], '--report', report]) == EXIT_OK
        table = pd.read_csv(report)
        assert list(table['row_name']) == ['cube']
        confidences = pd.read_csv(tmp_path / 'eval' / 'report.confidences.csv')
        assert (confidences['split'] == 'test').sum() == 4

        render_dir = str(tmp_path / 'render')
        assert run(['render', '--cube', cube, '--index', paths['index'], '--out', render_dir]) == EXIT_OK
        assert os.path.exists(os.path.join(render_dir, 'cube_visible.png'))
        assert os.path.exists(os.path.join(render_dir, 'render.manifest.json'))

    def test_grid(self, workspace):
        tmp_path, paths = workspace
        grid = tmp_path / 'grid.json'
        grid.write_text(json.dumps({
            'seeds': [0],
            'base': {'steps': 1, 'batch_size': 2, 'layout': [{'height': 4, 'width': 4}]},
            'rows': [{'name': 'no_cubes'}, {'name': 'psi', 'loss': 'psi'}],
        }))
        report = str(tmp_path / 'out' / 'grid.csv')
        assert run(['grid', '--grid', str(grid), '--model', f"default={paths['model']}",
                    '--index', paths['index'], '--scenegen', paths['scenegen'], '--report', report]) == EXIT_OK
        table = pd.read_csv(report)
        assert list(table['row_name']) == ['no_cubes', 'psi']
        assert table['acc_test'].notna().all()
        assert os.path.exists(tmp_path / 'out' / 'grid.seeds.csv')

import json
import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from camabench.bench import cli, runner
from camabench.bench.checkpoint import (
    HEADER,
    check_compatible,
    checkpoint_roundtrip,
    load_checkpoint,
    save_checkpoint,
)
from camabench.bench.config import ExperimentConfig, load_config
from camabench.bench.report import plot_data, read_results, report
from camabench.cama import CamaModel, CamaSpec
from camabench.errors import ConfigError, FormatError, SchemaError, ShapeError
from camabench.stochastics import RngStream
from camabench.utils import RESULT_COLUMNS, get_bench_config

REPO_CONFIG = Path(__file__).resolve().parent.parent / 'bench_config.json'

TINY = [
    'experiment.id="tiny"',
    'data.n=60', 'data.n_train=30', 'data.n_val=10',
    'model.dim_z=3', 'model.dim_m=2', 'model.hidden=8', 'model.hidden_m=[8,8]',
    'training.epochs=1', 'training.batch_size=16',
    'weights.K=2',
    'finetune.steps=2', 'finetune.batch_size=8',
    'grid.magnitudes=[0.0,0.5]',
]


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig().override([*TINY, f'output.directory="{tmp_path.as_posix()}"'])


def test_repo_config_loads_and_validates():
    config = load_config(REPO_CONFIG)
    assert config.seeds == (0, 1, 2)
    assert config.finetune.fraction == 0.5
    assert config.arms() == [('cama-generic', 'clean', 'cor'), ('dnn', 'clean', 'cor')]


def test_missing_config_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        get_bench_config(tmp_path / 'absent.json')


def test_override_parses_json_values():
    config = ExperimentConfig().override(['training.epochs=3', 'grid.magnitudes=[0.5]', 'output.directory=out'])
    assert config.training.epochs == 3
    assert config.grid.magnitudes == (0.5,)
    assert config.output.directory == 'out'
    assert config.flat()['training.epochs'] == 3


@pytest.mark.parametrize('assignment', ['training.epochz=3', 'nosection.x=1', 'training.epochs'])
def test_bad_overrides(assignment):
    with pytest.raises(ConfigError):
        ExperimentConfig().override([assignment])


@pytest.mark.parametrize('assignments', [
    ['finetune.fraction=0'],
    ['finetune.fraction=1.5'],
    ['grid.magnitudes=[]'],
    ['experiment.kind="attack-sweep"'],
    ['model.kinds=["cama-single"]'],
    ['training.regimes=["augmented"]'],
    ['experiment.kind="misspec"', 'grid.role_maps=["relabel:12"]'],
    ['data.source="images"'],
    ['weights.K=0'],
])
def test_invalid_configs_are_rejected(assignments):
    with pytest.raises(ConfigError):
        ExperimentConfig().override(assignments).validate()


def test_attack_sweeps_fine_tune_on_all_data():
    config = ExperimentConfig().override(['experiment.kind="attack-sweep"', 'grid.manipulation="fgsm"'])
    assert config.validate().resolved().finetune.fraction == 1.0
    assert ExperimentConfig().resolved().finetune.fraction == 0.5


def test_required_checkpoints_must_exist(tiny_config):
    with pytest.raises(ConfigError, match='Missing checkpoints'):
        tiny_config.override(['output.require_checkpoints=true']).validate()


def test_misspec_arms_cover_role_maps():
    config = ExperimentConfig().override(['experiment.kind="misspec"', 'grid.role_maps=["cor","swap:1"]'])
    assert config.arms() == [
        ('cama-generic', 'clean', 'cor'), ('cama-generic', 'clean', 'swap:1'), ('dnn', 'clean', 'cor'),
    ]
    assert config.checkpoint_path('cama-generic', 'clean', 'swap:1', 2).name == \
        'measurement_cama-generic-swap1_clean_seed2.ckpt'


def small_model(variant='single'):
    if variant == 'single':
        spec = CamaSpec.image(dim_z=3, dim_m=2, hidden=8, hidden_m=(8,))
    else:
        spec = CamaSpec.measurement(dim_z=3, dim_m=2, hidden=8, hidden_m=(8,))
    return CamaModel.create(spec, RngStream(0))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = small_model('generic')
    loaded = checkpoint_roundtrip(model, tmp_path / 'model.ckpt')
    assert loaded.params.checksums() == model.params.checksums()
    assert list(loaded.params.groups) == list(model.params.groups)


def test_checkpoint_meta_survives(tmp_path):
    model = small_model()
    path = save_checkpoint(model.params, tmp_path / 'sub' / 'model.ckpt', meta={'seed': 4})
    _, meta = load_checkpoint(path)
    assert meta == {'seed': 4}
    assert not path.with_name('model.ckpt.tmp').exists()


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = save_checkpoint(small_model().params, tmp_path / 'model.ckpt')
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_version_is_checked(tmp_path):
    path = save_checkpoint(small_model().params, tmp_path / 'model.ckpt')
    path.write_bytes(path.read_bytes().replace(HEADER, b'CAMA-CKPT v9\n', 1))
    with pytest.raises(FormatError, match='version'):
        load_checkpoint(path)


def test_image_checkpoint_does_not_fit_measurement_model(tmp_path):
    path = save_checkpoint(small_model('single').params, tmp_path / 'image.ckpt')
    loaded, _ = load_checkpoint(path)
    with pytest.raises(ShapeError, match='NN_Y'):
        check_compatible(small_model('generic').params, loaded)


def result_frame(rows):
    return pd.DataFrame(rows, columns=list(RESULT_COLUMNS))


def write_result_csv(path, rows):
    result_frame(rows).to_csv(path, index=False, encoding='utf-8')
    return path


def test_plot_data_aggregates_over_seeds():
    rows = [
        ['e', 'dnn', 'clean', 'shift_children', 0.5, 0.0, 0, 16, 0.6, 0.9, 1.0],
        ['e', 'dnn', 'clean', 'shift_children', 0.5, 0.0, 1, 16, 0.8, 0.9, 1.0],
        ['e', 'cama-generic', 'clean', 'shift_children', 0.5, 0.0, 0, 16, 0.7, 0.9, 1.0],
        ['e', 'cama-generic', 'clean', 'shift_children', 0.5, 0.5, 0, 16, 0.85, 0.9, 1.0],
        ['e', 'dnn', 'clean', 'shift_children', 1.0, 0.0, 0, 16, 0.4, 0.9, 1.0],
    ]
    table = plot_data(result_frame(rows))
    assert set(table['series']) == {'dnn/clean', 'cama-generic/clean', 'cama-generic/clean/ft'}
    dnn = table[(table['series'] == 'dnn/clean') & (table['x'] == 0.5)].iloc[0]
    assert dnn['mean'] == pytest.approx(0.7)
    assert dnn['std'] == pytest.approx(0.1)
    assert dnn['n'] == 2
    single = table[table['series'] == 'cama-generic/clean/ft']
    assert single['std'].tolist() == [0.0]


def test_report_writes_one_file_per_manipulation(tmp_path):
    rows = [
        ['e', 'dnn', 'clean', 'fgsm', 0.1, 0.0, 0, 16, 0.5, 0.9, 1.0],
        ['e', 'dnn', 'clean', 'pgd', 0.1, 0.0, 0, 16, 0.4, 0.9, 1.0],
    ]
    path = write_result_csv(tmp_path / 'e.csv', rows)
    written = report([path], tmp_path / 'plots')
    assert sorted(p.name for p in written) == ['e__fgsm.csv', 'e__pgd.csv']
    assert list(pd.read_csv(written[0]).columns)[:3] == ['series', 'model', 'regime']


def test_report_rejects_foreign_schema(tmp_path):
    path = tmp_path / 'other.csv'
    pd.DataFrame({'model': ['dnn'], 'accuracy': [0.5]}).to_csv(path, index=False)
    with pytest.raises(SchemaError):
        read_results([path])


def test_tiny_sweep_end_to_end(tiny_config):
    result = runner.run(tiny_config)
    assert result.complete
    frame = pd.read_csv(result.csv_path)
    assert list(frame.columns) == list(RESULT_COLUMNS)
    # Per magnitude: CAMA before and after fine-tuning, and the baseline.
    assert len(frame) == 6
    assert frame['acc_manipulated'].between(0, 1).all()
    assert frame['acc_clean'].between(0, 1).all()
    unshifted = frame[frame['magnitude'] == 0.0]
    np.testing.assert_array_equal(unshifted['acc_manipulated'], unshifted['acc_clean'])
    assert set(frame['finetune_fraction']) == {0.0, 0.5}
    # One evaluation stream per arm: clean accuracy before fine-tuning agrees across grid points.
    untuned = frame[frame['finetune_fraction'] == 0.0]
    assert (untuned.groupby('model')['acc_clean'].nunique() == 1).all()

    manifest = json.loads(result.manifest_path.read_text(encoding='utf-8'))
    assert manifest['config']['finetune']['fraction'] == 0.5
    assert list(manifest['validation_elbo']) == ['cama-generic/clean/seed0']
    assert np.isfinite(manifest['validation_elbo']['cama-generic/clean/seed0'])
    for path in manifest['checkpoints']:
        assert Path(path).is_file()

    rerun = runner.run(tiny_config)
    again = pd.read_csv(rerun.csv_path)
    numeric = ['magnitude', 'finetune_fraction', 'seed', 'K', 'acc_manipulated', 'acc_clean']
    pd.testing.assert_frame_equal(frame[numeric], again[numeric])


def test_zero_epsilon_attack_keeps_clean_accuracy(tiny_config):
    config = tiny_config.override([
        'experiment.kind="attack-sweep"', 'grid.manipulation="fgsm"', 'grid.magnitudes=[0.0]', 'finetune.enabled=false',
    ])
    result = runner.run(config)
    frame = pd.read_csv(result.csv_path)
    assert len(frame) == 2
    np.testing.assert_array_equal(frame['acc_manipulated'], frame['acc_clean'])


def test_parser_requires_seed_for_sweep():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(['sweep'])


def test_cli_gen_data(tmp_path):
    out = tmp_path / 'data.csv'
    assert cli.main(['gen-data', '--seed', '3', '--out', str(out), '--n', '40', '--n-train', '20', '--n-val', '5']) == 0
    assert len(pd.read_csv(out)) == 40


def test_cli_reports_config_errors(tmp_path):
    assert cli.main(['sweep', '--seed', '0', '--config', str(tmp_path / 'absent.json')]) == 2


def test_cli_report(tmp_path):
    path = write_result_csv(tmp_path / 'e.csv', [['e', 'dnn', 'clean', 'fgsm', 0.1, 0.0, 0, 16, 0.5, 0.9, 1.0]])
    assert cli.main(['report', str(path), '--out', str(tmp_path / 'plots')]) == 0
    assert (tmp_path / 'plots' / 'e__fgsm.csv').is_file()


# Directional reproductions at desk scale.

MNIST_FILES = {
    'data.train_images': 'train-images-idx3-ubyte.gz',
    'data.train_labels': 'train-labels-idx1-ubyte.gz',
    'data.test_images': 't10k-images-idx3-ubyte.gz',
    'data.test_labels': 't10k-labels-idx1-ubyte.gz',
}


def sweep(tmp_path, *assignments) -> pd.DataFrame:
    config = load_config(REPO_CONFIG).override([*assignments, f'output.directory="{tmp_path.as_posix()}"'])
    result = runner.run(config)
    assert result.complete, result.failures
    return pd.read_csv(result.csv_path)


def mean_accuracy(frame, model, magnitude, fraction=0.0, column='acc_manipulated', regime='clean') -> float:
    rows = frame[
        (frame['model'] == model) & (frame['regime'] == regime)
        & np.isclose(frame['magnitude'], magnitude) & np.isclose(frame['finetune_fraction'], fraction)
    ]
    assert len(rows), (model, regime, magnitude, fraction)
    return float(rows[column].mean())


@pytest.fixture
def mnist():
    root = os.environ.get('CAMABENCH_MNIST')
    if not root or not all((Path(root) / name).is_file() for name in MNIST_FILES.values()):
        pytest.skip('set CAMABENCH_MNIST to a directory holding the four MNIST IDX files')
    return [
        'data.source="images"', 'model.kinds=["cama-single","dnn"]', 'model.hidden_merge=null',
        'data.train_subset=2000', 'data.val_size=200', 'data.test_subset=1000', 'training.epochs=30',
        *(f'{key}="{(Path(root) / name).as_posix()}"' for key, name in MNIST_FILES.items()),
    ]


@pytest.mark.slow
def test_coparent_shift_hurts_cama_less_than_the_baseline(tmp_path):
    frame = sweep(tmp_path, 'finetune.enabled=false', 'grid.magnitudes=[0.0,2.0]')
    cama_clean, cama_shifted = mean_accuracy(frame, 'cama-generic', 0.0), mean_accuracy(frame, 'cama-generic', 2.0)
    dnn_clean, dnn_shifted = mean_accuracy(frame, 'dnn', 0.0), mean_accuracy(frame, 'dnn', 2.0)
    assert cama_shifted >= dnn_shifted + 0.10
    assert cama_clean - cama_shifted <= 0.5 * (dnn_clean - dnn_shifted)


@pytest.mark.slow
def test_fine_tuning_recovers_child_shift_without_hurting_clean_accuracy(tmp_path):
    frame = sweep(tmp_path, 'grid.manipulation="shift_children"', 'grid.magnitudes=[2.0]', 'finetune.fraction=0.5')
    before = mean_accuracy(frame, 'cama-generic', 2.0)
    after = mean_accuracy(frame, 'cama-generic', 2.0, fraction=0.5)
    assert after >= before + 0.05
    clean_before = mean_accuracy(frame, 'cama-generic', 2.0, column='acc_clean')
    clean_after = mean_accuracy(frame, 'cama-generic', 2.0, fraction=0.5, column='acc_clean')
    assert abs(clean_after - clean_before) <= 0.01


@pytest.mark.slow
def test_attacks_order_and_cama_resists_fgsm(tmp_path):
    common = ['seeds=[0]', 'experiment.kind="attack-sweep"', 'grid.magnitudes=[0.0,0.1]', 'finetune.enabled=false']
    # One output directory, so the pgd sweep reuses the checkpoints trained for fgsm.
    fgsm = sweep(tmp_path, *common, 'experiment.id="fgsm"', 'grid.manipulation="fgsm"')
    pgd = sweep(tmp_path, *common, 'experiment.id="pgd"', 'grid.manipulation="pgd"')
    for frame in (fgsm, pgd):
        unattacked = frame[frame['magnitude'] == 0.0]
        np.testing.assert_array_equal(unattacked['acc_manipulated'], unattacked['acc_clean'])
    assert mean_accuracy(pgd, 'dnn', 0.1) <= mean_accuracy(fgsm, 'dnn', 0.1)
    assert mean_accuracy(fgsm, 'cama-generic', 0.1) > mean_accuracy(fgsm, 'dnn', 0.1)


@pytest.mark.slow
def test_misspecified_graphs_lose_robustness(tmp_path):
    frame = sweep(tmp_path, 'experiment.kind="misspec"', 'grid.role_maps=["cor","relabel:1","relabel:2"]',
                  'grid.magnitudes=[2.0]', 'finetune.enabled=false')
    correct = mean_accuracy(frame, 'cama-generic', 2.0)
    assert mean_accuracy(frame, 'cama-generic[relabel:2]', 2.0) < correct
    assert mean_accuracy(frame, 'cama-generic[relabel:1]', 2.0) > mean_accuracy(frame, 'dnn', 2.0)


@pytest.mark.slow
def test_one_percent_of_shifted_data_is_enough_to_fine_tune(tmp_path, mnist):
    frame = sweep(tmp_path, *mnist, 'model.kinds=["cama-single"]', 'experiment.kind="finetune-fraction"',
                  'grid.manipulation="shift_vertical"', 'grid.magnitudes=[0.3]', 'grid.fractions=[0.01,1.0]')
    before = mean_accuracy(frame, 'cama-single', 0.3)
    full_gain = mean_accuracy(frame, 'cama-single', 0.3, fraction=1.0) - before
    assert full_gain > 0
    assert mean_accuracy(frame, 'cama-single', 0.3, fraction=0.01) - before >= 0.7 * full_gain


@pytest.mark.slow
def test_fine_tuning_on_horizontal_shifts_transfers_to_vertical_ones(tmp_path, mnist):
    cama_frame = sweep(tmp_path / 'cama', *mnist, 'model.kinds=["cama-single"]', 'grid.manipulation="shift_vertical"',
                       'finetune.manipulation="shift_horizontal"', 'grid.magnitudes=[0.3]')
    before = mean_accuracy(cama_frame, 'cama-single', 0.3)
    assert mean_accuracy(cama_frame, 'cama-single', 0.3, fraction=0.5) >= before - 0.02

    dnn_frame = sweep(tmp_path / 'dnn', *mnist, 'model.kinds=["dnn"]', 'training.regimes=["clean","augmented"]',
                      'training.augment_axis="horizontal"', 'grid.manipulation="shift_vertical"',
                      'grid.magnitudes=[0.3]', 'finetune.enabled=false')
    clean_trained = mean_accuracy(dnn_frame, 'dnn', 0.3)
    assert mean_accuracy(dnn_frame, 'dnn', 0.3, regime='augmented') <= clean_trained - 0.02

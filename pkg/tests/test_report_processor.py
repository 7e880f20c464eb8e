import json

import pytest
from openpyxl import load_workbook

from core.report_processor import COMPARISON_COLUMNS, RunReportProcessor
from utils.errors import MissingArtifactError


def _fake_run(root, mode, seed, val_ctr, noisy_robustness=None):
    run_dir = root / 'ar' / f"{mode}_seed{seed}"
    run_dir.mkdir(parents=True)
    lines = [
        {'type': 'step', 'step': 1, 'epoch': 1, 'ar_loss': 2.0},
        {'type': 'epoch', 'step': 1, 'epoch': 1, 'ar_loss': 2.0, 'reg_loss': 0.5, 'total_loss': 2.5,
         'val_ctr': val_ctr - 0.1, 'val_nll': 2.1},
        {'type': 'epoch', 'step': 2, 'epoch': 2, 'ar_loss': 1.5, 'reg_loss': 0.4, 'total_loss': 1.9,
         'val_ctr': val_ctr, 'val_nll': 1.8},
    ]
    (run_dir / 'metrics.jsonl').write_text('\n'.join(json.dumps(l) for l in lines) + '\n', encoding='utf-8')
    (run_dir / 'final_eval.json').write_text(json.dumps({
        'mode': mode, 'seed': seed, 'val_ctr': val_ctr, 'val_nll': 1.8, 'val_perplexity': 6.05,
        'noisy_val_ctr': val_ctr / 2, 'eval_noise': 0.1,
    }), encoding='utf-8')
    if noisy_robustness is not None:
        (run_dir / 'reports').mkdir()
        (run_dir / 'reports' / 'robustness.json').write_text(json.dumps({
            'experiment': 'robustness', 'conditions': [], 'records': [],
            'summary': [{'condition': 'val/noisy', 'ctr_mean': noisy_robustness, 'ctr_std': 0.0}],
        }), encoding='utf-8')
    return str(run_dir)


def test_comparison_table_orders_modes(tmp_path):
    _fake_run(tmp_path, 'rear', 0, 0.6)
    _fake_run(tmp_path, 'vanilla', 1, 0.4)
    _fake_run(tmp_path, 'vanilla', 0, 0.5, noisy_robustness=0.33)
    processor = RunReportProcessor(str(tmp_path))

    table = processor.build_comparison_table()

    assert list(table.columns) == COMPARISON_COLUMNS
    assert table['run'].tolist() == ['vanilla_seed0', 'vanilla_seed1', 'rear_seed0']
    assert table.loc[0, 'noisy_val_ctr'] == pytest.approx(0.33)
    assert table.loc[1, 'noisy_val_ctr'] == pytest.approx(0.2)
    assert table.loc[2, 'epochs'] == 2
    assert table.loc[2, 'ar_loss'] == pytest.approx(1.5)


def test_summary_stats_and_export(tmp_path):
    _fake_run(tmp_path, 'vanilla', 0, 0.4)
    _fake_run(tmp_path, 'vanilla', 1, 0.6)
    _fake_run(tmp_path, 'rear', 0, 0.7)
    processor = RunReportProcessor(str(tmp_path))
    table = processor.build_comparison_table()
    stats = processor.get_summary_stats(table)

    vanilla = stats[stats['mode'] == 'vanilla'].iloc[0]
    assert vanilla['num_runs'] == 2
    assert vanilla['val_ctr_mean'] == pytest.approx(0.5)

    paths = processor.export(table, stats, str(tmp_path / 'report'))
    workbook = load_workbook(paths['excel'])
    assert workbook.sheetnames == ['运行对比', '按模式汇总']
    exported = json.loads(open(paths['json'], encoding='utf-8').read())
    assert len(exported['runs']) == 3 and len(exported['by_mode']) == 2


def test_missing_runs(tmp_path):
    processor = RunReportProcessor(str(tmp_path))
    assert processor.discover_runs() == []
    with pytest.raises(MissingArtifactError):
        processor.build_comparison_table()
    with pytest.raises(MissingArtifactError):
        processor.read_metrics_log(str(tmp_path / 'ar' / 'nothing'))


def test_epoch_frame_filters_step_records(tmp_path):
    run_dir = _fake_run(tmp_path, 'rear', 0, 0.6)
    frame = RunReportProcessor(str(tmp_path)).epoch_frame(run_dir)
    assert frame['epoch'].tolist() == [1, 2]

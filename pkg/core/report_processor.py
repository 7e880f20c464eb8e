#!/usr/bin/env python3
"""
运行汇总模块

读取各 AR 运行目录的指标日志、最终评估与诊断报告,
生成按模式对比的汇总表并导出为 CSV / Excel / JSON
"""

import json
import logging
import os
from typing import Dict, List, Optional

import pandas as pd

from utils.errors import MissingArtifactError
from utils.validators import TRAIN_MODES

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = [
    'run', 'mode', 'seed', 'epochs', 'ar_loss', 'reg_loss', 'total_loss',
    'val_ctr', 'noisy_val_ctr', 'val_nll', 'val_perplexity',
]


class RunReportProcessor:
    """运行结果汇总器"""

    def __init__(self, output_dir: str):
        """
        Args:
            output_dir: 运行输出根目录,默认在 <output_dir>/ar 下查找运行
        """
        self.output_dir = output_dir
        self.ar_root = os.path.join(output_dir, 'ar')

    def discover_runs(self) -> List[str]:
        """<output_dir>/ar 下所有包含 metrics.jsonl 的目录"""
        if not os.path.isdir(self.ar_root):
            return []
        runs = []
        for name in sorted(os.listdir(self.ar_root)):
            run_dir = os.path.join(self.ar_root, name)
            if os.path.exists(os.path.join(run_dir, 'metrics.jsonl')):
                runs.append(run_dir)
        return runs

    def read_metrics_log(self, run_dir: str) -> pd.DataFrame:
        """
        读取 JSON-lines 指标日志

        Args:
            run_dir: AR 运行目录

        Returns:
            DataFrame: 全部记录(step 与 epoch 两类)
        """
        path = os.path.join(run_dir, 'metrics.jsonl')
        if not os.path.exists(path):
            raise MissingArtifactError('指标日志', path, 'ar-train')
        df = pd.read_json(path, lines=True)
        logger.info(f"成功读取指标日志: {path}, 行数: {len(df)}")
        return df

    def epoch_frame(self, run_dir: str) -> pd.DataFrame:
        df = self.read_metrics_log(run_dir)
        return df[df['type'] == 'epoch'].reset_index(drop=True)

    def _read_json(self, path: str) -> Optional[Dict]:
        if not os.path.exists(path):
            return None
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def summarize_run(self, run_dir: str) -> Dict:
        """
        单个运行的最终指标

        final_eval.json 缺失(训练未完成)时仅使用日志中最后一轮的数据;
        reports/robustness.json 存在时用其加噪验证 CTR 覆盖最终评估的值
        """
        epochs = self.epoch_frame(run_dir)
        if epochs.empty:
            raise MissingArtifactError('完整训练轮次', run_dir, 'ar-train')
        last = epochs.iloc[-1]

        final_eval = self._read_json(os.path.join(run_dir, 'final_eval.json'))
        if final_eval is None:
            logger.warning(f"运行 {run_dir} 没有 final_eval.json,使用最后一轮日志")
            final_eval = {}

        summary = {
            'run': os.path.basename(os.path.normpath(run_dir)),
            'mode': final_eval.get('mode', os.path.basename(run_dir).split('_seed')[0]),
            'seed': final_eval.get('seed'),
            'epochs': int(last['epoch']),
            'ar_loss': float(last['ar_loss']),
            'reg_loss': float(last['reg_loss']),
            'total_loss': float(last['total_loss']),
            'val_ctr': final_eval.get('val_ctr', float(last['val_ctr'])),
            'noisy_val_ctr': final_eval.get('noisy_val_ctr'),
            'val_nll': final_eval.get('val_nll', float(last['val_nll'])),
            'val_perplexity': final_eval.get('val_perplexity'),
        }

        robustness = self._read_json(os.path.join(run_dir, 'reports', 'robustness.json'))
        if robustness is not None:
            for row in robustness['summary']:
                if row['condition'] == 'val/noisy':
                    summary['noisy_val_ctr'] = row['ctr_mean']
        return summary

    def build_comparison_table(self, run_dirs: Optional[List[str]] = None) -> pd.DataFrame:
        """
        多个运行的对比表

        Args:
            run_dirs: 运行目录列表,None 则自动发现

        Returns:
            DataFrame: 每个运行一行,按模式顺序与种子排序
        """
        run_dirs = run_dirs or self.discover_runs()
        if not run_dirs:
            raise MissingArtifactError('AR 运行', self.ar_root, 'ar-train')

        table = pd.DataFrame([self.summarize_run(d) for d in run_dirs], columns=COMPARISON_COLUMNS)
        order = {mode: i for i, mode in enumerate(TRAIN_MODES)}
        table['_order'] = table['mode'].map(order).fillna(len(order))
        table = table.sort_values(['_order', 'seed', 'run']).drop(columns='_order').reset_index(drop=True)

        logger.info(f"汇总完成: 共{len(table)}个运行")
        return table

    def get_summary_stats(self, table: pd.DataFrame) -> pd.DataFrame:
        """
        按模式聚合(跨种子的均值与标准差)

        Args:
            table: build_comparison_table 的结果

        Returns:
            DataFrame: 每个模式一行
        """
        metrics = ['ar_loss', 'reg_loss', 'val_ctr', 'noisy_val_ctr', 'val_nll']
        grouped = table.groupby('mode', sort=False)[metrics].agg(['mean', 'std'])
        grouped.columns = [f"{metric}_{stat}" for metric, stat in grouped.columns]
        grouped.insert(0, 'num_runs', table.groupby('mode', sort=False).size())
        return grouped.reset_index()

    def export(self, table: pd.DataFrame, stats: pd.DataFrame, report_dir: str, name: str = 'comparison') -> Dict[str, str]:
        """
        导出 CSV、Excel(两个工作表)与 JSON

        Returns:
            格式 → 文件路径
        """
        os.makedirs(report_dir, exist_ok=True)
        paths = {
            'csv': os.path.join(report_dir, f"{name}.csv"),
            'excel': os.path.join(report_dir, f"{name}.xlsx"),
            'json': os.path.join(report_dir, f"{name}.json"),
        }
        table.to_csv(paths['csv'], index=False)
        with pd.ExcelWriter(paths['excel'], engine='openpyxl') as writer:
            table.to_excel(writer, sheet_name='运行对比', index=False)
            stats.to_excel(writer, sheet_name='按模式汇总', index=False)
        with open(paths['json'], 'w', encoding='utf-8') as f:
            json.dump({
                'runs': json.loads(table.to_json(orient='records')),
                'by_mode': json.loads(stats.to_json(orient='records')),
            }, f, ensure_ascii=False, indent=2)

        logger.info(f"对比表已导出: {', '.join(paths.values())}")
        return paths

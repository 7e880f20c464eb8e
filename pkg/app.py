#!/usr/bin/env python3
"""
视觉自回归生成实验室 - 命令行主入口

子命令:
    tokenizer-train  训练 VQ 分词器
    tokenize         用冻结分词器生成 token 缓存
    ar-train         训练自回归模型 (--mode vanilla|noise_only|embed_only|rear)
    sample           CFG 采样并输出图像网格
    diagnose         运行诊断实验
    report           汇总多个运行的对比表

使用方法:
    python app.py <子命令> [--config config.yaml] [--set key=value ...]

退出码: 0 成功, 1 用法/配置错误, 2 运行时错误, 3 完整性错误
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import torch

from core.datasets import ingest_dataset
from core.diagnostics import (
    CKAProfile,
    DiagnosticsReport,
    cka_report,
    ctr_experiment,
    decode_sequences,
    embedding_replacement_experiment,
    exposure_bias_experiment,
    layer_similarity_profile,
    robustness_report,
    throughput_diagnostics,
)
from core.sampler import SampleConfig, sample, throughput_report
from core.storage import (
    StorageManager,
    TokenCache,
    build_token_cache,
    load_token_cache,
    read_report,
    save_token_cache,
    save_tokenizer,
    load_tokenizer,
    state_checksum,
)
from core.tokenizer import TokenizerConfig, codebook_usage, evaluate_reconstruction, rasterize, train_tokenizer
from core.trainer import TrainConfig, load_ar_model, train_loop
from core.transformer import ARConfig, count_parameters
from core.report_processor import RunReportProcessor
from core.visualizer import DiagnosticsVisualizer
from utils.config_loader import RunConfig, load_run_config, parse_overrides
from utils.errors import ConfigError, IntegrityError, LabError, MissingArtifactError
from utils.formatters import MetricFormatter
from utils.logging_setup import attach_run_log, configure_logging

logger = logging.getLogger('app')

# 专用命令行参数 → 配置键
FLAG_KEYS = {
    'output_dir': 'output_dir',
    'seed': 'seed',
    'device': 'device',
    'log_level': 'log_level',
    'mode': 'mode',
    'epochs': 'epochs',
    'guidance_scale': 'guidance_scale',
    'guidance_power': 'guidance_power',
    'constant_scale': 'constant_scale',
    'num_samples': 'num_samples',
    'label': 'sample_label',
    'experiment': 'experiment',
    'r': 'r_grid',
    'rprime': 'rprime_grid',
    'seeds': 'num_seeds',
    'model_tag': 'model_tag',
    'runs': 'report_runs',
}


class LabArgumentParser(argparse.ArgumentParser):
    """用法错误以 ConfigError 抛出,退出码为 1"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    base = argparse.ArgumentParser(add_help=False)
    base.add_argument('--config', default=None, help='扁平 key: value 配置文件(默认 ./config.yaml)')
    base.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help='覆盖任意配置项,可重复')
    base.add_argument('--output-dir', dest='output_dir', help='运行输出根目录')
    base.add_argument('--seed', help='全局随机种子')
    base.add_argument('--device', help='auto | cpu | cuda')
    base.add_argument('--log-level', dest='log_level', help='日志级别')

    parser = LabArgumentParser(description='视觉自回归生成实验室')
    subparsers = parser.add_subparsers(dest='command', required=True, parser_class=LabArgumentParser)

    subparsers.add_parser('tokenizer-train', help='训练 VQ 分词器', parents=[base])
    subparsers.add_parser('tokenize', help='生成训练/验证 token 缓存', parents=[base])

    p_train = subparsers.add_parser('ar-train', help='训练自回归模型', parents=[base])
    p_train.add_argument('--mode', help='vanilla | noise_only | embed_only | rear')
    p_train.add_argument('--epochs', help='训练轮数')
    p_train.add_argument('--no-resume', dest='resume', action='store_false', help='忽略已有检查点,从头训练')

    p_sample = subparsers.add_parser('sample', help='采样图像', parents=[base])
    p_sample.add_argument('--mode', help='选择 <output_dir>/ar/<mode>_seed<seed> 运行')
    p_sample.add_argument('--guidance-scale', dest='guidance_scale', help='CFG 最大尺度 s')
    p_sample.add_argument('--guidance-power', dest='guidance_power', help='power-cosine 幂次 p')
    p_sample.add_argument('--constant-scale', dest='constant_scale', action='store_const', const='true',
                          help='使用恒定 CFG 尺度')
    p_sample.add_argument('--num-samples', dest='num_samples', help='采样图像数')
    p_sample.add_argument('--label', help='采样类别(-1 表示循环所有类别)')

    p_diag = subparsers.add_parser('diagnose', help='运行诊断实验', parents=[base])
    p_diag.add_argument('--mode', help='选择 <output_dir>/ar/<mode>_seed<seed> 运行')
    p_diag.add_argument('--experiment', help='ctr | exposure_bias | embedding_replacement | cka | robustness | throughput')
    p_diag.add_argument('--r', help='r 取值,逗号分隔')
    p_diag.add_argument('--rprime', help='r′ 取值,逗号分隔')
    p_diag.add_argument('--seeds', help='重复种子数')
    p_diag.add_argument('--model-tag', dest='model_tag', help='报告中的模型标签')

    p_report = subparsers.add_parser('report', help='汇总运行对比表', parents=[base])
    p_report.add_argument('--runs', help='AR 运行目录,逗号分隔(默认扫描 <output_dir>/ar)')

    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = parse_overrides(args.set)
    flags = {key: getattr(args, attr) for attr, key in FLAG_KEYS.items() if getattr(args, attr, None) is not None}
    overrides.update(parse_overrides(f"{k}={v}" for k, v in flags.items()))
    return load_run_config(args.config, overrides)


def resolve_device(config: RunConfig) -> torch.device:
    if config['device'] == 'auto':
        return torch.device('cuda' if torch.cuda.is_available() else 'cpu')
    if config['device'].startswith('cuda') and not torch.cuda.is_available():
        raise ConfigError("device=cuda 但当前环境没有可用的 CUDA", key='device')
    return torch.device(config['device'])


def tokenizer_path(config: RunConfig) -> str:
    return config['tokenizer_ckpt'] or os.path.join(config['output_dir'], 'tokenizer', 'tokenizer.ckpt')


def cache_paths(config: RunConfig) -> Tuple[str, str]:
    cache_dir = config['token_cache_dir'] or os.path.join(config['output_dir'], 'cache')
    return os.path.join(cache_dir, 'train.tokens'), os.path.join(cache_dir, 'val.tokens')


def ar_run_dir(config: RunConfig) -> str:
    return config['ar_run_dir'] or os.path.join(config['output_dir'], 'ar', f"{config['mode']}_seed{config['seed']}")


def load_caches(config: RunConfig, checksum: str) -> Tuple[TokenCache, TokenCache]:
    train_path, val_path = cache_paths(config)
    return load_token_cache(train_path, checksum), load_token_cache(val_path, checksum)


def latest_ar_checkpoint(config: RunConfig) -> str:
    run_dir = ar_run_dir(config)
    checkpoint = StorageManager(run_dir).latest_checkpoint() if os.path.isdir(run_dir) else None
    if checkpoint is None:
        raise MissingArtifactError('AR 检查点', os.path.join(run_dir, 'checkpoints'), f"ar-train --mode {config['mode']}")
    return checkpoint


def cmd_tokenizer_train(config: RunConfig) -> int:
    path = tokenizer_path(config)
    out_dir = os.path.dirname(os.path.abspath(path))
    attach_run_log(out_dir)
    config.save(os.path.join(out_dir, 'config.yaml'))
    device = resolve_device(config)

    splits = ingest_dataset(config)
    tok_config = TokenizerConfig.from_run_config(config)
    tokenizer, history = train_tokenizer(splits.train.images, splits.val.images, tok_config,
                                         seed=config['seed'], device=str(device))
    save_tokenizer(path, tokenizer, history, config.snapshot())

    storage = StorageManager(out_dir)
    val = splits.val.images[:8].to(device)
    storage.save_image_grid(torch.cat([val, tokenizer.reconstruct(val)]), 'reconstructions', columns=8)
    storage.save_json({
        'dataset': splits.summary(),
        'val_psnr': evaluate_reconstruction(tokenizer, splits.val.images.to(device)),
        'codebook_usage': codebook_usage(tokenizer, splits.val.images.to(device)),
        'checksum': state_checksum(tokenizer),
        'history': history,
    }, 'tokenizer_summary.json')
    return 0


def cmd_tokenize(config: RunConfig) -> int:
    device = resolve_device(config)
    tokenizer = load_tokenizer(tokenizer_path(config), str(device))
    splits = ingest_dataset(config)
    train_path, val_path = cache_paths(config)
    config.save(os.path.join(os.path.dirname(os.path.abspath(train_path)), 'config.yaml'))

    for split_name, dataset, path in (('train', splits.train, train_path), ('val', splits.val, val_path)):
        cache = build_token_cache(dataset, tokenizer, path, config['num_classes'])
        # 抽查: 随机样本重新分词应与缓存一致
        generator = torch.Generator().manual_seed(config['seed'])
        probe = torch.randperm(len(dataset), generator=generator)[:16]
        live = rasterize(tokenizer.tokenize(dataset.images[probe].to(device))).cpu()
        if not torch.equal(live, cache.indices[probe]):
            raise IntegrityError(f"{split_name} 缓存抽查失败: 重新分词结果与缓存不一致")
        logger.info(f"{split_name} 缓存抽查通过 ({len(probe)} 张)")
    return 0


def cmd_ar_train(config: RunConfig, resume: bool = True) -> int:
    device = resolve_device(config)
    tokenizer = load_tokenizer(tokenizer_path(config), str(device))
    train_cache, val_cache = load_caches(config, state_checksum(tokenizer))

    ar_config = ARConfig.from_run_config(config, vocab_size=train_cache.vocab_size,
                                         seq_len=train_cache.num_tokens, codebook_dim=tokenizer.config.codebook_dim)
    train_config = TrainConfig.from_run_config(config, ar_config)
    counts = count_parameters(ar_config)
    logger.info(f"参数量: 主干 {counts.backbone:,}, 投影头 {counts.heads:,}, 合计 {counts.total:,}")

    run_dir = ar_run_dir(config)
    attach_run_log(run_dir)
    config.save(os.path.join(run_dir, 'config.yaml'))

    result = train_loop(train_cache, val_cache, tokenizer.codebook, ar_config, train_config, run_dir,
                        config.snapshot(), device, resume=resume)
    logger.info(f"训练完成: {result.last_checkpoint}")
    return 0


def _sample_labels(config: RunConfig, count: int) -> torch.Tensor:
    if config['sample_label'] >= 0:
        if config['sample_label'] >= config['num_classes']:
            raise ConfigError(f"sample_label={config['sample_label']} 超出类别数", key='sample_label')
        return torch.full((count,), config['sample_label'], dtype=torch.long)
    return torch.arange(count) % config['num_classes']


def cmd_sample(config: RunConfig) -> int:
    device = resolve_device(config)
    tokenizer = load_tokenizer(tokenizer_path(config), str(device))
    model, _ = load_ar_model(latest_ar_checkpoint(config), device)
    sample_config = SampleConfig.from_run_config(config, model.config.seq_len)

    labels = _sample_labels(config, config['num_samples'])
    chunks = []
    for batch_index, start in enumerate(range(0, len(labels), sample_config.batch_size)):
        batch_config = SampleConfig(**{**sample_config.__dict__, 'seed': config['seed'] + batch_index})
        chunks.append(sample(model, labels[start:start + sample_config.batch_size].to(device), batch_config).cpu())
    tokens = torch.cat(chunks)

    storage = StorageManager(ar_run_dir(config))
    name = f"samples_seed{config['seed']}"
    config.save(os.path.join(storage.samples_dir, f"{name}.yaml"))
    grid = tokenizer.config.grid_size
    save_token_cache(os.path.join(storage.samples_dir, f"{name}.tokens"), TokenCache(
        labels=labels, indices=tokens, vocab_size=model.config.vocab_size, height=grid, width=grid,
        num_classes=config['num_classes'], checksum=state_checksum(tokenizer),
    ))
    images = decode_sequences(tokenizer, tokens)
    storage.save_image_grid(images, name, config['grid_columns'])
    return 0


def cmd_diagnose(config: RunConfig) -> int:
    device = resolve_device(config)
    experiment = config['experiment']
    tokenizer = load_tokenizer(tokenizer_path(config), str(device))
    train_cache, val_cache = load_caches(config, state_checksum(tokenizer))
    model, container = load_ar_model(latest_ar_checkpoint(config), device)
    model_tag = config['model_tag'] or container.meta.get('mode', config['mode'])
    seeds = [config['seed'] + i for i in range(config['num_seeds'])]

    storage = StorageManager(ar_run_dir(config))
    attach_run_log(storage.base_dir)
    config.save(os.path.join(storage.reports_dir, f"{experiment}_config.yaml"))
    visualizer = DiagnosticsVisualizer()
    val_seq, val_lab = val_cache.indices, val_cache.labels

    if experiment == 'ctr':
        report = ctr_experiment(model, val_seq, val_lab, seeds, config['diag_images'])
    elif experiment == 'exposure_bias':
        sample_config = SampleConfig.from_run_config(config, model.config.seq_len)
        report = exposure_bias_experiment(model, tokenizer, val_seq, val_lab, config['r_grid'], seeds,
                                          sample_config, num_images=config['diag_images'])
        storage.save_figure(visualizer.create_exposure_bias_chart(report), 'exposure_bias')
    elif experiment == 'embedding_replacement':
        report = embedding_replacement_experiment(model, tokenizer, val_seq, val_lab, config['rprime_grid'], seeds,
                                                  num_images=config['diag_images'])
        storage.save_figure(visualizer.create_embedding_replacement_chart(report), 'embedding_replacement')
    elif experiment == 'cka':
        profiles = [
            layer_similarity_profile(model, val_seq, val_lab, tokenizer.codebook, config['cka_positions'],
                                     seed=seed, model_tag=model_tag)
            for seed in seeds
        ]
        report = cka_report(profiles, seeds)
        storage.save_figure(visualizer.create_cka_profile_chart(profiles[:1]), 'cka_profile')
    elif experiment == 'robustness':
        report = robustness_report(model, train_cache.indices, train_cache.labels, val_seq, val_lab,
                                   config['robustness_noise'], seeds,
                                   num_sequences=max(config['diag_images'], 1000))
        storage.save_figure(visualizer.create_robustness_chart({model_tag: report}), 'robustness')
    else:
        sample_config = SampleConfig.from_run_config(config, model.config.seq_len)
        throughput = throughput_report(model, config['sample_batch'], sample_config, config['throughput_runs'])
        report = throughput_diagnostics(throughput, config['seed'])

    report.meta['model_tag'] = model_tag
    storage.save_report(report.to_dict(), experiment)
    return 0


def cmd_report(config: RunConfig) -> int:
    processor = RunReportProcessor(config['output_dir'])
    run_dirs = config['report_runs'] or processor.discover_runs()
    table = processor.build_comparison_table(run_dirs)
    stats = processor.get_summary_stats(table)

    report_dir = os.path.join(config['output_dir'], 'report')
    config.save(os.path.join(report_dir, 'config.yaml'))
    processor.export(table, stats, report_dir)

    storage = StorageManager(report_dir)
    visualizer = DiagnosticsVisualizer()
    curves = {}
    robustness: Dict[str, DiagnosticsReport] = {}
    profiles: List[CKAProfile] = []
    dirs_by_run = {os.path.basename(os.path.normpath(d)): d for d in run_dirs}
    for row in table.to_dict(orient='records'):
        run_dir = dirs_by_run[row['run']]
        epochs = processor.epoch_frame(run_dir).assign(mode=row['mode'])
        curves[row['run']] = epochs
        robustness_path = os.path.join(run_dir, 'reports', 'robustness.json')
        if os.path.exists(robustness_path):
            robustness[row['run']] = DiagnosticsReport.from_dict(read_report(robustness_path))
        cka_path = os.path.join(run_dir, 'reports', 'cka.json')
        if os.path.exists(cka_path):
            first = read_report(cka_path)['meta']['profiles'][0]
            profiles.append(CKAProfile(**{**first, 'model_tag': row['run']}))

    storage.save_figure(visualizer.create_loss_curve_chart(curves), 'loss_curves')
    if robustness:
        storage.save_figure(visualizer.create_robustness_chart(robustness), 'robustness_comparison')
    if profiles:
        storage.save_figure(visualizer.create_cka_profile_chart(profiles), 'cka_comparison')

    for row in table.to_dict(orient='records'):
        logger.info(
            f"{row['run']}: val CTR={MetricFormatter.format_metric(row['val_ctr'])}, "
            f"噪声 val CTR={MetricFormatter.format_metric(row['noisy_val_ctr'])}, "
            f"val NLL={MetricFormatter.format_metric(row['val_nll'])}"
        )
    return 0


COMMANDS = {
    'tokenizer-train': cmd_tokenizer_train,
    'tokenize': cmd_tokenize,
    'ar-train': cmd_ar_train,
    'sample': cmd_sample,
    'diagnose': cmd_diagnose,
    'report': cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging('INFO')
    try:
        args = build_parser().parse_args(argv)
        config = config_from_args(args)
        configure_logging(config['log_level'])
        logger.info(f"执行子命令: {args.command}")
        if args.command == 'ar-train':
            return cmd_ar_train(config, resume=args.resume)
        return COMMANDS[args.command](config)
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"错误: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"文件读写失败: {e}")
        print(f"错误: {e}", file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())

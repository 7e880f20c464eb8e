"""
视觉自回归生成实验室 - 核心模块

- tokenizer: VQ 分词器
- transformer: 类别条件因果 Transformer
- regularizers: 上下文加噪与码本嵌入正则
- sampler: CFG 采样与 KV 缓存
- diagnostics: CTR/困惑度/PSNR/感知距离/CKA 与对照实验
- trainer: 训练流程
- datasets / storage: 数据读取与持久化
- report_processor / visualizer: 汇总表与图表
"""

__version__ = "0.1.0"

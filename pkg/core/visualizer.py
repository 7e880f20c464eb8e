#!/usr/bin/env python3
"""
可视化模块

把诊断报告与训练日志绘制为 plotly 图表(保存为独立 HTML)
"""

import logging
from typing import Dict, Sequence

import pandas as pd
import plotly.graph_objects as go

from core.diagnostics import CKAProfile, DiagnosticsReport

logger = logging.getLogger(__name__)


class DiagnosticsVisualizer:
    """诊断结果可视化器"""

    def __init__(self):
        self.colors = {
            'front_loaded': '#4ECDC4',
            'interleaved': '#FF6B6B',
            'vanilla': '#95A5A6',
            'noise_only': '#FFD93D',
            'embed_only': '#95E1D3',
            'rear': '#667eea',
            'clean': '#4ECDC4',
            'noisy': '#FF6B6B',
        }
        self.default_color = '#667eea'

    def _layout(self, fig: go.Figure, title: str, xaxis_title: str, yaxis_title: str) -> go.Figure:
        fig.update_layout(
            title=dict(text=title, x=0, xanchor='left', font=dict(size=18, color='#333')),
            xaxis_title=xaxis_title,
            yaxis_title=yaxis_title,
            height=420,
            showlegend=True,
            legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
            margin=dict(t=70),
            hovermode='x unified',
        )
        return fig

    def create_exposure_bias_chart(self, report: DiagnosticsReport, metric: str = 'perceptual_distance') -> go.Figure:
        """
        两种上下文协议下指标随 r 的变化(均值 ± 标准差)

        Args:
            report: exposure_bias 报告
            metric: 纵轴指标

        Returns:
            Plotly图表对象
        """
        df = pd.DataFrame(report.records)
        fig = go.Figure()
        names = {'front_loaded': '完美上下文(前置)', 'interleaved': '不完美上下文(穿插)'}

        for protocol, group in df.groupby('protocol', sort=False):
            stats = group.groupby('r')[metric].agg(['mean', 'std']).fillna(0.0).reset_index()
            fig.add_trace(go.Scatter(
                x=stats['r'],
                y=stats['mean'],
                error_y=dict(type='data', array=stats['std']),
                mode='lines+markers',
                name=names.get(protocol, protocol),
                line=dict(color=self.colors.get(protocol, self.default_color), width=3),
                marker=dict(size=8),
            ))

        return self._layout(fig, f'暴露偏差: {metric} 随真实上下文比例 r 的变化', '真实上下文比例 r', metric)

    def create_embedding_replacement_chart(self, report: DiagnosticsReport) -> go.Figure:
        """感知距离与 CTR 随替换概率 r′ 的变化,CTR 使用右侧坐标轴"""
        df = pd.DataFrame(report.records)
        stats = df.groupby('rprime').agg(
            distance=('perceptual_distance', 'mean'),
            distance_std=('perceptual_distance', 'std'),
            ctr=('ctr', 'mean'),
        ).fillna(0.0).reset_index()

        fig = go.Figure()
        fig.add_trace(go.Scatter(
            x=stats['rprime'], y=stats['distance'],
            error_y=dict(type='data', array=stats['distance_std']),
            mode='lines+markers', name='感知距离',
            line=dict(color=self.colors['interleaved'], width=3), marker=dict(size=8),
        ))
        fig.add_trace(go.Scatter(
            x=stats['rprime'], y=stats['ctr'], mode='lines+markers', name='CTR', yaxis='y2',
            line=dict(color=self.colors['front_loaded'], width=2, dash='dash'),
        ))
        self._layout(fig, '嵌入替换: 感知距离随替换概率 r′ 的变化', '替换概率 r′', '感知距离')
        fig.update_layout(yaxis2=dict(title='CTR', overlaying='y', side='right', range=[0, 1]))
        return fig

    def create_cka_profile_chart(self, profiles: Sequence[CKAProfile]) -> go.Figure:
        """
        逐层 CKA 曲线,可叠加多个模型

        Args:
            profiles: 各模型的 CKAProfile

        Returns:
            Plotly图表对象
        """
        fig = go.Figure()
        for profile in profiles:
            color = self.colors.get(profile.model_tag, self.default_color)
            fig.add_trace(go.Scatter(
                x=profile.layers, y=profile.encoded, mode='lines+markers',
                name=f'{profile.model_tag} · 当前 token 嵌入', line=dict(color=color, width=3),
            ))
            fig.add_trace(go.Scatter(
                x=profile.layers, y=profile.decoded, mode='lines+markers',
                name=f'{profile.model_tag} · 下一 token 嵌入', line=dict(color=color, width=2, dash='dot'),
            ))
        fig = self._layout(fig, '隐藏状态与码本嵌入的 CKA', '层', 'CKA')
        fig.update_yaxes(range=[0, 1])
        return fig

    def create_robustness_chart(self, reports: Dict[str, DiagnosticsReport]) -> go.Figure:
        """各模型在 {train, val} × {clean, noisy} 上的 CTR 分组柱状图"""
        fig = go.Figure()
        for tag, report in reports.items():
            summary = report.summary_frame()
            fig.add_trace(go.Bar(
                name=tag,
                x=summary['condition'],
                y=summary['ctr_mean'],
                error_y=dict(type='data', array=summary['ctr_std']),
                marker_color=self.colors.get(tag, self.default_color),
                text=[f"{v * 100:.1f}%" for v in summary['ctr_mean']],
                textposition='auto',
            ))
        fig = self._layout(fig, '鲁棒性: 干净/加噪上下文下的 CTR', '数据划分 / 上下文', 'CTR')
        fig.update_layout(barmode='group', hovermode='closest')
        return fig

    def create_loss_curve_chart(self, metrics: Dict[str, pd.DataFrame]) -> go.Figure:
        """
        各运行的逐轮损失与验证 CTR

        Args:
            metrics: 运行名 → epoch 级指标 DataFrame

        Returns:
            Plotly图表对象
        """
        fig = go.Figure()
        for name, df in metrics.items():
            mode = df['mode'].iloc[0] if 'mode' in df.columns else name
            color = self.colors.get(mode, self.default_color)
            fig.add_trace(go.Scatter(
                x=df['epoch'], y=df['ar_loss'], mode='lines', name=f'{name} · AR 损失',
                line=dict(color=color, width=3),
            ))
            fig.add_trace(go.Scatter(
                x=df['epoch'], y=df['val_ctr'], mode='lines', name=f'{name} · val CTR', yaxis='y2',
                line=dict(color=color, width=2, dash='dot'),
            ))
        self._layout(fig, '训练曲线', '轮次', 'AR 损失')
        fig.update_layout(yaxis2=dict(title='val CTR', overlaying='y', side='right', range=[0, 1]))
        return fig

## analytics/plots.py

import logging
import os
from typing import Sequence

import plotly.graph_objects as go

from analytics.metrics import MetricsReport

logger = logging.getLogger(__name__)


def _write(fig: go.Figure, path) -> str:
    fig.write_html(os.fspath(path), include_plotlyjs="cdn", full_html=True)
    logger.info(f"Chart written to {path}")
    return os.fspath(path)


def loss_chart(loss_history: Sequence[float]) -> go.Figure:
    iterations = list(range(1, len(loss_history) + 1))

    fig = go.Figure(
        data=[go.Scatter(x=iterations, y=list(loss_history), mode="lines", name="Loss")]
    )

    fig.update_layout(
        xaxis_title="Iteration",
        yaxis_title="Cross-entropy",
        xaxis_rangeslider_visible=False,
        template="plotly_dark",
    )
    return fig


def jaccard_chart(report: MetricsReport) -> go.Figure:
    stems = list(report.frame.index)
    scores = list(report.frame["jaccard"])

    fig = go.Figure()

    fig.add_trace(
        go.Bar(
            x=stems,
            y=scores,
            marker=dict(
                color=scores,
                colorscale="Viridis",
                cmin=0.0,
                cmax=1.0,
                showscale=True,
            ),
            hovertemplate="<b>%{x}</b><br>Jaccard: %{y:.4f}<extra></extra>",
            name="Jaccard",
        )
    )
    # cutoff below which the thresholded score counts zero
    fig.add_hline(y=report.cutoff, line_dash="dash", line_color="orange")
    fig.add_hline(y=report.mean_jaccard, line_color="white")

    fig.update_layout(
        xaxis_title="Image",
        yaxis_title="Jaccard",
        yaxis=dict(range=[0, 1]),
        template="plotly_dark",
    )
    return fig


def write_loss_chart(loss_history: Sequence[float], path) -> str:
    return _write(loss_chart(loss_history), path)


def write_jaccard_chart(report: MetricsReport, path) -> str:
    return _write(jaccard_chart(report), path)

"""
Plotly figures for training logs, per-frame metrics and inference timing,
plus a single-file HTML report.
"""
import os

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from .config import PUBLISHED_CPU_SEC_PER_FRAME, PUBLISHED_GPU_SEC_PER_FRAME
from .errors import ValidationError
from .utils import apply_plotly_theme, ensure_dir

MOVING_AVERAGE_STEPS = 50


def loss_figure(log, window=MOVING_AVERAGE_STEPS):
    if log.empty:
        raise ValidationError("training log has no rows")
    df = log.sort_values("step")
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=df["step"], y=df["loss"], mode="lines", name="loss",
                             line=dict(color="#8B97A5", width=1)))
    fig.add_trace(go.Scatter(x=df["step"], y=df["loss"].rolling(window, min_periods=1).mean(),
                             mode="lines", name=f"{window}-step mean",
                             line=dict(color="#3FD18A", width=2)))
    fig.update_layout(title="Training loss", xaxis_title="step", yaxis_title="weighted BCE")
    return apply_plotly_theme(fig)


def metric_figure(frames, metric="dice", group_by="fold"):
    if metric not in frames.columns:
        raise ValidationError(f"unknown metric column {metric!r}")
    df = frames.dropna(subset=[metric]).copy()
    df[group_by] = df[group_by].astype(str)
    fig = px.box(df, x=group_by, y=metric, points="all", title=f"{metric} per {group_by}",
                 color_discrete_sequence=["#3FD18A"])
    return apply_plotly_theme(fig)


def timing_figure(timing):
    fig = px.bar(timing, x="frame", y="seconds", title="Per-frame inference time",
                 color_discrete_sequence=["#3FD18A"])
    fig.add_hline(y=PUBLISHED_GPU_SEC_PER_FRAME, line_dash="dash", line_color="#FF4655",
                  annotation_text="published GPU 0.035 s")
    fig.add_hline(y=PUBLISHED_CPU_SEC_PER_FRAME, line_dash="dot", line_color="#FF4655",
                  annotation_text="published CPU 0.070 s")
    return apply_plotly_theme(fig)


def write_report(out_path, log=None, frames=None, timing=None, metric="dice"):
    """Concatenate whichever figures have data into one HTML page."""
    figs = []
    if log is not None and not log.empty:
        figs.append(loss_figure(log))
    if frames is not None and not frames.empty:
        figs.append(metric_figure(frames, metric))
    if timing is not None and not timing.empty:
        figs.append(timing_figure(timing))
    if not figs:
        raise ValidationError("nothing to report: no log, metrics or timing rows")

    parts = [fig.to_html(full_html=False, include_plotlyjs=(i == 0)) for i, fig in enumerate(figs)]
    ensure_dir(os.path.dirname(os.path.abspath(out_path)))
    with open(out_path, "w", encoding="utf-8") as f:
        f.write("<html><head><meta charset='utf-8'><title>SUMNet report</title></head>"
                "<body style='background:#10161C'>")
        f.write("\n".join(parts))
        f.write("</body></html>")
    return out_path


def read_csv_or_none(path):
    return pd.read_csv(path) if path else None

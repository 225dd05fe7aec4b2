import html
import os

import pandas as pd
import streamlit as st

from ..report import metric_figure
from ..metrics import METRIC_COLUMNS


def metric_table_html(table):
    # table: format_summary output, one row per group
    html_str = '<table class="metric-table">'
    html_str += '<thead><tr>'
    for col in table.columns:
        html_str += f'<th>{html.escape(str(col))}</th>'
    html_str += '</tr></thead><tbody>'

    for _, row in table.iterrows():
        html_str += '<tr>'
        for col in table.columns:
            html_str += f'<td>{html.escape(str(row[col]))}</td>'
        html_str += '</tr>'

    html_str += '</tbody></table>'
    return html_str


def show_metrics(root):
    st.markdown('<h2 class="main-header">CROSS-VALIDATION</h2>', unsafe_allow_html=True)

    table_path = os.path.join(root, "crossval_table.csv")
    frames_path = os.path.join(root, "crossval_frames.csv")
    if not os.path.exists(table_path):
        st.info(f"No crossval_table.csv in {root}. Run `python -m sumnet crossval` first.")
        return

    table = pd.read_csv(table_path, dtype=str)
    st.markdown(metric_table_html(table), unsafe_allow_html=True)

    if os.path.exists(frames_path):
        frames = pd.read_csv(frames_path)
        metric = st.selectbox("Metric", [m for m in METRIC_COLUMNS if m in frames.columns])
        group = st.radio("Group by", ["fold", "patient"], horizontal=True)
        st.plotly_chart(metric_figure(frames, metric, group), use_container_width=True)

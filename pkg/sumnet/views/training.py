import os

import pandas as pd
import streamlit as st

from ..report import loss_figure
from ..train import BEST_NAME, LOG_NAME


def find_runs(root):
    """Directories under root (root included) that hold a training log."""
    runs = []
    if not root or not os.path.isdir(root):
        return runs
    for dirpath, _, filenames in os.walk(root):
        if LOG_NAME in filenames:
            runs.append(dirpath)
    return sorted(runs)


def show_training(root):
    st.markdown('<h2 class="main-header">TRAINING RUNS</h2>', unsafe_allow_html=True)

    runs = find_runs(root)
    if not runs:
        st.info(f"No {LOG_NAME} found under {root}.")
        return

    run = st.selectbox("Run", runs, format_func=lambda p: os.path.relpath(p, root))
    log = pd.read_csv(os.path.join(run, LOG_NAME))
    if log.empty:
        st.info("This run has not taken a step yet.")
        return

    c1, c2, c3 = st.columns(3)
    c1.metric("Steps", int(log["step"].max()))
    c2.metric("Epochs", int(log["epoch"].max()) + 1)
    c3.metric("Last loss", f"{log['loss'].iloc[-1]:.4f}")

    window = st.slider("Moving average (steps)", 1, max(1, len(log)), min(50, len(log)))
    st.plotly_chart(loss_figure(log, window), use_container_width=True)

    checkpoints = sorted(f for f in os.listdir(run) if f.endswith(".sumn"))
    st.caption("Checkpoints: " + ", ".join(checkpoints))
    if BEST_NAME in checkpoints:
        st.caption(f"Best-loss weights: {os.path.join(run, BEST_NAME)}")

import os
import sys

import streamlit as st

# Add project root to path to allow 'sumnet' package imports
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from sumnet.config import GLOBAL_STYLES, get_setting
from sumnet.views.metrics import show_metrics
from sumnet.views.phantoms import show_phantoms
from sumnet.views.training import show_training

# Page Config
st.set_page_config(
    page_title="SUMNET VIEWER",
    layout="wide",
    initial_sidebar_state="expanded",
)

st.markdown(GLOBAL_STYLES, unsafe_allow_html=True)

if 'run_dir' not in st.session_state:
    st.session_state['run_dir'] = get_setting("RUN_DIR", os.path.join(PROJECT_ROOT, "checkpoints"))

with st.sidebar:
    st.session_state['run_dir'] = st.text_input("Run directory", st.session_state['run_dir'])
    page = st.radio("View", ["Training", "Cross-validation", "Phantoms"])

root = st.session_state['run_dir']
if page == "Training":
    show_training(root)
elif page == "Cross-validation":
    show_metrics(root)
else:
    show_phantoms()

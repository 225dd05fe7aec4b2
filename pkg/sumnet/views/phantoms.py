import streamlit as st

from ..phantom import KINDS, synth_structures
from ..utils import overlay_masks, to_uint8


def show_phantoms():
    st.markdown('<h2 class="main-header">SPECKLE PHANTOMS</h2>', unsafe_allow_html=True)

    c1, c2, c3 = st.columns(3)
    kind = c1.selectbox("Kind", KINDS)
    seed = int(c2.number_input("Seed", min_value=0, value=0, step=1))
    size = c3.selectbox("Size", ["64x96", "128x192", "256x384"])
    h, w = (int(v) for v in size.split("x"))

    image, masks = synth_structures(seed, (h, w), kind)
    structure = st.radio("Structure", list(masks), horizontal=True)

    left, right = st.columns(2)
    with left:
        st.image(to_uint8(image), caption="B-mode", use_container_width=True, clamp=True)
    with right:
        st.image(overlay_masks(image, gt=masks[structure]), caption=f"{structure} mask",
                 use_container_width=True)
    st.caption(f"Foreground fraction: {masks[structure].mean():.3f}")

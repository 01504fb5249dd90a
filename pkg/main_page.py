import streamlit as st


synthworld = st.Page("synthworld_st.py", title="Synthetic World", icon="🌐")
multenet = st.Page("multenet_st.py", title="Train and Evaluate", icon="🧠")
allocator = st.Page("allocator_st.py", title="Budget Allocation", icon="💰")
simulation = st.Page("mpc_st.py", title="Rolling Horizon", icon="📈")
archive = st.Page("archive_st.py", title="Run Archive", icon="🗂️")

pg = st.navigation(
    {
        "Offline": [synthworld, multenet, allocator],
        "Simulation": [simulation],
        "Audit": [archive],
    }
)
st.set_page_config(page_title="Subsidy Allocation Tools", page_icon="🚕", layout="wide")
pg.run()

import json
from datetime import datetime

import streamlit as st

from domain_app import RCT, OBSERVATIONAL, SubsidyError, dataset_lines
from synthworld_app import WorldParams, default_day, gen_world, generate_dataset, naive_gap


st.title("Synthetic World Generator")
st.divider()

st.markdown("Optionally upload a world config JSON. Defaults are used otherwise.")
uploaded_file = st.file_uploader("Upload world config", type=["json"])

now_str = datetime.now().strftime("%Y%m%d_%H%M%S")

col1, col2, col3, col4 = st.columns(4)
with col1:
    n = st.number_input("Records", min_value=100, max_value=2_000_000, value=20_000, step=1000)
with col2:
    policy = st.selectbox("Logging policy", [OBSERVATIONAL, RCT])
with col3:
    day = st.number_input("Day", min_value=0, value=default_day(policy), step=1)
with col4:
    seed = st.number_input("World seed", min_value=0, value=0, step=1)

if st.button("Generate"):
    try:
        params = WorldParams.from_dict(json.load(uploaded_file)) if uploaded_file else WorldParams()
        world = gen_world(params.with_seed(int(seed)))
        st.session_state.dataset = generate_dataset(world, int(n), policy, int(day))
    except (SubsidyError, json.JSONDecodeError) as e:
        st.error(f"Error generating dataset: {e}")
        st.session_state.dataset = None

dataset = st.session_state.get("dataset")
if dataset is not None:
    st.info(f"{len(dataset)} records, provenance {dataset.provenance}")
    st.write("Records per treatment level")
    st.bar_chart(dict(zip([str(a) for a in dataset.grid.levels], dataset.arm_counts().tolist())))
    st.write(f"Naive treated-minus-control conversion gap: {naive_gap(dataset):.4f}")
    with st.expander("Preview data (first 20 rows)"):
        st.dataframe(dataset.to_frame().head(20))
    payload = "\n".join(dataset_lines(dataset)) + "\n"
    st.download_button(
        "Download Dataset",
        payload,
        file_name=f"dataset_{dataset.provenance}_{now_str}.ndjson",
        mime="application/x-ndjson",
    )

import json
import os
from dataclasses import replace
from datetime import datetime

import streamlit as st

from domain_app import SubsidyError
from mpc_app import HorizonConfig, model_source, mpc_loop, oracle_source, report_workbook, uniform_source, write_archive
from multenet_app import params_from_checkpoint
from synthworld_app import WorldParams, gen_world


st.title("Rolling-Horizon Simulation")
st.divider()

st.markdown("Simulate daily re-planning against the synthetic world, with a no-subsidy baseline on the same queries.")
world_file = st.file_uploader("World config", type=["json"])
checkpoint_file = st.file_uploader("Checkpoint (for model sources)", type=["json"])

now_str = datetime.now().strftime("%Y%m%d_%H%M%S")

col1, col2, col3, col4 = st.columns(4)
with col1:
    source_name = st.selectbox("Elasticity source", ["model", "oracle", "uniform-model", "uniform-oracle"])
with col2:
    target_rate = st.number_input("Target subsidy rate", min_value=0.0, max_value=0.99, value=0.05, step=0.01)
with col3:
    horizon_days = st.number_input("Horizon days", min_value=1, max_value=60, value=7)
with col4:
    pacing = st.selectbox("Pacing", ["even", "revenue"])
history_days = st.slider("History days", min_value=1, max_value=56, value=14)
seed = st.number_input("Simulation seed", min_value=0, value=0)

if st.button("Run Simulation"):
    try:
        wp = WorldParams.from_dict(json.load(world_file)) if world_file else WorldParams()
        world = gen_world(wp)
        if source_name.endswith("model"):
            if not checkpoint_file:
                st.error("A checkpoint is required for model sources.")
                st.stop()
            inner = model_source(params_from_checkpoint(json.load(checkpoint_file)))
        else:
            inner = oracle_source(world)
        source = uniform_source(inner) if source_name.startswith("uniform") else inner
        cfg = replace(
            HorizonConfig(),
            history_days=int(history_days),
            horizon_days=int(horizon_days),
            target_subsidy_rate=float(target_rate),
            pacing=pacing,
            seed=int(seed),
        )
        with st.spinner("Simulating..."):
            st.session_state.simulation = mpc_loop(world, source, cfg)
    except (SubsidyError, json.JSONDecodeError) as e:
        st.error(f"Simulation failed: {e}")
        st.session_state.simulation = None

rep = st.session_state.get("simulation")
if rep is not None:
    c1, c2, c3, c4 = st.columns(4)
    c1.metric("Subsidy rate", "n/a" if rep.subsidy_rate is None else f"{rep.subsidy_rate:.2%}")
    c2.metric("ROI", "n/a" if rep.roi is None else f"{rep.roi:.3f}")
    c3.metric("Normalized revenue", "n/a" if rep.normalized_revenue is None else f"{rep.normalized_revenue:.4f}")
    c4.metric("Normalized orders", "n/a" if rep.normalized_orders is None else f"{rep.normalized_orders:.4f}")
    st.write(f"Spent {rep.spend:,.2f} of budget {rep.budget_total or 0.0:,.2f}")
    st.line_chart(rep.trajectory.set_index("day")[["revenue", "cf_revenue"]])
    st.bar_chart(rep.trajectory.set_index("day")[["spend"]])
    with st.expander("Trajectory"):
        st.dataframe(rep.trajectory)

    d1, d2, d3 = st.columns(3)
    with d1:
        st.download_button("Download Report", rep.to_json(), file_name=f"report_{now_str}.json", mime="application/json")
    with d2:
        st.download_button("Download Trajectory", rep.trajectory_csv(), file_name=f"trajectory_{now_str}.csv", mime="text/csv")
    with d3:
        st.download_button(
            "Download Workbook",
            report_workbook(rep),
            file_name=f"simulation_{now_str}.xlsx",
            mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
        )

    report_dir = os.environ.get("SUBSIDY_REPORT_DIR")
    if report_dir and st.button("Archive Run"):
        try:
            paths = write_archive(rep, os.path.join(report_dir, f"run_{now_str}"))
            st.success(f"Archived {len(paths)} files.")
        except OSError as e:
            st.error(f"Failed to archive: {e}")

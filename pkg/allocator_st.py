import json
from datetime import datetime

import streamlit as st

from allocator_app import (
    AllocationProblem,
    AllocatorConfig,
    ClusteringConfig,
    build_clusters,
    dictionary_bundle,
    emit_dictionary,
    solve,
    solve_exact,
)
from domain_app import SubsidyError, parse_dataset
from mpc_app import plan_budget
from multenet_app import elasticity_matrix, params_from_checkpoint
from synthworld_app import WorldParams, gen_world


st.title("Budget Allocation")
st.divider()

st.markdown("Upload a trained uplift-network checkpoint and the queries to allocate over.")
checkpoint_file = st.file_uploader("Checkpoint", type=["json"])
data_file = st.file_uploader("Queries dataset", type=["ndjson", "jsonl", "json"])
world_file = st.file_uploader("World config (for zone coarsening)", type=["json"])

now_str = datetime.now().strftime("%Y%m%d_%H%M%S")

col1, col2, col3 = st.columns(3)
with col1:
    zone_coarsen = st.number_input("Zone coarsening", min_value=1, value=1)
with col2:
    time_coarsen = st.number_input("Time coarsening", min_value=1, value=1)
with col3:
    min_size = st.number_input("Minimum cluster size", min_value=1, value=1)

mode = st.radio("Budget", ["Absolute", "Subsidy rate"], horizontal=True)
if mode == "Absolute":
    budget_value = st.number_input("Budget", min_value=0.0, value=100.0)
else:
    rate_value = st.number_input("Target subsidy rate", min_value=0.0, max_value=0.99, value=0.05)
exact = st.checkbox("Exact solver (small instances only)")

if checkpoint_file and data_file and st.button("Solve"):
    try:
        params = params_from_checkpoint(json.load(checkpoint_file))
        dataset = parse_dataset(data_file.getvalue().decode("utf-8").splitlines())
        ccfg = ClusteringConfig(int(zone_coarsen), int(time_coarsen), int(min_size))
        acfg = AllocatorConfig()
        side = None
        if ccfg.zone_coarsen > 1:
            wp = WorldParams.from_dict(json.load(world_file)) if world_file else WorldParams()
            side = gen_world(wp).side
        P = elasticity_matrix(params, dataset.features())
        revenues = [r.revenue_if_converted for r in dataset.records]
        clusters = build_clusters(dataset.queries, P, revenues, dataset.services, dataset.grid, ccfg, side)
        if mode == "Absolute":
            budget = float(budget_value)
        else:
            base = float(sum(c.values()[0] for c in clusters))
            budget = plan_budget(clusters, base, float(rate_value), 2, acfg)
        problem = AllocationProblem(clusters, budget, acfg.u_lo, acfg.u_hi)
        with st.spinner("Solving..."):
            solution = solve_exact(problem) if exact else solve(problem, acfg)
        st.session_state.allocation = (solution, emit_dictionary(solution, clusters, dataset.grid, ccfg, side, budget=budget))
    except (SubsidyError, json.JSONDecodeError) as e:
        st.error(f"Allocation failed: {e}")
        st.session_state.allocation = None

allocation = st.session_state.get("allocation")
if allocation:
    solution, dictionary = allocation
    c1, c2, c3, c4 = st.columns(4)
    c1.metric("Expected revenue", f"{solution.objective_value:,.2f}")
    c2.metric("Expected cost", f"{solution.total_cost:,.2f}")
    c3.metric("Dual price", f"{solution.dual_lambda:.4f}")
    c4.metric("Gap bound", f"{solution.optimality_gap_bound:,.4f}")
    entries = dictionary.entries_frame()
    st.write("Clusters per subsidy amount")
    st.bar_chart(entries["amount"].value_counts().sort_index())
    with st.expander("Dictionary entries"):
        st.dataframe(entries)
    st.download_button(
        "Download Dictionary",
        dictionary_bundle(dictionary),
        file_name=f"subsidy_dictionary_{now_str}.zip",
        mime="application/zip",
    )

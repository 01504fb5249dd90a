import os

import streamlit as st

from archive_app import delete_run, list_runs, run_files
from domain_app import SubsidyError


st.title("Simulation Archive")
st.divider()

report_dir = os.environ.get("SUBSIDY_REPORT_DIR", "reports")

if "run_to_delete" not in st.session_state:
    st.session_state.run_to_delete = None

if st.button("Refresh Folder"):
    st.session_state.run_to_delete = None
    st.rerun()

try:
    runs = list_runs(report_dir)
except SubsidyError:
    st.error(f"Directory not found: `{report_dir}`")
    st.stop()

if runs.empty:
    st.warning(f"No archived runs in folder: `{report_dir}`.")
    st.stop()

st.dataframe(runs, hide_index=True)
st.markdown("---")

for run in runs["run"]:
    col_name, col_files, col_delete = st.columns([0.3, 0.5, 0.2])
    with col_name:
        st.write(f"**{run}**")
    with col_files:
        for path in run_files(report_dir, run):
            st.download_button(
                path.name,
                path.read_bytes(),
                file_name=f"{run}_{path.name}",
                mime="application/octet-stream",
                key=f"download_{run}_{path.name}",
            )
    with col_delete:
        if st.session_state.run_to_delete == run:
            st.warning(f"Delete '{run}'?")
            confirm_col, cancel_col = st.columns(2)
            with confirm_col:
                if st.button("Yes", key=f"confirm_delete_{run}"):
                    try:
                        delete_run(report_dir, run)
                        st.session_state.run_to_delete = None
                        st.rerun()
                    except (SubsidyError, OSError) as e:
                        st.error(f"Failed to delete '{run}': {e}")
            with cancel_col:
                if st.button("No", key=f"cancel_delete_{run}"):
                    st.session_state.run_to_delete = None
                    st.rerun()
        elif st.button("Delete", key=f"delete_{run}"):
            st.session_state.run_to_delete = run
            st.rerun()

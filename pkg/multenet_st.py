import json
from datetime import datetime

import streamlit as st

from domain_app import SubsidyError, parse_dataset
from metrics_app import evaluate
from multenet_app import TrainConfig, checkpoint_dict, train


def read_upload(uploaded):
    return parse_dataset(uploaded.getvalue().decode("utf-8").splitlines())


st.title("Uplift Network Training and Evaluation")
st.divider()

st.markdown("Upload an :orange[observational] dataset to train on, and an :green[RCT] dataset to evaluate with.")
train_file = st.file_uploader("Training dataset", type=["ndjson", "jsonl", "json"], key="train_file")
eval_file = st.file_uploader("Evaluation dataset", type=["ndjson", "jsonl", "json"], key="eval_file")

now_str = datetime.now().strftime("%Y%m%d_%H%M%S")

col1, col2, col3, col4 = st.columns(4)
with col1:
    alpha = st.number_input("alpha (propensity)", min_value=0.0, value=1.0, step=0.1)
with col2:
    beta = st.number_input("beta (orthogonality)", min_value=0.0, value=1.0, step=0.1)
with col3:
    epochs = st.number_input("Epochs", min_value=1, max_value=500, value=30)
with col4:
    seed = st.number_input("Seed", min_value=0, value=0)

if train_file and st.button("Train"):
    try:
        cfg = TrainConfig(alpha=alpha, beta=beta, epochs=int(epochs), seed=int(seed))
        with st.spinner("Training..."):
            params, training_log = train(read_upload(train_file), cfg)
        st.session_state.model = params
        st.session_state.training_log = training_log
    except SubsidyError as e:
        st.error(f"Training failed: {e}")

params = st.session_state.get("model")
if params is not None:
    training_log = st.session_state.training_log
    st.info(f"Best epoch {training_log.best_epoch}, initial validation BCE {training_log.initial_val_bce:.5f}")
    st.line_chart(training_log.frame.set_index("epoch")[["outcome_bce", "val_bce"]])
    st.download_button(
        "Download Checkpoint",
        json.dumps(checkpoint_dict(params), sort_keys=True),
        file_name=f"multenet_{now_str}.json",
        mime="application/json",
    )

    if eval_file:
        try:
            metrics = evaluate(params, read_upload(eval_file))
        except SubsidyError as e:
            st.error(f"Evaluation failed: {e}")
        else:
            for message in metrics.warnings:
                st.warning(message)
            c1, c2, c3 = st.columns(3)
            c1.metric("AUC", f"{metrics.auc:.4f}")
            c2.metric("AUUC", f"{metrics.auuc:.5f}")
            c3.metric("Qini", f"{metrics.qini:.4f}")
            curves = metrics.curves_frame()
            pooled = curves["curve"].isin(["uplift", "qini"])
            st.line_chart(curves[pooled].pivot_table(index="phi", columns="curve", values="value"))
            with st.expander("Per-level results"):
                st.dataframe(metrics.per_level)
                levels = curves[~pooled & curves["curve"].str.startswith("uplift")]
                if not levels.empty:
                    st.line_chart(levels.pivot_table(index="phi", columns="curve", values="value"))
            st.download_button(
                "Download Metrics",
                metrics.to_json(),
                file_name=f"metrics_{now_str}.json",
                mime="application/json",
            )

import altair as alt
import pandas as pd
import structlog

log = structlog.get_logger(__name__)

LOSS_TERMS = ["L_BNS", "L_AMA", "L_CE", "L_TCKD", "L_NCKD", "total"]


def log_frame(records):
    """DataFrame of JSON-lines step records."""
    return pd.DataFrame(records)


def generate_loss_chart(frame, title):
    """Line chart of every non-zero loss term against the step counter."""
    terms = [t for t in LOSS_TERMS if t in frame.columns and frame[t].abs().sum() > 0]
    if frame.empty or not terms:
        return None
    melted = frame.melt(id_vars=["step"], value_vars=terms, var_name="Term", value_name="Value")
    return alt.Chart(melted).mark_line().encode(
        x=alt.X("step:Q", title="Step"),
        y=alt.Y("Value:Q", title="Loss", scale=alt.Scale(zero=True)),
        color=alt.Color("Term:N", legend=alt.Legend(title="Term")),
        tooltip=["step:Q", "Term:N", alt.Tooltip("Value:Q", format=",.4f")],
    ).properties(width=600, height=300, title=title)


def generate_lr_chart(frame, title):
    if frame.empty or "lr" not in frame.columns:
        return None
    return alt.Chart(frame).mark_line(color="#FFC000").encode(
        x=alt.X("step:Q", title="Step"),
        y=alt.Y("lr:Q", title="Learning rate", scale=alt.Scale(type="log")),
    ).properties(width=600, height=150, title=title)


def save_stage_charts(frame, stage, path):
    """
    Stack the loss and learning-rate charts of one stage and save them as PNG.

    Rendering goes through vl-convert; a failure is logged and returns None.
    """
    charts = [c for c in (generate_loss_chart(frame, f"{stage} losses"),
                          generate_lr_chart(frame, f"{stage} learning rate")) if c is not None]
    if not charts:
        return None
    try:
        alt.vconcat(*charts).save(str(path), format="png")
    except Exception as e:  # optional output
        log.warning("chart_render_failed", stage=stage, path=str(path), error=str(e))
        return None
    log.info("chart_saved", stage=stage, path=str(path))
    return path

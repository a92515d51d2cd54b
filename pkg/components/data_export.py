import json
from pathlib import Path

import pandas as pd
import structlog
from openpyxl.styles import PatternFill
from openpyxl.utils import get_column_letter

log = structlog.get_logger(__name__)

ARM_FLAGS = ("lrg_on", "ama_on", "dkd_on")
TOP1_COLUMNS = ["fp_top1", "q_top1_prefinetune", "q_top1_postfinetune"]
SUMMARY_COLUMNS = TOP1_COLUMNS + ["recovered", "synthetic_dispersion"]


def arm_label(lrg_on, ama_on, dkd_on):
    """ASCII arm name, e.g. 'LRG+DKD'; the all-off arm is 'baseline'."""
    parts = [name for name, on in zip(("LRG", "AMA", "DKD"), (lrg_on, ama_on, dkd_on)) if on]
    return "+".join(parts) if parts else "baseline"


def process_ablation_data(records):
    """
    Per-seed rows and the per-arm median summary of an ablation run.

    Returns:
        (per_seed_df, summary_df): summary has one row per flag combination,
        ordered from all-off to all-on.
    """
    per_seed = pd.DataFrame(records)
    if per_seed.empty:
        return per_seed, per_seed
    per_seed["arm"] = [arm_label(*row) for row in per_seed[list(ARM_FLAGS)].itertuples(index=False)]
    drop = per_seed["fp_top1"] - per_seed["q_top1_prefinetune"]
    gain = per_seed["q_top1_postfinetune"] - per_seed["q_top1_prefinetune"]
    per_seed["recovered"] = (gain / drop.where(drop != 0)).fillna(0.0)

    value_cols = [c for c in SUMMARY_COLUMNS if c in per_seed.columns]
    summary = (
        per_seed.groupby(["arm", *ARM_FLAGS], sort=False)[value_cols]
        .median()
        .reset_index()
    )
    summary["seeds"] = per_seed.groupby(["arm", *ARM_FLAGS], sort=False).size().values
    summary = summary.sort_values(by=list(ARM_FLAGS), kind="stable").reset_index(drop=True)
    per_seed = per_seed.sort_values(by=[*ARM_FLAGS, "seed"], kind="stable").reset_index(drop=True)
    return per_seed, summary


def aligned_text(df, title=None):
    """ASCII-only aligned table."""
    text = df.to_string(index=False, float_format=lambda v: f"{v:.4f}")
    return f"{title}\n{text}\n" if title else text + "\n"


def _format_sheet(worksheet, df, header_color="C6EFCE", percent_columns=()):
    worksheet.freeze_panes = worksheet["A2"]
    header_fill = PatternFill(start_color=header_color, end_color=header_color, fill_type="solid")
    for cell in worksheet[1]:
        cell.fill = header_fill

    for col_idx, column_name in enumerate(df.columns, 1):
        col_letter = get_column_letter(col_idx)
        values = df[column_name].astype(str).map(len)
        max_length = max(values.max() if len(values) else 0, len(str(column_name))) + 2
        worksheet.column_dimensions[col_letter].width = max_length

        if column_name in percent_columns:
            for row_idx in range(2, worksheet.max_row + 1):
                worksheet.cell(row=row_idx, column=col_idx).number_format = "0.00"


def write_ablation_workbook(per_seed, summary, path):
    """Summary sheet, all per-seed rows, then one sheet per arm."""
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        summary.to_excel(writer, index=False, sheet_name="Summary")
        _format_sheet(writer.sheets["Summary"], summary, header_color="FFC000", percent_columns=TOP1_COLUMNS)

        per_seed.to_excel(writer, index=False, sheet_name="All Runs")
        _format_sheet(writer.sheets["All Runs"], per_seed, percent_columns=TOP1_COLUMNS)

        for arm, arm_rows in per_seed.groupby("arm", sort=False):
            sheet_name = str(arm)[:31]  # Excel sheet-name limit
            arm_rows.to_excel(writer, index=False, sheet_name=sheet_name)
            _format_sheet(writer.sheets[sheet_name], arm_rows, percent_columns=TOP1_COLUMNS)
    return path


def export_ablation(records, out_dir):
    """Write ablation.json, ablation.txt and ablation.xlsx; returns the summary frame."""
    out_dir = Path(out_dir)
    per_seed, summary = process_ablation_data(records)
    payload = {
        "summary": summary.to_dict(orient="records"),
        "runs": per_seed.to_dict(orient="records"),
    }
    (out_dir / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n",
                                           encoding="utf-8")
    text = aligned_text(summary, "Median top-1 (%) per arm") + "\n" + aligned_text(per_seed, "Per-seed runs")
    (out_dir / "ablation.txt").write_text(text, encoding="ascii", errors="replace")
    try:
        write_ablation_workbook(per_seed, summary, out_dir / "ablation.xlsx")
    except OSError as e:
        log.warning("excel_export_failed", error=str(e))
    log.info("ablation_exported", path=str(out_dir), arms=len(summary), runs=len(per_seed))
    return summary


def export_quant_report(model, path):
    """JSON map layer -> {N, alpha, beta, S, Z, granularity} for a wrapped model."""
    report = model.quant.report(model)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def export_run_workbook(metrics, logs, path):
    """
    Workbook for one finished run: a Metrics sheet plus one sheet per JSON-lines log.

    Args:
        metrics: The metrics.json record.
        logs: Mapping of log name -> DataFrame of step records.
    """
    metrics_df = pd.DataFrame(
        [{"metric": k, "value": json.dumps(v) if isinstance(v, (dict, list)) else v} for k, v in sorted(metrics.items())]
    )
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        metrics_df.to_excel(writer, index=False, sheet_name="Metrics")
        _format_sheet(writer.sheets["Metrics"], metrics_df, header_color="FFC000")
        for name, frame in logs.items():
            sheet_name = name[:31]
            frame.to_excel(writer, index=False, sheet_name=sheet_name)
            _format_sheet(writer.sheets[sheet_name], frame)
    return path

"""Render stage artifacts into CSV tables, a markdown report, figures, and a summary.

Reference bands from real-model experiments are printed next to toy results
as context only; nothing here compares the toy numbers against them.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

from . import io
from .cpa import GROUNDING_F_POS_BAND
from .specgeo import PR_BAND, TOP1_BAND
from .steer import REDUCTION_BAND
from .toyvlm import Outcome

if TYPE_CHECKING:
    from .pipeline import Workspace

MAGNITUDE_RATIO_BAND = (0.07, 0.69)
FISHER_NOTE = ("2x2 table: rows are the two models, columns count hallucination-pathway "
               "components at relative depth <= 0.5 and > 0.5")

CIRCUIT_COLUMNS = ["model_id", "depth", "n_grounding", "n_hallucination", "hallucination_rate",
                   "clean_accuracy", "corrupt_accuracy", "n_correct", "n_halluc", "n_miss", "n_excluded", "notice"]
TOP_COLUMNS = ["model_id", "pathway", "rank", "component", "cohens_d", "p_adjusted",
               "mean_ie_correct", "mean_ie_halluc"]
SENS_COLUMNS = ["model_id", "d_min", "n_grounding", "n_hallucination", "jaccard_grounding",
                "jaccard_hallucination", "nested", "retains_five"]
CPA_COLUMNS = ["model_id", "pathway", "subset", "n", "available", "mean_individual_ie", "fraction_positive",
               "magnitude_ratio", "magnitude_ratio_median", "magnitude_ratio_of_means", "mean_mag_diff",
               "magdiff_p", "cross_subset_d", "cross_subset_p", "polarity_flip", "context_f_pos_band"]
LENS_COLUMNS = ["model_id", "subset", "n", "grounding_delta", "halluc_delta", "cohens_d", "p_value",
                "grounding_layers", "halluc_layers", "notice"]
INTERVENTION_COLUMNS = ["model_id", "family", "plan_id", "accuracy", "hallucination_rate", "delta_accuracy_pp",
                        "delta_hallucination_pp", "relative_reduction", "tp", "fp", "tn", "fn", "notice"]
TOPK_COLUMNS = ["model_id", "k", "plan_id", "accuracy", "hallucination_rate", "delta_accuracy_pp",
                "delta_hallucination_pp", "relative_reduction", "notice"]
PARETO_COLUMNS = ["model_id", "family", "plan_id", "selection_accuracy", "selection_hallucination_rate",
                  "evaluation_accuracy", "evaluation_hallucination_rate", "selected"]
GEOMETRY_COLUMNS = ["model_id", "k", "mean_pr", "mean_top1", "mean_rank90", "context_pr_band", "context_top1_band"]
CROSS_COLUMNS = ["model_a", "model_b", "fisher_table", "fisher_p", "r", "tost_p", "ci_low", "ci_high",
                 "verdict", "r_all", "tost_p_all", "verdict_all", "notice"]


def _safe_load(ws: "Workspace", model_id: str, name: str) -> list[dict] | None:
    path = ws.artifact(model_id, name)
    if not path.exists():
        return None
    return ws.load(model_id, name)


def _band(b) -> str:
    return f"{b[0]}-{b[1]}"


def _fmt(v, digits: int = 3) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        if v != v:
            return "n/a"
        return f"{v:.{digits}g}" if abs(v) < 1e-3 and v != 0 else f"{v:.{digits}f}"
    return str(v)


def _md_table(columns: list[str], rows: list[dict]) -> str:
    if not rows:
        return "_no rows_\n"
    out = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        cells = [";".join(map(str, r.get(c))) if isinstance(r.get(c), list) else _fmt(r.get(c)) for c in columns]
        out.append("| " + " | ".join(x.replace("|", "\\|") for x in cells) + " |")
    return "\n".join(out) + "\n"


def collect(ws: "Workspace") -> dict[str, list[dict]]:
    """Gather every table's rows from whatever artifacts exist."""
    tables: dict[str, list[dict]] = {k: [] for k in (
        "circuits", "top_components", "sensitivity", "cpa", "lens", "lens_layers", "interventions",
        "topk", "pareto", "geometry", "crossarch", "notices")}
    for mid in ws.config.model_ids():
        circ = ws.load(mid, "circuit")
        summary = next(r for r in circ if r["record"] == "summary")
        tables["circuits"].append({k: summary.get(k) for k in CIRCUIT_COLUMNS})
        if summary.get("notice"):
            tables["notices"].append({"model_id": mid, "notice": summary["notice"]})
        comps = [r for r in circ if r["record"] == "component" and r["member"]]
        for pw in ("grounding", "hallucination"):
            ranked = sorted((r for r in comps if r["pathway"] == pw),
                            key=lambda r: (-abs(float(r["cohens_d"])), r["component"]))
            for i, r in enumerate(ranked[:5]):
                tables["top_components"].append({"model_id": mid, "pathway": pw, "rank": i + 1, **r})
        sens_sum = next((r for r in circ if r["record"] == "sensitivity_summary"), {})
        for r in circ:
            if r["record"] == "sensitivity":
                tables["sensitivity"].append({"model_id": mid, **r, "nested": sens_sum.get("nested"),
                                              "retains_five": sens_sum.get("retains_five")})

        cpa = _safe_load(ws, mid, "cpa")
        if cpa is None:
            tables["notices"].append({"model_id": mid, "notice": "cpa stage not run"})
        else:
            for r in cpa:
                if r["record"] == "cell":
                    mean_ie = r.get("cross_subset_mean_ie") or {}
                    md = r.get("magdiff_vs_zero") or {}
                    band = GROUNDING_F_POS_BAND.get(Outcome(r["subset"])) if r["pathway"] == "grounding" else None
                    tables["cpa"].append({"model_id": mid, **r, "magdiff_p": md.get("p_value"),
                                          "cross_subset_d": mean_ie.get("effect_size"),
                                          "cross_subset_p": mean_ie.get("p_value"),
                                          "context_f_pos_band": _band(band) if band else None})
                elif r["record"] == "notice":
                    tables["notices"].append({"model_id": mid, "notice": "cpa: " + r["notice"]})

        lens = _safe_load(ws, mid, "lens")
        if lens is not None:
            for r in lens:
                if r["record"] == "differential":
                    tables["lens"].append({"model_id": mid, **r})
                elif r["record"] == "layer_mean":
                    tables["lens_layers"].append({"model_id": mid, **r})

        inter = _safe_load(ws, mid, "intervene")
        if inter is not None:
            for r in inter:
                kind = r["record"]
                if kind == "selection":
                    ev = r["evaluation"]
                    tables["interventions"].append({"model_id": mid, "family": r["family"],
                                                    "plan_id": (r["selected"] or {}).get("plan_id"),
                                                    **ev, "notice": r["notice"]})
                elif kind == "baseline" and r["split"] == "evaluation":
                    tables["interventions"].append({"model_id": mid, "family": "Baseline", **r})
                elif kind == "grounding":
                    tables["interventions"].append({"model_id": mid, "family": "GroundingSuppression",
                                                    "plan_id": r["plan"]["plan_id"], **r})
                elif kind == "random_summary":
                    tables["interventions"].append({
                        "model_id": mid, "family": "RandomControl(mean)",
                        "plan_id": f"s={r['s']:.2f}|n={r['cardinality']}",
                        "relative_reduction": r["mean_relative_reduction"],
                        "delta_hallucination_pp": r["mean_delta_hallucination_pp"],
                        "notice": f"spread {r['spread']:.3f} over seeds"})
                elif kind == "random":
                    tables["interventions"].append({"model_id": mid, "family": "RandomControl",
                                                    "plan_id": r["plan"]["plan_id"], **r})
                elif kind == "topk":
                    tables["topk"].append({"model_id": mid, "k": r["k"],
                                           "plan_id": (r["selected"] or {}).get("plan_id"),
                                           **r["evaluation"], "notice": r["notice"]})
                elif kind == "pareto":
                    tables["pareto"].append({"model_id": mid, **r})
                elif kind == "notice":
                    tables["notices"].append({"model_id": mid, "notice": "intervene: " + r["notice"]})

        geo = _safe_load(ws, mid, "geometry")
        if geo is not None:
            for r in geo:
                if r["record"] == "summary":
                    tables["geometry"].append({**r, "context_pr_band": _band(PR_BAND),
                                               "context_top1_band": _band(TOP1_BAND)})
                elif r["record"] == "notice":
                    tables["notices"].append({"model_id": mid, "notice": "geometry: " + r["notice"]})

    if ws.crossarch.exists():
        _, recs = ws.read(ws.crossarch, "crossarch")
        for r in recs:
            if r["record"] == "pair":
                mi, ma = r["micro"], r["micro_all_components"]
                tables["crossarch"].append({
                    "model_a": r["model_a"], "model_b": r["model_b"], "fisher_table": r["fisher_table"],
                    "fisher_p": r["fisher_p"], "r": mi["r"], "tost_p": mi["tost_p"], "ci_low": mi["ci_low"],
                    "ci_high": mi["ci_high"], "verdict": mi["verdict"], "r_all": ma["r"],
                    "tost_p_all": ma["tost_p"], "verdict_all": ma["verdict"],
                    "notice": "; ".join(x for x in (r["macro_notice"], mi["notice"]) if x)})
            elif r["record"] == "notice":
                tables["notices"].append({"model_id": "", "notice": "crossarch: " + r["notice"]})
    return tables


def _flatten_table(rows: list[dict]) -> list[dict]:
    out = []
    for r in rows:
        r = dict(r)
        if isinstance(r.get("fisher_table"), list):
            r["fisher_table"] = ";".join(",".join(str(v) for v in row) for row in r["fisher_table"])
        out.append(r)
    return out


def render_report(ws: "Workspace") -> Path:
    from .plotting import render_figures

    tables = collect(ws)
    d = ws.report_dir
    d.mkdir(parents=True, exist_ok=True)
    io.write_csv(d / "circuits.csv", CIRCUIT_COLUMNS, tables["circuits"])
    io.write_csv(d / "top_components.csv", TOP_COLUMNS, tables["top_components"])
    io.write_csv(d / "sensitivity.csv", SENS_COLUMNS, tables["sensitivity"])
    io.write_csv(d / "cpa.csv", CPA_COLUMNS, tables["cpa"])
    io.write_csv(d / "lens.csv", LENS_COLUMNS, tables["lens"])
    io.write_csv(d / "interventions.csv", INTERVENTION_COLUMNS, tables["interventions"])
    io.write_csv(d / "topk_ablation.csv", TOPK_COLUMNS, tables["topk"])
    io.write_csv(d / "pareto.csv", PARETO_COLUMNS, tables["pareto"])
    io.write_csv(d / "geometry.csv", GEOMETRY_COLUMNS, tables["geometry"])
    io.write_csv(d / "crossarch.csv", CROSS_COLUMNS, _flatten_table(tables["crossarch"]))
    figures = render_figures(ws, tables, d / "figures")
    (d / "report.md").write_text(_markdown(ws, tables, figures), encoding="utf-8")
    summary = [{"record": "table", "name": name, "rows": _flatten_table(rows)} for name, rows in tables.items()]
    summary.append({"record": "figures", "files": [p.name for p in figures]})
    io.write_ndjson(d / "summary.ndjson", io.header("report", ws.config.digest()), summary)
    return d


def _markdown(ws: "Workspace", t: dict[str, list[dict]], figures: list[Path]) -> str:
    parts = ["# circuitscope report", "",
             f"Config digest `{ws.config.digest()}`, master seed {ws.config.seed}, "
             f"models: {', '.join(ws.config.model_ids())}.", ""]
    if t["notices"]:
        parts += ["## Notices", ""] + [f"- {n['model_id'] + ': ' if n['model_id'] else ''}{n['notice']}"
                                       for n in t["notices"]] + [""]
    parts += ["## Circuits", "", _md_table(CIRCUIT_COLUMNS[:-1], t["circuits"]),
              "## Strongest members", "", _md_table(TOP_COLUMNS, t["top_components"]),
              "## Threshold sensitivity", "", _md_table(SENS_COLUMNS, t["sensitivity"]),
              "## Pathway analysis", "",
              f"Context only: real-model grounding positive fractions {_band(GROUNDING_F_POS_BAND[Outcome.CORRECT])} "
              f"(correct) and {_band(GROUNDING_F_POS_BAND[Outcome.HALLUCINATING])} (hallucinating); "
              f"real-model magnitude ratios {_band(MAGNITUDE_RATIO_BAND)}.", "",
              _md_table(CPA_COLUMNS[:-1], t["cpa"]),
              "## Logit lens", "",
              "Layers holding members of both pathways count toward both groups.", "",
              _md_table(LENS_COLUMNS[:-1], t["lens"]),
              "## Interventions (evaluation split)", "",
              f"Context only: real-model uniform scaling reached {_band(REDUCTION_BAND)} relative "
              "reduction within a 2 pp accuracy budget.", "",
              _md_table(INTERVENTION_COLUMNS, t["interventions"]),
              "### Top-k ablation", "", _md_table(TOPK_COLUMNS, t["topk"]),
              "## Geometry of the hallucination signal", "", _md_table(GEOMETRY_COLUMNS, t["geometry"]),
              "## Cross-architecture comparison", "", FISHER_NOTE + ".", "",
              _md_table(CROSS_COLUMNS, _flatten_table(t["crossarch"]))]
    if figures:
        parts += ["## Figures", ""] + [f"![{p.stem}](figures/{p.name})" for p in figures] + [""]
    return "\n".join(parts)

"""
レポート出力サービス
評価結果の CSV / JSON と、まとめの PDF（ReportLab）を書き出す
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from decode.services.fuse import PredictResult
from decode.services.metrics import ADE_HEADER, ResultMatrix, aer, fgt
from decode.utils.storage import canonical_json, load_json, save_json, sha256_hex, write_csv

logger = logging.getLogger(__name__)

FONT = "HeiseiKakuGo-W5"
ROC_HEADER = ("query", "fpr", "tpr", "threshold")
ABLATION_HEADER = ("e0", "domain", "min_ade", "min_fde")
ADVISORY_HEADER = ("domain", "generalized_ade", "specialized_ade", "expand")
BASELINE_HEADER = ("method", "aer_ade", "fgt_ade", "aer_fde", "fgt_fde")


# =========================
# CSV / JSON
# =========================
def staircase_rows(domains: Sequence[str], ade: ResultMatrix, fde: ResultMatrix) -> List[list]:
    rows = []
    for i, name in enumerate(domains):
        for j in range(i, ade.n):
            rows.append([name, j + 1, ade.get(i, j), fde.get(i, j)])
    return rows


def write_eval_report(reports_dir: Path, phase: int, domains: Sequence[str], ade: ResultMatrix, fde: ResultMatrix,
                      awareness: Optional[dict], baselines: Sequence[dict], advisory: Sequence[dict],
                      config_echo: dict) -> Path:
    """
    eval の結果一式を書き出す

    Returns:
        eval_phase{m}.json のパス
    """
    reports_dir = Path(reports_dir)
    write_csv(reports_dir / f"staircase_phase{phase}.csv", ADE_HEADER, staircase_rows(domains, ade, fde))
    if baselines:
        write_csv(reports_dir / f"baselines_phase{phase}.csv", BASELINE_HEADER,
                  ([b[k] for k in BASELINE_HEADER] for b in baselines))
    write_csv(reports_dir / f"advisory_phase{phase}.csv", ADVISORY_HEADER,
              ([a[k] for k in ADVISORY_HEADER] for a in advisory))
    flows = {}
    if awareness:
        roc = []
        for qid, res in awareness["flows"].items():
            roc += [[qid, f, t, th] for f, t, th in res["roc"]]
            flows[str(qid)] = res["auroc"]
        write_csv(reports_dir / f"roc_phase{phase}.csv", ROC_HEADER, roc)

    payload = {
        "phase": phase,
        "domains": list(domains),
        "staircase": {"min_ade": ade.rows(), "min_fde": fde.rows()},
        "aer": {"min_ade": aer(ade), "min_fde": aer(fde)},
        "fgt": {"min_ade": fgt(ade), "min_fde": fgt(fde)},
        "auroc": flows,
        "confusion": awareness["confusion"] if awareness else None,
        "baselines": list(baselines),
        "advisory": list(advisory),
        "config": config_echo,
    }
    path = reports_dir / f"eval_phase{phase}.json"
    save_json(path, payload)
    logger.info("[Report] wrote %s", path)
    return path


def write_prediction(reports_dir: Path, scene_id: str, result: PredictResult) -> Path:
    """統合成分・クエリ別対数尤度・汎用／専用の重み配分を JSON に書き出す"""
    fp = result.fused
    post = fp.posterior
    e_total = post.e0 + post.e_star
    payload = {
        "scene_id": scene_id,
        "selected_query": post.selected,
        "e0": post.e0,
        "e_star": post.e_star,
        "e_post": post.e_post,
        "prior_share": {"generalized": post.e0 / e_total if e_total else 0.0,
                        "specialized": post.e_star / e_total if e_total else 0.0},
        "weight_split": fp.weight_split(),
        "log_evidence": {str(k): v for k, v in result.log_evidence.items()},
        "components": [{"weight": c.weight, "provenance": c.provenance, "mode": c.mode,
                        "trajectory": c.trajectory.tolist()} for c in fp.components],
    }
    path = Path(reports_dir) / f"predict_{scene_id}.json"
    save_json(path, payload)
    return path


def write_ablation(reports_dir: Path, rows: Sequence[dict]) -> Path:
    path = Path(reports_dir) / "ablate_e0.csv"
    write_csv(path, ABLATION_HEADER, ([r[k] for k in ABLATION_HEADER] for r in rows))
    save_json(Path(reports_dir) / "ablate_e0.json", {"rows": list(rows)})
    return path


def collect_summary(reports_dir: Path) -> dict:
    """最新フェーズの eval と ablation をまとめる"""
    reports_dir = Path(reports_dir)
    evals = sorted(reports_dir.glob("eval_phase*.json"), key=lambda p: int(p.stem.replace("eval_phase", "")))
    if not evals:
        raise FileNotFoundError(f"no eval reports in {reports_dir} (run `eval` first)")
    summary = {"latest": load_json(evals[-1]), "phases": [p.name for p in evals]}
    ablation = reports_dir / "ablate_e0.json"
    if ablation.exists():
        summary["ablation"] = load_json(ablation)["rows"]
    return summary


# =========================
# PDF（まとめ）
# =========================
def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def create_report_pdf(summary: dict, out_path: Path) -> None:
    """
    評価まとめの PDF（メタ情報カード・セクション見出しバー・表）

    時刻は埋め込まず、同じ入力からは同じバイト列を出力する
    """
    from reportlab.lib import colors
    from reportlab.lib.pagesizes import A4
    from reportlab.lib.units import mm
    from reportlab.pdfbase import pdfmetrics
    from reportlab.pdfbase.cidfonts import UnicodeCIDFont
    from reportlab.pdfgen import canvas

    PAGE_W, PAGE_H = A4
    MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 20*mm, 20*mm, 18*mm, 18*mm
    TITLE_SIZE, H_SIZE, BODY_SIZE, SMALL = 16, 12, 10, 9
    ROW_H, SEC_GAP = 5.5*mm, 5*mm

    pdfmetrics.registerFont(UnicodeCIDFont(FONT))
    c = canvas.Canvas(str(out_path), pagesize=A4, invariant=1)

    C_PRIMARY = colors.HexColor("#1f2937")
    C_ACCENT = colors.HexColor("#2563eb")
    C_BORDER = colors.HexColor("#e5e7eb")
    C_MUTED = colors.HexColor("#6b7280")
    C_BAR = colors.HexColor("#f3f4f6")

    X0, X1 = MARGIN_L, PAGE_W - MARGIN_R
    CONTENT_W = X1 - X0
    y = PAGE_H - MARGIN_T
    latest = summary["latest"]

    c.setFont(FONT, TITLE_SIZE)
    c.setFillColor(C_PRIMARY)
    c.drawString(X0, y, "継続ドメイン拡張 評価レポート")
    c.setFont(FONT, SMALL)
    c.setFillColor(C_MUTED)
    c.drawRightString(X1, y, f"config {sha256_hex(canonical_json(latest['config']))[:12]}")
    y -= 8*mm

    def new_page():
        nonlocal y
        c.showPage()
        y = PAGE_H - MARGIN_T

    def section_bar(title: str):
        nonlocal y
        if y - 14*mm < MARGIN_B:
            new_page()
        c.setFillColor(C_BAR)
        c.rect(X0, y-7*mm, CONTENT_W, 9*mm, stroke=0, fill=1)
        c.setFillColor(C_ACCENT)
        c.circle(X0+4*mm, y-2.5*mm, 1.6*mm, stroke=0, fill=1)
        c.setFont(FONT, H_SIZE)
        c.setFillColor(C_PRIMARY)
        c.drawString(X0+8*mm, y-5*mm, title)
        y -= 12*mm

    def table(header: Sequence[str], rows: Sequence[Sequence]):
        nonlocal y
        col_w = CONTENT_W / max(len(header), 1)
        for r, row in enumerate([header] + [list(map(_fmt, row)) for row in rows]):
            if y - ROW_H < MARGIN_B:
                new_page()
            c.setFont(FONT, BODY_SIZE)
            c.setFillColor(C_MUTED if r == 0 else colors.black)
            for k, cell in enumerate(row):
                c.drawString(X0 + 2*mm + k*col_w, y, str(cell))
            c.setStrokeColor(C_BORDER)
            c.setLineWidth(0.5)
            c.line(X0, y-1.8*mm, X1, y-1.8*mm)
            y -= ROW_H
        y -= SEC_GAP

    # メタ情報カード
    card_h = 22*mm
    c.setStrokeColor(C_BORDER)
    c.setLineWidth(0.6)
    c.rect(X0, y - card_h, CONTENT_W, card_h, stroke=1, fill=0)
    y -= 7*mm
    for label, value in [
        ("フェーズ", latest["phase"]),
        ("ドメイン", ", ".join(latest["domains"])),
        ("シード", latest["config"].get("seed")),
    ]:
        c.setFont(FONT, BODY_SIZE)
        c.setFillColor(C_MUTED)
        c.drawString(X0+6*mm, y, label)
        c.setFillColor(colors.black)
        c.drawString(X0+30*mm, y, _fmt(value))
        y -= 6*mm
    y -= 4*mm

    section_bar("minADE / minFDE（フェーズ別）")
    rows = []
    for i, name in enumerate(latest["domains"]):
        for k, (a, f) in enumerate(zip(latest["staircase"]["min_ade"][i], latest["staircase"]["min_fde"][i])):
            rows.append([name, i + k + 1, a, f])
    table(["domain", "phase", "minADE", "minFDE"], rows)

    section_bar("継続学習指標")
    methods = [["DECODE", latest["aer"]["min_ade"], latest["fgt"]["min_ade"],
                latest["aer"]["min_fde"], latest["fgt"]["min_fde"]]]
    methods += [[b[k] for k in BASELINE_HEADER] for b in latest.get("baselines", [])]
    table(["method", "AER(ADE)", "FGT(ADE)", "AER(FDE)", "FGT(FDE)"], methods)

    if latest.get("auroc"):
        section_bar("ドメイン識別")
        conf = latest.get("confusion") or {}
        table(["query", "AUROC"], [[q, v] for q, v in latest["auroc"].items()])
        if conf:
            table(["accuracy", "precision", "recall"], [[conf["accuracy"], conf["precision"], conf["recall"]]])

    if summary.get("ablation"):
        section_bar("事前エビデンス e0 の感度")
        table(list(ABLATION_HEADER), [[r[k] for k in ABLATION_HEADER] for r in summary["ablation"]])

    if latest.get("advisory"):
        section_bar("拡張の推奨")
        table(list(ADVISORY_HEADER), [[a[k] for k in ADVISORY_HEADER] for a in latest["advisory"]])

    c.setFont(FONT, SMALL)
    c.setFillColor(C_MUTED)
    c.drawCentredString(PAGE_W/2, MARGIN_B-6*mm, "Generated by decode report")
    c.showPage()
    c.save()


def write_summary(reports_dir: Path) -> Dict[str, Path]:
    """summary.json と report.pdf を書き出す"""
    reports_dir = Path(reports_dir)
    summary = collect_summary(reports_dir)
    json_path = reports_dir / "summary.json"
    pdf_path = reports_dir / "report.pdf"
    save_json(json_path, summary)
    create_report_pdf(summary, pdf_path)
    logger.info("[Report] wrote %s and %s", json_path, pdf_path)
    return {"json": json_path, "pdf": pdf_path}

"""
アプリケーション設定管理モジュール
環境変数の読み込み、ログ設定、実行ディレクトリの定義
"""
import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# 環境変数の読み込み
load_dotenv()

# =========================
# 環境変数から設定を読み込み
# =========================

# ログレベル（DEBUG / INFO / WARNING ...）
DECODE_LOG = os.getenv("DECODE_LOG", "INFO")

# 実行結果の出力先（--out 未指定時）
DECODE_HOME = os.getenv("DECODE_HOME", "runs")

# 設定ファイル（--config 未指定時、空なら既定値を使用）
DECODE_CONFIG = os.getenv("DECODE_CONFIG", "")

# =========================
# ディレクトリパスの定義
# =========================
BASE_DIR = Path(__file__).parent
DEFAULT_OUT_DIR = Path(DECODE_HOME)

DATA_SUBDIR = "data"
CKPT_SUBDIR = "checkpoints"
LOG_SUBDIR = "logs"
REPORT_SUBDIR = "reports"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_logging_ready = False


def setup_logging(level: Optional[str] = None) -> None:
    """
    ルートロガーを一度だけ設定する

    Args:
        level: ログレベル名。未指定なら DECODE_LOG を使用
    """
    global _logging_ready
    name = (level or DECODE_LOG).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise RuntimeError(f"DECODE_LOG の値が不正です: {name}")
    if _logging_ready:
        logging.getLogger().setLevel(numeric)
        return
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    _logging_ready = True


def run_dirs(out_dir: Path) -> dict:
    """
    実行ディレクトリ配下のサブディレクトリを返す（作成はしない）

    Args:
        out_dir: 出力ルート

    Returns:
        {"data": Path, "checkpoints": Path, "logs": Path, "reports": Path}
    """
    out_dir = Path(out_dir)
    return {
        "data": out_dir / DATA_SUBDIR,
        "checkpoints": out_dir / CKPT_SUBDIR,
        "logs": out_dir / LOG_SUBDIR,
        "reports": out_dir / REPORT_SUBDIR,
    }


def ensure_run_dirs(out_dir: Path) -> dict:
    """実行ディレクトリを作成してパスを返す"""
    dirs = run_dirs(out_dir)
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs

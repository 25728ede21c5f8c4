"""
ストレージユーティリティ
JSON・CSV・バイナリ浮動小数ブロックの保存と読み込み
"""
import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FLOAT_DTYPE = np.dtype("<f8")


def save_json(path: Path, data: dict) -> None:
    """
    JSONファイルを保存する

    Args:
        path: 保存先のパス
        data: 保存するデータ（辞書型）
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8"
    )


def load_json(path: Path) -> dict:
    """
    JSONファイルを読み込む

    Args:
        path: 読み込むファイルのパス

    Returns:
        読み込んだデータ（辞書型）

    Raises:
        FileNotFoundError: ファイルが存在しない場合
        json.JSONDecodeError: JSONの解析に失敗した場合
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")

    return json.loads(path.read_text(encoding="utf-8"))


def canonical_json(data) -> bytes:
    """キー順固定・区切り最小の正規化 JSON（ダイジェスト用）"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def sha256_hex(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def file_digest(path: Path) -> str:
    return sha256_hex(Path(path).read_bytes())


def pack_floats(values) -> bytes:
    """リトルエンディアン float64 のバイト列に変換（ビット単位で可逆）"""
    return np.ascontiguousarray(values, dtype=FLOAT_DTYPE).tobytes()


def unpack_floats(buf: bytes, shape: Sequence[int]) -> np.ndarray:
    arr = np.frombuffer(buf, dtype=FLOAT_DTYPE).astype(np.float64)
    return arr.reshape(tuple(shape))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """
    ヘッダ行固定の CSV を書き出す

    Args:
        path: 保存先
        header: 列名（この順で出力）
        rows: 各行の値
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v

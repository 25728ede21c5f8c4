"""
例外定義
組み込み例外を継承し、呼び出し側は ValueError / RuntimeError でも捕捉できる
"""


class DecodeError(Exception):
    """本パッケージの例外の基底クラス"""


class ShapeError(DecodeError, ValueError):
    """テンソル形状の不一致"""

    def __init__(self, op: str, left, right):
        super().__init__(f"{op}: shape mismatch {tuple(left)} vs {tuple(right)}")
        self.left = tuple(left)
        self.right = tuple(right)


class DomainError(DecodeError, ValueError):
    """関数の定義域外の入力（digamma(x<=0) など）"""


class ManifestMismatchError(DecodeError, ValueError):
    """パラメータバンドルのマニフェストがネットワーク構造と一致しない"""


class SceneNotNormalizedError(DecodeError, ValueError):
    """ターゲット中心座標系に正規化されていないシーン"""


class DatasetFormatError(DecodeError, ValueError):
    """データセットファイルの形式エラー"""

    def __init__(self, message: str, record_index: int = -1, offset: int = -1):
        super().__init__(f"{message} (record {record_index}, byte offset {offset})")
        self.record_index = record_index
        self.offset = offset


class CheckpointError(DecodeError, ValueError):
    """チェックポイントの読み込みエラー"""


class CheckpointCorruptedError(CheckpointError):
    """ダイジェスト不一致（破損）"""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(CheckpointError):
    """未対応のフォーマットバージョン"""


class TrainingDivergedError(DecodeError, RuntimeError):
    """学習中に損失が NaN / Inf になった"""


class PhaseOrderError(DecodeError, RuntimeError):
    """拡張フェーズの順序が不正"""


class PhaseAlreadyFinalizedError(DecodeError, RuntimeError):
    """確定済みフェーズを再確定しようとした"""


class NoFinalizedQueryError(DecodeError, RuntimeError):
    """確定済みのドメインクエリが存在しない"""

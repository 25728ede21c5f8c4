"""
評価指標モジュール
minADE / minFDE、継続学習指標（AER・FGT）、ドメイン識別の AUROC と混同行列
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support, roc_curve

from decode.errors import ShapeError

EXACT_AUROC_LIMIT = 10_000

ADE_HEADER = ("domain", "phase", "min_ade", "min_fde")


# =========================
# 変位誤差
# =========================
def _components(pred) -> np.ndarray:
    traj = pred.trajectories if hasattr(pred, "trajectories") else pred
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim == 2:
        traj = traj[None]
    if traj.shape[0] == 0:
        raise ValueError("prediction has no components")
    return traj


def _displacements(pred, gt) -> np.ndarray:
    traj = _components(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if traj.shape[1:] != gt.shape:
        raise ShapeError("displacement", traj.shape[1:], gt.shape)
    return np.linalg.norm(traj - gt[None], axis=2)


def min_ade(pred, gt) -> float:
    """成分ごとのステップ平均 L2 の最小値 [m]"""
    return float(np.min(_displacements(pred, gt).mean(axis=1)))


def min_fde(pred, gt) -> float:
    """成分ごとの最終ステップ L2 の最小値 [m]"""
    return float(np.min(_displacements(pred, gt)[:, -1]))


def mean_errors(preds: Sequence, gts: Sequence[np.ndarray]) -> Dict[str, float]:
    """シーン平均の minADE / minFDE"""
    if len(preds) != len(gts):
        raise ShapeError("mean_errors", (len(preds),), (len(gts),))
    ade = [min_ade(p, g) for p, g in zip(preds, gts)]
    fde = [min_fde(p, g) for p, g in zip(preds, gts)]
    return {"min_ade": float(np.mean(ade)), "min_fde": float(np.mean(fde))}


# =========================
# 継続学習指標
# =========================
@dataclass
class ResultMatrix:
    """R[i][j]：フェーズ j 終了後のドメイン i の誤差（j ≥ i のみ）"""
    n: int
    values: Dict[tuple, float] = field(default_factory=dict)

    def set(self, i: int, j: int, value: float) -> None:
        if not 0 <= i <= j < self.n:
            raise IndexError(f"R[{i}][{j}] is outside the staircase (N={self.n})")
        if value < 0 or not np.isfinite(value):
            raise ValueError(f"R[{i}][{j}] must be a non-negative finite value, got {value}")
        self.values[(i, j)] = float(value)

    def get(self, i: int, j: int) -> float:
        try:
            return self.values[(i, j)]
        except KeyError:
            raise KeyError(f"missing entry R[{i}][{j}]") from None

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "ResultMatrix":
        """行 i にはフェーズ i, i+1, ... の値を並べる"""
        r = cls(n=len(rows))
        for i, row in enumerate(rows):
            for k, v in enumerate(row):
                r.set(i, i + k, v)
        return r

    def check_complete(self) -> None:
        for i in range(self.n):
            for j in range(i, self.n):
                self.get(i, j)

    def rows(self) -> List[List[float]]:
        return [[self.values.get((i, j)) for j in range(i, self.n)] for i in range(self.n)]


def aer(r: ResultMatrix) -> float:
    """階段状の全要素の平均"""
    r.check_complete()
    total = sum(r.get(i, j) for i in range(r.n) for j in range(i, r.n))
    return total / (r.n * (r.n + 1) / 2)


def fgt(r: ResultMatrix) -> float:
    """学習直後からの誤差増加の平均（N=1 は 0）"""
    r.check_complete()
    if r.n < 2:
        return 0.0
    total = sum(r.get(i, j) - r.get(i, i) for i in range(r.n) for j in range(i + 1, r.n))
    return total / (r.n * (r.n - 1) / 2)


# =========================
# ドメイン識別
# =========================
def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ShapeError("auroc", scores.shape, labels.shape)
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary (0/1)")
    if labels.min() == labels.max():
        raise ValueError("auroc requires both classes to be present")
    return scores, labels


def auroc(scores, labels, exact: Optional[bool] = None) -> float:
    """
    ラベル 1 を陽性とした AUROC（Mann-Whitney、同順位は 1/2）

    Args:
        scores: スコア（大きいほど陽性らしい）
        labels: 0/1 ラベル
        exact: True で全ペア比較。None なら件数が EXACT_AUROC_LIMIT 以下のとき全ペア比較

    Raises:
        ValueError: 片方のクラスしかない場合
    """
    scores, labels = _binary(scores, labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if exact is None:
        exact = scores.size <= EXACT_AUROC_LIMIT
    if exact:
        diff = pos[:, None] - neg[None, :]
        wins = np.sum(diff > 0) + 0.5 * np.sum(diff == 0)
        return float(wins / (pos.size * neg.size))
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def roc_points(scores, labels) -> List[tuple]:
    """ROC 曲線の (fpr, tpr, threshold) 列"""
    scores, labels = _binary(scores, labels)
    fpr, tpr, thresholds = roc_curve(labels, scores)
    return [(float(f), float(t), float(th)) for f, t, th in zip(fpr, tpr, thresholds)]


@dataclass
class ConfusionReport:
    labels: List[int]
    matrix: np.ndarray
    accuracy: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "matrix": self.matrix.tolist(), "accuracy": self.accuracy,
                "precision": self.precision, "recall": self.recall}


def confusion(selected: Sequence[int], truth: Sequence[int], positive: Optional[int] = None) -> ConfusionReport:
    """
    混同行列（行が正解、列が選択）と精度指標

    3 クラス以上はマクロ平均、2 クラスは positive（既定は小さい方のラベル）を陽性とする

    Raises:
        ShapeError: 長さが異なる場合
    """
    if len(selected) != len(truth):
        raise ShapeError("confusion", (len(selected),), (len(truth),))
    if len(truth) == 0:
        raise ValueError("confusion requires at least one sample")
    labels = sorted(set(truth) | set(selected))
    matrix = confusion_matrix(truth, selected, labels=labels)
    accuracy = float(np.trace(matrix) / matrix.sum())
    if len(labels) > 2:
        p, r, _, _ = precision_recall_fscore_support(truth, selected, labels=labels, average="macro",
                                                     zero_division=0)
    elif len(labels) == 2:
        pos = labels[0] if positive is None else positive
        p, r, _, _ = precision_recall_fscore_support(truth, selected, labels=labels, pos_label=pos,
                                                     average="binary", zero_division=0)
    else:
        p = r = accuracy
    return ConfusionReport(labels=list(labels), matrix=matrix, accuracy=accuracy, precision=float(p),
                           recall=float(r))

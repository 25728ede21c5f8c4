"""
正規化フローモジュール
アフィンカップリング層による隠れ表現の密度推定と、尤度最大のドメイン選択
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from decode.errors import NoFinalizedQueryError, ShapeError
from decode.models import Manifest, ParamBundle
from decode.services.adcore import (
    Tensor, as_tensor, clip, concat, exp, mean, no_grad, reshape, square, tanh, tsum,
)
from decode.services.hyper import HypernetState, hypernet_forward

logger = logging.getLogger(__name__)

_SUBNET_KEYS = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class FlowSpec:
    """フローの構造（次元・層数・サブネット幅・スケールのクランプ幅）"""
    d_h: int
    n_layers: int = 8
    hidden: int = 64
    clamp: float = 5.0

    def __post_init__(self):
        if self.d_h % 2:
            raise ShapeError("FlowSpec", (self.d_h,), ("even",))
        if self.n_layers < 2:
            raise ValueError(f"n_layers must be >= 2, got {self.n_layers}")

    def manifest(self) -> Manifest:
        half = self.d_h // 2
        entries = []
        for k in range(self.n_layers):
            for net in ("s", "t"):
                entries += [
                    (f"c{k}.{net}.w1", (half, self.hidden)), (f"c{k}.{net}.b1", (self.hidden,)),
                    (f"c{k}.{net}.w2", (self.hidden, half)), (f"c{k}.{net}.b2", (half,)),
                ]
        return tuple(entries)


@dataclass
class FlowEval:
    """z (B, d_h)、log_det (B,)、log_prob (B,)"""
    z: Tensor
    log_det: Tensor
    log_prob: Tensor


@dataclass
class DomainSelection:
    """シーンごとの選択クエリと全クエリの対数尤度"""
    selected: np.ndarray       # (B,) クエリ ID
    log_evidence: np.ndarray   # (B, n_finalized)
    query_ids: List[int]


def _layer(views: Dict[str, Tensor], k: int) -> Dict[str, Dict[str, Tensor]]:
    return {net: {key: views[f"c{k}.{net}.{key}"] for key in _SUBNET_KEYS} for net in ("s", "t")}


def _subnet(x: Tensor, p: Dict[str, Tensor]) -> Tensor:
    return tanh(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def _as_rows(h) -> Tensor:
    h = as_tensor(h)
    if h.ndim == 1:
        h = reshape(h, (1, h.shape[0]))
    if h.shape[1] % 2:
        raise ShapeError("coupling", h.shape, ("even",))
    return h


def _halves(h: Tensor, parity: int) -> Tuple[Tensor, Tensor]:
    half = h.shape[1] // 2
    first, second = h[:, :half], h[:, half:]
    return (first, second) if parity == 0 else (second, first)


def _join(kept: Tensor, moved: Tensor, parity: int) -> Tensor:
    return concat([kept, moved] if parity == 0 else [moved, kept], axis=1)


def coupling_forward(h, layer: Dict[str, Dict[str, Tensor]], parity: int,
                     clamp: float = 5.0) -> Tuple[Tensor, Tensor]:
    """
    アフィンカップリング 1 層：片側を固定し、もう片側を exp(s)·x + t で変換する

    Returns:
        (変換後 (B, d_h), log|det J| (B,))
    """
    h = _as_rows(h)
    kept, moved = _halves(h, parity)
    s = clip(_subnet(kept, layer["s"]), -clamp, clamp)
    t = _subnet(kept, layer["t"])
    return _join(kept, exp(s) * moved + t, parity), tsum(s, axis=1)


def coupling_inverse(h, layer: Dict[str, Dict[str, Tensor]], parity: int, clamp: float = 5.0) -> Tensor:
    h = _as_rows(h)
    kept, moved = _halves(h, parity)
    s = clip(_subnet(kept, layer["s"]), -clamp, clamp)
    t = _subnet(kept, layer["t"])
    return _join(kept, (moved - t) * exp(-s), parity)


def flow_forward(h, params: ParamBundle, spec: FlowSpec) -> Tuple[Tensor, Tensor]:
    """全カップリング層を順に適用（層ごとに固定側を交互に入れ替える）"""
    params.check(spec.manifest())
    views = params.views()
    x = _as_rows(h)
    log_det = None
    for k in range(spec.n_layers):
        x, ld = coupling_forward(x, _layer(views, k), k % 2, spec.clamp)
        log_det = ld if log_det is None else log_det + ld
    return x, log_det


def flow_inverse(z, params: ParamBundle, spec: FlowSpec) -> Tensor:
    """潜在変数 z から隠れ表現 h へ戻す"""
    params.check(spec.manifest())
    views = params.views()
    x = _as_rows(z)
    for k in reversed(range(spec.n_layers)):
        x = coupling_inverse(x, _layer(views, k), k % 2, spec.clamp)
    return x


def flow_log_prob(h, params: ParamBundle, spec: FlowSpec) -> FlowEval:
    """
    標準正規を基底分布とした log p(h)

    Args:
        h: 隠れ表現 (B, d_h) または (d_h,)
        params: フローのパラメータ
        spec: フロー構造

    Returns:
        FlowEval（z・log_det・log_prob）
    """
    z, log_det = flow_forward(h, params, spec)
    d = spec.d_h
    base = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * tsum(square(z), axis=1)
    return FlowEval(z=z, log_det=log_det, log_prob=base + log_det)


def domain_loss(h, params: ParamBundle, spec: FlowSpec) -> Tensor:
    """バッチ平均の負の対数尤度"""
    h = _as_rows(h)
    if h.shape[0] == 0:
        raise ShapeError("domain_loss", h.shape, ("B >= 1", spec.d_h))
    return -mean(flow_log_prob(h, params, spec).log_prob)


def select_domain(h, hyper: HypernetState, spec: FlowSpec, flows: Optional[Dict[int, ParamBundle]] = None) -> DomainSelection:
    """
    確定済みクエリのフローのうち対数尤度が最大のものを選ぶ（同値なら ID が小さい方）

    Args:
        h: 隠れ表現
        hyper: HypernetState
        spec: フロー構造
        flows: 生成済みフロー（クエリ ID → バンドル）。None なら生成する

    Raises:
        NoFinalizedQueryError: 確定済みクエリがない場合
    """
    finalized = hyper.finalized
    if not finalized:
        raise NoFinalizedQueryError("no finalized domain query; run an expansion phase first")
    h = as_tensor(h).detach()
    ids = [q.query_id for q in finalized]
    cols = []
    with no_grad():
        for q in finalized:
            bundle = flows[q.query_id] if flows else hypernet_forward(q, "flow", hyper)
            cols.append(flow_log_prob(h, bundle, spec).log_prob.values)
    log_ev = np.stack(cols, axis=1)
    best = np.argmax(log_ev, axis=1)
    return DomainSelection(selected=np.asarray(ids)[best], log_evidence=log_ev, query_ids=ids)

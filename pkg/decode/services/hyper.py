"""
ハイパーネットワークモジュール
ドメインクエリからデコーダヘッドと正規化フローのパラメータをチャンク単位で生成する
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from decode.errors import ManifestMismatchError, PhaseAlreadyFinalizedError, PhaseOrderError
from decode.models import Manifest, ParamBundle, manifest_size
from decode.services.adcore import (
    Tensor, as_tensor, concat, cos, no_grad, parameter, reshape, sin, slice_, square, tanh, tsum,
)

logger = logging.getLogger(__name__)

TARGETS = ("decoder-head", "flow")

# 出力層の分散推定に使うランダムクエリ数
_INIT_QUERIES = 64


@dataclass
class DomainQuery:
    """ドメインごとの学習可能なクエリ q_m"""
    q: Tensor
    query_id: int
    finalized: bool = False


@dataclass
class HypernetState:
    """
    トランク Θ・チャンク埋め込み・クエリと、確定済みフェーズの出力スナップショット

    stored_targets は直近の確定時点の Θ* による全確定クエリの出力、
    reference_targets は各クエリの確定時点の出力で以後変更しない
    """
    trunk: Dict[str, Tensor]
    banks: Dict[str, Tensor]
    manifests: Dict[str, Manifest]
    chunk_sizes: Dict[str, int]
    out_scales: Dict[str, np.ndarray]
    d_q: int
    queries: List[DomainQuery] = field(default_factory=list)
    stored_targets: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)
    reference_targets: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def n_hidden(self) -> int:
        return sum(1 for name in self.trunk if name.startswith("hidden") and name.endswith(".w"))

    @property
    def finalized(self) -> List[DomainQuery]:
        return [q for q in self.queries if q.finalized]

    @property
    def current(self) -> Optional[DomainQuery]:
        if self.queries and not self.queries[-1].finalized:
            return self.queries[-1]
        return None

    def query(self, query_id: int) -> DomainQuery:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        raise KeyError(query_id)

    def shared_params(self) -> List[Tensor]:
        return list(self.trunk.values()) + [self.banks[t] for t in TARGETS]

    def copy(self) -> "HypernetState":
        return copy.deepcopy(self)


# =========================
# 構築と初期化
# =========================
def _fan_in_scales(manifest: Manifest, small: Sequence[str] = (), small_gain: float = 0.1) -> np.ndarray:
    """
    生成パラメータごとの標準偏差 1/√fan_in

    バイアスは直前の重みの fan_in を使う。small に含まれる名前の接尾辞には small_gain を掛ける
    """
    scales = []
    fan_in = 1
    for name, shape in manifest:
        if len(shape) >= 2:
            fan_in = shape[0]
        std = 1.0 / np.sqrt(fan_in)
        if any(name.endswith(s) for s in small):
            std *= small_gain
        scales.append(np.full(int(np.prod(shape)), std))
    return np.concatenate(scales)


def mip_transform(q: Union[Tensor, np.ndarray]) -> Tensor:
    """大きさに依存しないクエリ表現 [cos q, sin q] / √d_q"""
    q = as_tensor(q)
    return concat([cos(q), sin(q)], axis=0) / np.sqrt(q.shape[0])


def _hidden_forward(z: Tensor, bank: Tensor, trunk: Dict[str, Tensor], n_hidden: int) -> Tensor:
    n = bank.shape[0]
    tiled = as_tensor(np.ones((n, 1))) @ reshape(z, (1, z.shape[0]))
    x = concat([tiled, bank], axis=1)
    for i in range(n_hidden):
        x = tanh(x @ trunk[f"hidden{i}.w"] + trunk[f"hidden{i}.b"])
    return x


def principled_init(state: HypernetState, rng: np.random.Generator) -> HypernetState:
    """
    出力層を初期化し、生成パラメータの分散を fan-in 既定値に合わせる

    出力層の分散は最終隠れ層の二乗平均 E[a²] をランダムクエリで実測して決める
    """
    n_hidden = state.n_hidden
    if n_hidden:
        width = state.trunk[f"hidden{n_hidden - 1}.w"].shape[1]
    else:
        width = 2 * state.d_q + state.banks["flow"].shape[1]
    samples = rng.normal(0.0, 1.0, size=(_INIT_QUERIES, state.d_q))
    for t in TARGETS:
        bank = state.banks[t]
        with no_grad():
            sq = [np.mean(square(_hidden_forward(mip_transform(q), bank, state.trunk, n_hidden)).values)
                  for q in samples]
        e_a2 = float(np.mean(sq))
        var = 1.0 / (width * e_a2)
        chunk = state.chunk_sizes[t]
        state.trunk[f"head.{t}.w"] = parameter(rng.normal(0.0, np.sqrt(var), size=(width, chunk)), f"head.{t}.w")
        state.trunk[f"head.{t}.b"] = parameter(np.zeros(chunk), f"head.{t}.b")
        logger.debug("[Hyper] %s chunks=%d E[a^2]=%.4f", t, bank.shape[0], e_a2)
    return state


def build_hypernet(decoder_manifest: Manifest, flow_manifest: Manifest, d_q: int, d_b: int,
                   trunk_hidden: Sequence[int], chunk_dec: int, chunk_flow: int,
                   rng: np.random.Generator) -> HypernetState:
    """ハイパーネットワークを構築し principled_init で出力層を初期化する"""
    manifests = {"decoder-head": tuple(decoder_manifest), "flow": tuple(flow_manifest)}
    chunk_sizes = {"decoder-head": chunk_dec, "flow": chunk_flow}
    trunk: Dict[str, Tensor] = {}
    width = 2 * d_q + d_b
    for i, h in enumerate(trunk_hidden):
        trunk[f"hidden{i}.w"] = parameter(rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, h)), f"hidden{i}.w")
        trunk[f"hidden{i}.b"] = parameter(np.zeros(h), f"hidden{i}.b")
        width = h
    banks = {
        t: parameter(rng.normal(0.0, 1.0, size=(int(np.ceil(manifest_size(m) / chunk_sizes[t])), d_b)), f"bank.{t}")
        for t, m in manifests.items()
    }
    out_scales = {
        "decoder-head": _fan_in_scales(manifests["decoder-head"]),
        "flow": _fan_in_scales(manifests["flow"], small=(".w2", ".b2")),
    }
    state = HypernetState(trunk=trunk, banks=banks, manifests=manifests, chunk_sizes=chunk_sizes,
                          out_scales=out_scales, d_q=d_q)
    return principled_init(state, rng)


# =========================
# 順伝播
# =========================
def hypernet_forward(q: Union[DomainQuery, Tensor, np.ndarray], target: str, state: HypernetState) -> ParamBundle:
    """
    クエリから対象ネットワークの平坦パラメータを生成する

    Args:
        q: ドメインクエリ
        target: "decoder-head" または "flow"
        state: ハイパーネットワーク

    Returns:
        対象マニフェスト長の ParamBundle（Θ・バンク・q に対して微分可能）

    Raises:
        ManifestMismatchError: 未知の target
    """
    if target not in state.manifests:
        raise ManifestMismatchError(f"unknown target manifest '{target}'")
    vec = q.q if isinstance(q, DomainQuery) else as_tensor(q)
    bank = state.banks[target]
    hid = _hidden_forward(mip_transform(vec), bank, state.trunk, state.n_hidden)
    raw = hid @ state.trunk[f"head.{target}.w"] + state.trunk[f"head.{target}.b"]
    total = manifest_size(state.manifests[target])
    flat = slice_(reshape(raw, (bank.shape[0] * state.chunk_sizes[target],)), 0, total)
    return ParamBundle(flat * state.out_scales[target], state.manifests[target], target)


def generate_numpy(state: HypernetState, query_id: int) -> Dict[str, np.ndarray]:
    """確定済みクエリの生成パラメータ（勾配なし）"""
    query = state.query(query_id)
    with no_grad():
        return {t: hypernet_forward(query, t, state).numpy().copy() for t in TARGETS}


# =========================
# フェーズ管理と正則化
# =========================
def add_query(state: HypernetState, rng: np.random.Generator) -> DomainQuery:
    """
    新しいドメインクエリを追加する

    Raises:
        PhaseOrderError: 前のクエリが未確定の場合
    """
    if state.current is not None:
        raise PhaseOrderError(f"query {state.current.query_id} is still in progress; finalize it first")
    query_id = len(state.queries) + 1
    query = DomainQuery(q=parameter(rng.normal(0.0, 1.0, size=state.d_q), f"query{query_id}"), query_id=query_id)
    state.queries.append(query)
    return query


def trainable_params(state: HypernetState) -> List[Tensor]:
    """拡張フェーズで更新する葉：Θ・バンク・現在のクエリ"""
    current = state.current
    if current is None:
        raise PhaseOrderError("no query in progress")
    return state.shared_params() + [current.q]


def reg_loss(state: HypernetState, lam: float) -> Tensor:
    """
    出力正則化 λ Σ_i ‖H(q_i; Θ*) − H(q_i; Θ)‖²（確定済みクエリのみ、両ターゲット）

    現在学習中のクエリは含まない
    """
    finalized = state.finalized
    if lam == 0.0 or not finalized:
        return as_tensor(0.0)
    total = None
    for query in finalized:
        stored = state.stored_targets[query.query_id]
        for t in TARGETS:
            diff = hypernet_forward(query, t, state).flat - stored[t]
            term = tsum(square(diff))
            total = term if total is None else total + term
    return total * lam


def finalize_phase(state: HypernetState) -> HypernetState:
    """
    現在のクエリを確定し、Θ* による全確定クエリの出力を保存し直す

    Raises:
        PhaseAlreadyFinalizedError: 確定すべきクエリがない場合
    """
    current = state.current
    if current is None:
        last = state.queries[-1].query_id if state.queries else 0
        raise PhaseAlreadyFinalizedError(f"phase {last} is already finalized")
    current.q = Tensor(current.q.values)
    current.finalized = True
    for query in state.finalized:
        outputs = generate_numpy(state, query.query_id)
        state.stored_targets[query.query_id] = outputs
        if query.query_id not in state.reference_targets:
            state.reference_targets[query.query_id] = {t: v.copy() for t, v in outputs.items()}
    logger.info("[Expand] finalized query %d (%d total)", current.query_id, len(state.finalized))
    return state


def output_drift(state: HypernetState) -> Dict[int, float]:
    """各確定クエリの現在の出力と確定時点の出力の最大絶対差"""
    drift = {}
    for query in state.finalized:
        now = generate_numpy(state, query.query_id)
        ref = state.reference_targets[query.query_id]
        drift[query.query_id] = float(max(np.max(np.abs(now[t] - ref[t])) for t in TARGETS))
    return drift

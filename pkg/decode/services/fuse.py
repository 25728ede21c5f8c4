"""
事後融合モジュール
汎用モデルと専用モデルの出力をディリクレ事後分布として統合し、予測軌跡を得る
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from decode.errors import DomainError, ShapeError
from decode.models import ParamBundle, Scene
from decode.services.adcore import (
    Tensor, as_tensor, clip, digamma, exp, getitem, lgamma, mean, no_grad, reshape, tsum,
)
from decode.services.flow import FlowSpec, select_domain
from decode.services.hyper import hypernet_forward
from decode.services.prednet import ScenePrediction, decode, encode

if TYPE_CHECKING:
    from decode.services.contlearn import Framework

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6


# =========================
# データ型
# =========================
@dataclass
class PosteriorState:
    """1 シーンの融合事後分布"""
    chi_post: np.ndarray
    e_post: float
    e0: float
    e_star: float
    selected: Optional[int] = None


@dataclass
class FusedPosterior:
    """学習時の融合事後分布（バッチ、微分可能）"""
    chi_post: Tensor  # (B, M)
    e_post: Tensor    # (B,)


@dataclass
class FusedComponent:
    weight: float
    trajectory: np.ndarray  # (T_F, 2)
    provenance: str         # "generalized" / "specialized"
    mode: int


@dataclass
class FusedPrediction:
    components: List[FusedComponent]
    posterior: PosteriorState

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def trajectories(self) -> np.ndarray:
        return np.stack([c.trajectory for c in self.components])

    def weight_split(self) -> Dict[str, float]:
        """出力重みのうち汎用・専用それぞれが占める割合"""
        total = float(np.sum(self.weights)) or 1.0
        return {src: float(sum(c.weight for c in self.components if c.provenance == src) / total)
                for src in ("generalized", "specialized")}


@dataclass
class PredictResult:
    trajectories: np.ndarray     # (K, T_F, 2)
    fused: FusedPrediction
    log_evidence: Dict[int, float] = field(default_factory=dict)


# =========================
# エビデンスと事後分布
# =========================
def evidence_from_loglik(log_prob: float, d_h: int, lo: float = -10.0, hi: float = 10.0,
                         mode: str = "per-dim") -> float:
    """
    フロー対数尤度からエビデンス e* = exp(clip(log p / d_h, lo, hi)) を求める

    mode="raw" は次元で割らずに exp(clip(log p)) を使う

    Raises:
        DomainError: 対数尤度が NaN の場合
    """
    lp = float(log_prob)
    if np.isnan(lp):
        raise DomainError("log-likelihood is NaN")
    x = lp / d_h if mode == "per-dim" else lp
    return float(np.exp(np.clip(x, lo, hi)))


def evidence_tensor(log_prob: Tensor, d_h: int, lo: float = -10.0, hi: float = 10.0,
                    mode: str = "per-dim") -> Tensor:
    x = log_prob / d_h if mode == "per-dim" else log_prob
    return exp(clip(x, lo, hi))


def _check_simplex(chi: np.ndarray, name: str) -> np.ndarray:
    chi = np.asarray(chi, dtype=np.float64)
    if np.any(chi < 0) or abs(chi.sum() - 1.0) > SIMPLEX_TOL:
        raise DomainError(f"{name} is not on the probability simplex (sum={chi.sum():.6g})")
    return chi


def posterior_merge(chi0, e0: float, chi_star, e_star: float, selected: Optional[int] = None) -> PosteriorState:
    """
    χ_post = (e0·χ0 + e*·χ*) / (e0 + e*)、e_post = e0 + e*

    Raises:
        ShapeError: モード数が異なる場合
        DomainError: 確率単体外の入力や負のエビデンス
    """
    chi0 = np.asarray(chi0, dtype=np.float64)
    chi_star = np.asarray(chi_star, dtype=np.float64)
    if chi0.shape != chi_star.shape:
        raise ShapeError("posterior_merge", chi0.shape, chi_star.shape)
    _check_simplex(chi0, "chi0")
    _check_simplex(chi_star, "chi_star")
    if e0 <= 0 or e_star < 0:
        raise DomainError(f"evidence must be positive (e0={e0}, e_star={e_star})")
    e_post = e0 + e_star
    return PosteriorState(chi_post=(e0 * chi0 + e_star * chi_star) / e_post, e_post=e_post,
                          e0=e0, e_star=e_star, selected=selected)


def fuse_chi(chi0, e0: float, chi_star: Tensor, e_star: Tensor) -> FusedPosterior:
    """学習用の融合（χ0 は定数、χ*・e* は微分可能）"""
    e_star = as_tensor(e_star)
    e_post = e_star + e0
    n = e_post.shape[0]
    chi_post = (as_tensor(chi0) * e0 + chi_star * reshape(e_star, (n, 1))) / reshape(e_post, (n, 1))
    return FusedPosterior(chi_post=chi_post, e_post=e_post)


def dirichlet_entropy(alpha: Tensor) -> Tensor:
    """Dir(α) のエントロピー（行ごと）"""
    alpha = as_tensor(alpha)
    m = alpha.shape[-1]
    a0 = tsum(alpha, axis=-1)
    return (tsum(lgamma(alpha), axis=-1) - lgamma(a0) + (a0 - m) * digamma(a0)
            - tsum((alpha - 1.0) * digamma(alpha), axis=-1))


def bayes_loss(chi_pred, e_pred, winner) -> Tensor:
    """
    ディリクレ事後分布に対する期待クロスエントロピーからエントロピーを引いた損失（バッチ平均）

    ψ(α0) − ψ(α_winner) − H[Dir(α)]、α = e·χ

    Raises:
        DomainError: α に正でない成分がある場合
    """
    chi = as_tensor(chi_pred)
    if chi.ndim == 1:
        chi = reshape(chi, (1, chi.shape[0]))
    n = chi.shape[0]
    e = as_tensor(e_pred)
    e = reshape(e, (n, 1)) if e.size == n else e
    alpha = chi * e
    if not np.all(alpha.values > 0):
        raise DomainError("Dirichlet concentration must be positive")
    winner = np.broadcast_to(np.asarray(winner), (n,))
    a0 = tsum(alpha, axis=1)
    nll = digamma(a0) - getitem(digamma(alpha), (np.arange(n), winner))
    return mean(nll - dirichlet_entropy(alpha))


# =========================
# 統合（NMS）とサンプリング
# =========================
def _slot_quota(m: int, e0: float, e_star: float) -> Dict[str, int]:
    """
    M 個の出力枠をエビデンス比で割り当てる

    e_star / (e0 + e_star) < 1 / (2M) なら専用モデルの枠は 0（汎用モデルの全成分が残る）
    """
    n_spec = int(np.floor(m * e_star / (e0 + e_star) + 0.5))
    return {"generalized": m - n_spec, "specialized": n_spec}


def nms_merge(gen: ScenePrediction, spec: Optional[ScenePrediction], posterior: PosteriorState,
              radius: float) -> FusedPrediction:
    """
    両モデルの成分を重み e·χ / e_post で並べ、終点が radius 以内の他方の成分を吸収する

    同じモデル内の成分同士は抑制しない。各モデルが新たに残せる成分数は _slot_quota で上限を決め、
    枠からあふれた成分は後段で近傍への吸収か空き枠への追加を試みる。残す成分は最大 M 個

    Raises:
        ValueError: radius が正でない場合
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    m = len(gen.chi)
    if spec is None:
        comps = [FusedComponent(float(w), gen.trajectories[j], "generalized", j) for j, w in enumerate(gen.chi)]
        comps.sort(key=lambda c: -c.weight)
        return FusedPrediction(components=comps, posterior=posterior)

    e_total = posterior.e0 + posterior.e_star
    cands = [FusedComponent(float(posterior.e0 * w / e_total), gen.trajectories[j], "generalized", j)
             for j, w in enumerate(gen.chi)]
    cands += [FusedComponent(float(posterior.e_star * w / e_total), spec.trajectories[j], "specialized", j)
              for j, w in enumerate(spec.chi)]
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].weight, i))
    quota = _slot_quota(m, posterior.e0, posterior.e_star)

    kept: List[FusedComponent] = []

    def _absorb(cand: FusedComponent) -> bool:
        end = cand.trajectory[-1]
        near = [(float(np.linalg.norm(k.trajectory[-1] - end)), idx) for idx, k in enumerate(kept)
                if k.provenance != cand.provenance]
        near = [x for x in near if x[0] <= radius]
        if near:
            kept[min(near)[1]].weight += cand.weight
        return bool(near)

    overflow = []
    for i in order:
        cand = cands[i]
        if _absorb(cand):
            continue
        if quota[cand.provenance] > 0 and len(kept) < m:
            quota[cand.provenance] -= 1
            kept.append(FusedComponent(cand.weight, cand.trajectory, cand.provenance, cand.mode))
        else:
            overflow.append(cand)
    for cand in overflow:
        if not _absorb(cand) and len(kept) < m:
            kept.append(FusedComponent(cand.weight, cand.trajectory, cand.provenance, cand.mode))
    kept.sort(key=lambda c: -c.weight)
    return FusedPrediction(components=kept, posterior=posterior)


def sample_dirichlet(alpha: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """ガンマ変量の正規化による Dir(α) サンプル (n, M)"""
    alpha = np.maximum(np.asarray(alpha, dtype=np.float64), 1e-12)
    g = rng.gamma(alpha, 1.0, size=(n, alpha.size))
    total = g.sum(axis=1, keepdims=True)
    fallback = np.zeros_like(g)
    fallback[:, int(np.argmax(alpha))] = 1.0
    return np.where(total > 0, g / np.where(total > 0, total, 1.0), fallback)


def sample_components(alpha: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Dir(α) から混合比を引き、各サンプルの成分番号を選ぶ"""
    eta = sample_dirichlet(alpha, k, rng)
    u = rng.random(k)
    idx = (np.cumsum(eta, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, len(alpha) - 1)


# =========================
# 推論
# =========================
class FusionPredictor:
    """
    確定済みクエリの生成パラメータをキャッシュしてバッチ推論する

    e0 は推論時に上書きでき（感度分析用）、use_generalized=False で専用モデルのみを使う
    """

    def __init__(self, framework: "Framework", e0: Optional[float] = None, use_generalized: bool = True):
        self.framework = framework
        cfg = framework.config
        self.loss_cfg = cfg.loss
        self.e0 = cfg.loss.e0 if e0 is None else float(e0)
        self.use_generalized = use_generalized
        self.spec: FlowSpec = framework.flow_spec
        self.heads: Dict[int, ParamBundle] = {}
        self.flows: Dict[int, ParamBundle] = {}
        with no_grad():
            for q in framework.hyper.finalized:
                self.heads[q.query_id] = hypernet_forward(q, "decoder-head", framework.hyper).detach()
                self.flows[q.query_id] = hypernet_forward(q, "flow", framework.hyper).detach()

    def evidence(self, log_prob: float) -> float:
        lc = self.loss_cfg
        return evidence_from_loglik(log_prob, self.spec.d_h, lc.evidence_lo, lc.evidence_hi, lc.evidence_mode)

    def predict_batch(self, scenes: Sequence[Scene]) -> Tuple[List[FusedPrediction], List[Dict[int, float]]]:
        """
        シーン列を決定的に推論する

        Returns:
            (各シーンの統合予測, 各シーンのクエリ別対数尤度)
        """
        fw = self.framework
        with no_grad():
            h = encode(scenes, fw.encoder)
            gen = decode(h, fw.generalized, fw.anchors, "generalized")
            if not self.heads:
                fused = [self._generalized_only(gen.scene(b)) for b in range(len(scenes))]
                return fused, [{} for _ in scenes]
            sel = select_domain(h, fw.hyper, self.spec, self.flows)
            spec_preds = {}
            for qid in np.unique(sel.selected):
                rows = np.flatnonzero(sel.selected == qid)
                pred = decode(h.values[rows], self.heads[int(qid)], fw.anchors, f"specialized-{int(qid)}")
                for i, b in enumerate(rows):
                    spec_preds[int(b)] = pred.scene(i)

        results, evidences = [], []
        for b in range(len(scenes)):
            col = sel.query_ids.index(int(sel.selected[b]))
            e_star = self.evidence(sel.log_evidence[b, col])
            evidences.append({qid: float(sel.log_evidence[b, j]) for j, qid in enumerate(sel.query_ids)})
            results.append(self._fuse(gen.scene(b), spec_preds[b], e_star, int(sel.selected[b])))
        return results, evidences

    def _generalized_only(self, gen: ScenePrediction) -> FusedPrediction:
        posterior = PosteriorState(chi_post=gen.chi, e_post=self.e0, e0=self.e0, e_star=0.0)
        return nms_merge(gen, None, posterior, self.loss_cfg.nms_radius)

    def _fuse(self, gen: ScenePrediction, spec: ScenePrediction, e_star: float, selected: int) -> FusedPrediction:
        if not self.use_generalized:
            posterior = PosteriorState(chi_post=spec.chi, e_post=e_star, e0=0.0, e_star=e_star, selected=selected)
            comps = [FusedComponent(float(w), spec.trajectories[j], "specialized", j) for j, w in enumerate(spec.chi)]
            comps.sort(key=lambda c: -c.weight)
            return FusedPrediction(components=comps, posterior=posterior)
        posterior = posterior_merge(gen.chi, self.e0, spec.chi, e_star, selected)
        return nms_merge(gen, spec, posterior, self.loss_cfg.nms_radius)


def predict(scene: Scene, framework: "Framework", k: int = 6, deterministic: bool = True,
            rng: Optional[np.random.Generator] = None) -> PredictResult:
    """
    1 シーンの推論

    Args:
        scene: ターゲット中心座標系のシーン
        framework: 学習済みフレームワーク
        k: 確率的モードでのサンプル数
        deterministic: True なら重み順の全成分を返す
        rng: 確率的モードで使う乱数生成器

    Returns:
        PredictResult
    """
    fused, evidences = FusionPredictor(framework).predict_batch([scene])
    fp = fused[0]
    if deterministic:
        return PredictResult(trajectories=fp.trajectories, fused=fp, log_evidence=evidences[0])
    if rng is None:
        raise ValueError("stochastic prediction requires an explicit rng")
    w = fp.weights
    alpha = fp.posterior.e_post * w / w.sum()
    idx = sample_components(alpha, k, rng)
    return PredictResult(trajectories=fp.trajectories[idx], fused=fp, log_evidence=evidences[0])

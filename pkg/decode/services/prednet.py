"""
予測ネットワークモジュール
凍結する汎用エンコーダ・デコーダと、ハイパーネットワークからパラメータを受け取る専用デコーダヘッド
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from sklearn.cluster import KMeans

from decode.errors import SceneNotNormalizedError, TrainingDivergedError
from decode.models import Config, Manifest, ParamBundle, Scene
from decode.services.adcore import (
    AdamW, StepHalvingSchedule, Tape, Tensor, as_tensor, getitem, log_softmax, mean, no_grad,
    parameter, reshape, softmax, square, tanh, tsum,
)
from decode.services.scenegen import SceneBatch, stack_scenes

logger = logging.getLogger(__name__)

# 入出力のスケール（メートルをネットワーク内部の単位へ）
POS_SCALE = 10.0
OFFSET_SCALE = 10.0


# =========================
# データ型
# =========================
@dataclass(frozen=True)
class ModeAnchors:
    """k-means で得たモード終点（事前学習後は不変）"""
    endpoints: np.ndarray  # (M, 2)
    t_f: int

    def __post_init__(self):
        arr = np.array(self.endpoints, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "endpoints", arr)

    @property
    def count(self) -> int:
        return self.endpoints.shape[0]

    def base_paths(self) -> np.ndarray:
        """原点から各終点への等速直線（M, T_F, 2）"""
        frac = (np.arange(self.t_f) + 1.0) / self.t_f
        return self.endpoints[:, None, :] * frac[None, :, None]


@dataclass
class MixturePrediction:
    """バッチの多峰予測：chi (B, M)、logits (B, M)、trajectories (B, M, T_F, 2)"""
    chi: Tensor
    logits: Tensor
    trajectories: Tensor
    source: str

    def scene(self, b: int) -> "ScenePrediction":
        return ScenePrediction(chi=self.chi.values[b].copy(),
                               trajectories=self.trajectories.values[b].copy(), source=self.source)


@dataclass
class ScenePrediction:
    """1 シーン分の予測（numpy）"""
    chi: np.ndarray           # (M,)
    trajectories: np.ndarray  # (M, T_F, 2)
    source: str


@dataclass
class PretrainResult:
    encoder: ParamBundle
    decoder: ParamBundle
    anchors: ModeAnchors
    history: List[dict]


# =========================
# マニフェストと初期化
# =========================
def encoder_input_dim(t_p: int, n_nb: int) -> int:
    # 過去軌跡 + 近傍ごとの (最終位置, 速度, マスク)
    return 2 * t_p + 5 * n_nb


def encoder_manifest(d_in: int, hidden: int, d_h: int) -> Manifest:
    return (("w1", (d_in, hidden)), ("b1", (hidden,)), ("w2", (hidden, d_h)), ("b2", (d_h,)))


def decoder_manifest(d_h: int, hidden: int, t_f: int) -> Manifest:
    return (
        ("w1", (d_h + 2, hidden)), ("b1", (hidden,)),
        ("w_logit", (hidden, 1)), ("b_logit", (1,)),
        ("w_traj", (hidden, 2 * t_f)), ("b_traj", (2 * t_f,)),
    )


def init_flat(manifest: Manifest, rng: np.random.Generator, gains: Optional[Dict[str, float]] = None) -> np.ndarray:
    """重みは N(0, gain²/fan_in)、バイアスは 0 で初期化した平坦ベクトル"""
    gains = gains or {}
    parts = []
    for name, shape in manifest:
        if len(shape) >= 2:
            std = gains.get(name, 1.0) / np.sqrt(shape[0])
            parts.append(rng.normal(0.0, std, size=int(np.prod(shape))))
        else:
            parts.append(np.zeros(int(np.prod(shape))))
    return np.concatenate(parts)


# =========================
# エンコーダ
# =========================
def _as_batch(scenes: Union[Scene, Sequence[Scene], SceneBatch]) -> SceneBatch:
    if isinstance(scenes, SceneBatch):
        return scenes
    if isinstance(scenes, Scene):
        return stack_scenes([scenes])
    return stack_scenes(list(scenes))


def scene_features(batch: SceneBatch) -> np.ndarray:
    """エンコーダ入力（domain_tag は参照しない）"""
    n = len(batch)
    m = batch.mask[..., None]
    last = batch.neighbors[:, :, -1, :]
    vel = last - batch.neighbors[:, :, -2, :]
    return np.concatenate([
        batch.past.reshape(n, -1) / POS_SCALE,
        (last * m).reshape(n, -1) / POS_SCALE,
        (vel * m).reshape(n, -1),
        batch.mask,
    ], axis=1)


def encode(scenes: Union[Scene, Sequence[Scene], SceneBatch], encoder: ParamBundle) -> Tensor:
    """
    シーンを隠れ表現 h (B, d_h) に写像する

    Raises:
        SceneNotNormalizedError: 最終観測点が原点でないシーンを含む場合
    """
    batch = _as_batch(scenes)
    if not np.all(batch.past[:, -1, :] == 0.0):
        bad = int(np.argmax(np.any(batch.past[:, -1, :] != 0.0, axis=1)))
        raise SceneNotNormalizedError(f"scene {bad} is not target-centric (past[-1] != 0)")
    v = encoder.views()
    x = as_tensor(scene_features(batch))
    return tanh(x @ v["w1"] + v["b1"]) @ v["w2"] + v["b2"]


# =========================
# デコーダヘッド
# =========================
def decode(h: Tensor, params: ParamBundle, anchors: ModeAnchors, source: str = "generalized") -> MixturePrediction:
    """
    アンカーごとの 2 層 MLP で (h ⊕ anchor) からロジットと軌跡オフセットを出力

    Raises:
        ManifestMismatchError: パラメータ構造がヘッドと一致しない場合
    """
    h = as_tensor(h)
    if h.ndim == 1:
        h = reshape(h, (1, h.shape[0]))
    n, d_h = h.shape
    hidden = params.manifest[0][1][-1] if params.manifest else 0
    params.check(decoder_manifest(d_h, hidden, anchors.t_f))
    v = params.views()
    m = anchors.count
    w1 = v["w1"]
    # concat(h, anchor) @ w1 を h 側とアンカー側に分けて計算
    from_h = reshape(h @ w1[:d_h], (n, 1, hidden))
    from_a = reshape(as_tensor(anchors.endpoints / POS_SCALE) @ w1[d_h:], (1, m, hidden))
    hid = reshape(tanh(from_h + from_a + v["b1"]), (n * m, hidden))
    logits = reshape(hid @ v["w_logit"] + v["b_logit"], (n, m))
    offsets = reshape(hid @ v["w_traj"] + v["b_traj"], (n, m, anchors.t_f, 2))
    trajectories = offsets * OFFSET_SCALE + anchors.base_paths()[None]
    return MixturePrediction(chi=softmax(logits, axis=1), logits=logits, trajectories=trajectories, source=source)


def winner_modes(gt_future: np.ndarray, anchors: ModeAnchors) -> np.ndarray:
    """正解終点に最も近いアンカー番号（B,）"""
    gt = np.asarray(gt_future, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    end = gt[:, -1, :]
    d = np.linalg.norm(end[:, None, :] - anchors.endpoints[None], axis=2)
    return np.argmin(d, axis=1)


def regression_loss(pred: MixturePrediction, gt_future: np.ndarray, winners: np.ndarray) -> Tensor:
    """勝者モードの L2：ステップごとのユークリッド距離二乗の平均 [m²]"""
    gt = np.asarray(gt_future, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    rows = np.arange(gt.shape[0])
    chosen = getitem(pred.trajectories, (rows, np.asarray(winners)))
    return mean(tsum(square(chosen - gt), axis=2))


def classification_loss(pred: MixturePrediction, winners: np.ndarray) -> Tensor:
    """事前学習時のクロスエントロピー −log χ_winner"""
    rows = np.arange(pred.logits.shape[0])
    return -mean(getitem(log_softmax(pred.logits, axis=1), (rows, np.asarray(winners))))


def motion_loss(pred: MixturePrediction, gt_future: np.ndarray, anchors: ModeAnchors, posterior=None) -> Tensor:
    """
    分類項 + 勝者モードの回帰項

    Args:
        pred: 予測
        gt_future: 正解 (B, T_F, 2) または (T_F, 2)
        anchors: モードアンカー（勝者決定に使用）
        posterior: chi_post / e_post を持つ事後状態。None なら通常のクロスエントロピー

    Returns:
        スカラー損失
    """
    winners = winner_modes(gt_future, anchors)
    if posterior is None:
        cls = classification_loss(pred, winners)
    else:
        from decode.services.fuse import bayes_loss
        cls = bayes_loss(posterior.chi_post, posterior.e_post, winners)
    return cls + regression_loss(pred, gt_future, winners)


def constant_velocity(batch: SceneBatch, t_f: int) -> np.ndarray:
    """等速外挿（比較用の単純予測、(B, T_F, 2)）"""
    vel = batch.past[:, -1, :] - batch.past[:, -2, :]
    steps = np.arange(1, t_f + 1, dtype=np.float64)
    return steps[None, :, None] * vel[:, None, :]


# =========================
# 事前学習
# =========================
def fit_anchors(scenes: Sequence[Scene], n_modes: int, seed: int) -> ModeAnchors:
    """正解終点の k-means でアンカーを決める（座標順に並べて固定）"""
    endpoints = np.stack([s.future[-1] for s in scenes])
    km = KMeans(n_clusters=n_modes, random_state=seed, n_init=10).fit(endpoints)
    centers = km.cluster_centers_
    order = np.lexsort((centers[:, 1], centers[:, 0]))
    return ModeAnchors(endpoints=centers[order], t_f=scenes[0].future.shape[0])


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def pretrain_generalized(scenes: Sequence[Scene], config: Config,
                         on_epoch: Optional[Callable[[int, ParamBundle, ParamBundle], None]] = None) -> PretrainResult:
    """
    混合コーパスで汎用エンコーダ φ とデコーダ θ⁽⁰⁾ を学習する

    Args:
        scenes: 事前学習コーパス
        config: 実験設定
        on_epoch: エポック終了ごとに (epoch, encoder, decoder) を受け取るコールバック

    Returns:
        PretrainResult（以後 φ・θ⁽⁰⁾・アンカーは凍結）

    Raises:
        TrainingDivergedError: 損失が有限でなくなった場合
    """
    mc, oc = config.model, config.optim
    rng = np.random.default_rng([config.seed, 0])
    anchors = fit_anchors(scenes, mc.n_modes, config.seed)
    batch_all = stack_scenes(scenes)
    t_p, n_nb = batch_all.past.shape[1], batch_all.neighbors.shape[1]

    enc_m = encoder_manifest(encoder_input_dim(t_p, n_nb), mc.enc_hidden, mc.d_h)
    dec_m = decoder_manifest(mc.d_h, mc.dec_hidden, anchors.t_f)
    encoder = ParamBundle(parameter(init_flat(enc_m, rng), name="encoder"), enc_m, "encoder")
    decoder = ParamBundle(parameter(init_flat(dec_m, rng, {"w_traj": 0.1}), name="generalized"), dec_m,
                          "decoder-head")
    schedule = StepHalvingSchedule(oc.pretrain_lr, oc.warm_epochs, oc.halve_every)
    opt = AdamW([encoder.flat, decoder.flat], lr=oc.pretrain_lr, weight_decay=oc.weight_decay, schedule=schedule)

    history = []
    for epoch in range(oc.pretrain_epochs):
        lr = opt.set_epoch(epoch)
        started = time.perf_counter()
        losses = []
        for idx in _batches(len(scenes), oc.batch_size, rng):
            sub = SceneBatch(batch_all.past[idx], batch_all.future[idx], batch_all.neighbors[idx],
                             batch_all.mask[idx], batch_all.tags[idx])
            with Tape() as tape:
                pred = decode(encode(sub, encoder), decoder, anchors)
                loss = motion_loss(pred, sub.future, anchors)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"[Pretrain] non-finite loss at epoch {epoch}")
            tape.backward(loss, opt.params)
            opt.step()
            losses.append(value * len(idx))
        row = {"epoch": epoch, "l_motion": float(np.sum(losses) / len(scenes)), "l_domain": 0.0,
               "l_reg": 0.0, "lr": lr, "wall_time": time.perf_counter() - started}
        history.append(row)
        logger.info("[Pretrain] epoch %d loss=%.5f lr=%.2e", epoch, row["l_motion"], lr)
        if on_epoch is not None:
            on_epoch(epoch, encoder, decoder)

    return PretrainResult(encoder=_freeze(encoder), decoder=_freeze(decoder), anchors=anchors, history=history)


def _freeze(bundle: ParamBundle) -> ParamBundle:
    return ParamBundle(Tensor(bundle.flat.values), bundle.manifest, bundle.target)


def predict_heads(h: Tensor, params: ParamBundle, anchors: ModeAnchors, source: str) -> MixturePrediction:
    """勾配を記録せずにデコードする（評価用）"""
    with no_grad():
        return decode(h, params, anchors, source)

"""
継続学習オーケストレーション
事前学習・拡張フェーズ・ベースライン・評価と、チェックポイントの保存／読み込み
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from decode.errors import (
    CheckpointCorruptedError, CheckpointError, DatasetFormatError, PhaseOrderError, TrainingDivergedError,
    UnsupportedVersionError,
)
from decode.models import Config, Manifest, ParamBundle, Scene
from decode.services.adcore import AdamW, StepHalvingSchedule, Tape, Tensor, mean, no_grad, parameter
from decode.services.flow import FlowSpec, flow_log_prob, select_domain
from decode.services.fuse import FusionPredictor, FusedPosterior, bayes_loss, evidence_tensor, fuse_chi
from decode.services.hyper import (
    TARGETS, DomainQuery, HypernetState, add_query, build_hypernet, finalize_phase, hypernet_forward,
    reg_loss, trainable_params,
)
from decode.services.metrics import ResultMatrix, aer, auroc, confusion, fgt, mean_errors, roc_points
from decode.services.prednet import (
    ModeAnchors, decode, decoder_manifest, encode, encoder_input_dim, encoder_manifest, fit_anchors, motion_loss,
    pretrain_generalized, regression_loss, winner_modes,
)
from decode.services.scenegen import read_dataset, read_splits, stack_scenes
from decode.utils.storage import canonical_json, pack_floats, sha256_hex, unpack_floats, write_csv

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DECODE-CKPT"
CHECKPOINT_VERSION = 1

TRAINING_LOG_HEADER = ("epoch", "l_motion", "l_domain", "l_reg", "lr", "wall_time")

BaselineKind = Literal["naive-finetune", "frozen-generalized", "experience-replay"]
BASELINE_KINDS = ("naive-finetune", "frozen-generalized", "experience-replay")


# =========================
# データ型
# =========================
@dataclass
class Framework:
    """
    学習済みフレームワーク一式（チェックポイントの内容）

    encoder・generalized・anchors は事前学習後に凍結し、拡張フェーズでは hyper のみ更新する
    """
    config: Config
    encoder: ParamBundle
    generalized: ParamBundle
    anchors: ModeAnchors
    hyper: HypernetState
    logs: Dict[str, List[dict]] = field(default_factory=dict)

    @property
    def flow_spec(self) -> FlowSpec:
        mc = self.config.model
        return FlowSpec(d_h=mc.d_h, n_layers=mc.flow_layers, hidden=mc.flow_hidden,
                        clamp=self.config.loss.scale_clamp)

    @property
    def phase(self) -> int:
        return len(self.hyper.finalized)


@dataclass(frozen=True)
class PhaseEntry:
    index: int
    domain: str
    path: Path
    epochs: int
    batch_size: int
    schedule: StepHalvingSchedule


@dataclass(frozen=True)
class PhasePlan:
    entries: Tuple[PhaseEntry, ...]
    seed: int

    def entry(self, index: int) -> PhaseEntry:
        if not 1 <= index <= len(self.entries):
            raise PhaseOrderError(f"phase {index} is not in the plan (1..{len(self.entries)})")
        return self.entries[index - 1]


@dataclass
class LossParts:
    """拡張フェーズの損失の内訳"""
    bayes: Tensor
    regression: Tensor
    domain: Tensor
    reg: Tensor
    beta: float

    @property
    def motion(self) -> Tensor:
        return self.bayes + self.regression

    @property
    def total(self) -> Tensor:
        return self.motion + self.domain * self.beta + self.reg


@dataclass
class BaselineResult:
    kind: str
    ade: ResultMatrix
    fde: ResultMatrix

    def summary(self) -> dict:
        return {"method": self.kind, "aer_ade": aer(self.ade), "fgt_ade": fgt(self.ade),
                "aer_fde": aer(self.fde), "fgt_fde": fgt(self.fde)}


# =========================
# 計画
# =========================
def dataset_path(data_dir: Path, name: str) -> Path:
    return Path(data_dir) / f"{name}.ds"


def build_plan(config: Config, data_dir: Path) -> PhasePlan:
    """
    設定のフェーズ順からフェーズ計画を作る

    Raises:
        FileNotFoundError: ドメインのデータセットがない場合
    """
    oc = config.optim
    entries = []
    for i, name in enumerate(config.plan.phases, start=1):
        path = dataset_path(data_dir, name)
        if not path.exists():
            raise FileNotFoundError(f"dataset for phase {i} not found: {path} (run `gen-data` first)")
        entries.append(PhaseEntry(index=i, domain=name, path=path, epochs=oc.expand_epochs,
                                  batch_size=oc.batch_size,
                                  schedule=StepHalvingSchedule(oc.lr, oc.warm_epochs, oc.halve_every)))
    return PhasePlan(entries=tuple(entries), seed=config.seed)


def write_training_log(path: Path, rows: Sequence[dict]) -> None:
    write_csv(path, TRAINING_LOG_HEADER, ([row.get(k, 0.0) for k in TRAINING_LOG_HEADER] for row in rows))


def _log_rows(rows: Sequence[dict]) -> List[dict]:
    # チェックポイントには実行時間を含めない
    return [{k: v for k, v in row.items() if k != "wall_time"} for row in rows]


# =========================
# 事前学習
# =========================
def new_framework(config: Config, encoder: ParamBundle, generalized: ParamBundle, anchors: ModeAnchors) -> Framework:
    mc = config.model
    rng = np.random.default_rng([config.seed, 99])
    spec = FlowSpec(d_h=mc.d_h, n_layers=mc.flow_layers, hidden=mc.flow_hidden, clamp=config.loss.scale_clamp)
    hyper = build_hypernet(decoder_manifest(mc.d_h, mc.dec_hidden, anchors.t_f), spec.manifest(), mc.d_q, mc.d_b,
                           mc.trunk_hidden, mc.chunk_dec, mc.chunk_flow, rng)
    return Framework(config=config, encoder=encoder, generalized=generalized, anchors=anchors, hyper=hyper)


def run_pretrain(config: Config, mix: Sequence[Scene], out_path: Optional[Path] = None,
                 log_path: Optional[Path] = None) -> Framework:
    """
    混合コーパスで汎用モデルを学習し、クエリ空のフレームワークを返す

    Args:
        config: 実験設定
        mix: 事前学習コーパス
        out_path: チェックポイントの保存先（None なら保存しない）
        log_path: 学習ログ CSV の保存先

    Raises:
        TrainingDivergedError: 発散した場合（直前のエポックの状態を *.lastgood.ckpt に保存）
    """
    last_good: Dict[str, np.ndarray] = {}

    def _remember(epoch, encoder, decoder):
        last_good["encoder"] = encoder.numpy().copy()
        last_good["decoder"] = decoder.numpy().copy()

    try:
        result = pretrain_generalized(mix, config, on_epoch=_remember)
    except TrainingDivergedError:
        if out_path is not None and last_good:
            save_checkpoint(_last_good_framework(config, mix, last_good),
                            Path(out_path).with_suffix(".lastgood.ckpt"))
            logger.error("[Pretrain] diverged; last good state saved next to %s", out_path)
        raise

    fw = new_framework(config, result.encoder, result.decoder, result.anchors)
    fw.logs["pretrain"] = _log_rows(result.history)
    if log_path is not None:
        write_training_log(log_path, result.history)
    if out_path is not None:
        save_checkpoint(fw, out_path)
    return fw


def _last_good_framework(config: Config, mix: Sequence[Scene], state: Dict[str, np.ndarray]) -> Framework:
    mc = config.model
    anchors = fit_anchors(mix, mc.n_modes, config.seed)
    enc_m = encoder_manifest(encoder_input_dim(config.data.t_p, config.data.n_neighbors), mc.enc_hidden, mc.d_h)
    dec_m = decoder_manifest(mc.d_h, mc.dec_hidden, anchors.t_f)
    return new_framework(config, ParamBundle(Tensor(state["encoder"]), enc_m, "encoder"),
                         ParamBundle(Tensor(state["decoder"]), dec_m, "decoder-head"), anchors)


# =========================
# 拡張フェーズ
# =========================
@dataclass
class _Prepared:
    """凍結部分の出力を前計算したデータ"""
    h: np.ndarray
    chi0: np.ndarray
    future: np.ndarray
    winners: np.ndarray

    def take(self, idx) -> "_Prepared":
        return _Prepared(self.h[idx], self.chi0[idx], self.future[idx], self.winners[idx])

    def __len__(self) -> int:
        return self.h.shape[0]


def prepare(framework: Framework, scenes: Sequence[Scene]) -> _Prepared:
    batch = stack_scenes(scenes)
    with no_grad():
        h = encode(batch, framework.encoder)
        gen = decode(h, framework.generalized, framework.anchors)
    return _Prepared(h=h.values, chi0=gen.chi.values, future=batch.future,
                     winners=winner_modes(batch.future, framework.anchors))


def expansion_loss_parts(framework: Framework, query: DomainQuery, data: _Prepared) -> LossParts:
    """L_motion（ベイズ損失 + 回帰）+ β·L_domain + L_reg の各項"""
    cfg = framework.config
    lc = cfg.loss
    spec = framework.flow_spec
    theta = hypernet_forward(query, "decoder-head", framework.hyper)
    omega = hypernet_forward(query, "flow", framework.hyper)
    pred = decode(data.h, theta, framework.anchors, source=f"specialized-{query.query_id}")
    ev = flow_log_prob(data.h, omega, spec)
    e_star = evidence_tensor(ev.log_prob, spec.d_h, lc.evidence_lo, lc.evidence_hi, lc.evidence_mode)
    posterior: FusedPosterior = fuse_chi(data.chi0, lc.e0, pred.chi, e_star)
    return LossParts(
        bayes=bayes_loss(posterior.chi_post, posterior.e_post, data.winners),
        regression=regression_loss(pred, data.future, data.winners),
        domain=-mean(ev.log_prob),
        reg=reg_loss(framework.hyper, lc.reg_lambda),
        beta=lc.beta_domain,
    )


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def run_expansion(framework: Framework, scenes: Sequence[Scene], phase: int, config: Optional[Config] = None,
                  log_path: Optional[Path] = None) -> Framework:
    """
    フェーズ m の専用モデル（クエリ・Θ・バンク）を学習して確定する

    Args:
        framework: フェーズ m−1 まで確定済みのフレームワーク（変更しない）
        scenes: ドメイン m の学習シーン
        phase: フェーズ番号 m（1 始まり）
        config: 学習設定（None なら framework の設定）
        log_path: 学習ログ CSV の保存先

    Returns:
        フェーズ m を確定した新しいフレームワーク

    Raises:
        PhaseOrderError: 確定済みフェーズ数が m−1 でない場合
        TrainingDivergedError: 損失が有限でなくなった場合
    """
    if framework.phase != phase - 1 or framework.hyper.current is not None:
        raise PhaseOrderError(f"phase {phase} requires phases 1..{phase - 1} finalized "
                              f"(checkpoint has {framework.phase})")
    cfg = config or framework.config
    oc = cfg.optim
    fw = Framework(config=cfg, encoder=framework.encoder, generalized=framework.generalized,
                   anchors=framework.anchors, hyper=framework.hyper.copy(),
                   logs={k: list(v) for k, v in framework.logs.items()})
    rng = np.random.default_rng([cfg.seed, 100 + phase])
    query = add_query(fw.hyper, rng)
    params = trainable_params(fw.hyper)
    opt = AdamW(params, lr=oc.lr, weight_decay=oc.weight_decay,
                schedule=StepHalvingSchedule(oc.lr, oc.warm_epochs, oc.halve_every))
    data = prepare(fw, scenes)

    history = []
    for epoch in range(oc.expand_epochs):
        lr = opt.set_epoch(epoch)
        started = time.perf_counter()
        sums = np.zeros(3)
        for idx in _batches(len(data), oc.batch_size, rng):
            with Tape() as tape:
                parts = expansion_loss_parts(fw, query, data.take(idx))
                total = parts.total
            if not np.isfinite(total.item()):
                raise TrainingDivergedError(f"[Expand] phase {phase}: non-finite loss at epoch {epoch}")
            tape.backward(total, params)
            opt.step()
            sums += len(idx) * np.array([parts.motion.item(), parts.domain.item(), parts.reg.item()])
        sums /= len(data)
        row = {"epoch": epoch, "l_motion": float(sums[0]), "l_domain": float(sums[1]), "l_reg": float(sums[2]),
               "lr": lr, "wall_time": time.perf_counter() - started}
        history.append(row)
        logger.info("[Expand] phase %d epoch %d motion=%.5f domain=%.5f reg=%.3e lr=%.2e",
                    phase, epoch, row["l_motion"], row["l_domain"], row["l_reg"], lr)

    finalize_phase(fw.hyper)
    fw.logs[f"phase{phase}"] = _log_rows(history)
    if log_path is not None:
        write_training_log(log_path, history)
    return fw


# =========================
# 評価
# =========================
def evaluate_head(framework: Framework, head: ParamBundle, scenes: Sequence[Scene]) -> Dict[str, float]:
    """単一ヘッド（汎用またはベースライン）の minADE / minFDE"""
    batch = stack_scenes(scenes)
    with no_grad():
        pred = decode(encode(batch, framework.encoder), head, framework.anchors)
    return mean_errors(list(pred.trajectories.values), list(batch.future))


def evaluate_fused(framework: Framework, scenes: Sequence[Scene], e0: Optional[float] = None,
                   use_generalized: bool = True) -> Dict[str, float]:
    fused, _ = FusionPredictor(framework, e0=e0, use_generalized=use_generalized).predict_batch(scenes)
    return mean_errors(fused, [s.future for s in scenes])


def evaluate_staircase(frameworks: Sequence[Framework], val_sets: Sequence[Sequence[Scene]]) -> Tuple[ResultMatrix, ResultMatrix]:
    """frameworks[j]（フェーズ j+1 確定後）でドメイン i ≤ j を評価した階段行列"""
    n = len(val_sets)
    ade, fde = ResultMatrix(n), ResultMatrix(n)
    for j, fw in enumerate(frameworks[:n]):
        predictor = FusionPredictor(fw)
        for i in range(j + 1):
            fused, _ = predictor.predict_batch(val_sets[i])
            res = mean_errors(fused, [s.future for s in val_sets[i]])
            ade.set(i, j, res["min_ade"])
            fde.set(i, j, res["min_fde"])
        logger.info("[Eval] staircase column %d done", j + 1)
    return ade, fde


def domain_awareness(framework: Framework, val_sets: Sequence[Sequence[Scene]]) -> dict:
    """
    各フローの OOD 判別性能（負の対数尤度をスコア、他ドメインを陽性）と選択の混同行列

    val_sets[k] はフェーズ k+1 のドメインの検証シーン
    """
    spec = framework.flow_spec
    hs = []
    with no_grad():
        for scenes in val_sets:
            hs.append(encode(scenes, framework.encoder))
    h_all = np.concatenate([h.values for h in hs])
    truth = np.concatenate([np.full(h.shape[0], k + 1) for k, h in enumerate(hs)])
    sel = select_domain(h_all, framework.hyper, spec)
    per_flow = {}
    for col, qid in enumerate(sel.query_ids):
        labels = (truth != qid).astype(int)
        if labels.min() == labels.max():
            continue
        scores = -sel.log_evidence[:, col]
        per_flow[qid] = {"auroc": auroc(scores, labels), "roc": roc_points(scores, labels)}
    report = confusion([int(x) for x in sel.selected], [int(x) for x in truth])
    return {"flows": per_flow, "confusion": report.to_dict()}


def ablate_e0(framework: Framework, domains: Dict[str, Sequence[Scene]], grid: Sequence[float]) -> List[dict]:
    """推論時の e0 を変えた minADE / minFDE（e0 = none は専用モデルのみ、generalized は汎用モデルのみ）"""
    rows = []
    for name, scenes in domains.items():
        base = evaluate_head(framework, framework.generalized, scenes)
        rows.append({"e0": "generalized", "domain": name, **base})
        for e0 in grid:
            rows.append({"e0": float(e0), "domain": name, **evaluate_fused(framework, scenes, e0=e0)})
        if framework.hyper.finalized:
            rows.append({"e0": "none", "domain": name, **evaluate_fused(framework, scenes, use_generalized=False)})
    return rows


def expansion_advisory(framework: Framework, domains: Dict[str, Sequence[Scene]], margin: float) -> List[dict]:
    """汎用モデルより margin 以上良い専用モデルがないドメインに拡張を推奨する"""
    rows = []
    for name, scenes in domains.items():
        gen = evaluate_head(framework, framework.generalized, scenes)["min_ade"]
        spec = (evaluate_fused(framework, scenes, use_generalized=False)["min_ade"]
                if framework.hyper.finalized else None)
        rows.append({"domain": name, "generalized_ade": gen, "specialized_ade": spec,
                     "expand": spec is None or spec > gen - margin})
    return rows


# =========================
# ベースライン
# =========================
class ReservoirBuffer:
    """過去ドメインのサンプルを一様に保持するリザーバ"""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity <= 0:
            raise ValueError(f"buffer size must be positive, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self.items: List[Tuple[np.ndarray, np.ndarray]] = []
        self.seen = 0

    def add(self, h: np.ndarray, future: np.ndarray) -> None:
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append((h, future))
            return
        j = int(self.rng.integers(0, self.seen))
        if j < self.capacity:
            self.items[j] = (h, future)

    def sample(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        idx = self.rng.choice(len(self.items), size=n, replace=len(self.items) < n)
        return (np.stack([self.items[i][0] for i in idx]), np.stack([self.items[i][1] for i in idx]))

    def __len__(self) -> int:
        return len(self.items)


def _finetune_head(framework: Framework, head: Tensor, data: _Prepared, rng: np.random.Generator,
                   buffer: Optional[ReservoirBuffer], cfg: Config) -> None:
    oc = cfg.optim
    ratio = cfg.baseline.replay_ratio
    manifest = framework.generalized.manifest
    opt = AdamW([head], lr=oc.lr, weight_decay=oc.weight_decay,
                schedule=StepHalvingSchedule(oc.lr, oc.warm_epochs, oc.halve_every))
    n_replay = int(round(oc.batch_size * ratio)) if buffer is not None and len(buffer) else 0
    for epoch in range(oc.expand_epochs):
        opt.set_epoch(epoch)
        for idx in _batches(len(data), oc.batch_size - n_replay, rng):
            h, fut = data.h[idx], data.future[idx]
            if n_replay:
                rh, rf = buffer.sample(n_replay)
                h, fut = np.concatenate([h, rh]), np.concatenate([fut, rf])
            with Tape() as tape:
                pred = decode(h, ParamBundle(head, manifest, "decoder-head"), framework.anchors)
                loss = motion_loss(pred, fut, framework.anchors)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"[Baseline] non-finite loss at epoch {epoch}")
            tape.backward(loss, [head])
            opt.step()


def run_baseline(kind: str, framework: Framework, train_sets: Sequence[Sequence[Scene]],
                 val_sets: Sequence[Sequence[Scene]], config: Optional[Config] = None) -> BaselineResult:
    """
    比較手法を同じフェーズ順で実行して階段行列を返す

    naive-finetune は単一ヘッドを順に微調整、frozen-generalized は学習なし、
    experience-replay はリザーバに過去ドメインを保持してバッチに混ぜる。
    config を渡すとその設定（シードを含む）で学習する
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline '{kind}' (expected one of {', '.join(BASELINE_KINDS)})")
    cfg = config or framework.config
    n = len(val_sets)
    ade, fde = ResultMatrix(n), ResultMatrix(n)

    if kind == "frozen-generalized":
        for i in range(n):
            res = evaluate_head(framework, framework.generalized, val_sets[i])
            for j in range(i, n):
                ade.set(i, j, res["min_ade"])
                fde.set(i, j, res["min_fde"])
        return BaselineResult(kind, ade, fde)

    rng = np.random.default_rng([cfg.seed, 200 + BASELINE_KINDS.index(kind)])
    head = parameter(framework.generalized.numpy().copy(), name=kind)
    buffer = ReservoirBuffer(cfg.baseline.buffer_size, rng) if kind == "experience-replay" else None
    for j in range(n):
        data = prepare(framework, train_sets[j])
        _finetune_head(framework, head, data, rng, buffer, cfg)
        if buffer is not None:
            for k in range(len(data)):
                buffer.add(data.h[k], data.future[k])
        bundle = ParamBundle(Tensor(head.values.copy()), framework.generalized.manifest, "decoder-head")
        for i in range(j + 1):
            res = evaluate_head(framework, bundle, val_sets[i])
            ade.set(i, j, res["min_ade"])
            fde.set(i, j, res["min_fde"])
        logger.info("[Baseline] %s phase %d done", kind, j + 1)
    return BaselineResult(kind, ade, fde)


# =========================
# チェックポイント
# =========================
def _manifest_json(manifest: Manifest) -> list:
    return [[name, list(shape)] for name, shape in manifest]


def _manifest_from(data: list) -> Manifest:
    return tuple((name, tuple(int(x) for x in shape)) for name, shape in data)


def _arrays(fw: Framework) -> Dict[str, np.ndarray]:
    hy = fw.hyper
    arrays = {
        "encoder": fw.encoder.numpy(),
        "generalized": fw.generalized.numpy(),
        "anchors": fw.anchors.endpoints,
    }
    for name, t in hy.trunk.items():
        arrays[f"trunk.{name}"] = t.values
    for target in TARGETS:
        arrays[f"bank.{target}"] = hy.banks[target].values
        arrays[f"out_scale.{target}"] = hy.out_scales[target]
    for q in hy.queries:
        arrays[f"query.{q.query_id}"] = q.q.values
    for kind, store in (("stored", hy.stored_targets), ("reference", hy.reference_targets)):
        for qid, outputs in store.items():
            for target, values in outputs.items():
                arrays[f"{kind}.{qid}.{target}"] = values
    return arrays


def encode_checkpoint(fw: Framework) -> bytes:
    """正規化したチェックポイントのバイト列（同じ内容なら常に同じバイト列）"""
    hy = fw.hyper
    arrays = _arrays(fw)
    entries, blocks, offset = [], [], 0
    for name in sorted(arrays):
        block = pack_floats(arrays[name])
        entries.append({"name": name, "shape": list(np.shape(arrays[name])), "offset": offset,
                        "nbytes": len(block), "sha256": sha256_hex(block)})
        blocks.append(block)
        offset += len(block)
    manifest = {
        "config": fw.config.echo(),
        "encoder_manifest": _manifest_json(fw.encoder.manifest),
        "generalized_manifest": _manifest_json(fw.generalized.manifest),
        "anchors_t_f": fw.anchors.t_f,
        "hyper": {
            "d_q": hy.d_q,
            "trunk": list(hy.trunk),
            "manifests": {t: _manifest_json(m) for t, m in hy.manifests.items()},
            "chunk_sizes": dict(hy.chunk_sizes),
            "queries": [{"id": q.query_id, "finalized": q.finalized} for q in hy.queries],
        },
        "logs": fw.logs,
        "log_digests": {k: sha256_hex(canonical_json(v)) for k, v in fw.logs.items()},
        "arrays": entries,
    }
    manifest_bytes = canonical_json(manifest)
    payload = b"".join(blocks)
    header = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "manifest_bytes": len(manifest_bytes),
              "payload_bytes": len(payload), "digest": sha256_hex(manifest_bytes, b"\n", payload)}
    return canonical_json(header) + b"\n" + manifest_bytes + b"\n" + payload


def save_checkpoint(fw: Framework, path: Path) -> str:
    """
    チェックポイントを書き出す

    Returns:
        ファイル全体の SHA-256
    """
    data = encode_checkpoint(fw)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info("[Ckpt] saved %s (phase %d, %d bytes)", path, fw.phase, len(data))
    return sha256_hex(data)


def checkpoint_digest(fw: Framework) -> str:
    return sha256_hex(encode_checkpoint(fw))


def _split(data: bytes) -> Tuple[dict, int]:
    end = data.find(b"\n")
    if end < 0:
        raise CheckpointCorruptedError("missing checkpoint header", 0)
    try:
        header = json.loads(data[:end])
    except ValueError:
        raise CheckpointCorruptedError("unreadable checkpoint header", 0) from None
    if not isinstance(header, dict) or header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DECODE checkpoint (bad magic)")
    return header, end + 1


def decode_checkpoint(data: bytes) -> Framework:
    """
    バイト列からフレームワークを復元する

    Raises:
        UnsupportedVersionError: フォーマットバージョンが異なる場合
        CheckpointCorruptedError: ダイジェスト不一致（壊れたブロックのバイト位置を含む）
    """
    header, start = _split(data)
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format version {header.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    m_len, p_len = int(header["manifest_bytes"]), int(header["payload_bytes"])
    manifest_bytes = data[start:start + m_len]
    p_start = start + m_len + 1
    payload = data[p_start:]
    if len(manifest_bytes) != m_len or len(payload) != p_len or data[start + m_len:p_start] != b"\n":
        raise CheckpointCorruptedError("checkpoint truncated or resized", min(len(data), p_start + p_len))
    try:
        manifest = json.loads(manifest_bytes)
    except ValueError:
        raise CheckpointCorruptedError("unreadable checkpoint manifest", start) from None
    for entry in manifest["arrays"]:
        block = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if sha256_hex(block) != entry["sha256"]:
            raise CheckpointCorruptedError(f"array '{entry['name']}' digest mismatch", p_start + entry["offset"])
    if sha256_hex(manifest_bytes, b"\n", payload) != header["digest"]:
        raise CheckpointCorruptedError("checkpoint manifest digest mismatch", start)

    arrays = {e["name"]: unpack_floats(payload[e["offset"]:e["offset"] + e["nbytes"]], e["shape"])
              for e in manifest["arrays"]}
    config = Config.model_validate(manifest["config"])
    hm = manifest["hyper"]
    queries = []
    for q in hm["queries"]:
        values = arrays[f"query.{q['id']}"]
        tensor = Tensor(values) if q["finalized"] else parameter(values, f"query{q['id']}")
        queries.append(DomainQuery(q=tensor, query_id=q["id"], finalized=q["finalized"]))

    def _store(kind: str) -> Dict[int, Dict[str, np.ndarray]]:
        out: Dict[int, Dict[str, np.ndarray]] = {}
        for name, values in arrays.items():
            if name.startswith(kind + "."):
                _, qid, target = name.split(".", 2)
                out.setdefault(int(qid), {})[target] = values
        return dict(sorted(out.items()))

    hyper = HypernetState(
        trunk={name: parameter(arrays[f"trunk.{name}"], name) for name in hm["trunk"]},
        banks={t: parameter(arrays[f"bank.{t}"], f"bank.{t}") for t in TARGETS},
        manifests={t: _manifest_from(m) for t, m in hm["manifests"].items()},
        chunk_sizes={t: int(c) for t, c in hm["chunk_sizes"].items()},
        out_scales={t: arrays[f"out_scale.{t}"] for t in TARGETS},
        d_q=int(hm["d_q"]),
        queries=queries,
        stored_targets=_store("stored"),
        reference_targets=_store("reference"),
    )
    return Framework(
        config=config,
        encoder=ParamBundle(Tensor(arrays["encoder"]), _manifest_from(manifest["encoder_manifest"]), "encoder"),
        generalized=ParamBundle(Tensor(arrays["generalized"]), _manifest_from(manifest["generalized_manifest"]),
                                "decoder-head"),
        anchors=ModeAnchors(endpoints=arrays["anchors"], t_f=int(manifest["anchors_t_f"])),
        hyper=hyper,
        logs=manifest["logs"],
    )


def load_checkpoint(path: Path) -> Framework:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    fw = decode_checkpoint(path.read_bytes())
    logger.info("[Ckpt] loaded %s (phase %d)", path, fw.phase)
    return fw


# =========================
# データ読み込み
# =========================
def load_domain_split(data_dir: Path, name: str, split: str, limit: Optional[int] = None) -> List[Scene]:
    """ドメインデータセットの分割（train / val）を読む"""
    path = dataset_path(data_dir, name)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run `gen-data` first)")
    scenes = read_splits(path).get(split)
    if scenes is None:
        raise DatasetFormatError(f"dataset {path} has no '{split}' split")
    return scenes[:limit] if limit else scenes


def load_mix(data_dir: Path) -> List[Scene]:
    path = Path(data_dir) / "mix.ds"
    if not path.exists():
        raise FileNotFoundError(f"pretraining corpus not found: {path} (run `gen-data` first)")
    return read_dataset(path)

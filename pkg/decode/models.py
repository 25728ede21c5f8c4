"""
データモデル定義
実験設定（pydantic）と、モジュール間で共有するシーン・パラメータバンドル
"""
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from decode.errors import ManifestMismatchError
from decode.services.adcore import Tensor, as_tensor, reshape, slice_
from decode.utils.storage import load_json

# 運動ファミリーごとのモード数（mode_weights の長さ）
FAMILY_MODES = {
    "arc": 2,             # continue / exit
    "straight": 2,        # lane-keep / lane-drift
    "turn": 3,            # straight / left / right
    "aggressive-arc": 2,  # continue / exit
}


class DomainSpec(BaseModel):
    """合成ドメインの生成仕様"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    tag: int = Field(ge=1, description="評価専用のドメインタグ")
    family: Literal["arc", "straight", "turn", "aggressive-arc"]
    speed_range: Tuple[float, float] = Field(description="速度 [m/s]")
    curvature_range: Tuple[float, float] = Field(description="曲率 [1/m]")
    accel_range: Tuple[float, float] = Field(default=(0.0, 0.0), description="加速度 [m/s^2]")
    heading_noise_std: float = Field(default=0.0, ge=0.0, description="1 ステップあたりの方位ノイズ [rad]")
    mode_weights: List[float]

    @field_validator("speed_range")
    @classmethod
    def _speed_positive(cls, v):
        lo, hi = v
        if not (lo > 0 and hi >= lo and math.isfinite(hi)):
            raise ValueError(f"speed_range must be positive and ordered, got {v}")
        return v

    @field_validator("curvature_range", "accel_range")
    @classmethod
    def _finite_ordered(cls, v, info):
        lo, hi = v
        if not (math.isfinite(lo) and math.isfinite(hi) and hi >= lo):
            raise ValueError(f"{info.field_name} must be finite and ordered, got {v}")
        return v

    @model_validator(mode="after")
    def _weights(self):
        if len(self.mode_weights) != FAMILY_MODES[self.family]:
            raise ValueError(
                f"mode_weights: family {self.family} needs {FAMILY_MODES[self.family]} weights, "
                f"got {len(self.mode_weights)}")
        if any(w < 0 for w in self.mode_weights) or abs(sum(self.mode_weights) - 1.0) > 1e-9:
            raise ValueError(f"mode_weights must be non-negative and sum to 1, got {self.mode_weights}")
        return self


def stock_domains() -> List[DomainSpec]:
    """既定の 4 ドメイン（環状路・高速道路・交差点・攻撃的な環状路）"""
    return [
        DomainSpec(name="arc", tag=1, family="arc", speed_range=(5.0, 12.0),
                   curvature_range=(0.03, 0.08), heading_noise_std=0.002, mode_weights=[0.6, 0.4]),
        DomainSpec(name="straight", tag=2, family="straight", speed_range=(25.0, 40.0),
                   curvature_range=(-0.001, 0.001), heading_noise_std=0.0005, mode_weights=[0.7, 0.3]),
        DomainSpec(name="turn", tag=3, family="turn", speed_range=(3.0, 10.0),
                   curvature_range=(0.08, 0.15), heading_noise_std=0.002, mode_weights=[0.4, 0.3, 0.3]),
        DomainSpec(name="aggressive-arc", tag=4, family="aggressive-arc", speed_range=(13.0, 20.0),
                   curvature_range=(0.03, 0.08), accel_range=(-2.0, 2.0), heading_noise_std=0.004,
                   mode_weights=[0.5, 0.5]),
    ]


# =========================
# 実験設定
# =========================
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    t_p: int = Field(default=10, ge=2, description="過去ステップ数（1 秒）")
    t_f: int = Field(default=60, ge=1, description="予測ステップ数（6 秒）")
    dt: float = Field(default=0.1, gt=0, description="サンプリング間隔 [s]")
    n_neighbors: int = Field(default=4, ge=0)
    domains: List[DomainSpec] = Field(default_factory=stock_domains)
    pretrain_weights: List[float] = Field(default_factory=lambda: [0.3, 0.3, 0.3, 0.1])
    n_pretrain: int = Field(default=3000, gt=0)
    n_train: int = Field(default=1000, gt=0)
    n_val: int = Field(default=500, gt=0)

    @model_validator(mode="after")
    def _check(self):
        names = [d.name for d in self.domains]
        tags = [d.tag for d in self.domains]
        if not self.domains:
            raise ValueError("domains: at least one domain is required")
        if len(set(names)) != len(names) or len(set(tags)) != len(tags):
            raise ValueError("domains: names and tags must be unique")
        if len(self.pretrain_weights) != len(self.domains):
            raise ValueError("pretrain_weights: one weight per domain is required")
        if abs(sum(self.pretrain_weights) - 1.0) > 1e-9 or min(self.pretrain_weights) < 0:
            raise ValueError("pretrain_weights must be non-negative and sum to 1")
        return self

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)


class ModelConfig(_Section):
    d_h: int = Field(default=64, ge=2, description="隠れ表現の次元（偶数）")
    n_modes: int = Field(default=6, ge=1)
    enc_hidden: int = Field(default=128, ge=1)
    dec_hidden: int = Field(default=64, ge=1)
    d_q: int = Field(default=32, ge=1)
    d_b: int = Field(default=32, ge=1)
    trunk_hidden: List[int] = Field(default_factory=lambda: [128, 128])
    chunk_dec: int = Field(default=512, ge=1)
    chunk_flow: int = Field(default=256, ge=1)
    flow_layers: int = Field(default=8, ge=2)
    flow_hidden: int = Field(default=64, ge=1)

    @field_validator("d_h")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError(f"d_h must be even, got {v}")
        return v


class LossConfig(_Section):
    reg_lambda: float = Field(default=1000.0, ge=0, description="出力正則化の係数 λ（二乗和に掛ける）")
    beta_domain: float = Field(default=1.0, ge=0, description="ドメイン損失（フロー NLL）の重み")
    e0: float = Field(default=10.0, gt=0, description="汎用モデルの事前エビデンス")
    evidence_lo: float = -10.0
    evidence_hi: float = 10.0
    evidence_mode: Literal["per-dim", "raw"] = "per-dim"
    nms_radius: float = Field(default=2.0, gt=0, description="NMS の終点距離しきい値 [m]")
    scale_clamp: float = Field(default=5.0, gt=0, description="カップリング層の s_raw クランプ幅")


class OptimConfig(_Section):
    lr: float = Field(default=1e-4, gt=0, description="拡張フェーズの初期学習率")
    pretrain_lr: float = Field(default=1e-3, gt=0, description="事前学習の初期学習率")
    weight_decay: float = Field(default=1e-2, ge=0)
    warm_epochs: int = Field(default=10, ge=0)
    halve_every: int = Field(default=2, ge=1)
    batch_size: int = Field(default=128, ge=1)
    pretrain_epochs: int = Field(default=30, ge=1)
    expand_epochs: int = Field(default=15, ge=1)


class BaselineConfig(_Section):
    buffer_size: int = Field(default=1000, gt=0)
    replay_ratio: float = Field(default=0.5, gt=0, lt=1)


class PlanConfig(_Section):
    phases: List[str] = Field(default_factory=lambda: ["arc", "straight", "turn"])
    holdout: Optional[str] = "aggressive-arc"
    e0_grid: List[float] = Field(default_factory=lambda: [0.1, 1.0, 10.0, 100.0])
    eval_scenes: int = Field(default=500, ge=1, description="評価に使う検証シーン数（ドメインごと）")
    advisory_margin: float = Field(default=0.0, ge=0, description="拡張推奨の判定マージン [m]")


class Config(_Section):
    """実験全体の設定（JSON）"""
    seed: int = 7
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    plan: PlanConfig = Field(default_factory=PlanConfig)

    @model_validator(mode="after")
    def _plan_domains(self):
        names = {d.name for d in self.data.domains}
        for name in self.plan.phases + ([self.plan.holdout] if self.plan.holdout else []):
            if name not in names:
                raise ValueError(f"plan: unknown domain '{name}'")
        return self

    def echo(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        text = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(path: Optional[Union[str, Path]] = None) -> Config:
    """
    JSON 設定ファイルを読み込んで検証する

    Args:
        path: 設定ファイル（None または空文字なら既定値）

    Raises:
        FileNotFoundError: ファイルが存在しない場合
        pydantic.ValidationError: 未知のキーや不正な値を含む場合
    """
    if path is None or str(path) == "":
        return Config()
    return Config.model_validate(load_json(Path(path)))


# =========================
# 共有データ型
# =========================
@dataclass(eq=False)
class Scene:
    """
    ターゲット中心座標系のシーン

    past: (T_P, 2)、future: (T_F, 2)、neighbors: (N_nb, T_P, 2)、mask: (N_nb,)
    domain_tag は評価専用で、推論では参照しない
    """
    past: np.ndarray
    future: np.ndarray
    neighbors: np.ndarray
    mask: np.ndarray
    domain_tag: int
    scene_id: str

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.domain_tag == other.domain_tag
                and np.array_equal(self.past, other.past) and np.array_equal(self.future, other.future)
                and np.array_equal(self.neighbors, other.neighbors)
                and np.array_equal(self.mask, other.mask))

    __hash__ = None


Manifest = Tuple[Tuple[str, Tuple[int, ...]], ...]


def manifest_size(manifest: Manifest) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in manifest))


@dataclass(eq=False)
class ParamBundle:
    """
    平坦化パラメータとその形状マニフェスト

    target: "encoder" / "decoder-head" / "flow"
    """
    flat: Tensor
    manifest: Manifest
    target: str

    def __post_init__(self):
        self.flat = as_tensor(self.flat)
        if self.flat.ndim != 1 or self.flat.size != manifest_size(self.manifest):
            raise ManifestMismatchError(
                f"{self.target}: flat length {self.flat.size} != manifest total {manifest_size(self.manifest)}")

    @property
    def total(self) -> int:
        return manifest_size(self.manifest)

    def views(self) -> Dict[str, Tensor]:
        """マニフェスト順に切り出した各テンソル（微分可能）"""
        out, start = {}, 0
        for name, shape in self.manifest:
            n = int(np.prod(shape))
            out[name] = reshape(slice_(self.flat, start, start + n), shape)
            start += n
        return out

    def check(self, expected: Manifest) -> None:
        """
        マニフェストが期待する構造と一致するか検証

        Raises:
            ManifestMismatchError: 層名または形状が異なる場合
        """
        if tuple(self.manifest) == tuple(expected):
            return
        for i, (exp, act) in enumerate(zip(expected, self.manifest)):
            if tuple(exp) != tuple(act):
                raise ManifestMismatchError(
                    f"{self.target}: layer {i} expected {exp[0]}{tuple(exp[1])}, got {act[0]}{tuple(act[1])}")
        raise ManifestMismatchError(
            f"{self.target}: expected {len(expected)} layers, got {len(self.manifest)}")

    def detach(self) -> "ParamBundle":
        return ParamBundle(self.flat.detach(), self.manifest, self.target)

    def numpy(self) -> np.ndarray:
        return self.flat.values

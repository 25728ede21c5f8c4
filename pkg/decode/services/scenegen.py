"""
合成シーン生成モジュール
運動学モデルで複数ドメインの軌跡データセットを生成し、バイナリ形式で保存・読み込みする
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from decode.errors import DatasetFormatError
from decode.models import DomainSpec, Scene
from decode.utils.storage import canonical_json, pack_floats, sha256_hex, unpack_floats

logger = logging.getLogger(__name__)

DATASET_MAGIC = "DECODE-DS"
DATASET_VERSION = 1

# 乱数ストリームの識別子（ドメイン単体とプリトレーニング混合で別系列にする）
_MIX_STREAM_OFFSET = 1000
_MIN_SPEED = 0.5
_DRIFT_OFFSET_M = 3.5
_DRIFT_HALF_S = 1.5


@dataclass
class SceneBatch:
    """シーンを積み重ねた配列表現"""
    past: np.ndarray       # (B, T_P, 2)
    future: np.ndarray     # (B, T_F, 2)
    neighbors: np.ndarray  # (B, N_nb, T_P, 2)
    mask: np.ndarray       # (B, N_nb)
    tags: np.ndarray       # (B,)

    def __len__(self) -> int:
        return self.past.shape[0]


def stack_scenes(scenes: Sequence[Scene]) -> SceneBatch:
    return SceneBatch(
        past=np.stack([s.past for s in scenes]),
        future=np.stack([s.future for s in scenes]),
        neighbors=np.stack([s.neighbors for s in scenes]),
        mask=np.stack([s.mask.astype(np.float64) for s in scenes]),
        tags=np.array([s.domain_tag for s in scenes], dtype=np.int64),
    )


# =========================
# 運動学シミュレーション
# =========================
def _scene_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _curvature_profile(spec: DomainSpec, rng: np.random.Generator, kappa: float, speed: np.ndarray,
                       mode: int, t_p: int, t_f: int, dt: float) -> np.ndarray:
    """ステップごとの曲率（長さ T_P + T_F - 1、未来区間は index T_P - 1 から）"""
    n_steps = t_p + t_f - 1
    first = t_p - 1
    curv = np.full(n_steps, kappa)
    if spec.family in ("arc", "aggressive-arc"):
        if mode == 1:
            # 出口: 接線方向へ直進
            exit_step = first + int(rng.integers(0, max(1, t_f // 2)))
            curv[exit_step:] = 0.0
    elif spec.family == "straight":
        if mode == 1:
            side = 1.0 if rng.random() < 0.5 else -1.0
            start = first + int(rng.integers(0, max(1, t_f // 3)))
            half = max(1, int(round(_DRIFT_HALF_S / dt)))
            v = float(np.mean(speed[start:start + 2 * half])) if start < n_steps else float(speed[-1])
            k_d = side * _DRIFT_OFFSET_M / (v * v * _DRIFT_HALF_S * _DRIFT_HALF_S)
            curv[start:start + half] += k_d
            curv[start + half:start + 2 * half] -= k_d
    elif spec.family == "turn":
        curv[:] = 0.0
        lo = max(1, int(round(0.5 / dt)))
        hi = max(lo + 1, min(int(round(2.0 / dt)), t_f))
        start = first + int(rng.integers(lo - 1, hi))
        if mode in (1, 2):
            sign = 1.0 if mode == 1 else -1.0
            # 90 度旋回に必要な弧長を満たすまで曲率を与える
            heading = 0.0
            k = start
            while k < n_steps and heading < math.pi / 2:
                curv[k] = sign * kappa
                heading += kappa * speed[k] * dt
                k += 1
    return curv


def _integrate(theta0: float, speed: np.ndarray, curv: np.ndarray, noise: np.ndarray, dt: float):
    """一定曲率の弧でステップごとに厳密積分する"""
    n = curv.size + 1
    pts = np.zeros((n, 2))
    headings = np.zeros(n)
    x = y = 0.0
    th = theta0
    headings[0] = th
    for k in range(curv.size):
        ds = speed[k] * dt
        kap = curv[k]
        if abs(kap) < 1e-12:
            x += ds * math.cos(th)
            y += ds * math.sin(th)
            th_next = th
        else:
            th_next = th + kap * ds
            x += (math.sin(th_next) - math.sin(th)) / kap
            y += (math.cos(th) - math.cos(th_next)) / kap
        th = th_next + noise[k]
        pts[k + 1] = (x, y)
        headings[k + 1] = th
    return pts, headings


def _normalize(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    """ターゲット中心座標系（原点 = 最終観測点、+x = 進行方向）へ変換"""
    c, s = math.cos(heading), math.sin(heading)
    shifted = points - origin
    out = np.empty_like(shifted)
    out[..., 0] = c * shifted[..., 0] + s * shifted[..., 1]
    out[..., 1] = -s * shifted[..., 0] + c * shifted[..., 1]
    return out


def _neighbors(rng: np.random.Generator, v0: float, n_nb: int, t_p: int, dt: float):
    """ターゲット近傍の等速直線トラック（正規化座標で直接生成）"""
    tracks = np.zeros((n_nb, t_p, 2))
    mask = np.zeros(n_nb, dtype=bool)
    n_valid = int(rng.integers(0, n_nb + 1)) if n_nb else 0
    times = (np.arange(t_p) - (t_p - 1)) * dt
    for j in range(n_valid):
        p0 = np.array([rng.uniform(-30.0, 30.0), rng.uniform(-8.0, 8.0)])
        speed = v0 * rng.uniform(0.8, 1.2)
        heading = rng.normal(0.0, 0.1)
        vel = speed * np.array([math.cos(heading), math.sin(heading)])
        tracks[j] = p0 + times[:, None] * vel
        mask[j] = True
    return tracks, mask


def _make_scene(spec: DomainSpec, rng: np.random.Generator, scene_id: str,
                t_p: int, t_f: int, dt: float, n_nb: int) -> Scene:
    n_steps = t_p + t_f - 1
    v0 = rng.uniform(*spec.speed_range)
    accel = rng.uniform(*spec.accel_range)
    kappa = rng.uniform(*spec.curvature_range)
    mode = int(rng.choice(len(spec.mode_weights), p=np.asarray(spec.mode_weights)))
    theta0 = rng.uniform(-math.pi, math.pi)
    t_mid = (np.arange(n_steps) + 0.5 - (t_p - 1)) * dt
    speed = np.maximum(v0 + accel * t_mid, _MIN_SPEED)
    curv = _curvature_profile(spec, rng, kappa, speed, mode, t_p, t_f, dt)
    noise = rng.normal(0.0, spec.heading_noise_std, size=n_steps) if spec.heading_noise_std > 0 else np.zeros(n_steps)
    pts, headings = _integrate(theta0, speed, curv, noise, dt)
    local = _normalize(pts, pts[t_p - 1].copy(), headings[t_p - 1])
    neighbors, mask = _neighbors(rng, v0, n_nb, t_p, dt)
    return Scene(past=local[:t_p].copy(), future=local[t_p:].copy(), neighbors=neighbors,
                 mask=mask, domain_tag=spec.tag, scene_id=scene_id)


def _as_spec(spec: Union[DomainSpec, dict]) -> DomainSpec:
    return spec if isinstance(spec, DomainSpec) else DomainSpec.model_validate(spec)


def generate_domain(spec: Union[DomainSpec, dict], n: int, seed: int, t_p: int = 10, t_f: int = 60,
                    dt: float = 0.1, n_nb: int = 4) -> List[Scene]:
    """
    1 ドメイン分のシーンを生成する

    Args:
        spec: ドメイン仕様（dict の場合は検証してから使用）
        n: シーン数
        seed: 乱数シード（シーンごとに seed・タグ・番号から派生）

    Returns:
        Scene のリスト

    Raises:
        ValueError: n <= 0 または仕様が不正な場合
    """
    spec = _as_spec(spec)
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    scenes = [
        _make_scene(spec, _scene_rng(seed, spec.tag, i), f"{spec.name}-{seed}-{i:06d}", t_p, t_f, dt, n_nb)
        for i in range(n)
    ]
    logger.debug("[Data] generated %d scenes for %s", n, spec.name)
    return scenes


def _allocate(weights: Sequence[float], n: int) -> List[int]:
    """最大剰余法で n を重みに比例配分"""
    raw = np.asarray(weights, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for k in order[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def generate_pretrain_mix(specs: Sequence[Union[DomainSpec, dict]], weights: Sequence[float], n: int, seed: int,
                          t_p: int = 10, t_f: int = 60, dt: float = 0.1, n_nb: int = 4) -> List[Scene]:
    """
    事前学習用の混合コーパスを生成する（ドメイン比率は配分で厳密に守る）

    Raises:
        ValueError: specs が空、重みの合計が 1 でない、n <= 0 の場合
    """
    if not specs:
        raise ValueError("specs must not be empty")
    if len(weights) != len(specs) or abs(sum(weights) - 1.0) > 1e-9 or min(weights) < 0:
        raise ValueError(f"weights must match specs and sum to 1, got {list(weights)}")
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    specs = [_as_spec(s) for s in specs]
    slots = np.concatenate([np.full(c, k, dtype=int) for k, c in enumerate(_allocate(weights, n))])
    order = np.random.default_rng([seed, _MIX_STREAM_OFFSET]).permutation(slots)
    scenes = []
    for i, k in enumerate(order):
        spec = specs[int(k)]
        rng = _scene_rng(seed, _MIX_STREAM_OFFSET + spec.tag, i)
        scenes.append(_make_scene(spec, rng, f"mix-{seed}-{i:06d}", t_p, t_f, dt, n_nb))
    logger.info("[Data] pretrain mix: %d scenes over %d domains", n, len(specs))
    return scenes


# =========================
# データセットファイル
# ヘッダ JSON 行 + (レコード JSON 行 + float64 ブロック) の繰り返し
# =========================
def _scene_floats(scene: Scene) -> np.ndarray:
    return np.concatenate([scene.past.ravel(), scene.future.ravel(), scene.neighbors.ravel(),
                           scene.mask.astype(np.float64).ravel()])


def encode_dataset(scenes: Sequence[Scene], splits: Optional[Dict[str, int]] = None) -> bytes:
    """データセットのバイト表現（ファイル内容そのもの）"""
    if scenes:
        t_p, t_f = scenes[0].past.shape[0], scenes[0].future.shape[0]
        n_nb = scenes[0].neighbors.shape[0]
    else:
        t_p = t_f = n_nb = 0
    header = {"magic": DATASET_MAGIC, "version": DATASET_VERSION, "t_p": t_p, "t_f": t_f,
              "n_nb": n_nb, "count": len(scenes)}
    if splits:
        if sum(splits.values()) != len(scenes):
            raise ValueError(f"splits {splits} do not cover {len(scenes)} scenes")
        header["splits"] = [[name, int(count)] for name, count in splits.items()]
    parts = [canonical_json(header), b"\n"]
    for scene in scenes:
        floats = _scene_floats(scene)
        meta = {"scene_id": scene.scene_id, "domain_tag": int(scene.domain_tag), "n_floats": int(floats.size)}
        parts += [canonical_json(meta), b"\n", pack_floats(floats)]
    return b"".join(parts)


def dataset_digest(scenes: Sequence[Scene]) -> str:
    return sha256_hex(encode_dataset(scenes))


def write_dataset(scenes: Sequence[Scene], path: Path, splits: Optional[Dict[str, int]] = None) -> str:
    """
    データセットを書き出す

    Args:
        scenes: シーン列
        path: 出力先
        splits: {"train": n, "val": m} のような先頭からの分割（任意）

    Returns:
        ファイル内容の SHA-256
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_dataset(scenes, splits)
    path.write_bytes(data)
    logger.info("[Data] wrote %d scenes to %s", len(scenes), path)
    return sha256_hex(data)


def _parse_line(data: bytes, pos: int, record: int, what: str):
    nl = data.find(b"\n", pos)
    if nl < 0:
        raise DatasetFormatError(f"truncated {what}", record, pos)
    try:
        return json.loads(data[pos:nl].decode("utf-8")), nl + 1
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DatasetFormatError(f"malformed {what}", record, pos) from None


def _decode(data: bytes):
    if not data:
        return {"count": 0}, []
    header, pos = _parse_line(data, 0, -1, "header")
    if header.get("magic") != DATASET_MAGIC:
        raise DatasetFormatError("bad magic", -1, 0)
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')}", -1, 0)
    t_p, t_f, n_nb = header["t_p"], header["t_f"], header["n_nb"]
    expected = 2 * t_p + 2 * t_f + 2 * n_nb * t_p + n_nb
    scenes = []
    for i in range(int(header["count"])):
        meta, start = _parse_line(data, pos, i, "record header")
        n_floats = meta.get("n_floats")
        if n_floats != expected:
            raise DatasetFormatError(f"record holds {n_floats} floats, expected {expected}", i, pos)
        end = start + 8 * n_floats
        if end > len(data):
            raise DatasetFormatError("truncated record payload", i, start)
        floats = unpack_floats(data[start:end], (n_floats,))
        a = 2 * t_p
        b = a + 2 * t_f
        c = b + 2 * n_nb * t_p
        scenes.append(Scene(
            past=floats[:a].reshape(t_p, 2),
            future=floats[a:b].reshape(t_f, 2),
            neighbors=floats[b:c].reshape(n_nb, t_p, 2),
            mask=floats[c:] > 0.5,
            domain_tag=int(meta["domain_tag"]),
            scene_id=str(meta["scene_id"]),
        ))
        pos = end
    if pos != len(data):
        raise DatasetFormatError("trailing bytes after last record", int(header["count"]), pos)
    return header, scenes


def read_dataset(path: Path) -> List[Scene]:
    """
    データセットを読み込む

    Raises:
        FileNotFoundError: ファイルが存在しない場合
        DatasetFormatError: 形式不正（失敗したレコード番号とバイト位置を含む）
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return _decode(path.read_bytes())[1]


def read_splits(path: Path) -> Dict[str, List[Scene]]:
    """ヘッダの splits に従って分割したシーンを返す（未指定なら {"all": ...}）"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    header, scenes = _decode(path.read_bytes())
    if "splits" not in header:
        return {"all": scenes}
    out, start = {}, 0
    for name, count in header["splits"]:
        out[name] = scenes[start:start + count]
        start += count
    return out

"""
コマンドラインエントリポイント
データ生成・事前学習・拡張・評価・推論・感度分析・レポートのサブコマンド
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from decode.config import DECODE_CONFIG, DEFAULT_OUT_DIR, ensure_run_dirs, setup_logging
from decode.errors import DecodeError
from decode.models import Config, Scene, load_config
from decode.services.contlearn import (
    BASELINE_KINDS, Framework, ablate_e0, build_plan, dataset_path, domain_awareness, evaluate_staircase,
    expansion_advisory, load_checkpoint, load_domain_split, load_mix, run_baseline, run_expansion,
    run_pretrain, save_checkpoint,
)
from decode.services.fuse import predict
from decode.services.report_service import write_ablation, write_eval_report, write_prediction, write_summary
from decode.services.scenegen import generate_domain, generate_pretrain_mix, read_dataset, write_dataset
from decode.utils.storage import save_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


# =========================
# 内部ヘルパ
# =========================
def checkpoint_path(dirs: Dict[str, Path], phase: int) -> Path:
    return dirs["checkpoints"] / f"phase{phase}.ckpt"


def latest_phase(dirs: Dict[str, Path]) -> int:
    """保存済みチェックポイントの最大フェーズ番号"""
    phases = [int(p.stem.replace("phase", "")) for p in dirs["checkpoints"].glob("phase*.ckpt")
              if p.stem.replace("phase", "").isdigit()]
    if not phases:
        raise FileNotFoundError(f"no checkpoint in {dirs['checkpoints']} (run `pretrain` first)")
    return max(phases)


def _load(args, dirs: Dict[str, Path], phase: Optional[int] = None) -> Framework:
    if args.checkpoint:
        return load_checkpoint(Path(args.checkpoint))
    m = latest_phase(dirs) if phase is None else phase
    path = checkpoint_path(dirs, m)
    if not path.exists():
        step = "pretrain" if m == 0 else f"expand --phase {m}"
        raise FileNotFoundError(f"checkpoint not found: {path} (run `{step}` first)")
    return load_checkpoint(path)


def _val_sets(config: Config, data_dir: Path, names: Sequence[str]) -> List[List[Scene]]:
    return [load_domain_split(data_dir, name, "val", config.plan.eval_scenes) for name in names]


# =========================
# サブコマンド
# =========================
def cmd_gen_data(args, config: Config, dirs: Dict[str, Path]) -> int:
    dc = config.data
    digests = {}
    for spec in dc.domains:
        kw = dict(t_p=dc.t_p, t_f=dc.t_f, dt=dc.dt, n_nb=dc.n_neighbors)
        train = generate_domain(spec, dc.n_train, config.seed, **kw)
        val = generate_domain(spec, dc.n_val, config.seed + 1, **kw)
        digests[spec.name] = write_dataset(train + val, dataset_path(dirs["data"], spec.name),
                                           splits={"train": len(train), "val": len(val)})
        print(f"[Data] {spec.name}: train={len(train)} val={len(val)}")
    mix = generate_pretrain_mix(dc.domains, dc.pretrain_weights, dc.n_pretrain, config.seed,
                                t_p=dc.t_p, t_f=dc.t_f, dt=dc.dt, n_nb=dc.n_neighbors)
    digests["mix"] = write_dataset(mix, dirs["data"] / "mix.ds")
    counts = {spec.name: sum(1 for s in mix if s.domain_tag == spec.tag) for spec in dc.domains}
    print(f"[Data] mix: {len(mix)} scenes {counts}")
    save_json(dirs["data"] / "manifest.json", {"digests": digests, "mix_counts": counts, "config": config.echo()})
    return EXIT_OK


def cmd_pretrain(args, config: Config, dirs: Dict[str, Path]) -> int:
    mix = load_mix(dirs["data"])
    fw = run_pretrain(config, mix, checkpoint_path(dirs, 0), dirs["logs"] / "train_phase0.csv")
    print(f"[Pretrain] done: {checkpoint_path(dirs, 0)} (anchors={fw.anchors.count})")
    return EXIT_OK


def cmd_expand(args, config: Config, dirs: Dict[str, Path]) -> int:
    m = args.phase
    fw = _load(args, dirs, m - 1)
    cfg = config if args.config else fw.config
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    entry = build_plan(cfg, dirs["data"]).entry(m)
    scenes = load_domain_split(dirs["data"], entry.domain, "train")
    fw = run_expansion(fw, scenes, m, cfg, log_path=dirs["logs"] / f"train_phase{m}.csv")
    digest = save_checkpoint(fw, checkpoint_path(dirs, m))
    print(f"[Expand] phase {m} ({entry.domain}) done: sha256={digest}")
    return EXIT_OK


def cmd_eval(args, config: Config, dirs: Dict[str, Path]) -> int:
    m = args.phase
    frameworks = [_load(args, dirs, j) if j == m else load_checkpoint(checkpoint_path(dirs, j))
                  for j in range(1, m + 1)]
    current = frameworks[-1]
    cfg = current.config
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    names = cfg.plan.phases[:m]
    val_sets = _val_sets(cfg, dirs["data"], names)
    ade, fde = evaluate_staircase(frameworks, val_sets)
    awareness = domain_awareness(current, val_sets) if m >= 2 else None

    baselines = []
    if not args.no_baselines:
        base = load_checkpoint(checkpoint_path(dirs, 0))
        train_sets = [load_domain_split(dirs["data"], name, "train") for name in names]
        for kind in BASELINE_KINDS:
            baselines.append(run_baseline(kind, base, train_sets, val_sets, cfg).summary())

    advisory_names = list(names) + ([cfg.plan.holdout] if cfg.plan.holdout else [])
    advisory = expansion_advisory(current, dict(zip(advisory_names, _val_sets(cfg, dirs["data"], advisory_names))),
                                  cfg.plan.advisory_margin)
    path = write_eval_report(dirs["reports"], m, names, ade, fde, awareness, baselines, advisory, cfg.echo())
    print(f"[Eval] phase {m}: {path}")
    return EXIT_OK


def _find_scene(data_dir: Path, scene_id: str) -> Scene:
    for path in sorted(data_dir.glob("*.ds")):
        for scene in read_dataset(path):
            if scene.scene_id == scene_id:
                return scene
    raise KeyError(f"scene '{scene_id}' not found under {data_dir}")


def cmd_predict(args, config: Config, dirs: Dict[str, Path]) -> int:
    fw = _load(args, dirs, args.phase)
    scene = _find_scene(dirs["data"], args.scene)
    if args.samples:
        seed = fw.config.seed if args.seed is None else args.seed
        rng = np.random.default_rng([seed, 300])
        result = predict(scene, fw, k=args.samples, deterministic=False, rng=rng)
    else:
        result = predict(scene, fw)
    path = write_prediction(dirs["reports"], args.scene, result)
    split = result.fused.weight_split()
    print(f"[Predict] {args.scene}: generalized={split['generalized']:.3f} "
          f"specialized={split['specialized']:.3f} -> {path}")
    return EXIT_OK


def cmd_ablate(args, config: Config, dirs: Dict[str, Path]) -> int:
    fw = _load(args, dirs, args.phase)
    cfg = fw.config
    names = list(cfg.plan.phases[:fw.phase]) + ([cfg.plan.holdout] if cfg.plan.holdout else [])
    domains = dict(zip(names, _val_sets(cfg, dirs["data"], names)))
    path = write_ablation(dirs["reports"], ablate_e0(fw, domains, cfg.plan.e0_grid))
    print(f"[Ablate] {path}")
    return EXIT_OK


def cmd_report(args, config: Config, dirs: Dict[str, Path]) -> int:
    paths = write_summary(dirs["reports"])
    print(f"[Report] {paths['json']} {paths['pdf']}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "expand": cmd_expand,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate-e0": cmd_ablate,
    "report": cmd_report,
}


# =========================
# 引数解析
# =========================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decode", description="continual domain expansion for trajectory prediction")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DECODE_CONFIG or None, help="JSON config (default: DECODE_CONFIG)")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", default=str(DEFAULT_OUT_DIR), help="output root (default: DECODE_HOME)")
    common.add_argument("--checkpoint", default=None, help="explicit checkpoint path")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the pretraining mix and per-domain datasets")
    sub.add_parser("pretrain", parents=[common], help="train the generalized encoder and decoder")
    p = sub.add_parser("expand", parents=[common], help="train and finalize one expansion phase")
    p.add_argument("--phase", type=int, required=True)
    p = sub.add_parser("eval", parents=[common], help="staircase, forgetting, domain awareness, baselines")
    p.add_argument("--phase", type=int, required=True)
    p.add_argument("--no-baselines", action="store_true", help="skip the baseline runs")
    p = sub.add_parser("predict", parents=[common], help="fused prediction for one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--phase", type=int, default=None)
    p.add_argument("--samples", type=int, default=0, help="draw K stochastic samples instead of ranking")
    p = sub.add_parser("ablate-e0", parents=[common], help="sweep the prior evidence e0")
    p.add_argument("--phase", type=int, default=None)
    sub.add_parser("report", parents=[common], help="summary JSON and PDF from eval reports")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    if getattr(args, "phase", None) is not None and args.phase < 1 and args.command in ("expand", "eval"):
        print(f"error: --phase must be >= 1, got {args.phase}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.model_copy(update={"seed": args.seed})
        dirs = ensure_run_dirs(Path(args.out))
        return COMMANDS[args.command](args, config, dirs)
    except ValidationError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DecodeError, OSError, KeyError) as e:
        logger.error("[%s] %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())

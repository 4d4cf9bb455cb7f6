"""Batch experiment driver: dataset generation, training, evaluation,
and the modality/flag ablation matrix.

Every command reads one experiment file (see `config`) and works inside
an output directory with a fixed layout:

    OUT/dataset/scene_0000.json ...   generated scene+frame records
    OUT/dataset/manifest.json         seeds, conditions, content hash
    OUT/checkpoint.bin / .json        trained weights and their pedigree
    OUT/loss.csv                      per-step loss curve
    OUT/report.csv / .json            AP per condition x class x bin
    OUT/curves.csv                    AP against fog density, plot-ready
    OUT/detections/scene_0000.json    per-scene dumps for debugging
    OUT/rows/<axis>/...               one sub-run per ablation axis
    OUT/ablation.csv                  combined ablation table

All outputs are byte-identical across reruns with the same inputs and
any --jobs value: scene generation and per-scene inference are pure
functions of (config, seed), so parallel workers only change wall time.
Exit codes: 0 success, 2 config/compatibility violations, 1 anything
else.
"""

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import evalkit, model, simkit
from .config import (ConfigError, ExperimentConfig, _bool, _modalities,
                     load_experiment)
from .detector import loss_log_csv
from .evalkit import CLASS_NAMES, EvalConfig
from .geometry import Box3D

AXIS_FLAGS = ("inputs", "proposals", "depth_transform", "gamma_weighting")


def _pmap(fn, tasks, jobs: int):
    """Order-preserving map, forked across workers when jobs > 1."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _dump_json(payload, path: Path) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _gen_scene(task) -> str:
    index, seed, cond_text, cfg = task
    scene = simkit.generate_scene(cfg.sim_config(), seed,
                                  simkit.Condition.parse(cond_text))
    frame = simkit.make_frame(scene, cfg.rig())
    return simkit.record_to_json(scene, frame)


def cmd_generate(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    dataset = out / "dataset"
    dataset.mkdir(parents=True, exist_ok=True)
    tasks = []
    for condition, count in cfg.conditions:
        for _ in range(count):
            index = len(tasks)
            tasks.append((index, (cfg.seed + index) % 2 ** 64,
                          str(condition), cfg))
    texts = _pmap(_gen_scene, tasks, jobs)

    digest = hashlib.sha256()
    entries = []
    for (index, seed, cond_text, _), text in zip(tasks, texts):
        name = f"scene_{index:04d}.json"
        (dataset / name).write_text(text, encoding="utf-8")
        digest.update(text.encode("utf-8"))
        entries.append({"file": name, "seed": seed, "condition": cond_text})
    manifest = {"config": cfg.data_fingerprint(),
                "content_hash": digest.hexdigest(),
                "scenes": entries}
    _dump_json(manifest, dataset / "manifest.json")
    print(f"generated {len(entries)} scenes -> {dataset}")
    print(f"content_hash {manifest['content_hash']}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_manifest(data_dir: Path, cfg: ExperimentConfig) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    want = cfg.data_fingerprint()
    have = manifest.get("config")
    if have != want:
        differ = sorted(s for s in want if have is None or have.get(s) != want[s])
        raise ConfigError([(s, "dataset was generated under a different "
                               "config") for s in differ])
    return manifest


def _load_records(data_dir: Path, manifest: dict):
    out = []
    for entry in manifest["scenes"]:
        text = (data_dir / entry["file"]).read_text(encoding="utf-8")
        out.append(simkit.record_from_json(text))
    return out


def cmd_train(cfg: ExperimentConfig, data_dir: Path, out: Path) -> int:
    manifest = _load_manifest(data_dir, cfg)
    records = _load_records(data_dir, manifest)
    frames = [frame for _, frame in records]
    labels = [scene.objects for scene, _ in records]
    rig = cfg.rig()
    pipe_cfg = cfg.pipeline_config()
    params = model.PipelineParams.init(pipe_cfg, seed=cfg.seed)
    curve = model.train_pipeline(frames, labels, rig.rgb_cam, rig.gated_cam,
                                 pipe_cfg, params, cfg.train_config())
    out.mkdir(parents=True, exist_ok=True)
    model.save_pipeline(params, out / "checkpoint.bin")
    _dump_json({"model": cfg.model_fingerprint(),
                "dataset_hash": manifest["content_hash"],
                "seed": cfg.seed}, out / "checkpoint.json")
    (out / "loss.csv").write_text(loss_log_csv(curve), encoding="utf-8")
    print(f"trained {len(curve)} steps on {len(frames)} frames -> "
          f"{out / 'checkpoint.bin'}")
    print(f"final_loss {curve[-1]['total']!r}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_EVAL_CACHE: dict = {}


def _eval_scene(task):
    """Detections and labels for one scene file, as plain lists."""
    index, path, cfg, ckpt = task
    key = str(ckpt)
    if key not in _EVAL_CACHE:
        pipe_cfg = cfg.pipeline_config()
        params = model.PipelineParams.init(pipe_cfg, seed=cfg.seed)
        model.load_pipeline(params, ckpt)
        _EVAL_CACHE[key] = (cfg.rig(), pipe_cfg, params)
    rig, pipe_cfg, params = _EVAL_CACHE[key]
    scene, frame = simkit.record_from_json(
        Path(path).read_text(encoding="utf-8"))
    dets = model.infer(frame, rig.rgb_cam, rig.gated_cam, pipe_cfg, params)
    return ([[list(map(float, box.as_array())), float(score)]
             for box, score in dets],
            [list(map(float, box.as_array())) for box in scene.objects])


def _check_checkpoint(cfg: ExperimentConfig, ckpt: Path) -> None:
    sidecar = ckpt.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"no checkpoint pedigree at {sidecar}")
    trained = json.loads(sidecar.read_text(encoding="utf-8"))["model"]
    want = cfg.model_fingerprint()
    if trained != want:
        differ = sorted(s for s in want if trained.get(s) != want[s])
        raise ConfigError([(s, "checkpoint was trained under a different "
                               "config") for s in differ])


def _eval_dataset(cfg: ExperimentConfig, data_dir: Path, ckpt: Path,
                  out: Path, jobs: int):
    """Run inference over a dataset; returns evaluation records."""
    _check_checkpoint(cfg, ckpt)
    manifest = _load_manifest(data_dir, cfg)
    tasks = [(i, str(data_dir / e["file"]), cfg, str(ckpt))
             for i, e in enumerate(manifest["scenes"])]
    results = _pmap(_eval_scene, tasks, jobs)

    dump_dir = out / "detections"
    dump_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for entry, (dets, labels) in zip(manifest["scenes"], results):
        _dump_json({"file": entry["file"], "condition": entry["condition"],
                    "detections": dets},
                   dump_dir / entry["file"])
        records.append({
            "condition": entry["condition"],
            "detections": [(Box3D.from_array(arr), score)
                           for arr, score in dets],
            "labels": [Box3D.from_array(arr) for arr in labels]})
    return records, manifest


def _curves_csv(rows) -> str:
    """Fog-density AP curves from report rows; clear_day counts as 0."""
    lines = ["beta,class,bin,mode,ap"]
    keyed = []
    for row in rows:
        cond = simkit.Condition.parse(row["condition"])
        if cond.kind not in ("clear_day", "fog"):
            continue
        keyed.append((cond.beta, row))
    keyed.sort(key=lambda pair: (pair[0], pair[1]["class"], pair[1]["bin"],
                                 pair[1]["mode"]))
    for beta, row in keyed:
        lines.append(f"{beta:g},{row['class']},{row['bin']},{row['mode']},"
                     f"{row['ap']:.6f}")
    return "\n".join(lines) + "\n"


def _write_reports(records, cfg: ExperimentConfig, out: Path):
    rows = evalkit.report(records, cfg.eval_config())
    (out / "report.csv").write_text(evalkit.rows_to_csv(rows),
                                    encoding="utf-8")
    (out / "report.json").write_text(evalkit.rows_to_json(rows),
                                     encoding="utf-8")
    (out / "curves.csv").write_text(_curves_csv(rows), encoding="utf-8")
    return rows


def cmd_eval(cfg: ExperimentConfig, data_dir: Path, ckpt: Path, out: Path,
             jobs: int) -> int:
    out.mkdir(parents=True, exist_ok=True)
    records, _ = _eval_dataset(cfg, data_dir, ckpt, out, jobs)
    rows = _write_reports(records, cfg, out)
    print(f"evaluated {len(records)} scenes -> {out / 'report.csv'} "
          f"({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def apply_axis(base: ExperimentConfig, spec: str) -> ExperimentConfig:
    """One ablation row: comma-joined overrides of the Table-2 axes.

    A bare modality string like `CL` abbreviates `inputs=CL,proposals=CL`.
    """
    fields: dict = {}
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        key, sep, value = token.partition("=")
        if not sep:
            fields["inputs"] = _modalities(token)
            fields.setdefault("proposals", _modalities(token))
            continue
        key, value = key.strip(), value.strip()
        if key not in AXIS_FLAGS:
            raise ConfigError([(f"axis {spec!r}",
                                f"unknown flag {key!r}; valid flags: "
                                f"{', '.join(AXIS_FLAGS)}")])
        if key in ("inputs", "proposals"):
            fields[key] = _modalities(value)
        else:
            fields[key] = _bool(value)
    if not fields:
        raise ConfigError([(f"axis {spec!r}", "no overrides given")])
    return dataclasses.replace(base, **fields)


def _axis_dirname(spec: str) -> str:
    safe = {"=": "-", ",": "+"}
    return "".join(c if c.isalnum() or c == "_" else safe.get(c, "_")
                   for c in spec.strip())


def _onoff(value: bool) -> str:
    return "on" if value else "off"


def cmd_ablate(base: ExperimentConfig, axes, out: Path, jobs: int) -> int:
    variants = [(spec, apply_axis(base, spec)) for spec in axes]
    cmd_generate(base, out, jobs)
    data_dir = out / "dataset"
    dataset_hash = json.loads(
        (data_dir / "manifest.json").read_text(encoding="utf-8"))
    dataset_hash = dataset_hash["content_hash"]

    lines = ["inputs,proposals,depth_transform,gamma_weighting,"
             "class,bin,mode,ap,dataset_hash"]
    for spec, cfg in variants:
        row_dir = out / "rows" / _axis_dirname(spec)
        cmd_train(cfg, data_dir, row_dir)
        records, _ = _eval_dataset(cfg, data_dir, row_dir / "checkpoint.bin",
                                   row_dir, jobs)
        _write_reports(records, cfg, row_dir)
        preds = [r["detections"] for r in records]
        labels = [r["labels"] for r in records]
        base_eval = cfg.eval_config()
        for mode in ("3d", "bev"):
            mode_cfg = EvalConfig(iou_thresholds=base_eval.iou_thresholds,
                                  n_recall=base_eval.n_recall, mode=mode)
            aps = evalkit.compute_ap(preds, labels, mode_cfg)
            for (cls, b), ap in sorted(aps.items()):
                if ap is None:
                    continue
                lines.append(f"{''.join(cfg.inputs)},{''.join(cfg.proposals)},"
                             f"{_onoff(cfg.depth_transform)},"
                             f"{_onoff(cfg.gamma_weighting)},"
                             f"{CLASS_NAMES[cls]},{base_eval.bin_label(b)},"
                             f"{mode},{ap:.6f},{dataset_hash}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n",
                                      encoding="utf-8")
    print(f"ablation table: {len(variants)} rows -> {out / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument surface
# ---------------------------------------------------------------------------

def _positive(text: str) -> int:
    value = int(text, 10)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadfuse",
        description="four-modality BEV detection experiment driver")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="experiment file; omitted -> built-in defaults")
        p.add_argument("--seed", type=int, default=None,
                       help="override [dataset] seed")
        p.add_argument("--jobs", type=_positive, default=1,
                       help="worker cap for scene-level parallelism")
        p.add_argument("--out", type=Path, required=True,
                       help="experiment output directory")

    p = sub.add_parser("generate", help="write the scene/frame dataset")
    common(p)

    p = sub.add_parser("train", help="fit the pipeline on a dataset")
    common(p)
    p.add_argument("--data", type=Path, default=None,
                   help="dataset directory (default OUT/dataset)")

    p = sub.add_parser("eval", help="run inference and score a checkpoint")
    common(p)
    p.add_argument("--data", type=Path, default=None,
                   help="dataset directory (default OUT/dataset)")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="weights file (default OUT/checkpoint.bin)")

    p = sub.add_parser("ablate", help="train/evaluate one row per axis")
    common(p)
    p.add_argument("axes", nargs="+",
                   help="axis specs, e.g. CL CGLR proposals=L "
                        "gamma_weighting=off")
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = load_experiment(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _experiment(args)
        if args.command == "generate":
            return cmd_generate(cfg, args.out, args.jobs)
        if args.command == "train":
            data = args.data if args.data else args.out / "dataset"
            return cmd_train(cfg, data, args.out)
        if args.command == "eval":
            data = args.data if args.data else args.out / "dataset"
            ckpt = args.checkpoint if args.checkpoint \
                else args.out / "checkpoint.bin"
            return cmd_eval(cfg, data, ckpt, args.out, args.jobs)
        return cmd_ablate(cfg, args.axes, args.out, args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

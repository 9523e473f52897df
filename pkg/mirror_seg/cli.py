"""Command-line entry points: `mirrorseg phantom|train|infer|eval`.

Every command reads one JSON run config (`--config`) with optional dotted
overrides (`--set train_pet.n_epoch=2 inference.tta=false`). Errors are printed
as `error[<category>]: <message>` on stderr and exit with the category's code.
"""

__all__ = [
    "split_ids",
    "read_split",
    "load_study",
    "predict_study",
    "cmd_phantom",
    "cmd_train",
    "cmd_infer",
    "cmd_eval",
    "main",
]

import json
import sys
from dataclasses import replace

import matplotlib
import pandas as pd
from fastcore.script import Param, call_parse, store_true
from fastcore.xtras import Path
from fastprogress.fastprogress import progress_bar

from .config import RunConfig, load_config, save_config
from .errors import DatasetError, MirrorSegError
from .inference import binarize, sliding_window_predict, tta_predict
from .learner import load_model, save_model
from .metrics import evaluate_cohort
from .mirror_net import MirrorNet, TissueGrouping, freeze_ct, group_tissues
from .sampler import prepare_study
from .train import train_stage
from .utils import configure_threads, derive_seed, set_seed
from .volumes import generate_phantom, paste_to_parent, read_volume, write_volume

_SPLITS = ("train", "val", "test", "lesion_free")


def split_ids(dataset_cfg):
    "Study ids per split: `phantom_000`, `phantom_001`, ... numbered across train, val, test, lesion-free"
    counts = [dataset_cfg.n_train, dataset_cfg.n_val, dataset_cfg.n_test, dataset_cfg.n_lesion_free]
    res, i = {}, 0
    for name, n in zip(_SPLITS, counts):
        res[name] = [f"phantom_{j:03d}" for j in range(i, i + n)]
        i += n
    return res


def read_split(data_dir):
    fname = Path(data_dir) / "split.json"
    if not fname.exists():
        raise DatasetError(f"no split manifest at {fname}, run `mirrorseg phantom` first")
    split = json.loads(fname.read_text())
    missing = [k for k in _SPLITS if k not in split]
    if missing:
        raise DatasetError(f"{fname} lacks splits {missing}")
    return split


def load_study(cfg: RunConfig, study_id, labels=True):
    "Read one study from `cfg.data_dir` and bring it into training shape with `prepare_study`"
    d = cfg.data_path
    ct, pet = read_volume(d / f"{study_id}_ct"), read_volume(d / f"{study_id}_pet")
    tissues = lesions = None
    if labels:
        grouping = TissueGrouping.identity(cfg.phantom.tissue_class_count)
        tissues = group_tissues(read_volume(d / f"{study_id}_tissues"), grouping)
        lesions = read_volume(d / f"{study_id}_lesions")
    return prepare_study(study_id, ct, pet, tissues, lesions, cfg.preprocess.hu_threshold, cfg.preprocess.margin_vox)


def predict_study(net, study, icfg, timings=None):
    "Lesion probability of `study` on its original (uncropped) grid"
    kw = dict(patch_size=icfg.patch_size, sigma_scale=icfg.sigma_scale, batch_size=icfg.batch_size, timings=timings)
    if icfg.tta:
        prob = tta_predict(net, study.ct, study.pet, mode=icfg.tta_mode, **kw)
    else:
        prob = sliding_window_predict(net, study.ct, study.pet, **kw)
    return paste_to_parent(prob, study.box, study.parent_shape, fill=0.0)


def cmd_phantom(cfg: RunConfig, progress=True):
    "Write every phantom study of `cfg.dataset` plus `split.json` to `cfg.data_dir`"
    data = cfg.data_path
    data.mkdir(parents=True, exist_ok=True)
    split = split_ids(cfg.dataset)
    free = set(split["lesion_free"])
    ids = [sid for k in _SPLITS for sid in split[k]]
    for i, sid in enumerate(progress_bar(ids, display=progress)):
        pcfg = replace(cfg.phantom, seed=derive_seed(cfg.seed, cfg.phantom.seed, i))
        if sid in free:
            pcfg = replace(pcfg, lesion_count_range=(0, 0))
        for name, grid in zip(("ct", "pet", "tissues", "lesions"), generate_phantom(pcfg)):
            write_volume(grid, data / f"{sid}_{name}")
    (data / "split.json").write_text(json.dumps(split, indent=2))
    return split


def _report(net, studies, cfg, name):
    items = []
    for s in studies:
        mask = binarize(predict_study(net, s, cfg.inference), cfg.inference.threshold)
        items.append((mask, read_volume(cfg.data_path / f"{s.id}_lesions"), None, s.id))
    report = evaluate_cohort(items, cfg.metrics.connectivity)
    out = cfg.output_path
    report.to_csv(out / f"{name}.csv")
    report.plot(out / f"{name}.png")
    return report


def cmd_train(cfg: RunConfig, progress=True, logger=print):
    """CT stage, freeze, PET stage with SWA, then reports on the validation studies.

    Writes `config.json`, `{ct,pet}_loss.csv|png`, stage checkpoints and
    `mirror_final` under `models/`, `val_report.csv|png`, and
    `lesion_free_report.csv|png` / `val_report_ablated.csv|png` when those apply.
    With `final_fit`, validation studies join the training set and the
    lesion-free studies are the ones monitored during training.
    """
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    split = read_split(cfg.data_dir)
    studies = {k: [load_study(cfg, sid) for sid in split[k]] for k in ("train", "val", "lesion_free")}
    train, monitor = studies["train"], studies["val"]
    if cfg.final_fit:
        train, monitor = train + studies["val"], studies["lesion_free"] or studies["val"]
    if cfg.lesion_studies_only:
        train = [s for s in train if s.has_lesion]
    if not train:
        raise DatasetError("no training study with lesions")
    if not monitor:
        raise DatasetError("no study to validate on, set dataset.n_val or dataset.n_lesion_free")

    h = cfg.config_hash()
    set_seed(cfg.seed)
    net = MirrorNet(cfg.ct_branch, cfg.pet_branch)
    kw = dict(path=out, augment_cfg=cfg.augment, progress=progress, logger=logger, config_hash=h)
    res = {"ct": train_stage(net, train, monitor, cfg.train_ct, **kw)}
    freeze_ct(net)
    res["pet"] = train_stage(net, train, monitor, cfg.train_pet, **kw)
    save_model(out / "models" / "mirror_final", net, epoch=cfg.train_pet.n_epoch, config_hash=h)
    for stage, r in res.items():
        r.learn.recorder.plot_loss(out / f"{stage}_loss.png", title=f"{stage.upper()} stage")

    reports = {}
    if studies["val"]:
        reports["val"] = _report(net, studies["val"], cfg, "val_report")
        if cfg.report_ablation:
            with net.ablated_ct():
                reports["val_ablated"] = _report(net, studies["val"], cfg, "val_report_ablated")
    if studies["lesion_free"]:
        reports["lesion_free"] = _report(net, studies["lesion_free"], cfg, "lesion_free_report")
    for k, r in reports.items():
        logger(f"{k}: dice {r.mean_dice:.4f}  fnv {r.mean_fnv_ml:.4f} ml  fpv {r.mean_fpv_ml:.4f} ml")
    return reports


def cmd_infer(cfg: RunConfig, model=None, ids=None, out_dir=None, timing=False, progress=True):
    "Write `<id>_prob` and `<id>_mask` for each study (the test split by default)"
    model = Path(model) if model is not None else cfg.output_path / "models" / "mirror_final"
    if not model.with_suffix(".json").exists():
        raise DatasetError(f"no checkpoint at {model}")
    out_dir = Path(out_dir) if out_dir is not None else cfg.output_path / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = list(ids) if ids else read_split(cfg.data_dir)["test"]
    net = MirrorNet(cfg.ct_branch, cfg.pet_branch)
    load_model(model, net)
    timings = [] if timing else None
    written = []
    for sid in progress_bar(ids, display=progress):
        start = 0 if timings is None else len(timings)
        prob = predict_study(net, load_study(cfg, sid, labels=False), cfg.inference, timings)
        if timings is not None:
            for t in timings[start:]:
                t["study_id"] = sid
        write_volume(prob, out_dir / f"{sid}_prob")
        write_volume(binarize(prob, cfg.inference.threshold), out_dir / f"{sid}_mask")
        written.append(sid)
    if timings is not None:
        pd.DataFrame(timings).to_csv(out_dir / "timing.csv", index=False)
    return written


def _ids(d, suffix):
    tail = f"{suffix}.json"
    return {p.name[: -len(tail)] for p in Path(d).glob(f"*{tail}")}


def cmd_eval(pred_dir, gt_dir, out=None, connectivity=26, pred_suffix="_mask", gt_suffix="_lesions"):
    "Cohort report of `<id>{pred_suffix}` masks against `<id>{gt_suffix}` masks, written to `out`"
    pred_ids, gt_ids = _ids(pred_dir, pred_suffix), _ids(gt_dir, gt_suffix)
    if pred_ids != gt_ids:
        raise DatasetError(
            f"study ids differ: no prediction for {sorted(gt_ids - pred_ids)}, "
            f"no ground truth for {sorted(pred_ids - gt_ids)}"
        )
    if not pred_ids:
        raise DatasetError(f"no `*{pred_suffix}` volumes in {pred_dir}")
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    items = [
        (read_volume(pred_dir / f"{sid}{pred_suffix}"), read_volume(gt_dir / f"{sid}{gt_suffix}"), None, sid)
        for sid in sorted(pred_ids)
    ]
    report = evaluate_cohort(items, connectivity)
    out = Path(out) if out is not None else pred_dir / "report.csv"
    report.to_csv(out)
    report.plot(out.with_suffix(".png"))
    return report


@call_parse
def phantom(
    config: Param("Run config JSON file", str) = None,
    overrides: Param("Config overrides as `key=value`, also given as `--set`", str, nargs="*") = None,
):
    "Generate the phantom dataset and its split manifest"
    split = cmd_phantom(load_config(config, overrides))
    print(", ".join(f"{k}: {len(v)}" for k, v in split.items()))


@call_parse
def train(
    config: Param("Run config JSON file", str) = None,
    overrides: Param("Config overrides as `key=value`, also given as `--set`", str, nargs="*") = None,
    quiet: Param("Hide progress bars", store_true) = False,
):
    "Train both stages and report on the validation split"
    cmd_train(load_config(config, overrides), progress=not quiet)


@call_parse
def infer(
    config: Param("Run config JSON file", str) = None,
    overrides: Param("Config overrides as `key=value`, also given as `--set`", str, nargs="*") = None,
    model: Param("Checkpoint base path, defaults to `<output_dir>/models/mirror_final`", str) = None,
    ids: Param("Study ids, defaults to the test split", str, nargs="*") = None,
    out_dir: Param("Output directory, defaults to `<output_dir>/predictions`", str) = None,
    timing: Param("Write a per-window timing CSV", store_true) = False,
):
    "Predict lesion probability maps and masks"
    written = cmd_infer(load_config(config, overrides), model=model, ids=ids, out_dir=out_dir, timing=timing)
    print(f"{len(written)} studies predicted")


@call_parse
def evaluate(
    pred_dir: Param("Directory of predicted masks", str, opt=False),
    gt_dir: Param("Directory of ground-truth masks", str, opt=False),
    config: Param("Run config JSON file (for the connectivity)", str) = None,
    overrides: Param("Config overrides as `key=value`, also given as `--set`", str, nargs="*") = None,
    out: Param("Report CSV, defaults to `<pred_dir>/report.csv`", str) = None,
    pred_suffix: Param("File suffix of predicted masks", str) = "_mask",
    gt_suffix: Param("File suffix of ground-truth masks", str) = "_lesions",
):
    "Per-study Dice, FNV and FPV plus their means"
    cfg = load_config(config, overrides)
    report = cmd_eval(pred_dir, gt_dir, out, cfg.metrics.connectivity, pred_suffix, gt_suffix)
    print(report.to_frame().to_string(index=False))


_COMMANDS = {"phantom": phantom, "train": train, "infer": infer, "eval": evaluate}


def main():
    matplotlib.use("Agg")
    configure_threads()
    if len(sys.argv) < 2 or sys.argv[1] not in _COMMANDS:
        print(f"usage: mirrorseg {{{','.join(_COMMANDS)}}} [--config FILE] [--set KEY=VALUE ...]", file=sys.stderr)
        sys.exit(2)
    cmd = sys.argv.pop(1)
    sys.argv[0] = f"mirrorseg {cmd}"
    sys.argv = ["--overrides" if a == "--set" else a for a in sys.argv]
    try:
        _COMMANDS[cmd]()
    except MirrorSegError as e:
        msg = " ".join(str(e).split())
        print(f"error[{e.category}]: {msg}", file=sys.stderr)
        sys.exit(e.exit_code)

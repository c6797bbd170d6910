"""Reproducible experiment front-end.

Every subcommand reads a JSON config (flags override file values), writes
its outputs plus a run manifest into one output directory, and exits 0 on
success, 2 on config problems, 3 on data/weight problems. The manifest
echoes the fully resolved config and hashes every input and output, so a
run can be reproduced byte for byte from the manifest alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .kse import KseConfig, drop_kernels, kse_scores
from .masking import build_masks
from .metrics import (
    Roi,
    ensemble_bias,
    ensemble_cov,
    load_rois,
    mse,
    psnr,
    save_rois,
)
from .model import (
    NetworkConfig,
    WeightFileError,
    denoise_volume,
    load_weights,
    network_hash,
    save_weights,
)
from .phantom import (
    DATASET_COUNT_LEVELS,
    Lesion,
    PhantomSpec,
    ScanProtocol,
    background_voxels,
    build_dataset,
    lesion_voxels,
    load_dataset,
    load_study,
    make_study,
    random_phantom_spec,
    save_dataset,
    save_study,
)
from .training import TrainConfig, finetune_tgd, online_n2n, train_scratch

SWEEP_THRESHOLDS = (0.3, 0.4, 0.5, 0.6)


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def need(cfg: dict, field: str, kind, where: str = "config"):
    """Fetch a required field, naming it in the error. Dotted paths descend."""
    node = cfg
    parts = field.split(".")
    for part in parts:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing field: {field} (in {where})")
        node = node[part]
    if kind is float and isinstance(node, int):
        node = float(node)
    if kind is not None and not isinstance(node, kind):
        raise ConfigError(f"field {field} must be {kind}, got {type(node).__name__}")
    return node


def opt(cfg: dict, field: str, default):
    node = cfg
    for part in field.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode()
    ).hexdigest()


def resolve_out_dir(args, subcommand: str, resolved: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        out = Path("runs") / f"{subcommand}-{stamp}-{_config_hash(resolved)[:8]}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(
    out: Path, subcommand: str, resolved: dict, inputs: dict, outputs: dict,
    wall_time_s: float | None = None,
) -> None:
    doc = {
        "tool": "tgdkit",
        "version": __version__,
        "subcommand": subcommand,
        "config": resolved,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in outputs.items()},
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if wall_time_s is not None:
        doc["wall_time_s"] = wall_time_s
    write_json(out / "manifest.json", doc)


def _network_config(cfg: dict) -> NetworkConfig:
    try:
        return NetworkConfig(
            depth=opt(cfg, "network.depth", 8),
            channels=opt(cfg, "network.channels", 64),
            input_slices=opt(cfg, "network.input_slices", 3),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _train_config(cfg: dict, args, mode: str) -> TrainConfig:
    # "phi"/"freeze_last_layer" are the config-file spellings; manifests echo
    # the resolved names, and replaying a manifest must work too
    phi = opt(cfg, "phi", opt(cfg, "kse_threshold", None))
    if getattr(args, "phi", None) is not None:
        phi = args.phi
    freeze = opt(cfg, "freeze_last_layer", opt(cfg, "last_layer_frozen", True))
    if getattr(args, "freeze_last_layer", None) is not None:
        freeze = args.freeze_last_layer
    try:
        return TrainConfig(
            mode=mode,
            epochs=args.epochs if args.epochs is not None else opt(cfg, "epochs", None),
            batch_size=opt(cfg, "batch_size", 8),
            learning_rate=opt(cfg, "learning_rate", None),
            weight_decay=opt(cfg, "weight_decay", 1e-5),
            seed=args.seed if args.seed is not None else opt(cfg, "seed", 0),
            kse_threshold=phi,
            last_layer_frozen=freeze,
            kse=KseConfig(
                alpha=opt(cfg, "kse.alpha", 1.0),
                k_neighbors=opt(cfg, "kse.k_neighbors", 5),
            ),
            network=_network_config(cfg),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_net(path, expect: NetworkConfig | None = None):
    p = Path(path)
    if not p.exists():
        raise DataError(f"weights file not found: {p}")
    return load_weights(p, expect=expect)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = need(cfg, "seed", int)
    h = need(cfg, "image.height", int)
    w = need(cfg, "image.width", int)
    slices = opt(cfg, "image.slices", 5)
    protocol = ScanProtocol(
        psf_sigma=need(cfg, "protocol.psf_sigma", float),
        count_budget=need(cfg, "protocol.count_budget", float),
        seed=seed,
    )
    n_train = need(cfg, "phantoms.n_train", int)
    n_val = opt(cfg, "phantoms.n_val", 0)
    levels = tuple(opt(cfg, "count_levels", list(DATASET_COUNT_LEVELS)))
    resolved = {
        "seed": seed,
        "image": {"height": h, "width": w, "slices": slices},
        "protocol": protocol.to_dict(),
        "phantoms": cfg.get("phantoms", {}),
        "count_levels": list(levels),
        "test_studies": opt(cfg, "test_studies", []),
    }
    out = resolve_out_dir(args, "gen-data", resolved)

    rng = np.random.default_rng(seed)
    specs = [
        random_phantom_spec(
            rng, h, w, slices=slices,
            n_lesions=opt(cfg, "phantoms.n_lesions", 2),
            lesion_radius=opt(cfg, "phantoms.lesion_radius", 3.0),
            lesion_contrast=opt(cfg, "phantoms.lesion_contrast", 2.0),
        )
        for _ in range(n_train + n_val)
    ]
    dataset = build_dataset(specs, protocol, levels, n_val=n_val)
    save_dataset(dataset, out / "dataset")

    outputs = {"dataset": out / "dataset" / "dataset.json"}
    for tcfg in resolved["test_studies"]:
        name = need(tcfg, "name", str, where="test_studies entry")
        spec = random_phantom_spec(
            rng, h, w, slices=slices,
            n_lesions=opt(tcfg, "n_lesions", 2),
            lesion_radius=opt(cfg, "phantoms.lesion_radius", 3.0),
            lesion_contrast=opt(cfg, "phantoms.lesion_contrast", 2.0),
        )
        ood = opt(tcfg, "ood_lesion", None)
        if ood is not None:
            extra = Lesion(
                tuple(need(ood, "center", list, where="ood_lesion")),
                need(ood, "radius", float, where="ood_lesion"),
                need(ood, "contrast", float, where="ood_lesion"),
            )
            spec = PhantomSpec(
                spec.height, spec.width, spec.slices,
                spec.ellipses, spec.lesions + (extra,), spec.seed,
            )
        study = make_study(
            spec,
            protocol,
            count_levels=tuple(opt(tcfg, "count_levels", [1.0])),
            n_realizations=opt(tcfg, "n_realizations", 1),
            n2n_split=opt(tcfg, "n2n_split", False),
        )
        sdir = out / "studies" / name
        save_study(study, sdir)
        rois = {
            "lesion": Roi("lesion", lesion_voxels(spec)),
            "background": Roi("background", background_voxels(spec)),
        }
        if ood is not None:
            ood_only = PhantomSpec(
                spec.height, spec.width, spec.slices, spec.ellipses,
                (extra,), spec.seed,
            )
            rois["ood_lesion"] = Roi("lesion", lesion_voxels(ood_only))
        save_rois(rois, sdir / "rois.json")
        outputs[f"study:{name}"] = sdir / "study.json"

    write_manifest(out, "gen-data", resolved, inputs={}, outputs=outputs)
    print(f"dataset written to {out}")
    return 0


# ------------------------------------------------------------------- train


def _run_training(args, mode: str) -> int:
    cfg = load_config(args.config)
    dataset_dir = Path(need(cfg, "dataset", str))
    if not (dataset_dir / "dataset.json").exists():
        raise DataError(f"dataset not found at {dataset_dir}")
    tc = _train_config(cfg, args, mode)
    resolved = {"dataset": str(dataset_dir), **tc.to_dict()}
    if mode != "scratch":
        resolved["weights"] = str(need(cfg, "weights", str))
        resolved["generation"] = opt(cfg, "generation", 1)
    out = resolve_out_dir(args, mode.replace("_", "-"), resolved)
    dataset = load_dataset(dataset_dir)
    inputs = {"dataset": dataset_dir / "dataset.json"}

    if mode == "scratch":
        net, record = train_scratch(tc, dataset)
        masks = None
    else:
        weights_path = Path(resolved["weights"])
        base = _load_net(weights_path, expect=tc.network)
        inputs["weights"] = weights_path
        net, record, masks = finetune_tgd(
            base, tc, dataset, generation=resolved["generation"]
        )

    net.version_tag = f"{mode}-seed{tc.seed}"
    save_weights(net, out / "weights.tgdw")
    (out / "record.jsonl").write_text(record.to_jsonl())
    outputs = {"weights": out / "weights.tgdw", "record": out / "record.jsonl"}
    if masks is not None:
        (out / "masks.json").write_text(masks.to_json())
        outputs["masks"] = out / "masks.json"
    write_manifest(
        out, mode.replace("_", "-"), resolved, inputs, outputs,
        wall_time_s=record.wall_time_s,
    )
    print(f"final weights {network_hash(net)[:12]} -> {out}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args, "scratch")


def cmd_tgd_finetune(args) -> int:
    return _run_training(args, "tgd_finetune")


def cmd_n2n(args) -> int:
    cfg = load_config(args.config)
    study_dir = Path(need(cfg, "study", str))
    weights_path = Path(need(cfg, "weights", str))
    tc = _train_config(cfg, args, "n2n_online")
    resolved = {
        "study": str(study_dir),
        "weights": str(weights_path),
        "generation": opt(cfg, "generation", 1),
        **tc.to_dict(),
    }
    out = resolve_out_dir(args, "n2n", resolved)
    if not (study_dir / "study.json").exists():
        raise DataError(f"study not found at {study_dir}")
    study = load_study(study_dir)
    if "n2n" not in study.realizations:
        raise DataError("study has no 'n2n' split (generate with n2n_split: true)")
    base = _load_net(weights_path, expect=tc.network)
    halves = study.realizations["n2n"]
    net, record = online_n2n(
        base, tc, halves[0], halves[1], generation=resolved["generation"]
    )
    net.version_tag = f"n2n-seed{tc.seed}"
    save_weights(net, out / "weights.tgdw")
    (out / "record.jsonl").write_text(record.to_jsonl())
    write_manifest(
        out, "n2n", resolved,
        {"weights": weights_path, "study": study_dir / "study.json"},
        {"weights": out / "weights.tgdw", "record": out / "record.jsonl"},
        wall_time_s=record.wall_time_s,
    )
    print(f"final weights {network_hash(net)[:12]} -> {out}")
    return 0


# -------------------------------------------------------------- kse-report


def cmd_kse_report(args) -> int:
    net = _load_net(args.weights)
    report = kse_scores(
        net, KseConfig(alpha=args.alpha, k_neighbors=args.k_neighbors)
    )
    resolved = {
        "weights": str(args.weights),
        "alpha": args.alpha,
        "k_neighbors": args.k_neighbors,
        "thresholds": list(SWEEP_THRESHOLDS),
    }
    out = resolve_out_dir(args, "kse-report", resolved)
    (out / "kse_report.json").write_text(report.to_json() + "\n")

    sweep = []
    for t in SWEEP_THRESHOLDS:
        res = drop_kernels(net, report, t)
        masks = build_masks(net, report, t, last_layer_frozen=True)
        sweep.append(
            {
                "threshold": t,
                "dropped_fraction": res.dropped_fraction,
                "retrained_fraction": masks.retrained_fraction(),
            }
        )
    write_json(out / "sweep.json", {"sweep": sweep})
    lines = ["threshold  dropped%  retrained%"]
    for row in sweep:
        lines.append(
            f"{row['threshold']:>9.2f}  {row['dropped_fraction'] * 100:>7.1f}"
            f"  {row['retrained_fraction'] * 100:>9.1f}"
        )
    (out / "sweep.txt").write_text("\n".join(lines) + "\n")
    write_manifest(
        out, "kse-report", resolved,
        {"weights": Path(args.weights)},
        {
            "kse_report": out / "kse_report.json",
            "sweep": out / "sweep.json",
            "sweep_table": out / "sweep.txt",
        },
    )
    print("\n".join(lines))
    return 0


# -------------------------------------------------------------- prune-eval


def cmd_prune_eval(args) -> int:
    net = _load_net(args.weights)
    study_dir = Path(args.study)
    if not (study_dir / "study.json").exists():
        raise DataError(f"study not found at {study_dir}")
    study = load_study(study_dir)
    level = args.level or max(study.realizations)
    if level not in study.realizations:
        raise DataError(f"study has no count level {level!r}")
    noisy = study.realizations[level][0]

    report = kse_scores(net)
    reference = denoise_volume(net, noisy)
    rows = []
    for t in args.thresholds:
        res = drop_kernels(net, report, t)
        output = denoise_volume(res.network, noisy)
        rows.append(
            {
                "threshold": t,
                "dropped_fraction": res.dropped_fraction,
                "mse_vs_reference": mse(output, reference),
                "mse_vs_truth": mse(output, study.truth),
            }
        )
    resolved = {
        "weights": str(args.weights),
        "study": str(study_dir),
        "level": level,
        "thresholds": list(args.thresholds),
    }
    out = resolve_out_dir(args, "prune-eval", resolved)
    write_json(out / "prune_eval.json", {"rows": rows})
    lines = ["threshold  dropped%  mse_vs_reference  mse_vs_truth"]
    for r in rows:
        lines.append(
            f"{r['threshold']:>9.2f}  {r['dropped_fraction'] * 100:>7.1f}"
            f"  {r['mse_vs_reference']:>16.6g}  {r['mse_vs_truth']:>12.6g}"
        )
    (out / "prune_eval.txt").write_text("\n".join(lines) + "\n")
    write_manifest(
        out, "prune-eval", resolved,
        {"weights": Path(args.weights), "study": study_dir / "study.json"},
        {"report": out / "prune_eval.json", "table": out / "prune_eval.txt"},
    )
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    net = _load_net(args.weights)
    study_dir = Path(args.study)
    if not (study_dir / "study.json").exists():
        raise DataError(f"study not found at {study_dir}")
    study = load_study(study_dir)
    rois_path = Path(args.rois) if args.rois else study_dir / "rois.json"
    if not rois_path.exists():
        raise ConfigError(f"missing ROI file: {rois_path}")
    rois = load_rois(rois_path)
    level = args.level or max(study.realizations)
    if level not in study.realizations:
        raise DataError(f"study has no count level {level!r}")
    stack = study.realizations[level]

    denoised = [denoise_volume(net, stack[r]) for r in range(stack.shape[0])]
    report: dict = {
        "level": level,
        "n_realizations": len(denoised),
        "mse_vs_truth": float(np.mean([mse(d, study.truth) for d in denoised])),
        "psnr_db": float(
            np.mean([psnr(d, study.truth, peak=float(study.truth.max())) for d in denoised])
        ),
    }
    if "lesion" in rois:
        report["lesion_bias_pct"] = ensemble_bias(denoised, rois["lesion"], study.truth)
    if "background" in rois:
        if len(denoised) >= 2:
            report["background_cov_pct"] = ensemble_cov(denoised, rois["background"])
        else:
            report["background_cov_pct"] = None  # needs >= 2 realizations
    resolved = {
        "weights": str(args.weights),
        "study": str(study_dir),
        "rois": str(rois_path),
        "level": level,
    }
    out = resolve_out_dir(args, "evaluate", resolved)
    write_json(out / "metrics.json", report)
    lines = [f"{'Metric':<22}{'Value':>12}"]
    display = [
        ("Lesion Bias (%)", report.get("lesion_bias_pct")),
        ("Background CoV (%)", report.get("background_cov_pct")),
        ("MSE vs truth", report["mse_vs_truth"]),
        ("PSNR (dB)", report["psnr_db"]),
    ]
    for name, value in display:
        shown = "n/a" if value is None else f"{value:.4g}"
        lines.append(f"{name:<22}{shown:>12}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    write_manifest(
        out, "evaluate", resolved,
        {"weights": Path(args.weights), "study": study_dir / "study.json", "rois": rois_path},
        {"metrics": out / "metrics.json", "table": out / "metrics.txt"},
    )
    print("\n".join(lines))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tgdkit",
        description="Selective fine-tuning of a convolutional denoiser "
        "via kernel-importance gradient masks.",
    )
    p.add_argument("--version", action="version", version=f"tgdkit {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def add_common(sp):
        sp.add_argument("--out", help="output directory (default: runs/<auto>)")

    def add_train_flags(sp):
        sp.add_argument("config", help="JSON config file")
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        add_common(sp)

    sp = sub.add_parser("gen-data", help="generate a phantom dataset and test studies")
    sp.add_argument("config")
    add_common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a denoiser from scratch")
    add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("tgd-finetune", help="masked fine-tuning of a pre-trained net")
    add_train_flags(sp)
    sp.add_argument("--phi", type=float, default=None, help="KSE threshold")
    freeze = sp.add_mutually_exclusive_group()
    freeze.add_argument(
        "--freeze-last-layer", dest="freeze_last_layer",
        action="store_true", default=None,
    )
    freeze.add_argument(
        "--no-freeze-last-layer", dest="freeze_last_layer", action="store_false"
    )
    sp.set_defaults(func=cmd_tgd_finetune)

    sp = sub.add_parser("n2n", help="online adaptation on one study's noise split")
    add_train_flags(sp)
    sp.add_argument("--phi", type=float, default=None, help="KSE threshold")
    freeze = sp.add_mutually_exclusive_group()
    freeze.add_argument(
        "--freeze-last-layer", dest="freeze_last_layer",
        action="store_true", default=None,
    )
    freeze.add_argument(
        "--no-freeze-last-layer", dest="freeze_last_layer", action="store_false"
    )
    sp.set_defaults(func=cmd_n2n)

    sp = sub.add_parser("kse-report", help="score a net and sweep drop thresholds")
    sp.add_argument("weights")
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--k-neighbors", type=int, default=5)
    add_common(sp)
    sp.set_defaults(func=cmd_kse_report)

    sp = sub.add_parser("prune-eval", help="drop low-score kernels and measure impact")
    sp.add_argument("weights")
    sp.add_argument("study")
    sp.add_argument(
        "--thresholds", type=float, nargs="+", default=list(SWEEP_THRESHOLDS)
    )
    sp.add_argument("--level", default=None, help="count-level key in the study")
    add_common(sp)
    sp.set_defaults(func=cmd_prune_eval)

    sp = sub.add_parser("evaluate", help="ensemble bias/CoV/MSE of a net on a study")
    sp.add_argument("weights")
    sp.add_argument("study")
    sp.add_argument("--rois", default=None, help="ROI JSON (default: study dir)")
    sp.add_argument("--level", default=None)
    add_common(sp)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, WeightFileError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

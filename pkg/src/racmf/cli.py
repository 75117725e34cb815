"""Command-line pipeline: data generation, two-phase training, enhancement,
and evaluation.

Exit codes: 0 success, 2 user/input error, 3 internal contract violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from .arrayio import read_arrays, write_arrays
from .cmf import (
    evaluate_image_loss,
    load_backbone_checkpoint,
    save_backbone_checkpoint,
    train_backbone,
)
from .config import ExperimentConfig, load_config
from .controller import load_controller_checkpoint, save_controller_checkpoint
from .errors import ContractError, FormatError, NumericalError, SpecificationError
from .metrics import masked_psnr, masked_ssim, nps, nps_profile_distance, psnr, ssim
from .radiomics import ccc_report, feature_vector
from .rl import train_controller
from .rollout import enhance
from .synth import build_dataset, load_manifest, manifest_pairs, read_pair

ENHANCED_SUFFIX = ".rae"


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_record(out_dir: str, command: str, config: ExperimentConfig,
                     inputs: dict[str, str], artifacts: list[str]) -> str:
    """Append-only run metadata; a record never overwrites a previous one."""
    runs_dir = os.path.join(out_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    index = 0
    while os.path.exists(os.path.join(runs_dir, f"run_{index:04d}.json")):
        index += 1
    record = {
        "command": command,
        "timestamp_utc": _utc_now(),
        "config": config.snapshot(),
        "inputs": {name: {"path": path, "sha256": _sha256_file(path)}
                   for name, path in inputs.items() if os.path.exists(path)},
        "artifacts": artifacts,
    }
    path = os.path.join(runs_dir, f"run_{index:04d}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else repr(v) if isinstance(v, float)
                              else str(v) for v in row) + "\n")


def cmd_gen_data(config: ExperimentConfig, out: str) -> str:
    manifest = build_dataset(
        n_pairs=config.data.n_pairs,
        spec_template=config.data.phantom_template(),
        degradation_template=config.data.degradation_template(),
        out_dir=out,
        seed=config.data.seed,
        splits=config.data.splits,
    )
    counts = {"train": 0, "val": 0, "test": 0}
    for entry in manifest["pairs"]:
        counts[entry["split"]] += 1
    manifest_path = os.path.join(out, "manifest.json")
    write_run_record(out, "gen-data", config, {}, [manifest_path])
    print(f"manifest: {manifest_path}")
    print(f"splits: train={counts['train']} val={counts['val']} test={counts['test']}")
    return manifest_path


def cmd_train_backbone(config: ExperimentConfig, manifest_path: str, out: str) -> str:
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    train_pairs = manifest_pairs(manifest, manifest_path, "train")
    val_pairs = manifest_pairs(manifest, manifest_path, "val") or train_pairs
    net, history = train_backbone(train_pairs, config.backbone)

    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "backbone.ckpt")
    save_backbone_checkpoint(net, ckpt_path, steps=config.backbone.steps)
    val_img = evaluate_image_loss(net, val_pairs, seed=config.backbone.seed)
    rows = [[h.step, h.total, h.mf, h.img, None] for h in history]
    rows[-1][4] = val_img
    csv_path = os.path.join(out, "backbone_loss.csv")
    _write_csv(csv_path, ["step", "loss_total", "loss_mf", "loss_img", "val_img"], rows)
    write_run_record(out, "train-backbone", config, {"manifest": manifest_path},
                     [ckpt_path, csv_path])
    print(f"checkpoint: {ckpt_path}")
    print(f"final train L_img: {history[-1].img!r}")
    print(f"val L_img: {val_img!r}")
    return ckpt_path


def cmd_train_controller(config: ExperimentConfig, manifest_path: str,
                         backbone_path: str, out: str) -> str:
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    if not os.path.exists(backbone_path):
        raise FileNotFoundError(f"backbone checkpoint not found: {backbone_path}")
    backbone_bytes_before = _sha256_file(backbone_path)
    net, _ = load_backbone_checkpoint(backbone_path)
    manifest = load_manifest(manifest_path)
    train_pairs = manifest_pairs(manifest, manifest_path, "train")
    result = train_controller(net, train_pairs, config.rollout, config.ppo,
                              config.reward, config.controller)
    if _sha256_file(backbone_path) != backbone_bytes_before:
        raise ContractError("backbone checkpoint file changed during controller training")

    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "controller.ckpt")
    save_controller_checkpoint(result.controller, ckpt_path,
                               episodes=config.ppo.n_episodes)
    csv_path = os.path.join(out, "controller_reward.csv")
    _write_csv(csv_path,
               ["episode", "mean_reward", "mean_episode_length", "mean_micro_steps"],
               [[u.episode, u.mean_reward, u.mean_episode_length, u.mean_micro_steps]
                for u in result.updates])
    write_run_record(out, "train-controller", config,
                     {"manifest": manifest_path, "backbone": backbone_path},
                     [ckpt_path, csv_path])
    print(f"checkpoint: {ckpt_path}")
    print(f"reward history: {csv_path}")
    return ckpt_path


def cmd_enhance(config: ExperimentConfig, manifest_path: str, backbone_path: str,
                controller_path: str | None, split: str, out: str) -> str:
    for path, what in ((manifest_path, "manifest"), (backbone_path, "backbone checkpoint")):
        if not os.path.exists(path):
            raise FileNotFoundError(f"{what} not found: {path}")
    net, _ = load_backbone_checkpoint(backbone_path)
    controller = None
    if controller_path is not None:
        if not os.path.exists(controller_path):
            raise FileNotFoundError(f"controller checkpoint not found: {controller_path}")
        controller, _ = load_controller_checkpoint(controller_path)
    manifest = load_manifest(manifest_path)
    entries = [e for e in manifest["pairs"] if e["split"] == split]
    if not entries:
        raise SpecificationError(f"split {split!r} has no pairs in the manifest")

    enhanced_dir = os.path.join(out, "enhanced")
    traces_dir = os.path.join(out, "traces")
    os.makedirs(enhanced_dir, exist_ok=True)
    os.makedirs(traces_dir, exist_ok=True)
    base = os.path.dirname(manifest_path)
    rows = []
    for index, entry in enumerate(entries):
        pair = read_pair(os.path.join(base, entry["path"]))
        rng = np.random.default_rng([config.rollout.init_seed, index])
        result, trace = enhance(net, controller, pair.x_A, config.rollout, rng=rng,
                                body_mask=pair.body_mask, mode="greedy")
        out_path = os.path.join(enhanced_dir, entry["pair_id"] + ENHANCED_SUFFIX)
        write_arrays(out_path, {"enhanced": result.astype(np.float32)},
                     meta={"pair_id": entry["pair_id"],
                           "eval_count": trace.total_evals,
                           "micro_steps": trace.total_micro_steps})
        with open(os.path.join(traces_dir, entry["pair_id"] + ".json"), "w",
                  encoding="utf-8") as fh:
            fh.write(trace.to_json() + "\n")
        rows.append([entry["pair_id"], len(trace.steps), trace.total_micro_steps,
                     trace.total_evals])
    csv_path = os.path.join(out, "enhance_summary.csv")
    _write_csv(csv_path, ["pair_id", "steps", "micro_steps", "eval_count"], rows)
    inputs = {"manifest": manifest_path, "backbone": backbone_path}
    if controller_path:
        inputs["controller"] = controller_path
    write_run_record(out, "enhance", config, inputs, [enhanced_dir, csv_path])
    print(f"enhanced {len(rows)} pairs into {enhanced_dir}")
    return enhanced_dir


def _load_enhanced(enhanced_dir: str, pair_id: str) -> np.ndarray:
    path = os.path.join(enhanced_dir, pair_id + ENHANCED_SUFFIX)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    arrays, meta = read_arrays(path)
    if "enhanced" not in arrays:
        raise FormatError(f"{path} carries no 'enhanced' array")
    return arrays["enhanced"]


def select_homogeneous_offsets(target: np.ndarray, body_mask: np.ndarray,
                               patch: int, fraction: float) -> list[tuple[int, int]]:
    """Grid-aligned patches fully inside the body, lowest target-variance decile."""
    h, w = target.shape
    candidates = []
    for y in range(0, h - patch + 1, patch):
        for x in range(0, w - patch + 1, patch):
            if np.all(body_mask[y:y + patch, x:x + patch] == 1):
                candidates.append((float(np.var(target[y:y + patch, x:x + patch])),
                                   y, x))
    if not candidates:
        return []
    candidates.sort()
    keep = max(1, int(round(fraction * len(candidates))))
    return [(y, x) for _, y, x in candidates[:keep]]


def cmd_eval(config: ExperimentConfig, manifest_path: str, enhanced_dir: str,
             out: str) -> str:
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    split = config.eval.split
    entries = [e for e in manifest["pairs"] if e["split"] == split]
    if not entries:
        raise SpecificationError(f"split {split!r} has no pairs in the manifest")
    missing = [e["pair_id"] for e in entries if not os.path.exists(
        os.path.join(enhanced_dir, e["pair_id"] + ENHANCED_SUFFIX))]
    if missing:
        raise FileNotFoundError(
            f"enhanced outputs missing for pair_ids: {', '.join(missing)}")

    base = os.path.dirname(manifest_path)
    data_range = config.eval.data_range
    per_image = []
    ref_vectors, test_vectors = [], []
    input_patches, enhanced_patches, target_patches = [], [], []
    for entry in entries:
        pair = read_pair(os.path.join(base, entry["path"]))
        enhanced = _load_enhanced(enhanced_dir, entry["pair_id"])
        if enhanced.shape != pair.x_B.shape:
            raise FormatError(
                f"enhanced image {entry['pair_id']} shape {enhanced.shape} "
                f"!= pair shape {pair.x_B.shape}")
        full_psnr = psnr(enhanced, pair.x_B, data_range)
        full_ssim = ssim(enhanced, pair.x_B, data_range)
        row = {
            "pair_id": entry["pair_id"],
            "psnr": float(full_psnr.db),
            "psnr_exact": bool(full_psnr.exact_match),
            "ssim": float(full_ssim),
            "roi_psnr": None,
            "roi_ssim": None,
        }
        if pair.lesion_mask.any():
            roi_psnr = masked_psnr(enhanced, pair.x_B, pair.lesion_mask, data_range)
            row["roi_psnr"] = float(roi_psnr.db)
            row["roi_ssim"] = float(masked_ssim(enhanced, pair.x_B,
                                                pair.lesion_mask, data_range))
            ref_vectors.append(feature_vector(pair.x_B, pair.lesion_mask,
                                              config.eval.n_g))
            test_vectors.append(feature_vector(enhanced, pair.lesion_mask,
                                               config.eval.n_g))
        per_image.append(row)
        offsets = select_homogeneous_offsets(pair.x_B, pair.body_mask,
                                             config.eval.nps_patch_size,
                                             config.eval.nps_lowest_variance_fraction)
        for y, x in offsets:
            sl = (slice(y, y + config.eval.nps_patch_size),
                  slice(x, x + config.eval.nps_patch_size))
            input_patches.append(pair.x_A[sl])
            enhanced_patches.append(enhanced[sl])
            target_patches.append(pair.x_B[sl])

    if len(ref_vectors) < 2:
        raise SpecificationError(
            "CCC needs >= 2 pairs with lesion ROIs in the evaluated split")
    if not target_patches:
        raise SpecificationError("no homogeneous body patches found for NPS")
    report = ccc_report(ref_vectors, test_vectors)
    nps_target = nps(target_patches)
    nps_enhanced = nps(enhanced_patches)
    nps_input = nps(input_patches)

    payload = {
        "version": 1,
        "split": split,
        "per_image": per_image,
        "ccc": {
            "per_feature": report.per_feature,
            "per_family": {fam: {"mean": m, "std": s}
                           for fam, (m, s) in report.per_family.items()},
            "overall": report.overall,
        },
        "nps": {
            "bin_centers": nps_target.bin_centers.tolist(),
            "reference_profile": nps_target.profile.tolist(),
            "test_profile": nps_enhanced.profile.tolist(),
            "input_profile": nps_input.profile.tolist(),
        },
    }
    os.makedirs(out, exist_ok=True)
    json_path = os.path.join(out, "metrics.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    csv_path = os.path.join(out, "metrics.csv")
    _write_csv(csv_path, ["pair_id", "psnr", "ssim", "roi_psnr", "roi_ssim"],
               [[r["pair_id"], r["psnr"], r["ssim"], r["roi_psnr"], r["roi_ssim"]]
                for r in per_image])
    ccc_csv = os.path.join(out, "ccc.csv")
    _write_csv(ccc_csv, ["feature", "ccc"],
               [[fid, value] for fid, value in report.per_feature.items()]
               + [[f"family:{fam}", m] for fam, (m, _) in report.per_family.items()]
               + [["overall", report.overall]])
    write_run_record(out, "eval", config,
                     {"manifest": manifest_path}, [json_path, csv_path, ccc_csv])
    print(f"metrics: {json_path}")
    print(f"overall CCC: {report.overall!r}")
    return json_path


def cmd_nps(config: ExperimentConfig, manifest_path: str, images_dir: str,
            out: str, plot: bool = False) -> str:
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    split = config.eval.split
    entries = [e for e in manifest["pairs"] if e["split"] == split]
    if not entries:
        raise SpecificationError(f"split {split!r} has no pairs in the manifest")
    base = os.path.dirname(manifest_path)
    patch = config.eval.nps_patch_size
    input_patches, enhanced_patches, target_patches = [], [], []
    for entry in entries:
        pair = read_pair(os.path.join(base, entry["path"]))
        enhanced = _load_enhanced(images_dir, entry["pair_id"])
        offsets = select_homogeneous_offsets(pair.x_B, pair.body_mask, patch,
                                             config.eval.nps_lowest_variance_fraction)
        for y, x in offsets:
            sl = (slice(y, y + patch), slice(x, x + patch))
            input_patches.append(pair.x_A[sl])
            enhanced_patches.append(enhanced[sl])
            target_patches.append(pair.x_B[sl])
    if not target_patches:
        raise SpecificationError("no homogeneous body patches found for NPS")

    prof_input = nps(input_patches)
    prof_enhanced = nps(enhanced_patches)
    prof_target = nps(target_patches)
    payload = {
        "version": 1,
        "split": split,
        "n_patches": prof_target.n_rois,
        "bin_centers": prof_target.bin_centers.tolist(),
        "profiles": {
            "input": prof_input.profile.tolist(),
            "enhanced": prof_enhanced.profile.tolist(),
            "target": prof_target.profile.tolist(),
        },
        "distances": {
            "enhanced_target": round(nps_profile_distance(prof_enhanced, prof_target), 6),
            "input_target": round(nps_profile_distance(prof_input, prof_target), 6),
            "input_enhanced": round(nps_profile_distance(prof_input, prof_enhanced), 6),
        },
    }
    os.makedirs(out, exist_ok=True)
    json_path = os.path.join(out, "nps.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    artifacts = [json_path]
    if plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        centers = prof_target.bin_centers
        ax.plot(centers, prof_input.profile, label="input")
        ax.plot(centers, prof_enhanced.profile, label="enhanced")
        ax.plot(centers, prof_target.profile, label="target")
        ax.set_xlabel("spatial frequency (cycles/pixel)")
        ax.set_ylabel("noise power")
        ax.legend()
        fig.tight_layout()
        plot_path = os.path.join(out, "nps.png")
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
        artifacts.append(plot_path)
    write_run_record(out, "nps", config, {"manifest": manifest_path}, artifacts)
    print(f"nps profiles: {json_path}")
    print(f"distance(enhanced, target): {payload['distances']['enhanced_target']:.6f}")
    return json_path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="racmf",
        description="Region-adaptive conditional MeanFlow enhancement pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON or TOML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override, e.g. rollout.K=4")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    common(p)

    p = sub.add_parser("train-backbone", help="train the MeanFlow backbone")
    common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train-controller", help="PPO-train the refinement controller")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", required=True)

    p = sub.add_parser("enhance", help="enhance a dataset split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--controller", default=None,
                   help="controller checkpoint; omit for the pure CMF baseline")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("eval", help="compute the metric report for enhanced outputs")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--enhanced", required=True, help="directory from `racmf enhance`")

    p = sub.add_parser("nps", help="noise power spectrum profiles and distances")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True, help="directory from `racmf enhance`")
    p.add_argument("--plot", action="store_true", help="also render a line plot PNG")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.set)
        out = args.out or config.out_dir
        os.makedirs(out, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(config, out)
        elif args.command == "train-backbone":
            cmd_train_backbone(config, args.manifest, out)
        elif args.command == "train-controller":
            cmd_train_controller(config, args.manifest, args.backbone, out)
        elif args.command == "enhance":
            cmd_enhance(config, args.manifest, args.backbone, args.controller,
                        args.split, out)
        elif args.command == "eval":
            cmd_eval(config, args.manifest, args.enhanced, out)
        elif args.command == "nps":
            cmd_nps(config, args.manifest, args.images, out, plot=args.plot)
        return 0
    except (SpecificationError, FormatError, FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, NumericalError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

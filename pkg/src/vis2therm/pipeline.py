"""Experiment stages run by the command-line interface.

Each stage reads what it needs from an :class:`ExperimentConfig`, writes
its artifacts under an output directory and returns their paths. Every
artifact records the config digest and seed that produced it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .checkpoint import file_digest
from .config import TOY_SETTINGS, ExperimentConfig
from .data import (
    REAL,
    DatasetManifest,
    filter_annotations,
    load_manifest,
    read_image,
    sample_frames,
    write_manifest,
)
from .evaluation import EvalReport, evaluate, match_frame, reasonable_split, write_detections
from .exceptions import ConfigError
from .finetune import PedestrianDetector, fine_tune, real_share
from .mixture import MixtureSpec, build_mixture, synthesize_dataset, table_regimes
from .perceptual import FeatureExtractor
from .toy import generate_toy_dataset
from .translator import load_gan_state, save_gan_checkpoint, train_gan

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "adversarial", "mae", "perceptual", "total", "discriminator")
TP_COLOR = (0, 0, 255)
FN_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)


def _write_csv(path: Path, columns, rows) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)
    return path


def _load(cfg: ExperimentConfig, key: str) -> DatasetManifest:
    return load_manifest(cfg.require_path(key))


def _training_manifest(cfg: ExperimentConfig, key: str = "train_manifest") -> DatasetManifest:
    manifest = _load(cfg, key)
    stride = cfg["data.sample_stride"]
    return sample_frames(manifest, stride) if stride > 1 else manifest


def _check_input_size(cfg: ExperimentConfig, manifest: DatasetManifest) -> None:
    expected = tuple(cfg["schedule.input_size"])
    actual = (manifest.image_height, manifest.image_width)
    if expected != actual:
        raise ConfigError(
            f"config key 'schedule.input_size' is {expected[0]}x{expected[1]} but "
            f"{manifest.name!r} holds {actual[0]}x{actual[1]} images"
        )


# -- toy data -----------------------------------------------------------------------


def make_toy_data(cfg: ExperimentConfig, out: Path) -> dict[str, Path]:
    """Render train/test toy sets and a ready-to-use ``toy.cfg`` pointing at them."""
    h, w = cfg["toy.height"], cfg["toy.width"]
    generate_toy_dataset(out, cfg["toy.n_train"], seed=2 * cfg.seed, height=h, width=w, name="train")
    generate_toy_dataset(out, cfg["toy.n_test"], seed=2 * cfg.seed + 1, height=h, width=w, name="test")
    lines = [
        "# desk-scale experiment on procedurally rendered scenes",
        "train_manifest = train.tsv",
        "test_manifest = test.tsv",
        f"seed = {cfg.seed}",
    ]
    settings = dict(TOY_SETTINGS, **{"schedule.input_size": f"{h},{w}"})
    lines += [f"{k} = {v}" for k, v in settings.items()]
    cfg_path = out / "toy.cfg"
    cfg_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"train_manifest": out / "train.tsv", "test_manifest": out / "test.tsv", "config": cfg_path}


# -- GAN ----------------------------------------------------------------------------------


def run_train_gan(cfg: ExperimentConfig, out: Path) -> dict[str, Path]:
    train = _training_manifest(cfg)
    val_path = cfg.optional_path("val_manifest")
    val = load_manifest(val_path) if val_path else None
    phi_path = cfg.optional_path("phi_checkpoint")
    if phi_path is None:
        log.warning("no phi_checkpoint configured: training without the perceptual term")
        phi = None
    else:
        try:
            phi = FeatureExtractor.from_checkpoint(phi_path, cfg["phi.tap_layer"])
        except KeyError as exc:
            raise ConfigError(f"config key 'phi.tap_layer': {exc.args[0]}") from None
    meta = cfg.provenance()
    hyper = cfg.gan_hyper()
    resume = cfg.optional_path("resume_checkpoint")
    state = load_gan_state(resume, hyper) if resume else None
    state = train_gan(
        train, val, cfg.generator_config(), cfg.discriminator_config(), hyper, phi, state=state, meta=meta
    )
    if phi is not None:
        meta["phi_digest"] = phi.digest()
    ckpt = save_gan_checkpoint(state, out / "gan.ckpt", meta)
    losses = _write_csv(out / "gan_loss.csv", LOSS_COLUMNS, state.loss_history)
    return {"checkpoint": ckpt, "loss_log": losses}


def run_synthesize(cfg: ExperimentConfig, out: Path) -> dict[str, Path]:
    source = _training_manifest(cfg)
    manifest = synthesize_dataset(cfg.require_path("gan_checkpoint"), source, out / "synthetic")
    meta = {**cfg.provenance(), "gan_digest": file_digest(cfg.require_path("gan_checkpoint"))}
    path = write_manifest(manifest, out / "synthetic.tsv", meta)
    return {"manifest": path}


# -- mixtures & detector ------------------------------------------------------------------


def assemble_mixture(cfg: ExperimentConfig, spec: MixtureSpec | None = None) -> tuple[DatasetManifest, MixtureSpec]:
    spec = spec or cfg.mixture_spec()
    real = _training_manifest(cfg)
    if spec.kind == "real" and cfg["synthetic_manifest"] is None:
        return real, spec
    synthetic = _load(cfg, "synthetic_manifest")
    if cfg["data.sample_stride"] > 1:
        synthetic = sample_frames(synthetic, cfg["data.sample_stride"])
    return build_mixture(real, synthetic, spec), spec


def run_build_mixture(cfg: ExperimentConfig, out: Path, spec: MixtureSpec | None = None) -> dict[str, Path]:
    manifest, spec = assemble_mixture(cfg, spec)
    meta = {**cfg.provenance(), "regime": spec.name, "real_count": sum(f.origin == REAL for f in manifest.frames)}
    return {"manifest": write_manifest(manifest, out / f"mixture_{spec.name}.tsv", meta)}


def run_train_detector(cfg: ExperimentConfig, out: Path, spec: MixtureSpec | None = None) -> dict[str, Path]:
    """Build the regime's mixture and fine-tune the detector on it.

    With ``detector.modality = visible`` the (real) visible images are used,
    which is how the visible-domain starting point is trained.
    """
    modality = cfg["detector.modality"]
    if modality not in ("visible", "thermal"):
        raise ConfigError(f"config key 'detector.modality' must be visible or thermal, got {modality!r}")
    manifest, spec = assemble_mixture(cfg, spec)
    if modality == "visible" and spec.kind != "real":
        raise ConfigError("visible-modality training only supports mixture.regime = real")
    _check_input_size(cfg, manifest)
    train = filter_annotations(manifest, cfg["data.min_height"], cfg["data.drop_occluded"])
    meta = {**cfg.provenance(), "regime": spec.name, "modality": modality}
    mixture_path = write_manifest(manifest, out / "mixture.tsv", meta)
    init = cfg.optional_path("init_checkpoint")
    det = fine_tune(
        str(init) if init else None,
        train,
        cfg.schedule(),
        seed=cfg.seed,
        modality=modality,
        width=cfg["detector.width"],
        backbone_depth=cfg["detector.backbone_depth"],
        conf_threshold=cfg["detector.conf_threshold"],
        nms_iou=cfg["detector.nms_iou"],
    )
    meta["real_share"] = real_share(manifest)
    ckpt = det.save(out / "detector.ckpt", meta)
    history = _write_csv(out / "train_log.csv", ("epoch", "lr", "train_loss", "val_loss", "steps"), det.history_)
    return {"checkpoint": ckpt, "mixture": mixture_path, "train_log": history}


# -- evaluation ---------------------------------------------------------------------------


def overlay_frame(
    thermal: np.ndarray,
    dets,
    gts,
    ignore=(),
    iou_threshold: float = 0.5,
) -> Image.Image:
    """Draw true positives blue, missed ground truths green, false positives red."""
    gray = (np.clip(np.asarray(thermal).reshape(thermal.shape[-2:]), 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(gray, mode="L").convert("RGB")
    draw = ImageDraw.Draw(img)
    m = match_frame(dets, gts, iou_threshold, ignore)

    def rect(box, color):
        draw.rectangle([box.x, box.y, box.x2 - 1, box.y2 - 1], outline=color)

    for d, _ in m.tp:
        rect(dets[d].box, TP_COLOR)
    for g in m.fn:
        rect(gts[g], FN_COLOR)
    for d in m.fp:
        rect(dets[d].box, FP_COLOR)
    return img


def write_overlays(manifest: DatasetManifest, detections, out_dir: Path, threshold: float, settings) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for frame in manifest.frames:
        dets = [d for d in detections.get(frame.frame_id, ()) if d.confidence >= threshold]
        gts, ignore = reasonable_split(frame.boxes, settings)
        img = overlay_frame(read_image(frame.thermal_path, 1), dets, gts, ignore, settings.iou_threshold)
        path = out_dir / f"{frame.frame_id}.png"
        img.save(path)
        paths.append(path)
    return paths


def run_evaluate(cfg: ExperimentConfig, out: Path, overlays: bool = False) -> tuple[EvalReport, dict[str, Path]]:
    test = _load(cfg, "test_manifest")
    det = PedestrianDetector.load(cfg.require_path("detector_checkpoint"))
    modality = "visible" if det.config_.in_channels == 3 else "thermal"
    detections = det.predict_manifest(test, modality)
    settings = cfg.eval_settings()
    report = evaluate(detections, test, settings)
    report.meta.update(cfg.provenance())
    report.meta["detector_digest"] = file_digest(cfg.require_path("detector_checkpoint"))
    paths = report.write(out)
    paths["detections"] = write_detections(out / "detections.tsv", detections)
    if overlays:
        write_overlays(test, detections, out / "overlays", cfg["eval.overlay_threshold"], settings)
        paths["overlays"] = out / "overlays"
    return report, paths


# -- ablation -----------------------------------------------------------------------------


def _fmt_lamr(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.4f}"


def run_ablation(cfg: ExperimentConfig, out: Path, regimes: list[MixtureSpec] | None = None) -> dict[str, Path]:
    """Train and evaluate one detector per regime; writes ``ablation.tsv``."""
    regimes = regimes or table_regimes(cfg.seed)
    rows = []
    for spec in regimes:
        sub = out / spec.name
        sub.mkdir(parents=True, exist_ok=True)
        log.info("regime %s", spec.name)
        trained = run_train_detector(cfg, sub, spec)
        report, _ = run_evaluate(cfg.with_values(detector_checkpoint=str(trained["checkpoint"])), sub)
        rows.append((spec, report))
    path = out / "ablation.tsv"
    lines = ["regime\treal_fraction\tlamr_all\tlamr_day\tlamr_night"]
    for spec, r in rows:
        lines.append(
            f"{spec.name}\t{spec.real_fraction:g}\t{_fmt_lamr(r.lamr_all)}\t{_fmt_lamr(r.lamr_day)}\t{_fmt_lamr(r.lamr_night)}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(
        json.dumps({"provenance": cfg.provenance(), "rows": {s.name: r.to_dict()["lamr"] for s, r in rows}}, indent=2) + "\n",
        encoding="utf-8",
    )
    return {"table": path}

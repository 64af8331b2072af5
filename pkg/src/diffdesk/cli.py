"""Command-line harness: train, attack, edit, purify, evaluate, reproduce.

One JSON config file is the single source of truth for an experiment;
`--set key.path=value` overrides individual entries.  Progress and logs go
to stderr; machine-readable results only to files under the output
directory.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import LOSS_KINDS, AttackConfig, checkerboard_target
from .data_io import (
    Report,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_checkpoint,
    load_image,
    parameter_hash,
    save_checkpoint,
    save_image,
    write_report,
)
from .diffusion import NoiseSchedule, make_linear_schedule, train
from .errors import ConfigError, DiffdeskError
from .harness import (
    attack_asymmetry,
    attack_set,
    edit_set,
    purification_grid,
    recovery_fraction,
)
from .metrics import Featurizer, MetricReport
from .models import (
    Autoencoder,
    AutoencoderArch,
    DenoiserArch,
    LatentDiffusionModel,
    UNetDenoiser,
    measure_latent_scale,
    train_autoencoder,
)
from .numerics import Tensor
from .purify import PURIFY_METHODS, PurifyConfig
from .rng import Rng

log = logging.getLogger("diffdesk")

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "workers": 0,  # 0 -> logical processor count
    "output_dir": "runs/default",
    "dataset": {"size": 32, "count": 2000, "noise_amplitude": 0.02},
    "models": {
        "schedule": {"steps": 100, "beta_start": 1e-4, "beta_end": 0.095},
        "autoencoder": {
            "factor": 4,
            "latent_channels": 4,
            "hidden": [24, 48],
            "stem_channels": 16,
            "blocks_per_stage": 2,
            "epochs": 40,
            "batch_size": 32,
            "lr": 2e-3,
            "checkpoint": "checkpoints/autoencoder.ckpt",
        },
        "latent": {
            "widths": [16, 32],
            "blocks_per_level": 2,
            "time_dim": 32,
            "epochs": 12,
            "batch_size": 32,
            "lr": 2e-3,
            "checkpoint": "checkpoints/latent.ckpt",
        },
        "pdm": {
            "widths": [12, 24],
            "blocks_per_level": 2,
            "time_dim": 32,
            "epochs": 6,
            "batch_size": 16,
            "lr": 2e-3,
            "checkpoint": "checkpoints/pdm.ckpt",
        },
    },
    "attack": {
        "budgets_255": [4, 8, 16],
        "step_255": 1.0,
        "iterations": 100,
        "loss_kind": "semantic_latent",
        "mc_samples": 1,
        "mist_weight": 1.0,
        "target": "checkerboard",
        "edit_t_star": 10,
        "input_dir": "",
    },
    "edit": {"t_star": 30, "model": "ldm", "input_dir": ""},
    "purify": {
        "method": "pdm_pure",
        "t_star": 10,
        "grid_cell": 8,
        "quality": 65,
        "crop_fraction": 0.2,
        "resample_factor": 1,
        "filter_radius": 2,
        "filter_eps": 0.02,
        "input_dir": "",
    },
    "evaluation": {
        "eval_count": 200,
        "batch_size": 16,
        "edited_clean_dir": "",
        "edited_adv_dir": "",
        "label_model": "ldm",
        "label_attack": "semantic_latent",
        "label_budget_255": 16,
    },
}

REQUIRED_SECTIONS = ("schema_version", "seed", "output_dir", "dataset", "models")


# ---------------------------------------------------------------------------
# config handling


def _merge(user, default, path: str):
    if isinstance(default, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"config entry {path or '<root>'} must be an object")
        unknown = set(user) - set(default)
        if unknown:
            raise ConfigError(f"unknown config key(s) at {path or '<root>'}: {', '.join(sorted(unknown))}")
        out = {}
        for key, dval in default.items():
            p = f"{path}.{key}" if path else key
            out[key] = _merge(user[key], dval, p) if key in user else copy.deepcopy(dval)
        return out
    if isinstance(default, bool) and not isinstance(user, bool):
        raise ConfigError(f"config entry {path} must be a boolean")
    if isinstance(default, (int, float)) and not isinstance(user, (int, float)):
        raise ConfigError(f"config entry {path} must be a number")
    if isinstance(default, str) and not isinstance(user, str):
        raise ConfigError(f"config entry {path} must be a string")
    if isinstance(default, list) and not isinstance(user, list):
        raise ConfigError(f"config entry {path} must be a list")
    return copy.deepcopy(user)


def _apply_override(cfg: dict, expr: str) -> None:
    if "=" not in expr:
        raise ConfigError(f"--set expects key.path=value, got {expr!r}")
    key, _, raw = expr.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings allowed
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"--set path {key!r} does not name a config entry")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"--set path {key!r} does not name a config entry")
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str], cli_args=None) -> dict:
    if path is None:
        raise ConfigError("a config file is required (--config <path>)")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    for section in REQUIRED_SECTIONS:
        if section not in user:
            raise ConfigError(f"missing required config section: {section}")
    if user.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {user.get('schema_version')!r}; expected {SCHEMA_VERSION}"
        )
    cfg = _merge(user, DEFAULT_CONFIG, "")
    for expr in overrides:
        _apply_override(cfg, expr)
    if cli_args is not None:
        if cli_args.out is not None:
            cfg["output_dir"] = cli_args.out
        if cli_args.seed is not None:
            cfg["seed"] = cli_args.seed
        if cli_args.workers is not None:
            cfg["workers"] = cli_args.workers
    _validate_semantics(cfg)
    return cfg


def _validate_semantics(cfg: dict) -> None:
    SyntheticSpec(
        size=cfg["dataset"]["size"],
        count=cfg["dataset"]["count"],
        noise_amplitude=cfg["dataset"]["noise_amplitude"],
        seed=0,
    ).validate()
    sched_cfg = cfg["models"]["schedule"]
    sched = make_linear_schedule(sched_cfg["steps"], sched_cfg["beta_start"], sched_cfg["beta_end"])
    if not sched.has_terminal_noise:
        raise ConfigError(
            f"schedule leaves alpha_bar_T = {sched.alpha_bars[-1]:.4f} >= 0.01; "
            "raise beta_end or the step count so x_T is approximately pure noise"
        )
    if cfg["attack"]["loss_kind"] not in LOSS_KINDS:
        raise ConfigError(f"attack.loss_kind must be one of {LOSS_KINDS}")
    if cfg["purify"]["method"] not in PURIFY_METHODS:
        raise ConfigError(f"purify.method must be one of {PURIFY_METHODS}")
    if cfg["edit"]["model"] not in ("pdm", "ldm"):
        raise ConfigError("edit.model must be 'pdm' or 'ldm'")
    if not (0 <= cfg["edit"]["t_star"] <= sched.T):
        raise ConfigError(f"edit.t_star must lie in [0, {sched.T}]")
    for b in cfg["attack"]["budgets_255"]:
        if not (0 <= b <= 255):
            raise ConfigError("attack.budgets_255 entries must lie in [0, 255]")
    if cfg["evaluation"]["eval_count"] < 1:
        raise ConfigError("evaluation.eval_count must be positive")
    if cfg["workers"] < 0:
        raise ConfigError("workers must be nonnegative (0 means auto)")


# ---------------------------------------------------------------------------
# experiment context


class Experiment:
    """Resolved config plus lazily built artifacts."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.root = Rng(cfg["seed"])
        sc = cfg["models"]["schedule"]
        self.sched = make_linear_schedule(sc["steps"], sc["beta_start"], sc["beta_end"])

    @property
    def workers(self) -> int:
        w = self.cfg["workers"]
        return w if w > 0 else (os.cpu_count() or 1)

    @property
    def batch_size(self) -> int:
        return self.cfg["evaluation"]["batch_size"]

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def dataset(self) -> np.ndarray:
        spec = SyntheticSpec(
            size=self.cfg["dataset"]["size"],
            count=self.cfg["dataset"]["count"],
            noise_amplitude=self.cfg["dataset"]["noise_amplitude"],
            seed=self.root.derive("dataset").stream_key,
        )
        return generate_synthetic_dataset(spec)[0]

    def eval_images(self) -> np.ndarray:
        spec = SyntheticSpec(
            size=self.cfg["dataset"]["size"],
            count=self.cfg["evaluation"]["eval_count"],
            noise_amplitude=self.cfg["dataset"]["noise_amplitude"],
            seed=self.root.derive("eval-set").stream_key,
        )
        return generate_synthetic_dataset(spec)[0]

    # -- model construction -------------------------------------------------

    def _denoiser_arch(self, section: str, shape) -> DenoiserArch:
        m = self.cfg["models"][section]
        return DenoiserArch(
            height=shape[0],
            width=shape[1],
            channels=shape[2],
            widths=tuple(m["widths"]),
            blocks_per_level=m["blocks_per_level"],
            time_dim=m["time_dim"],
        )

    def _ae_arch(self) -> AutoencoderArch:
        m = self.cfg["models"]["autoencoder"]
        d = self.cfg["dataset"]
        return AutoencoderArch(
            height=d["size"],
            width=d["size"],
            image_channels=3,
            factor=m["factor"],
            latent_channels=m["latent_channels"],
            hidden=tuple(m["hidden"]),
            stem_channels=m["stem_channels"],
            blocks_per_stage=m["blocks_per_stage"],
        )

    def checkpoint_path(self, section: str) -> Path:
        return self.path(self.cfg["models"][section]["checkpoint"])

    def load_models(self) -> tuple[UNetDenoiser, Autoencoder, LatentDiffusionModel]:
        for section in ("pdm", "autoencoder", "latent"):
            if not self.checkpoint_path(section).exists():
                raise ConfigError(
                    f"checkpoint {self.checkpoint_path(section)} does not exist; run `diffdesk train` first"
                )
        ae_blob = load_checkpoint(self.checkpoint_path("autoencoder"))
        ae = Autoencoder(AutoencoderArch.from_dict(ae_blob["descriptor"]))
        _install(ae, ae_blob["params"])
        ae.holdout_mae = ae_blob["descriptor"].get("holdout_mae")

        lat_blob = load_checkpoint(self.checkpoint_path("latent"))
        latent = UNetDenoiser(DenoiserArch.from_dict(lat_blob["descriptor"]))
        _install(latent, lat_blob["params"])
        latent.schedule = NoiseSchedule(lat_blob["betas"])

        pdm_blob = load_checkpoint(self.checkpoint_path("pdm"))
        pdm = UNetDenoiser(DenoiserArch.from_dict(pdm_blob["descriptor"]))
        _install(pdm, pdm_blob["params"])
        pdm.schedule = NoiseSchedule(pdm_blob["betas"])

        ldm = LatentDiffusionModel(
            autoencoder=ae,
            latent_denoiser=latent,
            latent_scale=lat_blob["descriptor"].get("latent_scale", 1.0),
        )
        return pdm, ae, ldm


def _install(model, params: dict[str, np.ndarray]) -> None:
    own = model.parameters()
    if set(own) != set(params):
        raise ConfigError("checkpoint parameter names do not match the architecture descriptor")
    for name, arr in params.items():
        if own[name].data.shape != arr.shape:
            raise ConfigError(f"checkpoint parameter {name} has shape {arr.shape}, expected {own[name].data.shape}")
        own[name].data = arr.copy()


def _encode_in_batches(ae: Autoencoder, images: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = [ae.encode(Tensor(images[s : s + batch])).data for s in range(0, len(images), batch)]
    return np.concatenate(outs, axis=0)


def _load_image_dir(path: str) -> np.ndarray:
    files = sorted(Path(path).glob("*.ppm"))
    if not files:
        raise ConfigError(f"no .ppm images found in {path}")
    return np.stack([load_image(f) for f in files])


def _save_image_set(images: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_image(img, directory / f"img_{i:05d}.ppm")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict) -> int:
    exp = Experiment(cfg)
    started = time.perf_counter()
    images = exp.dataset()
    log.info("dataset: %d images of %dx%d", len(images), images.shape[1], images.shape[2])

    mcfg = cfg["models"]["autoencoder"]
    ae = Autoencoder(exp._ae_arch(), exp.root.derive("init", "autoencoder"))
    ae_report = train_autoencoder(
        ae, images, epochs=mcfg["epochs"], lr=mcfg["lr"],
        rng=exp.root.derive("train", "autoencoder"), batch_size=mcfg["batch_size"],
    )
    ae_ok = ae.holdout_mae is not None and ae.holdout_mae <= 0.05
    if not ae_ok:
        log.warning("autoencoder held-out MAE %.4f misses the 0.05 target", ae.holdout_mae)
    log.info("autoencoder: held-out MAE %.4f", ae.holdout_mae)
    save_checkpoint(ae, exp.checkpoint_path("autoencoder"))

    latent_scale = measure_latent_scale(ae, images)
    latents = _encode_in_batches(ae, images) * latent_scale
    lcfg = cfg["models"]["latent"]
    latent = UNetDenoiser(
        exp._denoiser_arch("latent", ae.latent_shape), exp.root.derive("init", "latent")
    )
    latent.schedule = exp.sched
    latent_report = train(
        latent, latents, epochs=lcfg["epochs"], batch_size=lcfg["batch_size"],
        lr=lcfg["lr"], rng=exp.root.derive("train", "latent"), sched=exp.sched,
    )
    save_checkpoint(latent, exp.checkpoint_path("latent"), schedule_betas=exp.sched.betas,
                    extra={"latent_scale": latent_scale})

    pcfg = cfg["models"]["pdm"]
    pdm = UNetDenoiser(
        exp._denoiser_arch("pdm", images.shape[1:]), exp.root.derive("init", "pdm")
    )
    pdm.schedule = exp.sched
    pdm_report = train(
        pdm, images, epochs=pcfg["epochs"], batch_size=pcfg["batch_size"],
        lr=pcfg["lr"], rng=exp.root.derive("train", "pdm"), sched=exp.sched,
    )
    save_checkpoint(pdm, exp.checkpoint_path("pdm"), schedule_betas=exp.sched.betas)

    elapsed = time.perf_counter() - started
    if elapsed > 1800:
        log.warning("training took %.0f s, above the 30 min desk-scale budget", elapsed)
    payload = {
        "autoencoder": {
            "holdout_mae": ae.holdout_mae,
            "target_met": ae_ok,
            "loss_curve": ae_report.loss_curve,
            "parameter_hash": parameter_hash(ae),
        },
        "latent": {
            "latent_scale": latent_scale,
            "loss_curve": latent_report.loss_curve,
            "parameter_hash": parameter_hash(latent),
            "improved": latent_report.improved,
        },
        "pdm": {
            "loss_curve": pdm_report.loss_curve,
            "parameter_hash": parameter_hash(pdm),
            "improved": pdm_report.improved,
        },
    }
    with open(exp.path("reports", "training_report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    log.info("training finished in %.1f s", elapsed)
    return 0


def _attack_target(cfg: dict, shape) -> np.ndarray | None:
    name = cfg["attack"]["target"]
    if name == "checkerboard":
        return checkerboard_target(shape[0], shape[1], shape[2])
    if name == "":
        return None
    return load_image(name)


def cmd_attack(cfg: dict) -> int:
    exp = Experiment(cfg)
    pdm, ae, ldm = exp.load_models()
    acfg = cfg["attack"]
    if acfg["input_dir"]:
        images = _load_image_dir(acfg["input_dir"])
    else:
        images = exp.eval_images()
    target = _attack_target(cfg, images.shape[1:])
    loss_kind = acfg["loss_kind"]
    for budget in acfg["budgets_255"]:
        attack_cfg = AttackConfig(
            budget=budget / 255.0,
            step=min(acfg["step_255"] / 255.0, budget / 255.0) if budget else 1 / 255.0,
            iterations=acfg["iterations"],
            loss_kind=loss_kind,
            mc_samples=acfg["mc_samples"],
            mist_weight=acfg["mist_weight"],
            edit_t_star=acfg["edit_t_star"],
            seed=exp.root.derive("attack", loss_kind, int(budget)).stream_key,
        )
        x_adv, results = attack_set(
            images, attack_cfg, ldm=ldm, pdm=pdm, target=target,
            batch_size=exp.batch_size, workers=exp.workers,
        )
        out_dir = exp.path("attack", loss_kind, f"delta_{budget}_255", "placeholder").parent
        _save_image_set(x_adv, out_dir)
        sidecar = {
            "budget_255": budget,
            "loss_kind": loss_kind,
            "linf": [r.linf for r in results],
            "loss_trajectories": [r.loss_trajectory.tolist() for r in results],
            "stalled": [r.stalled for r in results],
        }
        with open(out_dir / "attack_results.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True)
            fh.write("\n")
        log.info("attack %s delta=%d/255: mean linf %.5f", loss_kind, budget,
                 float(np.mean(sidecar["linf"])))
    return 0


def cmd_edit(cfg: dict) -> int:
    exp = Experiment(cfg)
    pdm, ae, ldm = exp.load_models()
    ecfg = cfg["edit"]
    images = _load_image_dir(ecfg["input_dir"]) if ecfg["input_dir"] else exp.eval_images()
    model = ldm if ecfg["model"] == "ldm" else pdm
    edited = edit_set(
        model, images, ecfg["t_star"], exp.root.derive("edit-cmd").stream_key,
        exp.batch_size, exp.workers,
    )
    _save_image_set(edited, exp.path("edit", ecfg["model"], "placeholder").parent)
    return 0


def cmd_purify(cfg: dict) -> int:
    exp = Experiment(cfg)
    pdm, ae, ldm = exp.load_models()
    pcfg_dict = cfg["purify"]
    images = _load_image_dir(pcfg_dict["input_dir"]) if pcfg_dict["input_dir"] else exp.eval_images()
    from .harness import _PurifyTask, _chunks, _run_tasks

    base_seed = exp.root.derive("purify-cmd").stream_key
    pure_cfg = PurifyConfig(
        method=pcfg_dict["method"],
        t_star=pcfg_dict["t_star"],
        grid_cell=pcfg_dict["grid_cell"],
        quality=pcfg_dict["quality"],
        crop_fraction=pcfg_dict["crop_fraction"],
        resample_factor=pcfg_dict["resample_factor"],
        filter_radius=pcfg_dict["filter_radius"],
        filter_eps=pcfg_dict["filter_eps"],
        seed=base_seed,
    )
    pure_cfg.validate()
    from dataclasses import replace

    tasks = [
        _PurifyTask(
            images[list(chunk)],
            [replace(pure_cfg, seed=Rng(base_seed).derive("item", i).stream_key) for i in chunk],
            pdm,
            ldm,
        )
        for chunk in _chunks(len(images), exp.batch_size)
    ]
    purified = np.concatenate(_run_tasks(tasks, exp.workers), axis=0)
    _save_image_set(purified, exp.path("purify", pcfg_dict["method"], "placeholder").parent)
    return 0


def cmd_evaluate(cfg: dict) -> int:
    exp = Experiment(cfg)
    pdm, ae, ldm = exp.load_models()
    feat = Featurizer(ae)
    ev = cfg["evaluation"]
    clean = exp.eval_images()
    edited_clean = _load_image_dir(ev["edited_clean_dir"]) if ev["edited_clean_dir"] else clean
    edited_adv = _load_image_dir(ev["edited_adv_dir"]) if ev["edited_adv_dir"] else clean
    clean_q = MetricReport.measure(edited_clean, clean, clean, feat)
    adv_q = MetricReport.measure(edited_adv, clean, clean, feat)
    clean_q.validate()
    adv_q.validate()
    report = Report(columns=("model", "attack", "budget_255", "metric", "clean", "adv", "delta"))
    for metric, cval, aval in (
        ("fid", clean_q.frechet, adv_q.frechet),
        ("ssim", clean_q.ssim, adv_q.ssim),
        ("psnr", clean_q.psnr, adv_q.psnr),
        ("perceptual", clean_q.perceptual, adv_q.perceptual),
        ("cosine", clean_q.cosine, adv_q.cosine),
    ):
        report.add(ev["label_model"], ev["label_attack"], ev["label_budget_255"], metric, cval, aval, aval - cval)
    write_report(report, exp.path("reports", "evaluation"))
    details = {"clean": clean_q.__dict__, "adv": adv_q.__dict__}
    with open(exp.path("reports", "evaluation_details.json"), "w", encoding="utf-8") as fh:
        json.dump(details, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_reproduce(cfg: dict) -> int:
    exp = Experiment(cfg)
    started = time.perf_counter()
    have_models = all(
        exp.checkpoint_path(s).exists() for s in ("pdm", "autoencoder", "latent")
    )
    if not have_models:
        log.info("checkpoints missing; training first")
        cmd_train(cfg)
    pdm, ae, ldm = exp.load_models()
    feat = Featurizer(ae)
    eval_images = exp.eval_images()
    workers, batch = exp.workers, exp.batch_size
    acfg = cfg["attack"]

    # (a) attack asymmetry across models and budgets
    outcomes = attack_asymmetry(
        pdm, ldm, feat, eval_images,
        budgets_255=tuple(acfg["budgets_255"]),
        iterations=acfg["iterations"],
        seed=exp.root.derive("reproduce", "asymmetry").stream_key,
        batch_size=batch,
        workers=workers,
    )
    attack_report = Report(columns=("model", "attack", "budget_255", "metric", "clean", "adv", "delta"))
    for oc in outcomes:
        cells = (
            ("fid", oc.clean.fid, oc.adv.fid),
            ("ssim", oc.clean.ssim_mean, oc.adv.ssim_mean),
            ("perceptual", oc.clean.perceptual_mean, oc.adv.perceptual_mean),
            ("cosine", oc.clean.cosine_mean, oc.adv.cosine_mean),
        )
        for metric, cval, aval in cells:
            attack_report.add(oc.model_kind, oc.attack, oc.budget_255, metric, cval, aval, aval - cval)
    write_report(attack_report, exp.path("reports", "attack_table"))

    # (d) latent-amplification histogram at the largest budget
    largest = max(acfg["budgets_255"])
    amp_values = next(
        oc.amplification for oc in outcomes if oc.model_kind == "ldm" and oc.budget_255 == largest
    )
    finite = amp_values[np.isfinite(amp_values)]
    edges = np.linspace(0.0, max(float(finite.max()), 2.0), 25)
    counts, _ = np.histogram(finite, bins=edges)
    amp_report = Report(columns=("bin_lo", "bin_hi", "count"))
    for lo, hi, n in zip(edges[:-1], edges[1:], counts):
        amp_report.add(float(lo), float(hi), int(n))
    write_report(amp_report, exp.path("reports", "amplification_histogram"))

    # (b) purification grid at the largest budget
    protect_kinds = ("semantic_latent", "textural", "mist", "sds_plus", "sds_minus", "ita")
    protected = {}
    for kind in protect_kinds:
        pg_cfg = AttackConfig(
            budget=largest / 255.0,
            step=acfg["step_255"] / 255.0,
            iterations=acfg["iterations"],
            loss_kind=kind,
            mc_samples=acfg["mc_samples"],
            mist_weight=acfg["mist_weight"],
            seed=exp.root.derive("reproduce", "protect", kind).stream_key,
        )
        protected[kind], _ = attack_set(
            eval_images, pg_cfg, ldm=ldm, pdm=pdm, batch_size=batch, workers=workers
        )
    pways = cfg["purify"]
    purify_cfgs = {
        "pdm_pure": PurifyConfig(method="pdm_pure", t_star=pways["t_star"],
                                 resample_factor=pways["resample_factor"], seed=1),
        "grid_pure": PurifyConfig(method="grid_pure", t_star=pways["t_star"], grid_cell=pways["grid_cell"], seed=2),
        "ldm_pure": PurifyConfig(method="ldm_pure", t_star=pways["t_star"], seed=3),
        "jpeg_dct": PurifyConfig(method="jpeg_dct", quality=pways["quality"]),
        "crop_resize": PurifyConfig(method="crop_resize", crop_fraction=pways["crop_fraction"]),
        "highfreq_filter": PurifyConfig(method="highfreq_filter", filter_radius=pways["filter_radius"],
                                        filter_eps=pways["filter_eps"]),
    }
    clean_fid, rows = purification_grid(
        pdm, ldm, feat, eval_images, protected, purify_cfgs,
        seed=exp.root.derive("reproduce", "purify").stream_key, batch_size=batch, workers=workers,
    )
    purify_report = Report(columns=("attack", "purifier", "metric", "value"))
    purify_report.add("none", "none", "fid", clean_fid)
    for row in rows:
        purify_report.add(row.attack, row.purifier, "fid", row.fid)
        purify_report.add(row.attack, row.purifier, "ssim", row.ssim_mean)
    write_report(purify_report, exp.path("reports", "purify_table"))

    # (c) t* ablation on the mist-protected set
    T = exp.sched.T
    ablation_report = Report(columns=("attack", "purifier", "t_star", "metric", "value"))
    fid_by_depth = {}
    for frac in (0.01, 0.1, 0.2):
        depth = max(1, round(frac * T))
        cfg_t = PurifyConfig(method="pdm_pure", t_star=depth, seed=4)
        _, t_rows = purification_grid(
            pdm, ldm, feat, eval_images, {"mist": protected["mist"]}, {"pdm_pure": cfg_t},
            seed=exp.root.derive("reproduce", "ablation", depth).stream_key, batch_size=batch, workers=workers,
        )
        row = next(r for r in t_rows if r.purifier == "pdm_pure")
        fid_by_depth[depth] = row.fid
        ablation_report.add("mist", "pdm_pure", depth, "fid", row.fid)
    write_report(ablation_report, exp.path("reports", "tstar_ablation"))

    # headline summary for human readers
    by_key = {(oc.model_kind, oc.budget_255): oc for oc in outcomes}
    ldm_16, pdm_16 = by_key[("ldm", largest)], by_key[("pdm", largest)]
    mist_none = next(r.fid for r in rows if r.attack == "mist" and r.purifier == "none")
    mist_pure = next(r.fid for r in rows if r.attack == "mist" and r.purifier == "pdm_pure")
    summary = {
        "largest_budget_255": largest,
        "ldm_fid_delta": ldm_16.adv.fid - ldm_16.clean.fid,
        "pdm_fid_delta": pdm_16.adv.fid - pdm_16.clean.fid,
        "ldm_ssim_significant": bool(ldm_16.ssim_significant),
        "ldm_ssim_p": ldm_16.ssim_p,
        "pdm_ssim_significant": bool(pdm_16.ssim_significant),
        "pdm_ssim_p": pdm_16.ssim_p,
        "median_amplification": float(np.median(finite)),
        "mist_recovery_pdm_pure": recovery_fraction(clean_fid, mist_none, mist_pure),
        "ablation_fid_by_depth": {str(k): v for k, v in sorted(fid_by_depth.items())},
    }
    with open(exp.path("reports", "reproduce_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")

    elapsed = time.perf_counter() - started
    if elapsed > 3600:
        log.warning("reproduce took %.0f s, above the 1 h desk-scale budget", elapsed)
    log.info("reproduce finished in %.1f s", elapsed)
    return 0


def cmd_gradcheck(_cfg=None) -> int:
    from .gradcheck import run_suite

    results = run_suite(20, verbose=True)
    worst = max(r.max_rel_err for r in results)
    total = sum(r.elapsed for r in results)
    print(f"worst relative error over {len(results)} networks: {worst:.3e} ({total:.1f}s)")
    return 0 if worst <= 1e-4 else 1


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "edit": cmd_edit,
    "purify": cmd_purify,
    "evaluate": cmd_evaluate,
    "reproduce": cmd_reproduce,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="diffdesk", description=__doc__)
    parser.add_argument("--version", action="version", version=f"diffdesk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")
        p.add_argument("--out", default=None, help="override output_dir")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--workers", type=int, default=None, help="override the worker count")
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            return COMMANDS[args.command](None)
        cfg = load_config(args.config, args.set, cli_args=args)
        return COMMANDS[args.command](cfg)
    except DiffdeskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

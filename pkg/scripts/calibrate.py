"""Calibration run: train production-scale toy models and probe the
directional claims (attack asymmetry, amplification, purification recovery)
at reduced eval size.  Writes findings to stdout; used to pin acceptance
defaults, not part of the test suite.
"""

import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from diffdesk.attacks import AttackConfig
from diffdesk.data_io import SyntheticSpec, generate_synthetic_dataset, save_checkpoint
from diffdesk.diffusion import make_linear_schedule, train
from diffdesk.harness import attack_asymmetry, attack_set, edit_set, eval_edit_depth, purification_grid, recovery_fraction
from diffdesk.metrics import Featurizer
from diffdesk.models import (
    Autoencoder,
    AutoencoderArch,
    DenoiserArch,
    LatentDiffusionModel,
    UNetDenoiser,
    measure_latent_scale,
    train_autoencoder,
)
from diffdesk.numerics import Tensor
from diffdesk.purify import PurifyConfig
from diffdesk.rng import Rng

t_start = time.time()


def stamp(msg):
    print(f"[{time.time() - t_start:7.1f}s] {msg}", flush=True)


SEED = 0
root = Rng(SEED)
sched = make_linear_schedule()

train_count = int(sys.argv[1]) if len(sys.argv) > 1 else 1200
pdm_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 6
eval_count = int(sys.argv[3]) if len(sys.argv) > 3 else 100

images = generate_synthetic_dataset(SyntheticSpec(size=32, count=train_count, seed=root.derive("dataset").stream_key))[0]
stamp(f"dataset {images.shape}")

ae = Autoencoder(AutoencoderArch(hidden=(24, 48), stem_channels=16, blocks_per_stage=2),
                 root.derive("init", "autoencoder"))
ae_epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 40
rep = train_autoencoder(ae, images, epochs=ae_epochs, lr=2e-3, rng=root.derive("train", "autoencoder"), batch_size=32)
stamp(f"AE trained: holdout MAE {ae.holdout_mae:.4f} (target <= 0.05), final loss {rep.final_mean:.5f}")

scale = measure_latent_scale(ae, images)
lat_all = []
for s in range(0, len(images), 64):
    lat_all.append(ae.encode(Tensor(images[s:s+64])).data)
latents = np.concatenate(lat_all) * scale
stamp(f"latent scale {scale:.3f}, latent std {latents.std():.3f}")

latent_den = UNetDenoiser(DenoiserArch(8, 8, 4, widths=(32, 64), blocks_per_level=2, time_dim=32), root.derive("init", "latent"))
latent_den.schedule = sched
rep = train(latent_den, latents, epochs=16, batch_size=32, lr=2e-3, rng=root.derive("train", "latent"), sched=sched)
stamp(f"latent denoiser: loss {rep.initial_mean:.3f} -> {rep.final_mean:.3f}")

pdm = UNetDenoiser(DenoiserArch(32, 32, 3, widths=(12, 24), blocks_per_level=2, time_dim=32), root.derive("init", "pdm"))
pdm.schedule = sched
rep = train(pdm, images, epochs=pdm_epochs, batch_size=16, lr=2e-3, rng=root.derive("train", "pdm"), sched=sched)
stamp(f"pdm: loss {rep.initial_mean:.3f} -> {rep.final_mean:.3f}")

# semantic attack loss trajectory diagnostic (does PGD actually climb?)
from diffdesk.attacks import make_loss_provider, pgd_attack as _pgd
_probe = generate_synthetic_dataset(SyntheticSpec(size=32, count=8, seed=1234))[0]
_prov = make_loss_provider("semantic_latent", ldm=LatentDiffusionModel(ae, latent_den, scale))
_res = _pgd(_probe, _prov, AttackConfig(budget=16/255, step=1/255, iterations=100, seed=77))
_traj = np.mean([r.loss_trajectory for r in _res], axis=0)
stamp(f"semantic PGD trajectory (mean over 8): start {_traj[:5].mean():.1f} mid {_traj[45:55].mean():.1f} end {_traj[-5:].mean():.1f}")

ldm = LatentDiffusionModel(ae, latent_den, scale)
feat = Featurizer(ae)
out = Path("/tmp/ddk-calib")
out.mkdir(exist_ok=True)
save_checkpoint(ae, out / "autoencoder.ckpt")
save_checkpoint(latent_den, out / "latent.ckpt", schedule_betas=sched.betas, extra={"latent_scale": scale})
save_checkpoint(pdm, out / "pdm.ckpt", schedule_betas=sched.betas)
stamp(f"checkpoints saved to {out}; featurizer dim {feat.dim}")

eval_images = generate_synthetic_dataset(SyntheticSpec(size=32, count=eval_count, seed=root.derive("eval-set").stream_key))[0]

# PDM sample-mean sanity
from diffdesk.diffusion import sample
samples = []
for i in range(64):
    samples.append(sample(pdm, (32, 32, 3), sched, root.derive("sample", i)))
samples = np.clip(np.stack(samples), 0, 1)
stamp(f"pdm 64-sample channel means {samples.mean(axis=(0,1,2))} vs dataset {images.mean(axis=(0,1,2))}")

depth = eval_edit_depth(sched.T)
outcomes = attack_asymmetry(pdm, ldm, feat, eval_images, budgets_255=(16,), iterations=100,
                            seed=root.derive("calib-asym").stream_key, batch_size=25)
for oc in outcomes:
    amp = f" amp_median {np.median(oc.amplification):.2f}" if oc.amplification is not None else ""
    stamp(
        f"{oc.model_kind}: clean fid {oc.clean.fid:.2f} ssim {oc.clean.ssim_mean:.3f} | "
        f"adv fid {oc.adv.fid:.2f} ssim {oc.adv.ssim_mean:.3f} | dfid {oc.adv.fid-oc.clean.fid:+.2f} "
        f"sig={oc.ssim_significant} p={oc.ssim_p:.2e}{amp}"
    )

ldm_oc = next(oc for oc in outcomes if oc.model_kind == "ldm")
pdm_oc = next(oc for oc in outcomes if oc.model_kind == "pdm")
dl, dp = ldm_oc.adv.fid - ldm_oc.clean.fid, pdm_oc.adv.fid - pdm_oc.clean.fid
stamp(f"asymmetry ratio: ldm dfid {dl:.2f} vs pdm dfid {dp:.2f} -> {'PASS' if dl >= 5 * dp and dl > 0 else 'FAIL'} (need >=5x)")

# purification probe on mist + textural + semantic
protected = {}
for kind in ("semantic_latent", "textural", "mist"):
    cfgk = AttackConfig(budget=16 / 255, step=1 / 255, iterations=100, loss_kind=kind,
                        seed=root.derive("calib-prot", kind).stream_key)
    protected[kind], _ = attack_set(eval_images, cfgk, ldm=ldm, pdm=pdm, batch_size=25)
    stamp(f"protected set {kind} done")

pcfgs = {
    "pdm_pure": PurifyConfig(method="pdm_pure", t_star=10, seed=1),
    "ldm_pure": PurifyConfig(method="ldm_pure", t_star=10, seed=3),
}
clean_fid, rows = purification_grid(pdm, ldm, feat, eval_images, protected, pcfgs,
                                    seed=root.derive("calib-pure").stream_key, batch_size=25)
for kind in protected:
    fid_none = next(r.fid for r in rows if r.attack == kind and r.purifier == "none")
    fid_pdm = next(r.fid for r in rows if r.attack == kind and r.purifier == "pdm_pure")
    fid_ldm = next(r.fid for r in rows if r.attack == kind and r.purifier == "ldm_pure")
    rec_pdm = recovery_fraction(clean_fid, fid_none, fid_pdm)
    rec_ldm = recovery_fraction(clean_fid, fid_none, fid_ldm)
    stamp(f"{kind}: clean {clean_fid:.2f} adv {fid_none:.2f} pdm_pure {fid_pdm:.2f} (rec {rec_pdm:.2f}) "
          f"ldm_pure {fid_ldm:.2f} (rec {rec_ldm:.2f})")

stamp("calibration done")

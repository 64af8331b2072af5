"""Resume directional probes from saved calibration checkpoints."""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from diffdesk.attacks import AttackConfig
from diffdesk.data_io import SyntheticSpec, generate_synthetic_dataset, load_checkpoint
from diffdesk.diffusion import NoiseSchedule
from diffdesk.harness import attack_asymmetry, attack_set, purification_grid, recovery_fraction
from diffdesk.metrics import Featurizer
from diffdesk.models import Autoencoder, AutoencoderArch, DenoiserArch, LatentDiffusionModel, UNetDenoiser
from diffdesk.purify import PurifyConfig
from diffdesk.rng import Rng

t0 = time.time()


def stamp(msg):
    print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)


ckpt_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/ddk-calib")
eval_count = int(sys.argv[2]) if len(sys.argv) > 2 else 160

ae_blob = load_checkpoint(ckpt_dir / "autoencoder.ckpt")
ae = Autoencoder(AutoencoderArch.from_dict(ae_blob["descriptor"]))
for n, a in ae_blob["params"].items():
    ae.parameters()[n].data = a
lat_blob = load_checkpoint(ckpt_dir / "latent.ckpt")
lat = UNetDenoiser(DenoiserArch.from_dict(lat_blob["descriptor"]))
for n, a in lat_blob["params"].items():
    lat.parameters()[n].data = a
lat.schedule = NoiseSchedule(lat_blob["betas"])
pdm_blob = load_checkpoint(ckpt_dir / "pdm.ckpt")
pdm = UNetDenoiser(DenoiserArch.from_dict(pdm_blob["descriptor"]))
for n, a in pdm_blob["params"].items():
    pdm.parameters()[n].data = a
pdm.schedule = NoiseSchedule(pdm_blob["betas"])
ldm = LatentDiffusionModel(ae, lat, lat_blob["descriptor"]["latent_scale"])
feat = Featurizer(ae)
stamp(f"loaded models from {ckpt_dir}; featurizer dim {feat.dim}")

root = Rng(0)
eval_images = generate_synthetic_dataset(
    SyntheticSpec(size=32, count=eval_count, seed=root.derive("eval-set").stream_key)
)[0]

outcomes = attack_asymmetry(pdm, ldm, feat, eval_images, budgets_255=(16,), iterations=100,
                            seed=root.derive("calib-asym").stream_key, batch_size=25)
for oc in outcomes:
    amp = f" amp_median {np.median(oc.amplification):.2f}" if oc.amplification is not None else ""
    stamp(
        f"{oc.model_kind}: clean fid {oc.clean.fid:.3f} ssim {oc.clean.ssim_mean:.3f} | "
        f"adv fid {oc.adv.fid:.3f} ssim {oc.adv.ssim_mean:.3f} | dfid {oc.adv.fid-oc.clean.fid:+.3f} "
        f"dssim {oc.adv.ssim_mean-oc.clean.ssim_mean:+.4f} sig={oc.ssim_significant} p={oc.ssim_p:.2e}{amp}"
    )
ldm_oc = next(oc for oc in outcomes if oc.model_kind == "ldm")
pdm_oc = next(oc for oc in outcomes if oc.model_kind == "pdm")
dl, dp = ldm_oc.adv.fid - ldm_oc.clean.fid, pdm_oc.adv.fid - pdm_oc.clean.fid
ok = dl > 0 and dl >= 5 * dp and ldm_oc.ssim_significant and not pdm_oc.ssim_significant
stamp(f"criterion-4 shape: dfid {dl:.3f} vs {dp:.3f}, sig {ldm_oc.ssim_significant}/{pdm_oc.ssim_significant} -> {'PASS' if ok else 'FAIL'}")

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
    stamp(f"{kind}: clean {clean_fid:.3f} adv {fid_none:.3f} pdm_pure {fid_pdm:.3f} "
          f"(rec {recovery_fraction(clean_fid, fid_none, fid_pdm):.2f}) "
          f"ldm_pure {fid_ldm:.3f} (rec {recovery_fraction(clean_fid, fid_none, fid_ldm):.2f})")
stamp("probe done")

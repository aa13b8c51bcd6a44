"""Scratch: clora-focused sweep with contextuality diagnostics (throwaway)."""
import itertools
import sys
import time

import numpy as np

from clora.adapters import AdapterConfig, Variant
from clora.datasets import DatasetSpec, generate_dataset
from clora.model import AdaptedModel, BackboneConfig, pretrain_backbone, forward
from clora.numerics import SeededRng
from clora.training import TrainConfig, TrainData, train
from clora import evaluation

spec = DatasetSpec()
bundle = generate_dataset(spec, SeededRng(0).split("dataset"))
bb_cfg = BackboneConfig()
backbone = pretrain_backbone(bb_cfg, bundle.source_x, bundle.source_y, SeededRng(0).split("backbone"))

MAP_BASE = {"acc": 0.712, "ece": 0.044, "nll": 0.523, "ood": 2.584}  # lr 3e-3, 3 seeds


def region_omega(model):
    """Mean predicted std split by noise region (x0<0 noisy, x0>=0 clean)."""
    noisy, clean = [], []
    for i in range(len(bundle.test_x)):
        x = bundle.test_x[i]
        _, tr = forward(model, x, mode="mean")
        val = np.mean([c.omega.mean() for c in tr.caches])
        (noisy if x[0] < 0 else clean).append(val)
    return np.mean(noisy), np.mean(clean)


def run(lr, kl_scale, lr_kl, omega_init=0.05, seeds=(0, 1, 2), iters=1500):
    accs, eces, nlls, oods, roms = [], [], [], [], []
    for seed in seeds:
        cfg = AdapterConfig(d=bb_cfg.d, variant=Variant.CLORA, omega_init=omega_init)
        model = AdaptedModel.init(backbone, cfg, spec.k, SeededRng(seed).split("init"))
        tc = TrainConfig(lr_main=lr, lr_kl=lr_kl, kl_scale=kl_scale, iters=iters, eval_every=100)
        train(model, TrainData(bundle.train_x, bundle.train_y, bundle.val_x, bundle.val_y),
              tc, SeededRng(seed).split("train"))
        rep = evaluation.evaluate(model, (bundle.test_x, bundle.test_y), 10, 15, None,
                                  SeededRng(seed).split("etest"))
        ood = evaluation.evaluate(model, bundle.shifted["shift_large"], 10, 15, None,
                                  SeededRng(seed).split("eood"))
        accs.append(rep.acc); eces.append(rep.ece); nlls.append(rep.nll); oods.append(ood.nll)
        roms.append(region_omega(model))
    rn, rc = np.mean([r[0] for r in roms]), np.mean([r[1] for r in roms])
    flags = []
    flags.append("E" if np.mean(eces) < MAP_BASE["ece"] else "e")
    flags.append("N" if np.mean(nlls) < MAP_BASE["nll"] else "n")
    flags.append("A" if np.mean(accs) >= MAP_BASE["acc"] - 0.05 else "a")
    flags.append("O" if np.mean(oods) < MAP_BASE["ood"] else "o")
    print(f"lr={lr:<7g} kls={str(kl_scale):<7s} lrkl={lr_kl:<5g} w0={omega_init:<5g} | "
          f"acc={np.mean(accs):.3f} ece={np.mean(eces):.3f} nll={np.mean(nlls):.3f} "
          f"ood={np.mean(oods):.3f} | om(noisy)={rn:.3f} om(clean)={rc:.3f} | {''.join(flags)}")


t0 = time.time()
for lr_kl in (0.2, 0.5, 1.0):
    run(3e-3, None, lr_kl)
run(3e-3, 0.02, 0.05)
run(3e-3, 0.05, 0.05)
print(f"total {time.time()-t0:.0f}s")

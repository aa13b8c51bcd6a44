"""Scratch: inspect validation curves per method (throwaway)."""
import sys

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

VAR = {"map": Variant.MAP, "fe": Variant.FE, "clora": Variant.CLORA}


def curve(method, lr, kl_scale, lr_kl=0.05, omega_init=0.05, seed=0, iters=1500):
    cfg = AdapterConfig(d=bb_cfg.d, variant=VAR[method], omega_init=omega_init)
    model = AdaptedModel.init(backbone, cfg, spec.k, SeededRng(seed).split("init"))
    tc = TrainConfig(lr_main=lr, lr_kl=lr_kl, kl_scale=kl_scale, iters=iters, eval_every=100)
    state = train(model, TrainData(bundle.train_x, bundle.train_y, bundle.val_x, bundle.val_y),
                  tc, SeededRng(seed).split("train"))
    print(f"--- {method} lr={lr} kls={kl_scale} lrkl={lr_kl} w0={omega_init} best={state.best_step}")
    for h in state.history:
        print(f"  t={h.step:<5d} nll={h.nll:.3f} kl={h.kl:.4f} acc={h.acc_val:.3f} "
              f"ece={h.ece_val:.3f} crit={h.criterion:.4f}")
    # posterior scale diagnostics on a few val points (clora)
    if method == "clora":
        oms, mus = [], []
        for i in range(20):
            _, tr = forward(model, bundle.val_x[i], mode="mean")
            oms.append([c.omega.mean() for c in tr.caches])
            mus.append([np.abs(c.mu).mean() for c in tr.caches])
        print("  mean omega per layer:", np.round(np.mean(oms, axis=0), 3))
        print("  mean |mu| per layer: ", np.round(np.mean(mus, axis=0), 3))
    return state


curve("map", 3e-3, None)
curve("clora", 3e-3, None)
curve("clora", 3e-3, 1.0)
curve("clora", 3e-3, 1.0, lr_kl=0.5)

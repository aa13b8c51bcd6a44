"""Scratch: hyperparameter sweep for the desk-scale protocol (throwaway)."""
import sys
import time

import numpy as np

from clora.adapters import AdapterConfig, Variant
from clora.datasets import DatasetSpec, generate_dataset
from clora.model import AdaptedModel, BackboneConfig, pretrain_backbone
from clora.numerics import SeededRng
from clora.training import TrainConfig, TrainData, train
from clora import evaluation

spec = DatasetSpec()
bundle = generate_dataset(spec, SeededRng(0).split("dataset"))
bb_cfg = BackboneConfig()
backbone = pretrain_backbone(bb_cfg, bundle.source_x, bundle.source_y, SeededRng(0).split("backbone"))
print(f"bayes={bundle.bayes_accuracy:.3f} backbone_acc={backbone.source_accuracy:.3f}")

SEEDS = [0, 1, 2]
VAR = {"map": Variant.MAP, "fe": Variant.FE, "clora": Variant.CLORA,
       "de": Variant.DE, "blob": Variant.BLOB}


def run(method, lr, kl_scale=None, lr_kl=0.05, iters=1500, omega_init=0.05, seeds=SEEDS):
    m_eval = 0 if method == "map" else 10
    res = {"test": [], "large": []}
    steps = []
    for seed in seeds:
        cfg = AdapterConfig(d=bb_cfg.d, variant=VAR[method], omega_init=omega_init)
        model = AdaptedModel.init(backbone, cfg, spec.k, SeededRng(seed).split("init"))
        tc = TrainConfig(lr_main=lr, lr_kl=lr_kl, kl_scale=kl_scale, iters=iters, eval_every=100)
        state = train(model, TrainData(bundle.train_x, bundle.train_y, bundle.val_x, bundle.val_y),
                      tc, SeededRng(seed).split("train"))
        steps.append(state.best_step)
        for name, ds in [("test", (bundle.test_x, bundle.test_y)),
                         ("large", bundle.shifted["shift_large"])]:
            res[name].append(evaluation.evaluate(model, ds, m_eval, 15, None,
                                                 SeededRng(seed).split(f"e{name}")))
    out = {}
    for name in res:
        out[name] = dict(
            acc=np.mean([r.acc for r in res[name]]),
            ece=np.mean([r.ece for r in res[name]]),
            nll=np.mean([r.nll for r in res[name]]),
        )
    t = out["test"]
    print(f"{method:6s} lr={lr:<7g} kls={kl_scale if kl_scale is not None else '1/N':<5} "
          f"lrkl={lr_kl:<5g} w0={omega_init:<4g} | acc={t['acc']:.3f} ece={t['ece']:.3f} "
          f"nll={t['nll']:.3f} | oodNLL={out['large']['nll']:.3f} steps={steps}")
    return out


def verdict(map_out, fe_out, clora_out):
    checks = [
        ("ECE clora<map", clora_out["test"]["ece"] < map_out["test"]["ece"]),
        ("NLL clora<map", clora_out["test"]["nll"] < map_out["test"]["nll"]),
        ("ACC clora>=map-0.05", clora_out["test"]["acc"] >= map_out["test"]["acc"] - 0.05),
        ("ECE clora<=fe", clora_out["test"]["ece"] <= fe_out["test"]["ece"]),
        ("NLL clora<=fe+0.02", clora_out["test"]["nll"] <= fe_out["test"]["nll"] + 0.02),
        ("OOD NLL clora<map", clora_out["large"]["nll"] < map_out["large"]["nll"]),
    ]
    for name, ok in checks:
        print(f"   {'PASS' if ok else 'FAIL'} {name}")


if __name__ == "__main__":
    t0 = time.time()
    for lr in (float(a) for a in sys.argv[1:] or ["3e-3"]):
        print(f"=== lr {lr} ===")
        m = run("map", lr)
        for kls in (None, 1.0):
            f = run("fe", lr, kl_scale=kls)
            c = run("clora", lr, kl_scale=kls)
            print(f" -- kl_scale={kls}")
            verdict(m, f, c)
    print(f"total {time.time()-t0:.0f}s")

"""Scratch: capacity/lr probe for the memorization regime (throwaway)."""
import sys
import time

import numpy as np

from clora.adapters import AdapterConfig, Variant
from clora.datasets import DatasetSpec, generate_dataset
from clora.model import AdaptedModel, BackboneConfig, pretrain_backbone
from clora.numerics import SeededRng
from clora.training import TrainConfig, TrainData, train
from clora import evaluation

D = int(sys.argv[1]) if len(sys.argv) > 1 else 64
LR = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-2
L = int(sys.argv[3]) if len(sys.argv) > 3 else 4

spec = DatasetSpec()
bundle = generate_dataset(spec, SeededRng(0).split("dataset"))
bb_cfg = BackboneConfig(d=D, layers=L)
backbone = pretrain_backbone(bb_cfg, bundle.source_x, bundle.source_y, SeededRng(0).split("backbone"))
data = TrainData(bundle.train_x, bundle.train_y, bundle.val_x, bundle.val_y)
print(f"d={D} L={L} lr={LR} backbone_acc={backbone.source_accuracy:.3f}")

t0 = time.time()
accs, eces, nlls, oods = [], [], [], []
for seed in (0, 1, 2):
    cfg = AdapterConfig(d=D, variant=Variant.MAP)
    model = AdaptedModel.init(backbone, cfg, spec.k, SeededRng(seed).split("init"))
    tc = TrainConfig(lr_main=LR, iters=1500, eval_every=100)
    state = train(model, data, tc, SeededRng(seed).split("train"))
    rep = evaluation.evaluate(model, (bundle.test_x, bundle.test_y), 0, 15, None, None)
    fit = evaluation.evaluate(model, (bundle.train_x, bundle.train_y), 0, 15, None, None)
    ood = evaluation.evaluate(model, bundle.shifted["shift_large"], 0, 15, None, None)
    accs.append(rep.acc); eces.append(rep.ece); nlls.append(rep.nll); oods.append(ood.nll)
    print(f"  seed{seed}: best_step={state.best_step} trainACC={fit.acc:.2f} trainNLL={fit.nll:.2f} "
          f"| test acc={rep.acc:.3f} ece={rep.ece:.3f} nll={rep.nll:.3f} oodNLL={ood.nll:.2f}")
print(f"map d={D} lr={LR}: acc={np.mean(accs):.3f} ece={np.mean(eces):.3f} "
      f"nll={np.mean(nlls):.3f} oodNLL={np.mean(oods):.3f}  [{time.time()-t0:.0f}s]")
